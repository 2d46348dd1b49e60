//! RandAugment over `[H, W, C]` images with values in `[0, 1]`.
//!
//! Magnitude runs from 0 to 30. At magnitude `m` the strength `s = m / 30`
//! maps to the following ranges, each with a random sign:
//!
//! | op         | effect at strength `s`                          |
//! |------------|-------------------------------------------------|
//! | translate  | shift by `round(0.3 s W)` pixels, zero fill      |
//! | rotate     | up to `30 s` degrees about the centre, bilinear |
//! | shear      | shear factor `0.3 s`, bilinear                  |
//! | contrast   | blend with the image mean, factor `1 +- 0.9 s`  |
//! | brightness | scale by `1 +- 0.9 s`                           |
//! | sharpness  | blend with a 3x3 smoothed copy, `1 +- 0.9 s`    |
//! | cutout     | grey square of side `round(0.5 s W)`            |
//!
//! Results are clipped to `[0, 1]`. Magnitude 0 leaves every image
//! unchanged.

use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugmentOp {
    Identity,
    TranslateX,
    TranslateY,
    Rotate,
    ShearX,
    ShearY,
    Contrast,
    Brightness,
    Sharpness,
    Cutout,
}

impl AugmentOp {
    pub const POOL: [AugmentOp; 10] = [
        AugmentOp::Identity,
        AugmentOp::TranslateX,
        AugmentOp::TranslateY,
        AugmentOp::Rotate,
        AugmentOp::ShearX,
        AugmentOp::ShearY,
        AugmentOp::Contrast,
        AugmentOp::Brightness,
        AugmentOp::Sharpness,
        AugmentOp::Cutout,
    ];
}

pub const MAX_MAGNITUDE: f64 = 30.0;

/// Image dimensions `(H, W, C)`.
pub type Dims = (usize, usize, usize);

/// Applies `n_ops` operations drawn uniformly with replacement from
/// [`AugmentOp::POOL`] and returns them in order.
pub fn rand_augment<R: Rng + ?Sized>(image: &mut [f32], dims: Dims, n_ops: usize, magnitude: f64, rng: &mut R) -> Vec<AugmentOp> {
    debug_assert_eq!(image.len(), dims.0 * dims.1 * dims.2);
    let s = (magnitude / MAX_MAGNITUDE).clamp(0.0, 1.0);
    (0..n_ops)
        .map(|_| {
            let op = AugmentOp::POOL[rng.random_range(0..AugmentOp::POOL.len())];
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            apply(op, image, dims, s * sign, rng);
            op
        })
        .collect()
}

/// Applies one op at signed strength `s` in `[-1, 1]`.
pub fn apply<R: Rng + ?Sized>(op: AugmentOp, image: &mut [f32], dims: Dims, s: f64, rng: &mut R) {
    let (h, w, _) = dims;
    if s == 0.0 {
        return;
    }
    match op {
        AugmentOp::Identity => {}
        AugmentOp::TranslateX => translate(image, dims, (0.3 * s * w as f64).round() as isize, 0),
        AugmentOp::TranslateY => translate(image, dims, 0, (0.3 * s * h as f64).round() as isize),
        AugmentOp::Rotate => {
            let (sin, cos) = (30.0 * s).to_radians().sin_cos();
            warp(image, dims, [cos, -sin, sin, cos]);
        }
        AugmentOp::ShearX => warp(image, dims, [1.0, 0.3 * s, 0.0, 1.0]),
        AugmentOp::ShearY => warp(image, dims, [1.0, 0.0, 0.3 * s, 1.0]),
        AugmentOp::Contrast => {
            let mean = image.iter().map(|&v| f64::from(v)).sum::<f64>() / image.len() as f64;
            blend_with(image, |_, _| mean as f32, 1.0 + 0.9 * s);
        }
        AugmentOp::Brightness => blend_with(image, |_, _| 0.0, 1.0 + 0.9 * s),
        AugmentOp::Sharpness => {
            let smooth = smoothed(image, dims);
            blend_with(image, |i, _| smooth[i], 1.0 + 0.9 * s);
        }
        AugmentOp::Cutout => {
            let side = (0.5 * s.abs() * w as f64).round() as usize;
            if side > 0 {
                let cy = rng.random_range(0..h);
                let cx = rng.random_range(0..w);
                cutout(image, dims, cy, cx, side);
            }
        }
    }
}

/// `out = base + f (x - base)`, clipped.
fn blend_with(image: &mut [f32], base: impl Fn(usize, f32) -> f32, f: f64) {
    let f = f as f32;
    for (i, v) in image.iter_mut().enumerate() {
        let b = base(i, *v);
        *v = (b + f * (*v - b)).clamp(0.0, 1.0);
    }
}

fn translate(image: &mut [f32], (h, w, c): Dims, dx: isize, dy: isize) {
    let src = image.to_vec();
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = (y as isize - dy, x as isize - dx);
            let inside = (0..h as isize).contains(&sy) && (0..w as isize).contains(&sx);
            let o = (y * w + x) * c;
            for ch in 0..c {
                image[o + ch] = if inside { src[(sy as usize * w + sx as usize) * c + ch] } else { 0.0 };
            }
        }
    }
}

/// Inverse-maps each output pixel through the 2x2 matrix `m` about the
/// image centre and samples bilinearly with zero fill.
fn warp(image: &mut [f32], (h, w, c): Dims, m: [f64; 4]) {
    let src = image.to_vec();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let at = |y: isize, x: isize, ch: usize| -> f64 {
        if (0..h as isize).contains(&y) && (0..w as isize).contains(&x) {
            f64::from(src[(y as usize * w + x as usize) * c + ch])
        } else {
            0.0
        }
    };
    for y in 0..h {
        for x in 0..w {
            let (ry, rx) = (y as f64 - cy, x as f64 - cx);
            let sx = m[0] * rx + m[1] * ry + cx;
            let sy = m[2] * rx + m[3] * ry + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0, ch) + fx * at(y0, x0 + 1, ch))
                    + fy * ((1.0 - fx) * at(y0 + 1, x0, ch) + fx * at(y0 + 1, x0 + 1, ch));
                image[(y * w + x) * c + ch] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
}

/// 3x3 smoothing with centre weight 5 and neighbours 1; borders unchanged.
fn smoothed(image: &[f32], (h, w, c): Dims) -> Vec<f32> {
    let mut out = image.to_vec();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            for ch in 0..c {
                let mut acc = 4.0 * image[(y * w + x) * c + ch];
                for yy in y - 1..=y + 1 {
                    for xx in x - 1..=x + 1 {
                        acc += image[(yy * w + xx) * c + ch];
                    }
                }
                out[(y * w + x) * c + ch] = acc / 13.0;
            }
        }
    }
    out
}

fn cutout(image: &mut [f32], (h, w, c): Dims, cy: usize, cx: usize, side: usize) {
    let half = side / 2;
    let (y0, x0) = (cy.saturating_sub(half), cx.saturating_sub(half));
    for y in y0..(y0 + side).min(h) {
        for x in x0..(x0 + side).min(w) {
            image[(y * w + x) * c..(y * w + x + 1) * c].fill(0.5);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(dims: Dims) -> Vec<f32> {
        let n = dims.0 * dims.1 * dims.2;
        (0..n).map(|i| ((i * 37) % 101) as f32 / 100.0).collect()
    }

    #[test]
    fn magnitude_zero_is_identity() {
        let dims = (8, 6, 3);
        let orig = image(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let mut img = orig.clone();
            rand_augment(&mut img, dims, 3, 0.0, &mut rng);
            assert_eq!(img, orig);
        }
    }

    #[test]
    fn every_op_at_zero_strength_is_identity() {
        let dims = (5, 5, 1);
        let orig = image(dims);
        for op in AugmentOp::POOL {
            let mut img = orig.clone();
            apply(op, &mut img, dims, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
            assert_eq!(img, orig, "{op:?}");
        }
    }

    #[test]
    fn seeded_and_counted() {
        let dims = (28, 28, 1);
        let run = |seed| {
            let mut img = image(dims);
            let ops = rand_augment(&mut img, dims, 2, 10.0, &mut ChaCha8Rng::seed_from_u64(seed));
            (img, ops)
        };
        let (a, ops) = run(4);
        assert_eq!(ops.len(), 2);
        assert_eq!(run(4), (a.clone(), ops));
        assert!((0..20).any(|s| run(s).0 != a));
    }

    #[test]
    fn outputs_stay_in_range() {
        let dims = (12, 12, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for op in AugmentOp::POOL {
            for s in [-1.0, -0.3, 0.5, 1.0] {
                let mut img = image(dims);
                apply(op, &mut img, dims, s, &mut rng);
                assert!(img.iter().all(|v| (0.0..=1.0).contains(v)), "{op:?} {s}");
            }
        }
    }

    #[test]
    fn translate_shifts_pixels() {
        let dims = (3, 3, 1);
        let mut img = vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        translate(&mut img, dims, 1, 0);
        assert_eq!(img, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn half_turn_rotation_flips_the_grid() {
        let dims = (3, 3, 1);
        let orig = image(dims);
        let mut img = orig.clone();
        warp(&mut img, dims, [-1.0, 0.0, 0.0, -1.0]);
        let flipped: Vec<f32> = orig.iter().rev().copied().collect();
        for (a, b) in img.iter().zip(&flipped) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
