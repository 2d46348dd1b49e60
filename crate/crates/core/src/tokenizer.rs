//! Patch embedding: images `[B, H, W, C]` to a token grid `[B, H/4, W/4, d]`.
//!
//! The convolutional stack is
//!
//! ```text
//! conv3x3/s1 (C -> d/2) . GELU . conv3x3/s2 (d/2 -> d/2) . GELU
//! conv3x3/s1 (d/2 -> d) . GELU . conv3x3/s2 (d -> d)
//! ```
//!
//! with padding 1 everywhere, so each stride-2 stage halves the grid. The
//! linear alternative maps every non-overlapping 4x4xC block through one
//! shared affine map.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{uniform, Linear};
use crate::numerics::{Graph, ParamId, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PATCH: usize = 4;

/// Token grid with the input size it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<T> {
    /// `[B, h, w, d]`.
    pub tokens: Tensor<T>,
    pub source_hw: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Kind {
    Conv([Conv; 4]),
    Linear(Linear),
}

/// Tokenizer parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    kind: Kind,
    in_c: usize,
    d: usize,
}

impl Tokenizer {
    /// Registers the convolutional stack under `tokenizer.*`, with weights
    /// drawn from `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))` and zero biases.
    pub fn conv<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, in_c: usize, d: usize, rng: &mut R) -> Self {
        let half = d / 2;
        let spec = [(in_c, half, 1), (half, half, 2), (half, d, 1), (d, d, 2)];
        let convs = std::array::from_fn(|i| {
            let (cin, cout, stride) = spec[i];
            let bound = (6.0 / (9 * cin) as f64).sqrt();
            let w = store.add(format!("tokenizer.conv{i}.weight"), uniform(&[3, 3, cin, cout], bound, rng));
            let b = store.add(format!("tokenizer.conv{i}.bias"), Tensor::zeros(&[cout]));
            Conv { w, b, stride }
        });
        Self {
            kind: Kind::Conv(convs),
            in_c,
            d,
        }
    }

    /// Registers the linear patch embedding under `tokenizer.embed.*`.
    pub fn linear<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, in_c: usize, d: usize, rng: &mut R) -> Self {
        let lin = Linear::new(store, "tokenizer.embed", PATCH * PATCH * in_c, d, rng);
        Self {
            kind: Kind::Linear(lin),
            in_c,
            d,
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.kind, Kind::Linear(_))
    }

    /// Embeds a `[B, H, W, C]` image batch, producing `[B, H/4, W/4, d]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: Var) -> Result<Var> {
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[3] != self.in_c {
            return Err(Error::shape("tokenize", &shape, &[0, 0, 0, self.in_c]));
        }
        let (b, h, w) = (shape[0], shape[1], shape[2]);
        if h % PATCH != 0 || w % PATCH != 0 {
            return Err(Error::Config(format!("input {h}x{w} is not divisible by {PATCH}")));
        }
        match &self.kind {
            Kind::Conv(convs) => {
                let mut x = images;
                for (i, c) in convs.iter().enumerate() {
                    let (wv, bv) = (g.param(store, c.w), g.param(store, c.b));
                    x = g.conv2d(x, wv, bv, c.stride, 1)?;
                    if i + 1 < convs.len() {
                        x = g.gelu(x)?;
                    }
                }
                Ok(x)
            }
            Kind::Linear(lin) => {
                let (gh, gw) = (h / PATCH, w / PATCH);
                let index = patch_index(b, h, w, self.in_c);
                let patches = g.gather(images, index, &[b, gh, gw, PATCH * PATCH * self.in_c])?;
                lin.forward(g, store, patches)
            }
        }
    }

    /// Evaluates the tokenizer outside of training.
    pub fn tokenize<T: Scalar>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<TokenGrid<T>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, store, x)?;
        debug_assert_eq!(g.shape(out).last(), Some(&self.d));
        Ok(TokenGrid {
            tokens: g.value(out).clone(),
            source_hw: (images.shape()[1], images.shape()[2]),
        })
    }
}

/// Flat source offsets of every 4x4 block, ordered `(b, gy, gx, dy, dx, c)`.
fn patch_index(b: usize, h: usize, w: usize, c: usize) -> Arc<[usize]> {
    let (gh, gw) = (h / PATCH, w / PATCH);
    let mut idx = Vec::with_capacity(b * h * w * c);
    for n in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        let base = ((n * h + gy * PATCH + dy) * w + gx * PATCH + dx) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
        }
    }
    idx.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn grid_sizes() {
        let mut s = ParamStore::<f32>::new();
        let t = Tokenizer::conv(&mut s, 1, 8, &mut rng());
        let out = t.tokenize(&s, &Tensor::zeros(&[2, 28, 28, 1])).unwrap();
        assert_eq!(out.tokens.shape(), &[2, 7, 7, 8]);
        let mut s3 = ParamStore::<f32>::new();
        let t3 = Tokenizer::conv(&mut s3, 3, 8, &mut rng());
        assert_eq!(t3.tokenize(&s3, &Tensor::zeros(&[1, 32, 32, 3])).unwrap().tokens.shape(), &[1, 8, 8, 8]);
        assert_eq!(t3.tokenize(&s3, &Tensor::zeros(&[1, 4, 4, 3])).unwrap().tokens.shape(), &[1, 1, 1, 8]);
        assert!(t3.tokenize(&s3, &Tensor::zeros(&[1, 6, 8, 3])).is_err());
    }

    #[test]
    fn linear_embed_of_zero_image_with_zero_bias_is_zero() {
        let mut s = ParamStore::<f64>::new();
        let t = Tokenizer::linear(&mut s, 1, 4, &mut rng());
        let bias = s.find("tokenizer.embed.bias").unwrap();
        s.set_value(bias, Tensor::zeros(&[4])).unwrap();
        let out = t.tokenize(&s, &Tensor::zeros(&[1, 28, 28, 1])).unwrap();
        assert_eq!(out.tokens.shape(), &[1, 7, 7, 4]);
        assert!(out.tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_embed_of_constant_image_is_constant() {
        let mut s = ParamStore::<f64>::new();
        let t = Tokenizer::linear(&mut s, 1, 3, &mut rng());
        let out = t.tokenize(&s, &Tensor::full(&[1, 8, 12, 1], 0.7)).unwrap();
        let first = out.tokens.data()[..3].to_vec();
        for tok in out.tokens.data().chunks(3) {
            assert_eq!(tok, first.as_slice());
        }
    }

    #[test]
    fn patch_index_covers_every_pixel_once() {
        let idx = patch_index(2, 8, 4, 3);
        let mut seen = vec![0; 2 * 8 * 4 * 3];
        idx.iter().for_each(|&i| seen[i] += 1);
        assert!(seen.iter().all(|&c| c == 1));
    }
}
