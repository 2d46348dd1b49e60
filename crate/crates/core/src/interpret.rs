//! Interpretability: 2D level fields, agreement statistics, islands, PCA of
//! features, class-overlap proxy and the dump format.
//!
//! # Dump format
//!
//! A dump is a UTF-8 header followed by raw little-endian `f32` arrays:
//!
//! ```text
//! agglomerator-dump 1
//! kind <islands|latent>
//! meta <key> <value>                  (zero or more)
//! array <name> [<d0>,<d1>,...]        (one or more, in data order)
//! data
//! <array 0 bytes><array 1 bytes>...
//! ```
//!
//! Arrays are row-major and concatenated without padding, so the file size
//! is the header length plus four bytes per element. A CSV sidecar holds one
//! row per sample.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use petgraph::unionfind::UnionFind;

use crate::error::{Error, Result};
use crate::lattice::LatticeState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// CIFAR-10 classes grouped as vehicles: airplane, automobile, ship, truck.
pub const CIFAR10_VEHICLES: [usize; 4] = [0, 1, 8, 9];

/// Super-class of a CIFAR-10 label: 0 for vehicles, 1 for animals.
pub fn cifar10_superclass(label: usize) -> usize {
    usize::from(!CIFAR10_VEHICLES.contains(&label))
}

fn level<T>(s: &LatticeState<T>, b: usize, y: usize, x: usize, k: usize) -> &[T]
where
    T: Scalar,
{
    let (h, w) = s.grid();
    let (l, d) = (s.layers(), s.d());
    let o = ((((b * h + y) * w + x) * l) + k) * d;
    &s.levels.data()[o..o + d]
}

/// Affine map `d -> 2`: `v -> weight^T (v - center)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Reducer {
    pub center: Vec<f64>,
    /// Two rows of length `d`.
    pub weight: [Vec<f64>; 2],
}

impl Reducer {
    /// Keeps the first two coordinates.
    pub fn first_two(d: usize) -> Self {
        let mut w = [vec![0.0; d], vec![0.0; d]];
        w[0][0] = 1.0;
        w[1][1] = 1.0;
        Self {
            center: vec![0.0; d],
            weight: w,
        }
    }

    /// Fits the map by PCA over every level vector of layers `1..=K` in
    /// `state`.
    pub fn fit<T: Scalar>(state: &LatticeState<T>) -> Result<Self> {
        let (h, w) = state.grid();
        let mut rows = Vec::new();
        for b in 0..state.batch() {
            for y in 0..h {
                for x in 0..w {
                    for k in 1..state.layers() {
                        rows.push(level(state, b, y, x, k).iter().map(|v| v.as_f64()).collect::<Vec<_>>());
                    }
                }
            }
        }
        let pca = Pca::fit(&rows)?;
        Ok(Self {
            center: pca.mean,
            weight: pca.components,
        })
    }

    pub fn apply(&self, v: &[f64]) -> [f64; 2] {
        let dot = |w: &[f64]| w.iter().zip(v).zip(&self.center).map(|((w, v), c)| w * (v - c)).sum();
        [dot(&self.weight[0]), dot(&self.weight[1])]
    }
}

/// `[B, h, w, K, 2]` projections of every level of layers `1..=K`.
pub fn reduce_levels_2d<T: Scalar>(state: &LatticeState<T>, reducer: &Reducer) -> Tensor<f64> {
    let (h, w) = state.grid();
    let k_top = state.layers() - 1;
    let mut out = Vec::with_capacity(state.batch() * h * w * k_top * 2);
    for b in 0..state.batch() {
        for y in 0..h {
            for x in 0..w {
                for k in 1..=k_top {
                    let v: Vec<f64> = level(state, b, y, x, k).iter().map(|v| v.as_f64()).collect();
                    out.extend(reducer.apply(&v));
                }
            }
        }
    }
    Tensor::from_vec(&[state.batch(), h, w, k_top, 2], out).expect("shape matches data")
}

fn cosine<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let n = (aa * bb).sqrt();
    if n == 0.0 {
        0.0
    } else {
        (ab / n).clamp(-1.0, 1.0)
    }
}

/// The 4-connected edges of an `h x w` grid as flat index pairs.
fn grid_edges(h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut e = Vec::with_capacity(2 * h * w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                e.push((i, i + 1));
            }
            if y + 1 < h {
                e.push((i, i + w));
            }
        }
    }
    e
}

/// Mean cosine similarity between 4-connected neighbours at layer `k` for
/// every sample. A grid without neighbours scores 1.
pub fn neighbor_agreement_per_sample<T: Scalar>(state: &LatticeState<T>, k: usize) -> Result<Vec<f64>> {
    check_layer(state, k)?;
    let (h, w) = state.grid();
    let edges = grid_edges(h, w);
    Ok((0..state.batch())
        .map(|b| {
            if edges.is_empty() {
                return 1.0;
            }
            let at = |i: usize| level(state, b, i / w, i % w, k);
            edges.iter().map(|&(i, j)| cosine(at(i), at(j))).sum::<f64>() / edges.len() as f64
        })
        .collect())
}

/// [`neighbor_agreement_per_sample`] averaged over the batch.
pub fn neighbor_agreement<T: Scalar>(state: &LatticeState<T>, k: usize) -> Result<f64> {
    let v = neighbor_agreement_per_sample(state, k)?;
    Ok(v.iter().sum::<f64>() / v.len().max(1) as f64)
}

fn check_layer<T: Scalar>(state: &LatticeState<T>, k: usize) -> Result<()> {
    if k >= state.layers() {
        return Err(Error::InvalidArgument(format!("layer {k} out of range for {} layers", state.layers())));
    }
    Ok(())
}

/// Connected components of one sample's layer `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Islands {
    /// `h * w` component ids, numbered in raster order of first appearance.
    pub labels: Vec<usize>,
    pub count: usize,
}

/// Joins 4-connected neighbours whose cosine similarity is at least `tau`.
pub fn segment_islands<T: Scalar>(state: &LatticeState<T>, sample: usize, k: usize, tau: f64) -> Result<Islands> {
    check_layer(state, k)?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau {tau} outside (0, 1)")));
    }
    if sample >= state.batch() {
        return Err(Error::InvalidArgument(format!("sample {sample} out of range")));
    }
    let (h, w) = state.grid();
    let mut uf = UnionFind::<usize>::new(h * w);
    let at = |i: usize| level(state, sample, i / w, i % w, k);
    for (i, j) in grid_edges(h, w) {
        if cosine(at(i), at(j)) >= tau {
            uf.union(i, j);
        }
    }
    let mut ids = BTreeMap::new();
    let labels: Vec<usize> = (0..h * w)
        .map(|i| {
            let root = uf.find(i);
            let next = ids.len();
            *ids.entry(root).or_insert(next)
        })
        .collect();
    Ok(Islands { labels, count: ids.len() })
}

/// Principal component analysis with two components.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit principal directions; in each, the entry of largest magnitude is
    /// positive.
    pub components: [Vec<f64>; 2],
    /// Variances along the components (divisor `N - 1`).
    pub explained_variance: [f64; 2],
}

impl Pca {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 3 {
            return Err(Error::InvalidArgument(format!("PCA needs at least 3 samples, got {n}")));
        }
        let f = rows[0].len();
        if f == 0 || rows.iter().any(|r| r.len() != f) {
            return Err(Error::InvalidArgument("PCA rows must share a non-zero length".into()));
        }
        let mut mean = vec![0.0; f];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = DMatrix::from_fn(n, f, |i, j| rows[i][j] - mean[j]);
        let cov = centered.tr_mul(&centered) / (n as f64 - 1.0);
        let magnitude = 1.0 + mean.iter().map(|m| m * m).sum::<f64>();
        if !(cov.trace() > 1e-24 * magnitude) {
            return Err(Error::InvalidArgument("PCA input has rank 0".into()));
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..f).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let top = eig.eigenvalues[order[0]];
        let component = |idx: usize| -> Vec<f64> {
            let mut v: Vec<f64> = eig.eigenvectors.column(order[idx]).iter().copied().collect();
            if f < 2 && idx == 1 {
                return vec![0.0; f];
            }
            let lead = v.iter().fold(0.0f64, |m, &x| if x.abs() > m.abs() { x } else { m });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        };
        let second = if f > 1 { eig.eigenvalues[order[1]].max(0.0) } else { 0.0 };
        Ok(Self {
            components: [component(0), component(1)],
            explained_variance: [top, second],
            mean,
        })
    }

    pub fn project(&self, v: &[f64]) -> [f64; 2] {
        let dot = |c: &[f64]| c.iter().zip(v).zip(&self.mean).map(|((c, v), m)| c * (v - m)).sum();
        [dot(&self.components[0]), dot(&self.components[1])]
    }
}

/// Projects `rows` onto their top two principal directions.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<(Vec<[f64; 2]>, Pca)> {
    let pca = Pca::fit(rows)?;
    Ok((rows.iter().map(|r| pca.project(r)).collect(), pca))
}

/// Percentage of occupied cells shared by two groups.
///
/// The bounding box of all points is split into `grid x grid` cells; the
/// result is `100 |A and B| / |A or B|` over the sets of cells occupied by
/// group 0 and group 1 (`groups[i]` is 0 or 1).
pub fn overlap_metric(coords: &[[f64; 2]], groups: &[usize], grid: usize) -> Result<f64> {
    if coords.len() != groups.len() {
        return Err(Error::InvalidArgument(format!("{} points but {} group labels", coords.len(), groups.len())));
    }
    if grid == 0 {
        return Err(Error::InvalidArgument("grid must be positive".into()));
    }
    if let Some(g) = groups.iter().find(|&&g| g > 1) {
        return Err(Error::InvalidArgument(format!("group {g} is not 0 or 1")));
    }
    for g in 0..2 {
        if !groups.contains(&g) {
            return Err(Error::InvalidArgument(format!("group {g} is empty")));
        }
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in coords {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let cell = |p: &[f64; 2]| -> usize {
        let idx = |a: usize| {
            let span = hi[a] - lo[a];
            if span > 0.0 {
                (((p[a] - lo[a]) / span * grid as f64) as usize).min(grid - 1)
            } else {
                0
            }
        };
        idx(0) * grid + idx(1)
    };
    let mut occ = vec![[false; 2]; grid * grid];
    for (p, &g) in coords.iter().zip(groups) {
        occ[cell(p)][g] = true;
    }
    let both = occ.iter().filter(|c| c[0] && c[1]).count();
    let either = occ.iter().filter(|c| c[0] || c[1]).count();
    Ok(100.0 * both as f64 / either as f64)
}

/// An array of a dump.
#[derive(Clone, Debug, PartialEq)]
pub struct DumpArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// In-memory dump.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dump {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub arrays: Vec<DumpArray>,
}

const DUMP_MAGIC: &str = "agglomerator-dump 1";

fn shape_text(shape: &[usize]) -> String {
    format!("[{}]", shape.iter().map(usize::to_string).collect::<Vec<_>>().join(","))
}

impl Dump {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.into(),
            ..Self::default()
        }
    }

    pub fn meta(&mut self, key: &str, value: impl ToString) -> &mut Self {
        let value = value.to_string().replace(['\n', '\r'], " ");
        self.meta.push((key.into(), value));
        self
    }

    pub fn array(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<&mut Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("dump array", shape, &[data.len()]));
        }
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!("bad array name `{name}`")));
        }
        self.arrays.push(DumpArray {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Option<&DumpArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{DUMP_MAGIC}\nkind {}\n", self.kind);
        for (k, v) in &self.meta {
            head.push_str(&format!("meta {k} {v}\n"));
        }
        for a in &self.arrays {
            head.push_str(&format!("array {} {}\n", a.name, shape_text(&a.shape)));
        }
        head.push_str("data\n");
        let mut out = head.into_bytes();
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes, path)
    }

    pub fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |offset: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            offset: offset as u64,
            msg,
        };
        let mut pos = 0;
        let mut next_line = || -> Result<(usize, String)> {
            let start = pos;
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| err(start, "unterminated header line".into()))?;
            pos += end + 1;
            let line = std::str::from_utf8(&bytes[start..start + end]).map_err(|_| err(start, "header is not UTF-8".into()))?;
            Ok((start, line.to_string()))
        };
        let (at, magic) = next_line()?;
        if magic != DUMP_MAGIC {
            return Err(err(at, format!("bad magic `{magic}`")));
        }
        let mut dump = Dump::default();
        let mut shapes = Vec::new();
        loop {
            let (at, line) = next_line()?;
            let (tag, rest) = line.split_once(' ').unwrap_or((line.as_str(), ""));
            match tag {
                "kind" => dump.kind = rest.to_string(),
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    dump.meta.push((k.into(), v.into()));
                }
                "array" => {
                    let (name, shape) = rest.split_once(' ').ok_or_else(|| err(at, "array line needs a name and shape".into()))?;
                    let dims = shape
                        .strip_prefix('[')
                        .and_then(|s| s.strip_suffix(']'))
                        .ok_or_else(|| err(at, format!("bad shape `{shape}`")))?;
                    let dims: Vec<usize> = if dims.is_empty() {
                        Vec::new()
                    } else {
                        dims.split(',')
                            .map(|d| d.parse().map_err(|_| err(at, format!("bad dimension `{d}`"))))
                            .collect::<Result<_>>()?
                    };
                    shapes.push((name.to_string(), dims));
                }
                "data" => break,
                _ => return Err(err(at, format!("unknown header line `{line}`"))),
            }
        }
        let mut off = pos;
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let raw = bytes
                .get(off..off + 4 * n)
                .ok_or_else(|| err(bytes.len(), format!("array `{name}` truncated")))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            dump.arrays.push(DumpArray { name, shape, data });
            off += 4 * n;
        }
        if off != bytes.len() {
            return Err(err(off, format!("{} trailing bytes", bytes.len() - off)));
        }
        Ok(dump)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// One sample, `h x w` grid, layers `[0, 1]`, layer 1 given per position.
    fn state(h: usize, w: usize, vecs: &[Vec<f64>]) -> LatticeState<f64> {
        let d = vecs[0].len();
        let mut data = Vec::new();
        for v in vecs {
            data.extend(std::iter::repeat_n(0.0, d));
            data.extend(v);
        }
        LatticeState {
            levels: Tensor::from_vec(&[1, h, w, 2, d], data).unwrap(),
            t: 0,
        }
    }

    #[test]
    fn agreement_examples() {
        let uniform = state(3, 3, &vec![vec![1.0, 2.0]; 9]);
        assert!((neighbor_agreement(&uniform, 1).unwrap() - 1.0).abs() < 1e-12);
        let checker: Vec<Vec<f64>> = (0..9).map(|i| if (i / 3 + i % 3) % 2 == 0 { vec![1.0, 2.0] } else { vec![-1.0, -2.0] }).collect();
        assert!((neighbor_agreement(&state(3, 3, &checker), 1).unwrap() + 1.0).abs() < 1e-12);
        assert!(neighbor_agreement(&uniform, 2).is_err());
    }

    #[test]
    fn random_vectors_barely_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vecs: Vec<Vec<f64>> = (0..49).map(|_| (0..128).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        assert!(neighbor_agreement(&state(7, 7, &vecs), 1).unwrap().abs() < 0.05);
    }

    #[test]
    fn islands_examples() {
        let uniform = state(3, 4, &vec![vec![1.0, 0.5]; 12]);
        assert_eq!(segment_islands(&uniform, 0, 1, 0.9).unwrap().count, 1);
        let halves: Vec<Vec<f64>> = (0..12).map(|i| if i % 4 < 2 { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).collect();
        let s = segment_islands(&state(3, 4, &halves), 0, 1, 0.5).unwrap();
        assert_eq!(s.count, 2);
        assert_eq!(&s.labels[..4], &[0, 0, 1, 1]);
        assert!(segment_islands(&uniform, 0, 1, 1.0).is_err());
    }

    #[test]
    fn reducer_first_two_and_identity_arrows() {
        let vecs: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64, -(i as f64), 7.0]).collect();
        let s = state(2, 2, &vecs);
        let r = reduce_levels_2d(&s, &Reducer::first_two(3));
        assert_eq!(r.shape(), &[1, 2, 2, 1, 2]);
        assert_eq!(r.data(), &[0.0, 0.0, 1.0, -1.0, 2.0, -2.0, 3.0, -3.0]);
        let same = state(2, 2, &vec![vec![0.3, 0.1, 0.2]; 4]);
        let r = reduce_levels_2d(&same, &Reducer::first_two(3));
        assert!(r.data().chunks(2).all(|c| c == &r.data()[..2]));
    }

    #[test]
    fn pca_line_and_centering() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, 1.0]).collect();
        let (coords, pca) = pca_2d(&rows).unwrap();
        assert!(pca.explained_variance[1].abs() < 1e-10);
        let mean0: f64 = coords.iter().map(|c| c[0]).sum::<f64>() / 10.0;
        assert!(mean0.abs() < 1e-12);
        assert!(pca.components[0].iter().all(|&v| v >= 0.0));
        assert!(pca_2d(&vec![vec![1.0, 1.0]; 5]).is_err());
        assert!(pca_2d(&rows[..2]).is_err());
    }

    #[test]
    fn overlap_examples() {
        let pts = [[0.0, 0.0], [0.1, 0.1], [5.0, 5.0], [5.1, 5.0]];
        assert_eq!(overlap_metric(&pts, &[0, 0, 1, 1], 100).unwrap(), 0.0);
        let same = [[0.0, 0.0], [1.0, 1.0], [0.0, 0.0], [1.0, 1.0]];
        assert_eq!(overlap_metric(&same, &[0, 0, 1, 1], 100).unwrap(), 100.0);
        assert!(overlap_metric(&pts, &[0, 0, 0, 0], 100).is_err());
    }

    #[test]
    fn superclasses() {
        let v: Vec<usize> = (0..10).map(cifar10_superclass).collect();
        assert_eq!(v, vec![0, 0, 1, 1, 1, 1, 1, 1, 0, 0]);
    }

    #[test]
    fn dump_round_trip() {
        let mut d = Dump::new("islands");
        d.meta("config_hash", "abc").array("fields", &[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        d.array("labels", &[2], vec![3.0, 7.0]).unwrap();
        let bytes = d.to_bytes();
        let back = Dump::parse(&bytes, Path::new("d")).unwrap();
        assert_eq!(back, d);
        assert!(Dump::parse(&bytes[..bytes.len() - 1], Path::new("d")).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Dump::parse(&extra, Path::new("d")).is_err());
        assert!(d.array("bad", &[3], vec![1.0]).is_err());
    }
}
