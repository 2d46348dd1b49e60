//! Reverse-mode differentiation over a per-iteration tape.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Nodes are
//! appended in evaluation order, so the tape order is already topological and
//! [`Graph::backward`] walks it once in reverse, popping (and freeing) each
//! node as soon as its vector-Jacobian product has been propagated. After
//! `backward` the graph is released and its variables become detached.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    idx: usize,
    graph: u64,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        tb: bool,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        fin: usize,
        fout: usize,
    },
    BiasAdd {
        x: usize,
        b: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Mix {
        mix: usize,
        row: usize,
        terms: Vec<(usize, usize)>,
    },
    Sum(usize),
    Mean(usize),
    MeanAxis {
        x: usize,
        len: usize,
        inner: usize,
    },
    Gelu(usize),
    Sin(usize),
    Relu(usize),
    Softmax {
        x: usize,
    },
    L2Normalize {
        x: usize,
        inv_norms: Vec<T>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout {
        x: usize,
        keep: Vec<bool>,
        scale: T,
    },
    Reshape(usize),
    Permute {
        x: usize,
        src_index: Vec<usize>,
    },
    Concat {
        xs: Vec<usize>,
        outer: usize,
        widths: Vec<usize>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
    Gather {
        x: usize,
        index: Arc<[usize]>,
    },
    ScatterAdd {
        x: usize,
        index: Arc<[usize]>,
    },
    ContrastiveNll {
        sim: usize,
        probs: Vec<T>,
        partners: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients of the leaves of a released graph.
#[derive(Debug)]
pub struct Gradients<T> {
    graph: u64,
    leaves: Vec<(usize, Option<ParamId>, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf variable, if it required one and was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.leaves
            .iter()
            .find(|(i, _, _)| *i == v.idx)
            .map(|(_, _, g)| g)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.leaves
            .iter()
            .find(|(_, p, _)| *p == Some(id))
            .map(|(_, _, g)| g)
    }

    /// Adds parameter gradients into the store's `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (_, pid, g) in &self.leaves {
            if let Some(pid) = pid {
                let p = store.get_mut(*pid);
                for (a, &b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }
}

pub struct Graph<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    live: bool,
    zero_norms: usize,
    bound: HashMap<ParamId, usize>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn add_into<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            live: true,
            zero_norms: 0,
            bound: HashMap::new(),
        }
    }

    /// Number of zero vectors met by [`Graph::l2_normalize`] so far.
    pub fn zero_norm_events(&self) -> usize {
        self.zero_norms
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if !self.live || v.graph != self.id || v.idx >= self.nodes.len() {
            return Err(Error::DetachedGraph);
        }
        Ok(v.idx)
    }

    /// Value of a variable. Panics if the variable is detached.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        let i = self.check(v).expect("variable is detached from this graph");
        &self.nodes[i].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.check(v).expect("detached variable")].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var {
            idx: self.nodes.len() - 1,
            graph: self.id,
        }
    }

    fn rg(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.input(value, false)
    }

    /// Leaf holding a copy of a stored parameter. Frozen
    /// parameters enter the graph as constants. Repeated calls with the same
    /// id return the same leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&idx) = self.bound.get(&id) {
            return Var { idx, graph: self.id };
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, !p.frozen);
        self.nodes[v.idx].param = Some(id);
        self.bound.insert(id, v.idx);
        v
    }

    // ── linear algebra ─────────────────────────────────────────────────

    /// 2-D product `op(a) @ op(b)`; `ta`/`tb` read the operand transposed.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(
            &mut out,
            self.nodes[ia].value.data(),
            self.nodes[ib].value.data(),
            m,
            k,
            n,
            ta,
            tb,
            false,
        );
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(
            Tensor::from_vec(&[m, n], out)?,
            Op::MatMul {
                a: ia,
                b: ib,
                m,
                k,
                n,
                ta,
                tb,
            },
            rg,
        ))
    }

    /// Batched product: `a` is `[batch, m, k]` (any shape with `batch*m*k`
    /// entries whose last axis is `k`), `b` is `[batch, k, n]`, or
    /// `[batch, n, k]` when `tb`. Output `[batch, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var, batch: usize, tb: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let k = va.last_dim();
        let bad = || Error::shape("bmm", va.shape(), vb.shape());
        if batch == 0 || k == 0 || va.len() % (batch * k) != 0 {
            return Err(bad());
        }
        let m = va.len() / (batch * k);
        let n = if tb {
            if vb.last_dim() != k || vb.len() % (batch * k) != 0 {
                return Err(bad());
            }
            vb.len() / (batch * k)
        } else {
            if vb.len() % (batch * k) != 0 {
                return Err(bad());
            }
            vb.len() / (batch * k)
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            use rayon::prelude::*;
            let (ad, bd) = (va.data(), vb.data());
            out.par_chunks_mut(m * n).enumerate().for_each(|(s, o)| {
                kernels::matmul(
                    o,
                    &ad[s * m * k..(s + 1) * m * k],
                    &bd[s * k * n..(s + 1) * k * n],
                    m,
                    k,
                    n,
                    false,
                    tb,
                    false,
                );
            });
        }
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(
            Tensor::from_vec(&[batch, m, n], out)?,
            Op::BatchMatMul {
                a: ia,
                b: ib,
                batch,
                m,
                k,
                n,
                tb,
            },
            rg,
        ))
    }

    /// Affine map over the last axis: `x @ w + b`, `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ib = b.map(|b| self.check(b)).transpose()?;
        let (vx, vw) = (&self.nodes[ix].value, &self.nodes[iw].value);
        if vw.rank() != 2 || vx.last_dim() != vw.shape()[0] || vx.rank() == 0 {
            return Err(Error::shape("linear", vx.shape(), vw.shape()));
        }
        let (fin, fout) = (vw.shape()[0], vw.shape()[1]);
        if let Some(ib) = ib {
            let vb = &self.nodes[ib].value;
            if vb.len() != fout {
                return Err(Error::shape("linear(bias)", vw.shape(), vb.shape()));
            }
        }
        let rows = vx.len() / fin.max(1);
        let mut out = vec![T::zero(); rows * fout];
        kernels::matmul(&mut out, vx.data(), vw.data(), rows, fin, fout, false, false, false);
        if let Some(ib) = ib {
            let bias = self.nodes[ib].value.data();
            for row in out.chunks_exact_mut(fout) {
                add_into(row, bias);
            }
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = fout;
        let mut deps = vec![ix, iw];
        deps.extend(ib);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::Linear {
                x: ix,
                w: iw,
                b: ib,
                fin,
                fout,
            },
            rg,
        ))
    }

    /// Adds a bias vector along the last axis.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(b)?);
        let (vx, vb) = (&self.nodes[ix].value, &self.nodes[ib].value);
        if vb.len() != vx.last_dim() {
            return Err(Error::shape("bias_add", vx.shape(), vb.shape()));
        }
        let mut out = vx.clone();
        let cols = vb.len();
        for row in out.data_mut().chunks_exact_mut(cols) {
            add_into(row, vb.data());
        }
        let rg = self.rg(&[ix, ib]);
        Ok(self.push(out, Op::BiasAdd { x: ix, b: ib }, rg))
    }

    // ── elementwise ────────────────────────────────────────────────────

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T + Sync) -> Result<(usize, usize, Tensor<T>)> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        same_shape(op, va, vb)?;
        let mut out = Tensor::zeros(va.shape());
        kernels::zip_map_into(out.data_mut(), va.data(), vb.data(), f);
        Ok((ia, ib, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(out, Op::Add(ia, ib), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(out, Op::Sub(ia, ib), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(out, Op::Mul(ia, ib), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let ix = self.check(x)?;
        let out = self.nodes[ix].value.map(|v| v * c);
        let rg = self.rg(&[ix]);
        Ok(self.push(out, Op::Scale(ix, c), rg))
    }

    /// Weighted arithmetic mean `Σ_j mix[row, col_j] * term_j / terms.len()`
    /// with the weights read from a trainable `[rows, cols]` matrix.
    pub fn mix(&mut self, mix: Var, row: usize, terms: &[(usize, Var)]) -> Result<Var> {
        let im = self.check(mix)?;
        let vm = &self.nodes[im].value;
        if terms.is_empty() || vm.rank() != 2 || row >= vm.shape()[0] {
            return Err(Error::shape("mix", vm.shape(), &[row, terms.len()]));
        }
        let cols = vm.shape()[1];
        let mut idx = Vec::with_capacity(terms.len());
        for &(col, v) in terms {
            if col >= cols {
                return Err(Error::shape("mix", vm.shape(), &[row, col]));
            }
            idx.push((col, self.check(v)?));
        }
        let shape = self.nodes[idx[0].1].value.shape().to_vec();
        for &(_, i) in &idx {
            same_shape("mix", &self.nodes[idx[0].1].value, &self.nodes[i].value)?;
        }
        let count = T::from_usize_lossy(idx.len());
        let mut out = vec![T::zero(); numel(&shape)];
        for &(col, i) in &idx {
            let w = vm.data()[row * cols + col] / count;
            for (o, &v) in out.iter_mut().zip(self.nodes[i].value.data()) {
                *o += w * v;
            }
        }
        let mut deps: Vec<usize> = idx.iter().map(|&(_, i)| i).collect();
        deps.push(im);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::Mix {
                mix: im,
                row,
                terms: idx,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s: T = self.nodes[ix].value.data().iter().copied().sum();
        let rg = self.rg(&[ix]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(ix), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let s: T = v.data().iter().copied().sum::<T>() / T::from_usize_lossy(v.len().max(1));
        let rg = self.rg(&[ix]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(ix), rg))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        if axis >= v.rank() {
            return Err(Error::shape("mean_axis", v.shape(), &[axis]));
        }
        let len = v.shape()[axis];
        let inner = numel(&v.shape()[axis + 1..]);
        let outer = numel(&v.shape()[..axis]);
        let inv = T::one() / T::from_usize_lossy(len.max(1));
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &v.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                add_into(&mut out[o * inner..(o + 1) * inner], src);
            }
        }
        out.iter_mut().for_each(|x| *x *= inv);
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(&[ix]);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::MeanAxis { x: ix, len, inner }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T + Sync, op: impl FnOnce(usize) -> Op<T>) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let mut out = Tensor::zeros(v.shape());
        kernels::map_into(out.data_mut(), v.data(), f);
        let rg = self.rg(&[ix]);
        Ok(self.push(out, op(ix), rg))
    }

    fn pointwise(&mut self, x: Var, kind: kernels::Pointwise, op: impl FnOnce(usize) -> Op<T>) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let mut out = Tensor::zeros(v.shape());
        kernels::pointwise(kind, out.data_mut(), v.data());
        let rg = self.rg(&[ix]);
        Ok(self.push(out, op(ix), rg))
    }

    /// GELU with the exact Gaussian CDF.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, kernels::Pointwise::Gelu, Op::Gelu)
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, kernels::Pointwise::Sin, Op::Sin)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(T::zero()), Op::Relu)
    }

    /// Softmax over the last axis. With a mask of `mask_rows x cols`
    /// booleans, row `r` only attends to columns where mask row
    /// `r % mask_rows` is `true`; every mask row must allow one column.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let cols = v.last_dim();
        let mask = match mask {
            Some(m) => {
                if cols == 0 || m.len() % cols != 0 || m.is_empty() {
                    return Err(Error::shape("softmax(mask)", v.shape(), &[m.len()]));
                }
                if m.chunks(cols).any(|r| !r.iter().any(|&b| b)) {
                    return Err(Error::InvalidArgument("softmax mask row allows no column".into()));
                }
                Some((m, m.len() / cols))
            }
            None => None,
        };
        let mut out = Tensor::zeros(v.shape());
        kernels::softmax_rows(out.data_mut(), v.data(), cols, mask);
        let rg = self.rg(&[ix]);
        Ok(self.push(out, Op::Softmax { x: ix }, rg))
    }

    /// Divides each last-axis vector by its Euclidean norm. Zero vectors map
    /// to zero and bump [`Graph::zero_norm_events`].
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let cols = v.last_dim().max(1);
        let mut out = v.clone();
        let mut inv_norms = Vec::with_capacity(v.len() / cols);
        let mut zeros = 0;
        for row in out.data_mut().chunks_exact_mut(cols) {
            let n = row.iter().map(|&a| a * a).sum::<T>().sqrt();
            let inv = if n > T::zero() {
                T::one() / n
            } else {
                zeros += 1;
                T::zero()
            };
            row.iter_mut().for_each(|a| *a *= inv);
            inv_norms.push(inv);
        }
        self.zero_norms += zeros;
        let rg = self.rg(&[ix]);
        Ok(self.push(out, Op::L2Normalize { x: ix, inv_norms }, rg))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let v = &self.nodes[ix].value;
        let cols = v.last_dim();
        let (vg, vb) = (&self.nodes[ig].value, &self.nodes[ib].value);
        if vg.len() != cols || vb.len() != cols {
            return Err(Error::shape("layer_norm", v.shape(), vg.shape()));
        }
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let inv_c = T::one() / T::from_usize_lossy(cols.max(1));
        let mut out = v.clone();
        let rows = v.len() / cols.max(1);
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for row in out.data_mut().chunks_exact_mut(cols) {
            let mu = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&a| (a - mu) * (a - mu)).sum::<T>() * inv_c;
            let r = T::one() / (var + eps).sqrt();
            for (j, a) in row.iter_mut().enumerate() {
                *a = (*a - mu) * r * vg.data()[j] + vb.data()[j];
            }
            mean.push(mu);
            rstd.push(r);
        }
        let rg = self.rg(&[ix, ig, ib]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// Inverted dropout: in training mode each entry is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`. Identity in
    /// evaluation mode.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        let ix = self.check(x)?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout rate {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let threshold = (p * 4_294_967_296.0) as u64;
        let v = &self.nodes[ix].value;
        let keep = crate::rng::bernoulli_mask(rng.next_u64(), v.len(), threshold);
        let scale = T::from_f64_lossy(1.0 / (1.0 - p));
        let mut out = v.clone();
        let gain = [T::zero(), scale];
        for (o, &k) in out.data_mut().iter_mut().zip(&keep) {
            *o *= gain[usize::from(k)];
        }
        let rg = self.rg(&[ix]);
        Ok(self.push(out, Op::Dropout { x: ix, keep, scale }, rg))
    }

    // ── layout ─────────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let out = self.nodes[ix].value.clone().reshape(shape)?;
        let rg = self.rg(&[ix]);
        Ok(self.push(out, Op::Reshape(ix), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let rank = v.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", v.shape(), perm));
        }
        let in_shape = v.shape();
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let total = v.len();
        let mut src_index = Vec::with_capacity(total);
        let mut coord = vec![0usize; rank];
        for _ in 0..total {
            src_index.push(coord.iter().zip(perm).map(|(&c, &p)| c * in_strides[p]).sum());
            for ax in (0..rank).rev() {
                coord[ax] += 1;
                if coord[ax] < out_shape[ax] {
                    break;
                }
                coord[ax] = 0;
            }
        }
        let data = src_index.iter().map(|&s| v.data()[s]).collect();
        let rg = self.rg(&[ix]);
        Ok(self.push(Tensor::from_vec(&out_shape, data)?, Op::Permute { x: ix, src_index }, rg))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let idx: Vec<usize> = xs.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        let first = match idx.first() {
            Some(&i) => self.nodes[i].value.shape().to_vec(),
            None => return Err(Error::InvalidArgument("concat of zero tensors".into())),
        };
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut shape = first.clone();
        shape[axis] = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s.len() != first.len() || s.iter().enumerate().any(|(a, &d)| a != axis && d != first[a]) {
                return Err(Error::shape("concat", &first, s));
            }
            shape[axis] += s[axis];
        }
        let outer = numel(&first[..axis]);
        let widths: Vec<usize> = idx.iter().map(|&i| numel(&self.nodes[i].value.shape()[axis..])).collect();
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for (&i, &w) in idx.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[i].value.data()[o * w..(o + 1) * w]);
            }
        }
        let rg = self.rg(&idx);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Concat { xs: idx, outer, widths }, rg))
    }

    /// Flat gather: `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        if numel(shape) != index.len() || index.iter().any(|&i| i >= v.len()) {
            return Err(Error::shape("gather", v.shape(), shape));
        }
        let data = index.iter().map(|&i| v.data()[i]).collect();
        let rg = self.rg(&[ix]);
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::Gather { x: ix, index }, rg))
    }

    /// Flat scatter-add: `out[index[i]] += x[i]` into a zero tensor of `shape`.
    pub fn scatter_add(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let total = numel(shape);
        if v.len() != index.len() || index.iter().any(|&i| i >= total) {
            return Err(Error::shape("scatter_add", v.shape(), shape));
        }
        let mut data = vec![T::zero(); total];
        for (&i, &a) in index.iter().zip(v.data()) {
            data[i] += a;
        }
        let rg = self.rg(&[ix]);
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::ScatterAdd { x: ix, index }, rg))
    }

    // ── spatial ────────────────────────────────────────────────────────

    /// 2-D convolution over NHWC input with `[k, k, in_c, out_c]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ix, iw, ib) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (vx, vw, vb) = (&self.nodes[ix].value, &self.nodes[iw].value, &self.nodes[ib].value);
        let (xs, ws) = (vx.shape(), vw.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[0] != ws[1] || ws[2] != xs[3] || vb.len() != ws[3] || stride == 0 {
            return Err(Error::shape("conv2d", xs, ws));
        }
        if xs[1] + 2 * pad < ws[0] || xs[2] + 2 * pad < ws[0] {
            return Err(Error::shape("conv2d", xs, ws));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_h: xs[1],
            in_w: xs[2],
            in_c: xs[3],
            out_c: ws[3],
            kernel: ws[0],
            stride,
            pad,
        };
        let shape = [geom.batch, geom.out_h(), geom.out_w(), geom.out_c];
        let mut out = vec![T::zero(); numel(&shape)];
        geom.forward(vx.data(), vw.data(), vb.data(), &mut out);
        let rg = self.rg(&[ix, iw, ib]);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Conv2d { x: ix, w: iw, b: ib, geom }, rg))
    }

    /// Max pooling over NHWC input, square window, no padding.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let s = v.shape();
        if s.len() != 4 || kernel == 0 || stride == 0 || s[1] < kernel || s[2] < kernel {
            return Err(Error::shape("max_pool2d", s, &[kernel, stride]));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let mut out = Vec::with_capacity(b * oh * ow * c);
        let mut argmax = Vec::with_capacity(b * oh * ow * c);
        for n in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = T::neg_infinity();
                        let mut at = 0;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let i = ((n * h + oy * stride + ky) * w + ox * stride + kx) * c + ch;
                                if v.data()[i] > best || ky + kx == 0 {
                                    best = v.data()[i];
                                    at = i;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(at);
                    }
                }
            }
        }
        let rg = self.rg(&[ix]);
        Ok(self.push(Tensor::from_vec(&[b, oh, ow, c], out)?, Op::MaxPool2d { x: ix, argmax }, rg))
    }

    // ── losses ─────────────────────────────────────────────────────────

    /// Mean over anchors of `-log(e^{s_ab} / (e^{s_ab} + Σ_{k: y_k ≠ y_a} e^{s_ak}))`
    /// where `b = partners[a]` and `s` is the `[N, N]` logit matrix.
    pub fn contrastive_nll(&mut self, sim: Var, labels: &[usize], partners: &[usize]) -> Result<Var> {
        let is = self.check(sim)?;
        let v = &self.nodes[is].value;
        let n = labels.len();
        if v.shape() != [n, n] || partners.len() != n {
            return Err(Error::shape("contrastive_nll", v.shape(), &[n, partners.len()]));
        }
        if let Some(a) = (0..n).find(|&a| partners[a] >= n || partners[a] == a) {
            return Err(Error::InvalidArgument(format!("anchor {a} has invalid partner")));
        }
        let mut probs = vec![T::zero(); n * n];
        let mut total = T::zero();
        for a in 0..n {
            let row = &v.data()[a * n..(a + 1) * n];
            let b = partners[a];
            let member = |k: usize| k != a && (k == b || labels[k] != labels[a]);
            let max = (0..n).filter(|&k| member(k)).map(|k| row[k]).fold(T::neg_infinity(), T::max);
            let p = &mut probs[a * n..(a + 1) * n];
            let mut z = T::zero();
            for k in (0..n).filter(|&k| member(k)) {
                p[k] = (row[k] - max).exp();
                z += p[k];
            }
            p.iter_mut().for_each(|x| *x /= z);
            total += max + z.ln() - row[b];
        }
        let loss = total / T::from_usize_lossy(n.max(1));
        let rg = self.rg(&[is]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::ContrastiveNll {
                sim: is,
                probs,
                partners: partners.to_vec(),
            },
            rg,
        ))
    }

    /// Batch mean of `-(1/C) log softmax(logits)[label]` for `[B, C]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let v = &self.nodes[il].value;
        if v.rank() != 2 || v.shape()[0] != labels.len() {
            return Err(Error::shape("cross_entropy", v.shape(), &[labels.len()]));
        }
        let c = v.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::InvalidArgument(format!("label {bad} >= class count {c}")));
        }
        let mut probs = vec![T::zero(); v.len()];
        kernels::softmax_rows(&mut probs, v.data(), c, None);
        let inv_c = T::one() / T::from_usize_lossy(c);
        let mut total = T::zero();
        for (b, &y) in labels.iter().enumerate() {
            let row = &v.data()[b * c..(b + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            total += (lse - row[y]) * inv_c;
        }
        let loss = total / T::from_usize_lossy(labels.len().max(1));
        let rg = self.rg(&[il]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: il,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Back-propagates from a scalar `loss` and releases the graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let il = self.check(loss)?;
        let lv = &self.nodes[il].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=il).map(|_| None).collect();
        grads[il] = Some(vec![T::one()]);
        self.nodes.truncate(il + 1);
        let mut leaves = Vec::new();
        while let Some(node) = self.nodes.pop() {
            let i = self.nodes.len();
            let Some(g) = grads[i].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.push((i, node.param, Tensor::from_vec(node.value.shape(), g)?));
                continue;
            }
            backprop(&self.nodes, &mut grads, node, &g);
        }
        self.live = false;
        leaves.reverse();
        Ok(Gradients { graph: self.id, leaves })
    }
}

/// Gradient buffer of node `i`, created zeroed on first use.
fn slot<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], i: usize) -> Option<&'a mut Vec<T>> {
    if !nodes[i].requires_grad {
        return None;
    }
    Some(grads[i].get_or_insert_with(|| vec![T::zero(); nodes[i].value.len()]))
}

fn backprop<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], node: Node<T>, g: &[T]) {
    let val = |i: usize| nodes[i].value.data();
    match node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n, ta, tb } => {
            if let Some(da) = slot(grads, nodes, a) {
                if ta {
                    kernels::matmul(da, val(b), g, k, n, m, tb, true, true);
                } else {
                    kernels::matmul(da, g, val(b), m, n, k, false, !tb, true);
                }
            }
            if let Some(db) = slot(grads, nodes, b) {
                if tb {
                    kernels::matmul(db, g, val(a), n, m, k, true, ta, true);
                } else {
                    kernels::matmul(db, val(a), g, k, m, n, !ta, false, true);
                }
            }
        }
        Op::BatchMatMul { a, b, batch, m, k, n, tb } => {
            use rayon::prelude::*;
            if let Some(da) = slot(grads, nodes, a) {
                let bv = val(b);
                da.par_chunks_mut(m * k).enumerate().for_each(|(s, da)| {
                    let gs = &g[s * m * n..(s + 1) * m * n];
                    kernels::matmul(da, gs, &bv[s * k * n..(s + 1) * k * n], m, n, k, false, !tb, true);
                });
            }
            if let Some(db) = slot(grads, nodes, b) {
                let av = val(a);
                db.par_chunks_mut(k * n).enumerate().for_each(|(s, db)| {
                    let gs = &g[s * m * n..(s + 1) * m * n];
                    let as_ = &av[s * m * k..(s + 1) * m * k];
                    if tb {
                        kernels::matmul(db, gs, as_, n, m, k, true, false, true);
                    } else {
                        kernels::matmul(db, as_, gs, k, m, n, true, false, true);
                    }
                });
            }
            let _ = batch;
        }
        Op::Linear { x, w, b, fin, fout } => {
            let rows = g.len() / fout.max(1);
            if let Some(dx) = slot(grads, nodes, x) {
                kernels::matmul(dx, g, val(w), rows, fout, fin, false, true, true);
            }
            if let Some(dw) = slot(grads, nodes, w) {
                kernels::matmul(dw, val(x), g, fin, rows, fout, true, false, true);
            }
            if let Some(b) = b {
                if let Some(db) = slot(grads, nodes, b) {
                    kernels::column_sums(db, g, fout);
                }
            }
        }
        Op::BiasAdd { x, b } => {
            if let Some(dx) = slot(grads, nodes, x) {
                add_into(dx, g);
            }
            let cols = nodes[b].value.len();
            if let Some(db) = slot(grads, nodes, b) {
                kernels::column_sums(db, g, cols);
            }
        }
        Op::Add(a, b) => {
            for i in [a, b] {
                if let Some(d) = slot(grads, nodes, i) {
                    add_into(d, g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = slot(grads, nodes, a) {
                add_into(d, g);
            }
            if let Some(d) = slot(grads, nodes, b) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g);
            }
        }
        Op::Mul(a, b) => {
            if let Some(d) = slot(grads, nodes, a) {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(val(b)) {
                    *d += g * y;
                }
            }
            if let Some(d) = slot(grads, nodes, b) {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(val(a)) {
                    *d += g * y;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(d) = slot(grads, nodes, x) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += c * g);
            }
        }
        Op::Mix { mix, row, terms } => {
            let cols = nodes[mix].value.shape()[1];
            let count = T::from_usize_lossy(terms.len());
            let weights: Vec<T> = terms.iter().map(|&(c, _)| val(mix)[row * cols + c] / count).collect();
            let dots: Vec<T> = terms
                .iter()
                .map(|&(_, t)| g.iter().zip(val(t)).map(|(&a, &b)| a * b).sum::<T>() / count)
                .collect();
            for (&(_, t), &w) in terms.iter().zip(&weights) {
                if let Some(d) = slot(grads, nodes, t) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += w * g);
                }
            }
            if let Some(dm) = slot(grads, nodes, mix) {
                for (&(c, _), &dot) in terms.iter().zip(&dots) {
                    dm[row * cols + c] += dot;
                }
            }
        }
        Op::Sum(x) => {
            if let Some(d) = slot(grads, nodes, x) {
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(x) => {
            let s = g[0] / T::from_usize_lossy(nodes[x].value.len().max(1));
            if let Some(d) = slot(grads, nodes, x) {
                d.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::MeanAxis { x, len, inner } => {
            let inv = T::one() / T::from_usize_lossy(len.max(1));
            if let Some(d) = slot(grads, nodes, x) {
                for (o, chunk) in d.chunks_exact_mut(len * inner).enumerate() {
                    let go = &g[o * inner..(o + 1) * inner];
                    for seg in chunk.chunks_exact_mut(inner) {
                        seg.iter_mut().zip(go).for_each(|(d, &g)| *d += g * inv);
                    }
                }
            }
        }
        Op::Gelu(x) => pointwise_back(nodes, grads, x, g, kernels::Pointwise::Gelu),
        Op::Sin(x) => pointwise_back(nodes, grads, x, g, kernels::Pointwise::Sin),
        Op::Relu(x) => unary_back(nodes, grads, x, g, |v| if v > T::zero() { T::one() } else { T::zero() }),
        Op::Softmax { x } => {
            let y = node.value.data();
            let cols = node.value.last_dim();
            if let Some(d) = slot(grads, nodes, x) {
                for ((d, ys), gs) in d.chunks_exact_mut(cols).zip(y.chunks_exact(cols)).zip(g.chunks_exact(cols)) {
                    let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                    for ((d, &y), &g) in d.iter_mut().zip(ys).zip(gs) {
                        *d += y * (g - dot);
                    }
                }
            }
        }
        Op::L2Normalize { x, inv_norms } => {
            let y = node.value.data();
            let cols = node.value.last_dim().max(1);
            if let Some(d) = slot(grads, nodes, x) {
                for (((d, ys), gs), &inv) in d
                    .chunks_exact_mut(cols)
                    .zip(y.chunks_exact(cols))
                    .zip(g.chunks_exact(cols))
                    .zip(&inv_norms)
                {
                    let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                    for ((d, &y), &g) in d.iter_mut().zip(ys).zip(gs) {
                        *d += (g - y * dot) * inv;
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, mean, rstd } => {
            let cols = node.value.last_dim();
            let xv = val(x);
            let gam = val(gamma).to_vec();
            let inv_c = T::one() / T::from_usize_lossy(cols.max(1));
            let xhat = |r: usize, j: usize| (xv[r * cols + j] - mean[r]) * rstd[r];
            if let Some(dg) = slot(grads, nodes, gamma) {
                for (r, gs) in g.chunks_exact(cols).enumerate() {
                    for (j, &gv) in gs.iter().enumerate() {
                        dg[j] += gv * xhat(r, j);
                    }
                }
            }
            if let Some(db) = slot(grads, nodes, beta) {
                kernels::column_sums(db, g, cols);
            }
            if let Some(dx) = slot(grads, nodes, x) {
                for (r, (dxs, gs)) in dx.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).enumerate() {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for (j, &gv) in gs.iter().enumerate() {
                        let dxh = gv * gam[j];
                        m1 += dxh;
                        m2 += dxh * xhat(r, j);
                    }
                    m1 *= inv_c;
                    m2 *= inv_c;
                    for (j, (d, &gv)) in dxs.iter_mut().zip(gs).enumerate() {
                        *d += rstd[r] * (gv * gam[j] - m1 - xhat(r, j) * m2);
                    }
                }
            }
        }
        Op::Dropout { x, keep, scale } => {
            if let Some(d) = slot(grads, nodes, x) {
                let gain = [T::zero(), scale];
                for ((d, &g), &k) in d.iter_mut().zip(g).zip(&keep) {
                    *d += g * gain[usize::from(k)];
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(d) = slot(grads, nodes, x) {
                add_into(d, g);
            }
        }
        Op::Permute { x, src_index } => {
            if let Some(d) = slot(grads, nodes, x) {
                for (&s, &gv) in src_index.iter().zip(g) {
                    d[s] += gv;
                }
            }
        }
        Op::Concat { xs, outer, widths } => {
            let total: usize = widths.iter().sum();
            let mut off = 0;
            for (&i, &w) in xs.iter().zip(&widths) {
                if let Some(d) = slot(grads, nodes, i) {
                    for o in 0..outer {
                        add_into(&mut d[o * w..(o + 1) * w], &g[o * total + off..o * total + off + w]);
                    }
                }
                off += w;
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            if let Some(dx) = slot(grads, nodes, x) {
                geom.backward_input(g, val(w), dx);
            }
            if let Some(dw) = slot(grads, nodes, w) {
                geom.backward_weight(val(x), g, dw);
            }
            if let Some(db) = slot(grads, nodes, b) {
                kernels::column_sums(db, g, geom.out_c);
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if let Some(d) = slot(grads, nodes, x) {
                for (&i, &gv) in argmax.iter().zip(g) {
                    d[i] += gv;
                }
            }
        }
        Op::Gather { x, index } => {
            if let Some(d) = slot(grads, nodes, x) {
                for (&i, &gv) in index.iter().zip(g) {
                    d[i] += gv;
                }
            }
        }
        Op::ScatterAdd { x, index } => {
            if let Some(d) = slot(grads, nodes, x) {
                for (d, &i) in d.iter_mut().zip(index.iter()) {
                    *d += g[i];
                }
            }
        }
        Op::ContrastiveNll { sim, probs, partners } => {
            let n = partners.len();
            let s = g[0] / T::from_usize_lossy(n.max(1));
            if let Some(d) = slot(grads, nodes, sim) {
                for (i, (d, &p)) in d.iter_mut().zip(&probs).enumerate() {
                    *d += s * p;
                    if partners[i / n] == i % n {
                        *d -= s;
                    }
                }
            }
        }
        Op::CrossEntropy { logits, probs, labels } => {
            let c = nodes[logits].value.shape()[1];
            let s = g[0] / T::from_usize_lossy(labels.len().max(1) * c);
            if let Some(d) = slot(grads, nodes, logits) {
                for (i, (d, &p)) in d.iter_mut().zip(&probs).enumerate() {
                    *d += s * p;
                    if labels[i / c] == i % c {
                        *d -= s;
                    }
                }
            }
        }
    }
}

fn pointwise_back<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], x: usize, g: &[T], kind: kernels::Pointwise) {
    let xv = nodes[x].value.data();
    if let Some(d) = slot(grads, nodes, x) {
        let mut local = vec![T::zero(); d.len()];
        kernels::pointwise_grad(kind, &mut local, xv, g);
        add_into(d, &local);
    }
}

fn unary_back<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], x: usize, g: &[T], f: impl Fn(T) -> T + Sync) {
    let xv = nodes[x].value.data();
    if let Some(d) = slot(grads, nodes, x) {
        let mut local = vec![T::zero(); d.len()];
        kernels::zip_map_into(&mut local, xv, g, |x, g| f(x) * g);
        add_into(d, &local);
    }
}
