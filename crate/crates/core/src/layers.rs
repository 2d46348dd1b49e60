//! Parameter initialisation and the affine layer shared by every module.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Tensor with entries drawn from `U(-bound, bound)`.
pub fn uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.random_range(-1.0..1.0) * bound))
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// Default bound `1/sqrt(fan_in)`.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// `y = x @ w + b` over the last axis; `w` is `[fin, fout]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fin: usize,
    pub fout: usize,
}

impl Linear {
    /// Registers `{name}.weight` and `{name}.bias`, weights drawn with the
    /// given bound and biases with `1/sqrt(fin)`.
    pub fn with_bound<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fin: usize,
        fout: usize,
        bound: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), uniform(&[fin, fout], bound, rng));
        let b = store.add(format!("{name}.bias"), uniform(&[fout], fan_in_bound(fin), rng));
        Self { w, b, fin, fout }
    }

    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, fin: usize, fout: usize, rng: &mut R) -> Self {
        Self::with_bound(store, name, fin, fout, fan_in_bound(fin), rng)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, Some(b))
    }
}

/// Pointwise non-linearity selected by configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Sine,
    Relu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Sine => g.sin(x),
            Activation::Relu => g.relu(x),
        }
    }
}
