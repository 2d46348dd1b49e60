//! Contrastive head `H1`, classification head `H2` and their losses.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numerics::{Graph, ParamId, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `H1`: flattened top layer `[B, n*d]` to features `[B, f1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ContrastiveHead {
    /// layer-norm, linear `n*d -> f1`, GELU, linear `f1 -> f1`.
    Mlp {
        gamma: ParamId,
        beta: ParamId,
        fc1: Linear,
        fc2: Linear,
    },
    /// A single affine map `n*d -> f1`.
    Affine(Linear),
}

impl ContrastiveHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, input: usize, f1: usize, linear: bool, rng: &mut R) -> Self {
        if linear {
            return ContrastiveHead::Affine(Linear::new(store, "h1.fc", input, f1, rng));
        }
        let gamma = store.add("h1.norm.gamma", Tensor::full(&[input], T::one()));
        let beta = store.add("h1.norm.beta", Tensor::zeros(&[input]));
        let fc1 = Linear::new(store, "h1.fc1", input, f1, rng);
        let fc2 = Linear::new(store, "h1.fc2", f1, f1, rng);
        ContrastiveHead::Mlp { gamma, beta, fc1, fc2 }
    }

    /// `top` is `[B, h, w, d]` (or any shape with a leading batch axis).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, top: Var) -> Result<Var> {
        let shape = g.shape(top).to_vec();
        let b = *shape.first().ok_or_else(|| Error::shape("contrastive_head", &shape, &[0, 0]))?;
        let flat = g.reshape(top, &[b, shape[1..].iter().product()])?;
        match self {
            ContrastiveHead::Affine(l) => l.forward(g, store, flat),
            ContrastiveHead::Mlp { gamma, beta, fc1, fc2 } => {
                let (gv, bv) = (g.param(store, *gamma), g.param(store, *beta));
                let x = g.layer_norm(flat, gv, bv)?;
                let x = fc1.forward(g, store, x)?;
                let x = g.gelu(x)?;
                fc2.forward(g, store, x)
            }
        }
    }
}

/// `H2`: affine map `f1 -> f2`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassificationHead(pub Linear);

impl ClassificationHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, f1: usize, classes: usize, rng: &mut R) -> Self {
        Self(Linear::new(store, "h2", f1, classes, rng))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var) -> Result<Var> {
        self.0.forward(g, store, features)
    }
}

/// Partner of each view when a batch of `B` images is laid out as
/// `[a_0 .. a_{B-1}, b_0 .. b_{B-1}]`.
pub fn partners(views: usize) -> Vec<usize> {
    let half = views / 2;
    (0..views).map(|i| (i + half) % views).collect()
}

/// Supervised contrastive loss over `[2B, f1]` features whose rows are laid
/// out as in [`partners`].
///
/// For anchor `a` with partner `b`, the denominator holds `b` and every view
/// of a different class; same-class non-partners take no part. Similarity is
/// cosine divided by `temperature`. The result is the mean over anchors.
pub fn supervised_contrastive_loss<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    labels: &[usize],
    temperature: f64,
) -> Result<Var> {
    let n = labels.len();
    if n < 4 || !n.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "contrastive loss needs an even number of at least 4 views, got {n}"
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
    }
    if g.shape(features).first() != Some(&n) {
        return Err(Error::shape("supervised_contrastive_loss", g.shape(features), &[n]));
    }
    let z = g.l2_normalize(features)?;
    let sim = g.matmul(z, z, false, true)?;
    let sim = g.scale(sim, T::from_f64_lossy(1.0 / temperature))?;
    g.contrastive_nll(sim, labels, &partners(n))
}

/// Mean over the batch of `-(1/f2) log softmax(logits)[label]`.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

/// Convenience wrapper evaluating [`supervised_contrastive_loss`] on
/// concrete features.
pub fn contrastive_loss_value<T: Scalar>(features: &Tensor<T>, labels: &[usize], temperature: f64) -> Result<T> {
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let l = supervised_contrastive_loss(&mut g, f, labels, temperature)?;
    Ok(g.value(l).data()[0])
}

/// Convenience wrapper evaluating [`cross_entropy`] on concrete logits.
pub fn cross_entropy_value<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = cross_entropy(&mut g, l, labels)?;
    Ok(g.value(loss).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_images_of_different_classes() {
        // Views of one image coincide; the two images are orthogonal.
        let mut f = Tensor::<f64>::zeros(&[4, 3]);
        for (row, col) in [(0, 0), (2, 0), (1, 1), (3, 1)] {
            f.data_mut()[row * 3 + col] = 1.0;
        }
        let e = std::f64::consts::E;
        let l = contrastive_loss_value(&f, &[0, 1, 0, 1], 1.0).unwrap();
        assert!((l - (-(e / (e + 2.0)).ln())).abs() < 1e-12);
        assert!((l - 0.5514).abs() < 1e-4);
    }

    #[test]
    fn antipodal_negatives() {
        // Partners identical, the other image at cosine -1.
        let f = Tensor::from_vec(&[4, 2], vec![1.0, 0.0, -1.0, 0.0, 1.0, 0.0, -1.0, 0.0]).unwrap();
        let l = contrastive_loss_value::<f64>(&f, &[0, 1, 0, 1], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((l - (-(e / (e + 2.0 / e)).ln())).abs() < 1e-12);
        // A single negative per anchor: views 0 and 1 are partners, view 2
        // is another class at cosine -1 from both.
        let mut g = Graph::<f64>::new();
        let sim = g.constant(Tensor::from_vec(&[3, 3], vec![1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0, -1.0, 1.0]).unwrap());
        let nll = g.contrastive_nll(sim, &[0, 0, 1], &[1, 0, 0]).unwrap();
        let one_negative = -(e / (e + 1.0 / e)).ln();
        assert!((one_negative - 0.1269).abs() < 1e-4);
        let expected = (2.0 * one_negative + 2f64.ln()) / 3.0;
        assert!((g.value(nll).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn scale_invariance_and_argument_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f: Tensor<f64> = crate::layers::uniform(&[6, 5], 1.0, &mut rng);
        let labels = [0, 1, 2, 0, 1, 2];
        let a = contrastive_loss_value(&f, &labels, 0.5).unwrap();
        let b = contrastive_loss_value(&f.map(|v| v * 7.5), &labels, 0.5).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(contrastive_loss_value(&Tensor::<f64>::zeros(&[2, 5]), &[0, 1], 1.0).is_err());
        assert!(contrastive_loss_value(&f, &labels, 0.0).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let u = cross_entropy_value(&Tensor::<f64>::zeros(&[1, 10]), &[3]).unwrap();
        assert!((u - 10f64.ln() / 10.0).abs() < 1e-12);
        let l = cross_entropy_value(&Tensor::from_vec(&[1, 2], vec![3f64.ln(), 0.0]).unwrap(), &[0]).unwrap();
        assert!((l - (-0.5 * 0.75f64.ln())).abs() < 1e-12);
        assert!((l - 0.14384).abs() < 1e-5);
        assert!(cross_entropy_value(&Tensor::<f64>::zeros(&[1, 2]), &[2]).is_err());
    }

    #[test]
    fn zero_input_zero_bias_head_is_zero() {
        let mut s = ParamStore::<f64>::new();
        let h = ContrastiveHead::new(&mut s, 8, 3, false, &mut ChaCha8Rng::seed_from_u64(1));
        for name in ["h1.fc1.bias", "h1.fc2.bias"] {
            let id = s.find(name).unwrap();
            let shape = s.value(id).shape().to_vec();
            s.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2, 2, 2]));
        let out = h.forward(&mut g, &s, x).unwrap();
        assert_eq!(g.shape(out), &[2, 3]);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn partner_layout() {
        assert_eq!(partners(6), vec![3, 4, 5, 0, 1, 2]);
    }
}
