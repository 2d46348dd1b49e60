//! The column lattice: `h x w` columns of `K + 1` levels, each a
//! `d`-vector, updated synchronously for `T` steps.
//!
//! One step computes, for every level `k`,
//!
//! ```text
//! l_t^k = ( w_l  * l_{t-1}^k
//!         + w_bu * BU_k(l_{t-1}^{k-1})      if k >= 1
//!         + w_td * TD_k(l_{t-1}^{k+1})      if k <  K
//!         + w_a  * A(L_{t-1}^k)             unless attention is disabled
//!         ) / (number of terms present)
//! ```
//!
//! where `A` is softmax attention with logits `beta * <l_q, l_p>` over the
//! neighbourhood of `p`, read out as the weighted sum of the `l_q`. Before
//! each step the bottom layer `L^0` is overwritten with the token grid. The
//! weights `w_*` form a trainable `[K + 1, 4]` matrix with columns
//! `(l, bu, td, a)`.
//!
//! [`Lattice::propagate`] records the unrolled steps on a [`Graph`]. When
//! only the top layer is read out, levels that cannot reach `L_T^K` are
//! skipped; the result is identical to the full computation.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{Ablation, ModelConfig, Neighborhood};
use crate::error::{Error, Result};
use crate::layers::{Activation, Linear};
use crate::numerics::{Graph, ParamId, ParamStore, Var};
use crate::rng::{RngStreams, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MIX_L: usize = 0;
const MIX_BU: usize = 1;
const MIX_TD: usize = 2;
const MIX_A: usize = 3;

/// All level vectors of a batch at one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeState<T> {
    /// `[B, h, w, K + 1, d]`; index `k = 0` is the bottom layer.
    pub levels: Tensor<T>,
    pub t: usize,
}

impl<T: Scalar> LatticeState<T> {
    pub fn batch(&self) -> usize {
        self.levels.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.levels.shape()[1], self.levels.shape()[2])
    }

    /// Number of layers, `K + 1`.
    pub fn layers(&self) -> usize {
        self.levels.shape()[3]
    }

    pub fn d(&self) -> usize {
        self.levels.shape()[4]
    }

    /// Copy of layer `k` as `[B, h, w, d]`.
    pub fn layer(&self, k: usize) -> Tensor<T> {
        let s = self.levels.shape();
        let (cols, layers, d) = (s[0] * s[1] * s[2], s[3], s[4]);
        assert!(k < layers, "layer {k} out of range");
        let mut out = Vec::with_capacity(cols * d);
        for c in 0..cols {
            let base = (c * layers + k) * d;
            out.extend_from_slice(&self.levels.data()[base..base + d]);
        }
        Tensor::from_vec(&[s[0], s[1], s[2], d], out).expect("layer shape")
    }

    /// Overwrites layer `k` with a `[B, h, w, d]` tensor.
    pub fn set_layer(&mut self, k: usize, values: &Tensor<T>) -> Result<()> {
        let s = self.levels.shape().to_vec();
        if values.shape() != [s[0], s[1], s[2], s[4]] || k >= s[3] {
            return Err(Error::shape("set_layer", &s, values.shape()));
        }
        let (layers, d) = (s[3], s[4]);
        for (c, v) in values.data().chunks_exact(d.max(1)).enumerate() {
            let base = (c * layers + k) * d;
            self.levels.data_mut()[base..base + d].copy_from_slice(v);
        }
        Ok(())
    }

    /// Assembles a state from `K + 1` layers of shape `[B, h, w, d]`.
    pub fn from_layers(layers: &[Tensor<T>], t: usize) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::InvalidArgument("no layers".into()))?;
        let s = first.shape();
        if s.len() != 4 {
            return Err(Error::shape("from_layers", s, &[0, 0, 0, 0]));
        }
        let mut state = Self {
            levels: Tensor::zeros(&[s[0], s[1], s[2], layers.len(), s[3]]),
            t,
        };
        for (k, l) in layers.iter().enumerate() {
            state.set_layer(k, l)?;
        }
        Ok(state)
    }
}

/// Random initial levels: every entry i.i.d. `N(0, 1/d)`.
pub fn init_state<T: Scalar, R: Rng + ?Sized>(
    batch: usize,
    grid: (usize, usize),
    layers: usize,
    d: usize,
    rng: &mut R,
) -> LatticeState<T> {
    let shape = [batch, grid.0, grid.1, layers, d];
    let sigma = 1.0 / (d.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(sigma * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    LatticeState {
        levels: Tensor::from_vec(&shape, data).expect("state shape"),
        t: 0,
    }
}

/// Overwrites the bottom layer with `tokens` (`[B, h, w, d]`).
pub fn embed_bottom<T: Scalar>(state: &mut LatticeState<T>, tokens: &Tensor<T>) -> Result<()> {
    state.set_layer(0, tokens)
}

/// Row-major `[N, N]` mask of allowed (query, key) pairs, or `None` when
/// every pair is allowed.
pub fn neighborhood_mask(grid: (usize, usize), nb: Neighborhood) -> Option<Vec<bool>> {
    let Neighborhood::Radius(r) = nb else {
        return None;
    };
    let (h, w) = grid;
    if r + 1 >= h.max(w) {
        return None;
    }
    let n = h * w;
    let mut m = vec![false; n * n];
    for p in 0..n {
        for q in 0..n {
            let (py, px, qy, qx) = (p / w, p % w, q / w, q % w);
            m[p * n + q] = py.abs_diff(qy) <= r && px.abs_diff(qx) <= r;
        }
    }
    Some(m)
}

/// Records attention over a `[B, h, w, d]` layer; returns `(weights
/// [B, N, N], readout [B, h, w, d])`.
pub fn attention_graph<T: Scalar>(
    g: &mut Graph<T>,
    layer: Var,
    beta: f64,
    mask: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let shape = g.shape(layer).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("attention", &shape, &[0, 0, 0, 0]));
    }
    let b = shape[0];
    let logits = g.bmm(layer, layer, b, true)?;
    let logits = g.scale(logits, T::from_f64_lossy(beta))?;
    let weights = g.softmax(logits, mask)?;
    let out = g.bmm(weights, layer, b, false)?;
    let out = g.reshape(out, &shape)?;
    Ok((weights, out))
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("attention sharpness {beta} must be positive")))
    }
}

/// Attention weights `[B, N, N]` for a `[B, h, w, d]` layer; row `p` holds
/// the weights position `p` assigns to every `q`.
pub fn attention_weights<T: Scalar>(layer: &Tensor<T>, beta: f64, nb: Neighborhood) -> Result<Tensor<T>> {
    check_beta(beta)?;
    let mut g = Graph::new();
    let x = g.constant(layer.clone());
    let mask = neighborhood_mask((layer.shape()[1], layer.shape()[2]), nb);
    let (w, _) = attention_graph(&mut g, x, beta, mask.as_deref())?;
    Ok(g.value(w).clone())
}

/// Attention readout `A(L)` for a `[B, h, w, d]` layer.
pub fn attention<T: Scalar>(layer: &Tensor<T>, beta: f64, nb: Neighborhood) -> Result<Tensor<T>> {
    check_beta(beta)?;
    let mut g = Graph::new();
    let x = g.constant(layer.clone());
    let mask = neighborhood_mask((layer.shape()[1], layer.shape()[2]), nb);
    let (_, out) = attention_graph(&mut g, x, beta, mask.as_deref())?;
    Ok(g.value(out).clone())
}

/// Per-position network between adjacent layers, shared by every column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ColumnNet {
    Mlp { fc1: Linear, fc2: Linear, act: Activation },
    Affine(Linear),
}

impl ColumnNet {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        act: Activation,
        linear: bool,
        rng: &mut R,
    ) -> Self {
        if linear {
            return ColumnNet::Affine(Linear::new(store, name, d, d, rng));
        }
        let fc1 = match act {
            Activation::Sine => Linear::with_bound(store, &format!("{name}.fc1"), d, 4 * d, (6.0 / d as f64).sqrt(), rng),
            _ => Linear::new(store, &format!("{name}.fc1"), d, 4 * d, rng),
        };
        let fc2 = Linear::new(store, &format!("{name}.fc2"), 4 * d, d, rng);
        ColumnNet::Mlp { fc1, fc2, act }
    }

    /// Applies the network to the last axis; dropout hits the hidden layer.
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        dropout: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        match self {
            ColumnNet::Affine(l) => l.forward(g, store, x),
            ColumnNet::Mlp { fc1, fc2, act } => {
                let h = fc1.forward(g, store, x)?;
                let h = act.apply(g, h)?;
                let h = g.dropout(h, dropout, train, rng)?;
                fc2.forward(g, store, h)
            }
        }
    }
}

/// Which final layers [`Lattice::propagate`] must produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Readout {
    Top,
    All,
}

/// Training-time switches for one propagation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunMode {
    pub train: bool,
    /// Seed of the dropout masks; the mask of level `k` at step `t` is drawn
    /// from its own substream, independent of which levels are computed.
    pub dropout_seed: u64,
}

impl RunMode {
    pub const EVAL: RunMode = RunMode {
        train: false,
        dropout_seed: 0,
    };
}

/// Lattice parameters and geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    /// `bu[k - 1]` lifts layer `k - 1` to `k`, for `k = 1..=K`.
    pub bu: Vec<ColumnNet>,
    /// `td[k]` projects layer `k + 1` to `k`, for `k = 0..K`.
    pub td: Vec<ColumnNet>,
    /// `[K + 1, 4]` mixing weights.
    pub mix: ParamId,
    pub grid: (usize, usize),
    pub levels: usize,
    pub d: usize,
    pub beta: f64,
    pub neighborhood: Neighborhood,
    pub dropout: f64,
    pub attention: bool,
    mask: Option<Vec<bool>>,
}

impl Lattice {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, k) = (cfg.d, cfg.levels);
        let relu = cfg.ablation == Ablation::ReluOnly;
        let linear = cfg.ablation == Ablation::LinearColumns;
        let (bu_act, td_act) = if relu {
            (Activation::Relu, Activation::Relu)
        } else {
            (Activation::Sine, Activation::Gelu)
        };
        let bu = (1..=k)
            .map(|i| ColumnNet::new(store, &format!("lattice.bu.{i}"), d, bu_act, linear, rng))
            .collect();
        let td = (0..k)
            .map(|i| ColumnNet::new(store, &format!("lattice.td.{i}"), d, td_act, linear, rng))
            .collect();
        let mix = store.add("lattice.mix", Tensor::full(&[k + 1, 4], T::one()));
        let grid = cfg.grid();
        Self {
            bu,
            td,
            mix,
            grid,
            levels: k,
            d,
            beta: cfg.beta,
            neighborhood: cfg.neighborhood,
            dropout: cfg.dropout,
            attention: cfg.ablation != Ablation::NoAttention,
            mask: neighborhood_mask(grid, cfg.neighborhood),
        }
    }

    fn dropout_rng(mode: RunMode, t: usize, k: usize, kind: u64) -> crate::rng::StreamRng {
        RngStreams::new(mode.dropout_seed).substream(Stream::Dropout, t as u64, 2 * k as u64 + kind)
    }

    /// One synchronous update. `prev` holds every layer at `t - 1` (`None`
    /// where not needed), with layer 0 already replaced by the tokens;
    /// levels with `want[k] == false` are skipped.
    #[allow(clippy::too_many_arguments)]
    pub fn step_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        prev: &[Option<Var>],
        want: &[bool],
        t: usize,
        mode: RunMode,
    ) -> Result<Vec<Option<Var>>> {
        let kk = self.levels;
        let mix = g.param(store, self.mix);
        let mut next = vec![None; kk + 1];
        let need = |i: usize| prev[i].ok_or_else(|| Error::InvalidArgument(format!("layer {i} missing at step {t}")));
        for k in 0..=kk {
            if !want[k] {
                continue;
            }
            let own = need(k)?;
            let mut terms = vec![(MIX_L, own)];
            if k >= 1 {
                let mut rng = Self::dropout_rng(mode, t, k, 0);
                let x = self.bu[k - 1].forward(g, store, need(k - 1)?, self.dropout, mode.train, &mut rng)?;
                terms.push((MIX_BU, x));
            }
            if k < kk {
                let mut rng = Self::dropout_rng(mode, t, k, 1);
                let x = self.td[k].forward(g, store, need(k + 1)?, self.dropout, mode.train, &mut rng)?;
                terms.push((MIX_TD, x));
            }
            if self.attention {
                let (_, a) = attention_graph(g, own, self.beta, self.mask.as_deref())?;
                terms.push((MIX_A, a));
            }
            next[k] = Some(g.mix(mix, k, &terms)?);
        }
        Ok(next)
    }

    /// Per step `t = 1..=T`, which levels must be computed for `readout`.
    pub fn schedule(&self, steps: usize, readout: Readout) -> Vec<Vec<bool>> {
        let kk = self.levels;
        let mut want = vec![vec![false; kk + 1]; steps + 1];
        want[steps] = match readout {
            Readout::All => vec![true; kk + 1],
            Readout::Top => (0..=kk).map(|k| k == kk).collect(),
        };
        for t in (1..=steps).rev() {
            for k in 0..=kk {
                if want[t][k] {
                    want[t - 1][k] = true;
                    if k >= 1 {
                        want[t - 1][k - 1] = true;
                    }
                    if k < kk {
                        want[t - 1][k + 1] = true;
                    }
                }
            }
            // The bottom layer is overwritten before it is read.
            if t > 1 {
                want[t - 1][0] = false;
            }
        }
        want.remove(0);
        want
    }

    /// Unrolls `T` steps from `init`, feeding `tokens` (`[B, h, w, d]`) to
    /// the bottom layer before each one. Returns the final layers; with
    /// [`Readout::Top`] only index `K` is present.
    #[allow(clippy::too_many_arguments)]
    pub fn propagate<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tokens: Var,
        init: &LatticeState<T>,
        steps: usize,
        readout: Readout,
        mode: RunMode,
    ) -> Result<Vec<Option<Var>>> {
        if steps == 0 {
            return Err(Error::InvalidArgument("propagation needs at least one step".into()));
        }
        let expect = [init.batch(), self.grid.0, self.grid.1, self.d];
        if g.shape(tokens) != expect || init.layers() != self.levels + 1 {
            return Err(Error::shape("propagate", g.shape(tokens), &expect));
        }
        let schedule = self.schedule(steps, readout);
        let mut layers: Vec<Option<Var>> = (0..=self.levels)
            .map(|k| (k > 0).then(|| g.constant(init.layer(k))))
            .collect();
        for (i, want) in schedule.iter().enumerate() {
            layers[0] = Some(tokens);
            layers = self.step_graph(g, store, &layers, want, i + 1, mode)?;
        }
        Ok(layers)
    }

    /// Evaluation-mode propagation of concrete tokens; returns the full
    /// final state.
    pub fn run<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tokens: &Tensor<T>,
        init: &LatticeState<T>,
        steps: usize,
    ) -> Result<LatticeState<T>> {
        let mut g = Graph::new();
        let tok = g.constant(tokens.clone());
        let out = self.propagate(&mut g, store, tok, init, steps, Readout::All, RunMode::EVAL)?;
        let layers: Vec<Tensor<T>> = out.into_iter().map(|v| g.value(v.expect("all layers")).clone()).collect();
        LatticeState::from_layers(&layers, init.t + steps)
    }

    /// One evaluation-mode step: embeds `tokens` and updates every level.
    pub fn step<T: Scalar>(&self, store: &ParamStore<T>, state: &LatticeState<T>, tokens: &Tensor<T>) -> Result<LatticeState<T>> {
        self.run(store, tokens, state, 1)
    }

    /// `BU_k` applied to a concrete `[.., d]` tensor in evaluation mode.
    pub fn bottom_up<T: Scalar>(&self, store: &ParamStore<T>, k: usize, level: &Tensor<T>) -> Result<Tensor<T>> {
        if k == 0 || k > self.levels {
            return Err(Error::InvalidArgument(format!("bottom-up index {k} outside 1..={}", self.levels)));
        }
        Self::apply_net(&self.bu[k - 1], store, level)
    }

    /// `TD_k` applied to a concrete `[.., d]` tensor in evaluation mode.
    pub fn top_down<T: Scalar>(&self, store: &ParamStore<T>, k: usize, level: &Tensor<T>) -> Result<Tensor<T>> {
        if k >= self.levels {
            return Err(Error::InvalidArgument(format!("top-down index {k} outside 0..{}", self.levels)));
        }
        Self::apply_net(&self.td[k], store, level)
    }

    fn apply_net<T: Scalar>(net: &ColumnNet, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let mut rng = Self::dropout_rng(RunMode::EVAL, 0, 0, 0);
        let out = net.forward(&mut g, store, v, 0.0, false, &mut rng)?;
        Ok(g.value(out).clone())
    }
}
