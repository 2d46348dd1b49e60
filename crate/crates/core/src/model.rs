//! The full network: tokenizer, lattice and both heads over one
//! [`ParamStore`].

use rand::Rng;

use crate::config::{Ablation, ModelConfig};
use crate::error::{Error, Result};
use crate::heads::{ClassificationHead, ContrastiveHead};
use crate::lattice::{init_state, Lattice, LatticeState, Readout, RunMode};
use crate::numerics::{Graph, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;

/// Parameter-name prefixes trained during pre-training and frozen after.
pub const BACKBONE: [&str; 3] = ["tokenizer.", "lattice.", "h1."];
/// Prefix of the classification head.
pub const CLASSIFIER: &str = "h2.";

#[derive(Clone, Debug)]
pub struct Agglomerator<T> {
    pub store: ParamStore<T>,
    pub cfg: ModelConfig,
    pub tokenizer: Tokenizer,
    pub lattice: Lattice,
    pub h1: ContrastiveHead,
    pub h2: ClassificationHead,
}

impl<T: Scalar> Agglomerator<T> {
    /// Builds and initialises every parameter from `rng`.
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let tokenizer = if cfg.ablation == Ablation::LinearEmbedding {
            Tokenizer::linear(&mut store, cfg.in_c, cfg.d, rng)
        } else {
            Tokenizer::conv(&mut store, cfg.in_c, cfg.d, rng)
        };
        let lattice = Lattice::new(&mut store, cfg, rng);
        let h1 = ContrastiveHead::new(&mut store, cfg.positions() * cfg.d, cfg.f1, cfg.ablation == Ablation::LinearHead, rng);
        let h2 = ClassificationHead::new(&mut store, cfg.f1, cfg.classes, rng);
        Ok(Self {
            store,
            cfg: cfg.clone(),
            tokenizer,
            lattice,
            h1,
            h2,
        })
    }

    /// Random initial state for a batch.
    pub fn init_state<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> LatticeState<T> {
        init_state(batch, self.cfg.grid(), self.cfg.levels + 1, self.cfg.d, rng)
    }

    /// Trains only the backbone (pre-training).
    pub fn select_backbone(&mut self) {
        for p in BACKBONE {
            self.store.set_frozen(p, false);
        }
        self.store.set_frozen(CLASSIFIER, true);
    }

    /// Trains only the classification head.
    pub fn select_classifier(&mut self) {
        for p in BACKBONE {
            self.store.set_frozen(p, true);
        }
        self.store.set_frozen(CLASSIFIER, false);
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        let c = &self.cfg;
        if shape.len() != 4 || shape[1..] != [c.in_h, c.in_w, c.in_c] {
            return Err(Error::shape("images", shape, &[0, c.in_h, c.in_w, c.in_c]));
        }
        Ok(())
    }

    /// Records tokenizer, propagation and `H1`; returns `[B, f1]` features.
    pub fn features(&self, g: &mut Graph<T>, images: Var, init: &LatticeState<T>, mode: RunMode) -> Result<Var> {
        self.check_images(g.shape(images))?;
        let tokens = self.tokenizer.forward(g, &self.store, images)?;
        let layers = self
            .lattice
            .propagate(g, &self.store, tokens, init, self.cfg.steps, Readout::Top, mode)?;
        let top = layers[self.cfg.levels].expect("top layer is always computed");
        self.h1.forward(g, &self.store, top)
    }

    /// Features followed by `H2`; returns `[B, f2]` logits.
    pub fn logits(&self, g: &mut Graph<T>, images: Var, init: &LatticeState<T>, mode: RunMode) -> Result<Var> {
        let f = self.features(g, images, init, mode)?;
        self.h2.forward(g, &self.store, f)
    }

    /// Evaluation-mode lattice state after `T` steps for concrete images.
    pub fn final_state(&self, images: &Tensor<T>, init: &LatticeState<T>) -> Result<LatticeState<T>> {
        self.check_images(images.shape())?;
        let grid = self.tokenizer.tokenize(&self.store, images)?;
        self.lattice.run(&self.store, &grid.tokens, init, self.cfg.steps)
    }

    /// Evaluation-mode `(features [B, f1], logits [B, f2])`.
    pub fn predict(&self, images: &Tensor<T>, init: &LatticeState<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let f = self.features(&mut g, x, init, RunMode::EVAL)?;
        let l = self.h2.forward(&mut g, &self.store, f)?;
        Ok((g.value(f).clone(), g.value(l).clone()))
    }
}
