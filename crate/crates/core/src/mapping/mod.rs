//! Stage 1: per-attribute projection heads scored against frozen attribute
//! embeddings with a max-over-regions contrastive loss.

mod loss;
mod train;

pub use loss::{batch_loss, grad_batch, log_sigma, sample_loss, sigma, MappingGrads};
pub use train::{precompute, train_mapping, PrecomputedSample, TrainHyper};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::catalog::AttrId;
use crate::error::{Error, Result};
use crate::rng;

/// Architecture and scoring knobs of the mapping model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MappingConfig {
    /// Number of heads; attribute `k` uses head `k mod p`.
    pub p: usize,
    pub adapter_alpha: f64,
    pub tau: f64,
    /// Re-normalize head outputs before scoring.
    pub normalize: bool,
}

impl Default for MappingConfig {
    fn default() -> Self {
        MappingConfig {
            p: 20,
            adapter_alpha: 0.0,
            tau: 0.07,
            normalize: true,
        }
    }
}

impl MappingConfig {
    pub fn validate(&self, num_attrs: usize) -> Result<()> {
        if self.p == 0 || self.p > num_attrs {
            return Err(Error::InvalidConfig(format!(
                "p = {} must be in 1..={num_attrs}",
                self.p
            )));
        }
        if !(0.0..=1.0).contains(&self.adapter_alpha) {
            return Err(Error::InvalidConfig(format!(
                "adapter_alpha = {} outside [0, 1]",
                self.adapter_alpha
            )));
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::InvalidConfig(format!("tau = {} must be > 0", self.tau)));
        }
        Ok(())
    }
}

/// One `linear -> ReLU -> linear` block acting on row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Head {
    pub fn zeros(d: usize) -> Self {
        Head {
            w1: Array2::zeros((d, d)),
            b1: Array1::zeros(d),
            w2: Array2::zeros((d, d)),
            b2: Array1::zeros(d),
        }
    }

    /// Weights uniform in `(-1/sqrt(d), 1/sqrt(d))`, biases zero.
    pub fn init(d: usize, rng: &mut rng::Stream) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let dist = Uniform::new(-bound, bound).expect("bound is positive");
        let mut h = Head::zeros(d);
        h.w1.mapv_inplace(|_| rng.sample(dist));
        h.w2.mapv_inplace(|_| rng.sample(dist));
        h
    }

    pub const TENSOR_NAMES: [&'static str; 4] = ["w1", "b1", "w2", "b2"];

    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappingParams {
    pub heads: Vec<Head>,
    /// Head index for each attribute id.
    pub head_of_attr: Vec<usize>,
    pub adapter_alpha: f64,
    pub tau: f64,
    pub normalize: bool,
    pub d: usize,
    pub encoder_hash: u64,
}

impl MappingParams {
    /// Seeded initialization for `num_attrs` attributes.
    pub fn init(cfg: &MappingConfig, num_attrs: usize, d: usize, seed: u64, encoder_hash: u64) -> Result<Self> {
        cfg.validate(num_attrs)?;
        let base = rng::derive_seed(seed, "mapping-init");
        let heads = (0..cfg.p)
            .map(|h| Head::init(d, &mut rng::stream(base, h as u64)))
            .collect();
        Ok(MappingParams {
            heads,
            head_of_attr: (0..num_attrs).map(|k| k % cfg.p).collect(),
            adapter_alpha: cfg.adapter_alpha,
            tau: cfg.tau,
            normalize: cfg.normalize,
            d,
            encoder_hash,
        })
    }

    pub fn config(&self) -> MappingConfig {
        MappingConfig {
            p: self.heads.len(),
            adapter_alpha: self.adapter_alpha,
            tau: self.tau,
            normalize: self.normalize,
        }
    }

    pub fn num_attrs(&self) -> usize {
        self.head_of_attr.len()
    }

    pub fn head_for(&self, k: AttrId) -> Result<usize> {
        self.head_of_attr
            .get(k.index())
            .copied()
            .ok_or_else(|| Error::UnknownAttribute(k.to_string()))
    }

    pub fn is_finite(&self) -> bool {
        self.heads.iter().all(Head::is_finite)
    }

    pub(crate) fn check_rows(&self, e: ArrayView2<f64>) -> Result<()> {
        if e.ncols() != self.d {
            return Err(Error::DimensionMismatch(format!(
                "region embeddings have {} columns, model expects {}",
                e.ncols(),
                self.d
            )));
        }
        Ok(())
    }
}

/// Intermediate values of one head applied to one region set, kept for the
/// backward pass.
#[derive(Debug, Clone)]
pub(crate) struct HeadCache {
    pub pre: Array2<f64>,
    pub act: Array2<f64>,
    /// Row norms of the blended output (1 when normalization is off).
    pub norms: Array1<f64>,
    pub out: Array2<f64>,
}

pub(crate) fn head_forward(head: &Head, e: ArrayView2<f64>, alpha: f64, normalize: bool) -> HeadCache {
    let mut pre = e.dot(&head.w1.t());
    pre += &head.b1;
    let act = pre.mapv(|v| if v > 0.0 { v } else { 0.0 });
    let mut z = act.dot(&head.w2.t());
    z += &head.b2;
    if alpha > 0.0 {
        z = &e * alpha + &(z * (1.0 - alpha));
    }
    let mut norms = Array1::ones(z.nrows());
    if normalize {
        for (mut row, n) in z.axis_iter_mut(Axis(0)).zip(norms.iter_mut()) {
            *n = row.dot(&row).sqrt();
            if *n > 0.0 {
                row /= *n;
            }
        }
    }
    HeadCache {
        pre,
        act,
        norms,
        out: z,
    }
}

/// `P_k(e)`: the head output for attribute `k`, one row per region.
pub fn forward_head(params: &MappingParams, k: AttrId, region_embs: ArrayView2<f64>) -> Result<Array2<f64>> {
    let h = params.head_for(k)?;
    params.check_rows(region_embs)?;
    Ok(head_forward(&params.heads[h], region_embs, params.adapter_alpha, params.normalize).out)
}

/// Index and value of the largest entry; ties go to the lowest index.
pub(crate) fn argmax(values: impl IntoIterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best
}
