//! Stage 2: the one-to-one contrastive model and its baseline variants.
//!
//! The image tower is a residual two-layer MLP over frozen encoder features,
//! `psi(x) = normalize(x + W2 relu(W1 x + b1) + b2)`. With `W2` and `b2` at
//! zero it is the identity on unit inputs, which is the zero-shot model. The
//! text tower is the frozen text encoder.

mod loss;
mod train;

pub use loss::{bidir_contrastive_grad, bidir_contrastive_loss};
pub use train::{build_stream, embed_stream, train_vlm, VlmHyper, VlmTrainSet};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::encoders::{Embedding, Encoder};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VlmVariant {
    ZeroShot,
    FtImg,
    FtReg,
    ZsMap,
    Villa,
}

impl VlmVariant {
    pub const ALL: [VlmVariant; 5] = [
        VlmVariant::ZeroShot,
        VlmVariant::FtImg,
        VlmVariant::FtReg,
        VlmVariant::ZsMap,
        VlmVariant::Villa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VlmVariant::ZeroShot => "zero_shot",
            VlmVariant::FtImg => "ft_img",
            VlmVariant::FtReg => "ft_reg",
            VlmVariant::ZsMap => "zs_map",
            VlmVariant::Villa => "villa",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        VlmVariant::ALL.into_iter().find(|v| v.name() == s)
    }
}

impl std::fmt::Display for VlmVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlmParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub tau: f64,
    pub d: usize,
    pub encoder_hash: u64,
    pub variant: VlmVariant,
}

pub(crate) struct TowerCache {
    pub pre: Array2<f64>,
    pub act: Array2<f64>,
    pub norms: Array1<f64>,
    pub out: Array2<f64>,
}

impl VlmParams {
    /// `W1` uniform in `(-1/sqrt(d), 1/sqrt(d))`, everything else zero.
    pub fn init(d: usize, tau: f64, seed: u64, encoder_hash: u64, variant: VlmVariant) -> Self {
        let mut r = rng::stream(rng::derive_seed(seed, "vlm-init"), 0);
        let bound = 1.0 / (d as f64).sqrt();
        let dist = Uniform::new(-bound, bound).expect("bound is positive");
        VlmParams {
            w1: Array2::from_shape_fn((d, d), |_| r.sample(dist)),
            b1: Array1::zeros(d),
            w2: Array2::zeros((d, d)),
            b2: Array1::zeros(d),
            tau,
            d,
            encoder_hash,
            variant,
        }
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

    pub(crate) fn forward(&self, x: ArrayView2<f64>) -> TowerCache {
        let mut pre = x.dot(&self.w1.t());
        pre += &self.b1;
        let act = pre.mapv(|v| v.max(0.0));
        let mut u = act.dot(&self.w2.t());
        u += &self.b2;
        u += &x;
        let mut norms = Array1::zeros(u.nrows());
        for (mut row, n) in u.axis_iter_mut(Axis(0)).zip(norms.iter_mut()) {
            *n = row.dot(&row).sqrt();
            if *n > 0.0 {
                row /= *n;
            }
        }
        TowerCache {
            pre,
            act,
            norms,
            out: u,
        }
    }

    /// Tower outputs for a batch of frozen features, one row each.
    pub fn embed_features(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.d {
            return Err(Error::DimensionMismatch(format!(
                "features have {} columns, tower expects {}",
                x.ncols(),
                self.d
            )));
        }
        Ok(self.forward(x).out)
    }

    /// Parameter gradients given `dL/dout` for the batch `x`.
    pub(crate) fn backward(&self, x: ArrayView2<f64>, cache: &TowerCache, mut dy: Array2<f64>) -> TowerGrads {
        for ((mut d, y), &n) in dy.axis_iter_mut(Axis(0)).zip(cache.out.rows()).zip(cache.norms.iter()) {
            if n > 0.0 {
                let proj = y.dot(&d);
                d.scaled_add(-proj, &y);
                d /= n;
            } else {
                d.fill(0.0);
            }
        }
        let w2 = dy.t().dot(&cache.act);
        let b2 = dy.sum_axis(Axis(0));
        let mut dpre = dy.dot(&self.w2);
        dpre.zip_mut_with(&cache.pre, |d, &p| {
            if p <= 0.0 {
                *d = 0.0;
            }
        });
        TowerGrads {
            w1: dpre.t().dot(&x),
            b1: dpre.sum_axis(Axis(0)),
            w2,
            b2,
        }
    }

    fn check_encoder(&self, encoder: &Encoder) -> Result<()> {
        if encoder.hash() != self.encoder_hash {
            return Err(Error::EncoderMismatch {
                expected: self.encoder_hash,
                found: encoder.hash(),
            });
        }
        Ok(())
    }
}

/// Gradients of the tower parameters, same layout as [`VlmParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct TowerGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl TowerGrads {
    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn one_row(params: &VlmParams, e: Embedding) -> Result<Embedding> {
    let x = e.values.insert_axis(Axis(0));
    let out = params.embed_features(x.view())?;
    Ok(Embedding {
        values: out.row(0).to_owned(),
        normalized: true,
    })
}

pub fn vlm_embed_region(pixels: &RgbImage, encoder: &Encoder, params: &VlmParams) -> Result<Embedding> {
    params.check_encoder(encoder)?;
    one_row(params, encoder.encode_region(pixels)?)
}

pub fn vlm_embed_image(image: &RgbImage, encoder: &Encoder, params: &VlmParams) -> Result<Embedding> {
    params.check_encoder(encoder)?;
    one_row(params, encoder.encode_image(image)?)
}

/// The frozen text tower: the encoder's description embedding.
pub fn vlm_embed_text<S: AsRef<str>>(sentences: &[S], encoder: &Encoder, params: &VlmParams) -> Result<Embedding> {
    params.check_encoder(encoder)?;
    encoder.encode_description(sentences)
}
