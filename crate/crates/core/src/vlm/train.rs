use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{bidir_contrastive_grad, VlmParams, VlmVariant};
use crate::assignment::{AugmentedDataset, PairSource, StreamItem};
use crate::encoders::Encoder;
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::synth::Dataset;
use crate::{par, rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VlmHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a lower mean loss.
    pub patience: usize,
    pub tau: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Keep items from the same image out of each other's negatives.
    pub mask_same_image: bool,
}

impl VlmHyper {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::InvalidConfig(format!("lr = {} must be > 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::InvalidConfig(format!("tau = {} must be > 0", self.tau)));
        }
        Ok(())
    }
}

/// Training items for `variant`. Augmented input is required by the
/// mapping-based variants and refused by the others.
pub fn build_stream(variant: VlmVariant, ds: &Dataset, aug: Option<&AugmentedDataset>) -> Result<Vec<StreamItem>> {
    let mismatch = |reason: &str| Error::VariantInputMismatch {
        variant: variant.to_string(),
        reason: reason.to_string(),
    };
    let images = || (0..ds.samples.len()).map(|sample| StreamItem::Image { sample });
    match variant {
        VlmVariant::ZeroShot | VlmVariant::FtImg | VlmVariant::FtReg => {
            if aug.is_some_and(|a| a.source.is_some()) {
                return Err(mismatch("does not train on assigned pairs"));
            }
            let mut items: Vec<StreamItem> = images().collect();
            match variant {
                VlmVariant::ZeroShot => items.clear(),
                VlmVariant::FtReg => {
                    for (i, s) in ds.samples.iter().enumerate() {
                        for r in s.filled_regions() {
                            items.push(StreamItem::Region {
                                sample: i,
                                region: r,
                                text: s.text.clone(),
                            });
                        }
                    }
                }
                _ => {}
            }
            Ok(items)
        }
        VlmVariant::ZsMap | VlmVariant::Villa => {
            let want = if variant == VlmVariant::Villa {
                PairSource::TrainedMapping
            } else {
                PairSource::ZeroShot
            };
            let aug = aug.ok_or_else(|| mismatch("needs an augmented dataset"))?;
            if aug.source != Some(want) {
                return Err(mismatch(&format!("needs pairs from {want:?}, got {:?}", aug.source)));
            }
            Ok(aug.items.clone())
        }
    }
}

/// Frozen features, text embeddings and group ids for a stream.
#[derive(Debug, Clone, PartialEq)]
pub struct VlmTrainSet {
    pub features: Array2<f64>,
    pub texts: Array2<f64>,
    pub groups: Vec<usize>,
}

impl VlmTrainSet {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Splits a joined description back into its sentences.
fn sentences_of(text: &str) -> Vec<&str> {
    text.split(". ").filter(|s| !s.trim().is_empty()).collect()
}

pub fn embed_stream(items: &[StreamItem], ds: &Dataset, encoder: &Encoder) -> Result<VlmTrainSet> {
    let rows = par::try_map(items, |item| -> Result<_> {
        let s = ds
            .samples
            .get(item.sample())
            .ok_or_else(|| Error::DanglingReference(format!("stream references sample {}", item.sample())))?;
        Ok(match item {
            StreamItem::Image { .. } => (
                encoder.encode_image(&s.image)?.values,
                encoder.encode_description(&s.sentences)?.values,
            ),
            StreamItem::Region { region, text, .. } => (
                encoder.encode_region(&s.region_pixels(*region))?.values,
                encoder.encode_description(&sentences_of(text))?.values,
            ),
        })
    })?;
    let d = encoder.d();
    let mut features = Array2::zeros((rows.len(), d));
    let mut texts = Array2::zeros((rows.len(), d));
    for (i, (f, t)) in rows.into_iter().enumerate() {
        features.row_mut(i).assign(&f);
        texts.row_mut(i).assign(&t);
    }
    Ok(VlmTrainSet {
        features,
        texts,
        groups: items.iter().map(StreamItem::sample).collect(),
    })
}

/// Trains the image tower. `ZeroShot` and empty sets return the
/// initialization (the identity tower) with an empty loss curve.
pub fn train_vlm(
    set: &VlmTrainSet,
    variant: VlmVariant,
    hyper: &VlmHyper,
    d: usize,
    encoder_hash: u64,
) -> Result<(VlmParams, Vec<f64>)> {
    hyper.validate()?;
    let mut params = VlmParams::init(d, hyper.tau, hyper.seed, encoder_hash, variant);
    if variant == VlmVariant::ZeroShot {
        params.w1.fill(0.0);
        return Ok((params, Vec::new()));
    }
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if set.features.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "features have {} columns, tower expects {d}",
            set.features.ncols()
        )));
    }
    let mut state = hyper.optimizer.state();
    let shuffle_seed = rng::derive_seed(hyper.seed, "vlm-shuffle");
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut curve = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..hyper.max_epochs {
        order.shuffle(&mut rng::stream(shuffle_seed, epoch as u64));
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(hyper.batch_size) {
            let x = set.features.select(Axis(0), chunk);
            let t = set.texts.select(Axis(0), chunk);
            let groups: Option<Vec<usize>> = hyper
                .mask_same_image
                .then(|| chunk.iter().map(|&i| set.groups[i]).collect());
            let cache = params.forward(x.view());
            let (loss, dy) = bidir_contrastive_grad(cache.out.view(), t.view(), hyper.tau, groups.as_deref())?;
            let g = params.backward(x.view(), &cache, dy);
            if !loss.is_finite() || !g.is_finite() {
                return Err(Error::NonFiniteGradient(format!("vlm epoch {epoch} loss {loss}")));
            }
            total += loss;
            batches += 1;
            let p: Vec<&mut [f64]> = params.tensors_mut().into_iter().collect();
            state.step(&hyper.optimizer, hyper.lr, p, g.tensors().into_iter().collect());
        }
        let mean = total / batches as f64;
        curve.push(mean);
        if mean < best {
            best = mean;
            stale = 0;
        } else {
            stale += 1;
            if stale >= hyper.patience {
                break;
            }
        }
    }
    Ok((params, curve))
}
