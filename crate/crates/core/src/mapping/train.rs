use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{grad_batch, MappingConfig, MappingParams};
use crate::catalog::AttrId;
use crate::encoders::Encoder;
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::synth::Dataset;
use crate::{par, rng};

/// Frozen embeddings of one sample's filled regions and text attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedSample {
    pub id: usize,
    pub region_embs: Array2<f64>,
    pub attr_ids: Vec<AttrId>,
    pub attr_embs: Array2<f64>,
}

/// Encodes every filled region and looks up every text attribute once.
pub fn precompute(ds: &Dataset, encoder: &Encoder) -> Result<Vec<PrecomputedSample>> {
    let table = encoder.attribute_table(&ds.catalog)?;
    let ids: Vec<usize> = (0..ds.samples.len()).collect();
    par::try_map(&ids, |&id| {
        let s = &ds.samples[id];
        let regions = s.filled_regions();
        let attr_ids: Vec<AttrId> = s.text_attributes(&ds.catalog).into_iter().collect();
        if regions.is_empty() || attr_ids.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "sample {id} has no filled region or no text attribute"
            )));
        }
        let mut region_embs = Array2::zeros((regions.len(), encoder.d()));
        for (row, &r) in regions.iter().enumerate() {
            region_embs
                .row_mut(row)
                .assign(&encoder.encode_region(&s.region_pixels(r))?.values);
        }
        Ok(PrecomputedSample {
            id,
            region_embs,
            attr_embs: rows_of(table.view(), &attr_ids),
            attr_ids,
        })
    })
}

fn rows_of(table: ArrayView2<f64>, ids: &[AttrId]) -> Array2<f64> {
    let mut out = Array2::zeros((ids.len(), table.ncols()));
    for (i, k) in ids.iter().enumerate() {
        out.row_mut(i).assign(&table.row(k.index()));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::InvalidConfig(format!("lr = {} must be > 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Shuffled mini-batch training. Returns the final parameters and the mean
/// batch loss of each epoch.
pub fn train_mapping(
    samples: &[PrecomputedSample],
    cfg: &MappingConfig,
    hyper: &TrainHyper,
    num_attrs: usize,
    encoder_hash: u64,
) -> Result<(MappingParams, Vec<f64>)> {
    hyper.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = samples[0].region_embs.ncols();
    let mut params = MappingParams::init(cfg, num_attrs, d, hyper.seed, encoder_hash)?;
    let mut state = hyper.optimizer.state();
    let shuffle_seed = rng::derive_seed(hyper.seed, "mapping-shuffle");
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng::stream(shuffle_seed, epoch as u64));
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<PrecomputedSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let (loss, grads) = grad_batch(&params, &batch)?;
            total += loss;
            batches += 1;
            let p: Vec<&mut [f64]> = params.heads.iter_mut().flat_map(|h| h.tensors_mut()).collect();
            let g: Vec<&[f64]> = grads.heads.iter().flat_map(|h| h.tensors()).collect();
            state.step(&hyper.optimizer, hyper.lr, p, g);
        }
        if !params.is_finite() {
            return Err(Error::NonFiniteGradient(format!("parameters after epoch {epoch}")));
        }
        curve.push(total / batches as f64);
    }
    Ok((params, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::AttributeCatalog;
    use crate::encoders::EncoderConfig;
    use crate::synth::{generate_dataset, GenConfig};

    fn hyper(epochs: usize) -> TrainHyper {
        TrainHyper {
            lr: 1e-3,
            batch_size: 16,
            epochs,
            seed: 3,
            optimizer: Optimizer::default(),
        }
    }

    fn data() -> (Vec<PrecomputedSample>, Encoder) {
        let cat = AttributeCatalog::standard();
        let ds = generate_dataset(&GenConfig::new(8.0, 600, 1), &cat).unwrap();
        let enc = Encoder::new(EncoderConfig::default()).unwrap();
        (precompute(&ds, &enc).unwrap(), enc)
    }

    #[test]
    fn precompute_matches_dataset() {
        let cat = AttributeCatalog::standard();
        let ds = generate_dataset(&GenConfig::new(8.0, 200, 1), &cat).unwrap();
        let enc = Encoder::new(EncoderConfig::default()).unwrap();
        let pre = precompute(&ds, &enc).unwrap();
        assert_eq!(pre.len(), ds.samples.len());
        for (p, s) in pre.iter().zip(&ds.samples) {
            assert_eq!(p.region_embs.nrows(), s.filled_regions().len());
            assert_eq!(p.attr_ids.len(), s.text_attributes(&cat).len());
            for row in p.region_embs.rows() {
                assert!((row.dot(&row) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (pre, enc) = data();
        let cfg = MappingConfig::default();
        let (p, curve) = train_mapping(&pre, &cfg, &hyper(0), 20, enc.hash()).unwrap();
        assert!(curve.is_empty());
        assert_eq!(p, MappingParams::init(&cfg, 20, enc.d(), 3, enc.hash()).unwrap());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (pre, enc) = data();
        let cfg = MappingConfig::default();
        let (a, curve) = train_mapping(&pre, &cfg, &hyper(6), 20, enc.hash()).unwrap();
        let (b, _) = par::with_threads(1, || train_mapping(&pre, &cfg, &hyper(6), 20, enc.hash())).unwrap();
        assert_eq!(a, b);
        assert!(curve[5] < curve[0], "{curve:?}");
    }

    #[test]
    fn single_head_trains() {
        let (pre, enc) = data();
        let cfg = MappingConfig {
            p: 1,
            ..Default::default()
        };
        let (p, curve) = train_mapping(&pre, &cfg, &hyper(2), 20, enc.hash()).unwrap();
        assert_eq!(p.heads.len(), 1);
        assert!(curve.iter().all(|l| l.is_finite()));
    }
}
