//! Turning mapping scores into region-attribute pairs and an augmented
//! training stream.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::catalog::{fill, AttrId, AttributeCatalog};
use crate::error::{Error, Result};
use crate::mapping::{forward_head, MappingParams, PrecomputedSample};
use crate::par;
use crate::synth::{Dataset, Sample, NUM_REGIONS};

/// Anything that scores a sample's regions against one attribute.
pub trait RegionScorer: Sync {
    /// `v[r]` for every row of `region_embs`.
    fn score(&self, region_embs: ArrayView2<f64>, k: AttrId, h: ArrayView1<f64>) -> Result<Array1<f64>>;
}

impl RegionScorer for MappingParams {
    fn score(&self, region_embs: ArrayView2<f64>, k: AttrId, h: ArrayView1<f64>) -> Result<Array1<f64>> {
        Ok(forward_head(self, k, region_embs)?.dot(&h))
    }
}

/// Scores raw encoder embeddings directly against attribute embeddings.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroShotScorer;

impl RegionScorer for ZeroShotScorer {
    fn score(&self, region_embs: ArrayView2<f64>, _k: AttrId, h: ArrayView1<f64>) -> Result<Array1<f64>> {
        if region_embs.ncols() != h.len() {
            return Err(Error::DimensionMismatch(format!(
                "regions have {} columns, attribute has {}",
                region_embs.ncols(),
                h.len()
            )));
        }
        Ok(region_embs.dot(&h))
    }
}

/// `v[r] = P_k(e)[r] . h`.
pub fn score_regions(
    params: &MappingParams,
    region_embs: ArrayView2<f64>,
    k: AttrId,
    h: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    params.score(region_embs, k, h)
}

/// `{ r : v[r] > max(v) - epsilon }`, ascending.
pub fn assign_attribute(v: &[f64], epsilon: f64) -> Result<Vec<usize>> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if v.is_empty() {
        return Err(Error::EmptyScores);
    }
    let cut = max - epsilon;
    Ok((0..v.len()).filter(|&r| v[r] > cut || v[r] == max).collect())
}

/// Row argmax of an `r x a` score matrix; ties go to the lowest column.
pub fn assign_regions_argmax(scores: ArrayView2<f64>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignMode {
    AttrToRegions,
    RegionToArgmaxAttr,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignConfig {
    pub epsilon: f64,
    pub mode: AssignMode,
}

impl AssignConfig {
    pub fn attr_to_regions(epsilon: f64) -> Self {
        AssignConfig {
            epsilon,
            mode: AssignMode::AttrToRegions,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "epsilon = {} must be finite and >= 0",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAttributePair {
    pub sample: usize,
    pub region: u8,
    pub attr: AttrId,
    pub score: f64,
    pub sentence: String,
}

/// First sentence of the sample naming `k`, or the first template filled
/// with `k`'s name.
pub fn sentence_for(sample: &Sample, k: AttrId, catalog: &AttributeCatalog) -> Result<String> {
    if let Some(s) = sample.sentences.iter().find(|s| catalog.attributes_in(s).contains(&k)) {
        return Ok(s.clone());
    }
    let a = catalog.get(k)?;
    let t = catalog
        .templates_for(a.category)
        .first()
        .ok_or_else(|| Error::InvalidConfig(format!("no template for {:?}", a.category)))?;
    Ok(fill(t, &a.name))
}

/// Region-attribute pairs for one sample. `pre` must be the precomputed
/// embeddings of `sample` (rows follow its filled regions).
pub fn expand_pairs(
    sample: &Sample,
    pre: &PrecomputedSample,
    scorer: &dyn RegionScorer,
    cfg: &AssignConfig,
    catalog: &AttributeCatalog,
) -> Result<Vec<RegionAttributePair>> {
    cfg.validate()?;
    let regions = sample.filled_regions();
    if regions.len() != pre.region_embs.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "sample {} has {} filled regions but {} embeddings",
            pre.id,
            regions.len(),
            pre.region_embs.nrows()
        )));
    }
    let mut scores = Array2::<f64>::zeros((regions.len(), pre.attr_ids.len()));
    for (col, (k, h)) in pre.attr_ids.iter().zip(pre.attr_embs.rows()).enumerate() {
        let v = scorer.score(pre.region_embs.view(), *k, h)?;
        scores.column_mut(col).assign(&v);
    }
    let mut out = Vec::new();
    let mut emit = |row: usize, col: usize| -> Result<()> {
        let k = pre.attr_ids[col];
        out.push(RegionAttributePair {
            sample: pre.id,
            region: regions[row],
            attr: k,
            score: scores[[row, col]],
            sentence: sentence_for(sample, k, catalog)?,
        });
        Ok(())
    };
    match cfg.mode {
        AssignMode::AttrToRegions => {
            for col in 0..pre.attr_ids.len() {
                let v: Vec<f64> = scores.column(col).to_vec();
                for row in assign_attribute(&v, cfg.epsilon)? {
                    emit(row, col)?;
                }
            }
        }
        AssignMode::RegionToArgmaxAttr => {
            for (row, col) in assign_regions_argmax(scores.view()).into_iter().enumerate() {
                emit(row, col)?;
            }
        }
    }
    Ok(out)
}

/// Pairs for every sample, in sample order.
pub fn expand_all(
    ds: &Dataset,
    pre: &[PrecomputedSample],
    scorer: &dyn RegionScorer,
    cfg: &AssignConfig,
) -> Result<Vec<RegionAttributePair>> {
    if pre.len() != ds.samples.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} precomputed samples for {} dataset samples",
            pre.len(),
            ds.samples.len()
        )));
    }
    let per = par::try_map(pre, |p| expand_pairs(&ds.samples[p.id], p, scorer, cfg, &ds.catalog))?;
    Ok(per.into_iter().flatten().collect())
}

/// One training item, tagged with where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "origin", rename_all = "snake_case")]
pub enum StreamItem {
    /// A whole image with its full description.
    Image { sample: usize },
    /// One region with a sentence.
    Region { sample: usize, region: u8, text: String },
}

impl StreamItem {
    pub fn sample(&self) -> usize {
        match self {
            StreamItem::Image { sample } | StreamItem::Region { sample, .. } => *sample,
        }
    }
}

/// Where the pairs of an augmented stream came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    TrainedMapping,
    ZeroShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedDataset {
    pub source: Option<PairSource>,
    pub items: Vec<StreamItem>,
}

/// Every original sample followed by one region item per pair.
pub fn augment_dataset(
    ds: &Dataset,
    pairs: &[RegionAttributePair],
    source: Option<PairSource>,
) -> Result<AugmentedDataset> {
    let mut items: Vec<StreamItem> = (0..ds.samples.len())
        .map(|sample| StreamItem::Image { sample })
        .collect();
    for p in pairs {
        let s = ds
            .samples
            .get(p.sample)
            .ok_or_else(|| Error::DanglingReference(format!("pair references sample {}", p.sample)))?;
        if p.region as usize >= NUM_REGIONS || !s.filled_regions().contains(&p.region) {
            return Err(Error::DanglingReference(format!(
                "pair references empty region {} of sample {}",
                p.region, p.sample
            )));
        }
        items.push(StreamItem::Region {
            sample: p.sample,
            region: p.region,
            text: p.sentence.clone(),
        });
    }
    Ok(AugmentedDataset { source, items })
}

/// One JSON object per line.
pub fn pairs_to_jsonl(pairs: &[RegionAttributePair]) -> Result<String> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn pairs_from_jsonl(text: &str) -> Result<Vec<RegionAttributePair>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
