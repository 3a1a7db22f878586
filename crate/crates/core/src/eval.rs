//! Retrieval evaluation and mapping quality.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{sentence_for, RegionAttributePair};
use crate::catalog::{AttrId, AttributeCatalog, Category};
use crate::encoders::Encoder;
use crate::error::{Error, Result};
use crate::synth::Dataset;
use crate::vlm::{VlmParams, VlmVariant};
use crate::{par, rng};

/// Tower embeddings of every filled test region with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    pub embeddings: Array2<f64>,
    pub gt: Vec<BTreeSet<AttrId>>,
    /// `(sample, region)` for each row.
    pub provenance: Vec<(usize, u8)>,
}

impl RetrievalIndex {
    pub fn build(ds: &Dataset, encoder: &Encoder, vlm: &VlmParams) -> Result<Self> {
        if encoder.hash() != vlm.encoder_hash {
            return Err(Error::EncoderMismatch {
                expected: vlm.encoder_hash,
                found: encoder.hash(),
            });
        }
        let provenance: Vec<(usize, u8)> = ds
            .samples
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.filled_regions().into_iter().map(move |r| (i, r)))
            .collect();
        if provenance.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let raw = par::try_map(&provenance, |&(i, r)| {
            encoder.encode_region(&ds.samples[i].region_pixels(r))
        })?;
        let mut feats = Array2::zeros((raw.len(), encoder.d()));
        for (i, e) in raw.into_iter().enumerate() {
            feats.row_mut(i).assign(&e.values);
        }
        let gt = provenance
            .iter()
            .map(|&(i, r)| ds.samples[i].region_attributes(r))
            .collect();
        Ok(RetrievalIndex {
            embeddings: vlm.embed_features(feats.view())?,
            gt,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }

    /// Rows whose ground truth contains `k`.
    pub fn relevant(&self, k: AttrId) -> BTreeSet<usize> {
        (0..self.len()).filter(|&i| self.gt[i].contains(&k)).collect()
    }
}

/// Indices sorted by descending score; ties go to the lower index.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Full ranking of index rows for each query row.
pub fn text_to_region(queries: ArrayView2<f64>, index: &RetrievalIndex) -> Result<Vec<Vec<usize>>> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let sims = queries.dot(&index.embeddings.t());
    Ok(par::map_range(queries.nrows(), |q| {
        rank_desc(sims.row(q).as_slice().expect("standard layout"))
    }))
}

pub fn precision_at_k(ranking: &[usize], gt: &BTreeSet<usize>, k: usize) -> Result<f64> {
    if k > ranking.len() {
        return Err(Error::KTooLarge { k, len: ranking.len() });
    }
    if k == 0 {
        return Ok(0.0);
    }
    Ok(ranking[..k].iter().filter(|i| gt.contains(i)).count() as f64 / k as f64)
}

/// Precision at `k = |gt|`.
pub fn r_precision(ranking: &[usize], gt: &BTreeSet<usize>) -> Result<f64> {
    precision_at_k(ranking, gt, gt.len())
}

/// Region-to-text R-Precision from per-attribute scores (indexed by id):
/// the best attribute of each category is kept, those candidates are
/// ranked and the top `|gt|` are scored.
pub fn region_to_text_scores(scores: &[f64], catalog: &AttributeCatalog, gt: &BTreeSet<AttrId>) -> Result<f64> {
    if !(2..=4).contains(&gt.len()) {
        return Err(Error::InvalidGroundTruth(format!(
            "{} attributes, need 2 to 4",
            gt.len()
        )));
    }
    let mut seen = BTreeSet::new();
    for k in gt {
        if !seen.insert(catalog.get(*k)?.category) {
            return Err(Error::InvalidGroundTruth(format!(
                "two attributes in one category: {gt:?}"
            )));
        }
    }
    let mut winners: Vec<(AttrId, f64)> = Vec::with_capacity(4);
    for c in Category::ALL {
        let mut best: Option<(AttrId, f64)> = None;
        for a in catalog.in_category(c) {
            let s = scores[a.id.index()];
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((a.id, s));
            }
        }
        winners.extend(best);
    }
    winners.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let k = gt.len();
    Ok(winners[..k].iter().filter(|(a, _)| gt.contains(a)).count() as f64 / k as f64)
}

pub fn region_to_text(
    region: ArrayView1<f64>,
    attr_table: ArrayView2<f64>,
    catalog: &AttributeCatalog,
    gt: &BTreeSet<AttrId>,
) -> Result<f64> {
    let scores = attr_table.dot(&region);
    region_to_text_scores(scores.as_slice().expect("contiguous"), catalog, gt)
}

/// One text-to-region query's scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub attr: AttrId,
    pub n_gt: usize,
    pub p_at_25: Option<f64>,
    pub p_at_100: Option<f64>,
    pub r_precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub queries: Vec<QueryMetrics>,
    pub t2r_r_precision: f64,
    pub t2r_p_at_25: Option<f64>,
    pub t2r_p_at_100: Option<f64>,
    pub r2t_r_precision: f64,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Both retrieval tasks against `index`, with `attr_table` as the query
/// side (one row per attribute id).
pub fn evaluate_retrieval(
    index: &RetrievalIndex,
    attr_table: ArrayView2<f64>,
    catalog: &AttributeCatalog,
) -> Result<RetrievalMetrics> {
    let rankings = text_to_region(attr_table, index)?;
    let mut queries = Vec::new();
    for (q, ranking) in rankings.iter().enumerate() {
        let k = AttrId(q as u8);
        let gt = index.relevant(k);
        if gt.is_empty() {
            continue;
        }
        let at = |n: usize| -> Result<Option<f64>> {
            if gt.len() >= n {
                Ok(Some(precision_at_k(ranking, &gt, n)?))
            } else {
                Ok(None)
            }
        };
        queries.push(QueryMetrics {
            attr: k,
            n_gt: gt.len(),
            p_at_25: at(25)?,
            p_at_100: at(100)?,
            r_precision: r_precision(ranking, &gt)?,
        });
    }
    let rows: Vec<usize> = (0..index.len()).collect();
    let r2t = par::try_map(&rows, |&i| {
        region_to_text(index.embeddings.row(i), attr_table, catalog, &index.gt[i])
    })?;
    Ok(RetrievalMetrics {
        t2r_r_precision: mean(queries.iter().map(|q| q.r_precision)).unwrap_or(0.0),
        t2r_p_at_25: mean(queries.iter().filter_map(|q| q.p_at_25)),
        t2r_p_at_100: mean(queries.iter().filter_map(|q| q.p_at_100)),
        r2t_r_precision: mean(r2t).unwrap_or(0.0),
        queries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MappingQuality {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro-averaged precision, recall and F1 of generated
/// `(sample, region, attr)` triples against the ground truth.
pub fn mapping_quality(
    generated: &BTreeSet<(usize, u8, AttrId)>,
    gt: &BTreeSet<(usize, u8, AttrId)>,
) -> MappingQuality {
    let correct = generated.intersection(gt).count() as f64;
    let precision = if generated.is_empty() {
        0.0
    } else {
        correct / generated.len() as f64
    };
    let recall = if gt.is_empty() { 0.0 } else { correct / gt.len() as f64 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    MappingQuality { precision, recall, f1 }
}

pub fn pair_set(pairs: &[RegionAttributePair]) -> BTreeSet<(usize, u8, AttrId)> {
    pairs.iter().map(|p| (p.sample, p.region, p.attr)).collect()
}

/// Every ground-truth region-attribute pair of the dataset.
pub fn gt_set(ds: &Dataset) -> BTreeSet<(usize, u8, AttrId)> {
    ds.samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.gt_pairs.iter().map(move |&(r, a)| (i, r, a)))
        .collect()
}

/// Each text attribute of each sample sent to one uniformly chosen filled
/// region.
pub fn random_mapping_baseline(ds: &Dataset, seed: u64) -> Result<Vec<RegionAttributePair>> {
    let base = rng::derive_seed(seed, "random-mapping");
    let mut out = Vec::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let regions = s.filled_regions();
        if regions.is_empty() {
            continue;
        }
        let mut r = rng::stream(base, i as u64);
        for k in s.text_attributes(&ds.catalog) {
            out.push(RegionAttributePair {
                sample: i,
                region: regions[r.random_range(0..regions.len())],
                attr: k,
                score: 0.0,
                sentence: sentence_for(s, k, &ds.catalog)?,
            });
        }
    }
    Ok(out)
}

/// Everything reported for one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: VlmVariant,
    pub c: f64,
    pub config_hash: String,
    pub retrieval: RetrievalMetrics,
    /// Mapping quality of the pairs this variant trained on, if any.
    pub mapping: Option<MappingQuality>,
}

impl MetricsReport {
    /// `(task, metric, value)` rows in a fixed order.
    pub fn rows(&self) -> Vec<(&'static str, String, f64)> {
        let r = &self.retrieval;
        let mut out = vec![("t2r", "r_precision".to_string(), r.t2r_r_precision)];
        if let Some(v) = r.t2r_p_at_25 {
            out.push(("t2r", "p_at_25".into(), v));
        }
        if let Some(v) = r.t2r_p_at_100 {
            out.push(("t2r", "p_at_100".into(), v));
        }
        out.push(("r2t", "r_precision".into(), r.r2t_r_precision));
        if let Some(m) = self.mapping {
            out.push(("mapping", "precision".into(), m.precision));
            out.push(("mapping", "recall".into(), m.recall));
            out.push(("mapping", "f1".into(), m.f1));
        }
        out
    }
}

/// `variant,c,task,metric,value` with a header line.
pub fn metrics_csv(reports: &[MetricsReport], extra: &[(String, f64, &str, String, f64)]) -> String {
    let mut out = String::from("variant,c,task,metric,value\n");
    for rep in reports {
        for (task, metric, v) in rep.rows() {
            out.push_str(&format!("{},{},{task},{metric},{v}\n", rep.variant, rep.c));
        }
    }
    for (variant, c, task, metric, v) in extra {
        out.push_str(&format!("{variant},{c},{task},{metric},{v}\n"));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub c: f64,
    pub t2r_rprec: f64,
    pub r2t_rprec: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("c,t2r_rprec,r2t_rprec\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.c, r.t2r_rprec, r.r2t_rprec));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use crate::synth::{generate_dataset, GenConfig};
    use ndarray::array;
    use proptest::prelude::*;

    fn set(xs: &[usize]) -> BTreeSet<usize> {
        xs.iter().copied().collect()
    }

    #[test]
    fn precision_examples() {
        assert_eq!(precision_at_k(&[3, 1, 2], &set(&[1, 3]), 2).unwrap(), 1.0);
        assert_eq!(r_precision(&[0, 1, 2, 3], &set(&[0, 2])).unwrap(), 0.5);
        assert!(matches!(
            precision_at_k(&[0], &set(&[0]), 2),
            Err(Error::KTooLarge { .. })
        ));
    }

    #[test]
    fn ranking_breaks_ties_by_index() {
        assert_eq!(rank_desc(&[0.5, 0.9, 0.5, 0.1]), [1, 0, 2, 3]);
    }

    fn index_of(rows: Array2<f64>, gt: Vec<BTreeSet<AttrId>>) -> RetrievalIndex {
        let n = rows.nrows();
        RetrievalIndex {
            embeddings: rows,
            gt,
            provenance: (0..n).map(|i| (i, 0)).collect(),
        }
    }

    #[test]
    fn text_to_region_examples() {
        let one = index_of(array![[1.0, 0.0]], vec![BTreeSet::new()]);
        let q = array![[0.0, 1.0], [1.0, 0.0]];
        assert_eq!(text_to_region(q.view(), &one).unwrap(), vec![vec![0], vec![0]]);
        let idx = index_of(array![[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]], vec![BTreeSet::new(); 3]);
        let q = array![[0.6, 0.8]];
        assert_eq!(text_to_region(q.view(), &idx).unwrap()[0][0], 1);
        let empty = index_of(Array2::zeros((0, 2)), vec![]);
        assert!(matches!(text_to_region(q.view(), &empty), Err(Error::EmptyIndex)));
    }

    #[test]
    fn region_to_text_examples() {
        let cat = AttributeCatalog::standard();
        let id = |n: &str| cat.by_name(n).unwrap().id;
        let mut scores = vec![0.0; 20];
        scores[id("six").index()] = 0.9;
        scores[id("red").index()] = 0.8;
        let gt: BTreeSet<_> = [id("six"), id("red")].into();
        assert_eq!(region_to_text_scores(&scores, &cat, &gt).unwrap(), 1.0);

        let gt4: BTreeSet<_> = [id("six"), id("red"), id("circle"), id("large")].into();
        scores[id("circle").index()] = 0.7;
        scores[id("large").index()] = 0.6;
        assert_eq!(region_to_text_scores(&scores, &cat, &gt4).unwrap(), 1.0);

        let mut adv = vec![0.0; 20];
        adv[id("rectangle").index()] = 0.9;
        adv[id("small").index()] = 0.8;
        assert_eq!(region_to_text_scores(&adv, &cat, &gt).unwrap(), 0.0);

        let bad: BTreeSet<_> = [id("six")].into();
        assert!(matches!(
            region_to_text_scores(&adv, &cat, &bad),
            Err(Error::InvalidGroundTruth(_))
        ));
        let same: BTreeSet<_> = [id("six"), id("seven")].into();
        assert!(matches!(
            region_to_text_scores(&adv, &cat, &same),
            Err(Error::InvalidGroundTruth(_))
        ));
    }

    #[test]
    fn mapping_quality_examples() {
        let a = AttrId(1);
        let b = AttrId(2);
        let gt: BTreeSet<_> = [(0, 1, a), (0, 2, b)].into();
        let m = mapping_quality(&gt, &gt);
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        let m = mapping_quality(&[(0, 1, a)].into(), &gt);
        assert_eq!((m.precision, m.recall), (1.0, 0.5));
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        let m = mapping_quality(&BTreeSet::new(), &gt);
        assert_eq!((m.precision, m.f1), (0.0, 0.0));
    }

    #[test]
    fn random_baseline_properties() {
        let cat = AttributeCatalog::standard();
        let ds = generate_dataset(&GenConfig::new(2.0, 40, 1), &cat).unwrap();
        let pairs = random_mapping_baseline(&ds, 5).unwrap();
        assert_eq!(pairs, random_mapping_baseline(&ds, 5).unwrap());
        // every sample has one region, so the baseline recovers everything
        assert_eq!(mapping_quality(&pair_set(&pairs), &gt_set(&ds)).recall, 1.0);
    }

    #[test]
    fn untrained_index_covers_test_regions() {
        let cat = AttributeCatalog::standard();
        let ds = generate_dataset(&GenConfig::new(10.0, 200, 9), &cat).unwrap();
        let enc = Encoder::new(EncoderConfig::default()).unwrap();
        let vlm = VlmParams::init(enc.d(), 0.07, 0, enc.hash(), VlmVariant::ZeroShot);
        let idx = RetrievalIndex::build(&ds, &enc, &vlm).unwrap();
        let regions: usize = ds.samples.iter().map(|s| s.filled_regions().len()).sum();
        assert_eq!(idx.len(), regions);
        let table = enc.attribute_table(&cat).unwrap();
        assert_eq!(text_to_region(table.view(), &idx).unwrap().len(), 20);
        let m = evaluate_retrieval(&idx, table.view(), &cat).unwrap();
        for v in [m.t2r_r_precision, m.r2t_r_precision] {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn csv_layout() {
        let rep = MetricsReport {
            variant: VlmVariant::Villa,
            c: 29.4,
            config_hash: "x".into(),
            retrieval: RetrievalMetrics {
                queries: vec![],
                t2r_r_precision: 0.5,
                t2r_p_at_25: None,
                t2r_p_at_100: None,
                r2t_r_precision: 0.25,
            },
            mapping: None,
        };
        assert_eq!(
            metrics_csv(&[rep], &[]),
            "variant,c,task,metric,value\nvilla,29.4,t2r,r_precision,0.5\nvilla,29.4,r2t,r_precision,0.25\n"
        );
        assert_eq!(
            sweep_csv(&[SweepRow {
                c: 5.0,
                t2r_rprec: 0.5,
                r2t_rprec: 0.75
            }]),
            "c,t2r_rprec,r2t_rprec\n5,0.5,0.75\n"
        );
    }

    proptest! {
        #[test]
        fn r_precision_is_precision_at_gt(perm in Just((0..30usize).collect::<Vec<_>>()).prop_shuffle(),
                                           gt in proptest::collection::btree_set(0usize..30, 1..30)) {
            let r = r_precision(&perm, &gt).unwrap();
            prop_assert_eq!(r, precision_at_k(&perm, &gt, gt.len()).unwrap());
            prop_assert!((0.0..=1.0).contains(&r));
        }

        #[test]
        fn prepending_a_hit_never_lowers_precision(perm in Just((1..20usize).collect::<Vec<_>>()).prop_shuffle(),
                                                    gt in proptest::collection::btree_set(1usize..20, 1..10),
                                                    k in 1usize..19) {
            let mut gt = gt;
            let before = precision_at_k(&perm, &gt, k).unwrap();
            gt.insert(0);
            let mut with = vec![0];
            with.extend(&perm);
            prop_assert!(precision_at_k(&with, &gt, k).unwrap() >= before);
        }
    }
}
