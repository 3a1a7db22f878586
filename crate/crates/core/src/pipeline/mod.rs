//! End-to-end runs over a run directory.
//!
//! ```text
//! config.txt                     the run configuration, written by every command
//! dataset/                       manifest.jsonl, catalog.json, gen.json, images/
//! mapping/params.ckpt, loss.csv
//! assign/                        villa.jsonl, zs.jsonl, random.jsonl, assign.json
//! vlm/<variant>.ckpt, <variant>_loss.csv
//! metrics.csv, metrics.json
//! sweep.csv, sweep.json
//! report.txt
//! ```
//!
//! Each stage records a hash chained from its upstream stage and its own
//! config section. Downstream stages recompute the expected hash from the
//! current config and refuse artifacts that do not match.

mod config;
mod report;

pub use config::{hex_sha256, EvalConfig, RunConfig, KEYS};
pub use report::render_report;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assignment::{
    augment_dataset, expand_all, pairs_from_jsonl, pairs_to_jsonl, AssignConfig, AugmentedDataset, PairSource,
    RegionAttributePair, ZeroShotScorer,
};
use crate::catalog::AttributeCatalog;
use crate::checkpoint::{self, round_to_f32, Checkpoint};
use crate::encoders::Encoder;
use crate::error::{Error, Result};
use crate::eval::{self, MappingQuality, MetricsReport, RetrievalIndex, RetrievalMetrics, SweepRow};
use crate::fsio;
use crate::mapping::{precompute, train_mapping, MappingParams, PrecomputedSample};
use crate::synth::{self, store, Dataset, GenConfig};
use crate::vlm::{build_stream, embed_stream, train_vlm, VlmParams, VlmVariant};

fn chain(upstream: &str, stage: &str, body: &str) -> String {
    hex_sha256(format!("{upstream}\n{stage}\n{body}").as_bytes())
}

fn uses_pairs(v: VlmVariant) -> bool {
    matches!(v, VlmVariant::ZsMap | VlmVariant::Villa)
}

/// Hash of every stage under one config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageHashes {
    pub generate: String,
    pub encoder: String,
    pub mapping: String,
    pub assign: String,
    vlm_body: String,
}

impl StageHashes {
    pub fn new(cfg: &RunConfig) -> Self {
        let generate = chain("", "generate", &cfg.section(&["gen."]));
        let encoder = chain(&generate, "encoder", &cfg.section(&["enc."]));
        let mapping = chain(&encoder, "train-map", &cfg.section(&["map."]));
        let assign = chain(&mapping, "assign", &cfg.section(&["assign.", "eval.random_seed"]));
        let vlm_body = cfg
            .section(&["vlm."])
            .lines()
            .filter(|l| !l.starts_with("vlm.variants"))
            .collect::<Vec<_>>()
            .join("\n");
        StageHashes {
            generate,
            encoder,
            mapping,
            assign,
            vlm_body,
        }
    }

    pub fn vlm(&self, variant: VlmVariant) -> String {
        let upstream = if uses_pairs(variant) {
            &self.assign
        } else {
            &self.encoder
        };
        chain(upstream, &format!("train-vlm {variant}"), &self.vlm_body)
    }

    pub fn evaluate(&self, cfg: &RunConfig) -> String {
        let mut upstream = self.assign.clone();
        for &v in &cfg.variants {
            upstream.push_str(&self.vlm(v));
        }
        chain(&upstream, "evaluate", &cfg.section(&["eval.", "vlm.variants"]))
    }

    pub fn sweep(&self, cfg: &RunConfig) -> String {
        let text = cfg.to_text();
        let body: Vec<&str> = text
            .lines()
            .filter(|l| !l.starts_with("gen.c ") && !l.starts_with("vlm.variants"))
            .collect();
        chain("", "sweep", &body.join("\n"))
    }
}

fn check_hash(artifact: &Path, recorded: &str, current: &str) -> Result<()> {
    if recorded != current {
        return Err(Error::ConfigHashMismatch {
            artifact: artifact.display().to_string(),
            recorded: recorded.to_string(),
            current: current.to_string(),
        });
    }
    Ok(())
}

fn loss_csv(curve: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (e, v) in curve.iter().enumerate() {
        out.push_str(&format!("{},{v}\n", e + 1));
    }
    out
}

/// Trains the mapping model and rounds it to checkpoint precision.
pub fn fit_mapping(
    cfg: &RunConfig,
    pre: &[PrecomputedSample],
    num_attrs: usize,
    encoder_hash: u64,
) -> Result<(MappingParams, Vec<f64>)> {
    let (mut params, curve) = train_mapping(pre, &cfg.mapping, &cfg.map_train, num_attrs, encoder_hash)?;
    for h in &mut params.heads {
        for t in h.tensors_mut() {
            round_to_f32(t);
        }
    }
    Ok((params, curve))
}

/// Trains one VLM variant and rounds it to checkpoint precision.
pub fn fit_vlm(
    cfg: &RunConfig,
    variant: VlmVariant,
    ds: &Dataset,
    encoder: &Encoder,
    aug: Option<&AugmentedDataset>,
) -> Result<(VlmParams, Vec<f64>)> {
    let items = build_stream(variant, ds, aug)?;
    let set = embed_stream(&items, ds, encoder)?;
    let (mut params, curve) = train_vlm(&set, variant, &cfg.vlm, encoder.d(), encoder.hash())?;
    for t in params.tensors_mut() {
        round_to_f32(t);
    }
    Ok((params, curve))
}

/// Pairs from the trained mapping (`Villa`) or zero-shot scores (`ZsMap`).
pub fn variant_pairs(
    cfg: &RunConfig,
    variant: VlmVariant,
    ds: &Dataset,
    pre: &[PrecomputedSample],
    encoder: &Encoder,
) -> Result<Vec<RegionAttributePair>> {
    match variant {
        VlmVariant::Villa => {
            let (params, _) = fit_mapping(cfg, pre, ds.catalog.len(), encoder.hash())?;
            expand_all(ds, pre, &params, &cfg.assign)
        }
        _ => expand_all(ds, pre, &ZeroShotScorer, &zs_assign(cfg)),
    }
}

fn zs_assign(cfg: &RunConfig) -> AssignConfig {
    AssignConfig {
        epsilon: cfg.zs_epsilon,
        mode: cfg.assign.mode,
    }
}

fn source_of(variant: VlmVariant) -> PairSource {
    if variant == VlmVariant::Villa {
        PairSource::TrainedMapping
    } else {
        PairSource::ZeroShot
    }
}

/// Held-out test set: `eval.test_images` images at complexity `c`.
pub fn test_set(cfg: &RunConfig, c: f64, seed: u64) -> Result<Dataset> {
    let g = GenConfig {
        c,
        b: 0,
        seed,
        digit_source: cfg.gen.digit_source.clone(),
    };
    synth::generate_count(&g, cfg.eval.test_images, &AttributeCatalog::standard(), &g.load_pool()?)
}

pub fn retrieval(test: &Dataset, encoder: &Encoder, params: &VlmParams) -> Result<RetrievalMetrics> {
    let index = RetrievalIndex::build(test, encoder, params)?;
    let table = encoder.attribute_table(&test.catalog)?;
    eval::evaluate_retrieval(&index, table.view(), &test.catalog)
}

/// Generates a dataset per complexity value, trains `variant` from scratch
/// and evaluates it on a fresh test set of the same complexity. Rows are
/// averaged over `seeds` consecutive seed offsets.
pub fn sweep_complexity(cfg: &RunConfig, cs: &[f64], variant: VlmVariant, seeds: usize) -> Result<Vec<SweepRow>> {
    if cs.len() < 2 {
        return Err(Error::InvalidConfig("a sweep needs at least two c values".into()));
    }
    let encoder = Encoder::new(cfg.encoder)?;
    let catalog = AttributeCatalog::standard();
    let mut rows = Vec::with_capacity(cs.len());
    for &c in cs {
        let (mut t2r, mut r2t) = (0.0, 0.0);
        for s in 0..seeds.max(1) as u64 {
            let mut run = cfg.clone();
            run.gen.c = c;
            run.gen.seed = cfg.gen.seed.wrapping_add(s);
            run.map_train.seed = cfg.map_train.seed.wrapping_add(s);
            run.vlm.seed = cfg.vlm.seed.wrapping_add(s);
            let ds = synth::generate_dataset(&run.gen, &catalog)?;
            let aug = if uses_pairs(variant) {
                let pre = precompute(&ds, &encoder)?;
                let pairs = variant_pairs(&run, variant, &ds, &pre, &encoder)?;
                Some(augment_dataset(&ds, &pairs, Some(source_of(variant)))?)
            } else {
                None
            };
            let (params, _) = fit_vlm(&run, variant, &ds, &encoder, aug.as_ref())?;
            let test = test_set(&run, c, cfg.eval.test_seed.wrapping_add(s))?;
            let m = retrieval(&test, &encoder, &params)?;
            t2r += m.t2r_r_precision;
            r2t += m.r2t_r_precision;
        }
        let n = seeds.max(1) as f64;
        rows.push(SweepRow {
            c,
            t2r_rprec: t2r / n,
            r2t_rprec: r2t / n,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignRecord {
    pub stage_hash: String,
    pub villa_pairs: usize,
    pub zs_pairs: usize,
    pub random_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub stage_hash: String,
    pub config_hash: String,
    pub test_images: usize,
    pub reports: Vec<MetricsReport>,
    /// Mapping quality of the random baseline, when pairs were evaluated.
    pub random_mapping: Option<MappingQuality>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub stage_hash: String,
    pub variant: VlmVariant,
    pub seeds: usize,
    pub rows: Vec<SweepRow>,
}

/// A run directory together with the config every command checks against.
#[derive(Debug, Clone)]
pub struct Run {
    pub dir: PathBuf,
    pub cfg: RunConfig,
    pub hashes: StageHashes,
}

impl Run {
    pub fn new(dir: impl Into<PathBuf>, cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Run {
            dir: dir.into(),
            hashes: StageHashes::new(&cfg),
            cfg,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Writes `config.txt`. Commands call this once their inputs pass the
    /// hash checks, before doing any work.
    pub fn write_config(&self) -> Result<()> {
        let text = format!(
            "# regalign {}\n# config_hash = {}\n{}",
            env!("CARGO_PKG_VERSION"),
            self.cfg.hash(),
            self.cfg.to_text()
        );
        fsio::write_atomic(&self.path("config.txt"), text.as_bytes())
    }

    fn encoder(&self) -> Result<Encoder> {
        Encoder::new(self.cfg.encoder)
    }

    pub fn generate(&self) -> Result<Dataset> {
        self.write_config()?;
        let ds = synth::generate_dataset(&self.cfg.gen, &AttributeCatalog::standard())?;
        store::save_dataset(&self.path("dataset"), &ds, &self.hashes.generate)?;
        Ok(ds)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let dir = self.path("dataset");
        let rec = store::load_gen_record(&dir)?;
        check_hash(&dir.join("gen.json"), &rec.stage_hash, &self.hashes.generate)?;
        store::load_dataset(&dir)
    }

    /// Trains the mapping model; returns the loss curve.
    pub fn train_map(&self) -> Result<Vec<f64>> {
        let ds = self.load_dataset()?;
        self.write_config()?;
        let encoder = self.encoder()?;
        let pre = precompute(&ds, &encoder)?;
        let (params, curve) = fit_mapping(&self.cfg, &pre, ds.catalog.len(), encoder.hash())?;
        checkpoint::mapping_checkpoint(&params, &self.hashes.mapping)?.save(&self.path("mapping/params.ckpt"))?;
        fsio::write_atomic(&self.path("mapping/loss.csv"), loss_csv(&curve).as_bytes())?;
        Ok(curve)
    }

    pub fn load_mapping(&self) -> Result<MappingParams> {
        let path = self.path("mapping/params.ckpt");
        let (params, hash) = checkpoint::mapping_from_checkpoint(&Checkpoint::load(&path)?, &path)?;
        check_hash(&path, &hash, &self.hashes.mapping)?;
        Ok(params)
    }

    /// Writes trained-mapping, zero-shot and random pairs.
    pub fn assign(&self) -> Result<AssignRecord> {
        let ds = self.load_dataset()?;
        let params = self.load_mapping()?;
        self.write_config()?;
        let encoder = self.encoder()?;
        let pre = precompute(&ds, &encoder)?;
        let villa = expand_all(&ds, &pre, &params, &self.cfg.assign)?;
        let zs = expand_all(&ds, &pre, &ZeroShotScorer, &zs_assign(&self.cfg))?;
        let random = eval::random_mapping_baseline(&ds, self.cfg.eval.random_seed)?;
        for (name, pairs) in [("villa", &villa), ("zs", &zs), ("random", &random)] {
            fsio::write_atomic(
                &self.path(&format!("assign/{name}.jsonl")),
                pairs_to_jsonl(pairs)?.as_bytes(),
            )?;
        }
        let rec = AssignRecord {
            stage_hash: self.hashes.assign.clone(),
            villa_pairs: villa.len(),
            zs_pairs: zs.len(),
            random_pairs: random.len(),
        };
        fsio::write_atomic(
            &self.path("assign/assign.json"),
            serde_json::to_string_pretty(&rec)?.as_bytes(),
        )?;
        Ok(rec)
    }

    /// Pairs written by [`Run::assign`]: `villa`, `zs` or `random`.
    pub fn load_pairs(&self, name: &str) -> Result<Vec<RegionAttributePair>> {
        let rec_path = self.path("assign/assign.json");
        let rec: AssignRecord = serde_json::from_str(&fsio::read_string(&rec_path)?)?;
        check_hash(&rec_path, &rec.stage_hash, &self.hashes.assign)?;
        pairs_from_jsonl(&fsio::read_string(&self.path(&format!("assign/{name}.jsonl")))?)
    }

    fn vlm_path(&self, variant: VlmVariant) -> PathBuf {
        self.path(&format!("vlm/{variant}.ckpt"))
    }

    /// Trains one variant; returns the loss curve.
    pub fn train_vlm(&self, variant: VlmVariant) -> Result<Vec<f64>> {
        let ds = self.load_dataset()?;
        let encoder = self.encoder()?;
        let aug = if uses_pairs(variant) {
            let name = if variant == VlmVariant::Villa { "villa" } else { "zs" };
            Some(augment_dataset(&ds, &self.load_pairs(name)?, Some(source_of(variant)))?)
        } else {
            None
        };
        self.write_config()?;
        let (params, curve) = fit_vlm(&self.cfg, variant, &ds, &encoder, aug.as_ref())?;
        checkpoint::vlm_checkpoint(&params, &self.hashes.vlm(variant))?.save(&self.vlm_path(variant))?;
        fsio::write_atomic(
            &self.path(&format!("vlm/{variant}_loss.csv")),
            loss_csv(&curve).as_bytes(),
        )?;
        Ok(curve)
    }

    pub fn load_vlm(&self, variant: VlmVariant) -> Result<VlmParams> {
        let path = self.vlm_path(variant);
        let (params, hash) = checkpoint::vlm_from_checkpoint(&Checkpoint::load(&path)?, &path)?;
        check_hash(&path, &hash, &self.hashes.vlm(variant))?;
        Ok(params)
    }

    /// Retrieval for every configured variant plus mapping quality of the
    /// pair sets; writes `metrics.csv` and `metrics.json`.
    pub fn evaluate(&self) -> Result<EvalRecord> {
        let models = self
            .cfg
            .variants
            .iter()
            .map(|&v| Ok((v, self.load_vlm(v)?)))
            .collect::<Result<Vec<_>>>()?;
        self.write_config()?;
        let encoder = self.encoder()?;
        let with_pairs = self.cfg.variants.iter().any(|&v| uses_pairs(v));
        let gt = if with_pairs {
            Some(eval::gt_set(&self.load_dataset()?))
        } else {
            None
        };
        let quality = |name: &str| -> Result<MappingQuality> {
            let gt = gt.as_ref().expect("loaded when pairs are used");
            Ok(eval::mapping_quality(&eval::pair_set(&self.load_pairs(name)?), gt))
        };
        let c = self.cfg.gen.c;
        let test = test_set(&self.cfg, c, self.cfg.eval.test_seed)?;
        let stage_hash = self.hashes.evaluate(&self.cfg);
        let mut reports = Vec::with_capacity(models.len());
        for (variant, params) in &models {
            let mapping = match variant {
                VlmVariant::Villa => Some(quality("villa")?),
                VlmVariant::ZsMap => Some(quality("zs")?),
                _ => None,
            };
            reports.push(MetricsReport {
                variant: *variant,
                c,
                config_hash: stage_hash.clone(),
                retrieval: retrieval(&test, &encoder, params)?,
                mapping,
            });
        }
        let random_mapping = if with_pairs { Some(quality("random")?) } else { None };
        let extra: Vec<(String, f64, &str, String, f64)> = random_mapping
            .iter()
            .flat_map(|q| {
                [("precision", q.precision), ("recall", q.recall), ("f1", q.f1)]
                    .map(|(m, v)| ("random".to_string(), c, "mapping", m.to_string(), v))
            })
            .collect();
        fsio::write_atomic(
            &self.path("metrics.csv"),
            eval::metrics_csv(&reports, &extra).as_bytes(),
        )?;
        let rec = EvalRecord {
            stage_hash,
            config_hash: self.cfg.hash(),
            test_images: test.samples.len(),
            reports,
            random_mapping,
        };
        fsio::write_atomic(
            &self.path("metrics.json"),
            serde_json::to_string_pretty(&rec)?.as_bytes(),
        )?;
        Ok(rec)
    }

    pub fn load_metrics(&self) -> Result<EvalRecord> {
        let path = self.path("metrics.json");
        let rec: EvalRecord = serde_json::from_str(&fsio::read_string(&path)?)?;
        check_hash(&path, &rec.stage_hash, &self.hashes.evaluate(&self.cfg))?;
        Ok(rec)
    }

    pub fn sweep(&self) -> Result<SweepRecord> {
        self.write_config()?;
        let rows = sweep_complexity(
            &self.cfg,
            &self.cfg.sweep_c,
            self.cfg.sweep_variant,
            self.cfg.eval.seeds,
        )?;
        fsio::write_atomic(&self.path("sweep.csv"), eval::sweep_csv(&rows).as_bytes())?;
        let rec = SweepRecord {
            stage_hash: self.hashes.sweep(&self.cfg),
            variant: self.cfg.sweep_variant,
            seeds: self.cfg.eval.seeds,
            rows,
        };
        fsio::write_atomic(&self.path("sweep.json"), serde_json::to_string_pretty(&rec)?.as_bytes())?;
        Ok(rec)
    }

    /// The sweep record, if a sweep has been run.
    pub fn load_sweep(&self) -> Result<Option<SweepRecord>> {
        let path = self.path("sweep.json");
        if !path.exists() {
            return Ok(None);
        }
        let rec: SweepRecord = serde_json::from_str(&fsio::read_string(&path)?)?;
        check_hash(&path, &rec.stage_hash, &self.hashes.sweep(&self.cfg))?;
        Ok(Some(rec))
    }

    /// Renders and writes `report.txt`.
    pub fn report(&self) -> Result<String> {
        let text = render_report(&self.cfg, &self.load_metrics()?, self.load_sweep()?.as_ref());
        self.write_config()?;
        fsio::write_atomic(&self.path("report.txt"), text.as_bytes())?;
        Ok(text)
    }

    /// Every stage in order. The sweep is optional since it trains from
    /// scratch once per complexity value.
    pub fn run_all(&self, with_sweep: bool) -> Result<String> {
        self.generate()?;
        let needs_pairs = self.cfg.variants.iter().any(|&v| uses_pairs(v));
        if needs_pairs {
            self.train_map()?;
            self.assign()?;
        }
        for &v in &self.cfg.variants {
            self.train_vlm(v)?;
        }
        self.evaluate()?;
        if with_sweep {
            self.sweep()?;
        }
        self.report()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::default();
        for kv in [
            "gen.c=8",
            "gen.b=300",
            "map.epochs=2",
            "vlm.max_epochs=2",
            "eval.test_images=20",
            "sweep.c=4,8",
        ] {
            cfg.apply_override(kv).unwrap();
        }
        cfg
    }

    #[test]
    fn hashes_chain() {
        let a = StageHashes::new(&small());
        let mut cfg = small();
        cfg.set("map.lr", "0.001").unwrap();
        let b = StageHashes::new(&cfg);
        assert_eq!(a.generate, b.generate);
        assert_eq!(a.encoder, b.encoder);
        assert_ne!(a.mapping, b.mapping);
        assert_ne!(a.assign, b.assign);
        assert_eq!(a.vlm(VlmVariant::FtImg), b.vlm(VlmVariant::FtImg));
        assert_ne!(a.vlm(VlmVariant::Villa), b.vlm(VlmVariant::Villa));
        cfg.set("vlm.variants", "villa").unwrap();
        assert_eq!(StageHashes::new(&cfg).vlm(VlmVariant::Villa), b.vlm(VlmVariant::Villa));
    }

    #[test]
    fn stages_run_and_check_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::new(dir.path(), small()).unwrap();
        assert!(matches!(run.evaluate(), Err(Error::MissingArtifact(_))));
        run.run_all(false).unwrap();
        let csv = fsio::read_string(&run.path("metrics.csv")).unwrap();
        for v in VlmVariant::ALL {
            assert!(csv.contains(&format!("\n{v},")), "{v}");
        }
        assert!(csv.contains("\nrandom,8,mapping,f1,"));
        assert_eq!(run.load_vlm(VlmVariant::FtImg).unwrap().variant, VlmVariant::FtImg);

        let mut cfg = small();
        cfg.set("map.lr", "0.001").unwrap();
        let changed = Run::new(dir.path(), cfg).unwrap();
        assert!(changed.load_dataset().is_ok());
        assert!(matches!(changed.load_mapping(), Err(Error::ConfigHashMismatch { .. })));
        assert!(matches!(
            changed.train_vlm(VlmVariant::Villa),
            Err(Error::ConfigHashMismatch { .. })
        ));
        assert!(changed.load_vlm(VlmVariant::FtImg).is_ok());
    }

    #[test]
    fn reloaded_mapping_matches_trained() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::new(dir.path(), small()).unwrap();
        let ds = run.generate().unwrap();
        run.train_map().unwrap();
        let enc = Encoder::new(run.cfg.encoder).unwrap();
        let pre = precompute(&ds, &enc).unwrap();
        let (fresh, _) = fit_mapping(&run.cfg, &pre, ds.catalog.len(), enc.hash()).unwrap();
        assert_eq!(run.load_mapping().unwrap(), fresh);
    }

    #[test]
    fn repeated_sweep_value_gives_identical_rows() {
        let cfg = small();
        let rows = sweep_complexity(&cfg, &[8.0, 8.0], VlmVariant::FtImg, 1).unwrap();
        assert_eq!(rows[0], rows[1]);
        assert!(sweep_complexity(&cfg, &[8.0], VlmVariant::FtImg, 1).is_err());
    }

    #[test]
    fn loss_csv_is_one_based() {
        assert_eq!(loss_csv(&[2.0, 1.5]), "epoch,mean_loss\n1,2\n2,1.5\n");
    }
}
