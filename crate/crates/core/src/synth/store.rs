//! Dataset directories: `manifest.jsonl`, `catalog.json`, `gen.json` and one
//! binary PPM per sample under `images/`.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generate::{Dataset, GenConfig, Sample};
use crate::catalog::{AttrId, AttributeCatalog};
use crate::error::{Error, Result};
use crate::fsio;
use crate::image::RgbImage;
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: String,
    pub text: String,
    pub sentences: Vec<String>,
    pub gt_pairs: Vec<[u8; 2]>,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRecord {
    pub config: GenConfig,
    pub realized_s: f64,
    pub samples: usize,
    pub total_pairs: usize,
    /// Hash chaining this dataset to the run configuration that made it.
    pub stage_hash: String,
}

fn image_name(i: usize) -> String {
    format!("{i:06}.ppm")
}

pub fn save_dataset(dir: &Path, ds: &Dataset, stage_hash: &str) -> Result<()> {
    fsio::write_dir_atomic(dir, |tmp| {
        let images = tmp.join("images");
        let indices: Vec<usize> = (0..ds.samples.len()).collect();
        par::try_map(&indices, |&i| {
            fsio::write_atomic(&images.join(image_name(i)), &ds.samples[i].image.to_ppm())
        })?;
        let mut manifest = String::new();
        for (i, s) in ds.samples.iter().enumerate() {
            let rec = ManifestRecord {
                image: format!("images/{}", image_name(i)),
                text: s.text.clone(),
                sentences: s.sentences.clone(),
                gt_pairs: s.gt_pairs.iter().map(|&(r, a)| [r, a.0]).collect(),
                m: s.complexity_m,
            };
            manifest.push_str(&serde_json::to_string(&rec)?);
            manifest.push('\n');
        }
        fsio::write_atomic(&tmp.join("manifest.jsonl"), manifest.as_bytes())?;
        fsio::write_atomic(
            &tmp.join("catalog.json"),
            serde_json::to_string_pretty(&ds.catalog)?.as_bytes(),
        )?;
        let gen = GenRecord {
            config: ds.gen_config.clone(),
            realized_s: ds.realized_s,
            samples: ds.samples.len(),
            total_pairs: ds.total_pairs(),
            stage_hash: stage_hash.to_string(),
        };
        fsio::write_atomic(&tmp.join("gen.json"), serde_json::to_string_pretty(&gen)?.as_bytes())
    })
}

pub fn load_gen_record(dir: &Path) -> Result<GenRecord> {
    Ok(serde_json::from_str(&fsio::read_string(&dir.join("gen.json"))?)?)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let gen = load_gen_record(dir)?;
    let catalog: AttributeCatalog = serde_json::from_str(&fsio::read_string(&dir.join("catalog.json"))?)?;
    let manifest = fsio::read_string(&dir.join("manifest.jsonl"))?;
    let records: Vec<ManifestRecord> = manifest
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()?;
    let samples = par::try_map(&records, |rec| {
        let path = dir.join(&rec.image);
        let image = RgbImage::from_ppm(&fsio::read(&path)?)?;
        let gt_pairs: BTreeSet<(u8, AttrId)> = rec.gt_pairs.iter().map(|&[r, a]| (r, AttrId(a))).collect();
        if gt_pairs.len() != rec.m {
            return Err(Error::InvalidGroundTruth(format!(
                "{}: m = {} but {} pairs",
                rec.image,
                rec.m,
                gt_pairs.len()
            )));
        }
        Ok(Sample {
            image,
            text: rec.text.clone(),
            sentences: rec.sentences.clone(),
            gt_pairs,
            complexity_m: rec.m,
        })
    })?;
    Ok(Dataset {
        samples,
        catalog,
        gen_config: gen.config,
        realized_s: gen.realized_s,
    })
}
