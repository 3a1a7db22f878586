//! Frozen deterministic encoders.
//!
//! Images are summarized by a small handcrafted feature vector which a fixed
//! seeded orthonormal matrix lifts to `d` dimensions. Text is a bag of
//! hashed token vectors. Every output is L2-normalized and no encoder holds
//! mutable state.

use ndarray::{Array1, Array2, ArrayView1};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::catalog::{tokenize, AttrId, AttributeCatalog};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::rng;
use crate::synth::{IMAGE_SIDE, REGION_SIDE};

/// Length of the raw image feature vector for feature version 1.
pub const FEATURE_DIM: usize = 26;
pub const HUE_BINS: usize = 8;
const INK_THRESHOLD: f64 = 0.1;
const SUPPORTED_FEATURE_VERSIONS: [u32; 1] = [1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub token_seed: u64,
    pub feature_version: u32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d: 64,
            token_seed: 0x5eed_7e47,
            feature_version: 1,
        }
    }
}

impl EncoderConfig {
    /// Stable identifier stored in every artifact that consumed this config.
    pub fn hash(&self) -> u64 {
        rng::derive_seed(
            self.token_seed,
            &format!("encoder;d={};feature_version={}", self.d, self.feature_version),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Array1<f64>,
    pub normalized: bool,
}

impl Embedding {
    pub fn normalized(values: Array1<f64>) -> Self {
        Embedding {
            values: l2_normalize(values),
            normalized: true,
        }
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.values.view()
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        let dot = self.values.dot(&other.values);
        dot / (self.values.dot(&self.values).sqrt() * other.values.dot(&other.values).sqrt())
    }
}

pub fn l2_normalize(mut v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v /= n;
    }
    v
}

/// Image and text encoders sharing one config.
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    /// `d x FEATURE_DIM`, orthonormal columns (or rows when `d` is smaller).
    projection: Array2<f64>,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        if cfg.d < 8 {
            return Err(Error::InvalidConfig(format!("encoder d = {} < 8", cfg.d)));
        }
        if !SUPPORTED_FEATURE_VERSIONS.contains(&cfg.feature_version) {
            return Err(Error::InvalidConfig(format!(
                "unsupported feature version {}",
                cfg.feature_version
            )));
        }
        let seed = rng::derive_seed(cfg.token_seed, &format!("projection-v{}", cfg.feature_version));
        Ok(Encoder {
            projection: orthonormal_projection(cfg.d, FEATURE_DIM, seed),
            cfg,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn hash(&self) -> u64 {
        self.cfg.hash()
    }

    pub fn d(&self) -> usize {
        self.cfg.d
    }

    /// Embeds one 28x28 region.
    pub fn encode_region(&self, pixels: &RgbImage) -> Result<Embedding> {
        check_side(pixels, REGION_SIDE)?;
        Ok(self.embed_features(&image_features(pixels)))
    }

    /// Embeds a whole 84x84 image with the same featurization.
    pub fn encode_image(&self, image: &RgbImage) -> Result<Embedding> {
        check_side(image, IMAGE_SIDE)?;
        Ok(self.embed_features(&image_features(image)))
    }

    fn embed_features(&self, f: &Array1<f64>) -> Embedding {
        Embedding::normalized(self.projection.dot(f))
    }

    /// Unit vector for one token, seeded by the token text and `token_seed`.
    pub fn token_vector(&self, token: &str) -> Array1<f64> {
        let seed = rng::derive_seed(self.cfg.token_seed, token);
        let mut rng = rng::stream(seed, 0);
        let v: Array1<f64> = (0..self.cfg.d).map(|_| StandardNormal.sample(&mut rng)).collect();
        l2_normalize(v)
    }

    /// Normalized mean of the sentence's token vectors.
    pub fn encode_sentence(&self, sentence: &str) -> Result<Embedding> {
        let tokens = tokenize(sentence);
        if tokens.is_empty() {
            return Err(Error::EmptyText);
        }
        let mut acc = Array1::<f64>::zeros(self.cfg.d);
        for t in &tokens {
            acc += &self.token_vector(t);
        }
        acc /= tokens.len() as f64;
        Ok(Embedding::normalized(acc))
    }

    /// Normalized mean over the attribute's category prompts.
    pub fn encode_attribute(&self, attr: AttrId, catalog: &AttributeCatalog) -> Result<Embedding> {
        self.encode_description(&catalog.prompts(attr)?)
    }

    /// Normalized mean of the sentence embeddings.
    pub fn encode_description<S: AsRef<str>>(&self, sentences: &[S]) -> Result<Embedding> {
        if sentences.is_empty() {
            return Err(Error::EmptyText);
        }
        let mut acc = Array1::<f64>::zeros(self.cfg.d);
        for s in sentences {
            acc += &self.encode_sentence(s.as_ref())?.values;
        }
        acc /= sentences.len() as f64;
        Ok(Embedding::normalized(acc))
    }

    /// `|catalog| x d` table of attribute embeddings, row = attribute id.
    pub fn attribute_table(&self, catalog: &AttributeCatalog) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((catalog.len(), self.cfg.d));
        for a in &catalog.attributes {
            out.row_mut(a.id.index())
                .assign(&self.encode_attribute(a.id, catalog)?.values);
        }
        Ok(out)
    }
}

fn check_side(img: &RgbImage, side: usize) -> Result<()> {
    if img.width() != side || img.height() != side {
        return Err(Error::ShapeMismatch {
            expected: format!("3x{side}x{side}"),
            found: format!("3x{}x{}", img.height(), img.width()),
        });
    }
    Ok(())
}

/// Gaussian matrix orthonormalized by modified Gram-Schmidt along its
/// longer side.
fn orthonormal_projection(d: usize, f: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng::stream(seed, 0);
    let mut m = Array2::<f64>::zeros((d, f));
    m.mapv_inplace(|_| StandardNormal.sample(&mut rng));
    let tall = d >= f;
    let (count, _) = if tall { (f, d) } else { (d, f) };
    for i in 0..count {
        for j in 0..i {
            let (vi, vj) = if tall {
                (m.column(i).to_owned(), m.column(j).to_owned())
            } else {
                (m.row(i).to_owned(), m.row(j).to_owned())
            };
            let proj = vi.dot(&vj);
            let updated = vi - &(vj * proj);
            if tall {
                m.column_mut(i).assign(&updated);
            } else {
                m.row_mut(i).assign(&updated);
            }
        }
        let v = if tall {
            m.column(i).to_owned()
        } else {
            m.row(i).to_owned()
        };
        let v = l2_normalize(v);
        if tall {
            m.column_mut(i).assign(&v);
        } else {
            m.row_mut(i).assign(&v);
        }
    }
    m
}

/// Raw feature vector (version 1):
///
/// | slots  | feature                                               |
/// |--------|-------------------------------------------------------|
/// | 0..3   | per-channel mean over inked pixels                    |
/// | 3..6   | per-channel variance over inked pixels                |
/// | 6..15  | 3x3 block mean of ink (max channel)                   |
/// | 15..23 | 8-bin hue histogram over chromatic pixels             |
/// | 23     | edge density                                          |
/// | 24     | fill ratio                                            |
/// | 25     | constant                                              |
///
/// The spatial features (block grid, edge density, fill ratio) are computed
/// per 28x28 window and averaged over the windows that contain ink, so a
/// canvas holding a single digit has exactly the features of that region.
/// Inputs whose sides are not multiples of 28 form a single window.
pub fn image_features(img: &RgbImage) -> Array1<f64> {
    let (w, h) = (img.width(), img.height());
    let mut f = Array1::<f64>::zeros(FEATURE_DIM);

    let ink: Vec<f64> = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let p = img.get(x, y);
            p[0].max(p[1]).max(p[2]) as f64 / 255.0
        })
        .collect();

    // color statistics over inked pixels only
    let inked: Vec<usize> = (0..w * h).filter(|&i| ink[i] > INK_THRESHOLD).collect();
    if !inked.is_empty() {
        let m = inked.len() as f64;
        for c in 0..3 {
            let ch = img.channel(c);
            let mean = inked.iter().map(|&i| ch[i] as f64 / 255.0).sum::<f64>() / m;
            let var = inked
                .iter()
                .map(|&i| (ch[i] as f64 / 255.0 - mean).powi(2))
                .sum::<f64>()
                / m;
            f[c] = mean;
            f[3 + c] = var;
        }
    }

    let mut hist = [0.0f64; HUE_BINS];
    let mut chromatic = 0usize;
    for y in 0..h {
        for x in 0..w {
            if let Some(bin) = hue_bin(img.get(x, y)) {
                hist[bin] += 1.0;
                chromatic += 1;
            }
        }
    }
    if chromatic > 0 {
        for (b, v) in hist.iter().enumerate() {
            f[15 + b] = v / chromatic as f64;
        }
    }

    let (ww, wh) = if w % REGION_SIDE == 0 && h % REGION_SIDE == 0 {
        (REGION_SIDE, REGION_SIDE)
    } else {
        (w, h)
    };
    let mut windows = 0usize;
    let mut spatial = [0.0f64; 11];
    for wy in (0..h).step_by(wh) {
        for wx in (0..w).step_by(ww) {
            let at = |x: usize, y: usize| ink[(wy + y) * w + wx + x];
            let mut filled = 0usize;
            let mut edges = 0usize;
            for y in 0..wh {
                for x in 0..ww {
                    let v = at(x, y);
                    let dx = if x + 1 < ww { (at(x + 1, y) - v).abs() } else { 0.0 };
                    let dy = if y + 1 < wh { (at(x, y + 1) - v).abs() } else { 0.0 };
                    if dx + dy > 0.5 {
                        edges += 1;
                    }
                    if v > INK_THRESHOLD {
                        filled += 1;
                    }
                }
            }
            if filled == 0 {
                continue;
            }
            windows += 1;
            for by in 0..3 {
                for bx in 0..3 {
                    let (x0, x1) = (bx * ww / 3, (bx + 1) * ww / 3);
                    let (y0, y1) = (by * wh / 3, (by + 1) * wh / 3);
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            s += at(x, y);
                        }
                    }
                    spatial[by * 3 + bx] += s / ((x1 - x0) * (y1 - y0)) as f64;
                }
            }
            let n = (ww * wh) as f64;
            spatial[9] += edges as f64 / n;
            spatial[10] += filled as f64 / n;
        }
    }
    if windows > 0 {
        for (i, v) in spatial.iter().enumerate() {
            f[6 + i + if i >= 9 { 8 } else { 0 }] = v / windows as f64;
        }
    }
    f[25] = 0.5;
    f
}

/// Hue bin of a sufficiently bright, saturated pixel.
fn hue_bin(p: [u8; 3]) -> Option<usize> {
    let (r, g, b) = (p[0] as f64, p[1] as f64, p[2] as f64);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    if max < 64.0 || (max - min) < 0.25 * max {
        return None;
    }
    let delta = max - min;
    let hue = if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    Some(((hue / (360.0 / HUE_BINS as f64)) as usize).min(HUE_BINS - 1))
}
