use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Symmetric InfoNCE over matched rows of `image_embs` and `text_embs`.
/// Rows sharing a group id are dropped from each other's negative sets.
pub fn bidir_contrastive_loss(
    image_embs: ArrayView2<f64>,
    text_embs: ArrayView2<f64>,
    tau: f64,
    groups: Option<&[usize]>,
) -> Result<f64> {
    Ok(bidir_contrastive_grad(image_embs, text_embs, tau, groups)?.0)
}

/// Loss and its gradient with respect to `image_embs` (the text side is
/// frozen).
pub fn bidir_contrastive_grad(
    image_embs: ArrayView2<f64>,
    text_embs: ArrayView2<f64>,
    tau: f64,
    groups: Option<&[usize]>,
) -> Result<(f64, Array2<f64>)> {
    let n = image_embs.nrows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if text_embs.dim() != image_embs.dim() {
        return Err(Error::DimensionMismatch(format!(
            "image embeddings {:?} vs text embeddings {:?}",
            image_embs.dim(),
            text_embs.dim()
        )));
    }
    if let Some(g) = groups {
        if g.len() != n {
            return Err(Error::DimensionMismatch(format!("{} group ids for {n} rows", g.len())));
        }
    }
    let allowed = |i: usize, j: usize| i == j || groups.is_none_or(|g| g[i] != g[j]);
    let sim = image_embs.dot(&text_embs.t()) / tau;

    // dL/dsim, accumulated from both directions
    let mut ds = Array2::<f64>::zeros((n, n));
    let mut loss = 0.0;
    let scale = 0.5 / n as f64;
    for i in 0..n {
        // image i against texts
        let idx: Vec<usize> = (0..n).filter(|&j| allowed(i, j)).collect();
        let m = idx.iter().map(|&j| sim[[i, j]]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = idx.iter().map(|&j| (sim[[i, j]] - m).exp()).sum();
        loss += scale * (m + z.ln() - sim[[i, i]]);
        for &j in &idx {
            ds[[i, j]] += scale * (sim[[i, j]] - m).exp() / z;
        }
        ds[[i, i]] -= scale;

        // text i against images
        let m = idx.iter().map(|&j| sim[[j, i]]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = idx.iter().map(|&j| (sim[[j, i]] - m).exp()).sum();
        loss += scale * (m + z.ln() - sim[[i, i]]);
        for &j in &idx {
            ds[[j, i]] += scale * (sim[[j, i]] - m).exp() / z;
        }
        ds[[i, i]] -= scale;
    }
    let grad = ds.dot(&text_embs) / tau;
    Ok((loss, grad))
}
