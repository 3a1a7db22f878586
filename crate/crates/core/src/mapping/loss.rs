use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::{argmax, head_forward, train::PrecomputedSample, Head, HeadCache, MappingParams};
use crate::catalog::AttrId;
use crate::error::{Error, Result};
use crate::par;

/// `exp(max_r <a_r, b> / tau)`. May overflow; see [`log_sigma`].
pub fn sigma(a: ArrayView2<f64>, b: ArrayView1<f64>, tau: f64) -> f64 {
    log_sigma(a, b, tau).exp()
}

/// `max_r <a_r, b> / tau`, or `-inf` for an empty row set.
pub fn log_sigma(a: ArrayView2<f64>, b: ArrayView1<f64>, tau: f64) -> f64 {
    argmax(a.rows().into_iter().map(|r| r.dot(&b)))
        .map(|(_, v)| v / tau)
        .unwrap_or(f64::NEG_INFINITY)
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Gradients with the same layout as [`MappingParams::heads`].
#[derive(Debug, Clone, PartialEq)]
pub struct MappingGrads {
    pub heads: Vec<Head>,
}

impl MappingGrads {
    pub fn is_finite(&self) -> bool {
        self.heads.iter().all(Head::is_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.heads
            .iter()
            .flat_map(|h| h.tensors().into_iter().flat_map(|t| t.iter().map(|v| v.abs())))
            .fold(0.0, f64::max)
    }
}

/// Scores of every batch attribute against every batch sample.
struct Forward {
    /// `(head index, cache per sample)` for each head in use.
    caches: Vec<(usize, Vec<HeadCache>)>,
    /// Batch attributes, ascending, with their embedding and cache slot.
    attrs: Vec<(AttrId, Array1<f64>, usize)>,
    /// `[sample][attr] -> (argmax row, score)`.
    scores: Vec<Vec<(usize, f64)>>,
    /// `[sample][attr] -> attribute is in the sample's text`.
    member: Vec<Vec<bool>>,
}

fn validate(params: &MappingParams, batch: &[PrecomputedSample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for s in batch {
        params.check_rows(s.region_embs.view())?;
        if s.region_embs.nrows() == 0 || s.attr_ids.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "sample {} needs at least one region and one attribute",
                s.id
            )));
        }
        if s.attr_embs.dim() != (s.attr_ids.len(), params.d) {
            return Err(Error::DimensionMismatch(format!(
                "sample {}: attribute embeddings {:?} for {} ids",
                s.id,
                s.attr_embs.dim(),
                s.attr_ids.len()
            )));
        }
        for &k in &s.attr_ids {
            params.head_for(k)?;
        }
    }
    Ok(())
}

fn forward(params: &MappingParams, batch: &[PrecomputedSample]) -> Result<Forward> {
    validate(params, batch)?;
    let mut emb: BTreeMap<AttrId, ArrayView1<f64>> = BTreeMap::new();
    for s in batch {
        for (k, row) in s.attr_ids.iter().zip(s.attr_embs.rows()) {
            emb.entry(*k).or_insert(row);
        }
    }
    let mut slots: BTreeMap<usize, usize> = BTreeMap::new();
    for k in emb.keys() {
        let h = params.head_of_attr[k.index()];
        let n = slots.len();
        slots.entry(h).or_insert(n);
    }
    let heads: Vec<usize> = {
        let mut v = vec![0; slots.len()];
        for (&h, &slot) in &slots {
            v[slot] = h;
        }
        v
    };
    let n = batch.len();
    let flat = par::map_range(heads.len() * n, |idx| {
        let (slot, j) = (idx / n, idx % n);
        head_forward(
            &params.heads[heads[slot]],
            batch[j].region_embs.view(),
            params.adapter_alpha,
            params.normalize,
        )
    });
    let mut it = flat.into_iter();
    let caches: Vec<(usize, Vec<HeadCache>)> = heads.iter().map(|&h| (h, it.by_ref().take(n).collect())).collect();

    let attrs: Vec<(AttrId, Array1<f64>, usize)> = emb
        .iter()
        .map(|(&k, v)| (k, v.to_owned(), slots[&params.head_of_attr[k.index()]]))
        .collect();
    let scores = (0..n)
        .map(|j| {
            attrs
                .iter()
                .map(|(_, h, slot)| {
                    let out = &caches[*slot].1[j].out;
                    let (r, v) = argmax(out.rows().into_iter().map(|row| row.dot(h))).expect("regions are nonempty");
                    (r, v / params.tau)
                })
                .collect()
        })
        .collect();
    let member = batch
        .iter()
        .map(|s| attrs.iter().map(|(k, _, _)| s.attr_ids.contains(k)).collect())
        .collect();
    Ok(Forward {
        caches,
        attrs,
        scores,
        member,
    })
}

impl Forward {
    /// Loss of sample `i` and, when `coef` is given, its contribution to
    /// `dL/ds` scaled by `scale`.
    fn sample_term(&self, i: usize, mut coef: Option<(&mut [Vec<f64>], f64)>) -> f64 {
        let mut total = 0.0;
        let mut logits = Vec::new();
        let mut who = Vec::new();
        for a in 0..self.attrs.len() {
            if !self.member[i][a] {
                continue;
            }
            logits.clear();
            who.clear();
            logits.push(self.scores[i][a].1);
            who.push(i);
            for j in 0..self.scores.len() {
                if !self.member[j][a] {
                    logits.push(self.scores[j][a].1);
                    who.push(j);
                }
            }
            if logits.len() == 1 {
                continue;
            }
            let lse = logsumexp(&logits);
            total += lse - logits[0];
            if let Some((c, scale)) = coef.as_mut() {
                for (x, &j) in logits.iter().zip(&who) {
                    c[j][a] += *scale * (x - lse).exp();
                }
                c[i][a] -= *scale;
            }
        }
        total
    }
}

/// Loss of sample `i` against the rest of `batch`.
pub fn sample_loss(params: &MappingParams, i: usize, batch: &[PrecomputedSample]) -> Result<f64> {
    if i >= batch.len() {
        return Err(Error::DimensionMismatch(format!(
            "sample index {i} outside batch of {}",
            batch.len()
        )));
    }
    Ok(forward(params, batch)?.sample_term(i, None))
}

fn attr_count(batch: &[PrecomputedSample]) -> f64 {
    batch.iter().map(|s| s.attr_ids.len()).sum::<usize>() as f64
}

/// Sum of sample losses divided by the total attribute count.
pub fn batch_loss(params: &MappingParams, batch: &[PrecomputedSample]) -> Result<f64> {
    let f = forward(params, batch)?;
    let sum: f64 = (0..batch.len()).map(|i| f.sample_term(i, None)).sum();
    Ok(sum / attr_count(batch))
}

/// Batch loss and its exact gradient with respect to every head parameter.
pub fn grad_batch(params: &MappingParams, batch: &[PrecomputedSample]) -> Result<(f64, MappingGrads)> {
    let f = forward(params, batch)?;
    let scale = 1.0 / attr_count(batch);
    let mut coef = vec![vec![0.0; f.attrs.len()]; batch.len()];
    let mut sum = 0.0;
    for i in 0..batch.len() {
        sum += f.sample_term(i, Some((&mut coef, scale)));
    }
    let loss = sum * scale;

    let per_head = par::map(&f.caches, |(h, caches)| {
        let head = &params.heads[*h];
        let mut g = Head::zeros(params.d);
        for (j, cache) in caches.iter().enumerate() {
            let mut dout = Array2::<f64>::zeros(cache.out.dim());
            let mut any = false;
            for (a, (_, emb, _)) in f.attrs.iter().enumerate() {
                let c = coef[j][a];
                if c == 0.0 || params.head_of_attr[f.attrs[a].0.index()] != *h {
                    continue;
                }
                any = true;
                let r = f.scores[j][a].0;
                dout.row_mut(r).scaled_add(c / params.tau, emb);
            }
            if any {
                backward(head, &mut g, batch[j].region_embs.view(), cache, dout, params);
            }
        }
        (*h, g)
    });
    let mut grads = MappingGrads {
        heads: vec![Head::zeros(params.d); params.heads.len()],
    };
    for (h, g) in per_head {
        grads.heads[h] = g;
    }
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFiniteGradient(format!("batch loss {loss}")));
    }
    Ok((loss, grads))
}

fn backward(
    head: &Head,
    g: &mut Head,
    e: ArrayView2<f64>,
    cache: &HeadCache,
    mut dy: Array2<f64>,
    params: &MappingParams,
) {
    if params.normalize {
        for ((mut d, y), &n) in dy.axis_iter_mut(Axis(0)).zip(cache.out.rows()).zip(cache.norms.iter()) {
            if n > 0.0 {
                let proj = y.dot(&d);
                d.scaled_add(-proj, &y);
                d /= n;
            } else {
                d.fill(0.0);
            }
        }
    }
    if params.adapter_alpha > 0.0 {
        dy *= 1.0 - params.adapter_alpha;
    }
    g.w2 += &dy.t().dot(&cache.act);
    g.b2 += &dy.sum_axis(Axis(0));
    let mut dpre = dy.dot(&head.w2);
    dpre.zip_mut_with(&cache.pre, |d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
    g.w1 += &dpre.t().dot(&e);
    g.b1 += &dpre.sum_axis(Axis(0));
}
