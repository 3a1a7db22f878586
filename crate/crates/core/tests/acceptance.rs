//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use ndarray::{array, Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use regalign::assignment::{expand_all, AssignConfig};
use regalign::eval::{self, mapping_quality, precision_at_k, r_precision};
use regalign::mapping::{
    batch_loss, grad_batch, precompute, sample_loss, Head, MappingConfig, MappingParams, PrecomputedSample,
};
use regalign::pipeline::{sweep_complexity, EvalRecord, Run, RunConfig};
use regalign::synth::{generate_dataset, GenConfig};
use regalign::vlm::VlmVariant;
use regalign::{par, rng, AttrId, AttributeCatalog, Encoder};

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: String) -> Outcome {
    Outcome { ok, detail }
}

fn gen_invariants() -> Outcome {
    let t = Instant::now();
    let catalog = AttributeCatalog::standard();
    let ds = match generate_dataset(&GenConfig::new(29.4, 10_000, 7), &catalog) {
        Ok(ds) => ds,
        Err(e) => return outcome(false, format!("generation failed: {e}")),
    };
    let secs = t.elapsed().as_secs_f64();
    let s_ok = (ds.realized_s - 29.4).abs() <= 0.5;
    let mut text_ok = true;
    let mut counts_ok = true;
    for sample in &ds.samples {
        let in_regions: BTreeSet<AttrId> = sample.gt_pairs.iter().map(|&(_, a)| a).collect();
        for sentence in &sample.sentences {
            for a in catalog.attributes_in(sentence) {
                text_ok &= in_regions.contains(&a);
            }
        }
        for r in 0..9u8 {
            counts_ok &= [0, 2, 3, 4].contains(&sample.region_attributes(r).len());
        }
    }
    let total = ds.total_pairs();
    let budget_ok = (10_000..10_036).contains(&total);
    outcome(
        s_ok && text_ok && counts_ok && budget_ok && secs < 10.0,
        format!(
            "s = {:.3}, pairs = {total}, text attrs grounded = {text_ok}, region counts ok = {counts_ok}, {secs:.1} s",
            ds.realized_s
        ),
    )
}

fn precomputed(id: usize, regions: Array2<f64>, attrs: &[(u8, Array1<f64>)]) -> PrecomputedSample {
    let d = regions.ncols();
    let mut attr_embs = Array2::zeros((attrs.len(), d));
    for (i, (_, e)) in attrs.iter().enumerate() {
        attr_embs.row_mut(i).assign(e);
    }
    PrecomputedSample {
        id,
        region_embs: regions,
        attr_ids: attrs.iter().map(|(k, _)| AttrId(*k)).collect(),
        attr_embs,
    }
}

fn loss_identities() -> Outcome {
    // identity heads: the adapter passes embeddings through unchanged
    let p = MappingParams {
        heads: vec![Head::zeros(2)],
        head_of_attr: vec![0; 2],
        adapter_alpha: 1.0,
        tau: 1.0,
        normalize: true,
        d: 2,
        encoder_hash: 0,
    };
    let batch = vec![
        precomputed(0, array![[1.0, 0.0]], &[(0, array![1.0, 0.0])]),
        precomputed(1, array![[0.0, 1.0]], &[(1, array![0.0, 1.0])]),
    ];
    let single = sample_loss(&p, 0, &batch[..1]).unwrap_or(f64::NAN);
    let pair = sample_loss(&p, 0, &batch).unwrap_or(f64::NAN);
    let e = std::f64::consts::E;
    let scalar = -(e / (e + 1.0)).ln();
    let ok = single == 0.0 && (pair - scalar).abs() <= 1e-6 && (pair * 1e5).round() == 31326.0;
    outcome(
        ok,
        format!("|B|=1 loss = {single}, |B|=2 loss = {pair:.8} (scalar -log(e/(e+1)) = {scalar:.8}, 5 d.p. {pair:.5})"),
    )
}

fn random_params(r: &mut rng::Stream, d: usize, num_attrs: usize) -> MappingParams {
    let cfg = MappingConfig {
        p: r.random_range(1..=num_attrs),
        adapter_alpha: if r.random_bool(0.5) {
            0.0
        } else {
            r.random_range(0.1..0.9)
        },
        tau: r.random_range(0.2..1.5),
        normalize: r.random_bool(0.8),
    };
    let mut p = MappingParams::init(&cfg, num_attrs, d, r.random(), 0).expect("valid config");
    for h in &mut p.heads {
        h.b1.mapv_inplace(|_| r.random_range(-0.3..0.3));
        h.b2.mapv_inplace(|_| r.random_range(-0.3..0.3));
    }
    p
}

fn random_batch(r: &mut rng::Stream, d: usize, n: usize, num_attrs: u8) -> Vec<PrecomputedSample> {
    let table: Vec<Array1<f64>> = (0..num_attrs)
        .map(|_| Array1::from_shape_fn(d, |_| r.random_range(-1.0..1.0)))
        .collect();
    (0..n)
        .map(|id| {
            let rows = r.random_range(1..=3);
            let regions = Array2::from_shape_fn((rows, d), |_| r.random_range(-1.0..1.0));
            let mut ks: Vec<u8> = (0..num_attrs).filter(|_| r.random_bool(0.5)).collect();
            if ks.is_empty() {
                ks.push(r.random_range(0..num_attrs));
            }
            let attrs: Vec<_> = ks.iter().map(|&k| (k, table[k as usize].clone())).collect();
            precomputed(id, regions, &attrs)
        })
        .collect()
}

fn gradient_check() -> Outcome {
    let t = Instant::now();
    let mut r = rng::stream(2024, 0);
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for _ in 0..50 {
        let d = r.random_range(2..=8);
        let n = r.random_range(1..=4);
        let p = random_params(&mut r, d, 4);
        let b = random_batch(&mut r, d, n, 4);
        let g = match grad_batch(&p, &b) {
            Ok((_, g)) => g,
            Err(e) => return outcome(false, format!("grad_batch failed: {e}")),
        };
        for head in 0..p.heads.len() {
            for ti in 0..4 {
                for i in 0..g.heads[head].tensors()[ti].len() {
                    let mut plus = p.clone();
                    plus.heads[head].tensors_mut()[ti][i] += h;
                    let mut minus = p.clone();
                    minus.heads[head].tensors_mut()[ti][i] -= h;
                    let fd = (batch_loss(&plus, &b).unwrap() - batch_loss(&minus, &b).unwrap()) / (2.0 * h);
                    let an = g.heads[head].tensors()[ti][i];
                    worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-6));
                }
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 30.0,
        format!("max relative error {worst:.2e}, {secs:.1} s"),
    )
}

fn metric_oracles() -> Outcome {
    let mut r = rng::stream(99, 0);
    let mut failures = 0;
    for _ in 0..100 {
        let n = r.random_range(1..=30);
        let mut ranking: Vec<usize> = (0..n).collect();
        ranking.shuffle(&mut r);
        let gt: BTreeSet<usize> = (0..n).filter(|_| r.random_bool(0.4)).collect();
        let gt = if gt.is_empty() {
            BTreeSet::from([ranking[n - 1]])
        } else {
            gt
        };
        let k = r.random_range(1..=n);

        // oracle: sort gt items by rank position and count those inside the cut
        let mut positions: Vec<usize> = gt
            .iter()
            .map(|g| ranking.iter().position(|x| x == g).unwrap())
            .collect();
        positions.sort_unstable();
        let oracle = |k: usize| positions.iter().take_while(|&&p| p < k).count() as f64 / k as f64;
        let pk = precision_at_k(&ranking, &gt, k).unwrap();
        let rp = r_precision(&ranking, &gt).unwrap();
        if pk != oracle(k) || rp != oracle(gt.len()) || rp != precision_at_k(&ranking, &gt, gt.len()).unwrap() {
            failures += 1;
        }

        let triple = |r: &mut rng::Stream| {
            (
                r.random_range(0..4usize),
                r.random_range(0..3u8),
                AttrId(r.random_range(0..5u8)),
            )
        };
        let generated: Vec<_> = (0..r.random_range(0..25)).map(|_| triple(&mut r)).collect();
        let truth: Vec<_> = (0..r.random_range(0..25)).map(|_| triple(&mut r)).collect();
        let mut gen_u = generated.clone();
        gen_u.sort();
        gen_u.dedup();
        let mut gt_u = truth.clone();
        gt_u.sort();
        gt_u.dedup();
        let correct = gen_u.iter().filter(|g| gt_u.iter().any(|t| t == *g)).count() as f64;
        let p = if gen_u.is_empty() {
            0.0
        } else {
            correct / gen_u.len() as f64
        };
        let rc = if gt_u.is_empty() {
            0.0
        } else {
            correct / gt_u.len() as f64
        };
        let f1 = if p + rc > 0.0 { 2.0 * p * rc / (p + rc) } else { 0.0 };
        let q = mapping_quality(&generated.into_iter().collect(), &truth.into_iter().collect());
        if q.precision != p || q.recall != rc || q.f1 != f1 {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("{failures} disagreements over 100 instances"))
}

fn epsilon_monotonicity(run: &Run) -> Outcome {
    let (ds, params) = match (run.load_dataset(), run.load_mapping()) {
        (Ok(ds), Ok(p)) => (ds, p),
        _ => return outcome(false, "pipeline artifacts unavailable".into()),
    };
    let encoder = Encoder::new(run.cfg.encoder).expect("valid encoder");
    let pre = precompute(&ds, &encoder).expect("precompute");
    let gt = eval::gt_set(&ds);
    let mut prev: Option<BTreeMap<(usize, AttrId), BTreeSet<u8>>> = None;
    let mut nested = true;
    let mut stats = Vec::new();
    for eps in [0.0, 0.1, 0.2, 0.5] {
        let pairs = expand_all(&ds, &pre, &params, &AssignConfig::attr_to_regions(eps)).expect("assign");
        let mut by_attr: BTreeMap<(usize, AttrId), BTreeSet<u8>> = BTreeMap::new();
        for p in &pairs {
            by_attr.entry((p.sample, p.attr)).or_default().insert(p.region);
        }
        if let Some(prev) = &prev {
            nested &= prev
                .iter()
                .all(|(k, regions)| by_attr.get(k).is_some_and(|now| regions.is_subset(now)));
        }
        let q = mapping_quality(&eval::pair_set(&pairs), &gt);
        stats.push((eps, q.precision, q.recall));
        prev = Some(by_attr);
    }
    let recall_ok = stats.windows(2).all(|w| w[1].2 >= w[0].2);
    let precision_ok = stats[3].1 <= stats[0].1;
    let detail: Vec<String> = stats
        .iter()
        .map(|(e, p, r)| format!("eps {e}: P {p:.3} R {r:.3}"))
        .collect();
    outcome(
        nested && recall_ok && precision_ok,
        format!("nested = {nested}; {}", detail.join("; ")),
    )
}

fn mapping_f1(rec: &EvalRecord, v: VlmVariant) -> Option<f64> {
    rec.reports.iter().find(|r| r.variant == v)?.mapping.map(|q| q.f1)
}

fn table5_ordering(rec: &EvalRecord, secs: f64) -> Outcome {
    let (Some(villa), Some(zs), Some(random)) = (
        mapping_f1(rec, VlmVariant::Villa),
        mapping_f1(rec, VlmVariant::ZsMap),
        rec.random_mapping.map(|q| q.f1),
    ) else {
        return outcome(false, "mapping metrics missing".into());
    };
    outcome(
        villa >= zs + 0.10 && zs >= random && secs < 600.0,
        format!(
            "F1 villa {:.1}, zero-shot {:.1}, random {:.1}; pipeline {secs:.0} s",
            100.0 * villa,
            100.0 * zs,
            100.0 * random
        ),
    )
}

fn table3_ordering(rec: &EvalRecord) -> Outcome {
    let get = |v| rec.reports.iter().find(|r| r.variant == v).map(|r| &r.retrieval);
    let (Some(villa), Some(ft)) = (get(VlmVariant::Villa), get(VlmVariant::FtImg)) else {
        return outcome(false, "retrieval metrics missing".into());
    };
    outcome(
        villa.t2r_r_precision >= ft.t2r_r_precision + 0.05 && villa.r2t_r_precision >= ft.r2t_r_precision,
        format!(
            "t2r R-Prec villa {:.1} vs ft_img {:.1}; r2t villa {:.1} vs ft_img {:.1}",
            100.0 * villa.t2r_r_precision,
            100.0 * ft.t2r_r_precision,
            100.0 * villa.r2t_r_precision,
            100.0 * ft.r2t_r_precision
        ),
    )
}

fn complexity_trend() -> Outcome {
    let t = Instant::now();
    let rows = match sweep_complexity(&RunConfig::default(), &[5.0, 29.4], VlmVariant::FtImg, 1) {
        Ok(rows) => rows,
        Err(e) => return outcome(false, format!("sweep failed: {e}")),
    };
    let secs = t.elapsed().as_secs_f64();
    let (lo, hi) = (rows[0], rows[1]);
    let t2r_drop = lo.t2r_rprec - hi.t2r_rprec;
    let r2t_drop = lo.r2t_rprec - hi.r2t_rprec;
    outcome(
        t2r_drop >= 0.10 && r2t_drop >= 0.05 && secs < 600.0,
        format!(
            "t2r {:.1} -> {:.1} (drop {:.1}), r2t {:.1} -> {:.1} (drop {:.1}), {secs:.0} s",
            100.0 * lo.t2r_rprec,
            100.0 * hi.t2r_rprec,
            100.0 * t2r_drop,
            100.0 * lo.r2t_rprec,
            100.0 * hi.r2t_rprec,
            100.0 * r2t_drop
        ),
    )
}

fn files_under(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable run dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(a: &Path, b: &Path) -> Outcome {
    let fa = files_under(a);
    let fb = files_under(b);
    if fa != fb {
        return outcome(false, "run directories list different files".into());
    }
    let differing: Vec<String> = fa
        .iter()
        .filter(|f| std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    let key = [
        "dataset/manifest.jsonl",
        "mapping/params.ckpt",
        "vlm/villa.ckpt",
        "metrics.csv",
    ];
    let covered = key.iter().all(|k| fa.iter().any(|f| f == Path::new(k)));
    outcome(
        differing.is_empty() && covered,
        format!("{} files compared (4 vs 1 threads), differing: {differing:?}", fa.len()),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n, name, o: Outcome| {
        println!("{} {n}. {name}: {}", if o.ok { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };

    report(1, "generator invariants", gen_invariants());
    report(2, "loss identities", loss_identities());
    report(3, "gradient vs finite differences", gradient_check());
    report(4, "metric oracles", metric_oracles());

    let dir = tempfile::tempdir().expect("temp dir");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let t = Instant::now();
    let run_a = Run::new(&a, RunConfig::default()).expect("default config is valid");
    let first = par::with_threads(4, || run_a.run_all(false));
    let secs = t.elapsed().as_secs_f64();
    let metrics = first.and_then(|_| run_a.load_metrics());
    if let Err(e) = &metrics {
        println!("pipeline failed: {e}");
    }

    report(5, "epsilon monotonicity", epsilon_monotonicity(&run_a));
    report(
        6,
        "mapping F1 ordering",
        metrics
            .as_ref()
            .map_or_else(|e| outcome(false, e.to_string()), |m| table5_ordering(m, secs)),
    );
    report(
        7,
        "retrieval ordering",
        metrics
            .as_ref()
            .map_or_else(|e| outcome(false, e.to_string()), table3_ordering),
    );
    report(8, "complexity trend", complexity_trend());

    let run_b = Run::new(&b, RunConfig::default()).expect("default config is valid");
    let second = par::with_threads(1, || run_b.run_all(false));
    report(
        9,
        "determinism",
        match second {
            Ok(_) => determinism(&a, &b),
            Err(e) => outcome(false, format!("second run failed: {e}")),
        },
    );

    let failed = results.iter().filter(|(_, _, o)| !o.ok).count();
    println!("{} of {} criteria pass", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
