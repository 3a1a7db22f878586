use super::{EvalRecord, RunConfig, SweepRecord};

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x))
}

/// Plain-text side-by-side table of variants, then the sweep if present.
/// Values are percentages.
pub fn render_report(cfg: &RunConfig, metrics: &EvalRecord, sweep: Option<&SweepRecord>) -> String {
    let mut out = format!(
        "config {}\nc = {}  b = {}  test images = {}\n\n",
        &cfg.hash()[..16],
        cfg.gen.c,
        cfg.gen.b,
        metrics.test_images
    );
    let header = [
        "variant",
        "t2r R-Prec",
        "t2r P@25",
        "t2r P@100",
        "r2t R-Prec",
        "map P",
        "map R",
        "map F1",
    ];
    let mut rows: Vec<[String; 8]> = metrics
        .reports
        .iter()
        .map(|r| {
            let m = r.mapping;
            [
                r.variant.to_string(),
                cell(Some(r.retrieval.t2r_r_precision)),
                cell(r.retrieval.t2r_p_at_25),
                cell(r.retrieval.t2r_p_at_100),
                cell(Some(r.retrieval.r2t_r_precision)),
                cell(m.map(|q| q.precision)),
                cell(m.map(|q| q.recall)),
                cell(m.map(|q| q.f1)),
            ]
        })
        .collect();
    if let Some(q) = metrics.random_mapping {
        rows.push([
            "random".into(),
            cell(None),
            cell(None),
            cell(None),
            cell(None),
            cell(Some(q.precision)),
            cell(Some(q.recall)),
            cell(Some(q.f1)),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            rows.iter()
                .map(|r| r[i].len())
                .chain([header[i].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[&str]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    out.push_str(&line(&header));
    for r in &rows {
        out.push_str(&line(&r.iter().map(String::as_str).collect::<Vec<_>>()));
    }
    if let Some(s) = sweep {
        out.push_str(&format!("\ncomplexity sweep ({}, {} seed(s))\n", s.variant, s.seeds));
        out.push_str("    c  t2r R-Prec  r2t R-Prec\n");
        for r in &s.rows {
            out.push_str(&format!(
                "{:>5}  {:>10}  {:>10}\n",
                r.c,
                cell(Some(r.t2r_rprec)),
                cell(Some(r.r2t_rprec))
            ));
        }
    }
    out
}
