//! Flat CSV views of a [`Report`]. Every report yields the same set of
//! tables; families a report does not produce are written header-only.

use super::json::format_float;
use super::{Report, Results};
use crate::metrics::{DiversityReport, ProvenanceHistogram};
use crate::stats::{MetricSummary, TestResult};

pub struct Table {
    pub name: &'static str,
    pub header: &'static [&'static str],
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &'static str, header: &'static [&'static str]) -> Self {
        Table {
            name,
            header,
            rows: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

const SUMMARY_HEADER: &[&str] = &["group", "metric", "mean", "standard_error", "n"];
const TEST_HEADER: &[&str] = &[
    "metric",
    "statistic",
    "p_value",
    "dof",
    "two_sided",
    "degenerate",
    "note",
];
const PROVENANCE_HEADER: &[&str] = &[
    "group",
    "rank1",
    "rank2_10",
    "rank11_199",
    "rank200_plus",
    "total",
];
const LAYER_HEADER: &[&str] = &[
    "layer",
    "cosine_mean",
    "cosine_se",
    "l2_mean",
    "l2_se",
    "pr_a",
    "pr_b",
    "delta_dim",
    "cumulative_delta_dim",
];
const TEMPERATURE_HEADER: &[&str] = &["quantity", "value"];
const SWEEP_HEADER: &[&str] = &["alpha", "ttr", "bigram_rep", "trigram_rep"];

fn f(x: f64) -> String {
    if x.is_finite() {
        format_float(x)
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(f).unwrap_or_default()
}

fn summary(t: &mut Table, group: &str, metric: &str, s: &MetricSummary) {
    t.rows.push(vec![
        group.to_string(),
        metric.to_string(),
        f(s.mean),
        f(s.standard_error),
        s.n.to_string(),
    ]);
}

fn diversity(t: &mut Table, group: &str, d: &DiversityReport) {
    summary(t, group, "ttr", &d.ttr);
    summary(t, group, "bigram_rep", &d.bigram_rep);
    summary(t, group, "trigram_rep", &d.trigram_rep);
}

fn test(t: &mut Table, metric: &str, r: Option<&TestResult>, note: Option<&str>) {
    let note = note.unwrap_or_default().to_string();
    t.rows.push(match r {
        Some(r) => vec![
            metric.to_string(),
            f(r.statistic),
            f(r.p_value),
            opt(r.dof),
            r.two_sided.to_string(),
            r.degenerate.to_string(),
            note,
        ],
        None => vec![
            metric.to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            note,
        ],
    });
}

fn provenance(t: &mut Table, group: &str, h: &ProvenanceHistogram) {
    t.rows.push(vec![
        group.to_string(),
        h.rank1.to_string(),
        h.rank2_10.to_string(),
        h.rank11_199.to_string(),
        h.rank200_plus.to_string(),
        h.total.to_string(),
    ]);
}

pub fn tables(report: &Report) -> Vec<Table> {
    let mut summaries = Table::new("summaries", SUMMARY_HEADER);
    let mut tests = Table::new("tests", TEST_HEADER);
    let mut prov = Table::new("provenance", PROVENANCE_HEADER);
    let mut layers = Table::new("layers", LAYER_HEADER);
    let mut temps = Table::new("temperatures", TEMPERATURE_HEADER);
    let mut sweep = Table::new("sweep", SWEEP_HEADER);

    match &report.results {
        Results::Validate(_) => {}
        Results::EntropyMatch(r) => {
            for c in &r.columns {
                summary(&mut summaries, &c.label, "entropy", &c.entropy);
                summary(&mut summaries, &c.label, "ttr", &c.ttr);
                summary(&mut summaries, &c.label, "bigram_rep", &c.bigram_rep);
                summary(&mut summaries, &c.label, "trigram_rep", &c.trigram_rep);
                summary(
                    &mut summaries,
                    &c.label,
                    "top1_agreement",
                    &c.top1_agreement,
                );
                summary(&mut summaries, &c.label, "spearman_rho", &c.spearman_rho);
            }
            for t in &r.tests {
                test(&mut tests, &t.metric, t.result.as_ref(), t.note.as_deref());
            }
            let p = &r.per_context_temperature;
            let g = &r.global_temperature;
            let rows: Vec<(&str, String)> = vec![
                ("target_entropy", f(r.target_entropy)),
                ("global_t_star", f(g.t_star)),
                ("global_achieved_entropy", f(g.achieved_entropy)),
                ("global_iterations", g.iterations.to_string()),
                ("global_clamped", g.clamped.to_string()),
                ("per_context_mean", opt(p.summary.map(|s| s.mean))),
                ("per_context_se", opt(p.summary.map(|s| s.standard_error))),
                ("per_context_min", opt(p.min)),
                ("per_context_median", opt(p.median)),
                ("per_context_max", opt(p.max)),
                ("per_context_solved", p.solved.to_string()),
                ("per_context_clamped", p.clamped.to_string()),
                ("per_context_skipped", p.skipped.to_string()),
            ];
            temps.rows = rows
                .into_iter()
                .map(|(k, v)| vec![k.to_string(), v])
                .collect();
        }
        Results::Rank(r) => {
            summary(&mut summaries, "all", "top1_agreement", &r.top1_agreement);
            summary(&mut summaries, "all", "spearman_rho", &r.spearman_rho);
            if let Some(s) = &r.top1_error_a {
                summary(&mut summaries, "all", "top1_error_a", s);
            }
            if let Some(s) = &r.top1_error_b {
                summary(&mut summaries, "all", "top1_error_b", s);
            }
            for row in &r.per_trace {
                provenance(&mut prov, &row.input, &row.provenance);
            }
            provenance(&mut prov, "all", &r.provenance);
        }
        Results::TriadSeries(r) => {
            for p in &r.checkpoints {
                provenance(&mut prov, &p.input, &p.provenance);
                let one = |v: f64| MetricSummary {
                    mean: v,
                    standard_error: 0.0,
                    n: 1,
                };
                summary(&mut summaries, &p.input, "ttr_b", &one(p.ttr_b));
                if let Some(e) = p.top1_error_b {
                    summary(&mut summaries, &p.input, "top1_error_b", &one(e));
                }
            }
        }
        Results::Diversity(r) => {
            for g in &r.groups {
                diversity(&mut summaries, &g.label, &g.report);
            }
            for t in &r.tests {
                test(&mut tests, &t.metric, t.result.as_ref(), t.note.as_deref());
            }
        }
        Results::Ablation(r) => {
            diversity(&mut summaries, "baseline", &r.baseline);
            for row in &r.sweep {
                let label = format!("alpha={}", f(row.alpha));
                diversity(&mut summaries, &label, &row.diversity);
                provenance(&mut prov, &label, &row.provenance);
                sweep.rows.push(vec![
                    f(row.alpha),
                    f(row.diversity.ttr.mean),
                    f(row.diversity.bigram_rep.mean),
                    f(row.diversity.trigram_rep.mean),
                ]);
            }
            test(&mut tests, "ttr_vs_alpha", r.ttr_vs_alpha.as_ref(), None);
        }
        Results::Geometry(g) => {
            for (l, cum) in g.layers.iter().zip(&g.cumulative_delta_dim) {
                layers.rows.push(vec![
                    l.layer.to_string(),
                    f(l.cosine.mean),
                    f(l.cosine.standard_error),
                    f(l.l2.mean),
                    f(l.l2.standard_error),
                    f(l.pr_a),
                    f(l.pr_b),
                    f(l.delta_dim),
                    f(*cum),
                ]);
            }
        }
    }
    vec![summaries, tests, prov, layers, temps, sweep]
}
