//! Metric tables, summaries and plots.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use cclis::eval::{AccuracyMatrix, Scenario};
use serde::{Deserialize, Serialize};

pub const METRICS_HEADER: &str = "seed,scenario,after_task,eval_task,accuracy,avg_accuracy,avg_forgetting";

/// Lower-triangular rows of every scenario, task numbers 1-based.
pub fn metrics_csv(seed: u64, matrices: &[&AccuracyMatrix]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in matrices {
        for after in 0..m.tasks() {
            let avg = m.average_accuracy(after);
            let forget = m.forgetting_at(after).map(|f| f.to_string()).unwrap_or_default();
            for t in 0..=after {
                out.push_str(&format!(
                    "{seed},{},{},{},{},{avg},{forget}\n",
                    m.scenario.name(),
                    after + 1,
                    t + 1,
                    m.get(after, t)
                ));
            }
        }
    }
    out
}

/// Rebuilds the accuracy matrices from a metrics table.
pub fn parse_metrics_csv(text: &str) -> Result<BTreeMap<Scenario, AccuracyMatrix>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        bail!("metrics table has an unexpected header");
    }
    let mut rows: BTreeMap<Scenario, Vec<Vec<f64>>> = BTreeMap::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            bail!("line {}: expected 7 fields", n + 2);
        }
        let scenario = match f[1] {
            "class_il" => Scenario::ClassIl,
            "task_il" => Scenario::TaskIl,
            other => bail!("line {}: unknown scenario {other}", n + 2),
        };
        let after: usize = f[2].parse().with_context(|| format!("line {}", n + 2))?;
        let acc: f64 = f[4].parse().with_context(|| format!("line {}", n + 2))?;
        let r = rows.entry(scenario).or_default();
        if after == 0 {
            bail!("line {}: task numbers start at 1", n + 2);
        }
        if r.len() < after {
            r.resize(after, Vec::new());
        }
        r[after - 1].push(acc);
    }
    rows.into_iter()
        .map(|(s, r)| Ok((s, AccuracyMatrix::from_rows(s, r)?)))
        .collect()
}

/// `after_task,eval_task,accuracy` for one scenario.
pub fn matrix_csv(m: &AccuracyMatrix) -> String {
    let mut out = String::from("after_task,eval_task,accuracy\n");
    for after in 0..m.tasks() {
        for t in 0..=after {
            out.push_str(&format!("{},{},{}\n", after + 1, t + 1, m.get(after, t)));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; absent for a single value.
    pub std: Option<f64>,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Self { mean, std, n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub final_avg_accuracy: Stat,
    pub avg_forgetting: Option<Stat>,
    pub per_seed_final_accuracy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunGroupSummary {
    pub preset: String,
    pub lambda: f64,
    pub seeds: Vec<u64>,
    pub scenarios: BTreeMap<String, ScenarioSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub created_unix: u64,
    pub groups: BTreeMap<String, RunGroupSummary>,
}

pub fn summarize_group(preset: &str, lambda: f64, seeds: &[u64], runs: &[BTreeMap<Scenario, AccuracyMatrix>]) -> RunGroupSummary {
    let mut scenarios = BTreeMap::new();
    let present: Vec<Scenario> = runs.first().map(|r| r.keys().copied().collect()).unwrap_or_default();
    for s in present {
        let finals: Vec<f64> = runs.iter().filter_map(|r| r.get(&s)?.final_average()).collect();
        let forgets: Vec<f64> = runs.iter().filter_map(|r| r.get(&s)?.average_forgetting().ok()).collect();
        scenarios.insert(
            s.name().to_string(),
            ScenarioSummary {
                final_avg_accuracy: Stat::of(&finals),
                avg_forgetting: (!forgets.is_empty()).then(|| Stat::of(&forgets)),
                per_seed_final_accuracy: finals,
            },
        );
    }
    RunGroupSummary {
        preset: preset.to_string(),
        lambda,
        seeds: seeds.to_vec(),
        scenarios,
    }
}

pub fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Line plot of final accuracy against λ, one series per preset.
pub fn lambda_sweep_svg(series: &BTreeMap<String, Vec<(f64, f64)>>, y_label: &str) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let xs: Vec<f64> = series.values().flatten().map(|p| p.0).collect();
    let (x0, mut x1) = (xs.iter().cloned().fold(f64::INFINITY, f64::min), xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    if !(x1 > x0) {
        x1 = x0 + 1.0;
    }
    let px = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let py = |y: f64| h - pad - y.clamp(0.0, 1.0) * (h - 2.0 * pad);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ty}\" text-anchor=\"middle\" font-size=\"12\">lambda</text>\n\
         <text x=\"12\" y=\"{cy}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 12 {cy})\">{y_label}</text>\n",
        b = h - pad,
        r = w - pad,
        cx = w / 2.0,
        ty = h - 12.0,
        cy = h / 2.0,
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"10\">{tick}</text>\n",
            pad - 4.0,
            py(tick) + 3.0
        ));
    }
    for x in {
        let mut u = xs.clone();
        u.sort_by(f64::total_cmp);
        u.dedup();
        u
    } {
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"10\">{x}</text>\n",
            px(x),
            h - pad + 14.0
        ));
    }
    for (k, (name, pts)) in series.iter().enumerate() {
        let c = colors[k % colors.len()];
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
        out.push_str(&format!("<polyline fill=\"none\" stroke=\"{c}\" points=\"{}\"/>\n", path.join(" ")));
        for (x, y) in pts {
            out.push_str(&format!("<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{c}\"/>\n", px(*x), py(*y)));
        }
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{c}\">{name}</text>\n",
            w - pad - 90.0,
            pad + 14.0 * k as f64
        ));
    }
    out.push_str("</svg>\n");
    out
}
