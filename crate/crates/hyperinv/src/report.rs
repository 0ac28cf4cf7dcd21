//! Table and artifact generation: long-format CSVs (full precision,
//! re-parse exact), aligned text tables, and small SVG line plots.

use crate::analysis::{BoundReport, InvarianceCurve};
use crate::error::{Error, Result};
use crate::hypernet::InvarianceDescriptor;
use crate::train::{DownstreamResult, LogRow};
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// One MTL-baseline downstream cell.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct BaselineCell {
    pub task: String,
    pub n_per_class: usize,
    pub seed: u64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// The Table-1-style report: per-cell rows plus per-(task, N) aggregates.
#[derive(Clone, Debug)]
pub struct Report {
    pub results: Vec<DownstreamResult>,
    pub baselines: Vec<BaselineCell>,
}

/// Assemble a report from downstream results and optional baseline cells.
/// Results are expected to share the task/seed protocol.
pub fn make_report(results: &[DownstreamResult], baselines: &[BaselineCell]) -> Report {
    Report {
        results: results.to_vec(),
        baselines: baselines.to_vec(),
    }
}

impl Report {
    /// Long-format CSV, one row per (task, N, seed), numbers at full
    /// precision so a re-parse reproduces them exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(
            "task,n,seed,i_star_0,i_star_1,i_round_0,i_round_1,acc_train_continuous,acc_test_continuous,acc_train_discrete,acc_test_discrete,acc_train_mtl,acc_test_mtl\n",
        );
        for r in &self.results {
            let mtl = self.baseline_for(&r.task, r.n_per_class, r.seed);
            let (mtl_train, mtl_test) = match mtl {
                Some(b) => (b.train_accuracy.to_string(), b.test_accuracy.to_string()),
                None => (String::new(), String::new()),
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.task,
                r.n_per_class,
                r.seed,
                r.descriptor_continuous[0],
                r.descriptor_continuous.get(1).copied().unwrap_or(f64::NAN),
                r.descriptor_discrete[0],
                r.descriptor_discrete.get(1).copied().unwrap_or(f64::NAN),
                r.train_continuous.accuracy,
                r.test_continuous.accuracy,
                r.train_discrete.accuracy,
                r.test_discrete.accuracy,
                mtl_train,
                mtl_test,
            )
            .unwrap();
        }
        out
    }

    fn baseline_for(&self, task: &str, n: usize, seed: u64) -> Option<&BaselineCell> {
        self.baselines
            .iter()
            .find(|b| b.task == task && b.n_per_class == n && b.seed == seed)
    }

    /// Aggregated, human-aligned table: estimated invariance strength as
    /// percentages, accuracies as percent mean +/- std over seeds.
    /// Descriptor values are reported in constrained space.
    pub fn to_text(&self) -> String {
        let mut groups: BTreeMap<(String, usize), Vec<&DownstreamResult>> = BTreeMap::new();
        for r in &self.results {
            groups
                .entry((r.task.clone(), r.n_per_class))
                .or_default()
                .push(r);
        }
        let mut out = String::new();
        out.push_str(
            "task       N    i*          A_discrete      A_continuous    A_mtl\n",
        );
        for ((task, n), cells) in &groups {
            let k = cells[0].descriptor_continuous.len();
            let i_star: Vec<String> = (0..k)
                .map(|c| {
                    let mean = cells
                        .iter()
                        .map(|r| r.descriptor_continuous[c])
                        .sum::<f64>()
                        / cells.len() as f64;
                    format!("{:.0}", mean * 100.0)
                })
                .collect();
            let stat = |xs: Vec<f64>| -> String {
                let n = xs.len() as f64;
                let mean = xs.iter().sum::<f64>() / n;
                let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                format!("{:5.1} ± {:4.1}", mean * 100.0, var.sqrt() * 100.0)
            };
            let discrete = stat(cells.iter().map(|r| r.test_discrete.accuracy).collect());
            let continuous = stat(cells.iter().map(|r| r.test_continuous.accuracy).collect());
            let mtl_cells: Vec<f64> = cells
                .iter()
                .filter_map(|r| self.baseline_for(task, *n, r.seed))
                .map(|b| b.test_accuracy)
                .collect();
            let mtl = if mtl_cells.is_empty() {
                "—".to_string()
            } else {
                stat(mtl_cells)
            };
            writeln!(
                out,
                "{task:<10} {n:<4} [{}]  {discrete}    {continuous}    {mtl}",
                i_star.join(", ")
            )
            .unwrap();
        }
        out
    }
}

/// Parse a report CSV back into (task, n, seed, numeric fields) rows.
pub fn parse_report_csv(text: &str) -> Result<Vec<(String, usize, u64, Vec<Option<f64>>)>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 13 {
            return Err(Error::Config(format!(
                "report CSV line {} has {} fields, expected 13",
                i + 1,
                fields.len()
            )));
        }
        let task = fields[0].to_string();
        let n: usize = fields[1]
            .parse()
            .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        let seed: u64 = fields[2]
            .parse()
            .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        let nums = fields[3..]
            .iter()
            .map(|f| {
                if f.is_empty() {
                    Ok(None)
                } else {
                    f.parse::<f64>()
                        .map(Some)
                        .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((task, n, seed, nums));
    }
    Ok(rows)
}

/// Per-epoch metrics CSV: epoch, task, split, loss, accuracy.
pub fn metrics_csv(log: &[LogRow]) -> String {
    let mut out = String::from("epoch,task,split,loss,accuracy\n");
    for r in log {
        writeln!(out, "{},{},{},{},{}", r.epoch, r.task, r.split, r.loss, r.accuracy).unwrap();
    }
    out
}

/// Invariance-curve CSV: descriptor components then per-family mean/std.
pub fn invariance_curve_csv(curve: &InvarianceCurve) -> String {
    let k = curve
        .points
        .first()
        .map(|p| p.descriptor.len())
        .unwrap_or(0);
    let mut header: Vec<String> = (0..k).map(|i| format!("descriptor_{i}")).collect();
    for name in &curve.family_names {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_std"));
    }
    let mut out = header.join(",");
    out.push('\n');
    for p in &curve.points {
        let mut fields: Vec<String> = p.descriptor.iter().map(|v| v.to_string()).collect();
        for (m, s) in p.mean.iter().zip(&p.std) {
            fields.push(m.to_string());
            fields.push(s.to_string());
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Loss-sweep CSV: descriptor components and converged train loss.
pub fn loss_sweep_csv(points: &[(InvarianceDescriptor, f64)]) -> String {
    let k = points.first().map(|(d, _)| d.len()).unwrap_or(0);
    let mut header: Vec<String> = (0..k).map(|i| format!("descriptor_{i}")).collect();
    header.push("train_loss".to_string());
    let mut out = header.join(",");
    out.push('\n');
    for (d, loss) in points {
        let mut fields: Vec<String> = d.values().iter().map(|v| v.to_string()).collect();
        fields.push(loss.to_string());
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Bound-check CSV: one row per trial plus a trailing summary row.
pub fn bound_report_csv(report: &BoundReport) -> String {
    let mut out = String::from(
        "trial,seed,n,train_risk,test_risk,feature_bound,head_bound,bound,bound_fixed_feature,violation\n",
    );
    for (i, t) in report.trials.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            i,
            t.seed,
            t.n,
            t.train_risk,
            t.test_risk,
            t.feature_bound,
            t.head_bound,
            t.bound,
            t.bound_fixed_feature,
            t.violation
        )
        .unwrap();
    }
    writeln!(
        out,
        "# violations,{},of,{},delta,{},cardinality,{}",
        report.violations,
        report.trials.len(),
        report.delta,
        report.cardinality
    )
    .unwrap();
    out
}

/// A named series for [`svg_line_chart`].
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// A minimal SVG line chart, emitted beside every CSV artifact.
pub fn svg_line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 60.0;
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);

    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{title}</text>"#,
        W / 2.0
    )
    .unwrap();
    // Axes.
    writeln!(
        out,
        r#"<line x1="{M}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
        H - M,
        W - M
    )
    .unwrap();
    writeln!(out, r#"<line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>"#, H - M).unwrap();
    for (label, x, y, anchor) in [
        (format!("{x0:.2}"), M, H - M + 18.0, "middle"),
        (format!("{x1:.2}"), W - M, H - M + 18.0, "middle"),
        (format!("{y0:.2}"), M - 6.0, H - M, "end"),
        (format!("{y1:.2}"), M - 6.0, M, "end"),
    ] {
        writeln!(
            out,
            r#"<text x="{x}" y="{y}" text-anchor="{anchor}" font-family="sans-serif" font-size="11">{label}</text>"#
        )
        .unwrap();
    }
    writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{x_label}</text>"#,
        W / 2.0,
        H - 12.0
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {})">{y_label}</text>"#,
        H / 2.0,
        H / 2.0
    )
    .unwrap();
    for (i, s) in series.iter().enumerate() {
        let color = colors[i % colors.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{color}">{}</text>"#,
            W - M + 6.0,
            M + 16.0 * i as f64,
            s.name
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Metrics;

    fn cell(task: &str, n: usize, seed: u64, acc: f64) -> DownstreamResult {
        DownstreamResult {
            task: task.to_string(),
            n_per_class: n,
            seed,
            descriptor_continuous: vec![0.61, 0.65],
            descriptor_discrete: vec![1.0, 1.0],
            train_continuous: Metrics {
                accuracy: 0.982,
                mean_loss: 0.1,
            },
            test_continuous: Metrics {
                accuracy: acc,
                mean_loss: 1.0,
            },
            train_discrete: Metrics {
                accuracy: 0.97,
                mean_loss: 0.2,
            },
            test_discrete: Metrics {
                accuracy: acc - 0.02,
                mean_loss: 1.1,
            },
        }
    }

    #[test]
    fn csv_reparse_is_exact() {
        let results = vec![cell("digit", 10, 0, 1.0 / 3.0), cell("digit", 10, 1, 0.71)];
        let baselines = vec![BaselineCell {
            task: "digit".into(),
            n_per_class: 10,
            seed: 0,
            train_accuracy: 0.598,
            test_accuracy: 0.228,
        }];
        let report = make_report(&results, &baselines);
        let csv = report.to_csv();
        let rows = parse_report_csv(&csv).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].3[0], Some(0.61));
        assert_eq!(rows[0].3[5], Some(1.0 / 3.0)); // exact round-trip
        assert_eq!(rows[0].3[9], Some(0.228));
        assert_eq!(rows[1].3[9], None); // missing baseline stays empty
    }

    #[test]
    fn text_table_renders_percent_descriptor_and_missing_baseline() {
        let results = vec![cell("digit", 10, 0, 0.333)];
        let report = make_report(&results, &[]);
        let text = report.to_text();
        assert!(text.contains("[61, 65]"), "{text}");
        assert!(text.contains("—"), "{text}");
    }

    #[test]
    fn svg_contains_all_series() {
        let svg = svg_line_chart(
            "measured invariance",
            "descriptor t",
            "cosine similarity",
            &[
                Series {
                    name: "rotation".into(),
                    points: vec![(0.0, 0.2), (0.5, 0.5), (1.0, 0.9)],
                },
                Series {
                    name: "color".into(),
                    points: vec![(0.0, 0.9), (1.0, 0.1)],
                },
            ],
        );
        assert!(svg.contains("polyline"));
        assert!(svg.contains("rotation") && svg.contains("color"));
        assert!(svg.starts_with("<svg"));
    }
}
