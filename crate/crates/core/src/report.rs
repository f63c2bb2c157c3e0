//! Spectral energy report and benchmark tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::build_feature_view;
use crate::checkpoint::atomic_write;
use crate::config::RunConfig;
use crate::dataset::GraphDataset;
use crate::error::{Error, Result};
use crate::model::Variant;
use crate::spectral::{self, LaplacianKind, SpectralReport};
use crate::train::MetricsRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCurve {
    pub anomaly: bool,
    /// Graphs contributing to the curve.
    pub graphs: usize,
    /// Mean fraction of energy per eigenvalue bin.
    pub mean_energy: Vec<f64>,
    pub mean_cumulative: Vec<f64>,
    /// Mean energy on the top quarter of each graph's spectrum by rank.
    pub mean_top_quartile_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    pub dataset: String,
    pub laplacian: LaplacianKind,
    pub bin_edges: Vec<f64>,
    pub normal: ClassCurve,
    pub anomaly: ClassCurve,
    /// Graphs whose signal has no energy at all.
    pub skipped_zero_signal: usize,
    /// Graphs above the eigendecomposition cap.
    pub skipped_too_large: usize,
    /// Largest `|Σ_k energy_k − 1|` over the analysed graphs.
    pub max_energy_sum_error: f64,
}

impl SpectralSummary {
    /// `"higher"`, `"lower"` or `"equal"`: the anomaly class's top-quartile
    /// energy relative to the normal class.
    pub fn top_quartile_direction(&self) -> &'static str {
        let (a, n) = (self.anomaly.mean_top_quartile_energy, self.normal.mean_top_quartile_energy);
        if a > n {
            "higher"
        } else if a < n {
            "lower"
        } else {
            "equal"
        }
    }
}

/// Per-graph energy distribution of the feature-view signal over the
/// Laplacian eigenbasis, averaged per class over fixed eigenvalue bins.
pub fn spectral_summary(ds: &GraphDataset, cfg: &RunConfig) -> Result<SpectralSummary> {
    let kind = cfg.spectral.laplacian;
    let mut reports: Vec<(bool, SpectralReport)> = Vec::new();
    let (mut zero, mut large) = (0, 0);
    for g in &ds.graphs {
        let x = build_feature_view(g, cfg.aug.degree_cap);
        match spectral::spectral_energy_distribution(g, &x, kind, cfg.spectral.eigen_cap) {
            Ok(r) if r.energies.iter().sum::<f64>() == 0.0 => zero += 1,
            Ok(r) => reports.push((ds.is_anomaly(g), r)),
            Err(Error::TooLarge { .. }) => large += 1,
            Err(e) => return Err(e),
        }
    }
    let upper = match kind {
        LaplacianKind::SymmetricNormalized => 2.0,
        LaplacianKind::Unnormalized => reports.iter().flat_map(|(_, r)| r.eigenvalues.last().copied()).fold(0.0, f64::max).max(1e-12),
    };
    let bins = cfg.spectral.bins;
    let bin_edges: Vec<f64> = (0..=bins).map(|i| upper * i as f64 / bins as f64).collect();
    let max_energy_sum_error = reports.iter().map(|(_, r)| (r.energies.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    let curve = |anomaly: bool| {
        let members: Vec<&SpectralReport> = reports.iter().filter(|(a, _)| *a == anomaly).map(|(_, r)| r).collect();
        let mut mean_energy = vec![0.0; bins];
        let mut top = 0.0;
        for r in &members {
            for (&lambda, &e) in r.eigenvalues.iter().zip(&r.energies) {
                let b = ((lambda / upper * bins as f64).floor().max(0.0) as usize).min(bins - 1);
                mean_energy[b] += e;
            }
            top += r.top_quartile_energy();
        }
        let n = members.len().max(1) as f64;
        mean_energy.iter_mut().for_each(|e| *e /= n);
        let mean_cumulative = mean_energy
            .iter()
            .scan(0.0, |acc, e| {
                *acc += e;
                Some(*acc)
            })
            .collect();
        ClassCurve { anomaly, graphs: members.len(), mean_energy, mean_cumulative, mean_top_quartile_energy: top / n }
    };
    Ok(SpectralSummary {
        dataset: ds.name.clone(),
        laplacian: kind,
        bin_edges,
        normal: curve(false),
        anomaly: curve(true),
        skipped_zero_signal: zero,
        skipped_too_large: large,
        max_energy_sum_error,
    })
}

pub fn spectral_csv(s: &SpectralSummary) -> String {
    let mut out = String::from("bin_lo,bin_hi,normal_energy,anomaly_energy,normal_cumulative,anomaly_cumulative\n");
    for b in 0..s.normal.mean_energy.len() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.bin_edges[b], s.bin_edges[b + 1], s.normal.mean_energy[b], s.anomaly.mean_energy[b], s.normal.mean_cumulative[b], s.anomaly.mean_cumulative[b]
        );
    }
    out
}

/// A minimal standalone SVG line chart.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, xs: &[f64], series: &[(&str, &str, &[f64])]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 420.0, 70.0, 150.0, 40.0, 60.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let x_max = xs.iter().copied().fold(f64::MIN, f64::max);
    let x_min = xs.iter().copied().fold(f64::MAX, f64::min);
    let y_max = series.iter().flat_map(|(_, _, ys)| ys.iter().copied()).fold(0.0, f64::max).max(1e-12);
    let sx = |x: f64| left + if x_max > x_min { (x - x_min) / (x_max - x_min) * pw } else { pw / 2.0 };
    let sy = |y: f64| top + ph - y / y_max * ph;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n\
         <line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>\n",
        left + pw / 2.0,
        xml_escape(title),
        top + ph,
        left + pw,
        top + ph,
        top + ph
    );
    for i in 0..=4 {
        let fx = x_min + (x_max - x_min) * i as f64 / 4.0;
        let fy = y_max * i as f64 / 4.0;
        let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{fx:.2}</text>", sx(fx), top + ph + 18.0);
        let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{fy:.2}</text>", left - 6.0, sy(fy) + 4.0);
    }
    let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", left + pw / 2.0, h - 16.0, xml_escape(x_label));
    let _ = writeln!(
        svg,
        "<text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.1})\">{}</text>",
        top + ph / 2.0,
        top + ph / 2.0,
        xml_escape(y_label)
    );
    for (k, (name, color, ys)) in series.iter().enumerate() {
        let points: Vec<String> = xs.iter().zip(ys.iter()).map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(svg, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", points.join(" "));
        let ly = top + 16.0 + 20.0 * k as f64;
        let _ = writeln!(svg, "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>", w - right + 12.0, w - right + 36.0);
        let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>", w - right + 42.0, ly + 4.0, xml_escape(name));
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Writes `spectral.csv`, `spectral_summary.json`, `spectral_energy.svg`
/// and `spectral_cumulative.svg` into `dir`.
pub fn write_spectral_report(s: &SpectralSummary, dir: &Path) -> Result<()> {
    let centers: Vec<f64> = s.bin_edges.windows(2).map(|e| (e[0] + e[1]) / 2.0).collect();
    atomic_write(&dir.join("spectral.csv"), spectral_csv(s).as_bytes())?;
    atomic_write(&dir.join("spectral_summary.json"), &serde_json::to_vec_pretty(s)?)?;
    let title = format!("{}: spectral energy of node features", s.dataset);
    let energy = line_plot_svg(
        &title,
        "eigenvalue",
        "mean energy fraction",
        &centers,
        &[("normal", "#1f77b4", &s.normal.mean_energy), ("anomaly", "#d62728", &s.anomaly.mean_energy)],
    );
    atomic_write(&dir.join("spectral_energy.svg"), energy.as_bytes())?;
    let cumulative = line_plot_svg(
        &title,
        "eigenvalue",
        "mean cumulative energy",
        &s.bin_edges[1..],
        &[("normal", "#1f77b4", &s.normal.mean_cumulative), ("anomaly", "#d62728", &s.anomaly.mean_cumulative)],
    );
    atomic_write(&dir.join("spectral_cumulative.svg"), cumulative.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub dataset: String,
    pub variant: Variant,
    /// `key=value` overrides of this grid cell, empty for the defaults.
    pub overrides: Vec<String>,
    pub seeds: usize,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub wall_clock_secs: f64,
}

impl BenchRow {
    pub fn from_metrics(m: &MetricsRecord, overrides: &[String]) -> Self {
        Self {
            dataset: m.dataset.clone(),
            variant: m.variant,
            overrides: overrides.to_vec(),
            seeds: m.seeds.len(),
            auc_mean: m.auc_mean,
            auc_std: m.auc_std,
            wall_clock_secs: m.total_wall_clock_secs,
        }
    }
}

/// AUC table in percent, `mean±std` per row.
pub fn bench_markdown(rows: &[BenchRow]) -> String {
    let mut s = String::from("| Dataset | Variant | Overrides | Seeds | AUC (%) | Time (s) |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let o = if r.overrides.is_empty() { "-".to_string() } else { r.overrides.join(" ") };
        let _ = writeln!(s, "| {} | {} | {} | {} | {:.2}±{:.2} | {:.1} |", r.dataset, r.variant, o, r.seeds, 100.0 * r.auc_mean, 100.0 * r.auc_std, r.wall_clock_secs);
    }
    s
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("dataset,variant,overrides,seeds,auc_mean,auc_std,wall_clock_secs\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.dataset, r.variant, r.overrides.join(" "), r.seeds, r.auc_mean, r.auc_std, r.wall_clock_secs);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{assign_anomaly_labels, Graph, GraphDataset};

    fn toy() -> GraphDataset {
        let mut graphs = Vec::new();
        for i in 0..4 {
            let mut g = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3)]);
            g.id = i;
            g.label = 0;
            graphs.push(g);
        }
        let mut g = Graph::from_edges(4, &[(0, 1), (0, 2), (0, 3), (1, 2), (2, 3)]);
        g.id = 4;
        g.label = 1;
        graphs.push(g);
        let ds = GraphDataset::from_graphs("toy", graphs);
        assign_anomaly_labels(ds, None).unwrap()
    }

    #[test]
    fn curves_are_normalized_per_class() {
        let s = spectral_summary(&toy(), &RunConfig::for_dataset("toy")).unwrap();
        assert_eq!((s.normal.graphs, s.anomaly.graphs), (4, 1));
        assert!(s.max_energy_sum_error < 1e-8);
        for c in [&s.normal, &s.anomaly] {
            assert!((c.mean_cumulative.last().unwrap() - 1.0).abs() < 1e-8);
            assert!(c.mean_energy.iter().all(|&e| e >= 0.0));
        }
        assert_eq!(s.bin_edges.len(), 21);
        assert_eq!(spectral_csv(&s).lines().count(), 21);
    }

    #[test]
    fn report_files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let s = spectral_summary(&toy(), &RunConfig::for_dataset("toy")).unwrap();
        write_spectral_report(&s, dir.path()).unwrap();
        for f in ["spectral.csv", "spectral_summary.json", "spectral_energy.svg", "spectral_cumulative.svg"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let svg = std::fs::read_to_string(dir.path().join("spectral_energy.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }

    #[test]
    fn bench_table_formats_percent() {
        let row = BenchRow { dataset: "AIDS".into(), variant: Variant::None, overrides: vec![], seeds: 5, auc_mean: 0.9929, auc_std: 0.0047, wall_clock_secs: 1.0 };
        assert!(bench_markdown(&[row]).contains("99.29±0.47"));
    }
}
