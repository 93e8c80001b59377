//! Figures and the markdown summary: grouped bar charts with 90% CI
//! whiskers (SVG) and original-vs-reconstruction grids (PNG).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::pipeline::{paths, AccuracySummary};
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{MetricsReport, PairedComparison};

/// Charted metrics and their axis labels.
pub const CHARTS: [(&str, &str); 5] = [
    ("attack_correct", "Attack accuracy"),
    ("ssim", "SSIM"),
    ("pixel_similarity", "Pixelwise similarity"),
    ("embedding_similarity", "Embedding similarity"),
    ("psnr", "PSNR (dB)"),
];

const GRID_GAP: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Bar {
    pub series: String,
    pub mean: f64,
    pub half_width: f64,
}

/// Bars grouped by inversion method, in first-seen order. Runs without the
/// metric are left out with a warning.
pub fn bar_groups(
    metric: &str,
    order: &[String],
    reports: &BTreeMap<String, MetricsReport>,
) -> Vec<(String, Vec<Bar>)> {
    let mut groups: Vec<(String, Vec<Bar>)> = Vec::new();
    for id in order {
        let Some(r) = reports.get(id) else { continue };
        let Some(a) = r.aggregates.get(metric) else {
            log::warn!("run {id} has no `{metric}` rows; omitted from the chart");
            continue;
        };
        let bar = Bar {
            series: r.meta.explanation.clone().unwrap_or_else(|| "none".into()),
            mean: a.mean,
            half_width: a.ci90_half_width,
        };
        match groups.iter_mut().find(|g| g.0 == r.meta.method) {
            Some(g) => g.1.push(bar),
            None => groups.push((r.meta.method.clone(), vec![bar])),
        }
    }
    groups
}

const PALETTE: [&str; 8] = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bar chart; whiskers span mean ± half-width.
pub fn bar_chart_svg(title: &str, y_label: &str, groups: &[(String, Vec<Bar>)]) -> String {
    let series: Vec<&str> = {
        let mut s: Vec<&str> = Vec::new();
        for b in groups.iter().flat_map(|g| &g.1) {
            if !s.contains(&b.series.as_str()) {
                s.push(&b.series);
            }
        }
        s
    };
    let colour = |name: &str| PALETTE[series.iter().position(|s| *s == name).unwrap_or(0) % PALETTE.len()];
    let bar_w = 18.0;
    let group_gap = 24.0;
    let (left, top, plot_h, bottom) = (60.0, 40.0, 220.0, 70.0);
    let n_bars: usize = groups.iter().map(|g| g.1.len()).sum();
    let plot_w = (n_bars as f64 * bar_w + (groups.len() as f64 + 1.0) * group_gap).max(120.0);
    let legend_w = 130.0;
    let width = left + plot_w + legend_w;
    let height = top + plot_h + bottom;
    let hi = groups
        .iter()
        .flat_map(|g| &g.1)
        .map(|b| b.mean + b.half_width)
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    let y_max = if hi <= 0.0 { 1.0 } else { nice_ceiling(hi) };
    let y = |v: f64| top + plot_h * (1.0 - (v / y_max).clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" font-size="14" text-anchor="middle">{}</text>"#,
        left + plot_w / 2.0,
        esc(title)
    );
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            left + plot_w,
            y(v),
            y(v),
            left - 4.0,
            y(v) + 4.0,
            fmt_tick(v)
        );
    }
    let _ = writeln!(
        s,
        r#"<text transform="translate(16,{:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        top + plot_h / 2.0,
        esc(y_label)
    );
    let mut x = left + group_gap;
    for (name, bars) in groups {
        let start = x;
        for b in bars {
            let (yt, yb) = (y(b.mean.max(0.0)), y(0.0));
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{yt:.1}" width="{bar_w}" height="{:.1}" fill="{}"><title>{}: {:.4} ± {:.4}</title></rect>"#,
                yb - yt,
                colour(&b.series),
                esc(&b.series),
                b.mean,
                b.half_width
            );
            if b.half_width.is_finite() && b.half_width > 0.0 {
                let cx = x + bar_w / 2.0;
                let (y0, y1) = (y(b.mean - b.half_width), y(b.mean + b.half_width));
                let _ = writeln!(
                    s,
                    r#"<path d="M{cx:.1} {y0:.1}V{y1:.1}M{:.1} {y0:.1}h8M{:.1} {y1:.1}h8" stroke="black" fill="none"/>"#,
                    cx - 4.0,
                    cx - 4.0
                );
            }
            x += bar_w;
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" transform="rotate(-30 {:.1} {:.1})">{}</text>"#,
            (start + x) / 2.0,
            top + plot_h + 14.0,
            (start + x) / 2.0,
            top + plot_h + 14.0,
            esc(name)
        );
        x += group_gap;
    }
    let _ = writeln!(
        s,
        r#"<line x1="{left}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="black"/>"#,
        left + plot_w,
        y(0.0),
        y(0.0)
    );
    for (i, name) in series.iter().enumerate() {
        let ly = top + 14.0 * i as f64;
        let lx = left + plot_w + 12.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            ly,
            colour(name),
            lx + 14.0,
            ly + 9.0,
            esc(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn nice_ceiling(v: f64) -> f64 {
    let mag = 10f64.powf(v.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0].iter().map(|m| m * mag).find(|&c| c >= v).unwrap_or(10.0 * mag)
}

fn fmt_tick(v: f64) -> String {
    if v >= 10.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Lays `rows × cols` planar `C × H × W` cells on a white canvas with a
/// `GRID_GAP` border. Returns `(width, height, planar pixels)`.
pub fn image_grid(cells: &[Vec<&[f32]>], h: usize, w: usize, c: usize) -> Result<(usize, usize, Vec<f32>)> {
    let rows = cells.len();
    let cols = cells.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 || cells.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape("image grid needs a non-empty rectangular layout".into()));
    }
    let gw = cols * (w + GRID_GAP) + GRID_GAP;
    let gh = rows * (h + GRID_GAP) + GRID_GAP;
    let mut out = vec![1.0f32; c * gh * gw];
    for (r, row) in cells.iter().enumerate() {
        for (q, cell) in row.iter().enumerate() {
            if cell.len() != c * h * w {
                return Err(Error::Shape(format!("grid cell of {} values, expected {}", cell.len(), c * h * w)));
            }
            let (oy, ox) = (GRID_GAP + r * (h + GRID_GAP), GRID_GAP + q * (w + GRID_GAP));
            for ch in 0..c {
                for yy in 0..h {
                    let src = &cell[ch * h * w + yy * w..ch * h * w + (yy + 1) * w];
                    let at = ch * gh * gw + (oy + yy) * gw + ox;
                    out[at..at + w].copy_from_slice(src);
                }
            }
        }
    }
    Ok((gw, gh, out))
}

fn grid_rows<'a>(cols: &[&'a (String, Vec<f32>)], n: usize, plane: usize) -> Vec<Vec<&'a [f32]>> {
    (0..n).map(|r| cols.iter().map(|col| &col.1[r * plane..(r + 1) * plane]).collect()).collect()
}

fn load_samples(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    io::read_npy::<f32>(path)
}

/// Writes figures and `report.md` under `dir`; returns the files written.
pub fn render(
    dir: &Path,
    cfg: &ExperimentConfig,
    order: &[String],
    reports: &BTreeMap<String, MetricsReport>,
    acc: &AccuracySummary,
) -> Result<Vec<PathBuf>> {
    let fig = dir.join(paths::FIGURES);
    let mut written = Vec::new();
    for (metric, label) in CHARTS {
        let groups = bar_groups(metric, order, reports);
        if groups.is_empty() {
            log::warn!("no runs report `{metric}`; chart skipped");
            continue;
        }
        let p = fig.join(format!("{metric}.svg"));
        io::write_text(&p, &bar_chart_svg(&format!("{label} ({})", cfg.run.name), label, &groups))?;
        written.push(p);
    }

    // originals in the first column, one column per run
    let arrays = dir.join(paths::RECONSTRUCTIONS);
    let (shape, originals) = load_samples(&arrays.join("originals.npy"))?;
    let [total, c, h, w] = shape[..] else {
        return Err(Error::Shape(format!("image array of shape {shape:?}")));
    };
    let n = cfg.report.samples.min(total);
    let plane = c * h * w;
    let mut columns: Vec<(String, Vec<f32>)> = vec![("original".into(), originals)];
    for id in order {
        let (s, v) = load_samples(&arrays.join(format!("{id}.npy")))?;
        if s != shape {
            return Err(Error::Shape(format!("samples of {id} have shape {s:?}, originals {shape:?}")));
        }
        columns.push((id.clone(), v));
    }
    let all: Vec<&(String, Vec<f32>)> = columns.iter().collect();
    let (gw, gh, px) = image_grid(&grid_rows(&all, n, plane), h, w, c)?;
    let p = fig.join("reconstructions.png");
    io::write_planar_png(&p, gw, gh, c, &px)?;
    written.push(p);
    for col in &columns[1..] {
        let (gw, gh, px) = image_grid(&grid_rows(&[&columns[0], col], n, plane), h, w, c)?;
        let p = fig.join(format!("grid_{}.png", col.0));
        io::write_planar_png(&p, gw, gh, c, &px)?;
        written.push(p);
    }

    let comparisons: BTreeMap<String, BTreeMap<String, PairedComparison>> =
        io::read_json(&dir.join(paths::COMPARISONS)).unwrap_or_default();
    let p = dir.join(paths::REPORT);
    io::write_text(
        &p,
        &markdown(cfg, order, reports, &comparisons, acc, &columns.iter().map(|c| c.0.as_str()).collect::<Vec<_>>()),
    )?;
    written.push(p);
    Ok(written)
}

fn markdown(
    cfg: &ExperimentConfig,
    order: &[String],
    reports: &BTreeMap<String, MetricsReport>,
    comparisons: &BTreeMap<String, BTreeMap<String, PairedComparison>>,
    acc: &AccuracySummary,
    grid_columns: &[&str],
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {}\n", cfg.run.name);
    let _ = writeln!(s, "Config hash `{}`, seed {}, dataset `{}`.\n", cfg.hash(), cfg.run.seed, cfg.data.profile);
    let _ = writeln!(s, "| model | held-out accuracy |\n|---|---|");
    let _ = writeln!(s, "| target | {:.4} |", acc.target_heldout);
    let _ = writeln!(s, "| eval | {:.4} |", acc.eval_heldout);
    let _ = writeln!(s, "| eval on original attack-test images | {:.4} |\n", acc.eval_attack_test);

    let _ = writeln!(s, "## Attack results (mean ± 90% CI half-width)\n");
    let head: Vec<&str> = CHARTS.iter().map(|c| c.1).collect();
    let _ = writeln!(s, "| run | {} |", head.join(" | "));
    let _ = writeln!(s, "|---|{}", "---|".repeat(head.len()));
    for id in order {
        let Some(r) = reports.get(id) else { continue };
        let cells: Vec<String> = CHARTS
            .iter()
            .map(|(m, _)| {
                r.aggregates.get(*m).map_or("n/a".into(), |a| format!("{:.4} ± {:.4}", a.mean, a.ci90_half_width))
            })
            .collect();
        let _ = writeln!(s, "| {id} | {} |", cells.join(" | "));
    }
    if !comparisons.is_empty() {
        let _ = writeln!(s, "\n## Paired difference against prediction_only\n");
        let _ = writeln!(s, "| run | Δ SSIM | Δ attack accuracy |\n|---|---|---|");
        for id in order.iter().filter(|id| comparisons.contains_key(*id)) {
            let c = &comparisons[id];
            let f = |m: &str| {
                c.get(m).map_or("n/a".into(), |p| {
                    format!(
                        "{:+.4} ± {:.4}{}",
                        p.mean_diff,
                        p.ci90_half_width,
                        if p.positive { " (positive)" } else { "" }
                    )
                })
            };
            let _ = writeln!(s, "| {id} | {} | {} |", f("ssim"), f("attack_correct"));
        }
    }
    let _ = writeln!(s, "\n## Figures\n");
    for (m, label) in CHARTS {
        let _ = writeln!(s, "- {label}: `figures/{m}.svg`");
    }
    let _ = writeln!(s, "- Reconstructions (columns: {}): `figures/reconstructions.png`", grid_columns.join(", "));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{Aggregate, RunMetadata};

    fn report(id: &str, method: &str, e: Option<&str>, metrics: &[(&str, f64)]) -> MetricsReport {
        MetricsReport {
            meta: RunMetadata {
                run_id: id.into(),
                method: method.into(),
                explanation: e.map(Into::into),
                dataset: "mnist".into(),
                seed: 0,
            },
            aggregates: metrics
                .iter()
                .map(|&(m, v)| {
                    (m.to_string(), Aggregate { mean: v, ci90_half_width: 0.05, sd: 0.1, n: 10, excluded: 0 })
                })
                .collect(),
        }
    }

    #[test]
    fn single_run_gives_one_bar_per_metric() {
        let reports = BTreeMap::from([(
            "po".to_string(),
            report("po", "prediction_only", None, &[("ssim", 0.4), ("attack_correct", 0.9)]),
        )]);
        let order = vec!["po".to_string()];
        for m in ["ssim", "attack_correct"] {
            let g = bar_groups(m, &order, &reports);
            assert_eq!(g.len(), 1);
            assert_eq!(g[0].1.len(), 1);
            let svg = bar_chart_svg("t", m, &g);
            assert_eq!(svg.matches("<rect x=").count(), 2, "one bar plus one legend swatch");
        }
    }

    #[test]
    fn runs_missing_a_metric_are_omitted() {
        let reports = BTreeMap::from([
            ("a".to_string(), report("a", "flatten", Some("grad_cam"), &[("ssim", 0.5)])),
            ("b".to_string(), report("b", "cnn", Some("grad_cam"), &[("mse", 0.1)])),
        ]);
        let order = vec!["a".to_string(), "b".to_string()];
        let g = bar_groups("ssim", &order, &reports);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].0, "flatten");
        assert!(bar_groups("psnr", &order, &reports).is_empty());
    }

    #[test]
    fn bars_group_by_method() {
        let reports = BTreeMap::from([
            ("a".to_string(), report("a", "flatten_unet", Some("lrp"), &[("ssim", 0.5)])),
            ("b".to_string(), report("b", "flatten_unet", Some("gradient"), &[("ssim", 0.6)])),
            ("c".to_string(), report("c", "cnn", Some("lrp"), &[("ssim", 0.3)])),
        ]);
        let order = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let g = bar_groups("ssim", &order, &reports);
        assert_eq!(g.iter().map(|x| x.1.len()).collect::<Vec<_>>(), vec![2, 1]);
    }

    #[test]
    fn grid_has_one_row_per_sample() {
        let cell = [0.5f32; 4 * 4];
        let rows: Vec<Vec<&[f32]>> = (0..6).map(|_| vec![&cell[..], &cell[..]]).collect();
        let (gw, gh, px) = image_grid(&rows, 4, 4, 1).unwrap();
        assert_eq!(gh, 6 * (4 + GRID_GAP) + GRID_GAP);
        assert_eq!(gw, 2 * (4 + GRID_GAP) + GRID_GAP);
        assert_eq!(px[0], 1.0);
        assert_eq!(px[GRID_GAP * gw + GRID_GAP], 0.5);
    }

    #[test]
    fn ceiling_is_a_round_number_above() {
        assert_eq!(nice_ceiling(0.93), 1.0);
        assert_eq!(nice_ceiling(17.0), 20.0);
        assert_eq!(nice_ceiling(0.21), 0.25);
    }
}
