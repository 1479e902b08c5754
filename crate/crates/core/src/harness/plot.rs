//! SVG curves from a metrics CSV: eval vs steps, eval vs FLOPs and selected
//! score vs steps, one line per run.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::harness::experiment::CSV_COLUMNS;

/// One parsed metrics row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run: String,
    pub seed: u64,
    pub step: usize,
    pub loss: f64,
    pub mean_selected_score: Option<f64>,
    pub eval_i2t_top1: Option<f64>,
    pub eval_t2i_top1: Option<f64>,
    pub cumulative_flops: f64,
    pub skipped: bool,
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, line: u64) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = rec.get(idx).unwrap_or("");
    raw.parse().map_err(|e: T::Err| Error::Csv {
        line: line as usize,
        reason: format!("column {}: bad value {raw:?}: {e}", CSV_COLUMNS[idx]),
    })
}

fn optional(rec: &csv::StringRecord, idx: usize, line: u64) -> Result<Option<f64>> {
    if rec.get(idx).unwrap_or("").is_empty() {
        Ok(None)
    } else {
        field(rec, idx, line).map(Some)
    }
}

/// Parses a metrics CSV. The header must match [`CSV_COLUMNS`] exactly.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    let mut header_seen = false;
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Csv {
            line: e.position().map_or(0, |p| p.line() as usize),
            reason: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if !header_seen {
            if rec.iter().ne(CSV_COLUMNS.iter().copied()) {
                return Err(Error::Csv {
                    line: line as usize,
                    reason: format!("expected header {:?}", CSV_COLUMNS.join(",")),
                });
            }
            header_seen = true;
            continue;
        }
        if rec.len() != CSV_COLUMNS.len() {
            return Err(Error::Csv {
                line: line as usize,
                reason: format!("expected {} fields, found {}", CSV_COLUMNS.len(), rec.len()),
            });
        }
        rows.push(MetricsRow {
            run: rec[0].to_string(),
            seed: field(&rec, 1, line)?,
            step: field(&rec, 2, line)?,
            loss: field(&rec, 3, line)?,
            mean_selected_score: optional(&rec, 4, line)?,
            eval_i2t_top1: optional(&rec, 5, line)?,
            eval_t2i_top1: optional(&rec, 6, line)?,
            cumulative_flops: field(&rec, 7, line)?,
            skipped: field(&rec, 8, line)?,
        });
    }
    if !header_seen {
        return Err(Error::Csv {
            line: 1,
            reason: "missing header".into(),
        });
    }
    Ok(rows)
}

/// A named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Groups rows by run and seed, in order of first appearance.
fn collect(rows: &[MetricsRow], f: impl Fn(&MetricsRow) -> Option<(f64, f64)>) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    for r in rows {
        let name = format!("{} (seed {})", r.run, r.seed);
        let Some(p) = f(r) else { continue };
        match out.iter_mut().find(|s| s.name == name) {
            Some(s) => s.points.push(p),
            None => out.push(Series {
                name,
                points: vec![p],
            }),
        }
    }
    out
}

/// The series drawn in each figure, keyed by file stem.
pub fn figure_series(rows: &[MetricsRow]) -> Vec<(&'static str, &'static str, Vec<Series>)> {
    vec![
        (
            "eval_vs_steps",
            "step",
            collect(rows, |r| r.eval_i2t_top1.map(|v| ((r.step + 1) as f64, v))),
        ),
        (
            "eval_vs_flops",
            "cumulative FLOPs",
            collect(rows, |r| r.eval_i2t_top1.map(|v| (r.cumulative_flops, v))),
        ),
        (
            "selected_score_vs_steps",
            "step",
            collect(rows, |r| {
                r.mean_selected_score.map(|v| ((r.step + 1) as f64, v))
            }),
        ),
    ]
}

fn range(values: impl Iterator<Item = f64>) -> std::ops::Range<f64> {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() || !hi.is_finite() {
        return 0.0..1.0;
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5)..(hi + 0.5);
    }
    let pad = 0.02 * (hi - lo);
    (lo - pad)..(hi + pad)
}

fn plot_error(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

fn draw(path: &Path, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_error)?;
    let xs = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let ys = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(xs, ys)
        .map_err(plot_error)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(plot_error)?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(
                s.points.iter().copied(),
                color.stroke_width(2),
            ))
            .map_err(plot_error)?
            .label(s.name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    if !series.is_empty() {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_error)?;
    }
    root.present().map_err(plot_error)
}

/// Writes one SVG per figure into `out_dir` and returns their paths.
pub fn emit_plots(metrics_csv: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(metrics_csv).map_err(|e| Error::io(metrics_csv, e))?;
    let rows = parse_metrics_csv(&text)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (stem, x_label, series) in figure_series(&rows) {
        let y_label = if stem.starts_with("selected") {
            "mean selected score"
        } else {
            "holdout i2t top-1"
        };
        let path = out_dir.join(format!("{stem}.svg"));
        draw(&path, x_label, y_label, &series)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str =
        "run,seed,step,loss,mean_selected_score,eval_i2t_top1,eval_t2i_top1,cumulative_flops,skipped\n";

    #[test]
    fn parses_rows_with_blanks() {
        let text = format!("{HEADER}iid,0,0,1.5,,,,96,false\niid,0,1,1.25,,0.5,0.25,192,false\n");
        let rows = parse_metrics_csv(&text).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].mean_selected_score, None);
        assert_eq!(rows[1].eval_i2t_top1, Some(0.5));
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = format!("{HEADER}iid,0,0,1.5,,,,96,false\niid,0,x,1.25,,,,192,false\n");
        match parse_metrics_csv(&text).unwrap_err() {
            Error::Csv { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let short = format!("{HEADER}iid,0\n");
        assert!(matches!(
            parse_metrics_csv(&short),
            Err(Error::Csv { line: 2, .. })
        ));
        assert!(matches!(
            parse_metrics_csv("a,b\n"),
            Err(Error::Csv { line: 1, .. })
        ));
    }

    #[test]
    fn runs_become_separate_series() {
        let text = format!(
            "{HEADER}iid,0,0,1,,0.1,0.1,3,false\njest,0,0,1,2,0.2,0.2,7,false\niid,0,1,1,,0.3,0.3,6,false\n"
        );
        let rows = parse_metrics_csv(&text).unwrap();
        let figs = figure_series(&rows);
        let flops = &figs[1].2;
        assert_eq!(flops.len(), 2);
        assert_eq!(flops[0].points, vec![(3.0, 0.1), (6.0, 0.3)]);
        assert_eq!(figs[2].2.len(), 1);
    }
}
