//! Summary tables (CSV) and per-codec plots from result records.

use std::fs;
use std::path::{Path, PathBuf};

use leakmark::metrics::{records_success_rate, success_rate, AttackMode, DetectionRule, MetricRecord};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::plot::{Canvas, Panel, PALETTE};
use crate::records::ResultRecord;

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub codec: String,
    pub attack: String,
    pub stage: String,
    pub mode: AttackMode,
    pub images: usize,
    pub headline_threshold: f64,
    pub sr_headline: f64,
    /// Success rate at each rule threshold, in rule order; `None` for
    /// external rows that do not report it.
    pub sr_by_threshold: Vec<Option<f64>>,
    pub mean_bit_accuracy: Option<f64>,
    pub mean_ssim: f64,
    /// Mean over finite values.
    pub mean_psnr: f64,
    /// `measured` or `external`.
    pub origin: String,
}

/// A pre-computed comparison row read from CSV with columns
/// `codec,attack,threshold,success_rate,ssim,psnr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalRow {
    pub codec: String,
    pub attack: String,
    pub threshold: f64,
    pub success_rate: f64,
    pub ssim: f64,
    pub psnr: f64,
}

pub fn load_external_rows(path: &Path) -> Result<Vec<ExternalRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let rows = reader.deserialize().collect::<std::result::Result<Vec<ExternalRow>, _>>()?;
    for r in &rows {
        if !(0.0..=1.0).contains(&r.success_rate) {
            return Err(HarnessError::Config(format!(
                "external row {}/{} has success rate {} outside [0, 1]",
                r.codec, r.attack, r.success_rate
            )));
        }
    }
    Ok(rows)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Groups records by (codec, attack, stage) in first-appearance order.
pub fn summarize(records: &[ResultRecord], rule: &DetectionRule) -> Result<Vec<SummaryRow>> {
    if records.is_empty() {
        return Err(HarnessError::Config("no records to summarise".into()));
    }
    let mut groups: Vec<((String, String, String), Vec<&ResultRecord>)> = Vec::new();
    for r in records {
        let key = (r.codec.clone(), r.attack.clone(), r.stage.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|((codec, attack, stage), rs)| {
            let mode = rs[0].mode;
            let metrics: Vec<MetricRecord> = rs.iter().map(|r| r.metrics.clone()).collect();
            let headline = rs[0].headline_threshold;
            Ok(SummaryRow {
                codec,
                attack,
                stage,
                mode,
                images: rs.len(),
                headline_threshold: headline,
                sr_headline: records_success_rate(&metrics, mode, headline)?,
                sr_by_threshold: rule
                    .thresholds
                    .iter()
                    .map(|&t| records_success_rate(&metrics, mode, t).map(Some))
                    .collect::<leakmark::Result<_>>()?,
                mean_bit_accuracy: Some(mean(metrics.iter().map(|m| m.bit_accuracy))),
                mean_ssim: mean(metrics.iter().map(|m| m.ssim)),
                mean_psnr: mean(metrics.iter().map(|m| m.psnr).filter(|p| p.is_finite())),
                origin: "measured".into(),
            })
        })
        .collect()
}

fn external_summary(rows: &[ExternalRow], rule: &DetectionRule) -> Result<Vec<SummaryRow>> {
    rows.iter()
        .map(|r| {
            let mode = AttackMode::Evasion;
            Ok(SummaryRow {
                codec: r.codec.clone(),
                attack: r.attack.clone(),
                stage: "external".into(),
                mode,
                images: 0,
                headline_threshold: r.threshold,
                sr_headline: r.success_rate,
                sr_by_threshold: rule
                    .thresholds
                    .iter()
                    .map(|&t| ((t - r.threshold).abs() < 1e-9).then_some(r.success_rate))
                    .collect(),
                mean_bit_accuracy: None,
                mean_ssim: r.ssim,
                mean_psnr: r.psnr,
                origin: "external".into(),
            })
        })
        .collect()
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// Writes the summary table; external rows are appended after measured ones.
pub fn write_summary_csv(
    records: &[ResultRecord],
    rule: &DetectionRule,
    path: &Path,
    external: &[ExternalRow],
) -> Result<Vec<SummaryRow>> {
    let mut rows = summarize(records, rule)?;
    rows.extend(external_summary(external, rule)?);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = [
        "codec",
        "attack",
        "stage",
        "mode",
        "origin",
        "images",
        "headline_threshold",
        "sr_headline",
        "mean_bit_accuracy",
        "mean_ssim",
        "mean_psnr",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(rule.thresholds.iter().map(|t| format!("sr@{t}")));
    w.write_record(&header)?;
    for r in &rows {
        let mut rec = vec![
            r.codec.clone(),
            r.attack.clone(),
            r.stage.clone(),
            format!("{:?}", r.mode).to_lowercase(),
            r.origin.clone(),
            r.images.to_string(),
            fmt(r.headline_threshold),
            fmt(r.sr_headline),
            r.mean_bit_accuracy.map(fmt).unwrap_or_default(),
            fmt(r.mean_ssim),
            fmt(r.mean_psnr),
        ];
        rec.extend(r.sr_by_threshold.iter().map(|v| v.map(fmt).unwrap_or_default()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub summary_csv: PathBuf,
    pub plots: Vec<PathBuf>,
    pub rows: Vec<SummaryRow>,
}

/// Writes `summary.csv` and one `sr_<codec>.png` per codec into `out_dir`.
pub fn emit_report(
    records: &[ResultRecord],
    rule: &DetectionRule,
    out_dir: &Path,
    external: &[ExternalRow],
) -> Result<ReportFiles> {
    rule.validate()?;
    fs::create_dir_all(out_dir)?;
    let summary_csv = out_dir.join("summary.csv");
    let rows = write_summary_csv(records, rule, &summary_csv, external)?;
    let mut codecs: Vec<&str> = Vec::new();
    for r in &rows {
        if !codecs.contains(&r.codec.as_str()) {
            codecs.push(&r.codec);
        }
    }
    let mut plots = Vec::new();
    for codec in codecs {
        let series: Vec<&SummaryRow> = rows.iter().filter(|r| r.codec == codec).collect();
        let path = out_dir.join(format!("sr_{}.png", codec.replace(|c: char| !c.is_ascii_alphanumeric(), "_")));
        plot_codec(codec, &series, rule, &path)?;
        plots.push(path);
    }
    Ok(ReportFiles {
        summary_csv,
        plots,
        rows,
    })
}

fn plot_codec(codec: &str, series: &[&SummaryRow], rule: &DetectionRule, path: &Path) -> Result<()> {
    let legend_rows = series.len().div_ceil(3) as i64;
    let (width, height) = (1000i64, 300 + 14 * legend_rows);
    let mut canvas = Canvas::new(width as u32, height as u32);
    canvas.text(10, 8, &format!("codec: {codec}"), [0, 0, 0]);

    let t_min = rule.thresholds.iter().copied().fold(f64::INFINITY, f64::min);
    let t_max = rule.thresholds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sr = Panel {
        x0: 60,
        y0: 50,
        width: 360,
        height: 200,
        x_range: (t_min, t_max.max(t_min + 1e-6)),
        y_range: (0.0, 1.0),
    };
    sr.frame(&mut canvas, "success rate vs threshold", &[0.0, 0.25, 0.5, 0.75, 1.0]);
    canvas.text(sr.x0 - 10, sr.y0 + sr.height + 6, &format!("{t_min}"), [0, 0, 0]);
    canvas.text(sr.x0 + sr.width - 20, sr.y0 + sr.height + 6, &format!("{t_max}"), [0, 0, 0]);
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<(i64, i64)> = rule
            .thresholds
            .iter()
            .zip(&s.sr_by_threshold)
            .filter_map(|(&t, v)| v.map(|v| sr.map(t, v)))
            .collect();
        for w in points.windows(2) {
            canvas.line(w[0], w[1], color);
        }
        for &(x, y) in &points {
            canvas.rect(x - 2, y - 2, x + 2, y + 2, color);
        }
    }

    let psnr_max = series
        .iter()
        .map(|s| s.mean_psnr)
        .filter(|p| p.is_finite())
        .fold(40.0f64, f64::max)
        * 1.1;
    let bars = |canvas: &mut Canvas, panel: &Panel, values: &[f64]| {
        let n = values.len().max(1) as i64;
        let slot = panel.width / n;
        for (k, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                continue;
            }
            let (_, top) = panel.map(0.0, v);
            let x = panel.x0 + k as i64 * slot + slot / 6;
            canvas.rect(x, top, x + slot * 2 / 3, panel.y0 + panel.height - 1, PALETTE[k % PALETTE.len()]);
        }
    };
    let psnr = Panel {
        x0: 500,
        y0: 50,
        width: 200,
        height: 200,
        x_range: (0.0, 1.0),
        y_range: (0.0, psnr_max),
    };
    psnr.frame(&mut canvas, "mean psnr (db)", &[0.0, psnr_max / 2.0, psnr_max]);
    bars(&mut canvas, &psnr, &series.iter().map(|s| s.mean_psnr).collect::<Vec<_>>());
    let ssim = Panel {
        x0: 770,
        y0: 50,
        width: 200,
        height: 200,
        x_range: (0.0, 1.0),
        y_range: (0.0, 1.0),
    };
    ssim.frame(&mut canvas, "mean ssim", &[0.0, 0.5, 1.0]);
    bars(&mut canvas, &ssim, &series.iter().map(|s| s.mean_ssim).collect::<Vec<_>>());

    for (k, s) in series.iter().enumerate() {
        let (row, col) = (k as i64 / 3, k as i64 % 3);
        let (x, y) = (20 + col * 330, 285 + row * 14);
        canvas.rect(x, y, x + 8, y + 6, PALETTE[k % PALETTE.len()]);
        canvas.text(x + 14, y, &format!("{} {}", s.attack, s.stage), [0, 0, 0]);
    }
    canvas.save(path)
}

/// Success rate of plain accuracies; re-exported for report consumers.
pub fn sr(accuracies: &[f64], mode: AttackMode, threshold: f64) -> Result<f64> {
    Ok(success_rate(accuracies, mode, threshold)?)
}
