//! Metrics report CSV: fixed per-image header and a `#` footer of aggregates.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sr_distill_core::metrics::{MetricRow, MetricsReport};

use crate::error::{Result, ToolError};

pub const HEADER: &str = "id,psnr_y,ssim_y,perceptual,denoiser_evals";

pub fn render(report: &MetricsReport) -> String {
    let mut s = String::from(HEADER);
    s.push('\n');
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.id, r.psnr_y, r.ssim_y, r.perceptual, r.denoiser_evals
        );
    }
    for (name, a) in [
        ("psnr_y", &report.psnr_y),
        ("ssim_y", &report.ssim_y),
        ("perceptual", &report.perceptual),
        ("denoiser_evals", &report.denoiser_evals),
    ] {
        let _ = writeln!(s, "# {name}_mean,{}", a.mean);
        let _ = writeln!(s, "# {name}_std,{}", a.std);
    }
    if let Some(ffd) = report.ffd {
        let _ = writeln!(s, "# ffd,{ffd}");
    }
    s
}

pub fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    fs::write(path, render(report)).map_err(|e| ToolError::io(path, e))
}

/// Per-image rows of a report file; the footer is ignored.
pub fn read_rows(path: &Path) -> Result<Vec<MetricRow>> {
    let text = fs::read_to_string(path).map_err(|e| ToolError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(ToolError::format(path, "unexpected metrics header"));
    }
    let bad = |line: &str| ToolError::format(path, format!("malformed row `{line}`"));
    lines
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(line));
            }
            Ok(MetricRow {
                id: f[0].to_string(),
                psnr_y: f[1].parse().map_err(|_| bad(line))?,
                ssim_y: f[2].parse().map_err(|_| bad(line))?,
                perceptual: f[3].parse().map_err(|_| bad(line))?,
                denoiser_evals: f[4].parse().map_err(|_| bad(line))?,
            })
        })
        .collect()
}

/// `b - a` per image, matched by id.
pub fn paired_deltas(a: &MetricsReport, b: &MetricsReport) -> Result<String> {
    let mut s = String::from("id,d_psnr_y,d_ssim_y,d_perceptual\n");
    for (ra, rb) in a.rows.iter().zip(&b.rows) {
        if ra.id != rb.id {
            return Err(ToolError::Validation(format!(
                "row ids differ: {} vs {}",
                ra.id, rb.id
            )));
        }
        let _ = writeln!(
            s,
            "{},{},{},{}",
            ra.id,
            rb.psnr_y - ra.psnr_y,
            rb.ssim_y - ra.ssim_y,
            rb.perceptual - ra.perceptual
        );
    }
    let _ = writeln!(s, "# d_psnr_y_mean,{}", b.psnr_y.mean - a.psnr_y.mean);
    let _ = writeln!(s, "# d_ssim_y_mean,{}", b.ssim_y.mean - a.ssim_y.mean);
    let _ = writeln!(
        s,
        "# d_perceptual_mean,{}",
        b.perceptual.mean - a.perceptual.mean
    );
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> MetricsReport {
        MetricsReport::from_rows(vec![
            MetricRow {
                id: "00001".into(),
                psnr_y: 27.25,
                ssim_y: 0.8,
                perceptual: 0.01,
                denoiser_evals: 1,
            },
            MetricRow {
                id: "00002".into(),
                psnr_y: 29.5,
                ssim_y: 0.7,
                perceptual: 0.02,
                denoiser_evals: 1,
            },
        ])
    }

    #[test]
    fn header_rows_and_footer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let r = report();
        write_report(&path, &r).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("id,psnr_y,ssim_y,perceptual,denoiser_evals\n"));
        assert!(text.contains("# psnr_y_mean,28.375\n"));
        assert_eq!(read_rows(&path).unwrap(), r.rows);
    }

    #[test]
    fn deltas_require_matching_ids() {
        let a = report();
        let mut b = report();
        b.rows[0].psnr_y += 1.0;
        let b = MetricsReport::from_rows(b.rows);
        assert!(paired_deltas(&a, &b).unwrap().contains("00001,1,0,0\n"));
        let mut c = report();
        c.rows[1].id = "x".into();
        assert!(paired_deltas(&a, &c).is_err());
    }
}
