//! Append-only `metrics.jsonl` files and SVG line charts of them.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub struct MetricsWriter {
    file: File,
    last_iter: Option<u64>,
}

impl MetricsWriter {
    /// Open `path` for appending. The iteration counter continues from the
    /// last record already in the file.
    pub fn open(path: &Path) -> Result<Self> {
        let last_iter = if path.exists() {
            read_metrics(path)?.iter().rev().find_map(|r| r.get("iter").and_then(|v| v.as_u64()))
        } else {
            None
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file, last_iter })
    }

    /// Append one record. Records with an `iter` field must not go back in
    /// time.
    pub fn write<T: Serialize>(&mut self, rec: &T) -> Result<()> {
        let v = serde_json::to_value(rec)?;
        if let Some(it) = v.get("iter").and_then(|v| v.as_u64()) {
            if self.last_iter.is_some_and(|last| it < last) {
                return Err(Error::InvalidArgument(format!(
                    "metrics iteration went backwards: {} after {}",
                    it,
                    self.last_iter.unwrap()
                )));
            }
            self.last_iter = Some(it);
        }
        writeln!(self.file, "{}", serde_json::to_string(&v)?)?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<serde_json::Value>> {
    let f = File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// `(iter, value)` pairs of every numeric field except `iter`, in order of
/// first appearance.
pub fn series(records: &[serde_json::Value]) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut out: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let Some(obj) = r.as_object() else { continue };
        let x = obj.get("iter").and_then(|v| v.as_f64()).unwrap_or(i as f64);
        for (k, v) in obj {
            let Some(y) = v.as_f64() else { continue };
            if k == "iter" || !y.is_finite() {
                continue;
            }
            match out.iter_mut().find(|(n, _)| n == k) {
                Some((_, pts)) => pts.push((x, y)),
                None => out.push((k.clone(), vec![(x, y)])),
            }
        }
    }
    out
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

/// Single-series line chart.
pub fn line_chart_svg(title: &str, points: &[(f64, f64)]) -> String {
    let (x0, x1) = bounds(points.iter().map(|p| p.0));
    let (y0, y1) = bounds(points.iter().map(|p| p.1));
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    for (v, y) in [(y0, H - PAD), (y1, PAD)] {
        let _ = writeln!(s, r#"<text x="{}" y="{y}" text-anchor="end">{}</text>"#, PAD - 4.0, fmt_num(v));
    }
    for (v, x) in [(x0, PAD), (x1, W - PAD)] {
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, H - PAD + 16.0, fmt_num(v));
    }
    let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
    let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#, path.join(" "));
    s.push_str("</svg>\n");
    s
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-300 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn fmt_num(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e5) {
        format!("{v:.2e}")
    } else {
        format!("{v:.4}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::open(&p).unwrap();
        w.write(&serde_json::json!({"iter": 0, "loss": 2.0})).unwrap();
        w.write(&serde_json::json!({"iter": 1, "loss": 1.0, "r1": 0.5})).unwrap();
        assert!(w.write(&serde_json::json!({"iter": 0})).is_err());
        drop(w);
        let mut w = MetricsWriter::open(&p).unwrap();
        assert!(w.write(&serde_json::json!({"iter": 0})).is_err());
        w.write(&serde_json::json!({"event": "done"})).unwrap();
        let recs = read_metrics(&p).unwrap();
        assert_eq!(recs.len(), 3);
        let s = series(&recs);
        assert_eq!(s[0], ("loss".to_string(), vec![(0.0, 2.0), (1.0, 1.0)]));
        assert_eq!(s[1].1, vec![(1.0, 0.5)]);
    }

    #[test]
    fn chart_is_svg() {
        let svg = line_chart_svg("loss <a>", &[(0.0, 1.0), (1.0, 0.5), (2.0, 0.25)]);
        assert!(svg.starts_with("<svg") && svg.contains("polyline") && svg.contains("&lt;a&gt;"));
        assert!(line_chart_svg("flat", &[(0.0, 1.0)]).contains("polyline"));
    }
}
