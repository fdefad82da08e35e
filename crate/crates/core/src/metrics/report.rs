//! Metric report files: one `key=value` record per line, `#` comment lines,
//! and a summary table of metric x (variant, top-k) written as comments.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    /// Number of evaluated predicted frames, shown as a subscript.
    pub frame_count: Option<usize>,
    pub samples: usize,
    pub extractor: String,
    pub config_hash: String,
    pub variant: String,
    pub top_k: Option<usize>,
}

fn token(s: &str) -> String {
    let t: String = s.chars().map(|c| if c.is_whitespace() || c == '=' { '_' } else { c }).collect();
    if t.is_empty() {
        "-".into()
    } else {
        t
    }
}

impl MetricReport {
    pub fn new(metric: &str, value: f64) -> Self {
        Self {
            metric: metric.into(),
            value,
            frame_count: None,
            samples: 0,
            extractor: "-".into(),
            config_hash: "-".into(),
            variant: "-".into(),
            top_k: None,
        }
    }

    /// `FVD_14` style label.
    pub fn label(&self) -> String {
        match self.frame_count {
            Some(n) => format!("{}_{n}", self.metric),
            None => self.metric.clone(),
        }
    }

    pub fn to_line(&self) -> String {
        let opt = |v: Option<usize>| v.map(|n| n.to_string()).unwrap_or_else(|| "-".into());
        format!(
            "metric={} value={} frame_count={} samples={} extractor={} config_hash={} variant={} top_k={}",
            token(&self.metric),
            self.value,
            opt(self.frame_count),
            self.samples,
            token(&self.extractor),
            token(&self.config_hash),
            token(&self.variant),
            opt(self.top_k),
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = |why: String| Error::Config(format!("report line {line:?}: {why}"));
        let mut r = MetricReport::new("", f64::NAN);
        let mut seen_metric = false;
        let mut seen_value = false;
        let opt = |v: &str| -> Result<Option<usize>> {
            if v == "-" {
                Ok(None)
            } else {
                v.parse().map(Some).map_err(|e| bad(format!("{e}")))
            }
        };
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| bad(format!("field {field:?} lacks '='")))?;
            match k {
                "metric" => {
                    r.metric = v.into();
                    seen_metric = true;
                }
                "value" => {
                    r.value = v.parse().map_err(|e| bad(format!("value: {e}")))?;
                    seen_value = true;
                }
                "frame_count" => r.frame_count = opt(v)?,
                "samples" => r.samples = v.parse().map_err(|e| bad(format!("samples: {e}")))?,
                "extractor" => r.extractor = v.into(),
                "config_hash" => r.config_hash = v.into(),
                "variant" => r.variant = v.into(),
                "top_k" => r.top_k = opt(v)?,
                other => return Err(bad(format!("unknown key {other}"))),
            }
        }
        if !seen_metric || !seen_value {
            return Err(bad("metric and value are required".into()));
        }
        Ok(r)
    }
}

/// Renders records, then a summary table, after the header comment lines.
pub fn render_report(header: &[String], reports: &[MetricReport]) -> String {
    let mut out = String::new();
    for h in header {
        let _ = writeln!(out, "# {h}");
    }
    for r in reports {
        let _ = writeln!(out, "{}", r.to_line());
    }
    let mut columns: Vec<String> = Vec::new();
    let mut rows: Vec<(String, Option<usize>)> = Vec::new();
    for r in reports {
        if !columns.contains(&r.label()) {
            columns.push(r.label());
        }
        let key = (r.variant.clone(), r.top_k);
        if !rows.contains(&key) {
            rows.push(key);
        }
    }
    let _ = writeln!(out, "# summary");
    let _ = writeln!(out, "# {:<16} {:>6} {}", "variant", "top_k", columns.iter().map(|c| format!("{c:>12}")).collect::<String>());
    for (variant, k) in &rows {
        let cells: String = columns
            .iter()
            .map(|c| {
                reports
                    .iter()
                    .find(|r| &r.variant == variant && r.top_k == *k && &r.label() == c)
                    .map(|r| format!("{:>12.4}", r.value))
                    .unwrap_or_else(|| format!("{:>12}", "-"))
            })
            .collect();
        let k = k.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
        let _ = writeln!(out, "# {variant:<16} {k:>6} {cells}");
    }
    out
}

pub fn parse_report(text: &str) -> Result<Vec<MetricReport>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(MetricReport::parse_line)
        .collect()
}

pub fn write_report(path: &Path, header: &[String], reports: &[MetricReport]) -> Result<()> {
    std::fs::write(path, render_report(header, reports)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_labels() {
        let mut a = MetricReport::new("FVD", 132.16);
        a.frame_count = Some(14);
        a.samples = 8;
        a.extractor = "pooled motion".into();
        a.variant = "ours".into();
        a.top_k = Some(1000);
        assert_eq!(a.label(), "FVD_14");
        let b = MetricReport::new("PSNR", 23.5);
        let text = render_report(&["pooled frames".into()], &[a.clone(), b.clone()]);
        let back = parse_report(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].extractor, "pooled_motion");
        assert_eq!(back[0].top_k, Some(1000));
        assert_eq!(back[0].value, 132.16);
        assert_eq!(back[1], b);
        assert!(text.contains("# summary"));
        assert!(MetricReport::parse_line("value=1").is_err());
        assert!(MetricReport::parse_line("metric=x value=1 colour=red").is_err());
    }
}
