//! Line-delimited `key=value` telemetry.
//!
//! Each record is one ASCII line of space-separated pairs in a fixed key
//! order: `step`, `l_rec`, `l_ar_proxy`, `wgf_score_norm`, `eval_ar_loss`,
//! `wall_ms`. Absent optional fields are omitted. Floats use the shortest
//! representation that parses back to the same value.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub l_rec: Option<f64>,
    pub l_ar_proxy: Option<f64>,
    pub wgf_score_norm: Option<f64>,
    pub eval_ar_loss: Option<f64>,
    pub wall_ms: f64,
}

impl MetricsRecord {
    /// The record without its timing field, for replay comparisons.
    pub fn untimed(&self) -> Self {
        Self { wall_ms: 0.0, ..self.clone() }
    }

    pub fn to_line(&self) -> String {
        let mut pairs = vec![format!("step={}", self.step)];
        let opt = [
            ("l_rec", self.l_rec),
            ("l_ar_proxy", self.l_ar_proxy),
            ("wgf_score_norm", self.wgf_score_norm),
            ("eval_ar_loss", self.eval_ar_loss),
        ];
        for (k, v) in opt {
            if let Some(v) = v {
                pairs.push(format!("{k}={v}"));
            }
        }
        pairs.push(format!("wall_ms={}", self.wall_ms));
        pairs.join(" ")
    }

    pub fn parse(line: &str, line_no: usize) -> Result<Self> {
        let bad = |detail: String| Error::Metrics { line: line_no, detail };
        let mut rec = Self::default();
        let (mut have_step, mut have_wall) = (false, false);
        for pair in line.split_ascii_whitespace() {
            let (k, v) = pair.split_once('=').ok_or_else(|| bad(format!("malformed pair {pair:?}")))?;
            let float = || v.parse::<f64>().map_err(|e| bad(format!("{k}: {e}")));
            match k {
                "step" => {
                    rec.step = v.parse().map_err(|e| bad(format!("step: {e}")))?;
                    have_step = true;
                }
                "l_rec" => rec.l_rec = Some(float()?),
                "l_ar_proxy" => rec.l_ar_proxy = Some(float()?),
                "wgf_score_norm" => rec.wgf_score_norm = Some(float()?),
                "eval_ar_loss" => rec.eval_ar_loss = Some(float()?),
                "wall_ms" => {
                    rec.wall_ms = float()?;
                    have_wall = true;
                }
                other => return Err(bad(format!("unknown field {other:?}"))),
            }
        }
        if !have_step || !have_wall {
            return Err(bad("step and wall_ms are required".into()));
        }
        Ok(rec)
    }
}

pub fn write_metrics(record: &MetricsRecord, sink: &mut impl Write) -> std::io::Result<()> {
    writeln!(sink, "{}", record.to_line())
}

pub fn read_metrics(source: impl BufRead) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line.map_err(|e| Error::Metrics { line: i + 1, detail: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(MetricsRecord::parse(&line, i + 1)?);
    }
    Ok(out)
}

/// Writes ordered `key=value` pairs as one line; used for report tables.
pub fn write_pairs(pairs: &[(&str, String)], sink: &mut impl Write) -> std::io::Result<()> {
    let line: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
    writeln!(sink, "{}", line.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(step: u64, eval: bool) -> MetricsRecord {
        MetricsRecord {
            step,
            l_rec: Some(0.1 + step as f64 / 3.0),
            l_ar_proxy: Some(4.158883083359672),
            wgf_score_norm: (step > 0).then_some(1e-7 * step as f64),
            eval_ar_loss: eval.then_some(2.5),
            wall_ms: 12.75,
        }
    }

    #[test]
    fn round_trip_three_records() {
        let recs = [sample(0, false), sample(1, true), sample(2, false)];
        let mut buf = Vec::new();
        for r in &recs {
            write_metrics(r, &mut buf).unwrap();
        }
        assert!(buf.is_ascii());
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(read_metrics(text.as_bytes()).unwrap(), recs);
    }

    #[test]
    fn eval_field_absent_on_plain_steps() {
        assert!(!sample(3, false).to_line().contains("eval_ar_loss"));
        assert!(sample(3, true).to_line().contains("eval_ar_loss=2.5"));
    }

    #[test]
    fn rejects_unknown_and_malformed_fields() {
        assert!(MetricsRecord::parse("step=1 wall_ms=2 bogus=3", 1).is_err());
        assert!(MetricsRecord::parse("step=1 wall_ms", 1).is_err());
        assert!(MetricsRecord::parse("l_rec=1", 1).is_err());
    }
}
