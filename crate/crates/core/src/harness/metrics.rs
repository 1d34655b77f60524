//! Per-iteration metrics rows and their CSV encoding.

use std::fmt::Write as _;

use crate::controller::{Attribute, PerAttribute};
use crate::error::{Error, Result};
use crate::fixed_point::FixedPointFormat;

pub const CSV_HEADER: &str = "iter,loss,test_error_pct,lr,w_il,w_fl,a_il,a_fl,g_il,g_fl,w_r,w_e,a_r,a_e,g_r,g_e";

/// Overflow rate and average error of one finished window, in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowStats {
    pub overflow_rate: f64,
    pub avg_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub loss: f64,
    pub test_error_pct: Option<f64>,
    pub lr: f64,
    /// Formats used during this iteration; absent for the float baseline.
    pub formats: Option<PerAttribute<FixedPointFormat>>,
    /// Statistics of this iteration's windows; per attribute, absent when
    /// the window was empty or the run is unquantized.
    pub windows: PerAttribute<Option<WindowStats>>,
}

impl MetricsRow {
    pub fn total_bits(&self, a: Attribute) -> Option<u32> {
        self.formats.map(|f| f[a].total_bits())
    }

    pub fn to_csv_line(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        write!(s, "{},{},{},{}", self.iter, self.loss, opt(self.test_error_pct), self.lr).unwrap();
        for a in Attribute::ALL {
            match self.formats {
                Some(f) => write!(s, ",{},{}", f[a].il(), f[a].fl()).unwrap(),
                None => s.push_str(",,"),
            }
        }
        for a in Attribute::ALL {
            let w = self.windows[a];
            write!(s, ",{},{}", opt(w.map(|w| w.overflow_rate)), opt(w.map(|w| w.avg_error))).unwrap();
        }
        s
    }
}

/// Renders a full CSV document with header and LF line endings.
pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

fn field<T: std::str::FromStr>(raw: &str, line: usize, name: &str) -> Result<Option<T>> {
    if raw.is_empty() {
        return Ok(None);
    }
    raw.parse()
        .map(Some)
        .map_err(|_| Error::Config(format!("metrics line {line}: bad value {raw:?} for {name}")))
}

fn required<T: std::str::FromStr>(raw: &str, line: usize, name: &str) -> Result<T> {
    field(raw, line, name)?.ok_or_else(|| Error::Config(format!("metrics line {line}: missing {name}")))
}

/// Parses a metrics CSV produced by [`to_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == CSV_HEADER => {}
        _ => return Err(Error::Config("metrics CSV: missing or unexpected header".into())),
    }
    let names: Vec<&str> = CSV_HEADER.split(',').collect();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let line_no = n + 2;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.trim_end().split(',').collect();
        if cols.len() != names.len() {
            return Err(Error::Config(format!(
                "metrics line {line_no}: expected {} fields, found {}",
                names.len(),
                cols.len()
            )));
        }
        let mut formats = PerAttribute::splat(None);
        let mut windows = PerAttribute::splat(None);
        for (k, a) in Attribute::ALL.into_iter().enumerate() {
            let il: Option<u32> = field(cols[4 + 2 * k], line_no, names[4 + 2 * k])?;
            let fl: Option<u32> = field(cols[5 + 2 * k], line_no, names[5 + 2 * k])?;
            formats[a] = match (il, fl) {
                (Some(il), Some(fl)) => Some(
                    FixedPointFormat::new(il, fl)
                        .map_err(|e| Error::Config(format!("metrics line {line_no}: {e}")))?,
                ),
                (None, None) => None,
                _ => return Err(Error::Config(format!("metrics line {line_no}: half a format for {a}"))),
            };
            let r: Option<f64> = field(cols[10 + 2 * k], line_no, names[10 + 2 * k])?;
            let e: Option<f64> = field(cols[11 + 2 * k], line_no, names[11 + 2 * k])?;
            windows[a] = match (r, e) {
                (Some(overflow_rate), Some(avg_error)) => Some(WindowStats { overflow_rate, avg_error }),
                _ => None,
            };
        }
        let formats = match (formats.weights, formats.activations, formats.gradients) {
            (Some(w), Some(a), Some(g)) => Some(PerAttribute { weights: w, activations: a, gradients: g }),
            (None, None, None) => None,
            _ => return Err(Error::Config(format!("metrics line {line_no}: incomplete formats"))),
        };
        rows.push(MetricsRow {
            iter: required(cols[0], line_no, "iter")?,
            loss: required(cols[1], line_no, "loss")?,
            test_error_pct: field(cols[2], line_no, "test_error_pct")?,
            lr: required(cols[3], line_no, "lr")?,
            formats,
            windows,
        });
    }
    Ok(rows)
}

/// Trailing mean over at most `window` samples, truncated at the start.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1, "window must be positive");
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for (i, &v) in series.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= series[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Trailing moving average of `IL + FL` per attribute over the rows that
/// carry formats.
pub fn moving_average_bitwidths(rows: &[MetricsRow], window: usize) -> PerAttribute<Vec<f64>> {
    PerAttribute::from_fn(|a| {
        let series: Vec<f64> = rows.iter().filter_map(|r| r.total_bits(a)).map(f64::from).collect();
        moving_average(&series, window)
    })
}

/// Mean `IL + FL` per attribute over the whole run.
pub fn mean_bitwidths(rows: &[MetricsRow]) -> Option<PerAttribute<f64>> {
    let quantized: Vec<_> = rows.iter().filter_map(|r| r.formats).collect();
    if quantized.is_empty() {
        return None;
    }
    let n = quantized.len() as f64;
    Some(PerAttribute::from_fn(|a| {
        quantized.iter().map(|f| f[a].total_bits() as f64).sum::<f64>() / n
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_examples() {
        assert_eq!(moving_average(&[10.0, 12.0], 2), vec![10.0, 11.0]);
        assert_eq!(moving_average(&[3.0, 1.0, 4.0], 1), vec![3.0, 1.0, 4.0]);
        assert_eq!(moving_average(&[5.0; 6], 4), vec![5.0; 6]);
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.0, 1.5, 2.5, 3.5]);
    }

    fn row(iter: usize, quantized: bool) -> MetricsRow {
        let f = FixedPointFormat::new(2, 14).unwrap();
        MetricsRow {
            iter,
            loss: 2.25,
            test_error_pct: iter.is_multiple_of(2).then_some(12.5),
            lr: 0.01,
            formats: quantized.then(|| PerAttribute::splat(f)),
            windows: PerAttribute::splat(quantized.then_some(WindowStats { overflow_rate: 0.0, avg_error: 0.125 })),
        }
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![row(0, true), row(1, true), row(2, false)];
        let text = to_csv(&rows);
        assert!(text.starts_with(CSV_HEADER));
        assert!(text.lines().nth(2).unwrap().starts_with("1,2.25,,0.01,2,14"));
        assert_eq!(text.lines().nth(3).unwrap(), "2,2.25,12.5,0.01,,,,,,,,,,,,");
        assert_eq!(parse_csv(&text).unwrap(), rows);
    }

    #[test]
    fn csv_rejects_malformed_input() {
        assert!(parse_csv("a,b\n").is_err());
        assert!(parse_csv(&format!("{CSV_HEADER}\n1,2\n")).is_err());
        assert!(parse_csv(&format!("{CSV_HEADER}\nx,1,,0.1,,,,,,,,,,,,\n")).is_err());
        assert_eq!(parse_csv(&format!("{CSV_HEADER}\n")).unwrap(), vec![]);
    }

    #[test]
    fn mean_bits() {
        let rows = vec![row(0, true), row(1, false)];
        assert_eq!(mean_bitwidths(&rows).unwrap().weights, 16.0);
        assert!(mean_bitwidths(&[row(0, false)]).is_none());
        assert_eq!(moving_average_bitwidths(&rows, 3).gradients, vec![16.0]);
    }
}
