//! CSV and JSON artifacts.

use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::solution::SnapshotRow;

/// Formats like C's `%.17g`.
pub fn fmt_g17(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    let sci = format!("{:.16e}", v);
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..17).contains(&exp) {
        let decimals = (16 - exp).max(0) as usize;
        strip_zeros(format!("{:.*}", decimals, v))
    } else {
        let m = strip_zeros(mant.to_string());
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    }
}

fn strip_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    let t = s.trim_end_matches('0');
    t.trim_end_matches('.').to_string()
}

/// Maturity series header: `t, M_1..M_n, M, u_1..u_n, U`.
pub fn maturity_header(follicles: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((1..=follicles).map(|f| format!("M_{f}")));
    h.push("M".into());
    h.extend((1..=follicles).map(|f| format!("u_{f}")));
    h.push("U".into());
    h
}

/// One maturity series row.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesRow {
    pub t: f64,
    pub m_f: Vec<f64>,
    pub u: Vec<f64>,
    pub big_u: f64,
}

pub fn write_maturity_csv(path: &Path, follicles: usize, rows: &[SeriesRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(maturity_header(follicles))?;
    for r in rows {
        let mut rec = vec![fmt_g17(r.t)];
        rec.extend(r.m_f.iter().map(|&v| fmt_g17(v)));
        rec.push(fmt_g17(r.m_f.iter().sum()));
        rec.extend(r.u.iter().map(|&v| fmt_g17(v)));
        rec.push(fmt_g17(r.big_u));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_snapshot_csv(path: &Path, t: f64, rows: &[SnapshotRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "x", "y", "component", "value"])?;
    let ts = fmt_g17(t);
    for (c, x, y, v) in rows {
        w.write_record([ts.clone(), fmt_g17(*x), fmt_g17(*y), c.label(), fmt_g17(*v)])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes any table of floats with the given header.
pub fn write_table_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|&v| fmt_g17(v)))?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g17_matches_printf() {
        // Reference strings from printf("%.17g").
        let cases = [
            (0.1, "0.10000000000000001"),
            (1.0, "1"),
            (-2.5, "-2.5"),
            (1e-5, "1.0000000000000001e-05"),
            (1e17, "1e+17"),
            (123456789.0, "123456789"),
            (0.0001, "0.0001"),
            (1.0 / 3.0, "0.33333333333333331"),
            (6.02214076e23, "6.0221407599999999e+23"),
            (1e100, "1e+100"),
            (1e16, "10000000000000000"),
            (12345678901234567.0, "12345678901234568"),
            (0.00012345, "0.00012344999999999999"),
        ];
        for (v, s) in cases {
            assert_eq!(fmt_g17(v), s, "value {v}");
        }
        assert_eq!(fmt_g17(0.0), "0");
        assert_eq!(fmt_g17(f64::NAN), "nan");
    }

    #[test]
    fn header_layout() {
        assert_eq!(
            maturity_header(2),
            ["t", "M_1", "M_2", "M", "u_1", "u_2", "U"]
        );
    }
}
