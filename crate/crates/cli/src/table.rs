//! CSV reading and writing. Every file has a header row, LF line endings and
//! floats with 17 significant digits, enough to round-trip any `f64`.

use std::fs;
use std::path::Path;

use csv::{ReaderBuilder, Terminator, WriterBuilder};

use crate::failure::{io_at, Failure, Outcome};

/// `%.17g`: fixed notation for moderate exponents, scientific otherwise,
/// trailing zeros removed.
pub fn fmt_f64(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..17).contains(&exp) {
        let decimals = (16 - exp) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa.to_string()), exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

/// Rows rendered in memory; written only once a command has fully succeeded.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> Outcome<Vec<u8>> {
        let mut w = WriterBuilder::new().terminator(Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| Failure::Runtime(e.to_string()))
    }
}

/// Parsed CSV with named columns.
pub struct Records {
    pub path: String,
    header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Records {
    pub fn read(path: &Path) -> Outcome<Self> {
        let bytes = io_at(path, fs::read(path))?;
        let mut r = ReaderBuilder::new().has_headers(true).from_reader(bytes.as_slice());
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<Result<Vec<Vec<String>>, _>>()?;
        Ok(Self { path: path.display().to_string(), header, rows })
    }

    pub fn column(&self, name: &str) -> Outcome<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Failure::Validation(format!("{}: missing column {name:?}", self.path)))
    }

    pub fn parse<T: std::str::FromStr>(&self, row: usize, col: usize) -> Outcome<T> {
        let cell = &self.rows[row][col];
        cell.parse().map_err(|_| {
            Failure::Validation(format!(
                "{}: row {}: cannot parse {cell:?} in column {:?}",
                self.path,
                row + 2,
                self.header[col]
            ))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_significant_digits() {
        assert_eq!(fmt_f64(0.5), "0.5");
        assert_eq!(fmt_f64(2.0), "2");
        assert_eq!(fmt_f64(0.1), "0.10000000000000001");
        assert_eq!(fmt_f64(1.0 / 3.0), "0.33333333333333331");
        assert_eq!(fmt_f64(1e-7), "9.9999999999999995e-08");
        assert_eq!(fmt_f64(1e20), "1e+20");
        assert_eq!(fmt_f64(-1234.5), "-1234.5");
        assert_eq!(fmt_f64(0.0), "0");
    }

    #[test]
    fn formatting_round_trips() {
        let mut x = 0.123_456_789_f64;
        for _ in 0..2000 {
            x = (x * 7.77 + 0.31).fract() * 10f64.powi(((x * 1e6) as i32 % 40) - 20);
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
        }
    }

    #[test]
    fn csv_quotes_commas_and_uses_lf() {
        let mut t = Table::new(["name", "x"]);
        t.push(vec!["shrink_perturb(0.4,0.1)".into(), fmt_f64(1.5)]);
        let bytes = t.to_bytes().unwrap();
        assert_eq!(String::from_utf8(bytes).unwrap(), "name,x\n\"shrink_perturb(0.4,0.1)\",1.5\n");
    }
}
