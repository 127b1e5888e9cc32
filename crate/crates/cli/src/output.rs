//! Number formatting, the JSON envelope and atomic file writes.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

/// Version of the output schemas in `schemas/`.
pub const SCHEMA_VERSION: &str = "1.0.0";
/// Default output directory when `--out-dir` is not given.
pub const OUT_DIR_ENV: &str = "LVGLASS_OUT_DIR";

pub const JSON_DIGITS: usize = 17;
pub const CSV_DIGITS: usize = 10;

/// `x` with `digits` significant digits, positional for moderate exponents,
/// trailing zeros removed.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.*e}", digits.saturating_sub(1), x.abs());
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let figures: String = mantissa.chars().filter(|c| *c != '.').collect();
    let sign = if x < 0.0 { "-" } else { "" };
    let body = if (-5..digits as i32).contains(&exp) {
        if exp >= 0 {
            let split = exp as usize + 1;
            let (int, frac) = figures.split_at(split.min(figures.len()));
            let pad = "0".repeat(split.saturating_sub(figures.len()));
            trim_fraction(&format!("{int}{pad}.{frac}"))
        } else {
            trim_fraction(&format!("0.{}{figures}", "0".repeat((-exp - 1) as usize)))
        }
    } else {
        let (lead, rest) = figures.split_at(1);
        format!("{}e{exp}", trim_fraction(&format!("{lead}.{rest}")))
    };
    format!("{sign}{body}")
}

fn trim_fraction(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

/// Pretty JSON with floats at [`JSON_DIGITS`] significant digits.
struct SigFormatter {
    pretty: PrettyFormatter<'static>,
}

impl Formatter for SigFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        w.write_all(format_sig(value, JSON_DIGITS).as_bytes())
    }
    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.pretty.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.pretty.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_object_value(w)
    }
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> serde_json::Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(
        &mut out,
        SigFormatter {
            pretty: PrettyFormatter::new(),
        },
    );
    value.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(out)
}

/// Common wrapper of every JSON artifact.
#[derive(Serialize)]
pub struct Envelope<'a, P: Serialize, R: Serialize> {
    pub schema: String,
    pub schema_version: &'static str,
    pub command: &'a str,
    /// `None` for deterministic commands.
    pub seed: Option<u64>,
    pub params: &'a P,
    pub result: &'a R,
}

impl<'a, P: Serialize, R: Serialize> Envelope<'a, P, R> {
    pub fn new(command: &'a str, seed: Option<u64>, params: &'a P, result: &'a R) -> Self {
        Self {
            schema: format!("lvglass/{command}"),
            schema_version: SCHEMA_VERSION,
            command,
            seed,
            params,
            result,
        }
    }
}

/// CSV text: `#` header lines with the schema, seed and parameters, then the table.
pub fn csv_bytes<P: Serialize>(
    command: &str,
    seed: Option<u64>,
    params: &P,
    columns: &[&str],
    rows: &[Vec<CsvCell>],
) -> Result<Vec<u8>, crate::CliError> {
    let mut out = Vec::new();
    writeln!(out, "# schema: lvglass/{command} {SCHEMA_VERSION}")?;
    if let Some(s) = seed {
        writeln!(out, "# seed: {s}")?;
    }
    if let serde_json::Value::Object(map) = serde_json::to_value(params)? {
        for (k, v) in map {
            let text = match v {
                serde_json::Value::Number(n) => n.as_f64().map_or(n.to_string(), |x| {
                    if n.is_f64() {
                        format_sig(x, JSON_DIGITS)
                    } else {
                        n.to_string()
                    }
                }),
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            writeln!(out, "# {k}: {text}")?;
        }
    }
    let mut w = csv::Writer::from_writer(&mut out);
    w.write_record(columns)?;
    for row in rows {
        w.write_record(row.iter().map(CsvCell::text))?;
    }
    w.flush()?;
    drop(w);
    Ok(out)
}

pub enum CsvCell {
    Real(f64),
    Int(u64),
    Flag(bool),
}

impl CsvCell {
    fn text(&self) -> String {
        match self {
            CsvCell::Real(x) => format_sig(*x, CSV_DIGITS),
            CsvCell::Int(i) => i.to_string(),
            CsvCell::Flag(b) => b.to_string(),
        }
    }
}

/// Writes through a temporary file in the target directory and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(format_sig(0.1, 17), "0.10000000000000001");
        assert_eq!(format_sig(1.0 / 3.0, 10), "0.3333333333");
        assert_eq!(format_sig(-2.5, 17), "-2.5");
        assert_eq!(format_sig(1234.5, 10), "1234.5");
        assert_eq!(format_sig(1e-7, 10), "1e-7");
        assert_eq!(format_sig(6.02e23, 10), "6.02e23");
        assert_eq!(format_sig(0.0, 10), "0");
        assert_eq!(format_sig(99.999999999999, 10), "100");
        assert_eq!(format_sig(1e9, 10), "1000000000");
        assert_eq!(format_sig(1e10, 10), "1e10");
        assert_eq!(format_sig(0.000123, 10), "0.000123");
        for x in [0.1, 1.0 / 7.0, -3.3e-9, 1e300, 2.2250738585072014e-308] {
            assert_eq!(format_sig(x, 17).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn json_uses_fixed_digits() {
        let v = serde_json::json!({"x": 0.1, "y": [1.5, f64::NAN], "n": 3});
        let text = String::from_utf8(to_json_bytes(&v).unwrap()).unwrap();
        assert!(text.contains("0.10000000000000001"));
        assert!(text.contains("null"));
        let back: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(back["n"], 3);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
