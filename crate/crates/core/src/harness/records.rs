//! Per-round experiment records and their CSV / JSON-lines encodings.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER: &str = "rep,round,instance,annotator,label,accepted,rmse,regret,discarded,payment";

/// One labeling round. Round 0 is the baseline after the seed pool and
/// carries no instance, annotator, label or acceptance.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub rep: usize,
    pub round: usize,
    pub instance: Option<usize>,
    pub annotator: Option<usize>,
    pub label: Option<f64>,
    pub accepted: Option<bool>,
    pub rmse: f64,
    pub regret: f64,
    pub discarded: u64,
    pub payment: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordFormat {
    #[default]
    Csv,
    Jsonl,
}

impl FromStr for RecordFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(RecordFormat::Csv),
            "jsonl" | "json-lines" => Ok(RecordFormat::Jsonl),
            _ => Err(Error::invalid(format!("unknown record format {s:?}"))),
        }
    }
}

/// `x` with 9 significant digits, like C's `%.9g`.
pub fn format_float(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (8 - exp) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn opt<T>(v: Option<T>, f: impl Fn(T) -> String, none: &str) -> String {
    v.map_or_else(|| none.to_string(), f)
}

fn json_float(x: f64) -> String {
    if x.is_finite() {
        format_float(x)
    } else {
        "null".into()
    }
}

pub fn csv_line(r: &RoundRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.rep,
        r.round,
        opt(r.instance, |v| v.to_string(), ""),
        opt(r.annotator, |v| v.to_string(), ""),
        opt(r.label, format_float, ""),
        opt(r.accepted, |v| u8::from(v).to_string(), ""),
        format_float(r.rmse),
        format_float(r.regret),
        r.discarded,
        format_float(r.payment),
    )
}

pub fn json_line(r: &RoundRecord) -> String {
    let mut s = String::from("{");
    write!(
        s,
        "\"rep\":{},\"round\":{},\"instance\":{},\"annotator\":{},\"label\":{},\"accepted\":{},",
        r.rep,
        r.round,
        opt(r.instance, |v| v.to_string(), "null"),
        opt(r.annotator, |v| v.to_string(), "null"),
        opt(r.label, json_float, "null"),
        opt(r.accepted, |v| v.to_string(), "null"),
    )
    .expect("writing to a string");
    write!(
        s,
        "\"rmse\":{},\"regret\":{},\"discarded\":{},\"payment\":{}}}",
        json_float(r.rmse),
        json_float(r.regret),
        r.discarded,
        json_float(r.payment),
    )
    .expect("writing to a string");
    s
}

pub fn write_records<W: Write>(records: &[RoundRecord], format: RecordFormat, mut out: W) -> std::io::Result<()> {
    if format == RecordFormat::Csv {
        writeln!(out, "{HEADER}")?;
    }
    for r in records {
        let line = match format {
            RecordFormat::Csv => csv_line(r),
            RecordFormat::Jsonl => json_line(r),
        };
        writeln!(out, "{line}")?;
    }
    out.flush()
}

pub fn emit_records(records: &[RoundRecord], path: impl AsRef<Path>, format: RecordFormat) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_records(records, format, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}
