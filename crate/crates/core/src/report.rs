//! Report outputs: versioned CSV rows, run metadata, grayscale maps and cost
//! accounting.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::baselines::BaselineEstimate;
use crate::error::{Error, Result};
use crate::numerics::Vector;
use crate::uq::PosteriorEstimate;

pub const SCHEMA_VERSION: u32 = 1;

/// One long-format CSV row. Every row is self-describing so tables can be
/// assembled without joining on file names.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReportRow {
    pub schema: u32,
    pub experiment: String,
    pub method: String,
    pub t: Option<f64>,
    pub seed: u64,
    /// Probe count `S`, when the method uses probes.
    pub probes: Option<usize>,
    /// Replicate, epoch, member or sample index, depending on the metric.
    pub index: Option<usize>,
    pub metric: String,
    /// Empty when the metric is undefined (for example a constant-input correlation).
    pub value: Option<f64>,
}

impl ReportRow {
    pub fn new(experiment: &str, method: &str, seed: u64, metric: &str, value: Option<f64>) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            experiment: experiment.to_string(),
            method: method.to_string(),
            t: None,
            seed,
            probes: None,
            index: None,
            metric: metric.to_string(),
            value,
        }
    }

    pub fn at(mut self, t: f64) -> Self {
        self.t = Some(t);
        self
    }

    pub fn probes(mut self, s: usize) -> Self {
        self.probes = Some(s);
        self
    }

    pub fn index(mut self, i: usize) -> Self {
        self.index = Some(i);
        self
    }
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Non-reproducible run facts (timestamps, wall-clock) live here, apart from
/// the CSVs, as `key = value` lines.
pub fn write_metadata(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for (k, v) in entries {
        writeln!(f, "{k} = {v}")?;
    }
    Ok(())
}

/// Anything that can be drawn as a per-pixel map.
pub trait PixelMap {
    fn pixels(&self) -> &Vector;
}

impl PixelMap for PosteriorEstimate {
    fn pixels(&self) -> &Vector {
        &self.diagonal
    }
}

impl PixelMap for BaselineEstimate {
    fn pixels(&self) -> &Vector {
        &self.per_pixel
    }
}

impl PixelMap for Vector {
    fn pixels(&self) -> &Vector {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Stretch each map over its own range.
    #[default]
    PerFrame,
    /// Use a fixed range shared by several maps.
    Global { lo: f64, hi: f64 },
}

/// Binary 8-bit PGM bytes and the `(lo, hi)` range mapped onto `0..=255`.
/// A degenerate range maps every pixel to 0.
pub fn encode_pgm(values: &[f64], side: usize, normalization: Normalization) -> Result<(Vec<u8>, (f64, f64))> {
    if values.len() != side * side {
        return Err(Error::DimensionMismatch { expected: side * side, actual: values.len() });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("map contains non-finite values".into()));
    }
    let (lo, hi) = match normalization {
        Normalization::PerFrame => values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))),
        Normalization::Global { lo, hi } => (lo, hi),
    };
    let span = hi - lo;
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if span > 0.0 {
            (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok((out, (lo, hi)))
}

/// Write a map as PGM and return the normalization range used.
pub fn write_uq_map<M: PixelMap + ?Sized>(
    map: &M,
    side: usize,
    normalization: Normalization,
    path: &Path,
) -> Result<(f64, f64)> {
    let (bytes, range) = encode_pgm(map.pixels().as_slice(), side, normalization)?;
    std::fs::write(path, bytes)?;
    Ok(range)
}

/// Width, height and pixels of a binary 8-bit PGM.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::InvalidArgument("not a binary 8-bit PGM".into());
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let data = &bytes[pos + 1..];
    if data.len() != w * h {
        return Err(Error::SizeMismatch { expected: w * h, actual: data.len() });
    }
    Ok((w, h, data.to_vec()))
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CostEntry {
    pub train_seconds: f64,
    pub inference_seconds: f64,
    pub train_forward_equivalents: u64,
    pub inference_forward_equivalents: u64,
}

impl CostEntry {
    pub fn total_seconds(&self) -> f64 {
        self.train_seconds + self.inference_seconds
    }

    pub fn total_forward_equivalents(&self) -> u64 {
        self.train_forward_equivalents + self.inference_forward_equivalents
    }
}

/// Per-method training and inference cost; one JVP counts as one forward pass.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct CostLedger {
    entries: BTreeMap<String, CostEntry>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_training(&mut self, method: &str, seconds: f64, forward_equivalents: u64) {
        let e = self.entries.entry(method.to_string()).or_default();
        e.train_seconds += seconds;
        e.train_forward_equivalents += forward_equivalents;
    }

    pub fn record_inference(&mut self, method: &str, seconds: f64, forward_equivalents: u64) {
        let e = self.entries.entry(method.to_string()).or_default();
        e.inference_seconds += seconds;
        e.inference_forward_equivalents += forward_equivalents;
    }

    /// Replace the training cost, for example when a model is retrained.
    pub fn set_training(&mut self, method: &str, seconds: f64, forward_equivalents: u64) {
        let e = self.entries.entry(method.to_string()).or_default();
        e.train_seconds = seconds;
        e.train_forward_equivalents = forward_equivalents;
    }

    pub fn set_inference(&mut self, method: &str, seconds: f64, forward_equivalents: u64) {
        let e = self.entries.entry(method.to_string()).or_default();
        e.inference_seconds = seconds;
        e.inference_forward_equivalents = forward_equivalents;
    }

    pub fn get(&self, method: &str) -> Option<&CostEntry> {
        self.entries.get(method)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &CostEntry)> {
        self.entries.iter()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostRatio {
    pub numerator: String,
    pub denominator: String,
    pub seconds: Option<f64>,
    pub forward_equivalents: Option<f64>,
}

/// Totals per method and every ordered pairwise ratio of totals.
pub fn cost_report(ledger: &CostLedger) -> (Vec<(String, CostEntry)>, Vec<CostRatio>) {
    let totals: Vec<(String, CostEntry)> = ledger.entries().map(|(k, v)| (k.clone(), v.clone())).collect();
    let ratio = |a: f64, b: f64| (b > 0.0).then(|| a / b);
    let mut ratios = Vec::new();
    for (a, ea) in &totals {
        for (b, eb) in &totals {
            if a != b {
                ratios.push(CostRatio {
                    numerator: a.clone(),
                    denominator: b.clone(),
                    seconds: ratio(ea.total_seconds(), eb.total_seconds()),
                    forward_equivalents: ratio(
                        ea.total_forward_equivalents() as f64,
                        eb.total_forward_equivalents() as f64,
                    ),
                });
            }
        }
    }
    (totals, ratios)
}

/// Deterministic CSV rows for a cost report: counts and count ratios only.
/// Wall-clock figures belong in the metadata file.
pub fn cost_rows(ledger: &CostLedger, experiment: &str, seed: u64) -> Vec<ReportRow> {
    let (totals, ratios) = cost_report(ledger);
    let mut rows = Vec::new();
    for (method, e) in &totals {
        for (metric, v) in [
            ("train_forward_equivalents", e.train_forward_equivalents),
            ("inference_forward_equivalents", e.inference_forward_equivalents),
            ("total_forward_equivalents", e.total_forward_equivalents()),
        ] {
            rows.push(ReportRow::new(experiment, method, seed, metric, Some(v as f64)));
        }
    }
    for r in ratios {
        rows.push(ReportRow::new(
            experiment,
            &format!("{}/{}", r.numerator, r.denominator),
            seed,
            "forward_equivalent_ratio",
            r.forward_equivalents,
        ));
    }
    rows
}
