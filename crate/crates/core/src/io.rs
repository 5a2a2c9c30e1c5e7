//! File formats: coefficient files, `.cbt` control traces, estimate and PSD
//! CSVs and JSON reports. Every file carries a [`Provenance`] record.

use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::analyze::{Spectrum, SpectrumReport};
use crate::config::Derived;
use crate::design::{DesignDiagnostics, FilterCoefficients};
use crate::error::{Error, Result};
use crate::estimate::EstimateTrace;
use crate::linalg::Mat;
use crate::sim::ControlTrace;

pub const TRACE_MAGIC: &str = "cbt";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self { tool: "cbadc".into(), version: crate::VERSION.into(), config_hash: config_hash.into(), seed }
    }
}

/// A matrix stored as little-endian binary64, row-major, base64-encoded,
/// with a decimal copy for reading by eye. Only `data` is read back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: String,
    #[serde(default)]
    pub decimal: Vec<Vec<f64>>,
}

impl EncodedMatrix {
    pub fn encode(m: &Mat) -> Self {
        let mut bytes = Vec::with_capacity(8 * m.len());
        let mut decimal = Vec::with_capacity(m.nrows());
        for r in 0..m.nrows() {
            let mut row = Vec::with_capacity(m.ncols());
            for c in 0..m.ncols() {
                bytes.extend_from_slice(&m[(r, c)].to_le_bytes());
                row.push(m[(r, c)]);
            }
            decimal.push(row);
        }
        Self { rows: m.nrows(), cols: m.ncols(), data: STANDARD.encode(bytes), decimal }
    }

    pub fn decode(&self) -> Result<Mat> {
        let bytes = STANDARD.decode(&self.data).map_err(|e| Error::Format(format!("bad base64 matrix: {e}")))?;
        if bytes.len() != 8 * self.rows * self.cols {
            return Err(Error::Format(format!("matrix {}x{} has {} bytes", self.rows, self.cols, bytes.len())));
        }
        let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Mat::from_row_slice(self.rows, self.cols, &vals))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientsFile {
    pub provenance: Provenance,
    pub t_u: f64,
    pub eta2: f64,
    pub af: EncodedMatrix,
    pub bf: EncodedMatrix,
    pub ab: EncodedMatrix,
    pub bb: EncodedMatrix,
    pub w: EncodedMatrix,
    pub vf: EncodedMatrix,
    pub vb: EncodedMatrix,
    pub diagnostics: DesignDiagnostics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived: Option<Derived>,
}

impl CoefficientsFile {
    pub fn new(provenance: Provenance, c: &FilterCoefficients, diagnostics: DesignDiagnostics, derived: Option<Derived>) -> Self {
        Self {
            provenance,
            t_u: c.t_u,
            eta2: c.eta2,
            af: EncodedMatrix::encode(&c.af),
            bf: EncodedMatrix::encode(&c.bf),
            ab: EncodedMatrix::encode(&c.ab),
            bb: EncodedMatrix::encode(&c.bb),
            w: EncodedMatrix::encode(&c.w),
            vf: EncodedMatrix::encode(&c.vf),
            vb: EncodedMatrix::encode(&c.vb),
            diagnostics,
            derived,
        }
    }

    pub fn coefficients(&self) -> Result<FilterCoefficients> {
        let c = FilterCoefficients {
            af: self.af.decode()?,
            bf: self.bf.decode()?,
            ab: self.ab.decode()?,
            bb: self.bb.decode()?,
            w: self.w.decode()?,
            vf: self.vf.decode()?,
            vb: self.vb.decode()?,
            t_u: self.t_u,
            eta2: self.eta2,
        };
        let n = c.af.nrows();
        let ok = c.af.ncols() == n
            && c.ab.shape() == (n, n)
            && c.bf.nrows() == n
            && c.bb.shape() == c.bf.shape()
            && c.w.nrows() == n
            && c.vf.shape() == (n, n)
            && c.vb.shape() == (n, n);
        if !ok {
            return Err(Error::Dimension("coefficient matrices have inconsistent shapes".into()));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceBody {
    /// One line per period: `n` space-separated level codes.
    Text,
    /// Packed bits, `n` per period, least significant bit first.
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub version: String,
    pub t_seconds: f64,
    pub n: usize,
    pub levels: u32,
    pub length: usize,
    pub seed: u64,
    pub config_hash: String,
    pub body: TraceBody,
}

/// Write a quantized trace as a `.cbt` file: one JSON header line, then the body.
pub fn write_trace<W: Write>(out: &mut W, trace: &ControlTrace, prov: &Provenance, body: TraceBody) -> Result<()> {
    if trace.levels < 2 {
        return Err(Error::Format("only quantized traces can be written as .cbt".into()));
    }
    if body == TraceBody::Binary && trace.levels != 2 {
        return Err(Error::Format("binary .cbt bodies hold 1-bit traces only".into()));
    }
    let header = TraceHeader {
        format: TRACE_MAGIC.into(),
        version: prov.version.clone(),
        t_seconds: trace.t,
        n: trace.n,
        levels: trace.levels,
        length: trace.len(),
        seed: prov.seed,
        config_hash: prov.config_hash.clone(),
        body,
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    let codes = trace.samples.iter().map(|&v| trace.code_of(v).expect("validated trace"));
    match body {
        TraceBody::Text => {
            let mut line = String::new();
            for (i, c) in codes.enumerate() {
                if i % trace.n != 0 {
                    line.push(' ');
                }
                line.push_str(&c.to_string());
                if i % trace.n == trace.n - 1 {
                    line.push('\n');
                    out.write_all(line.as_bytes())?;
                    line.clear();
                }
            }
        }
        TraceBody::Binary => {
            let mut bytes = vec![0u8; trace.samples.len().div_ceil(8)];
            for (i, c) in codes.enumerate() {
                if c == 1 {
                    bytes[i / 8] |= 1 << (i % 8);
                }
            }
            out.write_all(&bytes)?;
        }
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(input: &mut R) -> Result<(TraceHeader, ControlTrace)> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    let header: TraceHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(format!("bad .cbt header: {e}")))?;
    if header.format != TRACE_MAGIC {
        return Err(Error::Format(format!("not a .cbt file (format '{}')", header.format)));
    }
    if header.n == 0 || header.levels < 2 {
        return Err(Error::Format("header needs n ≥ 1 and levels ≥ 2".into()));
    }
    let total = header.length * header.n;
    let mut samples = Vec::with_capacity(total);
    match header.body {
        TraceBody::Text => {
            let mut row = String::new();
            for k in 0..header.length {
                row.clear();
                if input.read_line(&mut row)? == 0 {
                    return Err(Error::Format(format!("trace ends after {k} of {} periods", header.length)));
                }
                let before = samples.len();
                for tok in row.split_whitespace() {
                    let c: u32 = tok.parse().map_err(|_| Error::Format(format!("bad level code '{tok}' in period {k}")))?;
                    if c >= header.levels {
                        return Err(Error::Format(format!("level code {c} out of range in period {k}")));
                    }
                    samples.push(ControlTrace::level_value(header.levels, c));
                }
                if samples.len() - before != header.n {
                    return Err(Error::Format(format!("period {k} has {} codes, expected {}", samples.len() - before, header.n)));
                }
            }
        }
        TraceBody::Binary => {
            if header.levels != 2 {
                return Err(Error::Format("binary body with more than 2 levels".into()));
            }
            let mut bytes = Vec::new();
            input.read_to_end(&mut bytes)?;
            if bytes.len() != total.div_ceil(8) {
                return Err(Error::Format(format!("binary body has {} bytes, expected {}", bytes.len(), total.div_ceil(8))));
            }
            for i in 0..total {
                samples.push(if bytes[i / 8] >> (i % 8) & 1 == 1 { 1.0 } else { -1.0 });
            }
        }
    }
    let trace = ControlTrace::new(header.t_seconds, header.n, header.levels, samples)?;
    Ok((header, trace))
}

/// Metadata line at the top of estimate files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateHeader {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub form: String,
    pub t_u: f64,
    pub k: usize,
    /// Index of the first written sample in the full estimate.
    pub first_index: usize,
    pub length: usize,
}

/// Write the valid part of an estimate as CSV (`t_seconds,u_hat_1..k`)
/// after a `#`-prefixed JSON header line.
pub fn write_estimates_csv<W: Write>(out: &mut W, est: &EstimateTrace, prov: &Provenance, form: &str) -> Result<()> {
    let (a, b) = est.valid_range;
    let header = EstimateHeader { provenance: prov.clone(), form: form.into(), t_u: est.t_u, k: est.k, first_index: a, length: b - a };
    out.write_all(b"# ")?;
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\nt_seconds")?;
    for c in 1..=est.k {
        write!(out, ",u_hat_{c}")?;
    }
    out.write_all(b"\n")?;
    for j in a..b {
        write!(out, "{}", j as f64 * est.t_u)?;
        for v in est.get(j) {
            write!(out, ",{v}")?;
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Same content as the CSV, as a JSON header line followed by raw
/// little-endian binary64 samples, row-major.
pub fn write_estimates_raw<W: Write>(out: &mut W, est: &EstimateTrace, prov: &Provenance, form: &str) -> Result<()> {
    let (a, b) = est.valid_range;
    let header = EstimateHeader { provenance: prov.clone(), form: form.into(), t_u: est.t_u, k: est.k, first_index: a, length: b - a };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    for v in &est.samples[a * est.k..b * est.k] {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Estimates read back from either format.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateSeries {
    pub header: Option<EstimateHeader>,
    pub t_u: f64,
    pub k: usize,
    /// Row-major, `len × k`.
    pub samples: Vec<f64>,
}

impl EstimateSeries {
    pub fn len(&self) -> usize {
        self.samples.len() / self.k.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.samples.iter().skip(c).step_by(self.k).copied().collect()
    }
}

/// Read an estimate file written by [`write_estimates_csv`] or
/// [`write_estimates_raw`]; the format is recognized from the first byte.
pub fn read_estimates(bytes: &[u8]) -> Result<EstimateSeries> {
    if bytes.first() == Some(&b'{') {
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Format("missing header line".into()))?;
        let header: EstimateHeader = serde_json::from_slice(&bytes[..nl])?;
        let body = &bytes[nl + 1..];
        if body.len() != 8 * header.k * header.length {
            return Err(Error::Format(format!("raw body has {} bytes, expected {}", body.len(), 8 * header.k * header.length)));
        }
        let samples = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        return Ok(EstimateSeries { t_u: header.t_u, k: header.k, header: Some(header), samples });
    }
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Format("estimate CSV is not UTF-8".into()))?;
    let mut header = None;
    let mut k = None;
    let mut times = Vec::new();
    let mut samples = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if header.is_none() {
                header = serde_json::from_str::<EstimateHeader>(rest.trim()).ok();
            }
            continue;
        }
        if k.is_none() {
            let cols = line.split(',').count();
            if cols < 2 {
                return Err(Error::Format("estimate CSV needs a time column and at least one estimate".into()));
            }
            k = Some(cols - 1);
            if line.split(',').next().is_some_and(|c| c.trim().parse::<f64>().is_err()) {
                continue;
            }
        }
        let mut fields = line.split(',');
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::Format(format!("line {}: bad number '{s}'", no + 1)));
        times.push(parse(fields.next().unwrap())?);
        let before = samples.len();
        for f in fields {
            samples.push(parse(f)?);
        }
        if samples.len() - before != k.unwrap() {
            return Err(Error::Format(format!("line {}: expected {} estimates", no + 1, k.unwrap())));
        }
    }
    let k = k.ok_or(Error::EmptyTrace)?;
    let t_u = match &header {
        Some(h) => h.t_u,
        None if times.len() >= 2 => (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64,
        None => return Err(Error::TooFewSamples { got: times.len(), need: 2 }),
    };
    Ok(EstimateSeries { header, t_u, k, samples })
}

pub fn write_psd_csv<W: Write>(out: &mut W, spec: &Spectrum, prov: &Provenance) -> Result<()> {
    out.write_all(b"# ")?;
    serde_json::to_writer(&mut *out, prov)?;
    out.write_all(b"\nf_hz,psd\n")?;
    for (f, p) in spec.freqs.iter().zip(&spec.psd) {
        writeln!(out, "{f},{p}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub provenance: Provenance,
    #[serde(flatten)]
    pub report: SpectrumReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived: Option<Derived>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_abs_state: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound_violations: Option<u64>,
}
