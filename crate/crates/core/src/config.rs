//! Pipeline configuration: the JSON document read by the `cbadc` tool.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{build_chain, check_stability, AnalogSystem, ChainSpec, Readout, Stability};
use crate::sim::{ControlSpec, InputSignal, Mismatch, ThermalNoise, DEFAULT_SUBSTEPS};
use crate::xfer::{bandwidth, eta_from_osr, osr_from_bandwidth};

/// Dense matrix as it appears in JSON, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixJson {
    pub fn from_mat(m: &Mat) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)]);
            }
        }
        Self { rows: m.nrows(), cols: m.ncols(), data }
    }

    pub fn to_mat(&self) -> Result<Mat> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Dimension(format!(
                "matrix declares {}x{} but holds {} values",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(Mat::from_row_slice(self.rows, self.cols, &self.data))
    }
}

/// Raw state-space matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSystem {
    pub a: MatrixJson,
    pub b: MatrixJson,
    pub gamma: MatrixJson,
    pub c_t: MatrixJson,
    #[serde(default = "unit")]
    pub state_bound: f64,
    #[serde(default = "unit")]
    pub input_bound: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemConfig {
    Chain {
        #[serde(flatten)]
        chain: ChainSpec,
        #[serde(default)]
        readout: Readout,
        #[serde(default = "unit")]
        bound: f64,
    },
    Matrices(MatrixSystem),
}

/// Clock and quantizer. For chains, `quantizer_bits` and `dither_amplitude`
/// override the values in the chain description when present.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    pub t: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantizer_bits: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dither_amplitude: Option<f64>,
}

/// Estimation-filter design target: exactly one of `eta2` and `osr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct DesignConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub osr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub periods: usize,
    #[serde(default)]
    pub seed: u64,
    /// Estimate period; defaults to the clock period.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_u: Option<f64>,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub noise: Vec<ThermalNoise>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mismatch: Option<Mismatch>,
    #[serde(default)]
    pub allow_unstable: bool,
}

fn default_substeps() -> usize {
    DEFAULT_SUBSTEPS
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    #[serde(default = "default_segment")]
    pub segment: usize,
    /// Defaults to `[0, f_crit]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band: Option<[f64; 2]>,
}

fn default_segment() -> usize {
    crate::analyze::DEFAULT_SEGMENT
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { segment: default_segment(), band: None }
    }
}

/// Output file names, relative to the output directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PathsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficients: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimates: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psd: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub system: SystemConfig,
    pub control: ControlConfig,
    #[serde(default)]
    pub design: DesignConfig,
    #[serde(default = "zero_input")]
    pub input: InputSignal,
    pub run: RunConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

fn zero_input() -> InputSignal {
    InputSignal::Zero
}

/// Values derived from a configuration, echoed by the tool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Derived {
    pub eta2: f64,
    pub eta: f64,
    pub omega_crit: f64,
    pub f_crit: f64,
    pub gamma: f64,
    pub osr: f64,
}

pub const PRESETS: &[&str] = &["reference", "hw-nominal", "n2"];

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.control.t > 0.0) || !self.control.t.is_finite() {
            return Err(Error::InvalidParameter("control.t must be positive".into()));
        }
        match (self.design.eta2, self.design.osr) {
            (Some(_), Some(_)) => return Err(Error::InvalidParameter("give design.eta2 or design.osr, not both".into())),
            (Some(e), None) if !(e > 0.0) => return Err(Error::InvalidParameter("design.eta2 must be positive".into())),
            (None, Some(o)) if !(o > 0.0) => return Err(Error::InvalidParameter("design.osr must be positive".into())),
            _ => {}
        }
        if let Some(t_u) = self.run.t_u {
            if !(t_u > 0.0) {
                return Err(Error::InvalidParameter("run.t_u must be positive".into()));
            }
        }
        if self.run.substeps == 0 {
            return Err(Error::InvalidParameter("run.substeps must be at least 1".into()));
        }
        if let Some([lo, hi]) = self.analysis.band {
            if !(lo >= 0.0 && hi > lo) {
                return Err(Error::InvalidParameter("analysis.band must satisfy 0 ≤ lo < hi".into()));
            }
        }
        if let SystemConfig::Chain { chain, .. } = &self.system {
            chain.validate()?;
        }
        if self.run.mismatch.is_some() && matches!(self.system, SystemConfig::Matrices(_)) {
            return Err(Error::InvalidParameter("mismatch factors apply to chain systems only".into()));
        }
        self.system()?;
        Ok(())
    }

    /// Chain description with the control overrides applied.
    pub fn chain(&self) -> Option<ChainSpec> {
        match &self.system {
            SystemConfig::Chain { chain, .. } => {
                let mut c = chain.clone();
                if let Some(bits) = self.control.quantizer_bits {
                    c.quantizer_bits = bits;
                }
                if let Some(d) = self.control.dither_amplitude {
                    c.dither_amplitude = d;
                }
                Some(c)
            }
            SystemConfig::Matrices(_) => None,
        }
    }

    /// The nominal analog system.
    pub fn system(&self) -> Result<AnalogSystem> {
        match &self.system {
            SystemConfig::Chain { readout, bound, .. } => build_chain(&self.chain().expect("chain"), *readout, *bound),
            SystemConfig::Matrices(m) => AnalogSystem::new(
                m.a.to_mat()?,
                m.b.to_mat()?,
                m.gamma.to_mat()?,
                m.c_t.to_mat()?,
                m.state_bound,
                m.input_bound,
            ),
        }
    }

    pub fn control_spec(&self) -> ControlSpec {
        match self.chain() {
            Some(c) => ControlSpec { t: self.control.t, quantizer_bits: c.quantizer_bits, dither_amplitude: c.dither_amplitude },
            None => ControlSpec {
                t: self.control.t,
                quantizer_bits: self.control.quantizer_bits.unwrap_or(1),
                dither_amplitude: self.control.dither_amplitude.unwrap_or(0.0),
            },
        }
    }

    pub fn t_u(&self) -> f64 {
        self.run.t_u.unwrap_or(self.control.t)
    }

    pub fn stability(&self) -> Option<Stability> {
        let bound = match &self.system {
            SystemConfig::Chain { bound, .. } => *bound,
            SystemConfig::Matrices(_) => return None,
        };
        Some(check_stability(&self.chain()?, self.control.t, bound))
    }

    /// η², bandwidth, γ and OSR. γ is T times the largest stage gain.
    pub fn derived(&self) -> Result<Derived> {
        let sys = self.system()?;
        let t = self.control.t;
        let gamma = t * sys.characteristic_rate();
        let eta2 = match (self.design.eta2, self.design.osr) {
            (Some(e), _) => e,
            (None, Some(osr)) => eta_from_osr(gamma, osr, sys.order())?.powi(2),
            (None, None) => return Err(Error::InvalidParameter("design needs eta2 or osr".into())),
        };
        let omega_crit = bandwidth(&sys, eta2)?;
        let osr = match self.design.osr {
            Some(o) => o,
            None => osr_from_bandwidth(omega_crit, t),
        };
        Ok(Derived {
            eta2,
            eta: eta2.sqrt(),
            omega_crit,
            f_crit: omega_crit / (2.0 * std::f64::consts::PI),
            gamma,
            osr,
        })
    }

    /// Analysis band in Hz.
    pub fn band(&self) -> Result<(f64, f64)> {
        match self.analysis.band {
            Some([lo, hi]) => Ok((lo, hi)),
            None => Ok((0.0, self.derived()?.f_crit)),
        }
    }

    /// SHA-256 of the canonical JSON of everything except the paths, hex.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsConfig::default();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn preset(name: &str) -> Result<Self> {
        let cfg = match name {
            "reference" => {
                let t = 1.0 / 21.5;
                Self {
                    system: SystemConfig::Chain { chain: ChainSpec::uniform(5, 10.0, 1.05), readout: Readout::LastState, bound: 1.0 },
                    control: ControlConfig { t, quantizer_bits: None, dither_amplitude: None },
                    design: DesignConfig { eta2: None, osr: Some(32.0) },
                    input: InputSignal::Sine {
                        amplitude: 0.5,
                        frequency: crate::analyze::coherent_frequency(0.1, 21.5, 1 << 16),
                        phase: 0.0,
                    },
                    run: RunConfig {
                        periods: 1 << 18,
                        seed: 1,
                        t_u: None,
                        substeps: DEFAULT_SUBSTEPS,
                        noise: Vec::new(),
                        mismatch: None,
                        allow_unstable: false,
                    },
                    analysis: AnalysisConfig { segment: 1 << 16, band: None },
                    paths: PathsConfig::default(),
                }
            }
            "hw-nominal" => {
                let t = 54e-6;
                let mut chain = ChainSpec::uniform(5, 6250.0, 1.25);
                chain.feedback = vec![312.5; 4];
                Self {
                    system: SystemConfig::Chain { chain, readout: Readout::LastState, bound: 1.0 },
                    control: ControlConfig { t, quantizer_bits: None, dither_amplitude: None },
                    design: DesignConfig { eta2: None, osr: Some(32.0) },
                    input: InputSignal::Sine {
                        amplitude: 0.5,
                        frequency: crate::analyze::coherent_frequency(50.0, 1.0 / t, 1 << 16),
                        phase: 0.0,
                    },
                    run: RunConfig {
                        periods: 1 << 18,
                        seed: 1,
                        t_u: None,
                        substeps: DEFAULT_SUBSTEPS,
                        noise: Vec::new(),
                        mismatch: None,
                        allow_unstable: false,
                    },
                    analysis: AnalysisConfig { segment: 1 << 16, band: None },
                    paths: PathsConfig::default(),
                }
            }
            "n2" => Self {
                system: SystemConfig::Chain { chain: ChainSpec::uniform(2, 1.0, 1.0), readout: Readout::LastState, bound: 1.0 },
                control: ControlConfig { t: 0.5, quantizer_bits: None, dither_amplitude: None },
                design: DesignConfig { eta2: Some(100.0), osr: None },
                input: InputSignal::Zero,
                run: RunConfig {
                    periods: 1 << 14,
                    seed: 1,
                    t_u: None,
                    substeps: DEFAULT_SUBSTEPS,
                    noise: Vec::new(),
                    mismatch: None,
                    allow_unstable: false,
                },
                analysis: AnalysisConfig { segment: 1 << 10, band: None },
                paths: PathsConfig::default(),
            },
            other => return Err(Error::InvalidParameter(format!("unknown preset '{other}' (known: {})", PRESETS.join(", ")))),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
