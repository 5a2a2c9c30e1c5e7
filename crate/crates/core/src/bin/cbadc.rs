use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cbadc::analyze::{psd, report, snr_sweep, MeasureSetup, Spectrum};
use cbadc::config::{Derived, PipelineConfig, SystemConfig};
use cbadc::design::{design, parallelize, DesignDiagnostics, FilterCoefficients};
use cbadc::estimate::{estimate_batch, estimate_mixed, estimate_parallel, mixed_truncation_bound, EstimateTrace};
use cbadc::io::{
    read_estimates, read_trace, write_estimates_csv, write_estimates_raw, write_psd_csv, write_trace, CoefficientsFile,
    Provenance, ReportFile, TraceBody,
};
use cbadc::model::{ChainSpec, Stability};
use cbadc::sim::{simulate, simulate_chain, ChainRun, ControlTrace, InputSignal, SimOptions, SimReport};
use cbadc::xfer::transfer_point;

const GATE_FAILURE: u8 = 3;
const USAGE: u8 = 2;

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "cbadc", version, about = "Control-bounded A/D conversion: design, simulate, estimate, analyze")]
struct Cli {
    /// Directory for output files given as relative paths.
    #[arg(long, env = "CBADC_OUT_DIR", global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute estimation-filter coefficients.
    Design(DesignArgs),
    /// Simulate the controlled analog system and write a control trace.
    Simulate(SimulateArgs),
    /// Turn a control trace into input estimates.
    Estimate(EstimateArgs),
    /// PSD and SNR/SNDR/SFDR of an estimate file.
    Analyze(AnalyzeArgs),
    /// Signal and noise transfer function magnitudes over frequency.
    Predict(PredictArgs),
    /// Simulate, estimate and analyze in one go.
    Pipeline(PipelineArgs),
    /// Measured SNR against the white-noise prediction over amplitudes.
    Sweep(SweepArgs),
    /// Print a preset configuration as JSON.
    Preset { name: String },
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Pipeline configuration (JSON).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: reference, hw-nominal or n2.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    periods: Option<usize>,
    /// Input override: zero, const:C or sine:A,F[,PHASE].
    #[arg(long)]
    input: Option<String>,
    #[arg(long, conflicts_with = "osr")]
    eta2: Option<f64>,
    #[arg(long)]
    osr: Option<f64>,
}

#[derive(Args)]
struct DesignArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value = "coefficients.json")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value = "trace.cbt")]
    out: PathBuf,
    /// Packed-bit body (1-bit quantizers only).
    #[arg(long)]
    binary: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Form {
    Batch,
    Mixed,
    Parallel,
}

impl Form {
    fn name(self) -> &'static str {
        match self {
            Form::Batch => "batch",
            Form::Mixed => "mixed",
            Form::Parallel => "parallel",
        }
    }
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    coefficients: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_enum, default_value = "batch")]
    form: Form,
    /// Look-ahead of the mixed form, in estimate periods.
    #[arg(long, default_value_t = 64)]
    latency: usize,
    /// Write raw binary64 samples instead of CSV.
    #[arg(long)]
    raw: bool,
    #[arg(long, default_value = "estimates.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    estimates: PathBuf,
    /// Signal band in Hz as LO,HI.
    #[arg(long, value_parser = parse_band, conflicts_with = "config")]
    band: Option<(f64, f64)>,
    /// Take the band from this configuration instead.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = cbadc::analyze::DEFAULT_SEGMENT)]
    segment: usize,
    #[arg(long, default_value_t = 0)]
    channel: usize,
    #[arg(long, default_value = "psd.csv")]
    psd_out: PathBuf,
    #[arg(long, default_value = "report.json")]
    report_out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value_t = 200)]
    points: usize,
    /// Lowest and highest frequency relative to the bandwidth.
    #[arg(long, default_value_t = 1e-2)]
    from: f64,
    #[arg(long, default_value_t = 1e2)]
    to: f64,
    #[arg(long, default_value = "predict.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_enum, default_value = "batch")]
    form: Form,
    #[arg(long, default_value_t = 64)]
    latency: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Chain orders to sweep; the configuration's chain is resized.
    #[arg(long, value_delimiter = ',', default_value = "3,4,5")]
    orders: Vec<usize>,
    /// Amplitudes relative to the state bound.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.5,1.0,1.1")]
    amplitudes: Vec<f64>,
    /// Tone frequency in Hz, moved to the nearest bin centre.
    #[arg(long, default_value_t = 0.1)]
    tone: f64,
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
}

fn parse_band(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected LO,HI")?;
    let lo: f64 = a.trim().parse().map_err(|_| format!("bad number '{a}'"))?;
    let hi: f64 = b.trim().parse().map_err(|_| format!("bad number '{b}'"))?;
    Ok((lo, hi))
}

struct Outputs {
    dir: PathBuf,
}

impl Outputs {
    fn new(cli: Option<PathBuf>, cfg: Option<&PipelineConfig>) -> Self {
        let dir = cli.or_else(|| cfg.and_then(|c| c.paths.out_dir.clone()).map(PathBuf::from)).unwrap_or_else(|| ".".into());
        Self { dir }
    }

    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    fn create(&self, p: &Path) -> Result<(PathBuf, BufWriter<File>)> {
        let path = self.path(p);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok((path, BufWriter::new(f)))
    }
}

fn load_config(args: &ConfigArgs) -> Result<PipelineConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<PipelineConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        (None, Some(name)) => PipelineConfig::preset(name)?,
        (None, None) => return Err(UsageError("give --config FILE or --preset NAME".into()).into()),
    };
    if let Some(s) = args.seed {
        cfg.run.seed = s;
    }
    if let Some(p) = args.periods {
        cfg.run.periods = p;
    }
    if let Some(i) = &args.input {
        cfg.input = InputSignal::parse(i)?;
    }
    if let Some(e) = args.eta2 {
        cfg.design.eta2 = Some(e);
        cfg.design.osr = None;
    }
    if let Some(o) = args.osr {
        cfg.design.osr = Some(o);
        cfg.design.eta2 = None;
    }
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

fn require_design_target(cfg: &PipelineConfig) -> Result<()> {
    if cfg.design.eta2.is_none() && cfg.design.osr.is_none() {
        return Err(UsageError("the design needs eta2 or osr (config or --eta2/--osr)".into()).into());
    }
    Ok(())
}

fn provenance(cfg: &PipelineConfig) -> Provenance {
    Provenance::new(cfg.hash(), cfg.run.seed)
}

fn echo_derived(d: &Derived) {
    println!(
        "eta2 = {:.6e}  eta = {:.6e}  omega_crit = {:.6e} rad/s  f_crit = {:.6e} Hz  gamma = {:.6}  OSR = {:.4}",
        d.eta2, d.eta, d.omega_crit, d.f_crit, d.gamma, d.osr
    );
}

fn echo_diagnostics(d: &DesignDiagnostics) {
    println!(
        "Riccati residuals: forward {:.3e} (term-relative {:.3e}, {} steps), backward {:.3e} (term-relative {:.3e}, {} steps)",
        d.residual_f, d.term_residual_f, d.iterations_f, d.residual_b, d.term_residual_b, d.iterations_b
    );
    println!("spectral radii: Af {:.12}  Ab {:.12}  W residual {:.3e}", d.rho_f, d.rho_b, d.w_residual);
}

fn run_design(cfg: &PipelineConfig) -> Result<(FilterCoefficients, DesignDiagnostics, Derived)> {
    let derived = cfg.derived()?;
    echo_derived(&derived);
    let (c, d) = design(&cfg.system()?, derived.eta2, cfg.t_u())?;
    echo_diagnostics(&d);
    Ok((c, d, derived))
}

fn gate_check(d: &DesignDiagnostics) -> Option<String> {
    let failed = d.failed_gates();
    (!failed.is_empty()).then(|| format!("design gates failed: {}", failed.join(", ")))
}

fn run_simulation(cfg: &PipelineConfig) -> Result<(ControlTrace, SimReport)> {
    match (&cfg.system, cfg.chain()) {
        (SystemConfig::Chain { bound, .. }, Some(chain)) => {
            if let Some(Stability::NotGuaranteed(stages)) = cfg.stability() {
                eprintln!("warning: stability not guaranteed at stages {stages:?}");
            }
            let mut run = ChainRun::new(&chain, cfg.control.t, cfg.input, cfg.run.periods);
            run.bound = *bound;
            run.seed = cfg.run.seed;
            run.noise = cfg.run.noise.clone();
            run.mismatch = cfg.run.mismatch.clone();
            run.allow_unstable = cfg.run.allow_unstable;
            run.substeps = cfg.run.substeps;
            Ok(simulate_chain(&run)?)
        }
        _ => {
            let opts = SimOptions { substeps: cfg.run.substeps, seed: cfg.run.seed, noise: cfg.run.noise.clone(), ..Default::default() };
            Ok(simulate(&cfg.system()?, &cfg.control_spec(), &cfg.input, cfg.run.periods, &opts)?)
        }
    }
}

fn echo_sim(r: &SimReport) {
    let peak = r.max_abs_state.iter().fold(0.0f64, |a, &v| a.max(v));
    println!("simulated {} periods: max |x| = {peak:.6}, bound violations = {}", r.periods, r.bound_violations);
    if !r.input_within_bound {
        eprintln!("warning: input exceeds its bound");
    }
}

fn run_estimate(c: &FilterCoefficients, trace: &ControlTrace, form: Form, latency: usize) -> Result<(EstimateTrace, Form)> {
    Ok(match form {
        Form::Batch => (estimate_batch(c, trace)?, Form::Batch),
        Form::Mixed => {
            println!("mixed form, latency {latency}: truncation bound {:.3e}", mixed_truncation_bound(c, latency));
            (estimate_mixed(c, trace, latency)?, Form::Mixed)
        }
        Form::Parallel => match parallelize(c) {
            Ok(p) => (estimate_parallel(&p, trace)?, Form::Parallel),
            Err(e) => {
                eprintln!("warning: no parallel form ({e}); using batch");
                (estimate_batch(c, trace)?, Form::Batch)
            }
        },
    })
}

fn analyze_series(samples: &[f64], t_u: f64, segment: usize, band: (f64, f64)) -> Result<(Spectrum, cbadc::analyze::SpectrumReport)> {
    let seg = segment.min(samples.len().next_power_of_two() / 2).max(8);
    let spec = psd(samples, 1.0 / t_u, seg, 0.5)?;
    let rep = report(&spec, band)?;
    Ok((spec, rep))
}

fn echo_report(r: &cbadc::analyze::SpectrumReport) {
    let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2} dB"));
    println!(
        "band [{:.4e}, {:.4e}] Hz: SNR {}  SNDR {}  SFDR {}  in-band noise {:.3e}",
        r.band[0],
        r.band[1],
        show(r.snr_db),
        show(r.sndr_db),
        show(r.sfdr_db),
        r.noise_power
    );
}

fn cmd(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Preset { name } => {
            println!("{}", PipelineConfig::preset(&name)?.to_json()?);
        }
        Command::Design(a) => {
            let cfg = load_config(&a.cfg)?;
            require_design_target(&cfg)?;
            let out = Outputs::new(cli.out_dir, Some(&cfg));
            let (c, d, derived) = run_design(&cfg)?;
            println!("W = {:?}", c.w.iter().collect::<Vec<_>>());
            if let Some(msg) = gate_check(&d) {
                eprintln!("error: {msg}");
                return Ok(GATE_FAILURE);
            }
            let (path, mut w) = out.create(&a.out)?;
            serde_json::to_writer_pretty(&mut w, &CoefficientsFile::new(provenance(&cfg), &c, d, Some(derived)))?;
            w.write_all(b"\n")?;
            w.flush()?;
            println!("wrote {}", path.display());
        }
        Command::Simulate(a) => {
            let cfg = load_config(&a.cfg)?;
            let out = Outputs::new(cli.out_dir, Some(&cfg));
            if cfg.design.eta2.is_some() || cfg.design.osr.is_some() {
                echo_derived(&cfg.derived()?);
            }
            let (trace, rep) = run_simulation(&cfg)?;
            echo_sim(&rep);
            let (path, mut w) = out.create(&a.out)?;
            write_trace(&mut w, &trace, &provenance(&cfg), if a.binary { TraceBody::Binary } else { TraceBody::Text })?;
            w.flush()?;
            println!("wrote {}", path.display());
        }
        Command::Estimate(a) => {
            let out = Outputs::new(cli.out_dir, None);
            let file: CoefficientsFile = serde_json::from_reader(BufReader::new(
                File::open(&a.coefficients).with_context(|| format!("opening {}", a.coefficients.display()))?,
            ))?;
            let c = file.coefficients()?;
            let (header, trace) =
                read_trace(&mut BufReader::new(File::open(&a.trace).with_context(|| format!("opening {}", a.trace.display()))?))?;
            if header.config_hash != file.provenance.config_hash {
                eprintln!("note: trace and coefficients come from different configurations");
            }
            let (est, form) = run_estimate(&c, &trace, a.form, a.latency)?;
            let prov = Provenance::new(header.config_hash.clone(), header.seed);
            let (path, mut w) = out.create(&a.out)?;
            if a.raw {
                write_estimates_raw(&mut w, &est, &prov, form.name())?;
            } else {
                write_estimates_csv(&mut w, &est, &prov, form.name())?;
            }
            w.flush()?;
            println!("{} estimates ({} settled) written to {}", est.len(), est.valid_range.1 - est.valid_range.0, path.display());
        }
        Command::Analyze(a) => {
            let out = Outputs::new(cli.out_dir, None);
            let bytes = fs::read(&a.estimates).with_context(|| format!("reading {}", a.estimates.display()))?;
            let series = read_estimates(&bytes)?;
            if a.channel >= series.k {
                bail!("channel {} out of range (file has {})", a.channel, series.k);
            }
            let (band, derived) = match (a.band, &a.config) {
                (Some(b), _) => (b, None),
                (None, Some(p)) => {
                    let cfg: PipelineConfig = serde_json::from_str(&fs::read_to_string(p)?)?;
                    (cfg.band()?, Some(cfg.derived()?))
                }
                (None, None) => bail!("give --band LO,HI or --config FILE"),
            };
            let (spec, rep) = analyze_series(&series.channel(a.channel), series.t_u, a.segment, band)?;
            echo_report(&rep);
            let prov = match &series.header {
                Some(h) => h.provenance.clone(),
                None => Provenance::new("", 0),
            };
            let (p1, mut w) = out.create(&a.psd_out)?;
            write_psd_csv(&mut w, &spec, &prov)?;
            w.flush()?;
            let (p2, mut w) = out.create(&a.report_out)?;
            let file = ReportFile { provenance: prov, report: rep, derived, max_abs_state: None, bound_violations: None };
            serde_json::to_writer_pretty(&mut w, &file)?;
            w.write_all(b"\n")?;
            w.flush()?;
            println!("wrote {} and {}", p1.display(), p2.display());
        }
        Command::Predict(a) => {
            let cfg = load_config(&a.cfg)?;
            require_design_target(&cfg)?;
            let out = Outputs::new(cli.out_dir, Some(&cfg));
            let d = cfg.derived()?;
            echo_derived(&d);
            if !(a.from > 0.0 && a.to > a.from) || a.points < 2 {
                bail!("need 0 < --from < --to and at least 2 points");
            }
            let sys = cfg.system()?;
            let (path, mut w) = out.create(&a.out)?;
            write!(w, "omega_rad_s,stf_mag")?;
            for i in 1..=sys.outputs() {
                write!(w, ",ntf_mag_{i}")?;
            }
            writeln!(w)?;
            let (l0, l1) = (a.from.ln(), a.to.ln());
            for i in 0..a.points {
                let omega = d.omega_crit * (l0 + (l1 - l0) * i as f64 / (a.points - 1) as f64).exp();
                let tp = transfer_point(&sys, d.eta2, omega)?;
                write!(w, "{omega},{}", tp.stf[(0, 0)].norm())?;
                for j in 0..sys.outputs() {
                    write!(w, ",{}", tp.ntf.column(j).norm())?;
                }
                writeln!(w)?;
            }
            w.flush()?;
            println!("wrote {}", path.display());
        }
        Command::Pipeline(a) => {
            let cfg = load_config(&a.cfg)?;
            require_design_target(&cfg)?;
            let out = Outputs::new(cli.out_dir, Some(&cfg));
            let prov = provenance(&cfg);
            let (c, d, derived) = run_design(&cfg)?;
            if let Some(msg) = gate_check(&d) {
                eprintln!("error: {msg}");
                return Ok(GATE_FAILURE);
            }
            let name = |p: &Option<String>, default: &str| PathBuf::from(p.clone().unwrap_or_else(|| default.into()));
            let (path, mut w) = out.create(&name(&cfg.paths.coefficients, "coefficients.json"))?;
            serde_json::to_writer_pretty(&mut w, &CoefficientsFile::new(prov.clone(), &c, d, Some(derived)))?;
            w.write_all(b"\n")?;
            w.flush()?;
            println!("wrote {}", path.display());

            let (trace, sim) = run_simulation(&cfg)?;
            echo_sim(&sim);
            let body = if trace.levels == 2 { TraceBody::Binary } else { TraceBody::Text };
            let (path, mut w) = out.create(&name(&cfg.paths.trace, "trace.cbt"))?;
            write_trace(&mut w, &trace, &prov, body)?;
            w.flush()?;
            println!("wrote {}", path.display());

            let (est, form) = run_estimate(&c, &trace, a.form, a.latency)?;
            let (path, mut w) = out.create(&name(&cfg.paths.estimates, "estimates.csv"))?;
            write_estimates_csv(&mut w, &est, &prov, form.name())?;
            w.flush()?;
            println!("wrote {}", path.display());

            let (spec, rep) = analyze_series(&est.valid_channel(0), est.t_u, cfg.analysis.segment, cfg.band()?)?;
            echo_report(&rep);
            let (path, mut w) = out.create(&name(&cfg.paths.psd, "psd.csv"))?;
            write_psd_csv(&mut w, &spec, &prov)?;
            w.flush()?;
            println!("wrote {}", path.display());
            let file = ReportFile {
                provenance: prov,
                report: rep,
                derived: Some(derived),
                max_abs_state: Some(sim.max_abs_state.clone()),
                bound_violations: Some(sim.bound_violations),
            };
            let (path, mut w) = out.create(&name(&cfg.paths.report, "report.json"))?;
            serde_json::to_writer_pretty(&mut w, &file)?;
            w.write_all(b"\n")?;
            w.flush()?;
            println!("wrote {}", path.display());
        }
        Command::Sweep(a) => {
            let cfg = load_config(&a.cfg)?;
            let out = Outputs::new(cli.out_dir, Some(&cfg));
            let base = cfg.chain().ok_or_else(|| anyhow!("sweep needs a chain system"))?;
            let osr = match cfg.design.osr {
                Some(o) => o,
                None => cfg.derived()?.osr,
            };
            let mut amps = a.amplitudes.clone();
            amps.sort_by(f64::total_cmp);
            let (path, mut w) = out.create(&a.out)?;
            writeln!(w, "n,amplitude,snr_db,sndr_db,predicted_db,runaway_stage")?;
            for &n in &a.orders {
                let mut chain = ChainSpec::uniform(n, base.beta[0], base.kappa[0]);
                chain.quantizer_bits = base.quantizer_bits;
                chain.dither_amplitude = base.dither_amplitude;
                let mut setup = MeasureSetup::new(chain, cfg.control.t, osr, cfg.run.periods);
                setup.seed = cfg.run.seed;
                setup.segment = cfg.analysis.segment;
                setup.allow_unstable = cfg.run.allow_unstable;
                for p in snr_sweep(&setup, &amps, a.tone)? {
                    let show = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
                    let stage = p.runaway.map_or(String::new(), |(s, _)| s.to_string());
                    println!(
                        "n={n} A={:<6} SNR {:>8}  predicted {:.2} dB{}",
                        p.amplitude,
                        p.snr_db.map_or("-".into(), |x| format!("{x:.2}")),
                        p.predicted_db,
                        if p.runaway.is_some() { "  (runaway)" } else { "" }
                    );
                    writeln!(w, "{n},{},{},{},{},{stage}", p.amplitude, show(p.snr_db), show(p.sndr_db), p.predicted_db)?;
                }
            }
            w.flush()?;
            println!("wrote {}", path.display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cmd(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(USAGE)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
