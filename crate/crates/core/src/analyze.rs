//! Spectral measurements on estimate traces: Welch PSD, SNR/SNDR/SFDR,
//! amplitude sweeps and limit-cycle detection.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::design::design;
use crate::error::{Error, Result};
use crate::estimate::estimate_batch;
use crate::model::{build_chain, ChainSpec, Readout};
use crate::sim::{simulate_chain, ChainRun, InputSignal, Mismatch};
use crate::xfer::{eta_from_osr, predict_snr_db};

pub const DEFAULT_SEGMENT: usize = 1 << 14;
pub const DEFAULT_GUARD: usize = 3;
pub const DEFAULT_HARMONICS: usize = 6;
/// Rolling-median width for the limit-cycle peak detector.
pub const PEAK_MEDIAN_BINS: usize = 51;

/// One-sided power spectral density.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub freqs: Vec<f64>,
    /// units²/Hz.
    pub psd: Vec<f64>,
    pub sample_rate: f64,
    pub segment: usize,
    pub segments: usize,
}

impl Spectrum {
    pub fn df(&self) -> f64 {
        self.sample_rate / self.segment as f64
    }

    pub fn bin_of(&self, f: f64) -> usize {
        ((f / self.df()).round().max(0.0) as usize).min(self.psd.len() - 1)
    }

    /// Power in bins `[lo, hi]` (inclusive).
    pub fn bin_power(&self, lo: usize, hi: usize) -> f64 {
        self.psd[lo..=hi.min(self.psd.len() - 1)].iter().sum::<f64>() * self.df()
    }

    pub fn total_power(&self) -> f64 {
        self.bin_power(0, self.psd.len() - 1)
    }
}

/// Welch PSD with a Hann window, mean removal and the given
/// overlap fraction. The density integrates to the sample variance.
pub fn psd(samples: &[f64], sample_rate: f64, segment: usize, overlap: f64) -> Result<Spectrum> {
    if !segment.is_power_of_two() || segment < 8 {
        return Err(Error::InvalidParameter(format!("segment length {segment} must be a power of two ≥ 8")));
    }
    if samples.len() < segment {
        return Err(Error::TooFewSamples { got: samples.len(), need: segment });
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidParameter("overlap must be in [0, 1)".into()));
    }
    let step = ((segment as f64 * (1.0 - overlap)).round() as usize).max(1);
    let window: Vec<f64> = (0..segment)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / segment as f64).cos())
        .collect();
    let u: f64 = window.iter().map(|w| w * w).sum();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(segment);
    let bins = segment / 2 + 1;
    let mut acc = vec![0.0; bins];
    let mut buf = vec![Complex::new(0.0, 0.0); segment];
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let mut segments = 0;
    let mut start = 0;
    while start + segment <= samples.len() {
        let seg = &samples[start..start + segment];
        for (b, (x, w)) in buf.iter_mut().zip(seg.iter().zip(&window)) {
            *b = Complex::new((x - mean) * w, 0.0);
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
        segments += 1;
        start += step;
    }
    let scale = 1.0 / (sample_rate * u * segments as f64);
    let psd: Vec<f64> = acc
        .iter()
        .enumerate()
        .map(|(i, a)| a * scale * if i == 0 || i == segment / 2 { 1.0 } else { 2.0 })
        .collect();
    let df = sample_rate / segment as f64;
    Ok(Spectrum { freqs: (0..bins).map(|i| i as f64 * df).collect(), psd, sample_rate, segment, segments })
}

/// Welch PSD with the default segment (capped at the largest power of two
/// that fits) and 50% overlap.
pub fn welch(samples: &[f64], sample_rate: f64) -> Result<Spectrum> {
    let fit = if samples.len() >= 8 { 1usize << samples.len().ilog2() } else { 8 };
    psd(samples, sample_rate, DEFAULT_SEGMENT.min(fit), 0.5)
}

/// Nearest frequency to `f` that falls on a bin centre of a `segment`-point
/// transform.
pub fn coherent_frequency(f: f64, sample_rate: f64, segment: usize) -> f64 {
    let df = sample_rate / segment as f64;
    (f / df).round().max(1.0) * df
}

pub fn db(x: f64) -> f64 {
    10.0 * x.log10()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToneMetrics {
    pub snr_db: f64,
    pub sndr_db: f64,
    pub sfdr_db: f64,
    pub tone_hz: f64,
    pub tone_amp: f64,
    pub signal_power: f64,
    pub noise_power: f64,
    pub distortion_power: f64,
}

/// Report written by the `analyze` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub snr_db: Option<f64>,
    pub sndr_db: Option<f64>,
    pub sfdr_db: Option<f64>,
    pub tone_hz: Option<f64>,
    pub tone_amp: Option<f64>,
    pub band: [f64; 2],
    /// In-band noise power (all in-band power when there is no tone).
    pub noise_power: f64,
}

fn band_bins(spec: &Spectrum, band: (f64, f64)) -> Result<(usize, usize)> {
    let (lo, hi) = band;
    if !(hi > lo && lo >= 0.0) {
        return Err(Error::InvalidParameter(format!("invalid band [{lo}, {hi}]")));
    }
    // DC is removed and never counted.
    let lo_bin = spec.bin_of(lo).max(1);
    let hi_bin = spec.bin_of(hi);
    if hi_bin < lo_bin {
        return Err(Error::InvalidParameter("band contains no bins".into()));
    }
    Ok((lo_bin, hi_bin))
}

/// Bin range `[c − guard, c + guard]` clipped to the band.
fn around(c: usize, guard: usize, lo: usize, hi: usize) -> (usize, usize) {
    (c.saturating_sub(guard).max(lo), (c + guard).min(hi))
}

/// Tone SNR, SNDR and SFDR within `band`.
///
/// The signal is the power of the strongest in-band bin ± `guard` bins; the
/// noise is the remaining in-band power excluding (SNR) or including (SNDR)
/// the first `harmonics` harmonics (aliases folded into the spectrum). SFDR
/// compares the tone with the strongest other in-band component measured
/// the same way.
pub fn snr_in_band(spec: &Spectrum, band: (f64, f64), guard: usize, harmonics: usize) -> Result<ToneMetrics> {
    let (lo, hi) = band_bins(spec, band)?;
    let peak = (lo..=hi).max_by(|&a, &b| spec.psd[a].total_cmp(&spec.psd[b])).expect("non-empty band");
    let mut sorted: Vec<f64> = spec.psd[lo..=hi].to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    if !(spec.psd[peak] > 100.0 * median) {
        return Err(Error::NoTone);
    }
    let tone_hz = {
        let p = |i: usize| spec.psd[i].max(f64::MIN_POSITIVE).ln();
        let offset = if peak > 0 && peak + 1 < spec.psd.len() {
            let (a, b, c) = (p(peak - 1), p(peak), p(peak + 1));
            let d = a - 2.0 * b + c;
            if d < 0.0 {
                0.5 * (a - c) / d
            } else {
                0.0
            }
        } else {
            0.0
        };
        (peak as f64 + offset) * spec.df()
    };

    let mut tone_mask = vec![false; spec.psd.len()];
    let (a, b) = around(peak, guard, lo, hi);
    tone_mask[a..=b].iter_mut().for_each(|m| *m = true);
    let signal = spec.bin_power(a, b);

    let nyquist = spec.sample_rate / 2.0;
    let mut harm_mask = vec![false; spec.psd.len()];
    for h in 2..=harmonics + 1 {
        let mut f = (h as f64 * tone_hz) % spec.sample_rate;
        if f > nyquist {
            f = spec.sample_rate - f;
        }
        let c = spec.bin_of(f);
        if c + guard < lo || c > hi + guard {
            continue;
        }
        let (a, b) = around(c, guard, lo, hi);
        for i in a..=b {
            if !tone_mask[i] {
                harm_mask[i] = true;
            }
        }
    }
    let df = spec.df();
    let mut noise = 0.0;
    let mut distortion = 0.0;
    for i in lo..=hi {
        if tone_mask[i] {
            continue;
        }
        if harm_mask[i] {
            distortion += spec.psd[i] * df;
        } else {
            noise += spec.psd[i] * df;
        }
    }

    // Largest spur: strongest remaining bin, integrated like the tone.
    let spur = (lo..=hi)
        .filter(|&i| !tone_mask[i])
        .max_by(|&x, &y| spec.psd[x].total_cmp(&spec.psd[y]))
        .map(|c| {
            let (a, b) = around(c, guard, lo, hi);
            (a..=b).filter(|&i| !tone_mask[i]).map(|i| spec.psd[i] * df).sum::<f64>()
        })
        .unwrap_or(0.0);

    Ok(ToneMetrics {
        snr_db: db(signal / noise),
        sndr_db: db(signal / (noise + distortion)),
        sfdr_db: db(signal / spur),
        tone_hz,
        tone_amp: (2.0 * signal).sqrt(),
        signal_power: signal,
        noise_power: noise,
        distortion_power: distortion,
    })
}

/// Power in the band with DC excluded.
pub fn band_power(spec: &Spectrum, band: (f64, f64)) -> Result<f64> {
    let (lo, hi) = band_bins(spec, band)?;
    Ok(spec.bin_power(lo, hi))
}

/// Tone metrics when a tone is present, the plain in-band noise otherwise.
pub fn report(spec: &Spectrum, band: (f64, f64)) -> Result<SpectrumReport> {
    match snr_in_band(spec, band, DEFAULT_GUARD, DEFAULT_HARMONICS) {
        Ok(m) => Ok(SpectrumReport {
            snr_db: Some(m.snr_db),
            sndr_db: Some(m.sndr_db),
            sfdr_db: Some(m.sfdr_db),
            tone_hz: Some(m.tone_hz),
            tone_amp: Some(m.tone_amp),
            band: [band.0, band.1],
            noise_power: m.noise_power,
        }),
        Err(Error::NoTone) => Ok(SpectrumReport {
            snr_db: None,
            sndr_db: None,
            sfdr_db: None,
            tone_hz: None,
            tone_amp: None,
            band: [band.0, band.1],
            noise_power: band_power(spec, band)?,
        }),
        Err(e) => Err(e),
    }
}

/// Largest peak prominence, in dB over the rolling median of
/// [`PEAK_MEDIAN_BINS`] bins, among bins in `[lo, hi]` Hz. Bins closer to DC
/// than half the median width are skipped.
pub fn peak_prominence(spec: &Spectrum, band: (f64, f64)) -> Result<(f64, f64)> {
    let half = PEAK_MEDIAN_BINS / 2;
    let (lo, hi) = band_bins(spec, band)?;
    let lo = lo.max(half + 1);
    if lo > hi {
        return Err(Error::InvalidParameter("band too narrow for the peak detector".into()));
    }
    let mut best = (0.0, f64::NEG_INFINITY);
    let mut window = Vec::with_capacity(PEAK_MEDIAN_BINS);
    for i in lo..=hi {
        let a = i.saturating_sub(half).max(1);
        let b = (i + half).min(spec.psd.len() - 1);
        window.clear();
        window.extend_from_slice(&spec.psd[a..=b]);
        window.sort_by(f64::total_cmp);
        let median = window[window.len() / 2];
        let p = db(spec.psd[i] / median);
        if p > best.1 {
            best = (spec.freqs[i], p);
        }
    }
    Ok(best)
}

/// Everything a chain measurement run needs besides the input.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureSetup {
    pub spec: ChainSpec,
    pub t: f64,
    pub osr: f64,
    pub periods: usize,
    pub seed: u64,
    pub segment: usize,
    pub mismatch: Option<Mismatch>,
    pub allow_unstable: bool,
}

impl MeasureSetup {
    pub fn new(spec: ChainSpec, t: f64, osr: f64, periods: usize) -> Self {
        Self { spec, t, osr, periods, seed: 0, segment: DEFAULT_SEGMENT, mismatch: None, allow_unstable: false }
    }

    pub fn gamma(&self) -> f64 {
        self.t * self.spec.beta[0].abs()
    }

    pub fn eta2(&self) -> Result<f64> {
        Ok(eta_from_osr(self.gamma(), self.osr, self.spec.n)?.powi(2))
    }

    /// Signal band `[0, f_crit]` with `f_crit = 1/(2 T OSR)`.
    pub fn band(&self) -> (f64, f64) {
        (0.0, 1.0 / (2.0 * self.t * self.osr))
    }

    /// Simulate, estimate (batch, nominal coefficients) and return the
    /// spectrum of the valid part of the estimate.
    pub fn spectrum(&self, input: InputSignal) -> Result<Spectrum> {
        let nominal = build_chain(&self.spec, Readout::LastState, 1.0)?;
        let (coeffs, _) = design(&nominal, self.eta2()?, self.t)?;
        let mut run = ChainRun::new(&self.spec, self.t, input, self.periods);
        run.seed = self.seed;
        run.mismatch = self.mismatch.clone();
        run.allow_unstable = self.allow_unstable;
        let (trace, _) = simulate_chain(&run)?;
        let est = estimate_batch(&coeffs, &trace)?;
        let u = est.valid_channel(0);
        psd(&u, est.sample_rate(), self.segment, 0.5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub amplitude: f64,
    /// `None` when no tone is present (zero amplitude).
    pub snr_db: Option<f64>,
    pub sndr_db: Option<f64>,
    pub predicted_db: f64,
    pub noise_power: Option<f64>,
    /// Stage and period at which the states left the 10·b runaway limit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runaway: Option<(usize, usize)>,
}

/// Measured SNR against the white-noise prediction (α = 1) for each
/// amplitude; the tone is moved to the bin centre nearest `f0`.
pub fn snr_sweep(setup: &MeasureSetup, amplitudes: &[f64], f0: f64) -> Result<Vec<SweepPoint>> {
    if amplitudes.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidParameter("amplitudes must be sorted ascending".into()));
    }
    let f = coherent_frequency(f0, 1.0 / setup.t, setup.segment);
    let band = setup.band();
    amplitudes
        .iter()
        .map(|&a| {
            let input = if a == 0.0 { InputSignal::Zero } else { InputSignal::Sine { amplitude: a, frequency: f, phase: 0.0 } };
            let predicted_db = predict_snr_db(a, 1.0, setup.spec.n, setup.gamma(), setup.osr, 1.0);
            let spec = match setup.spectrum(input) {
                Ok(s) => s,
                Err(Error::Runaway { stage, period, .. }) => {
                    return Ok(SweepPoint {
                        amplitude: a,
                        snr_db: None,
                        sndr_db: None,
                        predicted_db,
                        noise_power: None,
                        runaway: Some((stage, period)),
                    })
                }
                Err(e) => return Err(e),
            };
            let rep = report(&spec, band)?;
            Ok(SweepPoint {
                amplitude: a,
                snr_db: rep.snr_db,
                sndr_db: rep.sndr_db,
                predicted_db,
                noise_power: Some(rep.noise_power),
                runaway: None,
            })
        })
        .collect()
}

/// Largest in-band narrowband peak (dB over the local median floor) with a
/// constant input, for a chain without and with extra feedback.
pub fn limit_cycle_check(plain: &MeasureSetup, with_feedback: &MeasureSetup, u_const: f64) -> Result<(f64, f64)> {
    let input = InputSignal::Constant { value: u_const };
    let a = peak_prominence(&plain.spectrum(input)?, plain.band())?.1;
    let b = peak_prominence(&with_feedback.spectrum(input)?, with_feedback.band())?.1;
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn noise(len: usize, sigma: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, sigma).unwrap();
        (0..len).map(|_| d.sample(&mut rng)).collect()
    }

    fn tone(len: usize, a: f64, f: f64, fs: f64) -> Vec<f64> {
        (0..len).map(|i| a * (2.0 * std::f64::consts::PI * f * i as f64 / fs).sin()).collect()
    }

    #[test]
    fn sine_power_parseval() {
        let fs = 1000.0;
        let f = coherent_frequency(37.0, fs, 4096);
        let x = tone(1 << 16, 0.8, f, fs);
        let s = psd(&x, fs, 4096, 0.5).unwrap();
        let p = s.total_power();
        assert!((p - 0.32).abs() / 0.32 < 0.01, "{p}");
    }

    #[test]
    fn white_noise_flat() {
        let x = noise(1 << 20, 0.5, 1);
        let s = welch(&x, 2.0).unwrap();
        let p = s.total_power();
        assert!((p - 0.25).abs() / 0.25 < 0.02, "{p}");
        // Expected density σ²/(fs/2).
        let mid: f64 = s.psd[100..8000].iter().sum::<f64>() / 7900.0;
        assert!((mid - 0.25).abs() / 0.25 < 0.02, "{mid}");
    }

    #[test]
    fn snr_of_tone_in_noise() {
        let fs = 1.0;
        let len = 1 << 18;
        let f = coherent_frequency(0.01, fs, DEFAULT_SEGMENT);
        let sigma: f64 = 1e-3;
        let band = (0.0, 0.05);
        let x: Vec<f64> = tone(len, 1.0, f, fs).iter().zip(noise(len, sigma, 2)).map(|(a, b)| a + b).collect();
        let m = snr_in_band(&welch(&x, fs).unwrap(), band, 3, 6).unwrap();
        let p_band = sigma * sigma * band.1 / (fs / 2.0);
        let expect = db(0.5 / p_band);
        assert!((m.snr_db - expect).abs() < 0.3, "{} vs {expect}", m.snr_db);
        assert!((m.tone_hz - f).abs() < 1e-9);
        assert!((m.tone_amp - 1.0).abs() < 1e-3);
    }

    #[test]
    fn clean_tone_snr_is_huge() {
        let fs = 1.0;
        let f = coherent_frequency(0.01, fs, DEFAULT_SEGMENT);
        let x = tone(1 << 20, 1.0, f, fs);
        let m = snr_in_band(&welch(&x, fs).unwrap(), (0.0, 0.05), 3, 6).unwrap();
        assert!(m.snr_db > 120.0, "{}", m.snr_db);
    }

    #[test]
    fn sfdr_of_single_spur() {
        let fs = 1.0;
        let len = 1 << 18;
        let f = coherent_frequency(0.004, fs, DEFAULT_SEGMENT);
        let spur = 1e-3;
        let x: Vec<f64> = tone(len, 1.0, f, fs)
            .iter()
            .zip(tone(len, spur, 3.0 * f, fs))
            .zip(noise(len, 1e-7, 3))
            .map(|((a, b), c)| a + b + c)
            .collect();
        let m = snr_in_band(&welch(&x, fs).unwrap(), (0.0, 0.05), 3, 6).unwrap();
        assert!((m.sfdr_db - 60.0).abs() < 0.2, "{}", m.sfdr_db);
        assert!(m.sndr_db < m.snr_db);
    }

    #[test]
    fn snr_drops_with_added_noise() {
        let fs = 1.0;
        let len = 1 << 18;
        let band = (0.0, 0.05);
        let f = coherent_frequency(0.01, fs, DEFAULT_SEGMENT);
        let base: Vec<f64> = tone(len, 1.0, f, fs).iter().zip(noise(len, 1e-3, 4)).map(|(a, b)| a + b).collect();
        let extra = noise(len, 2e-3, 5);
        let noisier: Vec<f64> = base.iter().zip(&extra).map(|(a, b)| a + b).collect();
        let m1 = snr_in_band(&welch(&base, fs).unwrap(), band, 3, 6).unwrap();
        let m2 = snr_in_band(&welch(&noisier, fs).unwrap(), band, 3, 6).unwrap();
        let expect = db((1.0 + 4.0) / 1.0);
        assert!(((m1.snr_db - m2.snr_db) - expect).abs() < 0.3, "{} {}", m1.snr_db, m2.snr_db);
    }

    #[test]
    fn no_tone_is_reported() {
        let s = welch(&noise(1 << 16, 1.0, 6), 1.0).unwrap();
        assert!(matches!(snr_in_band(&s, (0.0, 0.1), 3, 6), Err(Error::NoTone)));
        let r = report(&s, (0.0, 0.1)).unwrap();
        assert!(r.snr_db.is_none() && r.noise_power > 0.0);
    }

    #[test]
    fn psd_preconditions() {
        assert!(matches!(psd(&[0.0; 100], 1.0, 128, 0.5), Err(Error::TooFewSamples { .. })));
        assert!(psd(&[0.0; 100], 1.0, 48, 0.5).is_err());
    }

    #[test]
    fn prominence_finds_narrow_peak() {
        let fs = 1.0;
        let f = coherent_frequency(0.02, fs, 4096);
        let x: Vec<f64> = tone(1 << 18, 0.2, f, fs).iter().zip(noise(1 << 18, 1.0, 7)).map(|(a, b)| a + b).collect();
        let s = psd(&x, fs, 4096, 0.5).unwrap();
        let (fp, p) = peak_prominence(&s, (0.0, 0.1)).unwrap();
        assert!((fp - f).abs() < 1e-12 && p > 10.0, "{fp} {p}");
        let clean = psd(&noise(1 << 18, 1.0, 8), fs, 4096, 0.5).unwrap();
        assert!(peak_prominence(&clean, (0.0, 0.1)).unwrap().1 < 10.0);
    }
}
