//! Vibration analysis of high-rate IMU data.
//!
//! Welch power spectra and spectrograms, resonance peak extraction, motor
//! rate to RPM calibration, RPM to resonance frequency models and the
//! overlapping Allan deviation.

use crate::geometry::Timestamped;
use nalgebra::{DMatrix, DVector};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

pub const DEFAULT_OVERLAP: f64 = 0.5;
pub const DEFAULT_MIN_PEAK_FREQ: f64 = 20.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VibrationError {
    #[error("invalid signal: {0}")]
    InvalidSignal(&'static str),
    #[error("window of {window} samples exceeds signal length {len}")]
    WindowTooLong { window: usize, len: usize },
    #[error("overlap {0} outside [0, 1)")]
    InvalidOverlap(f64),
    #[error("no spectral peak above {0} Hz")]
    NoPeak(f64),
    #[error("fit is rank deficient: need {needed} distinct abscissae, got {got}")]
    RankDeficient { needed: usize, got: usize },
    #[error("tau {tau} s outside [{min}, {max}] s")]
    TauOutOfRange { tau: f64, min: f64, max: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniformSignal {
    sample_rate: f64,
    values: Vec<f64>,
}

impl UniformSignal {
    pub fn new(sample_rate: f64, values: Vec<f64>) -> Result<Self, VibrationError> {
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(VibrationError::InvalidSignal(
                "sample rate must be positive",
            ));
        }
        if values.len() < 2 {
            return Err(VibrationError::InvalidSignal("need at least two samples"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(VibrationError::InvalidSignal("non-finite sample"));
        }
        Ok(Self {
            sample_rate,
            values,
        })
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.values.len() as f64 / self.sample_rate
    }
}

/// One-sided power spectral density.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerSpectrum {
    pub freqs: Vec<f64>,
    pub power: Vec<f64>,
}

impl PowerSpectrum {
    pub fn resolution(&self) -> f64 {
        if self.freqs.len() < 2 {
            0.0
        } else {
            self.freqs[1] - self.freqs[0]
        }
    }

    /// Rectangle-rule integral of the density, i.e. the signal power.
    pub fn total_power(&self) -> f64 {
        self.power.iter().sum::<f64>() * self.resolution()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    /// Centre time of each segment, seconds from the first sample.
    pub times: Vec<f64>,
    pub freqs: Vec<f64>,
    /// `power[segment][bin]`
    pub power: Vec<Vec<f64>>,
}

fn hann(n: usize) -> Vec<f64> {
    // periodic form, as used for spectral analysis
    (0..n)
        .map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / n as f64).cos())
        .collect()
}

fn segment_starts(len: usize, window: usize, overlap: f64) -> Result<Vec<usize>, VibrationError> {
    if window < 2 || window > len {
        return Err(VibrationError::WindowTooLong { window, len });
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(VibrationError::InvalidOverlap(overlap));
    }
    let step = (((1.0 - overlap) * window as f64).round() as usize).max(1);
    Ok((0..=len - window).step_by(step).collect())
}

struct Periodogram {
    window: Vec<f64>,
    scale: f64,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    n_bins: usize,
}

impl Periodogram {
    fn new(window_len: usize, sample_rate: f64) -> Self {
        let window = hann(window_len);
        let scale = 1.0 / (sample_rate * window.iter().map(|w| w * w).sum::<f64>());
        let fft = FftPlanner::new().plan_fft_forward(window_len);
        Self {
            window,
            scale,
            fft,
            n_bins: window_len / 2 + 1,
        }
    }

    fn compute(&self, segment: &[f64]) -> Vec<f64> {
        let n = segment.len();
        let mean = segment.iter().sum::<f64>() / n as f64;
        let mut buf: Vec<Complex<f64>> = segment
            .iter()
            .zip(&self.window)
            .map(|(x, w)| Complex::new((x - mean) * w, 0.0))
            .collect();
        self.fft.process(&mut buf);
        (0..self.n_bins)
            .map(|k| {
                let p = buf[k].norm_sqr() * self.scale;
                // fold negative frequencies, except DC and Nyquist
                if k == 0 || (n % 2 == 0 && k == n / 2) {
                    p
                } else {
                    2.0 * p
                }
            })
            .collect()
    }
}

fn bin_freqs(n_bins: usize, window_len: usize, sample_rate: f64) -> Vec<f64> {
    (0..n_bins)
        .map(|k| k as f64 * sample_rate / window_len as f64)
        .collect()
}

/// Averaged Hann-windowed periodograms. Each segment has its mean removed,
/// so the integral of the result approximates the signal variance.
pub fn welch_psd(
    sig: &UniformSignal,
    window_len: usize,
    overlap: f64,
) -> Result<PowerSpectrum, VibrationError> {
    let spec = spectrogram(sig, window_len, overlap)?;
    let n = spec.power.len() as f64;
    let mut power = vec![0.0; spec.freqs.len()];
    for seg in &spec.power {
        for (acc, p) in power.iter_mut().zip(seg) {
            *acc += p / n;
        }
    }
    Ok(PowerSpectrum {
        freqs: spec.freqs,
        power,
    })
}

/// Per-segment periodograms with the same scaling as [`welch_psd`].
pub fn spectrogram(
    sig: &UniformSignal,
    window_len: usize,
    overlap: f64,
) -> Result<Spectrogram, VibrationError> {
    let starts = segment_starts(sig.len(), window_len, overlap)?;
    let pg = Periodogram::new(window_len, sig.sample_rate);
    let fs = sig.sample_rate;
    let power = starts
        .iter()
        .map(|&s| pg.compute(&sig.values[s..s + window_len]))
        .collect();
    Ok(Spectrogram {
        times: starts
            .iter()
            .map(|&s| (s as f64 + window_len as f64 / 2.0) / fs)
            .collect(),
        freqs: bin_freqs(pg.n_bins, window_len, fs),
        power,
    })
}

/// Default window: two seconds of data.
pub fn default_window_len(sample_rate: f64) -> usize {
    (2.0 * sample_rate).round() as usize
}

/// Frequency of the strongest local maximum above `min_freq`, refined by a
/// parabola through the log-power of the peak bin and its neighbours.
pub fn find_main_peak(spec: &PowerSpectrum, min_freq: f64) -> Result<f64, VibrationError> {
    let p = &spec.power;
    let mut best: Option<usize> = None;
    for k in 1..p.len().saturating_sub(1) {
        if spec.freqs[k] < min_freq || p[k] <= 0.0 {
            continue;
        }
        if p[k] > p[k - 1] && p[k] >= p[k + 1] && best.is_none_or(|b| p[k] > p[b]) {
            best = Some(k);
        }
    }
    let k = best.ok_or(VibrationError::NoPeak(min_freq))?;
    let floor = f64::MIN_POSITIVE;
    let (l, c, r) = (
        p[k - 1].max(floor).ln(),
        p[k].ln(),
        p[k + 1].max(floor).ln(),
    );
    let denom = l - 2.0 * c + r;
    let shift = if denom < 0.0 {
        (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    Ok(spec.freqs[k] + shift * spec.resolution())
}

/// Least-squares polynomial of the given degree; columns are scaled before
/// solving to keep the system well conditioned.
fn polyfit(x: &[f64], y: &[f64], degree: usize) -> Result<Vec<f64>, VibrationError> {
    let mut distinct: Vec<f64> = x.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() <= degree || x.len() != y.len() {
        return Err(VibrationError::RankDeficient {
            needed: degree + 1,
            got: distinct.len(),
        });
    }
    let cols = degree + 1;
    let mut a = DMatrix::from_fn(x.len(), cols, |i, j| x[i].powi(j as i32));
    let scales: Vec<f64> = (0..cols).map(|j| a.column(j).norm()).collect();
    for (j, s) in scales.iter().enumerate() {
        a.column_mut(j).unscale_mut(*s);
    }
    let b = DVector::from_column_slice(y);
    let coeffs = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|_| VibrationError::RankDeficient {
            needed: cols,
            got: distinct.len(),
        })?;
    Ok(coeffs.iter().zip(&scales).map(|(c, s)| c / s).collect())
}

/// `rpm = a0 + a1·rate + a2·rate²`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RpmCalibration {
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
}

impl RpmCalibration {
    pub const PUBLISHED: RpmCalibration = RpmCalibration {
        a0: 168.5541,
        a1: 12.1870,
        a2: -0.0023,
    };
}

/// Measured motor calibration table: (PX4 rate, RPM).
pub const RPM_TABLE: [(f64, f64); 6] = [
    (297.0, 3560.0),
    (486.0, 5605.0),
    (864.0, 9000.0),
    (1242.0, 11800.0),
    (1620.0, 14000.0),
    (1999.0, 15500.0),
];

pub fn fit_rate_to_rpm(pairs: &[(f64, f64)]) -> Result<RpmCalibration, VibrationError> {
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let c = polyfit(&x, &y, 2)?;
    Ok(RpmCalibration {
        a0: c[0],
        a1: c[1],
        a2: c[2],
    })
}

pub fn predict_rpm(cal: &RpmCalibration, rate: f64) -> f64 {
    cal.a0 + rate * (cal.a1 + rate * cal.a2)
}

/// `freq_hz = a0 + a1·rpm`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonanceModel {
    pub a0: f64,
    pub a1: f64,
}

impl ResonanceModel {
    pub const PUBLISHED: ResonanceModel = ResonanceModel {
        a0: 10.6666,
        a1: 0.0161,
    };

    pub fn frequency(&self, rpm: f64) -> f64 {
        self.a0 + self.a1 * rpm
    }
}

pub fn fit_resonance_line(pairs: &[(f64, f64)]) -> Result<ResonanceModel, VibrationError> {
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let c = polyfit(&x, &y, 1)?;
    Ok(ResonanceModel { a0: c[0], a1: c[1] })
}

/// Expected resonance frequency per motor, chaining rate → RPM → Hz.
pub fn predict_resonances(
    model: &ResonanceModel,
    cal: &RpmCalibration,
    motor_rates: &[Timestamped<[f64; 4]>],
) -> Vec<Timestamped<[f64; 4]>> {
    motor_rates
        .iter()
        .map(|s| Timestamped::new(s.t, s.value.map(|r| model.frequency(predict_rpm(cal, r)))))
        .collect()
}

/// Valid averaging-time range for a signal.
pub fn tau_range(sig: &UniformSignal) -> (f64, f64) {
    (2.0 / sig.sample_rate, sig.duration() / 9.0)
}

/// `count` logarithmically spaced averaging times spanning the valid range.
pub fn log_spaced_taus(sig: &UniformSignal, count: usize) -> Vec<f64> {
    let (lo, hi) = tau_range(sig);
    if count < 2 || hi <= lo {
        return if hi >= lo { vec![lo] } else { Vec::new() };
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|k| {
            (a + (b - a) * k as f64 / (count - 1) as f64)
                .exp()
                .clamp(lo, hi)
        })
        .collect()
}

/// Overlapping Allan deviation of a rate signal. Each tau is rounded to a
/// whole number of samples; the returned tau is the one actually used.
pub fn allan_deviation(
    sig: &UniformSignal,
    taus: &[f64],
) -> Result<Vec<(f64, f64)>, VibrationError> {
    let fs = sig.sample_rate;
    let (lo, hi) = tau_range(sig);
    let n = sig.len();
    let mut theta = Vec::with_capacity(n + 1);
    theta.push(0.0);
    let mut acc = 0.0;
    for v in &sig.values {
        acc += v / fs;
        theta.push(acc);
    }
    taus.iter()
        .map(|&tau| {
            let tol = 1e-9 * tau.abs();
            if !(tau >= lo - tol && tau <= hi + tol) {
                return Err(VibrationError::TauOutOfRange {
                    tau,
                    min: lo,
                    max: hi,
                });
            }
            let m = ((tau * fs).round() as usize).max(2);
            let tau_m = m as f64 / fs;
            let terms = n + 1 - 2 * m;
            let sum: f64 = (0..terms)
                .map(|k| {
                    let d = theta[k + 2 * m] - 2.0 * theta[k + m] + theta[k];
                    d * d
                })
                .sum();
            let avar = sum / (2.0 * tau_m * tau_m * terms as f64);
            Ok((tau_m, avar.sqrt()))
        })
        .collect()
}

/// Least-squares slope of log10(adev) against log10(tau).
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(t, a)| *t > 0.0 && *a > 0.0)
        .map(|(t, a)| (t.log10(), a.log10()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}
