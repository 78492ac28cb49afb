//! Post-processing time synchronisation.
//!
//! Offsets are found by normalised cross-correlation of scalar traces after
//! resampling both onto a common uniform grid. The three cascade stages feed
//! it antenna speeds, heading rates and angular-rate norms respectively.
//!
//! Sign convention: a positive offset means the second trace lags the first,
//! i.e. `b(t) ≈ a(t − delta)`. Subtracting `delta` from the timestamps of `b`
//! aligns it with `a`.

use crate::geometry::{exp_so3, log_so3, RotationMatrix, TimeSeries, Timestamped, Vec3};
use thiserror::Error;

pub const DEFAULT_MAX_LAG: f64 = 2.0;
/// Minimum fraction of the shorter trace that must overlap at a lag.
pub const MIN_OVERLAP_FRACTION: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TimeSyncError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("timestamps not strictly increasing at index {0}")]
    NonMonotonic(usize),
    #[error("trace lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("traces do not overlap enough for the lag window")]
    InsufficientOverlap,
    #[error("trace has zero variance")]
    FlatSignal,
    #[error("series spans {0:.3} s, need at least {1:.3} s")]
    TooShort(f64, f64),
    #[error("motion along the baseline too weak to refine the offset")]
    Unobservable,
}

/// Scalar channel sampled at strictly increasing times.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalTrace {
    t: Vec<f64>,
    v: Vec<f64>,
}

impl SignalTrace {
    pub fn new(t: Vec<f64>, v: Vec<f64>) -> Result<Self, TimeSyncError> {
        if t.len() != v.len() {
            return Err(TimeSyncError::LengthMismatch(t.len(), v.len()));
        }
        if t.len() < 2 {
            return Err(TimeSyncError::TooFewSamples(t.len()));
        }
        if let Some(i) = t.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(TimeSyncError::NonMonotonic(i + 1));
        }
        if let Some(i) = t
            .iter()
            .zip(&v)
            .position(|(a, b)| !a.is_finite() || !b.is_finite())
        {
            return Err(TimeSyncError::NonFinite(i));
        }
        Ok(Self { t, v })
    }

    pub fn from_series(series: &[Timestamped<f64>]) -> Result<Self, TimeSyncError> {
        Self::new(
            series.iter().map(|s| s.t).collect(),
            series.iter().map(|s| s.value).collect(),
        )
    }

    pub fn times(&self) -> &[f64] {
        &self.t
    }

    pub fn values(&self) -> &[f64] {
        &self.v
    }

    pub fn duration(&self) -> f64 {
        self.t[self.t.len() - 1] - self.t[0]
    }

    fn mean_rate(&self) -> f64 {
        (self.t.len() - 1) as f64 / self.duration()
    }

    /// Linear interpolation; `None` outside the sampled range.
    pub fn interpolate(&self, t: f64) -> Option<f64> {
        interpolate_sorted(&self.t, &self.v, t)
    }
}

pub(crate) fn interpolate_sorted(ts: &[f64], vs: &[f64], t: f64) -> Option<f64> {
    let n = ts.len();
    if n == 0 || t < ts[0] || t > ts[n - 1] {
        return None;
    }
    let i = ts.partition_point(|&x| x <= t);
    if i == 0 {
        return Some(vs[0]);
    }
    if i == n {
        return Some(vs[n - 1]);
    }
    let (t0, t1) = (ts[i - 1], ts[i]);
    let w = (t - t0) / (t1 - t0);
    Some(vs[i - 1] * (1.0 - w) + vs[i] * w)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeOffset {
    /// Seconds; positive when the second trace lags the first.
    pub delta: f64,
    pub peak_correlation: f64,
}

/// Central differences inside, one-sided differences at both ends.
pub fn differentiate(series: &[Timestamped<Vec3>]) -> Result<TimeSeries<Vec3>, TimeSyncError> {
    let n = series.len();
    if n < 2 {
        return Err(TimeSyncError::TooFewSamples(n));
    }
    if let Some(i) = crate::geometry::first_non_monotonic(series) {
        return Err(TimeSyncError::NonMonotonic(i));
    }
    Ok((0..n)
        .map(|k| {
            let (lo, hi) = (k.saturating_sub(1), (k + 1).min(n - 1));
            let d = (series[hi].value - series[lo].value) / (series[hi].t - series[lo].t);
            Timestamped::new(series[k].t, d)
        })
        .collect())
}

pub fn differentiate_trace(trace: &SignalTrace) -> Result<SignalTrace, TimeSyncError> {
    let n = trace.t.len();
    let v = (0..n)
        .map(|k| {
            let (lo, hi) = (k.saturating_sub(1), (k + 1).min(n - 1));
            (trace.v[hi] - trace.v[lo]) / (trace.t[hi] - trace.t[lo])
        })
        .collect();
    SignalTrace::new(trace.t.clone(), v)
}

/// Removes jumps larger than π between consecutive angles.
pub fn unwrap_angles(angles: &mut [f64]) {
    use std::f64::consts::TAU;
    let Some(&first) = angles.first() else {
        return;
    };
    let mut prev_raw = first;
    let mut offset = 0.0;
    for a in angles.iter_mut().skip(1) {
        let raw = *a;
        offset -= TAU * ((raw - prev_raw) / TAU).round();
        prev_raw = raw;
        *a = raw + offset;
    }
}

struct Resampled {
    start: i64,
    values: Vec<f64>,
}

fn resample(trace: &SignalTrace, origin: f64, dt: f64) -> Resampled {
    let first = ((trace.t[0] - origin) / dt - 1e-9).ceil() as i64;
    let last = ((trace.t[trace.t.len() - 1] - origin) / dt + 1e-9).floor() as i64;
    let values = (first..=last)
        .map(|i| {
            let t = (origin + i as f64 * dt).clamp(trace.t[0], trace.t[trace.t.len() - 1]);
            trace.interpolate(t).expect("grid inside trace range")
        })
        .collect();
    Resampled {
        start: first,
        values,
    }
}

fn is_flat(values: &[f64]) -> bool {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() <= 1e-12 * (1.0 + mean.abs())
}

/// Pearson correlation of `a[i]` against `b[i + lag]` over the overlap.
fn correlation_at(a: &Resampled, b: &Resampled, lag: i64, min_overlap: usize) -> Option<f64> {
    let a_end = a.start + a.values.len() as i64;
    let b_end = b.start + b.values.len() as i64;
    let lo = a.start.max(b.start - lag);
    let hi = a_end.min(b_end - lag);
    if hi - lo < min_overlap as i64 {
        return None;
    }
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in lo..hi {
        let x = a.values[(i - a.start) as usize];
        let y = b.values[(i + lag - b.start) as usize];
        sa += x;
        sb += y;
        saa += x * x;
        sbb += y * y;
        sab += x * y;
    }
    let n = (hi - lo) as f64;
    let cov = sab - sa * sb / n;
    let va = saa - sa * sa / n;
    let vb = sbb - sb * sb / n;
    if va <= 0.0 || vb <= 0.0 {
        return Some(0.0);
    }
    Some(cov / (va * vb).sqrt())
}

/// Normalised cross-correlation with parabolic sub-sample refinement.
///
/// Both traces are resampled by linear interpolation at the faster of the
/// two native rates. Lags at which less than half of the shorter trace
/// overlaps are not evaluated.
pub fn estimate_offset_xcorr(
    a: &SignalTrace,
    b: &SignalTrace,
    max_lag: f64,
) -> Result<TimeOffset, TimeSyncError> {
    let dt = 1.0 / a.mean_rate().max(b.mean_rate());
    let origin = a.t[0].min(b.t[0]);
    let ra = resample(a, origin, dt);
    let rb = resample(b, origin, dt);
    if ra.values.len() < 2 || rb.values.len() < 2 {
        return Err(TimeSyncError::InsufficientOverlap);
    }
    if is_flat(&ra.values) || is_flat(&rb.values) {
        return Err(TimeSyncError::FlatSignal);
    }
    let min_overlap =
        ((ra.values.len().min(rb.values.len()) as f64) * MIN_OVERLAP_FRACTION).ceil() as usize;
    let max_k = (max_lag / dt).floor() as i64;
    let corr: Vec<Option<f64>> = (-max_k..=max_k)
        .map(|k| correlation_at(&ra, &rb, k, min_overlap.max(2)))
        .collect();

    let (best_idx, best) = corr
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|c| (i, c)))
        .fold(None, |acc: Option<(usize, f64)>, (i, c)| match acc {
            Some((_, bc)) if bc >= c => acc,
            _ => Some((i, c)),
        })
        .ok_or(TimeSyncError::InsufficientOverlap)?;

    let mut frac = 0.0;
    let mut peak = best;
    if best_idx > 0 && best_idx + 1 < corr.len() {
        if let (Some(cm), Some(cp)) = (corr[best_idx - 1], corr[best_idx + 1]) {
            let denom = cm - 2.0 * best + cp;
            if denom < 0.0 {
                frac = (0.5 * (cm - cp) / denom).clamp(-0.5, 0.5);
                peak = best - 0.25 * (cm - cp) * frac;
            }
        }
    }
    let lag = (best_idx as i64 - max_k) as f64 + frac;
    Ok(TimeOffset {
        delta: lag * dt,
        peak_correlation: peak.clamp(-1.0, 1.0),
    })
}

fn speed_trace(series: &[Timestamped<Vec3>]) -> Result<SignalTrace, TimeSyncError> {
    let vel = differentiate(series)?;
    SignalTrace::new(
        vel.iter().map(|s| s.t).collect(),
        vel.iter().map(|s| s.value.norm()).collect(),
    )
}

/// Offset of antenna 2 relative to antenna 1 from their speed profiles.
pub fn sync_gnss_pair(
    g1: &[Timestamped<Vec3>],
    g2: &[Timestamped<Vec3>],
    max_lag: f64,
) -> Result<TimeOffset, TimeSyncError> {
    let a = speed_trace(g1)?;
    let b = speed_trace(g2)?;
    for d in [a.duration(), b.duration()] {
        if d < 1.0 {
            return Err(TimeSyncError::TooShort(d, 1.0));
        }
    }
    estimate_offset_xcorr(&a, &b, max_lag)
}

/// Result of [`refine_gnss_offset`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineFit {
    pub delta: f64,
    /// Fitted antenna separation in metres.
    pub baseline: f64,
    pub std_error: f64,
    pub pairs: usize,
}

/// Refines a coarse antenna 2 offset using the rigidity of the baseline.
///
/// Each antenna 1 epoch is paired with the antenna 2 sample nearest to
/// `t + coarse`. With `d` the stamp difference and `v` the antenna 2
/// velocity, the measured separation obeys `|p1 - p2| + (b̂·v) d = B + (b̂·v) δ`,
/// which is linear in the baseline `B` and the offset `δ`. No positions are
/// interpolated, so the estimate is free of the lever-arm bias that yaw
/// motion puts into speed correlation.
pub fn refine_gnss_offset(
    g1: &[Timestamped<Vec3>],
    g2: &[Timestamped<Vec3>],
    coarse: f64,
) -> Result<BaselineFit, TimeSyncError> {
    if g1.len() < 3 {
        return Err(TimeSyncError::TooFewSamples(g1.len()));
    }
    let v2 = differentiate(g2)?;
    if let Some(i) = crate::geometry::first_non_monotonic(g1) {
        return Err(TimeSyncError::NonMonotonic(i));
    }
    let t2: Vec<f64> = g2.iter().map(|s| s.t).collect();
    let mut delta = coarse;
    let mut fit = None;
    for _ in 0..3 {
        let mut rows = Vec::with_capacity(g1.len());
        for a in g1 {
            let target = a.t + delta;
            let i = t2.partition_point(|&t| t < target);
            let j = match (i.checked_sub(1), (i < t2.len()).then_some(i)) {
                (Some(l), Some(h)) => {
                    if target - t2[l] <= t2[h] - target {
                        l
                    } else {
                        h
                    }
                }
                (Some(l), None) => l,
                (None, Some(h)) => h,
                (None, None) => continue,
            };
            let lo = j.saturating_sub(1);
            let hi = (j + 1).min(t2.len() - 1);
            // skip pairs farther apart than the local sample spacing
            if (t2[j] - target).abs() > 0.5 * (t2[hi] - t2[lo]).max(f64::EPSILON) {
                continue;
            }
            let b = a.value - g2[j].value;
            let len = b.norm();
            if len == 0.0 || !len.is_finite() {
                continue;
            }
            let x = b.dot(&v2[j].value) / len;
            let d = t2[j] - a.t;
            rows.push((x, len + x * d));
        }
        let n = rows.len();
        if n < 3 {
            return Err(TimeSyncError::InsufficientOverlap);
        }
        let nf = n as f64;
        let mx = rows.iter().map(|r| r.0).sum::<f64>() / nf;
        let my = rows.iter().map(|r| r.1).sum::<f64>() / nf;
        let sxx: f64 = rows.iter().map(|r| (r.0 - mx).powi(2)).sum();
        let sxy: f64 = rows.iter().map(|r| (r.0 - mx) * (r.1 - my)).sum();
        let syy: f64 = rows.iter().map(|r| (r.1 - my).powi(2)).sum();
        if sxx <= 1e-6 * nf {
            return Err(TimeSyncError::Unobservable);
        }
        let slope = sxy / sxx;
        let resid = ((syy - slope * sxy).max(0.0) / (nf - 2.0).max(1.0)).sqrt();
        delta = slope;
        fit = Some(BaselineFit {
            delta,
            baseline: my - slope * mx,
            std_error: resid / sxx.sqrt(),
            pairs: n,
        });
    }
    fit.ok_or(TimeSyncError::InsufficientOverlap)
}

/// Offset of the magnetometer yaw relative to the virtual-GNSS heading.
/// Both inputs are heading angles in radians; they are unwrapped and
/// differentiated before correlation.
pub fn sync_mag_to_vg(
    vg_heading: &SignalTrace,
    mag_heading: &SignalTrace,
    max_lag: f64,
) -> Result<TimeOffset, TimeSyncError> {
    let unwrap = |tr: &SignalTrace| {
        let mut v = tr.v.clone();
        unwrap_angles(&mut v);
        SignalTrace::new(tr.t.clone(), v)
    };
    let a = differentiate_trace(&unwrap(vg_heading)?)?;
    let b = differentiate_trace(&unwrap(mag_heading)?)?;
    estimate_offset_xcorr(&a, &b, max_lag)
}

/// Result of the signal-domain refinements [`refine_mag_offset`] and
/// [`refine_imu_offset`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinedOffset {
    pub delta: f64,
    pub std_error: f64,
    pub pairs: usize,
}

/// Least-squares slope through the origin and its standard error.
fn scalar_step(rows: &[(f64, f64)]) -> Result<(f64, f64), TimeSyncError> {
    let n = rows.len() as f64;
    let jj: f64 = rows.iter().map(|r| r.0 * r.0).sum();
    if jj <= 1e-6 * n {
        return Err(TimeSyncError::Unobservable);
    }
    let step = rows.iter().map(|r| r.0 * r.1).sum::<f64>() / jj;
    let rss: f64 = rows.iter().map(|r| (r.1 - r.0 * step).powi(2)).sum();
    Ok((step, (rss / (n - 1.0).max(1.0) / jj).sqrt()))
}

fn interpolate_unit(series: &[Timestamped<Vec3>], t: f64) -> Option<Vec3> {
    let n = series.len();
    if n < 2 || t < series[0].t || t > series[n - 1].t {
        return None;
    }
    let i = series.partition_point(|s| s.t <= t).clamp(1, n - 1);
    let (a, b) = (&series[i - 1], &series[i]);
    let w = (t - a.t) / (b.t - a.t);
    (a.value * (1.0 - w) + b.value * w).try_normalize(1e-12)
}

/// Refines a coarse magnetometer offset with a rotation-invariant signal.
///
/// The angle between the antenna baseline and the magnetic field does not
/// depend on attitude, so `b̂_w·m̂_w` from GNSS must equal `b̂_b·m̂_b` from
/// the magnetometer read at `t + δ`. The residual is regressed on the rate
/// of the magnetometer side, with a free constant. Unlike the level-vehicle
/// heading this is unaffected by tilt.
pub fn refine_mag_offset(
    baseline_world: &[Timestamped<Vec3>],
    baseline_body: &Vec3,
    field_world: &Vec3,
    mag_body: &[Timestamped<Vec3>],
    coarse: f64,
) -> Result<RefinedOffset, TimeSyncError> {
    if mag_body.len() < 3 {
        return Err(TimeSyncError::TooFewSamples(mag_body.len()));
    }
    if let Some(i) = crate::geometry::first_non_monotonic(mag_body) {
        return Err(TimeSyncError::NonMonotonic(i));
    }
    let (Some(bb), Some(mw)) = (
        baseline_body.try_normalize(1e-12),
        field_world.try_normalize(1e-12),
    ) else {
        return Err(TimeSyncError::FlatSignal);
    };
    // rate over two mean sample intervals on each side
    let h = 2.0 * (mag_body[mag_body.len() - 1].t - mag_body[0].t) / (mag_body.len() - 1) as f64;
    let body_dot = |s: f64| Some(bb.dot(&interpolate_unit(mag_body, s)?));
    let mut delta = coarse;
    let mut out = None;
    for _ in 0..3 {
        let rows: Vec<(f64, f64)> = baseline_world
            .iter()
            .filter_map(|b| {
                let s = b.t + delta;
                let rate = (body_dot(s + h)? - body_dot(s - h)?) / (2.0 * h);
                Some((rate, b.value.try_normalize(1e-12)?.dot(&mw) - body_dot(s)?))
            })
            .collect();
        if rows.len() < 3 {
            return Err(TimeSyncError::InsufficientOverlap);
        }
        let n = rows.len() as f64;
        let mx = rows.iter().map(|r| r.0).sum::<f64>() / n;
        let my = rows.iter().map(|r| r.1).sum::<f64>() / n;
        let centred: Vec<(f64, f64)> = rows.iter().map(|r| (r.0 - mx, r.1 - my)).collect();
        let (step, std_error) = scalar_step(&centred)?;
        delta += step;
        out = Some(RefinedOffset {
            delta,
            std_error,
            pairs: rows.len(),
        });
    }
    out.ok_or(TimeSyncError::InsufficientOverlap)
}

struct GyroIntegral {
    t: Vec<f64>,
    omega: Vec<Vec3>,
    attitude: Vec<RotationMatrix>,
}

impl GyroIntegral {
    fn new(gyro: &[Timestamped<Vec3>]) -> Self {
        let mut attitude = Vec::with_capacity(gyro.len());
        let mut q = RotationMatrix::identity();
        attitude.push(q);
        for w in gyro.windows(2) {
            let omega = 0.5 * (w[0].value + w[1].value);
            q = q * exp_so3(&(omega * (w[1].t - w[0].t)));
            attitude.push(q);
        }
        Self {
            t: gyro.iter().map(|s| s.t).collect(),
            omega: gyro.iter().map(|s| s.value).collect(),
            attitude,
        }
    }

    fn at(&self, t: f64) -> Option<RotationMatrix> {
        let n = self.t.len();
        if t < self.t[0] || t > self.t[n - 1] {
            return None;
        }
        let i = self
            .t
            .partition_point(|&x| x <= t)
            .saturating_sub(1)
            .min(n - 2);
        let omega = 0.5 * (self.omega[i] + self.omega[i + 1]);
        Some(self.attitude[i] * exp_so3(&(omega * (t - self.t[i]))))
    }

    fn relative(&self, a: f64, b: f64) -> Option<RotationMatrix> {
        Some(self.at(a)?.inverse() * self.at(b)?)
    }
}

/// Refines a coarse IMU offset against reference attitudes.
///
/// Relative rotations between reference epochs at least `span` seconds
/// apart are compared with the gyro integral over the same interval,
/// shifted by `δ`. The residual derivative is taken numerically.
pub fn refine_imu_offset(
    gt_rotations: &[Timestamped<RotationMatrix>],
    imu_gyro: &[Timestamped<Vec3>],
    coarse: f64,
    span: f64,
) -> Result<RefinedOffset, TimeSyncError> {
    if imu_gyro.len() < 2 {
        return Err(TimeSyncError::TooFewSamples(imu_gyro.len()));
    }
    if let Some(i) = crate::geometry::first_non_monotonic(imu_gyro) {
        return Err(TimeSyncError::NonMonotonic(i));
    }
    let integral = GyroIntegral::new(imu_gyro);
    let mut pairs = Vec::new();
    let mut k = 0;
    for (j, b) in gt_rotations.iter().enumerate() {
        while k < j && b.t - gt_rotations[k].t > 2.0 * span {
            k += 1;
        }
        if b.t - gt_rotations[k].t >= span {
            pairs.push((k, j));
            k = j;
        }
    }
    let h = 1e-4;
    let mut delta = coarse;
    let mut out = None;
    for _ in 0..3 {
        let residual =
            |a: &Timestamped<RotationMatrix>, b: &Timestamped<RotationMatrix>, d: f64| {
                let imu = integral.relative(a.t + d, b.t + d)?;
                Some(log_so3(&(imu.inverse() * (a.value.inverse() * b.value))))
            };
        let mut rows = Vec::new();
        for &(i, j) in &pairs {
            let (a, b) = (&gt_rotations[i], &gt_rotations[j]);
            let (Some(r), Some(rp), Some(rm)) = (
                residual(a, b, delta),
                residual(a, b, delta + h),
                residual(a, b, delta - h),
            ) else {
                continue;
            };
            let jac = (rp - rm) / (2.0 * h);
            for c in 0..3 {
                rows.push((-jac[c], r[c]));
            }
        }
        if rows.len() < 3 {
            return Err(TimeSyncError::InsufficientOverlap);
        }
        let (step, std_error) = scalar_step(&rows)?;
        delta += step;
        out = Some(RefinedOffset {
            delta,
            std_error,
            pairs: rows.len() / 3,
        });
    }
    out.ok_or(TimeSyncError::InsufficientOverlap)
}

/// Body angular-rate norm `‖log(R_kᵀ R_{k+1})‖ / Δt`, stamped at interval
/// midpoints.
pub fn angular_rate_trace(
    rotations: &[Timestamped<RotationMatrix>],
) -> Result<SignalTrace, TimeSyncError> {
    if rotations.len() < 3 {
        return Err(TimeSyncError::TooFewSamples(rotations.len()));
    }
    if let Some(i) = crate::geometry::first_non_monotonic(rotations) {
        return Err(TimeSyncError::NonMonotonic(i));
    }
    let (t, v) = rotations
        .windows(2)
        .map(|w| {
            let dt = w[1].t - w[0].t;
            let omega = log_so3(&(w[0].value.inverse() * w[1].value)) / dt;
            (0.5 * (w[0].t + w[1].t), omega.norm())
        })
        .unzip();
    SignalTrace::new(t, v)
}

/// Offset of the IMU gyro relative to the rotational ground truth.
pub fn sync_imu_to_gt(
    gt_rotations: &[Timestamped<RotationMatrix>],
    imu_gyro: &[Timestamped<Vec3>],
    max_lag: f64,
) -> Result<TimeOffset, TimeSyncError> {
    let a = angular_rate_trace(gt_rotations)?;
    let b = SignalTrace::new(
        imu_gyro.iter().map(|s| s.t).collect(),
        imu_gyro.iter().map(|s| s.value.norm()).collect(),
    )?;
    estimate_offset_xcorr(&a, &b, max_lag)
}

/// Returns a copy of `series` with `delta` subtracted from every timestamp.
pub fn shift_series<T: Clone>(series: &[Timestamped<T>], delta: f64) -> TimeSeries<T> {
    series
        .iter()
        .map(|s| Timestamped::new(s.t - delta, s.value.clone()))
        .collect()
}
