//! Rigid alignment of trajectory segments into one reference frame.

use crate::geometry::{
    svd_rotation, GeometryError, Pose, RotationMatrix, TimeSeries, Timestamped, Vec3,
};
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MAX_GAP: f64 = 0.05;
/// Timestamps closer than this are considered duplicates when stitching.
pub const DUPLICATE_TIME_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignmentError {
    #[error("point configuration is degenerate (need 3 non-collinear points)")]
    DegenerateGeometry,
    #[error("invalid correspondence weight at index {0}")]
    InvalidWeight(usize),
    #[error("only {0} time-matched pairs inside the overlap windows, need 3")]
    InsufficientOverlap(usize),
    #[error("expected {expected} alignments, got {got}")]
    AlignmentCount { expected: usize, got: usize },
    #[error("duplicate timestamp {0} s in segments of equal priority")]
    NonMonotonicResult(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub a: Vec3,
    pub b: Vec3,
    pub weight: f64,
}

/// Transform with `b ≈ R a + t` that minimises `Σ wᵢ ‖R aᵢ + t − bᵢ‖²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidAlignment {
    pub rotation: RotationMatrix,
    pub translation: Vec3,
    /// Weighted RMS of the point residuals, metres.
    pub rms_residual: f64,
    pub pairs: usize,
}

impl RigidAlignment {
    pub fn identity() -> Self {
        Self {
            rotation: RotationMatrix::identity(),
            translation: Vec3::zeros(),
            rms_residual: 0.0,
            pairs: 0,
        }
    }

    pub fn as_pose(&self) -> Pose {
        Pose::new(self.rotation, self.translation)
    }

    pub fn apply(&self, pose: &Pose) -> Pose {
        self.as_pose().compose(pose)
    }
}

/// Weighted Kabsch solution.
pub fn solve_rigid_alignment(pairs: &[Correspondence]) -> Result<RigidAlignment, AlignmentError> {
    if pairs.len() < 3 {
        return Err(AlignmentError::DegenerateGeometry);
    }
    if let Some(i) = pairs
        .iter()
        .position(|p| !(p.weight >= 0.0) || !p.weight.is_finite())
    {
        return Err(AlignmentError::InvalidWeight(i));
    }
    let w_sum: f64 = pairs.iter().map(|p| p.weight).sum();
    if !(w_sum > 0.0) {
        return Err(AlignmentError::DegenerateGeometry);
    }
    let ca = pairs.iter().map(|p| p.a * p.weight).sum::<Vec3>() / w_sum;
    let cb = pairs.iter().map(|p| p.b * p.weight).sum::<Vec3>() / w_sum;
    let h = pairs.iter().fold(Matrix3::zeros(), |acc, p| {
        acc + (p.b - cb) * (p.a - ca).transpose() * p.weight
    });
    let (rotation, s) = svd_rotation(&h)?;
    // Rank 2 (planar) suffices; rank 1 means collinear points.
    let spread = pairs
        .iter()
        .map(|p| p.weight * (p.a - ca).norm_squared())
        .sum::<f64>();
    if s[1] <= 1e-10 * spread.max(f64::MIN_POSITIVE) || s[0] == 0.0 {
        return Err(AlignmentError::DegenerateGeometry);
    }
    let translation = cb - rotation * ca;
    let sse: f64 = pairs
        .iter()
        .map(|p| p.weight * (rotation * p.a + translation - p.b).norm_squared())
        .sum();
    Ok(RigidAlignment {
        rotation,
        translation,
        rms_residual: (sse / w_sum).sqrt(),
        pairs: pairs.len(),
    })
}

/// Closed time interval in which two segments overlap, e.g. one entry
/// approach.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: f64,
    pub end: f64,
}

impl TimeWindow {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t <= self.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentOptions {
    /// Overlap windows, one per entry approach. Empty means the whole
    /// common time range.
    pub windows: Vec<TimeWindow>,
    /// Maximum time difference for nearest-neighbour matching.
    pub max_gap: f64,
    /// Optional per-sample weights for the outdoor series, e.g. from fix
    /// quality. Same length as the outdoor series.
    pub outdoor_weights: Option<Vec<f64>>,
}

impl Default for AlignmentOptions {
    fn default() -> Self {
        Self {
            windows: Vec::new(),
            max_gap: DEFAULT_MAX_GAP,
            outdoor_weights: None,
        }
    }
}

fn nearest_index<T>(series: &[Timestamped<T>], t: f64) -> Option<usize> {
    if series.is_empty() {
        return None;
    }
    let i = series.partition_point(|s| s.t < t);
    let candidates = [i.checked_sub(1), (i < series.len()).then_some(i)];
    candidates.into_iter().flatten().min_by(|&x, &y| {
        (series[x].t - t)
            .abs()
            .partial_cmp(&(series[y].t - t).abs())
            .unwrap()
    })
}

/// Transform taking the transition segment's frame into the outdoor (world)
/// frame, from position pairs matched by nearest timestamp.
pub fn align_segments(
    outdoor: &[Timestamped<Pose>],
    transition: &[Timestamped<Pose>],
    options: &AlignmentOptions,
) -> Result<RigidAlignment, AlignmentError> {
    let in_window =
        |t: f64| options.windows.is_empty() || options.windows.iter().any(|w| w.contains(t));
    let pairs: Vec<Correspondence> = transition
        .iter()
        .filter(|s| in_window(s.t))
        .filter_map(|s| {
            let j = nearest_index(outdoor, s.t)?;
            if (outdoor[j].t - s.t).abs() > options.max_gap {
                return None;
            }
            let weight = options.outdoor_weights.as_ref().map_or(1.0, |w| w[j]);
            Some(Correspondence {
                a: s.value.translation,
                b: outdoor[j].value.translation,
                weight,
            })
        })
        .collect();
    if pairs.len() < 3 {
        return Err(AlignmentError::InsufficientOverlap(pairs.len()));
    }
    solve_rigid_alignment(&pairs)
}

/// A trajectory segment and its precedence at overlaps.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub poses: TimeSeries<Pose>,
    /// Higher wins where segments overlap in time.
    pub priority: u8,
}

/// Segment priorities by source accuracy.
pub mod priority {
    pub const GNSS: u8 = 0;
    pub const MARKER: u8 = 1;
    pub const MOCAP: u8 = 2;
}

/// Maps every segment into the frame of `segments[0]` and merges them.
///
/// `alignments[k]` maps `segments[k + 1]` into the reference frame. Samples
/// falling inside the time span of a higher-priority segment are dropped.
pub fn stitch_trajectory(
    segments: &[Segment],
    alignments: &[RigidAlignment],
) -> Result<TimeSeries<Pose>, AlignmentError> {
    if segments.is_empty() {
        return Ok(Vec::new());
    }
    if alignments.len() + 1 != segments.len() {
        return Err(AlignmentError::AlignmentCount {
            expected: segments.len() - 1,
            got: alignments.len(),
        });
    }
    let spans: Vec<Option<(f64, f64)>> = segments
        .iter()
        .map(|s| Some((s.poses.first()?.t, s.poses.last()?.t)))
        .collect();

    let mut merged: Vec<(f64, u8, Pose)> = Vec::new();
    for (k, seg) in segments.iter().enumerate() {
        let align = if k == 0 {
            RigidAlignment::identity()
        } else {
            alignments[k - 1]
        };
        for s in &seg.poses {
            let shadowed = segments.iter().zip(&spans).any(|(other, span)| {
                other.priority > seg.priority && span.is_some_and(|(a, b)| s.t >= a && s.t <= b)
            });
            if !shadowed {
                merged.push((s.t, seg.priority, align.apply(&s.value)));
            }
        }
    }
    merged.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(y.1.cmp(&x.1)));

    let mut out: TimeSeries<Pose> = Vec::with_capacity(merged.len());
    let mut last: Option<(f64, u8)> = None;
    for (t, prio, pose) in merged {
        if let Some((lt, lp)) = last {
            if (t - lt).abs() < DUPLICATE_TIME_TOLERANCE {
                if lp == prio {
                    return Err(AlignmentError::NonMonotonicResult(t));
                }
                // lower priority duplicate of an already emitted sample
                continue;
            }
        }
        out.push(Timestamped::new(t, pose));
        last = Some((t, prio));
    }
    Ok(out)
}

/// Largest position jump between consecutive samples of a stitched series.
pub fn max_step(series: &[Timestamped<Pose>]) -> f64 {
    series
        .windows(2)
        .map(|w| (w[1].value.translation - w[0].value.translation).norm())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_so3, geodesic_distance};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-2.0..2.0),
                )
            })
            .collect()
    }

    fn pairs_for(points: &[Vec3], r: &RotationMatrix, t: &Vec3) -> Vec<Correspondence> {
        points
            .iter()
            .map(|a| Correspondence {
                a: *a,
                b: r * a + t,
                weight: 1.0,
            })
            .collect()
    }

    #[test]
    fn identity_correspondence() {
        let pts = cloud(10, 1);
        let al = solve_rigid_alignment(&pairs_for(
            &pts,
            &RotationMatrix::identity(),
            &Vec3::zeros(),
        ))
        .unwrap();
        assert!(geodesic_distance(&al.rotation, &RotationMatrix::identity()) < 1e-12);
        assert!(al.translation.norm() < 1e-12);
        assert!(al.rms_residual < 1e-12);
    }

    #[test]
    fn rotated_and_shifted_cloud() {
        let pts = cloud(10, 2);
        let r = exp_so3(&Vec3::new(0.0, 0.0, 30f64.to_radians()));
        let t = Vec3::new(1.0, 2.0, 3.0);
        let al = solve_rigid_alignment(&pairs_for(&pts, &r, &t)).unwrap();
        assert!(geodesic_distance(&al.rotation, &r) < 1e-10);
        assert_relative_eq!(al.translation, t, epsilon = 1e-10);
    }

    #[test]
    fn degenerate_inputs() {
        let pts = cloud(2, 3);
        assert_eq!(
            solve_rigid_alignment(&pairs_for(
                &pts,
                &RotationMatrix::identity(),
                &Vec3::zeros()
            )),
            Err(AlignmentError::DegenerateGeometry)
        );
        let line: Vec<Vec3> = (0..5)
            .map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0))
            .collect();
        assert_eq!(
            solve_rigid_alignment(&pairs_for(
                &line,
                &RotationMatrix::identity(),
                &Vec3::zeros()
            )),
            Err(AlignmentError::DegenerateGeometry)
        );
    }

    #[test]
    fn residual_is_globally_minimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = cloud(15, 5);
        let r = exp_so3(&Vec3::new(0.2, -0.1, 0.9));
        let t = Vec3::new(-3.0, 0.5, 1.0);
        let noise = rand_distr::Normal::new(0.0, 0.05).unwrap();
        let pairs: Vec<Correspondence> = pts
            .iter()
            .map(|a| Correspondence {
                a: *a,
                b: r * a + t + Vec3::new(rng.sample(noise), rng.sample(noise), rng.sample(noise)),
                weight: rng.random_range(0.5..2.0),
            })
            .collect();
        let al = solve_rigid_alignment(&pairs).unwrap();
        let cost = |r: &RotationMatrix, t: &Vec3| -> f64 {
            pairs
                .iter()
                .map(|p| p.weight * (r * p.a + t - p.b).norm_squared())
                .sum()
        };
        let best = cost(&al.rotation, &al.translation);
        for _ in 0..10_000 {
            let scale: f64 = rng.random_range(1e-6..1e-1);
            let dr = exp_so3(
                &(Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ) * scale),
            );
            let dt = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ) * scale;
            assert!(cost(&(dr * al.rotation), &(al.translation + dt)) >= best - 1e-12);
        }

        // doubling weights changes nothing
        let doubled: Vec<Correspondence> = pairs
            .iter()
            .map(|p| Correspondence {
                weight: 2.0 * p.weight,
                ..*p
            })
            .collect();
        let al2 = solve_rigid_alignment(&doubled).unwrap();
        assert!(geodesic_distance(&al.rotation, &al2.rotation) < 1e-12);
        assert_relative_eq!(al.translation, al2.translation, epsilon = 1e-12);

        // pre-transforming side b composes into the result
        let q = Pose::new(
            exp_so3(&Vec3::new(-0.4, 0.3, 0.2)),
            Vec3::new(10.0, -2.0, 4.0),
        );
        let moved: Vec<Correspondence> = pairs
            .iter()
            .map(|p| Correspondence {
                b: q.transform_point(&p.b),
                ..*p
            })
            .collect();
        let al3 = solve_rigid_alignment(&moved).unwrap();
        let expected = q.compose(&al.as_pose());
        assert!(geodesic_distance(&al3.rotation, &expected.rotation) < 1e-10);
        assert_relative_eq!(al3.translation, expected.translation, epsilon = 1e-9);
    }

    fn track(t0: f64, t1: f64, dt: f64) -> TimeSeries<Pose> {
        let n = ((t1 - t0) / dt).round() as usize;
        (0..=n)
            .map(|i| {
                let t = t0 + i as f64 * dt;
                let p = Vec3::new(
                    5.0 * (0.3 * t).cos(),
                    5.0 * (0.3 * t).sin(),
                    2.0 + 0.5 * (0.7 * t).sin(),
                );
                Timestamped::new(t, Pose::new(exp_so3(&Vec3::new(0.0, 0.0, 0.3 * t)), p))
            })
            .collect()
    }

    #[test]
    fn transition_in_rotated_frame_is_recovered() {
        let outdoor = track(0.0, 30.0, 0.1);
        let frame = Pose::new(
            exp_so3(&Vec3::new(0.1, 0.05, 1.2)),
            Vec3::new(4.0, -7.0, 1.5),
        );
        let transition: TimeSeries<Pose> = outdoor
            .iter()
            .filter(|s| s.t >= 10.0)
            .map(|s| Timestamped::new(s.t, frame.inverse().compose(&s.value)))
            .collect();
        let al = align_segments(&outdoor, &transition, &AlignmentOptions::default()).unwrap();
        assert!(geodesic_distance(&al.rotation, &frame.rotation) < 1e-9);
        assert_relative_eq!(al.translation, frame.translation, epsilon = 1e-9);
    }

    #[test]
    fn disjoint_ranges_have_no_overlap() {
        let a = track(0.0, 10.0, 0.1);
        let b = track(20.0, 30.0, 0.1);
        assert_eq!(
            align_segments(&a, &b, &AlignmentOptions::default()),
            Err(AlignmentError::InsufficientOverlap(0))
        );
    }

    #[test]
    fn stitching_examples() {
        let seg = Segment {
            poses: track(0.0, 5.0, 0.5),
            priority: priority::GNSS,
        };
        let out = stitch_trajectory(std::slice::from_ref(&seg), &[]).unwrap();
        assert_eq!(out, seg.poses);

        let a = Segment {
            poses: track(0.0, 4.9, 0.1),
            priority: priority::GNSS,
        };
        let b = Segment {
            poses: track(5.0, 9.0, 0.1),
            priority: priority::MARKER,
        };
        let out =
            stitch_trajectory(&[a.clone(), b.clone()], &[RigidAlignment::identity()]).unwrap();
        assert_eq!(out.len(), a.poses.len() + b.poses.len());
        assert!(out.windows(2).all(|w| w[1].t > w[0].t));

        // overlap: higher priority wins inside its span
        let c = Segment {
            poses: track(3.0, 9.0, 0.1),
            priority: priority::MARKER,
        };
        let out = stitch_trajectory(&[a.clone(), c], &[RigidAlignment::identity()]).unwrap();
        assert_eq!(out.len(), 30 + 61);

        let dup = Segment {
            poses: track(0.0, 4.9, 0.1),
            priority: priority::GNSS,
        };
        assert!(matches!(
            stitch_trajectory(&[a, dup], &[RigidAlignment::identity()]),
            Err(AlignmentError::NonMonotonicResult(_))
        ));
    }
}
