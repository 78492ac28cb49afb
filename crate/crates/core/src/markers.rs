//! Fiducial marker field calibration.
//!
//! Per image, every co-visible pair `(i, j)` with `j < i` yields a relative
//! pose `T_i_j = T_cam_i⁻¹ T_cam_j`. Samples of each pair are filtered at one
//! standard deviation and averaged. The averaged pairs form an undirected
//! graph; each marker's pose relative to the main marker is the geometric
//! median over several randomised bounded-length paths, which keeps a single
//! bad edge from dominating the result.

use crate::geometry::{
    chordal_mean, geodesic_distance, geometric_median, GeometryError, Pose, RotationMatrix, Vec3,
};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use thiserror::Error;

pub type MarkerId = u32;

pub const DEFAULT_N_PATHS: usize = 32;
/// Extra hops allowed beyond the shortest path when sampling paths.
pub const DEFAULT_PATH_SLACK: usize = 2;
pub const WEISZFELD_TOLERANCE: f64 = 1e-10;
const WEISZFELD_MAX_ITER: usize = 10_000;
const MAX_ENUMERATED_PATHS: usize = 20_000;
/// Paths further than this multiple of the median deviation are left out of
/// the rotation average.
const INLIER_FACTOR: f64 = 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarkerError {
    #[error("no samples to average")]
    Empty,
    #[error("main marker {0} has no edges")]
    UnknownMainMarker(MarkerId),
    #[error("no observed marker is part of the calibrated field")]
    NoKnownMarkers,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarkerObservation {
    pub image_id: u64,
    pub marker_id: MarkerId,
    /// `T_cam_marker`
    pub pose: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilteredMean {
    pub pose: Pose,
    pub kept: usize,
    /// Every sample failed the 1σ test; `pose` is the unfiltered mean.
    pub all_rejected: bool,
}

/// Relative pose samples `T_i_j` (marker `j` expressed in marker `i`).
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseTransform {
    pub i: MarkerId,
    pub j: MarkerId,
    pub samples: Vec<Pose>,
    pub mean: FilteredMean,
}

fn mean_pose(samples: &[&Pose]) -> Result<Pose, GeometryError> {
    let n = samples.len() as f64;
    let t = samples.iter().map(|p| p.translation).sum::<Vec3>() / n;
    let r = chordal_mean(samples.iter().map(|p| &p.rotation))?;
    Ok(Pose::new(r, t))
}

/// One-sigma outlier rejection followed by averaging.
///
/// Each translation component and the geodesic distance to the chordal mean
/// rotation are tested independently against their own standard deviation.
pub fn filter_and_mean(samples: &[Pose]) -> Result<FilteredMean, MarkerError> {
    if samples.is_empty() {
        return Err(MarkerError::Empty);
    }
    let all: Vec<&Pose> = samples.iter().collect();
    let unfiltered = mean_pose(&all)?;
    let n = samples.len() as f64;

    let sigma_t: Vec3 = (samples
        .iter()
        .map(|p| {
            (p.translation - unfiltered.translation)
                .component_mul(&(p.translation - unfiltered.translation))
        })
        .sum::<Vec3>()
        / n)
        .map(f64::sqrt);
    let rot_dev: Vec<f64> = samples
        .iter()
        .map(|p| geodesic_distance(&p.rotation, &unfiltered.rotation))
        .collect();
    let sigma_r = (rot_dev.iter().map(|d| d * d).sum::<f64>() / n).sqrt();
    let slack = |s: f64| s * (1.0 + 1e-9) + 1e-12;

    let kept: Vec<&Pose> = samples
        .iter()
        .zip(&rot_dev)
        .filter(|(p, &d)| {
            let dev = p.translation - unfiltered.translation;
            (0..3).all(|k| dev[k].abs() <= slack(sigma_t[k])) && d <= slack(sigma_r)
        })
        .map(|(p, _)| p)
        .collect();

    if kept.is_empty() {
        return Ok(FilteredMean {
            pose: unfiltered,
            kept: samples.len(),
            all_rejected: true,
        });
    }
    Ok(FilteredMean {
        pose: mean_pose(&kept)?,
        kept: kept.len(),
        all_rejected: false,
    })
}

/// Collects relative poses for all co-visible marker pairs.
pub fn extract_pairwise(
    observations: &[MarkerObservation],
) -> Result<Vec<PairwiseTransform>, MarkerError> {
    let mut images: BTreeMap<u64, Vec<&MarkerObservation>> = BTreeMap::new();
    for o in observations {
        images.entry(o.image_id).or_default().push(o);
    }
    let mut acc: BTreeMap<(MarkerId, MarkerId), Vec<Pose>> = BTreeMap::new();
    for obs in images.values() {
        for a in obs {
            for b in obs {
                if b.marker_id < a.marker_id {
                    let t_ij = a.pose.inverse().compose(&b.pose);
                    acc.entry((a.marker_id, b.marker_id))
                        .or_default()
                        .push(t_ij);
                }
            }
        }
    }
    acc.into_iter()
        .map(|((i, j), samples)| {
            let mean = filter_and_mean(&samples)?;
            Ok(PairwiseTransform {
                i,
                j,
                samples,
                mean,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOptions {
    pub n_paths: usize,
    pub path_slack: usize,
    pub seed: u64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            n_paths: DEFAULT_N_PATHS,
            path_slack: DEFAULT_PATH_SLACK,
            seed: 0,
        }
    }
}

/// Marker poses relative to the main marker.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerFieldCalibration {
    pub main_marker: MarkerId,
    pub poses: BTreeMap<MarkerId, Pose>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldCalibrationResult {
    pub calibration: MarkerFieldCalibration,
    /// Pose along one shortest (hop-count) path, before path averaging.
    pub shortest_path: BTreeMap<MarkerId, Pose>,
    /// Number of paths averaged per marker.
    pub paths_used: BTreeMap<MarkerId, usize>,
    /// Markers without a connection to the main marker.
    pub disconnected: Vec<MarkerId>,
}

struct MarkerGraph {
    /// `edges[(a, b)] = T_a_b`, stored in both directions.
    edges: BTreeMap<(MarkerId, MarkerId), Pose>,
    adjacency: BTreeMap<MarkerId, Vec<MarkerId>>,
}

impl MarkerGraph {
    fn new(pairwise: &[PairwiseTransform]) -> Self {
        let mut edges = BTreeMap::new();
        let mut adjacency: BTreeMap<MarkerId, BTreeSet<MarkerId>> = BTreeMap::new();
        for p in pairwise {
            edges.insert((p.i, p.j), p.mean.pose);
            edges.insert((p.j, p.i), p.mean.pose.inverse());
            adjacency.entry(p.i).or_default().insert(p.j);
            adjacency.entry(p.j).or_default().insert(p.i);
        }
        Self {
            edges,
            adjacency: adjacency
                .into_iter()
                .map(|(k, v)| (k, v.into_iter().collect()))
                .collect(),
        }
    }

    fn neighbours(&self, m: MarkerId) -> &[MarkerId] {
        self.adjacency.get(&m).map_or(&[], |v| v.as_slice())
    }

    fn hop_distances(&self, from: MarkerId) -> BTreeMap<MarkerId, usize> {
        let mut dist = BTreeMap::from([(from, 0usize)]);
        let mut queue = VecDeque::from([from]);
        while let Some(u) = queue.pop_front() {
            let d = dist[&u];
            for &v in self.neighbours(u) {
                if !dist.contains_key(&v) {
                    dist.insert(v, d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    fn shortest_path(
        &self,
        from: MarkerId,
        to: MarkerId,
        to_dist: &BTreeMap<MarkerId, usize>,
    ) -> Vec<MarkerId> {
        // Walk downhill in the distance field from the target.
        let mut path = vec![from];
        let mut cur = from;
        while cur != to {
            let d = to_dist[&cur];
            cur = *self
                .neighbours(cur)
                .iter()
                .find(|v| to_dist.get(v) == Some(&(d - 1)))
                .expect("distance field is consistent");
            path.push(cur);
        }
        path
    }

    /// All simple paths from `from` to `to` with at most `max_len` edges.
    fn bounded_paths(
        &self,
        from: MarkerId,
        to: MarkerId,
        max_len: usize,
        to_dist: &BTreeMap<MarkerId, usize>,
    ) -> Vec<Vec<MarkerId>> {
        let mut out = Vec::new();
        let mut path = vec![from];
        let mut on_path = BTreeSet::from([from]);
        self.extend_paths(to, max_len, to_dist, &mut path, &mut on_path, &mut out);
        out
    }

    fn extend_paths(
        &self,
        to: MarkerId,
        max_len: usize,
        to_dist: &BTreeMap<MarkerId, usize>,
        path: &mut Vec<MarkerId>,
        on_path: &mut BTreeSet<MarkerId>,
        out: &mut Vec<Vec<MarkerId>>,
    ) {
        if out.len() >= MAX_ENUMERATED_PATHS {
            return;
        }
        let cur = *path.last().unwrap();
        if cur == to {
            out.push(path.clone());
            return;
        }
        let used = path.len() - 1;
        for &v in self.neighbours(cur) {
            if on_path.contains(&v) {
                continue;
            }
            let Some(&d) = to_dist.get(&v) else { continue };
            if used + 1 + d > max_len {
                continue;
            }
            path.push(v);
            on_path.insert(v);
            self.extend_paths(to, max_len, to_dist, path, on_path, out);
            on_path.remove(&v);
            path.pop();
        }
    }

    fn compose_path(&self, path: &[MarkerId]) -> Pose {
        path.windows(2).fold(Pose::identity(), |acc, w| {
            acc.compose(&self.edges[&(w[0], w[1])])
        })
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Robust average of pose estimates: geometric-median translation and the
/// chordal mean of the rotations that are not outliers in translation or
/// rotation.
pub fn robust_pose_average(estimates: &[Pose]) -> Result<Pose, MarkerError> {
    if estimates.is_empty() {
        return Err(MarkerError::Empty);
    }
    let translations: Vec<Vec3> = estimates.iter().map(|p| p.translation).collect();
    let t_med = geometric_median(&translations, WEISZFELD_TOLERANCE, WEISZFELD_MAX_ITER)
        .expect("non-empty");

    // rotation medoid under the geodesic metric
    let medoid = estimates
        .iter()
        .map(|a| {
            let cost: f64 = estimates
                .iter()
                .map(|b| geodesic_distance(&a.rotation, &b.rotation))
                .sum();
            (cost, a.rotation)
        })
        .fold(None, |best: Option<(f64, RotationMatrix)>, c| match best {
            Some(b) if b.0 <= c.0 => Some(b),
            _ => Some(c),
        })
        .expect("non-empty")
        .1;

    let t_dev: Vec<f64> = translations.iter().map(|t| (t - t_med).norm()).collect();
    let r_dev: Vec<f64> = estimates
        .iter()
        .map(|p| geodesic_distance(&p.rotation, &medoid))
        .collect();
    let t_thresh = INLIER_FACTOR * median(&mut t_dev.clone()) + 1e-9;
    let r_thresh = INLIER_FACTOR * median(&mut r_dev.clone()) + 1e-9;
    let inliers: Vec<&RotationMatrix> = estimates
        .iter()
        .zip(t_dev.iter().zip(&r_dev))
        .filter(|(_, (&dt, &dr))| dt <= t_thresh && dr <= r_thresh)
        .map(|(p, _)| &p.rotation)
        .collect();
    let rotation = if inliers.is_empty() {
        medoid
    } else {
        chordal_mean(inliers)?
    };
    Ok(Pose::new(rotation, t_med))
}

/// Poses of all markers relative to `main`.
pub fn calibrate_field(
    pairwise: &[PairwiseTransform],
    main: MarkerId,
    options: &CalibrationOptions,
) -> Result<FieldCalibrationResult, MarkerError> {
    let graph = MarkerGraph::new(pairwise);
    if !graph.adjacency.contains_key(&main) {
        return Err(MarkerError::UnknownMainMarker(main));
    }
    let mut poses = BTreeMap::from([(main, Pose::identity())]);
    let mut shortest = BTreeMap::from([(main, Pose::identity())]);
    let mut paths_used = BTreeMap::new();
    let mut disconnected = Vec::new();

    for &target in graph.adjacency.keys() {
        if target == main {
            continue;
        }
        let to_dist = graph.hop_distances(target);
        let Some(&hops) = to_dist.get(&main) else {
            disconnected.push(target);
            continue;
        };
        let sp = graph.shortest_path(main, target, &to_dist);
        shortest.insert(target, graph.compose_path(&sp));

        let candidates = graph.bounded_paths(main, target, hops + options.path_slack, &to_dist);
        let chosen: Vec<&Vec<MarkerId>> = if candidates.len() <= options.n_paths {
            candidates.iter().collect()
        } else {
            // Per-marker stream so results do not depend on visiting order.
            let mut rng =
                ChaCha8Rng::seed_from_u64(options.seed ^ (u64::from(target) << 32 | 0x9e37));
            let mut idx = sample_indices(&mut rng, candidates.len(), options.n_paths).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| &candidates[i]).collect()
        };
        let estimates: Vec<Pose> = chosen.iter().map(|p| graph.compose_path(p)).collect();
        poses.insert(target, robust_pose_average(&estimates)?);
        paths_used.insert(target, estimates.len());
    }

    Ok(FieldCalibrationResult {
        calibration: MarkerFieldCalibration {
            main_marker: main,
            poses,
        },
        shortest_path: shortest,
        paths_used,
        disconnected,
    })
}

/// Camera pose in the marker-field frame from the detections of one image.
pub fn vehicle_pose_from_markers(
    observations: &[MarkerObservation],
    field: &MarkerFieldCalibration,
) -> Result<Pose, MarkerError> {
    let estimates: Vec<Pose> = observations
        .iter()
        .filter_map(|o| {
            field
                .poses
                .get(&o.marker_id)
                .map(|m| m.compose(&o.pose.inverse()))
        })
        .collect();
    if estimates.is_empty() {
        return Err(MarkerError::NoKnownMarkers);
    }
    let translations: Vec<Vec3> = estimates.iter().map(|p| p.translation).collect();
    let t = geometric_median(&translations, WEISZFELD_TOLERANCE, WEISZFELD_MAX_ITER)
        .expect("non-empty");
    let r = chordal_mean(estimates.iter().map(|p| &p.rotation))?;
    Ok(Pose::new(r, t))
}
