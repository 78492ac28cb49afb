//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use groundtruth::alignment::{
    align_segments, priority, stitch_trajectory, AlignmentOptions, RigidAlignment, Segment,
};
use groundtruth::attitude::{
    solve_rotation_linear, solve_rotation_tangent, solve_rotation_wahba,
    solve_rotation_wahba_weighted, tangent_jacobian, worst_case_heading_error, DirectionalTriad,
};
use groundtruth::geometry::{
    chordal_mean, exp_so3, geodesic_distance, rotation_to_quaternion_wxyz, Pose, Timestamped,
};
use groundtruth::magcal::fit_ellipsoid;
use groundtruth::markers::{calibrate_field, extract_pairwise, CalibrationOptions};
use groundtruth::pipeline::{run_ground_truth, PipelineConfig};
use groundtruth::synthetic::{
    ellipsoid_samples, random_rotation, reference_mag_distortion, three_segment_flight,
    ForwardModel, MarkerGrid,
};
use groundtruth::vibration::{
    allan_deviation, find_main_peak, fit_rate_to_rpm, log_log_slope, log_spaced_taus, predict_rpm,
    spectrogram, welch_psd, ResonanceModel, RpmCalibration, UniformSignal, RPM_TABLE,
};
use groundtruth::{RotationMatrix, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn heading_error_model() -> Outcome {
    let (eps, elapsed) =
        timed(|| worst_case_heading_error(std::hint::black_box(0.01), std::hint::black_box(1.2)));
    let deg = eps.to_degrees();
    outcome(
        (deg - 0.95).abs() <= 0.01 && elapsed < Duration::from_millis(1),
        format!("eps = {deg:.4} deg in {elapsed:?}"),
    )
}

fn rpm_calibration() -> Outcome {
    let (fit, elapsed) = timed(|| fit_rate_to_rpm(&RPM_TABLE));
    let Ok(fit) = fit else {
        return outcome(false, "fit failed".into());
    };
    let worst = |cal: &RpmCalibration| {
        RPM_TABLE
            .iter()
            .map(|&(rate, rpm)| ((predict_rpm(cal, rate) - rpm) / rpm).abs())
            .fold(0.0, f64::max)
    };
    let (fitted, printed) = (worst(&fit), worst(&RpmCalibration::PUBLISHED));
    outcome(
        fitted < 0.02 && printed < 0.02 && elapsed < Duration::from_millis(10),
        format!(
            "fit ({:.4}, {:.4}, {:.6}) worst {:.2}%, printed worst {:.2}%, {elapsed:?}",
            fit.a0,
            fit.a1,
            fit.a2,
            100.0 * fitted,
            100.0 * printed
        ),
    )
}

fn resonance_prediction() -> Outcome {
    let model = ResonanceModel::PUBLISHED;
    let (hi, lo) = (model.frequency(15500.0), model.frequency(9000.0));
    outcome(
        (hi - 260.2).abs() <= 0.1 && (lo - 155.6).abs() <= 0.1,
        format!("15500 rpm -> {hi:.4} Hz, 9000 rpm -> {lo:.4} Hz"),
    )
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::from_fn(|_, _| rng.sample(StandardNormal)).normalize()
}

fn rotation_solvers() -> Outcome {
    let (result, elapsed) = timed(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut worst_truth, mut worst_pair, mut worst_scale, mut worst_jac) =
            (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut solved = 0;
        while solved < 1000 {
            let (g, m) = (random_unit(&mut rng), random_unit(&mut rng));
            let Ok(body) = DirectionalTriad::new(&g, &m) else {
                continue;
            };
            if g.cross(&m).norm() < 0.1 {
                continue;
            }
            solved += 1;
            let r = random_rotation(&mut rng);
            let world = body.rotated(&r);
            let estimates = [
                solve_rotation_linear(&world, &body).map(|e| e.rotation),
                solve_rotation_tangent(&world, &body, None).map(|e| e.rotation),
                solve_rotation_wahba(&world, &body, 50.0).map(|e| e.rotation),
            ];
            let Ok(est) = estimates.into_iter().collect::<Result<Vec<_>, _>>() else {
                return Err(format!("solver failed on triad {solved}"));
            };
            for (i, a) in est.iter().enumerate() {
                worst_truth = worst_truth.max(geodesic_distance(a, &r));
                for b in &est[i + 1..] {
                    worst_pair = worst_pair.max(geodesic_distance(a, b));
                }
            }

            // scale invariance on a perturbed triad, where the weights matter
            let noisy = DirectionalTriad::new(
                &(world.g.into_inner() + 0.05 * random_unit(&mut rng)),
                &(world.m.into_inner() + 0.05 * random_unit(&mut rng)),
            )
            .map_err(|e| e.to_string())?;
            let k = rng.random_range(0.01..100.0);
            let w = [50.0, 1.0, 1.0];
            let a = solve_rotation_wahba_weighted(&noisy, &body, w).map_err(|e| e.to_string())?;
            let b = solve_rotation_wahba_weighted(&noisy, &body, w.map(|x| x * k))
                .map_err(|e| e.to_string())?;
            worst_scale = worst_scale.max(geodesic_distance(&a.rotation, &b.rotation));

            let analytic = tangent_jacobian(&r, &body);
            let h = 1e-6;
            let stacked = |rot: &RotationMatrix| {
                let mut v = nalgebra::SVector::<f64, 9>::zeros();
                for (i, u) in [body.g, body.m, body.c].iter().enumerate() {
                    v.fixed_rows_mut::<3>(3 * i)
                        .copy_from(&(rot * u.into_inner()));
                }
                v
            };
            let mut numeric = nalgebra::SMatrix::<f64, 9, 3>::zeros();
            for c in 0..3 {
                let mut d = Vec3::zeros();
                d[c] = h;
                let col = (stacked(&(r * exp_so3(&d))) - stacked(&(r * exp_so3(&-d)))) / (2.0 * h);
                numeric.set_column(c, &col);
            }
            worst_jac = worst_jac.max((analytic - numeric).norm() / analytic.norm());
        }
        Ok((worst_truth, worst_pair, worst_scale, worst_jac))
    });
    match result {
        Ok((truth, pair, scale, jac)) => outcome(
            truth < 1e-8
                && pair < 1e-8
                && scale < 1e-12
                && jac < 1e-5
                && elapsed < Duration::from_secs(5),
            format!(
                "truth {truth:.1e} rad, pairwise {pair:.1e} rad, weight scaling {scale:.1e} rad, \
                 jacobian rel {jac:.1e}, {elapsed:?}"
            ),
        ),
        Err(e) => outcome(false, e),
    }
}

fn end_to_end_ground_truth() -> Outcome {
    let model = ForwardModel::reference(6);
    let flight = model.generate();
    let mut cfg = PipelineConfig::default();
    cfg.set_mag_intrinsics(&model.mag_distortion);
    cfg.magcal.r_i_m_wxyz = rotation_to_quaternion_wxyz(&model.r_i_m);
    let (gt, elapsed) = timed(|| run_ground_truth(&flight.dataset, &cfg));
    let gt = match gt {
        Ok(gt) => gt,
        Err(e) => return outcome(false, e.to_string()),
    };
    let off = &gt.report.time_offsets;
    let errors = [
        off.gnss2.seconds - model.offsets.gnss2,
        off.mag.seconds - model.offsets.mag,
        off.imu
            .as_ref()
            .map_or(f64::INFINITY, |o| o.seconds - model.offsets.imu),
    ];
    let truth: BTreeMap<u64, Pose> = flight
        .truth
        .iter()
        .map(|s| (s.t.to_bits(), s.value))
        .collect();
    let mut bias = Vec3::zeros();
    let mut sq = 0.0;
    let mut att_sq = 0.0;
    let mut relative = Vec::with_capacity(gt.trajectory.len());
    for p in &gt.trajectory {
        let t = truth[&p.t.to_bits()];
        let dp = p.value.translation - t.translation;
        bias += dp;
        sq += dp.norm_squared();
        att_sq += geodesic_distance(&p.value.rotation, &t.rotation).powi(2);
        relative.push(t.rotation.inverse() * p.value.rotation);
    }
    let n = gt.trajectory.len() as f64;
    let bias = bias.norm() / n;
    let attitude = chordal_mean(&relative)
        .map(|r| geodesic_distance(&r, &RotationMatrix::identity()).to_degrees())
        .unwrap_or(f64::INFINITY);
    outcome(
        errors.iter().all(|e| e.abs() < 0.01)
            && attitude < 0.05
            && bias < 1e-3
            && elapsed < Duration::from_secs(30)
            && gt.trajectory.len() + 2 >= flight.truth.len(),
        format!(
            "offset errors {:+.4}/{:+.4}/{:+.4} s, attitude bias {attitude:.4} deg, position bias {:.3} mm \
             (per-epoch rms {:.2} cm, {:.3} deg), {} epochs in {elapsed:?}",
            errors[0],
            errors[1],
            errors[2],
            1e3 * bias,
            1e2 * (sq / n).sqrt(),
            (att_sq / n).sqrt().to_degrees(),
            gt.trajectory.len()
        ),
    )
}

struct TransformError {
    /// Translation error where the transform is used: at the centroid of
    /// the overlapping samples.
    at_overlap: f64,
    /// Error of the translation parameter, i.e. at the segment frame origin.
    at_origin: f64,
    rotation_deg: f64,
}

fn transform_error(
    est: &RigidAlignment,
    truth: &Pose,
    overlap: &[Timestamped<Pose>],
    window: (f64, f64),
) -> TransformError {
    let pts: Vec<Vec3> = overlap
        .iter()
        .filter(|s| s.t >= window.0 && s.t <= window.1)
        .map(|s| s.value.translation)
        .collect();
    let c = pts.iter().sum::<Vec3>() / pts.len().max(1) as f64;
    TransformError {
        at_overlap: (est.rotation * c + est.translation - truth.transform_point(&c)).norm(),
        at_origin: (est.translation - truth.translation).norm(),
        rotation_deg: geodesic_distance(&est.rotation, &truth.rotation).to_degrees(),
    }
}

fn segment_alignment() -> Outcome {
    let flight = three_segment_flight(0.02, 0.002, 6);
    let options = AlignmentOptions::default();
    let a10 = align_segments(&flight.segments[0], &flight.segments[1], &options);
    let a21 = align_segments(&flight.segments[1], &flight.segments[2], &options);
    let (Ok(a10), Ok(a21)) = (a10, a21) else {
        return outcome(false, "alignment failed".into());
    };
    let a20 = RigidAlignment {
        rotation: a10.rotation * a21.rotation,
        translation: a10.rotation * a21.translation + a10.translation,
        ..a21
    };
    let f = &flight.frames;
    let (sp, clean) = (&flight.spans, &flight.clean_segments);
    let errs = [
        transform_error(&a10, &f[1], &clean[1], (sp[1].0, sp[0].1)),
        transform_error(
            &a21,
            &f[1].inverse().compose(&f[2]),
            &clean[2],
            (sp[2].0, sp[1].1),
        ),
    ];

    let prios = [priority::GNSS, priority::MARKER, priority::MOCAP];
    let segments: Vec<Segment> = flight
        .clean_segments
        .iter()
        .zip(prios)
        .map(|(poses, priority)| Segment {
            poses: poses.clone(),
            priority,
        })
        .collect();
    let stitched = match stitch_trajectory(&segments, &[a10, a20]) {
        Ok(s) => s,
        Err(e) => return outcome(false, e.to_string()),
    };
    let truth: BTreeMap<u64, Vec3> = flight
        .truth
        .iter()
        .map(|s| (s.t.to_bits(), s.value.translation))
        .collect();
    let seams: Vec<f64> = [flight.spans[1].0, flight.spans[2].0]
        .iter()
        .filter_map(|&start| {
            let k = stitched.iter().position(|s| s.t >= start - 1e-9)?;
            let (a, b) = (&stitched[k - 1], &stitched[k]);
            let step = b.value.translation - a.value.translation;
            let true_step = truth[&b.t.to_bits()] - truth[&a.t.to_bits()];
            Some((step - true_step).norm())
        })
        .collect();
    let worst_seam = seams.iter().copied().fold(0.0, f64::max);
    outcome(
        seams.len() == 2
            && worst_seam < 0.03
            && errs
                .iter()
                .all(|e| e.at_overlap < 0.01 && e.rotation_deg < 0.5),
        format!(
            "seams {:.2}/{:.2} cm, transforms {:.2} cm {:.3} deg / {:.2} cm {:.3} deg \
             (translation parameter {:.2}/{:.2} cm)",
            1e2 * seams.first().copied().unwrap_or(f64::NAN),
            1e2 * seams.get(1).copied().unwrap_or(f64::NAN),
            1e2 * errs[0].at_overlap,
            errs[0].rotation_deg,
            1e2 * errs[1].at_overlap,
            errs[1].rotation_deg,
            1e2 * errs[0].at_origin,
            1e2 * errs[1].at_origin
        ),
    )
}

fn norm_cv(samples: &[Vec3]) -> Option<f64> {
    let cal = fit_ellipsoid(samples).ok()?;
    let norms: Vec<f64> = samples.iter().map(|m| cal.correct(m).norm()).collect();
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let var = norms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some(var.sqrt() / mean)
}

fn magnetometer_intrinsics() -> Outcome {
    let cal = reference_mag_distortion();
    let clean = norm_cv(&ellipsoid_samples(500, 0.483, &cal, 0.0, 7));
    let noisy = norm_cv(&ellipsoid_samples(500, 0.483, &cal, 0.01, 7));
    match (clean, noisy) {
        (Some(c), Some(n)) => outcome(
            c < 1e-5 && n < 0.01,
            format!("norm cv noiseless {c:.1e}, at 1% noise {:.3}%", 1e2 * n),
        ),
        _ => outcome(false, "ellipsoid fit failed".into()),
    }
}

fn marker_field() -> Outcome {
    let grid = MarkerGrid::new(4, 5, 0.5, 8);
    let main = grid.central_marker();
    let truth = grid.relative_to(main);
    let detections: Vec<_> = grid
        .observe(6, 0.002, 0.001, 0.1, 8)
        .into_iter()
        .map(|s| s.value)
        .collect();
    let mut pairwise = match extract_pairwise(&detections) {
        Ok(p) => p,
        Err(e) => return outcome(false, e.to_string()),
    };
    // corrupt the edge from the main marker to its right-hand neighbour
    let neighbour = main + 1;
    let Some(edge) = pairwise
        .iter_mut()
        .find(|p| (p.i, p.j) == (neighbour, main))
    else {
        return outcome(false, "edge to corrupt not observed".into());
    };
    let corruption = Pose::new(
        exp_so3(&Vec3::new(0.0, 0.0, 0.08)),
        Vec3::new(0.15, -0.1, 0.05),
    );
    edge.mean.pose = edge.mean.pose.compose(&corruption);
    for s in &mut edge.samples {
        *s = s.compose(&corruption);
    }
    let edge_errors: Vec<f64> = pairwise
        .iter()
        .filter(|p| (p.i, p.j) != (neighbour, main))
        .map(|p| {
            let t = truth[&p.i].inverse().compose(&truth[&p.j]);
            (p.mean.pose.translation - t.translation).norm_squared()
        })
        .collect();
    let edge_noise = (edge_errors.iter().sum::<f64>() / edge_errors.len() as f64).sqrt();
    let result = match calibrate_field(
        &pairwise,
        main,
        &CalibrationOptions {
            seed: 8,
            ..Default::default()
        },
    ) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let error = |poses: &BTreeMap<u32, Pose>| {
        truth
            .iter()
            .map(|(id, t)| {
                poses
                    .get(id)
                    .map_or(f64::INFINITY, |p| (p.translation - t.translation).norm())
            })
            .fold(0.0, f64::max)
    };
    let robust = error(&result.calibration.poses);
    let shortest = error(&result.shortest_path);
    outcome(
        robust <= 2.0 * edge_noise && shortest > 2.0 * edge_noise && result.disconnected.is_empty(),
        format!(
            "per-edge noise {:.2} mm, worst marker {:.2} mm (limit {:.2}), single shortest path {:.1} mm",
            1e3 * edge_noise,
            1e3 * robust,
            2e3 * edge_noise,
            1e3 * shortest
        ),
    )
}

fn allan_and_spectra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let normal = Normal::new(0.0, 1.0).expect("valid sigma");
    let white = UniformSignal::new(
        100.0,
        (0..200_000).map(|_| normal.sample(&mut rng)).collect(),
    );
    let Ok(white) = white else {
        return outcome(false, "signal rejected".into());
    };
    let slope = allan_deviation(&white, &log_spaced_taus(&white, 30))
        .ok()
        .and_then(|pts| log_log_slope(&pts))
        .unwrap_or(f64::NAN);

    let fs = 900.0;
    let sine: Vec<f64> = (0..(20.0 * fs) as usize)
        .map(|k| {
            let t = k as f64 / fs;
            (2.0 * std::f64::consts::PI * 100.0 * t).sin() + 0.3 * normal.sample(&mut rng)
        })
        .collect();
    let Ok(sine) = UniformSignal::new(fs, sine) else {
        return outcome(false, "signal rejected".into());
    };
    let window = 1800;
    let peak = welch_psd(&sine, window, 0.5)
        .ok()
        .and_then(|s| find_main_peak(&s, 20.0).ok())
        .unwrap_or(f64::NAN);

    // each column of the spectrogram integrates to its segment's variance
    let parseval = spectrogram(&sine, window, 0.5).ok().map(|spec| {
        let df = spec.freqs[1] - spec.freqs[0];
        let step = window / 2;
        spec.power
            .iter()
            .enumerate()
            .map(|(k, col)| {
                let seg = &sine.values()[k * step..k * step + window];
                let mean = seg.iter().sum::<f64>() / window as f64;
                let var = seg.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / window as f64;
                (col.iter().sum::<f64>() * df / var - 1.0).abs()
            })
            .fold(0.0, f64::max)
    });
    let parseval = parseval.unwrap_or(f64::NAN);
    outcome(
        (slope + 0.5).abs() <= 0.05 && parseval < 0.1 && (peak - 100.0).abs() <= 0.5,
        format!(
            "white-noise slope {slope:.4}, worst Parseval deviation {:.2}%, peak {peak:.3} Hz",
            1e2 * parseval
        ),
    )
}

fn run_gt(args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_gt"))
        .args(args)
        .env("GT_LOG_LEVEL", "error")
        .status()
        .map_err(|e| e.to_string())?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("gt {} exited with {status}", args.join(" ")))
    }
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let name = path
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        out.push((name, std::fs::read(&path).map_err(|e| e.to_string())?));
    }
    out.sort();
    Ok(out)
}

const SUBCOMMANDS: [(&[&str], &str); 10] = [
    (&["solve"], "solve.toml"),
    (&["timesync"], "solve.toml"),
    (&["align"], "align.toml"),
    (&["magcal", "intrinsic"], "magcal.toml"),
    (&["magcal", "extrinsic"], "magcal.toml"),
    (&["markercal"], "markers.toml"),
    (&["vibration", "psd"], "vibration.toml"),
    (&["vibration", "rpmfit"], "vibration.toml"),
    (&["vibration", "predict"], "vibration.toml"),
    (&["vibration", "allan"], "vibration.toml"),
];

fn determinism() -> Outcome {
    let check = || -> Result<usize, String> {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
        run_gt(&["synth", "--out", &p("fx1"), "--seed", "5"])?;
        run_gt(&["synth", "--out", &p("fx2"), "--seed", "5"])?;
        if read_dir_sorted(&tmp.path().join("fx1"))? != read_dir_sorted(&tmp.path().join("fx2"))? {
            return Err("synth outputs differ".into());
        }
        let mut files = 0;
        for (i, (cmd, config)) in SUBCOMMANDS.iter().enumerate() {
            let cfg = p(&format!("fx1/{config}"));
            let runs: Vec<String> = (0..2).map(|r| p(&format!("out{i}_{r}"))).collect();
            for out in &runs {
                let mut args = cmd.to_vec();
                args.extend(["--config", &cfg, "--out", out]);
                run_gt(&args)?;
            }
            let (a, b) = (
                read_dir_sorted(Path::new(&runs[0]))?,
                read_dir_sorted(Path::new(&runs[1]))?,
            );
            if a.is_empty() || a != b {
                return Err(format!("gt {} outputs differ between runs", cmd.join(" ")));
            }
            files += a.len();
        }
        Ok(files)
    };
    match check() {
        Ok(files) => outcome(
            true,
            format!(
                "{} subcommands, {files} output files byte-identical",
                SUBCOMMANDS.len()
            ),
        ),
        Err(e) => outcome(false, e),
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("heading-error model", heading_error_model),
        ("RPM calibration", rpm_calibration),
        ("resonance prediction", resonance_prediction),
        ("rotation-solver oracle suite", rotation_solvers),
        ("end-to-end synthetic ground truth", end_to_end_ground_truth),
        ("segment alignment", segment_alignment),
        ("magnetometer intrinsics", magnetometer_intrinsics),
        ("marker field", marker_field),
        ("Allan deviation and spectra", allan_and_spectra),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {}: {name}: {}", k + 1, o.detail);
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
