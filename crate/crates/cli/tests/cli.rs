use groundtruth::geometry::geodesic_distance;
use groundtruth::pipeline::fixtures::{write_fixture_set, FixtureSet};
use groundtruth::pipeline::io::load_poses;
use std::path::Path;
use std::process::{Command, Output};

fn gt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gt"))
        .args(args)
        .env("GT_LOG_LEVEL", "error")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixtures(dir: &Path) -> FixtureSet {
    write_fixture_set(&dir.join("fx"), 11).unwrap()
}

#[test]
fn solve_writes_trajectory_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = fixtures(tmp.path());
    let out = tmp.path().join("out");
    let res = gt(&["solve", "--config", s(&fx.solve), "--out", s(&out)]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );

    let est = load_poses(&out.join("trajectory.csv")).unwrap();
    let truth = load_poses(&tmp.path().join("fx/truth.csv")).unwrap();
    assert!(est.len() + 2 >= truth.len());
    let mut worst_rot = 0.0f64;
    for p in &est {
        let t = truth
            .iter()
            .find(|t| t.t == p.t)
            .expect("epoch from the GNSS grid");
        assert!((p.value.translation - t.value.translation).norm() < 0.1);
        worst_rot = worst_rot.max(geodesic_distance(&p.value.rotation, &t.value.rotation));
    }
    assert!(worst_rot.to_degrees() < 5.0, "{}", worst_rot.to_degrees());

    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["command"], "solve");
    assert_eq!(report["version"], groundtruth::pipeline::VERSION);
    let offsets = &report["time_offsets"];
    for (key, truth) in [("gnss2", 0.12), ("mag", 0.08), ("imu", 0.05)] {
        let got = offsets[key]["seconds"].as_f64().unwrap();
        assert!((got - truth).abs() < 0.01, "{key}: {got}");
    }
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let res = gt(&["levitate"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let res = gt(&["solve", "--config", "c.toml", "--out", "o", "--fast"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn missing_or_invalid_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let res = gt(&[
        "solve",
        "--config",
        s(&tmp.path().join("absent.toml")),
        "--out",
        s(&out),
    ]);
    assert_eq!(res.status.code(), Some(2));

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[attitude]\nalhpa = 50\n").unwrap();
    let res = gt(&["solve", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("alhpa"));

    // no data files configured at all
    let empty = tmp.path().join("empty.toml");
    std::fs::write(&empty, "").unwrap();
    let res = gt(&["solve", "--config", s(&empty), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn malformed_data_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = fixtures(tmp.path());
    let gnss = tmp.path().join("fx/gnss1.csv");
    let text = std::fs::read_to_string(&gnss).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.swap(5, 6);
    std::fs::write(&gnss, lines.join("\n") + "\n").unwrap();
    let res = gt(&[
        "solve",
        "--config",
        s(&fx.solve),
        "--out",
        s(&tmp.path().join("out")),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("line"));
}

#[test]
fn rpmfit_reproduces_the_table() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = fixtures(tmp.path());
    let out = tmp.path().join("out");
    let res = gt(&[
        "vibration",
        "rpmfit",
        "--config",
        s(&fx.vibration),
        "--out",
        s(&out),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("rpm_calibration.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    for row in rows {
        assert!(row["relative_error"].as_f64().unwrap().abs() < 0.02);
    }
    assert!((report["a1"].as_f64().unwrap() - 12.187).abs() < 1e-3);
}

#[test]
fn every_family_runs_on_fixtures() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = fixtures(tmp.path());
    let out = tmp.path().join("out");
    let runs: [(&[&str], &Path, &str); 9] = [
        (&["timesync"], &fx.solve, "timesync.json"),
        (&["align"], &fx.align, "stitched.csv"),
        (
            &["magcal", "intrinsic"],
            &fx.magcal,
            "magcal_intrinsic.json",
        ),
        (
            &["magcal", "extrinsic"],
            &fx.magcal,
            "magcal_extrinsic.json",
        ),
        (&["markercal"], &fx.markers, "marker_calibration.csv"),
        (&["vibration", "psd"], &fx.vibration, "psd.csv"),
        (&["vibration", "predict"], &fx.vibration, "resonances.csv"),
        (&["vibration", "allan"], &fx.vibration, "allan.csv"),
        (
            &["vibration", "rpmfit"],
            &fx.vibration,
            "rpm_calibration.json",
        ),
    ];
    for (cmd, config, expected) in runs {
        let mut args = cmd.to_vec();
        args.extend(["--config", s(config), "--out", s(&out)]);
        let res = gt(&args);
        assert!(
            res.status.success(),
            "{cmd:?}: {}",
            String::from_utf8_lossy(&res.stderr)
        );
        assert!(
            out.join(expected).is_file(),
            "{cmd:?} did not write {expected}"
        );
    }
}

#[test]
fn synth_writes_loadable_configs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("fx");
    let res = gt(&["synth", "--out", s(&dir), "--seed", "2"]);
    assert!(res.status.success());
    for name in ["solve", "magcal", "markers", "align", "vibration"] {
        groundtruth::pipeline::PipelineConfig::load(&dir.join(format!("{name}.toml"))).unwrap();
    }
}
