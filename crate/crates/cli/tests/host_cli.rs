mod common;

use common::{closed_port, fixture, read_json};
use edgebench_cli::report::{ReportFile, CSV_COLUMNS};

#[test]
fn golden_loopback_run() {
    let fx = fixture();
    let out = fx.out("reports");
    let o = fx.host(&out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&out.join("report-target1.json"));
    assert_eq!(report["accuracy"]["map_50_95"], 1.0);
    assert_eq!(report["session"]["state"], "done");
    assert_eq!(report["session"]["config"]["session_id"], "cli");
    assert_eq!(report["timing"]["records"].as_array().unwrap().len(), 6);
    assert_eq!(report["detections"].as_array().unwrap().len(), 6);

    let csv = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
    let row = lines.next().unwrap();
    assert!(row.starts_with("target1,unspecified,") && row.ends_with(",1.0"), "{row}");
    assert!(lines.next().is_none());

    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("report-target1.json") && stdout.contains("summary.csv"));
}

#[test]
fn missing_annotations_writes_nothing() {
    let fx = fixture();
    std::fs::remove_file(&fx.annotations).unwrap();
    let out = fx.out("reports");
    let o = fx.host(&out, &[]);
    assert_eq!(o.status.code(), Some(edgebench_cli::EXIT_INVALID_INPUT));
    assert!(String::from_utf8_lossy(&o.stderr).contains("annotation file"));
    assert!(!out.exists());
}

#[test]
fn missing_image_writes_nothing() {
    let fx = fixture();
    let first = &fx.dataset.frames()[0].file_name;
    std::fs::remove_file(fx.images.join(first)).unwrap();
    let out = fx.out("reports");
    let o = fx.host(&out, &[]);
    assert_eq!(o.status.code(), Some(edgebench_cli::EXIT_INVALID_INPUT));
    assert!(!out.exists());
}

#[test]
fn two_targets_two_reports() {
    let fx = fixture();
    let out = fx.out("reports");
    let o = fx.host(&out, &["--targets", "jetson,zcu104"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let a = read_json(&out.join("report-jetson.json"));
    let b = read_json(&out.join("report-zcu104.json"));
    assert_eq!((a["target_id"].as_str(), b["target_id"].as_str()), (Some("jetson"), Some("zcu104")));
    assert_eq!(a["accuracy"]["map_50_95"], 1.0);
    assert_eq!(b["accuracy"]["map_50_95"], 1.0);
    let csv = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn report_file_reserializes_to_identical_bytes() {
    let fx = fixture();
    let out = fx.out("reports");
    assert_eq!(fx.host(&out, &[]).status.code(), Some(0));
    let text = std::fs::read_to_string(out.join("report-target1.json")).unwrap();
    let parsed: ReportFile = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed.to_json().unwrap(), text);
}

#[test]
fn echoed_config_reproduces_session() {
    let fx = fixture();
    let spec = fx.out("run.toml");
    std::fs::write(
        &spec,
        "conf_thr = 0.05\nruns = 2\n[sim.target1]\ndrop_probability = 0.3\ncoordinate_jitter_px = 1.5\n\
         false_positive_rate = 0.5\nconfidence_noise = 0.4\nseed = 9\n",
    )
    .unwrap();
    let spec_arg = spec.to_str().unwrap();

    let first = fx.out("first");
    assert_eq!(fx.host(&first, &["--config", spec_arg]).status.code(), Some(0));
    let first_path = first.join("report-target1.json");
    let a = read_json(&first_path);

    let second = fx.out("second");
    let o = fx.host(&second, &["--config", spec_arg, "--from-report", first_path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let b = read_json(&second.join("report-target1.json"));

    assert_eq!(a["session"]["config"], b["session"]["config"]);
    assert_eq!(a["session"]["config"]["run_count"], 2);
    assert_eq!(a["accuracy"], b["accuracy"]);
    assert_eq!(a["detections"], b["detections"]);
    let map = a["accuracy"]["map_50_95"].as_f64().unwrap();
    assert!(map < 1.0 && map > 0.0, "perturbed mock should score between 0 and 1, got {map}");
}

#[test]
fn power_log_gives_relative_power_and_efficiency() {
    let fx = fixture();
    let log = fx.out("power.csv");
    let mut csv = String::from("t_seconds,watts\n");
    // Millisecond samples: a loopback session lasts only a few milliseconds.
    for i in 0..=20_000 {
        csv.push_str(&format!("{},16.5\n", i as f64 * 0.001));
    }
    std::fs::write(&log, csv).unwrap();
    let out = fx.out("reports");
    let power_arg = format!("target1={}", log.display());
    let o = fx.host(&out, &["--power-log", &power_arg, "--idle-watts", "target1=9.5", "--precision-label", "INT8"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r: ReportFile = serde_json::from_str(&std::fs::read_to_string(out.join("report-target1.json")).unwrap()).unwrap();
    let p = r.power.clone().unwrap_or_else(|| panic!("{:?}", r.evaluator_failures));
    assert_eq!((p.absolute_w, p.idle_w, p.relative_w), (16.5, 9.5, 7.0));
    let fps = r.timing.unwrap().summary.fps;
    assert_eq!(p.efficiency_fps_per_w, Some(fps / 7.0));
    assert_eq!(r.session.precision_label, "INT8");
}

#[test]
fn echo_images_written() {
    let fx = fixture();
    let out = fx.out("reports");
    assert_eq!(fx.host(&out, &["--echo"]).status.code(), Some(0));
    for f in fx.dataset.frames() {
        let png = out.join("echo").join("target1").join(format!("{}.png", f.frame_id));
        assert!(png.is_file(), "missing {}", png.display());
    }
}

#[test]
fn failed_session_exits_nonzero_with_partial_report() {
    let fx = fixture();
    let out = fx.out("reports");
    let o = fx.host(&out, &["--detector", "no-such-detector", "--targets", "a,b"]);
    assert_eq!(o.status.code(), Some(edgebench_cli::EXIT_SESSION_FAILED));
    for t in ["a", "b"] {
        let r = read_json(&out.join(format!("report-{t}.json")));
        assert_eq!(r["session"]["state"], "failed");
        assert!(r["session"]["failure"].as_str().unwrap().contains("no-such-detector"));
        assert!(r["accuracy"].is_null());
    }
}

#[test]
fn invalid_threshold_rejected() {
    let fx = fixture();
    let out = fx.out("reports");
    let o = fx.host(&out, &["--conf-thr", "1.5"]);
    assert_eq!(o.status.code(), Some(edgebench_cli::EXIT_INVALID_INPUT));
    assert!(!out.exists());
}

#[test]
fn unreachable_broker_exits_after_retries() {
    let fx = fixture();
    let out = fx.out("reports");
    let broker = format!("127.0.0.1:{}", closed_port());
    let o = fx.host(&out, &["--broker", &broker]);
    assert_eq!(o.status.code(), Some(edgebench_cli::EXIT_UNREACHABLE), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.exists());
}
