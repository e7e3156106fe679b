//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use edgebench::agent::{MockDetectorConfig, REPLAY_DETECTOR};
use edgebench::host::{run_session, Dataset, EvaluatorRegistry, SessionOptions, SessionOutcome};
use edgebench::metrics::{
    aggregate_timing, average_precision, efficiency, map_50_95, match_detections, relative_power, FrameDetections,
    FrameGroundTruth, MatchLabel, TimingRecord, IOU_THRESHOLDS,
};
use edgebench::protocol::{
    decode_message, encode_message, DecodeError, ElementType, FrameMessage, Message, MessageKind, ResultMessage,
    SessionConfig, StatusMessage, TargetState,
};
use edgebench::sim::LoopbackLab;
use edgebench::transport::loopback::FaultProfile;
use edgebench::vision::{iou, nms, BBox, Detection, GroundTruthBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, ok: impl Into<String>, fail: impl Into<String>) -> Outcome {
    if cond {
        Ok(ok.into())
    } else {
        Err(fail.into())
    }
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("golden end-to-end", golden),
        ("metric formula fixtures", formula_fixtures),
        ("oracle equivalence", oracle_equivalence),
        ("hand-check fixtures", hand_checks),
        ("protocol round-trip and rejection", protocol),
        ("at-least-once robustness", duplicates),
        ("multi-target", multi_target),
        ("six-run averaging", six_runs),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name} ({detail}; {secs:.2} s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name} ({detail}; {secs:.2} s)", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn exact_mock(ds: &Dataset) -> MockDetectorConfig {
    MockDetectorConfig::exact(Arc::new(ds.annotations().clone()))
}

fn session_config(sid: &str, runs: u32) -> SessionConfig {
    let mut c = SessionConfig::standard(sid, REPLAY_DETECTOR).unwrap();
    c.confidence_threshold = 0.0;
    c.run_count = runs;
    c
}

fn run_lab(
    faults: FaultProfile,
    ds: &Dataset,
    targets: &[(&str, MockDetectorConfig)],
    cfg: SessionConfig,
) -> Result<SessionOutcome, String> {
    let lab = LoopbackLab::start(faults, targets.iter().map(|(t, m)| (t.to_string(), m.clone())))
        .map_err(|e| e.to_string())?;
    let mut opts = SessionOptions::new(targets.iter().map(|(t, _)| *t));
    opts.drain_timeout = Duration::from_secs(20);
    let out = run_session(cfg, lab.host_endpoint(), ds, &opts, &EvaluatorRegistry::with_builtins(), &BTreeMap::new())
        .map_err(|e| e.to_string())?;
    lab.shutdown();
    if !out.is_done() {
        return Err(format!("session ended {}: {:?}", out.state, out.failure));
    }
    Ok(out)
}

fn map_of(out: &SessionOutcome, target: &str) -> Result<f64, String> {
    out.report(target)
        .and_then(|r| r.accuracy())
        .map(|a| a.map_50_95)
        .ok_or_else(|| format!("no accuracy for {target}"))
}

fn golden() -> Outcome {
    let start = Instant::now();
    let ds = Dataset::synthetic(50, 3, 640, 480, 2024);
    let classes: BTreeSet<u32> = ds.annotations().values().flatten().map(|g| g.class_id).collect();
    if classes.len() < 3 {
        return Err(format!("synthetic set covers only {} classes", classes.len()));
    }
    let out = run_lab(FaultProfile::none(), &ds, &[("target1", exact_mock(&ds))], session_config("golden", 1))?;
    let map = map_of(&out, "target1")?;
    let elapsed = start.elapsed();
    check(
        (map - 1.0).abs() <= 1e-9 && elapsed < Duration::from_secs(30),
        format!("mAP {map}, 50 frames, {} classes, {:.2} s", classes.len(), elapsed.as_secs_f64()),
        format!("mAP {map} (want 1.0 within 1e-9), elapsed {:.2} s (limit 30 s)", elapsed.as_secs_f64()),
    )
}

fn formula_fixtures() -> Outcome {
    let parts = 8.78 + 22.0 + 39.45;
    if parts != 70.23 {
        return Err(format!("8.78 + 22.0 + 39.45 = {parts:?}, not 70.23"));
    }
    let rel = relative_power(16.5, 9.5);
    if rel.relative_w != 7.0 || rel.clamped {
        return Err(format!("relative power {rel:?}"));
    }
    let timing = aggregate_timing(&[TimingRecord::new(1, 0, 8.78, 22.0, 39.45).unwrap()]).unwrap();
    let eff = efficiency(timing.fps, rel.relative_w).map_err(|e| e.to_string())?;
    check(
        (eff - 2.034).abs() <= 0.02 && (eff - 2.05).abs() <= 0.03,
        format!("efficiency {eff:.6} FPS/W, relative 7.0 W, total 70.23 ms"),
        format!("efficiency {eff} not within 0.02 of 2.034 and 0.03 of 2.05"),
    )
}

// Independent reference implementations.

fn brute_iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let h = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = w * h;
    let union = (a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - inter;
    if inter <= 0.0 || union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Labels of one class in processing order, plus its ground-truth count.
fn brute_match(dets: &FrameDetections, gts: &FrameGroundTruth, class: u32, thr: f64) -> (Vec<bool>, usize) {
    let mut all: Vec<(f64, u64, usize, BBox)> = Vec::new();
    for (&f, ds) in dets {
        for (i, d) in ds.iter().enumerate() {
            if d.class_id == class {
                all.push((d.confidence, f, i, d.bbox));
            }
        }
    }
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let gt_count = gts.values().flatten().filter(|g| g.class_id == class).count();
    let mut used: BTreeSet<(u64, usize)> = BTreeSet::new();
    let mut labels = Vec::new();
    for (_, f, _, bbox) in all {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.get(&f).map(Vec::as_slice).unwrap_or(&[]).iter().enumerate() {
            if g.class_id != class || used.contains(&(f, gi)) {
                continue;
            }
            let o = brute_iou(&bbox, &g.bbox);
            if o >= thr && best.is_none_or(|(_, b)| o > b) {
                best = Some((gi, o));
            }
        }
        if let Some((gi, _)) = best {
            used.insert((f, gi));
        }
        labels.push(best.is_some());
    }
    (labels, gt_count)
}

/// Mean over r = 0, 0.01, ..., 1 of the best precision at recall >= r.
fn brute_ap(labels: &[bool], gt_count: usize) -> f64 {
    if gt_count == 0 {
        return 0.0;
    }
    let mut points = Vec::new();
    let mut tp = 0;
    for (k, &hit) in labels.iter().enumerate() {
        tp += hit as usize;
        points.push((tp, tp as f64 / (k + 1) as f64));
    }
    let mut sum = 0.0;
    for r in 0..=100usize {
        let best = points.iter().filter(|(tp, _)| tp * 100 >= r * gt_count).map(|p| p.1).fold(0.0, f64::max);
        sum += best;
    }
    sum / 101.0
}

fn brute_map(dets: &FrameDetections, gts: &FrameGroundTruth) -> Option<f64> {
    let classes: BTreeSet<u32> = gts.values().flatten().map(|g| g.class_id).collect();
    if classes.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for thr in IOU_THRESHOLDS {
        let aps: f64 = classes
            .iter()
            .map(|&c| {
                let (labels, n) = brute_match(dets, gts, c, thr);
                brute_ap(&labels, n)
            })
            .sum();
        total += aps / classes.len() as f64;
    }
    Some(total / IOU_THRESHOLDS.len() as f64)
}

fn brute_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut remaining: Vec<usize> = (0..dets.len()).collect();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let &top = remaining
            .iter()
            .min_by(|&&a, &&b| dets[b].confidence.partial_cmp(&dets[a].confidence).unwrap().then(a.cmp(&b)))
            .unwrap();
        kept.push(dets[top]);
        remaining.retain(|&j| {
            j != top && !(dets[j].class_id == dets[top].class_id && brute_iou(&dets[top].bbox, &dets[j].bbox) > thr)
        });
    }
    kept
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x0 = rng.random_range(0..12) as f64;
    let y0 = rng.random_range(0..12) as f64;
    let x1 = x0 + rng.random_range(1..8) as f64;
    let y1 = y0 + rng.random_range(1..8) as f64;
    BBox::new(x0, y0, x1, y1).unwrap()
}

fn random_detection(rng: &mut ChaCha8Rng, classes: u32) -> Detection {
    let conf = [0.25, 0.5, 0.75, 0.9, 1.0][rng.random_range(0..5)];
    Detection::new(random_box(rng), rng.random_range(1..=classes), conf).unwrap()
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst = 0.0f64;
    for scene in 0..1000 {
        let frames = rng.random_range(1..=2u64);
        let mut dets = FrameDetections::new();
        let mut gts = FrameGroundTruth::new();
        for f in 1..=frames {
            let nd = rng.random_range(0..=3);
            dets.insert(f, (0..nd).map(|_| random_detection(&mut rng, 2)).collect());
            let ng = rng.random_range(0..=3);
            let boxes: Vec<GroundTruthBox> = (0..ng)
                .map(|_| GroundTruthBox { bbox: random_box(&mut rng), class_id: rng.random_range(1..=2), frame_id: f })
                .collect();
            if !boxes.is_empty() {
                gts.insert(f, boxes);
            }
        }
        for thr in IOU_THRESHOLDS {
            let classes: BTreeSet<u32> = gts.values().flatten().map(|g| g.class_id).collect();
            let matched = match_detections(&dets, &gts, thr);
            for c in classes {
                let (labels, n) = brute_match(&dets, &gts, c, thr);
                let m = &matched[&c];
                let got: Vec<bool> = m.labels.iter().map(|l| *l == MatchLabel::TruePositive).collect();
                if got != labels || m.gt_count != n {
                    return Err(format!("scene {scene}, class {c}, IoU {thr}: matching {got:?} vs {labels:?}"));
                }
                let (ap, want) = (average_precision(&m.labels, n), brute_ap(&labels, n));
                if (ap - want).abs() > 1e-12 {
                    return Err(format!("scene {scene}, class {c}, IoU {thr}: AP {ap} vs {want}"));
                }
            }
        }
        match (map_50_95(&dets, &gts), brute_map(&dets, &gts)) {
            (Ok(s), Some(want)) => {
                let diff = (s.map_50_95 - want).abs();
                worst = worst.max(diff);
                if diff > 1e-12 {
                    return Err(format!("scene {scene}: mAP {} vs {want}", s.map_50_95));
                }
            }
            (Err(_), None) => {}
            (got, want) => return Err(format!("scene {scene}: mAP {got:?} vs {want:?}")),
        }
    }

    let mut nms_cases = 0;
    for seed in 0..20_000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (seed % 9) as usize;
        let dets: Vec<Detection> = (0..n).map(|_| random_detection(&mut rng, 2)).collect();
        let thr = [0.0, 0.3, 0.45, 0.5, 0.7, 1.0][rng.random_range(0..6)];
        if nms(&dets, thr) != brute_nms(&dets, thr) {
            return Err(format!("NMS differs for seed {seed}, {n} detections, threshold {thr}"));
        }
        nms_cases += 1;
    }
    Ok(format!("1000 scenes, largest mAP difference {worst:e}; {nms_cases} NMS inputs with 0..=8 detections"))
}

fn hand_checks() -> Outcome {
    let o = iou(&BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(), &BBox::new(5.0, 0.0, 15.0, 10.0).unwrap());
    let ap = average_precision(&[MatchLabel::FalsePositive, MatchLabel::TruePositive], 1);
    check(
        o == 1.0 / 3.0 && ap == 0.5,
        format!("iou {o:?}, AP([FP, TP]) {ap:?}"),
        format!("iou {o:?} (want 1/3), AP {ap:?} (want 0.5)"),
    )
}

fn random_string(rng: &mut ChaCha8Rng, max: usize) -> String {
    const ALPHABET: &[char] = &['a', 'b', 'z', '0', '9', '-', '_', 'é', 'λ', '✓'];
    let len = rng.random_range(1..=max);
    (0..len).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect()
}

fn random_id(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(1..=12);
    (0..len).map(|_| char::from(b"abcdefghijklmnopqrstuvwxyz0123456789-_"[rng.random_range(0..38)])).collect()
}

fn random_frame(rng: &mut ChaCha8Rng, sid: &str) -> FrameMessage {
    if rng.random_bool(0.1) {
        return FrameMessage::end_of_stream(sid, rng.random_range(1..100));
    }
    let (rows, cols, channels) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..=3));
    FrameMessage {
        session_id: sid.to_string(),
        frame_id: rng.random(),
        rows,
        cols,
        channels,
        element_type: ElementType::U8,
        pixel_data: (0..rows * cols * channels).map(|_| rng.random()).collect(),
        end_of_stream: false,
    }
}

fn random_message(rng: &mut ChaCha8Rng) -> Message {
    let sid = random_id(rng);
    match rng.random_range(0..4) {
        0 => {
            let mut c = SessionConfig::standard(&sid, &random_string(rng, 16)).unwrap();
            c.confidence_threshold = rng.random();
            c.nms_threshold = rng.random();
            c.run_count = rng.random_range(1..=u32::MAX);
            c.echo_annotated_images = rng.random();
            c.model_input_width = rng.random_range(1..=4096);
            c.model_input_height = rng.random_range(1..=4096);
            Message::Config(c)
        }
        1 => Message::Frame(random_frame(rng, &sid)),
        2 => {
            let n = rng.random_range(0..6);
            let detections = (0..n)
                .map(|_| {
                    let x0: f64 = rng.random_range(-50.0..1000.0);
                    let y0: f64 = rng.random_range(-50.0..1000.0);
                    let bbox = BBox::new(x0, y0, x0 + rng.random_range(0.0..300.0), y0 + rng.random_range(0.0..300.0));
                    Detection::new(bbox.unwrap(), rng.random_range(0..1000), rng.random()).unwrap()
                })
                .collect();
            let annotated_image = rng.random_bool(0.2).then(|| {
                let mut f = random_frame(rng, &sid);
                f.end_of_stream = false;
                f.pixel_data = vec![0; f.expected_len() as usize];
                f
            });
            Message::Result(ResultMessage {
                session_id: sid,
                target_id: random_id(rng),
                frame_id: rng.random(),
                detections,
                pre_ms: rng.random_range(0.0..500.0),
                infer_ms: rng.random_range(0.0..500.0),
                post_ms: rng.random_range(0.0..500.0),
                annotated_image,
            })
        }
        _ => {
            let state = [TargetState::Ready, TargetState::Configured, TargetState::Error][rng.random_range(0..3)];
            Message::Status(StatusMessage::new(&random_id(rng), state, random_string(rng, 40)))
        }
    }
}

fn protocol() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut truncated, mut inconsistent) = (0, 0);
    for i in 0..10_000 {
        let msg = random_message(&mut rng);
        let kind = msg.kind();
        let buf = encode_message(&msg).map_err(|e| format!("message {i}: encode failed: {e}"))?;
        let back = decode_message(&buf, kind).map_err(|e| format!("message {i}: decode failed: {e}"))?;
        if back != msg {
            return Err(format!("message {i} did not round-trip: {msg:?} vs {back:?}"));
        }
        if encode_message(&back).unwrap() != buf {
            return Err(format!("message {i} re-encodes to different bytes"));
        }

        let cut = rng.random_range(0..buf.len());
        match decode_message(&buf[..cut], kind) {
            Err(DecodeError::Truncated) => truncated += 1,
            other => return Err(format!("message {i} cut at {cut}/{}: {other:?}", buf.len())),
        }

        if let Message::Frame(f) = &msg {
            if !f.end_of_stream {
                // rows is a positive fixint below 6; claim one more row than sent.
                let key = [0xa4, b'r', b'o', b'w', b's'];
                let pos = buf.windows(5).position(|w| w == key).unwrap() + 5;
                let mut bad = buf.clone();
                bad[pos] += 1;
                match decode_message(&bad, kind) {
                    Err(DecodeError::Invariant { kind: MessageKind::Frame, .. }) => inconsistent += 1,
                    other => return Err(format!("message {i} with inconsistent length: {other:?}")),
                }
            }
        }
    }
    check(
        inconsistent > 1000,
        format!("10000 round-trips; {truncated} truncations -> Truncated; {inconsistent} length mismatches -> Invariant"),
        format!("only {inconsistent} length-mismatch cases exercised"),
    )
}

fn perturbed(ds: &Dataset, seed: u64) -> MockDetectorConfig {
    MockDetectorConfig {
        coordinate_jitter_px: 2.0,
        false_positive_rate: 0.3,
        confidence_noise: 0.5,
        drop_probability: 0.2,
        seed,
        ..exact_mock(ds)
    }
}

fn duplicates() -> Outcome {
    let ds = Dataset::synthetic(12, 3, 64, 48, 5);
    let targets = [("exact", exact_mock(&ds)), ("noisy", perturbed(&ds, 8))];
    let clean = run_lab(FaultProfile::none(), &ds, &targets, session_config("nodup", 2))?;
    let dup = run_lab(FaultProfile::duplicating(0.5, 99), &ds, &targets, session_config("dup", 2))?;
    let expected = 2 * ds.len() * targets.len();
    let mut maps = Vec::new();
    for (t, _) in &targets {
        maps.push((map_of(&clean, t)?, map_of(&dup, t)?));
    }
    check(
        dup.store.len() == expected && maps.iter().all(|(a, b)| a == b) && dup.stats.duplicates_ignored > 0,
        format!(
            "store {} = 2 runs x {} frames x 2 targets; {} duplicates ignored; mAP {:?}",
            dup.store.len(),
            ds.len(),
            dup.stats.duplicates_ignored,
            maps
        ),
        format!(
            "store {} (want {expected}), duplicates ignored {}, mAP clean vs duplicated {:?}",
            dup.store.len(),
            dup.stats.duplicates_ignored,
            maps
        ),
    )
}

fn multi_target() -> Outcome {
    let ds = Dataset::synthetic(20, 3, 64, 48, 6);
    let lossy = MockDetectorConfig { drop_probability: 0.5, seed: 2, ..exact_mock(&ds) };
    let clean = MockDetectorConfig { seed: 1, ..exact_mock(&ds) };
    let out = run_lab(FaultProfile::none(), &ds, &[("clean", clean), ("lossy", lossy)], session_config("pair", 1))?;
    let ids: Vec<&str> = out.reports.iter().map(|r| r.target_id.as_str()).collect();
    let segregated = ids == ["clean", "lossy"]
        && out.store.count("clean", 1) == ds.len()
        && out.store.count("lossy", 1) == ds.len()
        && out.store.for_target("lossy").all(|(k, r)| k.target_id == "lossy" && r.target_id == "lossy");
    let (a, b) = (map_of(&out, "clean")?, map_of(&out, "lossy")?);
    check(
        segregated && a > b,
        format!("reports {ids:?}; mAP clean {a} > lossy {b}"),
        format!("reports {ids:?}, segregated {segregated}; mAP clean {a}, lossy {b}"),
    )
}

fn six_runs() -> Outcome {
    let ds = Dataset::synthetic(8, 3, 64, 48, 7);
    let mock = MockDetectorConfig {
        synthetic_pre_ms: 1.0,
        synthetic_infer_ms: 2.0,
        synthetic_post_ms: 0.5,
        latency_jitter_ms: 1.0,
        seed: 31,
        ..exact_mock(&ds)
    };
    let out = run_lab(FaultProfile::none(), &ds, &[("t", mock)], session_config("six", 6))?;
    let timing = out.report("t").and_then(|r| r.timing()).ok_or("no timing fragment")?;
    let results: Vec<&ResultMessage> = out.store.for_target("t").map(|(_, r)| r).collect();
    let n = results.len() as f64;
    let direct_total = results.iter().map(|r| r.pre_ms + r.infer_ms + r.post_ms).sum::<f64>() / n;
    let direct_infer = results.iter().map(|r| r.infer_ms).sum::<f64>() / n;
    let s = &timing.summary;
    let ok = results.len() == 6 * ds.len()
        && s.count == results.len()
        && (s.mean_total_ms - direct_total).abs() <= 1e-9
        && (s.mean_infer_ms - direct_infer).abs() <= 1e-9
        && (s.fps - 1000.0 / direct_total).abs() <= 1e-9;
    check(
        ok,
        format!("{} records over 6 runs; mean total {:.6} ms, direct {:.6} ms", s.count, s.mean_total_ms, direct_total),
        format!(
            "{} results, summary count {}; mean total {} vs direct {}; mean infer {} vs {}",
            results.len(),
            s.count,
            s.mean_total_ms,
            direct_total,
            s.mean_infer_ms,
            direct_infer
        ),
    )
}
