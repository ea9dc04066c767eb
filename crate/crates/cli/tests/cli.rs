use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::Duration;

use gatepark::backend::{run_transcript, Backend, GoldenExchange, Op, StreamEndpoint};
use gatepark::barrier::{BarrierClient, BarrierCommand, BarrierReply, StreamLink};
use gatepark::clock::WallClock;
use gatepark::gate::{perturbed_face, synthetic_face, write_gate_scene};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gatepark"))
}

fn gp(args: &[&str]) -> Output {
    bin().args(args).output().expect("run gatepark")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn fixture(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(rel)
        .display()
        .to_string()
}

fn core_fixture(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(rel)
        .display()
        .to_string()
}

fn value_of(out: &str, key: &str) -> f64 {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} ")))
        .and_then(|rest| rest.split(' ').next())
        .unwrap_or_else(|| panic!("no {key} in {out}"))
        .parse()
        .unwrap()
}

#[test]
fn dataset_commands() {
    let root = fixture("dataset");
    let split = gp(&["dataset", "split", &root, "--ratios", "0.6,0.2,0.2", "--seed", "7"]);
    assert!(split.status.success());
    assert_eq!(stdout(&split), "train 6\nval 2\ntest 2\n");

    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("manifest.txt");
    let out = tmp.path().join("split");
    let m = manifest.display().to_string();
    let o = out.display().to_string();
    assert!(gp(&[
        "dataset",
        "split",
        &root,
        "--seed",
        "7",
        "--out",
        &m,
        "--materialize",
        &o
    ])
    .status
    .success());
    assert_eq!(std::fs::read_to_string(&manifest).unwrap().lines().count(), 10);
    assert_eq!(std::fs::read_dir(out.join("val/images")).unwrap().count(), 2);

    let v = gp(&["dataset", "validate", &root]);
    assert_eq!(v.status.code(), Some(0));
    let s = gp(&["dataset", "stats", &root, "--manifest", &m]);
    let text = stdout(&s);
    assert!(
        text.contains("class car 13\n") && text.contains("class plate 6\n"),
        "{text}"
    );
    assert!(
        text.contains("split train images 6 ") && text.contains("split test images 2 "),
        "{text}"
    );
    assert!(text.ends_with("total 19\n"));
}

#[test]
fn dirty_dataset_is_a_domain_failure() {
    let tmp = tempfile::tempdir().unwrap();
    for d in ["images", "labels"] {
        std::fs::create_dir_all(tmp.path().join(d)).unwrap();
    }
    std::fs::write(tmp.path().join("classes.txt"), "car\n").unwrap();
    std::fs::write(tmp.path().join("labels/a.txt"), "3 0.5 0.5 0.1 0.1\n").unwrap();
    let v = gp(&["dataset", "validate", &tmp.path().display().to_string()]);
    assert_eq!(v.status.code(), Some(1));
    assert!(stdout(&v).contains("orphan label"));
}

#[test]
fn eval_reports_and_rejects() {
    let truth = fixture("dataset");
    let ok = gp(&["eval", "--truth", &truth, "--preds", &fixture("eval/perfect.txt")]);
    assert!(ok.status.success());
    let text = stdout(&ok);
    let summary = text.lines().skip_while(|l| !l.contains("Precision")).nth(1).unwrap();
    assert_eq!(summary.split_whitespace().collect::<Vec<_>>(), ["1.0000"; 4]);

    let bad = gp(&["eval", "--truth", &truth, "--preds", &fixture("eval/malformed.txt")]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("line 2"));
}

#[test]
fn loss_breakdown_and_training() {
    let pred = fixture("loss/pred.grid");
    let target = fixture("loss/target.grid");
    let out = stdout(&gp(&[
        "loss",
        "--pred",
        &pred,
        "--target",
        &target,
        "--weights",
        "1,1,1",
    ]));
    for (k, want) in [("loc", 0.01), ("obj", 0.13), ("cls", 0.18), ("total", 0.32)] {
        assert!((value_of(&out, k) - want).abs() <= 1e-12, "{k}: {out}");
    }
    let heavy = stdout(&gp(&[
        "loss",
        "--pred",
        &pred,
        "--target",
        &target,
        "--weights",
        "5,1,1",
    ]));
    assert!((value_of(&heavy, "total") - 0.36).abs() <= 1e-12);
    let same = stdout(&gp(&["loss", "--pred", &target, "--target", &target]));
    assert_eq!(value_of(&same, "total"), 0.0);

    let t = gp(&["train-toy"]);
    assert!(t.status.success());
    assert!(value_of(&stdout(&t), "ratio") <= 0.1);
    assert_eq!(
        gp(&["loss", "--pred", &pred, "--target", &target, "--weights", "1,x,1"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn lot_analyze_matches_generator_and_golden_overlay() {
    let tmp = tempfile::tempdir().unwrap();
    let render = tmp.path().join("overlay.ppm");
    let out = gp(&[
        "lot",
        "analyze",
        "--frame",
        &core_fixture("occupancy/lot.pgm"),
        "--slots",
        &core_fixture("occupancy/lot.slots"),
        "--render",
        &render.display().to_string(),
    ]);
    assert!(out.status.success());
    let occupied: Vec<String> = stdout(&out)
        .lines()
        .filter(|l| l.contains(" occupied "))
        .map(|l| l.split(' ').nth(1).unwrap().to_string())
        .collect();
    assert_eq!(occupied, ["1", "3"]);
    assert!(std::fs::read(&render).unwrap() == std::fs::read(core_fixture("occupancy/overlay.ppm")).unwrap());

    let missing = gp(&[
        "lot",
        "analyze",
        "--frame",
        &core_fixture("occupancy/lot.pgm"),
        "--slots",
        "/nonexistent.slots",
    ]);
    assert_eq!(missing.status.code(), Some(2));
    let none = gp(&["lot", "analyze", "--frame", &core_fixture("occupancy/lot.pgm")]);
    assert_eq!(none.status.code(), Some(2));
}

#[test]
fn lot_synth_then_watch() {
    let tmp = tempfile::tempdir().unwrap();
    let mut frames = Vec::new();
    let map = tmp.path().join("lot.slots").display().to_string();
    for (i, occ) in ["2,4", "", "1,2,3,4,5"].iter().enumerate() {
        let f = tmp.path().join(format!("f{i}.pgm")).display().to_string();
        let mut args = vec![
            "lot", "synth", "--seed", "5", "--slots", "5", "--frame", &f, "--map", &map,
        ];
        if !occ.is_empty() {
            args.extend(["--occupied", occ]);
        }
        assert!(gp(&args).status.success());
        frames.push(f);
    }
    let renders = tmp.path().join("renders").display().to_string();
    let mut args = vec![
        "lot",
        "watch",
        "--slots",
        &map,
        "--interval-ms",
        "500",
        "--render-dir",
        &renders,
        "--frames",
    ];
    args.extend(frames.iter().map(String::as_str));
    let out = gp(&args);
    assert!(out.status.success());
    let lines: Vec<String> = stdout(&out).lines().map(String::from).collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("t=500 "));
    let occupied = |l: &str| -> Vec<String> {
        l.split(' ')
            .skip(1)
            .filter(|s| s.contains(":occupied:"))
            .map(|s| s.split(':').next().unwrap().to_string())
            .collect()
    };
    assert_eq!(occupied(&lines[0]), ["2", "4"]);
    assert!(occupied(&lines[1]).is_empty());
    assert_eq!(occupied(&lines[2]).len(), 5);
    assert_eq!(std::fs::read_dir(&renders).unwrap().count(), 3);
    assert_eq!(out.stdout, gp(&args).stdout);
}

#[test]
fn registry_round_trip_and_bad_plate() {
    let tmp = tempfile::tempdir().unwrap();
    let store = tmp.path().display().to_string();
    let add = gp(&[
        "registry",
        "--store",
        &store,
        "add-vehicle",
        "lea-123",
        "--driver",
        "E1",
    ]);
    assert!(add.status.success());
    assert_eq!(stdout(&add), "LEA123\n");
    let list = stdout(&gp(&["registry", "--store", &store, "list"]));
    assert!(list.starts_with("LEA123 ") && list.contains("drivers=E1"), "{list}");
    let bad = gp(&["registry", "--store", &store, "add-vehicle", "12-AB"]);
    assert_eq!(bad.status.code(), Some(2));
    assert_eq!(stdout(&gp(&["registry", "--store", &store, "list"])), list);
    assert_eq!(
        gp(&["registry", "--store", &store, "list", "parrots"]).status.code(),
        Some(2)
    );
}

#[test]
fn config_show_and_check() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("gate.conf");
    std::fs::write(
        &cfg,
        "store.dir = .\nlot.slot_map = missing.slots\ngate.face_threshold = 0.35\n",
    )
    .unwrap();
    let c = cfg.display().to_string();
    let shown = stdout(&gp(&["--config", &c, "config", "show"]));
    assert!(shown.contains("gate.face_threshold = 0.35\n"));
    assert_eq!(gp(&["--config", &c, "config", "check"]).status.code(), Some(2));
    let fixed = gp(&["--config", &c, "--set", "lot.slot_map=", "config", "check"]);
    assert_eq!(
        fixed.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&fixed.stderr)
    );
    assert_eq!(gp(&["--set", "gate.nope=1", "config", "show"]).status.code(), Some(2));
}

fn emb_text(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}\n")).collect()
}

/// Scenes plus a store holding one vehicle, one enrolled employee and two
/// slots, built entirely through the CLI.
fn gate_setup(dir: &Path) -> PathBuf {
    write_gate_scene(dir, "reg", "LEA123", None, 10).unwrap();
    let base = synthetic_face(1, 128);
    std::fs::write(dir.join("enroll.emb"), emb_text(&base)).unwrap();
    std::fs::write(dir.join("drv_known.emb"), emb_text(&perturbed_face(&base, 0.1, 2))).unwrap();
    std::fs::write(dir.join("drv_unknown.emb"), emb_text(&synthetic_face(99, 128))).unwrap();
    let store = dir.join("store");
    let s = store.display().to_string();
    let enroll = dir.join("enroll.emb").display().to_string();
    for args in [
        vec!["add-vehicle", "LEA123"],
        vec!["add-employee", "E1", "--name", "Ayesha"],
        vec!["enroll-face", "E1", "--embedding", &enroll],
        vec!["init-slots", "2"],
    ] {
        let mut full = vec!["registry", "--store", &s];
        full.extend(args);
        let o = gp(&full);
        assert!(o.status.success(), "{full:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    store
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        std::fs::copy(e.path(), to.join(e.file_name())).unwrap();
    }
}

fn run_scenario(dir: &Path, store: &Path, scenario: &str, extra: &[&str]) -> (Output, String) {
    let sc = dir.join("scenario.txt");
    std::fs::write(&sc, scenario).unwrap();
    let transcript = dir.join("transcript.txt");
    let mut args = vec![
        "gate".to_string(),
        "run".into(),
        "--scenario".into(),
        sc.display().to_string(),
        "--store".into(),
        store.display().to_string(),
        "--transcript".into(),
        transcript.display().to_string(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    let out = bin().args(&args).output().unwrap();
    (out, std::fs::read_to_string(&transcript).unwrap_or_default())
}

#[test]
fn gate_scenarios_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let pristine = gate_setup(dir);

    let granted = "arrive reg.pgm face drv_known.pgm\ntick 2000\n";
    let store_a = dir.join("store_a");
    copy_dir(&pristine, &store_a);
    let (out, transcript) = run_scenario(dir, &store_a, granted, &["--expect-grant"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = stdout(&out);
    let last_session = trace.lines().rfind(|l| l.split(' ').nth(1) != Some("-")).unwrap();
    assert_eq!(last_session.split(' ').nth(3), Some("Granted"), "{trace}");
    assert_eq!(transcript.lines().filter(|l| l.ends_with("> OPEN")).count(), 1);

    let store_b = dir.join("store_b");
    copy_dir(&pristine, &store_b);
    let (again, again_transcript) = run_scenario(dir, &store_b, granted, &["--expect-grant"]);
    assert_eq!(again.stdout, out.stdout);
    assert_eq!(again_transcript, transcript);

    let store_c = dir.join("store_c");
    copy_dir(&pristine, &store_c);
    let (denied, denied_transcript) = run_scenario(
        dir,
        &store_c,
        "arrive reg.pgm face drv_unknown.pgm\ntick 2000\n",
        &["--expect-grant"],
    );
    assert_eq!(denied.status.code(), Some(1));
    assert!(stdout(&denied).contains(" Denied(DriverUnknown) "));
    assert_eq!(denied_transcript.lines().filter(|l| l.ends_with("> OPEN")).count(), 0);

    // The audit log agrees with the trace, session by session.
    let events = stdout(&gp(&["registry", "--store", &store_c.display().to_string(), "events"]));
    let mut audit: BTreeMap<String, String> = BTreeMap::new();
    for line in events.lines() {
        let field = |k: &str| {
            line.split(' ')
                .find_map(|f| f.strip_prefix(&format!("{k}=")))
                .map(String::from)
        };
        if let (Some(kind), Some(session)) = (field("kind"), field("session")) {
            if kind == "deny" || kind == "grant" {
                audit.insert(session, format!("{kind}:{}", field("reason").unwrap_or_default()));
            }
        }
    }
    assert_eq!(
        audit,
        BTreeMap::from([("1".to_string(), "deny:DriverUnknown".to_string())])
    );

    let bad = run_scenario(dir, &store_c, "arrive\n", &[]).0;
    assert_eq!(bad.status.code(), Some(2));
}

/// Reads lines from a child's stdout until one starts with `listening `.
fn listening_addr(child: &mut Child) -> (String, BufReader<std::process::ChildStdout>) {
    let mut reader = BufReader::new(child.stdout.take().unwrap());
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening ")
        .unwrap_or_else(|| panic!("{line:?}"))
        .to_string();
    (addr, reader)
}

#[test]
fn barrier_sim_over_tcp() {
    let mut child = bin()
        .args([
            "barrier-sim",
            "--port",
            "0",
            "--travel-ms",
            "50",
            "--auto-pass-ms",
            "20",
        ])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let (addr, _out) = listening_addr(&mut child);
    let mut client = BarrierClient::new(
        StreamLink::connect(addr.as_str()).unwrap(),
        std::sync::Arc::new(WallClock::new()),
    );
    assert_eq!(client.send(BarrierCommand::Open).unwrap(), BarrierReply::AckOpen);
    std::thread::sleep(Duration::from_millis(150));
    assert_eq!(client.send(BarrierCommand::Close).unwrap(), BarrierReply::AckClose);
    child.kill().unwrap();
    child.wait().unwrap();
}

fn reference_child() -> StreamEndpoint {
    let mut cmd = bin();
    cmd.args([
        "backend",
        "serve-reference",
        "--root",
        &core_fixture("backend"),
        "--sigma",
        "0.02",
        "--seed",
        "9",
        "--dim",
        "128",
    ]);
    StreamEndpoint::spawn(&mut cmd, 5000).unwrap()
}

#[test]
fn child_process_reference_passes_golden_transcript() {
    let golden =
        GoldenExchange::parse_transcript(&std::fs::read_to_string(core_fixture("backend/golden.txt")).unwrap())
            .unwrap();
    let mut ep = reference_child();
    let mismatches = run_transcript(&mut ep, &golden);
    assert!(mismatches.is_empty(), "{mismatches:?}");
}

#[test]
fn child_process_soak() {
    let mut ep = reference_child();
    let first = ep.detect(Op::DetectPlate, "car1.pgm").unwrap();
    for i in 0..10_000u32 {
        match i % 4 {
            0 => assert_eq!(ep.detect(Op::DetectPlate, "car1.pgm").unwrap(), first),
            1 => assert_eq!(ep.face_embed("driver1.pgm").unwrap().len(), 128),
            2 => assert!(ep.detect(Op::DetectVehicle, "missing.pgm").is_err()),
            _ => assert_eq!(ep.detect(Op::DetectVehicle, "car1.pgm").unwrap().len(), 1),
        }
    }
}

#[test]
fn live_service_accepts_event_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let store = gate_setup(dir);
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = bin()
        .args([
            "gate",
            "run",
            "--live",
            "--frames",
            &dir.display().to_string(),
            "--store",
            &store.display().to_string(),
            "--set",
            &format!("service.listen_port={port}"),
        ])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let (addr, mut out) = listening_addr(&mut child);
    let stream = TcpStream::connect(addr).unwrap();
    let mut replies = BufReader::new(stream.try_clone().unwrap());
    let mut ask = |line: &str| {
        (&stream).write_all(format!("{line}\n").as_bytes()).unwrap();
        let mut r = String::new();
        replies.read_line(&mut r).unwrap();
        r.trim_end().to_string()
    };
    assert_eq!(ask("arrive reg.pgm face drv_known.pgm"), "ok");
    assert!(ask("tick 5").starts_with("err "));
    assert!(ask("exit NOPE").starts_with("anomaly "));
    assert_eq!(ask("quit"), "bye");
    assert!(child.wait().unwrap().success());
    let mut trace = String::new();
    std::io::Read::read_to_string(&mut out, &mut trace).unwrap();
    assert!(trace.lines().any(|l| l.split(' ').nth(3) == Some("Granted")), "{trace}");
}
