//! Command-level behaviour of the `viewbench` binary on the shipped fixtures.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn exe() -> &'static str {
    env!("CARGO_BIN_EXE_viewbench")
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn core_fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn method_cmd(extra: &str) -> String {
    format!("{} ref-splat {extra}", shlex::try_quote(exe()).unwrap())
}

fn viewbench(args: &[&str]) -> Output {
    Command::new(exe())
        .args(args)
        .env_remove("NB_LPIPS_WEIGHTS")
        .output()
        .expect("viewbench runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Synthetic weight containers written once per test binary.
fn weights(backbone: &str) -> PathBuf {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    let dir = DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        for b in ["alex", "vgg"] {
            let path = dir.path().join(format!("{b}.lpw"));
            let out = viewbench(&["lpips-synth", "--backbone", b, "--seed", "20240601", "--output", path.to_str().unwrap()]);
            assert_eq!(code(&out), 0, "{}", stderr(&out));
        }
        dir
    });
    dir.path().join(format!("{backbone}.lpw"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn identical_predictions_give_perfect_aggregates() {
    let tmp = tempfile::tempdir().unwrap();
    let preds = tmp.path().join("preds");
    std::fs::create_dir(&preds).unwrap();
    for id in ["view_00", "view_08"] {
        std::fs::copy(
            fixtures().join(format!("synth9/images/{id}.png")),
            preds.join(format!("{id}.png")),
        )
        .unwrap();
    }
    let out_path = tmp.path().join("results.json");
    let out = viewbench(&[
        "evaluate",
        "--predictions", s(&preds),
        "--data", s(&fixtures().join("synth9")),
        "--protocol-file", s(&fixtures().join("protocols/synthetic-native.json")),
        "--lpips-weights", s(&weights("alex")),
        "--output", s(&out_path),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let doc = read_json(&out_path);
    assert_eq!(doc["aggregates"]["psnr"], "Infinity");
    assert_eq!(doc["aggregates"]["ssim"], 1.0);
    assert_eq!(doc["aggregates"]["lpips"], 0.0);
    assert_eq!(doc["dataset_id"], "synthetic-native");
    assert_eq!(doc["scene_id"], "synth9");
}

#[test]
fn missing_prediction_exits_2_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::copy(fixtures().join("synth9/images/view_00.png"), tmp.path().join("view_00.png")).unwrap();
    let out = viewbench(&[
        "evaluate",
        "--predictions", s(tmp.path()),
        "--data", s(&fixtures().join("synth9")),
        "--protocol-file", s(&fixtures().join("protocols/synthetic-native.json")),
        "--lpips-weights", s(&weights("alex")),
        "--output", s(&tmp.path().join("r.json")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("view_08"), "{}", stderr(&out));
    assert!(!tmp.path().join("r.json").exists());
}

#[test]
fn weights_come_from_the_environment_when_not_given() {
    let tmp = tempfile::tempdir().unwrap();
    let preds = fixtures().join("protocol_sensitivity/predictions");
    let data = fixtures().join("protocol_sensitivity");
    let protocol = fixtures().join("protocols/manual_downscale_4.json");
    let output = tmp.path().join("r.json");
    let args = [
        "evaluate",
        "--predictions", s(&preds),
        "--data", s(&data),
        "--protocol-file", s(&protocol),
        "--output", s(&output),
    ];
    let out = viewbench(&args);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("NB_LPIPS_WEIGHTS"));
    let out = Command::new(exe()).args(args).env("NB_LPIPS_WEIGHTS", weights("vgg")).output().unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn wrong_backbone_and_unknown_protocol_are_input_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let preds = fixtures().join("protocol_sensitivity/predictions");
    let base = |protocol: &[&str], weights_path: &Path| {
        let mut args = vec![
            "evaluate".to_string(),
            "--predictions".into(), s(&preds).into(),
            "--data".into(), s(&fixtures().join("protocol_sensitivity")).into(),
            "--lpips-weights".into(), s(weights_path).into(),
            "--output".into(), s(&tmp.path().join("r.json")).into(),
        ];
        args.extend(protocol.iter().map(|a| a.to_string()));
        Command::new(exe()).args(&args).output().unwrap()
    };
    let out = base(&["--protocol", "mipnerf360"], &weights("alex"));
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("vgg"), "{}", stderr(&out));
    let out = base(&["--protocol", "no-such-protocol"], &weights("vgg"));
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("blender"), "{}", stderr(&out));
}

#[test]
fn protocol_choice_changes_psnr() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |protocol: &[&str], name: &str| {
        let path = tmp.path().join(name);
        let mut args = vec![
            "evaluate",
            "--predictions", s(&fixtures().join("protocol_sensitivity/predictions")).to_owned().leak(),
            "--data", s(&fixtures().join("protocol_sensitivity")).to_owned().leak(),
            "--lpips-weights", s(&weights("vgg")).to_owned().leak(),
            "--output", s(&path).to_owned().leak(),
        ];
        args.extend_from_slice(protocol);
        let out = viewbench(&args);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        read_json(&path)["aggregates"]["psnr"].as_f64().unwrap()
    };
    let released = run(&["--protocol", "mipnerf360"], "pre.json");
    let manual_file = fixtures().join("protocols/manual_downscale_4.json");
    let manual = run(&["--protocol-file", s(&manual_file)], "manual.json");
    assert!((released - manual).abs() > 0.05, "{released} vs {manual}");
}

fn run_and_evaluate(dir: &Path, jobs: &str, seed: &str) -> String {
    let preds = dir.join("preds");
    let out = viewbench(&[
        "run",
        "--method-cmd", &method_cmd(""),
        "--data", s(&fixtures().join("synth9")),
        "--iters", "300",
        "--save", s(&dir.join("ckpt")),
        "--predictions", s(&preds),
        "--seed", seed,
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let results = dir.join("results.json");
    let out = viewbench(&[
        "evaluate",
        "--predictions", s(&preds),
        "--data", s(&fixtures().join("synth9")),
        "--protocol-file", s(&fixtures().join("protocols/synthetic-native.json")),
        "--lpips-weights", s(&weights("alex")),
        "--output", s(&results),
        "--jobs", jobs,
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    std::fs::read_to_string(results).unwrap()
}

#[test]
fn run_then_evaluate_is_byte_identical_across_runs_and_jobs() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs: Vec<PathBuf> = (0..3).map(|i| tmp.path().join(format!("r{i}"))).collect();
    let a = run_and_evaluate(&dirs[0], "1", "0");
    let b = run_and_evaluate(&dirs[1], "1", "0");
    let c = run_and_evaluate(&dirs[2], "8", "0");
    assert_eq!(a, b);
    assert_eq!(a, c);
    let doc: Value = serde_json::from_str(&a).unwrap();
    assert_eq!(doc["method_id"], "ref-splat");
    assert_eq!(doc["per_image"].as_array().unwrap().len(), 2);
    assert!(dirs[0].join("ckpt/checkpoint.json").is_file());
    // A different seed changes the initialization and hence the renders.
    let d = run_and_evaluate(&tmp.path().join("seeded"), "1", "9");
    assert_ne!(a, d);
}

#[test]
fn appearance_fit_improves_right_half_psnr() {
    let tmp = tempfile::tempdir().unwrap();
    let score = |name: &str, extra: &[&str]| {
        let preds = tmp.path().join(name);
        let mut args = vec![
            "run",
            "--method-cmd", method_cmd("").leak(),
            "--data", s(&fixtures().join("synth9")).to_owned().leak(),
            "--protocol", "phototourism",
            "--iters", "300",
            "--predictions", s(&preds).to_owned().leak(),
        ];
        args.extend_from_slice(extra);
        let out = viewbench(&args);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let results = tmp.path().join(format!("{name}.json"));
        let out = viewbench(&[
            "evaluate",
            "--predictions", s(&preds),
            "--data", s(&fixtures().join("synth9")),
            "--protocol", "phototourism",
            "--lpips-weights", s(&weights("alex")),
            "--output", s(&results),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        read_json(&results)
    };
    let fitted = score("fitted", &[]);
    let plain = score("plain", &["--no-embedding-fit"]);
    for (f, p) in fitted["per_image"].as_array().unwrap().iter().zip(plain["per_image"].as_array().unwrap()) {
        let (f, p) = (f["psnr"].as_f64().unwrap(), p["psnr"].as_f64().unwrap());
        assert!(f > p, "fitted {f} vs plain {p}");
    }
}

#[test]
fn appearance_protocol_needs_embedding_support() {
    let tmp = tempfile::tempdir().unwrap();
    let out = viewbench(&[
        "run",
        "--method-cmd", &method_cmd("--no-embeddings"),
        "--data", s(&fixtures().join("synth9")),
        "--protocol", "phototourism",
        "--iters", "1",
        "--predictions", s(&tmp.path().join("p")),
    ]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn method_failures_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |cmd: String| {
        viewbench(&[
            "run",
            "--method-cmd", &cmd,
            "--data", s(&fixtures().join("synth9")),
            "--iters", "2",
            "--predictions", s(&tmp.path().join("p")),
        ])
    };
    let out = run(method_cmd("--fail-on train_iteration"));
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("Traceback"), "{}", stderr(&out));
    let out = run(method_cmd("--protocol-version nbproto/0"));
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    let out = run("/nonexistent/method --flag".into());
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let out = run("'unbalanced".into());
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn ranks_against_goldens() {
    let ranks = core_fixtures().join("ranks");
    let out = viewbench(&[
        "ranks",
        "--table", s(&ranks.join("blender_psnr.json")),
        "--pa", "P1", "--pb", "P2",
        "--golden", s(&ranks.join("blender_psnr.golden.json")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("one-in") || stdout(&out).contains("one_in"), "{}", stdout(&out));

    // The Mip-NeRF 360 PSNR table has one printed cell that the printed
    // scores cannot produce; the mismatch is reported, not hidden.
    let out = viewbench(&[
        "ranks",
        "--table", s(&ranks.join("mipnerf360_psnr.json")),
        "--pa", "P1", "--pb", "P2",
        "--golden", s(&ranks.join("mipnerf360_psnr.golden.json")),
    ]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(err.contains("Scaffold-GS") && err.contains("1 rank cell"), "{err}");
}

#[test]
fn ranks_csv_and_json_agree_and_direction_can_be_forced() {
    let ranks = core_fixtures().join("ranks");
    let run = |table: &str, extra: &[&str]| {
        let mut args = vec!["ranks", "--table", s(&ranks.join(table)).to_owned().leak(), "--pa", "P1", "--pb", "P2", "--json"];
        args.extend_from_slice(extra);
        let out = viewbench(&args);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        stdout(&out)
    };
    // CSV carries no direction, so it must be given explicitly.
    assert_eq!(run("mipnerf360_psnr.csv", &["--direction", "higher"]), run("mipnerf360_psnr.json", &[]));
    let csv = ranks.join("mipnerf360_psnr.csv");
    let out = viewbench(&["ranks", "--table", s(&csv), "--pa", "P1", "--pb", "P2"]);
    assert_eq!(code(&out), 2);
    assert_ne!(run("mipnerf360_psnr.json", &["--direction", "lower"]), run("mipnerf360_psnr.json", &[]));
    let out = viewbench(&["ranks", "--table", s(&ranks.join("blender_psnr.json")), "--pa", "P1", "--pb", "P9"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn dataset_inspect_lists_checksums() {
    let out = viewbench(&["dataset", "inspect", "--data", s(&fixtures().join("synth9"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let images = manifest["images"].as_array().unwrap();
    assert_eq!(images.len(), 9);
    assert_eq!(manifest["num_points3d"], 48 * 48);
    let test: Vec<&str> = images
        .iter()
        .filter(|i| i["split"] == "test")
        .map(|i| i["id"].as_str().unwrap())
        .collect();
    assert_eq!(test, ["view_00", "view_08"]);
    let bytes = std::fs::read(fixtures().join("synth9/images/view_03.png")).unwrap();
    assert_eq!(images[3]["sha256"], viewbench::image::sha256_hex(&bytes));
    let again = viewbench(&["dataset", "inspect", "--data", s(&fixtures().join("synth9"))]);
    assert_eq!(again.stdout, out.stdout);
}

#[test]
fn lpips_selftest_against_golden_pair() {
    let golden = core_fixtures().join("lpips/golden_alex.json");
    let out = viewbench(&["lpips-selftest", "--weights", s(&weights("alex")), "--golden", s(&golden)]);
    assert_eq!(code(&out), 0, "{}{}", stdout(&out), stderr(&out));
    assert!(stdout(&out).contains("PASS golden value"));

    let tmp = tempfile::tempdir().unwrap();
    let other = tmp.path().join("other.lpw");
    let out = viewbench(&["lpips-synth", "--backbone", "alex", "--seed", "1", "--output", s(&other)]);
    assert_eq!(code(&out), 0);
    let out = viewbench(&["lpips-selftest", "--weights", s(&other), "--golden", s(&golden)]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("FAIL payload hash"));

    let out = viewbench(&["lpips-selftest", "--weights", s(&other)]);
    assert_eq!(code(&out), 0);
    let garbage = tmp.path().join("garbage.lpw");
    std::fs::write(&garbage, b"not a container").unwrap();
    let out = viewbench(&["lpips-selftest", "--weights", s(&garbage)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn leaderboard_merges_and_sorts() {
    let tmp = tempfile::tempdir().unwrap();
    let doc = |method: &str, psnr: f64| {
        serde_json::json!({
            "method_id": method, "dataset_id": "d", "scene_id": "s", "protocol_id": "p",
            "per_image": [{"image_id": "a", "psnr": psnr, "ssim": 0.9, "lpips": 0.1}],
            "aggregates": {"psnr": psnr, "ssim": 0.9, "lpips": 0.1},
            "checksums": {"a": "00"}, "tool_version": "t"
        })
    };
    std::fs::write(tmp.path().join("r_low.json"), doc("low", 20.0).to_string()).unwrap();
    std::fs::write(tmp.path().join("r_high.json"), doc("high", 30.0).to_string()).unwrap();
    std::fs::write(tmp.path().join("notes.txt"), "x").unwrap();
    let board = tmp.path().join("board.json");
    let pattern = format!("{}/r_*.json", tmp.path().display());
    let out = viewbench(&["export-leaderboard", "--results", &pattern, "--output", s(&board)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v = read_json(&board);
    let ids: Vec<&str> = v["entries"].as_array().unwrap().iter().map(|e| e["method_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["high", "low"]);

    let out = viewbench(&["export-leaderboard", "--results", &format!("{}/none_*.json", tmp.path().display()), "--output", s(&board)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn conformance_command_passes_for_reference_method() {
    let out = viewbench(&["conformance", "--method-cmd", &method_cmd("")]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert_eq!(stdout(&out).lines().filter(|l| l.starts_with("PASS")).count(), 11);
    let out = viewbench(&["conformance", "--method-cmd", &method_cmd("--crash-on save")]);
    assert_eq!(code(&out), 4);
    assert!(stdout(&out).contains("FAIL save/load"), "{}", stdout(&out));
}

#[test]
fn shipped_fixtures_match_their_generator() {
    let bin_dir = Path::new(exe()).parent().unwrap();
    let generator = bin_dir.join("examples").join("make_fixtures");
    assert!(generator.is_file(), "{} not built", generator.display());
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(&generator).arg(tmp.path()).output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let mut compared = 0;
    let mut stack = vec![PathBuf::new()];
    while let Some(rel) = stack.pop() {
        for entry in std::fs::read_dir(tmp.path().join(&rel)).unwrap() {
            let entry = entry.unwrap();
            let rel = rel.join(entry.file_name());
            if entry.file_type().unwrap().is_dir() {
                stack.push(rel);
            } else {
                let shipped = std::fs::read(fixtures().join(&rel)).unwrap_or_default();
                assert!(shipped == std::fs::read(entry.path()).unwrap(), "{} differs", rel.display());
                compared += 1;
            }
        }
    }
    assert!(compared >= 20, "{compared}");
}
