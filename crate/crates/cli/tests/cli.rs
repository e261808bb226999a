use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lazylayer::data::{write_dump, AttentionDump, DumpManifest};
use lazylayer::model::{write_checkpoint, ModelCheckpoint, ModelConfig};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lazylayer"));
    c.env_remove("LAZYLAYER_OUT");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(["--out-dir", "out"]).args(args).output().expect("spawn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn dump_of(dir: &Path, name: &str, t: usize, layers: usize, heads: usize, row: impl Fn(usize) -> Vec<f64>) -> PathBuf {
    let mut m = DumpManifest::new("test", 2, t, layers, heads);
    m.causal = false;
    let mut data = Vec::new();
    for _ in 0..m.matrix_count() {
        for i in 0..t {
            data.extend(row(i));
        }
    }
    let p = dir.join(name);
    write_dump(&p, &AttentionDump::new(m, data).unwrap()).unwrap();
    p
}

fn uniform_dump(dir: &Path) -> PathBuf {
    dump_of(dir, "uniform.atnd", 6, 3, 2, |_| vec![1.0 / 6.0; 6])
}

const TINY_PLAN: &str = r#"{
  "version": 1,
  "recipe": "scratch",
  "model": {"n_layers": 2, "n_heads": 2, "hidden": 16, "context": 16, "vocab": 256},
  "steps_per_round": 12,
  "eval_interval": 4,
  "eval_batches": 2,
  "batch_size": 2,
  "context": 16,
  "optimizer": {"warmup": 2},
  "data": {"kind": "synthetic", "seed": 3, "bytes": 20000}
}"#;

fn write_plan(dir: &Path, name: &str, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v: Value = serde_json::from_str(TINY_PLAN).unwrap();
    edit(&mut v);
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string(&v).unwrap()).unwrap();
    p
}

fn reference(dir: &Path, layers: usize) -> PathBuf {
    let ck = ModelCheckpoint::init_random(&ModelConfig::new(layers, 2, 16, 16, 256), 11).unwrap();
    let p = dir.join("ref.llck");
    write_checkpoint(&p, &ck).unwrap();
    p
}

#[test]
fn uniform_dump_is_lazy_everywhere() {
    let d = tempfile::tempdir().unwrap();
    let p = uniform_dump(d.path());
    let o = run(d.path(), &["analyze", p.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().filter(|l| l.trim_start().starts_with(char::is_numeric)).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.contains("lazy")), "{text}");
    assert!(text.contains("lazy group"));
    let r = json(d.path().join("out/uniform_tau0.9.json"));
    assert_eq!(r["lazy"], serde_json::json!([true, true, true]));
}

#[test]
fn two_taus_give_two_reports() {
    let d = tempfile::tempdir().unwrap();
    let p = uniform_dump(d.path());
    let o = run(d.path(), &["analyze", p.to_str().unwrap(), "--tau", "0.8", "--tau", "0.95"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut jsons: Vec<String> = std::fs::read_dir(d.path().join("out"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".json"))
        .collect();
    jsons.sort();
    assert_eq!(jsons, ["uniform_tau0.8.json", "uniform_tau0.95.json"]);
    assert!(d.path().join("out/uniform_tau0.8_layers.csv").exists());
}

#[test]
fn sweep_tau_defaults_to_four_thresholds() {
    let d = tempfile::tempdir().unwrap();
    let p = uniform_dump(d.path());
    let o = run(d.path(), &["sweep-tau", p.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for tau in ["0.8", "0.85", "0.9", "0.95"] {
        assert!(d.path().join(format!("out/uniform_tau{tau}.json")).exists(), "{tau}");
    }
}

#[test]
fn group_summary_and_bad_group() {
    let d = tempfile::tempdir().unwrap();
    let p = dump_of(d.path(), "eye.atnd", 4, 2, 1, |i| (0..4).map(|j| f64::from(u8::from(i == j))).collect());
    let o = run(d.path(), &["analyze", p.to_str().unwrap(), "--group", "0..2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("potent group"));
    let o = run(d.path(), &["analyze", p.to_str().unwrap(), "--group", "1..5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_dump_names_the_path() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["analyze", "does_not_exist.atnd"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("does_not_exist.atnd"), "{}", stderr(&o));
}

#[test]
fn truncated_dump_reports_gaps() {
    let d = tempfile::tempdir().unwrap();
    let p = uniform_dump(d.path());
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 6 * 6 * 8 - 3]).unwrap();
    let o = run(d.path(), &["analyze", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seq 1, layer 2, head 1"), "{}", stderr(&o));
}

#[test]
fn corrupted_dump_is_an_input_error() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("junk.atnd");
    std::fs::write(&p, b"NOPE and some bytes").unwrap();
    assert_eq!(run(d.path(), &["theorem-check", "junk.atnd"]).status.code(), Some(2));
    assert_eq!(run(d.path(), &["analyze", "junk.atnd"]).status.code(), Some(2));
}

#[test]
fn random_theorem_check_passes() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["theorem-check", "--random", "1000", "--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("1000 matrices, 0 failing"));
    let certs = json(d.path().join("out/theorem_check.json"));
    assert_eq!(certs.as_array().unwrap().len(), 1000);
    let grads = json(d.path().join("out/theorem_check_gradients.json"));
    assert!(grads.as_array().unwrap().iter().all(|g| g["holds"] == true));
}

#[test]
fn exact_sink_dump_has_zero_epsilon() {
    let d = tempfile::tempdir().unwrap();
    dump_of(d.path(), "sink.atnd", 5, 2, 2, |_| vec![0.0, 0.0, 1.0, 0.0, 0.0]);
    let o = run(d.path(), &["theorem-check", "sink.atnd"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let certs = json(d.path().join("out/theorem_check.json"));
    let certs = certs.as_array().unwrap();
    assert_eq!(certs.len(), 8);
    for c in certs {
        assert_eq!(c["certificate"]["epsilon"], 0.0);
        assert_eq!(c["certificate"]["j_star"], 2);
        assert_eq!(c["holds"], true);
    }
    let csv = std::fs::read_to_string(d.path().join("out/theorem_check.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "epsilon").unwrap();
    assert!(lines.all(|l| l.split(',').nth(col) == Some("0")));
}

#[test]
fn non_stochastic_dump_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    dump_of(d.path(), "bad.atnd", 3, 1, 1, |_| vec![0.5, 0.5, 0.5]);
    let o = run(d.path(), &["theorem-check", "bad.atnd"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_step_plan_writes_initial_checkpoint_only() {
    let d = tempfile::tempdir().unwrap();
    write_plan(d.path(), "zero.json", |v| v["steps_per_round"] = 0.into());
    let o = run(d.path(), &["train", "zero.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run_dir = d.path().join("out/zero");
    assert!(run_dir.join("round_0.llck").exists());
    assert!(!run_dir.join("round_1.llck").exists());
    assert!(run_dir.join("run.json").exists());
    let result = json(run_dir.join("result.json"));
    assert_eq!(result["rounds"][0]["steps"], 0);
}

#[test]
fn interrupted_training_resumes_to_the_same_trace() {
    let d = tempfile::tempdir().unwrap();
    write_plan(d.path(), "toy.json", |_| {});
    let full = bin().current_dir(d.path()).args(["--out-dir", "a", "train", "toy.json"]).output().unwrap();
    assert!(full.status.success(), "{}", stderr(&full));

    let part = bin()
        .current_dir(d.path())
        .args(["--out-dir", "b", "train", "toy.json", "--stop-after", "5"])
        .output()
        .unwrap();
    assert!(part.status.success(), "{}", stderr(&part));
    assert!(d.path().join("b/toy/resume/state.json").exists());
    assert!(!d.path().join("b/toy/result.json").exists());
    let rest = bin().current_dir(d.path()).args(["--out-dir", "b", "train", "toy.json"]).output().unwrap();
    assert!(rest.status.success(), "{}", stderr(&rest));

    let read = |p: &str| std::fs::read(d.path().join(p)).unwrap();
    assert_eq!(read("a/toy/trace.csv"), read("b/toy/trace.csv"));
    assert_eq!(read("a/toy/round_1.llck"), read("b/toy/round_1.llck"));
    assert!(!d.path().join("b/toy/resume").exists());
    let trace = String::from_utf8(read("a/toy/trace.csv")).unwrap();
    let steps: Vec<&str> = trace.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["0", "4", "8", "12"]);
}

#[test]
fn seed_flag_overrides_plan() {
    let d = tempfile::tempdir().unwrap();
    write_plan(d.path(), "s.json", |v| {
        v["steps_per_round"] = 0.into();
        v["seed"] = 5.into();
    });
    let o = run(d.path(), &["--seed", "77", "train", "s.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(json(d.path().join("out/s/run.json"))["plan"]["seed"], 77);
}

#[test]
fn out_dir_from_environment() {
    let d = tempfile::tempdir().unwrap();
    write_plan(d.path(), "e.json", |v| v["steps_per_round"] = 0.into());
    let o = bin().current_dir(d.path()).env("LAZYLAYER_OUT", "from_env").args(["train", "e.json"]).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.path().join("from_env/e/result.json").exists());
}

#[test]
fn invalid_plan_exits_2() {
    let d = tempfile::tempdir().unwrap();
    write_plan(d.path(), "bad.json", |v| v["alpha"] = 3.0.into());
    let o = run(d.path(), &["train", "bad.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("alpha"), "{}", stderr(&o));
    std::fs::write(d.path().join("garbled.json"), "{ not json").unwrap();
    assert_eq!(run(d.path(), &["train", "garbled.json"]).status.code(), Some(2));
    assert_eq!(run(d.path(), &["train", "absent.json"]).status.code(), Some(2));
}

#[test]
fn inheritune_rounds_grow_by_two() {
    let d = tempfile::tempdir().unwrap();
    let r = reference(d.path(), 8);
    write_plan(d.path(), "inh.json", |v| {
        v["recipe"] = "inheritune".into();
        v["start_layers"] = 4.into();
        v["steps_per_round"] = 4.into();
        v.as_object_mut().unwrap().remove("model");
    });
    let o = run(d.path(), &["inheritune", "--reference", r.to_str().unwrap(), "--plan", "inh.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let result = json(d.path().join("out/inh/result.json"));
    let layers: Vec<u64> = result["rounds"].as_array().unwrap().iter().map(|r| r["layers"].as_u64().unwrap()).collect();
    assert!(!layers.is_empty() && layers.len() <= 3);
    for (i, l) in layers.iter().enumerate() {
        assert_eq!(*l, 4 + 2 * i as u64);
    }
    let text = stdout(&o);
    let rows = text.lines().filter(|l| l.trim_start().starts_with(char::is_numeric)).count();
    assert_eq!(rows, layers.len());
    let term = result["terminated_by"].as_str().unwrap();
    if layers.len() < 3 {
        assert_eq!(term, "matched_reference");
    } else {
        assert!(term == "matched_reference" || term == "layer_cap");
    }
}

#[test]
fn inheritune_past_reference_depth_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let r = reference(d.path(), 3);
    let o = run(d.path(), &["inheritune", "--reference", r.to_str().unwrap(), "--start-layers", "5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("1..=3"), "{}", stderr(&o));
}

#[test]
fn grow_source_is_recorded() {
    let d = tempfile::tempdir().unwrap();
    let r = reference(d.path(), 4);
    write_plan(d.path(), "g.json", |v| {
        v["steps_per_round"] = 1.into();
        v["max_rounds"] = 1.into();
        v.as_object_mut().unwrap().remove("model");
    });
    let o = run(
        d.path(),
        &["inheritune", "--reference", r.to_str().unwrap(), "--plan", "g.json", "--start-layers", "2", "--grow-source", "random"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let run_json = json(d.path().join("out/g/run.json"));
    assert_eq!(run_json["plan"]["grow_source"], "random");
    assert_eq!(run_json["provenance"]["grow_source"], "random");
}

#[test]
fn capture_then_analyze() {
    let d = tempfile::tempdir().unwrap();
    let r = reference(d.path(), 2);
    let o = run(d.path(), &["--seed", "4", "capture", "--model", r.to_str().unwrap(), "--n", "3", "--t", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(d.path(), &["analyze", "out/ref.atnd"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep = json(d.path().join("out/ref_tau0.9.json"));
    assert_eq!((rep["n"].as_u64(), rep["layers"].as_u64(), rep["heads"].as_u64()), (Some(3), Some(2), Some(2)));
}
