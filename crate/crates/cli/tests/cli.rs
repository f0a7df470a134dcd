use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use shalrt::data::{synth, write_raw};

fn shalrt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shalrt"))
        .args(args)
        .env_remove("SHALRT_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: [&str; 9] = [
    "model.d_model=16",
    "model.heads=2",
    "model.sha_layers=1",
    "model.encoder_layers=2",
    "model.lrm_positions=[1]",
    "slg.decoder_layers=1",
    "train.epochs=2",
    "train.batch_size=4",
    "train.learning_rate=0.001",
];

struct Fixture {
    dir: tempfile::TempDir,
    train: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let train = dir.path().join("train.jsonl");
        write_raw(&train, &synth::history_dependent(10, 3)).unwrap();
        Self { dir, train }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train_args(&self, out: &Path, extra: &[&str]) -> Vec<String> {
        let mut a = vec!["train".to_string(), "--quiet".into(), "--out".into(), out.display().to_string()];
        a.push("--set".into());
        a.push(format!("data.train=\"{}\"", self.train.display()));
        for s in SMALL {
            a.push("--set".into());
            a.push(s.into());
        }
        a.extend(extra.iter().map(|s| s.to_string()));
        a
    }

    fn train(&self, out: &Path, extra: &[&str]) -> Output {
        let args = self.train_args(out, extra);
        shalrt(&args.iter().map(String::as_str).collect::<Vec<_>>())
    }

    /// A trained checkpoint, shared by the tests that only read it.
    fn checkpoint(&self) -> PathBuf {
        let out = self.path("run");
        let o = self.train(&out, &[]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out.join("best.ckpt")
    }
}

#[test]
fn train_writes_run_artifacts() {
    let f = Fixture::new();
    let out = f.path("run");
    let o = f.train(&out, &["--variant", "sha_p"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for name in ["best.ckpt", "final.ckpt", "manifest.json", "report.json", "predictions.jsonl"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["epochs"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["config"]["model"]["sha_variant"], "parallel");
    assert_eq!(manifest["report_split"], "train");
    assert!(!manifest["build_id"].as_str().unwrap().is_empty());
    assert!(!out.with_extension("tmp").exists());
}

#[test]
fn basic_variant_without_slg_or_lrm_has_no_decoder_weights() {
    let f = Fixture::new();
    let out = f.path("basic");
    let o = f.train(&out, &["--variant", "basic", "--no-slg", "--no-lrm"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ck = shalrt::checkpoint::Checkpoint::load(&out.join("best.ckpt")).unwrap();
    assert!(ck.params.names().iter().all(|n| !n.starts_with("slg.") && !n.starts_with("lrm.") && !n.starts_with("sha.")));
}

#[test]
fn repeats_report_mean_and_std() {
    let f = Fixture::new();
    let out = f.path("rep");
    let o = f.train(&out, &["--repeats", "2", "--ablation", "result_only"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s: serde_json::Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["seeds"], serde_json::json!([42, 43]));
    assert!(s["slot_f1"]["std"].as_f64().unwrap() >= 0.0);
    assert!(out.join("seed43/best.ckpt").exists());
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let f = Fixture::new();
    let o = f.train(&f.path("x"), &["--set", "model.d_modle=3"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("model.d_modle"), "{}", stderr(&o));
    let o = f.train(&f.path("x"), &["--set", "slg.alpha=0.9"]);
    assert_eq!(code(&o), 2);
    let o = f.train(&f.path("x"), &["--variant", "fancy"]);
    assert_eq!(code(&o), 2);
    let o = shalrt(&["train", "--preset", "multi_turn"]);
    assert_eq!(code(&o), 2, "missing data.train");
    let cfg = f.path("bad.toml");
    fs::write(&cfg, "[train]\nepochs = 2\nbogus = 1\n").unwrap();
    let o = shalrt(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn corpus_errors_exit_3() {
    let f = Fixture::new();
    fs::write(&f.train, "{\"id\": \"a\", \"turns\": [{\"tokens\": [\"x\"], \"slots\": [], \"intent\": \"i\"}]}\n").unwrap();
    let o = f.train(&f.path("x"), &[]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains(":1:"), "{}", stderr(&o));
    let missing = f.path("missing.jsonl");
    let o = shalrt(&["train", "--set", &format!("data.train=\"{}\"", missing.display())]);
    assert_eq!(code(&o), 3);
}

#[test]
fn non_finite_loss_exits_5_with_step() {
    let f = Fixture::new();
    let o = f.train(&f.path("nan"), &["--set", "train.learning_rate=1e250", "--set", "train.epochs=5"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    assert!(stderr(&o).contains("step"));
}

#[test]
fn eval_is_read_only_and_repeatable() {
    let f = Fixture::new();
    let ck = f.checkpoint();
    let before = fs::read(&ck).unwrap();
    let run = |out: &str| {
        let o = shalrt(&["eval", "--checkpoint", ck.to_str().unwrap(), "--split", "train", "--out", f.path(out).to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        o.stdout
    };
    let a: serde_json::Value = serde_json::from_slice(&run("e1")).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&run("e2")).unwrap();
    let strip = |mut v: serde_json::Value| {
        v.as_object_mut().unwrap().remove("latency");
        v
    };
    assert_eq!(strip(a.clone()), strip(b));
    assert_eq!(a["utterances"], 20);
    let dump = fs::read_to_string(f.path("e1/predictions.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(dump.lines().next().unwrap()).unwrap();
    for key in ["id", "turn", "gold_intent", "pred_intent", "gold_slots", "pred_slots", "latency_ms"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    assert_eq!(fs::read(&ck).unwrap(), before);
}

#[test]
fn eval_errors() {
    let f = Fixture::new();
    let ck = f.checkpoint();
    let o = shalrt(&["eval", "--checkpoint", f.path("nope.ckpt").to_str().unwrap(), "--corpus", f.train.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let other = f.path("other.jsonl");
    let mut raw = synth::history_dependent(2, 9);
    raw[0].turns[0].intent = "unheard_of".into();
    write_raw(&other, &raw).unwrap();
    let o = shalrt(&["eval", "--checkpoint", ck.to_str().unwrap(), "--corpus", other.to_str().unwrap(), "--out", f.path("e").to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let o = shalrt(&["eval", "--checkpoint", ck.to_str().unwrap(), "--split", "dev"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn predict_from_text_and_file() {
    let f = Fixture::new();
    let ck = f.checkpoint();
    let o = shalrt(&["predict", "--checkpoint", ck.to_str().unwrap(), "--text", "take me to Safeway", "--text", "what about oak park"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines: Vec<serde_json::Value> = String::from_utf8(o.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["tokens"], serde_json::json!(["take", "me", "to", "safeway"]));
    assert_eq!(lines[1]["slots"].as_array().unwrap().len(), 4);
    let o = shalrt(&["predict", "--checkpoint", ck.to_str().unwrap(), "--input", f.train.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 20);
}

#[test]
fn bench_comparisons() {
    let f = Fixture::new();
    let ck = f.checkpoint();
    let before = fs::read(&ck).unwrap();
    let bench = |extra: &[&str]| {
        let mut a = vec!["bench", "--checkpoint", ck.to_str().unwrap(), "--corpus", f.train.to_str().unwrap(), "--reps", "5", "--warmup", "1"];
        a.extend_from_slice(extra);
        let o = shalrt(&a);
        (code(&o), serde_json::from_slice::<serde_json::Value>(&o.stdout).unwrap_or_default(), stderr(&o))
    };
    let (c, v, e) = bench(&["--compare", "sha,sha_p"]);
    assert_eq!(c, 0, "{e}");
    assert_eq!(v["results"]["sha"]["count"], 5);
    assert!(v["ratio"].as_f64().unwrap() > 0.0);
    let (c, v, _) = bench(&["--compare", "lrm_on,lrm_off", "--precision", "f32"]);
    assert_eq!(c, 0);
    assert!(v["lrm_overhead"].is_number());
    let (c, v, _) = bench(&["--mode", "greedy"]);
    assert_eq!(c, 0);
    assert_eq!(v["results"]["model"]["count"], 5);
    assert_eq!(bench(&["--reps", "0"]).0, 2);
    assert_eq!(bench(&["--compare", "sha,turbo"]).0, 2);
    assert_eq!(bench(&["--precision", "f16"]).0, 2);
    assert_eq!(fs::read(&ck).unwrap(), before);
}

#[test]
fn sweep_writes_csv_and_rejects_bad_grids() {
    let f = Fixture::new();
    let out = f.path("sweep");
    let mut a = f.train_args(&out, &[]);
    a[0] = "sweep".into();
    a.retain(|s| s != "--quiet");
    a.extend(["--kind", "lambda", "--values", "0,0.5"].map(String::from));
    let o = shalrt(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("sweep_lambda.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("kind,value,label"));

    for (kind, values) in [("alpha", "0.07"), ("lambda", "1.5"), ("lrm_position", "2"), ("lrm_count", "0"), ("warmth", "1")] {
        let mut a = f.train_args(&out, &[]);
        a[0] = "sweep".into();
        a.retain(|s| s != "--quiet");
        a.extend(["--kind", kind, "--values", values].map(String::from));
        let o = shalrt(&a.iter().map(String::as_str).collect::<Vec<_>>());
        assert_eq!(code(&o), 2, "{kind}={values}: {}", stderr(&o));
    }
}

#[test]
fn convert_conll() {
    let f = Fixture::new();
    let conll = f.path("in.conll");
    fs::write(&conll, "book\tO\nparis\tB-city\n#intent=travel\n\nhi\tO\n#intent=greet\n").unwrap();
    let out = f.path("out.jsonl");
    let o = shalrt(&["convert", "--input", conll.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["turns"][0]["slots"], serde_json::json!(["O", "B-city"]));
    fs::write(&conll, "book\tO\n").unwrap();
    assert_eq!(code(&shalrt(&["convert", "--input", conll.to_str().unwrap(), "--output", out.to_str().unwrap()])), 3);
}

#[test]
fn help_config_lists_keys_and_output_dir_env_is_honoured() {
    let o = shalrt(&["--help-config"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    for key in ["d_model", "sha_ablation", "lrm_positions", "alpha", "lambda", "history_source", "output_dir"] {
        assert!(text.contains(key), "{key}");
    }
    let f = Fixture::new();
    let args = f.train_args(Path::new("unused"), &[]);
    let args: Vec<&str> = args.iter().map(String::as_str).filter(|a| *a != "--out" && *a != "unused").collect();
    let o = Command::new(env!("CARGO_BIN_EXE_shalrt"))
        .args(&args)
        .env("SHALRT_OUTPUT_DIR", f.path("from_env"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(f.path("from_env/manifest.json").exists());
}

#[test]
fn config_command_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = shalrt(&["config", "--preset", "single_turn", "--set", "train.epochs=7", "--no-lrm"]);
    assert_eq!(code(&o), 0);
    let path = dir.path().join("c.toml");
    fs::write(&path, &o.stdout).unwrap();
    let again = shalrt(&["config", "--config", path.to_str().unwrap()]);
    assert_eq!(again.stdout, o.stdout);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("epochs = 7") && text.contains("lrm_enabled = false") && text.contains("d_model = 128"));
}
