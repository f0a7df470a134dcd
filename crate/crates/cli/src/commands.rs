use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use shalrt::checkpoint::{write_atomic, Checkpoint};
use shalrt::config::RunConfig;
use shalrt::data::{
    load_corpus, load_split, read_conll, read_raw, tokenize, write_raw, CorpusFormat, DialogueSession, RawDialogue, Turn,
    Vocab,
};
use shalrt::eval::{bench_interleaved, evaluate, BenchMode};
use shalrt::metrics::{EvalReport, LatencyStats, PredictionRecord};
use shalrt::model::ShaLrt;
use shalrt::nn::Real;
use shalrt::sha::ShaVariant;
use shalrt::train::{fit, EpochLog};
use shalrt::{Error, Result};

use crate::{BenchArgs, ConfigArgs, ConvertArgs, EvalArgs, PredictArgs, SweepArgs, TrainArgs};

pub const BUILD_ID: &str = env!("SHALRT_BUILD_ID");
const OUTPUT_ENV: &str = "SHALRT_OUTPUT_DIR";

/// Everything needed to replay a training run.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub seed: u64,
    pub build_id: String,
    pub best_epoch: usize,
    pub epochs: Vec<EpochLog>,
    /// Which split `report` was computed on.
    pub report_split: String,
    pub report: PathBuf,
    pub checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn output_dir(flag: Option<&Path>, cfg: Option<&RunConfig>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.and_then(|c| c.data.output_dir.clone()))
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn resolve_config(a: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(path), _) if path.extension().is_some_and(|e| e == "json") => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let m: RunManifest =
                serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            m.config
        }
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => RunConfig::default(),
    };
    for o in &a.overrides {
        cfg.set(o)?;
    }
    match a.variant.as_deref() {
        None => {}
        Some(v @ ("sha" | "sha_p")) => {
            cfg.model.sha_variant = if v == "sha" { ShaVariant::Sequential } else { ShaVariant::Parallel };
            if cfg.model.sha_ablation.bypassed() {
                cfg.set("model.sha_ablation=full")?;
            }
        }
        Some("basic") => cfg.set("model.sha_ablation=off")?,
        Some(v) => return Err(config_err(format!("unknown variant `{v}`; expected sha, sha_p or basic"))),
    }
    if let Some(ab) = &a.ablation {
        cfg.set(&format!("model.sha_ablation={ab}"))?;
    }
    if a.no_slg {
        cfg.slg.enabled = false;
    }
    if a.no_lrm {
        cfg.model.lrm_enabled = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Dev and test files must use the training label sets; any other label is a schema mismatch.
fn load_labelled(path: &Path, format: CorpusFormat, vocab: &Vocab, ck_labels: &shalrt::data::LabelSets) -> Result<Vec<DialogueSession>> {
    load_split(path, format, vocab, ck_labels).map_err(|e| match e {
        Error::Label(msg) => Error::SchemaMismatch(format!("{}: {msg} (not in the model's label set)", path.display())),
        other => other,
    })
}

fn unlabelled(raw: &[RawDialogue], vocab: &Vocab) -> Vec<DialogueSession> {
    raw.iter()
        .map(|d| DialogueSession {
            id: d.id.clone(),
            turns: d
                .turns
                .iter()
                .map(|t| Turn {
                    words: t.tokens.clone(),
                    tokens: t.tokens.iter().map(|w| vocab.id(w)).collect(),
                    gold_intent: 0,
                    gold_slots: vec![0; t.tokens.len()],
                    predicted: None,
                })
                .collect(),
        })
        .collect()
}

fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("serializable");
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// One seeded training run into `dir`.
pub fn train_once(cfg: &RunConfig, dir: &Path, quiet: bool) -> Result<(RunManifest, EvalReport)> {
    let train_path = cfg.data.train.as_deref().ok_or_else(|| config_err("data.train is not set"))?;
    let corpus = load_corpus(train_path, cfg.data.format)?;
    let split = |p: &Option<PathBuf>| {
        p.as_deref()
            .map(|p| load_labelled(p, cfg.data.format, &corpus.vocab, &corpus.labels))
            .transpose()
    };
    let dev = split(&cfg.data.dev)?;
    let test = split(&cfg.data.test)?;
    create_dir(dir)?;

    let outcome = fit(cfg, &corpus, dev.as_deref(), |e| {
        if !quiet {
            let dev = e.dev.as_ref().map_or(String::new(), |r| {
                format!(" dev overall {:.4} intent {:.4} slot_f1 {:.4}", r.overall_accuracy, r.intent_accuracy, r.slot_f1)
            });
            eprintln!("epoch {:>4} loss {:.5} slu {:.5} slg {:.5}{dev}", e.epoch, e.train.loss, e.train.slu, e.train.slg);
        }
    })?;

    let checkpoint = dir.join("best.ckpt");
    Checkpoint::from_model(&outcome.best, cfg, &corpus.vocab, &corpus.labels, None).save(&checkpoint)?;
    let final_checkpoint = dir.join("final.ckpt");
    Checkpoint::from_model(
        &outcome.trainer.model,
        cfg,
        &corpus.vocab,
        &corpus.labels,
        Some(&outcome.trainer.optimizer),
    )
    .save(&final_checkpoint)?;

    let (report_split, sessions) = match (test, dev) {
        (Some(t), _) => ("test", t),
        (None, Some(d)) => ("dev", d),
        (None, None) => ("train", corpus.sessions.clone()),
    };
    let (report, records) = evaluate(&outcome.best, &sessions, &corpus.labels)?;
    let report_path = dir.join("report.json");
    write_atomic(&report_path, json(&report).as_bytes())?;
    write_predictions(&dir.join("predictions.jsonl"), &records)?;

    let manifest = RunManifest {
        config: cfg.clone(),
        seed: cfg.train.seed,
        build_id: BUILD_ID.into(),
        best_epoch: outcome.best_epoch,
        epochs: outcome.log,
        report_split: report_split.into(),
        report: report_path,
        checkpoint,
        final_checkpoint,
    };
    write_atomic(&dir.join("manifest.json"), json(&manifest).as_bytes())?;
    Ok((manifest, report))
}

#[derive(Serialize)]
struct MeanStd {
    mean: f64,
    std: f64,
}

impl MeanStd {
    fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self { mean, std: var.sqrt() }
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    if a.repeats == 0 {
        return Err(config_err("--repeats must be at least 1"));
    }
    let cfg = resolve_config(&a.config)?;
    let out = output_dir(a.config.out.as_deref(), Some(&cfg));
    if a.repeats == 1 {
        let (m, report) = train_once(&cfg, &out, a.quiet)?;
        println!("{}", json(&serde_json::json!({ "manifest": out.join("manifest.json"), "best_epoch": m.best_epoch, "report": report })));
        return Ok(());
    }
    let mut reports = Vec::new();
    let mut seeds = Vec::new();
    for r in 0..a.repeats as u64 {
        let mut c = cfg.clone();
        c.train.seed = cfg.train.seed.wrapping_add(r);
        let (_, report) = train_once(&c, &out.join(format!("seed{}", c.train.seed)), a.quiet)?;
        seeds.push(c.train.seed);
        reports.push(report);
    }
    let pick = |f: fn(&EvalReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    let summary = serde_json::json!({
        "seeds": seeds,
        "intent_accuracy": pick(|r| r.intent_accuracy),
        "slot_f1": pick(|r| r.slot_f1),
        "overall_accuracy": pick(|r| r.overall_accuracy),
    });
    write_atomic(&out.join("summary.json"), json(&summary).as_bytes())?;
    println!("{}", json(&summary));
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.into_model()?;
    let path = match &a.corpus {
        Some(p) => p.clone(),
        None => match a.split.as_str() {
            "train" => ck.config.data.train.clone(),
            "dev" => ck.config.data.dev.clone(),
            "test" => ck.config.data.test.clone(),
            s => return Err(config_err(format!("unknown split `{s}`; expected train, dev or test"))),
        }
        .ok_or_else(|| config_err(format!("checkpoint has no {} path; pass --corpus", a.split)))?,
    };
    let sessions = load_labelled(&path, ck.config.data.format, &ck.vocab, &ck.labels)?;
    let (report, records) = evaluate(&model, &sessions, &ck.labels)?;
    let out = output_dir(a.out.as_deref(), None);
    create_dir(&out)?;
    write_atomic(&out.join("report.json"), json(&report).as_bytes())?;
    write_predictions(&out.join("predictions.jsonl"), &records)?;
    println!("{}", json(&report));
    Ok(())
}

#[derive(Serialize)]
struct TurnPrediction<'a> {
    id: &'a str,
    turn: usize,
    tokens: &'a [String],
    intent: &'a str,
    slots: Vec<String>,
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.into_model()?;
    let raw = match &a.input {
        Some(p) => read_raw(p, ck.config.data.format)?,
        None if a.text.is_empty() => return Err(config_err("give --input or at least one --text")),
        None => vec![RawDialogue {
            id: "text".into(),
            turns: a
                .text
                .iter()
                .map(|t| {
                    let tokens = tokenize(t);
                    shalrt::data::RawTurn { slots: vec!["O".into(); tokens.len()], tokens, intent: String::new() }
                })
                .collect(),
        }],
    };
    if raw.iter().flat_map(|d| &d.turns).any(|t| t.tokens.is_empty()) {
        return Err(config_err("empty utterance"));
    }
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    for mut s in unlabelled(&raw, &ck.vocab) {
        let preds = model.predict_session(&mut s)?;
        for (t, p) in preds.iter().enumerate() {
            let line = TurnPrediction {
                id: &s.id,
                turn: t,
                tokens: &s.turns[t].words,
                intent: &ck.labels.intents[p.intent],
                slots: ck.labels.slot_names(&p.slots),
            };
            writeln!(w, "{}", serde_json::to_string(&line).expect("serializable")).map_err(|e| Error::io("<stdout>", e))?;
        }
    }
    Ok(())
}

fn variant<T: Real>(base: &ShaLrt<T>, name: &str) -> Result<ShaLrt<T>> {
    let mut m = base.clone();
    match name {
        "sha" => m.set_sha_variant(ShaVariant::Sequential),
        "sha_p" => m.set_sha_variant(ShaVariant::Parallel),
        "lrm_on" | "lrm_off" => {
            if !m.has_lrm() {
                return Err(config_err("checkpoint was trained without LRM"));
            }
            m.set_lrm_active(name == "lrm_on");
        }
        "decoder_on" => {}
        "decoder_off" => m.strip_decoder(),
        _ => {
            return Err(config_err(format!(
                "unknown bench setting `{name}`; expected sha, sha_p, lrm_on, lrm_off, decoder_on or decoder_off"
            )))
        }
    }
    Ok(m)
}

fn run_bench<T: Real>(base: ShaLrt<T>, names: &[String], sessions: &[DialogueSession], a: &BenchArgs, mode: BenchMode) -> Result<Vec<LatencyStats>> {
    let models = if names.is_empty() {
        vec![base]
    } else {
        names.iter().map(|n| variant(&base, n)).collect::<Result<Vec<_>>>()?
    };
    let refs: Vec<&ShaLrt<T>> = models.iter().collect();
    bench_interleaved(&refs, sessions, a.reps, a.warmup, mode)
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.into_model()?;
    let sessions = unlabelled(&read_raw(&a.corpus, ck.config.data.format)?, &ck.vocab);
    let mode = match a.mode.as_str() {
        "tagger" => BenchMode::Tagger,
        "greedy" if model.has_decoder() => BenchMode::Greedy,
        "greedy" => return Err(config_err("greedy mode needs a checkpoint with decoder weights")),
        m => return Err(config_err(format!("unknown mode `{m}`; expected tagger or greedy"))),
    };
    let names: Vec<String> = a
        .compare
        .as_deref()
        .map(|c| c.split(',').map(|s| s.trim().to_string()).collect())
        .unwrap_or_default();
    let stats = match a.precision.as_str() {
        "f64" => run_bench(model, &names, &sessions, a, mode)?,
        "f32" => run_bench(model.cast::<f32>(), &names, &sessions, a, mode)?,
        p => return Err(config_err(format!("unknown precision `{p}`; expected f64 or f32"))),
    };
    let labels: Vec<String> = if names.is_empty() { vec!["model".into()] } else { names.clone() };
    let mut out = serde_json::json!({
        "precision": a.precision,
        "mode": a.mode,
        "reps": a.reps,
        "warmup": a.warmup,
        "results": labels.iter().zip(&stats).map(|(n, s)| (n.clone(), serde_json::to_value(s).expect("serializable"))).collect::<serde_json::Map<_, _>>(),
    });
    if stats.len() == 2 {
        out["ratio"] = (stats[1].mean_ms / stats[0].mean_ms).into();
        if names == ["lrm_on", "lrm_off"] {
            out["lrm_overhead"] = (stats[0].mean_ms / stats[1].mean_ms - 1.0).into();
        }
    }
    println!("{}", json(&out));
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    Alpha,
    Lambda,
    LrmPosition,
    LrmCount,
}

impl SweepKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(Self::Alpha),
            "lambda" => Ok(Self::Lambda),
            "lrm_position" => Ok(Self::LrmPosition),
            "lrm_count" => Ok(Self::LrmCount),
            _ => Err(config_err(format!("unknown sweep kind `{s}`; expected alpha, lambda, lrm_position or lrm_count"))),
        }
    }

    pub fn default_grid(self, layers: usize) -> Vec<f64> {
        match self {
            Self::Alpha => (0..=10).map(|i| i as f64 * 0.05).collect(),
            Self::Lambda => (0..=4).map(|i| i as f64 * 0.25).collect(),
            Self::LrmPosition | Self::LrmCount => (1..layers).map(|k| k as f64).collect(),
        }
    }

    /// Applies one grid value, rejecting anything off the grid.
    pub fn apply(self, cfg: &mut RunConfig, v: f64) -> Result<String> {
        let on_step = |step: f64, hi: f64| (0.0..=hi + 1e-12).contains(&v) && ((v / step).round() * step - v).abs() < 1e-9;
        let layers = cfg.model.encoder_layers;
        let interval = || {
            let k = v.round() as usize;
            if v.fract() != 0.0 || k < 1 || k >= layers {
                Err(config_err(format!("LRM grid value {v} outside 1..{}", layers.saturating_sub(1))))
            } else {
                Ok(k)
            }
        };
        match self {
            Self::Alpha if on_step(0.05, 0.5) => {
                cfg.slg.alpha = v;
                Ok(format!("{v:.2}"))
            }
            Self::Lambda if on_step(0.25, 1.0) => {
                cfg.slg.lambda = v;
                Ok(format!("{v:.2}"))
            }
            Self::Alpha => Err(config_err(format!("alpha grid value {v} is not a multiple of 0.05 in [0, 0.5]"))),
            Self::Lambda => Err(config_err(format!("lambda grid value {v} is not a multiple of 0.25 in [0, 1]"))),
            Self::LrmPosition => {
                let k = interval()?;
                cfg.model.lrm_enabled = true;
                cfg.model.lrm_positions = vec![k];
                Ok(format!("{k}-{}", k + 1))
            }
            Self::LrmCount => {
                let c = interval()?;
                cfg.model.lrm_enabled = true;
                cfg.model.lrm_positions = (1..=c).collect();
                Ok(c.to_string())
            }
        }
    }
}

pub fn sweep(a: &SweepArgs) -> Result<()> {
    let kind = SweepKind::parse(&a.kind)?;
    let cfg = resolve_config(&a.config)?;
    let grid = if a.values.is_empty() { kind.default_grid(cfg.model.encoder_layers) } else { a.values.clone() };
    // Validate the whole grid before any training starts.
    let points = grid
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            let label = kind.apply(&mut c, v)?;
            c.validate()?;
            Ok((v, label, c))
        })
        .collect::<Result<Vec<_>>>()?;
    if points.is_empty() {
        return Err(config_err("empty sweep grid"));
    }
    let out = output_dir(a.config.out.as_deref(), Some(&cfg));
    let mut csv = String::from("kind,value,label,split,intent_accuracy,slot_f1,overall_accuracy\n");
    for (v, label, c) in &points {
        let dir = out.join(format!("sweep_{}_{}", a.kind, label));
        let (m, r) = train_once(c, &dir, true)?;
        let row = format!(
            "{},{v},{label},{},{:.6},{:.6},{:.6}\n",
            a.kind, m.report_split, r.intent_accuracy, r.slot_f1, r.overall_accuracy
        );
        eprint!("{row}");
        csv.push_str(&row);
    }
    create_dir(&out)?;
    write_atomic(&out.join(format!("sweep_{}.csv", a.kind)), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

pub fn convert(a: &ConvertArgs) -> Result<()> {
    let dialogues = read_conll(&a.input)?;
    write_raw(&a.output, &dialogues)?;
    eprintln!("wrote {} utterances to {}", dialogues.len(), a.output.display());
    Ok(())
}
