use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use serval_core::compute::gradcheck::{op_suite, GradCheckOptions, GradCheckReport, MAX_EXHAUSTIVE, TOLERANCE};
use serval_core::config::RunConfig;
use serval_core::corpus::{
    balance_subsample, inspect, load_manifest, map_labels, write_manifest, AvTarget, CorpusManifest, Partition,
};
use serval_core::dsp::{center_crop_5s, log_mel, read_wav, wav_duration, write_mels, CROP_SAMPLES};
use serval_core::eval::{
    compare_report, read_predictions, write_predictions, CorpusPredictions, EvalReport, PredictionRow,
    RunPredictions,
};
use serval_core::model::{load_checkpoint, model_grad_check, Model, Regime};
use serval_core::synth::{generate, SynthSpec};
use serval_core::trainer::{
    domain_specs, evaluate, evaluate_examples, load_aggregated, load_av, load_categorical, load_partition,
    train_round_robin, train_single, transfer, DomainData, MultiTarget,
};
use serval_core::{Error, ErrorKind, Result};

#[derive(Parser)]
#[command(name = "serval", version, about = "Multi-corpus speech emotion recognition with residual adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-corpus fixture (WAVs and manifests).
    Synth {
        /// Fixture description; the built-in four-corpus fixture when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize corpora: sizes, speakers, durations.
    Inspect {
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Write log-mel feature files for every sample of a corpus.
    Features {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a single-corpus model from scratch.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Round-robin training of a shared model over several domains.
    TrainMulti {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "categorical")]
        target: MultiArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a target corpus on top of a pre-trained checkpoint.
    Transfer {
        #[arg(long)]
        from: PathBuf,
        #[arg(long, value_enum)]
        regime: TransferArg,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "categorical")]
        target: TaskArg,
        /// Reset an existing domain's adapters and head before training.
        #[arg(long)]
        reinit: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Map categorical labels to arousal or valence classes and balance them.
    MapAv {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        target: AvArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a checkpoint on one partition of a corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        partition: Partition,
        /// Head to use; the corpus id by default.
        #[arg(long)]
        domain: Option<String>,
        #[arg(long, value_enum, default_value = "categorical")]
        target: TaskArg,
        /// Seed of the arousal/valence balancing.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// McNemar comparison of a candidate run against a baseline run.
    Compare {
        /// Prediction files of the baseline, one per corpus.
        #[arg(long, required = true, num_args = 1..)]
        baseline: Vec<PathBuf>,
        /// Prediction files of the candidate, matched by corpus.
        #[arg(long, required = true, num_args = 1..)]
        candidate: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Compare analytic gradients with central differences.
    GradCheck {
        /// Exhaustive op checks plus full-model checks.
        #[arg(long)]
        full: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MultiArg {
    Categorical,
    Arousal,
    Valence,
    Av,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Categorical,
    Arousal,
    Valence,
}

#[derive(Clone, Copy, ValueEnum)]
enum AvArg {
    Arousal,
    Valence,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransferArg {
    Adapters,
    Head,
    Full,
}

impl From<AvArg> for AvTarget {
    fn from(a: AvArg) -> Self {
        match a {
            AvArg::Arousal => AvTarget::Arousal,
            AvArg::Valence => AvTarget::Valence,
        }
    }
}

impl TaskArg {
    fn av(self) -> Option<AvTarget> {
        match self {
            TaskArg::Categorical => None,
            TaskArg::Arousal => Some(AvTarget::Arousal),
            TaskArg::Valence => Some(AvTarget::Valence),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            })
        }
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Synth { spec, out } => synth(spec.as_deref(), &out),
        Command::Inspect { manifests, json } => inspect_cmd(&manifests, json),
        Command::Features { manifest, out } => features(&manifest, &out),
        Command::Train { config, seed, out } => train(&config, seed, out),
        Command::TrainMulti {
            config,
            target,
            seed,
            out,
        } => train_multi(&config, target, seed, out),
        Command::Transfer {
            from,
            regime,
            config,
            target,
            reinit,
            seed,
            out,
        } => transfer_cmd(&from, regime, &config, target, reinit, seed, out),
        Command::MapAv {
            manifest,
            target,
            out,
            seed,
        } => map_av(&manifest, target.into(), &out, seed),
        Command::Eval {
            ckpt,
            manifest,
            partition,
            domain,
            target,
            seed,
            out,
        } => eval_cmd(&ckpt, &manifest, partition, domain, target, seed, &out),
        Command::Compare {
            baseline,
            candidate,
            json,
        } => compare(&baseline, &candidate, json),
        Command::GradCheck { full } => grad_check(full),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn print_warnings(m: &CorpusManifest) {
    for w in &m.warnings {
        eprintln!("warning: {}: {w}", m.corpus_id);
    }
}

fn synth(spec: Option<&Path>, out: &Path) -> Result<u8> {
    let spec = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default_fixture(),
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("spec.json"), &spec)?;
    for g in generate(&spec, out)? {
        println!("{}\t{} samples\t{}", g.manifest.corpus_id, g.manifest.records.len(), g.manifest_path.display());
    }
    Ok(0)
}

fn load_manifests(paths: &[PathBuf]) -> Result<Vec<CorpusManifest>> {
    paths
        .iter()
        .map(|p| {
            let m = load_manifest(p)?;
            print_warnings(&m);
            Ok(m)
        })
        .collect()
}

fn inspect_cmd(paths: &[PathBuf], json: bool) -> Result<u8> {
    let manifests = load_manifests(paths)?;
    let mut durations = HashMap::new();
    for m in &manifests {
        for r in &m.records {
            if let Ok(d) = wav_duration(&m.audio_path(r)) {
                durations.insert((m.corpus_id.clone(), r.sample_id.clone()), d);
            }
        }
    }
    let report = inspect(&manifests, &durations);
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{report}");
    }
    Ok(0)
}

fn features(manifest: &Path, out: &Path) -> Result<u8> {
    let m = load_manifest(manifest)?;
    print_warnings(&m);
    let dir = out.join(&m.corpus_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for r in &m.records {
        let audio = read_wav(&m.audio_path(r))?;
        let audio = if audio.samples.len() > CROP_SAMPLES {
            center_crop_5s(&audio)
        } else {
            audio
        };
        write_mels(&dir.join(format!("{}.mels", r.sample_id)), &log_mel(&audio))?;
    }
    println!("{} feature files in {}", m.records.len(), dir.display());
    Ok(0)
}

fn run_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    if cfg.manifests.is_empty() {
        return Err(Error::InvalidConfig(format!("{}: no manifests given", path.display())));
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct SingleSummary {
    domain: String,
    regime: Regime,
    epochs: usize,
    best_epoch: usize,
    best_devel_uar: f64,
    final_devel_uar: f64,
    best_test: Option<EvalReport>,
    final_test: Option<EvalReport>,
}

/// Test reports and predictions for the best and final models.
fn single_summary(
    best: &mut Model,
    last: &mut Model,
    data: &DomainData,
    regime: Regime,
    outcome: (usize, usize, f64, f64),
    cfg: &RunConfig,
) -> Result<SingleSummary> {
    let out = &cfg.output_dir;
    let test = |model: &mut Model, tag: &str| -> Result<Option<EvalReport>> {
        if data.test.is_empty() {
            return Ok(None);
        }
        let (report, rows) = evaluate(model, data, Partition::Test, cfg.schedule.batch_size)?;
        write_predictions(&out.join("predictions").join(tag).join(format!("{}.csv", data.spec.id)), &rows)?;
        Ok(Some(report))
    };
    let (epochs, best_epoch, best_devel_uar, final_devel_uar) = outcome;
    let summary = SingleSummary {
        domain: data.spec.id.clone(),
        regime,
        epochs,
        best_epoch,
        best_devel_uar,
        final_devel_uar,
        best_test: test(best, "best")?,
        final_test: test(last, "final")?,
    };
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "{}: {} epochs, best devel UAR {:.4} (epoch {}), final devel UAR {:.4}",
        summary.domain, epochs, best_devel_uar, best_epoch, final_devel_uar
    );
    for (tag, r) in [("best", &summary.best_test), ("final", &summary.final_test)] {
        if let Some(r) = r {
            println!("{tag} test UAR {:.4} (chance {:.4})", r.uar, r.chance);
        }
    }
    Ok(summary)
}

fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<u8> {
    let cfg = run_config(config, seed, out)?;
    if cfg.regime != Regime::Scratch {
        return Err(Error::InvalidConfig(format!(
            "`train` runs the scratch regime (config has `{}`); use `train-multi` or `transfer`",
            cfg.regime
        )));
    }
    if cfg.manifests.len() != 1 {
        return Err(Error::InvalidConfig("`train` expects exactly one manifest".into()));
    }
    let manifests = load_manifests(&cfg.manifests)?;
    let data = load_categorical(&manifests[0])?;
    cfg.write_effective(&cfg.output_dir)?;
    let mut model = Model::build(cfg.model.clone(), &[data.spec.clone()], cfg.seed)?;
    let mut o = train_single(&mut model, &data, Regime::Scratch, &cfg.schedule, cfg.seed, Some(&cfg.output_dir))?;
    let stats = (o.epochs, o.best_epoch, o.best_devel_uar, o.final_devel_uar);
    single_summary(&mut o.best, &mut model, &data, Regime::Scratch, stats, &cfg)?;
    Ok(0)
}

fn train_multi(config: &Path, target: MultiArg, seed: Option<u64>, out: Option<PathBuf>) -> Result<u8> {
    let mut cfg = run_config(config, seed, out)?;
    cfg.regime = Regime::MultiDomain;
    let manifests = load_manifests(&cfg.manifests)?;
    let (target, domains) = match target {
        MultiArg::Categorical => (
            MultiTarget::Categorical,
            manifests.iter().map(load_categorical).collect::<Result<Vec<_>>>()?,
        ),
        MultiArg::Arousal | MultiArg::Valence => {
            let (t, av) = match target {
                MultiArg::Arousal => (MultiTarget::Arousal, AvTarget::Arousal),
                _ => (MultiTarget::Valence, AvTarget::Valence),
            };
            (t, manifests.iter().map(|m| load_av(m, av, cfg.seed)).collect::<Result<Vec<_>>>()?)
        }
        MultiArg::Av => (
            MultiTarget::Av,
            vec![
                load_aggregated("arousal", &manifests, AvTarget::Arousal, cfg.seed)?,
                load_aggregated("valence", &manifests, AvTarget::Valence, cfg.seed)?,
            ],
        ),
    };
    if target == MultiTarget::Categorical && domains.len() < 2 {
        return Err(Error::SingleDomainCategorical);
    }
    cfg.write_effective(&cfg.output_dir)?;
    let mut model = Model::build(cfg.model.clone(), &domain_specs(&domains), cfg.seed)?;
    let o = train_round_robin(&mut model, &domains, target, &cfg.schedule, cfg.seed, Some(&cfg.output_dir))?;
    let mut summary = BTreeMap::new();
    for d in &domains {
        let mut reports = BTreeMap::new();
        for p in [Partition::Devel, Partition::Test] {
            if d.partition(p).is_empty() {
                continue;
            }
            let (report, rows) = evaluate(&mut model, d, p, cfg.schedule.batch_size)?;
            if p == Partition::Test {
                write_predictions(
                    &cfg.output_dir.join("predictions").join("shared").join(format!("{}.csv", d.spec.id)),
                    &rows,
                )?;
            }
            println!("{} {p} UAR {:.4}", d.spec.id, report.uar);
            reports.insert(p.as_str(), report);
        }
        summary.insert(d.spec.id.clone(), reports);
    }
    write_json(
        &cfg.output_dir.join("summary.json"),
        &serde_json::json!({ "rounds": o.rounds, "domains": summary }),
    )?;
    Ok(0)
}

fn transfer_cmd(
    from: &Path,
    regime: TransferArg,
    config: &Path,
    task: TaskArg,
    reinit: bool,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<u8> {
    let mut cfg = run_config(config, seed, out)?;
    cfg.regime = match regime {
        TransferArg::Adapters => Regime::Adapters,
        TransferArg::Head => Regime::HeadOnly,
        TransferArg::Full => Regime::FullFinetune,
    };
    if cfg.manifests.len() != 1 {
        return Err(Error::InvalidConfig("`transfer` expects exactly one target manifest".into()));
    }
    let (mut model, meta) = load_checkpoint::<f32>(from)?;
    cfg.model = meta.config;
    let manifests = load_manifests(&cfg.manifests)?;
    let target = match task.av() {
        None => load_categorical(&manifests[0])?,
        Some(av) => load_av(&manifests[0], av, cfg.seed)?,
    };
    cfg.write_effective(&cfg.output_dir)?;
    let (data, mut o) = transfer(&mut model, &target, cfg.regime, reinit, &cfg.schedule, cfg.seed, Some(&cfg.output_dir))?;
    let stats = (o.epochs, o.best_epoch, o.best_devel_uar, o.final_devel_uar);
    single_summary(&mut o.best, &mut model, &data, cfg.regime, stats, &cfg)?;
    Ok(0)
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).map_err(|e| Error::io(path, e))
}

fn map_av(manifest: &Path, target: AvTarget, out: &Path, seed: u64) -> Result<u8> {
    let m = load_manifest(manifest)?;
    let balanced = balance_subsample(&m, target, seed)?;
    let mut mapped = map_labels(&balanced, target)?;
    print_warnings(&mapped);
    let out_dir = out.parent().unwrap_or(Path::new(""));
    if absolute(out_dir)? != absolute(&mapped.base_dir)? {
        for i in 0..mapped.records.len() {
            let p = absolute(&mapped.audio_path(&mapped.records[i]))?;
            mapped.records[i].audio_path = p.to_string_lossy().into_owned();
        }
    }
    write_manifest(out, &mapped)?;
    println!("{} samples -> {}", mapped.records.len(), out.display());
    Ok(0)
}

fn eval_cmd(
    ckpt: &Path,
    manifest: &Path,
    partition: Partition,
    domain: Option<String>,
    task: TaskArg,
    seed: u64,
    out: &Path,
) -> Result<u8> {
    let (mut model, _) = load_checkpoint::<f32>(ckpt)?;
    let m = load_manifest(manifest)?;
    print_warnings(&m);
    let m = match task.av() {
        None => m,
        Some(av) => map_labels(&balance_subsample(&m, av, seed)?, av)?,
    };
    let id = domain.unwrap_or_else(|| m.corpus_id.clone());
    let spec = model.arch.domain(&id)?.clone();
    let examples = load_partition(&m, partition, &spec.classes)?;
    let (mut report, rows) = evaluate_examples(&mut model, &spec, &examples, partition, 64)?;
    report.corpus_id = m.corpus_id.clone();
    let stem = format!("{}.{partition}", m.corpus_id);
    write_predictions(&out.join(format!("{stem}.predictions.csv")), &rows)?;
    write_json(&out.join(format!("{stem}.report.json")), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(0)
}

/// Corpus key of a prediction file: its name up to the first dot.
fn corpus_key(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.split('.').next().unwrap_or_default().to_string()
}

fn read_run(name: &str, files: &[PathBuf]) -> Result<BTreeMap<String, Vec<PredictionRow>>> {
    let mut out = BTreeMap::new();
    for f in files {
        let key = corpus_key(f);
        if out.insert(key.clone(), read_predictions(f)?).is_some() {
            return Err(Error::MisalignedRuns(format!("{name} has two files for corpus `{key}`")));
        }
    }
    Ok(out)
}

fn compare(baseline: &[PathBuf], candidate: &[PathBuf], json: bool) -> Result<u8> {
    let base = read_run("baseline", baseline)?;
    let cand = read_run("candidate", candidate)?;
    let mut base_run = RunPredictions {
        name: "baseline".into(),
        corpora: BTreeMap::new(),
    };
    let mut cand_run = RunPredictions {
        name: "candidate".into(),
        corpora: BTreeMap::new(),
    };
    for (corpus, rows) in &base {
        let other = cand
            .get(corpus)
            .ok_or_else(|| Error::MisalignedRuns(format!("candidate has no predictions for `{corpus}`")))?;
        let classes: BTreeSet<String> = rows
            .iter()
            .chain(other)
            .flat_map(|r| [r.reference.clone(), r.prediction.clone()])
            .collect();
        let classes: Vec<String> = classes.into_iter().collect();
        for (run, rows) in [(&mut base_run, rows), (&mut cand_run, other)] {
            run.corpora.insert(
                corpus.clone(),
                CorpusPredictions {
                    classes: classes.clone(),
                    rows: rows.clone(),
                },
            );
        }
    }
    if let Some(extra) = cand.keys().find(|k| !base.contains_key(*k)) {
        return Err(Error::MisalignedRuns(format!("baseline has no predictions for `{extra}`")));
    }
    let report = compare_report(&base_run, &[cand_run])?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{report}");
    }
    Ok(0)
}

fn grad_check(full: bool) -> Result<u8> {
    let opts = GradCheckOptions {
        max_coords: if full { MAX_EXHAUSTIVE } else { 200 },
        ..GradCheckOptions::default()
    };
    let mut reports: Vec<GradCheckReport> = op_suite(opts)?;
    if full {
        reports.push(model_grad_check(Regime::Scratch, true, opts)?);
        reports.push(model_grad_check(Regime::Adapters, false, opts)?);
    }
    let mut failed = 0;
    for r in &reports {
        let ok = r.passed(TOLERANCE);
        failed += usize::from(!ok);
        println!(
            "{}  {:<40} max rel err {:.3e}  ({}/{} coords)  worst {}",
            if ok { "PASS" } else { "FAIL" },
            r.label,
            r.max_rel_error,
            r.coords_checked,
            r.coords_total,
            r.worst
        );
    }
    println!("{} checks, {failed} failed (tolerance {TOLERANCE:e})", reports.len());
    Ok(if failed == 0 { 0 } else { 3 })
}
