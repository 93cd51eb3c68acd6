//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::time::{Duration, Instant};

use serde_json::Value;
use serval_core::compute::{attention_pool, AttentionParams, Mode, Tensor};
use serval_core::corpus::load_manifest;
use serval_core::dsp::{
    frame_count, hann_window, log_mel, mel_centers_hz, stft_power, Waveform, HOP, N_BINS, N_FFT, N_MELS,
};
use serval_core::eval::{chance_level, mcnemar, mcnemar_counts, uar, ConfusionMatrix, McNemarMethod};
use serval_core::model::{save_checkpoint, DomainSpec, Model, ModelConfig, Regime};
use serval_core::trainer::{
    default_ladder, effective_lr, load_categorical, transfer, EarlyStopState, EpochOutcome, RoundRobinPlan,
    ScheduleConfig,
};

type Check = Result<String, String>;

trait Ctx<T> {
    fn ctx(self, what: &str) -> Result<T, String>;
}

impl<T, E: Display> Ctx<T> for Result<T, E> {
    fn ctx(self, what: &str) -> Result<T, String> {
        self.map_err(|e| format!("{what}: {e}"))
    }
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const BIN: &str = env!("CARGO_BIN_EXE_serval");

fn serval(args: &[&str]) -> Result<Output, String> {
    Command::new(BIN).args(args).output().ctx("spawning serval")
}

fn serval_ok(args: &[&str]) -> Result<String, String> {
    let out = serval(args)?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    if !out.status.success() {
        return Err(format!(
            "serval {} exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(stdout)
}

fn classes(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i}")).collect()
}

/// Deterministic pseudo-random values in `[-1, 1)` without pulling in an RNG.
fn noise(n: usize, seed: u64) -> Vec<f32> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f64 / (1u64 << 24) as f64 * 2.0 - 1.0) as f32
        })
        .collect()
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = fs::read_to_string(path).ctx(&path.display().to_string())?;
    serde_json::from_str(&text).ctx(&path.display().to_string())
}

/// Trainable and per-domain weight counts obtained by walking a checkpoint's
/// parameter listing.
fn walk_manifest(dir: &Path) -> Result<(usize, usize, BTreeMap<String, usize>), String> {
    let meta = read_json(&dir.join("meta.json"))?;
    let mut total = 0;
    let mut per_domain: BTreeMap<String, usize> = BTreeMap::new();
    let mut buffers = 0;
    for p in meta["params"].as_array().ok_or("no params listing")? {
        let n: usize = p["shape"]
            .as_array()
            .ok_or("shape")?
            .iter()
            .map(|d| d.as_u64().unwrap_or(0) as usize)
            .product();
        if p["kind"] != "weight" {
            buffers += n;
            continue;
        }
        total += n;
        let name = p["name"].as_str().ok_or("name")?;
        if let Some(rest) = name.strip_prefix("domain/") {
            let id = rest.split('/').next().unwrap_or_default();
            *per_domain.entry(id.to_string()).or_default() += n;
        }
    }
    Ok((total, buffers, per_domain))
}

/// Raw little-endian bytes of every parameter in a checkpoint, by name.
fn checkpoint_bytes(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let meta = read_json(&dir.join("meta.json"))?;
    let blob = fs::read(dir.join("params.bin")).ctx("params.bin")?;
    let mut out = BTreeMap::new();
    for p in meta["params"].as_array().ok_or("no params listing")? {
        let n: usize = p["shape"].as_array().ok_or("shape")?.iter().map(|d| d.as_u64().unwrap_or(0) as usize).product();
        let off = p["offset"].as_u64().ok_or("offset")? as usize;
        out.insert(p["name"].as_str().ok_or("name")?.to_string(), blob[off..off + 4 * n].to_vec());
    }
    Ok(out)
}

fn c1_budget() -> Check {
    let model = Model::<f32>::build(ModelConfig::default(), &[DomainSpec::new("d", classes(4))], 0).ctx("build")?;
    let dir = tempfile::tempdir().ctx("tempdir")?;
    save_checkpoint(&model, dir.path(), None, Value::Null).ctx("save")?;
    let (total, _, per_domain) = walk_manifest(dir.path())?;
    let domain = per_domain["d"];
    let counts = model.param_counts();
    ensure!(counts.total == total, "model reports {} weights, listing has {total}", counts.total);
    ensure!(counts.per_domain == domain, "model reports {} per domain, listing has {domain}", counts.per_domain);
    ensure!((2_600_000..=3_400_000).contains(&total), "total {total} outside [2.6M, 3.4M]");
    ensure!((270_000..=330_000).contains(&domain), "per-domain {domain} outside [270k, 330k]");
    Ok(format!("total {total}, per-domain {domain}"))
}

fn c2_multi_domain_ratio() -> Check {
    let specs: Vec<DomainSpec> = (0..26).map(|i| DomainSpec::new(format!("d{i:02}"), classes(4))).collect();
    let one = Model::<f32>::build(ModelConfig::default(), &specs[..1], 0).ctx("build")?;
    let many = Model::<f32>::build(ModelConfig::default(), &specs, 0).ctx("build")?;
    let dir = tempfile::tempdir().ctx("tempdir")?;
    save_checkpoint(&many, dir.path(), None, Value::Null).ctx("save")?;
    let (total, _, per_domain) = walk_manifest(dir.path())?;
    ensure!(per_domain.len() == 26, "{} domains in the listing", per_domain.len());
    ensure!(total == many.param_counts().total, "listing and model disagree");
    let ratio = total as f64 / one.param_counts().total as f64;
    ensure!((3.0..=4.0).contains(&ratio), "ratio {ratio:.3} outside [3, 4]");
    Ok(format!("26 domains {total} / 1 domain {} = {ratio:.3}", one.param_counts().total))
}

fn c3_shapes() -> Check {
    let mut model = Model::<f32>::build(ModelConfig::default(), &[DomainSpec::new("d", classes(4))], 1).ctx("build")?;
    for t in [1usize, 7, 8, 311, 400] {
        let b = 2;
        let x = Tensor::from_vec(&[b, 64, t, 1], noise(b * 64 * t, t as u64)).ctx("input")?;
        let valid = [t, t.div_ceil(2)];
        let (logits, trace) = model.forward("d", &x, &valid, Mode::Eval, None).ctx("forward")?;
        let want = [b, 8, t.div_ceil(8), 256];
        ensure!(trace.features().shape() == want, "T={t}: backbone {:?}, want {want:?}", trace.features().shape());
        ensure!(logits.shape() == [b, 4], "T={t}: logits {:?}", logits.shape());
    }
    Ok("T in {1, 7, 8, 311, 400} -> [B, 8, ceil(T/8), 256]".into())
}

fn c4_grad_check() -> Check {
    let out = serval(&["grad-check", "--full"])?;
    let stdout = String::from_utf8_lossy(&out.stdout);
    let mut worst = 0.0f64;
    let mut lines = 0;
    let mut model_lines = 0;
    for line in stdout.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")) {
        lines += 1;
        model_lines += usize::from(line.contains("model ("));
        let err: f64 = line
            .split("max rel err")
            .nth(1)
            .and_then(|s| s.split_whitespace().next())
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("unparsed line: {line}"))?;
        ensure!(line.starts_with("PASS") && err < 1e-5, "{line}");
        worst = worst.max(err);
    }
    ensure!(out.status.success(), "exit code {:?}", out.status.code());
    ensure!(lines >= 8 && model_lines == 2, "{lines} checks, {model_lines} full-model checks");
    Ok(format!("{lines} checks, worst relative error {worst:.2e}"))
}

fn c5_attention() -> Check {
    let (b, h, w, c, d) = (2usize, 3usize, 5usize, 4usize, 6usize);
    let t = |shape: &[usize], seed| {
        Tensor::from_vec(shape, noise(shape.iter().product(), seed).into_iter().map(f64::from).collect()).unwrap()
    };
    let x = t(&[b, h, w, c], 1);
    let (wm, bv, u) = (t(&[c, d], 2), t(&[d], 3), t(&[d], 4));
    let valid = [w, 2];
    let n_valid = |item: usize| h * valid[item];
    let zero = AttentionParams { w: &wm, b: &bv, u: &u, lambda: 0.0 };
    let (_, cache) = attention_pool(&x, &zero, &valid).ctx("attention")?;
    for item in 0..b {
        for pos in 0..h * w {
            let a = cache.weights[item * h * w + pos];
            let want = if pos % w < valid[item] { 1.0 / n_valid(item) as f64 } else { 0.0 };
            ensure!((a - want).abs() < 1e-12, "lambda=0 item {item} pos {pos}: {a} vs {want}");
        }
    }
    let sharp = AttentionParams { w: &wm, b: &bv, u: &u, lambda: 0.3 };
    let (_, cache) = attention_pool(&x, &sharp, &valid).ctx("attention")?;
    for item in 0..b {
        let ws = &cache.weights[item * h * w..(item + 1) * h * w];
        let sum: f64 = ws.iter().sum();
        ensure!((sum - 1.0).abs() <= 1e-6, "item {item}: weights sum to {sum}");
        for (pos, &a) in ws.iter().enumerate() {
            if pos % w >= valid[item] {
                ensure!(a == 0.0, "item {item}: padded position {pos} has weight {a}");
            }
        }
    }
    Ok("uniform at lambda=0, unit sum, zero on padding".into())
}

fn c6_adapters(fx: &Fixture) -> Check {
    let spec = DomainSpec::new("d", classes(4));
    let mut model = Model::<f32>::build(fx.model_config()?, &[spec], 3).ctx("build")?;
    let x = Tensor::from_vec(&[3, 64, 40, 1], noise(3 * 64 * 40, 9)).ctx("input")?;
    let valid = [40, 31, 17];
    let (with, _) = model.forward("d", &x, &valid, Mode::Eval, None).ctx("forward")?;
    let mut plain = model.clone();
    plain.strip_adapters("d").ctx("strip")?;
    let (without, _) = plain.forward("d", &x, &valid, Mode::Eval, None).ctx("forward")?;
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure!(bits(&with) == bits(&without), "fresh adapters changed the logits");

    let manifests: Vec<_> = ["synth_a", "synth_b", "synth_d"]
        .iter()
        .map(|c| load_manifest(&fx.data.join(format!("{c}.csv"))))
        .collect::<Result<_, _>>()
        .ctx("manifest")?;
    let domains: Vec<_> = manifests.iter().map(load_categorical).collect::<Result<_, _>>().ctx("load")?;
    let mut model = Model::<f32>::build(
        fx.model_config()?,
        &[domains[0].spec.clone(), domains[1].spec.clone()],
        7,
    )
    .ctx("build")?;
    let before = snapshot(&model);
    let cfg = ScheduleConfig {
        batch_size: 16,
        max_epochs: Some(3),
        record_wall_clock: false,
        ..ScheduleConfig::default()
    };
    let (_, outcome) = transfer(&mut model, &domains[2], Regime::Adapters, false, &cfg, 7, None).ctx("transfer")?;
    let after = snapshot(&model);
    let mut changed_own = 0;
    for (name, bytes) in &after {
        match before.get(name) {
            Some(old) => ensure!(old == bytes, "{name} changed under adapters-only training"),
            None => {
                ensure!(name.starts_with("domain/synth_d/"), "unexpected new parameter {name}");
                changed_own += 1;
            }
        }
    }
    ensure!(changed_own > 0, "target domain owns no parameters");
    let adapter_moved = model
        .store
        .ids()
        .filter(|&id| model.store.name(id).starts_with("domain/synth_d/") && model.store.name(id).contains("adapter"))
        .any(|id| model.store.value(id).data().iter().any(|&v| v != 0.0));
    ensure!(adapter_moved, "target adapters never moved");
    Ok(format!(
        "logits bit-identical; {} shared/foreign tensors untouched after {} epochs",
        before.len(),
        outcome.epochs
    ))
}

fn snapshot(model: &Model<f32>) -> BTreeMap<String, Vec<u32>> {
    model
        .store
        .ids()
        .map(|id| {
            let v = model.store.value(id).data().iter().map(|x| x.to_bits()).collect();
            (model.store.name(id).to_string(), v)
        })
        .collect()
}

/// Patience bookkeeping restated: a stage ends once `patience` epochs have
/// passed since the last improvement or the last stage change.
fn patience_oracle(uars: &[f64], patience: usize, stages: usize) -> Vec<EpochOutcome> {
    let mut best = f64::NEG_INFINITY;
    let mut anchor = 0usize;
    let mut stage = 0usize;
    let mut out = Vec::new();
    for (i, &u) in uars.iter().enumerate() {
        let epoch = i + 1;
        if u > best {
            best = u;
            anchor = epoch;
            out.push(EpochOutcome::Improved);
        } else if epoch - anchor < patience {
            out.push(EpochOutcome::Stale);
        } else if stage + 1 < stages {
            stage += 1;
            anchor = epoch;
            out.push(EpochOutcome::NextStage);
        } else {
            out.push(EpochOutcome::Stop);
            break;
        }
    }
    out
}

fn drive(uars: &[f64], patience: usize, stages: usize) -> Vec<EpochOutcome> {
    let mut s = EarlyStopState::new(stages, patience);
    let mut out = Vec::new();
    for (i, &u) in uars.iter().enumerate() {
        let o = s.observe(i + 1, u);
        out.push(o);
        if o == EpochOutcome::Stop {
            break;
        }
    }
    out
}

fn c7_schedule() -> Check {
    let flat = vec![0.5; 400];
    let trace = drive(&flat, 50, 3);
    let events: Vec<(usize, EpochOutcome)> = trace
        .iter()
        .enumerate()
        .filter(|(_, o)| matches!(o, EpochOutcome::NextStage | EpochOutcome::Stop))
        .map(|(i, &o)| (i + 1, o))
        .collect();
    let want = vec![(51, EpochOutcome::NextStage), (101, EpochOutcome::NextStage), (151, EpochOutcome::Stop)];
    ensure!(events == want, "flat devel curve gives {events:?}");
    ensure!(trace == patience_oracle(&flat, 50, 3), "flat trace differs from the oracle");

    for seed in 0..200u64 {
        let patience = 1 + (seed % 7) as usize;
        let stages = 1 + (seed % 3) as usize;
        let uars: Vec<f64> = noise(300, seed).iter().map(|v| ((v + 1.0) * 4.0).round() as f64 / 8.0).collect();
        ensure!(
            drive(&uars, patience, stages) == patience_oracle(&uars, patience, stages),
            "trace differs from the oracle for seed {seed}"
        );
    }

    let ladder = default_ladder(Regime::MultiDomain);
    ensure!(ladder == [0.1, 0.01, 0.001], "multi-domain ladder {ladder:?}");
    let plan = RoundRobinPlan {
        domains: vec!["a".into(), "b".into(), "c".into()],
        stage_lrs: ladder,
        rounds_per_stage: 2500,
    };
    let mut steps = plan.steps();
    let literal = [0.1, 0.01, 0.001];
    let mut count = 0u64;
    for stage in 0..3usize {
        for r in 0..2500u64 {
            let round = stage as u64 * 2500 + r;
            for domain in 0..3usize {
                let s = steps.next().ok_or_else(|| format!("plan ended early at round {round}"))?;
                ensure!(
                    s.round == round && s.domain == domain && s.stage == stage && s.stage_lr == literal[stage],
                    "step {count}: {s:?}"
                );
                let lr = effective_lr(s.stage_lr, s.round);
                let want = literal[stage] / (1.0 + 1e-6 * round as f64);
                ensure!(lr == want, "round {round}: lr {lr} vs {want}");
                count += 1;
            }
        }
    }
    ensure!(steps.next().is_none(), "plan runs past 3 x 2500 rounds");
    ensure!(plan.stage_of(2499) == 0 && plan.stage_of(2500) == 1 && plan.stage_of(5000) == 2, "stage boundaries");
    Ok(format!("patience 51/101/151, {count} round-robin steps over 3 x 2500 rounds"))
}

struct Fixture {
    root: tempfile::TempDir,
    data: PathBuf,
    base: Value,
}

impl Fixture {
    fn new() -> Result<Self, String> {
        let root = tempfile::tempdir().ctx("tempdir")?;
        let data = root.path().join("data");
        serval_ok(&["synth", "--out", data.to_str().ok_or("path")?])?;
        let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/fixture.json");
        let base = read_json(&src)?;
        Ok(Fixture { root, data, base })
    }

    fn model_config(&self) -> Result<ModelConfig, String> {
        serde_json::from_value(self.base["model"].clone()).ctx("fixture model")
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.path().join(rel)
    }

    /// Writes a config derived from the fixture and returns its path.
    fn config(&self, name: &str, regime: &str, corpora: &[&str], out: &str) -> Result<String, String> {
        let mut cfg = self.base.clone();
        cfg["regime"] = regime.into();
        cfg["manifests"] = corpora.iter().map(|c| Value::from(format!("data/{c}.csv"))).collect();
        cfg["output_dir"] = out.into();
        let path = self.path(name);
        fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).ctx("config")?;
        Ok(path.to_string_lossy().into_owned())
    }
}

fn c8_end_to_end(fx: &Fixture) -> Check {
    let scratch = fx.config("scratch_d.json", "scratch", &["synth_d"], "runs/scratch_d")?;
    serval_ok(&["train", "--config", &scratch])?;
    let s = read_json(&fx.path("runs/scratch_d/summary.json"))?;
    let scratch_uar = s["best_devel_uar"].as_f64().ok_or("scratch summary")?;
    let best_epoch = s["best_epoch"].as_u64().ok_or("scratch summary")?;
    ensure!(scratch_uar >= 0.9 && best_epoch <= 30, "scratch devel UAR {scratch_uar} at epoch {best_epoch}");

    let multi = fx.config("multi.json", "multi_domain", &["synth_a", "synth_b", "synth_c"], "runs/multi")?;
    serval_ok(&["train-multi", "--config", &multi])?;
    let target = fx.config("target.json", "adapters", &["synth_d"], "runs/adapters")?;
    let shared = fx.path("runs/multi/shared");
    serval_ok(&["transfer", "--from", shared.to_str().unwrap(), "--regime", "adapters", "--config", &target])?;
    let t = read_json(&fx.path("runs/adapters/summary.json"))?;
    let transfer_uar = t["best_devel_uar"].as_f64().ok_or("transfer summary")?;
    ensure!(
        transfer_uar >= scratch_uar - 0.05,
        "adapter transfer devel UAR {transfer_uar} < scratch {scratch_uar} - 0.05"
    );

    let before = checkpoint_bytes(&shared)?;
    let after = checkpoint_bytes(&fx.path("runs/adapters/final"))?;
    for (name, bytes) in &before {
        ensure!(after.get(name) == Some(bytes), "{name} differs after adapter transfer");
    }

    let base_pred = fx.path("runs/scratch_d/predictions/best/synth_d.csv");
    let cand_pred = fx.path("runs/adapters/predictions/best/synth_d.csv");
    let report: Value = serde_json::from_str(&serval_ok(&[
        "compare",
        "--baseline",
        base_pred.to_str().unwrap(),
        "--candidate",
        cand_pred.to_str().unwrap(),
        "--json",
    ])?)
    .ctx("compare output")?;
    let cell = &report["rows"][0]["candidates"][0];
    let mark = cell["mark"].as_str().ok_or("no mark in the comparison")?;
    ensure!(["+", "-", ""].contains(&mark), "mark {mark:?}");
    ensure!(cell["mcnemar"]["p_value"].is_number(), "no McNemar result");
    let shown = if mark.is_empty() { "none" } else { mark };
    Ok(format!(
        "scratch {scratch_uar:.3} (epoch {best_epoch}), multi-domain + adapters {transfer_uar:.3}, mark {shown}"
    ))
}

fn c9_metrics() -> Check {
    let refs = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
    let preds = [0, 0, 0, 0, 0, 0, 0, 1, 1, 1];
    let cm = ConfusionMatrix::from_indices(classes(2), &refs, &preds).ctx("confusion")?;
    let u = uar(&cm).ctx("uar")?;
    ensure!((u - 0.8).abs() < 1e-12, "UAR {u}");

    let r = mcnemar_counts(15, 5, McNemarMethod::default());
    ensure!((r.statistic - 4.05).abs() < 1e-12, "statistic {}", r.statistic);
    ensure!(r.significant_at_05, "b=15, c=5 not significant (p {})", r.p_value);
    let chi = mcnemar_counts(15, 5, McNemarMethod::Corrected);
    ensure!(chi.significant_at_05 && chi.statistic > 3.841, "corrected test: {chi:?}");
    // 15 items only the baseline gets right, 5 only the candidate
    let reference = vec![0usize; 20];
    let baseline: Vec<usize> = (0..20).map(|i| usize::from(i >= 15)).collect();
    let candidate: Vec<usize> = (0..20).map(|i| usize::from(i < 15)).collect();
    let from_vectors = mcnemar(&baseline, &candidate, &reference).ctx("mcnemar")?;
    ensure!(from_vectors.b == 15 && from_vectors.c == 5, "counts {from_vectors:?}");

    let chance = chance_level(7);
    ensure!((chance * 1000.0).round() / 1000.0 == 0.143, "chance(7) = {chance}");
    Ok(format!("UAR 0.8, McNemar 4.05 (p {:.4}), chance(7) {chance:.3}", r.p_value))
}

fn sine(freq: f64, len: usize) -> Waveform {
    Waveform::new(
        (0..len)
            .map(|n| (0.5 * (2.0 * std::f64::consts::PI * freq * n as f64 / 16_000.0).sin()) as f32)
            .collect(),
    )
}

fn c10_dsp() -> Check {
    for len in 512..=4096usize {
        let enumerated = (0..).step_by(HOP).take_while(|&s| s + N_FFT <= len).count();
        ensure!(frame_count(len) == enumerated, "length {len}: {} vs {enumerated}", frame_count(len));
    }
    let tone = sine(1000.0, 4096);
    let p = stft_power(&tone);
    for t in 0..p.frames {
        let f = p.frame(t);
        let peak = (0..N_BINS).max_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap();
        ensure!(peak == 32, "frame {t}: FFT peak at bin {peak}");
    }
    let centers = mel_centers_hz();
    let nearest = (0..N_MELS)
        .min_by(|&a, &b| (centers[a] - 1000.0).abs().total_cmp(&(centers[b] - 1000.0).abs()))
        .unwrap();
    let m = log_mel(&tone);
    for t in 0..m.frames {
        let f = m.frame(t);
        let peak = (0..N_MELS).max_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap();
        ensure!(peak == nearest, "frame {t}: mel peak {peak}, nearest center {nearest}");
    }
    let w = Waveform::new(noise(4096, 17));
    let p = stft_power(&w);
    let window = hann_window();
    let mut worst = 0.0f64;
    for t in 0..p.frames {
        let energy: f64 = (0..N_FFT).map(|n| (w.samples[t * HOP + n] as f64 * window[n]).powi(2)).sum();
        let f = p.frame(t);
        let spectral = (f[0] + f[N_BINS - 1] + 2.0 * f[1..N_BINS - 1].iter().sum::<f64>()) / N_FFT as f64;
        worst = worst.max(((spectral - energy) / energy).abs());
    }
    ensure!(worst < 1e-6, "Parseval relative error {worst:e}");
    Ok(format!("frames 512..4096, tone at bin 32 / band {nearest}, Parseval {worst:.1e}"))
}

fn c11_determinism(fx: &Fixture) -> Check {
    let cfg = fx.config("fixture.json", "scratch", &["synth_a"], "runs/scratch")?;
    let out = fx.path("runs/scratch");
    let first = fx.path("runs/scratch_first");
    serval_ok(&["train", "--config", &cfg, "--seed", "7"])?;
    fs::rename(&out, &first).ctx("moving the first run")?;
    serval_ok(&["train", "--config", &cfg, "--seed", "7"])?;
    let mut compared = 0;
    for rel in ["best/meta.json", "best/params.bin", "final/meta.json", "final/params.bin", "history.jsonl"] {
        let a = fs::read(first.join(rel)).ctx(rel)?;
        let b = fs::read(out.join(rel)).ctx(rel)?;
        ensure!(a == b, "{rel} differs between runs");
        compared += a.len();
    }
    Ok(format!("checkpoints and history identical ({compared} bytes)"))
}

fn run(id: usize, name: &str, budget: Duration, check: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let elapsed = start.elapsed();
    let result = result.and_then(|detail| {
        if elapsed > budget {
            Err(format!("{detail}; took {elapsed:.1?}, budget {budget:?}"))
        } else {
            Ok(detail)
        }
    });
    let (tag, detail) = match &result {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} [{id:>2}] {name}: {detail} ({:.1}s)", elapsed.as_secs_f64());
    result.is_ok()
}

fn main() -> ExitCode {
    // libtest arguments such as --nocapture are accepted and ignored
    let secs = Duration::from_secs;
    let fixture = Fixture::new();
    let fx = |f: fn(&Fixture) -> Check| {
        let fixture = &fixture;
        move || match fixture {
            Ok(fx) => f(fx),
            Err(e) => Err(format!("fixture setup failed: {e}")),
        }
    };
    let results = [
        run(1, "parameter budget", secs(1), c1_budget),
        run(2, "multi-domain efficiency", secs(5), c2_multi_domain_ratio),
        run(3, "shape contract", secs(10), c3_shapes),
        run(4, "gradient verification", secs(300), c4_grad_check),
        run(5, "attention properties", secs(1), c5_attention),
        run(6, "zero-adapter equivalence and freeze isolation", secs(120), fx(c6_adapters)),
        run(7, "schedule automaton", secs(10), c7_schedule),
        run(8, "end-to-end learning on the fixture", secs(1800), fx(c8_end_to_end)),
        run(9, "metric and statistics oracles", secs(1), c9_metrics),
        run(10, "dsp oracles", secs(30), c10_dsp),
        run(11, "determinism", secs(600), fx(c11_determinism)),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
