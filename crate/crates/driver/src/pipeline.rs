use std::collections::BTreeSet;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use gdpo_core::corpus::{gen_pairs, gen_prompts, load_pairs, save_pairs, PreferencePair, Task, TokenId, Vocab};
use gdpo_core::evalmetrics::{evaluate, EvalReport, PromptSamples, SampleSet};
use gdpo_core::numerics::{adam_step, fd_check, AdamConfig, FdReport, OptimState, Schedule};
use gdpo_core::objectives::{batch_loss, prepare_pairs, LossConfig, Method, PolicyObjective, PreparedPair};
use gdpo_core::oracle::{oracle_report, MdpSpec, OracleError, OracleReport};
use gdpo_core::policy::{sample_with, NeuralDims, NeuralPolicy, Policy, PolicyShape, SamplingConfig};
use gdpo_core::rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{load_task, RunConfig};
use crate::error::{DriverError, Result};

pub const TV_LIMIT: f64 = 1e-3;
pub const GRADCHECK_LIMIT: f64 = 1e-4;

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(DriverError::io(dir))?;
    }
    std::fs::write(path, bytes).map_err(DriverError::io(path))
}

fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

// ---------------------------------------------------------------- data

pub fn write_prompts(path: &Path, vocab: &Vocab, prompts: &[Vec<TokenId>]) -> Result<()> {
    let mut text = String::new();
    for p in prompts {
        text.push_str(&vocab.decode(p)?);
        text.push('\n');
    }
    write_file(path, text)
}

pub fn read_prompts(path: &Path, vocab: &Vocab) -> Result<Vec<Vec<TokenId>>> {
    let f = std::fs::File::open(path).map_err(DriverError::io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(DriverError::io(path))?;
        if line.is_empty() {
            continue;
        }
        let p = vocab
            .encode(&line)
            .map_err(|e| DriverError::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(p);
    }
    if out.is_empty() {
        return Err(DriverError::format(path, "no prompts"));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct GenDataArgs {
    pub task: PathBuf,
    pub n_pairs: usize,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub prompts_out: Option<PathBuf>,
    pub n_prompts: usize,
}

pub fn run_gen_data(args: &GenDataArgs) -> Result<usize> {
    let task = load_task(&args.task)?;
    let seed = args.seed.unwrap_or(task.spec().seed);
    let pairs = gen_pairs(&task, args.n_pairs, seed)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(DriverError::io(dir))?;
    }
    save_pairs(&args.out, task.vocab(), &pairs)?;
    if let Some(p) = &args.prompts_out {
        write_prompts(p, task.vocab(), &gen_prompts(&task, args.n_prompts, seed))?;
    }
    Ok(pairs.len())
}

// ---------------------------------------------------------------- training

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub method: Method,
    pub steps: usize,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    pub heldout_margin_start: f64,
    pub heldout_margin_end: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
    pub metrics: TrainMetrics,
}

/// Splits off the last `fraction` of pairs (at least one) as held-out data.
pub fn split_heldout(pairs: &[PreferencePair], fraction: f64) -> (&[PreferencePair], &[PreferencePair]) {
    let n_held = ((pairs.len() as f64 * fraction).round() as usize).clamp(1, pairs.len().saturating_sub(1).max(1));
    pairs.split_at(pairs.len() - n_held)
}

/// Mean `log pi(y+) - log pi(y-)` over `pairs`, responses ending in EOS.
pub fn mean_margin<P: Policy<f64>>(policy: &P, pairs: &[PreparedPair<f64>]) -> Result<f64> {
    Ok(batch_loss(policy, pairs, &LossConfig::with_method(Method::Sft), None)?.margin)
}

pub fn policy_shape(task: &Task) -> PolicyShape {
    PolicyShape::for_vocab(task.vocab(), task.max_response_len())
}

/// Trains `cfg.method` on `pairs`. Alignment methods start from `sft` and
/// use it as the frozen reference.
pub fn train(cfg: &RunConfig, task: &Task, pairs: &[PreferencePair], sft: Option<&Checkpoint>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let shape = policy_shape(task);
    let eos = shape.eos_id;
    let (train_pairs, heldout_pairs) = split_heldout(pairs, cfg.heldout_fraction);
    if train_pairs.is_empty() {
        return Err(DriverError::Config("not enough pairs to train".into()));
    }

    let (mut policy, reference) = match cfg.method {
        Method::Sft => (NeuralPolicy::<f64>::new(shape, cfg.model, cfg.seed), None),
        m => {
            let sft = sft.ok_or_else(|| DriverError::Config(format!("{m} needs an SFT checkpoint")))?;
            let p = sft.policy()?;
            if p.shape() != shape {
                return Err(DriverError::Config(
                    "SFT checkpoint does not match the task vocabulary".into(),
                ));
            }
            (p.clone(), Some(p))
        }
    };
    let loss_cfg = cfg.loss_config();
    let train_set = prepare_pairs(train_pairs, eos, reference.as_ref(), &cfg.reward)?;
    let heldout_set = prepare_pairs::<f64, NeuralPolicy<f64>>(heldout_pairs, eos, None, &cfg.reward)?;

    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs();
    let schedule = Schedule::new(cfg.lr(), total_steps, cfg.warmup_ratio)?;
    let adam = AdamConfig::default();
    let mut optim = OptimState::new(policy.num_params());
    let mut shuffle = rng::stream(cfg.seed, "train-shuffle", 0);

    let heldout_margin_start = mean_margin(&policy, &heldout_set)?;
    let mut log = Vec::with_capacity(total_steps);
    let mut grad = vec![0.0; policy.num_params()];
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs() {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PreparedPair<f64>> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            grad.iter_mut().for_each(|g| *g = 0.0);
            let stats = batch_loss(&policy, &batch, &loss_cfg, Some(&mut grad))?;
            if !stats.loss.is_finite() {
                return Err(DriverError::Diverged { what: "loss", step });
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(DriverError::Diverged { what: "gradient", step });
            }
            let lr = schedule.lr_at(step)?;
            adam_step(policy.params_mut(), &grad, &mut optim, lr, &adam)?;
            log.push(StepLog {
                step,
                lr,
                loss: stats.loss,
                margin: stats.margin,
            });
            step += 1;
        }
    }
    let heldout_margin_end = mean_margin(&policy, &heldout_set)?;
    let metrics = TrainMetrics {
        method: cfg.method,
        steps: step,
        train_pairs: train_set.len(),
        heldout_pairs: heldout_set.len(),
        heldout_margin_start,
        heldout_margin_end,
        final_loss: log.last().map(|l| l.loss).unwrap_or(f64::NAN),
    };
    let checkpoint = Checkpoint::new(&policy, task.vocab().alphabet(), &optim, shuffle, cfg.clone());
    Ok(TrainOutcome {
        checkpoint,
        log,
        metrics,
    })
}

pub fn train_log_csv(log: &[StepLog]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "lr", "loss", "margin"]).expect("in-memory csv");
    for l in log {
        w.write_record([
            l.step.to_string(),
            l.lr.to_string(),
            l.loss.to_string(),
            l.margin.to_string(),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
}

#[derive(Debug, Clone)]
pub struct TrainPaths {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub metrics: PathBuf,
}

impl TrainPaths {
    pub fn for_config(cfg: &RunConfig) -> Self {
        let stem = cfg.method.name();
        Self {
            checkpoint: cfg.checkpoint_path(cfg.method),
            log: cfg.out_dir.join(format!("{stem}.train.csv")),
            metrics: cfg.out_dir.join(format!("{stem}.metrics.json")),
        }
    }
}

/// Loads data (and the SFT checkpoint when needed), trains and writes the
/// checkpoint, step log and metrics.
pub fn run_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let task = load_task(&cfg.task)?;
    let pairs = load_pairs(&cfg.data, task.vocab(), task.max_response_len())?;
    let sft = match cfg.method {
        Method::Sft => None,
        _ => {
            let path = cfg.sft_path();
            if !path.exists() {
                return Err(DriverError::Config(format!(
                    "{} needs an SFT checkpoint; {} does not exist",
                    cfg.method,
                    path.display()
                )));
            }
            Some(Checkpoint::load(&path)?)
        }
    };
    let outcome = train(cfg, &task, &pairs, sft.as_ref())?;
    let paths = TrainPaths::for_config(cfg);
    write_file(&paths.checkpoint, outcome.checkpoint.to_json())?;
    write_file(&paths.log, train_log_csv(&outcome.log))?;
    write_file(&paths.metrics, to_json_pretty(&outcome.metrics))?;
    Ok(outcome)
}

// ---------------------------------------------------------------- sampling

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub temperature: f64,
    pub top_p: f64,
    pub n: usize,
    pub seed: u64,
}

/// `n` responses per prompt; prompt `i` draws from its own stream derived
/// from `(seed, "sample", i)`.
pub fn sample_prompts<P: Policy<f64>>(
    policy: &P,
    vocab: &Vocab,
    prompts: &[Vec<TokenId>],
    opts: &SampleOptions,
) -> Result<SampleSet> {
    let shape = policy.shape();
    let cfg = SamplingConfig {
        temperature: opts.temperature,
        top_p: opts.top_p,
        max_len: shape.max_response_len,
        seed: opts.seed,
    };
    cfg.validate()?;
    let mut entries = Vec::with_capacity(prompts.len());
    for (i, prompt) in prompts.iter().enumerate() {
        let mut stream = rng::stream(opts.seed, "sample", i as u64);
        let mut samples = Vec::with_capacity(opts.n);
        for _ in 0..opts.n {
            let mut y = sample_with(policy, prompt, &cfg, &mut stream)?;
            y.pop();
            samples.push(vocab.decode(&y)?);
        }
        entries.push(PromptSamples {
            prompt: vocab.decode(prompt)?,
            samples,
        });
    }
    Ok(SampleSet::new(entries))
}

/// Provenance written next to a samples file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub method: Method,
    pub checkpoint: PathBuf,
    pub options: SampleOptions,
}

pub fn meta_path(samples: &Path) -> PathBuf {
    let mut s = samples.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn checkpoint_vocab(ckpt: &Checkpoint) -> Result<Vocab> {
    let symbols = ckpt
        .policy
        .symbols
        .as_deref()
        .ok_or_else(|| DriverError::Config("checkpoint has no symbol table".into()))?;
    Ok(Vocab::new(symbols)?)
}

pub fn run_sample(checkpoint: &Path, prompts: &Path, opts: &SampleOptions, out: &Path) -> Result<SampleSet> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let vocab = checkpoint_vocab(&ckpt)?;
    let policy = ckpt.policy()?;
    let prompts = read_prompts(prompts, &vocab)?;
    let set = sample_prompts(&policy, &vocab, &prompts, opts)?;
    let mut buf = Vec::new();
    set.write_jsonl(&mut buf)?;
    write_file(out, buf)?;
    let meta = SampleMeta {
        method: ckpt.config.method,
        checkpoint: checkpoint.to_path_buf(),
        options: *opts,
    };
    write_file(&meta_path(out), to_json_pretty(&meta))?;
    Ok(set)
}

// ---------------------------------------------------------------- evaluation

pub const EVAL_COLUMNS: [&str; 8] = [
    "method",
    "temperature",
    "diversity",
    "win_rate",
    "win_se",
    "coverage",
    "mean_tokens",
    "tokens_se",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub temperature: f64,
    pub report: EvalReport,
}

impl EvalRow {
    pub fn fields(&self) -> [String; 8] {
        let r = &self.report;
        [
            self.method.clone(),
            self.temperature.to_string(),
            r.diversity.to_string(),
            r.win_rate.mean.to_string(),
            r.win_rate.se.to_string(),
            r.mode_coverage.map(|c| c.to_string()).unwrap_or_default(),
            r.mean_tokens.mean.to_string(),
            r.mean_tokens.se.to_string(),
        ]
    }
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(EVAL_COLUMNS).expect("in-memory csv");
    for r in rows {
        w.write_record(r.fields()).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDocument {
    pub samples: PathBuf,
    pub reference: PathBuf,
    pub task: PathBuf,
    pub method: String,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<SampleOptions>,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub samples: PathBuf,
    pub reference: PathBuf,
    pub task: PathBuf,
    pub method: Option<String>,
    pub temperature: Option<f64>,
    pub out_json: Option<PathBuf>,
    pub out_csv: Option<PathBuf>,
}

pub fn run_eval(args: &EvalArgs) -> Result<EvalDocument> {
    let task = load_task(&args.task)?;
    let samples = SampleSet::load(&args.samples)?;
    let reference = SampleSet::load(&args.reference)?;
    let meta: Option<SampleMeta> = match std::fs::read_to_string(meta_path(&args.samples)) {
        Ok(text) => Some(serde_json::from_str(&text).map_err(|e| DriverError::format(meta_path(&args.samples), e))?),
        Err(_) => None,
    };
    let method = args
        .method
        .clone()
        .or_else(|| meta.as_ref().map(|m| m.method.name().to_string()))
        .unwrap_or_else(|| "unknown".into());
    let temperature = args
        .temperature
        .or_else(|| meta.as_ref().map(|m| m.options.temperature))
        .ok_or_else(|| DriverError::Config("temperature unknown: pass --temperature or keep the .meta.json".into()))?;
    let report = evaluate(&samples, &reference, &task)?;
    let doc = EvalDocument {
        samples: args.samples.clone(),
        reference: args.reference.clone(),
        task: args.task.clone(),
        method: method.clone(),
        temperature,
        sampling: meta.map(|m| m.options),
        report: report.clone(),
    };
    if let Some(p) = &args.out_json {
        write_file(p, to_json_pretty(&doc))?;
    }
    if let Some(p) = &args.out_csv {
        write_file(
            p,
            eval_csv(&[EvalRow {
                method,
                temperature,
                report,
            }]),
        )?;
    }
    Ok(doc)
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Clone)]
pub struct SweepArgs {
    pub prompts: PathBuf,
    pub temperatures: Vec<f64>,
    pub methods: Vec<Method>,
    pub out_csv: PathBuf,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<EvalRow>,
    pub skipped: Vec<Method>,
}

/// Samples each trained method and the SFT reference at every temperature
/// with the same seeds, and evaluates the pair.
pub fn sweep(
    cfg: &RunConfig,
    task: &Task,
    prompts: &[Vec<TokenId>],
    temperatures: &[f64],
    methods: &[Method],
    samples_dir: Option<&Path>,
) -> Result<SweepOutcome> {
    let reference_ckpt = Checkpoint::load(&cfg.sft_path())?;
    let reference = reference_ckpt.policy()?;
    let mut temps = temperatures.to_vec();
    temps.sort_by(f64::total_cmp);
    temps.dedup();
    let options = |t: f64| SampleOptions {
        temperature: t,
        top_p: cfg.sampling.top_p,
        n: cfg.sampling.n,
        seed: cfg.seed,
    };
    let save = |name: &str, t: f64, set: &SampleSet| -> Result<()> {
        if let Some(dir) = samples_dir {
            let mut buf = Vec::new();
            set.write_jsonl(&mut buf)?;
            write_file(&dir.join(format!("{name}_t{t}.jsonl")), buf)?;
        }
        Ok(())
    };
    let mut references = Vec::with_capacity(temps.len());
    for &t in &temps {
        let set = sample_prompts(&reference, task.vocab(), prompts, &options(t))?;
        save(Method::Sft.name(), t, &set)?;
        references.push(set);
    }
    let methods: BTreeSet<&str> = methods.iter().map(|m| m.name()).collect();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for name in methods {
        let method: Method = name.parse()?;
        let path = cfg.checkpoint_path(method);
        if !path.exists() {
            eprintln!("warning: no checkpoint for {name} at {}; skipping", path.display());
            skipped.push(method);
            continue;
        }
        let policy = Checkpoint::load(&path)?.policy()?;
        for (&t, theirs) in temps.iter().zip(&references) {
            let ours = sample_prompts(&policy, task.vocab(), prompts, &options(t))?;
            save(name, t, &ours)?;
            rows.push(EvalRow {
                method: name.to_string(),
                temperature: t,
                report: evaluate(&ours, theirs, task)?,
            });
        }
    }
    Ok(SweepOutcome { rows, skipped })
}

pub fn run_sweep(cfg: &RunConfig, args: &SweepArgs) -> Result<SweepOutcome> {
    let task = load_task(&cfg.task)?;
    let prompts = read_prompts(&args.prompts, task.vocab())?;
    let samples_dir = cfg.out_dir.join("samples");
    let out = sweep(
        cfg,
        &task,
        &prompts,
        &args.temperatures,
        &args.methods,
        Some(&samples_dir),
    )?;
    write_file(&args.out_csv, eval_csv(&out.rows))?;
    Ok(out)
}

// ---------------------------------------------------------------- oracle

pub fn load_mdp_spec(path: &Path) -> Result<MdpSpec> {
    let text = std::fs::read_to_string(path).map_err(DriverError::io(path))?;
    toml::from_str(&text).map_err(|e| DriverError::format(path, e))
}

/// Returns the report; the caller decides what to do when `tv >= TV_LIMIT`.
/// Running out of fitting steps is reported as a failed check.
pub fn run_oracle_check(spec: &Path, out: Option<&Path>) -> Result<OracleReport> {
    let spec = load_mdp_spec(spec)?;
    let report = oracle_report(&spec).map_err(|e| match e {
        OracleError::NotConverged { residual, steps } => {
            DriverError::Acceptance(format!("residual {residual:e} after {steps} steps"))
        }
        e => e.into(),
    })?;
    if let Some(p) = out {
        write_file(p, to_json_pretty(&report))?;
    }
    Ok(report)
}

// ---------------------------------------------------------------- gradcheck

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub method: Method,
    pub seed: u64,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Finite-difference check of one objective on a random batch: a freshly
/// initialized policy against a differently seeded reference.
pub fn gradcheck_once(
    task: &Task,
    dims: NeuralDims,
    loss: &LossConfig,
    batch: usize,
    seed: u64,
    h: f64,
) -> Result<FdReport> {
    let shape = policy_shape(task);
    let pairs = gen_pairs(task, batch, rng::derive_seed(seed, "gradcheck-data", 0))?;
    let policy = NeuralPolicy::<f64>::new(shape, dims, rng::derive_seed(seed, "gradcheck-policy", 0));
    let reference = NeuralPolicy::<f64>::new(shape, dims, rng::derive_seed(seed, "gradcheck-reference", 0));
    let prepared = prepare_pairs(&pairs, shape.eos_id, Some(&reference), &loss.reward)?;
    let objective = PolicyObjective {
        policy: &policy,
        batch: &prepared,
        cfg: loss,
    };
    Ok(fd_check(&objective, policy.params(), h, seed)?)
}

pub fn run_gradcheck(
    task: &Task,
    dims: NeuralDims,
    base: &LossConfig,
    methods: &[Method],
    seeds: &[u64],
    batch: usize,
    h: f64,
) -> Result<Vec<GradcheckRow>> {
    let mut rows = Vec::new();
    for &method in methods {
        let loss = LossConfig { method, ..*base };
        for &seed in seeds {
            let r = gradcheck_once(task, dims, &loss, batch, seed, h)?;
            rows.push(GradcheckRow {
                method,
                seed,
                max_rel_error: r.max_rel_error,
                worst_index: r.worst_index,
                checked: r.checked,
            });
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------- full run

#[derive(Debug, Clone)]
pub struct PipelineArgs {
    pub n_pairs: usize,
    pub n_prompts: usize,
    pub methods: Vec<Method>,
    pub temperatures: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub metrics: Vec<TrainMetrics>,
    pub sweep: SweepOutcome,
}

/// Data, SFT, every requested alignment method and a sweep, all under
/// `cfg.out_dir` and all seeded from `cfg.seed`.
pub fn run_pipeline(cfg: &RunConfig, args: &PipelineArgs) -> Result<PipelineOutcome> {
    let prompts = cfg.out_dir.join("prompts.txt");
    run_gen_data(&GenDataArgs {
        task: cfg.task.clone(),
        n_pairs: args.n_pairs,
        seed: Some(cfg.seed),
        out: cfg.data.clone(),
        prompts_out: Some(prompts.clone()),
        n_prompts: args.n_prompts,
    })?;
    let mut metrics = vec![run_train(&cfg.with_method(Method::Sft))?.metrics];
    for &m in &args.methods {
        if m != Method::Sft {
            metrics.push(run_train(&cfg.with_method(m))?.metrics);
        }
    }
    let sweep = run_sweep(
        cfg,
        &SweepArgs {
            prompts,
            temperatures: args.temperatures.clone(),
            methods: args.methods.clone(),
            out_csv: cfg.out_dir.join("sweep.csv"),
        },
    )?;
    Ok(PipelineOutcome { metrics, sweep })
}
