//! Subcommand bodies. Each writes its artifacts under the run directory and
//! returns a value that `main` maps to an exit code.

use std::fs;
use std::path::Path;

use isda::complexity::{measure_overhead, report_timing, TimingReport};
use isda::data::{generate_synthetic, parse_records, split_semi, Dataset, SyntheticConfig};
use isda::loss::surrogate_loss_at;
use isda::oracle::{explicit_loss, mc_expected_ce, RunningMoments};
use isda::train::{evaluate, EpochMetrics, Objective, Observer, TrainConfig, Trainer};
use isda::{IsdaError, LabeledBatch, Mat, Rng};
use serde_json::{json, Value};

use crate::artifacts::{num, CsvLog, RunDir};
use crate::config::{DataSource, RunConfig};
use crate::props;

/// Failure classes that map to distinct exit codes.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
    /// A checked property or bound did not hold; artifacts are still written.
    Violation(String),
}

impl From<IsdaError> for Failure {
    fn from(e: IsdaError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

pub type Outcome = Result<(), Failure>;

// ---- data -----------------------------------------------------------------

/// Stream keys separating the synthetic test draw from the training draw.
const TEST_SEED_OFFSET: u64 = 0x7E57;

pub struct Data {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

pub fn load_data(cfg: &RunConfig) -> Result<Data, Failure> {
    match &cfg.data.source {
        DataSource::Synthetic { num_classes, dim, separation, cov, seed, train_per_class, test_per_class } => {
            let synth = SyntheticConfig {
                num_classes: *num_classes,
                dim: *dim,
                separation: *separation,
                cov: cov.clone(),
                seed: *seed,
            };
            let (task, train) =
                generate_synthetic(synth, *train_per_class).map_err(|e| Failure::Config(e.to_string()))?;
            let test = (*test_per_class > 0).then(|| task.sample(*test_per_class, seed.wrapping_add(TEST_SEED_OFFSET)));
            Ok(Data { train, test })
        }
        DataSource::Records { train_path, test_path, num_classes, .. } => {
            let shape = cfg.data.source.image_shape().expect("records carry a shape");
            let read = |p: &Path| fs::read(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())));
            let raw = parse_records(&read(train_path)?, shape, *num_classes)?;
            // normalization statistics come from the training split only
            let norm = raw.channel_stats();
            let train = raw.to_dataset(*num_classes, Some(norm.clone()))?;
            let test = match test_path {
                Some(p) => Some(parse_records(&read(p)?, shape, *num_classes)?.to_dataset(*num_classes, Some(norm))?),
                None => None,
            };
            Ok(Data { train, test })
        }
    }
}

/// Labeled training set, unlabeled inputs and held-out validation set.
struct Parts {
    labeled: Dataset,
    unlabeled: Option<Mat>,
    validation: Option<Dataset>,
}

fn partition(cfg: &RunConfig, train: Dataset, semi: bool) -> Result<Parts, Failure> {
    let Some(n) = cfg.data.num_labeled else {
        if semi {
            return Err(Failure::Config("train-semi needs data.num_labeled".into()));
        }
        return Ok(Parts { labeled: train, unlabeled: None, validation: None });
    };
    let split = split_semi(&train, n, cfg.data.split_seed).map_err(|e| Failure::Config(e.to_string()))?;
    let (labeled, validation) = if cfg.data.remerge_validation {
        (split.remerge_validation(), None)
    } else {
        (split.labeled.clone(), Some(split.validation.clone()))
    };
    Ok(Parts { labeled, unlabeled: semi.then_some(split.unlabeled), validation })
}

// ---- training ---------------------------------------------------------------

/// Appends one metrics row per epoch and syncs it before the next epoch.
struct EpochLog {
    log: CsvLog,
}

impl Observer for EpochLog {
    fn on_epoch(&mut self, _trainer: &Trainer, m: &EpochMetrics) -> isda::Result<()> {
        let fields: Vec<String> = m.csv_row().split(',').map(String::from).collect();
        self.log.row(&fields)?;
        Ok(self.log.sync()?)
    }
}

struct Finished {
    trainer: Trainer,
    input_dim: usize,
    num_classes: usize,
    validation_error: Option<f64>,
}

fn fit(
    cfg: &RunConfig,
    train: &TrainConfig,
    dir: &RunDir,
    semi: bool,
    observer: Option<&mut dyn Observer>,
) -> Result<Finished, Failure> {
    let data = load_data(cfg)?;
    let parts = partition(cfg, data.train, semi)?;
    let (input_dim, num_classes) = (parts.labeled.input_dim(), parts.labeled.num_classes);
    let mut trainer = Trainer::from_spec(train.clone(), &cfg.model, input_dim, num_classes)
        .map_err(|e| Failure::Config(e.to_string()))?;
    let mut log = EpochLog { log: dir.csv("metrics.csv", EpochMetrics::CSV_HEADER)? };
    let mut both = Both { first: &mut log, second: observer };
    trainer.fit(&parts.labeled, parts.unlabeled.as_ref(), data.test.as_ref(), &mut both)?;
    dir.snapshot("tracker.snap", &trainer.state.tracker)?;
    let validation_error = match &parts.validation {
        Some(v) if !v.is_empty() => Some(evaluate(&trainer.state.model, &trainer.state.head, v)?),
        _ => None,
    };
    Ok(Finished { trainer, input_dim, num_classes, validation_error })
}

struct Both<'a, 'b> {
    first: &'a mut dyn Observer,
    second: Option<&'b mut dyn Observer>,
}

impl Observer for Both<'_, '_> {
    fn on_iteration(&mut self, t: &Trainer, iteration: u64, lambda: f64) -> isda::Result<()> {
        self.first.on_iteration(t, iteration, lambda)?;
        match self.second.as_deref_mut() {
            Some(o) => o.on_iteration(t, iteration, lambda),
            None => Ok(()),
        }
    }

    fn on_epoch(&mut self, t: &Trainer, m: &EpochMetrics) -> isda::Result<()> {
        self.first.on_epoch(t, m)?;
        match self.second.as_deref_mut() {
            Some(o) => o.on_epoch(t, m),
            None => Ok(()),
        }
    }
}

fn results(f: &Finished) -> Value {
    let h = &f.trainer.state.history;
    let last = h.last();
    let total_ms: f64 = h.iter().map(|m| m.wall_ms).sum();
    json!({
        "epochs": h.len(),
        "iterations": f.trainer.state.iteration,
        "final_train_loss": last.map(|m| m.train_loss),
        "final_test_error": last.map(|m| m.test_error).filter(|e| e.is_finite()),
        "reported_error": f.trainer.reported_error().filter(|e| e.is_finite()),
        "validation_error": f.validation_error,
        "total_wall_ms": total_ms,
        "mean_epoch_ms": if h.is_empty() { 0.0 } else { total_ms / h.len() as f64 },
    })
}

fn write_summary(
    dir: &RunDir,
    command: &str,
    cfg: &RunConfig,
    train: &TrainConfig,
    f: &Finished,
    extra: Value,
) -> Outcome {
    let mut resolved = cfg.clone();
    resolved.train = train.clone();
    let summary = json!({
        "command": command,
        "config": resolved,
        "input_dim": f.input_dim,
        "num_classes": f.num_classes,
        "results": results(f),
        "extra": extra,
    });
    dir.json("summary.json", &summary)?;
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path) -> Outcome {
    let dir = RunDir::create(out)?;
    let f = fit(cfg, &cfg.train, &dir, false, None)?;
    write_summary(&dir, "train", cfg, &cfg.train, &f, Value::Null)?;
    report(&f);
    Ok(())
}

pub fn train_semi(cfg: &RunConfig, out: &Path) -> Outcome {
    let dir = RunDir::create(out)?;
    let f = fit(cfg, &cfg.train, &dir, true, None)?;
    write_summary(&dir, "train-semi", cfg, &cfg.train, &f, Value::Null)?;
    report(&f);
    Ok(())
}

fn report(f: &Finished) {
    let r = results(f);
    println!("reported_error {} final_train_loss {}", r["reported_error"], r["final_train_loss"]);
}

// ---- bound verification -------------------------------------------------------

/// Evenly spaced sample indices; at most `k` of `n`.
fn probe_indices(n: usize, k: usize) -> Vec<usize> {
    let k = k.min(n);
    (0..k).map(|i| i * n / k).collect()
}

struct BoundCheck {
    probe: Mat,
    labels: Vec<usize>,
    every: u64,
    draws: usize,
    mc_root: Rng,
    log: CsvLog,
    rows: usize,
    violations: usize,
    worst_margin: f64,
}

impl Observer for BoundCheck {
    fn on_iteration(&mut self, t: &Trainer, iteration: u64, lambda: f64) -> isda::Result<()> {
        if !iteration.is_multiple_of(self.every) {
            return Ok(());
        }
        let s = &t.state;
        let batch = LabeledBatch::new(s.model.features(&self.probe)?, self.labels.clone())?;
        let bound = surrogate_loss_at(&batch, &s.head, &s.tracker, lambda)?.loss;
        let mc = mc_expected_ce(&batch, &s.head, &s.tracker, lambda, self.draws, &self.mc_root.split(iteration))?;
        let margin = (bound - mc.estimate) / mc.std_error.max(f64::MIN_POSITIVE);
        self.worst_margin = self.worst_margin.min(margin);
        self.violations += usize::from(bound < mc.estimate - 3.0 * mc.std_error);
        self.rows += 1;
        self.log
            .row(&[iteration.to_string(), num(lambda), num(bound), num(mc.estimate), num(mc.std_error)])
            .map_err(IsdaError::from)
    }

    fn on_epoch(&mut self, _t: &Trainer, _m: &EpochMetrics) -> isda::Result<()> {
        Ok(self.log.sync()?)
    }
}

pub const BOUND_HEADER: &str = "iteration,lambda,surrogate,mc_estimate,mc_stderr";

pub fn verify_bound(cfg: &RunConfig, out: &Path) -> Outcome {
    let dir = RunDir::create(out)?;
    let data = load_data(cfg)?;
    let parts = partition(cfg, data.train, false)?;
    let idx = probe_indices(parts.labeled.len(), cfg.verify.probe);
    let mut check = BoundCheck {
        probe: parts.labeled.inputs.select_rows(&idx),
        labels: idx.iter().map(|&i| parts.labeled.labels[i]).collect(),
        every: cfg.verify.every,
        draws: cfg.verify.draws,
        mc_root: Rng::seed_from(cfg.verify.mc_seed),
        log: dir.csv("bound.csv", BOUND_HEADER)?,
        rows: 0,
        violations: 0,
        worst_margin: f64::INFINITY,
    };
    let f = fit(cfg, &cfg.train, &dir, false, Some(&mut check))?;
    check.log.sync()?;
    let extra = json!({
        "checked_iterations": check.rows,
        "violations": check.violations,
        "worst_margin_stderr": check.worst_margin.is_finite().then_some(check.worst_margin),
    });
    write_summary(&dir, "verify-bound", cfg, &cfg.train, &f, extra)?;
    println!("checked {} iterations, {} violations", check.rows, check.violations);
    if check.violations > 0 {
        return Err(Failure::Violation(format!(
            "surrogate fell below the Monte-Carlo estimate at {} checks",
            check.violations
        )));
    }
    Ok(())
}

// ---- sweeps -------------------------------------------------------------------

pub const SWEEP_M_HEADER: &str =
    "m,replicates,explicit_mean,explicit_sd,explicit_stderr,abs_error,surrogate,mc_estimate,mc_stderr";

pub fn sweep_m(cfg: &RunConfig, out: &Path) -> Outcome {
    let dir = RunDir::create(out)?;
    let f = fit(cfg, &cfg.train, &dir, false, None)?;
    let data = load_data(cfg)?;
    let parts = partition(cfg, data.train, false)?;
    let idx = probe_indices(parts.labeled.len(), cfg.verify.probe);
    let s = &f.trainer.state;
    let labels = idx.iter().map(|&i| parts.labeled.labels[i]).collect();
    let batch = LabeledBatch::new(s.model.features(&parts.labeled.inputs.select_rows(&idx))?, labels)?;
    let lambda = cfg.train.lambda0;
    let root = Rng::seed_from(cfg.verify.mc_seed);
    let surrogate = surrogate_loss_at(&batch, &s.head, &s.tracker, lambda)?.loss;
    let reference =
        mc_expected_ce(&batch, &s.head, &s.tracker, lambda, cfg.sweep.reference_draws, &root.split(u64::MAX))?;
    let mut log = dir.csv("sweep_m.csv", SWEEP_M_HEADER)?;
    for &m in &cfg.sweep.m_values {
        let mut moments = RunningMoments::default();
        for r in 0..cfg.sweep.replicates {
            moments.push(explicit_loss(&batch, &s.head, &s.tracker, lambda, m, &root.split2(m as u64, r as u64))?);
        }
        let sd = moments.sample_variance().sqrt();
        let se = sd / (cfg.sweep.replicates as f64).sqrt();
        log.row(&[
            m.to_string(),
            cfg.sweep.replicates.to_string(),
            num(moments.mean),
            num(sd),
            num(se),
            num((moments.mean - reference.estimate).abs()),
            num(surrogate),
            num(reference.estimate),
            num(reference.std_error),
        ])?;
        log.sync()?;
    }
    let extra = json!({ "lambda": lambda, "surrogate": surrogate, "mc_reference": reference });
    write_summary(&dir, "sweep-m", cfg, &cfg.train, &f, extra)?;
    println!("surrogate {surrogate} reference {} +- {}", reference.estimate, reference.std_error);
    Ok(())
}

pub const ARM_HEADER: &str = "arm,reported_error,final_test_error,validation_error,final_train_loss";

fn arm_row(tag: &str, f: &Finished) -> Vec<String> {
    let r = results(f);
    let field = |k: &str| r[k].as_f64().map_or_else(String::new, num);
    vec![
        tag.to_string(),
        field("reported_error"),
        field("final_test_error"),
        field("validation_error"),
        field("final_train_loss"),
    ]
}

/// Trains each arm in its own subdirectory and writes one summary row per arm.
fn run_arms(cfg: &RunConfig, out: &Path, command: &str, file: &str, arms: Vec<(String, TrainConfig)>) -> Outcome {
    let dir = RunDir::create(out)?;
    let mut log = dir.csv(file, ARM_HEADER)?;
    for (tag, train) in arms {
        let child = dir.child(&tag)?;
        let f = fit(cfg, &train, &child, false, None)?;
        write_summary(&child, command, cfg, &train, &f, json!({ "arm": tag }))?;
        log.row(&arm_row(&tag, &f))?;
        log.sync()?;
        println!("{tag}: reported_error {}", results(&f)["reported_error"]);
    }
    Ok(())
}

pub fn sweep_lambda(cfg: &RunConfig, out: &Path) -> Outcome {
    let arms = cfg
        .sweep
        .lambda0_grid
        .iter()
        .map(|&l| (format!("lambda0_{l}"), TrainConfig { lambda0: l, objective: Objective::Isda, ..cfg.train.clone() }))
        .collect();
    run_arms(cfg, out, "sweep-lambda", "sweep_lambda.csv", arms)
}

pub fn ablate(cfg: &RunConfig, out: &Path) -> Outcome {
    let mut arms = Vec::new();
    if cfg.sweep.include_baseline {
        arms.push(("none".to_string(), TrainConfig { objective: Objective::CrossEntropy, ..cfg.train.clone() }));
    }
    for &mode in &cfg.sweep.modes {
        arms.push((
            mode.name().to_string(),
            TrainConfig { cov_mode: mode, objective: Objective::Isda, ..cfg.train.clone() },
        ));
    }
    run_arms(cfg, out, "ablate", "ablate.csv", arms)
}

// ---- properties and timing --------------------------------------------------

pub fn test_props(cfg: &RunConfig, out: &Path) -> Outcome {
    let dir = RunDir::create(out)?;
    let results = props::run(&cfg.props, cfg.train.seed);
    let mut log = dir.csv("props.csv", "property,pass,detail")?;
    for r in &results {
        println!("{}  {}: {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail);
        log.row(&[r.name.to_string(), r.pass.to_string(), format!("\"{}\"", r.detail.replace('"', "'"))])?;
    }
    log.sync()?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.pass).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Violation(format!("properties failed: {}", failed.join(", "))))
    }
}

/// Config and per-epoch metrics of a finished run directory.
fn read_run(dir: &Path) -> Result<(RunConfig, usize, usize, Vec<EpochMetrics>), Failure> {
    let bad = |what: &str| Failure::Config(format!("{}: {what}", dir.display()));
    let text = fs::read_to_string(dir.join("summary.json")).map_err(|e| bad(&e.to_string()))?;
    let summary: Value = serde_json::from_str(&text).map_err(|e| bad(&e.to_string()))?;
    let cfg: RunConfig = serde_json::from_value(summary["config"].clone()).map_err(|e| bad(&e.to_string()))?;
    let dim = summary["input_dim"].as_u64().ok_or_else(|| bad("summary lacks input_dim"))? as usize;
    let classes = summary["num_classes"].as_u64().ok_or_else(|| bad("summary lacks num_classes"))? as usize;
    let csv = fs::read_to_string(dir.join("metrics.csv")).map_err(|e| bad(&e.to_string()))?;
    let mut history = Vec::new();
    for line in csv.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let parse =
            |i: usize| f.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| bad(&format!("bad row `{line}`")));
        history.push(EpochMetrics {
            epoch: parse(0)? as usize,
            iteration: parse(1)? as u64,
            lambda: parse(2)?,
            train_loss: parse(3)?,
            test_error: parse(4)?,
            wall_ms: parse(5)?,
        });
    }
    Ok((cfg, dim, classes, history))
}

pub fn report_timing_cmd(cfg: &RunConfig, out: &Path, ce: Option<&Path>, isda_dir: Option<&Path>) -> Outcome {
    let dir = RunDir::create(out)?;
    let report: TimingReport = match (ce, isda_dir) {
        (Some(ce), Some(isda_dir)) => {
            let (ce_cfg, dim, classes, ce_hist) = read_run(ce)?;
            let (isda_cfg, dim2, classes2, isda_hist) = read_run(isda_dir)?;
            if (dim, classes) != (dim2, classes2) || ce_cfg.model != isda_cfg.model {
                return Err(Failure::Config("paired runs use different data or models".into()));
            }
            let mut rng = Rng::seed_from(isda_cfg.train.seed);
            let (model, _) = isda_cfg.model.build(dim, classes, &mut rng)?;
            report_timing(&model, classes, (&ce_cfg.train, &ce_hist), (&isda_cfg.train, &isda_hist))
                .map_err(|e| Failure::Config(e.to_string()))?
        }
        (None, None) => {
            let data = load_data(cfg)?;
            measure_overhead(&cfg.train, &cfg.model, &data.train, cfg.timing.reps)?
        }
        _ => return Err(Failure::Config("--ce and --isda must be given together".into())),
    };
    dir.json("timing.json", &report)?;
    println!(
        "flop_overhead {:.4} wall_overhead {:.4} (ce {:.1} ms, isda {:.1} ms)",
        report.flop_overhead, report.wall_overhead, report.ce_ms, report.isda_ms
    );
    Ok(())
}
