use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lmt_core::cohort::{extract_pairs, generate_cohort, load_cohort, save_cohort, write_cohort_csv, Cohort, Split};
use lmt_core::diffcore::{load_checkpoint, save_checkpoint};
use lmt_core::training::{
    evaluate_grading, evaluate_next_visit, fine_tune, linear_probe, train_grading, train_setup, GradingMethod, History,
    LmtConfig, Model, PropagatorKind, Setup,
};
use lmt_core::{Error, Profile};

use crate::config::{ExperimentConfig, RunMethod};
use crate::results::{write_results, ResultsRow};
use crate::CliError;

/// A run that failed numerically; its metric rows carry NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct RunFailure {
    pub run: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ResultsRow>,
    pub failures: Vec<RunFailure>,
}

impl Report {
    fn absorb(&mut self, other: Report) {
        self.rows.extend(other.rows);
        self.failures.extend(other.failures);
    }
}

/// One trained model and what it scored.
struct RunOutcome {
    report: Report,
    model: Option<Model>,
    cfg: LmtConfig,
}

/// Worker count: available cores, capped by `LMT_THREADS`.
pub fn worker_count() -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("LMT_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(n) if n >= 1 => n.min(cores.max(1)).max(1),
        _ => cores,
    }
}

/// `f(0..n)` on up to `workers` threads; results in index order.
fn run_pool<T: Send, F: Fn(usize) -> T + Sync>(n: usize, workers: usize, f: F) -> Vec<T> {
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(n) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                slots.lock().expect("result slots")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|o| o.expect("every job ran"))
        .collect()
}

fn prepare_out_dir(cfg: &ExperimentConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::io(&cfg.out_dir, e))?;
    let path = cfg.out_dir.join("config.txt");
    std::fs::write(&path, cfg.to_text()).map_err(|e| CliError::io(&path, e))
}

pub fn obtain_cohort(cfg: &ExperimentConfig) -> Result<Cohort, CliError> {
    match &cfg.cohort_file {
        Some(p) => Ok(load_cohort(p)?),
        None => Ok(generate_cohort(&cfg.cohort, cfg.cohort_seed)?),
    }
}

fn run_name(method: RunMethod, c: &LmtConfig) -> String {
    match method {
        RunMethod::TimeAware => format!("{}_{}_{}_a{}_{}_s{}", method, c.setup, c.model, c.alpha, c.profile.name(), c.seed),
        RunMethod::Grading(_) => format!("{}_a{}_{}_s{}", method, c.alpha, c.profile.name(), c.seed),
    }
}

fn row(method: RunMethod, c: &LmtConfig, metric: String, value: f64, wall_s: f64) -> ResultsRow {
    let (setup, model) = match method {
        RunMethod::TimeAware => (c.setup.name().to_string(), c.model.name().to_string()),
        RunMethod::Grading(_) => ("-".to_string(), "-".to_string()),
    };
    ResultsRow {
        method: method.name().to_string(),
        setup,
        model,
        alpha: c.alpha,
        profile: c.profile.name().to_string(),
        seed: c.seed,
        metric,
        value,
        wall_s,
    }
}

fn metric_name(method: RunMethod, c: &LmtConfig) -> String {
    match method {
        RunMethod::TimeAware => format!("auc_{}", c.next_visit_task.name()),
        RunMethod::Grading(_) => "kappa".to_string(),
    }
}

/// Numeric trouble and undefined metrics become per-run failures; anything else aborts.
fn soft_failure(e: Error) -> Result<String, CliError> {
    if e.is_numeric() || matches!(e, Error::Undefined(_)) {
        Ok(e.to_string())
    } else {
        Err(CliError::Core(e))
    }
}

fn save_run(out_dir: &Path, name: &str, model: &Model, history: &History, timing: bool) -> Result<(), CliError> {
    save_checkpoint(&model.params, &out_dir.join(format!("{name}.ckpt")))?;
    let mut h = history.clone();
    if !timing {
        h.epochs.iter_mut().for_each(|e| e.wall_ms = 0);
    }
    let path = out_dir.join(format!("{name}.history.csv"));
    let mut buf = Vec::new();
    h.write_csv(&mut buf)?;
    std::fs::write(&path, buf).map_err(|e| CliError::io(&path, e))
}

fn train_one(
    cohort: &Cohort,
    method: RunMethod,
    c: LmtConfig,
    timing: bool,
    out_dir: Option<&Path>,
) -> Result<RunOutcome, CliError> {
    let start = Instant::now();
    let name = run_name(method, &c);
    log::info!("training {name}");
    let trained = match method {
        RunMethod::TimeAware => train_setup(cohort, &c).map(|t| {
            let test = extract_pairs(cohort, Some(Split::Test));
            let score = if t.history.failure.is_none() {
                Some(evaluate_next_visit(&t.model, &c, &test, c.next_visit_task))
            } else {
                None
            };
            (t.model, t.history, score)
        }),
        RunMethod::Grading(g) => train_grading(cohort, &c, g).map(|r| {
            let score = r.history.failure.is_none().then_some(Ok(r.kappa));
            (r.model, r.history, score)
        }),
    };
    let wall = if timing { start.elapsed().as_secs_f64() } else { 0.0 };
    let mut report = Report::default();
    let metric = metric_name(method, &c);
    let (model, value) = match trained {
        Ok((model, history, score)) => {
            if let Some(dir) = out_dir {
                save_run(dir, &name, &model, &history, timing)?;
            }
            let value = match score {
                Some(Ok(v)) => v,
                Some(Err(e)) => {
                    let message = soft_failure(e)?;
                    report.failures.push(RunFailure { run: name.clone(), message });
                    f64::NAN
                }
                None => {
                    let message = history.failure.clone().unwrap_or_default();
                    report.failures.push(RunFailure { run: name.clone(), message });
                    f64::NAN
                }
            };
            (Some(model), value)
        }
        Err(e) => {
            let message = soft_failure(e)?;
            report.failures.push(RunFailure { run: name.clone(), message });
            (None, f64::NAN)
        }
    };
    for f in &report.failures {
        log::error!("{}: {}", f.run, f.message);
    }
    report.rows.push(row(method, &c, metric, value, wall));
    Ok(RunOutcome { report, model, cfg: c })
}

fn collect(outcomes: Vec<Result<RunOutcome, CliError>>) -> Result<(Report, Vec<RunOutcome>), CliError> {
    let mut report = Report::default();
    let mut kept = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let o = o?;
        report.absorb(o.report.clone());
        kept.push(o);
    }
    Ok((report, kept))
}

fn finish(cfg: &ExperimentConfig, file: &str, report: &Report) -> Result<(), CliError> {
    write_results(&report.rows, &cfg.out_dir.join(file))
}

/// Generate (or load) the cohort and persist it with a CSV view and summary rows.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    prepare_out_dir(cfg)?;
    let cohort = obtain_cohort(cfg)?;
    save_cohort(&cohort, &cfg.out_dir.join("cohort.bin"))?;
    let csv = cfg.out_dir.join("cohort.csv");
    let mut buf = Vec::new();
    write_cohort_csv(&cohort, &mut buf)?;
    std::fs::write(&csv, buf).map_err(|e| CliError::io(&csv, e))?;

    let pairs = extract_pairs(&cohort, None);
    let mut counts = [0usize; lmt_core::NUM_GRADES];
    for (_, x) in cohort.exams() {
        counts[x.grade.value() as usize] += 1;
    }
    let n_exams = cohort.num_exams();
    let summary = |metric: String, value: f64| ResultsRow {
        method: "cohort".into(),
        setup: "-".into(),
        model: "-".into(),
        alpha: 0.0,
        profile: "-".into(),
        seed: cohort.seed,
        metric,
        value,
        wall_s: 0.0,
    };
    let mut rows = vec![
        summary("patients".into(), cohort.patients.len() as f64),
        summary("exams".into(), n_exams as f64),
        summary("pairs".into(), pairs.len() as f64),
    ];
    for (g, n) in counts.iter().enumerate() {
        rows.push(summary(format!("grade{g}_fraction"), *n as f64 / n_exams.max(1) as f64));
    }
    let report = Report { rows, failures: Vec::new() };
    finish(cfg, "results.csv", &report)?;
    Ok(report)
}

/// Train `cfg.method` once per seed, save checkpoints and histories, score on test.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    prepare_out_dir(cfg)?;
    let cohort = obtain_cohort(cfg)?;
    let outcomes = run_pool(cfg.seeds.len(), worker_count(), |i| {
        train_one(&cohort, cfg.method, cfg.run_config(cfg.seeds[i], None), cfg.timing, Some(&cfg.out_dir))
    });
    let (report, _) = collect(outcomes)?;
    finish(cfg, "results.csv", &report)?;
    Ok(report)
}

/// Score a saved checkpoint on the test split, under the configured method.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Report, CliError> {
    prepare_out_dir(cfg)?;
    let cohort = obtain_cohort(cfg)?;
    let c = cfg.run_config(cfg.seeds.first().copied().unwrap_or(0), None);
    let mut model = Model::new(cohort.feature_dim(), &c, &mut ChaCha8Rng::seed_from_u64(0));
    model.params.load_from(&load_checkpoint(checkpoint)?).map_err(|e| match e {
        Error::Shape { .. } => Error::Format(format!("checkpoint does not match the configured model: {e}")),
        e => e,
    })?;
    let score = match cfg.method {
        RunMethod::TimeAware => {
            evaluate_next_visit(&model, &c, &extract_pairs(&cohort, Some(Split::Test)), c.next_visit_task)
        }
        RunMethod::Grading(_) => {
            let exams: Vec<_> = cohort.patients_in(Split::Test).flat_map(|p| p.eyes.iter()).flat_map(|e| e.exams.iter()).collect();
            evaluate_grading(&model, &exams)
        }
    };
    let mut report = Report::default();
    let value = match score {
        Ok(v) => v,
        Err(e) => {
            let message = soft_failure(e)?;
            report.failures.push(RunFailure { run: checkpoint.display().to_string(), message });
            f64::NAN
        }
    };
    report.rows.push(row(cfg.method, &c, metric_name(cfg.method, &c), value, 0.0));
    finish(cfg, "results.csv", &report)?;
    Ok(report)
}

fn probe_rows(cohort: &Cohort, outcome: &RunOutcome, method: RunMethod, timing: bool) -> Result<Report, CliError> {
    let mut report = Report::default();
    let c = &outcome.cfg;
    let task = c.probe_task.name();
    for (label, fine) in [("probe", false), ("finetune", true)] {
        let start = Instant::now();
        let value = match &outcome.model {
            None => f64::NAN,
            Some(m) => {
                let r = if fine {
                    fine_tune(&m.encoder, &m.params, cohort, c)
                } else {
                    linear_probe(&m.encoder, &m.params, cohort, c)
                };
                match r {
                    Ok(r) if r.history.failure.is_none() => r.auc,
                    Ok(r) => {
                        let message = r.history.failure.unwrap_or_default();
                        report.failures.push(RunFailure { run: format!("{label} {}", run_name(method, c)), message });
                        f64::NAN
                    }
                    Err(e) => {
                        let message = soft_failure(e)?;
                        report.failures.push(RunFailure { run: format!("{label} {}", run_name(method, c)), message });
                        f64::NAN
                    }
                }
            }
        };
        let wall = if timing { start.elapsed().as_secs_f64() } else { 0.0 };
        report.rows.push(row(method, c, format!("{label}_auc_{task}"), value, wall));
    }
    Ok(report)
}

/// Pretrain with `cfg.method`, then linear probe and fine-tune on the downstream task.
pub fn run_probe(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    prepare_out_dir(cfg)?;
    let cohort = obtain_cohort(cfg)?;
    let outcomes = run_pool(cfg.seeds.len(), worker_count(), |i| {
        let o = train_one(&cohort, cfg.method, cfg.run_config(cfg.seeds[i], None), cfg.timing, Some(&cfg.out_dir))?;
        let extra = probe_rows(&cohort, &o, cfg.method, cfg.timing)?;
        Ok::<_, CliError>((o, extra))
    });
    let mut report = Report::default();
    for o in outcomes {
        let (o, extra) = o?;
        report.absorb(o.report);
        report.absorb(extra);
    }
    finish(cfg, "results.csv", &report)?;
    Ok(report)
}

/// One run per (α, seed), α-major.
pub fn sweep_alpha(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    prepare_out_dir(cfg)?;
    let cohort = obtain_cohort(cfg)?;
    let jobs: Vec<(f64, u64)> = cfg.alphas.iter().flat_map(|&a| cfg.seeds.iter().map(move |&s| (a, s))).collect();
    let outcomes = run_pool(jobs.len(), worker_count(), |i| {
        let (a, s) = jobs[i];
        train_one(&cohort, cfg.method, cfg.run_config(s, Some(a)), cfg.timing, Some(&cfg.out_dir))
    });
    let (report, _) = collect(outcomes)?;
    finish(cfg, "results.csv", &report)?;
    Ok(report)
}

struct Job {
    table: usize,
    method: RunMethod,
    cfg: LmtConfig,
}

/// Desk-scale grading, downstream and next-visit tables plus the α-vs-kappa series.
///
/// Writes `table1.csv` (grading kappa), `table2.csv` (probe / fine-tune AUC),
/// `table3.csv` (next-visit AUC per setup and propagator), `fig3.csv`
/// (kappa over the α grid for both profiles) and their union in `results.csv`.
pub fn reproduce_tables(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    prepare_out_dir(cfg)?;
    let cohort = obtain_cohort(cfg)?;
    let mut jobs = Vec::new();
    for &seed in &cfg.seeds {
        let base = cfg.run_config(seed, None);
        let grading = [
            (GradingMethod::Baseline, Profile::Linear),
            (GradingMethod::ManifoldMixup, Profile::Linear),
            (GradingMethod::Lmm, Profile::Linear),
            (GradingMethod::Lmm, Profile::Exponential),
        ];
        for (g, profile) in grading {
            jobs.push(Job { table: 1, method: RunMethod::Grading(g), cfg: LmtConfig { profile, ..base.clone() } });
        }
        let setups = [
            (Setup::S1, PropagatorKind::Node),
            (Setup::S2, PropagatorKind::Node),
            (Setup::S3, PropagatorKind::Node),
            (Setup::S1, PropagatorKind::TLstm),
            (Setup::S2, PropagatorKind::TLstm),
        ];
        for (setup, model) in setups {
            jobs.push(Job {
                table: 3,
                method: RunMethod::TimeAware,
                cfg: LmtConfig { setup, model, profile: Profile::Linear, ..base.clone() },
            });
        }
        for &alpha in &cfg.alphas {
            for profile in [Profile::Linear, Profile::Exponential] {
                jobs.push(Job {
                    table: 4,
                    method: RunMethod::Grading(GradingMethod::Lmm),
                    cfg: LmtConfig { alpha, profile, ..base.clone() },
                });
            }
        }
    }
    let workers = worker_count();
    let outcomes = run_pool(jobs.len(), workers, |i| {
        let j = &jobs[i];
        let keep_dir = (j.table != 4).then_some(cfg.out_dir.as_path());
        train_one(&cohort, j.method, j.cfg.clone(), cfg.timing, keep_dir)
    });
    let (_, outcomes) = collect(outcomes)?;

    // Downstream rows reuse the baseline and LMM (linear) encoders from the grading table.
    let pretrained: Vec<usize> = jobs
        .iter()
        .enumerate()
        .filter(|(_, j)| {
            j.table == 1
                && j.cfg.profile == Profile::Linear
                && matches!(j.method, RunMethod::Grading(GradingMethod::Baseline | GradingMethod::Lmm))
        })
        .map(|(i, _)| i)
        .collect();
    let downstream = run_pool(pretrained.len(), workers, |k| {
        let i = pretrained[k];
        probe_rows(&cohort, &outcomes[i], jobs[i].method, cfg.timing)
    });

    let mut tables: [Report; 4] = Default::default();
    for (j, o) in jobs.iter().zip(&outcomes) {
        let slot = match j.table {
            1 => 0,
            3 => 2,
            _ => 3,
        };
        tables[slot].absorb(o.report.clone());
    }
    for d in downstream {
        tables[1].absorb(d?);
    }
    let mut all = Report::default();
    for (t, name) in tables.iter().zip(["table1.csv", "table2.csv", "table3.csv", "fig3.csv"]) {
        finish(cfg, name, t)?;
        all.absorb(t.clone());
    }
    finish(cfg, "results.csv", &all)?;
    Ok(all)
}

/// `out_dir/results.csv` of a finished command.
pub fn results_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("results.csv")
}
