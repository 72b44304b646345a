//! The experiment commands, callable from the binary and from tests.
//!
//! Every command writes `manifest.json` beside its outputs. Sampling noise
//! for case `i` comes from a stream keyed by `(seed, i)`, so results do not
//! depend on which other cases are evaluated, on their order or on the
//! thread count.

use std::path::{Path, PathBuf};

use pgrd::diffusion::{aggregate, sample, PriorSource, Sampler, SampleSet};
use pgrd::metrics::{compare, dice_per_class, per_case_csv, reliability, summarize, CaseResult, MetricComparison, ReliabilityBin, Report, Summary};
use pgrd::ndgrad::{check_all_ops, Tensor};
use pgrd::nets::{read_checkpoint, save_checkpoint, DenoiserNet, PriorNet};
use pgrd::rng::Stream;
use pgrd::synthdata::{generate, Dataset};
use pgrd::training::{check_objective, pgrd_trace_csv, prior_trace_csv, train_pgrd, train_prior, PgrdTraceRow, TrainError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{RunConfig, SamplerSpec};
use crate::error::CliError;
use crate::manifest::{blob_hash, file_hash, write_bytes, write_json, Manifest};

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PRIOR_CHECKPOINT: &str = "prior.ckpt";
pub const DENOISER_CHECKPOINT: &str = "denoiser.ckpt";
pub const PRIOR_LOSS: &str = "prior_loss.csv";
pub const DENOISER_LOSS: &str = "denoiser_loss.csv";
/// Parameters from before a diverging update.
pub const DIVERGED_CHECKPOINT: &str = "diverged.ckpt";
pub const BENCH_FILE: &str = "steps.csv";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("dataset {} does not exist; run `pgrd gen` first", path.display())));
    }
    Ok(Dataset::load(path)?)
}

/// Seed of every sampling stream of case `case`.
pub fn case_seed(seed: u64, case: usize) -> u64 {
    Stream::new(seed, "eval").derive_index("case", case as u64).to_seed()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenOutcome {
    pub path: PathBuf,
    pub cases: usize,
    /// Content hash of the dataset file.
    pub checksum: String,
}

/// Generate the dataset described by `cfg.data` into `cfg.dataset`.
pub fn gen(cfg: &RunConfig) -> Result<GenOutcome, CliError> {
    let data = generate(&cfg.data)?;
    let bytes = data.encode();
    write_bytes(&cfg.dataset, &bytes)?;
    let manifest = manifest_beside(&cfg.dataset);
    Manifest::new("gen", json!({}), std::slice::from_ref(cfg), &[], &[&cfg.dataset])?.write(&manifest)?;
    Ok(GenOutcome {
        path: cfg.dataset.clone(),
        cases: data.len(),
        checksum: blob_hash(&bytes),
    })
}

/// `data/synth.pgrd` gets `data/synth.manifest.json`.
fn manifest_beside(path: &Path) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.manifest.json"))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    /// Stage-1 updates taken; `None` under `no_pgr`.
    pub prior_steps: Option<usize>,
    pub prior_plateaued: bool,
    pub trace: Vec<PgrdTraceRow>,
    pub denoiser_hash: String,
}

fn diverged(out: &Path, e: TrainError) -> CliError {
    match e {
        TrainError::Diverged { ref last_good, .. } => {
            let path = out.join(DIVERGED_CHECKPOINT);
            match write_bytes(&path, last_good) {
                Ok(()) => CliError::Numeric(format!("{e}; last good parameters written to {}", path.display())),
                Err(w) => CliError::Numeric(format!("{e}; could not save last good parameters: {w}")),
            }
        }
        e => e.into(),
    }
}

/// Stage 1 (skipped under `no_pgr`), then stage 2, into `cfg.out_dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    let data = load_dataset(&cfg.dataset)?;
    let sch = cfg.schedule.build()?;
    let (train_cases, _) = data.split();
    let out = &cfg.out_dir;
    create_dir(out)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    let mut outputs = vec![out.join(CONFIG_FILE)];

    let prior = if cfg.train.no_pgr {
        None
    } else {
        let net = PriorNet::<f32>::new(cfg.prior_arch(data.classes), cfg.train.prior_init_seed())?;
        let run = train_prior(net, &data, &train_cases, &cfg.train).map_err(|e| diverged(out, e))?;
        save_checkpoint(&run.net.to_checkpoint(), &out.join(PRIOR_CHECKPOINT))?;
        write_bytes(&out.join(PRIOR_LOSS), prior_trace_csv(&run.trace).as_bytes())?;
        outputs.extend([out.join(PRIOR_CHECKPOINT), out.join(PRIOR_LOSS)]);
        Some(run)
    };

    let net = DenoiserNet::<f32>::new(cfg.denoiser_arch(data.classes), cfg.train.denoiser_init_seed())?;
    let run = train_pgrd(net, prior.as_ref().map(|p| &p.net), &data, &train_cases, &sch, &cfg.train).map_err(|e| diverged(out, e))?;
    let ckpt = out.join(DENOISER_CHECKPOINT);
    save_checkpoint(&run.net.to_checkpoint(), &ckpt)?;
    write_bytes(&out.join(DENOISER_LOSS), pgrd_trace_csv(&run.trace).as_bytes())?;
    outputs.extend([ckpt.clone(), out.join(DENOISER_LOSS)]);

    let outputs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    Manifest::new("train", json!({}), std::slice::from_ref(cfg), &[&cfg.dataset], &outputs)?.write(&out.join(MANIFEST_FILE))?;
    Ok(TrainOutcome {
        out_dir: out.clone(),
        prior_steps: prior.as_ref().map(|p| p.trace.len()),
        prior_plateaued: prior.as_ref().is_some_and(|p| p.plateaued),
        trace: run.trace,
        denoiser_hash: file_hash(&ckpt)?,
    })
}

/// A trained run directory: its config and frozen networks.
pub struct LoadedRun {
    pub name: String,
    pub dir: PathBuf,
    pub config: RunConfig,
    pub prior: Option<PriorNet<f32>>,
    pub denoiser: DenoiserNet<f32>,
}

impl LoadedRun {
    pub fn open(name: &str, dir: &Path) -> Result<Self, CliError> {
        let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
        let denoiser = DenoiserNet::from_checkpoint(read_checkpoint(&dir.join(DENOISER_CHECKPOINT))?)?;
        let prior = if config.train.no_pgr {
            None
        } else {
            let net = PriorNet::from_checkpoint(read_checkpoint(&dir.join(PRIOR_CHECKPOINT))?)?;
            if !net.is_frozen() {
                return Err(CliError::Usage(format!("{}: prior checkpoint is not frozen", dir.display())));
            }
            Some(net)
        };
        if denoiser.arch().steps != config.schedule.steps() {
            return Err(CliError::Usage(format!(
                "{}: denoiser trained for T = {}, config schedule has T = {}",
                dir.display(),
                denoiser.arch().steps,
                config.schedule.steps()
            )));
        }
        Ok(Self {
            name: name.to_string(),
            dir: dir.to_path_buf(),
            config,
            prior,
            denoiser,
        })
    }

    pub fn checkpoints(&self) -> Vec<PathBuf> {
        let mut out = vec![self.dir.join(DENOISER_CHECKPOINT)];
        if self.prior.is_some() {
            out.push(self.dir.join(PRIOR_CHECKPOINT));
        }
        out
    }

    fn prior_source(&self) -> PriorSource<'_, f32> {
        self.prior.as_ref().map_or(PriorSource::Uniform, PriorSource::Net)
    }

    fn check_data(&self, data: &Dataset) -> Result<(), CliError> {
        let arch = self.denoiser.arch();
        if arch.classes != data.classes {
            return Err(CliError::Usage(format!(
                "run {} predicts {} classes but the dataset has {}",
                self.name, arch.classes, data.classes
            )));
        }
        Ok(())
    }

    /// `M` trajectories for one case.
    pub fn sample_case(&self, data: &Dataset, case: usize, spec: &SamplerSpec) -> Result<SampleSet<f32>, CliError> {
        let sch = self.config.schedule.build()?;
        let scfg = spec.config(sch.steps())?;
        let x = data.images::<f32>(&[case]);
        Ok(sample(self.prior_source(), &self.denoiser, &x, &sch, &scfg, case_seed(self.config.seed, case))?)
    }
}

/// Replacements for a run's sampler settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerOverrides {
    pub kind: Option<Sampler>,
    pub steps: Option<usize>,
    pub samples: Option<usize>,
    pub tau_out: Option<f64>,
}

impl SamplerOverrides {
    pub fn apply(&self, spec: &SamplerSpec) -> SamplerSpec {
        SamplerSpec {
            kind: self.kind.unwrap_or(spec.kind),
            steps: self.steps.unwrap_or(spec.steps),
            samples: self.samples.unwrap_or(spec.samples),
            tau_out: self.tau_out.unwrap_or(spec.tau_out),
            posterior: spec.posterior,
        }
    }
}

/// Case selection shared by `sample`, `eval` and `bench-steps`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseSelection {
    /// Explicit case indices; the held-out split when empty.
    pub cases: Vec<usize>,
    /// Keep only the first `limit` selected cases.
    pub limit: Option<usize>,
}

impl CaseSelection {
    fn resolve(&self, data: &Dataset) -> Result<Vec<usize>, CliError> {
        let mut cases = if self.cases.is_empty() { data.split().1 } else { self.cases.clone() };
        if let Some(&bad) = cases.iter().find(|&&c| c >= data.len()) {
            return Err(CliError::Usage(format!("case {bad} out of range for {} cases", data.len())));
        }
        if let Some(n) = self.limit {
            cases.truncate(n);
        }
        if cases.is_empty() {
            return Err(CliError::Usage("no cases selected".into()));
        }
        Ok(cases)
    }
}

/// Write one sample archive per case, `case_<i>.pgrd`, with the same noise
/// `eval` uses for that case.
pub fn sample_cases(run_dir: &Path, select: &CaseSelection, overrides: &SamplerOverrides, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let run = LoadedRun::open("run", run_dir)?;
    let spec = overrides.apply(&run.config.sampler);
    let data = load_dataset(&run.config.dataset)?;
    run.check_data(&data)?;
    let cases = select.resolve(&data)?;
    create_dir(out)?;
    let sets: Vec<SampleSet<f32>> = cases
        .par_iter()
        .map(|&c| run.sample_case(&data, c, &spec))
        .collect::<Result<_, _>>()?;
    let mut paths = Vec::with_capacity(cases.len());
    for (c, set) in cases.iter().zip(&sets) {
        let path = out.join(format!("case_{c}.pgrd"));
        write_bytes(&path, &set.encode())?;
        paths.push(path);
    }
    let mut inputs = run.checkpoints();
    inputs.push(run.config.dataset.clone());
    let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let outputs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
    let args = json!({"cases": cases, "sampler": spec});
    Manifest::new("sample", args, std::slice::from_ref(&run.config), &inputs, &outputs)?.write(&out.join(MANIFEST_FILE))?;
    Ok(paths)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub out: PathBuf,
    pub select: CaseSelection,
    pub sampler: SamplerOverrides,
    /// Show DSC, NLL and ECE ×100 in the text table.
    pub percent: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunEval {
    pub name: String,
    pub sampler: SamplerSpec,
    pub report: Report,
    pub cases: Vec<CaseResult>,
    /// Pooled over every evaluated pixel.
    pub reliability: Vec<ReliabilityBin>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub a: String,
    pub b: String,
    /// Paired tests on `a - b`, one per metric.
    pub metrics: Vec<MetricComparison>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub runs: Vec<RunEval>,
    pub comparisons: Vec<PairComparison>,
    pub table: String,
}

fn check_names(runs: &[(String, PathBuf)]) -> Result<(), CliError> {
    if runs.is_empty() {
        return Err(CliError::Usage("at least one run is required".into()));
    }
    for (i, (name, _)) in runs.iter().enumerate() {
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(CliError::Usage(format!("run name {name:?} must be non-empty [A-Za-z0-9_-]")));
        }
        if runs[..i].iter().any(|(n, _)| n == name) {
            return Err(CliError::Usage(format!("run name {name:?} given twice")));
        }
    }
    Ok(())
}

/// Load every run and the single dataset they share.
fn open_runs(runs: &[(String, PathBuf)]) -> Result<(Vec<LoadedRun>, Dataset, PathBuf), CliError> {
    check_names(runs)?;
    let loaded: Vec<LoadedRun> = runs.iter().map(|(n, d)| LoadedRun::open(n, d)).collect::<Result<_, _>>()?;
    let path = loaded[0].config.dataset.clone();
    let data = load_dataset(&path)?;
    let hash = file_hash(&path)?;
    for run in &loaded {
        if run.config.dataset != path && file_hash(&run.config.dataset)? != hash {
            return Err(CliError::Usage(format!(
                "runs {} and {} were trained on different datasets",
                loaded[0].name, run.name
            )));
        }
        run.check_data(&data)?;
    }
    Ok((loaded, data, path))
}

fn truth(data: &Dataset, case: usize) -> &[u8] {
    &data.cases[case].raters[0]
}

/// Score `run` on `cases` against rater 0.
fn evaluate_run(run: &LoadedRun, data: &Dataset, cases: &[usize], spec: &SamplerSpec) -> Result<RunEval, CliError> {
    let bins = run.config.ece_bins;
    let scored: Vec<(CaseResult, Tensor<f32>)> = cases
        .par_iter()
        .map(|&c| -> Result<_, CliError> {
            let set = run.sample_case(data, c, spec)?;
            let (probs, mask) = aggregate(&set, spec.tau_out)?;
            let result = CaseResult::evaluate(c, &probs, &mask, truth(data, c), spec.samples, bins)?;
            Ok((result, probs))
        })
        .collect::<Result<_, _>>()?;
    let (results, probs): (Vec<CaseResult>, Vec<Tensor<f32>>) = scored.into_iter().unzip();
    let pooled = Tensor::stack(&probs)?;
    let all_truth: Vec<u8> = cases.iter().flat_map(|&c| truth(data, c).iter().copied()).collect();
    Ok(RunEval {
        name: run.name.clone(),
        sampler: spec.clone(),
        report: summarize(&results)?,
        reliability: reliability(&pooled, &all_truth, bins)?,
        cases: results,
    })
}

/// Sample, aggregate and score every named run on the same cases, then
/// run paired t-tests between every pair of runs.
///
/// Writes `report_<name>.json`, `cases_<name>.csv`,
/// `reliability_<name>.json`, `comparisons.json` and `table.txt`.
pub fn eval(runs: &[(String, PathBuf)], opts: &EvalOptions) -> Result<EvalOutcome, CliError> {
    let (loaded, data, data_path) = open_runs(runs)?;
    let cases = opts.select.resolve(&data)?;
    let specs: Vec<SamplerSpec> = loaded.iter().map(|r| opts.sampler.apply(&r.config.sampler)).collect();
    for (run, spec) in loaded.iter().zip(&specs) {
        spec.config(run.config.schedule.steps())?;
    }
    let evals: Vec<RunEval> = loaded
        .iter()
        .zip(&specs)
        .map(|(run, spec)| evaluate_run(run, &data, &cases, spec))
        .collect::<Result<_, _>>()?;
    let mut comparisons = Vec::new();
    for i in 0..evals.len() {
        for j in i + 1..evals.len() {
            comparisons.push(PairComparison {
                a: evals[i].name.clone(),
                b: evals[j].name.clone(),
                metrics: compare(&evals[i].cases, &evals[j].cases)?,
            });
        }
    }
    let rows: Vec<(&str, Report)> = evals.iter().map(|e| (e.name.as_str(), e.report)).collect();
    let table = Report::table(&rows, opts.percent);

    let out = &opts.out;
    create_dir(out)?;
    let mut outputs = Vec::new();
    for e in &evals {
        let report = out.join(format!("report_{}.json", e.name));
        write_json(&report, &e.report)?;
        let csv = out.join(format!("cases_{}.csv", e.name));
        write_bytes(&csv, per_case_csv(&e.cases).as_bytes())?;
        let rel = out.join(format!("reliability_{}.json", e.name));
        write_json(&rel, &e.reliability)?;
        outputs.extend([report, csv, rel]);
    }
    let cmp = out.join("comparisons.json");
    write_json(&cmp, &comparisons)?;
    let tbl = out.join("table.txt");
    write_bytes(&tbl, table.as_bytes())?;
    outputs.extend([cmp, tbl]);

    let mut inputs = vec![data_path];
    inputs.extend(loaded.iter().flat_map(LoadedRun::checkpoints));
    let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let outputs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    let configs: Vec<RunConfig> = loaded.iter().map(|r| r.config.clone()).collect();
    let args = json!({
        "runs": loaded.iter().map(|r| &r.name).collect::<Vec<_>>(),
        "cases": cases,
        "sampler": opts.sampler,
    });
    Manifest::new("eval", args, &configs, &inputs, &outputs)?.write(&out.join(MANIFEST_FILE))?;
    Ok(EvalOutcome { runs: evals, comparisons, table })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub out: PathBuf,
    /// Reverse step counts to try.
    pub steps: Vec<usize>,
    pub select: CaseSelection,
    /// Overrides everything but `steps`.
    pub sampler: SamplerOverrides,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    #[serde(rename = "S")]
    pub steps: usize,
    pub dsc_mean: f64,
    pub dsc_std: f64,
}

/// Mean foreground Dice against the number of reverse steps, one row per
/// `(model, S)`. Case `i` uses the same noise seed at every `S`.
pub fn bench_steps(runs: &[(String, PathBuf)], opts: &BenchOptions) -> Result<Vec<BenchRow>, CliError> {
    if opts.steps.is_empty() {
        return Err(CliError::Usage("no step counts given".into()));
    }
    let (loaded, data, data_path) = open_runs(runs)?;
    for run in &loaded {
        let t = run.config.schedule.steps();
        if let Some(&s) = opts.steps.iter().find(|&&s| s == 0 || s > t) {
            return Err(CliError::Usage(format!("step count {s} outside 1..={t} for run {}", run.name)));
        }
    }
    let cases = opts.select.resolve(&data)?;
    let mut rows = Vec::new();
    for run in &loaded {
        let base = opts.sampler.apply(&run.config.sampler);
        for &s in &opts.steps {
            let spec = SamplerSpec { steps: s, ..base.clone() };
            let dsc: Vec<f64> = cases
                .par_iter()
                .map(|&c| -> Result<f64, CliError> {
                    let set = run.sample_case(&data, c, &spec)?;
                    let (_, mask) = aggregate(&set, spec.tau_out)?;
                    Ok(dice_per_class(&mask, truth(&data, c), data.classes)?.1)
                })
                .collect::<Result<_, _>>()?;
            let summary = Summary::of(&dsc)?;
            rows.push(BenchRow {
                model: run.name.clone(),
                steps: s,
                dsc_mean: summary.mean,
                dsc_std: summary.std,
            });
        }
    }
    let mut csv = String::from("model,S,dsc_mean,dsc_std\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.model, r.steps, r.dsc_mean, r.dsc_std));
    }
    let path = opts.out.join(BENCH_FILE);
    write_bytes(&path, csv.as_bytes())?;
    let mut inputs = vec![data_path];
    inputs.extend(loaded.iter().flat_map(LoadedRun::checkpoints));
    let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let configs: Vec<RunConfig> = loaded.iter().map(|r| r.config.clone()).collect();
    let args = json!({
        "runs": loaded.iter().map(|r| &r.name).collect::<Vec<_>>(),
        "steps": opts.steps,
        "cases": cases,
        "sampler": opts.sampler,
    });
    Manifest::new("bench-steps", args, &configs, &inputs, &[&path])?.write(&opts.out.join(MANIFEST_FILE))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckLine {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOutcome {
    pub tolerance: f64,
    /// One line per op, then the full objective.
    pub lines: Vec<GradCheckLine>,
    pub passed: bool,
}

/// Finite-difference check of every op and of the full training objective.
/// Writes `gradcheck.json`; a failed check is reported in the outcome, not
/// as an error.
pub fn gradcheck(tolerance: f64, seed: u64, out: &Path) -> Result<GradCheckOutcome, CliError> {
    if !(tolerance > 0.0) {
        return Err(CliError::Usage(format!("tolerance {tolerance} must be positive")));
    }
    let mut lines: Vec<GradCheckLine> = check_all_ops(tolerance, seed)?
        .into_iter()
        .map(|c| GradCheckLine {
            name: c.op.to_string(),
            max_rel_error: c.report.max_rel_error(),
            passed: c.report.passed,
        })
        .collect();
    let objective = check_objective(tolerance, seed)?;
    lines.push(GradCheckLine {
        name: "objective".into(),
        max_rel_error: objective.max_rel_error(),
        passed: objective.passed,
    });
    let outcome = GradCheckOutcome {
        tolerance,
        passed: lines.iter().all(|l| l.passed),
        lines,
    };
    create_dir(out)?;
    let path = out.join("gradcheck.json");
    write_json(&path, &outcome)?;
    Manifest::new("gradcheck", json!({"tolerance": tolerance, "seed": seed}), &[], &[], &[&path])?.write(&out.join(MANIFEST_FILE))?;
    Ok(outcome)
}
