//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Exits 0 even when a criterion fails so the verdicts stay visible in a
//! normal `cargo test` run; set `PGRD_ACCEPTANCE_STRICT=1` to turn any FAIL
//! into a nonzero exit. Criteria 6 to 9 train full-size models and take a
//! few minutes on one core. Criterion ids given as arguments
//! (`cargo test --test acceptance -- C2 C10`) restrict the run; C7 and C8
//! reuse the models trained by C6.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use pgrd::diffusion::{
    argmax_channels, q_sample, q_step, recover, sample, v_target, DiffusionState, ForwardForm, LabelField,
    OracleDenoiser, PosteriorMode, PriorField, PriorSource, Sampler, SamplerConfig,
};
use pgrd::metrics::{dice, ece, nll, paired_t_test, spearman, summarize, CaseResult};
use pgrd::ndgrad::{softmax_channels, Tensor};
use pgrd::nets::{DenoiserArch, DenoiserNet};
use pgrd::rng::Stream;
use pgrd::schedule::{uniform_subset, Schedule, ScheduleSpec};
use pgrd::synthdata::{two_mode_fixture, Dataset};
use pgrd::training::{fresh_prior, train_pgrd, train_prior, TrainConfig};
use pgrd_cli::commands::{self, BenchOptions, CaseSelection, EvalOptions, SamplerOverrides};
use pgrd_cli::manifest::file_hash;
use pgrd_cli::{ArchSpec, RunConfig};

type Check = Result<(bool, String), String>;

// Pinned tolerances.
const RECOVERY_TOL: f64 = 1e-6;
const RECOVERY_BUDGET: Duration = Duration::from_secs(1);
const MARGINAL_STEPS: usize = 1000;
const MARGINAL_CHAINS: usize = 20_000;
const MARGINAL_MEAN_TOL: f64 = 0.02;
const MARGINAL_VAR_TOL: f64 = 0.03;
const MARGINAL_BUDGET: Duration = Duration::from_secs(30);
const ORACLE_ACCURACY: f64 = 0.99;
const GRAD_TOL: f64 = 1e-4;
const FIXTURE_TOL: f64 = 1e-4;
const DSC_FLOOR: f64 = 0.85;
const END_TO_END_BUDGET: Duration = Duration::from_secs(30 * 60);
const ABLATION_P: f64 = 0.1;
const ABLATION_MIN_CASES: usize = 20;
const BENCH_STEPS: [usize; 8] = [1, 2, 5, 10, 25, 50, 100, 200];
const BENCH_SAMPLES: usize = 4;
const BENCH_CASES: usize = 20;
const BENCH_FRACTION: f64 = 0.95;
const MODE_SAMPLES: usize = 32;
const MODE_BAND: (f64, f64) = (0.2, 0.8);

struct Harness {
    only: Vec<String>,
    ran: usize,
    failed: usize,
}

impl Harness {
    fn run(&mut self, id: &str, title: &str, f: impl FnOnce() -> Check) {
        if !self.only.is_empty() && !self.only.iter().any(|o| o == id) {
            return;
        }
        self.ran += 1;
        let start = Instant::now();
        let (pass, detail) = match f() {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            self.failed += 1;
        }
        println!(
            "{} {id} {title}: {detail} [{:.1} s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn random_labels(seed: u64, b: usize, c: usize, h: usize, w: usize) -> LabelField<f64> {
    let mut s = Stream::new(seed, "labels");
    let idx: Vec<u8> = (0..b * h * w).map(|_| s.range_inclusive(0, c as u64 - 1) as u8).collect();
    LabelField::from_indices(&idx, b, c, h, w).expect("valid indices")
}

fn random_prior(seed: u64, shape: &[usize]) -> PriorField<f64> {
    let raw: Tensor<f64> = Stream::new(seed, "prior").normal_tensor(shape);
    PriorField::new(softmax_channels(&raw).expect("4-d")).expect("softmax is a simplex")
}

fn recovery() -> Check {
    let sch = Schedule::cosine(1000, 0.008, 0.999).map_err(err)?;
    let mut rng = Stream::new(0, "recovery");
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let t = rng.range_inclusive(0, 1000) as usize;
        let r0: Tensor<f64> = rng.normal_tensor(&[1, 3, 8, 8]);
        let eps: Tensor<f64> = rng.normal_tensor(&[1, 3, 8, 8]);
        let r_t = r0.axpby(sch.rho_bar(t).sqrt(), &eps, sch.sigma_bar(t)).map_err(err)?;
        let v = v_target(&r0, &eps, t, &sch).map_err(err)?;
        let (r0_hat, eps_hat) = recover(&r_t, &v, t, &sch).map_err(err)?;
        worst = worst.max(r0_hat.max_abs_diff(&r0).map_err(err)?).max(eps_hat.max_abs_diff(&eps).map_err(err)?);
    }
    let took = start.elapsed();
    Ok((
        worst < RECOVERY_TOL && took < RECOVERY_BUDGET,
        format!("1000 triples, max error {worst:.2e} (< {RECOVERY_TOL:e}), {:.3} s (< 1 s)", took.as_secs_f64()),
    ))
}

/// Composes single forward transitions and compares moments against the
/// closed-form marginal at a quarter, half and all of the horizon.
fn marginal() -> Check {
    let sch = Schedule::cosine(MARGINAL_STEPS, 0.008, 0.999).map_err(err)?;
    let shape = [1, 2, 8, 8];
    let y = random_labels(1, 1, 2, 8, 8);
    let p = random_prior(2, &shape);
    let checkpoints = [MARGINAL_STEPS / 4, MARGINAL_STEPS / 2, MARGINAL_STEPS];
    let chunk = 1000;
    let y_rep = y.tensor().repeat_batch(chunk);
    let p_rep = p.repeat_batch(chunk);
    let inner = 128;
    let mut sum = vec![vec![0.0f64; inner]; 3];
    let mut sq = vec![vec![0.0f64; inner]; 3];
    let mut noise = Stream::new(3, "composition");
    let start = Instant::now();
    for _ in 0..MARGINAL_CHAINS / chunk {
        let mut state = DiffusionState { s: y_rep.clone(), t: 0 };
        for _ in 0..MARGINAL_STEPS {
            let eps = noise.normal_tensor(&[chunk, 2, 8, 8]);
            state = q_step(&state, &p_rep, &eps, &sch, ForwardForm::Corrected).map_err(err)?;
            if let Some(k) = checkpoints.iter().position(|&c| c == state.t) {
                for (i, &v) in state.s.data().iter().enumerate() {
                    sum[k][i % inner] += v;
                    sq[k][i % inner] += v * v;
                }
            }
        }
    }
    let took = start.elapsed();
    let n = MARGINAL_CHAINS as f64;
    let mut pass = took < MARGINAL_BUDGET;
    let mut parts = Vec::new();
    for (k, &t) in checkpoints.iter().enumerate() {
        let mean: Vec<f64> = sum[k].iter().map(|s| s / n).collect();
        let pooled = sq[k].iter().zip(&mean).map(|(q, m)| (q - n * m * m) / (n - 1.0)).sum::<f64>() / inner as f64;
        let exact = q_sample(&y, &p, t, &Tensor::zeros(&shape), &sch).map_err(err)?;
        let mean_err = rel_l2(&mean, exact.s.data());
        let var_err = (pooled / (1.0 - sch.rho_bar(t)) - 1.0).abs();
        pass &= mean_err < MARGINAL_MEAN_TOL && var_err < MARGINAL_VAR_TOL;
        parts.push(format!("t={t} mean {:.2}% var {:.2}%", 100.0 * mean_err, 100.0 * var_err));
    }
    Ok((
        pass,
        format!(
            "T={MARGINAL_STEPS}, {MARGINAL_CHAINS} chains: {} (< 2%, < 3%), {:.1} s (< 30 s)",
            parts.join(", "),
            took.as_secs_f64()
        ),
    ))
}

fn oracle_sampling() -> Check {
    let sch = Schedule::cosine(100, 0.008, 0.999).map_err(err)?;
    let y = random_labels(4, 2, 3, 16, 16);
    let truth = y.indices();
    let oracle = OracleDenoiser::new(y.tensor().clone(), sch.clone()).map_err(err)?;
    let x = Tensor::<f64>::zeros(&[2, 1, 16, 16]);
    let mut worst = 1.0f64;
    for s in [4, 10, 25] {
        let cfg = SamplerConfig {
            sampler: Sampler::Ddim,
            steps: uniform_subset(100, s).map_err(err)?,
            samples: 4,
            posterior: PosteriorMode::Centered,
        };
        let set = sample(PriorSource::Uniform, &oracle, &x, &sch, &cfg, 5).map_err(err)?;
        for m in 0..cfg.samples {
            let mask = argmax_channels(&set.sample(m));
            let hits = mask.iter().zip(&truth).filter(|(a, b)| a == b).count();
            worst = worst.min(hits as f64 / truth.len() as f64);
        }
    }
    Ok((
        worst >= ORACLE_ACCURACY,
        format!("DDIM with the exact denoiser, S in {{4, 10, 25}}: worst pixel accuracy {:.4} (>= {ORACLE_ACCURACY})", worst),
    ))
}

fn gradients(dir: &Path) -> Check {
    let out = commands::gradcheck(GRAD_TOL, 0, &dir.join("gradcheck")).map_err(err)?;
    let worst = out.lines.iter().map(|l| l.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<&str> = out.lines.iter().filter(|l| !l.passed).map(|l| l.name.as_str()).collect();
    Ok((
        out.passed,
        format!(
            "{} checks, worst relative error {worst:.2e} (< {GRAD_TOL:e}){}",
            out.lines.len(),
            if failing.is_empty() { String::new() } else { format!(", failing {failing:?}") }
        ),
    ))
}

fn field(rows: &[Vec<f64>]) -> Tensor<f64> {
    let (n, c) = (rows.len(), rows[0].len());
    Tensor::from_fn(&[1, c, 1, n], |i| rows[i % n][i / n])
}

fn naive_ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let below = xs.iter().filter(|&&y| y < x).count() as f64;
            let equal = xs.iter().filter(|&&y| y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Two-sided Student-t tail by Simpson integration after `x = sqrt(df) tan(theta)`.
fn t_tail(t: f64, df: usize) -> f64 {
    let f = |th: f64| th.cos().powi(df as i32 - 1);
    let simpson = |a: f64, b: f64| {
        let n = 200_000;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let half = std::f64::consts::FRAC_PI_2;
    let th0 = (t.abs() / (df as f64).sqrt()).atan();
    2.0 * simpson(th0, half) / simpson(-half, half)
}

fn metric_fixtures() -> Check {
    let mut bad = Vec::new();
    let mut expect = |name: &str, got: f64, want: f64| {
        if !((got - want).abs() < FIXTURE_TOL) {
            bad.push(format!("{name}: {got} vs {want}"));
        }
    };
    expect("dice", dice(&[1, 1, 0, 0], &[1, 0, 1, 0], 1).map_err(err)?, 0.5);

    let half = field(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
    let sure = field(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let mixed = field(&[vec![0.5, 0.5], vec![0.75, 0.25]]);
    expect("nll uniform", nll(&half, &[0, 1]).map_err(err)?, 2f64.ln());
    expect("nll certain", nll(&sure, &[0, 1]).map_err(err)?, 0.0);
    // -(ln 0.5 + ln 0.25) / 2
    expect("nll mixed", nll(&mixed, &[1, 1]).map_err(err)?, -(0.5f64.ln() + 0.25f64.ln()) / 2.0);

    let p = field(&[vec![0.4, 0.6], vec![0.45, 0.55], vec![0.1, 0.9], vec![0.2, 0.8]]);
    // Four bins: 0.5 |0.5 - 0.575| + 0.5 |1.0 - 0.85|.
    expect("ece four bins", ece(&p, &[1, 0, 1, 1], 4).map_err(err)?, 0.5 * 0.075 + 0.5 * 0.15);
    expect("ece confident right", ece(&sure, &[0, 1], 10).map_err(err)?, 0.0);
    expect("ece confident wrong", ece(&sure, &[1, 0], 10).map_err(err)?, 1.0);

    let a = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
    let b = [2.0, 7.0, 1.0, 8.0, 2.0, 8.0, 1.0, 8.0];
    expect("spearman", spearman(&a, &b).map_err(err)?.value, pearson(&naive_ranks(&a), &naive_ranks(&b)));

    let same = [0.8, 0.7, 0.9];
    expect("t-test equal", paired_t_test(&same, &same).map_err(err)?.p, 1.0);
    expect("t-test zero mean", paired_t_test(&[1.0, -1.0, 1.0, -1.0], &[0.0; 4]).map_err(err)?.p, 1.0);
    let a = [0.81, 0.77, 0.92, 0.64, 0.88, 0.70];
    let b = [0.78, 0.75, 0.85, 0.66, 0.80, 0.69];
    let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = mean / (sd / n.sqrt());
    let r = paired_t_test(&a, &b).map_err(err)?;
    expect("t statistic", r.t, t);
    expect("t p-value", r.p, t_tail(t, 5));

    let case = |id: usize, dsc: f64| CaseResult {
        case: id,
        dsc: vec![1.0, dsc],
        dsc_mean: dsc,
        nll: 0.3,
        ece: 0.1,
        corr: 0.2,
        corr_degenerate: false,
        samples: 8,
    };
    let report = summarize(&[case(0, 0.6), case(1, 0.8)]).map_err(err)?;
    expect("sample std", report.dsc.std, 0.02f64.sqrt());

    Ok((bad.is_empty(), if bad.is_empty() { format!("16 fixtures within {FIXTURE_TOL:e}") } else { bad.join("; ") }))
}

fn named(cfg: &RunConfig, name: &str) -> (String, PathBuf) {
    (name.to_string(), cfg.out_dir.clone())
}

fn default_run(root: &Path, name: &str) -> RunConfig {
    RunConfig {
        dataset: root.join("synth.pgrd"),
        out_dir: root.join(name),
        ..RunConfig::default()
    }
}

fn eval_opts(out: PathBuf) -> EvalOptions {
    EvalOptions {
        out,
        select: CaseSelection::default(),
        sampler: SamplerOverrides::default(),
        percent: false,
    }
}

struct Trained {
    full: RunConfig,
    no_pgr: Option<RunConfig>,
    no_dds: Option<RunConfig>,
}

fn end_to_end(root: &Path, trained: &mut Option<Trained>) -> Check {
    let start = Instant::now();
    let full = default_run(root, "pgrd");
    commands::gen(&full).map_err(err)?;
    let out = commands::train(&full).map_err(err)?;
    let eval = commands::eval(&[named(&full, "pgrd")], &eval_opts(root.join("eval_pgrd"))).map_err(err)?;
    let took = start.elapsed();
    *trained = Some(Trained {
        full: full.clone(),
        no_pgr: None,
        no_dds: None,
    });
    let window = 100.min(out.trace.len());
    let avg = |rows: &[pgrd::training::PgrdTraceRow]| rows.iter().map(|r| r.l_vel).sum::<f64>() / rows.len() as f64;
    let first = avg(&out.trace[..window]);
    let last = avg(&out.trace[out.trace.len() - window..]);
    let dsc = eval.runs[0].report.dsc.mean;
    Ok((
        dsc >= DSC_FLOOR && took < END_TO_END_BUDGET,
        format!(
            "{} held-out cases, M={} S={}: DSC {dsc:.4} (>= {DSC_FLOOR}); L_vel {first:.4} -> {last:.4} over {} steps; {:.0} s total (< 30 min)",
            eval.runs[0].cases.len(),
            full.sampler.samples,
            full.sampler.steps,
            out.trace.len(),
            took.as_secs_f64()
        ),
    ))
}

fn ablations(root: &Path, trained: &mut Option<Trained>) -> Check {
    let t = trained.as_mut().ok_or("end-to-end run unavailable")?;
    let mut no_pgr = default_run(root, "no_pgr");
    no_pgr.train.no_pgr = true;
    let mut no_dds = default_run(root, "no_dds");
    no_dds.train.no_dds = true;
    commands::train(&no_pgr).map_err(err)?;
    commands::train(&no_dds).map_err(err)?;
    t.no_pgr = Some(no_pgr.clone());
    t.no_dds = Some(no_dds.clone());
    let runs = [named(&t.full, "pgrd"), named(&no_pgr, "no_pgr"), named(&no_dds, "no_dds")];
    let out = commands::eval(&runs, &eval_opts(root.join("eval_ablations"))).map_err(err)?;
    let cases = out.runs[0].cases.len();
    let test = |b: &str, metric: &str| {
        out.comparisons
            .iter()
            .find(|c| c.a == "pgrd" && c.b == b)
            .and_then(|c| c.metrics.iter().find(|m| m.metric == metric))
            .map(|m| m.test)
            .ok_or_else(|| format!("no pgrd vs {b} {metric} comparison"))
    };
    let mut pass = cases >= ABLATION_MIN_CASES;
    let mut parts = Vec::new();
    for (b, metric, higher) in [("no_pgr", "dsc", true), ("no_dds", "dsc", true), ("no_pgr", "ece", false)] {
        let r = test(b, metric)?;
        let direction = if higher { r.mean_difference >= 0.0 } else { r.mean_difference <= 0.0 };
        let ok = direction && r.p < ABLATION_P;
        pass &= ok;
        parts.push(format!(
            "{metric} vs {b} diff {:+.4} p={:.3}{}",
            r.mean_difference,
            r.p,
            if ok { "" } else { " (not met)" }
        ));
    }
    let means: Vec<String> = out
        .runs
        .iter()
        .map(|r| format!("{} dsc {:.4} ece {:.4}", r.name, r.report.dsc.mean, r.report.ece.mean))
        .collect();
    Ok((pass, format!("{cases} cases; {}; {}", parts.join(", "), means.join(", "))))
}

fn steps_to_fraction(rows: &[(usize, f64)]) -> Option<usize> {
    let top = rows.iter().find(|(s, _)| *s == 200)?.1;
    rows.iter().find(|(_, d)| *d >= BENCH_FRACTION * top).map(|(s, _)| *s)
}

fn step_efficiency(root: &Path, trained: &Option<Trained>) -> Check {
    let t = trained.as_ref().ok_or("trained runs unavailable")?;
    let no_pgr = t.no_pgr.as_ref().ok_or("no_pgr run unavailable")?;
    let opts = BenchOptions {
        out: root.join("bench"),
        steps: BENCH_STEPS.to_vec(),
        select: CaseSelection {
            cases: Vec::new(),
            limit: Some(BENCH_CASES),
        },
        sampler: SamplerOverrides {
            samples: Some(BENCH_SAMPLES),
            ..SamplerOverrides::default()
        },
    };
    let rows = commands::bench_steps(&[named(&t.full, "pgrd"), named(no_pgr, "no_pgr")], &opts).map_err(err)?;
    let curve = |m: &str| -> Vec<(usize, f64)> { rows.iter().filter(|r| r.model == m).map(|r| (r.steps, r.dsc_mean)).collect() };
    let (a, b) = (curve("pgrd"), curve("no_pgr"));
    let (sa, sb) = (steps_to_fraction(&a).ok_or("no pgrd curve")?, steps_to_fraction(&b).ok_or("no no_pgr curve")?);
    let show = |c: &[(usize, f64)]| c.iter().map(|(s, d)| format!("{s}:{d:.3}")).collect::<Vec<_>>().join(" ");
    Ok((
        2 * sa <= sb,
        format!(
            "S to 95% of S=200 DSC: pgrd {sa}, no_pgr {sb} (need pgrd <= half); pgrd [{}] no_pgr [{}]",
            show(&a),
            show(&b)
        ),
    ))
}

fn mode_coverage() -> Check {
    let fixture = two_mode_fixture();
    let data = Dataset::from_fixture(&fixture);
    let cfg = TrainConfig::default();
    let sch = ScheduleSpec::default().build().map_err(err)?;
    let prior = train_prior(fresh_prior::<f32>(&data, &cfg).map_err(err)?, &data, &[0], &cfg).map_err(err)?;
    let net = DenoiserNet::<f32>::new(cfg.denoiser_arch(&DenoiserArch::default()), cfg.denoiser_init_seed()).map_err(err)?;
    let run = train_pgrd(net, Some(&prior.net), &data, &[0], &sch, &cfg).map_err(err)?;
    let sc = SamplerConfig {
        sampler: Sampler::Ddim,
        steps: uniform_subset(sch.steps(), 50).map_err(err)?,
        samples: MODE_SAMPLES,
        posterior: PosteriorMode::Centered,
    };
    let set = sample(PriorSource::Net(&prior.net), &run.net, &data.images::<f32>(&[0]), &sch, &sc, 0).map_err(err)?;
    let with = (0..MODE_SAMPLES)
        .filter(|&m| fixture.includes_satellite(&argmax_channels(&set.sample(m))))
        .count();
    let freq = with as f64 / MODE_SAMPLES as f64;
    let ok = |f: f64| (MODE_BAND.0..=MODE_BAND.1).contains(&f);
    Ok((
        ok(freq) && ok(1.0 - freq),
        format!(
            "{MODE_SAMPLES} samples: {with} with the satellite ({freq:.3}), {} without ({:.3}); band [{}, {}]",
            MODE_SAMPLES - with,
            1.0 - freq,
            MODE_BAND.0,
            MODE_BAND.1
        ),
    ))
}

fn small(root: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        schedule: ScheduleSpec::Cosine {
            steps: 100,
            s: 0.008,
            clip: 0.999,
        },
        arch: ArchSpec {
            denoiser_widths: [4, 4, 8],
            time_dim: 8,
            prior_width: 4,
            prior_layers: 2,
        },
        dataset: root.join("small.pgrd"),
        out_dir: root.join("small_a"),
        ..RunConfig::default()
    };
    cfg.train.dds_steps = vec![25, 50, 75];
    cfg.train.prior_steps = 40;
    cfg.train.denoiser_steps = 60;
    cfg.data.cases = 12;
    cfg.data.test_cases = 4;
    cfg.data.case.size = 16;
    cfg.sampler.steps = 10;
    cfg.sampler.samples = 3;
    cfg
}

/// Everything the run wrote, as (relative path, hash) pairs; manifests are
/// skipped since they record absolute paths.
fn artifact_hashes(dir: &Path) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(err)? {
            let path = entry.map_err(err)?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "manifest.json" && n != "config.json") {
                let rel = path.strip_prefix(dir).map_err(err)?.display().to_string();
                out.push((rel, file_hash(&path).map_err(err)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn replay(root: &Path) -> Check {
    let first = small(root);
    commands::gen(&first).map_err(err)?;
    let pipeline = |cfg: &RunConfig| -> Result<(), String> {
        commands::train(cfg).map_err(err)?;
        commands::sample_cases(&cfg.out_dir, &CaseSelection::default(), &SamplerOverrides::default(), &cfg.out_dir.join("samples"))
            .map_err(err)?;
        // Same run name for both, since reports and the table embed it.
        commands::eval(&[("small".into(), cfg.out_dir.clone())], &eval_opts(cfg.out_dir.join("eval"))).map_err(err)?;
        Ok(())
    };
    pipeline(&first)?;
    let mut second = RunConfig::load(&first.out_dir.join(commands::CONFIG_FILE)).map_err(err)?;
    second.out_dir = root.join("small_b");
    pipeline(&second)?;
    let a = artifact_hashes(&first.out_dir)?;
    let b = artifact_hashes(&second.out_dir)?;
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    Ok((
        a.len() == b.len() && differing.is_empty(),
        format!(
            "{} artifacts (checkpoints, losses, sample archives, reports) {}",
            a.len(),
            if differing.is_empty() { "bit-identical".to_string() } else { format!("differ: {differing:?}") }
        ),
    ))
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let root = dir.path();
    // cargo passes its own flags (e.g. `--nocapture`) through; ignore them.
    let only = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut h = Harness { only, ran: 0, failed: 0 };
    let mut trained = None;
    h.run("C1", "velocity target inverts exactly", recovery);
    h.run("C2", "composed forward steps match the closed-form marginal", marginal);
    h.run("C3", "exact-denoiser DDIM reproduces the labels", oracle_sampling);
    h.run("C4", "analytic gradients match finite differences", || gradients(root));
    h.run("C5", "metric fixtures", metric_fixtures);
    h.run("C6", "end-to-end segmentation quality", || end_to_end(root, &mut trained));
    h.run("C7", "both ablations lose to the full model", || ablations(root, &mut trained));
    h.run("C8", "prior guidance cuts the steps needed", || step_efficiency(root, &trained));
    h.run("C9", "both modes of an ambiguous case are sampled", mode_coverage);
    h.run("C10", "replay from a saved config is bit-identical", || replay(root));
    println!("{} of {} criteria passed", h.ran - h.failed, h.ran);
    let strict = std::env::var("PGRD_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && h.failed > 0 {
        std::process::exit(1);
    }
}
