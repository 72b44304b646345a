use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pgrd::diffusion::Sampler;
use pgrd_cli::commands::{self, BenchOptions, CaseSelection, EvalOptions, SamplerOverrides};
use pgrd_cli::{CliError, RunConfig};

/// Prior-guided residual diffusion for probabilistic segmentation.
#[derive(Parser)]
#[command(name = "pgrd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-rater dataset.
    Gen(ConfigArgs),
    /// Train the prior, freeze it, then train the denoiser.
    Train(ConfigArgs),
    /// Write per-case sample archives of a trained run.
    Sample {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        select: SelectArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        /// Output directory [default: <run>/samples].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score runs on held-out cases and compare them pairwise.
    Eval {
        /// `name=dir`, or a bare directory named after its last component.
        #[arg(long = "run", required = true)]
        runs: Vec<String>,
        #[command(flatten)]
        select: SelectArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        /// Show DSC, NLL and ECE ×100 in the table.
        #[arg(long)]
        percent: bool,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Mean Dice against the number of reverse steps.
    BenchSteps {
        #[arg(long = "run", required = true)]
        runs: Vec<String>,
        /// Comma-separated step counts.
        #[arg(long = "steps-list", value_delimiter = ',', default_value = "1,2,5,10,25,50,100,200")]
        steps: Vec<usize>,
        #[command(flatten)]
        select: SelectArgs,
        #[arg(long, value_enum)]
        sampler: Option<SamplerKind>,
        #[arg(long = "samples")]
        samples: Option<usize>,
        #[arg(long = "tau-out")]
        tau_out: Option<f64>,
        #[arg(long, default_value = "bench")]
        out: PathBuf,
    },
    /// Finite-difference check of every op and the full objective.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "gradcheck")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerKind {
    Ddim,
    DdpmFixed,
    DdpmTilde,
}

impl From<SamplerKind> for Sampler {
    fn from(k: SamplerKind) -> Self {
        match k {
            SamplerKind::Ddim => Sampler::Ddim,
            SamplerKind::DdpmFixed => Sampler::DdpmFixed,
            SamplerKind::DdpmTilde => Sampler::DdpmTilde,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Ablation {
    #[value(name = "no_pgr")]
    NoPgr,
    #[value(name = "no_dds")]
    NoDds,
}

#[derive(Args)]
struct SamplerArgs {
    #[arg(long, value_enum)]
    sampler: Option<SamplerKind>,
    /// Reverse steps S.
    #[arg(long)]
    steps: Option<usize>,
    /// Samples per image M.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long = "tau-out")]
    tau_out: Option<f64>,
}

impl SamplerArgs {
    fn overrides(&self) -> SamplerOverrides {
        SamplerOverrides {
            kind: self.sampler.map(Into::into),
            steps: self.steps,
            samples: self.samples,
            tau_out: self.tau_out,
        }
    }
}

#[derive(Args)]
struct SelectArgs {
    /// Case index; repeatable. Defaults to the held-out split.
    #[arg(long = "case")]
    cases: Vec<usize>,
    /// Keep only the first N selected cases.
    #[arg(long)]
    limit: Option<usize>,
}

impl SelectArgs {
    fn selection(&self) -> CaseSelection {
        CaseSelection {
            cases: self.cases.clone(),
            limit: self.limit,
        }
    }
}

/// A JSON config file plus flags that override its fields.
#[derive(Args)]
struct ConfigArgs {
    /// RunConfig JSON; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sampling seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "train-seed")]
    train_seed: Option<u64>,
    #[arg(long = "data-seed")]
    data_seed: Option<u64>,
    #[arg(long)]
    cases: Option<usize>,
    #[arg(long = "test-cases")]
    test_cases: Option<usize>,
    /// Image side length.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    raters: Option<usize>,
    /// Half-width of the rater disagreement band, in pixels.
    #[arg(long)]
    ambiguity: Option<f64>,
    #[arg(long = "prior-steps")]
    prior_steps: Option<usize>,
    #[arg(long = "denoiser-steps")]
    denoiser_steps: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long = "learning-rate")]
    learning_rate: Option<f64>,
    /// Ablation; repeatable.
    #[arg(long, value_enum)]
    ablate: Vec<Ablation>,
    #[command(flatten)]
    sampler: SamplerArgs,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($field:expr, $flag:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        set!(cfg.out_dir, self.out);
        set!(cfg.dataset, self.data);
        set!(cfg.seed, self.seed);
        set!(cfg.train.seed, self.train_seed);
        set!(cfg.data.seed, self.data_seed);
        set!(cfg.data.cases, self.cases);
        set!(cfg.data.test_cases, self.test_cases);
        set!(cfg.data.case.size, self.size);
        set!(cfg.data.case.classes, self.classes);
        set!(cfg.data.case.raters, self.raters);
        set!(cfg.data.case.ambiguity, self.ambiguity);
        set!(cfg.train.prior_steps, self.prior_steps);
        set!(cfg.train.denoiser_steps, self.denoiser_steps);
        set!(cfg.train.lambda, self.lambda);
        set!(cfg.train.learning_rate, self.learning_rate);
        cfg.train.no_pgr |= self.ablate.contains(&Ablation::NoPgr);
        cfg.train.no_dds |= self.ablate.contains(&Ablation::NoDds);
        cfg.sampler = self.sampler.overrides().apply(&cfg.sampler);
        Ok(cfg)
    }
}

fn parse_runs(runs: &[String]) -> Result<Vec<(String, PathBuf)>, CliError> {
    runs.iter()
        .map(|r| match r.split_once('=') {
            Some((name, dir)) => Ok((name.to_string(), PathBuf::from(dir))),
            None => {
                let dir = PathBuf::from(r);
                let name = dir
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .ok_or_else(|| CliError::Usage(format!("cannot name run {r:?}; use name=dir")))?;
                Ok((name, dir))
            }
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(args) => {
            let cfg = args.resolve()?;
            let out = commands::gen(&cfg)?;
            println!("cases: {}", out.cases);
            println!("checksum: {}", out.checksum);
            println!("written: {}", out.path.display());
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let out = commands::train(&cfg)?;
            match out.prior_steps {
                Some(n) => println!(
                    "prior: {n} steps{}",
                    if out.prior_plateaued { ", stopped on plateau" } else { "" }
                ),
                None => println!("prior: uniform (no_pgr)"),
            }
            if let Some(last) = out.trace.last() {
                println!("denoiser: {} steps, final l_total {:.5}", out.trace.len(), last.l_total);
            }
            println!("checkpoint hash: {}", out.denoiser_hash);
            println!("written: {}", out.out_dir.display());
        }
        Command::Sample { run, select, sampler, out } => {
            let out = out.unwrap_or_else(|| run.join("samples"));
            let paths = commands::sample_cases(&run, &select.selection(), &sampler.overrides(), &out)?;
            println!("{} sample archives written to {}", paths.len(), out.display());
        }
        Command::Eval { runs, select, sampler, percent, out } => {
            let runs = parse_runs(&runs)?;
            let opts = EvalOptions {
                out,
                select: select.selection(),
                sampler: sampler.overrides(),
                percent,
            };
            let outcome = commands::eval(&runs, &opts)?;
            print!("{}", outcome.table);
            for c in &outcome.comparisons {
                for m in &c.metrics {
                    println!(
                        "{} vs {} {}: mean diff {:+.5}, t {:.3}, p {:.4}",
                        c.a, c.b, m.metric, m.test.mean_difference, m.test.t, m.test.p
                    );
                }
            }
            println!("written: {}", opts.out.display());
        }
        Command::BenchSteps { runs, steps, select, sampler, samples, tau_out, out } => {
            let runs = parse_runs(&runs)?;
            let opts = BenchOptions {
                out,
                steps,
                select: select.selection(),
                sampler: SamplerOverrides {
                    kind: sampler.map(Into::into),
                    steps: None,
                    samples,
                    tau_out,
                },
            };
            let rows = commands::bench_steps(&runs, &opts)?;
            println!("model,S,dsc_mean,dsc_std");
            for r in rows {
                println!("{},{},{:.5},{:.5}", r.model, r.steps, r.dsc_mean, r.dsc_std);
            }
            println!("written: {}", opts.out.join(commands::BENCH_FILE).display());
        }
        Command::Gradcheck { tolerance, seed, out } => {
            let outcome = commands::gradcheck(tolerance, seed, &out)?;
            for l in &outcome.lines {
                println!("{:<28} {:.3e}  {}", l.name, l.max_rel_error, if l.passed { "ok" } else { "FAILED" });
            }
            if !outcome.passed {
                return Err(CliError::Numeric(format!("gradient check failed at tolerance {tolerance}")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

