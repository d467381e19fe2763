use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use guidelab::analysis::report::{read_metrics_csv, write_curve_csv, write_error_report_csv};
use guidelab::analysis::{hindsight_judge, CurvePoint, ErrorReport, JudgeInput};
use guidelab::env::{EnvKind, EnvSpec};
use guidelab::error::{Error, Result};
use guidelab::policy::PolicyCheckpoint;
use guidelab::rollout::RolloutMode;
use guidelab::trainer::{self, ExperimentConfig, RunOptions, TrainState, Trainer, Variant};
use guidelab::trajectory::read_jsonl;

#[derive(Parser)]
#[command(name = "guidelab", version, about = "Self-guided group-relative policy optimization on toy environments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one variant.
    Train(TrainArgs),
    /// Score a saved policy on held-out tasks.
    Eval(EvalArgs),
    /// Run the seven-variant schedule ablation.
    Ablate(AblateArgs),
    /// Error reports from trajectory logs, curves from metrics.
    Analyze(AnalyzeArgs),
    /// Score hindsight-judge inputs.
    Judge(JudgeArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.total_steps=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Environment (replaces the config's env section with its defaults).
    #[arg(long)]
    env: Option<EnvKind>,
    /// Episodes run in parallel within a run.
    #[arg(long)]
    threads: Option<usize>,
}

impl ConfigArgs {
    fn load(&self, variant: Option<Variant>, seeds: &[u64]) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load_with_overrides(self.config.as_deref(), &[])?;
        if let Some(v) = variant {
            cfg.variant = v;
        }
        if let Some(kind) = self.env {
            cfg.env = EnvSpec::default_for(kind);
        }
        if !seeds.is_empty() {
            cfg.train.seeds = seeds.to_vec();
        }
        if let Some(t) = self.threads {
            cfg.train.max_parallel_episodes = t;
        }
        cfg.with_overrides(&self.overrides)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    variant: Option<Variant>,
    /// Run seed; repeat for several (default: the config's seed list).
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Run directory (default `runs/<variant>-<env>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Append every collected trajectory to this JSONL file.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from a training-state checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many steps.
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Policy checkpoint or training-state checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "keydoor")]
    env: EnvKind,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Act without generating guidance (for baseline policies).
    #[arg(long)]
    no_guidance: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Run these variants instead of the seven-row suite.
    #[arg(long = "variant")]
    variants: Vec<Variant>,
    /// Directory for `ablation.csv` and `curve.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Trajectory JSONL log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Metrics CSV written by `train`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Variant label for the error report (default: log file stem).
    #[arg(long)]
    variant: Option<String>,
    /// Output directory for `errors.csv` / `curve.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct JudgeArgs {
    /// JSONL of `{student_label, oracle_label, reason_quality}`.
    #[arg(long)]
    input: PathBuf,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Judge(a) => cmd_judge(a),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let opts = |dir: PathBuf| RunOptions {
        run_dir: Some(dir),
        trajectory_log: a.log.clone(),
        stop_after: a.stop_after,
    };
    if let Some(state) = &a.resume {
        let st = TrainState::load(state)?;
        let dir = a.out.clone().unwrap_or_else(|| default_run_dir(&st.config));
        let r = trainer::run(Trainer::from_state(st)?, &opts(dir.clone()))?;
        report_run(&r, &dir);
        return Ok(());
    }
    let cfg = a.config.load(a.variant, &a.seeds)?;
    let dir = a.out.clone().unwrap_or_else(|| default_run_dir(&cfg));
    for &seed in &cfg.train.seeds {
        let r = trainer::train(&cfg, seed, &opts(dir.clone()))?;
        report_run(&r, &dir);
    }
    Ok(())
}

fn default_run_dir(cfg: &ExperimentConfig) -> PathBuf {
    let name = cfg.variant.to_string().replace(['(', ')'], "");
    PathBuf::from("runs").join(format!("{name}-{}", cfg.env.kind()))
}

fn report_run(r: &trainer::RunResult, dir: &Path) {
    println!(
        "{} seed {}: success {:.3} score {:.3} length {:.2} ({} steps) -> {}",
        r.variant,
        r.seed,
        r.final_eval.success_rate,
        r.final_eval.mean_score,
        r.final_eval.mean_length,
        r.metrics.last().map(|m| m.step).unwrap_or(0),
        dir.display()
    );
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let text = fs::read_to_string(&a.checkpoint)?;
    let (params, mode, spec) = match PolicyCheckpoint::from_json(&text) {
        Ok(ck) => {
            let mode = if a.no_guidance {
                RolloutMode::BaselineNoGuidance
            } else {
                RolloutMode::GuidanceConditioned
            };
            (ck.params, mode, EnvSpec::default_for(a.env))
        }
        Err(_) => {
            let st = TrainState::load(&a.checkpoint)?;
            let mode = st.config.variant.rollout_mode();
            (st.params, mode, st.config.env)
        }
    };
    let fdim = spec.feature_map().dim();
    if params.feature_dim != fdim || params.num_actions != spec.num_actions() {
        return Err(Error::Dimension(format!(
            "checkpoint expects {} features / {} actions, {} has {fdim} / {}",
            params.feature_dim,
            params.num_actions,
            spec.kind(),
            spec.num_actions()
        )));
    }
    let m = trainer::evaluate(&params, &spec, mode, a.episodes, a.seed)?;
    println!("{}", serde_json::to_string(&m)?);
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let cfg = a.config.load(None, &a.seeds)?;
    let table = if a.variants.is_empty() {
        trainer::run_ablation_suite(&cfg)
    } else {
        trainer::run_variants(&cfg, &a.variants)
    };
    print!("{}", table.to_text());
    for r in &table.rows {
        for (seed, err) in &r.failures {
            eprintln!("{} seed {seed} failed: {err}", r.variant);
        }
    }
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        table.write_csv(BufWriter::new(File::create(dir.join("ablation.csv"))?))?;
        let curve: Vec<CurvePoint> = table.rows.iter().flat_map(|r| r.curves.iter().cloned()).collect();
        write_curve_csv(BufWriter::new(File::create(dir.join("curve.csv"))?), &curve)?;
    }
    if table.rows.iter().all(|r| r.final_success.is_empty()) {
        return Err(Error::InvalidValue("every ablation run failed".into()));
    }
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    if a.log.is_none() && a.metrics.is_none() {
        return Err(Error::config("analyze", "pass --log and/or --metrics"));
    }
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
    }
    if let Some(log) = &a.log {
        let trajs = read_jsonl(BufReader::new(File::open(log)?))?;
        let variant = a.variant.clone().unwrap_or_else(|| {
            log.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "unknown".into())
        });
        let reports = ErrorReport::by_env(&variant, &trajs)?;
        for r in &reports {
            println!("{} on {}: {} episodes, {} failed", r.variant, r.env, r.episodes, r.failures);
            for (flag, pct) in r.percentages() {
                println!("  {flag:<22} {pct:6.2}%");
            }
        }
        match &a.out {
            Some(dir) => write_error_report_csv(BufWriter::new(File::create(dir.join("errors.csv"))?), &reports)?,
            None => write_error_report_csv(std::io::stdout().lock(), &reports)?,
        }
    }
    if let Some(path) = &a.metrics {
        let rows = read_metrics_csv(BufReader::new(File::open(path)?))?;
        let curve: Vec<CurvePoint> = rows.iter().map(CurvePoint::from).collect();
        match &a.out {
            Some(dir) => write_curve_csv(BufWriter::new(File::create(dir.join("curve.csv"))?), &curve)?,
            None => write_curve_csv(std::io::stdout().lock(), &curve)?,
        }
    }
    Ok(())
}

fn cmd_judge(a: JudgeArgs) -> Result<()> {
    let input = BufReader::new(File::open(&a.input)?);
    let mut out = std::io::stdout().lock();
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let j: JudgeInput = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidValue(format!("{} line {}: {e}", a.input.display(), i + 1)))?;
        let s = hindsight_judge(&j);
        writeln!(out, "{s}")?;
        total += s;
        n += 1;
    }
    if n > 0 {
        eprintln!("{n} inputs, mean score {}", total / n as f64);
    }
    Ok(())
}
