//! `meow`: train, evaluate, compare soft-value estimators and check
//! gradients.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
//! arguments, 3 training diverged (non-finite loss or gradient).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use meow::checkpoint;
use meow::checks::{gradcheck_suite, GradCheckOptions};
use meow::config::{ActionMode, EnvConfig, EnvName, RunConfig};
use meow::envs::{self, Episode};
use meow::model::MeowModel;
use meow::oracle::{estimator_report, FlowRef, GridSpec};
use meow::run;
use meow::{MeowError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "meow", version, about = "Max-entropy RL with an energy-based flow policy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed, each into `<out>/seed-<N>`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// One seed or a comma-separated list; overrides the config file.
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Roll out a checkpoint and print a JSON summary.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Environment settings; `--env` overrides the name.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        env: Option<EnvName>,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value = "deterministic")]
        mode: ActionMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write per-step trajectories as CSV.
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
    /// Monte Carlo soft-value estimators against quadrature, as CSV.
    ValueCompare {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `self`, `init` (a freshly initialized flow) or a checkpoint path.
        #[arg(long, default_value = "self")]
        proposal: String,
        /// Comma-separated state; defaults to the origin.
        #[arg(long, value_delimiter = ',')]
        state: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "4,16,64,256,1024")]
        m_list: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of Q, V, V^clip and the loss.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Check at these parameters instead of a fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn worker_count(jobs: usize) -> usize {
    let cap = std::env::var("MEOW_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cap.min(jobs).max(1)
}

fn train(config: Option<&Path>, seeds: &[u64], out: &Path) -> Result<()> {
    let base = load_config(config)?;
    let seeds = if seeds.is_empty() {
        vec![base.seed]
    } else {
        seeds.to_vec()
    };
    let next = AtomicUsize::new(0);
    let failures = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..worker_count(seeds.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&seed) = seeds.get(i) else { break };
                let cfg = RunConfig { seed, ..base.clone() };
                let dir = out.join(format!("seed-{seed}"));
                let result = run::train(&cfg, &dir, &mut |row| {
                    eprintln!("seed {seed} step {} eval_return {:.3}", row.step, row.eval_return);
                });
                match result {
                    Ok(s) => println!(
                        "seed {seed}: return {:.3} -> {:.3}, final distance {}",
                        s.initial.mean_return,
                        s.last.mean_return,
                        s.last.mean_final_distance.map_or("n/a".into(), |d| format!("{d:.3}"))
                    ),
                    Err(e) => failures
                        .lock()
                        .expect("no worker panics while holding the lock")
                        .push((seed, e)),
                }
            });
        }
    });
    let mut failures = failures.into_inner().expect("workers have joined");
    failures.sort_by_key(|(seed, _)| *seed);
    for (seed, e) in &failures {
        eprintln!("seed {seed}: {e}");
    }
    match failures.into_iter().next() {
        Some((_, e)) => Err(e),
        None => Ok(()),
    }
}

fn trajectories_csv(eps: &[Episode]) -> String {
    let (sd, ad) = eps
        .first()
        .map(|e| (e.states[0].len(), e.actions.first().map_or(0, Vec::len)))
        .unwrap_or((0, 0));
    let mut header = vec!["episode".to_string(), "t".to_string()];
    header.extend((0..sd).map(|i| format!("s{i}")));
    header.extend((0..ad).map(|i| format!("a{i}")));
    header.push("reward".into());
    let mut out = header.join(",") + "\n";
    for (k, ep) in eps.iter().enumerate() {
        for (t, s) in ep.states.iter().enumerate() {
            let mut cells = vec![k.to_string(), t.to_string()];
            cells.extend(s.iter().map(f64::to_string));
            match (ep.actions.get(t), ep.rewards.get(t)) {
                (Some(a), Some(r)) => {
                    cells.extend(a.iter().map(f64::to_string));
                    cells.push(r.to_string());
                }
                _ => cells.extend(std::iter::repeat_n(String::new(), ad + 1)),
            }
            out.push_str(&cells.join(","));
            out.push('\n');
        }
    }
    out
}

struct EvalArgs {
    checkpoint: PathBuf,
    config: Option<PathBuf>,
    env: Option<EnvName>,
    episodes: usize,
    mode: ActionMode,
    seed: u64,
    trajectories: Option<PathBuf>,
}

fn eval(args: EvalArgs) -> Result<()> {
    let (model, params) = checkpoint::load(&args.checkpoint)?;
    let mut env_cfg: EnvConfig = load_config(args.config.as_deref())?.env;
    if let Some(name) = args.env {
        env_cfg.name = name;
    }
    let env = envs::make_env(&env_cfg);
    let spec = env.spec();
    if spec.state_dim != model.state_dim() || spec.action_dim != model.action_dim() {
        return Err(MeowError::Checkpoint(format!(
            "checkpoint is for state/action dims {}/{}, environment {} has {}/{}",
            model.state_dim(),
            model.action_dim(),
            env_cfg.name.as_str(),
            spec.state_dim,
            spec.action_dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (summary, eps) = envs::evaluate(env.as_ref(), &model.flow, &params, args.episodes, args.mode, &mut rng)?;
    if let Some(path) = &args.trajectories {
        std::fs::write(path, trajectories_csv(&eps))?;
    }
    let text = serde_json::to_string_pretty(&summary).map_err(|e| MeowError::Checkpoint(e.to_string()))?;
    println!("{text}");
    Ok(())
}

struct CompareArgs {
    checkpoint: PathBuf,
    proposal: String,
    state: Vec<f64>,
    m_list: Vec<usize>,
    trials: usize,
    seed: u64,
    out: Option<PathBuf>,
}

fn value_compare(args: CompareArgs) -> Result<()> {
    let (model, params) = checkpoint::load(&args.checkpoint)?;
    let proposal: Option<(MeowModel, _)> = match args.proposal.as_str() {
        "self" => None,
        "init" => {
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            Some(MeowModel::new(
                model.state_dim(),
                model.action_dim(),
                model.config(),
                &mut rng,
            )?)
        }
        path => Some(checkpoint::load(Path::new(path))?),
    };
    let target = FlowRef::new(&model.flow, &params);
    let prop = proposal.as_ref().map_or(target, |(m, p)| FlowRef::new(&m.flow, p));
    let state = if args.state.is_empty() {
        vec![0.0; model.state_dim()]
    } else {
        args.state
    };
    if state.len() != model.state_dim() {
        return Err(MeowError::Config(format!(
            "--state has {} values, the model expects {}",
            state.len(),
            model.state_dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let report = estimator_report(
        target,
        prop,
        &state,
        &args.m_list,
        args.trials,
        GridSpec::default(),
        &mut rng,
    )?;
    let csv = report.to_csv();
    match &args.out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    eprintln!("quadrature value {}", report.reference);
    Ok(())
}

fn gradcheck(config: Option<&Path>, ckpt: Option<&Path>, seed: u64) -> Result<bool> {
    let cfg = load_config(config)?;
    let (model, params) = match ckpt {
        Some(path) => checkpoint::load(path)?,
        None => {
            let env = envs::make_env(&cfg.env);
            let spec = env.spec();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            MeowModel::new(spec.state_dim, spec.action_dim, &cfg.model, &mut rng)?
        }
    };
    let opts = GradCheckOptions {
        gamma: cfg.trainer.gamma,
        seed,
        ..GradCheckOptions::default()
    };
    let report = gradcheck_suite(&model, &params, &params, &opts)?;
    let mut ok = true;
    for c in &report {
        ok &= c.passed();
        println!(
            "{:<8} max_rel_error {:.3e} coords {:>5} {}",
            c.name,
            c.max_rel_error,
            c.coords_checked,
            if c.passed() { "PASS" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn exit_code(e: &MeowError) -> ExitCode {
    match e {
        MeowError::Config(_) => ExitCode::from(2),
        MeowError::Diverged { .. } | MeowError::NonFinite { .. } => ExitCode::from(3),
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, seed, out } => train(config.as_deref(), &seed, &out).map(|_| true),
        Command::Eval {
            checkpoint,
            config,
            env,
            episodes,
            mode,
            seed,
            trajectories,
        } => eval(EvalArgs {
            checkpoint,
            config,
            env,
            episodes,
            mode,
            seed,
            trajectories,
        })
        .map(|_| true),
        Command::ValueCompare {
            checkpoint,
            proposal,
            state,
            m_list,
            trials,
            seed,
            out,
        } => value_compare(CompareArgs {
            checkpoint,
            proposal,
            state,
            m_list,
            trials,
            seed,
            out,
        })
        .map(|_| true),
        Command::Gradcheck {
            config,
            checkpoint,
            seed,
        } => gradcheck(config.as_deref(), checkpoint.as_deref(), seed),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
