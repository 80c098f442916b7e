//! A training run on disk. One output directory receives
//!
//! * `config.toml`: the fully resolved configuration, written first
//! * `metrics.csv`: one row every `metrics_interval` steps, flushed as written
//! * `checkpoint/`: the final online parameters
//! * `summary.json`: evaluations before the first and after the last step

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::envs::EvalSummary;
use crate::error::{MeowError, Result};
use crate::trainer::{Trainer, UpdateMetrics};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_HEADER: &str = "step,loss,eval_return,v_clip_mean,logdet_n_mean,logdet_l_mean";

/// Update statistics are interval means; they are empty while the interval
/// contained no update (warm-up).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: Option<f64>,
    pub eval_return: f64,
    pub v_clip_mean: Option<f64>,
    pub logdet_n_mean: Option<f64>,
    pub logdet_l_mean: Option<f64>,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.step,
            opt(self.loss),
            self.eval_return,
            opt(self.v_clip_mean),
            opt(self.logdet_n_mean),
            opt(self.logdet_l_mean)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub steps: usize,
    pub initial: EvalSummary,
    #[serde(rename = "final")]
    pub last: EvalSummary,
}

#[derive(Default)]
struct Interval {
    n: usize,
    loss: f64,
    v_clip: f64,
    logdet_n: f64,
    logdet_l: f64,
}

impl Interval {
    fn add(&mut self, u: &UpdateMetrics) {
        self.n += 1;
        self.loss += u.loss;
        self.v_clip += u.v_clip_mean;
        self.logdet_n += u.logdet_n_mean;
        self.logdet_l += u.logdet_l_mean;
    }

    fn row(&self, step: usize, eval_return: f64) -> MetricsRow {
        let mean = |x: f64| (self.n > 0).then(|| x / self.n as f64);
        MetricsRow {
            step,
            loss: mean(self.loss),
            eval_return,
            v_clip_mean: mean(self.v_clip),
            logdet_n_mean: mean(self.logdet_n),
            logdet_l_mean: mean(self.logdet_l),
        }
    }
}

fn diverged(e: MeowError, step: usize) -> MeowError {
    match e {
        MeowError::NonFinite { what } => MeowError::Diverged { what, step },
        other => other,
    }
}

/// Trains per `config`, writing every artifact into `out`. `on_row` sees
/// each metrics row after it is flushed.
pub fn train(config: &RunConfig, out: &Path, on_row: &mut dyn FnMut(&MetricsRow)) -> Result<RunSummary> {
    config.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), config.to_toml())?;
    let mut metrics = BufWriter::new(File::create(out.join(METRICS_FILE))?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    metrics.flush()?;

    let mut trainer = Trainer::new(config)?;
    let (episodes, mode) = (config.eval.episodes, config.eval.mode);
    let initial = trainer.evaluate(episodes, mode)?;
    let mut interval = Interval::default();
    for _ in 0..config.trainer.steps {
        let m = trainer.train_step().map_err(|e| diverged(e, trainer.step() + 1))?;
        if let Some(u) = &m.update {
            interval.add(u);
        }
        if m.step % config.trainer.metrics_interval == 0 {
            let eval = trainer.evaluate(episodes, mode)?;
            let row = interval.row(m.step, eval.mean_return);
            writeln!(metrics, "{}", row.csv_line())?;
            metrics.flush()?;
            on_row(&row);
            interval = Interval::default();
        }
    }
    let last = trainer.evaluate(episodes, mode)?;
    let summary = RunSummary {
        seed: config.seed,
        steps: trainer.step(),
        initial,
        last,
    };
    let (model, params) = trainer.into_parts();
    checkpoint::save(&out.join(CHECKPOINT_DIR), &model, &params)?;
    let mut text = serde_json::to_string_pretty(&summary).map_err(|e| MeowError::Checkpoint(e.to_string()))?;
    text.push('\n');
    fs::write(out.join(SUMMARY_FILE), text)?;
    Ok(summary)
}
