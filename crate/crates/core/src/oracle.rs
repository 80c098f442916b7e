//! Independent soft-value computations used to verify the closed form.
//!
//! [`quadrature_v`] integrates `exp(Q/α)` over a box with tensor-product
//! Gauss–Legendre nodes, accumulating in log space. The Monte Carlo
//! estimators draw actions from a proposal policy that need not match the
//! target: with `x_i = Q(s,a_i)/α − log π(a_i|s)`,
//!
//! * importance sampling: `α·(logsumexp(x) − log M)`
//! * entropy form: `α·mean(x)`
//!
//! On shared samples the first is never below the second (Jensen).

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{log_sum_exp, ParamStore, Tensor};
use crate::error::{MeowError, Result};
use crate::flow::FlowModel;

/// A flow together with the parameters to evaluate it under.
#[derive(Debug, Clone, Copy)]
pub struct FlowRef<'a> {
    pub flow: &'a FlowModel,
    pub params: &'a ParamStore,
}

impl<'a> FlowRef<'a> {
    pub fn new(flow: &'a FlowModel, params: &'a ParamStore) -> Self {
        Self { flow, params }
    }
}

/// Integration box `[−half_width, half_width]^D` with `nodes` per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub half_width: f64,
    pub nodes: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            half_width: 8.0,
            nodes: 200,
        }
    }
}

pub const MAX_QUADRATURE_DIM: usize = 3;

/// Gauss–Legendre nodes and weights on `[−1, 1]`, by Newton iteration on
/// the Legendre recurrence from Chebyshev starting points.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut t = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, t);
            for k in 2..=n {
                let k = k as f64;
                let p2 = ((2.0 * k - 1.0) * t * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (t * pn - pm) / (t * t - 1.0);
            let dt = pn / dp;
            t -= dt;
            if dt.abs() < 1e-15 {
                break;
            }
        }
        let wi = 2.0 / ((1.0 - t * t) * dp * dp);
        x[i] = -t;
        x[n - 1 - i] = t;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// What [`log_integral`] integrates, as a log-integrand per action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrand {
    /// `Q(s,a)/α`.
    SoftQ,
    /// `log π(a|s)`.
    LogProb,
}

const QUAD_CHUNK: usize = 65_536;

/// `log ∫ exp(f(a)) da` over the grid box.
pub fn log_integral(target: FlowRef<'_>, s: &[f64], grid: GridSpec, integrand: Integrand) -> Result<f64> {
    let d = target.flow.action_dim();
    if d > MAX_QUADRATURE_DIM {
        return Err(MeowError::Precondition(format!(
            "quadrature supports at most {MAX_QUADRATURE_DIM} action dimensions, got {d}"
        )));
    }
    if grid.nodes == 0 || !(grid.half_width > 0.0) {
        return Err(MeowError::Precondition(
            "grid needs nodes > 0 and half_width > 0".into(),
        ));
    }
    let (x, w) = gauss_legendre(grid.nodes);
    let nodes: Vec<f64> = x.iter().map(|t| t * grid.half_width).collect();
    let log_w: Vec<f64> = w.iter().map(|v| (v * grid.half_width).ln()).collect();
    let alpha = target.flow.alpha();
    let total = grid.nodes.pow(d as u32);

    // Per-chunk log-sums, combined at the end.
    let mut partial = Vec::with_capacity(total.div_ceil(QUAD_CHUNK));
    let mut start = 0;
    while start < total {
        let rows = QUAD_CHUNK.min(total - start);
        let mut actions = Vec::with_capacity(rows * d);
        let mut lw = Vec::with_capacity(rows);
        for flat in start..start + rows {
            let mut rest = flat;
            let mut acc = 0.0;
            let at = actions.len();
            for _ in 0..d {
                let k = rest % grid.nodes;
                rest /= grid.nodes;
                actions.push(nodes[k]);
                acc += log_w[k];
            }
            actions[at..].reverse();
            lw.push(acc);
        }
        let (q, lp) = target
            .flow
            .evaluate_actions(target.params, s, &Tensor::new(vec![rows, d], actions)?)?;
        let terms: Vec<f64> = match integrand {
            Integrand::SoftQ => q.iter().zip(&lw).map(|(q, w)| q / alpha + w).collect(),
            Integrand::LogProb => lp.iter().zip(&lw).map(|(l, w)| l + w).collect(),
        };
        if terms.iter().any(|t| t.is_nan() || *t == f64::INFINITY) {
            return Err(MeowError::NonFinite {
                what: "quadrature integrand",
            });
        }
        partial.push(log_sum_exp(&terms));
        start += rows;
    }
    Ok(log_sum_exp(&partial))
}

/// `α log ∫ exp(Q(s,a)/α) da` by quadrature.
pub fn quadrature_v(target: FlowRef<'_>, s: &[f64], grid: GridSpec) -> Result<f64> {
    Ok(target.flow.alpha() * log_integral(target, s, grid, Integrand::SoftQ)?)
}

/// `x_i = Q(s,a_i)/α − log π(a_i|s)` for `m` actions drawn from `proposal`.
pub fn log_weights<R: Rng + ?Sized>(
    target: FlowRef<'_>,
    proposal: FlowRef<'_>,
    s: &[f64],
    m: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(MeowError::Precondition("need at least one sample".into()));
    }
    if target.flow.action_dim() != proposal.flow.action_dim() {
        return Err(MeowError::Dimension {
            what: "proposal action",
            expected: target.flow.action_dim(),
            got: proposal.flow.action_dim(),
        });
    }
    let d = proposal.flow.action_dim();
    let z: Vec<f64> = (0..m * d).map(|_| rng.sample(StandardNormal)).collect();
    let a = proposal
        .flow
        .inverse_many(proposal.params, s, &Tensor::new(vec![m, d], z)?)?;
    let (q, _) = target.flow.evaluate_actions(target.params, s, &a)?;
    let (_, lp) = proposal.flow.evaluate_actions(proposal.params, s, &a)?;
    let alpha = target.flow.alpha();
    Ok(q.iter().zip(&lp).map(|(q, l)| q / alpha - l).collect())
}

/// Importance-sampling estimate from log weights.
pub fn sql_estimate(alpha: f64, x: &[f64]) -> f64 {
    alpha * (log_sum_exp(x) - (x.len() as f64).ln())
}

/// Entropy-form estimate from log weights.
pub fn sac_estimate(alpha: f64, x: &[f64]) -> f64 {
    alpha * x.iter().sum::<f64>() / x.len() as f64
}

pub fn mc_v_sql<R: Rng + ?Sized>(
    target: FlowRef<'_>,
    proposal: FlowRef<'_>,
    s: &[f64],
    m: usize,
    rng: &mut R,
) -> Result<f64> {
    let x = log_weights(target, proposal, s, m, rng)?;
    Ok(sql_estimate(target.flow.alpha(), &x))
}

pub fn mc_v_sac<R: Rng + ?Sized>(
    target: FlowRef<'_>,
    proposal: FlowRef<'_>,
    s: &[f64],
    m: usize,
    rng: &mut R,
) -> Result<f64> {
    let x = log_weights(target, proposal, s, m, rng)?;
    Ok(sac_estimate(target.flow.alpha(), &x))
}

/// Both estimates on one shared sample set, `(sql, sac)`.
pub fn paired_estimates<R: Rng + ?Sized>(
    target: FlowRef<'_>,
    proposal: FlowRef<'_>,
    s: &[f64],
    m: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let x = log_weights(target, proposal, s, m, rng)?;
    let alpha = target.flow.alpha();
    Ok((sql_estimate(alpha, &x), sac_estimate(alpha, &x)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub m: usize,
    pub sql_abs_err_mean: f64,
    pub sql_abs_err_std: f64,
    pub sac_abs_err_mean: f64,
    pub sac_abs_err_std: f64,
    /// Fraction of trials with `sql ≥ sac` on the shared samples.
    pub ordering_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorReport {
    /// Quadrature value the errors are measured against.
    pub reference: f64,
    pub trials: usize,
    pub rows: Vec<ReportRow>,
}

impl EstimatorReport {
    pub const CSV_HEADER: &'static str = "M,sql_abs_err_mean,sql_abs_err_std,sac_abs_err_mean,sac_abs_err_std";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.m, r.sql_abs_err_mean, r.sql_abs_err_std, r.sac_abs_err_mean, r.sac_abs_err_std
            ));
        }
        out
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Absolute errors of both estimators against quadrature for each `M`.
pub fn estimator_report<R: Rng + ?Sized>(
    target: FlowRef<'_>,
    proposal: FlowRef<'_>,
    s: &[f64],
    m_list: &[usize],
    trials: usize,
    grid: GridSpec,
    rng: &mut R,
) -> Result<EstimatorReport> {
    if trials == 0 {
        return Err(MeowError::Precondition("need at least one trial".into()));
    }
    let reference = quadrature_v(target, s, grid)?;
    let alpha = target.flow.alpha();
    let mut rows = Vec::with_capacity(m_list.len());
    for &m in m_list {
        let mut sql_err = Vec::with_capacity(trials);
        let mut sac_err = Vec::with_capacity(trials);
        let mut ordered = 0;
        for _ in 0..trials {
            let x = log_weights(target, proposal, s, m, rng)?;
            let (sql, sac) = (sql_estimate(alpha, &x), sac_estimate(alpha, &x));
            sql_err.push((sql - reference).abs());
            sac_err.push((sac - reference).abs());
            ordered += usize::from(sql >= sac);
        }
        let (sql_m, sql_s) = mean_std(&sql_err);
        let (sac_m, sac_s) = mean_std(&sac_err);
        rows.push(ReportRow {
            m,
            sql_abs_err_mean: sql_m,
            sql_abs_err_std: sql_s,
            sac_abs_err_mean: sac_m,
            sac_abs_err_std: sac_s,
            ordering_fraction: ordered as f64 / trials as f64,
        });
    }
    Ok(EstimatorReport {
        reference,
        trials,
        rows,
    })
}
