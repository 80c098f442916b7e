//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach the output.
//! The process fails when a criterion fails that is not listed in
//! `KNOWN_UNMET`.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use meow::autodiff::Tensor;
use meow::checkpoint;
use meow::checks::{gradcheck_suite, random_flow, randomize, GradCheck, GradCheckOptions};
use meow::config::{CouplingKind, ModelConfig, RunConfig};
use meow::model::MeowModel;
use meow::oracle::{estimator_report, log_integral, log_weights, quadrature_v, sac_estimate, sql_estimate};
use meow::oracle::{FlowRef, GridSpec, Integrand};
use meow::policy::deterministic_action;
use meow::run;
use meow::shifted::Head;
use meow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Criteria that fail with the prescribed hyperparameters.
const KNOWN_UNMET: &[u32] = &[9];

type Criterion<'a> = (u32, &'static str, Box<dyn Fn() -> Result<Outcome> + 'a>);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { passed, detail })
}

fn state<R: Rng>(rng: &mut R, h: f64) -> [f64; 2] {
    [rng.random_range(-h..h), rng.random_range(-h..h)]
}

fn kind_for(i: u64, affine_every: u64) -> CouplingKind {
    if i % affine_every == affine_every - 1 {
        CouplingKind::Affine
    } else {
        CouplingKind::Additive
    }
}

fn exactness() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let wide = GridSpec {
        half_width: 16.0,
        nodes: 400,
    };
    let (mut worst_v, mut worst_box) = (0.0f64, 0.0f64);
    for i in 0..50 {
        let (f, p) = random_flow(kind_for(i, 5), 2, 2, 1000 + i)?;
        let r = FlowRef::new(&f, &p);
        let s = state(&mut rng, 2.0);
        let quad = quadrature_v(r, &s, GridSpec::default())?;
        worst_v = worst_v.max((f.soft_v(&p, &s)? - quad).abs());
        worst_box = worst_box.max((quadrature_v(r, &s, wide)? - quad).abs());
    }
    outcome(
        worst_v < 1e-3 && worst_box < 1e-4,
        format!("max |V - quad| {worst_v:.2e}, box doubling {worst_box:.2e}"),
    )
}

fn normalization() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let (f, p) = random_flow(kind_for(i, 4), 2, 2, 2000 + i)?;
        let s = state(&mut rng, 2.0);
        let mass = log_integral(FlowRef::new(&f, &p), &s, GridSpec::default(), Integrand::LogProb)?.exp();
        worst = worst.max((mass - 1.0).abs());
    }
    outcome(worst < 1e-3, format!("max |mass - 1| {worst:.2e}"))
}

fn invertibility() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let mut worst = 0.0f64;
    for i in 0..10 {
        let (f, p) = random_flow(kind_for(i, 2), 2, 2, 3000 + i)?;
        for _ in 0..100 {
            let s = state(&mut rng, 3.0);
            let z: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let a = f.flow_inverse(&p, &s, &z)?;
            let back = f.flow_forward(&p, &s, &a)?.z;
            for (x, y) in z.iter().zip(&back) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    outcome(worst < 1e-8, format!("max round-trip error {worst:.2e}"))
}

fn invariance() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let (m, mut p) = MeowModel::new(2, 2, &ModelConfig::default(), &mut rng)?;
    randomize(&m, &mut p, 0.3, 401)?;
    let alpha = m.alpha();
    let (mut worst, mut factorized) = (0.0f64, true);
    for _ in 0..1000 {
        let s = state(&mut rng, 3.0);
        let a = state(&mut rng, 3.0);
        let lp = m.flow.log_prob(&p, &s, &a)?;
        for head in [Head::First, Head::Second] {
            let shifted = (m.q_shifted(&p, &s, &a, head)? - m.v_shifted(&p, &s, head)?) / alpha;
            worst = worst.max((shifted - lp).abs());
        }
        let (b1, b2) = m.shifts(&p, &s)?;
        let vc = m.v_clip(&p, &s)?;
        let v = m.flow.soft_v(&p, &s)?;
        let by_heads = m
            .v_shifted(&p, &s, Head::First)?
            .min(m.v_shifted(&p, &s, Head::Second)?);
        factorized &= vc == by_heads && vc == v + b1.min(b2);
    }
    outcome(
        worst < 1e-12 && factorized,
        format!("max log-prob gap {worst:.2e}, v_clip factorizations equal: {factorized}"),
    )
}

fn argmax() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let (mut beaten, mut closest) = (0usize, f64::INFINITY);
    for i in 0..20 {
        let (f, p) = random_flow(CouplingKind::Additive, 2, 2, 5000 + i)?;
        let s = state(&mut rng, 2.0);
        let mode = deterministic_action(&f, &p, &s)?;
        let best = f.soft_q(&p, &s, &mode)?;
        // Half uniform over the box, half concentrated near the mode.
        let mut probes = Vec::with_capacity(20_000);
        for k in 0..10_000 {
            if k % 2 == 0 {
                probes.extend(state(&mut rng, 8.0));
            } else {
                for m in &mode {
                    probes.push((m + 0.5 * rng.sample::<f64, _>(StandardNormal)).clamp(-8.0, 8.0));
                }
            }
        }
        let (q, _) = f.evaluate_actions(&p, &s, &Tensor::new(vec![10_000, 2], probes)?)?;
        for v in q {
            beaten += usize::from(v > best);
            closest = closest.min(best - v);
        }
    }
    outcome(
        beaten == 0,
        format!("{beaten} of 200000 probes beat the mode, smallest margin {closest:.2e}"),
    )
}

fn ordering() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(600);
    let (mut trials, mut ordered) = (0usize, 0usize);
    let mut self_gap = 0.0f64;
    let ms = [1, 4, 16, 64, 256];
    for i in 0..20u64 {
        let (t, tp) = random_flow(CouplingKind::Additive, 2, 2, 6000 + 2 * i)?;
        let (q, qp) = random_flow(kind_for(i, 4), 2, 2, 6001 + 2 * i)?;
        let (target, proposal) = (FlowRef::new(&t, &tp), FlowRef::new(&q, &qp));
        let s = state(&mut rng, 2.0);
        let v = t.soft_v(&tp, &s)?;
        for k in 0..500 {
            let m = ms[k % ms.len()];
            let x = log_weights(target, proposal, &s, m, &mut rng)?;
            ordered += usize::from(sql_estimate(t.alpha(), &x) >= sac_estimate(t.alpha(), &x));
            trials += 1;
        }
        for &m in &ms {
            let x = log_weights(target, target, &s, m, &mut rng)?;
            self_gap = self_gap.max((sql_estimate(t.alpha(), &x) - v).abs());
            self_gap = self_gap.max((sac_estimate(t.alpha(), &x) - v).abs());
        }
    }
    outcome(
        ordered == trials && self_gap < 1e-9,
        format!("sql >= sac in {ordered}/{trials} trials, self-proposal max gap {self_gap:.2e}"),
    )
}

fn convergence() -> Result<Outcome> {
    let (t, tp) = random_flow(CouplingKind::Additive, 2, 2, 7000)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7001);
    let (proposal, pp) = MeowModel::new(2, 2, &ModelConfig::default(), &mut rng)?;
    let m_list = [4, 16, 64, 256, 1024];
    let trials = 200;
    let report = estimator_report(
        FlowRef::new(&t, &tp),
        FlowRef::new(&proposal.flow, &pp),
        &[0.5, -0.5],
        &m_list,
        trials,
        GridSpec::default(),
        &mut rng,
    )?;
    let se = |sd: f64| sd / (trials as f64).sqrt();
    let rows = &report.rows;
    let improves = rows[rows.len() - 1].sql_abs_err_mean < rows[0].sql_abs_err_mean;
    let monotone = rows.windows(2).all(|w| {
        let slack = 2.0 * (se(w[0].sql_abs_err_std).powi(2) + se(w[1].sql_abs_err_std).powi(2)).sqrt();
        w[1].sql_abs_err_mean <= w[0].sql_abs_err_mean + slack
    });
    let errs: Vec<String> = rows.iter().map(|r| format!("{:.3e}", r.sql_abs_err_mean)).collect();
    outcome(
        improves && monotone,
        format!("mean |SQL - quad| over M: {}", errs.join(" ")),
    )
}

fn gradients() -> Result<Outcome> {
    let mut worst = 0.0f64;
    let mut all = true;
    for (i, kind) in [CouplingKind::Additive, CouplingKind::Affine].into_iter().enumerate() {
        let cfg = ModelConfig {
            coupling: kind,
            ..ModelConfig::default()
        };
        let (m, mut p) = MeowModel::new(2, 2, &cfg, &mut ChaCha8Rng::seed_from_u64(800 + i as u64))?;
        let shadow = p.clone();
        let opts = GradCheckOptions::default();
        let mut reports = gradcheck_suite(&m, &p, &shadow, &opts)?;
        randomize(&m, &mut p, 0.3, 810 + i as u64)?;
        reports.extend(gradcheck_suite(&m, &p, &shadow, &opts)?);
        all &= reports.iter().all(GradCheck::passed);
        worst = reports.iter().map(|c| c.max_rel_error).fold(worst, f64::max);
    }
    outcome(
        all,
        format!("max relative error {worst:.2e} over soft_q, soft_v, v_clip, loss"),
    )
}

fn multigoal(dir: &Path) -> Result<Outcome> {
    let mut improved = 0;
    let mut reached = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let mut cfg = RunConfig {
            seed,
            ..RunConfig::default()
        };
        cfg.trainer.metrics_interval = 500;
        let s = run::train(&cfg, &dir.join(format!("seed-{seed}")), &mut |_| {})?;
        let dist = s.last.mean_final_distance.unwrap_or(f64::INFINITY);
        improved += usize::from(s.last.mean_return > s.initial.mean_return);
        reached += usize::from(dist < 1.0);
        lines.push(format!(
            "seed {seed} {:.1}->{:.1} d={dist:.2}",
            s.initial.mean_return, s.last.mean_return
        ));
    }
    outcome(
        improved == 5 && reached >= 4,
        format!(
            "(a) improved on {improved}/5, (b) distance < 1 on {reached}/5 [{}]",
            lines.join("; ")
        ),
    )
}

fn determinism(dir: &Path) -> Result<Outcome> {
    std::fs::create_dir_all(dir)?;
    let cfg = dir.join("small.toml");
    let text = "seed = 11\n[trainer]\nsteps = 300\nwarmup_steps = 100\nbatch_size = 32\nmetrics_interval = 50\n\
                [eval]\nepisodes = 3\n";
    std::fs::write(&cfg, text)?;
    let mut metrics = Vec::new();
    for name in ["a", "b"] {
        let out = dir.join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_meow"))
            .args(["train", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .output()?;
        if !status.status.success() {
            return outcome(false, format!("meow train exited with {}", status.status));
        }
        metrics.push(std::fs::read(out.join("seed-11").join(run::METRICS_FILE))?);
    }
    let same_metrics = metrics[0] == metrics[1] && metrics[0].len() > run::METRICS_HEADER.len() + 1;

    let ckpt = dir.join("a").join("seed-11").join(run::CHECKPOINT_DIR);
    let (m, p) = checkpoint::load(&ckpt)?;
    let again = dir.join("again");
    checkpoint::save(&again, &m, &p)?;
    let mut same_ckpt = true;
    for f in [checkpoint::MANIFEST_FILE, checkpoint::BLOB_FILE] {
        same_ckpt &= std::fs::read(ckpt.join(f))? == std::fs::read(again.join(f))?;
    }
    outcome(
        same_metrics && same_ckpt,
        format!("metrics identical: {same_metrics}, checkpoint round trip identical: {same_ckpt}"),
    )
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let train_dir = tmp.path().join("multigoal");
    let det_dir = tmp.path().join("determinism");
    let criteria: Vec<Criterion> = vec![
        (1, "exactness", Box::new(exactness)),
        (2, "normalization", Box::new(normalization)),
        (3, "invertibility", Box::new(invertibility)),
        (4, "shift invariance", Box::new(invariance)),
        (5, "deterministic argmax", Box::new(argmax)),
        (6, "estimator ordering", Box::new(ordering)),
        (7, "estimator convergence", Box::new(convergence)),
        (8, "gradient checks", Box::new(gradients)),
        (9, "multi-goal training", Box::new(|| multigoal(&train_dir))),
        (10, "determinism and persistence", Box::new(|| determinism(&det_dir))),
    ];
    let mut unexpected = Vec::new();
    for (id, name, check) in &criteria {
        let start = Instant::now();
        let o = check().unwrap_or_else(|e| Outcome {
            passed: false,
            detail: format!("error: {e}"),
        });
        let secs = start.elapsed().as_secs_f64();
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {verdict} {name} ({secs:.1}s): {}", o.detail);
        if !o.passed && !KNOWN_UNMET.contains(id) {
            unexpected.push(*id);
        }
    }
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
