use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Binding, Graph, ParamStore, TensorError, VarId};

/// Controls how [`finite_diff_check`] probes parameters.
#[derive(Debug, Clone)]
pub struct FiniteDiffSpec {
    pub epsilon: f64,
    /// Probe at most this many coordinates per tensor, chosen at random.
    /// `None` probes every coordinate.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for FiniteDiffSpec {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Parameter name, flat index, analytic and numeric derivative at the
    /// worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares the tape's gradient of a scalar function of `params` against
/// central differences.
///
/// `f` builds the scalar on the supplied graph from the bound parameters. It
/// is always evaluated on evaluation-mode graphs so that dropout is off.
/// The error at each coordinate is
/// `|analytic − numeric| / (|numeric| + 1e-12)`; the maximum is reported.
pub fn finite_diff_check<F>(f: F, params: &ParamStore, spec: &FiniteDiffSpec) -> Result<FiniteDiffReport, TensorError>
where
    F: Fn(&mut Graph, &Binding) -> Result<VarId, TensorError>,
{
    if !(spec.epsilon > 0.0) {
        return Err(TensorError::InvalidArgument {
            op: "finite_diff_check",
            reason: format!("epsilon must be positive, got {}", spec.epsilon),
        });
    }
    let mut g = Graph::new();
    let binding = g.bind(params, true);
    let out = f(&mut g, &binding)?;
    let grads = g.backward(out)?;
    let analytic = grads.for_binding(&g, &binding);

    let eval = |store: &ParamStore| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let b = g.bind(store, false);
        let v = f(&mut g, &b)?;
        let value = g.value(v).item()?;
        if value.is_finite() {
            Ok(value)
        } else {
            Err(TensorError::NonFinite {
                op: "finite_diff_check",
            })
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut probe = params.clone();
    let mut report = FiniteDiffReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for id in params.ids() {
        let n = params.get(id).len();
        let coords: Vec<usize> = match spec.max_coords_per_tensor {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = params.get(id).data()[c];
            probe.data_mut(id)[c] = orig + spec.epsilon;
            let plus = eval(&probe)?;
            probe.data_mut(id)[c] = orig - spec.epsilon;
            let minus = eval(&probe)?;
            probe.data_mut(id)[c] = orig;

            let numeric = (plus - minus) / (2.0 * spec.epsilon);
            let exact = analytic[id.index()].data()[c];
            let rel = (exact - numeric).abs() / (numeric.abs() + 1e-12);
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((params.name(id).to_string(), c, exact, numeric));
            }
        }
    }
    Ok(report)
}
