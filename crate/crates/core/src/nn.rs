//! Small network building blocks on top of the autodiff tape.

use rand::Rng;

use crate::autodiff::{Binding, Graph, ParamId, ParamStore, Tensor, TensorError, VarId};

/// Weight initialization for [`Linear`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(−1/√fan_in, 1/√fan_in)` for weights and bias.
    FanIn,
    Zeros,
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let (w, b) = match init {
            Init::FanIn => {
                let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
                (uniform(rng, in_dim * out_dim, bound), uniform(rng, out_dim, bound))
            }
            Init::Zeros => (vec![0.0; in_dim * out_dim], vec![0.0; out_dim]),
        };
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::new(vec![in_dim, out_dim], w).expect("finite init"),
        );
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::new(vec![out_dim], b).expect("finite init"),
        );
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: VarId) -> Result<VarId, TensorError> {
        let y = g.matmul(x, p[self.weight])?;
        g.add_row(y, p[self.bias])
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Row-wise layer normalization followed by a learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { gain, bias, dim }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: VarId) -> Result<VarId, TensorError> {
        let rows = g.shape(x)[0];
        let y = g.layer_norm(x)?;
        let gain = g.reshape(p[self.gain], vec![1, self.dim])?;
        let gain = g.repeat_rows(gain, rows)?;
        let y = g.mul(y, gain)?;
        g.add_row(y, p[self.bias])
    }
}

/// A swish MLP: `[Linear → (LayerNorm) → swish → (dropout)]* → Linear`.
#[derive(Debug, Clone)]
pub struct Mlp {
    hidden: Vec<(Linear, Option<LayerNorm>)>,
    output: Linear,
    dropout: f64,
}

/// Shape and regularization of an [`Mlp`].
#[derive(Debug, Clone, Copy)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub out_dim: usize,
    pub layer_norm: bool,
    pub dropout: f64,
}

impl Mlp {
    /// Hidden layers use fan-in init; the output layer uses `output_init`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: MlpSpec,
        output_init: Init,
        rng: &mut R,
    ) -> Self {
        let mut hidden = Vec::with_capacity(spec.layers);
        let mut width = spec.in_dim;
        for i in 0..spec.layers {
            let lin = Linear::new(store, &format!("{name}.{i}"), width, spec.hidden, Init::FanIn, rng);
            let ln = spec
                .layer_norm
                .then(|| LayerNorm::new(store, &format!("{name}.{i}.norm"), spec.hidden));
            hidden.push((lin, ln));
            width = spec.hidden;
        }
        let output = Linear::new(store, &format!("{name}.out"), width, spec.out_dim, output_init, rng);
        Self {
            hidden,
            output,
            dropout: spec.dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: VarId) -> Result<VarId, TensorError> {
        let mut h = x;
        for (lin, ln) in &self.hidden {
            h = lin.forward(g, p, h)?;
            if let Some(ln) = ln {
                h = ln.forward(g, p, h)?;
            }
            h = g.swish(h)?;
            h = g.dropout(h, self.dropout)?;
        }
        self.output.forward(g, p, h)
    }

    pub fn output(&self) -> &Linear {
        &self.output
    }

    pub fn out_dim(&self) -> usize {
        self.output.out_dim
    }

    /// Every parameter id owned by this network.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (lin, ln) in &self.hidden {
            ids.extend([lin.weight, lin.bias]);
            if let Some(ln) = ln {
                ids.extend([ln.gain, ln.bias]);
            }
        }
        ids.extend([self.output.weight, self.output.bias]);
        ids
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, FiniteDiffSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_output_init_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let spec = MlpSpec {
            in_dim: 3,
            hidden: 8,
            layers: 2,
            out_dim: 5,
            layer_norm: true,
            dropout: 0.1,
        };
        let mlp = Mlp::new(&mut store, "m", spec, Init::Zeros, &mut rng);
        let mut g = Graph::new();
        let p = g.bind(&store, false);
        let x = g.constant(Tensor::from_rows(&[[1.0, -2.0, 0.5], [0.0, 0.3, 9.0]]).unwrap());
        let y = mlp.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(y), &[2, 5]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(mlp.param_ids().len(), store.len());
    }

    #[test]
    fn layer_norm_mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let spec = MlpSpec {
            in_dim: 2,
            hidden: 6,
            layers: 2,
            out_dim: 3,
            layer_norm: true,
            dropout: 0.1,
        };
        let mlp = Mlp::new(&mut store, "m", spec, Init::FanIn, &mut rng);
        let x = Tensor::from_rows(&[[0.3, -1.1], [1.7, 0.2], [-0.4, 0.9]]).unwrap();
        let f = |g: &mut Graph, p: &Binding| {
            let xv = g.constant(x.clone());
            let y = mlp.forward(g, p, xv)?;
            let y = g.swish(y)?;
            g.sum(y)
        };
        let r = finite_diff_check(f, &store, &FiniteDiffSpec::default()).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
