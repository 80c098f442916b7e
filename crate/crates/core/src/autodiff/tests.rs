use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn scalar_of(g: &Graph, v: VarId) -> f64 {
    g.value(v).item().unwrap()
}

#[test]
fn forward_examples() {
    let mut g = Graph::new();
    let zero = g.constant(t(&[1], &[0.0]));
    let s = g.swish(zero).unwrap();
    assert_eq!(g.value(s).data(), &[0.0]);

    let x = g.constant(t(&[1], &[3.5]));
    let e = g.exp(x).unwrap();
    let l = g.log(e).unwrap();
    assert!((g.value(l).data()[0] - 3.5).abs() < 1e-15);

    let z = g.constant(t(&[2], &[0.0, 0.0]));
    let d = g.gauss_log_density(z).unwrap();
    assert!((scalar_of(&g, d) + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    assert!((scalar_of(&g, d) + 1.837877).abs() < 1e-6);
}

#[test]
fn square_gradient_at_three() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0).unwrap(), true);
    let y = g.square(x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().item().unwrap(), 6.0);
}

#[test]
fn matmul_weight_gradient_is_outer_product() {
    let mut store = ParamStore::new();
    let w = store.add("w", t(&[2, 3], &[0.3, -1.2, 0.5, 2.0, 0.1, -0.7]));
    let x = [0.4, -1.5, 0.9];
    let f = |g: &mut Graph, b: &Binding| {
        let xv = g.constant(t(&[3], &x));
        let y = g.matmul(b[w], xv)?;
        g.sum(y)
    };
    let mut g = Graph::new();
    let b = g.bind(&store, true);
    let out = f(&mut g, &b).unwrap();
    let grad = g.backward(out).unwrap().wrt(&g, b[w]);
    assert_eq!(grad.data(), &[0.4, -1.5, 0.9, 0.4, -1.5, 0.9]);

    let report = finite_diff_check(f, &store, &FiniteDiffSpec::default()).unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn two_layer_swish_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let mut rand_t = |shape: &[usize]| {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    };
    let w1 = store.add("w1", rand_t(&[3, 8]));
    let b1 = store.add("b1", rand_t(&[8]));
    let w2 = store.add("w2", rand_t(&[8, 2]));
    let b2 = store.add("b2", rand_t(&[2]));
    let input = rand_t(&[5, 3]);
    let f = |g: &mut Graph, b: &Binding| {
        let x = g.constant(input.clone());
        let h = g.matmul(x, b[w1])?;
        let h = g.add_row(h, b[b1])?;
        let h = g.swish(h)?;
        let y = g.matmul(h, b[w2])?;
        let y = g.add_row(y, b[b2])?;
        let y = g.square(y)?;
        g.mean(y)
    };
    let report = finite_diff_check(f, &store, &FiniteDiffSpec::default()).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert_eq!(report.coords_checked, store.numel());
}

#[test]
fn finite_diff_check_examples() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::scalar(2.0).unwrap());
    let cube = |g: &mut Graph, b: &Binding| {
        let sq = g.square(b[x])?;
        g.mul(sq, b[x])
    };
    let report = finite_diff_check(cube, &store, &FiniteDiffSpec::default()).unwrap();
    assert!(report.max_rel_error < 1e-7, "{report:?}");
    let (_, _, analytic, _) = report.worst.unwrap();
    assert_eq!(analytic, 12.0);

    let constant = |g: &mut Graph, _: &Binding| Ok(g.constant(Tensor::scalar(4.0).unwrap()));
    let report = finite_diff_check(constant, &store, &FiniteDiffSpec::default()).unwrap();
    assert_eq!(report.max_rel_error, 0.0);

    let bad = FiniteDiffSpec {
        epsilon: 0.0,
        ..Default::default()
    };
    assert!(finite_diff_check(cube, &store, &bad).is_err());
}

#[test]
fn finite_diff_check_reports_non_finite() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::scalar(1e-7).unwrap());
    // log(x - 1e-5) is undefined at the minus probe.
    let f = |g: &mut Graph, b: &Binding| {
        let shifted = g.add_scalar(b[x], 5e-6)?;
        g.log(shifted)
    };
    assert!(finite_diff_check(f, &store, &FiniteDiffSpec::default()).is_err());
}

#[test]
fn min_routes_gradient_to_first_argument_on_ties() {
    let mut g = Graph::new();
    let a = g.leaf(t(&[3], &[1.0, 2.0, 5.0]), true);
    let b = g.leaf(t(&[3], &[1.0, 3.0, 4.0]), true);
    let m = g.min(a, b).unwrap();
    assert_eq!(g.value(m).data(), &[1.0, 2.0, 4.0]);
    let s = g.sum(m).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0, 0.0]);
    assert_eq!(grads.get(b).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn unreachable_parameters_get_zero() {
    let mut store = ParamStore::new();
    let used = store.add("used", t(&[2], &[1.0, 2.0]));
    let unused = store.add("unused", t(&[3], &[1.0, 2.0, 3.0]));
    let mut g = Graph::new();
    let b = g.bind(&store, true);
    let s = g.sum(b[used]).unwrap();
    let grads = g.backward(s).unwrap().for_binding(&g, &b);
    assert_eq!(grads[used.index()].data(), &[1.0, 1.0]);
    assert_eq!(grads[unused.index()].data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(2.0).unwrap(), true);
    let y = g.square(x).unwrap();
    let d = g.detach(y).unwrap();
    let z = g.mul(d, x).unwrap();
    let grads = g.backward(z).unwrap();
    // d/dx [stop(x²)·x] = x² = 4
    assert_eq!(grads.get(x).unwrap().item().unwrap(), 4.0);
}

#[test]
fn errors_are_reported() {
    let mut g = Graph::new();
    let a = g.leaf(t(&[2], &[1.0, -1.0]), true);
    let b = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
    assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { .. })));
    assert!(matches!(g.log(a), Err(TensorError::NonFinite { op: "log" })));
    let big = g.leaf(t(&[1], &[800.0]), false);
    assert!(matches!(g.exp(big), Err(TensorError::NonFinite { .. })));
    assert!(matches!(g.backward(a), Err(TensorError::NotScalar { .. })));

    let mut other = Graph::new();
    let foreign = other.leaf(Tensor::scalar(1.0).unwrap(), true);
    assert!(matches!(g.backward(foreign), Err(TensorError::NotOnTape)));

    let m = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
    let v = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), false);
    assert!(g.matmul(m, v).is_err());
    assert!(g.add_row(m, v).is_err());
    assert!(g.narrow_cols(m, 1, 2).is_err());
    assert!(g.select_cols(m, &[2]).is_err());
}

#[test]
fn dropout_is_identity_in_eval_and_seeded_in_train() {
    let x = t(&[4, 50], &vec![1.0; 200]);
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let d = g.dropout(v, 0.1).unwrap();
    assert_eq!(d, v);

    let run = |seed| {
        let mut g = Graph::train(ChaCha8Rng::seed_from_u64(seed));
        let v = g.leaf(x.clone(), true);
        let d = g.dropout(v, 0.1).unwrap();
        g.value(d).clone()
    };
    let a = run(3);
    assert_eq!(a, run(3));
    let dropped = a.data().iter().filter(|&&v| v == 0.0).count();
    assert!(dropped > 0 && dropped < 60);
    let kept = a.data().iter().find(|&&v| v != 0.0).copied().unwrap();
    assert!((kept - 1.0 / 0.9).abs() < 1e-15);
}

#[test]
fn replay_reproduces_every_node() {
    let mut g = Graph::train(ChaCha8Rng::seed_from_u64(11));
    let x = g.leaf(t(&[2, 3], &[0.1, -0.2, 0.3, 1.0, 2.0, -3.0]), true);
    let w = g.leaf(
        t(&[3, 4], &(0..12).map(|i| i as f64 * 0.1 - 0.5).collect::<Vec<_>>()),
        true,
    );
    let h = g.matmul(x, w).unwrap();
    let h = g.layer_norm(h).unwrap();
    let h = g.swish(h).unwrap();
    let h = g.dropout(h, 0.5).unwrap();
    let h = g.narrow_cols(h, 1, 2).unwrap();
    let r = g.reshape(h, vec![4]).unwrap();
    let s = g.sum(r).unwrap();
    let row = g.reshape(s, vec![1, 1]).unwrap();
    let _ = g.repeat_rows(row, 3).unwrap();
    assert!(g.replay().unwrap());
}

/// Every differentiable op against central differences on inputs in [−2, 2].
fn check_op(shape: &[usize], inputs: &[Vec<f64>], build: impl Fn(&mut Graph, &[VarId]) -> VarId) {
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .iter()
        .enumerate()
        .map(|(i, d)| store.add(format!("x{i}"), t(shape, d)))
        .collect();
    let n: usize = shape.iter().product();
    let weights = t(&[n], &(0..n).map(|i| 0.3 + 0.17 * i as f64).collect::<Vec<_>>());
    let f = |g: &mut Graph, b: &Binding| {
        let vars: Vec<VarId> = ids.iter().map(|&id| b[id]).collect();
        let y = build(g, &vars);
        let y = g.reshape(y, vec![n])?;
        let w = g.constant(weights.clone());
        let y = g.mul(y, w)?;
        g.sum(y)
    };
    let report = finite_diff_check(f, &store, &FiniteDiffSpec::default()).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn elementwise_ops_match_finite_differences(a in vals(6), b in vals(6)) {
        let shape = [2, 3];
        let pos: Vec<f64> = b.iter().map(|v| v.abs() + 0.5).collect();
        check_op(&shape, &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap());
        check_op(&shape, &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap());
        check_op(&shape, &[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]).unwrap());
        check_op(&shape, &[a.clone(), pos.clone()], |g, v| g.div(v[0], v[1]).unwrap());
        check_op(&shape, std::slice::from_ref(&pos), |g, v| g.log(v[0]).unwrap());
        check_op(&shape, std::slice::from_ref(&a), |g, v| g.exp(v[0]).unwrap());
        check_op(&shape, std::slice::from_ref(&a), |g, v| g.neg(v[0]).unwrap());
        check_op(&shape, std::slice::from_ref(&a), |g, v| g.square(v[0]).unwrap());
        check_op(&shape, std::slice::from_ref(&a), |g, v| g.swish(v[0]).unwrap());
        check_op(&shape, std::slice::from_ref(&a), |g, v| g.sigmoid(v[0]).unwrap());
        check_op(&shape, std::slice::from_ref(&a), |g, v| g.scale(v[0], -1.7).unwrap());
        check_op(&shape, std::slice::from_ref(&a), |g, v| g.add_scalar(v[0], 0.4).unwrap());
        check_op(&shape, &[a.clone(), b.clone()], |g, v| g.min(v[0], v[1]).unwrap());
    }

    #[test]
    fn structural_ops_match_finite_differences(a in vals(12), w in vals(8), r in vals(4)) {
        let mut store = ParamStore::new();
        let x = store.add("x", t(&[3, 4], &a));
        let wm = store.add("w", t(&[4, 2], &w));
        let row = store.add("row", t(&[4], &r));
        let f = |g: &mut Graph, b: &Binding| {
            let h = g.add_row(b[x], b[row])?;
            let ln = g.layer_norm(h)?;
            let sel = g.select_cols(ln, &[3, 0])?;
            let mm = g.matmul(h, b[wm])?;
            let merged = g.merge_cols(sel, &[1, 3], mm, &[0, 2])?;
            let nar = g.narrow_cols(merged, 1, 3)?;
            let dens = g.gauss_log_density(nar)?;
            let rows = g.sum_rows(merged)?;
            let both = g.mul(dens, rows)?;
            let mv = g.matmul(b[x], b[row])?;
            let tot = g.add(both, mv)?;
            g.mean(tot)
        };
        let report = finite_diff_check(f, &store, &FiniteDiffSpec::default()).unwrap();
        prop_assert!(report.max_rel_error < 1e-4, "{:?}", report);
    }

    #[test]
    fn bmv_and_repeat_rows_match_finite_differences(w in vals(6), x in vals(6), s in vals(3)) {
        let mut store = ParamStore::new();
        let wp = store.add("w", t(&[3, 2], &w));
        let sp = store.add("s", t(&[1, 3], &s));
        let xp = store.add("x", t(&[3, 2], &x));
        let f = |g: &mut Graph, b: &Binding| {
            // weights for a 1×2 map per row; the repeated row scales the output
            let y = g.bmv(b[wp], b[xp])?;
            let rep = g.repeat_rows(b[sp], 3)?;
            let rep = g.narrow_cols(rep, 0, 1)?;
            let y = g.mul(y, rep)?;
            let y = g.swish(y)?;
            g.sum(y)
        };
        let report = finite_diff_check(f, &store, &FiniteDiffSpec::default()).unwrap();
        prop_assert!(report.max_rel_error < 1e-4, "{:?}", report);
    }

    #[test]
    fn forward_is_deterministic(a in vals(8), seed in 0u64..1000) {
        let run = || {
            let mut g = Graph::train(ChaCha8Rng::seed_from_u64(seed));
            let x = g.leaf(t(&[2, 4], &a), true);
            let h = g.layer_norm(x).unwrap();
            let h = g.dropout(h, 0.3).unwrap();
            let h = g.swish(h).unwrap();
            g.value(h).clone()
        };
        prop_assert_eq!(run(), run());
    }
}
