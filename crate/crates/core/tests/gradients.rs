use lct_core::attention::{
    multi_head_attention, scaled_dot_product_attention, EncoderStack, MultiHeadWeights,
};
use lct_core::models::{build_model, seq_pool, ModelConfig, Variant};
use lct_core::tensor::gradcheck::{
    analytic_gradients, compare_with_finite_differences, grad_check, Coords, GradCheckReport,
};
use lct_core::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use lct_core::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const OP_TOL: f64 = 1e-5;
const COMPOSITE_TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Distinct values at least 0.01 apart, so no finite-difference step can
/// change a max or cross a ReLU kink.
fn separated(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n)
        .map(|i| (i as f64 - n as f64 / 2.0) * 0.01 + 0.005)
        .collect();
    v.shuffle(r);
    Tensor::new(shape, v).unwrap()
}

fn weights_for(len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..len).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// Reduce `out` to a scalar with fixed random weights.
fn reduce(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let w = weights_for(g.value(out).len(), 99);
    g.weighted_sum(out, &w)
}

fn assert_below(name: &str, report: &GradCheckReport, tol: f64) {
    assert!(report.checked > 0, "{name}: nothing checked");
    assert!(
        report.max_rel_error < tol,
        "{name}: max rel err {:.3e} >= {tol:e}, worst {:?}",
        report.max_rel_error,
        report.worst
    );
}

fn check_op<F>(name: &str, store: &mut ParamStore<f64>, tol: f64, mut op: F)
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    let report = grad_check(
        store,
        |s| {
            let mut g = Graph::inference();
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let out = op(&mut g, &vars)?;
            let loss = reduce(&mut g, out)?;
            Ok((g, loss))
        },
        H,
        Coords::All,
    )
    .unwrap();
    assert_below(name, &report, tol);
}

fn store_of(tensors: Vec<Tensor<f64>>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (i, t) in tensors.into_iter().enumerate() {
        s.add(format!("p{i}"), t);
    }
    s
}

#[test]
fn matmul() {
    let mut r = rng(1);
    let mut s = store_of(vec![random(&[3, 4], &mut r), random(&[4, 2], &mut r)]);
    check_op("matmul", &mut s, 1e-6, |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn matmul_with_leading_axes() {
    let mut r = rng(2);
    let mut s = store_of(vec![random(&[2, 3, 4], &mut r), random(&[4, 5], &mut r)]);
    check_op("matmul rank 3", &mut s, OP_TOL, |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn batch_matmul_both_layouts() {
    let mut r = rng(3);
    let mut s = store_of(vec![random(&[2, 3, 4], &mut r), random(&[2, 4, 5], &mut r)]);
    check_op("batch_matmul", &mut s, OP_TOL, |g, v| {
        g.batch_matmul(v[0], v[1], false)
    });
    let mut s = store_of(vec![random(&[2, 3, 4], &mut r), random(&[2, 5, 4], &mut r)]);
    check_op("batch_matmul transposed", &mut s, OP_TOL, |g, v| {
        g.batch_matmul(v[0], v[1], true)
    });
}

#[test]
fn elementwise_and_broadcast_adds() {
    let mut r = rng(4);
    let mut s = store_of(vec![random(&[2, 3], &mut r), random(&[2, 3], &mut r)]);
    check_op("add", &mut s, OP_TOL, |g, v| g.add(v[0], v[1]));
    let mut s = store_of(vec![random(&[2, 3, 4], &mut r), random(&[4], &mut r)]);
    check_op("add_bias", &mut s, OP_TOL, |g, v| g.add_bias(v[0], v[1]));
    let mut s = store_of(vec![random(&[2, 3, 4], &mut r), random(&[3, 4], &mut r)]);
    check_op("add_broadcast", &mut s, OP_TOL, |g, v| {
        g.add_broadcast(v[0], v[1])
    });
    let mut s = store_of(vec![random(&[5], &mut r)]);
    check_op("scale", &mut s, OP_TOL, |g, v| Ok(g.scale(v[0], -1.7)));
}

#[test]
fn relu_away_from_kink() {
    let mut r = rng(5);
    let mut s = store_of(vec![separated(&[4, 6], &mut r)]);
    check_op("relu", &mut s, OP_TOL, |g, v| Ok(g.relu(v[0])));
}

#[test]
fn softmax() {
    let mut r = rng(6);
    let mut s = store_of(vec![random(&[3, 5], &mut r)]);
    check_op("softmax", &mut s, OP_TOL, |g, v| g.softmax(v[0]));
}

#[test]
fn layer_norm() {
    let mut r = rng(7);
    let mut s = store_of(vec![
        random(&[2, 3, 6], &mut r),
        random(&[6], &mut r),
        random(&[6], &mut r),
    ]);
    check_op("layer_norm", &mut s, OP_TOL, |g, v| {
        g.layer_norm(v[0], v[1], v[2])
    });
}

#[test]
fn dropout_with_fixed_mask() {
    let mut r = rng(8);
    let mut s = store_of(vec![random(&[4, 8], &mut r)]);
    let ids: Vec<ParamId> = s.ids().collect();
    let report = grad_check(
        &mut s,
        |st| {
            let mut g = Graph::new(true, 17);
            let x = g.param(st, ids[0]);
            let y = g.dropout(x, 0.3)?;
            let loss = reduce(&mut g, y)?;
            Ok((g, loss))
        },
        H,
        Coords::All,
    )
    .unwrap();
    assert_below("dropout", &report, OP_TOL);
}

#[test]
fn conv2d_on_5x5x2() {
    let mut r = rng(9);
    let mut s = store_of(vec![
        random(&[1, 5, 5, 2], &mut r),
        random(&[3, 3, 2, 3], &mut r),
    ]);
    check_op("conv2d", &mut s, OP_TOL, |g, v| g.conv2d(v[0], v[1]));
    let mut s = store_of(vec![
        random(&[2, 4, 6, 3], &mut r),
        random(&[3, 3, 3, 2], &mut r),
    ]);
    check_op("conv2d batch 2", &mut s, OP_TOL, |g, v| {
        g.conv2d(v[0], v[1])
    });
}

#[test]
fn maxpool_same() {
    let mut r = rng(10);
    let mut s = store_of(vec![separated(&[2, 5, 7, 2], &mut r)]);
    check_op("maxpool", &mut s, OP_TOL, |g, v| g.maxpool_same(v[0], 3, 2));
    let mut s = store_of(vec![separated(&[1, 6, 6, 1], &mut r)]);
    check_op("maxpool even", &mut s, OP_TOL, |g, v| {
        g.maxpool_same(v[0], 3, 2)
    });
}

#[test]
fn shape_ops() {
    let mut r = rng(11);
    let mut s = store_of(vec![random(&[2, 3, 4], &mut r)]);
    check_op("permute", &mut s, OP_TOL, |g, v| {
        g.permute(v[0], &[2, 0, 1])
    });
    check_op("reshape", &mut s, OP_TOL, |g, v| g.reshape(v[0], &[6, 4]));
    check_op("select_token", &mut s, OP_TOL, |g, v| {
        g.select_token(v[0], 1)
    });
    let mut s = store_of(vec![random(&[2, 3, 4], &mut r), random(&[4], &mut r)]);
    check_op("prepend_token", &mut s, OP_TOL, |g, v| {
        g.prepend_token(v[0], v[1])
    });
}

#[test]
fn cross_entropy_and_linear() {
    let mut r = rng(12);
    let mut s = store_of(vec![random(&[4, 2], &mut r)]);
    check_op("cross_entropy", &mut s, OP_TOL, |g, v| {
        g.cross_entropy(v[0], &[0, 1, 1, 0])
    });
    let mut s = store_of(vec![
        random(&[3, 4], &mut r),
        random(&[4, 2], &mut r),
        random(&[2], &mut r),
    ]);
    check_op("linear", &mut s, OP_TOL, |g, v| {
        g.linear(v[0], v[1], Some(v[2]))
    });
}

#[test]
fn scaled_dot_product() {
    let mut r = rng(13);
    let mut s = store_of(vec![
        random(&[2, 3, 4], &mut r),
        random(&[2, 5, 4], &mut r),
        random(&[2, 5, 3], &mut r),
    ]);
    check_op("attention", &mut s, OP_TOL, |g, v| {
        Ok(scaled_dot_product_attention(g, v[0], v[1], v[2])?.0)
    });
}

#[test]
fn sequence_pooling() {
    let mut r = rng(14);
    let mut s = store_of(vec![random(&[2, 5, 3], &mut r), random(&[3, 1], &mut r)]);
    check_op("seq_pool", &mut s, OP_TOL, |g, v| {
        Ok(seq_pool(g, v[0], v[1])?.0)
    });
}

#[test]
fn multi_head_attention_layer() {
    let mut r = rng(15);
    let mut store = ParamStore::new();
    let x = store.add("x", random(&[2, 4, 6], &mut r));
    let w = MultiHeadWeights::new(&mut store, "mha", 6, 2, None, &mut r).unwrap();
    let report = grad_check(
        &mut store,
        |s| {
            let mut g = Graph::inference();
            let xv = g.param(s, x);
            let y = multi_head_attention(&mut g, s, xv, &w)?;
            let loss = reduce(&mut g, y)?;
            Ok((g, loss))
        },
        H,
        Coords::All,
    )
    .unwrap();
    assert_below("multi-head attention", &report, OP_TOL);
}

#[test]
fn two_layer_encoder_stack() {
    let mut r = rng(16);
    let mut store = ParamStore::new();
    let x = store.add("x", random(&[2, 5, 8], &mut r));
    let stack = EncoderStack::new(&mut store, 2, 8, 2, None, 16, 0.0, &mut r).unwrap();
    let report = grad_check(
        &mut store,
        |s| {
            let mut g = Graph::inference();
            let xv = g.param(s, x);
            let y = stack.forward(&mut g, s, xv)?;
            let loss = reduce(&mut g, y)?;
            Ok((g, loss))
        },
        H,
        Coords::Top { per_param: 8 },
    )
    .unwrap();
    assert!(report.checked >= 20);
    assert_below("encoder L=2", &report, COMPOSITE_TOL);
}

fn batch(channels: usize, len: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut r = rng(seed);
    let x = Tensor::new(
        &[4, channels, len],
        (0..4 * channels * len)
            .map(|_| r.random_range(-2.0..2.0))
            .collect(),
    )
    .unwrap();
    (x, vec![0, 1, 1, 0])
}

/// Full-size model loss on a 4-sample batch, checked on `coords`.
fn model_report(variant: Variant, coords: Coords, corrupt: bool) -> GradCheckReport {
    let mut cfg = ModelConfig::preset(variant, 1, 2, 18, 128);
    cfg.dropout_rate = 0.0;
    let mut model = build_model::<f64>(&cfg, 3).unwrap();
    let (x, labels) = batch(18, 128, 5);
    let mut store = std::mem::take(&mut model.store);
    let mut f = |s: &ParamStore<f64>| {
        model.store.clone_from(s);
        let mut g = Graph::inference();
        let xv = model.input(&mut g, &x)?;
        let logits = model.forward(&mut g, xv)?;
        let loss = g.cross_entropy(logits, &labels)?;
        Ok((g, loss))
    };
    let mut analytic = analytic_gradients(&store, &mut f).unwrap();
    if corrupt {
        for g in analytic.iter_mut().flatten() {
            *g *= 1.05;
        }
    }
    compare_with_finite_differences(&mut store, &mut f, &analytic, H, coords).unwrap()
}

#[test]
fn full_models_random_coordinates() {
    for variant in [Variant::Vit, Variant::Lvt, Variant::Lct] {
        let report = model_report(
            variant,
            Coords::Sample {
                count: 50,
                seed: 11,
            },
            false,
        );
        assert_eq!(report.checked, 50);
        assert!(
            report.skipped_kinks < 25,
            "{variant}: {} kinks",
            report.skipped_kinks
        );
        assert_below(&format!("{variant}-1/2 sampled"), &report, COMPOSITE_TOL);
    }
}

#[test]
fn full_models_largest_gradients() {
    for variant in [Variant::Vit, Variant::Lvt, Variant::Lct] {
        let report = model_report(variant, Coords::Top { per_param: 2 }, false);
        assert_below(&format!("{variant}-1/2 top"), &report, COMPOSITE_TOL);
    }
}

#[test]
fn corrupted_backward_is_detected() {
    let report = model_report(Variant::Lct, Coords::Top { per_param: 2 }, true);
    assert!(report.max_rel_error > 1e-2, "{report:?}");
}
