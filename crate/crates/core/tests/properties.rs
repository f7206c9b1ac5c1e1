use lct_core::ingest::{
    extract_intervals, select_channels, ChannelMatrix, Recording, SeizureInterval,
};
use lct_core::models::seq_pool;
use lct_core::preprocess::{
    segment, segment_count, segment_step, split, zscore_normalize, SegmentSet,
};
use lct_core::tensor::optim::adam_step;
use lct_core::tensor::{conv2d_output_shape, maxpool_same_output_shape, Graph, ParamStore, Tensor};
use proptest::prelude::*;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

/// Shape plus matching data, each dimension in 1..=max_dim.
fn shaped(
    rank: usize,
    max_dim: usize,
    scale: f64,
) -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    prop::collection::vec(1..=max_dim, rank).prop_flat_map(move |shape| {
        let n: usize = shape.iter().product();
        (Just(shape), prop::collection::vec(-scale..scale, n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn softmax_rows_sum_to_one((shape, data) in shaped(2, 12, 50.0)) {
        let mut g = Graph::<f64>::inference();
        let x = g.input(tensor(&shape, data));
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(shape[1]) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn seq_pool_weights_sum_to_one((shape, data) in shaped(3, 9, 5.0), seed in any::<u64>()) {
        let d = shape[2];
        let score: Vec<f64> = (0..d).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f64 / 100.0) - 5.0).collect();
        let mut g = Graph::<f64>::inference();
        let y = g.input(tensor(&shape, data));
        let s = g.input(tensor(&[d, 1], score));
        let (_, w) = seq_pool(&mut g, y, s).unwrap();
        prop_assert_eq!(g.shape(w), &[shape[0], shape[1]]);
        for row in g.value(w).data().chunks(shape[1]) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

fn naive_permute(x: &Tensor<f64>, axes: &[usize]) -> Vec<f64> {
    let shape = x.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let n: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(n);
    for flat in 0..n {
        let mut rem = flat;
        let mut out_idx = vec![0; out_shape.len()];
        for i in (0..out_shape.len()).rev() {
            out_idx[i] = rem % out_shape[i];
            rem /= out_shape[i];
        }
        let mut src = vec![0; shape.len()];
        for (i, &a) in axes.iter().enumerate() {
            src[a] = out_idx[i];
        }
        out.push(x.get(&src));
    }
    out
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

fn column_matrix(channels: usize, samples: usize) -> ChannelMatrix {
    ChannelMatrix::new(
        channels,
        samples,
        (0..channels * samples).map(|i| i as f64).collect(),
    )
    .unwrap()
}

proptest! {
    #[test]
    fn permute_matches_naive(
        (shape, data) in (1usize..=4).prop_flat_map(|r| shaped(r, 5, 1.0)),
        seed in any::<u64>(),
    ) {
        let mut axes: Vec<usize> = (0..shape.len()).collect();
        // deterministic shuffle from the seed
        let mut s = seed;
        for i in (1..axes.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            axes.swap(i, (s >> 33) as usize % (i + 1));
        }
        let x = tensor(&shape, data);
        let y = x.permute(&axes).unwrap();
        let expect = naive_permute(&x, &axes);
        prop_assert_eq!(y.data(), expect.as_slice());
    }

    #[test]
    fn matmul_matches_naive(m in 1usize..9, k in 1usize..9, n in 1usize..9, seed in any::<u32>()) {
        let val = |i: usize| (((i as u64 + seed as u64) * 2654435761) % 1000) as f64 / 250.0 - 2.0;
        let a: Vec<f64> = (0..m * k).map(val).collect();
        let b: Vec<f64> = (0..k * n).map(|i| val(i + 7919)).collect();
        let c = tensor(&[m, k], a.clone()).matmul(&tensor(&[k, n], b.clone())).unwrap();
        for (x, y) in c.data().iter().zip(naive_matmul(&a, &b, m, k, n)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zscore_is_idempotent((shape, data) in shaped(2, 20, 100.0)) {
        prop_assume!(shape[0] * shape[1] >= 2);
        let x = ChannelMatrix::new(shape[0], shape[1], data).unwrap();
        prop_assume!(zscore_normalize(&x).is_ok());
        let once = zscore_normalize(&x).unwrap();
        let twice = zscore_normalize(&once).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn segments_follow_coverage_map(n in 1usize..4, t in 1usize..200, len in 1usize..50, overlap in 0.0f64..0.9) {
        prop_assume!(len <= t);
        let Ok(step) = segment_step(len, overlap) else { return Ok(()); };
        let x = column_matrix(n, t);
        let s = segment(&x, len, overlap).unwrap();
        let k = segment_count(t, len, step);
        prop_assert_eq!(s.shape(), &[k, n, len]);
        prop_assert_eq!(k, (t - len) / step + 1);
        let mut covered = vec![false; t];
        for seg in 0..k {
            for c in 0..n {
                for j in 0..len {
                    prop_assert_eq!(s.get(&[seg, c, j]), x.get(c, seg * step + j));
                    covered[seg * step + j] = true;
                }
            }
        }
        // exactly the columns before the last segment's end are covered
        let end = (k - 1) * step + len;
        prop_assert!(covered[..end].iter().all(|&c| c));
        prop_assert!(covered[end..].iter().all(|&c| !c));
        prop_assert!(t - end < step);
    }

    #[test]
    fn split_partitions_segments(per_class in 4usize..120, extra in 0usize..30, seed in any::<u64>()) {
        let k = 2 * per_class + extra;
        let labels: Vec<u8> = (0..k).map(|i| u8::from(i < per_class)).collect();
        let set = SegmentSet::new(1, 1, (0..k).map(|i| i as f32).collect(), labels).unwrap();
        let Ok(s) = split(&set, seed) else { return Ok(()); };
        let mut all: Vec<usize> = s.train_indices.iter().chain(&s.val_indices).chain(&s.test_indices).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..k).collect::<Vec<_>>());
        prop_assert!(!s.train.is_empty() && !s.val.is_empty() && !s.test.is_empty());
    }

    #[test]
    fn interval_columns_sum_to_total(t in 1usize..2000, cuts in prop::collection::vec(0usize..2000, 0..8)) {
        let mut cuts: Vec<usize> = cuts.into_iter().map(|c| c % (t + 1)).collect();
        cuts.sort_unstable();
        cuts.dedup();
        let intervals: Vec<SeizureInterval> = cuts
            .chunks_exact(2)
            .map(|w| SeizureInterval { start_s: w[0] as f64 / 256.0, end_s: w[1] as f64 / 256.0 })
            .collect();
        let m = column_matrix(2, t);
        let (ictal, rest) = extract_intervals(&m, &intervals, 256.0).unwrap();
        prop_assert_eq!(ictal.samples() + rest.samples(), t);
        let mut cols: Vec<usize> = ictal.row(0).iter().chain(rest.row(0)).map(|&v| v as usize).collect();
        cols.sort_unstable();
        prop_assert_eq!(cols, (0..t).collect::<Vec<_>>());
    }

    #[test]
    fn channel_selection_is_idempotent(n in 1usize..8, pick in prop::collection::vec(0usize..8, 1..8)) {
        let labels: Vec<String> = (0..n).map(|i| format!("L{i}")).collect();
        let data = (0..n).map(|c| (0..5).map(|t| (c * 10 + t) as f64).collect()).collect();
        let rec = Recording::new(labels.clone(), 256.0, data).unwrap();
        let wanted: Vec<&str> = pick.iter().map(|&i| labels[i % n].as_str()).collect();
        let once = select_channels(&rec, &wanted).unwrap();
        let rows: Vec<Vec<f64>> = (0..once.channels()).map(|c| once.row(c).to_vec()).collect();
        let again = Recording::new(wanted.iter().map(|s| s.to_string()).collect(), 256.0, rows).unwrap();
        prop_assert_eq!(select_channels(&again, &wanted).unwrap(), once);
    }

    #[test]
    fn inference_dropout_is_identity((shape, data) in shaped(2, 10, 3.0), rate in 0.0f64..0.95, seed in any::<u64>()) {
        let mut g = Graph::<f64>::new(false, seed);
        let x = g.input(tensor(&shape, data.clone()));
        let y = g.dropout(x, rate).unwrap();
        let same: Vec<u64> = g.value(y).data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(same, data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn adam_is_bit_reproducible(init in prop::collection::vec(-1.0f64..1.0, 1..20), t in 1u64..50) {
        let run = || {
            let mut store = ParamStore::new();
            let id = store.add("w", tensor(&[init.len()], init.clone()));
            for step in 1..=t {
                let p = store.get_mut(id);
                let grads: Vec<f64> = p.tensor.data().iter().map(|w| 2.0 * w - 0.3).collect();
                p.tensor.grad_mut().copy_from_slice(&grads);
                adam_step(&mut store, 1e-3, step, 0.9, 0.999, 1e-8).unwrap();
            }
            store.get(id).tensor.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn conv_and_pool_shapes_exhaustive() {
    for k in [1, 2, 3] {
        for h in k..=64 {
            for w in k..=64 {
                let mut g = Graph::<f64>::inference();
                let x = g.input(Tensor::zeros(&[1, h, w, 1]));
                let f = g.input(Tensor::zeros(&[k, k, 1, 2]));
                let y = g.conv2d(x, f).unwrap();
                assert_eq!(
                    conv2d_output_shape(h, w, k, k),
                    Some((h - k + 1, w - k + 1))
                );
                assert_eq!(g.shape(y), &[1, h - k + 1, w - k + 1, 2]);
                let p = g.maxpool_same(x, 3, 2).unwrap();
                let expect = (h.div_ceil(2), w.div_ceil(2));
                assert_eq!(maxpool_same_output_shape(h, w, 2), expect);
                assert_eq!(g.shape(p), &[1, expect.0, expect.1, 1]);
            }
        }
    }
}
