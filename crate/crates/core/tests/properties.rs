use std::sync::Arc;
use std::thread;

use faasml::collective::{bsp_round, chunk_range, CollectiveContext};
use faasml::costmodel::{faas_time, hybrid_time, iaas_time, variant_cost, CostModelParams, FaasChannel, Infra};
use faasml::model::kmeans_assign_stats;
use faasml::{Batch, ClusterStats, Dataset, MemStore, ModelKind, ModelVector, Pattern, ReduceOp};
use proptest::prelude::*;

fn dataset(rows: usize, d: usize, values: &[f64], labels: &[bool]) -> Dataset {
    let y = labels.iter().take(rows).map(|&b| if b { 1.0 } else { -1.0 }).collect();
    Dataset::new(values[..rows * d].to_vec(), y, d).unwrap()
}

/// Central-difference gradient of the mean batch loss.
fn numeric_grad(kind: ModelKind, w: &[f64], batch: &Batch<'_>) -> Vec<f64> {
    let h = 1e-6;
    (0..w.len())
        .map(|i| {
            let mut a = w.to_vec();
            let mut b = w.to_vec();
            a[i] += h;
            b[i] -= h;
            let fa = kind.loss_grad(&ModelVector::from(a), batch).unwrap().0;
            let fb = kind.loss_grad(&ModelVector::from(b), batch).unwrap().0;
            (fa - fb) / (2.0 * h)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn smooth_gradients_match_finite_differences(
        rows in 1usize..20,
        d in 1usize..6,
        values in prop::collection::vec(-2.0f64..2.0, 120),
        labels in prop::collection::vec(any::<bool>(), 20),
        w in prop::collection::vec(-1.0f64..1.0, 6),
    ) {
        let data = dataset(rows, d, &values, &labels);
        let batch = data.all();
        for kind in [ModelKind::Lr, ModelKind::LeastSquares] {
            let (_, g) = kind.loss_grad(&ModelVector::from(w[..d].to_vec()), &batch).unwrap();
            let num = numeric_grad(kind, &w[..d], &batch);
            for (a, b) in g.iter().zip(&num) {
                prop_assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{kind:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn kmeans_stats_match_brute_force_and_merge(
        rows in 1usize..30,
        d in 1usize..4,
        k in 1usize..5,
        values in prop::collection::vec(-5.0f64..5.0, 120),
        cents in prop::collection::vec(-5.0f64..5.0, 16),
        split in 0usize..30,
    ) {
        let data = dataset(rows, d, &values, &vec![true; rows]);
        let c = ModelVector::from(cents[..k * d].to_vec());
        let stats = kmeans_assign_stats(&c, k, &data.all()).unwrap();

        let mut oracle = ClusterStats::empty(k, d);
        for r in 0..rows {
            let x = data.row(r);
            let dists: Vec<f64> = (0..k)
                .map(|j| (0..d).map(|i| (x[i] - c[j * d + i]).powi(2)).sum())
                .collect();
            let best = (0..k).fold(0, |b, j| if dists[j] < dists[b] { j } else { b });
            oracle.counts[best] += 1;
            for (s, xi) in oracle.sums[best * d..(best + 1) * d].iter_mut().zip(x) {
                *s += xi;
            }
            oracle.sse += dists[best];
        }
        prop_assert_eq!(&stats.counts, &oracle.counts);
        prop_assert!((stats.sse - oracle.sse).abs() <= 1e-9 * (1.0 + oracle.sse));

        let cut = split.min(rows);
        let mut merged = kmeans_assign_stats(&c, k, &Batch::range(&data, 0..cut)).unwrap();
        merged.merge(&kmeans_assign_stats(&c, k, &Batch::range(&data, cut..rows)).unwrap()).unwrap();
        prop_assert_eq!(&merged.counts, &stats.counts);
        prop_assert_eq!(merged.rows(), rows as u64);
    }

    #[test]
    fn cost_breakdowns_are_additive(
        w in 1usize..300,
        s in 1.0f64..1e5,
        m in 1e-6f64..100.0,
        r in 0.0f64..200.0,
        c in 0.0f64..1e4,
        rounds in 0.01f64..100.0,
        ec in any::<bool>(),
    ) {
        let p = CostModelParams {
            w, s, m, r_faas: r, r_iaas: r, c_faas: c, c_iaas: c, rounds_per_epoch: rounds,
            channel: if ec { FaasChannel::Ec } else { FaasChannel::S3 },
            ..CostModelParams::default()
        };
        for (infra, b) in [
            (Infra::Faas, faas_time(&p).unwrap()),
            (Infra::Iaas, iaas_time(&p).unwrap()),
            (Infra::Hybrid, hybrid_time(&p).unwrap()),
        ] {
            let sum = b.startup_s + b.loading_s + b.compute_s + b.communication_s;
            prop_assert!((b.total_s - sum).abs() <= 1e-9 * sum.max(1.0));
            prop_assert!((b.loading_s - s / p.b_s3).abs() <= 1e-12 * b.loading_s);
            prop_assert!(variant_cost(&p, infra, b.total_s) >= 0.0);
        }
        let slower = faas_time(&CostModelParams { c_faas: c + 1.0, ..p.clone() }).unwrap();
        prop_assert!(slower.total_s >= faas_time(&p).unwrap().total_s);
    }

    #[test]
    fn chunks_tile_the_vector(dim in 0usize..500, w in 1usize..40) {
        let mut next = 0;
        for j in 0..w {
            let r = chunk_range(dim, w, j);
            prop_assert_eq!(r.start, next);
            next = r.end;
        }
        prop_assert_eq!(next, dim);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn weighted_mean_rounds_agree_across_patterns(
        w in 1usize..6,
        dim in 1usize..40,
        seed in prop::collection::vec(-10.0f64..10.0, 240),
        weights in prop::collection::vec(1.0f64..50.0, 6),
    ) {
        let inputs: Vec<Vec<f64>> = (0..w).map(|r| seed[r * dim..(r + 1) * dim].to_vec()).collect();
        let total: f64 = weights[..w].iter().sum();
        let oracle: Vec<f64> = (0..dim)
            .map(|i| (0..w).map(|r| weights[r] * inputs[r][i]).sum::<f64>() / total)
            .collect();
        for pattern in [Pattern::AllReduce, Pattern::ScatterReduce] {
            let store = Arc::new(MemStore::new());
            let outs: Vec<ModelVector> = thread::scope(|s| {
                let hs: Vec<_> = (0..w)
                    .map(|r| {
                        let store = store.clone();
                        let v = ModelVector::from(inputs[r].clone());
                        let wt = weights[r];
                        s.spawn(move || {
                            let ctx = CollectiveContext::new(store.as_ref(), w, r, 0, 0, ReduceOp::WeightedMean).unwrap();
                            bsp_round(&ctx, pattern, &v, wt).unwrap()
                        })
                    })
                    .collect();
                hs.into_iter().map(|h| h.join().unwrap()).collect()
            });
            for o in &outs {
                for (a, b) in o.iter().zip(&oracle) {
                    prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{pattern:?}: {a} vs {b}");
                }
            }
        }
    }
}
