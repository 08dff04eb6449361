//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Run with `cargo test -p faasml-core --test acceptance -- --nocapture`.

use std::sync::Arc;
use std::thread;
use std::time::Instant;

use faasml::collective::{bsp_round, parse_key, BlobKey, CollectiveContext, Pattern, ReduceOp};
use faasml::costmodel::{estimate_epochs, faas_time, iaas_time, CostModelParams, EstimateSpec, FaasChannel};
use faasml::data::{generate_synthetic, Task};
use faasml::model::ModelVector;
use faasml::optim::Algorithm;
use faasml::runtime::{run_job_traced, run_job_with_data, DataSource, JobConfig, Mode, ModelName, Straggler, SyncMode};
use faasml::storage::{lookup_profile, with_profile, BlobStore, InstrumentedStore, MemStore, StoreOp, StoreTrace};
use faasml::{ClockMode, Dataset, Error, VirtualClock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(id: u32, name: &str, ok: bool, detail: String) {
    println!(
        "{} criterion {id:02} {name}: {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

/// One collective round with `inputs.len()` threads over a shared in-memory store.
fn round(pattern: Pattern, inputs: &[Vec<f64>]) -> (Vec<ModelVector>, Arc<StoreTrace>) {
    let w = inputs.len();
    let shared = Arc::new(MemStore::new());
    let trace = StoreTrace::new();
    let outs = thread::scope(|s| {
        let handles: Vec<_> = inputs
            .iter()
            .enumerate()
            .map(|(r, v)| {
                let store = InstrumentedStore::new(shared.clone(), r, trace.clone());
                s.spawn(move || {
                    let ctx = CollectiveContext::new(&store, w, r, 0, 0, ReduceOp::Sum).unwrap();
                    bsp_round(&ctx, pattern, &ModelVector::from(v.clone()), 1.0).unwrap()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    (outs, trace)
}

#[test]
fn criterion_01_collective_equivalence() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for w in [1, 2, 3, 5, 8, 16] {
        for dim in [1, 7, 1000] {
            let inputs: Vec<Vec<f64>> = (0..w)
                .map(|_| (0..dim).map(|_| rng.random_range(-1e3..1e3)).collect())
                .collect();
            let mut oracle = vec![0.0; dim];
            for v in &inputs {
                for (o, x) in oracle.iter_mut().zip(v) {
                    *o += x;
                }
            }
            let (ar, _) = round(Pattern::AllReduce, &inputs);
            let (sr, _) = round(Pattern::ScatterReduce, &inputs);
            for (a, s) in ar.iter().zip(&sr) {
                worst = worst
                    .max(rel_err(a, &oracle))
                    .max(rel_err(s, &oracle))
                    .max(rel_err(a, s));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "collective equivalence",
        worst <= 1e-12 && secs < 10.0,
        format!("max rel err {worst:e}, {secs:.2} s"),
    );
}

#[test]
fn criterion_02_transfer_count() {
    let mut detail = Vec::new();
    let mut ok = true;
    for w in [2usize, 5, 10] {
        let inputs: Vec<Vec<f64>> = (0..w).map(|r| vec![r as f64; 1000]).collect();
        let (_, trace) = round(Pattern::AllReduce, &inputs);
        let all = trace.transfers();
        let (_, trace) = round(Pattern::ScatterReduce, &inputs);
        let per_worker: Vec<usize> = (0..w).map(|r| trace.transfers_by(r)).collect();
        ok &= all == 3 * w - 2 && per_worker.iter().all(|&t| t == 3 * w - 2);
        detail.push(format!(
            "w={w}: allreduce {all}, scatterreduce per worker {per_worker:?}"
        ));
    }
    verdict(2, "transfer count 3w-2", ok, detail.join("; "));
}

#[test]
fn criterion_03_ma_equals_ga_at_h1() {
    let data = Arc::new(generate_synthetic(800, 6, Task::Classification, 3).unwrap());
    let base = JobConfig {
        workers: 4,
        batch_size: 200,
        eta: 0.5,
        threshold: -1.0,
        max_epochs: 50,
        record_models: true,
        ..JobConfig::default()
    };
    let ga = run_job_with_data(&base, data.clone()).unwrap();
    let ma = run_job_with_data(
        &JobConfig {
            algorithm: Algorithm::MaSgd,
            local_epochs: 1,
            ..base.clone()
        },
        data,
    )
    .unwrap();
    let worst = ga
        .model_snapshots
        .iter()
        .zip(&ma.model_snapshots)
        .map(|(a, b)| rel_err(b, a))
        .fold(0.0, f64::max);
    let n = ga.model_snapshots.len().min(ma.model_snapshots.len());
    verdict(
        3,
        "MA-SGD equals GA-SGD at H=1",
        n == 50 && worst <= 1e-12,
        format!("{n} rounds, max rel err {worst:e}"),
    );
}

/// Least squares on features and labels scaled by 0.1, so the local curvature per
/// worker is of the order of rho = 1.
fn ridge_data() -> Dataset {
    let raw = generate_synthetic(400, 5, Task::Regression, 7).unwrap();
    let f: Vec<f64> = raw.features().iter().map(|v| v * 0.1).collect();
    let y: Vec<f64> = raw.labels().iter().map(|v| v * 0.1).collect();
    Dataset::new(f, y, 5).unwrap()
}

/// Solves `(A^T A + lambda I) x = A^T b` by Gauss-Jordan elimination.
fn ridge_solution(a: &Dataset, lambda: f64) -> Vec<f64> {
    let d = a.n_features();
    let mut m = vec![vec![0.0; d + 1]; d];
    for r in 0..a.n_rows() {
        let x = a.row(r);
        for i in 0..d {
            for j in 0..d {
                m[i][j] += x[i] * x[j];
            }
            m[i][d] += x[i] * a.label(r);
        }
    }
    for (i, row) in m.iter_mut().enumerate() {
        row[i] += lambda;
    }
    for c in 0..d {
        let p = m[c][c];
        m[c].iter_mut().for_each(|v| *v /= p);
        let pivot = m[c].clone();
        for (r, row) in m.iter_mut().enumerate() {
            if r != c {
                let f = row[c];
                row.iter_mut().zip(&pivot).for_each(|(v, p)| *v -= f * p);
            }
        }
    }
    m.iter().map(|row| row[d]).collect()
}

#[test]
fn criterion_04_admm_ridge_oracle() {
    let start = Instant::now();
    let data = Arc::new(ridge_data());
    let oracle = ridge_solution(&data, 0.1);
    let cfg = JobConfig {
        model: ModelName::LeastSquares,
        algorithm: Algorithm::Admm,
        workers: 4,
        rho: 1.0,
        lambda: 0.1,
        local_epochs: 10,
        batch_size: 100,
        eta: 40.0,
        threshold: -1.0,
        max_epochs: 500,
        ..JobConfig::default()
    };
    let r = run_job_with_data(&cfg, data).unwrap();
    let err = r
        .model
        .iter()
        .zip(&oracle)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let residual = r.admm_residuals.last().copied().unwrap_or(f64::INFINITY);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        4,
        "ADMM ridge oracle",
        r.rounds <= 50 && err <= 1e-3 && residual <= 1e-3 && secs < 30.0,
        format!(
            "{} rounds, |z - x*| = {err:e}, primal residual {residual:e}, {secs:.2} s",
            r.rounds
        ),
    );
}

#[test]
fn criterion_05_admm_communicates_less() {
    let data = Arc::new(generate_synthetic(20_000, 10, Task::Classification, 42).unwrap());
    let ga = JobConfig {
        workers: 4,
        batch_size: 20_000 / 100,
        threshold: 0.45,
        max_epochs: 100,
        ..JobConfig::default()
    };
    let a = run_job_with_data(&ga, data.clone()).unwrap();
    let admm = JobConfig {
        algorithm: Algorithm::Admm,
        local_epochs: 10,
        max_epochs: 1000,
        ..ga.clone()
    };
    let b = run_job_with_data(&admm, data).unwrap();
    let ok = a.converged && b.converged && a.rounds >= 5 * b.rounds;
    verdict(
        5,
        "ADMM needs fewer rounds than GA-SGD",
        ok,
        format!(
            "GA-SGD {} rounds ({} epochs), ADMM {} rounds ({} epochs)",
            a.rounds, a.epochs, b.rounds, b.epochs
        ),
    );
}

#[test]
fn criterion_06_cost_model_arithmetic() {
    let at = |w: usize| CostModelParams {
        w,
        ..CostModelParams::default()
    };
    let f10 = faas_time(&at(10)).unwrap();
    let f200 = faas_time(&at(200)).unwrap();
    let i10 = iaas_time(&at(10)).unwrap();
    let i200 = iaas_time(&at(200)).unwrap();
    let checks = [
        (f10.startup_s, 1.2),
        (f200.startup_s, 35.0),
        (i10.startup_s, 132.0),
        (i200.startup_s, 606.0),
        (f10.loading_s, 8000.0 / 65.0),
        (i10.loading_s, 8000.0 / 65.0),
    ];
    let worst = checks.iter().map(|(got, want)| (got - want).abs()).fold(0.0, f64::max);
    verdict(
        6,
        "cost model arithmetic",
        worst <= 1e-6 && (f10.loading_s - 123.076923).abs() < 1e-6,
        format!(
            "startup faas {} / {}, iaas {} / {}, loading {:.6}",
            f10.startup_s, f200.startup_s, i10.startup_s, i200.startup_s, f10.loading_s
        ),
    );
}

#[test]
fn criterion_07_model_matches_simulator() {
    let (n, d, epochs, compute) = (2000usize, 10usize, 5usize, 200.0);
    let mut detail = Vec::new();
    let mut ok = true;
    for (w, channel) in [(5usize, "s3"), (10, "s3"), (10, "elasticache_t3")] {
        let cfg = JobConfig {
            workers: w,
            channel: channel.into(),
            algorithm: Algorithm::MaSgd,
            threshold: -1.0,
            max_epochs: epochs,
            compute_s_per_epoch: Some(compute),
            data: DataSource::Synthetic { n, d, seed: None },
            ..JobConfig::default()
        };
        let data = Arc::new(cfg.load_dataset().unwrap());
        let sim = run_job_with_data(&cfg, data.clone()).unwrap();
        let p = CostModelParams {
            s: data.size_bytes() as f64 / 1e6,
            m: (d * 8) as f64 / 1e6,
            w,
            r_faas: epochs as f64,
            c_faas: compute,
            rounds_per_epoch: 1.0,
            channel: if channel == "s3" {
                FaasChannel::S3
            } else {
                FaasChannel::Ec
            },
            channel_startup_s: lookup_profile(channel).unwrap().startup_s,
            ..CostModelParams::default()
        };
        let model = faas_time(&p).unwrap();
        let dev = (sim.breakdown.total_s - model.total_s).abs() / model.total_s;
        ok &= dev <= 0.10;
        detail.push(format!(
            "w={w} {channel}: simulated {:.2} s, model {:.2} s ({:.1}%)",
            sim.breakdown.total_s,
            model.total_s,
            dev * 100.0
        ));
    }
    verdict(7, "cost model vs simulator", ok, detail.join("; "));
}

#[test]
fn criterion_08_epoch_estimator() {
    let data = Arc::new(generate_synthetic(20_000, 10, Task::Classification, 5).unwrap());
    let mut detail = Vec::new();
    let mut ok = true;
    for (alg, h) in [(Algorithm::GaSgd, 1usize), (Algorithm::Admm, 2)] {
        let cfg = JobConfig {
            workers: 1,
            algorithm: alg,
            local_epochs: h,
            batch_size: 1000,
            eta: 0.01,
            threshold: 0.5,
            max_epochs: 200,
            ..JobConfig::default()
        };
        let full = run_job_with_data(&cfg, data.clone()).unwrap();
        let spec = EstimateSpec {
            model: cfg.model_kind(),
            algorithm: alg,
            eta: cfg.eta,
            batch_size: cfg.batch_size,
            local_epochs: h,
            threshold: cfg.threshold,
            sample_frac: 0.1,
            seed: 3,
            max_epochs: 400,
            ..EstimateSpec::default()
        };
        let est = estimate_epochs(&data, &spec).unwrap();
        let dev = (est as f64 - full.epochs as f64).abs() / full.epochs as f64;
        ok &= full.converged && dev <= 0.20;
        detail.push(format!(
            "{}: full {} epochs, estimate {} ({:.0}%)",
            alg.name(),
            full.epochs,
            est,
            dev * 100.0
        ));
    }
    verdict(8, "sampling epoch estimator", ok, detail.join("; "));
}

#[test]
fn criterion_09_respawn_transparency() {
    let data = Arc::new(generate_synthetic(2000, 10, Task::Classification, 11).unwrap());
    let base = JobConfig {
        workers: 4,
        threshold: -1.0,
        max_epochs: 8,
        compute_s_per_epoch: Some(100.0),
        lifetime_s: f64::MAX,
        ..JobConfig::default()
    };
    let free = run_job_with_data(&base, data.clone()).unwrap();
    let limited = run_job_with_data(
        &JobConfig {
            lifetime_s: 60.0,
            checkpoint_margin_s: 20.0,
            ..base.clone()
        },
        data,
    )
    .unwrap();
    let per_worker_min = limited.workers.iter().map(|w| w.respawns).min().unwrap_or(0);
    let err = rel_err(&limited.model, &free.model);
    verdict(
        9,
        "respawn transparency",
        per_worker_min >= 3 && err <= 1e-12,
        format!(
            "{} respawns in total (at least {per_worker_min} per worker), rel err {err:e}",
            limited.respawns
        ),
    );
}

#[test]
fn criterion_10_dynamodb_item_limit() {
    let timeline = VirtualClock::new(1, ClockMode::Virtual);
    let store = with_profile(
        Arc::new(MemStore::new()),
        lookup_profile("dynamodb").unwrap(),
        timeline.worker(0),
        timeline.clone(),
    );
    let over = store.put("big", &vec![0u8; 400 * 1024 + 1]);
    let at = store.put("ok", &vec![0u8; 400 * 1024]);
    let ok = matches!(
        over,
        Err(Error::PayloadTooLarge {
            size: 409_601,
            limit: 409_600
        })
    ) && at.is_ok();
    verdict(
        10,
        "DynamoDB item limit",
        ok,
        format!("409601 bytes -> {over:?}; 409600 bytes -> {at:?}"),
    );
}

#[test]
fn criterion_11_more_workers_finish_sooner() {
    let data = Arc::new(generate_synthetic(2000, 10, Task::Classification, 4).unwrap());
    let cfg = |w: usize| JobConfig {
        workers: w,
        algorithm: Algorithm::MaSgd,
        threshold: -1.0,
        max_epochs: 5,
        compute_s_per_epoch: Some(100.0),
        lifetime_s: f64::MAX,
        ..JobConfig::default()
    };
    let one = run_job_with_data(&cfg(1), data.clone()).unwrap();
    let ten = run_job_with_data(&cfg(10), data).unwrap();
    verdict(
        11,
        "compute-bound job speeds up with workers",
        ten.breakdown.total_s < one.breakdown.total_s,
        format!(
            "w=1 {:.2} s, w=10 {:.2} s",
            one.breakdown.total_s, ten.breakdown.total_s
        ),
    );
}

#[test]
fn criterion_12_bsp_barrier_and_asp_progress() {
    let data = Arc::new(generate_synthetic(2000, 10, Task::Classification, 6).unwrap());
    let bsp = JobConfig {
        workers: 4,
        threshold: -1.0,
        max_epochs: 3,
        stragglers: vec![Straggler { rank: 2, factor: 5.0 }],
        ..JobConfig::default()
    };
    let (_, events) = run_job_traced(&bsp, data.clone()).unwrap();
    let mut merged_rounds = Vec::new();
    let mut violations = 0;
    let mut local_puts = 0;
    for e in events.iter().filter(|e| e.op == StoreOp::Put) {
        match parse_key(&e.key) {
            Ok(BlobKey::Merged { epoch, iter }) => merged_rounds.push((epoch, iter)),
            Ok(BlobKey::Local { epoch, iter, .. }) => {
                local_puts += 1;
                let published = merged_rounds.iter().filter(|r| **r < (epoch, iter)).count();
                let earlier = events
                    .iter()
                    .filter_map(|e| match parse_key(&e.key) {
                        Ok(BlobKey::Local {
                            epoch: le, iter: li, ..
                        }) if (le, li) < (epoch, iter) => Some((le, li)),
                        _ => None,
                    })
                    .collect::<std::collections::BTreeSet<_>>()
                    .len();
                if published < earlier {
                    violations += 1;
                }
            }
            _ => {}
        }
    }
    let barrier_ok = violations == 0 && local_puts > 0 && !merged_rounds.is_empty();

    let asp = JobConfig {
        workers: 2,
        sync: SyncMode::Asp,
        threshold: -1.0,
        max_epochs: 30,
        compute_s_per_epoch: Some(2.0),
        stragglers: vec![Straggler { rank: 1, factor: 10.0 }],
        ..JobConfig::default()
    };
    let r = run_job_with_data(&asp, data).unwrap();
    let rate = |i: usize| r.workers[i].iterations as f64 / r.workers[i].breakdown.total_s;
    let ratio = rate(0) / rate(1);
    verdict(
        12,
        "BSP barrier and ASP progress",
        barrier_ok && r.workers[1].iterations > 0 && ratio >= 5.0,
        format!(
            "{local_puts} local puts, {violations} barrier violations; ASP fast/straggler iteration rate {ratio:.2}"
        ),
    );
}

#[test]
fn criterion_13_ps_matches_allreduce() {
    let data = Arc::new(generate_synthetic(2000, 10, Task::Classification, 9).unwrap());
    let base = JobConfig {
        workers: 4,
        threshold: -1.0,
        max_epochs: 5,
        record_models: true,
        ..JobConfig::default()
    };
    let ar = run_job_with_data(&base, data.clone()).unwrap();
    let ps = run_job_with_data(
        &JobConfig {
            pattern: Pattern::Ps,
            mode: Mode::RealLocal,
            ..base.clone()
        },
        data,
    )
    .unwrap();
    let worst = ar
        .model_snapshots
        .iter()
        .zip(&ps.model_snapshots)
        .map(|(a, p)| rel_err(p, a))
        .fold(0.0, f64::max);
    let epochs = ar.model_snapshots.len().min(ps.model_snapshots.len());
    verdict(
        13,
        "parameter server over loopback matches allreduce",
        epochs == 5 && worst <= 1e-10,
        format!("{epochs} epochs compared, max rel err {worst:e}"),
    );
}
