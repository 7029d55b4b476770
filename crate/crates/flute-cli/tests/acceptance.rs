//! Acceptance gate: one test per criterion, each emitting a single
//! pass/fail line.

use flute_core::fedrep::{fedrep_train, FedRepConfig, HeadMode, InitMode};
use flute_core::flute::{
    self, flute_train, init_factored, local_gradients, population_gradients, regularizer_value,
    server_step, FluteConfig, GradientMode, RoundGradients,
};
use flute_core::general::{
    general_flute_train, local_loss, local_train_step, nc_gradient, nc_penalty, GeneralConfig,
};
use flute_core::linalg::truncated_svd;
use flute_core::metrics::InvSnr;
use flute_core::rng::{gaussian_vector, seeded_gaussian, RngStream};
use flute_core::synth::{make_classification_tasks, make_client_shards, make_ground_truth};
use flute_core::theory::{
    build_theta, lambda_tilde, region_membership, snr_and_dist, theta_population_step, ThetaState,
};
use flute_core::{Matrix, Vector};

fn report(name: &str, ok: bool, detail: &str) {
    println!("{name}: {} ({detail})", if ok { "pass" } else { "fail" });
    assert!(ok, "{name} failed: {detail}");
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[test]
fn ac1_penalty_identity() {
    // With gamma1 = 2 gamma2 the regularizer collapses to
    // gamma2 ||B^T B - W W^T||_F^2.
    let mut worst = 0.0f64;
    for seed in 0..200u64 {
        let b = seeded_gaussian(5, 3, 1.0, RngStream::new(seed, 0));
        let w = seeded_gaussian(3, 7, 1.0, RngStream::new(seed, 1));
        let gamma2 = 0.05 + (seed as f64) * 0.01;
        let value = regularizer_value(&b, &w, 2.0 * gamma2, gamma2);
        let imbalance = b.transpose() * &b - &w * w.transpose();
        let expected = gamma2 * imbalance.norm_squared();
        worst = worst.max((value - expected).abs() / expected.abs().max(1.0));
    }
    report(
        "AC1 penalty identity",
        worst <= 1e-9,
        &format!("max relative error {worst:.2e} over 200 pairs"),
    );
}

#[test]
fn ac2_theta_equivalence() {
    let gt = make_ground_truth(6, 4, 3).unwrap();
    let k = 2;
    let eta = 0.01;
    let cfg = FluteConfig {
        eta_l: eta,
        eta_r: eta,
        gamma1: 0.25,
        gamma2: 0.125,
        alpha: 1.0 / 60.0,
        rounds: 50,
        record_stride: 50,
        mode: GradientMode::Population,
        seed: 3,
    };
    let init = init_factored(6, k, 4, cfg.alpha, cfg.seed);
    let (_, iterates) = flute::flute_train_from(&cfg, &gt, None, init.clone()).unwrap();
    let lt = lambda_tilde(&gt, k);
    let mut theta = build_theta(&init, &gt).theta;
    let mut max_diff = 0.0f64;
    for model in iterates.iter().skip(1) {
        theta = theta_population_step(&theta, &lt, eta);
        max_diff = max_diff.max((&theta - build_theta(model, &gt).theta).amax());
    }
    report(
        "AC2 theta equivalence",
        max_diff <= 1e-9,
        &format!("max abs diff {max_diff:.2e} over 50 steps"),
    );
}

// Known failing. Empirical training converges to a fixed point whose
// distance to the rank-4 optimum is a statistical bias of roughly
// lambda_{k+1} * sqrt(d/N) (~1.2 here, 8-12% relative across seeds): the
// rank-4 residual couples to the per-client covariance error X'X/N - I.
// Population mode reaches ~1e-14 and the penalty has no effect on the
// floor, so the algorithm itself is not at fault; the 5% bar would need
// N in the thousands rather than 400.
#[test]
fn ac3_eckart_young_recovery() {
    let gt = make_ground_truth(10, 15, 1).unwrap();
    let shards = make_client_shards(&gt, 400, 0.0, 1);
    let cfg = FluteConfig {
        rounds: 4000,
        record_stride: 4000,
        alpha: 0.01,
        ..FluteConfig::defaults(10, 4000, 1)
    };
    let (_, trace) = flute_train(&cfg, &gt, Some(&shards), 4).unwrap();
    let (_, _, _, phi_k) = truncated_svd(&gt.phi, 4).unwrap();
    let rel = trace.last().unwrap().frob_to_opt / phi_k.norm();
    report(
        "AC3 Eckart-Young recovery",
        rel <= 0.05,
        &format!("relative distance to the rank-4 optimum {rel:.4}"),
    );
}

fn final_avg_err_gt_flute(k: usize, clients: usize, samples: usize, seed: u64) -> f64 {
    let gt = make_ground_truth(10, clients, seed).unwrap();
    let shards = make_client_shards(&gt, samples, 0.3, seed);
    let cfg = FluteConfig {
        rounds: 1000,
        record_stride: 1000,
        alpha: 0.01,
        ..FluteConfig::defaults(10, 1000, seed)
    };
    let (_, trace) = flute_train(&cfg, &gt, Some(&shards), k).unwrap();
    trace.last().unwrap().avg_err_gt
}

fn final_avg_err_gt_fedrep_ri(k: usize, clients: usize, samples: usize, seed: u64) -> f64 {
    let gt = make_ground_truth(10, clients, seed).unwrap();
    let shards = make_client_shards(&gt, samples, 0.3, seed);
    let cfg = FedRepConfig {
        eta: 0.03,
        head_mode: HeadMode::ExactLs,
        init_mode: InitMode::Random { alpha: 0.01 },
        rounds: 1000,
        record_stride: 1000,
        seed,
    };
    let run = fedrep_train(&cfg, &gt, &shards, k).unwrap();
    run.trace.last().unwrap().avg_err_gt
}

// Known failing. Both methods satisfy the same stationarity conditions
// (the balancing penalty vanishes on balanced factors and leaves the
// product untouched), so by t ~ 200 their final errors agree to within
// seed noise at k=2 and the median ordering is a coin flip. The speed
// separation is real mid-run (e.g. at t=100 the factored method leads)
// but is gone at the final round compared here. At k=8 the exact-LS
// heads overfit the 12-sample local sets, which inverts the gap clause.
#[test]
fn ac4_error_comparison_and_shrinking_gap() {
    let seeds: Vec<u64> = (1..=5).collect();
    let med = |f: &dyn Fn(u64) -> f64| median(seeds.iter().map(|&s| f(s)).collect());
    let flute_k2 = med(&|s| final_avg_err_gt_flute(2, 15, 12, s));
    let fedrep_k2 = med(&|s| final_avg_err_gt_fedrep_ri(2, 15, 12, s));
    let flute_k8 = med(&|s| final_avg_err_gt_flute(8, 15, 12, s));
    let fedrep_k8 = med(&|s| final_avg_err_gt_fedrep_ri(8, 15, 12, s));
    let gap_k2 = fedrep_k2 - flute_k2;
    let gap_k8 = fedrep_k8 - flute_k8;
    report(
        "AC4 error comparison",
        flute_k2 < fedrep_k2 && gap_k2 > gap_k8,
        &format!(
            "k=2 medians {flute_k2:.4} vs {fedrep_k2:.4}; advantage k=2 {gap_k2:.4} vs k=8 {gap_k8:.4}"
        ),
    );
}

#[test]
fn ac5_client_count_trend() {
    let seeds: Vec<u64> = (1..=5).collect();
    let m15 = median(
        seeds
            .iter()
            .map(|&s| final_avg_err_gt_flute(4, 15, 12, s))
            .collect(),
    );
    let m30 = median(
        seeds
            .iter()
            .map(|&s| final_avg_err_gt_flute(4, 30, 12, s))
            .collect(),
    );
    report(
        "AC5 client-count trend",
        m30 < m15,
        &format!("median final error M=30 {m30:.4} < M=15 {m15:.4}"),
    );
}

#[test]
fn ac6_gradient_suites() {
    let mut worst_linear = 0.0f64;
    // Local data gradients against central differences of the half loss.
    let gt = make_ground_truth(4, 3, 6).unwrap();
    let shards = make_client_shards(&gt, 6, 0.2, 6);
    let b = seeded_gaussian(4, 2, 1.0, RngStream::new(6, 10));
    let w = gaussian_vector(&mut RngStream::new(6, 11).rng(), 2, 1.0);
    let shard = &shards[0];
    let (g_b, g_w) = local_gradients(&b, &w, shard);
    let half_loss = |b: &Matrix, w: &Vector| {
        0.5 * (&shard.x * (b * w) - &shard.y).norm_squared() / shard.samples() as f64
    };
    let h = 1e-6;
    for i in 0..4 {
        for j in 0..2 {
            let mut p = b.clone();
            let mut q = b.clone();
            p[(i, j)] += h;
            q[(i, j)] -= h;
            let fd = (half_loss(&p, &w) - half_loss(&q, &w)) / (2.0 * h);
            worst_linear = worst_linear.max((fd - g_b[(i, j)]).abs() / fd.abs().max(1.0));
        }
    }
    for j in 0..2 {
        let mut p = w.clone();
        let mut q = w.clone();
        p[j] += h;
        q[j] -= h;
        let fd = (half_loss(&b, &p) - half_loss(&b, &q)) / (2.0 * h);
        worst_linear = worst_linear.max((fd - g_w[j]).abs() / fd.abs().max(1.0));
    }

    // Server step against its closed form at the analysis coefficients.
    let eta = 0.02;
    let cfg = FluteConfig {
        eta_l: eta,
        eta_r: eta,
        gamma1: 0.25,
        gamma2: 0.125,
        alpha: 0.0,
        rounds: 1,
        record_stride: 1,
        mode: GradientMode::Population,
        seed: 0,
    };
    let b2 = seeded_gaussian(4, 2, 1.0, RngStream::new(6, 12));
    let w2 = seeded_gaussian(2, 3, 1.0, RngStream::new(6, 13));
    let phi = seeded_gaussian(4, 3, 1.0, RngStream::new(6, 14));
    let model = flute_core::FactoredModel {
        b: b2.clone(),
        w: w2.clone(),
    };
    let (g_b_total, g_w2) = population_gradients(&b2, &w2, &phi);
    let next = server_step(
        &model,
        &RoundGradients {
            g_b_total,
            g_w: g_w2,
        },
        &cfg,
    )
    .unwrap();
    let imbalance = b2.transpose() * &b2 - &w2 * w2.transpose();
    let b_expected = &b2 - eta * (&b2 * &w2 - &phi) * w2.transpose() - (eta / 2.0) * &b2 * &imbalance;
    worst_linear = worst_linear.max((&next.b - b_expected).amax());

    // Collapse-penalty gradient against central differences.
    let hm = seeded_gaussian(3, 4, 1.0, RngStream::new(6, 15));
    let u = Vector::from_vec(vec![1.0, 1.0, 0.0, 1.0]);
    let g = nc_gradient(&hm, &u, 4).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            let mut p = hm.clone();
            let mut q = hm.clone();
            p[(i, j)] += h;
            q[(i, j)] -= h;
            let fd =
                (nc_penalty(&p, &u, 4).unwrap() - nc_penalty(&q, &u, 4).unwrap()) / (2.0 * h);
            worst_linear = worst_linear.max((fd - g[(i, j)]).abs() / fd.abs().max(1.0));
        }
    }

    // Full backprop through the ReLU model against central differences of
    // the total local loss (looser tolerance near the nonlinearity).
    let class_shards = make_classification_tasks(4, 2, 4, 10, 5, 4.0, 3).unwrap();
    let cfg_g = GeneralConfig::defaults(4, 4, 2, 3);
    let v1 = seeded_gaussian(4, 5, 0.4, RngStream::new(3, 20));
    let c1 = gaussian_vector(&mut RngStream::new(3, 21).rng(), 4, 0.1);
    let head = seeded_gaussian(4, 4, 0.5, RngStream::new(3, 22));
    let bias = Vector::zeros(4);
    let cshard = &class_shards[0];
    let mut worst_relu = 0.0f64;
    let mut step_cfg = cfg_g.clone();
    step_cfg.eta_l = 1.0;
    let (v1n, _, _, _, _) = local_train_step(&v1, &c1, &head, &bias, cshard, &step_cfg).unwrap();
    let analytic_v1 = &v1 - v1n; // gradient recovered from a unit-rate step
    for i in 0..4 {
        for j in 0..5 {
            let mut p = v1.clone();
            let mut q = v1.clone();
            p[(i, j)] += h;
            q[(i, j)] -= h;
            let fd = (local_loss(&p, &c1, &head, &bias, cshard, &cfg_g).unwrap()
                - local_loss(&q, &c1, &head, &bias, cshard, &cfg_g).unwrap())
                / (2.0 * h);
            worst_relu = worst_relu.max((fd - analytic_v1[(i, j)]).abs() / fd.abs().max(1.0));
        }
    }

    report(
        "AC6 gradient suites",
        worst_linear <= 1e-5 && worst_relu <= 1e-4,
        &format!("max relative error {worst_linear:.2e} (linear), {worst_relu:.2e} (ReLU model)"),
    );
}

#[test]
fn ac7_absorbing_region_and_snr_envelope() {
    let gt = make_ground_truth(6, 6, 1).unwrap();
    let k = 2;
    let lt = lambda_tilde(&gt, k);
    let delta = lt.delta_star();
    let lambda1 = lt.lambda_star(1);
    let eta = delta * delta / (36.0 * lambda1.powi(3));
    // Start inside the region: top block at 0.9 of the target scale, tiny
    // residual mass.
    let d2 = 2 * lt.d_bar();
    let mut theta = Matrix::zeros(d2, k);
    let lam_k = lt.lambda_tilde_k();
    for i in 0..k {
        theta[(i, i)] = 0.9 * lam_k[(i, i)].sqrt();
    }
    for i in k..d2.min(k + 3) {
        theta[(i, i % k)] = 0.05;
    }
    let ts0 = ThetaState::from_matrix(theta.clone(), k);
    assert!(region_membership(&ts0, &lt).in_r, "start must lie in R");

    let envelope0 = 8.0 * lambda1 / delta;
    let decay = 1.0 - eta * delta / 16.0;
    let mut ok = true;
    let mut detail = String::new();
    for t in 1..=500usize {
        theta = theta_population_step(&theta, &lt, eta);
        let ts = ThetaState::from_matrix(theta.clone(), k);
        let flags = region_membership(&ts, &lt);
        let snr = snr_and_dist(&ts, &lt);
        let bound = envelope0 * decay.powi(2 * t as i32);
        let inv = match snr.inv_snr {
            InvSnr::Finite(v) => v,
            InvSnr::Infinite => f64::INFINITY,
        };
        if !flags.in_r || inv > bound {
            ok = false;
            detail = format!("violated at t={t}: in_R={}, inv_snr={inv:.3e} vs bound {bound:.3e}", flags.in_r);
            break;
        }
    }
    if ok {
        detail = format!("500 iterates stayed in R under the envelope, eta={eta:.2e}");
    }
    report("AC7 absorbing region and SNR envelope", ok, &detail);
}

#[test]
fn ac8_collapse_dynamics() {
    let shards = make_classification_tasks(6, 2, 12, 20, 10, 4.0, 3).unwrap();
    // The collapse target has Frobenius norm below one while the normalized
    // gram always has norm one, so the metric bottoms out near 1 - ||target||
    // (~0.46 here). A narrow head and a stronger server step keep the round-1
    // value high enough for the halving check to be meaningful.
    let mut cfg = GeneralConfig::defaults(4, 6, 2, 3);
    cfg.sample_ratio = 0.5;
    cfg.local_epochs = 2;
    cfg.rounds = 200;
    cfg.lambda2 = 1e-2;
    cfg.lambda3 = 1e-2;
    cfg.eta_r = 0.3;
    let (_, trace) = general_flute_train(&cfg, &shards).unwrap();
    let round1 = trace
        .iter()
        .find(|r| r.round == 1)
        .expect("round 1 recorded")
        .global_nc2;
    let last = trace.last().unwrap();
    let ok = last.global_nc2 <= 0.5 * round1 && last.accuracy >= 0.9;
    report(
        "AC8 collapse dynamics",
        ok,
        &format!(
            "global collapse metric {round1:.4} -> {:.4}, accuracy {:.3}",
            last.global_nc2, last.accuracy
        ),
    );
}

#[test]
fn ac9_thread_count_determinism() {
    let bin = env!("CARGO_BIN_EXE_flute-sim");
    let dir = std::env::temp_dir().join(format!("determinism-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let configs = [
        (
            "flute",
            "method = \"flute\"\nrounds = 50\nseeds = [3]\nrecord_stride = 10\n\n[problem]\nd = 8\nk = 2\nclients = 6\nsamples = 12\nsigma2 = 0.3\n",
        ),
        (
            "fedrep",
            "method = \"fedrep\"\nrounds = 50\nseeds = [3]\nrecord_stride = 10\n\n[problem]\nd = 8\nk = 2\nclients = 6\nsamples = 12\nsigma2 = 0.3\n",
        ),
        (
            "fedrep_ri",
            "method = \"fedrep_ri\"\nrounds = 50\nseeds = [3]\nrecord_stride = 10\n\n[problem]\nd = 8\nk = 2\nclients = 6\nsamples = 12\nsigma2 = 0.3\n",
        ),
        (
            "general_flute",
            "method = \"general_flute\"\nrounds = 20\nseeds = [3]\nrecord_stride = 5\n\n[classification]\nclasses = 4\nclasses_per_client = 2\nclients = 6\nsamples_per_class = 10\ndim = 6\nseparation = 4.0\n\n[general]\nsample_ratio = 0.5\n",
        ),
    ];
    let mut ok = true;
    let mut detail = String::from("all methods byte-identical across 1 and 8 threads");
    for (name, text) in configs {
        let cfg_path = dir.join(format!("{name}.toml"));
        std::fs::write(&cfg_path, text).unwrap();
        let mut outputs = Vec::new();
        for threads in ["1", "8"] {
            let out = dir.join(format!("{name}-t{threads}"));
            let status = std::process::Command::new(bin)
                .args([
                    "run",
                    cfg_path.to_str().unwrap(),
                    "--out",
                    out.to_str().unwrap(),
                    "--threads",
                    threads,
                ])
                .status()
                .unwrap();
            assert!(status.success(), "{name} run failed");
            let csv = std::fs::read(out.join(format!("{name}_seed3.csv"))).unwrap();
            outputs.push(csv);
        }
        if outputs[0] != outputs[1] {
            ok = false;
            detail = format!("{name} traces differ between thread counts");
            break;
        }
    }
    report("AC9 thread-count determinism", ok, &detail);
}

#[test]
fn ac10_sample_size_trend() {
    let seeds: Vec<u64> = (1..=5).collect();
    let final_opt = |samples: usize, seed: u64| -> f64 {
        let gt = make_ground_truth(10, 15, seed).unwrap();
        let shards = make_client_shards(&gt, samples, 0.3, seed);
        let cfg = FluteConfig {
            rounds: 1000,
            record_stride: 1000,
            alpha: 0.01,
            ..FluteConfig::defaults(10, 1000, seed)
        };
        let (_, trace) = flute_train(&cfg, &gt, Some(&shards), 4).unwrap();
        trace.last().unwrap().avg_err_opt
    };
    let n12 = median(seeds.iter().map(|&s| final_opt(12, s)).collect());
    let n48 = median(seeds.iter().map(|&s| final_opt(48, s)).collect());
    report(
        "AC10 sample-size trend",
        n48 < n12,
        &format!("median final optimum error N=48 {n48:.4} < N=12 {n12:.4}"),
    );
}
