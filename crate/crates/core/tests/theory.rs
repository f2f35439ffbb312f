use acfr_core::datagen::treatment_grid;
use acfr_core::diffmath::Tensor;
use acfr_core::theory::{
    discrete_kl, mise, mutual_info, pinsker_check, product_of_marginals, random_instance, verify_bounds,
    policy_error, DiscreteInstance, VerifyConfig, CHECK_NAMES,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[test]
fn thousand_instance_sweep() {
    let start = Instant::now();
    let report = verify_bounds(&VerifyConfig::default()).unwrap();
    assert!(start.elapsed().as_secs() < 30);
    assert_eq!(report.instances, 1000);
    for name in CHECK_NAMES {
        let c = report.check(name).unwrap();
        assert!(c.checked >= 1000, "{name}");
        if name != "prop2" {
            assert_eq!(c.violations, 0, "{name}: min slack {}", c.min_slack);
            assert!(c.min_slack >= -1e-12, "{name}");
        }
    }
    // The effect bound as stated fails on a small fraction of pairs; each
    // failure is kept with its instance.
    let stated = report.check("prop2").unwrap();
    assert!(stated.violations > 0);
    assert!(report.counterexamples.iter().all(|c| c.check == "prop2"));
    let text = report.to_toml().unwrap();
    assert!(text.contains("[[counterexamples]]"));
    assert_eq!(text, verify_bounds(&VerifyConfig::default()).unwrap().to_toml().unwrap());
}

#[test]
fn hand_instance() {
    let joint = Tensor::from_rows(&[vec![0.4, 0.1], vec![0.1, 0.4]]).unwrap();
    let loss = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    let inst = DiscreteInstance::new(joint, loss, 1.0).unwrap();
    let e = inst.expected_errors();
    assert!((e.factual - 0.2).abs() < 1e-12);
    assert!((e.counterfactual - 0.5).abs() < 1e-12);
    let c = inst.check_prop1().unwrap();
    assert!((c.kl_joint_first - 0.192745).abs() < 1e-6);
    assert!((c.rhs_joint_first - 0.82088).abs() < 1e-4);
    assert!(c.holds);
}

#[test]
fn mutual_information_is_kl_to_product_exactly() {
    for seed in 0..50 {
        let inst = random_instance(2 + seed as usize % 6, 2 + seed as usize % 5, seed, false).unwrap();
        let kl = discrete_kl(inst.joint.data(), product_of_marginals(&inst.joint).data()).unwrap();
        assert_eq!(mutual_info(&inst.joint).unwrap().mi, kl);
    }
}

#[test]
fn random_pairs_satisfy_pinsker() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let n = rng.random_range(2..10);
        let mut draw = || {
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let (p, q) = (draw(), draw());
        assert!(pinsker_check(&p, &q).unwrap().holds);
    }
}

fn eval_poly(c: &[f64], t: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * t + k)
}

/// Exact integral over [0, 1] of the squared difference of two polynomials.
fn exact_sq_integral(a: &[f64], b: &[f64]) -> f64 {
    let len = a.len().max(b.len());
    let d: Vec<f64> = (0..len)
        .map(|i| a.get(i).copied().unwrap_or(0.0) - b.get(i).copied().unwrap_or(0.0))
        .collect();
    let mut total = 0.0;
    for (i, x) in d.iter().enumerate() {
        for (j, y) in d.iter().enumerate() {
            total += x * y / (i + j + 1) as f64;
        }
    }
    total
}

#[test]
fn trapezoid_mise_matches_closed_form_for_low_degree_integrands() {
    let grid = treatment_grid();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // Quadratic residuals square to quartic integrands. The trapezoid error
    // is about h^2 / 12 * |f'(1) - f'(0)|, so residual coefficients stay in
    // [-0.4, 0.4] to keep it under 1e-4.
    for _ in 0..200 {
        let truth: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let pred: Vec<f64> = truth.iter().map(|c| c + rng.random_range(-0.4..0.4)).collect();
        let row = |c: &[f64]| grid.iter().map(|&t| eval_poly(c, t)).collect::<Vec<f64>>();
        let m = mise(
            &Tensor::from_rows(&[row(&pred)]).unwrap(),
            &Tensor::from_rows(&[row(&truth)]).unwrap(),
            &grid,
        )
        .unwrap();
        let exact = exact_sq_integral(&pred, &truth);
        assert!((m - exact).abs() < 1e-4, "{m} vs {exact}");
    }
    // Monomial integrands t^k, k <= 4.
    for k in 0..=4 {
        let truth: Vec<f64> = grid.iter().map(|t| t.powf(k as f64 / 2.0)).collect();
        let m = mise(
            &Tensor::zeros(&[1, grid.len()]),
            &Tensor::from_rows(&[truth]).unwrap(),
            &grid,
        )
        .unwrap();
        assert!((m - 1.0 / (k + 1) as f64).abs() < 1e-4, "k={k}: {m}");
    }
}

#[test]
fn training_beats_random_init_on_both_metrics() {
    use acfr_core::datagen::{make_dataset, DatasetKind, DatasetSpec};
    use acfr_core::model::{ModelConfig, ModelParams};
    use acfr_core::trainer::{train, Optimizer, TrainConfig};

    let grid = treatment_grid();
    let model = ModelConfig {
        input_dim: 10,
        hidden: 24,
        repr_dim: 16,
        tokens: 4,
        key_dim: 8,
        value_dim: 8,
        head_dim: 8,
        ..ModelConfig::default()
    };
    let (mut before, mut after) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let ds = make_dataset(&DatasetSpec::new(DatasetKind::TcgaLike, 600, 10, 2.0, seed)).unwrap();
        let cfg = TrainConfig {
            iterations: 400,
            batch_size: 32,
            inner_steps: 2,
            lr_pred: 3e-3,
            lr_adv: 1e-3,
            optimizer: Optimizer::Adam,
            seed,
            ..TrainConfig::default()
        };
        let init = ModelParams::init(&model, seed).unwrap();
        let (trained, _) = train(&ds, &model, &cfg).unwrap();
        let idx = &ds.splits.test;
        let x = ds.x.select_rows(idx);
        let truth = ds.response_grid(idx, &grid).unwrap();
        let score = |p: &ModelParams| {
            let pred = p.predict_grid(&x, &grid).unwrap();
            (mise(&pred, &truth, &grid).unwrap(), policy_error(&pred, &truth, &grid).unwrap())
        };
        before.push(score(&init));
        after.push(score(&trained));
    }
    let median = |v: Vec<f64>| {
        let mut v = v;
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let m0 = median(before.iter().map(|s| s.0).collect());
    let m1 = median(after.iter().map(|s| s.0).collect());
    let p0 = median(before.iter().map(|s| s.1).collect());
    let p1 = median(after.iter().map(|s| s.1).collect());
    assert!(m1 < m0, "mise {m0} -> {m1}");
    assert!(p1 < p0, "pe {p0} -> {p1}");
}
