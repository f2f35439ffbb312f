//! End-to-end acceptance run. Prints one line per criterion and exits
//! nonzero when a criterion fails that is not listed in `KNOWN_FAILURES`.

use acfr_cli::commands::{self, score};
use acfr_cli::config::RunConfig;
use acfr_cli::gradsuite;
use acfr_core::datagen::{make_dataset, treatment_grid, Dataset, DatasetKind, DatasetSpec, Split};
use acfr_core::diffmath::Tensor;
use acfr_core::model::{Group, Method, ModelConfig, ModelParams};
use acfr_core::theory::{self, mise, policy_error, trapezoid, DiscreteInstance, VerifyConfig};
use acfr_core::trainer::{step_gradients, train, Checkpoint, TrainConfig, Trainer};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Criteria expected to fail, with the reason printed next to them.
const KNOWN_FAILURES: &[(usize, &str)] = &[(
    1,
    "the two-treatment PEHE bound as stated is short by a factor of 2; the doubled form holds",
)];

struct Outcome {
    id: usize,
    pass: bool,
    detail: String,
}

fn config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/news.toml")
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn fmt_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let report = theory::verify_bounds(&VerifyConfig::default()).expect("verify");
    let secs = start.elapsed().as_secs_f64();

    let joint = Tensor::from_rows(&[vec![0.4, 0.1], vec![0.1, 0.4]]).unwrap();
    let loss = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    let inst = DiscreteInstance::new(joint, loss, 1.0).unwrap();
    let p1 = inst.check_prop1().unwrap();
    let e = inst.expected_errors();
    let hand_ok = (e.factual - 0.2).abs() < 1e-12
        && (e.counterfactual - 0.5).abs() < 1e-12
        && (p1.kl_joint_first - 0.192745).abs() < 1e-6
        && (p1.rhs_joint_first - 0.82088).abs() < 1e-4;

    let counts: Vec<String> = report.checks.iter().map(|c| format!("{}={}/{}", c.name, c.violations, c.checked)).collect();
    let stated_ok = report
        .checks
        .iter()
        .filter(|c| c.name != "prop2_doubled")
        .all(|c| c.violations == 0);
    Outcome {
        id: 1,
        pass: stated_ok && hand_ok && secs < 30.0,
        detail: format!(
            "violations {}; hand instance eps_f={:.6} eps_cf={:.6} kl={:.6} rhs={:.5}; {secs:.1}s",
            counts.join(" "),
            e.factual,
            e.counterfactual,
            p1.kl_joint_first,
            p1.rhs_joint_first
        ),
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let seeds: Vec<u64> = (0..10).collect();
    let results = gradsuite::run(&seeds).expect("grad suite");
    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.worst).fold(0.0, f64::max);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    Outcome {
        id: 2,
        pass: failed.is_empty() && secs < 60.0,
        detail: format!(
            "{} components, worst relative error {worst:.2e}, failing {:?}; {secs:.1}s",
            results.len(),
            failed
        ),
    }
}

fn descend(params: &mut ModelParams, group: Group, grads: &[Tensor], lr: f64) {
    for (w, g) in params.group_mut(group).into_iter().zip(grads) {
        for (wi, gi) in w.data_mut().iter_mut().zip(g.data()) {
            *wi -= lr * gi;
        }
    }
}

fn bits(p: &ModelParams) -> Vec<u64> {
    p.named_tensors().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
}

fn criterion_3() -> Outcome {
    let ds = make_dataset(&DatasetSpec::new(DatasetKind::TcgaLike, 60, 4, 2.0, 1)).unwrap();
    let model = ModelConfig {
        input_dim: 4,
        hidden: 6,
        repr_dim: 6,
        tokens: 3,
        key_dim: 4,
        value_dim: 4,
        head_dim: 5,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        iterations: 1,
        batch_size: 2,
        inner_steps: 3,
        gamma: 0.7,
        lr_pred: 0.05,
        lr_adv: 0.3,
        ..TrainConfig::default()
    };
    let idx = [ds.splits.train[0], ds.splits.train[1]];
    let mut trainer = Trainer::new(&ds, &model, &cfg).unwrap();
    let mut hand = trainer.params().clone();
    trainer.step_batch(&idx).unwrap();

    let x = ds.x.select_rows(&idx);
    let t: Vec<f64> = idx.iter().map(|&i| ds.t[i]).collect();
    let y: Vec<f64> = idx.iter().map(|&i| ds.y[i]).collect();
    for _ in 0..cfg.inner_steps {
        let g = step_gradients(&hand, &x, &t, &y).unwrap();
        descend(&mut hand, Group::Treatment, g.adv_wrt(Group::Treatment), cfg.lr_adv * cfg.gamma);
    }
    let g = step_gradients(&hand, &x, &t, &y).unwrap();
    descend(&mut hand, Group::Head, g.pred_wrt(Group::Head), cfg.lr_pred);
    let enc: Vec<Tensor> = g
        .pred_wrt(Group::Encoder)
        .iter()
        .zip(g.adv_wrt(Group::Encoder))
        .map(|(p, a)| {
            let data = p.data().iter().zip(a.data()).map(|(p, a)| p - cfg.gamma * a).collect();
            Tensor::new(p.shape().to_vec(), data).unwrap()
        })
        .collect();
    descend(&mut hand, Group::Encoder, &enc, cfg.lr_pred);
    let worst = trainer
        .params()
        .named_tensors()
        .into_iter()
        .zip(hand.named_tensors())
        .map(|((_, a), (_, b))| a.max_abs_diff(b))
        .fold(0.0, f64::max);

    let long = TrainConfig {
        iterations: 50,
        batch_size: 8,
        inner_steps: 4,
        gamma: 0.0,
        lr_pred: 1e-3,
        lr_adv: 5e-2,
        ..TrainConfig::default()
    };
    let (on, _) = train(&ds, &model, &long).unwrap();
    let (off, _) = train(&ds, &model, &TrainConfig { adversary: false, ..long }).unwrap();
    let bitwise = bits(&on) == bits(&off);
    Outcome {
        id: 3,
        pass: worst <= 1e-12 && bitwise,
        detail: format!("hand-step max deviation {worst:.2e}; gamma=0 vs adversary disabled bitwise equal: {bitwise}"),
    }
}

struct NewsRuns {
    datasets: Vec<Dataset>,
    acfr: Vec<ModelParams>,
}

fn criterion_4(cfg: &RunConfig) -> (Outcome, NewsRuns) {
    let start = Instant::now();
    let mut scores: BTreeMap<Method, Vec<f64>> = BTreeMap::new();
    let mut runs = NewsRuns {
        datasets: Vec::new(),
        acfr: Vec::new(),
    };
    for &seed in &cfg.seeds {
        let ds = make_dataset(&cfg.dataset_for(seed, None)).unwrap();
        for method in [Method::Acfr, Method::AcfrNoAttn, Method::Mlp] {
            let model = ModelConfig { method, ..cfg.model.clone() };
            let (params, _) = train(&ds, &model, &cfg.train_for(seed)).unwrap();
            let (m, _) = score(Some(&params), &ds, Split::Test).unwrap();
            scores.entry(method).or_default().push(m);
            if method == Method::Acfr {
                runs.acfr.push(params);
            }
        }
        runs.datasets.push(ds);
    }
    let secs = start.elapsed().as_secs_f64();
    let med = |m: Method| median(scores[&m].clone());
    let (a, n, p) = (med(Method::Acfr), med(Method::AcfrNoAttn), med(Method::Mlp));
    let per_run = secs / (3 * cfg.seeds.len()) as f64;
    let outcome = Outcome {
        id: 4,
        pass: a < n && a <= 0.9 * p && per_run < 900.0,
        detail: format!(
            "median out-of-sample MISE acfr={a:.3} acfr-no-attn={n:.3} mlp={p:.3} (0.9*mlp={:.3}); acfr {} no-attn {} mlp {}; {secs:.0}s",
            0.9 * p,
            fmt_list(&scores[&Method::Acfr]),
            fmt_list(&scores[&Method::AcfrNoAttn]),
            fmt_list(&scores[&Method::Mlp]),
        ),
    };
    (outcome, runs)
}

fn criterion_5(cfg: &RunConfig, runs: &NewsRuns) -> Outcome {
    let mut balanced = Vec::new();
    let mut plain = Vec::new();
    for (i, &seed) in cfg.seeds.iter().enumerate() {
        let ds = &runs.datasets[i];
        let unbalanced_cfg = TrainConfig {
            gamma: 0.0,
            ..cfg.train_for(seed)
        };
        let (p0, _) = train(ds, &cfg.model, &unbalanced_cfg).unwrap();
        let probe = acfr_core::trainer::AdversaryConfig { seed, ..cfg.probe.clone() };
        let z1 = runs.acfr[i].encode(&ds.x).unwrap();
        let z0 = p0.encode(&ds.x).unwrap();
        balanced.push(theory::balance_probe(&z1, &ds.t, &probe).unwrap());
        plain.push(theory::balance_probe(&z0, &ds.t, &probe).unwrap());
    }
    let wins = balanced.iter().zip(&plain).filter(|(b, p)| b < p).count();
    Outcome {
        id: 5,
        pass: wins >= 4,
        detail: format!(
            "probe score gamma=1 {} vs gamma=0 {}; lower in {wins} of {} seeds",
            fmt_list(&balanced),
            fmt_list(&plain),
            balanced.len()
        ),
    }
}

fn criterion_6(cfg: &RunConfig, out: &Path) -> Outcome {
    let start = Instant::now();
    let alphas = [1.0, 2.0, 4.0, 6.0];
    let sweep = commands::sweep_bias(cfg, &alphas, 5, 1, out).expect("sweep");
    let secs = start.elapsed().as_secs_f64();
    let gap = |alpha: f64| {
        let rows = |m: &str| -> Vec<f64> {
            sweep
                .report
                .rows
                .iter()
                .filter(|r| r.method == m && r.alpha == alpha)
                .map(|r| r.mise)
                .collect()
        };
        median(rows("mlp")) - median(rows("acfr"))
    };
    let gaps: Vec<f64> = alphas.iter().map(|&a| gap(a)).collect();
    Outcome {
        id: 6,
        pass: sweep.failures.is_empty() && gaps[3] >= gaps[0] && secs < 7200.0,
        detail: format!(
            "median MISE gap (mlp - acfr) at alpha 1,2,4,6 = {}; {} failed cells; {secs:.0}s",
            fmt_list(&gaps),
            sweep.failures.len()
        ),
    }
}

fn criterion_7() -> Outcome {
    let grid = treatment_grid();
    let truth_rows: Vec<Vec<f64>> = (0..3)
        .map(|i| grid.iter().map(|t| (i as f64 + 1.0) * t.sin()).collect())
        .collect();
    let truth = Tensor::from_rows(&truth_rows).unwrap();
    let offset = 0.37;
    let shifted = truth.map(|v| v + offset);
    let m = mise(&shifted, &truth, &grid).unwrap();
    let offset_err = (m - offset * offset).abs();

    let parabola = |c: f64| Tensor::from_rows(&[grid.iter().map(|t| 1.0 - (t - c).powi(2)).collect()]).unwrap();
    let pe = policy_error(&parabola(0.25), &parabola(0.5), &grid).unwrap();
    let pe_err = (pe - 0.00390625).abs();

    // Integral of t^k on [0, 1] is 1 / (k + 1).
    let mut poly_err: f64 = 0.0;
    for k in 0..=4 {
        let f: Vec<f64> = grid.iter().map(|t| t.powi(k)).collect();
        poly_err = poly_err.max((trapezoid(&f, &grid) - 1.0 / (k as f64 + 1.0)).abs());
    }
    // Residual 0.3 t - 0.2 t^2: squared integral is 0.03 - 0.03 + 0.008 = 0.008.
    let quad = Tensor::from_rows(&[grid.iter().map(|t| 0.3 * t - 0.2 * t * t).collect()]).unwrap();
    let zero = Tensor::zeros(&[1, grid.len()]);
    poly_err = poly_err.max((mise(&quad, &zero, &grid).unwrap() - 0.008).abs());

    Outcome {
        id: 7,
        pass: offset_err <= 1e-12 && pe_err <= 1e-12 && poly_err <= 1e-4,
        detail: format!("offset MISE error {offset_err:.1e}; parabola PE error {pe_err:.1e}; polynomial integral error {poly_err:.1e}"),
    }
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

/// Runs every command into `out` with a small config.
fn run_all(cfg: &RunConfig, out: &Path) {
    commands::generate(cfg, out).unwrap();
    commands::train(cfg, None, out).unwrap();
    let ckpt = commands::run_dir(out, cfg.model.method, 0).join("checkpoint.json");
    let data = commands::data_dir(out, 0);
    let report = out.join("eval").join("report.csv");
    commands::eval(Some(&ckpt), &data, &[Split::Test, Split::Train], &report).unwrap();
    commands::eval(None, &data, &[Split::Test], &report).unwrap();
    commands::sweep_bias(cfg, &[1.0, 3.0], 2, 1, out).unwrap();
    let vcfg = VerifyConfig {
        instances: 50,
        ..VerifyConfig::default()
    };
    commands::verify(&vcfg, out).unwrap();
    commands::grad_check(3, 1, out).unwrap();
}

fn criterion_8() -> Outcome {
    let cfg = RunConfig::from_toml(
        r#"
seeds = [0, 1]
[dataset]
kind = "tcga-like"
n = 200
d = 8
[model]
input_dim = 8
hidden = 12
repr_dim = 8
tokens = 4
key_dim = 4
value_dim = 4
head_dim = 4
[train]
iterations = 60
batch_size = 16
inner_steps = 2
lr_pred = 1e-3
lr_adv = 1e-3
optimizer = "adam"
checkpoint_interval = 20
[sweep]
methods = ["acfr", "acfr-no-attn", "mlp"]
"#,
    )
    .unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_all(&cfg, a.path());
    run_all(&cfg, b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    // history.csv records wall-clock time per iteration.
    let differing: Vec<String> = ta
        .iter()
        .filter(|(p, bytes)| !p.ends_with("history.csv") && tb.get(*p) != Some(*bytes))
        .map(|(p, _)| p.display().to_string())
        .collect();
    let same_set = ta.keys().eq(tb.keys());

    let ds = Dataset::load(&commands::data_dir(a.path(), 0)).unwrap();
    let trained = Trainer::new(&ds, &cfg.model, &cfg.train_for(0)).and_then(|mut t| t.run().map(|_| t)).unwrap();
    let path = a.path().join("roundtrip.json");
    trained.checkpoint().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap().params().unwrap();
    let ts: Vec<f64> = (0..ds.len()).map(|i| (i % 17) as f64 / 16.0).collect();
    let p1 = trained.params().predict(&ds.x, &ts).unwrap();
    let p2 = loaded.predict(&ds.x, &ts).unwrap();
    let forward_bitwise = p1.iter().zip(&p2).all(|(u, v)| u.to_bits() == v.to_bits());

    Outcome {
        id: 8,
        pass: differing.is_empty() && same_set && forward_bitwise,
        detail: format!(
            "{} files compared, differing {:?}; checkpoint round-trip forward bitwise equal: {forward_bitwise}",
            ta.len(),
            differing
        ),
    }
}

fn main() {
    let cfg = RunConfig::load(&config_path()).expect("configs/news.toml");
    let sweep_out = tempfile::tempdir().unwrap();

    let mut outcomes = vec![criterion_1(), criterion_2(), criterion_3()];
    let (c4, runs) = criterion_4(&cfg);
    outcomes.push(c4);
    outcomes.push(criterion_5(&cfg, &runs));
    outcomes.push(criterion_6(&cfg, sweep_out.path()));
    outcomes.push(criterion_7());
    outcomes.push(criterion_8());

    let mut unexpected = 0;
    for o in &outcomes {
        let known = KNOWN_FAILURES.iter().find(|(id, _)| *id == o.id);
        let status = match (o.pass, known) {
            (true, _) => "PASS",
            (false, Some(_)) => "FAIL (known)",
            (false, None) => {
                unexpected += 1;
                "FAIL"
            }
        };
        println!("criterion {}: {status}: {}", o.id, o.detail);
        if let (false, Some((_, why))) = (o.pass, known) {
            println!("  note: {why}");
        }
    }
    if unexpected > 0 {
        std::process::exit(1);
    }
}
