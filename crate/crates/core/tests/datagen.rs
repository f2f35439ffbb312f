use acfr_core::datagen::{
    assign_treatment, generate_covariates, make_dataset, optimal_treatment, preprocess,
    sample_weight_vectors, Dataset, DatasetKind, DatasetSpec,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64;
    cov / (variance(a).sqrt() * variance(b).sqrt())
}

/// Assigned doses and optimal doses for 10^4 units.
fn treatments(kind: DatasetKind, alpha: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let spec = DatasetSpec::new(kind, 10_000, 20, alpha, seed);
    let x = preprocess(&generate_covariates(&spec)).unwrap();
    let w = sample_weight_vectors(spec.d, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
    let mut t = Vec::new();
    let mut t_star = Vec::new();
    for i in 0..spec.n {
        let p = w.project(x.row(i));
        t_star.push(optimal_treatment(p, kind));
        t.push(assign_treatment(p, alpha, kind, &mut rng).unwrap());
    }
    (t, t_star)
}

#[test]
fn higher_alpha_concentrates_treatment_at_optimum() {
    for kind in [DatasetKind::TcgaLike, DatasetKind::NewsLike] {
        for seed in 0..5 {
            let spread: Vec<f64> = [1.0, 2.0, 4.0, 6.0]
                .iter()
                .map(|&alpha| {
                    let (t, ts) = treatments(kind, alpha, seed);
                    let gap: Vec<f64> = t.iter().zip(&ts).map(|(a, b)| a - b).collect();
                    variance(&gap)
                })
                .collect();
            for w in spread.windows(2) {
                assert!(w[1] < w[0], "{kind:?} seed {seed}: {spread:?}");
            }
        }
    }
}

#[test]
fn alpha_one_assigns_independently_of_optimum() {
    for kind in [DatasetKind::TcgaLike, DatasetKind::NewsLike] {
        let (t, ts) = treatments(kind, 1.0, 11);
        let r = correlation(&t, &ts);
        assert!(r.abs() < 0.03, "{kind:?}: corr={r}");
        assert!((mean(&t) - 0.5).abs() < 0.01);
    }
}

#[test]
fn dataset_invariants() {
    let ds = make_dataset(&DatasetSpec::new(DatasetKind::NewsLike, 5000, 10, 2.0, 3)).unwrap();
    for i in 0..ds.len() {
        let norm = ds.x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        assert!((0.0..=1.0).contains(&ds.t[i]));
    }
    assert_eq!(ds.splits.train.len(), 3400);
    assert_eq!(ds.splits.val.len(), 600);
    assert_eq!(ds.splits.test.len(), 1000);
    let mut all: Vec<usize> = ds
        .splits
        .train
        .iter()
        .chain(&ds.splits.val)
        .chain(&ds.splits.test)
        .copied()
        .collect();
    all.sort_unstable();
    assert_eq!(all, (0..5000).collect::<Vec<_>>());
}

#[test]
fn make_dataset_is_pure_in_spec() {
    let spec = DatasetSpec::new(DatasetKind::TcgaLike, 200, 8, 3.0, 17);
    assert_eq!(make_dataset(&spec).unwrap(), make_dataset(&spec).unwrap());
    let other = DatasetSpec { seed: 18, ..spec.clone() };
    assert_ne!(make_dataset(&spec).unwrap().t, make_dataset(&other).unwrap().t);
}

#[test]
fn directory_round_trip_is_exact_and_byte_stable() {
    let spec = DatasetSpec::new(DatasetKind::NewsLike, 120, 6, 2.0, 5);
    let ds = make_dataset(&spec).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ds.save(a.path()).unwrap();
    make_dataset(&spec).unwrap().save(b.path()).unwrap();
    for file in ["covariates.csv", "factual.csv", "splits.txt", "metadata.toml"] {
        let fa = std::fs::read(a.path().join(file)).unwrap();
        let fb = std::fs::read(b.path().join(file)).unwrap();
        assert_eq!(fa, fb, "{file}");
    }
    assert_eq!(Dataset::load(a.path()).unwrap(), ds);
}

#[test]
fn covariate_file_goes_through_preprocessing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cov.tsv");
    let mut text = String::from("g1\tg2\tg3\n");
    for i in 0..12 {
        text.push_str(&format!("{}\t{}\t{}\n", i, (i * 7) % 5, (i * i) % 11));
    }
    std::fs::write(&path, text).unwrap();
    let spec = DatasetSpec {
        covariates: Some(path.clone()),
        ..DatasetSpec::new(DatasetKind::TcgaLike, 12, 3, 2.0, 0)
    };
    let ds = make_dataset(&spec).unwrap();
    let norm: f64 = ds.x.row(4).iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-12);

    let wrong = DatasetSpec { n: 13, ..spec };
    assert!(make_dataset(&wrong).is_err());
}

#[test]
fn loading_a_corrupt_directory_fails() {
    let ds = make_dataset(&DatasetSpec::new(DatasetKind::NewsLike, 30, 3, 2.0, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    std::fs::write(dir.path().join("splits.txt"), "train,0,1\nval,2\ntest,3\n").unwrap();
    assert!(Dataset::load(dir.path()).is_err());
}
