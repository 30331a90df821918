use gcldr_core::data::{
    generate, load_csv, read_csv, save_csv, split_validation, write_csv, Cell, DataConfig, NuisanceKind, NuisanceSpec, Role,
    SplitSpec,
};
use gcldr_core::GcldrError;
use proptest::prelude::*;

#[test]
fn csv_round_trip_is_bitwise() {
    let ds = generate(&DataConfig { per_combo: 7, seed: 3, ..DataConfig::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    save_csv(&ds, &path).unwrap();
    let back = load_csv(&path).unwrap();
    assert_eq!(back.y, ds.y);
    assert_eq!(back.role, ds.role);
    assert_eq!(back.true_domain, ds.true_domain);
    let bits = |t: &gcldr_core::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back.x), bits(&ds.x));
}

#[test]
fn csv_without_domain_column_loads_without_diagnostics() {
    let ds = read_csv("role,y,x_0,x_1\ntrain,0,0.5,1\ntest,1,-2,3e-3\n".as_bytes()).unwrap();
    assert!(ds.true_domain.is_none());
    assert_eq!(ds.count(Role::Test), 1);
    assert_eq!(ds.x.at(1, 1), 3e-3);
}

#[test]
fn csv_errors_name_the_line() {
    let mut text = String::from("role,y,true_domain,x_0\n");
    for _ in 0..5 {
        text.push_str("train,0,0,1.0\n");
    }
    text.push_str("train,0,0\n");
    match read_csv(text.as_bytes()) {
        Err(GcldrError::Parse { line, .. }) => assert_eq!(line, 7),
        other => panic!("{other:?}"),
    }
    assert!(matches!(read_csv("role,y,x_0\nvalidate,0,1\n".as_bytes()), Err(GcldrError::Parse { line: 2, .. })));
    assert!(matches!(read_csv("role,y,x_0\ntrain,zero,1\n".as_bytes()), Err(GcldrError::Parse { line: 2, .. })));

    let ds = generate(&DataConfig { per_combo: 1, ..DataConfig::default() }).unwrap();
    let mut buf = Vec::new();
    write_csv(&ds, &mut buf).unwrap();
    let header = String::from_utf8(buf).unwrap().lines().next().unwrap().to_string();
    assert!(header.starts_with("role,y,true_domain,x_0,x_1,"));
    assert!(header.ends_with(",x_19"));
}

#[test]
fn zero_nuisance_makes_domains_indistinguishable() {
    let cfg = DataConfig {
        per_combo: 400,
        nuisance: NuisanceSpec { kind: NuisanceKind::AdditiveOffset, magnitude: 0.0 },
        ..DataConfig::default()
    };
    let ds = generate(&cfg).unwrap();
    let train = ds.samples(Role::Train);
    let test = ds.samples(Role::Test);
    for class in 0..6 {
        let mean = |s: &gcldr_core::data::Samples, j: usize| {
            let rows: Vec<usize> = (0..s.len()).filter(|&i| s.y[i] == class).collect();
            rows.iter().map(|&i| s.x.at(i, j)).sum::<f64>() / rows.len() as f64
        };
        for j in 0..cfg.dim {
            let diff = (mean(&train, j) - mean(&test, j)).abs();
            // two-sample difference of means, σ√(2/n), three standard errors
            assert!(diff <= 3.0 * cfg.noise * (2.0f64 / 400.0).sqrt() * 1.5, "class {class} dim {j}: {diff}");
        }
    }
}

#[test]
fn generation_is_a_pure_function_of_the_config() {
    let cfg = DataConfig { per_combo: 5, seed: 11, ..DataConfig::default() };
    assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    assert_ne!(generate(&cfg).unwrap(), generate(&DataConfig { seed: 12, ..cfg.clone() }).unwrap());
    let affine = DataConfig { nuisance: NuisanceSpec { kind: NuisanceKind::Affine, magnitude: 1.0 }, ..cfg };
    assert_eq!(generate(&affine).unwrap(), generate(&affine).unwrap());
}

#[test]
fn validation_split_takes_ten_percent() {
    let ds = generate(&DataConfig { per_combo: 37, ..DataConfig::default() }).unwrap();
    let test = ds.samples(Role::Test);
    let (val, rest) = split_validation(&test, 0.1, 4).unwrap();
    assert!((val.len() as f64 - 0.1 * test.len() as f64).abs() <= 1.0);
    assert_eq!(val.len() + rest.len(), test.len());
    let (val2, _) = split_validation(&test, 0.1, 4).unwrap();
    assert_eq!(val, val2);
    // rows are distinct draws, so disjointness shows in the feature rows
    let key = |s: &gcldr_core::data::Samples, i: usize| s.x.row(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let mut all: Vec<Vec<u64>> = (0..val.len()).map(|i| key(&val, i)).chain((0..rest.len()).map(|i| key(&rest, i))).collect();
    let mut orig: Vec<Vec<u64>> = (0..test.len()).map(|i| key(&test, i)).collect();
    all.sort();
    orig.sort();
    assert_eq!(all, orig);
}

#[test]
fn inconsistent_configs_are_rejected() {
    assert!(generate(&DataConfig { classes: 7, ..DataConfig::default() }).is_err());
    assert!(generate(&DataConfig { noise: -1.0, ..DataConfig::default() }).is_err());
    let two_train = SplitSpec { cells: vec![vec![Cell::Train, Cell::Train]], class_sets: vec![vec![0, 1]] };
    assert!(generate(&DataConfig { classes: 2, split: two_train, ..DataConfig::default() }).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn train_and_test_combinations_never_mix(seed in 0u64..500, sets in 2usize..4, magnitude in 0.0f64..3.0) {
        let classes = sets * 2;
        let cfg = DataConfig {
            classes,
            per_combo: 3,
            seed,
            split: SplitSpec::diagonal(classes, sets).unwrap(),
            nuisance: NuisanceSpec { kind: NuisanceKind::AdditiveOffset, magnitude },
            ..DataConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        prop_assert!(ds.check_split(&cfg.split).is_ok());
        prop_assert_eq!(ds.count(Role::Train), classes * 3);
        prop_assert_eq!(ds.count(Role::Test), classes * 3 * (sets - 1));
    }
}
