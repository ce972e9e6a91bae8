use ffrmil::artery::ENCODING_LEN;
use ffrmil::eval::*;
use ffrmil::mil::{train_mil_in_memory, Bag, MilModel, Mode};
use ffrmil::myo::FEATURE_LEN;
use ffrmil_core::TrainConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// O(n²) concordance: a positive above a negative counts 1, a tie ½.
fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
    loop {
        // coarse scores force plenty of ties
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..12) as f64) / 11.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            return (scores, labels);
        }
    }
}

#[test]
fn ten_patients_five_folds() {
    let labels: Vec<bool> = (0..10).map(|i| i < 5).collect();
    let plan = stratified_kfold(&labels, 5, 3).unwrap();
    let mut seen = vec![false; 10];
    for f in 0..5 {
        let t = plan.test(f);
        assert_eq!(t.len(), 2);
        assert_eq!(t.iter().filter(|&&i| labels[i]).count(), 1);
        for &i in &t {
            assert!(!seen[i]);
            seen[i] = true;
        }
        let mut all = t.clone();
        all.extend(plan.train(f));
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
    assert!(seen.iter().all(|&s| s));
}

#[test]
fn fold_sizes_for_126_patients() {
    let labels: Vec<bool> = (0..126).map(|i| i % 3 == 0).collect();
    let plan = stratified_kfold(&labels, 5, 0).unwrap();
    let mut sizes: Vec<usize> = (0..5).map(|f| plan.test(f).len()).collect();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    assert_eq!(sizes, vec![26, 25, 25, 25, 25]);
}

#[test]
fn kfold_rejects_degenerate_requests() {
    assert!(stratified_kfold(&[true, false], 1, 0).is_err());
    assert!(stratified_kfold(&[true, false], 3, 0).is_err());
}

#[test]
fn roc_trivial_cases() {
    assert_eq!(roc_auc(&[0.9, 0.1], &[true, false]).unwrap().auc, 1.0);
    assert_eq!(roc_auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap().auc, 0.5);
    assert!(roc_auc(&[0.3, 0.4], &[true, true]).is_err());
    assert!(roc_auc(&[0.3], &[true, false]).is_err());
}

#[test]
fn auc_matches_pairwise_oracle_on_fifty_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..50 {
        let n = rng.gen_range(2..80);
        let (s, l) = random_instance(&mut rng, n);
        let auc = roc_auc(&s, &l).unwrap().auc;
        assert!((auc - pairwise_auc(&s, &l)).abs() <= 1e-12);
    }
}

#[test]
fn operating_point_is_highest_threshold_reaching_target() {
    let scores = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05];
    let labels = [true, true, false, true, false, true, true, false, false, true];
    let roc = roc_auc(&scores, &labels).unwrap();
    let op = roc.operating_point(0.7);
    // six positives: 0.7 needs 5 of them, first reached at score 0.3
    assert_eq!(op.threshold, 0.3);
    assert!((op.sensitivity - 5.0 / 6.0).abs() < 1e-12);
    assert!((op.specificity - 2.0 / 4.0).abs() < 1e-12);
    let csv = roc.to_csv();
    assert!(csv.starts_with("threshold,sensitivity,specificity\n"));
    assert_eq!(csv.lines().count(), 1 + roc.points.len());
}

#[test]
fn range_breakdown_cells() {
    let ffr = [0.6, 0.65, 0.75, 0.85, 0.95, 0.92, 0.78, 0.88];
    let labels: Vec<bool> = ffr.iter().map(|&f| f <= 0.8).collect();
    // perfect scores: positives above every negative
    let scores: Vec<f64> = labels.iter().map(|&l| if l { 0.9 } else { 0.1 }).collect();
    let rows = range_breakdown(&scores, &labels, &ffr, 0.5).unwrap();
    assert_eq!(rows[0].specificity, None);
    assert_eq!(rows[2].sensitivity, None);
    assert_eq!(rows[0].sensitivity, Some(1.0));
    assert_eq!(rows[1].sensitivity, Some(1.0));
    assert_eq!(rows[1].specificity, Some(1.0));
    assert_eq!(rows[2].specificity, Some(1.0));
    assert_eq!((rows[1].positives, rows[1].negatives), (2, 2));
}

fn constant_model(bias: f32) -> MilModel<f32> {
    let mut m = MilModel::<f32>::new(Mode::Myo, 0);
    let (w, b) = (m.head.weight, m.head.bias);
    m.params.value_mut(w).data_mut().fill(0.0);
    m.params.value_mut(b).data_mut().fill(bias);
    m
}

fn myo_bags(n: usize, seed: u64) -> Vec<Bag> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Bag {
            arteries: vec![vec![0.0; ENCODING_LEN]],
            myo: (0..FEATURE_LEN).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            label: i % 2 == 0,
        })
        .collect()
}

#[test]
fn exactly_the_last_ten_checkpoints_are_used() {
    let test = myo_bags(8, 1);
    let ffr: Vec<f64> = test.iter().map(|b| if b.label { 0.7 } else { 0.9 }).collect();
    let checkpoints: Vec<_> = (0..20).map(|i| constant_model(i as f32 * 0.1 - 1.0)).collect();
    let fe = evaluate_fold(&checkpoints, &test, &ffr, Mode::Myo).unwrap();
    assert_eq!(fe.models.len(), 10);
    for (j, m) in fe.models.iter().enumerate() {
        let z = (10 + j) as f64 * 0.1 - 1.0;
        let expect = 1.0 / (1.0 + (-(z as f32) as f64).exp());
        assert!((m.scores[0] - expect).abs() < 1e-6);
    }
    assert!(evaluate_fold(&checkpoints[..9], &test, &ffr, Mode::Myo).is_err());
    assert!(evaluate_fold(&checkpoints, &test, &ffr, Mode::Combined).is_err());
}

#[test]
fn duplicated_checkpoint_has_zero_spread() {
    let test = myo_bags(12, 2);
    let ffr: Vec<f64> = test.iter().map(|b| if b.label { 0.7 } else { 0.9 }).collect();
    let m = MilModel::<f32>::new(Mode::Myo, 5);
    let fe = evaluate_fold(&vec![m; 10], &test, &ffr, Mode::Myo).unwrap();
    assert!(fe.auc_sd < 1e-12);
    assert!((fe.mean_roc.auc - fe.auc_mean).abs() < 1e-12);
}

fn metrics(auc: f64, sens: f64, spec: f64, ranges: [(Option<f64>, Option<f64>); 3]) -> ModelMetrics {
    ModelMetrics {
        auc,
        threshold: 0.5,
        sensitivity: sens,
        specificity: spec,
        scores: vec![],
        ranges: std::array::from_fn(|r| RangeRow {
            name: RANGE_NAMES[r],
            positives: 1,
            negatives: 1,
            sensitivity: ranges[r].0,
            specificity: ranges[r].1,
        }),
    }
}

#[test]
fn summary_aggregates_slots_then_checkpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let folds: Vec<FoldEval> = (0..3)
        .map(|f| {
            let models: Vec<ModelMetrics> = (0..4)
                .map(|_| {
                    let r = [(Some(rng.gen()), None), (Some(rng.gen()), if f == 0 { None } else { Some(0.5) }), (None, Some(rng.gen()))];
                    metrics(rng.gen(), rng.gen(), rng.gen(), r)
                })
                .collect();
            let aucs: Vec<f64> = models.iter().map(|m| m.auc).collect();
            FoldEval {
                auc_mean: aucs.iter().sum::<f64>() / 4.0,
                auc_sd: 0.0,
                mean_roc: roc_auc(&[1.0, 0.0], &[true, false]).unwrap(),
                models,
            }
        })
        .collect();
    let s = summarize(Mode::Combined, &folds).unwrap();
    let slot: Vec<f64> = (0..4).map(|j| folds.iter().map(|f| f.models[j].auc).sum::<f64>() / 3.0).collect();
    let m = slot.iter().sum::<f64>() / 4.0;
    let sd = (slot.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 3.0).sqrt();
    assert!((s.auc_mean - m).abs() < 1e-12);
    assert!((s.auc_sd_checkpoints - sd).abs() < 1e-12);
    let fm: Vec<f64> = folds.iter().map(|f| f.auc_mean).collect();
    let fmean = fm.iter().sum::<f64>() / 3.0;
    let fsd = (fm.iter().map(|x| (x - fmean).powi(2)).sum::<f64>() / 2.0).sqrt();
    assert!((s.auc_sd_folds - fsd).abs() < 1e-12);
    assert_eq!(s.ranges[0].1, None);
    assert_eq!(s.ranges[2].0, None);
    assert_eq!(s.ranges[1].1, Some(0.5));
    let text = format_report(&[s.clone(), s.clone(), s]);
    assert!(text.contains('-'));
}

fn null_cohort(n: usize, seed: u64) -> Vec<Bag> {
    // labels follow the myocardium features only; arteries are pure noise
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 2 == 0;
            let shift = if label { 0.5 } else { -0.5 };
            Bag {
                arteries: (0..rng.gen_range(3..7))
                    .map(|_| (0..ENCODING_LEN).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect(),
                myo: (0..FEATURE_LEN).map(|_| rng.gen_range(-1.0..1.0) + shift).collect(),
                label,
            }
        })
        .collect()
}

#[test]
fn arteries_only_is_at_chance_on_a_myocardium_cohort() {
    let bags = null_cohort(300, 4);
    let labels: Vec<bool> = bags.iter().map(|b| b.label).collect();
    let plan = stratified_kfold(&labels, 5, 7).unwrap();
    let cfg = TrainConfig { iterations: 2000, checkpoint_interval: 200, seed: 1, ..Default::default() };
    let mut aucs = Vec::new();
    for fold in 0..5 {
        let train: Vec<Bag> = plan.train(fold).into_iter().map(|i| bags[i].clone()).collect();
        let test: Vec<Bag> = plan.test(fold).into_iter().map(|i| bags[i].clone()).collect();
        let ffr: Vec<f64> = test.iter().map(|b| if b.label { 0.7 } else { 0.9 }).collect();
        let mut m = MilModel::<f32>::new(Mode::Arteries, fold as u64);
        m.fit_standardizers(&train);
        let (ck, _) = train_mil_in_memory(&mut m, &train, &cfg).unwrap();
        aucs.push(evaluate_fold(&ck, &test, &ffr, Mode::Arteries).unwrap().auc_mean);
    }
    let auc = mean(&aucs);
    assert!((auc - 0.5).abs() <= 0.1, "arteries-only AUC {auc}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn auc_oracle_and_curve_shape(n in 2usize..60, seed in any::<u64>()) {
        let (s, l) = random_instance(&mut ChaCha8Rng::seed_from_u64(seed), n);
        let roc = roc_auc(&s, &l).unwrap();
        prop_assert!((roc.auc - pairwise_auc(&s, &l)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&roc.auc));
        for w in roc.points.windows(2) {
            prop_assert!(w[1].threshold < w[0].threshold);
            prop_assert!(w[1].sensitivity >= w[0].sensitivity);
            prop_assert!(1.0 - w[1].specificity >= 1.0 - w[0].specificity);
        }
        let last = roc.points.last().unwrap();
        prop_assert_eq!((last.sensitivity, last.specificity), (1.0, 0.0));
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        prop_assert!((roc_auc(&neg, &l).unwrap().auc - (1.0 - roc.auc)).abs() <= 1e-12);
    }

    #[test]
    fn folds_are_stratified_and_deterministic(
        labels in prop::collection::vec(any::<bool>(), 10..200),
        k in 2usize..8,
        seed in any::<u64>(),
    ) {
        prop_assume!(labels.len() >= k);
        let plan = stratified_kfold(&labels, k, seed).unwrap();
        prop_assert_eq!(&plan, &stratified_kfold(&labels, k, seed).unwrap());
        let n = labels.len() as f64;
        let frac = labels.iter().filter(|&&l| l).count() as f64 / n;
        let mut total = 0;
        for f in 0..k {
            let t = plan.test(f);
            total += t.len();
            let pos = t.iter().filter(|&&i| labels[i]).count() as f64;
            prop_assert!((pos - frac * t.len() as f64).abs() <= 1.0 + 1e-9);
        }
        prop_assert_eq!(total, labels.len());
    }
}
