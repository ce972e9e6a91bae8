use ffrmil::io::{Volume, VOLUME_MAGIC};
use ffrmil::synth::*;
use proptest::prelude::*;

fn oracle(g: &ArteryGeometry, k: &FfrConstants) -> f64 {
    // direct transcription of the series-resistance model
    let mut sum = 0.0;
    for s in &g.stenoses {
        let r_ref = g.reference_radius(s.center);
        sum += k.c * s.length_mm * (1.0 / s.r_min.powi(4) - 1.0 / r_ref.powi(4));
    }
    k.r_micro / (k.r_micro + sum)
}

fn lesion(center: f64, length_mm: f64, r_min: f64) -> Stenosis {
    Stenosis { center, length_mm, r_min, calcified: false }
}

#[test]
fn calibrated_reference_lesion() {
    let k = FfrConstants::default();
    let mut g = ArteryGeometry::healthy(200, 1.5);
    assert_eq!(ffr_oracle(&g, &k), 1.0);
    g.stenoses.push(lesion(100.0, 10.0, 0.75));
    let f = ffr_oracle(&g, &k);
    assert!((f - 0.80).abs() <= 0.02, "{f}");
    // closed form: c = R_micro (1/0.8 − 1) / (10 (0.75⁻⁴ − 1.5⁻⁴))
    let c = 0.25 / (10.0 * (0.75f64.powi(-4) - 1.5f64.powi(-4)));
    assert!((k.c - c).abs() < 1e-15);
    assert!((k.c - 0.0084375).abs() < 1e-12);
}

#[test]
fn oracle_matches_transcription_on_cohort() {
    let cfg = CohortConfig::default();
    let k = FfrConstants::default();
    for plan in plan_cohort(&cfg).unwrap().iter().take(40) {
        for (g, &f) in plan.arteries.iter().zip(&plan.ffr) {
            assert!((oracle(g, &k) - f).abs() < 1e-12);
            g.validate().unwrap();
        }
    }
}

#[test]
fn cohort_statistics_match_targets() {
    let plans = plan_cohort(&CohortConfig::default()).unwrap();
    assert_eq!(plans.len(), 200);
    let n = plans.len() as f64;
    let arteries = plans.iter().map(|p| p.arteries.len() as f64).sum::<f64>() / n;
    assert!((arteries - 18.5).abs() <= 1.0, "mean artery count {arteries}");
    let ffr = plans.iter().map(|p| p.min_ffr).sum::<f64>() / n;
    assert!((ffr - 0.79).abs() <= 0.03, "mean min FFR {ffr}");
    let pos = plans.iter().filter(|p| p.label).count() as f64 / n;
    assert!((0.35..=0.65).contains(&pos), "positive fraction {pos}");
    for p in &plans {
        assert!((MIN_ARTERIES..=MAX_ARTERIES).contains(&p.arteries.len()));
        let m = p.ffr.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(m, p.min_ffr);
        assert_eq!(p.label, p.min_ffr <= 0.8);
    }
}

#[test]
fn class_balance_holds_across_seeds() {
    for seed in [1, 2, 3] {
        let cfg = CohortConfig { seed, patients: 150, ..Default::default() };
        let plans = plan_cohort(&cfg).unwrap();
        let pos = plans.iter().filter(|p| p.label).count() as f64 / plans.len() as f64;
        assert!((0.35..=0.65).contains(&pos), "seed {seed}: {pos}");
    }
}

#[test]
fn generated_patient_is_consistent_and_reproducible() {
    let cfg = CohortConfig::default();
    let a = generate_patient(&cfg, 3, 99).unwrap();
    let b = generate_patient(&cfg, 3, 99).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.mprs.len(), a.plan.arteries.len());
    for (v, g) in a.mprs.iter().zip(&a.plan.arteries) {
        assert_eq!(v.extents, vec![g.length, 40, 40]);
    }
    assert!(a.mask.data.iter().any(|&m| m > 0.0));
    let k = FfrConstants::default();
    let min = a.plan.arteries.iter().map(|g| ffr_oracle(g, &k)).fold(f64::INFINITY, f64::min);
    assert_eq!(a.label(), min <= 0.8);
}

fn territory_means(r: &MyoRender) -> ([f64; 4], [usize; 4]) {
    let mut sum = [0.0; 4];
    let mut n = [0usize; 4];
    for (i, &t) in r.territory.iter().enumerate() {
        if t != u8::MAX {
            sum[t as usize] += r.volume.data[i] as f64;
            n[t as usize] += 1;
        }
    }
    (std::array::from_fn(|t| sum[t] / n[t] as f64), n)
}

/// SD of a territory mean: the texture is a 3×3 box sum of unit white noise
/// divided by 3, so its territory average is ≈ 3·texture·(mean of raw noise).
fn mean_sd(texture: f64, noise: f64, n: usize) -> f64 {
    ((3.0 * texture).powi(2) + noise * noise).sqrt() / (n as f64).sqrt()
}

#[test]
fn ischemic_territory_drops_by_configured_amount() {
    let layout = MyoLayout::default();
    let style = MyoStyle::default();
    let params = MyoRenderParams { coupling: 150.0, heterogeneity: 0.0, noise_sd: 10.0, seed: 5 };
    let healthy = render_myocardium(&layout, &style, &[1.0; 4], &params);
    assert_eq!(healthy.affected_voxels, 0);
    let (h, n) = territory_means(&healthy);
    for a in 0..4 {
        for b in a + 1..4 {
            let tol = 4.0 * mean_sd(style.texture, 10.0, n[a]).hypot(mean_sd(style.texture, 10.0, n[b]));
            assert!((h[a] - h[b]).abs() < tol, "{h:?} tol {tol}");
        }
    }
    let sick = render_myocardium(&layout, &style, &[1.0, 0.6, 1.0, 1.0], &params);
    assert_eq!(sick.affected_voxels, n[1]);
    let (s, _) = territory_means(&sick);
    let expected = 150.0 * (0.85 - 0.6);
    let others = (s[0] + s[2] + s[3]) / 3.0;
    let tol = 4.0 * mean_sd(style.texture, 10.0, n[1]).hypot(mean_sd(style.texture, 10.0, 3 * n[0]));
    assert!(((others - s[1]) - expected).abs() < tol, "drop {} vs {expected} tol {tol}", others - s[1]);
    assert_eq!(sick.mask, healthy.mask);
}

#[test]
fn myocardium_mask_is_one_component() {
    let r = render_myocardium(
        &MyoLayout::default(),
        &MyoStyle::default(),
        &[1.0; 4],
        &MyoRenderParams { coupling: 0.0, heterogeneity: 0.0, noise_sd: 0.0, seed: 0 },
    );
    let voxels: Vec<usize> = (0..r.mask.len()).filter(|&i| r.mask.data[i] > 0.0).collect();
    let e = [r.mask.extents[0], r.mask.extents[1], r.mask.extents[2]];
    assert!(ffrmil::myo::is_connected(&voxels, e));
}

#[test]
fn dataset_layout_and_magic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CohortConfig { min_length: 50, max_length: 60, ..Default::default() };
    let rec = generate_patient(&cfg, 12, 4).unwrap();
    let p = write_patient(dir.path(), &rec).unwrap();
    assert_eq!(p, patient_dir(dir.path(), 12));
    assert!(p.ends_with("patient_0012"));
    for name in [MYO_VOLUME_FILE, MYO_MASK_FILE] {
        let bytes = std::fs::read(p.join(name)).unwrap();
        assert_eq!(&bytes[..8], VOLUME_MAGIC);
    }
    let first = std::fs::read(artery_file(&p, 0)).unwrap();
    assert_eq!(&first[..8], VOLUME_MAGIC);
    assert!(artery_file(&p, 0).ends_with("arteries/000.vol"));
    let back = read_patient(&p).unwrap();
    assert_eq!(back, rec);
    assert_eq!(list_patients(dir.path()).unwrap(), vec![p]);
}

#[test]
fn volume_header_layout() {
    let mut v = Volume::zeros(&[2, 3, 4], &[0.3, 0.3, 0.3]);
    v.data[5] = 1.5;
    let bytes = v.to_bytes();
    // magic, rank, three extents, three spacings, payload
    assert_eq!(bytes.len(), 8 + 8 + 3 * 8 + 3 * 8 + 24 * 4);
    assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 3);
    assert_eq!(f64::from_le_bytes(bytes[40..48].try_into().unwrap()), 0.3);
    let off = 64 + 5 * 4;
    assert_eq!(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()), 1.5);
    assert_eq!(Volume::from_bytes(&bytes).unwrap(), v);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ffr_strictly_decreases_with_severity(
        r0 in 1.2f64..2.0,
        len_mm in 2.0f64..20.0,
        f1 in 0.05f64..0.95,
        f2 in 0.05f64..0.95,
        extra in prop::option::of((0.3f64..0.95, 2.0f64..10.0)),
    ) {
        let k = FfrConstants::default();
        let mut g = ArteryGeometry::healthy(300, r0);
        if let Some((frac, l)) = extra {
            g.stenoses.push(lesion(60.0, l, frac * r0));
        }
        let (a, b) = (f1.min(f2), f1.max(f2));
        prop_assume!(b - a > 1e-6);
        let mut tight = g.clone();
        tight.stenoses.push(lesion(200.0, len_mm, a * r0));
        let mut loose = g.clone();
        loose.stenoses.push(lesion(200.0, len_mm, b * r0));
        let (ft, fl) = (ffr_oracle(&tight, &k), ffr_oracle(&loose, &k));
        prop_assert!(ft < fl);
        prop_assert!(fl < ffr_oracle(&g, &k));
        prop_assert!(ft > 0.0 && fl <= 1.0);
        let mut longer = loose.clone();
        longer.stenoses.last_mut().unwrap().length_mm += 1.0;
        prop_assert!(ffr_oracle(&longer, &k) < fl);
    }

    #[test]
    fn meta_roundtrip(seed in any::<u64>(), id in 0usize..10_000) {
        let cfg = CohortConfig::default();
        let plan = plan_patient(&cfg, id, seed, &FfrConstants::default());
        prop_assert_eq!(parse_meta(&format_meta(&plan)).unwrap(), plan);
    }
}
