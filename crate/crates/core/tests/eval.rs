use pagn_core::eval::*;
use pagn_core::faces::{oracle_identity_distance, sample_dataset, AgeCluster, Dataset, DatasetConfig};
use pagn_core::nn::{build_generator, DiscriminatorKind, ScaleConfig};
use pagn_core::trainer::TrainConfig;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn data() -> Dataset {
    sample_dataset(&DatasetConfig { identities_per_split: 12, samples_per_cluster: 16, ..DatasetConfig::default() })
        .unwrap()
}

fn passthrough(d: &Dataset) -> Synthesis {
    Synthesis::passthrough(d.test.cluster(AgeCluster::new(0).unwrap()).iter().map(|s| s.image.clone()).collect())
}

#[test]
fn passthrough_control_reproduces_young_statistics() {
    let d = data();
    let synth = passthrough(&d);
    let acc = evaluate_aging_accuracy(&synth, &d.test);
    assert_eq!(acc.synthesized.len(), 3);
    assert_eq!(acc.benchmark.len(), 4);
    for s in &acc.synthesized {
        assert_eq!(s.mean, acc.benchmark[0].mean);
        assert_eq!(s.std, acc.benchmark[0].std);
        assert_eq!(s.detected + s.undetected, synth.inputs.len());
    }
    let cal = calibrate_threshold(&d.train, 400, DEFAULT_FAR, 5).unwrap();
    let ver = evaluate_identity(&synth, &cal);
    assert_eq!(ver.categories.len(), 6);
    for c in &ver.categories {
        assert_eq!(c.detected + c.undetected, synth.inputs.len());
        assert!(c.confidences.iter().all(|&v| v == 100.0));
        assert_eq!(c.verification_rate, 1.0);
    }
    let m = ver.confidence_matrix();
    for (a, row) in m.iter().enumerate() {
        for (b, v) in row.iter().enumerate() {
            assert_eq!(*v, m[b][a]);
        }
    }
}

#[test]
fn calibration_respects_false_accept_rate() {
    let d = data();
    let cal = calibrate_threshold(&d.train, 1000, DEFAULT_FAR, 9).unwrap();
    assert_eq!(cal, calibrate_threshold(&d.train, 1000, DEFAULT_FAR, 9).unwrap());
    assert!(cal.tau > 0.0);
    assert!((cal.confidence(cal.tau) - THRESHOLD_CONFIDENCE).abs() < 1e-9);
    // independent recount on freshly drawn impostor pairs from the same partition
    let samples: Vec<_> = d.train.samples().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut n, mut accepted) = (0, 0);
    while n < 1000 {
        use rand::Rng;
        let (a, b) = (rng.gen_range(0..samples.len()), rng.gen_range(0..samples.len()));
        if samples[a].identity_index == samples[b].identity_index {
            continue;
        }
        if let Some(dist) = oracle_identity_distance(&samples[a].image, &samples[b].image) {
            n += 1;
            accepted += usize::from(dist <= cal.tau);
        }
    }
    assert!((accepted as f64 / n as f64) < 0.03, "recounted FAR {accepted}/{n}");
    assert!(calibrate_threshold(&d.train, 10, 0.0, 1).is_err());
}

#[test]
fn identical_models_give_identical_ablation_rows() {
    let d = data();
    let synth = passthrough(&d);
    let cal = calibrate_threshold(&d.train, 200, DEFAULT_FAR, 1).unwrap();
    let (acc, ver) = (evaluate_aging_accuracy(&synth, &d.test), evaluate_identity(&synth, &cal));
    let ab = compare_ablation((&acc, &ver), (&acc, &ver)).unwrap();
    assert_eq!(ab.pyramid, ab.one_pathway);
    assert!(ab.pyramid_not_worse);
    assert_eq!(ab.benchmark_mean.len(), 4);

    let dir = tempfile::tempdir().unwrap();
    let bundle = EvalBundle { aging: Some(acc), identity: Some(ver), ablation: Some(ab) };
    write_reports(dir.path(), &bundle).unwrap();
    for f in ["aging_accuracy.csv", "age_histogram.csv", "verification.csv", "confidence_distribution.csv", "ablation.csv", "report.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let rows = std::fs::read_to_string(dir.path().join("aging_accuracy.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 3 + 4);
    let back: EvalBundle = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(back.ablation, bundle.ablation);
}

#[test]
fn missing_generator_and_mismatched_families_are_errors() {
    let d = data();
    let scale = ScaleConfig::default();
    let g = build_generator(&scale, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let err = Synthesis::run(&[Some(&g), None, Some(&g)], &d.test).unwrap_err();
    assert!(matches!(err, EvalError::MissingGenerator(2)));
    let synth = Synthesis::run(&[Some(&g), Some(&g), Some(&g)], &d.test).unwrap();
    assert_eq!(synth.aged[2].len(), synth.inputs.len());
    assert_eq!(synth.aged[0][0].shape(), &[3, 48, 48]);

    let p: Vec<TrainConfig> = (1..=3).map(|c| TrainConfig { target_cluster: c, ..Default::default() }).collect();
    let o: Vec<TrainConfig> = p.iter().map(|c| TrainConfig { discriminator: DiscriminatorKind::OnePathway, ..*c }).collect();
    assert!(check_matched(&p, &o).is_ok());
    let mut bad = o.clone();
    bad[1].seed = 99;
    assert!(matches!(check_matched(&p, &bad), Err(EvalError::Mismatch(_))));
}

proptest! {
    #[test]
    fn confidence_is_strictly_decreasing(tau in 0.01f64..1.0, a in 0.0f64..2.0, b in 0.0f64..2.0) {
        let cal = Calibration::from_tau(tau, 0.01, 1, 0);
        prop_assert_eq!(cal.confidence(0.0), 100.0);
        if a < b {
            prop_assert!(cal.confidence(a) > cal.confidence(b));
        }
        prop_assert!((0.0..=100.0).contains(&cal.confidence(a)));
    }
}
