use pagn_core::faces::{
    oracle_age, oracle_identity_distance, read_ppm, render_face, sample_dataset, sample_identity, write_manifest,
    write_ppm, AgeParams, DatasetConfig, MANIFEST_HEADER,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn youngest_faces_read_as_youngest() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let id = sample_identity(&mut rng);
        let a = oracle_age(&render_face(&id, 16.0, 48).unwrap()).unwrap().age_years;
        assert!((16.0..=20.0).contains(&a));
    }
}

#[test]
fn twenty_years_reads_as_more_than_ten() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let id = sample_identity(&mut rng);
        let old = oracle_age(&render_face(&id, 44.0, 48).unwrap()).unwrap().age_years;
        let young = oracle_age(&render_face(&id, 24.0, 48).unwrap()).unwrap().age_years;
        assert!(old - young > 10.0);
    }
}

#[test]
fn age_oracle_error_on_clean_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut total = 0.0;
    for _ in 0..400 {
        let id = sample_identity(&mut rng);
        let age = rng.gen_range(16.0..=60.0);
        let est = oracle_age(&render_face(&id, age, 48).unwrap()).unwrap().age_years;
        total += (est - age).abs();
    }
    assert!(total / 400.0 <= 2.5, "mean abs error {}", total / 400.0);
}

#[test]
fn age_oracle_is_monotone_in_true_age() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let id = sample_identity(&mut rng);
        let mut last = 0.0;
        for k in 0..=44 {
            let est = oracle_age(&render_face(&id, 16.0 + k as f64, 48).unwrap()).unwrap().age_years;
            assert!(est >= last);
            last = est;
        }
    }
}

#[test]
fn same_person_across_ages_is_closer_than_another_person() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut wins = 0;
    for _ in 0..200 {
        let (a, b) = (sample_identity(&mut rng), sample_identity(&mut rng));
        let a20 = render_face(&a, 20.0, 48).unwrap();
        let same = oracle_identity_distance(&a20, &render_face(&a, 55.0, 48).unwrap()).unwrap();
        let other = oracle_identity_distance(&a20, &render_face(&b, 20.0, 48).unwrap()).unwrap();
        wins += usize::from(same < other);
    }
    assert!(wins >= 190, "{wins}/200");
}

#[test]
fn clean_renders_round_trip_through_ppm() {
    let dir = tempfile::tempdir().unwrap();
    let id = sample_identity(&mut ChaCha8Rng::seed_from_u64(6));
    let img = render_face(&id, 47.0, 48).unwrap();
    let path = dir.path().join("face.ppm");
    write_ppm(&path, &img).unwrap();
    assert_eq!(read_ppm(&path).unwrap(), img);
}

#[test]
fn manifest_has_a_row_per_sample() {
    let cfg = DatasetConfig { master_seed: 9, identities_per_split: 4, samples_per_cluster: 3, image_size: 32 };
    let d = sample_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.csv");
    write_manifest(&path, &[&d.train, &d.test]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], MANIFEST_HEADER);
    assert_eq!(lines.len(), 1 + 2 * 4 * 3);
    let cols = MANIFEST_HEADER.split(',').count();
    assert!(lines.iter().all(|l| l.split(',').count() == cols));
}

#[test]
fn derived_age_factors() {
    assert_eq!(AgeParams::new(16.0).unwrap().wrinkle_count, 0);
    assert_eq!(AgeParams::new(60.0).unwrap().wrinkle_count, 11);
}
