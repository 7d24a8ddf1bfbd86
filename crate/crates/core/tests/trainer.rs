use pagn_core::faces::{sample_dataset, Dataset, DatasetConfig};
use pagn_core::nn::{build_age_extractor, build_identity_descriptor, DiscriminatorKind, Network, ScaleConfig};
use pagn_core::tensor::{lr_at, Tensor};
use pagn_core::trainer::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scale() -> ScaleConfig {
    ScaleConfig { image_size: 32, base_channels: 4, ..ScaleConfig::default() }
}

fn fixture() -> (Dataset, Network, Network) {
    let data = sample_dataset(&DatasetConfig {
        identities_per_split: 6,
        samples_per_cluster: 6,
        image_size: 32,
        ..DatasetConfig::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut age = build_age_extractor(&scale(), &mut rng).unwrap();
    age.truncate_after_last_tap().unwrap();
    age.set_trainable(false);
    let mut id = build_identity_descriptor(&scale(), &mut rng).unwrap();
    id.set_trainable(false);
    (data, age, id)
}

fn config(total: u64) -> TrainConfig {
    TrainConfig {
        scale: scale(),
        batch_size: 2,
        total_iterations: total,
        record_wall_clock: false,
        lr0: 1e-3,
        ..TrainConfig::default()
    }
}

fn run(cfg: TrainConfig, ctx: &TrainContext, state: &mut TrainState, stop: Option<u64>) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    let opts = TrainOptions { stop_at: stop, ..Default::default() };
    assert_eq!(state.config, cfg);
    train(state, ctx, &opts, &mut |r| {
        rows.push(*r);
        Ok(())
    })
    .unwrap();
    rows
}

#[test]
fn resume_from_midpoint_is_bitwise_identical() {
    let (data, age, id) = fixture();
    let cfg = config(8);
    let ctx = TrainContext::new(&cfg, &data.train, age.clone(), id).unwrap();

    let mut straight = TrainState::new(cfg, &age).unwrap();
    let rows_a = run(cfg, &ctx, &mut straight, None);

    let mut first = TrainState::new(cfg, &age).unwrap();
    let mut rows_b = run(cfg, &ctx, &mut first, Some(4));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    first.to_checkpoint().unwrap().save(&path).unwrap();
    drop(first);
    let mut resumed = TrainState::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(resumed.iteration, 4);
    rows_b.extend(run(cfg, &ctx, &mut resumed, None));

    assert_eq!(rows_a, rows_b);
    assert_eq!(straight, resumed);
    assert_eq!(straight.to_checkpoint().unwrap().to_bytes().unwrap(), resumed.to_checkpoint().unwrap().to_bytes().unwrap());
}

#[test]
fn schedule_and_frozen_partition() {
    let (data, age, id) = fixture();
    let cfg = config(11);
    let ctx = TrainContext::new(&cfg, &data.train, age.clone(), id.clone()).unwrap();
    let mut state = TrainState::new(cfg, &age).unwrap();
    let g0 = state.generator.clone();
    let d0 = state.discriminator.clone();
    let rows = run(cfg, &ctx, &mut state, None);

    assert_eq!(rows.len(), 11);
    assert!(rows.iter().enumerate().all(|(i, r)| r.iteration == i as u64 && r.lr == lr_at(i as u64, cfg.lr0)));
    let pixel: Vec<u64> = rows.iter().filter(|r| r.pixel.is_some()).map(|r| r.iteration).collect();
    assert_eq!(pixel, vec![0, 5, 10]);
    assert!(rows.iter().all(|r| r.wall_ms.is_none()));
    // frozen networks are bitwise untouched, trainable ones moved
    assert_eq!(ctx.phi_age, age);
    assert_eq!(ctx.phi_id, id);
    assert_ne!(state.generator, g0);
    assert_ne!(state.discriminator, d0);
    assert_eq!(state.adam_g.t, 11);
    assert!(state.adam_d.iter().all(|a| a.t == 11));
}

#[test]
fn repeated_runs_match_and_one_pathway_trains() {
    let (data, age, id) = fixture();
    for kind in [DiscriminatorKind::Pyramid, DiscriminatorKind::OnePathway] {
        let cfg = TrainConfig { discriminator: kind, target_cluster: 3, ..config(3) };
        let ctx = TrainContext::new(&cfg, &data.train, age.clone(), id.clone()).unwrap();
        let mut a = TrainState::new(cfg, &age).unwrap();
        let mut b = TrainState::new(cfg, &age).unwrap();
        let (ra, rb) = (run(cfg, &ctx, &mut a, None), run(cfg, &ctx, &mut b, None));
        let csv = |rows: &[MetricsRow]| rows.iter().map(MetricsRow::to_csv).collect::<Vec<_>>();
        assert_eq!(csv(&ra), csv(&rb));
        assert_eq!(a.discriminator.kind, kind);
    }
}

#[test]
fn non_finite_loss_aborts_with_diagnostic_checkpoint() {
    let (data, age, id) = fixture();
    let cfg = config(4);
    let ctx = TrainContext::new(&cfg, &data.train, age.clone(), id).unwrap();
    let mut state = TrainState::new(cfg, &age).unwrap();
    state.generator.params[0].value.data_mut()[0] = f32::NAN;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("diag.ckpt");
    let opts = TrainOptions { diagnostic_checkpoint: Some(path.clone()), ..Default::default() };
    let err = train(&mut state, &ctx, &opts, &mut |_| Ok(())).unwrap_err();
    assert!(matches!(err, TrainError::NonFinite { iteration: 0, .. }), "{err}");
    assert_eq!(Checkpoint::load(&path).unwrap().iteration, 0);
}

#[test]
fn context_rejects_unfrozen_networks_and_generate_checks_shape() {
    let (data, age, id) = fixture();
    let cfg = config(1);
    let mut live = age.clone();
    live.set_trainable(true);
    assert!(TrainContext::new(&cfg, &data.train, live, id).is_err());
    let state = TrainState::new(cfg, &age).unwrap();
    assert!(generate(&state.generator, &Tensor::zeros(&[3, 32, 32])).is_err());
    let y = generate(&state.generator, &Tensor::zeros(&[2, 3, 32, 32])).unwrap();
    assert_eq!(y.shape(), &[2, 3, 32, 32]);
    assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}
