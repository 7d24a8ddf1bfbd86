use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};

use pagn_core::critics::loss_gradcheck_suite;
use pagn_core::eval::{
    calibrate_threshold, check_matched, compare_ablation, evaluate_aging_accuracy, evaluate_identity, write_reports,
    EvalBundle, EvalError, Synthesis,
};
use pagn_core::faces::{read_ppm, sample_dataset, write_manifest, write_ppm, Dataset, FaceError};
use pagn_core::nn::{DiscriminatorKind, Network};
use pagn_core::pretrain::{pretrain_age_extractor, pretrain_identity_descriptor};
use pagn_core::tensor::gradcheck::{op_suite, DEFAULT_TOLERANCE};
use pagn_core::tensor::Tensor;
use pagn_core::trainer::{
    self, load_network, save_network, Checkpoint, CheckpointError, MetricsWriter, TrainConfig, TrainContext,
    TrainError, TrainOptions, TrainState, GENERATOR, PHI_AGE, PHI_ID,
};

use crate::config::{ConfigError, RunConfig};
use crate::{open_log, selftest, EvalMode, Which};

fn is_io(e: &(dyn std::error::Error + 'static)) -> bool {
    fn ck(e: &CheckpointError) -> bool {
        matches!(e, CheckpointError::Io(_))
    }
    fn tr(e: &TrainError) -> bool {
        match e {
            TrainError::Io(_) => true,
            TrainError::Checkpoint(c) => ck(c),
            _ => false,
        }
    }
    if e.is::<std::io::Error>() {
        return true;
    }
    if let Some(c) = e.downcast_ref::<CheckpointError>() {
        return ck(c);
    }
    if let Some(t) = e.downcast_ref::<TrainError>() {
        return tr(t);
    }
    if let Some(f) = e.downcast_ref::<FaceError>() {
        return matches!(f, FaceError::Io(_));
    }
    if let Some(v) = e.downcast_ref::<EvalError>() {
        return match v {
            EvalError::Io(_) => true,
            EvalError::Train(t) => tr(t),
            _ => false,
        };
    }
    false
}

/// 2 for I/O failures anywhere in the chain, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(is_io) {
        2
    } else {
        1
    }
}

fn prepare_dir(cfg: &RunConfig, dir: &Path) -> Result<()> {
    open_log(dir)?;
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json() + "\n").with_context(|| format!("writing {}", path.display()))
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    let t = Instant::now();
    let d = sample_dataset(&cfg.dataset())?;
    log::info!("rendered {} train and {} test portraits in {:.1?}", d.train.len(), d.test.len(), t.elapsed());
    Ok(d)
}

fn require(path: &Path, what: &str, producer: &str) -> Result<()> {
    if !path.exists() {
        bail!(ConfigError(format!("missing {what} at {}; run `{producer}` first", path.display())));
    }
    Ok(())
}

pub fn pretrain_dir(cfg: &RunConfig) -> PathBuf {
    cfg.run_dir.join("pretrain")
}

fn kind_name(kind: DiscriminatorKind) -> &'static str {
    match kind {
        DiscriminatorKind::Pyramid => "pyramid",
        DiscriminatorKind::OnePathway => "one_pathway",
    }
}

pub fn session_dir(cfg: &RunConfig, kind: DiscriminatorKind, cluster: usize) -> PathBuf {
    cfg.run_dir.join("train").join(kind_name(kind)).join(format!("cluster{cluster}"))
}

pub fn gen_data(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let dir = out.unwrap_or_else(|| cfg.run_dir.join("data"));
    prepare_dir(cfg, &dir)?;
    let d = dataset(cfg)?;
    for part in [&d.train, &d.test] {
        let sub = dir.join(part.split.as_str());
        fs::create_dir_all(&sub).with_context(|| format!("creating {}", sub.display()))?;
        for s in part.samples() {
            write_ppm(&sub.join(format!("{:06}.ppm", s.sample_id)), &s.image)?;
        }
    }
    write_manifest(&dir.join("manifest.csv"), &[&d.train, &d.test])?;
    log::info!("wrote {} images and manifest.csv to {}", d.train.len() + d.test.len(), dir.display());
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, which: Which) -> Result<()> {
    let dir = pretrain_dir(cfg);
    prepare_dir(cfg, &dir)?;
    let d = dataset(cfg)?;
    let (scale, pcfg) = (cfg.scale(), cfg.pretrain());
    let json = cfg.to_json();
    if matches!(which, Which::Age | Which::Both) {
        let t = Instant::now();
        let (net, report) = pretrain_age_extractor(&d.train, &d.test, &scale, &pcfg)?;
        log::info!("phi_age pretrained in {:.1?}: {:?}", t.elapsed(), report.metrics);
        save_network(&net, &json, &dir.join("phi_age.bin"))?;
        fs::write(dir.join("phi_age_report.json"), serde_json::to_string_pretty(&report)?)?;
    }
    if matches!(which, Which::Id | Which::Both) {
        let t = Instant::now();
        let (net, report) = pretrain_identity_descriptor(&d.train, &d.test, &scale, &pcfg)?;
        log::info!("phi_id pretrained in {:.1?}: {:?}", t.elapsed(), report.metrics);
        save_network(&net, &json, &dir.join("phi_id.bin"))?;
        fs::write(dir.join("phi_id_report.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn load_frozen(cfg: &RunConfig) -> Result<(Network, Network)> {
    let dir = pretrain_dir(cfg);
    let (pa, pi) = (dir.join("phi_age.bin"), dir.join("phi_id.bin"));
    require(&pa, "pretrained age extractor", "pagn pretrain --which age")?;
    require(&pi, "pretrained identity descriptor", "pagn pretrain --which id")?;
    let age = load_network(&pa, PHI_AGE)?;
    let id = load_network(&pi, PHI_ID)?;
    let want = cfg.scale().image_shape();
    for net in [&age, &id] {
        if net.spec.input_shape[..] != want[..] {
            bail!(ConfigError(format!(
                "{} was pretrained for {:?} images but the config asks for {:?}; rerun `pagn pretrain`",
                net.name(),
                net.spec.input_shape,
                want
            )));
        }
    }
    Ok((age, id))
}

fn train_session(cfg: &RunConfig, tcfg: TrainConfig, d: &Dataset, frozen: &(Network, Network), resume: bool) -> Result<()> {
    let dir = session_dir(cfg, tcfg.discriminator, tcfg.target_cluster);
    prepare_dir(cfg, &dir)?;
    let ckpt_path = dir.join("checkpoint.bin");
    let metrics_path = dir.join("metrics.csv");
    let ctx = TrainContext::new(&tcfg, &d.train, frozen.0.clone(), frozen.1.clone())?;
    let (mut state, mut writer) = if resume && ckpt_path.exists() {
        let state = TrainState::from_checkpoint(&Checkpoint::load(&ckpt_path)?)?;
        if state.config != tcfg {
            bail!(ConfigError(format!(
                "checkpoint {} was written with a different training configuration",
                ckpt_path.display()
            )));
        }
        log::info!("resuming cluster {} at iteration {}", tcfg.target_cluster, state.iteration);
        let w = MetricsWriter::resume(&metrics_path, state.iteration)?;
        (state, w)
    } else {
        (TrainState::new(tcfg, &frozen.0)?, MetricsWriter::create(&metrics_path)?)
    };
    log::info!(
        "training cluster {} with the {} critic for {} iterations",
        tcfg.target_cluster,
        kind_name(tcfg.discriminator),
        tcfg.total_iterations
    );
    let t = Instant::now();
    let opts_for = |stop: u64| TrainOptions { stop_at: Some(stop), diagnostic_checkpoint: Some(dir.join("diagnostic.bin")) };
    while state.iteration < tcfg.total_iterations {
        let stop = match cfg.checkpoint_every {
            0 => tcfg.total_iterations,
            k => ((state.iteration / k + 1) * k).min(tcfg.total_iterations),
        };
        trainer::train(&mut state, &ctx, &opts_for(stop), &mut |row| writer.write(row))?;
        writer.flush()?;
        state.to_checkpoint()?.save(&ckpt_path)?;
    }
    log::info!("cluster {} done in {:.1?}; checkpoint {}", tcfg.target_cluster, t.elapsed(), ckpt_path.display());
    Ok(())
}

pub fn train(cfg: &RunConfig, all_clusters: bool, resume: bool) -> Result<()> {
    let frozen = load_frozen(cfg)?;
    let d = dataset(cfg)?;
    let clusters = if all_clusters { vec![1, 2, 3] } else { vec![cfg.target_cluster] };
    for c in clusters {
        let tcfg = TrainConfig { target_cluster: c, ..cfg.train() };
        train_session(cfg, tcfg, &d, &frozen, resume)?;
    }
    Ok(())
}

fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|q| q.extension().is_some_and(|x| x == "ppm"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        bail!(ConfigError("no PPM inputs found".into()));
    }
    Ok(files)
}

pub fn generate(cfg: &RunConfig, checkpoint: &Path, inputs: &[PathBuf], out: Option<PathBuf>) -> Result<()> {
    require(checkpoint, "generator checkpoint", "pagn train")?;
    let ck = Checkpoint::load(checkpoint)?;
    let tcfg: TrainConfig = serde_json::from_str(&ck.config_json)
        .map_err(|e| ConfigError(format!("{}: unreadable training config: {e}", checkpoint.display())))?;
    let generator = ck.network(GENERATOR)?;
    let log_dir = out.clone().unwrap_or_else(|| cfg.run_dir.join("generated"));
    prepare_dir(cfg, &log_dir)?;
    let files = collect_inputs(inputs)?;
    for path in &files {
        let img = read_ppm(path)?;
        let y = trainer::generate(generator, &Tensor::stack(&[&img])?)?;
        let aged = y.reshape(img.shape())?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let dir = match &out {
            Some(o) => o.clone(),
            None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        write_ppm(&dir.join(format!("{stem}_aged{}.ppm", tcfg.target_cluster)), &aged)?;
    }
    log::info!("aged {} images to cluster {}", files.len(), tcfg.target_cluster);
    Ok(())
}

fn load_family(cfg: &RunConfig, kind: DiscriminatorKind) -> Result<(Vec<Network>, Vec<TrainConfig>)> {
    let mut nets = Vec::new();
    let mut cfgs = Vec::new();
    for c in 1..=3 {
        let path = session_dir(cfg, kind, c).join("checkpoint.bin");
        let producer = format!("pagn train --target-cluster {c} --discriminator {}", kind_name(kind));
        require(&path, &format!("{} checkpoint for cluster {c}", kind_name(kind)), &producer)?;
        let ck = Checkpoint::load(&path)?;
        let state = TrainState::from_checkpoint(&ck)?;
        if state.iteration < state.config.total_iterations {
            log::warn!("{} is incomplete ({} of {} iterations)", path.display(), state.iteration, state.config.total_iterations);
        }
        if state.config.scale != cfg.scale() {
            bail!(ConfigError(format!("{} uses a different network scale than the config", path.display())));
        }
        nets.push(state.generator);
        cfgs.push(state.config);
    }
    Ok((nets, cfgs))
}

pub fn eval(cfg: &RunConfig, mode: EvalMode) -> Result<()> {
    let dir = cfg.run_dir.join("eval");
    prepare_dir(cfg, &dir)?;
    let d = dataset(cfg)?;
    let primary = cfg.discriminator;
    let (nets, cfgs) = load_family(cfg, primary)?;
    let cal = calibrate_threshold(&d.train, cfg.calibration_pairs, cfg.false_accept_rate, cfg.eval_seed)?;
    log::info!("match threshold tau {:.5} (delta0 {:.5}) from {} impostor pairs", cal.tau, cal.delta0, cal.impostor_pairs);
    let refs: Vec<Option<&Network>> = nets.iter().map(Some).collect();
    let synth = Synthesis::run(&refs, &d.test)?;
    let aging = evaluate_aging_accuracy(&synth, &d.test);
    let identity = evaluate_identity(&synth, &cal);
    let mut bundle = EvalBundle::default();
    if matches!(mode, EvalMode::Accuracy | EvalMode::All) {
        for s in &aging.synthesized {
            let b = &aging.benchmark[s.cluster];
            log::info!(
                "cluster {}: synthesized {:.2}±{:.2} vs natural {:.2}±{:.2} ({} undetected)",
                s.cluster, s.mean, s.std, b.mean, b.std, s.undetected
            );
        }
        bundle.aging = Some(aging.clone());
    }
    if matches!(mode, EvalMode::Identity | EvalMode::All) {
        for c in &identity.categories {
            log::info!(
                "{}: confidence {:.2}±{:.2}, verification rate {:.3} ({} undetected)",
                c.name, c.mean_confidence, c.std_confidence, c.verification_rate, c.undetected
            );
        }
        bundle.identity = Some(identity.clone());
    }
    if matches!(mode, EvalMode::Ablation | EvalMode::All) {
        let other = match primary {
            DiscriminatorKind::Pyramid => DiscriminatorKind::OnePathway,
            DiscriminatorKind::OnePathway => DiscriminatorKind::Pyramid,
        };
        let (onets, ocfgs) = load_family(cfg, other)?;
        let orefs: Vec<Option<&Network>> = onets.iter().map(Some).collect();
        let osynth = Synthesis::run(&orefs, &d.test)?;
        let (oaging, oidentity) = (evaluate_aging_accuracy(&osynth, &d.test), evaluate_identity(&osynth, &cal));
        let (pyr, one) = if primary == DiscriminatorKind::Pyramid {
            check_matched(&cfgs, &ocfgs)?;
            ((&aging, &identity), (&oaging, &oidentity))
        } else {
            check_matched(&ocfgs, &cfgs)?;
            ((&oaging, &oidentity), (&aging, &identity))
        };
        let ab = compare_ablation(pyr, one)?;
        log::info!(
            "age error vs benchmark: pyramid {:.3}, one-pathway {:.3} ({})",
            ab.pyramid.mean_abs_error,
            ab.one_pathway.mean_abs_error,
            if ab.pyramid_not_worse { "pyramid not worse" } else { "WARN: pyramid worse" }
        );
        bundle.ablation = Some(ab);
    }
    write_reports(&dir, &bundle)?;
    log::info!("reports written to {}", dir.display());
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, trials: usize) -> Result<bool> {
    let dir = cfg.run_dir.join("gradcheck");
    prepare_dir(cfg, &dir)?;
    let t = Instant::now();
    let mut checks = op_suite(trials, cfg.eval_seed)?;
    checks.extend(loss_gradcheck_suite(trials, cfg.eval_seed ^ 0x5EED)?);
    let mut csv = String::from("op,trials,max_rel_err,passed\n");
    println!("{:<28} {:>6} {:>14}  result", "op", "trials", "max rel err");
    let mut ok = true;
    for c in &checks {
        let pass = c.passed(DEFAULT_TOLERANCE);
        ok &= pass;
        println!("{:<28} {:>6} {:>14.3e}  {}", c.op, c.trials, c.max_rel_err, if pass { "ok" } else { "FAIL" });
        csv.push_str(&format!("{},{},{:e},{}\n", c.op, c.trials, c.max_rel_err, pass));
    }
    fs::write(dir.join("gradcheck.csv"), csv)?;
    log::info!("{} operations checked in {:.1?}: {}", checks.len(), t.elapsed(), if ok { "all passed" } else { "FAILED" });
    Ok(ok)
}

pub fn selftest(cfg: &RunConfig) -> Result<bool> {
    let dir = cfg.run_dir.join("selftest");
    prepare_dir(cfg, &dir)?;
    let results = selftest::run();
    let mut report = String::new();
    let mut ok = true;
    for r in &results {
        ok &= r.passed;
        let line = format!("{:<4} {:<12} {}{}", if r.passed { "ok" } else { "FAIL" }, r.module, r.name, r.detail.as_deref().map(|d| format!(": {d}")).unwrap_or_default());
        println!("{line}");
        report.push_str(&line);
        report.push('\n');
    }
    fs::write(dir.join("selftest.txt"), report)?;
    log::info!("{} of {} checks passed", results.iter().filter(|r| r.passed).count(), results.len());
    Ok(ok)
}
