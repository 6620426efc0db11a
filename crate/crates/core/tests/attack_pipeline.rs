use praf_core::image::synthetic_scene;
use praf_core::{
    build_ensemble, run_attack, AttackConfig, EncoderConfig, Ensemble, Error, Image, Interpolation, RunConfig, UpdateRule,
};

fn small_ensemble() -> Ensemble {
    build_ensemble(&[EncoderConfig::new(32, 8, 3, 16, 2, 1), EncoderConfig::new(32, 16, 3, 16, 2, 2)]).unwrap()
}

fn short(iterations: usize) -> AttackConfig {
    AttackConfig { iterations, stages: 1, crop_enabled: false, ..AttackConfig::default() }
}

#[test]
fn identical_clean_and_target_is_a_fixed_point() {
    let ens = small_ensemble();
    let x = synthetic_scene(32, 3);
    let out = run_attack(&x, &x, &ens, &short(5)).unwrap();
    assert_eq!(out.adversarial, x);
    assert!(out.trace.iterations.iter().all(|r| r.delta_inf == 0.0 && r.l_global.abs() < 1e-12));
}

#[test]
fn descent_lowers_and_literal_ascent_raises_the_global_loss() {
    let ens = small_ensemble();
    let (x, t) = (synthetic_scene(32, 4), synthetic_scene(32, 5));
    let down = run_attack(&x, &t, &ens, &short(20)).unwrap().trace.iterations;
    assert!(down.last().unwrap().l_global < down[0].l_global);
    let up_cfg = AttackConfig { update: UpdateRule::LiteralAscent, ..short(20) };
    let up = run_attack(&x, &t, &ens, &up_cfg).unwrap().trace.iterations;
    assert!(up.last().unwrap().l_global > up[0].l_global);
}

#[test]
fn ranks_beyond_the_pool_are_clamped() {
    // Two encoders of depth 3 give a pool of four intermediate layers.
    let ens = small_ensemble();
    let cfg = AttackConfig { ranks: vec![1, 3, 5, 9], ..short(2) };
    let trace = run_attack(&synthetic_scene(32, 6), &synthetic_scene(32, 7), &ens, &cfg).unwrap().trace;
    assert_eq!(trace.stages[0].selection.len(), 3);
    let s = &trace.stages[0].scores;
    assert!(s.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn stage_records_follow_the_schedule() {
    let ens = small_ensemble();
    let cfg = AttackConfig { iterations: 9, stages: 3, ..AttackConfig::default() };
    let trace = run_attack(&synthetic_scene(32, 8), &synthetic_scene(32, 9), &ens, &cfg).unwrap().trace;
    let firsts: Vec<(usize, usize, usize)> = trace.stages.iter().map(|s| (s.m, s.resolution, s.first_iteration)).collect();
    assert_eq!(firsts, vec![(1, 8, 1), (2, 16, 4), (3, 32, 7)]);
    assert_eq!(trace.iterations.iter().map(|r| r.m).collect::<Vec<_>>(), vec![1, 1, 1, 2, 2, 2, 3, 3, 3]);
}

#[test]
fn smooth_resampling_variants_run() {
    let ens = small_ensemble();
    for (down, up) in [(Interpolation::Bilinear, Interpolation::Bicubic), (Interpolation::Bicubic, Interpolation::Nearest)] {
        let cfg = AttackConfig { iterations: 3, downsample: down, upsample: up, ..AttackConfig::default() };
        let out = run_attack(&synthetic_scene(32, 1), &synthetic_scene(32, 2), &ens, &cfg).unwrap();
        assert!(out.adversarial.is_within_unit_range());
    }
}

#[test]
fn input_errors() {
    let ens = small_ensemble();
    let x = synthetic_scene(32, 1);
    assert!(run_attack(&x, &synthetic_scene(16, 1), &ens, &short(1)).is_err());
    assert!(run_attack(&synthetic_scene(16, 1), &synthetic_scene(16, 2), &ens, &short(1)).is_err());
    let mut bad = x.clone();
    bad.data_mut()[0] = 1.5;
    assert!(matches!(run_attack(&bad, &x, &ens, &short(1)), Err(Error::Contract(_))));
    assert!(matches!(run_attack(&x, &x, &ens, &AttackConfig { gamma: 0.0, ..short(1) }), Err(Error::Config(_))));
    let tiny_gamma = AttackConfig { gamma: 0.01, ..short(1) };
    assert!(matches!(run_attack(&x, &synthetic_scene(32, 2), &ens, &tiny_gamma), Err(Error::Attack { iteration: 1, .. })));
    let _ = Image::filled(1, 1, 0.0);
}

#[test]
fn desk_config_file_matches_defaults() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml");
    let cfg = RunConfig::load(path, &[]).unwrap();
    assert_eq!(cfg.attack_config(), AttackConfig::default());
    assert_eq!(cfg.encoder_configs(), Ensemble::desk_default_configs(64));
}
