//! The staged sign-gradient attack loop.
//!
//! For `t = 1..=T` the driver finds the current stage; on entering a new
//! stage it synthesizes the stage target and re-runs layer selection at the
//! clean image. Each iteration then evaluates `L_total` at the current
//! adversarial image (optionally through a random crop), takes one signed
//! step on the perturbation, and projects back onto the `ε`-ball and the
//! valid pixel range.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    clamp_ranks, consistency_scores, select_layers, total_loss, LossWeights, MaskPolicy, PatchSelection,
    SelectionSet,
};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::resolution::{nearest_index, synthesize_stage_target_with, Interpolation, StageSchedule};
use crate::surrogate::{Ensemble, LayerRef};
use crate::tensor::Tape;

/// Direction of the signed update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// `δ ← δ − η·sign(∇L_total)`: decreases the loss.
    #[default]
    Descent,
    /// `δ ← δ + η·sign(∇L_total)`, the update exactly as the algorithm listing prints it.
    LiteralAscent,
}

impl UpdateRule {
    fn direction(self) -> f64 {
        match self {
            UpdateRule::Descent => -1.0,
            UpdateRule::LiteralAscent => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// `ℓ∞` budget.
    pub epsilon: f64,
    /// Step size.
    pub eta: f64,
    pub iterations: usize,
    pub stages: usize,
    /// Stage resolutions; `None` means `{H/2^(M−1), …, H}`.
    pub resolutions: Option<Vec<usize>>,
    /// 1-based rank positions picked from the layer consistency ordering.
    pub ranks: Vec<usize>,
    /// Fraction of patches kept by the patch mask.
    pub gamma: f64,
    #[serde(flatten)]
    pub weights: LossWeights,
    pub crop_enabled: bool,
    pub crop_scale_range: (f64, f64),
    pub seed: u64,
    pub update: UpdateRule,
    pub patch_selection: PatchSelection,
    /// When false the selection set is always empty.
    pub layer_selection: bool,
    pub downsample: Interpolation,
    pub upsample: Interpolation,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 16.0 / 255.0,
            eta: 1.0 / 255.0,
            iterations: 300,
            stages: 3,
            resolutions: None,
            ranks: vec![1, 3, 5],
            gamma: 0.6,
            weights: LossWeights::default(),
            crop_enabled: true,
            crop_scale_range: (0.5, 1.0),
            seed: 0,
            update: UpdateRule::Descent,
            patch_selection: PatchSelection::TopK,
            layer_selection: true,
            downsample: Interpolation::Nearest,
            upsample: Interpolation::Nearest,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return fail(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if !(self.eta > 0.0 && self.eta <= self.epsilon) {
            return fail(format!("eta must lie in (0, epsilon], got {}", self.eta));
        }
        if self.stages == 0 || self.iterations < self.stages {
            return fail(format!(
                "need iterations >= stages >= 1, got {} and {}",
                self.iterations, self.stages
            ));
        }
        if let Some(r) = &self.resolutions {
            if r.len() != self.stages {
                return fail(format!("{} resolutions for {} stages", r.len(), self.stages));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        self.weights.validate()?;
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return fail(format!("crop_scale_range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"));
        }
        if self.layer_selection && (self.ranks.is_empty() || self.ranks.contains(&0)) {
            return fail(format!("ranks must be non-empty 1-based positions, got {:?}", self.ranks));
        }
        Ok(())
    }

    pub fn schedule(&self, image_size: usize) -> Result<StageSchedule> {
        let res = match &self.resolutions {
            Some(r) => r.clone(),
            None => StageSchedule::halving_resolutions(image_size, self.stages)?,
        };
        StageSchedule::new(self.iterations, res, image_size)
    }
}

/// One signed step followed by the two projections.
///
/// `δ' = clip_[−ε,ε](δ ± η·sign(g))`, then wherever `x_cle + δ'` leaves
/// `[0, 1]` the perturbation is re-derived from the clipped pixel. The
/// returned `δ'` satisfies both constraints exactly.
pub fn pgd_step(
    delta: &[f64],
    grad: &[f64],
    eta: f64,
    epsilon: f64,
    x_cle: &[f64],
    rule: UpdateRule,
) -> Result<Vec<f64>> {
    if delta.len() != grad.len() || delta.len() != x_cle.len() {
        return Err(Error::dim(
            "pgd_step",
            format!("delta {}, grad {}, image {}", delta.len(), grad.len(), x_cle.len()),
        ));
    }
    let dir = rule.direction();
    Ok(delta
        .iter()
        .zip(grad)
        .zip(x_cle)
        .map(|((&d, &g), &c)| {
            let step = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            let d = (d + dir * eta * step).clamp(-epsilon, epsilon);
            let x = c + d;
            if x < 0.0 {
                -c
            } else if x > 1.0 {
                1.0 - c
            } else {
                d
            }
        })
        .collect())
}

/// Square crop of side `side` with its top-left corner at `(top, left)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

impl CropWindow {
    /// Scale drawn uniformly from `scale_range`, side `round(scale·H)`,
    /// corner uniform over valid positions.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, size: usize, scale_range: (f64, f64)) -> Self {
        let (lo, hi) = scale_range;
        let scale = if lo < hi { rng.random_range(lo..=hi) } else { lo };
        let side = ((scale * size as f64).round() as usize).clamp(1, size);
        let top = rng.random_range(0..=size - side);
        let left = rng.random_range(0..=size - side);
        CropWindow { top, left, side }
    }

    /// Flat HWC source index of every output element after nearest-resizing
    /// the crop back to `size × size`.
    pub fn gather_indices(&self, size: usize) -> Vec<usize> {
        let map: Vec<usize> = (0..size).map(|i| nearest_index(i, self.side, size)).collect();
        let mut idx = Vec::with_capacity(size * size * CHANNELS);
        for &sy in &map {
            for &sx in &map {
                let base = ((self.top + sy) * size + self.left + sx) * CHANNELS;
                idx.extend(base..base + CHANNELS);
            }
        }
        idx
    }
}

/// Random square crop, nearest-resized back to the input size.
pub fn random_crop_resize<R: Rng + ?Sized>(image: &Image, rng: &mut R, scale_range: (f64, f64)) -> Result<Image> {
    let size = image.square_size()?;
    let window = CropWindow::sample(rng, size, scale_range);
    let src = image.data();
    let data = window.gather_indices(size).into_iter().map(|i| src[i]).collect();
    Image::new(size, size, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub m: usize,
    #[serde(rename = "L_global")]
    pub l_global: f64,
    #[serde(rename = "L_inter")]
    pub l_inter: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    /// `‖δ‖∞` after this iteration's update.
    pub delta_inf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub m: usize,
    pub resolution: usize,
    pub first_iteration: usize,
    pub selection: Vec<LayerRef>,
    pub scores: Vec<f64>,
    pub crop_enabled: bool,
    pub crop_scale_range: (f64, f64),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    pub iterations: Vec<IterationRecord>,
    pub stages: Vec<StageRecord>,
}

impl AttackTrace {
    /// One JSON object per iteration, newline-terminated.
    pub fn write_iterations<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for rec in &self.iterations {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_stages<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for rec in &self.stages {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub adversarial: Image,
    pub trace: AttackTrace,
}

/// Mutable state of a running attack.
struct AttackState {
    delta: Vec<f64>,
    x_adv: Image,
    stage: usize,
    selection: SelectionSet,
    stage_target: Vec<crate::surrogate::LayerFeatures>,
    rng: ChaCha8Rng,
}

/// Runs the full staged attack. Deterministic for a fixed configuration.
pub fn run_attack(x_cle: &Image, x_tgt: &Image, ensemble: &Ensemble, config: &AttackConfig) -> Result<AttackOutcome> {
    run_attack_observed(x_cle, x_tgt, ensemble, config, |_, _| {})
}

/// [`run_attack`] that hands every iteration's record and `x_adv` to `observe`.
pub fn run_attack_observed(
    x_cle: &Image,
    x_tgt: &Image,
    ensemble: &Ensemble,
    config: &AttackConfig,
    mut observe: impl FnMut(&IterationRecord, &Image),
) -> Result<AttackOutcome> {
    config.validate()?;
    let size = x_cle.square_size()?;
    if !x_cle.same_shape(x_tgt) {
        return Err(Error::dim(
            "run_attack",
            format!("clean {}x{} vs target {}x{}", x_cle.height(), x_cle.width(), x_tgt.height(), x_tgt.width()),
        ));
    }
    if size != ensemble.image_size() {
        return Err(Error::dim(
            "run_attack",
            format!("images are {size}px, ensemble expects {}px", ensemble.image_size()),
        ));
    }
    if !x_cle.is_within_unit_range() {
        return Err(Error::Contract("clean image has values outside [0, 1]".into()));
    }
    let schedule = config.schedule(size)?;

    let mut state = AttackState {
        delta: vec![0.0; x_cle.data().len()],
        x_adv: x_cle.clone(),
        stage: 0,
        selection: SelectionSet::empty(),
        stage_target: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let mut trace = AttackTrace::default();
    let shape = vec![size, size, CHANNELS];
    // Selection depends only on the clean image and the original target.
    let mut selection: Option<SelectionSet> = None;

    for t in 1..=schedule.iterations() {
        let m = schedule.stage_index(t)?;
        let wrap = |e: Error| Error::Attack { iteration: t, stage: m, source: Box::new(e) };

        if m != state.stage {
            state.stage = m;
            let resolution = schedule.resolution(m)?;
            let target = synthesize_stage_target_with(x_tgt, resolution, size, config.downsample, config.upsample)
                .map_err(wrap)?;
            state.stage_target = ensemble.encode_all(&target).map_err(wrap)?;
            state.selection = match (&selection, config.layer_selection) {
                (_, false) => SelectionSet::empty(),
                (Some(s), true) => s.clone(),
                (None, true) => {
                    let s = select_stage_layers(ensemble, x_cle, x_tgt, &config.ranks).map_err(wrap)?;
                    selection = Some(s.clone());
                    s
                }
            };
            trace.stages.push(StageRecord {
                m,
                resolution,
                first_iteration: t,
                selection: state.selection.entries().to_vec(),
                scores: state.selection.scores().to_vec(),
                crop_enabled: config.crop_enabled,
                crop_scale_range: config.crop_scale_range,
            });
        }

        let tape = Tape::new();
        let adv = tape.leaf(state.x_adv.to_tensor());
        let mut step = || -> Result<_> {
            let input = if config.crop_enabled {
                let window = CropWindow::sample(&mut state.rng, size, config.crop_scale_range);
                adv.gather(Arc::from(window.gather_indices(size)), shape.clone())?
            } else {
                adv
            };
            let taps = ensemble.encode_all_with_taps(&tape, input)?;
            let losses = total_loss(
                &tape,
                &taps,
                &state.stage_target,
                &state.selection,
                config.weights,
                MaskPolicy::Recompute { gamma: config.gamma, selection: config.patch_selection },
            )?;
            let grad = tape.backward(losses.total)?.wrt(adv)?;
            let record = (losses.global.item()?, losses.inter.item()?, losses.total.item()?);
            Ok((grad, record))
        };
        let (grad, (l_global, l_inter, l_total)) = step().map_err(wrap)?;

        state.delta = pgd_step(&state.delta, grad.data(), config.eta, config.epsilon, x_cle.data(), config.update)
            .map_err(wrap)?;
        for ((x, &c), &d) in state.x_adv.data_mut().iter_mut().zip(x_cle.data()).zip(&state.delta) {
            *x = c + d;
        }
        let delta_inf = state.delta.iter().fold(0.0_f64, |a, d| a.max(d.abs()));
        if delta_inf > config.epsilon || !state.x_adv.is_within_unit_range() {
            return Err(wrap(Error::Contract(format!(
                "projection invariant broken: ‖δ‖∞ = {delta_inf}"
            ))));
        }
        let record = IterationRecord { t, m, l_global, l_inter, l_total, delta_inf };
        observe(&record, &state.x_adv);
        trace.iterations.push(record);
    }

    Ok(AttackOutcome { adversarial: state.x_adv, trace })
}

/// Layer selection at the clean image against the original target. Ranks
/// beyond the candidate pool are clamped to it. A zero gradient (for example
/// when `x_cle == x_tgt`) leaves nothing to rank and yields an empty selection.
pub fn select_stage_layers(ensemble: &Ensemble, x_cle: &Image, x_tgt: &Image, ranks: &[usize]) -> Result<SelectionSet> {
    let scores = match consistency_scores(ensemble, x_cle, x_tgt) {
        Err(Error::DegenerateVector { norm }) => {
            log::warn!("layer selection skipped: degenerate gradient (norm {norm:e})");
            return Ok(SelectionSet::empty());
        }
        other => other?,
    };
    if scores.is_empty() {
        return Ok(SelectionSet::empty());
    }
    select_layers(&scores, &clamp_ranks(ranks, scores.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f64 = 16.0 / 255.0;
    const ETA: f64 = 1.0 / 255.0;

    #[test]
    fn config_defaults_and_validation() {
        let c = AttackConfig::default();
        c.validate().unwrap();
        assert_eq!(c.schedule(64).unwrap().resolutions(), &[16, 32, 64]);
        assert_eq!(c.schedule(224).unwrap().resolutions(), &[56, 112, 224]);

        let bad = |f: fn(&mut AttackConfig)| {
            let mut c = AttackConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.eta = 0.5));
        assert!(bad(|c| c.epsilon = 1.0));
        assert!(bad(|c| c.gamma = 0.0));
        assert!(bad(|c| c.iterations = 2));
        assert!(bad(|c| c.crop_scale_range = (0.0, 1.0)));
        assert!(bad(|c| c.crop_scale_range = (0.8, 0.5)));
        assert!(bad(|c| c.resolutions = Some(vec![32, 64])));
        assert!(bad(|c| c.ranks = vec![0, 1]));
    }

    #[test]
    fn pgd_zero_gradient_keeps_delta() {
        let delta = vec![0.01, -0.02, 0.0];
        let out = pgd_step(&delta, &[0.0; 3], ETA, EPS, &[0.5; 3], UpdateRule::Descent).unwrap();
        assert_eq!(out, delta);
    }

    #[test]
    fn pgd_saturates_after_ceil_eps_over_eta_steps() {
        let steps = (EPS / ETA).ceil() as usize;
        assert_eq!(steps, 16);
        let mut delta = vec![0.0];
        for i in 1..=steps + 3 {
            delta = pgd_step(&delta, &[1.0], ETA, EPS, &[0.5], UpdateRule::LiteralAscent).unwrap();
            if i < steps {
                assert!(delta[0] < EPS);
            }
        }
        assert!((delta[0] - EPS).abs() < 1e-15);
        let mut down = vec![0.0];
        for _ in 0..20 {
            down = pgd_step(&down, &[1.0], ETA, EPS, &[0.5], UpdateRule::Descent).unwrap();
        }
        assert!((down[0] + EPS).abs() < 1e-15);
    }

    #[test]
    fn pgd_respects_pixel_range() {
        let clean = [0.0, 1.0, 0.02, 0.99];
        let mut delta = vec![0.0; 4];
        for _ in 0..30 {
            delta = pgd_step(&delta, &[1.0, -1.0, 1.0, -1.0], ETA, EPS, &clean, UpdateRule::Descent).unwrap();
            for (d, c) in delta.iter().zip(&clean) {
                assert!(d.abs() <= EPS);
                assert!((0.0..=1.0).contains(&(c + d)));
            }
        }
        assert_eq!(delta[0], 0.0);
        assert_eq!(delta[1], 0.0);
        assert_eq!(delta[2], -0.02);
    }

    #[test]
    fn pgd_shape_mismatch() {
        assert!(pgd_step(&[0.0; 2], &[0.0; 3], ETA, EPS, &[0.0; 2], UpdateRule::Descent).is_err());
    }

    #[test]
    fn crop_full_scale_is_identity() {
        let img = crate::image::synthetic_scene(16, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(random_crop_resize(&img, &mut rng, (1.0, 1.0)).unwrap(), img);
    }

    #[test]
    fn crop_is_seeded_and_in_range() {
        let img = crate::image::synthetic_scene(16, 1);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5)
                .map(|_| random_crop_resize(&img, &mut rng, (0.3, 0.9)).unwrap())
                .collect::<Vec<_>>()
        };
        let a = run(7);
        assert_eq!(a, run(7));
        for out in &a {
            assert_eq!((out.height(), out.width()), (16, 16));
            assert!(out.is_within_unit_range());
        }
    }

    #[test]
    fn crop_window_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let w = CropWindow::sample(&mut rng, 20, (0.05, 1.0));
            assert!(w.side >= 1 && w.top + w.side <= 20 && w.left + w.side <= 20);
            assert!(w.gather_indices(20).iter().all(|&i| i < 20 * 20 * 3));
        }
    }
}
