//! Loss terms and the two adaptive mechanisms that shape them.
//!
//! * Global loss: `1 − mean_n cos(final CLS of x_adv, final CLS of reference)`.
//! * Layer selection: every intermediate layer `(n, l)` gets a consistency
//!   score, the cosine between the gradient of the global loss and the
//!   gradient of a pooled-patch proxy loss for that layer, both taken at the
//!   clean image against the original target. Layers at fixed rank positions
//!   of the descending score order form the selection set.
//! * Patch filtering: per selected layer only the `⌊γ·P⌋` patches most
//!   similar to the target contribute to the patch loss.
//! * Intermediate loss: `Σ_{(n,l) ∈ Ω} λ_cls·L_cls + λ_patch·L_patch`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::surrogate::{Ensemble, LayerFeatures, LayerRef, LayerTaps};
use crate::tensor::{self, Tape, Tensor, Var};

/// Weights of the intermediate CLS and patch terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_patch: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_cls: 0.5, lambda_patch: 1.5 }
    }
}

impl LossWeights {
    pub fn new(lambda_cls: f64, lambda_patch: f64) -> Result<Self> {
        let w = LossWeights { lambda_cls, lambda_patch };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_cls", self.lambda_cls), ("lambda_patch", self.lambda_patch)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: LayerRef,
    pub score: f64,
}

/// Selected intermediate layers with their consistency scores, best first.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionSet {
    entries: Vec<LayerRef>,
    scores: Vec<f64>,
}

impl SelectionSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Selection with explicit entries; scores are set to NaN.
    pub fn from_layers(entries: Vec<LayerRef>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if entries[..i].contains(e) {
                return Err(Error::Config(format!("duplicate layer {e:?} in selection")));
            }
        }
        let scores = vec![f64::NAN; entries.len()];
        Ok(SelectionSet { entries, scores })
    }

    pub fn entries(&self) -> &[LayerRef] {
        &self.entries
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks every entry against the ensemble: encoder in range, layer in `1..L_n`.
    pub fn validate(&self, ensemble: &Ensemble) -> Result<()> {
        for e in &self.entries {
            let depth = ensemble.get(e.encoder)?.depth();
            if e.layer == 0 || e.layer >= depth {
                return Err(Error::Config(format!(
                    "layer {} of encoder {} is not an intermediate layer (depth {depth})",
                    e.layer, e.encoder
                )));
            }
        }
        Ok(())
    }
}

fn final_cls_similarity_sum<'t>(
    tape: &'t Tape,
    adv: &[LayerTaps<'t>],
    reference: &[LayerFeatures],
) -> Result<Var<'t>> {
    if adv.is_empty() || adv.len() != reference.len() {
        return Err(Error::Contract(format!(
            "global loss needs matching non-empty feature sets, got {} and {}",
            adv.len(),
            reference.len()
        )));
    }
    let mut total: Option<Var<'t>> = None;
    for (taps, feats) in adv.iter().zip(reference) {
        let cos = taps.final_layer().cls.cosine(tape.constant(feats.final_cls().clone()))?;
        total = Some(match total {
            Some(acc) => acc.add(cos)?,
            None => cos,
        });
    }
    Ok(total.expect("non-empty"))
}

/// `1 − (1/N) Σ_n cos(z_cls^(n,L)(x_adv), z_cls^(n,L)(x_ref))` from recorded taps.
pub fn global_loss_from_taps<'t>(
    tape: &'t Tape,
    adv: &[LayerTaps<'t>],
    reference: &[LayerFeatures],
) -> Result<Var<'t>> {
    let sum = final_cls_similarity_sum(tape, adv, reference)?;
    Ok(sum.scale(1.0 / adv.len() as f64).one_minus())
}

/// Global loss of a differentiable adversarial input against a fixed reference image.
pub fn global_loss<'t>(tape: &'t Tape, ensemble: &Ensemble, x_adv: Var<'t>, x_ref: &Image) -> Result<Var<'t>> {
    let adv = ensemble.encode_all_with_taps(tape, x_adv)?;
    let reference = ensemble.encode_all(x_ref)?;
    global_loss_from_taps(tape, &adv, &reference)
}

fn proxy_loss<'t>(tape: &'t Tape, taps: &LayerTaps<'t>, target: &LayerFeatures, layer: usize) -> Result<Var<'t>> {
    let pooled = taps.layer(layer)?.patches.mean_axis(0)?;
    let target_pooled = tape.constant(target.mean_patch(layer)?);
    Ok(pooled.cosine(target_pooled)?.one_minus())
}

fn flat_grad(tape: &Tape, root: Var<'_>, leaf: Var<'_>) -> Result<Vec<f64>> {
    Ok(tape.backward(root)?.wrt(leaf)?.into_data())
}

/// Gradient of the global loss against the original target, taken at the clean image.
pub fn global_selection_gradient(ensemble: &Ensemble, x_cle: &Image, x_tgt: &Image) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let x = tape.leaf(x_cle.to_tensor());
    let loss = global_loss(&tape, ensemble, x, x_tgt)?;
    flat_grad(&tape, loss, x)
}

/// Gradient of `1 − cos(mean patch token of x, mean patch token of x_tgt)` at
/// layer `layer`, taken at the clean image.
pub fn local_gradient_proxy(ensemble: &Ensemble, layer: LayerRef, x_cle: &Image, x_tgt: &Image) -> Result<Vec<f64>> {
    let encoder = ensemble.get(layer.encoder)?;
    let tape = Tape::new();
    let x = tape.leaf(x_cle.to_tensor());
    let taps = encoder.encode_with_taps(&tape, x)?;
    let target = encoder.encode(x_tgt)?;
    let loss = proxy_loss(&tape, &taps, &target, layer.layer)?;
    flat_grad(&tape, loss, x)
}

/// Directional agreement `⟨a, b⟩ / (‖a‖‖b‖)` of two gradients.
pub fn gradient_consistency(global: &[f64], local: &[f64]) -> Result<f64> {
    tensor::cosine(global, local)
}

/// Consistency score of every candidate layer, from one shared forward pass
/// and one backward pass per root.
pub fn consistency_scores(ensemble: &Ensemble, x_cle: &Image, x_tgt: &Image) -> Result<Vec<LayerScore>> {
    let tape = Tape::new();
    let x = tape.leaf(x_cle.to_tensor());
    let adv = ensemble.encode_all_with_taps(&tape, x)?;
    let target = ensemble.encode_all(x_tgt)?;
    let global = global_loss_from_taps(&tape, &adv, &target)?;
    let g_global = flat_grad(&tape, global, x)?;

    ensemble
        .candidate_layers()
        .into_iter()
        .map(|layer| {
            let loss = proxy_loss(&tape, &adv[layer.encoder], &target[layer.encoder], layer.layer)?;
            let g_local = flat_grad(&tape, loss, x)?;
            Ok(LayerScore { layer, score: gradient_consistency(&g_global, &g_local)? })
        })
        .collect()
}

/// Scores sorted descending; ties go to the lexicographically smaller `(n, l)`.
pub fn rank_layers(scores: &[LayerScore]) -> Vec<LayerScore> {
    let mut pool = scores.to_vec();
    pool.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.layer.cmp(&b.layer)));
    pool
}

/// Picks the layers at 1-based `ranks` of the descending score order.
pub fn select_layers(scores: &[LayerScore], ranks: &[usize]) -> Result<SelectionSet> {
    let pool = rank_layers(scores);
    let mut ranks = ranks.to_vec();
    ranks.sort_unstable();
    if ranks.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config(format!("duplicate ranks in {ranks:?}")));
    }
    let mut selection = SelectionSet::default();
    for r in ranks {
        if r == 0 || r > pool.len() {
            return Err(Error::Config(format!(
                "rank {r} outside candidate pool of {} layers",
                pool.len()
            )));
        }
        selection.entries.push(pool[r - 1].layer);
        selection.scores.push(pool[r - 1].score);
    }
    Ok(selection)
}

/// Clamps ranks larger than the pool to the pool size and removes the
/// resulting duplicates.
pub fn clamp_ranks(ranks: &[usize], pool: usize) -> Vec<usize> {
    let mut out: Vec<usize> = ranks.iter().map(|&r| r.min(pool)).filter(|&r| r > 0).collect();
    out.sort_unstable();
    out.dedup();
    if ranks.iter().any(|&r| r > pool) {
        log::warn!("requested ranks {ranks:?} exceed the {pool}-layer candidate pool; using {out:?}");
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchSelection {
    /// Keep the most target-similar patches.
    #[default]
    TopK,
    /// Keep the least similar patches (ablation control).
    BottomK,
}

/// Binary keep/drop mask over the patch tokens of one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchMask {
    bits: Vec<bool>,
    kept: usize,
}

impl PatchMask {
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn kept(&self) -> usize {
        self.kept
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect()
    }

    fn as_tensor(&self) -> Tensor {
        Tensor::vector(self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    Ok(())
}

/// `K = ⌊γ·P⌋`. A 1e-9 guard absorbs products such as `0.57·100` that land
/// just below an integer in floating point.
pub fn kept_count(gamma: f64, patches: usize) -> Result<usize> {
    check_gamma(gamma)?;
    Ok(((gamma * patches as f64) + 1e-9).floor() as usize)
}

/// Top-`⌊γ·P⌋` mask over similarities `s`; ties keep the lower patch index.
pub fn build_mask(s: &[f64], gamma: f64) -> Result<PatchMask> {
    build_mask_with(s, gamma, PatchSelection::TopK)
}

pub fn build_mask_with(s: &[f64], gamma: f64, selection: PatchSelection) -> Result<PatchMask> {
    let k = kept_count(gamma, s.len())?;
    if k == 0 {
        return Err(Error::Config(format!(
            "gamma {gamma} keeps no patch out of {}",
            s.len()
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("patch similarities must be finite".into()));
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    // Stable sort keeps lower indices first among equal scores.
    match selection {
        PatchSelection::TopK => order.sort_by(|&a, &b| s[b].total_cmp(&s[a])),
        PatchSelection::BottomK => order.sort_by(|&a, &b| s[a].total_cmp(&s[b])),
    }
    let mut bits = vec![false; s.len()];
    for &i in &order[..k] {
        bits[i] = true;
    }
    Ok(PatchMask { bits, kept: k })
}

/// Per-patch cosine similarities `s_p`, shape `[P]`.
pub fn patch_similarities<'t>(tape: &'t Tape, adv_patches: Var<'t>, target_patches: &Tensor) -> Result<Var<'t>> {
    adv_patches.row_cosine(tape.constant(target_patches.clone()))
}

/// `1 − (1/K) Σ_p mask_p · s_p`; the mask is a constant.
pub fn patch_loss<'t>(tape: &'t Tape, s: Var<'t>, mask: &PatchMask) -> Result<Var<'t>> {
    if s.shape() != [mask.len()] {
        return Err(Error::dim("patch_loss", format!("similarities {:?} vs mask of {}", s.shape(), mask.len())));
    }
    if mask.kept == 0 {
        return Err(Error::Config("patch mask keeps no patch".into()));
    }
    let kept = s.mul(tape.constant(mask.as_tensor()))?.sum();
    Ok(kept.scale(1.0 / mask.kept as f64).one_minus())
}

/// `1 − cos(z_cls(x_adv), z_cls(x̃_tgt))` at one layer.
pub fn cls_loss<'t>(tape: &'t Tape, adv_cls: Var<'t>, target_cls: &Tensor) -> Result<Var<'t>> {
    Ok(adv_cls.cosine(tape.constant(target_cls.clone()))?.one_minus())
}

/// How patch masks are obtained inside [`intermediate_loss`].
#[derive(Clone, Copy, Debug)]
pub enum MaskPolicy<'a> {
    /// Rebuild from the current similarities.
    Recompute { gamma: f64, selection: PatchSelection },
    /// Use the given masks, one per selected layer in selection order.
    Fixed(&'a [PatchMask]),
}

pub struct IntermediateLoss<'t> {
    pub value: Var<'t>,
    /// Mask used for each selected layer (empty when `λ_patch = 0`).
    pub masks: Vec<PatchMask>,
}

/// Sum over the selection of `λ_cls·L_cls + λ_patch·L_patch`.
///
/// Terms with a zero weight are left out of the graph entirely.
pub fn intermediate_loss<'t>(
    tape: &'t Tape,
    selection: &SelectionSet,
    weights: LossWeights,
    adv: &[LayerTaps<'t>],
    target: &[LayerFeatures],
    masks: MaskPolicy<'_>,
) -> Result<IntermediateLoss<'t>> {
    weights.validate()?;
    if let MaskPolicy::Fixed(m) = masks {
        if weights.lambda_patch != 0.0 && m.len() != selection.len() {
            return Err(Error::Contract(format!(
                "{} fixed masks for {} selected layers",
                m.len(),
                selection.len()
            )));
        }
    }
    let mut total = tape.scalar(0.0);
    let mut used = Vec::new();
    for (i, entry) in selection.entries().iter().enumerate() {
        let taps = adv
            .get(entry.encoder)
            .ok_or_else(|| Error::Contract(format!("no taps for encoder {}", entry.encoder)))?;
        let feats = &target[entry.encoder];
        let tap = taps.layer(entry.layer)?;

        if weights.lambda_cls != 0.0 {
            let l_cls = cls_loss(tape, tap.cls, feats.cls(entry.layer)?)?;
            total = total.add(l_cls.scale(weights.lambda_cls))?;
        }
        if weights.lambda_patch != 0.0 {
            let s = patch_similarities(tape, tap.patches, feats.patches(entry.layer)?)?;
            let mask = match masks {
                MaskPolicy::Recompute { gamma, selection } => build_mask_with(s.value().data(), gamma, selection)?,
                MaskPolicy::Fixed(m) => m[i].clone(),
            };
            let l_patch = patch_loss(tape, s, &mask)?;
            total = total.add(l_patch.scale(weights.lambda_patch))?;
            used.push(mask);
        }
    }
    Ok(IntermediateLoss { value: total, masks: used })
}

pub struct LossBreakdown<'t> {
    pub global: Var<'t>,
    pub inter: Var<'t>,
    pub total: Var<'t>,
    pub masks: Vec<PatchMask>,
}

/// `L_total = L_global + L_inter` against stage target features.
pub fn total_loss<'t>(
    tape: &'t Tape,
    adv: &[LayerTaps<'t>],
    stage_target: &[LayerFeatures],
    selection: &SelectionSet,
    weights: LossWeights,
    masks: MaskPolicy<'_>,
) -> Result<LossBreakdown<'t>> {
    let global = global_loss_from_taps(tape, adv, stage_target)?;
    if selection.is_empty() {
        let inter = tape.scalar(0.0);
        return Ok(LossBreakdown { global, inter, total: global, masks: Vec::new() });
    }
    let inter = intermediate_loss(tape, selection, weights, adv, stage_target, masks)?;
    let total = global.add(inter.value)?;
    Ok(LossBreakdown { global, inter: inter.value, total, masks: inter.masks })
}
