//! Toy Vision-Transformer surrogate encoders.
//!
//! Each encoder is a small pre-norm ViT: non-overlapping `p×p×3` patches are
//! linearly embedded, a CLS token is prepended, learned positional
//! embeddings are added, and `L` blocks of multi-head self-attention and a
//! two-layer GELU MLP follow. The forward pass exposes the CLS token and the
//! patch tokens after every block so that losses can be attached to any
//! intermediate layer and differentiated back to the input pixels.
//!
//! Weights are random (seeded) and immutable after construction. The attack
//! only needs differentiable CLS/patch features, not a trained model.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::tensor::{Tape, Tensor, Var};

const PARAM_MAGIC: &[u8; 4] = b"PRAF";
const PARAM_VERSION: u32 = 1;

fn default_mlp_ratio() -> usize {
    2
}

fn default_init_std() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    /// Hidden width of the block MLP as a multiple of `embed_dim`.
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(image_size: usize, patch_size: usize, depth: usize, embed_dim: usize, num_heads: usize, seed: u64) -> Self {
        EncoderConfig {
            image_size,
            patch_size,
            depth,
            embed_dim,
            num_heads,
            mlp_ratio: default_mlp_ratio(),
            init_std: default_init_std(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.image_size == 0 || self.patch_size == 0 {
            return fail("image_size and patch_size must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return fail(format!(
                "patch_size {} does not divide image_size {}",
                self.patch_size, self.image_size
            ));
        }
        if self.depth < 2 {
            return fail(format!("depth must be at least 2, got {}", self.depth));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "num_heads {} must divide embed_dim {}",
                self.num_heads, self.embed_dim
            ));
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be positive".into());
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return fail(format!("init_std must be positive, got {}", self.init_std));
        }
        Ok(())
    }

    /// Number of patch tokens, `(H/p)²`.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

/// Identifies layer `layer` (1-based, `1..=depth`) of ensemble member `encoder` (0-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerRef {
    pub encoder: usize,
    pub layer: usize,
}

impl LayerRef {
    pub fn new(encoder: usize, layer: usize) -> Self {
        LayerRef { encoder, layer }
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1_gain: Tensor,
    ln1_bias: Tensor,
    qkv_weight: Tensor,
    qkv_bias: Tensor,
    proj_weight: Tensor,
    proj_bias: Tensor,
    ln2_gain: Tensor,
    ln2_bias: Tensor,
    fc1_weight: Tensor,
    fc1_bias: Tensor,
    fc2_weight: Tensor,
    fc2_bias: Tensor,
}

impl Block {
    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.qkv_weight,
            &self.qkv_bias,
            &self.proj_weight,
            &self.proj_bias,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.fc1_weight,
            &self.fc1_bias,
            &self.fc2_weight,
            &self.fc2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.qkv_weight,
            &mut self.qkv_bias,
            &mut self.proj_weight,
            &mut self.proj_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.fc1_weight,
            &mut self.fc1_bias,
            &mut self.fc2_weight,
            &mut self.fc2_bias,
        ]
    }
}

/// Per-layer taps of one forward pass, recorded on a tape.
#[derive(Debug, Clone)]
pub struct LayerTap<'t> {
    /// CLS token, shape `[d]`.
    pub cls: Var<'t>,
    /// Patch tokens, shape `[P, d]`.
    pub patches: Var<'t>,
}

#[derive(Debug, Clone)]
pub struct LayerTaps<'t> {
    layers: Vec<LayerTap<'t>>,
}

impl<'t> LayerTaps<'t> {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Taps after block `layer` (1-based).
    pub fn layer(&self, layer: usize) -> Result<&LayerTap<'t>> {
        layer
            .checked_sub(1)
            .and_then(|i| self.layers.get(i))
            .ok_or_else(|| Error::Contract(format!("layer {layer} outside 1..={}", self.layers.len())))
    }

    pub fn final_layer(&self) -> &LayerTap<'t> {
        self.layers.last().expect("encoders have at least two layers")
    }

    pub fn iter(&self) -> impl Iterator<Item = &LayerTap<'t>> {
        self.layers.iter()
    }

    /// Detached copy of every tap value.
    pub fn snapshot(&self) -> LayerFeatures {
        LayerFeatures {
            cls: self.layers.iter().map(|t| t.cls.to_tensor()).collect(),
            patches: self.layers.iter().map(|t| t.patches.to_tensor()).collect(),
        }
    }
}

/// Plain-value counterpart of [`LayerTaps`], used for fixed target features.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatures {
    pub cls: Vec<Tensor>,
    pub patches: Vec<Tensor>,
}

impl LayerFeatures {
    pub fn depth(&self) -> usize {
        self.cls.len()
    }

    pub fn cls(&self, layer: usize) -> Result<&Tensor> {
        self.index(layer).map(|i| &self.cls[i])
    }

    pub fn patches(&self, layer: usize) -> Result<&Tensor> {
        self.index(layer).map(|i| &self.patches[i])
    }

    pub fn final_cls(&self) -> &Tensor {
        self.cls.last().expect("encoders have at least two layers")
    }

    /// Spatial mean of the patch tokens at `layer`.
    pub fn mean_patch(&self, layer: usize) -> Result<Tensor> {
        self.patches(layer)?.mean_axis(0)
    }

    fn index(&self, layer: usize) -> Result<usize> {
        if layer == 0 || layer > self.cls.len() {
            return Err(Error::Contract(format!("layer {layer} outside 1..={}", self.cls.len())));
        }
        Ok(layer - 1)
    }
}

#[derive(Clone, Debug)]
pub struct SurrogateEncoder {
    config: EncoderConfig,
    patch_weight: Tensor,
    patch_bias: Tensor,
    cls_token: Tensor,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    patch_indices: Arc<[usize]>,
}

impl SurrogateEncoder {
    /// Builds an encoder with weights, biases, CLS token and positional
    /// embeddings drawn from `N(0, init_std²)`; layer-norm gains start at 1
    /// and layer-norm biases at 0.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = config.init_std;
        let d = config.embed_dim;
        let hidden = config.mlp_hidden();
        let mut randn = |shape: Vec<usize>| Tensor::randn(shape, std, &mut rng);

        let patch_weight = randn(vec![config.patch_dim(), d]);
        let patch_bias = randn(vec![d]);
        let cls_token = randn(vec![d]);
        let pos_embed = randn(vec![config.num_patches() + 1, d]);
        let blocks = (0..config.depth)
            .map(|_| Block {
                ln1_gain: Tensor::filled(vec![d], 1.0),
                ln1_bias: Tensor::zeros(vec![d]),
                qkv_weight: randn(vec![d, 3 * d]),
                qkv_bias: randn(vec![3 * d]),
                proj_weight: randn(vec![d, d]),
                proj_bias: randn(vec![d]),
                ln2_gain: Tensor::filled(vec![d], 1.0),
                ln2_bias: Tensor::zeros(vec![d]),
                fc1_weight: randn(vec![d, hidden]),
                fc1_bias: randn(vec![hidden]),
                fc2_weight: randn(vec![hidden, d]),
                fc2_bias: randn(vec![d]),
            })
            .collect();
        let patch_indices = patch_gather_indices(config.image_size, config.patch_size).into();
        Ok(SurrogateEncoder { config, patch_weight, patch_bias, cls_token, pos_embed, blocks, patch_indices })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn num_patches(&self) -> usize {
        self.config.num_patches()
    }

    /// All parameter tensors in a fixed order.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.patch_weight, &self.patch_bias, &self.cls_token, &self.pos_embed];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.patch_weight,
            &mut self.patch_bias,
            &mut self.cls_token,
            &mut self.pos_embed,
        ];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out
    }

    /// Patch-embedding projection without positional embeddings, `[P, d]`.
    pub fn embed_patches<'t>(&self, tape: &'t Tape, image: Var<'t>) -> Result<Var<'t>> {
        let h = self.config.image_size;
        let expected = [h, h, CHANNELS];
        if image.shape() != expected {
            return Err(Error::dim(
                "encode",
                format!("encoder expects {expected:?}, got {:?}", image.shape()),
            ));
        }
        let patches = image.gather(
            Arc::clone(&self.patch_indices),
            vec![self.num_patches(), self.config.patch_dim()],
        )?;
        patches
            .matmul(tape.constant(self.patch_weight.clone()))?
            .add_row(tape.constant(self.patch_bias.clone()))
    }

    /// Differentiable forward pass recording CLS and patch taps after every block.
    pub fn encode_with_taps<'t>(&self, tape: &'t Tape, image: Var<'t>) -> Result<LayerTaps<'t>> {
        let d = self.config.embed_dim;
        let p = self.num_patches();
        let c = |t: &Tensor| tape.constant(t.clone());

        let embedded = self.embed_patches(tape, image)?;
        let cls = c(&self.cls_token).reshape(vec![1, d])?;
        let mut x = tape.concat(&[cls, embedded], 0)?.add(c(&self.pos_embed))?;

        let mut layers = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = self.block_forward(tape, block, x)?;
            layers.push(LayerTap {
                cls: x.slice(0, 0, 1)?.reshape(vec![d])?,
                patches: x.slice(0, 1, p + 1)?,
            });
        }
        Ok(LayerTaps { layers })
    }

    fn block_forward<'t>(&self, tape: &'t Tape, b: &Block, x: Var<'t>) -> Result<Var<'t>> {
        let c = |t: &Tensor| tape.constant(t.clone());
        let d = self.config.embed_dim;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let h = x.layer_norm()?.mul_row(c(&b.ln1_gain))?.add_row(c(&b.ln1_bias))?;
        let qkv = h.matmul(c(&b.qkv_weight))?.add_row(c(&b.qkv_bias))?;
        let mut heads = Vec::with_capacity(self.config.num_heads);
        for head in 0..self.config.num_heads {
            let lo = head * dh;
            let q = qkv.slice(1, lo, lo + dh)?;
            let k = qkv.slice(1, d + lo, d + lo + dh)?;
            let v = qkv.slice(1, 2 * d + lo, 2 * d + lo + dh)?;
            let attn = q.matmul(k.transpose()?)?.scale(scale).softmax()?;
            heads.push(attn.matmul(v)?);
        }
        let attended = tape.concat(&heads, 1)?;
        let x = x.add(attended.matmul(c(&b.proj_weight))?.add_row(c(&b.proj_bias))?)?;

        let h = x.layer_norm()?.mul_row(c(&b.ln2_gain))?.add_row(c(&b.ln2_bias))?;
        let mlp = h
            .matmul(c(&b.fc1_weight))?
            .add_row(c(&b.fc1_bias))?
            .gelu()
            .matmul(c(&b.fc2_weight))?
            .add_row(c(&b.fc2_bias))?;
        x.add(mlp)
    }

    /// Non-differentiable encoding of a concrete image.
    pub fn encode(&self, image: &Image) -> Result<LayerFeatures> {
        let tape = Tape::new();
        let x = tape.constant(image.to_tensor());
        Ok(self.encode_with_taps(&tape, x)?.snapshot())
    }

    /// Writes all parameters in the flat little-endian dump format:
    /// magic `PRAF`, `u32` version, `u32` array count, then per array a `u32`
    /// rank, `u64` extents and `f64` values.
    pub fn write_parameters<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let params = self.parameters();
        w.write_all(PARAM_MAGIC)?;
        w.write_all(&PARAM_VERSION.to_le_bytes())?;
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        for t in params {
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &dim in t.shape() {
                w.write_all(&(dim as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a parameter dump produced by [`write_parameters`](Self::write_parameters)
    /// for an encoder with the given configuration.
    pub fn read_parameters<R: Read>(config: EncoderConfig, mut r: R) -> Result<Self> {
        let mut enc = SurrogateEncoder::new(config)?;
        let bad = |msg: String| Error::Config(format!("parameter dump: {msg}"));
        let mut buf4 = [0u8; 4];
        let mut buf8 = [0u8; 8];
        let read = |r: &mut R, buf: &mut [u8]| r.read_exact(buf).map_err(|e| bad(e.to_string()));

        read(&mut r, &mut buf4)?;
        if &buf4 != PARAM_MAGIC {
            return Err(bad("bad magic".into()));
        }
        read(&mut r, &mut buf4)?;
        let version = u32::from_le_bytes(buf4);
        if version != PARAM_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        read(&mut r, &mut buf4)?;
        let count = u32::from_le_bytes(buf4) as usize;
        let mut slots = enc.parameters_mut();
        if count != slots.len() {
            return Err(bad(format!("expected {} arrays, found {count}", slots.len())));
        }
        for (i, slot) in slots.iter_mut().enumerate() {
            read(&mut r, &mut buf4)?;
            let rank = u32::from_le_bytes(buf4) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                read(&mut r, &mut buf8)?;
                shape.push(u64::from_le_bytes(buf8) as usize);
            }
            if shape != slot.shape() {
                return Err(bad(format!("array {i}: shape {shape:?}, expected {:?}", slot.shape())));
            }
            for v in slot.data_mut() {
                read(&mut r, &mut buf8)?;
                *v = f64::from_le_bytes(buf8);
            }
        }
        Ok(enc)
    }
}

/// Flat HWC source index for every `(patch, in-patch offset)` pair.
fn patch_gather_indices(image_size: usize, patch: usize) -> Vec<usize> {
    let side = image_size / patch;
    let mut idx = Vec::with_capacity(image_size * image_size * CHANNELS);
    for py in 0..side {
        for px in 0..side {
            for dy in 0..patch {
                for dx in 0..patch {
                    let (y, x) = (py * patch + dy, px * patch + dx);
                    for ch in 0..CHANNELS {
                        idx.push((y * image_size + x) * CHANNELS + ch);
                    }
                }
            }
        }
    }
    idx
}

/// The surrogate ensemble `{f_1, …, f_N}`.
#[derive(Clone, Debug)]
pub struct Ensemble {
    encoders: Vec<SurrogateEncoder>,
}

impl Ensemble {
    pub fn new(encoders: Vec<SurrogateEncoder>) -> Result<Self> {
        let first = encoders
            .first()
            .ok_or_else(|| Error::Config("ensemble needs at least one encoder".into()))?;
        let size = first.config.image_size;
        if let Some(e) = encoders.iter().find(|e| e.config.image_size != size) {
            return Err(Error::Config(format!(
                "ensemble members disagree on image_size: {size} vs {}",
                e.config.image_size
            )));
        }
        Ok(Ensemble { encoders })
    }

    pub fn len(&self) -> usize {
        self.encoders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encoders.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.encoders[0].config.image_size
    }

    pub fn encoders(&self) -> &[SurrogateEncoder] {
        &self.encoders
    }

    pub fn get(&self, n: usize) -> Result<&SurrogateEncoder> {
        self.encoders
            .get(n)
            .ok_or_else(|| Error::Contract(format!("encoder {n} outside ensemble of {}", self.len())))
    }

    /// Intermediate layers `1..L_n-1` of every member, in `(n, l)` order.
    pub fn candidate_layers(&self) -> Vec<LayerRef> {
        self.encoders
            .iter()
            .enumerate()
            .flat_map(|(n, e)| (1..e.depth()).map(move |l| LayerRef::new(n, l)))
            .collect()
    }

    pub fn encode_all(&self, image: &Image) -> Result<Vec<LayerFeatures>> {
        self.encoders.iter().map(|e| e.encode(image)).collect()
    }

    pub fn encode_all_with_taps<'t>(&self, tape: &'t Tape, image: Var<'t>) -> Result<Vec<LayerTaps<'t>>> {
        self.encoders.iter().map(|e| e.encode_with_taps(tape, image)).collect()
    }

    /// Three-member desk ensemble used by the default configuration.
    pub fn desk_default_configs(image_size: usize) -> Vec<EncoderConfig> {
        vec![
            EncoderConfig::new(image_size, image_size / 8, 4, 64, 4, 1),
            EncoderConfig::new(image_size, image_size / 4, 4, 64, 4, 2),
            EncoderConfig::new(image_size, image_size / 8, 6, 64, 4, 3),
        ]
    }
}

/// Builds one encoder per configuration; all must share `image_size`.
pub fn build_ensemble(configs: &[EncoderConfig]) -> Result<Ensemble> {
    let encoders = configs
        .iter()
        .cloned()
        .map(SurrogateEncoder::new)
        .collect::<Result<Vec<_>>>()?;
    Ensemble::new(encoders)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::synthetic_scene;

    fn tiny(seed: u64) -> EncoderConfig {
        EncoderConfig::new(16, 4, 2, 8, 2, seed)
    }

    #[test]
    fn config_validation() {
        assert_eq!(EncoderConfig::new(32, 8, 2, 8, 2, 0).num_patches(), 16);
        assert!(EncoderConfig::new(30, 8, 2, 8, 2, 0).validate().is_err());
        assert!(EncoderConfig::new(32, 8, 1, 8, 2, 0).validate().is_err());
        assert!(EncoderConfig::new(32, 8, 2, 9, 2, 0).validate().is_err());
        assert!(SurrogateEncoder::new(EncoderConfig::new(30, 8, 2, 8, 2, 0)).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = SurrogateEncoder::new(tiny(5)).unwrap();
        let b = SurrogateEncoder::new(tiny(5)).unwrap();
        let c = SurrogateEncoder::new(tiny(6)).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        assert_ne!(a.parameters()[0], c.parameters()[0]);
    }

    #[test]
    fn tap_shapes() {
        let enc = SurrogateEncoder::new(tiny(1)).unwrap();
        let tape = Tape::new();
        let x = tape.leaf(synthetic_scene(16, 0).to_tensor());
        let taps = enc.encode_with_taps(&tape, x).unwrap();
        assert_eq!(taps.depth(), 2);
        for t in taps.iter() {
            assert_eq!(t.cls.shape(), vec![8]);
            assert_eq!(t.patches.shape(), vec![16, 8]);
        }
        assert!(taps.layer(0).is_err());
        assert!(taps.layer(3).is_err());
    }

    #[test]
    fn rejects_wrong_image_size() {
        let enc = SurrogateEncoder::new(tiny(1)).unwrap();
        let err = enc.encode(&synthetic_scene(20, 0)).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn ensemble_requires_matching_sizes() {
        assert!(build_ensemble(&[]).is_err());
        let err = build_ensemble(&[tiny(0), EncoderConfig::new(32, 8, 2, 8, 2, 0)]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let ens = build_ensemble(&[tiny(0), tiny(1), tiny(2)]).unwrap();
        assert_eq!(ens.len(), 3);
        assert_eq!(ens.candidate_layers().len(), 3);
    }

    #[test]
    fn parameter_dump_round_trip() {
        let enc = SurrogateEncoder::new(tiny(3)).unwrap();
        let mut buf = Vec::new();
        enc.write_parameters(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"PRAF");
        // Load into a config with a different seed: values must come from the dump.
        let loaded = SurrogateEncoder::read_parameters(tiny(99), buf.as_slice()).unwrap();
        assert_eq!(loaded.parameters(), enc.parameters());

        let mut corrupt = buf.clone();
        corrupt[0] = b'X';
        assert!(SurrogateEncoder::read_parameters(tiny(3), corrupt.as_slice()).is_err());
        assert!(SurrogateEncoder::read_parameters(tiny(3), &buf[..buf.len() - 1]).is_err());
        let other = EncoderConfig::new(16, 8, 2, 8, 2, 3);
        assert!(SurrogateEncoder::read_parameters(other, buf.as_slice()).is_err());
    }
}
