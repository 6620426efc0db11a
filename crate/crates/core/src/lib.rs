//! Targeted transfer attack on a differentiable toy vision-transformer
//! ensemble: progressive-resolution targets, gradient-consistency layer
//! selection, top-K patch alignment and signed PGD, plus image quality
//! metrics and an LLM judge client.
//!
//! ```no_run
//! use praf_core::{build_ensemble, run_attack, AttackConfig, Ensemble};
//! use praf_core::image::synthetic_scene;
//!
//! let ensemble = build_ensemble(&Ensemble::desk_default_configs(64))?;
//! let clean = synthetic_scene(64, 1);
//! let target = synthetic_scene(64, 2);
//! let out = run_attack(&clean, &target, &ensemble, &AttackConfig::default())?;
//! println!("{} iterations", out.trace.iterations.len());
//! # Ok::<(), praf_core::Error>(())
//! ```

pub mod alignment;
pub mod attack;
pub mod error;
pub mod image;
pub mod io;
pub mod judge;
pub mod metrics;
pub mod resolution;
pub mod surrogate;
pub mod tensor;

pub use alignment::{LayerScore, LossWeights, PatchMask, PatchSelection, SelectionSet};
pub use attack::{run_attack, run_attack_observed, AttackConfig, AttackOutcome, AttackTrace, IterationRecord, StageRecord, UpdateRule};
pub use error::{Error, Result};
pub use image::Image;
pub use io::config::RunConfig;
pub use io::manifest::{PairManifest, PairRecord};
pub use io::{load_image, save_image};
pub use metrics::{psnr, ssim, QualityReport};
pub use resolution::{stage_index, Interpolation, StageSchedule};
pub use surrogate::{build_ensemble, EncoderConfig, Ensemble, LayerRef, SurrogateEncoder};
pub use tensor::{Tape, Tensor, Var};
