//! Shared domain types for all pipeline stages.
//!
//! Everything here is immutable after construction and safe to share across
//! threads. All numeric payloads are `f64`.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense H×W×3 pixel array, values in [0,1], interleaved RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Vec<f64>,
    height: usize,
    width: usize,
}

impl ImageTensor {
    pub fn new(data: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        if height < 8 || width < 8 || height % 4 != 0 || width % 4 != 0 {
            return Err(Error::shape(
                "H, W >= 8 and divisible by 4",
                format!("{height}x{width}"),
            ));
        }
        if data.len() != height * width * 3 {
            return Err(Error::shape(
                format!("{} values", height * width * 3),
                format!("{}", data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::Range("image values must be finite and in [0,1]".into()));
        }
        Ok(Self { data, height, width })
    }

    /// Clamps out-of-range values instead of rejecting them.
    pub fn from_unclamped(mut data: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        for v in &mut data {
            if !v.is_finite() {
                return Err(Error::Range("non-finite value in image".into()));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(data, height, width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Timestep annotation carried by a latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Timestep {
    Clean,
    Step(u32),
}

/// Diffusion state: h×w×c floats plus the timestep it lives at.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    data: Vec<f64>,
    height: usize,
    width: usize,
    channels: usize,
    pub timestep: Timestep,
}

impl Latent {
    pub fn new(
        data: Vec<f64>,
        height: usize,
        width: usize,
        channels: usize,
        timestep: Timestep,
    ) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                format!("{} values", height * width * channels),
                format!("{}", data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Range("non-finite value in latent".into()));
        }
        Ok(Self {
            data,
            height,
            width,
            channels,
            timestep,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &Latent) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedLabel {
    Raw,
    Optimized,
    Interpolated,
}

impl EmbedLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            EmbedLabel::Raw => "raw",
            EmbedLabel::Optimized => "optimized",
            EmbedLabel::Interpolated => "interpolated",
        }
    }
}

/// C×N token embedding matrix conditioning the denoiser.
///
/// `tokens` counts the leading non-padding rows; the remaining rows hold the
/// padding embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    data: Vec<f64>,
    token_capacity: usize,
    dim: usize,
    pub tokens: usize,
    pub label: EmbedLabel,
}

impl TextEmbedding {
    pub fn new(
        data: Vec<f64>,
        token_capacity: usize,
        dim: usize,
        tokens: usize,
        label: EmbedLabel,
    ) -> Result<Self> {
        if data.len() != token_capacity * dim {
            return Err(Error::shape(
                format!("{token_capacity}x{dim} embedding"),
                format!("{} values", data.len()),
            ));
        }
        if tokens > token_capacity {
            return Err(Error::Range(format!(
                "token count {tokens} exceeds capacity {token_capacity}"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Range("non-finite value in embedding".into()));
        }
        Ok(Self {
            data,
            token_capacity,
            dim,
            tokens,
            label,
        })
    }

    pub fn token_capacity(&self) -> usize {
        self.token_capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, token: usize) -> &[f64] {
        &self.data[token * self.dim..(token + 1) * self.dim]
    }

    pub fn same_shape(&self, other: &TextEmbedding) -> bool {
        self.token_capacity == other.token_capacity && self.dim == other.dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResolutionTag {
    Image,
    Latent,
}

/// Binary foreground map. Values are exactly 0.0 or 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    data: Vec<f64>,
    height: usize,
    width: usize,
    pub resolution_tag: ResolutionTag,
}

impl Mask {
    pub fn new(data: Vec<f64>, height: usize, width: usize, resolution_tag: ResolutionTag) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                format!("{height}x{width} mask"),
                format!("{} values", data.len()),
            ));
        }
        if !data.iter().all(|v| *v == 0.0 || *v == 1.0) {
            return Err(Error::Range("mask values must be exactly 0 or 1".into()));
        }
        Ok(Self {
            data,
            height,
            width,
            resolution_tag,
        })
    }

    pub fn ones(height: usize, width: usize, tag: ResolutionTag) -> Self {
        Self {
            data: vec![1.0; height * width],
            height,
            width,
            resolution_tag: tag,
        }
    }

    pub fn zeros(height: usize, width: usize, tag: ResolutionTag) -> Self {
        Self {
            data: vec![0.0; height * width],
            height,
            width,
            resolution_tag: tag,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Mean value: fraction of foreground pixels.
    pub fn coverage(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// β_t / ᾱ_t tables governing forward noising and reverse sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds ᾱ_t = ∏ (1−β_s) from the betas and validates the invariants.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Range("schedule needs at least one step".into()));
        }
        if !betas.iter().all(|b| b.is_finite() && *b > 0.0 && *b < 1.0) {
            return Err(Error::Range("betas must satisfy 0 < beta < 1".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        if alpha_bars[0] <= 0.99 {
            return Err(Error::Range(format!(
                "alpha_bar[0] = {} must exceed 0.99",
                alpha_bars[0]
            )));
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Linear β from 1e-4 to 0.02 over 1000 steps, the standard DDPM table.
    pub fn default_linear() -> Self {
        Self::linear(1e-4, 0.02, 1000).expect("default schedule is valid")
    }

    pub fn linear(beta_start: f64, beta_end: f64, steps: usize) -> Result<Self> {
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn t_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// ᾱ_t for a 1-based timestep t.
    pub fn alpha_bar(&self, t: u32) -> Result<f64> {
        if t < 1 || t as usize > self.betas.len() {
            return Err(Error::Range(format!(
                "timestep {t} outside [1, {}]",
                self.betas.len()
            )));
        }
        Ok(self.alpha_bars[t as usize - 1])
    }
}

/// Where the object mask comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSource {
    SyntheticOracle,
    File(PathBuf),
}

/// Embedding-optimization variant: one jointly conditioned residual under the
/// object mask, or separate object/background streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OptMode {
    #[default]
    Joint,
    PerStream,
}

/// Which image the object-masked fine-tune loss noising draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SubjectSource {
    #[default]
    Target,
    Input,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    Plain,
    #[default]
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMethod {
    #[default]
    Ancestral,
    DeterministicDdim,
}

/// λ₁ / λ₂ pair weighting the object and background losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_obj: f64,
    pub lambda_bg: f64,
}

impl LossWeights {
    pub fn new(lambda_obj: f64, lambda_bg: f64) -> Result<Self> {
        if lambda_obj < 0.0 || lambda_bg < 0.0 {
            return Err(Error::Range("loss weights must be >= 0".into()));
        }
        if lambda_obj == 0.0 && lambda_bg == 0.0 {
            return Err(Error::Range("loss weights must not both be zero".into()));
        }
        Ok(Self { lambda_obj, lambda_bg })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_obj: DEFAULT_LAMBDA_OBJ,
            lambda_bg: DEFAULT_LAMBDA_BG,
        }
    }
}

pub const DEFAULT_ALPHA: f64 = 0.7;
pub const DEFAULT_LAMBDA_OBJ: f64 = 2.0;
pub const DEFAULT_LAMBDA_BG: f64 = 1.0;
pub const DEFAULT_EMBED_STEPS: usize = 500;
pub const DEFAULT_EMBED_LR: f64 = 1e-3;
pub const DEFAULT_FINETUNE_STEPS: usize = 250;
/// The reference 2e-6 rate targets full-scale models; a 32-wide denoiser
/// needs more. The embed:finetune ratio is kept as the tunable relationship.
pub const DEFAULT_FINETUNE_LR: f64 = 1e-4;
pub const DEFAULT_SAMPLE_STEPS: usize = 50;
pub const DEFAULT_N_SAMPLES: usize = 4;

/// One edit job: inputs, text decomposition, and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSpec {
    pub input_image: PathBuf,
    pub reference_image: Option<PathBuf>,
    pub target_text: String,
    pub object_text: String,
    pub background_text: String,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_lambda_obj")]
    pub lambda_obj: f64,
    #[serde(default = "default_lambda_bg")]
    pub lambda_bg: f64,
    #[serde(default = "default_embed_steps")]
    pub embed_steps: usize,
    #[serde(default = "default_embed_lr")]
    pub embed_lr: f64,
    #[serde(default = "default_finetune_steps")]
    pub finetune_steps: usize,
    #[serde(default = "default_finetune_lr")]
    pub finetune_lr: f64,
    #[serde(default = "default_sample_steps")]
    pub sample_steps: usize,
    pub seed: u64,
    #[serde(default = "default_mask_source")]
    pub object_mask_source: MaskSource,
    #[serde(default)]
    pub opt_mode: OptMode,
    #[serde(default)]
    pub subject_source: SubjectSource,
    #[serde(default)]
    pub guidance: GuidanceMode,
    #[serde(default)]
    pub method: SampleMethod,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub dilate_radius: usize,
    /// Skip the embedding-optimization stage, interpolating raw embeddings.
    #[serde(default)]
    pub skip_embed_opt: bool,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_lambda_obj() -> f64 {
    DEFAULT_LAMBDA_OBJ
}
fn default_lambda_bg() -> f64 {
    DEFAULT_LAMBDA_BG
}
fn default_embed_steps() -> usize {
    DEFAULT_EMBED_STEPS
}
fn default_embed_lr() -> f64 {
    DEFAULT_EMBED_LR
}
fn default_finetune_steps() -> usize {
    DEFAULT_FINETUNE_STEPS
}
fn default_finetune_lr() -> f64 {
    DEFAULT_FINETUNE_LR
}
fn default_sample_steps() -> usize {
    DEFAULT_SAMPLE_STEPS
}
fn default_mask_source() -> MaskSource {
    MaskSource::SyntheticOracle
}
fn default_n_samples() -> usize {
    DEFAULT_N_SAMPLES
}

impl EditSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Range(format!("alpha {} outside [0,1]", self.alpha)));
        }
        LossWeights::new(self.lambda_obj, self.lambda_bg)?;
        if self.embed_steps < 1 || self.finetune_steps < 1 || self.sample_steps < 1 {
            return Err(Error::Range("all step counts must be >= 1".into()));
        }
        if self.object_text.trim().is_empty() {
            return Err(Error::Config("object_text must be non-empty".into()));
        }
        if self.background_text.trim().is_empty() {
            return Err(Error::Config("background_text must be non-empty".into()));
        }
        if self.target_text.trim().is_empty() {
            return Err(Error::Config("target_text must be non-empty".into()));
        }
        if self.n_samples < 1 {
            return Err(Error::Range("n_samples must be >= 1".into()));
        }
        Ok(())
    }
}
