//! Self-contained text-conditioned latent diffusion backend.
//!
//! Identity codec (diffusion runs in pixel space, but everything goes
//! through the codec interface so a real latent backend can slot in),
//! closed-form forward noising, the UNet noise predictor, and base
//! training.

pub mod adam;
pub mod nn;
pub mod text;
pub mod train;
pub mod unet;

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::Container;
use crate::types::{
    EmbedLabel, ImageTensor, Latent, Mask, NoiseSchedule, TextEmbedding, Timestep,
};
pub use adam::Adam;
pub use text::Vocab;
pub use train::{eval_loss, train_base, TrainConfig, TrainReport};
pub use unet::{Arch, Layout, UnetCache, UnetGrads};

/// Image <-> latent codec. The toy codec is the identity; `latent_shape`
/// is what the rest of the pipeline keys off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Codec {
    pub latent_h: usize,
    pub latent_w: usize,
    pub latent_c: usize,
}

impl Codec {
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (self.latent_h, self.latent_w, self.latent_c)
    }

    pub fn encode(&self, image: &ImageTensor) -> Result<Latent> {
        if image.height() != self.latent_h || image.width() != self.latent_w {
            return Err(Error::shape(
                format!("{}x{} image", self.latent_h, self.latent_w),
                format!("{}x{}", image.height(), image.width()),
            ));
        }
        Latent::new(
            image.data().to_vec(),
            self.latent_h,
            self.latent_w,
            self.latent_c,
            Timestep::Clean,
        )
    }

    pub fn decode(&self, latent: &Latent) -> Result<ImageTensor> {
        ImageTensor::from_unclamped(latent.data().to_vec(), latent.height(), latent.width())
    }
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
pub fn add_noise(x0: &Latent, t: u32, eps: &Latent, schedule: &NoiseSchedule) -> Result<Latent> {
    if !x0.same_shape(eps) {
        return Err(Error::shape(
            format!("noise shaped {}x{}x{}", x0.height(), x0.width(), x0.channels()),
            format!("{}x{}x{}", eps.height(), eps.width(), eps.channels()),
        ));
    }
    let ab = schedule.alpha_bar(t)?;
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| sa * x + sb * e)
        .collect();
    Latent::new(data, x0.height(), x0.width(), x0.channels(), Timestep::Step(t))
}

/// The denoiser: architecture, parameters (theta + the token embedding
/// table phi), schedule, and vocabulary.
#[derive(Clone)]
pub struct DenoiserModel {
    arch: Arch,
    vocab: Vocab,
    schedule: NoiseSchedule,
    layout: Layout,
    params: Vec<f64>,
}

impl DenoiserModel {
    pub fn new(arch: Arch, vocab: Vocab, schedule: NoiseSchedule, seed: u64) -> Self {
        let layout = Layout::new(&arch, vocab.len());
        let params = unet::init_params(&arch, vocab.len(), seed);
        Self {
            arch,
            vocab,
            schedule,
            layout,
            params,
        }
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn codec(&self) -> Codec {
        Codec {
            latent_h: self.arch.latent_h,
            latent_w: self.arch.latent_w,
            latent_c: self.arch.latent_c,
        }
    }

    /// SHA-256 over the full parameter vector (theta and phi).
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.params {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn pad_embedding(&self) -> Vec<f64> {
        let n = self.arch.embed_dim;
        let start = self.layout.embed.start + self.vocab.pad_id() * n;
        self.params[start..start + n].to_vec()
    }

    fn embed_row(&self, token_id: usize) -> &[f64] {
        let n = self.arch.embed_dim;
        let start = self.layout.embed.start + token_id * n;
        &self.params[start..start + n]
    }

    /// Token ids padded/validated against the capacity C.
    pub fn token_ids(&self, caption: &str) -> Result<Vec<usize>> {
        let ids = self.vocab.tokenize(caption)?;
        if ids.len() > self.arch.token_capacity {
            return Err(Error::Range(format!(
                "caption has {} tokens, capacity is {}",
                ids.len(),
                self.arch.token_capacity
            )));
        }
        Ok(ids)
    }

    /// C×N embedding matrix; rows past the caption hold the padding
    /// embedding.
    pub fn encode_text(&self, caption: &str) -> Result<TextEmbedding> {
        let ids = self.token_ids(caption)?;
        let (cap, n) = (self.arch.token_capacity, self.arch.embed_dim);
        let pad = self.vocab.pad_id();
        let mut data = Vec::with_capacity(cap * n);
        for r in 0..cap {
            let id = ids.get(r).copied().unwrap_or(pad);
            data.extend_from_slice(self.embed_row(id));
        }
        TextEmbedding::new(data, cap, n, ids.len(), EmbedLabel::Raw)
    }

    /// Latent (interleaved HWC) to the planar layout the network uses.
    pub fn to_planar(&self, latent: &Latent) -> Vec<f64> {
        let (h, w, c) = (latent.height(), latent.width(), latent.channels());
        let src = latent.data();
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[ch * h * w + y * w + x] = src[(y * w + x) * c + ch];
                }
            }
        }
        out
    }

    pub fn from_planar(&self, planar: &[f64], timestep: Timestep) -> Result<Latent> {
        let (h, w, c) = (self.arch.latent_h, self.arch.latent_w, self.arch.latent_c);
        let mut out = vec![0.0; h * w * c];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(y * w + x) * c + ch] = planar[ch * h * w + y * w + x];
                }
            }
        }
        Latent::new(out, h, w, c, timestep)
    }

    fn check_shapes(&self, x_t: &Latent, e: &TextEmbedding) -> Result<()> {
        if x_t.height() != self.arch.latent_h
            || x_t.width() != self.arch.latent_w
            || x_t.channels() != self.arch.latent_c
        {
            return Err(Error::shape(
                format!(
                    "latent {}x{}x{}",
                    self.arch.latent_h, self.arch.latent_w, self.arch.latent_c
                ),
                format!("{}x{}x{}", x_t.height(), x_t.width(), x_t.channels()),
            ));
        }
        if e.token_capacity() != self.arch.token_capacity || e.dim() != self.arch.embed_dim {
            return Err(Error::shape(
                format!("embedding {}x{}", self.arch.token_capacity, self.arch.embed_dim),
                format!("{}x{}", e.token_capacity(), e.dim()),
            ));
        }
        Ok(())
    }

    /// eps_hat(x_t, t, e). Pure function of (params, inputs).
    pub fn predict_noise(&self, x_t: &Latent, t: u32, e: &TextEmbedding) -> Result<Latent> {
        self.check_shapes(x_t, e)?;
        self.schedule.alpha_bar(t)?;
        let planar = self.to_planar(x_t);
        let (out, _) = unet::forward(&self.arch, &self.layout, &self.params, &planar, t, e.data());
        self.from_planar(&out, Timestep::Step(t))
    }

    /// Forward with cache on planar buffers, for the training loops.
    pub fn forward_planar(&self, x_planar: &[f64], t: u32, embed: &[f64]) -> (Vec<f64>, UnetCache) {
        unet::forward(&self.arch, &self.layout, &self.params, x_planar, t, embed)
    }

    pub fn backward_planar(&self, cache: &UnetCache, d_out: &[f64]) -> UnetGrads {
        unet::backward(&self.arch, &self.layout, &self.params, cache, d_out)
    }
}

/// Masked noise-prediction loss on planar buffers.
///
/// loss = sum over channels and pixels of mask * (eps - eps_hat)^2, divided
/// by the TOTAL element count (not the unmasked count), so the loss-weight
/// semantics stay independent of mask coverage. The mask broadcasts across
/// channels; `None` means all-ones. Returns (loss, d_loss/d_out).
pub fn masked_loss_planar(
    out: &[f64],
    eps: &[f64],
    mask: Option<&Mask>,
    channels: usize,
) -> (f64, Vec<f64>) {
    let n_total = out.len() as f64;
    let hw = out.len() / channels;
    let mut loss = 0.0;
    let mut d_out = vec![0.0; out.len()];
    for ch in 0..channels {
        for p in 0..hw {
            let m = mask.map_or(1.0, |m| m.data()[p]);
            if m == 0.0 {
                continue;
            }
            let i = ch * hw + p;
            let r = eps[i] - out[i];
            loss += m * r * r;
            d_out[i] = -2.0 * m * r / n_total;
        }
    }
    (loss / n_total, d_out)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub fn save_checkpoint(model: &DenoiserModel, path: &Path) -> Result<()> {
    let mut c = Container::default();
    c.set_meta(
        "arch",
        &serde_json::to_string(&model.arch).expect("arch serializes"),
    );
    c.set_meta("vocab", &model.vocab.words().join(","));
    c.push("params", vec![model.params.len()], model.params.clone());
    c.push(
        "schedule.betas",
        vec![model.schedule.t_steps()],
        model.schedule.betas().to_vec(),
    );
    c.push(
        "schedule.alpha_bars",
        vec![model.schedule.t_steps()],
        model.schedule.alpha_bars().to_vec(),
    );
    c.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<DenoiserModel> {
    let c = Container::load(path)?;
    let arch_json = c.meta("arch").ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        reason: "missing arch meta".into(),
    })?;
    let arch: Arch = serde_json::from_str(arch_json).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: format!("bad arch meta: {e}"),
    })?;
    let vocab_meta = c.meta("vocab").ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        reason: "missing vocab meta".into(),
    })?;
    let vocab = Vocab::from_words(vocab_meta.split(',').map(|s| s.to_string()).collect())?;
    let params = c.require("params", path)?.data.clone();
    let betas = c.require("schedule.betas", path)?.data.clone();
    let schedule = NoiseSchedule::from_betas(betas)?;
    let layout = Layout::new(&arch, vocab.len());
    if params.len() != layout.total {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("param count {} != layout {}", params.len(), layout.total),
        });
    }
    Ok(DenoiserModel {
        arch,
        vocab,
        schedule,
        layout,
        params,
    })
}
