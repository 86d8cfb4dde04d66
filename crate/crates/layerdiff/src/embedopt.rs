//! Layered controlled optimization of the decomposed text embeddings.
//!
//! Model parameters stay frozen; only copies of the object/background
//! embeddings move. The default (joint) objective masks one jointly
//! conditioned residual by the object mask; the per-stream variant
//! optimizes the object embedding under the mask against the input image
//! and the background embedding under the complement against the
//! reference image.

use crate::backend::{masked_loss_planar, Adam, DenoiserModel};
use crate::error::{Error, Result};
use crate::masks;
use crate::rng::StageRng;
use crate::types::{EmbedLabel, EditSpec, Latent, Mask, OptMode, ResolutionTag, TextEmbedding};

/// Encodes the user-supplied text decomposition (T_a, T_b).
pub fn decompose_target_text(
    model: &DenoiserModel,
    spec: &EditSpec,
) -> Result<(TextEmbedding, TextEmbedding)> {
    if spec.object_text.trim().is_empty() {
        return Err(Error::Config("object_text must be non-empty".into()));
    }
    if spec.background_text.trim().is_empty() {
        return Err(Error::Config("background_text must be non-empty".into()));
    }
    let name = |which: &str, e: Error| match e {
        Error::Vocabulary { token, .. } => Error::Vocabulary {
            token,
            prompt: format!("{which}: inside that sub-prompt"),
        },
        other => other,
    };
    let e_a = model
        .encode_text(&spec.object_text)
        .map_err(|e| name(&spec.object_text, e))?;
    let e_b = model
        .encode_text(&spec.background_text)
        .map_err(|e| name(&spec.background_text, e))?;
    Ok((e_a, e_b))
}

/// Token-wise concatenation [e_a, e_b] truncated to capacity C (the object
/// tokens take priority; the background tail is dropped on overflow) and
/// padded with the padding embedding.
pub fn concat_embeddings(
    model: &DenoiserModel,
    e_a: &TextEmbedding,
    e_b: &TextEmbedding,
) -> TextEmbedding {
    let cap = e_a.token_capacity();
    let n = e_a.dim();
    let pad = model.pad_embedding();
    let na = e_a.tokens.min(cap);
    let nb = e_b.tokens.min(cap - na);
    let mut data = Vec::with_capacity(cap * n);
    for r in 0..na {
        data.extend_from_slice(e_a.row(r));
    }
    for r in 0..nb {
        data.extend_from_slice(e_b.row(r));
    }
    for _ in na + nb..cap {
        data.extend_from_slice(&pad);
    }
    TextEmbedding::new(data, cap, n, na + nb, EmbedLabel::Raw).expect("shapes preserved")
}

pub struct EmbedOptConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub mode: OptMode,
}

pub struct EmbedOptResult {
    pub e_a_hat: TextEmbedding,
    pub e_b_hat: TextEmbedding,
    pub trace: Vec<f64>,
    pub draw_count: u64,
}

fn require_latent_mask(m: &Mask, model: &DenoiserModel) -> Result<()> {
    let (h, w, _) = model.codec().latent_shape();
    if m.resolution_tag != ResolutionTag::Latent || m.height() != h || m.width() != w {
        return Err(Error::shape(
            format!("latent-resolution {h}x{w} mask"),
            format!("{:?} {}x{}", m.resolution_tag, m.height(), m.width()),
        ));
    }
    Ok(())
}

/// Optimizes (e_a, e_b) with frozen model parameters. Returns optimized
/// copies; inputs are untouched. `reference` is only consulted in
/// per-stream mode.
pub fn optimize_embeddings(
    model: &DenoiserModel,
    x0_input: &Latent,
    reference: Option<&Latent>,
    object_mask: &Mask,
    e_a: &TextEmbedding,
    e_b: &TextEmbedding,
    config: &EmbedOptConfig,
) -> Result<EmbedOptResult> {
    if config.steps < 1 {
        return Err(Error::Range("embed steps must be >= 1".into()));
    }
    require_latent_mask(object_mask, model)?;
    let frozen_before = model.checksum();

    let arch = *model.arch();
    let (cap, n) = (arch.token_capacity, arch.embed_dim);
    let n_elem = arch.latent_c * arch.latent_h * arch.latent_w;
    let t_steps = model.schedule().t_steps() as u64;
    let planar_input = model.to_planar(x0_input);

    let mut rng = StageRng::new(config.seed, "embed-opt");
    let mut a = e_a.data().to_vec();
    let mut b = e_b.data().to_vec();
    let mut trace = Vec::with_capacity(config.steps);

    match config.mode {
        OptMode::Joint => {
            // One concatenated conditioning, one mask, input-image latents.
            let na = e_a.tokens.min(cap);
            let nb = e_b.tokens.min(cap - na);
            let pad = model.pad_embedding();
            let mut opt = Adam::new(config.lr, (na + nb) * n);
            for step in 0..config.steps {
                let t = rng.uniform_int(1, t_steps) as u32;
                let eps = rng.normal_vec(n_elem);
                let ab = model.schedule().alpha_bar(t)?;
                let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
                let x_t: Vec<f64> = planar_input
                    .iter()
                    .zip(&eps)
                    .map(|(x, e)| sa * x + sb * e)
                    .collect();
                // Assemble [e_a, e_b] from the current copies.
                let mut embed = vec![0.0; cap * n];
                for r in 0..na {
                    embed[r * n..(r + 1) * n].copy_from_slice(&a[r * n..(r + 1) * n]);
                }
                for r in 0..nb {
                    embed[(na + r) * n..(na + r + 1) * n].copy_from_slice(&b[r * n..(r + 1) * n]);
                }
                for r in na + nb..cap {
                    embed[r * n..(r + 1) * n].copy_from_slice(&pad);
                }
                let (out, cache) = model.forward_planar(&x_t, t, &embed);
                let (loss, d_out) = masked_loss_planar(&out, &eps, Some(object_mask), arch.latent_c);
                if !loss.is_finite() {
                    return Err(Error::Optimization {
                        step,
                        reason: format!("non-finite loss {loss}"),
                    });
                }
                let grads = model.backward_planar(&cache, &d_out);
                // Only the caption rows move; padding rows stay put.
                let mut g = vec![0.0; (na + nb) * n];
                g.copy_from_slice(&grads.embed[..(na + nb) * n]);
                let mut vars = vec![0.0; (na + nb) * n];
                vars[..na * n].copy_from_slice(&a[..na * n]);
                vars[na * n..].copy_from_slice(&b[..nb * n]);
                opt.step(&mut vars, &g);
                a[..na * n].copy_from_slice(&vars[..na * n]);
                b[..nb * n].copy_from_slice(&vars[na * n..]);
                trace.push(loss);
            }
        }
        OptMode::PerStream => {
            let reference = reference.ok_or_else(|| {
                Error::Config("per-stream embedding optimization needs a reference latent".into())
            })?;
            let planar_ref = model.to_planar(reference);
            let bg_mask = masks::complement(object_mask);
            let mut opt_a = Adam::new(config.lr, cap * n);
            let mut opt_b = Adam::new(config.lr, cap * n);
            for step in 0..config.steps {
                let t = rng.uniform_int(1, t_steps) as u32;
                let eps = rng.normal_vec(n_elem);
                let ab = model.schedule().alpha_bar(t)?;
                let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
                let noised = |src: &[f64]| -> Vec<f64> {
                    src.iter().zip(&eps).map(|(x, e)| sa * x + sb * e).collect()
                };
                let (out_a, cache_a) = model.forward_planar(&noised(&planar_input), t, &a);
                let (loss_a, d_a) = masked_loss_planar(&out_a, &eps, Some(object_mask), arch.latent_c);
                let (out_b, cache_b) = model.forward_planar(&noised(&planar_ref), t, &b);
                let (loss_b, d_b) = masked_loss_planar(&out_b, &eps, Some(&bg_mask), arch.latent_c);
                let loss = loss_a + loss_b;
                if !loss.is_finite() {
                    return Err(Error::Optimization {
                        step,
                        reason: format!("non-finite loss {loss}"),
                    });
                }
                let ga = model.backward_planar(&cache_a, &d_a);
                let gb = model.backward_planar(&cache_b, &d_b);
                opt_a.step(&mut a, &ga.embed);
                opt_b.step(&mut b, &gb.embed);
                trace.push(loss);
            }
        }
    }

    debug_assert_eq!(model.checksum(), frozen_before, "model parameters moved");
    Ok(EmbedOptResult {
        e_a_hat: TextEmbedding::new(a, cap, n, e_a.tokens, EmbedLabel::Optimized)?,
        e_b_hat: TextEmbedding::new(b, cap, n, e_b.tokens, EmbedLabel::Optimized)?,
        trace,
        draw_count: rng.draw_count(),
    })
}

/// e_opt = alpha * e_a_hat + (1 - alpha) * e_b_hat, elementwise.
pub fn interpolate(e_a_hat: &TextEmbedding, e_b_hat: &TextEmbedding, alpha: f64) -> Result<TextEmbedding> {
    if !e_a_hat.same_shape(e_b_hat) {
        return Err(Error::shape(
            format!("{}x{}", e_a_hat.token_capacity(), e_a_hat.dim()),
            format!("{}x{}", e_b_hat.token_capacity(), e_b_hat.dim()),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Range(format!("alpha {alpha} outside [0,1]")));
    }
    let data: Vec<f64> = e_a_hat
        .data()
        .iter()
        .zip(e_b_hat.data())
        .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
        .collect();
    TextEmbedding::new(
        data,
        e_a_hat.token_capacity(),
        e_a_hat.dim(),
        e_a_hat.tokens.max(e_b_hat.tokens),
        EmbedLabel::Interpolated,
    )
}
