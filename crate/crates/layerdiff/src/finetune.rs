//! Mask-weighted fine-tuning of the denoiser against a target/reference
//! latent pair.
//!
//! Each step draws one (t, eps) pair shared by both terms, computes
//!
//!   L_total = lambda_obj * L_obj + lambda_bg * L_bg
//!
//! where L_obj masks the residual on the subject latent by the target
//! object mask and L_bg masks the residual on the reference latent by the
//! complement of the reference object mask. Model weights move; the
//! conditioning embedding stays frozen.

use crate::backend::{masked_loss_planar, Adam, DenoiserModel};
use crate::error::{Error, Result};
use crate::masks;
use crate::rng::StageRng;
use crate::types::{Latent, LossWeights, Mask, ResolutionTag, SubjectSource, TextEmbedding};

pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub subject_source: SubjectSource,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub obj: f64,
    pub bg: f64,
    pub total: f64,
}

pub struct FinetuneReport {
    pub trace: Vec<StepLosses>,
    pub draw_count: u64,
}

/// One-shot evaluation of the weighted objective without touching weights.
/// `mask_bg` is already the complement (1 - M_r) region.
pub fn masked_diffusion_loss(
    model: &DenoiserModel,
    subject: &Latent,
    reference: &Latent,
    mask_obj: &Mask,
    mask_bg: &Mask,
    embedding: &TextEmbedding,
    weights: &LossWeights,
    t: u32,
    eps: &[f64],
) -> Result<StepLosses> {
    let arch = *model.arch();
    let ab = model.schedule().alpha_bar(t)?;
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let noised = |src: &Latent| -> Vec<f64> {
        model
            .to_planar(src)
            .iter()
            .zip(eps)
            .map(|(x, e)| sa * x + sb * e)
            .collect()
    };
    let (out_s, _) = model.forward_planar(&noised(subject), t, embedding.data());
    let (l_obj, _) = masked_loss_planar(&out_s, eps, Some(mask_obj), arch.latent_c);
    let (out_r, _) = model.forward_planar(&noised(reference), t, embedding.data());
    let (l_bg, _) = masked_loss_planar(&out_r, eps, Some(mask_bg), arch.latent_c);
    Ok(StepLosses {
        obj: l_obj,
        bg: l_bg,
        total: weights.lambda_obj * l_obj + weights.lambda_bg * l_bg,
    })
}

fn check_latent_mask(m: &Mask, model: &DenoiserModel, what: &str) -> Result<()> {
    let (h, w, _) = model.codec().latent_shape();
    if m.resolution_tag != ResolutionTag::Latent || m.height() != h || m.width() != w {
        return Err(Error::shape(
            format!("{what}: latent-resolution {h}x{w} mask"),
            format!("{:?} {}x{}", m.resolution_tag, m.height(), m.width()),
        ));
    }
    Ok(())
}

/// Fine-tunes the model in place. `target` is the generated target latent
/// O_t, `input` the user's input latent, `reference` the background
/// reference O_r. `mask_target` is the object mask on the subject latent
/// and `mask_reference` the object mask on the reference (its complement
/// defines the preserved background region).
pub fn finetune(
    model: &mut DenoiserModel,
    target: &Latent,
    input: &Latent,
    reference: &Latent,
    mask_target: &Mask,
    mask_reference: &Mask,
    e_opt: &TextEmbedding,
    config: &FinetuneConfig,
) -> Result<FinetuneReport> {
    check_latent_mask(mask_target, model, "object term")?;
    check_latent_mask(mask_reference, model, "background term")?;
    let subject = match config.subject_source {
        SubjectSource::Target => target,
        SubjectSource::Input => input,
    };
    let bg_mask = masks::complement(mask_reference);
    let embed_frozen = e_opt.data().to_vec();

    let arch = *model.arch();
    let n_elem = arch.latent_c * arch.latent_h * arch.latent_w;
    let theta = model.layout().theta();
    let t_steps = model.schedule().t_steps() as u64;
    let planar_subject = model.to_planar(subject);
    let planar_ref = model.to_planar(reference);

    let mut rng = StageRng::new(config.seed, "finetune");
    let mut opt = Adam::new(config.lr, theta.len());
    let mut trace = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let t = rng.uniform_int(1, t_steps) as u32;
        let eps = rng.normal_vec(n_elem);
        let ab = model.schedule().alpha_bar(t)?;
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let noised = |src: &[f64]| -> Vec<f64> {
            src.iter().zip(&eps).map(|(x, e)| sa * x + sb * e).collect()
        };

        let (out_s, cache_s) = model.forward_planar(&noised(&planar_subject), t, &embed_frozen);
        let (l_obj, d_s) = masked_loss_planar(&out_s, &eps, Some(mask_target), arch.latent_c);
        let gs = model.backward_planar(&cache_s, &d_s);

        let (out_r, cache_r) = model.forward_planar(&noised(&planar_ref), t, &embed_frozen);
        let (l_bg, d_r) = masked_loss_planar(&out_r, &eps, Some(&bg_mask), arch.latent_c);
        let gr = model.backward_planar(&cache_r, &d_r);

        let total = config.weights.lambda_obj * l_obj + config.weights.lambda_bg * l_bg;
        if !total.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("non-finite loss {total}"),
            });
        }

        let grad: Vec<f64> = gs.params[theta.clone()]
            .iter()
            .zip(&gr.params[theta.clone()])
            .map(|(a, b)| config.weights.lambda_obj * a + config.weights.lambda_bg * b)
            .collect();
        opt.step(&mut model.params_mut()[theta.clone()], &grad);

        trace.push(StepLosses {
            obj: l_obj,
            bg: l_bg,
            total,
        });
    }

    Ok(FinetuneReport {
        trace,
        draw_count: rng.draw_count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Arch, DenoiserModel, Vocab};
    use crate::rng::StageRng;
    use crate::types::{EmbedLabel, NoiseSchedule, Timestep};

    fn probe_model() -> DenoiserModel {
        DenoiserModel::new(Arch::probe(), Vocab::default(), NoiseSchedule::default_linear(), 3)
    }

    fn latent(seed: u64, tag: &str) -> Latent {
        let mut rng = StageRng::new(seed, tag);
        Latent::new(rng.normal_vec(32 * 32 * 3), 32, 32, 3, Timestep::Clean).unwrap()
    }

    fn embed(model: &DenoiserModel) -> TextEmbedding {
        let e = model.encode_text("a red square").unwrap();
        TextEmbedding::new(e.data().to_vec(), 10, 32, e.tokens, EmbedLabel::Interpolated).unwrap()
    }

    fn half_mask() -> Mask {
        let mut data = vec![0.0; 32 * 32];
        for y in 0..32 {
            for x in 0..16 {
                data[y * 32 + x] = 1.0;
            }
        }
        Mask::new(data, 32, 32, ResolutionTag::Latent).unwrap()
    }

    #[test]
    fn zero_steps_is_bit_identical() {
        let mut m = probe_model();
        let before = m.checksum();
        let e = embed(&m);
        let report = finetune(
            &mut m,
            &latent(0, "t"),
            &latent(1, "i"),
            &latent(2, "r"),
            &half_mask(),
            &half_mask(),
            &e,
            &FinetuneConfig {
                steps: 0,
                lr: 1e-2,
                seed: 0,
                weights: LossWeights::default(),
                subject_source: SubjectSource::Target,
            },
        )
        .unwrap();
        assert!(report.trace.is_empty());
        assert_eq!(m.checksum(), before);
    }

    #[test]
    fn weights_scale_the_total_linearly() {
        let m = probe_model();
        let e = embed(&m);
        let mut rng = StageRng::new(7, "eps");
        let eps = rng.normal_vec(32 * 32 * 3);
        let w1 = LossWeights::new(2.0, 1.0).unwrap();
        let w2 = LossWeights::new(4.0, 2.0).unwrap();
        let a = masked_diffusion_loss(
            &m, &latent(0, "t"), &latent(2, "r"), &half_mask(),
            &crate::masks::complement(&half_mask()), &e, &w1, 500, &eps,
        )
        .unwrap();
        let b = masked_diffusion_loss(
            &m, &latent(0, "t"), &latent(2, "r"), &half_mask(),
            &crate::masks::complement(&half_mask()), &e, &w2, 500, &eps,
        )
        .unwrap();
        assert_eq!(a.obj, b.obj);
        assert_eq!(a.bg, b.bg);
        assert!((2.0 * a.total - b.total).abs() < 1e-12);
        assert!((a.total - (2.0 * a.obj + 1.0 * a.bg)).abs() < 1e-12);
    }

    #[test]
    fn training_moves_weights_and_keeps_embedding() {
        let mut m = probe_model();
        let before = m.checksum();
        let e = embed(&m);
        let e_before = e.data().to_vec();
        let report = finetune(
            &mut m,
            &latent(0, "t"),
            &latent(1, "i"),
            &latent(2, "r"),
            &half_mask(),
            &half_mask(),
            &e,
            &FinetuneConfig {
                steps: 3,
                lr: 1e-3,
                seed: 11,
                weights: LossWeights::default(),
                subject_source: SubjectSource::Target,
            },
        )
        .unwrap();
        assert_eq!(report.trace.len(), 3);
        assert_ne!(m.checksum(), before);
        assert_eq!(e.data(), &e_before[..]);
        for s in &report.trace {
            assert!(s.total.is_finite());
            assert!((s.total - (2.0 * s.obj + 1.0 * s.bg)).abs() < 1e-12);
        }
        // The embedding table segment of the parameter vector is untouched.
        let fresh = probe_model();
        let embed_range = m.layout().embed.clone();
        assert_eq!(&m.params()[embed_range.clone()], &fresh.params()[embed_range]);
    }

    #[test]
    fn subject_source_changes_the_outcome() {
        let e_ref = {
            let m = probe_model();
            embed(&m)
        };
        let run = |src: SubjectSource| {
            let mut m = probe_model();
            finetune(
                &mut m,
                &latent(0, "t"),
                &latent(1, "i"),
                &latent(2, "r"),
                &half_mask(),
                &half_mask(),
                &e_ref,
                &FinetuneConfig {
                    steps: 2,
                    lr: 1e-3,
                    seed: 5,
                    weights: LossWeights::default(),
                    subject_source: src,
                },
            )
            .unwrap();
            m.checksum()
        };
        assert_ne!(run(SubjectSource::Target), run(SubjectSource::Input));
    }

    #[test]
    fn finetune_is_deterministic() {
        let run = || {
            let mut m = probe_model();
            let e = embed(&m);
            finetune(
                &mut m,
                &latent(0, "t"),
                &latent(1, "i"),
                &latent(2, "r"),
                &half_mask(),
                &half_mask(),
                &e,
                &FinetuneConfig {
                    steps: 2,
                    lr: 1e-3,
                    seed: 9,
                    weights: LossWeights::default(),
                    subject_source: SubjectSource::Target,
                },
            )
            .unwrap();
            m.checksum()
        };
        assert_eq!(run(), run());
    }
}
