//! Base denoiser training on the noise-prediction objective.

use serde::{Deserialize, Serialize};

use super::{masked_loss_planar, Adam, Arch, DenoiserModel, Vocab};
use crate::error::{Error, Result};
use crate::exec;
use crate::rng::StageRng;
use crate::synthdata::SceneSample;
use crate::types::NoiseSchedule;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            lr: 2e-3,
            batch: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Per-step batch losses.
    pub trace: Vec<f64>,
    /// Mean loss per epoch.
    pub epoch_means: Vec<f64>,
}

/// Per-item work: noise draw, forward, masked-free loss, backward. Returns
/// (loss, flat param grads with token-row scatter already applied).
fn item_pass(
    model: &DenoiserModel,
    planar_x0: &[f64],
    token_ids: &[usize],
    t: u32,
    eps: &[f64],
) -> (f64, Vec<f64>) {
    let arch = model.arch();
    let ab = model
        .schedule()
        .alpha_bar(t)
        .expect("t drawn in range");
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x_t: Vec<f64> = planar_x0
        .iter()
        .zip(eps)
        .map(|(x, e)| sa * x + sb * e)
        .collect();

    // Embedding lookup against current parameters.
    let (cap, n) = (arch.token_capacity, arch.embed_dim);
    let pad = model.vocab().pad_id();
    let layout = model.layout();
    let mut embed = vec![0.0; cap * n];
    let mut row_ids = vec![pad; cap];
    for (r, slot) in row_ids.iter_mut().enumerate() {
        if let Some(id) = token_ids.get(r) {
            *slot = *id;
        }
    }
    for (r, id) in row_ids.iter().enumerate() {
        let src = layout.embed.start + id * n;
        embed[r * n..(r + 1) * n].copy_from_slice(&model.params()[src..src + n]);
    }

    let (out, cache) = model.forward_planar(&x_t, t, &embed);
    let (loss, d_out) = masked_loss_planar(&out, eps, None, arch.latent_c);
    let mut grads = model.backward_planar(&cache, &d_out);
    // Scatter conditioning gradients into the embedding table (phi).
    for (r, id) in row_ids.iter().enumerate() {
        let dst = layout.embed.start + id * n;
        for j in 0..n {
            grads.params[dst + j] += grads.embed[r * n + j];
        }
    }
    (loss, grads.params)
}

/// Trains theta and phi jointly on the corpus. Deterministic given
/// (corpus, config): gradient reduction is in fixed batch order regardless
/// of thread count.
pub fn train_base(corpus: &[SceneSample], config: &TrainConfig) -> Result<(DenoiserModel, TrainReport)> {
    if corpus.len() < 256 {
        return Err(Error::Config(format!(
            "corpus has {} samples, need at least 256",
            corpus.len()
        )));
    }
    let arch = Arch::default();
    let vocab = Vocab::default();
    let schedule = NoiseSchedule::default_linear();
    let mut model = DenoiserModel::new(arch, vocab, schedule, config.seed);
    let t_steps = model.schedule().t_steps() as u64;

    // Pre-encode inputs once; embeddings are looked up per step because phi
    // trains too.
    let planar: Vec<Vec<f64>> = corpus
        .iter()
        .map(|s| {
            let lat = model.codec().encode(&s.image)?;
            Ok(model.to_planar(&lat))
        })
        .collect::<Result<_>>()?;
    let tokens: Vec<Vec<usize>> = corpus
        .iter()
        .map(|s| model.token_ids(&s.caption))
        .collect::<Result<_>>()?;

    let mut rng = StageRng::new(config.seed, "train-base");
    let mut opt = Adam::new(config.lr, model.params().len());
    let n_elem = arch.latent_c * arch.latent_h * arch.latent_w;
    let mut trace = Vec::new();
    let mut epoch_means = Vec::new();
    let mut step = 0usize;

    for _epoch in 0..config.epochs {
        let order = rng.permutation(corpus.len());
        let mut epoch_sum = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(config.batch) {
            // Draw all randomness sequentially, then fan out.
            let draws: Vec<(usize, u32, Vec<f64>)> = chunk
                .iter()
                .map(|&idx| {
                    let t = rng.uniform_int(1, t_steps) as u32;
                    let eps = rng.normal_vec(n_elem);
                    (idx, t, eps)
                })
                .collect();
            let results = exec::map_indexed(draws.len(), |i| {
                let (idx, t, ref eps) = draws[i];
                item_pass(&model, &planar[idx], &tokens[idx], t, eps)
            });
            let mut batch_loss = 0.0;
            let mut grad = vec![0.0; model.params().len()];
            for (loss, g) in &results {
                batch_loss += loss;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let inv = 1.0 / results.len() as f64;
            batch_loss *= inv;
            for g in &mut grad {
                *g *= inv;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: format!("non-finite loss {batch_loss}"),
                });
            }
            opt.step(model.params_mut(), &grad);
            trace.push(batch_loss);
            epoch_sum += batch_loss;
            epoch_batches += 1;
            step += 1;
        }
        epoch_means.push(epoch_sum / epoch_batches as f64);
    }
    Ok((model, TrainReport { trace, epoch_means }))
}

/// Mean noise-prediction loss over a corpus split, fixed draws from `seed`.
pub fn eval_loss(model: &DenoiserModel, corpus: &[SceneSample], seed: u64) -> Result<f64> {
    let mut rng = StageRng::new(seed, "eval-loss");
    let arch = model.arch();
    let n_elem = arch.latent_c * arch.latent_h * arch.latent_w;
    let t_steps = model.schedule().t_steps() as u64;
    let draws: Vec<(u32, Vec<f64>)> = corpus
        .iter()
        .map(|_| (rng.uniform_int(1, t_steps) as u32, rng.normal_vec(n_elem)))
        .collect();
    let losses = exec::map_indexed(corpus.len(), |i| -> Result<f64> {
        let s = &corpus[i];
        let lat = model.codec().encode(&s.image)?;
        let planar = model.to_planar(&lat);
        let (t, ref eps) = draws[i];
        let ab = model.schedule().alpha_bar(t)?;
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let x_t: Vec<f64> = planar.iter().zip(eps).map(|(x, e)| sa * x + sb * e).collect();
        let e = model.encode_text(&s.caption)?;
        let (out, _) = model.forward_planar(&x_t, t, e.data());
        let (loss, _) = masked_loss_planar(&out, eps, None, arch.latent_c);
        Ok(loss)
    });
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / corpus.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::sample_corpus;

    #[test]
    fn rejects_tiny_corpus() {
        let corpus = sample_corpus(8, 0).unwrap();
        assert!(train_base(&corpus, &TrainConfig::default()).is_err());
    }

    // Heavier training-behavior tests live in the integration suite.
}
