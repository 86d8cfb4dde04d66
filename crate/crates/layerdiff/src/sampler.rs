//! Reverse-process sampling with optional alternating conditioning.
//!
//! The sampler walks a uniform-stride sub-schedule of the training
//! timesteps down to t = 1, predicting noise under a conditioning
//! embedding chosen per iteration. Plain guidance conditions every step
//! on the interpolated embedding; iterative guidance alternates between
//! the optimized object embedding (even iterations, starting with the
//! first) and the interpolated one (odd iterations).

use crate::backend::DenoiserModel;
use crate::error::{Error, Result};
use crate::rng::StageRng;
use crate::types::{GuidanceMode, Latent, SampleMethod, TextEmbedding, Timestep};

/// What the alternation pattern keys on. `Iteration` flips on the 0-based
/// loop index; `RawTimestep` flips on the parity of the timestep value
/// itself, which is only distinguishable when the sub-schedule mixes
/// parities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParityBasis {
    #[default]
    Iteration,
    RawTimestep,
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub steps: usize,
    pub method: SampleMethod,
    pub guidance: GuidanceMode,
    pub parity: ParityBasis,
    pub seed: u64,
    /// Keep every intermediate state, highest t first.
    pub record_trajectory: bool,
}

impl SamplerConfig {
    pub fn new(steps: usize, method: SampleMethod, guidance: GuidanceMode, seed: u64) -> Self {
        Self {
            steps,
            method,
            guidance,
            parity: ParityBasis::Iteration,
            seed,
            record_trajectory: false,
        }
    }
}

pub struct SampleOutput {
    pub latent: Latent,
    pub trajectory: Option<Vec<Latent>>,
    pub draw_count: u64,
}

/// Evenly spaced timesteps from T down to 1 inclusive.
pub fn sub_schedule(t_max: u32, steps: usize) -> Result<Vec<u32>> {
    if steps < 1 {
        return Err(Error::Range("sample steps must be >= 1".into()));
    }
    if steps as u32 > t_max {
        return Err(Error::Range(format!(
            "sample steps {steps} exceeds schedule length {t_max}"
        )));
    }
    if steps == 1 {
        return Ok(vec![t_max]);
    }
    let mut ts = Vec::with_capacity(steps);
    for i in 0..steps {
        let f = t_max as f64 - i as f64 * (t_max as f64 - 1.0) / (steps as f64 - 1.0);
        let t = f.round() as u32;
        // Guard against rounding collisions on short schedules.
        let t = match ts.last() {
            Some(&prev) if t >= prev => prev - 1,
            _ => t,
        };
        ts.push(t.max(1));
    }
    debug_assert_eq!(*ts.last().unwrap(), 1);
    Ok(ts)
}

/// Which embedding conditions each iteration, as references into the two
/// candidates. Plain guidance: always `e_opt`. Iterative guidance:
/// `e_a_hat` on even iterations, `e_opt` on odd ones.
pub fn condition_schedule<'a>(
    timesteps: &[u32],
    guidance: GuidanceMode,
    parity: ParityBasis,
    e_a_hat: &'a TextEmbedding,
    e_opt: &'a TextEmbedding,
) -> Vec<&'a TextEmbedding> {
    timesteps
        .iter()
        .enumerate()
        .map(|(i, &t)| match guidance {
            GuidanceMode::Plain => e_opt,
            GuidanceMode::Iterative => {
                let even = match parity {
                    ParityBasis::Iteration => i % 2 == 0,
                    ParityBasis::RawTimestep => t % 2 == 0,
                };
                if even {
                    e_a_hat
                } else {
                    e_opt
                }
            }
        })
        .collect()
}

/// Runs the reverse process from pure noise. The initial state and all
/// per-step noise are drawn before any conditioning decision, so plain
/// and iterative guidance at the same seed share them exactly.
pub fn sample(
    model: &DenoiserModel,
    e_a_hat: &TextEmbedding,
    e_opt: &TextEmbedding,
    config: &SamplerConfig,
) -> Result<SampleOutput> {
    let arch = model.arch();
    let (h, w, c) = (arch.latent_h, arch.latent_w, arch.latent_c);
    let n_elem = h * w * c;
    let schedule = model.schedule();
    let ts = sub_schedule(schedule.t_steps() as u32, config.steps)?;
    let conds = condition_schedule(&ts, config.guidance, config.parity, e_a_hat, e_opt);

    let mut rng = StageRng::new(config.seed, "sample");
    let mut x = rng.normal_vec(n_elem);
    // Ancestral transition noise, one vector per non-final iteration,
    // drawn up front regardless of method so draw counts stay comparable.
    let z_all: Vec<Vec<f64>> = (0..ts.len().saturating_sub(1))
        .map(|_| rng.normal_vec(n_elem))
        .collect();

    let mut trajectory = config.record_trajectory.then(Vec::new);

    for (i, (&t, cond)) in ts.iter().zip(&conds).enumerate() {
        let ab_t = schedule.alpha_bar(t)?;
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let ab_prev = if t_prev == 0 { 1.0 } else { schedule.alpha_bar(t_prev)? };

        let (eps, _) = model.forward_planar(&x, t, cond.data());
        let x0_pred: Vec<f64> = x
            .iter()
            .zip(&eps)
            .map(|(xt, e)| (xt - (1.0 - ab_t).sqrt() * e) / ab_t.sqrt())
            .collect();

        let sigma = match config.method {
            SampleMethod::DeterministicDdim => 0.0,
            SampleMethod::Ancestral => {
                if t_prev == 0 {
                    0.0
                } else {
                    ((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)).sqrt()
                }
            }
        };
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        for j in 0..n_elem {
            x[j] = ab_prev.sqrt() * x0_pred[j] + dir * eps[j];
        }
        if sigma > 0.0 {
            let z = &z_all[i];
            for j in 0..n_elem {
                x[j] += sigma * z[j];
            }
        }
        for v in &x {
            if !v.is_finite() {
                return Err(Error::Sampling {
                    step: i,
                    reason: format!("non-finite state after step at t={t}"),
                });
            }
        }
        if let Some(tr) = trajectory.as_mut() {
            let step = if t_prev == 0 { Timestep::Clean } else { Timestep::Step(t_prev) };
            tr.push(Latent::new(x.clone(), h, w, c, step)?);
        }
    }

    Ok(SampleOutput {
        latent: Latent::new(x, h, w, c, Timestep::Clean)?,
        trajectory,
        draw_count: rng.draw_count(),
    })
}
