//! Small text-conditioned UNet noise predictor.
//!
//! Three resolution levels (32 -> 16 -> 8), sinusoidal time embedding
//! injected as per-channel biases, and token cross-attention at the 8x8
//! bottleneck so conditioning consumes the full C×N token matrix. All
//! parameters live in one flat f64 vector described by [`Layout`]; the
//! backward pass produces a flat gradient of the same length plus the
//! gradient with respect to the conditioning matrix.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::nn;
use crate::rng::StageRng;

/// Architecture hyperparameters. `base_width` 32 is the production setting;
/// 8 gives the probe model used by gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub base_width: usize,
    pub token_capacity: usize,
    pub embed_dim: usize,
    pub time_dim: usize,
    pub attn_dim: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    pub latent_c: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            base_width: 32,
            token_capacity: 10,
            embed_dim: 32,
            time_dim: 32,
            attn_dim: 32,
            latent_h: 32,
            latent_w: 32,
            latent_c: 3,
        }
    }
}

impl Arch {
    pub fn probe() -> Self {
        Self {
            base_width: 8,
            ..Self::default()
        }
    }

    pub fn channels(&self) -> (usize, usize, usize) {
        let w = self.base_width;
        (w, w * 3 / 2, w * 2)
    }
}

/// Named ranges into the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Layout {
    pub temb_w1: Range<usize>,
    pub temb_b1: Range<usize>,
    pub temb_w2: Range<usize>,
    pub temb_b2: Range<usize>,
    pub enc1_w: Range<usize>,
    pub enc1_b: Range<usize>,
    pub enc1_t_w: Range<usize>,
    pub enc1_t_b: Range<usize>,
    pub enc2_w: Range<usize>,
    pub enc2_b: Range<usize>,
    pub enc2_t_w: Range<usize>,
    pub enc2_t_b: Range<usize>,
    pub mid_w: Range<usize>,
    pub mid_b: Range<usize>,
    pub mid_t_w: Range<usize>,
    pub mid_t_b: Range<usize>,
    pub attn_wq: Range<usize>,
    pub attn_wk: Range<usize>,
    pub attn_wv: Range<usize>,
    pub attn_wo: Range<usize>,
    pub mid2_w: Range<usize>,
    pub mid2_b: Range<usize>,
    pub skip2_w: Range<usize>,
    pub skip2_b: Range<usize>,
    pub dec2_w: Range<usize>,
    pub dec2_b: Range<usize>,
    pub dec2_t_w: Range<usize>,
    pub dec2_t_b: Range<usize>,
    pub skip1_w: Range<usize>,
    pub skip1_b: Range<usize>,
    pub out_w: Range<usize>,
    pub out_b: Range<usize>,
    /// Token embedding table, |vocab| x N. This is the text-encoder side.
    pub embed: Range<usize>,
    pub total: usize,
}

impl Layout {
    pub fn new(arch: &Arch, vocab_len: usize) -> Self {
        let (c1, c2, c3) = arch.channels();
        let (td, n, dk, lc) = (arch.time_dim, arch.embed_dim, arch.attn_dim, arch.latent_c);
        let mut at = 0usize;
        let mut seg = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        Self {
            temb_w1: seg(td * td),
            temb_b1: seg(td),
            temb_w2: seg(td * td),
            temb_b2: seg(td),
            enc1_w: seg(c1 * lc * 9),
            enc1_b: seg(c1),
            enc1_t_w: seg(td * c1),
            enc1_t_b: seg(c1),
            enc2_w: seg(c2 * c1 * 9),
            enc2_b: seg(c2),
            enc2_t_w: seg(td * c2),
            enc2_t_b: seg(c2),
            mid_w: seg(c3 * c2 * 9),
            mid_b: seg(c3),
            mid_t_w: seg(td * c3),
            mid_t_b: seg(c3),
            attn_wq: seg(c3 * dk),
            attn_wk: seg(n * dk),
            attn_wv: seg(n * c3),
            attn_wo: seg(c3 * c3),
            mid2_w: seg(c3 * c3 * 9),
            mid2_b: seg(c3),
            skip2_w: seg(c2 * c3),
            skip2_b: seg(c2),
            dec2_w: seg(c2 * c2 * 9),
            dec2_b: seg(c2),
            dec2_t_w: seg(td * c2),
            dec2_t_b: seg(c2),
            skip1_w: seg(c1 * c2),
            skip1_b: seg(c1),
            out_w: seg(lc * c1 * 9),
            out_b: seg(lc),
            embed: seg(vocab_len * n),
            total: at,
        }
    }

    /// Range covering the denoiser parameters (everything except the token
    /// embedding table).
    pub fn theta(&self) -> Range<usize> {
        0..self.embed.start
    }
}

/// Initializes parameters: He-scaled weights, zero biases, zeroed final
/// conv so the untrained model predicts zero noise.
pub fn init_params(arch: &Arch, vocab_len: usize, seed: u64) -> Vec<f64> {
    let layout = Layout::new(arch, vocab_len);
    let (c1, c2, c3) = arch.channels();
    let mut p = vec![0.0; layout.total];
    let mut rng = StageRng::new(seed, "init");
    let mut fill = |r: &Range<usize>, fan_in: usize, p: &mut Vec<f64>| {
        let scale = (2.0 / fan_in as f64).sqrt();
        for v in &mut p[r.clone()] {
            *v = rng.normal() * scale;
        }
    };
    let td = arch.time_dim;
    fill(&layout.temb_w1, td, &mut p);
    fill(&layout.temb_w2, td, &mut p);
    fill(&layout.enc1_w, arch.latent_c * 9, &mut p);
    fill(&layout.enc1_t_w, td, &mut p);
    fill(&layout.enc2_w, c1 * 9, &mut p);
    fill(&layout.enc2_t_w, td, &mut p);
    fill(&layout.mid_w, c2 * 9, &mut p);
    fill(&layout.mid_t_w, td, &mut p);
    fill(&layout.attn_wq, c3, &mut p);
    fill(&layout.attn_wk, arch.embed_dim, &mut p);
    fill(&layout.attn_wv, arch.embed_dim, &mut p);
    fill(&layout.attn_wo, c3, &mut p);
    fill(&layout.mid2_w, c3 * 9, &mut p);
    fill(&layout.skip2_w, c3, &mut p);
    fill(&layout.dec2_w, c2 * 9, &mut p);
    fill(&layout.skip1_w, c2, &mut p);
    // out_w, out_b stay zero.
    for v in &mut p[layout.embed.clone()] {
        *v = rng.normal() * 0.5;
    }
    p
}

/// Intermediate activations kept for the backward pass.
pub struct UnetCache {
    x: Vec<f64>,
    embed: Vec<f64>,
    tf: Vec<f64>,
    t1_pre: Vec<f64>,
    t1: Vec<f64>,
    t2_pre: Vec<f64>,
    temb: Vec<f64>,
    a1_pre: Vec<f64>,
    d1: Vec<f64>,
    a2_pre: Vec<f64>,
    d2: Vec<f64>,
    a3_pre: Vec<f64>,
    a3t: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    attn_out: Vec<f64>,
    h4: Vec<f64>,
    a5_pre: Vec<f64>,
    u2: Vec<f64>,
    s2_pre: Vec<f64>,
    s2: Vec<f64>,
    a6_pre: Vec<f64>,
    u1: Vec<f64>,
    s1_pre: Vec<f64>,
    s1: Vec<f64>,
}

/// Gradients produced by one backward pass.
pub struct UnetGrads {
    /// Flat gradient aligned with the parameter vector.
    pub params: Vec<f64>,
    /// Gradient with respect to the conditioning matrix, C×N.
    pub embed: Vec<f64>,
}

/// Pure forward/backward over a parameter vector. The caller owns the
/// parameters (see `DenoiserModel` in the parent module).
pub fn forward(
    arch: &Arch,
    layout: &Layout,
    params: &[f64],
    x: &[f64],
    t: u32,
    embed: &[f64],
) -> (Vec<f64>, UnetCache) {
    let (c1, c2, c3) = arch.channels();
    let (h, w, lc) = (arch.latent_h, arch.latent_w, arch.latent_c);
    let (h2, w2) = (h / 2, w / 2);
    let (h3, w3) = (h / 4, w / 4);
    let p3 = h3 * w3;
    let (td, n, dk, cap) = (arch.time_dim, arch.embed_dim, arch.attn_dim, arch.token_capacity);
    debug_assert_eq!(x.len(), lc * h * w);
    debug_assert_eq!(embed.len(), cap * n);
    let g = |r: &Range<usize>| &params[r.clone()];

    // Time embedding MLP.
    let mut tf = vec![0.0; td];
    nn::time_features(t, td, &mut tf);
    let mut t1_pre = vec![0.0; td];
    nn::linear_fwd(&tf, 1, td, g(&layout.temb_w1), Some(g(&layout.temb_b1)), td, &mut t1_pre);
    let mut t1 = vec![0.0; td];
    nn::silu_fwd(&t1_pre, &mut t1);
    let mut t2_pre = vec![0.0; td];
    nn::linear_fwd(&t1, 1, td, g(&layout.temb_w2), Some(g(&layout.temb_b2)), td, &mut t2_pre);
    let mut temb = vec![0.0; td];
    nn::silu_fwd(&t2_pre, &mut temb);

    let add_time_bias = |pre: &mut [f64], tw: &[f64], tb: &[f64], c: usize, hw: usize| {
        let mut bias = vec![0.0; c];
        nn::linear_fwd(&temb, 1, td, tw, Some(tb), c, &mut bias);
        for (ch, b) in bias.iter().enumerate() {
            for v in &mut pre[ch * hw..(ch + 1) * hw] {
                *v += b;
            }
        }
    };

    // Encoder level 1 (full resolution).
    let mut a1_pre = vec![0.0; c1 * h * w];
    nn::conv3x3_fwd(x, lc, h, w, g(&layout.enc1_w), g(&layout.enc1_b), c1, &mut a1_pre);
    add_time_bias(&mut a1_pre, g(&layout.enc1_t_w), g(&layout.enc1_t_b), c1, h * w);
    let mut a1 = vec![0.0; c1 * h * w];
    nn::silu_fwd(&a1_pre, &mut a1);
    let mut d1 = vec![0.0; c1 * h2 * w2];
    nn::avgpool2_fwd(&a1, c1, h, w, &mut d1);

    // Encoder level 2 (half resolution).
    let mut a2_pre = vec![0.0; c2 * h2 * w2];
    nn::conv3x3_fwd(&d1, c1, h2, w2, g(&layout.enc2_w), g(&layout.enc2_b), c2, &mut a2_pre);
    add_time_bias(&mut a2_pre, g(&layout.enc2_t_w), g(&layout.enc2_t_b), c2, h2 * w2);
    let mut a2 = vec![0.0; c2 * h2 * w2];
    nn::silu_fwd(&a2_pre, &mut a2);
    let mut d2 = vec![0.0; c2 * h3 * w3];
    nn::avgpool2_fwd(&a2, c2, h2, w2, &mut d2);

    // Bottleneck conv.
    let mut a3_pre = vec![0.0; c3 * p3];
    nn::conv3x3_fwd(&d2, c2, h3, w3, g(&layout.mid_w), g(&layout.mid_b), c3, &mut a3_pre);
    add_time_bias(&mut a3_pre, g(&layout.mid_t_w), g(&layout.mid_t_b), c3, p3);
    let mut a3 = vec![0.0; c3 * p3];
    nn::silu_fwd(&a3_pre, &mut a3);

    // Cross-attention: queries from spatial positions, keys/values from the
    // token matrix.
    let mut a3t = vec![0.0; p3 * c3];
    for c in 0..c3 {
        for p in 0..p3 {
            a3t[p * c3 + c] = a3[c * p3 + p];
        }
    }
    let mut q = vec![0.0; p3 * dk];
    nn::linear_fwd(&a3t, p3, c3, g(&layout.attn_wq), None, dk, &mut q);
    let mut k = vec![0.0; cap * dk];
    nn::linear_fwd(embed, cap, n, g(&layout.attn_wk), None, dk, &mut k);
    let mut v = vec![0.0; cap * c3];
    nn::linear_fwd(embed, cap, n, g(&layout.attn_wv), None, c3, &mut v);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut attn = vec![0.0; p3 * cap];
    for p in 0..p3 {
        for c in 0..cap {
            let mut s = 0.0;
            for j in 0..dk {
                s += q[p * dk + j] * k[c * dk + j];
            }
            attn[p * cap + c] = s * scale;
        }
    }
    nn::softmax_rows(&mut attn, p3, cap);
    let mut attn_v = vec![0.0; p3 * c3];
    nn::linear_fwd(&attn, p3, cap, &v, None, c3, &mut attn_v);
    let mut attn_out = vec![0.0; p3 * c3];
    nn::linear_fwd(&attn_v, p3, c3, g(&layout.attn_wo), None, c3, &mut attn_out);
    let mut h4 = a3.clone();
    for c in 0..c3 {
        for p in 0..p3 {
            h4[c * p3 + p] += attn_out[p * c3 + c];
        }
    }

    // Second bottleneck conv.
    let mut a5_pre = vec![0.0; c3 * p3];
    nn::conv3x3_fwd(&h4, c3, h3, w3, g(&layout.mid2_w), g(&layout.mid2_b), c3, &mut a5_pre);
    let mut a5 = vec![0.0; c3 * p3];
    nn::silu_fwd(&a5_pre, &mut a5);

    // Decoder level 2 with skip from a2.
    let mut u2 = vec![0.0; c3 * h2 * w2];
    nn::upsample2_fwd(&a5, c3, h3, w3, &mut u2);
    let mut s2_pre = vec![0.0; c2 * h2 * w2];
    nn::conv1x1_fwd(&u2, c3, h2 * w2, g(&layout.skip2_w), g(&layout.skip2_b), c2, &mut s2_pre);
    for (sv, av) in s2_pre.iter_mut().zip(&a2) {
        *sv += av;
    }
    let mut s2 = vec![0.0; c2 * h2 * w2];
    nn::silu_fwd(&s2_pre, &mut s2);
    let mut a6_pre = vec![0.0; c2 * h2 * w2];
    nn::conv3x3_fwd(&s2, c2, h2, w2, g(&layout.dec2_w), g(&layout.dec2_b), c2, &mut a6_pre);
    add_time_bias(&mut a6_pre, g(&layout.dec2_t_w), g(&layout.dec2_t_b), c2, h2 * w2);
    let mut a6 = vec![0.0; c2 * h2 * w2];
    nn::silu_fwd(&a6_pre, &mut a6);

    // Decoder level 1 with skip from a1.
    let mut u1 = vec![0.0; c2 * h * w];
    nn::upsample2_fwd(&a6, c2, h2, w2, &mut u1);
    let mut s1_pre = vec![0.0; c1 * h * w];
    nn::conv1x1_fwd(&u1, c2, h * w, g(&layout.skip1_w), g(&layout.skip1_b), c1, &mut s1_pre);
    for (sv, av) in s1_pre.iter_mut().zip(&a1) {
        *sv += av;
    }
    let mut s1 = vec![0.0; c1 * h * w];
    nn::silu_fwd(&s1_pre, &mut s1);
    let mut out = vec![0.0; lc * h * w];
    nn::conv3x3_fwd(&s1, c1, h, w, g(&layout.out_w), g(&layout.out_b), lc, &mut out);

    let cache = UnetCache {
        x: x.to_vec(),
        embed: embed.to_vec(),
        tf,
        t1_pre,
        t1,
        t2_pre,
        temb,
        a1_pre,
        d1,
        a2_pre,
        d2,
        a3_pre,
        a3t,
        q,
        k,
        v,
        attn,
        attn_out: attn_v,
        h4,
        a5_pre,
        u2,
        s2_pre,
        s2,
        a6_pre,
        u1,
        s1_pre,
        s1,
    };
    (out, cache)
}

pub fn backward(
    arch: &Arch,
    layout: &Layout,
    params: &[f64],
    cache: &UnetCache,
    d_out: &[f64],
) -> UnetGrads {
    let (c1, c2, c3) = arch.channels();
    let (h, w, lc) = (arch.latent_h, arch.latent_w, arch.latent_c);
    let (h2, w2) = (h / 2, w / 2);
    let (h3, w3) = (h / 4, w / 4);
    let p3 = h3 * w3;
    let (td, n, dk, cap) = (arch.time_dim, arch.embed_dim, arch.attn_dim, arch.token_capacity);
    let g = |r: &Range<usize>| &params[r.clone()];

    let mut dp = vec![0.0; layout.total];
    let mut d_embed = vec![0.0; cap * n];
    let mut d_temb = vec![0.0; td];

    // Output conv.
    let mut d_s1 = vec![0.0; c1 * h * w];
    {
        let (head, tail) = dp.split_at_mut(layout.out_b.start);
        nn::conv3x3_bwd(
            &cache.s1,
            c1,
            h,
            w,
            g(&layout.out_w),
            lc,
            d_out,
            &mut d_s1,
            &mut head[layout.out_w.clone()],
            &mut tail[..layout.out_b.len()],
        );
    }

    // s1 = silu(conv1x1(u1) + a1).
    let mut d_s1_pre = vec![0.0; c1 * h * w];
    nn::silu_bwd(&cache.s1_pre, &d_s1, &mut d_s1_pre);
    let mut d_a1 = d_s1_pre.clone();
    let mut d_u1 = vec![0.0; c2 * h * w];
    {
        let (head, tail) = dp.split_at_mut(layout.skip1_b.start);
        nn::conv1x1_bwd(
            &cache.u1,
            c2,
            h * w,
            g(&layout.skip1_w),
            c1,
            &d_s1_pre,
            &mut d_u1,
            &mut head[layout.skip1_w.clone()],
            &mut tail[..layout.skip1_b.len()],
        );
    }
    let mut d_a6 = vec![0.0; c2 * h2 * w2];
    nn::upsample2_bwd(c2, h2, w2, &d_u1, &mut d_a6);

    // a6 = silu(conv3x3(s2) + time bias).
    let mut d_a6_pre = vec![0.0; c2 * h2 * w2];
    nn::silu_bwd(&cache.a6_pre, &d_a6, &mut d_a6_pre);
    time_bias_bwd(
        &d_a6_pre,
        c2,
        h2 * w2,
        &cache.temb,
        td,
        g(&layout.dec2_t_w),
        &mut dp,
        &layout.dec2_t_w,
        &layout.dec2_t_b,
        &mut d_temb,
    );
    let mut d_s2 = vec![0.0; c2 * h2 * w2];
    {
        let (head, tail) = dp.split_at_mut(layout.dec2_b.start);
        nn::conv3x3_bwd(
            &cache.s2,
            c2,
            h2,
            w2,
            g(&layout.dec2_w),
            c2,
            &d_a6_pre,
            &mut d_s2,
            &mut head[layout.dec2_w.clone()],
            &mut tail[..layout.dec2_b.len()],
        );
    }

    // s2 = silu(conv1x1(u2) + a2).
    let mut d_s2_pre = vec![0.0; c2 * h2 * w2];
    nn::silu_bwd(&cache.s2_pre, &d_s2, &mut d_s2_pre);
    let mut d_a2 = d_s2_pre.clone();
    let mut d_u2 = vec![0.0; c3 * h2 * w2];
    {
        let (head, tail) = dp.split_at_mut(layout.skip2_b.start);
        nn::conv1x1_bwd(
            &cache.u2,
            c3,
            h2 * w2,
            g(&layout.skip2_w),
            c2,
            &d_s2_pre,
            &mut d_u2,
            &mut head[layout.skip2_w.clone()],
            &mut tail[..layout.skip2_b.len()],
        );
    }
    let mut d_a5 = vec![0.0; c3 * p3];
    nn::upsample2_bwd(c3, h3, w3, &d_u2, &mut d_a5);

    // a5 = silu(conv3x3(h4)).
    let mut d_a5_pre = vec![0.0; c3 * p3];
    nn::silu_bwd(&cache.a5_pre, &d_a5, &mut d_a5_pre);
    let mut d_h4 = vec![0.0; c3 * p3];
    {
        let (head, tail) = dp.split_at_mut(layout.mid2_b.start);
        nn::conv3x3_bwd(
            &cache.h4,
            c3,
            h3,
            w3,
            g(&layout.mid2_w),
            c3,
            &d_a5_pre,
            &mut d_h4,
            &mut head[layout.mid2_w.clone()],
            &mut tail[..layout.mid2_b.len()],
        );
    }

    // h4 = a3 + attn_out^T (residual).
    let mut d_a3 = d_h4.clone();
    let mut d_attn_proj = vec![0.0; p3 * c3];
    for c in 0..c3 {
        for p in 0..p3 {
            d_attn_proj[p * c3 + c] = d_h4[c * p3 + p];
        }
    }
    // attn projection: out = attn_v * Wo.
    let mut d_attn_v = vec![0.0; p3 * c3];
    {
        let mut d_wo = vec![0.0; layout.attn_wo.len()];
        nn::linear_bwd(
            &cache.attn_out,
            p3,
            c3,
            g(&layout.attn_wo),
            c3,
            &d_attn_proj,
            &mut d_attn_v,
            &mut d_wo,
            None,
        );
        dp[layout.attn_wo.clone()].copy_from_slice(&d_wo);
    }
    // attn_v = attn * V.
    let mut d_attn = vec![0.0; p3 * cap];
    let mut d_v = vec![0.0; cap * c3];
    nn::linear_bwd(
        &cache.attn,
        p3,
        cap,
        &cache.v,
        c3,
        &d_attn_v,
        &mut d_attn,
        &mut d_v,
        None,
    );
    // Softmax.
    let mut d_scores = vec![0.0; p3 * cap];
    nn::softmax_rows_bwd(&cache.attn, p3, cap, &d_attn, &mut d_scores);
    // scores = Q K^T / sqrt(dk).
    let scale = 1.0 / (dk as f64).sqrt();
    let mut d_q = vec![0.0; p3 * dk];
    let mut d_k = vec![0.0; cap * dk];
    for p in 0..p3 {
        for c in 0..cap {
            let gsc = d_scores[p * cap + c] * scale;
            if gsc == 0.0 {
                continue;
            }
            for j in 0..dk {
                d_q[p * dk + j] += gsc * cache.k[c * dk + j];
                d_k[c * dk + j] += gsc * cache.q[p * dk + j];
            }
        }
    }
    // Q = a3t Wq; K = E Wk; V = E Wv.
    let mut d_a3t = vec![0.0; p3 * c3];
    {
        let mut d_wq = vec![0.0; layout.attn_wq.len()];
        nn::linear_bwd(&cache.a3t, p3, c3, g(&layout.attn_wq), dk, &d_q, &mut d_a3t, &mut d_wq, None);
        dp[layout.attn_wq.clone()].copy_from_slice(&d_wq);
    }
    {
        let mut d_wk = vec![0.0; layout.attn_wk.len()];
        nn::linear_bwd(&cache.embed, cap, n, g(&layout.attn_wk), dk, &d_k, &mut d_embed, &mut d_wk, None);
        dp[layout.attn_wk.clone()].copy_from_slice(&d_wk);
    }
    {
        let mut d_wv = vec![0.0; layout.attn_wv.len()];
        nn::linear_bwd(&cache.embed, cap, n, g(&layout.attn_wv), c3, &d_v, &mut d_embed, &mut d_wv, None);
        dp[layout.attn_wv.clone()].copy_from_slice(&d_wv);
    }
    for c in 0..c3 {
        for p in 0..p3 {
            d_a3[c * p3 + p] += d_a3t[p * c3 + c];
        }
    }

    // a3 = silu(conv3x3(d2) + time bias).
    let mut d_a3_pre = vec![0.0; c3 * p3];
    nn::silu_bwd(&cache.a3_pre, &d_a3, &mut d_a3_pre);
    time_bias_bwd(
        &d_a3_pre,
        c3,
        p3,
        &cache.temb,
        td,
        g(&layout.mid_t_w),
        &mut dp,
        &layout.mid_t_w,
        &layout.mid_t_b,
        &mut d_temb,
    );
    let mut d_d2 = vec![0.0; c2 * p3];
    {
        let (head, tail) = dp.split_at_mut(layout.mid_b.start);
        nn::conv3x3_bwd(
            &cache.d2,
            c2,
            h3,
            w3,
            g(&layout.mid_w),
            c3,
            &d_a3_pre,
            &mut d_d2,
            &mut head[layout.mid_w.clone()],
            &mut tail[..layout.mid_b.len()],
        );
    }
    nn::avgpool2_bwd(c2, h2, w2, &d_d2, &mut d_a2);

    // a2 = silu(conv3x3(d1) + time bias).
    let mut d_a2_pre = vec![0.0; c2 * h2 * w2];
    nn::silu_bwd(&cache.a2_pre, &d_a2, &mut d_a2_pre);
    time_bias_bwd(
        &d_a2_pre,
        c2,
        h2 * w2,
        &cache.temb,
        td,
        g(&layout.enc2_t_w),
        &mut dp,
        &layout.enc2_t_w,
        &layout.enc2_t_b,
        &mut d_temb,
    );
    let mut d_d1 = vec![0.0; c1 * h2 * w2];
    {
        let (head, tail) = dp.split_at_mut(layout.enc2_b.start);
        nn::conv3x3_bwd(
            &cache.d1,
            c1,
            h2,
            w2,
            g(&layout.enc2_w),
            c2,
            &d_a2_pre,
            &mut d_d1,
            &mut head[layout.enc2_w.clone()],
            &mut tail[..layout.enc2_b.len()],
        );
    }
    nn::avgpool2_bwd(c1, h, w, &d_d1, &mut d_a1);

    // a1 = silu(conv3x3(x) + time bias).
    let mut d_a1_pre = vec![0.0; c1 * h * w];
    nn::silu_bwd(&cache.a1_pre, &d_a1, &mut d_a1_pre);
    time_bias_bwd(
        &d_a1_pre,
        c1,
        h * w,
        &cache.temb,
        td,
        g(&layout.enc1_t_w),
        &mut dp,
        &layout.enc1_t_w,
        &layout.enc1_t_b,
        &mut d_temb,
    );
    let mut d_x = vec![0.0; lc * h * w];
    {
        let (head, tail) = dp.split_at_mut(layout.enc1_b.start);
        nn::conv3x3_bwd(
            &cache.x,
            lc,
            h,
            w,
            g(&layout.enc1_w),
            c1,
            &d_a1_pre,
            &mut d_x,
            &mut head[layout.enc1_w.clone()],
            &mut tail[..layout.enc1_b.len()],
        );
    }

    // Time-embedding MLP.
    let mut d_t2_pre = vec![0.0; td];
    nn::silu_bwd(&cache.t2_pre, &d_temb, &mut d_t2_pre);
    let mut d_t1 = vec![0.0; td];
    {
        let (head, tail) = dp.split_at_mut(layout.temb_b2.start);
        nn::linear_bwd(
            &cache.t1,
            1,
            td,
            g(&layout.temb_w2),
            td,
            &d_t2_pre,
            &mut d_t1,
            &mut head[layout.temb_w2.clone()],
            Some(&mut tail[..layout.temb_b2.len()]),
        );
    }
    let mut d_t1_pre = vec![0.0; td];
    nn::silu_bwd(&cache.t1_pre, &d_t1, &mut d_t1_pre);
    let mut d_tf = vec![0.0; td];
    {
        let (head, tail) = dp.split_at_mut(layout.temb_b1.start);
        nn::linear_bwd(
            &cache.tf,
            1,
            td,
            g(&layout.temb_w1),
            td,
            &d_t1_pre,
            &mut d_tf,
            &mut head[layout.temb_w1.clone()],
            Some(&mut tail[..layout.temb_b1.len()]),
        );
    }

    UnetGrads {
        params: dp,
        embed: d_embed,
    }
}

/// Backward of the per-channel time bias: bias = temb * W + b broadcast over
/// the plane. Accumulates weight/bias gradients and the running d_temb.
#[allow(clippy::too_many_arguments)]
fn time_bias_bwd(
    d_pre: &[f64],
    c: usize,
    hw: usize,
    temb: &[f64],
    td: usize,
    t_w: &[f64],
    dp: &mut [f64],
    w_range: &Range<usize>,
    b_range: &Range<usize>,
    d_temb: &mut [f64],
) {
    let mut d_bias = vec![0.0; c];
    for (ch, db) in d_bias.iter_mut().enumerate() {
        *db = d_pre[ch * hw..(ch + 1) * hw].iter().sum();
    }
    let mut d_temb_local = vec![0.0; td];
    let mut d_w = vec![0.0; td * c];
    let mut d_b = vec![0.0; c];
    nn::linear_bwd(temb, 1, td, t_w, c, &d_bias, &mut d_temb_local, &mut d_w, Some(&mut d_b));
    for (a, b) in d_temb.iter_mut().zip(&d_temb_local) {
        *a += b;
    }
    for (i, v) in d_w.iter().enumerate() {
        dp[w_range.start + i] += v;
    }
    for (i, v) in d_b.iter().enumerate() {
        dp[b_range.start + i] += v;
    }
}
