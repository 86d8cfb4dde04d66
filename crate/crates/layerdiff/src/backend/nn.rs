//! Neural-net primitives with hand-written backward passes.
//!
//! Feature maps are planar `[channel][y][x]` f64 slices. All accumulation is
//! sequential and in fixed order, so forward and backward are bit-identical
//! run to run.

/// out[oc] = bias-initialized plane + sum_ic conv3x3(in[ic]), zero padding.
/// Weights are laid out [co][ci][ky][kx].
pub fn conv3x3_fwd(
    inp: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    wgt: &[f64],
    bias: &[f64],
    co: usize,
    out: &mut [f64],
) {
    let hw = h * w;
    debug_assert_eq!(inp.len(), ci * hw);
    debug_assert_eq!(out.len(), co * hw);
    debug_assert_eq!(wgt.len(), co * ci * 9);
    for oc in 0..co {
        let out_plane = &mut out[oc * hw..(oc + 1) * hw];
        out_plane.fill(bias[oc]);
        for ic in 0..ci {
            let in_plane = &inp[ic * hw..(ic + 1) * hw];
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                for kx in 0..3usize {
                    let dx = kx as isize - 1;
                    let wv = wgt[((oc * ci + ic) * 3 + ky) * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let y0 = if dy < 0 { 1 } else { 0 };
                    let y1 = if dy > 0 { h - 1 } else { h };
                    let x0 = if dx < 0 { 1 } else { 0 };
                    let x1 = if dx > 0 { w - 1 } else { w };
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let o = &mut out_plane[y * w + x0..y * w + x1];
                        let iv = &in_plane[(iy * w) as usize + ((x0 as isize + dx) as usize)
                            ..iy * w + ((x1 as isize + dx) as usize)];
                        for (a, b) in o.iter_mut().zip(iv) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
}

/// Backward of [`conv3x3_fwd`]: accumulates into d_inp, d_wgt, d_bias.
pub fn conv3x3_bwd(
    inp: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    wgt: &[f64],
    co: usize,
    d_out: &[f64],
    d_inp: &mut [f64],
    d_wgt: &mut [f64],
    d_bias: &mut [f64],
) {
    let hw = h * w;
    for oc in 0..co {
        let dout_plane = &d_out[oc * hw..(oc + 1) * hw];
        d_bias[oc] += dout_plane.iter().sum::<f64>();
        for ic in 0..ci {
            let in_plane = &inp[ic * hw..(ic + 1) * hw];
            let din_plane = &mut d_inp[ic * hw..(ic + 1) * hw];
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                for kx in 0..3usize {
                    let dx = kx as isize - 1;
                    let widx = ((oc * ci + ic) * 3 + ky) * 3 + kx;
                    let wv = wgt[widx];
                    let y0 = if dy < 0 { 1 } else { 0 };
                    let y1 = if dy > 0 { h - 1 } else { h };
                    let x0 = if dx < 0 { 1 } else { 0 };
                    let x1 = if dx > 0 { w - 1 } else { w };
                    let mut wsum = 0.0;
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let dout_row = &dout_plane[y * w + x0..y * w + x1];
                        let in_row = &in_plane
                            [iy * w + ((x0 as isize + dx) as usize)..iy * w + ((x1 as isize + dx) as usize)];
                        let din_row = &mut din_plane
                            [iy * w + ((x0 as isize + dx) as usize)..iy * w + ((x1 as isize + dx) as usize)];
                        for ((g, iv), di) in dout_row.iter().zip(in_row).zip(din_row) {
                            wsum += g * iv;
                            *di += wv * g;
                        }
                    }
                    d_wgt[widx] += wsum;
                }
            }
        }
    }
}

/// Pointwise channel mix: out[oc][p] = bias[oc] + sum_ic w[oc][ci] in[ic][p].
pub fn conv1x1_fwd(
    inp: &[f64],
    ci: usize,
    hw: usize,
    wgt: &[f64],
    bias: &[f64],
    co: usize,
    out: &mut [f64],
) {
    for oc in 0..co {
        let out_plane = &mut out[oc * hw..(oc + 1) * hw];
        out_plane.fill(bias[oc]);
        for ic in 0..ci {
            let wv = wgt[oc * ci + ic];
            let in_plane = &inp[ic * hw..(ic + 1) * hw];
            for (a, b) in out_plane.iter_mut().zip(in_plane) {
                *a += wv * b;
            }
        }
    }
}

pub fn conv1x1_bwd(
    inp: &[f64],
    ci: usize,
    hw: usize,
    wgt: &[f64],
    co: usize,
    d_out: &[f64],
    d_inp: &mut [f64],
    d_wgt: &mut [f64],
    d_bias: &mut [f64],
) {
    for oc in 0..co {
        let dout_plane = &d_out[oc * hw..(oc + 1) * hw];
        d_bias[oc] += dout_plane.iter().sum::<f64>();
        for ic in 0..ci {
            let wv = wgt[oc * ci + ic];
            let in_plane = &inp[ic * hw..(ic + 1) * hw];
            let din_plane = &mut d_inp[ic * hw..(ic + 1) * hw];
            let mut wsum = 0.0;
            for ((g, iv), di) in dout_plane.iter().zip(in_plane).zip(din_plane) {
                wsum += g * iv;
                *di += wv * g;
            }
            d_wgt[oc * ci + ic] += wsum;
        }
    }
}

/// y = x W + b with x: [rows][cols_in], W: [cols_in][cols_out].
pub fn linear_fwd(
    x: &[f64],
    rows: usize,
    cols_in: usize,
    wgt: &[f64],
    bias: Option<&[f64]>,
    cols_out: usize,
    out: &mut [f64],
) {
    for r in 0..rows {
        let xo = &x[r * cols_in..(r + 1) * cols_in];
        let o = &mut out[r * cols_out..(r + 1) * cols_out];
        match bias {
            Some(b) => o.copy_from_slice(b),
            None => o.fill(0.0),
        }
        for (i, xv) in xo.iter().enumerate() {
            if *xv == 0.0 {
                continue;
            }
            let wrow = &wgt[i * cols_out..(i + 1) * cols_out];
            for (a, wv) in o.iter_mut().zip(wrow) {
                *a += xv * wv;
            }
        }
    }
}

pub fn linear_bwd(
    x: &[f64],
    rows: usize,
    cols_in: usize,
    wgt: &[f64],
    cols_out: usize,
    d_out: &[f64],
    d_x: &mut [f64],
    d_wgt: &mut [f64],
    d_bias: Option<&mut [f64]>,
) {
    if let Some(db) = d_bias {
        for r in 0..rows {
            for (c, g) in d_out[r * cols_out..(r + 1) * cols_out].iter().enumerate() {
                db[c] += g;
            }
        }
    }
    for r in 0..rows {
        let go = &d_out[r * cols_out..(r + 1) * cols_out];
        let xo = &x[r * cols_in..(r + 1) * cols_in];
        let dxo = &mut d_x[r * cols_in..(r + 1) * cols_in];
        for i in 0..cols_in {
            let wrow = &wgt[i * cols_out..(i + 1) * cols_out];
            let dwrow = &mut d_wgt[i * cols_out..(i + 1) * cols_out];
            let xv = xo[i];
            let mut acc = 0.0;
            for ((g, wv), dw) in go.iter().zip(wrow).zip(dwrow) {
                acc += g * wv;
                *dw += g * xv;
            }
            dxo[i] += acc;
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SiLU activation applied in place; input values must be kept for backward.
pub fn silu_fwd(pre: &[f64], out: &mut [f64]) {
    for (o, x) in out.iter_mut().zip(pre) {
        *o = x * sigmoid(*x);
    }
}

/// d(silu)/dx = sigma(x) (1 + x (1 - sigma(x))).
pub fn silu_bwd(pre: &[f64], d_out: &[f64], d_pre: &mut [f64]) {
    for ((dp, x), g) in d_pre.iter_mut().zip(pre).zip(d_out) {
        let s = sigmoid(*x);
        *dp += g * s * (1.0 + x * (1.0 - s));
    }
}

/// 2x2 average pool, halving each spatial dimension.
pub fn avgpool2_fwd(inp: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        let ip = &inp[ch * h * w..(ch + 1) * h * w];
        let op = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let i = 2 * y * w + 2 * x;
                op[y * ow + x] = 0.25 * (ip[i] + ip[i + 1] + ip[i + w] + ip[i + w + 1]);
            }
        }
    }
}

pub fn avgpool2_bwd(c: usize, h: usize, w: usize, d_out: &[f64], d_inp: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        let gp = &d_out[ch * oh * ow..(ch + 1) * oh * ow];
        let dp = &mut d_inp[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * gp[y * ow + x];
                let i = 2 * y * w + 2 * x;
                dp[i] += g;
                dp[i + 1] += g;
                dp[i + w] += g;
                dp[i + w + 1] += g;
            }
        }
    }
}

/// Nearest-neighbor 2x upsample.
pub fn upsample2_fwd(inp: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let (oh, ow) = (h * 2, w * 2);
    for ch in 0..c {
        let ip = &inp[ch * h * w..(ch + 1) * h * w];
        let op = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..h {
            for x in 0..w {
                let v = ip[y * w + x];
                let i = 2 * y * ow + 2 * x;
                op[i] = v;
                op[i + 1] = v;
                op[i + ow] = v;
                op[i + ow + 1] = v;
            }
        }
    }
}

pub fn upsample2_bwd(c: usize, h: usize, w: usize, d_out: &[f64], d_inp: &mut [f64]) {
    let (oh, ow) = (h * 2, w * 2);
    for ch in 0..c {
        let gp = &d_out[ch * oh * ow..(ch + 1) * oh * ow];
        let dp = &mut d_inp[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * ow + 2 * x;
                dp[y * w + x] += gp[i] + gp[i + 1] + gp[i + ow] + gp[i + ow + 1];
            }
        }
    }
}

/// Row-wise softmax over an R×C matrix, in place.
pub fn softmax_rows(m: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut m[r * cols..(r + 1) * cols];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Backward through row-wise softmax: d_pre = s * (d_post - sum(d_post * s)).
pub fn softmax_rows_bwd(post: &[f64], rows: usize, cols: usize, d_post: &[f64], d_pre: &mut [f64]) {
    for r in 0..rows {
        let s = &post[r * cols..(r + 1) * cols];
        let g = &d_post[r * cols..(r + 1) * cols];
        let dot: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
        let d = &mut d_pre[r * cols..(r + 1) * cols];
        for i in 0..cols {
            d[i] += s[i] * (g[i] - dot);
        }
    }
}

/// Sinusoidal timestep features of even dimension `dim`.
pub fn time_features(t: u32, dim: usize, out: &mut [f64]) {
    let half = dim / 2;
    let t = t as f64;
    for i in 0..half {
        let freq = (-(10_000.0f64).ln() * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
}
