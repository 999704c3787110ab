//! Forward-mode (tangent) evaluation of dM/dalpha for per-neuron
//! attribution paths. Each copy perturbs one neuron's scale, so the tangent
//! seed at the hooked layer is rank-1 and the whole suffix propagates as
//! flat f32 arrays with no tape. One copy costs about one forward pass,
//! which is what makes the per-neuron oracle affordable.

use crate::error::{Error, Result};
use crate::model::{argmax_lowest, LayerFamily, LayerWeights, TransformerModel, RMS_EPS};
use crate::tensor::{matmul_raw, silu_scalar, Tape};

const CHUNK: usize = 256;

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

/// y = rmsnorm(x) * gain, with ty the matching tangent of t.
fn rms_norm_jvp(x: &[f32], t: &[f32], gain: &[f32], rows: usize, cols: usize) -> (Vec<f32>, Vec<f32>) {
    let mut y = vec![0.0f32; rows * cols];
    let mut ty = vec![0.0f32; rows * cols];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let tr = &t[r * cols..(r + 1) * cols];
        let ms: f64 = xr.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / cols as f64;
        let ir = (1.0 / (ms + RMS_EPS as f64).sqrt()) as f32;
        let dot: f64 = xr.iter().zip(tr).map(|(&a, &b)| a as f64 * b as f64).sum();
        let dir = -(ir as f64).powi(3) as f32 * (dot / cols as f64) as f32;
        for c in 0..cols {
            y[r * cols + c] = xr[c] * ir * gain[c];
            ty[r * cols + c] = gain[c] * (tr[c] * ir + xr[c] * dir);
        }
    }
    (y, ty)
}

/// Causal multi-head attention forward plus tangent, mirroring the fused op.
#[allow(clippy::too_many_arguments)]
fn attention_jvp(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    tq: &[f32],
    tk: &[f32],
    tv: &[f32],
    blocks: usize,
    seq: usize,
    n_heads: usize,
    d: usize,
) -> (Vec<f32>, Vec<f32>) {
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out = vec![0.0f32; blocks * seq * d];
    let mut tout = vec![0.0f32; blocks * seq * d];
    let mut scores = vec![0.0f32; seq];
    let mut dscores = vec![0.0f32; seq];
    let mut probs = vec![0.0f32; seq];
    for b in 0..blocks {
        let base = b * seq;
        for h in 0..n_heads {
            let hoff = h * dh;
            for i in 0..seq {
                let qrow = &q[(base + i) * d + hoff..(base + i) * d + hoff + dh];
                let tqrow = &tq[(base + i) * d + hoff..(base + i) * d + hoff + dh];
                for j in 0..=i {
                    let krow = &k[(base + j) * d + hoff..(base + j) * d + hoff + dh];
                    let tkrow = &tk[(base + j) * d + hoff..(base + j) * d + hoff + dh];
                    let mut s = 0.0f32;
                    let mut ds = 0.0f32;
                    for c in 0..dh {
                        s += qrow[c] * krow[c];
                        ds += tqrow[c] * krow[c] + qrow[c] * tkrow[c];
                    }
                    scores[j] = s * scale;
                    dscores[j] = ds * scale;
                }
                // softmax over the causal prefix, same max-shift as the op
                let mx = scores[..=i].iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f64;
                for j in 0..=i {
                    let e = (scores[j] - mx).exp();
                    probs[j] = e;
                    sum += e as f64;
                }
                let inv = (1.0 / sum) as f32;
                let mut pds = 0.0f32;
                for j in 0..=i {
                    probs[j] *= inv;
                    pds += probs[j] * dscores[j];
                }
                let orow = &mut out[(base + i) * d + hoff..(base + i) * d + hoff + dh];
                let trow = &mut tout[(base + i) * d + hoff..(base + i) * d + hoff + dh];
                for j in 0..=i {
                    let dp = probs[j] * (dscores[j] - pds);
                    let vrow = &v[(base + j) * d + hoff..(base + j) * d + hoff + dh];
                    let tvrow = &tv[(base + j) * d + hoff..(base + j) * d + hoff + dh];
                    for c in 0..dh {
                        orow[c] += probs[j] * vrow[c];
                        trow[c] += dp * vrow[c] + probs[j] * tvrow[c];
                    }
                }
            }
        }
    }
    (out, tout)
}

/// One transformer block over (x, t) in place.
fn layer_jvp(
    x: &mut Vec<f32>,
    t: &mut Vec<f32>,
    lw: &LayerWeights,
    mask: &[f32],
    blocks: usize,
    seq: usize,
    n_heads: usize,
    d: usize,
    dm: usize,
) {
    let rows = blocks * seq;
    let (xn, tn) = rms_norm_jvp(x, t, &lw.attn_norm.data, rows, d);
    let q = matmul_raw(&xn, &lw.wq.data, rows, d, d);
    let k = matmul_raw(&xn, &lw.wk.data, rows, d, d);
    let v = matmul_raw(&xn, &lw.wv.data, rows, d, d);
    let tq = matmul_raw(&tn, &lw.wq.data, rows, d, d);
    let tk = matmul_raw(&tn, &lw.wk.data, rows, d, d);
    let tv = matmul_raw(&tn, &lw.wv.data, rows, d, d);
    let (att, tatt) = attention_jvp(&q, &k, &v, &tq, &tk, &tv, blocks, seq, n_heads, d);
    let att_o = matmul_raw(&att, &lw.wo.data, rows, d, d);
    let tatt_o = matmul_raw(&tatt, &lw.wo.data, rows, d, d);
    for i in 0..rows * d {
        x[i] += att_o[i];
        t[i] += tatt_o[i];
    }
    let (xn2, tn2) = rms_norm_jvp(x, t, &lw.mlp_norm.data, rows, d);
    let z = matmul_raw(&xn2, &lw.gate.data, rows, d, dm);
    let tz = matmul_raw(&tn2, &lw.gate.data, rows, d, dm);
    let u = matmul_raw(&xn2, &lw.up.data, rows, d, dm);
    let tu = matmul_raw(&tn2, &lw.up.data, rows, d, dm);
    let mut p = vec![0.0f32; rows * dm];
    let mut tp = vec![0.0f32; rows * dm];
    for r in 0..rows {
        for j in 0..dm {
            let i = r * dm + j;
            let a = silu_scalar(z[i]) * mask[j];
            let ta = silu_grad(z[i]) * tz[i] * mask[j];
            p[i] = a * u[i];
            tp[i] = ta * u[i] + a * tu[i];
        }
    }
    let mlp = matmul_raw(&p, &lw.down.data, rows, dm, d);
    let tmlp = matmul_raw(&tp, &lw.down.data, rows, dm, d);
    for i in 0..rows * d {
        x[i] += mlp[i];
        t[i] += tmlp[i];
    }
}

/// Prefix state shared by every copy: the hooked layer's pre-scale values
/// and its unscaled output.
struct Prefix {
    z: Vec<f32>,
    u: Vec<f32>,
    pr: Vec<f32>,
    x_base: Vec<f32>,
    frozen: Option<usize>,
}

fn prefix(
    model: &TransformerModel,
    tokens: &[u32],
    layer: usize,
    remax: bool,
) -> Result<Prefix> {
    let cfg = &model.config;
    if layer >= cfg.n_layers {
        return Err(Error::Input(format!(
            "layer {layer} out of range ({} layers)",
            cfg.n_layers
        )));
    }
    let (d, dm, seq) = (cfg.d_model, cfg.d_mlp, tokens.len());
    let mut ptape = Tape::new();
    let mut px = model.embed(&mut ptape, &model.params, &[tokens])?;
    for l in 0..layer {
        px = model.apply_layer(&mut ptape, &px, &model.params.layers[l], l, 1, seq, None)?;
    }
    let lw = &model.params.layers[layer];
    let x_mid = model.attn_block(&mut ptape, &px, lw, 1, seq)?;
    let (z, u) = model.mlp_branches(&mut ptape, &x_mid, lw)?;
    let mask = &model.neuron_mask[layer];
    let mut pr = vec![0.0f32; seq * dm];
    for r in 0..seq {
        for j in 0..dm {
            pr[r * dm + j] = silu_scalar(z.data[r * dm + j]) * mask[j] * u.data[r * dm + j];
        }
    }
    let mlp_base = matmul_raw(&pr, &lw.down.data, seq, dm, d);
    let mut x_base = x_mid.data.clone();
    for i in 0..seq * d {
        x_base[i] += mlp_base[i];
    }
    let frozen = if remax { None } else { Some(model.max_logit(tokens)?.1 as usize) };
    Ok(Prefix { z: z.data, u: u.data, pr, x_base, frozen })
}

/// Push one chunk of (state, tangent) copies through the suffix layers and
/// read off the tangent of the target logit per copy.
fn suffix_dm(
    model: &TransformerModel,
    layer: usize,
    mut x: Vec<f32>,
    mut t: Vec<f32>,
    c: usize,
    seq: usize,
    frozen: Option<usize>,
    out: &mut Vec<f32>,
) {
    let cfg = &model.config;
    let (d, dm) = (cfg.d_model, cfg.d_mlp);
    for l2 in layer + 1..cfg.n_layers {
        layer_jvp(
            &mut x,
            &mut t,
            &model.params.layers[l2],
            &model.neuron_mask[l2],
            c,
            seq,
            cfg.n_heads,
            d,
            dm,
        );
    }
    // Final position only: rmsnorm + the needed lm_head column.
    let mut xf = vec![0.0f32; c * d];
    let mut tf = vec![0.0f32; c * d];
    for ci in 0..c {
        let r = ci * seq + seq - 1;
        xf[ci * d..(ci + 1) * d].copy_from_slice(&x[r * d..(r + 1) * d]);
        tf[ci * d..(ci + 1) * d].copy_from_slice(&t[r * d..(r + 1) * d]);
    }
    let (xn, tn) = rms_norm_jvp(&xf, &tf, &model.params.final_norm.data, c, d);
    let head = &model.params.lm_head.data;
    let vs = cfg.vocab_size;
    for ci in 0..c {
        let tgt = match frozen {
            Some(tgt) => tgt,
            None => {
                let logits = matmul_raw(&xn[ci * d..(ci + 1) * d], head, 1, d, vs);
                argmax_lowest(&logits).1 as usize
            }
        };
        let mut g = 0.0f32;
        for col in 0..d {
            g += tn[ci * d + col] * head[col * vs + tgt];
        }
        out.push(g);
    }
}

/// d(pr'_rj)/dalpha and pr'_rj - pr_rj for one (row, neuron, alpha) point.
#[inline]
fn seed_coeffs(
    family: LayerFamily,
    alpha: f32,
    zr: f32,
    ur: f32,
    mj: f32,
    pr0: f32,
) -> (f32, f32) {
    match family {
        LayerFamily::Gate => (
            (silu_scalar(alpha * zr) - silu_scalar(zr)) * mj * ur,
            silu_grad(alpha * zr) * zr * mj * ur,
        ),
        LayerFamily::Up => {
            let a = silu_scalar(zr) * mj;
            (a * ur * (alpha - 1.0), a * ur)
        }
        LayerFamily::Down => ((alpha - 1.0) * pr0, pr0),
    }
}

/// dM/dalpha for a batch of per-neuron path points. Copy c evaluates the
/// model with neuron `pairs[c].0` of `family` at `layer` scaled by
/// `pairs[c].1` (all other neurons at 1) and returns the alpha-derivative of
/// the target logit at the final position (frozen argmax unless `remax`).
pub fn dm_dalpha_batch(
    model: &TransformerModel,
    tokens: &[u32],
    layer: usize,
    family: LayerFamily,
    pairs: &[(usize, f32)],
    remax: bool,
) -> Result<Vec<f32>> {
    let cfg = &model.config;
    for &(j, _) in pairs {
        if j >= cfg.d_mlp {
            return Err(Error::Input(format!(
                "neuron {j} out of range (d_mlp {})",
                cfg.d_mlp
            )));
        }
    }
    let (d, dm, seq) = (cfg.d_model, cfg.d_mlp, tokens.len());
    let pre = prefix(model, tokens, layer, remax)?;
    let lw = &model.params.layers[layer];
    let mask = &model.neuron_mask[layer];

    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(CHUNK) {
        let c = chunk.len();
        let rows = c * seq;
        let mut x = vec![0.0f32; rows * d];
        let mut t = vec![0.0f32; rows * d];
        for (ci, &(j, alpha)) in chunk.iter().enumerate() {
            for r in 0..seq {
                // pr' differs from pr only in column j, so the copy's layer
                // output is base + (pr'_rj - pr_rj) * down[j,:] and the
                // tangent seed is d(pr'_rj)/dalpha * down[j,:].
                let (delta, coeff) = seed_coeffs(
                    family,
                    alpha,
                    pre.z[r * dm + j],
                    pre.u[r * dm + j],
                    mask[j],
                    pre.pr[r * dm + j],
                );
                let xrow = &mut x[(ci * seq + r) * d..(ci * seq + r + 1) * d];
                let trow = &mut t[(ci * seq + r) * d..(ci * seq + r + 1) * d];
                let drow = &lw.down.data[j * d..(j + 1) * d];
                for col in 0..d {
                    xrow[col] = pre.x_base[r * d + col] + delta * drow[col];
                    trow[col] = coeff * drow[col];
                }
            }
        }
        suffix_dm(model, layer, x, t, c, seq, pre.frozen, &mut out);
    }
    Ok(out)
}

/// dM/dalpha along the joint path: copy k scales ALL of the layer's neurons
/// by `alphas[k]`. The returned value is the directional derivative that the
/// joint-path per-neuron gradients sum to.
pub fn dm_dalpha_uniform(
    model: &TransformerModel,
    tokens: &[u32],
    layer: usize,
    family: LayerFamily,
    alphas: &[f32],
    remax: bool,
) -> Result<Vec<f32>> {
    let cfg = &model.config;
    let (d, dm, seq) = (cfg.d_model, cfg.d_mlp, tokens.len());
    let pre = prefix(model, tokens, layer, remax)?;
    let lw = &model.params.layers[layer];
    let mask = &model.neuron_mask[layer];

    let mut out = Vec::with_capacity(alphas.len());
    for chunk in alphas.chunks(CHUNK) {
        let c = chunk.len();
        let rows = c * seq;
        let mut dpr = vec![0.0f32; rows * dm];
        let mut co = vec![0.0f32; rows * dm];
        for (ci, &alpha) in chunk.iter().enumerate() {
            for r in 0..seq {
                for j in 0..dm {
                    let (delta, coeff) = seed_coeffs(
                        family,
                        alpha,
                        pre.z[r * dm + j],
                        pre.u[r * dm + j],
                        mask[j],
                        pre.pr[r * dm + j],
                    );
                    dpr[(ci * seq + r) * dm + j] = delta;
                    co[(ci * seq + r) * dm + j] = coeff;
                }
            }
        }
        let mut x = matmul_raw(&dpr, &lw.down.data, rows, dm, d);
        let t = matmul_raw(&co, &lw.down.data, rows, dm, d);
        for ci in 0..c {
            for r in 0..seq {
                for col in 0..d {
                    x[(ci * seq + r) * d + col] += pre.x_base[r * d + col];
                }
            }
        }
        suffix_dm(model, layer, x, t, c, seq, pre.frozen, &mut out);
    }
    Ok(out)
}
