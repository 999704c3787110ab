//! Independent f64 reference implementation of the model forward, used as
//! the finite-difference oracle by the gradient checks. Lives in the library
//! (rather than a test file) so the integration test suites can share it.

use crate::model::{LayerFamily, ModelConfig, TransformerModel, RMS_EPS};

// ---------------------------------------------------------------------------
// f64 reference math
// ---------------------------------------------------------------------------

pub fn matmul64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            for j in 0..n {
                out[i * n + j] += av * b[kk * n + j];
            }
        }
    }
    out
}

pub fn rms_norm64(x: &[f64], gain: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
        let ir = 1.0 / (ms + RMS_EPS as f64).sqrt();
        for c in 0..cols {
            out[r * cols + c] = row[c] * ir * gain[c];
        }
    }
    out
}

pub fn softmax64(scores: &[f64], out: &mut [f64]) {
    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(scores) {
        *o = (v - mx).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

pub fn silu64(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn attention64(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    blocks: usize,
    seq: usize,
    n_heads: usize,
    d: usize,
) -> Vec<f64> {
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; blocks * seq * d];
    for b in 0..blocks {
        let base = b * seq;
        for h in 0..n_heads {
            let ho = h * dh;
            for i in 0..seq {
                let mut scores = vec![0.0; i + 1];
                for (j, sc) in scores.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for t in 0..dh {
                        s += q[(base + i) * d + ho + t] * k[(base + j) * d + ho + t];
                    }
                    *sc = s * scale;
                }
                let mut p = vec![0.0; i + 1];
                softmax64(&scores, &mut p);
                for (j, &pj) in p.iter().enumerate() {
                    for t in 0..dh {
                        out[(base + i) * d + ho + t] += pj * v[(base + j) * d + ho + t];
                    }
                }
            }
        }
    }
    out
}

/// Flat f64 copies of model params in `ModelParams::named()` order.
pub fn flat_params(model: &TransformerModel) -> Vec<Vec<f64>> {
    model
        .params
        .named()
        .iter()
        .map(|(_, t)| t.data.iter().map(|&v| v as f64).collect())
        .collect()
}

pub struct RefHook<'a> {
    pub layer: usize,
    pub family: LayerFamily,
    /// [d_mlp] broadcast, or [rows*d_mlp] full.
    pub scale: &'a [f64],
}

/// f64 forward to final-position logits `[batch, vocab]`, mirroring the
/// `want_full=false` tape path op for op.
pub fn ref_final_logits(
    cfg: &ModelConfig,
    p: &[Vec<f64>],
    masks: &[Vec<f32>],
    batch: &[&[u32]],
    hook: Option<&RefHook>,
) -> Vec<f64> {
    let (d, dm, vocab) = (cfg.d_model, cfg.d_mlp, cfg.vocab_size);
    let b = batch.len();
    let seq = batch[0].len();
    let rows = b * seq;
    let mut x = vec![0.0; rows * d];
    for (bi, tokens) in batch.iter().enumerate() {
        for (pos, &tok) in tokens.iter().enumerate() {
            for c in 0..d {
                x[(bi * seq + pos) * d + c] =
                    p[0][tok as usize * d + c] + p[1][pos * d + c];
            }
        }
    }
    for l in 0..cfg.n_layers {
        let base = 2 + 9 * l;
        let (wq, wk, wv, wo) = (&p[base], &p[base + 1], &p[base + 2], &p[base + 3]);
        let (attn_norm, mlp_norm) = (&p[base + 4], &p[base + 5]);
        let (gate, up, down) = (&p[base + 6], &p[base + 7], &p[base + 8]);
        let xn = rms_norm64(&x, attn_norm, rows, d);
        let q = matmul64(&xn, wq, rows, d, d);
        let k = matmul64(&xn, wk, rows, d, d);
        let v = matmul64(&xn, wv, rows, d, d);
        let att = attention64(&q, &k, &v, b, seq, cfg.n_heads, d);
        let att_o = matmul64(&att, wo, rows, d, d);
        for i in 0..rows * d {
            x[i] += att_o[i];
        }
        let xn2 = rms_norm64(&x, mlp_norm, rows, d);
        let mut z = matmul64(&xn2, gate, rows, d, dm);
        let active = hook.filter(|h| h.layer == l);
        if let Some(h) = active {
            if h.family == LayerFamily::Gate {
                scale64(&mut z, h.scale, rows, dm);
            }
        }
        let mut a: Vec<f64> = z.iter().map(|&v| silu64(v)).collect();
        for r in 0..rows {
            for j in 0..dm {
                a[r * dm + j] *= masks[l][j] as f64;
            }
        }
        let mut u = matmul64(&xn2, up, rows, d, dm);
        if let Some(h) = active {
            if h.family == LayerFamily::Up {
                scale64(&mut u, h.scale, rows, dm);
            }
        }
        let mut pr: Vec<f64> = a.iter().zip(&u).map(|(av, uv)| av * uv).collect();
        if let Some(h) = active {
            if h.family == LayerFamily::Down {
                scale64(&mut pr, h.scale, rows, dm);
            }
        }
        let mlp_out = matmul64(&pr, down, rows, dm, d);
        for i in 0..rows * d {
            x[i] += mlp_out[i];
        }
    }
    let mut xf = vec![0.0; b * d];
    for bi in 0..b {
        xf[bi * d..(bi + 1) * d]
            .copy_from_slice(&x[(bi * seq + seq - 1) * d..(bi * seq + seq) * d]);
    }
    let nf = p.len() - 2;
    let xn = rms_norm64(&xf, &p[nf], b, d);
    matmul64(&xn, &p[nf + 1], b, d, vocab)
}

pub fn scale64(t: &mut [f64], scale: &[f64], rows: usize, cols: usize) {
    if scale.len() == cols {
        for r in 0..rows {
            for c in 0..cols {
                t[r * cols + c] *= scale[c];
            }
        }
    } else {
        assert_eq!(scale.len(), rows * cols);
        for (tv, sv) in t.iter_mut().zip(scale) {
            *tv *= sv;
        }
    }
}

pub fn ref_ce_loss(
    cfg: &ModelConfig,
    p: &[Vec<f64>],
    masks: &[Vec<f32>],
    batch: &[&[u32]],
    targets: &[usize],
) -> f64 {
    let logits = ref_final_logits(cfg, p, masks, batch, None);
    let vocab = cfg.vocab_size;
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits[r * vocab..(r + 1) * vocab];
        let mut probs = vec![0.0; vocab];
        softmax64(row, &mut probs);
        loss -= probs[t].ln();
    }
    loss / targets.len() as f64
}
