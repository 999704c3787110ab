//! Integrated Gradients along the neuron weight-scaling path.
//!
//! The attribution target is M(q): the model's maximum output logit at the
//! final position, with the argmax token frozen at its unmodified-model
//! (scale = 1) identity along the whole path so the integrand is a smooth
//! logit rather than a piecewise max. The alternative (re-taking the argmax
//! at each interpolation step) is available behind `remax_path`.
//!
//! Two path variants ship:
//! - per-neuron: only neuron (l, j) is interpolated, all others stay at 1
//!   (the oracle; completeness per neuron);
//! - joint: all of layer l's neurons are interpolated together
//!   (the default for scoring; one backward per step covers the layer).
//!
//! Riemann scheme is a right-endpoint sum with alpha_k = k/m.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerFamily, TransformerModel};
use crate::tasks::McqSample;
use crate::tensor::{Tape, Tensor};
use crate::util::{atomic_write, pairwise_sum};

/// Copies stacked into one forward/backward; bounds peak memory while
/// keeping the matmuls large enough to be fast.
const MAX_COPIES: usize = 256;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IgConfig {
    /// Riemann steps. The paper never states its m; 20 is the common IG
    /// default, and the convergence property test bounds the error.
    pub m: usize,
    /// None = all layers.
    pub target_layers: Option<Vec<usize>>,
    /// Stack all interpolation steps into one forward/backward pass instead
    /// of looping. Same numbers either way (up to gemm-shape rounding).
    pub batch_of_alphas: bool,
    pub family: LayerFamily,
    /// Re-take the argmax at every interpolation step instead of freezing it.
    pub remax_path: bool,
}

impl Default for IgConfig {
    fn default() -> Self {
        IgConfig {
            m: 20,
            target_layers: None,
            batch_of_alphas: true,
            family: LayerFamily::Gate,
            remax_path: false,
        }
    }
}

impl IgConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Input("IG step count m must be >= 1".into()));
        }
        if let Some(layers) = &self.target_layers {
            if layers.is_empty() {
                return Err(Error::Input("target_layers must be non-empty".into()));
            }
            for &l in layers {
                if l >= n_layers {
                    return Err(Error::Input(format!(
                        "target layer {l} out of range ({n_layers} layers)"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn layers(&self, n_layers: usize) -> Vec<usize> {
        match &self.target_layers {
            Some(ls) => ls.clone(),
            None => (0..n_layers).collect(),
        }
    }
}

/// Value of M and its gradient w.r.t. one copy's per-neuron scale vector.
pub struct ScaledRun {
    pub m_value: f32,
    /// dM/ds_j, positions already summed (pairwise).
    pub grad: Vec<f32>,
}

/// Run the model once per scale vector in `scales`, all copies stacked into
/// chunked forwards. Copy c applies `scales[c]` to `family` at `layer`.
/// Returns M (the frozen-argmax logit, or per-copy argmax when `remax`) and
/// its gradient w.r.t. the scale vector.
pub fn scaled_runs(
    model: &TransformerModel,
    tokens: &[u32],
    layer: usize,
    family: LayerFamily,
    scales: &[Vec<f32>],
    remax: bool,
) -> Result<Vec<ScaledRun>> {
    let cfg = &model.config;
    if layer >= cfg.n_layers {
        return Err(Error::Input(format!(
            "layer {layer} out of range ({} layers)",
            cfg.n_layers
        )));
    }
    if scales.is_empty() {
        return Err(Error::Input("no scale vectors".into()));
    }
    for s in scales {
        if s.len() != cfg.d_mlp {
            return Err(Error::Input(format!(
                "scale vector length {} != d_mlp {}",
                s.len(),
                cfg.d_mlp
            )));
        }
    }
    let dm = cfg.d_mlp;
    let d = cfg.d_model;
    let seq = tokens.len();

    // Untracked prefix, computed once: layers below `layer`, then the target
    // layer's attention block and both MLP branch pre-scale values. All of
    // this is identical across scale copies.
    let mut ptape = Tape::new();
    let mut x = model.embed(&mut ptape, &model.params, &[tokens])?;
    for l in 0..layer {
        x = model.apply_layer(&mut ptape, &x, &model.params.layers[l], l, 1, seq, None)?;
    }
    let lw = &model.params.layers[layer];
    let x_mid = model.attn_block(&mut ptape, &x, lw, 1, seq)?;
    let (z, u) = model.mlp_branches(&mut ptape, &x_mid, lw)?;

    let frozen = if remax { None } else { Some(model.max_logit(tokens)?.1 as usize) };

    let mut out = Vec::with_capacity(scales.len());
    for chunk in scales.chunks(MAX_COPIES) {
        let c = chunk.len();
        let rows = c * seq;
        let x_mid_t = tile_rows(&x_mid, c);
        let z_t = tile_rows(&z, c);
        let u_t = tile_rows(&u, c);
        let mut s_data = vec![0.0f32; rows * dm];
        for (ci, sv) in chunk.iter().enumerate() {
            for r in 0..seq {
                s_data[(ci * seq + r) * dm..(ci * seq + r + 1) * dm].copy_from_slice(sv);
            }
        }
        let mut tape = Tape::new();
        let s = tape.watch(&Tensor::new(vec![rows, dm], s_data));
        let mask = Tensor::new(vec![dm], model.neuron_mask[layer].clone());
        let p = match family {
            LayerFamily::Gate => {
                let zt = tape.mul(&z_t, &s)?;
                let a = tape.silu(&zt)?;
                let a = tape.mul_row_vector(&a, &mask)?;
                tape.mul(&a, &u_t)?
            }
            LayerFamily::Up => {
                let a = tape.silu(&z_t)?;
                let a = tape.mul_row_vector(&a, &mask)?;
                let ut = tape.mul(&u_t, &s)?;
                tape.mul(&a, &ut)?
            }
            LayerFamily::Down => {
                let a = tape.silu(&z_t)?;
                let a = tape.mul_row_vector(&a, &mask)?;
                let p0 = tape.mul(&a, &u_t)?;
                tape.mul(&p0, &s)?
            }
        };
        let mlp_out = tape.matmul(&p, &lw.down)?;
        let mut xs = tape.add(&x_mid_t, &mlp_out)?;
        for l2 in layer + 1..cfg.n_layers {
            xs = model.apply_layer(&mut tape, &xs, &model.params.layers[l2], l2, c, seq, None)?;
        }
        let final_indices: Vec<usize> = (0..c).map(|ci| ci * seq + seq - 1).collect();
        let xf = tape.gather_rows(&xs, &final_indices)?;
        let xn = tape.rms_norm(&xf, &model.params.final_norm, crate::model::RMS_EPS)?;
        let logits = tape.matmul(&xn, &model.params.lm_head)?;
        let targets: Vec<usize> = match frozen {
            Some(t) => vec![t; c],
            None => (0..c)
                .map(|ci| {
                    crate::model::argmax_lowest(
                        &logits.data[ci * cfg.vocab_size..(ci + 1) * cfg.vocab_size],
                    )
                    .1 as usize
                })
                .collect(),
        };
        let sel = tape.select_cols_per_row(&logits, &targets)?;
        let root = tape.sum(&sel)?;
        let grads = tape.backward(&root)?;
        let gs = grads.get(&s).expect("scale leaf has a gradient");
        for ci in 0..c {
            let mut grad = Vec::with_capacity(dm);
            for j in 0..dm {
                let col: Vec<f64> = (0..seq)
                    .map(|r| gs.data[(ci * seq + r) * dm + j] as f64)
                    .collect();
                grad.push(pairwise_sum(&col) as f32);
            }
            out.push(ScaledRun { m_value: sel.data[ci], grad });
        }
        debug_assert_eq!(x_mid_t.shape, vec![rows, d]);
    }
    Ok(out)
}

fn tile_rows(src: &Tensor, copies: usize) -> Tensor {
    let (rows, cols) = (src.shape[0], src.shape[1]);
    let mut data = Vec::with_capacity(rows * cols * copies);
    for _ in 0..copies {
        data.extend_from_slice(&src.data);
    }
    Tensor::new(vec![rows * copies, cols], data)
}

/// Right-endpoint Riemann sum (1/m) * sum_{k=1..m} grad(k/m), accumulated
/// pairwise. `grad_at` is the integrand dM/dalpha at one alpha.
pub fn riemann_right_sum(m: usize, mut grad_at: impl FnMut(f32) -> Result<f32>) -> Result<f32> {
    let mut terms = Vec::with_capacity(m);
    for k in 1..=m {
        terms.push(grad_at(k as f32 / m as f32)? as f64);
    }
    Ok((pairwise_sum(&terms) / m as f64) as f32)
}

fn alphas(m: usize) -> Vec<f32> {
    (1..=m).map(|k| k as f32 / m as f32).collect()
}

fn ig_from_runs(runs: &[ScaledRun], j: usize) -> f32 {
    let terms: Vec<f64> = runs.iter().map(|r| r.grad[j] as f64).collect();
    (pairwise_sum(&terms) / runs.len() as f64) as f32
}

/// Per-neuron-path IG for a single neuron.
pub fn ig_neuron(
    model: &TransformerModel,
    tokens: &[u32],
    layer: usize,
    neuron: usize,
    cfg: &IgConfig,
) -> Result<f32> {
    if neuron >= model.config.d_mlp {
        return Err(Error::Input(format!(
            "neuron {neuron} out of range (d_mlp {})",
            model.config.d_mlp
        )));
    }
    let scale_at = |alpha: f32| {
        let mut s = vec![1.0f32; model.config.d_mlp];
        s[neuron] = alpha;
        s
    };
    if cfg.batch_of_alphas {
        let scales: Vec<Vec<f32>> = alphas(cfg.m).iter().map(|&a| scale_at(a)).collect();
        let runs = scaled_runs(model, tokens, layer, cfg.family, &scales, cfg.remax_path)?;
        Ok(ig_from_runs(&runs, neuron))
    } else {
        riemann_right_sum(cfg.m, |alpha| {
            let runs =
                scaled_runs(model, tokens, layer, cfg.family, &[scale_at(alpha)], cfg.remax_path)?;
            Ok(runs[0].grad[neuron])
        })
    }
}

/// Per-neuron-path IG for every neuron of a layer. Still one path per
/// neuron, but dM/dalpha comes from the forward-mode engine: each
/// (neuron, alpha) copy costs about one forward pass instead of a taped
/// forward plus backward, which is what makes d_mlp * m paths affordable.
pub fn ig_neurons_all(
    model: &TransformerModel,
    tokens: &[u32],
    layer: usize,
    cfg: &IgConfig,
) -> Result<Vec<f32>> {
    let dm = model.config.d_mlp;
    let al = alphas(cfg.m);
    let mut pairs = Vec::with_capacity(dm * cfg.m);
    for j in 0..dm {
        for &a in &al {
            pairs.push((j, a));
        }
    }
    let grads = crate::jvp::dm_dalpha_batch(model, tokens, layer, cfg.family, &pairs, cfg.remax_path)?;
    Ok((0..dm)
        .map(|j| {
            let terms: Vec<f64> = grads[j * cfg.m..(j + 1) * cfg.m].iter().map(|&g| g as f64).collect();
            (pairwise_sum(&terms) / cfg.m as f64) as f32
        })
        .collect())
}

/// Joint-path IG for one layer: every step scales the whole layer by
/// alpha_k; one backward per step covers all d_mlp neurons.
pub fn ig_layer_batched(
    model: &TransformerModel,
    tokens: &[u32],
    layer: usize,
    cfg: &IgConfig,
) -> Result<Vec<f32>> {
    let dm = model.config.d_mlp;
    if cfg.batch_of_alphas {
        let scales: Vec<Vec<f32>> = alphas(cfg.m).iter().map(|&a| vec![a; dm]).collect();
        let runs = scaled_runs(model, tokens, layer, cfg.family, &scales, cfg.remax_path)?;
        Ok((0..dm).map(|j| ig_from_runs(&runs, j)).collect())
    } else {
        let mut per_alpha = Vec::with_capacity(cfg.m);
        for &a in &alphas(cfg.m) {
            let runs =
                scaled_runs(model, tokens, layer, cfg.family, &[vec![a; dm]], cfg.remax_path)?;
            per_alpha.push(runs.into_iter().next().unwrap().grad);
        }
        Ok((0..dm)
            .map(|j| {
                let terms: Vec<f64> = per_alpha.iter().map(|g| g[j] as f64).collect();
                (pairwise_sum(&terms) / cfg.m as f64) as f32
            })
            .collect())
    }
}

/// M at a uniform layer-wide scale (frozen target supplied by the caller so
/// endpoints share one argmax identity).
pub fn m_at_uniform_scale(
    model: &TransformerModel,
    tokens: &[u32],
    layer: usize,
    family: LayerFamily,
    alpha: f32,
    target: usize,
) -> Result<f32> {
    let dm = model.config.d_mlp;
    let mut tape = Tape::new();
    let sv = Tensor::new(vec![dm], vec![alpha; dm]);
    let hook = crate::model::ScaleHook {
        layer,
        family,
        scale: crate::model::HookScale::PerNeuron(&sv),
    };
    let out = model.forward_batch(&mut tape, &[tokens], &model.params, Some(&hook), false)?;
    Ok(out.final_logits.data[target])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub n_layers: usize,
    pub d_mlp: usize,
    pub n_samples: u32,
    pub model_fingerprint: [u8; 32],
    /// Row-major L x d_mlp.
    pub scores: Vec<f32>,
}

impl ScoreMatrix {
    pub fn get(&self, layer: usize, neuron: usize) -> f32 {
        self.scores[layer * self.d_mlp + neuron]
    }

    pub fn check_compat(&self, model: &TransformerModel) -> Result<()> {
        if self.n_layers != model.config.n_layers || self.d_mlp != model.config.d_mlp {
            return Err(Error::Compat(format!(
                "score matrix is {}x{} but model is {}x{}",
                self.n_layers, self.d_mlp, model.config.n_layers, model.config.d_mlp
            )));
        }
        if self.model_fingerprint != model.fingerprint() {
            return Err(Error::Compat(
                "score matrix was computed for a different model (fingerprint mismatch)".into(),
            ));
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,neuron,score\n");
        for l in 0..self.n_layers {
            for j in 0..self.d_mlp {
                out.push_str(&format!("{l},{j},{}\n", self.get(l, j)));
            }
        }
        out
    }
}

/// Mean attribution over the adaptation samples (Eq. 5 analogue). Never
/// reads `label`; samples are attribution inputs only. Per-sample work runs
/// in parallel; the mean is a fixed pairwise reduction over sample index,
/// so the result is bitwise independent of scheduling and of sample order
/// permutations that keep the multiset (sorted by tokens) fixed.
pub fn score_dataset(
    model: &TransformerModel,
    samples: &[&McqSample],
    cfg: &IgConfig,
) -> Result<ScoreMatrix> {
    if samples.is_empty() {
        return Err(Error::Input("empty adaptation set".into()));
    }
    cfg.validate(model.config.n_layers)?;
    let layers = cfg.layers(model.config.n_layers);
    let dm = model.config.d_mlp;
    let nl = model.config.n_layers;

    // canonical order: sort sample indices by token sequence so permuting
    // the input order cannot change the reduction tree
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[a].tokens.cmp(&samples[b].tokens));

    let per_sample: Vec<Result<Vec<Vec<f32>>>> = order
        .par_iter()
        .map(|&i| {
            let tokens = &samples[i].tokens;
            layers
                .iter()
                .map(|&l| ig_layer_batched(model, tokens, l, cfg))
                .collect()
        })
        .collect();

    let mut scores = vec![0.0f32; nl * dm];
    let mut mats = Vec::with_capacity(per_sample.len());
    for r in per_sample {
        mats.push(r?);
    }
    for (li, &l) in layers.iter().enumerate() {
        for j in 0..dm {
            let terms: Vec<f64> = mats.iter().map(|m| m[li][j] as f64).collect();
            scores[l * dm + j] = (pairwise_sum(&terms) / mats.len() as f64) as f32;
        }
    }
    Ok(ScoreMatrix {
        n_layers: nl,
        d_mlp: dm,
        n_samples: samples.len() as u32,
        model_fingerprint: model.fingerprint(),
        scores,
    })
}

pub mod scorefile {
    //! Score file: magic `DSMS`, u32 version, u32 L, u32 d_mlp,
    //! u32 n_samples, 32-byte model fingerprint, L*d_mlp little-endian f32.

    use super::*;

    pub const MAGIC: &[u8; 4] = b"DSMS";
    pub const VERSION: u32 = 1;

    pub fn to_bytes(sm: &ScoreMatrix) -> Vec<u8> {
        let mut out = Vec::with_capacity(52 + sm.scores.len() * 4);
        out.extend_from_slice(MAGIC);
        for v in [VERSION, sm.n_layers as u32, sm.d_mlp as u32, sm.n_samples] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&sm.model_fingerprint);
        for &v in &sm.scores {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<ScoreMatrix> {
        let fail = |field: &str, msg: String| Error::Format { field: field.into(), msg };
        if buf.len() < 52 {
            return Err(fail("header", format!("file too short ({} bytes)", buf.len())));
        }
        if &buf[0..4] != MAGIC {
            return Err(fail("magic", "not a DSMS score file".into()));
        }
        let u32at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        if u32at(4) != VERSION {
            return Err(fail("version", format!("unsupported version {}", u32at(4))));
        }
        let n_layers = u32at(8) as usize;
        let d_mlp = u32at(12) as usize;
        let n_samples = u32at(16);
        let mut fp = [0u8; 32];
        fp.copy_from_slice(&buf[20..52]);
        let need = 52 + n_layers * d_mlp * 4;
        if buf.len() != need {
            return Err(fail(
                "payload",
                format!("expected {need} bytes for {n_layers}x{d_mlp} scores, got {}", buf.len()),
            ));
        }
        let scores: Vec<f32> = buf[52..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(fail("payload", "non-finite score entry".into()));
        }
        Ok(ScoreMatrix { n_layers, d_mlp, n_samples, model_fingerprint: fp, scores })
    }
}

pub fn save_scores(sm: &ScoreMatrix, path: &std::path::Path) -> Result<()> {
    atomic_write(path, &scorefile::to_bytes(sm))
}

pub fn load_scores(path: &std::path::Path) -> Result<ScoreMatrix> {
    scorefile::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tasks::{self, Split, TaskSpec};

    fn small_model(seed: u64) -> TransformerModel {
        TransformerModel::new(ModelConfig {
            vocab_size: 32,
            d_model: 16,
            d_mlp: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 12,
            seed,
        })
        .unwrap()
    }

    fn toks() -> Vec<u32> {
        vec![8, 9, 20, 3, 1, 2, 7, 3, 4, 6]
    }

    #[test]
    fn zero_gate_row_gives_zero_ig() {
        let mut m = small_model(1);
        let dm = m.config.d_mlp;
        let d = m.config.d_model;
        for r in 0..d {
            m.params.layers[1].gate.data[r * dm + 3] = 0.0;
        }
        let cfg = IgConfig { m: 8, ..IgConfig::default() };
        let ig = ig_neuron(&m, &toks(), 1, 3, &cfg).unwrap();
        // z_3 == 0 everywhere, silu(alpha*0) == 0 for all alpha, so the
        // output never moves and neither does the gradient w.r.t. s_3
        assert_eq!(ig, 0.0);
    }

    #[test]
    fn linear_surrogate_is_exact_for_any_m() {
        // single-neuron linear pipeline built directly on the tape:
        // M(s) = c * s, so every Riemann step returns the same gradient c
        // and IG == M(1) - M(0) exactly for any m
        let x = Tensor::new(vec![1, 1], vec![1.7]);
        let w = Tensor::new(vec![1, 1], vec![-2.3]);
        let eval_grad = |alpha: f32| -> f32 {
            let mut tape = Tape::new();
            let s = tape.watch(&Tensor::new(vec![1, 1], vec![alpha]));
            let z = tape.mul(&x, &s).unwrap();
            let y = tape.matmul(&z, &w).unwrap();
            let root = tape.sum(&y).unwrap();
            tape.backward(&root).unwrap().get(&s).unwrap().data[0]
        };
        let delta = 1.7f32 * -2.3;
        for m in [1usize, 2, 3, 7, 20] {
            let ig = riemann_right_sum(m, |a| Ok(eval_grad(a))).unwrap();
            assert!((ig - delta).abs() <= 1e-6, "m={m}: {ig} vs {delta}");
        }
    }

    #[test]
    fn batched_and_loop_paths_agree() {
        let m = small_model(2);
        let t = toks();
        let base = IgConfig { m: 6, ..IgConfig::default() };
        let looped = IgConfig { batch_of_alphas: false, ..base.clone() };
        for layer in 0..2 {
            let a = ig_layer_batched(&m, &t, layer, &base).unwrap();
            let b = ig_layer_batched(&m, &t, layer, &looped).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-5, "layer {layer}: {x} vs {y}");
            }
            let n_a = ig_neuron(&m, &t, layer, 5, &base).unwrap();
            let n_b = ig_neuron(&m, &t, layer, 5, &looped).unwrap();
            assert!((n_a - n_b).abs() <= 1e-5);
        }
    }

    #[test]
    fn ig_neurons_all_matches_single_neuron_calls() {
        let m = small_model(3);
        let t = toks();
        let cfg = IgConfig { m: 5, ..IgConfig::default() };
        let all = ig_neurons_all(&m, &t, 1, &cfg).unwrap();
        for j in 0..m.config.d_mlp {
            let one = ig_neuron(&m, &t, 1, j, &cfg).unwrap();
            assert!((all[j] - one).abs() <= 1e-6, "neuron {j}: {} vs {one}", all[j]);
        }
    }

    #[test]
    fn joint_path_per_layer_completeness() {
        let m = small_model(4);
        let t = toks();
        let target = m.max_logit(&t).unwrap().1 as usize;
        let cfg = IgConfig { m: 512, ..IgConfig::default() };
        for layer in 0..2 {
            let ig = ig_layer_batched(&m, &t, layer, &cfg).unwrap();
            let total: f64 = {
                let terms: Vec<f64> = ig.iter().map(|&v| v as f64).collect();
                pairwise_sum(&terms)
            };
            let m1 = m_at_uniform_scale(&m, &t, layer, LayerFamily::Gate, 1.0, target).unwrap();
            let m0 = m_at_uniform_scale(&m, &t, layer, LayerFamily::Gate, 0.0, target).unwrap();
            let delta = (m1 - m0) as f64;
            assert!(
                (total - delta).abs() <= 1e-3 * delta.abs().max(1.0),
                "layer {layer}: sum {total} vs delta {delta}"
            );
        }
    }

    #[test]
    fn per_neuron_completeness_small_model() {
        let m = small_model(5);
        let t = toks();
        let target = m.max_logit(&t).unwrap().1 as usize;
        let cfg = IgConfig { m: 512, ..IgConfig::default() };
        let layer = 1;
        let all = ig_neurons_all(&m, &t, layer, &cfg).unwrap();
        for j in 0..m.config.d_mlp {
            // endpoints of the per-neuron path
            let endpoint = |alpha: f32| -> f32 {
                let mut s = vec![1.0f32; m.config.d_mlp];
                s[j] = alpha;
                let sv = Tensor::new(vec![m.config.d_mlp], s);
                let hook = crate::model::ScaleHook {
                    layer,
                    family: LayerFamily::Gate,
                    scale: crate::model::HookScale::PerNeuron(&sv),
                };
                let mut tape = Tape::new();
                let out = m
                    .forward_batch(&mut tape, &[&t], &m.params, Some(&hook), false)
                    .unwrap();
                out.final_logits.data[target]
            };
            let delta = (endpoint(1.0) - endpoint(0.0)) as f64;
            assert!(
                (all[j] as f64 - delta).abs() <= 1e-3 * delta.abs().max(1.0),
                "neuron {j}: ig {} vs delta {delta}",
                all[j]
            );
        }
    }

    #[test]
    fn riemann_convergence_is_cauchy() {
        let m = small_model(6);
        let t = toks();
        let mut prev_diff: Option<f64> = None;
        let mut prev: Option<Vec<f32>> = None;
        for steps in [64usize, 128, 256, 512] {
            let cfg = IgConfig { m: steps, ..IgConfig::default() };
            let ig = ig_layer_batched(&m, &t, 0, &cfg).unwrap();
            if let Some(p) = &prev {
                let diff = ig
                    .iter()
                    .zip(p)
                    .map(|(a, b)| (*a as f64 - *b as f64).abs())
                    .fold(0.0, f64::max);
                if let Some(pd) = prev_diff {
                    assert!(
                        diff <= 0.75 * pd + 1e-7,
                        "doubling {steps}: diff {diff} vs prev {pd}"
                    );
                }
                prev_diff = Some(diff);
            }
            prev = Some(ig);
        }
    }

    #[test]
    fn sensitivity_nonzero_for_influential_neuron() {
        // craft a neuron that alone carries the final logit signal
        let mut m = small_model(7);
        let t = toks();
        let target = m.max_logit(&t).unwrap().1 as usize;
        // boost neuron 2 of the last layer so zeroing it moves M
        let dm = m.config.d_mlp;
        let d = m.config.d_model;
        for r in 0..d {
            m.params.layers[1].gate.data[r * dm + 2] *= 8.0;
            m.params.layers[1].up.data[r * dm + 2] *= 4.0;
        }
        let m0 = m_at_uniform_scale(&m, &t, 1, LayerFamily::Gate, 1.0, target).unwrap();
        let mut zeroed = vec![1.0f32; dm];
        zeroed[2] = 0.0;
        let runs = scaled_runs(&m, &t, 1, LayerFamily::Gate, &[zeroed], false).unwrap();
        let moved = (m0 - runs[0].m_value).abs();
        assert!(moved > 1e-3, "constructed neuron moves M by {moved}");
        let cfg = IgConfig { m: 256, ..IgConfig::default() };
        let ig = ig_neuron(&m, &t, 1, 2, &cfg).unwrap();
        assert!(ig.abs() > 0.0, "influential neuron got zero attribution");
    }

    fn adaptation_samples(n: usize) -> Vec<McqSample> {
        let spec = TaskSpec {
            vocab_size: 32,
            n_train: 0,
            n_id_test: 0,
            n_ood_test: 0,
            n_adaptation: n,
            seed: 9,
            ..TaskSpec::default()
        };
        tasks::generate(&spec)
            .unwrap()
            .into_iter()
            .filter(|s| s.split == Split::Adaptation)
            .collect()
    }

    #[test]
    fn score_dataset_single_sample_and_mean_linearity() {
        let m = small_model(8);
        let samples = adaptation_samples(2);
        let refs: Vec<&McqSample> = samples.iter().collect();
        let cfg = IgConfig { m: 4, ..IgConfig::default() };
        let both = score_dataset(&m, &refs, &cfg).unwrap();
        let a = score_dataset(&m, &refs[..1], &cfg).unwrap();
        let b = score_dataset(&m, &refs[1..], &cfg).unwrap();
        for i in 0..both.scores.len() {
            let mean = (a.scores[i] as f64 + b.scores[i] as f64) / 2.0;
            assert!((both.scores[i] as f64 - mean).abs() <= 1e-7);
        }
        assert_eq!(a.n_samples, 1);
        assert_eq!(both.n_samples, 2);
    }

    #[test]
    fn score_dataset_order_invariant_bitwise() {
        let m = small_model(8);
        let samples = adaptation_samples(5);
        let fwd: Vec<&McqSample> = samples.iter().collect();
        let rev: Vec<&McqSample> = samples.iter().rev().collect();
        let cfg = IgConfig { m: 3, ..IgConfig::default() };
        let a = score_dataset(&m, &fwd, &cfg).unwrap();
        let b = score_dataset(&m, &rev, &cfg).unwrap();
        assert_eq!(
            a.scores.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.scores.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn score_dataset_ignores_labels_bitwise() {
        let m = small_model(8);
        let samples = adaptation_samples(3);
        let cfg = IgConfig { m: 3, ..IgConfig::default() };
        let refs: Vec<&McqSample> = samples.iter().collect();
        let a = score_dataset(&m, &refs, &cfg).unwrap();
        let mut mutated = samples.clone();
        for s in &mut mutated {
            s.label = (s.label + 1) % s.answer_tokens.len();
        }
        let refs2: Vec<&McqSample> = mutated.iter().collect();
        let b = score_dataset(&m, &refs2, &cfg).unwrap();
        assert_eq!(
            a.scores.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.scores.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn scorefile_roundtrip_and_rejections() {
        let m = small_model(8);
        let samples = adaptation_samples(2);
        let refs: Vec<&McqSample> = samples.iter().collect();
        let cfg = IgConfig { m: 2, ..IgConfig::default() };
        let sm = score_dataset(&m, &refs, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.dsms");
        save_scores(&sm, &path).unwrap();
        let loaded = load_scores(&path).unwrap();
        assert_eq!(sm, loaded);
        loaded.check_compat(&m).unwrap();

        let other = small_model(99);
        assert!(matches!(loaded.check_compat(&other), Err(Error::Compat(_))));

        let bytes = scorefile::to_bytes(&sm);
        assert!(scorefile::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            scorefile::from_bytes(&bad),
            Err(Error::Format { field, .. }) if field == "magic"
        ));
    }

    #[test]
    fn hook_forward_and_engine_forward_agree() {
        // the stacked engine must compute the same M as the plain hook path
        let m = small_model(10);
        let t = toks();
        let target = m.max_logit(&t).unwrap().1 as usize;
        let dm = m.config.d_mlp;
        for family in [LayerFamily::Gate, LayerFamily::Up, LayerFamily::Down] {
            for layer in 0..2 {
                let sv: Vec<f32> = (0..dm).map(|j| 0.1 + 0.15 * j as f32).collect();
                let runs = scaled_runs(&m, &t, layer, family, &[sv.clone()], false).unwrap();
                let svt = Tensor::new(vec![dm], sv);
                let hook = crate::model::ScaleHook {
                    layer,
                    family,
                    scale: crate::model::HookScale::PerNeuron(&svt),
                };
                let mut tape = Tape::new();
                let out = m
                    .forward_batch(&mut tape, &[&t], &m.params, Some(&hook), false)
                    .unwrap();
                let want = out.final_logits.data[target];
                assert!(
                    (runs[0].m_value - want).abs() <= 1e-5 * want.abs().max(1.0),
                    "{family} layer {layer}: engine {} vs hook {want}",
                    runs[0].m_value
                );
            }
        }
    }
}
