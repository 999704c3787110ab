//! Decoder-only transformer with gated MLP blocks
//! (`down(silu(gate(x)) * up(x))`), per-neuron scale hooks on any of the
//! three MLP projections, and per-layer neuron masks for pruning.
//!
//! MLP biases are fixed to zero. Positions use learned absolute embeddings.
//! Pre-norm residual blocks with RMS normalization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

pub const RMS_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 64,
            d_mlp: 128,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_mlp == 0 || self.n_layers == 0 || self.n_heads == 0
            || self.vocab_size == 0 || self.max_seq_len == 0
        {
            return Err(Error::Input("all model dimensions must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Input(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_mlp < 8 {
            return Err(Error::Input(format!("d_mlp {} < 8", self.d_mlp)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub attn_norm: Tensor,
    pub mlp_norm: Tensor,
    pub gate: Tensor, // [d_model, d_mlp]; neuron j is column j
    pub up: Tensor,   // [d_model, d_mlp]
    pub down: Tensor, // [d_mlp, d_model]; neuron j is row j
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub token_embedding: Tensor, // [vocab, d_model]
    pub pos_embedding: Tensor,   // [max_seq_len, d_model]
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub lm_head: Tensor, // [d_model, vocab]
}

impl ModelParams {
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("pos_embedding".to_string(), &self.pos_embedding),
        ];
        for (l, lw) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.wq"), &lw.wq));
            out.push((format!("layer{l}.wk"), &lw.wk));
            out.push((format!("layer{l}.wv"), &lw.wv));
            out.push((format!("layer{l}.wo"), &lw.wo));
            out.push((format!("layer{l}.attn_norm"), &lw.attn_norm));
            out.push((format!("layer{l}.mlp_norm"), &lw.mlp_norm));
            out.push((format!("layer{l}.gate"), &lw.gate));
            out.push((format!("layer{l}.up"), &lw.up));
            out.push((format!("layer{l}.down"), &lw.down));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("token_embedding".to_string(), &mut self.token_embedding),
            ("pos_embedding".to_string(), &mut self.pos_embedding),
        ];
        for (l, lw) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{l}.wq"), &mut lw.wq));
            out.push((format!("layer{l}.wk"), &mut lw.wk));
            out.push((format!("layer{l}.wv"), &mut lw.wv));
            out.push((format!("layer{l}.wo"), &mut lw.wo));
            out.push((format!("layer{l}.attn_norm"), &mut lw.attn_norm));
            out.push((format!("layer{l}.mlp_norm"), &mut lw.mlp_norm));
            out.push((format!("layer{l}.gate"), &mut lw.gate));
            out.push((format!("layer{l}.up"), &mut lw.up));
            out.push((format!("layer{l}.down"), &mut lw.down));
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("lm_head".to_string(), &mut self.lm_head));
        out
    }

    /// Leaf-tracked copy of every parameter on `tape`.
    pub fn tracked(&self, tape: &mut Tape) -> ModelParams {
        ModelParams {
            token_embedding: tape.watch(&self.token_embedding),
            pos_embedding: tape.watch(&self.pos_embedding),
            layers: self
                .layers
                .iter()
                .map(|lw| LayerWeights {
                    wq: tape.watch(&lw.wq),
                    wk: tape.watch(&lw.wk),
                    wv: tape.watch(&lw.wv),
                    wo: tape.watch(&lw.wo),
                    attn_norm: tape.watch(&lw.attn_norm),
                    mlp_norm: tape.watch(&lw.mlp_norm),
                    gate: tape.watch(&lw.gate),
                    up: tape.watch(&lw.up),
                    down: tape.watch(&lw.down),
                })
                .collect(),
            final_norm: tape.watch(&self.final_norm),
            lm_head: tape.watch(&self.lm_head),
        }
    }
}

/// Which MLP projection a scale hook (or attribution pass) targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerFamily {
    /// Gate pre-activation (the default intervention point).
    Gate,
    Up,
    Down,
}

impl std::str::FromStr for LayerFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gate" => Ok(LayerFamily::Gate),
            "up" => Ok(LayerFamily::Up),
            "down" => Ok(LayerFamily::Down),
            other => Err(Error::Input(format!(
                "unknown layer family `{other}` (expected gate|up|down)"
            ))),
        }
    }
}

impl std::fmt::Display for LayerFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LayerFamily::Gate => "gate",
            LayerFamily::Up => "up",
            LayerFamily::Down => "down",
        })
    }
}

/// Per-neuron scale applied inside one MLP block.
///
/// `PerNeuron` broadcasts a `[d_mlp]` vector over every row; `Full` supplies
/// one scale per (row, neuron) entry, which is how batched attribution feeds
/// a different interpolation step to each stacked copy of a sample.
pub enum HookScale<'a> {
    PerNeuron(&'a Tensor),
    Full(&'a Tensor),
}

pub struct ScaleHook<'a> {
    pub layer: usize,
    pub family: LayerFamily,
    pub scale: HookScale<'a>,
}

#[derive(Clone, Debug)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub params: ModelParams,
    /// Per-layer multiplicative mask on the post-activation gate branch;
    /// entries in {0,1}, all ones at construction.
    pub neuron_mask: Vec<Vec<f32>>,
}

impl TransformerModel {
    /// Seeded random initialization (ChaCha8 from `config.seed`).
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let dm = config.d_mlp;
        let mut mat = |rows: usize, cols: usize, std: f64| -> Tensor {
            let dist = Normal::new(0.0, std).unwrap();
            let data: Vec<f32> = (0..rows * cols).map(|_| dist.sample(&mut rng) as f32).collect();
            Tensor::new(vec![rows, cols], data)
        };
        let proj_std = 1.0 / (d as f64).sqrt();
        let token_embedding = mat(config.vocab_size, d, 0.1);
        let pos_embedding = mat(config.max_seq_len, d, 0.1);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                wq: mat(d, d, proj_std),
                wk: mat(d, d, proj_std),
                wv: mat(d, d, proj_std),
                wo: mat(d, d, proj_std),
                attn_norm: Tensor::ones(vec![d]),
                mlp_norm: Tensor::ones(vec![d]),
                gate: mat(d, dm, proj_std),
                up: mat(d, dm, proj_std),
                down: mat(dm, d, 1.0 / (dm as f64).sqrt()),
            })
            .collect();
        let final_norm = Tensor::ones(vec![d]);
        let lm_head = mat(d, config.vocab_size, proj_std);
        Ok(TransformerModel {
            neuron_mask: vec![vec![1.0; dm]; config.n_layers],
            params: ModelParams {
                token_embedding,
                pos_embedding,
                layers,
                final_norm,
                lm_head,
            },
            config,
        })
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::Input(format!(
                    "token id {} out of range for vocab {}",
                    t, self.config.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Full-sequence logits `[seq, vocab]` for a single sample.
    pub fn forward(&self, tokens: &[u32], hook: Option<&ScaleHook>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward_batch(&mut tape, &[tokens], &self.params, hook, true)?;
        let full = out.full_logits.expect("full logits requested");
        Ok(full)
    }

    /// Maximum logit at the final position and its argmax token
    /// (ties broken toward the lowest token id).
    pub fn max_logit(&self, tokens: &[u32]) -> Result<(f32, u32)> {
        let logits = self.forward(tokens, None)?;
        let (rows, cols) = logits.dims2()?;
        let last = &logits.data[(rows - 1) * cols..rows * cols];
        Ok(argmax_lowest(last))
    }

    /// Stacked forward over same-length sequences. Attention stays within
    /// each sequence. Returns final-position logits `[batch, vocab]` and,
    /// when `want_full`, all-position logits `[batch*seq, vocab]`.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        batch: &[&[u32]],
        params: &ModelParams,
        hook: Option<&ScaleHook>,
        want_full: bool,
    ) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let seq = batch[0].len();
        for tokens in batch {
            if tokens.len() != seq {
                return Err(Error::Input(
                    "batched forward requires uniform sequence lengths".into(),
                ));
            }
            self.check_tokens(tokens)?;
        }
        if let Some(h) = hook {
            if h.layer >= self.config.n_layers {
                return Err(Error::Input(format!(
                    "hook layer {} out of range ({} layers)",
                    h.layer, self.config.n_layers
                )));
            }
        }
        let b = batch.len();
        let mut x = self.embed(tape, params, batch)?;

        for (l, lw) in params.layers.iter().enumerate() {
            x = self.apply_layer(tape, &x, lw, l, b, seq, hook)?;
        }

        let final_indices: Vec<usize> = (0..b).map(|i| i * seq + seq - 1).collect();
        if want_full {
            let xn = tape.rms_norm(&x, &params.final_norm, RMS_EPS)?;
            let full = tape.matmul(&xn, &params.lm_head)?;
            let final_logits = tape.gather_rows(&full, &final_indices)?;
            Ok(ForwardOutput { final_logits, full_logits: Some(full) })
        } else {
            let xf = tape.gather_rows(&x, &final_indices)?;
            let xn = tape.rms_norm(&xf, &params.final_norm, RMS_EPS)?;
            let final_logits = tape.matmul(&xn, &params.lm_head)?;
            Ok(ForwardOutput { final_logits, full_logits: None })
        }
    }

    /// Token + position embeddings for a uniform-length batch: `[b*seq, d]`.
    pub fn embed(&self, tape: &mut Tape, params: &ModelParams, batch: &[&[u32]]) -> Result<Tensor> {
        let seq = batch[0].len();
        let ids: Vec<usize> = batch.iter().flat_map(|t| t.iter().map(|&x| x as usize)).collect();
        let pos_ids: Vec<usize> = (0..batch.len()).flat_map(|_| 0..seq).collect();
        let tok = tape.gather_rows(&params.token_embedding, &ids)?;
        let pos = tape.gather_rows(&params.pos_embedding, &pos_ids)?;
        tape.add(&tok, &pos)
    }

    /// Residual stream after the attention sub-block: `x + attn(x)`.
    pub fn attn_block(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        lw: &LayerWeights,
        blocks: usize,
        seq: usize,
    ) -> Result<Tensor> {
        let xn = tape.rms_norm(x, &lw.attn_norm, RMS_EPS)?;
        let q = tape.matmul(&xn, &lw.wq)?;
        let k = tape.matmul(&xn, &lw.wk)?;
        let v = tape.matmul(&xn, &lw.wv)?;
        let att = tape.causal_attention(&q, &k, &v, blocks, seq, self.config.n_heads)?;
        let att_o = tape.matmul(&att, &lw.wo)?;
        tape.add(x, &att_o)
    }

    /// Gate pre-activation and up-branch values of the MLP sub-block
    /// (before any scale hook, activation, or mask).
    pub fn mlp_branches(
        &self,
        tape: &mut Tape,
        x_mid: &Tensor,
        lw: &LayerWeights,
    ) -> Result<(Tensor, Tensor)> {
        let xn2 = tape.rms_norm(x_mid, &lw.mlp_norm, RMS_EPS)?;
        let z = tape.matmul(&xn2, &lw.gate)?;
        let u = tape.matmul(&xn2, &lw.up)?;
        Ok((z, u))
    }

    /// One pre-norm transformer block over a stacked `[b*seq, d]` stream.
    pub fn apply_layer(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        lw: &LayerWeights,
        layer_idx: usize,
        blocks: usize,
        seq: usize,
        hook: Option<&ScaleHook>,
    ) -> Result<Tensor> {
        let x = self.attn_block(tape, x, lw, blocks, seq)?;
        let xn2 = tape.rms_norm(&x, &lw.mlp_norm, RMS_EPS)?;
        let mut z = tape.matmul(&xn2, &lw.gate)?;
        let active = hook.filter(|h| h.layer == layer_idx);
        if let Some(h) = active {
            if h.family == LayerFamily::Gate {
                z = apply_scale(tape, &z, &h.scale)?;
            }
        }
        let a = tape.silu(&z)?;
        let mask = Tensor::new(vec![self.config.d_mlp], self.neuron_mask[layer_idx].clone());
        let a = tape.mul_row_vector(&a, &mask)?;
        let mut u = tape.matmul(&xn2, &lw.up)?;
        if let Some(h) = active {
            if h.family == LayerFamily::Up {
                u = apply_scale(tape, &u, &h.scale)?;
            }
        }
        let mut p = tape.mul(&a, &u)?;
        if let Some(h) = active {
            if h.family == LayerFamily::Down {
                p = apply_scale(tape, &p, &h.scale)?;
            }
        }
        let mlp_out = tape.matmul(&p, &lw.down)?;
        tape.add(&x, &mlp_out)
    }

    /// SHA-256 over config and all parameter tensors (masks excluded, so a
    /// pruned copy keeps the fingerprint of the weights it was derived from).
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(checkpoint::config_bytes(&self.config));
        for (name, t) in self.params.named() {
            h.update(checkpoint::tensor_record(&name, t));
        }
        h.finalize().into()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::util::atomic_write(path, &checkpoint::to_bytes(self))
    }

    pub fn load(path: &std::path::Path) -> Result<TransformerModel> {
        checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

pub struct ForwardOutput {
    pub final_logits: Tensor,
    pub full_logits: Option<Tensor>,
}

fn apply_scale(tape: &mut Tape, t: &Tensor, scale: &HookScale) -> Result<Tensor> {
    match scale {
        HookScale::PerNeuron(v) => tape.mul_row_vector(t, v),
        HookScale::Full(m) => tape.mul(t, m),
    }
}

pub fn argmax_lowest(row: &[f32]) -> (f32, u32) {
    let mut best = f32::NEG_INFINITY;
    let mut best_i = 0u32;
    for (i, &v) in row.iter().enumerate() {
        if v > best {
            best = v;
            best_i = i as u32;
        }
    }
    (best, best_i)
}

pub mod checkpoint {
    //! Binary checkpoint: magic `DSMP`, u32 version, little-endian config,
    //! named tensor records, then per-layer mask bitsets.

    use super::*;

    pub const MAGIC: &[u8; 4] = b"DSMP";
    pub const VERSION: u32 = 1;

    pub fn config_bytes(cfg: &ModelConfig) -> Vec<u8> {
        let mut out = Vec::with_capacity(32);
        for v in [
            cfg.vocab_size,
            cfg.d_model,
            cfg.d_mlp,
            cfg.n_layers,
            cfg.n_heads,
            cfg.max_seq_len,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&cfg.seed.to_le_bytes());
        out
    }

    pub fn tensor_record(name: &str, t: &Tensor) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + name.len() + t.numel() * 4);
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn to_bytes(model: &TransformerModel) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&config_bytes(&model.config));
        for (name, t) in model.params.named() {
            out.extend_from_slice(&tensor_record(&name, t));
        }
        let dm = model.config.d_mlp;
        for mask in &model.neuron_mask {
            let mut bits = vec![0u8; dm.div_ceil(8)];
            for (j, &m) in mask.iter().enumerate() {
                if m != 0.0 {
                    bits[j / 8] |= 1 << (j % 8);
                }
            }
            out.extend_from_slice(&bits);
        }
        out
    }

    struct Reader<'a> {
        buf: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
            if self.pos + n > self.buf.len() {
                return Err(Error::Format {
                    field: field.to_string(),
                    msg: format!(
                        "file truncated: needed {} bytes at offset {}, have {}",
                        n,
                        self.pos,
                        self.buf.len() - self.pos
                    ),
                });
            }
            let s = &self.buf[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }

        fn u16(&mut self, field: &str) -> Result<u16> {
            Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
        }

        fn u32(&mut self, field: &str) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
        }

        fn u64(&mut self, field: &str) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
        }
    }

    pub fn from_bytes(buf: &[u8]) -> Result<TransformerModel> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format {
                field: "magic".into(),
                msg: "not a DSMP checkpoint".into(),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                field: "version".into(),
                msg: format!("unsupported version {version}, expected {VERSION}"),
            });
        }
        let cfg = ModelConfig {
            vocab_size: r.u32("vocab_size")? as usize,
            d_model: r.u32("d_model")? as usize,
            d_mlp: r.u32("d_mlp")? as usize,
            n_layers: r.u32("n_layers")? as usize,
            n_heads: r.u32("n_heads")? as usize,
            max_seq_len: r.u32("max_seq_len")? as usize,
            seed: r.u64("seed")?,
        };
        cfg.validate().map_err(|e| Error::Format {
            field: "config".into(),
            msg: e.to_string(),
        })?;

        // Tensors arrive in the fixed `named()` order; read them generically
        // and validate names/dims as we go.
        let mut template = TransformerModel::new(cfg.clone())?;
        let expected: Vec<(String, Vec<usize>)> = template
            .params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape.clone()))
            .collect();
        let mut loaded: Vec<Tensor> = Vec::with_capacity(expected.len());
        for (want_name, want_shape) in &expected {
            let nlen = r.u16(want_name)? as usize;
            let name = std::str::from_utf8(r.take(nlen, want_name)?)
                .map_err(|_| Error::Format {
                    field: want_name.clone(),
                    msg: "tensor name is not utf-8".into(),
                })?
                .to_string();
            if &name != want_name {
                return Err(Error::Format {
                    field: want_name.clone(),
                    msg: format!("unexpected tensor `{name}`"),
                });
            }
            let rank = r.take(1, &name)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&name)? as usize);
            }
            if &shape != want_shape {
                return Err(Error::Format {
                    field: name.clone(),
                    msg: format!("dims {shape:?} do not match config (expected {want_shape:?})"),
                });
            }
            let n: usize = shape.iter().product();
            let bytes = r.take(n * 4, &name)?;
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            loaded.push(Tensor::new(shape, data));
        }
        for ((_, slot), t) in template.params.named_mut().into_iter().zip(loaded) {
            *slot = t;
        }

        let dm = template.config.d_mlp;
        let mask_bytes = dm.div_ceil(8);
        let mut masks = Vec::with_capacity(template.config.n_layers);
        for l in 0..template.config.n_layers {
            let bits = r.take(mask_bytes, &format!("mask[{l}]"))?;
            let mut mask = vec![0.0f32; dm];
            for (j, m) in mask.iter_mut().enumerate() {
                if bits[j / 8] & (1 << (j % 8)) != 0 {
                    *m = 1.0;
                }
            }
            masks.push(mask);
        }
        if r.pos != buf.len() {
            return Err(Error::Format {
                field: "trailer".into(),
                msg: format!("{} trailing bytes", buf.len() - r.pos),
            });
        }
        template.neuron_mask = masks;
        Ok(template)
    }
}
