//! Adam training on the multiple-choice task: cross-entropy on the gold
//! answer letter's logit at the final (cue) position.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::tasks::McqSample;
use crate::tensor::Tape;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Record the loss every this many steps (step 1 and the last step are
    /// always recorded).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    /// (step, minibatch loss) pairs.
    pub loss_curve: Vec<(usize, f32)>,
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl AdamState {
    fn new(sizes: &[usize]) -> Self {
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, cfg: &TrainConfig, params: &mut [Vec<&mut f32>], grads: &[Vec<f32>]) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (ti, pvec) in params.iter_mut().enumerate() {
            let g = &grads[ti];
            for (i, p) in pvec.iter_mut().enumerate() {
                let gi = g[i] as f64;
                let m = &mut self.m[ti][i];
                let v = &mut self.v[ti][i];
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                **p = (**p as f64 - cfg.lr * mhat / (vhat.sqrt() + cfg.eps)) as f32;
            }
        }
    }
}

/// Train in place on `samples` (drawn i.i.d. with replacement each step).
/// Fails with `Error::Diverged` if the loss stops being finite.
pub fn train(
    model: &mut TransformerModel,
    samples: &[&McqSample],
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    if samples.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::Input("steps and batch_size must be >= 1".into()));
    }
    let seq = samples[0].tokens.len();
    for s in samples {
        if s.tokens.len() != seq {
            return Err(Error::Input("training samples must share one sequence length".into()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes: Vec<usize> = model.params.named().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = AdamState::new(&sizes);
    let mut curve = Vec::new();

    for step in 1..=cfg.steps {
        let batch: Vec<&McqSample> = (0..cfg.batch_size)
            .map(|_| samples[rng.gen_range(0..samples.len())])
            .collect();
        let tokens: Vec<&[u32]> = batch.iter().map(|s| s.tokens.as_slice()).collect();
        let targets: Vec<usize> = batch
            .iter()
            .map(|s| s.answer_tokens[s.label] as usize)
            .collect();

        let mut tape = Tape::new();
        let tracked = model.params.tracked(&mut tape);
        let out = model.forward_batch(&mut tape, &tokens, &tracked, None, false)?;
        let loss = tape.cross_entropy_mean(&out.final_logits, &targets)?;
        let loss_val = loss.data[0];
        if !loss_val.is_finite() {
            return Err(Error::Diverged { step });
        }
        let grads = tape.backward(&loss)?;
        let grad_vecs: Vec<Vec<f32>> = tracked
            .named()
            .iter()
            .map(|(_, t)| grads.get(t).expect("param gradient").data)
            .collect();
        let mut named = model.params.named_mut();
        let mut param_refs: Vec<Vec<&mut f32>> = named
            .iter_mut()
            .map(|(_, t)| t.data.iter_mut().collect())
            .collect();
        adam.step(cfg, &mut param_refs, &grad_vecs);

        if step == 1 || step == cfg.steps || step % cfg.log_every == 0 {
            curve.push((step, loss_val));
        }
    }
    Ok(TrainResult { loss_curve: curve })
}

pub fn loss_curve_csv(result: &TrainResult) -> String {
    let mut out = String::from("step,loss\n");
    for (step, loss) in &result.loss_curve {
        out.push_str(&format!("{step},{loss}\n"));
    }
    out
}
