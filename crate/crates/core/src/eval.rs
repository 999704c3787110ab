//! Evaluation: multiple-choice accuracy and the ablation experiment
//! batteries (sample count, sample selection, layer family, transfer,
//! adaptation-seed variance, attribution timing).

use crate::attribution::{score_dataset, IgConfig, ScoreMatrix};
use crate::error::{Error, Result};
use crate::model::{argmax_lowest, LayerFamily, TransformerModel};
use crate::pruning::{grid_search, percent_grid, prune, GridSearchResult};
use crate::tasks::{self, McqSample, Split, TaskSpec};
use crate::tensor::Tape;
use crate::util::linear_fit;

/// Rows per stacked forward when evaluating.
const EVAL_CHUNK: usize = 64;

/// Fraction of samples whose predicted class (argmax over the answer-token
/// logits at the final position, ties to the lowest class) matches the label.
pub fn accuracy(model: &TransformerModel, samples: &[&McqSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("no samples to evaluate".into()));
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let preds = predictions(model, chunk)?;
        correct += preds
            .iter()
            .zip(chunk)
            .filter(|(&p, s)| p == s.label)
            .count();
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Predicted class index for each sample.
pub fn predictions(model: &TransformerModel, samples: &[&McqSample]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        // group by sequence length so each stacked forward is uniform
        let mut start = 0;
        while start < chunk.len() {
            let seq = chunk[start].tokens.len();
            let mut end = start + 1;
            while end < chunk.len() && chunk[end].tokens.len() == seq {
                end += 1;
            }
            let group = &chunk[start..end];
            let tokens: Vec<&[u32]> = group.iter().map(|s| s.tokens.as_slice()).collect();
            let mut tape = Tape::new();
            let fwd = model.forward_batch(&mut tape, &tokens, &model.params, None, false)?;
            let vocab = model.config.vocab_size;
            for (r, s) in group.iter().enumerate() {
                let row = &fwd.final_logits.data[r * vocab..(r + 1) * vocab];
                let answer_logits: Vec<f32> = s
                    .answer_tokens
                    .iter()
                    .map(|&t| {
                        if (t as usize) < vocab {
                            row[t as usize]
                        } else {
                            f32::NEG_INFINITY
                        }
                    })
                    .collect();
                let (_, cls) = argmax_lowest(&answer_logits);
                out.push(cls as usize);
            }
            start = end;
        }
    }
    Ok(out)
}

/// One full score → grid-search → prune → evaluate run.
pub struct PipelineOutcome {
    pub scores: ScoreMatrix,
    pub grid: GridSearchResult,
    pub pruned: TransformerModel,
    pub baseline_id: f64,
    pub baseline_ood: f64,
    pub pruned_id: f64,
    pub pruned_ood: f64,
}

/// Score the adaptation split (unlabeled use), grid-search (labeled use of
/// the same split, per the paper's protocol), prune at the optimum, and
/// evaluate on id/ood test splits.
pub fn run_pipeline(
    model: &TransformerModel,
    samples: &[McqSample],
    ig: &IgConfig,
    grid_max: u32,
) -> Result<PipelineOutcome> {
    let adapt = tasks::filter_split(samples, Split::Adaptation);
    let id = tasks::filter_split(samples, Split::IdTest);
    let ood = tasks::filter_split(samples, Split::OodTest);
    if adapt.is_empty() || id.is_empty() || ood.is_empty() {
        return Err(Error::Input(
            "pipeline needs non-empty adaptation, id_test and ood_test splits".into(),
        ));
    }
    let scores = score_dataset(model, &adapt, ig)?;
    let layers: Vec<usize> = ig.layers(model.config.n_layers);
    let grid = grid_search(model, &scores, &adapt, &layers, grid_max)?;
    let (pruned, _) = prune(model, &scores, grid.best.layer, grid.best.percent, grid_max)?;
    Ok(PipelineOutcome {
        baseline_id: accuracy(model, &id)?,
        baseline_ood: accuracy(model, &ood)?,
        pruned_id: accuracy(&pruned, &id)?,
        pruned_ood: accuracy(&pruned, &ood)?,
        scores,
        grid,
        pruned,
    })
}

/// Fresh adaptation draw: same task distribution, different stream.
pub fn draw_adaptation(spec: &TaskSpec, seed: u64, n: usize) -> Result<Vec<McqSample>> {
    let aspec = TaskSpec {
        seed,
        n_train: 0,
        n_id_test: 0,
        n_ood_test: 0,
        n_adaptation: n,
        ..spec.clone()
    };
    Ok(tasks::generate(&aspec)?
        .into_iter()
        .filter(|s| s.split == Split::Adaptation)
        .collect())
}

/// Fig. 2 analogue: rerun score → grid → eval per adaptation-sample count.
/// CSV schema: `count,ood_acc`.
pub fn ablate_sample_count(
    model: &TransformerModel,
    spec: &TaskSpec,
    ood: &[&McqSample],
    counts: &[usize],
    ig: &IgConfig,
    grid_max: u32,
    adapt_seed: u64,
) -> Result<String> {
    if counts.is_empty() {
        return Err(Error::Input("empty count list".into()));
    }
    let layers = ig.layers(model.config.n_layers);
    let mut csv = String::from("count,ood_acc\n");
    for &n in counts {
        let adapt = draw_adaptation(spec, adapt_seed, n)?;
        let refs: Vec<&McqSample> = adapt.iter().collect();
        let sm = score_dataset(model, &refs, ig)?;
        let gs = grid_search(model, &sm, &refs, &layers, grid_max)?;
        let (pruned, _) = prune(model, &sm, gs.best.layer, gs.best.percent, grid_max)?;
        csv.push_str(&format!("{n},{}\n", accuracy(&pruned, ood)?));
    }
    Ok(csv)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionStrategy {
    Random,
    CorrectOnly,
    IncorrectOnly,
}

impl std::str::FromStr for SelectionStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SelectionStrategy::Random),
            "correct_only" => Ok(SelectionStrategy::CorrectOnly),
            "incorrect_only" => Ok(SelectionStrategy::IncorrectOnly),
            other => Err(Error::Input(format!(
                "unknown strategy `{other}` (expected random|correct_only|incorrect_only)"
            ))),
        }
    }
}

impl std::fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SelectionStrategy::Random => "random",
            SelectionStrategy::CorrectOnly => "correct_only",
            SelectionStrategy::IncorrectOnly => "incorrect_only",
        })
    }
}

/// Candidate stream for selection ablations: the dataset's own adaptation
/// split first, then extra draws from a shifted seed. The unfiltered prefix
/// is therefore exactly the default pipeline's adaptation set.
pub fn selection_pool(
    adapt: &[&McqSample],
    spec: &TaskSpec,
    extra: usize,
) -> Result<Vec<McqSample>> {
    let mut pool: Vec<McqSample> = adapt.iter().map(|s| (*s).clone()).collect();
    pool.extend(draw_adaptation(spec, spec.seed.wrapping_add(1), extra)?);
    Ok(pool)
}

/// Appendix E.1 / Table 6 analogue: filter adaptation candidates by the
/// unpruned model's correctness before attribution. Returns the selected
/// samples (always `spec.n_adaptation` of them when enough candidates pass).
pub fn select_adaptation(
    model: &TransformerModel,
    adapt: &[&McqSample],
    spec: &TaskSpec,
    strategy: SelectionStrategy,
) -> Result<Vec<McqSample>> {
    let pool = selection_pool(adapt, spec, 10 * spec.n_adaptation)?;
    let refs: Vec<&McqSample> = pool.iter().collect();
    let preds = predictions(model, &refs)?;
    let keep = |i: usize| match strategy {
        SelectionStrategy::Random => true,
        SelectionStrategy::CorrectOnly => preds[i] == pool[i].label,
        SelectionStrategy::IncorrectOnly => preds[i] != pool[i].label,
    };
    let chosen: Vec<McqSample> = (0..pool.len())
        .filter(|&i| keep(i))
        .take(spec.n_adaptation)
        .map(|i| pool[i].clone())
        .collect();
    if chosen.is_empty() {
        return Err(Error::Input(format!(
            "no adaptation candidates pass strategy {strategy}"
        )));
    }
    Ok(chosen)
}

/// CSV schema: `strategy,n_samples,ood_acc`.
pub fn ablate_sample_selection(
    model: &TransformerModel,
    default_adapt: &[&McqSample],
    spec: &TaskSpec,
    ood: &[&McqSample],
    strategies: &[SelectionStrategy],
    ig: &IgConfig,
    grid_max: u32,
) -> Result<String> {
    let layers = ig.layers(model.config.n_layers);
    let mut csv = String::from("strategy,n_samples,ood_acc\n");
    for &st in strategies {
        let adapt = select_adaptation(model, default_adapt, spec, st)?;
        let refs: Vec<&McqSample> = adapt.iter().collect();
        let sm = score_dataset(model, &refs, ig)?;
        let gs = grid_search(model, &sm, &refs, &layers, grid_max)?;
        let (pruned, _) = prune(model, &sm, gs.best.layer, gs.best.percent, grid_max)?;
        csv.push_str(&format!("{st},{},{}\n", refs.len(), accuracy(&pruned, ood)?));
    }
    Ok(csv)
}

/// Appendix E.2 / Table 5 analogue: retarget attribution to each projection
/// family. CSV schema: `family,layer,percent,ood_acc`.
pub fn ablate_layer_family(
    model: &TransformerModel,
    samples: &[McqSample],
    ig: &IgConfig,
    grid_max: u32,
) -> Result<String> {
    let mut csv = String::from("family,layer,percent,ood_acc\n");
    for family in [LayerFamily::Gate, LayerFamily::Up, LayerFamily::Down] {
        let fam_ig = IgConfig { family, ..ig.clone() };
        let out = run_pipeline(model, samples, &fam_ig, grid_max)?;
        csv.push_str(&format!(
            "{family},{},{},{}\n",
            out.grid.best.layer, out.grid.best.percent, out.pruned_ood
        ));
    }
    Ok(csv)
}

/// Appendix D / Fig. 3 analogue: per layer, the best percent on the
/// adaptation set, with adaptation and ood error of that configuration.
/// CSV schema: `layer,best_percent,adaptation_error,ood_error`.
pub fn transfer_report(
    model: &TransformerModel,
    sm: &ScoreMatrix,
    adapt: &[&McqSample],
    ood: &[&McqSample],
    grid_max: u32,
) -> Result<String> {
    let mut csv = String::from("layer,best_percent,adaptation_error,ood_error\n");
    let base_adapt = accuracy(model, adapt)?;
    let base_ood = accuracy(model, ood)?;
    for l in 0..model.config.n_layers {
        // percent 0 = unpruned baseline, so best adaptation error is never
        // worse than the baseline's
        let mut best = (base_adapt, 0u32, base_ood);
        for &p in &percent_grid(grid_max) {
            let (pruned, _) = prune(model, sm, l, p, grid_max)?;
            let acc = accuracy(&pruned, adapt)?;
            if acc > best.0 {
                best = (acc, p, accuracy(&pruned, ood)?);
            }
        }
        let (acc, p, ood_acc) = best;
        csv.push_str(&format!("{l},{p},{},{}\n", 1.0 - acc, 1.0 - ood_acc));
    }
    Ok(csv)
}

pub struct SeedVariance {
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    pub std: f64,
}

/// Appendix E.1 analogue: redraw the adaptation set per seed, re-attribute,
/// and prune at a FIXED (layer, percent) — the pinned grid-search optimum —
/// so the spread measures the attribution ranking's sensitivity to the
/// sample draw alone. CSV schema: `seed,ood_acc` plus `mean`/`std` rows.
pub fn seed_variance(
    model: &TransformerModel,
    spec: &TaskSpec,
    ood: &[&McqSample],
    layer: usize,
    percent: u32,
    seeds: &[u64],
    n_samples: usize,
    ig: &IgConfig,
    grid_max: u32,
) -> Result<SeedVariance> {
    if seeds.is_empty() {
        return Err(Error::Input("empty seed list".into()));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let adapt = draw_adaptation(spec, seed, n_samples)?;
        let refs: Vec<&McqSample> = adapt.iter().collect();
        let sm = score_dataset(model, &refs, ig)?;
        let (pruned, _) = prune(model, &sm, layer, percent, grid_max)?;
        per_seed.push((seed, accuracy(&pruned, ood)?));
    }
    let mean = per_seed.iter().map(|(_, a)| a).sum::<f64>() / per_seed.len() as f64;
    let var = per_seed.iter().map(|(_, a)| (a - mean).powi(2)).sum::<f64>()
        / per_seed.len() as f64;
    Ok(SeedVariance { per_seed, mean, std: var.sqrt() })
}

pub fn seed_variance_csv(sv: &SeedVariance) -> String {
    let mut csv = String::from("seed,ood_acc\n");
    for (s, a) in &sv.per_seed {
        csv.push_str(&format!("{s},{a}\n"));
    }
    csv.push_str(&format!("mean,{}\nstd,{}\n", sv.mean, sv.std));
    csv
}

pub struct TimingAblation {
    /// (m, seconds) over the m grid.
    pub by_m: Vec<(usize, f64)>,
    /// (sample count, seconds).
    pub by_count: Vec<(usize, f64)>,
    pub r2_m: f64,
    pub r2_count: f64,
}

/// §5.3 analogue: attribution wall-clock vs m and vs sample count on log
/// grids, with least-squares R². Timing output is intentionally NOT part of
/// the deterministic report (wall-clock is never byte-stable).
pub fn timing_ablation(
    model: &TransformerModel,
    adapt: &[&McqSample],
    ig: &IgConfig,
    m_grid: &[usize],
    count_grid: &[usize],
) -> Result<TimingAblation> {
    use std::time::Instant;
    // take the minimum of a few repetitions per point: wall-clock noise from
    // the scheduler is strictly additive, so the minimum is the best estimate
    for &n in count_grid {
        if n > adapt.len() {
            return Err(Error::Input(format!(
                "count {n} exceeds {} adaptation samples",
                adapt.len()
            )));
        }
    }
    // Wall-clock on shared hardware carries slow periods lasting several
    // seconds, so measure in interleaved passes (a slow stretch then distorts
    // every point rather than one) and keep the per-point minimum: external
    // delay only ever adds time, so the minimum is the best estimate.
    const REPS: usize = 5;
    let mut by_m: Vec<(usize, f64)> = m_grid.iter().map(|&m| (m, f64::INFINITY)).collect();
    let mut by_count: Vec<(usize, f64)> = count_grid.iter().map(|&n| (n, f64::INFINITY)).collect();
    for _ in 0..REPS {
        for cell in by_m.iter_mut() {
            let cfg = IgConfig { m: cell.0, ..ig.clone() };
            let t0 = Instant::now();
            score_dataset(model, &adapt[..1], &cfg)?;
            cell.1 = cell.1.min(t0.elapsed().as_secs_f64());
        }
        for cell in by_count.iter_mut() {
            let t0 = Instant::now();
            score_dataset(model, &adapt[..cell.0], ig)?;
            cell.1 = cell.1.min(t0.elapsed().as_secs_f64());
        }
    }
    let fit = |pts: &[(usize, f64)]| {
        let xs: Vec<f64> = pts.iter().map(|(x, _)| *x as f64).collect();
        let ys: Vec<f64> = pts.iter().map(|(_, y)| *y).collect();
        linear_fit(&xs, &ys).2
    };
    Ok(TimingAblation { r2_m: fit(&by_m), r2_count: fit(&by_count), by_m, by_count })
}

pub fn timing_csv(t: &TimingAblation) -> String {
    let mut csv = String::from("variable,value,seconds\n");
    for (m, s) in &t.by_m {
        csv.push_str(&format!("m,{m},{s}\n"));
    }
    for (n, s) in &t.by_count {
        csv.push_str(&format!("count,{n},{s}\n"));
    }
    csv.push_str(&format!("r2_m,,{}\nr2_count,,{}\n", t.r2_m, t.r2_count));
    csv
}
