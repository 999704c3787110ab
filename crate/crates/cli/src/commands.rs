use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use serde_json::json;

use dsm_core::attribution::{load_scores, save_scores, score_dataset, IgConfig, ScoreMatrix};
use dsm_core::eval::{
    ablate_layer_family, ablate_sample_count, ablate_sample_selection, accuracy, seed_variance,
    seed_variance_csv, timing_ablation, timing_csv, transfer_report, SelectionStrategy,
};
use dsm_core::model::{LayerFamily, ModelConfig, TransformerModel};
use dsm_core::pruning::{grid_search, prune, random_prune, GridSearchResult, DEFAULT_MAX_PERCENT};
use dsm_core::report::{write_report, ReportContext};
use dsm_core::tasks::{self, McqSample, Split, TaskSpec};
use dsm_core::train::{loss_curve_csv, train, TrainConfig};
use dsm_core::util::{atomic_write, hex, sha256_file};
use dsm_core::{Error, Result};

use crate::config::FileConfig;

#[derive(Args)]
pub struct Common {
    /// key=value config file; precedence: flag > file > default
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// rayon thread count (results are identical for any N)
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Args)]
pub struct TaskArgs {
    /// answer classes K [default: 4]
    #[arg(long)]
    n_classes: Option<usize>,
    /// content tokens per question (odd) [default: 5]
    #[arg(long)]
    rule_arity: Option<usize>,
    /// in-distribution marker-gold correlation [default: 0.95]
    #[arg(long)]
    rho: Option<f64>,
    /// token vocabulary size [default: 64]
    #[arg(long)]
    vocab_size: Option<usize>,
    /// training samples [default: 512]
    #[arg(long)]
    n_train: Option<usize>,
    /// in-distribution test samples [default: 512]
    #[arg(long)]
    n_id_test: Option<usize>,
    /// out-of-distribution test samples [default: 512]
    #[arg(long)]
    n_ood_test: Option<usize>,
    /// unlabeled-use adaptation samples [default: 10]
    #[arg(long)]
    n_adaptation: Option<usize>,
}

impl TaskArgs {
    fn spec(&self, seed: u64, cfg: &FileConfig) -> Result<TaskSpec> {
        let d = TaskSpec::default();
        Ok(TaskSpec {
            n_classes: cfg.get(self.n_classes, "n-classes", d.n_classes)?,
            rule_arity: cfg.get(self.rule_arity, "rule-arity", d.rule_arity)?,
            rho: cfg.get(self.rho, "rho", d.rho)?,
            vocab_size: cfg.get(self.vocab_size, "vocab-size", d.vocab_size)?,
            seed,
            n_train: cfg.get(self.n_train, "n-train", d.n_train)?,
            n_id_test: cfg.get(self.n_id_test, "n-id-test", d.n_id_test)?,
            n_ood_test: cfg.get(self.n_ood_test, "n-ood-test", d.n_ood_test)?,
            n_adaptation: cfg.get(self.n_adaptation, "n-adaptation", d.n_adaptation)?,
        })
    }
}

#[derive(Args)]
pub struct ModelArgs {
    /// residual width [default: 64]
    #[arg(long)]
    d_model: Option<usize>,
    /// MLP hidden width [default: 128]
    #[arg(long)]
    d_mlp: Option<usize>,
    /// transformer layers [default: 4]
    #[arg(long)]
    n_layers: Option<usize>,
    /// attention heads [default: 4]
    #[arg(long)]
    n_heads: Option<usize>,
    /// maximum sequence length [default: 32]
    #[arg(long)]
    max_seq_len: Option<usize>,
}

impl ModelArgs {
    fn config(&self, seed: u64, vocab_size: usize, cfg: &FileConfig) -> Result<ModelConfig> {
        let d = ModelConfig::default();
        Ok(ModelConfig {
            vocab_size,
            d_model: cfg.get(self.d_model, "d-model", d.d_model)?,
            d_mlp: cfg.get(self.d_mlp, "d-mlp", d.d_mlp)?,
            n_layers: cfg.get(self.n_layers, "n-layers", d.n_layers)?,
            n_heads: cfg.get(self.n_heads, "n-heads", d.n_heads)?,
            max_seq_len: cfg.get(self.max_seq_len, "max-seq-len", d.max_seq_len)?,
            seed,
        })
    }
}

#[derive(Args)]
pub struct TrainArgs {
    /// optimizer steps [default: 2000]
    #[arg(long)]
    steps: Option<usize>,
    /// minibatch size [default: 32]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate [default: 0.0003]
    #[arg(long)]
    lr: Option<f64>,
    /// loss-curve logging interval [default: 50]
    #[arg(long)]
    log_every: Option<usize>,
}

impl TrainArgs {
    fn config(&self, seed: u64, cfg: &FileConfig) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        Ok(TrainConfig {
            steps: cfg.get(self.steps, "steps", d.steps)?,
            batch_size: cfg.get(self.batch_size, "batch-size", d.batch_size)?,
            lr: cfg.get(self.lr, "lr", d.lr)?,
            log_every: cfg.get(self.log_every, "log-every", d.log_every)?,
            seed,
            ..d
        })
    }
}

#[derive(Args)]
pub struct IgArgs {
    /// integrated-gradients Riemann steps [default: 20]
    #[arg(long)]
    m: Option<usize>,
    /// projection family to attribute/prune: gate|up|down [default: gate]
    #[arg(long)]
    layer_family: Option<String>,
    /// re-take the argmax at every interpolation step instead of freezing it
    /// [default: false]
    #[arg(long)]
    remax_path: bool,
}

impl IgArgs {
    fn config(&self, cfg: &FileConfig) -> Result<IgConfig> {
        let d = IgConfig::default();
        let family = match &self.layer_family {
            Some(s) => s.parse::<LayerFamily>()?,
            None => d.family,
        };
        Ok(IgConfig {
            m: cfg.get(self.m, "m", d.m)?,
            family,
            remax_path: self.remax_path,
            ..d
        })
    }
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the planted-shortcut multiple-choice dataset (JSONL)
    GenTask {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        task: TaskArgs,
        /// dataset seed [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        /// output JSONL path
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a transformer on the dataset's train split
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// model + training seed [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        /// input dataset (JSONL)
        #[arg(long)]
        task: PathBuf,
        /// output checkpoint path
        #[arg(long)]
        out: PathBuf,
        /// optional loss-curve CSV path
        #[arg(long)]
        loss_curve: Option<PathBuf>,
    },
    /// Score neurons by integrated gradients on unlabeled samples
    Attribute {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ig: IgArgs,
        /// model checkpoint
        #[arg(long)]
        model: PathBuf,
        /// input dataset (JSONL)
        #[arg(long)]
        task: PathBuf,
        /// split to attribute on [default: adaptation]
        #[arg(long)]
        split: Option<String>,
        /// cap on the number of samples used [default: all in split]
        #[arg(long)]
        samples: Option<usize>,
        /// output score file path
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep (layer, percent) and report the validation-optimal cell
    GridSearch {
        #[command(flatten)]
        common: Common,
        /// model checkpoint
        #[arg(long)]
        model: PathBuf,
        /// score file
        #[arg(long)]
        scores: PathBuf,
        /// dataset whose adaptation split is the validation set
        #[arg(long)]
        task: PathBuf,
        /// labeled validation JSONL overriding the task's adaptation split
        /// [default: none]
        #[arg(long)]
        val_file: Option<PathBuf>,
        /// grid upper bound in percent [default: 50]
        #[arg(long)]
        max_percent: Option<u32>,
        /// output JSON path
        #[arg(long)]
        out: PathBuf,
    },
    /// Mask the top-scored neurons of one layer
    Prune {
        #[command(flatten)]
        common: Common,
        /// model checkpoint
        #[arg(long)]
        model: PathBuf,
        /// score file
        #[arg(long)]
        scores: PathBuf,
        /// layer to prune
        #[arg(long)]
        layer: usize,
        /// grid percentage to prune
        #[arg(long)]
        percent: u32,
        /// grid upper bound in percent [default: 50]
        #[arg(long)]
        max_percent: Option<u32>,
        /// output checkpoint path
        #[arg(long)]
        out: PathBuf,
    },
    /// Mask a uniform-random neuron subset of the same size (control)
    RandomPrune {
        #[command(flatten)]
        common: Common,
        /// model checkpoint
        #[arg(long)]
        model: PathBuf,
        /// layer to prune
        #[arg(long)]
        layer: usize,
        /// percentage to prune
        #[arg(long)]
        percent: u32,
        /// RNG seed for the random subset [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        /// output checkpoint path
        #[arg(long)]
        out: PathBuf,
    },
    /// Multiple-choice accuracy of a checkpoint on one split
    Eval {
        #[command(flatten)]
        common: Common,
        /// model checkpoint
        #[arg(long)]
        model: PathBuf,
        /// input dataset (JSONL)
        #[arg(long)]
        task: PathBuf,
        /// split to evaluate: train|id_test|ood_test|adaptation
        /// [default: id_test]
        #[arg(long)]
        split: Option<String>,
        /// optional CSV output path
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one experiment battery and write its CSV
    Ablate {
        /// battery: sample-count|sample-selection|layer-family|transfer|
        /// seed-variance|timing
        which: String,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        task_args: TaskArgs,
        #[command(flatten)]
        ig: IgArgs,
        /// model checkpoint
        #[arg(long)]
        model: PathBuf,
        /// input dataset (JSONL); redraws reuse the gen-task flags
        #[arg(long)]
        task: PathBuf,
        /// dataset seed used when redrawing adaptation samples [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        /// grid upper bound in percent [default: 50]
        #[arg(long)]
        max_percent: Option<u32>,
        /// sample counts for sample-count [default: 5 10 15 20]
        #[arg(long, num_args = 1..)]
        counts: Option<Vec<usize>>,
        /// adaptation seeds for seed-variance [default: 100..105]
        #[arg(long, num_args = 1..)]
        seeds: Option<Vec<u64>>,
        /// fixed layer for seed-variance [default: grid-search optimum]
        #[arg(long)]
        layer: Option<usize>,
        /// fixed percent for seed-variance [default: grid-search optimum]
        #[arg(long)]
        percent: Option<u32>,
        /// adaptation samples per seed-variance draw [default: 10]
        #[arg(long)]
        n_samples: Option<usize>,
        /// output CSV path
        #[arg(long)]
        out: PathBuf,
    },
    /// Assemble the full report directory from existing artifacts
    Report {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        task_args: TaskArgs,
        #[command(flatten)]
        ig: IgArgs,
        /// model checkpoint
        #[arg(long)]
        model: PathBuf,
        /// input dataset (JSONL); redraws reuse the gen-task flags
        #[arg(long)]
        task: PathBuf,
        /// score file
        #[arg(long)]
        scores: PathBuf,
        /// dataset seed used when redrawing adaptation samples [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        /// grid upper bound in percent [default: 50]
        #[arg(long)]
        max_percent: Option<u32>,
        /// output report directory
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// gen-task → train → attribute → grid-search → prune → eval → report,
    /// all from one seed
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train_args: TrainArgs,
        #[command(flatten)]
        ig: IgArgs,
        /// the one seed for dataset, init, training, and controls
        /// [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        /// grid upper bound in percent [default: 50]
        #[arg(long)]
        max_percent: Option<u32>,
        /// output directory for all artifacts
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::IdTest => "id_test",
        Split::OodTest => "ood_test",
        Split::Adaptation => "adaptation",
    }
}

fn parse_split(s: Option<&str>, default: Split) -> Result<Split> {
    match s {
        None => Ok(default),
        Some(s) => s.parse(),
    }
}

fn load_model(path: &Path) -> Result<TransformerModel> {
    TransformerModel::load(path)
}

fn with_jobs<T>(jobs: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T>
where
    T: Send,
{
    match jobs {
        None => f(),
        Some(0) => Err(Error::Input("--jobs must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Input(format!("thread pool: {e}")))?
            .install(f),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(std::io::Error::from)?;
    atomic_write(path, &bytes)
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenTask { common, task, seed, out } => {
            let cfg = FileConfig::load(common.config.as_deref())?;
            let seed = cfg.get(seed, "seed", 0)?;
            let spec = task.spec(seed, &cfg)?;
            let samples = tasks::generate(&spec)?;
            tasks::save_jsonl(&out, &samples)?;
            println!("wrote {} samples to {}", samples.len(), out.display());
            Ok(())
        }
        Command::Train { common, model, train: targs, seed, task, out, loss_curve } => {
            let cfg = FileConfig::load(common.config.as_deref())?;
            let seed = cfg.get(seed, "seed", 0)?;
            let samples = tasks::load_jsonl(&task)?;
            let train_set = tasks::filter_split(&samples, Split::Train);
            let vocab = cfg.get(None::<usize>, "vocab-size", ModelConfig::default().vocab_size)?;
            let mut m = TransformerModel::new(model.config(seed, vocab, &cfg)?)?;
            let result = train(&mut m, &train_set, &targs.config(seed, &cfg)?)?;
            m.save(&out)?;
            if let Some(lc) = loss_curve {
                atomic_write(&lc, loss_curve_csv(&result).as_bytes())?;
            }
            let final_loss = result.loss_curve.last().map(|(_, l)| *l).unwrap_or(f32::NAN);
            println!("trained {} steps, final loss {final_loss}, wrote {}",
                result.loss_curve.last().map(|(s, _)| *s).unwrap_or(0), out.display());
            Ok(())
        }
        Command::Attribute { common, ig, model, task, split, samples, out } => {
            let cfg = FileConfig::load(common.config.as_deref())?;
            let ig = ig.config(&cfg)?;
            let m = load_model(&model)?;
            let all = tasks::load_jsonl(&task)?;
            let split = parse_split(split.as_deref(), Split::Adaptation)?;
            let mut set = tasks::filter_split(&all, split);
            if let Some(n) = samples {
                if n == 0 || n > set.len() {
                    return Err(Error::Input(format!(
                        "--samples {n} out of range (split has {})",
                        set.len()
                    )));
                }
                set.truncate(n);
            }
            let sm = with_jobs(common.jobs, || score_dataset(&m, &set, &ig))?;
            save_scores(&sm, &out)?;
            println!(
                "scored {} layers x {} neurons over {} samples, wrote {}",
                sm.n_layers, sm.d_mlp, sm.n_samples, out.display()
            );
            Ok(())
        }
        Command::GridSearch { common, model, scores, task, val_file, max_percent, out } => {
            let cfg = FileConfig::load(common.config.as_deref())?;
            let max = cfg.get(max_percent, "max-percent", DEFAULT_MAX_PERCENT)?;
            let m = load_model(&model)?;
            let sm = load_scores(&scores)?;
            let val_owned: Vec<McqSample> = match &val_file {
                Some(p) => tasks::load_jsonl(p)?,
                None => tasks::load_jsonl(&task)?,
            };
            let val: Vec<&McqSample> = if val_file.is_some() {
                val_owned.iter().collect()
            } else {
                tasks::filter_split(&val_owned, Split::Adaptation)
            };
            let layers: Vec<usize> = (0..m.config.n_layers).collect();
            let gs = with_jobs(common.jobs, || grid_search(&m, &sm, &val, &layers, max))?;
            write_json(&out, &gs)?;
            println!(
                "best layer {} percent {} ({} cells), wrote {}",
                gs.best.layer,
                gs.best.percent,
                gs.surface.len(),
                out.display()
            );
            Ok(())
        }
        Command::Prune { common, model, scores, layer, percent, max_percent, out } => {
            let cfg = FileConfig::load(common.config.as_deref())?;
            let max = cfg.get(max_percent, "max-percent", DEFAULT_MAX_PERCENT)?;
            let m = load_model(&model)?;
            let sm = load_scores(&scores)?;
            let (pruned, pc) = prune(&m, &sm, layer, percent, max)?;
            pruned.save(&out)?;
            println!(
                "masked {} neurons at layer {}, wrote {}",
                pc.neuron_ids.len(),
                pc.layer,
                out.display()
            );
            Ok(())
        }
        Command::RandomPrune { common, model, layer, percent, seed, out } => {
            let cfg = FileConfig::load(common.config.as_deref())?;
            let seed = cfg.get(seed, "seed", 0)?;
            let m = load_model(&model)?;
            let (pruned, pc) = random_prune(&m, layer, percent, seed)?;
            pruned.save(&out)?;
            println!(
                "randomly masked {} neurons at layer {}, wrote {}",
                pc.neuron_ids.len(),
                pc.layer,
                out.display()
            );
            Ok(())
        }
        Command::Eval { common, model, task, split, out } => {
            let _cfg = FileConfig::load(common.config.as_deref())?;
            let m = load_model(&model)?;
            let all = tasks::load_jsonl(&task)?;
            let split = parse_split(split.as_deref(), Split::IdTest)?;
            let set = tasks::filter_split(&all, split);
            let acc = accuracy(&m, &set)?;
            println!("split={} n={} accuracy={acc}", split_name(split), set.len());
            if let Some(p) = out {
                let csv = format!("split,n,accuracy\n{},{},{acc}\n", split_name(split), set.len());
                atomic_write(&p, csv.as_bytes())?;
            }
            Ok(())
        }
        Command::Ablate {
            which,
            common,
            task_args,
            ig,
            model,
            task,
            seed,
            max_percent,
            counts,
            seeds,
            layer,
            percent,
            n_samples,
            out,
        } => {
            let cfg = FileConfig::load(common.config.as_deref())?;
            let seed = cfg.get(seed, "seed", 0)?;
            let max = cfg.get(max_percent, "max-percent", DEFAULT_MAX_PERCENT)?;
            let ig = ig.config(&cfg)?;
            let spec = task_args.spec(seed, &cfg)?;
            let m = load_model(&model)?;
            let samples = tasks::load_jsonl(&task)?;
            let adapt = tasks::filter_split(&samples, Split::Adaptation);
            let ood = tasks::filter_split(&samples, Split::OodTest);
            let csv = with_jobs(common.jobs, || match which.as_str() {
                "sample-count" => ablate_sample_count(
                    &m,
                    &spec,
                    &ood,
                    &counts.unwrap_or_else(|| vec![5, 10, 15, 20]),
                    &ig,
                    max,
                    seed.wrapping_add(100),
                ),
                "sample-selection" => ablate_sample_selection(
                    &m,
                    &adapt,
                    &spec,
                    &ood,
                    &[
                        SelectionStrategy::Random,
                        SelectionStrategy::CorrectOnly,
                        SelectionStrategy::IncorrectOnly,
                    ],
                    &ig,
                    max,
                ),
                "layer-family" => ablate_layer_family(&m, &samples, &ig, max),
                "transfer" => {
                    let sm = score_dataset(&m, &adapt, &ig)?;
                    transfer_report(&m, &sm, &adapt, &ood, max)
                }
                "seed-variance" => {
                    let (l, p) = match (layer, percent) {
                        (Some(l), Some(p)) => (l, p),
                        _ => {
                            let layers: Vec<usize> = (0..m.config.n_layers).collect();
                            let sm = score_dataset(&m, &adapt, &ig)?;
                            let gs = grid_search(&m, &sm, &adapt, &layers, max)?;
                            (gs.best.layer, gs.best.percent)
                        }
                    };
                    let seeds = seeds.unwrap_or_else(|| (100..105).collect());
                    let n = n_samples.unwrap_or(10);
                    let sv = seed_variance(&m, &spec, &ood, l, p, &seeds, n, &ig, max)?;
                    Ok(seed_variance_csv(&sv))
                }
                "timing" => {
                    let t = timing_ablation(&m, &adapt, &ig, &[4, 8, 16, 32], &[1, 2, 4, 8])?;
                    Ok(timing_csv(&t))
                }
                other => Err(Error::Input(format!(
                    "unknown ablation `{other}` (expected sample-count|sample-selection|\
                     layer-family|transfer|seed-variance|timing)"
                ))),
            })?;
            atomic_write(&out, csv.as_bytes())?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Report {
            common,
            task_args,
            ig,
            model,
            task,
            scores,
            seed,
            max_percent,
            out_dir,
        } => {
            let cfg = FileConfig::load(common.config.as_deref())?;
            let seed = cfg.get(seed, "seed", 0)?;
            let max = cfg.get(max_percent, "max-percent", DEFAULT_MAX_PERCENT)?;
            let ig = ig.config(&cfg)?;
            let spec = task_args.spec(seed, &cfg)?;
            let m = load_model(&model)?;
            let sm = load_scores(&scores)?;
            let samples = tasks::load_jsonl(&task)?;
            let mut manifest = BTreeMap::new();
            manifest.insert("model_sha256".into(), json!(hex(&sha256_file(&model)?)));
            manifest.insert("task_sha256".into(), json!(hex(&sha256_file(&task)?)));
            manifest.insert("scores_sha256".into(), json!(hex(&sha256_file(&scores)?)));
            with_jobs(common.jobs, || {
                build_report(&out_dir, &m, &sm, &samples, &spec, &ig, max, seed, manifest)
            })?;
            println!("wrote report to {}", out_dir.display());
            Ok(())
        }
        Command::Pipeline { common, task, model, train_args, ig, seed, max_percent, out_dir } => {
            let cfg = FileConfig::load(common.config.as_deref())?;
            let seed = cfg.get(seed, "seed", 0)?;
            let max = cfg.get(max_percent, "max-percent", DEFAULT_MAX_PERCENT)?;
            let ig = ig.config(&cfg)?;
            let spec = task.spec(seed, &cfg)?;
            with_jobs(common.jobs, || {
                run_full_pipeline(&out_dir, &spec, &model, &train_args, &ig, seed, max, &cfg)
            })
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn build_report(
    out_dir: &Path,
    m: &TransformerModel,
    sm: &ScoreMatrix,
    samples: &[McqSample],
    spec: &TaskSpec,
    ig: &IgConfig,
    max: u32,
    seed: u64,
    mut manifest: BTreeMap<String, serde_json::Value>,
) -> Result<GridSearchResult> {
    let adapt = tasks::filter_split(samples, Split::Adaptation);
    let ood = tasks::filter_split(samples, Split::OodTest);
    let layers: Vec<usize> = (0..m.config.n_layers).collect();
    let gs = grid_search(m, sm, &adapt, &layers, max)?;

    let mut ablations = BTreeMap::new();
    ablations.insert(
        "sample_count".to_string(),
        ablate_sample_count(m, spec, &ood, &[5, 10, 15, 20], ig, max, seed.wrapping_add(100))?,
    );
    ablations.insert(
        "sample_selection".to_string(),
        ablate_sample_selection(
            m,
            &adapt,
            spec,
            &ood,
            &[
                SelectionStrategy::Random,
                SelectionStrategy::CorrectOnly,
                SelectionStrategy::IncorrectOnly,
            ],
            ig,
            max,
        )?,
    );
    ablations.insert("layer_family".to_string(), ablate_layer_family(m, samples, ig, max)?);
    ablations.insert("transfer".to_string(), transfer_report(m, sm, &adapt, &ood, max)?);
    let sv = seed_variance(
        m,
        spec,
        &ood,
        gs.best.layer,
        gs.best.percent,
        &[100, 101, 102, 103, 104],
        spec.n_adaptation,
        ig,
        max,
    )?;
    ablations.insert("seed_variance".to_string(), seed_variance_csv(&sv));
    // timing is intentionally absent: wall-clock is never byte-stable

    manifest.insert("seed".into(), json!(seed));
    manifest.insert("m".into(), json!(ig.m));
    manifest.insert("layer_family".into(), json!(ig.family.to_string()));
    manifest.insert("remax_path".into(), json!(ig.remax_path));
    manifest.insert("max_percent".into(), json!(max));
    manifest.insert("model_fingerprint".into(), json!(hex(&m.fingerprint())));
    manifest.insert("best_layer".into(), json!(gs.best.layer));
    manifest.insert("best_percent".into(), json!(gs.best.percent));

    write_report(
        out_dir,
        &ReportContext { scores: sm.clone(), grid: gs.clone(), ablations, manifest },
    )?;
    Ok(gs)
}

#[allow(clippy::too_many_arguments)]
fn run_full_pipeline(
    out_dir: &Path,
    spec: &TaskSpec,
    model_args: &ModelArgs,
    train_args: &TrainArgs,
    ig: &IgConfig,
    seed: u64,
    max: u32,
    cfg: &FileConfig,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;

    let samples = tasks::generate(spec)?;
    let task_path = out_dir.join("task.jsonl");
    tasks::save_jsonl(&task_path, &samples)?;

    let train_set = tasks::filter_split(&samples, Split::Train);
    let mut model = TransformerModel::new(model_args.config(seed, spec.vocab_size, cfg)?)?;
    let result = train(&mut model, &train_set, &train_args.config(seed, cfg)?)?;
    let model_path = out_dir.join("model.dsmp");
    model.save(&model_path)?;
    atomic_write(&out_dir.join("loss_curve.csv"), loss_curve_csv(&result).as_bytes())?;

    let adapt = tasks::filter_split(&samples, Split::Adaptation);
    let sm = score_dataset(&model, &adapt, ig)?;
    let scores_path = out_dir.join("scores.dsms");
    save_scores(&sm, &scores_path)?;

    let mut manifest = BTreeMap::new();
    manifest.insert("task_sha256".into(), json!(hex(&sha256_file(&task_path)?)));
    manifest.insert("model_sha256".into(), json!(hex(&sha256_file(&model_path)?)));
    manifest.insert("scores_sha256".into(), json!(hex(&sha256_file(&scores_path)?)));
    let gs = build_report(
        &out_dir.join("report"),
        &model,
        &sm,
        &samples,
        spec,
        ig,
        max,
        seed,
        manifest,
    )?;
    write_json(&out_dir.join("grid.json"), &gs)?;

    let (pruned, pc) = prune(&model, &sm, gs.best.layer, gs.best.percent, max)?;
    pruned.save(&out_dir.join("pruned.dsmp"))?;

    let id = tasks::filter_split(&samples, Split::IdTest);
    let ood = tasks::filter_split(&samples, Split::OodTest);
    let results = json!({
        "seed": seed,
        "best_layer": gs.best.layer,
        "best_percent": gs.best.percent,
        "pruned_neurons": pc.neuron_ids,
        "baseline_id_acc": accuracy(&model, &id)?,
        "baseline_ood_acc": accuracy(&model, &ood)?,
        "pruned_id_acc": accuracy(&pruned, &id)?,
        "pruned_ood_acc": accuracy(&pruned, &ood)?,
    });
    write_json(&out_dir.join("results.json"), &results)?;
    println!(
        "pipeline done: best layer {} percent {}, artifacts in {}",
        gs.best.layer,
        gs.best.percent,
        out_dir.display()
    );
    Ok(())
}
