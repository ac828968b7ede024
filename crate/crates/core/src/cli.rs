//! The `akt` command line: dataset generation, training, evaluation,
//! attention benchmarks and cost reports.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_flops, flops_crossover, AttentionVariant, MultiHeadAttention, PaaBlock, PaaConfig};
use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{io_err, Error, Result};
use crate::metrics::{counting_metrics, px_to_cm, spacing_accuracy, paired_spacing, LocalizationAccumulator};
use crate::model::{count_params_flops, AktModel};
use crate::params::ParamStore;
use crate::synthfield::{generate_samples, read_split, write_dataset, Sample, Split};
use crate::tensor::Tensor;
use crate::train::{predict_points, Trainer};

#[derive(Debug, Parser)]
#[command(name = "akt", version, about = "Point localization of maize plants with additive-attention KAN transformers")]
pub struct Cli {
    /// Flat `section.key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset with train/val/test manifests into `--out`.
    Generate {
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Train on the train split; writes checkpoint.bin and loss.csv.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint on a split; writes report.csv.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to `<out>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Score the annotations against themselves (no model).
        #[arg(long)]
        ground_truth: bool,
    },
    /// Time additive against dot-product attention over token counts.
    Bench {
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 20)]
        runs: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [128, 256, 512, 1024])]
        sizes: Vec<usize>,
    },
    /// Analytic parameter and multiply-add counts of the configured model.
    Flops,
}

/// Resolves defaults, the config file and flags, in that order.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let mut cfg = resolve_config(cli)?;
    let w = |out: &mut dyn Write, s: String| out.write_all(s.as_bytes()).map_err(io_err("<stdout>"));
    match &cli.command {
        Command::Generate { scenes } => {
            if let Some(n) = scenes {
                cfg.scenes = *n;
            }
            let sizes = cmd_generate(&cfg)?;
            w(
                out,
                format!(
                    "scenes={}\ntrain={}\nval={}\ntest={}\n",
                    cfg.scenes, sizes[0], sizes[1], sizes[2]
                ),
            )
        }
        Command::Train { data, steps } => {
            if let Some(d) = data {
                cfg.data_dir = d.clone();
            }
            if let Some(s) = steps {
                cfg.train.steps = *s;
            }
            let summary = cmd_train(&cfg)?;
            w(
                out,
                format!(
                    "steps={}\nfirst_loss={}\nfinal_loss={}\ncheckpoint={}\n",
                    summary.steps,
                    summary.first_loss,
                    summary.final_loss,
                    summary.checkpoint.display()
                ),
            )
        }
        Command::Eval {
            data,
            checkpoint,
            split,
            ground_truth,
        } => {
            if let Some(d) = data {
                cfg.data_dir = d.clone();
            }
            let ckpt = checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join("checkpoint.bin"));
            let source = if *ground_truth {
                PredictionSource::GroundTruth
            } else {
                PredictionSource::Checkpoint(ckpt)
            };
            let report = cmd_eval(&cfg, split.parse()?, &source)?;
            std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
            let path = cfg.out_dir.join("report.csv");
            std::fs::write(&path, &report).map_err(io_err(&path))?;
            w(out, report)
        }
        Command::Bench { dim, runs, sizes } => {
            let rows = cmd_bench(*dim, cfg.model.heads, *runs, sizes, cfg.seed)?;
            w(out, format_bench(&rows))
        }
        Command::Flops => w(out, cmd_flops(&cfg)?),
    }
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<[usize; 3]> {
    cfg.field.validate()?;
    let samples = generate_samples(&cfg.field, cfg.scenes)?;
    write_dataset(&cfg.out_dir, &samples)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
    pub checkpoint: PathBuf,
}

fn check_extents(samples: &[Sample], cfg: &RunConfig) -> Result<()> {
    let want = [cfg.model.height, cfg.model.width, 3];
    match samples.iter().find(|s| s.image.shape() != want) {
        Some(s) => Err(Error::Dimension(format!(
            "{} is {:?} but the model expects {want:?}",
            s.name,
            s.image.shape()
        ))),
        None => Ok(()),
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = read_split(&cfg.data_dir, Split::Train)?;
    if data.is_empty() {
        return Err(Error::Usage(format!("no training samples in {}", cfg.data_dir.display())));
    }
    check_extents(&data, cfg)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let ckpt_path = cfg.out_dir.join("checkpoint.bin");
    let log_path = cfg.out_dir.join("loss.csv");

    let mut trainer = Trainer::new(cfg.model.clone(), cfg.train.clone())?;
    let mut losses = Vec::with_capacity(cfg.train.steps);
    let mut log = String::from("step,loss\n");
    let echo = cfg.to_text();
    for step in 0..cfg.train.steps {
        let loss = trainer.train_step(&data)?;
        log.push_str(&format!("{step},{loss}\n"));
        losses.push(loss);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            Checkpoint::from_trainer(echo.clone(), &trainer).save(&ckpt_path)?;
        }
    }
    Checkpoint::from_trainer(echo, &trainer).save(&ckpt_path)?;
    std::fs::write(&log_path, log).map_err(io_err(&log_path))?;
    Ok(TrainSummary {
        steps: losses.len(),
        first_loss: losses.first().copied().unwrap_or(f64::NAN),
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        losses,
        checkpoint: ckpt_path,
    })
}

#[derive(Clone, Debug)]
pub enum PredictionSource {
    Checkpoint(PathBuf),
    GroundTruth,
}

/// Loads a model for `cfg.model` and fills it from `path`.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<(AktModel, ParamStore)> {
    let mut store = ParamStore::new();
    let model = AktModel::new(cfg.model.clone(), &mut store)?;
    Checkpoint::load(path)?.restore_params(&mut store)?;
    Ok((model, store))
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_owned(), |v| v.to_string())
}

/// Localization table, counting errors and, when neighbour annotations are
/// present, spacing accuracy, as CSV plus `key=value` lines.
pub fn cmd_eval(cfg: &RunConfig, split: Split, source: &PredictionSource) -> Result<String> {
    cfg.metric.validate()?;
    let samples = read_split(&cfg.data_dir, split)?;
    let model = match source {
        PredictionSource::Checkpoint(p) => {
            check_extents(&samples, cfg)?;
            Some(load_model(cfg, p)?)
        }
        PredictionSource::GroundTruth => None,
    };
    let mut acc = LocalizationAccumulator::new(&cfg.metric);
    let (mut pred_counts, mut gt_counts) = (Vec::new(), Vec::new());
    let (mut est, mut reference) = (Vec::new(), Vec::new());
    let alpha = *cfg.metric.thresholds.last().expect("validated non-empty") as f64;
    for s in &samples {
        let pred = match &model {
            Some((m, store)) => predict_points(m, store, &s.image, cfg.metric.tau)?,
            None => s.points.clone(),
        };
        acc.add(&pred, &s.points);
        pred_counts.push(pred.len() as f64);
        gt_counts.push(s.points.len() as f64);
        let (e, r) = paired_spacing(&pred, &s.points, &s.adjacent, alpha);
        est.extend(e.into_iter().map(|d| px_to_cm(d, cfg.metric.gsd_mm)));
        reference.extend(r.into_iter().map(|d| px_to_cm(d, cfg.metric.gsd_mm)));
    }
    let loc = acc.report();
    let counting = counting_metrics(&pred_counts, &gt_counts)?;
    let spacing = spacing_accuracy(&est, &reference).ok();

    let mut s = String::from("alpha,precision,recall,f1\n");
    for r in &loc.per_alpha {
        s.push_str(&format!("{},{},{},{}\n", r.alpha, r.precision, r.recall, r.f1));
    }
    s.push_str(&format!("images={}\n", samples.len()));
    s.push_str(&format!("avp={}\navr={}\navf={}\n", loc.avp, loc.avr, loc.avf));
    s.push_str(&format!("mae={}\nmse={}\nrmse_count={}\n", counting.mae, counting.mse, counting.rmse));
    s.push_str(&format!(
        "rmse_cm={}\nr2={}\n",
        fmt_metric(spacing.map(|r| r.rmse)),
        fmt_metric(spacing.map(|r| r.r_squared))
    ));
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub paa_ms: f64,
    pub mha_ms: f64,
    pub paa_flops: f64,
    pub mha_flops: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median forward time in milliseconds of `f` over `runs` calls.
pub fn time_median(runs: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(times))
}

/// Builds both attention blocks at width `dim` and times their forward
/// passes on random `N×dim` tokens for every `N` in `sizes`.
pub fn cmd_bench(dim: usize, heads: usize, runs: usize, sizes: &[usize], seed: u64) -> Result<Vec<BenchRow>> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let paa = PaaBlock::new(&mut store, "paa", PaaConfig::new(dim), rng)?;
    let mha = MultiHeadAttention::new(&mut store, "mha", dim, heads, rng)?;
    let mut rows = Vec::new();
    for &n in sizes {
        let x = random_tokens(n, dim, rng);
        let paa_ms = time_median(runs, || {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            paa.forward(&mut g, &store, v).map(drop)
        })?;
        let mha_ms = time_median(runs, || {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            mha.forward(&mut g, &store, v).map(drop)
        })?;
        rows.push(BenchRow {
            n,
            paa_ms,
            mha_ms,
            paa_flops: attention_flops(AttentionVariant::Paa, n, dim)?,
            mha_flops: attention_flops(AttentionVariant::Mha, n, dim)?,
        });
    }
    Ok(rows)
}

pub fn random_tokens(n: usize, d: usize, rng: &mut impl rand::Rng) -> Tensor {
    let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(&[n, d], data).expect("finite by construction")
}

/// CSV with per-size medians and the time ratio to the previous size.
pub fn format_bench(rows: &[BenchRow]) -> String {
    let mut s = String::from("n,paa_ms,mha_ms,paa_flops,mha_flops,paa_ratio,mha_ratio\n");
    for (i, r) in rows.iter().enumerate() {
        let (pr, mr) = match i.checked_sub(1).map(|j| &rows[j]) {
            Some(p) => ((r.paa_ms / p.paa_ms).to_string(), (r.mha_ms / p.mha_ms).to_string()),
            None => ("nan".into(), "nan".into()),
        };
        s.push_str(&format!(
            "{},{:.4},{:.4},{},{},{pr},{mr}\n",
            r.n, r.paa_ms, r.mha_ms, r.paa_flops, r.mha_flops
        ));
    }
    s
}

pub fn cmd_flops(cfg: &RunConfig) -> Result<String> {
    let cost = count_params_flops(&cfg.model)?;
    let other = match cfg.model.encoder_attention {
        AttentionVariant::Paa => AttentionVariant::Mha,
        AttentionVariant::Mha => AttentionVariant::Paa,
    };
    let alt = count_params_flops(&crate::model::ModelConfig {
        encoder_attention: other,
        ..cfg.model.clone()
    })?;
    let mut s = String::new();
    for (group, p, f) in [
        ("backbone", cost.params.backbone, cost.flops.backbone),
        ("encoder", cost.params.encoder, cost.flops.encoder),
        ("decoder", cost.params.decoder, cost.flops.decoder),
        ("head", cost.params.head, cost.flops.head),
        ("total", cost.params.total(), cost.flops.total()),
    ] {
        s.push_str(&format!("params.{group}={p}\nflops.{group}={f}\n"));
    }
    s.push_str(&format!("encoder_attention={}\ntokens={}\n", cfg.model.encoder_attention, cfg.model.tokens()));
    s.push_str(&format!("flops.total_with_{other}={}\n", alt.flops.total()));
    s.push_str(&format!("crossover_tokens={}\n", flops_crossover(cfg.model.embed_dim)?));
    Ok(s)
}
