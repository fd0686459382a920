use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;

use clap::{ArgGroup, Args, Subcommand, ValueEnum};
use priorfield::embedding_diffusion::{
    read_pairs, sample, sliced_wasserstein, write_pairs, Denoiser, DiffusionCheckpoint, EmbeddingPair, Generator,
    TrainConfig, Trainer,
};
use priorfield::rng::{RngStreams, Stream};
use serde_json::json;

use crate::error::{usage, CliResult};
use crate::files::{read_json, unix_time, write_json_atomic};

/// Random projections for the sliced-Wasserstein report.
const SW_PROJECTIONS: usize = 256;

/// RNG window for generated data and reference draws, past any training step.
const DATA_WINDOW: u64 = 1 << 30;

#[derive(Subcommand)]
pub enum DiffusionCommand {
    /// Fit a conditional denoiser; writes an EDIF checkpoint and a manifest.
    Train(TrainArgs),
    /// Draw samples from an EDIF checkpoint into an EPRS dump.
    Sample(SampleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Preset {
    /// Small network sized for a laptop CPU.
    Desk,
    /// Full-size mapping-network hyperparameters.
    Full,
}

#[derive(Args)]
#[command(group(ArgGroup::new("dataset").required(true).args(["data", "generator"])))]
pub struct TrainArgs {
    /// EPRS dataset file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Built-in synthetic dataset: gaussian_mixture or rings.
    #[arg(long, value_parser = parse_generator)]
    generator: Option<Generator>,
    /// Pairs drawn from --generator.
    #[arg(long, default_value_t = 20_000)]
    pairs: usize,
    /// Output EDIF checkpoint; the manifest goes next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "desk", conflicts_with = "config")]
    preset: Preset,
    /// JSON training config; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Loss-curve JSON lines; standard output when omitted.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
pub struct SampleArgs {
    /// EDIF checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Output EPRS dump of (condition, sample) pairs.
    #[arg(long)]
    out: PathBuf,
    /// Samples per condition.
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// One-hot condition for this label; every label in turn when neither
    /// this nor --condition is given.
    #[arg(long, conflicts_with = "condition")]
    label: Option<usize>,
    /// Explicit condition vector, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1.., allow_negative_numbers = true)]
    condition: Option<Vec<f64>>,
    /// Use the raw parameters instead of the EMA shadow.
    #[arg(long)]
    raw: bool,
    /// Report the sliced-Wasserstein distance to this generator's ground truth
    /// for every one-hot label.
    #[arg(long, value_parser = parse_generator)]
    reference: Option<Generator>,
}

fn parse_generator(s: &str) -> Result<Generator, String> {
    Generator::from_name(s).ok_or_else(|| {
        let names: Vec<_> = Generator::ALL.iter().map(|g| g.name()).collect();
        format!("unknown generator {s:?}, expected one of {}", names.join(", "))
    })
}

pub fn run(cmd: DiffusionCommand) -> CliResult {
    match cmd {
        DiffusionCommand::Train(a) => train(a),
        DiffusionCommand::Sample(a) => sample_cmd(a),
    }
}

fn manifest_path(out: &std::path::Path) -> PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(".manifest.json");
    PathBuf::from(p)
}

fn train(args: TrainArgs) -> CliResult {
    let started = unix_time();
    let mut config = match (&args.config, args.preset) {
        (Some(p), _) => read_json::<TrainConfig>(p)?,
        (None, Preset::Desk) => TrainConfig::default(),
        (None, Preset::Full) => TrainConfig::full(),
    };
    if let Some(v) = args.steps {
        config.steps = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.lr {
        config.lr = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    config.validate()?;

    let (data, source) = match (&args.data, args.generator) {
        (Some(p), _) => (read_pairs(&mut BufReader::new(File::open(p)?))?, json!({"file": p})),
        (None, Some(g)) => {
            let mut rng = RngStreams::new(config.seed).at_step(Stream::Dataset, DATA_WINDOW);
            (g.sample_pairs(args.pairs, &mut rng), json!({"generator": g.name(), "pairs": args.pairs}))
        }
        (None, None) => return Err(usage("one of --data or --generator is required")),
    };
    let first = data.first().ok_or_else(|| usage("the dataset is empty"))?;
    let (d, dc) = (first.target.len(), first.condition.len());

    let mut metrics: Box<dyn Write> = match &args.metrics {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    };
    let mut trainer = Trainer::new(config.clone(), d, dc)?;
    let mut last = None;
    let mut write_err = None;
    trainer.train(&data, |rec| {
        if let Err(e) = writeln!(metrics, "{}", rec.json_line()) {
            write_err.get_or_insert(e);
        }
        last = Some(*rec);
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    metrics.flush()?;
    trainer.checkpoint().save(&args.out)?;

    let manifest = json!({
        "command": "diffusion train",
        "preset": match (&args.config, args.preset) {
            (Some(_), _) => "config",
            (None, Preset::Desk) => "desk",
            (None, Preset::Full) => "full",
        },
        "seed": config.seed,
        "config": config,
        "dataset": source,
        "data_dim": d,
        "cond_dim": dc,
        "steps_completed": trainer.step(),
        "final_loss": last.as_ref().map(|r| r.loss),
        "checkpoint": args.out,
        "started_at": started,
        "finished_at": unix_time(),
    });
    write_json_atomic(&manifest_path(&args.out), &manifest)?;
    Ok(())
}

fn moments(xs: &[Vec<f64>], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = xs.len().max(1) as f64;
    let mean: Vec<f64> = (0..d).map(|i| xs.iter().map(|x| x[i]).sum::<f64>() / n).collect();
    let std = (0..d)
        .map(|i| (xs.iter().map(|x| (x[i] - mean[i]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    (mean, std)
}

fn sample_cmd(args: SampleArgs) -> CliResult {
    let ckpt = DiffusionCheckpoint::load(&args.model)?;
    let denoiser = if args.raw { ckpt.denoiser.clone() } else { ckpt.ema_denoiser()? };
    let (d, dc) = (denoiser.data_dim(), denoiser.cond_dim());
    let conditions: Vec<Vec<f64>> = match (&args.condition, args.label) {
        (Some(c), _) => vec![c.clone()],
        (None, Some(k)) if k < dc => vec![one_hot(k, dc)],
        (None, Some(k)) => return Err(usage(format!("label {k} out of range for a {dc}-dimensional condition"))),
        (None, None) if dc == 0 => vec![Vec::new()],
        (None, None) => (0..dc).map(|k| one_hot(k, dc)).collect(),
    };
    if args.count == 0 {
        return Err(usage("--count must be at least 1"));
    }

    let streams = RngStreams::new(args.seed);
    let mut rng = streams.stream(Stream::Diffusion);
    let mut pairs = Vec::with_capacity(conditions.len() * args.count);
    let mut per_condition = Vec::new();
    for cond in &conditions {
        let xs = (0..args.count)
            .map(|_| sample(cond, &denoiser, &ckpt.schedule, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let (mean, std) = moments(&xs, d);
        let mut entry = json!({"condition": cond, "count": xs.len(), "mean": mean, "std": std});
        if let Some(g) = args.reference {
            if let Some(label) = (0..g.labels()).find(|&k| g.condition(k) == *cond) {
                let window = DATA_WINDOW + label as u64;
                let mut truth_rng = streams.at_step(Stream::Dataset, window);
                let truth: Vec<Vec<f64>> = (0..args.count).map(|_| g.sample_target(label, &mut truth_rng)).collect();
                let mut proj_rng = streams.at_step(Stream::Diffusion, window);
                entry["sliced_wasserstein"] = json!(sliced_wasserstein(&xs, &truth, SW_PROJECTIONS, &mut proj_rng)?);
            }
        }
        per_condition.push(entry);
        pairs.extend(xs.into_iter().map(|target| EmbeddingPair {
            condition: cond.clone(),
            target,
        }));
    }
    let mut w = BufWriter::new(File::create(&args.out)?);
    write_pairs(&mut w, &pairs)?;
    w.flush()?;

    let all: Vec<Vec<f64>> = pairs.iter().map(|p| p.target.clone()).collect();
    let (mean, std) = moments(&all, d);
    let summary = json!({
        "count": all.len(),
        "data_dim": d,
        "weights": if args.raw { "raw" } else { "ema" },
        "mean": mean,
        "std": std,
        "per_condition": per_condition,
    });
    println!("{summary}");
    Ok(())
}

fn one_hot(k: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}
