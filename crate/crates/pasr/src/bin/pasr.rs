//! Operator-facing command surface tying the pipeline together.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pasr::checkpoint;
use pasr::config::{ModelConfig, RunConfig, SamplerKind};
use pasr::error::Result;
use pasr::geocode::{encode_geohash, GeoCoordinate};
use pasr::metrics;
use pasr::pipeline::{self, CheckInDataset, SynthSpec};

#[derive(Parser)]
#[command(name = "pasr", about = "Sequential location recommender", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelFlags {
    /// Embedding width per table
    #[arg(long, default_value_t = 50)]
    d: usize,
    /// Feed-forward hidden width
    #[arg(long, default_value_t = 128)]
    d_h: usize,
    /// Self-attention layers
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Fixed sequence length
    #[arg(long, default_value_t = 50)]
    m: usize,
    /// Geohash n-gram order
    #[arg(long, default_value_t = 3)]
    ngram: usize,
    /// Geohash prefix length
    #[arg(long, default_value_t = 6)]
    geohash_prefix_len: usize,
    /// Grid intervals per axis
    #[arg(long, default_value_t = 5000)]
    grid_intervals: usize,
    /// kNN pool size for proximity-aware sampling
    #[arg(long, default_value_t = 2000)]
    knn: usize,
    /// Negatives per supervised step
    #[arg(long, default_value_t = 5)]
    neg_count: usize,
    /// Importance-weight temperature
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Negative sampler
    #[arg(long, default_value = "knn-uniform")]
    sampler: String,
    /// Drop the geography encoder
    #[arg(long)]
    no_geo_encoder: bool,
    /// Drop the grid mapper embeddings
    #[arg(long)]
    no_grid_mapper: bool,
    /// Drop the target-aware attention decoder
    #[arg(long)]
    no_target_decoder: bool,
    /// Plain BCE instead of importance-weighted BCE
    #[arg(long)]
    unweighted_loss: bool,
}

impl ModelFlags {
    fn to_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            d: self.d,
            d_h: self.d_h,
            layers: self.layers,
            m: self.m,
            ngram: self.ngram,
            geohash_prefix_len: self.geohash_prefix_len,
            grid_intervals: self.grid_intervals,
            knn: self.knn,
            neg_count: self.neg_count,
            temperature: self.temperature,
            sampler: self.sampler.parse::<SamplerKind>()?,
            use_geo_encoder: !self.no_geo_encoder,
            use_grid_mapper: !self.no_grid_mapper,
            use_target_decoder: !self.no_target_decoder,
            weighted_loss: !self.unweighted_loss,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Clone)]
struct RunFlags {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.0001)]
    weight_decay: f64,
    /// Minimum check-ins per user during filtering
    #[arg(long, default_value_t = 20)]
    min_user_checkins: usize,
    /// Minimum visits per location during filtering
    #[arg(long, default_value_t = 10)]
    min_loc_visits: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and summarize a check-in dataset
    Ingest {
        /// Tab-separated check-in file
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 20)]
        min_user_checkins: usize,
        #[arg(long, default_value_t = 10)]
        min_loc_visits: usize,
    },
    /// Train a model and write a checkpoint plus training log
    Train {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = ".")]
        output_dir: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Evaluate a checkpoint on a dataset's held-out split
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Also write metrics files into this directory
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Encode "lat lon" lines from stdin as geohashes
    EncodeGeohash {
        /// Geohash string length
        #[arg(long, default_value_t = 10)]
        length: usize,
    },
    /// Generate a clustered synthetic check-in dataset
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        users: usize,
        #[arg(long, default_value_t = 200)]
        locations: usize,
        #[arg(long, default_value_t = 10)]
        clusters: usize,
        #[arg(long, default_value_t = 0.9)]
        locality: f64,
        #[arg(long, default_value_t = 60)]
        checkins_per_user: usize,
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
    },
    /// Train and evaluate the full ablation matrix
    Ablate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = ".")]
        output_dir: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        run: RunFlags,
    },
}

fn load_and_filter(input: &Path, min_user: usize, min_loc: usize) -> Result<CheckInDataset> {
    let ds = pipeline::ingest(input)?;
    if ds.malformed_rows > 0 {
        eprintln!("warning: skipped {} malformed rows", ds.malformed_rows);
    }
    pipeline::filter_dataset(&ds, min_user, min_loc)
}

fn train_once(cfg: &RunConfig, ds: &CheckInDataset) -> Result<(pasr::model::Pasr, String, metrics::MetricTable)> {
    let built = pipeline::build_sequences(ds, cfg.model.m, 100, cfg.seed);
    if built.skipped_users > 0 {
        eprintln!("warning: skipped {} users with too few check-ins", built.skipped_users);
    }
    let outcome = pipeline::train(cfg, ds, &built.train)?;
    let table = metrics::evaluate(&outcome.model, &built.eval)?;
    Ok((outcome.model, pipeline::format_log(&outcome.log), table))
}

fn cmd_train(input: &Path, output_dir: &Path, model: &ModelFlags, run: &RunFlags) -> Result<()> {
    let cfg = RunConfig {
        model: model.to_config()?,
        dataset: input.display().to_string(),
        seed: run.seed,
        epochs: run.epochs,
        batch_size: run.batch_size,
        learning_rate: run.learning_rate,
        weight_decay: run.weight_decay,
        output_dir: output_dir.display().to_string(),
    };
    std::fs::create_dir_all(output_dir)?;
    let ds = load_and_filter(input, run.min_user_checkins, run.min_loc_visits)?;
    let (trained, log, table) = train_once(&cfg, &ds)?;
    checkpoint::save(&output_dir.join("model.ckpt"), &cfg, &trained)?;
    std::fs::write(output_dir.join("train.log"), log)?;
    cfg.save(&output_dir.join("run.conf"))?;
    std::fs::write(output_dir.join("metrics.kv"), table.to_kv())?;
    print!("{}", table.to_tsv());
    Ok(())
}

fn cmd_evaluate(ckpt: &Path, input: &Path, output_dir: Option<&Path>) -> Result<()> {
    let (cfg, model) = checkpoint::load(ckpt)?;
    let ds = load_and_filter(input, 1, 1)?;
    let built = pipeline::build_sequences(&ds, cfg.model.m, 100, cfg.seed);
    let table = metrics::evaluate(&model, &built.eval)?;
    print!("{}", table.to_tsv());
    if let Some(dir) = output_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.tsv"), table.to_tsv())?;
        std::fs::write(dir.join("metrics.kv"), table.to_kv())?;
    }
    Ok(())
}

const ABLATION_VARIANTS: [&str; 7] = ["PASR", "US", "BCE", "-GE", "-GM", "-GE-GM", "-TAAD"];

fn variant_config(base: &ModelConfig, name: &str) -> ModelConfig {
    let mut cfg = base.clone();
    match name {
        "PASR" => {}
        "US" => cfg.sampler = SamplerKind::Uniform,
        "BCE" => cfg.weighted_loss = false,
        "-GE" => cfg.use_geo_encoder = false,
        "-GM" => cfg.use_grid_mapper = false,
        "-GE-GM" => {
            cfg.use_geo_encoder = false;
            cfg.use_grid_mapper = false;
        }
        "-TAAD" => cfg.use_target_decoder = false,
        other => unreachable!("unknown variant {other}"),
    }
    cfg
}

fn cmd_ablate(input: &Path, output_dir: &Path, model: &ModelFlags, run: &RunFlags) -> Result<()> {
    std::fs::create_dir_all(output_dir)?;
    let ds = load_and_filter(input, run.min_user_checkins, run.min_loc_visits)?;
    let base = model.to_config()?;
    let mut rows = vec![
        "variant\tHR@5\tNDCG@5\tHR@10\tNDCG@10".to_string(),
    ];
    for name in ABLATION_VARIANTS {
        let cfg = RunConfig {
            model: variant_config(&base, name),
            dataset: input.display().to_string(),
            seed: run.seed,
            epochs: run.epochs,
            batch_size: run.batch_size,
            learning_rate: run.learning_rate,
            weight_decay: run.weight_decay,
            output_dir: output_dir.display().to_string(),
        };
        let (_, _, table) = train_once(&cfg, &ds)?;
        rows.push(format!(
            "{name}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            table.hr5, table.ndcg5, table.hr10, table.ndcg10
        ));
        eprintln!("{name} done");
    }
    let report = rows.join("\n") + "\n";
    std::fs::write(output_dir.join("ablation.tsv"), &report)?;
    print!("{report}");
    Ok(())
}

fn cmd_encode_geohash(length: usize) -> Result<()> {
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for line in stdin.lock().lines() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 2 {
            continue;
        }
        let lat: f64 = fields[0]
            .parse()
            .map_err(|_| pasr::PasrError::Input(format!("bad latitude '{}'", fields[0])))?;
        let lon: f64 = fields[1]
            .parse()
            .map_err(|_| pasr::PasrError::Input(format!("bad longitude '{}'", fields[1])))?;
        let coord = GeoCoordinate::new(lat, lon)?;
        writeln!(out, "{}", encode_geohash(&coord, length)?)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { input, min_user_checkins, min_loc_visits } => {
            let ds = load_and_filter(&input, min_user_checkins, min_loc_visits)?;
            print!("{}", ds.summary());
            Ok(())
        }
        Command::Train { input, output_dir, model, run: r } => cmd_train(&input, &output_dir, &model, &r),
        Command::Evaluate { checkpoint, input, output_dir } => {
            cmd_evaluate(&checkpoint, &input, output_dir.as_deref())
        }
        Command::EncodeGeohash { length } => cmd_encode_geohash(length),
        Command::Synth { output, seed, users, locations, clusters, locality, checkins_per_user, noise } => {
            let spec = SynthSpec { users, locations, clusters, locality, checkins_per_user, noise };
            let ds = pipeline::generate_synthetic(&spec, seed)?;
            pipeline::write_dataset(&ds, &output)?;
            print!("{}", ds.summary());
            Ok(())
        }
        Command::Ablate { input, output_dir, model, run: r } => cmd_ablate(&input, &output_dir, &model, &r),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
