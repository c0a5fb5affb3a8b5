use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sketchformer::dataset::DEFAULT_RDP_EPSILON;
use sketchformer::embed::{Metric, DEFAULT_INTERPOLATION_STEPS};

#[derive(Debug, Parser)]
#[command(name = "sketchformer", version, about = "Transformer sketch autoencoder: data, training, inference and serving")]
pub struct Cli {
    /// Seed for every random choice; defaults to 0 or the config file's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Directory that relative paths are resolved against.
    #[arg(long, global = true, env = "SKETCHFORMER_DATA")]
    pub data_root: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert QuickDraw ndjson into a preprocessed dataset cache.
    Ingest(IngestArgs),
    /// Write a synthetic five-class corpus as QuickDraw ndjson.
    Synth(SynthArgs),
    /// Fit a K-means codebook over pen offsets of the training split.
    FitDict(FitDictArgs),
    /// Train a sketch autoencoder.
    Train(TrainArgs),
    /// Tokenize sketches, or embed them with --embedding.
    Encode(EncodeArgs),
    /// Turn `encode` output back into sketches.
    Decode(DecodeArgs),
    /// Encode each sketch and decode it from its embedding.
    Reconstruct(SketchIoArgs),
    /// Decode a spherical path between two sketches' embeddings.
    Interpolate(InterpolateArgs),
    /// Decode Gaussian perturbations of each sketch's embedding.
    Perturb(PerturbArgs),
    /// Round-trip error of grid and dictionary tokenizers as CSV.
    QuantizationReport(QuantizationArgs),
    /// Train joint sketch/raster heads for sketch-based image retrieval.
    TrainJoint(TrainJointArgs),
    /// Build an embedding dump to search with `retrieve` or `serve`.
    Index(IndexArgs),
    /// k-nearest neighbours of each query sketch in an embedding dump.
    Retrieve(RetrieveArgs),
    /// Classify sketches and report accuracy.
    EvalClassify(EvalClassifyArgs),
    /// Category-level retrieval quality: mAP and precision@k.
    EvalRetrieval(EvalRetrievalArgs),
    /// Run the HTTP inference service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Training sketches, one QuickDraw record per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Held-out sketches.
    #[arg(long, conflicts_with = "test_fraction")]
    pub test_input: Option<PathBuf>,
    /// Fraction of --input held out at random instead of --test-input.
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Ramer-Douglas-Peucker tolerance in canvas units.
    #[arg(long, default_value_t = DEFAULT_RDP_EPSILON)]
    pub rdp_epsilon: f64,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    /// Defaults to stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitDictArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub k: usize,
    /// Pen offsets sampled for clustering.
    #[arg(long, default_value_t = 100_000)]
    pub sample: usize,
    /// Share of the sample drawn from pen-lift transitions.
    #[arg(long, default_value_t = 0.2)]
    pub lift_fraction: f64,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Continuous,
    Dict,
    Grid,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// key = value file with training and model settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Continuous)]
    pub mode: Mode,
    /// Codebook for --mode dict.
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    /// Cells per side for --mode grid.
    #[arg(long, default_value_t = 100)]
    pub grid_n: usize,
    /// Randomly reorder strokes in every training batch.
    #[arg(long)]
    pub shuffle_strokes: bool,
    /// Total optimizer steps, overriding the config file.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from a checkpoint that carries optimizer state.
    #[arg(long, conflicts_with_all = ["config", "mode", "codebook", "grid_n", "shuffle_strokes"])]
    pub resume: Option<PathBuf>,
    /// Per-step loss records as ndjson.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SketchIoArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// QuickDraw ndjson.
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[command(flatten)]
    pub io: SketchIoArgs,
    /// Emit the bottleneck embedding instead of tokens.
    #[arg(long)]
    pub embedding: bool,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Output of `encode` without --embedding.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[command(flatten)]
    pub io: SketchIoArgs,
    /// First sketch: its key_id or 0-based line number.
    #[arg(long)]
    pub a: String,
    #[arg(long)]
    pub b: String,
    /// Frames including both endpoints.
    #[arg(long, default_value_t = DEFAULT_INTERPOLATION_STEPS)]
    pub steps: usize,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[command(flatten)]
    pub io: SketchIoArgs,
    /// Standard deviation of the noise added to the embedding.
    #[arg(long)]
    pub sigma: f64,
}

#[derive(Debug, Args)]
pub struct QuantizationArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "10,20,30,40,50,60,70,80,90,100")]
    pub grid_n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "500,1000")]
    pub dict_k: Vec<usize>,
    #[arg(long, default_value_t = 100_000)]
    pub sample: usize,
    #[arg(long, default_value_t = 0.2)]
    pub lift_fraction: f64,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainJointArgs {
    /// Trained sketch model feeding the vector branch.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub raster_steps: u64,
    #[arg(long, default_value_t = 600)]
    pub phase1_steps: u64,
    #[arg(long, default_value_t = 300)]
    pub phase2_steps: u64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Also update the sketch encoder; the updated model goes to --encoder-output.
    #[arg(long, requires = "encoder_output")]
    pub finetune_encoder: bool,
    #[arg(long)]
    pub encoder_output: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Index raster embeddings in the joint space instead of sketch embeddings.
    #[arg(long)]
    pub joint: Option<PathBuf>,
    #[arg(long, required_unless_present = "input", conflicts_with = "input")]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
    /// QuickDraw ndjson whose words name the model's classes.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub io: SketchIoArgs,
    #[arg(long)]
    pub index: PathBuf,
    /// Query the joint raster space built by `index --joint`.
    #[arg(long)]
    pub joint: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = Metric::Cosine)]
    pub metric: Metric,
}

#[derive(Debug, Args)]
pub struct EvalClassifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset cache; its test split is classified.
    #[arg(long, required_unless_present = "input", conflicts_with = "input")]
    pub dataset: Option<PathBuf>,
    /// QuickDraw ndjson instead of a dataset.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Per-sketch predictions as ndjson.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalRetrievalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Test sketches query the training split.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Search rasters in the joint space.
    #[arg(long)]
    pub joint: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = Metric::Cosine)]
    pub metric: Metric,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long, default_value_t = Metric::Cosine)]
    pub metric: Metric,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub listen: SocketAddr,
    #[arg(long, default_value_t = 1 << 20)]
    pub max_body_bytes: usize,
    #[arg(long, default_value_t = 4096)]
    pub max_points: usize,
    /// Allowed browser origins; repeat for several.
    #[arg(long = "cors-origin")]
    pub cors_origins: Vec<String>,
}
