use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "inpaint",
    version,
    about = "Cyclic GAN-inversion image inpainting: training, dataset synthesis, inference and serving"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the generator and its encoder on a directory of images
    TrainCrg(TrainArgs),
    /// Train the artifact discriminator on a synth-distort dataset
    TrainDisc(TrainArgs),
    /// Train the refiner against a coarse bundle
    TrainRefiner(TrainArgs),
    /// Write a labelled artifact dataset (clean, mild and heavy distortions)
    SynthDistort(SynthDistortArgs),
    /// Write procedurally generated face-like images
    SynthFaces(SynthFacesArgs),
    /// Inpaint one image and write the result directory
    Inpaint(InpaintArgs),
    /// Compare fill policies side by side
    Grid(GridArgs),
    /// Run the HTTP job service
    Serve(ServeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TrainCrg(_) => "train-crg",
            Command::TrainDisc(_) => "train-disc",
            Command::TrainRefiner(_) => "train-refiner",
            Command::SynthDistort(_) => "synth-distort",
            Command::SynthFaces(_) => "synth-faces",
            Command::Inpaint(_) => "inpaint",
            Command::Grid(_) => "grid",
            Command::Serve(_) => "serve",
        }
    }
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    /// Training config (TOML); flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training data directory
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for checkpoints and reports
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Epochs; for train-crg both the GAN and encoder phases
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Existing bundle to extend; required by train-refiner
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Seed for initialisation, shuffling and the validation split
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the effective config and exit
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct SynthDistortArgs {
    /// Flag defaults as TOML `key = value` lines
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Source images; synthetic faces are used when omitted
    #[arg(long)]
    pub sources: Option<PathBuf>,
    /// Synthetic source faces to draw when --sources is omitted
    #[arg(long, default_value_t = 200)]
    pub faces: usize,
    /// Number of samples to write
    #[arg(long, default_value_t = 600)]
    pub total: usize,
    /// Side length of the written images
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Output directory (manifest.jsonl and images/)
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for sources, masks and distortion parameters
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct SynthFacesArgs {
    /// Flag defaults as TOML `key = value` lines
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of faces
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    /// Side length in pixels
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of the first face
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FillKind {
    Mean,
    Noise,
    White,
    Black,
    Constant,
    Sketch,
}

/// Options shared by `inpaint` and `grid`.
#[derive(Args, Debug)]
pub struct EngineArgs {
    /// Model bundle checkpoint
    #[arg(long)]
    pub bundle: PathBuf,
    /// Input image (PNG or JPEG)
    #[arg(long)]
    pub image: PathBuf,
    /// Grayscale mask; black marks the hole
    #[arg(long)]
    pub mask: PathBuf,
    /// Number of embed-generate-composite cycles
    #[arg(long, default_value_t = 10)]
    pub cycles: usize,
    /// Standard deviation of the noise fill
    #[arg(long, default_value_t = 0.25)]
    pub noise_sigma: f32,
    /// Colour of the constant fill as r,g,b in [-1, 1]
    #[arg(long)]
    pub constant_color: Option<String>,
    /// Keep every cycle instead of selecting one with the discriminator
    #[arg(long)]
    pub no_discriminator: bool,
    /// Skip the refiner
    #[arg(long)]
    pub no_refine: bool,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for the noise fill
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct InpaintArgs {
    /// Flag defaults as TOML `key = value` lines
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub engine: EngineArgs,
    /// Initial hole content; defaults to sketch when --sketch is given
    #[arg(long, value_enum)]
    pub fill: Option<FillKind>,
    /// RGBA sketch drawn inside the hole
    #[arg(long)]
    pub sketch: Option<PathBuf>,
    /// Stop after consecutive score decreases once ten cycles have run
    #[arg(long)]
    pub early_stop: bool,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct GridArgs {
    /// Flag defaults as TOML `key = value` lines
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub engine: EngineArgs,
    /// Fill policies, one montage row each
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "mean,noise,white,black"
    )]
    pub fills: Vec<FillKind>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct ServeArgs {
    /// Flag defaults as TOML `key = value` lines
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Listen address
    #[arg(long, env = "INPAINT_LISTEN", default_value = "127.0.0.1:8080")]
    pub listen: SocketAddr,
    /// Overrides the port of --listen
    #[arg(long, env = "INPAINT_PORT")]
    pub port: Option<u16>,
    /// Directory holding job results
    #[arg(long, env = "INPAINT_RUNS_DIR", default_value = "runs")]
    pub runs: PathBuf,
    /// Directory of *.ckpt bundles
    #[arg(long, env = "INPAINT_BUNDLES_DIR", default_value = "bundles")]
    pub bundles: PathBuf,
    /// Worker threads running jobs
    #[arg(long, env = "INPAINT_WORKERS", default_value_t = 1)]
    pub workers: usize,
    /// Bundle name to load at startup
    #[arg(long, env = "INPAINT_BUNDLE")]
    pub bundle: Option<String>,
    /// Seed for jobs submitted without one
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
