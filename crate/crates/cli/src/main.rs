use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dvf::config::RunConfig;
use dvf::dataset::Split;
use dvf::pipeline::{self, Component};
use dvf::synth::{self, SynthConfig};
use dvf::DvfError;
use serde_json::json;

#[derive(Parser)]
#[command(name = "dvf", version, about = "Fine-grained image retrieval with dual visual filtering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration; every key has a default.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=20`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, DvfError> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shape/texture corpus with fixture detections.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 40)]
        per_class: usize,
        #[arg(long, default_value_t = 256)]
        image_size: u32,
        /// Smallest object box area as a fraction of the frame.
        #[arg(long, default_value_t = 0.2)]
        scale_min: f64,
        #[arg(long, default_value_t = 0.4)]
        scale_max: f64,
        #[arg(long, default_value_t = 12)]
        clutter: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Crop every image around its detected object.
    Preprocess(ConfigArgs),
    /// Train the encoder on the train split.
    Train(ConfigArgs),
    /// Embed a split with the trained checkpoint.
    Embed {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "test", value_parser = ["train", "test"])]
        split: String,
    },
    /// Recall@K on the embedded test split.
    Eval(ConfigArgs),
    /// Nearest test images for a query image.
    Retrieve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        query: PathBuf,
        #[arg(long, default_value_t = 8)]
        top_k: usize,
    },
    /// Train and evaluate component variants and an optional k sweep.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Components to ablate: ovf, svf, dmt, importance_generator.
        #[arg(long, value_delimiter = ',')]
        toggles: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        k_sweep: Vec<usize>,
    },
    /// Render the tokens kept by the filter for one image.
    VizTokens {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        image: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), DvfError> {
    match cli.command {
        Command::Synth {
            out,
            classes,
            per_class,
            image_size,
            scale_min,
            scale_max,
            clutter,
            seed,
        } => {
            let cfg = SynthConfig {
                classes,
                per_class,
                image_size,
                object_scale: (scale_min, scale_max),
                clutter,
                seed,
                ..SynthConfig::default()
            };
            let summary = synth::generate(&cfg, &out)?;
            dvf::io::write_json(&out.join("synth.json"), &json!({"config": cfg, "summary": summary}))?;
            println!(
                "wrote {} images in {} classes to {}",
                summary.images,
                summary.classes.len(),
                summary.images_dir.display()
            );
        }
        Command::Preprocess(args) => {
            let cfg = args.load()?;
            pipeline::write_run_snapshot(&cfg, "preprocess", json!({}))?;
            let manifest = pipeline::raw_manifest(&cfg)?;
            let provider = pipeline::make_provider(&cfg)?;
            let summary = pipeline::preprocess(&cfg, &manifest, provider.as_ref())?;
            println!("{}", summary.line());
        }
        Command::Train(args) => {
            let cfg = args.load()?;
            pipeline::write_run_snapshot(&cfg, "train", json!({}))?;
            let outcome = pipeline::train(&cfg)?;
            let last = outcome.steps.last().map_or(f64::NAN, |s| s.loss_total);
            println!(
                "trained {} steps, final loss {last:.4}; checkpoint {}",
                outcome.steps.len(),
                outcome.checkpoint.display()
            );
        }
        Command::Embed { cfg: args, split } => {
            let cfg = args.load()?;
            pipeline::write_run_snapshot(&cfg, "embed", json!({"split": split}))?;
            let split = if split == "train" { Split::Train } else { Split::Test };
            let (path, store) = pipeline::embed(&cfg, split)?;
            println!("embedded {} images into {}", store.len(), path.display());
        }
        Command::Eval(args) => {
            let cfg = args.load()?;
            pipeline::write_run_snapshot(&cfg, "eval", json!({}))?;
            let report = pipeline::eval(&cfg)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", report.table());
        }
        Command::Retrieve {
            cfg: args,
            query,
            top_k,
        } => {
            let cfg = args.load()?;
            pipeline::write_run_snapshot(&cfg, "retrieve", json!({"query": query, "top_k": top_k}))?;
            for (rank, hit) in pipeline::retrieve(&cfg, &query, top_k)?.iter().enumerate() {
                println!("{:>3}  {:.6}  {}  (label {})", rank + 1, hit.similarity, hit.id, hit.label);
            }
        }
        Command::Ablate {
            cfg: args,
            toggles,
            k_sweep,
        } => {
            let cfg = args.load()?;
            let components = toggles
                .iter()
                .map(|t| t.parse::<Component>())
                .collect::<Result<Vec<_>, _>>()?;
            pipeline::write_run_snapshot(&cfg, "ablate", json!({"toggles": toggles, "k_sweep": k_sweep}))?;
            let report = pipeline::ablate(&cfg, &components, &k_sweep)?;
            print!("{}", report.table());
        }
        Command::VizTokens { cfg: args, image } => {
            let cfg = args.load()?;
            pipeline::write_run_snapshot(&cfg, "viz", json!({"image": image}))?;
            let viz = pipeline::viz_tokens(&cfg, &image)?;
            println!("with importance:    {:?}", viz.with_importance.ids);
            println!("without importance: {:?}", viz.without_importance.ids);
            println!("overlays: {} {}", viz.overlay_with.display(), viz.overlay_without.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
