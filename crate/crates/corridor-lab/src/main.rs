use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use corridor_lab::harness::{
    self, gen_synth, results_csv, run, RunConfig, SceneSource, SynthConfig,
};
use corridor_lab::predictor::save_model;

#[derive(Parser)]
#[command(name = "corridor-lab", version, about = "Scene-adaptive trajectory prediction lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the model seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output artifacts.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker thread count (0 = all cores; ignored without the
    /// `parallel` feature).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: scenes -> base model -> adaptation sweep -> reports.
    Run { config: PathBuf },
    /// Pretrain a base model and save a checkpoint.
    Pretrain { config: PathBuf },
    /// Generate synthetic scenes as gt/segmentation files plus a manifest.
    GenSynth { config: PathBuf },
    /// Evaluate a frozen checkpoint on each scene in a manifest.
    Eval { checkpoint: PathBuf, scene_manifest: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads(cli.threads);
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(feature = "parallel")]
fn configure_threads(threads: usize) {
    if threads > 0 {
        // Ignore failure if a pool already exists (tests call this twice).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}

#[cfg(not(feature = "parallel"))]
fn configure_threads(_threads: usize) {}

fn dispatch(cli: &Cli) -> Result<(), Box<dyn std::error::Error>> {
    match &cli.command {
        Command::Run { config } => {
            let (cfg, text) = load_run_config(config, cli.seed)?;
            let out = run(&cfg, &text, &cli.out_dir)?;
            for path in &out.artifacts {
                println!("wrote {}", path.display());
            }
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            Ok(())
        }
        Command::Pretrain { config } => {
            let (cfg, _) = load_run_config(config, cli.seed)?;
            let source = cfg.pretrain_source.clone().unwrap_or_else(|| cfg.scenes.clone());
            let scenes = harness::load_scene_source(&source, cfg.classes)?;
            let (model, curve) = harness::pretrain_on(&cfg, &scenes)?;
            fs::create_dir_all(&cli.out_dir)?;
            let ckpt = cli.out_dir.join("base.cltf");
            save_model(&ckpt, &model)?;
            let mut curve_csv = String::from("epoch,loss\n");
            for (i, l) in curve.iter().enumerate() {
                curve_csv.push_str(&format!("{i},{l}\n"));
            }
            fs::write(cli.out_dir.join("pretrain_curve.csv"), curve_csv)?;
            println!("wrote {}", ckpt.display());
            Ok(())
        }
        Command::GenSynth { config } => {
            let text = fs::read_to_string(config)?;
            let cfg = SynthConfig::parse(&text)?;
            let manifest = gen_synth(&cfg, &cli.out_dir)?;
            println!("wrote {}", manifest.display());
            Ok(())
        }
        Command::Eval { checkpoint, scene_manifest } => {
            // Window geometry comes from the checkpoint; the rest of the
            // eval settings use defaults.
            let mut cfg = RunConfig::parse("[scenes]\nmanifest = unused\n", Path::new("."))?;
            cfg.scenes = SceneSource::Manifest(scene_manifest.clone());
            if let Some(seed) = cli.seed {
                cfg.model_seed = seed;
            }
            let rows = harness::eval_checkpoint(checkpoint, scene_manifest, &cfg)?;
            let csv = results_csv(&rows);
            fs::create_dir_all(&cli.out_dir)?;
            fs::write(cli.out_dir.join("eval.csv"), &csv)?;
            print!("{csv}");
            Ok(())
        }
    }
}

fn load_run_config(
    path: &Path,
    seed: Option<u64>,
) -> Result<(RunConfig, String), Box<dyn std::error::Error>> {
    let text = fs::read_to_string(path)?;
    let base_dir = path.parent().unwrap_or(Path::new("."));
    let mut cfg = RunConfig::parse(&text, base_dir)?;
    if let Some(seed) = seed {
        cfg.model_seed = seed;
    }
    Ok((cfg, text))
}
