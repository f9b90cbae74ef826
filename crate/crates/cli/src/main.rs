//! `scnet`: synthesize data, train, enhance, evaluate and verify.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use scnet_core::data::{
    load_image, make_synthetic_dataset, save_image, write_scenes, DatasetManifest, ImageBuffer, WaterType,
};
use scnet_core::metrics::MetricReport;
use scnet_core::normalization::ReinjectionMode;
use scnet_core::trainer::{load_checkpoint, train, TrainConfig};
use scnet_core::verify::{run_suite, Fault, Precision, VerifyOptions, SUITES};
use scnet_core::{Error, Model, ModelConfig};

const DEFAULT_SEED: u64 = 42;

#[derive(Parser)]
#[command(
    name = "scnet",
    version,
    about = "Underwater image enhancement with instance whitening and channel moments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Degrade every clean image under each water type and write a manifest.
    Synth {
        clean_dir: PathBuf,
        out_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Comma-separated preset names.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "coastal-green,oceanic-blue,turbid-yellow"
        )]
        water_types: Vec<String>,
    },
    /// Write procedural clean scenes to use as synthesis input.
    Scenes {
        out_dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Train a model; writes `model.scn` and `train_log.csv` into `--out`.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 5000)]
        steps: usize,
        #[arg(long, default_value = "1e-4")]
        lr: String,
        #[arg(long, default_value_t = 128)]
        patch: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Drop the instance-whitening layers.
        #[arg(long)]
        no_sn: bool,
        /// Drop channel normalization and moment re-injection.
        #[arg(long)]
        no_cn: bool,
        #[arg(long, value_enum, default_value_t = Reinjection::Text)]
        reinjection: Reinjection,
        #[arg(long)]
        out: PathBuf,
    },
    /// Enhance images with a trained checkpoint.
    Enhance {
        #[arg(long)]
        model: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score enhanced images against the manifest references.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Holds one file per manifest pair, named like the raw image.
        #[arg(long)]
        enhanced_dir: PathBuf,
    },
    /// Run the invariant suites.
    Verify {
        #[arg(long, default_value = "64", value_parser = ["32", "64"])]
        precision: String,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Deliberately break the whitening suite (α = 0 on rank-deficient input).
        #[arg(long)]
        inject_fault: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Reinjection {
    Text,
    Eq8,
}

enum Failure {
    User(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::User(e.to_string())
        }
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Synth {
            clean_dir,
            out_dir,
            seed,
            water_types,
        } => synth(&clean_dir, &out_dir, seed, &water_types),
        Command::Scenes {
            out_dir,
            count,
            size,
            seed,
        } => {
            println!("seed={seed}");
            let written = write_scenes(&out_dir, count, size, seed)?;
            println!("{} scenes written to {}", written.len(), out_dir.display());
            Ok(())
        }
        Command::Train {
            manifest,
            steps,
            lr,
            patch,
            seed,
            no_sn,
            no_cn,
            reinjection,
            out,
        } => {
            let lr_value: f64 = lr
                .parse()
                .map_err(|_| Failure::User(format!("--lr: not a number: {lr}")))?;
            let mode = match reinjection {
                Reinjection::Text => ReinjectionMode::TextForm,
                Reinjection::Eq8 => ReinjectionMode::Eq8Form,
            };
            let model = ModelConfig {
                reinjection_mode: mode,
                ..ModelConfig::default()
            }
            .with_switches(!no_sn, !no_cn);
            let config = TrainConfig {
                lr: lr_value,
                steps,
                patch,
                seed,
                ..TrainConfig::default()
            };
            println!("seed={seed}");
            println!(
                "lr={lr} batch={} patch={patch} scales={}",
                config.batch_size, model.scales
            );
            run_train(&manifest, model, config, &out)
        }
        Command::Enhance { model, inputs, out_dir } => enhance(&model, &inputs, &out_dir),
        Command::Eval { manifest, enhanced_dir } => eval(&manifest, &enhanced_dir),
        Command::Verify {
            precision,
            seed,
            inject_fault,
        } => verify(&precision, seed, inject_fault),
    }
}

fn synth(clean_dir: &Path, out_dir: &Path, seed: u64, names: &[String]) -> CliResult {
    println!("seed={seed}");
    if !clean_dir.is_dir() {
        return Err(Failure::User(format!(
            "clean directory {} does not exist",
            clean_dir.display()
        )));
    }
    let waters = names
        .iter()
        .map(|n| WaterType::preset(n))
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = make_synthetic_dataset(clean_dir, &waters, out_dir, seed)?;
    let path = out_dir.join("manifest.txt");
    manifest.write(&path)?;
    println!("{} pairs written", manifest.len());
    println!("manifest: {}", path.display());
    Ok(())
}

fn run_train(manifest: &Path, model_config: ModelConfig, config: TrainConfig, out: &Path) -> CliResult {
    let data = DatasetManifest::read(manifest)?.load()?;
    fs::create_dir_all(out).map_err(|e| Failure::User(format!("cannot create {}: {e}", out.display())))?;
    let ckpt = out.join("model.scn");
    let log_path = out.join("train_log.csv");
    let file =
        fs::File::create(&log_path).map_err(|e| Failure::User(format!("cannot create {}: {e}", log_path.display())))?;
    let mut log = BufWriter::new(file);
    let model = Model::build(model_config, config.seed)?;
    eprintln!("training {} parameters on {} pairs", model.num_parameters(), data.len());
    let outcome = train(model, &data, config, Some(&ckpt), &mut log)?;
    log.flush().map_err(|e| Failure::User(e.to_string()))?;
    if let Some(last) = outcome.records.last() {
        println!(
            "final step {} loss_mse={} loss_ps={} loss_all={}",
            last.step, last.mse, last.ps, last.total
        );
    }
    println!("checkpoint: {}", ckpt.display());
    println!("log: {}", log_path.display());
    Ok(())
}

fn round_up(n: usize, d: usize) -> usize {
    n.div_ceil(d) * d
}

fn enhance_one(model: &Model<f32>, image: &ImageBuffer) -> Result<ImageBuffer, Error> {
    let d = model.config.divisor();
    let (h, w) = (image.height(), image.width());
    let padded = image.reflect_pad(round_up(h, d), round_up(w, d))?;
    let out = model.predict(&padded.to_tensor::<f32>())?;
    ImageBuffer::from_tensor(&out)?.crop(0, 0, h, w)
}

fn enhance(model_path: &Path, inputs: &[PathBuf], out_dir: &Path) -> CliResult {
    let model = load_checkpoint(model_path)?.model;
    fs::create_dir_all(out_dir).map_err(|e| Failure::User(format!("cannot create {}: {e}", out_dir.display())))?;
    for input in inputs {
        let image = load_image(input)?;
        let enhanced = enhance_one(&model, &image)?;
        let name = input
            .file_name()
            .ok_or_else(|| Failure::User(format!("{} has no file name", input.display())))?;
        let dest = out_dir.join(name);
        save_image(&enhanced, &dest)?;
        println!("{} -> {}", input.display(), dest.display());
    }
    Ok(())
}

fn eval(manifest: &Path, enhanced_dir: &Path) -> CliResult {
    let manifest = DatasetManifest::read(manifest)?;
    let mut loaded = Vec::with_capacity(manifest.len());
    for pair in &manifest.pairs {
        let name = pair
            .raw
            .file_name()
            .ok_or_else(|| Failure::User(format!("{} has no file name", pair.raw.display())))?;
        let enhanced_path = enhanced_dir.join(name);
        let enhanced = load_image(&enhanced_path)?;
        let reference = load_image(&pair.reference)?;
        loaded.push((enhanced_path.display().to_string(), enhanced, reference));
    }
    let items: Vec<_> = loaded.iter().map(|(p, e, r)| (p.clone(), e, r)).collect();
    let report = MetricReport::evaluate(&items)?;
    print!("{}", report.table());
    print!("{}", report.lines());
    Ok(())
}

fn verify(bits: &str, seed: u64, inject_fault: bool) -> CliResult {
    println!("seed={seed}");
    let opts = VerifyOptions {
        precision: Precision::from_bits(
            bits.parse()
                .map_err(|_| Failure::User(format!("bad precision {bits}")))?,
        )?,
        seed,
        fault: inject_fault.then_some(Fault::RankDeficientNoAlpha),
    };
    let mut first_failure = None;
    for name in SUITES {
        let outcome = run_suite(name, &opts);
        println!("{outcome}");
        if !outcome.passed && first_failure.is_none() {
            first_failure = Some(name);
        }
    }
    match first_failure {
        None => {
            println!("all {} suites passed", SUITES.len());
            Ok(())
        }
        Some(name) => Err(Failure::Numerical(format!("verification failed: {name}"))),
    }
}
