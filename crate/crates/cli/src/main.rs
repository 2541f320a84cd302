mod image;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use binaryvit::analysis::{count_costs, repcap, CapabilityDesc};
use binaryvit::bittensor::reference::oracle_sweep;
use binaryvit::error::Error;
use binaryvit::model::{load_weights, save_weights, ModelConfig};
use binaryvit::train::gradcheck::{check_block, check_network, micro_config, run_layer_checks};
use binaryvit::train::{descends, quartile_losses, train_toy, write_trace, DistillOptions, GradCheckConfig};
use binaryvit::train::{SyntheticDataset, ToyOptions};

/// Binary vision transformer engine: inference, cost accounting,
/// capability analysis and desk-scale training.
#[derive(Parser, Debug)]
#[command(name = "binaryvit", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Classify one image with a saved model.
    Infer {
        /// Weight file written by `train-toy --save`.
        #[arg(long)]
        weights: PathBuf,
        /// PPM (P6/P3) or headerless square RGB8 file.
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
    /// Print FLOPs, BOPs, OPs and parameters of a model configuration.
    Count {
        /// Bundled name (binaryvit, binaryvit-star, deit-s, toy) or a TOML file.
        #[arg(long, default_value = "binaryvit")]
        config: String,
        #[arg(long)]
        json: bool,
    },
    /// Evaluate a representational-capability chain.
    Repcap {
        /// Bundled name (resnet34, deit-s, pyramid) or a TOML file.
        #[arg(long, default_value = "resnet34")]
        desc: String,
        #[arg(long)]
        json: bool,
    },
    /// Train the toy pyramid on the synthetic task.
    TrainToy {
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 1000)]
        train_size: usize,
        /// Bundled name or TOML file; image size and classes must fit the task.
        #[arg(long, default_value = "toy")]
        config: String,
        /// Distill from a full-precision MLP teacher instead of the labels.
        #[arg(long)]
        distill: bool,
        /// JSON-lines trace of (step, loss, accuracy, lr).
        #[arg(long, default_value = "trace.jsonl")]
        trace: PathBuf,
        /// Also write the trained weights.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Run the GEMM-oracle and gradient-check suites.
    Selftest {
        /// Fewer cases and points.
        #[arg(long)]
        quick: bool,
    },
}

enum Failure {
    /// Unreadable or malformed file, or a value the engine rejects.
    File(Error),
    /// A check or run that completed but did not succeed.
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged { .. } | Error::Internal(_) => Failure::Check(e.to_string()),
            e => Failure::File(e),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn is_path(name: &str) -> bool {
    name.ends_with(".toml") || name.contains('/') || Path::new(name).exists()
}

fn load_config(name: &str) -> binaryvit::error::Result<ModelConfig> {
    match name {
        "binaryvit" => Ok(ModelConfig::binaryvit()),
        "binaryvit-star" | "binaryvit_star" => Ok(ModelConfig::binaryvit_star()),
        "deit-s" | "deit_s" => Ok(ModelConfig::deit_s_baseline()),
        "toy" => Ok(ModelConfig::toy()),
        path if is_path(path) => ModelConfig::from_toml(&read_text(path)?),
        other => Err(Error::Input(format!("no bundled config '{other}' and no such file"))),
    }
}

fn load_desc(name: &str) -> binaryvit::error::Result<CapabilityDesc> {
    match name {
        "resnet34" => Ok(CapabilityDesc::resnet34()),
        "deit-s" | "deit_s" => Ok(CapabilityDesc::deit_s()),
        "pyramid" => Ok(CapabilityDesc::pyramid_example()),
        path if is_path(path) => CapabilityDesc::from_toml(&read_text(path)?),
        other => Err(Error::Input(format!("no bundled description '{other}' and no such file"))),
    }
}

fn read_text(path: &str) -> binaryvit::error::Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Input(format!("{path}: {e}")))
}

fn infer(weights: &Path, image: &Path, top_k: usize) -> Outcome {
    let model = load_weights(weights)?;
    let img = image::read_image(image)?;
    let logits = model.forward(&img)?;
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    for (rank, &c) in order.iter().take(top_k).enumerate() {
        println!("{:>3}  class {:>5}  logit {:+.6}", rank + 1, c, logits[c]);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    cfg: &str,
    steps: usize,
    seed: u64,
    lr: f64,
    batch_size: usize,
    train_size: usize,
    distill: bool,
    trace: &Path,
    save: Option<&Path>,
) -> Outcome {
    let cfg = load_config(cfg)?;
    if batch_size == 0 || train_size == 0 {
        return Err(Error::Input("batch size and training set size must be positive".into()).into());
    }
    let data = SyntheticDataset::generate(train_size, cfg.img_size, cfg.num_classes, seed)?;
    let opts = ToyOptions { steps, batch_size, lr, seed, train_size, distill: distill.then(DistillOptions::default) };
    let start = Instant::now();
    let run = train_toy(&cfg, &data, &opts)?;
    write_trace(&run.trace, BufWriter::new(File::create(trace).map_err(Error::from)?))?;
    if let Some(path) = save {
        save_weights(&run.model, path)?;
    }
    let (first, last) = quartile_losses(&run.trace, 100);
    println!("steps            {steps}");
    println!("train accuracy   {:.4}", run.train_accuracy);
    println!("smoothed loss    {first:.4} (first quarter) -> {last:.4} (last quarter)");
    println!("descends         {}", descends(&run.trace, 100));
    println!("elapsed          {:.1?}", start.elapsed());
    println!("trace            {}", trace.display());
    Ok(())
}

fn selftest(quick: bool) -> Outcome {
    let (cases, points) = if quick { (100, 10) } else { (1000, 100) };
    let mut ok = true;
    let start = Instant::now();
    let sweep = oracle_sweep(cases, 256, 0x6e44);
    println!(
        "gemm-oracle      {}/{} cases exact  [{}]",
        sweep.cases - sweep.mismatches.len(),
        sweep.cases,
        if sweep.passed() { "PASS" } else { "FAIL" }
    );
    ok &= sweep.passed();

    let cfg = GradCheckConfig { points, ..Default::default() };
    let mut reports = run_layer_checks(&cfg)?;
    reports.push(check_block(&GradCheckConfig { points: points / 10, ..cfg.clone() })?);
    reports.push(check_network(&micro_config(), &GradCheckConfig { points: points / 5, ..cfg.clone() })?);
    let passed = reports.iter().filter(|r| r.passed).count();
    for r in &reports {
        println!(
            "gradcheck {:<20} {:>3} points  max rel err {:.2e}  [{}]",
            r.name,
            r.points,
            r.max_rel_err,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    println!("gradcheck        {passed}/{} cases within {:.0e}", reports.len(), cfg.tolerance);
    ok &= passed == reports.len();
    println!("elapsed          {:.1?}", start.elapsed());
    if ok {
        Ok(())
    } else {
        Err(Failure::Check("selftest failed".into()))
    }
}

fn run(cli: Cli) -> Outcome {
    match cli.cmd {
        Command::Infer { weights, image, top_k } => infer(&weights, &image, top_k),
        Command::Count { config, json } => {
            let report = count_costs(&load_config(&config)?);
            if json {
                println!("{}", report.to_json());
            } else {
                println!("{report}");
            }
            Ok(())
        }
        Command::Repcap { desc, json } => {
            let chain = repcap(&load_desc(&desc)?)?;
            if json {
                println!("{}", chain.to_json());
            } else {
                println!("{chain}");
            }
            Ok(())
        }
        Command::TrainToy { steps, seed, lr, batch_size, train_size, config, distill, trace, save } => {
            train(&config, steps, seed, lr, batch_size, train_size, distill, &trace, save.as_deref())
        }
        Command::Selftest { quick } => selftest(quick),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::File(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
