use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use plasbench::data::{cifar, idx};
use plasbench::error::{Error, Result};
use plasbench::gradcheck::grad_check;
use plasbench::harness::protocols::{run_experiment_to, ExperimentResult};
use plasbench::harness::{report, ExperimentConfig};
use plasbench::models::{ModelConfig, ModelKind, Network};
use plasbench::rng;
use plasbench::tensor::Tensor;

#[derive(Parser)]
#[command(
    name = "plasbench",
    about = "Warm-start plasticity benchmark harness",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Output directory for metrics.csv / summary.json / summary.csv.
        #[arg(long, default_value = "plasbench-out")]
        out: PathBuf,
        /// Concurrent jobs (seeds x sweep points run independently).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Verify backward gradients against finite differences (64-bit mode).
    Gradcheck {
        /// Architecture: mlp, cnn, mini_resnet, or all.
        #[arg(long, default_value = "all")]
        arch: String,
        /// Maximum relative error tolerated.
        #[arg(long, default_value_t = 1e-4)]
        rel_tol: f64,
    },
    /// Inspect a dataset: counts, class histogram, checksum.
    Datacheck {
        /// CIFAR-10 batch directory, or an IDX image file.
        path: PathBuf,
        /// IDX label file (default: derived from the image file name).
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Recompute last-K summaries from a run directory's raw CSV.
    Report {
        run_dir: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config, out, jobs } => run_cmd(&config, &out, jobs),
        Command::Gradcheck { arch, rel_tol } => gradcheck_cmd(&arch, rel_tol),
        Command::Datacheck { path, labels } => datacheck_cmd(&path, labels.as_deref()),
        Command::Report { run_dir, format } => {
            let recomputed = report::report_from_dir(&run_dir, &format)?;
            println!("{}", recomputed.rendered);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn run_cmd(config_path: &Path, out: &Path, jobs: usize) -> Result<ExitCode> {
    let config = ExperimentConfig::load(config_path)?;
    let result = run_experiment_to(&config, jobs, Some(out))?;
    report::write_outputs(&result, out)?;
    print_summary(&result);
    println!("wrote {}", out.display());

    let diverged = result.diverged_count();
    if diverged > config.max_diverged_runs {
        return Err(Error::DivergenceThreshold {
            diverged,
            allowed: config.max_diverged_runs,
        });
    }
    Ok(ExitCode::SUCCESS)
}

fn print_summary(result: &ExperimentResult) {
    println!(
        "protocol {}  runs {}  diverged {}",
        result.config.protocol.name(),
        result.runs.len(),
        result.diverged_count()
    );
    for gap in &result.gaps {
        println!(
            "  {:<24} warm {:.4} +- {:.4}   fresh {:.4} +- {:.4}   gap {:+.4}",
            gap.sweep_key, gap.warm_mean, gap.warm_std, gap.fresh_mean, gap.fresh_std, gap.gap
        );
    }
}

fn gradcheck_cmd(arch: &str, rel_tol: f64) -> Result<ExitCode> {
    let arches: Vec<&str> = match arch {
        "all" => vec!["mlp", "cnn", "mini_resnet"],
        other => vec![other],
    };
    let mut ok = true;
    for name in arches {
        let config = match name {
            "mlp" => ModelConfig {
                kind: ModelKind::Mlp,
                width_w: 1,
                depth_d: 1,
                num_classes: 10,
                input_shape: [1, 8, 8],
                hidden_sizes: vec![32, 16],
            },
            "cnn" => ModelConfig {
                kind: ModelKind::Cnn,
                width_w: 8,
                depth_d: 1,
                num_classes: 10,
                input_shape: [1, 8, 8],
                hidden_sizes: vec![],
            },
            "mini_resnet" => ModelConfig {
                kind: ModelKind::MiniResnet,
                width_w: 4,
                depth_d: 1,
                num_classes: 10,
                input_shape: [3, 16, 16],
                hidden_sizes: vec![],
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown arch {other:?}; use mlp, cnn, mini_resnet, or all"
                )))
            }
        };
        let mut net = Network::<f64>::build(config.clone(), 7)?;
        let (x, labels) = random_batch(&config, 4, 11);
        let report = grad_check(&mut net, &x, &labels, 32, 13)?;
        for group in &report.groups {
            println!(
                "{name:<12} group {} coords {:>3}  max rel err {:.3e}",
                group.group_id, group.coords_checked, group.max_rel_error
            );
        }
        let pass = report.passes(rel_tol);
        println!(
            "{name:<12} overall max rel err {:.3e}  {}",
            report.max_rel_error,
            if pass { "PASS" } else { "FAIL" }
        );
        ok &= pass;
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn random_batch(config: &ModelConfig, n: usize, seed: u64) -> (Tensor<f64>, Vec<u32>) {
    use rand::Rng as _;
    let mut rng = rng::rng_from(seed);
    let [c, h, w] = config.input_shape;
    let data: Vec<f64> = (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels: Vec<u32> = (0..n)
        .map(|_| rng.random_range(0..config.num_classes as u32))
        .collect();
    (Tensor::new(vec![n, c, h, w], data).unwrap(), labels)
}

fn datacheck_cmd(path: &Path, labels: Option<&Path>) -> Result<ExitCode> {
    let ds = if path.is_dir() {
        cifar::load_cifar10_binary(path)?
    } else {
        let label_path = match labels {
            Some(p) => p.to_path_buf(),
            None => guess_label_path(path)?,
        };
        idx::load_idx(path, &label_path)?
    };
    println!("name            {}", ds.name);
    println!("examples        {}", ds.len());
    println!("feature shape   {:?}", ds.feature_shape());
    println!("classes         {}", ds.num_classes());
    println!("class histogram {:?}", ds.class_histogram());
    println!("sha256          {}", ds.checksum());
    Ok(ExitCode::SUCCESS)
}

fn guess_label_path(images: &Path) -> Result<PathBuf> {
    let name = images
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Config("image path has no file name".into()))?;
    let guessed = name.replace("images", "labels").replace("idx3", "idx1");
    if guessed == name {
        return Err(Error::Config(
            "cannot derive a label file name; pass --labels".into(),
        ));
    }
    Ok(images.with_file_name(guessed))
}
