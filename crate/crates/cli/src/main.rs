use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gscnn::checkpoint::Checkpoint;
use gscnn::config::{self, Section, Table};
use gscnn::data::{self, pnm, DatasetSpec};
use gscnn::gradcheck;
use gscnn::metrics::{CropSpec, DEFAULT_TOLERANCES};
use gscnn::train::{self, EvalConfig, Progress, TrainConfig};

/// Gated shape CNN for semantic segmentation: data, training, evaluation.
#[derive(Parser)]
#[command(name = "gscnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    MakeDataset {
        /// Config file; generation settings live in its [dataset] section.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override, e.g. `--set dataset.count=50`.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train a model; writes metrics, evaluation CSVs and a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        set: Vec<String>,
        /// Continue from a checkpoint written with the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Only print the final summary.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on every sample of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for classes.csv and crop.csv.
        #[arg(long)]
        out: PathBuf,
        /// Boundary tolerances in pixels.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_TOLERANCES.to_vec())]
        tolerances: Vec<f64>,
        #[arg(long, default_value_t = 6)]
        crop_base_margin: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0, 5, 10])]
        crop_factors: Vec<usize>,
        /// Score the ground truth against itself (harness self-test).
        #[arg(long)]
        bypass: bool,
    },
    /// Predict labels and boundaries for one PPM image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Predicted class per pixel (PGM).
        #[arg(long)]
        labels: PathBuf,
        /// Boundary probability ×255 (PGM); skipped for baseline models.
        #[arg(long)]
        boundary: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

fn read_doc(path: Option<&Path>, set: &[String]) -> gscnn::Result<Table> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| gscnn::Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?,
        None => String::new(),
    };
    let mut doc = config::parse(&text)?;
    for s in set {
        config::apply_override(&mut doc, s)?;
    }
    Ok(doc)
}

fn run(cmd: Command) -> gscnn::Result<bool> {
    match cmd {
        Command::MakeDataset { spec, out, set } => {
            let doc = read_doc(spec.as_deref(), &set)?;
            let section = Section::new(&doc, "dataset")?;
            let spec = DatasetSpec::from_section(&section)?;
            section.finish()?;
            let samples = data::generate_dataset(&spec)?;
            let m = data::write_dataset(&out, &spec, &samples)?;
            println!(
                "wrote {} samples ({}x{}, {} classes) to {} [spec {}]",
                m.count,
                m.height,
                m.width,
                m.classes,
                out.display(),
                &m.spec_hash[..12]
            );
            Ok(true)
        }
        Command::Train {
            config,
            set,
            resume,
            quiet,
        } => {
            let doc = read_doc(config.as_deref(), &set)?;
            let cfg = TrainConfig::from_doc(&doc)?;
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let outcome = train::train(&cfg, resume, |p| match p {
                Progress::Step { step, epoch, lr, loss } if !quiet && step % 10 == 0 => {
                    println!(
                        "epoch {epoch:>3} step {step:>6} lr {lr:.2e} total {:.4} ce {:.4} bce {:.4} reg {:.4}/{:.4}",
                        loss.total, loss.ce, loss.bce, loss.reg_fwd, loss.reg_bwd
                    )
                }
                Progress::Eval { epoch, report } if !quiet => {
                    println!("epoch {epoch:>3} val mIoU {:.4} mean F {:?}", report.miou, report.mean_f)
                }
                _ => {}
            })?;
            let r = &outcome.report;
            println!("mIoU {:.4}  pixel accuracy {:.4}", r.miou, r.pixel_accuracy);
            for (t, f) in r.tolerances.iter().zip(&r.mean_f) {
                println!("mean F @ {t} px: {f:.4}");
            }
            println!("outputs in {}", cfg.output_dir.display());
            Ok(true)
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            tolerances,
            crop_base_margin,
            crop_factors,
            bypass,
        } => {
            let eval = EvalConfig {
                tolerances,
                crop: CropSpec {
                    base_margin: crop_base_margin,
                },
                crop_factors,
            };
            let r = train::evaluate(&checkpoint, &data, &eval, bypass, &out)?;
            print!("{}", r.classes_csv());
            print!("{}", r.crop_csv());
            Ok(true)
        }
        Command::Infer {
            checkpoint,
            image,
            labels,
            boundary,
        } => {
            let out = train::infer(&checkpoint, &image)?;
            pnm::write_pgm(&labels, &out.labels)?;
            match (boundary, out.boundary) {
                (Some(path), Some(b)) => pnm::write_pgm(&path, &b)?,
                (Some(_), None) => eprintln!("model has no shape stream; no boundary map written"),
                _ => {}
            }
            Ok(true)
        }
        Command::Gradcheck => {
            let report = gradcheck::run_suite()?;
            for r in &report.results {
                println!(
                    "{:<32} max rel err {:.3e}  (< {:.0e}, {} entries)  {}",
                    r.name,
                    r.max_rel_err,
                    r.tolerance,
                    r.entries,
                    if r.passed() { "ok" } else { "FAIL" }
                );
            }
            println!("{:.1} s", report.seconds);
            Ok(report.passed())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
