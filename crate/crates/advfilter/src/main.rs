//! Command-line front end: train a victim model, craft norm-budgeted
//! adversarial images, filter them, and run full evaluation grids.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use advfilter::attack::{craft, AttackConfig};
use advfilter::classifier::{accuracy, load_model, save_model, Classifier};
use advfilter::error::{Error, Result};
use advfilter::filters::{apply_filter, FilterSpec};
use advfilter::harness::{
    evaluate_one, run_experiment, summarize, summary_csv, write_report, DataSource,
    ExperimentConfig,
};
use advfilter::image::{load_image, save_image};
use advfilter::norms::NormKind;

#[derive(Parser)]
#[command(
    name = "advfilter",
    version,
    about = "Craft norm-budgeted adversarial images against a small CNN and measure smoothing-filter defenses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the stock CNN on a dataset and save the model
    Train {
        /// Dataset: `IMAGES.idx,LABELS.idx` or `synthetic:SEED:COUNT`
        #[arg(long)]
        data: String,
        /// Where to write the trained model
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: usize,
        /// Minibatch size
        #[arg(long)]
        batch: usize,
        /// SGD learning rate
        #[arg(long)]
        lr: f64,
        /// Seed for weight init and epoch shuffling
        #[arg(long)]
        seed: u64,
    },
    /// Craft a targeted adversarial image within a norm budget
    Attack {
        #[arg(long)]
        model: PathBuf,
        /// Clean input image (PPM/PGM)
        #[arg(long)]
        image: PathBuf,
        /// Class the perturbed image should be labeled as
        #[arg(long)]
        target: usize,
        /// Perturbation norm: l1, l2, or linf
        #[arg(long)]
        norm: String,
        /// Perturbation budget
        #[arg(long)]
        beta: f64,
        /// Step size
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        /// Iteration cap
        #[arg(long, default_value_t = 500)]
        iters: usize,
        /// Where to write the adversarial image
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a smoothing filter over an image
    Defend {
        #[arg(long)]
        image: PathBuf,
        /// Filter family: gaussian or median
        #[arg(long)]
        filter: String,
        /// Kernel size: 3 or 5
        #[arg(long)]
        kernel: usize,
        /// Gaussian sigma (defaults to the kernel-size convention)
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report p_true, p_adv, and argmax for one image under each filter
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Ground-truth label
        #[arg(long = "true")]
        true_label: usize,
        /// Adversarial target label
        #[arg(long = "adv")]
        adv_label: usize,
    },
    /// Attack a cohort and measure every (norm x filter) grid cell
    Experiment {
        #[arg(long)]
        model: PathBuf,
        /// Dataset: `IMAGES.idx,LABELS.idx` or `synthetic:SEED:COUNT`
        #[arg(long)]
        data: String,
        /// Comma-separated attack norms (e.g. l1,l2,linf), or `none` for a
        /// clean-only run
        #[arg(long)]
        norms: String,
        /// Perturbation budget shared by all norms in this run
        #[arg(long)]
        beta: f64,
        /// Comma-separated filters from: none, gaussian3, gaussian5,
        /// median3, median5
        #[arg(long)]
        filters: String,
        /// Number of correctly classified images to sample
        #[arg(long)]
        samples: usize,
        /// Seed for cohort sampling and target drawing
        #[arg(long)]
        seed: u64,
        /// Fix one target label for every attack instead of drawing random
        /// wrong labels
        #[arg(long)]
        target: Option<usize>,
        /// Attack step size
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        /// Attack iteration cap
        #[arg(long, default_value_t = 500)]
        iters: usize,
        /// Where to write per-image records (CSV)
        #[arg(long)]
        out_records: PathBuf,
        /// Where to write the per-cell summary (CSV)
        #[arg(long)]
        out_summary: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { data, out, epochs, batch, lr, seed } => {
            let dataset = DataSource::parse(&data)?.load()?;
            if dataset.is_empty() {
                return Err(Error::Parameter("dataset contains no images".into()));
            }
            let shape = dataset.items()[0].0.shape();
            let model = Classifier::default_architecture(shape, dataset.num_classes(), seed)?;
            // Separate shuffle stream so init and shuffling don't share draws.
            let run = model.train_with_history(&dataset, epochs, batch, lr, seed.wrapping_add(1))?;
            for (epoch, loss) in run.epoch_mean_losses.iter().enumerate() {
                println!("epoch {epoch}: mean loss {loss:.6}");
            }
            let acc = accuracy(&run.model, &dataset)?;
            println!("training accuracy: {acc:.4} over {} images", dataset.len());
            save_model(&run.model, &out)?;
            println!("saved model to {}", out.display());
            Ok(())
        }
        Command::Attack { model, image, target, norm, beta, lr, iters, out } => {
            let model = load_model(&model)?;
            let image = load_image(&image)?;
            let config = AttackConfig {
                norm_kind: norm.parse::<NormKind>()?,
                beta,
                learning_rate: lr,
                max_iterations: iters,
                target_label: target,
            };
            let result = craft(&model, &image, &config)?;
            save_image(&result.adversarial, &out)?;
            println!("success: {}", result.success);
            println!("iterations: {}", result.iterations_used);
            println!(
                "perturbation {} norm: {:.6}",
                config.norm_kind, result.final_perturbation_norm
            );
            println!("target probability: {:.6}", result.final_target_probability);
            println!("saved adversarial image to {}", out.display());
            Ok(())
        }
        Command::Defend { image, filter, kernel, sigma, out } => {
            let spec = match filter.as_str() {
                "gaussian" => match sigma {
                    Some(sigma) => FilterSpec::gaussian(kernel, sigma)?,
                    None => FilterSpec::gaussian_default(kernel)?,
                },
                "median" => {
                    if sigma.is_some() {
                        return Err(Error::Parameter(
                            "--sigma only applies to the gaussian filter".into(),
                        ));
                    }
                    FilterSpec::median(kernel)?
                }
                other => {
                    return Err(Error::Parameter(format!(
                        "unknown filter {other:?} (expected gaussian or median)"
                    )))
                }
            };
            let image = load_image(&image)?;
            save_image(&apply_filter(&image, &spec), &out)?;
            println!("applied {} {kernel}x{kernel}, wrote {}", spec.kind(), out.display());
            Ok(())
        }
        Command::Eval { model, image, true_label, adv_label } => {
            let model = load_model(&model)?;
            let image = load_image(&image)?;
            let grid = [
                FilterSpec::Identity,
                FilterSpec::gaussian_default(3)?,
                FilterSpec::median(3)?,
                FilterSpec::gaussian_default(5)?,
                FilterSpec::median(5)?,
            ];
            println!("filter,kernel_size,p_true,p_adv,argmax_label");
            for spec in grid {
                let r = evaluate_one(&model, &image, true_label, adv_label, &spec)?;
                println!(
                    "{},{},{:.6},{:.6},{}",
                    r.filter_kind, r.kernel_size, r.p_true, r.p_adv, r.argmax_label
                );
            }
            Ok(())
        }
        Command::Experiment {
            model,
            data,
            norms,
            beta,
            filters,
            samples,
            seed,
            target,
            lr,
            iters,
            out_records,
            out_summary,
        } => {
            let norms = parse_norm_list(&norms)?;
            let filters = filters
                .split(',')
                .map(|token| token.parse::<FilterSpec>())
                .collect::<Result<Vec<_>>>()?;
            let cfg = ExperimentConfig {
                model_path: model,
                data: DataSource::parse(&data)?,
                norms,
                beta,
                learning_rate: lr,
                max_iterations: iters,
                filters,
                samples,
                seed,
                fixed_target: target,
            };
            let records = run_experiment(&cfg)?;
            let summary = summarize(&records)?;
            write_report(&records, &summary, &out_records, &out_summary)?;
            println!("wrote {} records to {}", records.len(), out_records.display());
            println!("wrote summary to {}", out_summary.display());
            print!("{}", summary_csv(&summary));
            Ok(())
        }
    }
}

/// Parses `l1,l2,linf`; the single token `none` means "no attacks".
fn parse_norm_list(s: &str) -> Result<Vec<NormKind>> {
    if s == "none" {
        return Ok(Vec::new());
    }
    s.split(',').map(|token| token.parse::<NormKind>()).collect()
}
