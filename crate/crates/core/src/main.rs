use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use l2t::inference::{infer_w_traced, GradientInstance, InferConfig};
use l2t::pipeline::persist::{
    load_features, load_model, load_pair, load_store, load_test_pairs, pair_dir_name, save_features, save_model,
    save_pair, save_report, save_store, write_matrix, FeatureSet, ModelArtifact,
};
use l2t::pipeline::{derive_seed, evaluate_l2t, gen_pair, generate_experiences, SynthConfig};
use l2t::reflection::{fit_correction, CorrectionConfig, TrainConfig};
use l2t::{Error, ExtractorId, Result};

const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "l2t", version, about = "Learn which transfer works from past transfer experiences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    m: usize,
    #[arg(long = "u-true", default_value_t = 10)]
    u_true: usize,
    #[arg(long, default_value_t = 0.8)]
    relatedness: f64,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long = "samples-per-class", default_value_t = 30)]
    samples_per_class: usize,
}

impl SynthArgs {
    fn config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            m: self.m,
            u_true: self.u_true,
            classes_per_domain: self.classes,
            samples_per_class: self.samples_per_class,
            relatedness: self.relatedness,
            noise_sigma: self.noise,
            seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic transfer experiences into a store directory.
    Gen {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        synth: SynthArgs,
        /// Comma-separated base extractors.
        #[arg(long, value_delimiter = ',', default_value = "joint_pca,target_pca,tca_lite,random_proj,kpca_recover")]
        extractors: Vec<ExtractorId>,
        /// Comma-separated labelled target counts, used cyclically.
        #[arg(long = "n-labeled", value_delimiter = ',', default_value = "3,15")]
        n_labeled: Vec<usize>,
    },
    /// Generate held-out domain pairs, one subdirectory per pair.
    GenPairs {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Compute kernel statistics for every stored experience.
    Featurize {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        r: usize,
        /// Fit a correction of the small-sample ratio bias during training.
        #[arg(long)]
        correct: bool,
        #[arg(long, default_value_t = 3)]
        p: u32,
        #[arg(long, default_value_t = 120)]
        q: u32,
    },
    /// Fit the reflection function to a feature directory.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        gamma1: f64,
        #[arg(long = "huber-delta", default_value_t = 1.0)]
        huber_delta: f64,
        #[arg(long, default_value_t = 5)]
        restarts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "max-iters", default_value_t = 2000)]
        max_iters: usize,
    },
    /// Infer the factor matrix for one domain pair.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pair: PathBuf,
        /// Latent dimension; defaults to the one the model was trained with.
        #[arg(long)]
        u: Option<usize>,
        #[arg(long, default_value_t = 1e-3)]
        gamma2: f64,
        /// Neighbour count; defaults to the one used for featurisation.
        #[arg(long)]
        r: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "max-iters", default_value_t = 100)]
        max_iters: usize,
        #[arg(long, default_value_t = 3)]
        restarts: usize,
    },
    /// Compare inferred factor matrices with the base extractors on test pairs.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "test-pairs")]
        test_pairs: PathBuf,
        /// Comma-separated labelled target counts.
        #[arg(long = "n-labeled", value_delimiter = ',', required = true)]
        n_labeled: Vec<usize>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        gamma2: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "max-iters", default_value_t = 100)]
        max_iters: usize,
        #[arg(long, default_value_t = 3)]
        restarts: usize,
    },
    /// Compare the analytic inference gradient with central differences.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Gen {
            n,
            out,
            seed,
            synth,
            extractors,
            n_labeled,
        } => {
            let store = generate_experiences(n, &extractors, &synth.config(seed), &n_labeled, seed)?;
            save_store(&store, &out)?;
            let mean = store.experiences.iter().map(|e| e.ratio).sum::<f64>() / n.max(1) as f64;
            println!("wrote {n} experiences to {} (mean ratio {mean:.4})", out.display());
        }
        Command::GenPairs { n, out, seed, synth } => {
            for i in 0..n {
                let (s, t) = gen_pair(&synth.config(derive_seed(seed, i as u64)))?;
                save_pair(&out.join(pair_dir_name(i)), &s, &t)?;
            }
            println!("wrote {n} pairs to {}", out.display());
        }
        Command::Featurize {
            store,
            out,
            r,
            correct,
            p,
            q,
        } => {
            let store = load_store(&store)?;
            let set = FeatureSet {
                features: store.featurize_all(r)?,
                exponents: store.exponents.clone(),
                r,
                m: store.m(),
                u: store.u(),
                extractors: store.extractors.clone(),
                correction: CorrectionConfig {
                    p,
                    q,
                    b_corr: 0.0,
                    enabled: correct,
                },
            };
            save_features(&set, &out)?;
            println!("wrote features of {} experiences to {}", set.features.len(), out.display());
        }
        Command::Train {
            features,
            out,
            gamma1,
            huber_delta,
            restarts,
            seed,
            max_iters,
        } => {
            let set = load_features(&features)?;
            let cfg = TrainConfig {
                gamma1,
                huber_delta,
                restarts,
                max_iters,
                seed,
                ..Default::default()
            };
            let fit = fit_correction(&set.features, &cfg, &set.correction)?;
            let art = ModelArtifact {
                model: fit.outcome.model,
                correction: CorrectionConfig {
                    b_corr: fit.b_corr,
                    ..set.correction
                },
                m: set.m,
                u: set.u,
                r: set.r,
                extractors: set.extractors,
                gamma1,
                huber_delta,
                objective: fit.outcome.objective,
            };
            save_model(&art, &out)?;
            println!(
                "objective {:.6}, lambda {:.4}, mu {:.4}, bias {:.4}, b_corr {}",
                art.objective, art.model.lambda, art.model.mu, art.model.bias, art.correction.b_corr
            );
        }
        Command::Infer {
            model,
            pair,
            u,
            gamma2,
            r,
            out,
            seed,
            max_iters,
            restarts,
        } => {
            let art = load_model(&model)?;
            let (source, target) = load_pair(&pair)?;
            let cfg = InferConfig {
                gamma2,
                u: u.unwrap_or(art.u),
                r: r.unwrap_or(art.r),
                max_iters,
                restarts,
                seed,
                ..Default::default()
            };
            let outcome = infer_w_traced(&source, &target, &art.model, &cfg)?;
            write_matrix(&out, outcome.w.as_matrix())?;
            println!(
                "objective {:.6} (restart {}), wrote {} x {} factor matrix to {}",
                outcome.objective,
                outcome.best_restart,
                outcome.w.m(),
                outcome.w.u(),
                out.display()
            );
        }
        Command::Eval {
            model,
            test_pairs,
            n_labeled,
            report,
            gamma2,
            seed,
            max_iters,
            restarts,
        } => {
            let art = load_model(&model)?;
            let pairs = load_test_pairs(&test_pairs)?;
            let cfg = InferConfig {
                gamma2,
                u: art.u,
                r: art.r,
                max_iters,
                restarts,
                seed,
                ..Default::default()
            };
            let rep = evaluate_l2t(&art.model, &pairs, &art.extractors, &n_labeled, &cfg, seed)?;
            save_report(&rep, &report)?;
            for m in &rep.means {
                println!("{:<14} n_labeled {:>3}  mean ratio {:.4}", m.method, m.n_labeled, m.mean);
            }
        }
        Command::GradCheck { seed, trials } => {
            if trials == 0 {
                return Err(Error::InvalidArgument("at least one trial is required".into()));
            }
            let mut worst: f64 = 0.0;
            for t in 0..trials {
                let err = GradientInstance::random(derive_seed(seed, t as u64))?.max_error(GRAD_STEP)?;
                worst = worst.max(err);
            }
            println!("max relative error {worst:.3e} over {trials} trials");
            if worst > GRAD_TOLERANCE {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
