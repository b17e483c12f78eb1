//! `dml`: train, evaluate and ablate the two-encoder metric learner.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dml_core::ablation::{run_suite, standard_plan, write_suite_csv};
use dml_core::config::{DataSource, ExperimentConfig};
use dml_core::data::{generate_synthetic, save_features_csv, SyntheticConfig};
use dml_core::eval::{dump_embeddings, EvalReport};
use dml_core::gradcheck::run_gradcheck;
use dml_core::train::{evaluate, train};
use dml_core::{Error, ModelParams};

#[derive(Parser)]
#[command(name = "dml", version, about = "Deep metric learning with an auxiliary shared-structure encoder")]
struct Cli {
    /// Directory for every file a command writes.
    #[arg(long, global = true, env = "DML_OUT_DIR", default_value = "runs")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for training and for the synthetic generator.
    #[arg(long)]
    seed: Option<u64>,
    /// `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p).with_context(|| format!("loading config {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            cfg.train.seed = s;
            if let DataSource::Synthetic(syn) = &mut cfg.data.source {
                syn.seed = s;
            }
        }
        cfg.train.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes the config, run log, checkpoint and test embeddings.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on one split of the configured data.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Also write the split's embeddings as CSV.
        #[arg(long)]
        dump: bool,
    },
    /// Write the synthetic dataset as `label,f0,...` CSV plus its shared factor.
    GenData(ConfigArgs),
    /// Run the ablation and sensitivity suite over several seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of seeds, starting from the configured seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Finite-difference check of the full loss graph.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn out_file(dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir.join(name))
}

fn print_reports(split: &str, reports: &[EvalReport]) {
    for r in reports {
        let recalls: Vec<String> = r.recall_at.iter().map(|(k, v)| format!("R@{k} {:.2}", 100.0 * v)).collect();
        println!(
            "{split} {}: {} NMI {:.4} var-ratio {:.4}",
            r.encoder,
            recalls.join(" "),
            r.nmi,
            r.intra_class_variance_ratio
        );
    }
}

fn run(cli: &Cli) -> Result<bool> {
    let dir = &cli.out_dir;
    match &cli.command {
        Command::Train(args) => {
            let cfg = args.load()?;
            let (tr, te) = cfg.data.load_split(None)?;
            fs::write(out_file(dir, "config.txt")?, cfg.to_text())?;
            let out = match train(&cfg.train, &tr, Some(&te)) {
                Ok(o) => o,
                Err(Error::Diverged {
                    epoch,
                    iteration,
                    what,
                    params,
                }) => {
                    let p = out_file(dir, "diverged.json")?;
                    params.save_checkpoint(&p)?;
                    bail!(
                        "training diverged at epoch {epoch}, iteration {iteration}: non-finite {what}; parameters saved to {}",
                        p.display()
                    );
                }
                Err(e) => return Err(e.into()),
            };
            out.log.write_jsonl(out_file(dir, "run.jsonl")?)?;
            out.params.save_checkpoint(out_file(dir, "model.json")?)?;
            dump_embeddings(&out.params, &te, out_file(dir, "test_embeddings.csv")?)?;
            if let Some(last) = out.log.epochs.last() {
                print_reports("test", last.test_eval.as_deref().unwrap_or_default());
            }
            println!("wrote {}", dir.display());
            Ok(true)
        }
        Command::Eval {
            cfg,
            checkpoint,
            split,
            dump,
        } => {
            let cfg = cfg.load()?;
            let params = ModelParams::load_checkpoint(checkpoint)?;
            let (tr, te) = cfg.data.load_split(None)?;
            let (name, ds) = match split {
                Split::Train => ("train", tr),
                Split::Test => ("test", te),
            };
            if ds.input_dim() != params.dims.input_dim {
                bail!(
                    "checkpoint expects {} input features, data has {}",
                    params.dims.input_dim,
                    ds.input_dim()
                );
            }
            let t = &cfg.train;
            let reports = evaluate(&params, &ds, &t.recall_ks, t.inter_class_norm, &t.kmeans, t.seed)?;
            print_reports(name, &reports);
            fs::write(
                out_file(dir, &format!("eval_{name}.json"))?,
                serde_json::to_string_pretty(&reports)?,
            )?;
            if *dump {
                dump_embeddings(&params, &ds, out_file(dir, &format!("{name}_embeddings.csv"))?)?;
            }
            Ok(true)
        }
        Command::GenData(args) => {
            let cfg = args.load()?;
            let DataSource::Synthetic(s) = &cfg.data.source else {
                bail!("gen-data needs a synthetic data source, the config names a CSV file");
            };
            let ds = generate_synthetic(s)?;
            let path = out_file(dir, "data.csv")?;
            save_features_csv(&ds, &path, false)?;
            let shared: Vec<String> = ds.shared.iter().flatten().map(|v| v.to_string()).collect();
            fs::write(out_file(dir, "shared.txt")?, shared.join("\n") + "\n")?;
            let SyntheticConfig {
                num_classes, per_class, ..
            } = s;
            println!("wrote {} ({num_classes} classes x {per_class})", path.display());
            Ok(true)
        }
        Command::Ablate { cfg, seeds } => {
            if *seeds == 0 {
                bail!("--seeds must be at least 1");
            }
            let cfg = cfg.load()?;
            let first = cfg.train.seed;
            let seed_list: Vec<u64> = (first..first + seeds).collect();
            let plan = standard_plan(&cfg.train);
            let rows = run_suite(&plan, &cfg.data, &seed_list, |r| {
                let m = r.mean_recall1().map_or("-".into(), |v| format!("{:.2}", 100.0 * v));
                let v = r.mean_variance_ratio().map_or("-".into(), |v| format!("{v:.4}"));
                match &r.error {
                    None => println!("{:14} {:22} R@1 {m:>6} var-ratio {v}", r.axis, r.setting),
                    Some(e) => println!("{:14} {:22} failed: {e}", r.axis, r.setting),
                }
            })?;
            let path = out_file(dir, "ablation.csv")?;
            write_suite_csv(&rows, &path)?;
            println!("wrote {}", path.display());
            Ok(rows.iter().all(|r| r.error.is_none()))
        }
        Command::Gradcheck { seeds, eps, tol } => {
            let report = run_gradcheck(0..*seeds, *eps)?;
            for (s, e) in &report.per_seed {
                println!("seed {s:>3}: max relative error {e:.3e}");
            }
            let ok = report.passed(*tol);
            println!(
                "{}: max relative error {:.3e} (tolerance {tol:e})",
                if ok { "PASS" } else { "FAIL" },
                report.max_rel_error
            );
            Ok(ok)
        }
    }
}
