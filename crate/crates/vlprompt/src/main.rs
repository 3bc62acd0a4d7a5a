use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vlprompt::ablate::{self, AblateOptions, Cell};
use vlprompt::checkpoint::Checkpoint;
use vlprompt::config::{self, RunConfig};
use vlprompt::dataio;
use vlprompt::report::{self, EvalOptions, ExportOptions, ExportSplit};
use vlprompt::runner::{self, TrainOptions};
use vlprompt::Error;

#[derive(Parser)]
#[command(name = "vlprompt", version, about = "Image-conditioned prompt learning on frozen dual encoders")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// YAML or JSON configuration file.
    #[arg(long, env = "VLPROMPT_CONFIG")]
    config: Option<PathBuf>,
    /// Override a key by dotted path, e.g. `--set rho.context_length=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn given(&self) -> bool {
        self.config.is_some() || !self.overrides.is_empty()
    }

    fn resolve(&self) -> vlprompt::Result<RunConfig> {
        config::load(self.config.as_deref(), &self.overrides)
    }

    /// For commands on a checkpoint: bare overrides apply to its config.
    fn resolve_against(&self, ck: &Path) -> vlprompt::Result<Option<RunConfig>> {
        if !self.given() {
            return Ok(None);
        }
        if self.config.is_some() {
            return self.resolve().map(Some);
        }
        let base = Checkpoint::load(ck)?.header.config;
        config::with_overrides(&base, &self.overrides).map(Some)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train every configured seed and evaluate it.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing output directory.
        #[arg(long)]
        force: bool,
        /// Continue from the last checkpoint of each seed.
        #[arg(long, conflicts_with = "force")]
        resume: bool,
    },
    /// Evaluate a checkpoint under its protocol.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        accept_config_mismatch: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train and evaluate a grid of configuration variants.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Preset grid: loss, init, context or shots.
        #[arg(long)]
        grid: Option<String>,
        /// Extra cell as `name:key=value,key=value`.
        #[arg(long = "cell", value_name = "SPEC")]
        cells: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Write eval-mode joint-space image embeddings as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        accept_config_mismatch: bool,
        /// Dataset name; the source dataset when omitted.
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long, default_value = "test")]
        split: ExportSplit,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Resolve and check a configuration, printing it with its hash.
    ValidateConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also build the data and encoders.
        #[arg(long)]
        deep: bool,
    },
    /// Write a manifest for a folder-per-class image directory.
    ImportFolder {
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        force: bool,
    },
}

fn run(cli: Cli) -> vlprompt::Result<()> {
    match cli.cmd {
        Cmd::Train { cfg, out, force, resume } => {
            let c = cfg.resolve()?;
            let m = runner::train(
                &c,
                &TrainOptions {
                    out: out.clone(),
                    force,
                    resume,
                    halt_after_epochs: None,
                },
            )?;
            print!("{}", runner::describe(&m));
            for r in &m.runs {
                if let Some(res) = &r.results {
                    println!("seed {}:", r.seed);
                    print!("{}", report::metric_table(res));
                }
                println!("checkpoint: {}", out.join(&r.dir).join(runner::FINAL_CHECKPOINT).display());
            }
            println!("manifest: {}", out.join(runner::MANIFEST_FILE).display());
        }
        Cmd::Eval {
            checkpoint,
            cfg,
            accept_config_mismatch,
            out,
            force,
        } => {
            let config = cfg.resolve_against(&checkpoint)?;
            let r = report::evaluate(&EvalOptions {
                checkpoint,
                config,
                accept_config_mismatch,
                out: out.clone(),
                force,
            })?;
            print!("{}", report::metric_table(&r.result));
            println!("results: {}", out.join("results.json").display());
        }
        Cmd::Ablate {
            cfg,
            grid,
            cells,
            out,
            force,
        } => {
            let base = cfg.resolve()?;
            let mut grid_cells = match &grid {
                Some(g) => ablate::preset(g)?,
                None => Vec::new(),
            };
            for c in &cells {
                grid_cells.push(Cell::parse(c)?);
            }
            let cmp = ablate::ablate(&base, &grid_cells, &AblateOptions { out: out.clone(), force })?;
            println!("{:<18} {:>8} {:>8} {:>8} {:>8} {:>10}", "cell", "train", "top1", "base", "new", "HM");
            let f = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
            for c in &cmp.cells {
                println!(
                    "{:<18} {:>8.2} {:>8.2} {:>8} {:>8} {:>10}",
                    c.cell,
                    c.train_accuracy,
                    c.top1,
                    f(c.base_acc),
                    f(c.new_acc),
                    f(c.hm_of_means)
                );
            }
            println!("comparison: {}", out.join("comparison.csv").display());
        }
        Cmd::ExportEmbeddings {
            checkpoint,
            cfg,
            accept_config_mismatch,
            dataset,
            split,
            out,
            force,
        } => {
            let config = cfg.resolve_against(&checkpoint)?;
            let n = report::export_embeddings(&ExportOptions {
                checkpoint,
                config,
                accept_config_mismatch,
                dataset,
                split,
                out: out.clone(),
                force,
            })?;
            println!("wrote {n} embeddings to {}", out.display());
        }
        Cmd::ValidateConfig { cfg, deep } => {
            let c = cfg.resolve()?;
            if deep {
                let exp = runner::Experiment::prepare(&c)?;
                log::info!(
                    "{} source classes, {} seen, {} unseen",
                    exp.source.manifest.class_count(),
                    exp.split.seen.len(),
                    exp.split.unseen.len()
                );
            }
            println!("{}", serde_yaml::to_string(&c).expect("config serializes"));
            println!("hash: {}", c.hash());
        }
        Cmd::ImportFolder { root, out, name, force } => {
            if out.exists() && !force {
                return Err(Error::Exists(out));
            }
            let mut m = dataio::import_folder(&root, name.as_deref())?;
            let dir = match out.parent() {
                Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
                _ => PathBuf::from("."),
            };
            m.rebase(&dir)?;
            runner::write_atomic(&out, m.to_json().as_bytes())?;
            println!("{} classes, {} samples -> {}", m.class_count(), m.samples.len(), out.display());
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
            let code = e.exit_code();
            let err = anyhow::Error::new(e);
            eprintln!("error: {err:#}");
            ExitCode::from(code as u8)
        }
    }
}
