//! End-to-end training runs: data, encoders, episodes, per-seed training
//! loops with checkpoints and step logs, and evaluation.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use vlprompt_core::eval::{predict, run_protocol, summarize_seeds, EvalPool, ProtocolResult, PromptClassifier, SeedSummary};
use vlprompt_core::model::{class_token_table, PromptModel};
use vlprompt_core::protocol::{check_split, make_split, ProtocolSplit};
use vlprompt_core::rng::{derive_path, stream};
use vlprompt_core::trainer::{build_episode, label_map, summarize, train_epoch, EpochMetrics, StepRecord, TrainItem, TrainSetup, TrainState};

use crate::backbones::{self, Backbones};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataio::{apply_class_map, load_class_map, load_manifest, LoadedDataset};
use crate::error::{Error, Result};

pub const RUN_MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const STEP_LOG: &str = "steps.jsonl";

/// Loaded data, frozen encoders and the label split for one configuration.
pub struct Experiment {
    pub cfg: RunConfig,
    pub source: LoadedDataset,
    pub targets: Vec<LoadedDataset>,
    pub backbones: Backbones,
    pub split: ProtocolSplit,
}

impl Experiment {
    pub fn prepare(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let source = load_manifest(&cfg.data.source)?;
        let mut targets = cfg
            .data
            .targets
            .iter()
            .map(|t| load_manifest(t))
            .collect::<Result<Vec<_>>>()?;
        if let Some(p) = &cfg.data.class_map {
            let map = load_class_map(Path::new(p))?;
            for t in &mut targets {
                apply_class_map(&mut t.classes, &map);
            }
        }
        let mut names: Vec<&[String]> = vec![&source.classes];
        names.extend(targets.iter().map(|t| t.classes.as_slice()));
        let split = make_split(cfg.data.protocol, &names, cfg.seed)?;
        check_split(&split, source.class_count())?;
        let backbones = backbones::build(cfg, &names)?;
        let size = backbones.image_size();
        let source = LoadedDataset::load(source, size)?;
        let targets = targets
            .into_iter()
            .map(|t| LoadedDataset::load(t, size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            source,
            targets,
            backbones,
            split,
        })
    }

    /// Seed of run `i`, derived from the root seed and `train.seeds[i]`.
    pub fn run_seed(&self, i: usize) -> u64 {
        derive_path(self.cfg.seed, &[stream::RUN, self.cfg.train.seeds[i]])
    }

    pub fn seen_names(&self) -> Vec<String> {
        self.split
            .seen
            .iter()
            .map(|&c| self.source.manifest.classes[c].clone())
            .collect()
    }

    /// The few-shot training episode of run `i`; labels index the seen set.
    pub fn episode(&self, i: usize) -> Result<Vec<TrainItem>> {
        let ids = build_episode(&self.source.train_items(), &self.split.seen, self.cfg.train.shots, self.run_seed(i))?;
        let labels = label_map(&self.split.seen);
        Ok(ids
            .into_iter()
            .map(|id| TrainItem {
                id,
                label: labels[&self.source.manifest.samples[id].class],
                image: self.source.images[id].clone(),
            })
            .collect())
    }

    pub fn setup(&self) -> Result<TrainSetup> {
        Ok(TrainSetup {
            class_tokens: class_token_table(self.backbones.text.as_ref(), &self.seen_names())?,
            loss: self.cfg.loss.clone(),
            augment: self.cfg.augment.clone(),
            train: self.cfg.train.clone(),
        })
    }

    pub fn fresh_state(&self, i: usize) -> Result<TrainState> {
        let seed = self.run_seed(i);
        let model = PromptModel::new(self.backbones.encoders(), &self.cfg.model(), seed)?;
        Ok(TrainState::new(model, seed))
    }

    pub fn pools(&self) -> Vec<EvalPool> {
        let mut p = vec![self.source.test_pool()];
        p.extend(self.targets.iter().map(|t| t.test_pool()));
        p
    }

    pub fn evaluate(&self, model: &PromptModel) -> Result<ProtocolResult> {
        let mut clf = PromptClassifier::new(model, self.backbones.encoders(), self.cfg.loss.temperature);
        Ok(run_protocol(&self.split, &self.pools(), &mut clf)?)
    }

    /// Eval-mode accuracy (percent) on training items over the seen label set.
    pub fn accuracy_on(&self, model: &PromptModel, items: &[TrainItem]) -> Result<f64> {
        let enc = self.backbones.encoders();
        let tokens = class_token_table(enc.text, &self.seen_names())?;
        let mut correct = 0;
        for it in items {
            let p = model.posterior(enc, &it.image, &tokens, self.cfg.loss.temperature)?;
            if predict(&p.logits)? == it.label {
                correct += 1;
            }
        }
        Ok(100.0 * correct as f64 / items.len().max(1) as f64)
    }
}

/// One line of `steps.jsonl`: the step record plus the source class ids of
/// the batch, so leakage can be audited from the log alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLogLine {
    #[serde(flatten)]
    pub record: StepRecord,
    pub classes: Vec<usize>,
}

pub fn read_step_log(path: &Path) -> Result<Vec<StepLogLine>> {
    let f = File::open(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            msg: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub fingerprint: String,
    pub classes: Vec<String>,
    pub train_samples: usize,
    pub test_samples: usize,
}

impl DatasetInfo {
    fn of(d: &LoadedDataset) -> Self {
        let test = d.test_pool().samples.len();
        Self {
            name: d.manifest.name.clone(),
            fingerprint: d.manifest.fingerprint(),
            classes: d.manifest.classes.clone(),
            train_samples: d.images.len() - test,
            test_samples: test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub run_seed: u64,
    pub dir: String,
    pub completed: bool,
    pub epochs: usize,
    pub steps: usize,
    pub episode_size: usize,
    pub final_epoch: Option<EpochMetrics>,
    /// Eval-mode accuracy on the training episode.
    pub train_accuracy: Option<f64>,
    pub results: Option<ProtocolResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub config_hash: String,
    pub config: RunConfig,
    pub split: ProtocolSplit,
    pub datasets: Vec<DatasetInfo>,
    pub runs: Vec<SeedRun>,
    pub summary: Option<SeedSummary>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self).expect("manifest serializes").as_bytes())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(Error::io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(Error::io(path))
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out: PathBuf,
    pub force: bool,
    pub resume: bool,
    /// Stop every seed after this many completed epochs, leaving a resumable
    /// checkpoint (used to exercise resume).
    pub halt_after_epochs: Option<usize>,
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force` (wipe)
/// or `keep` (resume) is set.
pub fn prepare_dir(dir: &Path, force: bool, keep: bool) -> Result<()> {
    let occupied = dir.exists()
        && std::fs::read_dir(dir)
            .map_err(Error::io(dir))?
            .next()
            .is_some();
    if occupied && !keep {
        if !force {
            return Err(Error::Exists(dir.to_path_buf()));
        }
        std::fs::remove_dir_all(dir).map_err(Error::io(dir))?;
    }
    std::fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn total_epochs(cfg: &RunConfig, halt: Option<usize>) -> usize {
    halt.map_or(cfg.train.epochs, |h| h.min(cfg.train.epochs))
}

/// Trains every seed of `cfg`, then evaluates; writes the run manifest.
pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<RunManifest> {
    let exp = Experiment::prepare(cfg)?;
    train_experiment(&exp, opts)
}

pub fn train_experiment(exp: &Experiment, opts: &TrainOptions) -> Result<RunManifest> {
    let cfg = &exp.cfg;
    let hash = cfg.hash();
    let manifest_path = opts.out.join(MANIFEST_FILE);
    if opts.resume && manifest_path.exists() {
        let prev = RunManifest::load(&manifest_path)?;
        if prev.config_hash != hash {
            return Err(Error::HashMismatch {
                config: hash,
                checkpoint: prev.config_hash,
            });
        }
    }
    prepare_dir(&opts.out, opts.force, opts.resume)?;
    let mut datasets = vec![DatasetInfo::of(&exp.source)];
    datasets.extend(exp.targets.iter().map(DatasetInfo::of));
    let mut manifest = RunManifest {
        version: RUN_MANIFEST_VERSION,
        config_hash: hash.clone(),
        config: cfg.clone(),
        split: exp.split.clone(),
        datasets,
        runs: Vec::new(),
        summary: None,
    };
    manifest.save(&manifest_path)?;
    let setup = exp.setup()?;
    let enc = exp.backbones.encoders();
    for (i, &seed) in cfg.train.seeds.iter().enumerate() {
        let dir_name = format!("seed-{seed}");
        let dir = opts.out.join(&dir_name);
        std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        let items = exp.episode(i)?;
        let last = dir.join(LAST_CHECKPOINT);
        let log_path = dir.join(STEP_LOG);
        let mut state = if opts.resume && last.exists() {
            let ck = Checkpoint::load(&last)?;
            if ck.header.config_hash != hash {
                return Err(Error::HashMismatch {
                    config: hash,
                    checkpoint: ck.header.config_hash,
                });
            }
            let st = ck.restore(enc)?;
            log::info!("seed {seed}: resuming at epoch {} (step {})", st.epoch, st.step);
            // drop log lines written after the checkpoint
            let kept: Vec<StepLogLine> = if log_path.exists() {
                read_step_log(&log_path)?.into_iter().filter(|l| l.record.step < st.step).collect()
            } else {
                Vec::new()
            };
            let mut w = BufWriter::new(File::create(&log_path).map_err(Error::io(&log_path))?);
            for l in &kept {
                writeln!(w, "{}", serde_json::to_string(l).expect("log line serializes")).map_err(Error::io(&log_path))?;
            }
            w.flush().map_err(Error::io(&log_path))?;
            st
        } else {
            File::create(&log_path).map_err(Error::io(&log_path))?;
            exp.fresh_state(i)?
        };
        let mut log = BufWriter::new(
            OpenOptions::new()
                .append(true)
                .open(&log_path)
                .map_err(Error::io(&log_path))?,
        );
        let stop = total_epochs(cfg, opts.halt_after_epochs);
        let classes_of = |ids: &[usize]| ids.iter().map(|&id| exp.source.manifest.samples[id].class).collect();
        let mut io_err: Option<std::io::Error> = None;
        while state.epoch < stop && cfg.train.max_steps.is_none_or(|m| state.step < m) {
            let m = train_epoch(&mut state, enc, &setup, &items, &mut |r: &StepRecord| {
                let line = StepLogLine {
                    record: r.clone(),
                    classes: classes_of(&r.sample_ids),
                };
                if let Err(e) = writeln!(log, "{}", serde_json::to_string(&line).expect("log line serializes")) {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err.take() {
                return Err(Error::Io { path: log_path, source: e });
            }
            log.flush().map_err(Error::io(&log_path))?;
            log::info!(
                "seed {seed} epoch {}/{}: l_total={:.4} l_ce={:.4} l_sem={:.4} l_con={:.4} train_acc={:.3} lr={:.2e}",
                m.epoch + 1,
                cfg.train.epochs,
                m.l_total,
                m.l_ce,
                m.l_sem,
                m.l_con,
                m.train_acc,
                m.lr
            );
            Checkpoint::capture(cfg, i, &state).save(&last)?;
        }
        let completed = state.epoch >= cfg.train.epochs || cfg.train.max_steps.is_some_and(|m| state.step >= m);
        let mut run = SeedRun {
            seed,
            run_seed: state.seed,
            dir: dir_name,
            completed,
            epochs: state.epoch,
            steps: state.step,
            episode_size: items.len(),
            final_epoch: state.history.last().cloned(),
            train_accuracy: None,
            results: None,
        };
        if completed {
            Checkpoint::capture(cfg, i, &state).save(&dir.join(FINAL_CHECKPOINT))?;
            run.train_accuracy = Some(exp.accuracy_on(&state.model, &items)?);
            run.results = Some(exp.evaluate(&state.model)?);
        }
        manifest.runs.push(run);
        manifest.save(&manifest_path)?;
    }
    let done: Vec<ProtocolResult> = manifest.runs.iter().filter_map(|r| r.results.clone()).collect();
    if done.len() == manifest.runs.len() && !done.is_empty() {
        manifest.summary = Some(summarize_seeds(&done)?);
        manifest.save(&manifest_path)?;
    }
    Ok(manifest)
}

/// Short human summary of a finished run.
pub fn describe(m: &RunManifest) -> String {
    let mut s = String::new();
    for r in &m.runs {
        s.push_str(&format!("seed {}: {} epochs, {} steps", r.seed, r.epochs, r.steps));
        if let Some(e) = &r.final_epoch {
            let rep = vlprompt_core::losses::LossReport {
                l_con: e.l_con,
                l_ce: e.l_ce,
                l_sem: e.l_sem,
                l_total: e.l_total,
                enable_con: m.config.loss.enable_con,
                enable_ce: m.config.loss.enable_ce,
                enable_sem: m.config.loss.enable_sem,
                batch_size: m.config.train.batch_size,
                temperature: m.config.loss.temperature,
            };
            s.push_str(&format!(", last epoch {}", summarize(&rep)));
        }
        if let Some(a) = r.train_accuracy {
            s.push_str(&format!(", train acc {a:.2}%"));
        }
        if !r.completed {
            s.push_str(" (interrupted)");
        }
        s.push('\n');
    }
    if let Some(sum) = &m.summary {
        s.push_str(&crate::report::summary_table(m.split.kind, sum));
    }
    s
}
