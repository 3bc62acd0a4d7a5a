//! Evaluation from checkpoints, result files, metric tables and embedding export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use vlprompt_core::eval::{ProtocolResult, SeedSummary};
use vlprompt_core::protocol::ProtocolKind;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataio::Split;
use crate::error::{Error, Result};
use crate::runner::{prepare_dir, write_atomic, Experiment};

pub const RESULTS_VERSION: u32 = 1;

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into())
}

/// Plain-text table of one protocol result.
pub fn metric_table(r: &ProtocolResult) -> String {
    let mut s = String::new();
    match r.protocol {
        ProtocolKind::BaseToNew => {
            let _ = writeln!(s, "{:<16} {:>8} {:>8} {:>8} {:>8}", "dataset", "base", "new", "HM", "top1");
            for e in &r.results {
                let _ = writeln!(
                    s,
                    "{:<16} {:>8} {:>8} {:>8} {:>8.2}",
                    e.dataset,
                    opt(e.base_acc),
                    opt(e.new_acc),
                    opt(e.harmonic_mean),
                    e.top1
                );
            }
        }
        _ => {
            let _ = writeln!(s, "{:<16} {:>8}", "dataset", "top1");
            for (i, e) in r.results.iter().enumerate() {
                let role = if i == 0 { " (source)" } else { "" };
                let _ = writeln!(s, "{:<16} {:>8.2}{role}", e.dataset, e.top1);
            }
            if let Some(m) = r.target_macro_top1 {
                let _ = writeln!(s, "{:<16} {:>8.2}", "target average", m);
            }
        }
    }
    s
}

pub fn summary_table(kind: ProtocolKind, sum: &SeedSummary) -> String {
    let mut s = format!("mean over {} run(s):\n", sum.runs);
    if kind == ProtocolKind::BaseToNew {
        if let Some(b) = &sum.b2n {
            let _ = writeln!(
                s,
                "base {:.2}  new {:.2}  HM(of means) {:.2}  mean(HM) {:.2}",
                b.base_mean, b.new_mean, b.hm_of_means, b.mean_of_hm
            );
        }
    } else {
        for (d, v) in &sum.top1_mean {
            let _ = writeln!(s, "{d:<16} {v:>8.2}");
        }
        if let Some(m) = sum.target_macro_top1_mean {
            let _ = writeln!(s, "{:<16} {:>8.2}", "target average", m);
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub version: u32,
    pub config_hash: String,
    pub checkpoint_config_hash: String,
    pub checkpoint: String,
    pub seed: u64,
    pub result: ProtocolResult,
}

fn results_csv(r: &ProtocolResult) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let map = |e: csv::Error| Error::Unsupported(format!("csv: {e}"));
    w.write_record(["protocol", "dataset", "top1", "base_acc", "new_acc", "harmonic_mean"]).map_err(map)?;
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in &r.results {
        w.write_record([
            e.protocol.label().to_string(),
            e.dataset.clone(),
            e.top1.to_string(),
            f(e.base_acc),
            f(e.new_acc),
            f(e.harmonic_mean),
        ])
        .map_err(map)?;
    }
    if let Some(m) = r.target_macro_top1 {
        w.write_record([r.protocol.label(), "target_average", &m.to_string(), "", "", ""]).map_err(map)?;
    }
    w.into_inner().map_err(|e| Error::Unsupported(format!("csv: {e}")))
}

pub struct EvalOptions {
    pub checkpoint: PathBuf,
    /// Configuration to evaluate under; defaults to the checkpoint's own.
    pub config: Option<RunConfig>,
    pub accept_config_mismatch: bool,
    pub out: PathBuf,
    pub force: bool,
}

/// Picks the evaluation config, enforcing the hash check.
pub fn eval_config(ck: &Checkpoint, supplied: Option<&RunConfig>, accept: bool) -> Result<RunConfig> {
    let Some(cfg) = supplied else {
        return Ok(ck.header.config.clone());
    };
    let h = cfg.hash();
    if h != ck.header.config_hash {
        if !accept {
            return Err(Error::HashMismatch {
                config: h,
                checkpoint: ck.header.config_hash.clone(),
            });
        }
        log::warn!(
            "config hash {h} differs from checkpoint hash {}; continuing as acknowledged",
            ck.header.config_hash
        );
    }
    Ok(cfg.clone())
}

/// Loads a checkpoint into an experiment built from `cfg`. The model shape
/// always follows the checkpoint.
pub fn load_model(ck: &Checkpoint, cfg: &RunConfig) -> Result<(Experiment, vlprompt_core::trainer::TrainState)> {
    let exp = Experiment::prepare(cfg)?;
    let state = ck.restore(exp.backbones.encoders())?;
    state.model.check_compatible(exp.backbones.encoders())?;
    Ok((exp, state))
}

pub fn evaluate(opts: &EvalOptions) -> Result<ResultsFile> {
    let ck = Checkpoint::load(&opts.checkpoint)?;
    let cfg = eval_config(&ck, opts.config.as_ref(), opts.accept_config_mismatch)?;
    let (exp, state) = load_model(&ck, &cfg)?;
    let result = exp.evaluate(&state.model)?;
    prepare_dir(&opts.out, opts.force, false)?;
    let file = ResultsFile {
        version: RESULTS_VERSION,
        config_hash: cfg.hash(),
        checkpoint_config_hash: ck.header.config_hash.clone(),
        checkpoint: opts.checkpoint.display().to_string(),
        seed: cfg.train.seeds.get(ck.header.seed_index).copied().unwrap_or_default(),
        result,
    };
    write_atomic(
        &opts.out.join("results.json"),
        serde_json::to_string_pretty(&file).expect("results serialize").as_bytes(),
    )?;
    write_atomic(&opts.out.join("results.csv"), &results_csv(&file.result)?)?;
    Ok(file)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportSplit {
    Train,
    Test,
    All,
}

impl std::str::FromStr for ExportSplit {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            "all" => Ok(Self::All),
            o => Err(format!("unknown split {o:?} (train, test, all)")),
        }
    }
}

pub struct ExportOptions {
    pub checkpoint: PathBuf,
    pub config: Option<RunConfig>,
    pub accept_config_mismatch: bool,
    /// `None` is the source dataset; otherwise a target's manifest name.
    pub dataset: Option<String>,
    pub split: ExportSplit,
    pub out: PathBuf,
    pub force: bool,
}

/// Writes eval-mode joint-space embeddings as CSV: `id,class,d_0..d_{D-1}`.
/// Returns the number of rows.
pub fn export_embeddings(opts: &ExportOptions) -> Result<usize> {
    if opts.out.exists() && !opts.force {
        return Err(Error::Exists(opts.out.clone()));
    }
    let ck = Checkpoint::load(&opts.checkpoint)?;
    let cfg = eval_config(&ck, opts.config.as_ref(), opts.accept_config_mismatch)?;
    let (exp, state) = load_model(&ck, &cfg)?;
    let data = match &opts.dataset {
        None => &exp.source,
        Some(n) if *n == exp.source.manifest.name => &exp.source,
        Some(n) => exp
            .targets
            .iter()
            .find(|t| t.manifest.name == *n)
            .ok_or_else(|| Error::Config(format!("dataset {n:?} is not part of this configuration")))?,
    };
    let model = &state.model;
    let vision = exp.backbones.vision.as_ref();
    let d = model.pv.d_joint();
    let mut w = csv::Writer::from_writer(Vec::new());
    let map = |e: csv::Error| Error::Unsupported(format!("csv: {e}"));
    let mut header = vec!["id".to_string(), "class".to_string()];
    header.extend((0..d).map(|j| format!("d_{j}")));
    w.write_record(&header).map_err(map)?;
    let mut rows = 0;
    for (i, img) in data.images.iter().enumerate() {
        let keep = match opts.split {
            ExportSplit::All => true,
            ExportSplit::Train => data.splits[i] == Split::Train,
            ExportSplit::Test => data.splits[i] == Split::Test,
        };
        if !keep {
            continue;
        }
        let f = model.view_features(vision, img)?;
        let z = model.image_embedding(&f)?;
        let mut rec = vec![i.to_string(), data.manifest.samples[i].class.to_string()];
        rec.extend(z.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(map)?;
        rows += 1;
    }
    let bytes = w.into_inner().map_err(|e| Error::Unsupported(format!("csv: {e}")))?;
    if let Some(p) = opts.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).map_err(Error::io(p))?;
    }
    write_atomic(&opts.out, &bytes)?;
    Ok(rows)
}

/// Reads an embedding CSV back as `(id, class, vector)` rows.
pub fn read_embeddings(path: &Path) -> Result<Vec<(usize, usize, Vec<f64>)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Unsupported(format!("csv {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Unsupported(format!("csv {}: {e}", path.display())))?;
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Unsupported(format!("csv {}: bad number {s:?}", path.display())))
        };
        let id = num(&rec[0])? as usize;
        let class = num(&rec[1])? as usize;
        let v = rec.iter().skip(2).map(num).collect::<Result<Vec<_>>>()?;
        out.push((id, class, v));
    }
    Ok(out)
}
