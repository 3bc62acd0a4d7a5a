//! Ablation grids: named sets of configuration overrides, each trained and
//! evaluated in its own directory, then collected into one comparison table.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::config::{with_overrides, RunConfig};
use crate::error::{Error, Result};
use crate::runner::{prepare_dir, train, write_atomic, RunManifest, TrainOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub name: String,
    pub overrides: Vec<String>,
}

impl Cell {
    fn new(name: impl Into<String>, overrides: &[&str]) -> Self {
        Self {
            name: name.into(),
            overrides: overrides.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Parses `name:key=v,key=v`; a bare name is a cell without overrides.
    pub fn parse(spec: &str) -> Result<Self> {
        let (name, rest) = spec.split_once(':').unwrap_or((spec, ""));
        let name = name.trim();
        if name.is_empty() || name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid cell name in {spec:?}")));
        }
        let overrides = rest
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        Ok(Self {
            name: name.into(),
            overrides,
        })
    }
}

pub const PRESETS: [&str; 4] = ["loss", "init", "context", "shots"];

/// Loss-term grid: cross-entropy alone, then each auxiliary term combination.
pub fn loss_grid() -> Vec<Cell> {
    vec![
        Cell::new("ce", &["loss.enable_con=false", "loss.enable_sem=false"]),
        Cell::new("ce+con", &["loss.enable_sem=false"]),
        Cell::new("ce+sem(x1)", &["loss.enable_con=false", "loss.sem_use_x2=false"]),
        Cell::new("ce+sem(x2)", &["loss.enable_con=false", "loss.sem_use_x1=false"]),
        Cell::new("ce+sem(x1+x2)", &["loss.enable_con=false"]),
        Cell::new("ce+sem+con", &[]),
    ]
}

pub fn init_grid() -> Vec<Cell> {
    ["random", "none", "manual"]
        .iter()
        .map(|i| Cell {
            name: format!("init-{i}"),
            overrides: vec![format!("rho.init={i}")],
        })
        .collect()
}

/// Context lengths 1 to 16, randomly initialized.
pub fn context_grid() -> Vec<Cell> {
    (1..=16)
        .map(|m| Cell {
            name: format!("ctx-{m}"),
            overrides: vec![format!("rho.context_length={m}"), "rho.init=random".into()],
        })
        .collect()
}

pub fn shots_grid() -> Vec<Cell> {
    ["1", "2", "4", "8", "16", "all"]
        .iter()
        .map(|s| Cell {
            name: format!("shots-{s}"),
            overrides: vec![format!("train.shots={s}")],
        })
        .collect()
}

pub fn preset(name: &str) -> Result<Vec<Cell>> {
    match name {
        "loss" => Ok(loss_grid()),
        "init" => Ok(init_grid()),
        "context" => Ok(context_grid()),
        "shots" => Ok(shots_grid()),
        o => Err(Error::Config(format!("unknown grid preset {o:?} (expected one of {})", PRESETS.join(", ")))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: String,
    pub overrides: Vec<String>,
    pub config_hash: String,
    pub loss_label: String,
    pub runs: usize,
    pub train_accuracy: f64,
    pub final_l_total: f64,
    pub top1: f64,
    pub base_acc: Option<f64>,
    pub new_acc: Option<f64>,
    pub hm_of_means: Option<f64>,
    pub mean_of_hm: Option<f64>,
    pub target_macro_top1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub version: u32,
    pub base_config_hash: String,
    pub cells: Vec<CellResult>,
}

impl Comparison {
    pub fn csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let map = |e: csv::Error| Error::Unsupported(format!("csv: {e}"));
        w.write_record([
            "cell",
            "losses",
            "overrides",
            "config_hash",
            "runs",
            "train_accuracy",
            "final_l_total",
            "top1",
            "base_acc",
            "new_acc",
            "hm_of_means",
            "mean_of_hm",
            "target_macro_top1",
        ])
        .map_err(map)?;
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.cells {
            w.write_record([
                c.cell.clone(),
                c.loss_label.clone(),
                c.overrides.join(" "),
                c.config_hash.clone(),
                c.runs.to_string(),
                c.train_accuracy.to_string(),
                c.final_l_total.to_string(),
                c.top1.to_string(),
                f(c.base_acc),
                f(c.new_acc),
                f(c.hm_of_means),
                f(c.mean_of_hm),
                f(c.target_macro_top1),
            ])
            .map_err(map)?;
        }
        w.into_inner().map_err(|e| Error::Unsupported(format!("csv: {e}")))
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn cell_result(cell: &Cell, m: &RunManifest) -> Result<CellResult> {
    let sum = m
        .summary
        .as_ref()
        .ok_or_else(|| Error::Unsupported(format!("cell {} has unfinished runs", cell.name)))?;
    let b2n = sum.b2n.as_ref();
    Ok(CellResult {
        cell: cell.name.clone(),
        overrides: cell.overrides.clone(),
        config_hash: m.config_hash.clone(),
        loss_label: m.config.loss.label(),
        runs: sum.runs,
        train_accuracy: mean(m.runs.iter().filter_map(|r| r.train_accuracy)),
        final_l_total: mean(m.runs.iter().filter_map(|r| r.final_epoch.as_ref().map(|e| e.l_total))),
        top1: sum.top1_mean.first().map(|t| t.1).unwrap_or_default(),
        base_acc: b2n.map(|b| b.base_mean),
        new_acc: b2n.map(|b| b.new_mean),
        hm_of_means: b2n.map(|b| b.hm_of_means),
        mean_of_hm: b2n.map(|b| b.mean_of_hm),
        target_macro_top1: sum.target_macro_top1_mean,
    })
}

pub struct AblateOptions {
    pub out: PathBuf,
    pub force: bool,
}

/// Runs every cell under `out/<cell>/` and writes `comparison.{json,csv}`.
pub fn ablate(base: &RunConfig, cells: &[Cell], opts: &AblateOptions) -> Result<Comparison> {
    if cells.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let mut names = std::collections::BTreeSet::new();
    for c in cells {
        if !names.insert(&c.name) {
            return Err(Error::Config(format!("duplicate cell name {:?}", c.name)));
        }
    }
    // resolve every cell before training anything
    let configs = cells
        .iter()
        .map(|c| {
            with_overrides(base, &c.overrides).map_err(|e| Error::Config(format!("cell {}: {e}", c.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    prepare_dir(&opts.out, opts.force, false)?;
    let mut out = Comparison {
        version: 1,
        base_config_hash: base.hash(),
        cells: Vec::new(),
    };
    for (cell, cfg) in cells.iter().zip(&configs) {
        log::info!("ablation cell {} ({})", cell.name, cell.overrides.join(" "));
        let m = train(
            cfg,
            &TrainOptions {
                out: opts.out.join(&cell.name),
                ..Default::default()
            },
        )?;
        out.cells.push(cell_result(cell, &m)?);
    }
    write_atomic(
        &opts.out.join("comparison.json"),
        serde_json::to_string_pretty(&out).expect("comparison serializes").as_bytes(),
    )?;
    write_atomic(&opts.out.join("comparison.csv"), &out.csv()?)?;
    Ok(out)
}
