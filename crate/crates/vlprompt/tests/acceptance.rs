//! Acceptance suite: one PASS / FAIL / SKIP line per criterion.
//!
//! Runs without the libtest harness. The process exits non-zero on any
//! failure except a documented one: a published cell whose printed value
//! disagrees with its own inputs, where the code is shown to be correct.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vlprompt::ablate::{self, AblateOptions};
use vlprompt::checkpoint::Checkpoint;
use vlprompt::config::RunConfig;
use vlprompt::dataio::Split;
use vlprompt::runner::{self, read_step_log, Experiment, TrainOptions};
use vlprompt_core::augment::{augmix_view, make_triplet_with_subseeds, moco_view, AugMixRecipe, AugmentConfig, MocoConfig};
use vlprompt_core::eval::harmonic_mean;
use vlprompt_core::losses::{class_posterior, cross_entropy_loss, nt_xent, prompt_consistency_loss, LossConfig, PosteriorRow};
use vlprompt_core::model::{class_token_table, PromptModel};
use vlprompt_core::params::Parameterized;
use vlprompt_core::protocol::{check_split, make_split, normalize_name, ProtocolKind};
use vlprompt_core::tensor::Tensor;
use vlprompt_core::trainer::{
    encode_batch, epoch_batches, forward_step, step_gradients, steps_per_epoch, train_step, BatchViews, TrainItem,
    TrainState,
};

use common::{closed_set, cfg, read, ToyPair};

enum Verdict {
    Pass(String),
    Fail(String),
    /// Failure traced to the reference data rather than the code.
    DocumentedFail(String),
    Skip(String),
}

type Check = fn() -> Verdict;

struct Criterion {
    id: u32,
    title: &'static str,
    budget: Duration,
    check: Check,
}

const CRITERIA: &[Criterion] = &[
    Criterion {
        id: 1,
        title: "harmonic mean reproduces published base/new/HM cells within 0.01",
        budget: Duration::from_secs(1),
        check: c1_harmonic_mean,
    },
    Criterion {
        id: 2,
        title: "loss functions match brute-force oracles (rel 1e-6)",
        budget: Duration::from_secs(10),
        check: c2_loss_oracles,
    },
    Criterion {
        id: 3,
        title: "gradient partition over 100 training steps",
        budget: Duration::from_secs(120),
        check: c3_gradient_partition,
    },
    Criterion {
        id: 4,
        title: "analytic gradients of L_Total agree with central differences",
        budget: Duration::from_secs(60),
        check: c4_finite_differences,
    },
    Criterion {
        id: 5,
        title: "consistency loss vanishes under identity views",
        budget: Duration::from_secs(10),
        check: c5_consistency_degeneracy,
    },
    Criterion {
        id: 6,
        title: "toy2 overfit within 500 steps and 6-cell loss ablation",
        budget: Duration::from_secs(600),
        check: c6_overfit_and_ablation,
    },
    Criterion {
        id: 7,
        title: "split invariants over 100 seeds and no unseen-class leakage",
        budget: Duration::from_secs(60),
        check: c7_protocol_invariants,
    },
    Criterion {
        id: 8,
        title: "identical logs across runs and exact resume",
        budget: Duration::from_secs(300),
        check: c8_determinism,
    },
    Criterion {
        id: 9,
        title: "pretrained smoke test",
        budget: Duration::from_secs(3600),
        check: c9_pretrained,
    },
];

fn main() -> ExitCode {
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut regressions = 0;
    let mut counts = [0usize; 4];
    for c in CRITERIA {
        if !filter.is_empty() && !filter.contains(&c.id) {
            continue;
        }
        let t = Instant::now();
        let v = std::panic::catch_unwind(c.check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Verdict::Fail(format!("panicked: {msg}"))
        });
        let dt = t.elapsed();
        let v = match v {
            Verdict::Pass(d) if dt > c.budget => {
                Verdict::Fail(format!("{d}; took {:.1}s, budget {}s", dt.as_secs_f64(), c.budget.as_secs()))
            }
            v => v,
        };
        let (tag, detail) = match &v {
            Verdict::Pass(d) => ("PASS", d.clone()),
            Verdict::Fail(d) => ("FAIL", d.clone()),
            Verdict::DocumentedFail(d) => ("FAIL", format!("{d} [documented data inconsistency]")),
            Verdict::Skip(d) => ("SKIP", d.clone()),
        };
        match v {
            Verdict::Pass(_) => counts[0] += 1,
            Verdict::Fail(_) => {
                counts[1] += 1;
                regressions += 1;
            }
            Verdict::DocumentedFail(_) => counts[2] += 1,
            Verdict::Skip(_) => counts[3] += 1,
        }
        println!("{tag} criterion {}: {} ({:.2}s) - {detail}", c.id, c.title, dt.as_secs_f64());
    }
    println!(
        "acceptance: {} passed, {} failed, {} failed on documented data, {} skipped",
        counts[0], counts[1], counts[2], counts[3]
    );
    if regressions > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().expect("temp dir")
}

// ---------------------------------------------------------------- 1

/// `(table, dataset, method, base, new, printed HM)`.
type Cell = (&'static str, &'static str, &'static str, f64, f64, f64);

/// Base-to-new results as published: the 11-dataset average table, then
/// the per-dataset breakdown.
const B2N_CELLS: &[Cell] = &[
    ("average", "mean", "clip", 69.34, 74.22, 71.70),
    ("average", "mean", "slip", 69.77, 74.28, 71.96),
    ("average", "mean", "coop", 82.69, 63.22, 71.66),
    ("average", "mean", "cocoop", 80.47, 71.69, 75.83),
    ("average", "mean", "maple", 82.28, 75.14, 78.55),
    ("average", "mean", "stylip", 83.22, 75.94, 79.41),
    ("average", "mean", "proposed", 84.21, 77.32, 80.62),
    ("per-dataset", "Average", "clip", 69.34, 74.22, 71.70),
    ("per-dataset", "Average", "slip", 69.77, 74.28, 71.96),
    ("per-dataset", "Average", "coop", 82.69, 63.22, 71.66),
    ("per-dataset", "Average", "cocoop", 80.47, 71.69, 75.83),
    ("per-dataset", "Average", "maple", 82.28, 75.14, 78.55),
    ("per-dataset", "Average", "stylip", 83.22, 75.94, 79.41),
    ("per-dataset", "Average", "proposed", 84.21, 77.32, 80.62),
    ("per-dataset", "ImageNet", "clip", 72.43, 68.14, 70.22),
    ("per-dataset", "ImageNet", "slip", 72.95, 69.76, 71.32),
    ("per-dataset", "ImageNet", "coop", 76.47, 67.88, 71.92),
    ("per-dataset", "ImageNet", "cocoop", 75.98, 70.43, 73.10),
    ("per-dataset", "ImageNet", "maple", 76.66, 70.54, 73.47),
    ("per-dataset", "ImageNet", "stylip", 77.15, 71.34, 74.13),
    ("per-dataset", "ImageNet", "proposed", 78.56, 73.22, 75.80),
    ("per-dataset", "Caltech101", "clip", 96.84, 94.00, 95.40),
    ("per-dataset", "Caltech101", "slip", 96.97, 94.05, 95.49),
    ("per-dataset", "Caltech101", "coop", 98.00, 89.81, 93.73),
    ("per-dataset", "Caltech101", "cocoop", 97.96, 93.81, 95.84),
    ("per-dataset", "Caltech101", "maple", 97.74, 94.36, 96.02),
    ("per-dataset", "Caltech101", "stylip", 98.23, 94.91, 96.54),
    ("per-dataset", "Caltech101", "proposed", 98.86, 95.78, 97.30),
    ("per-dataset", "OxfordPets", "clip", 91.17, 97.26, 94.12),
    ("per-dataset", "OxfordPets", "slip", 91.23, 97.04, 94.05),
    ("per-dataset", "OxfordPets", "coop", 93.67, 95.29, 94.47),
    ("per-dataset", "OxfordPets", "cocoop", 95.20, 97.69, 96.43),
    ("per-dataset", "OxfordPets", "maple", 95.43, 97.76, 96.58),
    ("per-dataset", "OxfordPets", "stylip", 95.96, 98.14, 97.04),
    ("per-dataset", "OxfordPets", "proposed", 96.36, 98.49, 97.41),
    ("per-dataset", "StanfordCars", "clip", 63.37, 74.89, 68.65),
    ("per-dataset", "StanfordCars", "slip", 63.52, 74.92, 68.75),
    ("per-dataset", "StanfordCars", "coop", 78.12, 60.40, 68.13),
    ("per-dataset", "StanfordCars", "cocoop", 70.49, 73.59, 72.01),
    ("per-dataset", "StanfordCars", "maple", 72.94, 74.00, 73.47),
    ("per-dataset", "StanfordCars", "stylip", 75.19, 74.46, 74.82),
    ("per-dataset", "StanfordCars", "proposed", 77.59, 75.35, 76.45),
    ("per-dataset", "Flowers102", "clip", 72.08, 77.80, 74.83),
    ("per-dataset", "Flowers102", "slip", 72.17, 77.87, 74.91),
    ("per-dataset", "Flowers102", "coop", 97.60, 59.67, 74.06),
    ("per-dataset", "Flowers102", "cocoop", 94.87, 71.15, 81.71),
    ("per-dataset", "Flowers102", "maple", 95.92, 72.46, 82.56),
    ("per-dataset", "Flowers102", "stylip", 96.54, 73.08, 83.19),
    ("per-dataset", "Flowers102", "proposed", 97.73, 77.91, 86.70),
    ("per-dataset", "Food101", "clip", 90.10, 91.22, 90.66),
    ("per-dataset", "Food101", "slip", 90.14, 91.27, 90.70),
    ("per-dataset", "Food101", "coop", 88.33, 82.26, 85.19),
    ("per-dataset", "Food101", "cocoop", 90.70, 91.29, 90.99),
    ("per-dataset", "Food101", "maple", 90.71, 92.05, 91.38),
    ("per-dataset", "Food101", "stylip", 91.20, 92.48, 91.84),
    ("per-dataset", "Food101", "proposed", 92.37, 93.56, 92.96),
    ("per-dataset", "FGVCAircraft", "clip", 27.19, 36.29, 31.09),
    ("per-dataset", "FGVCAircraft", "slip", 27.49, 36.11, 31.22),
    ("per-dataset", "FGVCAircraft", "coop", 40.44, 22.30, 28.75),
    ("per-dataset", "FGVCAircraft", "cocoop", 33.41, 23.71, 27.74),
    ("per-dataset", "FGVCAircraft", "maple", 37.44, 35.61, 36.50),
    ("per-dataset", "FGVCAircraft", "stylip", 37.65, 35.93, 36.77),
    ("per-dataset", "FGVCAircraft", "proposed", 37.89, 36.44, 37.15),
    ("per-dataset", "SUN397", "clip", 69.36, 75.35, 72.23),
    ("per-dataset", "SUN397", "slip", 69.35, 75.39, 72.24),
    ("per-dataset", "SUN397", "coop", 80.60, 65.89, 72.51),
    ("per-dataset", "SUN397", "cocoop", 79.74, 76.86, 78.27),
    ("per-dataset", "SUN397", "maple", 80.82, 78.70, 79.75),
    ("per-dataset", "SUN397", "stylip", 82.12, 79.95, 81.02),
    ("per-dataset", "SUN397", "proposed", 81.94, 81.64, 81.79),
    ("per-dataset", "DTD", "clip", 53.24, 59.90, 56.37),
    ("per-dataset", "DTD", "slip", 56.71, 59.30, 57.98),
    ("per-dataset", "DTD", "coop", 79.44, 41.18, 54.24),
    ("per-dataset", "DTD", "cocoop", 77.01, 56.00, 64.85),
    ("per-dataset", "DTD", "maple", 80.36, 59.18, 68.16),
    ("per-dataset", "DTD", "stylip", 81.57, 61.72, 70.27),
    ("per-dataset", "DTD", "proposed", 82.41, 62.95, 71.38),
    ("per-dataset", "EuroSAT", "clip", 56.48, 64.05, 60.03),
    ("per-dataset", "EuroSAT", "slip", 56.43, 63.79, 59.88),
    ("per-dataset", "EuroSAT", "coop", 92.19, 54.74, 68.69),
    ("per-dataset", "EuroSAT", "cocoop", 87.49, 60.04, 71.21),
    ("per-dataset", "EuroSAT", "maple", 94.07, 73.23, 82.35),
    ("per-dataset", "EuroSAT", "stylip", 94.61, 74.06, 83.08),
    ("per-dataset", "EuroSAT", "proposed", 94.92, 76.27, 84.58),
    ("per-dataset", "UCF101", "clip", 70.53, 77.50, 73.85),
    ("per-dataset", "UCF101", "slip", 70.55, 77.56, 73.89),
    ("per-dataset", "UCF101", "coop", 84.69, 56.05, 67.46),
    ("per-dataset", "UCF101", "cocoop", 82.33, 73.45, 77.64),
    ("per-dataset", "UCF101", "maple", 83.00, 78.66, 80.77),
    ("per-dataset", "UCF101", "stylip", 85.19, 79.22, 82.10),
    ("per-dataset", "UCF101", "proposed", 87.67, 78.91, 83.06),
];

/// The one cell whose printed HM is not the harmonic mean of its printed
/// base and new values (81.3155 by arithmetic).
const INCONSISTENT_CELL: (&str, &str) = ("Flowers102", "cocoop");

fn c1_harmonic_mean() -> Verdict {
    let mut misses = Vec::new();
    for &(table, ds, method, b, n, printed) in B2N_CELLS {
        let hm = match harmonic_mean(b, n) {
            Ok(v) => v,
            Err(e) => return Verdict::Fail(format!("{table}/{ds}/{method}: {e}")),
        };
        // the arithmetic itself must be exact, independent of the table
        let reference = 2.0 * b * n / (b + n);
        if (hm - reference).abs() > 1e-9 {
            return Verdict::Fail(format!("{ds}/{method}: {hm} is not 2bn/(b+n) = {reference}"));
        }
        if (hm - printed).abs() > 0.01 + 1e-9 {
            misses.push((table, ds, method, b, n, printed, hm));
        }
    }
    let total = B2N_CELLS.len();
    let detail = |m: &[(&str, &str, &str, f64, f64, f64, f64)]| {
        m.iter()
            .map(|(t, d, me, b, n, p, h)| format!("{t}/{d}/{me}: ({b}, {n}) gives {h:.4}, printed {p}"))
            .collect::<Vec<_>>()
            .join("; ")
    };
    if misses.is_empty() {
        return Verdict::Pass(format!("{total}/{total} cells"));
    }
    let msg = format!("{}/{total} cells within 0.01; off: {}", total - misses.len(), detail(&misses));
    let only_known = misses.iter().all(|m| (m.1, m.2) == INCONSISTENT_CELL);
    if only_known {
        Verdict::DocumentedFail(msg)
    } else {
        Verdict::Fail(msg)
    }
}

// ---------------------------------------------------------------- 2

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| r.random_range(-2.0..2.0)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Direct SimCLR formula: for every anchor of the 2B views, minus the log
/// of its positive pair's share among all other views.
fn oracle_nt_xent(a: &Tensor, b: &Tensor, tau: f64) -> f64 {
    let n = a.rows();
    let z: Vec<Vec<f64>> = rows_of(a).iter().chain(rows_of(b).iter()).map(|r| unit(r)).collect();
    let mut total = 0.0;
    for i in 0..2 * n {
        let pos = if i < n { i + n } else { i - n };
        let mut denom = 0.0;
        for k in 0..2 * n {
            if k != i {
                denom += (dot(&z[i], &z[k]) / tau).exp();
            }
        }
        total += -((dot(&z[i], &z[pos]) / tau).exp() / denom).ln();
    }
    total / (2 * n) as f64
}

fn oracle_posterior(z: &[f64], prompts: &Tensor, tau: f64) -> Vec<f64> {
    let zi = unit(z);
    let e: Vec<f64> = rows_of(prompts).iter().map(|p| (dot(&zi, &unit(p)) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn oracle_consistency(t: &[Tensor], s1: Option<&[Tensor]>, s2: Option<&[Tensor]>) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (i, ti) in t.iter().enumerate() {
        for k in 0..ti.rows() {
            let mut v = 0.0;
            for s in [s1, s2].into_iter().flatten() {
                let d: f64 = ti.row(k).iter().zip(s[i].row(k)).map(|(x, y)| (x - y) * (x - y)).sum();
                v += d.sqrt();
            }
            total += v;
            count += 1;
        }
    }
    total / count as f64
}

fn rel(a: f64, oracle: f64) -> f64 {
    (a - oracle).abs() / oracle.abs().max(f64::MIN_POSITIVE)
}

fn c2_loss_oracles() -> Verdict {
    const FIXTURES: usize = 25;
    const TOL: f64 = 1e-6;
    let mut r = ChaCha8Rng::seed_from_u64(0xacce97);
    let mut worst = [0.0f64; 4];
    for f in 0..FIXTURES {
        let b = r.random_range(2..=4);
        let d = r.random_range(2..=8);
        let k = r.random_range(2..=5);
        let tau = [0.07, 0.1, 0.5, 1.0][f % 4];

        let za = random_matrix(&mut r, b, d);
        let zb = random_matrix(&mut r, b, d);
        let got = nt_xent(&za, &zb, tau).unwrap();
        worst[0] = worst[0].max(rel(got, oracle_nt_xent(&za, &zb, tau)));

        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut oracle_ce = 0.0;
        for _ in 0..b {
            let z: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
            let p = random_matrix(&mut r, k, d);
            let post = class_posterior(&z, &p, tau).unwrap();
            let want = oracle_posterior(&z, &p, tau);
            for (g, w) in post.probs.iter().zip(&want) {
                worst[1] = worst[1].max(rel(*g, *w));
            }
            let y = r.random_range(0..k);
            oracle_ce -= want[y].ln();
            labels.push(y);
            rows.push(post);
        }
        oracle_ce /= b as f64;
        let ce = cross_entropy_loss(&rows, &labels).unwrap();
        worst[2] = worst[2].max(rel(ce, oracle_ce));
        // the loss must also hold on rows built from logits alone
        let relogit: Vec<PosteriorRow> = rows.iter().map(|p| PosteriorRow::from_logits(p.logits.clone())).collect();
        worst[2] = worst[2].max(rel(cross_entropy_loss(&relogit, &labels).unwrap(), oracle_ce));

        let t: Vec<Tensor> = (0..b).map(|_| random_matrix(&mut r, k, d)).collect();
        let s1: Vec<Tensor> = (0..b).map(|_| random_matrix(&mut r, k, d)).collect();
        let s2: Vec<Tensor> = (0..b).map(|_| random_matrix(&mut r, k, d)).collect();
        for (a, bb) in [(Some(&s1[..]), Some(&s2[..])), (Some(&s1[..]), None), (None, Some(&s2[..]))] {
            let got = prompt_consistency_loss(&t, a, bb).unwrap();
            worst[3] = worst[3].max(rel(got, oracle_consistency(&t, a, bb)));
        }
    }
    let names = ["nt_xent", "class_posterior", "cross_entropy_loss", "prompt_consistency_loss"];
    let summary = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    if worst.iter().all(|w| *w <= TOL) {
        Verdict::Pass(format!("{FIXTURES} fixtures each, worst relative error: {summary}"))
    } else {
        Verdict::Fail(format!("worst relative error above {TOL}: {summary}"))
    }
}

// ---------------------------------------------------------------- 3, 4, 5

/// Episode, typed encoders, class tokens and a fresh model for `c`.
struct Bench {
    exp: Experiment,
    enc: ToyPair,
    items: Vec<TrainItem>,
    tokens: Vec<Tensor>,
    state: TrainState,
}

impl Bench {
    fn new(c: &RunConfig) -> Self {
        let exp = Experiment::prepare(c).unwrap();
        let mut names: Vec<&[String]> = vec![&exp.source.manifest.classes];
        names.extend(exp.targets.iter().map(|t| t.manifest.classes.as_slice()));
        let enc = ToyPair::new(c, &names);
        assert_eq!(
            exp.backbones.encoders().checksum(),
            enc.encoders().checksum(),
            "typed encoders differ from the configured ones"
        );
        let items = exp.episode(0).unwrap();
        let tokens = class_token_table(&enc.text, &exp.seen_names()).unwrap();
        let seed = exp.run_seed(0);
        let model = PromptModel::new(enc.encoders(), &c.model(), seed).unwrap();
        let state = TrainState::new(model, seed);
        Self {
            exp,
            enc,
            items,
            tokens,
            state,
        }
    }

    fn views(&self, batch: &[usize], epoch: usize) -> BatchViews {
        let b: Vec<&TrainItem> = batch.iter().map(|&i| &self.items[i]).collect();
        let c = &self.exp.cfg;
        encode_batch(&self.state.model, self.enc.encoders(), &b, &c.augment, &c.loss, self.state.seed, epoch).unwrap()
    }

    fn labels(&self, batch: &[usize]) -> Vec<usize> {
        batch.iter().map(|&i| self.items[i].label).collect()
    }
}

fn c3_gradient_partition() -> Verdict {
    const STEPS: usize = 100;
    let c = closed_set(&["train.seeds=[1]"]);
    let mut bench = Bench::new(&c);
    let setup = bench.exp.setup().unwrap();
    let digest0 = bench.enc.weight_digest();
    let spe = steps_per_epoch(bench.items.len(), c.train.batch_size);
    let total = spe * c.train.epochs;
    let (mut rho_moved, mut pv_moved, mut both_moved) = (0, 0, 0);
    let mut teacher_nonzero = 0usize;
    let mut student_grads = 0usize;
    let mut done = 0;
    let mut epoch = 0;
    while done < STEPS {
        for batch in epoch_batches(bench.items.len(), c.train.batch_size, bench.state.seed, epoch) {
            if done == STEPS {
                break;
            }
            // L_Sem alone, differentiated with respect to every branch's context tokens
            let views = bench.views(&batch, epoch);
            let sg = forward_step(
                &bench.state.model,
                bench.enc.encoders(),
                &views,
                &bench.labels(&batch),
                &bench.tokens,
                &c.loss,
            )
            .unwrap();
            let g = sg.graph.backward(sg.l_sem.expect("sem enabled"));
            for id in &sg.context[0] {
                if let Some(t) = g.get(*id) {
                    teacher_nonzero += t.data().iter().filter(|v| **v != 0.0).count();
                }
            }
            for id in sg.context[1].iter().chain(&sg.context[2]) {
                if g.get(*id).is_some_and(|t| t.data().iter().any(|v| *v != 0.0)) {
                    student_grads += 1;
                }
            }

            let rho0 = bench.state.model.rho.param_norm();
            let pv0 = bench.state.model.pv.param_norm();
            let lr = c.train.optim.lr_at(bench.state.step, spe, total);
            let b: Vec<&TrainItem> = batch.iter().map(|&i| &bench.items[i]).collect();
            train_step(&mut bench.state, bench.enc.encoders(), &setup, &b, epoch, lr).unwrap();
            if bench.enc.weight_digest() != digest0 {
                return Verdict::Fail(format!("encoder weights changed at step {done}"));
            }
            let r = bench.state.model.rho.param_norm() != rho0;
            let p = bench.state.model.pv.param_norm() != pv0;
            rho_moved += usize::from(r);
            pv_moved += usize::from(p);
            both_moved += usize::from(r && p);
            done += 1;
        }
        epoch += 1;
    }
    let detail = format!(
        "encoder digest fixed over {STEPS} steps; rho norm moved on {rho_moved}, P_v on {pv_moved}, both on {both_moved}; \
         {teacher_nonzero} nonzero teacher-token gradient entries; {student_grads} student tokens with gradient"
    );
    if both_moved >= 99 && teacher_nonzero == 0 && student_grads > 0 {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn c4_finite_differences() -> Verdict {
    const H: f64 = 1e-4;
    const TOL: f64 = 1e-2;
    const COORDS: usize = 20;
    // small floor so near-zero gradients (e.g. a bias in front of batch norm) compare absolutely
    const FLOOR: f64 = 1e-6;
    let c = closed_set(&["train.seeds=[1]", "rho.init=random"]);
    let bench = Bench::new(&c);
    let batch: Vec<usize> = (0..c.train.batch_size).collect();
    let views = bench.views(&batch, 0);
    let labels = bench.labels(&batch);
    let model = &bench.state.model;
    let text = &bench.enc.text;
    let prompts = |m: &PromptModel, v: &[vlprompt_core::model::ViewFeatures]| -> Vec<Tensor> {
        v.iter().map(|f| m.prompt_embeddings(text, &f.seed, &bench.tokens).unwrap()).collect()
    };
    // L_Sem stops the gradient at the teacher, so the numeric objective holds
    // the teacher embeddings at their unperturbed values
    let teacher = prompts(model, &views.x);
    let no_sem = LossConfig {
        enable_sem: false,
        ..c.loss.clone()
    };
    let loss = |m: &PromptModel| {
        let sg = forward_step(m, bench.enc.encoders(), &views, &labels, &bench.tokens, &no_sem).unwrap();
        let (s1, s2) = (prompts(m, &views.x1), prompts(m, &views.x2));
        sg.graph.scalar(sg.total) + prompt_consistency_loss(&teacher, Some(&s1), Some(&s2)).unwrap()
    };
    let sg = forward_step(model, bench.enc.encoders(), &views, &labels, &bench.tokens, &c.loss).unwrap();
    let grads = step_gradients(model, &sg);
    let n_rho = model.rho.params().len();
    let sizes: Vec<usize> = model.rho.params().iter().chain(model.pv.params().iter()).map(|t| t.len()).collect();

    let mut r = ChaCha8Rng::seed_from_u64(0xfd);
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for k in 0..COORDS {
        // alternate between the two trainable groups
        let group: Vec<usize> = if k % 2 == 0 { (0..n_rho).collect() } else { (n_rho..sizes.len()).collect() };
        let t = group[r.random_range(0..group.len())];
        let j = r.random_range(0..sizes[t]);
        let eval_at = |delta: f64| {
            let mut m = model.clone();
            let mut ps = m.rho.params_mut();
            ps.extend(m.pv.params_mut());
            ps[t].data_mut()[j] += delta;
            loss(&m)
        };
        let numeric = (eval_at(H) - eval_at(-H)) / (2.0 * H);
        let analytic = grads[t].data()[j];
        let e = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max(e);
        if e > TOL {
            lines.push(format!("tensor {t} index {j}: analytic {analytic:e} numeric {numeric:e}"));
        }
    }
    if lines.is_empty() {
        Verdict::Pass(format!("{COORDS} coordinates (rho and P_v), worst relative error {worst:.2e}"))
    } else {
        Verdict::Fail(lines.join("; "))
    }
}

fn c5_consistency_degeneracy() -> Verdict {
    // random init, so prompts depend on the image from the first step
    let c = closed_set(&["train.seeds=[1]", "rho.init=random"]);
    let bench = Bench::new(&c);
    let identity = AugmentConfig {
        moco: MocoConfig::identity(),
        ..AugmentConfig::default()
    };
    let skip_recipe = AugMixRecipe {
        weights: vec![1.0],
        skip: 0.0,
        chains: vec![Vec::new()],
    };
    let enc = bench.enc.encoders();
    let model = &bench.state.model;
    let mut worst_full: f64 = 0.0;
    let mut worst_x2: f64 = 0.0;
    let mut x1_only: f64 = 0.0;
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..20 {
        let b = r.random_range(2..=4);
        let batch: Vec<usize> = (0..b).map(|_| r.random_range(0..bench.items.len())).collect();
        let labels = bench.labels(&batch);
        let mut ident = BatchViews::default();
        let mut skip = BatchViews::default();
        for &i in &batch {
            let x = &bench.items[i].image;
            let x1 = moco_view(x, r.random(), &identity.moco).unwrap();
            let x2 = augmix_view(x, &skip_recipe).unwrap();
            if &x1 != x || &x2 != x {
                return Verdict::Fail(format!("trial {trial}: identity views differ from the input"));
            }
            let f = model.view_features(enc.vision, x).unwrap();
            ident.x.push(f.clone());
            ident.x1.push(model.view_features(enc.vision, &x1).unwrap());
            ident.x2.push(model.view_features(enc.vision, &x2).unwrap());
            // a real geometric view next to the skipped AugMix view
            let t = make_triplet_with_subseeds(x, r.random(), r.random(), &AugmentConfig::default()).unwrap();
            skip.x.push(f);
            skip.x1.push(model.view_features(enc.vision, &t.x1).unwrap());
            skip.x2.push(model.view_features(enc.vision, &x2).unwrap());
        }
        let sem = |views: &BatchViews, loss: &LossConfig| {
            let sg = forward_step(model, enc, views, &labels, &bench.tokens, loss).unwrap();
            sg.graph.scalar(sg.l_sem.unwrap())
        };
        worst_full = worst_full.max(sem(&ident, &c.loss).abs());
        let only_x2 = LossConfig {
            sem_use_x1: false,
            ..c.loss.clone()
        };
        worst_x2 = worst_x2.max(sem(&skip, &only_x2).abs());
        let only_x1 = LossConfig {
            sem_use_x2: false,
            ..c.loss.clone()
        };
        x1_only = x1_only.max(sem(&skip, &only_x1));
    }
    let detail = format!(
        "20 batches: max |L_Sem| with x1=x2=x {worst_full:e}, max x2 term with skip 0 {worst_x2:e} \
         (x1 term alongside it reaches {x1_only:.3e})"
    );
    if worst_full <= f64::EPSILON && worst_x2 <= f64::EPSILON && x1_only > 0.0 {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

// ---------------------------------------------------------------- 6

fn c6_overfit_and_ablation() -> Verdict {
    let dir = tmp();
    let c = closed_set(&["train.epochs=63", "train.max_steps=500", "train.seeds=[1]"]);
    let m = match runner::train(
        &c,
        &TrainOptions {
            out: dir.path().join("overfit"),
            ..Default::default()
        },
    ) {
        Ok(m) => m,
        Err(e) => return Verdict::Fail(format!("training failed: {e}")),
    };
    let run = &m.runs[0];
    let acc = run.train_accuracy.unwrap_or(0.0);
    if run.steps > 500 || acc < 95.0 {
        return Verdict::Fail(format!("train accuracy {acc:.2}% after {} steps", run.steps));
    }

    let out = dir.path().join("ablation");
    let cells = ablate::preset("loss").unwrap();
    let cmp = match ablate::ablate(&c, &cells, &AblateOptions { out: out.clone(), force: false }) {
        Ok(c) => c,
        Err(e) => return Verdict::Fail(format!("ablation failed: {e}")),
    };
    let want = ["ce", "ce+con", "ce+sem(x1)", "ce+sem(x2)", "ce+sem(x1+x2)", "ce+sem(x1+x2)+con"];
    let labels: Vec<&str> = cmp.cells.iter().map(|c| c.loss_label.as_str()).collect();
    if labels != want {
        return Verdict::Fail(format!("ablation rows {labels:?}"));
    }
    if let Some(bad) = cmp
        .cells
        .iter()
        .find(|c| c.runs != 1 || !c.top1.is_finite() || !c.final_l_total.is_finite() || !(0.0..=100.0).contains(&c.top1))
    {
        return Verdict::Fail(format!("cell {} has an invalid result", bad.cell));
    }
    let mut csv = csv::Reader::from_path(out.join("comparison.csv")).unwrap();
    let rows = csv.records().count();
    let json: ablate::Comparison = serde_json::from_slice(&read(&out.join("comparison.json"))).unwrap();
    if rows != 6 || json != cmp {
        return Verdict::Fail(format!("comparison files disagree ({rows} csv rows)"));
    }
    let table = cmp
        .cells
        .iter()
        .map(|c| format!("{} {:.1}", c.cell, c.train_accuracy))
        .collect::<Vec<_>>()
        .join(", ");
    Verdict::Pass(format!(
        "train accuracy {acc:.2}% after {} steps; 6/6 cells complete (train acc: {table})",
        run.steps
    ))
}

// ---------------------------------------------------------------- 7

fn random_names(r: &mut ChaCha8Rng, pool: &[String], n: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    while out.len() < n {
        let mut name = pool[r.random_range(0..pool.len())].clone();
        if r.random_bool(0.3) {
            name = format!("  {} ", name.to_uppercase());
        }
        if !out.iter().any(|o| normalize_name(o) == normalize_name(&name)) {
            out.push(name);
        }
    }
    out
}

fn check_b2n(r: &mut ChaCha8Rng, seed: u64) -> Result<(), String> {
    let k = r.random_range(2..=40);
    let names: Vec<String> = (0..k).map(|i| format!("class {i}")).collect();
    let s = make_split(ProtocolKind::BaseToNew, &[&names], seed).map_err(|e| e.to_string())?;
    let seen: BTreeSet<usize> = s.seen.iter().copied().collect();
    let unseen: BTreeSet<usize> = s.unseen.iter().copied().collect();
    if seen.len() != s.seen.len() || unseen.len() != s.unseen.len() {
        return Err(format!("seed {seed}: duplicate ids"));
    }
    if !seen.is_disjoint(&unseen) {
        return Err(format!("seed {seed}: seen and unseen overlap"));
    }
    if seen.union(&unseen).copied().collect::<Vec<_>>() != (0..k).collect::<Vec<_>>() {
        return Err(format!("seed {seed}: seen and unseen do not cover {k} classes"));
    }
    if seen.len() != k.div_ceil(2) {
        return Err(format!("seed {seed}: {} seen of {k}", seen.len()));
    }
    if make_split(ProtocolKind::BaseToNew, &[&names], seed).map_err(|e| e.to_string())? != s {
        return Err(format!("seed {seed}: split not deterministic"));
    }
    check_split(&s, k).map_err(|e| e.to_string())
}

fn check_dg(r: &mut ChaCha8Rng, seed: u64, pool: &[String]) -> Result<(), String> {
    let n = r.random_range(2..=12);
    let src = random_names(r, pool, n);
    let n_targets = r.random_range(1..=3);
    let targets: Vec<Vec<String>> = (0..n_targets)
        .map(|_| {
            // mostly the source label set, reordered and re-cased, sometimes with extras
            let mut t: Vec<String> = src.iter().map(|n| n.to_lowercase()).collect();
            t.retain(|_| r.random_bool(0.85));
            if t.is_empty() {
                t.push(src[0].clone());
            }
            if r.random_bool(0.3) {
                t.push(format!("extra {}", r.random_range(0..1000)));
            }
            let n = t.len();
            for i in (1..n).rev() {
                t.swap(i, r.random_range(0..=i));
            }
            t
        })
        .collect();
    let mut all: Vec<&[String]> = vec![&src];
    all.extend(targets.iter().map(|t| t.as_slice()));
    let s = make_split(ProtocolKind::DomainGeneralization, &all, seed).map_err(|e| e.to_string())?;
    if s.seen != s.unseen {
        return Err(format!("seed {seed}: seen != unseen"));
    }
    let src_norm: Vec<String> = src.iter().map(|n| normalize_name(n)).collect();
    let expect: Vec<usize> = (0..src.len())
        .filter(|&i| targets.iter().any(|t| t.iter().any(|n| normalize_name(n) == src_norm[i])))
        .collect();
    if s.seen != expect {
        return Err(format!("seed {seed}: seen {:?}, expected {expect:?}", s.seen));
    }
    for (ti, tc) in s.targets.iter().enumerate() {
        if tc.dataset != ti + 1 {
            return Err(format!("seed {seed}: target {ti} is not a separate dataset"));
        }
        let as_seen = tc.as_seen.as_ref().ok_or(format!("seed {seed}: missing alignment"))?;
        for (&tid, &pos) in tc.classes.iter().zip(as_seen) {
            if normalize_name(&targets[ti][tid]) != src_norm[s.seen[pos]] {
                return Err(format!("seed {seed}: target class {tid} aligned to the wrong source class"));
            }
        }
    }
    check_split(&s, src.len()).map_err(|e| e.to_string())
}

fn check_cd(r: &mut ChaCha8Rng, seed: u64, pool: &[String]) -> Result<(), String> {
    let n = r.random_range(1..=10);
    let src = random_names(r, pool, n);
    let n_targets = r.random_range(1..=3);
    let targets: Vec<Vec<String>> = (0..n_targets)
        .map(|_| {
            let n = r.random_range(1..=10);
            random_names(r, pool, n)
        })
        .collect();
    let mut all: Vec<&[String]> = vec![&src];
    all.extend(targets.iter().map(|t| t.as_slice()));
    let s = make_split(ProtocolKind::CrossDataset, &all, seed).map_err(|e| e.to_string())?;
    if s.seen != (0..src.len()).collect::<Vec<_>>() || !s.unseen.is_empty() {
        return Err(format!("seed {seed}: cross-dataset must train on every source class"));
    }
    for (ti, tc) in s.targets.iter().enumerate() {
        if tc.dataset != ti + 1 || tc.classes != (0..targets[ti].len()).collect::<Vec<_>>() {
            return Err(format!("seed {seed}: target {ti} label set incomplete"));
        }
    }
    check_split(&s, src.len()).map_err(|e| e.to_string())
}

fn c7_protocol_invariants() -> Verdict {
    let pool: Vec<String> = (0..30).map(|i| format!("name{i}")).collect();
    let mut r = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..100u64 {
        for res in [check_b2n(&mut r, seed), check_dg(&mut r, seed, &pool), check_cd(&mut r, seed, &pool)] {
            if let Err(e) = res {
                return Verdict::Fail(e);
            }
        }
    }

    // leakage audit over a full base-to-new run on toy4
    let dir = tmp();
    let c = cfg(&["data.source=toy4", "train.epochs=4", "train.seeds=[1, 2]"]);
    let m = match runner::train(
        &c,
        &TrainOptions {
            out: dir.path().to_path_buf(),
            ..Default::default()
        },
    ) {
        Ok(m) => m,
        Err(e) => return Verdict::Fail(format!("training failed: {e}")),
    };
    let exp = Experiment::prepare(&c).unwrap();
    let seen: BTreeSet<usize> = m.split.seen.iter().copied().collect();
    let mut samples = 0;
    for run in &m.runs {
        let log = read_step_log(&dir.path().join(&run.dir).join(runner::STEP_LOG)).unwrap();
        if log.len() != run.steps {
            return Verdict::Fail(format!("{}: {} log lines for {} steps", run.dir, log.len(), run.steps));
        }
        for line in &log {
            for &id in &line.record.sample_ids {
                let class = exp.source.manifest.samples[id].class;
                if !seen.contains(&class) || exp.source.splits[id] != Split::Train {
                    return Verdict::Fail(format!("{}: step {} trained on sample {id}", run.dir, line.record.step));
                }
                samples += 1;
            }
            if line.classes.iter().any(|c| !seen.contains(c)) {
                return Verdict::Fail(format!("{}: logged classes {:?} leave the seen set", run.dir, line.classes));
            }
        }
    }
    Verdict::Pass(format!(
        "300 splits (100 seeds x 3 kinds) hold; {samples} logged training samples, none unseen"
    ))
}

// ---------------------------------------------------------------- 8

fn same_files(a: &Path, b: &Path, files: &[&str]) -> Result<(), String> {
    for f in files {
        if read(&a.join(f)) != read(&b.join(f)) {
            return Err(format!("{f} differs"));
        }
    }
    Ok(())
}

fn c8_determinism() -> Verdict {
    let dir = tmp();
    let c = closed_set(&["train.epochs=4", "train.seeds=[1, 2]"]);
    let run = |name: &str, halt: Option<usize>, resume: bool| {
        runner::train(
            &c,
            &TrainOptions {
                out: dir.path().join(name),
                resume,
                halt_after_epochs: halt,
                ..Default::default()
            },
        )
    };
    let (a, b) = match (run("a", None, false), run("b", None, false)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Verdict::Fail(format!("training failed: {e}")),
    };
    if a.runs != b.runs {
        return Verdict::Fail("run manifests differ between identical runs".into());
    }
    let logs: Vec<String> = a.runs.iter().map(|r| format!("{}/{}", r.dir, runner::STEP_LOG)).collect();
    let mut files: Vec<&str> = logs.iter().map(String::as_str).collect();
    files.push(runner::MANIFEST_FILE);
    if let Err(e) = same_files(&dir.path().join("a"), &dir.path().join("b"), &files) {
        return Verdict::Fail(format!("identical runs: {e}"));
    }

    // interrupted after 2 epochs, then resumed
    let halted = match run("r", Some(2), false) {
        Ok(m) => m,
        Err(e) => return Verdict::Fail(format!("halted run failed: {e}")),
    };
    if halted.runs.iter().any(|r| r.completed || r.epochs != 2) {
        return Verdict::Fail("halted run did not stop after 2 epochs".into());
    }
    let resumed = match run("r", None, true) {
        Ok(m) => m,
        Err(e) => return Verdict::Fail(format!("resume failed: {e}")),
    };
    if resumed.runs != a.runs {
        return Verdict::Fail("resumed manifest differs from the uninterrupted run".into());
    }
    if let Err(e) = same_files(&dir.path().join("a"), &dir.path().join("r"), &files) {
        return Verdict::Fail(format!("resume: {e}"));
    }
    for r in &a.runs {
        let x = Checkpoint::load(&dir.path().join("a").join(&r.dir).join(runner::FINAL_CHECKPOINT)).unwrap();
        let y = Checkpoint::load(&dir.path().join("r").join(&r.dir).join(runner::FINAL_CHECKPOINT)).unwrap();
        if x.tensors != y.tensors || x.header.step != y.header.step {
            return Verdict::Fail(format!("{}: final tensors differ after resume", r.dir));
        }
    }
    let steps: usize = a.runs.iter().map(|r| r.steps).sum();
    Verdict::Pass(format!(
        "2 seeds, {steps} steps: step logs, manifests and final tensors identical across reruns and resume"
    ))
}

// ---------------------------------------------------------------- 9

pub const WEIGHTS_ENV: &str = "VLPROMPT_PRETRAINED_WEIGHTS";
pub const EUROSAT_ENV: &str = "VLPROMPT_EUROSAT";

fn c9_pretrained() -> Verdict {
    let (Ok(weights), Ok(eurosat)) = (std::env::var(WEIGHTS_ENV), std::env::var(EUROSAT_ENV)) else {
        return Verdict::Skip(format!("set {WEIGHTS_ENV} and {EUROSAT_ENV} to run"));
    };
    if !Path::new(&weights).exists() {
        return Verdict::Skip(format!("{weights} not found"));
    }
    let base = cfg(&[
        "backbone.kind=adapter",
        &format!("backbone.adapter.weights={weights}"),
        &format!("data.source={eurosat}"),
        "train.epochs=10",
    ]);
    let dir = tmp();
    let trained = match runner::train(
        &base,
        &TrainOptions {
            out: dir.path().join("trained"),
            ..Default::default()
        },
    ) {
        Ok(m) => m,
        Err(e) => return Verdict::Fail(format!("pretrained run could not start: {e}")),
    };
    // zero-shot baseline: the same harness with no optimizer updates
    let zero = match runner::train(
        &RunConfig {
            train: vlprompt_core::trainer::TrainConfig {
                max_steps: Some(0),
                ..base.train.clone()
            },
            ..base.clone()
        },
        &TrainOptions {
            out: dir.path().join("zero-shot"),
            ..Default::default()
        },
    ) {
        Ok(m) => m,
        Err(e) => return Verdict::Fail(format!("baseline failed: {e}")),
    };
    let base_of = |m: &runner::RunManifest| m.summary.as_ref().and_then(|s| s.b2n.as_ref()).map(|b| b.base_mean);
    match (base_of(&trained), base_of(&zero)) {
        (Some(t), Some(z)) if t > z => Verdict::Pass(format!("base accuracy {t:.2} vs zero-shot {z:.2}")),
        (t, z) => Verdict::Fail(format!("base accuracy {t:?} vs zero-shot {z:?}")),
    }
}
