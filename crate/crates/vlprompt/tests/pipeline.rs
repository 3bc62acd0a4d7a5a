mod common;

use std::path::Path;

use proptest::prelude::*;

use vlprompt::checkpoint::Checkpoint;
use vlprompt::config::{self, RunConfig};
use vlprompt::dataio::{self, Split};
use vlprompt::report::{self, ExportOptions, ExportSplit};
use vlprompt::runner::{self, Experiment, TrainOptions};
use vlprompt::Error;
use vlprompt_core::model::PromptModel;
use vlprompt_core::params::Parameterized;
use vlprompt_core::trainer::TrainState;

use common::{cfg, closed_set};

fn fresh_state(c: &RunConfig) -> (Experiment, TrainState) {
    let exp = Experiment::prepare(c).unwrap();
    let seed = exp.run_seed(0);
    let model = PromptModel::new(exp.backbones.encoders(), &c.model(), seed).unwrap();
    (exp, TrainState::new(model, seed))
}

fn model_tensors(s: &TrainState) -> Vec<Vec<f64>> {
    let m = &s.model;
    m.rho
        .params()
        .into_iter()
        .chain(m.pv.params())
        .map(|t| t.data().to_vec())
        .collect()
}

#[test]
fn yaml_file_and_overrides_agree() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.yaml");
    std::fs::write(&p, "rho:\n  context_length: 8\nloss:\n  temperature: 0.1\n").unwrap();
    let from_file = config::load(Some(&p), &[]).unwrap();
    let from_set = cfg(&["rho.context_length=8", "loss.temperature=0.1"]);
    assert_eq!(from_file, from_set);
    assert_eq!(from_file.hash(), from_set.hash());

    let back = RunConfig::from_value(from_file.to_value()).unwrap();
    assert_eq!(back, from_file);
    let yaml = serde_yaml::to_string(&from_file).unwrap();
    assert_eq!(serde_yaml::from_str::<RunConfig>(&yaml).unwrap(), from_file);
}

#[test]
fn bad_values_are_rejected() {
    for bad in ["loss.temperature=0", "train.batch_size=0", "rho.context_length=-1", "train.seeds=[]"] {
        let o = vec![bad.to_string()];
        let e = config::resolve_value(None, &o).unwrap_err();
        assert_eq!(e.exit_code(), 2, "{bad}: {e}");
    }
}

#[test]
fn checkpoint_round_trip_restores_every_tensor() {
    let c = cfg(&["rho.init=random"]);
    let (exp, state) = fresh_state(&c);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.ckpt");
    Checkpoint::capture(&c, 0, &state).save(&p).unwrap();

    let ck = Checkpoint::load(&p).unwrap();
    assert_eq!(ck.header.config, c);
    assert_eq!(ck.header.config_hash, c.hash());
    let restored = ck.restore(exp.backbones.encoders()).unwrap();
    assert_eq!(model_tensors(&restored), model_tensors(&state));
    assert_eq!(restored.seed, state.seed);
    assert_eq!(restored.step, state.step);
}

#[test]
fn corrupted_checkpoint_is_refused() {
    let c = cfg(&[]);
    let (_, state) = fresh_state(&c);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.ckpt");
    Checkpoint::capture(&c, 0, &state).save(&p).unwrap();
    let mut bytes = std::fs::read(&p).unwrap();
    let last = bytes.len() - 3;
    bytes[last] ^= 0x40;
    std::fs::write(&p, &bytes).unwrap();
    assert!(matches!(Checkpoint::load(&p), Err(Error::Checkpoint { .. })));

    std::fs::write(&p, b"not a checkpoint").unwrap();
    assert!(Checkpoint::load(&p).is_err());
}

#[test]
fn manifest_errors_name_the_field() {
    let origin = Path::new("m.json");
    let cases = [
        (r#"{"version":1,"name":"d","classes":[],"samples":[]}"#, "classes"),
        (r#"{"version":1,"name":"d","classes":["a","A"],"samples":[]}"#, "duplicate"),
        (r#"{"version":1,"name":"d","classes":["a"],"samples":[{"path":"x.png","class":3}]}"#, "samples[0].class"),
        (r#"{"version":9,"name":"d","classes":["a"],"samples":[]}"#, "version"),
    ];
    for (text, needle) in cases {
        let e = dataio::parse_manifest(text, origin).unwrap_err();
        assert!(e.to_string().contains(needle), "{needle}: {e}");
    }
}

#[test]
fn unrecorded_splits_hold_every_fifth_sample_out() {
    let samples: Vec<String> = (0..12)
        .map(|i| format!(r#"{{"path":"{i}.png","class":{}}}"#, i % 2))
        .collect();
    let text = format!(r#"{{"version":1,"name":"d","classes":["a","b"],"samples":[{}]}}"#, samples.join(","));
    let m = dataio::parse_manifest(&text, Path::new("m.json")).unwrap();
    let splits = m.splits();
    for (i, s) in splits.iter().enumerate() {
        assert_eq!(*s, m.split_of(i));
    }
    let test: Vec<usize> = (0..12).filter(|&i| splits[i] == Split::Test).collect();
    assert_eq!(test, [8, 9]);
}

#[test]
fn exported_embeddings_read_back_and_separate_classes() {
    let c = closed_set(&["train.epochs=3", "train.seeds=[1]"]);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    runner::train(
        &c,
        &TrainOptions {
            out: out.clone(),
            force: false,
            resume: false,
            halt_after_epochs: None,
        },
    )
    .unwrap();
    let csv = dir.path().join("e.csv");
    let n = report::export_embeddings(&ExportOptions {
        checkpoint: out.join("seed-1").join(runner::FINAL_CHECKPOINT),
        config: None,
        accept_config_mismatch: false,
        dataset: None,
        split: ExportSplit::Test,
        out: csv.clone(),
        force: false,
    })
    .unwrap();
    let rows = report::read_embeddings(&csv).unwrap();
    assert_eq!(rows.len(), n);
    let d = rows[0].2.len();
    assert!(rows.iter().all(|r| r.2.len() == d && r.2.iter().all(|v| v.is_finite())));

    let mut mean = vec![vec![0.0; d]; 2];
    let mut count = [0usize; 2];
    for (_, class, v) in &rows {
        count[*class] += 1;
        for (m, x) in mean[*class].iter_mut().zip(v) {
            *m += x;
        }
    }
    assert!(count.iter().all(|&k| k > 0));
    let gap: f64 = (0..d)
        .map(|j| (mean[0][j] / count[0] as f64 - mean[1][j] / count[1] as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(gap > 1e-3, "class means coincide: {gap}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn float_overrides_survive_serialization(t in 1e-4f64..10.0, lr in 1e-6f64..1.0) {
        let o = vec![format!("loss.temperature={t:?}"), format!("train.optim.lr={lr:?}")];
        let c = config::resolve_value(None, &o).unwrap();
        prop_assert_eq!(c.loss.temperature, t);
        let back = RunConfig::from_value(c.to_value()).unwrap();
        prop_assert_eq!(&back, &c);
        let json = serde_json::to_string(&c).unwrap();
        prop_assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoint_tensors_are_bit_exact(vals in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 16)) {
        let c = cfg(&[]);
        let (exp, mut state) = fresh_state(&c);
        for (i, t) in state.model.rho.params_mut().into_iter().enumerate() {
            for (j, v) in t.data_mut().iter_mut().enumerate() {
                *v = vals[(i + j) % vals.len()];
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.ckpt");
        Checkpoint::capture(&c, 0, &state).save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap().restore(exp.backbones.encoders()).unwrap();
        let bits = |s: &TrainState| -> Vec<u64> { model_tensors(s).concat().iter().map(|v| v.to_bits()).collect() };
        prop_assert_eq!(bits(&back), bits(&state));
    }
}
