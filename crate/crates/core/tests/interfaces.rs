//! File formats and cross-module round trips.

use std::fs;
use std::sync::Arc;

use sspc::corpus::{self, ChangeLabels, Dataset, LabeledProblem, Problem};
use sspc::eval::{self, SspcPredictor};
use sspc::featurize::{
    self, EmbeddingStore, FeatureBackend, FeatureConfig, Featurizer,
};
use sspc::model::{self, ModelConfig};
use sspc::synthetic::{self, SyntheticConfig};
use sspc::train::{self, TrainConfig, Trainer};

/// SSPC-EMB bytes assembled field by field.
fn emb_bytes(dim: u32, problems: &[(&str, u32)], values: &[f32]) -> Vec<u8> {
    let mut b = b"SSPCEMB1".to_vec();
    b.extend(1u32.to_le_bytes());
    b.extend(dim.to_le_bytes());
    b.extend((problems.len() as u64).to_le_bytes());
    for (id, n) in problems {
        b.extend((id.len() as u16).to_le_bytes());
        b.extend(id.as_bytes());
        b.extend(n.to_le_bytes());
    }
    for v in values {
        b.extend(v.to_le_bytes());
    }
    b
}

#[test]
fn embedding_file_layout_is_bit_exact() {
    let values: Vec<f32> = (0..10).map(|k| k as f32 * 0.5 - 1.0).collect();
    let bytes = emb_bytes(2, &[("problem-3", 2), ("problem-1", 3)], &values);
    let store = EmbeddingStore::from_bytes(&bytes).unwrap();
    assert_eq!(store.dim(), 2);
    assert_eq!(store.problem_ids(), ["problem-3", "problem-1"]);
    assert_eq!(store.entry("problem-1"), Some((2, 3)));
    assert_eq!(store.rows("problem-1").unwrap(), &values[4..]);
    assert_eq!(store.to_bytes().unwrap(), bytes);

    let built = EmbeddingStore::from_blocks(
        2,
        vec![("problem-3".into(), values[..4].to_vec()), ("problem-1".into(), values[4..].to_vec())],
    )
    .unwrap();
    assert_eq!(built.to_bytes().unwrap(), bytes);
}

#[test]
fn embedding_file_rejects_damage() {
    let good = emb_bytes(2, &[("problem-1", 1)], &[1.0, 2.0]);
    let expect = |bytes: &[u8], needle: &str| {
        let err = EmbeddingStore::from_bytes(bytes).unwrap_err();
        assert!(err.to_string().contains(needle), "{err}");
        assert!(err.is_data_error());
    };
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    expect(&bad_magic, "bad magic");
    let mut bad_version = good.clone();
    bad_version[8] = 2;
    expect(&bad_version, "version mismatch");
    expect(&good[..good.len() - 1], "truncated data");
    expect(&good[..14], "truncated header");
    let mut trailing = good.clone();
    trailing.push(0);
    expect(&trailing, "trailing bytes");
    expect(&emb_bytes(1, &[("problem-1", 1), ("problem-1", 1)], &[0.0, 0.0]), "duplicate problem id");
}

fn tiny_dataset() -> Dataset {
    let p = |id: &str, s: &[&str], c: Vec<u8>| {
        LabeledProblem::new(
            Problem::new(id, s.iter().map(|x| x.to_string()).collect()).unwrap(),
            Some(ChangeLabels::new(c).unwrap()),
        )
        .unwrap()
    };
    Dataset::new(
        "tiny",
        vec![
            p("problem-1", &["a b", "c d", "a b"], vec![1, 1]),
            p("problem-2", &["x", "y y"], vec![0]),
        ],
    )
    .unwrap()
}

#[test]
fn embeddings_drive_prediction_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset();
    // identical sentences get identical rows, as an exporter would produce
    let row = |s: &str| -> Vec<f32> { (0..4).map(|k| (s.len() * (k + 1)) as f32 / 7.0).collect() };
    let blocks = ds
        .problems()
        .map(|p| (p.id.clone(), p.sentences.iter().flat_map(|s| row(s)).collect()))
        .collect();
    let store = EmbeddingStore::from_blocks(4, blocks).unwrap();
    let path = dir.path().join("emb.bin");
    featurize::write_embedding_file(&path, &store).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(featurize::manifest_path(&path)).unwrap()).unwrap();
    assert_eq!(manifest["dim"], 4);
    assert_eq!(manifest["problems"][1]["row_offset"], 3);

    let loaded = featurize::load_embedding_file(&path).unwrap();
    assert_eq!(loaded, store);
    let config = FeatureConfig {
        backend: FeatureBackend::ExternalEmbeddings,
        dim: 4,
        normalize: false,
        ..FeatureConfig::default()
    };
    let featurizer = Featurizer::new(config, Some(Arc::new(loaded))).unwrap();
    let x = featurizer.featurize(&ds.items[0].problem).unwrap();
    assert_eq!(x.rows.row(0), x.rows.row(2));
    assert_eq!(x.rows.row(0)[1], f64::from(row("a b")[1]));

    let params = model::init_model(&ModelConfig {
        input_dim: 4,
        hidden_dim: 3,
        bilstm_layers: 1,
        mlp_hidden_dims: [4, 2],
        ..ModelConfig::default()
    })
    .unwrap();
    let report = eval::evaluate_dataset(&SspcPredictor { params: &params, featurizer: &featurizer }, &ds).unwrap();
    assert_eq!(report.n_problems, 2);

    // a problem missing from the store, and a sentence-count mismatch
    let other = Problem::new("problem-9", vec!["z".into()]).unwrap();
    assert!(featurizer.featurize(&other).unwrap_err().to_string().contains("not in the embedding store"));
    let short = Problem::new("problem-2", vec!["x".into()]).unwrap();
    assert!(featurizer.featurize(&short).unwrap_err().is_data_error());
}

/// CRC-64/ECMA-182, bit by bit.
fn crc64_ecma(bytes: &[u8]) -> u64 {
    let mut crc = 0u64;
    for &b in bytes {
        crc ^= (b as u64) << 56;
        for _ in 0..8 {
            crc = if crc & (1 << 63) != 0 { (crc << 1) ^ 0x42F0_E1EB_A9EA_3693 } else { crc << 1 };
        }
    }
    crc
}

fn synth(n: usize, seed: u64) -> Dataset {
    synthetic::generate(&SyntheticConfig { n_problems: n, seed, ..SyntheticConfig::default() }).unwrap()
}

fn setup() -> (ModelConfig, TrainConfig, Featurizer) {
    let featurizer = Featurizer::new(FeatureConfig { dim: 32, ..FeatureConfig::default() }, None).unwrap();
    let model_cfg = ModelConfig {
        input_dim: 32,
        hidden_dim: 6,
        bilstm_layers: 2,
        mlp_hidden_dims: [8, 4],
        seed: 2,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        total_steps: 40,
        warmup_steps: 5,
        peak_lr: 3e-3,
        val_every: 10,
        log_every: 3,
        seed: 2,
        ..TrainConfig::default()
    };
    (model_cfg, train_cfg, featurizer)
}

#[test]
fn checkpoint_layout_and_integrity() {
    assert_eq!(crc64_ecma(b"123456789"), 0x6C40_DF5F_0B49_7347);
    let (model_cfg, train_cfg, featurizer) = setup();
    let trainer = Trainer::new(&model_cfg, &train_cfg, &synth(8, 1), None, &featurizer).unwrap();
    let bytes = train::checkpoint_to_bytes(&trainer.checkpoint());
    assert_eq!(&bytes[..8], b"SSPCCKPT");
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    assert_eq!(u64::from_le_bytes(tail.try_into().unwrap()), crc64_ecma(body));
    let meta_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let meta: serde_json::Value = serde_json::from_slice(&bytes[16..16 + meta_len]).unwrap();
    assert_eq!(meta["step"], 0);
    let count = u32::from_le_bytes(bytes[16 + meta_len..20 + meta_len].try_into().unwrap());
    assert_eq!(count as usize, 3 * trainer.params().named_tensors().len());

    let back = train::checkpoint_from_bytes(&bytes).unwrap();
    assert_eq!(back.params, *trainer.params());
    for k in [20, bytes.len() / 2, bytes.len() - 9] {
        let mut bad = bytes.clone();
        bad[k] ^= 0x10;
        let err = train::checkpoint_from_bytes(&bad).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }
    assert!(train::checkpoint_from_bytes(&bytes[..bytes.len() - 3]).is_err());

    let mut other = model_cfg.clone();
    other.hidden_dim = 7;
    assert!(matches!(back.ensure_compatible(&other), Err(sspc::Error::Shape(_))));
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let (model_cfg, train_cfg, featurizer) = setup();
    let train_set = synth(16, 3);
    let val = synth(6, 4);
    let dir = tempfile::tempdir().unwrap();

    let mut full = Trainer::new(&model_cfg, &train_cfg, &train_set, Some(&val), &featurizer).unwrap();
    full.run().unwrap();

    let mut first = Trainer::new(&model_cfg, &train_cfg, &train_set, Some(&val), &featurizer).unwrap();
    for _ in 0..17 {
        first.train_step().unwrap();
    }
    let path = dir.path().join("mid.ckpt");
    train::save_checkpoint(&first.checkpoint(), &path).unwrap();
    let ckpt = train::load_checkpoint(&path).unwrap();
    assert_eq!(ckpt.step, 17);
    let mut resumed = Trainer::from_checkpoint(ckpt, &train_set, Some(&val), &featurizer).unwrap();
    resumed.run().unwrap();

    assert_eq!(resumed.params().checksum(), full.params().checksum());
    assert_eq!(resumed.best(), full.best());
    let mut stitched = first.history().records.clone();
    stitched.extend(resumed.history().records.iter().cloned());
    assert_eq!(stitched, full.history().records);

    // a different feature setup is refused
    let other = Featurizer::new(FeatureConfig { dim: 32, hash_seed: 1, ..FeatureConfig::default() }, None).unwrap();
    let ckpt = train::load_checkpoint(&path).unwrap();
    assert!(Trainer::from_checkpoint(ckpt, &train_set, Some(&val), &other).is_err());
}

#[test]
fn history_records_follow_cadence() {
    let (model_cfg, train_cfg, featurizer) = setup();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { checkpoint_dir: Some(dir.path().to_path_buf()), ..train_cfg };
    let mut t = Trainer::new(&model_cfg, &cfg, &synth(10, 5), Some(&synth(4, 6)), &featurizer).unwrap();
    t.run().unwrap();
    let text = fs::read_to_string(dir.path().join("history.jsonl")).unwrap();
    let history = train::TrainHistory::from_jsonl(&text).unwrap();
    let steps: Vec<u64> = history.records.iter().map(|r| r.step).collect();
    let val_steps: Vec<u64> = history.records.iter().filter(|r| r.val_macro_f1.is_some()).map(|r| r.step).collect();
    assert_eq!(val_steps, vec![9, 19, 29, 39]);
    for s in 0..40 {
        assert_eq!(steps.contains(&s), s % 3 == 0 || val_steps.contains(&s), "step {s}");
    }
    assert_eq!(history.records[0].lr, 0.0);
    assert!(dir.path().join("best.ckpt").is_file() && dir.path().join("final.ckpt").is_file());
    let best = train::load_checkpoint(&dir.path().join("best.ckpt")).unwrap();
    assert_eq!(best.best, t.best());
}

#[test]
fn solution_files_round_trip_matches_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let (model_cfg, _, featurizer) = setup();
    let params = model::init_model(&model_cfg).unwrap();
    let ds = synth(12, 8);
    corpus::write_dataset(&ds, &dir.path().join("data")).unwrap();
    let reloaded = corpus::load_dataset(&dir.path().join("data"), "synthetic").unwrap();
    assert_eq!(reloaded, ds);

    let predictor = SspcPredictor { params: &params, featurizer: &featurizer };
    let in_process = eval::evaluate_dataset(&predictor, &ds).unwrap();
    let preds = eval::predict_dataset(&predictor, &ds).unwrap();
    let sol = dir.path().join("solutions");
    eval::write_solutions(&preds, &sol).unwrap();
    let text = fs::read_to_string(sol.join("solution-problem-1.json")).unwrap();
    assert!(text.starts_with("{\"changes\":["), "{text}");
    let scored = eval::score_solutions(&in_process.model, &ds, &eval::read_solutions(&sol).unwrap()).unwrap();
    assert_eq!(scored, in_process);

    fs::remove_file(sol.join("solution-problem-2.json")).unwrap();
    fs::write(sol.join("solution-problem-3.json"), "{\"changes\":[0]}").unwrap();
    let err = eval::score_solutions("x", &ds, &eval::read_solutions(&sol).unwrap()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("solution-problem-2.json: missing") && msg.contains("solution-problem-3.json"), "{msg}");
}
