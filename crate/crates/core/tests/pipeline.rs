use std::fs;
use std::path::Path;

use irbindiff_core::config::{Ablation, PipelineConfig};
use irbindiff_core::pipeline::*;
use irbindiff_core::synth::synth_corpus;
use irbindiff_core::Error;

fn tiny_config(root: &Path) -> PipelineConfig {
    let text = r#"
seed = 11
test_fraction = 0.0
corpus_dir = "corpus"
manifest = "manifest.json"
work_dir = "work"

[sampling]
max_len = 32
max_pairs = 96

[lm]
layers = 1
hidden = 16
heads = 2
max_position = 32
epochs = 1
batch_size = 16
block_max_len = 32

[ggnn]
steps = 2
node_dim = 16
out_dim = 16
epochs = 2
batch_size = 8
queue_capacity = 16

[eval]
tasks = ["XA", "XO"]
pool_size = 11
n_pos = 40
n_neg = 40
"#;
    let path = root.join("config.toml");
    fs::write(&path, text).unwrap();
    let config = PipelineConfig::load(&path).unwrap();
    synth_corpus(&config.corpus_dir, 8, 4, 3).unwrap();
    config
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn prepare_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny_config(dir.path())).unwrap();
    let stats = p.prepare().unwrap();
    assert_eq!(stats.functions_kept, 32);
    assert_eq!(stats.files_failed, 0);
    let out = p.stage_dir(Stage::Prepare);
    let files = [FUNCTIONS_FILE, TOKENS_FILE, VOCAB_FILE, SPLIT_FILE, STATS_FILE, CONFIG_FILE];
    let first: Vec<Vec<u8>> = files.iter().map(|f| read(out.join(f))).collect();
    p.prepare().unwrap();
    for (f, bytes) in files.iter().zip(&first) {
        assert_eq!(&read(out.join(f)), bytes, "{f} changed on rerun");
    }
}

#[test]
fn resolved_config_is_written_next_to_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let p = Pipeline::new(config.clone()).unwrap();
    p.prepare().unwrap();
    let text = fs::read_to_string(p.stage_dir(Stage::Prepare).join(CONFIG_FILE)).unwrap();
    assert_eq!(PipelineConfig::from_toml(&text).unwrap(), config);
}

#[test]
fn full_run_is_reproducible_and_downstream_deletion_is_harmless() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let p = Pipeline::new(config.clone()).unwrap();
    let report = p.run_all().unwrap();
    assert!(report.tasks.iter().any(|t| t.task.name() == "XA"), "{report:?}");
    let prepared = read(p.stage_dir(Stage::Prepare).join(FUNCTIONS_FILE));
    let embeddings = read(p.stage_dir(Stage::Embed).join(EMBEDDINGS_FILE));
    let metrics = read(p.stage_dir(Stage::Eval).join(REPORT_FILE));

    fs::remove_dir_all(p.stage_dir(Stage::Embed)).unwrap();
    fs::remove_dir_all(p.stage_dir(Stage::Eval)).unwrap();
    p.prepare().unwrap();
    assert_eq!(read(p.stage_dir(Stage::Prepare).join(FUNCTIONS_FILE)), prepared);

    let mut again = config;
    again.work_dir = dir.path().join("work2");
    let q = Pipeline::new(again).unwrap();
    q.run_all().unwrap();
    assert_eq!(read(q.stage_dir(Stage::Embed).join(EMBEDDINGS_FILE)), embeddings);
    assert_eq!(read(q.stage_dir(Stage::Eval).join(REPORT_FILE)), metrics);
}

#[test]
fn eval_without_embeddings_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny_config(dir.path())).unwrap();
    p.prepare().unwrap();
    match p.eval() {
        Err(Error::MissingArtifact(path)) => assert!(path.ends_with(EMBEDDINGS_FILE), "{path:?}"),
        other => panic!("expected a missing artifact, got {other:?}"),
    }
    match p.train() {
        Err(e @ Error::MissingArtifact(_)) => assert!(e.is_input_error()),
        other => panic!("expected a missing artifact, got {other:?}"),
    }
}

#[test]
fn ablations_get_their_own_stage_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path());
    let base = Pipeline::new(config.clone()).unwrap();
    base.prepare().unwrap();
    let base_vocab = read(base.stage_dir(Stage::Prepare).join(VOCAB_FILE));

    config.ablations.enable(Ablation::NoNorm);
    config.ablations.enable(Ablation::NoPlm);
    let p = Pipeline::new(config).unwrap();
    let report = p.run_all().unwrap();
    assert_eq!(report.ablations, vec![Ablation::NoNorm, Ablation::NoPlm]);
    assert!(p.pretrain().unwrap().is_none());
    let work = dir.path().join("work");
    assert!(work.join("prepare+no_norm").join(FUNCTIONS_FILE).exists());
    assert!(work.join("embed-blocks+no_norm+no_plm").join(BLOCK_EMBEDDINGS_FILE).exists());
    assert!(work.join("eval+no_norm+no_plm").join(REPORT_FILE).exists());
    assert_eq!(read(base.stage_dir(Stage::Prepare).join(VOCAB_FILE)), base_vocab);
    let raw: serde_json::Value = serde_json::from_slice(&read(p.stage_dir(Stage::Prepare).join(VOCAB_FILE))).unwrap();
    let norm: serde_json::Value = serde_json::from_slice(&base_vocab).unwrap();
    assert!(vocab_len(&raw) > vocab_len(&norm), "unnormalized vocabulary should be larger");
}

fn vocab_len(v: &serde_json::Value) -> usize {
    match v {
        serde_json::Value::Object(m) => m.len(),
        serde_json::Value::Array(a) => a.len(),
        other => panic!("unexpected vocabulary layout {other}"),
    }
}

#[test]
fn unparseable_corpus_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    fs::create_dir_all(&corpus).unwrap();
    fs::write(corpus.join("bad.ll"), "define void f() {\nret void\n}\n").unwrap();
    let config = PipelineConfig {
        corpus_dir: corpus,
        work_dir: dir.path().join("work"),
        ..PipelineConfig::default()
    };
    let err = Pipeline::new(config).unwrap().prepare().unwrap_err();
    assert!(err.is_input_error(), "{err}");
}
