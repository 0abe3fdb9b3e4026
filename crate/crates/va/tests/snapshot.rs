mod common;

use std::sync::Arc;

use va::app::{AppError, Pipeline};
use va::config::Config;
use va::snapshot::{load_snapshot, save_snapshot, SnapshotError};
use va_core::reflection::ReflectionConfig;
use va_core::{Embedder, FrozenClock, SearchMode, SearchRequest, VectorStore};

use common::{scripted_pipeline, yes_yes_rules};

fn fixture_store() -> (VectorStore, Arc<dyn Embedder>) {
    let p = scripted_pipeline(yes_yes_rules(), ReflectionConfig::default(), Arc::new(FrozenClock(0)));
    (p.store, p.providers.embedder)
}

#[test]
fn saved_store_answers_searches_identically() {
    let (store, embedder) = fixture_store();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.json");
    save_snapshot(&store, &path).unwrap();
    assert!(!dir.path().join("store.json.tmp").exists());
    let loaded = load_snapshot(&path).unwrap();
    assert_eq!(loaded.len(), store.len());
    assert_eq!(loaded.dimension(), store.dimension());

    for q in ["late report penalty", "meeting", "who assigns topics", "plagiarism exclusion"] {
        let v = embedder.embed(q).unwrap();
        for mode in [SearchMode::TopK, SearchMode::Mmr { lambda: 0.5 }, SearchMode::Threshold { score_threshold: 0.2 }] {
            let req = SearchRequest::top_k(v.clone(), 5).with_mode(mode);
            assert_eq!(store.search(&req).unwrap(), loaded.search(&req).unwrap(), "{q} {mode:?}");
        }
    }
    save_snapshot(&loaded, &dir.path().join("again.json")).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(dir.path().join("again.json")).unwrap()
    );
}

#[test]
fn missing_and_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert!(matches!(load_snapshot(&missing), Err(SnapshotError::IoFailure { .. })));

    let (store, _) = fixture_store();
    let path = dir.path().join("store.json");
    save_snapshot(&store, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, &text[..text.len() / 2]).unwrap();
    assert!(matches!(load_snapshot(&path), Err(SnapshotError::CorruptSnapshot { .. })));

    let unwritable = dir.path().join("no-such-dir").join("store.json");
    assert!(matches!(
        save_snapshot(&store, &unwritable),
        Err(SnapshotError::IoFailure { .. })
    ));
}

#[test]
fn pipeline_rejects_an_index_of_another_dimension() {
    let (store, _) = fixture_store();
    let dir = tempfile::tempdir().unwrap();
    let index = dir.path().join("store.json");
    save_snapshot(&store, &index).unwrap();
    let mut config = Config {
        index_path: Some(index),
        corpus_dir: Some(common::e2e_dir().join("chunks")),
        qa_path: Some(common::e2e_dir().join("qa.jsonl")),
        ..Config::default()
    };
    config.embedder.dimension = Some(64);
    match Pipeline::load(&config, Arc::new(FrozenClock(0))) {
        Err(AppError::DimensionMismatch { index: 256, embedder: 64 }) => {}
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("dimension mismatch accepted"),
    }
    config.embedder.dimension = Some(256);
    assert!(Pipeline::load(&config, Arc::new(FrozenClock(0))).is_ok());

    config.qa_path = None;
    assert!(matches!(
        Pipeline::load(&config, Arc::new(FrozenClock(0))),
        Err(AppError::Config(_))
    ));
}
