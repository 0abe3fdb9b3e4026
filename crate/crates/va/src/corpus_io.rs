//! Reading chunk directories and JSONL datasets from disk.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use va_core::corpus::{parse_chunk, parse_eval_jsonl, parse_qa_jsonl, ChunkParseError, DatasetError};
use va_core::{Chunk, EvalCase, QaPair};
use walkdir::WalkDir;

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Chunk {
        path: PathBuf,
        source: ChunkParseError,
    },
    #[error("{path}: {source}")]
    Dataset {
        path: PathBuf,
        source: DatasetError,
    },
    #[error("chunk id {id:?} appears in both {first} and {second}")]
    DuplicateChunkId {
        id: String,
        first: PathBuf,
        second: PathBuf,
    },
    #[error("no chunk files (*.md) under {0}")]
    EmptyCorpus(PathBuf),
}

fn read(path: &Path) -> Result<String, LoadError> {
    std::fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn parse_chunk_file(path: &Path) -> Result<Chunk, LoadError> {
    parse_chunk(&read(path)?).map_err(|source| LoadError::Chunk {
        path: path.to_owned(),
        source,
    })
}

/// Every `*.md` file below `dir`, recursively, sorted by chunk id.
pub fn parse_corpus_dir(dir: &Path) -> Result<Vec<Chunk>, LoadError> {
    let mut by_id: BTreeMap<String, (Chunk, PathBuf)> = BTreeMap::new();
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in WalkDir::new(dir).follow_links(true) {
        let entry = entry.map_err(|e| LoadError::Io {
            path: e.path().map_or_else(|| dir.to_owned(), Path::to_owned),
            source: e.into(),
        })?;
        if entry.file_type().is_file() && entry.path().extension().is_some_and(|x| x == "md") {
            files.push(entry.into_path());
        }
    }
    files.sort();
    for path in files {
        let chunk = parse_chunk_file(&path)?;
        if let Some((_, first)) = by_id.get(&chunk.id) {
            return Err(LoadError::DuplicateChunkId {
                id: chunk.id,
                first: first.clone(),
                second: path,
            });
        }
        by_id.insert(chunk.id.clone(), (chunk, path));
    }
    if by_id.is_empty() {
        return Err(LoadError::EmptyCorpus(dir.to_owned()));
    }
    Ok(by_id.into_values().map(|(c, _)| c).collect())
}

pub fn load_qa_dataset(path: &Path) -> Result<Vec<QaPair>, LoadError> {
    parse_qa_jsonl(&read(path)?).map_err(|source| LoadError::Dataset {
        path: path.to_owned(),
        source,
    })
}

pub fn load_eval_dataset(path: &Path) -> Result<Vec<EvalCase>, LoadError> {
    parse_eval_jsonl(&read(path)?).map_err(|source| LoadError::Dataset {
        path: path.to_owned(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chunk_file(id: &str) -> String {
        format!("---\nid: {id}\ndoc: rules\n---\nBody of {id}.\n")
    }

    #[test]
    fn reads_nested_dirs_sorted_by_id() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        std::fs::write(dir.path().join("z.md"), chunk_file("a-1")).unwrap();
        std::fs::write(dir.path().join("sub/a.md"), chunk_file("b-2")).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let chunks = parse_corpus_dir(dir.path()).unwrap();
        let ids: Vec<_> = chunks.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, ["a-1", "b-2"]);
    }

    #[test]
    fn duplicate_ids_name_both_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("one.md"), chunk_file("x")).unwrap();
        std::fs::write(dir.path().join("two.md"), chunk_file("x")).unwrap();
        let err = parse_corpus_dir(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("one.md") && msg.contains("two.md"), "{msg}");
    }

    #[test]
    fn parse_errors_carry_the_path() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("bad.md"), "no front matter").unwrap();
        let err = parse_corpus_dir(dir.path()).unwrap_err();
        assert!(matches!(err, LoadError::Chunk { .. }));
        assert!(err.to_string().contains("bad.md"));
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(parse_corpus_dir(dir.path()), Err(LoadError::EmptyCorpus(_))));
    }
}
