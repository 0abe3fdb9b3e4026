//! Corpus records: manually parsed chunks, few-shot Q&A pairs and labeled
//! evaluation cases.
//!
//! A chunk file is UTF-8 text whose first line is exactly `---`, followed by
//! `key: value` lines, a closing `---` line, and the body:
//!
//! ```text
//! ---
//! id: reg-3
//! doc: rules
//! title: Attendance
//! section: 2.1
//! tags: attendance, meetings
//! ---
//! One meeting may be skipped without notice.
//! ```
//!
//! `id` and `doc` are required; `title`, `section` and `tags` default to empty.
//! The Q&A and evaluation datasets are JSON Lines.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

const DELIMITER: &str = "---";

/// One manually delimited document fragment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: String,
    pub doc_id: String,
    pub title: String,
    pub section_path: String,
    pub text: String,
    pub tags: Vec<String>,
}

/// A historical question with the coordinator's answer, used as a few-shot example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub id: String,
    pub question: String,
    pub answer: String,
}

/// One labeled evaluation row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCase {
    pub question: String,
    pub ground_truth: String,
    pub relevant_chunk_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChunkParseError {
    #[error("line {line}: missing `---` delimiter")]
    MissingDelimiter { line: usize },
    #[error("line {line}: missing required key `{key}`")]
    MissingKey { key: &'static str, line: usize },
    #[error("line {line}: body is empty")]
    EmptyBody { line: usize },
    #[error("line {line}: expected `key: value`")]
    MalformedMetadata { line: usize },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { key: String, line: usize },
    #[error("line {line}: invalid chunk id `{id}` (allowed: A-Z a-z 0-9 _ . -)")]
    InvalidId { id: String, line: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DatasetError {
    #[error("line {line_no}: {reason}")]
    MalformedLine { line_no: usize, reason: String },
    #[error("line {line_no}: duplicate id `{id}`")]
    DuplicateId { id: String, line_no: usize },
    #[error("line {line_no}: relevant_chunk_ids is empty")]
    EmptyRelevantList { line_no: usize },
}

/// Chunks and Q&A pairs keyed by id, used to resolve index payloads.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    chunks: BTreeMap<String, Chunk>,
    qa: BTreeMap<String, QaPair>,
}

impl Corpus {
    /// Later duplicates overwrite earlier ones; callers validate uniqueness
    /// when loading.
    pub fn new(chunks: Vec<Chunk>, qa: Vec<QaPair>) -> Self {
        Self {
            chunks: chunks.into_iter().map(|c| (c.id.clone(), c)).collect(),
            qa: qa.into_iter().map(|p| (p.id.clone(), p)).collect(),
        }
    }

    pub fn chunk(&self, id: &str) -> Option<&Chunk> {
        self.chunks.get(id)
    }

    pub fn qa(&self, id: &str) -> Option<&QaPair> {
        self.qa.get(id)
    }

    /// Chunks sorted by id.
    pub fn chunks(&self) -> impl Iterator<Item = &Chunk> {
        self.chunks.values()
    }

    /// Q&A pairs sorted by id.
    pub fn qa_pairs(&self) -> impl Iterator<Item = &QaPair> {
        self.qa.values()
    }
}

/// Returns true when `id` matches `[A-Za-z0-9_.-]+`.
pub fn is_valid_chunk_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'))
}

fn strip_cr(line: &str) -> &str {
    line.strip_suffix('\r').unwrap_or(line)
}

/// Parses the contents of one chunk file.
pub fn parse_chunk(source: &str) -> Result<Chunk, ChunkParseError> {
    let mut lines = source.split('\n').map(strip_cr).enumerate();

    match lines.next() {
        Some((_, DELIMITER)) => {}
        _ => return Err(ChunkParseError::MissingDelimiter { line: 1 }),
    }
    if !source.split('\n').skip(1).any(|l| strip_cr(l) == DELIMITER) {
        let line = source.split('\n').count();
        return Err(ChunkParseError::MissingDelimiter { line });
    }

    let mut id: Option<(String, usize)> = None;
    let mut doc: Option<String> = None;
    let mut title: Option<String> = None;
    let mut section: Option<String> = None;
    let mut tags: Option<Vec<String>> = None;
    let mut closing_line = None;
    let mut last_line = 1;

    for (idx, line) in lines.by_ref() {
        let line_no = idx + 1;
        last_line = line_no;
        if line == DELIMITER {
            closing_line = Some(line_no);
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or(ChunkParseError::MalformedMetadata { line: line_no })?;
        let key = key.trim();
        let value = value.trim();
        let duplicate = || ChunkParseError::DuplicateKey {
            key: key.to_owned(),
            line: line_no,
        };
        match key {
            "id" => {
                if id.is_some() {
                    return Err(duplicate());
                }
                id = Some((value.to_owned(), line_no));
            }
            "doc" => {
                if doc.replace(value.to_owned()).is_some() {
                    return Err(duplicate());
                }
            }
            "title" => {
                if title.replace(value.to_owned()).is_some() {
                    return Err(duplicate());
                }
            }
            "section" => {
                if section.replace(value.to_owned()).is_some() {
                    return Err(duplicate());
                }
            }
            "tags" => {
                let parsed = value
                    .split(',')
                    .map(str::trim)
                    .filter(|t| !t.is_empty())
                    .map(String::from)
                    .collect();
                if tags.replace(parsed).is_some() {
                    return Err(duplicate());
                }
            }
            _ => {}
        }
    }

    let closing_line = closing_line.ok_or(ChunkParseError::MissingDelimiter { line: last_line })?;

    let (id, id_line) = id.ok_or(ChunkParseError::MissingKey {
        key: "id",
        line: closing_line,
    })?;
    if !is_valid_chunk_id(&id) {
        return Err(ChunkParseError::InvalidId { id, line: id_line });
    }
    let doc_id = doc.ok_or(ChunkParseError::MissingKey {
        key: "doc",
        line: closing_line,
    })?;

    let body: Vec<&str> = lines.map(|(_, l)| l).collect();
    let text = body.join("\n").trim().to_owned();
    if text.is_empty() {
        return Err(ChunkParseError::EmptyBody {
            line: closing_line + 1,
        });
    }

    Ok(Chunk {
        id,
        doc_id,
        title: title.unwrap_or_default(),
        section_path: section.unwrap_or_default(),
        text,
        tags: tags.unwrap_or_default(),
    })
}

/// Renders a chunk back into the front-matter file format accepted by [`parse_chunk`].
pub fn render_chunk(chunk: &Chunk) -> String {
    let mut out = String::new();
    out.push_str("---\n");
    for (key, value) in [
        ("id", chunk.id.as_str()),
        ("doc", chunk.doc_id.as_str()),
        ("title", chunk.title.as_str()),
        ("section", chunk.section_path.as_str()),
    ] {
        out.push_str(key);
        out.push_str(": ");
        out.push_str(value);
        out.push('\n');
    }
    if !chunk.tags.is_empty() {
        out.push_str("tags: ");
        out.push_str(&chunk.tags.join(", "));
        out.push('\n');
    }
    out.push_str("---\n");
    out.push_str(&chunk.text);
    out.push('\n');
    out
}

#[derive(Deserialize)]
struct QaLine {
    id: String,
    question: String,
    answer: String,
}

#[derive(Deserialize)]
struct EvalLine {
    question: String,
    ground_truth: String,
    relevant_chunk_ids: Vec<String>,
}

fn jsonl_records(source: &str) -> impl Iterator<Item = (usize, &str)> {
    source
        .split('\n')
        .map(strip_cr)
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn malformed(line_no: usize, reason: impl Into<String>) -> DatasetError {
    DatasetError::MalformedLine {
        line_no,
        reason: reason.into(),
    }
}

fn non_empty(line_no: usize, field: &str, value: &str) -> Result<(), DatasetError> {
    if value.trim().is_empty() {
        Err(malformed(line_no, alloc::format!("`{field}` is empty")))
    } else {
        Ok(())
    }
}

/// Parses the few-shot Q&A dataset. Pairs come back in file order.
pub fn parse_qa_jsonl(source: &str) -> Result<Vec<QaPair>, DatasetError> {
    let mut seen = alloc::collections::BTreeSet::new();
    let mut pairs = Vec::new();
    for (line_no, line) in jsonl_records(source) {
        let rec: QaLine =
            serde_json::from_str(line).map_err(|e| malformed(line_no, alloc::format!("{e}")))?;
        non_empty(line_no, "question", &rec.question)?;
        non_empty(line_no, "answer", &rec.answer)?;
        if !seen.insert(rec.id.clone()) {
            return Err(DatasetError::DuplicateId {
                id: rec.id,
                line_no,
            });
        }
        pairs.push(QaPair {
            id: rec.id,
            question: rec.question,
            answer: rec.answer,
        });
    }
    Ok(pairs)
}

/// Parses the labeled evaluation dataset. Cases come back in file order.
pub fn parse_eval_jsonl(source: &str) -> Result<Vec<EvalCase>, DatasetError> {
    let mut cases = Vec::new();
    for (line_no, line) in jsonl_records(source) {
        let rec: EvalLine =
            serde_json::from_str(line).map_err(|e| malformed(line_no, alloc::format!("{e}")))?;
        non_empty(line_no, "question", &rec.question)?;
        non_empty(line_no, "ground_truth", &rec.ground_truth)?;
        if rec.relevant_chunk_ids.is_empty() {
            return Err(DatasetError::EmptyRelevantList { line_no });
        }
        cases.push(EvalCase {
            question: rec.question,
            ground_truth: rec.ground_truth,
            relevant_chunk_ids: rec.relevant_chunk_ids,
        });
    }
    Ok(cases)
}
