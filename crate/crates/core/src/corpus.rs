//! Corpus ingestion: read raw mathematical text from local files,
//! normalize it without disturbing math symbols, and expose a clean
//! document stream plus summary statistics.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path} is not valid UTF-8")]
    Encoding { path: PathBuf },
    #[error("{path}:{line}: malformed JSONL: {message}")]
    Jsonl {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// One source text with provenance metadata.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub source: String,
    pub text: String,
}

/// Corpus-level counts. Tokens are whitespace tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub document_count: u64,
    pub token_count: u64,
    pub per_source_counts: BTreeMap<String, SourceCounts>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub documents: u64,
    pub tokens: u64,
}

#[derive(Deserialize)]
struct JsonlRecord {
    id: Option<String>,
    source: Option<String>,
    text: String,
}

/// Collapse runs of spaces/tabs, trim each line, and drop control
/// characters other than newline. Every other Unicode scalar — math
/// symbols, LaTeX markup — passes through untouched.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut first_line = true;
    for line in text.split('\n') {
        if !first_line {
            out.push('\n');
        }
        first_line = false;
        let mut pending_space = false;
        let mut line_started = false;
        for ch in line.chars() {
            if ch == ' ' || ch == '\t' {
                pending_space = true;
                continue;
            }
            if ch.is_control() {
                continue;
            }
            if pending_space && line_started {
                out.push(' ');
            }
            pending_space = false;
            line_started = true;
            out.push(ch);
        }
    }
    out
}

/// Rule-based sentence splitter with a decimal guard: splits after
/// `.` `!` `?` followed by whitespace and an uppercase letter or
/// digit, never inside a number like `2.6`.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut sentences = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        let c = chars[i];
        if c == '.' || c == '!' || c == '?' {
            // Decimal guard: digit '.' digit is not sentence-final.
            let in_number = c == '.'
                && i > 0
                && chars[i - 1].is_ascii_digit()
                && i + 1 < chars.len()
                && chars[i + 1].is_ascii_digit();
            if !in_number {
                // Look for whitespace then uppercase/digit.
                let mut j = i + 1;
                let mut saw_space = false;
                while j < chars.len() && chars[j].is_whitespace() {
                    saw_space = true;
                    j += 1;
                }
                let boundary = saw_space
                    && j < chars.len()
                    && (chars[j].is_uppercase() || chars[j].is_ascii_digit());
                if boundary {
                    let sentence: String = chars[start..=i].iter().collect();
                    let trimmed = sentence.trim();
                    if !trimmed.is_empty() {
                        sentences.push(trimmed.to_string());
                    }
                    start = j;
                    i = j;
                    continue;
                }
            }
        }
        i += 1;
    }
    if start < chars.len() {
        let tail: String = chars[start..].iter().collect();
        let trimmed = tail.trim();
        if !trimmed.is_empty() {
            sentences.push(trimmed.to_string());
        }
    }
    sentences
}

fn is_jsonl(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl") | Some("json")
    )
}

/// Read files into Documents. JSONL files yield one Document per
/// line; plain-text files are split on blank lines into paragraphs.
/// Ids are deterministic: `<file stem>-<record index>` unless the
/// record carries its own id.
pub fn ingest(paths: &[PathBuf], source: &str) -> Result<Vec<Document>, CorpusError> {
    let mut docs = Vec::new();
    for path in paths {
        let bytes = std::fs::read(path).map_err(|e| CorpusError::Io {
            path: path.clone(),
            source: e,
        })?;
        let content = String::from_utf8(bytes).map_err(|_| CorpusError::Encoding {
            path: path.clone(),
        })?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("doc")
            .to_string();
        if is_jsonl(path) {
            ingest_jsonl(path, &stem, &content, source, &mut docs)?;
        } else {
            ingest_plain(&stem, &content, source, &mut docs);
        }
    }
    Ok(docs)
}

fn ingest_jsonl(
    path: &Path,
    stem: &str,
    content: &str,
    default_source: &str,
    out: &mut Vec<Document>,
) -> Result<(), CorpusError> {
    let mut index = 0usize;
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonlRecord =
            serde_json::from_str(line).map_err(|e| CorpusError::Jsonl {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
        let text = normalize(&record.text);
        if text.is_empty() {
            index += 1;
            continue;
        }
        let mut id = String::new();
        match record.id {
            Some(explicit) => id.push_str(&explicit),
            None => {
                let _ = write!(id, "{stem}-{index}");
            }
        }
        out.push(Document {
            id,
            source: record.source.unwrap_or_else(|| default_source.to_string()),
            text,
        });
        index += 1;
    }
    Ok(())
}

fn ingest_plain(stem: &str, content: &str, source: &str, out: &mut Vec<Document>) {
    for (index, paragraph) in content.split("\n\n").enumerate() {
        let text = normalize(paragraph);
        if text.is_empty() {
            continue;
        }
        out.push(Document {
            id: format!("{stem}-{index}"),
            source: source.to_string(),
            text,
        });
    }
}

/// Optional exact-hash dedupe: keeps the first occurrence of each text.
pub fn dedupe(docs: Vec<Document>) -> Vec<Document> {
    let mut seen = std::collections::HashSet::new();
    docs.into_iter()
        .filter(|d| seen.insert(d.text.clone()))
        .collect()
}

pub fn stats<'a>(documents: impl IntoIterator<Item = &'a Document>) -> CorpusStats {
    let mut s = CorpusStats::default();
    for doc in documents {
        let tokens = doc.text.split_whitespace().count() as u64;
        s.document_count += 1;
        s.token_count += tokens;
        let entry = s.per_source_counts.entry(doc.source.clone()).or_default();
        entry.documents += 1;
        entry.tokens += tokens;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn normalize_collapses_whitespace() {
        assert_eq!(normalize("a  +  b"), "a + b");
    }

    #[test]
    fn normalize_preserves_math_text() {
        let s = "3x2=3($x^2$),x5=$x^5$";
        assert_eq!(normalize(s), s);
    }

    #[test]
    fn normalize_empty() {
        assert_eq!(normalize(""), "");
    }

    #[test]
    fn normalize_strips_control_chars_and_trims_lines() {
        assert_eq!(normalize("  a\u{0007}b  \n\tc d\t"), "ab\nc d");
    }

    #[test]
    fn normalize_is_idempotent() {
        let cases = ["a  +  b", "  x \t y \n z  ", "∑_{i=1}^n i^2", ""];
        for c in cases {
            let once = normalize(c);
            assert_eq!(normalize(&once), once);
        }
    }

    #[test]
    fn split_keeps_decimals_intact() {
        let s = "What is 2.6 + -10.9? A: -8.3";
        assert_eq!(split_sentences(s), vec!["What is 2.6 + -10.9?", "A: -8.3"]);
    }

    #[test]
    fn split_single_sentence() {
        assert_eq!(split_sentences("One."), vec!["One."]);
    }

    #[test]
    fn split_decimal_guard() {
        let s = "x = 1.5 is small. Next point.";
        let parts = split_sentences(s);
        assert_eq!(parts, vec!["x = 1.5 is small.", "Next point."]);
        assert!(parts[0].contains("1.5"));
    }

    #[test]
    fn split_preserves_non_space_characters() {
        let inputs = ["A b. C d! E 2.5f? G", "No split here", "End."];
        for input in inputs {
            let mut original: Vec<char> =
                input.chars().filter(|c| !c.is_whitespace()).collect();
            original.sort_unstable();
            let mut joined: Vec<char> = split_sentences(input)
                .join(" ")
                .chars()
                .filter(|c| !c.is_whitespace())
                .collect();
            joined.sort_unstable();
            assert_eq!(original, joined);
        }
    }

    #[test]
    fn ingest_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.txt");
        std::fs::write(&path, "").unwrap();
        let docs = ingest(&[path], "test").unwrap();
        assert!(docs.is_empty());
    }

    #[test]
    fn ingest_jsonl_three_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("recs.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        for i in 0..3 {
            writeln!(f, "{{\"text\": \"doc number {i}\"}}").unwrap();
        }
        drop(f);
        let docs = ingest(&[path], "test").unwrap();
        assert_eq!(docs.len(), 3);
        assert_eq!(docs[0].id, "recs-0");
        assert_eq!(docs[1].id, "recs-1");
        assert_eq!(docs[2].id, "recs-2");
        assert_eq!(docs[2].text, "doc number 2");
        assert_eq!(docs[0].source, "test");
    }

    #[test]
    fn ingest_plain_text_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("para.txt");
        let raw = "first paragraph here\n\nsecond paragraph here";
        std::fs::write(&path, raw).unwrap();
        let docs = ingest(&[path], "test").unwrap();
        assert_eq!(docs.len(), 2);
        let rejoined = docs
            .iter()
            .map(|d| d.text.as_str())
            .collect::<Vec<_>>()
            .join("\n\n");
        assert_eq!(rejoined, raw);
    }

    #[test]
    fn ingest_malformed_jsonl_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"text\": \"ok\"}\nnot json\n").unwrap();
        let err = ingest(&[path], "test").unwrap_err();
        match err {
            CorpusError::Jsonl { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn ingest_non_utf8_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bin.txt");
        std::fs::write(&path, [0xff, 0xfe, 0x00]).unwrap();
        assert!(matches!(
            ingest(&[path], "test").unwrap_err(),
            CorpusError::Encoding { .. }
        ));
    }

    #[test]
    fn ingest_missing_file_errors() {
        let err = ingest(&[PathBuf::from("/nonexistent/file.txt")], "t").unwrap_err();
        assert!(matches!(err, CorpusError::Io { .. }));
    }

    #[test]
    fn ingest_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.txt");
        std::fs::write(&path, "p one\n\np two").unwrap();
        let a = ingest(&[path.clone()], "s").unwrap();
        let b = ingest(&[path], "s").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stats_empty() {
        let s = stats([]);
        assert_eq!(s, CorpusStats::default());
    }

    #[test]
    fn stats_counts_tokens() {
        let docs = vec![
            Document {
                id: "1".into(),
                source: "x".into(),
                text: "a b".into(),
            },
            Document {
                id: "2".into(),
                source: "x".into(),
                text: "c".into(),
            },
        ];
        let s = stats(&docs);
        assert_eq!(s.document_count, 2);
        assert_eq!(s.token_count, 3);
    }

    #[test]
    fn stats_per_source_sums_match_totals() {
        let docs: Vec<Document> = (0..20)
            .map(|i| Document {
                id: format!("d{i}"),
                source: if i % 3 == 0 { "arxiv" } else { "textbook" }.into(),
                text: "w ".repeat(i + 1).trim().to_string(),
            })
            .collect();
        let s = stats(&docs);
        // Independent single-pass recount.
        let mut docs_total = 0;
        let mut tokens_total = 0;
        for c in s.per_source_counts.values() {
            docs_total += c.documents;
            tokens_total += c.tokens;
        }
        assert_eq!(docs_total, s.document_count);
        assert_eq!(tokens_total, s.token_count);
        let naive: u64 = docs.iter().map(|d| d.text.split_whitespace().count() as u64).sum();
        assert_eq!(s.token_count, naive);
    }

    #[test]
    fn dedupe_keeps_first() {
        let docs = vec![
            Document {
                id: "1".into(),
                source: "x".into(),
                text: "same".into(),
            },
            Document {
                id: "2".into(),
                source: "y".into(),
                text: "same".into(),
            },
        ];
        let deduped = dedupe(docs);
        assert_eq!(deduped.len(), 1);
        assert_eq!(deduped[0].id, "1");
    }
}
