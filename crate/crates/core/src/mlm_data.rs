//! Packing a tokenized corpus into fixed-length MLM training
//! examples and padded classification examples.
//!
//! Masking RNG is ChaCha8 seeded per call, so masked datasets are
//! reproducible across platforms.

use crate::corpus::Document;
use crate::tokenizer::{self, Vocabulary, CLS_ID, PAD_ID, SEP_ID, MASK_ID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("record {index}: label {label} out of range (num_labels = {num_labels})")]
    LabelOutOfRange {
        index: usize,
        label: i64,
        num_labels: usize,
    },
    #[error("max_seq must be at least 8, got {0}")]
    MaxSeqTooSmall(usize),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}:{line}: {message}")]
    Csv {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Packed fixed-length token sequence with mask positions and the
/// original ids at those positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlmExample {
    pub input_ids: Vec<u32>,
    pub mask_positions: Vec<usize>,
    pub target_ids: Vec<u32>,
    pub attention_len: usize,
}

/// Padded `[CLS] … [SEP]` sequence with a class label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifyExample {
    pub input_ids: Vec<u32>,
    pub label: usize,
    pub attention_len: usize,
}

/// Probability mix for selected positions: mask / random / keep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskMix {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl Default for MaskMix {
    fn default() -> Self {
        MaskMix {
            mask: 0.8,
            random: 0.1,
            keep: 0.1,
        }
    }
}

/// Concatenate all document token streams in corpus order with a
/// `[SEP]` id at each document boundary, then cut into consecutive
/// segments of `max_seq - 1` ids, each prefixed with `[CLS]`. The
/// final short segment is kept (padding happens at masking time).
pub fn pack_sequences(
    documents: &[Document],
    vocab: &Vocabulary,
    max_seq: usize,
) -> Result<Vec<Vec<u32>>, DataError> {
    if max_seq < 8 {
        return Err(DataError::MaxSeqTooSmall(max_seq));
    }
    let mut stream: Vec<u32> = Vec::new();
    for doc in documents {
        stream.extend(tokenizer::encode(&doc.text, vocab));
        stream.push(SEP_ID);
    }
    if documents.is_empty() {
        return Ok(Vec::new());
    }
    let content_len = max_seq - 1;
    let mut segments = Vec::new();
    for chunk in stream.chunks(content_len) {
        let mut segment = Vec::with_capacity(chunk.len() + 1);
        segment.push(CLS_ID);
        segment.extend_from_slice(chunk);
        segments.push(segment);
    }
    Ok(segments)
}

/// Independently select each maskable (non-special) position with
/// probability `rate`; of the selected, replace per `mix` with
/// `[MASK]`, a uniform random non-special token, or the original.
/// Pads the segment to `max_seq`. Deterministic given `rng_seed`.
pub fn apply_masking_with_mix(
    segment: &[u32],
    vocab: &Vocabulary,
    max_seq: usize,
    rate: f64,
    mix: MaskMix,
    rng_seed: u64,
) -> MlmExample {
    assert!(segment.len() <= max_seq, "segment longer than max_seq");
    assert!((0.0..=1.0).contains(&rate), "rate must be in [0, 1]");
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let attention_len = segment.len();
    let mut input_ids = segment.to_vec();
    input_ids.resize(max_seq, PAD_ID);

    let mut mask_positions = Vec::new();
    let mut target_ids = Vec::new();
    let num_specials = tokenizer::SPECIAL_TOKENS.len() as u32;
    for pos in 0..attention_len {
        let original = input_ids[pos];
        if vocab.is_special_id(original) {
            continue;
        }
        if rng.gen::<f64>() >= rate {
            continue;
        }
        mask_positions.push(pos);
        target_ids.push(original);
        let roll = rng.gen::<f64>();
        if roll < mix.mask {
            input_ids[pos] = MASK_ID;
        } else if roll < mix.mask + mix.random {
            let span = vocab.size() as u32 - num_specials;
            input_ids[pos] = num_specials + rng.gen_range(0..span);
        }
        // else: keep the original id
    }

    MlmExample {
        input_ids,
        mask_positions,
        target_ids,
        attention_len,
    }
}

/// [`apply_masking_with_mix`] with the standard 80/10/10 mix.
pub fn apply_masking(
    segment: &[u32],
    vocab: &Vocabulary,
    max_seq: usize,
    rate: f64,
    rng_seed: u64,
) -> MlmExample {
    apply_masking_with_mix(segment, vocab, max_seq, rate, MaskMix::default(), rng_seed)
}

/// Mask a whole packed corpus; segment `i` uses seed `seed + i`.
pub fn mask_segments(
    segments: &[Vec<u32>],
    vocab: &Vocabulary,
    max_seq: usize,
    rate: f64,
    seed: u64,
) -> Vec<MlmExample> {
    use rayon::prelude::*;
    segments
        .par_iter()
        .enumerate()
        .map(|(i, seg)| apply_masking(seg, vocab, max_seq, rate, seed + i as u64))
        .collect()
}

/// Encode, head-truncate to `max_seq - 2`, wrap as `[CLS] … [SEP]`,
/// and pad.
pub fn build_classify_examples(
    dataset: &[(String, usize)],
    vocab: &Vocabulary,
    max_seq: usize,
    num_labels: usize,
) -> Result<Vec<ClassifyExample>, DataError> {
    let mut out = Vec::with_capacity(dataset.len());
    for (index, (text, label)) in dataset.iter().enumerate() {
        if *label >= num_labels {
            return Err(DataError::LabelOutOfRange {
                index,
                label: *label as i64,
                num_labels,
            });
        }
        let mut ids = tokenizer::encode(text, vocab);
        ids.truncate(max_seq - 2);
        let mut input_ids = Vec::with_capacity(max_seq);
        input_ids.push(CLS_ID);
        input_ids.extend_from_slice(&ids);
        input_ids.push(SEP_ID);
        let attention_len = input_ids.len();
        input_ids.resize(max_seq, PAD_ID);
        out.push(ClassifyExample {
            input_ids,
            label: *label,
            attention_len,
        });
    }
    Ok(out)
}

/// Self-describing header for packed/masked JSONL datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub max_seq: usize,
    pub vocab_hash: String,
    pub seed: Option<u64>,
    pub rate: Option<f64>,
}

pub fn write_masked_jsonl(
    path: &Path,
    header: &DatasetHeader,
    examples: &[MlmExample],
) -> Result<(), DataError> {
    let file = std::fs::File::create(path).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| DataError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    writeln!(w, "{}", serde_json::to_string(header).expect("header serializes"))
        .map_err(io_err)?;
    for ex in examples {
        writeln!(w, "{}", serde_json::to_string(ex).expect("example serializes"))
            .map_err(io_err)?;
    }
    Ok(())
}

pub fn read_masked_jsonl(path: &Path) -> Result<(DatasetHeader, Vec<MlmExample>), DataError> {
    let file = std::fs::File::open(path).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| DataError::Format {
            path: path.to_path_buf(),
            message: "missing header line".into(),
        })?
        .map_err(|e| DataError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    let header: DatasetHeader =
        serde_json::from_str(&header_line).map_err(|e| DataError::Format {
            path: path.to_path_buf(),
            message: format!("bad header: {e}"),
        })?;
    let mut examples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| DataError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: MlmExample = serde_json::from_str(&line).map_err(|e| DataError::Csv {
            path: path.to_path_buf(),
            line: lineno + 2,
            message: e.to_string(),
        })?;
        examples.push(ex);
    }
    Ok((header, examples))
}

/// Packed (unmasked) segments as JSONL with the same header scheme.
pub fn write_packed_jsonl(
    path: &Path,
    header: &DatasetHeader,
    segments: &[Vec<u32>],
) -> Result<(), DataError> {
    let file = std::fs::File::create(path).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| DataError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    writeln!(w, "{}", serde_json::to_string(header).expect("header serializes"))
        .map_err(io_err)?;
    for seg in segments {
        writeln!(w, "{}", serde_json::to_string(seg).expect("segment serializes"))
            .map_err(io_err)?;
    }
    Ok(())
}

pub fn read_packed_jsonl(path: &Path) -> Result<(DatasetHeader, Vec<Vec<u32>>), DataError> {
    let file = std::fs::File::open(path).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| DataError::Format {
            path: path.to_path_buf(),
            message: "missing header line".into(),
        })?
        .map_err(|e| DataError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    let header: DatasetHeader =
        serde_json::from_str(&header_line).map_err(|e| DataError::Format {
            path: path.to_path_buf(),
            message: format!("bad header: {e}"),
        })?;
    let mut segments = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| DataError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let seg: Vec<u32> = serde_json::from_str(&line).map_err(|e| DataError::Csv {
            path: path.to_path_buf(),
            line: lineno + 2,
            message: e.to_string(),
        })?;
        segments.push(seg);
    }
    Ok((header, segments))
}

/// Load a classification dataset from CSV or TSV with a header row
/// naming "text" and "label" columns. Delimiter is tab for `.tsv`.
pub fn load_task_csv(path: &Path) -> Result<Vec<(String, usize)>, DataError> {
    let delimiter = if path.extension().and_then(|e| e.to_str()) == Some("tsv") {
        b'\t'
    } else {
        b','
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .from_path(path)
        .map_err(|e| DataError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .clone();
    let text_idx = headers
        .iter()
        .position(|h| h == "text")
        .ok_or_else(|| DataError::Format {
            path: path.to_path_buf(),
            message: "missing required column \"text\"".into(),
        })?;
    let label_idx = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| DataError::Format {
            path: path.to_path_buf(),
            message: "missing required column \"label\"".into(),
        })?;
    let mut out = Vec::new();
    for (lineno, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Csv {
            path: path.to_path_buf(),
            line: lineno + 2,
            message: e.to_string(),
        })?;
        let text = record.get(text_idx).unwrap_or("").to_string();
        let label: usize = record
            .get(label_idx)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|e| DataError::Csv {
                path: path.to_path_buf(),
                line: lineno + 2,
                message: format!("bad label: {e}"),
            })?;
        out.push((text, label));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use crate::tokenizer::{SPECIAL_TOKENS, UNK_ID};

    fn doc(text: &str) -> Document {
        Document {
            id: "t".into(),
            source: "test".into(),
            text: text.into(),
        }
    }

    fn char_vocab() -> Vocabulary {
        // specials + lowercase letters as standalone words
        let docs: Vec<Document> = vec![doc(
            "a b c d e f g h i j k l m n o p q r s t u v w x y z",
        )];
        crate::tokenizer::train_vocabulary(&docs, 40).unwrap()
    }

    #[test]
    fn pack_short_document() {
        let vocab = char_vocab();
        let docs = vec![doc("a b c d e f g h i j")];
        let segments = pack_sequences(&docs, &vocab, 512).unwrap();
        assert_eq!(segments.len(), 1);
        let seg = &segments[0];
        assert_eq!(seg.len(), 12); // CLS + 10 tokens + SEP
        assert_eq!(seg[0], CLS_ID);
        assert_eq!(*seg.last().unwrap(), SEP_ID);
    }

    #[test]
    fn pack_splits_at_content_length() {
        let vocab = char_vocab();
        // 1022 content ids including boundary SEPs: two docs of 510
        // and 511 tokens (510 + 1 + 511 = 1022 with the first SEP;
        // trailing SEP starts nothing new? 1022 = 511 + 511 exactly)
        let text_a = vec!["a"; 510].join(" ");
        let text_b = vec!["b"; 510].join(" ");
        let docs = vec![doc(&text_a), doc(&text_b)];
        // stream: 510 + SEP + 510 + SEP = 1022 ids
        let segments = pack_sequences(&docs, &vocab, 512).unwrap();
        assert_eq!(segments.len(), 2);
        assert_eq!(segments[0].len(), 512);
        assert_eq!(segments[1].len(), 512);
        assert_eq!(segments[0][0], CLS_ID);
        assert_eq!(segments[1][0], CLS_ID);
    }

    #[test]
    fn pack_empty_corpus() {
        let vocab = char_vocab();
        assert!(pack_sequences(&[], &vocab, 512).unwrap().is_empty());
    }

    #[test]
    fn pack_max_seq_too_small() {
        let vocab = char_vocab();
        assert!(matches!(
            pack_sequences(&[doc("a")], &vocab, 4),
            Err(DataError::MaxSeqTooSmall(4))
        ));
    }

    #[test]
    fn pack_reconstruction() {
        let vocab = char_vocab();
        let docs = vec![
            doc("a b c"),
            doc("d e"),
            doc("f g h i"),
            doc("j"),
            doc("k l m n o p q"),
        ];
        let segments = pack_sequences(&docs, &vocab, 8).unwrap();
        // strip CLS and boundary SEPs and re-concatenate
        let mut recovered: Vec<u32> = Vec::new();
        for seg in &segments {
            assert_eq!(seg[0], CLS_ID);
            recovered.extend(seg[1..].iter().filter(|&&id| id != SEP_ID && id != PAD_ID));
        }
        let mut expected: Vec<u32> = Vec::new();
        for d in &docs {
            expected.extend(crate::tokenizer::encode(&d.text, &vocab));
        }
        assert_eq!(recovered, expected);
    }

    #[test]
    fn masking_rate_zero() {
        let vocab = char_vocab();
        let segment = vec![CLS_ID, 6, 7, 8, SEP_ID];
        let ex = apply_masking(&segment, &vocab, 8, 0.0, 42);
        assert!(ex.mask_positions.is_empty());
        assert!(ex.target_ids.is_empty());
        assert_eq!(ex.attention_len, 5);
        assert_eq!(ex.input_ids.len(), 8);
        assert_eq!(&ex.input_ids[5..], &[PAD_ID, PAD_ID, PAD_ID]);
    }

    #[test]
    fn masking_rate_one_pure_mask() {
        let vocab = char_vocab();
        let segment = vec![CLS_ID, 6, 7, 8, SEP_ID];
        let mix = MaskMix {
            mask: 1.0,
            random: 0.0,
            keep: 0.0,
        };
        let ex = apply_masking_with_mix(&segment, &vocab, 8, 1.0, mix, 7);
        assert_eq!(ex.mask_positions, vec![1, 2, 3]);
        assert_eq!(ex.target_ids, vec![6, 7, 8]);
        for &p in &ex.mask_positions {
            assert_eq!(ex.input_ids[p], MASK_ID);
        }
    }

    #[test]
    fn masking_never_touches_specials() {
        let vocab = char_vocab();
        let segment = vec![CLS_ID, 6, SEP_ID, 7, SEP_ID];
        for seed in 0..50 {
            let ex = apply_masking(&segment, &vocab, 8, 1.0, seed);
            assert_eq!(ex.input_ids[0], CLS_ID);
            assert_eq!(ex.input_ids[2], SEP_ID);
            assert_eq!(ex.input_ids[4], SEP_ID);
            for &p in &ex.mask_positions {
                assert!(p == 1 || p == 3);
            }
        }
    }

    #[test]
    fn masking_is_deterministic() {
        let vocab = char_vocab();
        let segment: Vec<u32> = (0..100).map(|i| 5 + (i % 20)).collect();
        let a = apply_masking(&segment, &vocab, 128, 0.15, 99);
        let b = apply_masking(&segment, &vocab, 128, 0.15, 99);
        assert_eq!(a, b);
        let c = apply_masking(&segment, &vocab, 128, 0.15, 100);
        assert_ne!(a, c);
    }

    #[test]
    fn masking_count_in_binomial_interval() {
        // 10,000 maskable positions at rate 0.15: central 99.9%
        // binomial interval [1384, 1619] computed by direct CDF
        // summation (frozen).
        let vocab = char_vocab();
        let segment: Vec<u32> = (0..10_000).map(|i| 5 + (i % 20)).collect();
        for seed in [1u64, 7, 42] {
            let ex = apply_masking(&segment, &vocab, 10_000, 0.15, seed);
            let count = ex.mask_positions.len();
            assert!((1384..=1619).contains(&count), "count {count} out of interval");
        }
    }

    #[test]
    fn masking_target_reconstruction() {
        let vocab = char_vocab();
        let mut segment = vec![CLS_ID];
        segment.extend((0..60).map(|i| 5 + (i % 25)));
        segment.push(SEP_ID);
        let ex = apply_masking(&segment, &vocab, 64, 0.3, 5);
        let mut restored = ex.input_ids[..ex.attention_len].to_vec();
        for (&pos, &target) in ex.mask_positions.iter().zip(ex.target_ids.iter()) {
            restored[pos] = target;
        }
        assert_eq!(restored, segment);
    }

    #[test]
    fn mask_segments_order_and_seed_derivation() {
        let vocab = char_vocab();
        let segments: Vec<Vec<u32>> = (0..10)
            .map(|i| (0..30).map(|j| 5 + ((i + j) % 20)).collect())
            .collect();
        let all = mask_segments(&segments, &vocab, 32, 0.15, 1000);
        for (i, seg) in segments.iter().enumerate() {
            let single = apply_masking(seg, &vocab, 32, 0.15, 1000 + i as u64);
            assert_eq!(all[i], single);
        }
    }

    #[test]
    fn classify_short_text() {
        let vocab = char_vocab();
        let data = vec![("a b c".to_string(), 0)];
        let out = build_classify_examples(&data, &vocab, 16, 2).unwrap();
        assert_eq!(out[0].attention_len, 5); // CLS + 3 + SEP
        assert_eq!(out[0].input_ids.len(), 16);
        assert_eq!(out[0].input_ids[0], CLS_ID);
        assert_eq!(out[0].input_ids[4], SEP_ID);
        assert_eq!(out[0].input_ids[5], PAD_ID);
    }

    #[test]
    fn classify_head_truncation() {
        let vocab = char_vocab();
        let long = vec!["a"; 600].join(" ");
        let data = vec![(long, 1)];
        let out = build_classify_examples(&data, &vocab, 512, 2).unwrap();
        let ex = &out[0];
        assert_eq!(ex.attention_len, 512);
        assert_eq!(ex.input_ids[0], CLS_ID);
        assert_eq!(ex.input_ids[511], SEP_ID);
        let content: Vec<u32> = ex.input_ids[1..511].to_vec();
        assert_eq!(content.len(), 510);
        assert!(content.iter().all(|&id| id == vocab.id("a").unwrap()));
    }

    #[test]
    fn classify_empty_text() {
        let vocab = char_vocab();
        let data = vec![(String::new(), 0)];
        let out = build_classify_examples(&data, &vocab, 8, 1).unwrap();
        assert_eq!(out[0].attention_len, 2);
        assert_eq!(&out[0].input_ids[..2], &[CLS_ID, SEP_ID]);
    }

    #[test]
    fn classify_label_out_of_range() {
        let vocab = char_vocab();
        let data = vec![("a".to_string(), 0), ("b".to_string(), 5)];
        match build_classify_examples(&data, &vocab, 8, 2).unwrap_err() {
            DataError::LabelOutOfRange { index, label, .. } => {
                assert_eq!(index, 1);
                assert_eq!(label, 5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn masked_jsonl_round_trip() {
        let vocab = char_vocab();
        let segments: Vec<Vec<u32>> = (0..4)
            .map(|i| (0..20).map(|j| 5 + ((i + j) % 15)).collect())
            .collect();
        let examples = mask_segments(&segments, &vocab, 32, 0.15, 3);
        let header = DatasetHeader {
            format: "mlm-masked-v1".into(),
            max_seq: 32,
            vocab_hash: vocab.content_hash(),
            seed: Some(3),
            rate: Some(0.15),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("masked.jsonl");
        write_masked_jsonl(&path, &header, &examples).unwrap();
        let (h2, ex2) = read_masked_jsonl(&path).unwrap();
        assert_eq!(header, h2);
        assert_eq!(examples, ex2);
    }

    #[test]
    fn task_csv_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task.csv");
        std::fs::write(&path, "text,label\n\"what is 2+2\",0\nsolve for x,1\n").unwrap();
        let rows = load_task_csv(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0], ("what is 2+2".to_string(), 0));
        assert_eq!(rows[1], ("solve for x".to_string(), 1));
    }

    #[test]
    fn task_tsv_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task.tsv");
        std::fs::write(&path, "text\tlabel\nwhat is 2+2\t0\n").unwrap();
        let rows = load_task_csv(&path).unwrap();
        assert_eq!(rows, vec![("what is 2+2".to_string(), 0)]);
    }

    #[test]
    fn task_csv_missing_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task.csv");
        std::fs::write(&path, "body,label\nx,0\n").unwrap();
        assert!(matches!(
            load_task_csv(&path).unwrap_err(),
            DataError::Format { .. }
        ));
    }

    #[test]
    fn unk_is_special_enough() {
        // sanity: UNK produced by encoding is never masked
        let vocab = char_vocab();
        let segment = vec![CLS_ID, UNK_ID, 6, SEP_ID];
        for seed in 0..20 {
            let ex = apply_masking(&segment, &vocab, 8, 1.0, seed);
            assert!(!ex.mask_positions.contains(&1));
        }
        let _ = SPECIAL_TOKENS;
    }
}
