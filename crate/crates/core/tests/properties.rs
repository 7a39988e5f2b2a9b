//! Property-based invariants across the data pipeline.

use mathlm::corpus::{self, Document};
use mathlm::mlm_data;
use mathlm::tokenizer::{self, SEP_ID};
use proptest::prelude::*;

fn doc(text: &str) -> Document {
    Document {
        id: "p".into(),
        source: "prop".into(),
        text: text.into(),
    }
}

fn word() -> impl Strategy<Value = String> {
    proptest::string::string_regex("[abcd]{1,8}").unwrap()
}

fn text() -> impl Strategy<Value = String> {
    proptest::collection::vec(word(), 1..20).prop_map(|ws| ws.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalize_is_idempotent(s in "\\PC{0,200}") {
        let once = corpus::normalize(&s);
        prop_assert_eq!(corpus::normalize(&once), once);
    }

    #[test]
    fn sentence_split_preserves_content_chars(s in "[a-zA-Z0-9 .!?]{0,200}") {
        let normalized = corpus::normalize(&s);
        let sentences = corpus::split_sentences(&normalized);
        let joined: String = sentences
            .concat()
            .chars()
            .filter(|c| !c.is_whitespace())
            .collect();
        let original: String = normalized
            .chars()
            .filter(|c| !c.is_whitespace())
            .collect();
        prop_assert_eq!(joined, original);
    }

    #[test]
    fn decode_inverts_encode_within_coverage(t in text()) {
        let documents = vec![doc(&t)];
        let vocab = tokenizer::train_vocabulary(&documents, 40).unwrap();
        let ids = tokenizer::encode(&t, &vocab);
        // training corpus == input, so every word is coverable
        prop_assert!(ids.iter().all(|&id| id != 1));
        let round = tokenizer::decode(&ids, &vocab).unwrap();
        prop_assert_eq!(round, t.split_whitespace().collect::<Vec<_>>().join(" "));
    }

    #[test]
    fn packing_conserves_tokens(texts in proptest::collection::vec(text(), 1..6)) {
        let documents: Vec<Document> = texts.iter().map(|t| doc(t)).collect();
        let vocab = tokenizer::train_vocabulary(&documents, 60).unwrap();
        let max_seq = 16usize;
        let segments = mlm_data::pack_sequences(&documents, &vocab, max_seq).unwrap();
        let encoded: usize = documents
            .iter()
            .map(|d| tokenizer::encode(&d.text, &vocab).len())
            .sum();
        let packed: usize = segments.iter().map(|s| s.len()).sum();
        // each segment adds one [CLS]; each document adds one [SEP]
        prop_assert_eq!(packed - segments.len(), encoded + documents.len());
        for seg in &segments {
            prop_assert!(seg.len() <= max_seq);
            prop_assert_eq!(seg[0], 2);
        }
        // stream order preserved: concatenation of segment bodies equals
        // the concatenated document streams
        let mut stream: Vec<u32> = Vec::new();
        for d in &documents {
            stream.extend(tokenizer::encode(&d.text, &vocab));
            stream.push(SEP_ID);
        }
        let body: Vec<u32> = segments.iter().flat_map(|s| s[1..].to_vec()).collect();
        prop_assert_eq!(body, stream);
    }

    #[test]
    fn masking_is_restorable(t in text(), seed in 0u64..1000) {
        let documents = vec![doc(&t)];
        let vocab = tokenizer::train_vocabulary(&documents, 40).unwrap();
        let max_seq = 16usize;
        let segments = mlm_data::pack_sequences(&documents, &vocab, max_seq).unwrap();
        for (i, seg) in segments.iter().enumerate() {
            let ex = mlm_data::apply_masking(seg, &vocab, max_seq, 0.15, seed + i as u64);
            prop_assert_eq!(ex.attention_len, seg.len());
            prop_assert_eq!(ex.input_ids.len(), max_seq);
            // writing the targets back restores the padded original
            let mut restored = ex.input_ids.clone();
            for (&pos, &target) in ex.mask_positions.iter().zip(ex.target_ids.iter()) {
                restored[pos] = target;
            }
            let mut padded = seg.clone();
            padded.resize(max_seq, 0);
            prop_assert_eq!(&restored, &padded);
            // untouched positions are identical to the original
            for (pos, (&got, &orig)) in ex.input_ids.iter().zip(padded.iter()).enumerate() {
                if !ex.mask_positions.contains(&pos) {
                    prop_assert_eq!(got, orig);
                }
            }
        }
    }

    #[test]
    fn vocabulary_files_round_trip(t in text()) {
        let documents = vec![doc(&t)];
        let vocab = tokenizer::train_vocabulary(&documents, 40).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.txt");
        tokenizer::save_vocab(&vocab, &path).unwrap();
        let loaded = tokenizer::load_vocab(&path).unwrap();
        prop_assert_eq!(&vocab, &loaded);
        prop_assert_eq!(vocab.content_hash(), loaded.content_hash());
    }
}
