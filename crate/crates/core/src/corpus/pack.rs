use serde::{Deserialize, Serialize};

use crate::tokenizer::{PAD_ID, SEPARATOR_ID};

/// Where a packed window starts: the source and the document index within it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Origin {
    pub source: String,
    pub document: u64,
}

#[derive(Debug, Clone)]
pub struct Document {
    pub origin: Origin,
    pub tokens: Vec<u16>,
}

/// A fixed-length training window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceRecord {
    pub tokens: Vec<u16>,
    pub origin: Origin,
    /// Position in the permuted stream; equal to the packing position until
    /// the stream is permuted.
    pub global_index: u64,
    /// Number of trailing pad ids (nonzero only on the final window).
    pub padding: u32,
}

impl SequenceRecord {
    pub fn is_padded(&self) -> bool {
        self.padding > 0
    }

    pub fn content_tokens(&self) -> usize {
        self.tokens.len() - self.padding as usize
    }
}

/// Concatenates documents with a separator between consecutive documents
/// and cuts the stream into windows of exactly `max_seq_len`. The final
/// partial window is padded with [`PAD_ID`]. Empty documents are skipped.
pub fn pack_sequences<I>(documents: I, max_seq_len: usize) -> Vec<SequenceRecord>
where
    I: IntoIterator<Item = Document>,
{
    assert!(max_seq_len >= 2, "max_seq_len must be at least 2");
    let mut out = Vec::new();
    let mut current: Vec<u16> = Vec::with_capacity(max_seq_len);
    let mut current_origin: Option<Origin> = None;
    let mut first = true;

    let mut push_token = |tok: u16, origin: &Origin, out: &mut Vec<SequenceRecord>| {
        if current.is_empty() {
            current_origin = Some(origin.clone());
        }
        current.push(tok);
        if current.len() == max_seq_len {
            out.push(SequenceRecord {
                tokens: std::mem::replace(&mut current, Vec::with_capacity(max_seq_len)),
                origin: current_origin.take().unwrap(),
                global_index: out.len() as u64,
                padding: 0,
            });
        }
    };

    let mut last_origin = None;
    for doc in documents {
        if doc.tokens.is_empty() {
            continue;
        }
        if !first {
            // the separator belongs to the document it introduces
            push_token(SEPARATOR_ID, &doc.origin, &mut out);
        }
        first = false;
        for &t in &doc.tokens {
            push_token(t, &doc.origin, &mut out);
        }
        last_origin = Some(doc.origin);
    }
    drop(push_token);

    if !current.is_empty() {
        let padding = (max_seq_len - current.len()) as u32;
        current.resize(max_seq_len, PAD_ID);
        out.push(SequenceRecord {
            tokens: current,
            origin: current_origin.or(last_origin).unwrap(),
            global_index: out.len() as u64,
            padding,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(i: u64, tokens: Vec<u16>) -> Document {
        Document {
            origin: Origin {
                source: "s".into(),
                document: i,
            },
            tokens,
        }
    }

    /// Straight-line reference: build the whole stream, then slice it.
    fn reference_pack(docs: &[Vec<u16>], len: usize) -> Vec<Vec<u16>> {
        let mut stream = Vec::new();
        for (i, d) in docs.iter().filter(|d| !d.is_empty()).enumerate() {
            if i > 0 {
                stream.push(SEPARATOR_ID);
            }
            stream.extend_from_slice(d);
        }
        stream
            .chunks(len)
            .map(|c| {
                let mut v = c.to_vec();
                v.resize(len, PAD_ID);
                v
            })
            .collect()
    }

    #[test]
    fn two_full_windows() {
        let l = 8;
        let recs = pack_sequences(vec![doc(0, (0..2 * l as u16).collect())], l);
        assert_eq!(recs.len(), 2);
        assert!(recs.iter().all(|r| r.padding == 0));
    }

    #[test]
    fn short_doc_gets_one_pad() {
        let l = 8;
        let recs = pack_sequences(vec![doc(0, vec![7; l - 1])], l);
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].padding, 1);
        assert_eq!(recs[0].tokens[l - 1], PAD_ID);
        assert!(!recs[0].tokens.contains(&SEPARATOR_ID));
    }

    #[test]
    fn separator_fills_window() {
        // (L-1)-token doc followed by another doc: the separator completes window 0
        let l = 4;
        let recs = pack_sequences(vec![doc(0, vec![1, 2, 3]), doc(1, vec![4])], l);
        assert_eq!(recs[0].tokens, vec![1, 2, 3, SEPARATOR_ID]);
        assert_eq!(recs[0].origin.document, 0);
        assert_eq!(recs[1].tokens, vec![4, PAD_ID, PAD_ID, PAD_ID]);
        assert_eq!(recs[1].origin.document, 1);
    }

    #[test]
    fn empty_stream() {
        assert!(pack_sequences(Vec::new(), 4).is_empty());
        assert!(pack_sequences(vec![doc(0, vec![])], 4).is_empty());
    }

    #[test]
    fn enumerate_small_cases_against_reference() {
        for len in 2..6usize {
            for a in 0..7usize {
                for b in 0..7usize {
                    let docs = vec![vec![1u16; a], vec![2u16; b]];
                    let got: Vec<Vec<u16>> = pack_sequences(
                        docs.iter().enumerate().map(|(i, d)| doc(i as u64, d.clone())),
                        len,
                    )
                    .into_iter()
                    .map(|r| r.tokens)
                    .collect();
                    assert_eq!(got, reference_pack(&docs, len), "len={len} a={a} b={b}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn conserves_tokens(docs in proptest::collection::vec(
            proptest::collection::vec(0u16..256, 0..40), 0..8), len in 2usize..16) {
            let recs = pack_sequences(
                docs.iter().enumerate().map(|(i, d)| doc(i as u64, d.clone())), len);
            let nonempty: Vec<_> = docs.iter().filter(|d| !d.is_empty()).collect();
            let expected = nonempty.iter().map(|d| d.len()).sum::<usize>()
                + nonempty.len().saturating_sub(1);
            let content: usize = recs.iter().map(|r| r.content_tokens()).sum();
            prop_assert_eq!(content, expected);
            prop_assert!(recs.iter().all(|r| r.tokens.len() == len));
            prop_assert!(recs.iter().rev().skip(1).all(|r| r.padding == 0));
        }
    }
}
