//! Vocabulary and packing of (query, document) pairs into model inputs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::document::Document;
use crate::geometry::BBox;

/// Word-level vocabulary with reserved special tokens.
///
/// Lookup keys are lowercased, stripped of leading/trailing punctuation, and
/// numeric-shaped tokens are collapsed onto a single `<num>` entry so amounts
/// and dates unseen at training time still share an embedding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

pub const CLS_ID: u32 = 0;
pub const SEP_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const NUM_ID: u32 = 3;

const SPECIALS: [&str; 4] = ["[CLS]", "[SEP]", "[UNK]", "<num>"];

/// Canonical lookup key for a token text.
pub fn vocab_key(text: &str) -> String {
    let stripped = text.trim_matches(|c: char| !c.is_alphanumeric());
    let lowered = stripped.to_lowercase();
    if !lowered.is_empty()
        && lowered.contains(|c: char| c.is_ascii_digit())
        && lowered
            .chars()
            .all(|c| c.is_ascii_digit() || matches!(c, '.' | ',' | '-' | '/' | ':'))
    {
        return "<num>".to_string();
    }
    lowered
}

impl Vocab {
    /// Builds a vocabulary from an iterator of raw token texts.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Vocab {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for t in texts {
            let key = vocab_key(t);
            if key.is_empty() || key == "<num>" {
                continue;
            }
            *counts.entry(key).or_insert(0) += 1;
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for (w, _) in ranked.into_iter().take(max_size.saturating_sub(SPECIALS.len())) {
            words.push(w);
        }
        Vocab::from_words(words)
    }

    /// Restores a vocabulary from its word list (e.g. from a checkpoint).
    pub fn from_words(words: Vec<String>) -> Vocab {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocab { words, index }
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Id for a raw token text, falling back to `[UNK]`.
    pub fn id_of(&self, text: &str) -> u32 {
        let key = vocab_key(text);
        if key.is_empty() {
            return UNK_ID;
        }
        self.index.get(&key).copied().unwrap_or(UNK_ID)
    }

    /// Splits a field name on whitespace and maps each word to an id.
    pub fn query_ids(&self, field_name: &str) -> Vec<u32> {
        field_name
            .split_whitespace()
            .map(|w| self.id_of(w))
            .collect()
    }
}

/// A packed model input: `[CLS] query [SEP] document [SEP]`.
///
/// Query and special positions carry the sentinel box and `is_query = true`;
/// document positions preserve reading order and map back to document token
/// indices through `doc_token_map`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub token_ids: Vec<u32>,
    pub token_boxes: Vec<BBox>,
    pub is_query: Vec<bool>,
    pub doc_token_map: Vec<Option<usize>>,
    pub truncated: bool,
}

impl ModelInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Sequence positions holding document tokens, in reading order.
    pub fn doc_positions(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&p| self.doc_token_map[p].is_some())
            .collect()
    }

    /// Sequence position of a document token index, if it survived packing.
    pub fn position_of_doc_token(&self, token_index: usize) -> Option<usize> {
        self.doc_token_map
            .iter()
            .position(|m| *m == Some(token_index))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum InputError {
    #[error("field name must be non-empty")]
    EmptyFieldName,
    #[error("max_seq_len {max} cannot hold the query ({query} tokens) plus specials")]
    QueryTooLong { max: usize, query: usize },
}

/// Packs a query and document into a [`ModelInput`], truncating document
/// tokens from the tail when the budget is exceeded.
pub fn build_model_input(
    vocab: &Vocab,
    field_name: &str,
    doc: &Document,
    max_seq_len: usize,
) -> Result<ModelInput, InputError> {
    if field_name.trim().is_empty() {
        return Err(InputError::EmptyFieldName);
    }
    let query = vocab.query_ids(field_name);
    let overhead = query.len() + 3; // [CLS], two [SEP]s
    if max_seq_len < overhead {
        return Err(InputError::QueryTooLong {
            max: max_seq_len,
            query: query.len(),
        });
    }
    let doc_budget = max_seq_len - overhead;
    let n_doc = doc.tokens.len().min(doc_budget);
    let truncated = n_doc < doc.tokens.len();

    let total = overhead + n_doc;
    let mut token_ids = Vec::with_capacity(total);
    let mut token_boxes = Vec::with_capacity(total);
    let mut is_query = Vec::with_capacity(total);
    let mut doc_token_map = Vec::with_capacity(total);

    let push_special = |ids: &mut Vec<u32>,
                            boxes: &mut Vec<BBox>,
                            isq: &mut Vec<bool>,
                            map: &mut Vec<Option<usize>>,
                            id: u32| {
        ids.push(id);
        boxes.push(BBox::sentinel());
        isq.push(true);
        map.push(None);
    };

    push_special(&mut token_ids, &mut token_boxes, &mut is_query, &mut doc_token_map, CLS_ID);
    for id in &query {
        push_special(&mut token_ids, &mut token_boxes, &mut is_query, &mut doc_token_map, *id);
    }
    push_special(&mut token_ids, &mut token_boxes, &mut is_query, &mut doc_token_map, SEP_ID);

    for t in doc.tokens.iter().take(n_doc) {
        token_ids.push(vocab.id_of(&t.text));
        token_boxes.push(t.bbox);
        is_query.push(false);
        doc_token_map.push(Some(t.index));
    }

    push_special(&mut token_ids, &mut token_boxes, &mut is_query, &mut doc_token_map, SEP_ID);

    Ok(ModelInput {
        token_ids,
        token_boxes,
        is_query,
        doc_token_map,
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::document::Token;

    fn doc_with(n: usize) -> Document {
        let tokens = (0..n)
            .map(|i| Token {
                text: format!("tok{i}"),
                bbox: BBox::new(
                    (i as u32 % 10) * 60,
                    (i as u32 / 10) * 20,
                    (i as u32 % 10) * 60 + 50,
                    (i as u32 / 10) * 20 + 12,
                )
                .unwrap(),
                index: 0,
            })
            .collect();
        Document::new("d", 700.0, 1000.0, tokens)
    }

    fn tiny_vocab() -> Vocab {
        Vocab::build(["total", "tok0", "tok1"].into_iter(), 100)
    }

    #[test]
    fn structural_layout() {
        let vocab = tiny_vocab();
        let doc = doc_with(2);
        let input = build_model_input(&vocab, "total", &doc, 16).unwrap();
        assert_eq!(input.len(), 6);
        assert_eq!(input.token_ids[0], CLS_ID);
        assert_eq!(input.token_ids[2], SEP_ID);
        assert_eq!(input.token_ids[5], SEP_ID);
        assert_eq!(input.is_query, vec![true, true, true, false, false, true]);
        assert_eq!(
            input.doc_token_map,
            vec![None, None, None, Some(0), Some(1), None]
        );
        assert_eq!(input.doc_positions(), vec![3, 4]);
        assert!(!input.truncated);
        assert_eq!(input.token_boxes[1], BBox::sentinel());
    }

    #[test]
    fn empty_document() {
        let vocab = tiny_vocab();
        let doc = doc_with(0);
        let input = build_model_input(&vocab, "total", &doc, 16).unwrap();
        assert_eq!(input.len(), 4);
        assert!(input.doc_positions().is_empty());
    }

    #[test]
    fn truncation_to_budget() {
        let vocab = tiny_vocab();
        let doc = doc_with(60);
        let input = build_model_input(&vocab, "total", &doc, 32).unwrap();
        assert_eq!(input.len(), 32);
        assert!(input.truncated);
        // Tail tokens drop; the head of the document survives in order.
        assert_eq!(input.doc_token_map[3], Some(0));
        assert_eq!(input.doc_token_map[30], Some(27));
        assert_eq!(*input.token_ids.last().unwrap(), SEP_ID);
    }

    #[test]
    fn query_too_long_is_an_error() {
        let vocab = tiny_vocab();
        let doc = doc_with(1);
        let e = build_model_input(&vocab, "a b c d e", &doc, 7).unwrap_err();
        assert_eq!(e, InputError::QueryTooLong { max: 7, query: 5 });
        assert!(build_model_input(&vocab, "", &doc, 16).is_err());
    }

    #[test]
    fn doc_positions_never_query() {
        let vocab = tiny_vocab();
        let doc = doc_with(5);
        let input = build_model_input(&vocab, "total", &doc, 64).unwrap();
        for p in input.doc_positions() {
            assert!(!input.is_query[p]);
        }
    }

    #[test]
    fn vocab_key_normalization() {
        assert_eq!(vocab_key("Amount:"), "amount");
        assert_eq!(vocab_key("TOTAL"), "total");
        assert_eq!(vocab_key("12.50"), "<num>");
        assert_eq!(vocab_key("$1,234.56"), "<num>");
        assert_eq!(vocab_key("2021-07-14"), "<num>");
        assert_eq!(vocab_key("inv-42a"), "inv-42a");
        assert_eq!(vocab_key("..."), "");
    }

    #[test]
    fn vocab_lookup_and_unk() {
        let vocab = Vocab::build(["Total", "total", "Date"].into_iter(), 100);
        assert_eq!(vocab.id_of("TOTAL:"), vocab.id_of("total"));
        assert_ne!(vocab.id_of("total"), UNK_ID);
        assert_eq!(vocab.id_of("zzzz"), UNK_ID);
        assert_eq!(vocab.id_of("99.95"), NUM_ID);
        assert_eq!(vocab.query_ids("total date").len(), 2);
    }
}
