//! Documents as reading-ordered token sequences.

use serde::{Deserialize, Serialize};

use crate::geometry::{token_in_region, BBox};

/// Default line-grouping tolerance for serialization, in normalized y units.
/// Tokens whose centers differ by at most this much (transitively) share a
/// line; 5 units absorbs OCR jitter while keeping 10-unit-tall lines apart.
pub const DEFAULT_LINE_TOLERANCE: f64 = 5.0;

/// A word-level token with its normalized box and position in reading order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub bbox: BBox,
    pub index: usize,
}

/// A single-page document whose tokens are sorted in reading order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub page_width: f64,
    pub page_height: f64,
    pub tokens: Vec<Token>,
}

impl Document {
    /// Builds a document, serializing the tokens into reading order and
    /// reassigning indices.
    pub fn new(id: impl Into<String>, page_width: f64, page_height: f64, tokens: Vec<Token>) -> Self {
        Document {
            id: id.into(),
            page_width,
            page_height,
            tokens: serialize_tokens(tokens),
        }
    }

    /// Tight bounding box of all tokens, if any.
    pub fn hull(&self) -> Option<BBox> {
        let first = self.tokens.first()?.bbox;
        let mut hull = first;
        for t in &self.tokens[1..] {
            hull.x0 = hull.x0.min(t.bbox.x0);
            hull.y0 = hull.y0.min(t.bbox.y0);
            hull.x1 = hull.x1.max(t.bbox.x1);
            hull.y1 = hull.y1.max(t.bbox.y1);
        }
        Some(hull)
    }
}

/// Sorts tokens left-to-right, top-to-bottom and reassigns indices `0..n`.
///
/// Tokens are first clustered into lines: two tokens share a line when their
/// center `y` coordinates differ by at most `line_tolerance`, applied
/// transitively. Lines are ordered by mean center `y`; within a line tokens
/// are ordered by `x0`, then `y0`, then original input order.
pub fn serialize_tokens_with_tolerance(tokens: Vec<Token>, line_tolerance: f64) -> Vec<Token> {
    if tokens.is_empty() {
        return tokens;
    }
    // Sweep in cy order; a gap larger than the tolerance starts a new line.
    // Because clustering is 1D and transitive, consecutive-gap grouping is
    // exactly the transitive closure.
    let mut order: Vec<usize> = (0..tokens.len()).collect();
    order.sort_by(|&a, &b| {
        tokens[a]
            .bbox
            .center()
            .cy
            .total_cmp(&tokens[b].bbox.center().cy)
            .then(a.cmp(&b))
    });

    let mut lines: Vec<Vec<usize>> = Vec::new();
    let mut prev_cy = f64::NEG_INFINITY;
    for &i in &order {
        let cy = tokens[i].bbox.center().cy;
        if lines.is_empty() || cy - prev_cy > line_tolerance {
            lines.push(Vec::new());
        }
        lines.last_mut().unwrap().push(i);
        prev_cy = cy;
    }

    // Lines come out in ascending cy already; order within each line.
    for line in &mut lines {
        line.sort_by(|&a, &b| {
            let ta = &tokens[a];
            let tb = &tokens[b];
            ta.bbox
                .x0
                .cmp(&tb.bbox.x0)
                .then(ta.bbox.y0.cmp(&tb.bbox.y0))
                .then(a.cmp(&b))
        });
    }

    let mut by_index: Vec<Option<Token>> = tokens.into_iter().map(Some).collect();
    let mut out = Vec::with_capacity(by_index.len());
    for line in lines {
        for i in line {
            let mut t = by_index[i].take().unwrap();
            t.index = out.len();
            out.push(t);
        }
    }
    out
}

/// [`serialize_tokens_with_tolerance`] with the default tolerance.
pub fn serialize_tokens(tokens: Vec<Token>) -> Vec<Token> {
    serialize_tokens_with_tolerance(tokens, DEFAULT_LINE_TOLERANCE)
}

/// Tokens of `doc` fully inside `region`, in reading order.
pub fn tokens_in_region<'d>(doc: &'d Document, region: &BBox) -> Vec<&'d Token> {
    doc.tokens
        .iter()
        .filter(|t| token_in_region(&t.bbox, region))
        .collect()
}

/// Concatenates the text of all tokens inside `region`, reading order,
/// space separated. Empty string when the region covers no token.
pub fn extract_region_text(doc: &Document, region: &BBox) -> String {
    let parts: Vec<&str> = tokens_in_region(doc, region)
        .iter()
        .map(|t| t.text.as_str())
        .collect();
    parts.join(" ")
}
