//! Parsing OCR-output documents and field annotations from JSON.
//!
//! One JSON object per document:
//!
//! ```json
//! { "id": "doc-1",
//!   "page_width": 850.0, "page_height": 1100.0,
//!   "tokens": [ { "text": "TOTAL", "bbox": [10, 20, 60, 34] } ],
//!   "fields": [ { "name": "total", "bbox": [70, 20, 120, 34],
//!                 "values": ["12.50"] } ] }
//! ```
//!
//! Token and field boxes are given in raw page units and are normalized at
//! parse time. A `null` field box encodes an unanswerable query.

use serde_json::{json, Value};
use thiserror::Error;

use crate::document::{extract_region_text, serialize_tokens, Document, Token};
use crate::geometry::{normalize_bbox, BBox, RawBox};

/// A field annotation attached to a document.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub field_name: String,
    /// `None` means the field has no value in this document.
    pub gold_region: Option<BBox>,
    /// Acceptable answer strings; empty iff the query is unanswerable.
    pub gold_texts: Vec<String>,
}

impl Annotation {
    pub fn is_answerable(&self) -> bool {
        self.gold_region.is_some()
    }
}

/// A parsed document together with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedDocument {
    pub document: Document,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Error)]
#[error("{path}: {message}")]
pub struct ParseError {
    /// JSON path of the offending value, e.g. `tokens[3].bbox`.
    pub path: String,
    pub message: String,
}

fn err(path: impl Into<String>, message: impl Into<String>) -> ParseError {
    ParseError {
        path: path.into(),
        message: message.into(),
    }
}

fn get_str<'v>(obj: &'v Value, key: &str, path: &str) -> Result<&'v str, ParseError> {
    obj.get(key)
        .ok_or_else(|| err(format!("{path}.{key}"), "missing field"))?
        .as_str()
        .ok_or_else(|| err(format!("{path}.{key}"), "expected a string"))
}

fn get_num(obj: &Value, key: &str, path: &str) -> Result<f64, ParseError> {
    obj.get(key)
        .ok_or_else(|| err(format!("{path}.{key}"), "missing field"))?
        .as_f64()
        .ok_or_else(|| err(format!("{path}.{key}"), "expected a number"))
}

fn parse_raw_box(v: &Value, path: &str) -> Result<RawBox, ParseError> {
    let arr = v
        .as_array()
        .ok_or_else(|| err(path, "expected [x0, y0, x1, y1]"))?;
    if arr.len() != 4 {
        return Err(err(path, format!("expected 4 coordinates, got {}", arr.len())));
    }
    let mut c = [0f64; 4];
    for (i, item) in arr.iter().enumerate() {
        c[i] = item
            .as_f64()
            .ok_or_else(|| err(format!("{path}[{i}]"), "expected a number"))?;
    }
    Ok(RawBox {
        x0: c[0],
        y0: c[1],
        x1: c[2],
        y1: c[3],
    })
}

/// Parses one document object, normalizing all coordinates and serializing
/// the tokens into reading order.
pub fn parse_document(raw: &Value) -> Result<AnnotatedDocument, ParseError> {
    let obj = raw
        .as_object()
        .ok_or_else(|| err("$", "expected a JSON object"))?;
    let id = get_str(raw, "id", "$")?.to_string();
    let page_width = get_num(raw, "page_width", "$")?;
    let page_height = get_num(raw, "page_height", "$")?;
    if !(page_width.is_finite() && page_height.is_finite()) || page_width <= 0.0 || page_height <= 0.0
    {
        return Err(err("$.page_width", "page dimensions must be positive and finite"));
    }

    let tokens_val = obj
        .get("tokens")
        .ok_or_else(|| err("$.tokens", "missing field"))?
        .as_array()
        .ok_or_else(|| err("$.tokens", "expected an array"))?;

    let mut tokens = Vec::with_capacity(tokens_val.len());
    for (i, tv) in tokens_val.iter().enumerate() {
        let path = format!("tokens[{i}]");
        let text = get_str(tv, "text", &path)?.to_string();
        if text.is_empty() {
            return Err(err(format!("{path}.text"), "token text must be non-empty"));
        }
        let raw_box = parse_raw_box(
            tv.get("bbox")
                .ok_or_else(|| err(format!("{path}.bbox"), "missing field"))?,
            &format!("{path}.bbox"),
        )?;
        let bbox = normalize_bbox(raw_box, page_width, page_height)
            .map_err(|e| err(format!("{path}.bbox"), e.to_string()))?;
        tokens.push(Token {
            text,
            bbox,
            index: 0,
        });
    }

    let document = Document {
        id,
        page_width,
        page_height,
        tokens: serialize_tokens(tokens),
    };

    let mut annotations = Vec::new();
    if let Some(fields_val) = obj.get("fields") {
        let fields = fields_val
            .as_array()
            .ok_or_else(|| err("$.fields", "expected an array"))?;
        for (i, fv) in fields.iter().enumerate() {
            let path = format!("fields[{i}]");
            let field_name = get_str(fv, "name", &path)?.to_string();
            if field_name.trim().is_empty() {
                return Err(err(format!("{path}.name"), "field name must be non-empty"));
            }
            let bbox_val = fv.get("bbox").unwrap_or(&Value::Null);
            let gold_region = if bbox_val.is_null() {
                None
            } else {
                let raw_box = parse_raw_box(bbox_val, &format!("{path}.bbox"))?;
                Some(
                    normalize_bbox(raw_box, page_width, page_height)
                        .map_err(|e| err(format!("{path}.bbox"), e.to_string()))?,
                )
            };
            let mut gold_texts: Vec<String> = match fv.get("values") {
                None | Some(Value::Null) => Vec::new(),
                Some(Value::Array(vals)) => {
                    let mut out = Vec::with_capacity(vals.len());
                    for (j, v) in vals.iter().enumerate() {
                        out.push(
                            v.as_str()
                                .ok_or_else(|| {
                                    err(format!("{path}.values[{j}]"), "expected a string")
                                })?
                                .to_string(),
                        );
                    }
                    out
                }
                Some(_) => return Err(err(format!("{path}.values"), "expected an array")),
            };
            match gold_region {
                Some(region) => {
                    let extracted = extract_region_text(&document, &region);
                    if extracted.is_empty() {
                        return Err(err(
                            format!("{path}.bbox"),
                            "annotated region contains no tokens",
                        ));
                    }
                    if gold_texts.is_empty() {
                        gold_texts.push(extracted);
                    }
                }
                None => {
                    if !gold_texts.is_empty() {
                        return Err(err(
                            format!("{path}.values"),
                            "unanswerable field must not list values",
                        ));
                    }
                }
            }
            annotations.push(Annotation {
                field_name,
                gold_region,
                gold_texts,
            });
        }
    }

    Ok(AnnotatedDocument {
        document,
        annotations,
    })
}

/// Serializes a parsed document back into the on-disk JSON schema.
///
/// Coordinates are written in the document's own page units; for documents
/// whose page dimensions are the normalized space (700x1000), parsing the
/// output reproduces the input exactly.
pub fn document_to_json(doc: &AnnotatedDocument) -> Value {
    let d = &doc.document;
    json!({
        "id": d.id,
        "page_width": d.page_width,
        "page_height": d.page_height,
        "tokens": d.tokens.iter().map(|t| json!({
            "text": t.text,
            "bbox": [t.bbox.x0, t.bbox.y0, t.bbox.x1, t.bbox.y1],
        })).collect::<Vec<_>>(),
        "fields": doc.annotations.iter().map(|a| json!({
            "name": a.field_name,
            "bbox": a.gold_region.map(|b| json!([b.x0, b.y0, b.x1, b.y1])).unwrap_or(Value::Null),
            "values": a.gold_texts,
        })).collect::<Vec<_>>(),
    })
}
