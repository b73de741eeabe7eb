//! Synthetic form-style document generator.
//!
//! Produces single-page documents laid out directly in the normalized
//! 700x1000 page space: a title line, a grid of label/value pairs, and
//! optionally a table block whose columns are annotated as column fields.
//! Every annotation's gold region is the tight bounding box of its value
//! tokens. Generation is a pure function of the seed; each document derives
//! its own child seed so documents can be generated independently.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::geometry::{PAGE_HEIGHT_UNITS, PAGE_WIDTH_UNITS};
use crate::ingest::{parse_document, AnnotatedDocument};

/// Configuration for synthetic corpus generation.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub num_documents: usize,
    /// Inclusive range of annotation slots per document.
    pub fields_per_doc: (usize, usize),
    /// Probability that a document contains a table block.
    pub table_probability: f64,
    /// Probability that an annotation slot is an absent field.
    pub unanswerable_rate: f64,
    /// Vocabulary seed lists.
    pub title_words: Vec<String>,
    pub name_words: Vec<String>,
    pub description_words: Vec<String>,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect();
        SynthConfig {
            num_documents: 32,
            fields_per_doc: (3, 5),
            table_probability: 0.5,
            unanswerable_rate: 0.15,
            title_words: s(&[
                "Apex", "Global", "Crown", "Harbor", "Summit", "Vertex", "Pioneer", "Sterling",
            ]),
            name_words: s(&[
                "Acme", "Baxter", "Delta", "Ember", "Falcon", "Granite", "Juniper", "Kestrel",
                "Marlow", "Norfolk", "Orchid", "Pascal",
            ]),
            description_words: s(&[
                "bolts", "gears", "pumps", "seals", "hoses", "belts", "filter", "gasket",
                "spring", "clutch", "sensor", "widget", "bearing", "coupler", "spindle",
                "fitting", "brackets", "manifold", "actuator", "cartridge",
            ]),
            rng_seed: 42,
        }
    }
}

impl SynthConfig {
    fn validate(&self) {
        assert!(self.num_documents > 0, "num_documents must be positive");
        assert!(
            self.fields_per_doc.0 >= 1 && self.fields_per_doc.0 <= self.fields_per_doc.1,
            "fields_per_doc range must be non-empty"
        );
        assert!(
            (0.0..=1.0).contains(&self.table_probability),
            "table_probability must be in [0, 1]"
        );
        assert!(
            (0.0..=1.0).contains(&self.unanswerable_rate),
            "unanswerable_rate must be in [0, 1]"
        );
        assert!(!self.title_words.is_empty(), "title_words must be non-empty");
        assert!(!self.name_words.is_empty(), "name_words must be non-empty");
        assert!(
            !self.description_words.is_empty(),
            "description_words must be non-empty"
        );
    }
}

/// A generated corpus split 7:1:2 into train, dev and test.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub train: Vec<AnnotatedDocument>,
    pub dev: Vec<AnnotatedDocument>,
    pub test: Vec<AnnotatedDocument>,
}

impl SynthCorpus {
    pub fn split(&self, name: &str) -> Option<&[AnnotatedDocument]> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

const CHAR_W: u32 = 7;
const LINE_H: u32 = 12;

/// Key-value field kinds available to the generator.
#[derive(Debug, Clone, Copy, PartialEq)]
enum ValueKind {
    Amount,
    Date,
    Code(&'static str),
    Name,
    AccountDigits,
}

struct FieldKind {
    name: &'static str,
    label: &'static [&'static str],
    value: ValueKind,
}

const FIELD_CATALOG: &[FieldKind] = &[
    FieldKind { name: "invoice number", label: &["Invoice", "Number:"], value: ValueKind::Code("INV") },
    FieldKind { name: "order id", label: &["Order", "Id:"], value: ValueKind::Code("ORD") },
    FieldKind { name: "reference", label: &["Reference:"], value: ValueKind::Code("REF") },
    FieldKind { name: "issue date", label: &["Issue", "Date:"], value: ValueKind::Date },
    FieldKind { name: "due date", label: &["Due", "Date:"], value: ValueKind::Date },
    FieldKind { name: "total amount", label: &["Total", "Amount:"], value: ValueKind::Amount },
    FieldKind { name: "subtotal", label: &["Subtotal:"], value: ValueKind::Amount },
    FieldKind { name: "tax", label: &["Tax:"], value: ValueKind::Amount },
    FieldKind { name: "balance", label: &["Balance:"], value: ValueKind::Amount },
    FieldKind { name: "vendor name", label: &["Vendor:"], value: ValueKind::Name },
    FieldKind { name: "customer name", label: &["Customer:"], value: ValueKind::Name },
    FieldKind { name: "account number", label: &["Account", "Number:"], value: ValueKind::AccountDigits },
];

#[derive(Debug, Clone, Copy, PartialEq)]
enum CellKind {
    Code,
    Qty,
    Price,
    Word,
}

struct ColumnKind {
    name: &'static str,
    header: &'static str,
    cell: CellKind,
}

const COLUMN_CATALOG: &[ColumnKind] = &[
    ColumnKind { name: "product code", header: "Code", cell: CellKind::Code },
    ColumnKind { name: "quantity", header: "Qty", cell: CellKind::Qty },
    ColumnKind { name: "unit price", header: "Price", cell: CellKind::Price },
    ColumnKind { name: "product description", header: "Description", cell: CellKind::Word },
];

/// Token being laid out, in normalized page units.
struct RawToken {
    text: String,
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

struct PendingAnnotation {
    name: String,
    bbox: Option<(u32, u32, u32, u32)>,
}

fn word_width(text: &str) -> u32 {
    text.chars().count() as u32 * CHAR_W
}

fn gen_value(kind: ValueKind, rng: &mut ChaCha8Rng, names: &[String]) -> Vec<String> {
    match kind {
        ValueKind::Amount => {
            let cents: u64 = rng.gen_range(100..10_000_000);
            let whole = cents / 100;
            let frac = cents % 100;
            let mut digits = whole.to_string();
            let mut grouped = String::new();
            while digits.len() > 3 {
                let split = digits.len() - 3;
                grouped = format!(",{}{}", &digits[split..], grouped);
                digits.truncate(split);
            }
            vec![format!("${digits}{grouped}.{frac:02}")]
        }
        ValueKind::Date => {
            let y = rng.gen_range(2018..=2024);
            let m = rng.gen_range(1..=12);
            let d = rng.gen_range(1..=28);
            vec![format!("{y}-{m:02}-{d:02}")]
        }
        ValueKind::Code(prefix) => vec![format!("{prefix}-{:05}", rng.gen_range(0..100_000u32))],
        ValueKind::Name => {
            let first = names.choose(rng).unwrap().clone();
            let suffix = ["Corp", "Ltd", "Inc", "LLC"].choose(rng).unwrap();
            vec![first, suffix.to_string()]
        }
        ValueKind::AccountDigits => {
            vec![format!(
                "{:04}-{:04}",
                rng.gen_range(0..10_000u32),
                rng.gen_range(0..10_000u32)
            )]
        }
    }
}

/// Lays out a line of words starting at `x`, returning the token list added.
fn push_line(tokens: &mut Vec<RawToken>, words: &[String], mut x: u32, y: u32, rng: &mut ChaCha8Rng) -> (u32, u32) {
    let start = x;
    for w in words {
        let width = word_width(w);
        tokens.push(RawToken {
            text: w.clone(),
            x0: x,
            y0: y,
            x1: x + width,
            y1: y + LINE_H,
        });
        x += width + 6 + rng.gen_range(0..4);
    }
    (start, x)
}

fn generate_document(cfg: &SynthConfig, index: usize, id: String) -> AnnotatedDocument {
    let child_seed = cfg
        .rng_seed
        .wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed);

    let slots = rng.gen_range(cfg.fields_per_doc.0..=cfg.fields_per_doc.1);
    let has_table = rng.gen_bool(cfg.table_probability);
    let all_absent = cfg.unanswerable_rate >= 1.0;

    // Decide slot kinds. When a table is present the first slot is a column
    // annotation (answerable unless the rate forces every slot absent); the
    // remaining slots flip absent independently.
    let column_slot = has_table && !all_absent;
    let kv_slots = if column_slot { slots.saturating_sub(1) } else { slots };
    let mut kv_answerable = 0usize;
    let mut kv_absent = 0usize;
    for _ in 0..kv_slots {
        if rng.gen_bool(cfg.unanswerable_rate) {
            kv_absent += 1;
        } else {
            kv_answerable += 1;
        }
    }
    // Pick distinct field kinds: answerable ones are placed in the document,
    // absent ones must stay out of it; distractors are placed but not
    // annotated.
    let mut kind_order: Vec<usize> = (0..FIELD_CATALOG.len()).collect();
    kind_order.shuffle(&mut rng);
    let kv_answerable = kv_answerable.min(FIELD_CATALOG.len().saturating_sub(kv_absent));
    let answerable_kinds: Vec<usize> = kind_order[..kv_answerable].to_vec();
    let absent_kinds: Vec<usize> =
        kind_order[kv_answerable..kv_answerable + kv_absent.min(kind_order.len() - kv_answerable)].to_vec();
    let n_distractors = rng
        .gen_range(0..=2)
        .min(kind_order.len() - kv_answerable - absent_kinds.len());
    let distractor_kinds: Vec<usize> = kind_order
        [kv_answerable + absent_kinds.len()..kv_answerable + absent_kinds.len() + n_distractors]
        .to_vec();

    let mut tokens: Vec<RawToken> = Vec::new();
    let mut annotations: Vec<PendingAnnotation> = Vec::new();

    // Title line.
    let mut title: Vec<String> = (0..2)
        .map(|_| cfg.title_words.choose(&mut rng).unwrap().clone())
        .collect();
    title.push(["Invoice", "Statement", "Receipt"].choose(&mut rng).unwrap().to_string());
    push_line(&mut tokens, &title, 40, 20 + rng.gen_range(0..6), &mut rng);

    // Key-value grid: two columns, rows every 44 units.
    let mut placed: Vec<usize> = answerable_kinds.clone();
    placed.extend(&distractor_kinds);
    placed.shuffle(&mut rng);
    for (slot, &kind_idx) in placed.iter().enumerate() {
        let kind = &FIELD_CATALOG[kind_idx];
        let col = slot % 2;
        let row = slot / 2;
        let base_x = if col == 0 { 40 } else { 380 };
        let x = base_x + rng.gen_range(0..10);
        let y = 70 + (row as u32) * 44 + rng.gen_range(0..6);
        let label: Vec<String> = kind.label.iter().map(|s| s.to_string()).collect();
        let (_, after_label) = push_line(&mut tokens, &label, x, y, &mut rng);
        let value = gen_value(kind.value, &mut rng, &cfg.name_words);
        let n_before = tokens.len();
        push_line(&mut tokens, &value, after_label + 4, y, &mut rng);
        if answerable_kinds.contains(&kind_idx) {
            let vx0 = tokens[n_before].x0;
            let vx1 = tokens.last().unwrap().x1;
            annotations.push(PendingAnnotation {
                name: kind.name.to_string(),
                bbox: Some((vx0, y, vx1, y + LINE_H)),
            });
        }
    }

    // Table block.
    if has_table {
        let mut col_order: Vec<usize> = (0..COLUMN_CATALOG.len()).collect();
        col_order.shuffle(&mut rng);
        let n_cols = 3.min(col_order.len());
        let cols = &col_order[..n_cols];
        let n_rows = rng.gen_range(3..=5usize);
        // Clear the key-value grid entirely before starting the table.
        let kv_rows = (placed.len() + 1) / 2;
        let table_y = 70 + 44 * (kv_rows as u32) + 30 + rng.gen_range(0..8);
        let col_x = [60u32, 260, 460];
        // Per-document fixed word length keeps every cell in a word column
        // the same width.
        let word_len = cfg.description_words.choose(&mut rng).unwrap().chars().count();
        let word_pool: Vec<&String> = cfg
            .description_words
            .iter()
            .filter(|w| w.chars().count() == word_len)
            .collect();

        // Header row.
        for (ci, &col_idx) in cols.iter().enumerate() {
            let header = COLUMN_CATALOG[col_idx].header.to_string();
            push_line(&mut tokens, &[header], col_x[ci], table_y, &mut rng);
        }

        // Data rows; cells are left-aligned per column with uniform width.
        let mut col_cells: Vec<Vec<usize>> = vec![Vec::new(); n_cols];
        for r in 0..n_rows {
            let y = table_y + 26 * (r as u32 + 1) + rng.gen_range(0..3);
            for (ci, &col_idx) in cols.iter().enumerate() {
                let text = match COLUMN_CATALOG[col_idx].cell {
                    CellKind::Code => format!(
                        "{}{}-{:04}",
                        char::from(b'A' + rng.gen_range(0..26u8)),
                        char::from(b'A' + rng.gen_range(0..26u8)),
                        rng.gen_range(0..10_000u32)
                    ),
                    CellKind::Qty => format!("{}", rng.gen_range(10..100u32)),
                    CellKind::Price => format!("{}.{:02}", rng.gen_range(100..1000u32), rng.gen_range(0..100u32)),
                    CellKind::Word => (*word_pool.choose(&mut rng).unwrap()).clone(),
                };
                let width = word_width(&text);
                col_cells[ci].push(tokens.len());
                tokens.push(RawToken {
                    text,
                    x0: col_x[ci],
                    y0: y,
                    x1: col_x[ci] + width,
                    y1: y + LINE_H,
                });
            }
        }

        if column_slot {
            let ci = rng.gen_range(0..n_cols);
            let cells = &col_cells[ci];
            let x0 = cells.iter().map(|&t| tokens[t].x0).min().unwrap();
            let x1 = cells.iter().map(|&t| tokens[t].x1).max().unwrap();
            let y0 = cells.iter().map(|&t| tokens[t].y0).min().unwrap();
            let y1 = cells.iter().map(|&t| tokens[t].y1).max().unwrap();
            annotations.push(PendingAnnotation {
                name: COLUMN_CATALOG[cols[ci]].name.to_string(),
                bbox: Some((x0, y0, x1, y1)),
            });
        }
    }

    for &kind_idx in &absent_kinds {
        annotations.push(PendingAnnotation {
            name: FIELD_CATALOG[kind_idx].name.to_string(),
            bbox: None,
        });
    }

    // Assemble the schema JSON and parse it back through the ingestion path,
    // which normalizes, validates and computes gold texts.
    let value = json!({
        "id": id,
        "page_width": f64::from(PAGE_WIDTH_UNITS),
        "page_height": f64::from(PAGE_HEIGHT_UNITS),
        "tokens": tokens.iter().map(|t| json!({
            "text": t.text,
            "bbox": [t.x0, t.y0, t.x1, t.y1],
        })).collect::<Vec<Value>>(),
        "fields": annotations.iter().map(|a| json!({
            "name": a.name,
            "bbox": a.bbox.map(|(x0, y0, x1, y1)| json!([x0, y0, x1, y1])).unwrap_or(Value::Null),
        })).collect::<Vec<Value>>(),
    });
    parse_document(&value).expect("generated document must parse")
}

/// Generates a corpus of `num_documents` documents split 7:1:2.
pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> SynthCorpus {
    cfg.validate();
    let n = cfg.num_documents;
    let n_train = n * 7 / 10;
    let n_dev = n / 10;

    let docs: Vec<AnnotatedDocument> = (0..n)
        .map(|i| {
            let split = if i < n_train {
                "train"
            } else if i < n_train + n_dev {
                "dev"
            } else {
                "test"
            };
            generate_document(cfg, i, format!("{split}-{i:05}"))
        })
        .collect();

    let mut iter = docs.into_iter();
    let train: Vec<_> = iter.by_ref().take(n_train).collect();
    let dev: Vec<_> = iter.by_ref().take(n_dev).collect();
    let test: Vec<_> = iter.collect();
    SynthCorpus { train, dev, test }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::document::extract_region_text;
    use crate::geometry::token_in_region;
    use crate::ingest::document_to_json;

    #[test]
    fn deterministic_given_seed() {
        let cfg = SynthConfig {
            num_documents: 10,
            ..SynthConfig::default()
        };
        let a = generate_synthetic_corpus(&cfg);
        let b = generate_synthetic_corpus(&cfg);
        assert_eq!(a.train.len(), 7);
        assert_eq!(a.dev.len(), 1);
        assert_eq!(a.test.len(), 2);
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x, y);
            // Byte-identical serialized form.
            assert_eq!(
                serde_json::to_string(&document_to_json(x)).unwrap(),
                serde_json::to_string(&document_to_json(y)).unwrap()
            );
        }
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn unanswerable_rate_one_means_all_absent() {
        let cfg = SynthConfig {
            num_documents: 12,
            unanswerable_rate: 1.0,
            table_probability: 0.5,
            ..SynthConfig::default()
        };
        let corpus = generate_synthetic_corpus(&cfg);
        for doc in corpus.train.iter().chain(&corpus.dev).chain(&corpus.test) {
            assert!(!doc.annotations.is_empty());
            for a in &doc.annotations {
                assert!(a.gold_region.is_none());
                assert!(a.gold_texts.is_empty());
            }
        }
    }

    #[test]
    fn gold_regions_are_self_consistent() {
        let cfg = SynthConfig {
            num_documents: 20,
            table_probability: 1.0,
            unanswerable_rate: 0.2,
            ..SynthConfig::default()
        };
        let corpus = generate_synthetic_corpus(&cfg);
        let mut answerable = 0;
        for doc in corpus.train.iter().chain(&corpus.dev).chain(&corpus.test) {
            for a in &doc.annotations {
                if let Some(region) = a.gold_region {
                    answerable += 1;
                    let text = extract_region_text(&doc.document, &region);
                    assert_eq!(text, a.gold_texts[0]);
                    assert!(!text.is_empty());
                    let inside = doc
                        .document
                        .tokens
                        .iter()
                        .filter(|t| token_in_region(&t.bbox, &region))
                        .count();
                    assert!(inside >= 1);
                }
            }
        }
        assert!(answerable > 0);
    }

    #[test]
    fn tables_yield_multiline_column_fields() {
        let cfg = SynthConfig {
            num_documents: 10,
            table_probability: 1.0,
            unanswerable_rate: 0.0,
            ..SynthConfig::default()
        };
        let corpus = generate_synthetic_corpus(&cfg);
        for doc in corpus.train.iter().chain(&corpus.dev).chain(&corpus.test) {
            let col = doc
                .annotations
                .iter()
                .find(|a| COLUMN_CATALOG.iter().any(|c| c.name == a.field_name))
                .expect("every table document carries a column annotation");
            let region = col.gold_region.unwrap();
            // Column regions span several lines.
            assert!(region.y1 - region.y0 > 26);
            assert!(col.gold_texts[0].split(' ').count() >= 3);
        }
    }

    #[test]
    fn no_label_tokens_inside_gold_regions() {
        let cfg = SynthConfig {
            num_documents: 16,
            table_probability: 0.7,
            unanswerable_rate: 0.1,
            ..SynthConfig::default()
        };
        let corpus = generate_synthetic_corpus(&cfg);
        let label_texts: Vec<&str> = FIELD_CATALOG.iter().flat_map(|k| k.label.iter().copied()).collect();
        for doc in corpus.train.iter().chain(&corpus.dev).chain(&corpus.test) {
            for a in &doc.annotations {
                if let Some(region) = a.gold_region {
                    for t in &doc.document.tokens {
                        if token_in_region(&t.bbox, &region) {
                            assert!(
                                !label_texts.contains(&t.text.as_str()),
                                "label token {:?} leaked into gold region of {} in {}",
                                t.text,
                                a.field_name,
                                doc.document.id
                            );
                        }
                    }
                }
            }
        }
    }
}
