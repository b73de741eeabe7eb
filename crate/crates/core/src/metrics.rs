//! Answer scoring (exact match and numeracy-focused F1), corpus evaluation
//! reports, and the boundary-probability-product baseline decoder.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::document::extract_region_text;
use crate::geometry::{region_from_boundary_boxes, BBox};
use crate::heads::compute_proposal_logits;
use crate::ingest::AnnotatedDocument;
use crate::model::{predict, ModelError, Prediction, RduModel};
use crate::scalar::Scalar;

/// Normalizes an answer string: lowercase, whitespace collapsed, leading and
/// trailing punctuation stripped per token. Articles are kept: form values
/// are entities and amounts.
pub fn normalize_answer(s: &str) -> Vec<String> {
    s.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// Whether a normalized token is numeric: optional sign, digits, optional
/// single decimal point, with commas and currency signs stripped first.
/// Dates (digit groups joined by `-` or `/`) are not numbers.
fn numeric_value(token: &str) -> Option<String> {
    let cleaned: String = token
        .chars()
        .filter(|&c| !matches!(c, ',' | '$' | '€' | '£'))
        .collect();
    let body = cleaned.strip_prefix(['+', '-']).unwrap_or(&cleaned);
    if body.is_empty() {
        return None;
    }
    let mut seen_dot = false;
    let mut seen_digit = false;
    for c in body.chars() {
        match c {
            '0'..='9' => seen_digit = true,
            '.' if !seen_dot => seen_dot = true,
            _ => return None,
        }
    }
    if !seen_digit {
        return None;
    }
    Some(cleaned)
}

fn numeric_multiset(tokens: &[String]) -> HashMap<String, usize> {
    let mut out = HashMap::new();
    for t in tokens {
        if let Some(v) = numeric_value(t) {
            *out.entry(v).or_insert(0) += 1;
        }
    }
    out
}

/// Exact match: 1 iff the normalized prediction equals any normalized gold.
/// With no golds (an unanswerable item) an empty prediction counts as match.
pub fn exact_match(prediction: &str, golds: &[String]) -> u8 {
    let pred = normalize_answer(prediction);
    if golds.is_empty() {
        return u8::from(pred.is_empty());
    }
    for g in golds {
        if pred == normalize_answer(g) {
            return 1;
        }
    }
    0
}

fn bag_f1(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut gold_counts: HashMap<&str, usize> = HashMap::new();
    for g in gold {
        *gold_counts.entry(g.as_str()).or_insert(0) += 1;
    }
    let mut common = 0usize;
    for p in pred {
        if let Some(c) = gold_counts.get_mut(p.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Bag-of-words F1 with the numeracy rule: any mismatch between the numeric
/// token multisets of prediction and gold forces a 0 for that gold. The
/// final score is the maximum over gold answers.
pub fn numeracy_f1(prediction: &str, golds: &[String]) -> f64 {
    let pred = normalize_answer(prediction);
    if golds.is_empty() {
        return if pred.is_empty() { 1.0 } else { 0.0 };
    }
    let pred_nums = numeric_multiset(&pred);
    golds
        .iter()
        .map(|g| {
            let gold = normalize_answer(g);
            if numeric_multiset(&gold) != pred_nums {
                return 0.0;
            }
            bag_f1(&pred, &gold)
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("boundary probability vectors must cover at least one position")]
    Empty,
    #[error("probability/box lengths differ")]
    LengthMismatch,
    #[error("no valid region among the scored combinations")]
    NoValidRegion,
}

/// Vanilla boundary decoding: scores each (left, top, right, bottom) position
/// tuple by the product of its four boundary probabilities, restricted to the
/// top `m` positions per coordinate, and returns the best valid region. Ties
/// break by lexicographic position-index order.
pub fn baseline_decode(
    boundary_probs: &[Vec<f64>; 4],
    boxes: &[BBox],
    top_m: usize,
) -> Result<BBox, BaselineError> {
    let n = boxes.len();
    if n == 0 {
        return Err(BaselineError::Empty);
    }
    if boundary_probs.iter().any(|p| p.len() != n) {
        return Err(BaselineError::LengthMismatch);
    }
    let m = top_m.max(1).min(n);
    let top = |probs: &Vec<f64>| -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        order.truncate(m);
        order
    };
    let (tl, tt, tr, tb) = (
        top(&boundary_probs[0]),
        top(&boundary_probs[1]),
        top(&boundary_probs[2]),
        top(&boundary_probs[3]),
    );

    let mut best: Option<(f64, (usize, usize, usize, usize), BBox)> = None;
    for &l in &tl {
        for &t in &tt {
            for &r in &tr {
                for &b in &tb {
                    let region = region_from_boundary_boxes(&boxes[l], &boxes[t], &boxes[r], &boxes[b]);
                    let Some(bbox) = region.bbox() else { continue };
                    let score = boundary_probs[0][l]
                        * boundary_probs[1][t]
                        * boundary_probs[2][r]
                        * boundary_probs[3][b];
                    let key = (l, t, r, b);
                    let replace = match &best {
                        None => true,
                        Some((s, k, _)) => score > *s || (score == *s && key < *k),
                    };
                    if replace {
                        best = Some((score, key, bbox));
                    }
                }
            }
        }
    }
    best.map(|(_, _, b)| b).ok_or(BaselineError::NoValidRegion)
}

/// Number of candidate positions per coordinate used by the baseline.
pub const BASELINE_DEFAULT_TOP_M: usize = 10;

/// Baseline inference: same answerability gate, then boundary-product
/// decoding over the last hidden state's boundary distributions.
pub fn baseline_predict<S: Scalar>(
    model: &RduModel<S>,
    doc: &crate::document::Document,
    field_name: &str,
    top_m: usize,
) -> Result<Prediction, ModelError> {
    let input = model.build_input(field_name, doc)?;
    let states = model.encode(&input)?;
    let ans_prob =
        crate::heads::answerable(&model.store, &model.head_params, states.last().row(0))
            .to_f64_lossy();
    if ans_prob < 0.5 {
        return Ok(Prediction {
            answerable_prob: ans_prob,
            region: None,
            text: String::new(),
            score: 0.0,
            no_valid_proposals: false,
        });
    }
    let doc_positions = input.doc_positions();
    if doc_positions.is_empty() {
        return Ok(Prediction {
            answerable_prob: ans_prob,
            region: None,
            text: String::new(),
            score: 0.0,
            no_valid_proposals: true,
        });
    }
    let logits = compute_proposal_logits(&model.store, &model.head_params, &states, &input);
    let last = logits.per_layer.last().expect("three source layers");
    let to_probs = |l: &[S]| -> Vec<f64> {
        let mut v: Vec<f64> = l.iter().map(|x| x.to_f64_lossy()).collect();
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in v.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in v.iter_mut() {
            *x /= sum;
        }
        v
    };
    let probs = [
        to_probs(&last.x0),
        to_probs(&last.y0),
        to_probs(&last.x1),
        to_probs(&last.y1),
    ];
    let boxes: Vec<BBox> = doc_positions.iter().map(|&p| input.token_boxes[p]).collect();
    match baseline_decode(&probs, &boxes, top_m) {
        Ok(region) => Ok(Prediction {
            answerable_prob: ans_prob,
            region: Some(region),
            text: extract_region_text(doc, &region),
            score: 0.0,
            no_valid_proposals: false,
        }),
        Err(BaselineError::NoValidRegion) => Ok(Prediction {
            answerable_prob: ans_prob,
            region: None,
            text: String::new(),
            score: 0.0,
            no_valid_proposals: true,
        }),
        Err(e) => panic!("baseline decode invariant violated: {e}"),
    }
}

/// One field's aggregate scores (percent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldRow {
    pub field_name: String,
    pub em: f64,
    pub f1: f64,
    pub support: usize,
}

/// Corpus-level evaluation report; all scores are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<FieldRow>,
    pub micro_em: f64,
    pub micro_f1: f64,
    pub macro_em: f64,
    pub macro_f1: f64,
    /// Share of gold-unanswerable examples predicted unanswerable; absent
    /// when the split has none.
    pub unanswerable_accuracy: Option<f64>,
    pub support: usize,
}

impl EvalReport {
    /// Aligned-column table for humans.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let name_w = self
            .rows
            .iter()
            .map(|r| r.field_name.len())
            .chain(["field".len()])
            .max()
            .unwrap_or(5);
        out.push_str(&format!(
            "{:<name_w$}  {:>7}  {:>7}  {:>7}\n",
            "field", "em", "f1", "support"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<name_w$}  {:>7.2}  {:>7.2}  {:>7}\n",
                r.field_name, r.em, r.f1, r.support
            ));
        }
        out.push_str(&format!(
            "{:<name_w$}  {:>7.2}  {:>7.2}  {:>7}\n",
            "micro", self.micro_em, self.micro_f1, self.support
        ));
        out.push_str(&format!(
            "{:<name_w$}  {:>7.2}  {:>7.2}\n",
            "macro", self.macro_em, self.macro_f1
        ));
        if let Some(u) = self.unanswerable_accuracy {
            out.push_str(&format!("unanswerable accuracy: {:.2}%\n", u * 100.0));
        }
        out
    }
}

/// Scores a predictor over every (document, field) pair of a split.
/// The reduction order is fixed by the split's document order, so reports
/// are deterministic regardless of evaluation parallelism.
pub fn evaluate_with<F>(docs: &[AnnotatedDocument], predictor: F) -> EvalReport
where
    F: Fn(&AnnotatedDocument, &str) -> Prediction + Sync,
{
    struct Scored {
        field: String,
        em: u8,
        f1: f64,
        gold_unanswerable: bool,
        predicted_unanswerable: bool,
    }

    let scored: Vec<Scored> = docs
        .par_iter()
        .flat_map_iter(|doc| {
            doc.annotations.iter().map(move |ann| {
                let pred = predictor(doc, &ann.field_name);
                Scored {
                    field: ann.field_name.clone(),
                    em: exact_match(&pred.text, &ann.gold_texts),
                    f1: numeracy_f1(&pred.text, &ann.gold_texts),
                    gold_unanswerable: !ann.is_answerable(),
                    predicted_unanswerable: pred.region.is_none(),
                }
            })
        })
        .collect();

    let mut by_field: Vec<(String, Vec<&Scored>)> = Vec::new();
    for s in &scored {
        match by_field.iter_mut().find(|(name, _)| *name == s.field) {
            Some((_, v)) => v.push(s),
            None => by_field.push((s.field.clone(), vec![s])),
        }
    }
    by_field.sort_by(|a, b| a.0.cmp(&b.0));

    let rows: Vec<FieldRow> = by_field
        .iter()
        .map(|(name, items)| {
            let n = items.len() as f64;
            FieldRow {
                field_name: name.clone(),
                em: items.iter().map(|s| s.em as f64).sum::<f64>() / n * 100.0,
                f1: items.iter().map(|s| s.f1).sum::<f64>() / n * 100.0,
                support: items.len(),
            }
        })
        .collect();

    let support = scored.len();
    let micro_em = if support == 0 {
        0.0
    } else {
        scored.iter().map(|s| s.em as f64).sum::<f64>() / support as f64 * 100.0
    };
    let micro_f1 = if support == 0 {
        0.0
    } else {
        scored.iter().map(|s| s.f1).sum::<f64>() / support as f64 * 100.0
    };
    let macro_em = if rows.is_empty() {
        0.0
    } else {
        rows.iter().map(|r| r.em).sum::<f64>() / rows.len() as f64
    };
    let macro_f1 = if rows.is_empty() {
        0.0
    } else {
        rows.iter().map(|r| r.f1).sum::<f64>() / rows.len() as f64
    };
    let unanswerable: Vec<&Scored> = scored.iter().filter(|s| s.gold_unanswerable).collect();
    let unanswerable_accuracy = if unanswerable.is_empty() {
        None
    } else {
        Some(
            unanswerable.iter().filter(|s| s.predicted_unanswerable).count() as f64
                / unanswerable.len() as f64,
        )
    };

    EvalReport {
        rows,
        micro_em,
        micro_f1,
        macro_em,
        macro_f1,
        unanswerable_accuracy,
        support,
    }
}

/// Evaluates the full region-prediction pipeline of a model.
pub fn evaluate_model<S: Scalar>(model: &RduModel<S>, docs: &[AnnotatedDocument]) -> EvalReport {
    evaluate_with(docs, |doc, field| {
        predict(model, &doc.document, field).unwrap_or_else(|e| {
            panic!("prediction failed for doc {} field {field}: {e}", doc.document.id)
        })
    })
}

/// Evaluates the boundary-product baseline sharing the model's encoder.
pub fn evaluate_baseline<S: Scalar>(model: &RduModel<S>, docs: &[AnnotatedDocument]) -> EvalReport {
    evaluate_with(docs, |doc, field| {
        baseline_predict(model, &doc.document, field, BASELINE_DEFAULT_TOP_M).unwrap_or_else(|e| {
            panic!("baseline failed for doc {} field {field}: {e}", doc.document.id)
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn golds(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match("12.50", &golds(&["12.50"])), 1);
        assert_eq!(exact_match("Acme  Corp", &golds(&["acme corp"])), 1);
        assert_eq!(exact_match("12.50", &golds(&["13.50"])), 0);
        assert_eq!(exact_match("", &[]), 1);
        assert_eq!(exact_match("something", &[]), 0);
    }

    #[test]
    fn numeracy_f1_examples() {
        // Number mismatch forces zero despite word overlap.
        assert_eq!(numeracy_f1("total 12.50", &golds(&["total 13.50"])), 0.0);
        let f1 = numeracy_f1("acme corp ltd", &golds(&["acme corp"]));
        assert!((f1 - 0.8).abs() < 1e-12);
        assert_eq!(numeracy_f1("total 12.50", &golds(&["total 12.50"])), 1.0);
        // Commas and currency signs are stripped before comparing numbers.
        assert_eq!(numeracy_f1("$1,234.56", &golds(&["1234.56"])), 1.0);
        // Dates are not numbers: a date mismatch is only a token mismatch.
        let date = numeracy_f1("due 2021-05-06", &golds(&["due 2021-05-07"]));
        assert!(date > 0.0 && date < 1.0);
        // Max over golds.
        assert_eq!(
            numeracy_f1("acme corp", &golds(&["other ltd", "acme corp"])),
            1.0
        );
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_answer("  Acme,  Corp. "), vec!["acme", "corp"]);
        assert_eq!(normalize_answer("(12.50)"), vec!["12.50"]);
        assert_eq!(normalize_answer("..."), Vec::<String>::new());
    }

    #[test]
    fn numeric_detection() {
        assert_eq!(numeric_value("12.50"), Some("12.50".into()));
        assert_eq!(numeric_value("$1,234.56"), Some("1234.56".into()));
        assert_eq!(numeric_value("-42"), Some("-42".into()));
        assert_eq!(numeric_value("2021-05-06"), None);
        assert_eq!(numeric_value("abc"), None);
        assert_eq!(numeric_value("1.2.3"), None);
        assert_eq!(numeric_value("inv-42"), None);
    }

    fn bx(x0: u32, y0: u32, x1: u32, y1: u32) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    /// Exhaustive oracle over every position tuple.
    fn baseline_oracle(probs: &[Vec<f64>; 4], boxes: &[BBox]) -> Option<BBox> {
        let n = boxes.len();
        let mut best: Option<(f64, (usize, usize, usize, usize), BBox)> = None;
        for l in 0..n {
            for t in 0..n {
                for r in 0..n {
                    for b in 0..n {
                        let region =
                            region_from_boundary_boxes(&boxes[l], &boxes[t], &boxes[r], &boxes[b]);
                        let Some(bbox) = region.bbox() else { continue };
                        let score = probs[0][l] * probs[1][t] * probs[2][r] * probs[3][b];
                        let key = (l, t, r, b);
                        let replace = match &best {
                            None => true,
                            Some((s, k, _)) => score > *s || (score == *s && key < *k),
                        };
                        if replace {
                            best = Some((score, key, bbox));
                        }
                    }
                }
            }
        }
        best.map(|(_, _, b)| b)
    }

    #[test]
    fn baseline_single_position_and_one_hot() {
        let boxes = vec![bx(10, 10, 60, 20)];
        let probs = [vec![1.0], vec![1.0], vec![1.0], vec![1.0]];
        assert_eq!(baseline_decode(&probs, &boxes, 10).unwrap(), boxes[0]);

        let boxes = vec![bx(0, 0, 50, 10), bx(100, 0, 160, 10), bx(0, 30, 50, 40)];
        // One-hot vectors pointing at the valid tuple (0, 0, 1, 2).
        let probs = [
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let got = baseline_decode(&probs, &boxes, 10).unwrap();
        assert_eq!(got, bx(0, 0, 160, 40));
    }

    #[test]
    fn baseline_matches_exhaustive_oracle_on_fixture() {
        let boxes = vec![bx(40, 10, 90, 20), bx(200, 10, 260, 20), bx(40, 40, 90, 50)];
        let probs = [
            vec![0.5, 0.2, 0.3],
            vec![0.1, 0.6, 0.3],
            vec![0.25, 0.5, 0.25],
            vec![0.3, 0.3, 0.4],
        ];
        let got = baseline_decode(&probs, &boxes, 3).unwrap();
        assert_eq!(got, baseline_oracle(&probs, &boxes).unwrap());
    }

    #[test]
    fn report_shapes() {
        use crate::synth::{generate_synthetic_corpus, SynthConfig};
        let corpus = generate_synthetic_corpus(&SynthConfig {
            num_documents: 10,
            unanswerable_rate: 0.3,
            ..SynthConfig::default()
        });
        // A predictor that always answers with the empty string.
        let report = evaluate_with(&corpus.train, |_, _| Prediction {
            answerable_prob: 0.0,
            region: None,
            text: String::new(),
            score: 0.0,
            no_valid_proposals: false,
        });
        let n_fields: usize = corpus
            .train
            .iter()
            .flat_map(|d| d.annotations.iter().map(|a| a.field_name.clone()))
            .collect::<std::collections::BTreeSet<_>>()
            .len();
        assert_eq!(report.rows.len(), n_fields);
        assert_eq!(
            report.support,
            corpus.train.iter().map(|d| d.annotations.len()).sum::<usize>()
        );
        // The empty predictor matches exactly the unanswerable items.
        if let Some(u) = report.unanswerable_accuracy {
            assert_eq!(u, 1.0);
        }
        let row_support: usize = report.rows.iter().map(|r| r.support).sum();
        assert_eq!(row_support, report.support);
        let text = report.to_text();
        assert!(text.contains("micro"));
    }

    proptest! {
        #[test]
        fn em_implies_f1_one(
            words in proptest::collection::vec("[a-z]{1,6}", 1..5),
            nums in proptest::collection::vec(0u32..9999, 0..3),
        ) {
            let mut tokens: Vec<String> = words;
            tokens.extend(nums.iter().map(|n| format!("{n}.{:02}", n % 100)));
            let s = tokens.join(" ");
            let gold = golds(&[s.as_str()]);
            prop_assert_eq!(exact_match(&s, &gold), 1);
            prop_assert_eq!(numeracy_f1(&s, &gold), 1.0);
        }

        #[test]
        fn numeracy_f1_symmetric_on_shared_numbers(
            a in "[a-z]{2,5}", b in "[a-z]{2,5}", n in 0u32..999
        ) {
            let x = format!("{a} {n}");
            let y = format!("{b} {n}");
            let xy = numeracy_f1(&x, &golds(&[y.as_str()]));
            let yx = numeracy_f1(&y, &golds(&[x.as_str()]));
            prop_assert!((xy - yx).abs() < 1e-12);
        }

        #[test]
        fn baseline_equals_oracle_when_m_covers(
            n in 1usize..6,
            seed in 0u64..500,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let boxes: Vec<BBox> = (0..n)
                .map(|_| {
                    let x0 = rng.gen_range(0..600);
                    let y0 = rng.gen_range(0..900);
                    bx(x0, y0, x0 + rng.gen_range(5..90), y0 + rng.gen_range(5..40))
                })
                .collect();
            let mut probs: [Vec<f64>; 4] = Default::default();
            for p in probs.iter_mut() {
                let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                *p = raw.into_iter().map(|x| x / sum).collect();
            }
            let got = baseline_decode(&probs, &boxes, n);
            let expect = baseline_oracle(&probs, &boxes);
            match (got, expect) {
                (Ok(a), Some(b)) => prop_assert_eq!(a, b),
                (Err(BaselineError::NoValidRegion), None) => {}
                (g, e) => prop_assert!(false, "mismatch: {:?} vs {:?}", g, e),
            }
        }
    }
}
