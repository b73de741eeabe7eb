//! Task heads on top of the encoder: region proposal over the last three
//! hidden states, IoU-labeled region categorization, across-proposal region
//! selection, and the CLS answerability classifier.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::encoder::HiddenStates;
use crate::geometry::{iou, region_from_boundary_boxes, token_in_region, BBox, CandidateRegion};
use crate::input::ModelInput;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{softmax_slice, Tensor};

/// Number of hidden states feeding the proposal head.
pub const NUM_PROPOSAL_SOURCES: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum HeadsError {
    #[error("document has no positions in the packed input")]
    NoDocumentTokens,
    #[error("k must be at least 1")]
    KZero,
    #[error("no valid proposal to select from")]
    NoValidProposal,
}

/// A candidate region assembled from four boundary tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionProposal {
    /// Document token indices of the left/top/right/bottom boundary tokens.
    pub left_idx: usize,
    pub top_idx: usize,
    pub right_idx: usize,
    pub bottom_idx: usize,
    /// Region extents; `region.valid` is false on inverted extents.
    pub region: CandidateRegion,
    /// Which of the three source states produced it (0 = earliest, 2 = last).
    pub source_layer: usize,
}

impl RegionProposal {
    pub fn is_valid(&self) -> bool {
        self.region.valid
    }

    pub fn bbox(&self) -> Option<BBox> {
        self.region.bbox()
    }
}

/// Per-coordinate boundary logits over document positions for one source
/// state.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordLogits<S> {
    pub x0: Vec<S>,
    pub y0: Vec<S>,
    pub x1: Vec<S>,
    pub y1: Vec<S>,
}

impl<S: Scalar> CoordLogits<S> {
    pub fn coord(&self, c: usize) -> &[S] {
        match c {
            0 => &self.x0,
            1 => &self.y0,
            2 => &self.x1,
            3 => &self.y1,
            _ => panic!("coordinate index out of range"),
        }
    }
}

/// Boundary logits for all proposal source states.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalLogits<S> {
    pub per_layer: Vec<CoordLogits<S>>,
}

/// Training label of a proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionLabel {
    Positive,
    Negative,
    Ignored,
}

/// Concatenated content + boundary features of a proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionRepresentation<S> {
    pub r_c: Vec<S>,
    pub r_b: Vec<S>,
    pub r_region: Vec<S>,
    /// True when the region contained no token and the boundary tokens were
    /// pooled instead.
    pub content_fallback: bool,
}

/// Parameter ids of all task heads.
#[derive(Debug, Clone)]
pub struct HeadParams {
    /// Per-coordinate boundary projections, d -> 4. One entry when shared
    /// across source states, three when per-layer.
    pub prop_w: Vec<ParamId>,
    pub prop_b: Vec<ParamId>,
    /// W2: content feature projection, d -> h.
    pub rep_content_w: ParamId,
    pub rep_content_b: ParamId,
    /// W3: boundary logit projection, 4 -> h.
    pub rep_boundary_w: ParamId,
    pub rep_boundary_b: ParamId,
    /// W4: categorization, 2h -> 2 (class 1 = positive).
    pub cat_w: ParamId,
    pub cat_b: ParamId,
    /// W5: selection score, 2h -> 1.
    pub sel_w: ParamId,
    pub sel_b: ParamId,
    /// Answerability classifier, d -> 2 (class 1 = answerable).
    pub ans_w: ParamId,
    pub ans_b: ParamId,
}

impl HeadParams {
    /// Projection ids for a source state under shared or per-layer weights.
    pub fn prop_ids(&self, source: usize) -> (ParamId, ParamId) {
        if self.prop_w.len() == 1 {
            (self.prop_w[0], self.prop_b[0])
        } else {
            (self.prop_w[source], self.prop_b[source])
        }
    }
}

/// Allocates and initializes head parameters.
pub fn init_head_params<S: Scalar>(
    store: &mut ParamStore<S>,
    hidden_size: usize,
    rep_hidden: usize,
    per_layer_proposal_weights: bool,
    rng: &mut ChaCha8Rng,
) -> HeadParams {
    use crate::encoder::gaussian;
    let std = 0.02;
    let mut randn = |rows: usize, cols: usize| {
        Tensor::from_fn(rows, cols, |_, _| S::from_f64_lossy(gaussian(rng) * std))
    };

    let n_proj = if per_layer_proposal_weights {
        NUM_PROPOSAL_SOURCES
    } else {
        1
    };
    let mut prop_w = Vec::new();
    let mut prop_b = Vec::new();
    for i in 0..n_proj {
        prop_w.push(store.add(format!("prop.w{i}"), randn(hidden_size, 4)));
        prop_b.push(store.add(format!("prop.b{i}"), Tensor::zeros(1, 4)));
    }
    let rep_content_w = store.add("rep.content.w", randn(hidden_size, rep_hidden));
    let rep_content_b = store.add("rep.content.b", Tensor::zeros(1, rep_hidden));
    let rep_boundary_w = store.add("rep.boundary.w", randn(4, rep_hidden));
    let rep_boundary_b = store.add("rep.boundary.b", Tensor::zeros(1, rep_hidden));
    let cat_w = store.add("cat.w", randn(2 * rep_hidden, 2));
    let cat_b = store.add("cat.b", Tensor::zeros(1, 2));
    let sel_w = store.add("sel.w", randn(2 * rep_hidden, 1));
    let sel_b = store.add("sel.b", Tensor::zeros(1, 1));
    let ans_w = store.add("ans.w", randn(hidden_size, 2));
    let ans_b = store.add("ans.b", Tensor::zeros(1, 2));

    HeadParams {
        prop_w,
        prop_b,
        rep_content_w,
        rep_content_b,
        rep_boundary_w,
        rep_boundary_b,
        cat_w,
        cat_b,
        sel_w,
        sel_b,
        ans_w,
        ans_b,
    }
}

/// Computes boundary logits for every source state over document positions.
pub fn compute_proposal_logits<S: Scalar>(
    store: &ParamStore<S>,
    hp: &HeadParams,
    states: &HiddenStates<S>,
    input: &ModelInput,
) -> ProposalLogits<S> {
    let doc_positions = input.doc_positions();
    let sources = states.proposal_source_indices();
    let mut per_layer = Vec::with_capacity(sources.len());
    for (rel, &abs) in sources.iter().enumerate() {
        let state = &states.layers[abs];
        let mut rows = Tensor::zeros(doc_positions.len(), state.cols());
        for (r, &p) in doc_positions.iter().enumerate() {
            rows.row_mut(r).copy_from_slice(state.row(p));
        }
        let (w_id, b_id) = hp.prop_ids(rel);
        let mut logits = rows.matmul(store.get(w_id));
        let bias = store.get(b_id);
        for r in 0..logits.rows() {
            for (x, b) in logits.row_mut(r).iter_mut().zip(bias.row(0)) {
                *x += *b;
            }
        }
        per_layer.push(CoordLogits {
            x0: (0..logits.rows()).map(|r| logits.at(r, 0)).collect(),
            y0: (0..logits.rows()).map(|r| logits.at(r, 1)).collect(),
            x1: (0..logits.rows()).map(|r| logits.at(r, 2)).collect(),
            y1: (0..logits.rows()).map(|r| logits.at(r, 3)).collect(),
        });
    }
    ProposalLogits { per_layer }
}

/// Top-k document positions per coordinate: probability descending, ties by
/// lower index.
pub fn top_k_indices<S: Scalar>(logits: &[S], k: usize) -> Vec<usize> {
    let mut probs: Vec<S> = logits.to_vec();
    softmax_slice(&mut probs);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Enumerates all boundary combinations from precomputed logits.
///
/// Every source state contributes `k^4` proposals (before any clamping of
/// `k` to the number of document positions); inverted extents are flagged
/// invalid, not dropped.
pub fn enumerate_proposals<S: Scalar>(
    logits: &ProposalLogits<S>,
    input: &ModelInput,
    k: usize,
) -> Result<Vec<RegionProposal>, HeadsError> {
    if k == 0 {
        return Err(HeadsError::KZero);
    }
    let doc_positions = input.doc_positions();
    if doc_positions.is_empty() {
        return Err(HeadsError::NoDocumentTokens);
    }
    let k = k.min(doc_positions.len());
    let token_index = |dp: usize| input.doc_token_map[doc_positions[dp]].expect("doc position");
    let box_of = |dp: usize| &input.token_boxes[doc_positions[dp]];

    let mut proposals = Vec::with_capacity(logits.per_layer.len() * k * k * k * k);
    for (source, coords) in logits.per_layer.iter().enumerate() {
        let top_x0 = top_k_indices(&coords.x0, k);
        let top_y0 = top_k_indices(&coords.y0, k);
        let top_x1 = top_k_indices(&coords.x1, k);
        let top_y1 = top_k_indices(&coords.y1, k);
        for &l in &top_x0 {
            for &t in &top_y0 {
                for &r in &top_x1 {
                    for &b in &top_y1 {
                        let region =
                            region_from_boundary_boxes(box_of(l), box_of(t), box_of(r), box_of(b));
                        proposals.push(RegionProposal {
                            left_idx: token_index(l),
                            top_idx: token_index(t),
                            right_idx: token_index(r),
                            bottom_idx: token_index(b),
                            region,
                            source_layer: source,
                        });
                    }
                }
            }
        }
    }
    Ok(proposals)
}

/// The proposal head: projects the last three hidden states to boundary
/// logits, takes the top-k tokens per coordinate and emits every combination.
pub fn propose_regions<S: Scalar>(
    store: &ParamStore<S>,
    hp: &HeadParams,
    states: &HiddenStates<S>,
    input: &ModelInput,
    k: usize,
) -> Result<(Vec<RegionProposal>, ProposalLogits<S>), HeadsError> {
    if input.doc_positions().is_empty() {
        return Err(HeadsError::NoDocumentTokens);
    }
    let logits = compute_proposal_logits(store, hp, states, input);
    let proposals = enumerate_proposals(&logits, input, k)?;
    Ok((proposals, logits))
}

/// IoU-based labels: the valid proposals attaining the maximum IoU are
/// positive, as is anything above 0.7; below 0.1 is negative unless already
/// positive; everything else (and every invalid proposal) is ignored.
pub fn assign_region_labels(proposals: &[RegionProposal], gold: &BBox) -> Vec<RegionLabel> {
    let ious: Vec<Option<f64>> = proposals
        .iter()
        .map(|p| p.bbox().map(|b| iou(&b, gold)))
        .collect();
    let max_iou = ious
        .iter()
        .flatten()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    proposals
        .iter()
        .zip(&ious)
        .map(|(_, iou_opt)| match iou_opt {
            None => RegionLabel::Ignored,
            Some(v) => {
                if *v == max_iou || *v > 0.7 {
                    RegionLabel::Positive
                } else if *v < 0.1 {
                    RegionLabel::Negative
                } else {
                    RegionLabel::Ignored
                }
            }
        })
        .collect()
}

/// Sequence rows pooled for a proposal's content feature: the document
/// positions inside the region, or the four boundary positions as a fallback
/// when the region contains no token.
pub fn content_rows(proposal: &RegionProposal, input: &ModelInput) -> (Vec<usize>, bool) {
    if let Some(bbox) = proposal.bbox() {
        let rows: Vec<usize> = input
            .doc_positions()
            .into_iter()
            .filter(|&p| token_in_region(&input.token_boxes[p], &bbox))
            .collect();
        if !rows.is_empty() {
            return (rows, false);
        }
    }
    let mut rows: Vec<usize> = [
        proposal.left_idx,
        proposal.top_idx,
        proposal.right_idx,
        proposal.bottom_idx,
    ]
    .iter()
    .filter_map(|&t| input.position_of_doc_token(t))
    .collect();
    rows.sort_unstable();
    rows.dedup();
    (rows, true)
}

fn affine_row<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Vec<S> {
    let mut out = x.matmul(w);
    for (o, bi) in out.row_mut(0).iter_mut().zip(b.row(0)) {
        *o += *bi;
    }
    out.into_data()
}

/// Builds the content + boundary representation of one proposal.
pub fn region_representation<S: Scalar>(
    store: &ParamStore<S>,
    hp: &HeadParams,
    proposal: &RegionProposal,
    states: &HiddenStates<S>,
    logits: &ProposalLogits<S>,
    input: &ModelInput,
) -> RegionRepresentation<S> {
    let last = states.last();
    let (rows, content_fallback) = content_rows(proposal, input);
    assert!(!rows.is_empty(), "proposal has no poolable rows");
    let d = last.cols();
    let mut pooled = Tensor::zeros(1, d);
    pooled.row_mut(0).copy_from_slice(last.row(rows[0]));
    for &r in &rows[1..] {
        let row = last.row(r);
        for (dst, &x) in pooled.row_mut(0).iter_mut().zip(row) {
            if x > *dst {
                *dst = x;
            }
        }
    }
    let r_c = affine_row(
        &pooled,
        store.get(hp.rep_content_w),
        store.get(hp.rep_content_b),
    );

    let coords = &logits.per_layer[proposal.source_layer];
    let boundary = Tensor::from_vec(
        1,
        4,
        vec![
            coords.x0[proposal.left_idx],
            coords.y0[proposal.top_idx],
            coords.x1[proposal.right_idx],
            coords.y1[proposal.bottom_idx],
        ],
    );
    let r_b = affine_row(
        &boundary,
        store.get(hp.rep_boundary_w),
        store.get(hp.rep_boundary_b),
    );

    let mut r_region = r_c.clone();
    r_region.extend_from_slice(&r_b);
    RegionRepresentation {
        r_c,
        r_b,
        r_region,
        content_fallback,
    }
}

/// Per-proposal probability of the positive class.
pub fn categorize_regions<S: Scalar>(
    store: &ParamStore<S>,
    hp: &HeadParams,
    reps: &[RegionRepresentation<S>],
) -> Vec<S> {
    reps.iter()
        .map(|rep| {
            let x = Tensor::from_vec(1, rep.r_region.len(), rep.r_region.clone());
            let mut logits = affine_row(&x, store.get(hp.cat_w), store.get(hp.cat_b));
            softmax_slice(&mut logits);
            logits[1]
        })
        .collect()
}

/// Softmax distribution of selection scores across valid proposals; invalid
/// entries get probability zero.
pub fn select_region<S: Scalar>(
    store: &ParamStore<S>,
    hp: &HeadParams,
    reps: &[RegionRepresentation<S>],
    valid: &[bool],
) -> Result<Vec<S>, HeadsError> {
    assert_eq!(reps.len(), valid.len());
    let chosen: Vec<usize> = (0..reps.len()).filter(|&i| valid[i]).collect();
    if chosen.is_empty() {
        return Err(HeadsError::NoValidProposal);
    }
    let mut scores: Vec<S> = chosen
        .iter()
        .map(|&i| {
            let x = Tensor::from_vec(1, reps[i].r_region.len(), reps[i].r_region.clone());
            affine_row(&x, store.get(hp.sel_w), store.get(hp.sel_b))[0]
        })
        .collect();
    softmax_slice(&mut scores);
    let mut out = vec![S::zero(); reps.len()];
    for (slot, &i) in chosen.iter().enumerate() {
        out[i] = scores[slot];
    }
    Ok(out)
}

/// Index of the selected proposal: highest probability, ties by lower index.
pub fn argmax_selection<S: Scalar>(distribution: &[S]) -> usize {
    let mut best = 0;
    for (i, &p) in distribution.iter().enumerate() {
        if p > distribution[best] {
            best = i;
        }
    }
    best
}

/// Probability that the query is answerable, from the CLS hidden state.
pub fn answerable<S: Scalar>(store: &ParamStore<S>, hp: &HeadParams, cls_hidden: &[S]) -> S {
    let x = Tensor::from_vec(1, cls_hidden.len(), cls_hidden.to_vec());
    let mut logits = affine_row(&x, store.get(hp.ans_w), store.get(hp.ans_b));
    softmax_slice(&mut logits);
    logits[1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::document::{Document, Token};
    use crate::encoder::{encode, init_encoder_params, EncoderConfig, EncoderParams};
    use crate::geometry::region_from_boundary_boxes;
    use crate::input::{build_model_input, Vocab};
    use rand_chacha::rand_core::SeedableRng;

    fn fixture(n_tokens: usize) -> (
        ParamStore<f64>,
        EncoderParams,
        HeadParams,
        EncoderConfig,
        Document,
        ModelInput,
    ) {
        let tokens: Vec<Token> = (0..n_tokens)
            .map(|i| Token {
                text: format!("t{i}"),
                bbox: BBox::new(
                    (i as u32 % 4) * 120 + 40,
                    (i as u32 / 4) * 50 + 60,
                    (i as u32 % 4) * 120 + 100,
                    (i as u32 / 4) * 50 + 72,
                )
                .unwrap(),
                index: 0,
            })
            .collect();
        let doc = Document::new("d", 700.0, 1000.0, tokens);
        let vocab = Vocab::build(doc.tokens.iter().map(|t| t.text.as_str()), 100);
        let input = build_model_input(&vocab, "field", &doc, 64).unwrap();
        let cfg = EncoderConfig {
            vocab_size: vocab.len(),
            hidden_size: 16,
            num_layers: 2,
            num_heads: 2,
            max_seq_len: 64,
            ..EncoderConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ep = init_encoder_params(&mut store, &cfg, &mut rng);
        let hp = init_head_params(&mut store, cfg.hidden_size, 8, false, &mut rng);
        (store, ep, hp, cfg, doc, input)
    }

    #[test]
    fn proposal_count_is_three_k_fourth() {
        let (store, ep, hp, cfg, _doc, input) = fixture(8);
        let states = encode(&store, &ep, &cfg, &input).unwrap();
        for k in 1..=3usize {
            let (proposals, _) = propose_regions(&store, &hp, &states, &input, k).unwrap();
            assert_eq!(proposals.len(), 3 * k.pow(4));
        }
    }

    #[test]
    fn single_token_document_forces_proposals() {
        let (store, ep, hp, cfg, doc, input) = fixture(1);
        let states = encode(&store, &ep, &cfg, &input).unwrap();
        let (proposals, _) = propose_regions(&store, &hp, &states, &input, 1).unwrap();
        assert_eq!(proposals.len(), 3);
        for p in &proposals {
            assert!(p.is_valid());
            assert_eq!(p.bbox().unwrap(), doc.tokens[0].bbox);
        }
        // k clamps to the document size.
        let (clamped, _) = propose_regions(&store, &hp, &states, &input, 5).unwrap();
        assert_eq!(clamped.len(), 3);
    }

    #[test]
    fn proposals_match_boundary_construction() {
        let (store, ep, hp, cfg, doc, input) = fixture(8);
        let states = encode(&store, &ep, &cfg, &input).unwrap();
        let (proposals, _) = propose_regions(&store, &hp, &states, &input, 2).unwrap();
        let mut seen_invalid = false;
        for p in &proposals {
            let expect = region_from_boundary_boxes(
                &doc.tokens[p.left_idx].bbox,
                &doc.tokens[p.top_idx].bbox,
                &doc.tokens[p.right_idx].bbox,
                &doc.tokens[p.bottom_idx].bbox,
            );
            assert_eq!(p.region, expect);
            seen_invalid |= !p.is_valid();
        }
        // With boundary tokens spread over a grid some combos invert.
        let _ = seen_invalid;
    }

    #[test]
    fn empty_document_is_an_error() {
        let (store, ep, hp, cfg, _doc, _input) = fixture(2);
        let empty_doc = Document::new("e", 700.0, 1000.0, vec![]);
        let vocab = Vocab::build(["x"].into_iter(), 10);
        let input = build_model_input(&vocab, "field", &empty_doc, 16).unwrap();
        let states = encode(&store, &ep, &cfg, &input).unwrap();
        let e = propose_regions(&store, &hp, &states, &input, 2).unwrap_err();
        assert_eq!(e, HeadsError::NoDocumentTokens);
    }

    fn proposal_with_bbox(x0: u32, y0: u32, x1: u32, y1: u32) -> RegionProposal {
        let b = BBox::new(x0, y0, x1, y1).unwrap();
        RegionProposal {
            left_idx: 0,
            top_idx: 0,
            right_idx: 0,
            bottom_idx: 0,
            region: region_from_boundary_boxes(&b, &b, &b, &b),
            source_layer: 0,
        }
    }

    fn invalid_proposal() -> RegionProposal {
        let left = BBox::new(60, 0, 70, 10).unwrap();
        let right = BBox::new(0, 0, 10, 10).unwrap();
        RegionProposal {
            left_idx: 0,
            top_idx: 0,
            right_idx: 1,
            bottom_idx: 1,
            region: region_from_boundary_boxes(&left, &left, &right, &right),
            source_layer: 0,
        }
    }

    #[test]
    fn labeling_rules() {
        let gold = BBox::new(0, 0, 100, 100).unwrap();
        let proposals = vec![
            proposal_with_bbox(0, 0, 100, 80), // IoU 0.8
            proposal_with_bbox(0, 0, 100, 40), // IoU 0.4
            proposal_with_bbox(0, 0, 100, 5),  // IoU 0.05
            proposal_with_bbox(0, 0, 100, 90), // IoU 0.9: the designated max
            invalid_proposal(),
        ];
        let labels = assign_region_labels(&proposals, &gold);
        assert_eq!(
            labels,
            vec![
                RegionLabel::Positive,
                RegionLabel::Ignored,
                RegionLabel::Negative,
                RegionLabel::Positive,
                RegionLabel::Ignored,
            ]
        );
    }

    #[test]
    fn sole_low_iou_proposal_is_positive() {
        let gold = BBox::new(0, 0, 100, 100).unwrap();
        let proposals = vec![proposal_with_bbox(0, 0, 100, 5), invalid_proposal()];
        let labels = assign_region_labels(&proposals, &gold);
        assert_eq!(labels[0], RegionLabel::Positive);
        assert_eq!(labels[1], RegionLabel::Ignored);
    }

    #[test]
    fn at_least_one_positive_whenever_valid_exists() {
        let gold = BBox::new(200, 200, 300, 300).unwrap();
        let proposals = vec![
            proposal_with_bbox(0, 0, 10, 10),
            proposal_with_bbox(600, 900, 700, 1000),
        ];
        let labels = assign_region_labels(&proposals, &gold);
        assert!(labels.iter().any(|&l| l == RegionLabel::Positive));
    }

    #[test]
    fn representation_singleton_and_zero_weights() {
        let (mut store, ep, hp, cfg, doc, input) = fixture(4);
        let states = encode(&store, &ep, &cfg, &input).unwrap();
        let (_, logits) = propose_regions(&store, &hp, &states, &input, 1).unwrap();
        // A degenerate proposal whose four boundaries are the same token
        // pools exactly one row.
        let tok = 2usize;
        let b = doc.tokens[tok].bbox;
        let p = RegionProposal {
            left_idx: tok,
            top_idx: tok,
            right_idx: tok,
            bottom_idx: tok,
            region: region_from_boundary_boxes(&b, &b, &b, &b),
            source_layer: 1,
        };
        let rep = region_representation(&store, &hp, &p, &states, &logits, &input);
        assert!(!rep.content_fallback);
        let seq = input.position_of_doc_token(tok).unwrap();
        let row = states.last().row(seq);
        let x = Tensor::from_vec(1, row.len(), row.to_vec());
        let expect = affine_row(&x, store.get(hp.rep_content_w), store.get(hp.rep_content_b));
        assert_eq!(rep.r_c, expect);
        assert_eq!(rep.r_region[..rep.r_c.len()], rep.r_c[..]);
        assert_eq!(rep.r_region[rep.r_c.len()..], rep.r_b[..]);

        // Zeroed projection weights and biases give the zero representation.
        for id in [
            hp.rep_content_w,
            hp.rep_content_b,
            hp.rep_boundary_w,
            hp.rep_boundary_b,
        ] {
            for x in store.get_mut(id).data_mut() {
                *x = 0.0;
            }
        }
        let states = encode(&store, &ep, &cfg, &input).unwrap();
        let (proposals, logits) = propose_regions(&store, &hp, &states, &input, 1).unwrap();
        let rep = region_representation(&store, &hp, &proposals[0], &states, &logits, &input);
        assert!(rep.r_region.iter().all(|&x| x == 0.0));
        let _ = doc;
    }

    #[test]
    fn categorize_symmetry_and_monotonicity() {
        let (mut store, _ep, hp, _cfg, _doc, _input) = fixture(2);
        let rep = RegionRepresentation {
            r_c: vec![0.0; 8],
            r_b: vec![0.0; 8],
            r_region: vec![0.0; 16],
            content_fallback: false,
        };
        // Zero representation and zero classifier weights: probability 0.5.
        for x in store.get_mut(hp.cat_w).data_mut() {
            *x = 0.0;
        }
        let p = categorize_regions(&store, &hp, &[rep.clone()]);
        assert!((p[0] - 0.5).abs() < 1e-15);

        // Raising the positive-class bias strictly raises P(positive).
        *store.get_mut(hp.cat_b).at_mut(0, 1) = 0.7;
        let p_up = categorize_regions(&store, &hp, &[rep]);
        assert!(p_up[0] > p[0]);
    }

    #[test]
    fn selection_distribution_properties() {
        let (store, _ep, hp, _cfg, _doc, _input) = fixture(2);
        let mk = |scale: f64| RegionRepresentation {
            r_c: vec![scale; 8],
            r_b: vec![-scale; 8],
            r_region: {
                let mut v = vec![scale; 8];
                v.extend(vec![-scale; 8]);
                v
            },
            content_fallback: false,
        };
        let reps = vec![mk(0.3), mk(0.9), mk(0.1)];
        let valid = vec![true, false, true];
        let dist = select_region(&store, &hp, &reps, &valid).unwrap();
        assert_eq!(dist[1], 0.0);
        let sum: f64 = dist.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);

        // Singleton valid proposal takes all the mass.
        let dist1 = select_region(&store, &hp, &reps, &[false, true, false]).unwrap();
        assert_eq!(dist1[1], 1.0);

        // Identical representations halve the mass; argmax tie-breaks low.
        let twins = vec![mk(0.4), mk(0.4)];
        let dist2 = select_region(&store, &hp, &twins, &[true, true]).unwrap();
        assert!((dist2[0] - 0.5).abs() < 1e-12);
        assert_eq!(argmax_selection(&dist2), 0);

        // No valid proposal is an error.
        let e = select_region(&store, &hp, &reps, &[false, false, false]).unwrap_err();
        assert_eq!(e, HeadsError::NoValidProposal);
    }

    #[test]
    fn selection_invariant_to_listing_order() {
        let (store, _ep, hp, _cfg, _doc, _input) = fixture(2);
        let mk = |a: f64, b: f64| {
            let mut r_region = vec![a; 8];
            r_region.extend(vec![b; 8]);
            RegionRepresentation {
                r_c: vec![a; 8],
                r_b: vec![b; 8],
                r_region,
                content_fallback: false,
            }
        };
        let reps = vec![mk(0.3, 0.1), mk(-0.2, 0.5), mk(0.8, -0.4)];
        let valid = vec![true, true, true];
        let dist = select_region(&store, &hp, &reps, &valid).unwrap();
        let permuted = vec![reps[2].clone(), reps[0].clone(), reps[1].clone()];
        let dist_p = select_region(&store, &hp, &permuted, &valid).unwrap();
        assert!((dist[2] - dist_p[0]).abs() < 1e-12);
        assert!((dist[0] - dist_p[1]).abs() < 1e-12);
        assert!((dist[1] - dist_p[2]).abs() < 1e-12);
    }

    #[test]
    fn answerable_zero_init_is_half() {
        let (mut store, _ep, hp, cfg, _doc, _input) = fixture(2);
        for x in store.get_mut(hp.ans_w).data_mut() {
            *x = 0.0;
        }
        let cls = vec![0.3; cfg.hidden_size];
        let p = answerable(&store, &hp, &cls);
        assert!((p - 0.5).abs() < 1e-15);
    }
}
