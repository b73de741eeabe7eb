//! The full region-prediction model: layout-aware encoder plus task heads,
//! with a tape-recorded training forward pass and a plain inference path.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::document::{extract_region_text, Document};
use crate::encoder::{
    encode, encoder_forward, init_encoder_params, EncoderConfig, EncoderError, EncoderParams,
    HiddenStates,
};
use crate::geometry::{iou, token_in_region, BBox};
use crate::heads::{
    answerable, argmax_selection, assign_region_labels, categorize_regions, content_rows,
    enumerate_proposals, init_head_params, propose_regions, region_representation, select_region,
    CoordLogits, HeadParams, HeadsError, ProposalLogits, RegionLabel, RegionProposal,
    NUM_PROPOSAL_SOURCES,
};
use crate::ingest::Annotation;
use crate::input::{build_model_input, InputError, ModelInput, Vocab};
use crate::params::ParamStore;
use crate::scalar::{scalar, Scalar};
use crate::tape::{NodeId, Tape};
use crate::training::dynamic_class_weights;

/// Architecture hyperparameters beyond the encoder itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Top-k boundary candidates per coordinate.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Hidden size of the region representation halves.
    #[serde(default = "default_rep_hidden")]
    pub rep_hidden: usize,
    /// Use distinct boundary projections per source state instead of one
    /// shared projection.
    #[serde(default)]
    pub per_layer_proposal_weights: bool,
}

fn default_k() -> usize {
    3
}
fn default_rep_hidden() -> usize {
    64
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            k: default_k(),
            rep_hidden: default_rep_hidden(),
            per_layer_proposal_weights: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Heads(#[from] HeadsError),
    #[error(transparent)]
    Input(#[from] InputError),
    #[error("loss component {component} is not finite")]
    NonFiniteLoss { component: &'static str },
}

/// Encoder, heads and vocabulary bundled with their parameters.
#[derive(Debug, Clone)]
pub struct RduModel<S> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore<S>,
    pub encoder_params: EncoderParams,
    pub head_params: HeadParams,
}

impl<S: Scalar> RduModel<S> {
    /// Initializes a fresh model; the encoder config's `vocab_size` is
    /// overwritten from the vocabulary.
    pub fn new(mut config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self, ModelError> {
        config.encoder.vocab_size = vocab.len();
        config.encoder.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder_params = init_encoder_params(&mut store, &config.encoder, &mut rng);
        let head_params = init_head_params(
            &mut store,
            config.encoder.hidden_size,
            config.rep_hidden,
            config.per_layer_proposal_weights,
            &mut rng,
        );
        Ok(RduModel {
            config,
            vocab,
            store,
            encoder_params,
            head_params,
        })
    }

    /// Rebuilds the model around an existing parameter store (checkpoint
    /// load). Parameter names must match the initialization layout.
    pub fn from_parts(
        config: ModelConfig,
        vocab: Vocab,
        store: ParamStore<S>,
    ) -> Result<Self, ModelError> {
        config.encoder.validate()?;
        // Ids are positional; rebuild them by replaying an init against a
        // scratch store and resolving names in the real one.
        let mut scratch: ParamStore<S> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep_scratch = init_encoder_params(&mut scratch, &config.encoder, &mut rng);
        let hp_scratch = init_head_params(
            &mut scratch,
            config.encoder.hidden_size,
            config.rep_hidden,
            config.per_layer_proposal_weights,
            &mut rng,
        );
        let resolve = |name: &str| {
            store
                .id_of(name)
                .unwrap_or_else(|| panic!("checkpoint missing parameter {name}"))
        };
        let remap = |id: crate::params::ParamId, sc: &ParamStore<S>| resolve(sc.name(id));
        let encoder_params = EncoderParams {
            tok_emb: remap(ep_scratch.tok_emb, &scratch),
            pos_emb: remap(ep_scratch.pos_emb, &scratch),
            emb_x0: remap(ep_scratch.emb_x0, &scratch),
            emb_y0: remap(ep_scratch.emb_y0, &scratch),
            emb_w: remap(ep_scratch.emb_w, &scratch),
            emb_h: remap(ep_scratch.emb_h, &scratch),
            bias_h: remap(ep_scratch.bias_h, &scratch),
            bias_v: remap(ep_scratch.bias_v, &scratch),
            layers: ep_scratch
                .layers
                .iter()
                .map(|lp| crate::encoder::LayerParams {
                    wq: remap(lp.wq, &scratch),
                    bq: remap(lp.bq, &scratch),
                    wk: remap(lp.wk, &scratch),
                    bk: remap(lp.bk, &scratch),
                    wv: remap(lp.wv, &scratch),
                    bv: remap(lp.bv, &scratch),
                    wo: remap(lp.wo, &scratch),
                    bo: remap(lp.bo, &scratch),
                    ln1_gain: remap(lp.ln1_gain, &scratch),
                    ln1_bias: remap(lp.ln1_bias, &scratch),
                    wf1: remap(lp.wf1, &scratch),
                    bf1: remap(lp.bf1, &scratch),
                    wf2: remap(lp.wf2, &scratch),
                    bf2: remap(lp.bf2, &scratch),
                    ln2_gain: remap(lp.ln2_gain, &scratch),
                    ln2_bias: remap(lp.ln2_bias, &scratch),
                })
                .collect(),
        };
        let head_params = HeadParams {
            prop_w: hp_scratch.prop_w.iter().map(|&id| remap(id, &scratch)).collect(),
            prop_b: hp_scratch.prop_b.iter().map(|&id| remap(id, &scratch)).collect(),
            rep_content_w: remap(hp_scratch.rep_content_w, &scratch),
            rep_content_b: remap(hp_scratch.rep_content_b, &scratch),
            rep_boundary_w: remap(hp_scratch.rep_boundary_w, &scratch),
            rep_boundary_b: remap(hp_scratch.rep_boundary_b, &scratch),
            cat_w: remap(hp_scratch.cat_w, &scratch),
            cat_b: remap(hp_scratch.cat_b, &scratch),
            sel_w: remap(hp_scratch.sel_w, &scratch),
            sel_b: remap(hp_scratch.sel_b, &scratch),
            ans_w: remap(hp_scratch.ans_w, &scratch),
            ans_b: remap(hp_scratch.ans_b, &scratch),
        };
        Ok(RduModel {
            config,
            vocab,
            store,
            encoder_params,
            head_params,
        })
    }

    pub fn build_input(&self, field_name: &str, doc: &Document) -> Result<ModelInput, InputError> {
        build_model_input(&self.vocab, field_name, doc, self.config.encoder.max_seq_len)
    }

    pub fn encode(&self, input: &ModelInput) -> Result<HiddenStates<S>, EncoderError> {
        encode(&self.store, &self.encoder_params, &self.config.encoder, input)
    }

    pub fn cast<T: Scalar>(&self) -> RduModel<T> {
        RduModel {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            store: self.store.cast(),
            encoder_params: self.encoder_params.clone(),
            head_params: self.head_params.clone(),
        }
    }
}

/// Supervision for one (document, field) example.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleTargets {
    pub answerable: bool,
    pub gold_region: Option<BBox>,
    /// Document token indices of the left/top/right/bottom gold boundary
    /// tokens among the tokens inside the gold region.
    pub gold_boundaries: Option<[usize; 4]>,
}

/// Derives training targets from an annotation, downgrading to unanswerable
/// when truncation dropped every token of the gold region.
pub fn build_targets(doc: &Document, annotation: &Annotation, input: &ModelInput) -> ExampleTargets {
    let Some(gold) = annotation.gold_region else {
        return ExampleTargets {
            answerable: false,
            gold_region: None,
            gold_boundaries: None,
        };
    };
    let inside: Vec<&crate::document::Token> = doc
        .tokens
        .iter()
        .filter(|t| {
            token_in_region(&t.bbox, &gold) && input.position_of_doc_token(t.index).is_some()
        })
        .collect();
    if inside.is_empty() {
        return ExampleTargets {
            answerable: false,
            gold_region: None,
            gold_boundaries: None,
        };
    }
    let mut left = inside[0];
    let mut top = inside[0];
    let mut right = inside[0];
    let mut bottom = inside[0];
    for t in &inside[1..] {
        if t.bbox.x0 < left.bbox.x0 {
            left = t;
        }
        if t.bbox.y0 < top.bbox.y0 {
            top = t;
        }
        if t.bbox.x1 > right.bbox.x1 {
            right = t;
        }
        if t.bbox.y1 > bottom.bbox.y1 {
            bottom = t;
        }
    }
    ExampleTargets {
        answerable: true,
        gold_region: Some(gold),
        gold_boundaries: Some([left.index, top.index, right.index, bottom.index]),
    }
}

/// Loss term weights; `delta` scales the auxiliary boundary loss and zero
/// reproduces the original three-term objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.01,
            delta: 1.0,
        }
    }
}

/// Loss components of one example or one batch, in reporting precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub answerable_loss: f64,
    pub rc_loss: f64,
    pub rs_loss: f64,
    pub aux_boundary_loss: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.answerable_loss += other.answerable_loss;
        self.rc_loss += other.rc_loss;
        self.rs_loss += other.rs_loss;
        self.aux_boundary_loss += other.aux_boundary_loss;
    }

    pub fn scale(&mut self, c: f64) {
        self.total *= c;
        self.answerable_loss *= c;
        self.rc_loss *= c;
        self.rs_loss *= c;
        self.aux_boundary_loss *= c;
    }
}

/// Everything the tape-recorded training forward produces for one example.
pub struct TrainingForward<S> {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
    pub proposals: Vec<RegionProposal>,
    pub labels: Vec<RegionLabel>,
    pub logits: ProposalLogits<S>,
    /// Node of the answerability logits (1x2).
    pub ans_logits: NodeId,
    /// Valid-proposal indices, aligned with `sel_row` columns.
    pub valid_indices: Vec<usize>,
    /// Node of the selection scores over valid proposals (1xV), if any.
    pub sel_row: Option<NodeId>,
    /// Counted-proposal indices, aligned with `cat_logits` rows.
    pub counted_indices: Vec<usize>,
    /// Node of the categorization logits (Mx2), if any proposal is counted.
    pub cat_logits: Option<NodeId>,
    /// Index (into `proposals`) of the selection target, if defined.
    pub selection_target: Option<usize>,
}

/// Runs the encoder and all heads on the tape and assembles the multi-task
/// loss for one example.
pub fn training_forward<'p, S: Scalar>(
    model: &'p RduModel<S>,
    tape: &mut Tape<'p, S>,
    input: &ModelInput,
    targets: &ExampleTargets,
    weights: &LossWeights,
) -> Result<TrainingForward<S>, ModelError> {
    let cfg = &model.config;
    let hp = &model.head_params;
    let states = encoder_forward(
        tape,
        &model.store,
        &model.encoder_params,
        &cfg.encoder,
        input,
    )?;
    let last_state = *states.last().expect("at least one state");

    // Answerability from the CLS position.
    let cls = tape.gather_rows(last_state, &[0]);
    let ans_w = tape.param(hp.ans_w);
    let ans_b = tape.param(hp.ans_b);
    let ans_logits = tape.matmul(cls, ans_w);
    let ans_logits = tape.add_row(ans_logits, ans_b);
    let ans_class = usize::from(targets.answerable);
    let ans_loss = tape.nll(ans_logits, ans_class);

    let zero = tape.constant(crate::tensor::Tensor::scalar_value(S::zero()));
    let mut result = TrainingForward {
        total: ans_loss,
        breakdown: LossBreakdown::default(),
        proposals: Vec::new(),
        labels: Vec::new(),
        logits: ProposalLogits { per_layer: Vec::new() },
        ans_logits,
        valid_indices: Vec::new(),
        sel_row: None,
        counted_indices: Vec::new(),
        cat_logits: None,
        selection_target: None,
    };

    let mut rc_loss = zero;
    let mut rs_loss = zero;
    let mut aux_loss = zero;

    if targets.answerable {
        let gold = targets.gold_region.expect("answerable target has a region");
        let doc_positions = input.doc_positions();
        let doc_rows: Vec<u32> = doc_positions.iter().map(|&p| p as u32).collect();

        // Boundary logits per source state, on the tape.
        let n_states = states.len();
        let sources = [n_states - 3, n_states - 2, n_states - 1];
        let mut coord_nodes: Vec<[NodeId; 4]> = Vec::with_capacity(NUM_PROPOSAL_SOURCES);
        let mut plain_logits: Vec<CoordLogits<S>> = Vec::with_capacity(NUM_PROPOSAL_SOURCES);
        for (rel, &abs) in sources.iter().enumerate() {
            let rows = tape.gather_rows(states[abs], &doc_rows);
            let (w_id, b_id) = hp.prop_ids(rel);
            let w = tape.param(w_id);
            let b = tape.param(b_id);
            let l_all = tape.matmul(rows, w);
            let l_all = tape.add_row(l_all, b);
            let mut nodes = [l_all; 4];
            for (c, node) in nodes.iter_mut().enumerate() {
                let col = tape.slice_cols(l_all, c, 1);
                *node = tape.transpose(col); // 1 x n_doc
            }
            coord_nodes.push(nodes);
            plain_logits.push(CoordLogits {
                x0: tape.value(nodes[0]).data().to_vec(),
                y0: tape.value(nodes[1]).data().to_vec(),
                x1: tape.value(nodes[2]).data().to_vec(),
                y1: tape.value(nodes[3]).data().to_vec(),
            });
        }
        let logits = ProposalLogits {
            per_layer: plain_logits,
        };
        let proposals = enumerate_proposals(&logits, input, cfg.k)?;
        let labels = assign_region_labels(&proposals, &gold);

        // Representations of every valid proposal.
        let valid_indices: Vec<usize> =
            (0..proposals.len()).filter(|&i| proposals[i].is_valid()).collect();
        let mut rep_nodes: Vec<NodeId> = Vec::with_capacity(valid_indices.len());
        if !valid_indices.is_empty() {
            let w2 = tape.param(hp.rep_content_w);
            let b2 = tape.param(hp.rep_content_b);
            let w3 = tape.param(hp.rep_boundary_w);
            let b3 = tape.param(hp.rep_boundary_b);
            for &i in &valid_indices {
                let p = &proposals[i];
                let (rows, _fallback) = content_rows(p, input);
                let rows_u32: Vec<u32> = rows.iter().map(|&r| r as u32).collect();
                let pooled = tape.max_pool_rows(last_state, &rows_u32);
                let rc = tape.matmul(pooled, w2);
                let rc = tape.add_row(rc, b2);

                let nodes = &coord_nodes[p.source_layer];
                let picks = [
                    (nodes[0], p.left_idx),
                    (nodes[1], p.top_idx),
                    (nodes[2], p.right_idx),
                    (nodes[3], p.bottom_idx),
                ];
                let pick_nodes: Vec<NodeId> = picks
                    .iter()
                    .map(|&(n, idx)| tape.pick_elems(n, &[(0, idx as u32)]))
                    .collect();
                let boundary = tape.concat_cols(&pick_nodes);
                let rb = tape.matmul(boundary, w3);
                let rb = tape.add_row(rb, b3);
                rep_nodes.push(tape.concat_cols(&[rc, rb]));
            }
        }

        // Region categorization with dynamic class weights.
        let counted_indices: Vec<usize> = valid_indices
            .iter()
            .copied()
            .filter(|&i| labels[i] != RegionLabel::Ignored)
            .collect();
        let mut cat_logits_node = None;
        if !counted_indices.is_empty() {
            let (pos_w, neg_w) = dynamic_class_weights(&labels);
            let w4 = tape.param(hp.cat_w);
            let b4 = tape.param(hp.cat_b);
            let mut rows = Vec::with_capacity(counted_indices.len());
            for &i in &counted_indices {
                let slot = valid_indices.iter().position(|&v| v == i).expect("counted is valid");
                let logits2 = tape.matmul(rep_nodes[slot], w4);
                rows.push(tape.add_row(logits2, b4));
            }
            let stacked = tape.concat_rows(&rows);
            cat_logits_node = Some(stacked);
            let log_probs = tape.log_softmax_rows(stacked);
            let m = counted_indices.len() as f64;
            let picks: Vec<(u32, u32)> = counted_indices
                .iter()
                .enumerate()
                .map(|(row, &i)| {
                    let class = if labels[i] == RegionLabel::Positive { 1 } else { 0 };
                    (row as u32, class as u32)
                })
                .collect();
            let picked = tape.pick_elems(log_probs, &picks);
            let ws: Vec<S> = counted_indices
                .iter()
                .map(|&i| {
                    let w = if labels[i] == RegionLabel::Positive { pos_w } else { neg_w };
                    scalar(-w / m)
                })
                .collect();
            rc_loss = tape.weighted_sum(picked, ws);
        }

        // Region selection across valid proposals.
        let mut sel_row_node = None;
        let mut selection_target = None;
        if !valid_indices.is_empty() {
            let w5 = tape.param(hp.sel_w);
            let b5 = tape.param(hp.sel_b);
            let mut scores = Vec::with_capacity(valid_indices.len());
            for &node in &rep_nodes {
                let s = tape.matmul(node, w5);
                scores.push(tape.add_row(s, b5));
            }
            let col = tape.concat_rows(&scores); // V x 1
            let row = tape.transpose(col); // 1 x V
            sel_row_node = Some(row);
            // Target: the valid proposal with the highest IoU, ties low.
            let mut best_slot = 0usize;
            let mut best_iou = -1.0f64;
            for (slot, &i) in valid_indices.iter().enumerate() {
                let v = iou(&proposals[i].bbox().expect("valid"), &gold);
                if v > best_iou {
                    best_iou = v;
                    best_slot = slot;
                }
            }
            selection_target = Some(valid_indices[best_slot]);
            rs_loss = tape.nll(row, best_slot);
        }

        // Auxiliary boundary supervision against the gold boundary tokens.
        if weights.delta != 0.0 {
            let gb = targets.gold_boundaries.expect("answerable target has boundaries");
            let mut nlls = Vec::with_capacity(NUM_PROPOSAL_SOURCES * 4);
            for nodes in &coord_nodes {
                for (c, &node) in nodes.iter().enumerate() {
                    nlls.push(tape.nll(node, gb[c]));
                }
            }
            let share = 1.0 / nlls.len() as f64;
            let parts: Vec<(NodeId, S)> = nlls.into_iter().map(|n| (n, scalar(share))).collect();
            aux_loss = tape.add_scaled(&parts);
        }

        result.proposals = proposals;
        result.labels = labels;
        result.logits = logits;
        result.valid_indices = valid_indices;
        result.sel_row = sel_row_node;
        result.counted_indices = counted_indices;
        result.cat_logits = cat_logits_node;
        result.selection_target = selection_target;
    }

    let total = tape.add_scaled(&[
        (ans_loss, S::one()),
        (rc_loss, scalar(weights.alpha)),
        (rs_loss, scalar(weights.beta)),
        (aux_loss, scalar(weights.delta)),
    ]);

    let breakdown = LossBreakdown {
        total: tape.value(total).item().to_f64_lossy(),
        answerable_loss: tape.value(ans_loss).item().to_f64_lossy(),
        rc_loss: tape.value(rc_loss).item().to_f64_lossy(),
        rs_loss: tape.value(rs_loss).item().to_f64_lossy(),
        aux_boundary_loss: tape.value(aux_loss).item().to_f64_lossy(),
    };
    for (value, component) in [
        (breakdown.answerable_loss, "answerable"),
        (breakdown.rc_loss, "rc"),
        (breakdown.rs_loss, "rs"),
        (breakdown.aux_boundary_loss, "aux_boundary"),
        (breakdown.total, "total"),
    ] {
        if !value.is_finite() {
            return Err(ModelError::NonFiniteLoss { component });
        }
    }

    result.total = total;
    result.breakdown = breakdown;
    Ok(result)
}

/// End-user prediction for one (document, field) query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub answerable_prob: f64,
    pub region: Option<BBox>,
    pub text: String,
    /// Selection probability of the chosen region (0 when unanswerable).
    pub score: f64,
    /// True when the answerable gate fired but no valid proposal existed.
    pub no_valid_proposals: bool,
}

impl Prediction {
    fn unanswerable(prob: f64, no_valid: bool) -> Prediction {
        Prediction {
            answerable_prob: prob,
            region: None,
            text: String::new(),
            score: 0.0,
            no_valid_proposals: no_valid,
        }
    }
}

/// Full inference: answerability gate, then proposal + selection, then text
/// extraction.
pub fn predict<S: Scalar>(
    model: &RduModel<S>,
    doc: &Document,
    field_name: &str,
) -> Result<Prediction, ModelError> {
    let input = model.build_input(field_name, doc)?;
    let states = model.encode(&input)?;
    let hp = &model.head_params;
    let ans_prob = answerable(&model.store, hp, states.last().row(0)).to_f64_lossy();
    if ans_prob < 0.5 {
        return Ok(Prediction::unanswerable(ans_prob, false));
    }
    if input.doc_positions().is_empty() {
        return Ok(Prediction::unanswerable(ans_prob, true));
    }
    let (proposals, logits) = propose_regions(&model.store, hp, &states, &input, model.config.k)?;
    let valid: Vec<usize> = (0..proposals.len()).filter(|&i| proposals[i].is_valid()).collect();
    if valid.is_empty() {
        return Ok(Prediction::unanswerable(ans_prob, true));
    }
    let reps: Vec<_> = valid
        .iter()
        .map(|&i| region_representation(&model.store, hp, &proposals[i], &states, &logits, &input))
        .collect();
    let dist = select_region(&model.store, hp, &reps, &vec![true; reps.len()])?;
    let chosen_slot = argmax_selection(&dist);
    let chosen = &proposals[valid[chosen_slot]];
    let region = chosen.bbox().expect("chosen proposal is valid");
    Ok(Prediction {
        answerable_prob: ans_prob,
        region: Some(region),
        text: extract_region_text(doc, &region),
        score: dist[chosen_slot].to_f64_lossy(),
        no_valid_proposals: false,
    })
}

/// Probability of the positive class for every valid proposal (diagnostic;
/// categorization is a training-time task).
pub fn categorize_valid_proposals<S: Scalar>(
    model: &RduModel<S>,
    states: &HiddenStates<S>,
    proposals: &[RegionProposal],
    logits: &ProposalLogits<S>,
    input: &ModelInput,
) -> Vec<(usize, S)> {
    let hp = &model.head_params;
    let valid: Vec<usize> = (0..proposals.len()).filter(|&i| proposals[i].is_valid()).collect();
    let reps: Vec<_> = valid
        .iter()
        .map(|&i| region_representation(&model.store, hp, &proposals[i], states, logits, input))
        .collect();
    let probs = categorize_regions(&model.store, hp, &reps);
    valid.into_iter().zip(probs).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::document::Token;
    use crate::input::Vocab;

    fn tiny_model(seed: u64) -> (RduModel<f64>, Document) {
        let tokens: Vec<Token> = (0..6)
            .map(|i| Token {
                text: ["Total:", "12.50", "Date:", "2021-03-04", "Vendor:", "Acme"][i].to_string(),
                bbox: BBox::new(
                    (i as u32 % 2) * 300 + 40,
                    (i as u32 / 2) * 60 + 80,
                    (i as u32 % 2) * 300 + 140,
                    (i as u32 / 2) * 60 + 92,
                )
                .unwrap(),
                index: 0,
            })
            .collect();
        let doc = Document::new("d", 700.0, 1000.0, tokens);
        let vocab = Vocab::build(
            doc.tokens.iter().map(|t| t.text.as_str()).chain(["total", "date", "vendor"]),
            100,
        );
        let config = ModelConfig {
            encoder: EncoderConfig {
                vocab_size: 0,
                hidden_size: 16,
                num_layers: 2,
                num_heads: 2,
                max_seq_len: 32,
                ..EncoderConfig::default()
            },
            k: 2,
            rep_hidden: 8,
            per_layer_proposal_weights: false,
        };
        let model = RduModel::new(config, vocab, seed).unwrap();
        (model, doc)
    }

    fn annotation_for(doc: &Document, text: &str) -> Annotation {
        let tok = doc.tokens.iter().find(|t| t.text == text).unwrap();
        Annotation {
            field_name: "total".into(),
            gold_region: Some(tok.bbox),
            gold_texts: vec![text.to_string()],
        }
    }

    #[test]
    fn targets_for_answerable_and_unanswerable() {
        let (model, doc) = tiny_model(3);
        let input = model.build_input("total", &doc).unwrap();
        let ann = annotation_for(&doc, "12.50");
        let t = build_targets(&doc, &ann, &input);
        assert!(t.answerable);
        let idx = doc.tokens.iter().find(|t| t.text == "12.50").unwrap().index;
        assert_eq!(t.gold_boundaries, Some([idx; 4]));

        let un = Annotation {
            field_name: "missing".into(),
            gold_region: None,
            gold_texts: vec![],
        };
        let t = build_targets(&doc, &un, &input);
        assert!(!t.answerable);
        assert_eq!(t.gold_boundaries, None);
    }

    #[test]
    fn truncation_downgrades_to_unanswerable() {
        let (mut model, doc) = tiny_model(4);
        model.config.encoder.max_seq_len = 7; // [CLS] total [SEP] t0 t1 t2 [SEP]
        let input = model.build_input("total", &doc).unwrap();
        assert!(input.truncated);
        // Gold on the last token, which truncation dropped.
        let last_text = doc.tokens.last().unwrap().text.clone();
        let ann = annotation_for(&doc, &last_text);
        let t = build_targets(&doc, &ann, &input);
        assert!(!t.answerable);
    }

    #[test]
    fn loss_decomposition_identity() {
        let (model, doc) = tiny_model(5);
        let input = model.build_input("total", &doc).unwrap();
        let ann = annotation_for(&doc, "12.50");
        let targets = build_targets(&doc, &ann, &input);
        let weights = LossWeights {
            alpha: 1.0,
            beta: 0.01,
            delta: 1.0,
        };
        let mut tape = Tape::new(&model.store);
        let fwd = training_forward(&model, &mut tape, &input, &targets, &weights).unwrap();
        let b = &fwd.breakdown;
        let recomputed = b.answerable_loss
            + weights.alpha * b.rc_loss
            + weights.beta * b.rs_loss
            + weights.delta * b.aux_boundary_loss;
        assert!((b.total - recomputed).abs() < 1e-12);
        assert!(b.total.is_finite() && b.total > 0.0);
        assert!(!fwd.proposals.is_empty());
        assert_eq!(fwd.proposals.len(), 3 * model.config.k.pow(4) as usize);
    }

    #[test]
    fn unanswerable_example_keeps_only_answerable_loss() {
        let (model, doc) = tiny_model(6);
        let input = model.build_input("missing field", &doc).unwrap();
        let targets = ExampleTargets {
            answerable: false,
            gold_region: None,
            gold_boundaries: None,
        };
        let mut tape = Tape::new(&model.store);
        let fwd =
            training_forward(&model, &mut tape, &input, &targets, &LossWeights::default()).unwrap();
        assert_eq!(fwd.breakdown.rc_loss, 0.0);
        assert_eq!(fwd.breakdown.rs_loss, 0.0);
        assert_eq!(fwd.breakdown.aux_boundary_loss, 0.0);
        assert!((fwd.breakdown.total - fwd.breakdown.answerable_loss).abs() < 1e-15);
    }

    #[test]
    fn training_forward_matches_plain_heads() {
        // The tape path and the plain inference path must agree on the
        // proposal set and on every head output.
        let (model, doc) = tiny_model(7);
        let input = model.build_input("total", &doc).unwrap();
        let ann = annotation_for(&doc, "12.50");
        let targets = build_targets(&doc, &ann, &input);
        let mut tape = Tape::new(&model.store);
        let fwd =
            training_forward(&model, &mut tape, &input, &targets, &LossWeights::default()).unwrap();

        let states = model.encode(&input).unwrap();
        let (proposals, logits) =
            propose_regions(&model.store, &model.head_params, &states, &input, model.config.k)
                .unwrap();
        assert_eq!(fwd.proposals, proposals);
        for (a, b) in fwd.logits.per_layer.iter().zip(&logits.per_layer) {
            for c in 0..4 {
                for (x, y) in a.coord(c).iter().zip(b.coord(c)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }

        // Selection distribution agreement.
        let valid = &fwd.valid_indices;
        let reps: Vec<_> = valid
            .iter()
            .map(|&i| {
                region_representation(
                    &model.store,
                    &model.head_params,
                    &proposals[i],
                    &states,
                    &logits,
                    &input,
                )
            })
            .collect();
        let dist =
            select_region(&model.store, &model.head_params, &reps, &vec![true; reps.len()])
                .unwrap();
        let sel_row = tape.value(fwd.sel_row.unwrap()).clone();
        let mut tape_dist = sel_row.data().to_vec();
        crate::tensor::softmax_slice(&mut tape_dist);
        for (a, b) in dist.iter().zip(&tape_dist) {
            assert!((a - b).abs() < 1e-12);
        }

        // Answerability agreement.
        let p_plain = answerable(&model.store, &model.head_params, states.last().row(0));
        let mut ans = tape.value(fwd.ans_logits).data().to_vec();
        crate::tensor::softmax_slice(&mut ans);
        assert!((p_plain - ans[1]).abs() < 1e-12);
    }

    #[test]
    fn predict_contract_on_untrained_model() {
        let (model, doc) = tiny_model(8);
        let p = predict(&model, &doc, "total").unwrap();
        assert!((0.0..=1.0).contains(&p.answerable_prob));
        if let Some(region) = p.region {
            assert_eq!(p.text, extract_region_text(&doc, &region));
            assert!(p.score > 0.0);
        } else {
            assert!(p.text.is_empty());
            assert_eq!(p.score, 0.0);
        }
    }

    #[test]
    fn predict_single_token_document() {
        let (model, _) = tiny_model(9);
        let doc = Document::new(
            "one",
            700.0,
            1000.0,
            vec![Token {
                text: "only".into(),
                bbox: BBox::new(100, 100, 160, 112).unwrap(),
                index: 0,
            }],
        );
        let p = predict(&model, &doc, "total").unwrap();
        if let Some(region) = p.region {
            assert_eq!(region, doc.tokens[0].bbox);
            assert_eq!(p.text, "only");
        }
    }
}
