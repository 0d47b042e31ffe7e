//! The tree-structured decoder: frontier-node input features, stacked
//! relation-aware layers, and the three action heads.
//!
//! Two evaluation paths share the same parameters and formulas:
//!
//! - a teacher-forced parallel path on the autodiff tape, used for
//!   training, which attends over a whole traversal at once with a causal
//!   mask and a precomputed relation matrix;
//! - an incremental path on plain tensors, used for beam search, which
//!   carries per-layer key/value caches and extends relation sets online.
//!
//! The test suite checks that the two paths agree step for step.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ast::{Action, StepOrigin, TraversalRecord};
use crate::data::SchemaInput;
use crate::grammar::{Grammar, RuleId, TypeId, TypeKind};
use crate::model::{mha, residual_ln, AttnParams, MemoryVar, Model, LN_EPS};
use crate::nn::tensor::matmul_into;
use crate::nn::{ParamId, Tape, Tensor, Var};
use crate::relations::{
    extend_incremental, tuple_to_index, RelationMatrix, RelationSet, RelationTuple,
};

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("node depth {depth} exceeds depth table size {d_max}")]
    DepthOverflow { depth: usize, d_max: usize },
    #[error("no legal rules for node type")]
    NoLegalRules,
    #[error(transparent)]
    Relation(#[from] crate::relations::RelationError),
    #[error(transparent)]
    Grammar(#[from] crate::grammar::GrammarError),
}

/// Per-step features fed to the input module.
#[derive(Debug, Clone)]
pub struct StepInput {
    pub type_id: TypeId,
    pub parent_rule: Option<RuleId>,
    pub depth: u16,
    pub origin: StepOrigin,
}

impl StepInput {
    pub fn of(step: &crate::ast::TraversalStep) -> StepInput {
        StepInput {
            type_id: step.node_type,
            parent_rule: step.parent_rule,
            depth: step.depth,
            origin: step.origin,
        }
    }
}

fn rule_slot(model: &Model, parent_rule: Option<RuleId>) -> usize {
    parent_rule
        .map(|r| r.index())
        .unwrap_or_else(|| model.no_parent_rule_slot())
}

fn check_depth(model: &Model, depth: u16) -> Result<usize, DecoderError> {
    let depth = depth as usize;
    if depth >= model.dims.d_max {
        return Err(DecoderError::DepthOverflow {
            depth,
            d_max: model.dims.d_max,
        });
    }
    Ok(depth)
}

// ---------------------------------------------------------------------------
// Teacher-forced parallel path (training)
// ---------------------------------------------------------------------------

/// Per-example constants reused across steps of the parallel loss.
pub struct ParallelCtx {
    /// Rule embedding rows transposed, d x n_rules.
    rules_t: Var,
    /// Token embedding transposed, d x V.
    tokens_t: Var,
    /// Memory rows projected by the shared pointer key map, m x d.
    ptr_keys: Var,
    token_var: Var,
    rule_var: Var,
}

fn prepare_parallel_ctx(model: &Model, tape: &mut Tape, memory: &MemoryVar) -> ParallelCtx {
    let rule_var = tape.param(&model.store, model.params.rule_embed);
    let rules_only = tape.slice_rows(rule_var, 0, model.dims.n_rules);
    let rules_t = tape.transpose(rules_only);
    let token_var = tape.param(&model.store, model.params.token_embed);
    let tokens_t = tape.transpose(token_var);
    let ptr_k = tape.param(&model.store, model.params.ptr_k);
    let ptr_keys = tape.matmul(memory.mem, ptr_k);
    ParallelCtx {
        rules_t,
        tokens_t,
        ptr_keys,
        token_var,
        rule_var,
    }
}

/// Previous-action embedding rows for teacher forcing: the learned start
/// embedding followed by the embedding of each gold action.
fn action_embed_rows(
    model: &Model,
    tape: &mut Tape,
    ctx: &ParallelCtx,
    memory: &MemoryVar,
    actions: &[Action],
) -> Vec<Var> {
    let mut rows = Vec::with_capacity(actions.len() + 1);
    let start = tape.param(&model.store, model.params.start_action);
    rows.push(start);
    for a in actions {
        let row = match *a {
            Action::ApplyRule(r) => tape.embed_rows(ctx.rule_var, &[r.index()]),
            Action::SelectTable(t) => tape.slice_rows(memory.mem, memory.t_span.start + t, 1),
            Action::SelectColumn(c) => tape.slice_rows(memory.mem, memory.c_span.start + c, 1),
            Action::GenToken(w) => tape.embed_rows(ctx.token_var, &[w as usize]),
        };
        rows.push(row);
    }
    rows
}

/// Sum of four embeddings, layer-normalized: the decoder input features
/// for all steps at once (T x d).
fn input_features(
    model: &Model,
    tape: &mut Tape,
    steps: &[StepInput],
    prev_actions: &[Var],
) -> Result<Var, DecoderError> {
    let mut type_ids = Vec::with_capacity(steps.len());
    let mut rule_slots = Vec::with_capacity(steps.len());
    let mut depths = Vec::with_capacity(steps.len());
    for s in steps {
        type_ids.push(s.type_id.index());
        rule_slots.push(rule_slot(model, s.parent_rule));
        depths.push(check_depth(model, s.depth)?);
    }
    let type_var = tape.param(&model.store, model.params.type_embed);
    let rule_var = tape.param(&model.store, model.params.rule_embed);
    let depth_var = tape.param(&model.store, model.params.depth_embed);
    let t_rows = tape.embed_rows(type_var, &type_ids);
    let r_rows = tape.embed_rows(rule_var, &rule_slots);
    let d_rows = tape.embed_rows(depth_var, &depths);
    let a_rows = tape.concat_rows(prev_actions);
    let summed = tape.add_all(&[a_rows, t_rows, r_rows, d_rows]);
    let g = tape.param(&model.store, model.params.input_ln.g);
    let b = tape.param(&model.store, model.params.input_ln.b);
    Ok(tape.layer_norm(summed, g, b, LN_EPS))
}

fn relation_index_matrix(model: &Model, matrix: &RelationMatrix) -> Vec<usize> {
    let t = matrix.size;
    let mut idx = vec![0usize; t * t];
    for j in 0..t {
        for i in 0..t {
            idx[j * t + i] =
                tuple_to_index(matrix.get(j, i), model.dims.r).expect("tuple within clamp");
        }
    }
    idx
}

/// Run the stacked decoder layers over all steps in parallel.
fn decoder_stack(
    model: &Model,
    tape: &mut Tape,
    x0: Var,
    memory: &MemoryVar,
    rel_idx: &[usize],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Var {
    let store = &model.store;
    let on_tape = |tape: &mut Tape, id: ParamId| tape.param(store, id);
    let rel_key = tape.param(store, model.params.rel_key);
    let rel_val = tape.param(store, model.params.rel_val);
    let p = model.cfg.dropout;
    let mut rng = dropout_rng;
    let mut x = x0;
    for layer in &model.params.dec_layers {
        let mut attn = mha(
            tape,
            x,
            x,
            &layer.self_attn,
            &on_tape,
            model.dims.h,
            true,
            Some((rel_key, rel_val, rel_idx)),
        );
        if let Some(r) = rng.as_deref_mut() {
            attn = tape.dropout(attn, p, r);
        }
        x = residual_ln(tape, x, attn, &layer.ln1, &on_tape);
        let mut cross = mha(
            tape,
            x,
            memory.mem,
            &layer.cross,
            &on_tape,
            model.dims.h,
            false,
            None,
        );
        if let Some(r) = rng.as_deref_mut() {
            cross = tape.dropout(cross, p, r);
        }
        x = residual_ln(tape, x, cross, &layer.ln2, &on_tape);
        let mut f = crate::model::ffn(tape, x, &layer.ffn, &on_tape);
        if let Some(r) = rng.as_deref_mut() {
            f = tape.dropout(f, p, r);
        }
        x = residual_ln(tape, x, f, &layer.ln3, &on_tape);
    }
    x
}

/// Mean over heads of pointer-attention weights of `state` against rows
/// `span` of the projected memory keys.
fn pointer_probs_taped(
    model: &Model,
    tape: &mut Tape,
    state: Var,
    ptr_keys: Var,
    span: std::ops::Range<usize>,
) -> Var {
    assert!(!span.is_empty(), "pointer over empty span");
    let d = model.dims.d;
    let h = model.dims.h;
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let wq = tape.param(&model.store, model.params.ptr_q);
    let q = tape.matmul(state, wq);
    let keys = tape.slice_rows(ptr_keys, span.start, span.len());
    let mut heads = Vec::with_capacity(h);
    for head in 0..h {
        let qh = tape.slice_cols(q, head * dh, dh);
        let kh = tape.slice_cols(keys, head * dh, dh);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scores = tape.scale(scores, scale);
        heads.push(tape.softmax_rows(scores, None));
    }
    let sum = tape.add_all(&heads);
    tape.scale(sum, 1.0 / h as f64)
}

/// Log-probability (as a tape scalar) of the gold action at one step of
/// the parallel pass.
#[allow(clippy::too_many_arguments)]
fn step_log_prob(
    model: &Model,
    tape: &mut Tape,
    g: &Grammar,
    ctx: &ParallelCtx,
    memory: &MemoryVar,
    schema: &SchemaInput,
    state: Var,
    input0: Var,
    step: &StepInput,
    action: Action,
) -> Result<Var, DecoderError> {
    match action {
        Action::ApplyRule(r) => {
            let legal = g.rules_for_type(step.type_id)?;
            if legal.is_empty() {
                return Err(DecoderError::NoLegalRules);
            }
            let w_ar = tape.param(&model.store, model.params.w_ar);
            let proj = tape.matmul(state, w_ar);
            let scores = tape.matmul(proj, ctx.rules_t);
            let mut keep = vec![false; model.dims.n_rules];
            for lr in legal {
                keep[lr.index()] = true;
            }
            let probs = tape.softmax_rows(scores, Some(&keep));
            let p = tape.pick(probs, 0, r.index());
            Ok(tape.log(p))
        }
        Action::SelectTable(t) => {
            let probs = pointer_probs_taped(model, tape, state, ctx.ptr_keys, memory.t_span.clone());
            let p = tape.pick(probs, 0, t);
            Ok(tape.log(p))
        }
        Action::SelectColumn(c) => {
            let probs = pointer_probs_taped(model, tape, state, ctx.ptr_keys, memory.c_span.clone());
            let p = tape.pick(probs, 0, c);
            Ok(tape.log(p))
        }
        Action::GenToken(w) => {
            let w_g = tape.param(&model.store, model.params.w_g);
            let gate_in = tape.concat_cols(state, input0);
            let gate_logit = tape.matmul(gate_in, w_g);
            let gate = tape.sigmoid(gate_logit);
            let w_gen = tape.param(&model.store, model.params.w_gen);
            let proj = tape.matmul(state, w_gen);
            let gen_scores = tape.matmul(proj, ctx.tokens_t);
            let p_gen = tape.softmax_rows(gen_scores, None);
            let copy = pointer_probs_taped(model, tape, state, ctx.ptr_keys, memory.q_span.clone());
            let q_ids: Vec<usize> = schema.question_tokens.iter().map(|&t| t as usize).collect();
            let p_copy = tape.scatter_cols(copy, &q_ids, model.dims.vocab);
            let gen_part = tape.mul_scalar_var(p_gen, gate);
            let inv_gate = tape.one_minus(gate);
            let copy_part = tape.mul_scalar_var(p_copy, inv_gate);
            let mixed = tape.add(gen_part, copy_part);
            let p = tape.pick(mixed, 0, w as usize);
            Ok(tape.log(p))
        }
    }
}

/// Teacher-forced negative log-likelihood of one traversal (Eq.-style sum
/// over steps), computed with full parallel self-attention.
pub fn teacher_forced_loss(
    model: &Model,
    tape: &mut Tape,
    g: &Grammar,
    record: &TraversalRecord,
    matrix: &RelationMatrix,
    memory: &MemoryVar,
    schema: &SchemaInput,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var, DecoderError> {
    assert_eq!(record.len(), matrix.size, "record/matrix length mismatch");
    let ctx = prepare_parallel_ctx(model, tape, memory);
    let steps: Vec<StepInput> = record.steps.iter().map(StepInput::of).collect();
    let actions: Vec<Action> = record.steps.iter().map(|s| s.action).collect();
    let prev_rows = action_embed_rows(model, tape, &ctx, memory, &actions[..actions.len() - 1]);
    let x0 = input_features(model, tape, &steps, &prev_rows)?;
    let rel_idx = relation_index_matrix(model, matrix);
    let states = decoder_stack(model, tape, x0, memory, &rel_idx, dropout_rng);

    let mut losses = Vec::with_capacity(steps.len());
    for (j, (step, action)) in steps.iter().zip(&actions).enumerate() {
        let state = tape.slice_rows(states, j, 1);
        let input0 = tape.slice_rows(x0, j, 1);
        let lp = step_log_prob(model, tape, g, &ctx, memory, schema, state, input0, step, *action)?;
        losses.push(lp);
    }
    let total = tape.add_all(&losses);
    Ok(tape.scale(total, -1.0))
}

// ---------------------------------------------------------------------------
// Incremental path (inference)
// ---------------------------------------------------------------------------

fn linear_row(x: &[f64], w: &Tensor, bias: Option<&Tensor>) -> Vec<f64> {
    let (din, dout) = w.shape();
    debug_assert_eq!(x.len(), din);
    let mut out = vec![0.0; dout];
    matmul_into(x, 1, din, w.data(), dout, &mut out);
    if let Some(b) = bias {
        for (o, &bv) in out.iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    out
}

fn ln_row(x: &[f64], g: &Tensor, b: &Tensor) -> Vec<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, &v)| (v - mean) * inv * g.data()[i] + b.data()[i])
        .collect()
}

fn softmax_inplace(scores: &mut [f64]) {
    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - mx).exp();
        z += *s;
    }
    for s in scores.iter_mut() {
        *s /= z;
    }
}

/// Static per-example context shared by all hypotheses during inference.
pub struct MemoryCtx {
    pub memory: Tensor,
    pub q_span: std::ops::Range<usize>,
    pub t_span: std::ops::Range<usize>,
    pub c_span: std::ops::Range<usize>,
    pub question_tokens: Vec<u32>,
    /// Per decoder layer: memory projected by the cross-attention key/value
    /// maps.
    cross_k: Vec<Tensor>,
    cross_v: Vec<Tensor>,
    /// Memory projected by the shared pointer key map.
    ptr_keys: Tensor,
}

impl MemoryCtx {
    pub fn new(model: &Model, memory: Tensor, spans: (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>), question_tokens: Vec<u32>) -> MemoryCtx {
        let m = memory.rows();
        let d = model.dims.d;
        let mut cross_k = Vec::new();
        let mut cross_v = Vec::new();
        for layer in &model.params.dec_layers {
            let wk = &model.store.get(layer.cross.wk).tensor;
            let bk = &model.store.get(layer.cross.bk).tensor;
            let wv = &model.store.get(layer.cross.wv).tensor;
            let bv = &model.store.get(layer.cross.bv).tensor;
            let mut k = Tensor::zeros(m, d);
            matmul_into(memory.data(), m, d, wk.data(), d, k.data_mut());
            let mut v = Tensor::zeros(m, d);
            matmul_into(memory.data(), m, d, wv.data(), d, v.data_mut());
            for r in 0..m {
                for c in 0..d {
                    let kv = k.at(r, c) + bk.data()[c];
                    k.set(r, c, kv);
                    let vv = v.at(r, c) + bv.data()[c];
                    v.set(r, c, vv);
                }
            }
            cross_k.push(k);
            cross_v.push(v);
        }
        let wp = &model.store.get(model.params.ptr_k).tensor;
        let mut ptr_keys = Tensor::zeros(m, d);
        matmul_into(memory.data(), m, d, wp.data(), d, ptr_keys.data_mut());
        MemoryCtx {
            memory,
            q_span: spans.0,
            t_span: spans.1,
            c_span: spans.2,
            question_tokens,
            cross_k,
            cross_v,
            ptr_keys,
        }
    }
}

/// Per-hypothesis incremental decoder state.
#[derive(Debug, Clone)]
pub struct DecoderState {
    /// Per layer, packed key/value rows of steps 0..j (j*d floats each).
    k_cache: Vec<Vec<f64>>,
    v_cache: Vec<Vec<f64>>,
    pub rel_sets: Vec<RelationSet>,
    prev_action: Vec<f64>,
    pub step: usize,
}

impl DecoderState {
    pub fn new(model: &Model) -> DecoderState {
        DecoderState {
            k_cache: vec![Vec::new(); model.cfg.l],
            v_cache: vec![Vec::new(); model.cfg.l],
            rel_sets: Vec::new(),
            prev_action: model.store.get(model.params.start_action).tensor.data().to_vec(),
            step: 0,
        }
    }
}

/// Everything produced while scoring one candidate step; applied to the
/// state only if the candidate survives the beam.
#[derive(Debug, Clone)]
pub struct StepExtension {
    k_rows: Vec<Vec<f64>>,
    v_rows: Vec<Vec<f64>>,
    rel_set: RelationSet,
}

/// Kind-specific probability distribution of one decoding step.
#[derive(Debug, Clone)]
pub enum StepDistribution {
    /// `(rule, log prob)` over the legal rules only.
    Rules(Vec<(RuleId, f64)>),
    /// Log prob per table index.
    Tables(Vec<f64>),
    /// Log prob per column index.
    Columns(Vec<f64>),
    /// Log prob per vocabulary token (the end marker included).
    Tokens(Vec<f64>),
}

fn attention_incremental(
    model: &Model,
    h_in: &[f64],
    attn: &AttnParams,
    k_rows: &[f64],
    v_rows: &[f64],
    steps: usize,
    rel: Option<(&RelationSet, &Tensor, &Tensor)>,
) -> Vec<f64> {
    let d = model.dims.d;
    let heads = model.dims.h;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let store = &model.store;
    let q = linear_row(h_in, &store.get(attn.wq).tensor, Some(&store.get(attn.bq).tensor));
    let mut merged = vec![0.0; d];
    for head in 0..heads {
        let qh = &q[head * dh..(head + 1) * dh];
        let mut scores = Vec::with_capacity(steps);
        for i in 0..steps {
            let kh = &k_rows[i * d + head * dh..i * d + (head + 1) * dh];
            let mut dot = 0.0;
            for (a, b) in qh.iter().zip(kh) {
                dot += a * b;
            }
            let mut s = dot * scale;
            if let Some((set, rel_key, _)) = rel {
                let idx = tuple_to_index(set.entries[i], model.dims.r).expect("tuple in range");
                let emb = rel_key.row(idx);
                let mut zdot = 0.0;
                for (a, b) in qh.iter().zip(emb) {
                    zdot += a * b;
                }
                s += zdot * scale;
            }
            scores.push(s);
        }
        softmax_inplace(&mut scores);
        let out = &mut merged[head * dh..(head + 1) * dh];
        for (i, &w) in scores.iter().enumerate() {
            let vh = &v_rows[i * d + head * dh..i * d + (head + 1) * dh];
            for (o, &vv) in out.iter_mut().zip(vh) {
                *o += w * vv;
            }
        }
        if let Some((set, _, rel_val)) = rel {
            let mut zacc = vec![0.0; dh];
            for (i, &w) in scores.iter().enumerate() {
                let idx = tuple_to_index(set.entries[i], model.dims.r).expect("tuple in range");
                let emb = rel_val.row(idx);
                for (o, &zv) in zacc.iter_mut().zip(emb) {
                    *o += w * zv;
                }
            }
            for (o, z) in out.iter_mut().zip(zacc) {
                *o += z;
            }
        }
    }
    linear_row(&merged, &store.get(attn.wo).tensor, Some(&store.get(attn.bo).tensor))
}

fn pointer_probs_incremental(
    model: &Model,
    state: &[f64],
    ctx: &MemoryCtx,
    span: std::ops::Range<usize>,
) -> Vec<f64> {
    assert!(!span.is_empty(), "pointer over empty span");
    let d = model.dims.d;
    let heads = model.dims.h;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear_row(state, &model.store.get(model.params.ptr_q).tensor, None);
    let mut probs = vec![0.0; span.len()];
    for head in 0..heads {
        let qh = &q[head * dh..(head + 1) * dh];
        let mut scores: Vec<f64> = span
            .clone()
            .map(|r| {
                let kh = &ctx.ptr_keys.row(r)[head * dh..(head + 1) * dh];
                let mut dot = 0.0;
                for (a, b) in qh.iter().zip(kh) {
                    dot += a * b;
                }
                dot * scale
            })
            .collect();
        softmax_inplace(&mut scores);
        for (p, s) in probs.iter_mut().zip(&scores) {
            *p += s;
        }
    }
    for p in probs.iter_mut() {
        *p /= heads as f64;
    }
    probs
}

/// Score one candidate frontier node with the incremental decoder.
///
/// Returns the action distribution for the node's kind plus the state
/// extension to apply if an action from this step is kept.
pub fn decode_step(
    model: &Model,
    g: &Grammar,
    ctx: &MemoryCtx,
    state: &DecoderState,
    step: &StepInput,
) -> Result<(StepDistribution, StepExtension), DecoderError> {
    let d = model.dims.d;
    let store = &model.store;
    let depth = check_depth(model, step.depth)?;
    let rel_set = extend_incremental(&state.rel_sets, step.origin, model.dims.r)?;

    // Input feature: LN(prev action + type + parent rule + depth).
    let type_row = store.get(model.params.type_embed).tensor.row(step.type_id.index());
    let rule_row = store.get(model.params.rule_embed).tensor.row(rule_slot(model, step.parent_rule));
    let depth_row = store.get(model.params.depth_embed).tensor.row(depth);
    let summed: Vec<f64> = (0..d)
        .map(|i| state.prev_action[i] + type_row[i] + rule_row[i] + depth_row[i])
        .collect();
    let input0 = ln_row(
        &summed,
        &store.get(model.params.input_ln.g).tensor,
        &store.get(model.params.input_ln.b).tensor,
    );

    let rel_key = &store.get(model.params.rel_key).tensor;
    let rel_val = &store.get(model.params.rel_val).tensor;
    let steps_incl = state.step + 1;
    let mut h = input0.clone();
    let mut k_rows_out = Vec::with_capacity(model.cfg.l);
    let mut v_rows_out = Vec::with_capacity(model.cfg.l);
    for (l, layer) in model.params.dec_layers.iter().enumerate() {
        let k_new = linear_row(&h, &store.get(layer.self_attn.wk).tensor, Some(&store.get(layer.self_attn.bk).tensor));
        let v_new = linear_row(&h, &store.get(layer.self_attn.wv).tensor, Some(&store.get(layer.self_attn.bv).tensor));
        let mut k_all = state.k_cache[l].clone();
        k_all.extend_from_slice(&k_new);
        let mut v_all = state.v_cache[l].clone();
        v_all.extend_from_slice(&v_new);
        let self_out = attention_incremental(
            model,
            &h,
            &layer.self_attn,
            &k_all,
            &v_all,
            steps_incl,
            Some((&rel_set, rel_key, rel_val)),
        );
        let mut x: Vec<f64> = h.iter().zip(&self_out).map(|(a, b)| a + b).collect();
        h = ln_row(&x, &store.get(layer.ln1.g).tensor, &store.get(layer.ln1.b).tensor);

        let cross_out = attention_incremental(
            model,
            &h,
            &layer.cross,
            ctx.cross_k[l].data(),
            ctx.cross_v[l].data(),
            ctx.memory.rows(),
            None,
        );
        x = h.iter().zip(&cross_out).map(|(a, b)| a + b).collect();
        h = ln_row(&x, &store.get(layer.ln2.g).tensor, &store.get(layer.ln2.b).tensor);

        let mid = linear_row(&h, &store.get(layer.ffn.w1).tensor, Some(&store.get(layer.ffn.b1).tensor));
        let mid: Vec<f64> = mid.into_iter().map(|v| v.max(0.0)).collect();
        let f = linear_row(&mid, &store.get(layer.ffn.w2).tensor, Some(&store.get(layer.ffn.b2).tensor));
        x = h.iter().zip(&f).map(|(a, b)| a + b).collect();
        h = ln_row(&x, &store.get(layer.ln3.g).tensor, &store.get(layer.ln3.b).tensor);

        k_rows_out.push(k_new);
        v_rows_out.push(v_new);
    }

    let dist = match g.kind(step.type_id) {
        TypeKind::NonTerminal => {
            let legal = g.rules_for_type(step.type_id)?;
            if legal.is_empty() {
                return Err(DecoderError::NoLegalRules);
            }
            let proj = linear_row(&h, &store.get(model.params.w_ar).tensor, None);
            let rules = &store.get(model.params.rule_embed).tensor;
            let mut scores: Vec<f64> = legal
                .iter()
                .map(|r| {
                    let row = rules.row(r.index());
                    proj.iter().zip(row).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            // Masked softmax over the legal subset only.
            softmax_inplace(&mut scores);
            StepDistribution::Rules(
                legal
                    .iter()
                    .zip(&scores)
                    .map(|(&r, &p)| (r, p.ln()))
                    .collect(),
            )
        }
        TypeKind::TerminalTable => {
            let probs = pointer_probs_incremental(model, &h, ctx, ctx.t_span.clone());
            StepDistribution::Tables(probs.into_iter().map(f64::ln).collect())
        }
        TypeKind::TerminalColumn => {
            let probs = pointer_probs_incremental(model, &h, ctx, ctx.c_span.clone());
            StepDistribution::Columns(probs.into_iter().map(f64::ln).collect())
        }
        TypeKind::TerminalToken => {
            let gate_in: Vec<f64> = h.iter().chain(&input0).cloned().collect();
            let w_g = &store.get(model.params.w_g).tensor;
            let logit: f64 = gate_in.iter().zip(w_g.data()).map(|(a, b)| a * b).sum();
            let gate = 1.0 / (1.0 + (-logit).exp());
            let proj = linear_row(&h, &store.get(model.params.w_gen).tensor, None);
            let tokens = &store.get(model.params.token_embed).tensor;
            let mut gen_scores: Vec<f64> = (0..model.dims.vocab)
                .map(|w| {
                    let row = tokens.row(w);
                    proj.iter().zip(row).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            softmax_inplace(&mut gen_scores);
            let copy = pointer_probs_incremental(model, &h, ctx, ctx.q_span.clone());
            let mut mixed: Vec<f64> = gen_scores.into_iter().map(|p| gate * p).collect();
            for (k, &tok) in ctx.question_tokens.iter().enumerate() {
                mixed[tok as usize] += (1.0 - gate) * copy[k];
            }
            StepDistribution::Tokens(mixed.into_iter().map(f64::ln).collect())
        }
    };

    Ok((
        dist,
        StepExtension {
            k_rows: k_rows_out,
            v_rows: v_rows_out,
            rel_set,
        },
    ))
}

/// Embedding of a chosen action, used as the next step's previous-action
/// input.
pub fn action_embedding(model: &Model, ctx: &MemoryCtx, action: Action) -> Vec<f64> {
    let store = &model.store;
    match action {
        Action::ApplyRule(r) => store.get(model.params.rule_embed).tensor.row(r.index()).to_vec(),
        Action::SelectTable(t) => ctx.memory.row(ctx.t_span.start + t).to_vec(),
        Action::SelectColumn(c) => ctx.memory.row(ctx.c_span.start + c).to_vec(),
        Action::GenToken(w) => store.get(model.params.token_embed).tensor.row(w as usize).to_vec(),
    }
}

impl DecoderState {
    /// Commit a scored step: extend caches, relation sets and the
    /// previous-action embedding.
    pub fn apply(&mut self, ext: &StepExtension, action_embed: Vec<f64>) {
        for (cache, row) in self.k_cache.iter_mut().zip(&ext.k_rows) {
            cache.extend_from_slice(row);
        }
        for (cache, row) in self.v_cache.iter_mut().zip(&ext.v_rows) {
            cache.extend_from_slice(row);
        }
        self.rel_sets.push(ext.rel_set.clone());
        self.prev_action = action_embed;
        self.step += 1;
    }
}

/// Log-prob of a specific action under a step distribution.
pub fn action_log_prob(dist: &StepDistribution, action: Action) -> f64 {
    match (dist, action) {
        (StepDistribution::Rules(rules), Action::ApplyRule(r)) => rules
            .iter()
            .find(|(id, _)| *id == r)
            .map(|(_, lp)| *lp)
            .unwrap_or(f64::NEG_INFINITY),
        (StepDistribution::Tables(v), Action::SelectTable(t)) => v[t],
        (StepDistribution::Columns(v), Action::SelectColumn(c)) => v[c],
        (StepDistribution::Tokens(v), Action::GenToken(w)) => v[w as usize],
        _ => f64::NEG_INFINITY,
    }
}

/// Run the incremental decoder over a gold record, summing gold-action log
/// probs. Used by tests and the incremental/parallel consistency check.
pub fn incremental_nll(
    model: &Model,
    g: &Grammar,
    ctx: &MemoryCtx,
    record: &TraversalRecord,
) -> Result<f64, DecoderError> {
    let mut state = DecoderState::new(model);
    let mut total = 0.0;
    for step in &record.steps {
        let si = StepInput::of(step);
        let (dist, ext) = decode_step(model, g, ctx, &state, &si)?;
        total += action_log_prob(&dist, step.action);
        state.apply(&ext, action_embedding(model, ctx, step.action));
    }
    Ok(-total)
}
