//! Model parameters and the encoder.
//!
//! The encoder is a plain Transformer over the packed sequence
//! `[question tokens; table name tokens; column name tokens]`; each schema
//! item is mean-pooled into a single memory row afterwards, giving the
//! memory layout `[Q; T; C]` the decoder points into.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::data::SchemaInput;
use crate::grammar::Grammar;
use crate::nn::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct AttnParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct LnParams {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct EncLayerParams {
    pub attn: AttnParams,
    pub ln1: LnParams,
    pub ffn: FfnParams,
    pub ln2: LnParams,
}

#[derive(Debug, Clone, Copy)]
pub struct DecLayerParams {
    pub self_attn: AttnParams,
    pub ln1: LnParams,
    pub cross: AttnParams,
    pub ln2: LnParams,
    pub ffn: FfnParams,
    pub ln3: LnParams,
}

/// Parameter handles for the whole model.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub token_embed: ParamId,
    pub type_embed: ParamId,
    /// One row per rule plus a trailing "no parent rule" slot for the root.
    pub rule_embed: ParamId,
    pub depth_embed: ParamId,
    pub rel_key: ParamId,
    pub rel_val: ParamId,
    /// Previous-action embedding for the first decoding step.
    pub start_action: ParamId,
    /// Learned positions for schema-item tokens: row 0 tables, row 1 columns.
    pub item_pos: ParamId,
    pub input_ln: LnParams,
    pub enc_layers: Vec<EncLayerParams>,
    pub dec_layers: Vec<DecLayerParams>,
    pub w_ar: ParamId,
    pub w_gen: ParamId,
    pub w_g: ParamId,
    pub ptr_q: ParamId,
    pub ptr_k: ParamId,
}

/// Sizes the parameter tables were built for.
#[derive(Debug, Clone, Copy)]
pub struct ModelDims {
    pub d: usize,
    pub h: usize,
    pub d_head: usize,
    pub vocab: usize,
    pub n_types: usize,
    pub n_rules: usize,
    pub d_max: usize,
    pub r: usize,
    pub n_relations: usize,
    pub ffn: usize,
}

pub struct Model {
    pub store: ParamStore,
    pub params: ModelParams,
    pub dims: ModelDims,
    pub cfg: TrainConfig,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
}

fn small_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
}

fn add_attn(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) -> AttnParams {
    AttnParams {
        wq: store.add(&format!("{prefix}/wq"), xavier(rng, d, d)),
        bq: store.add(&format!("{prefix}/bq"), Tensor::zeros(1, d)),
        wk: store.add(&format!("{prefix}/wk"), xavier(rng, d, d)),
        bk: store.add(&format!("{prefix}/bk"), Tensor::zeros(1, d)),
        wv: store.add(&format!("{prefix}/wv"), xavier(rng, d, d)),
        bv: store.add(&format!("{prefix}/bv"), Tensor::zeros(1, d)),
        wo: store.add(&format!("{prefix}/wo"), xavier(rng, d, d)),
        bo: store.add(&format!("{prefix}/bo"), Tensor::zeros(1, d)),
    }
}

fn add_ln(store: &mut ParamStore, prefix: &str, d: usize) -> LnParams {
    LnParams {
        g: store.add(&format!("{prefix}/g"), Tensor::new(1, d, vec![1.0; d])),
        b: store.add(&format!("{prefix}/b"), Tensor::zeros(1, d)),
    }
}

fn add_ffn(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, ffn: usize) -> FfnParams {
    FfnParams {
        w1: store.add(&format!("{prefix}/w1"), xavier(rng, d, ffn)),
        b1: store.add(&format!("{prefix}/b1"), Tensor::zeros(1, ffn)),
        w2: store.add(&format!("{prefix}/w2"), xavier(rng, ffn, d)),
        b2: store.add(&format!("{prefix}/b2"), Tensor::zeros(1, d)),
    }
}

pub const LN_EPS: f64 = 1e-5;

impl Model {
    /// Build a model with freshly initialized parameters. Creation order is
    /// fixed, so a given seed always produces identical parameters.
    pub fn new(cfg: &TrainConfig, grammar: &Grammar, vocab_size: usize) -> Model {
        cfg.validate().expect("valid config");
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d6f64656c);
        let d = cfg.d;
        let d_head = d / cfg.h;
        let n_types = grammar.types().len();
        let n_rules = grammar.rules().len();
        let n_relations = (cfg.r + 1) * (cfg.r + 1);
        let ffn = 4 * d;
        let mut store = ParamStore::new();

        let token_embed = store.add("embed/token", small_uniform(&mut rng, vocab_size, d, 0.08));
        let type_embed = store.add("embed/type", small_uniform(&mut rng, n_types, d, 0.08));
        let rule_embed = store.add("embed/rule", small_uniform(&mut rng, n_rules + 1, d, 0.08));
        let depth_embed = store.add("embed/depth", small_uniform(&mut rng, cfg.d_max, d, 0.08));
        let rel_key = store.add("embed/rel_key", small_uniform(&mut rng, n_relations, d_head, 0.05));
        let rel_val = store.add("embed/rel_val", small_uniform(&mut rng, n_relations, d_head, 0.05));
        let start_action = store.add("embed/start_action", small_uniform(&mut rng, 1, d, 0.08));
        let item_pos = store.add("enc/item_pos", small_uniform(&mut rng, 2, d, 0.08));
        let input_ln = add_ln(&mut store, "dec/input_ln", d);

        let mut enc_layers = Vec::with_capacity(cfg.enc_layers);
        for i in 0..cfg.enc_layers {
            let p = format!("enc/l{i}");
            enc_layers.push(EncLayerParams {
                attn: add_attn(&mut store, &mut rng, &format!("{p}/self"), d),
                ln1: add_ln(&mut store, &format!("{p}/ln1"), d),
                ffn: add_ffn(&mut store, &mut rng, &format!("{p}/ffn"), d, ffn),
                ln2: add_ln(&mut store, &format!("{p}/ln2"), d),
            });
        }
        let mut dec_layers = Vec::with_capacity(cfg.l);
        for i in 0..cfg.l {
            let p = format!("dec/l{i}");
            dec_layers.push(DecLayerParams {
                self_attn: add_attn(&mut store, &mut rng, &format!("{p}/self"), d),
                ln1: add_ln(&mut store, &format!("{p}/ln1"), d),
                cross: add_attn(&mut store, &mut rng, &format!("{p}/cross"), d),
                ln2: add_ln(&mut store, &format!("{p}/ln2"), d),
                ffn: add_ffn(&mut store, &mut rng, &format!("{p}/ffn"), d, ffn),
                ln3: add_ln(&mut store, &format!("{p}/ln3"), d),
            });
        }

        let w_ar = store.add("head/w_ar", xavier(&mut rng, d, d));
        let w_gen = store.add("head/w_gen", xavier(&mut rng, d, d));
        let w_g = store.add("head/w_g", xavier(&mut rng, 2 * d, 1));
        let ptr_q = store.add("head/ptr_q", xavier(&mut rng, d, d));
        let ptr_k = store.add("head/ptr_k", xavier(&mut rng, d, d));

        Model {
            store,
            params: ModelParams {
                token_embed,
                type_embed,
                rule_embed,
                depth_embed,
                rel_key,
                rel_val,
                start_action,
                item_pos,
                input_ln,
                enc_layers,
                dec_layers,
                w_ar,
                w_gen,
                w_g,
                ptr_q,
                ptr_k,
            },
            dims: ModelDims {
                d,
                h: cfg.h,
                d_head,
                vocab: vocab_size,
                n_types,
                n_rules,
                d_max: cfg.d_max,
                r: cfg.r,
                n_relations,
                ffn,
            },
            cfg: cfg.clone(),
        }
    }

    /// Index of the "no parent rule" embedding row.
    pub fn no_parent_rule_slot(&self) -> usize {
        self.dims.n_rules
    }
}

/// Sinusoidal position rows for the question segment.
pub fn sinusoidal(positions: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(positions, d);
    for p in 0..positions {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            t.set(p, 2 * i, (p as f64 * freq).sin());
            t.set(p, 2 * i + 1, (p as f64 * freq).cos());
        }
    }
    t
}

/// Multi-head attention on the tape. `rel` supplies relation embedding
/// tables and a per-pair index matrix for decoder self-attention; `causal`
/// masks queries from keys later than themselves.
pub fn mha(
    tape: &mut Tape,
    x_q: Var,
    x_kv: Var,
    p: &AttnParams,
    store_on_tape: &dyn Fn(&mut Tape, ParamId) -> Var,
    h: usize,
    causal: bool,
    rel: Option<(Var, Var, &[usize])>,
) -> Var {
    let (tq, d) = tape.shape(x_q);
    let (tk, _) = tape.shape(x_kv);
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();

    let wq = store_on_tape(tape, p.wq);
    let bq = store_on_tape(tape, p.bq);
    let wk = store_on_tape(tape, p.wk);
    let bk = store_on_tape(tape, p.bk);
    let wv = store_on_tape(tape, p.wv);
    let bv = store_on_tape(tape, p.bv);
    let wo = store_on_tape(tape, p.wo);
    let bo = store_on_tape(tape, p.bo);

    let q = tape.matmul(x_q, wq);
    let q = tape.add_bias(q, bq);
    let k = tape.matmul(x_kv, wk);
    let k = tape.add_bias(k, bk);
    let v = tape.matmul(x_kv, wv);
    let v = tape.add_bias(v, bv);

    let keep: Option<Vec<bool>> = if causal {
        assert_eq!(tq, tk, "causal attention requires square shape");
        let mut m = vec![false; tq * tk];
        for j in 0..tq {
            for i in 0..=j {
                m[j * tk + i] = true;
            }
        }
        Some(m)
    } else {
        None
    };

    let mut head_outs = Vec::with_capacity(h);
    for head in 0..h {
        let qh = tape.slice_cols(q, head * dh, dh);
        let kh = tape.slice_cols(k, head * dh, dh);
        let vh = tape.slice_cols(v, head * dh, dh);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let mut scores = tape.scale(scores, scale);
        if let Some((rel_key, _, idx)) = rel {
            let rel_s = tape.rel_scores(qh, rel_key, idx, scale);
            scores = tape.add(scores, rel_s);
        }
        let attn = tape.softmax_rows(scores, keep.as_deref());
        let mut ctx = tape.matmul(attn, vh);
        if let Some((_, rel_val, idx)) = rel {
            let rel_c = tape.rel_context(attn, rel_val, idx);
            ctx = tape.add(ctx, rel_c);
        }
        head_outs.push(ctx);
    }
    let mut merged = head_outs[0];
    for &hv in &head_outs[1..] {
        merged = tape.concat_cols(merged, hv);
    }
    let out = tape.matmul(merged, wo);
    tape.add_bias(out, bo)
}

/// Feed-forward sublayer.
pub fn ffn(
    tape: &mut Tape,
    x: Var,
    p: &FfnParams,
    store_on_tape: &dyn Fn(&mut Tape, ParamId) -> Var,
) -> Var {
    let w1 = store_on_tape(tape, p.w1);
    let b1 = store_on_tape(tape, p.b1);
    let w2 = store_on_tape(tape, p.w2);
    let b2 = store_on_tape(tape, p.b2);
    let hmid = tape.matmul(x, w1);
    let hmid = tape.add_bias(hmid, b1);
    let hmid = tape.relu(hmid);
    let out = tape.matmul(hmid, w2);
    tape.add_bias(out, b2)
}

pub fn residual_ln(
    tape: &mut Tape,
    x: Var,
    sub: Var,
    ln: &LnParams,
    store_on_tape: &dyn Fn(&mut Tape, ParamId) -> Var,
) -> Var {
    let g = store_on_tape(tape, ln.g);
    let b = store_on_tape(tape, ln.b);
    let summed = tape.add(x, sub);
    tape.layer_norm(summed, g, b, LN_EPS)
}

/// Encoder memory with its segment spans, still on the tape.
pub struct MemoryVar {
    pub mem: Var,
    pub q_span: Range<usize>,
    pub t_span: Range<usize>,
    pub c_span: Range<usize>,
}

impl MemoryVar {
    pub fn rows(&self) -> usize {
        self.c_span.end
    }
}

/// Encode one example. Question token rows pass through unpooled; each
/// table and column name is mean-pooled to a single row. Output rows are
/// ordered question, tables, columns.
pub fn encode(model: &Model, tape: &mut Tape, input: &SchemaInput) -> MemoryVar {
    assert!(!input.question_tokens.is_empty(), "empty question");
    assert!(!input.tables.is_empty(), "empty table list");
    assert!(!input.columns.is_empty(), "empty column list");
    for (i, &t) in input.question_tokens.iter().enumerate() {
        assert!((t as usize) < model.dims.vocab, "question token {i} out of vocabulary");
    }
    let d = model.dims.d;
    let store = &model.store;
    let on_tape = |tape: &mut Tape, id: ParamId| tape.param(store, id);

    // Pack [question tokens; table tokens; column tokens].
    let mut ids: Vec<usize> = input.question_tokens.iter().map(|&t| t as usize).collect();
    let nq = ids.len();
    let mut item_spans: Vec<(usize, usize)> = Vec::new(); // (start, len) per item
    let mut item_kind: Vec<usize> = Vec::new(); // 0 table, 1 column
    for t in &input.tables {
        item_spans.push((ids.len(), t.len()));
        item_kind.push(0);
        ids.extend(t.iter().map(|&x| x as usize));
    }
    for (_, c) in &input.columns {
        item_spans.push((ids.len(), c.len()));
        item_kind.push(1);
        ids.extend(c.iter().map(|&x| x as usize));
    }
    for &id in &ids {
        assert!(id < model.dims.vocab, "token id {id} out of vocabulary");
    }
    let total = ids.len();

    let token_table = tape.param(store, model.params.token_embed);
    let embedded = tape.embed_rows(token_table, &ids);

    // Positions: sinusoidal within the question, a learned per-kind vector
    // for schema-item tokens (so permuting items permutes memory rows).
    let mut pos = Tensor::zeros(total, d);
    let sin = sinusoidal(nq, d);
    for p in 0..nq {
        pos.data_mut()[p * d..(p + 1) * d].copy_from_slice(sin.row(p));
    }
    let pos_leaf = tape.leaf(pos);
    let mut x = tape.add(embedded, pos_leaf);

    let item_table = tape.param(store, model.params.item_pos);
    let mut item_idx = vec![0usize; total];
    let mut item_mask = vec![false; total];
    for (span, kind) in item_spans.iter().zip(&item_kind) {
        for off in 0..span.1 {
            item_idx[span.0 + off] = *kind;
            item_mask[span.0 + off] = true;
        }
    }
    // Add item positions only on schema rows: gather rows then zero out the
    // question span with a constant mask.
    let item_rows = tape.embed_rows(item_table, &item_idx);
    let mask = Tensor::new(
        total,
        d,
        (0..total * d)
            .map(|i| if item_mask[i / d] { 1.0 } else { 0.0 })
            .collect(),
    );
    let mask_leaf = tape.leaf(mask);
    let masked_items = tape.mul(item_rows, mask_leaf);
    x = tape.add(x, masked_items);

    for layer in &model.params.enc_layers {
        let attn_out = mha(tape, x, x, &layer.attn, &on_tape, model.dims.h, false, None);
        x = residual_ln(tape, x, attn_out, &layer.ln1, &on_tape);
        let ffn_out = ffn(tape, x, &layer.ffn, &on_tape);
        x = residual_ln(tape, x, ffn_out, &layer.ln2, &on_tape);
    }

    // Pool each schema item into one row.
    let q_rows = tape.slice_rows(x, 0, nq);
    let mut rows = vec![q_rows];
    for (start, len) in &item_spans {
        let span_rows = tape.slice_rows(x, *start, *len);
        rows.push(tape.mean_rows(span_rows));
    }
    let mem = tape.concat_rows(&rows);

    let nt = input.tables.len();
    let nc = input.columns.len();
    MemoryVar {
        mem,
        q_span: 0..nq,
        t_span: nq..nq + nt,
        c_span: nq + nt..nq + nt + nc,
    }
}
