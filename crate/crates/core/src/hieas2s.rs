//! The hierarchy-attention seq2seq model. The encoder extracts
//! character embeddings, windowed phrase features (1/2/3-gram
//! convolutions max-pooled per position) and bi-GRU sentence states
//! from the lines generated so far; the decoder is an attention GRU
//! over one of two hierarchy memory layouts.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{CorpusSplit, Vocabulary, BOS, FIVE, SEP, SEVEN};
use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::numkernel::{
    adam_step, add_inplace, bigru_backward, bigru_encode, clip_gradients, conv1d_depthwise,
    conv1d_depthwise_backward, cross_entropy, cross_entropy_backward, gru_cell, gru_cell_backward,
    init_gru_params, linear, linear_backward, maxpool_ngrams, maxpool_ngrams_backward, softmax,
    softmax_backward, AdamState, BiGruTrace, GruCache, Matrix, ParamStore,
};

/// The two hierarchy memory layouts of the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryVariant {
    /// [X̃^cp | X^s], 2d×2T
    Concat,
    /// [X̃^c | X̃^p | X^s], 2d×3T
    Tile,
}

impl MemoryVariant {
    pub fn tag(&self) -> &'static str {
        match self {
            MemoryVariant::Concat => "concat",
            MemoryVariant::Tile => "tile",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "concat" => Ok(MemoryVariant::Concat),
            "tile" => Ok(MemoryVariant::Tile),
            other => Err(Error::Config(format!("unknown memory variant {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HieDims {
    pub vocab: usize,
    /// embedding / encoder hidden size (each bi-GRU direction)
    pub d: usize,
    /// decoder hidden size
    pub h: usize,
    /// attention projection size
    pub attn: usize,
}

#[derive(Clone, Debug)]
pub struct HieModel {
    pub params: ParamStore,
    pub dims: HieDims,
    pub variant: MemoryVariant,
}

/// Encoder outputs sharing the encoded length T.
#[derive(Clone, Debug)]
pub struct EncoderFeatures {
    pub xc: Matrix,
    pub xp: Matrix,
    pub xs: Matrix,
    pub t_len: usize,
}

/// The attended memory: H ∈ R^{2d×M} with M = 2T or 3T.
#[derive(Clone, Debug)]
pub struct HierarchyMemory {
    pub variant: MemoryVariant,
    pub h: Matrix,
}

/// Decoder recurrent state.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub s: Vec<f64>,
    pub step: usize,
}

impl HieModel {
    pub fn new(
        dims: HieDims,
        variant: MemoryVariant,
        seed: u64,
        init_embedding: Option<&EmbeddingTable>,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let HieDims { vocab, d, h, attn } = dims;
        match init_embedding {
            Some(table) => {
                if table.vocab_size() != vocab || table.dim != d {
                    return Err(Error::Dim(format!(
                        "embedding table {}x{} against model {vocab}x{d}",
                        table.vocab_size(),
                        table.dim
                    )));
                }
                params.insert("embedding", table.matrix.clone());
            }
            None => params.insert_random("embedding", vocab, d, 0.1, &mut rng),
        }
        let sd = 1.0 / (d as f64).sqrt();
        let sh = 1.0 / (h as f64).sqrt();
        for s in 1..=3usize {
            params.insert_random(&format!("conv.w{s}"), d, s, sd, &mut rng);
        }
        init_gru_params(&mut params, "enc_fwd", d, d, sd, &mut rng);
        init_gru_params(&mut params, "enc_bwd", d, d, sd, &mut rng);
        params.insert_random("init.w", h, 2 * d, sd, &mut rng);
        params.insert("init.b", Matrix::zeros(h, 1));
        params.insert_random("attn.w", attn, h, sh, &mut rng);
        params.insert_random("attn.u", attn, 2 * d, sd, &mut rng);
        params.insert_random("attn.v", attn, 1, 1.0 / (attn as f64).sqrt(), &mut rng);
        params.insert_random("mix.wy", d, d, sd, &mut rng);
        params.insert_random("mix.wc", d, 2 * d, sd, &mut rng);
        init_gru_params(&mut params, "dec", d, h, sh, &mut rng);
        params.insert_random("out.w", vocab, h, sh, &mut rng);
        params.insert("out.b", Matrix::zeros(vocab, 1));
        Ok(HieModel {
            params,
            dims,
            variant,
        })
    }

    /// Type indicator token for a target line length.
    pub fn indicator(target_len: usize) -> Result<usize> {
        match target_len {
            5 => Ok(FIVE),
            7 => Ok(SEVEN),
            other => Err(Error::Length(format!(
                "line length {other} is not 5 or 7"
            ))),
        }
    }
}

/// Context token layout: indicator, then lines joined by SEP.
pub fn context_token_ids(lines: &[Vec<usize>], indicator: usize) -> Result<Vec<usize>> {
    if lines.is_empty() || lines.iter().any(|l| l.is_empty()) {
        return Err(Error::Size("encoder context is empty".into()));
    }
    let mut ids = vec![indicator];
    for (i, line) in lines.iter().enumerate() {
        if i > 0 {
            ids.push(SEP);
        }
        ids.extend_from_slice(line);
    }
    Ok(ids)
}

struct EncTrace {
    ids: Vec<usize>,
    emb_masks: Option<Vec<Vec<f64>>>,
    conv_outs: [Matrix; 3],
    pool_argmax: Vec<u8>,
    bigru: BiGruTrace,
}

fn encode_from_ids(
    model: &HieModel,
    ids: &[usize],
    dropout: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(EncoderFeatures, EncTrace)> {
    let d = model.dims.d;
    let t_len = ids.len();
    let embedding = model.params.get("embedding")?;
    let mut xc = Matrix::zeros(d, t_len);
    let mut emb_masks = None;
    match rng {
        Some(rng) if dropout > 0.0 => {
            let mut masks = Vec::with_capacity(t_len);
            let keep = 1.0 - dropout;
            for (t, &id) in ids.iter().enumerate() {
                let mask: Vec<f64> = (0..d)
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let row = embedding.row(id);
                for j in 0..d {
                    *xc.at_mut(j, t) = row[j] * mask[j];
                }
                masks.push(mask);
            }
            emb_masks = Some(masks);
        }
        _ => {
            for (t, &id) in ids.iter().enumerate() {
                let row = embedding.row(id);
                for j in 0..d {
                    *xc.at_mut(j, t) = row[j];
                }
            }
        }
    }

    let c1 = conv1d_depthwise(model.params.get("conv.w1")?, &xc, 1)?;
    let c2 = conv1d_depthwise(model.params.get("conv.w2")?, &xc, 2)?;
    let c3 = conv1d_depthwise(model.params.get("conv.w3")?, &xc, 3)?;
    let (xp, pool_argmax) = maxpool_ngrams(&c1, &c2, &c3)?;

    let cols: Vec<Vec<f64>> = (0..t_len).map(|t| xc.col(t)).collect();
    let (xs, bigru) = bigru_encode(&model.params, "enc_fwd", "enc_bwd", &cols, d)?;

    Ok((
        EncoderFeatures {
            xc,
            xp,
            xs,
            t_len,
        },
        EncTrace {
            ids: ids.to_vec(),
            emb_masks,
            conv_outs: [c1, c2, c3],
            pool_argmax,
            bigru,
        },
    ))
}

/// Character, phrase and sentence features of the context lines.
pub fn encode_hierarchy(model: &HieModel, lines: &[Vec<usize>], indicator: usize) -> Result<EncoderFeatures> {
    let ids = context_token_ids(lines, indicator)?;
    Ok(encode_from_ids(model, &ids, 0.0, None)?.0)
}

/// Stacks the encoder features into the attended memory.
pub fn build_memory(features: &EncoderFeatures, variant: MemoryVariant) -> HierarchyMemory {
    let d = features.xc.rows();
    let t_len = features.t_len;
    let h = match variant {
        MemoryVariant::Concat => {
            let mut h = Matrix::zeros(2 * d, 2 * t_len);
            for t in 0..t_len {
                for j in 0..d {
                    *h.at_mut(j, t) = features.xc.at(j, t);
                    *h.at_mut(d + j, t) = features.xp.at(j, t);
                }
                for j in 0..2 * d {
                    *h.at_mut(j, t_len + t) = features.xs.at(j, t);
                }
            }
            h
        }
        MemoryVariant::Tile => {
            let mut h = Matrix::zeros(2 * d, 3 * t_len);
            for t in 0..t_len {
                for j in 0..d {
                    *h.at_mut(j, t) = features.xc.at(j, t);
                    *h.at_mut(d + j, t) = features.xc.at(j, t);
                    *h.at_mut(j, t_len + t) = features.xp.at(j, t);
                    *h.at_mut(d + j, t_len + t) = features.xp.at(j, t);
                }
                for j in 0..2 * d {
                    *h.at_mut(j, 2 * t_len + t) = features.xs.at(j, t);
                }
            }
            h
        }
    };
    HierarchyMemory { variant, h }
}

/// Routes a gradient on the memory back onto the three feature blocks.
fn memory_backward(
    d_mem: &Matrix,
    variant: MemoryVariant,
    d: usize,
    t_len: usize,
) -> (Matrix, Matrix, Matrix) {
    let mut dxc = Matrix::zeros(d, t_len);
    let mut dxp = Matrix::zeros(d, t_len);
    let mut dxs = Matrix::zeros(2 * d, t_len);
    match variant {
        MemoryVariant::Concat => {
            for t in 0..t_len {
                for j in 0..d {
                    *dxc.at_mut(j, t) += d_mem.at(j, t);
                    *dxp.at_mut(j, t) += d_mem.at(d + j, t);
                }
                for j in 0..2 * d {
                    *dxs.at_mut(j, t) += d_mem.at(j, t_len + t);
                }
            }
        }
        MemoryVariant::Tile => {
            for t in 0..t_len {
                for j in 0..d {
                    *dxc.at_mut(j, t) += d_mem.at(j, t) + d_mem.at(d + j, t);
                    *dxp.at_mut(j, t) += d_mem.at(j, t_len + t) + d_mem.at(d + j, t_len + t);
                }
                for j in 0..2 * d {
                    *dxs.at_mut(j, t) += d_mem.at(j, 2 * t_len + t);
                }
            }
        }
    }
    (dxc, dxp, dxs)
}

struct AttTrace {
    /// attn×M tanh activations
    att_tanh: Matrix,
    alpha: Vec<f64>,
}

/// e_j = v_aᵀ tanh(W^a s_prev + U^a H_j); α = softmax(e); c = Σ α_j H_j.
/// `uh` is the precomputed U^a H.
fn attend_with_uh(
    params: &ParamStore,
    s_prev: &[f64],
    memory: &Matrix,
    uh: &Matrix,
) -> Result<(Vec<f64>, AttTrace)> {
    let m_cols = memory.cols();
    let attn = uh.rows();
    let wa_s = params.get("attn.w")?.matvec(s_prev)?;
    let v_a = params.get("attn.v")?;
    let mut att_tanh = Matrix::zeros(attn, m_cols);
    let mut scores = vec![0.0; m_cols];
    for j in 0..m_cols {
        let mut e = 0.0;
        for i in 0..attn {
            let th = (wa_s[i] + uh.at(i, j)).tanh();
            *att_tanh.at_mut(i, j) = th;
            e += v_a.data()[i] * th;
        }
        scores[j] = e;
    }
    let alpha = softmax(&scores);
    let mut c = vec![0.0; memory.rows()];
    for j in 0..m_cols {
        let aj = alpha[j];
        for i in 0..memory.rows() {
            c[i] += aj * memory.at(i, j);
        }
    }
    Ok((c, AttTrace { att_tanh, alpha }))
}

/// Attention backward. Accumulates grads for attn.{v,w}; contributions
/// to U^a and H are collected into `d_pre_total` and `d_mem` (they are
/// shared across decoder steps and finished once per pair). Returns
/// ds_prev.
fn attend_backward(
    params: &mut ParamStore,
    trace: &AttTrace,
    s_prev: &[f64],
    memory: &Matrix,
    dc: &[f64],
    d_pre_total: &mut Matrix,
    d_mem: &mut Matrix,
) -> Result<Vec<f64>> {
    let m_cols = memory.cols();
    let attn = trace.att_tanh.rows();

    // c = Σ α_j H_j
    let mut d_alpha = vec![0.0; m_cols];
    for j in 0..m_cols {
        let mut acc = 0.0;
        for i in 0..memory.rows() {
            acc += memory.at(i, j) * dc[i];
        }
        d_alpha[j] = acc;
        let aj = trace.alpha[j];
        for i in 0..memory.rows() {
            *d_mem.at_mut(i, j) += aj * dc[i];
        }
    }
    let d_scores = softmax_backward(&trace.alpha, &d_alpha);

    let v_a = params.get("attn.v")?.clone();
    let mut dv = vec![0.0; attn];
    let mut d_wa_s = vec![0.0; attn];
    for j in 0..m_cols {
        let ds = d_scores[j];
        for i in 0..attn {
            let th = trace.att_tanh.at(i, j);
            dv[i] += ds * th;
            let dpre = ds * v_a.data()[i] * (1.0 - th * th);
            d_wa_s[i] += dpre;
            *d_pre_total.at_mut(i, j) += dpre;
        }
    }
    add_inplace(params.grad_mut("attn.v")?.data_mut(), &dv);
    params.grad_mut("attn.w")?.add_outer(&d_wa_s, s_prev);
    params.get("attn.w")?.matvec_t(&d_wa_s)
}

/// Attention as a standalone operation: context vector and weights for
/// one decoder state.
pub fn attend(
    model: &HieModel,
    state: &DecoderState,
    memory: &HierarchyMemory,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let uh = matmul(model.params.get("attn.u")?, &memory.h)?;
    let (c, trace) = attend_with_uh(&model.params, &state.s, &memory.h, &uh)?;
    Ok((c, trace.alpha))
}

/// A B (m×k times k×n).
fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::Dim(format!(
            "matmul {}x{} times {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for kk in 0..a.cols() {
            let aik = a.at(i, kk);
            if aik == 0.0 {
                continue;
            }
            for j in 0..b.cols() {
                *out.at_mut(i, j) += aik * b.at(kk, j);
            }
        }
    }
    Ok(out)
}

struct DecStepTrace {
    y_prev: usize,
    emb_mask: Option<Vec<f64>>,
    emb_y: Vec<f64>,
    s_prev: Vec<f64>,
    att: AttTrace,
    c: Vec<f64>,
    gru: GruCache,
    s: Vec<f64>,
    s_mask: Option<Vec<f64>>,
    probs: Vec<f64>,
}

fn decode_step_with_uh(
    model: &HieModel,
    y_prev: usize,
    s_prev: &[f64],
    memory: &Matrix,
    uh: &Matrix,
    dropout: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<DecStepTrace> {
    if y_prev >= model.dims.vocab {
        return Err(Error::Lookup(format!(
            "token id {y_prev} out of vocab {}",
            model.dims.vocab
        )));
    }
    let d = model.dims.d;
    let (emb_y, emb_mask, s_mask) = match rng {
        Some(rng) if dropout > 0.0 => {
            let keep = 1.0 - dropout;
            let emb_mask: Vec<f64> = (0..d)
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let s_mask: Vec<f64> = (0..model.dims.h)
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let emb_y: Vec<f64> = model
                .params
                .get("embedding")?
                .row(y_prev)
                .iter()
                .zip(emb_mask.iter())
                .map(|(e, m)| e * m)
                .collect();
            (emb_y, Some(emb_mask), Some(s_mask))
        }
        _ => (
            model.params.get("embedding")?.row(y_prev).to_vec(),
            None,
            None,
        ),
    };
    let (c, att) = attend_with_uh(&model.params, s_prev, memory, uh)?;
    // g = W^y emb(y_prev) + W^c c
    let mut g = model.params.get("mix.wy")?.matvec(&emb_y)?;
    add_inplace(&mut g, &model.params.get("mix.wc")?.matvec(&c)?);
    let (s_new, gru) = gru_cell(&model.params, "dec", &g, s_prev)?;
    let s_out: Vec<f64> = match &s_mask {
        Some(mask) => s_new.iter().zip(mask.iter()).map(|(s, m)| s * m).collect(),
        None => s_new.clone(),
    };
    let logits = linear(
        model.params.get("out.w")?,
        &s_out,
        model.params.get("out.b")?.data(),
    )?;
    let probs = softmax(&logits);
    Ok(DecStepTrace {
        y_prev,
        emb_mask,
        emb_y,
        s_prev: s_prev.to_vec(),
        att,
        c,
        gru,
        s: s_new,
        s_mask,
        probs,
    })
}

/// One decoder step over a prepared memory: next-character distribution
/// and the new state.
pub fn decode_step(
    model: &HieModel,
    y_prev: usize,
    state: &DecoderState,
    memory: &HierarchyMemory,
) -> Result<(Vec<f64>, DecoderState)> {
    let uh = matmul(model.params.get("attn.u")?, &memory.h)?;
    let trace = decode_step_with_uh(model, y_prev, &state.s, &memory.h, &uh, 0.0, None)?;
    Ok((
        trace.probs,
        DecoderState {
            s: trace.s,
            step: state.step + 1,
        },
    ))
}

/// Decoder initial state: tanh-affine projection of the final forward
/// and the position-0 backward encoder states.
fn init_state(model: &HieModel, bigru: &BiGruTrace) -> Result<(Vec<f64>, Vec<f64>)> {
    let fwd_last = bigru.fwd_states.last().expect("non-empty encoding");
    let bwd_first = &bigru.bwd_states[0];
    let mut enc_concat = fwd_last.clone();
    enc_concat.extend_from_slice(bwd_first);
    let pre = linear(
        model.params.get("init.w")?,
        &enc_concat,
        model.params.get("init.b")?.data(),
    )?;
    Ok((pre.iter().map(|v| v.tanh()).collect(), enc_concat))
}

struct PairTrace {
    enc: EncTrace,
    features: EncoderFeatures,
    memory: Matrix,
    s0: Vec<f64>,
    enc_concat: Vec<f64>,
    steps: Vec<DecStepTrace>,
    loss: f64,
}

fn pair_forward(
    model: &HieModel,
    context: &[Vec<usize>],
    indicator: usize,
    target: &[usize],
    dropout: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<PairTrace> {
    if target.is_empty() {
        return Err(Error::Size("empty decoder target".into()));
    }
    let ids = context_token_ids(context, indicator)?;
    let (features, enc) = encode_from_ids(model, &ids, dropout, rng.as_deref_mut())?;
    let memory = build_memory(&features, model.variant).h;
    let uh = matmul(model.params.get("attn.u")?, &memory)?;
    let (s0, enc_concat) = init_state(model, &enc.bigru)?;

    let mut steps = Vec::with_capacity(target.len());
    let mut s_prev = s0.clone();
    let mut y_prev = BOS;
    let mut loss = 0.0;
    for &y_t in target {
        let trace = decode_step_with_uh(
            model,
            y_prev,
            &s_prev,
            &memory,
            &uh,
            dropout,
            rng.as_deref_mut(),
        )?;
        loss += cross_entropy(&trace.probs, y_t)?;
        s_prev = trace.s.clone();
        y_prev = y_t;
        steps.push(trace);
    }
    Ok(PairTrace {
        enc,
        features,
        memory,
        s0,
        enc_concat,
        steps,
        loss,
    })
}

/// Backward over one (context → line) pair; gradients accumulate into
/// the model store. Pairs `trace.steps[i]` with `target[i]`.
fn pair_backward(model: &mut HieModel, trace: &PairTrace, target: &[usize]) -> Result<()> {
    let d = model.dims.d;
    let t_len = trace.features.t_len;
    let m_cols = trace.memory.cols();
    let attn = model.dims.attn;

    let mut d_mem = Matrix::zeros(2 * d, m_cols);
    let mut d_pre_total = Matrix::zeros(attn, m_cols);
    let mut ds_chain = vec![0.0; model.dims.h];

    for (step, &y_t) in trace.steps.iter().zip(target.iter()).rev() {
        let dprobs = cross_entropy_backward(&step.probs, y_t);
        let dlogits = softmax_backward(&step.probs, &dprobs);
        let out_w = model.params.get("out.w")?.clone();
        let s_out: Vec<f64> = match &step.s_mask {
            Some(mask) => step.s.iter().zip(mask.iter()).map(|(s, m)| s * m).collect(),
            None => step.s.clone(),
        };
        let ds_out = {
            let mut dw = std::mem::replace(model.params.grad_mut("out.w")?, Matrix::zeros(0, 0));
            let mut db = std::mem::replace(model.params.grad_mut("out.b")?, Matrix::zeros(0, 0));
            let ds = linear_backward(&out_w, &s_out, &dlogits, &mut dw, db.data_mut())?;
            *model.params.grad_mut("out.w")? = dw;
            *model.params.grad_mut("out.b")? = db;
            ds
        };
        let mut ds: Vec<f64> = match &step.s_mask {
            Some(mask) => ds_out.iter().zip(mask.iter()).map(|(g, m)| g * m).collect(),
            None => ds_out,
        };
        add_inplace(&mut ds, &ds_chain);

        let (dg, ds_prev_gru) = gru_cell_backward(&mut model.params, "dec", &step.gru, &ds)?;

        // g = W^y emb + W^c c
        let wy = model.params.get("mix.wy")?.clone();
        let wc = model.params.get("mix.wc")?.clone();
        model.params.grad_mut("mix.wy")?.add_outer(&dg, &step.emb_y);
        model.params.grad_mut("mix.wc")?.add_outer(&dg, &step.c);
        let demb = wy.matvec_t(&dg)?;
        let dc = wc.matvec_t(&dg)?;

        let demb_raw: Vec<f64> = match &step.emb_mask {
            Some(mask) => demb.iter().zip(mask.iter()).map(|(g, m)| g * m).collect(),
            None => demb,
        };
        let grad_emb = model.params.grad_mut("embedding")?;
        for (j, &g) in demb_raw.iter().enumerate() {
            *grad_emb.at_mut(step.y_prev, j) += g;
        }

        let ds_prev_att = attend_backward(
            &mut model.params,
            &step.att,
            &step.s_prev,
            &trace.memory,
            &dc,
            &mut d_pre_total,
            &mut d_mem,
        )?;
        ds_chain = ds_prev_gru;
        add_inplace(&mut ds_chain, &ds_prev_att);
    }

    // shared attention terms: U^a and the memory
    {
        // dU^a += d_pre_total Hᵀ
        let grad_u = model.params.grad_mut("attn.u")?;
        for i in 0..attn {
            for j in 0..m_cols {
                let dp = d_pre_total.at(i, j);
                if dp == 0.0 {
                    continue;
                }
                for r in 0..2 * d {
                    *grad_u.at_mut(i, r) += dp * trace.memory.at(r, j);
                }
            }
        }
        let u = model.params.get("attn.u")?.clone();
        for j in 0..m_cols {
            for r in 0..2 * d {
                let mut acc = 0.0;
                for i in 0..attn {
                    acc += u.at(i, r) * d_pre_total.at(i, j);
                }
                *d_mem.at_mut(r, j) += acc;
            }
        }
    }

    // decoder init projection
    let ds0 = ds_chain;
    let dpre0: Vec<f64> = ds0
        .iter()
        .zip(trace.s0.iter())
        .map(|(g, s)| g * (1.0 - s * s))
        .collect();
    let init_w = model.params.get("init.w")?.clone();
    let d_enc_concat = {
        let mut dw = std::mem::replace(model.params.grad_mut("init.w")?, Matrix::zeros(0, 0));
        let mut db = std::mem::replace(model.params.grad_mut("init.b")?, Matrix::zeros(0, 0));
        let dx = linear_backward(&init_w, &trace.enc_concat, &dpre0, &mut dw, db.data_mut())?;
        *model.params.grad_mut("init.w")? = dw;
        *model.params.grad_mut("init.b")? = db;
        dx
    };
    let d_final_fwd = &d_enc_concat[..d];
    let d_final_bwd = &d_enc_concat[d..];

    // memory → feature blocks
    let (mut dxc, dxp, dxs) = memory_backward(&d_mem, model.variant, d, t_len);

    // sentence features: BPTT through the bi-GRU
    let dxs_inputs = bigru_backward(
        &mut model.params,
        "enc_fwd",
        "enc_bwd",
        &trace.enc.bigru,
        &dxs,
        Some(d_final_fwd),
        Some(d_final_bwd),
    )?;
    for (t, dx) in dxs_inputs.iter().enumerate() {
        dxc.add_col(t, dx);
    }

    // phrase features: max-pool then the three convolutions
    let (d1, d2, d3) = maxpool_ngrams_backward(&dxp, &trace.enc.pool_argmax);
    let xc = &trace.features.xc;
    for (win, d_out) in [d1, d2, d3].iter().enumerate() {
        let s_win = win + 1;
        let name = format!("conv.w{s_win}");
        let filter = model.params.get(&name)?.clone();
        let mut d_filter = std::mem::replace(model.params.grad_mut(&name)?, Matrix::zeros(0, 0));
        let dx = conv1d_depthwise_backward(
            &filter,
            xc,
            &trace.enc.conv_outs[win],
            d_out,
            s_win,
            &mut d_filter,
        )?;
        *model.params.grad_mut(&name)? = d_filter;
        for idx in 0..dxc.data().len() {
            dxc.data_mut()[idx] += dx.data()[idx];
        }
    }

    // character embeddings
    let grad_emb = model.params.grad_mut("embedding")?;
    for (t, &id) in trace.enc.ids.iter().enumerate() {
        match &trace.enc.emb_masks {
            Some(masks) => {
                for j in 0..d {
                    *grad_emb.at_mut(id, j) += dxc.at(j, t) * masks[t][j];
                }
            }
            None => {
                for j in 0..d {
                    *grad_emb.at_mut(id, j) += dxc.at(j, t);
                }
            }
        }
    }
    Ok(())
}

/// A prepared decoding context: memory, its attention projection and
/// the initial state are computed once, then shared by every
/// hypothesis.
pub struct DecodeSession<'a> {
    model: &'a HieModel,
    memory: Matrix,
    uh: Matrix,
    s0: Vec<f64>,
}

impl<'a> DecodeSession<'a> {
    pub fn new(model: &'a HieModel, context: &[Vec<usize>], indicator: usize) -> Result<Self> {
        let ids = context_token_ids(context, indicator)?;
        let (features, enc) = encode_from_ids(model, &ids, 0.0, None)?;
        let memory = build_memory(&features, model.variant).h;
        let uh = matmul(model.params.get("attn.u")?, &memory)?;
        let (s0, _) = init_state(model, &enc.bigru)?;
        Ok(DecodeSession {
            model,
            memory,
            uh,
            s0,
        })
    }

    pub fn initial_state(&self) -> DecoderState {
        DecoderState {
            s: self.s0.clone(),
            step: 0,
        }
    }

    pub fn step(&self, y_prev: usize, state: &DecoderState) -> Result<(Vec<f64>, DecoderState)> {
        let trace =
            decode_step_with_uh(self.model, y_prev, &state.s, &self.memory, &self.uh, 0.0, None)?;
        Ok((
            trace.probs,
            DecoderState {
                s: trace.s,
                step: state.step + 1,
            },
        ))
    }
}

/// Teacher-forced log probability of `target` given the context lines
/// (natural log; sums the per-position terms).
pub fn line_probability(
    model: &HieModel,
    context: &[Vec<usize>],
    indicator: usize,
    target: &[usize],
) -> Result<f64> {
    let trace = pair_forward(model, context, indicator, target, 0.0, None)?;
    Ok(-trace.loss)
}

#[derive(Clone, Debug)]
pub struct HieConfig {
    pub d: usize,
    pub h: usize,
    pub attn: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub clip: f64,
    pub dropout: f64,
    pub weight_decay: f64,
    /// keep pre-trained embeddings fixed during training
    pub freeze_embedding: bool,
    pub variant: MemoryVariant,
}

impl Default for HieConfig {
    fn default() -> Self {
        HieConfig {
            d: 64,
            h: 64,
            attn: 64,
            lr: 0.001,
            batch: 128,
            epochs: 10,
            clip: 5.0,
            dropout: 0.2,
            weight_decay: 0.0,
            freeze_embedding: false,
            variant: MemoryVariant::Tile,
        }
    }
}

/// One training pair: context lines, indicator, target line.
pub struct TrainingPair {
    pub context: Vec<Vec<usize>>,
    pub indicator: usize,
    pub target: Vec<usize>,
}

/// Expands quatrains into the three context→line pairs each.
pub fn quatrain_pairs(split_poems: &[crate::corpus::Poem], vocab: &Vocabulary) -> Vec<TrainingPair> {
    let mut pairs = Vec::new();
    for poem in split_poems {
        if !poem.is_quatrain {
            continue;
        }
        let len = poem.lines[0].chars().count();
        let indicator = if len == 5 { FIVE } else { SEVEN };
        let lines: Vec<Vec<usize>> = poem
            .lines
            .iter()
            .map(|l| crate::corpus::encode_line(vocab, l, false))
            .collect();
        for m in 1..4 {
            pairs.push(TrainingPair {
                context: lines[..m].to_vec(),
                indicator,
                target: lines[m].clone(),
            });
        }
    }
    pairs
}

pub struct HieRun {
    pub model: HieModel,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
}

/// Hybrid-style training: 5- and 7-character quatrains share one model,
/// distinguished only by the indicator token. Per-epoch validation loss
/// is teacher-forced without dropout.
pub fn train_hieas2s(
    split: &CorpusSplit,
    vocab: &Vocabulary,
    config: &HieConfig,
    seed: u64,
    init_embedding: Option<&EmbeddingTable>,
) -> Result<HieRun> {
    let pairs = quatrain_pairs(&split.train, vocab);
    if pairs.is_empty() {
        return Err(Error::Size("no quatrain training pairs".into()));
    }
    let val_pairs = quatrain_pairs(&split.validation, vocab);

    let dims = HieDims {
        vocab: vocab.size(),
        d: config.d,
        h: config.h,
        attn: config.attn,
    };
    let mut model = HieModel::new(dims, config.variant, seed, init_embedding)?;
    let mut adam = AdamState::new(&model.params, config.lr, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xd3c0de));

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut train_losses = Vec::with_capacity(config.epochs);
    let mut val_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for chunk in order.chunks(config.batch.max(1)) {
            model.params.zero_grads();
            let mut batch_tokens = 0usize;
            for &idx in chunk {
                let pair = &pairs[idx];
                let trace = pair_forward(
                    &model,
                    &pair.context,
                    pair.indicator,
                    &pair.target,
                    config.dropout,
                    Some(&mut rng),
                )?;
                epoch_loss += trace.loss;
                batch_tokens += pair.target.len();
                pair_backward(&mut model, &trace, &pair.target)?;
            }
            epoch_tokens += batch_tokens;
            let scale = 1.0 / batch_tokens.max(1) as f64;
            for (_, g) in model.params.grads_mut() {
                g.scale(scale);
            }
            if config.freeze_embedding {
                model.params.grad_mut("embedding")?.fill(0.0);
            }
            clip_gradients(&mut model.params, config.clip)?;
            adam_step(&mut model.params, &mut adam)?;
        }
        train_losses.push(epoch_loss / epoch_tokens.max(1) as f64);

        if !val_pairs.is_empty() {
            let mut vl = 0.0;
            let mut vt = 0usize;
            for pair in &val_pairs {
                vl += -line_probability(&model, &pair.context, pair.indicator, &pair.target)?;
                vt += pair.target.len();
            }
            val_losses.push(vl / vt as f64);
        }
        log::debug!(
            "hieas2s epoch {epoch}: train loss {:.4}{}",
            train_losses.last().unwrap(),
            val_losses
                .last()
                .map(|v| format!(", val loss {v:.4}"))
                .unwrap_or_default()
        );
    }
    Ok(HieRun {
        model,
        train_losses,
        val_losses,
    })
}

/// Gradient checks for the model-level layers; tiny dims throughout.
pub mod gradcheck {
    use super::*;
    use crate::numkernel::gradcheck::{check_against_fd_detailed, GradCheckReport};
    use crate::numkernel::{check_against_fd, dot, FD_EPSILON};

    pub const MODEL_LAYERS: [&str; 3] = ["attend", "decode_step", "hieas2s"];

    /// Check models are re-drawn at a larger scale than training init:
    /// degenerate near-zero gradients would sit below the finite
    /// difference noise floor and dominate the relative error.
    fn tiny_model(seed: u64, variant: MemoryVariant) -> HieModel {
        let mut model = HieModel::new(
            HieDims {
                vocab: crate::corpus::N_SPECIALS + 4,
                d: 3,
                h: 4,
                attn: 3,
            },
            variant,
            seed,
            None,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));
        let names: Vec<String> = model.params.names().map(|s| s.to_string()).collect();
        for name in names {
            let m = model.params.get_mut(&name).unwrap();
            for v in m.data_mut() {
                *v = rng.gen_range(-0.6..0.6);
            }
        }
        model
    }

    /// Check of the attention block alone: s_prev and H enter the store
    /// as inputs, loss is a fixed random projection of c.
    fn check_attend(seed: u64) -> Result<f64> {
        let model = tiny_model(seed, MemoryVariant::Concat);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(99));
        let (d2, m_cols, h, attn) = (2 * model.dims.d, 4, model.dims.h, model.dims.attn);
        let mut store = ParamStore::new();
        for name in ["attn.v", "attn.w", "attn.u"] {
            store.insert(name, model.params.get(name)?.clone());
        }
        store.insert_random("s_prev", h, 1, 0.8, &mut rng);
        store.insert_random("H", d2, m_cols, 0.8, &mut rng);
        let r: Vec<f64> = (0..d2).map(|_| rng.gen_range(-1.0..1.0)).collect();

        {
            let memory = store.get("H")?.clone();
            let s_prev = store.get("s_prev")?.data().to_vec();
            let uh = matmul(store.get("attn.u")?, &memory)?;
            let (_, trace) = attend_with_uh(&store, &s_prev, &memory, &uh)?;
            let mut d_pre = Matrix::zeros(attn, m_cols);
            let mut d_mem = Matrix::zeros(d2, m_cols);
            let ds_prev =
                attend_backward(&mut store, &trace, &s_prev, &memory, &r, &mut d_pre, &mut d_mem)?;
            store.grad_mut("s_prev")?.data_mut().copy_from_slice(&ds_prev);
            // finish the shared U^a / H terms exactly as pair_backward does
            let grad_u = store.grad_mut("attn.u")?;
            for i in 0..attn {
                for j in 0..m_cols {
                    let dp = d_pre.at(i, j);
                    for rr in 0..d2 {
                        *grad_u.at_mut(i, rr) += dp * memory.at(rr, j);
                    }
                }
            }
            let u = store.get("attn.u")?.clone();
            for j in 0..m_cols {
                for rr in 0..d2 {
                    let mut acc = 0.0;
                    for i in 0..attn {
                        acc += u.at(i, rr) * d_pre.at(i, j);
                    }
                    *d_mem.at_mut(rr, j) += acc;
                }
            }
            *store.grad_mut("H")? = d_mem;
        }
        check_against_fd(&mut store, FD_EPSILON, |s| {
            let memory = s.get("H")?.clone();
            let uh = matmul(s.get("attn.u")?, &memory)?;
            let (c, _) = attend_with_uh(s, s.get("s_prev")?.data(), &memory, &uh)?;
            Ok(dot(&c, &r))
        })
    }

    /// Full-pair check: every model parameter against the summed
    /// teacher-forced cross entropy.
    fn check_pair(
        seed: u64,
        variant: MemoryVariant,
        context: Vec<Vec<usize>>,
        target: Vec<usize>,
    ) -> Result<GradCheckReport> {
        let mut model = tiny_model(seed, variant);
        let indicator = FIVE;
        {
            let trace = pair_forward(&model, &context, indicator, &target, 0.0, None)?;
            model.params.zero_grads();
            pair_backward(&mut model, &trace, &target)?;
        }
        let dims = model.dims;
        let variant = model.variant;
        let mut store = model.params.clone();
        let ctx = context.clone();
        let tgt = target.clone();
        check_against_fd_detailed(&mut store, FD_EPSILON, move |s| {
            let probe = HieModel {
                params: s.clone(),
                dims,
                variant,
            };
            let trace = pair_forward(&probe, &ctx, indicator, &tgt, 0.0, None)?;
            Ok(trace.loss)
        })
    }

    fn first_real_id() -> usize {
        crate::corpus::N_SPECIALS
    }

    /// decode_step checked through one decoding step (loss = CE at a
    /// fixed target); context length 1 keeps the memory small.
    fn check_decode_step(seed: u64) -> Result<GradCheckReport> {
        let rid = first_real_id();
        check_pair(
            seed,
            MemoryVariant::Concat,
            vec![vec![rid, rid + 1]],
            vec![rid + 2],
        )
    }

    fn check_full(seed: u64) -> Result<GradCheckReport> {
        let rid = first_real_id();
        let mut worst: Option<GradCheckReport> = None;
        for variant in [MemoryVariant::Concat, MemoryVariant::Tile] {
            let report = check_pair(
                seed,
                variant,
                vec![vec![rid, rid + 1, rid + 2], vec![rid + 3, rid, rid + 1]],
                vec![rid + 1, rid + 3, rid],
            )?;
            worst = match worst {
                Some(w) if w.max_rel_error >= report.max_rel_error => Some(w),
                _ => Some(report),
            };
        }
        Ok(worst.expect("two variants checked"))
    }

    pub fn check_layer_detailed(layer: &str, seed: u64) -> Result<GradCheckReport> {
        match layer {
            "decode_step" => check_decode_step(seed),
            "hieas2s" => check_full(seed),
            other => Err(Error::UnknownLayer(other.to_string())),
        }
    }

    pub fn check_layer(layer: &str, seed: u64) -> Result<f64> {
        match layer {
            "attend" => check_attend(seed),
            "decode_step" => check_decode_step(seed).map(|r| r.max_rel_error),
            "hieas2s" => check_full(seed).map(|r| r.max_rel_error),
            other => Err(Error::UnknownLayer(other.to_string())),
        }
    }
}
