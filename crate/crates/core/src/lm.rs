//! Directional GRU character language models. The backward model grows
//! a line leftward from a theme phrase, the forward model completes it
//! and doubles as the fluency judge (perplexity) for reranking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Poem, ThemeTaxonomy, Vocabulary, BOS, EOS, N_SPECIALS, UNK};
use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::numkernel::{
    adam_step, clip_gradients, cross_entropy, cross_entropy_backward, gru_cell, gru_cell_backward,
    init_gru_params, linear, linear_backward, softmax, softmax_backward, AdamState, GruCache,
    Matrix, ParamStore, PROB_FLOOR,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn tag(&self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "forward" => Ok(Direction::Forward),
            "backward" => Ok(Direction::Backward),
            other => Err(Error::Checkpoint(format!("unknown LM direction {other}"))),
        }
    }
}

/// GRU next-character model over the full vocabulary.
#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub direction: Direction,
    pub params: ParamStore,
    pub d: usize,
    pub h: usize,
    pub vocab_size: usize,
}

impl LanguageModel {
    pub fn new(
        direction: Direction,
        vocab_size: usize,
        d: usize,
        h: usize,
        seed: u64,
        init_embedding: Option<&EmbeddingTable>,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        match init_embedding {
            Some(table) => {
                if table.vocab_size() != vocab_size || table.dim != d {
                    return Err(Error::Dim(format!(
                        "embedding table {}x{} against model {vocab_size}x{d}",
                        table.vocab_size(),
                        table.dim
                    )));
                }
                params.insert("embedding", table.matrix.clone());
            }
            None => params.insert_random("embedding", vocab_size, d, 0.1, &mut rng),
        }
        let scale = 1.0 / (h as f64).sqrt();
        init_gru_params(&mut params, "gru", d, h, scale, &mut rng);
        params.insert_random("out.w", vocab_size, h, scale, &mut rng);
        params.insert("out.b", Matrix::zeros(vocab_size, 1));
        Ok(LanguageModel {
            direction,
            params,
            d,
            h,
            vocab_size,
        })
    }

    pub fn zero_state(&self) -> Vec<f64> {
        vec![0.0; self.h]
    }

    /// One inference step: next-character distribution and new state.
    pub fn step(&self, prev: usize, state: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if prev >= self.vocab_size {
            return Err(Error::Lookup(format!(
                "token id {prev} out of vocab {}",
                self.vocab_size
            )));
        }
        let emb = self.params.get("embedding")?.row(prev).to_vec();
        let (h_new, _) = gru_cell(&self.params, "gru", &emb, state)?;
        let logits = linear(self.params.get("out.w")?, &h_new, self.params.get("out.b")?.data())?;
        Ok((softmax(&logits), h_new))
    }

    /// Per-position probabilities assigned to `line` (BOS conditioning,
    /// no EOS term).
    pub fn line_probs(&self, line: &[usize]) -> Result<Vec<f64>> {
        if line.is_empty() {
            return Err(Error::Size("perplexity of an empty sequence".into()));
        }
        let mut state = self.zero_state();
        let mut prev = BOS;
        let mut out = Vec::with_capacity(line.len());
        for &id in line {
            let (probs, h_new) = self.step(prev, &state)?;
            out.push(probs[id]);
            state = h_new;
            prev = id;
        }
        Ok(out)
    }
}

/// PPL = 2^(−(1/n)·Σ log₂ p_i), probabilities floored at 1e−12.
pub fn ppl_from_probs(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Size("perplexity of an empty sequence".into()));
    }
    let n = probs.len() as f64;
    let sum: f64 = probs.iter().map(|&p| p.max(PROB_FLOOR).log2()).sum();
    Ok(2f64.powf(-sum / n))
}

/// Perplexity of a line under the model (Eq. 14 with base-2 logs).
pub fn perplexity(model: &LanguageModel, line: &[usize]) -> Result<f64> {
    ppl_from_probs(&model.line_probs(line)?)
}

#[derive(Clone, Debug)]
pub struct LmConfig {
    pub d: usize,
    pub h: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub clip: f64,
    pub dropout: f64,
    pub weight_decay: f64,
    /// keep pre-trained embeddings fixed during training
    pub freeze_embedding: bool,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            d: 64,
            h: 64,
            lr: 0.001,
            batch: 128,
            epochs: 10,
            clip: 5.0,
            dropout: 0.2,
            weight_decay: 0.0,
            freeze_embedding: false,
        }
    }
}

struct StepTrace {
    emb_mask: Vec<f64>,
    cache: GruCache,
    h_dropped: Vec<f64>,
    h_mask: Vec<f64>,
    probs: Vec<f64>,
    target: usize,
}

fn dropout_mask(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if p <= 0.0 {
        return vec![1.0; n];
    }
    let keep = 1.0 - p;
    (0..n)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

/// Teacher-forced loss over BOS + seq → seq + EOS, gradients
/// accumulated into the model's store. Returns summed CE and the number
/// of positions.
fn sequence_backward(
    model: &mut LanguageModel,
    seq: &[usize],
    dropout: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let mut traces: Vec<StepTrace> = Vec::with_capacity(seq.len() + 1);
    let mut state = model.zero_state();
    let mut prev = BOS;
    let mut loss = 0.0;

    let mut targets: Vec<usize> = seq.to_vec();
    targets.push(EOS);
    for &target in &targets {
        let emb_mask = dropout_mask(model.d, dropout, rng);
        let emb: Vec<f64> = model
            .params
            .get("embedding")?
            .row(prev)
            .iter()
            .zip(emb_mask.iter())
            .map(|(e, m)| e * m)
            .collect();
        let (h_new, cache) = gru_cell(&model.params, "gru", &emb, &state)?;
        let h_mask = dropout_mask(model.h, dropout, rng);
        let h_dropped: Vec<f64> = h_new.iter().zip(h_mask.iter()).map(|(h, m)| h * m).collect();
        let logits = linear(
            model.params.get("out.w")?,
            &h_dropped,
            model.params.get("out.b")?.data(),
        )?;
        let probs = softmax(&logits);
        loss += cross_entropy(&probs, target)?;
        traces.push(StepTrace {
            emb_mask,
            cache,
            h_dropped,
            h_mask,
            probs,
            target,
        });
        state = h_new;
        prev = target;
    }

    // backward pass (BPTT)
    let mut dh_chain = vec![0.0; model.h];
    let mut prevs: Vec<usize> = Vec::with_capacity(targets.len());
    prevs.push(BOS);
    prevs.extend(&targets[..targets.len() - 1]);
    for (idx, trace) in traces.iter().enumerate().rev() {
        let dprobs = cross_entropy_backward(&trace.probs, trace.target);
        let dlogits = softmax_backward(&trace.probs, &dprobs);
        let out_w = model.params.get("out.w")?.clone();
        let dh_dropped = {
            let mut dw = std::mem::replace(model.params.grad_mut("out.w")?, Matrix::zeros(0, 0));
            let mut db_m = std::mem::replace(model.params.grad_mut("out.b")?, Matrix::zeros(0, 0));
            let dh = linear_backward(&out_w, &trace.h_dropped, &dlogits, &mut dw, db_m.data_mut())?;
            *model.params.grad_mut("out.w")? = dw;
            *model.params.grad_mut("out.b")? = db_m;
            dh
        };
        let mut dh: Vec<f64> = dh_dropped
            .iter()
            .zip(trace.h_mask.iter())
            .map(|(d, m)| d * m)
            .collect();
        for (a, b) in dh.iter_mut().zip(dh_chain.iter()) {
            *a += b;
        }
        let (demb, dh_prev) = gru_cell_backward(&mut model.params, "gru", &trace.cache, &dh)?;
        dh_chain = dh_prev;
        let demb_undropped: Vec<f64> = demb
            .iter()
            .zip(trace.emb_mask.iter())
            .map(|(d, m)| d * m)
            .collect();
        let prev_id = prevs[idx];
        let grad_emb = model.params.grad_mut("embedding")?;
        for (j, &g) in demb_undropped.iter().enumerate() {
            *grad_emb.at_mut(prev_id, j) += g;
        }
    }
    Ok((loss, targets.len()))
}

struct TrainRun {
    epoch_losses: Vec<f64>,
}

/// Mini-batch Adam training over independent sequences. Loss is
/// normalized per token inside each batch.
fn train_lm(
    model: &mut LanguageModel,
    sequences: &[Vec<usize>],
    config: &LmConfig,
    seed: u64,
) -> Result<TrainRun> {
    if sequences.is_empty() {
        return Err(Error::Size("language model training set is empty".into()));
    }
    let mut adam = AdamState::new(&model.params, config.lr, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for chunk in sequences.chunks(config.batch.max(1)) {
            model.params.zero_grads();
            let mut batch_tokens = 0usize;
            for seq in chunk {
                let (loss, n) = sequence_backward(model, seq, config.dropout, &mut rng)?;
                epoch_loss += loss;
                batch_tokens += n;
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
        epoch_losses.push(epoch_loss / epoch_tokens.max(1) as f64);
    }
    Ok(TrainRun { epoch_losses })
}

/// Leftmost-longest dictionary phrase occurring in `line`, as
/// (char offset, char length).
pub fn find_split_phrase(
    dictionary: &std::collections::BTreeSet<String>,
    line: &str,
) -> Option<(usize, usize)> {
    let chars: Vec<char> = line.chars().collect();
    let max_len = dictionary.iter().map(|p| p.chars().count()).max()?;
    for start in 0..chars.len() {
        let upper = max_len.min(chars.len() - start);
        for len in (1..=upper).rev() {
            let cand: String = chars[start..start + len].iter().collect();
            if dictionary.contains(&cand) {
                return Some((start, len));
            }
        }
    }
    None
}

/// The two trained models plus the recorded per-poem split choices and
/// epoch losses.
pub struct BflmRun {
    pub backward: LanguageModel,
    pub forward: LanguageModel,
    pub fwd_epoch_losses: Vec<f64>,
    pub bwd_epoch_losses: Vec<f64>,
    /// (poem id, split start, split length) for each first line
    pub split_choices: Vec<(String, usize, usize)>,
}

/// Trains the backward LM on reversed first-line prefixes (ending at a
/// taxonomy split phrase, or a seeded random character when none
/// matches) and the forward LM on every line.
pub fn train_bflm(
    poems: &[Poem],
    taxonomy: &ThemeTaxonomy,
    vocab: &Vocabulary,
    config: &LmConfig,
    seed: u64,
    init_embedding: Option<&EmbeddingTable>,
) -> Result<BflmRun> {
    if poems.is_empty() {
        return Err(Error::Size("B/F-LM training set is empty".into()));
    }
    let dictionary = taxonomy.dictionary();
    let mut split_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51713);
    let mut fwd_seqs = Vec::new();
    let mut bwd_seqs = Vec::new();
    let mut split_choices = Vec::new();
    for poem in poems {
        for line in &poem.lines {
            fwd_seqs.push(crate::corpus::encode_line(vocab, line, false));
        }
        if let Some(first) = poem.lines.first() {
            let chars: Vec<char> = first.chars().collect();
            if chars.is_empty() {
                continue;
            }
            let (start, len) = match find_split_phrase(&dictionary, first) {
                Some(hit) => hit,
                None => (split_rng.gen_range(0..chars.len()), 1),
            };
            split_choices.push((poem.id.clone(), start, len));
            let prefix: String = chars[..start + len].iter().collect();
            let mut ids = crate::corpus::encode_line(vocab, &prefix, false);
            ids.reverse();
            bwd_seqs.push(ids);
        }
    }

    let mut forward = LanguageModel::new(
        Direction::Forward,
        vocab.size(),
        config.d,
        config.h,
        seed,
        init_embedding,
    )?;
    let mut backward = LanguageModel::new(
        Direction::Backward,
        vocab.size(),
        config.d,
        config.h,
        seed.wrapping_add(1),
        init_embedding,
    )?;
    let fwd_run = train_lm(&mut forward, &fwd_seqs, config, seed.wrapping_add(2))?;
    let bwd_run = train_lm(&mut backward, &bwd_seqs, config, seed.wrapping_add(3))?;
    Ok(BflmRun {
        backward,
        forward,
        fwd_epoch_losses: fwd_run.epoch_losses,
        bwd_epoch_losses: bwd_run.epoch_losses,
        split_choices,
    })
}

#[derive(Clone)]
struct LmHyp {
    tokens: Vec<usize>,
    logp: f64,
    state: Vec<f64>,
    prev: usize,
    finished: bool,
}

fn sort_hyps(hyps: &mut [LmHyp]) {
    hyps.sort_by(|a, b| {
        b.logp
            .partial_cmp(&a.logp)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
}

/// Backward beam: extends from the reversed-phrase state for at most
/// `budget` characters; a hypothesis finishes on EOS (scored with the
/// EOS term) or when the budget runs out (no EOS term).
fn backward_beam(
    model: &LanguageModel,
    start_state: Vec<f64>,
    start_prev: usize,
    budget: usize,
    k: usize,
) -> Result<Vec<usize>> {
    if budget == 0 {
        return Ok(Vec::new());
    }
    let mut live = vec![LmHyp {
        tokens: Vec::new(),
        logp: 0.0,
        state: start_state,
        prev: start_prev,
        finished: false,
    }];
    let mut done: Vec<LmHyp> = Vec::new();
    for _ in 0..budget {
        let mut next = Vec::new();
        for hyp in &live {
            let (probs, state) = model.step(hyp.prev, &hyp.state)?;
            // natural stop
            let mut fin = hyp.clone();
            fin.logp += probs[EOS].max(PROB_FLOOR).ln();
            fin.finished = true;
            done.push(fin);
            for id in N_SPECIALS..model.vocab_size {
                let mut ext = hyp.clone();
                ext.tokens.push(id);
                ext.logp += probs[id].max(PROB_FLOOR).ln();
                ext.state = state.clone();
                ext.prev = id;
                next.push(ext);
            }
        }
        sort_hyps(&mut next);
        next.truncate(k);
        live = next;
        if live.is_empty() {
            break;
        }
    }
    done.extend(live); // budget-stopped hypotheses
    sort_hyps(&mut done);
    Ok(done
        .first()
        .map(|h| h.tokens.clone())
        .unwrap_or_default())
}

/// Forward beam generating exactly `steps` real characters (EOS and all
/// other specials masked throughout).
fn forward_beam(
    model: &LanguageModel,
    start_state: Vec<f64>,
    start_prev: usize,
    steps: usize,
    k: usize,
) -> Result<Vec<usize>> {
    let mut live = vec![LmHyp {
        tokens: Vec::new(),
        logp: 0.0,
        state: start_state,
        prev: start_prev,
        finished: false,
    }];
    for _ in 0..steps {
        let mut next = Vec::new();
        for hyp in &live {
            let (probs, state) = model.step(hyp.prev, &hyp.state)?;
            for id in N_SPECIALS..model.vocab_size {
                let mut ext = hyp.clone();
                ext.tokens.push(id);
                ext.logp += probs[id].max(PROB_FLOOR).ln();
                ext.state = state.clone();
                ext.prev = id;
                next.push(ext);
            }
        }
        sort_hyps(&mut next);
        next.truncate(k);
        live = next;
    }
    Ok(live.first().map(|h| h.tokens.clone()).unwrap_or_default())
}

/// First-line generation: the backward model proposes a prefix (at most
/// target_len − len(phrase) characters), the forward model completes
/// the exact remainder. The result always has `target_len` characters
/// with the phrase verbatim after the prefix.
pub fn generate_first_line(
    backward: &LanguageModel,
    forward: &LanguageModel,
    vocab: &Vocabulary,
    phrase: &str,
    target_len: usize,
    k: usize,
    _seed: u64,
) -> Result<String> {
    if k < 1 {
        return Err(Error::Parameter("beam width must be ≥ 1".into()));
    }
    let phrase_chars: Vec<char> = phrase.chars().collect();
    if phrase_chars.len() > target_len {
        return Err(Error::Length(format!(
            "phrase {phrase:?} has {} characters, target length is {target_len}",
            phrase_chars.len()
        )));
    }
    let phrase_ids: Vec<usize> = phrase_chars.iter().map(|&c| vocab.id_of(c)).collect();
    if phrase_ids.iter().any(|&id| id == UNK) {
        log::warn!("phrase {phrase:?} contains out-of-vocabulary characters");
    }

    // backward: feed BOS then the reversed phrase, then extend
    let mut state = backward.zero_state();
    let mut prev = BOS;
    for &id in phrase_ids.iter().rev() {
        let (_, h_new) = backward.step(prev, &state)?;
        state = h_new;
        prev = id;
    }
    let budget = target_len - phrase_ids.len();
    let prefix_rev = backward_beam(backward, state, prev, budget, k)?;
    let prefix: Vec<usize> = prefix_rev.iter().rev().copied().collect();

    // forward: feed BOS + prefix + phrase, then complete the remainder
    let mut state = forward.zero_state();
    let mut prev = BOS;
    for &id in prefix.iter().chain(phrase_ids.iter()) {
        let (_, h_new) = forward.step(prev, &state)?;
        state = h_new;
        prev = id;
    }
    let remainder = target_len - prefix.len() - phrase_ids.len();
    let completion = forward_beam(forward, state, prev, remainder, k)?;

    let mut line = String::new();
    for &id in &prefix {
        line.push(vocab.char_of(id).expect("generated ids are real characters"));
    }
    line.push_str(phrase);
    for &id in &completion {
        line.push(vocab.char_of(id).expect("generated ids are real characters"));
    }
    debug_assert_eq!(line.chars().count(), target_len);
    Ok(line)
}
