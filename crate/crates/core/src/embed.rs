//! Pre-trained character embeddings: a skip-gram model fit with
//! noise-contrastive estimation, used to initialize every downstream
//! model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::numkernel::{cosine, sigmoid, Matrix};

/// One embedding row per vocabulary id, specials included.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub dim: usize,
    /// V×d
    pub matrix: Matrix,
}

impl EmbeddingTable {
    pub fn row(&self, id: usize) -> &[f64] {
        self.matrix.row(id)
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.rows()
    }
}

#[derive(Clone, Debug)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub k_noise: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig {
            dim: 64,
            window: 2,
            k_noise: 16,
            epochs: 5,
            lr: 0.05,
        }
    }
}

/// Unigram distribution raised to 0.75, with cumulative sums for
/// deterministic inverse-CDF sampling.
struct NoiseSampler {
    cums: Vec<f64>,
    total: f64,
    probs: Vec<f64>,
}

impl NoiseSampler {
    fn new(counts: &[usize]) -> Self {
        let weights: Vec<f64> = counts.iter().map(|&c| (c as f64).powf(0.75)).collect();
        let total: f64 = weights.iter().sum();
        let mut cums = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for w in &weights {
            acc += w;
            cums.push(acc);
        }
        let probs = weights.iter().map(|w| w / total).collect();
        NoiseSampler { cums, total, probs }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let x = rng.gen_range(0.0..self.total);
        match self.cums.binary_search_by(|c| c.partial_cmp(&x).unwrap()) {
            Ok(i) => i + 1,
            Err(i) => i,
        }
        .min(self.cums.len() - 1)
    }

    fn prob(&self, id: usize) -> f64 {
        self.probs[id]
    }
}

/// Result of a training run: the table plus the mean NCE loss recorded
/// per epoch.
pub struct SkipGramRun {
    pub table: EmbeddingTable,
    pub epoch_losses: Vec<f64>,
}

/// Trains input-side skip-gram embeddings with the NCE objective. Pairs
/// are (center, context) within `window` positions inside each
/// sequence; each pair is contrasted with `k_noise` samples from the
/// unigram^0.75 distribution.
pub fn train_skipgram_nce(
    sequences: &[Vec<usize>],
    vocab: &Vocabulary,
    config: &SkipGramConfig,
    seed: u64,
) -> Result<SkipGramRun> {
    if config.dim < 2 || config.window < 1 || config.k_noise < 1 {
        return Err(Error::Parameter(
            "skip-gram needs dim ≥ 2, window ≥ 1, k_noise ≥ 1".into(),
        ));
    }
    let n_tokens: usize = sequences.iter().map(|s| s.len()).sum();
    if n_tokens == 0 {
        return Err(Error::Size("skip-gram corpus is empty".into()));
    }
    let v = vocab.size();
    let mut counts = vec![0usize; v];
    for seq in sequences {
        for &id in seq {
            if id >= v {
                return Err(Error::Lookup(format!("token id {id} out of vocab {v}")));
            }
            counts[id] += 1;
        }
    }
    // every id keeps a nonzero noise weight so sampling stays defined
    for c in counts.iter_mut() {
        if *c == 0 {
            *c = 1;
        }
    }
    let sampler = NoiseSampler::new(&counts);
    let k = config.k_noise as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 0.5 / config.dim as f64;
    let mut input = Matrix::from_fn(v, config.dim, |_, _| rng.gen_range(-scale..scale));
    let mut output = Matrix::from_fn(v, config.dim, |_, _| rng.gen_range(-scale..scale));

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        let mut n_pairs = 0usize;
        for seq in sequences {
            for (pos, &center) in seq.iter().enumerate() {
                let lo = pos.saturating_sub(config.window);
                let hi = (pos + config.window).min(seq.len() - 1);
                for ctx_pos in lo..=hi {
                    if ctx_pos == pos {
                        continue;
                    }
                    let context = seq[ctx_pos];
                    n_pairs += 1;
                    let mut d_center = vec![0.0; config.dim];
                    let v_c: Vec<f64> = input.row(center).to_vec();

                    // data term: picks the observed pair against the noise prior
                    let mut pair_loss = 0.0;
                    {
                        let u = output.row(context).to_vec();
                        let s = dot_slices(&u, &v_c) - (k * sampler.prob(context)).ln();
                        let p = sigmoid(s);
                        pair_loss -= p.max(f64::MIN_POSITIVE).ln();
                        let g = p - 1.0; // d loss / d s
                        for i in 0..config.dim {
                            d_center[i] += g * u[i];
                        }
                        let row = output.row_mut(context);
                        for i in 0..config.dim {
                            row[i] -= config.lr * g * v_c[i];
                        }
                    }
                    // noise terms
                    for _ in 0..config.k_noise {
                        let noise = sampler.sample(&mut rng);
                        let u = output.row(noise).to_vec();
                        let s = dot_slices(&u, &v_c) - (k * sampler.prob(noise)).ln();
                        let p = sigmoid(s);
                        pair_loss -= (1.0 - p).max(f64::MIN_POSITIVE).ln();
                        let g = p; // d loss / d s
                        for i in 0..config.dim {
                            d_center[i] += g * u[i];
                        }
                        let row = output.row_mut(noise);
                        for i in 0..config.dim {
                            row[i] -= config.lr * g * v_c[i];
                        }
                    }
                    let row = input.row_mut(center);
                    for i in 0..config.dim {
                        row[i] -= config.lr * d_center[i];
                    }
                    loss_sum += pair_loss;
                }
            }
        }
        epoch_losses.push(if n_pairs == 0 {
            0.0
        } else {
            loss_sum / n_pairs as f64
        });
    }
    if !input.is_finite() {
        return Err(Error::NonFinite("skip-gram embedding table".into()));
    }
    Ok(SkipGramRun {
        table: EmbeddingTable {
            dim: config.dim,
            matrix: input,
        },
        epoch_losses,
    })
}

fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Nearest rows by cosine, descending, excluding the query; ties by id.
pub fn cosine_neighbors(
    table: &EmbeddingTable,
    id: usize,
    top_n: usize,
) -> Result<Vec<(usize, f64)>> {
    if id >= table.vocab_size() {
        return Err(Error::Lookup(format!(
            "embedding id {id} out of {}",
            table.vocab_size()
        )));
    }
    let query = table.row(id);
    let mut scored: Vec<(usize, f64)> = (0..table.vocab_size())
        .filter(|&j| j != id)
        .filter_map(|j| cosine(query, table.row(j)).map(|c| (j, c)))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(top_n);
    Ok(scored)
}
