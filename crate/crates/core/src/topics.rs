//! LDA topic model over segmented documents, fit by collapsed Gibbs
//! sampling. Backs the per-phrase topic vectors, the relevance
//! coefficient between phrases, and title selection.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numkernel::{cosine, Matrix};

/// Trained topic model: final-sweep count matrices plus hyperparameters
/// and the phrase dictionary.
#[derive(Clone, Debug)]
pub struct TopicModel {
    pub k: usize,
    /// phrase index → phrase (dictionary order = first appearance)
    pub dictionary: Vec<String>,
    index: BTreeMap<String, usize>,
    /// W×K counts of phrase w assigned to topic k
    pub phrase_topic: Matrix,
    /// per-topic totals (column sums of phrase_topic)
    pub topic_totals: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
}

/// Per-phrase distribution over topics: entry j = smoothed P(t | z_j).
#[derive(Clone, Debug, PartialEq)]
pub struct TopicVector {
    pub values: Vec<f64>,
    /// false when the phrase was outside the dictionary and the vector
    /// fell back to uniform
    pub in_dictionary: bool,
}

impl TopicModel {
    /// Rebuilds a model from persisted counts.
    pub fn from_parts(
        k: usize,
        dictionary: Vec<String>,
        phrase_topic: Matrix,
        topic_totals: Vec<f64>,
        alpha: f64,
        beta: f64,
    ) -> Result<Self> {
        if phrase_topic.rows() != dictionary.len() || phrase_topic.cols() != k {
            return Err(Error::Dim(format!(
                "phrase_topic {}x{} against {} phrases and {} topics",
                phrase_topic.rows(),
                phrase_topic.cols(),
                dictionary.len(),
                k
            )));
        }
        if topic_totals.len() != k {
            return Err(Error::Dim(format!(
                "{} topic totals for {} topics",
                topic_totals.len(),
                k
            )));
        }
        let index = dictionary
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        Ok(TopicModel {
            k,
            dictionary,
            index,
            phrase_topic,
            topic_totals,
            alpha,
            beta,
        })
    }

    pub fn phrase_index(&self, phrase: &str) -> Option<usize> {
        self.index.get(phrase).copied()
    }

    /// Smoothed P(t | z_j) for every topic; out-of-dictionary phrases
    /// get a uniform vector, flagged.
    pub fn topic_vector(&self, phrase: &str) -> TopicVector {
        match self.phrase_index(phrase) {
            Some(w) => {
                let dict_size = self.dictionary.len() as f64;
                let values = (0..self.k)
                    .map(|j| {
                        (self.phrase_topic.at(w, j) + self.beta)
                            / (self.topic_totals[j] + self.beta * dict_size)
                    })
                    .collect();
                TopicVector {
                    values,
                    in_dictionary: true,
                }
            }
            None => TopicVector {
                values: vec![1.0 / self.k as f64; self.k],
                in_dictionary: false,
            },
        }
    }
}

/// Collapsed Gibbs sampling; counts come from the final sweep, no
/// averaging. Deterministic for a fixed seed.
pub fn train_lda_gibbs(
    docs: &[Vec<String>],
    k: usize,
    alpha: f64,
    beta: f64,
    iters: usize,
    seed: u64,
) -> Result<TopicModel> {
    if k < 1 {
        return Err(Error::Parameter("lda needs K ≥ 1".into()));
    }
    if iters < 1 {
        return Err(Error::Parameter("lda needs iters ≥ 1".into()));
    }
    for (i, doc) in docs.iter().enumerate() {
        if doc.is_empty() {
            return Err(Error::Input(format!("lda document {i} is empty")));
        }
    }

    // dictionary in first-appearance order
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut dictionary: Vec<String> = Vec::new();
    let docs_ids: Vec<Vec<usize>> = docs
        .iter()
        .map(|doc| {
            doc.iter()
                .map(|tok| {
                    *index.entry(tok.clone()).or_insert_with(|| {
                        dictionary.push(tok.clone());
                        dictionary.len() - 1
                    })
                })
                .collect()
        })
        .collect();
    let w_size = dictionary.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phrase_topic = vec![vec![0f64; k]; w_size];
    let mut topic_totals = vec![0f64; k];
    let mut doc_topic = vec![vec![0f64; k]; docs.len()];
    let mut assign: Vec<Vec<usize>> = Vec::with_capacity(docs.len());

    for (d, doc) in docs_ids.iter().enumerate() {
        let mut za = Vec::with_capacity(doc.len());
        for &w in doc {
            let z = rng.gen_range(0..k);
            phrase_topic[w][z] += 1.0;
            topic_totals[z] += 1.0;
            doc_topic[d][z] += 1.0;
            za.push(z);
        }
        assign.push(za);
    }

    let beta_w = beta * w_size as f64;
    let mut weights = vec![0f64; k];
    for _ in 0..iters {
        for (d, doc) in docs_ids.iter().enumerate() {
            for (n, &w) in doc.iter().enumerate() {
                let z_old = assign[d][n];
                phrase_topic[w][z_old] -= 1.0;
                topic_totals[z_old] -= 1.0;
                doc_topic[d][z_old] -= 1.0;

                let mut total = 0.0;
                for j in 0..k {
                    let p = (phrase_topic[w][j] + beta) / (topic_totals[j] + beta_w)
                        * (doc_topic[d][j] + alpha);
                    weights[j] = p;
                    total += p;
                }
                let mut x = rng.gen_range(0.0..total);
                let mut z_new = k - 1;
                for (j, &p) in weights.iter().enumerate() {
                    if x < p {
                        z_new = j;
                        break;
                    }
                    x -= p;
                }
                phrase_topic[w][z_new] += 1.0;
                topic_totals[z_new] += 1.0;
                doc_topic[d][z_new] += 1.0;
                assign[d][n] = z_new;
            }
        }
    }

    let mut counts = Matrix::zeros(w_size, k);
    for (w, row) in phrase_topic.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            *counts.at_mut(w, j) = c;
        }
    }
    Ok(TopicModel {
        k,
        dictionary,
        index,
        phrase_topic: counts,
        topic_totals,
        alpha,
        beta,
    })
}

/// Relevance coefficient between two topic vectors:
/// 0.5·cosine + 0.5, in [0, 1].
pub fn relevance(a: &TopicVector, b: &TopicVector) -> Result<f64> {
    let c = cosine(&a.values, &b.values)
        .ok_or_else(|| Error::NonFinite("relevance of a zero topic vector".into()))?;
    Ok(0.5 * c + 0.5)
}

/// A title candidate: the phrase, its eligibility flag, and its
/// position in taxonomy order (the tie-break key).
#[derive(Clone, Debug)]
pub struct TitleCandidate {
    pub phrase: String,
    pub title_ok: bool,
    pub taxonomy_idx: usize,
}

/// Picks the title: the eligible candidate, not among the first line's
/// segmented phrases, maximizing the summed relevance to those phrases.
/// Ties go to the earliest taxonomy index.
pub fn select_title(
    model: &TopicModel,
    first_line_phrases: &[String],
    candidates: &[TitleCandidate],
) -> Result<String> {
    let line_vectors: Vec<TopicVector> = first_line_phrases
        .iter()
        .map(|p| model.topic_vector(p))
        .collect();
    let mut best: Option<(f64, usize, &str)> = None;
    for cand in candidates {
        if !cand.title_ok {
            continue;
        }
        if first_line_phrases.iter().any(|p| p == &cand.phrase) {
            continue;
        }
        let cand_vec = model.topic_vector(&cand.phrase);
        let mut score = 0.0;
        for lv in &line_vectors {
            score += relevance(lv, &cand_vec)?;
        }
        let better = match best {
            None => true,
            Some((s, idx, _)) => {
                score > s || (score == s && cand.taxonomy_idx < idx)
            }
        };
        if better {
            best = Some((score, cand.taxonomy_idx, &cand.phrase));
        }
    }
    best.map(|(_, _, phrase)| phrase.to_string())
        .ok_or_else(|| Error::Selection("no eligible title candidate".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs_of(strs: &[&[&str]]) -> Vec<Vec<String>> {
        strs.iter()
            .map(|d| d.iter().map(|s| s.to_string()).collect())
            .collect()
    }

    #[test]
    fn single_topic_matches_relative_frequency() {
        let docs = docs_of(&[&["a", "b", "a"], &["a", "c"]]);
        let model = train_lda_gibbs(&docs, 1, 1.0, 0.1, 5, 0).unwrap();
        // every token in topic 0
        assert_eq!(model.topic_totals[0], 5.0);
        // P(a|z0) = (3 + 0.1) / (5 + 0.1*3)
        let ta = model.topic_vector("a");
        assert!((ta.values[0] - 3.1 / 5.3).abs() < 1e-12);
        assert!(ta.in_dictionary);
    }

    #[test]
    fn same_seed_identical_counts() {
        let docs = docs_of(&[&["a", "b"], &["b", "c"], &["c", "a"]]);
        let m1 = train_lda_gibbs(&docs, 3, 0.5, 0.01, 50, 9).unwrap();
        let m2 = train_lda_gibbs(&docs, 3, 0.5, 0.01, 50, 9).unwrap();
        assert_eq!(m1.phrase_topic.data(), m2.phrase_topic.data());
    }

    #[test]
    fn empty_document_names_index() {
        let docs = vec![vec!["a".to_string()], vec![]];
        match train_lda_gibbs(&docs, 2, 0.5, 0.01, 1, 0) {
            Err(Error::Input(msg)) => assert!(msg.contains("1")),
            other => panic!("expected input error, got {other:?}"),
        }
    }

    /// Token purity of the best topic↔cluster matching.
    fn two_cluster_purity(seed: u64) -> f64 {
        let cluster_a: Vec<String> = (0..8).map(|i| format!("a{i}")).collect();
        let cluster_b: Vec<String> = (0..8).map(|i| format!("b{i}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut docs = Vec::new();
        let mut labels = Vec::new();
        for d in 0..200 {
            let pool = if d % 2 == 0 { &cluster_a } else { &cluster_b };
            let doc: Vec<String> = (0..10)
                .map(|_| pool[rng.gen_range(0..pool.len())].clone())
                .collect();
            labels.push(d % 2);
            docs.push(doc);
        }
        let model = train_lda_gibbs(&docs, 2, 0.5, 0.01, 120, seed).unwrap();
        // count token assignments per (cluster, argmax topic of its phrase)
        let mut counts = [[0usize; 2]; 2];
        for (doc, &label) in docs.iter().zip(labels.iter()) {
            for tok in doc {
                let tv = model.topic_vector(tok);
                let top = if tv.values[0] >= tv.values[1] { 0 } else { 1 };
                counts[label][top] += 1;
            }
        }
        let direct = counts[0][0] + counts[1][1];
        let flipped = counts[0][1] + counts[1][0];
        let total = direct + flipped;
        direct.max(flipped) as f64 / total as f64
    }

    #[test]
    fn two_topic_recovery() {
        for seed in [1, 2, 3] {
            let purity = two_cluster_purity(seed);
            assert!(purity >= 0.9, "seed {seed}: purity {purity:.3}");
        }
    }

    fn hand_model() -> TopicModel {
        // 2 phrases × 2 topics with hand-filled counts
        let mut index = BTreeMap::new();
        index.insert("x".to_string(), 0);
        index.insert("y".to_string(), 1);
        TopicModel {
            k: 2,
            dictionary: vec!["x".into(), "y".into()],
            index,
            phrase_topic: Matrix::from_vec(2, 2, vec![3.0, 1.0, 0.0, 2.0]).unwrap(),
            topic_totals: vec![3.0, 3.0],
            alpha: 0.5,
            beta: 0.1,
        }
    }

    #[test]
    fn topic_vector_smoothing_formula() {
        let model = hand_model();
        let tx = model.topic_vector("x");
        // (3 + 0.1)/(3 + 0.1*2) and (1 + 0.1)/(3 + 0.2)
        assert!((tx.values[0] - 3.1 / 3.2).abs() < 1e-12);
        assert!((tx.values[1] - 1.1 / 3.2).abs() < 1e-12);
        let tz = model.topic_vector("zzz");
        assert!(!tz.in_dictionary);
        assert_eq!(tz.values, vec![0.5, 0.5]);
    }

    #[test]
    fn per_topic_distribution_sums_to_one() {
        let docs = docs_of(&[&["a", "b", "c"], &["b", "c", "d"], &["d", "e"]]);
        let model = train_lda_gibbs(&docs, 3, 0.5, 0.05, 30, 4).unwrap();
        for j in 0..model.k {
            let total: f64 = model
                .dictionary
                .iter()
                .map(|p| model.topic_vector(p).values[j])
                .sum();
            assert!((total - 1.0).abs() < 1e-9, "topic {j} sums to {total}");
            for p in &model.dictionary {
                assert!(model.topic_vector(p).values[j] > 0.0);
            }
        }
    }

    fn tv(values: &[f64]) -> TopicVector {
        TopicVector {
            values: values.to_vec(),
            in_dictionary: true,
        }
    }

    #[test]
    fn relevance_identities() {
        let a = tv(&[0.2, 0.8]);
        assert!((relevance(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let x = tv(&[1.0, 0.0]);
        let y = tv(&[0.0, 1.0]);
        assert!((relevance(&x, &y).unwrap() - 0.5).abs() < 1e-12);
        let z = tv(&[1.0, 1.0]);
        let expect = 0.5 / 2.0_f64.sqrt() + 0.5;
        assert!((relevance(&x, &z).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.8536).abs() < 1e-4);
        assert!(relevance(&tv(&[0.0, 0.0]), &x).is_err());
    }

    #[test]
    fn relevance_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..500 {
            let a = tv(&[rng.gen_range(0.01..1.0), rng.gen_range(0.01..1.0)]);
            let b = tv(&[rng.gen_range(0.01..1.0), rng.gen_range(0.01..1.0)]);
            let r1 = relevance(&a, &b).unwrap();
            let r2 = relevance(&b, &a).unwrap();
            assert!((r1 - r2).abs() < 1e-12);
            assert!((0.0..=1.0 + 1e-12).contains(&r1));
        }
    }

    fn cands(specs: &[(&str, bool)]) -> Vec<TitleCandidate> {
        specs
            .iter()
            .enumerate()
            .map(|(i, &(p, ok))| TitleCandidate {
                phrase: p.to_string(),
                title_ok: ok,
                taxonomy_idx: i,
            })
            .collect()
    }

    #[test]
    fn title_exclusion_and_boundary() {
        let model = hand_model();
        let line = vec!["x".to_string()];
        // "x" is in the line, so "y" wins regardless of score
        let got = select_title(&model, &line, &cands(&[("x", true), ("y", true)])).unwrap();
        assert_eq!(got, "y");
        // single eligible candidate returned unconditionally
        let got = select_title(&model, &line, &cands(&[("y", true)])).unwrap();
        assert_eq!(got, "y");
        // nothing eligible → selection error
        assert!(matches!(
            select_title(&model, &line, &cands(&[("x", true), ("y", false)])),
            Err(Error::Selection(_))
        ));
    }

    #[test]
    fn title_matches_brute_force() {
        let docs = docs_of(&[
            &["spring", "wind", "flower"],
            &["wind", "flower", "spring"],
            &["moon", "night", "frost"],
            &["night", "frost", "moon"],
        ]);
        let model = train_lda_gibbs(&docs, 2, 0.5, 0.01, 80, 5).unwrap();
        let line = vec!["spring".to_string(), "wind".to_string()];
        let candidates = cands(&[("flower", true), ("moon", true), ("night", true)]);

        // brute-force argmax over the same sum
        let mut best = (f64::NEG_INFINITY, String::new());
        for cand in &candidates {
            let cv = model.topic_vector(&cand.phrase);
            let score: f64 = line
                .iter()
                .map(|p| relevance(&model.topic_vector(p), &cv).unwrap())
                .sum();
            if score > best.0 {
                best = (score, cand.phrase.clone());
            }
        }
        let got = select_title(&model, &line, &candidates).unwrap();
        assert_eq!(got, best.1);
    }

    #[test]
    fn title_invariant_to_candidate_order() {
        let model = hand_model();
        let line = vec!["q".to_string()];
        let a = cands(&[("x", true), ("y", true)]);
        let mut b = a.clone();
        b.reverse();
        let t1 = select_title(&model, &line, &a).unwrap();
        let t2 = select_title(&model, &line, &b).unwrap();
        assert_eq!(t1, t2);
    }
}
