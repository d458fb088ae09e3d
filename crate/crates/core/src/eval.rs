//! Machine evaluation: theme-conditioned reference sets, a smoothed
//! character BLEU-2, the RHYTHM score, and batch report assembly.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{Poem, ThemeTaxonomy};
use crate::error::{Error, Result};
use crate::prosody::{poem_rhythm, ProsodyTable};

/// Up to 20 reference poems for one theme, picked by phrase
/// co-occurrence.
#[derive(Clone, Debug)]
pub struct ReferenceSet {
    pub theme: String,
    pub poems: Vec<Poem>,
}

pub const MAX_REFERENCES: usize = 20;

/// Counts, per poem, how many of the theme's phrases occur as
/// contiguous substrings of the concatenated lines (each phrase once),
/// keeps the top 20 by count (ties by corpus order), skips zero-count
/// poems.
pub fn build_theme_references(
    corpus: &[Poem],
    taxonomy: &ThemeTaxonomy,
    theme: &str,
) -> Result<ReferenceSet> {
    let theme_rec = taxonomy.theme(theme)?;
    let mut scored: Vec<(usize, usize)> = Vec::new(); // (count, corpus idx)
    for (idx, poem) in corpus.iter().enumerate() {
        let text: String = poem.lines.concat();
        let count = theme_rec
            .phrases
            .iter()
            .filter(|phrase| text.contains(phrase.as_str()))
            .count();
        if count > 0 {
            scored.push((count, idx));
        }
    }
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(MAX_REFERENCES);
    Ok(ReferenceSet {
        theme: theme.to_string(),
        poems: scored.iter().map(|&(_, idx)| corpus[idx].clone()).collect(),
    })
}

fn char_ngrams(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut counts: HashMap<&[char], usize> = HashMap::new();
    if chars.len() >= n {
        for window in chars.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-style BLEU over the candidate's concatenated characters:
/// modified 1-/2-gram precisions with add-one smoothing, geometric
/// mean, brevity penalty against the closest reference length (ties to
/// the shorter).
pub fn bleu2(candidate: &Poem, references: &ReferenceSet) -> Result<f64> {
    let cand_chars: Vec<char> = candidate.lines.concat().chars().collect();
    if cand_chars.is_empty() {
        return Err(Error::Evaluation("empty candidate poem".into()));
    }
    if references.poems.is_empty() {
        return Err(Error::Evaluation(format!(
            "theme {} has an empty reference set",
            references.theme
        )));
    }
    let ref_chars: Vec<Vec<char>> = references
        .poems
        .iter()
        .map(|p| p.lines.concat().chars().collect())
        .collect();

    let mut log_sum = 0.0;
    for n in 1..=2usize {
        let cand_counts = char_ngrams(&cand_chars, n);
        let ref_counts: Vec<HashMap<&[char], usize>> =
            ref_chars.iter().map(|r| char_ngrams(r, n)).collect();
        let mut matches = 0usize;
        let mut total = 0usize;
        for (ngram, &count) in &cand_counts {
            let best_ref = ref_counts
                .iter()
                .map(|rc| rc.get(ngram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            matches += count.min(best_ref);
            total += count;
        }
        let precision = (matches as f64 + 1.0) / (total as f64 + 1.0);
        log_sum += 0.5 * precision.ln();
    }

    let c = cand_chars.len() as f64;
    let closest = ref_chars
        .iter()
        .map(|r| r.len())
        .min_by_key(|&r| {
            let diff = (r as i64 - c as i64).abs();
            (diff, r)
        })
        .unwrap() as f64;
    let bp = if c >= closest {
        1.0
    } else {
        (1.0 - closest / c).exp()
    };
    Ok(bp * log_sum.exp())
}

/// One evaluated poem in the report.
#[derive(Clone, Debug, Serialize)]
pub struct PoemRow {
    pub id: String,
    pub theme: String,
    /// theme actually used for scoring (differs under negative control)
    pub scored_theme: String,
    pub bleu2: Option<f64>,
    pub rhythm: f64,
    pub skipped: bool,
}

/// Aggregate report: macro means over scored poems.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    /// per-poem BLEU averaged after scoring (macro)
    pub aggregation: String,
    pub n_poems: usize,
    pub n_scored: usize,
    pub n_skipped: usize,
    pub mean_bleu2: f64,
    pub mean_bleu2_x100: f64,
    pub mean_rhythm: f64,
    pub negative_control_seed: Option<u64>,
    pub rows: Vec<PoemRow>,
}

/// Scores every (poem, theme) pair with BLEU-2 against the theme's
/// reference set and RHYTHM against the table. With a negative-control
/// seed, each theme is swapped for a seeded-random different theme
/// first. Poems whose theme yields an empty reference set are skipped
/// but counted.
pub fn evaluate_generated(
    generated: &[(Poem, String)],
    corpus: &[Poem],
    taxonomy: &ThemeTaxonomy,
    prosody: &ProsodyTable,
    negative_control: Option<u64>,
) -> Result<EvalReport> {
    let mut reference_cache: HashMap<String, ReferenceSet> = HashMap::new();
    let mut rows = Vec::with_capacity(generated.len());
    let mut rng = negative_control.map(ChaCha8Rng::seed_from_u64);
    let theme_names: Vec<&str> = taxonomy.themes().iter().map(|t| t.name.as_str()).collect();

    let mut bleu_sum = 0.0;
    let mut rhythm_sum = 0.0;
    let mut n_scored = 0usize;
    for (poem, theme) in generated {
        taxonomy.theme(theme)?; // unknown theme is an error, not a skip
        let scored_theme = match rng.as_mut() {
            Some(rng) if theme_names.len() > 1 => {
                let mut pick;
                loop {
                    pick = theme_names[rng.gen_range(0..theme_names.len())];
                    if pick != theme {
                        break;
                    }
                }
                pick.to_string()
            }
            _ => theme.clone(),
        };
        let refs = match reference_cache.get(&scored_theme) {
            Some(r) => r,
            None => {
                let r = build_theme_references(corpus, taxonomy, &scored_theme)?;
                reference_cache.entry(scored_theme.clone()).or_insert(r)
            }
        };
        let rhythm = poem_rhythm(prosody, poem)?;
        if refs.poems.is_empty() {
            rows.push(PoemRow {
                id: poem.id.clone(),
                theme: theme.clone(),
                scored_theme,
                bleu2: None,
                rhythm,
                skipped: true,
            });
            continue;
        }
        let score = bleu2(poem, refs)?;
        bleu_sum += score;
        rhythm_sum += rhythm;
        n_scored += 1;
        rows.push(PoemRow {
            id: poem.id.clone(),
            theme: theme.clone(),
            scored_theme,
            bleu2: Some(score),
            rhythm,
            skipped: false,
        });
    }

    let denom = n_scored.max(1) as f64;
    Ok(EvalReport {
        aggregation: "macro".to_string(),
        n_poems: generated.len(),
        n_scored,
        n_skipped: generated.len() - n_scored,
        mean_bleu2: bleu_sum / denom,
        mean_bleu2_x100: 100.0 * bleu_sum / denom,
        mean_rhythm: rhythm_sum / denom,
        negative_control_seed: negative_control,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poem(id: &str, lines: [&str; 4]) -> Poem {
        Poem::new(id, "", lines.iter().map(|s| s.to_string()).collect())
    }

    fn taxonomy() -> ThemeTaxonomy {
        ThemeTaxonomy::from_themes(vec![
            (
                "alpha".into(),
                vec!["ab".into(), "cd".into(), "ef".into()],
                vec![true; 3],
            ),
            ("beta".into(), vec!["uv".into(), "wx".into()], vec![true; 2]),
        ])
        .unwrap()
    }

    #[test]
    fn references_ranked_by_cooccurrence() {
        let corpus = vec![
            poem("p0", ["abcda", "bcdab", "cdabc", "dabcd"]), // ab, cd  → 2
            poem("p1", ["abaaa", "aaaaa", "aaaaa", "aaaaa"]), // ab      → 1
            poem("p2", ["uvuvu", "vuvuv", "uvuvu", "vuvuv"]), // none    → excluded
            poem("p3", ["abcde", "fabcd", "eabcd", "fefef"]), // ab, cd, ef → 3
        ];
        let refs = build_theme_references(&corpus, &taxonomy(), "alpha").unwrap();
        let ids: Vec<&str> = refs.poems.iter().map(|p| p.id.as_str()).collect();
        // brute-force oracle: counts are 2, 1, 0, 3 → order p3, p0, p1
        assert_eq!(ids, vec!["p3", "p0", "p1"]);
        assert!(build_theme_references(&corpus, &taxonomy(), "nope").is_err());
    }

    #[test]
    fn references_empty_and_capped() {
        let corpus: Vec<Poem> = (0..25)
            .map(|i| poem(&format!("p{i}"), ["ababa", "babab", "ababa", "babab"]))
            .collect();
        let refs = build_theme_references(&corpus, &taxonomy(), "alpha").unwrap();
        assert_eq!(refs.poems.len(), MAX_REFERENCES);
        // ties keep corpus order
        assert_eq!(refs.poems[0].id, "p0");
        let refs = build_theme_references(&corpus, &taxonomy(), "beta").unwrap();
        assert!(refs.poems.is_empty());
    }

    fn ref_set(poems: Vec<Poem>) -> ReferenceSet {
        ReferenceSet {
            theme: "t".into(),
            poems,
        }
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let cand = poem("c", ["abcde", "fghij", "klmno", "pqrst"]);
        let refs = ref_set(vec![
            cand.clone(),
            poem("other", ["zzzzz", "zzzzz", "zzzzz", "zzzzz"]),
        ]);
        let exact = bleu2(&cand, &refs).unwrap();
        assert!(exact >= 0.99, "identity bleu {exact}");
        assert!((exact - 1.0).abs() < 1e-12);

        let disjoint = ref_set(vec![poem("r", ["uuuuu", "vvvvv", "wwwww", "xxxxx"])]);
        let low = bleu2(&cand, &disjoint).unwrap();
        assert!(low < 0.05, "disjoint bleu {low}");
        assert!(low > 0.0);
    }

    #[test]
    fn bleu_hand_computed_fixture() {
        // candidate: 20 chars, all distinct; 19 bigrams
        let cand = poem("c", ["abcde", "fghij", "klmno", "pqrst"]);
        // ref1 shares exactly a,b,c,d,e and bigrams ab,bc,cd,de
        // ref2 stacks repeats: clipping keeps 1-gram matches at 5
        let refs = ref_set(vec![
            poem("r1", ["abcde", "uuuuu", "vvvvv", "wwwww"]),
            poem("r2", ["aaaaa", "bbbbb", "ccccc", "ddddd"]),
        ]);
        // p1 = (5+1)/(20+1), p2 = (4+1)/(19+1), BP = 1 (equal lengths)
        let expect = (6.0_f64 / 21.0 * (5.0 / 20.0)).sqrt();
        let got = bleu2(&cand, &refs).unwrap();
        assert!(
            (got - expect).abs() < 1e-12,
            "bleu {got} vs hand-computed {expect}"
        );
    }

    #[test]
    fn bleu_brevity_penalty_applies() {
        // candidate shorter than every reference
        let cand = Poem::new("c", "", vec!["abc".into()]);
        let refs = ref_set(vec![poem("r", ["abcde", "abcde", "abcde", "abcde"])]);
        let got = bleu2(&cand, &refs).unwrap();
        // matches: 1-grams a,b,c (3/3→clipped ok), bigrams ab,bc
        let p1: f64 = (3.0 + 1.0) / (3.0 + 1.0);
        let p2: f64 = (2.0 + 1.0) / (2.0 + 1.0);
        let bp = (1.0_f64 - 20.0 / 3.0).exp();
        let expect = bp * (p1 * p2).sqrt();
        assert!((got - expect).abs() < 1e-12);
        assert!(matches!(
            bleu2(&cand, &ref_set(vec![])),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn bleu_monotone_in_own_reference() {
        let cand = poem("c", ["abcab", "cabca", "bcabc", "abcba"]);
        let weak = ref_set(vec![poem("r", ["axaxa", "xbxbx", "cxcxc", "xaxax"])]);
        let s1 = bleu2(&cand, &weak).unwrap();
        let mut poems = weak.poems.clone();
        poems.push(cand.clone());
        let s2 = bleu2(&cand, &ref_set(poems)).unwrap();
        assert!(s2 >= s1);
        assert!((0.0..=1.0).contains(&s1) && (0.0..=1.0).contains(&s2));
    }

    fn control_corpus() -> (Vec<Poem>, ThemeTaxonomy) {
        // theme-disjoint vocabularies: alpha poems use a–e, beta u–x
        let mut corpus = Vec::new();
        for i in 0..10 {
            corpus.push(poem(
                &format!("a{i}"),
                ["abcde", "cdeab", "eabcd", "bcdea"],
            ));
            corpus.push(poem(
                &format!("b{i}"),
                ["uvwxu", "wxuvw", "uvxwu", "xuvwx"],
            ));
        }
        (corpus, taxonomy())
    }

    #[test]
    fn positive_beats_negative_control() {
        let (corpus, tax) = control_corpus();
        let table = ProsodyTable::miniature();
        let generated: Vec<(Poem, String)> = (0..10)
            .map(|i| (corpus[2 * i].clone(), "alpha".to_string()))
            .chain((0..10).map(|i| (corpus[2 * i + 1].clone(), "beta".to_string())))
            .collect();
        let positive = evaluate_generated(&generated, &corpus, &tax, &table, None).unwrap();
        let negative = evaluate_generated(&generated, &corpus, &tax, &table, Some(9)).unwrap();
        assert!(
            positive.mean_bleu2 > 2.0 * negative.mean_bleu2,
            "positive {:.4} vs negative {:.4}",
            positive.mean_bleu2,
            negative.mean_bleu2
        );
        assert_eq!(positive.n_skipped, 0);
    }

    #[test]
    fn perfect_fixture_scores_rhythm_one() {
        // miniature table: all-wildcard patterns; lines 2 and 4 end in
        // the same rhyme group (letters with index ≡ mod 3)
        let table = ProsodyTable::miniature();
        let corpus = vec![
            poem("g0", ["abcde", "fghia", "jklmn", "opqrd"]), // a and d share g0
            poem("g1", ["bcdef", "ghijb", "klmno", "pqrse"]), // b and e share g1
        ];
        let tax = ThemeTaxonomy::from_themes(vec![(
            "t".into(),
            vec!["ab".into(), "bc".into()],
            vec![true; 2],
        )])
        .unwrap();
        let generated: Vec<(Poem, String)> = corpus
            .iter()
            .map(|p| (p.clone(), "t".to_string()))
            .collect();
        let report = evaluate_generated(&generated, &corpus, &tax, &table, None).unwrap();
        assert_eq!(report.mean_rhythm, 1.0);
        assert!((report.mean_bleu2_x100 - 100.0 * report.mean_bleu2).abs() < 1e-9);
    }

    #[test]
    fn empty_input_reports_zero_counts() {
        let (corpus, tax) = control_corpus();
        let table = ProsodyTable::miniature();
        let report = evaluate_generated(&[], &corpus, &tax, &table, None).unwrap();
        assert_eq!(report.n_poems, 0);
        assert_eq!(report.n_scored, 0);
        assert_eq!(report.mean_bleu2, 0.0);
    }

    #[test]
    fn empty_reference_set_skips_and_counts() {
        let (corpus, tax) = control_corpus();
        // corpus stripped of beta poems → beta has no references
        let alpha_only: Vec<Poem> = corpus
            .iter()
            .filter(|p| p.id.starts_with('a'))
            .cloned()
            .collect();
        let table = ProsodyTable::miniature();
        let generated = vec![
            (alpha_only[0].clone(), "alpha".to_string()),
            (corpus[1].clone(), "beta".to_string()),
        ];
        let report =
            evaluate_generated(&generated, &alpha_only, &tax, &table, None).unwrap();
        assert_eq!(report.n_scored, 1);
        assert_eq!(report.n_skipped, 1);
        assert!(report.rows[1].skipped);
        assert!(report.rows[1].bleu2.is_none());
    }
}
