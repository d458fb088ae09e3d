//! Deterministic synthetic corpora for tests and the bundled demo: a
//! small alphabet with assigned tones and rhyme groups, theme-disjoint
//! phrase vocabularies, and prosody-perfect quatrains with strong
//! positional structure for the models to learn.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Poem, ThemeTaxonomy};
use crate::error::{Error, Result};
use crate::prosody::{ProsodyTable, Tone};

/// The synthetic alphabet: 52 letters.
fn alphabet() -> Vec<char> {
    ('a'..='z').chain('A'..='Z').collect()
}

fn tone_of(index: usize) -> Tone {
    // first half of each case run is Ping, second half Ze
    let in_case = index % 26;
    if in_case < 13 {
        Tone::Ping
    } else {
        Tone::Ze
    }
}

fn group_of(index: usize) -> String {
    format!("g{}", index % 3)
}

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub n_poems: usize,
    pub n_themes: usize,
    /// every n-th poem is 7-character (0 disables)
    pub seven_every: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_poems: 500,
            n_themes: 4,
            seven_every: 4,
            seed: 2024,
        }
    }
}

pub struct SynthData {
    pub poems: Vec<Poem>,
    /// theme name of each poem, parallel to `poems`
    pub poem_themes: Vec<String>,
    pub taxonomy: ThemeTaxonomy,
    pub prosody: ProsodyTable,
    /// rows for the tones TSV: (char, tone letter, rhyme group)
    tone_rows: Vec<(char, char, String)>,
    /// rows for the patterns TSV: (length, line index, pattern)
    pattern_rows: Vec<(usize, usize, String)>,
}

struct ThemePool {
    name: String,
    chars: Vec<char>,
    phrases: Vec<String>,
}

fn build_pools(n_themes: usize) -> Vec<ThemePool> {
    let chars = alphabet();
    (0..n_themes)
        .map(|t| {
            let pool: Vec<char> = chars
                .iter()
                .enumerate()
                .filter(|(i, _)| i % n_themes == t)
                .map(|(_, &c)| c)
                .collect();
            let phrases: Vec<String> = pool
                .chunks(2)
                .take(6)
                .filter(|p| p.len() == 2)
                .map(|p| p.iter().collect())
                .collect();
            ThemePool {
                name: format!("theme-{t}"),
                chars: pool,
                phrases,
            }
        })
        .collect()
}

fn line_template(len: usize, line_index: usize) -> String {
    let stars = "*".repeat(len - 2);
    if line_index == 2 || line_index == 4 {
        format!("{stars}ZP")
    } else {
        format!("{stars}PZ")
    }
}

/// Weighted pick biased by position, giving each (theme, slot) a
/// learnable preference order.
fn pick_biased(cands: &[char], slot: usize, rng: &mut ChaCha8Rng) -> char {
    debug_assert!(!cands.is_empty());
    let n = cands.len();
    let mut weights = Vec::with_capacity(n);
    let mut total = 0.0f64;
    for r in 0..n {
        let rank = (r + slot) % n;
        let w = 16.0 / (1 << rank.min(4)) as f64;
        weights.push(w);
        total += w;
    }
    let mut x = rng.gen_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return cands[i];
        }
        x -= w;
    }
    cands[n - 1]
}

fn chars_with(pool: &[char], index_of: impl Fn(char) -> usize, tone: Tone) -> Vec<char> {
    pool.iter()
        .copied()
        .filter(|&c| tone_of(index_of(c)) == tone)
        .collect()
}

/// Generates the corpus, taxonomy and prosody tables.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    if spec.n_poems == 0 || spec.n_themes == 0 {
        return Err(Error::Parameter("synthetic corpus needs poems and themes".into()));
    }
    let chars = alphabet();
    if spec.n_themes > 8 {
        return Err(Error::Parameter("at most 8 synthetic themes".into()));
    }
    let index_of = |c: char| chars.iter().position(|&x| x == c).expect("alphabet char");

    let mut prosody = ProsodyTable::new();
    let mut tone_rows = Vec::new();
    for (i, &c) in chars.iter().enumerate() {
        let tone = tone_of(i);
        prosody.set_tone(c, tone);
        prosody.set_rhyme_group(c, group_of(i));
        let letter = match tone {
            Tone::Ping => 'P',
            Tone::Ze => 'Z',
            Tone::Both => 'B',
        };
        tone_rows.push((c, letter, group_of(i)));
    }
    let mut pattern_rows = Vec::new();
    for len in [5usize, 7] {
        for idx in 1..=4 {
            let pattern = line_template(len, idx);
            prosody.add_pattern(len, idx, &pattern)?;
            pattern_rows.push((len, idx, pattern));
        }
    }

    let pools = build_pools(spec.n_themes);
    let taxonomy = ThemeTaxonomy::from_themes(
        pools
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    p.phrases.clone(),
                    vec![true; p.phrases.len()],
                )
            })
            .collect(),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut poems = Vec::with_capacity(spec.n_poems);
    let mut poem_themes = Vec::with_capacity(spec.n_poems);
    for i in 0..spec.n_poems {
        let pool = &pools[i % pools.len()];
        let len = if spec.seven_every > 0 && i % spec.seven_every == spec.seven_every - 1 {
            7
        } else {
            5
        };
        let ping = chars_with(&pool.chars, index_of, Tone::Ping);
        let ze = chars_with(&pool.chars, index_of, Tone::Ze);
        debug_assert!(!ping.is_empty() && !ze.is_empty());

        // rhyme group shared by lines 2 and 4: any group with a Ping char
        let groups: Vec<String> = {
            let mut gs: Vec<String> = ping.iter().map(|&c| group_of(index_of(c))).collect();
            gs.sort();
            gs.dedup();
            gs
        };
        let group = groups[rng.gen_range(0..groups.len())].clone();
        let rhyme_chars: Vec<char> = ping
            .iter()
            .copied()
            .filter(|&c| group_of(index_of(c)) == group)
            .collect();

        let mut lines = Vec::with_capacity(4);
        let mut title = String::new();
        for line_idx in 1..=4 {
            let template: Vec<char> = line_template(len, line_idx).chars().collect();
            let phrase = &pool.phrases[rng.gen_range(0..pool.phrases.len())];
            if line_idx == 1 {
                title = pool.phrases[rng.gen_range(0..pool.phrases.len())].clone();
            }
            let offset = rng.gen_range(0..=len - 4); // clear of the two pinned slots
            let phrase_chars: Vec<char> = phrase.chars().collect();
            let mut line = Vec::with_capacity(len);
            for (slot, &slot_kind) in template.iter().enumerate() {
                if slot >= offset && slot < offset + 2 {
                    line.push(phrase_chars[slot - offset]);
                    continue;
                }
                let c = match slot_kind {
                    'P' => {
                        if (line_idx == 2 || line_idx == 4) && slot == len - 1 {
                            rhyme_chars[rng.gen_range(0..rhyme_chars.len())]
                        } else {
                            pick_biased(&ping, slot, &mut rng)
                        }
                    }
                    'Z' => pick_biased(&ze, slot, &mut rng),
                    _ => pick_biased(&pool.chars, slot, &mut rng),
                };
                line.push(c);
            }
            lines.push(line.into_iter().collect::<String>());
        }
        poems.push(Poem::new(format!("synth-{i}"), title, lines));
        poem_themes.push(pool.name.clone());
    }

    Ok(SynthData {
        poems,
        poem_themes,
        taxonomy,
        prosody,
        tone_rows,
        pattern_rows,
    })
}

impl SynthData {
    /// Writes corpus.jsonl, taxonomy.json, tones.tsv and patterns.tsv
    /// into `dir`.
    pub fn write_files(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let write = |name: &str, contents: String| -> Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, contents).map_err(|e| Error::io(path.display().to_string(), e))
        };

        let mut corpus = String::new();
        for poem in &self.poems {
            let record = serde_json::json!({
                "id": poem.id,
                "title": poem.title,
                "lines": poem.lines,
            });
            writeln!(corpus, "{record}").expect("string write");
        }
        write("corpus.jsonl", corpus)?;

        let themes: Vec<serde_json::Value> = self
            .taxonomy
            .themes()
            .iter()
            .map(|t| {
                serde_json::json!({
                    "name": t.name,
                    "phrases": t.phrases,
                    "title_ok": t.title_ok,
                })
            })
            .collect();
        write(
            "taxonomy.json",
            serde_json::to_string_pretty(&serde_json::json!({ "themes": themes }))
                .expect("taxonomy json"),
        )?;

        let mut tones = String::new();
        for (c, tone, group) in &self.tone_rows {
            writeln!(tones, "{c}\t{tone}\t{group}").expect("string write");
        }
        write("tones.tsv", tones)?;

        let mut patterns = String::new();
        for (len, idx, pattern) in &self.pattern_rows {
            writeln!(patterns, "{len}\t{idx}\t{pattern}").expect("string write");
        }
        write("patterns.tsv", patterns)
    }
}
