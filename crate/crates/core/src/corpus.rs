//! Corpus ingestion: poem records, the character vocabulary, the
//! theme→phrases taxonomy, greedy phrase segmentation and data splits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One poem record. `lines` hold whole lines as strings; a record is
/// quatrain-typed when it has exactly 4 lines of equal length 5 or 7.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Poem {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub lines: Vec<String>,
    #[serde(skip)]
    pub is_quatrain: bool,
}

impl Poem {
    pub fn new(id: impl Into<String>, title: impl Into<String>, lines: Vec<String>) -> Self {
        let mut p = Poem {
            id: id.into(),
            title: title.into(),
            lines,
            is_quatrain: false,
        };
        p.is_quatrain = p.derive_quatrain();
        p
    }

    fn derive_quatrain(&self) -> bool {
        if self.lines.len() != 4 {
            return false;
        }
        let lens: Vec<usize> = self.lines.iter().map(|l| l.chars().count()).collect();
        let first = lens[0];
        (first == 5 || first == 7) && lens.iter().all(|&l| l == first)
    }

    pub fn chars(&self) -> impl Iterator<Item = char> + '_ {
        self.lines.iter().flat_map(|l| l.chars())
    }
}

/// Reads a JSONL corpus, one poem object per line. Blank lines are
/// skipped; any malformed line aborts with its line number.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Poem>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut poems = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut poem: Poem = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        if poem.lines.is_empty() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: "poem has no lines".into(),
            });
        }
        poem.is_quatrain = poem.derive_quatrain();
        poems.push(poem);
    }
    Ok(poems)
}

/// Special token ids, fixed and documented: they always occupy the
/// lowest ids in this order.
pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const SEP: usize = 3;
pub const FIVE: usize = 4;
pub const SEVEN: usize = 5;

pub const SPECIAL_NAMES: [&str; 6] = ["<bos>", "<eos>", "<unk>", "<sep>", "<5>", "<7>"];
pub const N_SPECIALS: usize = 6;

/// Character vocabulary. Non-special ids are ordered by descending
/// frequency, then codepoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    char_to_id: HashMap<char, usize>,
    id_to_char: Vec<Option<char>>,
    pub min_count: usize,
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.id_to_char.len()
    }

    pub fn id_of(&self, c: char) -> usize {
        self.char_to_id.get(&c).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, c: char) -> bool {
        self.char_to_id.contains_key(&c)
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        self.id_to_char.get(id).copied().flatten()
    }

    pub fn is_special(id: usize) -> bool {
        id < N_SPECIALS
    }

    /// Kept characters in id order (excluding specials).
    pub fn kept_chars(&self) -> Vec<char> {
        self.id_to_char.iter().skip(N_SPECIALS).filter_map(|c| *c).collect()
    }

    /// Rebuilds a vocabulary from the kept-character list, as stored in
    /// checkpoints.
    pub fn from_kept_chars(chars: &[char], min_count: usize) -> Self {
        let mut id_to_char: Vec<Option<char>> = vec![None; N_SPECIALS];
        let mut char_to_id = HashMap::new();
        for &c in chars {
            char_to_id.insert(c, id_to_char.len());
            id_to_char.push(Some(c));
        }
        Vocabulary {
            char_to_id,
            id_to_char,
            min_count,
        }
    }

    /// Deterministic content hash used for checkpoint compatibility.
    pub fn hash(&self) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update(SPECIAL_NAMES.join("\u{1}").as_bytes());
        for c in self.kept_chars() {
            let mut buf = [0u8; 4];
            hasher.update(c.encode_utf8(&mut buf).as_bytes());
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

/// Builds the vocabulary: characters seen fewer than `min_count` times
/// map to UNK.
pub fn build_vocab(poems: &[Poem], min_count: usize) -> Vocabulary {
    let mut counts: BTreeMap<char, usize> = BTreeMap::new();
    for poem in poems {
        for c in poem.chars() {
            *counts.entry(c).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(char, usize)> = counts
        .into_iter()
        .filter(|&(_, n)| n >= min_count)
        .collect();
    // descending frequency, then codepoint
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Vocabulary::from_kept_chars(&kept.iter().map(|&(c, _)| c).collect::<Vec<_>>(), min_count)
}

/// Per-character encoding; unknown characters become UNK. With markers,
/// BOS is prepended and EOS appended.
pub fn encode_line(vocab: &Vocabulary, line: &str, add_markers: bool) -> Vec<usize> {
    let mut ids = Vec::new();
    if add_markers {
        ids.push(BOS);
    }
    ids.extend(line.chars().map(|c| vocab.id_of(c)));
    if add_markers {
        ids.push(EOS);
    }
    ids
}

/// Inverse of `encode_line` for marker-free sequences; special ids
/// render as their printable names.
pub fn decode_line(vocab: &Vocabulary, ids: &[usize]) -> String {
    ids.iter()
        .map(|&id| match vocab.char_of(id) {
            Some(c) => c.to_string(),
            None => SPECIAL_NAMES.get(id).unwrap_or(&"<?>").to_string(),
        })
        .collect()
}

/// Left-to-right greedy longest match against the dictionary;
/// characters with no match become single-character tokens.
pub fn segment_greedy(dictionary: &BTreeSet<String>, line: &str) -> Vec<String> {
    let chars: Vec<char> = line.chars().collect();
    let max_len = dictionary
        .iter()
        .map(|p| p.chars().count())
        .max()
        .unwrap_or(1);
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let mut matched = None;
        let upper = max_len.min(chars.len() - i);
        for len in (1..=upper).rev() {
            let cand: String = chars[i..i + len].iter().collect();
            if dictionary.contains(&cand) {
                matched = Some((cand, len));
                break;
            }
        }
        match matched {
            Some((tok, len)) => {
                out.push(tok);
                i += len;
            }
            None => {
                out.push(chars[i].to_string());
                i += 1;
            }
        }
    }
    out
}

/// Theme taxonomy: theme name → phrases, each 2–5 characters, with a
/// per-phrase title-eligible flag.
#[derive(Clone, Debug, Default)]
pub struct ThemeTaxonomy {
    themes: Vec<Theme>,
    by_name: HashMap<String, usize>,
    /// warnings emitted while loading (phrase length violations)
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Theme {
    pub name: String,
    pub phrases: Vec<String>,
    pub title_ok: Vec<bool>,
}

#[derive(Deserialize)]
struct TaxonomyFile {
    themes: Vec<ThemeRecord>,
}

#[derive(Deserialize)]
struct ThemeRecord {
    name: String,
    phrases: Vec<String>,
    #[serde(default)]
    title_ok: Option<Vec<bool>>,
}

impl ThemeTaxonomy {
    pub fn from_themes(themes: Vec<(String, Vec<String>, Vec<bool>)>) -> Result<Self> {
        let mut tax = ThemeTaxonomy::default();
        for (name, phrases, title_ok) in themes {
            tax.push_theme(name, phrases, title_ok)?;
        }
        Ok(tax)
    }

    fn push_theme(&mut self, name: String, phrases: Vec<String>, title_ok: Vec<bool>) -> Result<()> {
        if self.by_name.contains_key(&name) {
            return Err(Error::Schema(format!("duplicate theme {name}")));
        }
        let mut kept_phrases = Vec::new();
        let mut kept_flags = Vec::new();
        for (i, phrase) in phrases.into_iter().enumerate() {
            let len = phrase.chars().count();
            if !(2..=5).contains(&len) {
                self.warnings.push(format!(
                    "theme {name}: phrase {phrase:?} has length {len}, expected 2-5; skipped"
                ));
                continue;
            }
            kept_phrases.push(phrase);
            kept_flags.push(title_ok.get(i).copied().unwrap_or(true));
        }
        self.by_name.insert(name.clone(), self.themes.len());
        self.themes.push(Theme {
            name,
            phrases: kept_phrases,
            title_ok: kept_flags,
        });
        Ok(())
    }

    pub fn themes(&self) -> &[Theme] {
        &self.themes
    }

    pub fn theme(&self, name: &str) -> Result<&Theme> {
        self.by_name
            .get(name)
            .map(|&i| &self.themes[i])
            .ok_or_else(|| Error::Lookup(format!("theme {name}")))
    }

    /// All phrases across all themes (the segmentation dictionary).
    pub fn dictionary(&self) -> BTreeSet<String> {
        self.themes
            .iter()
            .flat_map(|t| t.phrases.iter().cloned())
            .collect()
    }

    pub fn n_phrases(&self) -> usize {
        self.themes.iter().map(|t| t.phrases.len()).sum()
    }
}

/// Loads the taxonomy JSON: {"themes": [{"name", "phrases", "title_ok"?}]}.
pub fn load_taxonomy(path: impl AsRef<Path>) -> Result<ThemeTaxonomy> {
    let path = path.as_ref();
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let file: TaxonomyFile =
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    let mut tax = ThemeTaxonomy::default();
    for rec in file.themes {
        let n = rec.phrases.len();
        let flags = rec.title_ok.unwrap_or_else(|| vec![true; n]);
        tax.push_theme(rec.name, rec.phrases, flags)?;
    }
    for w in &tax.warnings {
        log::warn!("{w}");
    }
    Ok(tax)
}

/// Train/validation/test split of the quatrain subset; non-quatrains
/// always go to train.
#[derive(Clone, Debug)]
pub struct CorpusSplit {
    pub train: Vec<Poem>,
    pub validation: Vec<Poem>,
    pub test: Vec<Poem>,
    pub seed: u64,
}

/// Seeded shuffle of the quatrains: first `n_val` to validation, next
/// `n_test` to test, rest (plus non-quatrains) to train.
pub fn split_corpus(poems: &[Poem], n_val: usize, n_test: usize, seed: u64) -> Result<CorpusSplit> {
    let quatrains: Vec<&Poem> = poems.iter().filter(|p| p.is_quatrain).collect();
    let others: Vec<&Poem> = poems.iter().filter(|p| !p.is_quatrain).collect();
    if quatrains.len() < n_val + n_test {
        return Err(Error::Size(format!(
            "need {} quatrains for split, corpus has {}",
            n_val + n_test,
            quatrains.len()
        )));
    }
    let mut order: Vec<usize> = (0..quatrains.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let validation: Vec<Poem> = order[..n_val].iter().map(|&i| quatrains[i].clone()).collect();
    let test: Vec<Poem> = order[n_val..n_val + n_test]
        .iter()
        .map(|&i| quatrains[i].clone())
        .collect();
    let mut train: Vec<Poem> = order[n_val + n_test..]
        .iter()
        .map(|&i| quatrains[i].clone())
        .collect();
    train.extend(others.into_iter().cloned());
    Ok(CorpusSplit {
        train,
        validation,
        test,
        seed,
    })
}
