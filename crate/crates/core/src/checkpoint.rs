//! Versioned binary checkpoints. Layout (all little-endian):
//! magic "QFRG", version u32, kind u8, vocab hash u64, a JSON metadata
//! blob (u32 length + UTF-8 bytes), then an array directory: count
//! u32, and per array a name (u32 length + UTF-8), rows u64, cols u64,
//! row-major f64 data.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde_json::json;

use crate::corpus::Vocabulary;
use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::hieas2s::{HieDims, HieModel, MemoryVariant};
use crate::lm::{Direction, LanguageModel};
use crate::numkernel::{Matrix, ParamStore};
use crate::topics::TopicModel;

pub const MAGIC: &[u8; 4] = b"QFRG";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Embed,
    Lda,
    Bflm,
    Hie,
}

impl CheckpointKind {
    fn to_u8(self) -> u8 {
        match self {
            CheckpointKind::Embed => 0,
            CheckpointKind::Lda => 1,
            CheckpointKind::Bflm => 2,
            CheckpointKind::Hie => 3,
        }
    }

    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(CheckpointKind::Embed),
            1 => Ok(CheckpointKind::Lda),
            2 => Ok(CheckpointKind::Bflm),
            3 => Ok(CheckpointKind::Hie),
            other => Err(Error::Checkpoint(format!("unknown kind byte {other}"))),
        }
    }

    pub fn file_name(&self) -> &'static str {
        match self {
            CheckpointKind::Embed => "embed.qfrg",
            CheckpointKind::Lda => "lda.qfrg",
            CheckpointKind::Bflm => "bflm.qfrg",
            CheckpointKind::Hie => "hie.qfrg",
        }
    }

    pub fn train_command(&self) -> &'static str {
        match self {
            CheckpointKind::Embed => "train-embed",
            CheckpointKind::Lda => "train-lda",
            CheckpointKind::Bflm => "train-bflm",
            CheckpointKind::Hie => "train-hie",
        }
    }
}

#[derive(Debug)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub vocab_hash: u64,
    pub meta: serde_json::Value,
    pub arrays: BTreeMap<String, Matrix>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
        w.write_all(MAGIC).map_err(io_err)?;
        w.write_u32::<LittleEndian>(VERSION).map_err(io_err)?;
        w.write_u8(self.kind.to_u8()).map_err(io_err)?;
        w.write_u64::<LittleEndian>(self.vocab_hash).map_err(io_err)?;
        let meta = serde_json::to_string(&self.meta)
            .map_err(|e| Error::Checkpoint(format!("meta serialization: {e}")))?;
        w.write_u32::<LittleEndian>(meta.len() as u32).map_err(io_err)?;
        w.write_all(meta.as_bytes()).map_err(io_err)?;
        w.write_u32::<LittleEndian>(self.arrays.len() as u32)
            .map_err(io_err)?;
        for (name, m) in &self.arrays {
            w.write_u32::<LittleEndian>(name.len() as u32).map_err(io_err)?;
            w.write_all(name.as_bytes()).map_err(io_err)?;
            w.write_u64::<LittleEndian>(m.rows() as u64).map_err(io_err)?;
            w.write_u64::<LittleEndian>(m.cols() as u64).map_err(io_err)?;
            for &v in m.data() {
                w.write_f64::<LittleEndian>(v).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = BufReader::new(file);
        let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: bad magic {magic:?}",
                path.display()
            )));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io_err)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: format version {version}, expected {VERSION}",
                path.display()
            )));
        }
        let kind = CheckpointKind::from_u8(r.read_u8().map_err(io_err)?)?;
        let vocab_hash = r.read_u64::<LittleEndian>().map_err(io_err)?;
        let meta_len = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        let mut meta_buf = vec![0u8; meta_len];
        r.read_exact(&mut meta_buf).map_err(io_err)?;
        let meta: serde_json::Value = serde_json::from_slice(&meta_buf)
            .map_err(|e| Error::Checkpoint(format!("{}: meta: {e}", path.display())))?;

        let count = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf).map_err(io_err)?;
            let name = String::from_utf8(name_buf)
                .map_err(|e| Error::Checkpoint(format!("{}: array name: {e}", path.display())))?;
            let rows = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
            let cols = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
            let mut data = vec![0.0; rows * cols];
            for v in data.iter_mut() {
                *v = r.read_f64::<LittleEndian>().map_err(io_err)?;
            }
            arrays.insert(name, Matrix::from_vec(rows, cols, data)?);
        }
        Ok(Checkpoint {
            kind,
            vocab_hash,
            meta,
            arrays,
        })
    }
}

fn meta_usize(meta: &serde_json::Value, key: &str) -> Result<usize> {
    meta.get(key)
        .and_then(|v| v.as_u64())
        .map(|v| v as usize)
        .ok_or_else(|| Error::Checkpoint(format!("meta field {key} missing or not an integer")))
}

fn meta_f64(meta: &serde_json::Value, key: &str) -> Result<f64> {
    meta.get(key)
        .and_then(|v| v.as_f64())
        .ok_or_else(|| Error::Checkpoint(format!("meta field {key} missing or not a number")))
}

fn meta_str<'a>(meta: &'a serde_json::Value, key: &str) -> Result<&'a str> {
    meta.get(key)
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Checkpoint(format!("meta field {key} missing or not a string")))
}

fn vocab_meta(vocab: &Vocabulary) -> serde_json::Value {
    json!({
        "kept_chars": vocab.kept_chars().iter().collect::<String>(),
        "min_count": vocab.min_count,
    })
}

fn vocab_from_meta(meta: &serde_json::Value) -> Result<Vocabulary> {
    let chars: Vec<char> = meta_str(meta, "kept_chars")?.chars().collect();
    let min_count = meta_usize(meta, "min_count")?;
    Ok(Vocabulary::from_kept_chars(&chars, min_count))
}

pub fn save_embed(table: &EmbeddingTable, vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
    let mut meta = vocab_meta(vocab);
    meta["dim"] = json!(table.dim);
    let mut arrays = BTreeMap::new();
    arrays.insert("embedding".to_string(), table.matrix.clone());
    Checkpoint {
        kind: CheckpointKind::Embed,
        vocab_hash: vocab.hash(),
        meta,
        arrays,
    }
    .save(path)
}

pub fn load_embed(path: impl AsRef<Path>) -> Result<(EmbeddingTable, Vocabulary, u64)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != CheckpointKind::Embed {
        return Err(Error::Checkpoint(format!(
            "expected an embed checkpoint, found {:?}",
            ckpt.kind
        )));
    }
    let vocab = vocab_from_meta(&ckpt.meta)?;
    let dim = meta_usize(&ckpt.meta, "dim")?;
    let matrix = ckpt
        .arrays
        .get("embedding")
        .ok_or_else(|| Error::Checkpoint("embed checkpoint lacks the embedding array".into()))?
        .clone();
    Ok((EmbeddingTable { dim, matrix }, vocab, ckpt.vocab_hash))
}

pub fn save_lda(model: &TopicModel, vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
    let mut meta = vocab_meta(vocab);
    meta["k"] = json!(model.k);
    meta["alpha"] = json!(model.alpha);
    meta["beta"] = json!(model.beta);
    meta["dictionary"] = json!(model.dictionary);
    let mut arrays = BTreeMap::new();
    arrays.insert("phrase_topic".to_string(), model.phrase_topic.clone());
    arrays.insert(
        "topic_totals".to_string(),
        Matrix::from_vec(model.topic_totals.len(), 1, model.topic_totals.clone())?,
    );
    Checkpoint {
        kind: CheckpointKind::Lda,
        vocab_hash: vocab.hash(),
        meta,
        arrays,
    }
    .save(path)
}

pub fn load_lda(path: impl AsRef<Path>) -> Result<(TopicModel, u64)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != CheckpointKind::Lda {
        return Err(Error::Checkpoint(format!(
            "expected an lda checkpoint, found {:?}",
            ckpt.kind
        )));
    }
    let dictionary: Vec<String> = ckpt
        .meta
        .get("dictionary")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| Error::Checkpoint("lda checkpoint lacks the dictionary".into()))?;
    let phrase_topic = ckpt
        .arrays
        .get("phrase_topic")
        .ok_or_else(|| Error::Checkpoint("lda checkpoint lacks phrase_topic".into()))?
        .clone();
    let topic_totals = ckpt
        .arrays
        .get("topic_totals")
        .ok_or_else(|| Error::Checkpoint("lda checkpoint lacks topic_totals".into()))?
        .data()
        .to_vec();
    let model = TopicModel::from_parts(
        meta_usize(&ckpt.meta, "k")?,
        dictionary,
        phrase_topic,
        topic_totals,
        meta_f64(&ckpt.meta, "alpha")?,
        meta_f64(&ckpt.meta, "beta")?,
    )?;
    Ok((model, ckpt.vocab_hash))
}

fn params_to_arrays(prefix: &str, params: &ParamStore, arrays: &mut BTreeMap<String, Matrix>) {
    for (name, m) in params.iter() {
        arrays.insert(format!("{prefix}{name}"), m.clone());
    }
}

fn params_from_arrays(
    prefix: &str,
    arrays: &BTreeMap<String, Matrix>,
) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, m) in arrays {
        if let Some(stripped) = name.strip_prefix(prefix) {
            store.insert(stripped, m.clone());
        }
    }
    if store.is_empty() {
        return Err(Error::Checkpoint(format!(
            "no arrays with prefix {prefix:?}"
        )));
    }
    Ok(store)
}

pub fn save_bflm(
    backward: &LanguageModel,
    forward: &LanguageModel,
    vocab: &Vocabulary,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut meta = vocab_meta(vocab);
    meta["d"] = json!(forward.d);
    meta["h"] = json!(forward.h);
    meta["bwd_direction"] = json!(backward.direction.tag());
    meta["fwd_direction"] = json!(forward.direction.tag());
    let mut arrays = BTreeMap::new();
    params_to_arrays("bwd.", &backward.params, &mut arrays);
    params_to_arrays("fwd.", &forward.params, &mut arrays);
    Checkpoint {
        kind: CheckpointKind::Bflm,
        vocab_hash: vocab.hash(),
        meta,
        arrays,
    }
    .save(path)
}

pub fn load_bflm(path: impl AsRef<Path>) -> Result<(LanguageModel, LanguageModel, u64)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != CheckpointKind::Bflm {
        return Err(Error::Checkpoint(format!(
            "expected a bflm checkpoint, found {:?}",
            ckpt.kind
        )));
    }
    let d = meta_usize(&ckpt.meta, "d")?;
    let h = meta_usize(&ckpt.meta, "h")?;
    let vocab = vocab_from_meta(&ckpt.meta)?;
    let build = |prefix: &str, dir_key: &str| -> Result<LanguageModel> {
        let params = params_from_arrays(prefix, &ckpt.arrays)?;
        Ok(LanguageModel {
            direction: Direction::from_tag(meta_str(&ckpt.meta, dir_key)?)?,
            params,
            d,
            h,
            vocab_size: vocab.size(),
        })
    };
    Ok((
        build("bwd.", "bwd_direction")?,
        build("fwd.", "fwd_direction")?,
        ckpt.vocab_hash,
    ))
}

pub fn save_hie(model: &HieModel, vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
    let mut meta = vocab_meta(vocab);
    meta["d"] = json!(model.dims.d);
    meta["h"] = json!(model.dims.h);
    meta["attn"] = json!(model.dims.attn);
    meta["variant"] = json!(model.variant.tag());
    let mut arrays = BTreeMap::new();
    params_to_arrays("", &model.params, &mut arrays);
    Checkpoint {
        kind: CheckpointKind::Hie,
        vocab_hash: vocab.hash(),
        meta,
        arrays,
    }
    .save(path)
}

pub fn load_hie(path: impl AsRef<Path>) -> Result<(HieModel, u64)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != CheckpointKind::Hie {
        return Err(Error::Checkpoint(format!(
            "expected a hie checkpoint, found {:?}",
            ckpt.kind
        )));
    }
    let vocab = vocab_from_meta(&ckpt.meta)?;
    let params = params_from_arrays("", &ckpt.arrays)?;
    let model = HieModel {
        params,
        dims: HieDims {
            vocab: vocab.size(),
            d: meta_usize(&ckpt.meta, "d")?,
            h: meta_usize(&ckpt.meta, "h")?,
            attn: meta_usize(&ckpt.meta, "attn")?,
        },
        variant: MemoryVariant::from_tag(meta_str(&ckpt.meta, "variant")?)?,
    };
    Ok((model, ckpt.vocab_hash))
}

/// Reads the vocabulary stored in any checkpoint.
pub fn load_vocab(path: impl AsRef<Path>) -> Result<(Vocabulary, u64)> {
    let ckpt = Checkpoint::load(path)?;
    let vocab = vocab_from_meta(&ckpt.meta)?;
    Ok((vocab, ckpt.vocab_hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, Poem};
    use crate::topics::train_lda_gibbs;

    fn vocab() -> Vocabulary {
        build_vocab(&[Poem::new("p", "", vec!["abcde".into()])], 1)
    }

    #[test]
    fn embed_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embed.qfrg");
        let vocab = vocab();
        let table = EmbeddingTable {
            dim: 3,
            matrix: Matrix::from_fn(vocab.size(), 3, |i, j| (i * 7 + j) as f64 * 0.125 - 1.0),
        };
        save_embed(&table, &vocab, &path).unwrap();
        let (loaded, loaded_vocab, hash) = load_embed(&path).unwrap();
        assert_eq!(loaded.matrix.data(), table.matrix.data());
        assert_eq!(loaded_vocab, vocab);
        assert_eq!(hash, vocab.hash());

        // byte-identical on re-save
        save_embed(&loaded, &loaded_vocab, dir.path().join("embed2.qfrg")).unwrap();
        let a = std::fs::read(&path).unwrap();
        let b = std::fs::read(dir.path().join("embed2.qfrg")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lda_round_trip_preserves_vectors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lda.qfrg");
        let docs: Vec<Vec<String>> = vec![
            vec!["ab".into(), "cd".into()],
            vec!["cd".into(), "ab".into(), "e".into()],
        ];
        let model = train_lda_gibbs(&docs, 3, 0.5, 0.02, 20, 1).unwrap();
        let vocab = vocab();
        save_lda(&model, &vocab, &path).unwrap();
        let (loaded, _) = load_lda(&path).unwrap();
        assert_eq!(loaded.dictionary, model.dictionary);
        for phrase in &model.dictionary {
            assert_eq!(
                loaded.topic_vector(phrase).values,
                model.topic_vector(phrase).values
            );
        }
    }

    #[test]
    fn kind_and_magic_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.qfrg");
        let vocab = vocab();
        let table = EmbeddingTable {
            dim: 2,
            matrix: Matrix::zeros(vocab.size(), 2),
        };
        save_embed(&table, &vocab, &path).unwrap();
        assert!(matches!(load_lda(&path), Err(Error::Checkpoint(_))));

        std::fs::write(&path, b"NOPEnope").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }
}
