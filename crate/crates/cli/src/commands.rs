use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use quatrain_core::checkpoint::{self, CheckpointKind};
use quatrain_core::config::PipelineConfig;
use quatrain_core::corpus::{
    build_vocab, load_corpus, load_taxonomy, segment_greedy, split_corpus, CorpusSplit, Poem,
    Vocabulary,
};
use quatrain_core::decode::{generate_poem, PipelineModels};
use quatrain_core::embed::{train_skipgram_nce, SkipGramConfig};
use quatrain_core::error::{Error, Result};
use quatrain_core::hieas2s::{train_hieas2s, HieConfig};
use quatrain_core::lm::{train_bflm as train_bflm_models, LmConfig};
use quatrain_core::numkernel::GRAD_TOLERANCE;
use quatrain_core::prosody::{poem_rhythm, rhythm_score, ProsodyTable};
use quatrain_core::topics::train_lda_gibbs;

pub struct Context {
    pub config_path: PathBuf,
    pub seed_override: Option<u64>,
    pub checkpoint_dir_override: Option<PathBuf>,
}

impl Context {
    fn config(&self) -> Result<PipelineConfig> {
        let mut config = PipelineConfig::load(&self.config_path)?;
        if let Some(dir) = &self.checkpoint_dir_override {
            config.checkpoint_dir = dir.display().to_string();
        }
        Ok(config)
    }

    fn seed(&self, config_seed: u64) -> u64 {
        self.seed_override.unwrap_or(config_seed)
    }
}

fn checkpoint_path(config: &PipelineConfig, kind: CheckpointKind) -> PathBuf {
    Path::new(&config.checkpoint_dir).join(kind.file_name())
}

fn ensure_checkpoint_dir(config: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(&config.checkpoint_dir)
        .map_err(|e| Error::io(config.checkpoint_dir.clone(), e))
}

struct LoadedCorpus {
    vocab: Vocabulary,
    split: CorpusSplit,
}

fn load_split(config: &PipelineConfig) -> Result<LoadedCorpus> {
    let poems = load_corpus(&config.corpus)?;
    let vocab = build_vocab(&poems, config.min_count);
    let split = split_corpus(&poems, config.n_val, config.n_test, config.seed_split)?;
    Ok(LoadedCorpus { vocab, split })
}

fn load_prosody(config: &PipelineConfig) -> Result<ProsodyTable> {
    let mut table = ProsodyTable::new();
    table.load_tones(&config.tones)?;
    table.load_patterns(&config.patterns)?;
    Ok(table)
}

fn require_hash(expected: u64, found: u64, what: &str) -> Result<()> {
    if expected != found {
        return Err(Error::Checkpoint(format!(
            "vocabulary hash mismatch in {what}: corpus {expected:016x}, checkpoint {found:016x}; retrain against the current corpus"
        )));
    }
    Ok(())
}

pub fn train_embed(ctx: &Context) -> Result<ExitCode> {
    let config = ctx.config()?;
    let data = load_split(&config)?;
    ensure_checkpoint_dir(&config)?;
    let sequences: Vec<Vec<usize>> = data
        .split
        .train
        .iter()
        .flat_map(|p| p.lines.iter())
        .map(|line| quatrain_core::corpus::encode_line(&data.vocab, line, false))
        .collect();
    let sg_config = SkipGramConfig {
        dim: config.d,
        window: config.embed_window,
        k_noise: config.embed_k_noise,
        epochs: config.embed_epochs,
        lr: config.embed_lr,
    };
    let seed = ctx.seed(config.seed_embed);
    let run = train_skipgram_nce(&sequences, &data.vocab, &sg_config, seed)?;
    let path = checkpoint_path(&config, CheckpointKind::Embed);
    checkpoint::save_embed(&run.table, &data.vocab, &path)?;
    println!("vocab size: {}", data.vocab.size());
    println!("sequences: {}", sequences.len());
    for (i, loss) in run.epoch_losses.iter().enumerate() {
        println!("epoch {i}: nce loss {loss:.6}");
    }
    println!("saved {}", path.display());
    Ok(ExitCode::SUCCESS)
}

pub fn train_lda(ctx: &Context) -> Result<ExitCode> {
    let config = ctx.config()?;
    let data = load_split(&config)?;
    let taxonomy = load_taxonomy(&config.taxonomy)?;
    ensure_checkpoint_dir(&config)?;
    let dictionary = taxonomy.dictionary();
    let docs: Vec<Vec<String>> = data
        .split
        .train
        .iter()
        .map(|poem| {
            poem.lines
                .iter()
                .flat_map(|line| segment_greedy(&dictionary, line))
                .collect()
        })
        .collect();
    let seed = ctx.seed(config.seed_lda);
    let model = train_lda_gibbs(
        &docs,
        config.lda_topics,
        config.effective_lda_alpha(),
        config.lda_beta,
        config.lda_iters,
        seed,
    )?;
    let path = checkpoint_path(&config, CheckpointKind::Lda);
    checkpoint::save_lda(&model, &data.vocab, &path)?;
    println!("documents: {}", docs.len());
    println!("dictionary size: {}", model.dictionary.len());
    println!("topics: {}", model.k);
    println!("saved {}", path.display());
    Ok(ExitCode::SUCCESS)
}

pub fn train_bflm(ctx: &Context) -> Result<ExitCode> {
    let config = ctx.config()?;
    let data = load_split(&config)?;
    let taxonomy = load_taxonomy(&config.taxonomy)?;
    ensure_checkpoint_dir(&config)?;
    let embed_path = checkpoint_path(&config, CheckpointKind::Embed);
    if !embed_path.exists() {
        return Err(Error::Checkpoint(format!(
            "missing checkpoint {} (run train-embed first)",
            embed_path.display()
        )));
    }
    let (table, _, hash) = checkpoint::load_embed(&embed_path)?;
    require_hash(data.vocab.hash(), hash, "embed checkpoint")?;
    let lm_config = LmConfig {
        d: config.d,
        h: config.h,
        lr: config.lr,
        batch: config.batch,
        epochs: config.lm_epochs,
        clip: config.clip,
        dropout: config.dropout,
        weight_decay: config.weight_decay,
        freeze_embedding: config.freeze_embedding,
    };
    let seed = ctx.seed(config.seed_bflm);
    let run = train_bflm_models(
        &data.split.train,
        &taxonomy,
        &data.vocab,
        &lm_config,
        seed,
        Some(&table),
    )?;
    let path = checkpoint_path(&config, CheckpointKind::Bflm);
    checkpoint::save_bflm(&run.backward, &run.forward, &data.vocab, &path)?;
    for (i, (f, b)) in run
        .fwd_epoch_losses
        .iter()
        .zip(run.bwd_epoch_losses.iter())
        .enumerate()
    {
        println!("epoch {i}: forward loss {f:.6}, backward loss {b:.6}");
    }
    println!("saved {}", path.display());
    Ok(ExitCode::SUCCESS)
}

pub fn train_hie(ctx: &Context) -> Result<ExitCode> {
    let config = ctx.config()?;
    let data = load_split(&config)?;
    ensure_checkpoint_dir(&config)?;
    let embed_path = checkpoint_path(&config, CheckpointKind::Embed);
    if !embed_path.exists() {
        return Err(Error::Checkpoint(format!(
            "missing checkpoint {} (run train-embed first)",
            embed_path.display()
        )));
    }
    let (table, _, hash) = checkpoint::load_embed(&embed_path)?;
    require_hash(data.vocab.hash(), hash, "embed checkpoint")?;
    let hie_config = HieConfig {
        d: config.d,
        h: config.h,
        attn: config.attn,
        lr: config.lr,
        batch: config.batch,
        epochs: config.hie_epochs,
        clip: config.clip,
        dropout: config.dropout,
        weight_decay: config.weight_decay,
        freeze_embedding: config.freeze_embedding,
        variant: config.variant,
    };
    let seed = ctx.seed(config.seed_hie);
    let run = train_hieas2s(&data.split, &data.vocab, &hie_config, seed, Some(&table))?;
    let path = checkpoint_path(&config, CheckpointKind::Hie);
    checkpoint::save_hie(&run.model, &data.vocab, &path)?;
    for (i, loss) in run.train_losses.iter().enumerate() {
        match run.val_losses.get(i) {
            Some(val) => println!("epoch {i}: train loss {loss:.6}, val loss {val:.6}"),
            None => println!("epoch {i}: train loss {loss:.6}"),
        }
    }
    println!("variant: {}", run.model.variant.tag());
    println!("saved {}", path.display());
    Ok(ExitCode::SUCCESS)
}

/// JSONL record for generated poems, also consumed by `evaluate`.
#[derive(Serialize, Deserialize)]
struct GeneratedRecord {
    id: String,
    title: String,
    lines: Vec<String>,
    theme: String,
}

fn load_pipeline(config: &PipelineConfig) -> Result<(PipelineModels, Vocabulary)> {
    let required = [
        CheckpointKind::Bflm,
        CheckpointKind::Hie,
        CheckpointKind::Lda,
    ];
    let missing: Vec<String> = required
        .iter()
        .filter(|kind| !checkpoint_path(config, **kind).exists())
        .map(|kind| format!("{} (run {})", kind.file_name(), kind.train_command()))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "missing checkpoints in {}: {}",
            config.checkpoint_dir,
            missing.join(", ")
        )));
    }
    let (backward, forward, bflm_hash) =
        checkpoint::load_bflm(checkpoint_path(config, CheckpointKind::Bflm))?;
    let (vocab, _) = checkpoint::load_vocab(checkpoint_path(config, CheckpointKind::Bflm))?;
    let (hie, hie_hash) = checkpoint::load_hie(checkpoint_path(config, CheckpointKind::Hie))?;
    let (topics, lda_hash) = checkpoint::load_lda(checkpoint_path(config, CheckpointKind::Lda))?;
    require_hash(bflm_hash, hie_hash, "hie checkpoint")?;
    require_hash(bflm_hash, lda_hash, "lda checkpoint")?;
    Ok((
        PipelineModels {
            backward,
            forward,
            hie,
            topics,
        },
        vocab,
    ))
}

pub fn generate(
    ctx: &Context,
    theme: Option<String>,
    phrase: Option<String>,
    len: Option<usize>,
    beam: Option<usize>,
    out: Option<PathBuf>,
) -> Result<ExitCode> {
    let config = ctx.config()?;
    let taxonomy = load_taxonomy(&config.taxonomy)?;
    let prosody = load_prosody(&config)?;
    let (models, vocab) = load_pipeline(&config)?;
    let seed = ctx.seed(config.seed_generate);
    let target_len = len.unwrap_or(config.target_len);
    let beam = beam.unwrap_or(config.beam);

    let (theme_rec, phrase) = match (theme, phrase) {
        (Some(name), None) => {
            let rec = taxonomy.theme(&name)?;
            if rec.phrases.is_empty() {
                return Err(Error::Selection(format!("theme {name} has no phrases")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let phrase = rec.phrases[rng.gen_range(0..rec.phrases.len())].clone();
            (rec, phrase)
        }
        (None, Some(text)) => {
            let rec = taxonomy
                .themes()
                .iter()
                .find(|t| t.phrases.iter().any(|p| p == &text))
                .ok_or_else(|| {
                    Error::Lookup(format!("phrase {text:?} is not in any taxonomy theme"))
                })?;
            (rec, text)
        }
        _ => {
            return Err(Error::Parameter(
                "pass exactly one of --theme or --phrase".into(),
            ))
        }
    };

    let dictionary = taxonomy.dictionary();
    let outcome = generate_poem(
        &models,
        &vocab,
        theme_rec,
        &dictionary,
        &phrase,
        target_len,
        beam,
        seed,
    )?;

    println!("theme: {}", theme_rec.name);
    println!("phrase: {phrase} (line 1, offset {})", outcome.phrase_offset);
    println!("title: {}", outcome.poem.title);
    for (i, line) in outcome.poem.lines.iter().enumerate() {
        let rhythm = rhythm_score(&prosody, &outcome.poem.lines, i + 1);
        match i {
            0 => println!("{} | {line}  rhythm {rhythm:.2}", i + 1),
            _ => {
                let c = &outcome.chosen[i - 1];
                println!(
                    "{} | {line}  rhythm {rhythm:.2}  score {:.4}  ppl {:.4}  relevance {:.4}  logp {:.4}",
                    i + 1,
                    c.score,
                    c.ppl,
                    c.relevance,
                    c.log_prob
                );
            }
        }
    }
    println!("poem rhythm: {:.4}", poem_rhythm(&prosody, &outcome.poem)?);

    if let Some(out) = out {
        let record = GeneratedRecord {
            id: outcome.poem.id.clone(),
            title: outcome.poem.title.clone(),
            lines: outcome.poem.lines.clone(),
            theme: theme_rec.name.clone(),
        };
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&out)
            .map_err(|e| Error::io(out.display().to_string(), e))?;
        let json = serde_json::to_string(&record)
            .map_err(|e| Error::Evaluation(format!("record serialization: {e}")))?;
        writeln!(file, "{json}").map_err(|e| Error::io(out.display().to_string(), e))?;
        println!("appended to {}", out.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn load_generated(path: &Path) -> Result<Vec<(Poem, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: GeneratedRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        out.push((
            Poem::new(record.id, record.title, record.lines),
            record.theme,
        ));
    }
    Ok(out)
}

pub fn evaluate(
    ctx: &Context,
    generated: &Path,
    negative_control: Option<u64>,
    out: Option<PathBuf>,
) -> Result<ExitCode> {
    let config = ctx.config()?;
    let corpus = load_corpus(&config.corpus)?;
    let taxonomy = load_taxonomy(&config.taxonomy)?;
    let prosody = load_prosody(&config)?;
    let poems = load_generated(generated)?;
    let report = quatrain_core::eval::evaluate_generated(
        &poems,
        &corpus,
        &taxonomy,
        &prosody,
        negative_control,
    )?;
    println!("poems: {} scored, {} skipped", report.n_scored, report.n_skipped);
    println!("mean BLEU-2: {:.6} ({:.3} x100)", report.mean_bleu2, report.mean_bleu2_x100);
    println!("mean RHYTHM: {:.6}", report.mean_rhythm);
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Evaluation(format!("report serialization: {e}")))?;
    match out {
        Some(path) => {
            std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
            println!("report written to {}", path.display());
        }
        None => println!("{json}"),
    }
    Ok(ExitCode::SUCCESS)
}

pub fn grad_check(ctx: &Context, layer: Option<String>) -> Result<ExitCode> {
    let seed = ctx.seed_override.unwrap_or(1);
    let layers: Vec<String> = match layer {
        Some(name) => vec![name],
        None => quatrain_core::grad_check_layers()
            .into_iter()
            .map(|s| s.to_string())
            .collect(),
    };
    let mut all_ok = true;
    for name in &layers {
        let err = quatrain_core::grad_check(name, seed)?;
        let ok = err < GRAD_TOLERANCE;
        all_ok &= ok;
        println!(
            "{name:<18} max rel error {err:.3e}  {}",
            if ok { "PASS" } else { "FAIL" }
        );
    }
    Ok(if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

pub fn prosody_check(ctx: &Context, poems_path: &Path) -> Result<ExitCode> {
    let config = ctx.config()?;
    let prosody = load_prosody(&config)?;
    let poems = load_corpus(poems_path)?;
    for poem in &poems {
        let mean = poem_rhythm(&prosody, poem)?;
        let line_scores: Vec<String> = (1..=poem.lines.len())
            .map(|i| format!("{:.1}", rhythm_score(&prosody, &poem.lines, i)))
            .collect();
        println!("{}: lines [{}] mean {:.4}", poem.id, line_scores.join(", "), mean);
    }
    Ok(ExitCode::SUCCESS)
}
