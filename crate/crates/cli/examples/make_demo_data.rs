//! Writes the bundled demo dataset (synthetic corpus, taxonomy and
//! prosody tables) plus a matching config file.
//!
//! Usage: cargo run -p quatrain-cli --example make_demo_data [dir]

use quatrain_core::synth::{generate, SynthSpec};

fn main() {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "data/demo".to_string());
    let spec = SynthSpec {
        n_poems: 120,
        n_themes: 4,
        seven_every: 4,
        seed: 7,
    };
    let data = generate(&spec).expect("synthetic corpus");
    data.write_files(&dir).expect("write demo files");

    let config = format!(
        "# demo pipeline configuration\n\
         corpus = {dir}/corpus.jsonl\n\
         taxonomy = {dir}/taxonomy.json\n\
         tones = {dir}/tones.tsv\n\
         patterns = {dir}/patterns.tsv\n\
         checkpoint_dir = runs/demo\n\
         d = 24\n\
         h = 32\n\
         attn = 24\n\
         min_count = 1\n\
         batch = 32\n\
         lr = 0.003\n\
         dropout = 0.1\n\
         embed_epochs = 4\n\
         lm_epochs = 8\n\
         hie_epochs = 6\n\
         lda_topics = 8\n\
         lda_alpha = 0.5\n\
         lda_iters = 150\n\
         n_val = 8\n\
         n_test = 8\n\
         beam = 10\n\
         target_len = 5\n\
         variant = tile\n"
    );
    std::fs::write(format!("{dir}/quatrain.conf"), config).expect("write config");
    println!("demo data written to {dir}");
}
