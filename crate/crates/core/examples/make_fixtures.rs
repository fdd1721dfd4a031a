//! Regenerates the small fixture files under `data/fixtures/`.
//!
//! ```text
//! cargo run -p vaxllm-core --example make_fixtures
//! ```

use std::fs::{self, File};
use std::path::Path;

use vaxllm_core::fixtures::{synthetic_corpus, FixtureSpec};
use vaxllm_core::{canonical_key, Taxonomy};

fn main() -> std::io::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/fixtures");
    fs::create_dir_all(&dir)?;
    let t = Taxonomy::vaxconcerns();

    let corpus = synthetic_corpus(&t, FixtureSpec { passages: 20, ..Default::default() });
    corpus.write_jsonl(File::create(dir.join("sample_corpus.jsonl"))?)?;

    // One response that answers every label, so any request parses.
    let answers: Vec<String> = t
        .label_ids()
        .iter()
        .enumerate()
        .map(|(i, id)| format!("\"{}\": \"{}\"", canonical_key(id), if i % 3 == 0 { "Yes" } else { "No" }))
        .collect();
    let entry = serde_json::json!({ "content": format!("{{{}}}", answers.join(", ")) });
    fs::write(dir.join("ok_script.jsonl"), format!("{entry}\n"))?;
    Ok(())
}
