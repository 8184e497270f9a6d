//! Rebuilds `fixtures/replay.jsonl` from the fixture corpus, the VQA
//! records and their scripted GCoT replies.
//!
//! cargo run -p forge-cli --example make_replay

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use forge_core::bddx::{parse_corpus, CorpusFormat};
use forge_core::gcot::{build_prompt, PromptTemplate, VqaRecord};
use forge_core::llm::ReplayEntry;
use forge_core::tasks::conversation_prompt;
use serde::Deserialize;

#[derive(Deserialize)]
struct Scripted {
    image_id: String,
    reply: String,
}

/// Records whose first reply is unusable, to exercise the retry path.
const FLAKY: &[&str] = &["vqa_bus_0042"];

fn lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path).with_context(|| path.display().to_string())?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn conversation_reply(action: &str, justification: &str) -> String {
    let action = action.trim().trim_end_matches('.');
    let lower = action.to_lowercase();
    format!(
        "{action} {justification}. Traffic rules require the driver to yield to vehicles and pedestrians with the \
         right of way and to keep a safe following distance. The main risk of this behavior is a sudden change by \
         nearby road users, so the driver should check the mirrors, signal early and keep speed appropriate while \
         the vehicle {}.",
        lower.strip_prefix("the car ").unwrap_or(&lower)
    )
}

fn main() -> Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let template = PromptTemplate::default();
    let mut entries = Vec::new();

    let vqa: Vec<VqaRecord> = lines(&dir.join("vqa.jsonl"))?;
    let scripted: Vec<Scripted> = lines(&dir.join("gcot_replies.jsonl"))?;
    for r in &vqa {
        let s = scripted
            .iter()
            .find(|s| s.image_id == r.image_id)
            .with_context(|| format!("no scripted reply for {}", r.image_id))?;
        let hash = build_prompt(r, &template)?.prompt.hash();
        if FLAKY.contains(&r.image_id.as_str()) {
            entries.push(ReplayEntry {
                prompt_hash: hash.clone(),
                reply: "Sorry, I can only describe the image in general terms.".into(),
            });
        }
        entries.push(ReplayEntry {
            prompt_hash: hash,
            reply: s.reply.clone(),
        });
    }

    let corpus = parse_corpus(BufReader::new(File::open(dir.join("corpus.jsonl"))?), CorpusFormat::Jsonl)?;
    anyhow::ensure!(corpus.rejects.is_empty(), "fixture corpus has rejects: {:?}", corpus.rejects);
    for r in &corpus.records {
        entries.push(ReplayEntry {
            prompt_hash: conversation_prompt(r).hash(),
            reply: conversation_reply(&r.action, &r.justification),
        });
    }

    let path = dir.join("replay.jsonl");
    let mut w = BufWriter::new(File::create(&path)?);
    for e in &entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    println!("wrote {} entries to {}", entries.len(), path.display());
    Ok(())
}
