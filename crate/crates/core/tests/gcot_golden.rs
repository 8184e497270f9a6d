use std::collections::BTreeSet;
use std::path::PathBuf;

use forge_core::gcot::{
    build_prompt, finalize_response, parse_gcot_reply, resolve_spatial_relation, Generator, PromptTemplate, RetryPolicy,
    SpatialRelation, VqaRecord,
};
use forge_core::llm::{AuditLog, ReplayClient, ReplayEntry, ResponseCache};
use serde::Deserialize;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn records() -> Vec<VqaRecord> {
    std::fs::read_to_string(fixtures().join("vqa.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[derive(Deserialize)]
struct Golden {
    image_id: String,
    reply: String,
    text: String,
}

fn goldens() -> Vec<Golden> {
    std::fs::read_to_string(fixtures().join("golden/responses.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn golden_user(id: &str) -> String {
    let text = std::fs::read_to_string(fixtures().join(format!("golden/{id}.user.txt"))).unwrap();
    text.strip_suffix('\n').unwrap_or(&text).to_owned()
}

#[test]
fn prompts_match_hand_rendered_goldens() {
    let template = PromptTemplate::default();
    let file = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("templates/gcot_prompt.txt")).unwrap();
    let system = file.split("\n----\n").next().unwrap();
    for r in records() {
        let p = build_prompt(&r, &template).unwrap().prompt;
        assert_eq!(p.system, system, "{}", r.image_id);
        assert_eq!(p.user, golden_user(&r.image_id), "{}", r.image_id);
    }
}

#[test]
fn system_message_carries_the_three_steps_and_box_note() {
    let sys = PromptTemplate::default().system().to_owned();
    for needle in [
        "Give you some captions",
        "\n1. Create a short sentence to describe the image by using captions.",
        "\n2. Find the question object contained in the question.",
        "\n3. If the answer to the question requires reasoning",
        "If x2 > a2, it means that object A is to the right of object B",
        "If y2 > b2, it means that object A is on top of object B",
    ] {
        assert!(sys.contains(needle), "{needle:?}");
    }
}

#[test]
fn warnings_for_degenerate_inputs() {
    let template = PromptTemplate::default();
    let rs = records();
    let surf = build_prompt(&rs[0], &template).unwrap();
    assert!(surf.prompt.user.contains("Reference Answer: 1926"));
    assert_eq!(surf.warnings.len(), 2, "{:?}", surf.warnings);
    let bus = build_prompt(&rs[1], &template).unwrap();
    assert!(bus.warnings.is_empty());
    let bare = build_prompt(&rs[2], &template).unwrap();
    assert!(bare.warnings.iter().any(|w| w.contains("no objects")));
}

#[test]
fn finalized_text_matches_goldens() {
    for g in goldens() {
        let r = records().into_iter().find(|r| r.image_id == g.image_id).unwrap();
        let parsed = parse_gcot_reply(&g.reply).unwrap();
        assert_eq!(finalize_response(&parsed, &r.answer), g.text, "{}", g.image_id);
    }
}

#[test]
fn replay_generation_reproduces_goldens() {
    let template = PromptTemplate::default();
    let rs = records();
    let entries: Vec<ReplayEntry> = goldens()
        .iter()
        .map(|g| {
            let r = rs.iter().find(|r| r.image_id == g.image_id).unwrap();
            ReplayEntry {
                prompt_hash: build_prompt(r, &template).unwrap().prompt.hash(),
                reply: g.reply.clone(),
            }
        })
        .collect();
    let client = ReplayClient::new("gpt-3.5-turbo", entries);
    let audit = AuditLog::new();
    let cache = ResponseCache::new();
    let generator = Generator {
        template: &template,
        cache: Some(&cache),
        audit: &audit,
    };
    let out = generator.generate_all(&rs, &client, RetryPolicy::default(), 3);
    assert_eq!(client.calls(), 3);
    assert_eq!(audit.len(), 3);
    for (g, res) in goldens().iter().zip(out) {
        let resp = res.unwrap();
        assert_eq!(resp.text(), g.text);
    }

    let surf = generator.generate(&rs[0], &client, RetryPolicy::default()).unwrap();
    assert_eq!(client.calls(), 3, "second run is served from the cache");
    assert_eq!(surf.final_sentence, "So the answer is 1926.");
}

#[test]
fn surfboard_relations() {
    let rs = records();
    let bbox = |label: &str| rs[0].objects.iter().find(|o| o.label == label).unwrap().bbox;
    assert_eq!(
        resolve_spatial_relation(&bbox("person"), &bbox("surfboard")),
        BTreeSet::from([SpatialRelation::LeftOf, SpatialRelation::OnTopOf])
    );
    assert_eq!(
        resolve_spatial_relation(&bbox("surfboard"), &bbox("person")),
        BTreeSet::from([SpatialRelation::RightOf, SpatialRelation::Below])
    );
}
