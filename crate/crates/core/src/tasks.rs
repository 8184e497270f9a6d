//! The four driving instruction tasks built from annotation records.
//!
//! Understanding and reasoning triplets copy the action / justification
//! label verbatim under an instruction sampled from the task's pool. Signal
//! prediction renders the control history and asks for the next second.
//! Detailed conversations come from an LLM asked to enrich both labels.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bddx::{AnnotationRecord, ControlSample};
use crate::llm::{ChatPrompt, LlmClient, LlmError, ResponseCache, StoreError};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("instruction pool for {0} is empty")]
    EmptyPool(TaskKind),
    #[error("duplicate instruction in {task} pool: {text:?}")]
    DuplicateTemplate { task: TaskKind, text: String },
    #[error("signal prediction needs at least 2 samples, found {0}")]
    InsufficientSignals(usize),
    #[error("empty answer for {0}")]
    EmptyAnswer(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    BehaviorUnderstanding,
    BehaviorReasoning,
    SignalPrediction,
    DetailedConversation,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::BehaviorUnderstanding,
        TaskKind::BehaviorReasoning,
        TaskKind::SignalPrediction,
        TaskKind::DetailedConversation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::BehaviorUnderstanding => "behavior_understanding",
            TaskKind::BehaviorReasoning => "behavior_reasoning",
            TaskKind::SignalPrediction => "signal_prediction",
            TaskKind::DetailedConversation => "detailed_conversation",
        }
    }

    fn id_suffix(self) -> &'static str {
        match self {
            TaskKind::BehaviorUnderstanding => "und",
            TaskKind::BehaviorReasoning => "rsn",
            TaskKind::SignalPrediction => "sig",
            TaskKind::DetailedConversation => "conv",
        }
    }

    pub fn triplet_id(self, segment_id: &str) -> String {
        format!("{segment_id}#{}", self.id_suffix())
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown task {s:?}"))
    }
}

/// One (video, instruction, answer) training example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionTriplet {
    pub id: String,
    #[serde(rename = "video")]
    pub video_ref: String,
    pub task: TaskKind,
    pub instruction: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionTemplatePool {
    task: TaskKind,
    templates: Vec<String>,
}

impl InstructionTemplatePool {
    pub fn new(task: TaskKind, templates: Vec<String>) -> Result<Self, TaskError> {
        let mut seen = HashSet::new();
        for t in &templates {
            if !seen.insert(t.as_str()) {
                return Err(TaskError::DuplicateTemplate { task, text: t.clone() });
            }
        }
        Ok(Self { task, templates })
    }

    /// One instruction per line; blank lines and `#` comments are skipped.
    pub fn parse(task: TaskKind, text: &str) -> Result<Self, TaskError> {
        let templates = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_owned)
            .collect();
        Self::new(task, templates)
    }

    pub fn load(task: TaskKind, path: &Path) -> Result<Self, TaskError> {
        let text = std::fs::read_to_string(path).map_err(|source| TaskError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(task, &text)
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn contains(&self, instruction: &str) -> bool {
        self.templates.iter().any(|t| t == instruction)
    }

    /// Deterministic pick for (seed, key).
    pub fn sample(&self, seed: u64, key: &str) -> Result<&str, TaskError> {
        if self.templates.is_empty() {
            return Err(TaskError::EmptyPool(self.task));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[self.task.as_str(), key]));
        Ok(&self.templates[rng.random_range(0..self.templates.len())])
    }
}

/// Instruction pools for the pool-driven tasks.
#[derive(Debug, Clone)]
pub struct TaskPools {
    pub understanding: InstructionTemplatePool,
    pub reasoning: InstructionTemplatePool,
    pub conversation: InstructionTemplatePool,
}

impl Default for TaskPools {
    fn default() -> Self {
        let pool = |task, text| InstructionTemplatePool::parse(task, text).expect("bundled pool");
        Self {
            understanding: pool(TaskKind::BehaviorUnderstanding, include_str!("../templates/understanding.txt")),
            reasoning: pool(TaskKind::BehaviorReasoning, include_str!("../templates/reasoning.txt")),
            conversation: pool(TaskKind::DetailedConversation, include_str!("../templates/conversation.txt")),
        }
    }
}

impl TaskPools {
    /// Reads `understanding.txt`, `reasoning.txt` and `conversation.txt`.
    pub fn load_dir(dir: &Path) -> Result<Self, TaskError> {
        Ok(Self {
            understanding: InstructionTemplatePool::load(TaskKind::BehaviorUnderstanding, &dir.join("understanding.txt"))?,
            reasoning: InstructionTemplatePool::load(TaskKind::BehaviorReasoning, &dir.join("reasoning.txt"))?,
            conversation: InstructionTemplatePool::load(TaskKind::DetailedConversation, &dir.join("conversation.txt"))?,
        })
    }
}

fn label_triplet(
    r: &AnnotationRecord,
    pool: &InstructionTemplatePool,
    seed: u64,
    answer: &str,
) -> Result<InstructionTriplet, TaskError> {
    let instruction = pool.sample(seed, &r.segment_id)?;
    if answer.trim().is_empty() {
        return Err(TaskError::EmptyAnswer(r.segment_id.clone()));
    }
    Ok(InstructionTriplet {
        id: pool.task().triplet_id(&r.segment_id),
        video_ref: r.video_ref.clone(),
        task: pool.task(),
        instruction: instruction.to_owned(),
        answer: answer.to_owned(),
    })
}

pub fn build_behavior_understanding(
    r: &AnnotationRecord,
    pool: &InstructionTemplatePool,
    seed: u64,
) -> Result<InstructionTriplet, TaskError> {
    label_triplet(r, pool, seed, &r.action)
}

pub fn build_behavior_reasoning(
    r: &AnnotationRecord,
    pool: &InstructionTemplatePool,
    seed: u64,
) -> Result<InstructionTriplet, TaskError> {
    label_triplet(r, pool, seed, &r.justification)
}

fn history_line(s: &ControlSample) -> String {
    format!(
        "t={}: speed={:.2}, accel={:.2}, angle={:.2}",
        s.t, s.speed, s.accelerator, s.turn_angle
    )
}

/// `speed=…, angle=…` at two decimals.
pub fn render_signal_answer(s: &ControlSample) -> String {
    format!("speed={:.2}, angle={:.2}", s.speed, s.turn_angle)
}

/// Inverse of [`render_signal_answer`].
pub fn parse_signal_answer(text: &str) -> Option<(f64, f64)> {
    let (speed, angle) = text.split_once(", ")?;
    let speed = speed.strip_prefix("speed=")?.parse().ok()?;
    let angle = angle.strip_prefix("angle=")?.parse().ok()?;
    Some((speed, angle))
}

/// History = every sample but the last; target = the last sample.
pub fn build_signal_prediction(r: &AnnotationRecord) -> Result<InstructionTriplet, TaskError> {
    let samples = &r.signals.samples;
    let Some((target, history)) = samples.split_last().filter(|(_, h)| !h.is_empty()) else {
        return Err(TaskError::InsufficientSignals(samples.len()));
    };
    let mut instruction = format!(
        "The ego car's control signals over the past {} seconds are:\n",
        history.len()
    );
    for s in history {
        instruction.push_str(&history_line(s));
        instruction.push('\n');
    }
    instruction.push_str("Predict the speed and turn angle of the ego car for the next second.");
    Ok(InstructionTriplet {
        id: TaskKind::SignalPrediction.triplet_id(&r.segment_id),
        video_ref: r.video_ref.clone(),
        task: TaskKind::SignalPrediction,
        instruction,
        answer: render_signal_answer(target),
    })
}

const CONVERSATION_SYSTEM: &str = "You are an experienced driving instructor. You will receive a short description of what the ego car in a driving video is doing and why. Rewrite it as a detailed, helpful answer for a learner driver. Cover the traffic rules that apply, the potential risks of the behavior, and the driving precautions it calls for. Do not invent details about the scene beyond what is given.";

pub fn conversation_prompt(r: &AnnotationRecord) -> ChatPrompt {
    ChatPrompt::new(
        CONVERSATION_SYSTEM,
        format!(
            "Action: {}\nJustification: {}\n\nWrite the detailed answer, covering traffic rules, potential risks of the behavior, and driving precautions.",
            r.action.trim(),
            r.justification.trim()
        ),
    )
}

/// LLM-backed builder for detailed-conversation triplets.
pub struct ConversationBuilder<'a> {
    pub pool: &'a InstructionTemplatePool,
    pub client: &'a dyn LlmClient,
    pub cache: Option<&'a ResponseCache>,
}

impl ConversationBuilder<'_> {
    pub fn build(&self, r: &AnnotationRecord, seed: u64) -> Result<InstructionTriplet, TaskError> {
        let instruction = self.pool.sample(seed, &r.segment_id)?.to_owned();
        let prompt = conversation_prompt(r);
        let hash = prompt.hash();
        let reply = match self.cache.and_then(|c| c.get(&hash, self.client.model())) {
            Some(hit) => hit,
            None => {
                let reply = self.client.complete(&prompt)?.trim().to_owned();
                if reply.is_empty() {
                    return Err(TaskError::EmptyAnswer(r.segment_id.clone()));
                }
                if let Some(cache) = self.cache {
                    cache.insert(&hash, self.client.model(), reply.clone());
                }
                reply
            }
        };
        Ok(InstructionTriplet {
            id: TaskKind::DetailedConversation.triplet_id(&r.segment_id),
            video_ref: r.video_ref.clone(),
            task: TaskKind::DetailedConversation,
            instruction,
            answer: reply,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFailure {
    pub segment_id: String,
    pub task: TaskKind,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStats {
    pub per_task: BTreeMap<TaskKind, usize>,
    pub total: usize,
}

impl TaskStats {
    pub fn tally(triplets: &[InstructionTriplet]) -> Self {
        let mut per_task: BTreeMap<TaskKind, usize> = TaskKind::ALL.iter().map(|&k| (k, 0)).collect();
        for t in triplets {
            *per_task.entry(t.task).or_default() += 1;
        }
        Self {
            per_task,
            total: triplets.len(),
        }
    }

    pub fn count(&self, task: TaskKind) -> usize {
        self.per_task.get(&task).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TaskCorpus {
    pub triplets: Vec<InstructionTriplet>,
    pub stats: TaskStats,
    pub failures: Vec<TaskFailure>,
}

#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    /// Fraction of records that also get a detailed-conversation triplet.
    pub conversation_ratio: f64,
    pub seed: u64,
    pub max_concurrency: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            conversation_ratio: 1.0,
            seed: 0,
            max_concurrency: 4,
        }
    }
}

/// Picks exactly `round(ratio * n)` records for conversation triplets,
/// ranked by a per-record seeded key so the choice ignores input order.
pub fn select_conversation_records(records: &[AnnotationRecord], ratio: f64, seed: u64) -> HashSet<String> {
    let take = ((records.len() as f64) * ratio.clamp(0.0, 1.0)).round() as usize;
    let mut keyed: Vec<(u64, &str)> = records
        .iter()
        .map(|r| (derive_seed(seed, &["conversation", &r.segment_id]), r.segment_id.as_str()))
        .collect();
    keyed.sort_unstable();
    keyed.into_iter().take(take).map(|(_, id)| id.to_owned()).collect()
}

/// Builds every task for every record. Per-record errors go to
/// `failures`; triplets keep record order, then task order.
pub fn build_all(
    records: &[AnnotationRecord],
    pools: &TaskPools,
    client: Option<&dyn LlmClient>,
    cache: Option<&ResponseCache>,
    opts: BuildOptions,
) -> TaskCorpus {
    let chosen = select_conversation_records(records, opts.conversation_ratio, opts.seed);

    let run = || -> Vec<Vec<Result<InstructionTriplet, TaskFailure>>> {
        records
            .par_iter()
            .map(|r| {
                let fail = |task: TaskKind| {
                    move |e: TaskError| TaskFailure {
                        segment_id: r.segment_id.clone(),
                        task,
                        error: e.to_string(),
                    }
                };
                let mut out = vec![
                    build_behavior_understanding(r, &pools.understanding, opts.seed)
                        .map_err(fail(TaskKind::BehaviorUnderstanding)),
                    build_behavior_reasoning(r, &pools.reasoning, opts.seed).map_err(fail(TaskKind::BehaviorReasoning)),
                    build_signal_prediction(r).map_err(fail(TaskKind::SignalPrediction)),
                ];
                if chosen.contains(&r.segment_id) {
                    let conv = match client {
                        Some(client) => ConversationBuilder {
                            pool: &pools.conversation,
                            client,
                            cache,
                        }
                        .build(r, opts.seed),
                        None => Err(TaskError::Llm(LlmError::Unavailable("no client configured".into()))),
                    };
                    out.push(conv.map_err(fail(TaskKind::DetailedConversation)));
                }
                out
            })
            .collect()
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.max_concurrency.max(1))
        .build()
        .expect("thread pool");
    let results = pool.install(run);

    let mut corpus = TaskCorpus::default();
    for result in results.into_iter().flatten() {
        match result {
            Ok(t) => corpus.triplets.push(t),
            Err(f) => corpus.failures.push(f),
        }
    }
    corpus.stats = TaskStats::tally(&corpus.triplets);
    corpus
}

pub fn write_triplets<W: Write>(triplets: &[InstructionTriplet], mut w: W) -> Result<(), StoreError> {
    for t in triplets {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_triplets<R: BufRead>(r: R) -> Result<Vec<InstructionTriplet>, StoreError> {
    crate::llm::read_jsonl(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bddx::ControlSignalSeries;
    use crate::llm::{ReplayClient, ReplayEntry};

    fn record(id: &str, n: usize) -> AnnotationRecord {
        AnnotationRecord {
            segment_id: id.into(),
            video_ref: format!("videos/{id}.mov"),
            start_time: 0.0,
            end_time: n as f64,
            action: "the car stops".into(),
            justification: "because the traffic light is red".into(),
            signals: ControlSignalSeries::new(
                (0..n)
                    .map(|i| ControlSample {
                        t: i as f64,
                        speed: 10.0 - 2.5 * i as f64,
                        accelerator: 0.0,
                        turn_angle: 0.125 * i as f64,
                    })
                    .collect(),
            ),
        }
    }

    #[test]
    fn understanding_copies_action() {
        let pools = TaskPools::default();
        let t = build_behavior_understanding(&record("s1", 4), &pools.understanding, 3).unwrap();
        assert_eq!(t.answer, "the car stops");
        assert_eq!(t.task, TaskKind::BehaviorUnderstanding);
        assert!(pools.understanding.contains(&t.instruction));
        assert_eq!(t, build_behavior_understanding(&record("s1", 4), &pools.understanding, 3).unwrap());
    }

    #[test]
    fn reasoning_copies_justification() {
        let pools = TaskPools::default();
        let t = build_behavior_reasoning(&record("s1", 4), &pools.reasoning, 3).unwrap();
        assert_eq!(t.answer, "because the traffic light is red");
        assert!(pools.reasoning.contains(&t.instruction));
    }

    #[test]
    fn singleton_pool_ignores_seed() {
        let pool = InstructionTemplatePool::new(TaskKind::BehaviorUnderstanding, vec!["What now?".into()]).unwrap();
        for seed in 0..20 {
            assert_eq!(build_behavior_understanding(&record("x", 2), &pool, seed).unwrap().instruction, "What now?");
        }
    }

    #[test]
    fn empty_pool() {
        let pool = InstructionTemplatePool::new(TaskKind::BehaviorReasoning, vec![]).unwrap();
        assert!(matches!(
            build_behavior_reasoning(&record("x", 2), &pool, 0),
            Err(TaskError::EmptyPool(TaskKind::BehaviorReasoning))
        ));
    }

    #[test]
    fn duplicate_templates_rejected() {
        assert!(InstructionTemplatePool::parse(TaskKind::BehaviorReasoning, "a\nb\na").is_err());
    }

    #[test]
    fn shipped_pools_have_enough_paraphrases() {
        let pools = TaskPools::default();
        for p in [&pools.understanding, &pools.reasoning, &pools.conversation] {
            assert!(p.templates().len() >= 8, "{} has {}", p.task(), p.templates().len());
        }
    }

    #[test]
    fn signal_prediction_four_samples() {
        let t = build_signal_prediction(&record("s", 4)).unwrap();
        let lines: Vec<&str> = t.instruction.lines().filter(|l| l.starts_with("t=")).collect();
        assert_eq!(
            lines,
            vec![
                "t=0: speed=10.00, accel=0.00, angle=0.00",
                "t=1: speed=7.50, accel=0.00, angle=0.12",
                "t=2: speed=5.00, accel=0.00, angle=0.25",
            ]
        );
        assert_eq!(t.answer, "speed=2.50, angle=0.38");
    }

    #[test]
    fn signal_prediction_minimum_and_insufficient() {
        let t = build_signal_prediction(&record("s", 2)).unwrap();
        assert_eq!(t.instruction.lines().filter(|l| l.starts_with("t=")).count(), 1);
        assert!(matches!(build_signal_prediction(&record("s", 1)), Err(TaskError::InsufficientSignals(1))));
    }

    fn replay_for(records: &[AnnotationRecord]) -> ReplayClient {
        ReplayClient::new(
            "replay",
            records.iter().map(|r| ReplayEntry {
                prompt_hash: conversation_prompt(r).hash(),
                reply: format!("Detailed: {} {}", r.action, r.justification),
            }),
        )
    }

    #[test]
    fn conversation_uses_cache_on_rerun() {
        let r = record("s", 3);
        let client = replay_for(std::slice::from_ref(&r));
        let cache = ResponseCache::new();
        let pools = TaskPools::default();
        let b = ConversationBuilder { pool: &pools.conversation, client: &client, cache: Some(&cache) };
        let first = b.build(&r, 1).unwrap();
        assert_eq!(first.task, TaskKind::DetailedConversation);
        assert!(first.answer.starts_with("Detailed: the car stops"));
        let second = b.build(&r, 1).unwrap();
        assert_eq!(first, second);
        assert_eq!(client.calls(), 1);
    }

    #[test]
    fn conversation_without_fixture_is_unavailable() {
        let client = ReplayClient::new("replay", vec![]);
        let pools = TaskPools::default();
        let b = ConversationBuilder { pool: &pools.conversation, client: &client, cache: None };
        assert!(matches!(b.build(&record("s", 3), 0), Err(TaskError::Llm(_))));
    }

    #[test]
    fn build_all_counts() {
        let records: Vec<_> = (0..10).map(|i| record(&format!("s{i:02}"), 3)).collect();
        let client = replay_for(&records);
        let pools = TaskPools::default();
        let full = build_all(&records, &pools, Some(&client), None, BuildOptions { conversation_ratio: 1.0, seed: 9, max_concurrency: 3 });
        assert_eq!(full.triplets.len(), 40);
        assert!(full.failures.is_empty());
        for k in TaskKind::ALL {
            assert_eq!(full.stats.count(k), 10);
        }

        let none = build_all(&records, &pools, None, None, BuildOptions { conversation_ratio: 0.0, seed: 9, max_concurrency: 1 });
        assert_eq!(none.triplets.len(), 30);
        assert_eq!(none.stats.count(TaskKind::DetailedConversation), 0);
    }

    #[test]
    fn build_all_reports_failures() {
        let mut records: Vec<_> = (0..3).map(|i| record(&format!("s{i}"), 3)).collect();
        records[1] = record("s1", 1);
        let corpus = build_all(&records, &TaskPools::default(), None, None, BuildOptions { conversation_ratio: 0.0, ..Default::default() });
        assert_eq!(corpus.triplets.len(), 8);
        assert_eq!(corpus.failures.len(), 1);
        assert_eq!(corpus.failures[0].task, TaskKind::SignalPrediction);
        assert_eq!(corpus.failures[0].segment_id, "s1");
    }

    #[test]
    fn selection_is_exact_and_order_free() {
        let records: Vec<_> = (0..1000).map(|i| record(&format!("r{i}"), 2)).collect();
        let chosen = select_conversation_records(&records, 0.52, 5);
        assert_eq!(chosen.len(), 520);
        let mut reversed = records.clone();
        reversed.reverse();
        assert_eq!(select_conversation_records(&reversed, 0.52, 5), chosen);
    }

    #[test]
    fn signal_answer_round_trip() {
        let s = ControlSample { t: 0.0, speed: 12.345, accelerator: 0.3, turn_angle: -7.891 };
        let (speed, angle) = parse_signal_answer(&render_signal_answer(&s)).unwrap();
        assert!((speed - 12.35).abs() < 1e-9 || (speed - 12.34).abs() < 1e-9);
        assert!((angle + 7.89).abs() < 1e-9);
    }

    #[test]
    fn task_kind_strings() {
        for k in TaskKind::ALL {
            assert_eq!(k.as_str().parse::<TaskKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.as_str()));
        }
    }
}
