use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use forge_core::bddx::{self, AnnotationRecord, CorpusFormat};
use forge_core::container::{read_embeddings, write_embeddings, EmbeddingFile};
use forge_core::embed::{
    self, retrieve_exemplars, text_input, EmbedError, EmbedItem, EmbeddingIndex, EmbeddingProvider, FeatureHashProvider,
    FileProvider, HashedRandomProvider, IndexBuilder, Modality, Neighbor, RetrievalMode,
};
use forge_core::gcot::{
    resolve_spatial_relation_with, GCoTResponse, Generator, PromptTemplate, RetryPolicy, SpatialRelation, VqaRecord,
};
use forge_core::llm::{AuditLog, HttpClient, LlmClient, ReplayClient, ResponseCache};
use forge_core::sequence::{
    parse_sequence_line, verify, write_sequences, Assembler, TaskDefinition, TokenBudget, WhitespaceTokenizer,
};
use forge_core::tasks::{self, BuildOptions, InstructionTriplet, TaskKind, TaskPools, TaskStats};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{LlmMode, PipelineConfig, ProviderKind};
use crate::report::StageReport;

pub const RECORDS: &str = "records.jsonl";
pub const REJECTS: &str = "ingest.rejects.jsonl";
pub const GCOT: &str = "gcot.jsonl";
pub const GCOT_AUDIT: &str = "gcot.audit.jsonl";
pub const LLM_CACHE: &str = "llm_cache.jsonl";
pub const TRIPLETS: &str = "triplets.jsonl";
pub const TEXT_EMB: &str = "text.emb";
pub const VIDEO_EMB: &str = "video.emb";
pub const RETRIEVAL: &str = "retrieval.jsonl";
pub const ASSEMBLED: &str = "assembled.jsonl";

#[derive(Debug)]
pub enum StageFailure {
    /// Exit status 2.
    Config(anyhow::Error),
    /// Exit status 1.
    Stage(anyhow::Error),
}

impl From<anyhow::Error> for StageFailure {
    fn from(e: anyhow::Error) -> Self {
        Self::Stage(e)
    }
}

pub type StageResult = Result<StageReport, StageFailure>;

fn config_err(msg: impl Into<String>) -> StageFailure {
    StageFailure::Config(anyhow!(msg.into()))
}

fn open(path: &Path, hint: &str) -> anyhow::Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .with_context(|| format!("missing input {} ({hint})", path.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> anyhow::Result<()> {
    w.flush().with_context(|| format!("writing {}", path.display()))
}

fn read_records(cfg: &PipelineConfig) -> anyhow::Result<(PathBuf, Vec<AnnotationRecord>)> {
    let path = cfg.output_dir().join(RECORDS);
    let parsed = bddx::parse_corpus(open(&path, "run `forge ingest` first")?, CorpusFormat::Jsonl)?;
    if let Some(r) = parsed.rejects.first() {
        return Err(anyhow!("{}:{}: {}", path.display(), r.line, r.error));
    }
    Ok((path, parsed.records))
}

fn read_triplets(cfg: &PipelineConfig) -> anyhow::Result<(PathBuf, Vec<InstructionTriplet>)> {
    let path = cfg.output_dir().join(TRIPLETS);
    let triplets = tasks::read_triplets(open(&path, "run `forge tasks` first")?)
        .with_context(|| format!("reading {}", path.display()))?;
    Ok((path, triplets))
}

fn make_client(cfg: &PipelineConfig) -> Result<Box<dyn LlmClient>, StageFailure> {
    match cfg.llm.mode {
        LlmMode::Replay => {
            let path = cfg
                .llm
                .replay
                .as_ref()
                .ok_or_else(|| config_err("llm.mode is replay but llm.replay is not set"))?;
            let client = ReplayClient::from_jsonl(cfg.llm.model.clone(), open(path, "replay fixture")?)
                .with_context(|| format!("reading {}", path.display()))?;
            Ok(Box::new(client))
        }
        LlmMode::Live => {
            let client = HttpClient::from_env(cfg.llm.endpoint.clone(), cfg.llm.model.clone())
                .map_err(|e| StageFailure::Config(e.into()))?;
            Ok(Box::new(client))
        }
    }
}

fn load_cache(path: &Path) -> anyhow::Result<ResponseCache> {
    if path.exists() {
        let r = open(path, "response cache")?;
        ResponseCache::load(r).with_context(|| format!("reading {}", path.display()))
    } else {
        Ok(ResponseCache::new())
    }
}

fn save_cache(cache: &ResponseCache, path: &Path) -> anyhow::Result<()> {
    let mut w = create(path)?;
    cache.save(&mut w).with_context(|| format!("writing {}", path.display()))?;
    finish(w, path)
}

pub fn ingest(cfg: &PipelineConfig) -> StageResult {
    let corpus = cfg.paths.corpus.as_ref().ok_or_else(|| config_err("paths.corpus is not set"))?;
    let mut report = StageReport::new("ingest");
    report.input("corpus", corpus);

    let parsed = bddx::parse_corpus(open(corpus, "annotation corpus")?, CorpusFormat::Jsonl)
        .with_context(|| format!("reading {}", corpus.display()))?;

    let out = cfg.output_dir();
    let records_path = out.join(RECORDS);
    let mut w = create(&records_path)?;
    bddx::write_corpus(&parsed.records, &mut w).context("writing records")?;
    finish(w, &records_path)?;

    let rejects_path = out.join(REJECTS);
    let mut w = create(&rejects_path)?;
    bddx::write_rejects(&parsed.rejects, &mut w).context("writing rejects")?;
    finish(w, &rejects_path)?;

    report.output("records", &records_path);
    report.output("rejects", &rejects_path);
    for r in &parsed.rejects {
        report.fail(format!("line {}", r.line), &r.error, false);
    }
    let n = parsed.records.len();
    report.tally(n + parsed.rejects.len(), n);
    Ok(report)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PairRelation {
    pub a: String,
    pub b: String,
    pub relations: Vec<SpatialRelation>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GcotLine {
    pub image_id: String,
    pub question: String,
    pub answer: String,
    pub steps: GCoTResponse,
    pub text: String,
    /// Resolver output for every ordered object pair, for offline audits.
    pub relations: Vec<PairRelation>,
}

fn pair_relations(cfg: &PipelineConfig, r: &VqaRecord) -> Vec<PairRelation> {
    let mut out = Vec::new();
    for (i, a) in r.objects.iter().enumerate() {
        for (j, b) in r.objects.iter().enumerate() {
            if i != j {
                out.push(PairRelation {
                    a: a.label.clone(),
                    b: b.label.clone(),
                    relations: resolve_spatial_relation_with(&a.bbox, &b.bbox, cfg.vertical_convention)
                        .into_iter()
                        .collect(),
                });
            }
        }
    }
    out
}

pub fn gcot(cfg: &PipelineConfig) -> StageResult {
    let vqa = cfg.paths.vqa.as_ref().ok_or_else(|| config_err("paths.vqa is not set"))?;
    let mut report = StageReport::new("gcot");
    report.input("vqa", vqa);

    let template = match &cfg.paths.templates {
        Some(dir) if dir.join("gcot_prompt.txt").exists() => {
            let path = dir.join("gcot_prompt.txt");
            report.input("template", &path);
            PromptTemplate::load(&path).map_err(|e| StageFailure::Config(e.into()))?
        }
        _ => PromptTemplate::default(),
    };

    let mut inputs = 0;
    let mut records = Vec::new();
    for (i, line) in open(vqa, "VQA records")?.lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", vqa.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        inputs += 1;
        match serde_json::from_str::<VqaRecord>(&line) {
            Ok(r) => match r.validate() {
                Ok(()) => records.push(r),
                Err(e) => report.fail(r.image_id.clone(), e, true),
            },
            Err(e) => report.fail(format!("line {}", i + 1), e, true),
        }
    }

    let client = make_client(cfg)?;
    let out = cfg.output_dir();
    let cache_path = out.join(LLM_CACHE);
    let cache = load_cache(&cache_path)?;
    let audit = AuditLog::new();
    let generator = Generator {
        template: &template,
        cache: Some(&cache),
        audit: &audit,
    };
    let policy = RetryPolicy {
        max_retries: cfg.llm.max_retries,
    };
    let results = generator.generate_all(&records, client.as_ref(), policy, cfg.llm.max_concurrency);

    let gcot_path = out.join(GCOT);
    let mut w = create(&gcot_path)?;
    let mut written = 0;
    for (r, res) in records.iter().zip(results) {
        match res {
            Ok(steps) => {
                let line = GcotLine {
                    image_id: r.image_id.clone(),
                    question: r.question.clone(),
                    answer: r.answer.clone(),
                    text: steps.text(),
                    steps,
                    relations: pair_relations(cfg, r),
                };
                serde_json::to_writer(&mut w, &line).context("encoding gcot line")?;
                w.write_all(b"\n").context("writing gcot line")?;
                written += 1;
            }
            Err(e) => report.fail(r.image_id.clone(), e, true),
        }
    }
    finish(w, &gcot_path)?;

    let audit_path = out.join(GCOT_AUDIT);
    let mut w = create(&audit_path)?;
    audit.write_jsonl(&mut w).context("writing audit log")?;
    finish(w, &audit_path)?;
    save_cache(&cache, &cache_path)?;

    report.output("gcot", &gcot_path);
    report.output("audit", &audit_path);
    report.output("cache", &cache_path);
    report.tally(inputs, written);
    Ok(report)
}

pub fn tasks(cfg: &PipelineConfig) -> StageResult {
    let (records_path, records) = read_records(cfg)?;
    let mut report = StageReport::new("tasks");
    report.input("records", &records_path);

    let pools = match &cfg.paths.templates {
        Some(dir) => {
            report.input("templates", dir);
            TaskPools::load_dir(dir).map_err(|e| StageFailure::Config(e.into()))?
        }
        None => TaskPools::default(),
    };

    let client = if cfg.conversation_ratio > 0.0 && !records.is_empty() {
        Some(make_client(cfg)?)
    } else {
        None
    };
    let out = cfg.output_dir();
    let cache_path = out.join(LLM_CACHE);
    let cache = load_cache(&cache_path)?;
    let opts = BuildOptions {
        conversation_ratio: cfg.conversation_ratio,
        seed: cfg.seed,
        max_concurrency: cfg.llm.max_concurrency,
    };
    let corpus = tasks::build_all(&records, &pools, client.as_deref(), Some(&cache), opts);

    let short: HashSet<&str> = records
        .iter()
        .filter(|r| r.signals.len() < 2)
        .map(|r| r.segment_id.as_str())
        .collect();
    for f in &corpus.failures {
        // Segments too short for a signal history are ineligible, not broken.
        let hard = !(f.task == TaskKind::SignalPrediction && short.contains(f.segment_id.as_str()));
        report.fail(f.task.triplet_id(&f.segment_id), &f.error, hard);
    }

    let triplets_path = out.join(TRIPLETS);
    let mut w = create(&triplets_path)?;
    tasks::write_triplets(&corpus.triplets, &mut w).context("writing triplets")?;
    finish(w, &triplets_path)?;
    if client.is_some() {
        save_cache(&cache, &cache_path)?;
    }

    report.output("triplets", &triplets_path);
    let n = corpus.triplets.len();
    report.tally(n + corpus.failures.len(), n);
    report.details = Some(serde_json::to_value(&corpus.stats).context("encoding stats")?);
    Ok(report)
}

fn file_provider(path: Option<&PathBuf>, key: &str) -> Result<FileProvider, StageFailure> {
    let path = path.ok_or_else(|| config_err(format!("embeddings.provider is file but embeddings.{key} is not set")))?;
    let file = read_embeddings(open(path, "precomputed embeddings")?).with_context(|| format!("reading {}", path.display()))?;
    Ok(FileProvider::new(file))
}

fn write_index(index: &EmbeddingIndex, path: &Path) -> anyhow::Result<()> {
    let mut w = create(path)?;
    write_embeddings(&index.to_file(), &mut w).with_context(|| format!("writing {}", path.display()))?;
    finish(w, path)
}

pub fn embed(cfg: &PipelineConfig) -> StageResult {
    let (triplets_path, triplets) = read_triplets(cfg)?;
    let mut report = StageReport::new("embed");
    report.input("triplets", &triplets_path);

    let dim = cfg.embeddings.dim;
    let (text_provider, video_provider): (Box<dyn EmbeddingProvider>, Box<dyn EmbeddingProvider>) =
        match cfg.embeddings.provider {
            ProviderKind::Hashed => (
                Box::new(FeatureHashProvider::new(dim)),
                Box::new(HashedRandomProvider::new(dim, cfg.seed)),
            ),
            ProviderKind::File => (
                Box::new(file_provider(cfg.embeddings.text_file.as_ref(), "text_file")?),
                Box::new(file_provider(cfg.embeddings.video_file.as_ref(), "video_file")?),
            ),
        };

    let vectors: Vec<_> = triplets
        .par_iter()
        .map(|t| {
            let text = embed::embed(&EmbedItem::new(&t.id, text_input(t)), text_provider.as_ref(), dim)?;
            let video = embed::embed(&EmbedItem::new(&t.id, &t.video_ref), video_provider.as_ref(), dim)?;
            Ok::<_, EmbedError>((text, video))
        })
        .collect();

    let mut text = IndexBuilder::new(Modality::Text, dim);
    let mut video = IndexBuilder::new(Modality::Video, dim);
    let mut written = 0;
    for (t, v) in triplets.iter().zip(vectors) {
        let inserted = v.and_then(|(tv, vv)| {
            text.insert(&t.id, tv)?;
            video.insert(&t.id, vv)
        });
        match inserted {
            Ok(()) => written += 1,
            Err(e) => report.fail(t.id.clone(), e, true),
        }
    }

    let dir = cfg.embeddings_dir();
    let (text_path, video_path) = (dir.join(TEXT_EMB), dir.join(VIDEO_EMB));
    write_index(&text.freeze(), &text_path)?;
    write_index(&video.freeze(), &video_path)?;
    report.output("text", &text_path);
    report.output("video", &video_path);
    report.tally(triplets.len(), written);
    Ok(report)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RetrievalLine {
    pub id: String,
    pub task: TaskKind,
    pub mode: RetrievalMode,
    /// Most similar first.
    pub exemplars: Vec<Neighbor>,
}

fn load_index(path: &Path) -> anyhow::Result<EmbeddingFile> {
    read_embeddings(open(path, "run `forge embed` first")?).with_context(|| format!("reading {}", path.display()))
}

/// One index per task over the given ids, so exemplars share the task of
/// the instance they are retrieved for.
fn per_task_indices(
    file: &EmbeddingFile,
    modality: Modality,
    task_of: &HashMap<&str, TaskKind>,
) -> anyhow::Result<BTreeMap<TaskKind, EmbeddingIndex>> {
    let mut builders: BTreeMap<TaskKind, IndexBuilder> = BTreeMap::new();
    for (id, v) in &file.entries {
        if let Some(&task) = task_of.get(id.as_str()) {
            builders
                .entry(task)
                .or_insert_with(|| IndexBuilder::new(modality, file.dim))
                .insert(id.clone(), embed::EmbeddingVector::new(v.clone())?)?;
        }
    }
    Ok(builders.into_iter().map(|(k, b)| (k, b.freeze())).collect())
}

pub fn retrieve(cfg: &PipelineConfig) -> StageResult {
    let (triplets_path, triplets) = read_triplets(cfg)?;
    let dir = cfg.embeddings_dir();
    let (text_path, video_path) = (dir.join(TEXT_EMB), dir.join(VIDEO_EMB));
    let mut report = StageReport::new("retrieve");
    report.input("triplets", &triplets_path);
    report.input("text", &text_path);

    let task_of: HashMap<&str, TaskKind> = triplets.iter().map(|t| (t.id.as_str(), t.task)).collect();
    let text = per_task_indices(&load_index(&text_path)?, Modality::Text, &task_of)?;
    // The video space is only read when it is searched.
    let video = match cfg.retrieval_mode {
        RetrievalMode::Union => {
            report.input("video", &video_path);
            per_task_indices(&load_index(&video_path)?, Modality::Video, &task_of)?
        }
        RetrievalMode::TextOnly => BTreeMap::new(),
    };
    let empty = IndexBuilder::new(Modality::Video, 1).freeze();

    let results: Vec<Result<RetrievalLine, String>> = triplets
        .par_iter()
        .map(|z| {
            let t = text.get(&z.task).ok_or_else(|| format!("{} has no text embedding", z.id))?;
            let v = video.get(&z.task).unwrap_or(&empty);
            let exemplars = match retrieve_exemplars(z, t, v, cfg.k, cfg.retrieval_mode) {
                Ok(r) => r.neighbors,
                Err(EmbedError::EmptyIndex) => Vec::new(),
                Err(e) => return Err(e.to_string()),
            };
            Ok(RetrievalLine {
                id: z.id.clone(),
                task: z.task,
                mode: cfg.retrieval_mode,
                exemplars,
            })
        })
        .collect();

    let out_path = cfg.output_dir().join(RETRIEVAL);
    let mut w = create(&out_path)?;
    let mut written = 0;
    let mut lonely = 0;
    for (z, res) in triplets.iter().zip(results) {
        match res {
            Ok(line) => {
                lonely += usize::from(line.exemplars.is_empty());
                serde_json::to_writer(&mut w, &line).context("encoding retrieval line")?;
                w.write_all(b"\n").context("writing retrieval line")?;
                written += 1;
            }
            Err(e) => report.fail(z.id.clone(), e, true),
        }
    }
    finish(w, &out_path)?;
    if lonely > 0 {
        report.warn(format!("{lonely} triplets are alone in their task and get no exemplars"));
    }
    report.output("retrieval", &out_path);
    report.tally(triplets.len(), written);
    Ok(report)
}

fn definitions(cfg: &PipelineConfig) -> Result<HashMap<TaskKind, TaskDefinition>, StageFailure> {
    let dir = cfg.paths.templates.as_ref().map(|d| d.join("definitions"));
    TaskKind::ALL
        .iter()
        .map(|&task| {
            let def = match &dir {
                Some(d) if d.join(format!("{}.txt", task.as_str())).exists() => {
                    TaskDefinition::load(task, d).map_err(|e| StageFailure::Config(e.into()))?
                }
                _ => TaskDefinition::bundled(task),
            };
            Ok((task, def))
        })
        .collect()
}

pub fn assemble(cfg: &PipelineConfig) -> StageResult {
    let (triplets_path, triplets) = read_triplets(cfg)?;
    let retrieval_path = cfg.output_dir().join(RETRIEVAL);
    let mut report = StageReport::new("assemble");
    report.input("triplets", &triplets_path);
    report.input("retrieval", &retrieval_path);

    let mut retrieved: HashMap<String, Vec<String>> = HashMap::new();
    for (i, line) in open(&retrieval_path, "run `forge retrieve` first")?.lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", retrieval_path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: RetrievalLine = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}", retrieval_path.display(), i + 1))?;
        retrieved.insert(r.id, r.exemplars.into_iter().map(|n| n.id).collect());
    }
    let defs = definitions(cfg)?;
    let by_id: HashMap<&str, &InstructionTriplet> = triplets.iter().map(|t| (t.id.as_str(), t)).collect();

    let tokenizer = WhitespaceTokenizer;
    let assembler = Assembler {
        tokenizer: &tokenizer,
        budget: TokenBudget { max_len: cfg.max_len },
        max_exemplars: cfg.k,
    };

    let results: Vec<Result<_, String>> = triplets
        .par_iter()
        .map(|z| {
            let ids = retrieved.get(&z.id).ok_or("no retrieval entry")?;
            // Union mode can return up to 2k candidates; keep the best k and
            // place the most similar next to the current instance, so budget
            // trimming drops the least similar first.
            let mut exemplars = ids
                .iter()
                .take(cfg.k)
                .map(|id| by_id.get(id.as_str()).map(|t| (*t).clone()).ok_or(format!("unknown exemplar {id}")))
                .collect::<Result<Vec<_>, _>>()?;
            exemplars.reverse();
            let seq = assembler
                .assemble(&defs[&z.task], &exemplars, z)
                .map_err(|e| e.to_string())?;
            Ok((exemplars.len(), seq))
        })
        .collect();

    let mut seqs = Vec::new();
    let mut dropped = 0;
    for (z, res) in triplets.iter().zip(results) {
        match res {
            Ok((wanted, seq)) => {
                dropped += wanted + 1 - seq.turn_count();
                seqs.push(seq);
            }
            Err(e) => report.fail(z.id.clone(), e, true),
        }
    }
    let out_path = cfg.output_dir().join(ASSEMBLED);
    let mut w = create(&out_path)?;
    write_sequences(&seqs, &mut w).context("writing sequences")?;
    finish(w, &out_path)?;

    let turns: usize = seqs.iter().map(|s| s.turn_count()).sum();
    report.output("assembled", &out_path);
    report.tally(triplets.len(), seqs.len());
    report.details = Some(serde_json::json!({
        "sequences": seqs.len(),
        "turns": turns,
        "exemplar_turns_dropped": dropped,
        "max_len": cfg.max_len,
    }));
    Ok(report)
}

pub fn verify_corpus(cfg: &PipelineConfig) -> StageResult {
    let path = cfg.output_dir().join(ASSEMBLED);
    let mut report = StageReport::new("verify");
    report.input("assembled", &path);

    let mut inputs = 0;
    for (i, line) in open(&path, "run `forge assemble` first")?.lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        inputs += 1;
        let id = format!("line {}", i + 1);
        match parse_sequence_line(&line) {
            Ok(seq) => {
                let violations = verify(&seq);
                if !violations.is_empty() {
                    let msg = violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
                    report.fail(id, msg, true);
                }
            }
            Err(e) => report.fail(id, e, true),
        }
    }
    if inputs == 0 {
        report.warn(format!("{} holds no sequences", path.display()));
    }
    let bad = report.failures.len();
    report.tally(inputs, inputs - bad);
    Ok(report)
}

pub fn stats(cfg: &PipelineConfig) -> StageResult {
    let (records_path, records) = read_records(cfg)?;
    let mut report = StageReport::new("stats");
    report.input("records", &records_path);

    let mut details = serde_json::json!({ "corpus": bddx::corpus_stats(&records) });
    let triplets_path = cfg.output_dir().join(TRIPLETS);
    if triplets_path.exists() {
        let (_, triplets) = read_triplets(cfg)?;
        report.input("triplets", &triplets_path);
        let stats = TaskStats::tally(&triplets);
        let conv = stats.count(TaskKind::DetailedConversation);
        details["tasks"] = serde_json::to_value(&stats).context("encoding stats")?;
        details["conversation_share"] = if records.is_empty() {
            serde_json::Value::Null
        } else {
            serde_json::json!(conv as f64 / records.len() as f64)
        };
    }
    report.details = Some(details);
    report.tally(records.len(), records.len());
    Ok(report)
}
