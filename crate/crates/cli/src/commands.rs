//! One function per subcommand.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use vrag_core::dataset::{
    build_fcot_samples, export_stage1_vqa, export_stage2_sft, export_stage3_prompts, export_training_recipe,
    partition_digest, partition_stages, split_stage23, stage2_record, teacher_request, DatasetError, InferenceMode,
    LabeledFrame, SampleRecord, Stage, Stage23Split, StagePartition, TeacherConfig, TeacherStats,
};
use vrag_core::eval::{
    answer_to_score, auc_rank, cost_ratio, cross_judge_average, judge_explanations, ratio_hundredths, render_auc_table,
    render_cost_table, render_judge_table, render_robustness_table, robustness_rate, video_level_auc, video_scores,
    Aggregation, AucRatio, CostProfile, Decimal2, EvalError, FrameScore, JudgeConfig, JudgeSample, RobustnessRecord,
    RobustnessResult,
};
use vrag_core::fcot::{
    annotation_template_id, extract_s1_pred, format_evidence_block, parse_fcot, ParseMode, ResponseSummary, SampleKind,
    INFER_TEMPLATE, STAGE1_TEMPLATE,
};
use vrag_core::fkd::{
    build_sampling_plan, ingest as ingest_corpus, load_corpus, parse_annotation, vector_file, AnnotationMode, Corpus,
    EmbeddingRecord, KnowledgeEntry, Label, ManipulationMethod, SamplingPlan, VideoInventory, ENTRIES_FILE,
    MANIFEST_FILE, VECTORS_FILE,
};
use vrag_core::gateway::{ChatRequest, DecodingParams, Gateway, ImageRef};
use vrag_core::retrieval::{assemble_bundle, EvidenceBundle, KnowledgeBase, RetrievalConfig, VectorIndex};
use vrag_core::reward::{batch_reward, group_advantages, score_response, RewardDumpRecord};

use crate::config::ScoreRule;
use crate::records::{
    read_numbered, round6, AnnotationJob, FrameRecord, InventoryRecord, PredictionRecord, RetrievalRow, RolloutRecord,
};
use crate::synth::{self, SynthSpec};
use crate::{require, CliError, Context, SynthArgs, CORPUS_DIR, DATASETS_DIR, INDEX_DIR, REPORTS_DIR, ROLLOUTS_DIR};

pub const SAMPLING_PLAN_FILE: &str = "sampling_plan.json";
pub const RETRIEVAL_FILE: &str = "retrieval.jsonl";
pub const BUNDLES_FILE: &str = "bundles.jsonl";
pub const PARTITION_FILE: &str = "partition.json";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const GOLD_FILE: &str = "samples_gold.jsonl";
pub const FKD_ENTRIES_FILE: &str = "fkd_entries.jsonl";
pub const RESPONSES_FILE: &str = "responses.jsonl";
pub const PARSED_FILE: &str = "parsed.jsonl";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const ROBUSTNESS_FILE: &str = "robustness.jsonl";
pub const REWARDS_FILE: &str = "rewards.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "report.txt";

/// Runs `f` over `items` with up to `workers` threads; results keep input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers.max(1).min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().unwrap().expect("every slot filled")).collect()
}

fn at(path: &Path, line: usize, id: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("{}:{line} ({id}): {msg}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, hint: &str) -> Result<T, CliError> {
    if !path.exists() {
        return Err(CliError::Validation(format!("{} does not exist; run {hint} first", path.display())));
    }
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn read_produced<T: serde::de::DeserializeOwned>(path: &Path, hint: &str) -> Result<Vec<(usize, T)>, CliError> {
    if !path.exists() {
        return Err(CliError::Validation(format!("{} does not exist; run {hint} first", path.display())));
    }
    read_numbered(path)
}

pub fn synth(ctx: &mut Context, args: &SynthArgs) -> Result<(), CliError> {
    let spec = SynthSpec {
        seed: ctx.seed()?,
        dimension: args.dim,
        query_videos_per_class: args.videos,
        query_frames_per_video: args.frames,
        ..SynthSpec::default()
    };
    if spec.dimension < 3 || spec.query_videos_per_class == 0 || spec.query_frames_per_video == 0 {
        return Err(CliError::Validation("synthetic dimension must be at least 3 and counts positive".into()));
    }
    if ctx.dry_run {
        return Ok(());
    }
    let dir = args.dir.clone().unwrap_or_else(|| ctx.dir("synthetic"));
    let summary = synth::generate(&spec, &dir)?;
    println!(
        "wrote {} knowledge entries and {} query frames from {} videos; config at {}",
        summary.entries,
        summary.frames,
        summary.query_videos,
        summary.config_path.display()
    );
    for f in [synth::FRAMES_FILE, synth::INVENTORY_FILE, synth::JOBS_FILE, synth::CONFIG_FILE] {
        ctx.wrote(dir.join(f));
    }
    ctx.wrote(dir.join(synth::SOURCE_DIR));
    Ok(())
}

/// Entries and vectors from a source directory, paired by row. Missing
/// findings are parsed from the raw annotation.
fn read_source(dir: &Path) -> Result<(Vec<KnowledgeEntry>, Vec<EmbeddingRecord>), CliError> {
    let entries_path = dir.join(ENTRIES_FILE);
    let (mut entries, vectors): (Vec<(usize, KnowledgeEntry)>, Vec<EmbeddingRecord>) =
        if dir.join(MANIFEST_FILE).exists() {
            let corpus = load_corpus(dir)?;
            let vectors = corpus.embedding_records();
            (corpus.entries.into_iter().enumerate().map(|(i, e)| (i + 1, e)).collect(), vectors)
        } else {
            require(&entries_path, "entries file")?;
            require(&dir.join(VECTORS_FILE), "vector file")?;
            let entries: Vec<(usize, KnowledgeEntry)> = read_numbered(&entries_path)?;
            let bytes = std::fs::read(dir.join(VECTORS_FILE))?;
            let (dimension, data) = vector_file::decode(&bytes)?;
            let rows = data.len().checked_div(dimension).unwrap_or(0);
            if rows != entries.len() {
                return Err(CliError::Validation(format!(
                    "{} has {} entries but the vector file has {rows} rows",
                    entries_path.display(),
                    entries.len()
                )));
            }
            let vectors = entries
                .iter()
                .zip(data.chunks(dimension.max(1)))
                .map(|((_, e), row)| EmbeddingRecord::new(e.embedding_id.clone(), row.to_vec()))
                .collect();
            (entries, vectors)
        };
    for (line, entry) in &mut entries {
        if entry.findings.is_empty() && !entry.raw_annotation.trim().is_empty() {
            entry.findings = parse_annotation(&entry.raw_annotation, AnnotationMode::Lenient).unwrap_or_default();
        }
        entry.validate().map_err(|e| at(&entries_path, *line, &entry.entry_id, e))?;
    }
    Ok((entries.into_iter().map(|(_, e)| e).collect(), vectors))
}

pub fn ingest(ctx: &mut Context, source: &Option<PathBuf>) -> Result<(), CliError> {
    let dir = ctx.input(source, &ctx.config.corpus.source_dir.clone(), "corpus source directory")?;
    let (entries, vectors) = read_source(&dir)?;
    if ctx.dry_run {
        for v in &vectors {
            v.validate()?;
        }
        return Ok(());
    }
    let out = ctx.dir(CORPUS_DIR);
    let manifest = ingest_corpus(entries, vectors, &out)?;
    println!(
        "ingested {} entries ({} real, {} fake), dimension {}",
        manifest.count,
        manifest.counts_by_label.get(&Label::Real).unwrap_or(&0),
        manifest.counts_by_label.get(&Label::Fake).unwrap_or(&0),
        manifest.dimension
    );
    ctx.wrote(out);
    Ok(())
}

pub fn plan_sample(ctx: &mut Context, inventory: &Option<PathBuf>) -> Result<(), CliError> {
    let path = ctx.input(inventory, &ctx.config.corpus.inventory.clone(), "inventory")?;
    let seed = ctx.seed()?;
    let mut videos = BTreeMap::new();
    for (line, r) in read_numbered::<InventoryRecord>(&path)? {
        let inv = VideoInventory { label: r.label, frames: r.frames };
        if videos.insert(r.video_id.clone(), inv).is_some() {
            return Err(at(&path, line, &r.video_id, "duplicate video"));
        }
    }
    let targets =
        BTreeMap::from([(Label::Real, ctx.config.dataset.real_frames), (Label::Fake, ctx.config.dataset.fake_frames)]);
    let plan = build_sampling_plan(&videos, &targets, seed);
    if ctx.dry_run {
        return Ok(());
    }
    for label in Label::ALL {
        println!("{label}: {} of {} frames planned", plan.planned(label, &videos), targets[&label]);
    }
    ctx.write_json(ctx.file(DATASETS_DIR, SAMPLING_PLAN_FILE), &plan)
}

pub fn index(ctx: &mut Context) -> Result<(), CliError> {
    let dir = ctx.dir(CORPUS_DIR);
    require(&dir, "corpus (run ingest first)")?;
    let corpus = load_corpus(&dir)?;
    let index = VectorIndex::from_corpus(&corpus)?;
    if ctx.dry_run {
        return Ok(());
    }
    let out = ctx.dir(INDEX_DIR);
    index.save(&out)?;
    println!("indexed {} vectors of dimension {}", index.len(), index.dimension());
    ctx.wrote(out);
    Ok(())
}

fn load_kb(ctx: &Context) -> Result<(Corpus, KnowledgeBase), CliError> {
    let corpus_dir = ctx.dir(CORPUS_DIR);
    let index_dir = ctx.dir(INDEX_DIR);
    require(&corpus_dir, "corpus (run ingest first)")?;
    require(&index_dir, "index (run index first)")?;
    let corpus = load_corpus(&corpus_dir)?;
    let index = VectorIndex::load(&index_dir)?;
    if index.len() != corpus.entries.len() {
        return Err(CliError::Validation(format!(
            "index has {} rows but the corpus has {} entries; rebuild the index",
            index.len(),
            corpus.entries.len()
        )));
    }
    let kb = KnowledgeBase::new(index, &corpus.entries)?;
    Ok((corpus, kb))
}

fn read_frames(path: &Path, need_labels: bool) -> Result<Vec<(usize, FrameRecord)>, CliError> {
    let frames: Vec<(usize, FrameRecord)> = read_numbered(path)?;
    let mut seen = BTreeSet::new();
    for (line, f) in &frames {
        if !seen.insert(f.sample_id.as_str()) {
            return Err(at(path, *line, &f.sample_id, "duplicate sample id"));
        }
        if need_labels && f.label.is_none() {
            return Err(at(path, *line, &f.sample_id, "frame has no label"));
        }
    }
    Ok(frames)
}

/// Retrieves and votes for every frame. Self-exclusion applies to frames
/// that name a corpus entry of their own.
fn bundles_for(
    ctx: &Context,
    corpus: &Corpus,
    kb: &KnowledgeBase,
    path: &Path,
    frames: &[(usize, FrameRecord)],
) -> Result<Vec<EvidenceBundle>, CliError> {
    let base = ctx.config.retrieval;
    frames
        .iter()
        .map(|(line, f)| {
            let vector = match (&f.vector, &f.vector_ref) {
                (Some(v), _) => v.clone(),
                (None, Some(r)) => {
                    let i = corpus
                        .position(r)
                        .ok_or_else(|| at(path, *line, &f.sample_id, format!("unknown vector_ref {r}")))?;
                    corpus.vectors.row(i).to_vec()
                }
                (None, None) => return Err(at(path, *line, &f.sample_id, "frame has neither vector nor vector_ref")),
            };
            let cfg = RetrievalConfig { exclude_self: base.exclude_self && f.self_id().is_some(), ..base };
            let items = kb.retrieve(&vector, &cfg, f.self_id()).map_err(|e| at(path, *line, &f.sample_id, e))?;
            assemble_bundle(&f.sample_id, items, f.label).map_err(|e| at(path, *line, &f.sample_id, e))
        })
        .collect()
}

fn rag_accuracy(bundles: &[EvidenceBundle]) -> Option<f64> {
    let judged: Vec<bool> = bundles.iter().filter_map(|b| b.rag_correct).collect();
    (!judged.is_empty()).then(|| judged.iter().filter(|c| **c).count() as f64 / judged.len() as f64)
}

pub fn retrieve(ctx: &mut Context, frames: &Option<PathBuf>) -> Result<(), CliError> {
    let path = ctx.input(frames, &ctx.config.corpus.frames.clone(), "frames file")?;
    let frames = read_frames(&path, false)?;
    let (corpus, kb) = load_kb(ctx)?;
    let bundles = bundles_for(ctx, &corpus, &kb, &path, &frames)?;
    if ctx.dry_run {
        return Ok(());
    }
    let rows: Vec<RetrievalRow> = bundles
        .iter()
        .map(|b| RetrievalRow {
            query_id: b.query_id.clone(),
            entry_ids: b.items.iter().map(|i| i.entry_id.clone()).collect(),
            similarities: b.items.iter().map(|i| round6(i.similarity)).collect(),
        })
        .collect();
    ctx.write_jsonl(ctx.file(DATASETS_DIR, RETRIEVAL_FILE), &rows)?;
    ctx.write_jsonl(ctx.file(DATASETS_DIR, BUNDLES_FILE), &bundles)?;
    match rag_accuracy(&bundles) {
        Some(acc) => println!(
            "retrieved k={} for {} frames; majority vote correct on {:.4}",
            ctx.config.retrieval.k,
            bundles.len(),
            acc
        ),
        None => println!("retrieved k={} for {} frames", ctx.config.retrieval.k, bundles.len()),
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFailure {
    pub entry_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationReport {
    pub annotated: usize,
    pub failed: Vec<AnnotationFailure>,
}

fn annotation_slots(job: &AnnotationJob) -> Result<BTreeMap<String, String>, String> {
    if job.method == ManipulationMethod::Real {
        return Ok(BTreeMap::from([("real_image_path".to_string(), job.image.clone())]));
    }
    let original = job.original_image.clone().ok_or("manipulated frames need original_image")?;
    Ok(BTreeMap::from([
        ("manipulated_image_path".to_string(), job.image.clone()),
        ("original_image_path".to_string(), original),
    ]))
}

fn annotate_one(
    job: &AnnotationJob,
    prompt: &[vrag_core::fcot::PromptMessage],
    ctx: &Context,
    gateway: &Gateway,
    seed: u64,
) -> Result<Result<KnowledgeEntry, String>, CliError> {
    let role = &ctx.config.gateway.teacher;
    let mut last = String::from("no attempts made");
    for attempt in 1..=ctx.config.dataset.teacher_attempts {
        let params = DecodingParams {
            temperature: role.temperature,
            max_tokens: role.max_tokens,
            want_logprobs: false,
            seed: Some(seed.wrapping_add(u64::from(attempt))),
        };
        let request =
            ChatRequest::from_prompt(&role.model_id, prompt.to_vec(), Some(ImageRef::new(&job.image)), params);
        let reply = gateway.complete(&request)?;
        let entry = KnowledgeEntry {
            entry_id: job.media_ref.entry_id(job.method),
            media_ref: job.media_ref.clone(),
            label: job.method.label(),
            method: job.method,
            findings: parse_annotation(&reply.text, AnnotationMode::Lenient).unwrap_or_default(),
            raw_annotation: reply.text.trim().to_string(),
            embedding_id: job.embedding_id.clone(),
        };
        match entry.validate() {
            Ok(()) => return Ok(Ok(entry)),
            Err(e) => last = e.to_string(),
        }
    }
    Ok(Err(last))
}

pub fn annotate_fkd(ctx: &mut Context, jobs: &Option<PathBuf>) -> Result<(), CliError> {
    let path = ctx.input(jobs, &ctx.config.corpus.annotation_jobs.clone(), "annotation jobs file")?;
    let seed = ctx.seed()?;
    let jobs: Vec<(usize, AnnotationJob)> = read_numbered(&path)?;
    let mut prompts = Vec::with_capacity(jobs.len());
    for (line, job) in &jobs {
        let id = job.media_ref.entry_id(job.method);
        let template = annotation_template_id(job.method)
            .ok_or_else(|| at(&path, *line, &id, format!("no annotation template for {}", job.method)))?;
        let slots = annotation_slots(job).map_err(|e| at(&path, *line, &id, e))?;
        prompts.push(ctx.templates.render(template, &slots).map_err(|e| at(&path, *line, &id, e))?);
    }
    if ctx.dry_run {
        return Ok(());
    }
    let gateway = ctx.gateway(&ctx.config.gateway.teacher)?;
    let work: Vec<(&AnnotationJob, &Vec<_>)> = jobs.iter().map(|(_, j)| j).zip(&prompts).collect();
    let results = parallel_map(&work, ctx.config.gateway.teacher.parallelism, |(job, prompt)| {
        annotate_one(job, prompt, ctx, &gateway, seed)
    });
    let mut entries = Vec::new();
    let mut failed = Vec::new();
    for ((job, _), r) in work.iter().zip(results) {
        match r? {
            Ok(e) => entries.push(e),
            Err(reason) => failed.push(AnnotationFailure { entry_id: job.media_ref.entry_id(job.method), reason }),
        }
    }
    println!("annotated {} frames, {} failed", entries.len(), failed.len());
    ctx.write_jsonl(ctx.file(DATASETS_DIR, FKD_ENTRIES_FILE), &entries)?;
    let report = AnnotationReport { annotated: entries.len(), failed };
    ctx.write_json(ctx.file(REPORTS_DIR, "annotate_fkd.json"), &report)
}

/// Video partition shared by classification and export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionFile {
    pub stages: StagePartition,
    pub split: Stage23Split,
    pub stage1_digest: String,
    pub stage2_digest: String,
    pub stage3_digest: String,
}

impl PartitionFile {
    fn videos(&self, stage: Stage) -> &BTreeSet<String> {
        match stage {
            Stage::Stage1 => &self.stages.stage1_videos,
            Stage::Stage2 => &self.split.stage2_videos,
            Stage::Stage3 => &self.split.stage3_videos,
        }
    }
}

fn video_labels(path: &Path, frames: &[(usize, FrameRecord)]) -> Result<Vec<(String, Label)>, CliError> {
    let mut videos: BTreeMap<&str, Label> = BTreeMap::new();
    for (line, f) in frames {
        let label = f.label.ok_or_else(|| at(path, *line, &f.sample_id, "frame has no label"))?;
        if *videos.entry(&f.video_id).or_insert(label) != label {
            return Err(at(path, *line, &f.sample_id, format!("video {} has frames with both labels", f.video_id)));
        }
    }
    Ok(videos.into_iter().map(|(v, l)| (v.to_string(), l)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub samples: usize,
    pub per_kind: BTreeMap<SampleKind, usize>,
    pub s1_correct: usize,
    pub s1_unknown: usize,
    pub rag_correct: usize,
    pub stage1_videos: usize,
    pub stage2_videos: usize,
    pub stage3_videos: usize,
}

fn stage1_predictions(
    ctx: &Context,
    frames: &[&FrameRecord],
    predictions: &Option<PathBuf>,
    seed: u64,
) -> Result<Vec<Option<Label>>, CliError> {
    if let Some(path) = predictions {
        require(path, "predictions file")?;
        let mut by_id = BTreeMap::new();
        for (line, p) in read_numbered::<PredictionRecord>(path)? {
            if by_id.insert(p.sample_id.clone(), p.s1_pred).is_some() {
                return Err(at(path, line, &p.sample_id, "duplicate prediction"));
            }
        }
        return frames
            .iter()
            .map(|f| {
                by_id.get(&f.sample_id).copied().ok_or_else(|| {
                    CliError::Validation(format!("{}: no prediction for {}", path.display(), f.sample_id))
                })
            })
            .collect();
    }
    let role = &ctx.config.gateway.policy;
    let question = ctx.templates.render(STAGE1_TEMPLATE, &BTreeMap::new())?;
    let requests: Vec<ChatRequest> = frames
        .iter()
        .map(|f| {
            let params = DecodingParams {
                temperature: role.temperature,
                max_tokens: role.max_tokens,
                want_logprobs: false,
                seed: Some(seed),
            };
            ChatRequest::from_prompt(&role.model_id, question.clone(), Some(ImageRef::new(&f.image_ref)), params)
        })
        .collect();
    if ctx.dry_run {
        return Ok(vec![None; frames.len()]);
    }
    let gateway = ctx.gateway(role)?;
    gateway
        .complete_batch(&requests)
        .into_iter()
        .zip(frames)
        .map(|(r, f)| {
            r.map(|resp| extract_s1_pred(&resp.text))
                .map_err(|e| CliError::from(e).context(format!("stage-1 prediction for {}", f.sample_id)))
        })
        .collect()
}

pub fn classify(ctx: &mut Context, frames: &Option<PathBuf>, predictions: &Option<PathBuf>) -> Result<(), CliError> {
    let path = ctx.input(frames, &ctx.config.corpus.frames.clone(), "frames file")?;
    let seed = ctx.seed()?;
    let frames = read_frames(&path, true)?;
    let videos = video_labels(&path, &frames)?;
    let stages = partition_stages(&videos, ctx.config.dataset.stage1_count, seed)?;
    let pool: Vec<(String, Label)> = videos.into_iter().filter(|(v, _)| stages.stage23_videos.contains(v)).collect();
    let split = split_stage23(&pool, ctx.config.dataset.stage2_fraction, seed)?;

    let bundles_path = ctx.file(DATASETS_DIR, BUNDLES_FILE);
    let mut bundles = BTreeMap::new();
    for (line, b) in read_produced::<EvidenceBundle>(&bundles_path, "retrieve")? {
        b.validate().map_err(|e| at(&bundles_path, line, &b.query_id, e))?;
        bundles.insert(b.query_id.clone(), b);
    }
    let pool_frames: Vec<&FrameRecord> =
        frames.iter().map(|(_, f)| f).filter(|f| stages.stage23_videos.contains(&f.video_id)).collect();
    for f in &pool_frames {
        if !bundles.contains_key(&f.sample_id) {
            return Err(CliError::Validation(format!("{}: no bundle for {}", bundles_path.display(), f.sample_id)));
        }
    }
    let preds = stage1_predictions(ctx, &pool_frames, predictions, seed)?;
    if ctx.dry_run {
        return Ok(());
    }

    let samples: Vec<SampleRecord> = pool_frames
        .iter()
        .zip(preds)
        .map(|(f, s1)| {
            let truth = f.label.expect("labels checked");
            SampleRecord::new(
                &f.sample_id,
                &f.video_id,
                &f.image_ref,
                truth,
                s1,
                InferenceMode::WithoutRag,
                bundles[&f.sample_id].clone(),
            )
        })
        .collect();
    let mut per_kind: BTreeMap<SampleKind, usize> = SampleKind::ALL.iter().map(|k| (*k, 0)).collect();
    for s in &samples {
        *per_kind.get_mut(&s.kind).unwrap() += 1;
    }
    let report = ClassifyReport {
        samples: samples.len(),
        per_kind,
        s1_correct: samples.iter().filter(|s| s.s1_pred == Some(s.ground_truth)).count(),
        s1_unknown: samples.iter().filter(|s| s.s1_pred.is_none()).count(),
        rag_correct: samples.iter().filter(|s| s.bundle.majority_label == s.ground_truth).count(),
        stage1_videos: stages.stage1_videos.len(),
        stage2_videos: split.stage2_videos.len(),
        stage3_videos: split.stage3_videos.len(),
    };
    let partition = PartitionFile {
        stage1_digest: partition_digest(&stages.stage1_videos),
        stage2_digest: partition_digest(&split.stage2_videos),
        stage3_digest: partition_digest(&split.stage3_videos),
        stages,
        split,
    };
    for (kind, n) in &report.per_kind {
        println!("{kind}: {n}");
    }
    ctx.write_json(ctx.file(DATASETS_DIR, PARTITION_FILE), &partition)?;
    ctx.write_jsonl(ctx.file(DATASETS_DIR, SAMPLES_FILE), &samples)?;
    ctx.write_json(ctx.file(REPORTS_DIR, "classify.json"), &report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub stats: TeacherStats,
    pub failures: Vec<AnnotationFailure>,
}

fn read_samples(ctx: &Context, name: &str, hint: &str) -> Result<Vec<SampleRecord>, CliError> {
    let path = ctx.file(DATASETS_DIR, name);
    read_produced::<SampleRecord>(&path, hint)?
        .into_iter()
        .map(|(line, s)| {
            s.validate().map_err(|e| at(&path, line, &s.sample_id, e))?;
            Ok(s)
        })
        .collect()
}

fn read_partition(ctx: &Context) -> Result<PartitionFile, CliError> {
    read_json(&ctx.file(DATASETS_DIR, PARTITION_FILE), "classify")
}

pub fn build_fcot(ctx: &mut Context) -> Result<(), CliError> {
    let seed = ctx.seed()?;
    let partition = read_partition(ctx)?;
    let samples: Vec<SampleRecord> = read_samples(ctx, SAMPLES_FILE, "classify")?
        .into_iter()
        .filter(|s| partition.split.stage2_videos.contains(&s.video_id))
        .collect();
    let role = &ctx.config.gateway.teacher;
    let teacher = TeacherConfig {
        model_id: role.model_id.clone(),
        temperature: role.temperature,
        max_tokens: role.max_tokens,
        max_attempts: ctx.config.dataset.teacher_attempts,
        parallelism: role.parallelism,
        seed,
    };
    for s in &samples {
        teacher_request(s, &ctx.templates, &teacher, 1)?;
    }
    if ctx.dry_run {
        return Ok(());
    }
    let gateway = ctx.gateway(role)?;
    let (results, stats) = build_fcot_samples(samples, &gateway, &ctx.templates, &teacher);
    let mut gold = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(s) => gold.push(s),
            Err(DatasetError::TeacherFormatFailure { sample_id, last, .. }) => {
                log::warn!("no gold for {sample_id}: {last}");
                failures.push(AnnotationFailure { entry_id: sample_id, reason: last });
            }
            Err(e) => return Err(e.into()),
        }
    }
    println!("gold for {} of {} samples in {} teacher calls", stats.succeeded, stats.samples, stats.total_attempts);
    ctx.write_jsonl(ctx.file(DATASETS_DIR, GOLD_FILE), &gold)?;
    ctx.write_json(ctx.file(REPORTS_DIR, "build_fcot.json"), &BuildReport { stats, failures })
}

/// Keeps at most the planned number of frames per video, in file order.
fn apply_plan<'a>(frames: Vec<&'a FrameRecord>, plan: &SamplingPlan) -> Vec<&'a FrameRecord> {
    let mut taken: BTreeMap<&str, usize> = BTreeMap::new();
    frames
        .into_iter()
        .filter(|f| {
            let limit = plan.frames_per_video.get(&f.video_id).copied().unwrap_or(0);
            let n = taken.entry(&f.video_id).or_default();
            *n += 1;
            *n <= limit
        })
        .collect()
}

pub fn export_stage(ctx: &mut Context, stage: u8, frames: &Option<PathBuf>) -> Result<(), CliError> {
    let stage = Stage::from_number(stage).ok_or_else(|| CliError::Validation(format!("no stage {stage}")))?;
    let partition = read_partition(ctx)?;
    let videos = partition.videos(stage).clone();
    let n = stage.number();
    let out = ctx.file(
        DATASETS_DIR,
        &format!(
            "stage{n}_{}.jsonl",
            match stage {
                Stage::Stage1 => "vqa",
                Stage::Stage2 => "sft",
                Stage::Stage3 => "grpo",
            }
        ),
    );
    match stage {
        Stage::Stage1 => {
            let path = ctx.input(frames, &ctx.config.corpus.frames.clone(), "frames file")?;
            let all = read_frames(&path, true)?;
            let mut chosen: Vec<&FrameRecord> =
                all.iter().map(|(_, f)| f).filter(|f| videos.contains(&f.video_id)).collect();
            let plan_path = ctx.file(DATASETS_DIR, SAMPLING_PLAN_FILE);
            if plan_path.exists() {
                chosen = apply_plan(chosen, &read_json(&plan_path, "plan-sample")?);
            }
            let labelled: Vec<LabeledFrame> = chosen
                .iter()
                .map(|f| LabeledFrame {
                    sample_id: f.sample_id.clone(),
                    video_id: f.video_id.clone(),
                    image_ref: f.image_ref.clone(),
                    label: f.label.expect("labels checked"),
                })
                .collect();
            if ctx.dry_run {
                return Ok(());
            }
            let written = export_stage1_vqa(&labelled, &ctx.templates, &out)?;
            println!("{stage}: {written} records");
        }
        Stage::Stage2 => {
            let gold: Vec<SampleRecord> = read_samples(ctx, GOLD_FILE, "build-fcot")?
                .into_iter()
                .filter(|s| videos.contains(&s.video_id))
                .collect();
            if ctx.dry_run {
                for s in &gold {
                    stage2_record(s, &ctx.templates)?;
                }
                return Ok(());
            }
            let report = export_stage2_sft(&gold, &ctx.templates, &out)?;
            println!("{stage}: {} records", report.records);
            ctx.write_json(ctx.file(REPORTS_DIR, "stage2_report.json"), &report)?;
        }
        Stage::Stage3 => {
            let samples: Vec<SampleRecord> = read_samples(ctx, SAMPLES_FILE, "classify")?
                .into_iter()
                .filter(|s| videos.contains(&s.video_id))
                .collect();
            let used: BTreeSet<String> =
                partition.stages.stage1_videos.union(&partition.split.stage2_videos).cloned().collect();
            if ctx.dry_run {
                if let Some(s) = samples.iter().find(|s| used.contains(&s.video_id)) {
                    return Err(CliError::Validation(format!("sample {} reuses video {}", s.sample_id, s.video_id)));
                }
                return Ok(());
            }
            let written = export_stage3_prompts(&samples, &used, &ctx.templates, &out)?;
            println!("{stage}: {written} records");
        }
    }
    ctx.wrote(out);
    ctx.write_json(ctx.file(DATASETS_DIR, &format!("recipe_stage{n}.json")), &export_training_recipe(stage))
}

pub fn infer(ctx: &mut Context, frames: &Option<PathBuf>) -> Result<(), CliError> {
    let path = ctx.input(frames, &ctx.config.corpus.frames.clone(), "frames file")?;
    let seed = ctx.seed()?;
    let frames = read_frames(&path, false)?;
    let (corpus, kb) = load_kb(ctx)?;
    let bundles = bundles_for(ctx, &corpus, &kb, &path, &frames)?;
    let role = &ctx.config.gateway.policy;
    let want_logprobs = ctx.config.evaluation.score_rule == ScoreRule::Logprob;
    let requests = frames
        .iter()
        .zip(&bundles)
        .map(|((line, f), b)| {
            let slots = BTreeMap::from([
                ("image_ref".to_string(), f.image_ref.clone()),
                ("evidence_block".to_string(), format_evidence_block(b).text),
            ]);
            let prompt = ctx.templates.render(INFER_TEMPLATE, &slots).map_err(|e| at(&path, *line, &f.sample_id, e))?;
            let params = DecodingParams {
                temperature: role.temperature,
                max_tokens: role.max_tokens,
                want_logprobs,
                seed: Some(seed),
            };
            Ok(ChatRequest::from_prompt(&role.model_id, prompt, Some(ImageRef::new(&f.image_ref)), params))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    if ctx.dry_run {
        return Ok(());
    }
    let gateway = ctx.gateway(role)?;
    let replies = gateway.complete_batch(&requests);

    let mut rollouts = Vec::new();
    let mut parsed = Vec::new();
    let mut scores = Vec::new();
    let mut robustness = Vec::new();
    for (((_, f), b), reply) in frames.iter().zip(&bundles).zip(replies) {
        let reply = reply.map_err(|e| CliError::from(e).context(format!("inference for {}", f.sample_id)))?;
        let response = parse_fcot(&reply.text, ctx.parse_mode());
        parsed.push(ResponseSummary::new(&f.sample_id, &response));
        let Some(truth) = f.label else { continue };
        let logprobs = match ctx.config.evaluation.score_rule {
            ScoreRule::Logprob => reply.token_logprobs.as_deref(),
            ScoreRule::Hard => None,
        };
        scores.push(FrameScore {
            video_id: f.video_id.clone(),
            frame_id: f.frame_id.clone(),
            score: answer_to_score(&response, logprobs),
            ground_truth: truth,
        });
        robustness.push(RobustnessRecord {
            sample_id: f.sample_id.clone(),
            s1_correct: response.s1_pred == Some(truth),
            rag_correct: b.majority_label == truth,
            final_correct: response.answer == Some(truth),
        });
        rollouts.push(RolloutRecord {
            sample_id: f.sample_id.clone(),
            video_id: f.video_id.clone(),
            frame_id: f.frame_id.clone(),
            image_ref: f.image_ref.clone(),
            text: reply.text,
            ground_truth: truth,
            rag_majority: b.majority_label,
            group: None,
            token_logprobs: reply.token_logprobs,
        });
    }
    let valid = parsed.iter().filter(|p| p.format_valid).count();
    let correct = robustness.iter().filter(|r| r.final_correct).count();
    println!(
        "{} responses, {valid} well formed, {correct} of {} labelled frames answered correctly",
        parsed.len(),
        robustness.len()
    );
    ctx.write_jsonl(ctx.file(ROLLOUTS_DIR, RESPONSES_FILE), &rollouts)?;
    ctx.write_jsonl(ctx.file(ROLLOUTS_DIR, PARSED_FILE), &parsed)?;
    ctx.write_jsonl(ctx.file(ROLLOUTS_DIR, SCORES_FILE), &scores)?;
    ctx.write_jsonl(ctx.file(ROLLOUTS_DIR, ROBUSTNESS_FILE), &robustness)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    pub rollouts: usize,
    pub batch_mean: f64,
    pub groups: usize,
    pub epsilon: f64,
}

pub fn score_rewards(ctx: &mut Context, rollouts: &Option<PathBuf>) -> Result<(), CliError> {
    let default = Some(ctx.config.corpus.rollouts.clone().unwrap_or_else(|| ctx.file(ROLLOUTS_DIR, RESPONSES_FILE)));
    let path = ctx.input(rollouts, &default, "rollouts file")?;
    let rows: Vec<(usize, RolloutRecord)> = read_numbered(&path)?;
    let cfg = ctx.config.reward;
    let records: Vec<_> = rows
        .iter()
        .map(|(_, r)| {
            score_response(&parse_fcot(&r.text, ParseMode::Strict), r.ground_truth, r.rag_majority, &cfg.config)
        })
        .collect();

    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (_, r)) in rows.iter().enumerate() {
        if let Some(g) = &r.group {
            groups.entry(g).or_default().push(i);
        }
    }
    let mut advantages = vec![None; rows.len()];
    let mut normalized = 0;
    for (group, members) in &groups {
        if members.len() < 2 {
            log::warn!("group {group} has a single rollout; no advantage computed");
            continue;
        }
        let rewards: Vec<f64> = members.iter().map(|&i| records[i].r_i).collect();
        let adv = group_advantages(&rewards, cfg.epsilon).map_err(|e| {
            let (line, r) = &rows[members[0]];
            at(&path, *line, &r.sample_id, e)
        })?;
        for (&i, a) in members.iter().zip(adv.advantages) {
            advantages[i] = Some(a);
        }
        normalized += 1;
    }
    let batch_mean = batch_reward(&records)?;
    if ctx.dry_run {
        return Ok(());
    }
    let dump: Vec<RewardDumpRecord> = rows
        .iter()
        .zip(&records)
        .zip(advantages)
        .map(|(((_, r), rec), adv)| RewardDumpRecord::new(&r.sample_id, rec, adv))
        .collect();
    println!("{} rollouts, mean reward {batch_mean:.6}, {normalized} groups normalized", dump.len());
    ctx.write_jsonl(ctx.file(ROLLOUTS_DIR, REWARDS_FILE), &dump)?;
    let report = RewardReport { rollouts: dump.len(), batch_mean, groups: normalized, epsilon: cfg.epsilon };
    ctx.write_json(ctx.file(REPORTS_DIR, "rewards.json"), &report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSection {
    pub gflops: BTreeMap<String, f64>,
    pub ratios: BTreeMap<String, Decimal2>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeSummary {
    pub model: String,
    pub scored: usize,
    pub missing: usize,
    pub mean_total: Option<Decimal2>,
}

/// Everything `eval` computes; `report` renders it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub dataset: String,
    pub method: String,
    pub score_rule: ScoreRule,
    pub aggregation: Aggregation,
    pub frames: usize,
    pub videos: usize,
    pub auc: f64,
    pub auc_rounded: Decimal2,
    pub auc_ratio: AucRatio,
    pub robustness_records: usize,
    pub robustness: Option<RobustnessResult>,
    pub cost: Option<CostSection>,
    pub judges: Vec<JudgeSummary>,
    pub judge_average: Option<Decimal2>,
}

fn safe_name(model: &str) -> String {
    model.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

fn run_judges(ctx: &mut Context, responses: &Path, seed: u64) -> Result<Vec<JudgeSummary>, CliError> {
    let rows: Vec<(usize, RolloutRecord)> = read_numbered(responses)?;
    let samples: Vec<JudgeSample> = rows
        .into_iter()
        .map(|(_, r)| JudgeSample {
            sample_id: r.sample_id,
            explanation: r.text,
            image_ref: r.image_ref,
            ground_truth: r.ground_truth,
        })
        .collect();
    let role = ctx.config.gateway.judge.clone();
    let gateway = ctx.gateway(&role)?;
    let mut summaries = Vec::new();
    for model in ctx.config.evaluation.judge_models.clone() {
        let cfg = JudgeConfig {
            model_id: model.clone(),
            temperature: role.temperature,
            max_tokens: role.max_tokens,
            parallelism: role.parallelism,
            seed,
            ..JudgeConfig::default()
        };
        let run = judge_explanations(&gateway, &samples, &ctx.templates, &cfg)?;
        ctx.write_jsonl(ctx.file(ROLLOUTS_DIR, &format!("judge_{}.jsonl", safe_name(&model))), &run.scores)?;
        summaries.push(JudgeSummary {
            model,
            scored: run.scores.len(),
            missing: run.missing.len(),
            mean_total: run.mean_total,
        });
    }
    Ok(summaries)
}

pub fn eval(
    ctx: &mut Context,
    scores: &Option<PathBuf>,
    records: &Option<PathBuf>,
    responses: &Option<PathBuf>,
) -> Result<(), CliError> {
    let scores_path = ctx.input(scores, &Some(ctx.file(ROLLOUTS_DIR, SCORES_FILE)), "scores file")?;
    let frames: Vec<FrameScore> = read_numbered(&scores_path)?.into_iter().map(|(_, s)| s).collect();
    let aggregation = ctx.config.evaluation.aggregation;
    let auc = video_level_auc(&frames, aggregation)?;
    let videos = video_scores(&frames, aggregation)?;
    let ratio = auc_rank(&videos)?;
    let auc_rounded = Decimal2::from_hundredths(ratio_hundredths(ratio.twice_wins * 100, 2 * ratio.pairs) as u64);

    let records_path = records.clone().unwrap_or_else(|| ctx.file(ROLLOUTS_DIR, ROBUSTNESS_FILE));
    let (robustness_records, robustness) = if records_path.exists() {
        let recs: Vec<RobustnessRecord> = read_numbered(&records_path)?.into_iter().map(|(_, r)| r).collect();
        match robustness_rate(&recs) {
            Ok(r) => (recs.len(), Some(r)),
            Err(EvalError::NoAdversarialSamples) => (recs.len(), None),
            Err(e) => return Err(e.into()),
        }
    } else if records.is_some() {
        return Err(CliError::Validation(format!("records file {} does not exist", records_path.display())));
    } else {
        (0, None)
    };

    let cost = if ctx.config.evaluation.cost_gflops.is_empty() {
        None
    } else {
        let profile = CostProfile::new(ctx.config.evaluation.cost_gflops.clone());
        Some(CostSection { ratios: cost_ratio(&profile)?, gflops: profile.components })
    };

    let responses_path = responses.clone().unwrap_or_else(|| ctx.file(ROLLOUTS_DIR, RESPONSES_FILE));
    let want_judges = !ctx.config.evaluation.judge_models.is_empty();
    if want_judges {
        require(&responses_path, "responses file")?;
    }
    if ctx.dry_run {
        return Ok(());
    }
    let judges = if want_judges { run_judges(ctx, &responses_path, ctx.seed()?)? } else { Vec::new() };
    let means: Vec<Decimal2> = judges.iter().filter_map(|j| j.mean_total).collect();

    let metrics = Metrics {
        dataset: dataset_name(ctx),
        method: ctx.config.evaluation.method_name.clone(),
        score_rule: ctx.config.evaluation.score_rule,
        aggregation,
        frames: frames.len(),
        videos: videos.len(),
        auc,
        auc_rounded,
        auc_ratio: ratio,
        robustness_records,
        robustness,
        cost,
        judge_average: cross_judge_average(&means),
        judges,
    };
    ctx.write_json(ctx.file(REPORTS_DIR, METRICS_FILE), &metrics)?;
    write_report(ctx, &metrics)
}

fn dataset_name(ctx: &Context) -> String {
    let name = ctx.config.corpus.dataset_name.trim();
    if name.is_empty() {
        "Eval".into()
    } else {
        name.to_string()
    }
}

/// Plain-text tables for a metrics record.
pub fn render_report(m: &Metrics) -> String {
    let rule = match m.score_rule {
        ScoreRule::Logprob => "logprob",
        ScoreRule::Hard => "hard",
    };
    let agg = match m.aggregation {
        Aggregation::Mean => "mean",
        Aggregation::Median => "median",
        Aggregation::Max => "max",
    };
    let mut out =
        format!("Video-level AUC ({} videos, {} frames; aggregation {agg}, score rule {rule})\n", m.videos, m.frames);
    out.push_str(&render_auc_table(&m.method, &[(m.dataset.clone(), m.auc)]));
    out.push_str(&format!("AUC {}: {}\n\n", m.dataset, m.auc_rounded));

    out.push_str("Robustness under misleading evidence\n");
    match &m.robustness {
        Some(r) => out.push_str(&render_robustness_table(&[(m.dataset.clone(), *r)], Some(r))),
        None => out.push_str(&format!(
            "no adversarial samples among {} records (preliminary judgment correct, evidence majority wrong)\n",
            m.robustness_records
        )),
    }

    if let Some(cost) = &m.cost {
        out.push_str("\nComputational cost per sample\n");
        let profile = CostProfile::new(cost.gflops.clone());
        out.push_str(&render_cost_table(&profile, &cost.ratios));
    }

    if !m.judges.is_empty() {
        out.push_str("\nExplanation quality (judge totals out of 9)\n");
        let names: Vec<String> = m.judges.iter().map(|j| j.model.clone()).collect();
        let row = (m.method.clone(), m.judges.iter().map(|j| j.mean_total).collect());
        out.push_str(&render_judge_table(&names, &[row]));
        let missing: usize = m.judges.iter().map(|j| j.missing).sum();
        if missing > 0 {
            out.push_str(&format!("{missing} judge outputs were unusable and left out\n"));
        }
    }
    out
}

fn write_report(ctx: &mut Context, metrics: &Metrics) -> Result<(), CliError> {
    let text = render_report(metrics);
    print!("{text}");
    let path = ctx.file(REPORTS_DIR, REPORT_FILE);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, text)?;
    ctx.wrote(path);
    Ok(())
}

pub fn report(ctx: &mut Context) -> Result<(), CliError> {
    let metrics: Metrics = read_json(&ctx.file(REPORTS_DIR, METRICS_FILE), "eval")?;
    if ctx.dry_run {
        return Ok(());
    }
    write_report(ctx, &metrics)
}
