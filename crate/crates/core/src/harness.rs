//! Dataset loading and end-to-end pipelines (pretrain, fine-tune, evaluate,
//! sweep) shared by the command-line tool and the acceptance suite.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde_json::Value;

use crate::config::{sweep_grid, ModelConfig, SweepAxis};
use crate::data::manifest::{read_manifest, ManifestRecord, Split};
use crate::data::render::{crop_resize, load_ppm};
use crate::error::{EssenError, Result};
use crate::pretrain::{
    mask_batch, sample_itm_pairs, save_checkpoint, train_step, HeadKind, LossRow, MaskingPolicy,
    OptimizerConfig, TrainState,
};
use crate::tasks::{
    evaluate, finetune_loop, prepare_entail, prepare_pairjudge, prepare_refres, EntailExample,
    EvalReport, PairJudgeExample, RefResExample, TaskData,
};
use crate::text::{tokenize, TokenSequence, Vocabulary};
use crate::vision::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskName {
    Entail,
    PairJudge,
    RefRes,
}

impl TaskName {
    pub const ALL: [TaskName; 3] = [TaskName::Entail, TaskName::PairJudge, TaskName::RefRes];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskName::Entail => "entail",
            TaskName::PairJudge => "pairjudge",
            TaskName::RefRes => "refres",
        }
    }

    pub fn head_kind(self) -> HeadKind {
        match self {
            TaskName::Entail => HeadKind::Entail,
            TaskName::PairJudge => HeadKind::PairJudge,
            TaskName::RefRes => HeadKind::RefRes,
        }
    }
}

impl std::str::FromStr for TaskName {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "entail" => Ok(Self::Entail),
            "pairjudge" => Ok(Self::PairJudge),
            "refres" => Ok(Self::RefRes),
            other => Err(format!("unknown task `{other}` (entail|pairjudge|refres)")),
        }
    }
}

pub fn load_vocab(data_dir: &Path) -> Result<Vocabulary> {
    Vocabulary::load(&data_dir.join("vocab.txt"))
}

fn load_image(data_dir: &Path, rel: &str) -> Result<ImageTensor> {
    load_ppm(&data_dir.join(rel))
}

/// Bilinear resize at ingestion when the stored canvas and the model's
/// image size differ.
pub fn ingest_image(img: ImageTensor, target: usize) -> Result<ImageTensor> {
    if img.size() == target {
        Ok(img)
    } else {
        let s = img.size();
        crop_resize(&img, (0, 0, s, s), target)
    }
}

#[derive(Debug, Clone)]
pub struct RawPair {
    pub text: String,
    pub image: ImageTensor,
}

#[derive(Debug, Clone)]
pub enum RawTaskData {
    Entail(Vec<EntailExample>),
    PairJudge(Vec<PairJudgeExample>),
    RefRes(Vec<RefResExample>),
}

impl RawTaskData {
    pub fn len(&self) -> usize {
        match self {
            RawTaskData::Entail(v) => v.len(),
            RawTaskData::PairJudge(v) => v.len(),
            RawTaskData::RefRes(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn manifest_path(data_dir: &Path, task: &str, split: Split) -> std::path::PathBuf {
    data_dir.join(format!("{task}.{}.jsonl", split.as_str()))
}

pub fn load_pretrain_pairs(data_dir: &Path, split: Split) -> Result<Vec<RawPair>> {
    let records = read_manifest(&manifest_path(data_dir, "pretrain", split))?;
    records
        .into_iter()
        .map(|r| {
            let image = load_image(data_dir, r.image.as_deref().unwrap())?;
            Ok(RawPair {
                text: r.text,
                image,
            })
        })
        .collect()
}

fn label_str(rec: &ManifestRecord) -> Result<&str> {
    rec.label
        .as_ref()
        .and_then(Value::as_str)
        .ok_or_else(|| EssenError::DataGen(format!("record {} has non-string label", rec.id)))
}

pub fn load_task(data_dir: &Path, task: TaskName, split: Split) -> Result<RawTaskData> {
    let records = read_manifest(&manifest_path(data_dir, task.as_str(), split))?;
    match task {
        TaskName::Entail => {
            let examples = records
                .into_iter()
                .map(|r| {
                    let label = match label_str(&r)? {
                        "entail" => 0,
                        "neutral" => 1,
                        "contradict" => 2,
                        other => {
                            return Err(EssenError::DataGen(format!(
                                "record {}: unknown entail label `{other}`",
                                r.id
                            )))
                        }
                    };
                    Ok(EntailExample {
                        image: load_image(data_dir, r.image.as_deref().unwrap())?,
                        hypothesis: r.text,
                        label,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(RawTaskData::Entail(examples))
        }
        TaskName::PairJudge => {
            let examples = records
                .into_iter()
                .map(|r| {
                    let label = r.label.as_ref().and_then(Value::as_bool).ok_or_else(|| {
                        EssenError::DataGen(format!("record {} has non-bool label", r.id))
                    })?;
                    Ok(PairJudgeExample {
                        image_a: load_image(data_dir, r.image_a.as_deref().unwrap())?,
                        image_b: load_image(data_dir, r.image_b.as_deref().unwrap())?,
                        statement: r.text,
                        label,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(RawTaskData::PairJudge(examples))
        }
        TaskName::RefRes => {
            let examples = records
                .into_iter()
                .map(|r| {
                    let boxes = r.boxes.as_ref().unwrap();
                    Ok(RefResExample {
                        image: load_image(data_dir, r.image.as_deref().unwrap())?,
                        candidates: boxes.iter().map(|b| (b[0], b[1], b[2], b[3])).collect(),
                        expression: r.text,
                        gold: r.gold.unwrap(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(RawTaskData::RefRes(examples))
        }
    }
}

/// Tokenizes, ingests images at the model size, and (for refres) crops the
/// candidate boxes.
pub fn prepare_task(
    raw: &RawTaskData,
    vocab: &Vocabulary,
    max_len: usize,
    image_size: usize,
) -> Result<TaskData> {
    match raw {
        RawTaskData::Entail(v) => {
            let ingested = v
                .iter()
                .map(|e| {
                    Ok(EntailExample {
                        image: ingest_image(e.image.clone(), image_size)?,
                        hypothesis: e.hypothesis.clone(),
                        label: e.label,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TaskData::Entail(prepare_entail(&ingested, vocab, max_len)))
        }
        RawTaskData::PairJudge(v) => {
            let ingested = v
                .iter()
                .map(|e| {
                    Ok(PairJudgeExample {
                        image_a: ingest_image(e.image_a.clone(), image_size)?,
                        image_b: ingest_image(e.image_b.clone(), image_size)?,
                        statement: e.statement.clone(),
                        label: e.label,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TaskData::PairJudge(prepare_pairjudge(&ingested, vocab, max_len)))
        }
        RawTaskData::RefRes(v) => {
            // crops come straight from the stored image; prepare_refres
            // resizes each box to the model input size
            Ok(TaskData::RefRes(prepare_refres(v, vocab, max_len, image_size)?))
        }
    }
}

// ---------------------------------------------------------------------------
// pretraining pipeline

#[derive(Debug, Clone)]
pub struct PretrainRunConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub mismatch_fraction: f64,
    pub masking: MaskingPolicy,
    pub lambda_mlm: f64,
    pub lambda_itm: f64,
    pub opt: OptimizerConfig,
    /// Extra checkpoints every N steps (a final one is always written when
    /// an output directory is given).
    pub ckpt_interval: Option<usize>,
}

impl Default for PretrainRunConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            mismatch_fraction: 0.5,
            masking: MaskingPolicy::default(),
            lambda_mlm: 1.0,
            lambda_itm: 1.0,
            opt: OptimizerConfig::default(),
            ckpt_interval: None,
        }
    }
}

/// Tokenized pretraining pairs at the model's input sizes.
pub struct PreparedPairs {
    pub pairs: Vec<(TokenSequence, ImageTensor)>,
    pub vocab: Vocabulary,
}

pub fn prepare_pretrain_pairs(
    cfg: &ModelConfig,
    data_dir: &Path,
) -> Result<PreparedPairs> {
    let vocab = load_vocab(data_dir)?;
    if vocab.len() != cfg.text.vocab_size {
        return Err(EssenError::Incompatible(format!(
            "config text.vocab_size {} != vocabulary length {} in {}",
            cfg.text.vocab_size,
            vocab.len(),
            data_dir.display()
        )));
    }
    let raw = load_pretrain_pairs(data_dir, Split::Train)?;
    if raw.is_empty() {
        return Err(EssenError::EmptyDataset("pretrain train split".into()));
    }
    let image_size = cfg.vision.image_size();
    let pairs = raw
        .into_iter()
        .map(|p| {
            Ok((
                tokenize(&p.text, &vocab, cfg.text.max_len),
                ingest_image(p.image, image_size)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedPairs { pairs, vocab })
}

/// Runs pretraining steps until `state.step == until_step`, drawing batches
/// from the run RNG (indices, then ITM corruption, then masking).
pub fn pretrain_loop(
    state: &mut TrainState,
    prepared: &PreparedPairs,
    run: &PretrainRunConfig,
    until_step: usize,
    out_dir: Option<&Path>,
) -> Result<Vec<LossRow>> {
    let n = prepared.pairs.len();
    let mut rows = Vec::new();
    while state.step < until_step {
        let indices: Vec<usize> = (0..run.batch_size)
            .map(|_| state.rng.gen_range(0..n))
            .collect();
        let subset: Vec<(TokenSequence, ImageTensor)> = indices
            .iter()
            .map(|&i| prepared.pairs[i].clone())
            .collect();
        let mut batch = sample_itm_pairs(&subset, run.mismatch_fraction, &mut state.rng)?;
        mask_batch(&mut batch, &run.masking, prepared.vocab.len(), &mut state.rng);
        let row = train_step(state, &batch, run.lambda_mlm, run.lambda_itm)?;
        log::debug!(
            "step {} mlm {:.4} itm {:.4} total {:.4}",
            row.step,
            row.mlm,
            row.itm,
            row.total
        );
        if let (Some(dir), Some(interval)) = (out_dir, run.ckpt_interval) {
            if interval > 0 && state.step % interval == 0 && state.step < until_step {
                save_checkpoint(state, &dir.join(format!("ckpt-{:06}.bin", state.step)))?;
            }
        }
        rows.push(row);
    }
    if let Some(dir) = out_dir {
        save_checkpoint(state, &dir.join("ckpt-final.bin"))?;
    }
    Ok(rows)
}

/// Fresh pretraining run: model init from `cfg.seed`, run randomness from
/// `seed`.
pub fn run_pretrain(
    cfg: &ModelConfig,
    data_dir: &Path,
    run: &PretrainRunConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(TrainState, Vec<LossRow>)> {
    let prepared = prepare_pretrain_pairs(cfg, data_dir)?;
    let mut state = TrainState::new(cfg.clone(), HeadKind::Pretrain, run.opt, seed)?;
    let rows = pretrain_loop(&mut state, &prepared, run, run.steps, out_dir)?;
    Ok((state, rows))
}

pub fn write_loss_csv(rows: &[LossRow], path: &Path) -> Result<()> {
    let mut out = String::from("step,mlm_loss,itm_loss,total,wall_ms\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.step, r.mlm, r.itm, r.total, r.wall_ms);
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// fine-tuning pipeline

#[derive(Debug, Clone)]
pub struct FinetuneRunConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub opt: OptimizerConfig,
}

impl Default for FinetuneRunConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            eval_interval: 200,
            opt: OptimizerConfig::default(),
        }
    }
}

/// Full-model fine-tuning from a (usually pretrained) state: fresh
/// zero-initialized task head, fresh optimizer moments, fresh run RNG.
pub fn run_finetune(
    pretrained: TrainState,
    task: TaskName,
    train: &TaskData,
    dev: &TaskData,
    run: &FinetuneRunConfig,
    seed: u64,
) -> Result<(TrainState, Vec<(usize, f64)>)> {
    run.opt.validate()?;
    let model = pretrained.model;
    let heads = crate::pretrain::Heads::new(
        task.head_kind(),
        model.fused_width,
        model.cfg.text.vocab_size,
    );
    let adam = crate::pretrain::AdamState::new(&model.store, &heads.store);
    let mut state = TrainState {
        model,
        heads,
        opt: run.opt,
        adam,
        step: 0,
        rng: rand::SeedableRng::seed_from_u64(seed),
        loss_history: Vec::new(),
    };
    let trace = finetune_loop(&mut state, train, dev, run.steps, run.batch_size, run.eval_interval)?;
    Ok((state, trace))
}

pub fn write_metrics_csv(trace: &[(usize, f64)], split: &str, path: &Path) -> Result<()> {
    let mut out = String::from("step,split,accuracy\n");
    for (step, acc) in trace {
        let _ = writeln!(out, "{step},{split},{acc}");
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep pipeline

#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepCell {
    pub value: String,
    pub arch: String,
    pub fusion: String,
    pub params: u64,
    pub dev_accuracy: BTreeMap<String, f64>,
}

/// Trains every config in the grid identically (same seed, same data, same
/// step budgets) and reports parameter totals plus per-task dev accuracy.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    base: &ModelConfig,
    axis: SweepAxis,
    values: &[String],
    data_dir: &Path,
    pretrain_run: &PretrainRunConfig,
    finetune_run: &FinetuneRunConfig,
    seed: u64,
) -> Result<Vec<SweepCell>> {
    let grid = sweep_grid(base, axis, values)?;
    let mut cells = Vec::with_capacity(grid.len());
    for (cfg, value) in grid.iter().zip(values) {
        log::info!("sweep cell {axis:?}={value}");
        let (state, _) = run_pretrain(cfg, data_dir, pretrain_run, seed, None)?;
        let vocab = load_vocab(data_dir)?;
        let mut dev_accuracy = BTreeMap::new();
        for task in TaskName::ALL {
            let train = prepare_task(
                &load_task(data_dir, task, Split::Train)?,
                &vocab,
                cfg.text.max_len,
                cfg.vision.image_size(),
            )?;
            let dev = prepare_task(
                &load_task(data_dir, task, Split::Dev)?,
                &vocab,
                cfg.text.max_len,
                cfg.vision.image_size(),
            )?;
            let (ft_state, trace) = run_finetune(
                clone_state(&state),
                task,
                &train,
                &dev,
                finetune_run,
                seed,
            )?;
            let final_acc = trace.last().map(|&(_, a)| a).unwrap_or(0.0);
            let _ = ft_state;
            dev_accuracy.insert(task.as_str().to_string(), final_acc);
        }
        let report = crate::model::VlModel::<f32>::new(cfg.clone())?.param_report();
        cells.push(SweepCell {
            value: value.clone(),
            arch: cfg.arch.to_string(),
            fusion: cfg
                .fusion
                .as_ref()
                .map(|f| format!("{}x{} ffn {}", f.layers, f.hidden, f.ffn))
                .unwrap_or_else(|| "-".into()),
            params: report.total,
            dev_accuracy,
        });
    }
    Ok(cells)
}

/// Deep copy of a training state (sweeps fine-tune several heads from one
/// pretrained model).
pub fn clone_state(state: &TrainState) -> TrainState {
    TrainState {
        model: state.model.clone(),
        heads: state.heads.clone(),
        opt: state.opt,
        adam: state.adam.clone(),
        step: state.step,
        rng: state.rng.clone(),
        loss_history: state.loss_history.clone(),
    }
}

pub fn render_sweep_table(axis: SweepAxis, cells: &[SweepCell]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14} {:<10} {:<18} {:>12} {:>8} {:>10} {:>8}",
        format!("{axis:?}"),
        "arch",
        "fusion",
        "params",
        "entail",
        "pairjudge",
        "refres"
    );
    let _ = writeln!(out, "{}", "-".repeat(86));
    for c in cells {
        let acc = |task: &str| {
            c.dev_accuracy
                .get(task)
                .map(|a| format!("{a:.4}"))
                .unwrap_or_else(|| "-".into())
        };
        let _ = writeln!(
            out,
            "{:<14} {:<10} {:<18} {:>12} {:>8} {:>10} {:>8}",
            c.value,
            c.arch,
            c.fusion,
            c.params,
            acc("entail"),
            acc("pairjudge"),
            acc("refres")
        );
    }
    out
}

/// Evaluation summary JSON for one split.
pub fn eval_summary_json(task: TaskName, split: Split, report: &EvalReport) -> Value {
    serde_json::json!({
        "task": task.as_str(),
        "split": split.as_str(),
        "accuracy": report.accuracy,
        "correct": report.correct,
        "total": report.total,
        "confusion": report.confusion,
        "mean_candidates": report.mean_candidates,
        "chance": report.mean_candidates.map(|k| 1.0 / k),
    })
}

/// Builds a small shape-world batch and runs the finite-difference gradient
/// check on it. Token ids come from the base vocabulary (always within any
/// valid config's vocab range).
pub fn grad_check_from_config(
    cfg: &ModelConfig,
    seed: u64,
    samples: usize,
    epsilon: f64,
) -> Result<crate::pretrain::GradCheckReport> {
    use crate::data::{gen_scene, render_ppm};
    use rand::SeedableRng;

    let vocab = Vocabulary::base();
    let image_size = cfg.vision.image_size();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for i in 0..6u64 {
        let scene = gen_scene(seed.wrapping_add(i * 7919), 32, (2, 4))?;
        let caption = crate::data::gen_caption(&scene, &mut rng);
        let (img, _) = render_ppm(&scene)?;
        pairs.push((
            tokenize(&caption, &vocab, cfg.text.max_len),
            ingest_image(img, image_size)?,
        ));
    }
    let mut batch = sample_itm_pairs(&pairs, 0.5, &mut rng)?;
    let masking = MaskingPolicy {
        ratio: 0.35,
        ..Default::default()
    };
    mask_batch(&mut batch, &masking, vocab.len(), &mut rng);
    if batch.items.iter().all(|i| i.mlm_targets.is_empty()) {
        // force at least one MLM target so the text head participates
        if let Some(item) = batch.items.iter_mut().find(|i| i.itm_label == 1) {
            let maskable = crate::pretrain::maskable_positions(&item.tokens);
            if let Some(&pos) = maskable.first() {
                item.mlm_targets.push((pos, item.tokens.ids[pos]));
                item.tokens.ids[pos] = crate::text::MASK_ID;
            }
        }
    }
    crate::pretrain::grad_check(cfg, &batch, epsilon, samples, seed)
}

pub fn evaluate_state(state: &TrainState, data: &TaskData) -> Result<EvalReport> {
    if state.heads.kind != data.head_kind() {
        return Err(EssenError::Incompatible(format!(
            "checkpoint carries {:?} heads but the dataset is {:?}",
            state.heads.kind,
            data.head_kind()
        )));
    }
    evaluate(&state.model, &state.heads, data)
}
