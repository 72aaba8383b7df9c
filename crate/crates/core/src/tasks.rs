//! Downstream tasks at desk scale: 3-way visual entailment, two-image
//! true/false judgment, and referring-expression resolution by per-candidate
//! crop scoring, plus the Words-as-Classifiers baseline and evaluation.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{Tape, VarId};
use crate::data::render::{crop_resize, PixelBox};
use crate::error::{EssenError, Result};
use crate::model::VlModel;
use crate::params::{bind, StoreBinding};
use crate::pretrain::{HeadKind, Heads, LossRow, TrainState};
use crate::tensor::{Scalar, Tensor};
use crate::text::{basic_tokens, tokenize, TokenSequence, Vocabulary};
use crate::vision::ImageTensor;

// ---------------------------------------------------------------------------
// raw task examples (as read from a manifest, images loaded)

#[derive(Debug, Clone)]
pub struct EntailExample {
    pub image: ImageTensor,
    pub hypothesis: String,
    pub label: usize, // 0 entail, 1 neutral, 2 contradict
}

#[derive(Debug, Clone)]
pub struct PairJudgeExample {
    pub image_a: ImageTensor,
    pub image_b: ImageTensor,
    pub statement: String,
    pub label: bool,
}

#[derive(Debug, Clone)]
pub struct RefResExample {
    pub image: ImageTensor,
    pub candidates: Vec<PixelBox>,
    pub expression: String,
    pub gold: usize,
}

// ---------------------------------------------------------------------------
// prepared (tokenized, cropped) examples ready for the model

#[derive(Debug, Clone)]
pub struct PreparedEntail {
    pub tokens: TokenSequence,
    pub image: ImageTensor,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub tokens: TokenSequence,
    pub image_a: ImageTensor,
    pub image_b: ImageTensor,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct PreparedRefRes {
    pub tokens: TokenSequence,
    pub crops: Vec<ImageTensor>,
    pub gold: usize,
}

#[derive(Debug, Clone)]
pub enum TaskData {
    Entail(Vec<PreparedEntail>),
    PairJudge(Vec<PreparedPair>),
    RefRes(Vec<PreparedRefRes>),
}

impl TaskData {
    pub fn len(&self) -> usize {
        match self {
            TaskData::Entail(v) => v.len(),
            TaskData::PairJudge(v) => v.len(),
            TaskData::RefRes(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn head_kind(&self) -> HeadKind {
        match self {
            TaskData::Entail(_) => HeadKind::Entail,
            TaskData::PairJudge(_) => HeadKind::PairJudge,
            TaskData::RefRes(_) => HeadKind::RefRes,
        }
    }
}

pub fn prepare_entail(
    examples: &[EntailExample],
    vocab: &Vocabulary,
    max_len: usize,
) -> Vec<PreparedEntail> {
    examples
        .iter()
        .map(|e| PreparedEntail {
            tokens: tokenize(&e.hypothesis, vocab, max_len),
            image: e.image.clone(),
            label: e.label,
        })
        .collect()
}

pub fn prepare_pairjudge(
    examples: &[PairJudgeExample],
    vocab: &Vocabulary,
    max_len: usize,
) -> Vec<PreparedPair> {
    examples
        .iter()
        .map(|e| PreparedPair {
            tokens: tokenize(&e.statement, vocab, max_len),
            image_a: e.image_a.clone(),
            image_b: e.image_b.clone(),
            label: e.label as usize,
        })
        .collect()
}

/// Crops every candidate box and bilinear-resizes it to the model's image
/// input size.
pub fn prepare_refres(
    examples: &[RefResExample],
    vocab: &Vocabulary,
    max_len: usize,
    image_size: usize,
) -> Result<Vec<PreparedRefRes>> {
    examples
        .iter()
        .map(|e| {
            if e.candidates.len() < 2 {
                return Err(EssenError::DataGen(
                    "reference resolution needs at least 2 candidates".into(),
                ));
            }
            let crops = e
                .candidates
                .iter()
                .map(|&b| crop_resize(&e.image, b, image_size))
                .collect::<Result<Vec<_>>>()?;
            Ok(PreparedRefRes {
                tokens: tokenize(&e.expression, vocab, max_len),
                crops,
                gold: e.gold,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// task forwards

/// Pooled vector -> 3-way affine head.
pub fn entail_logits<T: Scalar>(
    tape: &mut Tape<T>,
    model: &VlModel<T>,
    mb: StoreBinding,
    heads: &Heads<T>,
    hb: StoreBinding,
    item: &PreparedEntail,
) -> Result<VarId> {
    let fused = model.forward(tape, mb, &item.tokens, &item.image)?;
    let head = heads.task.as_ref().expect("entail head");
    Ok(head.forward(tape, hb, fused.pooled))
}

/// The model runs on (image_a, statement) and (image_b, statement); the two
/// pooled vectors concatenate into a 2d vector feeding the 2-way head, so
/// the head is order-sensitive by construction.
pub fn pairjudge_logits<T: Scalar>(
    tape: &mut Tape<T>,
    model: &VlModel<T>,
    mb: StoreBinding,
    heads: &Heads<T>,
    hb: StoreBinding,
    item: &PreparedPair,
) -> Result<VarId> {
    let fused_a = model.forward(tape, mb, &item.tokens, &item.image_a)?;
    let fused_b = model.forward(tape, mb, &item.tokens, &item.image_b)?;
    let both = tape.concat_cols(vec![fused_a.pooled, fused_b.pooled]);
    let head = heads.task.as_ref().expect("pairjudge head");
    Ok(head.forward(tape, hb, both))
}

/// Each candidate crop is scored by the scalar head on (crop, expression);
/// the scores form one (1, K) logit row softmaxed over candidates.
pub fn refres_logits<T: Scalar>(
    tape: &mut Tape<T>,
    model: &VlModel<T>,
    mb: StoreBinding,
    heads: &Heads<T>,
    hb: StoreBinding,
    item: &PreparedRefRes,
) -> Result<VarId> {
    let head = heads.task.as_ref().expect("refres head");
    let mut scores = Vec::with_capacity(item.crops.len());
    for crop in &item.crops {
        let fused = model.forward(tape, mb, &item.tokens, crop)?;
        scores.push(head.forward(tape, hb, fused.pooled));
    }
    Ok(tape.concat_cols(scores))
}

/// Candidate probabilities for one refres example (softmax over the score
/// row) on a throwaway tape.
pub fn refres_scores<T: Scalar>(
    model: &VlModel<T>,
    heads: &Heads<T>,
    item: &PreparedRefRes,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mb = bind(&mut tape, &model.store);
    let hb = bind(&mut tape, &heads.store);
    let logits = refres_logits(&mut tape, model, mb, heads, hb, item)?;
    let probs = tape.masked_softmax(logits, None);
    let row = tape.value(probs).row(0);
    Ok(row.iter().map(|&x| crate::tensor::Scalar::to_f64(x)).collect())
}

enum TaskItemRef<'a> {
    Entail(&'a PreparedEntail),
    PairJudge(&'a PreparedPair),
    RefRes(&'a PreparedRefRes),
}

fn item_logits_and_target<T: Scalar>(
    tape: &mut Tape<T>,
    model: &VlModel<T>,
    mb: StoreBinding,
    heads: &Heads<T>,
    hb: StoreBinding,
    item: &TaskItemRef<'_>,
) -> Result<(VarId, usize)> {
    match item {
        TaskItemRef::Entail(e) => Ok((entail_logits(tape, model, mb, heads, hb, e)?, e.label)),
        TaskItemRef::PairJudge(e) => {
            Ok((pairjudge_logits(tape, model, mb, heads, hb, e)?, e.label))
        }
        TaskItemRef::RefRes(e) => Ok((refres_logits(tape, model, mb, heads, hb, e)?, e.gold)),
    }
}

fn data_item(data: &TaskData, idx: usize) -> TaskItemRef<'_> {
    match data {
        TaskData::Entail(v) => TaskItemRef::Entail(&v[idx]),
        TaskData::PairJudge(v) => TaskItemRef::PairJudge(&v[idx]),
        TaskData::RefRes(v) => TaskItemRef::RefRes(&v[idx]),
    }
}

/// Argmax with ties resolved to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// "gold->pred" -> count
    pub confusion: BTreeMap<String, usize>,
    /// Mean candidate count (refres only): chance level is 1/mean.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_candidates: Option<f64>,
}

/// Accuracy + confusion counts over a dataset against a frozen model.
/// Iteration order is by example index regardless of worker count.
pub fn evaluate(model: &VlModel<f32>, heads: &Heads<f32>, data: &TaskData) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(EssenError::EmptyDataset("evaluate on empty dataset".into()));
    }
    let preds: Vec<Result<(usize, usize)>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let mut tape = Tape::new();
            let mb = bind(&mut tape, &model.store);
            let hb = bind(&mut tape, &heads.store);
            let item = data_item(data, i);
            let (logits, target) = item_logits_and_target(&mut tape, model, mb, heads, hb, &item)?;
            Ok((argmax(tape.value(logits).row(0)), target))
        })
        .collect();

    let mut correct = 0;
    let mut confusion: BTreeMap<String, usize> = BTreeMap::new();
    for p in &preds {
        let (pred, gold) = *p.as_ref().map_err(|e| clone_err(e))?;
        if pred == gold {
            correct += 1;
        }
        *confusion.entry(format!("{gold}->{pred}")).or_insert(0) += 1;
    }
    let mean_candidates = match data {
        TaskData::RefRes(v) => {
            Some(v.iter().map(|e| e.crops.len() as f64).sum::<f64>() / v.len() as f64)
        }
        _ => None,
    };
    Ok(EvalReport {
        accuracy: correct as f64 / data.len() as f64,
        correct,
        total: data.len(),
        confusion,
        mean_candidates,
    })
}

fn clone_err(e: &EssenError) -> EssenError {
    EssenError::DataGen(format!("evaluation failed: {e}"))
}

/// One fine-tuning optimizer step over the given example indices.
/// All weights train (model and head).
pub fn finetune_step(state: &mut TrainState, data: &TaskData, indices: &[usize]) -> Result<LossRow> {
    assert_eq!(state.heads.kind, data.head_kind(), "head kind mismatch");
    let started = std::time::Instant::now();
    let n = indices.len();
    assert!(n > 0, "empty finetune batch");
    let w = (1.0 / n as f64) as f32;

    let model = &state.model;
    let heads = &state.heads;
    let per_item: Vec<Result<(Vec<Option<Tensor<f32>>>, f64)>> = indices
        .par_iter()
        .map(|&idx| {
            let mut tape = Tape::new();
            let mb = bind(&mut tape, &model.store);
            let hb = bind(&mut tape, &heads.store);
            let item = data_item(data, idx);
            let (logits, target) = item_logits_and_target(&mut tape, model, mb, heads, hb, &item)?;
            let loss = tape.cross_entropy_mean(logits, vec![target]);
            let weighted = tape.scale(loss, w);
            if !tape.value(weighted).is_finite() {
                let (node, name) = tape
                    .first_non_finite()
                    .unwrap_or((weighted, "task_loss".into()));
                return Err(EssenError::NonFinite { tensor: name, node });
            }
            let mut grads = tape.backward(weighted);
            grads.truncate(model.store.len() + heads.store.len());
            Ok((grads, tape.value(loss).item() as f64))
        })
        .collect();

    let total_params = state.model.store.len() + state.heads.store.len();
    let mut grad_acc: Vec<Tensor<f32>> = state
        .model
        .store
        .entries()
        .iter()
        .chain(state.heads.store.entries())
        .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
        .collect();
    let mut loss_sum = 0.0;
    for item in per_item {
        let (grads, loss) = item?;
        for (i, g) in grads.into_iter().enumerate().take(total_params) {
            if let Some(g) = g {
                grad_acc[i].add_assign(&g);
            }
        }
        loss_sum += loss;
    }

    crate::pretrain::apply_adam(state, &mut grad_acc);
    state.step += 1;
    let mean = loss_sum / n as f64;
    let row = LossRow {
        step: state.step,
        mlm: 0.0,
        itm: 0.0,
        total: mean,
        wall_ms: started.elapsed().as_millis() as u64,
    };
    state.loss_history.push(row);
    Ok(row)
}

/// Full-model fine-tuning with periodic dev evaluation. The metric trace
/// starts with the zero-shot evaluation and then holds one entry per
/// `eval_interval` steps: trace length = floor(steps / eval_interval) + 1.
pub fn finetune_loop(
    state: &mut TrainState,
    train: &TaskData,
    dev: &TaskData,
    steps: usize,
    batch_size: usize,
    eval_interval: usize,
) -> Result<Vec<(usize, f64)>> {
    if train.is_empty() {
        return Err(EssenError::EmptyDataset("finetune train split".into()));
    }
    let interval = eval_interval.max(1);
    let mut trace = Vec::new();
    trace.push((state.step, evaluate(&state.model, &state.heads, dev)?.accuracy));
    for s in 1..=steps {
        let indices: Vec<usize> = (0..batch_size)
            .map(|_| state.rng.gen_range(0..train.len()))
            .collect();
        finetune_step(state, train, &indices)?;
        if s % interval == 0 {
            trace.push((state.step, evaluate(&state.model, &state.heads, dev)?.accuracy));
        }
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Words-as-Classifiers baseline

pub const WAC_FEATURES: usize = 8;

/// Hand-crafted crop features: mean RGB over the box region, normalized box
/// center, normalized width/height, aspect ratio.
pub fn wac_features(image: &ImageTensor, bbox: PixelBox) -> [f64; WAC_FEATURES] {
    let (x0, y0, x1, y1) = bbox;
    let s = image.size() as f64;
    let mut mean = [0.0f64; 3];
    let mut count = 0.0f64;
    for y in y0..y1 {
        for x in x0..x1 {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += image.get(c, y, x) as f64;
            }
            count += 1.0;
        }
    }
    for m in mean.iter_mut() {
        *m /= count.max(1.0);
    }
    let w = (x1 - x0) as f64;
    let h = (y1 - y0) as f64;
    [
        mean[0],
        mean[1],
        mean[2],
        (x0 as f64 + w / 2.0) / s,
        (y0 as f64 + h / 2.0) / s,
        w / s,
        h / s,
        w / h,
    ]
}

/// Per-word logistic classifiers over crop features.
#[derive(Debug, Clone, Serialize)]
pub struct WacModel {
    pub classifiers: BTreeMap<String, Vec<f64>>, // weights, last entry = bias
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const WAC_ITERS: usize = 300;
const WAC_LR: f64 = 0.5;

/// Trains one logistic regressor per expression word: positives are gold
/// crops of expressions containing the word, negatives the other candidates
/// of those expressions. Full-batch gradient descent, deterministic.
pub fn wac_train(examples: &[RefResExample]) -> Result<WacModel> {
    if examples.is_empty() {
        return Err(EssenError::EmptyDataset("wac training set".into()));
    }
    let mut per_word: BTreeMap<String, Vec<([f64; WAC_FEATURES], f64)>> = BTreeMap::new();
    for ex in examples {
        let feats: Vec<[f64; WAC_FEATURES]> = ex
            .candidates
            .iter()
            .map(|&b| wac_features(&ex.image, b))
            .collect();
        for word in basic_tokens(&ex.expression) {
            let rows = per_word.entry(word).or_default();
            for (i, f) in feats.iter().enumerate() {
                rows.push((*f, if i == ex.gold { 1.0 } else { 0.0 }));
            }
        }
    }

    let mut classifiers = BTreeMap::new();
    for (word, rows) in per_word {
        if !rows.iter().any(|(_, y)| *y > 0.5) {
            continue; // no positives: classifier omitted, scoring falls back to 0.5
        }
        let n = rows.len() as f64;
        let mut w = vec![0.0f64; WAC_FEATURES + 1];
        for _ in 0..WAC_ITERS {
            let mut grad = vec![0.0f64; WAC_FEATURES + 1];
            for (x, y) in &rows {
                let mut z = w[WAC_FEATURES];
                for (wi, xi) in w.iter().zip(x.iter()) {
                    z += wi * xi;
                }
                let err = sigmoid(z) - y;
                for (g, xi) in grad.iter_mut().zip(x.iter()) {
                    *g += err * xi;
                }
                grad[WAC_FEATURES] += err;
            }
            for (wi, g) in w.iter_mut().zip(grad.iter()) {
                *wi -= WAC_LR * g / n;
            }
        }
        classifiers.insert(word, w);
    }
    Ok(WacModel { classifiers })
}

/// Per-candidate probabilities: mean of the expression words' classifier
/// outputs (0.5 for words without a classifier), softmax-normalized.
pub fn wac_score(model: &WacModel, example: &RefResExample) -> Vec<f64> {
    let words = basic_tokens(&example.expression);
    let mut raw: Vec<f64> = example
        .candidates
        .iter()
        .map(|&b| {
            let x = wac_features(&example.image, b);
            if words.is_empty() {
                return 0.5;
            }
            let total: f64 = words
                .iter()
                .map(|word| match model.classifiers.get(word) {
                    Some(w) => {
                        let mut z = w[WAC_FEATURES];
                        for (wi, xi) in w.iter().zip(x.iter()) {
                            z += wi * xi;
                        }
                        sigmoid(z)
                    }
                    None => 0.5,
                })
                .sum();
            total / words.len() as f64
        })
        .collect();

    // softmax over candidate scores
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for r in raw.iter_mut() {
        *r = (*r - max).exp();
        sum += *r;
    }
    for r in raw.iter_mut() {
        *r /= sum;
    }
    raw
}

pub fn wac_evaluate(model: &WacModel, examples: &[RefResExample]) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(EssenError::EmptyDataset("wac evaluation set".into()));
    }
    let mut correct = 0;
    let mut confusion: BTreeMap<String, usize> = BTreeMap::new();
    for ex in examples {
        let scores = wac_score(model, ex);
        let pred = {
            let mut best = 0;
            for (i, &x) in scores.iter().enumerate().skip(1) {
                if x > scores[best] {
                    best = i;
                }
            }
            best
        };
        if pred == ex.gold {
            correct += 1;
        }
        *confusion.entry(format!("{}->{}", ex.gold, pred)).or_insert(0) += 1;
    }
    let mean_candidates =
        examples.iter().map(|e| e.candidates.len() as f64).sum::<f64>() / examples.len() as f64;
    Ok(EvalReport {
        accuracy: correct as f64 / examples.len() as f64,
        correct,
        total: examples.len(),
        confusion,
        mean_candidates: Some(mean_candidates),
    })
}
