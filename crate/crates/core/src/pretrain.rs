//! Pretraining: masked language modeling + image-text matching, an Adam
//! optimizer with linear warmup, the deterministic training step,
//! checkpointing and finite-difference gradient verification.
//!
//! Determinism contract: batches are prepared sequentially from the run's
//! single RNG; per-example gradients are computed in parallel but reduced
//! in index order, so the loss trajectory is bit-identical regardless of
//! worker count.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, VarId};
use crate::config::ModelConfig;
use crate::error::{EssenError, Result};
use crate::layers::LinearParams;
use crate::model::VlModel;
use crate::params::{bind, ParamStore, StoreBinding};
use crate::tensor::{Scalar, Tensor};
use crate::text::{TokenSequence, CLS_ID, MASK_ID, PAD_ID, SEP_ID, SPECIALS};
use crate::vision::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingPolicy {
    pub ratio: f64,
    pub mask_prob: f64,
    pub random_prob: f64,
    pub keep_prob: f64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        Self {
            ratio: 0.15,
            mask_prob: 0.8,
            random_prob: 0.1,
            keep_prob: 0.1,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        let sum = self.mask_prob + self.random_prob + self.keep_prob;
        if !(0.0..=1.0).contains(&self.ratio) || (sum - 1.0).abs() > 1e-9 {
            return Err(EssenError::DataGen(format!(
                "invalid masking policy: ratio {} split sum {}",
                self.ratio, sum
            )));
        }
        Ok(())
    }
}

/// Positions eligible for masking: real tokens that are not [PAD]/[CLS]/[SEP].
pub fn maskable_positions(tokens: &TokenSequence) -> Vec<usize> {
    tokens
        .ids
        .iter()
        .enumerate()
        .filter(|&(i, &id)| tokens.attn_mask[i] && id != PAD_ID && id != CLS_ID && id != SEP_ID)
        .map(|(i, _)| i)
        .collect()
}

/// Independently selects each maskable position with probability `ratio`;
/// selected positions become [MASK] / a random non-special id / stay put
/// under the policy split. Returns the corrupted sequence and the
/// (position, original id) target map.
pub fn mask_tokens(
    tokens: &TokenSequence,
    policy: &MaskingPolicy,
    vocab_len: usize,
    rng: &mut impl Rng,
) -> (TokenSequence, Vec<(usize, usize)>) {
    let mut corrupted = tokens.clone();
    let mut targets = Vec::new();
    let n_specials = SPECIALS.len();
    for pos in maskable_positions(tokens) {
        if rng.gen::<f64>() >= policy.ratio {
            continue;
        }
        let original = tokens.ids[pos];
        targets.push((pos, original));
        let roll: f64 = rng.gen();
        if roll < policy.mask_prob {
            corrupted.ids[pos] = MASK_ID;
        } else if roll < policy.mask_prob + policy.random_prob && vocab_len > n_specials {
            corrupted.ids[pos] = rng.gen_range(n_specials..vocab_len);
        } // else keep the original id
    }
    (corrupted, targets)
}

/// One pretraining example after ITM corruption.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub tokens: TokenSequence,
    pub mlm_targets: Vec<(usize, usize)>,
    pub image: ImageTensor,
    /// 1 = matched pair, 0 = image replaced by another batch member's.
    pub itm_label: usize,
}

#[derive(Debug, Clone)]
pub struct PretrainBatch {
    pub items: Vec<BatchItem>,
}

/// Each pair independently keeps its image (label 1) or receives another
/// batch member's image (label 0) with probability `mismatch_fraction`;
/// a replacement never maps an image back onto itself.
pub fn sample_itm_pairs(
    pairs: &[(TokenSequence, ImageTensor)],
    mismatch_fraction: f64,
    rng: &mut impl Rng,
) -> Result<PretrainBatch> {
    if pairs.len() < 2 && mismatch_fraction > 0.0 {
        return Err(EssenError::DataGen(
            "image-text matching needs at least 2 pairs to form mismatches".into(),
        ));
    }
    let mut items = Vec::with_capacity(pairs.len());
    for (i, (tokens, image)) in pairs.iter().enumerate() {
        let mismatch = mismatch_fraction > 0.0 && rng.gen::<f64>() < mismatch_fraction;
        if mismatch {
            let mut j = rng.gen_range(0..pairs.len() - 1);
            if j >= i {
                j += 1;
            }
            items.push(BatchItem {
                tokens: tokens.clone(),
                mlm_targets: Vec::new(),
                image: pairs[j].1.clone(),
                itm_label: 0,
            });
        } else {
            items.push(BatchItem {
                tokens: tokens.clone(),
                mlm_targets: Vec::new(),
                image: image.clone(),
                itm_label: 1,
            });
        }
    }
    Ok(PretrainBatch { items })
}

/// Applies MLM corruption to the matched items of a batch (masking a
/// mismatched pair's caption would make its targets unpredictable from the
/// image, so only matched pairs contribute MLM).
pub fn mask_batch(
    batch: &mut PretrainBatch,
    policy: &MaskingPolicy,
    vocab_len: usize,
    rng: &mut impl Rng,
) {
    for item in &mut batch.items {
        if item.itm_label == 1 {
            let (corrupted, targets) = mask_tokens(&item.tokens, policy, vocab_len, rng);
            item.tokens = corrupted;
            item.mlm_targets = targets;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Pretrain,
    Entail,
    PairJudge,
    RefRes,
}

/// Classification heads attached to the encoder. Heads start zero-initialized
/// (fresh heads sit exactly at the analytic chance loss); pass an RNG to get
/// random init instead, which gradient checking needs so loss actually
/// depends on the encoder.
#[derive(Debug, Clone)]
pub struct Heads<T> {
    pub kind: HeadKind,
    pub store: ParamStore<T>,
    pub mlm: Option<LinearParams>,
    pub itm: Option<LinearParams>,
    pub task: Option<LinearParams>,
}

impl<T: Scalar> Heads<T> {
    pub fn new(kind: HeadKind, fused_width: usize, vocab_size: usize) -> Self {
        Self::build(kind, fused_width, vocab_size, None)
    }

    pub fn new_random(
        kind: HeadKind,
        fused_width: usize,
        vocab_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::build(kind, fused_width, vocab_size, Some(rng))
    }

    fn build(
        kind: HeadKind,
        d: usize,
        vocab_size: usize,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Self {
        let mut store = ParamStore::new();
        let mut linear = |store: &mut ParamStore<T>, name: &str, din: usize, dout: usize| {
            match rng.as_deref_mut() {
                Some(r) => LinearParams::add(store, name, r, din, dout),
                None => LinearParams::add_zeroed(store, name, din, dout),
            }
        };
        let (mlm, itm, task) = match kind {
            HeadKind::Pretrain => (
                Some(linear(&mut store, "head.mlm", d, vocab_size)),
                Some(linear(&mut store, "head.itm", d, 2)),
                None,
            ),
            HeadKind::Entail => (None, None, Some(linear(&mut store, "head.entail", d, 3))),
            HeadKind::PairJudge => (
                None,
                None,
                Some(linear(&mut store, "head.pairjudge", 2 * d, 2)),
            ),
            HeadKind::RefRes => (None, None, Some(linear(&mut store, "head.refres", d, 1))),
        };
        Self {
            kind,
            store,
            mlm,
            itm,
            task,
        }
    }
}

/// Mean cross-entropy of the MLM head over the target positions of the text
/// stream. Empty targets define a zero loss and raise the warning flag.
pub fn mlm_loss<T: Scalar>(
    tape: &mut Tape<T>,
    head_bind: StoreBinding,
    mlm_head: &LinearParams,
    text_stream: VarId,
    targets: &[(usize, usize)],
) -> (VarId, bool) {
    if targets.is_empty() {
        let zero = tape.leaf(Tensor::scalar(T::zero()));
        return (zero, true);
    }
    let rows: Vec<usize> = targets.iter().map(|&(pos, _)| pos).collect();
    let wanted: Vec<usize> = targets.iter().map(|&(_, id)| id).collect();
    let picked = tape.gather_rows(text_stream, rows);
    let logits = mlm_head.forward(tape, head_bind, picked);
    (tape.cross_entropy_mean(logits, wanted), false)
}

/// Binary cross-entropy of the ITM head over the pooled vector.
pub fn itm_loss<T: Scalar>(
    tape: &mut Tape<T>,
    head_bind: StoreBinding,
    itm_head: &LinearParams,
    pooled: VarId,
    label: usize,
) -> VarId {
    let logits = itm_head.forward(tape, head_bind, pooled);
    tape.cross_entropy_mean(logits, vec![label])
}

/// Forward + combined weighted loss for one batch item on an existing tape.
/// Shared between the training step (one tape per item) and gradient
/// checking (all items on one tape).
pub fn example_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &VlModel<T>,
    model_bind: StoreBinding,
    heads: &Heads<T>,
    head_bind: StoreBinding,
    item: &BatchItem,
    w_mlm: T,
    w_itm: T,
) -> Result<(VarId, Option<f64>, f64)> {
    let fused = model.forward(tape, model_bind, &item.tokens, &item.image)?;
    let itm_head = heads.itm.as_ref().expect("pretrain heads carry itm");
    let mlm_head = heads.mlm.as_ref().expect("pretrain heads carry mlm");

    let itm = itm_loss(tape, head_bind, itm_head, fused.pooled, item.itm_label);
    let (mlm, warned) = mlm_loss(tape, head_bind, mlm_head, fused.text_stream, &item.mlm_targets);
    let combined = tape.add_scaled(vec![(mlm, w_mlm), (itm, w_itm)]);
    let mlm_val = (!warned).then(|| tape.value(mlm).item().to_f64());
    let itm_val = tape.value(itm).item().to_f64();
    Ok((combined, mlm_val, itm_val))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub grad_clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 1000,
            grad_clip_norm: Some(1.0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.grad_clip_norm.map_or(true, |c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(EssenError::DataGen(format!("invalid optimizer config {self:?}")))
        }
    }
}

/// Adam moments aligned to [model params..., head params...].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: usize,
}

impl AdamState {
    pub fn new(model: &ParamStore<f32>, heads: &ParamStore<f32>) -> Self {
        let shape_of = |p: &crate::params::Param<f32>| {
            Tensor::zeros(p.value.rows(), p.value.cols())
        };
        let m: Vec<Tensor<f32>> = model
            .entries()
            .iter()
            .chain(heads.entries())
            .map(shape_of)
            .collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// Linear warmup to the base rate, then constant.
pub fn lr_at(cfg: &OptimizerConfig, t: usize) -> f64 {
    if cfg.warmup_steps == 0 {
        cfg.lr
    } else {
        cfg.lr * ((t as f64) / (cfg.warmup_steps as f64)).min(1.0)
    }
}

fn adam_step(
    model: &mut ParamStore<f32>,
    heads: &mut ParamStore<f32>,
    adam: &mut AdamState,
    cfg: &OptimizerConfig,
    grads: &mut [Tensor<f32>],
) {
    if let Some(max_norm) = cfg.grad_clip_norm {
        let mut sq = 0f64;
        for g in grads.iter() {
            for &x in g.data() {
                sq += (x as f64) * (x as f64);
            }
        }
        let norm = sq.sqrt();
        if norm > max_norm {
            let scale = (max_norm / norm) as f32;
            for g in grads.iter_mut() {
                g.scale_assign(scale);
            }
        }
    }

    adam.t += 1;
    let lr = lr_at(cfg, adam.t) as f32;
    let b1 = cfg.beta1 as f32;
    let b2 = cfg.beta2 as f32;
    let eps = cfg.eps as f32;
    let bc1 = 1.0 - (cfg.beta1 as f32).powi(adam.t as i32);
    let bc2 = 1.0 - (cfg.beta2 as f32).powi(adam.t as i32);

    let n_model = model.len();
    for (i, g) in grads.iter().enumerate() {
        let value = if i < n_model {
            model.get_mut(crate::params::ParamId(i))
        } else {
            heads.get_mut(crate::params::ParamId(i - n_model))
        };
        let m = &mut adam.m[i];
        let v = &mut adam.v[i];
        for ((w, (m, v)), &gx) in value
            .data_mut()
            .iter_mut()
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            .zip(g.data())
        {
            *m = b1 * *m + (1.0 - b1) * gx;
            *v = b2 * *v + (1.0 - b2) * gx * gx;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Clip + Adam update over [model grads..., head grads...]; shared by the
/// pretraining and fine-tuning steps.
pub fn apply_adam(state: &mut TrainState, grads: &mut [Tensor<f32>]) {
    adam_step(
        &mut state.model.store,
        &mut state.heads.store,
        &mut state.adam,
        &state.opt,
        grads,
    );
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub mlm: f64,
    pub itm: f64,
    pub total: f64,
    pub wall_ms: u64,
}

pub struct TrainState {
    pub model: VlModel<f32>,
    pub heads: Heads<f32>,
    pub opt: OptimizerConfig,
    pub adam: AdamState,
    pub step: usize,
    pub rng: ChaCha8Rng,
    pub loss_history: Vec<LossRow>,
}

impl TrainState {
    pub fn new(cfg: ModelConfig, head_kind: HeadKind, opt: OptimizerConfig, seed: u64) -> Result<Self> {
        opt.validate()?;
        let model = VlModel::new(cfg)?;
        let heads = Heads::new(head_kind, model.fused_width, model.cfg.text.vocab_size);
        let adam = AdamState::new(&model.store, &heads.store);
        Ok(Self {
            model,
            heads,
            opt,
            adam,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            loss_history: Vec::new(),
        })
    }
}

/// One optimizer step over a prepared batch. The total loss is
/// `lambda_mlm * mean(mlm over items with targets) + lambda_itm * mean(itm)`.
pub fn train_step(
    state: &mut TrainState,
    batch: &PretrainBatch,
    lambda_mlm: f64,
    lambda_itm: f64,
) -> Result<LossRow> {
    let started = Instant::now();
    let n = batch.items.len();
    assert!(n > 0, "empty batch");
    let n_mlm = batch.items.iter().filter(|i| !i.mlm_targets.is_empty()).count();
    let w_mlm = if n_mlm > 0 { (lambda_mlm / n_mlm as f64) as f32 } else { 0.0 };
    let w_itm = (lambda_itm / n as f64) as f32;

    let model = &state.model;
    let heads = &state.heads;
    let per_item: Vec<Result<(Vec<Option<Tensor<f32>>>, Option<f64>, f64)>> = batch
        .items
        .par_iter()
        .map(|item| {
            let mut tape = Tape::new();
            let mb = bind(&mut tape, &model.store);
            let hb = bind(&mut tape, &heads.store);
            let (combined, mlm_val, itm_val) =
                example_loss(&mut tape, model, mb, heads, hb, item, w_mlm, w_itm)?;
            if !tape.value(combined).is_finite() {
                let (node, name) = tape
                    .first_non_finite()
                    .unwrap_or((combined, "combined_loss".into()));
                return Err(EssenError::NonFinite { tensor: name, node });
            }
            let mut grads = tape.backward(combined);
            grads.truncate(model.store.len() + heads.store.len());
            Ok((grads, mlm_val, itm_val))
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
    let mut mlm_sum = 0.0;
    let mut itm_sum = 0.0;
    for item in per_item {
        let (grads, mlm_val, itm_val) = item?;
        for (i, g) in grads.into_iter().enumerate().take(total_params) {
            if let Some(g) = g {
                grad_acc[i].add_assign(&g);
            }
        }
        if let Some(v) = mlm_val {
            mlm_sum += v;
        }
        itm_sum += itm_val;
    }

    apply_adam(state, &mut grad_acc);

    state.step += 1;
    let mlm_mean = if n_mlm > 0 { mlm_sum / n_mlm as f64 } else { 0.0 };
    let itm_mean = itm_sum / n as f64;
    let row = LossRow {
        step: state.step,
        mlm: mlm_mean,
        itm: itm_mean,
        total: lambda_mlm * mlm_mean + lambda_itm * itm_mean,
        wall_ms: started.elapsed().as_millis() as u64,
    };
    state.loss_history.push(row);
    Ok(row)
}

// ---------------------------------------------------------------------------
// checkpointing

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    config: ModelConfig,
    head_kind: HeadKind,
    step: usize,
    opt: OptimizerConfig,
    adam_t: usize,
    rng: ChaCha8Rng,
    param_names: Vec<String>,
    loss_history: Vec<LossRow>,
}

/// Single binary container: little-endian u64 header length, JSON header,
/// then raw little-endian f32 arrays in declaration order (model params,
/// head params, Adam m, Adam v).
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let param_names: Vec<String> = state
        .model
        .store
        .entries()
        .iter()
        .chain(state.heads.store.entries())
        .map(|p| p.name.clone())
        .collect();
    let header = CheckpointHeader {
        format: "essen-checkpoint".into(),
        version: CHECKPOINT_VERSION,
        config: state.model.cfg.clone(),
        head_kind: state.heads.kind,
        step: state.step,
        opt: state.opt,
        adam_t: state.adam.t,
        rng: state.rng.clone(),
        param_names,
        loss_history: state.loss_history.clone(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(header_json.len() + 16);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);

    let mut dump = |tensors: &mut dyn Iterator<Item = &Tensor<f32>>| {
        for t in tensors {
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    };
    dump(&mut state.model.store.entries().iter().map(|p| &p.value));
    dump(&mut state.heads.store.entries().iter().map(|p| &p.value));
    dump(&mut state.adam.m.iter());
    dump(&mut state.adam.v.iter());

    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 {
        return Err(EssenError::Checkpoint("file too short".into()));
    }
    let header_len = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(EssenError::Checkpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + header_len])?;
    if header.format != "essen-checkpoint" || header.version != CHECKPOINT_VERSION {
        return Err(EssenError::Checkpoint(format!(
            "unsupported container {}@{}",
            header.format, header.version
        )));
    }

    let model = VlModel::new(header.config)?;
    let heads = Heads::new(header.head_kind, model.fused_width, model.cfg.text.vocab_size);
    let mut adam = AdamState::new(&model.store, &heads.store);
    let mut state = TrainState {
        model,
        heads,
        opt: header.opt,
        adam: AdamState { m: Vec::new(), v: Vec::new(), t: header.adam_t },
        step: header.step,
        rng: header.rng,
        loss_history: header.loss_history,
    };

    let names: Vec<String> = state
        .model
        .store
        .entries()
        .iter()
        .chain(state.heads.store.entries())
        .map(|p| p.name.clone())
        .collect();
    if names != header.param_names {
        return Err(EssenError::Incompatible(format!(
            "parameter layout mismatch: checkpoint has {} arrays, model expects {}",
            header.param_names.len(),
            names.len()
        )));
    }

    let mut at = 8 + header_len;
    let mut read_into = |t: &mut Tensor<f32>| -> Result<()> {
        let need = t.len() * 4;
        if at + need > bytes.len() {
            return Err(EssenError::Checkpoint("truncated tensor data".into()));
        }
        for (i, x) in t.data_mut().iter_mut().enumerate() {
            let o = at + i * 4;
            *x = f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        }
        at += need;
        Ok(())
    };

    let n_model = state.model.store.len();
    for i in 0..n_model {
        read_into(state.model.store.get_mut(crate::params::ParamId(i)))?;
    }
    let n_heads = state.heads.store.len();
    for i in 0..n_heads {
        read_into(state.heads.store.get_mut(crate::params::ParamId(i)))?;
    }
    for m in adam.m.iter_mut() {
        read_into(m)?;
    }
    for v in adam.v.iter_mut() {
        read_into(v)?;
    }
    if at != bytes.len() {
        return Err(EssenError::Checkpoint(format!(
            "{} trailing bytes after tensor data",
            bytes.len() - at
        )));
    }
    adam.t = header.adam_t;
    state.adam = adam;
    Ok(state)
}

// ---------------------------------------------------------------------------
// gradient checking

pub const GRAD_CHECK_PARAM_CAP: u64 = 50_000;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub samples: usize,
    pub total_params: u64,
}

fn batch_loss_f64(
    model: &VlModel<f64>,
    heads: &Heads<f64>,
    batch: &PretrainBatch,
) -> Result<(Tape<f64>, VarId)> {
    let n = batch.items.len();
    let n_mlm = batch.items.iter().filter(|i| !i.mlm_targets.is_empty()).count();
    let w_mlm = if n_mlm > 0 { 1.0 / n_mlm as f64 } else { 0.0 };
    let w_itm = 1.0 / n as f64;
    let mut tape = Tape::new();
    let mb = bind(&mut tape, &model.store);
    let hb = bind(&mut tape, &heads.store);
    let mut parts = Vec::with_capacity(n);
    for item in &batch.items {
        let (combined, _, _) = example_loss(&mut tape, model, mb, heads, hb, item, w_mlm, w_itm)?;
        parts.push((combined, 1.0));
    }
    let total = tape.add_scaled(parts);
    Ok((tape, total))
}

/// Fresh-init weights (std 0.02) put deep activations so close to zero that
/// true gradients of early layers sink to ~1e-10, below central-difference
/// resolution in f64. The check point is therefore a scaled-up random point:
/// chain-rule correctness is point-independent, and at this scale every
/// live parameter's gradient clears the noise floor.
const GRADCHECK_WEIGHT_SCALE: f64 = 22.0;

/// Central-difference verification of the reverse-mode gradients on the
/// combined pretraining loss, in 64-bit floats. Relative error is
/// |a-b| / max(|a|, |b|, 1e-8); returns the max over `sample` randomly
/// chosen parameter coordinates.
pub fn grad_check(
    cfg: &ModelConfig,
    batch: &PretrainBatch,
    epsilon: f64,
    sample: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut model = VlModel::<f64>::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let mut heads = Heads::<f64>::new_random(
        HeadKind::Pretrain,
        model.fused_width,
        model.cfg.text.vocab_size,
        &mut rng,
    );
    let scale_random = |store: &mut ParamStore<f64>| {
        for p in store.entries_mut() {
            // leave layer-norm gains (all ones) and zero biases alone so the
            // scaled point keeps activations in a healthy regime
            let skip = p.value.data().iter().all(|&x| x == 0.0)
                || p.value.data().iter().all(|&x| x == 1.0);
            if !skip {
                p.value.scale_assign(GRADCHECK_WEIGHT_SCALE);
            }
        }
    };
    scale_random(&mut model.store);
    scale_random(&mut heads.store);
    let total_params = model.store.total_scalars() + heads.store.total_scalars();
    if total_params > GRAD_CHECK_PARAM_CAP {
        return Err(EssenError::GradCheckTooLarge {
            params: total_params,
            cap: GRAD_CHECK_PARAM_CAP,
        });
    }

    let (tape, root) = batch_loss_f64(&model, &heads, batch)?;
    let grads = tape.backward(root);
    let n_model = model.store.len();

    // flat coordinate index -> (store-local param, offset)
    let mut layout = Vec::new(); // (is_model, param idx, len)
    for (i, p) in model.store.entries().iter().enumerate() {
        layout.push((true, i, p.value.len()));
    }
    for (i, p) in heads.store.entries().iter().enumerate() {
        layout.push((false, i, p.value.len()));
    }

    let mut max_rel: f64 = 0.0;
    for _ in 0..sample {
        let flat = rng.gen_range(0..total_params);
        let mut remaining = flat as usize;
        let mut chosen = None;
        for &(is_model, idx, len) in &layout {
            if remaining < len {
                chosen = Some((is_model, idx, remaining));
                break;
            }
            remaining -= len;
        }
        let (is_model, idx, offset) = chosen.expect("flat index within bounds");

        let analytic = {
            let var = if is_model { idx } else { n_model + idx };
            grads[var].as_ref().map_or(0.0, |g| g.data()[offset])
        };

        let mut eval_at = |delta: f64| -> Result<f64> {
            {
                let store = if is_model { &mut model.store } else { &mut heads.store };
                store.entries_mut()[idx].value.data_mut()[offset] += delta;
            }
            let (tape, root) = batch_loss_f64(&model, &heads, batch)?;
            let loss = tape.value(root).item();
            {
                let store = if is_model { &mut model.store } else { &mut heads.store };
                store.entries_mut()[idx].value.data_mut()[offset] -= delta;
            }
            Ok(loss)
        };
        let plus = eval_at(epsilon)?;
        let minus = eval_at(-epsilon)?;
        let numeric = (plus - minus) / (2.0 * epsilon);

        let denom = numeric.abs().max(analytic.abs()).max(1e-8);
        let rel = (numeric - analytic).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }

    Ok(GradCheckReport {
        max_rel_err: max_rel,
        samples: sample,
        total_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Arch, FusionConfig, TextTowerConfig, VisionCnnConfig, VisionConfig};
    use crate::text::{tokenize, Vocabulary};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            arch: Arch::TwoTower,
            text: TextTowerConfig {
                vocab_size: 300,
                hidden: 16,
                layers: 1,
                heads: 2,
                ffn: 32,
                max_len: 10,
            },
            vision: VisionConfig::Cnn(VisionCnnConfig {
                image_size: 8,
                stage_channels: vec![4, 8],
                blocks_per_stage: 1,
                out_proj: 16,
            }),
            fusion: Some(FusionConfig {
                hidden: 16,
                ffn: 64,
                layers: 1,
                heads: 2,
                allow_custom_ffn: false,
            }),
            seed: 3,
        }
    }

    fn sample_pairs(n: usize) -> Vec<(TokenSequence, ImageTensor)> {
        let vocab = Vocabulary::base();
        (0..n)
            .map(|i| {
                let text = ["a red dot", "blue box here", "tiny green mark", "odd shape"][i % 4];
                let mut img = ImageTensor::white(8);
                img.set(0, i % 8, (i * 3) % 8, 0.2);
                (tokenize(text, &vocab, 10), img)
            })
            .collect()
    }

    fn prepared_batch(n: usize, mismatch: f64, seed: u64) -> PretrainBatch {
        let pairs = sample_pairs(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut batch = sample_itm_pairs(&pairs, mismatch, &mut rng).unwrap();
        mask_batch(&mut batch, &MaskingPolicy::default(), 300, &mut rng);
        batch
    }

    #[test]
    fn masking_ratio_zero_is_identity() {
        let vocab = Vocabulary::base();
        let tokens = tokenize("some words here", &vocab, 12);
        let policy = MaskingPolicy {
            ratio: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (corrupted, targets) = mask_tokens(&tokens, &policy, 300, &mut rng);
        assert_eq!(corrupted, tokens);
        assert!(targets.is_empty());
    }

    #[test]
    fn masking_ratio_one_all_mask() {
        let vocab = Vocabulary::base();
        let tokens = tokenize("some words here", &vocab, 12);
        let policy = MaskingPolicy {
            ratio: 1.0,
            mask_prob: 1.0,
            random_prob: 0.0,
            keep_prob: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (corrupted, targets) = mask_tokens(&tokens, &policy, 300, &mut rng);
        let maskable = maskable_positions(&tokens);
        assert_eq!(targets.len(), maskable.len());
        for &pos in &maskable {
            assert_eq!(corrupted.ids[pos], MASK_ID);
        }
        // frame survives
        assert_eq!(corrupted.ids[0], CLS_ID);
        assert!(corrupted.ids.contains(&SEP_ID));
    }

    #[test]
    fn masking_never_touches_specials_and_differs_only_at_targets() {
        let vocab = Vocabulary::base();
        let tokens = tokenize("alpha beta gamma delta", &vocab, 16);
        let policy = MaskingPolicy {
            ratio: 0.5,
            mask_prob: 0.9,
            random_prob: 0.1,
            keep_prob: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (corrupted, targets) = mask_tokens(&tokens, &policy, 300, &mut rng);
            let target_pos: std::collections::HashSet<usize> =
                targets.iter().map(|&(p, _)| p).collect();
            for (i, (&a, &b)) in tokens.ids.iter().zip(corrupted.ids.iter()).enumerate() {
                if a == PAD_ID || a == CLS_ID || a == SEP_ID {
                    assert_eq!(a, b, "special changed at {i}");
                    assert!(!target_pos.contains(&i));
                } else if !target_pos.contains(&i) {
                    assert_eq!(a, b, "non-target changed at {i}");
                }
            }
            for &(p, original) in &targets {
                assert_eq!(tokens.ids[p], original);
            }
        }
    }

    #[test]
    fn itm_mismatch_never_keeps_own_image() {
        let pairs = sample_pairs(6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let batch = sample_itm_pairs(&pairs, 0.7, &mut rng).unwrap();
            for (i, item) in batch.items.iter().enumerate() {
                if item.itm_label == 0 {
                    assert_ne!(item.image, pairs[i].1, "mismatch kept its own image");
                }
            }
        }
    }

    #[test]
    fn itm_zero_fraction_all_matched_and_single_pair_error() {
        let pairs = sample_pairs(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = sample_itm_pairs(&pairs, 0.0, &mut rng).unwrap();
        assert!(batch.items.iter().all(|i| i.itm_label == 1));

        let single = sample_pairs(1);
        assert!(sample_itm_pairs(&single, 0.5, &mut rng).is_err());
    }

    #[test]
    fn zero_init_heads_give_analytic_losses() {
        let model = VlModel::<f32>::new(tiny_cfg()).unwrap();
        let heads = Heads::<f32>::new(HeadKind::Pretrain, model.fused_width, 300);
        let batch = prepared_batch(3, 0.5, 7);
        let item = batch
            .items
            .iter()
            .find(|i| !i.mlm_targets.is_empty())
            .expect("some matched item has targets");

        let mut tape = Tape::new();
        let mb = bind(&mut tape, &model.store);
        let hb = bind(&mut tape, &heads.store);
        let fused = model.forward(&mut tape, mb, &item.tokens, &item.image).unwrap();
        let itm = itm_loss(&mut tape, hb, heads.itm.as_ref().unwrap(), fused.pooled, 1);
        let (mlm, warned) = mlm_loss(
            &mut tape,
            hb,
            heads.mlm.as_ref().unwrap(),
            fused.text_stream,
            &item.mlm_targets,
        );
        assert!(!warned);
        assert!((tape.value(itm).item() as f64 - 2f64.ln()).abs() < 1e-5);
        assert!((tape.value(mlm).item() as f64 - 300f64.ln()).abs() < 1e-5);
    }

    #[test]
    fn zero_lambdas_leave_weights_unchanged() {
        let mut state = TrainState::new(tiny_cfg(), HeadKind::Pretrain, OptimizerConfig::default(), 1).unwrap();
        let before: Vec<Tensor<f32>> = state
            .model
            .store
            .entries()
            .iter()
            .map(|p| p.value.clone())
            .collect();
        let batch = prepared_batch(3, 0.5, 8);
        let row = train_step(&mut state, &batch, 0.0, 0.0).unwrap();
        assert_eq!(row.step, 1);
        assert_eq!(state.step, 1);
        for (p, b) in state.model.store.entries().iter().zip(before.iter()) {
            assert_eq!(&p.value, b, "weights moved under zero loss weights");
        }
    }

    #[test]
    fn same_seed_same_losses() {
        let run = || -> Vec<LossRow> {
            let mut state =
                TrainState::new(tiny_cfg(), HeadKind::Pretrain, OptimizerConfig::default(), 5).unwrap();
            let pairs = sample_pairs(4);
            (0..5)
                .map(|_| {
                    let mut batch = sample_itm_pairs(&pairs, 0.5, &mut state.rng).unwrap();
                    let mut rng = state.rng.clone();
                    mask_batch(&mut batch, &MaskingPolicy::default(), 300, &mut rng);
                    state.rng = rng;
                    train_step(&mut state, &batch, 1.0, 1.0).unwrap()
                })
                .collect()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
            assert_eq!(x.mlm.to_bits(), y.mlm.to_bits());
        }
    }

    #[test]
    fn gradient_flows_into_every_layer() {
        let mut state =
            TrainState::new(tiny_cfg(), HeadKind::Pretrain, OptimizerConfig::default(), 9).unwrap();
        // random heads so the encoder receives gradient immediately
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        state.heads = Heads::new_random(HeadKind::Pretrain, state.model.fused_width, 300, &mut rng);
        state.adam = AdamState::new(&state.model.store, &state.heads.store);

        let before: Vec<(String, Tensor<f32>)> = state
            .model
            .store
            .entries()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        let batch = prepared_batch(4, 0.5, 11);
        train_step(&mut state, &batch, 1.0, 1.0).unwrap();

        let groups = [
            "text_tower.layer0",
            "vision_tower.stage0",
            "vision_tower.stage1",
            "fusion.layer0.text",
            "fusion.layer0.vision",
            "pooler",
        ];
        for group in groups {
            let changed = state
                .model
                .store
                .entries()
                .iter()
                .zip(before.iter())
                .filter(|(p, _)| p.name.starts_with(group))
                .any(|(p, (_, old))| &p.value != old);
            assert!(changed, "no parameter changed in {group}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut state =
            TrainState::new(tiny_cfg(), HeadKind::Pretrain, OptimizerConfig::default(), 12).unwrap();
        let batch = prepared_batch(3, 0.5, 13);
        for _ in 0..3 {
            train_step(&mut state, &batch, 1.0, 1.0).unwrap();
        }
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.step, state.step);
        assert_eq!(loaded.adam.t, state.adam.t);
        for (a, b) in state
            .model
            .store
            .entries()
            .iter()
            .zip(loaded.model.store.entries())
        {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        for (a, b) in state.adam.m.iter().zip(loaded.adam.m.iter()) {
            assert_eq!(a, b);
        }
        // rng state restored: next draws match
        let mut r1 = state.rng.clone();
        let mut r2 = loaded.rng.clone();
        assert_eq!(r1.gen::<u64>(), r2.gen::<u64>());
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let pairs = sample_pairs(4);

        let step_once = |state: &mut TrainState| -> LossRow {
            let mut batch = sample_itm_pairs(&pairs, 0.5, &mut state.rng).unwrap();
            let mut rng = state.rng.clone();
            mask_batch(&mut batch, &MaskingPolicy::default(), 300, &mut rng);
            state.rng = rng;
            train_step(state, &batch, 1.0, 1.0).unwrap()
        };

        let mut full =
            TrainState::new(tiny_cfg(), HeadKind::Pretrain, OptimizerConfig::default(), 21).unwrap();
        let mut full_rows = Vec::new();
        for i in 0..8 {
            let row = step_once(&mut full);
            if i == 3 {
                save_checkpoint(&full, &path).unwrap();
            }
            full_rows.push(row);
        }

        let mut resumed = load_checkpoint(&path).unwrap();
        for i in 4..8 {
            let row = step_once(&mut resumed);
            assert_eq!(row.total.to_bits(), full_rows[i].total.to_bits(), "step {i}");
            assert_eq!(row.mlm.to_bits(), full_rows[i].mlm.to_bits());
            assert_eq!(row.itm.to_bits(), full_rows[i].itm.to_bits());
        }
    }

    #[test]
    fn grad_check_tiny_two_tower() {
        let mut cfg = tiny_cfg();
        cfg.text.hidden = 8;
        cfg.text.heads = 2;
        cfg.text.ffn = 16;
        cfg.text.vocab_size = 300;
        cfg.fusion = Some(FusionConfig {
            hidden: 8,
            ffn: 32,
            layers: 1,
            heads: 2,
            allow_custom_ffn: false,
        });
        cfg.vision = VisionConfig::Cnn(VisionCnnConfig {
            image_size: 8,
            stage_channels: vec![4, 6],
            blocks_per_stage: 1,
            out_proj: 8,
        });
        let batch = prepared_batch(2, 0.5, 31);
        let report = grad_check(&cfg, &batch, 1e-5, 60, 17).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {}",
            report.max_rel_err
        );
        assert!(report.total_params <= GRAD_CHECK_PARAM_CAP);
    }

    #[test]
    fn grad_check_refuses_oversized_model() {
        let mut cfg = tiny_cfg();
        cfg.text.hidden = 128;
        cfg.text.ffn = 512;
        cfg.text.heads = 4;
        let batch = prepared_batch(2, 0.5, 32);
        assert!(matches!(
            grad_check(&cfg, &batch, 1e-5, 10, 1),
            Err(EssenError::GradCheckTooLarge { .. })
        ));
    }
}
