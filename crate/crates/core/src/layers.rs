//! Reusable building blocks: affine maps, layer norm, multi-head attention
//! and the post-norm encoder block shared by the text tower, the patch
//! vision tower, the fusion encoder and the one-tower joint encoder.

use rand::Rng;

use crate::autodiff::{Tape, VarId};
use crate::params::{ParamId, ParamStore, StoreBinding};
use crate::tensor::{Scalar, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    pub fn add<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut impl Rng,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.add(
            format!("{prefix}.w"),
            Tensor::trunc_normal(d_in, d_out, INIT_STD, rng),
        );
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(1, d_out));
        Self { w, b }
    }

    /// Zero-initialized variant; used for classification heads so freshly
    /// attached heads start at the analytic chance loss.
    pub fn add_zeroed<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.add(format!("{prefix}.w"), Tensor::zeros(d_in, d_out));
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(1, d_out));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: StoreBinding, x: VarId) -> VarId {
        let m = tape.matmul(x, bind.var(self.w));
        tape.add_row(m, bind.var(self.b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn add<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Self {
        let gain = store.add(format!("{prefix}.g"), Tensor::ones(1, d));
        let bias = store.add(format!("{prefix}.b"), Tensor::zeros(1, d));
        Self { gain, bias }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: StoreBinding, x: VarId) -> VarId {
        tape.layer_norm(x, bind.var(self.gain), bind.var(self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub o: LinearParams,
    pub heads: usize,
}

impl AttentionParams {
    pub fn add<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut impl Rng,
        d: usize,
        heads: usize,
    ) -> Self {
        assert!(d % heads == 0, "hidden {} not divisible by heads {}", d, heads);
        Self {
            q: LinearParams::add(store, &format!("{prefix}.wq"), rng, d, d),
            k: LinearParams::add(store, &format!("{prefix}.wk"), rng, d, d),
            v: LinearParams::add(store, &format!("{prefix}.wv"), rng, d, d),
            o: LinearParams::add(store, &format!("{prefix}.wo"), rng, d, d),
            heads,
        }
    }

    /// Attention with queries from `q_src` and keys/values from `kv_src`
    /// (pass the same id for self-attention). `key_mask[j] = false` hides
    /// key position j from every query.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: StoreBinding,
        q_src: VarId,
        kv_src: VarId,
        key_mask: Option<&[bool]>,
    ) -> VarId {
        let d = tape.value(q_src).cols();
        let dh = d / self.heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let q = self.q.forward(tape, bind, q_src);
        let k = self.k.forward(tape, bind, kv_src);
        let v = self.v.forward(tape, bind, kv_src);

        let mut ctx = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_nt(qh, kh);
            let scaled = tape.scale(scores, scale);
            let probs = tape.masked_softmax(scaled, key_mask.map(|m| m.to_vec()));
            ctx.push(tape.matmul(probs, vh));
        }
        let merged = tape.concat_cols(ctx);
        self.o.forward(tape, bind, merged)
    }
}

/// Post-norm encoder block: attention, residual + layer norm, GELU FFN,
/// residual + layer norm.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub attn: AttentionParams,
    pub ln1: LayerNormParams,
    pub ffn1: LinearParams,
    pub ffn2: LinearParams,
    pub ln2: LayerNormParams,
}

impl BlockParams {
    pub fn add<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut impl Rng,
        d: usize,
        ffn: usize,
        heads: usize,
    ) -> Self {
        Self {
            attn: AttentionParams::add(store, &format!("{prefix}.attn"), rng, d, heads),
            ln1: LayerNormParams::add(store, &format!("{prefix}.ln1"), d),
            ffn1: LinearParams::add(store, &format!("{prefix}.ffn.w1"), rng, d, ffn),
            ffn2: LinearParams::add(store, &format!("{prefix}.ffn.w2"), rng, ffn, d),
            ln2: LayerNormParams::add(store, &format!("{prefix}.ln2"), d),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: StoreBinding,
        x: VarId,
        kv: VarId,
        key_mask: Option<&[bool]>,
    ) -> VarId {
        let attn_out = self.attn.forward(tape, bind, x, kv, key_mask);
        let res1 = tape.add(x, attn_out);
        let normed1 = self.ln1.forward(tape, bind, res1);

        let hidden = self.ffn1.forward(tape, bind, normed1);
        let act = tape.gelu(hidden);
        let ff = self.ffn2.forward(tape, bind, act);
        let res2 = tape.add(normed1, ff);
        self.ln2.forward(tape, bind, res2)
    }
}
