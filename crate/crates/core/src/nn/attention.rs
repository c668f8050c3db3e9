//! Multi-head scaled dot-product attention over the sample-point axis.
//!
//! Queries and keys share a model dimension `d`; values may have their own
//! width `d_v`. Per head i:
//! `head_i = softmax(Q W_i^Q (K W_i^K)^T / sqrt(d_k)) V W_i^V`, and the
//! concatenated heads are projected with `W^O`. The softmax runs across the
//! key/value token axis, i.e. across sample points, so each query row's
//! weights over the N_kv samples sum to one.

use rand::Rng;

use super::{xavier_uniform, BoundParams, ParameterStore};
use crate::tensor::{Scalar, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub model_dim: usize,
}

impl AttentionConfig {
    pub fn new(heads: usize, model_dim: usize) -> Self {
        assert!(heads >= 1, "attention needs at least one head");
        assert_eq!(model_dim % heads, 0, "model_dim must be divisible by heads");
        AttentionConfig { heads, model_dim }
    }

    /// The shipped default: 4 heads.
    pub fn default_heads(model_dim: usize) -> Self {
        Self::new(4, model_dim)
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// Projection matrices for one attention block. All four are stored as
/// full-width matrices holding every head side by side (no biases, matching
/// the plain-weight formulation).
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub name: String,
    pub cfg: AttentionConfig,
    pub value_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(name: impl Into<String>, cfg: AttentionConfig, value_dim: usize) -> Self {
        assert_eq!(
            value_dim % cfg.heads,
            0,
            "value_dim must be divisible by heads"
        );
        MultiHeadAttention {
            name: name.into(),
            cfg,
            value_dim,
        }
    }

    fn pname(&self, which: &str) -> String {
        format!("{}.{}", self.name, which)
    }

    pub fn init<F: Scalar, R: Rng>(&self, store: &mut ParameterStore<F>, rng: &mut R) {
        let d = self.cfg.model_dim;
        let dv = self.value_dim;
        store.insert(self.pname("wq"), xavier_uniform(rng, d, d, &[d, d]));
        store.insert(self.pname("wk"), xavier_uniform(rng, d, d, &[d, d]));
        store.insert(self.pname("wv"), xavier_uniform(rng, dv, dv, &[dv, dv]));
        store.insert(self.pname("wo"), xavier_uniform(rng, dv, dv, &[dv, dv]));
    }

    /// Batched attention. `q` is [R*n_q, d], `k` is [R*n_kv, d], `v` is
    /// [R*n_kv, d_v]; `r` independent attention problems are solved at once.
    /// Returns [R*n_q, d_v].
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        q: Var,
        k: Var,
        v: Var,
        r: usize,
        n_q: usize,
        n_kv: usize,
    ) -> Var {
        self.forward_with_weights(tape, bound, q, k, v, r, n_q, n_kv).0
    }

    /// Same as [`Self::forward`] but also returns the softmax weights with
    /// shape [R*heads, n_q, n_kv] (used by normalization tests).
    #[allow(clippy::too_many_arguments)]
    pub fn forward_with_weights<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        q: Var,
        k: Var,
        v: Var,
        r: usize,
        n_q: usize,
        n_kv: usize,
    ) -> (Var, Var) {
        let d = self.cfg.model_dim;
        let dv = self.value_dim;
        let h = self.cfg.heads;
        let (dk, dvh) = (d / h, dv / h);
        assert_eq!(tape.shape(q), &[r * n_q, d], "attention: bad Q shape");
        assert_eq!(tape.shape(k), &[r * n_kv, d], "attention: bad K shape");
        assert_eq!(tape.shape(v), &[r * n_kv, dv], "attention: bad V shape");
        assert!(n_kv >= 1, "attention: need at least one key/value token");

        let qp = tape.matmul(q, bound.get(&self.pname("wq")));
        let kp = tape.matmul(k, bound.get(&self.pname("wk")));
        let vp = tape.matmul(v, bound.get(&self.pname("wv")));

        // [R*N, d] -> [R*h, N, d_head]
        let split = |tape: &mut Tape<F>, x: Var, n: usize, dh: usize| {
            let x = tape.reshape(x, &[r, n, h, dh]);
            let x = tape.permute(x, &[0, 2, 1, 3]);
            tape.reshape(x, &[r * h, n, dh])
        };
        let qh = split(tape, qp, n_q, dk);
        let kh = split(tape, kp, n_kv, dk);
        let vh = split(tape, vp, n_kv, dvh);

        let kt = tape.permute(kh, &[0, 2, 1]);
        let logits = tape.bmm(qh, kt);
        let scaled = tape.scale(logits, F::from_f64(1.0 / (dk as f64).sqrt()));
        let weights = tape.softmax_last(scaled);
        let mixed = tape.bmm(weights, vh); // [R*h, n_q, dvh]

        // back to [R*n_q, dv]
        let out = tape.reshape(mixed, &[r, h, n_q, dvh]);
        let out = tape.permute(out, &[0, 2, 1, 3]);
        let out = tape.reshape(out, &[r * n_q, dv]);
        let out = tape.matmul(out, bound.get(&self.pname("wo")));
        (out, weights)
    }
}

/// Single-problem convenience wrapper: Q [n_q, d], K [n_kv, d], V [n_kv, d_v].
pub fn multi_head_attention<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    block: &MultiHeadAttention,
    q: Var,
    k: Var,
    v: Var,
) -> Var {
    let n_q = tape.shape(q)[0];
    let n_kv = tape.shape(k)[0];
    block.forward(tape, bound, q, k, v, 1, n_q, n_kv)
}
