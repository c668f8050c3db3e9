//! Sinusoidal frequency embeddings.

use ndarray::{Array2, ArrayD};

use crate::tensor::{Scalar, Tape, Var};

/// Spec of an embedding E(.): each input component maps to
/// `[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(2^{L-1} pi x)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrequencyEmbeddingSpec {
    pub input_dim: usize,
    pub num_frequencies: usize,
    pub include_input: bool,
}

impl FrequencyEmbeddingSpec {
    pub fn new(input_dim: usize, num_frequencies: usize) -> Self {
        FrequencyEmbeddingSpec {
            input_dim,
            num_frequencies,
            include_input: true,
        }
    }

    /// The three shipped specs: position 3x(2*10+1)=63, direction
    /// 3x(2*5+1)=33, depth 1x(2*5+1)=11.
    pub fn position() -> Self {
        Self::new(3, 10)
    }

    pub fn direction() -> Self {
        Self::new(3, 5)
    }

    pub fn depth() -> Self {
        Self::new(1, 5)
    }

    pub fn output_dim(&self) -> usize {
        let per = 2 * self.num_frequencies + usize::from(self.include_input);
        self.input_dim * per
    }
}

/// Embed a [P, input_dim] batch on the tape.
pub fn frequency_embed<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    spec: &FrequencyEmbeddingSpec,
) -> Var {
    assert_eq!(
        tape.shape(x).last().copied(),
        Some(spec.input_dim),
        "frequency_embed: input dim mismatch"
    );
    let mut parts = Vec::with_capacity(1 + 2 * spec.num_frequencies);
    if spec.include_input {
        parts.push(x);
    }
    for l in 0..spec.num_frequencies {
        let freq = F::from_f64((1u64 << l) as f64) * F::PI();
        let scaled = tape.scale(x, freq);
        parts.push(tape.sin(scaled));
        parts.push(tape.cos(scaled));
    }
    let ndim = tape.shape(x).len();
    tape.concat(&parts, ndim - 1)
}

/// Plain (non-tape) evaluation, kept for data-free call sites and oracles.
pub fn frequency_embed_values<F: Scalar>(x: &[F], spec: &FrequencyEmbeddingSpec) -> Vec<F> {
    assert_eq!(x.len(), spec.input_dim, "frequency_embed: input dim mismatch");
    let mut out = Vec::with_capacity(spec.output_dim());
    if spec.include_input {
        out.extend_from_slice(x);
    }
    for l in 0..spec.num_frequencies {
        let freq = F::from_f64((1u64 << l) as f64) * F::PI();
        for &xi in x {
            out.push((xi * freq).sin());
        }
        for &xi in x {
            out.push((xi * freq).cos());
        }
    }
    out
}

/// Convenience: embed a plain batch and return the raw array.
pub fn embed_batch<F: Scalar>(rows: &Array2<F>, spec: &FrequencyEmbeddingSpec) -> ArrayD<F> {
    let p = rows.nrows();
    let mut out = Array2::<F>::zeros((p, spec.output_dim()));
    for (i, row) in rows.rows().into_iter().enumerate() {
        let vals: Vec<F> = row.iter().cloned().collect();
        let emb = frequency_embed_values(&vals, spec);
        for (j, v) in emb.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    out.into_dyn()
}
