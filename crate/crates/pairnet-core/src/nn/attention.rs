//! Multi-head attention with learnable positional encodings added to the
//! queries, keys, and values before their projections.

use super::optim::{LinearParams, ParamStore};
use super::tape::{Tape, Value};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Projection weights for one attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub heads: usize,
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub out: LinearParams,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!(
                "attention width {d} must be divisible by head count {heads}"
            )));
        }
        Ok(AttentionParams {
            heads,
            q: LinearParams::new(store, &format!("{name}.q"), d, d, rng)?,
            k: LinearParams::new(store, &format!("{name}.k"), d, d, rng)?,
            v: LinearParams::new(store, &format!("{name}.v"), d, d, rng)?,
            out: LinearParams::new(store, &format!("{name}.out"), d, d, rng)?,
        })
    }

    /// Runs attention of `queries` over `kv`. Positional encodings are added
    /// to q / k / v inputs before projection. Returns the output rows and a
    /// snapshot of the attention weights with extents [heads, L_q, L_kv].
    pub fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Value,
        kv: Value,
        q_pos: Value,
        k_pos: Value,
        v_pos: Value,
    ) -> Result<(Value, Tensor)> {
        let wq = store.bind(tape, self.q.w);
        let bq = store.bind(tape, self.q.b);
        let wk = store.bind(tape, self.k.w);
        let bk = store.bind(tape, self.k.b);
        let wv = store.bind(tape, self.v.w);
        let bv = store.bind(tape, self.v.b);
        let wo = store.bind(tape, self.out.w);
        let bo = store.bind(tape, self.out.b);
        multi_head_attention(
            tape,
            queries,
            kv,
            q_pos,
            k_pos,
            v_pos,
            &[wq, bq, wk, bk, wv, bv, wo, bo],
            self.heads,
        )
    }
}

/// Tape-level multi-head attention over already-bound weight values
/// `[wq, bq, wk, bk, wv, bv, wo, bo]`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    tape: &mut Tape,
    queries: Value,
    kv: Value,
    q_pos: Value,
    k_pos: Value,
    v_pos: Value,
    weights: &[Value; 8],
    heads: usize,
) -> Result<(Value, Tensor)> {
    let d = {
        let qs = tape.value(queries).shape();
        let ks = tape.value(kv).shape();
        if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
            return Err(Error::shape(
                "multi_head_attention",
                format!("queries {qs:?} vs kv {ks:?}"),
            ));
        }
        qs[1]
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!(
            "attention width {d} must be divisible by head count {heads}"
        )));
    }
    let l_q = tape.value(queries).shape()[0];
    let l_kv = tape.value(kv).shape()[0];
    let dh = d / heads;
    let [wq, bq, wk, bk, wv, bv, wo, bo] = *weights;

    let q_in = tape.add(queries, q_pos)?;
    let k_in = tape.add(kv, k_pos)?;
    let v_in = tape.add(kv, v_pos)?;
    let q = tape.linear(q_in, wq, bq)?;
    let k = tape.linear(k_in, wk, bk)?;
    let v = tape.linear(v_in, wv, bv)?;

    let mut head_outputs = Vec::with_capacity(heads);
    let mut attn = Tensor::zeros(&[heads, l_q, l_kv]);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
        let vh = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = tape.softmax(scaled, 1)?;
        attn.data_mut()[h * l_q * l_kv..(h + 1) * l_q * l_kv]
            .copy_from_slice(tape.value(probs).data());
        head_outputs.push(tape.matmul(probs, vh)?);
    }
    let merged = tape.concat_cols(&head_outputs)?;
    let out = tape.linear(merged, wo, bo)?;
    Ok((out, attn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn leaf_weights(tape: &mut Tape, d: usize, rng: &mut rand_chacha::ChaCha8Rng) -> [Value; 8] {
        let mut w = Vec::new();
        for _ in 0..4 {
            w.push(tape.leaf(Tensor::uniform(&[d, d], 0.5, rng)));
            w.push(tape.leaf(Tensor::uniform(&[d], 0.5, rng)));
        }
        [w[0], w[1], w[2], w[3], w[4], w[5], w[6], w[7]]
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = stream(11, &[0]);
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::uniform(&[3, 8], 1.0, &mut rng));
        let kv = tape.leaf(Tensor::uniform(&[5, 8], 1.0, &mut rng));
        let zq = tape.leaf(Tensor::zeros(&[3, 8]));
        let zk = tape.leaf(Tensor::zeros(&[5, 8]));
        let zv = tape.leaf(Tensor::zeros(&[5, 8]));
        let w = leaf_weights(&mut tape, 8, &mut rng);
        let (_, attn) = multi_head_attention(&mut tape, q, kv, zq, zk, zv, &w, 2).unwrap();
        assert_eq!(attn.shape(), &[2, 3, 5]);
        for h in 0..2 {
            for r in 0..3 {
                let row: f64 = (0..5).map(|c| attn.data()[(h * 3 + r) * 5 + c]).sum();
                assert!((row - 1.0).abs() < 1e-12, "attention row sums to {row}");
            }
        }
    }

    #[test]
    fn single_kv_row_gets_weight_one_and_passes_through() {
        // With one key/value row the softmax is a singleton, so the output is
        // exactly the projected value row pushed through the out projection.
        let mut rng = stream(12, &[0]);
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::uniform(&[4, 8], 1.0, &mut rng));
        let kv = tape.leaf(Tensor::uniform(&[1, 8], 1.0, &mut rng));
        let zq = tape.leaf(Tensor::zeros(&[4, 8]));
        let zk = tape.leaf(Tensor::zeros(&[1, 8]));
        let zv = tape.leaf(Tensor::zeros(&[1, 8]));
        let w = leaf_weights(&mut tape, 8, &mut rng);
        let (out, attn) = multi_head_attention(&mut tape, q, kv, zq, zk, zv, &w, 2).unwrap();
        assert!(attn.data().iter().all(|&a| (a - 1.0).abs() < 1e-15));

        // Expected: out_row = W_o^T... i.e. linear(linear(kv, wv, bv), wo, bo),
        // identical for every query row.
        let v_proj = tape.linear(kv, w[4], w[5]).unwrap();
        let expected = tape.linear(v_proj, w[6], w[7]).unwrap();
        let e = tape.value(expected).data().to_vec();
        let o = tape.value(out).data();
        for r in 0..4 {
            for c in 0..8 {
                assert!(
                    (o[r * 8 + c] - e[c]).abs() < 1e-12,
                    "row {r} col {c}: {} vs {}",
                    o[r * 8 + c],
                    e[c]
                );
            }
        }
    }

    #[test]
    fn indivisible_width_is_rejected_at_construction() {
        let mut store = ParamStore::new();
        let mut rng = stream(13, &[0]);
        let err = AttentionParams::new(&mut store, "a", 10, 3, &mut rng);
        assert!(err.is_err(), "10 is not divisible by 3 heads");
    }
}
