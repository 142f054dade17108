//! Layers assembled from tape primitives.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::{ParameterStore, Rng, Tape, Tensor, Var};

/// Whether stochastic regularization is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Binary keep-mask scaled by `1 / (1 - rate)`.
pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
    }
    let keep = 1.0 / (1.0 - rate);
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
        .collect();
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

/// Inverted dropout; the identity outside training or at rate 0.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(x);
    }
    let mask = dropout_mask(tape.value(x).shape(), rate, rng)?;
    tape.mul_const(x, Arc::new(mask))
}

/// Glorot-uniform weights; bias uniform in `±1/√fan_in`.
pub fn init_linear(store: &mut ParameterStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<()> {
    store.insert_weight(&format!("{prefix}.w"), fan_in, fan_out, rng)?;
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{prefix}.b"), rng.uniform_tensor(&[fan_out], -bound, bound))
}

/// `x·W + b` over the rows of `x`.
pub fn linear(tape: &mut Tape, store: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    let xw = tape.matmul(x, w)?;
    tape.add_bias(xw, b)
}

/// LSTM weights: `w_ih` (d_in×4h), `w_hh` (h×4h), `bias` (4h), gate blocks
/// ordered input, forget, candidate, output. The forget bias starts at 1.
pub fn init_lstm(store: &mut ParameterStore, prefix: &str, d_in: usize, hidden: usize, rng: &mut Rng) -> Result<()> {
    store.insert_weight(&format!("{prefix}.w_ih"), d_in, 4 * hidden, rng)?;
    store.insert_weight(&format!("{prefix}.w_hh"), hidden, 4 * hidden, rng)?;
    let mut bias = vec![0.0; 4 * hidden];
    bias[hidden..2 * hidden].fill(1.0);
    store.insert(format!("{prefix}.bias"), Tensor::vector(bias))
}

/// Runs a batched single-layer LSTM from a zero state.
///
/// `steps` holds T inputs of shape N×d_in; the result is the N×T×h stack of
/// hidden states.
pub fn lstm_forward(tape: &mut Tape, store: &ParameterStore, prefix: &str, steps: &[Var]) -> Result<Var> {
    let first = *steps.first().ok_or_else(|| Error::shape("LSTM needs at least one step"))?;
    let w_ih = tape.param(store, &format!("{prefix}.w_ih"))?;
    let w_hh = tape.param(store, &format!("{prefix}.w_hh"))?;
    let bias = tape.param(store, &format!("{prefix}.bias"))?;
    let hidden = tape.value(w_hh).dims2()?.0;
    let n = tape.value(first).rows();

    let mut h = tape.constant(Tensor::zeros(&[n, hidden]));
    let mut c = tape.constant(Tensor::zeros(&[n, hidden]));
    let mut outputs = Vec::with_capacity(steps.len());
    for &x in steps {
        let xi = tape.matmul(x, w_ih)?;
        let hh = tape.matmul(h, w_hh)?;
        let pre = tape.add(xi, hh)?;
        let pre = tape.add_bias(pre, bias)?;
        let i_pre = tape.slice_cols(pre, 0, hidden)?;
        let f_pre = tape.slice_cols(pre, hidden, hidden)?;
        let g_pre = tape.slice_cols(pre, 2 * hidden, hidden)?;
        let o_pre = tape.slice_cols(pre, 3 * hidden, hidden)?;
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let g = tape.tanh(g_pre);
        let o = tape.sigmoid(o_pre);
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        c = tape.add(keep, write)?;
        let squashed = tape.tanh(c);
        h = tape.mul(o, squashed)?;
        outputs.push(h);
    }
    tape.stack(&outputs)
}

/// Additive attention parameters: `w` (d×a), `b` (a), `v` (a×1).
pub fn init_attention(store: &mut ParameterStore, prefix: &str, d: usize, attn: usize, rng: &mut Rng) -> Result<()> {
    store.insert_weight(&format!("{prefix}.w"), d, attn, rng)?;
    store.insert_zeros(&format!("{prefix}.b"), &[attn])?;
    store.insert_weight(&format!("{prefix}.v"), attn, 1, rng)
}

/// Pools an N×T×d stack of states to N×d:
/// `score_t = vᵀ tanh(W·s_t + b)`, weights = softmax over t.
pub fn attention_pool(tape: &mut Tape, store: &ParameterStore, prefix: &str, states: Var) -> Result<Var> {
    let (n, t, d) = tape.value(states).dims3()?;
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    let v = tape.param(store, &format!("{prefix}.v"))?;
    let flat = tape.reshape(states, &[n * t, d])?;
    let proj = tape.matmul(flat, w)?;
    let proj = tape.add_bias(proj, b)?;
    let act = tape.tanh(proj);
    let scores = tape.matmul(act, v)?;
    let scores = tape.reshape(scores, &[n, t])?;
    let weights = tape.softmax_rows(scores);
    tape.weighted_sum(weights, states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckConfig};

    #[test]
    fn linear_init_bounds() {
        let mut store = ParameterStore::new();
        init_linear(&mut store, "l", 16, 8, &mut Rng::new(3)).unwrap();
        let w = store.value("l.w").unwrap();
        let b = store.value("l.b").unwrap();
        assert_eq!((w.shape(), b.shape()), (&[16usize, 8][..], &[8usize][..]));
        assert!(w.data().iter().all(|v| v.abs() <= (6.0f64 / 24.0).sqrt()));
        assert!(b.data().iter().all(|v| v.abs() <= 0.25));
        assert!(b.data().iter().any(|v| *v != 0.0));
    }

    fn lstm_store(d_in: usize, hidden: usize, seed: u64) -> ParameterStore {
        let mut store = ParameterStore::new();
        init_lstm(&mut store, "lstm", d_in, hidden, &mut Rng::new(seed)).unwrap();
        store
    }

    fn step_inputs(tape: &mut Tape, x: &Tensor) -> Vec<Var> {
        let (t, d) = x.dims2().unwrap();
        (0..t)
            .map(|i| tape.constant(Tensor::new(vec![1, d], x.row(i).to_vec()).unwrap()))
            .collect()
    }

    #[test]
    fn zero_lstm_gives_zero_states() {
        let mut store = ParameterStore::new();
        store.insert("lstm.w_ih", Tensor::zeros(&[1, 12])).unwrap();
        store.insert("lstm.w_hh", Tensor::zeros(&[3, 12])).unwrap();
        store.insert("lstm.bias", Tensor::zeros(&[12])).unwrap();
        let mut tape = Tape::new();
        let x = Tensor::new(vec![4, 1], vec![5.0, -3.0, 1.0, 9.0]).unwrap();
        let steps = step_inputs(&mut tape, &x);
        let out = lstm_forward(&mut tape, &store, "lstm", &steps).unwrap();
        assert_eq!(tape.value(out).shape(), &[1, 4, 3]);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_matches_cell_equations() {
        let store = lstm_store(2, 3, 4);
        let x = [0.3, -0.7];
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![1, 2], x.to_vec()).unwrap());
        let out = lstm_forward(&mut tape, &store, "lstm", &[xv]).unwrap();

        let w_ih = store.value("lstm.w_ih").unwrap();
        let bias = store.value("lstm.bias").unwrap();
        let gate = |j: usize| bias.data()[j] + x[0] * w_ih.get(&[0, j]) + x[1] * w_ih.get(&[1, j]);
        for k in 0..3 {
            let i = crate::tensor::sigmoid(gate(k));
            let g = gate(6 + k).tanh();
            let o = crate::tensor::sigmoid(gate(9 + k));
            let h = o * (i * g).tanh();
            assert!((tape.value(out).data()[k] - h).abs() < 1e-14);
        }
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let store = lstm_store(1, 4, 9);
        let inputs = Rng::new(10).uniform_tensor(&[5, 1], -1.0, 1.0);
        let weights = Rng::new(11).uniform_tensor(&[1, 5, 4], -1.0, 1.0);
        let f = |tape: &mut Tape, s: &ParameterStore| {
            let steps = step_inputs(tape, &inputs);
            let out = lstm_forward(tape, s, "lstm", &steps)?;
            let weighted = tape.mul_const(out, Arc::new(weights.clone()))?;
            Ok(tape.sum(weighted))
        };
        let report = grad_check(f, &store, &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    fn attention_store(d: usize, a: usize) -> ParameterStore {
        let mut store = ParameterStore::new();
        init_attention(&mut store, "attn", d, a, &mut Rng::new(2)).unwrap();
        store
    }

    #[test]
    fn attention_over_identical_states_returns_the_state() {
        let store = attention_store(3, 4);
        let mut tape = Tape::new();
        let s = [0.5, -1.0, 2.0];
        let states = tape.constant(Tensor::new(vec![1, 4, 3], s.repeat(4)).unwrap());
        let out = attention_pool(&mut tape, &store, "attn", states).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(s) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_singleton_is_identity() {
        let store = attention_store(2, 3);
        let mut tape = Tape::new();
        let states = tape.constant(Tensor::new(vec![1, 1, 2], vec![0.25, 7.0]).unwrap());
        let out = attention_pool(&mut tape, &store, "attn", states).unwrap();
        assert_eq!(tape.value(out).data(), &[0.25, 7.0]);
    }

    #[test]
    fn attention_weights_follow_softmax_of_scores() {
        // W = I, b = 0, v chosen so the scores are (ln 3, ln 1).
        let t1 = 1.0f64.tanh();
        let mut store = ParameterStore::new();
        store.insert("attn.w", Tensor::eye(2)).unwrap();
        store.insert("attn.b", Tensor::zeros(&[2])).unwrap();
        store
            .insert("attn.v", Tensor::new(vec![2, 1], vec![3f64.ln() / t1, 0.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let states = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let out = attention_pool(&mut tape, &store, "attn", states).unwrap();
        let v = tape.value(out).data();
        assert!((v[0] - 0.75).abs() < 1e-12 && (v[1] - 0.25).abs() < 1e-12, "{v:?}");
    }

    #[test]
    fn dropout_mask_rates() {
        let mut rng = Rng::new(3);
        assert!(dropout_mask(&[50], 0.0, &mut rng).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(dropout_mask(&[2], 1.0, &mut rng).is_err());

        let n = 100_000usize;
        let mask = dropout_mask(&[n], 0.2, &mut Rng::new(77)).unwrap();
        let zeros = mask.data().iter().filter(|&&v| v == 0.0).count() as f64;
        let sigma = (n as f64 * 0.2 * 0.8).sqrt();
        assert!((zeros - 0.2 * n as f64).abs() <= 3.0 * sigma);
        assert!(mask.data().iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-15));
    }

    #[test]
    fn inference_dropout_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[3, 3]));
        let y = dropout(&mut tape, x, 0.5, Mode::Infer, &mut Rng::new(1)).unwrap();
        assert_eq!(x, y);
    }
}
