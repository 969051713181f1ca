//! Layers shared by the encoder, the classifier heads and the baseline.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::normal;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    /// Uniform on `±1/sqrt(fan_in)`.
    FanInUniform,
    Zeros,
    Ones,
}

pub fn init_tensor(rows: usize, cols: usize, init: Init, rng: &mut impl Rng) -> Tensor {
    let n = rows * cols;
    let data = match init {
        Init::Normal(std) => (0..n).map(|_| std * normal(rng)).collect(),
        Init::FanInUniform => {
            let bound = 1.0 / libm::sqrt(rows as f64);
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        }
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
    };
    Tensor::matrix(rows, cols, data).expect("positive extents")
}

/// Affine map `x · W + b` with `W` stored input×output.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(&format!("{name}.w"), init_tensor(input, output, init, rng))?;
        let bias = store.add(&format!("{name}.b"), Tensor::zeros(&[1, output]))?;
        Ok(Self {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::matrix(1, width, vec![1.0; width])?)?;
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[1, width]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Scaled dot-product attention over `heads` equal column groups.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::InvalidConfig(format!(
                "width {width} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), width, width, init, rng)?,
            key: Linear::new(store, &format!("{name}.k"), width, width, init, rng)?,
            value: Linear::new(store, &format!("{name}.v"), width, width, init, rng)?,
            output: Linear::new(store, &format!("{name}.o"), width, width, init, rng)?,
            heads,
            width,
        })
    }

    /// Returns the projected context and one len×len weight matrix per head.
    /// `key_mask[j] == false` excludes key `j` from every row.
    pub fn forward<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        x: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>)> {
        let (len, _) = g.shape(x);
        if let Some(m) = key_mask {
            if m.len() != len {
                return Err(Error::MaskLength {
                    expected: len,
                    got: m.len(),
                });
            }
        }
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let dh = self.width / self.heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut contexts = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let scores = g.matmul_bt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let w = g.softmax_rows(scores, key_mask)?;
            contexts.push(g.matmul(w, vh)?);
            weights.push(w);
        }
        let ctx = if contexts.len() == 1 {
            contexts[0]
        } else {
            g.concat_cols(&contexts)?
        };
        Ok((self.output.forward(g, store, ctx)?, weights))
    }
}

/// Post-norm transformer block: attention and GELU feed-forward, each with a
/// residual connection followed by layer normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub attention: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub ff_norm: LayerNorm,
    pub dropout: f64,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        ff_width: usize,
        dropout: f64,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, init, rng)?,
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), width)?,
            ff_in: Linear::new(store, &format!("{name}.ff_in"), width, ff_width, init, rng)?,
            ff_out: Linear::new(store, &format!("{name}.ff_out"), ff_width, width, init, rng)?,
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), width)?,
            dropout,
        })
    }

    pub fn forward<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        x: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>)> {
        let (attn, weights) = self.attention.forward(g, store, x, key_mask)?;
        let attn = g.dropout(attn, self.dropout);
        let res = g.add(x, attn)?;
        let x1 = self.attn_norm.forward(g, store, res)?;
        let hidden = self.ff_in.forward(g, store, x1)?;
        let hidden = g.gelu(hidden);
        let ff = self.ff_out.forward(g, store, hidden)?;
        let ff = g.dropout(ff, self.dropout);
        let res = g.add(x1, ff)?;
        Ok((self.ff_norm.forward(g, store, res)?, weights))
    }
}

/// One LSTM direction. Gate order in the fused weight is input, forget,
/// candidate, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let weight = store.add(
            &format!("{name}.w"),
            init_tensor(input + hidden, 4 * hidden, Init::FanInUniform, rng),
        )?;
        let mut b = vec![0.0; 4 * hidden];
        // forget gate starts open
        for v in &mut b[hidden..2 * hidden] {
            *v = 1.0;
        }
        let bias = store.add(&format!("{name}.b"), Tensor::matrix(1, 4 * hidden, b)?)?;
        Ok(Self {
            weight,
            bias,
            input,
            hidden,
        })
    }

    /// Hidden states for every step, in input order.
    fn run<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, x: Var, reverse: bool) -> Result<Vec<Var>> {
        let (len, width) = g.shape(x);
        if width != self.input {
            return Err(Error::Shape {
                op: "lstm",
                left: vec![len, width],
                right: vec![len, self.input],
            });
        }
        let hsz = self.hidden;
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let mut h = g.input_from(1, hsz, vec![0.0; hsz])?;
        let mut c = g.input_from(1, hsz, vec![0.0; hsz])?;
        let mut outputs = vec![h; len];
        for step in 0..len {
            let t = if reverse { len - 1 - step } else { step };
            let xt = g.slice_rows(x, t, t + 1)?;
            let z = g.concat_cols(&[xt, h])?;
            let pre = g.matmul(z, w)?;
            let pre = g.add_row(pre, b)?;
            let i = g.slice_cols(pre, 0, hsz)?;
            let i = g.sigmoid(i);
            let f = g.slice_cols(pre, hsz, 2 * hsz)?;
            let f = g.sigmoid(f);
            let cand = g.slice_cols(pre, 2 * hsz, 3 * hsz)?;
            let cand = g.tanh(cand);
            let o = g.slice_cols(pre, 3 * hsz, 4 * hsz)?;
            let o = g.sigmoid(o);
            let keep = g.mul(f, c)?;
            let write = g.mul(i, cand)?;
            c = g.add(keep, write)?;
            let ct = g.tanh(c);
            h = g.mul(o, ct)?;
            outputs[t] = h;
        }
        Ok(outputs)
    }
}

/// Bidirectional LSTM layer; output row `t` is `[forward_t, backward_t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            forward: LstmCell::new(store, &format!("{name}.fwd"), input, hidden, rng)?,
            backward: LstmCell::new(store, &format!("{name}.bwd"), input, hidden, rng)?,
        })
    }

    pub fn output_width(&self) -> usize {
        2 * self.forward.hidden
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, x: Var) -> Result<Var> {
        let fwd = self.forward.run(g, store, x, false)?;
        let bwd = self.backward.run(g, store, x, true)?;
        let fwd = g.concat_rows(&fwd)?;
        let bwd = g.concat_rows(&bwd)?;
        g.concat_cols(&[fwd, bwd])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::rng::rng;
    use approx::assert_abs_diff_eq;

    fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor {
        init_tensor(rows, cols, Init::Normal(1.0), &mut rng(seed))
    }

    #[test]
    fn single_key_attention_is_one() {
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 2, Init::Normal(0.5), &mut rng(1)).unwrap();
        let mut g = Graph::new();
        let x = g.input(&random_input(1, 4, 2));
        let (_, w) = mha.forward(&mut g, &store, x, None).unwrap();
        for h in w {
            assert_eq!(g.value(h), &[1.0]);
        }
    }

    #[test]
    fn constant_scores_average_values() {
        // identical rows give identical query·key products in every row
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 1, Init::Normal(0.5), &mut rng(3)).unwrap();
        let row = random_input(1, 4, 4);
        let x_t = Tensor::from_rows(&vec![row.data().to_vec(); 3]).unwrap();
        let mut g = Graph::new();
        let x = g.input(&x_t);
        let (_, w) = mha.forward(&mut g, &store, x, None).unwrap();
        for v in g.value(w[0]) {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 4, Init::Normal(0.7), &mut rng(5)).unwrap();
        let mut g = Graph::new();
        let x = g.input(&random_input(6, 8, 6));
        let (_, w) = mha
            .forward(&mut g, &store, x, Some(&[true, true, true, true, false, true]))
            .unwrap();
        for h in w {
            for row in g.value(h).chunks(6) {
                assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
                assert_eq!(row[4], 0.0);
            }
        }
    }

    #[test]
    fn mask_length_mismatch() {
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 2, Init::Normal(0.5), &mut rng(1)).unwrap();
        let mut g = Graph::new();
        let x = g.input(&random_input(3, 4, 2));
        assert!(matches!(
            mha.forward(&mut g, &store, x, Some(&[true])),
            Err(Error::MaskLength { expected: 3, got: 1 })
        ));
        assert!(MultiHeadAttention::new(&mut store, "b", 6, 4, Init::Zeros, &mut rng(1)).is_err());
    }

    #[test]
    fn bilstm_width_is_twice_hidden() {
        let mut store = ParamStore::new();
        let l = BiLstm::new(&mut store, "l", 3, 5, &mut rng(1)).unwrap();
        let mut g = Graph::new();
        let x = g.input(&random_input(4, 3, 2));
        let y = l.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), (4, 10));
        assert_eq!(l.output_width(), 10);
    }

    #[test]
    fn transformer_block_gradients() {
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut store, "blk", 4, 2, 6, 0.0, Init::Normal(0.5), &mut rng(7)).unwrap();
        let x = random_input(3, 4, 8);
        let target = random_input(3, 4, 9);
        let report = gradcheck::check(
            &store,
            gradcheck::STEP,
            |_| true,
            |s, grads| {
                let mut g = Graph::new();
                let xi = g.input(&x);
                let (y, _) = block.forward(&mut g, s, xi, None)?;
                let r = g.input(&target);
                let prod = g.mul(y, r)?;
                let loss = g.sum(prod);
                if let Some(out) = grads {
                    g.backward(loss)?;
                    g.accumulate(s, out);
                }
                Ok(g.scalar(loss))
            },
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn bilstm_gradients() {
        let mut store = ParamStore::new();
        let l = BiLstm::new(&mut store, "l", 3, 2, &mut rng(10)).unwrap();
        let x = random_input(4, 3, 11);
        let target = random_input(4, 4, 12);
        let report = gradcheck::check(
            &store,
            gradcheck::STEP,
            |_| true,
            |s, grads| {
                let mut g = Graph::new();
                let xi = g.input(&x);
                let y = l.forward(&mut g, s, xi)?;
                let r = g.input(&target);
                let prod = g.mul(y, r)?;
                let loss = g.sum(prod);
                if let Some(out) = grads {
                    g.backward(loss)?;
                    g.accumulate(s, out);
                }
                Ok(g.scalar(loss))
            },
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
