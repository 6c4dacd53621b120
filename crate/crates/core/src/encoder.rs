//! Relation embedding: word embeddings -> single-layer BiLSTM -> attention
//! weighted average of the hidden states.

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{init_uniform, prefixed, softmax, Dense, LstmCache, LstmCell, Parameters};

pub const EMBED_DIM: usize = 32;
pub const HIDDEN_DIM: usize = 32;
/// Length of the relation embedding (both LSTM directions).
pub const RELATION_DIM: usize = 2 * HIDDEN_DIM;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// |V| x E.
    pub embedding: Array2<f64>,
    pub forward: LstmCell,
    pub backward: LstmCell,
    /// Scores each hidden-state row; 2H -> 1.
    pub attention: Dense,
}

/// Everything the backward pass needs from one encoding.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub indices: Vec<usize>,
    /// T x 2H; row t is `[h_fwd(t); h_bwd(t)]`.
    pub states: Array2<f64>,
    pub weights: Array1<f64>,
    pub embedding: Array1<f64>,
    fwd_cache: Vec<LstmCache>,
    // Indexed by token position, not processing order.
    bwd_cache: Vec<LstmCache>,
}

impl EncoderParams {
    pub fn new<R: Rng + ?Sized>(vocab_size: usize, rng: &mut R) -> Self {
        // A lookup is a linear map with a single active (one-hot) input.
        let embedding = Array2::from_shape_simple_fn((vocab_size, EMBED_DIM), init_uniform(rng, 1));
        Self {
            embedding,
            forward: LstmCell::new(EMBED_DIM, HIDDEN_DIM, rng),
            backward: LstmCell::new(EMBED_DIM, HIDDEN_DIM, rng),
            attention: Dense::new(RELATION_DIM, 1, rng),
        }
    }

    pub fn zeros(vocab_size: usize) -> Self {
        Self {
            embedding: Array2::zeros((vocab_size, EMBED_DIM)),
            forward: LstmCell::zeros(EMBED_DIM, HIDDEN_DIM),
            backward: LstmCell::zeros(EMBED_DIM, HIDDEN_DIM),
            attention: Dense::zeros(RELATION_DIM, 1),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.nrows()
    }

    fn check_indices(&self, indices: &[usize]) -> Result<()> {
        if indices.is_empty() {
            return Err(Error::EmptySequence);
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.vocab_size()) {
            return Err(Error::ShapeMismatch(format!("token index {bad} outside vocabulary of {}", self.vocab_size())));
        }
        Ok(())
    }

    fn run_bilstm(&self, indices: &[usize]) -> Result<(Array2<f64>, Vec<LstmCache>, Vec<LstmCache>)> {
        self.check_indices(indices)?;
        let t_len = indices.len();
        let mut states = Array2::zeros((t_len, RELATION_DIM));
        let mut fwd_cache = Vec::with_capacity(t_len);
        let mut h = Array1::zeros(HIDDEN_DIM);
        let mut c = Array1::zeros(HIDDEN_DIM);
        for (t, &idx) in indices.iter().enumerate() {
            let (h2, c2, cache) = self.forward.step(self.embedding.row(idx), h.view(), c.view())?;
            states.slice_mut(s![t, ..HIDDEN_DIM]).assign(&h2);
            fwd_cache.push(cache);
            h = h2;
            c = c2;
        }
        let mut bwd_cache = Vec::with_capacity(t_len);
        let mut h = Array1::zeros(HIDDEN_DIM);
        let mut c = Array1::zeros(HIDDEN_DIM);
        for t in (0..t_len).rev() {
            let (h2, c2, cache) = self.backward.step(self.embedding.row(indices[t]), h.view(), c.view())?;
            states.slice_mut(s![t, HIDDEN_DIM..]).assign(&h2);
            bwd_cache.push(cache);
            h = h2;
            c = c2;
        }
        bwd_cache.reverse();
        Ok((states, fwd_cache, bwd_cache))
    }

    /// Hidden-state matrix (T x 2H).
    pub fn bilstm_states(&self, indices: &[usize]) -> Result<Array2<f64>> {
        Ok(self.run_bilstm(indices)?.0)
    }

    /// Softmax over the per-token attention logits.
    pub fn attention_weights(&self, states: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        if states.nrows() == 0 {
            return Err(Error::EmptySequence);
        }
        let logits = self.attention.forward(states)?.column(0).to_owned();
        Ok(softmax(logits.view()))
    }

    pub fn relation_embedding(&self, indices: &[usize]) -> Result<Array1<f64>> {
        Ok(self.encode(indices)?.embedding)
    }

    /// Forward pass keeping the trace for [`EncoderParams::backward`].
    pub fn encode(&self, indices: &[usize]) -> Result<EncoderTrace> {
        let (states, fwd_cache, bwd_cache) = self.run_bilstm(indices)?;
        let weights = self.attention_weights(states.view())?;
        let embedding = weights.dot(&states);
        Ok(EncoderTrace { indices: indices.to_vec(), states, weights, embedding, fwd_cache, bwd_cache })
    }

    /// Accumulate into `grad` the parameter gradient for upstream `d_embedding`.
    pub fn backward(&self, trace: &EncoderTrace, d_embedding: &Array1<f64>, grad: &mut EncoderParams) {
        let t_len = trace.indices.len();
        let w = &trace.weights;
        // v = sum_t w_t h_t
        let mut dstates = Array2::zeros((t_len, RELATION_DIM));
        for t in 0..t_len {
            dstates.row_mut(t).scaled_add(w[t], d_embedding);
        }
        let dw = trace.states.dot(d_embedding);
        let mean = w.dot(&dw);
        let dlogits = w * &(&dw - mean);
        // logits_t = a . h_t + b
        let (ga, dh_from_attn) = self
            .attention
            .backward(trace.states.view(), dlogits.view().insert_axis(Axis(1)));
        grad.attention.add_scaled(&ga, 1.0);
        dstates += &dh_from_attn;

        let mut dh = Array1::zeros(HIDDEN_DIM);
        let mut dc = Array1::zeros(HIDDEN_DIM);
        for t in (0..t_len).rev() {
            let dh_t = &dh + &dstates.slice(s![t, ..HIDDEN_DIM]);
            let (dx, dh_prev, dc_prev) = self.forward.backward(&trace.fwd_cache[t], dh_t.view(), dc.view(), &mut grad.forward);
            grad.embedding.row_mut(trace.indices[t]).scaled_add(1.0, &dx);
            dh = dh_prev;
            dc = dc_prev;
        }
        let mut dh = Array1::zeros(HIDDEN_DIM);
        let mut dc = Array1::zeros(HIDDEN_DIM);
        for t in 0..t_len {
            let dh_t = &dh + &dstates.slice(s![t, HIDDEN_DIM..]);
            let (dx, dh_prev, dc_prev) = self.backward.backward(&trace.bwd_cache[t], dh_t.view(), dc.view(), &mut grad.backward);
            grad.embedding.row_mut(trace.indices[t]).scaled_add(1.0, &dx);
            dh = dh_prev;
            dc = dc_prev;
        }
    }
}

impl Parameters for EncoderParams {
    fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = vec![("embedding".to_owned(), self.embedding.view().into_dyn())];
        out.extend(prefixed("fwd", self.forward.named_tensors()));
        out.extend(prefixed("bwd", self.backward.named_tensors()));
        out.extend(prefixed("attn", self.attention.named_tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out = vec![self.embedding.view_mut().into_dyn()];
        out.extend(self.forward.tensors_mut());
        out.extend(self.backward.tensors_mut());
        out.extend(self.attention.tensors_mut());
        out
    }
}
