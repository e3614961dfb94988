//! Named parameter storage and the layers shared by the encoder, the
//! decoder and the complementary stream.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces a tensor by name; the shape must match.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let slot = &mut self.tensors[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: expected shape {:?}, found {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), trainable))
                .collect(),
        }
    }
}

/// Tape handles for every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient of every parameter after `tape.backward`, zeros where none flowed.
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
            })
            .collect()
    }
}

/// Seeded parameter factory. Weights are uniform in `±1/sqrt(fan_in)`,
/// biases start at zero, normalization gains at one.
///
/// Each weight draws from its own stream keyed by the parameter name, so a
/// module initializes identically whatever else the model contains.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    seed: u64,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self { store, seed }
    }

    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::from(crc32fast::hash(name.as_bytes())));
        let t = Tensor::uniform(shape, bound, &mut rng);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::ones(shape))
    }
}

/// Affine map `x · w + b` with `w: [in x out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: init.weight(&format!("{name}.w"), &[fan_in, fan_out], fan_in),
            b: init.zeros(&format!("{name}.b"), &[fan_out]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.w), p.var(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        Self {
            gain: init.ones(&format!("{name}.gain"), &[dim]),
            bias: init.zeros(&format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gain), p.var(self.bias))
    }
}

/// Applies `norm` when present.
pub fn maybe_norm(norm: &Option<LayerNorm>, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
    match norm {
        Some(n) => n.forward(tape, p, x),
        None => Ok(x),
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub kernels: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv {
    pub fn new(init: &mut Init<'_>, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self {
            kernels: init.weight(&format!("{name}.kernels"), &[cout, cin, k, k], cin * k * k),
            bias: init.zeros(&format!("{name}.bias"), &[cout]),
            stride,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.kernels), Some(p.var(self.bias)), self.stride)
    }
}

pub const CONV_KERNEL: usize = 5;
pub const CONV_STRIDE: usize = 2;
pub const CONV_CHANNELS: [usize; 2] = [4, 8];

/// Two strided convolutions with ReLU, flattened and projected to a feature vector.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub conv1: Conv,
    pub conv2: Conv,
    pub head: Linear,
}

impl ConvStack {
    pub fn new(init: &mut Init<'_>, name: &str, in_channels: usize, map_size: usize, out_dim: usize) -> Self {
        let conv1 = Conv::new(init, &format!("{name}.conv1"), in_channels, CONV_CHANNELS[0], CONV_KERNEL, CONV_STRIDE);
        let conv2 = Conv::new(init, &format!("{name}.conv2"), CONV_CHANNELS[0], CONV_CHANNELS[1], CONV_KERNEL, CONV_STRIDE);
        let s1 = (map_size - CONV_KERNEL) / CONV_STRIDE + 1;
        let s2 = (s1 - CONV_KERNEL) / CONV_STRIDE + 1;
        let flat = CONV_CHANNELS[1] * s2 * s2;
        let head = Linear::new(init, &format!("{name}.head"), flat, out_dim);
        Self { conv1, conv2, head }
    }

    /// `[C,H,W]` map to a `[1 x out_dim]` feature row.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, map: Var) -> Result<Var> {
        let x = self.conv1.forward(tape, p, map)?;
        let x = tape.relu(x);
        let x = self.conv2.forward(tape, p, x)?;
        let x = tape.relu(x);
        let x = tape.flatten(x)?;
        self.head.forward(tape, p, x)
    }
}

/// Multi-head softmax attention with a residual update of the queries.
///
/// With `norm` enabled, queries and memory are layer-normalized before the
/// projections and the residual is taken on the raw queries.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub norm_q: Option<LayerNorm>,
    pub norm_kv: Option<LayerNorm>,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Output of [`MultiHeadAttention::forward`].
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    /// Row-stochastic `[queries x keys]` weights, one per head.
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    /// `self_attention` shares one normalization between queries and memory.
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize, norm: bool, self_attention: bool) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dimension {dim} not divisible by {heads} heads");
        let norm_q = norm.then(|| LayerNorm::new(init, &format!("{name}.norm_q"), dim));
        let norm_kv = (norm && !self_attention).then(|| LayerNorm::new(init, &format!("{name}.norm_kv"), dim));
        Self {
            norm_q,
            norm_kv,
            q: Linear::new(init, &format!("{name}.q"), dim, dim),
            k: Linear::new(init, &format!("{name}.k"), dim, dim),
            v: Linear::new(init, &format!("{name}.v"), dim, dim),
            out: Linear::new(init, &format!("{name}.out"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, queries: Var, memory: Var) -> Result<AttentionOutput> {
        let qn = maybe_norm(&self.norm_q, tape, p, queries)?;
        let mn = if queries == memory {
            qn
        } else if self.norm_kv.is_some() {
            maybe_norm(&self.norm_kv, tape, p, memory)?
        } else {
            maybe_norm(&self.norm_q, tape, p, memory)?
        };
        let q = self.q.forward(tape, p, qn)?;
        let k = self.k.forward(tape, p, mn)?;
        let v = self.v.forward(tape, p, mn)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let logits = tape.matmul(qh, kt)?;
            let logits = tape.scale(logits, scale);
            let w = tape.softmax_rows(logits)?;
            head_outs.push(tape.matmul(w, vh)?);
            weights.push(w);
        }
        let cat = tape.concat_last_axis(&head_outs)?;
        let proj = self.out.forward(tape, p, cat)?;
        let out = tape.add(queries, proj)?;
        Ok(AttentionOutput { out, weights })
    }

    /// Self-attention over the rows of `x`.
    pub fn self_attend(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<AttentionOutput> {
        self.forward(tape, p, x, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        Linear::new(&mut Init::new(&mut a, 7), "l", 16, 4);
        Linear::new(&mut Init::new(&mut b, 7), "l", 16, 4);
        assert_eq!(a, b);
        let w = a.get(a.id("l.w").unwrap());
        assert!(w.data().iter().all(|v| v.abs() <= 0.25));
        assert!(a.get(a.id("l.b").unwrap()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn assign_checks_shape() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::zeros(&[2]));
        assert!(s.assign("x", Tensor::zeros(&[3])).is_err());
        assert!(s.assign("y", Tensor::zeros(&[2])).is_err());
        s.assign("x", Tensor::ones(&[2])).unwrap();
    }

    #[test]
    fn conv_stack_output_width() {
        let mut s = ParamStore::new();
        let stack = ConvStack::new(&mut Init::new(&mut s, 1), "pose", 1, 64, 32);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, false);
        let map = tape.constant(Tensor::zeros(&[1, 64, 64]));
        let f = stack.forward(&mut tape, &p, map).unwrap();
        assert_eq!(tape.shape(f), &[1, 32]);
        // zero map with zero biases yields a zero feature
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_weights_are_row_stochastic() {
        let mut s = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut Init::new(&mut s, 3), "a", 8, 2, true, false);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = tape.constant(Tensor::uniform(&[3, 8], 1.0, &mut rng));
        let m = tape.constant(Tensor::uniform(&[4, 8], 1.0, &mut rng));
        let out = mha.forward(&mut tape, &p, q, m).unwrap();
        for w in out.weights {
            let t = tape.value(w);
            for i in 0..3 {
                let s: f64 = t.row_slice(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
