//! Bottom-up relation encoder built from group-aware parsing layers.
//!
//! Each layer runs self-attention inside the human group and inside the
//! object group, then a dual attention between the groups. The dual
//! attention computes one logit matrix `A = Q_o K_hᵀ / sqrt(d_head)` per head
//! and uses `A` for the object update and `Aᵀ` for the human update:
//!
//! ```text
//! o_i += max_j sigmoid(A)[i, j] * V_h[j]
//! h_j += max_i sigmoid(Aᵀ)[j, i] * V_o[i]
//! ```
//!
//! The sigmoid of the head-averaged logits is the interactiveness matrix,
//! indexed `[object, human]`.

use crate::error::{Error, Result};
use crate::nn::{maybe_norm, Bound, Init, LayerNorm, Linear, MultiHeadAttention};
use crate::tape::{Tape, Var};

/// Projects appearance and the 5-d box code to the model width and sums them.
#[derive(Clone, Debug)]
pub struct InstanceEmbedding {
    pub appearance: Linear,
    pub position: Linear,
}

impl InstanceEmbedding {
    pub fn new(init: &mut Init<'_>, appearance_dim: usize, dim: usize) -> Self {
        Self {
            appearance: Linear::new(init, "embed.appearance", appearance_dim, dim),
            position: Linear::new(init, "embed.position", 5, dim),
        }
    }

    /// `appearance: [n x d_app]`, `codes: [n x 5]` to `[n x d]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, appearance: Var, codes: Var) -> Result<Var> {
        let a = self.appearance.forward(tape, p, appearance)?;
        let c = self.position.forward(tape, p, codes)?;
        tape.add(a, c)
    }
}

/// Stable partition of row indices into (humans, objects).
pub fn group_split(is_human: &[bool]) -> (Vec<usize>, Vec<usize>) {
    (0..is_human.len()).partition(|&i| is_human[i])
}

#[derive(Clone, Debug)]
pub struct DualAttention {
    pub norm_h: Option<LayerNorm>,
    pub norm_o: Option<LayerNorm>,
    pub query_o: Linear,
    pub key_h: Linear,
    pub value_h: Linear,
    pub value_o: Linear,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct DualOutput {
    pub humans: Var,
    pub objects: Var,
    /// `[objects x humans]`, sigmoid of the head-mean logits.
    pub m_att: Var,
    /// Per-head `[objects x humans]` logits driving the object update.
    pub object_logits: Vec<Var>,
    /// Per-head `[humans x objects]` logits driving the human update.
    pub human_logits: Vec<Var>,
}

impl DualAttention {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize, norm: bool) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dimension {dim} not divisible by {heads} heads");
        Self {
            norm_h: norm.then(|| LayerNorm::new(init, &format!("{name}.norm_h"), dim)),
            norm_o: norm.then(|| LayerNorm::new(init, &format!("{name}.norm_o"), dim)),
            query_o: Linear::new(init, &format!("{name}.query_o"), dim, dim),
            key_h: Linear::new(init, &format!("{name}.key_h"), dim, dim),
            value_h: Linear::new(init, &format!("{name}.value_h"), dim, dim),
            value_o: Linear::new(init, &format!("{name}.value_o"), dim, dim),
            heads,
            dim,
        }
    }

    /// `humans: [M x d]`, `objects: [N x d]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, humans: Var, objects: Var) -> Result<DualOutput> {
        if tape.shape(humans)[0] == 0 {
            return Err(Error::EmptyGroup("humans"));
        }
        if tape.shape(objects)[0] == 0 {
            return Err(Error::EmptyGroup("objects"));
        }
        let hn = maybe_norm(&self.norm_h, tape, p, humans)?;
        let on = maybe_norm(&self.norm_o, tape, p, objects)?;
        let q = self.query_o.forward(tape, p, on)?;
        let k = self.key_h.forward(tape, p, hn)?;
        let vh = self.value_h.forward(tape, p, hn)?;
        let vo = self.value_o.forward(tape, p, on)?;

        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut o_heads = Vec::with_capacity(self.heads);
        let mut h_heads = Vec::with_capacity(self.heads);
        let mut object_logits = Vec::with_capacity(self.heads);
        let mut human_logits = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let raw = tape.matmul(qh, kt)?;
            let a = tape.scale(raw, scale);
            let at = tape.transpose(a)?;

            let vh_h = tape.slice_cols(vh, h * dh, dh)?;
            let gate = tape.sigmoid(a);
            let expanded = tape.broadcast_expand_mul(gate, vh_h)?;
            o_heads.push(tape.max_pool_axis1(expanded)?);

            let vo_h = tape.slice_cols(vo, h * dh, dh)?;
            let gate_t = tape.sigmoid(at);
            let expanded = tape.broadcast_expand_mul(gate_t, vo_h)?;
            h_heads.push(tape.max_pool_axis1(expanded)?);

            object_logits.push(a);
            human_logits.push(at);
        }
        let o_cat = tape.concat_last_axis(&o_heads)?;
        let h_cat = tape.concat_last_axis(&h_heads)?;
        let objects_out = tape.add(objects, o_cat)?;
        let humans_out = tape.add(humans, h_cat)?;

        let mut sum = object_logits[0];
        for &l in &object_logits[1..] {
            sum = tape.add(sum, l)?;
        }
        let mean = tape.scale(sum, 1.0 / self.heads as f64);
        let m_att = tape.sigmoid(mean);
        Ok(DualOutput {
            humans: humans_out,
            objects: objects_out,
            m_att,
            object_logits,
            human_logits,
        })
    }
}

#[derive(Clone, Debug)]
pub struct GpmLayer {
    pub intra_humans: MultiHeadAttention,
    pub intra_objects: MultiHeadAttention,
    pub dual: DualAttention,
}

impl GpmLayer {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize, norm: bool) -> Self {
        Self {
            intra_humans: MultiHeadAttention::new(init, &format!("{name}.intra_h"), dim, heads, norm, true),
            intra_objects: MultiHeadAttention::new(init, &format!("{name}.intra_o"), dim, heads, norm, true),
            dual: DualAttention::new(init, &format!("{name}.dual"), dim, heads, norm),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, humans: Option<Var>, objects: Option<Var>) -> Result<LayerOutput> {
        let humans = humans
            .map(|h| self.intra_humans.self_attend(tape, p, h).map(|o| o.out))
            .transpose()?;
        let objects = objects
            .map(|o| self.intra_objects.self_attend(tape, p, o).map(|o| o.out))
            .transpose()?;
        match (humans, objects) {
            (Some(h), Some(o)) => {
                let dual = self.dual.forward(tape, p, h, o)?;
                Ok(LayerOutput {
                    humans: Some(dual.humans),
                    objects: Some(dual.objects),
                    dual: Some(dual),
                })
            }
            (humans, objects) => Ok(LayerOutput {
                humans,
                objects,
                dual: None,
            }),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub humans: Option<Var>,
    pub objects: Option<Var>,
    /// Absent when either group is empty.
    pub dual: Option<DualOutput>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<GpmLayer>,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Enhanced features in the input row order.
    pub features: Var,
    pub layers: Vec<LayerOutput>,
}

impl EncoderOutput {
    /// Interactiveness matrix of every layer; empty when a group is empty.
    pub fn m_att(&self) -> Vec<Var> {
        self.layers.iter().filter_map(|l| l.dual.as_ref().map(|d| d.m_att)).collect()
    }
}

impl Encoder {
    pub fn new(init: &mut Init<'_>, depth: usize, dim: usize, heads: usize, norm: bool) -> Self {
        Self {
            layers: (0..depth)
                .map(|l| GpmLayer::new(init, &format!("enc{l}"), dim, heads, norm))
                .collect(),
        }
    }

    /// `features: [n x d]` with `is_human[i]` flagging row `i`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, features: Var, is_human: &[bool]) -> Result<EncoderOutput> {
        if self.layers.is_empty() {
            return Err(Error::Config("encoder depth must be at least 1".into()));
        }
        if tape.shape(features)[0] != is_human.len() {
            return Err(Error::shape(format!(
                "{} group flags for features {:?}",
                is_human.len(),
                tape.shape(features)
            )));
        }
        if is_human.is_empty() {
            return Err(Error::EmptyGroup("scene"));
        }
        let (hi, oi) = group_split(is_human);
        let mut humans = (!hi.is_empty()).then(|| tape.gather_rows(features, &hi)).transpose()?;
        let mut objects = (!oi.is_empty()).then(|| tape.gather_rows(features, &oi)).transpose()?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let out = layer.forward(tape, p, humans, objects)?;
            humans = out.humans;
            objects = out.objects;
            layers.push(out);
        }
        let stacked: Vec<Var> = humans.into_iter().chain(objects).collect();
        let stacked = tape.concat_rows(&stacked)?;
        // row r of `stacked` holds input row order[r]; invert that permutation
        let order: Vec<usize> = hi.iter().chain(&oi).copied().collect();
        let mut inverse = vec![0; order.len()];
        for (r, &src) in order.iter().enumerate() {
            inverse[src] = r;
        }
        let features = tape.gather_rows(stacked, &inverse)?;
        Ok(EncoderOutput { features, layers })
    }
}

/// Mean over layers of the BCE between each interactiveness matrix and `gt`.
pub fn interactiveness_loss(tape: &mut Tape, m_att: &[Var], gt: &crate::tensor::Tensor) -> Result<Option<Var>> {
    if m_att.is_empty() {
        return Ok(None);
    }
    let mut total = None;
    for &m in m_att {
        let l = tape.bce(m, gt)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.expect("nonempty");
    Ok(Some(tape.scale(total, 1.0 / m_att.len() as f64)))
}
