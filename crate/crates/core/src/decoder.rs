//! Knowledge-guided top-down relation decoder.
//!
//! A pair query is built from the object word embedding and convolutional
//! features of the pose and spatial maps. It is duplicated once per verb
//! that co-occurs with the object class, each copy concatenated with that
//! verb's embedding and projected to the model width. The decoder layers
//! let every verb query attend over the encoder outputs (queries never see
//! each other) and the resulting clue rows feed one binary classifier per
//! verb.

use crate::error::{Error, Result};
use crate::kb::{KnowledgeBase, EMBED_DIM};
use crate::nn::{Bound, ConvStack, Init, MultiHeadAttention, ParamId};
use crate::nn::Linear;
use crate::pairs::PairProposal;
use crate::raster::MAP_SIZE;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Width of the base query: object embedding, pose feature, spatial feature.
pub const BASE_QUERY_DIM: usize = 3 * EMBED_DIM;

#[derive(Clone, Debug)]
pub struct QueryBuilder {
    pub pose: ConvStack,
    pub spatial: ConvStack,
    pub project: Linear,
    /// With augmentation off, verb embeddings are replaced by zeros.
    pub knowledge_augmentation: bool,
}

impl QueryBuilder {
    pub fn new(init: &mut Init<'_>, dim: usize, knowledge_augmentation: bool) -> Self {
        Self {
            pose: ConvStack::new(init, "query.pose", 1, MAP_SIZE, EMBED_DIM),
            spatial: ConvStack::new(init, "query.spatial", 2, MAP_SIZE, EMBED_DIM),
            project: Linear::new(init, "query.project", BASE_QUERY_DIM + EMBED_DIM, dim),
            knowledge_augmentation,
        }
    }

    /// `[object_embed ∥ pose features ∥ spatial features]` as a `[1 x 96]` row.
    pub fn build_base_query(
        &self,
        tape: &mut Tape,
        p: &Bound,
        pair: &PairProposal,
        object_class: usize,
        kb: &KnowledgeBase,
    ) -> Result<Var> {
        if object_class >= kb.num_object_classes {
            return Err(Error::UnknownClass(object_class));
        }
        let word = tape.constant(Tensor::row(kb.object_embed.row_slice(object_class)));
        let pose = tape.constant(pair.pose.grid.clone());
        let pose = self.pose.forward(tape, p, pose)?;
        let spatial = tape.constant(pair.spatial.grid.clone());
        let spatial = self.spatial.forward(tape, p, spatial)?;
        tape.concat_last_axis(&[word, pose, spatial])
    }

    /// One projected query row per verb, in the given (ascending) order.
    pub fn augment_queries(&self, tape: &mut Tape, p: &Bound, base: Var, verbs: &[usize], kb: &KnowledgeBase) -> Result<Var> {
        if verbs.is_empty() {
            return Err(Error::Domain("empty verb set".into()));
        }
        if let Some(&bad) = verbs.iter().find(|&&v| v >= kb.num_verbs) {
            return Err(Error::Domain(format!("verb {bad} outside vocabulary")));
        }
        let repeated = tape.gather_rows(base, &vec![0; verbs.len()])?;
        let mut emb = Vec::with_capacity(verbs.len() * EMBED_DIM);
        for &v in verbs {
            if self.knowledge_augmentation {
                emb.extend_from_slice(kb.verb_embed.row_slice(v));
            } else {
                emb.extend(std::iter::repeat_n(0.0, EMBED_DIM));
            }
        }
        let emb = tape.constant(Tensor::raw(vec![verbs.len(), EMBED_DIM], emb));
        let cat = tape.concat_last_axis(&[repeated, emb])?;
        self.project.forward(tape, p, cat)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<MultiHeadAttention>,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub clues: Var,
    /// `attention[layer][head]`: `[verbs x instances]` softmax weights.
    pub attention: Vec<Vec<Var>>,
}

impl Decoder {
    pub fn new(init: &mut Init<'_>, depth: usize, dim: usize, heads: usize, norm: bool) -> Self {
        Self {
            layers: (0..depth)
                .map(|l| MultiHeadAttention::new(init, &format!("dec{l}.cross"), dim, heads, norm, false))
                .collect(),
        }
    }

    /// Cross-attention of `queries: [n x d]` over `memory: [instances x d]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, queries: Var, memory: Var) -> Result<DecoderOutput> {
        if tape.shape(memory)[0] == 0 {
            return Err(Error::EmptyGroup("encoder output"));
        }
        let mut q = queries;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let out = layer.forward(tape, p, q, memory)?;
            q = out.out;
            attention.push(out.weights);
        }
        Ok(DecoderOutput { clues: q, attention })
    }
}

/// One independent affine scorer per verb.
#[derive(Clone, Debug)]
pub struct VerbClassifierBank {
    pub weights: ParamId,
    pub bias: ParamId,
}

impl VerbClassifierBank {
    pub fn new(init: &mut Init<'_>, num_verbs: usize, dim: usize) -> Self {
        Self {
            weights: init.weight("verb_cls.w", &[num_verbs, dim], dim),
            bias: init.zeros("verb_cls.b", &[num_verbs, 1]),
        }
    }

    /// `[n x 1]` sigmoid scores; row `i` uses classifier `verbs[i]` on clue row `i`.
    pub fn verb_scores(&self, tape: &mut Tape, p: &Bound, clues: Var, verbs: &[usize]) -> Result<Var> {
        let (n, _) = tape.value(clues).dims2()?;
        if n != verbs.len() {
            return Err(Error::shape(format!("{n} clue rows for {} verbs", verbs.len())));
        }
        let num_verbs = tape.shape(p.var(self.weights))[0];
        if let Some(&bad) = verbs.iter().find(|&&v| v >= num_verbs) {
            return Err(Error::Domain(format!("no classifier for verb {bad}")));
        }
        let w = tape.gather_rows(p.var(self.weights), verbs)?;
        let b = tape.gather_rows(p.var(self.bias), verbs)?;
        let prod = tape.mul(clues, w)?;
        let dot = tape.sum_last_axis(prod)?;
        let logits = tape.add(dot, b)?;
        Ok(tape.sigmoid(logits))
    }
}
