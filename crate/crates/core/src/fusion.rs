//! Complementary pair stream, score fusion, and interactiveness suppression.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::EMBED_DIM;
use crate::nn::{Bound, ConvStack, Init, Linear};
use crate::pairs::PairProposal;
use crate::raster::MAP_SIZE;
use crate::scene::BoundingBox;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `[v_h ∥ v_o ∥ spatial features] -> hidden -> relu -> V` sigmoid scores.
#[derive(Clone, Debug)]
pub struct ComplementaryStream {
    pub spatial: ConvStack,
    pub hidden: Linear,
    pub out: Linear,
}

impl ComplementaryStream {
    pub fn new(init: &mut Init<'_>, appearance_dim: usize, hidden: usize, num_verbs: usize) -> Self {
        Self {
            spatial: ConvStack::new(init, "sc.spatial", 2, MAP_SIZE, EMBED_DIM),
            hidden: Linear::new(init, "sc.hidden", 2 * appearance_dim + EMBED_DIM, hidden),
            out: Linear::new(init, "sc.out", hidden, num_verbs),
        }
    }

    /// `[1 x V]` scores for every verb of the vocabulary.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, human_app: &[f64], object_app: &[f64], pair: &PairProposal) -> Result<Var> {
        let h = tape.constant(Tensor::row(human_app));
        let o = tape.constant(Tensor::row(object_app));
        let map = tape.constant(pair.spatial.grid.clone());
        let sp = self.spatial.forward(tape, p, map)?;
        let x = tape.concat_last_axis(&[h, o, sp])?;
        let x = self.hidden.forward(tape, p, x)?;
        let x = tape.relu(x);
        let x = self.out.forward(tape, p, x)?;
        Ok(tape.sigmoid(x))
    }
}

/// `s_h · s_o · (s_r + s_c) / 2`.
pub fn fuse(s_h: f64, s_o: f64, s_r: f64, s_c: f64) -> Result<f64> {
    for (name, v) in [("s_h", s_h), ("s_o", s_o), ("s_r", s_r), ("s_c", s_c)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Domain(format!("{name} = {v} outside [0, 1]")));
        }
    }
    Ok(s_h * s_o * (s_r + s_c) / 2.0)
}

/// Largest `f64` below 1. A sigmoid that rounded up to 1.0 compares as this
/// value, so threshold 1 keeps no pair.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Keeps pairs whose interactiveness `m_att[object, human]` reaches `threshold`.
///
/// `m_att` rows and columns index `scene.objects` and `scene.humans`.
pub fn suppress(pairs: Vec<PairProposal>, m_att: &Tensor, threshold: f64) -> Result<Vec<PairProposal>> {
    let (n_obj, n_hum) = m_att.dims2()?;
    let mut kept = Vec::with_capacity(pairs.len());
    for pair in pairs {
        if pair.object_index >= n_obj || pair.human_index >= n_hum {
            return Err(Error::Data(format!(
                "pair ({}, {}) outside interactiveness matrix {n_obj}x{n_hum}",
                pair.human_index, pair.object_index
            )));
        }
        if m_att.at2(pair.object_index, pair.human_index).min(BELOW_ONE) >= threshold {
            kept.push(pair);
        }
    }
    Ok(kept)
}

/// One detected ⟨human, verb, object⟩ with its fused score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredTriplet {
    /// Position of the scene within its input file.
    pub scene: usize,
    pub human_id: u32,
    pub human_box: BoundingBox,
    pub human_score: f64,
    pub object_id: u32,
    pub object_box: BoundingBox,
    pub object_class: usize,
    pub object_score: f64,
    pub verb: usize,
    pub s_r: f64,
    pub s_c: f64,
    pub score: f64,
}

/// Descending score, then human id, object id, verb id.
pub fn sort_triplets(triplets: &mut [ScoredTriplet]) {
    triplets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.scene.cmp(&b.scene))
            .then(a.human_id.cmp(&b.human_id))
            .then(a.object_id.cmp(&b.object_id))
            .then(a.verb.cmp(&b.verb))
    });
}

pub fn write_triplets(path: &Path, triplets: &[ScoredTriplet]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for t in triplets {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_triplets(path: &Path) -> Result<Vec<ScoredTriplet>> {
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("detection line {}: {e}", n + 1))))
        .collect()
}
