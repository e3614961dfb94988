//! Human-object pair proposals and the per-pair encodings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{render_pose_map, render_spatial_map, PoseMap, SpatialMap};
use crate::scene::{position_code, Scene};

/// Detection score thresholds for pairing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairThresholds {
    pub human: f64,
    pub object: f64,
}

impl PairThresholds {
    /// V-COCO inference thresholds.
    pub const VCOCO: Self = Self { human: 0.4, object: 0.1 };
    /// HICO-DET inference thresholds.
    pub const HICO: Self = Self { human: 0.6, object: 0.1 };
    /// Everything is paired (training).
    pub const ALL: Self = Self { human: 0.0, object: 0.0 };
}

impl Default for PairThresholds {
    fn default() -> Self {
        Self::VCOCO
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairProposal {
    pub human_id: u32,
    pub object_id: u32,
    /// Positions in `scene.humans` / `scene.objects`.
    pub human_index: usize,
    pub object_index: usize,
    pub pose: PoseMap,
    pub spatial: SpatialMap,
    pub human_code: [f64; 5],
    pub object_code: [f64; 5],
}

impl PairProposal {
    pub fn new(scene: &Scene, human_index: usize, object_index: usize) -> Result<Self> {
        let h = scene
            .humans
            .get(human_index)
            .ok_or_else(|| Error::Data(format!("human index {human_index} out of range")))?;
        let o = scene
            .objects
            .get(object_index)
            .ok_or_else(|| Error::Data(format!("object index {object_index} out of range")))?;
        let union = h.bbox.union(&o.bbox);
        Ok(Self {
            human_id: h.id,
            object_id: o.id,
            human_index,
            object_index,
            pose: render_pose_map(h.keypoints.as_deref(), &union),
            spatial: render_spatial_map(&h.bbox, &o.bbox),
            human_code: position_code(&h.bbox, scene.image_width, scene.image_height)?,
            object_code: position_code(&o.bbox, scene.image_width, scene.image_height)?,
        })
    }
}

/// Humans and objects at or above their thresholds, paired human-id major, object-id minor.
pub fn pair_proposals(scene: &Scene, thresholds: PairThresholds) -> Result<Vec<PairProposal>> {
    for t in [thresholds.human, thresholds.object] {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("threshold {t} outside [0, 1]")));
        }
    }
    let mut humans: Vec<usize> = (0..scene.humans.len())
        .filter(|&i| scene.humans[i].score >= thresholds.human)
        .collect();
    let mut objects: Vec<usize> = (0..scene.objects.len())
        .filter(|&i| scene.objects[i].score >= thresholds.object)
        .collect();
    humans.sort_by_key(|&i| scene.humans[i].id);
    objects.sort_by_key(|&i| scene.objects[i].id);
    let mut out = Vec::with_capacity(humans.len() * objects.len());
    for &h in &humans {
        for &o in &objects {
            out.push(PairProposal::new(scene, h, o)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{BoundingBox, Instance};

    fn inst(id: u32, human: bool, score: f64, x: f64) -> Instance {
        Instance {
            id,
            is_human: human,
            class_id: if human { 0 } else { 1 },
            bbox: BoundingBox::new(x, 0.0, x + 10.0, 20.0).unwrap(),
            score,
            appearance: vec![0.0; 2],
            keypoints: None,
        }
    }

    fn scene() -> Scene {
        Scene {
            image_width: 100,
            image_height: 100,
            humans: vec![inst(5, true, 0.9, 0.0), inst(2, true, 0.5, 10.0), inst(9, true, 0.2, 20.0)],
            objects: vec![inst(7, false, 0.3, 30.0), inst(3, false, 0.15, 40.0), inst(4, false, 0.05, 50.0), inst(8, false, 0.8, 60.0)],
            gt_triplets: vec![],
        }
    }

    #[test]
    fn counts_and_order() {
        let pairs = pair_proposals(&scene(), PairThresholds::VCOCO).unwrap();
        assert_eq!(pairs.len(), 2 * 3);
        let ids: Vec<_> = pairs.iter().map(|p| (p.human_id, p.object_id)).collect();
        assert_eq!(ids, vec![(2, 3), (2, 7), (2, 8), (5, 3), (5, 7), (5, 8)]);
    }

    #[test]
    fn all_humans_below_threshold() {
        let t = PairThresholds { human: 0.95, object: 0.0 };
        assert!(pair_proposals(&scene(), t).unwrap().is_empty());
    }

    #[test]
    fn presets() {
        assert_eq!(PairThresholds::VCOCO, PairThresholds { human: 0.4, object: 0.1 });
        assert_eq!(PairThresholds::HICO, PairThresholds { human: 0.6, object: 0.1 });
        assert!(pair_proposals(&scene(), PairThresholds { human: 1.5, object: 0.0 }).is_err());
    }
}
