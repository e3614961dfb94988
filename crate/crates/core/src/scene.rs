//! Detected instances, scenes, and their JSON file formats.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class id reserved for humans.
pub const HUMAN_CLASS: usize = 0;
pub const NUM_KEYPOINTS: usize = 17;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from([x1, y1, x2, y2]: [f64; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::DegenerateBox(self.x1, self.y1, self.x2, self.y2));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    /// Smallest box containing both.
    pub fn union(&self, other: &Self) -> Self {
        Self {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    /// Intersected with the image rectangle.
    pub fn clamped(&self, width: f64, height: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }
}

/// Intersection over union; zero for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// `[x1/w, y1/h, bw/w, bh/h, area/(w*h)]` of the box clamped to the image.
pub fn position_code(b: &BoundingBox, width: u32, height: u32) -> Result<[f64; 5]> {
    if width == 0 || height == 0 {
        return Err(Error::Domain(format!("image size {width}x{height}")));
    }
    b.validate()?;
    let (w, h) = (f64::from(width), f64::from(height));
    let c = b.clamped(w, h);
    c.validate()?;
    Ok([
        c.x1 / w,
        c.y1 / h,
        c.width() / w,
        c.height() / h,
        c.area() / (w * h),
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: u32,
    pub is_human: bool,
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
    pub appearance: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<Vec<[f64; 2]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtTriplet {
    pub human_box: BoundingBox,
    pub object_box: BoundingBox,
    pub object_class: usize,
    pub verb: usize,
}

/// On-disk scene record: instances in one list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub image_width: u32,
    pub image_height: u32,
    pub instances: Vec<Instance>,
    #[serde(default)]
    pub gt_triplets: Vec<GtTriplet>,
}

/// Detected humans and objects of one image plus its annotated triplets.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image_width: u32,
    pub image_height: u32,
    pub humans: Vec<Instance>,
    pub objects: Vec<Instance>,
    pub gt_triplets: Vec<GtTriplet>,
}

impl Scene {
    pub fn from_record(rec: SceneRecord) -> Result<Self> {
        let (humans, objects): (Vec<_>, Vec<_>) = rec.instances.into_iter().partition(|i| i.is_human);
        let scene = Self {
            image_width: rec.image_width,
            image_height: rec.image_height,
            humans,
            objects,
            gt_triplets: rec.gt_triplets,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_record(&self) -> SceneRecord {
        SceneRecord {
            image_width: self.image_width,
            image_height: self.image_height,
            instances: self.humans.iter().chain(&self.objects).cloned().collect(),
            gt_triplets: self.gt_triplets.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::Data("image extents must be positive".into()));
        }
        let mut ids = HashSet::new();
        let mut app_len = None;
        for inst in self.humans.iter().chain(&self.objects) {
            if !ids.insert(inst.id) {
                return Err(Error::Data(format!("duplicate instance id {}", inst.id)));
            }
            inst.bbox
                .validate()
                .map_err(|e| Error::Data(format!("instance {}: {e}", inst.id)))?;
            if !(0.0..=1.0).contains(&inst.score) {
                return Err(Error::Data(format!("instance {} score {} outside [0, 1]", inst.id, inst.score)));
            }
            if inst.is_human != (inst.class_id == HUMAN_CLASS) {
                return Err(Error::Data(format!(
                    "instance {}: class {} inconsistent with is_human={}",
                    inst.id, inst.class_id, inst.is_human
                )));
            }
            if *app_len.get_or_insert(inst.appearance.len()) != inst.appearance.len() {
                return Err(Error::Data(format!("instance {}: appearance length differs", inst.id)));
            }
            if inst.appearance.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("instance {}: non-finite appearance", inst.id)));
            }
            if let Some(kp) = &inst.keypoints {
                if !inst.is_human {
                    return Err(Error::Data(format!("object instance {} carries keypoints", inst.id)));
                }
                if kp.len() != NUM_KEYPOINTS {
                    return Err(Error::Data(format!(
                        "instance {}: {} keypoints, expected {NUM_KEYPOINTS}",
                        inst.id,
                        kp.len()
                    )));
                }
            }
        }
        for t in &self.gt_triplets {
            t.human_box.validate().map_err(|e| Error::Data(format!("gt human box: {e}")))?;
            t.object_box.validate().map_err(|e| Error::Data(format!("gt object box: {e}")))?;
        }
        Ok(())
    }

    /// Appearance width shared by all instances, if any exist.
    pub fn appearance_dim(&self) -> Option<usize> {
        self.humans.iter().chain(&self.objects).map(|i| i.appearance.len()).next()
    }

    pub fn human_index(&self, id: u32) -> Option<usize> {
        self.humans.iter().position(|h| h.id == id)
    }

    pub fn object_index(&self, id: u32) -> Option<usize> {
        self.objects.iter().position(|o| o.id == id)
    }
}

/// Reads scenes from a JSON array or from JSON lines (one scene object per line).
pub fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    let text = fs::read_to_string(path)?;
    parse_scenes(&text)
}

pub fn parse_scenes(text: &str) -> Result<Vec<Scene>> {
    let trimmed = text.trim_start();
    let records: Vec<SceneRecord> = if trimmed.starts_with('[') {
        serde_json::from_str(trimmed).map_err(|e| Error::Data(format!("scene file: {e}")))?
    } else {
        trimmed
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("scene line {}: {e}", n + 1))))
            .collect::<Result<_>>()?
    };
    records.into_iter().map(Scene::from_record).collect()
}

/// Writes one scene object per line.
pub fn write_scenes(path: &Path, scenes: &[Scene]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in scenes {
        serde_json::to_writer(&mut w, &s.to_record())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
