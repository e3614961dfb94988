//! Synthetic scenes with learnable interactions.
//!
//! A [`SyntheticWorld`] fixes, from one seed, the verb-object co-occurrence
//! table, per-class appearance prototypes, per-verb appearance offsets for
//! both participants, and a per-verb spatial layout (where the object sits
//! relative to the human, and how large it is). Interacting humans also
//! reach toward their object with the right arm, so the pose map carries
//! signal too.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;
use crate::scene::{BoundingBox, GtTriplet, Instance, Scene, HUMAN_CLASS, NUM_KEYPOINTS};

/// Noise presets: ratio of the per-component signal scale to the noise std.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnrPreset {
    High,
    Medium,
    Low,
}

impl SnrPreset {
    pub fn value(self) -> f64 {
        match self {
            SnrPreset::High => 8.0,
            SnrPreset::Medium => 2.0,
            SnrPreset::Low => 0.75,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    /// Inclusive range.
    pub humans_per_scene: [usize; 2],
    /// Inclusive range.
    pub objects_per_scene: [usize; 2],
    /// Object classes including the reserved human class 0.
    pub num_object_classes: usize,
    pub num_verbs: usize,
    /// Probability that a verb co-occurs with a class (at least one always does).
    pub cooccur_density: f64,
    /// Probability that an object interacts with some human in its scene.
    pub interaction_prob: f64,
    pub appearance_dim: usize,
    pub snr: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_scenes: 200,
            val_scenes: 50,
            test_scenes: 50,
            humans_per_scene: [1, 3],
            objects_per_scene: [1, 3],
            num_object_classes: 5,
            num_verbs: 6,
            cooccur_density: 0.4,
            interaction_prob: 0.6,
            appearance_dim: 32,
            snr: SnrPreset::Medium.value(),
            image_width: 640,
            image_height: 480,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.humans_per_scene[0] == 0 || self.humans_per_scene[0] > self.humans_per_scene[1] {
            return bad("humans_per_scene must be a nonempty range starting at 1 or more");
        }
        if self.objects_per_scene[0] == 0 || self.objects_per_scene[0] > self.objects_per_scene[1] {
            return bad("objects_per_scene must be a nonempty range starting at 1 or more");
        }
        if self.num_object_classes < 2 || self.num_verbs == 0 {
            return bad("need at least one non-human object class and one verb");
        }
        if !(0.0..=1.0).contains(&self.cooccur_density) || !(0.0..=1.0).contains(&self.interaction_prob) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.appearance_dim == 0 || !(self.snr > 0.0) {
            return bad("appearance_dim and snr must be positive");
        }
        if self.image_width < 200 || self.image_height < 200 {
            return bad("image must be at least 200x200");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn salt(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0001,
            Split::Val => 0x7661_6c00_0000_0002,
            Split::Test => 0x7465_7374_0000_0003,
        }
    }
}

/// Object placement relative to the human box, in human-box units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerbLayout {
    pub dx: f64,
    pub dy: f64,
    pub size: f64,
}

/// Keypoint template in normalized human-box coordinates.
const TEMPLATE: [[f64; 2]; NUM_KEYPOINTS] = [
    [0.50, 0.08],
    [0.46, 0.06],
    [0.54, 0.06],
    [0.42, 0.08],
    [0.58, 0.08],
    [0.35, 0.22],
    [0.65, 0.22],
    [0.28, 0.38],
    [0.72, 0.38],
    [0.25, 0.52],
    [0.75, 0.52],
    [0.40, 0.55],
    [0.60, 0.55],
    [0.40, 0.75],
    [0.60, 0.75],
    [0.40, 0.95],
    [0.60, 0.95],
];

#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub config: SynthConfig,
    pub kb: KnowledgeBase,
    pub class_prototypes: Vec<Vec<f64>>,
    pub human_offsets: Vec<Vec<f64>>,
    pub object_offsets: Vec<Vec<f64>>,
    pub layouts: Vec<VerbLayout>,
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, scale).expect("positive scale");
    (0..n).map(|_| normal.sample(rng)).collect()
}

impl SyntheticWorld {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (o, v, d) = (config.num_object_classes, config.num_verbs, config.appearance_dim);
        let mut cooccur = vec![Vec::new(); o];
        for (class, verbs) in cooccur.iter_mut().enumerate().skip(1) {
            for verb in 0..v {
                if rng.random_bool(config.cooccur_density) {
                    verbs.push(verb);
                }
            }
            if verbs.is_empty() {
                verbs.push((class - 1) % v);
            }
        }
        let kb = KnowledgeBase::new(v, o, cooccur)?;
        let class_prototypes = (0..o).map(|_| gaussian_vec(&mut rng, d, 1.0)).collect();
        let human_offsets = (0..v).map(|_| gaussian_vec(&mut rng, d, 0.8)).collect();
        let object_offsets = (0..v).map(|_| gaussian_vec(&mut rng, d, 0.8)).collect();
        let layouts = (0..v)
            .map(|_| VerbLayout {
                dx: rng.random_range(-1.1..1.1),
                dy: rng.random_range(-0.3..0.6),
                size: rng.random_range(0.35..1.0),
            })
            .collect();
        Ok(Self {
            config,
            kb,
            class_prototypes,
            human_offsets,
            object_offsets,
            layouts,
        })
    }

    /// Scenes of one split; each split draws from its own stream.
    pub fn split(&self, split: Split, count: usize) -> Vec<Scene> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ split.salt());
        (0..count).map(|_| generate_synthetic_scene(&mut rng, self)).collect()
    }

    fn appearance<R: Rng + ?Sized>(&self, rng: &mut R, class: usize, offsets: &[&[f64]]) -> Vec<f64> {
        let sigma = 1.0 / self.config.snr;
        let noise = Normal::new(0.0, sigma).expect("positive sigma");
        let mut a = self.class_prototypes[class].clone();
        for off in offsets {
            for (x, o) in a.iter_mut().zip(off.iter()) {
                *x += o;
            }
        }
        for x in &mut a {
            *x += noise.sample(rng);
        }
        a
    }
}

fn fit_box(cx: f64, cy: f64, w: f64, h: f64, img_w: f64, img_h: f64) -> BoundingBox {
    let w = w.min(img_w - 2.0).max(4.0);
    let h = h.min(img_h - 2.0).max(4.0);
    let x1 = (cx - w / 2.0).clamp(0.0, img_w - w);
    let y1 = (cy - h / 2.0).clamp(0.0, img_h - h);
    BoundingBox {
        x1,
        y1,
        x2: x1 + w,
        y2: y1 + h,
    }
}

/// Samples one scene: humans, objects (some placed by a verb layout next to
/// a chosen human), ground-truth triplets, appearance and keypoints.
pub fn generate_synthetic_scene<R: Rng + ?Sized>(rng: &mut R, world: &SyntheticWorld) -> Scene {
    let cfg = &world.config;
    let (img_w, img_h) = (f64::from(cfg.image_width), f64::from(cfg.image_height));
    let nh = rng.random_range(cfg.humans_per_scene[0]..=cfg.humans_per_scene[1]);
    let no = rng.random_range(cfg.objects_per_scene[0]..=cfg.objects_per_scene[1]);

    let human_boxes: Vec<BoundingBox> = (0..nh)
        .map(|_| {
            let w = rng.random_range(50.0..100.0);
            let h = rng.random_range(120.0..200.0);
            let cx = rng.random_range(0.0..img_w);
            let cy = rng.random_range(0.0..img_h);
            fit_box(cx, cy, w, h, img_w, img_h)
        })
        .collect();

    let classes: Vec<usize> = world.kb.object_classes().collect();
    let mut human_verbs: Vec<Vec<usize>> = vec![Vec::new(); nh];
    let mut reach: Vec<Option<(f64, f64)>> = vec![None; nh];
    let mut objects = Vec::with_capacity(no);
    let mut triplets = Vec::new();
    for k in 0..no {
        let class = *classes.choose(rng).expect("at least one object class");
        let verbs = world.kb.verbs_for_object(class).expect("generated classes co-occur");
        let interaction = rng.random_bool(cfg.interaction_prob).then(|| {
            let human = rng.random_range(0..nh);
            let verb = *verbs.choose(rng).expect("nonempty");
            (human, verb)
        });
        let bbox = match interaction {
            Some((hi, verb)) => {
                let hb = human_boxes[hi];
                let lay = world.layouts[verb];
                let (hcx, hcy) = hb.center();
                let jitter = |rng: &mut R| rng.random_range(-0.08..0.08);
                let cx = hcx + (lay.dx + jitter(rng)) * hb.width();
                let cy = hcy + (lay.dy + jitter(rng)) * hb.height();
                let s = lay.size * hb.width() * rng.random_range(0.9..1.1);
                fit_box(cx, cy, s, s, img_w, img_h)
            }
            None => {
                let s = rng.random_range(20.0..90.0);
                fit_box(rng.random_range(0.0..img_w), rng.random_range(0.0..img_h), s, s, img_w, img_h)
            }
        };
        let offsets: Vec<&[f64]> = interaction
            .iter()
            .map(|&(_, v)| world.object_offsets[v].as_slice())
            .collect();
        let appearance = world.appearance(rng, class, &offsets);
        if let Some((hi, verb)) = interaction {
            human_verbs[hi].push(verb);
            reach[hi].get_or_insert(bbox.center());
            triplets.push(GtTriplet {
                human_box: human_boxes[hi],
                object_box: bbox,
                object_class: class,
                verb,
            });
        }
        objects.push((k, class, bbox, appearance));
    }

    let mut humans = Vec::with_capacity(nh);
    for (i, hb) in human_boxes.iter().enumerate() {
        let offsets: Vec<&[f64]> = human_verbs[i].iter().map(|&v| world.human_offsets[v].as_slice()).collect();
        let appearance = world.appearance(rng, HUMAN_CLASS, &offsets);
        let mut kp: Vec<[f64; 2]> = TEMPLATE
            .iter()
            .map(|[u, v]| {
                [
                    hb.x1 + (u + rng.random_range(-0.03..0.03)) * hb.width(),
                    hb.y1 + (v + rng.random_range(-0.03..0.03)) * hb.height(),
                ]
            })
            .collect();
        if let Some((ox, oy)) = reach[i] {
            let sh = kp[6];
            let wrist = [sh[0] + 0.85 * (ox - sh[0]), sh[1] + 0.85 * (oy - sh[1])];
            kp[10] = wrist;
            kp[8] = [(sh[0] + wrist[0]) / 2.0, (sh[1] + wrist[1]) / 2.0 - 0.05 * hb.height()];
        }
        humans.push(Instance {
            id: i as u32,
            is_human: true,
            class_id: HUMAN_CLASS,
            bbox: *hb,
            score: rng.random_range(0.5..=1.0),
            appearance,
            keypoints: Some(kp),
        });
    }
    let objects = objects
        .into_iter()
        .map(|(k, class, bbox, appearance)| Instance {
            id: (nh + k) as u32,
            is_human: false,
            class_id: class,
            bbox,
            score: rng.random_range(0.5..=1.0),
            appearance,
            keypoints: None,
        })
        .collect();
    Scene {
        image_width: cfg.image_width,
        image_height: cfg.image_height,
        humans,
        objects,
        gt_triplets: triplets,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scenes() {
        let w = SyntheticWorld::new(SynthConfig::default()).unwrap();
        let a = w.split(Split::Train, 5);
        let b = SyntheticWorld::new(SynthConfig::default()).unwrap().split(Split::Train, 5);
        assert_eq!(a, b);
        for s in &a {
            s.validate().unwrap();
        }
    }

    #[test]
    fn splits_differ() {
        let w = SyntheticWorld::new(SynthConfig::default()).unwrap();
        let val = w.split(Split::Val, 20);
        let test = w.split(Split::Test, 20);
        for v in &val {
            assert!(test.iter().all(|t| t != v));
        }
    }

    #[test]
    fn triplet_verbs_respect_cooccurrence() {
        let w = SyntheticWorld::new(SynthConfig::default()).unwrap();
        for s in w.split(Split::Train, 50) {
            for t in &s.gt_triplets {
                assert!(w.kb.verbs_for_object(t.object_class).unwrap().contains(&t.verb));
            }
        }
    }

    #[test]
    fn noiseless_objects_reveal_interaction() {
        let cfg = SynthConfig {
            snr: 1e6,
            cooccur_density: 0.0,
            ..SynthConfig::default()
        };
        let w = SyntheticWorld::new(cfg).unwrap();
        let (mut right, mut total) = (0, 0);
        for s in w.split(Split::Train, 100) {
            for o in &s.objects {
                let verb = w.kb.verbs_for_object(o.class_id).unwrap()[0];
                let proto = &w.class_prototypes[o.class_id];
                let off = &w.object_offsets[verb];
                let d_plain: f64 = o.appearance.iter().zip(proto).map(|(a, p)| (a - p).powi(2)).sum();
                let d_int: f64 = o
                    .appearance
                    .iter()
                    .zip(proto)
                    .zip(off)
                    .map(|((a, p), f)| (a - p - f).powi(2))
                    .sum();
                let guess = d_int < d_plain;
                let truth = s.gt_triplets.iter().any(|t| t.object_box == o.bbox);
                right += usize::from(guess == truth);
                total += 1;
            }
        }
        assert_eq!(right, total);
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = SynthConfig::default();
        c.humans_per_scene = [2, 1];
        assert!(SyntheticWorld::new(c).is_err());
        let mut c = SynthConfig::default();
        c.num_object_classes = 1;
        assert!(SyntheticWorld::new(c).is_err());
    }
}
