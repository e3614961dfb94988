//! Pair labels, the multi-task objective, and the SGD loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::interactiveness_loss;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Bound;
use crate::optim::{LrDecay, LrSchedule, Sgd};
use crate::pairs::{pair_proposals, PairProposal, PairThresholds};
use crate::scene::{iou, Scene};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LABEL_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairLabels {
    /// One flag per verb of the vocabulary.
    pub l: Vec<bool>,
    pub interactive: bool,
}

impl PairLabels {
    pub fn as_row(&self) -> Tensor {
        Tensor::row(&self.l.iter().map(|&b| f64::from(u8::from(b))).collect::<Vec<_>>())
    }

    fn column(&self, verbs: &[usize]) -> Tensor {
        let data = verbs.iter().map(|&v| f64::from(u8::from(self.l[v]))).collect();
        Tensor::raw(vec![verbs.len(), 1], data)
    }
}

/// Verb `v` is on iff a triplet with verb `v` matches both boxes at `iou_thresh` and the object class.
pub fn make_labels(scene: &Scene, human_index: usize, object_index: usize, num_verbs: usize, iou_thresh: f64) -> PairLabels {
    let human = &scene.humans[human_index];
    let object = &scene.objects[object_index];
    let mut l = vec![false; num_verbs];
    for t in &scene.gt_triplets {
        if t.verb < num_verbs
            && t.object_class == object.class_id
            && iou(&human.bbox, &t.human_box) >= iou_thresh
            && iou(&object.bbox, &t.object_box) >= iou_thresh
        {
            l[t.verb] = true;
        }
    }
    let interactive = l.iter().any(|&b| b);
    PairLabels { l, interactive }
}

/// `[objects x humans]` 0/1 matrix of interactive pairs.
pub fn build_gt_matrix(scene: &Scene, num_verbs: usize) -> Tensor {
    let (n, m) = (scene.objects.len(), scene.humans.len());
    let mut data = Vec::with_capacity(n * m);
    for o in 0..n {
        for h in 0..m {
            data.push(f64::from(u8::from(make_labels(scene, h, o, num_verbs, LABEL_IOU).interactive)));
        }
    }
    Tensor::raw(vec![n, m], data)
}

/// Pairs, labels and interactiveness targets of one training scene.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub pairs: Vec<PairProposal>,
    pub labels: Vec<PairLabels>,
    pub gt_matrix: Tensor,
}

impl PreparedScene {
    pub fn new(scene: &Scene, num_verbs: usize) -> Result<Self> {
        if scene.humans.is_empty() || scene.objects.is_empty() {
            return Err(Error::Data("training scenes need at least one human and one object".into()));
        }
        let pairs = pair_proposals(scene, PairThresholds::ALL)?;
        let labels = pairs
            .iter()
            .map(|p| make_labels(scene, p.human_index, p.object_index, num_verbs, LABEL_IOU))
            .collect();
        Ok(Self {
            pairs,
            labels,
            gt_matrix: build_gt_matrix(scene, num_verbs),
        })
    }
}

/// Loss components of one scene or averaged over several.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub interactiveness: f64,
    pub s_c: f64,
    pub s_r: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, o: &LossBreakdown, w: f64) {
        self.total += w * o.total;
        self.interactiveness += w * o.interactiveness;
        self.s_c += w * o.s_c;
        self.s_r += w * o.s_r;
    }
}

/// Interactiveness loss plus the per-pair mean of `bce(s_c, l)` and the
/// `Verb_o`-summed binary losses of `s_r`.
pub fn scene_loss(
    model: &Model,
    tape: &mut Tape,
    p: &Bound,
    scene: &Scene,
    prep: &PreparedScene,
) -> Result<(Var, LossBreakdown)> {
    if prep.pairs.len() != prep.labels.len() || prep.pairs.is_empty() {
        return Err(Error::shape(format!(
            "{} pairs with {} label vectors",
            prep.pairs.len(),
            prep.labels.len()
        )));
    }
    let encoding = model.encode_scene(tape, p, scene)?;
    let inter = interactiveness_loss(tape, &encoding.m_att(), &prep.gt_matrix)?;
    let mut parts = LossBreakdown::default();
    let mut pair_total: Option<Var> = None;
    for (pair, labels) in prep.pairs.iter().zip(&prep.labels) {
        if labels.l.len() != model.num_verbs() {
            return Err(Error::shape(format!("label length {} for {} verbs", labels.l.len(), model.num_verbs())));
        }
        let f = model.forward_pair(tape, p, scene, &encoding, pair)?;
        let mut loss = tape.bce(f.s_c, &labels.as_row())?;
        parts.s_c += tape.value(loss).item();
        if let Some(s_r) = f.s_r {
            let per_verb = tape.bce(s_r, &labels.column(&f.verbs))?;
            let summed = tape.scale(per_verb, f.verbs.len() as f64);
            parts.s_r += tape.value(summed).item();
            loss = tape.add(loss, summed)?;
        }
        pair_total = Some(match pair_total {
            None => loss,
            Some(t) => tape.add(t, loss)?,
        });
    }
    let n = prep.pairs.len() as f64;
    parts.s_c /= n;
    parts.s_r /= n;
    let mut total = tape.scale(pair_total.expect("nonempty pairs"), 1.0 / n);
    if let Some(i) = inter {
        parts.interactiveness = tape.value(i).item();
        total = tape.add(total, i)?;
    }
    parts.total = tape.value(total).item();
    Ok((total, parts))
}

/// Mean loss over `scenes` without building gradients.
pub fn evaluate_loss(model: &Model, scenes: &[Scene], prepared: &[PreparedScene]) -> Result<LossBreakdown> {
    if scenes.is_empty() {
        return Err(Error::Data("no scenes to evaluate".into()));
    }
    let mut acc = LossBreakdown::default();
    let mut tape = Tape::new();
    for (scene, prep) in scenes.iter().zip(prepared) {
        tape.clear();
        let p = model.params.bind(&mut tape, false);
        let (_, parts) = scene_loss(model, &mut tape, &p, scene, prep)?;
        acc.add_scaled(&parts, 1.0 / scenes.len() as f64);
    }
    Ok(acc)
}

pub fn prepare_scenes(model: &Model, scenes: &[Scene]) -> Result<Vec<PreparedScene>> {
    scenes
        .iter()
        .map(|s| {
            model.check_scene(s)?;
            PreparedScene::new(s, model.num_verbs())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    /// Scenes per step; the step loss is their mean.
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub log_interval: u64,
    /// Seeds the scene order.
    pub seed: u64,
    /// Stop at a log point once the full training-set loss is below this.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Synthetic-data preset.
    pub fn desk() -> Self {
        Self {
            iterations: 3000,
            batch_size: 1,
            schedule: LrSchedule::constant(3e-3),
            momentum: 0.9,
            weight_decay: 1e-4,
            log_interval: 50,
            seed: 0,
            target_loss: None,
        }
    }

    pub fn vcoco() -> Self {
        Self {
            iterations: 310_000,
            schedule: LrSchedule::constant(1e-3),
            weight_decay: 5e-4,
            ..Self::desk()
        }
    }

    pub fn hico() -> Self {
        Self {
            iterations: 1_200_000,
            schedule: LrSchedule {
                base: 5e-2,
                decays: vec![
                    LrDecay { at: 800_000, factor: 0.1 },
                    LrDecay { at: 950_000, factor: 0.1 },
                ],
            },
            weight_decay: 5e-4,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "vcoco" => Ok(Self::vcoco()),
            "hico" => Ok(Self::hico()),
            other => Err(Error::Config(format!("unknown training preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.log_interval == 0 {
            return Err(Error::Config("iterations, batch_size and log_interval must be positive".into()));
        }
        if !(self.schedule.base >= 0.0) || self.schedule.decays.iter().any(|d| !(d.factor >= 0.0)) {
            return Err(Error::Config("learning rates must be nonnegative".into()));
        }
        Sgd::new(self.schedule.base, self.momentum, self.weight_decay)?;
        Ok(())
    }
}

/// Optimizer state and step counter; the scene order is a pure function of
/// `(seed, iteration)` so a resumed run replays the same sequence.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: Sgd,
    /// Steps completed so far.
    pub iteration: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub loss: f64,
    pub interactiveness_loss: f64,
    pub s_c_loss: f64,
    pub s_r_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct LogEvent {
    pub row: MetricsRow,
    pub val_loss: Option<f64>,
    /// Validation loss improved on every earlier log point.
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub iteration: u64,
    pub stopped_early: bool,
    pub best_val: Option<(u64, f64)>,
    pub last_train_loss: Option<f64>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Sgd::new(config.schedule.base, config.momentum, config.weight_decay)?;
        Ok(Self {
            config,
            optimizer,
            iteration: 0,
        })
    }

    /// Scene indices used by step `iteration` (0-based).
    pub fn batch_indices(&self, num_scenes: usize, iteration: u64) -> Vec<usize> {
        let b = self.config.batch_size as u64;
        let n = num_scenes as u64;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        (iteration * b..(iteration + 1) * b)
            .map(|k| {
                let epoch = k / n;
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                    rng.set_stream(epoch);
                    let mut order: Vec<usize> = (0..num_scenes).collect();
                    order.shuffle(&mut rng);
                    cached = Some((epoch, order));
                }
                cached.as_ref().expect("set above").1[(k % n) as usize]
            })
            .collect()
    }

    /// One SGD step on the next batch.
    pub fn step(&mut self, model: &mut Model, scenes: &[Scene], prepared: &[PreparedScene]) -> Result<LossBreakdown> {
        if scenes.is_empty() || scenes.len() != prepared.len() {
            return Err(Error::Data("no training scenes".into()));
        }
        let batch = self.batch_indices(scenes.len(), self.iteration);
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true);
        let mut total: Option<Var> = None;
        let mut parts = LossBreakdown::default();
        let w = 1.0 / batch.len() as f64;
        for &i in &batch {
            let (l, b) = scene_loss(model, &mut tape, &p, &scenes[i], &prepared[i])?;
            parts.add_scaled(&b, w);
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        let loss = tape.scale(total.expect("nonempty batch"), w);
        if !parts.total.is_finite() {
            return Err(Error::Numeric(format!(
                "loss {} at iteration {} (interactiveness {}, s_c {}, s_r {})",
                parts.total,
                self.iteration + 1,
                parts.interactiveness,
                parts.s_c,
                parts.s_r
            )));
        }
        tape.backward(loss)?;
        let grads = p.grads(&tape);
        self.optimizer.learning_rate = self.config.schedule.at(self.iteration);
        self.optimizer.step(&mut model.params, &grads)?;
        self.iteration += 1;
        Ok(parts)
    }

    /// Runs until `config.iterations` steps have completed, calling `on_log`
    /// every `log_interval` steps with interval-averaged losses.
    pub fn run<F>(&mut self, model: &mut Model, train: &[Scene], val: &[Scene], mut on_log: F) -> Result<TrainSummary>
    where
        F: FnMut(&Model, &Trainer, &LogEvent) -> Result<()>,
    {
        let prepared = prepare_scenes(model, train)?;
        let val_prepared = prepare_scenes(model, val)?;
        let mut acc = LossBreakdown::default();
        let mut steps_in_window = 0u64;
        let mut best: Option<(u64, f64)> = None;
        let mut summary = TrainSummary {
            iteration: self.iteration,
            stopped_early: false,
            best_val: None,
            last_train_loss: None,
        };
        while self.iteration < self.config.iterations {
            let lr = self.config.schedule.at(self.iteration);
            let parts = self.step(model, train, &prepared)?;
            acc.add_scaled(&parts, 1.0);
            steps_in_window += 1;
            if self.iteration % self.config.log_interval != 0 {
                continue;
            }
            let k = steps_in_window as f64;
            let row = MetricsRow {
                iteration: self.iteration,
                loss: acc.total / k,
                interactiveness_loss: acc.interactiveness / k,
                s_c_loss: acc.s_c / k,
                s_r_loss: acc.s_r / k,
                lr,
            };
            acc = LossBreakdown::default();
            steps_in_window = 0;
            let val_loss = if val.is_empty() {
                None
            } else {
                Some(evaluate_loss(model, val, &val_prepared)?.total)
            };
            let is_best = match (val_loss, best) {
                (Some(v), Some((_, b))) => v < b,
                (Some(_), None) => true,
                _ => false,
            };
            if is_best {
                best = val_loss.map(|v| (self.iteration, v));
            }
            on_log(model, self, &LogEvent { row, val_loss, best: is_best })?;
            if let Some(target) = self.config.target_loss {
                let full = evaluate_loss(model, train, &prepared)?.total;
                summary.last_train_loss = Some(full);
                if full < target {
                    summary.stopped_early = true;
                    break;
                }
            }
        }
        summary.iteration = self.iteration;
        summary.best_val = best;
        Ok(summary)
    }
}
