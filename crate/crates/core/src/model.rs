//! The full relation-parsing model and the end-to-end detection pipeline.

use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, QueryBuilder, VerbClassifierBank};
use crate::encoder::{Encoder, EncoderOutput, InstanceEmbedding};
use crate::error::{Error, Result};
use crate::fusion::{fuse, sort_triplets, suppress, ComplementaryStream, ScoredTriplet};
use crate::kb::KnowledgeBase;
use crate::nn::{Bound, Init, ParamStore};
use crate::pairs::{pair_proposals, PairProposal, PairThresholds};
use crate::scene::{position_code, Scene};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Group-aware parsing layers; 0 selects the decoder-only variant.
    pub enc_layers: usize,
    /// Cross-attention layers; 0 selects the encoder-only variant.
    pub dec_layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub appearance_dim: usize,
    pub sc_hidden: usize,
    pub knowledge_augmentation: bool,
    pub layer_norm: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            enc_layers: 2,
            dec_layers: 2,
            dim: 64,
            heads: 4,
            appearance_dim: 32,
            sc_hidden: 64,
            knowledge_augmentation: true,
            layer_norm: true,
            init_seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enc_layers == 0 && self.dec_layers == 0 {
            return Err(Error::Config("at least one of enc_layers, dec_layers must be positive".into()));
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if self.appearance_dim == 0 || self.sc_hidden == 0 {
            return Err(Error::Config("appearance_dim and sc_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Inference-time thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub t_human: f64,
    pub t_object: f64,
    pub suppression_threshold: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            t_human: PairThresholds::VCOCO.human,
            t_object: PairThresholds::VCOCO.object,
            suppression_threshold: 0.1,
        }
    }
}

impl InferenceConfig {
    pub fn thresholds(&self) -> PairThresholds {
        PairThresholds {
            human: self.t_human,
            object: self.t_object,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub kb: KnowledgeBase,
    pub params: ParamStore,
    pub embed: InstanceEmbedding,
    pub encoder: Option<Encoder>,
    /// Absent in the encoder-only variant, which has no pair queries.
    pub queries: Option<QueryBuilder>,
    pub decoder: Decoder,
    pub classifiers: VerbClassifierBank,
    pub complementary: ComplementaryStream,
}

/// Recorded values of one scene's forward pass.
#[derive(Clone, Debug)]
pub struct SceneEncoding {
    /// `[humans + objects x d]`, humans first, in scene order.
    pub memory: Var,
    pub encoder: Option<EncoderOutput>,
}

impl SceneEncoding {
    pub fn m_att(&self) -> Vec<Var> {
        self.encoder.as_ref().map(EncoderOutput::m_att).unwrap_or_default()
    }
}

#[derive(Clone, Debug)]
pub struct PairForward {
    /// `Verb_o` of the object class; empty when the class never co-occurs.
    pub verbs: Vec<usize>,
    /// `[verbs x 1]`, absent when `verbs` is empty.
    pub s_r: Option<Var>,
    /// `[1 x V]`.
    pub s_c: Var,
    /// `attention[layer][head]`, `[verbs x instances]`.
    pub attention: Vec<Vec<Var>>,
}

/// Decoder attention of one pair, read back from the tape.
#[derive(Clone, Debug)]
pub struct AttentionDump {
    pub verbs: Vec<usize>,
    /// Instance id of each memory row (humans then objects).
    pub instance_ids: Vec<u32>,
    pub layers: Vec<Vec<Tensor>>,
}

impl Model {
    pub fn new(config: ModelConfig, kb: KnowledgeBase) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, config.init_seed);
        let d = config.dim;
        let embed = InstanceEmbedding::new(&mut init, config.appearance_dim, d);
        let encoder = (config.enc_layers > 0)
            .then(|| Encoder::new(&mut init, config.enc_layers, d, config.heads, config.layer_norm));
        let queries =
            (config.dec_layers > 0).then(|| QueryBuilder::new(&mut init, d, config.knowledge_augmentation));
        let decoder = Decoder::new(&mut init, config.dec_layers, d, config.heads, config.layer_norm);
        let classifiers = VerbClassifierBank::new(&mut init, kb.num_verbs, d);
        let complementary = ComplementaryStream::new(&mut init, config.appearance_dim, config.sc_hidden, kb.num_verbs);
        Ok(Self {
            config,
            kb,
            params,
            embed,
            encoder,
            queries,
            decoder,
            classifiers,
            complementary,
        })
    }

    pub fn num_verbs(&self) -> usize {
        self.kb.num_verbs
    }

    /// Checks appearance widths and class ids against the model.
    pub fn check_scene(&self, scene: &Scene) -> Result<()> {
        for inst in scene.humans.iter().chain(&scene.objects) {
            if inst.appearance.len() != self.config.appearance_dim {
                return Err(Error::Data(format!(
                    "instance {} has appearance width {}, model expects {}",
                    inst.id,
                    inst.appearance.len(),
                    self.config.appearance_dim
                )));
            }
            if inst.class_id >= self.kb.num_object_classes {
                return Err(Error::Data(format!(
                    "instance {} class {} outside {} classes",
                    inst.id, inst.class_id, self.kb.num_object_classes
                )));
            }
        }
        for t in &scene.gt_triplets {
            if t.verb >= self.kb.num_verbs || t.object_class >= self.kb.num_object_classes {
                return Err(Error::Data(format!(
                    "triplet verb {} / class {} outside the vocabulary",
                    t.verb, t.object_class
                )));
            }
        }
        Ok(())
    }

    /// Embeds every instance and runs the encoder once for the whole scene.
    pub fn encode_scene(&self, tape: &mut Tape, p: &Bound, scene: &Scene) -> Result<SceneEncoding> {
        let instances: Vec<_> = scene.humans.iter().chain(&scene.objects).collect();
        if instances.is_empty() {
            return Err(Error::EmptyGroup("scene"));
        }
        let n = instances.len();
        let mut app = Vec::with_capacity(n * self.config.appearance_dim);
        let mut codes = Vec::with_capacity(n * 5);
        for inst in &instances {
            app.extend_from_slice(&inst.appearance);
            codes.extend(position_code(&inst.bbox, scene.image_width, scene.image_height)?);
        }
        let app = tape.constant(Tensor::new(&[n, self.config.appearance_dim], app)?);
        let codes = tape.constant(Tensor::new(&[n, 5], codes)?);
        let x = self.embed.forward(tape, p, app, codes)?;
        match &self.encoder {
            None => Ok(SceneEncoding {
                memory: x,
                encoder: None,
            }),
            Some(enc) => {
                let flags: Vec<bool> = instances.iter().map(|i| i.is_human).collect();
                let out = enc.forward(tape, p, x, &flags)?;
                Ok(SceneEncoding {
                    memory: out.features,
                    encoder: Some(out),
                })
            }
        }
    }

    /// Verb queries, decoding, and both score streams for one pair.
    pub fn forward_pair(
        &self,
        tape: &mut Tape,
        p: &Bound,
        scene: &Scene,
        encoding: &SceneEncoding,
        pair: &PairProposal,
    ) -> Result<PairForward> {
        let human = &scene.humans[pair.human_index];
        let object = &scene.objects[pair.object_index];
        let s_c = self
            .complementary
            .forward(tape, p, &human.appearance, &object.appearance, pair)?;
        let verbs = match self.kb.verbs_for_object(object.class_id) {
            Ok(v) => v.to_vec(),
            Err(Error::EmptyCooccurrence(_)) => {
                return Ok(PairForward {
                    verbs: Vec::new(),
                    s_r: None,
                    s_c,
                    attention: Vec::new(),
                })
            }
            Err(e) => return Err(e),
        };
        let (clues, attention) = match &self.queries {
            None => {
                // encoder-only: every verb classifier reads the pair's enhanced features
                let n = verbs.len();
                let hrow = pair.human_index;
                let orow = scene.humans.len() + pair.object_index;
                let hf = tape.gather_rows(encoding.memory, &vec![hrow; n])?;
                let of = tape.gather_rows(encoding.memory, &vec![orow; n])?;
                (tape.add(hf, of)?, Vec::new())
            }
            Some(queries) => {
                let base = queries.build_base_query(tape, p, pair, object.class_id, &self.kb)?;
                let q = queries.augment_queries(tape, p, base, &verbs, &self.kb)?;
                let out = self.decoder.forward(tape, p, q, encoding.memory)?;
                (out.clues, out.attention)
            }
        };
        let s_r = self.classifiers.verb_scores(tape, p, clues, &verbs)?;
        Ok(PairForward {
            verbs,
            s_r: Some(s_r),
            s_c,
            attention,
        })
    }

    /// Pairs, encodes, suppresses, decodes and fuses; one triplet per (pair, verb in `Verb_o`).
    pub fn detect(&self, scene: &Scene, scene_index: usize, cfg: &InferenceConfig) -> Result<Vec<ScoredTriplet>> {
        self.check_scene(scene)?;
        let pairs = pair_proposals(scene, cfg.thresholds())?;
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let encoding = self.encode_scene(&mut tape, &p, scene)?;
        let pairs = match encoding.m_att().last() {
            Some(&m) => suppress(pairs, tape.value(m), cfg.suppression_threshold)?,
            None => pairs,
        };
        let mut out = Vec::new();
        for pair in &pairs {
            let f = self.forward_pair(&mut tape, &p, scene, &encoding, pair)?;
            let Some(s_r) = f.s_r else { continue };
            let human = &scene.humans[pair.human_index];
            let object = &scene.objects[pair.object_index];
            let s_r = tape.value(s_r).data().to_vec();
            let s_c = tape.value(f.s_c).data();
            for (i, &verb) in f.verbs.iter().enumerate() {
                out.push(ScoredTriplet {
                    scene: scene_index,
                    human_id: human.id,
                    human_box: human.bbox,
                    human_score: human.score,
                    object_id: object.id,
                    object_box: object.bbox,
                    object_class: object.class_id,
                    object_score: object.score,
                    verb,
                    s_r: s_r[i],
                    s_c: s_c[verb],
                    score: fuse(human.score, object.score, s_r[i], s_c[verb])?,
                });
            }
        }
        sort_triplets(&mut out);
        Ok(out)
    }

    /// Detections of every scene, indexed by position, merged and sorted.
    pub fn detect_all(&self, scenes: &[Scene], cfg: &InferenceConfig) -> Result<Vec<ScoredTriplet>> {
        let mut out = Vec::new();
        for (i, scene) in scenes.iter().enumerate() {
            out.extend(self.detect(scene, i, cfg)?);
        }
        sort_triplets(&mut out);
        Ok(out)
    }

    /// Decoder attention for the pair `(human_id, object_id)`.
    pub fn attention_dump(&self, scene: &Scene, human_id: u32, object_id: u32) -> Result<AttentionDump> {
        self.check_scene(scene)?;
        let hi = scene
            .human_index(human_id)
            .ok_or_else(|| Error::Data(format!("no human with id {human_id}")))?;
        let oi = scene
            .object_index(object_id)
            .ok_or_else(|| Error::Data(format!("no object with id {object_id}")))?;
        let pair = PairProposal::new(scene, hi, oi)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let encoding = self.encode_scene(&mut tape, &p, scene)?;
        let f = self.forward_pair(&mut tape, &p, scene, &encoding, &pair)?;
        Ok(AttentionDump {
            verbs: f.verbs,
            instance_ids: scene.humans.iter().chain(&scene.objects).map(|i| i.id).collect(),
            layers: f
                .attention
                .iter()
                .map(|heads| heads.iter().map(|&w| tape.value(w).clone()).collect())
                .collect(),
        })
    }

    /// Scalar count of the parameters whose names start with `prefix`.
    pub fn count_params(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }
}
