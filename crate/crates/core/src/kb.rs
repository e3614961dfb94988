//! Verb vocabulary, object vocabulary, verb-object co-occurrence and the
//! seeded word-embedding tables standing in for pretrained vectors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::HUMAN_CLASS;
use crate::tensor::Tensor;

pub const EMBED_DIM: usize = 32;
const EMBED_SEED: u64 = 0x6b62_616e_5f65_6d62;

/// On-disk layout: `{num_verbs, num_object_classes, cooccur: {class_id: [verb ids]}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeBaseFile {
    pub num_verbs: usize,
    pub num_object_classes: usize,
    pub cooccur: BTreeMap<String, Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeBase {
    pub num_verbs: usize,
    /// Class ids run over `0..num_object_classes`; class 0 is reserved for humans.
    pub num_object_classes: usize,
    cooccur: Vec<Vec<usize>>,
    pub object_embed: Tensor,
    pub verb_embed: Tensor,
}

impl KnowledgeBase {
    /// Builds the tables; verb lists are sorted and deduplicated.
    pub fn new(num_verbs: usize, num_object_classes: usize, cooccur: Vec<Vec<usize>>) -> Result<Self> {
        if num_verbs == 0 || num_object_classes < 2 {
            return Err(Error::Config(format!(
                "need at least one verb and one non-human class, got V={num_verbs}, O={num_object_classes}"
            )));
        }
        if cooccur.len() != num_object_classes {
            return Err(Error::Config(format!(
                "co-occurrence table has {} classes, expected {num_object_classes}",
                cooccur.len()
            )));
        }
        let mut table = Vec::with_capacity(num_object_classes);
        for (class, verbs) in cooccur.into_iter().enumerate() {
            let mut verbs = verbs;
            if let Some(&bad) = verbs.iter().find(|&&v| v >= num_verbs) {
                return Err(Error::Config(format!("class {class}: verb {bad} out of range")));
            }
            verbs.sort_unstable();
            verbs.dedup();
            table.push(verbs);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(EMBED_SEED);
        let object_embed = Tensor::uniform(&[num_object_classes, EMBED_DIM], 1.0, &mut rng);
        let verb_embed = Tensor::uniform(&[num_verbs, EMBED_DIM], 1.0, &mut rng);
        Ok(Self {
            num_verbs,
            num_object_classes,
            cooccur: table,
            object_embed,
            verb_embed,
        })
    }

    pub fn from_file(file: KnowledgeBaseFile) -> Result<Self> {
        let mut cooccur = vec![Vec::new(); file.num_object_classes];
        for (key, verbs) in file.cooccur {
            let class: usize = key
                .parse()
                .map_err(|_| Error::Config(format!("co-occurrence key {key:?} is not a class id")))?;
            let slot = cooccur.get_mut(class).ok_or(Error::UnknownClass(class))?;
            slot.extend(verbs);
        }
        Self::new(file.num_verbs, file.num_object_classes, cooccur)
    }

    pub fn to_file(&self) -> KnowledgeBaseFile {
        KnowledgeBaseFile {
            num_verbs: self.num_verbs,
            num_object_classes: self.num_object_classes,
            cooccur: self
                .cooccur
                .iter()
                .enumerate()
                .filter(|(_, v)| !v.is_empty())
                .map(|(c, v)| (c.to_string(), v.clone()))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let file: KnowledgeBaseFile =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("knowledge base: {e}")))?;
        Self::from_file(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file())?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    /// `Verb_o` in ascending verb-id order.
    pub fn verbs_for_object(&self, class_id: usize) -> Result<&[usize]> {
        let verbs = self.cooccur.get(class_id).ok_or(Error::UnknownClass(class_id))?;
        if verbs.is_empty() {
            return Err(Error::EmptyCooccurrence(class_id));
        }
        Ok(verbs)
    }

    pub fn cooccur(&self) -> &[Vec<usize>] {
        &self.cooccur
    }

    /// Object classes usable for non-human instances.
    pub fn object_classes(&self) -> impl Iterator<Item = usize> {
        (0..self.num_object_classes).filter(|&c| c != HUMAN_CLASS)
    }
}
