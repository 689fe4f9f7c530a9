//! Scenes, triples, vocabularies, run configuration, and the JSON-lines
//! dataset format.
//!
//! File layout: line 1 carries the vocabulary, every following line one
//! scene. Saving produces a canonical form (fixed key order, shortest
//! round-trip floats, newline-terminated) so `save ∘ load` is the
//! identity on canonical files.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::Real;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: missing vocab header")]
    MissingVocab { line: usize },
    #[error("scene {scene_id}: {message}")]
    Invalid { scene_id: String, message: String },
    #[error("vocab: {0}")]
    InvalidVocab(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: Real,
    pub y1: Real,
    pub x2: Real,
    pub y2: Real,
}

impl BBox {
    pub fn new(x1: Real, y1: Real, x2: Real, y2: Real) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn is_valid(&self) -> bool {
        let in_unit = |v: Real| (0.0..=1.0).contains(&v);
        self.x1 < self.x2
            && self.y1 < self.y2
            && [self.x1, self.y1, self.x2, self.y2].iter().all(|&v| in_unit(v))
    }

    pub fn center(&self) -> (Real, Real) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    pub category_id: usize,
    pub bbox: BBox,
    /// Optional in files; a feature provider fills the gap otherwise.
    pub feature: Option<Vec<Real>>,
}

/// Ground-truth relation instance `(subject, predicate, object)` by
/// entity index within the scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
}

impl Triple {
    pub fn new(subject: usize, predicate: usize, object: usize) -> Self {
        Triple { subject, predicate, object }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub entities: Vec<Entity>,
    pub gt_triples: Vec<Triple>,
}

impl Scene {
    pub fn validate(&self, vocab: &Vocab, feature_dim: Option<usize>) -> Result<()> {
        let err = |message: String| DataError::Invalid {
            scene_id: self.scene_id.clone(),
            message,
        };
        if self.entities.is_empty() {
            return Err(err("scene has no entities".into()));
        }
        for (i, e) in self.entities.iter().enumerate() {
            if e.category_id >= vocab.categories.len() {
                return Err(err(format!("entity {i}: category {} out of range", e.category_id)));
            }
            if !e.bbox.is_valid() {
                return Err(err(format!("entity {i}: invalid bbox {:?}", e.bbox)));
            }
            if let (Some(f), Some(dim)) = (&e.feature, feature_dim) {
                if f.len() != dim {
                    return Err(err(format!("entity {i}: feature length {} != {dim}", f.len())));
                }
            }
        }
        let mut seen = BTreeSet::new();
        for t in &self.gt_triples {
            if t.subject == t.object {
                return Err(err(format!("triple ({},{},{}) relates an entity to itself", t.subject, t.predicate, t.object)));
            }
            if t.subject >= self.entities.len() || t.object >= self.entities.len() {
                return Err(err(format!("triple ({},{},{}) references a missing entity", t.subject, t.predicate, t.object)));
            }
            if t.predicate >= vocab.predicates.len() {
                return Err(err(format!("triple ({},{},{}): unknown predicate id", t.subject, t.predicate, t.object)));
            }
            if !seen.insert(*t) {
                return Err(err(format!("duplicate triple ({},{},{})", t.subject, t.predicate, t.object)));
            }
        }
        Ok(())
    }
}

/// Category and predicate names plus the semantic-property groups used by
/// the property-aware metrics and by augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub categories: Vec<String>,
    pub predicates: Vec<String>,
    /// Predicates where (s,p,o) implies not (o,p,s).
    pub asymmetric: Vec<usize>,
    /// Predicates where (s,p,o) implies (o,p,s).
    pub symmetric: Vec<usize>,
    /// Pairs (p,q) where (s,p,o) holds iff (o,q,s).
    pub inverse: Vec<(usize, usize)>,
}

impl Vocab {
    pub fn validate(&self) -> Result<()> {
        let n = self.predicates.len();
        for &p in self.asymmetric.iter().chain(&self.symmetric) {
            if p >= n {
                return Err(DataError::InvalidVocab(format!("property group references predicate {p} >= {n}")));
            }
        }
        for &p in &self.asymmetric {
            if self.symmetric.contains(&p) {
                return Err(DataError::InvalidVocab(format!(
                    "predicate {p} is both asymmetric and symmetric"
                )));
            }
        }
        for &(p, q) in &self.inverse {
            if p >= n || q >= n {
                return Err(DataError::InvalidVocab(format!("inverse pair ({p},{q}) out of range")));
            }
            if p == q {
                return Err(DataError::InvalidVocab(format!("inverse pair ({p},{p}) is not a pair of distinct predicates")));
            }
        }
        Ok(())
    }

    /// Partner of `p` under the inverse pairing, if any.
    pub fn inverse_of(&self, p: usize) -> Option<usize> {
        self.inverse.iter().find_map(|&(a, b)| {
            if a == p {
                Some(b)
            } else if b == p {
                Some(a)
            } else {
                None
            }
        })
    }

    /// FNV-1a over the canonical JSON; ties checkpoints to the vocabulary
    /// they were trained against.
    pub fn hash(&self) -> u64 {
        let bytes = serde_json::to_vec(self).expect("vocab serializes");
        crate::fnv1a(&bytes)
    }
}

/// Hyper-parameters and ablation switches for a full run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Relation-score weight.
    pub beta: Real,
    /// Pair-proposal count.
    pub top_n: usize,
    /// Embedding dimension D.
    pub embed_dim: usize,
    /// Entity/context feature dimension F.
    pub feature_dim: usize,
    pub branch_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub relnet_hidden: Vec<usize>,
    pub learning_rate: Real,
    pub epochs: usize,
    pub seed: u64,
    pub recall_ks: Vec<usize>,
    pub use_relation_embedding: bool,
    pub use_subject_object_embeddings: bool,
    pub use_relation_possibility: bool,
    /// Constrains the scorer to order-invariant pair inputs (shared
    /// branch, symmetric pair encoding); used for the bias experiments.
    pub symmetric_scorer: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            beta: 120.0,
            top_n: 100,
            embed_dim: 64,
            feature_dim: 8,
            branch_hidden: vec![128, 128],
            head_hidden: vec![64, 64],
            relnet_hidden: vec![64, 64],
            learning_rate: 1e-3,
            epochs: 30,
            seed: 0,
            recall_ks: vec![20, 50, 100],
            use_relation_embedding: true,
            use_subject_object_embeddings: true,
            use_relation_possibility: true,
            symmetric_scorer: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::InvalidVocab(format!("config: {m}")));
        if self.beta <= 0.0 {
            return bad("beta must be positive");
        }
        if self.top_n == 0 {
            return bad("top_n must be >= 1");
        }
        if self.recall_ks.is_empty() || self.recall_ks.windows(2).any(|w| w[0] >= w[1]) {
            return bad("recall cutoffs must be positive ascending");
        }
        if !self.use_relation_embedding && !self.use_subject_object_embeddings {
            return bad("at least one of relation embedding / subject-object embeddings must be enabled");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// JSON-lines wire format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct VocabLine {
    vocab: Vocab,
}

#[derive(Serialize, Deserialize)]
struct EntityLine {
    category: usize,
    bbox: [Real; 4],
    #[serde(skip_serializing_if = "Option::is_none")]
    feature: Option<Vec<Real>>,
}

#[derive(Serialize, Deserialize)]
struct SceneLine {
    scene_id: String,
    entities: Vec<EntityLine>,
    triples: Vec<[usize; 3]>,
}

impl From<&Scene> for SceneLine {
    fn from(s: &Scene) -> Self {
        SceneLine {
            scene_id: s.scene_id.clone(),
            entities: s
                .entities
                .iter()
                .map(|e| EntityLine {
                    category: e.category_id,
                    bbox: [e.bbox.x1, e.bbox.y1, e.bbox.x2, e.bbox.y2],
                    feature: e.feature.clone(),
                })
                .collect(),
            triples: s.gt_triples.iter().map(|t| [t.subject, t.predicate, t.object]).collect(),
        }
    }
}

impl From<SceneLine> for Scene {
    fn from(l: SceneLine) -> Self {
        Scene {
            scene_id: l.scene_id,
            entities: l
                .entities
                .into_iter()
                .map(|e| Entity {
                    category_id: e.category,
                    bbox: BBox::new(e.bbox[0], e.bbox[1], e.bbox[2], e.bbox[3]),
                    feature: e.feature,
                })
                .collect(),
            gt_triples: l.triples.into_iter().map(|t| Triple::new(t[0], t[1], t[2])).collect(),
        }
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<(Vec<Scene>, Vocab)> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut lines = BufReader::new(file).lines();

    let header = lines
        .next()
        .ok_or(DataError::MissingVocab { line: 1 })?
        .map_err(io_err)?;
    let vocab: Vocab = serde_json::from_str::<VocabLine>(&header)
        .map_err(|source| DataError::Parse { line: 1, source })?
        .vocab;
    vocab.validate()?;

    let mut scenes = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SceneLine =
            serde_json::from_str(&line).map_err(|source| DataError::Parse { line: idx + 2, source })?;
        let scene: Scene = parsed.into();
        scene.validate(&vocab, None)?;
        scenes.push(scene);
    }
    Ok((scenes, vocab))
}

pub fn save_dataset(scenes: &[Scene], vocab: &Vocab, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    vocab.validate()?;
    for scene in scenes {
        scene.validate(vocab, None)?;
    }
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let header = serde_json::to_string(&VocabLine { vocab: vocab.clone() }).expect("vocab serializes");
    writeln!(w, "{header}").map_err(io_err)?;
    for scene in scenes {
        let line = serde_json::to_string(&SceneLine::from(scene)).expect("scene serializes");
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}
