//! Data model and file I/O for embeddings, trial lists, quality manifests,
//! score sets and calibration-model files.
//!
//! All loaders reject non-finite values and report malformed input with the
//! offending line number. All savers write atomically (temp file + rename)
//! and serialize floats as the shortest decimal that parses back to the
//! identical binary value, so a save/load round trip is bit-exact.

mod io;

pub use io::{
    load_embeddings, load_model, load_quality, load_scores, load_trials, save_embeddings,
    save_model, save_quality, save_scores, save_trials,
};
pub(crate) use io::atomic_write;

use indexmap::IndexMap;

use crate::error::{Error, Result};

/// On-disk layout for embedding stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingFormat {
    /// One record per line: `<id>\t<v1> <v2> ... <vD>`.
    Tsv,
    /// Magic `EMB1`, u32-LE dim, then `u16-LE id-len, id bytes, dim f32-LE` records.
    Bin,
}

/// A single utterance embedding. Components are stored single-precision
/// (matching the binary file format); all arithmetic over them accumulates
/// in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub id: String,
    pub vector: Vec<f32>,
}

impl Embedding {
    /// Validates the id (non-empty, no whitespace) and the components (finite).
    pub fn new(id: impl Into<String>, vector: Vec<f32>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::invalid("empty utterance id"));
        }
        if id.chars().any(char::is_whitespace) {
            return Err(Error::invalid(format!("utterance id {id:?} contains whitespace")));
        }
        if vector.is_empty() {
            return Err(Error::invalid(format!("embedding {id}: empty vector")));
        }
        if !vector.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!("embedding {id}: non-finite component")));
        }
        Ok(Embedding { id, vector })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// Euclidean norm, accumulated in f64.
    pub fn magnitude(&self) -> f64 {
        self.vector
            .iter()
            .map(|&v| {
                let v = v as f64;
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Fixed-dimension utterance-id -> embedding map, optionally carrying
/// per-utterance speaker labels. Iteration follows insertion order, which
/// makes every downstream computation and file output deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    entries: IndexMap<String, Embedding>,
    speakers: Option<IndexMap<String, String>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dim must be positive"));
        }
        Ok(EmbeddingStore {
            dim,
            entries: IndexMap::new(),
            speakers: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Rejects dimension mismatches and duplicate ids.
    pub fn insert(&mut self, embedding: Embedding) -> Result<()> {
        if embedding.dim() != self.dim {
            return Err(Error::invalid(format!(
                "dimension mismatch: embedding {} has dim {}, store has dim {}",
                embedding.id,
                embedding.dim(),
                self.dim
            )));
        }
        if self.entries.contains_key(&embedding.id) {
            return Err(Error::invalid(format!("duplicate id {}", embedding.id)));
        }
        self.entries.insert(embedding.id.clone(), embedding);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Embedding> {
        self.entries.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Embedding> {
        self.entries.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Attaches speaker labels. Every embedding id must be covered.
    pub fn set_speakers(&mut self, speakers: IndexMap<String, String>) -> Result<()> {
        for id in self.entries.keys() {
            if !speakers.contains_key(id) {
                return Err(Error::invalid(format!("no speaker label for utterance {id}")));
            }
        }
        self.speakers = Some(speakers);
        Ok(())
    }

    pub fn speaker_of(&self, id: &str) -> Option<&str> {
        self.speakers.as_ref()?.get(id).map(String::as_str)
    }

    pub fn has_speakers(&self) -> bool {
        self.speakers.is_some()
    }
}

/// Same-speaker / different-speaker ground truth for a trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialLabel {
    Target,
    Nontarget,
}

/// One (enroll, test) pair to be judged, with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub label: Option<TrialLabel>,
}

impl Trial {
    pub fn new(enroll: impl Into<String>, test: impl Into<String>, label: Option<TrialLabel>) -> Result<Self> {
        let enroll = enroll.into();
        let test = test.into();
        if enroll.is_empty() || test.is_empty() {
            return Err(Error::invalid("trial with empty utterance id"));
        }
        Ok(Trial { enroll, test, label })
    }

    pub fn key(&self) -> (String, String) {
        (self.enroll.clone(), self.test.clone())
    }
}

/// Ordered list of trials, preserving input file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn new(trials: Vec<Trial>) -> Self {
        TrialList { trials }
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Trial> {
        self.trials.iter()
    }

    /// Labels of all trials, erroring on the first unlabeled one.
    pub fn labels(&self) -> Result<Vec<TrialLabel>> {
        self.trials
            .iter()
            .map(|t| {
                t.label.ok_or_else(|| {
                    Error::invalid(format!("unlabeled trial {} {}", t.enroll, t.test))
                })
            })
            .collect()
    }
}

/// Per-utterance side information consumed by calibration and fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityRecord {
    pub id: String,
    /// Seconds, >= 0.
    pub duration: f64,
    /// Decibels.
    pub snr: f64,
    /// Reverberation time in seconds, >= 0.
    pub t60: f64,
    /// Mean opinion score in [1, 5].
    pub mos: f64,
}

impl QualityRecord {
    pub fn new(id: impl Into<String>, duration: f64, snr: f64, t60: f64, mos: f64) -> Result<Self> {
        let id = id.into();
        if ![duration, snr, t60, mos].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!("quality record {id}: non-finite value")));
        }
        if duration < 0.0 {
            return Err(Error::invalid(format!("quality record {id}: negative duration")));
        }
        if t60 < 0.0 {
            return Err(Error::invalid(format!("quality record {id}: negative t60")));
        }
        if !(1.0..=5.0).contains(&mos) {
            return Err(Error::invalid(format!("quality record {id}: mos out of range")));
        }
        Ok(QualityRecord { id, duration, snr, t60, mos })
    }
}

/// Utterance id -> quality record map.
pub type QualityMap = IndexMap<String, QualityRecord>;

/// Pipeline stage a score set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Raw,
    Normalized,
    Calibrated,
    Fused,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Raw => "raw",
            Stage::Normalized => "normalized",
            Stage::Calibrated => "calibrated",
            Stage::Fused => "fused",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-system, per-trial score table carried through
/// normalize -> calibrate -> fuse. Keys follow insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub system: String,
    pub stage: Stage,
    scores: IndexMap<(String, String), f64>,
}

impl ScoreSet {
    pub fn new(system: impl Into<String>, stage: Stage) -> Self {
        ScoreSet {
            system: system.into(),
            stage,
            scores: IndexMap::new(),
        }
    }

    pub fn with_system(mut self, system: impl Into<String>) -> Self {
        self.system = system.into();
        self
    }

    pub fn with_stage(mut self, stage: Stage) -> Self {
        self.stage = stage;
        self
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Rejects non-finite scores and duplicate keys (unless the score is
    /// bit-identical, which makes re-insertion of the same trial a no-op).
    pub fn insert(&mut self, enroll: impl Into<String>, test: impl Into<String>, score: f64) -> Result<()> {
        if !score.is_finite() {
            return Err(Error::invalid("non-finite score"));
        }
        let key = (enroll.into(), test.into());
        if let Some(&prev) = self.scores.get(&key) {
            if prev.to_bits() != score.to_bits() {
                return Err(Error::invalid(format!(
                    "conflicting duplicate score for trial {} {}",
                    key.0, key.1
                )));
            }
            return Ok(());
        }
        self.scores.insert(key, score);
        Ok(())
    }

    pub fn get(&self, enroll: &str, test: &str) -> Option<f64> {
        self.scores.get(&(enroll.to_string(), test.to_string())).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, String), f64)> {
        self.scores.iter().map(|(k, &v)| (k, v))
    }

    /// Checks the key set equals the trial list's key set, both directions.
    pub fn check_matches(&self, trials: &TrialList) -> Result<()> {
        for t in trials.iter() {
            if self.get(&t.enroll, &t.test).is_none() {
                return Err(Error::invalid(format!(
                    "score set {} missing trial {} {}",
                    self.system, t.enroll, t.test
                )));
            }
        }
        let trial_keys: std::collections::HashSet<(&str, &str)> = trials
            .iter()
            .map(|t| (t.enroll.as_str(), t.test.as_str()))
            .collect();
        for ((e, t), _) in self.iter() {
            if !trial_keys.contains(&(e.as_str(), t.as_str())) {
                return Err(Error::invalid(format!(
                    "score set {} has extra trial {e} {t} not in the trial list",
                    self.system
                )));
            }
        }
        Ok(())
    }
}
