//! Deterministic augmentation-manifest planner: speed-perturbation speaker
//! expansion and offline noise-augmentation multiplicity.
//!
//! The planner only does bookkeeping over (utterance, speaker) manifests; no
//! audio is touched. Speed-perturbed copies get the id suffix `#sp<factor>`
//! and a new speaker identity `<speaker>#sp<factor>`; noise copies get the
//! id suffix `#<type>` and keep their speaker. A counts-only manifest skips
//! entry materialization and applies the same arithmetic directly, which is
//! what full-corpus planning uses.

use std::path::Path;

use indexmap::IndexSet;

use crate::corpus::atomic_write;
use crate::error::{Error, Result};

/// Offline disturbance types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseType {
    Babble,
    Music,
    Noise,
    Reverb,
}

impl NoiseType {
    pub const ALL: [NoiseType; 4] = [
        NoiseType::Babble,
        NoiseType::Music,
        NoiseType::Noise,
        NoiseType::Reverb,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseType::Babble => "babble",
            NoiseType::Music => "music",
            NoiseType::Noise => "noise",
            NoiseType::Reverb => "reverb",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "babble" => Ok(NoiseType::Babble),
            "music" => Ok(NoiseType::Music),
            "noise" => Ok(NoiseType::Noise),
            "reverb" => Ok(NoiseType::Reverb),
            other => Err(Error::invalid(format!("unknown noise type {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Contents {
    Entries(Vec<(String, String)>),
    CountsOnly { n_speakers: u64, n_utterances: u64 },
}

/// An (utterance id, speaker label) manifest, or just its counts.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    contents: Contents,
}

impl DatasetManifest {
    pub fn from_entries(entries: Vec<(String, String)>) -> Self {
        DatasetManifest {
            contents: Contents::Entries(entries),
        }
    }

    /// A manifest known only by its counts; planning on it is pure
    /// arithmetic.
    pub fn counts_only(n_speakers: u64, n_utterances: u64) -> Self {
        DatasetManifest {
            contents: Contents::CountsOnly {
                n_speakers,
                n_utterances,
            },
        }
    }

    pub fn n_utterances(&self) -> u64 {
        match &self.contents {
            Contents::Entries(e) => e.len() as u64,
            Contents::CountsOnly { n_utterances, .. } => *n_utterances,
        }
    }

    pub fn n_speakers(&self) -> u64 {
        match &self.contents {
            Contents::Entries(e) => {
                let distinct: IndexSet<&str> = e.iter().map(|(_, s)| s.as_str()).collect();
                distinct.len() as u64
            }
            Contents::CountsOnly { n_speakers, .. } => *n_speakers,
        }
    }

    pub fn entries(&self) -> Option<&[(String, String)]> {
        match &self.contents {
            Contents::Entries(e) => Some(e),
            Contents::CountsOnly { .. } => None,
        }
    }

    /// Reads a manifest TSV: `<id>\t<speaker>` per line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let (id, speaker) = raw
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, line_no, "expected <id>\\t<speaker>"))?;
            if id.is_empty() || speaker.is_empty() {
                return Err(Error::parse(path, line_no, "empty id or speaker"));
            }
            entries.push((id.to_string(), speaker.to_string()));
        }
        Ok(Self::from_entries(entries))
    }

    /// Writes the manifest TSV. Counts-only manifests have no entries to
    /// write and are rejected.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let entries = self
            .entries()
            .ok_or_else(|| Error::invalid("cannot save a counts-only manifest"))?;
        let mut out = String::new();
        for (id, speaker) in entries {
            out.push_str(id);
            out.push('\t');
            out.push_str(speaker);
            out.push('\n');
        }
        atomic_write(path.as_ref(), out.as_bytes())
    }
}

/// Augmentation plan summary; the expected multiplier is
/// `(1 + #speed-factors) * (1 + #noise-types)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugPlan {
    pub speed_factors: Vec<f64>,
    pub noise_types: Vec<NoiseType>,
}

impl AugPlan {
    pub fn expected_multiplier(&self) -> u64 {
        (1 + self.speed_factors.len() as u64) * (1 + self.noise_types.len() as u64)
    }
}

fn validate_factors(factors: &[f64]) -> Result<()> {
    if factors.is_empty() {
        return Err(Error::invalid("no speed factors given"));
    }
    let mut seen = IndexSet::new();
    for &f in factors {
        if !(f > 0.0) || !f.is_finite() {
            return Err(Error::invalid(format!("speed factor must be positive, got {f}")));
        }
        if f == 1.0 {
            return Err(Error::invalid("speed factor 1 is the original"));
        }
        if !seen.insert(f.to_bits()) {
            return Err(Error::invalid(format!("duplicate speed factor {f}")));
        }
    }
    Ok(())
}

fn validate_types(types: &[NoiseType]) -> Result<()> {
    let mut seen = IndexSet::new();
    for t in types {
        if !seen.insert(*t) {
            return Err(Error::invalid(format!("duplicate noise type {}", t.as_str())));
        }
    }
    Ok(())
}

/// Replicates every utterance once per speed factor, under a new speaker
/// identity per factor; originals are retained first.
pub fn plan_speed_perturb(manifest: &DatasetManifest, factors: &[f64]) -> Result<DatasetManifest> {
    validate_factors(factors)?;
    let k = factors.len() as u64;
    match &manifest.contents {
        Contents::CountsOnly {
            n_speakers,
            n_utterances,
        } => Ok(DatasetManifest::counts_only(
            n_speakers * (1 + k),
            n_utterances * (1 + k),
        )),
        Contents::Entries(entries) => {
            let mut out = Vec::with_capacity(entries.len() * (1 + k as usize));
            out.extend(entries.iter().cloned());
            for f in factors {
                for (id, speaker) in entries {
                    out.push((format!("{id}#sp{f}"), format!("{speaker}#sp{f}")));
                }
            }
            Ok(DatasetManifest::from_entries(out))
        }
    }
}

/// Replicates every utterance once per disturbance type, keeping its
/// speaker; originals are retained first.
pub fn plan_noise_aug(manifest: &DatasetManifest, types: &[NoiseType]) -> Result<DatasetManifest> {
    validate_types(types)?;
    let k = types.len() as u64;
    match &manifest.contents {
        Contents::CountsOnly {
            n_speakers,
            n_utterances,
        } => Ok(DatasetManifest::counts_only(
            *n_speakers,
            n_utterances * (1 + k),
        )),
        Contents::Entries(entries) => {
            let mut out = Vec::with_capacity(entries.len() * (1 + k as usize));
            out.extend(entries.iter().cloned());
            for t in types {
                for (id, speaker) in entries {
                    out.push((format!("{id}#{}", t.as_str()), speaker.clone()));
                }
            }
            Ok(DatasetManifest::from_entries(out))
        }
    }
}
