//! Seeded synthetic benchmark generator.
//!
//! Produces an embedding store with speaker labels, a labeled trial list and
//! a quality manifest, fully determined by the seed. Each speaker draws from
//! its own ChaCha12 stream (stream index = speaker index + 1; stream 0 is
//! reserved for trial sampling), so adding a speaker never perturbs existing
//! speakers' draws.
//!
//! Construction: per speaker a unit-norm centroid uniform on the sphere
//! (normalized standard normals); each utterance adds within-speaker
//! Gaussian noise; the first half of each speaker's utterances additionally
//! gets that speaker's channel-bias vector, creating the enroll/test
//! mismatch that S-Norm corrects. Targets are all same-speaker pairs;
//! nontargets an equal-count random sample of cross-speaker pairs.

use std::f64::consts::PI;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::augplan::DatasetManifest;
use crate::corpus::{
    Embedding, EmbeddingStore, QualityMap, QualityRecord, Trial, TrialLabel, TrialList,
};
use crate::error::{Error, Result};

/// Generator configuration; all randomness derives from `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub dim: usize,
    /// Within-speaker noise scale (sigma_w).
    pub within_noise: f64,
    /// Channel-bias scale applied to the enroll half (sigma_c).
    pub channel_bias_scale: f64,
    pub seed: u64,
}

impl SimConfig {
    fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::invalid(
                "need at least 2 speakers (no nontarget pairs possible)",
            ));
        }
        if self.utts_per_speaker == 0 || self.dim == 0 {
            return Err(Error::invalid("counts must be positive"));
        }
        if !self.within_noise.is_finite()
            || !self.channel_bias_scale.is_finite()
            || self.within_noise < 0.0
            || self.channel_bias_scale < 0.0
        {
            return Err(Error::invalid("noise scales must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Everything one simulated benchmark consists of.
#[derive(Debug, Clone, PartialEq)]
pub struct SimData {
    pub store: EmbeddingStore,
    pub trials: TrialList,
    pub quality: QualityMap,
}

impl SimData {
    /// Speaker manifest (`<id>\t<speaker>`) matching the store.
    pub fn speaker_manifest(&self) -> DatasetManifest {
        let entries = self
            .store
            .iter()
            .map(|e| {
                let speaker = self.store.speaker_of(&e.id).expect("generated store is labeled");
                (e.id.clone(), speaker.to_string())
            })
            .collect();
        DatasetManifest::from_entries(entries)
    }
}

/// Box-Muller gaussians over a ChaCha stream; hand-rolled so the draw
/// sequence is pinned by this crate, not by a distribution crate's internals.
struct Gaussians {
    rng: ChaCha12Rng,
    spare: Option<f64>,
}

impl Gaussians {
    fn new(rng: ChaCha12Rng) -> Self {
        Gaussians { rng, spare: None }
    }

    fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1: f64 = self.rng.gen();
        let u2: f64 = self.rng.gen();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let theta = 2.0 * PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    fn vector(&mut self, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| self.next()).collect()
    }

    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.gen::<f64>()
    }
}

fn stream(seed: u64, index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn unit_sphere(g: &mut Gaussians, dim: usize) -> Vec<f64> {
    loop {
        let v = g.vector(dim);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Generates the benchmark for `config`.
pub fn generate(config: &SimConfig) -> Result<SimData> {
    config.validate()?;
    let dim = config.dim;
    let utts = config.utts_per_speaker;
    let biased_half = utts / 2;

    let mut store = EmbeddingStore::new(dim)?;
    let mut speakers = IndexMap::new();
    let mut quality = QualityMap::new();
    let mut speaker_of_index: Vec<usize> = Vec::with_capacity(config.n_speakers * utts);
    let mut ids: Vec<String> = Vec::with_capacity(config.n_speakers * utts);

    for s in 0..config.n_speakers {
        let mut g = Gaussians::new(stream(config.seed, s as u64 + 1));
        let centroid = unit_sphere(&mut g, dim);
        let bias: Vec<f64> = g
            .vector(dim)
            .into_iter()
            .map(|x| x * config.channel_bias_scale)
            .collect();
        let speaker = format!("spk{s:04}");

        for j in 0..utts {
            let noise = g.vector(dim);
            let mut v = Vec::with_capacity(dim);
            for k in 0..dim {
                let mut x = centroid[k] + config.within_noise * noise[k];
                if j < biased_half {
                    x += bias[k];
                }
                v.push(x as f32);
            }
            let id = format!("{speaker}/utt{j:03}");
            store.insert(Embedding::new(id.clone(), v)?)?;
            speakers.insert(id.clone(), speaker.clone());
            quality.insert(
                id.clone(),
                QualityRecord::new(
                    id.clone(),
                    g.uniform(1.0, 10.0),
                    g.uniform(0.0, 20.0),
                    g.uniform(0.1, 1.0),
                    g.uniform(1.0, 5.0),
                )?,
            );
            speaker_of_index.push(s);
            ids.push(id);
        }
    }
    store.set_speakers(speakers)?;

    // targets: all same-speaker pairs, speaker then index order
    let mut trials = Vec::new();
    for s in 0..config.n_speakers {
        let base = s * utts;
        for i in 0..utts {
            for j in i + 1..utts {
                trials.push(Trial::new(
                    ids[base + i].clone(),
                    ids[base + j].clone(),
                    Some(TrialLabel::Target),
                )?);
            }
        }
    }
    let n_targets = trials.len();

    // nontargets: equal-count distinct cross-speaker pairs from stream 0
    let mut rng = stream(config.seed, 0);
    let total = ids.len();
    let mut used: std::collections::HashSet<(usize, usize)> = std::collections::HashSet::new();
    let mut attempts = 0usize;
    let attempt_cap = 1000 * n_targets.max(1) + 10_000;
    while used.len() < n_targets {
        attempts += 1;
        if attempts > attempt_cap {
            return Err(Error::invalid(
                "unable to sample enough distinct cross-speaker pairs",
            ));
        }
        let a = rng.gen_range(0..total);
        let b = rng.gen_range(0..total);
        if speaker_of_index[a] == speaker_of_index[b] {
            continue;
        }
        if used.insert((a, b)) {
            trials.push(Trial::new(
                ids[a].clone(),
                ids[b].clone(),
                Some(TrialLabel::Nontarget),
            )?);
        }
    }

    Ok(SimData {
        store,
        trials: TrialList::new(trials),
        quality,
    })
}
