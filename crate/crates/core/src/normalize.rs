//! Cohort construction and adaptive symmetric score normalization (S-Norm).
//!
//! The cohort holds one length-normalized centroid per speaker (raw vectors
//! averaged, then normalized). Each trial side is scored against the whole
//! cohort; the mean and population standard deviation of the top-N imposter
//! scores z-normalize the raw score, averaged over both sides:
//!
//! ```text
//! snorm(s) = 0.5 * ((s - mu_e) / max(sigma_e, eps) + (s - mu_t) / max(sigma_t, eps))
//! ```
//!
//! Top-N selection is deterministic under ties: score descending, then
//! speaker label ascending.

use indexmap::{IndexMap, IndexSet};
use rayon::prelude::*;

use crate::corpus::{Embedding, EmbeddingStore, ScoreSet, Stage};
use crate::error::{Error, Result};
use crate::scoring::cosine;

/// Floor applied to sigma so degenerate cohorts never divide by zero.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Default top-N cohort size for adaptive normalization.
pub const DEFAULT_TOP_N: usize = 400;

/// Speaker-averaged, length-normalized centroid set.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    dim: usize,
    centroids: Vec<(String, Embedding)>,
}

impl Cohort {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Embedding)> {
        self.centroids.iter().map(|(s, e)| (s.as_str(), e))
    }

    /// Views the centroids as an embedding store (speaker label as id), the
    /// representation cohort files use on disk.
    pub fn to_store(&self) -> EmbeddingStore {
        let mut store = EmbeddingStore::new(self.dim).expect("cohort dim is positive");
        for (_, e) in &self.centroids {
            store.insert(e.clone()).expect("centroid ids are unique");
        }
        store
    }

    /// Reinterprets an embedding store as a cohort (ids are speaker labels).
    /// Centroids must already be unit-norm up to single-precision rounding;
    /// they are taken bit-as-is so a saved cohort normalizes identically.
    pub fn from_centroid_store(store: &EmbeddingStore) -> Result<Self> {
        if store.is_empty() {
            return Err(Error::invalid("empty cohort store"));
        }
        let mut centroids = Vec::with_capacity(store.len());
        for e in store.iter() {
            let norm = e.magnitude();
            if (norm - 1.0).abs() > 1e-3 {
                return Err(Error::invalid(format!(
                    "cohort centroid {} is not unit-norm (|v| = {norm})",
                    e.id
                )));
            }
            centroids.push((e.id.clone(), e.clone()));
        }
        Ok(Cohort {
            dim: store.dim(),
            centroids,
        })
    }
}

/// Mean and population standard deviation of the selected top-N cohort
/// scores for one utterance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mu: f64,
    pub sigma: f64,
    pub n_used: usize,
}

impl NormStats {
    /// Stats over an already-selected score set (population variance).
    pub fn from_selected(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("no cohort scores selected"));
        }
        let n = scores.len() as f64;
        let mu = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / n;
        Ok(NormStats {
            mu,
            sigma: var.sqrt(),
            n_used: scores.len(),
        })
    }
}

/// Averages each speaker's embeddings and length-normalizes the mean.
///
/// Utterances are summed in sorted-id order, so the result is bit-identical
/// under any reordering of the input store. Speakers appear in first-seen
/// order.
pub fn build_cohort(store: &EmbeddingStore) -> Result<Cohort> {
    if !store.has_speakers() {
        return Err(Error::invalid("store has no speaker labels"));
    }
    let mut by_speaker: IndexMap<String, Vec<&Embedding>> = IndexMap::new();
    for e in store.iter() {
        let speaker = store
            .speaker_of(&e.id)
            .ok_or_else(|| Error::invalid(format!("no speaker label for utterance {}", e.id)))?;
        by_speaker.entry(speaker.to_string()).or_default().push(e);
    }
    if by_speaker.is_empty() {
        return Err(Error::invalid("empty store"));
    }

    let mut centroids = Vec::with_capacity(by_speaker.len());
    for (speaker, mut utts) in by_speaker {
        utts.sort_by(|a, b| a.id.cmp(&b.id));
        let mut mean = vec![0.0f64; store.dim()];
        for e in &utts {
            for (acc, &v) in mean.iter_mut().zip(&e.vector) {
                *acc += v as f64;
            }
        }
        let n = utts.len() as f64;
        for acc in &mut mean {
            *acc /= n;
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid(format!(
                "speaker {speaker}: mean embedding has zero norm"
            )));
        }
        let vector: Vec<f32> = mean.iter().map(|v| (v / norm) as f32).collect();
        let embedding = Embedding::new(speaker.clone(), vector)
            .map_err(|e| Error::invalid(format!("speaker {speaker}: {e}")))?;
        centroids.push((speaker, embedding));
    }
    Ok(Cohort {
        dim: store.dim(),
        centroids,
    })
}

/// Scores `e` against every centroid and summarizes the top-N imposter
/// scores. Ties between equal scores break by speaker label, ascending.
pub fn cohort_stats(e: &Embedding, cohort: &Cohort, top_n: usize) -> Result<NormStats> {
    if top_n < 2 {
        return Err(Error::invalid(format!(
            "cohort top-N must be at least 2 (sigma undefined), got {top_n}"
        )));
    }
    if cohort.is_empty() {
        return Err(Error::invalid("empty cohort"));
    }
    if e.dim() != cohort.dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: embedding {} has dim {}, cohort has dim {}",
            e.id,
            e.dim(),
            cohort.dim()
        )));
    }
    let mut scored: Vec<(f64, &str)> = cohort
        .centroids
        .iter()
        .map(|(speaker, c)| Ok((cosine(e, c)?, speaker.as_str())))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("cosine scores are finite")
            .then_with(|| a.1.cmp(b.1))
    });
    scored.truncate(top_n);
    let selected: Vec<f64> = scored.iter().map(|(s, _)| *s).collect();
    NormStats::from_selected(&selected)
}

/// Symmetric adaptive S-Norm of one raw score given both sides' stats.
pub fn snorm(raw: f64, stats_enroll: &NormStats, stats_test: &NormStats) -> f64 {
    let ze = (raw - stats_enroll.mu) / stats_enroll.sigma.max(SIGMA_FLOOR);
    let zt = (raw - stats_test.mu) / stats_test.sigma.max(SIGMA_FLOOR);
    0.5 * (ze + zt)
}

/// Diagnostics from a normalization run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NormTrace {
    /// Number of per-utterance stats computations performed (one per unique
    /// utterance, however many trials share it).
    pub stats_computed: usize,
    /// Number of stats whose sigma hit the floor.
    pub sigma_floored: usize,
}

/// S-Norms a raw score set. Per-utterance cohort stats are computed once and
/// reused across every trial sharing that utterance; output keys equal input
/// keys.
pub fn normalize_scores(
    raw: &ScoreSet,
    store: &EmbeddingStore,
    cohort: &Cohort,
    top_n: usize,
) -> Result<ScoreSet> {
    normalize_scores_traced(raw, store, cohort, top_n).map(|(s, _)| s)
}

/// Same as [`normalize_scores`], also reporting computation counts.
pub fn normalize_scores_traced(
    raw: &ScoreSet,
    store: &EmbeddingStore,
    cohort: &Cohort,
    top_n: usize,
) -> Result<(ScoreSet, NormTrace)> {
    if raw.stage != Stage::Raw {
        return Err(Error::invalid(format!(
            "expected a raw score set, got stage {}",
            raw.stage
        )));
    }
    let mut unique: IndexSet<&str> = IndexSet::new();
    for ((e, t), _) in raw.iter() {
        unique.insert(e.as_str());
        unique.insert(t.as_str());
    }
    for id in &unique {
        if !store.contains(id) {
            return Err(Error::invalid(format!("unknown utterance {id}")));
        }
    }

    // single-assignment cache: each unique utterance computed exactly once,
    // independent entries in parallel, order fixed by first appearance
    let computed: Vec<Result<NormStats>> = unique
        .iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|id| cohort_stats(store.get(id).unwrap(), cohort, top_n))
        .collect();
    let mut cache: IndexMap<&str, NormStats> = IndexMap::with_capacity(unique.len());
    let mut floored = 0usize;
    for (id, stats) in unique.iter().zip(computed) {
        let stats = stats?;
        if stats.sigma <= SIGMA_FLOOR {
            floored += 1;
            log::warn!("cohort sigma for utterance {id} at floor ({})", stats.sigma);
        }
        cache.insert(id, stats);
    }

    let mut out = ScoreSet::new(raw.system.clone(), Stage::Normalized);
    for ((e, t), s) in raw.iter() {
        let se = &cache[e.as_str()];
        let st = &cache[t.as_str()];
        out.insert(e.clone(), t.clone(), snorm(s, se, st))?;
    }
    let trace = NormTrace {
        stats_computed: cache.len(),
        sigma_floored: floored,
    };
    Ok((out, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use indexmap::IndexMap;
    use proptest::prelude::*;

    fn emb(id: &str, v: &[f32]) -> Embedding {
        Embedding::new(id, v.to_vec()).unwrap()
    }

    fn labeled_store(rows: &[(&str, &str, &[f32])]) -> EmbeddingStore {
        let mut store = EmbeddingStore::new(rows[0].2.len()).unwrap();
        let mut speakers = IndexMap::new();
        for (id, speaker, v) in rows {
            store.insert(emb(id, v)).unwrap();
            speakers.insert(id.to_string(), speaker.to_string());
        }
        store.set_speakers(speakers).unwrap();
        store
    }

    #[test]
    fn cohort_mean_of_orthogonal_pair() {
        let store = labeled_store(&[("u1", "A", &[1.0, 0.0]), ("u2", "A", &[0.0, 1.0])]);
        let cohort = build_cohort(&store).unwrap();
        assert_eq!(cohort.len(), 1);
        let (_, c) = cohort.iter().next().unwrap();
        let expected = (0.5f64 / 0.5f64.hypot(0.5)) as f32;
        assert!((c.vector[0] - expected).abs() < 1e-7);
        assert!((c.vector[1] - expected).abs() < 1e-7);
        assert!((c.magnitude() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cohort_singletons_are_normalized_originals() {
        let store = labeled_store(&[
            ("u1", "A", &[3.0, 4.0]),
            ("u2", "B", &[0.0, 2.0]),
            ("u3", "C", &[1.0, 0.0]),
        ]);
        let cohort = build_cohort(&store).unwrap();
        assert_eq!(cohort.len(), 3);
        let (speaker, c) = cohort.iter().next().unwrap();
        assert_eq!(speaker, "A");
        assert_eq!(c.vector, vec![0.6, 0.8]);
    }

    #[test]
    fn cohort_invariant_to_utterance_order() {
        let a = labeled_store(&[
            ("u1", "A", &[0.3, 0.7]),
            ("u2", "A", &[0.9, -0.1]),
            ("u3", "A", &[-0.2, 0.4]),
        ]);
        let b = labeled_store(&[
            ("u3", "A", &[-0.2, 0.4]),
            ("u1", "A", &[0.3, 0.7]),
            ("u2", "A", &[0.9, -0.1]),
        ]);
        let ca = build_cohort(&a).unwrap();
        let cb = build_cohort(&b).unwrap();
        let va = &ca.iter().next().unwrap().1.vector;
        let vb = &cb.iter().next().unwrap().1.vector;
        for (x, y) in va.iter().zip(vb) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn cohort_requires_labels_and_nonzero_means() {
        let mut store = EmbeddingStore::new(2).unwrap();
        store.insert(emb("u1", &[1.0, 0.0])).unwrap();
        assert!(build_cohort(&store).is_err());

        let degenerate = labeled_store(&[("u1", "A", &[1.0, 0.0]), ("u2", "A", &[-1.0, 0.0])]);
        let err = build_cohort(&degenerate).unwrap_err();
        assert!(err.to_string().contains("zero norm"));
    }

    #[test]
    fn stats_of_top2() {
        // cohort scores {0.9, 0.5, 0.1}, top 2 -> mu 0.7, sigma 0.2
        let stats = NormStats::from_selected(&[0.9, 0.5]).unwrap();
        assert!((stats.mu - 0.7).abs() < 1e-15);
        assert!((stats.sigma - 0.2).abs() < 1e-15);
        assert_eq!(stats.n_used, 2);
    }

    fn three_speaker_cohort() -> Cohort {
        let store = labeled_store(&[
            ("c1", "A", &[1.0, 0.0]),
            ("c2", "B", &[0.0, 1.0]),
            ("c3", "C", &[1.0, 1.0]),
        ]);
        build_cohort(&store).unwrap()
    }

    #[test]
    fn cohort_stats_selects_top_n() {
        let cohort = three_speaker_cohort();
        let e = emb("e", &[1.0, 0.0]);
        // scores: A=1, C=1/sqrt(2), B=0
        let top2 = cohort_stats(&e, &cohort, 2).unwrap();
        let expect_mu = (1.0 + 1.0 / 2.0f64.sqrt()) / 2.0;
        assert!((top2.mu - expect_mu).abs() < 1e-6);
        assert_eq!(top2.n_used, 2);

        // top_n >= cohort size clamps to the whole cohort
        let all = cohort_stats(&e, &cohort, 10).unwrap();
        assert_eq!(all.n_used, 3);
    }

    #[test]
    fn cohort_stats_rejects_small_top_n() {
        let cohort = three_speaker_cohort();
        let e = emb("e", &[1.0, 0.0]);
        assert!(cohort_stats(&e, &cohort, 1).is_err());
    }

    #[test]
    fn cohort_stats_tie_break_is_stable() {
        // two centroids tied at cosine 0: selection must keep the
        // lexicographically smaller speaker
        let store = labeled_store(&[
            ("c1", "B", &[0.0, 1.0]),
            ("c2", "A", &[0.0, -1.0]),
            ("c3", "C", &[1.0, 0.0]),
        ]);
        let cohort = build_cohort(&store).unwrap();
        let e = emb("e", &[1.0, 0.0]);
        // scores: C=1, A=0, B=0 -> top2 = {C, A}
        let stats = cohort_stats(&e, &cohort, 2).unwrap();
        assert!((stats.mu - 0.5).abs() < 1e-12);
        assert!((stats.sigma - 0.5).abs() < 1e-12);
    }

    #[test]
    fn snorm_hand_values() {
        let centered = snorm(
            0.7,
            &NormStats { mu: 0.7, sigma: 0.3, n_used: 2 },
            &NormStats { mu: 0.7, sigma: 0.1, n_used: 2 },
        );
        assert_eq!(centered, 0.0);

        let v = snorm(
            0.9,
            &NormStats { mu: 0.5, sigma: 0.2, n_used: 2 },
            &NormStats { mu: 0.7, sigma: 0.1, n_used: 2 },
        );
        assert!((v - 2.0).abs() < 1e-12);

        // sigma floor keeps the output finite
        let floored = snorm(
            0.8,
            &NormStats { mu: 0.7, sigma: 0.0, n_used: 2 },
            &NormStats { mu: 0.7, sigma: 0.0, n_used: 2 },
        );
        assert!(floored.is_finite());
        assert!(floored > 1e10);
    }

    #[test]
    fn normalize_reuses_stats_per_utterance() {
        let store = labeled_store(&[
            ("e1", "X", &[1.0, 0.2]),
            ("t1", "Y", &[0.8, 0.3]),
            ("t2", "Z", &[0.1, 0.9]),
        ]);
        let cohort = three_speaker_cohort();
        let mut raw = ScoreSet::new("s", Stage::Raw);
        // e1 appears in both trials: stats computed once
        raw.insert("e1", "t1", 0.9).unwrap();
        raw.insert("e1", "t2", 0.2).unwrap();
        let (out, trace) = normalize_scores_traced(&raw, &store, &cohort, 2).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(trace.stats_computed, 3); // e1, t1, t2 - not 4
        assert_eq!(out.stage, Stage::Normalized);

        // matches the manual per-trial computation
        let se = cohort_stats(store.get("e1").unwrap(), &cohort, 2).unwrap();
        let st = cohort_stats(store.get("t1").unwrap(), &cohort, 2).unwrap();
        assert_eq!(out.get("e1", "t1").unwrap(), snorm(0.9, &se, &st));
    }

    #[test]
    fn normalize_empty_set_is_empty() {
        let store = labeled_store(&[("e1", "X", &[1.0, 0.2])]);
        let cohort = three_speaker_cohort();
        let raw = ScoreSet::new("s", Stage::Raw);
        let out = normalize_scores(&raw, &store, &cohort, 2).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn normalize_rejects_wrong_stage() {
        let store = labeled_store(&[("e1", "X", &[1.0, 0.2])]);
        let cohort = three_speaker_cohort();
        let set = ScoreSet::new("s", Stage::Normalized);
        assert!(normalize_scores(&set, &store, &cohort, 2).is_err());
    }

    #[test]
    fn saved_cohort_round_trips_through_store_view() {
        let cohort = three_speaker_cohort();
        let store = cohort.to_store();
        let back = Cohort::from_centroid_store(&store).unwrap();
        assert_eq!(back, cohort);
    }

    proptest! {
        /// applying s -> a*s + b to the raw score and every cohort score of
        /// both sides leaves the snorm output unchanged
        #[test]
        fn z_invariance_under_affine_maps(
            scores_e in prop::collection::vec(-1.0f64..1.0, 4..30),
            scores_t in prop::collection::vec(-1.0f64..1.0, 4..30),
            raw in -1.0f64..1.0,
            a in 0.05f64..20.0,
            b in -5.0f64..5.0,
            top_n in 2usize..8,
        ) {
            let top = |v: &[f64]| {
                let mut s = v.to_vec();
                s.sort_by(|x, y| y.partial_cmp(x).unwrap());
                s.truncate(top_n);
                s
            };
            let se = NormStats::from_selected(&top(&scores_e)).unwrap();
            let st = NormStats::from_selected(&top(&scores_t)).unwrap();
            prop_assume!(se.sigma > 1e-9 && st.sigma > 1e-9);

            let xf = |v: &[f64]| v.iter().map(|s| a * s + b).collect::<Vec<_>>();
            let se2 = NormStats::from_selected(&top(&xf(&scores_e))).unwrap();
            let st2 = NormStats::from_selected(&top(&xf(&scores_t))).unwrap();

            let before = snorm(raw, &se, &st);
            let after = snorm(a * raw + b, &se2, &st2);
            prop_assert!((before - after).abs() < 1e-9, "{before} vs {after}");
        }

        /// with fixed stats, snorm is strictly increasing in the raw score
        #[test]
        fn snorm_monotone_in_raw(
            mu_e in -1.0f64..1.0, sigma_e in 0.01f64..2.0,
            mu_t in -1.0f64..1.0, sigma_t in 0.01f64..2.0,
            s1 in -1.0f64..1.0, delta in 1e-6f64..1.0,
        ) {
            let se = NormStats { mu: mu_e, sigma: sigma_e, n_used: 2 };
            let st = NormStats { mu: mu_t, sigma: sigma_t, n_used: 2 };
            prop_assert!(snorm(s1 + delta, &se, &st) > snorm(s1, &se, &st));
        }
    }
}
