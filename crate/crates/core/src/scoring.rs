//! Raw trial scoring: cosine similarity over embeddings.
//!
//! Vectors are stored single-precision; every dot product and norm here
//! accumulates in double precision, component order fixed by the vector
//! layout, so results are bit-identical regardless of batch size or thread
//! count.

use rayon::prelude::*;

use crate::corpus::{Embedding, EmbeddingStore, ScoreSet, Stage, TrialList};
use crate::error::{Error, Result};

fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Scales an embedding to unit Euclidean norm, preserving direction.
pub fn length_normalize(e: &Embedding) -> Result<Embedding> {
    let norm = e.magnitude();
    if norm == 0.0 {
        return Err(Error::invalid(format!("degenerate embedding {} (zero norm)", e.id)));
    }
    let vector = e.vector.iter().map(|&v| (v as f64 / norm) as f32).collect();
    Ok(Embedding {
        id: e.id.clone(),
        vector,
    })
}

/// Cosine similarity, higher = more likely same speaker.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} has dim {}, {} has dim {}",
            a.id,
            a.dim(),
            b.id,
            b.dim()
        )));
    }
    let na2 = dot_f64(&a.vector, &a.vector);
    let nb2 = dot_f64(&b.vector, &b.vector);
    if na2 == 0.0 || nb2 == 0.0 {
        let id = if na2 == 0.0 { &a.id } else { &b.id };
        return Err(Error::invalid(format!("degenerate embedding {id} (zero norm)")));
    }
    Ok(dot_f64(&a.vector, &b.vector) / (na2 * nb2).sqrt())
}

/// Scores every trial by cosine similarity. Trials are independent, so the
/// map runs on the current rayon pool; output order and values are identical
/// to a sequential run.
pub fn score_trials(store: &EmbeddingStore, trials: &TrialList) -> Result<ScoreSet> {
    for (idx, t) in trials.iter().enumerate() {
        for id in [&t.enroll, &t.test] {
            if !store.contains(id) {
                return Err(Error::invalid(format!(
                    "unknown utterance {id} (trial {})",
                    idx + 1
                )));
            }
        }
    }
    let computed: Vec<Result<f64>> = trials
        .trials
        .par_iter()
        .map(|t| cosine(store.get(&t.enroll).unwrap(), store.get(&t.test).unwrap()))
        .collect();

    let mut out = ScoreSet::new("cosine", Stage::Raw);
    for (t, score) in trials.iter().zip(computed) {
        out.insert(&t.enroll, &t.test, score?)?;
    }
    Ok(out)
}
