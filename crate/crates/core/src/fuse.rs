//! Logistic-regression fusion of multiple systems' scores, optionally
//! extended with quality features.
//!
//! Fusion reuses the calibration optimizer with feature names set to the
//! system names (plus any quality feature names), so fusing a single system
//! with no quality features is exactly score-only calibration.

use indexmap::IndexSet;

use crate::calibrate::{
    apply_calibration, features_for_trial, fit_logreg_traced, CalibrationModel, FeatureSelection,
    FeatureVector, FitTrace,
};
use crate::corpus::{EmbeddingStore, QualityMap, ScoreSet, Stage, TrialLabel, TrialList};
use crate::error::{Error, Result};

/// Aligned per-trial score matrix over several systems.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInput {
    systems: Vec<String>,
    keys: Vec<(String, String)>,
    rows: Vec<Vec<f64>>,
    quality_names: Vec<String>,
    stage: Stage,
}

impl FusionInput {
    pub fn systems(&self) -> &[String] {
        &self.systems
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[(String, String)] {
        &self.keys
    }

    /// Column names: systems first, then quality features.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = self.systems.clone();
        names.extend(self.quality_names.iter().cloned());
        names
    }

    fn feature_vectors(&self) -> Result<Vec<FeatureVector>> {
        let names = self.feature_names();
        self.rows
            .iter()
            .map(|row| FeatureVector::new(names.clone(), row.clone()))
            .collect()
    }

    /// Appends quality features (closed calibration vocabulary, minus
    /// `score`, which here means the per-system columns) to every trial.
    pub fn with_quality_features(
        mut self,
        selection: &FeatureSelection,
        quality: Option<&QualityMap>,
        store: Option<&EmbeddingStore>,
    ) -> Result<FusionInput> {
        if !self.quality_names.is_empty() {
            return Err(Error::invalid("quality features already attached"));
        }
        if selection.names().contains(&"score") {
            return Err(Error::invalid(
                "feature `score` is not applicable to the fusion quality extension",
            ));
        }
        for name in selection.names() {
            if self.systems.iter().any(|s| s == name) {
                return Err(Error::invalid(format!(
                    "quality feature {name} collides with a system name"
                )));
            }
        }
        for ((enroll, test), row) in self.keys.iter().zip(self.rows.iter_mut()) {
            // the per-trial score is irrelevant here; `score` is rejected above
            let fv = features_for_trial(0.0, enroll, test, selection, quality, store)?;
            row.extend(fv.values);
        }
        self.quality_names = selection.names().iter().map(|n| n.to_string()).collect();
        Ok(self)
    }
}

/// Builds the fusion matrix: one row per trial, one column per system,
/// column order = input order. Every system must score every trial.
pub fn align_systems(score_sets: &[&ScoreSet], trials: &TrialList) -> Result<FusionInput> {
    if score_sets.is_empty() {
        return Err(Error::invalid("fusion needs at least one score set"));
    }
    let mut seen = IndexSet::new();
    for set in score_sets {
        if !seen.insert(set.system.clone()) {
            return Err(Error::invalid(format!("duplicate system name {}", set.system)));
        }
    }
    let stage = score_sets[0].stage;
    for set in score_sets {
        if set.stage != stage {
            log::warn!(
                "mixing stages in fusion: {} is {}, {} is {}",
                score_sets[0].system,
                stage,
                set.system,
                set.stage
            );
        }
    }

    let mut keys = Vec::with_capacity(trials.len());
    let mut rows = Vec::with_capacity(trials.len());
    for t in trials.iter() {
        let mut row = Vec::with_capacity(score_sets.len());
        for set in score_sets {
            let score = set.get(&t.enroll, &t.test).ok_or_else(|| {
                Error::invalid(format!(
                    "system {} missing trial {} {}",
                    set.system, t.enroll, t.test
                ))
            })?;
            row.push(score);
        }
        keys.push((t.enroll.clone(), t.test.clone()));
        rows.push(row);
    }
    Ok(FusionInput {
        systems: seen.into_iter().collect(),
        keys,
        rows,
        quality_names: Vec::new(),
        stage,
    })
}

/// Trains the fusion model; identical objective and optimizer as
/// calibration, feature names = system names (+ quality feature names).
pub fn fit_fusion(
    input: &FusionInput,
    labels: &[TrialLabel],
    effective_prior: f64,
    l2: f64,
) -> Result<CalibrationModel> {
    fit_fusion_traced(input, labels, effective_prior, l2).map(|(m, _)| m)
}

/// Same as [`fit_fusion`], with the convergence trace.
pub fn fit_fusion_traced(
    input: &FusionInput,
    labels: &[TrialLabel],
    effective_prior: f64,
    l2: f64,
) -> Result<(CalibrationModel, FitTrace)> {
    if labels.len() != input.len() {
        return Err(Error::invalid("labels/trials length mismatch"));
    }
    let features = input.feature_vectors()?;
    fit_logreg_traced(&features, labels, effective_prior, l2)
}

/// Applies a fusion model to aligned scores, producing the fused score set.
pub fn apply_fusion(model: &CalibrationModel, input: &FusionInput) -> Result<ScoreSet> {
    let names = input.feature_names();
    if model.feature_names != names {
        return Err(Error::invalid(format!(
            "column mismatch: model expects [{}], input has [{}]",
            model.feature_names.join(", "),
            names.join(", ")
        )));
    }
    let features = input.feature_vectors()?;
    let mut out = ScoreSet::new("fusion", Stage::Fused);
    for ((enroll, test), fv) in input.keys.iter().zip(&features) {
        out.insert(enroll.clone(), test.clone(), apply_calibration(model, fv)?)?;
    }
    Ok(out)
}
