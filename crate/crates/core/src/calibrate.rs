//! Per-trial feature assembly and regularized logistic-regression
//! calibration.
//!
//! The feature vocabulary is closed and canonically ordered: `score`, then
//! for each base measure in {duration, snr, t60, mos, magnitude} the three
//! pair functions `_min`, `_max`, `_absdiff`. Magnitude is the
//! pre-normalization Euclidean norm of the embedding.
//!
//! The trained objective, with t in {0,1}, z = w.x + b:
//!
//! ```text
//! L(w, b) = (1/n) * sum_i omega_i * (log(1 + exp(z_i)) - t_i * z_i)
//!           + (l2/2) * ||w||^2            (bias unpenalized)
//! omega_i = prior / (n_t/n)        for targets
//!           (1 - prior) / (n_n/n)  for nontargets
//! ```
//!
//! minimized by Newton/IRLS from zero initialization with step-halving, so
//! identical inputs always produce bit-identical models. Calibrated output
//! is the log-odds w.x + b, not a probability: fusion and thresholding stay
//! linear in it.

use indexmap::IndexSet;

use crate::corpus::{EmbeddingStore, QualityMap, QualityRecord, ScoreSet, Stage, TrialLabel, TrialList};
use crate::error::{Error, Result};

/// Canonical feature vocabulary, in assembly order.
pub const FEATURE_VOCABULARY: [&str; 16] = [
    "score",
    "duration_min",
    "duration_max",
    "duration_absdiff",
    "snr_min",
    "snr_max",
    "snr_absdiff",
    "t60_min",
    "t60_max",
    "t60_absdiff",
    "mos_min",
    "mos_max",
    "mos_absdiff",
    "magnitude_min",
    "magnitude_max",
    "magnitude_absdiff",
];

/// A validated, canonically ordered subset of the feature vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSelection {
    names: Vec<&'static str>,
}

impl FeatureSelection {
    /// Selection containing only the raw score.
    pub fn score_only() -> Self {
        FeatureSelection { names: vec!["score"] }
    }

    /// Builds a selection from arbitrary-order names, reordering them
    /// canonically. Unknown and duplicate names are errors.
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut seen = IndexSet::new();
        for n in names {
            let n = n.as_ref();
            if !FEATURE_VOCABULARY.contains(&n) {
                return Err(Error::invalid(format!("unknown feature name {n:?}")));
            }
            if !seen.insert(n.to_string()) {
                return Err(Error::invalid(format!("duplicate feature name {n:?}")));
            }
        }
        if seen.is_empty() {
            return Err(Error::invalid("empty feature selection"));
        }
        let selected: Vec<&'static str> = FEATURE_VOCABULARY
            .iter()
            .copied()
            .filter(|v| seen.contains(*v))
            .collect();
        Ok(FeatureSelection { names: selected })
    }

    /// Parses a comma-separated list, e.g. `score,duration_min`.
    pub fn parse(list: &str) -> Result<Self> {
        let names: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        Self::new(&names)
    }

    pub fn names(&self) -> &[&'static str] {
        &self.names
    }

    pub fn needs_quality(&self) -> bool {
        self.names.iter().any(|n| {
            n.starts_with("duration_") || n.starts_with("snr_") || n.starts_with("t60_") || n.starts_with("mos_")
        })
    }

    pub fn needs_magnitude(&self) -> bool {
        self.names.iter().any(|n| n.starts_with("magnitude_"))
    }
}

/// Named feature values for one trial, names and values aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if names.len() != values.len() {
            return Err(Error::invalid("feature names/values length mismatch"));
        }
        let unique: IndexSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::invalid("duplicate feature names"));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        Ok(FeatureVector { names, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Named-feature linear model: calibrated score = weights . features + bias.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationModel {
    pub feature_names: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Operating-point prior the model was trained for.
    pub effective_prior: f64,
    /// Free-text provenance.
    pub trained_on: String,
}

impl CalibrationModel {
    /// Default operating-point prior, aligned with the DCF target prior.
    pub const DEFAULT_PRIOR: f64 = 0.05;
    /// Default L2 strength: keeps separable fits finite while staying
    /// near-MLE.
    pub const DEFAULT_L2: f64 = 1e-6;

    pub fn new(
        feature_names: Vec<String>,
        weights: Vec<f64>,
        bias: f64,
        effective_prior: f64,
        trained_on: String,
    ) -> Result<Self> {
        if feature_names.len() != weights.len() {
            return Err(Error::invalid("model names/weights length mismatch"));
        }
        let unique: IndexSet<&String> = feature_names.iter().collect();
        if unique.len() != feature_names.len() {
            return Err(Error::invalid("duplicate feature names in model"));
        }
        if !weights.iter().all(|w| w.is_finite()) || !bias.is_finite() {
            return Err(Error::invalid("non-finite model parameter"));
        }
        if !(effective_prior > 0.0 && effective_prior < 1.0) {
            return Err(Error::invalid(format!(
                "effective prior must be in (0,1), got {effective_prior}"
            )));
        }
        Ok(CalibrationModel {
            feature_names,
            weights,
            bias,
            effective_prior,
            trained_on,
        })
    }
}

fn measure_pair(
    base: &str,
    quality: Option<(&QualityRecord, &QualityRecord)>,
    magnitudes: Option<(f64, f64)>,
) -> Result<(f64, f64)> {
    match base {
        "magnitude" => {
            magnitudes.ok_or_else(|| Error::invalid("magnitude features require embedding norms"))
        }
        _ => {
            let (qe, qt) = quality
                .ok_or_else(|| Error::invalid(format!("{base} features require quality records")))?;
            Ok(match base {
                "duration" => (qe.duration, qt.duration),
                "snr" => (qe.snr, qt.snr),
                "t60" => (qe.t60, qt.t60),
                "mos" => (qe.mos, qt.mos),
                other => return Err(Error::invalid(format!("unknown base measure {other}"))),
            })
        }
    }
}

/// Assembles the selected features for one trial, in canonical vocabulary
/// order. `magnitudes` are the pre-normalization embedding norms of the
/// enroll and test side.
pub fn trial_features(
    score: f64,
    quality: Option<(&QualityRecord, &QualityRecord)>,
    magnitudes: Option<(f64, f64)>,
    selection: &FeatureSelection,
) -> Result<FeatureVector> {
    let mut names = Vec::with_capacity(selection.names.len());
    let mut values = Vec::with_capacity(selection.names.len());
    for &name in &selection.names {
        let value = if name == "score" {
            score
        } else {
            let (base, func) = name.rsplit_once('_').expect("vocabulary names have `_`");
            let (me, mt) = measure_pair(base, quality, magnitudes)?;
            match func {
                "min" => me.min(mt),
                "max" => me.max(mt),
                "absdiff" => (me - mt).abs(),
                other => return Err(Error::invalid(format!("unknown feature function {other}"))),
            }
        };
        names.push(name.to_string());
        values.push(value);
    }
    FeatureVector::new(names, values)
}

// ---------------------------------------------------------------------------
// Weighted logistic-regression objective
// ---------------------------------------------------------------------------

struct Problem {
    rows: Vec<Vec<f64>>,
    targets: Vec<f64>,
    omega: Vec<f64>,
    l2: f64,
    dim: usize,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// log(1 + exp(z)) without overflow.
fn log1p_exp(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl Problem {
    fn build(
        features: &[FeatureVector],
        labels: &[TrialLabel],
        effective_prior: f64,
        l2: f64,
    ) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::invalid("no training examples"));
        }
        if features.len() != labels.len() {
            return Err(Error::invalid("features/labels length mismatch"));
        }
        if !(effective_prior > 0.0 && effective_prior < 1.0) {
            return Err(Error::invalid(format!(
                "effective prior must be in (0,1), got {effective_prior}"
            )));
        }
        if !(l2 >= 0.0 && l2.is_finite()) {
            return Err(Error::invalid(format!("l2 must be finite and >= 0, got {l2}")));
        }
        let names = &features[0].names;
        for f in features {
            if &f.names != names {
                return Err(Error::invalid("inconsistent feature names across examples"));
            }
        }
        let n = features.len() as f64;
        let n_target = labels.iter().filter(|l| **l == TrialLabel::Target).count();
        let n_nontarget = labels.len() - n_target;
        if n_target == 0 || n_nontarget == 0 {
            return Err(Error::invalid(
                "training needs at least one target and one nontarget example",
            ));
        }
        let w_target = effective_prior / (n_target as f64 / n);
        let w_nontarget = (1.0 - effective_prior) / (n_nontarget as f64 / n);
        Ok(Problem {
            rows: features.iter().map(|f| f.values.clone()).collect(),
            targets: labels
                .iter()
                .map(|l| if *l == TrialLabel::Target { 1.0 } else { 0.0 })
                .collect(),
            omega: labels
                .iter()
                .map(|l| if *l == TrialLabel::Target { w_target } else { w_nontarget })
                .collect(),
            l2,
            dim: names.len(),
        })
    }

    /// theta = [weights..., bias]
    fn loss(&self, theta: &[f64]) -> f64 {
        let (w, b) = theta.split_at(self.dim);
        let b = b[0];
        let n = self.rows.len() as f64;
        let mut total = 0.0;
        for ((row, &t), &om) in self.rows.iter().zip(&self.targets).zip(&self.omega) {
            let z: f64 = row.iter().zip(w).map(|(x, wi)| x * wi).sum::<f64>() + b;
            total += om * (log1p_exp(z) - t * z);
        }
        total / n + 0.5 * self.l2 * w.iter().map(|wi| wi * wi).sum::<f64>()
    }

    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let (w, b) = theta.split_at(self.dim);
        let b = b[0];
        let n = self.rows.len() as f64;
        let mut g = vec![0.0; self.dim + 1];
        for ((row, &t), &om) in self.rows.iter().zip(&self.targets).zip(&self.omega) {
            let z: f64 = row.iter().zip(w).map(|(x, wi)| x * wi).sum::<f64>() + b;
            let r = om * (sigmoid(z) - t);
            for (gj, &x) in g.iter_mut().zip(row) {
                *gj += r * x;
            }
            g[self.dim] += r;
        }
        for gj in g.iter_mut() {
            *gj /= n;
        }
        for (gj, &wi) in g.iter_mut().zip(w) {
            *gj += self.l2 * wi;
        }
        g
    }

    fn hessian(&self, theta: &[f64]) -> Vec<Vec<f64>> {
        let (w, b) = theta.split_at(self.dim);
        let b = b[0];
        let n = self.rows.len() as f64;
        let d = self.dim + 1;
        let mut h = vec![vec![0.0; d]; d];
        for (row, &om) in self.rows.iter().zip(&self.omega) {
            let z: f64 = row.iter().zip(w).map(|(x, wi)| x * wi).sum::<f64>() + b;
            let p = sigmoid(z);
            let s = om * p * (1.0 - p);
            for j in 0..self.dim {
                for k in j..self.dim {
                    h[j][k] += s * row[j] * row[k];
                }
                h[j][self.dim] += s * row[j];
            }
            h[self.dim][self.dim] += s;
        }
        for j in 0..d {
            for k in j..d {
                h[j][k] /= n;
                h[k][j] = h[j][k];
            }
        }
        for j in 0..self.dim {
            h[j][j] += self.l2;
        }
        h
    }
}

/// Gaussian elimination with partial pivoting; the Hessian is tiny
/// (features + bias), so no external solver is needed.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for i in 0..n {
        let mut pivot = i;
        for k in i + 1..n {
            if a[k][i].abs() > a[pivot][i].abs() {
                pivot = k;
            }
        }
        if a[pivot][i].abs() < 1e-300 {
            return Err(Error::invalid("singular Hessian; increase l2"));
        }
        a.swap(i, pivot);
        b.swap(i, pivot);
        for k in i + 1..n {
            let factor = a[k][i] / a[i][i];
            for j in i..n {
                a[k][j] -= factor * a[i][j];
            }
            b[k] -= factor * b[i];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = b[i];
        for j in i + 1..n {
            acc -= a[i][j] * x[j];
        }
        x[i] = acc / a[i][i];
    }
    Ok(x)
}

/// Convergence trace of a Newton fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace {
    /// Objective after initialization and after each accepted step.
    pub losses: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

const MAX_ITERATIONS: usize = 100;
const MAX_HALVINGS: usize = 20;
const GRAD_TOL: f64 = 1e-9;

/// Fits the prior-weighted logistic regression. Deterministic: zero
/// initialization, Newton steps with step-halving whenever the objective
/// would increase, stop at gradient inf-norm < 1e-9 or 100 iterations.
pub fn fit_logreg(
    features: &[FeatureVector],
    labels: &[TrialLabel],
    effective_prior: f64,
    l2: f64,
) -> Result<CalibrationModel> {
    fit_logreg_traced(features, labels, effective_prior, l2).map(|(m, _)| m)
}

/// Same as [`fit_logreg`], also returning the convergence trace.
pub fn fit_logreg_traced(
    features: &[FeatureVector],
    labels: &[TrialLabel],
    effective_prior: f64,
    l2: f64,
) -> Result<(CalibrationModel, FitTrace)> {
    let problem = Problem::build(features, labels, effective_prior, l2)?;
    let d = problem.dim;
    let mut theta = vec![0.0; d + 1];
    let mut loss = problem.loss(&theta);
    let mut losses = vec![loss];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..MAX_ITERATIONS {
        let g = problem.gradient(&theta);
        if g.iter().map(|v| v.abs()).fold(0.0, f64::max) < GRAD_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let h = problem.hessian(&theta);
        let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
        let delta = solve_linear(h, neg_g)?;

        let mut step = 1.0;
        let mut candidate: Vec<f64>;
        let mut candidate_loss;
        let mut halvings = 0;
        loop {
            candidate = theta.iter().zip(&delta).map(|(t, d)| t + step * d).collect();
            candidate_loss = problem.loss(&candidate);
            if candidate_loss <= loss || halvings >= MAX_HALVINGS {
                break;
            }
            step *= 0.5;
            halvings += 1;
        }
        if candidate_loss > loss {
            // no descent direction left at the smallest step: stop here
            break;
        }
        theta = candidate;
        loss = candidate_loss;
        losses.push(loss);
    }

    let n_target = labels.iter().filter(|l| **l == TrialLabel::Target).count();
    let model = CalibrationModel::new(
        features[0].names.clone(),
        theta[..d].to_vec(),
        theta[d],
        effective_prior,
        format!(
            "fit on {} examples ({} target, {} nontarget), prior {effective_prior}, l2 {l2}",
            labels.len(),
            n_target,
            labels.len() - n_target
        ),
    )?;
    Ok((
        model,
        FitTrace {
            losses,
            converged,
            iterations,
        },
    ))
}

/// The training objective at given parameters: prior-weighted cross-entropy
/// plus the ridge term. Exposed so gradient checks and nested-model
/// comparisons can evaluate it directly.
pub fn weighted_loss(
    features: &[FeatureVector],
    labels: &[TrialLabel],
    effective_prior: f64,
    l2: f64,
    weights: &[f64],
    bias: f64,
) -> Result<f64> {
    let problem = Problem::build(features, labels, effective_prior, l2)?;
    if weights.len() != problem.dim {
        return Err(Error::invalid("weight vector length mismatch"));
    }
    let mut theta = weights.to_vec();
    theta.push(bias);
    Ok(problem.loss(&theta))
}

/// Analytic gradient of [`weighted_loss`]: (d/dw, d/db).
pub fn weighted_gradient(
    features: &[FeatureVector],
    labels: &[TrialLabel],
    effective_prior: f64,
    l2: f64,
    weights: &[f64],
    bias: f64,
) -> Result<(Vec<f64>, f64)> {
    let problem = Problem::build(features, labels, effective_prior, l2)?;
    if weights.len() != problem.dim {
        return Err(Error::invalid("weight vector length mismatch"));
    }
    let mut theta = weights.to_vec();
    theta.push(bias);
    let mut g = problem.gradient(&theta);
    let gb = g.pop().expect("gradient has bias slot");
    Ok((g, gb))
}

/// Calibrated log-odds for one feature vector.
pub fn apply_calibration(model: &CalibrationModel, features: &FeatureVector) -> Result<f64> {
    if model.feature_names != features.names {
        return Err(Error::invalid(format!(
            "feature mismatch: model expects [{}], got [{}]",
            model.feature_names.join(", "),
            features.names.join(", ")
        )));
    }
    Ok(model
        .weights
        .iter()
        .zip(&features.values)
        .map(|(w, x)| w * x)
        .sum::<f64>()
        + model.bias)
}

fn magnitudes_for(
    store: Option<&EmbeddingStore>,
    enroll: &str,
    test: &str,
) -> Result<(f64, f64)> {
    let store = store.ok_or_else(|| {
        Error::invalid("magnitude features selected but no embedding store provided")
    })?;
    let me = store
        .get(enroll)
        .ok_or_else(|| Error::invalid(format!("unknown utterance {enroll}")))?
        .magnitude();
    let mt = store
        .get(test)
        .ok_or_else(|| Error::invalid(format!("unknown utterance {test}")))?
        .magnitude();
    Ok((me, mt))
}

fn quality_for<'q>(
    quality: Option<&'q QualityMap>,
    enroll: &str,
    test: &str,
) -> Result<(&'q QualityRecord, &'q QualityRecord)> {
    let map = quality.ok_or_else(|| {
        Error::invalid("quality features selected but no quality manifest provided")
    })?;
    let qe = map
        .get(enroll)
        .ok_or_else(|| Error::invalid(format!("missing quality record for utterance {enroll}")))?;
    let qt = map
        .get(test)
        .ok_or_else(|| Error::invalid(format!("missing quality record for utterance {test}")))?;
    Ok((qe, qt))
}

pub(crate) fn features_for_trial(
    score: f64,
    enroll: &str,
    test: &str,
    selection: &FeatureSelection,
    quality: Option<&QualityMap>,
    store: Option<&EmbeddingStore>,
) -> Result<FeatureVector> {
    let q = if selection.needs_quality() {
        Some(quality_for(quality, enroll, test)?)
    } else {
        None
    };
    let mags = if selection.needs_magnitude() {
        Some(magnitudes_for(store, enroll, test)?)
    } else {
        None
    };
    trial_features(score, q.as_ref().map(|(a, b)| (*a, *b)), mags, selection)
}

/// Builds the training set for calibration: features in trial-list order
/// plus their labels. The score set must cover exactly the trial list.
pub fn assemble_training_set(
    scores: &ScoreSet,
    trials: &TrialList,
    selection: &FeatureSelection,
    quality: Option<&QualityMap>,
    store: Option<&EmbeddingStore>,
) -> Result<(Vec<FeatureVector>, Vec<TrialLabel>)> {
    scores.check_matches(trials)?;
    let labels = trials.labels()?;
    let mut features = Vec::with_capacity(trials.len());
    for t in trials.iter() {
        let score = scores.get(&t.enroll, &t.test).expect("checked above");
        features.push(features_for_trial(score, &t.enroll, &t.test, selection, quality, store)?);
    }
    Ok((features, labels))
}

/// Applies a calibration model to every trial of a score set, assembling the
/// model's features per trial. Keys are preserved.
pub fn calibrate_scores(
    scores: &ScoreSet,
    model: &CalibrationModel,
    quality: Option<&QualityMap>,
    store: Option<&EmbeddingStore>,
) -> Result<ScoreSet> {
    if !matches!(scores.stage, Stage::Raw | Stage::Normalized) {
        return Err(Error::invalid(format!(
            "expected raw or normalized scores, got stage {}",
            scores.stage
        )));
    }
    let selection = FeatureSelection::new(&model.feature_names)?;
    if selection
        .names()
        .iter()
        .map(|n| n.to_string())
        .collect::<Vec<_>>()
        != model.feature_names
    {
        return Err(Error::invalid(
            "model feature names are not in canonical vocabulary order",
        ));
    }
    let mut out = ScoreSet::new(scores.system.clone(), Stage::Calibrated);
    for ((enroll, test), score) in scores.iter() {
        let fv = features_for_trial(score, enroll, test, &selection, quality, store)?;
        out.insert(enroll.clone(), test.clone(), apply_calibration(model, &fv)?)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use TrialLabel::{Nontarget, Target};

    fn q(id: &str, duration: f64) -> QualityRecord {
        QualityRecord::new(id, duration, 10.0, 0.3, 3.0).unwrap()
    }

    fn score_vecs(scores: &[f64]) -> Vec<FeatureVector> {
        let sel = FeatureSelection::score_only();
        scores
            .iter()
            .map(|&s| trial_features(s, None, None, &sel).unwrap())
            .collect()
    }

    #[test]
    fn selection_reorders_canonically_and_validates() {
        let sel = FeatureSelection::new(&["duration_max", "score", "duration_min"]).unwrap();
        assert_eq!(sel.names(), &["score", "duration_min", "duration_max"]);
        assert!(FeatureSelection::new(&["bogus"]).is_err());
        assert!(FeatureSelection::new(&["score", "score"]).is_err());
        assert!(FeatureSelection::parse("score, duration_min").is_ok());
    }

    #[test]
    fn duration_pair_functions() {
        let sel = FeatureSelection::new(&["duration_min", "duration_max", "duration_absdiff"]).unwrap();
        let fv = trial_features(0.0, Some((&q("a", 3.0), &q("b", 5.0))), None, &sel).unwrap();
        assert_eq!(fv.values, vec![3.0, 5.0, 2.0]);
    }

    #[test]
    fn identical_records_zero_absdiff() {
        let sel = FeatureSelection::new(&[
            "duration_absdiff",
            "snr_absdiff",
            "t60_absdiff",
            "mos_absdiff",
            "magnitude_absdiff",
        ])
        .unwrap();
        let rec = q("a", 4.0);
        let fv = trial_features(0.5, Some((&rec, &rec)), Some((2.5, 2.5)), &sel).unwrap();
        assert!(fv.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn score_only_projection() {
        let fv = trial_features(1.7, None, None, &FeatureSelection::score_only()).unwrap();
        assert_eq!(fv.names, vec!["score"]);
        assert_eq!(fv.values, vec![1.7]);
    }

    #[test]
    fn quality_features_without_records_error() {
        let sel = FeatureSelection::new(&["duration_min"]).unwrap();
        assert!(trial_features(0.0, None, None, &sel).is_err());
    }

    #[test]
    fn separable_scores_fit_positive_weight() {
        let features = score_vecs(&[-1.0, -0.6, -0.2, 0.2, 0.6, 1.0]);
        let labels = [Nontarget, Nontarget, Nontarget, Target, Target, Target];
        let (model, trace) = fit_logreg_traced(&features, &labels, 0.5, 1e-6).unwrap();
        assert!(model.weights[0] > 0.0);
        let loss = weighted_loss(&features, &labels, 0.5, 1e-6, &model.weights, model.bias).unwrap();
        assert!(loss < 0.01, "training loss {loss}");
        assert!(trace.converged);

        // flipped labels flip the weight sign
        let flipped = [Target, Target, Target, Nontarget, Nontarget, Nontarget];
        let inverse = fit_logreg(&features, &flipped, 0.5, 1e-6).unwrap();
        assert!(inverse.weights[0] < 0.0);
    }

    #[test]
    fn six_point_fit_matches_independent_oracle() {
        // frozen from an independent IRLS reference run (Newton on
        // separately-derived analytic derivatives, cross-checked against
        // derivative-free Nelder-Mead): w = 1.3811202239532705, b = 0
        let features = score_vecs(&[-1.0, -0.5, -0.1, 0.1, 0.5, 1.0]);
        let labels = [Nontarget, Nontarget, Nontarget, Target, Target, Target];
        let model = fit_logreg(&features, &labels, 0.5, 0.1).unwrap();
        assert!(
            (model.weights[0] - 1.381_120_223_953_270_5).abs() < 1e-6,
            "w = {}",
            model.weights[0]
        );
        assert!(model.bias.abs() < 1e-6, "b = {}", model.bias);

        // oracle application at x = 0 is just the bias
        let at_zero = trial_features(0.0, None, None, &FeatureSelection::score_only()).unwrap();
        assert!(apply_calibration(&model, &at_zero).unwrap().abs() < 1e-6);
    }

    #[test]
    fn fit_rejects_single_class_and_shape_mismatch() {
        let features = score_vecs(&[0.1, 0.2]);
        assert!(fit_logreg(&features, &[Target, Target], 0.5, 0.0).is_err());
        assert!(fit_logreg(&features, &[Target], 0.5, 0.0).is_err());
        assert!(fit_logreg(&[], &[], 0.5, 0.0).is_err());
        assert!(fit_logreg(&features, &[Target, Nontarget], 0.0, 0.0).is_err());
        assert!(fit_logreg(&features, &[Target, Nontarget], 0.5, -1.0).is_err());
    }

    #[test]
    fn newton_loss_never_increases() {
        let features = score_vecs(&[-2.0, -0.3, -0.1, 0.05, 0.4, 2.5, -0.7, 0.9]);
        let labels = [
            Nontarget, Nontarget, Target, Nontarget, Target, Target, Nontarget, Target,
        ];
        let (_, trace) = fit_logreg_traced(&features, &labels, 0.2, 1e-4).unwrap();
        for w in trace.losses.windows(2) {
            assert!(w[1] <= w[0], "loss increased: {:?}", trace.losses);
        }
    }

    #[test]
    fn deterministic_fit_is_bit_identical() {
        let features = score_vecs(&[-1.0, -0.4, 0.3, 0.8]);
        let labels = [Nontarget, Nontarget, Target, Target];
        let a = fit_logreg(&features, &labels, 0.3, 1e-5).unwrap();
        let b = fit_logreg(&features, &labels, 0.3, 1e-5).unwrap();
        assert_eq!(a.weights[0].to_bits(), b.weights[0].to_bits());
        assert_eq!(a.bias.to_bits(), b.bias.to_bits());
    }

    #[test]
    fn apply_calibration_hand_values() {
        let sel = FeatureSelection::score_only();
        let constant = CalibrationModel::new(vec!["score".into()], vec![0.0], 0.3, 0.5, "t".into()).unwrap();
        for s in [-5.0, 0.0, 7.5] {
            let fv = trial_features(s, None, None, &sel).unwrap();
            assert_eq!(apply_calibration(&constant, &fv).unwrap(), 0.3);
        }

        let affine = CalibrationModel::new(vec!["score".into()], vec![2.0], -1.0, 0.5, "t".into()).unwrap();
        let fv = trial_features(0.5, None, None, &sel).unwrap();
        assert_eq!(apply_calibration(&affine, &fv).unwrap(), 0.0);

        let wrong = FeatureVector::new(vec!["duration_min".into()], vec![1.0]).unwrap();
        assert!(apply_calibration(&affine, &wrong).is_err());
    }

    #[test]
    fn calibrate_scores_matches_manual_apply() {
        let mut scores = ScoreSet::new("s", Stage::Normalized);
        scores.insert("a", "b", 0.4).unwrap();
        scores.insert("a", "c", -0.2).unwrap();
        scores.insert("b", "c", 1.1).unwrap();
        let mut quality = QualityMap::new();
        for (id, d) in [("a", 2.0), ("b", 6.0), ("c", 3.5)] {
            quality.insert(id.to_string(), q(id, d));
        }
        let model = CalibrationModel::new(
            vec!["score".into(), "duration_min".into(), "duration_max".into(), "duration_absdiff".into()],
            vec![2.0, 0.1, -0.05, 0.25],
            0.5,
            0.05,
            "t".into(),
        )
        .unwrap();
        let out = calibrate_scores(&scores, &model, Some(&quality), None).unwrap();
        assert_eq!(out.stage, Stage::Calibrated);
        assert_eq!(out.len(), 3);
        // trial (a, b): durations (2, 6) -> min 2, max 6, absdiff 4
        let expected = 2.0 * 0.4 + 0.1 * 2.0 + (-0.05) * 6.0 + 0.25 * 4.0 + 0.5;
        assert!((out.get("a", "b").unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn calibrate_scores_missing_quality_names_utterance() {
        let mut scores = ScoreSet::new("s", Stage::Raw);
        scores.insert("a", "b", 0.4).unwrap();
        let quality = QualityMap::new();
        let model = CalibrationModel::new(
            vec!["score".into(), "duration_min".into()],
            vec![1.0, 0.0],
            0.0,
            0.05,
            "t".into(),
        )
        .unwrap();
        let err = calibrate_scores(&scores, &model, Some(&quality), None).unwrap_err();
        assert!(err.to_string().contains("missing quality record for utterance a"));
    }

    #[test]
    fn empty_score_set_calibrates_to_empty() {
        let scores = ScoreSet::new("s", Stage::Raw);
        let model = CalibrationModel::new(vec!["score".into()], vec![1.0], 0.0, 0.05, "t".into()).unwrap();
        let out = calibrate_scores(&scores, &model, None, None).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn score_only_calibration_preserves_metric_rates() {
        use crate::metrics::{det_sweep, eer, min_dcf, DcfParams};

        let values = [0.9, 0.1, 0.62, 0.35, 0.55, 0.42];
        let labels = [Target, Nontarget, Target, Nontarget, Target, Nontarget];
        let features = score_vecs(&values);
        let model = fit_logreg(&features, &labels, 0.5, 1e-6).unwrap();
        assert!(model.weights[0] > 0.0);

        let calibrated: Vec<f64> = features
            .iter()
            .map(|f| apply_calibration(&model, f).unwrap())
            .collect();
        let before = det_sweep(&values, &labels).unwrap();
        let after = det_sweep(&calibrated, &labels).unwrap();
        assert_eq!(eer(&before).unwrap(), eer(&after).unwrap());
        let params = DcfParams::default();
        assert_eq!(
            min_dcf(&before, &params).unwrap().0,
            min_dcf(&after, &params).unwrap().0
        );
    }
}
