//! Detection-error tradeoff: ROC sweep, EER and minimum normalized detection
//! cost.
//!
//! Conventions, fixed so an exhaustive-threshold oracle agrees exactly:
//! - decision rule: score >= threshold means accept;
//! - the sweep holds one point per distinct score plus sentinels at -inf
//!   (accept everything) and +inf (reject everything);
//! - EER interpolates linearly between the adjacent sweep points where
//!   p_miss - p_fa changes sign, and returns an exact-tie point directly
//!   when one exists;
//! - minDCF is evaluated only at realized thresholds plus the sentinels
//!   (no interpolation), ties broken by the lower threshold.

use crate::corpus::{ScoreSet, TrialLabel, TrialList};
use crate::error::{Error, Result};

/// One operating point of the detection-error tradeoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Detection cost function parameters. Defaults follow the VoxSRC challenge
/// convention: target prior 0.05, unit costs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams {
            p_target: 0.05,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::invalid(format!("p_target must be in (0,1), got {}", self.p_target)));
        }
        if self.c_miss <= 0.0 || self.c_fa <= 0.0 {
            return Err(Error::invalid("detection costs must be positive"));
        }
        Ok(())
    }
}

/// Full evaluation result for one score set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Equal error rate, in percent.
    pub eer: f64,
    /// Minimum normalized detection cost.
    pub min_dcf: f64,
    /// Threshold attaining the minimum cost.
    pub dcf_threshold: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
    pub params: DcfParams,
}

/// Sort-and-scan ROC sweep over (score, label) pairs.
pub fn det_sweep(scores: &[f64], labels: &[TrialLabel]) -> Result<Vec<DetPoint>> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels length mismatch"));
    }
    let n_target = labels.iter().filter(|l| **l == TrialLabel::Target).count();
    let n_nontarget = labels.len() - n_target;
    if n_target == 0 || n_nontarget == 0 {
        return Err(Error::invalid(
            "need at least one target and one nontarget trial",
        ));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("non-finite score {s}")));
    }

    let mut pairs: Vec<(f64, TrialLabel)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));

    let nt = n_target as f64;
    let nn = n_nontarget as f64;
    let mut points = Vec::with_capacity(pairs.len() + 2);
    points.push(DetPoint {
        threshold: f64::NEG_INFINITY,
        p_miss: 0.0,
        p_fa: 1.0,
    });

    // walk groups of equal score; counts below the group give the rates at
    // threshold = group score
    let mut targets_below = 0usize;
    let mut nontargets_below = 0usize;
    let mut i = 0;
    while i < pairs.len() {
        let s = pairs[i].0;
        let mut j = i;
        let mut group_targets = 0usize;
        while j < pairs.len() && pairs[j].0 == s {
            if pairs[j].1 == TrialLabel::Target {
                group_targets += 1;
            }
            j += 1;
        }
        points.push(DetPoint {
            threshold: s,
            p_miss: targets_below as f64 / nt,
            p_fa: (n_nontarget - nontargets_below) as f64 / nn,
        });
        targets_below += group_targets;
        nontargets_below += (j - i) - group_targets;
        i = j;
    }

    points.push(DetPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    Ok(points)
}

/// Equal error rate in percent from a DET sweep.
pub fn eer(det: &[DetPoint]) -> Result<f64> {
    if det.len() < 2 {
        return Err(Error::invalid("sweep too short"));
    }
    // exact tie wins outright
    for p in det {
        if p.p_miss == p.p_fa {
            return Ok(100.0 * p.p_miss);
        }
    }
    // p_miss - p_fa is non-decreasing along the sweep; find its sign change
    for w in det.windows(2) {
        let d1 = w[0].p_miss - w[0].p_fa;
        let d2 = w[1].p_miss - w[1].p_fa;
        if d1 < 0.0 && d2 > 0.0 {
            // both rates are linear in threshold between adjacent points, so
            // interpolating in the rate gap is parameterization-free and
            // stays finite even next to the infinite sentinels
            let alpha = d1 / (d1 - d2);
            return Ok(100.0 * (w[0].p_miss + alpha * (w[1].p_miss - w[0].p_miss)));
        }
    }
    Err(Error::invalid("no EER crossing found in sweep"))
}

/// Minimum normalized detection cost and the threshold attaining it.
pub fn min_dcf(det: &[DetPoint], params: &DcfParams) -> Result<(f64, f64)> {
    params.validate()?;
    if det.is_empty() {
        return Err(Error::invalid("empty sweep"));
    }
    let mut best = f64::INFINITY;
    let mut best_threshold = f64::NEG_INFINITY;
    for p in det {
        let dcf = params.c_miss * p.p_miss * params.p_target
            + params.c_fa * p.p_fa * (1.0 - params.p_target);
        if dcf < best {
            best = dcf;
            best_threshold = p.threshold;
        }
    }
    let floor = (params.c_miss * params.p_target).min(params.c_fa * (1.0 - params.p_target));
    Ok((best / floor, best_threshold))
}

/// Writes a sweep as TSV: `<threshold>\t<p_miss>\t<p_fa>` per point.
pub fn save_det_sweep(det: &[DetPoint], path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut out = String::new();
    for p in det {
        out.push_str(&format!("{}\t{}\t{}\n", p.threshold, p.p_miss, p.p_fa));
    }
    crate::corpus::atomic_write(path.as_ref(), out.as_bytes())
}

/// Extracts (score, label) pairs in trial-list order, checking that the
/// score set covers exactly the trial list and every trial is labeled.
pub fn paired_scores(scores: &ScoreSet, trials: &TrialList) -> Result<(Vec<f64>, Vec<TrialLabel>)> {
    scores.check_matches(trials)?;
    let labels = trials.labels()?;
    let values: Vec<f64> = trials
        .iter()
        .map(|t| scores.get(&t.enroll, &t.test).expect("checked above"))
        .collect();
    Ok((values, labels))
}

/// Pairs a score set with a labeled trial list and computes EER and minDCF.
pub fn evaluate(scores: &ScoreSet, trials: &TrialList, params: &DcfParams) -> Result<EvalReport> {
    let (values, labels) = paired_scores(scores, trials)?;
    let det = det_sweep(&values, &labels)?;
    let eer_pct = eer(&det)?;
    let (dcf, threshold) = min_dcf(&det, params)?;
    let n_target = labels.iter().filter(|l| **l == TrialLabel::Target).count();
    Ok(EvalReport {
        eer: eer_pct,
        min_dcf: dcf,
        dcf_threshold: threshold,
        n_target,
        n_nontarget: labels.len() - n_target,
        params: *params,
    })
}
