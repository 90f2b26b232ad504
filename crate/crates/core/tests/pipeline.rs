//! End-to-end pipeline regression on the seeded synthetic fixture: raw
//! cosine -> S-Norm -> calibration, evaluated at each stage. The metric
//! values were pinned on first computation and act as the self-consistency
//! oracle; every stage is deterministic, so they must reproduce exactly.

use veriscore::calibrate::{assemble_training_set, calibrate_scores, fit_logreg, FeatureSelection};
use veriscore::corpus::Stage;
use veriscore::metrics::{evaluate, DcfParams};
use veriscore::normalize::{build_cohort, normalize_scores, normalize_scores_traced};
use veriscore::scoring::score_trials;
use veriscore::simkit::{generate, SimConfig};

fn fixture() -> SimConfig {
    SimConfig {
        n_speakers: 50,
        utts_per_speaker: 10,
        dim: 64,
        within_noise: 0.3,
        channel_bias_scale: 0.5,
        seed: 7,
    }
}

const TOP_N: usize = 40;

#[test]
fn staged_pipeline_reproduces_pinned_values() {
    let data = generate(&fixture()).unwrap();
    let params = DcfParams::default();

    let raw = score_trials(&data.store, &data.trials).unwrap();
    assert_eq!(raw.stage, Stage::Raw);
    let raw_report = evaluate(&raw, &data.trials, &params).unwrap();

    let cohort = build_cohort(&data.store).unwrap();
    assert_eq!(cohort.len(), 50);
    let normalized = normalize_scores(&raw, &data.store, &cohort, TOP_N).unwrap();
    let norm_report = evaluate(&normalized, &data.trials, &params).unwrap();

    let selection =
        FeatureSelection::parse("score,duration_min,duration_max,duration_absdiff").unwrap();
    let (features, labels) =
        assemble_training_set(&normalized, &data.trials, &selection, Some(&data.quality), None)
            .unwrap();
    let model = fit_logreg(&features, &labels, 0.05, 1e-6).unwrap();
    let calibrated = calibrate_scores(&normalized, &model, Some(&data.quality), None).unwrap();
    let calib_report = evaluate(&calibrated, &data.trials, &params).unwrap();

    // pinned on first computation
    assert!((raw_report.eer - 30.977777777777778).abs() < 1e-9, "{}", raw_report.eer);
    assert!((raw_report.min_dcf - 0.7706666666666667).abs() < 1e-9, "{}", raw_report.min_dcf);
    assert!((norm_report.eer - 30.177777777777777).abs() < 1e-9, "{}", norm_report.eer);
    assert!((norm_report.min_dcf - 0.7715555555555556).abs() < 1e-9, "{}", norm_report.min_dcf);
    assert!((calib_report.eer - 30.08888888888889).abs() < 1e-9, "{}", calib_report.eer);
    assert!((calib_report.min_dcf - 0.7715555555555556).abs() < 1e-9, "{}", calib_report.min_dcf);

    // the stage ordering the pipeline exists for
    assert!(norm_report.eer <= raw_report.eer);
    assert!(calib_report.min_dcf <= norm_report.min_dcf + 1e-9);

    assert_eq!(raw_report.n_target, 2250);
    assert_eq!(raw_report.n_nontarget, 2250);
}

#[test]
fn normalization_computes_stats_once_per_utterance() {
    let data = generate(&fixture()).unwrap();
    let raw = score_trials(&data.store, &data.trials).unwrap();
    let cohort = build_cohort(&data.store).unwrap();
    let (_, trace) = normalize_scores_traced(&raw, &data.store, &cohort, TOP_N).unwrap();
    // every utterance appears in some trial; 500 stats computations total
    assert_eq!(trace.stats_computed, 500);
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        let data = generate(&fixture()).unwrap();
        let raw = score_trials(&data.store, &data.trials).unwrap();
        let cohort = build_cohort(&data.store).unwrap();
        let normalized = normalize_scores(&raw, &data.store, &cohort, TOP_N).unwrap();
        normalized
            .iter()
            .map(|(_, v)| v.to_bits())
            .collect::<Vec<u64>>()
    };
    assert_eq!(run(), run());
}
