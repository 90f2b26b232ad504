//! `veriscore`: one binary, one subcommand per pipeline stage.
//!
//! Every subcommand except `simulate` is deterministic: the same inputs
//! produce byte-identical outputs, whatever `--threads` says. File writes go
//! through a temp file and rename, so failures never leave partial outputs.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use indexmap_shim::speaker_map_from_manifest;

use veriscore::augplan::{plan_noise_aug, plan_speed_perturb, DatasetManifest, NoiseType};
use veriscore::calibrate::{
    assemble_training_set, calibrate_scores, fit_logreg, CalibrationModel, FeatureSelection,
};
use veriscore::corpus::{
    load_embeddings, load_model, load_quality, load_scores, load_trials, save_embeddings,
    save_model, save_scores, save_trials, EmbeddingFormat, EmbeddingStore, QualityMap,
};
use veriscore::fuse::{align_systems, apply_fusion, fit_fusion};
use veriscore::metrics::{det_sweep, evaluate, paired_scores, save_det_sweep, DcfParams};
use veriscore::normalize::{build_cohort, normalize_scores, Cohort, DEFAULT_TOP_N};
use veriscore::scoring::score_trials;
use veriscore::simkit::{generate, SimConfig};

#[derive(Parser)]
#[command(name = "veriscore", version, about = "Speaker-verification scoring back-end")]
struct Cli {
    /// Worker threads for scoring/normalization (default: VERISCORE_THREADS
    /// or available parallelism)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Tsv,
    Bin,
}

impl From<FormatArg> for EmbeddingFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Tsv => EmbeddingFormat::Tsv,
            FormatArg::Bin => EmbeddingFormat::Bin,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic benchmark (embeddings, trials, quality,
    /// speaker manifest)
    Simulate(SimulateArgs),
    /// Expand an (id, speaker) manifest by speed perturbation and noise types
    Augplan(AugplanArgs),
    /// Score trials by cosine similarity
    Score(ScoreArgs),
    /// Average per-speaker embeddings into a cohort centroid file
    Cohort(CohortArgs),
    /// Adaptive symmetric score normalization against a cohort
    Snorm(SnormArgs),
    /// Train a logistic-regression calibration model
    Calibrate(CalibrateArgs),
    /// Apply a calibration model to a score file
    ApplyCalib(ApplyCalibArgs),
    /// Train and/or apply logistic-regression fusion over several systems
    Fuse(FuseArgs),
    /// Compute EER and minDCF for a score file against labeled trials
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 50)]
    speakers: usize,
    #[arg(long, default_value_t = 10)]
    utts_per_speaker: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Within-speaker noise scale
    #[arg(long, default_value_t = 0.3)]
    within_noise: f64,
    /// Channel-bias scale applied to each speaker's enroll half
    #[arg(long, default_value_t = 0.5)]
    channel_bias: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = FormatArg::Tsv)]
    format: FormatArg,
    #[arg(long)]
    out_embeddings: PathBuf,
    #[arg(long)]
    out_trials: PathBuf,
    #[arg(long)]
    out_quality: PathBuf,
    #[arg(long)]
    out_speakers: PathBuf,
}

#[derive(Args)]
struct AugplanArgs {
    /// Input manifest TSV (<id>\t<speaker>)
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated speed factors, e.g. 0.9,1.1
    #[arg(long)]
    speed_factors: Option<String>,
    /// Comma-separated noise types from babble,music,noise,reverb
    #[arg(long)]
    noise_types: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Tsv)]
    format: FormatArg,
    #[arg(long)]
    trials: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CohortArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Tsv)]
    format: FormatArg,
    /// Speaker manifest TSV (<id>\t<speaker>) covering every embedding
    #[arg(long)]
    speakers: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Tsv)]
    out_format: FormatArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SnormArgs {
    /// Raw score file to normalize
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Tsv)]
    format: FormatArg,
    /// Cohort centroid file (an embedding file keyed by speaker)
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Tsv)]
    cohort_format: FormatArg,
    /// Top-N imposter scores per side
    #[arg(long, default_value_t = DEFAULT_TOP_N)]
    cohort_top_n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    scores: PathBuf,
    /// Labeled trial list (development set)
    #[arg(long)]
    trials: PathBuf,
    /// Quality manifest; required when quality features are selected
    #[arg(long)]
    quality: Option<PathBuf>,
    /// Embedding file; required when magnitude features are selected
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Tsv)]
    format: FormatArg,
    /// Comma-separated feature names
    #[arg(long, default_value = "score")]
    features: String,
    #[arg(long, default_value_t = CalibrationModel::DEFAULT_PRIOR)]
    prior: f64,
    #[arg(long, default_value_t = CalibrationModel::DEFAULT_L2)]
    l2: f64,
    /// Output model file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ApplyCalibArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    quality: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Tsv)]
    format: FormatArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    /// System score file as <name>=<path>; repeat per system
    #[arg(long = "scores", value_parser = parse_system_spec, required = true)]
    scores: Vec<(String, PathBuf)>,
    /// Trial list: labeled when training, may be unlabeled with --model
    #[arg(long)]
    trials: PathBuf,
    /// Apply this fusion model instead of training one
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    quality: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Tsv)]
    format: FormatArg,
    /// Quality features to append (comma-separated; `score` not allowed here)
    #[arg(long)]
    features: Option<String>,
    #[arg(long, default_value_t = CalibrationModel::DEFAULT_PRIOR)]
    prior: f64,
    #[arg(long, default_value_t = CalibrationModel::DEFAULT_L2)]
    l2: f64,
    /// Output fused score file
    #[arg(long)]
    out: PathBuf,
    /// Also save the trained fusion model
    #[arg(long)]
    out_model: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    trials: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    p_target: f64,
    #[arg(long, default_value_t = 1.0)]
    c_miss: f64,
    #[arg(long, default_value_t = 1.0)]
    c_fa: f64,
    /// Optionally write the DET sweep as TSV <threshold>\t<p_miss>\t<p_fa>
    #[arg(long)]
    det_out: Option<PathBuf>,
}

fn parse_system_spec(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(format!("expected <name>=<path>, got {s:?}")),
    }
}

/// Tiny helper module so the dependency stays test-only in Cargo terms.
mod indexmap_shim {
    use veriscore::augplan::DatasetManifest;

    /// id -> speaker map built from a manifest's entries.
    pub fn speaker_map_from_manifest(
        manifest: &DatasetManifest,
    ) -> Option<impl Iterator<Item = (String, String)> + '_> {
        manifest.entries().map(|e| e.iter().cloned())
    }
}

fn resolve_threads(flag: Option<usize>) -> anyhow::Result<usize> {
    if let Some(n) = flag {
        if n == 0 {
            bail!("--threads must be positive");
        }
        return Ok(n);
    }
    if let Ok(v) = std::env::var("VERISCORE_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("invalid VERISCORE_THREADS value {v:?}"))?;
        if n == 0 {
            bail!("VERISCORE_THREADS must be positive");
        }
        return Ok(n);
    }
    Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn load_quality_arg(path: &Option<PathBuf>) -> anyhow::Result<Option<QualityMap>> {
    Ok(match path {
        Some(p) => Some(load_quality(p)?),
        None => None,
    })
}

fn load_store_arg(
    path: &Option<PathBuf>,
    format: FormatArg,
) -> anyhow::Result<Option<EmbeddingStore>> {
    Ok(match path {
        Some(p) => Some(load_embeddings(p, format.into())?),
        None => None,
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(resolve_threads(cli.threads)?)
        .build()
        .context("building thread pool")?;

    match cli.command {
        Command::Simulate(args) => {
            let config = SimConfig {
                n_speakers: args.speakers,
                utts_per_speaker: args.utts_per_speaker,
                dim: args.dim,
                within_noise: args.within_noise,
                channel_bias_scale: args.channel_bias,
                seed: args.seed,
            };
            let data = generate(&config)?;
            save_embeddings(&data.store, &args.out_embeddings, args.format.into())?;
            save_trials(&data.trials, &args.out_trials)?;
            veriscore::corpus::save_quality(&data.quality, &args.out_quality)?;
            data.speaker_manifest().save(&args.out_speakers)?;
            println!("speakers {}", args.speakers);
            println!("utterances {}", data.store.len());
            println!("trials {}", data.trials.len());
        }
        Command::Augplan(args) => {
            let mut manifest = DatasetManifest::load(&args.manifest)?;
            if let Some(factors) = &args.speed_factors {
                let parsed: Vec<f64> = factors
                    .split(',')
                    .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad speed factor {t:?}")))
                    .collect::<anyhow::Result<_>>()?;
                manifest = plan_speed_perturb(&manifest, &parsed)?;
            }
            if let Some(types) = &args.noise_types {
                let parsed: Vec<NoiseType> = types
                    .split(',')
                    .map(|t| NoiseType::parse(t.trim()))
                    .collect::<veriscore::Result<_>>()?;
                manifest = plan_noise_aug(&manifest, &parsed)?;
            }
            manifest.save(&args.out)?;
            println!("speakers {}", manifest.n_speakers());
            println!("utterances {}", manifest.n_utterances());
        }
        Command::Score(args) => {
            let store = load_embeddings(&args.embeddings, args.format.into())?;
            let trials = load_trials(&args.trials)?;
            let scores = pool.install(|| score_trials(&store, &trials))?;
            save_scores(&scores, &args.out)?;
        }
        Command::Cohort(args) => {
            let mut store = load_embeddings(&args.embeddings, args.format.into())?;
            let manifest = DatasetManifest::load(&args.speakers)?;
            let speakers = speaker_map_from_manifest(&manifest)
                .expect("loaded manifests always carry entries")
                .collect();
            store.set_speakers(speakers)?;
            let cohort = build_cohort(&store)?;
            save_embeddings(&cohort.to_store(), &args.out, args.out_format.into())?;
            println!("cohorts {}", cohort.len());
        }
        Command::Snorm(args) => {
            let raw = load_scores(&args.scores)?;
            let store = load_embeddings(&args.embeddings, args.format.into())?;
            let cohort_store = load_embeddings(&args.cohort, args.cohort_format.into())?;
            let cohort = Cohort::from_centroid_store(&cohort_store)?;
            let normalized =
                pool.install(|| normalize_scores(&raw, &store, &cohort, args.cohort_top_n))?;
            save_scores(&normalized, &args.out)?;
        }
        Command::Calibrate(args) => {
            let scores = load_scores(&args.scores)?;
            let trials = load_trials(&args.trials)?;
            let selection = FeatureSelection::parse(&args.features)?;
            let quality = load_quality_arg(&args.quality)?;
            let store = load_store_arg(&args.embeddings, args.format)?;
            let (features, labels) = assemble_training_set(
                &scores,
                &trials,
                &selection,
                quality.as_ref(),
                store.as_ref(),
            )?;
            let model = fit_logreg(&features, &labels, args.prior, args.l2)?;
            save_model(&model, &args.out)?;
            println!("features {}", model.feature_names.len());
        }
        Command::ApplyCalib(args) => {
            let scores = load_scores(&args.scores)?;
            let model = load_model(&args.model)?;
            let quality = load_quality_arg(&args.quality)?;
            let store = load_store_arg(&args.embeddings, args.format)?;
            let calibrated = calibrate_scores(&scores, &model, quality.as_ref(), store.as_ref())?;
            save_scores(&calibrated, &args.out)?;
        }
        Command::Fuse(args) => {
            let mut loaded = Vec::new();
            for (name, path) in &args.scores {
                loaded.push(load_scores(path)?.with_system(name.clone()));
            }
            let trials = load_trials(&args.trials)?;
            let sets: Vec<&veriscore::corpus::ScoreSet> = loaded.iter().collect();
            let mut input = align_systems(&sets, &trials)?;
            if let Some(features) = &args.features {
                let selection = FeatureSelection::parse(features)?;
                let quality = load_quality_arg(&args.quality)?;
                let store = load_store_arg(&args.embeddings, args.format)?;
                input = input.with_quality_features(&selection, quality.as_ref(), store.as_ref())?;
            }
            let model = match &args.model {
                Some(path) => load_model(path)?,
                None => {
                    let labels = trials.labels()?;
                    let model = fit_fusion(&input, &labels, args.prior, args.l2)?;
                    if let Some(out_model) = &args.out_model {
                        save_model(&model, out_model)?;
                    }
                    model
                }
            };
            let fused = apply_fusion(&model, &input)?;
            save_scores(&fused, &args.out)?;
        }
        Command::Evaluate(args) => {
            let scores = load_scores(&args.scores)?;
            let trials = load_trials(&args.trials)?;
            let params = DcfParams {
                p_target: args.p_target,
                c_miss: args.c_miss,
                c_fa: args.c_fa,
            };
            let report = evaluate(&scores, &trials, &params)?;
            if let Some(det_out) = &args.det_out {
                let (values, labels) = paired_scores(&scores, &trials)?;
                let det = det_sweep(&values, &labels)?;
                save_det_sweep(&det, det_out)?;
            }
            println!("EER(%) {}", report.eer);
            println!("minDCF {}", report.min_dcf);
            println!("threshold {}", report.dcf_threshold);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse(); // usage errors exit 2
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
