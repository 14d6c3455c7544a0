use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clicksense::annotator::{detect_peaks, extract_segments, segment_nonpattern, RecordingInfo};
use clicksense::augment::NoisePool;
use clicksense::dsp::{self, Waveform};
use clicksense::eval::{self, EvalReport, GridPoint, RobustnessTable, RotationSummary};
use clicksense::features::{write_features, FeatureMatrix, FeatureSet, Featurizer};
use clicksense::manifest::{append_entries, CorpusManifest, ManifestEntry, MANIFEST_FILE};
use clicksense::model::{self, build_model, load_checkpoint, save_checkpoint, BroadcastAxis, Mode, Model, ModelConfig};
use clicksense::rng;
use clicksense::segment::{Label, Segment};
use clicksense::stream::{stream_detect, DetectionEvent};
use clicksense::synthgen::build_corpus;
use clicksense::train::{feature_set_for, full_rotation, make_splits, Dataset, SplitPlan, TrainConfig};
use clicksense::wav::{read_wav, write_wav};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{hex, AppConfig};
use crate::{Cli, CliError, Command};

/// Common header of every JSON report.
#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    command: &'a str,
    config_hash: String,
    deterministic: bool,
    #[serde(flatten)]
    body: T,
}

struct Ctx<'a> {
    cfg: AppConfig,
    cli: &'a Cli,
}

impl Ctx<'_> {
    fn write_report<T: Serialize>(&self, command: &str, path: &Path, body: T) -> Result<(), CliError> {
        let r = Report {
            command,
            config_hash: self.cfg.hash(),
            deterministic: self.cli.deterministic,
            body,
        };
        let mut text = serde_json::to_string_pretty(&r).expect("reports serialize");
        text.push('\n');
        write_file(path, text.as_bytes())?;
        log::info!("wrote {}", path.display());
        Ok(())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn read_manifest(path: &Path) -> Result<CorpusManifest, CliError> {
    let file = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    Ok(CorpusManifest::read(file)?)
}

fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex(&Sha256::digest(bytes)))
}

/// The fold-`fold` plan of the configured rotation.
fn fold_plan(cfg: &AppConfig, manifest: &CorpusManifest, fold: usize) -> Result<SplitPlan, CliError> {
    let parts = manifest.participants();
    let rotation = full_rotation(parts.len(), cfg.split.holdout_frac);
    if fold >= rotation {
        return Err(CliError::usage(format!(
            "fold {fold} out of range: the rotation has {rotation} folds"
        )));
    }
    Ok(plans(cfg, manifest, fold + 1)?.pop().expect("fold + 1 plans"))
}

fn plans(cfg: &AppConfig, manifest: &CorpusManifest, n: usize) -> Result<Vec<SplitPlan>, CliError> {
    let mut p = make_splits(&manifest.participants(), cfg.split.holdout_frac, n, cfg.split.seed)?;
    for s in &mut p {
        s.val_fraction = cfg.split.val_fraction;
    }
    Ok(p)
}

pub fn dispatch(cli: &Cli, cfg: AppConfig) -> Result<(), CliError> {
    let ctx = Ctx { cfg, cli };
    match &cli.command {
        Command::Synth { out, participants, seed } => synth(ctx, out, *participants, *seed),
        Command::Annotate {
            input,
            label,
            participant,
            session,
            out,
        } => annotate(ctx, input, label, participant, session, out),
        Command::Featurize { corpus, out } => featurize(ctx, &corpus.manifest, out),
        Command::Augment { corpus, out } => augment_corpus(ctx, &corpus.manifest, out),
        Command::Train {
            corpus,
            out,
            fold,
            history,
        } => train(ctx, &corpus.manifest, out, *fold, history.as_deref()),
        Command::Eval {
            corpus,
            checkpoint,
            out,
            fold,
        } => evaluate(ctx, &corpus.manifest, checkpoint, out, *fold),
        Command::Sweep { corpus, kind, out } => sweep(ctx, &corpus.manifest, kind, out),
        Command::Bench { checkpoint, out } => bench(ctx, checkpoint.as_deref(), out.as_deref()),
        Command::Stream { input, checkpoint, out } => stream(ctx, input, checkpoint, out),
    }
}

fn synth(ctx: Ctx, out: &Path, participants: Option<usize>, seed: Option<u64>) -> Result<(), CliError> {
    let mut s = ctx.cfg.synth.clone();
    if let Some(p) = participants {
        s.participants = p;
    }
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let m = build_corpus(s.participants, &s.composition(), s.seed, out)?;
    let c = m.counts();
    log::info!(
        "{} segments for {} participants (no pattern {}, single {}, double {})",
        m.entries.len(),
        s.participants,
        c.per_class[0],
        c.per_class[1],
        c.per_class[2]
    );
    Ok(())
}

#[derive(Serialize)]
struct AnnotateBody<'a> {
    input: String,
    label: Label,
    participant: &'a str,
    session: &'a str,
    peaks_detected: usize,
    segments_written: usize,
    dropped_near_edges: usize,
}

fn annotate(ctx: Ctx, input: &Path, label: &str, participant: &str, session: &str, out: &Path) -> Result<(), CliError> {
    let label: Label = label.parse()?;
    let raw = read_wav(input)?;
    let info = RecordingInfo {
        participant_id: participant.to_string(),
        session_id: session.to_string(),
    };
    let (segments, peaks, dropped) = if label.is_pattern() {
        let peaks = detect_peaks(&dsp::preprocess(&raw)?, &ctx.cfg.annotator)?;
        // positions come from the filtered signal; samples are stored raw
        let ex = extract_segments(&raw, &peaks, &ctx.cfg.annotator, label, &info)?;
        (ex.segments, peaks.indices.len(), ex.dropped)
    } else {
        (segment_nonpattern(&raw, label, &info)?, 0, 0)
    };
    let stem = label.to_string().replace(':', "_");
    let mut entries = Vec::with_capacity(segments.len());
    for (i, s) in segments.iter().enumerate() {
        let rel = format!("{participant}/{session}_{stem}_{i:04}.wav");
        let path = out.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        write_wav(&path, &s.wave)?;
        entries.push(ManifestEntry::new(rel, participant, label, "annotated", false));
    }
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    append_entries(out.join(MANIFEST_FILE), &entries)?;
    let body = AnnotateBody {
        input: input.display().to_string(),
        label,
        participant,
        session,
        peaks_detected: peaks,
        segments_written: segments.len(),
        dropped_near_edges: dropped,
    };
    ctx.write_report("annotate", &out.join(format!("annotate_{session}.json")), body)
}

#[derive(Serialize)]
struct FeatureIndexLine<'a> {
    segment: &'a str,
    features: String,
    participant: &'a str,
    label: &'a str,
    rows: usize,
    cols: usize,
}

fn featurize(ctx: Ctx, manifest: &Path, out: &Path) -> Result<(), CliError> {
    let m = read_manifest(manifest)?;
    let fz = Featurizer::new(ctx.cfg.features.set);
    let mut index = String::new();
    for e in &m.entries {
        let seg = m.load_segment(e)?;
        let x = fz.featurize(&dsp::preprocess(&seg.wave)?.samples)?;
        let rel = Path::new(&e.path).with_extension("stlf").to_string_lossy().into_owned();
        let path = out.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|err| CliError::io(parent, err))?;
        }
        write_features(&path, &x)?;
        let line = FeatureIndexLine {
            segment: &e.path,
            features: rel,
            participant: &e.participant,
            label: &e.label,
            rows: x.rows,
            cols: x.cols,
        };
        index.push_str(&serde_json::to_string(&line).expect("index serializes"));
        index.push('\n');
    }
    write_file(&out.join("features.jsonl"), index.as_bytes())?;
    log::info!("featurized {} segments ({})", m.entries.len(), ctx.cfg.features.set.name());
    Ok(())
}

/// Directory name of one noise level, e.g. `snr_m10` or `snr_p23`.
fn level_dir(db: f64) -> String {
    let sign = if db < 0.0 { 'm' } else { 'p' };
    format!("snr_{sign}{}", format!("{}", db.abs()).replace('.', "_"))
}

/// Writes one corpus per configured SNR level: every pattern segment mixed
/// with pool noise at that level, background segments copied unchanged.
fn augment_corpus(ctx: Ctx, manifest: &Path, out: &Path) -> Result<(), CliError> {
    let m = read_manifest(manifest)?;
    let segs = m.load_all()?;
    let pool = NoisePool::from_segments(&segs);
    if pool.is_empty() {
        return Err(clicksense::Error::EmptyNoisePool.into());
    }
    let mut levels = Vec::new();
    for &db in &ctx.cfg.eval.snr_levels_db {
        let dir = out.join(level_dir(db));
        let noisy = eval::corrupt_patterns(&segs, &pool, db, ctx.cfg.eval.seed)?;
        let mut entries = Vec::with_capacity(noisy.len());
        for (e, s) in m.entries.iter().zip(&noisy) {
            let path = dir.join(&e.path);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|err| CliError::io(parent, err))?;
            }
            write_wav(&path, &s.wave)?;
            entries.push(ManifestEntry {
                augmented: s.label.is_pattern(),
                ..e.clone()
            });
        }
        CorpusManifest::new(&dir, entries)?.write(dir.join(MANIFEST_FILE))?;
        levels.push(level_dir(db));
    }
    log::info!("wrote {} noisy corpora under {}", levels.len(), out.display());
    #[derive(Serialize)]
    struct Body<'a> {
        snr_levels_db: &'a [f64],
        corpora: Vec<String>,
        n_segments: usize,
        noise_pool: usize,
    }
    let body = Body {
        snr_levels_db: &ctx.cfg.eval.snr_levels_db,
        corpora: levels,
        n_segments: segs.len(),
        noise_pool: pool.len(),
    };
    ctx.write_report("augment", &out.join("augment.json"), body)
}

fn load_data(manifest: &CorpusManifest, set: FeatureSet) -> Result<Dataset, CliError> {
    let t = Instant::now();
    let d = Dataset::load(manifest, set)?;
    log::info!("loaded {} segments in {:.1?}", d.len(), t.elapsed());
    Ok(d)
}

#[derive(Serialize)]
struct HistoryBody<'a> {
    split: &'a SplitPlan,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    params: usize,
    checkpoint_sha256: String,
    history: &'a clicksense::train::History,
}

fn train(ctx: Ctx, manifest: &Path, out: &Path, fold: usize, history: Option<&Path>) -> Result<(), CliError> {
    let m = read_manifest(manifest)?;
    let plan = fold_plan(&ctx.cfg, &m, fold)?;
    let mcfg = ctx.cfg.model_config();
    let data = load_data(&m, ctx.cfg.features.set)?;
    let t = Instant::now();
    let run = eval::train_fold(&data, &plan, &mcfg, &ctx.cfg.train)?;
    log::info!(
        "trained {} epochs in {:.1?}; best epoch {} (val loss {:.4})",
        run.history.epochs.len(),
        t.elapsed(),
        run.history.best_epoch,
        run.history.best_val_loss
    );
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    save_checkpoint(out, &run.model)?;
    let hist_path = history
        .map(Path::to_path_buf)
        .unwrap_or_else(|| with_suffix(out, ".history.json"));
    let body = HistoryBody {
        split: &plan,
        model: &mcfg,
        train: &ctx.cfg.train,
        params: run.model.n_params(),
        checkpoint_sha256: file_sha256(out)?,
        history: &run.history,
    };
    ctx.write_report("train", &hist_path, body)
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    if !path.exists() {
        return Err(CliError {
            kind: "io",
            message: format!("checkpoint not found: {}", path.display()),
            path: Some(path.to_path_buf()),
        });
    }
    Ok(load_checkpoint(path)?)
}

#[derive(Serialize)]
struct EvalBody<'a> {
    checkpoint_sha256: String,
    split: &'a SplitPlan,
    features: &'static str,
    snr_levels_db: &'a [f64],
    clean: EvalReport,
    noisy: EvalReport,
}

fn evaluate(ctx: Ctx, manifest: &Path, checkpoint: &Path, out: &Path, fold: usize) -> Result<(), CliError> {
    let model = load_model(checkpoint)?;
    let m = read_manifest(manifest)?;
    let plan = fold_plan(&ctx.cfg, &m, fold)?;
    let set = feature_set_for(&model.config)?;
    let data = load_data(&m, set)?;
    let idx = plan.assign_segments(&data.segments)?;
    let mut clean = eval::evaluate_features(&model, &data.labeled(&idx.test))?;
    clean.fold_id = Some(plan.fold_id);
    let test: Vec<Segment> = idx.test.iter().map(|&i| data.segments[i].clone()).collect();
    let pool = eval::test_noise_pool(&data, &idx);
    let levels = &ctx.cfg.eval.snr_levels_db;
    let mut noisy = eval::evaluate_noisy(&model, &test, &data.featurizer, &pool, levels, ctx.cfg.eval.seed)?;
    noisy.fold_id = Some(plan.fold_id);
    log::info!(
        "balanced accuracy: clean {:.4}, noisy {:.4}",
        clean.balanced_accuracy,
        noisy.balanced_accuracy
    );
    write_file(&out.with_extension("csv"), clean.confusion.to_csv().as_bytes())?;
    write_file(&with_suffix(out, ".noisy.csv"), noisy.confusion.to_csv().as_bytes())?;
    let body = EvalBody {
        checkpoint_sha256: file_sha256(checkpoint)?,
        split: &plan,
        features: set.name(),
        snr_levels_db: levels,
        clean,
        noisy,
    };
    ctx.write_report("eval", out, body)
}

#[derive(Serialize, Default)]
struct SweepBody {
    #[serde(skip_serializing_if = "Option::is_none")]
    rotation: Option<RotationSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    robustness: Option<RobustnessReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    size: Option<Vec<GridPoint>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    features: Option<Vec<GridPoint>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    axis: Option<Vec<GridPoint>>,
}

#[derive(Serialize)]
struct RobustnessReport {
    per_fold: Vec<RobustnessTable>,
    mean: RobustnessTable,
}

const SWEEP_KINDS: [&str; 6] = ["rotation", "robustness", "size", "features", "axis", "all"];

fn sweep(ctx: Ctx, manifest: &Path, kind: &str, out: &Path) -> Result<(), CliError> {
    if !SWEEP_KINDS.contains(&kind) {
        return Err(CliError::usage(format!(
            "unknown sweep kind '{kind}' (known: {})",
            SWEEP_KINDS.join(", ")
        )));
    }
    let m = read_manifest(manifest)?;
    let cfg = &ctx.cfg;
    let splits = plans(cfg, &m, cfg.split.n_folds)?;
    let mcfg = cfg.model_config();
    let data = load_data(&m, cfg.features.set)?;
    let levels = &cfg.eval.snr_levels_db;
    let want = |k: &str| kind == k || kind == "all";
    let mut body = SweepBody::default();

    if want("rotation") {
        body.rotation = Some(eval::run_rotation(&data, &splits, &mcfg, &cfg.train, levels)?);
    }
    if want("robustness") {
        let clean_cfg = TrainConfig {
            augment_enabled: false,
            ..cfg.train.clone()
        };
        let mut per_fold = Vec::with_capacity(splits.len());
        for s in &splits {
            let aug = eval::train_fold(&data, s, &mcfg, &cfg.train)?;
            let clean = eval::train_fold(&data, s, &mcfg, &clean_cfg)?;
            per_fold.push(eval::sweep_fold(&data, &clean, &aug, levels, cfg.eval.seed)?);
        }
        let mean = eval::average_sweeps(&per_fold).expect("at least one fold");
        log::info!("augmented minus clean-trained balanced accuracy: {:+.4}", mean.mean_gap);
        body.robustness = Some(RobustnessReport { per_fold, mean });
    }
    if want("size") {
        body.size = Some(eval::size_sweep(
            &data,
            &splits[0],
            &mcfg,
            &cfg.sweep.width_factors,
            &cfg.train,
        )?);
    }
    if want("features") {
        body.features = Some(eval::feature_ablation(
            &data,
            &splits[0],
            &mcfg,
            &cfg.sweep.feature_sets,
            &cfg.train,
        )?);
    }
    if want("axis") {
        let mut points = Vec::new();
        for axis in [BroadcastAxis::Temporal, BroadcastAxis::Feature] {
            let c = ModelConfig {
                broadcast_axis: axis,
                ..mcfg.clone()
            };
            let name = if axis == BroadcastAxis::Temporal {
                "temporal"
            } else {
                "feature"
            };
            points.push(eval::train_and_score(name.into(), &data, &splits[0], &c, &cfg.train)?);
        }
        body.axis = Some(points);
    }
    ctx.write_report("sweep", out, body)
}

#[derive(Serialize)]
struct BenchBody {
    model: ModelConfig,
    params: usize,
    macs: u64,
    iterations: usize,
    featurize_ms_median: f64,
    forward_ms_median: f64,
    total_ms_median: f64,
}

fn median_ms(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.get(v.len() / 2).copied().unwrap_or(f64::NAN)
}

fn bench(ctx: Ctx, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<(), CliError> {
    let mut m = match checkpoint {
        Some(p) => load_model(p)?,
        None => build_model(&ctx.cfg.model_config(), ctx.cfg.train.seed)?,
    };
    m.mode = Mode::Eval;
    let fz = Featurizer::new(feature_set_for(&m.config)?);
    let mut r = rng::rng_from(ctx.cfg.train.seed, &[rng::tag("bench")]);
    let w = {
        use clicksense::synthgen::{make_profile, synth_segment};
        synth_segment(&make_profile(0), Label::Pattern2, &mut r).wave
    };
    let n = ctx.cfg.bench.iterations.max(1);
    let (mut tf, mut tm) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut sink = 0.0;
    for _ in 0..n {
        let t = Instant::now();
        let x: FeatureMatrix = fz.featurize(&dsp::preprocess(&w)?.samples)?;
        tf.push(t.elapsed().as_secs_f64() * 1e3);
        let t = Instant::now();
        sink += model::forward(&m, &x)?[0];
        tm.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let total: Vec<f64> = tf.iter().zip(&tm).map(|(a, b)| a + b).collect();
    let body = BenchBody {
        params: model::count_params(&m.config),
        macs: model::count_macs(&m.config),
        model: m.config.clone(),
        iterations: n,
        featurize_ms_median: median_ms(tf),
        forward_ms_median: median_ms(tm),
        total_ms_median: median_ms(total),
    };
    log::debug!("checksum {sink}");
    println!(
        "params {}  macs {}  latency {:.3} ms (featurize {:.3} + forward {:.3})",
        body.params, body.macs, body.total_ms_median, body.featurize_ms_median, body.forward_ms_median
    );
    match out {
        Some(p) => ctx.write_report("bench", p, body),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct StreamBody {
    input: String,
    duration_s: f64,
    n_events: usize,
    events: Vec<DetectionEvent>,
}

fn stream(ctx: Ctx, input: &Path, checkpoint: &Path, out: &Path) -> Result<(), CliError> {
    let model = load_model(checkpoint)?;
    let w: Waveform = read_wav(input)?;
    let events = stream_detect(&w, &model, &ctx.cfg.stream)?;
    for e in &events {
        log::info!("{:8.3} s  {}  p={:.3}", e.onset_s, e.label, e.confidence);
    }
    let body = StreamBody {
        input: input
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        duration_s: w.duration_s(),
        n_events: events.len(),
        events,
    };
    ctx.write_report("stream", out, body)
}
