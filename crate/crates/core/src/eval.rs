//! Test-set evaluation, noise-robustness sweeps, rotation runs and the
//! model-size and input-feature grids.

use serde::{Deserialize, Serialize};

use crate::augment::{mix_at_snr, NoisePool};
use crate::error::Result;
use crate::features::{FeatureMatrix, FeatureSet, Featurizer};
use crate::metrics::{balanced_accuracy, f1_per_class, mean_std, ConfusionMatrix};
use crate::model::{count_macs, count_params, Mode, Model, ModelConfig};
use crate::rng;
use crate::segment::{Segment, N_CLASSES};
use crate::train::{train_on, Dataset, History, SplitIndices, SplitPlan, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrRow {
    pub snr_db: f64,
    pub balanced_accuracy: f64,
    pub f1_per_class: [f64; N_CLASSES],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fold_id: Option<usize>,
    pub n_segments: usize,
    pub confusion: ConfusionMatrix,
    pub balanced_accuracy: f64,
    pub f1_per_class: [f64; N_CLASSES],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_table: Option<Vec<SnrRow>>,
}

impl EvalReport {
    pub fn from_confusion(cm: ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            fold_id: None,
            n_segments: cm.total() as usize,
            confusion: cm,
            balanced_accuracy: balanced_accuracy(&cm)?,
            f1_per_class: f1_per_class(&cm),
            snr_table: None,
        })
    }
}

/// Argmax predictions for labeled feature matrices.
pub fn evaluate_features(m: &Model, items: &[(&FeatureMatrix, usize)]) -> Result<EvalReport> {
    let mut m = std::borrow::Cow::Borrowed(m);
    if m.mode != Mode::Eval {
        m.to_mut().mode = Mode::Eval;
    }
    let mut cm = ConfusionMatrix::default();
    for &(x, t) in items {
        cm.add(t, m.predict(x)?)?;
    }
    EvalReport::from_confusion(cm)
}

/// Featurizes preprocessed segments and evaluates them.
pub fn evaluate(m: &Model, segments: &[Segment], fz: &Featurizer) -> Result<EvalReport> {
    let feats = segments
        .iter()
        .map(|s| fz.featurize(&s.wave.samples))
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<(&FeatureMatrix, usize)> = feats.iter().zip(segments).map(|(x, s)| (x, s.label.class())).collect();
    evaluate_features(m, &items)
}

/// Copies of `segments` with every pattern segment mixed with pool noise at
/// `snr_db`; background segments are unchanged. Each segment's noise draw
/// depends only on `(seed, snr_db, position)`. An infinite level returns
/// the input unchanged.
pub fn corrupt_patterns(segments: &[Segment], pool: &NoisePool, snr_db: f64, seed: u64) -> Result<Vec<Segment>> {
    if snr_db == f64::INFINITY {
        return Ok(segments.to_vec());
    }
    segments
        .iter()
        .enumerate()
        .map(|(j, s)| {
            if !s.label.is_pattern() || s.wave.power() == 0.0 {
                return Ok(s.clone());
            }
            let mut r = rng::rng_from(seed, &[rng::tag("corrupt"), snr_db.to_bits(), j as u64]);
            let noise = pool.draw(&mut r)?;
            Ok(s.with_wave(mix_at_snr(&s.wave, noise, snr_db)?))
        })
        .collect()
}

fn corrupted_features(
    segments: &[Segment],
    fz: &Featurizer,
    pool: &NoisePool,
    snr_db: f64,
    seed: u64,
) -> Result<Vec<(FeatureMatrix, usize)>> {
    corrupt_patterns(segments, pool, snr_db, seed)?
        .iter()
        .map(|s| Ok((fz.featurize(&s.wave.samples)?, s.label.class())))
        .collect()
}

fn refs(v: &[(FeatureMatrix, usize)]) -> Vec<(&FeatureMatrix, usize)> {
    v.iter().map(|(x, c)| (x, *c)).collect()
}

/// Evaluates at each noise level. The returned report pools the confusion
/// counts of all levels and carries the per-level table.
pub fn evaluate_noisy(
    m: &Model,
    segments: &[Segment],
    fz: &Featurizer,
    pool: &NoisePool,
    levels: &[f64],
    seed: u64,
) -> Result<EvalReport> {
    let mut pooled = ConfusionMatrix::default();
    let mut table = Vec::with_capacity(levels.len());
    for &snr in levels {
        let feats = corrupted_features(segments, fz, pool, snr, seed)?;
        let r = evaluate_features(m, &refs(&feats))?;
        pooled.merge(&r.confusion);
        table.push(SnrRow {
            snr_db: snr,
            balanced_accuracy: r.balanced_accuracy,
            f1_per_class: r.f1_per_class,
        });
    }
    let mut report = EvalReport::from_confusion(pooled)?;
    report.snr_table = Some(table);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub snr_db: f64,
    pub clean_trained: EvalReport,
    pub augmented_trained: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessTable {
    pub rows: Vec<SweepRow>,
    pub mean_clean_trained: f64,
    pub mean_augmented_trained: f64,
    /// Augmented minus clean, in balanced-accuracy units.
    pub mean_gap: f64,
}

/// Both models on identically corrupted copies of the test set per level.
pub fn robustness_sweep(
    m_clean: &Model,
    m_augmented: &Model,
    segments: &[Segment],
    fz: &Featurizer,
    pool: &NoisePool,
    levels: &[f64],
    seed: u64,
) -> Result<RobustnessTable> {
    let mut rows = Vec::with_capacity(levels.len());
    for &snr in levels {
        let feats = corrupted_features(segments, fz, pool, snr, seed)?;
        rows.push(SweepRow {
            snr_db: snr,
            clean_trained: evaluate_features(m_clean, &refs(&feats))?,
            augmented_trained: evaluate_features(m_augmented, &refs(&feats))?,
        });
    }
    Ok(summarize_sweep(rows))
}

fn summarize_sweep(rows: Vec<SweepRow>) -> RobustnessTable {
    let n = rows.len().max(1) as f64;
    let mc = rows.iter().map(|r| r.clean_trained.balanced_accuracy).sum::<f64>() / n;
    let ma = rows.iter().map(|r| r.augmented_trained.balanced_accuracy).sum::<f64>() / n;
    RobustnessTable {
        rows,
        mean_clean_trained: mc,
        mean_augmented_trained: ma,
        mean_gap: ma - mc,
    }
}

/// One training run on one fold with its clean and noisy test scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub split: SplitPlan,
    pub history: History,
    pub clean: EvalReport,
    pub noisy: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationSummary {
    pub folds: Vec<FoldResult>,
    pub mean_clean_balanced_accuracy: f64,
    pub std_clean_balanced_accuracy: f64,
    pub mean_noisy_balanced_accuracy: f64,
    pub std_noisy_balanced_accuracy: f64,
}

impl RotationSummary {
    pub fn from_folds(folds: Vec<FoldResult>) -> Self {
        let c: Vec<f64> = folds.iter().map(|f| f.clean.balanced_accuracy).collect();
        let n: Vec<f64> = folds.iter().map(|f| f.noisy.balanced_accuracy).collect();
        let (mc, sc) = mean_std(&c);
        let (mn, sn) = mean_std(&n);
        Self {
            folds,
            mean_clean_balanced_accuracy: mc,
            std_clean_balanced_accuracy: sc,
            mean_noisy_balanced_accuracy: mn,
            std_noisy_balanced_accuracy: sn,
        }
    }
}

/// Noise for corrupting a fold's test patterns: the test participants'
/// background recordings, or every participant's if they have none.
pub fn test_noise_pool(data: &Dataset, idx: &SplitIndices) -> NoisePool {
    let pool = data.noise_pool(&idx.test);
    if pool.is_empty() {
        data.noise_pool(&(0..data.len()).collect::<Vec<_>>())
    } else {
        pool
    }
}

fn pick(data: &Dataset, indices: &[usize]) -> Vec<Segment> {
    indices.iter().map(|&i| data.segments[i].clone()).collect()
}

/// Trained model of one fold plus what is needed to score it.
pub struct FoldRun {
    pub split: SplitPlan,
    pub indices: SplitIndices,
    pub model: Model,
    pub history: History,
}

pub fn train_fold(data: &Dataset, split: &SplitPlan, mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<FoldRun> {
    let indices = split.assign_segments(&data.segments)?;
    let pool = data.noise_pool(&indices.train);
    log::info!(
        "fold {}: train {} val {} test {} (held out {:?})",
        split.fold_id,
        indices.train.len(),
        indices.val.len(),
        indices.test.len(),
        split.test_participants
    );
    let out = train_on(data, &indices, mcfg, tcfg, &pool)?;
    Ok(FoldRun {
        split: split.clone(),
        indices,
        model: out.model,
        history: out.history,
    })
}

/// Clean and noisy test evaluation of a trained fold.
pub fn score_fold(data: &Dataset, run: &FoldRun, levels: &[f64], seed: u64) -> Result<FoldResult> {
    let test = pick(data, &run.indices.test);
    let mut clean = evaluate_features(&run.model, &data.labeled(&run.indices.test))?;
    clean.fold_id = Some(run.split.fold_id);
    let pool = test_noise_pool(data, &run.indices);
    let mut noisy = evaluate_noisy(&run.model, &test, &data.featurizer, &pool, levels, seed)?;
    noisy.fold_id = Some(run.split.fold_id);
    Ok(FoldResult {
        split: run.split.clone(),
        history: run.history.clone(),
        clean,
        noisy,
    })
}

/// Robustness sweep for a pair of models trained on the same fold.
pub fn sweep_fold(data: &Dataset, clean: &FoldRun, augmented: &FoldRun, levels: &[f64], seed: u64) -> Result<RobustnessTable> {
    let test = pick(data, &augmented.indices.test);
    let pool = test_noise_pool(data, &augmented.indices);
    robustness_sweep(&clean.model, &augmented.model, &test, &data.featurizer, &pool, levels, seed)
}

/// Mean of per-fold sweep tables, level by level.
pub fn average_sweeps(tables: &[RobustnessTable]) -> Option<RobustnessTable> {
    let first = tables.first()?;
    let n = tables.len() as f64;
    let rows = (0..first.rows.len())
        .map(|i| {
            let merge = |get: &dyn Fn(&SweepRow) -> &EvalReport| {
                let mut cm = ConfusionMatrix::default();
                for t in tables {
                    cm.merge(&get(&t.rows[i]).confusion);
                }
                let bal = tables.iter().map(|t| get(&t.rows[i]).balanced_accuracy).sum::<f64>() / n;
                let mut r = EvalReport::from_confusion(cm).expect("pooled folds cover every class");
                r.balanced_accuracy = bal;
                r
            };
            SweepRow {
                snr_db: first.rows[i].snr_db,
                clean_trained: merge(&|r| &r.clean_trained),
                augmented_trained: merge(&|r| &r.augmented_trained),
            }
        })
        .collect();
    Some(summarize_sweep(rows))
}

/// Trains and scores each split in turn.
pub fn run_rotation(
    data: &Dataset,
    splits: &[SplitPlan],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    levels: &[f64],
) -> Result<RotationSummary> {
    let mut folds = Vec::with_capacity(splits.len());
    for s in splits {
        let run = train_fold(data, s, mcfg, tcfg)?;
        folds.push(score_fold(data, &run, levels, tcfg.seed)?);
    }
    Ok(RotationSummary::from_folds(folds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub label: String,
    pub block_channels: Vec<usize>,
    pub input_rows: usize,
    pub params: usize,
    pub macs: u64,
    pub best_epoch: usize,
    pub clean: EvalReport,
}

/// Trains on one split and scores the clean test set.
pub fn train_and_score(
    label: String,
    data: &Dataset,
    split: &SplitPlan,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<GridPoint> {
    let run = train_fold(data, split, mcfg, tcfg)?;
    let mut clean = evaluate_features(&run.model, &data.labeled(&run.indices.test))?;
    clean.fold_id = Some(split.fold_id);
    Ok(GridPoint {
        label,
        block_channels: mcfg.block_channels.clone(),
        input_rows: mcfg.input_f,
        params: count_params(mcfg),
        macs: count_macs(mcfg),
        best_epoch: run.history.best_epoch,
        clean,
    })
}

/// Every width scaled by each factor, trained on one split.
pub fn size_sweep(
    data: &Dataset,
    split: &SplitPlan,
    base: &ModelConfig,
    factors: &[f64],
    tcfg: &TrainConfig,
) -> Result<Vec<GridPoint>> {
    factors
        .iter()
        .map(|&f| train_and_score(format!("x{f}"), data, split, &base.scaled(f), tcfg))
        .collect()
}

/// The same architecture on each input feature set, trained on one split.
pub fn feature_ablation(
    data: &Dataset,
    split: &SplitPlan,
    base: &ModelConfig,
    sets: &[FeatureSet],
    tcfg: &TrainConfig,
) -> Result<Vec<GridPoint>> {
    sets.iter()
        .map(|&set| {
            let d = if set == data.featurizer.set {
                None
            } else {
                Some(data.with_features(set)?)
            };
            let mcfg = ModelConfig {
                input_f: set.n_rows(),
                ..base.clone()
            };
            train_and_score(set.name().to_string(), d.as_ref().unwrap_or(data), split, &mcfg, tcfg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::Waveform;
    use crate::model::build_model;
    use crate::segment::{Label, NoPatternKind, Provenance};
    use crate::synthgen::{generate_corpus, Composition};

    fn data() -> Dataset {
        let items = generate_corpus(3, &Composition::uniform(4), 21).unwrap();
        Dataset::prepare(items.into_iter().map(|i| i.segment).collect(), FeatureSet::Full).unwrap()
    }

    fn zero_head(cfg: &ModelConfig) -> Model {
        let mut m = build_model(cfg, 1).unwrap();
        m.param_mut("head.weight").unwrap().fill(0.0);
        m.param_mut("head.bias").unwrap().fill(0.0);
        m.mode = Mode::Eval;
        m
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            block_channels: vec![2, 3],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zeroed_head_predicts_lowest_class() {
        let d = data();
        let all: Vec<usize> = (0..d.len()).collect();
        let r = evaluate_features(&zero_head(&tiny()), &d.labeled(&all)).unwrap();
        // every prediction ties and resolves to class 0: one recall is 1
        assert!((r.balanced_accuracy - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.confusion.col_sum(0), d.len() as u64);
    }

    #[test]
    fn duplicated_segments_keep_rates() {
        let d = data();
        let m = {
            let mut m = build_model(&tiny(), 4).unwrap();
            m.mode = Mode::Eval;
            m
        };
        let all: Vec<usize> = (0..d.len()).collect();
        let twice: Vec<usize> = all.iter().chain(&all).copied().collect();
        let a = evaluate_features(&m, &d.labeled(&all)).unwrap();
        let b = evaluate_features(&m, &d.labeled(&twice)).unwrap();
        assert_eq!(a.balanced_accuracy, b.balanced_accuracy);
        assert_eq!(a.f1_per_class, b.f1_per_class);
        assert_eq!(b.n_segments, 2 * a.n_segments);
        // the segment path agrees with the cached-feature path
        let c = evaluate(&m, &d.segments, &d.featurizer).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn sweep_identity_level_and_determinism() {
        let d = data();
        let pool = NoisePool::new(vec![(
            Waveform::new((0..48_000).map(|i| ((i as f64) * 0.37).sin()).collect()),
            NoPatternKind::Chewing,
        )])
        .unwrap();
        let mut a = build_model(&tiny(), 2).unwrap();
        let mut b = build_model(&tiny(), 3).unwrap();
        a.mode = Mode::Eval;
        b.mode = Mode::Eval;
        let levels = [f64::INFINITY, 0.0, -10.0];
        let t1 = robustness_sweep(&a, &b, &d.segments, &d.featurizer, &pool, &levels, 6).unwrap();
        let t2 = robustness_sweep(&a, &b, &d.segments, &d.featurizer, &pool, &levels, 6).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(t1.rows[0].clean_trained, evaluate(&a, &d.segments, &d.featurizer).unwrap());
        assert_eq!(
            t1.rows[0].augmented_trained,
            evaluate(&b, &d.segments, &d.featurizer).unwrap()
        );
    }

    #[test]
    fn corruption_spares_background_and_hits_target_snr() {
        let d = data();
        let pool = NoisePool::new(vec![(Waveform::new(vec![0.5; 48_000]), NoPatternKind::Motion)]).unwrap();
        let out = corrupt_patterns(&d.segments, &pool, 3.0, 1).unwrap();
        for (a, b) in d.segments.iter().zip(&out) {
            if a.label.is_pattern() {
                let n = Waveform::new(b.wave.samples.iter().zip(&a.wave.samples).map(|(x, y)| x - y).collect());
                let s = crate::augment::snr_db(&b.wave, &n).unwrap();
                assert!((s - 3.0).abs() < 0.01, "{s}");
            } else {
                assert_eq!(a, b);
            }
        }
        let s = Segment::new(Waveform::zeros(48_000), Label::Pattern1, "x", Provenance::SyntheticDirect).unwrap();
        assert_eq!(corrupt_patterns(&[s.clone()], &pool, 0.0, 1).unwrap()[0], s);
    }
}
