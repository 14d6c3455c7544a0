//! Leave-participants-out splits, class-balanced sampling and the training
//! loop with early stopping on validation loss.

use std::borrow::Cow;
use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig, NoisePool};
use crate::dsp;
use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, FeatureSet, Featurizer};
use crate::manifest::CorpusManifest;
use crate::model::{self, AdamConfig, AdamState, Mode, Model, ModelConfig};
use crate::rng::{self, Rng};
use crate::segment::{Segment, N_CLASSES};

pub const DEFAULT_HOLDOUT_FRAC: f64 = 0.1;
pub const DEFAULT_VAL_FRACTION: f64 = 0.15;

/// One rotation fold: which participants train and which are held out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub fold_id: usize,
    pub train_participants: Vec<String>,
    pub test_participants: Vec<String>,
    /// Share of each class among train-participant segments kept for
    /// early stopping.
    pub val_fraction: f64,
    /// Seed of the stratified validation draw.
    pub seed: u64,
}

/// Segment positions for one fold.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitPlan {
    /// Fails if any participant is on both sides.
    pub fn check_disjoint(&self) -> Result<()> {
        let train: BTreeSet<&str> = self.train_participants.iter().map(String::as_str).collect();
        if let Some(p) = self.test_participants.iter().find(|p| train.contains(p.as_str())) {
            return Err(Error::InvalidParameter(format!(
                "participant {p} is in both train and test of fold {}",
                self.fold_id
            )));
        }
        Ok(())
    }

    /// Assigns `(participant, class)` items to train, val or test. Items of
    /// unknown participants are left out.
    pub fn assign(&self, items: &[(&str, usize)]) -> Result<SplitIndices> {
        self.check_disjoint()?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidParameter(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        let train: BTreeSet<&str> = self.train_participants.iter().map(String::as_str).collect();
        let test: BTreeSet<&str> = self.test_participants.iter().map(String::as_str).collect();
        let mut out = SplitIndices::default();
        let mut by_class = vec![Vec::new(); N_CLASSES];
        for (i, &(p, c)) in items.iter().enumerate() {
            if test.contains(p) {
                out.test.push(i);
            } else if train.contains(p) {
                by_class
                    .get_mut(c)
                    .ok_or_else(|| Error::InvalidParameter(format!("class {c} out of range")))?
                    .push(i);
            }
        }
        for (c, mut idx) in by_class.into_iter().enumerate() {
            idx.shuffle(&mut rng::rng_from(
                self.seed,
                &[rng::tag("val"), self.fold_id as u64, c as u64],
            ));
            let n_val = (self.val_fraction * idx.len() as f64).round() as usize;
            out.val.extend_from_slice(&idx[..n_val]);
            out.train.extend_from_slice(&idx[n_val..]);
        }
        out.train.sort_unstable();
        out.val.sort_unstable();
        Ok(out)
    }

    pub fn assign_segments(&self, segments: &[Segment]) -> Result<SplitIndices> {
        let items: Vec<(&str, usize)> = segments
            .iter()
            .map(|s| (s.participant_id.as_str(), s.label.class()))
            .collect();
        self.assign(&items)
    }
}

/// Participants held out per fold: `⌈holdout_frac · n⌉`, at least 1.
pub fn holdout_size(n_participants: usize, holdout_frac: f64) -> usize {
    ((holdout_frac * n_participants as f64 - 1e-9).ceil() as usize).clamp(1, n_participants.saturating_sub(1).max(1))
}

/// Folds needed for every participant to be held out once.
pub fn full_rotation(n_participants: usize, holdout_frac: f64) -> usize {
    n_participants.div_ceil(holdout_size(n_participants, holdout_frac))
}

/// Rotation folds over a seeded participant order. Fold `i` holds out the
/// `i`-th run of `holdout_size` participants; when the count does not divide
/// evenly the final fold of a full rotation is shorter, so a full rotation
/// covers every participant exactly once.
pub fn make_splits(participants: &[String], holdout_frac: f64, n_folds: usize, seed: u64) -> Result<Vec<SplitPlan>> {
    let unique: BTreeSet<&String> = participants.iter().collect();
    if unique.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "splitting needs at least 2 participants, got {}",
            unique.len()
        )));
    }
    if !(holdout_frac > 0.0 && holdout_frac < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "holdout_frac must lie in (0, 1), got {holdout_frac}"
        )));
    }
    let n = unique.len();
    let rotation = full_rotation(n, holdout_frac);
    if n_folds == 0 || n_folds > rotation {
        return Err(Error::InvalidParameter(format!(
            "n_folds must lie in 1..={rotation} for {n} participants, got {n_folds}"
        )));
    }
    let k = holdout_size(n, holdout_frac);
    let mut order: Vec<String> = unique.into_iter().cloned().collect();
    order.shuffle(&mut rng::rng_from(seed, &[rng::tag("folds")]));
    Ok((0..n_folds)
        .map(|fold| {
            let test: Vec<String> = order[fold * k..((fold + 1) * k).min(n)].to_vec();
            let train = order.iter().filter(|p| !test.contains(p)).cloned().collect();
            SplitPlan {
                fold_id: fold,
                train_participants: train,
                test_participants: test,
                val_fraction: DEFAULT_VAL_FRACTION,
                seed,
            }
        })
        .collect())
}

pub fn make_splits_for(manifest: &CorpusManifest, holdout_frac: f64, n_folds: usize, seed: u64) -> Result<Vec<SplitPlan>> {
    make_splits(&manifest.participants(), holdout_frac, n_folds, seed)
}

/// Per-item sampling weights proportional to the inverse class count.
pub fn balanced_weights(labels: &[usize]) -> Result<Vec<f64>> {
    let mut counts = [0usize; N_CLASSES];
    for &l in labels {
        *counts.get_mut(l).ok_or(Error::MissingClass(l))? += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::MissingClass(c));
    }
    Ok(labels.iter().map(|&l| 1.0 / counts[l] as f64).collect())
}

/// Endless with-replacement draws in which every class is equally likely.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    by_class: Vec<Vec<usize>>,
    rng: Rng,
}

impl BalancedSampler {
    pub fn new(labels: &[usize], rng: Rng) -> Result<Self> {
        balanced_weights(labels)?;
        let mut by_class = vec![Vec::new(); N_CLASSES];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l].push(i);
        }
        Ok(Self { by_class, rng })
    }
}

impl Iterator for BalancedSampler {
    type Item = usize;

    // class first, then a member: the same law as inverse-count weights
    fn next(&mut self) -> Option<usize> {
        let members = &self.by_class[self.rng.random_range(0..N_CLASSES)];
        Some(members[self.rng.random_range(0..members.len())])
    }
}

/// Preprocessed segments with their clean features.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub segments: Vec<Segment>,
    pub features: Vec<FeatureMatrix>,
    pub featurizer: Featurizer,
}

impl Dataset {
    /// Filters raw segments and featurizes them.
    pub fn prepare(raw: Vec<Segment>, set: FeatureSet) -> Result<Self> {
        let segments = raw
            .into_iter()
            .map(|s| Ok(s.with_wave(dsp::preprocess(&s.wave)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_preprocessed(segments, set)
    }

    pub fn from_preprocessed(segments: Vec<Segment>, set: FeatureSet) -> Result<Self> {
        let featurizer = Featurizer::new(set);
        let features = segments
            .iter()
            .map(|s| featurizer.featurize(&s.wave.samples))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            segments,
            features,
            featurizer,
        })
    }

    pub fn load(manifest: &CorpusManifest, set: FeatureSet) -> Result<Self> {
        Self::prepare(manifest.load_all()?, set)
    }

    /// Same segments under another feature set.
    pub fn with_features(&self, set: FeatureSet) -> Result<Self> {
        Self::from_preprocessed(self.segments.clone(), set)
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn class(&self, i: usize) -> usize {
        self.segments[i].label.class()
    }

    /// Noise-pool segments among `indices`.
    pub fn noise_pool(&self, indices: &[usize]) -> NoisePool {
        NoisePool::from_segments(indices.iter().map(|&i| &self.segments[i]))
    }

    pub fn labeled(&self, indices: &[usize]) -> Vec<(&FeatureMatrix, usize)> {
        indices.iter().map(|&i| (&self.features[i], self.class(i))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Corrupt pattern segments on the fly; off gives a clean-trained model.
    pub augment_enabled: bool,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 128,
            max_epochs: 200,
            patience: 15,
            augment_enabled: true,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidParameter(
                "lr, batch_size and max_epochs must be positive".into(),
            ));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::InvalidParameter(format!(
                "patience ({}) must be below max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        self.augment.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were returned.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Patience-based stopping rule that remembers the best epoch.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records an epoch's validation loss; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> (bool, bool) {
        let improved = self.best.is_none_or(|(_, b)| val_loss < b);
        if improved {
            self.best = Some((epoch, val_loss));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        (improved, self.since_best >= self.patience)
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

pub struct TrainOutcome {
    /// Weights of the epoch with the lowest validation loss, in eval mode.
    pub model: Model,
    pub history: History,
}

/// Trains on `split.train`, stopping on `split.val` loss. Each epoch draws
/// `⌈|train| / batch_size⌉` class-balanced batches; pattern segments are
/// corrupted on the fly when augmentation is on.
pub fn train_on(
    data: &Dataset,
    split: &SplitIndices,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    pool: &NoisePool,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    if split.val.is_empty() {
        return Err(Error::InvalidParameter("validation split is empty".into()));
    }
    if tcfg.augment_enabled && tcfg.augment.noise_enabled && pool.is_empty() {
        return Err(Error::EmptyNoisePool);
    }
    let labels: Vec<usize> = split.train.iter().map(|&i| data.class(i)).collect();
    let mut sampler = BalancedSampler::new(&labels, rng::rng_from(tcfg.seed, &[rng::tag("sampler")]))?;
    let mut aug_rng = rng::rng_from(tcfg.seed, &[rng::tag("augment")]);
    let mut m = model::build_model(mcfg, rng::derive_seed(tcfg.seed, &[rng::tag("init")]))?;
    let adam = AdamConfig {
        lr: tcfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(m.n_params());
    let val = data.labeled(&split.val);
    let n_batches = split.train.len().div_ceil(tcfg.batch_size);

    let mut stopper = EarlyStopping::new(tcfg.patience);
    let mut history = History::default();
    let mut best = m.clone();
    for epoch in 1..=tcfg.max_epochs {
        m.mode = Mode::Train;
        let mut loss_sum = 0.0;
        for _ in 0..n_batches {
            let mut feats: Vec<(Cow<FeatureMatrix>, usize)> = Vec::with_capacity(tcfg.batch_size);
            for _ in 0..tcfg.batch_size {
                let i = split.train[sampler.next().expect("endless sampler")];
                let seg = &data.segments[i];
                let x = if tcfg.augment_enabled && seg.label.is_pattern() {
                    let a = augment(seg, &tcfg.augment, pool, &mut aug_rng)?;
                    if a.wave == seg.wave {
                        Cow::Borrowed(&data.features[i])
                    } else {
                        Cow::Owned(data.featurizer.featurize(&a.wave.samples)?)
                    }
                } else {
                    Cow::Borrowed(&data.features[i])
                };
                feats.push((x, seg.label.class()));
            }
            let batch: Vec<(&FeatureMatrix, usize)> = feats.iter().map(|(x, c)| (x.as_ref(), *c)).collect();
            let lg = model::loss_and_grad(&m, &batch)?;
            if !lg.loss.is_finite() {
                return Err(Error::Diverged { epoch, loss: lg.loss });
            }
            model::apply_gradients(&mut m, &lg.grads, &mut state, &adam)?;
            m.update_running_stats(&lg.batch_stats);
            loss_sum += lg.loss;
        }
        m.mode = Mode::Eval;
        let val_loss = model::eval_loss(&m, &val)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: val_loss });
        }
        let train_loss = loss_sum / n_batches as f64;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        let (improved, stop) = stopper.observe(epoch, val_loss);
        log::info!(
            "epoch {epoch}: train {train_loss:.4} val {val_loss:.4}{}",
            if improved { " *" } else { "" }
        );
        if improved {
            best = m.clone();
        }
        if stop {
            break;
        }
    }
    let (best_epoch, best_val_loss) = stopper.best().expect("at least one epoch ran");
    history.best_epoch = best_epoch;
    history.best_val_loss = best_val_loss;
    best.mode = Mode::Eval;
    Ok(TrainOutcome { model: best, history })
}

/// Loads the manifest, derives the fold's indices and trains. The feature
/// set follows from the model's input height; the noise pool, if `None`, is
/// the train participants' background recordings.
pub fn train(
    manifest: &CorpusManifest,
    split: &SplitPlan,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    pool: Option<&NoisePool>,
) -> Result<TrainOutcome> {
    let set = feature_set_for(mcfg)?;
    let data = Dataset::load(manifest, set)?;
    let idx = split.assign_segments(&data.segments)?;
    let own;
    let pool = match pool {
        Some(p) => p,
        None => {
            own = data.noise_pool(&idx.train);
            &own
        }
    };
    train_on(&data, &idx, mcfg, tcfg, pool)
}

pub fn feature_set_for(mcfg: &ModelConfig) -> Result<FeatureSet> {
    FeatureSet::from_rows(mcfg.input_f)
        .ok_or_else(|| Error::InvalidParameter(format!("no feature set has {} rows", mcfg.input_f)))
}
