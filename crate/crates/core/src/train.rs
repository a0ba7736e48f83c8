//! Importance-weighted training and k-fold cross-validation.
//!
//! Training data and deployment data have different label mixes: the
//! emotions are common in training and rare at test time. Each sample's loss
//! is scaled by `P_test(label) / P_train(label)`, which turns the empirical
//! risk under the training mix into an unbiased estimate of the risk under
//! the test mix when only the label marginal shifts.
//!
//! [`cross_validate`] trains one model per fold. Fold `r` never trains fold
//! `r`'s model; it only picks the epoch to keep (early stopping on the
//! harmonic-mean score).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{label_distribution, make_folds, Conversation, EmotionLabel, FoldPlan, LabelDist, NUM_CLASSES};
use crate::embed::WordTable;
use crate::error::{Error, Result};
use crate::inference::argmax;
use crate::metrics::{confusion_from_labels, ScoreReport};
use crate::models::{affect_vocabulary, Features, Model, ModelConfig, ModelKind, Profile};
use crate::neural::{clip_grad_norm, weighted_cross_entropy, AdamConfig, AdamState, DecayRule, Params};
use crate::textprep::{prepare_conversation, EmojiAliasTable, Token};

/// Per-class loss multipliers in canonical class order.
#[derive(Copy, Clone, Debug, PartialEq, Serialize)]
pub struct ClassWeights {
    weights: [f64; NUM_CLASSES],
}

impl ClassWeights {
    pub fn uniform() -> Self {
        ClassWeights {
            weights: [1.0; NUM_CLASSES],
        }
    }

    pub fn get(&self, label: EmotionLabel) -> f64 {
        self.weights[label.index()]
    }

    pub fn as_array(&self) -> &[f64; NUM_CLASSES] {
        &self.weights
    }

    /// `{"others": w, "happy": w, ...}`
    pub fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = EmotionLabel::ALL
            .iter()
            .map(|l| (l.name().to_string(), self.get(*l).into()))
            .collect();
        serde_json::Value::Object(map)
    }
}

/// `w_c = target(c) / train(c)`. A class absent from both gets weight 0.
pub fn class_weights(train: &LabelDist, target: &LabelDist) -> Result<ClassWeights> {
    let mut weights = [0.0; NUM_CLASSES];
    for label in EmotionLabel::ALL {
        let (p, q) = (train.fraction(label), target.fraction(label));
        weights[label.index()] = if p > 0.0 {
            q / p
        } else if q == 0.0 {
            0.0
        } else {
            return Err(Error::domain(format!(
                "class {label} has target share {q} but never occurs in training"
            )));
        };
    }
    Ok(ClassWeights { weights })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without progress on the held fold before stopping.
    pub patience: usize,
    /// Stopping is not considered before this many epochs. Small models sit
    /// on a plateau near the uniform prediction for a few epochs, during
    /// which the held loss can drift up.
    pub min_epochs: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub adam: AdamConfig,
    /// Test-time label mix for importance weighting, e.g.
    /// `"happy=0.05,angry=0.05,sad=0.05,others=0.85"`; `None` trains unweighted.
    pub target: Option<String>,
}

impl TrainConfig {
    /// Small-model schedule: a higher rate with a gentle decay, since
    /// multiplying by 0.2 every epoch freezes a desk model within a few epochs.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 16,
            max_epochs: 50,
            patience: 3,
            min_epochs: 10,
            clip_norm: Some(5.0),
            adam: AdamConfig {
                lr: 4e-3,
                decay_ratio: 0.02,
                decay_rule: DecayRule::Complement,
                ..AdamConfig::default()
            },
            target: Some(DEFAULT_TARGET.to_string()),
        }
    }

    /// Published optimizer settings.
    pub fn paper() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            ..TrainConfig::desk()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => TrainConfig::desk(),
            Profile::Paper => TrainConfig::paper(),
        }
    }

    pub fn target_dist(&self) -> Result<Option<LabelDist>> {
        self.target.as_deref().map(LabelDist::parse_spec).transpose()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::domain("batch size and max epochs must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::domain(format!("clip norm must be positive, got {c}")));
            }
        }
        AdamState::new(self.adam)?;
        self.target_dist()?;
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

/// Five percent per emotion, the rest others.
pub const DEFAULT_TARGET: &str = "happy=0.05,angry=0.05,sad=0.05,others=0.85";

/// A featurized, labelled corpus.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub features: Vec<Features>,
    pub labels: Vec<EmotionLabel>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: rows.iter().map(|&i| self.features[i].clone()).collect(),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// The three token sequences of one conversation.
pub type Turns = [Vec<Token>; 3];

/// Normalized turns of every conversation, which must all be labelled.
pub fn prepare_labelled(convs: &[Conversation], emoji: &EmojiAliasTable) -> Result<(Vec<Turns>, Vec<EmotionLabel>)> {
    let mut turns = Vec::with_capacity(convs.len());
    let mut labels = Vec::with_capacity(convs.len());
    for c in convs {
        let label = c
            .label()
            .ok_or_else(|| Error::domain(format!("conversation {:?} has no label", c.id())))?;
        turns.push(prepare_conversation(c, emoji));
        labels.push(label);
    }
    Ok((turns, labels))
}

pub fn featurize_all(model: &Model, turns: &[[Vec<Token>; 3]], labels: &[EmotionLabel]) -> Dataset {
    Dataset {
        features: turns.par_iter().map(|t| model.featurize(t)).collect(),
        labels: labels.to_vec(),
    }
}

/// Vocabulary for the affect encoder: every token surface in the corpus.
pub fn corpus_affect_vocabulary(turns: &[[Vec<Token>; 3]]) -> Vec<String> {
    affect_vocabulary(turns.iter().flat_map(|t| t.iter().map(|u| u.as_slice())), 1)
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// weighted loss averaged over examples
    pub loss: f64,
    pub batches: usize,
}

/// One pass over `data` in the given `order`: one Adam step per batch, then
/// one learning-rate decay.
pub fn train_epoch(
    model: &mut Model,
    data: &Dataset,
    order: &[usize],
    weights: &ClassWeights,
    opt: &mut AdamState,
    config: &TrainConfig,
) -> Result<EpochStats> {
    if order.is_empty() {
        return Err(Error::domain("training epoch over no examples"));
    }
    let mut total = 0.0;
    let mut batches = 0;
    for (b, chunk) in order.chunks(config.batch_size).enumerate() {
        model.zero_grads();
        let mut traces = Vec::with_capacity(chunk.len());
        let mut logits = Vec::with_capacity(chunk.len() * NUM_CLASSES);
        for &i in chunk {
            let tr = model.forward(&data.features[i]).map_err(|e| Error::Diverged {
                batch: b,
                lr: opt.lr(),
                message: e.to_string(),
            })?;
            logits.extend_from_slice(&tr.logits);
            traces.push(tr);
        }
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i].index()).collect();
        let w: Vec<f64> = chunk.iter().map(|&i| weights.get(data.labels[i])).collect();
        let out = weighted_cross_entropy(&logits, NUM_CLASSES, &labels, &w)?;
        if !out.loss.is_finite() {
            return Err(Error::Diverged {
                batch: b,
                lr: opt.lr(),
                message: format!("loss {}", out.loss),
            });
        }
        for (j, (&i, tr)) in chunk.iter().zip(&traces).enumerate() {
            model.backward(&data.features[i], tr, &out.grad[j * NUM_CLASSES..(j + 1) * NUM_CLASSES]);
        }
        if let Some(c) = config.clip_norm {
            clip_grad_norm(model, c);
        }
        opt.step(model).map_err(|e| Error::Diverged {
            batch: b,
            lr: opt.lr(),
            message: e.to_string(),
        })?;
        total += out.loss * chunk.len() as f64;
        batches += 1;
    }
    opt.epoch_decay();
    Ok(EpochStats {
        loss: total / order.len() as f64,
        batches,
    })
}

pub fn predict_labels(model: &Model, data: &Dataset) -> Result<Vec<EmotionLabel>> {
    data.features
        .iter()
        .map(|f| {
            let logits = model.logits(f)?;
            Ok(EmotionLabel::from_index(argmax(&logits)).expect("class index"))
        })
        .collect()
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<ScoreReport> {
    let preds = predict_labels(model, data)?;
    Ok(ScoreReport::new(&confusion_from_labels(&preds, &data.labels)?))
}

/// Scores and weighted loss of `model` on `data` from one forward pass each.
pub fn evaluate_with_loss(model: &Model, data: &Dataset, weights: &ClassWeights) -> Result<(ScoreReport, f64)> {
    let mut logits = Vec::with_capacity(data.len() * NUM_CLASSES);
    for f in &data.features {
        logits.extend(model.logits(f)?);
    }
    let preds: Vec<EmotionLabel> = logits
        .chunks_exact(NUM_CLASSES)
        .map(|z| EmotionLabel::from_index(argmax(z)).expect("class index"))
        .collect();
    let labels: Vec<usize> = data.labels.iter().map(|l| l.index()).collect();
    let w: Vec<f64> = data.labels.iter().map(|l| weights.get(*l)).collect();
    let loss = weighted_cross_entropy(&logits, NUM_CLASSES, &labels, &w)?.loss;
    let report = ScoreReport::new(&confusion_from_labels(&preds, &data.labels)?);
    Ok((report, loss))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub fold: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub held_score: Option<f64>,
    pub held_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub fold: usize,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept
    pub chosen_epoch: usize,
    pub best_score: Option<f64>,
    pub final_lr: f64,
    pub diverged: Option<String>,
}

impl TrainReport {
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("epoch record serializes") + "\n")
            .collect()
    }
}

/// Deterministic child seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Trains `model` on `train`, reshuffling every epoch. Without a `held` set
/// it runs all epochs and returns the last parameters.
///
/// With one, it returns the parameters of the epoch with the best held
/// harmonic mean (ties go to the lower held loss) and, after `min_epochs`,
/// stops once `patience` epochs have passed with neither a new best score nor
/// a new lowest held loss. Early on the score is mostly chance and often 0 while no emotion is
/// predicted yet; the loss keeps such a run going while the model is still
/// learning.
pub fn fit(
    mut model: Model,
    train: &Dataset,
    held: Option<&Dataset>,
    weights: &ClassWeights,
    config: &TrainConfig,
    seed: u64,
    fold: usize,
) -> Result<(Model, TrainReport)> {
    config.validate()?;
    let mut opt = AdamState::new(config.adam)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::new();
    let mut best: Option<(f64, f64, usize, Model)> = None;
    let mut lowest_loss = f64::INFINITY;
    let mut last_progress = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let stats = train_epoch(&mut model, train, &order, weights, &mut opt, config)?;
        let held_eval = match held {
            Some(h) => Some(evaluate_with_loss(&model, h, weights)?),
            None => None,
        };
        records.push(EpochRecord {
            fold,
            epoch,
            train_loss: stats.loss,
            held_score: held_eval.as_ref().map(|e| e.0.harmonic_mean),
            held_loss: held_eval.as_ref().map(|e| e.1),
            lr: opt.lr(),
        });
        if let Some((report, loss)) = held_eval {
            let score = report.harmonic_mean;
            let better = match &best {
                None => true,
                Some((s, l, _, _)) => score > *s || (score == *s && loss < *l),
            };
            if better {
                best = Some((score, loss, epoch, model.clone()));
                last_progress = epoch;
            }
            if loss < lowest_loss {
                lowest_loss = loss;
                last_progress = epoch;
            }
            if epoch >= config.min_epochs && epoch - last_progress >= config.patience {
                break;
            }
        }
    }
    let last_epoch = records.len();
    let (model, chosen_epoch, best_score) = match best {
        Some((s, _, e, m)) => (m, e, Some(s)),
        None => (model, last_epoch, None),
    };
    let report = TrainReport {
        fold,
        epochs: records,
        chosen_epoch,
        best_score,
        final_lr: opt.lr(),
        diverged: None,
    };
    Ok((model, report))
}

/// Trained fold models (`None` where training diverged) and their reports.
#[derive(Clone, Debug)]
pub struct CrossValidation {
    pub plan: FoldPlan,
    pub weights: ClassWeights,
    pub models: Vec<Option<Model>>,
    pub reports: Vec<TrainReport>,
}

impl CrossValidation {
    pub fn jsonl(&self) -> String {
        self.reports.iter().map(|r| r.to_jsonl()).collect()
    }
}

/// Parallelism cap for fold training: `EMOCTX_THREADS` if set and positive.
pub fn fold_threads() -> Option<usize> {
    std::env::var("EMOCTX_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

#[derive(Clone, Debug)]
pub struct CvSetup<'a> {
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub words: &'a WordTable,
    pub k: usize,
    pub seed: u64,
}

/// Importance weights from the full corpus and the configured target.
pub fn corpus_weights(convs: &[Conversation], config: &TrainConfig) -> Result<ClassWeights> {
    match config.target_dist()? {
        Some(target) => class_weights(&label_distribution(convs)?, &target),
        None => Ok(ClassWeights::uniform()),
    }
}

/// k-fold training. Round `r` trains on every fold but `r` and early-stops on
/// fold `r`. Rounds run in parallel; results do not depend on the thread
/// count.
pub fn cross_validate(convs: &[Conversation], setup: &CvSetup<'_>, emoji: &EmojiAliasTable) -> Result<CrossValidation> {
    setup.train.validate()?;
    if convs.len() < setup.k {
        return Err(Error::domain(format!(
            "{} conversations cannot fill {} folds",
            convs.len(),
            setup.k
        )));
    }
    let plan = make_folds(convs.len(), setup.k, setup.seed)?;
    let weights = corpus_weights(convs, &setup.train)?;
    let (turns, labels) = prepare_labelled(convs, emoji)?;
    let vocab = corpus_affect_vocabulary(&turns);
    let template = Model::new(setup.kind, setup.model.clone(), setup.words.clone(), vocab.clone(), 0)?;
    let data = featurize_all(&template, &turns, &labels);

    let round = |r: usize| -> Result<(Option<Model>, TrainReport)> {
        let model = Model::new(
            setup.kind,
            setup.model.clone(),
            setup.words.clone(),
            vocab.clone(),
            derive_seed(setup.seed, 2 * r as u64),
        )?;
        let train = data.subset(&plan.training(r));
        let held = data.subset(&plan.held_out(r));
        let order_seed = derive_seed(setup.seed, 2 * r as u64 + 1);
        match fit(model, &train, Some(&held), &weights, &setup.train, order_seed, r) {
            Ok((m, rep)) => Ok((Some(m), rep)),
            Err(Error::Diverged { batch, lr, message }) => {
                let why = format!("batch {batch} (lr {lr:e}): {message}");
                eprintln!("warning: fold {r} diverged at {why}; it is excluded from voting");
                Ok((
                    None,
                    TrainReport {
                        fold: r,
                        epochs: Vec::new(),
                        chosen_epoch: 0,
                        best_score: None,
                        final_lr: lr,
                        diverged: Some(why),
                    },
                ))
            }
            Err(e) => Err(e),
        }
    };
    let results: Vec<Result<(Option<Model>, TrainReport)>> = match fold_threads() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::domain(format!("thread pool: {e}")))?
            .install(|| (0..setup.k).into_par_iter().map(round).collect()),
        None => (0..setup.k).into_par_iter().map(round).collect(),
    };
    let mut models = Vec::with_capacity(setup.k);
    let mut reports = Vec::with_capacity(setup.k);
    for res in results {
        let (m, rep) = res?;
        models.push(m);
        reports.push(rep);
    }
    Ok(CrossValidation {
        plan,
        weights,
        models,
        reports,
    })
}
