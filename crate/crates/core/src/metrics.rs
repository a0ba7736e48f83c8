//! Confusion matrices, per-class F1 and the competition score: the harmonic
//! mean of the happy, angry and sad F1 scores. "others" is scored in the
//! matrix but never enters the headline number.

use std::fmt;

use serde::Serialize;

use crate::corpus::{EmotionLabel, NUM_CLASSES};
use crate::error::{Error, Result};

/// Rows are gold labels, columns predictions, both in canonical class order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn add(&mut self, gold: EmotionLabel, predicted: EmotionLabel) {
        self.counts[gold.index()][predicted.index()] += 1;
    }

    pub fn correct(&self) -> u64 {
        (0..NUM_CLASSES).map(|c| self.counts[c][c]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.correct() as f64 / n as f64,
        }
    }

    fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }
}

/// Aligned table with gold labels down the side.
impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .counts
            .iter()
            .flatten()
            .map(|c| c.to_string().len())
            .chain(EmotionLabel::ALL.iter().map(|l| l.name().len()))
            .max()
            .unwrap_or(1);
        write!(f, "{:>w$}", "gold\\pred", w = 9)?;
        for l in EmotionLabel::ALL {
            write!(f, "  {:>width$}", l.name())?;
        }
        writeln!(f)?;
        for g in EmotionLabel::ALL {
            write!(f, "{:>9}", g.name())?;
            for p in EmotionLabel::ALL {
                write!(f, "  {:>width$}", self.counts[g.index()][p.index()])?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Matrix of aligned `(id, label)` sequences.
pub fn confusion<P, G>(preds: &[(P, EmotionLabel)], golds: &[(G, EmotionLabel)]) -> Result<ConfusionMatrix>
where
    P: AsRef<str>,
    G: AsRef<str>,
{
    if preds.len() != golds.len() {
        return Err(Error::domain(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    let mut m = ConfusionMatrix::default();
    for (i, ((pid, p), (gid, g))) in preds.iter().zip(golds).enumerate() {
        if pid.as_ref() != gid.as_ref() {
            return Err(Error::domain(format!(
                "row {}: prediction id {:?} does not match gold id {:?}",
                i + 1,
                pid.as_ref(),
                gid.as_ref()
            )));
        }
        m.add(*g, *p);
    }
    Ok(m)
}

/// Matrix of label sequences without ids.
pub fn confusion_from_labels(preds: &[EmotionLabel], golds: &[EmotionLabel]) -> Result<ConfusionMatrix> {
    if preds.len() != golds.len() {
        return Err(Error::domain(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    let mut m = ConfusionMatrix::default();
    for (p, g) in preds.iter().zip(golds) {
        m.add(*g, *p);
    }
    Ok(m)
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 per class. Empty denominators score 0, so a
/// class that is never gold and never predicted has F1 = 0.
pub fn class_scores(m: &ConfusionMatrix) -> [ClassScore; NUM_CLASSES] {
    std::array::from_fn(|c| {
        let tp = m.counts[c][c];
        let precision = ratio(tp, m.col_sum(c));
        let recall = ratio(tp, m.row_sum(c));
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassScore { precision, recall, f1 }
    })
}

pub fn f1_scores(m: &ConfusionMatrix) -> [f64; NUM_CLASSES] {
    class_scores(m).map(|s| s.f1)
}

/// `n / sum(1/v)`; any zero (or an empty slice) gives 0.
pub fn harmonic_mean(values: &[f64]) -> f64 {
    if values.is_empty() || values.iter().any(|&v| v <= 0.0) {
        return 0.0;
    }
    values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>()
}

/// Harmonic mean of the three emotion F1 scores.
pub fn emotion_score(f1: &[f64; NUM_CLASSES]) -> f64 {
    let emotions: Vec<f64> = EmotionLabel::EMOTIONS.iter().map(|l| f1[l.index()]).collect();
    harmonic_mean(&emotions)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NamedScore {
    pub label: EmotionLabel,
    #[serde(flatten)]
    pub score: ClassScore,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreReport {
    pub classes: Vec<NamedScore>,
    /// harmonic mean of the happy, angry and sad F1 scores
    pub harmonic_mean: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

impl ScoreReport {
    pub fn new(m: &ConfusionMatrix) -> Self {
        let scores = class_scores(m);
        ScoreReport {
            classes: EmotionLabel::ALL
                .iter()
                .map(|&label| NamedScore {
                    label,
                    score: scores[label.index()],
                })
                .collect(),
            harmonic_mean: emotion_score(&scores.map(|s| s.f1)),
            accuracy: m.accuracy(),
            confusion: m.clone(),
        }
    }

    pub fn f1(&self, label: EmotionLabel) -> f64 {
        self.classes[label.index()].score.f1
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("score report serializes")
    }
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>9}  {:>9}  {:>9}  {:>9}", "class", "precision", "recall", "f1")?;
        for c in &self.classes {
            writeln!(
                f,
                "{:>9}  {:>9.4}  {:>9.4}  {:>9.4}",
                c.label.name(),
                c.score.precision,
                c.score.recall,
                c.score.f1
            )?;
        }
        writeln!(f)?;
        write!(f, "{}", self.confusion)?;
        writeln!(f)?;
        writeln!(f, "accuracy       {:.4}", self.accuracy)?;
        writeln!(f, "harmonic mean  {:.4}", self.harmonic_mean)
    }
}
