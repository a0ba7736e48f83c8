//! Batch prediction, prediction files and majority voting.
//!
//! A prediction file is a TSV with header
//! `id  p_others  p_happy  p_angry  p_sad  label` and probabilities printed to
//! six decimals. Vote output uses the same layout (mean probabilities plus
//! the voted label), so merged files can be voted again and systems trained
//! elsewhere can join a vote by writing this format.

use rayon::prelude::*;

use crate::corpus::{Conversation, EmotionLabel, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::models::{Features, Model};
use crate::neural::softmax;
use crate::textprep::EmojiAliasTable;

pub const PREDICTION_HEADER: &str = "id\tp_others\tp_happy\tp_angry\tp_sad\tlabel";

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub probs: [f64; NUM_CLASSES],
    pub label: EmotionLabel,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl Prediction {
    pub fn from_logits(id: impl Into<String>, logits: &[f64]) -> Result<Self> {
        if logits.len() != NUM_CLASSES {
            return Err(Error::domain(format!(
                "expected {NUM_CLASSES} logits, got {}",
                logits.len()
            )));
        }
        let p = softmax(logits);
        let probs: [f64; NUM_CLASSES] = p.try_into().expect("softmax keeps the width");
        Ok(Prediction {
            id: id.into(),
            probs,
            label: EmotionLabel::from_index(argmax(&probs)).expect("argmax is a class index"),
        })
    }
}

pub fn predict_features(model: &Model, ids: &[&str], features: &[Features]) -> Result<Vec<Prediction>> {
    if ids.len() != features.len() {
        return Err(Error::domain("one id is needed per feature set"));
    }
    ids.par_iter()
        .zip(features)
        .map(|(id, f)| Prediction::from_logits(*id, &model.logits(f)?))
        .collect()
}

/// Predictions for raw conversations, in input order.
pub fn predict(model: &Model, convs: &[Conversation], emoji: &EmojiAliasTable) -> Result<Vec<Prediction>> {
    convs
        .par_iter()
        .map(|c| {
            let f = model.featurize_conversation(c, emoji);
            Prediction::from_logits(c.id(), &model.logits(&f)?)
        })
        .collect()
}

pub fn format_predictions(preds: &[Prediction]) -> String {
    let mut out = String::with_capacity(64 * (preds.len() + 1));
    out.push_str(PREDICTION_HEADER);
    out.push('\n');
    for p in preds {
        out.push_str(&p.id);
        for v in p.probs {
            out.push_str(&format!("\t{v:.6}"));
        }
        out.push('\t');
        out.push_str(p.label.name());
        out.push('\n');
    }
    out
}

/// Parses a prediction file. The header line is optional.
pub fn parse_predictions(text: &str) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || (out.is_empty() && line.starts_with("id\t")) {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != NUM_CLASSES + 2 {
            return Err(Error::parse(
                line_no,
                format!("expected {} columns, found {}", NUM_CLASSES + 2, cells.len()),
            ));
        }
        let mut probs = [0.0; NUM_CLASSES];
        for (p, cell) in probs.iter_mut().zip(&cells[1..=NUM_CLASSES]) {
            *p = cell
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| Error::parse(line_no, format!("bad probability {cell:?}")))?;
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::parse(line_no, format!("probabilities sum to {sum}")));
        }
        let label = cells[NUM_CLASSES + 1]
            .parse::<EmotionLabel>()
            .map_err(|e| Error::parse(line_no, e.to_string()))?;
        out.push(Prediction {
            id: cells[0].to_string(),
            probs,
            label,
        });
    }
    Ok(out)
}

/// Order-independent sum: adds the values smallest first.
fn canonical_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Merges voters example by example. The most voted label wins; ties go to
/// the highest summed probability among the tied labels, then to the lowest
/// class index. Output probabilities are the voter means.
///
/// The result does not depend on the order of `voters`, bit for bit.
pub fn majority_vote(voters: &[Vec<Prediction>]) -> Result<Vec<Prediction>> {
    let first = voters
        .first()
        .ok_or_else(|| Error::domain("majority vote needs at least one voter"))?;
    for (v, preds) in voters.iter().enumerate().skip(1) {
        if let Some(i) = (0..first.len().min(preds.len())).find(|&i| preds[i].id != first[i].id) {
            return Err(Error::domain(format!(
                "voter {} diverges at row {}: id {:?} where voter 1 has {:?}",
                v + 1,
                i + 1,
                preds[i].id,
                first[i].id
            )));
        }
        if preds.len() != first.len() {
            let (longer, i) = if preds.len() > first.len() {
                (preds, first.len())
            } else {
                (first, preds.len())
            };
            return Err(Error::domain(format!(
                "voter {} has {} rows, voter 1 has {}; first unmatched id {:?}",
                v + 1,
                preds.len(),
                first.len(),
                longer[i].id
            )));
        }
    }
    let n = voters.len() as f64;
    let merged = (0..first.len())
        .map(|i| {
            let mut votes = [0usize; NUM_CLASSES];
            let mut column = vec![0.0; voters.len()];
            let mut summed = [0.0; NUM_CLASSES];
            for p in voters {
                votes[p[i].label.index()] += 1;
            }
            for (c, s) in summed.iter_mut().enumerate() {
                for (slot, p) in column.iter_mut().zip(voters) {
                    *slot = p[i].probs[c];
                }
                *s = canonical_sum(&mut column);
            }
            let mut best = 0;
            for c in 1..NUM_CLASSES {
                if (votes[c], summed[c]) > (votes[best], summed[best]) {
                    best = c;
                }
            }
            Prediction {
                id: first[i].id.clone(),
                probs: summed.map(|s| s / n),
                label: EmotionLabel::from_index(best).expect("class index"),
            }
        })
        .collect();
    Ok(merged)
}

/// Labels only; see [`majority_vote`].
pub fn vote_labels(voters: &[Vec<Prediction>]) -> Result<Vec<EmotionLabel>> {
    Ok(majority_vote(voters)?.into_iter().map(|p| p.label).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use EmotionLabel::*;

    fn pred(id: &str, label: EmotionLabel, probs: [f64; 4]) -> Prediction {
        Prediction {
            id: id.into(),
            probs,
            label,
        }
    }

    fn onehot(id: &str, label: EmotionLabel) -> Prediction {
        let mut p = [0.0; 4];
        p[label.index()] = 1.0;
        pred(id, label, p)
    }

    #[test]
    fn uniform_logits_pick_class_zero() {
        let p = Prediction::from_logits("x", &[0.0; 4]).unwrap();
        assert_eq!(p.probs, [0.25; 4]);
        assert_eq!(p.label, Others);
    }

    #[test]
    fn argmax_of_logits() {
        assert_eq!(
            Prediction::from_logits("x", &[1.0, 5.0, 2.0, 0.0]).unwrap().label,
            Happy
        );
    }

    #[test]
    fn strict_majority_wins() {
        let mut voters: Vec<Vec<Prediction>> = (0..5).map(|_| vec![onehot("a", Sad)]).collect();
        voters.extend((0..4).map(|_| vec![onehot("a", Happy)]));
        assert_eq!(vote_labels(&voters).unwrap(), [Sad]);
    }

    #[test]
    fn tie_goes_to_summed_probability() {
        let voters = vec![
            vec![pred("a", Happy, [0.0, 0.8, 0.2, 0.0])],
            vec![pred("a", Angry, [0.0, 0.5, 0.5, 0.0])],
        ];
        // happy 1.3 vs angry 0.7
        assert_eq!(vote_labels(&voters).unwrap(), [Happy]);
        let voters = vec![
            vec![pred("a", Happy, [0.0, 0.55, 0.45, 0.0])],
            vec![pred("a", Angry, [0.0, 0.45, 0.55, 0.0])],
        ];
        // equal sums fall through to the lower index
        assert_eq!(vote_labels(&voters).unwrap(), [Happy]);
    }

    #[test]
    fn single_voter_is_identity_on_labels() {
        let v = vec![onehot("a", Sad), onehot("b", Others), onehot("c", Angry)];
        assert_eq!(vote_labels(std::slice::from_ref(&v)).unwrap(), [Sad, Others, Angry]);
    }

    #[test]
    fn id_mismatch_names_the_id() {
        let a = vec![onehot("a", Sad), onehot("b", Sad)];
        let b = vec![onehot("a", Sad), onehot("z", Sad)];
        let err = majority_vote(&[a.clone(), b]).unwrap_err().to_string();
        assert!(err.contains("\"z\""), "{err}");
        assert!(majority_vote(&[a.clone(), a[..1].to_vec()]).is_err());
        assert!(majority_vote(&[]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let preds = vec![
            Prediction::from_logits("1", &[0.3, -1.0, 2.0, 0.1]).unwrap(),
            Prediction::from_logits("2", &[0.0; 4]).unwrap(),
        ];
        let text = format_predictions(&preds);
        assert!(text.starts_with(PREDICTION_HEADER));
        let back = parse_predictions(&text).unwrap();
        assert_eq!(format_predictions(&back), text);
        assert_eq!(back[0].label, Angry);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = format!("{PREDICTION_HEADER}\n1\t0.1\t0.2\t0.3\n");
        assert!(matches!(parse_predictions(&text), Err(Error::Parse { line: 2, .. })));
        let text = "1\t0.5\t0.5\t0.5\t0.5\thappy\n";
        assert!(matches!(parse_predictions(text), Err(Error::Parse { line: 1, .. })));
    }
}
