//! Three-turn conversation datasets: parsing, serialization, label statistics,
//! fold plans and a synthetic generator.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of emotion classes.
pub const NUM_CLASSES: usize = 4;

/// Emotion of the last turn. The discriminant is the canonical class index
/// used everywhere: probability columns, logits, tie-breaking.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Others = 0,
    Happy = 1,
    Angry = 2,
    Sad = 3,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; NUM_CLASSES] = [
        EmotionLabel::Others,
        EmotionLabel::Happy,
        EmotionLabel::Angry,
        EmotionLabel::Sad,
    ];

    /// The three classes the competition score is computed over.
    pub const EMOTIONS: [EmotionLabel; 3] = [EmotionLabel::Happy, EmotionLabel::Angry, EmotionLabel::Sad];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Others => "others",
            EmotionLabel::Happy => "happy",
            EmotionLabel::Angry => "angry",
            EmotionLabel::Sad => "sad",
        }
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_lowercase();
        Self::ALL
            .into_iter()
            .find(|l| l.name() == lower)
            .ok_or_else(|| Error::domain(format!("unknown label {s:?}")))
    }
}

/// One conversation: context turns `u1`, `u2` and the classified turn `u3`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conversation {
    id: String,
    turns: [String; 3],
    label: Option<EmotionLabel>,
}

impl Conversation {
    pub fn new(id: impl Into<String>, turns: [String; 3], label: Option<EmotionLabel>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() || id.contains(['\t', '\n', '\r']) {
            return Err(Error::domain(format!("invalid conversation id {id:?}")));
        }
        for (i, t) in turns.iter().enumerate() {
            if t.trim().is_empty() {
                return Err(Error::domain(format!("conversation {id}: turn {} is empty", i + 1)));
            }
            if t.contains(['\t', '\n', '\r']) {
                return Err(Error::domain(format!(
                    "conversation {id}: turn {} contains a tab or newline",
                    i + 1
                )));
            }
        }
        Ok(Conversation { id, turns, label })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn turns(&self) -> &[String; 3] {
        &self.turns
    }

    pub fn label(&self) -> Option<EmotionLabel> {
        self.label
    }

    pub fn with_label(mut self, label: Option<EmotionLabel>) -> Self {
        self.label = label;
        self
    }

    /// Same conversation with every turn replaced through `f`.
    pub fn map_turns(&self, mut f: impl FnMut(&str) -> String) -> Result<Self> {
        let turns = [f(&self.turns[0]), f(&self.turns[1]), f(&self.turns[2])];
        Conversation::new(self.id.clone(), turns, self.label)
    }
}

/// Fraction of examples per class, indexed canonically.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct LabelDist {
    fractions: [f64; NUM_CLASSES],
}

impl LabelDist {
    pub fn new(fractions: [f64; NUM_CLASSES]) -> Result<Self> {
        if fractions.iter().any(|f| !f.is_finite() || *f < 0.0 || *f > 1.0) {
            return Err(Error::domain(format!(
                "label fractions must lie in [0, 1]: {fractions:?}"
            )));
        }
        let total: f64 = fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!("label fractions sum to {total}, expected 1")));
        }
        Ok(LabelDist { fractions })
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(weights: [f64; NUM_CLASSES]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::domain(format!("invalid class weights {weights:?}")));
        }
        Self::new(weights.map(|w| w / total))
    }

    pub fn uniform() -> Self {
        LabelDist {
            fractions: [0.25; NUM_CLASSES],
        }
    }

    /// 5% for each emotion and 85% others: the test-time prior used for
    /// importance weighting.
    pub fn emotion_test_prior() -> Self {
        let mut fractions = [0.05; NUM_CLASSES];
        fractions[EmotionLabel::Others.index()] = 0.85;
        LabelDist { fractions }
    }

    pub fn fraction(&self, label: EmotionLabel) -> f64 {
        self.fractions[label.index()]
    }

    pub fn fractions(&self) -> &[f64; NUM_CLASSES] {
        &self.fractions
    }

    /// `happy=0.05,angry=0.05,sad=0.05,others=0.85` or `uniform`. Values are
    /// normalized, missing classes get zero.
    pub fn parse_spec(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("uniform") {
            return Ok(Self::uniform());
        }
        let mut weights = [0.0; NUM_CLASSES];
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let (name, value) = part
                .split_once('=')
                .ok_or_else(|| Error::domain(format!("expected class=value, got {part:?}")))?;
            let label: EmotionLabel = name.parse()?;
            weights[label.index()] = value
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::domain(format!("invalid fraction {value:?}")))?;
        }
        Self::from_weights(weights)
    }

    /// JSON object keyed by class name, in canonical order.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for l in EmotionLabel::ALL {
            map.insert(l.name().to_string(), self.fraction(l).into());
        }
        serde_json::Value::Object(map)
    }
}

/// Assignment of example indices to folds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    k: usize,
    assignment: Vec<usize>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Indices in fold `r`, ascending.
    pub fn held_out(&self, r: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == r)
            .collect()
    }

    /// Indices outside fold `r`, ascending.
    pub fn training(&self, r: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] != r)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }
}

fn looks_numeric(cell: &str) -> bool {
    !cell.is_empty() && cell.chars().all(|c| c.is_ascii_digit())
}

/// Parses tab-separated `id turn1 turn2 turn3 [label]` rows. A first row whose
/// id cell is not numeric is treated as a header. Blank lines are skipped.
pub fn parse_conversations(text: &str, has_labels: bool) -> Result<Vec<Conversation>> {
    let expected = if has_labels { 5 } else { 4 };
    let mut out = Vec::new();
    let mut first = true;
    for (i, raw) in text.split('\n').enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if first {
            first = false;
            if !looks_numeric(cols[0].trim()) {
                continue;
            }
        }
        if cols.len() != expected {
            return Err(Error::parse(
                line_no,
                format!("expected {expected} columns, found {}", cols.len()),
            ));
        }
        let label = if has_labels {
            Some(
                cols[4]
                    .parse::<EmotionLabel>()
                    .map_err(|_| Error::parse(line_no, format!("unknown label {:?}", cols[4])))?,
            )
        } else {
            None
        };
        let turns = [cols[1].to_string(), cols[2].to_string(), cols[3].to_string()];
        let conv = Conversation::new(cols[0].trim(), turns, label).map_err(|e| Error::parse(line_no, e.to_string()))?;
        out.push(conv);
    }
    Ok(out)
}

/// Writes conversations back in the competition layout, with a header row.
/// The label column is emitted only when every conversation is labeled.
pub fn serialize_conversations(convs: &[Conversation]) -> String {
    let labeled = !convs.is_empty() && convs.iter().all(|c| c.label.is_some());
    let mut out = String::from("id\tturn1\tturn2\tturn3");
    if labeled {
        out.push_str("\tlabel");
    }
    out.push('\n');
    for c in convs {
        out.push_str(&c.id);
        for t in &c.turns {
            out.push('\t');
            out.push_str(t);
        }
        if labeled {
            out.push('\t');
            out.push_str(c.label.expect("checked above").name());
        }
        out.push('\n');
    }
    out
}

pub fn label_counts(convs: &[Conversation]) -> Result<[usize; NUM_CLASSES]> {
    let mut counts = [0usize; NUM_CLASSES];
    for c in convs {
        let label = c
            .label
            .ok_or_else(|| Error::domain(format!("conversation {} has no label", c.id)))?;
        counts[label.index()] += 1;
    }
    Ok(counts)
}

pub fn label_distribution(convs: &[Conversation]) -> Result<LabelDist> {
    if convs.is_empty() {
        return Err(Error::domain("label distribution of an empty corpus"));
    }
    let counts = label_counts(convs)?;
    let n = convs.len() as f64;
    LabelDist::new(counts.map(|c| c as f64 / n))
}

/// Shuffles `0..n` with `seed` and deals the indices round-robin into `k` folds.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::domain(format!("fold count must be at least 2, got {k}")));
    }
    if k > n {
        return Err(Error::domain(format!("cannot split {n} examples into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n];
    for (pos, &idx) in order.iter().enumerate() {
        assignment[idx] = pos % k;
    }
    Ok(FoldPlan { k, assignment })
}

/// Parameters of a synthetic corpus.
///
/// Every class owns a disjoint block of u3 cue words and a disjoint block of
/// context cue words; the rest of the vocabulary is filler. With the default
/// `others_cue_rate` of zero the classes are linearly separable from the u3
/// cue alone. A positive `others_cue_rate` makes that fraction of the
/// `others` examples carry an emotion cue instead of their own, so those
/// examples are only distinguishable by their context, if at all.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub n: usize,
    pub label_dist: LabelDist,
    pub vocab_size: usize,
    pub seed: u64,
    /// Probability that u1 and u2 both carry a context cue of the label.
    pub context_cue_rate: f64,
    pub others_cue_rate: f64,
    /// With `false`, u1 and u2 hold one fixed neutral word (plus any context
    /// cue) and u3 holds only its cue. Examples then repeat exactly, so a
    /// model cannot memorize ambiguous ones and must learn their posterior.
    pub fillers: bool,
}

impl SyntheticSpec {
    pub fn new(n: usize, label_dist: LabelDist, vocab_size: usize, seed: u64) -> Self {
        SyntheticSpec {
            n,
            label_dist,
            vocab_size,
            seed,
            context_cue_rate: 0.8,
            others_cue_rate: 0.0,
            fillers: true,
        }
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Pronounceable pseudo-word for a vocabulary index; distinct indices give
/// distinct words and no word repeats a letter three times in a row.
pub fn synthetic_word(idx: usize) -> String {
    let syllables = CONSONANTS.len() * VOWELS.len();
    let syl = |s: usize, out: &mut String| {
        out.push(CONSONANTS[s / VOWELS.len()] as char);
        out.push(VOWELS[s % VOWELS.len()] as char);
    };
    let mut w = String::new();
    syl(idx % syllables, &mut w);
    let mut rest = idx / syllables;
    loop {
        syl(rest % syllables, &mut w);
        rest /= syllables;
        if rest == 0 {
            break;
        }
    }
    w
}

/// Vocabulary layout of a synthetic corpus.
#[derive(Clone, Debug)]
pub struct SyntheticVocab {
    per_class: usize,
    vocab_size: usize,
}

impl SyntheticVocab {
    pub fn new(vocab_size: usize) -> Result<Self> {
        if vocab_size < 8 * NUM_CLASSES {
            return Err(Error::domain(format!(
                "vocab_size {vocab_size} too small: need at least {} for cue words",
                8 * NUM_CLASSES
            )));
        }
        Ok(SyntheticVocab {
            per_class: vocab_size / (4 * NUM_CLASSES),
            vocab_size,
        })
    }

    pub fn u3_cues(&self, label: EmotionLabel) -> Vec<String> {
        let start = label.index() * self.per_class;
        (start..start + self.per_class).map(synthetic_word).collect()
    }

    pub fn context_cues(&self, label: EmotionLabel) -> Vec<String> {
        let start = (NUM_CLASSES + label.index()) * self.per_class;
        (start..start + self.per_class).map(synthetic_word).collect()
    }

    fn filler_range(&self) -> std::ops::Range<usize> {
        2 * NUM_CLASSES * self.per_class..self.vocab_size
    }

    fn u3_cue(&self, label: EmotionLabel, rng: &mut impl Rng) -> String {
        synthetic_word(label.index() * self.per_class + rng.random_range(0..self.per_class))
    }

    fn context_cue(&self, label: EmotionLabel, rng: &mut impl Rng) -> String {
        synthetic_word((NUM_CLASSES + label.index()) * self.per_class + rng.random_range(0..self.per_class))
    }

    fn neutral(&self) -> String {
        synthetic_word(self.filler_range().start)
    }

    fn filler(&self, rng: &mut impl Rng) -> String {
        synthetic_word(rng.random_range(self.filler_range()))
    }
}

/// Largest-remainder allocation of `n` items to the fractions of `dist`.
fn quota(n: usize, dist: &LabelDist) -> [usize; NUM_CLASSES] {
    let exact = dist.fractions().map(|f| f * n as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if dist.fractions()[c] > 0.0 {
            counts[c] += 1;
            left -= 1;
        }
    }
    counts
}

fn insert_random(words: &mut Vec<String>, word: String, rng: &mut impl Rng) {
    let pos = rng.random_range(0..=words.len());
    words.insert(pos, word);
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Conversation>> {
    if spec.n == 0 {
        return Err(Error::domain("synthetic corpus needs n >= 1"));
    }
    for (name, rate) in [
        ("context_cue_rate", spec.context_cue_rate),
        ("others_cue_rate", spec.others_cue_rate),
    ] {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::domain(format!("{name} must lie in [0, 1], got {rate}")));
        }
    }
    let vocab = SyntheticVocab::new(spec.vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let counts = quota(spec.n, &spec.label_dist);
    let mut labels: Vec<EmotionLabel> = EmotionLabel::ALL
        .iter()
        .flat_map(|&l| std::iter::repeat_n(l, counts[l.index()]))
        .collect();
    labels.shuffle(&mut rng);

    let mut out = Vec::with_capacity(spec.n);
    for (i, &label) in labels.iter().enumerate() {
        let fillers = |rng: &mut ChaCha8Rng, lo: usize, hi: usize, fixed: usize| -> Vec<String> {
            if !spec.fillers {
                return std::iter::repeat_n(vocab.neutral(), fixed).collect();
            }
            let len = rng.random_range(lo..=hi);
            (0..len).map(|_| vocab.filler(rng)).collect()
        };
        let mut u1 = fillers(&mut rng, 2, 4, 1);
        let mut u2 = fillers(&mut rng, 2, 4, 1);
        let mut u3 = fillers(&mut rng, 1, 3, 0);

        let mut cue_class = label;
        if label == EmotionLabel::Others && rng.random_bool(spec.others_cue_rate) {
            cue_class = EmotionLabel::EMOTIONS[rng.random_range(0..3)];
        }
        let cue = vocab.u3_cue(cue_class, &mut rng);
        insert_random(&mut u3, cue, &mut rng);

        if rng.random_bool(spec.context_cue_rate) {
            let c1 = vocab.context_cue(label, &mut rng);
            insert_random(&mut u1, c1, &mut rng);
            let c2 = vocab.context_cue(label, &mut rng);
            insert_random(&mut u2, c2, &mut rng);
        }

        let turns = [u1.join(" "), u2.join(" "), u3.join(" ")];
        out.push(Conversation::new(i.to_string(), turns, Some(label))?);
    }
    Ok(out)
}
