//! The three conversation classifiers.
//!
//! - **SL** joins the turns into one token sequence, runs the encoder BiLSTM
//!   over it and pools the states with self-attention.
//! - **SLD** is SL with the sentence-affect vector of the joined sequence
//!   appended before the output layer.
//! - **HRLCE** encodes each turn on its own (final BiLSTM state plus affect
//!   vector), runs a context BiLSTM over the three turn vectors and pools the
//!   context states with self-attention.
//!
//! Per-token input features come from a frozen word table and the toy
//! contextual encoder, so they never change during training.
//! [`Model::featurize`] computes them once; the forward and backward passes
//! take the cached [`Features`].

mod checkpoint;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION, MAGIC};

use crate::corpus::{Conversation, NUM_CLASSES};
use crate::embed::{
    embed_tokens, ContextualEncoder, OovPolicy, SentenceAffectEncoder, ToyAffect, ToyContextual, WordTable,
};
use crate::error::{Error, Result};
use crate::neural::{Affine, AttentionRun, BiLstm, BiLstmRun, Params, SelfAttention, Tensor};
use crate::textprep::{prepare_conversation, EmojiAliasTable, Token, TokenKind, EMPTY, SEP};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Sl,
    Sld,
    Hrlce,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Sl, ModelKind::Sld, ModelKind::Hrlce];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Sl => "sl",
            ModelKind::Sld => "sld",
            ModelKind::Hrlce => "hrlce",
        }
    }

    pub fn uses_affect(self) -> bool {
        !matches!(self, ModelKind::Sl)
    }

    pub fn is_hierarchical(self) -> bool {
        matches!(self, ModelKind::Hrlce)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::domain(format!("unknown model kind {s:?} (sl, sld, hrlce)")))
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Small widths that train in seconds on one CPU.
    Desk,
    /// Published widths.
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::domain(format!("unknown profile {s:?} (desk, paper)"))),
        }
    }
}

/// Layer widths and the fixed input pipeline of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub profile: Profile,
    /// word-vector width
    pub d_g: usize,
    /// contextual-encoder width
    pub d_e: usize,
    /// sentence-affect width
    pub d_d: usize,
    /// utterance encoder hidden units per direction
    pub enc_hidden: usize,
    /// context encoder hidden units per direction
    pub ctx_hidden: usize,
    pub layers: usize,
    pub classes: usize,
    /// hashed rows shared by tokens outside the affect vocabulary
    pub affect_buckets: usize,
    pub affect_trainable: bool,
    pub oov: OovPolicy,
    pub contextual_seed: u64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            profile: Profile::Desk,
            d_g: 25,
            d_e: 32,
            d_d: 64,
            enc_hidden: 32,
            ctx_hidden: 16,
            layers: 2,
            classes: NUM_CLASSES,
            affect_buckets: 64,
            affect_trainable: true,
            oov: OovPolicy::HashRandom { seed: 17 },
            contextual_seed: 29,
        }
    }

    /// Published hidden sizes. The embedding widths are the conventional
    /// ones for 300-d word vectors, ELMo and DeepMoji.
    pub fn paper() -> Self {
        ModelConfig {
            profile: Profile::Paper,
            d_g: 300,
            d_e: 1024,
            d_d: 2304,
            enc_hidden: 1500,
            ctx_hidden: 800,
            ..ModelConfig::desk()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => ModelConfig::desk(),
            Profile::Paper => ModelConfig::paper(),
        }
    }

    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        if self.classes != NUM_CLASSES {
            return Err(Error::domain(format!(
                "models predict {NUM_CLASSES} classes, config asks for {}",
                self.classes
            )));
        }
        if self.d_g + self.d_e == 0 {
            return Err(Error::domain("token features are empty (d_g + d_e = 0)"));
        }
        if self.enc_hidden == 0 || self.layers == 0 {
            return Err(Error::domain("encoder needs at least one layer and one hidden unit"));
        }
        if kind.uses_affect() && self.d_d == 0 {
            return Err(Error::domain(format!("{kind} needs a positive affect width d_d")));
        }
        if kind.is_hierarchical() && self.ctx_hidden == 0 {
            return Err(Error::domain("hrlce needs a positive context width"));
        }
        Ok(())
    }

    /// Width of one per-token input feature.
    pub fn token_dim(&self) -> usize {
        self.d_g + self.d_e
    }

    /// Width of the vector fed to the output layer.
    pub fn head_dim(&self, kind: ModelKind) -> usize {
        match kind {
            ModelKind::Sl => 2 * self.enc_hidden,
            ModelKind::Sld => 2 * self.enc_hidden + self.d_d,
            ModelKind::Hrlce => 2 * self.ctx_hidden,
        }
    }
}

/// Cached input of one token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    /// `steps x token_dim`
    pub x: Vec<f64>,
    pub steps: usize,
    pub tokens: Vec<Token>,
}

/// Everything a model reads from one conversation.
///
/// Flat models hold one segment (the joined turns); HRLCE holds three.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub segments: Vec<Segment>,
}

/// Per-utterance vectors of the hierarchical model.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceEncoding {
    /// final encoder state, `2 * enc_hidden`
    pub pooled: Vec<f64>,
    /// `d_d`
    pub affect: Vec<f64>,
}

/// Forward intermediates kept for [`Model::backward`].
#[derive(Clone, Debug)]
pub struct Trace {
    pub logits: Vec<f64>,
    encoders: Vec<BiLstmRun>,
    context: Option<BiLstmRun>,
    attention: AttentionRun,
    head_in: Vec<f64>,
}

impl Trace {
    pub fn attention(&self) -> &AttentionRun {
        &self.attention
    }

    pub fn context(&self) -> Option<&BiLstmRun> {
        self.context.as_ref()
    }
}

/// One of SL, SLD or HRLCE with its parameters.
///
/// The components are public so that tests and tools can inspect or
/// transplant weights; replacing one with a differently shaped layer makes
/// later passes fail with shape errors.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    kind: ModelKind,
    config: ModelConfig,
    words: WordTable,
    contextual: ToyContextual,
    pub encoder: BiLstm,
    pub affect: Option<ToyAffect>,
    pub context: Option<BiLstm>,
    pub attention: SelfAttention,
    pub output: Affine,
}

impl Model {
    /// Initializes all parameters from `seed`. An empty `words` table is
    /// widened to `d_g` so that every token takes the OOV path.
    pub fn new(
        kind: ModelKind,
        config: ModelConfig,
        words: WordTable,
        affect_vocab: Vec<String>,
        seed: u64,
    ) -> Result<Model> {
        config.validate(kind)?;
        let words = if words.is_empty() {
            WordTable::empty(config.d_g)
        } else if words.dim() != config.d_g {
            return Err(Error::domain(format!(
                "word vectors have width {}, config d_g is {}",
                words.dim(),
                config.d_g
            )));
        } else {
            words
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h_e = config.enc_hidden;
        let encoder = BiLstm::new(config.token_dim(), h_e, config.layers, &mut rng);
        let affect = if kind.uses_affect() {
            Some(ToyAffect::new(
                affect_vocab,
                config.affect_buckets,
                config.d_d,
                config.affect_trainable,
                &mut rng,
            )?)
        } else {
            None
        };
        let context = kind
            .is_hierarchical()
            .then(|| BiLstm::new(2 * h_e + config.d_d, config.ctx_hidden, config.layers, &mut rng));
        let att_dim = if kind.is_hierarchical() {
            2 * config.ctx_hidden
        } else {
            2 * h_e
        };
        let attention = SelfAttention::new(att_dim, &mut rng);
        let output = Affine::new(config.head_dim(kind), config.classes, &mut rng);
        let contextual = ToyContextual {
            dim: config.d_e,
            seed: config.contextual_seed,
        };
        Ok(Model {
            kind,
            config,
            words,
            contextual,
            encoder,
            affect,
            context,
            attention,
            output,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn words(&self) -> &WordTable {
        &self.words
    }

    pub(crate) fn set_words(&mut self, words: WordTable) {
        self.words = words;
    }

    fn segment(&self, tokens: &[Token]) -> Segment {
        let tokens: Vec<Token> = if tokens.is_empty() {
            vec![Token::new(EMPTY, TokenKind::Placeholder)]
        } else {
            tokens.to_vec()
        };
        let glove = embed_tokens(&self.words, &tokens, self.config.oov);
        let ctx = self.contextual.encode(&tokens);
        let mut x = Vec::with_capacity(tokens.len() * self.config.token_dim());
        for (g, e) in glove.iter().zip(&ctx) {
            x.extend_from_slice(g);
            x.extend_from_slice(e);
        }
        Segment {
            x,
            steps: tokens.len(),
            tokens,
        }
    }

    /// Input features of three normalized turns.
    pub fn featurize(&self, turns: &[Vec<Token>; 3]) -> Features {
        if self.kind.is_hierarchical() {
            Features {
                segments: turns.iter().map(|t| self.segment(t)).collect(),
            }
        } else {
            let sep = Token::new(SEP, TokenKind::Placeholder);
            let mut joined = Vec::new();
            for (i, turn) in turns.iter().enumerate() {
                if i > 0 {
                    joined.push(sep.clone());
                }
                if turn.is_empty() {
                    joined.push(Token::new(EMPTY, TokenKind::Placeholder));
                } else {
                    joined.extend_from_slice(turn);
                }
            }
            Features {
                segments: vec![self.segment(&joined)],
            }
        }
    }

    /// Normalizes a raw conversation and featurizes it.
    pub fn featurize_conversation(&self, conv: &Conversation, emoji: &EmojiAliasTable) -> Features {
        self.featurize(&prepare_conversation(conv, emoji))
    }

    fn affect_vector(&self, tokens: &[Token]) -> Vec<f64> {
        match &self.affect {
            Some(a) => a.encode(tokens),
            None => Vec::new(),
        }
    }

    /// Pooled and affect vectors of one utterance; an empty utterance is
    /// read as the single token `<empty>`.
    pub fn encode_utterance(&self, tokens: &[Token]) -> Result<UtteranceEncoding> {
        let seg = self.segment(tokens);
        let run = self.encoder.forward(&seg.x, seg.steps)?;
        Ok(UtteranceEncoding {
            pooled: run.final_state,
            affect: self.affect_vector(&seg.tokens),
        })
    }

    fn expected_segments(&self) -> usize {
        if self.kind.is_hierarchical() {
            3
        } else {
            1
        }
    }

    pub fn forward(&self, features: &Features) -> Result<Trace> {
        if features.segments.len() != self.expected_segments() {
            return Err(Error::domain(format!(
                "{} expects {} segments, features have {}",
                self.kind,
                self.expected_segments(),
                features.segments.len()
            )));
        }
        let mut encoders = Vec::with_capacity(features.segments.len());
        let (context, attention, head_in) = if let Some(ctx_net) = &self.context {
            let mut ctx_in = Vec::new();
            for seg in &features.segments {
                let run = self.encoder.forward(&seg.x, seg.steps)?;
                ctx_in.extend_from_slice(&run.final_state);
                ctx_in.extend(self.affect_vector(&seg.tokens));
                encoders.push(run);
            }
            let steps = features.segments.len();
            let ctx = ctx_net.forward(&ctx_in, steps)?;
            let att = self.attention.forward(&ctx.states, steps)?;
            let head_in = att.output.clone();
            (Some(ctx), att, head_in)
        } else {
            let seg = &features.segments[0];
            let run = self.encoder.forward(&seg.x, seg.steps)?;
            let att = self.attention.forward(&run.states, seg.steps)?;
            let mut head_in = att.output.clone();
            head_in.extend(self.affect_vector(&seg.tokens));
            encoders.push(run);
            (None, att, head_in)
        };
        let logits = self.output.forward(&head_in, 1)?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain(format!("{} produced non-finite logits", self.kind)));
        }
        Ok(Trace {
            logits,
            encoders,
            context,
            attention,
            head_in,
        })
    }

    pub fn logits(&self, features: &Features) -> Result<Vec<f64>> {
        Ok(self.forward(features)?.logits)
    }

    /// Accumulates parameter gradients given `dL/dlogits` for the trace
    /// produced by `forward(features)`.
    pub fn backward(&mut self, features: &Features, trace: &Trace, d_logits: &[f64]) {
        let d_head = self.output.backward(&trace.head_in, 1, d_logits);
        let h_e = self.encoder.output_dim();
        match &mut self.context {
            Some(ctx_net) => {
                let d_ctx_states = self.attention.backward(&trace.attention, &d_head);
                let ctx = trace.context.as_ref().expect("hierarchical trace has a context run");
                let d_ctx_in = ctx_net.backward(ctx, &d_ctx_states, &vec![0.0; ctx_net.output_dim()]);
                let width = ctx_net.d_in();
                for ((seg, run), row) in features
                    .segments
                    .iter()
                    .zip(&trace.encoders)
                    .zip(d_ctx_in.chunks_exact(width))
                {
                    self.encoder.backward(run, &vec![0.0; seg.steps * h_e], &row[..h_e]);
                    if let Some(a) = &mut self.affect {
                        a.backward(&seg.tokens, &row[h_e..]);
                    }
                }
            }
            None => {
                let w = self.attention.dim();
                if let Some(a) = &mut self.affect {
                    a.backward(&features.segments[0].tokens, &d_head[w..]);
                }
                let d_states = self.attention.backward(&trace.attention, &d_head[..w]);
                self.encoder.backward(&trace.encoders[0], &d_states, &vec![0.0; h_e]);
            }
        }
    }

    /// Visits every stored tensor: trainable parameters first, then a
    /// frozen affect table if there is one.
    pub(crate) fn visit_stored_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.visit_mut("", f);
        if let Some(a) = &mut self.affect {
            if !a.trainable() {
                f("affect.table", &mut a.table);
            }
        }
    }
}

impl Params for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        use crate::neural::tensor::join_name;
        self.encoder.visit(&join_name(prefix, "encoder"), f);
        if let Some(a) = &self.affect {
            a.visit(&join_name(prefix, "affect"), f);
        }
        if let Some(c) = &self.context {
            c.visit(&join_name(prefix, "context"), f);
        }
        self.attention.visit(&join_name(prefix, "attention"), f);
        self.output.visit(&join_name(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        use crate::neural::tensor::join_name;
        self.encoder.visit_mut(&join_name(prefix, "encoder"), f);
        if let Some(a) = &mut self.affect {
            a.visit_mut(&join_name(prefix, "affect"), f);
        }
        if let Some(c) = &mut self.context {
            c.visit_mut(&join_name(prefix, "context"), f);
        }
        self.attention.visit_mut(&join_name(prefix, "attention"), f);
        self.output.visit_mut(&join_name(prefix, "output"), f);
    }
}

/// Token surfaces seen at least `min_count` times, most frequent first
/// (ties alphabetical). Placeholders and reserved tokens are included.
pub fn affect_vocabulary<'a>(sequences: impl IntoIterator<Item = &'a [Token]>, min_count: usize) -> Vec<String> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for seq in sequences {
        for t in seq {
            *counts.entry(t.surface()).or_default() += 1;
        }
    }
    let mut words: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count.max(1)).collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    words.into_iter().map(|(w, _)| w.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textprep::normalize_utterance;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_g: 3,
            d_e: 2,
            d_d: 4,
            enc_hidden: 3,
            ctx_hidden: 2,
            affect_buckets: 4,
            ..ModelConfig::desk()
        }
    }

    fn turns(a: &str, b: &str, c: &str) -> [Vec<Token>; 3] {
        [normalize_utterance(a), normalize_utterance(b), normalize_utterance(c)]
    }

    fn model(kind: ModelKind) -> Model {
        Model::new(kind, tiny(), WordTable::empty(0), vec!["nice".into()], 5).unwrap()
    }

    #[test]
    fn desk_widths() {
        let m = Model::new(ModelKind::Hrlce, ModelConfig::desk(), WordTable::empty(0), vec![], 0).unwrap();
        let enc = m.encode_utterance(&normalize_utterance("so happy today")).unwrap();
        assert_eq!(enc.pooled.len(), 64);
        assert_eq!(enc.affect.len(), 64);
    }

    #[test]
    fn paper_profile_pins_hidden_sizes() {
        let p = ModelConfig::paper();
        assert_eq!((p.enc_hidden, p.ctx_hidden, p.layers), (1500, 800, 2));
    }

    #[test]
    fn logits_have_four_entries_for_every_kind() {
        for kind in ModelKind::ALL {
            let m = model(kind);
            let f = m.featurize(&turns("hi", "", "i am sad"));
            assert_eq!(m.logits(&f).unwrap().len(), 4);
        }
    }

    #[test]
    fn flat_models_join_turns_with_separators() {
        let m = model(ModelKind::Sl);
        let f = m.featurize(&turns("a b", "", "c"));
        let surfaces: Vec<&str> = f.segments[0].tokens.iter().map(|t| t.surface()).collect();
        assert_eq!(surfaces, ["a", "b", SEP, EMPTY, SEP, "c"]);
    }

    #[test]
    fn hierarchical_model_keeps_three_segments() {
        let m = model(ModelKind::Hrlce);
        let f = m.featurize(&turns("a", "b c", ""));
        assert_eq!(f.segments.len(), 3);
        assert_eq!(f.segments[2].tokens[0].surface(), EMPTY);
        let tr = m.forward(&f).unwrap();
        assert_eq!(tr.context().unwrap().steps(), 3);
        assert_eq!(tr.attention().steps(), 3);
    }

    #[test]
    fn wrong_segment_count_is_rejected() {
        let flat = model(ModelKind::Sl);
        let hier = model(ModelKind::Hrlce);
        let f = flat.featurize(&turns("a", "b", "c"));
        assert!(hier.forward(&f).is_err());
    }

    #[test]
    fn identical_utterances_encode_identically() {
        let m = model(ModelKind::Sld);
        let u = normalize_utterance("why would you do that");
        assert_eq!(m.encode_utterance(&u).unwrap(), m.encode_utterance(&u).unwrap());
    }

    #[test]
    fn head_widths() {
        let c = tiny();
        assert_eq!(model(ModelKind::Sl).output.d_in(), c.head_dim(ModelKind::Sl));
        assert_eq!(model(ModelKind::Sld).output.d_in(), 2 * c.enc_hidden + c.d_d);
        assert_eq!(model(ModelKind::Hrlce).output.d_in(), 2 * c.ctx_hidden);
    }

    #[test]
    fn word_table_width_must_match() {
        let t = WordTable::from_parts(vec!["x".into()], 2, vec![1.0, 2.0]).unwrap();
        assert!(Model::new(ModelKind::Sl, tiny(), t, vec![], 0).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.classes = 3;
        assert!(c.validate(ModelKind::Sl).is_err());
        let mut c = tiny();
        c.d_d = 0;
        assert!(c.validate(ModelKind::Sl).is_ok());
        assert!(c.validate(ModelKind::Sld).is_err());
    }

    #[test]
    fn kind_and_profile_parse() {
        assert_eq!("HRLCE".parse::<ModelKind>().unwrap(), ModelKind::Hrlce);
        assert!("bert".parse::<ModelKind>().is_err());
        assert_eq!("paper".parse::<Profile>().unwrap(), Profile::Paper);
    }

    #[test]
    fn affect_vocabulary_is_frequency_ordered() {
        let a = normalize_utterance("b a b c");
        let b = normalize_utterance("a b");
        let v = affect_vocabulary([a.as_slice(), b.as_slice()], 2);
        assert_eq!(v, ["b", "a"]);
    }
}
