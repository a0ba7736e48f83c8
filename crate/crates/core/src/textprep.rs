//! Utterance normalization: emoji to words, volatile tokens to placeholders,
//! whitespace tokenization.

use std::collections::{HashMap, HashSet};
use std::sync::OnceLock;

use crate::corpus::Conversation;
use crate::error::{Error, Result};

pub const USER: &str = "<user>";
pub const URL: &str = "<url>";
pub const NUMBER: &str = "<number>";
pub const HASHTAG: &str = "<hashtag>";
pub const REPEAT: &str = "<repeat>";
pub const SMILE: &str = "<smile>";
pub const SAD_FACE: &str = "<sad_face>";

pub const PLACEHOLDERS: [&str; 7] = [USER, URL, NUMBER, HASHTAG, REPEAT, SMILE, SAD_FACE];

/// Joins turns when a model reads the conversation as one sequence.
pub const SEP: &str = "<sep>";
/// Stands in for a turn that normalizes to nothing.
pub const EMPTY: &str = "<empty>";

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Word,
    Placeholder,
    EmojiWord,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Token {
    surface: String,
    kind: TokenKind,
}

impl Token {
    /// Panics on an empty surface or one containing whitespace.
    pub fn new(surface: impl Into<String>, kind: TokenKind) -> Self {
        let surface = surface.into();
        assert!(
            !surface.is_empty() && !surface.chars().any(char::is_whitespace),
            "invalid token surface {surface:?}"
        );
        Token { surface, kind }
    }

    pub fn word(surface: impl Into<String>) -> Self {
        Token::new(surface, TokenKind::Word)
    }

    pub fn surface(&self) -> &str {
        &self.surface
    }

    pub fn kind(&self) -> TokenKind {
        self.kind
    }
}

pub fn join_tokens(tokens: &[Token]) -> String {
    tokens.iter().map(Token::surface).collect::<Vec<_>>().join(" ")
}

/// Map from emoji codepoint sequences to `:word_word:` aliases.
#[derive(Clone, Debug, Default)]
pub struct EmojiAliasTable {
    aliases: HashMap<String, String>,
    longest_key: usize,
}

fn valid_alias(alias: &str) -> bool {
    alias.len() > 2
        && alias.starts_with(':')
        && alias.ends_with(':')
        && alias[1..alias.len() - 1]
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

impl EmojiAliasTable {
    /// Parses `<emoji><TAB><alias>` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table = EmojiAliasTable::default();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (emoji, alias) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(i + 1, "expected <emoji><TAB><alias>"))?;
            if emoji.is_empty() || !valid_alias(alias) {
                return Err(Error::parse(i + 1, format!("malformed alias {alias:?}")));
            }
            if !seen.insert(alias.to_string()) {
                return Err(Error::parse(i + 1, format!("duplicate alias {alias}")));
            }
            if table.aliases.insert(emoji.to_string(), alias.to_string()).is_some() {
                return Err(Error::parse(i + 1, format!("duplicate emoji {emoji}")));
            }
            table.longest_key = table.longest_key.max(emoji.chars().count());
        }
        Ok(table)
    }

    /// The table shipped with the crate.
    pub fn bundled() -> &'static EmojiAliasTable {
        static TABLE: OnceLock<EmojiAliasTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            EmojiAliasTable::parse(include_str!("../resources/emoji_aliases.tsv"))
                .expect("bundled emoji table is well formed")
        })
    }

    pub fn len(&self) -> usize {
        self.aliases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aliases.is_empty()
    }

    pub fn alias(&self, emoji: &str) -> Option<&str> {
        self.aliases.get(emoji).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.aliases.iter().map(|(e, a)| (e.as_str(), a.as_str()))
    }

    /// Longest entry matching at the start of `s`: (byte length, alias).
    fn match_prefix(&self, s: &str) -> Option<(usize, &str)> {
        let ends: Vec<usize> = s
            .char_indices()
            .map(|(i, c)| i + c.len_utf8())
            .take(self.longest_key)
            .collect();
        ends.iter()
            .rev()
            .find_map(|&end| self.aliases.get(&s[..end]).map(|a| (end, a.as_str())))
    }
}

/// Codepoints that only modify a neighbouring emoji.
fn is_emoji_modifier(c: char) -> bool {
    matches!(c as u32, 0xFE0E | 0xFE0F | 0x200D | 0x20E3 | 0x1F3FB..=0x1F3FF)
}

fn is_emoji(c: char) -> bool {
    matches!(
        c as u32,
        0x1F000..=0x1FAFF | 0x2600..=0x27BF | 0x2300..=0x23FF | 0x2B00..=0x2BFF
    )
}

enum Segment<'a> {
    Text(&'a str),
    Alias(&'a str),
}

/// Splits `text` into plain runs and matched emoji aliases; unknown emoji and
/// stray modifiers are dropped. Returns the number of unknown emoji dropped.
fn segment<'a>(text: &'a str, table: &'a EmojiAliasTable) -> (Vec<Segment<'a>>, usize) {
    let mut segments = Vec::new();
    let mut unknown = 0;
    let mut plain_start = 0;
    let mut pos = 0;
    while pos < text.len() {
        let rest = &text[pos..];
        let c = rest.chars().next().expect("pos is on a char boundary");
        let matched = table.match_prefix(rest);
        if matched.is_none() && !is_emoji(c) && !is_emoji_modifier(c) {
            pos += c.len_utf8();
            continue;
        }
        if plain_start < pos {
            segments.push(Segment::Text(&text[plain_start..pos]));
        }
        match matched {
            Some((len, alias)) => {
                segments.push(Segment::Alias(alias));
                pos += len;
            }
            None => {
                if is_emoji(c) {
                    unknown += 1;
                }
                pos += c.len_utf8();
            }
        }
        plain_start = pos;
    }
    if plain_start < text.len() {
        segments.push(Segment::Text(&text[plain_start..]));
    }
    (segments, unknown)
}

fn alias_words(alias: &str) -> String {
    alias.replace([':', '_'], " ")
}

/// Replaces every known emoji by its alias with `:` and `_` turned into
/// spaces; also returns how many unknown emoji were dropped.
pub fn demojize_with_report(text: &str, table: &EmojiAliasTable) -> (String, usize) {
    let (segments, unknown) = segment(text, table);
    let mut out = String::with_capacity(text.len());
    for s in segments {
        match s {
            Segment::Text(t) => out.push_str(t),
            Segment::Alias(a) => out.push_str(&alias_words(a)),
        }
    }
    (out, unknown)
}

pub fn demojize(text: &str, table: &EmojiAliasTable) -> String {
    demojize_with_report(text, table).0
}

fn is_smile(p: &str) -> bool {
    let body = p.strip_prefix(':').map(|r| r.strip_prefix('-').unwrap_or(r));
    match body {
        Some(b) if !b.is_empty() => b.chars().all(|c| c == ')') || b.chars().all(|c| c == 'd'),
        _ => false,
    }
}

fn is_sad_face(p: &str) -> bool {
    let body = p.strip_prefix(':').map(|r| r.strip_prefix('-').unwrap_or(r));
    matches!(body, Some(b) if !b.is_empty() && b.chars().all(|c| c == '('))
}

fn is_numeral(p: &str) -> bool {
    p.starts_with(|c: char| c.is_ascii_digit()) && p.chars().all(|c| c.is_ascii_digit() || c == '.' || c == ',')
}

fn is_url(p: &str) -> bool {
    p.starts_with("http://") || p.starts_with("https://") || p.starts_with("www.")
}

/// Collapses runs of three or more identical characters to two.
fn collapse_elongation(p: &str) -> (String, bool) {
    let mut out = String::with_capacity(p.len());
    let mut collapsed = false;
    let mut prev = None;
    let mut run = 0;
    for c in p.chars() {
        if Some(c) == prev {
            run += 1;
        } else {
            prev = Some(c);
            run = 1;
        }
        if run <= 2 {
            out.push(c);
        } else {
            collapsed = true;
        }
    }
    (out, collapsed)
}

/// Normalizes one lowercased whitespace-free piece into `out`.
fn normalize_piece(p: &str, out: &mut Vec<Token>) {
    let placeholder = |s: &str| Token::new(s, TokenKind::Placeholder);
    if let Some(&ph) = PLACEHOLDERS.iter().find(|&&ph| ph == p) {
        out.push(placeholder(ph));
    } else if is_url(p) {
        out.push(placeholder(URL));
    } else if p.len() > 1 && p.starts_with('@') {
        out.push(placeholder(USER));
    } else if is_smile(p) {
        out.push(placeholder(SMILE));
    } else if is_sad_face(p) {
        out.push(placeholder(SAD_FACE));
    } else if p.len() > 1 && p.starts_with('#') {
        out.push(placeholder(HASHTAG));
        normalize_piece(&p[1..], out);
    } else if is_numeral(p) {
        out.push(placeholder(NUMBER));
    } else {
        let (word, collapsed) = collapse_elongation(p);
        out.push(Token::word(word));
        if collapsed {
            out.push(placeholder(REPEAT));
        }
    }
}

/// Tokenizes already-demojized text: lowercase, placeholders for users, URLs,
/// numbers, hashtags and emoticons, elongation collapsed with a `<repeat>`
/// marker.
pub fn normalize_utterance(text: &str) -> Vec<Token> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    for piece in lower.split_whitespace() {
        normalize_piece(piece, &mut out);
    }
    out
}

/// A raw utterance after demojizing and normalization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreparedUtterance {
    pub tokens: Vec<Token>,
    pub unknown_emoji: usize,
}

/// Full pipeline for a raw utterance. Words that came from an emoji alias
/// are tagged [`TokenKind::EmojiWord`]; the surfaces equal
/// `normalize_utterance(&demojize(text, table))`.
pub fn prepare_utterance(text: &str, table: &EmojiAliasTable) -> PreparedUtterance {
    let (segments, unknown_emoji) = segment(text, table);
    let mut tokens = Vec::new();
    for s in segments {
        match s {
            Segment::Text(t) => tokens.extend(normalize_utterance(t)),
            Segment::Alias(a) => tokens.extend(normalize_utterance(&alias_words(a)).into_iter().map(|t| {
                if t.kind == TokenKind::Word {
                    Token::new(t.surface, TokenKind::EmojiWord)
                } else {
                    t
                }
            })),
        }
    }
    PreparedUtterance { tokens, unknown_emoji }
}

/// Tokens of the three turns of a conversation; empty turns become `<empty>`.
pub fn prepare_conversation(conv: &Conversation, table: &EmojiAliasTable) -> [Vec<Token>; 3] {
    conv.turns().clone().map(|t| {
        let mut tokens = prepare_utterance(&t, table).tokens;
        if tokens.is_empty() {
            tokens.push(Token::word(EMPTY));
        }
        tokens
    })
}

/// Preprocesses every turn in place, keeping ids and labels. Returns the
/// rewritten conversations and the total count of unknown emoji dropped.
pub fn preprocess_corpus(convs: &[Conversation], table: &EmojiAliasTable) -> Result<(Vec<Conversation>, usize)> {
    let mut unknown = 0;
    let mut out = Vec::with_capacity(convs.len());
    for c in convs {
        out.push(c.map_turns(|t| {
            let prepared = prepare_utterance(t, table);
            unknown += prepared.unknown_emoji;
            if prepared.tokens.is_empty() {
                EMPTY.to_string()
            } else {
                join_tokens(&prepared.tokens)
            }
        })?);
    }
    Ok((out, unknown))
}
