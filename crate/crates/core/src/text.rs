//! Text side: vocabulary induction, word-piece tokenization and the
//! transformer text encoder.
//!
//! The vocabulary floor guarantees totality over ASCII: besides the five
//! specials it always contains every ASCII character both as a word-start
//! piece and as a `##` continuation piece, so greedy matching can always
//! fall back to single characters. `[UNK]` is reserved for non-ASCII code
//! points.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Tape, VarId};
use crate::config::TextTowerConfig;
use crate::error::{EssenError, Result};
use crate::layers::{BlockParams, INIT_STD};
use crate::params::{ParamId, ParamStore, StoreBinding};
use crate::tensor::{Scalar, Tensor};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const MASK_ID: usize = 4;

pub const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Specials + ASCII floor (128 word-start chars + 128 continuation chars).
pub const BASE_VOCAB_LEN: usize = 5 + 128 + 128;

/// Smallest vocabulary `build_vocab` accepts: the floor plus headroom.
pub const MIN_VOCAB_SIZE: usize = 300;

const WORD_FREQ_THRESHOLD: usize = 2;

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// The fixed floor every induced vocabulary starts from.
    pub fn base() -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for c in 0u8..128 {
            tokens.push((c as char).to_string());
        }
        for c in 0u8..128 {
            tokens.push(format!("##{}", c as char));
        }
        Self::from_tokens(tokens).expect("base vocabulary is valid")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i).is_some() {
                return Err(EssenError::Tokenizer(format!("duplicate token `{tok}`")));
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(EssenError::Tokenizer(format!(
                    "special {s} must occupy id {i}"
                )));
            }
        }
        for c in 0x20u8..0x7f {
            if !index.contains_key(&(c as char).to_string()) {
                return Err(EssenError::Tokenizer(format!(
                    "printable ASCII {:?} missing from vocabulary",
                    c as char
                )));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Ids eligible as random replacement tokens during masking.
    pub fn non_special_range(&self) -> std::ops::Range<usize> {
        SPECIALS.len()..self.tokens.len()
    }

    /// One token per line, line number = id. Tokens containing backslash,
    /// newline or other control characters are backslash-escaped so the
    /// line structure survives.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(&escape_token(tok));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut tokens = Vec::new();
        for line in text.split('\n') {
            if line.is_empty() && tokens.len() >= SPECIALS.len() {
                continue; // trailing newline
            }
            tokens.push(unescape_token(line)?);
        }
        Self::from_tokens(tokens)
    }
}

fn escape_token(tok: &str) -> String {
    let mut out = String::with_capacity(tok.len());
    for c in tok.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c if (c as u32) < 0x20 || c as u32 == 0x7f => {
                out.push_str(&format!("\\x{:02x}", c as u32));
            }
            c => out.push(c),
        }
    }
    out
}

fn unescape_token(line: &str) -> Result<String> {
    let mut out = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('x') => {
                let hi = chars.next();
                let lo = chars.next();
                let (Some(hi), Some(lo)) = (hi, lo) else {
                    return Err(EssenError::Tokenizer("truncated \\x escape".into()));
                };
                let code = u32::from_str_radix(&format!("{hi}{lo}"), 16)
                    .map_err(|_| EssenError::Tokenizer("bad \\x escape".into()))?;
                out.push(char::from_u32(code).unwrap_or('\u{FFFD}'));
            }
            other => {
                return Err(EssenError::Tokenizer(format!(
                    "bad escape \\{}",
                    other.map(String::from).unwrap_or_default()
                )));
            }
        }
    }
    Ok(out)
}

/// Lowercase and split on whitespace; each ASCII punctuation character
/// becomes its own word.
pub fn basic_tokens(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for c in text.to_lowercase().chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if c.is_ascii_punctuation() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(c.to_string());
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Greedy frequency-based word-piece induction over a line corpus.
/// Whole words above the frequency threshold come first, then `##` suffix
/// pieces; any shortfall is padded with `[unusedN]` placeholders so the
/// result has exactly `size` entries.
pub fn build_vocab<I, S>(corpus: I, size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if size < MIN_VOCAB_SIZE {
        return Err(EssenError::Tokenizer(format!(
            "vocab size {size} below minimum {MIN_VOCAB_SIZE}"
        )));
    }
    let mut word_counts: HashMap<String, (usize, usize)> = HashMap::new(); // word -> (count, first_idx)
    let mut order = 0usize;
    let mut saw_line = false;
    for line in corpus {
        saw_line = true;
        for word in basic_tokens(line.as_ref()) {
            let entry = word_counts.entry(word).or_insert((0, order));
            entry.0 += 1;
            order += 1;
        }
    }
    if !saw_line || word_counts.is_empty() {
        return Err(EssenError::Tokenizer("corpus is empty".into()));
    }

    let base = Vocabulary::base();
    let mut tokens = base.tokens.clone();
    let mut seen: HashMap<String, ()> = tokens.iter().map(|t| (t.clone(), ())).collect();
    let mut push_new = |tokens: &mut Vec<String>, tok: String| {
        if tokens.len() < size && !seen.contains_key(&tok) {
            seen.insert(tok.clone(), ());
            tokens.push(tok);
        }
    };

    let mut words: Vec<(&String, usize, usize)> = word_counts
        .iter()
        .filter(|(_, (count, _))| *count >= WORD_FREQ_THRESHOLD)
        .map(|(w, (count, first))| (w, *count, *first))
        .collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    for (word, _, _) in &words {
        push_new(&mut tokens, (*word).clone());
    }

    if tokens.len() < size {
        let mut suffix_counts: HashMap<String, (usize, usize)> = HashMap::new();
        for (word, (count, first)) in &word_counts {
            let chars: Vec<char> = word.chars().collect();
            if chars.len() < 2 || chars.len() > 24 {
                continue;
            }
            for split in 1..chars.len() {
                let piece: String = chars[split..].iter().collect();
                let entry = suffix_counts
                    .entry(format!("##{piece}"))
                    .or_insert((0, *first));
                entry.0 += count;
                entry.1 = entry.1.min(*first);
            }
        }
        let mut suffixes: Vec<(&String, usize, usize)> = suffix_counts
            .iter()
            .filter(|(_, (count, _))| *count >= WORD_FREQ_THRESHOLD)
            .map(|(s, (count, first))| (s, *count, *first))
            .collect();
        suffixes.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)).then(a.0.cmp(b.0)));
        for (piece, _, _) in &suffixes {
            push_new(&mut tokens, (*piece).clone());
        }
    }

    let mut filler = 0usize;
    while tokens.len() < size {
        let tok = format!("[unused{filler}]");
        filler += 1;
        push_new(&mut tokens, tok);
    }

    Vocabulary::from_tokens(tokens)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub attn_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn real_len(&self) -> usize {
        self.attn_mask.iter().filter(|&&m| m).count()
    }
}

/// Greedy longest-match word-piece tokenization, framed as
/// `[CLS] ... [SEP]` and padded to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    assert!(max_len >= 2, "max_len must fit [CLS] and [SEP]");
    let mut pieces = Vec::new();
    for word in basic_tokens(text) {
        wordpiece(&word, vocab, &mut pieces);
    }
    pieces.truncate(max_len - 2);

    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend(pieces);
    ids.push(SEP_ID);
    let real = ids.len();
    ids.resize(max_len, PAD_ID);

    let mut attn_mask = vec![true; real];
    attn_mask.resize(max_len, false);
    TokenSequence { ids, attn_mask }
}

fn wordpiece(word: &str, vocab: &Vocabulary, out: &mut Vec<usize>) {
    let chars: Vec<char> = word.chars().collect();
    let mut pos = 0;
    let mut first = true;
    while pos < chars.len() {
        let mut matched = None;
        for end in (pos + 1..=chars.len()).rev() {
            let piece: String = chars[pos..end].iter().collect();
            let key = if first { piece } else { format!("##{piece}") };
            if let Some(id) = vocab.id_of(&key) {
                matched = Some((id, end));
                break;
            }
        }
        match matched {
            Some((id, end)) => {
                out.push(id);
                pos = end;
            }
            None => {
                // ASCII always matches a single-char floor entry, so this is
                // a non-ASCII code point.
                out.push(UNK_ID);
                pos += 1;
            }
        }
        first = false;
    }
}

/// Inverse-ish of `tokenize`: joins pieces, gluing `##` continuations.
/// Unknowns render as U+FFFD so they re-tokenize to `[UNK]`.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for &id in ids {
        if id == PAD_ID || id == CLS_ID || id == SEP_ID {
            continue;
        }
        if id == UNK_ID {
            if !out.is_empty() && !out.ends_with(' ') {
                out.push('\u{FFFD}');
            } else {
                out.push('\u{FFFD}');
            }
            continue;
        }
        let tok = vocab.token(id);
        if let Some(rest) = tok.strip_prefix("##") {
            out.push_str(rest);
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(tok);
        }
    }
    out
}

/// Text-stream hidden states with the padding mask carried through.
#[derive(Debug, Clone)]
pub struct TextStates<T> {
    pub states: Tensor<T>,
    pub attn_mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct TextTowerParams {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<BlockParams>,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl TextTowerParams {
    pub fn add<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut impl Rng,
        cfg: &TextTowerConfig,
    ) -> Self {
        let tok_emb = store.add(
            format!("{prefix}.tok_emb"),
            Tensor::trunc_normal(cfg.vocab_size, cfg.hidden, INIT_STD, rng),
        );
        let pos_emb = store.add(
            format!("{prefix}.pos_emb"),
            Tensor::trunc_normal(cfg.max_len, cfg.hidden, INIT_STD, rng),
        );
        let blocks = (0..cfg.layers)
            .map(|i| {
                BlockParams::add(
                    store,
                    &format!("{prefix}.layer{i}"),
                    rng,
                    cfg.hidden,
                    cfg.ffn,
                    cfg.heads,
                )
            })
            .collect();
        Self {
            tok_emb,
            pos_emb,
            blocks,
            vocab_size: cfg.vocab_size,
            max_len: cfg.max_len,
        }
    }

    /// Token + position embeddings, then the post-norm block stack with the
    /// padding mask applied to every attention.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: StoreBinding,
        tokens: &TokenSequence,
    ) -> Result<VarId> {
        if let Some(&bad) = tokens.ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(EssenError::Tokenizer(format!(
                "token id {bad} out of vocabulary range {}",
                self.vocab_size
            )));
        }
        if tokens.ids.len() > self.max_len {
            return Err(EssenError::ShapeMismatch {
                context: "encode_text".into(),
                expected: format!("len <= {}", self.max_len),
                got: tokens.ids.len().to_string(),
            });
        }
        let emb = tape.gather_rows(bind.var(self.tok_emb), tokens.ids.clone());
        let pos = tape.slice_rows(bind.var(self.pos_emb), 0, tokens.ids.len());
        let mut x = tape.add(emb, pos);
        for block in &self.blocks {
            x = block.forward(tape, bind, x, x, Some(&tokens.attn_mask));
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn caption_corpus() -> Vec<String> {
        let mut lines = Vec::new();
        for color in ["red", "green", "blue", "yellow", "purple"] {
            for shape in ["circle", "square", "triangle"] {
                lines.push(format!("a {color} {shape}"));
                lines.push(format!("two {color} {shape}s"));
                lines.push(format!("the {color} {shape} left of a {shape}"));
            }
        }
        lines
    }

    #[test]
    fn base_vocab_floor_size() {
        assert_eq!(Vocabulary::base().len(), BASE_VOCAB_LEN);
        assert_eq!(BASE_VOCAB_LEN, 261);
    }

    #[test]
    fn build_vocab_size_305_has_44_learned_pieces() {
        let vocab = build_vocab(caption_corpus(), 305).unwrap();
        assert_eq!(vocab.len(), 305);
        // floor is specials + ASCII pieces, so exactly 44 learned entries
        let learned = vocab.len() - BASE_VOCAB_LEN;
        assert_eq!(learned, 44);
        assert!(!vocab.token(BASE_VOCAB_LEN).starts_with("[unused"));
    }

    #[test]
    fn induced_vocab_contains_expected_pieces() {
        let vocab = build_vocab(caption_corpus(), 1000).unwrap();
        assert!(vocab.contains("red"));
        assert!(vocab.contains("circle"));
        assert!(vocab.contains("##s"));
    }

    #[test]
    fn build_vocab_deterministic() {
        let a = build_vocab(caption_corpus(), 400).unwrap();
        let b = build_vocab(caption_corpus(), 400).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn build_vocab_rejects_empty_corpus() {
        let empty: Vec<String> = Vec::new();
        assert!(build_vocab(empty, 400).is_err());
    }

    #[test]
    fn tokenize_empty_is_cls_sep_padded() {
        let vocab = Vocabulary::base();
        let seq = tokenize("", &vocab, 6);
        assert_eq!(seq.ids, vec![CLS_ID, SEP_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID]);
        assert_eq!(seq.attn_mask, vec![true, true, false, false, false, false]);
    }

    #[test]
    fn tokenize_known_words() {
        let vocab = build_vocab(caption_corpus(), 400).unwrap();
        let seq = tokenize("a red circle", &vocab, 8);
        assert_eq!(seq.real_len(), 5); // [CLS] a red circle [SEP]
        assert_eq!(seq.ids[0], CLS_ID);
        assert_eq!(seq.ids[1], vocab.id_of("a").unwrap());
        assert_eq!(seq.ids[2], vocab.id_of("red").unwrap());
        assert_eq!(seq.ids[3], vocab.id_of("circle").unwrap());
        assert_eq!(seq.ids[4], SEP_ID);
    }

    #[test]
    fn tokenize_falls_back_to_chars() {
        let vocab = Vocabulary::base();
        let seq = tokenize("zq", &vocab, 8);
        assert_eq!(seq.ids[1], vocab.id_of("z").unwrap());
        assert_eq!(seq.ids[2], vocab.id_of("##q").unwrap());
    }

    #[test]
    fn unk_only_for_non_ascii() {
        let vocab = build_vocab(caption_corpus(), 400).unwrap();
        let seq = tokenize("red ø circle", &vocab, 12);
        let unks = seq.ids.iter().filter(|&&id| id == UNK_ID).count();
        assert_eq!(unks, 1);
    }

    #[test]
    fn tokenize_detokenize_idempotent() {
        let vocab = build_vocab(caption_corpus(), 400).unwrap();
        for text in [
            "a red circle",
            "two blue squares, one yellow triangle",
            "the purple thing left of a square",
            "weird zq!! tokens",
        ] {
            let once = tokenize(text, &vocab, 16);
            let round = tokenize(&detokenize(&once.ids, &vocab), &vocab, 16);
            assert_eq!(once, round, "not stable for {text:?}");
        }
    }

    #[test]
    fn vocab_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let vocab = build_vocab(caption_corpus(), 330).unwrap();
        vocab.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded.tokens, vocab.tokens);
    }

    #[test]
    fn truncation_keeps_frame() {
        let vocab = build_vocab(caption_corpus(), 400).unwrap();
        let seq = tokenize("a red circle left of a blue square above a triangle", &vocab, 6);
        assert_eq!(seq.ids.len(), 6);
        assert_eq!(seq.ids[0], CLS_ID);
        assert_eq!(seq.ids[5], SEP_ID);
        assert_eq!(seq.real_len(), 6);
    }
}
