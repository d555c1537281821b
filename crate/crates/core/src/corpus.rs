//! Dialogue datasets in the `_eou_` / `_eot_` convention, vocabularies,
//! truncation limits and padded minibatches.
//!
//! A dataset line is `label<TAB>context<TAB>response`. Within the context
//! and the response, `_eou_` ends an utterance and `_eot_` ends a turn; every
//! `_eou_` segment becomes one utterance and turn boundaries are dropped.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const END_OF_UTTERANCE: &str = "_eou_";
pub const END_OF_TURN: &str = "_eot_";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
const RESERVED: u32 = 2;

pub type Utterance = Vec<String>;

/// A labeled (context, response) pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueExample {
    pub context: Vec<Utterance>,
    pub response: Vec<Utterance>,
    pub label: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LineFormat {
    /// `label \t context \t response` with `_eou_`/`_eot_` markers.
    V2,
    /// `label \t utt_1 \t ... \t utt_n \t response`, one utterance per field.
    Tsv,
}

fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Splits marker-delimited text into non-empty utterances.
fn split_utterances(text: &str) -> Vec<Utterance> {
    let spaced = text
        .replace(END_OF_UTTERANCE, " \u{1} ")
        .replace(END_OF_TURN, " ");
    spaced
        .split('\u{1}')
        .map(tokenize)
        .filter(|u| !u.is_empty())
        .collect()
}

fn parse_label(field: &str, line_no: usize) -> Result<u8> {
    match field.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::parse(line_no, format!("label must be 0 or 1, got {other:?}"))),
    }
}

/// Parses one dataset line. `line_no` is only used in error messages.
pub fn parse_line(line: &str, format: LineFormat, line_no: usize) -> Result<DialogueExample> {
    let line = line.trim_end_matches(['\r', '\n']);
    let fields: Vec<&str> = line.split('\t').collect();
    let (label, context, response) = match format {
        LineFormat::V2 => {
            if fields.len() != 3 {
                return Err(Error::parse(
                    line_no,
                    format!("expected 3 tab-separated fields, found {}", fields.len()),
                ));
            }
            (
                parse_label(fields[0], line_no)?,
                split_utterances(fields[1]),
                split_utterances(fields[2]),
            )
        }
        LineFormat::Tsv => {
            if fields.len() < 3 {
                return Err(Error::parse(
                    line_no,
                    format!("expected at least 3 tab-separated fields, found {}", fields.len()),
                ));
            }
            let n = fields.len();
            let context = fields[1..n - 1]
                .iter()
                .flat_map(|f| split_utterances(f))
                .collect();
            (parse_label(fields[0], line_no)?, context, split_utterances(fields[n - 1]))
        }
    };
    if context.is_empty() {
        return Err(Error::parse(line_no, "context has no utterances"));
    }
    if response.is_empty() {
        return Err(Error::parse(line_no, "response has no utterances"));
    }
    Ok(DialogueExample {
        context,
        response,
        label,
    })
}

/// Writes an example back out in the V2 line format.
pub fn serialize_line(ex: &DialogueExample) -> String {
    let side = |utts: &[Utterance]| {
        let mut s = String::new();
        for u in utts {
            let _ = write!(s, "{} {} ", u.join(" "), END_OF_UTTERANCE);
        }
        s.trim_end().to_string()
    };
    format!("{}\t{}\t{}", ex.label, side(&ex.context), side(&ex.response))
}

/// Parses a whole dataset. Blank lines are skipped; errors carry the
/// 1-based line number.
pub fn parse_dataset(text: &str, format: LineFormat) -> Result<Vec<DialogueExample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, format, i + 1))
        .collect()
}

pub fn read_dataset(path: &Path, format: LineFormat) -> Result<Vec<DialogueExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, format)
}

pub fn write_dataset(path: &Path, examples: &[DialogueExample]) -> Result<()> {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serialize_line(ex));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------

/// Token and character vocabularies. Ids 0 and 1 are reserved for padding
/// and unknown entries in both.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    chars: Vec<char>,
    char_index: HashMap<char, u32>,
}

impl Vocabulary {
    /// Tokens are given in id order starting at id 2. The character set is
    /// derived from the tokens (sorted), so a token list fully determines
    /// the vocabulary.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) || t == PAD_TOKEN || t == UNK_TOKEN {
                return Err(Error::parse(i + 1, format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i as u32 + RESERVED).is_some() {
                return Err(Error::parse(i + 1, format!("duplicate token {t:?}")));
            }
        }
        let mut chars: Vec<char> = tokens.iter().flat_map(|t| t.chars()).collect();
        chars.sort_unstable();
        chars.dedup();
        let char_index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as u32 + RESERVED))
            .collect();
        Ok(Vocabulary {
            tokens,
            index,
            chars,
            char_index,
        })
    }

    /// Builds a vocabulary ordered by descending frequency, ties broken
    /// lexicographically.
    pub fn build<'a>(examples: impl IntoIterator<Item = &'a DialogueExample>, min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for ex in examples {
            for u in ex.context.iter().chain(&ex.response) {
                for t in u {
                    *counts.entry(t.as_str()).or_default() += 1;
                }
            }
        }
        let mut entries: Vec<(&str, usize)> =
            counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count.max(1) && t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = entries.into_iter().map(|(t, _)| t.to_string()).collect();
        Self::from_tokens(tokens).expect("tokens from whitespace tokenization are valid")
    }

    /// One token per line; line `k` (1-based) has id `k + 1`.
    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        Self::from_tokens(tokens)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Number of token ids including the two reserved ones.
    pub fn len(&self) -> usize {
        self.tokens.len() + RESERVED as usize
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn char_len(&self) -> usize {
        self.chars.len() + RESERVED as usize
    }

    pub fn token_id(&self, token: &str) -> u32 {
        match token {
            PAD_TOKEN => PAD_ID,
            _ => self.index.get(token).copied().unwrap_or(UNK_ID),
        }
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        match id {
            PAD_ID => Some(PAD_TOKEN),
            UNK_ID => Some(UNK_TOKEN),
            _ => self.tokens.get((id - RESERVED) as usize).map(String::as_str),
        }
    }

    pub fn char_id(&self, c: char) -> u32 {
        self.char_index.get(&c).copied().unwrap_or(UNK_ID)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

// ---------------------------------------------------------------------------

/// Truncation limits: characters per word, tokens per utterance,
/// utterances per context and per response.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub max_word_len: usize,
    pub max_utt_len: usize,
    pub max_ctx_utts: usize,
    pub max_resp_utts: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_word_len: 18,
            max_utt_len: 50,
            max_ctx_utts: 10,
            max_resp_utts: 3,
        }
    }
}

impl Limits {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("max_word_len", self.max_word_len),
            ("max_utt_len", self.max_utt_len),
            ("max_ctx_utts", self.max_ctx_utts),
            ("max_resp_utts", self.max_resp_utts),
        ] {
            if v == 0 {
                return Err(Error::Config {
                    key: k.into(),
                    msg: "must be positive".into(),
                });
            }
        }
        Ok(())
    }
}

/// An example cut to fit [`Limits`]. Utterance lists hold only the real
/// utterances; padding up to the limits is described by the mask accessors
/// and materialized by [`make_batch`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapedExample {
    pub context: Vec<Utterance>,
    pub response: Vec<Utterance>,
    pub label: u8,
    pub limits: Limits,
}

impl ShapedExample {
    pub fn context_utterance_mask(&self) -> Vec<u8> {
        mask(self.context.len(), self.limits.max_ctx_utts)
    }

    pub fn response_utterance_mask(&self) -> Vec<u8> {
        mask(self.response.len(), self.limits.max_resp_utts)
    }

    pub fn n_ctx(&self) -> usize {
        self.context.len()
    }

    pub fn n_resp(&self) -> usize {
        self.response.len()
    }
}

fn mask(n: usize, width: usize) -> Vec<u8> {
    (0..width).map(|i| u8::from(i < n)).collect()
}

/// Keeps the last `max_ctx_utts` context utterances, the last
/// `max_resp_utts` response utterances, and the first `max_utt_len` tokens
/// of each utterance. Word-level character truncation happens when
/// character ids are produced.
pub fn truncate_and_pad(example: &DialogueExample, limits: Limits) -> ShapedExample {
    let cut = |utts: &[Utterance], keep: usize| -> Vec<Utterance> {
        let start = utts.len().saturating_sub(keep);
        utts[start..]
            .iter()
            .map(|u| u.iter().take(limits.max_utt_len).cloned().collect())
            .collect()
    };
    ShapedExample {
        context: cut(&example.context, limits.max_ctx_utts),
        response: cut(&example.response, limits.max_resp_utts),
        label: example.label,
        limits,
    }
}

/// Sentence-level distance between context utterance `m` and response
/// utterance `n` (both 1-based): `(n_ctx - m) + (n - 1)`. The last context
/// utterance and the first response utterance are at distance 0.
pub fn sentence_distance(m: usize, n: usize, n_ctx: usize, n_resp: usize) -> Result<u32> {
    if m == 0 || m > n_ctx || n == 0 || n > n_resp {
        return Err(Error::Data(format!(
            "utterance pair ({m}, {n}) out of range for {n_ctx} context and {n_resp} response utterances"
        )));
    }
    Ok(((n_ctx - m) + (n - 1)) as u32)
}

/// Per-example metadata for the concatenated (flattened) sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub n_ctx: usize,
    pub n_resp: usize,
    /// Utterance index (0-based) of every flattened context position.
    pub ctx_utt_of: Vec<usize>,
    /// Utterance index (0-based) of every flattened response position.
    pub resp_utt_of: Vec<usize>,
    /// Sentence distance for each (context position, response position),
    /// row-major `[l_c, l_r]`.
    pub distance: Vec<u32>,
}

impl BatchItem {
    pub fn l_ctx(&self) -> usize {
        self.ctx_utt_of.len()
    }

    pub fn l_resp(&self) -> usize {
        self.resp_utt_of.len()
    }
}

/// A padded minibatch. Token arrays are `[batch, utts, max_utt_len]`,
/// character arrays `[batch, utts, max_utt_len, max_word_len]`, masks are
/// 0/1 with the same leading shape.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub limits: Limits,
    pub size: usize,
    pub ctx_tokens: Vec<u32>,
    pub resp_tokens: Vec<u32>,
    pub ctx_chars: Vec<u32>,
    pub resp_chars: Vec<u32>,
    pub ctx_token_mask: Vec<u8>,
    pub resp_token_mask: Vec<u8>,
    pub ctx_utt_mask: Vec<u8>,
    pub resp_utt_mask: Vec<u8>,
    /// `[batch, max_ctx_utts]` utterance lengths (0 for padding).
    pub ctx_lengths: Vec<usize>,
    /// `[batch, max_resp_utts]`.
    pub resp_lengths: Vec<usize>,
    pub labels: Vec<u8>,
    pub items: Vec<BatchItem>,
}

impl PaddedBatch {
    pub fn ctx_len(&self, b: usize, m: usize) -> usize {
        self.ctx_lengths[b * self.limits.max_ctx_utts + m]
    }

    pub fn resp_len(&self, b: usize, n: usize) -> usize {
        self.resp_lengths[b * self.limits.max_resp_utts + n]
    }

    pub fn ctx_token(&self, b: usize, m: usize, i: usize) -> u32 {
        let l = &self.limits;
        self.ctx_tokens[(b * l.max_ctx_utts + m) * l.max_utt_len + i]
    }

    pub fn resp_token(&self, b: usize, n: usize, j: usize) -> u32 {
        let l = &self.limits;
        self.resp_tokens[(b * l.max_resp_utts + n) * l.max_utt_len + j]
    }

    pub fn ctx_word_chars(&self, b: usize, m: usize, i: usize) -> &[u32] {
        let l = &self.limits;
        let start = ((b * l.max_ctx_utts + m) * l.max_utt_len + i) * l.max_word_len;
        &self.ctx_chars[start..start + l.max_word_len]
    }

    pub fn resp_word_chars(&self, b: usize, n: usize, j: usize) -> &[u32] {
        let l = &self.limits;
        let start = ((b * l.max_resp_utts + n) * l.max_utt_len + j) * l.max_word_len;
        &self.resp_chars[start..start + l.max_word_len]
    }
}

fn fill_side(
    utts: &[Utterance],
    max_utts: usize,
    limits: &Limits,
    vocab: &Vocabulary,
    tokens: &mut Vec<u32>,
    chars: &mut Vec<u32>,
    token_mask: &mut Vec<u8>,
    utt_mask: &mut Vec<u8>,
    lengths: &mut Vec<usize>,
) {
    for m in 0..max_utts {
        let utt = utts.get(m);
        utt_mask.push(u8::from(utt.is_some()));
        lengths.push(utt.map_or(0, Vec::len));
        for i in 0..limits.max_utt_len {
            match utt.and_then(|u| u.get(i)) {
                Some(word) => {
                    tokens.push(vocab.token_id(word));
                    token_mask.push(1);
                    let mut n = 0;
                    for c in word.chars().take(limits.max_word_len) {
                        chars.push(vocab.char_id(c));
                        n += 1;
                    }
                    chars.extend(std::iter::repeat_n(PAD_ID, limits.max_word_len - n));
                }
                None => {
                    tokens.push(PAD_ID);
                    token_mask.push(0);
                    chars.extend(std::iter::repeat_n(PAD_ID, limits.max_word_len));
                }
            }
        }
    }
}

/// Builds a padded batch. All examples must share the same limits.
/// Construction is a pure function of its inputs.
pub fn make_batch(examples: &[ShapedExample], vocab: &Vocabulary) -> Result<PaddedBatch> {
    let limits = examples
        .first()
        .map(|e| e.limits)
        .ok_or_else(|| Error::Data("empty batch".into()))?;
    if examples.iter().any(|e| e.limits != limits) {
        return Err(Error::Data("examples in a batch use different limits".into()));
    }
    let mut b = PaddedBatch {
        limits,
        size: examples.len(),
        ctx_tokens: Vec::new(),
        resp_tokens: Vec::new(),
        ctx_chars: Vec::new(),
        resp_chars: Vec::new(),
        ctx_token_mask: Vec::new(),
        resp_token_mask: Vec::new(),
        ctx_utt_mask: Vec::new(),
        resp_utt_mask: Vec::new(),
        ctx_lengths: Vec::new(),
        resp_lengths: Vec::new(),
        labels: Vec::new(),
        items: Vec::new(),
    };
    for ex in examples {
        if ex.context.is_empty() || ex.response.is_empty() {
            return Err(Error::Data("example without context or response utterances".into()));
        }
        if ex.context.len() > limits.max_ctx_utts || ex.response.len() > limits.max_resp_utts {
            return Err(Error::Data("example exceeds utterance limits; truncate first".into()));
        }
        if ex.context.iter().chain(&ex.response).any(|u| u.is_empty() || u.len() > limits.max_utt_len) {
            return Err(Error::Data("empty or over-long utterance; truncate first".into()));
        }
        fill_side(
            &ex.context,
            limits.max_ctx_utts,
            &limits,
            vocab,
            &mut b.ctx_tokens,
            &mut b.ctx_chars,
            &mut b.ctx_token_mask,
            &mut b.ctx_utt_mask,
            &mut b.ctx_lengths,
        );
        fill_side(
            &ex.response,
            limits.max_resp_utts,
            &limits,
            vocab,
            &mut b.resp_tokens,
            &mut b.resp_chars,
            &mut b.resp_token_mask,
            &mut b.resp_utt_mask,
            &mut b.resp_lengths,
        );
        b.labels.push(ex.label);

        let ctx_utt_of: Vec<usize> = ex
            .context
            .iter()
            .enumerate()
            .flat_map(|(m, u)| std::iter::repeat_n(m, u.len()))
            .collect();
        let resp_utt_of: Vec<usize> = ex
            .response
            .iter()
            .enumerate()
            .flat_map(|(n, u)| std::iter::repeat_n(n, u.len()))
            .collect();
        let (n_ctx, n_resp) = (ex.context.len(), ex.response.len());
        let mut distance = Vec::with_capacity(ctx_utt_of.len() * resp_utt_of.len());
        for &m in &ctx_utt_of {
            for &n in &resp_utt_of {
                distance.push(sentence_distance(m + 1, n + 1, n_ctx, n_resp)?);
            }
        }
        b.items.push(BatchItem {
            n_ctx,
            n_resp,
            ctx_utt_of,
            resp_utt_of,
            distance,
        });
    }
    Ok(b)
}
