//! Word representations: frozen word tables plus a character CNN.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use u2u_autodiff::{Graph, Real, Tensor, Var};

use crate::corpus::{Vocabulary, PAD_ID};
use crate::error::{Error, Result};
use crate::layout::UttLayout;
use crate::corpus::PaddedBatch;
use crate::nn::{glorot, uniform, Dropout};
use crate::params::{Bound, Params};

pub const PRETRAINED: &str = "embed.pretrained";
pub const TASK: &str = "embed.task";
pub const CHAR_TABLE: &str = "char.embed";

/// Range of the uniform draw for rows missing from a pretrained file.
pub const UNMATCHED_RANGE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub pretrained_dim: usize,
    pub task_dim: usize,
    pub char_embed_dim: usize,
    pub char_windows: Vec<usize>,
    pub char_filters: usize,
    /// Off for corpora without a meaningful character path.
    pub use_chars: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            pretrained_dim: 300,
            task_dim: 100,
            char_embed_dim: 16,
            char_windows: vec![3, 4, 5],
            char_filters: 50,
            use_chars: true,
        }
    }
}

impl EmbeddingConfig {
    /// Word-level tables of 200 + 200 and no character path.
    pub fn chinese() -> Self {
        EmbeddingConfig {
            pretrained_dim: 200,
            task_dim: 200,
            use_chars: false,
            ..Self::default()
        }
    }

    pub fn char_dim(&self) -> usize {
        if self.use_chars {
            self.char_windows.len() * self.char_filters
        } else {
            0
        }
    }

    pub fn dim(&self) -> usize {
        self.pretrained_dim + self.task_dim + self.char_dim()
    }

    pub fn validate(&self, max_word_len: usize) -> Result<()> {
        let cfg = |key: &str, msg: String| Err(Error::Config { key: key.into(), msg });
        if self.dim() == 0 {
            return cfg("pretrained_dim", "total word dimension must be positive".into());
        }
        if self.use_chars {
            if self.char_embed_dim == 0 || self.char_filters == 0 || self.char_windows.is_empty() {
                return cfg("char_filters", "character path needs positive sizes".into());
            }
            if let Some(w) = self.char_windows.iter().find(|&&w| w == 0 || w > max_word_len) {
                return cfg("char_windows", format!("window {w} must be in 1..={max_word_len}"));
            }
        }
        Ok(())
    }
}

/// Random frozen word table with a zero pad row.
pub fn random_table(rows: usize, dim: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = uniform(&mut rng, &[rows, dim], UNMATCHED_RANGE);
    zero_pad_row(&mut t);
    t
}

fn zero_pad_row(t: &mut Tensor<f32>) {
    let dim = t.shape()[1];
    let pad = PAD_ID as usize;
    for v in &mut t.data_mut()[pad * dim..(pad + 1) * dim] {
        *v = 0.0;
    }
}

/// Parses `token v1 ... vd` lines into a `[vocab, d]` table. Tokens absent
/// from the file get seeded uniform rows; the pad row is always zero.
pub fn parse_pretrained(text: &str, vocab: &Vocabulary, dim: Option<usize>, seed: u64) -> Result<Tensor<f32>> {
    let mut rows: Vec<(u32, Vec<f32>)> = Vec::new();
    let mut width = dim;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values = fields
            .map(|f| f.parse::<f32>().map_err(|_| Error::parse(line_no, format!("bad value `{f}`"))))
            .collect::<Result<Vec<_>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(line_no, "non-finite value"));
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::parse(
                    line_no,
                    format!("expected {w} values, found {}", values.len()),
                ))
            }
            _ => {}
        }
        let id = vocab.token_id(token);
        if vocab.token(id) == Some(token) {
            rows.push((id, values));
        }
    }
    let width = width.filter(|&w| w > 0).ok_or_else(|| Error::Data("embedding file has no vectors".into()))?;
    let mut table = random_table(vocab.len(), width, seed);
    for (id, values) in rows {
        let start = id as usize * width;
        table.data_mut()[start..start + width].copy_from_slice(&values);
    }
    zero_pad_row(&mut table);
    Ok(table)
}

pub fn load_pretrained(path: &Path, vocab: &Vocabulary, dim: Option<usize>, seed: u64) -> Result<Tensor<f32>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pretrained(&text, vocab, dim, seed)
}

/// Adds the word tables and character-path parameters. `pretrained`
/// replaces the synthesized pretrained table when given.
pub fn init_params(
    params: &mut Params<f32>,
    cfg: &EmbeddingConfig,
    vocab: &Vocabulary,
    pretrained: Option<Tensor<f32>>,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<()> {
    let pre = match pretrained {
        Some(t) => {
            if t.shape() != [vocab.len(), cfg.pretrained_dim] {
                return Err(Error::ParamShape {
                    name: PRETRAINED.into(),
                    expected: vec![vocab.len(), cfg.pretrained_dim],
                    found: t.shape().to_vec(),
                });
            }
            t
        }
        None => random_table(vocab.len(), cfg.pretrained_dim, seed ^ 0x5052_4554),
    };
    params.insert(PRETRAINED, pre, false);
    params.insert(TASK, random_table(vocab.len(), cfg.task_dim, seed ^ 0x5441_534b), false);
    if cfg.use_chars {
        let mut chars = uniform(rng, &[vocab.char_len(), cfg.char_embed_dim], UNMATCHED_RANGE);
        zero_pad_row(&mut chars);
        params.insert(CHAR_TABLE, chars, true);
        for &k in &cfg.char_windows {
            params.insert(format!("char.conv{k}.w"), glorot(rng, &[k * cfg.char_embed_dim, cfg.char_filters]), true);
            params.insert(format!("char.conv{k}.b"), Tensor::zeros(&[cfg.char_filters]), true);
        }
    }
    Ok(())
}

/// Character CNN over `words` (each padded to the same width with
/// [`PAD_ID`]): per window size, convolution, relu and max over positions.
/// Returns `[words, windows * filters]`.
pub fn char_cnn<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &EmbeddingConfig, words: &[&[u32]]) -> Result<Var> {
    let table = p.var(CHAR_TABLE)?;
    let e = cfg.char_embed_dim;
    let n = words.len();
    let w = words.first().map_or(0, |x| x.len());
    if words.iter().any(|x| x.len() != w) {
        return Err(Error::Data("char_cnn words must share one padded width".into()));
    }
    let mut feats = Vec::with_capacity(cfg.char_windows.len());
    for &k in &cfg.char_windows {
        if k > w {
            return Err(Error::Data(format!("window {k} wider than words of {w} chars")));
        }
        let spans = w - k + 1;
        let mut index = Vec::with_capacity(n * spans * k);
        for word in words {
            for s in 0..spans {
                for &c in &word[s..s + k] {
                    index.push((c != PAD_ID).then_some(c as usize));
                }
            }
        }
        let windows = g.gather(table, index)?;
        let windows = g.reshape(windows, &[n * spans, k * e])?;
        let conv = g.matmul(windows, p.var(&format!("char.conv{k}.w"))?)?;
        let conv = g.add(conv, p.var(&format!("char.conv{k}.b"))?)?;
        let conv = g.relu(conv);
        let conv = g.reshape(conv, &[n, spans, cfg.char_filters])?;
        feats.push(g.max_reduce(conv, 1)?);
    }
    Ok(g.concat(&feats, 1)?)
}

/// `[N, T, d]` representations for every row of `layout`; padded slots
/// are exact zeros before dropout (and therefore after it).
pub fn represent<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &EmbeddingConfig,
    batch: &PaddedBatch,
    layout: &UttLayout,
    dropout: &mut Dropout,
) -> Result<Var> {
    let (n, t) = (layout.rows(), layout.t);
    let mut word_index = Vec::with_capacity(n * t);
    let mut token_index = Vec::with_capacity(n * t);
    let mut words: Vec<&[u32]> = Vec::new();
    for utt in &layout.utts {
        for slot in 0..t {
            match utt.get(slot) {
                Some(r) => {
                    let id = r.word(batch);
                    word_index.push((id != PAD_ID).then_some(id as usize));
                    token_index.push(Some(words.len()));
                    words.push(r.chars(batch));
                }
                None => {
                    word_index.push(None);
                    token_index.push(None);
                }
            }
        }
    }
    let pre = g.gather(p.var(PRETRAINED)?, word_index.clone())?;
    let task = g.gather(p.var(TASK)?, word_index)?;
    let mut parts = vec![pre, task];
    if cfg.use_chars && !words.is_empty() {
        let chars = char_cnn(g, p, cfg, &words)?;
        parts.push(g.gather(chars, token_index)?);
    }
    let x = g.concat(&parts, 1)?;
    let x = dropout.apply(g, x)?;
    Ok(g.reshape(x, &[n, t, cfg.dim()])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_batch, parse_line, truncate_and_pad, LineFormat, Limits};

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(vec!["hello".into(), "world".into(), "again".into()]).unwrap()
    }

    fn small_cfg() -> EmbeddingConfig {
        EmbeddingConfig {
            pretrained_dim: 4,
            task_dim: 2,
            char_embed_dim: 3,
            char_windows: vec![2, 3],
            char_filters: 2,
            use_chars: true,
        }
    }

    #[test]
    fn default_dims() {
        assert_eq!(EmbeddingConfig::default().dim(), 550);
        assert_eq!(EmbeddingConfig::default().char_dim(), 150);
        assert_eq!(EmbeddingConfig::chinese().dim(), 400);
        let desk = EmbeddingConfig {
            pretrained_dim: 24,
            task_dim: 8,
            char_filters: 4,
            ..Default::default()
        };
        assert_eq!(desk.dim(), 44);
    }

    #[test]
    fn window_wider_than_word_is_rejected() {
        let cfg = EmbeddingConfig::default();
        assert!(cfg.validate(18).is_ok());
        assert!(cfg.validate(4).is_err());
    }

    #[test]
    fn pretrained_matched_rows_and_pad() {
        let v = vocab();
        let text = "hello 1 2\nunknownword 3 4\n<pad> 5 6\n";
        let t = parse_pretrained(text, &v, None, 7).unwrap();
        assert_eq!(t.shape(), &[v.len(), 2]);
        let hello = v.token_id("hello") as usize;
        assert_eq!(&t.data()[hello * 2..hello * 2 + 2], &[1.0, 2.0]);
        assert_eq!(&t.data()[..2], &[0.0, 0.0]);
        let world = v.token_id("world") as usize;
        let row = &t.data()[world * 2..world * 2 + 2];
        assert!(row.iter().all(|x| x.abs() <= 0.1));
        assert_eq!(t, parse_pretrained(text, &v, None, 7).unwrap());
    }

    #[test]
    fn pad_token_in_file_keeps_zero_row() {
        let v = vocab();
        let pad = v.token(PAD_ID).unwrap().to_string();
        let t = parse_pretrained(&format!("{pad} 5 6\n"), &v, None, 1).unwrap();
        assert_eq!(&t.data()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_reports_line() {
        let err = parse_pretrained("hello 1 2\nworld 1 2 3\n", &vocab(), None, 0).unwrap_err();
        assert!(err.to_string().starts_with("line 2"), "{err}");
        let err = parse_pretrained("hello 1 2\n", &vocab(), Some(3), 0).unwrap_err();
        assert!(err.to_string().starts_with("line 1"), "{err}");
    }

    fn bound(cfg: &EmbeddingConfig, v: &Vocabulary) -> (Params<f64>, Graph<f64>, Bound) {
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        init_params(&mut p, cfg, v, None, &mut rng, 2).unwrap();
        // nonzero conv bias so the all-pad case is informative
        for k in &cfg.char_windows {
            p.get_mut(&format!("char.conv{k}.b")).unwrap().value = Tensor::from_f64(&[2], &[0.3, -0.2]).unwrap();
        }
        let p: Params<f64> = p.cast();
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        (p, g, b)
    }

    #[test]
    fn all_pad_words_share_relu_bias_output() {
        let cfg = small_cfg();
        let (_, mut g, b) = bound(&cfg, &vocab());
        let pad = [0u32; 5];
        let out = char_cnn(&mut g, &b, &cfg, &[&pad, &pad]).unwrap();
        let b = 0.3f32 as f64;
        assert_eq!(g.value(out).to_f64_vec(), vec![b, 0.0, b, 0.0, b, 0.0, b, 0.0]);
    }

    #[test]
    fn represent_shapes_and_zero_pads() {
        let v = vocab();
        let cfg = small_cfg();
        let limits = Limits {
            max_word_len: 5,
            ..Limits::default()
        };
        let ex = parse_line("1\thello world _eou_ again\thello", LineFormat::V2, 1).unwrap();
        let batch = make_batch(&[truncate_and_pad(&ex, limits)], &v).unwrap();
        let layout = UttLayout::new(&batch, false);
        let (_, mut g, b) = bound(&cfg, &v);
        let x = represent(&mut g, &b, &cfg, &batch, &layout, &mut Dropout::off()).unwrap();
        assert_eq!(g.shape(x), &[3, 2, 10]);
        let vals = g.value(x).to_f64_vec();
        // row 1 (`again`) and row 2 (`hello`) have one padded slot each
        assert!(vals[30..40].iter().all(|v| *v == 0.0));
        assert!(vals[50..60].iter().all(|v| *v == 0.0));
        assert!(vals[20..30].iter().any(|v| *v != 0.0));
    }
}
