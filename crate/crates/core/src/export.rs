//! Attention and gate inspection for a single example.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use u2u_autodiff::Graph;

use crate::corpus::{make_batch, truncate_and_pad, DialogueExample, Vocabulary};
use crate::error::{Error, Result};
use crate::layout::UttLayout;
use crate::model::Model;
use crate::nn::Dropout;
use crate::params::Params;

/// Row-major matrix of weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// Tokens of one side with the index of the utterance each belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLabels {
    pub tokens: Vec<String>,
    pub utterance: Vec<usize>,
}

impl TokenLabels {
    /// Offsets where each utterance starts, followed by the total length.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut out = vec![0];
        for i in 1..self.utterance.len() {
            if self.utterance[i] != self.utterance[i - 1] {
                out.push(i);
            }
        }
        out.push(self.tokens.len());
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionExport {
    pub score: f64,
    pub context: TokenLabels,
    pub response: TokenLabels,
    /// `[l_c, l_r]`, rows sum to 1. Absent without C2R or in local mode.
    pub c2r: Option<Matrix>,
    /// `[l_c, l_r]`, columns sum to 1.
    pub r2c: Option<Matrix>,
    /// Response utterance weights under attention aggregation.
    pub response_weights: Option<Vec<f64>>,
    /// Input-gate activations per response utterance step, forward and
    /// backward, under RNN aggregation.
    pub gates: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
}

fn labels(layout: &UttLayout, rows: &[usize], batch: &crate::corpus::PaddedBatch, vocab: &Vocabulary) -> TokenLabels {
    let mut out = TokenLabels {
        tokens: Vec::new(),
        utterance: Vec::new(),
    };
    for (u, &row) in rows.iter().enumerate() {
        for tr in &layout.utts[row] {
            let id = tr.word(batch);
            out.tokens.push(vocab.token(id).unwrap_or("<unk>").to_string());
            out.utterance.push(u);
        }
    }
    out
}

/// Runs the model on `example` without dropout and collects the weights.
pub fn export_attention(
    model: &Model,
    params: &Params<f32>,
    vocab: &Vocabulary,
    example: &DialogueExample,
) -> Result<AttentionExport> {
    let shaped = truncate_and_pad(example, model.config.limits);
    let batch = make_batch(std::slice::from_ref(&shaped), vocab)?;
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g);
    let f = model.forward(&mut g, &p, &batch, &mut Dropout::off())?;
    let s = g.sigmoid(f.logits);
    let score = g.value(s).to_f64_vec()[0];

    let context = labels(&f.layout, &f.layout.ctx[0], &batch, vocab);
    let response = labels(&f.layout, &f.layout.resp[0], &batch, vocab);
    let matrix = |v: Option<u2u_autodiff::Var>| {
        v.map(|v| {
            let t = g.value(v);
            Matrix {
                rows: t.shape()[0],
                cols: t.shape()[1],
                data: t.to_f64_vec(),
            }
        })
    };
    let (c2r, r2c) = f.attention.first().copied().unwrap_or((None, None));
    let (c2r, r2c) = (matrix(c2r), matrix(r2c));

    let response_weights = f.agg.resp_weights.map(|w| {
        let n = f.layout.resp[0].len();
        g.value(w).to_f64_vec()[..n].to_vec()
    });
    let gates = f.agg.rnn.as_ref().map(|rnn| {
        let n = f.layout.resp[0].len();
        let rows = |vs: &[u2u_autodiff::Var]| -> Vec<Vec<f64>> {
            vs.iter()
                .take(n)
                .map(|&v| {
                    let t = g.value(v);
                    t.to_f64_vec()[..t.shape()[1]].to_vec()
                })
                .collect()
        };
        (rows(&rnn.fwd_gates), rows(&rnn.bwd_gates))
    });
    Ok(AttentionExport {
        score,
        context,
        response,
        c2r,
        r2c,
        response_weights,
        gates,
    })
}

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

fn header(config_text: &str) -> String {
    config_text.lines().map(|l| format!("# {l}\n")).collect()
}

impl AttentionExport {
    /// `side \t index \t utterance \t token`, one line per token.
    pub fn tokens_text(&self) -> String {
        let mut s = String::from("side\tindex\tutterance\ttoken\n");
        for (side, lab) in [("context", &self.context), ("response", &self.response)] {
            for (i, (t, u)) in lab.tokens.iter().zip(&lab.utterance).enumerate() {
                let _ = writeln!(s, "{side}\t{i}\t{u}\t{t}");
            }
        }
        s
    }

    /// Response tokens across, context tokens down.
    pub fn matrix_text(&self, m: &Matrix) -> String {
        let mut s = String::new();
        for t in &self.response.tokens {
            s.push('\t');
            s.push_str(t);
        }
        s.push('\n');
        for (i, t) in self.context.tokens.iter().enumerate() {
            s.push_str(t);
            for &x in m.row(i) {
                s.push('\t');
                s.push_str(&fmt(x));
            }
            s.push('\n');
        }
        s
    }

    /// `direction \t step \t gate values...` or `weight \t step \t w`.
    pub fn gates_text(&self) -> Option<String> {
        let mut s = String::new();
        if let Some(w) = &self.response_weights {
            for (i, x) in w.iter().enumerate() {
                let _ = writeln!(s, "weight\t{}\t{}", i + 1, fmt(*x));
            }
        }
        if let Some((fwd, bwd)) = &self.gates {
            for (dir, rows) in [("fwd", fwd), ("bwd", bwd)] {
                for (i, r) in rows.iter().enumerate() {
                    let vals: Vec<String> = r.iter().map(|&x| fmt(x)).collect();
                    let _ = writeln!(s, "{dir}\t{}\t{}", i + 1, vals.join("\t"));
                }
            }
        }
        (!s.is_empty()).then_some(s)
    }

    /// Writes the text files and grid images into `dir`, each text file
    /// starting with the run configuration as comment lines. Returns the
    /// paths written.
    pub fn write_dir(&self, dir: &Path, config_text: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let head = header(config_text);
        let mut written = Vec::new();
        let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            written.push(path);
            Ok(())
        };
        put(
            "tokens.tsv",
            format!("{head}# score {}\n{}", fmt(self.score), self.tokens_text()).into_bytes(),
        )?;
        for (name, m) in [("c2r", &self.c2r), ("r2c", &self.r2c)] {
            if let Some(m) = m {
                put(&format!("{name}.tsv"), format!("{head}{}", self.matrix_text(m)).into_bytes())?;
                put(&format!("{name}.pgm"), self.grid_image(m, 8))?;
            }
        }
        if let Some(g) = self.gates_text() {
            put("gates.tsv", format!("{head}{g}").into_bytes())?;
        }
        Ok(written)
    }

    /// Binary greyscale image with `cell` pixels per weight, darker for
    /// larger weights relative to the maximum. Utterance boundaries are
    /// drawn as mid-grey lines.
    pub fn grid_image(&self, m: &Matrix, cell: usize) -> Vec<u8> {
        let cell = cell.max(2);
        let (w, h) = (m.cols * cell, m.rows * cell);
        let max = m.data.iter().cloned().fold(0.0f64, f64::max);
        let mut px = vec![255u8; w * h];
        for i in 0..m.rows {
            for j in 0..m.cols {
                let v = if max > 0.0 { m.at(i, j) / max } else { 0.0 };
                let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
                for y in i * cell..(i + 1) * cell {
                    px[y * w + j * cell..y * w + (j + 1) * cell].fill(shade);
                }
            }
        }
        let cb = self.context.boundaries();
        let rb = self.response.boundaries();
        for &b in &cb[1..cb.len() - 1] {
            px[b * cell * w..b * cell * w + w].fill(128);
        }
        for &b in &rb[1..rb.len() - 1] {
            for y in 0..h {
                px[y * w + b * cell] = 128;
            }
        }
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        out.extend(px);
        out
    }
}
