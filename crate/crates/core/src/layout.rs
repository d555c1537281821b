//! Flat utterance layout used by one forward pass.
//!
//! Every real utterance of a batch becomes one row of a `[N, T, ·]`
//! tensor: first all context utterances (example-major), then all response
//! utterances. `T` is the longest real utterance in the batch. In
//! utterance-to-response mode the response utterances of an example are
//! joined into one utterance.

use crate::corpus::PaddedBatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Context,
    Response,
}

/// Position of a token inside a [`PaddedBatch`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenRef {
    pub side: Side,
    pub b: usize,
    pub utt: usize,
    pub pos: usize,
}

impl TokenRef {
    pub fn word(&self, batch: &PaddedBatch) -> u32 {
        match self.side {
            Side::Context => batch.ctx_token(self.b, self.utt, self.pos),
            Side::Response => batch.resp_token(self.b, self.utt, self.pos),
        }
    }

    pub fn chars<'a>(&self, batch: &'a PaddedBatch) -> &'a [u32] {
        match self.side {
            Side::Context => batch.ctx_word_chars(self.b, self.utt, self.pos),
            Side::Response => batch.resp_word_chars(self.b, self.utt, self.pos),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UttLayout {
    /// Time width of the flat tensors.
    pub t: usize,
    pub utts: Vec<Vec<TokenRef>>,
    /// `ctx[b][m]` is the flat row of context utterance `m` of example `b`.
    pub ctx: Vec<Vec<usize>>,
    pub resp: Vec<Vec<usize>>,
    pub n_ctx_rows: usize,
}

impl UttLayout {
    pub fn new(batch: &PaddedBatch, join_response: bool) -> Self {
        let mut utts = Vec::new();
        let mut ctx = Vec::with_capacity(batch.size);
        for (b, item) in batch.items.iter().enumerate() {
            let mut rows = Vec::with_capacity(item.n_ctx);
            for m in 0..item.n_ctx {
                rows.push(utts.len());
                utts.push(side_tokens(Side::Context, b, m, batch.ctx_len(b, m)));
            }
            ctx.push(rows);
        }
        let n_ctx_rows = utts.len();
        let mut resp = Vec::with_capacity(batch.size);
        for (b, item) in batch.items.iter().enumerate() {
            let mut rows = Vec::new();
            if join_response {
                rows.push(utts.len());
                let joined = (0..item.n_resp)
                    .flat_map(|n| side_tokens(Side::Response, b, n, batch.resp_len(b, n)))
                    .collect();
                utts.push(joined);
            } else {
                for n in 0..item.n_resp {
                    rows.push(utts.len());
                    utts.push(side_tokens(Side::Response, b, n, batch.resp_len(b, n)));
                }
            }
            resp.push(rows);
        }
        let t = utts.iter().map(Vec::len).max().unwrap_or(0);
        UttLayout {
            t,
            utts,
            ctx,
            resp,
            n_ctx_rows,
        }
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.utts.iter().map(Vec::len).collect()
    }

    pub fn rows(&self) -> usize {
        self.utts.len()
    }

    pub fn batch_size(&self) -> usize {
        self.ctx.len()
    }

    /// Flat `[N * T]` index of every real token of `row`, in order.
    pub fn positions(&self, row: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.utts[row].len()).map(move |i| row * self.t + i)
    }
}

fn side_tokens(side: Side, b: usize, utt: usize, len: usize) -> Vec<TokenRef> {
    (0..len).map(|pos| TokenRef { side, b, utt, pos }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_batch, parse_line, truncate_and_pad, LineFormat, Limits, Vocabulary};

    fn batch() -> PaddedBatch {
        let lines = ["1\ta b _eou_ c\td e f _eou_ g", "0\th\ti"];
        let ex: Vec<_> = lines.iter().map(|l| parse_line(l, LineFormat::V2, 1).unwrap()).collect();
        let vocab = Vocabulary::build(&ex, 1);
        let shaped: Vec<_> = ex.iter().map(|e| truncate_and_pad(e, Limits::default())).collect();
        make_batch(&shaped, &vocab).unwrap()
    }

    #[test]
    fn context_rows_precede_response_rows() {
        let l = UttLayout::new(&batch(), false);
        assert_eq!(l.lengths(), vec![2, 1, 1, 3, 1, 1]);
        assert_eq!(l.ctx, vec![vec![0, 1], vec![2]]);
        assert_eq!(l.resp, vec![vec![3, 4], vec![5]]);
        assert_eq!(l.t, 3);
        assert_eq!(l.positions(1).collect::<Vec<_>>(), vec![3]);
    }

    #[test]
    fn joined_response_is_one_row() {
        let b = batch();
        let l = UttLayout::new(&b, true);
        assert_eq!(l.lengths(), vec![2, 1, 1, 4, 1]);
        let words: Vec<u32> = l.utts[3].iter().map(|r| r.word(&b)).collect();
        let expected: Vec<u32> = (0..3).map(|j| b.resp_token(0, 0, j)).chain([b.resp_token(0, 1, 0)]).collect();
        assert_eq!(words, expected);
    }
}
