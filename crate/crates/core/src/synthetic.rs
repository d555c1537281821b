//! Seeded keyword dialogues for desk-scale experiments.
//!
//! The last context utterance carries a target keyword `kw{i}`; earlier
//! utterances may carry distractor keywords. The correct response carries
//! the reply keyword for the target in one of its utterances, negatives
//! carry the reply for some other keyword (often a distractor). Everything
//! else is filler.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DialogueExample, Utterance};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplyRule {
    /// The reply keyword is the keyword itself.
    Echo,
    /// `kw{i}` is answered by `re{i}`.
    Mapped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub keywords: usize,
    pub fillers: usize,
    pub ctx_utts: (usize, usize),
    pub resp_utts: (usize, usize),
    pub utt_len: (usize, usize),
    /// Chance that an earlier context utterance carries a distractor.
    pub distractor_prob: f64,
    pub reply: ReplyRule,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            keywords: 40,
            fillers: 80,
            ctx_utts: (2, 4),
            resp_utts: (1, 3),
            utt_len: (3, 6),
            distractor_prob: 0.5,
            reply: ReplyRule::Echo,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config { key: key.into(), msg: msg.into() });
        if self.keywords < 2 {
            return bad("keywords", "need at least 2 keywords");
        }
        if self.fillers == 0 {
            return bad("fillers", "need at least one filler word");
        }
        for (k, (lo, hi)) in [("ctx_utts", self.ctx_utts), ("resp_utts", self.resp_utts), ("utt_len", self.utt_len)] {
            if lo == 0 || lo > hi {
                return bad(k, "range must satisfy 1 <= min <= max");
            }
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return bad("distractor_prob", "must be within [0, 1]");
        }
        Ok(())
    }

    pub fn keyword(&self, i: usize) -> String {
        format!("kw{i}")
    }

    pub fn reply_word(&self, i: usize) -> String {
        match self.reply {
            ReplyRule::Echo => self.keyword(i),
            ReplyRule::Mapped => format!("re{i}"),
        }
    }

    /// Keyword index of a context token, if it is one.
    fn keyword_index(&self, token: &str) -> Option<usize> {
        token.strip_prefix("kw")?.parse().ok().filter(|&i| i < self.keywords)
    }

    fn reply_index(&self, token: &str) -> Option<usize> {
        let prefix = match self.reply {
            ReplyRule::Echo => "kw",
            ReplyRule::Mapped => "re",
        };
        token.strip_prefix(prefix)?.parse().ok().filter(|&i| i < self.keywords)
    }
}

const ONSETS: [&str; 10] = ["b", "d", "f", "g", "l", "m", "n", "p", "s", "t"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn filler_word(i: usize) -> String {
    let mut s = String::new();
    let mut k = i;
    loop {
        s.push_str(ONSETS[k % ONSETS.len()]);
        k /= ONSETS.len();
        s.push_str(VOWELS[k % VOWELS.len()]);
        k /= VOWELS.len();
        if k == 0 {
            break;
        }
    }
    s
}

struct Gen<'a> {
    cfg: &'a SyntheticConfig,
    rng: ChaCha8Rng,
    fillers: Vec<String>,
}

struct Context {
    utts: Vec<Utterance>,
    target: usize,
    distractors: Vec<usize>,
}

impl Gen<'_> {
    fn filler_utt(&mut self) -> Utterance {
        let (lo, hi) = self.cfg.utt_len;
        let n = self.rng.gen_range(lo..=hi);
        (0..n)
            .map(|_| self.fillers[self.rng.gen_range(0..self.fillers.len())].clone())
            .collect()
    }

    fn plant(&mut self, utt: &mut Utterance, word: String) {
        let pos = self.rng.gen_range(0..utt.len());
        utt[pos] = word;
    }

    fn context(&mut self) -> Context {
        let (lo, hi) = self.cfg.ctx_utts;
        let n = self.rng.gen_range(lo..=hi);
        let target = self.rng.gen_range(0..self.cfg.keywords);
        let mut distractors = Vec::new();
        let mut utts = Vec::with_capacity(n);
        for m in 0..n {
            let mut u = self.filler_utt();
            if m + 1 == n {
                self.plant(&mut u, self.cfg.keyword(target));
            } else if self.rng.gen_bool(self.cfg.distractor_prob) {
                let d = self.other_keyword(target);
                distractors.push(d);
                self.plant(&mut u, self.cfg.keyword(d));
            }
            utts.push(u);
        }
        Context { utts, target, distractors }
    }

    fn other_keyword(&mut self, not: usize) -> usize {
        let k = self.rng.gen_range(0..self.cfg.keywords - 1);
        if k >= not {
            k + 1
        } else {
            k
        }
    }

    fn response(&mut self, keyword: usize) -> Vec<Utterance> {
        let (lo, hi) = self.cfg.resp_utts;
        let n = self.rng.gen_range(lo..=hi);
        let mut utts: Vec<Utterance> = (0..n).map(|_| self.filler_utt()).collect();
        let at = self.rng.gen_range(0..n);
        let word = self.cfg.reply_word(keyword);
        self.plant(&mut utts[at], word);
        utts
    }

    /// Keywords for `n` negatives: distractors first, then random others,
    /// all different from the target.
    fn negative_keywords(&mut self, ctx: &Context, n: usize) -> Vec<usize> {
        let mut out: Vec<usize> = ctx.distractors.clone();
        out.dedup();
        out.shuffle(&mut self.rng);
        out.truncate(n);
        while out.len() < n {
            out.push(self.other_keyword(ctx.target));
        }
        out
    }
}

fn generator(cfg: &SyntheticConfig, seed: u64) -> Result<Gen<'_>> {
    cfg.validate()?;
    Ok(Gen {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(seed),
        fillers: (0..cfg.fillers).map(filler_word).collect(),
    })
}

/// One positive and one negative example per context, in that order.
pub fn generate_pairs(cfg: &SyntheticConfig, contexts: usize, seed: u64) -> Result<Vec<DialogueExample>> {
    let mut g = generator(cfg, seed)?;
    let mut out = Vec::with_capacity(2 * contexts);
    for _ in 0..contexts {
        let ctx = g.context();
        let neg = g.negative_keywords(&ctx, 1)[0];
        let pos = g.response(ctx.target);
        let negr = g.response(neg);
        out.push(DialogueExample {
            context: ctx.utts.clone(),
            response: pos,
            label: 1,
        });
        out.push(DialogueExample {
            context: ctx.utts,
            response: negr,
            label: 0,
        });
    }
    Ok(out)
}

/// Consecutive groups of `candidates` examples per context: one positive
/// and `candidates - 1` negatives, in shuffled order.
pub fn generate_groups(
    cfg: &SyntheticConfig,
    contexts: usize,
    candidates: usize,
    seed: u64,
) -> Result<Vec<DialogueExample>> {
    if candidates < 2 {
        return Err(Error::Config {
            key: "candidates".into(),
            msg: "need at least 2 candidates per context".into(),
        });
    }
    let mut g = generator(cfg, seed)?;
    let mut out = Vec::with_capacity(contexts * candidates);
    for _ in 0..contexts {
        let ctx = g.context();
        let negs = g.negative_keywords(&ctx, candidates - 1);
        let mut group = vec![DialogueExample {
            context: ctx.utts.clone(),
            response: g.response(ctx.target),
            label: 1,
        }];
        for k in negs {
            group.push(DialogueExample {
                context: ctx.utts.clone(),
                response: g.response(k),
                label: 0,
            });
        }
        group.shuffle(&mut g.rng);
        out.extend(group);
    }
    Ok(out)
}

/// Bag-of-words reference scorer: number of response tokens that are the
/// reply word of a keyword in the last context utterance.
pub fn bow_oracle_score(cfg: &SyntheticConfig, ex: &DialogueExample) -> f64 {
    let Some(last) = ex.context.last() else { return 0.0 };
    let keys: Vec<usize> = last.iter().filter_map(|t| cfg.keyword_index(t)).collect();
    ex.response
        .iter()
        .flatten()
        .filter(|t| cfg.reply_index(t).is_some_and(|i| keys.contains(&i)))
        .count() as f64
}
