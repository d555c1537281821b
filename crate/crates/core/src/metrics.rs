//! Ranking metrics over scored candidate lists.
//!
//! Candidates are ranked by descending score, ties broken by ascending
//! candidate id. Contexts without any positive candidate are excluded from
//! every metric and counted in [`Metric::skipped`].

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: u64,
    pub score: f64,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextRun {
    pub id: String,
    pub candidates: Vec<Candidate>,
}

impl ContextRun {
    /// Labels in rank order.
    pub fn ranked_labels(&self) -> Vec<u8> {
        let mut c = self.candidates.clone();
        c.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
        c.into_iter().map(|c| c.label).collect()
    }

    pub fn positives(&self) -> usize {
        self.candidates.iter().filter(|c| c.label == 1).count()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedRun {
    pub contexts: Vec<ContextRun>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    /// Contexts with no positive candidate.
    pub skipped: usize,
}

impl RankedRun {
    /// Groups consecutive blocks of `n` scored examples into contexts with
    /// candidate ids `0..n`.
    pub fn from_groups(scores: &[f64], labels: &[u8], n: usize) -> Result<Self> {
        if n == 0 || scores.len() != labels.len() || !scores.len().is_multiple_of(n) {
            return Err(Error::Data(format!(
                "{} scores and {} labels do not form groups of {n}",
                scores.len(),
                labels.len()
            )));
        }
        let contexts = scores
            .chunks(n)
            .zip(labels.chunks(n))
            .enumerate()
            .map(|(i, (s, l))| ContextRun {
                id: i.to_string(),
                candidates: s
                    .iter()
                    .zip(l)
                    .enumerate()
                    .map(|(j, (&score, &label))| Candidate {
                        id: j as u64,
                        score,
                        label,
                    })
                    .collect(),
            })
            .collect();
        Ok(RankedRun { contexts })
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.contexts {
            if c.candidates.is_empty() {
                return Err(Error::Data(format!("context `{}` has no candidates", c.id)));
            }
            if let Some(x) = c.candidates.iter().find(|x| !x.score.is_finite()) {
                return Err(Error::Data(format!(
                    "context `{}` candidate {} has non-finite score",
                    c.id, x.id
                )));
            }
            if c.candidates.iter().any(|x| x.label > 1) {
                return Err(Error::Data(format!("context `{}` has a label outside 0/1", c.id)));
            }
        }
        Ok(())
    }

    /// Candidate count when it is the same for every context.
    pub fn candidates_per_context(&self) -> Option<usize> {
        let n = self.contexts.first()?.candidates.len();
        self.contexts.iter().all(|c| c.candidates.len() == n).then_some(n)
    }

    fn mean_over<F: Fn(&ContextRun) -> f64>(&self, f: F) -> Metric {
        let mut sum = 0.0;
        let mut used = 0usize;
        let mut skipped = 0;
        for c in &self.contexts {
            if c.positives() == 0 {
                skipped += 1;
            } else {
                sum += f(c);
                used += 1;
            }
        }
        Metric {
            value: if used == 0 { 0.0 } else { sum / used as f64 },
            skipped,
        }
    }

    /// Recall at `k` among the first `n` candidates (by id) of each
    /// context: positives in the top `k` over positives present. A context
    /// with no positive among those `n` is skipped.
    pub fn recall_at_k(&self, n: usize, k: usize) -> Result<Metric> {
        if let Some(c) = self.contexts.iter().find(|c| c.candidates.len() < n) {
            return Err(Error::Data(format!(
                "context `{}` has {} candidates, need {n}",
                c.id,
                c.candidates.len()
            )));
        }
        let cut = RankedRun {
            contexts: self
                .contexts
                .iter()
                .map(|c| {
                    let mut cands = c.candidates.clone();
                    cands.sort_by_key(|x| x.id);
                    cands.truncate(n);
                    ContextRun {
                        id: c.id.clone(),
                        candidates: cands,
                    }
                })
                .collect(),
        };
        Ok(cut.mean_over(|c| {
            let hits = c.ranked_labels().iter().take(k).filter(|&&l| l == 1).count();
            hits as f64 / c.positives() as f64
        }))
    }

    pub fn mean_average_precision(&self) -> Metric {
        self.mean_over(|c| {
            let mut hits = 0usize;
            let mut sum = 0.0;
            for (r, &l) in c.ranked_labels().iter().enumerate() {
                if l == 1 {
                    hits += 1;
                    sum += hits as f64 / (r + 1) as f64;
                }
            }
            sum / hits as f64
        })
    }

    pub fn mean_reciprocal_rank(&self) -> Metric {
        self.mean_over(|c| {
            let r = c.ranked_labels().iter().position(|&l| l == 1).expect("has positive");
            1.0 / (r + 1) as f64
        })
    }

    pub fn precision_at_one(&self) -> Metric {
        self.mean_over(|c| f64::from(c.ranked_labels()[0]))
    }

    pub fn report(&self) -> Result<Report> {
        self.validate()?;
        let n = self
            .candidates_per_context()
            .ok_or_else(|| Error::Data("contexts have different candidate counts".into()))?;
        let mut recall = Vec::new();
        if n > 2 {
            recall.push((2, 1, self.recall_at_k(2, 1)?.value));
        }
        for k in [1, 2, 5] {
            if k < n {
                recall.push((n, k, self.recall_at_k(n, k)?.value));
            }
        }
        let map = self.mean_average_precision();
        Ok(Report {
            contexts: self.contexts.len(),
            candidates: n,
            skipped: map.skipped,
            recall,
            map: map.value,
            mrr: self.mean_reciprocal_rank().value,
            p_at_1: self.precision_at_one().value,
        })
    }

    // -----------------------------------------------------------------------

    /// `context_id<TAB>candidate_id<TAB>score<TAB>label`, one candidate per
    /// line, contexts in order of first appearance. Lines starting with
    /// `#` are comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut order: Vec<ContextRun> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::parse(line_no, format!("expected 4 fields, found {}", f.len())));
            }
            let id = f[1]
                .parse::<u64>()
                .map_err(|_| Error::parse(line_no, format!("bad candidate id `{}`", f[1])))?;
            let score = f[2]
                .parse::<f64>()
                .ok()
                .filter(|s| s.is_finite())
                .ok_or_else(|| Error::parse(line_no, format!("bad score `{}`", f[2])))?;
            let label = match f[3] {
                "0" => 0,
                "1" => 1,
                other => return Err(Error::parse(line_no, format!("bad label `{other}`"))),
            };
            let slot = *index.entry(f[0].to_string()).or_insert_with(|| {
                order.push(ContextRun {
                    id: f[0].to_string(),
                    candidates: Vec::new(),
                });
                order.len() - 1
            });
            let ctx = &mut order[slot];
            if ctx.candidates.iter().any(|c| c.id == id) {
                return Err(Error::parse(line_no, format!("duplicate candidate {id} in context `{}`", f[0])));
            }
            ctx.candidates.push(Candidate { id, score, label });
        }
        Ok(RankedRun { contexts: order })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.contexts {
            for x in &c.candidates {
                let _ = writeln!(s, "{}\t{}\t{}\t{}", c.id, x.id, x.score, x.label);
            }
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
}

/// Standard metric set for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub contexts: usize,
    /// Candidates per context.
    pub candidates: usize,
    pub skipped: usize,
    /// `(n, k, R_n@k)`.
    pub recall: Vec<(usize, usize, f64)>,
    pub map: f64,
    pub mrr: f64,
    pub p_at_1: f64,
}

impl Report {
    pub fn recall(&self, n: usize, k: usize) -> Option<f64> {
        self.recall.iter().find(|r| r.0 == n && r.1 == k).map(|r| r.2)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "contexts {}  candidates/context {}  skipped (no positive) {}",
            self.contexts, self.candidates, self.skipped
        );
        for (n, k, v) in &self.recall {
            let _ = writeln!(s, "{:<10} {v:.4}", format!("R{n}@{k}"));
        }
        let _ = writeln!(s, "{:<10} {:.4}", "MAP", self.map);
        let _ = writeln!(s, "{:<10} {:.4}", "MRR", self.mrr);
        let _ = writeln!(s, "{:<10} {:.4}", "P@1", self.p_at_1);
        s
    }

    /// One `metric<TAB>value` record per line with full precision.
    pub fn to_records(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "contexts\t{}", self.contexts);
        let _ = writeln!(s, "candidates\t{}", self.candidates);
        let _ = writeln!(s, "skipped\t{}", self.skipped);
        for (n, k, v) in &self.recall {
            let _ = writeln!(s, "R{n}@{k}\t{v}");
        }
        let _ = writeln!(s, "MAP\t{}", self.map);
        let _ = writeln!(s, "MRR\t{}", self.mrr);
        let _ = writeln!(s, "P@1\t{}", self.p_at_1);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(labels_by_score: &[(f64, u8)]) -> ContextRun {
        ContextRun {
            id: "c".into(),
            candidates: labels_by_score
                .iter()
                .enumerate()
                .map(|(i, &(score, label))| Candidate { id: i as u64, score, label })
                .collect(),
        }
    }

    fn run(cs: Vec<ContextRun>) -> RankedRun {
        RankedRun { contexts: cs }
    }

    fn ranked(labels: &[u8]) -> ContextRun {
        let n = labels.len();
        ctx(&labels.iter().enumerate().map(|(i, &l)| ((n - i) as f64, l)).collect::<Vec<_>>())
    }

    #[test]
    fn recall_examples() {
        let mut l = vec![0u8; 10];
        l[0] = 1;
        assert_eq!(run(vec![ranked(&l)]).recall_at_k(10, 1).unwrap().value, 1.0);
        let mut l = vec![0u8; 10];
        l[2] = 1;
        let r = run(vec![ranked(&l)]);
        assert_eq!(r.recall_at_k(10, 2).unwrap().value, 0.0);
        assert_eq!(r.recall_at_k(10, 5).unwrap().value, 1.0);
        let mut l = vec![0u8; 10];
        l[0] = 1;
        l[3] = 1;
        assert_eq!(run(vec![ranked(&l)]).recall_at_k(10, 2).unwrap().value, 0.5);
    }

    #[test]
    fn average_precision_examples() {
        let ap = run(vec![ranked(&[1, 0, 1, 0])]).mean_average_precision().value;
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(run(vec![ranked(&[1, 1, 0])]).mean_average_precision().value, 1.0);
        assert_eq!(run(vec![ranked(&[0, 1, 0])]).mean_average_precision().value, 0.5);
    }

    #[test]
    fn reciprocal_rank_and_precision() {
        assert_eq!(run(vec![ranked(&[0, 1])]).mean_reciprocal_rank().value, 0.5);
        let two = run(vec![ranked(&[1, 0, 0, 0]), ranked(&[0, 0, 0, 1])]);
        assert_eq!(two.mean_reciprocal_rank().value, 0.625);
        let mut cs: Vec<ContextRun> = (0..3).map(|_| ranked(&[1, 0])).collect();
        cs.extend((0..7).map(|_| ranked(&[0, 1])));
        assert!((run(cs).precision_at_one().value - 0.3).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_candidate_id() {
        let c = ctx(&[(0.5, 0), (0.5, 1), (0.9, 0)]);
        assert_eq!(c.ranked_labels(), vec![0, 0, 1]);
    }

    #[test]
    fn contexts_without_positives_are_skipped() {
        let r = run(vec![ranked(&[0, 0]), ranked(&[1, 0])]);
        let m = r.mean_reciprocal_rank();
        assert_eq!((m.value, m.skipped), (1.0, 1));
    }

    #[test]
    fn run_file_roundtrip_and_errors() {
        let r = RankedRun::from_groups(&[0.1, 0.9, 0.25, 0.5], &[1, 0, 0, 1], 2).unwrap();
        let back = RankedRun::parse(&r.to_text()).unwrap();
        assert_eq!(back, r);
        assert!(RankedRun::parse("a\t1\t0.5\n").unwrap_err().to_string().starts_with("line 1"));
        assert!(RankedRun::parse("a\t1\tnan\t1\n").is_err());
        assert!(RankedRun::parse("a\t1\t0.5\t1\na\t1\t0.2\t0\n").unwrap_err().to_string().starts_with("line 2"));
    }

    #[test]
    fn report_lists_standard_cutoffs() {
        let scores: Vec<f64> = (0..20).map(|i| (i % 10) as f64).collect();
        let labels: Vec<u8> = (0..20).map(|i| u8::from(i % 10 == 9)).collect();
        let rep = RankedRun::from_groups(&scores, &labels, 10).unwrap().report().unwrap();
        assert_eq!(rep.candidates, 10);
        assert_eq!(rep.recall(10, 1), Some(1.0));
        assert_eq!(rep.recall(2, 1), Some(0.0));
        assert!(rep.to_records().contains("R10@5\t1"));
    }
}
