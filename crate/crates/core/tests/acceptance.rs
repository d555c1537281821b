//! Acceptance suite. Each test checks one criterion and prints a single
//! `PASS` or `FAIL` line to stderr (uncaptured) before asserting.

mod common;

use std::io::Write as _;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use u2u_autodiff::{Graph, Tensor};
use u2u_imn::config::RunConfig;
use u2u_imn::corpus::{make_batch, DialogueExample, Limits, Vocabulary};
use u2u_imn::encoder;
use u2u_imn::matcher::{self, concat_sequences, prior_factor, separate, MatchConfig};
use u2u_imn::metrics::{Candidate, ContextRun, RankedRun};
use u2u_imn::model::{Model, Variant};
use u2u_imn::nn::Dropout;
use u2u_imn::params::{Checkpoint, Params};
use u2u_imn::run::{ablate, evaluate, train_model};
use u2u_imn::synthetic::{bow_oracle_score, generate_groups, generate_pairs, SyntheticConfig};
use u2u_imn::train::{accuracy, learning_rate, score_examples, shape_all, train, TrainConfig};

fn verdict(name: &str, start: Instant, result: Result<String, String>) {
    let secs = start.elapsed().as_secs_f64();
    let line = match &result {
        Ok(detail) => format!("PASS {name}: {detail} ({secs:.1}s)"),
        Err(detail) => format!("FAIL {name}: {detail} ({secs:.1}s)"),
    };
    let _ = writeln!(std::io::stderr(), "{line}");
    if let Err(detail) = result {
        panic!("{name}: {detail}");
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    if start.elapsed() < limit {
        Ok(())
    } else {
        Err(format!("took {:.1}s, limit {}s", start.elapsed().as_secs_f64(), limit.as_secs()))
    }
}

/// The multi-utterance keyword corpus: `(train, test)`.
fn keyword_corpus() -> (SyntheticConfig, Vec<DialogueExample>, Vec<DialogueExample>) {
    let syn = SyntheticConfig::default();
    let train = generate_groups(&syn, 2000, 5, 1).unwrap();
    let test = generate_groups(&syn, 500, 10, 2).unwrap();
    (syn, train, test)
}

fn mean_log_loss(scores: &[f64], labels: &[u8]) -> f64 {
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &l)| if l == 1 { -s.ln() } else { -(1.0 - s).ln() })
        .sum();
    total / scores.len() as f64
}

#[test]
fn c1_gradient_suite() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst_overall: f64 = 0.0;
    for (name, block) in common::gradient_blocks() {
        let (worst, failed) = common::run_block(block);
        worst_overall = worst_overall.max(worst);
        if !failed.is_empty() {
            failures.push(format!("{name} seeds {failed:?} (worst {worst:e})"));
        }
    }
    let result = if failures.is_empty() {
        within(start, Duration::from_secs(120)).map(|()| {
            format!(
                "8 blocks x {} seeds, worst rel error {worst_overall:.2e} < {:e}",
                common::SEEDS,
                common::TOLERANCE
            )
        })
    } else {
        Err(failures.join("; "))
    };
    verdict("gradient suite", start, result);
}

#[test]
fn c2_overfit() {
    let start = Instant::now();
    let syn = SyntheticConfig::default();
    let data = generate_pairs(&syn, 32, 11).unwrap();
    assert_eq!(data.len(), 64);
    let cfg = RunConfig::desk();
    let vocab = Vocabulary::build(&data, 1);
    let model = Model::new(cfg.model.clone()).unwrap();
    let labels: Vec<u8> = data.iter().map(|e| e.label).collect();
    let shaped = shape_all(&model, &data);
    let measure = |params: &Params<f32>| {
        let scores = score_examples(&model, params, &vocab, &shaped, 64).unwrap();
        (mean_log_loss(&scores, &labels), accuracy(&scores, &labels))
    };

    let mut state = Checkpoint {
        params: model.init_params(&vocab, None, 1).unwrap(),
        ..Default::default()
    };
    let (initial_loss, _) = measure(&state.params);
    let mut after_first = f64::NAN;
    let mut reached = None;
    let mut acc = 0.0;
    for epoch in 1..=200 {
        let tc = TrainConfig {
            epochs: 1,
            seed: epoch,
            ..cfg.train.clone()
        };
        state = train(&model, &tc, &vocab, &data, None, state, &mut |_| Ok(())).unwrap().last;
        let (loss, a) = measure(&state.params);
        acc = a;
        if epoch == 1 {
            after_first = loss;
        }
        if acc >= 0.95 {
            reached = Some(epoch);
            break;
        }
    }
    let result = if !(after_first < initial_loss) {
        Err(format!("loss after epoch 1 {after_first:.5} not below initial {initial_loss:.5}"))
    } else if let Some(epoch) = reached {
        within(start, Duration::from_secs(300)).map(|()| {
            format!("accuracy {acc:.3} at epoch {epoch}; loss {initial_loss:.4} -> {after_first:.4} after epoch 1")
        })
    } else {
        Err(format!("accuracy {acc:.3} after 200 epochs"))
    };
    verdict("overfit", start, result);
}

#[test]
fn c3_retrieval() {
    let start = Instant::now();
    let (syn, train_data, test) = keyword_corpus();
    let labels: Vec<u8> = test.iter().map(|e| e.label).collect();
    let oracle: Vec<f64> = test.iter().map(|e| bow_oracle_score(&syn, e)).collect();
    let oracle_r1 = RankedRun::from_groups(&oracle, &labels, 10).unwrap().recall_at_k(10, 1).unwrap().value;
    let multi = test.iter().filter(|e| e.response.len() > 1).count();

    let cfg = RunConfig::desk();
    let vocab = Vocabulary::build(&train_data, 1);
    let (model, out) = train_model(&cfg, Variant::Full, &vocab, None, &train_data, None, None, &mut |_| Ok(())).unwrap();
    let run = evaluate(&model, &out.last.params, &vocab, &test, 10).unwrap();
    let r1 = run.recall_at_k(10, 1).unwrap().value;

    let result = if oracle_r1 < 0.99 {
        Err(format!("bag-of-words oracle R10@1 {oracle_r1:.3} < 0.99"))
    } else if multi == 0 {
        Err("no multi-utterance responses in the test set".into())
    } else if r1 < 0.90 {
        Err(format!("R10@1 {r1:.3} < 0.90 (oracle {oracle_r1:.3})"))
    } else {
        within(start, Duration::from_secs(900))
            .map(|()| format!("R10@1 {r1:.3} >= 0.90, oracle {oracle_r1:.3}, {multi}/{} multi-utterance", test.len()))
    };
    verdict("retrieval", start, result);
}

#[test]
fn c4_u2u_degeneracy() {
    let start = Instant::now();
    let syn = SyntheticConfig {
        resp_utts: (1, 1),
        ..Default::default()
    };
    let data = generate_groups(&syn, 40, 10, 4).unwrap();
    let vocab = Vocabulary::build(&data, 1);
    let full = Model::new(RunConfig::desk().model).unwrap();
    let u2r = Model::new(Variant::U2R.apply(&full.config)).unwrap();
    let shaped = shape_all(&full, &data);
    let mut worst_gap: f64 = 0.0;
    let mut bad_weight = None;
    for seed in 1..=3 {
        let params = full.init_params(&vocab, None, seed).unwrap();
        for chunk in shaped.chunks(50) {
            let batch = make_batch(chunk, &vocab).unwrap();
            let mut g = Graph::<f32>::new();
            let p = params.bind(&mut g);
            let f = full.forward(&mut g, &p, &batch, &mut Dropout::off()).unwrap();
            let w = g.value(f.agg.resp_weights.unwrap()).to_f64_vec();
            if let Some(&x) = w.iter().find(|&&x| x != 1.0) {
                bad_weight = Some(x);
            }
            let a = full.score(&params, &batch).unwrap();
            let b = u2r.score(&params, &batch).unwrap();
            for (x, y) in a.iter().zip(&b) {
                worst_gap = worst_gap.max((x - y).abs());
            }
        }
    }
    let result = match bad_weight {
        Some(x) => Err(format!("response weight {x} != 1.0")),
        None if worst_gap > 1e-6 => Err(format!("full vs u2r score gap {worst_gap:e} > 1e-6")),
        None => Ok(format!("w = 1.0 on {} pairs x 3 seeds, max score gap {worst_gap:e}", data.len())),
    };
    verdict("u2u degeneracy", start, result);
}

#[test]
fn c5_ablation_direction() {
    let start = Instant::now();
    let (_, train_data, test) = keyword_corpus();
    let cfg = RunConfig::desk();
    let vocab = Vocabulary::build(&train_data, 1);
    let variants = [
        Variant::Full,
        Variant::NoPrior,
        Variant::NoGlobal,
        Variant::NoC2R,
        Variant::NoR2C,
        Variant::NoC2RR2C,
    ];
    let rows = ablate(&cfg, &variants, &[1, 2, 3], &vocab, None, &train_data, None, &test, &mut |v, s, _, r| {
        let _ = writeln!(std::io::stderr(), "  ablation {v} seed {s}: R10@1 {r:.3}");
        Ok(())
    })
    .unwrap();
    let mean = |v: Variant| rows.iter().find(|r| r.variant == v).unwrap().mean();
    let full = mean(Variant::Full);
    let mut problems = Vec::new();
    for v in [Variant::NoPrior, Variant::NoGlobal, Variant::NoC2R, Variant::NoR2C] {
        if full < mean(v) {
            problems.push(format!("full {full:.3} < {v} {:.3}", mean(v)));
        }
    }
    let both = mean(Variant::NoC2RR2C);
    for r in &rows {
        if r.variant != Variant::NoC2RR2C && r.mean() < both {
            problems.push(format!("{} {:.3} below -c2r&r2c {both:.3}", r.variant, r.mean()));
        }
    }
    let summary: Vec<String> = rows.iter().map(|r| format!("{} {:.3}", r.variant, r.mean())).collect();
    let result = if problems.is_empty() {
        Ok(summary.join(", "))
    } else {
        Err(format!("{} [{}]", problems.join("; "), summary.join(", ")))
    };
    verdict("ablation direction", start, result);
}

/// Ranks by explicit pairwise comparison: candidate `i` is preceded by
/// every `j` with a higher score, or an equal score and a lower id.
fn oracle_ranks(cands: &[Candidate]) -> Vec<usize> {
    cands
        .iter()
        .map(|a| {
            1 + cands
                .iter()
                .filter(|b| b.score > a.score || (b.score == a.score && b.id < a.id))
                .count()
        })
        .collect()
}

struct OracleMetrics {
    recall: Vec<((usize, usize), f64)>,
    map: f64,
    mrr: f64,
    p1: f64,
}

fn oracle_metrics(run: &RankedRun, cutoffs: &[(usize, usize)]) -> OracleMetrics {
    let judged: Vec<&ContextRun> = run.contexts.iter().filter(|c| c.candidates.iter().any(|x| x.label == 1)).collect();
    let mean = |f: &dyn Fn(&ContextRun) -> f64| {
        if judged.is_empty() {
            return 0.0;
        }
        judged.iter().map(|c| f(c)).sum::<f64>() / judged.len() as f64
    };
    let positive_ranks = |cands: &[Candidate]| {
        let ranks = oracle_ranks(cands);
        let mut pos: Vec<usize> = cands.iter().zip(&ranks).filter(|(c, _)| c.label == 1).map(|(_, &r)| r).collect();
        pos.sort_unstable();
        pos
    };
    // R_n@k judges each context on its first n candidates by id, so a
    // context counts only if one of those is positive.
    let recall = cutoffs
        .iter()
        .map(|&(n, k)| {
            let per_context: Vec<f64> = run
                .contexts
                .iter()
                .filter_map(|c| {
                    let mut by_id = c.candidates.clone();
                    by_id.sort_by_key(|x| x.id);
                    by_id.truncate(n);
                    let pos = positive_ranks(&by_id);
                    (!pos.is_empty()).then(|| pos.iter().filter(|&&r| r <= k).count() as f64 / pos.len() as f64)
                })
                .collect();
            let v = if per_context.is_empty() { 0.0 } else { per_context.iter().sum::<f64>() / per_context.len() as f64 };
            ((n, k), v)
        })
        .collect();
    let map = mean(&|c| {
        let pos = positive_ranks(&c.candidates);
        pos.iter().enumerate().map(|(i, &r)| (i + 1) as f64 / r as f64).sum::<f64>() / pos.len() as f64
    });
    let mrr = mean(&|c| 1.0 / positive_ranks(&c.candidates)[0] as f64);
    let p1 = mean(&|c| if positive_ranks(&c.candidates)[0] == 1 { 1.0 } else { 0.0 });
    OracleMetrics { recall, map, mrr, p1 }
}

fn random_run(rng: &mut ChaCha8Rng) -> RankedRun {
    let n = rng.gen_range(2..=10);
    let contexts = (0..rng.gen_range(1..=6))
        .map(|i| {
            let mut ids: Vec<u64> = (0..n as u64).collect();
            ids.shuffle(rng);
            let positive_rate = rng.gen_range(0.0..0.6);
            ContextRun {
                id: i.to_string(),
                candidates: ids
                    .into_iter()
                    .map(|id| Candidate {
                        id,
                        // few distinct values so ties are common
                        score: f64::from(rng.gen_range(0..4u8)) * 0.25,
                        label: u8::from(rng.gen_bool(positive_rate)),
                    })
                    .collect(),
            }
        })
        .collect();
    RankedRun { contexts }
}

#[test]
fn c6_metric_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = Vec::new();
    let (mut ties, mut multi) = (0, 0);
    for trial in 0..1000 {
        let run = random_run(&mut rng);
        for c in &run.contexts {
            let scores: Vec<f64> = c.candidates.iter().map(|x| x.score).collect();
            ties += usize::from(scores.iter().enumerate().any(|(i, s)| scores[..i].contains(s)));
            multi += usize::from(c.positives() > 1);
        }
        let n = run.contexts[0].candidates.len();
        let cutoffs: Vec<(usize, usize)> = (2..=n).flat_map(|m| (1..=m).map(move |k| (m, k))).collect();
        let o = oracle_metrics(&run, &cutoffs);
        for &((m, k), want) in &o.recall {
            let got = run.recall_at_k(m, k).unwrap().value;
            if got != want {
                mismatches.push(format!("trial {trial} R{m}@{k} {got} vs {want}"));
            }
        }
        for (name, got, want) in [
            ("MAP", run.mean_average_precision().value, o.map),
            ("MRR", run.mean_reciprocal_rank().value, o.mrr),
            ("P@1", run.precision_at_one().value, o.p1),
        ] {
            if got != want {
                mismatches.push(format!("trial {trial} {name} {got} vs {want}"));
            }
        }
    }
    let result = if mismatches.is_empty() {
        Ok(format!("1000 runs exact; {ties} contexts with ties, {multi} with several positives"))
    } else {
        Err(format!("{} mismatches, first: {}", mismatches.len(), mismatches[0]))
    };
    verdict("metric oracle", start, result);
}

fn separate_concat_identity(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let limits = Limits {
        max_word_len: 4,
        max_utt_len: 5,
        max_ctx_utts: 4,
        max_resp_utts: 3,
    };
    let layout = common::random_layout(&mut rng, limits);
    let (n, t, w) = (layout.rows(), layout.t, 3);
    let data: Vec<f64> = (0..n * t * w)
        .map(|i| {
            let (row, pos) = (i / (t * w), (i / w) % t);
            if pos < layout.utts[row].len() {
                rng.gen_range(-1.0..1.0)
            } else {
                0.0
            }
        })
        .collect();
    let mut g = Graph::<f64>::new();
    let enc = g.constant(Tensor::from_f64(&[n, t, w], &data).unwrap());
    let flat = g.reshape(enc, &[n * t, w]).unwrap();
    let (mut cs, mut rs) = (Vec::new(), Vec::new());
    for b in 0..layout.batch_size() {
        let (c, r) = concat_sequences(&mut g, flat, &layout, b).unwrap();
        cs.push(c);
        rs.push(r);
    }
    let all_c = g.concat(&cs, 0).unwrap();
    let all_r = g.concat(&rs, 0).unwrap();
    let c = separate(&mut g, all_c, &layout, 0..layout.n_ctx_rows).unwrap();
    let r = separate(&mut g, all_r, &layout, layout.n_ctx_rows..n).unwrap();
    let back = g.concat(&[c, r], 0).unwrap();
    if g.value(back) == g.value(enc) {
        Ok(())
    } else {
        Err(format!("seed {seed}: separate(concat(x)) != x"))
    }
}

/// Worst row-sum error and padding mass of masked self-attention and of
/// both alignment directions.
fn attention_rows(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::<f32>::new();
    matcher::init_params(&mut params);
    for name in [encoder::PRIOR_W, encoder::PRIOR_B, matcher::PRIOR_W, matcher::PRIOR_B] {
        params.insert(name, Tensor::vector(vec![rng.gen_range(-1.0..1.0)]), true);
    }
    let mut g = Graph::<f64>::new();
    let p = params.cast::<f64>().bind(&mut g);
    let (n, t) = (rng.gen_range(1..=4), rng.gen_range(1..=6));
    let lengths: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=t)).collect();
    let u: Vec<f64> = (0..n * t * 4).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let u = g.constant(Tensor::from_f64(&[n, t, 4], &u).unwrap());
    let (_, w) = encoder::gaussian_self_attention(&mut g, &p, u, &lengths).unwrap();
    let w = g.value(w).to_f64_vec();
    let (mut sum_err, mut pad_mass): (f64, f64) = (0.0, 0.0);
    for (row, chunk) in w.chunks(t).enumerate() {
        let len = lengths[row / t];
        sum_err = sum_err.max((chunk.iter().sum::<f64>() - 1.0).abs());
        pad_mass = pad_mass.max(chunk[len..].iter().map(|x| x.abs()).sum());
    }

    let (lc, lr) = (rng.gen_range(1..=6), rng.gen_range(1..=5));
    let d: Vec<f64> = (0..lc * lr).map(|_| rng.gen_range(0..=4) as f64).collect();
    let c: Vec<f64> = (0..lc * 3).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let r: Vec<f64> = (0..lr * 3).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let c = g.constant(Tensor::from_f64(&[lc, 3], &c).unwrap());
    let r = g.constant(Tensor::from_f64(&[lr, 3], &r).unwrap());
    let a = matcher::align_bidirectional(&mut g, &p, c, r, &d, &MatchConfig::default()).unwrap();
    let c2r = g.value(a.c2r.unwrap()).to_f64_vec();
    let r2c = g.value(a.r2c.unwrap()).to_f64_vec();
    for i in 0..lc {
        sum_err = sum_err.max((c2r[i * lr..(i + 1) * lr].iter().sum::<f64>() - 1.0).abs());
    }
    for j in 0..lr {
        sum_err = sum_err.max(((0..lc).map(|i| r2c[i * lr + j]).sum::<f64>() - 1.0).abs());
    }
    (sum_err, pad_mass)
}

#[test]
fn c7_structural_invariants() {
    let start = Instant::now();
    let mut problems = Vec::new();

    for seed in 0..100 {
        if let Err(e) = separate_concat_identity(seed) {
            problems.push(e);
        }
    }

    let (mut sum_err, mut pad_mass): (f64, f64) = (0.0, 0.0);
    for seed in 0..100 {
        let (s, p) = attention_rows(seed);
        sum_err = sum_err.max(s);
        pad_mass = pad_mass.max(p);
    }
    if sum_err > 1e-6 || pad_mass != 0.0 {
        problems.push(format!("attention rows: sum error {sum_err:e}, padding mass {pad_mass:e}"));
    }

    let syn = SyntheticConfig::default();
    let data = generate_pairs(&syn, 40, 7).unwrap();
    let valid = generate_groups(&syn, 10, 5, 8).unwrap();
    let mut cfg = RunConfig::desk();
    cfg.train.epochs = 2;
    cfg.data.candidates = 5;
    let vocab = Vocabulary::build(data.iter().chain(&valid), 1);
    let run = || train_model(&cfg, Variant::Full, &vocab, None, &data, Some(&valid), None, &mut |_| Ok(())).unwrap();
    let (model, a) = run();
    let (_, b) = run();
    if a.log != b.log || a.last.params != b.last.params {
        problems.push("same-seed runs differ".into());
    }
    let init = model.init_params(&vocab, None, cfg.seed).unwrap();
    let mut frozen = 0;
    for (name, p) in init.iter().filter(|(_, p)| !p.trainable) {
        frozen += 1;
        let after = &a.last.params.get(name).unwrap().value;
        if after.data() != p.value.data() {
            problems.push(format!("frozen table {name} changed"));
        }
    }
    if frozen == 0 {
        problems.push("no frozen tables".into());
    }

    let result = if problems.is_empty() {
        Ok(format!(
            "100 separate/concat batches; attention sum error {sum_err:.1e}, no padding mass; {frozen} frozen tables unchanged; {} identical log records",
            a.log.len()
        ))
    } else {
        Err(problems.join("; "))
    };
    verdict("structural invariants", start, result);
}

#[test]
fn c8_schedule_and_prior() {
    let start = Instant::now();
    let cfg = TrainConfig::default();
    let lr5 = learning_rate(&cfg, 5000);
    let lr10 = learning_rate(&cfg, 10000);
    let phi = prior_factor(0.536, -0.00001, 1.0);
    let want = (-0.53601f64).exp();
    let result = if (lr5 - 0.00096).abs() > 1e-15 || (lr10 - 0.0009216).abs() > 1e-15 {
        Err(format!("learning_rate(5000) = {lr5}, learning_rate(10000) = {lr10}"))
    } else if (phi - want).abs() > 1e-9 {
        Err(format!("phi(1) = {phi}, expected {want}"))
    } else {
        Ok(format!("lr(5000) = {lr5}, lr(10000) = {lr10}, phi(1) = {phi:.12}"))
    };
    verdict("schedule and prior", start, result);
}
