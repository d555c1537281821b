mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use u2u_autodiff::{Graph, Tensor};
use u2u_imn::config::RunConfig;
use u2u_imn::corpus::{parse_line, serialize_line, DialogueExample, LineFormat, Limits};
use u2u_imn::matcher::{concat_sequences, prior_factor, separate};
use u2u_imn::metrics::{Candidate, ContextRun, RankedRun};

fn token() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9]{0,5}"
}

fn utterances() -> impl Strategy<Value = Vec<Vec<String>>> {
    prop::collection::vec(prop::collection::vec(token(), 1..5), 1..4)
}

fn context_run(n: usize) -> impl Strategy<Value = ContextRun> {
    (
        prop::collection::vec((0u8..4, 0u8..2), n),
        Just((0..n as u64).collect::<Vec<_>>()).prop_shuffle(),
    )
        .prop_map(|(cells, ids)| ContextRun {
            id: "c".into(),
            candidates: cells
                .into_iter()
                .zip(ids)
                .map(|((s, label), id)| Candidate {
                    id,
                    score: f64::from(s) / 4.0,
                    label,
                })
                .collect(),
        })
}

fn ranked_run() -> impl Strategy<Value = RankedRun> {
    (2usize..8)
        .prop_flat_map(|n| prop::collection::vec(context_run(n), 1..6))
        .prop_map(|mut contexts| {
            for (i, c) in contexts.iter_mut().enumerate() {
                c.id = i.to_string();
            }
            RankedRun { contexts }
        })
}

proptest! {
    #[test]
    fn dataset_lines_roundtrip(context in utterances(), response in utterances(), label in 0u8..2) {
        let ex = DialogueExample { context, response, label };
        prop_assert_eq!(parse_line(&serialize_line(&ex), LineFormat::V2, 1).unwrap(), ex);
    }

    #[test]
    fn metrics_ignore_candidate_order(run in ranked_run(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut shuffled = run.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in &mut shuffled.contexts {
            c.candidates.shuffle(&mut rng);
        }
        prop_assert_eq!(run.report().unwrap(), shuffled.report().unwrap());
    }

    #[test]
    fn metrics_are_bounded_and_recall_grows_with_k(run in ranked_run()) {
        let n = run.candidates_per_context().unwrap();
        let mut prev = 0.0;
        for k in 1..=n {
            let r = run.recall_at_k(n, k).unwrap().value;
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!(r >= prev);
            prev = r;
        }
        let judged = run.contexts.iter().any(|c| c.positives() > 0);
        prop_assert_eq!(prev, if judged { 1.0 } else { 0.0 });
        let p1 = run.precision_at_one().value;
        let mrr = run.mean_reciprocal_rank().value;
        prop_assert!(p1 <= mrr && mrr <= 1.0);
        prop_assert!((0.0..=1.0).contains(&run.mean_average_precision().value));
    }

    #[test]
    fn run_files_roundtrip(run in ranked_run()) {
        let back = RankedRun::parse(&run.to_text()).unwrap();
        prop_assert_eq!(back.report().unwrap(), run.report().unwrap());
    }

    #[test]
    fn config_text_roundtrips(
        seed in any::<u64>(),
        hidden in 1usize..64,
        lr in 1e-5f64..1.0,
        dropout in 0.0f64..0.9,
        candidates in 2usize..20,
    ) {
        let mut cfg = RunConfig::desk();
        cfg.seed = seed;
        cfg.train.seed = seed;
        cfg.model.hidden = hidden;
        cfg.train.lr0 = lr;
        cfg.train.dropout = dropout;
        cfg.data.candidates = candidates;
        prop_assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn prior_decreases_with_distance(w in 0.01f64..2.0, b in -0.5f64..0.5, d in 0u32..20) {
        let (near, far) = (prior_factor(w, b, f64::from(d)), prior_factor(w, b, f64::from(d + 1)));
        prop_assert!(near > 0.0 && far > 0.0);
        if w * f64::from(d) + b >= 0.0 {
            prop_assert!(far < near);
        }
    }

    #[test]
    fn separate_inverts_concat(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let limits = Limits { max_word_len: 3, max_utt_len: 4, max_ctx_utts: 3, max_resp_utts: 3 };
        let layout = common::random_layout(&mut rng, limits);
        let (n, t) = (layout.rows(), layout.t);
        let data: Vec<f64> = (0..n * t * 2)
            .map(|i| if (i / 2) % t < layout.utts[i / (2 * t)].len() { i as f64 + 1.0 } else { 0.0 })
            .collect();
        let mut g = Graph::<f64>::new();
        let enc = g.constant(Tensor::from_f64(&[n, t, 2], &data).unwrap());
        let flat = g.reshape(enc, &[n * t, 2]).unwrap();
        let (mut cs, mut rs) = (Vec::new(), Vec::new());
        for b in 0..layout.batch_size() {
            let (c, r) = concat_sequences(&mut g, flat, &layout, b).unwrap();
            cs.push(c);
            rs.push(r);
        }
        let c = g.concat(&cs, 0).unwrap();
        let r = g.concat(&rs, 0).unwrap();
        let c = separate(&mut g, c, &layout, 0..layout.n_ctx_rows).unwrap();
        let r = separate(&mut g, r, &layout, layout.n_ctx_rows..n).unwrap();
        let back = g.concat(&[c, r], 0).unwrap();
        prop_assert_eq!(g.value(back), g.value(enc));
    }
}
