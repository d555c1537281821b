//! The full scorer: word representation, encoder, matcher, aggregator and
//! MLP, plus ablation variants.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use u2u_autodiff::{Graph, Real, Tensor, Var};

use crate::aggregator::{self, AggOutput, ResponseAggregation};
use crate::corpus::{Limits, PaddedBatch, Vocabulary};
use crate::encoder;
use crate::error::{Error, Result};
use crate::layout::UttLayout;
use crate::matcher::{self, MatchConfig, MatchMode};
use crate::nn::{glorot, Dropout};
use crate::params::{Bound, Params};
use crate::wordrep::{self, EmbeddingConfig};

pub const MLP_W1: &str = "mlp.w1";
pub const MLP_B1: &str = "mlp.b1";
pub const MLP_W2: &str = "mlp.w2";
pub const MLP_B2: &str = "mlp.b2";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub limits: Limits,
    pub embedding: EmbeddingConfig,
    /// LSTM hidden size per direction.
    pub hidden: usize,
    pub mlp_hidden: usize,
    pub matching: MatchConfig,
    pub response_aggregation: ResponseAggregation,
    /// Join all response utterances into one before encoding.
    pub join_response: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            limits: Limits::default(),
            embedding: EmbeddingConfig::default(),
            hidden: 200,
            mlp_hidden: 256,
            matching: MatchConfig::default(),
            response_aggregation: ResponseAggregation::Attention,
            join_response: false,
        }
    }
}

impl ModelConfig {
    /// Small dimensions for CPU-only experiments on synthetic data.
    pub fn desk() -> Self {
        ModelConfig {
            limits: Limits {
                max_word_len: 8,
                max_utt_len: 12,
                max_ctx_utts: 4,
                max_resp_utts: 3,
            },
            embedding: EmbeddingConfig {
                pretrained_dim: 24,
                task_dim: 8,
                char_embed_dim: 8,
                char_windows: vec![3, 4, 5],
                char_filters: 8,
                use_chars: true,
            },
            hidden: 16,
            mlp_hidden: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.limits.validate()?;
        self.embedding.validate(self.limits.max_word_len)?;
        for (key, v) in [("hidden", self.hidden), ("mlp_hidden", self.mlp_hidden)] {
            if v == 0 {
                return Err(Error::Config {
                    key: key.into(),
                    msg: "must be positive".into(),
                });
            }
        }
        Ok(())
    }

    pub fn ctx_width(&self) -> usize {
        self.matching.ctx_width(2 * self.hidden)
    }

    pub fn resp_width(&self) -> usize {
        self.matching.resp_width(2 * self.hidden)
    }
}

/// Named ablations of the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoC2R,
    NoR2C,
    NoC2RR2C,
    NoGlobal,
    NoPrior,
    U2R,
    RnnAggregation,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::NoC2R,
        Variant::NoR2C,
        Variant::NoC2RR2C,
        Variant::NoGlobal,
        Variant::NoPrior,
        Variant::U2R,
        Variant::RnnAggregation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoC2R => "-c2r",
            Variant::NoR2C => "-r2c",
            Variant::NoC2RR2C => "-c2r&r2c",
            Variant::NoGlobal => "-global",
            Variant::NoPrior => "-prior",
            Variant::U2R => "u2r",
            Variant::RnnAggregation => "rnn",
        }
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoC2R => c.matching.c2r = false,
            Variant::NoR2C => c.matching.r2c = false,
            Variant::NoC2RR2C => {
                c.matching.c2r = false;
                c.matching.r2c = false;
            }
            Variant::NoGlobal => c.matching.mode = MatchMode::Local,
            Variant::NoPrior => c.matching.use_distance_prior = false,
            Variant::U2R => c.join_response = true,
            Variant::RnnAggregation => c.response_aggregation = ResponseAggregation::Rnn,
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config {
                key: "variant".into(),
                msg: format!(
                    "unknown variant `{s}` (expected one of {})",
                    Variant::ALL.map(Variant::name).join(", ")
                ),
            })
    }
}

pub struct Forward {
    /// Pre-sigmoid scores `[B]`.
    pub logits: Var,
    pub layout: UttLayout,
    pub attention: Vec<(Option<Var>, Option<Var>)>,
    pub agg: AggOutput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Model { config })
    }

    /// Fresh parameters. Word tables are frozen; `pretrained` replaces the
    /// synthesized pretrained table.
    pub fn init_params(&self, vocab: &Vocabulary, pretrained: Option<Tensor<f32>>, seed: u64) -> Result<Params<f32>> {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        wordrep::init_params(&mut p, &c.embedding, vocab, pretrained, &mut rng, seed)?;
        encoder::init_params(&mut p, &mut rng, c.embedding.dim(), c.hidden);
        matcher::init_params(&mut p);
        aggregator::init_params(
            &mut p,
            &mut rng,
            c.ctx_width(),
            c.resp_width(),
            c.hidden,
            c.response_aggregation,
            c.limits.max_resp_utts,
        );
        init_mlp(&mut p, &mut rng, 8 * c.hidden, c.mlp_hidden);
        Ok(p)
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        batch: &PaddedBatch,
        dropout: &mut Dropout,
    ) -> Result<Forward> {
        let c = &self.config;
        if batch.limits != c.limits {
            return Err(Error::Data("batch limits differ from the model configuration".into()));
        }
        let layout = UttLayout::new(batch, c.join_response);
        let lengths = layout.lengths();
        let x = wordrep::represent(g, p, &c.embedding, batch, &layout, dropout)?;
        let enc = encoder::encode(g, p, x, &lengths, dropout)?;
        let matched = matcher::match_batch(g, p, enc, &layout, &c.matching)?;
        let agg = aggregator::aggregate(g, p, &matched, &layout, c.response_aggregation, dropout)?;
        let logits = mlp(g, p, agg.m, dropout)?;
        Ok(Forward {
            logits,
            layout,
            attention: matched.attention,
            agg,
        })
    }

    /// Matching scores in (0, 1) for every example of `batch`.
    pub fn score(&self, params: &Params<f32>, batch: &PaddedBatch) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let f = self.forward(&mut g, &p, batch, &mut Dropout::off())?;
        let s = g.sigmoid(f.logits);
        Ok(g.value(s).to_f64_vec())
    }
}

pub fn init_mlp(params: &mut Params<f32>, rng: &mut ChaCha8Rng, input: usize, hidden: usize) {
    params.insert(MLP_W1, glorot(rng, &[input, hidden]), true);
    params.insert(MLP_B1, Tensor::zeros(&[hidden]), true);
    params.insert(MLP_W2, glorot(rng, &[hidden, 1]), true);
    params.insert(MLP_B2, Tensor::zeros(&[1]), true);
}

/// One relu hidden layer, then a single output unit: `[B, F] -> [B]`.
pub fn mlp<T: Real>(g: &mut Graph<T>, p: &Bound, m: Var, dropout: &mut Dropout) -> Result<Var> {
    let b = g.shape(m)[0];
    let h = g.matmul(m, p.var(MLP_W1)?)?;
    let h = g.add(h, p.var(MLP_B1)?)?;
    let h = g.relu(h);
    let h = dropout.apply(g, h)?;
    let z = g.matmul(h, p.var(MLP_W2)?)?;
    let z = g.add(z, p.var(MLP_B2)?)?;
    Ok(g.reshape(z, &[b])?)
}

/// Summed sigmoid cross-entropy, computed from logits as
/// `softplus(z) - y z` for numerical stability.
pub fn loss<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[u8]) -> Result<Var> {
    let y = Tensor::new(vec![labels.len()], labels.iter().map(|&l| T::lit(l as f64)).collect())?;
    let y = g.constant(y);
    let pos = g.relu(logits);
    let a = g.abs(logits);
    let e = g.affine(a, -1.0, 0.0);
    let e = g.exp(e);
    let e = g.affine(e, 1.0, 1.0);
    let l = g.log(e);
    let sp = g.add(pos, l)?;
    let yz = g.mul(y, logits)?;
    let per = g.sub(sp, yz)?;
    Ok(g.sum_all(per)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_batch, parse_line, truncate_and_pad, LineFormat};

    fn data() -> (Vocabulary, PaddedBatch, PaddedBatch, ModelConfig) {
        let lines = [
            "1\thi there _eou_ how are you\tfine thanks _eou_ and you",
            "0\tsomething else\tnope",
        ];
        let ex: Vec<_> = lines.iter().map(|l| parse_line(l, LineFormat::V2, 1).unwrap()).collect();
        let v = Vocabulary::build(&ex, 1);
        let cfg = ModelConfig::desk();
        let shaped: Vec<_> = ex.iter().map(|e| truncate_and_pad(e, cfg.limits)).collect();
        let batch = make_batch(&shaped, &v).unwrap();
        let single = make_batch(&shaped[1..], &v).unwrap();
        (v, batch, single, cfg)
    }

    #[test]
    fn every_variant_scores_in_open_interval() {
        let (v, batch, _, base) = data();
        for variant in Variant::ALL {
            let model = Model::new(variant.apply(&base)).unwrap();
            let params = model.init_params(&v, None, 5).unwrap();
            let s = model.score(&params, &batch).unwrap();
            assert_eq!(s.len(), 2, "{variant}");
            assert!(s.iter().all(|x| *x > 0.0 && *x < 1.0), "{variant}: {s:?}");
        }
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
        assert_eq!(Variant::ALL.len(), 8);
    }

    #[test]
    fn scores_do_not_depend_on_batch_neighbours() {
        let (v, batch, single, cfg) = data();
        let model = Model::new(cfg).unwrap();
        let params = model.init_params(&v, None, 1).unwrap();
        let both = model.score(&params, &batch).unwrap();
        let alone = model.score(&params, &single).unwrap();
        assert!((both[1] - alone[0]).abs() < 1e-6);
    }

    #[test]
    fn loss_matches_closed_form() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_f64(&[3], &[0.0, 40.0, -2.0]).unwrap());
        let l = loss(&mut g, z, &[1, 1, 0]).unwrap();
        let expect = 2f64.ln() + (1.0 + (-40f64).exp()).ln() + (1.0 + 2f64.exp()).ln() - 2.0;
        assert!((g.value(l).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_mlp_scores_one_half() {
        let mut p = Params::<f64>::new();
        p.insert(MLP_W1, Tensor::zeros(&[4, 3]), true);
        p.insert(MLP_B1, Tensor::zeros(&[3]), true);
        p.insert(MLP_W2, Tensor::zeros(&[3, 1]), true);
        p.insert(MLP_B2, Tensor::zeros(&[1]), true);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let m = g.constant(Tensor::full(&[2, 4], 0.7));
        let z = mlp(&mut g, &b, m, &mut Dropout::off()).unwrap();
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).to_f64_vec(), vec![0.5, 0.5]);
    }
}
