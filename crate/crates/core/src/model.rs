//! Full generator (encoders, memory, decoder) plus the optional critic.

use crate::data::{ExampleView, Vocabulary};
use crate::decoder::{Context, Decoder, Facts, GenerationTrace, StepOutput};
use crate::discriminator::{CriticMode, Discriminator, FakeTerms, PenaltyNorm, VanillaGeneratorLoss};
use crate::encoders::{Encoders, ModelDims, ReaderOutput};
use crate::kvmn::{KeyValueMemory, MemoryReadout};
use crate::numerics::{Bound, Checkpoint, Graph, NumericsError, ParamSet, Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Model ladder, from likelihood-only to the Wasserstein critic with
/// gradient penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Reader, memory and decoder trained on likelihood only.
    #[serde(rename = "RAGF")]
    Ragf,
    /// Adds a sigmoid critic trained with cross-entropy.
    #[serde(rename = "RAGFD")]
    Ragfd,
    /// Adds a Wasserstein critic without gradient penalty.
    #[serde(rename = "RAGFWD")]
    Ragfwd,
    /// Wasserstein critic with gradient penalty.
    #[default]
    #[serde(rename = "PAAG")]
    Paag,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ragf, Variant::Ragfd, Variant::Ragfwd, Variant::Paag];

    pub fn has_critic(self) -> bool {
        self != Variant::Ragf
    }

    pub fn is_vanilla(self) -> bool {
        self == Variant::Ragfd
    }

    pub fn has_penalty(self) -> bool {
        self == Variant::Paag
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ragf => "RAGF",
            Variant::Ragfd => "RAGFD",
            Variant::Ragfwd => "RAGFWD",
            Variant::Paag => "PAAG",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown variant {s:?}; expected RAGF, RAGFD, RAGFWD or PAAG"))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub variant: Variant,
    /// Decoder review attention over every review word instead of the
    /// per-review summaries.
    pub attend_review_words: bool,
    pub critic_mode: CriticMode,
    pub penalty_norm: PenaltyNorm,
    pub fake_terms: FakeTerms,
    pub vanilla_loss: VanillaGeneratorLoss,
}

#[derive(Clone, Copy, Debug)]
pub struct Generator {
    pub encoders: Encoders,
    pub memory: KeyValueMemory,
    pub decoder: Decoder,
}

/// Encoder-side results for one example.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub reader: ReaderOutput,
    pub memory: MemoryReadout,
    pub facts: Facts,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub dims: ModelDims,
    pub options: ModelOptions,
    pub gen_params: ParamSet,
    pub generator: Generator,
    pub critic: Option<(ParamSet, Discriminator)>,
}

impl Model {
    pub fn new(dims: ModelDims, options: ModelOptions, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen_params = ParamSet::new();
        let generator = Generator {
            encoders: Encoders::register(&mut gen_params, &dims, &mut rng),
            memory: KeyValueMemory::register(&mut gen_params, &dims, &mut rng),
            decoder: Decoder::register(&mut gen_params, &dims, &mut rng),
        };
        let critic = options.variant.has_critic().then(|| {
            let mut ps = ParamSet::new();
            let d = Discriminator::register(&mut ps, &dims, options.critic_mode, &mut rng);
            (ps, d)
        });
        Model { dims, options, gen_params, generator, critic }
    }

    /// Runs the encoders and memory and assembles the decoder's facts.
    pub fn encode(&self, g: &mut Graph, b: &Bound, ex: &ExampleView) -> Result<Encoded> {
        let gen = &self.generator;
        let reader = gen.encoders.run(g, b, ex)?;
        let memory = gen.memory.read(g, b, &gen.encoders.embedding, reader.question.last, ex.attributes, ex.attribute_mask)?;
        let (review_states, review_mask) = if self.options.attend_review_words {
            let mut mats = Vec::new();
            let mut mask = Vec::new();
            for (slot, wmask) in reader.reviews.iter().zip(ex.review_word_mask) {
                if let Some((enc, _)) = slot {
                    mats.push(enc.states);
                    mask.extend_from_slice(wmask);
                }
            }
            (g.concat_rows(&mats)?, mask)
        } else {
            (reader.fusion.summaries, ex.review_mask.to_vec())
        };
        let facts = Facts {
            question_states: reader.question.states,
            question_mask: ex.question_mask.to_vec(),
            question_ids: ex.question.to_vec(),
            question_last: reader.question.last,
            memory: memory.facts,
            fused: reader.fusion.fused,
            review_states,
            review_mask,
            extended: ex.extended_size(),
        };
        Ok(Encoded { reader, memory, facts })
    }

    pub fn context(&self, g: &mut Graph, b: &Bound, facts: Facts) -> Result<Context> {
        self.generator.decoder.prepare(g, b, facts, true)
    }

    /// Decoder inputs with the attribute readout, fused review summary and
    /// review context removed.
    pub fn no_facts_context(&self, g: &mut Graph, b: &Bound, facts: &Facts) -> Result<Context> {
        let mut f = facts.clone();
        f.memory = g.zeros(vec![self.dims.embed]);
        f.fused = g.zeros(vec![self.dims.state()]);
        self.generator.decoder.prepare(g, b, f, false)
    }

    /// Mean token NLL of the reference answer and every decoder step.
    pub fn teacher_forced(&self, g: &mut Graph, b: &Bound, ctx: &Context, ex: &ExampleView) -> Result<(Var, Vec<StepOutput>)> {
        let answer = &ex.answer[..ex.answer_len()];
        self.generator.decoder.teacher_forced(g, b, &self.generator.encoders.embedding, ctx, answer)
    }

    /// Stacks the output states of the steps into `[T × 2H]`.
    pub fn output_states(g: &mut Graph, steps: &[StepOutput]) -> Result<Var> {
        let outs: Vec<Var> = steps.iter().map(|s| s.out).collect();
        g.stack_rows(&outs)
    }

    /// Beam search (greedy when `beam == 1`) with frozen parameters.
    pub fn generate(&self, ex: &ExampleView, beam: usize, max_len: usize) -> Result<GenerationTrace> {
        let mut g = Graph::new();
        let b = self.gen_params.bind_frozen(&mut g);
        let enc = self.encode(&mut g, &b, ex)?;
        let ctx = self.context(&mut g, &b, enc.facts)?;
        let dec = &self.generator.decoder;
        let emb = &self.generator.encoders.embedding;
        if beam <= 1 {
            dec.greedy(&mut g, &b, emb, &ctx, max_len)
        } else {
            dec.beam(&mut g, &b, emb, &ctx, beam, max_len)
        }
    }

    pub fn embedding(&self) -> &Tensor {
        self.gen_params.get(self.generator.encoders.embedding.table)
    }

    pub fn num_critic_params(&self) -> usize {
        self.critic.as_ref().map_or(0, |(ps, _)| ps.num_scalars())
    }

    pub fn to_checkpoint(&self, vocab: &Vocabulary, extra: serde_json::Value) -> Checkpoint {
        let meta = serde_json::json!({
            "dims": self.dims,
            "options": self.options,
            "vocab": vocab.words(),
            "extra": extra,
        });
        let mut tensors: Vec<(String, Tensor)> = self
            .gen_params
            .iter()
            .map(|(n, t)| (format!("gen/{n}"), Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid")))
            .collect();
        if let Some((ps, _)) = &self.critic {
            tensors.extend(ps.iter().map(|(n, t)| (format!("disc/{n}"), Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid"))));
        }
        Checkpoint { meta, tensors }
    }

    /// Rebuilds a model and its vocabulary from a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Model, Vocabulary)> {
        let bad = |m: String| NumericsError::Contract(m);
        let dims: ModelDims = serde_json::from_value(ck.meta["dims"].clone()).map_err(|e| bad(format!("checkpoint dims: {e}")))?;
        let options: ModelOptions = serde_json::from_value(ck.meta["options"].clone()).map_err(|e| bad(format!("checkpoint options: {e}")))?;
        let words: Vec<String> = serde_json::from_value(ck.meta["vocab"].clone()).map_err(|e| bad(format!("checkpoint vocab: {e}")))?;
        let vocab = Vocabulary::from_words(words);
        if vocab.len() != dims.vocab {
            return Err(bad(format!(
                "vocabulary mismatch: checkpoint stores {} words but the model expects {}",
                vocab.len(),
                dims.vocab
            )));
        }
        let mut model = Model::new(dims, options, 0);
        model.gen_params.load_from(|n| ck.get(&format!("gen/{n}")))?;
        if let Some((ps, _)) = &mut model.critic {
            ps.load_from(|n| ck.get(&format!("disc/{n}")))?;
        }
        Ok((model, vocab))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{batch, build_vocab, encode_all, generate_synthetic, SyntheticSpec};

    fn corpus(n: usize, seed: u64) -> (Vocabulary, Vec<crate::data::QAExample>) {
        let spec = SyntheticSpec { num_products: n, ..SyntheticSpec::default() };
        let c = generate_synthetic(&spec, seed).unwrap();
        let v = build_vocab(&c.examples, 200).unwrap();
        let (exs, _) = encode_all(&c.examples, &v).unwrap();
        (v, exs)
    }

    fn small(vocab: usize) -> ModelDims {
        ModelDims { vocab, embed: 6, hidden: 4, filters: 3, proj: 4 }
    }

    #[test]
    fn ragf_has_no_critic() {
        let m = Model::new(small(20), ModelOptions { variant: Variant::Ragf, ..Default::default() }, 1);
        assert!(m.critic.is_none());
        for v in [Variant::Ragfd, Variant::Ragfwd, Variant::Paag] {
            let m = Model::new(small(20), ModelOptions { variant: v, ..Default::default() }, 1);
            assert!(m.num_critic_params() > 0);
        }
    }

    #[test]
    fn variants_share_generator_initialization() {
        let a = Model::new(small(20), ModelOptions { variant: Variant::Ragf, ..Default::default() }, 3);
        let b = Model::new(small(20), ModelOptions { variant: Variant::Ragfwd, ..Default::default() }, 3);
        assert_eq!(a.gen_params, b.gen_params);
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        assert!("GAN".parse::<Variant>().is_err());
    }

    #[test]
    fn batched_loss_equals_individual_losses() {
        let (v, exs) = corpus(5, 2);
        let m = Model::new(small(v.len()), ModelOptions::default(), 4);
        let together = &batch(&exs, 5)[0];
        let mut g = Graph::new();
        let b = m.gen_params.bind(&mut g);
        for (i, ex) in exs.iter().enumerate() {
            let alone = &batch(std::slice::from_ref(ex), 1)[0];
            let mut losses = vec![];
            for bt in [together.view(i), alone.view(0)] {
                let enc = m.encode(&mut g, &b, &bt).unwrap();
                let ctx = m.context(&mut g, &b, enc.facts).unwrap();
                let (l, _) = m.teacher_forced(&mut g, &b, &ctx, &bt).unwrap();
                losses.push(g.scalar_value(l));
            }
            assert!((losses[0] - losses[1]).abs() < 1e-12, "{losses:?}");
        }
    }

    #[test]
    fn no_facts_equals_facts_when_facts_are_zero() {
        let (v, exs) = corpus(2, 5);
        let m = Model::new(small(v.len()), ModelOptions::default(), 6);
        let bt = &batch(&exs, 2)[0];
        let ex = bt.view(0);
        let mut g = Graph::new();
        let b = m.gen_params.bind_frozen(&mut g);
        let enc = m.encode(&mut g, &b, &ex).unwrap();
        let mut facts = enc.facts.clone();
        facts.memory = g.zeros(vec![6]);
        facts.fused = g.zeros(vec![8]);
        let rows = g.shape(facts.review_states)[0];
        facts.review_states = g.zeros(vec![rows, 8]);
        let with = m.context(&mut g, &b, facts.clone()).unwrap();
        let without = m.no_facts_context(&mut g, &b, &facts).unwrap();
        let (_, s1) = m.teacher_forced(&mut g, &b, &with, &ex).unwrap();
        let (_, s2) = m.teacher_forced(&mut g, &b, &without, &ex).unwrap();
        for (a, c) in s1.iter().zip(&s2) {
            assert_eq!(g.value(a.out), g.value(c.out));
        }
        // with real facts the streams differ
        let real = m.context(&mut g, &b, enc.facts.clone()).unwrap();
        let nf = m.no_facts_context(&mut g, &b, &enc.facts).unwrap();
        let (_, s3) = m.teacher_forced(&mut g, &b, &real, &ex).unwrap();
        let (_, s4) = m.teacher_forced(&mut g, &b, &nf, &ex).unwrap();
        assert_ne!(g.value(s3[0].out), g.value(s4[0].out));
        // and repeated no-facts runs are identical
        let nf2 = m.no_facts_context(&mut g, &b, &enc.facts).unwrap();
        let (_, s5) = m.teacher_forced(&mut g, &b, &nf2, &ex).unwrap();
        assert_eq!(g.value(s4[1].out), g.value(s5[1].out));
    }

    #[test]
    fn word_level_review_attention_runs() {
        let (v, exs) = corpus(3, 7);
        let m = Model::new(small(v.len()), ModelOptions { attend_review_words: true, ..Default::default() }, 8);
        let bt = &batch(&exs, 3)[0];
        let ex = bt.view(1);
        let mut g = Graph::new();
        let b = m.gen_params.bind(&mut g);
        let enc = m.encode(&mut g, &b, &ex).unwrap();
        let words: usize = ex.review_word_mask.len() * ex.review_word_mask[0].len();
        assert_eq!(g.shape(enc.facts.review_states)[0], words);
        let ctx = m.context(&mut g, &b, enc.facts).unwrap();
        let (_, steps) = m.teacher_forced(&mut g, &b, &ctx, &ex).unwrap();
        assert!((g.value(steps[0].beta_r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_restores_model() {
        let (v, exs) = corpus(2, 9);
        let m = Model::new(small(v.len()), ModelOptions::default(), 10);
        let ck = m.to_checkpoint(&v, serde_json::json!({"epoch": 1}));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        let (m2, v2) = Model::from_checkpoint(&back).unwrap();
        assert_eq!(v2, v);
        assert_eq!(m2.gen_params, m.gen_params);
        let bt = &batch(&exs, 2)[0];
        assert_eq!(m.generate(&bt.view(0), 3, 8).unwrap(), m2.generate(&bt.view(0), 3, 8).unwrap());
    }
}
