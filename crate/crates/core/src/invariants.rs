//! Normalization audit of every distribution the generator produces, on
//! random tiny models and padded two-example batches.

use crate::data::{encode_example, Batch, EncodeStats, ExampleView, QAExample, RawExample, Vocabulary};
use crate::encoders::ModelDims;
use crate::error::Result;
use crate::gradcheck::rescale;
use crate::model::{Model, ModelOptions, Variant};
use crate::numerics::{Graph, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Largest accepted deviation of a total mass from 1.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Worst case seen for one family of distributions.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FamilyStats {
    pub name: &'static str,
    pub count: usize,
    pub max_sum_error: f64,
    /// Largest mass found on a position that should carry none.
    pub max_masked_mass: f64,
}

impl FamilyStats {
    pub fn passed(&self) -> bool {
        self.count > 0 && self.max_sum_error <= SUM_TOLERANCE && self.max_masked_mass == 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvariantReport {
    pub instances: usize,
    pub families: Vec<FamilyStats>,
    /// Gate values (review/question balance and generate probability)
    /// outside `[0, 1]`.
    pub gates_out_of_range: usize,
}

impl InvariantReport {
    pub fn passed(&self) -> bool {
        self.gates_out_of_range == 0 && self.families.iter().all(FamilyStats::passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for f in &self.families {
            out.push_str(&format!(
                "{} {:<22} {:>6} maps, max |sum-1| {:.2e}, max masked mass {:.1e}\n",
                if f.passed() { "PASS" } else { "FAIL" },
                f.name,
                f.count,
                f.max_sum_error,
                f.max_masked_mass
            ));
        }
        out.push_str(&format!("{} instances, gates out of [0,1]: {}\n", self.instances, self.gates_out_of_range));
        out
    }
}

const FAMILIES: [&str; 8] = [
    "review word attention",
    "review fusion gates",
    "attribute addressing",
    "question attention",
    "review attention",
    "vocabulary softmax",
    "copy distribution",
    "mixed output",
];

struct Audit {
    families: Vec<FamilyStats>,
    gates_out_of_range: usize,
}

impl Audit {
    /// `allowed[i] == false` marks a position that must hold exactly zero.
    fn record(&mut self, family: usize, values: &[f64], allowed: &[bool]) {
        let f = &mut self.families[family];
        f.count += 1;
        let total: f64 = values.iter().sum();
        f.max_sum_error = f.max_sum_error.max((total - 1.0).abs());
        if values.len() != allowed.len() {
            f.max_masked_mass = f64::INFINITY;
            return;
        }
        for (v, ok) in values.iter().zip(allowed) {
            if !ok || *v < 0.0 {
                f.max_masked_mass = f.max_masked_mass.max(v.abs());
            }
        }
    }

    fn gate(&mut self, v: f64) {
        if !(0.0..=1.0).contains(&v) {
            self.gates_out_of_range += 1;
        }
    }
}

fn random_raw(rng: &mut ChaCha8Rng, words: &[String]) -> RawExample {
    let pick = |rng: &mut ChaCha8Rng| words.choose(rng).expect("non-empty vocabulary").clone();
    let qlen = rng.gen_range(1..=6);
    let question: Vec<String> = (0..qlen)
        .map(|i| if rng.gen_bool(0.25) { format!("oov{i}") } else { pick(rng) })
        .collect();
    let reviews = (0..rng.gen_range(1..=3))
        .map(|_| {
            (0..rng.gen_range(1..=6))
                .map(|_| if rng.gen_bool(0.1) { "unseen".to_string() } else { pick(rng) })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let attributes = (0..rng.gen_range(0..=3)).map(|_| (pick(rng), pick(rng))).collect();
    let answer: Vec<String> = (0..rng.gen_range(1..=4))
        .map(|_| if rng.gen_bool(0.3) { question.choose(rng).expect("question is non-empty").clone() } else { pick(rng) })
        .collect();
    RawExample { question: question.join(" "), answer: answer.join(" "), reviews, attributes }
}

fn values(g: &Graph, v: Var) -> Vec<f64> {
    g.value(v).to_vec()
}

fn audit_view(model: &Model, view: &ExampleView, audit: &mut Audit) -> Result<()> {
    let mut g = Graph::new();
    let b = model.gen_params.bind_frozen(&mut g);
    let enc = model.encode(&mut g, &b, view)?;
    for ((slot, wmask), real) in enc.reader.reviews.iter().zip(view.review_word_mask).zip(view.review_mask) {
        if let Some((_, summary)) = slot {
            audit.record(0, &values(&g, summary.alpha), wmask);
        } else if *real {
            audit.families[0].max_masked_mass = f64::INFINITY;
        }
    }
    audit.record(1, &values(&g, enc.reader.fusion.gates), view.review_mask);
    if let Some(scores) = enc.memory.scores {
        audit.record(2, &values(&g, scores), view.attribute_mask);
    }
    let facts = enc.facts.clone();
    let ctx = model.context(&mut g, &b, enc.facts)?;
    let (_, steps) = model.teacher_forced(&mut g, &b, &ctx, view)?;
    let extended = view.extended_size();
    let in_question: Vec<bool> = (0..extended).map(|id| view.question.iter().zip(view.question_mask).any(|(&q, &m)| m && q == id)).collect();
    let reachable: Vec<bool> = (0..extended).map(|id| id < view.vocab_size || in_question[id]).collect();
    for s in &steps {
        let beta_q = values(&g, s.beta_q);
        audit.record(3, &beta_q, &facts.question_mask);
        audit.record(4, &values(&g, s.beta_r), &facts.review_mask);
        audit.record(5, &values(&g, s.vocab), &vec![true; view.vocab_size]);
        let mut copy = vec![0.0; extended];
        for ((&q, &m), p) in view.question.iter().zip(view.question_mask).zip(&beta_q) {
            if m {
                copy[q] += p;
            }
        }
        audit.record(6, &copy, &in_question);
        audit.record(7, &values(&g, s.mixed), &reachable);
        audit.gate(g.scalar_value(s.gamma));
        audit.gate(g.scalar_value(s.p_gen));
    }
    Ok(())
}

/// One random model and a padded batch of two random examples; both
/// examples are audited.
fn audit_instance(seed: u64, audit: &mut Audit) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..rng.gen_range(3..=12)).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::from_words(words.clone());
    let dims = ModelDims {
        vocab: vocab.len(),
        embed: rng.gen_range(2..=5),
        hidden: rng.gen_range(2..=4),
        filters: 2,
        proj: 2,
    };
    let options = ModelOptions { variant: Variant::Ragf, attend_review_words: rng.gen_bool(0.5), ..ModelOptions::default() };
    let mut model = Model::new(dims, options, seed);
    rescale(&mut model.gen_params, &mut rng, 1.0);
    let examples: Vec<QAExample> = (0..2)
        .map(|i| encode_example(&random_raw(&mut rng, &words), &vocab, i, &mut EncodeStats::default()))
        .collect::<std::result::Result<_, _>>()?;
    let batch = Batch::from_examples(&examples);
    for view in batch.views() {
        audit_view(&model, &view, audit)?;
    }
    Ok(())
}

/// Audits `instances` random instances derived from `seed`.
pub fn run(seed: u64, instances: usize) -> Result<InvariantReport> {
    let mut audit = Audit {
        families: FAMILIES.iter().map(|&name| FamilyStats { name, ..FamilyStats::default() }).collect(),
        gates_out_of_range: 0,
    };
    for i in 0..instances {
        audit_instance(seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64), &mut audit)?;
    }
    Ok(InvariantReport { instances, families: audit.families, gates_out_of_range: audit.gates_out_of_range })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_run_passes() {
        let r = run(3, 40).unwrap();
        assert!(r.passed(), "{}", r.render());
        assert!(r.families.iter().all(|f| f.count > 0));
    }

    #[test]
    fn leaked_mass_is_flagged() {
        let mut a = Audit { families: vec![FamilyStats::default()], gates_out_of_range: 0 };
        a.record(0, &[0.5, 0.5, 0.0], &[true, true, false]);
        assert!(a.families[0].passed());
        a.record(0, &[0.5, 0.4, 0.1], &[true, true, false]);
        assert!(!a.families[0].passed());
        assert_eq!(a.families[0].max_masked_mass, 0.1);
    }
}
