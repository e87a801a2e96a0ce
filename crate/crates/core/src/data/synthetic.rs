//! Synthetic product QA corpora.
//!
//! Each product draws distinct attribute keys from a pool `key0..`, each with
//! one value from that key's pool `val{k}_{j}`. One extra key that is not an
//! attribute becomes a review-borne fact. The question asks about either an
//! attribute or the review-borne fact; the reference answer states the true
//! value. Product names `item{p}` are unique per product.

use super::{DataError, RawExample};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

const QUESTION_TEMPLATES: [&str; 4] = [
    "what is the KEY of the NAME that you sell ?",
    "can you tell me the KEY of NAME please ?",
    "i want to know which KEY this NAME has",
    "how about the KEY of this NAME for daily use",
];

const ANSWER_TEMPLATES: [&str; 4] = [
    "the KEY of this NAME is VALUE as listed here",
    "its KEY is VALUE and we ship within two days",
    "this one has VALUE as its KEY in our store",
    "the NAME comes with KEY VALUE and all buyers like it",
];

const FACT_TEMPLATE: &str = "the KEY is VALUE";
const VALUES_PER_KEY: usize = 4;
const MIN_FILLERS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Approximate number of distinct words, reserved tokens included and
    /// product names excluded.
    pub vocab_size: usize,
    pub num_products: usize,
    pub attributes_per_product: usize,
    pub reviews_per_product: usize,
    /// How many of the built-in question templates are used (1..=4).
    pub question_templates: usize,
    /// Probability that a review sentence is an irrelevant distractor.
    pub noise_rate: f64,
    /// Probability that a question asks about the review-borne fact instead
    /// of an attribute.
    pub review_fact_rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            vocab_size: 200,
            num_products: 32,
            attributes_per_product: 5,
            reviews_per_product: 3,
            question_templates: 4,
            noise_rate: 0.0,
            review_fact_rate: 0.3,
        }
    }
}

/// The fact a generated question asks about.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AskedFact {
    pub key: String,
    pub value: String,
    /// Other values of the same key, usable as contradicting answers.
    pub wrong_values: Vec<String>,
    pub from_review: bool,
    /// Index of the answer template, so a contradicting answer can be
    /// realized with identical wording.
    pub template: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub examples: Vec<RawExample>,
    pub facts: Vec<AskedFact>,
}

impl SyntheticCorpus {
    /// Rewrites example `i`'s answer so that it states `value` for the asked key.
    pub fn answer_with_value(&self, i: usize, value: &str) -> String {
        let f = &self.facts[i];
        realize(ANSWER_TEMPLATES[f.template], &f.key, value, &product_name(i))
    }
}

fn template_words() -> BTreeSet<&'static str> {
    QUESTION_TEMPLATES
        .iter()
        .chain(&ANSWER_TEMPLATES)
        .chain([&FACT_TEMPLATE])
        .flat_map(|t| t.split_whitespace())
        .filter(|w| !matches!(*w, "KEY" | "VALUE" | "NAME"))
        .collect()
}

struct Pools {
    keys: usize,
    fillers: usize,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad("noise rate must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.review_fact_rate) {
            return bad("review fact rate must lie in [0, 1]");
        }
        if self.num_products == 0 || self.reviews_per_product == 0 || self.attributes_per_product == 0 {
            return bad("products, reviews and attributes must all be positive");
        }
        if !(1..=QUESTION_TEMPLATES.len()).contains(&self.question_templates) {
            return bad("question templates must be between 1 and 4");
        }
        self.pools().map(|_| ())
    }

    fn pools(&self) -> Result<Pools, DataError> {
        // two spare keys: one review-borne fact and one for distractors
        let keys = self.attributes_per_product + 2;
        let fixed = 4 + template_words().len() + keys * (1 + VALUES_PER_KEY);
        let fillers = self.vocab_size.saturating_sub(fixed);
        if fillers < MIN_FILLERS {
            return Err(DataError::Config(format!(
                "vocab size {} too small; need at least {}",
                self.vocab_size,
                fixed + MIN_FILLERS
            )));
        }
        Ok(Pools { keys, fillers })
    }
}

fn product_name(p: usize) -> String {
    format!("item{p}")
}

fn realize(template: &str, key: &str, value: &str, name: &str) -> String {
    template
        .split_whitespace()
        .map(|w| match w {
            "KEY" => key,
            "VALUE" => value,
            "NAME" => name,
            w => w,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn fillers(rng: &mut ChaCha8Rng, n: usize, pool: usize) -> Vec<String> {
    (0..n).map(|_| format!("w{}", rng.gen_range(0..pool))).collect()
}

fn fact_sentence(rng: &mut ChaCha8Rng, key: &str, value: &str, pool: usize) -> String {
    let before = rng.gen_range(1..=3);
    let after = rng.gen_range(1..=3);
    let mut words = fillers(rng, before, pool);
    words.push(realize(FACT_TEMPLATE, key, value, ""));
    words.extend(fillers(rng, after, pool));
    words.join(" ")
}

/// Generates one example per product; a pure function of `(spec, seed)`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCorpus, DataError> {
    spec.validate()?;
    let pools = spec.pools()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let key = |k: usize| format!("key{k}");
    let val = |k: usize, j: usize| format!("val{k}_{j}");
    let mut examples = Vec::with_capacity(spec.num_products);
    let mut facts = Vec::with_capacity(spec.num_products);

    for p in 0..spec.num_products {
        let name = product_name(p);
        let mut keys: Vec<usize> = (0..pools.keys).collect();
        keys.shuffle(&mut rng);
        let attr_keys = &keys[..spec.attributes_per_product];
        let review_key = keys[spec.attributes_per_product];
        let distractor_key = keys[spec.attributes_per_product + 1];
        let values: Vec<usize> = (0..pools.keys).map(|_| rng.gen_range(0..VALUES_PER_KEY)).collect();

        let attributes: Vec<(String, String)> = attr_keys.iter().map(|&k| (key(k), val(k, values[k]))).collect();
        // true facts a review may mention
        let true_facts: Vec<usize> = attr_keys.iter().copied().chain([review_key]).collect();

        let from_review = rng.gen_bool(spec.review_fact_rate);
        let asked = if from_review {
            review_key
        } else {
            attr_keys[rng.gen_range(0..attr_keys.len())]
        };
        let forced = from_review.then(|| rng.gen_range(0..spec.reviews_per_product));

        let mut reviews = Vec::with_capacity(spec.reviews_per_product);
        for r in 0..spec.reviews_per_product {
            let sentence = if forced == Some(r) {
                fact_sentence(&mut rng, &key(review_key), &val(review_key, values[review_key]), pools.fillers)
            } else if rng.gen_bool(spec.noise_rate) {
                let v = rng.gen_range(0..VALUES_PER_KEY);
                fact_sentence(&mut rng, &key(distractor_key), &val(distractor_key, v), pools.fillers)
            } else {
                let k = true_facts[rng.gen_range(0..true_facts.len())];
                fact_sentence(&mut rng, &key(k), &val(k, values[k]), pools.fillers)
            };
            reviews.push(sentence);
        }

        let template = rng.gen_range(0..spec.question_templates);
        let question = realize(QUESTION_TEMPLATES[template], &key(asked), "", &name);
        let answer = realize(ANSWER_TEMPLATES[template], &key(asked), &val(asked, values[asked]), &name);
        facts.push(AskedFact {
            key: key(asked),
            value: val(asked, values[asked]),
            wrong_values: (0..VALUES_PER_KEY)
                .filter(|&j| j != values[asked])
                .map(|j| val(asked, j))
                .collect(),
            from_review,
            template,
        });
        examples.push(RawExample {
            question,
            answer,
            reviews,
            attributes,
        });
    }
    Ok(SyntheticCorpus { examples, facts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, encode_all, write_jsonl};

    fn spec(products: usize, attrs: usize, reviews: usize, noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            num_products: products,
            attributes_per_product: attrs,
            reviews_per_product: reviews,
            noise_rate: noise,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn cardinality() {
        let c = generate_synthetic(&spec(10, 5, 3, 0.3), 1).unwrap();
        assert_eq!(c.examples.len(), 10);
        for e in &c.examples {
            assert_eq!(e.attributes.len(), 5);
            assert_eq!(e.reviews.len(), 3);
        }
    }

    #[test]
    fn byte_identical_for_same_seed() {
        let s = spec(20, 4, 4, 0.5);
        let dump = |seed| {
            let mut buf = Vec::new();
            write_jsonl(&mut buf, &generate_synthetic(&s, seed).unwrap().examples).unwrap();
            buf
        };
        assert_eq!(dump(9), dump(9));
        assert_ne!(dump(9), dump(10));
    }

    #[test]
    fn zero_noise_reviews_state_true_facts() {
        let c = generate_synthetic(&spec(30, 5, 4, 0.0), 3).unwrap();
        for (e, f) in c.examples.iter().zip(&c.facts) {
            for r in &e.reviews {
                let words: Vec<&str> = r.split_whitespace().collect();
                let i = words.iter().position(|w| w.starts_with("key")).unwrap();
                let (k, v) = (words[i], words[i + 2]);
                let is_attr = e.attributes.iter().any(|(ak, av)| ak == k && av == v);
                let is_review_fact = f.from_review && k == f.key && v == f.value;
                // the review-borne fact may also appear in reviews of attribute questions
                let is_spare = !e.attributes.iter().any(|(ak, _)| ak == k);
                assert!(is_attr || is_review_fact || is_spare, "{r}");
            }
        }
    }

    #[test]
    fn answers_are_answerable() {
        for noise in [0.0, 0.3, 1.0] {
            let c = generate_synthetic(&spec(50, 5, 3, noise), 4).unwrap();
            for (e, f) in c.examples.iter().zip(&c.facts) {
                assert!(e.answer.split_whitespace().any(|w| w == f.value));
                let in_attrs = e.attributes.iter().any(|(_, v)| *v == f.value);
                let in_reviews = e.reviews.iter().any(|r| r.split_whitespace().any(|w| w == f.value));
                assert!(in_attrs || in_reviews);
            }
        }
    }

    #[test]
    fn full_noise_keeps_only_forced_facts() {
        let c = generate_synthetic(&spec(40, 5, 3, 1.0), 5).unwrap();
        for (e, f) in c.examples.iter().zip(&c.facts) {
            let mentioning = e.reviews.iter().filter(|r| r.contains(&format!("{} ", f.key))).count();
            assert_eq!(mentioning, usize::from(f.from_review));
        }
    }

    #[test]
    fn lengths_near_targets() {
        let c = generate_synthetic(&SyntheticSpec { num_products: 200, ..SyntheticSpec::default() }, 6).unwrap();
        let mean = |f: &dyn Fn(&RawExample) -> usize| {
            c.examples.iter().map(f).sum::<usize>() as f64 / c.examples.len() as f64
        };
        let q = mean(&|e| e.question.split_whitespace().count());
        let a = mean(&|e| e.answer.split_whitespace().count());
        assert!((8.5..=10.5).contains(&q), "{q}");
        assert!((9.5..=11.0).contains(&a), "{a}");
    }

    #[test]
    fn vocabulary_fits_requested_size() {
        let s = SyntheticSpec { num_products: 300, ..SyntheticSpec::default() };
        let c = generate_synthetic(&s, 7).unwrap();
        let v = build_vocab(&c.examples, 10_000).unwrap();
        let named = v.words().iter().filter(|w| w.starts_with("item")).count();
        assert!(v.len() - named <= s.vocab_size);
        let (exs, _) = encode_all(&c.examples, &v).unwrap();
        assert!(exs.iter().all(|e| e.validate().is_ok()));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate_synthetic(&spec(5, 5, 3, 1.5), 0).is_err());
        assert!(generate_synthetic(&spec(0, 5, 3, 0.0), 0).is_err());
        let tiny = SyntheticSpec { vocab_size: 30, ..SyntheticSpec::default() };
        assert!(matches!(generate_synthetic(&tiny, 0), Err(DataError::Config(_))));
    }

    #[test]
    fn contradicting_answer_swaps_only_value() {
        let c = generate_synthetic(&spec(5, 3, 2, 0.0), 8).unwrap();
        let wrong = &c.facts[0].wrong_values[0];
        let alt = c.answer_with_value(0, wrong);
        let a: Vec<&str> = c.examples[0].answer.split_whitespace().collect();
        let b: Vec<&str> = alt.split_whitespace().collect();
        assert_eq!(a.len(), b.len());
        assert_eq!(a.iter().zip(&b).filter(|(x, y)| x != y).count(), 1);
    }
}
