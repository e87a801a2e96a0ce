//! Evaluation against references and extractive baselines, and trace
//! generation.

use crate::data::{decode, encode_all, Batch, QAExample, RawExample, Vocabulary, EOS};
use crate::decoder::GenerationTrace;
use crate::error::{PaagError, Result};
use crate::metrics::{bleu, bm25_rank, embedding_metrics, tfidf_rank, BleuReport, EmbeddingReport, EmbeddingTable};
use crate::model::Model;
use serde::{Deserialize, Serialize};

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

/// Highest tolerated share of unknown words when a dataset is encoded with
/// a checkpoint's vocabulary.
pub const MAX_UNK_RATE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemScores {
    pub bleu: BleuReport,
    pub embedding: EmbeddingReport,
    /// Sentence-level BLEU1 per example, for paired significance tests.
    pub per_example_bleu1: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub beam: usize,
    pub model: SystemScores,
    pub bm25: SystemScores,
    pub tfidf: SystemScores,
}

/// One generated answer with its decoding trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub question: String,
    pub generated: String,
    pub reference: String,
    pub log_prob: f64,
    pub gates: Vec<f64>,
    pub p_gen: Vec<f64>,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Share of question, answer, review and attribute tokens that `vocab`
/// does not know.
pub fn unk_rate(raws: &[RawExample], vocab: &Vocabulary) -> f64 {
    let (mut unk, mut total) = (0usize, 0usize);
    for t in raws.iter().flat_map(RawExample::tokens) {
        total += 1;
        if !vocab.contains(t) {
            unk += 1;
        }
    }
    unk as f64 / total.max(1) as f64
}

/// Encodes `raws` with a checkpoint's vocabulary, rejecting datasets the
/// vocabulary was evidently not built for.
pub fn encode_for_checkpoint(raws: &[RawExample], vocab: &Vocabulary) -> Result<Vec<QAExample>> {
    let rate = unk_rate(raws, vocab);
    if rate > MAX_UNK_RATE {
        return Err(PaagError::VocabMismatch(format!(
            "{:.1}% of dataset tokens are unknown to the checkpoint vocabulary of {} words",
            100.0 * rate,
            vocab.len()
        )));
    }
    Ok(encode_all(raws, vocab)?.0)
}

fn strip_eos(tokens: &[usize]) -> &[usize] {
    match tokens.iter().position(|&t| t == EOS) {
        Some(i) => &tokens[..i],
        None => tokens,
    }
}

pub fn generate_traces(model: &Model, examples: &[QAExample], beam: usize, max_len: usize) -> Result<Vec<GenerationTrace>> {
    examples
        .iter()
        .map(|ex| {
            let b = Batch::from_examples(std::slice::from_ref(ex));
            Ok(model.generate(&b.view(0), beam, max_len)?)
        })
        .collect()
}

pub fn generation_records(raws: &[RawExample], examples: &[QAExample], traces: &[GenerationTrace], vocab: &Vocabulary) -> Vec<GenerationRecord> {
    raws.iter()
        .zip(examples)
        .zip(traces)
        .map(|((raw, ex), tr)| GenerationRecord {
            question: raw.question.clone(),
            generated: decode(strip_eos(&tr.tokens), ex, vocab).join(" "),
            reference: raw.answer.clone(),
            log_prob: tr.log_prob,
            gates: tr.gates.clone(),
            p_gen: tr.p_gen.clone(),
        })
        .collect()
}

fn ids(tokens: &[String], vocab: &Vocabulary) -> Vec<usize> {
    tokens.iter().map(|t| vocab.lookup(t)).collect()
}

/// BLEU, embedding metrics and per-example BLEU1 of token candidates.
pub fn score_system(candidates: &[Vec<String>], references: &[Vec<String>], vocab: &Vocabulary, table: EmbeddingTable) -> Result<SystemScores> {
    let bleu_report = bleu(candidates, references)?;
    let cand_ids: Vec<Vec<usize>> = candidates.iter().map(|c| ids(c, vocab)).collect();
    let ref_ids: Vec<Vec<usize>> = references.iter().map(|r| ids(r, vocab)).collect();
    let embedding = embedding_metrics(&cand_ids, &ref_ids, table)?;
    let per_example_bleu1 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| Ok(bleu(std::slice::from_ref(c), std::slice::from_ref(r))?.bleu1))
        .collect::<Result<Vec<f64>>>()?;
    Ok(SystemScores { bleu: bleu_report, embedding, per_example_bleu1 })
}

/// Top-ranked review of each example under `rank`.
pub fn extractive_answers(raws: &[RawExample], rank: impl Fn(&[String], &[Vec<String>]) -> Result<Vec<usize>>) -> Result<Vec<Vec<String>>> {
    raws.iter()
        .map(|r| {
            let q = words(&r.question);
            let reviews: Vec<Vec<String>> = r.reviews.iter().map(|x| words(x)).filter(|x| !x.is_empty()).collect();
            let order = rank(&q, &reviews)?;
            Ok(reviews[order[0]].clone())
        })
        .collect()
}

pub fn bm25_answers(raws: &[RawExample]) -> Result<Vec<Vec<String>>> {
    extractive_answers(raws, |q, rs| Ok(bm25_rank(q, rs, BM25_K1, BM25_B)?))
}

pub fn tfidf_answers(raws: &[RawExample]) -> Result<Vec<Vec<String>>> {
    extractive_answers(raws, |q, rs| Ok(tfidf_rank(q, rs)?))
}

/// Beam generation on `raws` plus both extractive baselines, all scored
/// against the reference answers.
pub fn evaluate(model: &Model, vocab: &Vocabulary, raws: &[RawExample], beam: usize, max_len: usize) -> Result<(EvalReport, Vec<GenerationRecord>)> {
    if raws.is_empty() {
        return Err(PaagError::Usage("evaluation set is empty".into()));
    }
    let examples = encode_for_checkpoint(raws, vocab)?;
    let traces = generate_traces(model, &examples, beam, max_len)?;
    let records = generation_records(raws, &examples, &traces, vocab);
    let references: Vec<Vec<String>> = raws.iter().map(|r| words(&r.answer)).collect();
    let generated: Vec<Vec<String>> = records.iter().map(|r| words(&r.generated)).collect();
    let table = EmbeddingTable { data: model.embedding().data(), dim: model.dims.embed };
    let report = EvalReport {
        examples: raws.len(),
        beam,
        model: score_system(&generated, &references, vocab, table)?,
        bm25: score_system(&bm25_answers(raws)?, &references, vocab, table)?,
        tfidf: score_system(&tfidf_answers(raws)?, &references, vocab, table)?,
    };
    Ok((report, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, generate_synthetic, SyntheticSpec};
    use crate::encoders::ModelDims;
    use crate::metrics::bleu;
    use crate::model::{ModelOptions, Variant};

    fn setup() -> (Vec<RawExample>, Vocabulary, Model) {
        let spec = SyntheticSpec { num_products: 6, ..SyntheticSpec::default() };
        let raws = generate_synthetic(&spec, 9).unwrap().examples;
        let vocab = build_vocab(&raws, 500).unwrap();
        let dims = ModelDims { vocab: vocab.len(), embed: 6, hidden: 4, filters: 2, proj: 3 };
        let model = Model::new(dims, ModelOptions { variant: Variant::Ragf, ..ModelOptions::default() }, 3);
        (raws, vocab, model)
    }

    #[test]
    fn references_score_perfectly_against_themselves() {
        let (raws, vocab, model) = setup();
        let refs: Vec<Vec<String>> = raws.iter().map(|r| words(&r.answer)).collect();
        let table = EmbeddingTable { data: model.embedding().data(), dim: model.dims.embed };
        let s = score_system(&refs, &refs, &vocab, table).unwrap();
        assert!((s.bleu.bleu4 - 100.0).abs() < 1e-9);
        assert!((s.bleu.bleu1 - 100.0).abs() < 1e-9);
        assert!(s.per_example_bleu1.iter().all(|b| (b - 100.0).abs() < 1e-9));
        assert!((s.embedding.average - 1.0).abs() < 1e-9);
    }

    #[test]
    fn baseline_columns_match_direct_metric_calls() {
        let (raws, vocab, model) = setup();
        let (report, records) = evaluate(&model, &vocab, &raws, 2, 8).unwrap();
        assert_eq!(report.examples, raws.len());
        assert_eq!(records.len(), raws.len());
        let refs: Vec<Vec<String>> = raws.iter().map(|r| words(&r.answer)).collect();
        for r in &raws {
            let q = words(&r.question);
            let reviews: Vec<Vec<String>> = r.reviews.iter().map(|x| words(x)).collect();
            let top = bm25_rank(&q, &reviews, BM25_K1, BM25_B).unwrap()[0];
            assert!(bm25_answers(std::slice::from_ref(r)).unwrap()[0] == reviews[top]);
        }
        assert_eq!(report.bm25.bleu, bleu(&bm25_answers(&raws).unwrap(), &refs).unwrap());
        assert_eq!(report.tfidf.bleu, bleu(&tfidf_answers(&raws).unwrap(), &refs).unwrap());
        let generated: Vec<Vec<String>> = records.iter().map(|r| words(&r.generated)).collect();
        assert_eq!(report.model.bleu, bleu(&generated, &refs).unwrap());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (raws, vocab, model) = setup();
        let a = evaluate(&model, &vocab, &raws, 3, 8).unwrap();
        let b = evaluate(&model, &vocab, &raws, 3, 8).unwrap();
        assert_eq!(serde_json::to_string(&a.0).unwrap(), serde_json::to_string(&b.0).unwrap());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn foreign_dataset_is_a_vocabulary_mismatch() {
        let (_, vocab, model) = setup();
        let foreign = vec![RawExample {
            question: "zorp blat quux".into(),
            answer: "flim flam".into(),
            reviews: vec!["grob nix vel".into()],
            attributes: vec![],
        }];
        assert!(unk_rate(&foreign, &vocab) > MAX_UNK_RATE);
        assert!(matches!(evaluate(&model, &vocab, &foreign, 1, 5), Err(PaagError::VocabMismatch(_))));
    }

    #[test]
    fn generated_text_has_no_end_marker() {
        let (mut raws, vocab, model) = setup();
        raws.truncate(2);
        raws[0].question.push_str(" zyzzyva");
        let (_, records) = evaluate(&model, &vocab, &raws, 1, 6).unwrap();
        for r in &records {
            assert!(!r.generated.split_whitespace().any(|w| w == "</s>"));
            assert!(r.log_prob <= 0.0);
            assert_eq!(r.gates.len(), r.p_gen.len());
        }
    }
}
