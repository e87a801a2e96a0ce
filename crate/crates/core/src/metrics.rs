//! BLEU, embedding similarity metrics, extractive BM25 / TF-IDF rankers and
//! a paired t-test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{candidates} candidates but {references} references")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("no reviews to rank")]
    NoReviews,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// Same as `bleu4`.
    pub bleu: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub brevity_penalty: f64,
    /// Modified n-gram precisions for n = 1..4 after smoothing.
    pub precisions: [f64; 4],
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus-level BLEU on a [0, 100] scale. For n ≥ 2 a zero match count is
/// smoothed to `1 / (total + 1)`.
pub fn bleu<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>]) -> Result<BleuReport, MetricError> {
    if candidates.len() != references.len() {
        return Err(MetricError::LengthMismatch { candidates: candidates.len(), references: references.len() });
    }
    if candidates.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    for (c, r) in candidates.iter().zip(references) {
        for n in 1..=4 {
            let cg = ngrams(c, n);
            let rg = ngrams(r, n);
            for (g, count) in &cg {
                matches[n - 1] += (*count).min(rg.get(g).copied().unwrap_or(0));
                totals[n - 1] += count;
            }
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        precisions[n] = if n > 0 && matches[n] == 0 {
            1.0 / (totals[n] as f64 + 1.0)
        } else if totals[n] == 0 {
            0.0
        } else {
            matches[n] as f64 / totals[n] as f64
        };
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let mut scores = [0.0; 4];
    for n in 0..4 {
        scores[n] = if precisions[..=n].iter().any(|p| *p == 0.0) {
            0.0
        } else {
            let mean_log = precisions[..=n].iter().map(|p| p.ln()).sum::<f64>() / (n + 1) as f64;
            100.0 * bp * mean_log.exp()
        };
    }
    Ok(BleuReport {
        bleu: scores[3],
        bleu1: scores[0],
        bleu2: scores[1],
        bleu3: scores[2],
        bleu4: scores[3],
        brevity_penalty: bp,
        precisions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingReport {
    pub average: f64,
    pub greedy: f64,
    pub extrema: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Row-major embedding matrix view.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingTable<'a> {
    pub data: &'a [f64],
    pub dim: usize,
}

impl EmbeddingTable<'_> {
    fn row(&self, id: usize) -> &[f64] {
        &self.data[id * self.dim..(id + 1) * self.dim]
    }
}

fn mean_vector(ids: &[usize], t: &EmbeddingTable) -> Vec<f64> {
    let mut out = vec![0.0; t.dim];
    for &i in ids {
        out.iter_mut().zip(t.row(i)).for_each(|(o, x)| *o += x);
    }
    out.iter_mut().for_each(|o| *o /= ids.len().max(1) as f64);
    out
}

fn extrema_vector(ids: &[usize], t: &EmbeddingTable) -> Vec<f64> {
    (0..t.dim)
        .map(|d| {
            ids.iter()
                .map(|&i| t.row(i)[d])
                .fold(0.0, |best: f64, x| if x.abs() > best.abs() { x } else { best })
        })
        .collect()
}

fn greedy_direction(from: &[usize], to: &[usize], t: &EmbeddingTable) -> f64 {
    if from.is_empty() || to.is_empty() {
        return 0.0;
    }
    from.iter()
        .map(|&a| to.iter().map(|&b| cosine(t.row(a), t.row(b))).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / from.len() as f64
}

/// Embedding metrics over token-id sentences, averaged over pairs.
pub fn embedding_metrics(candidates: &[Vec<usize>], references: &[Vec<usize>], table: EmbeddingTable) -> Result<EmbeddingReport, MetricError> {
    if candidates.len() != references.len() {
        return Err(MetricError::LengthMismatch { candidates: candidates.len(), references: references.len() });
    }
    if candidates.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let (mut avg, mut greedy, mut ext) = (0.0, 0.0, 0.0);
    for (c, r) in candidates.iter().zip(references) {
        avg += cosine(&mean_vector(c, &table), &mean_vector(r, &table));
        greedy += 0.5 * (greedy_direction(c, r, &table) + greedy_direction(r, c, &table));
        ext += cosine(&extrema_vector(c, &table), &extrema_vector(r, &table));
    }
    let n = candidates.len() as f64;
    Ok(EmbeddingReport { average: avg / n, greedy: greedy / n, extrema: ext / n })
}

/// Scores are compared on a 1e-9 grid so that ties which only differ by
/// rounding still fall back to the lower index.
fn order_by_score(scores: &[f64]) -> Vec<usize> {
    let key = |s: f64| (s * 1e9).round();
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| key(scores[b]).total_cmp(&key(scores[a])).then(a.cmp(&b)));
    idx
}

/// BM25 scores of each review for the distinct query terms, with document
/// statistics taken over `reviews`.
pub fn bm25_scores<S: AsRef<str>>(question: &[S], reviews: &[Vec<S>], k1: f64, b: f64) -> Vec<f64> {
    let n = reviews.len() as f64;
    let avgdl = reviews.iter().map(Vec::len).sum::<usize>() as f64 / n.max(1.0);
    let terms: BTreeSet<&str> = question.iter().map(AsRef::as_ref).collect();
    reviews
        .iter()
        .map(|doc| {
            let dl = doc.len() as f64;
            terms
                .iter()
                .map(|&q| {
                    let tf = doc.iter().filter(|w| w.as_ref() == q).count() as f64;
                    if tf == 0.0 {
                        return 0.0;
                    }
                    let df = reviews.iter().filter(|d| d.iter().any(|w| w.as_ref() == q)).count() as f64;
                    let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                    let norm = if avgdl > 0.0 { dl / avgdl } else { 0.0 };
                    idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * norm))
                })
                .sum()
        })
        .collect()
}

/// Review indices by decreasing BM25 score; ties keep input order.
pub fn bm25_rank<S: AsRef<str>>(question: &[S], reviews: &[Vec<S>], k1: f64, b: f64) -> Result<Vec<usize>, MetricError> {
    if reviews.is_empty() {
        return Err(MetricError::NoReviews);
    }
    Ok(order_by_score(&bm25_scores(question, reviews, k1, b)))
}

/// Cosine similarity between tf-idf vectors of the question and each review,
/// with `idf = ln((N+1)/(df+1)) + 1` over `reviews`.
pub fn tfidf_scores<S: AsRef<str>>(question: &[S], reviews: &[Vec<S>]) -> Vec<f64> {
    let n = reviews.len() as f64;
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for d in reviews {
        for w in d.iter().map(AsRef::as_ref).collect::<BTreeSet<_>>() {
            *df.entry(w).or_default() += 1;
        }
    }
    let q = tfidf_vector(question, &df, n);
    let qn = q.values().map(|x| x * x).sum::<f64>().sqrt();
    reviews
        .iter()
        .map(|d| {
            let v = tfidf_vector(d, &df, n);
            let vn = v.values().map(|x| x * x).sum::<f64>().sqrt();
            let dot: f64 = q.iter().filter_map(|(w, x)| v.get(w).map(|y| x * y)).sum();
            if qn == 0.0 || vn == 0.0 {
                0.0
            } else {
                dot / (qn * vn)
            }
        })
        .collect()
}

fn tfidf_vector<'a, S: AsRef<str>>(tokens: &'a [S], df: &BTreeMap<&str, usize>, n: f64) -> BTreeMap<&'a str, f64> {
    let mut tf: BTreeMap<&str, f64> = BTreeMap::new();
    for w in tokens {
        *tf.entry(w.as_ref()).or_default() += 1.0;
    }
    tf.into_iter()
        .map(|(w, c)| {
            let idf = ((n + 1.0) / (df.get(w).copied().unwrap_or(0) as f64 + 1.0)).ln() + 1.0;
            (w, c * idf)
        })
        .collect()
}

pub fn tfidf_rank<S: AsRef<str>>(question: &[S], reviews: &[Vec<S>]) -> Result<Vec<usize>, MetricError> {
    if reviews.is_empty() {
        return Err(MetricError::NoReviews);
    }
    Ok(order_by_score(&tfidf_scores(question, reviews)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

/// Two-tailed paired t-test on `a[i] - b[i]`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch { candidates: a.len(), references: b.len() });
    }
    if a.len() < 2 {
        return Err(MetricError::EmptyCorpus);
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let df = n - 1.0;
    if var == 0.0 {
        let p = if mean == 0.0 { 1.0 } else { 0.0 };
        return Ok(TTest { t: if mean == 0.0 { 0.0 } else { mean.signum() * f64::INFINITY }, df, p_value: p });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    Ok(TTest { t, df, p_value: 2.0 * (1.0 - dist.cdf(t.abs())) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let r = bleu(&[toks("the cat sat on the mat")], &[toks("the cat sat on the mat")]).unwrap();
        assert!((r.bleu1 - 100.0).abs() < 1e-12 && (r.bleu - 100.0).abs() < 1e-12);
        let r = bleu(&[toks("x y z")], &[toks("a b c")]).unwrap();
        assert_eq!(r.bleu1, 0.0);
    }

    #[test]
    fn bleu_brevity_case() {
        let r = bleu(&[toks("a b c")], &[toks("a b c d")]).unwrap();
        let expect = 100.0 * (1.0f64 - 4.0 / 3.0).exp();
        assert!((r.bleu1 - expect).abs() < 1e-9);
        assert!((r.bleu1 - 71.653).abs() < 1e-3);
    }

    #[test]
    fn bleu_errors() {
        let empty: Vec<Vec<String>> = vec![];
        assert_eq!(bleu(&empty, &empty).unwrap_err(), MetricError::EmptyCorpus);
        assert!(bleu(&[toks("a")], &[]).is_err());
    }

    #[test]
    fn embedding_identity_and_orthogonal() {
        let data = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.6, 0.8];
        let t = EmbeddingTable { data: &data, dim: 2 };
        let r = embedding_metrics(&[vec![1, 2, 3]], &[vec![1, 2, 3]], t).unwrap();
        for v in [r.average, r.greedy, r.extrema] {
            assert!((v - 1.0).abs() < 1e-9);
        }
        let r = embedding_metrics(&[vec![1]], &[vec![2]], t).unwrap();
        for v in [r.average, r.greedy, r.extrema] {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_by_hand() {
        // rows: 1 = (1,0), 2 = (0,1), 3 = (0.6,0.8)
        let data = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.6, 0.8];
        let t = EmbeddingTable { data: &data, dim: 2 };
        // candidate [1,2], reference [3]: c→r = (0.6 + 0.8)/2 = 0.7; r→c = max(0.6, 0.8) = 0.8
        let r = embedding_metrics(&[vec![1, 2]], &[vec![3]], t).unwrap();
        assert!((r.greedy - 0.75).abs() < 1e-12);
    }

    fn bm25_brute(q: &[String], docs: &[Vec<String>], i: usize) -> f64 {
        let n = docs.len() as f64;
        let avg = docs.iter().map(|d| d.len() as f64).sum::<f64>() / n;
        let mut uniq = q.to_vec();
        uniq.sort();
        uniq.dedup();
        let mut s = 0.0;
        for t in &uniq {
            let f = docs[i].iter().filter(|w| *w == t).count() as f64;
            let nq = docs.iter().filter(|d| d.contains(t)).count() as f64;
            let idf = ((n - nq + 0.5) / (nq + 0.5) + 1.0).ln();
            s += idf * f * 2.2 / (f + 1.2 * (0.25 + 0.75 * docs[i].len() as f64 / avg));
        }
        s
    }

    #[test]
    fn bm25_examples() {
        let docs = vec![toks("a b"), toks("c d"), toks("e f")];
        assert_eq!(bm25_rank(&toks("d"), &docs, 1.2, 0.75).unwrap()[0], 1);
        assert_eq!(bm25_rank(&toks("z"), &docs, 1.2, 0.75).unwrap(), vec![0, 1, 2]);
        let crafted = vec![toks("x x y"), toks("x y y y z"), toks("z w")];
        let q = toks("x y z");
        let s = bm25_scores(&q, &crafted, 1.2, 0.75);
        for i in 0..3 {
            assert!((s[i] - bm25_brute(&q, &crafted, i)).abs() < 1e-12);
        }
    }

    #[test]
    fn tfidf_examples() {
        let docs = vec![toks("a b"), toks("what color is it"), toks("c")];
        let s = tfidf_scores(&toks("what color is it"), &docs);
        assert!((s[1] - 1.0).abs() < 1e-12);
        assert_eq!(s[0], 0.0);
        assert_eq!(tfidf_rank(&toks("what color is it"), &docs).unwrap()[0], 1);
    }

    #[test]
    fn t_test_known_value() {
        // differences 1,2,3,4,5 → mean 3, sd √2.5, t = 3/(√2.5/√5) = 4.2426
        let a = [2.0, 4.0, 6.0, 8.0, 10.0];
        let b = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = paired_t_test(&a, &b).unwrap();
        assert!((r.t - 18f64.sqrt()).abs() < 1e-12);
        // two-sided p for t = 4.2426 with 4 df is 0.01324
        assert!((r.p_value - 0.013236).abs() < 1e-5, "{}", r.p_value);
    }

    proptest! {
        #[test]
        fn bleu_order_invariant(pairs in prop::collection::vec((prop::collection::vec(0u8..6, 1..8), prop::collection::vec(0u8..6, 1..8)), 1..6), rot in 0usize..6) {
            let to = |v: &Vec<u8>| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
            let c: Vec<_> = pairs.iter().map(|p| to(&p.0)).collect();
            let r: Vec<_> = pairs.iter().map(|p| to(&p.1)).collect();
            let k = rot % c.len();
            let (mut c2, mut r2) = (c.clone(), r.clone());
            c2.rotate_left(k);
            r2.rotate_left(k);
            let a = bleu(&c, &r).unwrap();
            let b = bleu(&c2, &r2).unwrap();
            prop_assert!((a.bleu - b.bleu).abs() < 1e-9 && (a.bleu1 - b.bleu1).abs() < 1e-9);
            prop_assert!((0.0..=100.0 + 1e-9).contains(&a.bleu1));
        }

        #[test]
        fn bm25_monotone_in_tf(extra in 0usize..5, base in prop::collection::vec(0u8..4, 1..6)) {
            let q = toks("t");
            let other = toks("a b t");
            let mut d1: Vec<String> = base.iter().map(|x| x.to_string()).collect();
            d1.push("t".into());
            let mut d2 = d1.clone();
            for _ in 0..extra { d2.push("t".into()); }
            // identical document length so only tf changes
            let mut d1p = d1.clone();
            for _ in 0..extra { d1p.push("pad".into()); }
            let s1 = bm25_scores(&q, &[d1p, other.clone()], 1.2, 0.75)[0];
            let s2 = bm25_scores(&q, &[d2, other], 1.2, 0.75)[0];
            prop_assert!(s2 >= s1 - 1e-12);
        }
    }
}
