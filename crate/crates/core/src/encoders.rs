//! Shared embedding, bidirectional LSTM encoders, the question-aware review
//! reader and gated fusion across reviews.

use crate::data::{ExampleView, PAD, UNK};
use crate::numerics::{Bound, Graph, NumericsError, ParamId, ParamSet, Result, Tensor, Var, INIT_SCALE};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Layer sizes shared by every model component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub embed: usize,
    /// Per-direction encoder size; decoder states have size `2 * hidden`.
    pub hidden: usize,
    /// Convolution filters per kernel width in the critic.
    pub filters: usize,
    /// Shared projection size inside the critic.
    pub proj: usize,
}

impl ModelDims {
    pub fn desk(vocab: usize) -> Self {
        ModelDims {
            vocab,
            embed: 32,
            hidden: 32,
            filters: 16,
            proj: 32,
        }
    }

    pub fn state(&self) -> usize {
        2 * self.hidden
    }
}

pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape.to_vec(), INIT_SCALE, rng)
}

/// Maps extended (copy) ids to UNK so they can index the embedding table.
pub fn embedding_ids(ids: &[usize], vocab: usize) -> Vec<usize> {
    ids.iter().map(|&i| if i >= vocab { UNK } else { i }).collect()
}

/// The single embedding matrix. Row PAD is zero and never receives gradient.
#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn register(ps: &mut ParamSet, dims: &ModelDims, rng: &mut impl Rng) -> Self {
        let mut t = uniform(rng, &[dims.vocab, dims.embed]);
        t.data_mut()[PAD * dims.embed..(PAD + 1) * dims.embed].fill(0.0);
        Embedding { table: ps.add("embedding", t) }
    }

    /// `[ids.len() × E]`; extended ids read the UNK row.
    pub fn embed(&self, g: &mut Graph, b: &Bound, ids: &[usize]) -> Result<Var> {
        let rows = g.shape(b.var(self.table))[0];
        g.gather(b.var(self.table), &embedding_ids(ids, rows), Some(PAD))
    }
}

/// LSTM cell with gates `x·Wx + h·Wh + b` ordered input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

/// Hidden and cell state of one LSTM step.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl Lstm {
    pub fn register(ps: &mut ParamSet, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Lstm {
            wx: ps.add(format!("{prefix}.wx"), uniform(rng, &[input, 4 * hidden])),
            wh: ps.add(format!("{prefix}.wh"), uniform(rng, &[hidden, 4 * hidden])),
            b: ps.add(format!("{prefix}.b"), uniform(rng, &[4 * hidden])),
            hidden,
        }
    }

    pub fn zero_state(&self, g: &mut Graph) -> LstmState {
        LstmState {
            h: g.zeros(vec![self.hidden]),
            c: g.zeros(vec![self.hidden]),
        }
    }

    /// One step given the precomputed input projection `x·Wx` (shape `[4H]`).
    pub fn step_projected(&self, g: &mut Graph, b: &Bound, xw: Var, s: LstmState) -> Result<LstmState> {
        let h = self.hidden;
        let hw = g.matmul(s.h, b.var(self.wh))?;
        let pre = g.add(xw, hw)?;
        let pre = g.add(pre, b.var(self.b))?;
        let i = g.slice(pre, 0, h)?;
        let i = g.sigmoid(i);
        let f = g.slice(pre, h, h)?;
        let f = g.sigmoid(f);
        let cand = g.slice(pre, 2 * h, h)?;
        let cand = g.tanh(cand);
        let o = g.slice(pre, 3 * h, h)?;
        let o = g.sigmoid(o);
        let keep = g.mul(f, s.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    pub fn step(&self, g: &mut Graph, b: &Bound, x: Var, s: LstmState) -> Result<LstmState> {
        let xw = g.matmul(x, b.var(self.wx))?;
        self.step_projected(g, b, xw, s)
    }

    /// Runs over the rows of `xs` (`[n × in]`) from a zero state and returns
    /// the hidden state for each row in input order.
    pub fn run(&self, g: &mut Graph, b: &Bound, xs: Var, reverse: bool) -> Result<Vec<Var>> {
        let n = g.shape(xs)[0];
        let proj = g.matmul(xs, b.var(self.wx))?;
        let mut s = self.zero_state(g);
        let mut out = vec![None; n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            let xw = g.row(proj, t)?;
            s = self.step_projected(g, b, xw, s)?;
            out[t] = Some(s.h);
        }
        Ok(out.into_iter().map(|h| h.expect("every row visited")).collect())
    }
}

/// Forward and backward LSTMs over the same sequence.
#[derive(Clone, Copy, Debug)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

/// Output of [`BiLstm::encode`].
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[T_pad × 2H]`; rows past the real length are zero.
    pub states: Var,
    /// Forward state at the last real token joined with the backward state
    /// at the first token.
    pub last: Var,
    pub len: usize,
}

impl BiLstm {
    pub fn register(ps: &mut ParamSet, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        BiLstm {
            fwd: Lstm::register(ps, &format!("{prefix}.fwd"), input, hidden, rng),
            bwd: Lstm::register(ps, &format!("{prefix}.bwd"), input, hidden, rng),
        }
    }

    /// Encodes `[T_pad × E]` embeddings whose real tokens form the prefix
    /// marked by `mask`.
    pub fn encode(&self, g: &mut Graph, b: &Bound, embedded: Var, mask: &[bool]) -> Result<Encoded> {
        let len = mask.iter().take_while(|m| **m).count();
        if len == 0 {
            return Err(NumericsError::Contract("cannot encode an all-masked sequence".into()));
        }
        if mask[len..].iter().any(|m| *m) {
            return Err(NumericsError::Contract("mask must mark a prefix".into()));
        }
        let xs = g.rows(embedded, 0, len)?;
        let f = self.fwd.run(g, b, xs, false)?;
        let r = self.bwd.run(g, b, xs, true)?;
        let mut rows = Vec::with_capacity(mask.len());
        for t in 0..len {
            rows.push(g.concat(&[f[t], r[t]])?);
        }
        let width = 2 * self.fwd.hidden;
        for _ in len..mask.len() {
            rows.push(g.zeros(vec![width]));
        }
        let states = g.stack_rows(&rows)?;
        let last = g.concat(&[f[len - 1], r[0]])?;
        Ok(Encoded { states, last, len })
    }
}

/// Question-aware attention over review words plus bilinear fusion of the
/// per-review summaries.
#[derive(Clone, Copy, Debug)]
pub struct ReviewReader {
    pub w_q: ParamId,
    pub w_r: ParamId,
    pub v: ParamId,
    pub w_f: ParamId,
}

/// Output of reading one review.
#[derive(Clone, Debug)]
pub struct ReviewSummary {
    /// Attention over the padded review words.
    pub alpha: Var,
    /// `[2H]` attention-pooled review state.
    pub summary: Var,
}

/// Output of [`ReviewReader::fuse`].
#[derive(Clone, Debug)]
pub struct Fused {
    /// Relevance distribution over review slots.
    pub gates: Var,
    /// `[R × 2H]` per-review summaries; padded slots are zero rows.
    pub summaries: Var,
    pub fused: Var,
}

impl ReviewReader {
    pub fn register(ps: &mut ParamSet, dims: &ModelDims, rng: &mut impl Rng) -> Self {
        let (s, h) = (dims.state(), dims.hidden);
        ReviewReader {
            w_q: ps.add("reader.w_q", uniform(rng, &[s, h])),
            w_r: ps.add("reader.w_r", uniform(rng, &[s, h])),
            v: ps.add("reader.v", uniform(rng, &[h])),
            w_f: ps.add("reader.w_f", uniform(rng, &[s, s])),
        }
    }

    /// Scores every review word against every real question step, keeps the
    /// maximum over question steps and pools the review states.
    pub fn read(&self, g: &mut Graph, b: &Bound, question: &Encoded, review: Var, word_mask: &[bool]) -> Result<ReviewSummary> {
        let hq = g.rows(question.states, 0, question.len)?;
        let pq = g.matmul(hq, b.var(self.w_q))?;
        let pr = g.matmul(review, b.var(self.w_r))?;
        let pair = g.pairwise_add(pq, pr)?;
        let act = g.tanh(pair);
        let scores = g.matmul(act, b.var(self.v))?;
        let scores = g.reshape(scores, vec![question.len, word_mask.len()])?;
        let best = g.col_max(scores)?;
        let alpha = g.softmax(best, Some(word_mask))?;
        let summary = g.matmul(alpha, review)?;
        Ok(ReviewSummary { alpha, summary })
    }

    /// Softmax-weights the real review summaries by bilinear relevance to the
    /// question's final state. `summaries` holds one entry per review slot;
    /// `None` marks a padded slot.
    pub fn fuse(&self, g: &mut Graph, b: &Bound, summaries: &[Option<Var>], question_last: Var) -> Result<Fused> {
        if summaries.iter().all(Option::is_none) {
            return Err(NumericsError::Contract("at least one real review is required".into()));
        }
        let width = g.shape(question_last)[0];
        let rows: Vec<Var> = summaries
            .iter()
            .map(|s| s.unwrap_or_else(|| g.zeros(vec![width])))
            .collect();
        let mask: Vec<bool> = summaries.iter().map(Option::is_some).collect();
        let c = g.stack_rows(&rows)?;
        let wq = g.matmul(b.var(self.w_f), question_last)?;
        let u = g.matmul(c, wq)?;
        let gates = g.softmax(u, Some(&mask))?;
        let fused = g.matmul(gates, c)?;
        Ok(Fused { gates, summaries: c, fused })
    }
}

/// Everything the encoder side produces for one example.
#[derive(Clone, Debug)]
pub struct ReaderOutput {
    pub question: Encoded,
    /// Per review slot: encoded states and reader summary (`None` for padding).
    pub reviews: Vec<Option<(Encoded, ReviewSummary)>>,
    pub fusion: Fused,
}

/// Embedding plus both encoders and the review reader.
#[derive(Clone, Copy, Debug)]
pub struct Encoders {
    pub embedding: Embedding,
    pub question: BiLstm,
    pub review: BiLstm,
    pub reader: ReviewReader,
}

impl Encoders {
    pub fn register(ps: &mut ParamSet, dims: &ModelDims, rng: &mut impl Rng) -> Self {
        Encoders {
            embedding: Embedding::register(ps, dims, rng),
            question: BiLstm::register(ps, "enc_q", dims.embed, dims.hidden, rng),
            review: BiLstm::register(ps, "enc_r", dims.embed, dims.hidden, rng),
            reader: ReviewReader::register(ps, dims, rng),
        }
    }

    pub fn run(&self, g: &mut Graph, b: &Bound, ex: &ExampleView) -> Result<ReaderOutput> {
        let qe = self.embedding.embed(g, b, ex.question)?;
        let question = self.question.encode(g, b, qe, ex.question_mask)?;
        let mut reviews = Vec::with_capacity(ex.reviews.len());
        let mut summaries = Vec::with_capacity(ex.reviews.len());
        for ((ids, wmask), &real) in ex.reviews.iter().zip(ex.review_word_mask).zip(ex.review_mask) {
            if !real {
                reviews.push(None);
                summaries.push(None);
                continue;
            }
            let re = self.embedding.embed(g, b, ids)?;
            let enc = self.review.encode(g, b, re, wmask)?;
            let sum = self.reader.read(g, b, &question, enc.states, wmask)?;
            summaries.push(Some(sum.summary));
            reviews.push(Some((enc, sum)));
        }
        let fusion = self.reader.fuse(g, b, &summaries, question.last)?;
        Ok(ReaderOutput { question, reviews, fusion })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fd::{central_difference, max_relative_error, FD_STEP, REL_FLOOR};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small() -> ModelDims {
        ModelDims {
            vocab: 12,
            embed: 4,
            hidden: 3,
            filters: 2,
            proj: 3,
        }
    }

    fn setup(seed: u64) -> (ParamSet, Encoders) {
        let mut ps = ParamSet::new();
        let enc = Encoders::register(&mut ps, &small(), &mut rng(seed));
        (ps, enc)
    }

    fn fill(ps: &mut ParamSet, id: ParamId, v: f64) {
        ps.get_mut(id).data_mut().fill(v);
    }

    #[test]
    fn pad_row_zero_and_frozen() {
        let (ps, enc) = setup(1);
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let e = enc.embedding.embed(&mut g, &b, &[PAD, 5, 5, 40]).unwrap();
        let v = g.value(e).to_vec();
        assert!(v[..4].iter().all(|x| *x == 0.0));
        assert_eq!(v[4..8], v[8..12]);
        let unk = enc.embedding.embed(&mut g, &b, &[UNK]).unwrap();
        assert_eq!(v[12..16], *g.value(unk));
        let loss = g.sum(e);
        let grads = g.backward(loss).unwrap();
        let gt = grads.get(b.var(enc.embedding.table)).unwrap();
        assert!(gt[..4].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn zero_lstm_outputs_zero() {
        let (mut ps, enc) = setup(2);
        for id in [enc.question.fwd.wx, enc.question.fwd.wh, enc.question.fwd.b, enc.question.bwd.wx, enc.question.bwd.wh, enc.question.bwd.b] {
            fill(&mut ps, id, 0.0);
        }
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let e = enc.embedding.embed(&mut g, &b, &[4, 5, 6]).unwrap();
        let out = enc.question.encode(&mut g, &b, e, &[true; 3]).unwrap();
        assert!(g.value(out.states).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn length_one_reads_same_token_both_ways() {
        let (ps, enc) = setup(3);
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let e = enc.embedding.embed(&mut g, &b, &[7, PAD]).unwrap();
        let out = enc.question.encode(&mut g, &b, e, &[true, false]).unwrap();
        assert_eq!(g.value(out.last), &g.value(out.states)[..6]);
        assert!(g.value(out.states)[6..].iter().all(|x| *x == 0.0));
        let e1 = enc.embedding.embed(&mut g, &b, &[7]).unwrap();
        let alone = enc.question.encode(&mut g, &b, e1, &[true]).unwrap();
        assert_eq!(g.value(alone.last), g.value(out.last));
    }

    #[test]
    fn all_masked_is_contract_error() {
        let (ps, enc) = setup(4);
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let e = enc.embedding.embed(&mut g, &b, &[PAD, PAD]).unwrap();
        assert!(matches!(enc.question.encode(&mut g, &b, e, &[false, false]), Err(NumericsError::Contract(_))));
    }

    #[test]
    fn bilstm_gradient_wrt_embedding_matches_fd() {
        let (ps, enc) = setup(5);
        let ids = [4usize, 9, 6, 4];
        let f = |ps: &ParamSet| {
            let mut g = Graph::new();
            let b = ps.bind(&mut g);
            let e = enc.embedding.embed(&mut g, &b, &ids).unwrap();
            let out = enc.question.encode(&mut g, &b, e, &[true; 4]).unwrap();
            let s = g.sum(out.states);
            g.scalar_value(s)
        };
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let e = enc.embedding.embed(&mut g, &b, &ids).unwrap();
        let out = enc.question.encode(&mut g, &b, e, &[true; 4]).unwrap();
        let s = g.sum(out.states);
        let analytic = g.backward(s).unwrap().get(b.var(enc.embedding.table)).unwrap().to_vec();
        drop(g);
        let base = ps.get(enc.embedding.table).data().to_vec();
        let numeric = central_difference(
            |x| {
                let mut p = ps.clone();
                p.get_mut(enc.embedding.table).data_mut().copy_from_slice(x);
                f(&p)
            },
            &base,
            FD_STEP,
        );
        let mut numeric = numeric;
        numeric[..4].fill(0.0); // the PAD row is frozen
        assert!(max_relative_error(&analytic, &numeric, REL_FLOOR) < 1e-4);
    }

    fn read_one(ps: &ParamSet, enc: &Encoders, q: &[usize], r: &[usize], rmask: &[bool]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let qe = enc.embedding.embed(&mut g, &b, q).unwrap();
        let qenc = enc.question.encode(&mut g, &b, qe, &vec![true; q.len()]).unwrap();
        let re = enc.embedding.embed(&mut g, &b, r).unwrap();
        let renc = enc.review.encode(&mut g, &b, re, rmask).unwrap();
        let s = enc.reader.read(&mut g, &b, &qenc, renc.states, rmask).unwrap();
        (g.value(s.alpha).to_vec(), g.value(s.summary).to_vec(), g.value(renc.states).to_vec())
    }

    #[test]
    fn zero_v_gives_mean_of_states() {
        let (mut ps, enc) = setup(6);
        fill(&mut ps, enc.reader.v, 0.0);
        let (alpha, summary, states) = read_one(&ps, &enc, &[4, 5], &[6, 7, 8, PAD], &[true, true, true, false]);
        assert_eq!(alpha[3], 0.0);
        for a in &alpha[..3] {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
        for d in 0..6 {
            let mean = (states[d] + states[6 + d] + states[12 + d]) / 3.0;
            assert!((summary[d] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn question_order_does_not_change_scores_given_same_states() {
        // max over question steps: permuting rows of the question states leaves α unchanged
        let (ps, enc) = setup(7);
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let qe = enc.embedding.embed(&mut g, &b, &[4, 5, 6]).unwrap();
        let q = enc.question.encode(&mut g, &b, qe, &[true; 3]).unwrap();
        let rows: Vec<Var> = (0..3).map(|i| g.row(q.states, i).unwrap()).collect();
        let perm = g.stack_rows(&[rows[2], rows[0], rows[1]]).unwrap();
        let qp = Encoded { states: perm, last: q.last, len: 3 };
        let re = enc.embedding.embed(&mut g, &b, &[7, 8]).unwrap();
        let r = enc.review.encode(&mut g, &b, re, &[true, true]).unwrap();
        let a = enc.reader.read(&mut g, &b, &q, r.states, &[true, true]).unwrap();
        let c = enc.reader.read(&mut g, &b, &qp, r.states, &[true, true]).unwrap();
        assert_eq!(g.value(a.alpha), g.value(c.alpha));
    }

    #[test]
    fn fusion_cases() {
        let (mut ps, enc) = setup(8);
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let q = g.constant(vec![6], vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.1]).unwrap();
        let s1 = g.constant(vec![6], vec![1.0, 2.0, 0.0, -1.0, 0.5, 0.2]).unwrap();
        let s2 = g.constant(vec![6], vec![-0.3, 0.2, 0.9, 0.1, 0.0, 0.4]).unwrap();
        let single = enc.reader.fuse(&mut g, &b, &[Some(s1)], q).unwrap();
        assert_eq!(g.value(single.gates), &[1.0]);
        assert_eq!(g.value(single.fused), g.value(s1));
        let dup = enc.reader.fuse(&mut g, &b, &[Some(s1), Some(s1), None], q).unwrap();
        let gates = g.value(dup.gates).to_vec();
        assert!((gates[0] - 0.5).abs() < 1e-12 && gates[2] == 0.0);
        for (x, y) in g.value(dup.fused).iter().zip(g.value(s1)) {
            assert!((x - y).abs() < 1e-12);
        }
        let both = enc.reader.fuse(&mut g, &b, &[Some(s1), Some(s2)], q).unwrap();
        let swapped = enc.reader.fuse(&mut g, &b, &[Some(s2), Some(s1)], q).unwrap();
        let (gb, gs) = (g.value(both.gates).to_vec(), g.value(swapped.gates).to_vec());
        assert!((gb[0] - gs[1]).abs() < 1e-12);
        for (x, y) in g.value(both.fused).iter().zip(g.value(swapped.fused)) {
            assert!((x - y).abs() < 1e-12);
        }
        drop(g);
        fill(&mut ps, enc.reader.w_f, 0.0);
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let q = g.constant(vec![6], vec![0.1; 6]).unwrap();
        let s1 = g.constant(vec![6], vec![1.0; 6]).unwrap();
        let s2 = g.constant(vec![6], vec![3.0; 6]).unwrap();
        let f = enc.reader.fuse(&mut g, &b, &[Some(s1), Some(s2)], q).unwrap();
        assert!(g.value(f.fused).iter().all(|x| (x - 2.0).abs() < 1e-12));
    }

    #[test]
    fn sharp_score_selects_word() {
        // one word scoring +10 against -10 elsewhere takes almost all mass
        let mut g = Graph::new();
        let s = g.constant(vec![3], vec![-10.0, 10.0, -10.0]).unwrap();
        let a = g.softmax(s, Some(&[true, true, true])).unwrap();
        assert!(g.value(a)[1] > 0.999);
    }
}
