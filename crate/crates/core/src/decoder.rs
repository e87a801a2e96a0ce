//! Facts decoder: LSTM started from the fused facts, attention over question
//! and review states, a balanced gate between the two contexts, vocabulary
//! softmax and a copy distribution over question words.

use crate::data::{EOS, SOS, UNK};
use crate::encoders::{uniform, Embedding, Lstm, LstmState, ModelDims};
use crate::numerics::{Bound, Graph, NumericsError, ParamId, ParamSet, Result, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Added inside the log of the target probability.
pub const LOG_EPS: f64 = 1e-20;

/// Additive attention `zᵀ tanh(W_s h_i + W_d d)`; `W_d` is shared.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub w_s: ParamId,
    pub z: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Decoder {
    pub w_e: ParamId,
    pub b_e: ParamId,
    pub lstm: Lstm,
    pub w_d: ParamId,
    pub att_q: Attention,
    pub att_r: Attention,
    pub w_g: ParamId,
    pub b_g: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_p: ParamId,
    pub b_p: ParamId,
    pub dims: ModelDims,
}

/// Everything the decoder conditions on for one example.
#[derive(Clone, Debug)]
pub struct Facts {
    /// `[T_q × 2H]` padded question states.
    pub question_states: Var,
    pub question_mask: Vec<bool>,
    /// Question ids (extended ids kept) used to scatter copy mass.
    pub question_ids: Vec<usize>,
    pub question_last: Var,
    /// Attribute readout `[E]`.
    pub memory: Var,
    /// Fused review summary `[2H]`.
    pub fused: Var,
    /// Rows attended by the review attention `[N × 2H]`.
    pub review_states: Var,
    pub review_mask: Vec<bool>,
    /// `|V| + #OOV` for this example.
    pub extended: usize,
}

/// Per-example decoder inputs with cached attention projections.
#[derive(Clone, Debug)]
pub struct Context {
    pub facts: Facts,
    proj_q: Var,
    proj_r: Var,
    /// When false the review context is forced to zero (no-facts stream).
    pub review_context: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub lstm: LstmState,
    /// Previous context `[γ g^r; (1-γ) g^q]`, `[4H]`.
    pub context: Var,
}

/// One decoding step.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// Distribution over `|V| + #OOV`.
    pub mixed: Var,
    pub vocab: Var,
    pub beta_q: Var,
    pub beta_r: Var,
    pub gamma: Var,
    pub p_gen: Var,
    /// Output state `W_o[d; g] + b_o`, the sequence the critic reads.
    pub out: Var,
    pub state: DecoderState,
}

/// Result of greedy or beam decoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub gates: Vec<f64>,
    pub p_gen: Vec<f64>,
}

impl GenerationTrace {
    /// Total log-probability divided by the number of emitted tokens.
    pub fn normalized(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }
}

impl Decoder {
    pub fn register(ps: &mut ParamSet, dims: &ModelDims, rng: &mut impl Rng) -> Self {
        let (e, h, s, v) = (dims.embed, dims.hidden, dims.state(), dims.vocab);
        let ctx = 2 * s;
        let mut att = |name: &str, ps: &mut ParamSet| Attention {
            w_s: ps.add(format!("dec.{name}.w_s"), uniform(rng, &[s, h])),
            z: ps.add(format!("dec.{name}.z"), uniform(rng, &[h])),
        };
        let att_q = att("att_q", ps);
        let att_r = att("att_r", ps);
        Decoder {
            w_e: ps.add("dec.w_e", uniform(rng, &[e + 2 * s, s])),
            b_e: ps.add("dec.b_e", uniform(rng, &[s])),
            lstm: Lstm::register(ps, "dec.lstm", ctx + e, s, rng),
            w_d: ps.add("dec.w_d", uniform(rng, &[s, h])),
            att_q,
            att_r,
            w_g: ps.add("dec.w_g", uniform(rng, &[s])),
            b_g: ps.add("dec.b_g", uniform(rng, &[1])),
            w_o: ps.add("dec.w_o", uniform(rng, &[s + ctx, s])),
            b_o: ps.add("dec.b_o", uniform(rng, &[s])),
            w_v: ps.add("dec.w_v", uniform(rng, &[s, v])),
            b_v: ps.add("dec.b_v", uniform(rng, &[v])),
            w_p: ps.add("dec.w_p", uniform(rng, &[s + ctx + e])),
            b_p: ps.add("dec.b_p", uniform(rng, &[1])),
            dims: *dims,
        }
    }

    pub fn prepare(&self, g: &mut Graph, b: &Bound, facts: Facts, review_context: bool) -> Result<Context> {
        let proj_q = g.matmul(facts.question_states, b.var(self.att_q.w_s))?;
        let proj_r = g.matmul(facts.review_states, b.var(self.att_r.w_s))?;
        Ok(Context { facts, proj_q, proj_r, review_context })
    }

    /// `d_0 = [m; h_q; c_r]·W_e + b_e` with a zero cell and zero context.
    pub fn init_state(&self, g: &mut Graph, b: &Bound, ctx: &Context) -> Result<DecoderState> {
        let f = &ctx.facts;
        let x = g.concat(&[f.memory, f.question_last, f.fused])?;
        let d = g.matmul(x, b.var(self.w_e))?;
        let d = g.add(d, b.var(self.b_e))?;
        Ok(DecoderState {
            lstm: LstmState { h: d, c: g.zeros(vec![self.dims.state()]) },
            context: g.zeros(vec![2 * self.dims.state()]),
        })
    }

    fn attend(&self, g: &mut Graph, b: &Bound, att: &Attention, proj: Var, wd: Var, states: Var, mask: &[bool]) -> Result<(Var, Var)> {
        let pre = g.add(proj, wd)?;
        let act = g.tanh(pre);
        let scores = g.matmul(act, b.var(att.z))?;
        let beta = g.softmax(scores, Some(mask))?;
        let pooled = g.matmul(beta, states)?;
        Ok((beta, pooled))
    }

    /// Advances one step from `state` after emitting `prev`.
    pub fn step(&self, g: &mut Graph, b: &Bound, emb: &Embedding, ctx: &Context, state: &DecoderState, prev: usize) -> Result<StepOutput> {
        let f = &ctx.facts;
        let e = emb.embed(g, b, &[prev])?;
        let e = g.reshape(e, vec![self.dims.embed])?;
        let x = g.concat(&[state.context, e])?;
        let lstm = self.lstm.step(g, b, x, state.lstm)?;
        let d = lstm.h;
        let wd = g.matmul(d, b.var(self.w_d))?;
        let (beta_q, gq) = self.attend(g, b, &self.att_q, ctx.proj_q, wd, f.question_states, &f.question_mask)?;
        let (beta_r, gr) = self.attend(g, b, &self.att_r, ctx.proj_r, wd, f.review_states, &f.review_mask)?;
        let gr = if ctx.review_context { gr } else { g.zeros(vec![self.dims.state()]) };
        let gate = g.matmul(d, b.var(self.w_g))?;
        let gate = g.add(gate, b.var(self.b_g))?;
        let gamma = g.sigmoid(gate);
        let rev = g.mul(gr, gamma)?;
        let not_gamma = g.one_minus(gamma);
        let que = g.mul(gq, not_gamma)?;
        let context = g.concat(&[rev, que])?;
        let dg = g.concat(&[d, context])?;
        let out = g.matmul(dg, b.var(self.w_o))?;
        let out = g.add(out, b.var(self.b_o))?;
        let logits = g.matmul(out, b.var(self.w_v))?;
        let logits = g.add(logits, b.var(self.b_v))?;
        let vocab = g.softmax(logits, None)?;
        let dge = g.concat(&[dg, e])?;
        let pg = g.matmul(dge, b.var(self.w_p))?;
        let pg = g.add(pg, b.var(self.b_p))?;
        let p_gen = g.sigmoid(pg);
        let mixed = self.mix(g, vocab, beta_q, p_gen, &f.question_ids, f.extended)?;
        Ok(StepOutput {
            mixed,
            vocab,
            beta_q,
            beta_r,
            gamma,
            p_gen,
            out,
            state: DecoderState { lstm, context },
        })
    }

    /// `p_gen·[P_v; 0] + (1-p_gen)·scatter(β_q → question ids)`.
    pub fn mix(&self, g: &mut Graph, vocab: Var, beta_q: Var, p_gen: Var, question_ids: &[usize], extended: usize) -> Result<Var> {
        let v = g.shape(vocab)[0];
        let padded = if extended > v {
            let z = g.zeros(vec![extended - v]);
            g.concat(&[vocab, z])?
        } else {
            vocab
        };
        let gen = g.mul(padded, p_gen)?;
        let copy = g.scatter_add(beta_q, question_ids, extended)?;
        let copy_w = g.one_minus(p_gen);
        let copy = g.mul(copy, copy_w)?;
        g.add(gen, copy)
    }

    fn feed(&self, id: usize) -> usize {
        if id >= self.dims.vocab {
            UNK
        } else {
            id
        }
    }

    /// Runs the decoder on the reference answer (`answer` ends with EOS).
    /// Returns the mean per-token negative log-likelihood and every step.
    pub fn teacher_forced(&self, g: &mut Graph, b: &Bound, emb: &Embedding, ctx: &Context, answer: &[usize]) -> Result<(Var, Vec<StepOutput>)> {
        if answer.is_empty() {
            return Err(NumericsError::Contract("empty reference answer".into()));
        }
        if let Some(&bad) = answer.iter().find(|&&y| y >= ctx.facts.extended) {
            return Err(NumericsError::Contract(format!(
                "reference id {bad} outside the extended vocabulary of size {}",
                ctx.facts.extended
            )));
        }
        let mut state = self.init_state(g, b, ctx)?;
        let mut prev = SOS;
        let mut steps = Vec::with_capacity(answer.len());
        let mut nll = Vec::with_capacity(answer.len());
        for &y in answer {
            let out = self.step(g, b, emb, ctx, &state, self.feed(prev))?;
            let p = g.slice(out.mixed, y, 1)?;
            let p = g.affine(p, 1.0, LOG_EPS);
            let lp = g.log(p)?;
            nll.push(g.neg(lp));
            state = out.state;
            prev = y;
            steps.push(out);
        }
        let total = g.add_all(&nll)?;
        let loss = g.scale(total, 1.0 / answer.len() as f64);
        Ok((loss, steps))
    }

    /// Argmax decoding; the lower id wins ties.
    pub fn greedy(&self, g: &mut Graph, b: &Bound, emb: &Embedding, ctx: &Context, max_len: usize) -> Result<GenerationTrace> {
        let mut state = self.init_state(g, b, ctx)?;
        let mut prev = SOS;
        let mut trace = GenerationTrace { tokens: vec![], log_prob: 0.0, gates: vec![], p_gen: vec![] };
        for _ in 0..max_len {
            let out = self.step(g, b, emb, ctx, &state, self.feed(prev))?;
            let dist = g.value(out.mixed);
            let (best, p) = argmax(dist);
            trace.tokens.push(best);
            trace.log_prob += (p + LOG_EPS).ln();
            trace.gates.push(g.scalar_value(out.gamma));
            trace.p_gen.push(g.scalar_value(out.p_gen));
            state = out.state;
            prev = best;
            if best == EOS {
                break;
            }
        }
        Ok(trace)
    }

    /// Length-normalized beam search. Hypotheses end at EOS or `max_len`;
    /// the greedy path competes in the final selection so the result never
    /// scores below greedy.
    pub fn beam(&self, g: &mut Graph, b: &Bound, emb: &Embedding, ctx: &Context, width: usize, max_len: usize) -> Result<GenerationTrace> {
        if width == 0 {
            return Err(NumericsError::Contract("beam width must be at least 1".into()));
        }
        let greedy = self.greedy(g, b, emb, ctx, max_len)?;
        if width == 1 {
            return Ok(greedy);
        }
        let init = self.init_state(g, b, ctx)?;
        let mut live = vec![Hyp { trace: GenerationTrace { tokens: vec![], log_prob: 0.0, gates: vec![], p_gen: vec![] }, state: init }];
        let mut finished: Vec<GenerationTrace> = Vec::new();
        for t in 0..max_len {
            let mut cands: Vec<(f64, usize, usize, StepOutput)> = Vec::new();
            for (h, hyp) in live.iter().enumerate() {
                let prev = hyp.trace.tokens.last().copied().unwrap_or(SOS);
                let out = self.step(g, b, emb, ctx, &hyp.state, self.feed(prev))?;
                for (tok, p) in g.value(out.mixed).iter().enumerate() {
                    cands.push((hyp.trace.log_prob + (p + LOG_EPS).ln(), h, tok, out));
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            cands.truncate(width);
            let mut next = Vec::with_capacity(width);
            for (lp, h, tok, out) in cands {
                let mut trace = live[h].trace.clone();
                trace.tokens.push(tok);
                trace.log_prob = lp;
                trace.gates.push(g.scalar_value(out.gamma));
                trace.p_gen.push(g.scalar_value(out.p_gen));
                if tok == EOS || t + 1 == max_len {
                    finished.push(trace);
                } else {
                    next.push(Hyp { trace, state: out.state });
                }
            }
            live = next;
            if live.is_empty() {
                break;
            }
        }
        finished.push(greedy);
        Ok(best_trace(finished))
    }
}

struct Hyp {
    trace: GenerationTrace,
    state: DecoderState,
}

fn argmax(xs: &[f64]) -> (usize, f64) {
    let mut best = (0, xs[0]);
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

/// Highest normalized log-probability; ties go to the lexicographically
/// smaller token sequence.
pub fn best_trace(traces: Vec<GenerationTrace>) -> GenerationTrace {
    traces
        .into_iter()
        .reduce(|a, b| {
            match b.normalized().total_cmp(&a.normalized()) {
                std::cmp::Ordering::Greater => b,
                std::cmp::Ordering::Less => a,
                std::cmp::Ordering::Equal => {
                    if b.tokens < a.tokens {
                        b
                    } else {
                        a
                    }
                }
            }
        })
        .expect("at least one trace")
}
