//! Consistency critic over decoder-state sequences.
//!
//! Three streams are scored: ground truth (an LSTM over the reference answer
//! bridged into decoder-state space), the decoder's own output states with
//! facts, and the same decoder run with the facts removed.

use crate::encoders::{uniform, Lstm, ModelDims};
use crate::numerics::{Bound, Graph, NumericsError, ParamId, ParamSet, Result, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const KERNEL_WIDTHS: [usize; 3] = [1, 2, 3];

/// How a sequence is turned into one critic score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CriticMode {
    /// Convolve and pool over the whole sequence.
    #[default]
    Sequence,
    /// Score each state alone and average.
    PerStep,
}

/// Which gradient norm the penalty constrains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PenaltyNorm {
    /// `(1/T) Σ_t (‖∂D/∂d'_t‖ - 1)²`.
    PerStep,
    /// `(‖∂D/∂d'‖ - 1)²` over the flattened sequence.
    #[default]
    Sequence,
}

/// How the two decoder streams enter the Wasserstein critic loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FakeTerms {
    /// `(D(d^f) + D(d^o)) / 2 - D(d^g)`; invariant to a constant score shift.
    #[default]
    Mean,
    /// `D(d^f) + D(d^o) - D(d^g)`; a constant shift lowers it without bound.
    Sum,
}

/// Settings of one Wasserstein critic loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WassersteinTerms {
    /// Gradient-penalty weight.
    pub lambda: f64,
    /// Interpolation weight of the decoder stream, drawn from U[0, 1].
    pub epsilon: f64,
    pub norm: PenaltyNorm,
    pub fakes: FakeTerms,
}

/// Generator-side objective of the vanilla (sigmoid) critic.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum VanillaGeneratorLoss {
    /// `log(1 - σ(D))`, which vanishes once the critic saturates.
    #[default]
    Minimax,
    /// `-log σ(D)`.
    NonSaturating,
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub truth: Lstm,
    pub w_z: ParamId,
    pub b_z: ParamId,
    pub convs: Vec<Conv>,
    pub p_n: ParamId,
    pub p_m: ParamId,
    pub p_c: ParamId,
    pub b_s: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
    pub mode: CriticMode,
}

/// A critic evaluation.
#[derive(Clone, Copy, Debug)]
pub struct CriticScore {
    pub score: Var,
    /// Max-pooled convolution features (for per-step mode, of the last step).
    pub pooled: Var,
}

/// The three time-aligned streams of one example.
#[derive(Clone, Copy, Debug)]
pub struct Streams {
    pub truth: Var,
    pub with_facts: Var,
    pub no_facts: Var,
    pub memory: Var,
    pub fused: Var,
}

/// Scalars reported for one critic loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct CriticLoss {
    pub loss: Var,
    pub d_real: Var,
    pub d_fake_facts: Var,
    pub d_fake_nofacts: Var,
    /// Penalty before multiplying by λ.
    pub penalty: Var,
    /// Mean interpolate gradient norm (per row or per sequence).
    pub grad_norm_mean: f64,
}

impl Discriminator {
    pub fn register(ps: &mut ParamSet, dims: &ModelDims, mode: CriticMode, rng: &mut impl Rng) -> Self {
        let (s, f, p) = (dims.state(), dims.filters, dims.proj);
        let truth = Lstm::register(ps, "disc.truth", dims.embed, s, rng);
        let w_z = ps.add("disc.w_z", uniform(rng, &[s, s]));
        let b_z = ps.add("disc.b_z", uniform(rng, &[s]));
        let convs = KERNEL_WIDTHS
            .iter()
            .map(|&k| Conv {
                w: ps.add(format!("disc.conv{k}.w"), uniform(rng, &[k * s, f])),
                b: ps.add(format!("disc.conv{k}.b"), uniform(rng, &[f])),
                width: k,
            })
            .collect();
        Discriminator {
            truth,
            w_z,
            b_z,
            convs,
            p_n: ps.add("disc.p_n", uniform(rng, &[KERNEL_WIDTHS.len() * f, p])),
            p_m: ps.add("disc.p_m", uniform(rng, &[dims.embed, p])),
            p_c: ps.add("disc.p_c", uniform(rng, &[s, p])),
            b_s: ps.add("disc.b_s", uniform(rng, &[p])),
            w_h: ps.add("disc.w_h", uniform(rng, &[p])),
            b_h: ps.add("disc.b_h", uniform(rng, &[1])),
            mode,
        }
    }

    /// Parameters of the ground-truth encoder (LSTM and bridge). The critic
    /// update holds them fixed: if the critic could move the ground-truth
    /// stream, it could raise `D(d^g)` without bound.
    pub fn is_truth_param(name: &str) -> bool {
        name.starts_with("disc.truth") || name == "disc.w_z" || name == "disc.b_z"
    }

    /// Ground-truth stream: LSTM over the answer embeddings (`[T × E]`,
    /// expected detached) followed by a per-step linear bridge.
    pub fn encode_truth(&self, g: &mut Graph, b: &Bound, embedded: Var) -> Result<Var> {
        let hs = self.truth.run(g, b, embedded, false)?;
        let h = g.stack_rows(&hs)?;
        let z = g.matmul(h, b.var(self.w_z))?;
        g.add(z, b.var(self.b_z))
    }

    fn widest(&self) -> usize {
        self.convs.iter().map(|c| c.width).max().unwrap_or(1)
    }

    /// Convolution features of the first `len` rows of `states`; rows past
    /// `len` are ignored by pooling.
    pub fn pool(&self, g: &mut Graph, b: &Bound, states: Var, len: usize) -> Result<Var> {
        let shape = g.shape(states).to_vec();
        if len == 0 || len > shape[0] {
            return Err(NumericsError::Contract(format!("critic length {len} for {} rows", shape[0])));
        }
        let rows = shape[0];
        let x = if rows < self.widest() {
            let z = g.zeros(vec![self.widest() - rows, shape[1]]);
            g.concat_rows(&[states, z])?
        } else {
            states
        };
        let mut feats = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            let u = g.unfold(x, c.width)?;
            let windows = len.saturating_sub(c.width) + 1;
            let u = g.rows(u, 0, windows)?;
            let pre = g.matmul(u, b.var(c.w))?;
            let pre = g.add(pre, b.var(c.b))?;
            let act = g.relu(pre);
            feats.push(g.col_max(act)?);
        }
        g.concat(&feats)
    }

    fn head(&self, g: &mut Graph, b: &Bound, pooled: Var, memory: Var, fused: Var) -> Result<Var> {
        let n = g.matmul(pooled, b.var(self.p_n))?;
        let m = g.matmul(memory, b.var(self.p_m))?;
        let c = g.matmul(fused, b.var(self.p_c))?;
        let s = g.add_all(&[n, m, c, b.var(self.b_s)])?;
        let s = g.relu(s);
        let out = g.matmul(s, b.var(self.w_h))?;
        g.add(out, b.var(self.b_h))
    }

    /// Critic score of the first `len` rows of `states` against the facts.
    pub fn score(&self, g: &mut Graph, b: &Bound, states: Var, len: usize, memory: Var, fused: Var) -> Result<CriticScore> {
        match self.mode {
            CriticMode::Sequence => {
                let pooled = self.pool(g, b, states, len)?;
                let score = self.head(g, b, pooled, memory, fused)?;
                Ok(CriticScore { score, pooled })
            }
            CriticMode::PerStep => {
                let mut scores = Vec::with_capacity(len);
                let mut pooled = None;
                for t in 0..len {
                    let row = g.rows(states, t, 1)?;
                    let p = self.pool(g, b, row, 1)?;
                    scores.push(self.head(g, b, p, memory, fused)?);
                    pooled = Some(p);
                }
                let total = g.add_all(&scores)?;
                let score = g.scale(total, 1.0 / len as f64);
                Ok(CriticScore { score, pooled: pooled.expect("len >= 1") })
            }
        }
    }

    fn full(&self, g: &mut Graph, b: &Bound, states: Var, memory: Var, fused: Var) -> Result<Var> {
        let len = g.shape(states)[0];
        Ok(self.score(g, b, states, len, memory, fused)?.score)
    }

    /// Fake terms minus `D(d^g)` plus `λ·penalty` at the interpolate
    /// `ε d^o + (1-ε) d^g`.
    pub fn wasserstein_loss(&self, g: &mut Graph, b: &Bound, s: &Streams, t: WassersteinTerms) -> Result<CriticLoss> {
        check_aligned(g, s)?;
        let d_real = self.full(g, b, s.truth, s.memory, s.fused)?;
        let d_fake_facts = self.full(g, b, s.with_facts, s.memory, s.fused)?;
        let d_fake_nofacts = self.full(g, b, s.no_facts, s.memory, s.fused)?;
        let interp = interpolate(g, s.with_facts, s.truth, t.epsilon)?;
        let d_interp = self.full(g, b, interp, s.memory, s.fused)?;
        let (penalty, grad_norm_mean) = gradient_penalty(g, d_interp, interp, t.norm)?;
        let neg_real = g.neg(d_real);
        let weighted = g.scale(penalty, t.lambda);
        let fakes = g.add(d_fake_nofacts, d_fake_facts)?;
        let fakes = match t.fakes {
            FakeTerms::Mean => g.scale(fakes, 0.5),
            FakeTerms::Sum => fakes,
        };
        let loss = g.add_all(&[fakes, neg_real, weighted])?;
        Ok(CriticLoss { loss, d_real, d_fake_facts, d_fake_nofacts, penalty, grad_norm_mean })
    }

    /// Binary cross-entropy with `σ(D)`: ground truth labelled 1, decoder
    /// output labelled 0.
    pub fn vanilla_loss(&self, g: &mut Graph, b: &Bound, s: &Streams) -> Result<CriticLoss> {
        check_aligned(g, s)?;
        let d_real = self.full(g, b, s.truth, s.memory, s.fused)?;
        let d_fake_facts = self.full(g, b, s.with_facts, s.memory, s.fused)?;
        let d_fake_nofacts = self.full(g, b, s.no_facts, s.memory, s.fused)?;
        let loss = bce_pair(g, d_real, d_fake_facts)?;
        let penalty = g.scalar(0.0);
        Ok(CriticLoss { loss, d_real, d_fake_facts, d_fake_nofacts, penalty, grad_norm_mean: 0.0 })
    }
}

fn check_aligned(g: &Graph, s: &Streams) -> Result<()> {
    let (a, o, f) = (g.shape(s.truth), g.shape(s.with_facts), g.shape(s.no_facts));
    if a != o || a != f {
        return Err(NumericsError::Contract(format!("stream shapes differ: {a:?} {o:?} {f:?}")));
    }
    Ok(())
}

/// `ε·fake + (1-ε)·real`.
pub fn interpolate(g: &mut Graph, fake: Var, real: Var, epsilon: f64) -> Result<Var> {
    let a = g.scale(fake, epsilon);
    let c = g.scale(real, 1.0 - epsilon);
    g.add(a, c)
}

/// Squared deviation of the gradient norm of `score` w.r.t. `input` from 1.
/// Returns the differentiable penalty and the mean norm.
pub fn gradient_penalty(g: &mut Graph, score: Var, input: Var, norm: PenaltyNorm) -> Result<(Var, f64)> {
    let grad = g.grad_of(score, input)?;
    let shape = g.shape(input).to_vec();
    let rows = if shape.len() == 2 && norm == PenaltyNorm::PerStep { shape[0] } else { 1 };
    let flat = g.reshape(grad, vec![rows, g.value(grad).len() / rows])?;
    let mut terms = Vec::with_capacity(rows);
    let mut norm_sum = 0.0;
    for t in 0..rows {
        let r = g.row(flat, t)?;
        let n = g.norm(r);
        norm_sum += g.scalar_value(n);
        let dev = g.affine(n, 1.0, -1.0);
        terms.push(g.mul(dev, dev)?);
    }
    let total = g.add_all(&terms)?;
    Ok((g.scale(total, 1.0 / rows as f64), norm_sum / rows as f64))
}

/// `-log σ(real) - log(1 - σ(fake))`.
pub fn bce_pair(g: &mut Graph, real: Var, fake: Var) -> Result<Var> {
    let nr = g.neg(real);
    let a = g.softplus(nr);
    let c = g.softplus(fake);
    g.add(a, c)
}

/// Adversarial term added to the generator loss for a critic score of the
/// decoder's output stream.
pub fn generator_adversarial(g: &mut Graph, d_fake: Var, vanilla: Option<VanillaGeneratorLoss>) -> Var {
    match vanilla {
        None => g.neg(d_fake),
        Some(VanillaGeneratorLoss::Minimax) => {
            let sp = g.softplus(d_fake);
            g.neg(sp)
        }
        Some(VanillaGeneratorLoss::NonSaturating) => {
            let n = g.neg(d_fake);
            g.softplus(n)
        }
    }
}
