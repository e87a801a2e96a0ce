//! Finite-difference audit of every differentiable graph operation, the
//! model building blocks and the end-to-end losses.
//!
//! Each check differentiates a scalar in reverse mode and compares every
//! input coordinate with a central difference of the same scalar evaluated
//! by forward passes only.

use crate::data::{encode_example, Batch, EncodeStats, QAExample, RawExample, Vocabulary};
use crate::discriminator::{gradient_penalty, CriticMode, Discriminator, FakeTerms, PenaltyNorm, VanillaGeneratorLoss};
use crate::encoders::{Lstm, ModelDims};
use crate::error::Result;
use crate::model::{Model, ModelOptions, Variant};
use crate::numerics::fd::{central_difference, max_relative_error, FD_STEP, REL_FLOOR};
use crate::numerics::{Bound, Graph, ParamSet, Var};
use crate::train::{critic_loss, generator_objective, generator_pass};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fmt::Write as _;

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    /// Number of input coordinates compared.
    pub coordinates: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn worst(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{} {:<34} max_rel_err {:.3e} over {} coords",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.max_rel_error,
                c.coordinates
            );
        }
        let _ = writeln!(
            out,
            "{} checks, worst {:.3e}, tolerance {:.0e}: {}",
            self.checks.len(),
            self.worst(),
            self.tolerance,
            if self.passed() { "ok" } else { "FAILED" }
        );
        out
    }
}

fn result(name: &str, err: f64, coordinates: usize) -> CheckResult {
    CheckResult { name: name.to_string(), max_rel_error: err, coordinates, passed: err.is_finite() && err < TOLERANCE }
}

/// Graph builder over leaf inputs.
pub type OpBuilder<'a> = dyn Fn(&mut Graph, &[Var]) -> crate::numerics::Result<Var> + 'a;

/// Checks `sum(f(inputs) ⊙ w)` for a fixed random `w` against central
/// differences in every input coordinate.
pub fn check_op(name: &str, inputs: &[(Vec<usize>, Vec<f64>)], f: &OpBuilder, seed: u64) -> Result<CheckResult> {
    let forward = |vals: &[Vec<f64>], w: Option<&[f64]>| -> Result<(f64, Vec<usize>)> {
        let mut g = Graph::new();
        let mut vars = Vec::with_capacity(inputs.len());
        for ((shape, _), v) in inputs.iter().zip(vals) {
            vars.push(g.leaf(shape.clone(), v.clone(), true)?);
        }
        let out = f(&mut g, &vars)?;
        let value = w.map_or(0.0, |w| g.value(out).iter().zip(w).map(|(a, b)| a * b).sum());
        Ok((value, g.shape(out).to_vec()))
    };
    let data: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let (_, out_shape) = forward(&data, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..out_shape.iter().product::<usize>()).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut g = Graph::new();
    let mut vars = Vec::with_capacity(inputs.len());
    for (shape, d) in inputs {
        vars.push(g.leaf(shape.clone(), d.clone(), true)?);
    }
    let out = f(&mut g, &vars)?;
    let wv = g.constant(out_shape, w.clone())?;
    let prod = g.mul(out, wv)?;
    let loss = g.sum(prod);
    let grads = g.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut coords = 0;
    let mut failure = None;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, data[i].len()).to_vec();
        let numeric = central_difference(
            |x| {
                let mut vals = data.clone();
                vals[i] = x.to_vec();
                match forward(&vals, Some(&w)) {
                    Ok((v, _)) => v,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            &data[i],
            FD_STEP,
        );
        coords += data[i].len();
        worst = worst.max(max_relative_error(&analytic, &numeric, REL_FLOOR));
    }
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(result(name, worst, coords))
}

/// Scalar loss over two bound parameter sets: the first is bound frozen,
/// the second binds the tensors selected by `trainable`.
pub type ParamLoss<'a> = dyn Fn(&mut Graph, &Bound, &Bound) -> Result<Var> + 'a;

/// Checks the gradient of `loss` with respect to every trainable tensor of
/// `params`, with `fixed` held constant.
pub fn check_params(name: &str, fixed: &ParamSet, params: &ParamSet, trainable: &dyn Fn(&str) -> bool, loss: &ParamLoss) -> Result<CheckResult> {
    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let fb = fixed.bind_frozen(&mut g);
        let b = ps.bind_where(&mut g, trainable);
        let l = loss(&mut g, &fb, &b)?;
        Ok(g.scalar_value(l))
    };
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let fb = fixed.bind_frozen(&mut g);
        let b = params.bind_where(&mut g, trainable);
        let l = loss(&mut g, &fb, &b)?;
        let grads = g.backward(l)?;
        b.vars().iter().zip(params.iter()).map(|(v, (_, t))| grads.get_or_zeros(*v, t.len()).to_vec()).collect()
    };
    let mut work = params.clone();
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    let mut failure = None;
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        if !trainable(params.name(id)) {
            continue;
        }
        let original = params.get(id).data().to_vec();
        let numeric = central_difference(
            |x| {
                work.get_mut(id).data_mut().copy_from_slice(x);
                match eval(&work) {
                    Ok(v) => v,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            &original,
            FD_STEP,
        );
        work.get_mut(id).data_mut().copy_from_slice(&original);
        coords += original.len();
        worst = worst.max(max_relative_error(&analytic[i], &numeric, REL_FLOOR));
    }
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(result(name, worst, coords))
}

fn rand_data(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    (shape.to_vec(), (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-1.5..1.5)).collect())
}

fn positive_data(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    (shape.to_vec(), (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(0.3..2.0)).collect())
}

/// Widens the initialization so nonlinearities leave their linear regime.
pub(crate) fn rescale(ps: &mut ParamSet, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        for v in ps.get_mut(id).data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

/// One check per operation on shapes drawn from `seed`.
fn op_checks(seed: u64, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k, j, l) = (rng.gen_range(1..=4), rng.gen_range(1..=5), rng.gen_range(1..=4), rng.gen_range(4..=8));
    let (t, d) = (rng.gen_range(4..=6), rng.gen_range(1..=3));
    let mask: Vec<bool> = (0..l).map(|i| i == 0 || rng.gen_bool(0.6)).collect();
    let gather_ids: Vec<usize> = (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(0..t)).collect();
    let scatter_ids: Vec<usize> = (0..l).map(|_| rng.gen_range(0..5)).collect();
    let mut r = |s: &[usize]| rand_data(&mut rng, s);
    let a34 = r(&[n, k]);
    let b42 = r(&[k, j]);
    let v4 = r(&[k]);
    let c34 = r(&[n, k]);
    let m43 = r(&[k, j]);
    let s1 = r(&[1]);
    let m53 = r(&[t, j]);
    let m24 = r(&[n, k]);
    let v6 = r(&[l]);
    let m32 = r(&[n, d]);
    let m42 = r(&[j, d]);
    let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let p34 = positive_data(&mut prng, &[n, k]);

    type Case<'a> = (&'static str, Vec<(Vec<usize>, Vec<f64>)>, Box<OpBuilder<'a>>);
    let cases: Vec<Case> = vec![
        ("matmul", vec![a34.clone(), b42.clone()], Box::new(|g, x| g.matmul(x[0], x[1]))),
        ("matmul (vector x matrix)", vec![v4.clone(), b42.clone()], Box::new(|g, x| g.matmul(x[0], x[1]))),
        ("matmul (matrix x vector)", vec![a34.clone(), v4.clone()], Box::new(|g, x| g.matmul(x[0], x[1]))),
        ("transpose", vec![a34.clone()], Box::new(|g, x| g.transpose(x[0]))),
        ("add (broadcast row)", vec![a34.clone(), v4.clone()], Box::new(|g, x| g.add(x[0], x[1]))),
        ("mul", vec![a34.clone(), c34.clone()], Box::new(|g, x| g.mul(x[0], x[1]))),
        ("mul (broadcast scalar)", vec![a34.clone(), s1.clone()], Box::new(|g, x| g.mul(x[0], x[1]))),
        ("sub", vec![a34.clone(), c34.clone()], Box::new(|g, x| g.sub(x[0], x[1]))),
        ("affine", vec![a34.clone()], Box::new(|g, x| Ok(g.affine(x[0], -1.7, 0.3)))),
        ("neg", vec![a34.clone()], Box::new(|g, x| Ok(g.neg(x[0])))),
        ("scale", vec![a34.clone()], Box::new(|g, x| Ok(g.scale(x[0], 2.5)))),
        ("one_minus", vec![a34.clone()], Box::new(|g, x| Ok(g.one_minus(x[0])))),
        ("tanh", vec![a34.clone()], Box::new(|g, x| Ok(g.tanh(x[0])))),
        ("sigmoid", vec![a34.clone()], Box::new(|g, x| Ok(g.sigmoid(x[0])))),
        ("relu", vec![a34.clone()], Box::new(|g, x| Ok(g.relu(x[0])))),
        ("exp", vec![a34.clone()], Box::new(|g, x| Ok(g.exp(x[0])))),
        ("softplus", vec![a34.clone()], Box::new(|g, x| Ok(g.softplus(x[0])))),
        ("log", vec![p34.clone()], Box::new(|g, x| g.log(x[0]))),
        ("sum", vec![a34.clone()], Box::new(|g, x| Ok(g.sum(x[0])))),
        ("mean", vec![a34.clone()], Box::new(|g, x| Ok(g.mean(x[0])))),
        ("norm", vec![a34.clone()], Box::new(|g, x| Ok(g.norm(x[0])))),
        ("add_all", vec![a34.clone(), c34.clone(), v4.clone()], Box::new(|g, x| g.add_all(x))),
        ("softmax", vec![v6.clone()], Box::new(|g, x| g.softmax(x[0], None))),
        (
            "softmax (masked)",
            vec![v6.clone()],
            Box::new(|g, x| g.softmax(x[0], Some(&mask))),
        ),
        ("concat", vec![v4.clone(), v6.clone()], Box::new(|g, x| g.concat(x))),
        ("stack_rows", vec![v4.clone(), v4.clone()], Box::new(|g, x| g.stack_rows(x))),
        ("concat_rows", vec![a34.clone(), c34.clone()], Box::new(|g, x| g.concat_rows(x))),
        ("slice", vec![v6.clone()], Box::new(|g, x| g.slice(x[0], 1, 3))),
        ("row", vec![a34.clone()], Box::new(move |g, x| g.row(x[0], n - 1))),
        ("rows", vec![m53.clone()], Box::new(|g, x| g.rows(x[0], 1, 3))),
        ("reshape", vec![a34.clone()], Box::new(move |g, x| g.reshape(x[0], vec![n * k]))),
        ("col_max", vec![m43.clone()], Box::new(|g, x| g.col_max(x[0]))),
        ("unfold", vec![m53.clone()], Box::new(|g, x| g.unfold(x[0], 2))),
        ("gather", vec![m53.clone()], Box::new(|g, x| g.gather(x[0], &gather_ids, None))),
        ("scatter_add", vec![v6.clone()], Box::new(|g, x| g.scatter_add(x[0], &scatter_ids, 5))),
        ("pairwise_add", vec![m32.clone(), m42.clone()], Box::new(|g, x| g.pairwise_add(x[0], x[1]))),
        (
            "grad_of (double backward)",
            vec![m24.clone(), m43.clone()],
            Box::new(|g, x| {
                let h = g.matmul(x[0], x[1])?;
                let h = g.tanh(h);
                let sq = g.mul(h, h)?;
                let s = g.sum(sq);
                let grad = g.grad_of(s, x[0])?;
                g.tanh(grad).pipe(Ok)
            }),
        ),
        (
            "grad_norm_of (double backward)",
            vec![m24.clone(), m43.clone()],
            Box::new(|g, x| {
                let h = g.matmul(x[0], x[1])?;
                let h = g.sigmoid(h);
                let s = g.sum(h);
                g.grad_norm_of(s, x[0])
            }),
        ),
    ];
    for (i, (name, inputs, f)) in cases.iter().enumerate() {
        out.push(check_op(name, inputs, f.as_ref(), seed.wrapping_add(i as u64))?);
    }
    Ok(())
}

trait Pipe: Sized {
    fn pipe<T>(self, f: impl FnOnce(Self) -> T) -> T {
        f(self)
    }
}

impl Pipe for Var {}

/// Three-word question with one out-of-vocabulary word, one four-word
/// review, two attributes and a three-token answer that copies the OOV.
pub fn toy_example() -> (Vocabulary, QAExample) {
    let vocab = Vocabulary::from_words(["how", "big", "it", "is", "very", "size", "color", "red"].map(String::from));
    let raw = RawExample {
        question: "how big zeta".into(),
        answer: "big zeta".into(),
        reviews: vec!["it is very big".into()],
        attributes: vec![("size".into(), "big".into()), ("color".into(), "red".into())],
    };
    let ex = encode_example(&raw, &vocab, 0, &mut EncodeStats::default()).expect("toy example is valid");
    (vocab, ex)
}

fn toy_dims(vocab: usize) -> ModelDims {
    ModelDims { vocab, embed: 4, hidden: 3, filters: 2, proj: 3 }
}

fn toy_model(variant: Variant, options: ModelOptions, seed: u64) -> (Vocabulary, QAExample, Model) {
    let (vocab, ex) = toy_example();
    let mut model = Model::new(toy_dims(vocab.len()), ModelOptions { variant, ..options }, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70c);
    rescale(&mut model.gen_params, &mut rng, 0.5);
    if let Some((ps, _)) = &mut model.critic {
        rescale(ps, &mut rng, 0.5);
    }
    (vocab, ex, model)
}

fn block_checks(seed: u64, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb10c);
    let empty = ParamSet::new();
    let all = |_: &str| true;

    let mut ps = ParamSet::new();
    let lstm = Lstm::register(&mut ps, "lstm", 3, 4, &mut rng);
    rescale(&mut ps, &mut rng, 0.6);
    let xs = rand_data(&mut rng, &[3, 3]).1;
    out.push(check_params("lstm (three steps)", &empty, &ps, &all, &|g, _, b| {
        let x = g.constant(vec![3, 3], xs.clone())?;
        let hs = lstm.run(g, b, x, false)?;
        let h = g.stack_rows(&hs)?;
        let h = g.tanh(h);
        let w = g.constant(vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?;
        let p = g.mul(h, w)?;
        Ok(g.sum(p))
    })?);

    let dims = ModelDims { vocab: 10, embed: 3, hidden: 2, filters: 2, proj: 3 };
    for (mode, label) in [(CriticMode::Sequence, "critic score"), (CriticMode::PerStep, "critic score (per step)")] {
        let mut ps = ParamSet::new();
        let disc = Discriminator::register(&mut ps, &dims, mode, &mut rng);
        rescale(&mut ps, &mut rng, 0.6);
        let states = rand_data(&mut rng, &[5, 4]).1;
        let facts = rand_data(&mut rng, &[3 + 4]).1;
        out.push(check_params(label, &empty, &ps, &all, &|g, _, b| {
            let x = g.constant(vec![5, 4], states.clone())?;
            let m = g.constant(vec![3], facts[..3].to_vec())?;
            let c = g.constant(vec![4], facts[3..].to_vec())?;
            Ok(disc.score(g, b, x, 4, m, c)?.score)
        })?);
    }

    let mut ps = ParamSet::new();
    let disc = Discriminator::register(&mut ps, &dims, CriticMode::Sequence, &mut rng);
    rescale(&mut ps, &mut rng, 0.6);
    let emb = rand_data(&mut rng, &[4, 3]).1;
    out.push(check_params("ground-truth encoder + bridge", &empty, &ps, &|n| Discriminator::is_truth_param(n), &|g, _, b| {
        let e = g.constant(vec![4, 3], emb.clone())?;
        let z = disc.encode_truth(g, b, e)?;
        let z = g.tanh(z);
        Ok(g.sum(z))
    })?);

    let states = rand_data(&mut rng, &[4, 4]).1;
    let facts = rand_data(&mut rng, &[7]).1;
    for norm in [PenaltyNorm::Sequence, PenaltyNorm::PerStep] {
        let label = match norm {
            PenaltyNorm::Sequence => "gradient penalty (sequence norm)",
            PenaltyNorm::PerStep => "gradient penalty (per-step norm)",
        };
        out.push(check_params(label, &empty, &ps, &|n| !Discriminator::is_truth_param(n), &|g, _, b| {
            let x = g.leaf(vec![4, 4], states.clone(), true)?;
            let m = g.constant(vec![3], facts[..3].to_vec())?;
            let c = g.constant(vec![4], facts[3..].to_vec())?;
            let d = disc.score(g, b, x, 4, m, c)?.score;
            Ok(gradient_penalty(g, d, x, norm)?.0)
        })?);
    }
    Ok(())
}

fn loss_checks(seed: u64, out: &mut Vec<CheckResult>) -> Result<()> {
    let empty = ParamSet::new();
    let all = |_: &str| true;

    for (words, label) in [(false, "loss_g"), (true, "loss_g (word-level review attention)")] {
        let opts = ModelOptions { attend_review_words: words, ..ModelOptions::default() };
        let (_, ex, model) = toy_model(Variant::Ragf, opts, seed);
        let batch = Batch::from_examples(std::slice::from_ref(&ex));
        let view = batch.view(0);
        out.push(check_params(label, &empty, &model.gen_params, &all, &|g, _, b| {
            Ok(generator_pass(&model, g, b, &view)?.nll)
        })?);
    }

    for (variant, label) in [(Variant::Paag, "generator objective (Wasserstein)"), (Variant::Ragfd, "generator objective (sigmoid critic)")] {
        let (_, ex, model) = toy_model(variant, ModelOptions::default(), seed);
        let batch = Batch::from_examples(std::slice::from_ref(&ex));
        let view = batch.view(0);
        let (cps, _) = model.critic.as_ref().expect("critic variant");
        out.push(check_params(label, cps, &model.gen_params, &all, &|g, cb, b| {
            Ok(generator_objective(&model, g, b, Some(cb), &view, 0.7)?.0)
        })?);
    }

    let cases = [
        (Variant::Paag, ModelOptions::default(), "loss_d (gradient penalty)"),
        (
            Variant::Paag,
            ModelOptions { penalty_norm: PenaltyNorm::PerStep, critic_mode: CriticMode::PerStep, fake_terms: FakeTerms::Sum, ..ModelOptions::default() },
            "loss_d (per-step critic, printed sum)",
        ),
        (Variant::Ragfwd, ModelOptions::default(), "loss_d (no penalty)"),
        (
            Variant::Ragfd,
            ModelOptions { vanilla_loss: VanillaGeneratorLoss::NonSaturating, ..ModelOptions::default() },
            "loss_d (sigmoid cross-entropy)",
        ),
    ];
    for (variant, opts, label) in cases {
        let (_, ex, model) = toy_model(variant, opts, seed);
        let batch = Batch::from_examples(std::slice::from_ref(&ex));
        let view = batch.view(0);
        let (cps, _) = model.critic.as_ref().expect("critic variant");
        let lambda = if variant.has_penalty() { 10.0 } else { 0.0 };
        out.push(check_params(label, &model.gen_params, cps, &|n| !Discriminator::is_truth_param(n), &|g, gb, cb| {
            Ok(critic_loss(&model, g, gb, cb, &view, lambda, 0.37)?.loss)
        })?);
    }
    Ok(())
}

/// Number of shape/seed draws per operation.
pub const OP_DRAWS: u64 = 100;

/// Runs every operation check on `draws` random shapes and keeps the worst
/// result of each.
pub fn op_sweep(seed: u64, draws: u64) -> Result<Vec<CheckResult>> {
    let mut worst: Vec<CheckResult> = Vec::new();
    for i in 0..draws {
        let mut round = Vec::new();
        op_checks(seed.wrapping_mul(1_000_003).wrapping_add(i), &mut round)?;
        if worst.is_empty() {
            worst = round;
            continue;
        }
        for (w, c) in worst.iter_mut().zip(round) {
            w.coordinates += c.coordinates;
            w.max_rel_error = w.max_rel_error.max(c.max_rel_error);
            w.passed &= c.passed;
        }
    }
    Ok(worst)
}

/// Runs the whole suite.
pub fn run(seed: u64) -> Result<GradcheckReport> {
    let mut checks = op_sweep(seed, OP_DRAWS)?;
    block_checks(seed, &mut checks)?;
    loss_checks(seed, &mut checks)?;
    Ok(GradcheckReport { seed, tolerance: TOLERANCE, checks })
}
