//! Training loop: likelihood warm-up, then alternating critic and generator
//! updates according to the model variant.

use crate::config::RunConfig;
use crate::data::{Batch, ExampleView, QAExample, Vocabulary};
use crate::discriminator::{generator_adversarial, CriticLoss, Discriminator, Streams, WassersteinTerms};
use crate::error::{IoContext, PaagError, Result};
use crate::model::{Model, Variant};
use crate::numerics::{AdagradState, Bound, Graph, NumericsError, Var, CLIP_NORM};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Offset mixed into the seed for the shuffling/ε stream so it differs from
/// the initialization stream.
const TRAIN_STREAM: u64 = 0x7261_696e;

/// One row of the training-curve CSV, written per generator step. Critic
/// columns are empty when no critic update ran.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub step: usize,
    pub loss_g: f64,
    pub critic: Option<CriticStats>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CriticStats {
    pub loss_d: f64,
    pub d_real: f64,
    pub d_fake_facts: f64,
    pub d_fake_nofacts: f64,
    pub grad_penalty: f64,
    pub grad_norm_mean: f64,
}

impl CriticStats {
    fn add_scaled(&mut self, g: &Graph, l: &CriticLoss, w: f64) {
        self.loss_d += w * g.scalar_value(l.loss);
        self.d_real += w * g.scalar_value(l.d_real);
        self.d_fake_facts += w * g.scalar_value(l.d_fake_facts);
        self.d_fake_nofacts += w * g.scalar_value(l.d_fake_nofacts);
        self.grad_penalty += w * g.scalar_value(l.penalty);
        self.grad_norm_mean += w * l.grad_norm_mean;
    }
}

pub const CURVE_HEADER: &str = "step,loss_g,loss_d,D_real,D_fake_facts,D_fake_nofacts,grad_penalty,grad_norm_mean";

pub fn curves_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{}", r.step, r.loss_g);
        match &r.critic {
            Some(c) => {
                let _ = writeln!(
                    out,
                    ",{},{},{},{},{},{}",
                    c.loss_d, c.d_real, c.d_fake_facts, c.d_fake_nofacts, c.grad_penalty, c.grad_norm_mean
                );
            }
            None => out.push_str(",,,,,,\n"),
        }
    }
    out
}

/// Generator-side graph pieces of one example.
pub struct GeneratorPass {
    pub nll: Var,
    /// Decoder output states `[T × 2H]`.
    pub out_states: Var,
    pub memory: Var,
    pub fused: Var,
}

/// Encodes `ex` and teacher-forces the reference answer.
pub fn generator_pass(model: &Model, g: &mut Graph, gb: &Bound, ex: &ExampleView) -> Result<GeneratorPass> {
    let enc = model.encode(g, gb, ex)?;
    let memory = enc.facts.memory;
    let fused = enc.facts.fused;
    let ctx = model.context(g, gb, enc.facts)?;
    let (nll, steps) = model.teacher_forced(g, gb, &ctx, ex)?;
    let out_states = Model::output_states(g, &steps)?;
    Ok(GeneratorPass { nll, out_states, memory, fused })
}

/// Builds the three critic streams of `ex`. `gb` is normally bound frozen,
/// which makes the decoder-side streams constants.
pub fn critic_streams(model: &Model, g: &mut Graph, gb: &Bound, cb: &Bound, ex: &ExampleView) -> Result<(Streams, Var)> {
    let (_, disc) = model.critic.as_ref().ok_or_else(|| PaagError::Usage("variant has no critic".into()))?;
    let enc = model.encode(g, gb, ex)?;
    let memory = enc.facts.memory;
    let fused = enc.facts.fused;
    let nf_ctx = model.no_facts_context(g, gb, &enc.facts)?;
    let ctx = model.context(g, gb, enc.facts)?;
    let (nll, steps) = model.teacher_forced(g, gb, &ctx, ex)?;
    let with_facts = Model::output_states(g, &steps)?;
    let (_, nf_steps) = model.teacher_forced(g, gb, &nf_ctx, ex)?;
    let no_facts = Model::output_states(g, &nf_steps)?;
    let answer = &ex.answer[..ex.answer_len()];
    let embedded = model.generator.encoders.embedding.embed(g, gb, answer)?;
    let embedded = g.detach(embedded);
    let truth = disc.encode_truth(g, cb, embedded)?;
    Ok((Streams { truth, with_facts, no_facts, memory, fused }, nll))
}

/// Critic loss of one example for the model's variant.
pub fn critic_loss(model: &Model, g: &mut Graph, gb: &Bound, cb: &Bound, ex: &ExampleView, lambda: f64, epsilon: f64) -> Result<CriticLoss> {
    let (streams, _) = critic_streams(model, g, gb, cb, ex)?;
    let (_, disc) = model.critic.as_ref().expect("checked by critic_streams");
    let loss = if model.options.variant.is_vanilla() {
        disc.vanilla_loss(g, cb, &streams)?
    } else {
        disc.wasserstein_loss(
            g,
            cb,
            &streams,
            WassersteinTerms { lambda, epsilon, norm: model.options.penalty_norm, fakes: model.options.fake_terms },
        )?
    };
    Ok(loss)
}

/// Generator objective of one example: `nll + λ_adv · adv(D(d^o))`.
pub fn generator_objective(
    model: &Model,
    g: &mut Graph,
    gb: &Bound,
    cb: Option<&Bound>,
    ex: &ExampleView,
    lambda_adv: f64,
) -> Result<(Var, GeneratorPass, Option<Var>)> {
    let pass = generator_pass(model, g, gb, ex)?;
    let (Some(cb), Some((_, disc))) = (cb, model.critic.as_ref()) else {
        return Ok((pass.nll, pass, None));
    };
    let len = g.shape(pass.out_states)[0];
    let d = disc.score(g, cb, pass.out_states, len, pass.memory, pass.fused)?.score;
    let vanilla = model.options.variant.is_vanilla().then_some(model.options.vanilla_loss);
    let adv = generator_adversarial(g, d, vanilla);
    let weighted = g.scale(adv, lambda_adv);
    let total = g.add(pass.nll, weighted)?;
    Ok((total, pass, Some(d)))
}

/// Dump written when a loss turns non-finite.
#[derive(Serialize)]
struct NanDump<'a> {
    epoch: usize,
    step: usize,
    what: &'static str,
    question: &'a [Vec<usize>],
    answer: &'a [Vec<usize>],
    oov: &'a [Vec<String>],
}

#[derive(Clone)]
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    gen_opt: AdagradState,
    critic_opt: Option<AdagradState>,
    rng: ChaCha8Rng,
    pub step: usize,
    pub epoch: usize,
    pub curves: Vec<CurveRow>,
    dump_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, vocab_len: usize) -> Self {
        let model = Model::new(cfg.dims(vocab_len), cfg.model_options(), cfg.seed);
        Trainer::with_model(cfg, model)
    }

    pub fn with_model(cfg: &RunConfig, model: Model) -> Self {
        let gen_opt = AdagradState::new(&model.gen_params, cfg.learning_rate);
        let critic_opt = model.critic.as_ref().map(|(ps, _)| AdagradState::new(ps, cfg.learning_rate));
        Trainer {
            cfg: cfg.clone(),
            model,
            gen_opt,
            critic_opt,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ TRAIN_STREAM),
            step: 0,
            epoch: 0,
            curves: Vec::new(),
            dump_dir: None,
        }
    }

    /// Continues this run as `variant`. The generator, its optimizer state,
    /// the data order and the step counters carry over; the critic is
    /// initialized exactly as a fresh run of `variant` would initialize it.
    /// During warm-up no variant touches its critic, so forking at the end of
    /// warm-up equals training `variant` from the start.
    pub fn fork(&self, variant: Variant) -> Trainer {
        let cfg = RunConfig { variant, ..self.cfg.clone() };
        let mut model = Model::new(self.model.dims, cfg.model_options(), cfg.seed);
        model.gen_params = self.model.gen_params.clone();
        let mut t = Trainer::with_model(&cfg, model);
        t.gen_opt = self.gen_opt.clone();
        t.rng = self.rng.clone();
        t.step = self.step;
        t.epoch = self.epoch;
        t.curves = self.curves.clone();
        t.dump_dir = self.dump_dir.clone();
        t
    }

    /// Directory for the diagnostic dump written on a non-finite loss.
    pub fn dump_to(&mut self, dir: impl Into<PathBuf>) {
        self.dump_dir = Some(dir.into());
    }

    pub fn adversarial_active(&self) -> bool {
        self.model.critic.is_some() && self.epoch >= self.cfg.warmup_epochs
    }

    fn fail(&self, batch: &Batch, what: &'static str) -> PaagError {
        let dump = self.dump_dir.as_ref().and_then(|dir| {
            let d = NanDump {
                epoch: self.epoch,
                step: self.step,
                what,
                question: &batch.question,
                answer: &batch.answer,
                oov: &batch.oov,
            };
            let path = dir.join("nan_dump.json");
            let text = serde_json::to_string_pretty(&d).ok()?;
            fs::create_dir_all(dir).and_then(|_| fs::write(&path, text)).ok()?;
            Some(path)
        });
        log::error!("non-finite {what} at epoch {} step {}", self.epoch, self.step);
        PaagError::NonFinite { what, epoch: self.epoch, step: self.step, dump }
    }

    /// A NaN or infinity reaching a domain-checked op is a non-finite loss.
    fn guard<T>(&self, r: Result<T>, batch: &Batch, what: &'static str) -> Result<T> {
        match r {
            Err(PaagError::Numerics(NumericsError::Domain { value, .. })) if !value.is_finite() => Err(self.fail(batch, what)),
            other => other,
        }
    }

    /// One critic update on `batch` with the generator frozen.
    pub fn critic_step(&mut self, batch: &Batch) -> Result<CriticStats> {
        let lambda = self.cfg.effective_lambda();
        let n = batch.len();
        let w = 1.0 / n as f64;
        let epsilons: Vec<f64> = (0..n).map(|_| self.rng.gen::<f64>()).collect();
        let mut stats = CriticStats::default();
        let Some((ps, _)) = &self.model.critic else {
            return Err(PaagError::Usage("variant has no critic".into()));
        };
        let mut pending = Vec::with_capacity(n);
        for (ex, &eps) in batch.views().zip(&epsilons) {
            let mut g = Graph::new();
            let gb = self.model.gen_params.bind_frozen(&mut g);
            let cb = ps.bind_where(&mut g, |n| !Discriminator::is_truth_param(n));
            let l = self.guard(critic_loss(&self.model, &mut g, &gb, &cb, &ex, lambda, eps), batch, "critic loss")?;
            stats.add_scaled(&g, &l, w);
            let scaled = g.scale(l.loss, w);
            pending.push((g.backward(scaled)?, cb));
        }
        if !stats.loss_d.is_finite() {
            return Err(self.fail(batch, "critic loss"));
        }
        let (ps, _) = self.model.critic.as_mut().expect("checked above");
        for (grads, cb) in &pending {
            ps.accumulate(cb, grads)?;
        }
        ps.clip_grad_norm(CLIP_NORM);
        self.critic_opt.as_mut().expect("critic optimizer").step(ps)?;
        Ok(stats)
    }

    /// One generator update; returns the mean teacher-forced NLL.
    pub fn generator_step(&mut self, batch: &Batch, adversarial: bool) -> Result<f64> {
        let n = batch.len();
        let w = 1.0 / n as f64;
        let lambda_adv = self.cfg.lambda_adv;
        let mut nll = 0.0;
        let mut pending = Vec::with_capacity(n);
        for ex in batch.views() {
            let mut g = Graph::new();
            let gb = self.model.gen_params.bind(&mut g);
            let cb = match (&self.model.critic, adversarial) {
                (Some((ps, _)), true) => Some(ps.bind_frozen(&mut g)),
                _ => None,
            };
            let objective = generator_objective(&self.model, &mut g, &gb, cb.as_ref(), &ex, lambda_adv);
            let (total, pass, _) = self.guard(objective, batch, "generator loss")?;
            let t = g.scalar_value(total);
            nll += w * g.scalar_value(pass.nll);
            if !t.is_finite() {
                return Err(self.fail(batch, "generator loss"));
            }
            let scaled = g.scale(total, w);
            pending.push((g.backward(scaled)?, gb));
        }
        for (grads, gb) in &pending {
            self.model.gen_params.accumulate(gb, grads)?;
        }
        let norm = self.model.gen_params.clip_grad_norm(CLIP_NORM);
        if !norm.is_finite() {
            return Err(self.fail(batch, "generator gradient"));
        }
        self.gen_opt.step(&mut self.model.gen_params)?;
        Ok(nll)
    }

    /// Shuffles `examples` and runs one epoch. Returns the mean NLL over
    /// generator steps.
    pub fn train_epoch(&mut self, examples: &[QAExample]) -> Result<f64> {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut self.rng);
        let adversarial = self.adversarial_active();
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let picked: Vec<QAExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let batch = Batch::from_examples(&picked);
            let mut critic = None;
            if adversarial {
                for _ in 0..self.cfg.critic_iters {
                    critic = Some(self.critic_step(&batch)?);
                }
            }
            let loss_g = self.generator_step(&batch, adversarial)?;
            self.step += 1;
            self.curves.push(CurveRow { step: self.step, loss_g, critic });
            total += loss_g;
            batches += 1;
        }
        self.epoch += 1;
        Ok(total / batches.max(1) as f64)
    }

    /// Mean teacher-forced NLL per token over `examples` with frozen weights.
    pub fn mean_nll(&self, examples: &[QAExample]) -> Result<f64> {
        mean_nll(&self.model, examples)
    }
}

pub fn mean_nll(model: &Model, examples: &[QAExample]) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let batch = Batch::from_examples(std::slice::from_ref(ex));
        let mut g = Graph::new();
        let gb = model.gen_params.bind_frozen(&mut g);
        let pass = generator_pass(model, &mut g, &gb, &batch.view(0))?;
        total += g.scalar_value(pass.nll);
    }
    Ok(total / examples.len().max(1) as f64)
}

/// Files produced by [`train`].
#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub steps: usize,
    pub epoch_loss: Vec<f64>,
    pub final_checkpoint: Option<PathBuf>,
}

pub fn checkpoint_bytes(model: &Model, vocab: &Vocabulary, cfg: &RunConfig, epoch: usize) -> Result<Vec<u8>> {
    let extra = serde_json::json!({ "epoch": epoch, "config": cfg.to_canonical() });
    let mut buf = Vec::new();
    model.to_checkpoint(vocab, extra).write_to(&mut buf)?;
    Ok(buf)
}

/// Trains for `cfg.epochs`. With `out_dir`, writes `epoch-NNN.ckpt` each
/// epoch, `model.ckpt` at the end, `curves.csv` and the canonical config.
pub fn train(cfg: &RunConfig, examples: &[QAExample], vocab: &Vocabulary, out_dir: Option<&Path>) -> Result<(Trainer, TrainSummary)> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(PaagError::Usage("training set is empty".into()));
    }
    let mut trainer = Trainer::new(cfg, vocab.len());
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).at(dir)?;
        fs::write(dir.join("config.txt"), cfg.to_canonical()).at(dir.join("config.txt"))?;
        trainer.dump_to(dir);
    }
    let mut summary = TrainSummary { epochs: cfg.epochs, steps: 0, epoch_loss: Vec::new(), final_checkpoint: None };
    for epoch in 1..=cfg.epochs {
        let adversarial = trainer.adversarial_active();
        let loss = trainer.train_epoch(examples)?;
        log::info!("epoch {epoch}: loss_g {loss:.4}{}", if adversarial { " (adversarial)" } else { "" });
        summary.epoch_loss.push(loss);
        if let Some(dir) = out_dir {
            let bytes = checkpoint_bytes(&trainer.model, vocab, cfg, epoch)?;
            let path = dir.join(format!("epoch-{epoch:03}.ckpt"));
            fs::write(&path, &bytes).at(&path)?;
            let last = dir.join("model.ckpt");
            fs::write(&last, &bytes).at(&last)?;
            summary.final_checkpoint = Some(last);
            let curves = dir.join("curves.csv");
            fs::write(&curves, curves_csv(&trainer.curves)).at(&curves)?;
        }
    }
    summary.steps = trainer.step;
    Ok((trainer, summary))
}

/// Critic diagnostics for one example with both parameter sets frozen.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CriticProbe {
    pub d_real: f64,
    pub d_fake_facts: f64,
    pub d_fake_nofacts: f64,
    /// Gradient norms of the critic score at the interpolate, per row
    /// (per-step penalty) or one for the whole sequence.
    pub interpolate_norms: Vec<f64>,
    /// `‖∂ adv / ∂ d^o‖`: size of the adversarial gradient reaching the
    /// decoder output states.
    pub generator_signal: f64,
}

pub fn probe_critic(model: &Model, ex: &ExampleView, epsilon: f64) -> Result<CriticProbe> {
    let (cps, disc) = model.critic.as_ref().ok_or_else(|| PaagError::Usage("variant has no critic".into()))?;
    let mut g = Graph::new();
    let gb = model.gen_params.bind_frozen(&mut g);
    let cb = cps.bind_frozen(&mut g);
    let (s, _) = critic_streams(model, &mut g, &gb, &cb, ex)?;
    let score = |g: &mut Graph, states: Var| -> Result<Var> {
        let len = g.shape(states)[0];
        Ok(disc.score(g, &cb, states, len, s.memory, s.fused)?.score)
    };
    let d_real = score(&mut g, s.truth)?;
    let d_fake_nofacts = score(&mut g, s.no_facts)?;
    // fresh leaf so the gradients w.r.t. the interpolate and d^o exist
    let interp = crate::discriminator::interpolate(&mut g, s.with_facts, s.truth, epsilon)?;
    let shape = g.shape(interp).to_vec();
    let interp = g.leaf(shape.clone(), g.value(interp).to_vec(), true)?;
    let d_interp = score(&mut g, interp)?;
    let grad = g.backward(d_interp)?;
    let flat = grad.get_or_zeros(interp, shape.iter().product()).into_owned();
    let rows = if model.options.penalty_norm == crate::discriminator::PenaltyNorm::PerStep { shape[0] } else { 1 };
    let width = flat.len() / rows;
    let interpolate_norms = flat.chunks(width).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let out = g.leaf(shape.clone(), g.value(s.with_facts).to_vec(), true)?;
    let d_fake = score(&mut g, out)?;
    let vanilla = model.options.variant.is_vanilla().then_some(model.options.vanilla_loss);
    let adv = generator_adversarial(&mut g, d_fake, vanilla);
    let grad = g.backward(adv)?;
    let generator_signal = grad.get_or_zeros(out, shape.iter().product()).iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(CriticProbe {
        d_real: g.scalar_value(d_real),
        d_fake_facts: g.scalar_value(d_fake),
        d_fake_nofacts: g.scalar_value(d_fake_nofacts),
        interpolate_norms,
        generator_signal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, encode_all, generate_synthetic, SyntheticSpec};

    fn corpus(n: usize) -> (Vocabulary, Vec<QAExample>) {
        let spec = SyntheticSpec { num_products: n, ..SyntheticSpec::default() };
        let raws = generate_synthetic(&spec, 5).unwrap().examples;
        let vocab = build_vocab(&raws, 500).unwrap();
        let examples = encode_all(&raws, &vocab).unwrap().0;
        (vocab, examples)
    }

    fn small_cfg(variant: Variant) -> RunConfig {
        RunConfig {
            variant,
            embed: 6,
            hidden: 5,
            filters: 3,
            proj: 4,
            batch_size: 4,
            epochs: 4,
            warmup_epochs: 2,
            ..RunConfig::default()
        }
    }

    #[test]
    fn fork_after_warmup_equals_independent_run() {
        let (vocab, examples) = corpus(10);
        for variant in [Variant::Ragfd, Variant::Ragfwd, Variant::Paag] {
            let cfg = small_cfg(variant);
            let (direct, _) = train(&cfg, &examples, &vocab, None).unwrap();

            let mut shared = Trainer::new(&small_cfg(Variant::Ragf), vocab.len());
            for _ in 0..cfg.warmup_epochs {
                shared.train_epoch(&examples).unwrap();
            }
            let mut forked = shared.fork(variant);
            while forked.epoch < cfg.epochs {
                forked.train_epoch(&examples).unwrap();
            }
            assert_eq!(
                checkpoint_bytes(&direct.model, &vocab, &cfg, cfg.epochs).unwrap(),
                checkpoint_bytes(&forked.model, &vocab, &cfg, cfg.epochs).unwrap(),
                "{variant}"
            );
            assert_eq!(curves_csv(&direct.curves), curves_csv(&forked.curves));
        }
    }

    #[test]
    fn ragf_never_builds_a_critic() {
        let (vocab, examples) = corpus(6);
        let (t, summary) = train(&small_cfg(Variant::Ragf), &examples, &vocab, None).unwrap();
        assert_eq!(t.model.num_critic_params(), 0);
        assert!(t.model.critic.is_none());
        assert!(t.curves.iter().all(|r| r.critic.is_none()));
        assert_eq!(summary.steps, 4 * 2);
    }

    #[test]
    fn critic_rows_appear_only_after_warmup() {
        let (vocab, examples) = corpus(6);
        let (t, _) = train(&small_cfg(Variant::Paag), &examples, &vocab, None).unwrap();
        let per_epoch = 2;
        for (i, row) in t.curves.iter().enumerate() {
            assert_eq!(row.critic.is_some(), i >= 2 * per_epoch, "row {i}");
        }
        let csv = curves_csv(&t.curves);
        assert!(csv.starts_with(CURVE_HEADER));
        assert_eq!(csv.lines().count(), 1 + t.curves.len());
    }

    #[test]
    fn first_generator_loss_does_not_depend_on_the_critic() {
        let (vocab, examples) = corpus(6);
        let first = |variant| {
            let cfg = RunConfig { warmup_epochs: 0, epochs: 1, ..small_cfg(variant) };
            train(&cfg, &examples, &vocab, None).unwrap().0.curves[0].loss_g
        };
        assert_eq!(first(Variant::Ragf), first(Variant::Ragfwd));
        assert_eq!(first(Variant::Ragf), first(Variant::Paag));
    }

    #[test]
    fn identical_seeds_give_identical_bytes() {
        let (vocab, examples) = corpus(6);
        let cfg = small_cfg(Variant::Paag);
        let a = train(&cfg, &examples, &vocab, None).unwrap().0;
        let b = train(&cfg, &examples, &vocab, None).unwrap().0;
        assert_eq!(checkpoint_bytes(&a.model, &vocab, &cfg, 4).unwrap(), checkpoint_bytes(&b.model, &vocab, &cfg, 4).unwrap());
        let c = train(&RunConfig { seed: 2, ..cfg.clone() }, &examples, &vocab, None).unwrap().0;
        assert_ne!(checkpoint_bytes(&a.model, &vocab, &cfg, 4).unwrap(), checkpoint_bytes(&c.model, &vocab, &cfg, 4).unwrap());
    }

    #[test]
    fn training_lowers_the_loss() {
        let (vocab, examples) = corpus(8);
        let cfg = RunConfig { epochs: 8, ..small_cfg(Variant::Ragf) };
        let before = mean_nll(&Model::new(cfg.dims(vocab.len()), cfg.model_options(), cfg.seed), &examples).unwrap();
        let (t, _) = train(&cfg, &examples, &vocab, None).unwrap();
        assert!(t.mean_nll(&examples).unwrap() < before);
    }

    #[test]
    fn nan_parameters_stop_training_with_a_dump() {
        let (vocab, examples) = corpus(4);
        let cfg = small_cfg(Variant::Ragf);
        let mut t = Trainer::new(&cfg, vocab.len());
        let dir = std::env::temp_dir().join(format!("paag-nan-{}", std::process::id()));
        t.dump_to(&dir);
        let id = t.model.gen_params.ids().last().unwrap();
        t.model.gen_params.get_mut(id).data_mut().fill(f64::NAN);
        match t.train_epoch(&examples) {
            Err(PaagError::NonFinite { dump: Some(path), .. }) => {
                let text = fs::read_to_string(&path).unwrap();
                assert!(text.contains("\"question\""));
            }
            other => panic!("expected a non-finite error, got {other:?}"),
        }
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn probe_reports_one_norm_per_sequence_by_default() {
        let (vocab, examples) = corpus(3);
        let cfg = small_cfg(Variant::Paag);
        let model = Model::new(cfg.dims(vocab.len()), cfg.model_options(), 1);
        let batch = Batch::from_examples(&examples[..1]);
        let p = probe_critic(&model, &batch.view(0), 0.5).unwrap();
        assert_eq!(p.interpolate_norms.len(), 1);
        assert!(p.generator_signal.is_finite() && p.generator_signal > 0.0);
    }
}
