//! Confident-sub-sequence training.
//!
//! A keep/skip labeling `z` of the target `y` is sampled per position with
//! keep-probability `Q_t(keep) = C_t^rho / (C_t^rho + gamma)`. The loss is a
//! Monte Carlo surrogate of the variational bound
//! `E_Q[log Q - log P(z|x)] >= -log sum_z P(z|x)`, plus a base-LM term and a
//! calibration term:
//!
//! `(1/K) sum_k [ H_k - log P_B(z_k) + SG(H_k) log Q(z_k) - log P^(z_k) ]`
//!
//! with `H_k = log Q(z_k) - log P(z_k|x)`. The `SG(H) log Q` term is the
//! score-function correction whose expectation matches the gradient of the
//! exact bound. An exact enumeration oracle over all `2^(T-1)` labelings
//! backs the Monte Carlo estimator in tests.

use crate::data::{self, Example, Vocabulary};
use crate::model::{EncoderState, Mode, Model, Net, StepMasks, StepOut, PROB_FLOOR};
use crate::tape::{NodeId, Tape};
use crate::tensor::{NumericsError, Result, Tensor};
use indexmap::IndexMap;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Largest target length accepted by the exact enumeration oracle.
pub const MAX_ENUM_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("training diverged at epoch {epoch}: {msg}")]
    Diverged { epoch: usize, msg: String },
    #[error("empty {split} split")]
    EmptySplit { split: &'static str },
}

/// Value-level view of the keep/skip distribution parameters.
#[derive(Clone, Copy, Debug)]
pub struct ConfidenceParams {
    pub rho: f64,
    pub gamma: f64,
    pub kappa: f64,
}

impl ConfidenceParams {
    pub fn from_model(model: &Model) -> Self {
        if model.cfg.mode == Mode::Confident {
            ConfidenceParams {
                rho: model.params.get("conf.rho").item(),
                gamma: model.params.get("conf.log_gamma").item().exp(),
                kappa: model.params.get("conf.kappa").item(),
            }
        } else {
            ConfidenceParams {
                rho: 0.0,
                gamma: 1.0,
                kappa: 0.0,
            }
        }
    }
}

/// `Q(keep) = C^rho / (C^rho + gamma)` with the confidence floored at 1e-12.
pub fn keep_prob(c: f64, rho: f64, gamma: f64) -> f64 {
    let u = c.max(PROB_FLOOR).powf(rho);
    u / (u + gamma)
}

/// One sampled keep/skip labeling and its realized sub-sequence.
#[derive(Clone, Debug)]
pub struct SubsequenceSample {
    /// Per-position keep flags, length T; the final position is always kept.
    pub labels: Vec<bool>,
    /// Realized tokens; in null mode each maximal skip run contributes one
    /// `<null>`.
    pub z_tokens: Vec<usize>,
    /// Map from z positions to y positions (a `<null>` maps to the first
    /// position of its run).
    pub iota: Vec<usize>,
    pub log_q: f64,
}

/// Independent per-position draws; the end-of-sequence position is forced to
/// keep and contributes log Q = 0.
pub fn sample_labels(confidences: &[f64], cp: &ConfidenceParams, rng: &mut impl Rng) -> Vec<bool> {
    let t_len = confidences.len();
    (0..t_len)
        .map(|i| i == t_len - 1 || rng.gen::<f64>() < keep_prob(confidences[i], cp.rho, cp.gamma))
        .collect()
}

/// Log-probability of a labeling under the per-position keep distribution.
pub fn labels_log_q(confidences: &[f64], labels: &[bool], cp: &ConfidenceParams) -> f64 {
    let t_len = confidences.len();
    (0..t_len.saturating_sub(1))
        .map(|i| {
            let q = keep_prob(confidences[i], cp.rho, cp.gamma);
            if labels[i] { q.ln() } else { (1.0 - q).ln() }
        })
        .sum()
}

/// Realize `z` from a labeling. Plain mode keeps the kept positions in
/// order; null mode turns the first position of each maximal skip run into a
/// `<null>` and drops the rest.
pub fn build_z(y: &[usize], labels: &[bool], null_mode: bool) -> (Vec<usize>, Vec<usize>) {
    assert_eq!(y.len(), labels.len());
    let mut z = Vec::new();
    let mut iota = Vec::new();
    let mut in_skip_run = false;
    for (i, (&tok, &keep)) in y.iter().zip(labels).enumerate() {
        if keep {
            z.push(tok);
            iota.push(i);
            in_skip_run = false;
        } else {
            if null_mode && !in_skip_run {
                z.push(data::NULL);
                iota.push(i);
            }
            in_skip_run = true;
        }
    }
    (z, iota)
}

pub fn sample_subsequence(
    y: &[usize],
    confidences: &[f64],
    cp: &ConfidenceParams,
    null_mode: bool,
    rng: &mut impl Rng,
) -> SubsequenceSample {
    let labels = sample_labels(confidences, cp, rng);
    let log_q = labels_log_q(confidences, &labels, cp);
    let (z_tokens, iota) = build_z(y, &labels, null_mode);
    SubsequenceSample {
        labels,
        z_tokens,
        iota,
        log_q,
    }
}

/// Which loss terms are active. All three on is the full objective;
/// `variational` off degenerates Q to keep-all (plain likelihood training).
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub variational: bool,
    pub base_lm: bool,
    pub calibration: bool,
}

impl LossTerms {
    pub fn full() -> Self {
        LossTerms {
            variational: true,
            base_lm: true,
            calibration: true,
        }
    }

    pub fn likelihood_only() -> Self {
        LossTerms {
            variational: false,
            base_lm: false,
            calibration: false,
        }
    }
}

/// Per-sequence dropout configuration applied during teacher-forced passes.
#[derive(Clone, Copy, Debug, Default)]
pub struct DropoutRates {
    pub input: f64,
    pub recurrent: f64,
}

fn bernoulli_mask(t: &mut Tape, len: usize, keep: f64, rng: &mut impl Rng) -> NodeId {
    let data: Vec<f64> = (0..len)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    t.constant(Tensor::vector(data))
}

/// Teacher-forced decoder pass over `targets` (fed as BOS, t_1, ..,
/// t_{R-1}).
pub struct ForcedPass {
    pub steps: Vec<StepOut>,
    /// `C_t(target_t)` nodes, confident mode only.
    pub c_nodes: Vec<NodeId>,
    pub c_values: Vec<f64>,
}

pub fn forced_pass(
    net: &Net,
    t: &mut Tape,
    enc: &EncoderState,
    targets: &[usize],
    dropout: DropoutRates,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<ForcedPass> {
    for &id in targets {
        if id >= net.cfg.vocab_size {
            return Err(NumericsError::Invalid {
                op: "forced_pass",
                msg: format!("token id {id} outside vocabulary of {}", net.cfg.vocab_size),
            });
        }
    }
    let mut local_rng = rng;
    let rec_mask = match (&mut local_rng, dropout.recurrent > 0.0) {
        (Some(r), true) => Some(bernoulli_mask(
            t,
            net.cfg.decoder_hidden,
            1.0 - dropout.recurrent,
            *r,
        )),
        _ => None,
    };
    let mut state = net.init_state(t);
    let mut steps = Vec::with_capacity(targets.len());
    let mut c_nodes = Vec::new();
    let mut c_values = Vec::new();
    let mut prev = data::BOS;
    for &tok in targets {
        let input_mask = match (&mut local_rng, dropout.input > 0.0) {
            (Some(r), true) => Some(bernoulli_mask(t, net.cfg.embed_dim, 1.0 - dropout.input, *r)),
            _ => None,
        };
        let masks = StepMasks {
            input: input_mask,
            recurrent: rec_mask,
        };
        state = net.step_masked(t, enc, enc.mat, &state, prev, Some(&masks))?;
        let out = state.out.take().expect("step produces output");
        if let Some(c_vec) = out.c_vec {
            let c = t.index(c_vec, tok)?;
            c_nodes.push(c);
            c_values.push(t.val(c).item());
        }
        steps.push(out);
        prev = tok;
    }
    Ok(ForcedPass {
        steps,
        c_nodes,
        c_values,
    })
}

fn log_prob_at(t: &mut Tape, dist: NodeId, token: usize) -> Result<NodeId> {
    let x = t.index(dist, token)?;
    let xf = t.clamp_min(x, PROB_FLOOR)?;
    t.log(xf)
}

/// Teacher-forced sequence scores for `z` (which must end with EOS).
pub struct SeqScore {
    /// `sum_t log P~(z_t)`.
    pub log_p: NodeId,
    /// `sum_t log P^(z_t)` under the calibrated distribution.
    pub log_phat: NodeId,
    /// `sum_t log P_B(z_t)`, confident mode only.
    pub log_pb: Option<NodeId>,
    pub steps: Vec<StepOut>,
}

pub fn sequence_log_prob(
    net: &Net,
    t: &mut Tape,
    enc: &EncoderState,
    z: &[usize],
    dropout: DropoutRates,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<SeqScore> {
    if z.last() != Some(&data::EOS) {
        return Err(NumericsError::Invalid {
            op: "sequence_log_prob",
            msg: "sequence must end with <eos>".into(),
        });
    }
    let pass = forced_pass(net, t, enc, z, dropout, rng)?;
    let mut log_p = t.scalar_const(0.0);
    let mut log_phat = t.scalar_const(0.0);
    let mut log_pb = if net.cfg.mode == Mode::Confident {
        Some(t.scalar_const(0.0))
    } else {
        None
    };
    for (out, &tok) in pass.steps.iter().zip(z) {
        let lp = log_prob_at(t, out.p_mix, tok)?;
        log_p = t.add(log_p, lp)?;
        let hat_dist = out.p_hat.unwrap_or(out.p_mix);
        let lph = log_prob_at(t, hat_dist, tok)?;
        log_phat = t.add(log_phat, lph)?;
        if let Some(acc) = log_pb {
            let lb = log_prob_at(t, out.p_b.expect("confident step"), tok)?;
            log_pb = Some(t.add(acc, lb)?);
        }
    }
    Ok(SeqScore {
        log_p,
        log_phat,
        log_pb,
        steps: pass.steps,
    })
}

/// Standalone base-LM chain over `z`. `scores[i]` is the attention score
/// blended (under stop-gradient) into the input of step `i`; pass a zero
/// node at position 0.
pub fn base_lm_log_prob(
    net: &Net,
    t: &mut Tape,
    z: &[usize],
    scores: &[NodeId],
) -> Result<NodeId> {
    if scores.len() != z.len() {
        return Err(NumericsError::Invalid {
            op: "base_lm_log_prob",
            msg: format!("{} scores for {} tokens", scores.len(), z.len()),
        });
    }
    let hd = net.cfg.decoder_hidden;
    let mut g = t.constant(Tensor::zeros(vec![hd]));
    let mut cb = t.constant(Tensor::zeros(vec![hd]));
    let mut prev = data::BOS;
    let mut total = t.scalar_const(0.0);
    for (&tok, &score) in z.iter().zip(scores) {
        let (g2, cb2, p_b) = net.base_lm_step(t, g, cb, prev, score)?;
        g = g2;
        cb = cb2;
        let lp = log_prob_at(t, p_b, tok)?;
        total = t.add(total, lp)?;
        prev = tok;
    }
    Ok(total)
}

/// Options for one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct VbLossOpts {
    pub k_samples: usize,
    pub null_mode: bool,
    pub terms: LossTerms,
    pub dropout: DropoutRates,
    /// Train on the full reference (all positions kept) instead of sampled
    /// sub-sequences. Used for the warmup epochs: the generator first learns
    /// to explain complete sentences, so that when sub-sequence sampling
    /// starts, dropping a well-predicted token is expensive and the keep/skip
    /// distribution settles on skipping only poorly-supported tokens.
    pub force_keep_all: bool,
}

impl VbLossOpts {
    pub fn new(k_samples: usize, null_mode: bool, terms: LossTerms) -> Self {
        VbLossOpts {
            k_samples,
            null_mode,
            terms,
            dropout: DropoutRates::default(),
            force_keep_all: false,
        }
    }
}

/// On-tape `log Q` of a labeling, built from the confidence nodes of the
/// teacher-forced y pass so gradients reach rho, gamma and the model.
fn log_q_node(
    net: &Net,
    t: &mut Tape,
    c_nodes: &[NodeId],
    labels: &[bool],
) -> Result<NodeId> {
    let rho = net.params.id("conf.rho");
    let log_gamma = net.params.id("conf.log_gamma");
    let gamma = t.exp(log_gamma)?;
    let mut total = t.scalar_const(0.0);
    for i in 0..c_nodes.len().saturating_sub(1) {
        let cf = t.clamp_min(c_nodes[i], PROB_FLOOR)?;
        let logc = t.log(cf)?;
        let rlogc = t.mul(rho, logc)?;
        let u = t.exp(rlogc)?;
        let denom = t.add(u, gamma)?;
        let log_denom = t.log(denom)?;
        let term = if labels[i] {
            t.sub(rlogc, log_denom)?
        } else {
            t.sub(log_gamma, log_denom)?
        };
        total = t.add(total, term)?;
    }
    Ok(total)
}

/// The Monte Carlo loss with the given pre-drawn labelings (one per sample).
/// Deterministic given the labelings and rng state; used directly by
/// gradient checks (with dropout off). `dropout_rng` draws the dropout
/// masks of the generator passes; the teacher-forced pass that defines `Q`
/// stays clean so the on-tape `log Q` matches the distribution the
/// labelings were sampled from.
pub fn vb_loss_given_labels(
    net: &Net,
    t: &mut Tape,
    src_ids: &[usize],
    y: &[usize],
    labelings: &[Vec<bool>],
    opts: &VbLossOpts,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    if opts.terms.variational && net.cfg.mode != Mode::Confident {
        return Err(NumericsError::Invalid {
            op: "vb_loss",
            msg: "variational training requires confident mode".into(),
        });
    }
    let enc = net.encode(t, src_ids)?;
    let y_pass = if net.cfg.mode == Mode::Confident {
        Some(forced_pass(net, t, &enc, y, DropoutRates::default(), None)?)
    } else {
        None
    };
    // First pass: per-labeling H = log Q - log P(z|x) and likelihood terms.
    let mut hs = Vec::with_capacity(labelings.len());
    let mut log_qs = Vec::with_capacity(labelings.len());
    let mut total = t.scalar_const(0.0);
    for labels in labelings {
        let (z, log_q) = if opts.terms.variational {
            let pass = y_pass.as_ref().expect("confident mode");
            let (z, _) = build_z(y, labels, opts.null_mode);
            (z, log_q_node(net, t, &pass.c_nodes, labels)?)
        } else {
            (y.to_vec(), t.scalar_const(0.0))
        };
        let score = sequence_log_prob(net, t, &enc, &z, opts.dropout, dropout_rng.as_deref_mut())?;
        let h = t.sub(log_q, score.log_p)?;
        let mut term = h;
        if opts.terms.base_lm {
            let log_pb = score.log_pb.ok_or_else(|| NumericsError::Invalid {
                op: "vb_loss",
                msg: "base-LM term requires confident mode".into(),
            })?;
            term = t.sub(term, log_pb)?;
        }
        if opts.terms.calibration {
            term = t.sub(term, score.log_phat)?;
        }
        total = t.add(total, term)?;
        hs.push(t.stop_grad(h));
        log_qs.push(log_q);
    }
    // Second pass: score-function corrections SG(H - b) (log Q - SG(log Q)).
    // Each correction is identically zero in value but contributes
    // SG(H - b) d(log Q) to the gradient, completing the estimator of the
    // exact bound's gradient while leaving the reported loss equal to the
    // Monte Carlo bound itself. The baseline b is the leave-one-out mean of
    // the other samples' H; it keeps the estimator unbiased
    // (E[b d log Q] = 0) and centers the per-sample coefficient, without
    // which all-negative (or all-positive) H drives the keep/skip
    // distribution toward a degenerate deterministic labeling.
    let k = labelings.len();
    let mut sum_h = t.scalar_const(0.0);
    for &h in &hs {
        sum_h = t.add(sum_h, h)?;
    }
    for (&sg_h, &log_q) in hs.iter().zip(&log_qs) {
        let advantage = if k > 1 {
            let others = t.sub(sum_h, sg_h)?;
            let b = t.scale(others, 1.0 / (k - 1) as f64)?;
            t.sub(sg_h, b)?
        } else {
            sg_h
        };
        let sg_log_q = t.stop_grad(log_q);
        let centered = t.sub(log_q, sg_log_q)?;
        let correction = t.mul(advantage, centered)?;
        total = t.add(total, correction)?;
    }
    t.scale(total, 1.0 / k as f64)
}

/// Sample `K` labelings from the current keep/skip distribution and return
/// the Monte Carlo loss node. Bit-deterministic for a fixed rng state.
pub fn vb_loss(
    net: &Net,
    t: &mut Tape,
    src_ids: &[usize],
    y: &[usize],
    opts: &VbLossOpts,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let labelings: Vec<Vec<bool>> = if opts.terms.variational && !opts.force_keep_all {
        let enc = net.encode(t, src_ids)?;
        let pass = forced_pass(net, t, &enc, y, DropoutRates::default(), None)?;
        let rho = t.val(net.params.id("conf.rho")).item();
        let gamma = t.val(net.params.id("conf.log_gamma")).item().exp();
        let cp = ConfidenceParams {
            rho,
            gamma,
            kappa: 0.0,
        };
        (0..opts.k_samples.max(1))
            .map(|_| sample_labels(&pass.c_values, &cp, rng))
            .collect()
    } else {
        vec![vec![true; y.len()]]
    };
    vb_loss_given_labels(net, t, src_ids, y, &labelings, opts, Some(rng))
}

/// Exact quantities obtained by enumerating every keep/skip labeling.
#[derive(Clone, Copy, Debug)]
pub struct ExactVb {
    /// `E_Q[log Q - log P(z|x)]` — the variational bound being minimized.
    pub objective: f64,
    /// Exact expectation of the Monte Carlo loss value: the objective plus
    /// any base-LM/calibration terms (the score-function correction is
    /// identically zero in value).
    pub surrogate: f64,
    /// `-log sum_z P(z|x)`, the quantity the bound upper-bounds.
    pub bound_rhs: f64,
}

/// Enumerates all `2^(T-1)` labelings (EOS forced keep).
pub fn exact_vb(
    model: &Model,
    src_ids: &[usize],
    y: &[usize],
    opts: &VbLossOpts,
) -> Result<ExactVb> {
    if y.len() > MAX_ENUM_LEN {
        return Err(NumericsError::Invalid {
            op: "exact_vb",
            msg: format!("target length {} exceeds {MAX_ENUM_LEN}", y.len()),
        });
    }
    let mut t = Tape::new();
    let nodes = model.bind(&mut t);
    let net = Net::new(&model.cfg, &nodes);
    let enc = net.encode(&mut t, src_ids)?;
    let pass = forced_pass(&net, &mut t, &enc, y, DropoutRates::default(), None)?;
    let cp = ConfidenceParams::from_model(model);
    let free = y.len() - 1;
    let mut objective = 0.0;
    let mut surrogate = 0.0;
    let mut log_ps = Vec::with_capacity(1 << free);
    for mask in 0u64..(1 << free) {
        let mut labels: Vec<bool> = (0..free).map(|i| mask >> i & 1 == 1).collect();
        labels.push(true);
        let log_q = labels_log_q(&pass.c_values, &labels, &cp);
        let q = log_q.exp();
        let (z, _) = build_z(y, &labels, opts.null_mode);
        let score = sequence_log_prob(&net, &mut t, &enc, &z, DropoutRates::default(), None)?;
        let log_p = t.val(score.log_p).item();
        let h = log_q - log_p;
        objective += q * h;
        let mut s = h;
        if opts.terms.base_lm {
            s -= t.val(score.log_pb.expect("confident mode")).item();
        }
        if opts.terms.calibration {
            s -= t.val(score.log_phat).item();
        }
        surrogate += q * s;
        log_ps.push(log_p);
    }
    let max = log_ps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + log_ps.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(ExactVb {
        objective,
        surrogate,
        bound_rhs: -lse,
    })
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

/// Adam with bias correction; state keyed by parameter name.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// Apply one update from accumulated gradients. Parameters without a
    /// gradient entry are left untouched.
    pub fn step(&mut self, params: &mut crate::model::Parameters, grads: &IndexMap<String, Tensor>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for i in 0..g.len() {
                let gi = g.data()[i];
                m.data_mut()[i] = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                v.data_mut()[i] = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m.data()[i] / bc1;
                let v_hat = v.data()[i] / bc2;
                p.data_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub k_samples: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub null_mode: bool,
    pub dropout: DropoutRates,
    /// Epochs during which the confidence parameters (rho, gamma, kappa)
    /// stay frozen at their init and the loss is evaluated on the full
    /// reference (every position kept) instead of sampled sub-sequences.
    /// The generator, copy attention and base LM first learn to explain
    /// complete sentences; once sampling starts, dropping a well-predicted
    /// token is expensive (a `<null>` must be emitted where one was never
    /// seen) so the keep/skip distribution settles on skipping only
    /// poorly-supported tokens. Without the warmup, easily-memorized corpora
    /// collapse into the degenerate optimum where every confidence is zero
    /// and every token is skipped.
    pub conf_warmup_epochs: usize,
    /// Learning-rate multiplier applied once the warmup ends. The sampled
    /// objective rewards shorter sub-sequences, so with the warmup-phase
    /// learning rate the keep/skip distribution can race to skip-everything
    /// within a single epoch; a smaller step keeps it near the
    /// well-memorized full-sequence solution while the confidence landscape
    /// differentiates.
    pub vb_lr_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k_samples: 8,
            learning_rate: 5e-4,
            batch_size: 1,
            max_epochs: 20,
            patience: 3,
            null_mode: true,
            dropout: DropoutRates::default(),
            conf_warmup_epochs: 2,
            vb_lr_scale: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub rho: f64,
    pub gamma: f64,
    pub kappa: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub stopped_early: bool,
}

fn mix_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    let mut x = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(epoch.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index.wrapping_mul(0x94D0_49BB_1331_11EB));
    x ^= x >> 31;
    x
}

struct Prepared {
    src_ids: Vec<usize>,
    y: Vec<usize>,
}

fn prepare(examples: &[Example], vocab: &Vocabulary) -> Vec<Prepared> {
    examples
        .iter()
        .map(|ex| {
            let src_ids = data::linearize(&ex.table, vocab).ids;
            let mut y = vocab.ids(&ex.reference);
            y.push(data::EOS);
            Prepared { src_ids, y }
        })
        .collect()
}

fn example_loss(
    model: &Model,
    prep: &Prepared,
    opts: &VbLossOpts,
    rng: &mut ChaCha8Rng,
    want_grads: bool,
) -> std::result::Result<(f64, Option<IndexMap<String, Tensor>>), TrainError> {
    let mut t = Tape::new();
    let nodes = model.bind(&mut t);
    let net = Net::new(&model.cfg, &nodes);
    let loss = vb_loss(&net, &mut t, &prep.src_ids, &prep.y, opts, rng)?;
    let value = t.val(loss).item();
    if !want_grads {
        return Ok((value, None));
    }
    t.backward(loss)?;
    let mut grads = IndexMap::new();
    for (name, &id) in nodes.iter() {
        if let Some(g) = t.grad(id) {
            grads.insert(name.clone(), g.clone());
        }
    }
    Ok((value, Some(grads)))
}

fn accumulate(into: &mut IndexMap<String, Tensor>, from: IndexMap<String, Tensor>) {
    for (name, g) in from {
        match into.get_mut(&name) {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                into.insert(name, g);
            }
        }
    }
}

/// Train `model` in place with Adam and early stopping on validation loss.
/// Emits one log line per epoch through `log`.
pub fn fit(
    model: &mut Model,
    vocab: &Vocabulary,
    train: &[Example],
    valid: &[Example],
    cfg: &TrainConfig,
    terms: LossTerms,
    log: &mut dyn FnMut(&str),
) -> std::result::Result<TrainReport, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptySplit { split: "train" });
    }
    if valid.is_empty() {
        return Err(TrainError::EmptySplit { split: "valid" });
    }
    let train_prep = prepare(train, vocab);
    let valid_prep = prepare(valid, vocab);
    let mut opts = VbLossOpts::new(cfg.k_samples, cfg.null_mode, terms);
    opts.dropout = cfg.dropout;
    let valid_opts = VbLossOpts::new(cfg.k_samples, cfg.null_mode, terms);

    let mut adam = Adam::new(cfg.learning_rate);
    let mut report = TrainReport {
        best_valid_loss: f64::INFINITY,
        ..Default::default()
    };
    let mut best_params = model.params.clone();
    let mut since_best = 0usize;

    for epoch in 1..=cfg.max_epochs {
        opts.force_keep_all = epoch <= cfg.conf_warmup_epochs;
        adam.lr = if opts.force_keep_all {
            cfg.learning_rate
        } else {
            cfg.learning_rate * cfg.vb_lr_scale
        };
        let mut train_sum = 0.0;
        let mut batch_grads: IndexMap<String, Tensor> = IndexMap::new();
        let mut batch_n = 0usize;
        for (i, prep) in train_prep.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64, i as u64));
            let (value, grads) = example_loss(model, prep, &opts, &mut rng, true)?;
            if !value.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    msg: format!("non-finite train loss on example {i}"),
                });
            }
            train_sum += value;
            let mut grads = grads.expect("requested grads");
            if epoch <= cfg.conf_warmup_epochs {
                grads.retain(|name, _| !name.starts_with("conf."));
            }
            accumulate(&mut batch_grads, grads);
            batch_n += 1;
            if batch_n == cfg.batch_size || i + 1 == train_prep.len() {
                if batch_n > 1 {
                    let scale = 1.0 / batch_n as f64;
                    for g in batch_grads.values_mut() {
                        for x in g.data_mut() {
                            *x *= scale;
                        }
                    }
                }
                adam.step(&mut model.params, &batch_grads);
                batch_grads.clear();
                batch_n = 0;
            }
        }
        let train_loss = train_sum / train_prep.len() as f64;

        let mut valid_sum = 0.0;
        for (i, prep) in valid_prep.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0, i as u64));
            let (value, _) = example_loss(model, prep, &valid_opts, &mut rng, false)?;
            valid_sum += value;
        }
        let valid_loss = valid_sum / valid_prep.len() as f64;
        if !valid_loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                msg: "non-finite validation loss".into(),
            });
        }

        let cp = ConfidenceParams::from_model(model);
        let stats = EpochStats {
            epoch,
            train_loss,
            valid_loss,
            rho: cp.rho,
            gamma: cp.gamma,
            kappa: cp.kappa,
        };
        log(&format!(
            "epoch {} train_loss {:.6} valid_loss {:.6} rho {:.4} gamma {:.4} kappa {:.4}",
            stats.epoch, stats.train_loss, stats.valid_loss, stats.rho, stats.gamma, stats.kappa
        ));
        report.epochs.push(stats);

        if valid_loss < report.best_valid_loss {
            report.best_valid_loss = valid_loss;
            report.best_epoch = epoch;
            best_params = model.params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    model.params = best_params;
    Ok(report)
}

/// Post-fit calibration phase: with the generator held fixed (the calibrated
/// distribution stop-gradients everything except kappa), fit kappa alone by
/// minimizing the calibrated negative log likelihood of sampled confident
/// sub-sequences. Kappa's own loss term is independent of the other loss
/// terms, so fitting it against the converged model is equivalent to joint
/// training but sees the final confidence landscape instead of the noisy
/// early one. No-op for baseline models.
pub fn fit_calibration(
    model: &mut Model,
    vocab: &Vocabulary,
    examples: &[Example],
    epochs: usize,
    lr: f64,
    k_samples: usize,
    null_mode: bool,
    seed: u64,
    log: &mut dyn FnMut(&str),
) -> std::result::Result<(), TrainError> {
    if model.cfg.mode != Mode::Confident {
        return Ok(());
    }
    if examples.is_empty() {
        return Err(TrainError::EmptySplit { split: "train" });
    }
    let prep = prepare(examples, vocab);
    let mut adam = Adam::new(lr);
    let k = k_samples.max(1);
    for epoch in 1..=epochs {
        let mut sum = 0.0;
        // Per-example steps make kappa a noisy random walk around its
        // optimum; the average iterate of the last epoch is a far more
        // stable estimate than wherever the walk happens to stop.
        let mut kappa_sum = 0.0;
        for (i, p) in prep.iter().enumerate() {
            // Distinct stream from the main fit's per-example rngs.
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                seed ^ 0xCA11_B4A7,
                epoch as u64,
                i as u64,
            ));
            let mut t = Tape::new();
            let nodes = model.bind(&mut t);
            let net = Net::new(&model.cfg, &nodes);
            let enc = net.encode(&mut t, &p.src_ids)?;
            let pass = forced_pass(&net, &mut t, &enc, &p.y, DropoutRates::default(), None)?;
            let cp = ConfidenceParams::from_model(model);
            let mut total = t.scalar_const(0.0);
            for _ in 0..k {
                let labels = sample_labels(&pass.c_values, &cp, &mut rng);
                let (z, _) = build_z(&p.y, &labels, null_mode);
                let score =
                    sequence_log_prob(&net, &mut t, &enc, &z, DropoutRates::default(), None)?;
                total = t.sub(total, score.log_phat)?;
            }
            let loss = t.scale(total, 1.0 / k as f64)?;
            let value = t.val(loss).item();
            if !value.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    msg: format!("non-finite calibration loss on example {i}"),
                });
            }
            sum += value;
            t.backward(loss)?;
            if let Some(g) = t.grad(nodes.id("conf.kappa")) {
                let mut grads = IndexMap::new();
                grads.insert("conf.kappa".to_string(), g.clone());
                adam.step(&mut model.params, &grads);
            }
            kappa_sum += model.params.get("conf.kappa").item();
        }
        if epoch == epochs {
            model.params.get_mut("conf.kappa").data_mut()[0] = kappa_sum / prep.len() as f64;
        }
        log(&format!(
            "calibration epoch {} loss {:.6} kappa {:.4}",
            epoch,
            sum / prep.len() as f64,
            model.params.get("conf.kappa").item()
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SourceTable;
    use crate::model::{ModelConfig, ParamNodes};
    use crate::tape::grad_check;

    fn cfg(mode: Mode) -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            embed_dim: 3,
            encoder_hidden: 3,
            decoder_hidden: 3,
            mode,
            copy_enabled: true,
            confidence_from_prob: false,
            seed: 3,
        }
    }

    fn toy() -> (Model, Vec<usize>, Vec<usize>) {
        let model = Model::new(cfg(Mode::Confident)).unwrap();
        let src = vec![8, 9, 10];
        let y = vec![9, 11, data::EOS];
        (model, src, y)
    }

    #[test]
    fn keep_prob_endpoints() {
        // rho = 0: C^0 = 1, so Q(keep) = 1 / (1 + gamma).
        for c in [0.0, 0.3, 1.0] {
            assert!((keep_prob(c, 0.0, 1.0) - 0.5).abs() < 1e-15);
        }
        // C = 1: 1^rho = 1 for any rho.
        for rho in [-2.0, 0.0, 5.0] {
            assert!((keep_prob(1.0, rho, 1.0) - 0.5).abs() < 1e-15);
        }
        assert!(keep_prob(0.9, 3.0, 1.0) > keep_prob(0.1, 3.0, 1.0));
    }

    #[test]
    fn build_z_null_rule() {
        // y = a b c d e, labels K S S S K -> a <null> e.
        let y = vec![8, 9, 10, 11, 8];
        let labels = vec![true, false, false, false, true];
        let (z, iota) = build_z(&y, &labels, true);
        assert_eq!(z, vec![8, data::NULL, 8]);
        assert_eq!(iota, vec![0, 1, 4]);
        // Plain mode just restricts.
        let (z, iota) = build_z(&y, &labels, false);
        assert_eq!(z, vec![8, 8]);
        assert_eq!(iota, vec![0, 4]);
    }

    #[test]
    fn empirical_keep_frequency_matches_eq13() {
        let cp = ConfidenceParams {
            rho: 2.5,
            gamma: 0.7,
            kappa: 0.0,
        };
        let confs = [0.9, 0.2, 0.55, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000usize;
        let mut keeps = [0usize; 4];
        for _ in 0..n {
            // Pad a forced-keep EOS slot so all four entries are free.
            let mut with_eos = confs.to_vec();
            with_eos.push(1.0);
            let labels = sample_labels(&with_eos, &cp, &mut rng);
            for (k, &l) in keeps.iter_mut().zip(&labels) {
                *k += l as usize;
            }
        }
        for (i, &c) in confs.iter().enumerate() {
            let q = keep_prob(c, cp.rho, cp.gamma);
            let se = (q * (1.0 - q) / n as f64).sqrt();
            let freq = keeps[i] as f64 / n as f64;
            assert!(
                (freq - q).abs() <= 3.0 * se,
                "pos {i}: freq {freq} vs q {q} (3se {})",
                3.0 * se
            );
        }
    }

    #[test]
    fn sampled_log_q_matches_recomputation() {
        let cp = ConfidenceParams {
            rho: 1.3,
            gamma: 2.0,
            kappa: 0.0,
        };
        let confs = [0.8, 0.4, 0.9, 0.99];
        let y = [8, 9, 10, data::EOS];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let s = sample_subsequence(&y, &confs, &cp, true, &mut rng);
            assert!(*s.labels.last().unwrap(), "EOS must be kept");
            let expect: f64 = (0..3)
                .map(|i| {
                    let q = keep_prob(confs[i], cp.rho, cp.gamma);
                    if s.labels[i] { q.ln() } else { (1.0 - q).ln() }
                })
                .sum();
            assert_eq!(s.log_q, expect);
        }
    }

    #[test]
    fn sequence_log_prob_single_eos_and_kappa_zero() {
        let (model, src, _) = toy();
        let mut t = Tape::new();
        let nodes = model.bind(&mut t);
        let net = Net::new(&model.cfg, &nodes);
        let enc = net.encode(&mut t, &src).unwrap();
        let score =
            sequence_log_prob(&net, &mut t, &enc, &[data::EOS], DropoutRates::default(), None)
                .unwrap();
        // Direct step for comparison.
        let s0 = net.init_state(&mut t);
        let s1 = net.step(&mut t, &enc, enc.mat, &s0, data::BOS).unwrap();
        let p = t.val(s1.out.as_ref().unwrap().p_mix).data()[data::EOS];
        assert!((t.val(score.log_p).item() - p.ln()).abs() < 1e-12);
        // kappa starts at 0, so the calibrated score matches.
        assert!((t.val(score.log_phat).item() - t.val(score.log_p).item()).abs() < 1e-9);
    }

    #[test]
    fn sequence_log_prob_matches_manual_chain() {
        let (model, src, y) = toy();
        let mut t = Tape::new();
        let nodes = model.bind(&mut t);
        let net = Net::new(&model.cfg, &nodes);
        let enc = net.encode(&mut t, &src).unwrap();
        let score =
            sequence_log_prob(&net, &mut t, &enc, &y, DropoutRates::default(), None).unwrap();
        let mut state = net.init_state(&mut t);
        let mut prev = data::BOS;
        let mut want = 0.0;
        for &tok in &y {
            state = net.step(&mut t, &enc, enc.mat, &state, prev).unwrap();
            want += t.val(state.out.as_ref().unwrap().p_mix).data()[tok]
                .max(PROB_FLOOR)
                .ln();
            prev = tok;
        }
        assert!((t.val(score.log_p).item() - want).abs() < 1e-10);
    }

    #[test]
    fn sequence_log_prob_rejects_oov_and_missing_eos() {
        let (model, src, _) = toy();
        let mut t = Tape::new();
        let nodes = model.bind(&mut t);
        let net = Net::new(&model.cfg, &nodes);
        let enc = net.encode(&mut t, &src).unwrap();
        assert!(
            sequence_log_prob(&net, &mut t, &enc, &[99, data::EOS], DropoutRates::default(), None)
                .is_err()
        );
        assert!(
            sequence_log_prob(&net, &mut t, &enc, &[8, 9], DropoutRates::default(), None).is_err()
        );
    }

    #[test]
    fn base_lm_log_prob_zero_score_ignores_src_embedding() {
        let (model, _, y) = toy();
        let mut other = Model::new(cfg(Mode::Confident)).unwrap();
        other.params.get_mut("embed_src").data_mut().fill(2.0);
        let run = |m: &Model| {
            let mut t = Tape::new();
            let nodes = m.bind(&mut t);
            let net = Net::new(&m.cfg, &nodes);
            let zero = t.scalar_const(0.0);
            let scores = vec![zero; y.len()];
            let lp = base_lm_log_prob(&net, &mut t, &y, &scores).unwrap();
            t.val(lp).item()
        };
        assert_eq!(run(&model), run(&other));

        // Length-1 sequence gives a single-step log prob in (-inf, 0).
        let mut t = Tape::new();
        let nodes = model.bind(&mut t);
        let net = Net::new(&model.cfg, &nodes);
        let zero = t.scalar_const(0.0);
        let lp = base_lm_log_prob(&net, &mut t, &[data::EOS], &[zero]).unwrap();
        assert!(t.val(lp).item() < 0.0);
    }

    #[test]
    fn vb_loss_keep_all_equals_likelihood_terms() {
        let (model, src, y) = toy();
        let mut t = Tape::new();
        let nodes = model.bind(&mut t);
        let net = Net::new(&model.cfg, &nodes);
        let labels = vec![vec![true; y.len()]];
        let opts = VbLossOpts::new(1, true, LossTerms::full());
        let loss = vb_loss_given_labels(&net, &mut t, &src, &y, &labels, &opts, None).unwrap();

        let mut t2 = Tape::new();
        let nodes2 = model.bind(&mut t2);
        let net2 = Net::new(&model.cfg, &nodes2);
        let enc = net2.encode(&mut t2, &src).unwrap();
        let score =
            sequence_log_prob(&net2, &mut t2, &enc, &y, DropoutRates::default(), None).unwrap();
        // Keep-all: log Q of this labeling is sum log q_t, H = log Q - log P.
        let pass = forced_pass(&net2, &mut t2, &enc, &y, DropoutRates::default(), None).unwrap();
        let cp = ConfidenceParams::from_model(&model);
        let log_q = labels_log_q(&pass.c_values, &vec![true; y.len()], &cp);
        let log_p = t2.val(score.log_p).item();
        let h = log_q - log_p;
        let want = h
            - t2.val(score.log_pb.unwrap()).item()
            - t2.val(score.log_phat).item();
        assert!((t.val(loss).item() - want).abs() < 1e-9);
    }

    #[test]
    fn vb_loss_deterministic_for_fixed_rng() {
        let (model, src, y) = toy();
        let opts = VbLossOpts::new(4, true, LossTerms::full());
        let run = || {
            let mut t = Tape::new();
            let nodes = model.bind(&mut t);
            let net = Net::new(&model.cfg, &nodes);
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let loss = vb_loss(&net, &mut t, &src, &y, &opts, &mut rng).unwrap();
            t.val(loss).item()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn exact_vb_t1_is_neg_log_p_eos() {
        let (model, src, _) = toy();
        let opts = VbLossOpts::new(1, true, LossTerms::full());
        let exact = exact_vb(&model, &src, &[data::EOS], &opts).unwrap();
        let mut t = Tape::new();
        let nodes = model.bind(&mut t);
        let net = Net::new(&model.cfg, &nodes);
        let enc = net.encode(&mut t, &src).unwrap();
        let s0 = net.init_state(&mut t);
        let s1 = net.step(&mut t, &enc, enc.mat, &s0, data::BOS).unwrap();
        let p = t.val(s1.out.as_ref().unwrap().p_mix).data()[data::EOS];
        assert!((exact.objective - (-p.ln())).abs() < 1e-10);
        assert!((exact.bound_rhs - (-p.ln())).abs() < 1e-10);
    }

    #[test]
    fn exact_vb_t2_uniform_q() {
        // rho = 0, gamma = 1 at init: both labelings get Q = 0.5.
        let (model, src, _) = toy();
        let y = vec![9, data::EOS];
        let opts = VbLossOpts::new(1, false, LossTerms::full());
        let exact = exact_vb(&model, &src, &y, &opts).unwrap();

        let log_p_of = |z: &[usize]| {
            let mut t = Tape::new();
            let nodes = model.bind(&mut t);
            let net = Net::new(&model.cfg, &nodes);
            let enc = net.encode(&mut t, &src).unwrap();
            let s = sequence_log_prob(&net, &mut t, &enc, z, DropoutRates::default(), None)
                .unwrap();
            t.val(s.log_p).item()
        };
        let lq = 0.5f64.ln();
        let want = 0.5 * (lq - log_p_of(&[data::EOS])) + 0.5 * (lq - log_p_of(&y));
        assert!((exact.objective - want).abs() < 1e-9);
    }

    #[test]
    fn exact_vb_bound_holds_on_random_toys() {
        for seed in 0..20 {
            let mut c = cfg(Mode::Confident);
            c.seed = seed;
            let mut model = Model::new(c).unwrap();
            // Spread rho/gamma away from the uniform-Q init.
            model.params.get_mut("conf.rho").data_mut()[0] = (seed as f64 % 5.0) - 1.0;
            model.params.get_mut("conf.log_gamma").data_mut()[0] = (seed as f64 % 3.0) * 0.4 - 0.4;
            let y = vec![8, 11, 9, data::EOS];
            let opts = VbLossOpts::new(1, seed % 2 == 0, LossTerms::full());
            let exact = exact_vb(&model, &[8, 9], &y, &opts).unwrap();
            assert!(
                exact.objective >= exact.bound_rhs - 1e-9,
                "seed {seed}: bound violated: {} < {}",
                exact.objective,
                exact.bound_rhs
            );
        }
    }

    #[test]
    fn exact_vb_rejects_long_targets() {
        let (model, src, _) = toy();
        let y = vec![8; 13];
        let opts = VbLossOpts::new(1, true, LossTerms::full());
        assert!(exact_vb(&model, &src, &y, &opts).is_err());
    }

    #[test]
    fn mc_loss_mean_matches_exact_surrogate() {
        let (model, src, y) = toy();
        let opts = VbLossOpts::new(1, true, LossTerms::full());
        let exact = exact_vb(&model, &src, &y, &opts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 4000;
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let mut t = Tape::new();
            let nodes = model.bind(&mut t);
            let net = Net::new(&model.cfg, &nodes);
            let loss = vb_loss(&net, &mut t, &src, &y, &opts, &mut rng).unwrap();
            vals.push(t.val(loss).item());
        }
        let mean: f64 = vals.iter().sum::<f64>() / n as f64;
        let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - exact.surrogate).abs() <= 3.0 * se,
            "mean {mean} vs exact {} (3se {})",
            exact.surrogate,
            3.0 * se
        );
    }

    #[test]
    fn vb_loss_gradient_matches_finite_differences() {
        let (model, src, y) = toy();
        // Move rho/kappa off zero so every term is exercised.
        let mut model = model;
        model.params.get_mut("conf.rho").data_mut()[0] = 0.8;
        model.params.get_mut("conf.kappa").data_mut()[0] = 0.4;
        let opts = VbLossOpts::new(3, true, LossTerms::full());
        // Freeze the labelings so the loss is a smooth function of params.
        let cp = ConfidenceParams::from_model(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let labelings: Vec<Vec<bool>> = (0..3)
            .map(|_| sample_labels(&[0.5, 0.5, 1.0], &cp, &mut rng))
            .collect();
        let names: Vec<String> = model.params.names().cloned().collect();
        let tensors: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
        let rel = grad_check(&tensors, 1e-4, |t, ids| {
            let nodes = ParamNodes::from_ids(&names, ids);
            let net = Net::new(&model.cfg, &nodes);
            vb_loss_given_labels(&net, t, &src, &y, &labelings, &opts, None)
        })
        .unwrap();
        assert!(rel <= 1e-4, "max rel err {rel}");
    }

    fn tiny_corpus() -> (Vec<Example>, Vocabulary) {
        let make = |name: &str, city: &str| Example {
            table: SourceTable {
                fields: vec![
                    (vec!["name".into()], vec![name.to_string()]),
                    (vec!["city".into()], vec![city.to_string()]),
                ],
            },
            reference: vec![name.to_string(), "lives".into(), "in".into(), city.to_string()],
            support_labels: None,
        };
        let examples = vec![
            make("ada", "paris"),
            make("bob", "rome"),
            make("eve", "paris"),
        ];
        let vocab = Vocabulary::build(
            examples
                .iter()
                .flat_map(|e| {
                    e.reference
                        .iter()
                        .cloned()
                        .chain(e.table.all_tokens().map(|s| s.to_string()))
                })
                .collect::<Vec<_>>()
                .into_iter(),
            64,
        );
        (examples, vocab)
    }

    #[test]
    fn fit_zero_lr_leaves_params_unchanged() {
        let (examples, vocab) = tiny_corpus();
        let mut model = Model::new(ModelConfig {
            vocab_size: vocab.len(),
            embed_dim: 3,
            encoder_hidden: 3,
            decoder_hidden: 3,
            mode: Mode::Confident,
            copy_enabled: true,
            confidence_from_prob: false,
            seed: 1,
        })
        .unwrap();
        let before = model.params.clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 1,
            k_samples: 2,
            ..Default::default()
        };
        let mut lines = Vec::new();
        fit(
            &mut model,
            &vocab,
            &examples,
            &examples,
            &cfg,
            LossTerms::full(),
            &mut |s| lines.push(s.to_string()),
        )
        .unwrap();
        assert_eq!(before, model.params);
        assert_eq!(lines.len(), 1);
        assert!(lines[0].starts_with("epoch 1 "));
    }

    #[test]
    fn fit_calibration_moves_only_kappa() {
        let (examples, vocab) = tiny_corpus();
        let mut model = Model::new(ModelConfig {
            vocab_size: vocab.len(),
            embed_dim: 4,
            encoder_hidden: 4,
            decoder_hidden: 4,
            mode: Mode::Confident,
            copy_enabled: true,
            confidence_from_prob: false,
            seed: 2,
        })
        .unwrap();
        let before = model.params.clone();
        let mut lines = Vec::new();
        fit_calibration(&mut model, &vocab, &examples, 2, 0.05, 2, true, 9, &mut |s| {
            lines.push(s.to_string())
        })
        .unwrap();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("calibration epoch 1 loss "));
        for (name, t) in model.params.iter() {
            if name == "conf.kappa" {
                assert_ne!(t.item(), before.get(name).item(), "kappa should move");
            } else {
                assert_eq!(t, before.get(name), "{name} must stay fixed");
            }
        }

        // Baseline models have no calibration weight; the phase is a no-op.
        let mut base = Model::new(ModelConfig {
            vocab_size: vocab.len(),
            embed_dim: 4,
            encoder_hidden: 4,
            decoder_hidden: 4,
            mode: Mode::Baseline,
            copy_enabled: true,
            confidence_from_prob: false,
            seed: 2,
        })
        .unwrap();
        let before = base.params.clone();
        fit_calibration(&mut base, &vocab, &examples, 1, 0.05, 1, true, 9, &mut |_| {}).unwrap();
        assert_eq!(base.params, before);
    }

    #[test]
    fn fit_reduces_loss_and_keeps_gamma_positive() {
        let (examples, vocab) = tiny_corpus();
        let mut model = Model::new(ModelConfig {
            vocab_size: vocab.len(),
            embed_dim: 4,
            encoder_hidden: 4,
            decoder_hidden: 4,
            mode: Mode::Confident,
            copy_enabled: true,
            confidence_from_prob: false,
            seed: 2,
        })
        .unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            max_epochs: 8,
            k_samples: 2,
            patience: 8,
            ..Default::default()
        };
        let mut lines = Vec::new();
        let report = fit(
            &mut model,
            &vocab,
            &examples,
            &examples,
            &cfg,
            LossTerms::full(),
            &mut |s| lines.push(s.to_string()),
        )
        .unwrap();
        let first = report.epochs.first().unwrap().valid_loss;
        assert!(report.best_valid_loss < first, "no improvement over {first}");
        for e in &report.epochs {
            assert!(e.gamma > 0.0);
        }
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        let mut params = crate::model::Parameters::from_map(
            [("w".to_string(), Tensor::scalar(1.0))].into_iter().collect(),
        );
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Tensor::scalar(0.3));
        let mut adam = Adam::new(0.01);
        adam.step(&mut params, &grads);
        // First step: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
        let want = 1.0 - 0.01 * 0.3 / (0.3 + 1e-8);
        assert!((params.get("w").item() - want).abs() < 1e-12);
    }
}
