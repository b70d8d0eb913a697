//! Beam search with confidence thresholding, plus the per-token score tracer
//! and the source-sensitivity probe.
//!
//! Each step is scored by the calibrated log-probability (or the plain mixed
//! one when calibration is off). When the selected token's confidence falls
//! below the threshold, a `<null>` is emitted in its place — the model
//! "pauses" instead of committing to a low-confidence token — and two nulls
//! may never appear back to back. Finished hypotheses are ranked by
//! `score / ((5 + |Y|) / 6)^alpha`.

use crate::data::{self, Example, Vocabulary};
use crate::model::{EncoderState, Mode, Model, Net, StepState, PROB_FLOOR};
use crate::tape::{NodeId, Tape};
use crate::tensor::{NumericsError, Result, Tensor};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_len: usize,
    /// `((5 + |Y|) / 6)^alpha` divisor on finished hypotheses; 0 disables.
    pub length_penalty_alpha: f64,
    /// Emit `<null>` instead of any token whose confidence is below this.
    pub null_threshold: Option<f64>,
    pub use_calibration: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 8,
            max_len: 32,
            length_penalty_alpha: 0.0,
            null_threshold: None,
            use_calibration: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let thr_ok = self
            .null_threshold
            .map_or(true, |t| (0.0..=1.0).contains(&t));
        if self.beam_size == 0 || self.max_len == 0 || !thr_ok {
            return Err(NumericsError::Invalid {
                op: "decode_config",
                msg: format!("{self:?}"),
            });
        }
        Ok(())
    }
}

/// Per-emitted-token diagnostic row.
#[derive(Clone, Copy, Debug)]
pub struct TraceRow {
    pub token: usize,
    /// Attention score (the copy-refined one when available).
    pub a_score: f64,
    /// Base-LM probability of the token.
    pub p_b: f64,
    /// Confidence of the token.
    pub confidence: f64,
}

#[derive(Clone, Debug)]
pub struct DecodeOutput {
    /// Final tokens with all `<null>`s (and the terminating EOS) removed.
    pub tokens: Vec<usize>,
    /// Raw emission including `<null>`s and EOS.
    pub emission: Vec<usize>,
    pub trace: Vec<TraceRow>,
    /// Length-penalized score the winner was ranked by.
    pub score: f64,
    /// True if the hypothesis hit `max_len` without producing EOS.
    pub forced: bool,
}

pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// Remove every `<null>` token. Idempotent.
pub fn strip_nulls(tokens: &[usize]) -> Vec<usize> {
    tokens.iter().copied().filter(|&t| t != data::NULL).collect()
}

#[derive(Clone)]
struct Hypothesis {
    state: StepState,
    emission: Vec<usize>,
    trace: Vec<TraceRow>,
    score: f64,
    last_was_null: bool,
    finished: bool,
    forced: bool,
}

struct Candidate {
    hyp: usize,
    token: usize,
    score: f64,
}

fn step_values(
    net: &Net,
    t: &mut Tape,
    enc: &EncoderState,
    enc_mat: NodeId,
    prev: &StepState,
    prev_token: usize,
    use_calibration: bool,
) -> Result<(StepState, Vec<f64>, Option<(f64, Vec<f64>, Vec<f64>)>)> {
    let state = net.step(t, enc, enc_mat, prev, prev_token)?;
    let out = state.out.as_ref().expect("step output");
    let dist = t.val(out.output_dist(use_calibration)).data().to_vec();
    let diag = match (out.a_tilde.or(out.a_score), out.p_b, out.c_vec) {
        (Some(a), Some(pb), Some(cv)) => Some((
            t.val(a).item(),
            t.val(pb).data().to_vec(),
            t.val(cv).data().to_vec(),
        )),
        _ => None,
    };
    Ok((state, dist, diag))
}

/// Beam search over a single source. Deterministic given (params, source,
/// cfg).
pub fn beam_search(model: &Model, src_ids: &[usize], cfg: &DecodeConfig) -> Result<DecodeOutput> {
    cfg.validate()?;
    if cfg.null_threshold.is_some() && model.cfg.vocab_size <= data::NULL {
        return Err(NumericsError::Invalid {
            op: "beam_search",
            msg: "null thresholding needs <null> in the vocabulary".into(),
        });
    }
    let mut t = Tape::new();
    let nodes = model.bind(&mut t);
    let net = Net::new(&model.cfg, &nodes);
    let enc = net.encode(&mut t, src_ids)?;
    let init = net.init_state(&mut t);
    let mut beam = vec![Hypothesis {
        state: init,
        emission: Vec::new(),
        trace: Vec::new(),
        score: 0.0,
        last_was_null: false,
        finished: false,
        forced: false,
    }];

    for _ in 0..cfg.max_len {
        if beam.iter().all(|h| h.finished) {
            break;
        }
        // Expand every live hypothesis; finished ones compete unchanged.
        let mut candidates: Vec<Candidate> = Vec::new();
        let mut expansions: Vec<Option<(StepState, Option<(f64, Vec<f64>, Vec<f64>)>)>> =
            Vec::with_capacity(beam.len());
        for (hi, hyp) in beam.iter().enumerate() {
            if hyp.finished {
                expansions.push(None);
                candidates.push(Candidate {
                    hyp: hi,
                    token: usize::MAX,
                    score: hyp.score,
                });
                continue;
            }
            let prev_token = *hyp.emission.last().unwrap_or(&data::BOS);
            let (state, dist, diag) =
                step_values(&net, &mut t, &enc, enc.mat, &hyp.state, prev_token, cfg.use_calibration)?;
            for (tok, &p) in dist.iter().enumerate() {
                if tok == data::NULL && hyp.last_was_null {
                    continue; // no two nulls in a row
                }
                candidates.push(Candidate {
                    hyp: hi,
                    token: tok,
                    score: hyp.score + p.max(PROB_FLOOR).ln(),
                });
            }
            expansions.push(Some((state, diag)));
        }
        // Stable selection: score desc, then hypothesis index, then token id.
        candidates.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then(a.hyp.cmp(&b.hyp))
                .then(a.token.cmp(&b.token))
        });

        let mut next: Vec<Hypothesis> = Vec::with_capacity(cfg.beam_size);
        let mut taken_null: Vec<usize> = Vec::new(); // hyps already expanded into a null
        for cand in &candidates {
            if next.len() == cfg.beam_size {
                break;
            }
            let hyp = &beam[cand.hyp];
            if hyp.finished {
                next.push(hyp.clone());
                continue;
            }
            let (state, diag) = expansions[cand.hyp].as_ref().expect("live hyp expanded");
            let mut token = cand.token;
            let mut row = TraceRow {
                token,
                a_score: 0.0,
                p_b: 0.0,
                confidence: 1.0,
            };
            if let Some((a, pb, cv)) = diag {
                row.a_score = *a;
                row.p_b = pb[token];
                row.confidence = cv[token];
            }
            // Low-confidence tokens are emitted as <null>, keeping the
            // original token's score. EOS is never substituted, and a null
            // may not follow a null.
            if let (Some(thr), Some((_, _, cv))) = (cfg.null_threshold, diag) {
                if token != data::EOS
                    && token != data::NULL
                    && !hyp.last_was_null
                    && cv[token] < thr
                {
                    token = data::NULL;
                    row.token = data::NULL;
                }
            }
            if token == data::NULL {
                // Two candidates of one hypothesis may collapse to the same
                // null continuation; keep only the best-scoring one.
                if taken_null.contains(&cand.hyp) {
                    continue;
                }
                taken_null.push(cand.hyp);
            }
            let mut new_hyp = Hypothesis {
                state: state.clone(),
                emission: hyp.emission.clone(),
                trace: hyp.trace.clone(),
                score: cand.score,
                last_was_null: token == data::NULL,
                finished: token == data::EOS,
                forced: false,
            };
            new_hyp.emission.push(token);
            new_hyp.trace.push(row);
            next.push(new_hyp);
        }
        beam = next;
    }

    for hyp in &mut beam {
        if !hyp.finished {
            hyp.finished = true;
            hyp.forced = true;
        }
    }
    let best = beam
        .into_iter()
        .map(|h| {
            let ranked = h.score / length_penalty(h.emission.len(), cfg.length_penalty_alpha);
            (ranked, h)
        })
        .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
        .expect("beam never empty");
    let (score, hyp) = best;
    let mut tokens = strip_nulls(&hyp.emission);
    if tokens.last() == Some(&data::EOS) {
        tokens.pop();
    }
    Ok(DecodeOutput {
        tokens,
        emission: hyp.emission,
        trace: hyp.trace,
        score,
        forced: hyp.forced,
    })
}

/// Exhaustive reference search: scores every token sequence of length up to
/// `max_len` (EOS terminates) and returns the best under the same length
/// penalty. No null thresholding. Exponential; tests only.
pub fn exhaustive_search(
    model: &Model,
    src_ids: &[usize],
    cfg: &DecodeConfig,
) -> Result<DecodeOutput> {
    let mut t = Tape::new();
    let nodes = model.bind(&mut t);
    let net = Net::new(&model.cfg, &nodes);
    let enc = net.encode(&mut t, src_ids)?;
    let init = net.init_state(&mut t);

    struct Best {
        score: f64,
        emission: Vec<usize>,
        forced: bool,
    }
    let mut best = Best {
        score: f64::NEG_INFINITY,
        emission: Vec::new(),
        forced: false,
    };
    // Depth-first over prefixes, reusing each prefix's decoder state.
    fn recurse(
        net: &Net,
        t: &mut Tape,
        enc: &EncoderState,
        state: &StepState,
        prefix: &mut Vec<usize>,
        score: f64,
        cfg: &DecodeConfig,
        best: &mut Best,
    ) -> Result<()> {
        let prev_token = *prefix.last().unwrap_or(&data::BOS);
        let next = net.step(t, enc, enc.mat, state, prev_token)?;
        let dist = t
            .val(next.out.as_ref().expect("step output").output_dist(cfg.use_calibration))
            .data()
            .to_vec();
        for (tok, &p) in dist.iter().enumerate() {
            let s = score + p.max(PROB_FLOOR).ln();
            prefix.push(tok);
            let done = tok == data::EOS || prefix.len() == cfg.max_len;
            if done {
                let ranked = s / length_penalty(prefix.len(), cfg.length_penalty_alpha);
                if ranked > best.score {
                    best.score = ranked;
                    best.emission = prefix.clone();
                    best.forced = tok != data::EOS;
                }
            } else {
                recurse(net, t, enc, &next, prefix, s, cfg, best)?;
            }
            prefix.pop();
        }
        Ok(())
    }
    let mut prefix = Vec::new();
    recurse(&net, &mut t, &enc, &init, &mut prefix, 0.0, cfg, &mut best)?;

    let mut tokens = strip_nulls(&best.emission);
    if tokens.last() == Some(&data::EOS) {
        tokens.pop();
    }
    Ok(DecodeOutput {
        tokens,
        emission: best.emission,
        trace: Vec::new(),
        score: best.score,
        forced: best.forced,
    })
}

/// Teacher-forced diagnostic rows for a target sequence (one row per target
/// token). Confident mode only.
pub fn trace(model: &Model, src_ids: &[usize], target: &[usize]) -> Result<Vec<TraceRow>> {
    if model.cfg.mode != Mode::Confident {
        return Err(NumericsError::Invalid {
            op: "trace",
            msg: "trace requires a confident-mode model".into(),
        });
    }
    let mut t = Tape::new();
    let nodes = model.bind(&mut t);
    let net = Net::new(&model.cfg, &nodes);
    let enc = net.encode(&mut t, src_ids)?;
    let mut state = net.init_state(&mut t);
    let mut prev = data::BOS;
    let mut rows = Vec::with_capacity(target.len());
    for &tok in target {
        if tok >= model.cfg.vocab_size {
            return Err(NumericsError::Invalid {
                op: "trace",
                msg: format!("token id {tok} outside vocabulary"),
            });
        }
        state = net.step(&mut t, &enc, enc.mat, &state, prev)?;
        let out = state.out.as_ref().expect("step output");
        rows.push(TraceRow {
            token: tok,
            a_score: t.val(out.a_tilde.expect("confident")).item(),
            p_b: t.val(out.p_b.expect("confident")).data()[tok],
            confidence: t.val(out.c_vec.expect("confident")).data()[tok],
        });
        prev = tok;
    }
    Ok(rows)
}

/// Greedy decode with optional per-step source zeroing (probability `p` per
/// step when an rng is supplied).
fn greedy_decode(
    net: &Net,
    t: &mut Tape,
    enc: &EncoderState,
    zero_mat: NodeId,
    max_len: usize,
    use_calibration: bool,
    zeroing: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<Vec<usize>> {
    let mut state = net.init_state(t);
    let mut prev = data::BOS;
    let mut out_tokens = Vec::new();
    let mut zeroing = zeroing;
    for _ in 0..max_len {
        let drop_source = match &mut zeroing {
            Some((p, rng)) => rng.gen::<f64>() < *p,
            None => false,
        };
        let mat = if drop_source { zero_mat } else { enc.mat };
        let (next, dist, _) = step_values(net, t, enc, mat, &state, prev, use_calibration)?;
        state = next;
        // Argmax with lower-id tie-break.
        let mut tok = 0usize;
        for (i, &p) in dist.iter().enumerate() {
            if p > dist[tok] {
                tok = i;
            }
        }
        if tok == data::EOS {
            break;
        }
        out_tokens.push(tok);
        prev = tok;
    }
    Ok(out_tokens)
}

/// Fraction of greedy predictions changed when each decoding step's encoder
/// vectors are zeroed with probability `p`. Returns (mean, stddev) over
/// `trials`.
pub fn source_sensitivity_probe(
    model: &Model,
    sources: &[Vec<usize>],
    p: f64,
    trials: usize,
    max_len: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&p) || trials == 0 {
        return Err(NumericsError::Invalid {
            op: "probe",
            msg: format!("p {p} / trials {trials}"),
        });
    }
    let use_cal = model.cfg.mode == Mode::Confident;
    let mut clean = Vec::with_capacity(sources.len());
    for src in sources {
        let mut t = Tape::new();
        let nodes = model.bind(&mut t);
        let net = Net::new(&model.cfg, &nodes);
        let enc = net.encode(&mut t, src)?;
        let zero = t.constant(Tensor::zeros(vec![src.len(), model.cfg.embed_dim]));
        clean.push(greedy_decode(&net, &mut t, &enc, zero, max_len, use_cal, None)?);
    }
    let mut fractions = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut changed = 0usize;
        for (i, src) in sources.iter().enumerate() {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (trial as u64) << 32 ^ i as u64);
            let mut t = Tape::new();
            let nodes = model.bind(&mut t);
            let net = Net::new(&model.cfg, &nodes);
            let enc = net.encode(&mut t, src)?;
            let zero = t.constant(Tensor::zeros(vec![src.len(), model.cfg.embed_dim]));
            let noisy =
                greedy_decode(&net, &mut t, &enc, zero, max_len, use_cal, Some((p, &mut rng)))?;
            if noisy != clean[i] {
                changed += 1;
            }
        }
        fractions.push(changed as f64 / sources.len() as f64);
    }
    let mean = fractions.iter().sum::<f64>() / trials as f64;
    let var = fractions
        .iter()
        .map(|f| (f - mean).powi(2))
        .sum::<f64>()
        / trials as f64;
    Ok((mean, var.sqrt()))
}

/// Convenience: linearized source ids for a set of examples.
pub fn example_sources(examples: &[Example], vocab: &Vocabulary) -> Vec<Vec<usize>> {
    examples
        .iter()
        .map(|ex| data::linearize(&ex.table, vocab).ids)
        .collect()
}
