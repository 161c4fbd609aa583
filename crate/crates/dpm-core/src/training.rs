//! Dual-objective training: audio autoregression plus constrained emotion
//! supervision, combined as `L = (L_a + L_e) / 2`.
//!
//! Every sentence ending contributes one autoregressive span (the `n_o`
//! tokens ending at the audio_end marker, with up to `n_p` prefix tokens)
//! and one emotion term (an E-way cross entropy over constrained logits at
//! the position following the marker, conditioned on up to `n_q` tokens).
//! Only the training adapter receives gradients; the base stays frozen.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{preprocess_sample, DialogueSample, PreprocessedSample};
use crate::error::{DpmError, Result};
use crate::lora::{self, TRAINING_ADAPTER};
use crate::model::Model;
use crate::numerics::{Optimizer, OptimizerKind, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Autoregressive target span length (tokens, ending at audio_end).
    pub n_o: usize,
    /// Prefix length for the autoregressive span.
    pub n_p: usize,
    /// Prefix length for emotion supervision.
    pub n_q: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Place each training span at a random window offset so every learned
    /// position receives gradient signal, not just the first span-length ones.
    pub random_offsets: bool,
    /// Keep earlier sentences' emotion identifiers in the token stream.
    pub keep_emotion_ids: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_o: 64,
            n_p: 128,
            n_q: 128,
            learning_rate: 5e-5,
            epochs: 20,
            batch_size: 8,
            optimizer: OptimizerKind::Adam,
            random_offsets: true,
            keep_emotion_ids: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_limit: usize) -> Result<()> {
        if self.n_o == 0 {
            return Err(DpmError::InvalidConfig("n_o must be at least 1".into()));
        }
        if self.n_o + self.n_p > n_limit {
            return Err(DpmError::InvalidConfig(format!(
                "n_o + n_p = {} exceeds the window limit {n_limit}",
                self.n_o + self.n_p
            )));
        }
        if self.n_q > n_limit {
            return Err(DpmError::InvalidConfig(format!(
                "n_q = {} exceeds the window limit {n_limit}",
                self.n_q
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(DpmError::InvalidConfig(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(DpmError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Absolute token ranges of one autoregressive training span. The prefix
/// abuts the target; the target always ends at the audio_end position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArSpan {
    pub prefix: Range<usize>,
    pub target: Range<usize>,
}

impl ArSpan {
    pub fn window(&self) -> Range<usize> {
        self.prefix.start..self.target.end
    }

    pub fn window_len(&self) -> usize {
        self.target.end - self.prefix.start
    }
}

/// Span selection with the short-history boundary cases: with `n` tokens of
/// history ending at position `t_pos`, the target shrinks to `n` (and the
/// prefix to zero) when `n < n_o`, and the prefix shrinks to `n - n_o` when
/// the full prefix does not fit.
pub fn select_ar_span(t_pos: usize, n: usize, n_o: usize, n_p: usize) -> ArSpan {
    debug_assert!(n >= 1 && n <= t_pos + 1);
    let eff_o = n_o.min(n);
    let eff_p = if n < n_o { 0 } else { n_p.min(n - eff_o) };
    let target_start = t_pos + 1 - eff_o;
    ArSpan {
        prefix: (target_start - eff_p)..target_start,
        target: target_start..(t_pos + 1),
    }
}

/// Emotion-supervision prefix length at a sentence ending: `min(n_q, n)`.
pub fn emotion_prefix_len(t_pos: usize, n_q: usize) -> usize {
    n_q.min(t_pos + 1)
}

/// Mean next-token cross entropy over the target span under teacher forcing.
///
/// When the prefix is empty the span starts the sequence, so its first token
/// has no conditioning context and cannot be scored; the mean then runs over
/// the remaining target positions. A one-token history has no scorable
/// position at all and yields a constant zero.
pub fn autoregressive_loss<F: Scalar>(
    model: &Model<F>,
    tokens: &[u32],
    span: &ArSpan,
    offset: usize,
) -> Result<Tensor<F>> {
    let window = &tokens[span.window()];
    let len = window.len();
    let t0 = span.target.start - span.prefix.start;
    let first = t0.max(1);
    if first >= len {
        return Ok(Tensor::scalar(F::zero()));
    }
    let logits = model.forward(window, offset)?;
    let rows = logits.slice_rows(first - 1, len - 1)?;
    let targets: Vec<usize> = window[first..].iter().map(|&t| t as usize).collect();
    rows.cross_entropy_rows(&targets)
}

/// E-way cross entropy between the constrained emotion distribution at the
/// position after `t_pos` and the one-hot true label.
pub fn emotion_loss<F: Scalar>(
    model: &Model<F>,
    tokens: &[u32],
    t_pos: usize,
    n_q: usize,
    label: usize,
    offset: usize,
) -> Result<Tensor<F>> {
    let e = model.config.vocab.num_emotions;
    if label >= e {
        return Err(DpmError::IndexRange {
            context: "emotion_loss",
            index: label,
            bound: e,
        });
    }
    let q = emotion_prefix_len(t_pos, n_q);
    let window = &tokens[t_pos + 1 - q..=t_pos];
    let logits = model.forward(window, offset)?;
    let last = logits.row(q - 1)?;
    model.emotion_logits(&last)?.cross_entropy(label)
}

/// `L = (L_a + L_e) / 2`.
pub fn total_loss<F: Scalar>(l_a: &Tensor<F>, l_e: &Tensor<F>) -> Result<Tensor<F>> {
    Ok(l_a.add(l_e)?.scale(F::from_f64(0.5)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub loss_ar: f64,
    pub loss_emotion: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingRun {
    pub history: Vec<EpochStats>,
}

/// Mean `(L, L_a, L_e)` over every sentence ending, without updates.
pub fn evaluate_loss<F: Scalar>(
    model: &Model<F>,
    samples: &[PreprocessedSample],
    cfg: &TrainConfig,
) -> Result<(f64, f64, f64)> {
    let mut sums = (0.0, 0.0, 0.0);
    let mut count = 0usize;
    for pre in samples {
        for (i, &t_pos) in pre.sentence_ends.iter().enumerate() {
            let span = select_ar_span(t_pos, t_pos + 1, cfg.n_o, cfg.n_p);
            let la = autoregressive_loss(model, &pre.tokens, &span, 0)?.item().to_f64();
            let le = emotion_loss(model, &pre.tokens, t_pos, cfg.n_q, pre.labels[i], 0)?
                .item()
                .to_f64();
            sums.0 += 0.5 * (la + le);
            sums.1 += la;
            sums.2 += le;
            count += 1;
        }
    }
    let n = count.max(1) as f64;
    Ok((sums.0 / n, sums.1 / n, sums.2 / n))
}

/// Train the attached training adapter over the corpus. One combined
/// backward per sentence ending; one optimizer step per batch of endings.
pub fn train<F: Scalar>(
    model: &mut Model<F>,
    samples: &[DialogueSample],
    cfg: &TrainConfig,
) -> Result<TrainingRun> {
    cfg.validate(model.config.n_limit)?;
    let adapter = model.adapter(TRAINING_ADAPTER).ok_or_else(|| {
        DpmError::AdapterLifecycle("attach a training adapter before training".into())
    })?;
    if !adapter.is_trainable() {
        return Err(DpmError::AdapterLifecycle(
            "training adapter is frozen".into(),
        ));
    }
    let params: Vec<Tensor<F>> = adapter.parameters().into_iter().map(|(_, t)| t).collect();
    let vocab = model.config.vocab.clone();
    let n_limit = model.config.n_limit;
    let pres: Vec<PreprocessedSample> = samples
        .iter()
        .map(|s| preprocess_sample(s, &vocab, cfg.keep_emotion_ids))
        .collect::<Result<_>>()?;

    let mut opt = Optimizer::new(cfg.optimizer, F::from_f64(cfg.learning_rate));
    let inv_batch = F::from_f64(1.0 / cfg.batch_size as f64);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut rng = crate::seeded_rng(cfg.seed, 10_000 + epoch as u64);
        let mut order: Vec<usize> = (0..pres.len()).collect();
        order.shuffle(&mut rng);

        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        let mut count = 0usize;
        let mut pending = 0usize;
        for &si in &order {
            let pre = &pres[si];
            for (i, &t_pos) in pre.sentence_ends.iter().enumerate() {
                let span = select_ar_span(t_pos, t_pos + 1, cfg.n_o, cfg.n_p);
                let offset_a = if cfg.random_offsets {
                    rng.gen_range(0..=n_limit - span.window_len())
                } else {
                    0
                };
                let la = autoregressive_loss(model, &pre.tokens, &span, offset_a)?;
                let q = emotion_prefix_len(t_pos, cfg.n_q);
                let offset_e = if cfg.random_offsets {
                    rng.gen_range(0..=n_limit - q)
                } else {
                    0
                };
                let le = emotion_loss(model, &pre.tokens, t_pos, cfg.n_q, pre.labels[i], offset_e)?;
                let loss = total_loss(&la, &le)?;

                let value = loss.item().to_f64();
                if !value.is_finite() {
                    return Err(DpmError::NumericalAbort {
                        context: format!(
                            "loss {value} at epoch {epoch}, dialogue {}, sentence {i}",
                            pre.dialogue_id
                        ),
                    });
                }
                sums.0 += value;
                sums.1 += la.item().to_f64();
                sums.2 += le.item().to_f64();
                count += 1;

                loss.scale(inv_batch).backward()?;
                pending += 1;
                if pending == cfg.batch_size {
                    opt.step(&params)?;
                    opt.zero_grad(&params);
                    pending = 0;
                }
            }
        }
        if pending > 0 {
            opt.step(&params)?;
            opt.zero_grad(&params);
        }
        let n = count.max(1) as f64;
        history.push(EpochStats {
            epoch,
            loss: sums.0 / n,
            loss_ar: sums.1 / n,
            loss_emotion: sums.2 / n,
        });
    }
    Ok(TrainingRun { history })
}

/// Metrics file: one tab-separated row per epoch.
pub fn write_metrics_file(path: impl AsRef<Path>, run: &TrainingRun) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    writeln!(w, "epoch\tloss\tloss_ar\tloss_emotion")?;
    for s in &run.history {
        writeln!(w, "{}\t{}\t{}\t{}", s.epoch, s.loss, s.loss_ar, s.loss_emotion)?;
    }
    w.flush()?;
    Ok(())
}

/// Attach a fresh training adapter and run the full loop; the usual entry
/// point for experiment harnesses.
pub fn train_from_scratch<F: Scalar>(
    model: &mut Model<F>,
    samples: &[DialogueSample],
    cfg: &TrainConfig,
    rank: usize,
    alpha: f64,
) -> Result<TrainingRun> {
    lora::attach_training_lora(model, rank, alpha, cfg.seed)?;
    train(model, samples, cfg)
}
