//! Pretraining and fine-tuning loops, prediction, and the baselines used to
//! judge them.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment, mix_seed, unmasked, AugmentConfig, MaskedSample, SpanMode};
use crate::backtest::{ic_series, IcKind, Predictions, Returns};
use crate::data::{TimePanel, WindowSample};
use crate::error::{Error, Result};
use crate::graphs::{CorrelationGraph, MaskMode};
use crate::losses::{loss_graph_var, loss_mse_var, loss_finetune_var, loss_pretrain_var, loss_temporal_var, LossReport};
use crate::model::{encoder_forward, finetune_head, init_params, pretrain_forward, EncoderInput, ModelConfig, HEAD_PREFIX};
use crate::tensorcore::{adam_step, checkpoint, forward_backward, grad_check, GradCheckReport, Graph, OptimState, ParamStore, Real, Tensor};

/// Optimisation and augmentation settings shared by both stages.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Windows per optimizer step.
    pub batch_size: usize,
    /// Nodes per sampled sub-graph; 0 uses every node.
    pub n_sub: usize,
    pub r_t: f64,
    pub r_g: f64,
    /// Weight of the graph loss.
    pub beta: f64,
    /// Weight of the MSE term in the fine-tune loss.
    pub lambda_m: f64,
    pub learning_rate: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    /// Fine-tune only the head; false trains encoder and head jointly.
    pub freeze_encoder: bool,
    /// Include the temporal reconstruction term in the pretraining loss.
    pub include_temporal: bool,
    pub span_mode: SpanMode,
    pub mask_mode: MaskMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            n_sub: 0,
            r_t: 0.3,
            r_g: 0.3,
            beta: 1.0,
            lambda_m: 0.3,
            learning_rate: 1e-3,
            seed: 0,
            early_stop_patience: 10,
            freeze_encoder: true,
            include_temporal: true,
            span_mode: SpanMode::PerNode,
            mask_mode: MaskMode::Edge,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning defaults: as [`Default`] but 50 epochs.
    pub fn finetune_default() -> Self {
        TrainConfig {
            epochs: 50,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.r_t) {
            return bad(format!("r_t must be in [0, 1), got {}", self.r_t));
        }
        if !(0.0..1.0).contains(&self.r_g) {
            return bad(format!("r_g must be in [0, 1), got {}", self.r_g));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.n_sub == 1 {
            return bad("n_sub must be 0 (all nodes) or at least 2".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be a finite non-negative number, got {}", self.beta));
        }
        if !(self.lambda_m >= 0.0 && self.lambda_m.is_finite()) {
            return bad(format!("lambda_m must be a finite non-negative number, got {}", self.lambda_m));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        Ok(())
    }

    fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            n_sub: self.n_sub,
            r_t: self.r_t,
            r_g: self.r_g,
            span_mode: self.span_mode,
            mask_mode: self.mask_mode,
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    /// "train" or "val".
    pub split: &'static str,
    pub report: LossReport,
    /// Validation IC (fine-tuning) or NaN.
    pub ic: f64,
    /// Mean-imputation reconstruction error on the same masks, or NaN.
    pub baseline_l_t: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "epoch,split,l_t,l_g,l_pre,l_mse,l_pearson,l_fine,masked_count,supervised_edge_count,ic,baseline_l_t\n",
        );
        for r in &self.rows {
            let p = &r.report;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.split,
                p.l_t,
                p.l_g,
                p.l_pre,
                p.l_mse,
                p.l_pearson,
                p.l_fine,
                p.masked_count,
                p.supervised_edge_count,
                r.ic,
                r.baseline_l_t
            );
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Validation rows in epoch order.
    pub fn val_rows(&self) -> impl Iterator<Item = &LogRow> {
        self.rows.iter().filter(|r| r.split == "val")
    }
}

/// Result of [`pretrain`]: the best-validation parameters and the log.
#[derive(Clone, Debug)]
pub struct PretrainOutcome<T> {
    pub params: ParamStore<T>,
    pub log: TrainLog,
    /// Epoch (1-based) of the selected parameters.
    pub best_epoch: usize,
    pub best_val: LossReport,
    /// Mean-imputation error on the validation masks.
    pub val_baseline_l_t: f64,
    pub epochs_run: usize,
}

/// Result of [`finetune`].
#[derive(Clone, Debug)]
pub struct FinetuneOutcome<T> {
    pub params: ParamStore<T>,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_val_ic: f64,
    pub epochs_run: usize,
}

/// Fills every masked step with the node's mean over its unmasked steps,
/// per feature. Returns the filled `N×T×F` values.
pub fn mean_imputation(sample: &MaskedSample) -> Vec<f64> {
    let p = &sample.panel;
    let mut out = sample.original.clone();
    for i in 0..p.n {
        for c in 0..p.f {
            let (mut sum, mut cnt) = (0.0, 0usize);
            for s in 0..p.t {
                if !p.mask_positions[i * p.t + s] {
                    sum += sample.original[(i * p.t + s) * p.f + c];
                    cnt += 1;
                }
            }
            let fill = if cnt > 0 { sum / cnt as f64 } else { 0.0 };
            for s in 0..p.t {
                if p.mask_positions[i * p.t + s] {
                    out[(i * p.t + s) * p.f + c] = fill;
                }
            }
        }
    }
    out
}

/// Sum of squared errors and element count over masked positions.
fn masked_sse(sample: &MaskedSample, recon: &[f64]) -> (f64, usize) {
    let p = &sample.panel;
    let mut sse = 0.0;
    let mut cnt = 0;
    for (k, &m) in p.mask_positions.iter().enumerate() {
        if m {
            for c in 0..p.f {
                let d = recon[k * p.f + c] - sample.original[k * p.f + c];
                sse += d * d;
                cnt += 1;
            }
        }
    }
    (sse, cnt)
}

struct BatchOut {
    l_t: Option<f64>,
    l_g: Option<f64>,
    l_pre: f64,
    masked: usize,
    supervised: usize,
}

/// Records the pretraining loss of a batch. The temporal term is omitted
/// when nothing is masked and the graph term when no supervised entry is
/// nonzero.
fn pretrain_batch<T: Real>(
    g: &mut Graph<T>,
    batch: &[MaskedSample],
    model: &ModelConfig,
    cfg: &TrainConfig,
    recon_out: Option<&mut Vec<f64>>,
) -> Result<(crate::tensorcore::Var, BatchOut)> {
    let refs: Vec<&MaskedSample> = batch.iter().collect();
    let input = EncoderInput::<T>::from_samples(&refs)?;
    let (b, n, t, f) = (batch.len(), batch[0].panel.n, model.t, model.f);
    let out = pretrain_forward(g, &input, model)?;

    let original: Vec<f64> = batch.iter().flat_map(|s| s.original.iter().copied()).collect();
    let mask: Vec<bool> = batch.iter().flat_map(|s| s.panel.mask_positions.iter().copied()).collect();
    let masked = mask.iter().filter(|&&m| m).count();
    let lt = if masked > 0 {
        let x = Tensor::from_f64(&[b, n, t, f], &original)?;
        Some(loss_temporal_var(g, &x, out.reconstruction, &mask)?)
    } else {
        None
    };

    let weights: Vec<f64> = batch.iter().flat_map(|s| s.graph.base.weights.iter().copied()).collect();
    let kept: Vec<bool> = batch.iter().flat_map(|s| s.graph.mask_kept.iter().copied()).collect();
    let supervised = kept.iter().filter(|&&k| k).count();
    let has_target = weights.iter().zip(&kept).any(|(&w, &k)| k && w != 0.0);
    let lg = if has_target {
        let a = Tensor::from_f64(&[b, n, n], &weights)?;
        Some(loss_graph_var(g, &a, out.adjacency, &kept)?)
    } else {
        None
    };

    let loss = match (lt, lg) {
        (Some(lt), Some(lg)) => loss_pretrain_var(g, lt, lg, cfg.beta, cfg.include_temporal)?,
        (Some(lt), None) if cfg.include_temporal => lt,
        (_, Some(lg)) => g.scale(lg, cfg.beta),
        _ => return Err(Error::invalid("batch has neither masked steps nor supervised edges")),
    };
    if let Some(buf) = recon_out {
        *buf = g.value(out.reconstruction).to_f64_vec();
    }
    let val = |v: Option<crate::tensorcore::Var>| v.map(|v| g.value(v).item().as_f64());
    let report = BatchOut {
        l_t: val(lt),
        l_g: val(lg),
        l_pre: g.value(loss).item().as_f64(),
        masked,
        supervised,
    };
    Ok((loss, report))
}

/// Running, count-weighted averages of batch losses.
#[derive(Default)]
struct Accum {
    lt: (f64, usize),
    lg: (f64, usize),
    lpre: (f64, usize),
    masked: usize,
    supervised: usize,
}

impl Accum {
    fn add(&mut self, b: &BatchOut, cfg: &TrainConfig) {
        let f = b.masked.max(1);
        if let Some(v) = b.l_t {
            self.lt.0 += v * f as f64;
            self.lt.1 += f;
        }
        if let Some(v) = b.l_g {
            self.lg.0 += v * b.supervised as f64;
            self.lg.1 += b.supervised;
        }
        self.lpre.0 += b.l_pre;
        self.lpre.1 += 1;
        self.masked += b.masked;
        self.supervised += b.supervised;
        let _ = cfg;
    }

    fn report(&self, cfg: &TrainConfig) -> LossReport {
        let mean = |(s, c): (f64, usize)| if c > 0 { s / c as f64 } else { f64::NAN };
        let l_t = mean(self.lt);
        let l_g = mean(self.lg);
        let l_pre = match (l_t.is_nan(), l_g.is_nan()) {
            (false, false) => crate::losses::loss_pretrain(l_t, l_g, cfg.beta, cfg.include_temporal),
            _ => mean(self.lpre),
        };
        LossReport {
            l_t,
            l_g,
            l_pre,
            l_mse: f64::NAN,
            l_pearson: f64::NAN,
            l_fine: f64::NAN,
            masked_count: self.masked,
            supervised_edge_count: self.supervised,
        }
    }
}

const VAL_TAG: u64 = 0x7661_6c69_6461_7465;

/// Deterministic validation augmentations, fixed across epochs.
pub fn validation_samples(val: &[WindowSample], graph: &CorrelationGraph, cfg: &TrainConfig) -> Result<Vec<MaskedSample>> {
    let acfg = cfg.augment_config();
    val.iter()
        .enumerate()
        .map(|(i, w)| augment(w, graph, &acfg, mix_seed(cfg.seed ^ VAL_TAG, i as u64)))
        .collect()
}

/// Pooled masked MSE of the mean-imputation baseline over `samples`.
pub fn mean_imputation_mse(samples: &[MaskedSample]) -> f64 {
    let (mut sse, mut cnt) = (0.0, 0usize);
    for s in samples {
        let (e, c) = masked_sse(s, &mean_imputation(s));
        sse += e;
        cnt += c;
    }
    if cnt == 0 {
        f64::NAN
    } else {
        sse / cnt as f64
    }
}

/// Validation losses of `params` on fixed masked samples, pooled over
/// masked positions and supervised entries.
pub fn evaluate_pretrain<T: Real>(
    params: &ParamStore<T>,
    samples: &[MaskedSample],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let mut acc = Accum::default();
    for chunk in samples.chunks(cfg.batch_size) {
        let mut g = Graph::with_params(params);
        let (_, out) = pretrain_batch(&mut g, chunk, model, cfg, None)?;
        acc.add(&out, cfg);
    }
    Ok(acc.report(cfg))
}

fn check_windows(windows: &[WindowSample], graph: &CorrelationGraph, model: &ModelConfig, what: &str) -> Result<()> {
    for w in windows {
        if w.t != model.t || w.f != model.f {
            return Err(Error::Config(format!(
                "{what} window is T={} F={} but the model expects T={} F={}",
                w.t, w.f, model.t, model.f
            )));
        }
        if w.node_ids != graph.node_ids {
            return Err(Error::invalid(format!("{what} window and graph node sets differ")));
        }
    }
    Ok(())
}

/// Masked pretraining from a fresh initialisation seeded by `cfg.seed`.
/// Keeps the parameters with the lowest validation pretraining loss (or the
/// last epoch when `val` is empty).
pub fn pretrain<T: Real>(
    train: &[WindowSample],
    val: &[WindowSample],
    graph: &CorrelationGraph,
    cfg: &TrainConfig,
    model: &ModelConfig,
) -> Result<PretrainOutcome<T>> {
    cfg.validate()?;
    model.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("pretraining needs at least one training window"));
    }
    check_windows(train, graph, model, "training")?;
    check_windows(val, graph, model, "validation")?;
    if cfg.n_sub > graph.n_nodes() {
        return Err(Error::Config(format!("n_sub={} exceeds the {} nodes", cfg.n_sub, graph.n_nodes())));
    }

    let mut params = init_params::<T>(model, cfg.seed)?;
    let mut opt = OptimState::<T>::new(cfg.learning_rate);
    let acfg = cfg.augment_config();
    let val_samples = validation_samples(val, graph, cfg)?;
    let val_baseline = mean_imputation_mse(&val_samples);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, LossReport, ParamStore<T>)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x1_0000 + epoch as u64));
        order.shuffle(&mut rng);
        let epoch_seed = mix_seed(cfg.seed, 0x2_0000 + epoch as u64);
        let mut acc = Accum::default();
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch_seed = mix_seed(epoch_seed, bi as u64);
            let batch: Vec<MaskedSample> = idx
                .iter()
                .enumerate()
                .map(|(j, &w)| augment(&train[w], graph, &acfg, mix_seed(batch_seed, j as u64)))
                .collect::<Result<_>>()?;
            let mut out = None;
            let (loss, grads) = forward_backward(&params, &[], |g| {
                let (loss, o) = pretrain_batch(g, &batch, model, cfg, None)?;
                out = Some(o);
                Ok(loss)
            })?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("pretraining loss at epoch {epoch}, batch {bi} (batch seed {batch_seed})"),
                });
            }
            adam_step(&mut params, &grads, &mut opt)?;
            acc.add(&out.expect("set by the loss closure"), cfg);
        }
        log.rows.push(LogRow {
            epoch,
            split: "train",
            report: acc.report(cfg),
            ic: f64::NAN,
            baseline_l_t: f64::NAN,
        });

        let (score, report) = if val_samples.is_empty() {
            let r = acc.report(cfg);
            (r.l_pre, r)
        } else {
            let r = evaluate_pretrain(&params, &val_samples, model, cfg)?;
            log.rows.push(LogRow {
                epoch,
                split: "val",
                report: r.clone(),
                ic: f64::NAN,
                baseline_l_t: val_baseline,
            });
            (r.l_pre, r)
        };
        if !score.is_finite() {
            return Err(Error::NonFinite {
                context: format!("validation loss at epoch {epoch}"),
            });
        }
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, epoch, report, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }

    let (_, best_epoch, best_val, params) = best.ok_or_else(|| Error::invalid("no epochs were run"))?;
    Ok(PretrainOutcome {
        params,
        log,
        best_epoch,
        best_val,
        val_baseline_l_t: val_baseline,
        epochs_run,
    })
}

/// Checkpoint metadata for `model` plus any extra pairs.
pub fn checkpoint_meta(model: &ModelConfig, extra: &[(&str, String)]) -> Vec<(String, String)> {
    let mut meta = model.to_pairs();
    meta.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    meta
}

/// Loads a checkpoint written for `model`; any disagreement between its
/// recorded model configuration and `model` is a config error.
pub fn load_checkpoint<T: Real>(path: &Path, model: &ModelConfig) -> Result<checkpoint::Checkpoint<T>> {
    let ckpt = checkpoint::load::<T>(path)?;
    for (k, v) in model.to_pairs() {
        match ckpt.meta(&k) {
            Some(found) if found == v => {}
            Some(found) => {
                return Err(Error::Config(format!("checkpoint has {k}={found} but the run uses {v}")));
            }
            None => return Err(Error::Config(format!("checkpoint does not record {k}"))),
        }
    }
    model.check_params(&ckpt.params)?;
    Ok(ckpt)
}

/// Encoder output `[1, N, T, d]` for one unmasked window.
fn encode<T: Real>(params: &ParamStore<T>, sample: &MaskedSample, model: &ModelConfig) -> Result<Tensor<T>> {
    let input = EncoderInput::<T>::from_samples(&[sample])?;
    let mut g = Graph::with_params(params);
    let o = encoder_forward(&mut g, &input, model)?;
    Ok(g.value(o).clone())
}

fn stack<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

/// Fine-tune loss of `[B, N]` scores: per-date `λ·mse + pearson`, averaged
/// over dates. A date whose predictions are constant contributes its MSE
/// term only.
fn finetune_loss<T: Real>(g: &mut Graph<T>, y_hat: crate::tensorcore::Var, targets: &[&[f64]], lambda_m: f64) -> Result<crate::tensorcore::Var> {
    let n = g.shape(y_hat)[1];
    let mut terms = Vec::with_capacity(targets.len());
    for (b, y) in targets.iter().enumerate() {
        let row = g.narrow(y_hat, 0, b, 1)?;
        let row = g.reshape(row, &[n])?;
        let term = match loss_finetune_var(g, row, y, lambda_m) {
            Ok(v) => v,
            Err(Error::ZeroVariance("pearson prediction")) => {
                let yt = Tensor::from_f64(&[n], y)?;
                let mse = loss_mse_var(g, row, &yt)?;
                g.scale(mse, lambda_m)
            }
            Err(e) => return Err(e),
        };
        terms.push(term);
    }
    let all = g.concat(&terms, 0)?;
    Ok(g.mean(all))
}

fn has_spread(y: &[f64]) -> bool {
    y.iter().any(|&v| v != y[0])
}

/// Trains the prediction head on unmasked windows starting from `params`
/// (typically a pretrained checkpoint). The head is re-initialised from
/// `cfg.seed`. With `freeze_encoder` only `head.*` parameters change; the
/// encoder output is computed once per window. Keeps the parameters with
/// the best mean validation IC.
pub fn finetune<T: Real>(
    params: &ParamStore<T>,
    train: &[WindowSample],
    val: &[WindowSample],
    graph: &CorrelationGraph,
    cfg: &TrainConfig,
    model: &ModelConfig,
) -> Result<FinetuneOutcome<T>> {
    cfg.validate()?;
    model.validate()?;
    model.check_params(params)?;
    check_windows(train, graph, model, "training")?;
    check_windows(val, graph, model, "validation")?;
    let train: Vec<&WindowSample> = train.iter().filter(|w| has_spread(&w.target)).collect();
    if train.is_empty() {
        return Err(Error::invalid("fine-tuning needs at least one training window with non-constant targets"));
    }

    let mut params = params.clone();
    params.adopt_prefix(&init_params::<T>(model, mix_seed(cfg.seed, 0x4845_4144))?, HEAD_PREFIX);
    let mut opt = OptimState::<T>::new(cfg.learning_rate);
    let inputs: Vec<MaskedSample> = train.iter().map(|w| unmasked(w, graph)).collect::<Result<_>>()?;
    let encoded: Vec<Tensor<T>> = if cfg.freeze_encoder {
        inputs.iter().map(|s| encode(&params, s, model)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let frozen: Vec<&str> = if cfg.freeze_encoder {
        vec!["encoder.", "temporal_decoder.", "adjacency_decoder."]
    } else {
        vec![]
    };

    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x3_0000 + epoch as u64));
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let targets: Vec<&[f64]> = idx.iter().map(|&i| train[i].target.as_slice()).collect();
            let (loss, grads) = forward_backward(&params, &frozen, |g| {
                let y_hat = if cfg.freeze_encoder {
                    let parts: Vec<&Tensor<T>> = idx.iter().map(|&i| &encoded[i]).collect();
                    let o = g.constant(stack(&parts)?);
                    finetune_head(g, o, model)?
                } else {
                    let refs: Vec<&MaskedSample> = idx.iter().map(|&i| &inputs[i]).collect();
                    let input = EncoderInput::<T>::from_samples(&refs)?;
                    let o = encoder_forward(g, &input, model)?;
                    finetune_head(g, o, model)?
                };
                finetune_loss(g, y_hat, &targets, cfg.lambda_m)
            })?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("fine-tuning loss at epoch {epoch}, batch {bi}"),
                });
            }
            adam_step(&mut params, &grads, &mut opt)?;
            sum += loss;
            batches += 1;
        }
        log.rows.push(LogRow {
            epoch,
            split: "train",
            report: LossReport {
                l_t: f64::NAN,
                l_g: f64::NAN,
                l_pre: f64::NAN,
                l_mse: f64::NAN,
                l_pearson: f64::NAN,
                l_fine: sum / batches as f64,
                masked_count: 0,
                supervised_edge_count: 0,
            },
            ic: f64::NAN,
            baseline_l_t: f64::NAN,
        });

        let score = if val.is_empty() {
            -sum / batches as f64
        } else {
            let preds = predict(&params, val, graph, model)?;
            let ic = mean_ic(&preds, val).unwrap_or(f64::NAN);
            log.rows.push(LogRow {
                epoch,
                split: "val",
                report: LossReport {
                    l_t: f64::NAN,
                    l_g: f64::NAN,
                    l_pre: f64::NAN,
                    l_mse: f64::NAN,
                    l_pearson: -ic,
                    l_fine: f64::NAN,
                    masked_count: 0,
                    supervised_edge_count: 0,
                },
                ic,
                baseline_l_t: f64::NAN,
            });
            if ic.is_nan() {
                f64::NEG_INFINITY
            } else {
                ic
            }
        };
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, epoch, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }
    let (best_val_ic, best_epoch, params) = best.ok_or_else(|| Error::invalid("no epochs were run"))?;
    Ok(FinetuneOutcome {
        params,
        log,
        best_epoch,
        best_val_ic,
        epochs_run,
    })
}

/// Per-node scores for one window, in the window's node order.
pub fn predict_scores<T: Real>(params: &ParamStore<T>, window: &WindowSample, graph: &CorrelationGraph, model: &ModelConfig) -> Result<Vec<f64>> {
    if window.t != model.t || window.f != model.f {
        return Err(Error::Config(format!(
            "window is T={} F={} but the model expects T={} F={}",
            window.t, window.f, model.t, model.f
        )));
    }
    let sample = unmasked(window, graph)?;
    let input = EncoderInput::<T>::from_samples(&[&sample])?;
    let mut g = Graph::with_params(params);
    let o = encoder_forward(&mut g, &input, model)?;
    let y = finetune_head(&mut g, o, model)?;
    Ok(g.value(y).to_f64_vec())
}

/// Scores for every window, keyed by the window's target date.
pub fn predict<T: Real>(params: &ParamStore<T>, windows: &[WindowSample], graph: &CorrelationGraph, model: &ModelConfig) -> Result<Predictions> {
    let mut out = Predictions::default();
    for w in windows {
        let scores = predict_scores(params, w, graph, model)?;
        for (id, s) in w.node_ids.iter().zip(scores) {
            out.push(w.target_date, id.clone(), s);
        }
    }
    Ok(out)
}

/// Realized targets of the windows as a returns table.
pub fn window_returns(windows: &[WindowSample]) -> Returns {
    let mut r = Returns::default();
    for w in windows {
        for (id, &y) in w.node_ids.iter().zip(&w.target) {
            r.values.insert((w.target_date, id.clone()), y);
        }
    }
    r
}

/// Mean per-date Pearson IC of `preds` against the windows' targets.
pub fn mean_ic(preds: &Predictions, windows: &[WindowSample]) -> Option<f64> {
    ic_series(preds, &window_returns(windows), IcKind::Pearson).mean()
}

/// The persistence forecast: each node's score is its target realized on
/// the window's last date.
pub fn persistence_predictions(panel: &TimePanel, windows: &[WindowSample]) -> Result<Predictions> {
    let mut out = Predictions::default();
    for w in windows {
        if w.node_ids != panel.node_ids || w.end_index >= panel.n_dates() {
            return Err(Error::invalid("window does not come from this panel"));
        }
        for (i, id) in w.node_ids.iter().enumerate() {
            out.push(w.target_date, id.clone(), panel.target(i, w.end_index));
        }
    }
    Ok(out)
}

/// Finite-difference reports for the two training objectives.
#[derive(Clone, Debug)]
pub struct ModelGradCheck {
    /// Full pretraining loss (encoder and both decoders).
    pub pretrain: GradCheckReport,
    /// Fine-tune loss with every encoder and head parameter trainable.
    pub finetune: GradCheckReport,
}

impl ModelGradCheck {
    pub fn passed(&self) -> bool {
        self.pretrain.passed() && self.finetune.passed()
    }
}

/// Checks the pretraining and fine-tune gradients of `model` in double
/// precision on a random `n_nodes` problem: two masked windows for
/// pretraining and two unmasked windows for fine-tuning.
pub fn model_gradcheck(model: &ModelConfig, n_nodes: usize, seed: u64, eps: f64, tol: f64) -> Result<ModelGradCheck> {
    use rand::Rng;
    use rand_distr::StandardNormal;

    model.validate()?;
    if n_nodes < 2 {
        return Err(Error::invalid("gradient check needs at least two nodes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<String> = (0..n_nodes).map(|i| format!("n{i}")).collect();
    let mut weights = vec![0.0; n_nodes * n_nodes];
    for i in 0..n_nodes {
        for j in 0..n_nodes {
            if i != j && rng.random_bool(0.6) {
                weights[i * n_nodes + j] = rng.random_range(0.5..1.5);
            }
        }
    }
    weights[1] = 1.0;
    let graph = CorrelationGraph::new(ids.clone(), weights, true)?;
    let dates = crate::data::business_days(2);
    let windows: Vec<WindowSample> = (0..2)
        .map(|_| WindowSample {
            node_ids: ids.clone(),
            t: model.t,
            f: model.f,
            values: (0..n_nodes * model.t * model.f).map(|_| rng.sample(StandardNormal)).collect(),
            target: (0..n_nodes).map(|_| rng.sample(StandardNormal)).collect(),
            end_date: dates[0],
            target_date: dates[1],
            end_index: model.t - 1,
        })
        .collect();
    let params = init_params::<f64>(model, seed)?;
    let cfg = TrainConfig {
        r_t: 0.3,
        r_g: 0.3,
        ..Default::default()
    };
    let acfg = AugmentConfig {
        n_sub: 0,
        ..cfg.augment_config()
    };
    let masked: Vec<MaskedSample> = windows
        .iter()
        .enumerate()
        .map(|(i, w)| augment(w, &graph, &acfg, mix_seed(seed, i as u64)))
        .collect::<Result<_>>()?;
    let pretrain = grad_check(|g| Ok(pretrain_batch(g, &masked, model, &cfg, None)?.0), &params, eps, tol)?;

    let full: Vec<MaskedSample> = windows.iter().map(|w| unmasked(w, &graph)).collect::<Result<_>>()?;
    let targets: Vec<&[f64]> = windows.iter().map(|w| w.target.as_slice()).collect();
    let finetune = grad_check(
        |g| {
            let refs: Vec<&MaskedSample> = full.iter().collect();
            let input = EncoderInput::<f64>::from_samples(&refs)?;
            let o = encoder_forward(g, &input, model)?;
            let y = finetune_head(g, o, model)?;
            finetune_loss(g, y, &targets, cfg.lambda_m)
        },
        &params,
        eps,
        tol,
    )?;
    Ok(ModelGradCheck { pretrain, finetune })
}

/// The small model used by `gradcheck --size tiny`: 4 nodes, T=8, F=3.
pub fn tiny_gradcheck_model() -> ModelConfig {
    ModelConfig {
        f: 3,
        t: 8,
        d_model: 8,
        gat_heads: 2,
        gat_dim: 4,
        tgm_blocks: 2,
        tgm_heads: 2,
        ffn_dim: 16,
        sigma_h: 2.0,
        d_a: 4,
        head_hidden: 8,
        ..Default::default()
    }
}
