use std::io::Write;

use rand::seq::SliceRandom;
use serde::Serialize;

use super::metrics::{accuracy, auc, neighbor_disagreement, qwk, MetricsReport};
use super::optim::{adamw_step, AdamWState, LrSchedule, TrainConfig};
use super::{backward, GradientSet};
use crate::bagio::{subsample_bag, DatasetManifest, PatchBag, Split};
use crate::error::{Error, Result};
use crate::nnmodel::{init_params, roam_trace, Mode, ModelParams, RoamConfig, RoutingMode};
use crate::rng::{derive_seed, stream};
use crate::scalar::log_sum_exp;

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_SUBSAMPLE: u64 = 3;
const TAG_DROPOUT: u64 = 4;

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub routing_mode: RoutingMode,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_auc: Option<f64>,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    pub mean_grad_norm: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Config with `d_in` resolved from the data.
    pub config: RoamConfig,
    /// Parameters of the best validation epoch.
    pub best: ModelParams<f64>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        self.best.encode_checkpoint()
    }

    pub fn write_history_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for rec in &self.history {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn label_of(bag: &PatchBag<f64>, cfg: &RoamConfig) -> Result<usize> {
    let label = bag.label as usize;
    if label >= cfg.n_classes {
        return Err(Error::invalid(format!(
            "slide {} has label {label} but the model has {} classes",
            bag.slide_id, cfg.n_classes
        )));
    }
    Ok(label)
}

/// Resolves `d_in` from the first bag and checks the rest agree.
fn resolve_config(cfg: &RoamConfig, bags: &[&PatchBag<f64>]) -> Result<RoamConfig> {
    let mut cfg = cfg.clone();
    let first = bags
        .first()
        .ok_or_else(|| Error::invalid("no slides"))?
        .d_in();
    let d_in = *cfg.d_in.get_or_insert(first);
    if let Some(bad) = bags.iter().find(|b| b.d_in() != d_in) {
        return Err(Error::DimensionMismatch(format!(
            "slide {} has d_in {}, expected {d_in}",
            bad.slide_id,
            bad.d_in()
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Trains on the manifest's train split, selecting by validation loss.
pub fn train(
    manifest: &DatasetManifest,
    cfg: &RoamConfig,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let train = manifest.load_split::<f64>(Split::Train)?;
    let val = manifest.load_split::<f64>(Split::Val)?;
    train_on(&train, &val, cfg, tcfg)
}

/// Per-slide AdamW with warmup and cosine decay, training-time
/// subsampling, full-bag validation each epoch and early stopping on
/// validation loss.
pub fn train_on(
    train: &[PatchBag<f64>],
    val: &[PatchBag<f64>],
    cfg: &RoamConfig,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::invalid("train split is empty"));
    }
    if val.is_empty() {
        return Err(Error::invalid("val split is empty"));
    }
    tcfg.validate()?;
    let all: Vec<&PatchBag<f64>> = train.iter().chain(val).collect();
    let cfg = resolve_config(cfg, &all)?;
    for bag in &all {
        label_of(bag, &cfg)?;
    }

    let seed = tcfg.seed;
    let mut params = init_params::<f64>(&cfg, derive_seed(seed, &[TAG_INIT]))?;
    let mut state = AdamWState::new(&params);
    let steps_per_epoch = train.len().div_ceil(tcfg.batch);
    let schedule = LrSchedule {
        base: tcfg.lr,
        warmup_steps: tcfg.warmup_epochs * steps_per_epoch,
        total_steps: tcfg.max_epochs * steps_per_epoch,
    };

    let mut best = (f64::INFINITY, params.clone(), 0);
    let mut stale = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=tcfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(derive_seed(seed, &[TAG_SHUFFLE, epoch as u64])));
        let (mut loss_sum, mut norm_sum, mut lr) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(tcfg.batch) {
            let mut acc = GradientSet::zeros_like(&params);
            for &i in chunk {
                let tags = [epoch as u64, i as u64];
                let bag = subsample_bag(
                    &train[i],
                    tcfg.subsample_max,
                    derive_seed(seed, &[TAG_SUBSAMPLE, tags[0], tags[1]]),
                )?;
                let mode = Mode::Train {
                    seed: derive_seed(seed, &[TAG_DROPOUT, tags[0], tags[1]]),
                };
                let mut trace = roam_trace(&bag, &params, &cfg, mode)?;
                let (loss, grads) = backward(&mut trace, &params, label_of(&bag, &cfg)?)?;
                loss_sum += loss;
                acc.add_assign(&grads);
            }
            acc.scale(1.0 / chunk.len() as f64);
            let (step_lr, norm) = adamw_step(&mut params, &mut acc, &mut state, tcfg, &schedule);
            lr = step_lr;
            norm_sum += norm;
        }
        if !params.is_finite() {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
        }
        let report = evaluate(val, &params, &cfg, "val")?;
        let improved = report.loss < best.0;
        if improved {
            best = (report.loss, params.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
        }
        let rec = EpochRecord {
            epoch,
            routing_mode: cfg.routing_mode(),
            train_loss: loss_sum / train.len() as f64,
            val_loss: report.loss,
            val_accuracy: report.accuracy,
            val_auc: report.auc,
            lr,
            mean_grad_norm: norm_sum / steps_per_epoch as f64,
            improved,
        };
        log::info!(
            "epoch {epoch}: train {:.4} val {:.4} auc {:?} lr {:.2e}",
            rec.train_loss,
            rec.val_loss,
            rec.val_auc,
            rec.lr
        );
        history.push(rec);
        if !improved && stale >= tcfg.patience {
            break;
        }
    }
    let (_, best_params, best_epoch) = best;
    Ok(TrainOutcome {
        config: cfg,
        best: best_params,
        best_epoch,
        history,
    })
}

/// Full-bag, eval-mode metrics over a set of slides.
pub fn evaluate(
    bags: &[PatchBag<f64>],
    params: &ModelParams<f64>,
    cfg: &RoamConfig,
    split: &str,
) -> Result<MetricsReport> {
    if bags.is_empty() {
        return Err(Error::invalid(format!("split {split} is empty")));
    }
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(bags.len());
    let mut labels = Vec::with_capacity(bags.len());
    let mut scores = Vec::with_capacity(bags.len());
    let mut mean_load = vec![0.0; cfg.n_experts];
    let mut disagreement = 0.0;
    for bag in bags {
        let label = label_of(bag, cfg)?;
        let trace = roam_trace(bag, params, cfg, Mode::Eval)?;
        let logits = trace.logits();
        let lse = log_sum_exp(logits.iter().copied());
        loss += lse - logits[label];
        let mut pred = 0;
        for (c, &z) in logits.iter().enumerate() {
            if z > logits[pred] {
                pred = c;
            }
        }
        preds.push(pred);
        labels.push(label);
        scores.push(if logits.len() > 1 {
            (logits[1] - lse).exp()
        } else {
            1.0
        });
        for (acc, l) in mean_load.iter_mut().zip(&trace.diagnostics.loads) {
            *acc += l;
        }
        disagreement += neighbor_disagreement(&trace.dispatch, &trace.graph)?;
    }
    let n = bags.len() as f64;
    let mut notes = Vec::new();
    let auc = if cfg.n_classes == 2 {
        auc(&scores, &labels)
            .map_err(|e| notes.push(format!("auc: {e}")))
            .ok()
    } else {
        notes.push("auc: defined for binary tasks only".into());
        None
    };
    let qwk = qwk(&preds, &labels, cfg.n_classes)
        .map_err(|e| notes.push(format!("qwk: {e}")))
        .ok();
    Ok(MetricsReport {
        split: split.to_string(),
        n_slides: bags.len(),
        routing_mode: cfg.routing_mode(),
        loss: loss / n,
        accuracy: accuracy(&preds, &labels),
        auc,
        qwk,
        notes,
        mean_load: mean_load.into_iter().map(|l| l / n).collect(),
        neighbor_disagreement: disagreement / n,
    })
}
