//! Training orchestration: AdamW, the step-decay LR schedule, Eq. 1
//! objective assembly with the DA stop-gradient rule, the three training
//! paradigms, and checkpointing.
//!
//! A MAT step runs two backward passes over one tape: the full pass for
//! `L_seg_u + beta * sum L_mkd`, and a barrier-blocked pass for
//! `alpha * sum L_seg_a` so that term contributes no gradient to any
//! domain-adapter parameter. The two gradient sets are summed before the
//! optimizer update, which makes the exclusion exact under Adam's coupled
//! moments.

use crate::autodiff::{BackwardMode, Var};
use crate::backbone::FeaturePyramid;
use crate::checkpoint::{Checkpoint, CheckpointRole};
use crate::config::{validate_pair, ModelConfig, Paradigm, TrainConfig};
use crate::data::{augment, balanced_batches, AugmentOptions, DomainBatch, DomainDataset, Sample};
use crate::error::{MdvitError, Result};
use crate::evaluator::mean_dice_on;
use crate::losses::{mkd_loss, seg_loss, total_loss, LossBundle, TotalLoss};
use crate::model::Mdvit;
use crate::nn::Forward;
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use ndarray::{ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::PathBuf;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Step-decay schedule: `base_lr * gamma^floor(epoch / lr_step)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * cfg.lr_gamma.powi((epoch / cfg.lr_step) as i32)
}

/// Adam with decoupled weight decay. Decay applies only to parameters
/// registered with `decay = true` (weights, not biases or norms).
pub struct AdamW<T: Scalar> {
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
    steps: usize,
    pub weight_decay: f64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamSet<T>, weight_decay: f64) -> Self {
        let m = params
            .iter()
            .map(|(_, p)| ArrayD::zeros(p.value.raw_dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamW {
            m,
            v,
            steps: 0,
            weight_decay,
        }
    }

    /// One update. `grad` maps a parameter to its cotangent; parameters
    /// without one are left untouched (moments included).
    pub fn step<'g>(
        &mut self,
        params: &mut ParamSet<T>,
        grad: impl Fn(ParamId) -> Option<&'g ArrayD<T>>,
        lr: f64,
    ) where
        T: 'g,
    {
        self.steps += 1;
        let bc1 = T::from_f64(1.0 - ADAM_BETA1.powi(self.steps as i32));
        let bc2 = T::from_f64(1.0 - ADAM_BETA2.powi(self.steps as i32));
        let b1 = T::from_f64(ADAM_BETA1);
        let b2 = T::from_f64(ADAM_BETA2);
        let eps = T::from_f64(ADAM_EPS);
        let lr_t = T::from_f64(lr);
        let wd = T::from_f64(self.weight_decay);
        for (id, p) in params.iter_mut() {
            let Some(g) = grad(id) else { continue };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (T::one() - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (T::one() - b2) * g * g);
            let decay = if p.decay { wd } else { T::zero() };
            ndarray::Zip::from(&mut p.value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p = *p - lr_t * (mhat / (vhat.sqrt() + eps) + decay * *p);
                });
        }
    }
}

/// One recorded Eq. 1 evaluation: the tape, the component scalar nodes, and
/// the assembled total.
pub struct Objective<T: Scalar> {
    pub forward: Forward<T>,
    pub l_seg_u: Var,
    pub l_seg_a: Vec<Option<Var>>,
    pub l_mkd: Vec<Option<Var>>,
    pub loss: TotalLoss,
}

fn slice_pyramid<T: Scalar>(
    f: &mut Forward<T>,
    pyramid: &FeaturePyramid,
    rows: &[usize],
) -> FeaturePyramid {
    let enc = pyramid
        .encoder_features
        .map(|(feat, sp)| (f.tape.select_batch(feat, rows), sp));
    let (ff, fsp) = pyramid.final_feature;
    FeaturePyramid {
        encoder_features: enc,
        final_feature: (f.tape.select_batch(ff, rows), fsp),
    }
}

/// Record Eq. 1 for one batch onto a fresh tape: the universal segmentation
/// loss always, plus per-domain peer segmentation and MKD terms when peers
/// are enabled. Domains absent from the batch contribute no term.
pub fn build_objective<T: Scalar>(
    model: &Mdvit<T>,
    batch: &DomainBatch<T>,
) -> Result<Objective<T>> {
    build_objective_with(model, &model.params, batch)
}

/// Like [`build_objective`], but reading parameter values from `params`
/// instead of the model's own set. The set must share the model's
/// registration order; this lets finite-difference checks re-evaluate the
/// objective at perturbed parameter settings.
pub fn build_objective_with<T: Scalar>(
    model: &Mdvit<T>,
    params: &ParamSet<T>,
    batch: &DomainBatch<T>,
) -> Result<Objective<T>> {
    let cfg = &model.config;
    let mut f = Forward::new(params);
    let images = f.input(batch.images.clone());
    let domain = if cfg.da_enabled {
        Some(f.input(batch.one_hot(cfg.num_domains)))
    } else {
        None
    };
    let (logits, pyramid) = model.backbone.forward(&mut f, images, domain)?;
    let l_seg_u = seg_loss(&mut f.tape, logits, &batch.masks)?;

    let (l_seg_a, l_mkd) = if cfg.mkd_enabled {
        let u_probs = f.tape.sigmoid(logits);
        let mut seg_terms = Vec::with_capacity(cfg.num_domains);
        let mut mkd_terms = Vec::with_capacity(cfg.num_domains);
        for m in 0..cfg.num_domains {
            let rows = batch.domain_rows(m);
            if rows.is_empty() {
                seg_terms.push(None);
                mkd_terms.push(None);
                continue;
            }
            let sliced = slice_pyramid(&mut f, &pyramid, &rows);
            let peer_logits = model.peers[m].forward(&mut f, &sliced);
            let masks_m = batch.masks.select(Axis(0), &rows);
            let seg = seg_loss(&mut f.tape, peer_logits, &masks_m)?;
            let u_m = f.tape.select_batch(u_probs, &rows);
            let peer_probs = f.tape.sigmoid(peer_logits);
            let mkd = mkd_loss(&mut f.tape, u_m, peer_probs)?;
            seg_terms.push(Some(seg));
            mkd_terms.push(Some(mkd));
        }
        (seg_terms, mkd_terms)
    } else {
        (Vec::new(), Vec::new())
    };

    let loss = total_loss(&mut f.tape, l_seg_u, &l_seg_a, &l_mkd, cfg.alpha, cfg.beta);
    Ok(Objective {
        forward: f,
        l_seg_u,
        l_seg_a,
        l_mkd,
        loss,
    })
}

fn check_balanced<T: Scalar>(batch: &DomainBatch<T>, num_domains: usize) -> Result<()> {
    if !batch.len().is_multiple_of(num_domains) {
        return Err(MdvitError::contract(format!(
            "MAT batch of {} is not divisible across {num_domains} domains",
            batch.len()
        )));
    }
    let per = batch.len() / num_domains;
    for d in 0..num_domains {
        let got = batch.domain_rows(d).len();
        if got != per {
            return Err(MdvitError::contract(format!(
                "MAT batch unbalanced: domain {d} has {got} samples, expected {per}"
            )));
        }
    }
    Ok(())
}

/// One MAT optimization step: two backward passes (full for the main term,
/// barrier-blocked for the peer segmentation term), summed, then AdamW.
pub fn mat_step<T: Scalar>(
    model: &mut Mdvit<T>,
    opt: &mut AdamW<T>,
    batch: &DomainBatch<T>,
    lr: f64,
) -> Result<LossBundle> {
    check_balanced(batch, model.config.num_domains)?;
    let obj = build_objective(model, batch)?;
    let mut grads = obj
        .forward
        .tape
        .backward(obj.loss.main_term, BackwardMode::Full);
    let peer_grads = obj
        .forward
        .tape
        .backward(obj.loss.peer_seg_term, BackwardMode::BlockBarriers);
    grads.accumulate(peer_grads);
    let fwd = &obj.forward;
    opt.step(&mut model.params, |id| fwd.grad(&grads, id), lr);
    Ok(obj.loss.bundle.clone())
}

/// One plain (ST/JT) step: single full backward of the total.
pub fn plain_step<T: Scalar>(
    model: &mut Mdvit<T>,
    opt: &mut AdamW<T>,
    batch: &DomainBatch<T>,
    lr: f64,
) -> Result<LossBundle> {
    let obj = build_objective(model, batch)?;
    let grads = obj
        .forward
        .tape
        .backward(obj.loss.total, BackwardMode::Full);
    let fwd = &obj.forward;
    opt.step(&mut model.params, |id| fwd.grad(&grads, id), lr);
    Ok(obj.loss.bundle.clone())
}

/// Dispatch on whether the model carries peers.
pub fn train_step<T: Scalar>(
    model: &mut Mdvit<T>,
    opt: &mut AdamW<T>,
    batch: &DomainBatch<T>,
    lr: f64,
) -> Result<LossBundle> {
    if model.config.mkd_enabled {
        mat_step(model, opt, batch, lr)
    } else {
        plain_step(model, opt, batch, lr)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Cross-validation fold held out as test data; `None` trains on all.
    pub fold: Option<usize>,
    /// Where checkpoints and JSONL logs go; `None` writes nothing.
    pub out_dir: Option<PathBuf>,
    /// Hard cap on optimizer steps per run; `None` runs every epoch.
    pub max_steps: Option<usize>,
    /// Fraction of the train split held out per domain for best-snapshot
    /// selection; 0 disables validation entirely.
    pub val_fraction: f64,
    /// Print one progress line per epoch.
    pub verbose: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            fold: Some(0),
            out_dir: None,
            max_steps: None,
            val_fraction: 0.1,
            verbose: true,
        }
    }
}

/// Per-epoch record, also mirrored to the JSONL log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub l_seg_u: f64,
    /// Sum over domains of the peer segmentation losses (batch mean).
    pub l_seg_a: f64,
    /// Sum over domains of the distillation losses (batch mean).
    pub l_mkd: f64,
    pub total: f64,
    /// Per-domain validation Dice; empty when validation is off.
    pub val_dice: Vec<f64>,
}

/// Outcome of a single optimization run (one model).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub steps: usize,
    pub epochs: Vec<EpochLog>,
    pub best_val_dice: Option<f64>,
    pub best_epoch: Option<usize>,
    pub checkpoints: Vec<PathBuf>,
}

/// Everything `train` produced: ST yields one run per domain, JT/MAT one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub paradigm: Paradigm,
    pub runs: Vec<RunReport>,
}

pub struct TrainOutcome<T: Scalar> {
    /// Trained models, aligned with `report.runs`.
    pub models: Vec<Mdvit<T>>,
    pub report: TrainReport,
}

fn mix_seed(seed: u64, parts: [u64; 3]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in parts {
        h = (h ^ v).wrapping_mul(0xA24B_AED4_963E_E407);
        h ^= h >> 29;
    }
    h
}

/// Mean hard Dice of the model on the listed samples of each domain.
fn mean_domain_dice<T: Scalar>(
    model: &Mdvit<T>,
    datasets: &[&DomainDataset],
    lists: &[Vec<usize>],
) -> Result<Vec<f64>> {
    lists
        .iter()
        .enumerate()
        .map(|(d, list)| {
            if list.is_empty() {
                Ok(f64::NAN)
            } else {
                mean_dice_on(model, datasets[d], list)
            }
        })
        .collect()
}

/// Train one model on `datasets` and return it with its run report.
#[allow(clippy::too_many_arguments)]
fn run_one<T: Scalar>(
    label: &str,
    datasets: &[&DomainDataset],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<(Mdvit<T>, RunReport)> {
    let mut model: Mdvit<T> = Mdvit::new(model_cfg, train_cfg.seed);
    let mut opt = AdamW::new(&model.params, train_cfg.weight_decay);
    let aug_opts = AugmentOptions::from_config(train_cfg);

    // Train pool per domain, minus an optional validation holdout.
    let mut train_lists: Vec<Vec<usize>> = datasets
        .iter()
        .map(|ds| match opts.fold {
            Some(k) => ds.train_indices(k),
            None => (0..ds.len()).collect(),
        })
        .collect();
    let mut val_lists: Vec<Vec<usize>> = vec![Vec::new(); datasets.len()];
    if opts.val_fraction > 0.0 {
        for (d, list) in train_lists.iter_mut().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(train_cfg.seed, [d as u64, 0x5A, 0]));
            list.shuffle(&mut rng);
            let n_val = ((list.len() as f64 * opts.val_fraction).round() as usize)
                .min(list.len().saturating_sub(1));
            val_lists[d] = list.split_off(list.len() - n_val);
        }
    }
    for (d, list) in train_lists.iter().enumerate() {
        if list.is_empty() {
            return Err(MdvitError::data(format!(
                "domain '{}' has no training samples after the split",
                datasets[d].name
            )));
        }
    }

    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::fs::File::create(
                dir.join(format!("{label}_log.jsonl")),
            )?)
        }
        None => None,
    };

    let mut report = RunReport {
        label: label.to_string(),
        steps: 0,
        epochs: Vec::new(),
        best_val_dice: None,
        best_epoch: None,
        checkpoints: Vec::new(),
    };
    let mut done = false;
    for epoch in 0..train_cfg.epochs {
        let lr = lr_at(epoch, train_cfg);
        let batches = balanced_batches(&train_lists, train_cfg.batch_size, train_cfg.seed, epoch);
        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut batches_run = 0usize;
        for (bi, pairs) in batches.iter().enumerate() {
            let mut drawn: Vec<Sample> = Vec::with_capacity(pairs.len());
            for (slot, &(d, idx)) in pairs.iter().enumerate() {
                let s = &datasets[d].samples[idx];
                if train_cfg.augment {
                    let seed = mix_seed(train_cfg.seed, [epoch as u64, bi as u64, slot as u64 + 1]);
                    drawn.push(augment(s, &aug_opts, seed));
                } else {
                    drawn.push(s.clone());
                }
            }
            let refs: Vec<&Sample> = drawn.iter().collect();
            let batch = DomainBatch::<T>::from_samples(&refs);
            let bundle = train_step(&mut model, &mut opt, &batch, lr)?;
            sums.0 += bundle.l_seg_u;
            sums.1 += bundle.l_seg_a.iter().sum::<f64>();
            sums.2 += bundle.l_mkd.iter().sum::<f64>();
            sums.3 += bundle.total;
            batches_run += 1;
            report.steps += 1;
            if opts.max_steps.is_some_and(|cap| report.steps >= cap) {
                done = true;
                break;
            }
        }

        let n = batches_run.max(1) as f64;
        let val_dice = if opts.val_fraction > 0.0 {
            mean_domain_dice(&model, datasets, &val_lists)?
        } else {
            Vec::new()
        };
        let entry = EpochLog {
            epoch,
            lr,
            l_seg_u: sums.0 / n,
            l_seg_a: sums.1 / n,
            l_mkd: sums.2 / n,
            total: sums.3 / n,
            val_dice: val_dice.clone(),
        };
        if opts.verbose {
            let val = if entry.val_dice.is_empty() {
                String::new()
            } else {
                let cells: Vec<String> = entry.val_dice.iter().map(|v| format!("{v:.3}")).collect();
                format!(" val [{}]", cells.join(" "))
            };
            println!(
                "[{label}] epoch {epoch:>4} lr {lr:.2e} seg_u {:.4} seg_a {:.4} mkd {:.4} total {:.4}{val}",
                entry.l_seg_u, entry.l_seg_a, entry.l_mkd, entry.total
            );
        }
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&entry)?)?;
        }

        let mean_val = if val_dice.is_empty() {
            None
        } else {
            let usable: Vec<f64> = val_dice.iter().copied().filter(|v| v.is_finite()).collect();
            (!usable.is_empty()).then(|| usable.iter().sum::<f64>() / usable.len() as f64)
        };
        if let Some(mv) = mean_val {
            if report.best_val_dice.is_none_or(|b| mv > b) {
                report.best_val_dice = Some(mv);
                report.best_epoch = Some(epoch);
                if let Some(dir) = &opts.out_dir {
                    let path = dir.join(format!("{label}_best.ckpt"));
                    Checkpoint::from_model(&model, CheckpointRole::Inference).save(&path)?;
                    if !report.checkpoints.contains(&path) {
                        report.checkpoints.push(path);
                    }
                }
            }
        }
        report.epochs.push(entry);
        if done {
            break;
        }
    }

    if let Some(dir) = &opts.out_dir {
        let path = dir.join(format!("{label}_final.ckpt"));
        Checkpoint::from_model(&model, CheckpointRole::Inference).save(&path)?;
        report.checkpoints.push(path);
        if model.config.mkd_enabled {
            let path = dir.join(format!("{label}_training.ckpt"));
            Checkpoint::from_model(&model, CheckpointRole::Training).save(&path)?;
            report.checkpoints.push(path);
        }
    }
    Ok((model, report))
}

/// Train under the configured paradigm.
///
/// ST builds one BASE model per domain, each on its own data; JT one BASE on
/// balanced mixed batches; MAT the universal network plus peers under Eq. 1.
pub fn train<T: Scalar>(
    datasets: &[DomainDataset],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome<T>> {
    validate_pair(model_cfg, train_cfg)?;
    if datasets.is_empty() {
        return Err(MdvitError::data("no datasets given"));
    }
    if train_cfg.paradigm != Paradigm::St && datasets.len() != model_cfg.num_domains {
        return Err(MdvitError::config(format!(
            "{} datasets but num_domains = {}",
            datasets.len(),
            model_cfg.num_domains
        )));
    }

    let mut models = Vec::new();
    let mut runs = Vec::new();
    match train_cfg.paradigm {
        Paradigm::St => {
            let mut base_cfg = model_cfg.clone();
            base_cfg.da_enabled = false;
            base_cfg.mkd_enabled = false;
            for (m, ds) in datasets.iter().enumerate() {
                let label = format!("st_domain{m}");
                let (model, run) = run_one::<T>(&label, &[ds], &base_cfg, train_cfg, opts)?;
                models.push(model);
                runs.push(run);
            }
        }
        Paradigm::Jt => {
            let mut base_cfg = model_cfg.clone();
            base_cfg.da_enabled = false;
            base_cfg.mkd_enabled = false;
            let refs: Vec<&DomainDataset> = datasets.iter().collect();
            let (model, run) = run_one::<T>("jt", &refs, &base_cfg, train_cfg, opts)?;
            models.push(model);
            runs.push(run);
        }
        Paradigm::Mat => {
            let refs: Vec<&DomainDataset> = datasets.iter().collect();
            let (model, run) = run_one::<T>("mat", &refs, model_cfg, train_cfg, opts)?;
            models.push(model);
            runs.push(run);
        }
    }
    Ok(TrainOutcome {
        models,
        report: TrainReport {
            paradigm: train_cfg.paradigm,
            runs,
        },
    })
}
