//! The training loop: per mini-batch, an optional mixup pass, a task update
//! on the extractor and task head, and a domain update that trains the
//! discriminator while pushing reversed gradients into the extractor. Four
//! model variants gate which pieces are active.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{augment_subject, AugmentConfig};
use crate::layers::GrlConfig;
use crate::metrics::{evaluate_all, BinaryMask, MetricsError, MetricsReport};
use crate::mixup::{
    mix_batch, mixed_domain_loss, mixed_task_loss, unmixed_batch, DomainBatch, DomainLabelMode,
    MixedBatch, MixupConfig, MixupError, TaskLossKind,
};
use crate::models::{
    discriminate, extract_features, infer_mask_probs, init_params, task_head, DiscSpec,
    ModelBundle, Role,
};
use crate::rng::{derive_rng, derive_seed};
use crate::schedule::GammaSchedule;
use crate::synth::DomainDataset;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{variant} needs at least 2 source domains, got {got}")]
    NeedTwoSources { variant: String, got: usize },
    #[error("empty or undersized dataset: {0}")]
    BadData(String),
    #[error("non-finite {which} loss at epoch {epoch}, batch {batch}")]
    Numeric { which: &'static str, epoch: usize, batch: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mixup(#[from] MixupError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    DeepAll,
    Dann,
    Mixup,
    MixDann,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::DeepAll, Variant::Dann, Variant::Mixup, Variant::MixDann];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::DeepAll => "DeepAll",
            Variant::Dann => "DANN",
            Variant::Mixup => "Mixup",
            Variant::MixDann => "MixDANN",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "DeepAll" => Some(Variant::DeepAll),
            "DANN" => Some(Variant::Dann),
            "Mixup" => Some(Variant::Mixup),
            "MixDANN" => Some(Variant::MixDann),
            _ => None,
        }
    }

    /// Does this variant replace batch items with mixed counterparts?
    pub fn mixes(self) -> bool {
        matches!(self, Variant::Mixup | Variant::MixDann)
    }

    /// Does this variant train a domain discriminator?
    pub fn adversarial(self) -> bool {
        matches!(self, Variant::Dann | Variant::MixDann)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub base_channels: usize,
    pub in_channels: usize,
    pub mixup: MixupConfig,
    pub dann_xi: f64,
    pub dann_kappa: f64,
    pub dann_literal: bool,
    pub adam: AdamParams,
    pub augment: AugmentConfig,
    pub task_loss: TaskLossKind,
    pub domain_labels: DomainLabelMode,
    pub dice_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::MixDann,
            lr: 2e-4,
            epochs: 60,
            batch_size: 16,
            seed: 0,
            base_channels: 8,
            in_channels: 1,
            mixup: MixupConfig::default(),
            dann_xi: 0.1,
            dann_kappa: 3.0,
            dann_literal: false,
            adam: AdamParams::default(),
            augment: AugmentConfig::default(),
            task_loss: TaskLossKind::Dice,
            domain_labels: DomainLabelMode::Mixed,
            dice_eps: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task_loss: f64,
    pub domain_loss: f64,
    pub gamma: f64,
    pub val_dsc: f64,
    /// Discriminator accuracy on training batches; None for variants without
    /// a discriminator.
    pub domain_acc: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// CSV with columns epoch, task_loss, domain_loss, gamma, val_dsc,
    /// seconds. Wall time makes this file run-dependent; everything else is
    /// deterministic.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,task_loss,domain_loss,gamma,val_dsc,seconds\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{:.9},{:.3}\n",
                r.epoch, r.task_loss, r.domain_loss, r.gamma, r.val_dsc, r.seconds
            ));
        }
        out
    }
}

/// Adam over a fixed subset of the bundle's parameters, with its own moment
/// buffers and step counter.
struct Adam {
    lr: f64,
    p: AdamParams,
    t: usize,
    idxs: Vec<usize>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(lr: f64, p: AdamParams, idxs: Vec<usize>, bundle: &ModelBundle) -> Self {
        let m = idxs.iter().map(|&i| vec![0.0; bundle.params[i].tensor.numel()]).collect();
        let v = idxs.iter().map(|&i| vec![0.0; bundle.params[i].tensor.numel()]).collect();
        Adam { lr, p, t: 0, idxs, m, v }
    }

    fn step<'g>(&mut self, bundle: &mut ModelBundle, grad_of: impl Fn(usize) -> &'g [f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.p.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.p.beta2.powi(self.t as i32);
        for (slot, &pi) in self.idxs.iter().enumerate() {
            let g = grad_of(pi);
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let w = bundle.params[pi].tensor.data_mut();
            for i in 0..g.len() {
                m[i] = self.p.beta1 * m[i] + (1.0 - self.p.beta1) * g[i];
                v[i] = self.p.beta2 * v[i] + (1.0 - self.p.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= self.lr * mh / (vh.sqrt() + self.p.eps);
            }
        }
    }
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Train one variant on the given source domains. Deterministic given the
/// seed: every stochastic consumer draws from its own derived stream.
/// Returns the parameters of the best epoch by mean source-validation Dice
/// plus the per-epoch log.
pub fn train(cfg: &TrainConfig, sources: &[&DomainDataset]) -> Result<(ModelBundle, TrainLog), TrainError> {
    let k_src = sources.len();
    if k_src == 0 || sources.iter().any(|d| d.subjects.is_empty()) {
        return Err(TrainError::BadData("no source subjects".into()));
    }
    if cfg.variant.adversarial() && k_src < 2 {
        return Err(TrainError::NeedTwoSources { variant: cfg.variant.to_string(), got: k_src });
    }
    if cfg.batch_size < k_src {
        return Err(TrainError::BadData(format!(
            "batch size {} smaller than {} source domains",
            cfg.batch_size, k_src
        )));
    }

    let shape = sources[0].subjects[0].image.shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let per_dom = cfg.batch_size / k_src;

    // 80/20 split per domain; validation is only read for logging/selection
    let splits: Vec<usize> = sources
        .iter()
        .map(|d| (d.subjects.len() * 4 / 5).max(1).min(d.subjects.len()))
        .collect();
    let steps_per_epoch = splits.iter().map(|&n| n / per_dom).min().unwrap();
    if steps_per_epoch == 0 {
        return Err(TrainError::BadData(format!(
            "smallest domain has too few training subjects for {} per batch",
            per_dom
        )));
    }

    let disc_spec = cfg
        .variant
        .adversarial()
        .then_some(DiscSpec { num_domains: k_src, input_hw: (h / 4, w / 4) });
    let mut bundle = init_params(cfg.seed, cfg.in_channels, cfg.base_channels, disc_spec);

    let mut theta_sigma = bundle.indices_of(Role::Theta);
    theta_sigma.extend(bundle.indices_of(Role::Sigma));
    let mut task_adam = Adam::new(cfg.lr, cfg.adam, theta_sigma, &bundle);
    let mut domain_adam = cfg.variant.adversarial().then(|| {
        let mut theta_mu = bundle.indices_of(Role::Theta);
        theta_mu.extend(bundle.indices_of(Role::Mu));
        Adam::new(cfg.lr, cfg.adam, theta_mu, &bundle)
    });

    let sched = GammaSchedule {
        xi: cfg.dann_xi,
        kappa: cfg.dann_kappa,
        max_epoch: cfg.epochs,
        literal: cfg.dann_literal,
    };

    let mut shuffle_rng = derive_rng(cfg.seed, "shuffle");
    let mut augment_rng = derive_rng(cfg.seed, "augment");
    let mut mix_rng = derive_rng(cfg.seed, "mixup");

    let mut log = TrainLog::default();
    let mut best: Option<(f64, ModelBundle)> = None;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let gamma = if cfg.variant.adversarial() { sched.gamma_at(epoch) } else { 0.0 };

        let mut perms: Vec<Vec<usize>> = splits.iter().map(|&n| (0..n).collect()).collect();
        for perm in &mut perms {
            perm.shuffle(&mut shuffle_rng);
        }

        let mut task_loss_sum = 0.0;
        let mut domain_loss_sum = 0.0;
        let mut dom_correct = 0usize;
        let mut dom_total = 0usize;

        for step in 0..steps_per_epoch {
            let mut batch = DomainBatch { images: Vec::new(), masks: Vec::new(), domains: Vec::new() };
            for (d, src) in sources.iter().enumerate() {
                for &idx in &perms[d][step * per_dom..(step + 1) * per_dom] {
                    let s = &src.subjects[idx];
                    let (img, mask) = augment_subject(&s.image, &s.mask, &cfg.augment, &mut augment_rng);
                    batch.images.push(img);
                    batch.masks.push(mask);
                    batch.domains.push(d);
                }
            }
            let mb: MixedBatch = if cfg.variant.mixes() {
                mix_batch(&batch, &cfg.mixup, &mut mix_rng)?
            } else {
                unmixed_batch(&batch)
            };

            // Task update: extractor + task head descend on the task loss.
            {
                let mut tape = Tape::new();
                let ids = bundle.bind(&mut tape);
                let x = tape.leaf(&mb.images);
                let (features, skip1, skip2) = extract_features(&bundle, &mut tape, &ids, x)?;
                let mask = task_head(&bundle, &mut tape, &ids, features, skip1, skip2)?;
                let loss = mixed_task_loss(&mut tape, mask, &mb, cfg.task_loss, cfg.dice_eps)?;
                let loss_val = tape.value(loss);
                if !loss_val.is_finite() {
                    return Err(TrainError::Numeric { which: "task", epoch, batch: step });
                }
                task_loss_sum += loss_val;
                tape.backward(loss)?;
                task_adam.step(&mut bundle, |i| tape.grad(ids[i]));
            }

            // Domain update: discriminator descends on the domain loss, the
            // extractor ascends it through the reversal layer.
            if let Some(domain_adam) = domain_adam.as_mut() {
                let mut tape = Tape::new();
                let ids = bundle.bind(&mut tape);
                let x = tape.leaf(&mb.images);
                let (features, _, _) = extract_features(&bundle, &mut tape, &ids, x)?;
                let logits = discriminate(&bundle, &mut tape, &ids, features, &GrlConfig { gamma })?;
                let loss = mixed_domain_loss(&mut tape, logits, &mb, cfg.domain_labels)?;
                let loss_val = tape.value(loss);
                if !loss_val.is_finite() {
                    return Err(TrainError::Numeric { which: "domain", epoch, batch: step });
                }
                domain_loss_sum += loss_val;
                let k = k_src;
                for (row, chunk) in tape.data(logits).chunks(k).enumerate() {
                    let label = if mb.lambda[row] >= 0.5 { mb.dom_p[row] } else { mb.dom_q[row] };
                    if argmax_row(chunk) == label {
                        dom_correct += 1;
                    }
                    dom_total += 1;
                }
                tape.backward(loss)?;
                domain_adam.step(&mut bundle, |i| tape.grad(ids[i]));
            }
        }

        let val_dsc = validation_dice(&bundle, sources, &splits, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            task_loss: task_loss_sum / steps_per_epoch as f64,
            domain_loss: if cfg.variant.adversarial() {
                domain_loss_sum / steps_per_epoch as f64
            } else {
                0.0
            },
            gamma,
            val_dsc,
            domain_acc: (dom_total > 0).then(|| dom_correct as f64 / dom_total as f64),
            seconds: started.elapsed().as_secs_f64(),
        };
        log.epochs.push(record);

        let improved = match &best {
            None => true,
            Some((best_dsc, _)) => val_dsc.is_finite() && val_dsc > *best_dsc,
        };
        if improved {
            best = Some((val_dsc, bundle.clone()));
        }
    }

    let chosen = best.map(|(_, b)| b).unwrap_or(bundle);
    Ok((chosen, log))
}

/// Mean Dice over the per-domain validation splits, without augmentation.
fn validation_dice(
    bundle: &ModelBundle,
    sources: &[&DomainDataset],
    splits: &[usize],
    chunk: usize,
) -> Result<f64, TrainError> {
    let mut dices = Vec::new();
    for (d, src) in sources.iter().enumerate() {
        let val = &src.subjects[splits[d]..];
        for group in val.chunks(chunk.max(1)) {
            let images: Vec<&Tensor> = group.iter().map(|s| &s.image).collect();
            let preds = predict(bundle, &images)?;
            for (s, pred) in group.iter().zip(&preds) {
                let gt = BinaryMask::from_mask_tensor(&s.mask)?;
                dices.push(crate::metrics::dsc(&gt, pred)?);
            }
        }
    }
    if dices.is_empty() {
        return Ok(f64::NAN);
    }
    Ok(dices.iter().sum::<f64>() / dices.len() as f64)
}

/// Binary masks from a trained model: probabilities thresholded at a strict
/// 0.5.
pub fn predict(bundle: &ModelBundle, images: &[&Tensor]) -> Result<Vec<BinaryMask>, TensorError> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let item = images[0].shape().to_vec();
    let (h, w) = (item[1], item[2]);
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        data.extend_from_slice(img.data());
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(&item);
    let packed = Tensor::new(shape, data)?;
    let probs = infer_mask_probs(bundle, &packed)?;
    let per = h * w;
    Ok((0..images.len())
        .map(|i| BinaryMask::from_probabilities(&probs.data()[i * per..(i + 1) * per], h, w))
        .collect())
}

#[derive(Debug)]
pub struct TargetRun {
    pub target_domain: usize,
    pub target_name: String,
    pub seed: u64,
    pub report: MetricsReport,
    pub bundle: ModelBundle,
    pub log: TrainLog,
}

/// Hold each domain out in turn: train the configured variant on the rest,
/// evaluate all five metrics on the held-out target. Runs are independent
/// (per-target derived seeds) and may execute in parallel.
pub fn leave_one_out(cfg: &TrainConfig, domains: &[DomainDataset]) -> Result<Vec<TargetRun>, TrainError> {
    domains
        .par_iter()
        .map(|target| run_single_target(cfg, domains, target.domain_id))
        .collect()
}

/// One Sources -> Target experiment.
pub fn run_single_target(
    cfg: &TrainConfig,
    domains: &[DomainDataset],
    target_domain: usize,
) -> Result<TargetRun, TrainError> {
    let target = domains
        .iter()
        .find(|d| d.domain_id == target_domain)
        .ok_or_else(|| TrainError::BadData(format!("no domain with id {target_domain}")))?;
    let sources: Vec<&DomainDataset> =
        domains.iter().filter(|d| d.domain_id != target_domain).collect();
    let seed = derive_seed(cfg.seed, &format!("target/{}", target.spec.name));
    let run_cfg = TrainConfig { seed, ..cfg.clone() };
    let (bundle, log) = train(&run_cfg, &sources)?;

    let images: Vec<&Tensor> = target.subjects.iter().map(|s| &s.image).collect();
    let mut preds = Vec::with_capacity(images.len());
    for group in images.chunks(run_cfg.batch_size.max(1)) {
        preds.extend(predict(&bundle, group)?);
    }
    let gts: Vec<BinaryMask> = target
        .subjects
        .iter()
        .map(|s| BinaryMask::from_mask_tensor(&s.mask))
        .collect::<Result<_, _>>()?;
    let case_ids: Vec<usize> = target.subjects.iter().map(|s| s.case_id).collect();
    let report = evaluate_all(&case_ids, &gts, &preds)?;
    Ok(TargetRun {
        target_domain,
        target_name: target.spec.name.clone(),
        seed,
        report,
        bundle,
        log,
    })
}
