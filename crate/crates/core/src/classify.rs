//! Multi-label injury classification: positive-weight computation,
//! weighted BCE, the frozen-encoder linear probe, and accuracy/AUC
//! evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use voxdet_tensor::checkpoint;
use voxdet_tensor::optim::{Adam, AdamConfig, ParamGroup};
use voxdet_tensor::rng::{key, Rng};
use voxdet_tensor::{backward, no_grad, Tensor, TensorError};

use crate::augment::{classify_augment, ClassifyAugSpec};
use crate::manifest::{CATEGORY_NAMES, NUM_CATEGORIES};
use crate::networks::{global_avg_pool, ClassificationHead, NetworkError, UNet3d};
use crate::volume::Volume;

#[derive(Debug, thiserror::Error)]
pub enum ClassifyError {
    #[error("degenerate class: column {0:?} has no positive samples in the training split")]
    DegenerateClass(&'static str),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Per-class positive weights `w_i = N_i^neg / N_i^pos`.
pub fn pos_weights(
    labels: &[[u8; NUM_CATEGORIES]],
) -> Result<[f64; NUM_CATEGORIES], ClassifyError> {
    let mut weights = [0.0; NUM_CATEGORIES];
    for (i, w) in weights.iter_mut().enumerate() {
        let pos = labels.iter().filter(|row| row[i] == 1).count();
        if pos == 0 {
            return Err(ClassifyError::DegenerateClass(CATEGORY_NAMES[i]));
        }
        let neg = labels.len() - pos;
        *w = neg as f64 / pos as f64;
    }
    Ok(weights)
}

/// Weighted binary cross-entropy with logits, mean over batch and the 7
/// categories. Uses the softplus form, which is stable for large |z|:
/// `-w y log sigma(z) - (1-y) log(1-sigma(z))
///  = w y softplus(-z) + (1-y) softplus(z)`.
pub fn weighted_bce(
    logits: &Tensor,
    labels: &[[u8; NUM_CATEGORIES]],
    weights: &[f64; NUM_CATEGORIES],
) -> Result<Tensor, ClassifyError> {
    let b = labels.len();
    if logits.shape() != [b, NUM_CATEGORIES] {
        return Err(ClassifyError::Contract(format!(
            "logits {:?} do not match {b} x {NUM_CATEGORIES} labels",
            logits.shape()
        )));
    }
    let mut wy = Vec::with_capacity(b * NUM_CATEGORIES);
    let mut one_minus_y = Vec::with_capacity(b * NUM_CATEGORIES);
    for row in labels {
        for (i, &y) in row.iter().enumerate() {
            wy.push(weights[i] * y as f64);
            one_minus_y.push(1.0 - y as f64);
        }
    }
    let dtype = logits.dtype();
    let wy_t = Tensor::from_vec(wy, logits.shape(), dtype)?;
    let omy_t = Tensor::from_vec(one_minus_y, logits.shape(), dtype)?;
    let pos_term = logits.neg().softplus().mul(&wy_t)?;
    let neg_term = logits.softplus().mul(&omy_t)?;
    Ok(pos_term.add(&neg_term)?.mean())
}

/// Probe hyperparameters (AdamW, cosine decay, frozen encoder).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    pub encoder_frozen: bool,
    pub use_pos_weights: bool,
    pub augment: bool,
    pub aug: ClassifyAugSpec,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 3e-4,
            weight_decay: 5e-4,
            batch: 2,
            epochs: 50,
            head_hidden: 128,
            dropout: 0.5,
            encoder_frozen: true,
            use_pos_weights: true,
            augment: true,
            aug: ClassifyAugSpec::default(),
            seed: 0,
        }
    }
}

/// Cosine decay from `lr` to 0 across `epochs`.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let t = epoch as f64 / (total - 1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One labeled classification sample.
#[derive(Debug, Clone)]
pub struct ClassifySample {
    pub volume: Volume,
    pub labels: [u8; NUM_CATEGORIES],
}

#[derive(Debug, Clone)]
pub struct ProbeLogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mean_acc: f64,
    pub val_mean_auc: f64,
    pub per_category_acc: [f64; NUM_CATEGORIES],
    pub per_category_auc: [Option<f64>; NUM_CATEGORIES],
}

pub struct ProbeOutput {
    pub log: Vec<ProbeLogRow>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub head_checkpoint: PathBuf,
    pub pos_weights: [f64; NUM_CATEGORIES],
}

/// Train the classification head on frozen encoder features.
///
/// The encoder stays frozen for the whole run when `encoder_frozen` is
/// set (the linear-probe protocol); only the head parameters update.
/// Per-epoch validation accuracy/AUC is logged; the best-accuracy head is
/// kept. Positive weights come from the training split only.
pub fn train_probe(
    train: &[ClassifySample],
    val: &[ClassifySample],
    encoder: &UNet3d,
    cfg: &ProbeConfig,
    out_dir: &Path,
) -> Result<ProbeOutput, ClassifyError> {
    if train.is_empty() {
        return Err(ClassifyError::Config("training split is empty".into()));
    }
    if !cfg.encoder_frozen {
        return Err(ClassifyError::Config(
            "probe training requires the frozen-encoder flag".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    let dtype = encoder.dtype();
    let weights = if cfg.use_pos_weights {
        pos_weights(&train.iter().map(|s| s.labels).collect::<Vec<_>>())?
    } else {
        [1.0; NUM_CATEGORIES]
    };

    let mut rng = Rng::derived(cfg.seed, "probe-init", &[]);
    let head = ClassificationHead::new(
        encoder.cfg.bottleneck_channels,
        cfg.head_hidden,
        NUM_CATEGORIES,
        dtype,
        &mut rng,
    );
    let mut head_params = Vec::new();
    head.collect("head", &mut head_params);
    let mut opt = Adam::new(
        vec![ParamGroup {
            params: head_params.iter().map(|(_, t)| t.clone()).collect(),
            lr: cfg.lr,
        }],
        AdamConfig::adamw(cfg.weight_decay),
    );

    let features_of = |vol: &Volume| -> Result<Tensor, ClassifyError> {
        let grid = encoder.encoder_only(vol, true)?;
        let pooled = global_avg_pool(&grid)?;
        let c = pooled.numel();
        Ok(pooled.reshape(&[1, c])?.detach())
    };

    let eval = |head: &ClassificationHead| -> Result<Option<ClassificationReport>, ClassifyError> {
        if val.is_empty() {
            return Ok(None);
        }
        let mut scores = Vec::with_capacity(val.len());
        let mut labels = Vec::with_capacity(val.len());
        for s in val {
            let f = features_of(&s.volume)?;
            let logits = no_grad(|| head.forward(&f, false, 0))?;
            let row = logits.to_vec();
            let mut arr = [0.0; NUM_CATEGORIES];
            for (i, v) in row.iter().enumerate() {
                arr[i] = sigmoid(*v);
            }
            scores.push(arr);
            labels.push(s.labels);
        }
        Ok(Some(eval_classification(&scores, &labels, 0.5)?))
    };
    let row_of = |epoch: usize, train_loss: f64, report: &Option<ClassificationReport>| match report
    {
        Some(r) => ProbeLogRow {
            epoch,
            train_loss,
            val_mean_acc: r.mean_accuracy,
            val_mean_auc: r.mean_auc.unwrap_or(f64::NAN),
            per_category_acc: r.accuracy,
            per_category_auc: r.auc,
        },
        None => ProbeLogRow {
            epoch,
            train_loss,
            val_mean_acc: f64::NAN,
            val_mean_auc: f64::NAN,
            per_category_acc: [f64::NAN; NUM_CATEGORIES],
            per_category_auc: [None; NUM_CATEGORIES],
        },
    };

    // Epoch 0 evaluation before any head update, so transfer quality at
    // initialization is observable in the log.
    let report0 = eval(&head)?;
    let mut log = vec![row_of(0, f64::NAN, &report0)];
    let ckpt = out_dir.join("head.vxt");
    let mut best_acc = log[0].val_mean_acc;
    let mut best_epoch = 0usize;
    checkpoint::save(&ckpt, &head_params).map_err(|e| ClassifyError::Checkpoint(e.to_string()))?;

    for epoch in 1..=cfg.epochs {
        opt.set_lr(0, cosine_lr(cfg.lr, epoch - 1, cfg.epochs));
        let mut order: Vec<usize> = (0..train.len()).collect();
        Rng::derived(cfg.seed, "probe-order", &[epoch as u64]).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            opt.zero_grad();
            let mut feats = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &si in chunk {
                let sample = &train[si];
                let vol = if cfg.augment {
                    classify_augment(
                        &sample.volume,
                        &cfg.aug,
                        key(cfg.seed, "probe-aug", &[epoch as u64, si as u64]),
                    )
                } else {
                    sample.volume.clone()
                };
                feats.push(features_of(&vol)?);
                labels.push(sample.labels);
            }
            let refs: Vec<&Tensor> = feats.iter().collect();
            let batch_feats = voxdet_tensor::ops::concat(&refs, 0)?;
            let logits = head.forward(
                &batch_feats,
                true,
                key(cfg.seed, "probe-dropout", &[epoch as u64, steps as u64]),
            )?;
            let loss = weighted_bce(&logits, &labels, &weights)?;
            loss_sum += loss.item();
            backward(&loss)?;
            opt.step();
            steps += 1;
        }
        let report = eval(&head)?;
        let row = row_of(epoch, loss_sum / steps as f64, &report);
        let acc = row.val_mean_acc;
        log.push(row);
        if !acc.is_nan() && (best_acc.is_nan() || acc > best_acc) {
            best_acc = acc;
            best_epoch = epoch;
            checkpoint::save(&ckpt, &head_params)
                .map_err(|e| ClassifyError::Checkpoint(e.to_string()))?;
        }
    }

    Ok(ProbeOutput {
        log,
        best_epoch,
        best_val_acc: best_acc,
        head_checkpoint: ckpt,
        pos_weights: weights,
    })
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-category accuracy and AUC plus their means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: [f64; NUM_CATEGORIES],
    /// None where the split has a single class (AUC undefined).
    pub auc: [Option<f64>; NUM_CATEGORIES],
    pub mean_accuracy: f64,
    /// None when every category is single-class.
    pub mean_auc: Option<f64>,
    pub threshold: f64,
    pub samples: usize,
}

/// Evaluate per-category accuracy at `sigma(z) >= threshold` and AUC via
/// the rank statistic (ties counted half). Single-class categories report
/// AUC as undefined and are excluded from the AUC mean.
pub fn eval_classification(
    scores: &[[f64; NUM_CATEGORIES]],
    labels: &[[u8; NUM_CATEGORIES]],
    threshold: f64,
) -> Result<ClassificationReport, ClassifyError> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(ClassifyError::Contract(format!(
            "need matching nonempty scores/labels, got {} / {}",
            scores.len(),
            labels.len()
        )));
    }
    let n = scores.len();
    let mut accuracy = [0.0; NUM_CATEGORIES];
    let mut auc: [Option<f64>; NUM_CATEGORIES] = [None; NUM_CATEGORIES];
    for c in 0..NUM_CATEGORIES {
        let mut correct = 0usize;
        for i in 0..n {
            let pred = scores[i][c] >= threshold;
            if pred == (labels[i][c] == 1) {
                correct += 1;
            }
        }
        accuracy[c] = correct as f64 / n as f64;
        auc[c] = rank_auc(
            &scores.iter().map(|s| s[c]).collect::<Vec<_>>(),
            &labels.iter().map(|l| l[c]).collect::<Vec<_>>(),
        );
    }
    let mean_accuracy = accuracy.iter().sum::<f64>() / NUM_CATEGORIES as f64;
    let defined: Vec<f64> = auc.iter().flatten().copied().collect();
    let mean_auc = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok(ClassificationReport {
        accuracy,
        auc,
        mean_accuracy,
        mean_auc,
        threshold,
        samples: n,
    })
}

/// Mann-Whitney AUC from average ranks; None for single-class inputs.
fn rank_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Average ranks over ties (1-based).
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &ix in &order[i..=j] {
            ranks[ix] = avg;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = (0..scores.len())
        .filter(|&ix| labels[ix] == 1)
        .map(|ix| ranks[ix])
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Seeded stratified split by exact label pattern: each group splits
/// `train/val/test` by the given fractions.
pub fn stratified_split(
    labels: &[[u8; NUM_CATEGORIES]],
    fractions: [f64; 3],
    seed: u64,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<[u8; NUM_CATEGORIES], Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(*l).or_default().push(i);
    }
    let mut rng = Rng::derived(seed, "stratified-split", &[]);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (_, mut ixs) in groups {
        rng.shuffle(&mut ixs);
        let n = ixs.len();
        let n_train = (fractions[0] * n as f64).round() as usize;
        let n_val = (fractions[1] * n as f64).round() as usize;
        for (pos, ix) in ixs.into_iter().enumerate() {
            if pos < n_train {
                train.push(ix);
            } else if pos < n_train + n_val {
                val.push(ix);
            } else {
                test.push(ix);
            }
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    (train, val, test)
}
