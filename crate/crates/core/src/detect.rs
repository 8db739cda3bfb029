//! Two-phase semi-supervised detection training: supervised set-prediction
//! loss with optimal matching, an EMA teacher, weak/strong augmentation
//! consistency, and the freeze/warmup/ramp schedules that tie them
//! together.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use voxdet_tensor::checkpoint;
use voxdet_tensor::optim::{Adam, AdamConfig, ParamGroup};
use voxdet_tensor::rng::{key, Rng};
use voxdet_tensor::{backward, no_grad, DType, Tensor, TensorError};

use crate::augment::{apply_augmentation, AugSpec};
use crate::geometry::{
    hungarian_match, iou3d, map_at, BBox3D, CostMatrix, Detection, GroundTruth, MapReport,
    DEFAULT_IOU_THRESHOLDS,
};
use crate::manifest::NUM_CATEGORIES;
use crate::networks::{sample_tokens, NetworkError, UNet3d, UNetConfig};
use crate::rpe::{DecoderConfig, DetectionOutput, RpeDecoder};
use crate::rvol::RvolRecord;
use crate::volume::{extract_boxes, Connectivity, Volume};

#[derive(Debug, thiserror::Error)]
pub enum DetectError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Phase boundaries, learning rates, ramp and EMA decay for the
/// two-phase run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSchedule {
    pub total_epochs: usize,
    /// Phase I/II boundary: encoder frozen before, unfrozen after.
    pub phase_boundary: usize,
    pub encoder_warmup_epochs: usize,
    pub lr_decoder: f64,
    pub lr_encoder: f64,
    pub lambda_start_epoch: usize,
    pub lambda_end_epoch: usize,
    pub lambda_max: f64,
    pub ema_decay: f64,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        // Paper-shaped schedule; desk runs scale everything down.
        TrainingSchedule {
            total_epochs: 100,
            phase_boundary: 20,
            encoder_warmup_epochs: 3,
            lr_decoder: 1e-4,
            lr_encoder: 1e-5,
            lambda_start_epoch: 20,
            lambda_end_epoch: 60,
            lambda_max: 0.3,
            ema_decay: 0.999,
        }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<(), DetectError> {
        if !(self.phase_boundary <= self.lambda_start_epoch
            && self.lambda_start_epoch <= self.lambda_end_epoch
            && self.lambda_end_epoch <= self.total_epochs.max(self.lambda_end_epoch))
        {
            return Err(DetectError::Config(format!(
                "schedule must satisfy phase_boundary <= lambda_start <= lambda_end, got {self:?}"
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(DetectError::Config(format!(
                "ema decay must lie in [0,1], got {}",
                self.ema_decay
            )));
        }
        Ok(())
    }
}

/// Consistency weight: 0 before the ramp, linear to `lambda_max` between
/// start and end, flat after.
pub fn lambda_schedule(epoch: f64, sched: &TrainingSchedule) -> f64 {
    let (s, e) = (
        sched.lambda_start_epoch as f64,
        sched.lambda_end_epoch as f64,
    );
    if epoch <= s {
        0.0
    } else if epoch >= e {
        sched.lambda_max
    } else {
        sched.lambda_max * (epoch - s) / (e - s)
    }
}

/// Encoder learning rate: 0 during Phase I, a linear warmup over
/// `encoder_warmup_epochs` after the boundary, then `lr_encoder`.
pub fn encoder_lr(epoch: f64, sched: &TrainingSchedule) -> f64 {
    let b = sched.phase_boundary as f64;
    if epoch < b {
        return 0.0;
    }
    let w = sched.encoder_warmup_epochs as f64;
    if w == 0.0 {
        return sched.lr_encoder;
    }
    sched.lr_encoder * ((epoch - b) / w).clamp(0.0, 1.0)
}

/// Cost/loss weights for the matcher and loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MatchWeights {
    pub cls: f64,
    pub l1: f64,
    pub iou: f64,
    /// Relative CE weight of queries assigned to the no-object class
    /// (the usual set-prediction down-weighting against K >> objects).
    pub no_object: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights {
            cls: 1.0,
            l1: 2.0,
            iou: 2.0,
            no_object: 0.1,
        }
    }
}

/// A normalized-space training sample.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub volume: Volume,
    pub ground_truths: Vec<GroundTruth>,
}

impl LabeledSample {
    /// Build from a preprocessed record: ground truths come from the mask's
    /// connected components, converted to normalized center/size form.
    pub fn from_record(rec: &RvolRecord) -> Result<LabeledSample, DetectError> {
        let volume = rec
            .volume
            .clone()
            .mark_normalized()
            .map_err(|e| DetectError::Config(e.to_string()))?;
        let mask = rec
            .mask
            .as_ref()
            .ok_or_else(|| DetectError::Config("labeled sample needs a mask".into()))?;
        let dims = volume.dims();
        let ground_truths = extract_boxes(mask, Connectivity::TwentySix, 0)
            .into_iter()
            .map(|(b, label)| GroundTruth {
                bbox: hull_to_normalized(b.min, b.max, dims),
                category: (label - 1) as usize,
            })
            .collect();
        Ok(LabeledSample {
            volume,
            ground_truths,
        })
    }
}

/// Inclusive voxel hull to normalized center/size box.
pub fn hull_to_normalized(min: [usize; 3], max: [usize; 3], dims: [usize; 3]) -> BBox3D {
    let mut center = [0.0; 3];
    let mut size = [0.0; 3];
    for a in 0..3 {
        let lo = min[a] as f64;
        let hi = max[a] as f64 + 1.0;
        center[a] = (lo + hi) / 2.0 / dims[a] as f64;
        size[a] = (hi - lo) / dims[a] as f64;
    }
    BBox3D { center, size }
}

/// Student (or teacher) detection network: U-Net encoder + RPE decoder.
pub struct DetectionModel {
    pub unet: UNet3d,
    pub decoder: RpeDecoder,
    pub num_tokens: usize,
}

impl DetectionModel {
    pub fn new(
        unet_cfg: UNetConfig,
        dec_cfg: DecoderConfig,
        num_tokens: usize,
        dtype: DType,
        seed: u64,
    ) -> DetectionModel {
        let mut rng = Rng::derived(seed, "detect-init", &[]);
        let unet = UNet3d::new(unet_cfg, dtype, &mut rng);
        let decoder = RpeDecoder::new(dec_cfg, unet_cfg.bottleneck_channels, dtype, &mut rng);
        DetectionModel {
            unet,
            decoder,
            num_tokens,
        }
    }

    /// Forward pass; `encoder_grad` gates gradient recording through the
    /// encoder (frozen Phase I runs it under no_grad).
    pub fn forward(
        &self,
        vol: &Volume,
        token_key: u64,
        encoder_grad: bool,
    ) -> Result<Vec<DetectionOutput>, DetectError> {
        let grid = self.unet.encoder_only(vol, !encoder_grad)?;
        let tokens = sample_tokens(&grid, self.num_tokens, token_key)?;
        Ok(self.decoder.forward(&tokens)?)
    }

    /// Encoder parameters (the U-Net reconstruction path is not part of
    /// the detection graph).
    pub fn encoder_params(&self) -> Vec<(String, Tensor)> {
        self.unet.encoder_params()
    }

    pub fn decoder_params(&self) -> Vec<(String, Tensor)> {
        self.decoder.named_params()
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.encoder_params();
        out.extend(self.decoder_params());
        out
    }

    /// Load MIM-pretrained encoder weights (subset load by name).
    pub fn load_encoder(&self, ckpt: &Path) -> Result<(), DetectError> {
        checkpoint::load_into(ckpt, &self.encoder_params())
            .map_err(|e| DetectError::Checkpoint(e.to_string()))
    }

    pub fn load_all(&self, ckpt: &Path) -> Result<(), DetectError> {
        checkpoint::load_into(ckpt, &self.named_params())
            .map_err(|e| DetectError::Checkpoint(e.to_string()))
    }
}

/// Exponential moving average: `teacher = decay * teacher + (1 - decay) * student`.
/// Parameter name sets must match exactly.
pub fn ema_update(
    teacher: &[(String, Tensor)],
    student: &[(String, Tensor)],
    decay: f64,
) -> Result<(), DetectError> {
    let tn: BTreeSet<&str> = teacher.iter().map(|(n, _)| n.as_str()).collect();
    let sn: BTreeSet<&str> = student.iter().map(|(n, _)| n.as_str()).collect();
    if tn != sn {
        return Err(DetectError::Contract(format!(
            "teacher/student parameter names differ: {:?}",
            tn.symmetric_difference(&sn).collect::<Vec<_>>()
        )));
    }
    for ((_, t), (_, s)) in teacher.iter().zip(student) {
        let td = t.to_vec();
        let sd = s.to_vec();
        t.set_data(
            td.iter()
                .zip(&sd)
                .map(|(t, s)| decay * t + (1.0 - decay) * s)
                .collect(),
        );
    }
    Ok(())
}

/// DETR-style supervised loss over (optionally all) decoder layers.
pub fn supervised_detection_loss(
    outputs: &[DetectionOutput],
    gts: &[GroundTruth],
    weights: &MatchWeights,
    aux_loss: bool,
) -> Result<Tensor, DetectError> {
    let layers: &[DetectionOutput] = if aux_loss {
        outputs
    } else {
        &outputs[outputs.len() - 1..]
    };
    let mut total: Option<Tensor> = None;
    for out in layers {
        let layer_loss = single_layer_loss(out, gts, weights)?;
        total = Some(match total {
            Some(t) => t.add(&layer_loss)?,
            None => layer_loss,
        });
    }
    Ok(total.expect("at least one layer"))
}

fn single_layer_loss(
    out: &DetectionOutput,
    gts: &[GroundTruth],
    weights: &MatchWeights,
) -> Result<Tensor, DetectError> {
    let k = out.num_queries();
    let c1 = out.logits.shape()[1];
    let no_object = c1 - 1;

    // Matching runs on detached values.
    let pairs = if gts.is_empty() {
        Vec::new()
    } else {
        let probs = no_grad(|| out.logits.softmax(1)).map_err(DetectError::Tensor)?;
        let pv = probs.to_vec();
        let boxes = out.boxes();
        let mut cost = Vec::with_capacity(k * gts.len());
        for (q, bq) in boxes.iter().enumerate() {
            for gt in gts {
                let p_cat = pv[q * c1 + gt.category];
                let l1: f64 = (0..3)
                    .map(|a| {
                        (bq.center[a] - gt.bbox.center[a]).abs()
                            + (bq.size[a] - gt.bbox.size[a]).abs()
                    })
                    .sum();
                let iou = iou3d(bq, &gt.bbox);
                cost.push(
                    weights.cls * (1.0 - p_cat) + weights.l1 * l1 + weights.iou * (1.0 - iou),
                );
            }
        }
        hungarian_match(&CostMatrix::new(k, gts.len(), cost)?)
    };

    // Weighted cross-entropy over all queries; unmatched queries target
    // no-object at reduced weight, normalized by the weight sum.
    let mut targets = vec![no_object; k];
    for &(q, g) in &pairs {
        targets[q] = gts[g].category;
    }
    let mut onehot = vec![0.0; k * c1];
    let mut weight_sum = 0.0;
    for (q, &t) in targets.iter().enumerate() {
        let w = if t == no_object {
            weights.no_object
        } else {
            1.0
        };
        onehot[q * c1 + t] = w;
        weight_sum += w;
    }
    let onehot_t = Tensor::from_vec(onehot, &[k, c1], out.logits.dtype())?;
    let ce = out
        .logits
        .log_softmax(1)?
        .mul(&onehot_t)?
        .sum()
        .mul_scalar(-1.0 / weight_sum);

    if pairs.is_empty() {
        return Ok(ce);
    }

    // Box terms over matched pairs.
    let m = pairs.len();
    let q_idx: Vec<usize> = pairs.iter().map(|&(q, _)| q).collect();
    let mut gtc = Vec::with_capacity(m * 3);
    let mut gtsz = Vec::with_capacity(m * 3);
    for &(_, g) in &pairs {
        gtc.extend_from_slice(&gts[g].bbox.center);
        gtsz.extend_from_slice(&gts[g].bbox.size);
    }
    let dtype = out.centers.dtype();
    let gtc_t = Tensor::from_vec(gtc, &[m, 3], dtype)?;
    let gts_t = Tensor::from_vec(gtsz, &[m, 3], dtype)?;
    let c_sel = out.centers.select_rows(&q_idx)?;
    let s_sel = out.sizes.select_rows(&q_idx)?;

    let l1 = c_sel
        .sub(&gtc_t)?
        .abs()
        .sum()
        .add(&s_sel.sub(&gts_t)?.abs().sum())?
        .mul_scalar(1.0 / m as f64);
    let iou_loss = matched_iou_loss(&c_sel, &s_sel, &gtc_t, &gts_t)?;

    Ok(ce
        .add(&l1.mul_scalar(weights.l1))?
        .add(&iou_loss.mul_scalar(weights.iou))?)
}

/// Differentiable mean (1 - IoU) over matched prediction/target pairs.
/// The evaluation-side twin is `geometry::iou3d` on detached values.
fn matched_iou_loss(
    c_pred: &Tensor,
    s_pred: &Tensor,
    c_gt: &Tensor,
    s_gt: &Tensor,
) -> Result<Tensor, TensorError> {
    let half_p = s_pred.mul_scalar(0.5);
    let half_g = s_gt.mul_scalar(0.5);
    let min_p = c_pred.sub(&half_p)?;
    let max_p = c_pred.add(&half_p)?;
    let min_g = c_gt.sub(&half_g)?;
    let max_g = c_gt.add(&half_g)?;
    // max(a, b) = a + relu(b - a); min(a, b) = a - relu(a - b).
    let lo = min_p.add(&min_g.sub(&min_p)?.relu())?;
    let hi = max_p.sub(&max_p.sub(&max_g)?.relu())?;
    let overlap = hi.sub(&lo)?.relu(); // [M, 3]
    let col = |t: &Tensor, a: usize| t.slice(1, a, 1);
    let inter = col(&overlap, 0)?
        .mul(&col(&overlap, 1)?)?
        .mul(&col(&overlap, 2)?)?;
    let vol_p = col(s_pred, 0)?
        .mul(&col(s_pred, 1)?)?
        .mul(&col(s_pred, 2)?)?;
    let vol_g = col(s_gt, 0)?.mul(&col(s_gt, 1)?)?.mul(&col(s_gt, 2)?)?;
    let union = vol_p.add(&vol_g)?.sub(&inter)?;
    let iou = inter.div(&union)?;
    Ok(iou.neg().add_scalar(1.0).mean())
}

/// The three consistency terms of the unsupervised loss; teacher outputs
/// must be detached (they carry no gradient by construction).
pub fn consistency_losses(
    student: &DetectionOutput,
    teacher: &DetectionOutput,
    temperature: f64,
) -> Result<(Tensor, Tensor, Tensor), DetectError> {
    let k = student.num_queries();
    if k != teacher.num_queries() {
        return Err(DetectError::Contract(format!(
            "query counts differ: student {k}, teacher {}",
            teacher.num_queries()
        )));
    }
    let dc = student.centers.sub(&teacher.centers)?;
    let l_center = dc.mul(&dc)?.mean();
    let ds = student.sizes.sub(&teacher.sizes)?;
    let l_size = ds.mul(&ds)?.mean();

    // KL(softmax(z_T / T) || softmax(z_S / T)) * T^2, averaged over queries.
    let c1 = student.logits.shape()[1];
    let t_scaled = teacher.logits.mul_scalar(1.0 / temperature);
    let p_t = no_grad(|| t_scaled.softmax(1)).map_err(DetectError::Tensor)?;
    let log_p_t = no_grad(|| t_scaled.log_softmax(1)).map_err(DetectError::Tensor)?;
    let log_p_s = student
        .logits
        .mul_scalar(1.0 / temperature)
        .log_softmax(1)?;
    let p_t_const = Tensor::from_vec(p_t.to_vec(), &[k, c1], student.logits.dtype())?;
    let entropy = p_t_const.mul(&Tensor::from_vec(
        log_p_t.to_vec(),
        &[k, c1],
        student.logits.dtype(),
    )?)?;
    let cross = p_t_const.mul(&log_p_s)?;
    let l_cls = entropy
        .sum()
        .sub(&cross.sum())?
        .mul_scalar(temperature * temperature / k as f64);
    Ok((l_center, l_size, l_cls))
}

/// Turn the final decoder layer into scored detections: per query, the
/// best real class under the full softmax (no-object column excluded from
/// the argmax but kept in the normalization).
pub fn postprocess(out: &DetectionOutput) -> Result<Vec<Detection>, DetectError> {
    let probs = no_grad(|| out.logits.softmax(1)).map_err(DetectError::Tensor)?;
    let pv = probs.to_vec();
    let c1 = out.logits.shape()[1];
    let boxes = out.boxes();
    let mut dets = Vec::with_capacity(boxes.len());
    for (q, bbox) in boxes.into_iter().enumerate() {
        let row = &pv[q * c1..(q + 1) * c1];
        let (category, score) = row[..c1 - 1]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
            .expect("at least one class");
        dets.push(Detection {
            bbox,
            category,
            score: *score,
        });
    }
    Ok(dets)
}

/// Full training configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DetectTrainConfig {
    pub unet: UNetConfig,
    pub decoder: DecoderConfig,
    pub num_tokens: usize,
    pub schedule: TrainingSchedule,
    pub weak_aug: AugSpec,
    pub strong_aug: AugSpec,
    pub match_weights: MatchWeights,
    pub temperature: f64,
    pub aux_loss: bool,
    pub unlabeled_batch: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for DetectTrainConfig {
    fn default() -> Self {
        DetectTrainConfig {
            unet: UNetConfig::default(),
            decoder: DecoderConfig::default(),
            num_tokens: 128,
            schedule: TrainingSchedule::default(),
            weak_aug: AugSpec::weak(),
            strong_aug: AugSpec::strong(),
            match_weights: MatchWeights::default(),
            temperature: 2.0,
            aux_loss: true,
            unlabeled_batch: 2,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// One metric-log row.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectLogRow {
    pub epoch: usize,
    pub phase: usize,
    pub lambda: f64,
    pub encoder_lr: f64,
    pub train_loss: f64,
    pub l_sup: f64,
    pub l_cons: f64,
    /// Parallel to `DEFAULT_IOU_THRESHOLDS`.
    pub val_map: [f64; 4],
}

pub struct DetectRunOutput {
    pub log: Vec<DetectLogRow>,
    pub best_epoch: usize,
    pub best_map50: f64,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

/// Evaluate a model over samples; token sampling is keyed per volume
/// index only, so evaluation is comparable across epochs.
pub fn evaluate_detection(
    model: &DetectionModel,
    samples: &[LabeledSample],
    seed: u64,
) -> Result<MapReport, DetectError> {
    let mut dets = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    for (vi, s) in samples.iter().enumerate() {
        let outs = model.forward(&s.volume, key(seed, "eval-tokens", &[vi as u64]), false)?;
        dets.push(postprocess(outs.last().expect("decoder layers"))?);
        gts.push(s.ground_truths.clone());
        voxdet_tensor::clear_tape();
    }
    Ok(map_at(
        &dets,
        &gts,
        NUM_CATEGORIES,
        &DEFAULT_IOU_THRESHOLDS,
    )?)
}

/// The two-phase semi-supervised training loop.
///
/// Phase I (before `phase_boundary`) trains decoder + heads with the
/// encoder frozen; Phase II unfreezes the encoder under `encoder_lr` and,
/// once lambda is positive and unlabeled volumes exist, adds Mean-Teacher
/// consistency on weak/strong augmented pairs. The teacher is an EMA twin
/// updated after every optimizer step; validation and checkpoints use the
/// student.
pub fn train_detection(
    labeled: &[LabeledSample],
    unlabeled: &[Volume],
    val: &[LabeledSample],
    cfg: &DetectTrainConfig,
    dtype: DType,
    init_encoder: Option<&Path>,
    out_dir: &Path,
) -> Result<DetectRunOutput, DetectError> {
    if labeled.is_empty() {
        return Err(DetectError::Config("labeled set must be nonempty".into()));
    }
    cfg.schedule.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let student = DetectionModel::new(
        cfg.unet,
        cfg.decoder.clone(),
        cfg.num_tokens,
        dtype,
        cfg.seed,
    );
    if let Some(ckpt) = init_encoder {
        student.load_encoder(ckpt)?;
    }
    let teacher = DetectionModel::new(
        cfg.unet,
        cfg.decoder.clone(),
        cfg.num_tokens,
        dtype,
        cfg.seed,
    );
    // Teacher starts as an exact copy and never sees gradients.
    for ((_, t), (_, s)) in teacher.named_params().iter().zip(student.named_params()) {
        t.set_data(s.to_vec());
        t.set_requires_grad(false);
    }

    let mut opt = Adam::new(
        vec![
            ParamGroup {
                params: student
                    .decoder_params()
                    .into_iter()
                    .map(|(_, t)| t)
                    .collect(),
                lr: cfg.schedule.lr_decoder,
            },
            ParamGroup {
                params: student
                    .encoder_params()
                    .into_iter()
                    .map(|(_, t)| t)
                    .collect(),
                lr: 0.0,
            },
        ],
        AdamConfig::adamw(cfg.weight_decay),
    );

    let best_path = out_dir.join("best.vxt");
    let last_path = out_dir.join("last.vxt");
    let mut best_map50 = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut log = Vec::with_capacity(cfg.schedule.total_epochs);
    let mut unlabeled_cursor = 0usize;

    for epoch in 0..cfg.schedule.total_epochs {
        let lambda = lambda_schedule(epoch as f64, &cfg.schedule);
        let enc_lr = encoder_lr(epoch as f64, &cfg.schedule);
        opt.set_lr(1, enc_lr);
        let encoder_grad = enc_lr > 0.0;
        let use_unlabeled = lambda > 0.0 && !unlabeled.is_empty();

        let mut order: Vec<usize> = (0..labeled.len()).collect();
        Rng::derived(cfg.seed, "label-order", &[epoch as u64]).shuffle(&mut order);

        let mut sup_sum = 0.0;
        let mut cons_sum = 0.0;
        let mut total_sum = 0.0;
        for (step, &li) in order.iter().enumerate() {
            opt.zero_grad();
            let sample = &labeled[li];
            let outs = student.forward(
                &sample.volume,
                key(cfg.seed, "tokens", &[epoch as u64, li as u64]),
                encoder_grad,
            )?;
            let l_sup = supervised_detection_loss(
                &outs,
                &sample.ground_truths,
                &cfg.match_weights,
                cfg.aux_loss,
            )?;
            let mut l_total = l_sup.mul_scalar(1.0);
            let sup_v = l_sup.item();
            let mut cons_v = 0.0;

            if use_unlabeled {
                let mut cons_terms: Option<Tensor> = None;
                let batch = cfg.unlabeled_batch.min(unlabeled.len());
                for _ in 0..batch {
                    let ui = unlabeled_cursor % unlabeled.len();
                    unlabeled_cursor += 1;
                    let uvol = &unlabeled[ui];
                    let aug_ids = [epoch as u64, ui as u64, step as u64];
                    let weak = apply_augmentation(
                        uvol,
                        &cfg.weak_aug,
                        key(cfg.seed, "weak-aug", &aug_ids),
                    );
                    let strong = apply_augmentation(
                        uvol,
                        &cfg.strong_aug,
                        key(cfg.seed, "strong-aug", &aug_ids),
                    );
                    let tok_key = key(cfg.seed, "unlabeled-tokens", &aug_ids);
                    let teacher_out = {
                        let outs = no_grad(|| teacher.forward(&weak, tok_key, false));
                        outs?.pop().expect("decoder layers").detach()
                    };
                    let student_out = student
                        .forward(&strong, tok_key, encoder_grad)?
                        .pop()
                        .expect("decoder layers");
                    let (lc, ls, lcls) =
                        consistency_losses(&student_out, &teacher_out, cfg.temperature)?;
                    let term = lc.add(&ls)?.add(&lcls)?;
                    cons_terms = Some(match cons_terms {
                        Some(t) => t.add(&term)?,
                        None => term,
                    });
                }
                if let Some(terms) = cons_terms {
                    let batch_mean =
                        terms.mul_scalar(1.0 / cfg.unlabeled_batch.min(unlabeled.len()) as f64);
                    cons_v = batch_mean.item();
                    l_total = l_total.add(&batch_mean.mul_scalar(lambda))?;
                }
            }

            let total_v = l_total.item();
            if !total_v.is_finite() {
                return Err(DetectError::NonFinite { epoch });
            }
            backward(&l_total)?;
            opt.step();
            ema_update(
                &teacher.named_params(),
                &student.named_params(),
                cfg.schedule.ema_decay,
            )?;
            sup_sum += sup_v;
            cons_sum += cons_v;
            total_sum += total_v;
        }

        let steps = order.len() as f64;
        let val_report = if val.is_empty() {
            None
        } else {
            Some(evaluate_detection(&student, val, cfg.seed)?)
        };
        let val_map = match &val_report {
            Some(r) => [r.map[0], r.map[1], r.map[2], r.map[3]],
            None => [f64::NAN; 4],
        };
        log.push(DetectLogRow {
            epoch,
            phase: if epoch < cfg.schedule.phase_boundary {
                1
            } else {
                2
            },
            lambda,
            encoder_lr: enc_lr,
            train_loss: total_sum / steps,
            l_sup: sup_sum / steps,
            l_cons: cons_sum / steps,
            val_map,
        });

        checkpoint::save(&last_path, &student.named_params())
            .map_err(|e| DetectError::Checkpoint(e.to_string()))?;
        if let Some(r) = &val_report {
            let map50 = r.map[2];
            if map50 > best_map50 {
                best_map50 = map50;
                best_epoch = epoch;
                checkpoint::save(&best_path, &student.named_params())
                    .map_err(|e| DetectError::Checkpoint(e.to_string()))?;
            }
        }
    }
    if best_map50 == f64::NEG_INFINITY {
        // No validation set: the last checkpoint doubles as best.
        std::fs::copy(&last_path, &best_path)?;
        best_map50 = f64::NAN;
    }

    Ok(DetectRunOutput {
        log,
        best_epoch,
        best_map50,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use voxdet_tensor::clear_tape;

    #[test]
    fn lambda_anchor_values() {
        let s = TrainingSchedule::default();
        assert_eq!(lambda_schedule(0.0, &s), 0.0);
        assert_eq!(lambda_schedule(20.0, &s), 0.0);
        assert!((lambda_schedule(40.0, &s) - 0.15).abs() < 1e-15);
        assert_eq!(lambda_schedule(60.0, &s), 0.3);
        assert_eq!(lambda_schedule(80.0, &s), 0.3);
    }

    #[test]
    fn encoder_lr_anchor_values() {
        let s = TrainingSchedule::default();
        assert_eq!(encoder_lr(0.0, &s), 0.0);
        assert_eq!(encoder_lr(19.9, &s), 0.0);
        assert!((encoder_lr(21.5, &s) - 0.5e-5).abs() < 1e-18);
        assert_eq!(encoder_lr(23.0, &s), 1e-5);
        assert_eq!(encoder_lr(99.0, &s), 1e-5);
    }

    #[test]
    fn ema_anchor_values() {
        let mk = |v: f64| {
            vec![(
                "w".to_string(),
                Tensor::from_vec(vec![v], &[1], DType::F64).unwrap(),
            )]
        };
        let t = mk(1.0);
        let s = mk(0.0);
        ema_update(&t, &s, 1.0).unwrap();
        assert_eq!(t[0].1.to_vec(), vec![1.0]);
        ema_update(&t, &s, 0.9).unwrap();
        assert!((t[0].1.to_vec()[0] - 0.9).abs() < 1e-15);
        ema_update(&t, &s, 0.0).unwrap();
        assert_eq!(t[0].1.to_vec(), vec![0.0]);
        // Name mismatch is a contract error.
        let other = vec![(
            "v".to_string(),
            Tensor::from_vec(vec![0.0], &[1], DType::F64).unwrap(),
        )];
        assert!(matches!(
            ema_update(&t, &other, 0.5),
            Err(DetectError::Contract(_))
        ));
    }

    #[test]
    fn ema_closed_form_over_steps() {
        let decay = 0.8;
        let teacher = vec![(
            "w".to_string(),
            Tensor::from_vec(vec![2.0], &[1], DType::F64).unwrap(),
        )];
        let snapshots = [0.5, -1.0, 3.0, 0.0, 1.5];
        let mut expect = 2.0;
        for (n, &s) in snapshots.iter().enumerate() {
            let student = vec![(
                "w".to_string(),
                Tensor::from_vec(vec![s], &[1], DType::F64).unwrap(),
            )];
            ema_update(&teacher, &student, decay).unwrap();
            expect = decay * expect + (1.0 - decay) * s;
            let got = teacher[0].1.to_vec()[0];
            assert!((got - expect).abs() < 1e-12, "step {n}");
        }
    }

    fn make_output(k: usize, c: usize, seed: u64) -> DetectionOutput {
        let mut rng = Rng::new(seed);
        DetectionOutput {
            logits: Tensor::randn(&[k, c + 1], 1.0, DType::F64, &mut rng),
            centers: Tensor::rand_uniform(&[k, 3], 0.2, 0.8, DType::F64, &mut rng),
            sizes: Tensor::rand_uniform(&[k, 3], 0.1, 0.3, DType::F64, &mut rng),
        }
    }

    #[test]
    fn consistency_zero_when_student_equals_teacher() {
        let s = make_output(4, 7, 1);
        let t = DetectionOutput {
            logits: s.logits.detach(),
            centers: s.centers.detach(),
            sizes: s.sizes.detach(),
        };
        let (lc, ls, lcls) = consistency_losses(&s, &t, 2.0).unwrap();
        assert_eq!(lc.item(), 0.0);
        assert_eq!(ls.item(), 0.0);
        assert!(lcls.item().abs() < 1e-12);
        clear_tape();
    }

    #[test]
    fn consistency_center_delta_formula() {
        let k = 5;
        let s = make_output(k, 7, 2);
        let mut shifted = s.centers.to_vec();
        shifted[4] += 0.01; // one coordinate of one query
        let t = DetectionOutput {
            logits: s.logits.detach(),
            centers: Tensor::from_vec(shifted, &[k, 3], DType::F64).unwrap(),
            sizes: s.sizes.detach(),
        };
        let (lc, _, _) = consistency_losses(&s, &t, 2.0).unwrap();
        let expect = 0.01f64.powi(2) / (3.0 * k as f64);
        assert!((lc.item() - expect).abs() < 1e-15);
        clear_tape();
    }

    #[test]
    fn consistency_kl_hand_evaluated() {
        // Two classes: z_T = (1, 0), z_S = (0, 1), T = 2.
        let s = DetectionOutput {
            logits: Tensor::from_vec(vec![0.0, 1.0], &[1, 2], DType::F64).unwrap(),
            centers: Tensor::from_vec(vec![0.5; 3], &[1, 3], DType::F64).unwrap(),
            sizes: Tensor::from_vec(vec![0.2; 3], &[1, 3], DType::F64).unwrap(),
        };
        let t = DetectionOutput {
            logits: Tensor::from_vec(vec![1.0, 0.0], &[1, 2], DType::F64).unwrap(),
            centers: s.centers.detach(),
            sizes: s.sizes.detach(),
        };
        let (_, _, lcls) = consistency_losses(&s, &t, 2.0).unwrap();
        // Direct evaluation: p = softmax([.5, 0]), q = softmax([0, .5]).
        let e = 0.5f64.exp();
        let p = [e / (e + 1.0), 1.0 / (e + 1.0)];
        let q = [1.0 / (1.0 + e), e / (1.0 + e)];
        let kl: f64 = p[0] * (p[0] / q[0]).ln() + p[1] * (p[1] / q[1]).ln();
        let expect = kl * 4.0;
        assert!((lcls.item() - expect).abs() < 1e-12, "{}", lcls.item());
        clear_tape();
    }

    #[test]
    fn consistency_is_nonnegative_and_query_count_checked() {
        for seed in 0..20 {
            let s = make_output(3, 7, seed);
            let t = make_output(3, 7, seed + 100);
            let (_, _, lcls) = consistency_losses(
                &s,
                &DetectionOutput {
                    logits: t.logits.detach(),
                    centers: t.centers.detach(),
                    sizes: t.sizes.detach(),
                },
                2.0,
            )
            .unwrap();
            assert!(lcls.item() >= -1e-12, "KL negative: {}", lcls.item());
        }
        let s = make_output(3, 7, 1);
        let t = make_output(4, 7, 2);
        assert!(matches!(
            consistency_losses(&s, &t, 2.0),
            Err(DetectError::Contract(_))
        ));
        clear_tape();
    }

    #[test]
    fn teacher_receives_no_gradient() {
        let s = make_output(3, 7, 5);
        s.logits.set_requires_grad(true);
        s.centers.set_requires_grad(true);
        s.sizes.set_requires_grad(true);
        // Model the real setup: teacher outputs are produced from teacher
        // parameters under no_grad and then detached.
        let t_param = Tensor::full(&[3, 8], 0.3, DType::F64);
        t_param.set_requires_grad(true);
        let raw = make_output(3, 7, 6);
        let teacher = no_grad(|| DetectionOutput {
            logits: t_param.mul_scalar(2.0).detach(),
            centers: raw.centers.detach(),
            sizes: raw.sizes.detach(),
        });
        let (lc, ls, lcls) = consistency_losses(&s, &teacher, 2.0).unwrap();
        let total = lc.add(&ls).unwrap().add(&lcls).unwrap();
        backward(&total).unwrap();
        assert!(s.centers.grad().is_some());
        assert!(s.logits.grad().is_some());
        // The teacher parameter never sees a gradient.
        assert!(t_param.grad().is_none());
        clear_tape();
    }

    #[test]
    fn supervised_loss_perfect_predictions_near_zero_box_terms() {
        let gts = vec![
            GroundTruth {
                bbox: BBox3D {
                    center: [0.3, 0.3, 0.3],
                    size: [0.2, 0.2, 0.2],
                },
                category: 1,
            },
            GroundTruth {
                bbox: BBox3D {
                    center: [0.7, 0.7, 0.7],
                    size: [0.1, 0.1, 0.1],
                },
                category: 4,
            },
        ];
        // Queries 0/1 exactly on the GTs with confident logits.
        let mut logits = vec![-20.0; 2 * 8];
        logits[1] = 20.0;
        logits[8 + 4] = 20.0;
        let centers = vec![0.3, 0.3, 0.3, 0.7, 0.7, 0.7];
        let sizes = vec![0.2, 0.2, 0.2, 0.1, 0.1, 0.1];
        let out = DetectionOutput {
            logits: Tensor::from_vec(logits, &[2, 8], DType::F64).unwrap(),
            centers: Tensor::from_vec(centers, &[2, 3], DType::F64).unwrap(),
            sizes: Tensor::from_vec(sizes, &[2, 3], DType::F64).unwrap(),
        };
        let loss = supervised_detection_loss(&[out], &gts, &MatchWeights::default(), true).unwrap();
        assert!(loss.item() < 1e-8, "loss = {}", loss.item());
        clear_tape();
    }

    #[test]
    fn supervised_loss_no_gts_is_noobject_ce() {
        let out = make_output(4, 7, 9);
        let loss = supervised_detection_loss(&[out], &[], &MatchWeights::default(), true).unwrap();
        // Loss must be positive CE and finite.
        assert!(loss.item() > 0.0 && loss.item().is_finite());
        clear_tape();
    }

    #[test]
    fn supervised_loss_matches_hand_computation_two_by_two() {
        // Crafted so matching is unambiguous: query 0 -> gt 1, query 1 -> gt 0.
        let gts = vec![
            GroundTruth {
                bbox: BBox3D {
                    center: [0.8, 0.8, 0.8],
                    size: [0.2, 0.2, 0.2],
                },
                category: 0,
            },
            GroundTruth {
                bbox: BBox3D {
                    center: [0.2, 0.2, 0.2],
                    size: [0.2, 0.2, 0.2],
                },
                category: 1,
            },
        ];
        let centers = vec![0.2, 0.2, 0.2, 0.8, 0.8, 0.8];
        let sizes = vec![0.2, 0.2, 0.2, 0.2, 0.2, 0.2];
        // Uniform logits so CE is ln(C+1) per query regardless of target.
        let logits = vec![0.0; 2 * 3]; // 2 classes + no-object
        let out = DetectionOutput {
            logits: Tensor::from_vec(logits, &[2, 3], DType::F64).unwrap(),
            centers: Tensor::from_vec(centers.clone(), &[2, 3], DType::F64).unwrap(),
            sizes: Tensor::from_vec(sizes, &[2, 3], DType::F64).unwrap(),
        };
        let w = MatchWeights::default();
        let loss = supervised_detection_loss(&[out], &gts, &w, true).unwrap();
        // Hand arithmetic: boxes match exactly under the optimal pairing
        // (q0->g1, q1->g0): L1 = 0, IoU term = 0; CE = ln 3.
        let expect = (3.0f64).ln();
        assert!((loss.item() - expect).abs() < 1e-10, "{}", loss.item());

        // Brute-force over both assignments confirms the matcher's choice:
        // swapped pairing costs strictly more.
        let cost = |qc: [f64; 3], g: &GroundTruth| {
            let l1: f64 = (0..3)
                .map(|a| (qc[a] - g.bbox.center[a]).abs())
                .sum::<f64>();
            let pred = BBox3D {
                center: qc,
                size: [0.2; 3],
            };
            let unmatched_p = 1.0 - 1.0 / 3.0;
            unmatched_p + 2.0 * l1 + 2.0 * (1.0 - iou3d(&pred, &g.bbox))
        };
        let direct = cost([0.2; 3], &gts[1]) + cost([0.8; 3], &gts[0]);
        let swapped = cost([0.2; 3], &gts[0]) + cost([0.8; 3], &gts[1]);
        assert!(direct < swapped);
        clear_tape();
    }

    #[test]
    fn postprocess_takes_best_real_class() {
        // Query 0: class 2 dominates. Query 1: no-object dominates, but the
        // detection still reports the best real class with its own prob.
        let logits = Tensor::from_vec(
            vec![0.0, 0.0, 3.0, 0.0, /* q1 */ 1.0, 0.0, 0.0, 5.0],
            &[2, 4],
            DType::F64,
        )
        .unwrap();
        let out = DetectionOutput {
            logits: logits.clone(),
            centers: Tensor::full(&[2, 3], 0.5, DType::F64),
            sizes: Tensor::full(&[2, 3], 0.2, DType::F64),
        };
        let dets = postprocess(&out).unwrap();
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[0].category, 2);
        let probs = no_grad(|| logits.softmax(1)).unwrap().to_vec();
        assert!((dets[0].score - probs[2]).abs() < 1e-15);
        // No-object column (index 3) is excluded from the argmax.
        assert_eq!(dets[1].category, 0);
        assert!((dets[1].score - probs[4]).abs() < 1e-15);
        assert!(dets[1].score < 0.5);
    }

    #[test]
    fn hull_to_normalized_roundtrip() {
        let b = hull_to_normalized([2, 4, 6], [5, 7, 9], [16, 16, 16]);
        // Occupies voxels 2..=5 -> continuous [2, 6) -> center 4/16, size 4/16.
        assert!((b.center[0] - 0.25).abs() < 1e-15);
        assert!((b.size[0] - 0.25).abs() < 1e-15);
    }
}
