//! Two-stage training: contrastive pretraining on a surrogate label key, then
//! a linear probe on frozen representations, then evaluation on balanced
//! per-biomarker test sets.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::contrastive::{
    build_sets, make_views, supcon_loss, AugmentSpec, LabelKey, DEFAULT_TEMPERATURE,
};
use crate::dataforge::{
    balanced_test_set, Dataset, PretrainPool, Sample, Split, BIOMARKER_NAMES, TARGET_SLOTS,
};
use crate::encoder::{Checkpoint, EncoderNet, LinearProbe, ProjectionHead, Stage};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_slots, Averages, SeedRun, SlotMetrics, SlotScores};
use crate::numcore::{sigmoid, Graph, Tensor};
use crate::seed::{self, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub label_key: LabelKey,
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub augment: AugmentSpec,
    pub hidden: usize,
    pub repr_dim: usize,
    pub proj_dim: usize,
    pub pool: PretrainPool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            label_key: LabelKey::Cst {
                bin_width: Some(15),
            },
            temperature: DEFAULT_TEMPERATURE,
            batch_size: 32,
            epochs: 10,
            lr: 0.05,
            momentum: 0.9,
            seed: 0,
            augment: AugmentSpec::default(),
            hidden: crate::encoder::DEFAULT_HIDDEN,
            repr_dim: crate::encoder::DEFAULT_REPR_DIM,
            proj_dim: crate::encoder::DEFAULT_PROJ_DIM,
            pool: PretrainPool::AllTrain,
        }
    }
}

fn check_optimizer(
    section: &str,
    lr: f64,
    momentum: f64,
    batch_size: usize,
    min_batch: usize,
) -> Result<()> {
    let bad = |key: &str, detail: String| Error::BadValue {
        key: format!("{section}.{key}"),
        detail,
    };
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(bad("lr", format!("must be > 0, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(bad(
            "momentum",
            format!("must lie in [0, 1), got {momentum}"),
        ));
    }
    if batch_size < min_batch {
        return Err(bad(
            "batch_size",
            format!("must be >= {min_batch}, got {batch_size}"),
        ));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_optimizer("train", self.lr, self.momentum, self.batch_size, 2)?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::BadValue {
                key: "train.temperature".into(),
                detail: format!("must be > 0, got {}", self.temperature),
            });
        }
        if self.epochs == 0 || self.hidden == 0 || self.repr_dim == 0 || self.proj_dim == 0 {
            return Err(Error::BadValue {
                key: "train.epochs".into(),
                detail: "epochs and layer widths must be >= 1".into(),
            });
        }
        self.augment.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub slots: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Subsample the labelled pool to at most this many samples.
    pub max_samples: Option<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            slots: TARGET_SLOTS.to_vec(),
            epochs: 25,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            max_samples: Some(400),
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        check_optimizer("probe", self.lr, self.momentum, self.batch_size, 1)?;
        if self.slots.is_empty() || self.slots.iter().any(|&s| s >= BIOMARKER_NAMES.len()) {
            return Err(Error::BadValue {
                key: "probe.slots".into(),
                detail: format!("need 1 to 16 slots in 0..16, got {:?}", self.slots),
            });
        }
        if self.epochs == 0 {
            return Err(Error::BadValue {
                key: "probe.epochs".into(),
                detail: "must be >= 1".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_per_class: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_per_class: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: Stage,
    pub label_key: Option<String>,
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
    /// Content hash of the checkpoint this run produced.
    pub checkpoint: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<crate::metrics::MetricsReport>,
    /// Seconds; kept out of the serialised record so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl RunRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serialises")
    }
}

/// `v <- momentum * v + g; p <- p - lr * v`.
pub fn sgd_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::Contract(format!(
            "sgd_step: param {:?}, grad {:?}, velocity {:?}",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    for ((p, g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// What one pretraining batch looked like, for instrumentation.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTrace {
    pub epoch: usize,
    pub batch: usize,
    pub sample_ids: Vec<u64>,
    pub labels: Vec<i64>,
    /// Hash of the augmented view matrix.
    pub views_hash: String,
}

pub struct PretrainOutcome {
    pub record: RunRecord,
    pub checkpoint: Checkpoint,
}

fn augment_index(epoch: usize, batch: usize) -> u64 {
    ((epoch as u64) << 24) | batch as u64
}

/// Builds fresh networks for `cfg` and pretrains them on `indices`.
pub fn pretrain_fresh(
    ds: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    config_hash: &str,
) -> Result<PretrainOutcome> {
    let mut enc = EncoderNet::new(&[ds.input_dim, cfg.hidden, cfg.repr_dim], cfg.seed)?;
    let mut head = ProjectionHead::new(cfg.repr_dim, cfg.repr_dim, cfg.proj_dim, cfg.seed)?;
    pretrain(
        ds,
        indices,
        &mut enc,
        &mut head,
        cfg,
        config_hash,
        &mut |_| {},
    )
}

/// SGD with momentum on encoder and head under the supervised contrastive
/// loss. Batches of one sample (an uneven tail) are skipped.
pub fn pretrain(
    ds: &Dataset,
    indices: &[usize],
    encoder: &mut EncoderNet,
    head: &mut ProjectionHead,
    cfg: &TrainConfig,
    config_hash: &str,
    observer: &mut dyn FnMut(&BatchTrace),
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if indices.len() < 2 {
        return Err(Error::BatchTooSmall(indices.len()));
    }
    if encoder.input_dim() != ds.input_dim {
        return Err(Error::dim(
            "pretrain",
            format!(
                "encoder expects {} features, dataset has {}",
                encoder.input_dim(),
                ds.input_dim
            ),
        ));
    }
    let started = Instant::now();
    let mut velocity: Vec<Tensor> = encoder
        .mlp()
        .params()
        .into_iter()
        .chain(head.mlp().params())
        .map(|p| Tensor::zeros(p.shape()))
        .collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order = indices.to_vec();
        order.shuffle(&mut seed::rng_for(
            seed::mix(cfg.seed, epoch as u64),
            Stream::Shuffle,
            0,
        ));
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &ds.samples[i]).collect();
            let mut rng = seed::rng_for(cfg.seed, Stream::Augment, augment_index(epoch, b));
            let vb = make_views(&samples, &cfg.label_key, &cfg.augment, &mut rng)?;
            observer(&BatchTrace {
                epoch,
                batch: b,
                sample_ids: samples.iter().map(|s| s.sample_id).collect(),
                labels: vb.labels.clone(),
                views_hash: seed::short_hash(&vb.views.to_le_bytes()),
            });
            let sets = build_sets(&vb);
            let diverged = |e: Error| match e {
                Error::NonFinite { op } => Error::Diverged {
                    epoch,
                    batch: b,
                    detail: format!(
                        "non-finite value in {op}; {} anchors, {} samples",
                        vb.len(),
                        chunk.len()
                    ),
                },
                Error::DegenerateInput { op, detail } => Error::Diverged {
                    epoch,
                    batch: b,
                    detail: format!("{op}: {detail}"),
                },
                other => other,
            };

            let mut g = Graph::new();
            let x = g.constant(vb.views.clone());
            let eb = encoder.bind(&mut g);
            let hb = head.bind(&mut g);
            let step = (|| {
                let r = encoder.encode(&mut g, &eb, x)?;
                let z = head.project(&mut g, &hb, r)?;
                let loss = supcon_loss(&mut g, z, &sets, cfg.temperature)?;
                g.backward(loss)?;
                Ok(g.value(loss).item())
            })()
            .map_err(diverged)?;

            let grads: Vec<Tensor> = eb
                .iter()
                .chain(&hb)
                .map(|&id| {
                    g.grad(id)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(g.value(id).shape()))
                })
                .collect();
            let params = encoder
                .mlp_mut()
                .params_mut()
                .into_iter()
                .chain(head.mlp_mut().params_mut());
            for ((p, gr), v) in params.zip(&grads).zip(&mut velocity) {
                sgd_step(p, gr, v, cfg.lr, cfg.momentum)?;
            }
            if encoder
                .mlp()
                .params()
                .iter()
                .chain(head.mlp().params().iter())
                .any(|p| !p.is_finite())
            {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    detail: format!("parameters became non-finite after a step with loss {step}"),
                });
            }
            total += step;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::BatchTooSmall(indices.len()));
        }
        epoch_losses.push(total / batches as f64);
    }

    let checkpoint = Checkpoint::pretrain(encoder, head, cfg.seed, config_hash);
    let record = RunRecord {
        stage: Stage::Pretrain,
        label_key: Some(cfg.label_key.to_string()),
        seed: cfg.seed,
        epoch_losses,
        checkpoint: seed::short_hash(&checkpoint.to_bytes()?),
        config_hash: config_hash.into(),
        dataset_hash: None,
        metrics: None,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok(PretrainOutcome { record, checkpoint })
}

pub struct ProbeOutcome {
    pub record: RunRecord,
    pub probe: LinearProbe,
    pub checkpoint: Checkpoint,
}

/// Multi-label targets and mask for `slots`; unknown entries are masked.
pub fn probe_targets(samples: &[&Sample], slots: &[usize]) -> (Tensor, Tensor) {
    let k = slots.len();
    let mut t = vec![0.0; samples.len() * k];
    let mut m = vec![0.0; samples.len() * k];
    for (i, s) in samples.iter().enumerate() {
        for (j, &slot) in slots.iter().enumerate() {
            if let Some(y) = s.biomarkers[slot] {
                t[i * k + j] = if y { 1.0 } else { 0.0 };
                m[i * k + j] = 1.0;
            }
        }
    }
    let shape = [samples.len(), k];
    (
        Tensor::new(shape.to_vec(), t).expect("shape matches"),
        Tensor::new(shape.to_vec(), m).expect("shape matches"),
    )
}

/// Fits a probe on representations `reprs` (row `i` belongs to `samples[i]`).
pub fn probe_on_reprs(
    reprs: &Tensor,
    samples: &[&Sample],
    cfg: &ProbeConfig,
    seed: u64,
    config_hash: &str,
) -> Result<ProbeOutcome> {
    cfg.validate()?;
    if reprs.rows() != samples.len() {
        return Err(Error::dim(
            "probe",
            format!(
                "{} representations for {} samples",
                reprs.rows(),
                samples.len()
            ),
        ));
    }
    let started = Instant::now();
    let mut rng = seed::rng_for(seed, Stream::Probe, 0);
    let mut keep: Vec<usize> = (0..samples.len())
        .filter(|&i| {
            cfg.slots
                .iter()
                .any(|&s| samples[i].biomarkers[s].is_some())
        })
        .collect();
    if let Some(max) = cfg.max_samples {
        if keep.len() > max {
            keep.shuffle(&mut rng);
            keep.truncate(max);
            keep.sort_unstable();
        }
    }
    let kept: Vec<&Sample> = keep.iter().map(|&i| samples[i]).collect();
    for &slot in &cfg.slots {
        if kept.iter().all(|s| s.biomarkers[slot].is_none()) {
            return Err(Error::Contract(format!(
                "slot {slot} ({}) has no known labels in the probe set",
                BIOMARKER_NAMES[slot]
            )));
        }
    }
    let x_all = reprs.select_rows(&keep)?;
    let (t_all, m_all) = probe_targets(&kept, &cfg.slots);

    let mut probe = LinearProbe::zeros(reprs.cols(), cfg.slots.len());
    probe.fit_standardization(&x_all);
    let x_all = probe.standardize(&x_all)?;
    let mut vw = Tensor::zeros(probe.linear.weight.shape());
    let mut vb = Tensor::zeros(probe.linear.bias.shape());

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..keep.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng_for(
            seed::mix(seed, epoch as u64),
            Stream::Probe,
            1,
        ));
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mask = m_all.select_rows(chunk)?;
            if mask.data().iter().all(|&m| m == 0.0) {
                continue;
            }
            let mut g = Graph::new();
            let x = g.constant(x_all.select_rows(chunk)?);
            let w = g.param(probe.linear.weight.clone());
            let b = g.param(probe.linear.bias.clone());
            let xw = g.matmul(x, w)?;
            let logits = g.add_row_bias(xw, b)?;
            let loss = g.bce_with_logits(logits, &t_all.select_rows(chunk)?, &mask)?;
            g.backward(loss)?;
            total += g.value(loss).item();
            batches += 1;
            let (gw, gb) = (
                g.grad(w).expect("reached").clone(),
                g.grad(b).expect("reached").clone(),
            );
            sgd_step(&mut probe.linear.weight, &gw, &mut vw, cfg.lr, cfg.momentum)?;
            sgd_step(&mut probe.linear.bias, &gb, &mut vb, cfg.lr, cfg.momentum)?;
        }
        epoch_losses.push(if batches > 0 {
            total / batches as f64
        } else {
            0.0
        });
    }

    let checkpoint = Checkpoint::probe(&probe, &cfg.slots, seed, config_hash);
    Ok(ProbeOutcome {
        record: RunRecord {
            stage: Stage::Probe,
            label_key: None,
            seed,
            epoch_losses,
            checkpoint: seed::short_hash(&checkpoint.to_bytes()?),
            config_hash: config_hash.into(),
            dataset_hash: None,
            metrics: None,
            wall_time_s: started.elapsed().as_secs_f64(),
        },
        probe,
        checkpoint,
    })
}

/// Encodes `indices` with the frozen encoder and fits a probe on them.
pub fn probe(
    ds: &Dataset,
    indices: &[usize],
    encoder: &EncoderNet,
    cfg: &ProbeConfig,
    seed: u64,
    config_hash: &str,
) -> Result<ProbeOutcome> {
    let reprs = encoder.encode_values(&ds.feature_matrix(indices)?)?;
    let samples: Vec<&Sample> = indices.iter().map(|&i| &ds.samples[i]).collect();
    probe_on_reprs(&reprs, &samples, cfg, seed, config_hash)
}

/// Balanced test sets for every probe slot.
pub fn build_test_sets(
    ds: &Dataset,
    slots: &[usize],
    n_per_class: usize,
    seed: u64,
) -> Result<Vec<(usize, Vec<usize>)>> {
    slots
        .iter()
        .map(|&s| Ok((s, balanced_test_set(ds, s, n_per_class, seed)?)))
        .collect()
}

/// Scores each slot's balanced test set with the probe (threshold 0.5).
pub fn evaluate(
    ds: &Dataset,
    encoder: &EncoderNet,
    probe: &LinearProbe,
    probe_slots: &[usize],
    test_sets: &[(usize, Vec<usize>)],
) -> Result<(Vec<SlotMetrics>, Averages)> {
    if test_sets.is_empty() {
        return Err(Error::Contract("no test sets to evaluate".into()));
    }
    let mut scored = Vec::with_capacity(test_sets.len());
    for (slot, idx) in test_sets {
        if idx.is_empty() {
            return Err(Error::Contract(format!("empty test set for slot {slot}")));
        }
        let col = probe_slots
            .iter()
            .position(|s| s == slot)
            .ok_or_else(|| Error::Contract(format!("probe does not predict slot {slot}")))?;
        let reprs = encoder.encode_values(&ds.feature_matrix(idx)?)?;
        let logits = probe.logits(&reprs)?;
        let k = logits.cols();
        scored.push(SlotScores {
            name: BIOMARKER_NAMES[*slot].into(),
            labels: idx
                .iter()
                .map(|&i| {
                    ds.samples[i].biomarkers[*slot].ok_or_else(|| {
                        Error::Contract(format!("sample {i} has unknown slot {slot}"))
                    })
                })
                .collect::<Result<_>>()?,
            scores: (0..idx.len())
                .map(|r| sigmoid(logits.data()[r * k + col]))
                .collect(),
        });
    }
    evaluate_slots(&scored)
}

/// Probe on the labelled train side and evaluate on balanced test sets for one seed.
pub fn probe_and_evaluate(
    ds: &Dataset,
    encoder: &EncoderNet,
    probe_cfg: &ProbeConfig,
    eval: &EvalConfig,
    seed: u64,
    config_hash: &str,
) -> Result<(ProbeOutcome, SeedRun)> {
    let train = ds.indices_in(Split::ProbeTrain)?;
    let outcome = probe(ds, &train, encoder, probe_cfg, seed, config_hash)?;
    let tests = build_test_sets(ds, &probe_cfg.slots, eval.n_per_class, seed)?;
    let (slots, averages) = evaluate(ds, encoder, &outcome.probe, &probe_cfg.slots, &tests)?;
    Ok((
        outcome,
        SeedRun {
            seed,
            slots,
            averages,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataforge::{generate, split_by_eye, GeneratorConfig};

    #[test]
    fn sgd_plain_step() {
        let mut p = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let g = Tensor::vector(vec![0.5, 0.25]).unwrap();
        let mut v = Tensor::zeros(&[2]);
        sgd_step(&mut p, &g, &mut v, 0.1, 0.0).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]);
    }

    #[test]
    fn sgd_momentum_recurrence() {
        let (lr, mu, g0) = (0.1, 0.9, 2.0);
        let mut p = Tensor::vector(vec![0.0]).unwrap();
        let g = Tensor::vector(vec![g0]).unwrap();
        let mut v = Tensor::zeros(&[1]);
        sgd_step(&mut p, &g, &mut v, lr, mu).unwrap();
        sgd_step(&mut p, &g, &mut v, lr, mu).unwrap();
        // v1 = g, v2 = mu g + g; p2 = -lr (v1 + v2) = -lr g (1 + 1.9)
        assert!((v.data()[0] - 1.9 * g0).abs() < 1e-15);
        assert!((p.data()[0] + lr * g0 * 2.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_grad_decays_velocity() {
        let mut p = Tensor::vector(vec![3.0]).unwrap();
        let mut v = Tensor::vector(vec![1.0]).unwrap();
        sgd_step(&mut p, &Tensor::zeros(&[1]), &mut v, 0.1, 0.5).unwrap();
        assert_eq!(v.data(), &[0.5]);
        assert_eq!(p.data(), &[3.0 - 0.1 * 0.5]);
        let mut p2 = Tensor::vector(vec![3.0]).unwrap();
        let mut v2 = Tensor::zeros(&[1]);
        sgd_step(&mut p2, &Tensor::zeros(&[1]), &mut v2, 0.1, 0.9).unwrap();
        assert_eq!(p2.data(), &[3.0]);
        assert!(sgd_step(&mut p, &Tensor::zeros(&[2]), &mut v, 0.1, 0.9).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(ProbeConfig {
            slots: vec![16],
            ..ProbeConfig::default()
        }
        .validate()
        .is_err());
    }

    fn tiny() -> Dataset {
        let cfg = GeneratorConfig {
            n_eyes: 8,
            visits_per_eye: 8,
            input_dim: 6,
            ..GeneratorConfig::default()
        };
        split_by_eye(generate(&cfg, 1).unwrap(), 0.25, 1).unwrap()
    }

    fn small_train(key: LabelKey) -> TrainConfig {
        TrainConfig {
            label_key: key,
            batch_size: 8,
            epochs: 2,
            hidden: 16,
            repr_dim: 8,
            proj_dim: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn label_swap_changes_only_labels() {
        let ds = tiny();
        let idx = ds.pretrain_indices(PretrainPool::AllTrain).unwrap();
        let mut traces = Vec::new();
        for key in [
            LabelKey::Cst {
                bin_width: Some(15),
            },
            LabelKey::UniqueId,
        ] {
            let cfg = small_train(key);
            let mut enc = EncoderNet::new(&[6, 16, 8], 0).unwrap();
            let mut head = ProjectionHead::new(8, 8, 4, 0).unwrap();
            let mut seen = Vec::new();
            pretrain(&ds, &idx, &mut enc, &mut head, &cfg, "h", &mut |t| {
                seen.push(t.clone())
            })
            .unwrap();
            traces.push(seen);
        }
        assert_eq!(traces[0].len(), traces[1].len());
        let mut labels_differ = false;
        for (a, b) in traces[0].iter().zip(&traces[1]) {
            assert_eq!(
                (a.epoch, a.batch, &a.sample_ids, &a.views_hash),
                (b.epoch, b.batch, &b.sample_ids, &b.views_hash)
            );
            labels_differ |= a.labels != b.labels;
        }
        assert!(labels_differ);
    }

    #[test]
    fn pretrain_is_deterministic() {
        let ds = tiny();
        let idx = ds.pretrain_indices(PretrainPool::AllTrain).unwrap();
        let cfg = small_train(LabelKey::EyeId);
        let a = pretrain_fresh(&ds, &idx, &cfg, "h").unwrap();
        let b = pretrain_fresh(&ds, &idx, &cfg, "h").unwrap();
        assert_eq!(
            a.checkpoint.to_bytes().unwrap(),
            b.checkpoint.to_bytes().unwrap()
        );
        assert_eq!(a.record.to_json(), b.record.to_json());
        assert_eq!(a.record.epoch_losses.len(), 2);
        assert!(!a.record.to_json().contains("wall_time"));
    }

    #[test]
    fn masked_slot_gets_no_gradient() {
        let mk = |b: [Option<bool>; 2]| {
            let mut s = Sample {
                sample_id: 0,
                eye_id: 0,
                bcva: 0,
                cst: 0,
                biomarkers: [None; 16],
                features: vec![],
            };
            s.biomarkers[0] = b[0];
            s.biomarkers[1] = b[1];
            s
        };
        let samples = [mk([Some(true), None]), mk([Some(false), None])];
        let refs: Vec<&Sample> = samples.iter().collect();
        let (t, m) = probe_targets(&refs, &[0, 1]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.5, -1.0, 2.0]).unwrap());
        let w = g.param(Tensor::matrix(2, 2, vec![0.3, -0.2, 0.1, 0.4]).unwrap());
        let logits = g.matmul(x, w).unwrap();
        let loss = g.bce_with_logits(logits, &t, &m).unwrap();
        g.backward(loss).unwrap();
        let gw = g.grad(w).unwrap();
        assert_eq!(gw.data()[1], 0.0);
        assert_eq!(gw.data()[3], 0.0);
        assert!(gw.data()[0] != 0.0);
    }

    #[test]
    fn separable_probe_fits_training_set() {
        let mut samples = Vec::new();
        let mut rows = Vec::new();
        for i in 0..60u64 {
            let y = i % 2 == 0;
            let mut s = Sample {
                sample_id: i,
                eye_id: 0,
                bcva: 0,
                cst: 0,
                biomarkers: [None; 16],
                features: vec![],
            };
            s.biomarkers[0] = Some(y);
            samples.push(s);
            let c = if y { 1.0 } else { -1.0 };
            rows.push(vec![c + 0.01 * (i as f64 % 7.0), (i as f64 * 0.37).sin()]);
        }
        let refs: Vec<&Sample> = samples.iter().collect();
        let reprs = Tensor::from_rows(&rows).unwrap();
        let cfg = ProbeConfig {
            slots: vec![0],
            max_samples: None,
            ..ProbeConfig::default()
        };
        let out = probe_on_reprs(&reprs, &refs, &cfg, 0, "h").unwrap();
        let logits = out.probe.logits(&reprs).unwrap();
        let correct = (0..60)
            .filter(|&i| (logits.data()[i] > 0.0) == samples[i].biomarkers[0].unwrap())
            .count();
        assert_eq!(correct, 60);
    }

    #[test]
    fn all_unknown_slot_is_rejected() {
        let ds = tiny();
        let train = ds.indices_in(Split::Pretrain).unwrap();
        let enc = EncoderNet::new(&[6, 16, 8], 0).unwrap();
        let cfg = ProbeConfig {
            slots: vec![0],
            ..ProbeConfig::default()
        };
        assert!(matches!(
            probe(&ds, &train, &enc, &cfg, 0, "h"),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn probing_leaves_encoder_untouched() {
        let ds = tiny();
        let enc = EncoderNet::new(&[6, 16, 8], 0).unwrap();
        let before = enc.checksum();
        let train = ds.indices_in(Split::ProbeTrain).unwrap();
        probe(
            &ds,
            &train,
            &enc,
            &ProbeConfig {
                epochs: 2,
                ..ProbeConfig::default()
            },
            0,
            "h",
        )
        .unwrap();
        assert_eq!(enc.checksum(), before);
    }
}
