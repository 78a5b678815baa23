//! Mini-batch Adam training of the patch regressor and its serialization.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{Adam, Architecture, Network};
use super::patches::{Patch, PatchSet};
use super::GlobalPriorConfig;
use crate::error::{Error, Result};
use crate::io::{self, Dtype, FbinHeader, Kind};

/// Batch size used when predicting.
const PREDICT_BATCH: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean absolute error over the epoch's batches, in label units (ns).
    pub train_mae: f64,
    pub validation_mae: Option<f64>,
}

/// Zero-mean, unit-scale label transform. The scale is the interquartile
/// range, falling back to the standard deviation and then to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelNorm {
    pub mean: f64,
    pub scale: f64,
}

impl LabelNorm {
    pub fn fit(labels: &[f64]) -> Self {
        let n = labels.len().max(1) as f64;
        let mean = labels.iter().sum::<f64>() / n;
        let mut sorted = labels.to_vec();
        sorted.sort_by(f64::total_cmp);
        let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
        let std = (labels.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let scale = if iqr > 0.0 {
            iqr
        } else if std > 0.0 {
            std
        } else {
            1.0
        };
        LabelNorm { mean, scale }
    }

    pub fn normalize(&self, tau: f64) -> f64 {
        (tau - self.mean) / self.scale
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.scale + self.mean
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedPredictor {
    pub network: Network,
    pub seed: u64,
    pub labels: LabelNorm,
    pub loss_curve: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct PredictorMeta {
    architecture: Architecture,
    seed: u64,
    label_mean: f64,
    label_scale: f64,
    loss_curve: Vec<EpochRecord>,
}

impl TrainedPredictor {
    pub fn train_mae(&self) -> Option<f64> {
        self.loss_curve.last().map(|e| e.train_mae)
    }

    pub fn validation_mae(&self) -> Option<f64> {
        self.loss_curve.last().and_then(|e| e.validation_mae)
    }

    /// Lifetimes (ns) for flattened patches.
    pub fn predict(&self, patches: &[&Patch]) -> Vec<f64> {
        let len = self.network.arch.input_len();
        let mut out = Vec::with_capacity(patches.len());
        let mut buf = Vec::with_capacity(PREDICT_BATCH * len);
        for chunk in patches.chunks(PREDICT_BATCH) {
            buf.clear();
            for p in chunk {
                buf.extend_from_slice(&p.data);
            }
            let pred = self.network.forward(&buf, chunk.len());
            out.extend(pred.iter().map(|&v| self.labels.denormalize(v)));
        }
        out
    }

    /// Mean absolute error (ns) on labeled patches.
    pub fn mae_on(&self, patches: &[&Patch]) -> Option<f64> {
        if patches.is_empty() {
            return None;
        }
        let pred = self.predict(patches);
        let sum: f64 = pred
            .iter()
            .zip(patches)
            .map(|(p, x)| (p - x.label.unwrap_or(f64::NAN)).abs())
            .sum();
        Some(sum / patches.len() as f64)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.network.flat_parameters();
        let mut header = FbinHeader::new(Kind::Predictor, vec![params.len()], Dtype::Float64);
        header.meta = Some(serde_json::to_value(PredictorMeta {
            architecture: self.network.arch.clone(),
            seed: self.seed,
            label_mean: self.labels.mean,
            label_scale: self.labels.scale,
            loss_curve: self.loss_curve.clone(),
        })?);
        io::encode_fbin(&header, &io::f64_payload(params))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = io::decode_fbin(bytes)?;
        if header.kind != Kind::Predictor || header.dtype != Dtype::Float64 {
            return Err(Error::Format("not a float64 predictor file".into()));
        }
        let meta: PredictorMeta = serde_json::from_value(
            header
                .meta
                .ok_or_else(|| Error::Format("predictor header lacks metadata".into()))?,
        )?;
        // weights are overwritten below, the generator only fixes shapes
        let mut network = Network::new(meta.architecture, &mut ChaCha8Rng::seed_from_u64(0))?;
        network.set_flat_parameters(&io::f64_values(payload))?;
        Ok(TrainedPredictor {
            network,
            seed: meta.seed,
            labels: LabelNorm {
                mean: meta.label_mean,
                scale: meta.label_scale,
            },
            loss_curve: meta.loss_curve,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&io::read_file(path.as_ref())?)
    }
}

/// `epoch,train_mae_ns,validation_mae_ns` rows.
pub fn telemetry_csv(curve: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_mae_ns,validation_mae_ns\n");
    for e in curve {
        let val = e
            .validation_mae
            .map(|v| format!("{v:e}"))
            .unwrap_or_default();
        out.push_str(&format!("{},{:e},{}\n", e.epoch, e.train_mae, val));
    }
    out
}

/// Trains from scratch on the labeled patches of `train`. `seed` drives both
/// the initialization and the per-epoch shuffles.
pub fn train_predictor(
    train: &PatchSet,
    validation: Option<&PatchSet>,
    cfg: &GlobalPriorConfig,
    seed: u64,
) -> Result<TrainedPredictor> {
    train_predictor_with(train, validation, cfg, seed, |_| {})
}

/// [`train_predictor`] with a callback after every epoch.
pub fn train_predictor_with(
    train: &PatchSet,
    validation: Option<&PatchSet>,
    cfg: &GlobalPriorConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainedPredictor> {
    cfg.validate()?;
    let arch = cfg.architecture();
    let instances: Vec<&Patch> = train.labeled().collect();
    if instances.is_empty() {
        return Err(Error::NoLabeledPatches);
    }
    if instances.iter().any(|p| p.data.len() != arch.input_len()) {
        return Err(Error::InvalidConfig(format!(
            "patches do not match a {0}x{0}x{1} input",
            arch.patch_side, arch.in_channels
        )));
    }
    let val: Vec<&Patch> = validation
        .map(|v| v.labeled().collect())
        .unwrap_or_default();
    let raw: Vec<f64> = instances.iter().map(|p| p.label.unwrap()).collect();
    let labels = LabelNorm::fit(&raw);
    let targets: Vec<f64> = raw.iter().map(|&t| labels.normalize(t)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let network = Network::new(arch.clone(), &mut rng)?;
    let mut predictor = TrainedPredictor {
        network,
        seed,
        labels,
        loss_curve: Vec::with_capacity(cfg.epochs),
    };
    let mut adam = Adam::new(
        &predictor.network,
        cfg.learning_rate,
        cfg.beta1,
        cfg.beta2,
        cfg.epsilon,
    );
    let batch = cfg.batch.min(instances.len());
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut xbuf = Vec::with_capacity(batch * arch.input_len());
    let mut ybuf = Vec::with_capacity(batch);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            xbuf.clear();
            ybuf.clear();
            for &k in chunk {
                xbuf.extend_from_slice(&instances[k].data);
                ybuf.push(targets[k]);
            }
            let (loss, grads) = predictor.network.mae_and_gradients(&xbuf, &ybuf);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss is {loss} at epoch {epoch}; the learning rate is likely too high"
                )));
            }
            adam.step(&mut predictor.network, &grads);
            total += loss * chunk.len() as f64;
        }
        let record = EpochRecord {
            epoch,
            train_mae: total / instances.len() as f64 * labels.scale,
            validation_mae: predictor.mae_on(&val),
        };
        on_epoch(&record);
        predictor.loss_curve.push(record);
    }
    Ok(predictor)
}
