//! Global prior: a small CNN trained from scratch on the sample's own
//! intensity patches, labeled by the lifetime measured at their centre, then
//! evaluated on every HR patch.

pub mod net;
pub mod patches;
pub mod train;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::decimate_array;
use crate::types::{Plane, Role, SamplingMap};
pub use net::{Architecture, Network};
pub use patches::{augment, extract_patches, Patch, PatchSet, Provenance, Source};
pub use train::{
    telemetry_csv, train_predictor, train_predictor_with, EpochRecord, LabelNorm, TrainedPredictor,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalPriorConfig {
    pub patch_side: usize,
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub n_inits: usize,
    /// `None` turns neighbour augmentation on for factors of 8 and above.
    pub neighbor_augment: Option<bool>,
    pub edge_margin: usize,
    pub conv_filters: Vec<usize>,
    pub kernel: usize,
    pub dense_units: Vec<usize>,
    /// Fraction of sampled positions held out (before augmentation) to report
    /// a validation MAE. Zero trains on everything.
    pub validation_fraction: f64,
}

impl Default for GlobalPriorConfig {
    fn default() -> Self {
        let arch = Architecture::default();
        GlobalPriorConfig {
            patch_side: arch.patch_side,
            epochs: 150,
            batch: 100,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            n_inits: 3,
            neighbor_augment: None,
            edge_margin: 6,
            conv_filters: arch.conv_filters,
            kernel: arch.kernel,
            dense_units: arch.dense_units,
            validation_fraction: 0.0,
        }
    }
}

impl GlobalPriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_side % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "patch_side must be odd, got {}",
                self.patch_side
            )));
        }
        if self.epochs == 0 || self.batch == 0 || self.n_inits == 0 {
            return Err(Error::InvalidConfig(
                "epochs, batch and n_inits must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if !((0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0)
        {
            return Err(Error::InvalidConfig(
                "Adam needs 0 <= beta < 1 and epsilon > 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidConfig(
                "validation_fraction must lie in [0, 1)".into(),
            ));
        }
        self.architecture().validate()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            patch_side: self.patch_side,
            in_channels: 2,
            kernel: self.kernel,
            conv_filters: self.conv_filters.clone(),
            dense_units: self.dense_units.clone(),
        }
    }

    pub fn neighbor_augment_for(&self, factor: usize) -> bool {
        self.neighbor_augment.unwrap_or(factor >= 8)
    }
}

/// Splits the sampled labeled patches into training and held-out sets by
/// position, then drops the unlabeled ones from both.
pub fn split_holdout(set: &PatchSet, fraction: f64, seed: u64) -> (PatchSet, PatchSet) {
    let mut sampled: Vec<&Patch> = set
        .labeled()
        .filter(|p| p.provenance.source == Source::Sampled)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x401d_0u64);
    sampled.shuffle(&mut rng);
    let n_val = (fraction * sampled.len() as f64).round() as usize;
    let val = sampled[..n_val].iter().map(|&p| p.clone()).collect();
    let train = sampled[n_val..].iter().map(|&p| p.clone()).collect();
    (set.with_patches(train), set.with_patches(val))
}

/// Prior plane (predictions clamped at 0 in bounds, 0 elsewhere) and the
/// weight plane marking in-bounds pixels.
pub fn predict_global_prior(
    predictor: &TrainedPredictor,
    set: &PatchSet,
) -> Result<(Plane, Plane)> {
    let shape = set.hr_shape();
    let targets: Vec<&Patch> = set.unlabeled().collect();
    let pred = predictor.predict(&targets);
    let mut prior = Array2::zeros(shape);
    for (p, v) in targets.iter().zip(pred) {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("prediction at {:?}", p.origin)));
        }
        prior[p.origin] = v.max(0.0);
    }
    let weight = Array2::from_shape_fn(shape, |(r, c)| if set.in_bounds(r, c) { 1.0 } else { 0.0 });
    Ok((
        Plane::new(prior, Role::Prior, "ns")?,
        Plane::new(weight, Role::Weight, "dimensionless")?,
    ))
}

/// Self-consistency score: MAE between the decimated prior and the LR
/// lifetimes at sampled, in-bounds positions.
pub fn self_consistency(
    prior: &Plane,
    lr_tau: &Plane,
    map: &SamplingMap,
    set: &PatchSet,
) -> Result<f64> {
    let lr_prior = decimate_array(prior.values(), map)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for ((i, j), &tau) in lr_tau.values().indexed_iter() {
        let (r, c) = map.hr_position(i, j);
        if !tau.is_nan() && set.in_bounds(r, c) {
            sum += (lr_prior[[i, j]] - tau).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoLabeledPatches);
    }
    Ok(sum / n as f64)
}

/// Index of the median score (lower median for an even count).
pub fn median_index(scores: &[f64]) -> Option<usize> {
    if scores.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    Some(order[(scores.len() - 1) / 2])
}

#[derive(Debug, Clone)]
pub struct MedianSelection {
    pub prior: Plane,
    pub weight: Plane,
    /// Self-consistency score of each initialization.
    pub scores: Vec<f64>,
    pub chosen: usize,
    pub predictors: Vec<TrainedPredictor>,
}

impl MedianSelection {
    pub fn chosen_predictor(&self) -> &TrainedPredictor {
        &self.predictors[self.chosen]
    }
}

/// Trains `n_inits` predictors with seeds `seed, seed + 1, ...` and keeps the
/// prior of median self-consistency.
pub fn select_median_prior(
    lr_tau: &Plane,
    hr_intensity: &Plane,
    map: &SamplingMap,
    cfg: &GlobalPriorConfig,
    seed: u64,
) -> Result<MedianSelection> {
    select_median_prior_with(lr_tau, hr_intensity, map, cfg, seed, |_, _| {})
}

/// [`select_median_prior`] with a callback `(init, record)` after each epoch.
pub fn select_median_prior_with(
    lr_tau: &Plane,
    hr_intensity: &Plane,
    map: &SamplingMap,
    cfg: &GlobalPriorConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, &EpochRecord),
) -> Result<MedianSelection> {
    cfg.validate()?;
    let set = extract_patches(hr_intensity, lr_tau, map, cfg.patch_side, cfg.edge_margin)?;
    let neighbor = cfg.neighbor_augment_for(map.factor().0.max(map.factor().1));
    let (train_base, val) = if cfg.validation_fraction > 0.0 {
        let (t, v) = split_holdout(&set, cfg.validation_fraction, seed);
        (t, Some(v))
    } else {
        (set.clone(), None)
    };
    let train_set = augment(&train_base, neighbor)?;
    let mut predictors = Vec::with_capacity(cfg.n_inits);
    let mut planes = Vec::with_capacity(cfg.n_inits);
    let mut scores = Vec::with_capacity(cfg.n_inits);
    for k in 0..cfg.n_inits {
        let predictor =
            train_predictor_with(&train_set, val.as_ref(), cfg, seed + k as u64, |e| {
                on_epoch(k, e)
            })?;
        let (prior, weight) = predict_global_prior(&predictor, &set)?;
        scores.push(self_consistency(&prior, lr_tau, map, &set)?);
        planes.push((prior, weight));
        predictors.push(predictor);
    }
    let chosen = median_index(&scores).expect("n_inits >= 1");
    let (prior, weight) = planes.swap_remove(chosen);
    Ok(MedianSelection {
        prior,
        weight,
        scores,
        chosen,
        predictors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cfg() -> GlobalPriorConfig {
        GlobalPriorConfig {
            patch_side: 7,
            edge_margin: 3,
            conv_filters: vec![3, 4],
            dense_units: vec![6, 5],
            epochs: 3,
            batch: 16,
            n_inits: 1,
            ..Default::default()
        }
    }

    fn flat_parameter_gradient(g: &net::Gradients) -> Vec<Vec<f64>> {
        g.tensors()
            .into_iter()
            .map(|(w, b)| w.iter().chain(b.iter()).copied().collect())
            .collect()
    }

    #[test]
    fn every_layer_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut net = Network::new(Architecture::default(), &mut rng).unwrap();
        // nonzero biases so ReLU kinks are not hit at exactly zero
        for (_, b) in net.tensors_mut() {
            b.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        }
        let x: Vec<f64> = (0..3 * net.arch.input_len())
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        let y = [0.3, -1.2, 2.0];
        let (_, grads) = net.mae_and_gradients(&x, &y);
        let analytic = flat_parameter_gradient(&grads);
        let h = 1e-5;
        for (layer, g_layer) in analytic.iter().enumerate() {
            // every bias and a spread of weights in each tensor
            let stride = (g_layer.len() / 200).max(1);
            let probes: Vec<usize> = (0..g_layer.len())
                .filter(|k| k % stride == 0 || *k + 64 >= g_layer.len())
                .collect();
            let g_layer: Vec<f64> = probes.iter().map(|&k| g_layer[k]).collect();
            let mut num = Vec::with_capacity(probes.len());
            for &k in &probes {
                let probe = |delta: f64| {
                    let mut n = net.clone();
                    let (w, b) = n.tensors_mut().swap_remove(layer);
                    let wl = w.len();
                    if k < wl {
                        w.as_slice_mut().unwrap()[k] += delta;
                    } else {
                        b[k - wl] += delta;
                    }
                    n.mae_and_gradients(&x, &y).0
                };
                num.push((probe(h) - probe(-h)) / (2.0 * h));
            }
            let diff: f64 = g_layer
                .iter()
                .zip(&num)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale: f64 = g_layer.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            assert!(
                diff / scale < 1e-6,
                "layer {layer}: relative error {}",
                diff / scale
            );
        }
    }

    #[test]
    fn label_normalization_round_trip() {
        let norm = LabelNorm::fit(&[1.0, 1.0, 3.0, 3.0, 2.2]);
        for t in [0.0, 1.0, 2.5, 7.75] {
            assert!((norm.denormalize(norm.normalize(t)) - t).abs() < 1e-12);
        }
        assert_eq!(LabelNorm::fit(&[2.0, 2.0]).scale, 1.0);
        // zero IQR but nonzero spread falls back to the standard deviation
        let n = LabelNorm::fit(&[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 5.0]);
        assert!((n.scale - (1.75f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn median_index_cases() {
        assert_eq!(median_index(&[0.9, 0.1, 0.5]), Some(2));
        assert_eq!(median_index(&[0.3]), Some(0));
        assert_eq!(median_index(&[]), None);
        assert_eq!(median_index(&[0.4, 0.2, 0.9, 0.1]), Some(1));
    }

    fn stripes(size: usize, factor: usize) -> (Plane, Plane, SamplingMap) {
        let map = SamplingMap::for_hr((size, size), factor).unwrap();
        let i = Array2::from_shape_fn(
            (size, size),
            |(_, c)| if (c / 4) % 2 == 0 { 10.0 } else { 40.0 },
        );
        let t = Array2::from_shape_fn(
            (size, size),
            |(_, c)| if (c / 4) % 2 == 0 { 1.0 } else { 2.5 },
        );
        let lr = decimate_array(&t, &map).unwrap();
        (
            Plane::new(i, Role::Intensity, "").unwrap(),
            Plane::new(lr, Role::Lifetime, "ns").unwrap(),
            map,
        )
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let (i, t, map) = stripes(24, 2);
        let cfg = small_cfg();
        let set = extract_patches(&i, &t, &map, cfg.patch_side, cfg.edge_margin).unwrap();
        let aug = augment(&set, false).unwrap();
        let a = train_predictor(&aug, None, &cfg, 5).unwrap();
        let b = train_predictor(&aug, None, &cfg, 5).unwrap();
        assert_eq!(a, b);
        let c = train_predictor(&aug, None, &cfg, 6).unwrap();
        assert_ne!(a.network, c.network);
    }

    #[test]
    fn constant_labels_are_learned() {
        let map = SamplingMap::for_hr((20, 20), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let i = Plane::new(
            Array2::from_shape_fn((20, 20), |_| rng.random_range(1.0..50.0)),
            Role::Intensity,
            "",
        )
        .unwrap();
        let t = Plane::new(Array2::from_elem(map.lr_shape(), 2.4), Role::Lifetime, "ns").unwrap();
        let cfg = GlobalPriorConfig {
            epochs: 150,
            ..small_cfg()
        };
        let set = extract_patches(&i, &t, &map, cfg.patch_side, cfg.edge_margin).unwrap();
        let p = train_predictor(&augment(&set, false).unwrap(), None, &cfg, 1).unwrap();
        let targets: Vec<&Patch> = set.unlabeled().collect();
        for v in p.predict(&targets) {
            assert!((v - 2.4).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn predictor_serialization_round_trip() {
        let (i, t, map) = stripes(24, 2);
        let cfg = small_cfg();
        let set = extract_patches(&i, &t, &map, cfg.patch_side, cfg.edge_margin).unwrap();
        let p = train_predictor(&augment(&set, false).unwrap(), None, &cfg, 2).unwrap();
        let back = TrainedPredictor::from_bytes(&p.to_bytes().unwrap()).unwrap();
        assert_eq!(p, back);
        assert!(
            telemetry_csv(&p.loss_curve).starts_with("epoch,train_mae_ns,validation_mae_ns\n1,")
        );
    }

    #[test]
    fn weight_plane_geometry() {
        let map = SamplingMap::for_hr((256, 256), 8).unwrap();
        let i = Plane::new(Array2::from_elem((256, 256), 1.0), Role::Intensity, "").unwrap();
        let t = Plane::new(Array2::from_elem(map.lr_shape(), 1.0), Role::Lifetime, "ns").unwrap();
        let set = extract_patches(&i, &t, &map, 13, 6).unwrap();
        let predictor = TrainedPredictor {
            network: Network::new(Architecture::default(), &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap(),
            seed: 0,
            labels: LabelNorm {
                mean: 0.0,
                scale: 1.0,
            },
            loss_curve: vec![],
        };
        let (_, w) = predict_global_prior(&predictor, &set).unwrap();
        for ((r, c), &v) in w.values().indexed_iter() {
            let inside = (6..=249).contains(&r) && (6..=249).contains(&c);
            assert_eq!(v, if inside { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn constant_predictor_gives_constant_prior() {
        let (i, t, map) = stripes(24, 2);
        let cfg = small_cfg();
        let set = extract_patches(&i, &t, &map, cfg.patch_side, cfg.edge_margin).unwrap();
        let mut network =
            Network::new(cfg.architecture(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (w, b) in network.tensors_mut() {
            w.fill(0.0);
            b.fill(0.0);
        }
        let predictor = TrainedPredictor {
            network,
            seed: 0,
            labels: LabelNorm {
                mean: 1.7,
                scale: 2.0,
            },
            loss_curve: vec![],
        };
        let (prior, w) = predict_global_prior(&predictor, &set).unwrap();
        for (&p, &m) in prior.values().iter().zip(w.values().iter()) {
            assert_eq!(p, if m == 1.0 { 1.7 } else { 0.0 });
        }
    }

    #[test]
    fn median_selection_brackets_scores() {
        let (i, t, map) = stripes(24, 2);
        let cfg = GlobalPriorConfig {
            n_inits: 3,
            ..small_cfg()
        };
        let sel = select_median_prior(&t, &i, &map, &cfg, 11).unwrap();
        assert_eq!(sel.scores.len(), 3);
        let chosen = sel.scores[sel.chosen];
        let lo = sel.scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = sel.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo <= chosen && chosen <= hi);
        assert_eq!(sel.chosen, median_index(&sel.scores).unwrap());
        let single =
            select_median_prior(&t, &i, &map, &GlobalPriorConfig { n_inits: 1, ..cfg }, 11)
                .unwrap();
        assert_eq!(single.chosen, 0);
        assert_eq!(single.prior, {
            let set = extract_patches(&i, &t, &map, 7, 3).unwrap();
            predict_global_prior(&single.predictors[0], &set).unwrap().0
        });
    }

    #[test]
    fn holdout_split_by_position() {
        let (i, t, map) = stripes(24, 2);
        let set = extract_patches(&i, &t, &map, 7, 3).unwrap();
        let n = set.labeled().count();
        let (train, val) = split_holdout(&set, 0.2, 1);
        assert_eq!(train.len() + val.len(), n);
        assert_eq!(val.len(), (0.2 * n as f64).round() as usize);
        for v in &val.patches {
            assert!(train.patches.iter().all(|t| t.origin != v.origin));
        }
    }
}
