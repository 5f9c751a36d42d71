//! Learned flexibility estimators and the shape-matching evaluation.
//!
//! An estimator maps an observed partial curve to a flexibility value. The
//! evaluation turns each estimate into a clean library shape via
//! [`nearest_flex_match`] and scores it with the point-point distance.

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::flexibility::{
    compute_flexibility, nearest_flex_match, point_point_distance, FlexDataset, FlexSample, ProjectedCurve, Split,
};
use crate::neural::{
    train_regressor, Activation, ChainGnn, Checkpoint, DenseNet, EpochLoss, RegressionSet, Regressor, TrainConfig,
};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Mlp,
    Gnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    pub hidden: usize,
    /// Train on augmented copies as well as the clean shapes.
    pub augmented: bool,
    pub train: TrainConfig,
}

impl EstimatorSpec {
    pub fn gnn(augmented: bool, train: TrainConfig) -> Self {
        Self { kind: EstimatorKind::Gnn, hidden: 32, augmented, train }
    }

    pub fn mlp(train: TrainConfig) -> Self {
        Self { kind: EstimatorKind::Mlp, hidden: 8, augmented: true, train }
    }
}

/// Per-coordinate input standardization and a signed-log target transform,
/// `t = sign(f)·ln(1 + |f|)`, standardized. The transform evens out the
/// resolution across stiff and floppy ropes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub coord_mean: [f64; 2],
    pub coord_std: [f64; 2],
    pub target_mean: f64,
    pub target_std: f64,
}

fn signed_log(f: f64) -> f64 {
    f.signum() * f.abs().ln_1p()
}

fn signed_exp(t: f64) -> f64 {
    t.signum() * t.abs().exp_m1()
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt().max(1e-12))
}

impl Normalizer {
    pub fn fit(samples: &[&FlexSample]) -> Self {
        let pts = samples.iter().flat_map(|s| s.curve.points.iter());
        let (mx, sx) = mean_std(pts.clone().map(|p| p[0]));
        let (my, sy) = mean_std(pts.map(|p| p[1]));
        let (tm, ts) = mean_std(samples.iter().map(|s| signed_log(s.label_f)));
        Self { coord_mean: [mx, my], coord_std: [sx, sy], target_mean: tm, target_std: ts }
    }

    pub fn inputs(&self, curves: &[&ProjectedCurve]) -> Result<Array3<f64>> {
        let n = curves.first().map_or(0, |c| c.len());
        if curves.iter().any(|c| c.len() != n) {
            return Err(invalid("all curves in a batch must have the same length"));
        }
        Ok(Array3::from_shape_fn((curves.len(), n, 2), |(b, i, k)| {
            (curves[b].points[i][k] - self.coord_mean[k]) / self.coord_std[k]
        }))
    }

    pub fn target(&self, f: f64) -> f64 {
        (signed_log(f) - self.target_mean) / self.target_std
    }

    pub fn untarget(&self, t: f64) -> f64 {
        signed_exp(t * self.target_std + self.target_mean)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EstimatorModel {
    Mlp(DenseNet),
    Gnn(ChainGnn),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlexEstimator {
    pub model: EstimatorModel,
    pub norm: Normalizer,
    pub points: usize,
}

impl FlexEstimator {
    pub fn kind(&self) -> EstimatorKind {
        match self.model {
            EstimatorModel::Mlp(_) => EstimatorKind::Mlp,
            EstimatorModel::Gnn(_) => EstimatorKind::Gnn,
        }
    }

    pub fn estimate_batch(&self, curves: &[&ProjectedCurve]) -> Result<Vec<f64>> {
        if curves.is_empty() {
            return Ok(Vec::new());
        }
        if curves[0].len() != self.points {
            return Err(invalid(format!("estimator expects {} points, got {}", self.points, curves[0].len())));
        }
        let x = self.norm.inputs(curves)?;
        let t = match &self.model {
            EstimatorModel::Mlp(m) => m.predict_batch(x.view())?,
            EstimatorModel::Gnn(m) => m.predict_batch(x.view())?,
        };
        Ok(t.iter().map(|&t| self.norm.untarget(t)).collect())
    }

    pub fn estimate(&self, curve: &ProjectedCurve) -> Result<f64> {
        Ok(self.estimate_batch(&[curve])?[0])
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let (inner, kind) = match &self.model {
            EstimatorModel::Mlp(m) => (m.to_checkpoint(), "mlp"),
            EstimatorModel::Gnn(m) => (m.to_checkpoint(), "gnn"),
        };
        Checkpoint {
            kind: format!("flex_estimator_{kind}"),
            config: serde_json::json!({ "model": inner.config, "norm": self.norm, "points": self.points }),
            tensors: inner.tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let norm: Normalizer = ckpt.config_field("norm")?;
        let points: usize = ckpt.config_field("points")?;
        let model_cfg: serde_json::Value = ckpt.config_field("model")?;
        let model = match ckpt.kind.as_str() {
            "flex_estimator_mlp" => {
                let inner = Checkpoint { kind: "dense".into(), config: model_cfg, tensors: ckpt.tensors.clone() };
                EstimatorModel::Mlp(DenseNet::from_checkpoint(&inner)?)
            }
            "flex_estimator_gnn" => {
                let inner = Checkpoint { kind: "chain_gnn".into(), config: model_cfg, tensors: ckpt.tensors.clone() };
                EstimatorModel::Gnn(ChainGnn::from_checkpoint(&inner)?)
            }
            other => return Err(invalid(format!("not an estimator checkpoint: {other:?}"))),
        };
        Ok(Self { model, norm, points })
    }
}

fn regression_set(norm: &Normalizer, samples: &[&FlexSample]) -> Result<RegressionSet> {
    let curves: Vec<&ProjectedCurve> = samples.iter().map(|s| &s.curve).collect();
    let y = Array1::from_iter(samples.iter().map(|s| norm.target(s.label_f)));
    RegressionSet::new(norm.inputs(&curves)?, y)
}

fn split_samples(ds: &FlexDataset, split: Split, augmented: bool) -> Vec<&FlexSample> {
    ds.split(split).filter(|s| augmented || !s.augmented).collect()
}

/// Trains an estimator on the dataset's train split (validation loss on
/// the val split). Without augmentation only the clean shapes are used and
/// the epoch count is scaled up so both variants take the same number of
/// optimizer steps.
pub fn train_estimator(spec: &EstimatorSpec, ds: &FlexDataset) -> Result<(FlexEstimator, Vec<EpochLoss>)> {
    let train = split_samples(ds, Split::Train, spec.augmented);
    if train.is_empty() {
        return Err(invalid("training split is empty"));
    }
    let points = train[0].curve.len();
    let norm = Normalizer::fit(&train);
    let train_set = regression_set(&norm, &train)?;
    let val = split_samples(ds, Split::Val, spec.augmented);
    let val_set = if val.is_empty() { None } else { Some(regression_set(&norm, &val)?) };

    let mut cfg = spec.train.clone();
    if !spec.augmented {
        let full = split_samples(ds, Split::Train, true).len();
        let ratio = full.div_ceil(cfg.batch) as f64 / train.len().div_ceil(cfg.batch) as f64;
        cfg.epochs = (cfg.epochs as f64 * ratio).round() as usize;
    }
    let mut rng = seed::stream(spec.train.seed, "estimator-init", 0);
    let (model, curve) = match spec.kind {
        EstimatorKind::Mlp => {
            let mut net = DenseNet::mlp(&[2 * points, spec.hidden, 1], Activation::Tanh, &mut rng)?;
            let curve = train_regressor(&mut net, &train_set, val_set.as_ref(), &cfg)?;
            (EstimatorModel::Mlp(net), curve)
        }
        EstimatorKind::Gnn => {
            let mut gnn = ChainGnn::new(2, spec.hidden, &mut rng)?;
            let curve = train_regressor(&mut gnn, &train_set, val_set.as_ref(), &cfg)?;
            (EstimatorModel::Gnn(gnn), curve)
        }
    };
    Ok((FlexEstimator { model, norm, points }, curve))
}

/// Evaluation method for the shape-matching table.
pub enum Method<'a> {
    /// The flexibility formula applied directly to the observed curve at
    /// its first point.
    Analytic,
    Learned(&'a FlexEstimator),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlexReportRow {
    pub method: String,
    pub mean_mm: f64,
    pub std_mm: f64,
    pub count: usize,
}

/// Held-out samples used for scoring: the augmented test shapes, or the
/// clean ones when the dataset has no augmentation.
pub fn evaluation_samples(ds: &FlexDataset) -> Vec<&FlexSample> {
    let noisy: Vec<&FlexSample> = ds.split(Split::Test).filter(|s| s.augmented).collect();
    if noisy.is_empty() {
        ds.split(Split::Test).collect()
    } else {
        noisy
    }
}

/// Per-sample point-point distances (m) between each held-out shape and the
/// library shape matched by the method's flexibility estimate.
pub fn matched_distances(method: &Method<'_>, samples: &[&FlexSample], library: &[FlexSample]) -> Result<Vec<f64>> {
    let curves: Vec<&ProjectedCurve> = samples.iter().map(|s| &s.curve).collect();
    let estimates = match method {
        Method::Analytic => curves
            .iter()
            .map(|c| match compute_flexibility(c, 0) {
                Ok(f) => Ok(f),
                Err(Error::DegenerateGeometry(_)) => Ok(0.0),
                Err(e) => Err(e),
            })
            .collect::<Result<Vec<_>>>()?,
        Method::Learned(est) => est.estimate_batch(&curves)?,
    };
    curves
        .iter()
        .zip(estimates)
        .map(|(c, f)| point_point_distance(c, &nearest_flex_match(f, library)?.curve))
        .collect()
}

pub fn report_row(method: &str, distances: &[f64]) -> FlexReportRow {
    let (mean, std) = mean_std(distances.iter().copied());
    FlexReportRow {
        method: method.to_string(),
        mean_mm: mean * 1e3,
        std_mm: if distances.len() > 1 { std * 1e3 } else { 0.0 },
        count: distances.len(),
    }
}

pub fn write_report_csv<W: std::io::Write>(rows: &[FlexReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
