//! Flexibility: a discrete curvature measure of a rope held in a fixed pose.
//!
//! Rope particles are projected into the gripper's vertical plane, the
//! flexibility scalar is evaluated from four of the projected points next to
//! the grasp, and the estimation rig produces labelled shapes by settling
//! simulated ropes across the stiffness sweep.

use std::io::{BufRead, Write};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seed::{self, Rng};
use crate::sim::{
    self, check_plane_normal, init_rope, plane_horizontal, settle_quasi_static, Grasp, RopeParams, RopeState,
    Vec3, World,
};

/// Gripper "down" axis in world coordinates.
pub const GRIPPER_Z: Vec3 = Vec3::new(0.0, 0.0, -1.0);

/// Below this, an x-spacing in the flexibility formula counts as zero.
pub const DEGENERATE_DX: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedCurve {
    pub points: Vec<[f64; 2]>,
    pub source_indices: Vec<usize>,
}

impl ProjectedCurve {
    pub fn new(points: Vec<[f64; 2]>, source_indices: Vec<usize>) -> Result<Self> {
        if points.len() < 4 {
            return Err(invalid(format!("a projected curve needs at least 4 points, got {}", points.len())));
        }
        if points.len() != source_indices.len() {
            return Err(invalid("points and source indices differ in length"));
        }
        if !points.iter().flatten().all(|v| v.is_finite()) {
            return Err(invalid("projected points must be finite"));
        }
        Ok(Self { points, source_indices })
    }

    /// Curve with local source indices `0..points.len()`.
    pub fn from_points(points: Vec<[f64; 2]>) -> Result<Self> {
        let idx = (0..points.len()).collect();
        Self::new(points, idx)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn map_points(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        Self {
            points: self.points.iter().map(|&p| f(p)).collect(),
            source_indices: self.source_indices.clone(),
        }
    }

    /// Flattened `[x0, y0, x1, y1, ...]`.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }
}

/// Projects one point into the gripper plane: `x = (n̂ × ẑ)·p`, `y = ẑ·p`
/// with `ẑ = [0, 0, -1]`.
pub fn project_point(p: &Vec3, plane_normal: &Vec3) -> Result<[f64; 2]> {
    check_plane_normal(plane_normal)?;
    Ok(project_unchecked(p, plane_normal))
}

fn project_unchecked(p: &Vec3, plane_normal: &Vec3) -> [f64; 2] {
    let x_axis = plane_normal.cross(&GRIPPER_Z);
    [x_axis.dot(p), GRIPPER_Z.dot(p)]
}

pub fn project_to_gripper_plane(
    positions: &[Vec3],
    source_indices: Vec<usize>,
    plane_normal: &Vec3,
) -> Result<ProjectedCurve> {
    check_plane_normal(plane_normal)?;
    let points = positions.iter().map(|p| project_unchecked(p, plane_normal)).collect();
    ProjectedCurve::new(points, source_indices)
}

fn slope(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[1] - b[1]) / (a[0] - b[0])
}

fn flexibility_at(points: &[[f64; 2]], i: usize) -> Option<f64> {
    let (p0, p1, p3) = (points[i], points[i + 1], points[i + 3]);
    let dx0 = p1[0] - p0[0];
    let dx1 = p3[0] - p1[0];
    if dx0.abs() < DEGENERATE_DX || dx1.abs() < DEGENERATE_DX {
        return None;
    }
    let near = slope(p1, p0);
    let far = slope(p3, p1);
    Some(-(far - near) / (dx0 * (1.0 + near * near).powf(1.5)))
}

/// Flexibility at local index `i_p` from points `i_p`, `i_p + 1`, `i_p + 3`.
///
/// If either x-spacing vanishes the evaluation shifts one index forward; a
/// second degenerate triple is an error.
pub fn compute_flexibility(curve: &ProjectedCurve, i_p: usize) -> Result<f64> {
    let pts = &curve.points;
    if i_p + 3 >= pts.len() {
        return Err(invalid(format!("index {i_p} needs points up to {} but curve has {}", i_p + 3, pts.len())));
    }
    if let Some(f) = flexibility_at(pts, i_p) {
        return Ok(f);
    }
    if i_p + 4 < pts.len() {
        if let Some(f) = flexibility_at(pts, i_p + 1) {
            return Ok(f);
        }
    }
    Err(Error::DegenerateGeometry(format!("coincident x-coordinates around index {i_p}")))
}

/// Mean Euclidean distance between paired points.
pub fn point_point_distance(a: &ProjectedCurve, b: &ProjectedCurve) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(invalid(format!("curves have {} and {} points", a.len(), b.len())));
    }
    let total: f64 = a
        .points
        .iter()
        .zip(&b.points)
        .map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1]))
        .sum();
    Ok(total / a.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentParams {
    pub scale_min: f64,
    pub scale_max: f64,
    /// Per-coordinate Gaussian noise standard deviation (m).
    pub noise_std: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self { scale_min: 0.85, scale_max: 1.0, noise_std: 0.003 }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return Err(invalid("augmentation scale range must satisfy 0 < min <= max"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(invalid("augmentation noise std must be non-negative"));
        }
        Ok(())
    }
}

/// `p' = λ (p + noise)` with one `λ ~ U[scale_min, scale_max]` per curve and
/// i.i.d. Gaussian noise per coordinate. Returns the curve and the drawn `λ`.
pub fn augment_with(curve: &ProjectedCurve, params: &AugmentParams, rng: &mut Rng) -> (ProjectedCurve, f64) {
    let lambda = if params.scale_max > params.scale_min {
        rng.random_range(params.scale_min..=params.scale_max)
    } else {
        params.scale_min
    };
    let points = if params.noise_std > 0.0 {
        let normal = Normal::new(0.0, params.noise_std).expect("validated noise std");
        curve
            .points
            .iter()
            .map(|p| {
                let nx = normal.sample(rng);
                let ny = normal.sample(rng);
                [lambda * (p[0] + nx), lambda * (p[1] + ny)]
            })
            .collect()
    } else {
        curve.points.iter().map(|p| [lambda * p[0], lambda * p[1]]).collect()
    };
    (ProjectedCurve { points, source_indices: curve.source_indices.clone() }, lambda)
}

pub fn augment_sample(curve: &ProjectedCurve, seed: u64) -> ProjectedCurve {
    let mut rng = seed::stream(seed, "augment", 0);
    augment_with(curve, &AugmentParams::default(), &mut rng).0
}

/// The fixed interaction used to measure flexibility.
///
/// The gripper holds particle `grasp` with a horizontal jaw at
/// `grasp_height`, the rope starts straight and horizontal, and the shape is
/// read after quasi-static settling. The gripper holds the rope palm-up, so
/// its frame is the world frame turned half a revolution about the plane
/// normal; positions are taken relative to the grasp point in that frame
/// before projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationRig {
    pub grasp_height: f64,
    pub plane_normal: Vec3,
    pub max_steps: usize,
    pub vel_tol: f64,
    pub label_n: usize,
    pub label_grasp: usize,
    pub input_n: usize,
    pub input_grasp: usize,
    /// First particle of the observed window; the window runs to the rope end.
    pub window_start: usize,
}

impl Default for EstimationRig {
    fn default() -> Self {
        Self {
            grasp_height: 0.5,
            plane_normal: Vec3::new(0.0, 1.0, 0.0),
            max_steps: sim::DEFAULT_MAX_SETTLE_STEPS,
            vel_tol: sim::DEFAULT_VEL_TOL,
            label_n: 20,
            label_grasp: 10,
            input_n: 40,
            input_grasp: 10,
            window_start: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RigShape {
    pub state: RopeState,
    pub converged: bool,
}

impl EstimationRig {
    pub fn validate(&self) -> Result<()> {
        check_plane_normal(&self.plane_normal)?;
        if self.label_grasp + 3 >= self.label_n {
            return Err(invalid("label grasp index leaves fewer than 3 particles beyond it"));
        }
        if self.input_grasp >= self.input_n || self.window_start + 4 > self.input_n {
            return Err(invalid("input window must hold at least 4 particles"));
        }
        if self.grasp_height <= 0.0 {
            return Err(invalid("grasp height must be positive"));
        }
        Ok(())
    }

    /// Settles a rope held in the rig pose.
    pub fn hold(&self, params: &RopeParams, grasp: usize) -> Result<RigShape> {
        let h = plane_horizontal(&self.plane_normal);
        let grasp_point = Vec3::new(0.0, 0.0, self.grasp_height);
        let base = grasp_point - h * (grasp as f64 * params.rest_len);
        let mut state = init_rope(params, base, h)?;
        state.grasp = Some(Grasp::jaw(grasp, grasp_point, h));
        let report = settle_quasi_static(&mut state, params, &World::floor_only(), self.max_steps, self.vel_tol)?;
        Ok(RigShape { state, converged: report.converged })
    }

    /// Projects particles `indices` of a rig-held rope in the gripper frame,
    /// relative to the grasp point.
    pub fn project(&self, state: &RopeState, indices: std::ops::Range<usize>) -> Result<ProjectedCurve> {
        let grasp = state
            .grasp_target()
            .ok_or_else(|| invalid("rig projection needs a grasped rope"))?;
        let n = self.plane_normal;
        let rel: Vec<Vec3> = state.positions[indices.clone()]
            .iter()
            .map(|p| {
                let d = p - grasp;
                n * (2.0 * d.dot(&n)) - d
            })
            .collect();
        project_to_gripper_plane(&rel, indices.collect(), &n)
    }

    /// Ground-truth flexibility: short rope grasped in the middle, formula
    /// evaluated at the grasp index.
    pub fn label(&self, params: &RopeParams) -> Result<(f64, bool)> {
        let params = RopeParams { n: self.label_n, ..params.clone() };
        let shape = self.hold(&params, self.label_grasp)?;
        let curve = self.project(&shape.state, 0..self.label_n)?;
        Ok((compute_flexibility(&curve, self.label_grasp)?, shape.converged))
    }

    /// Observed input: long rope grasped off-centre, far window projected.
    pub fn input_curve(&self, params: &RopeParams) -> Result<(ProjectedCurve, bool)> {
        let params = RopeParams { n: self.input_n, ..params.clone() };
        let shape = self.hold(&params, self.input_grasp)?;
        let curve = self.project(&shape.state, self.window_start..self.input_n)?;
        Ok((curve, shape.converged))
    }

    pub fn label_for_sweep(&self, s: f64) -> Result<(f64, bool)> {
        self.label(&RopeParams::from_sweep(s, self.label_n))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlexSample {
    pub curve: ProjectedCurve,
    pub label_f: f64,
    pub sweep_param: f64,
    pub augmented: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub augment: AugmentParams,
    pub per_sweep_augments: usize,
    pub seed: u64,
    pub sim_hash: String,
    pub rig: EstimationRig,
    pub skipped: Vec<f64>,
    /// Split tag of each sample, aligned with the sample order.
    pub splits: Vec<Split>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlexDataset {
    pub samples: Vec<FlexSample>,
    pub meta: DatasetMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub sweep: Vec<f64>,
    pub per_sweep_augments: usize,
    pub seed: u64,
    pub augment: AugmentParams,
    pub rig: EstimationRig,
    /// Fractions of sweep values assigned to validation and test.
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl DatasetSpec {
    pub fn new(sweep: Vec<f64>, per_sweep_augments: usize, seed: u64) -> Self {
        Self {
            sweep,
            per_sweep_augments,
            seed,
            augment: AugmentParams::default(),
            rig: EstimationRig::default(),
            val_fraction: 0.1,
            test_fraction: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweep.is_empty() {
            return Err(invalid("sweep must not be empty"));
        }
        if self.sweep.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(invalid("sweep values must lie in [0, 1]"));
        }
        if !(self.val_fraction >= 0.0 && self.test_fraction >= 0.0 && self.val_fraction + self.test_fraction < 1.0) {
            return Err(invalid("split fractions must be non-negative and sum below 1"));
        }
        self.augment.validate()?;
        self.rig.validate()
    }
}

/// Evenly spaced sweep values over `[lo, hi]`.
pub fn linear_sweep(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect(),
    }
}

/// Fingerprint of the simulator settings shared by every sample.
pub fn sim_hash(rig: &EstimationRig) -> String {
    let base = (RopeParams::from_sweep(0.0, rig.label_n), RopeParams::from_sweep(1.0, rig.input_n), rig);
    seed::fingerprint(serde_json::to_string(&base).expect("serializable").as_bytes())
}

struct SweepShapes {
    sweep_param: f64,
    label_f: f64,
    curve: ProjectedCurve,
}

fn measure_sweep_value(rig: &EstimationRig, s: f64) -> Result<Option<SweepShapes>> {
    let (label_f, label_ok) = match rig.label_for_sweep(s) {
        Ok(v) => v,
        Err(Error::DegenerateGeometry(msg)) => {
            log::warn!("sweep value {s}: {msg}; skipped");
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    let (curve, input_ok) = rig.input_curve(&RopeParams::from_sweep(s, rig.input_n))?;
    if !(label_ok && input_ok) {
        log::warn!("sweep value {s}: rig did not settle; skipped");
        return Ok(None);
    }
    Ok(Some(SweepShapes { sweep_param: s, label_f, curve }))
}

/// Runs both rig passes for every sweep value and emits the clean sample
/// followed by `per_sweep_augments` augmented copies.
pub fn generate_flex_dataset(spec: &DatasetSpec) -> Result<FlexDataset> {
    spec.validate()?;
    let mut shapes = Vec::with_capacity(spec.sweep.len());
    let mut skipped = Vec::new();
    for &s in &spec.sweep {
        match measure_sweep_value(&spec.rig, s)? {
            Some(v) => shapes.push(v),
            None => skipped.push(s),
        }
    }
    if skipped.len() * 10 > spec.sweep.len() {
        return Err(Error::DatasetGeneration(format!(
            "{} of {} sweep values failed to settle",
            skipped.len(),
            spec.sweep.len()
        )));
    }

    let split_of = assign_splits(shapes.len(), spec.val_fraction, spec.test_fraction, spec.seed);
    let mut samples = Vec::new();
    let mut splits = Vec::new();
    for (k, sh) in shapes.iter().enumerate() {
        let base_seed = seed::derive(spec.seed, "flex-sample", k as u64);
        samples.push(FlexSample {
            curve: sh.curve.clone(),
            label_f: sh.label_f,
            sweep_param: sh.sweep_param,
            augmented: false,
            seed: base_seed,
        });
        splits.push(split_of[k]);
        for a in 0..spec.per_sweep_augments {
            let aug_seed = seed::derive(base_seed, "augment", a as u64);
            let mut rng = seed::stream(aug_seed, "augment", 0);
            let (curve, _) = augment_with(&sh.curve, &spec.augment, &mut rng);
            samples.push(FlexSample {
                curve,
                label_f: sh.label_f,
                sweep_param: sh.sweep_param,
                augmented: true,
                seed: aug_seed,
            });
            splits.push(split_of[k]);
        }
    }
    Ok(FlexDataset {
        samples,
        meta: DatasetMeta {
            augment: spec.augment.clone(),
            per_sweep_augments: spec.per_sweep_augments,
            seed: spec.seed,
            sim_hash: sim_hash(&spec.rig),
            rig: spec.rig.clone(),
            skipped,
            splits,
        },
    })
}

/// Deterministic split per sweep value: a seeded shuffle, test first, then val.
fn assign_splits(count: usize, val_fraction: f64, test_fraction: f64, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = seed::stream(seed, "split", 0);
    for i in (1..count).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_test = (count as f64 * test_fraction).round() as usize;
    let n_val = (count as f64 * val_fraction).round() as usize;
    let mut out = vec![Split::Train; count];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_test {
            out[i] = Split::Test;
        } else if rank < n_test + n_val {
            out[i] = Split::Val;
        }
    }
    out
}

/// JSON-lines record for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub sweep_param: f64,
    pub label_f: f64,
    pub points: Vec<[f64; 2]>,
    pub augmented: bool,
    pub seed: u64,
}

impl FlexDataset {
    pub fn split(&self, which: Split) -> impl Iterator<Item = &FlexSample> {
        self.samples
            .iter()
            .zip(&self.meta.splits)
            .filter(move |(_, s)| **s == which)
            .map(|(x, _)| x)
    }

    /// Clean (unaugmented) training samples, the shape library for matching.
    pub fn library(&self) -> Vec<FlexSample> {
        self.split(Split::Train).filter(|s| !s.augmented).cloned().collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.len() != self.meta.splits.len() {
            return Err(invalid("split tags do not match sample count"));
        }
        if self.meta.sim_hash != sim_hash(&self.meta.rig) {
            return Err(invalid("dataset simulator hash does not match its rig"));
        }
        // A sweep value may only appear in one split.
        let mut seen: Vec<(u64, Split)> = Vec::new();
        for (s, tag) in self.samples.iter().zip(&self.meta.splits) {
            let key = s.sweep_param.to_bits();
            match seen.iter().find(|(k, _)| *k == key) {
                Some((_, t)) if t != tag => {
                    return Err(invalid(format!("sweep value {} appears in two splits", s.sweep_param)))
                }
                Some(_) => {}
                None => seen.push((key, *tag)),
            }
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for s in &self.samples {
            let rec = SampleRecord {
                sweep_param: s.sweep_param,
                label_f: s.label_f,
                points: s.curve.points.clone(),
                augmented: s.augmented,
                seed: s.seed,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R, meta: DatasetMeta) -> Result<Self> {
        let mut samples = Vec::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(&line)?;
            let start = meta.rig.window_start;
            let idx = (start..start + rec.points.len()).collect();
            samples.push(FlexSample {
                curve: ProjectedCurve::new(rec.points, idx)?,
                label_f: rec.label_f,
                sweep_param: rec.sweep_param,
                augmented: rec.augmented,
                seed: rec.seed,
            });
        }
        let ds = Self { samples, meta };
        ds.validate()?;
        Ok(ds)
    }
}

/// Clean library sample whose label is closest to `estimated_f`; ties go to
/// the smaller label.
pub fn nearest_flex_match(estimated_f: f64, library: &[FlexSample]) -> Result<&FlexSample> {
    library
        .iter()
        .filter(|s| !s.augmented)
        .min_by(|a, b| {
            let da = (a.label_f - estimated_f).abs();
            let db = (b.label_f - estimated_f).abs();
            da.total_cmp(&db).then(a.label_f.total_cmp(&b.label_f))
        })
        .ok_or_else(|| invalid("flexibility library has no clean samples"))
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
