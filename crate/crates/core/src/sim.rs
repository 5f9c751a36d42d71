//! Position-based dynamics for a particle chain.
//!
//! The rope is a chain of equal-mass particles joined by three constraint
//! families: adjacent distance (always rigid), second-neighbour springs, and
//! midpoint bending on every particle triple. A kinematic gripper can
//! pin one particle (and optionally its two neighbours, the "jaw") to a target
//! pose. Collisions are resolved against the floor plane `z = 0` and an
//! optional solid annular ring.
//!
//! The scheme is classic single-rate PBD: predict, project each constraint
//! with its raw stiffness for `solver_iters` rounds, then recover velocities
//! from the position change.

use std::io::Write;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type Vec3 = Vector3<f64>;

pub const GRAVITY: f64 = 9.81;
/// Extra clearance applied when a particle is pushed out of the ring solid.
pub const CONTACT_MARGIN: f64 = 1e-3;

pub const DEFAULT_DT: f64 = 0.005;
pub const DEFAULT_DAMPING: f64 = 0.02;
pub const DEFAULT_VEL_TOL: f64 = 1e-3;
pub const DEFAULT_MAX_SETTLE_STEPS: usize = 2000;
pub const DEFAULT_REST_LEN: f64 = 0.012;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RopeParams {
    pub n: usize,
    pub rest_len: f64,
    pub particle_mass: f64,
    pub bend_stiffness: f64,
    pub solver_iters: usize,
    pub extra_spring_stiffness: f64,
    pub damping: f64,
    pub dt: f64,
}

impl Default for RopeParams {
    fn default() -> Self {
        Self::from_sweep(0.5, 40)
    }
}

impl RopeParams {
    /// Maps the scalar stiffness sweep `s` in `[0, 1]` onto the three
    /// simulator knobs: bending and skip-spring stiffness equal `s`, solver
    /// iterations `round(2 + 18 s)`.
    pub fn from_sweep(s: f64, n: usize) -> Self {
        let s = s.clamp(0.0, 1.0);
        Self {
            n,
            rest_len: DEFAULT_REST_LEN,
            particle_mass: 0.002,
            bend_stiffness: s,
            solver_iters: (2.0 + 18.0 * s).round() as usize,
            extra_spring_stiffness: s,
            damping: DEFAULT_DAMPING,
            dt: DEFAULT_DT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.rest_len,
            self.particle_mass,
            self.bend_stiffness,
            self.extra_spring_stiffness,
            self.damping,
            self.dt,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(invalid("rope parameters must be finite"));
        }
        if self.n < 4 {
            return Err(invalid(format!("rope needs at least 4 particles, got {}", self.n)));
        }
        if self.rest_len <= 0.0 || self.dt <= 0.0 || self.particle_mass <= 0.0 {
            return Err(invalid("rest_len, dt and particle_mass must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bend_stiffness)
            || !(0.0..=1.0).contains(&self.extra_spring_stiffness)
        {
            return Err(invalid("stiffness values must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(invalid("damping must lie in [0, 1)"));
        }
        if self.solver_iters == 0 {
            return Err(invalid("solver_iters must be at least 1"));
        }
        Ok(())
    }
}

/// Kinematic gripper attachment.
///
/// `index` is held exactly at `target`. When `tangent` is set the jaw also
/// holds `index - 1` and `index + 1` at `target ∓ rest_len · tangent`, which
/// fixes the local rope direction (pointing toward increasing index).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grasp {
    pub index: usize,
    pub target: Vec3,
    pub tangent: Option<Vec3>,
}

impl Grasp {
    pub fn point(index: usize, target: Vec3) -> Self {
        Self { index, target, tangent: None }
    }

    pub fn jaw(index: usize, target: Vec3, tangent: Vec3) -> Self {
        Self { index, target, tangent: Some(tangent) }
    }

    /// Particles held by this grasp together with their target positions.
    pub fn pins(&self, n: usize, rest_len: f64) -> impl Iterator<Item = (usize, Vec3)> + '_ {
        let centre = std::iter::once((self.index, self.target));
        let jaw = self.tangent.into_iter().flat_map(move |t| {
            let behind = (self.index > 0).then(|| (self.index - 1, self.target - t * rest_len));
            let ahead = (self.index + 1 < n).then(|| (self.index + 1, self.target + t * rest_len));
            behind.into_iter().chain(ahead)
        });
        centre.chain(jaw)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeState {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub grasp: Option<Grasp>,
    /// Number of simulation steps applied so far.
    pub steps: u64,
}

impl RopeState {
    pub fn n(&self) -> usize {
        self.positions.len()
    }

    pub fn grasped_index(&self) -> Option<usize> {
        self.grasp.as_ref().map(|g| g.index)
    }

    pub fn grasp_target(&self) -> Option<Vec3> {
        self.grasp.as_ref().map(|g| g.target)
    }

    pub fn max_speed(&self) -> f64 {
        self.velocities.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.positions
            .iter()
            .chain(&self.velocities)
            .all(|p| p.iter().all(|c| c.is_finite()))
    }
}

/// Solid annular cylinder the rope is threaded through.
///
/// The ring axis lies in the insertion plane (normal `plane_normal`) and is
/// rotated by `angle` from the world up direction toward the in-plane
/// horizontal `plane_normal × up`. The axis points out of the entry face;
/// the exit face (the ring "floor") sits at axial coordinate `-depth / 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RingConfig {
    pub center: Vec3,
    pub angle: f64,
    pub inner_radius: f64,
    pub depth: f64,
    pub outer_radius: f64,
    pub plane_normal: Vec3,
}

pub const MAX_RING_ANGLE: f64 = 3.0 * std::f64::consts::FRAC_PI_4;

impl RingConfig {
    pub fn new(center: Vec3, angle: f64, inner_radius: f64) -> Self {
        Self {
            center,
            angle,
            inner_radius,
            depth: 0.04,
            outer_radius: 0.04,
            plane_normal: Vec3::new(0.0, 1.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.center.iter().all(|c| c.is_finite()) && self.angle.is_finite()) {
            return Err(invalid("ring pose must be finite"));
        }
        if !(0.0 < self.inner_radius && self.inner_radius < self.outer_radius) {
            return Err(invalid("ring radii must satisfy 0 < inner < outer"));
        }
        if self.depth <= 0.0 {
            return Err(invalid("ring depth must be positive"));
        }
        check_plane_normal(&self.plane_normal)?;
        if !(0.0..=MAX_RING_ANGLE + 1e-12).contains(&self.angle) {
            return Err(invalid(format!("ring angle {} outside [0, 3π/4]", self.angle)));
        }
        Ok(())
    }

    /// Horizontal unit vector lying in the insertion plane.
    pub fn horizontal(&self) -> Vec3 {
        plane_horizontal(&self.plane_normal)
    }

    /// Unit axis, pointing out of the entry face.
    pub fn axis(&self) -> Vec3 {
        Vec3::z() * self.angle.cos() + self.horizontal() * self.angle.sin()
    }

    /// In-plane unit vector perpendicular to the axis (`n̂ × axis`).
    pub fn lateral(&self) -> Vec3 {
        self.plane_normal.cross(&self.axis())
    }

    /// Ring-local coordinates `(axial, lateral, normal)` of a world point.
    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        let r = p - self.center;
        Vec3::new(r.dot(&self.axis()), r.dot(&self.lateral()), r.dot(&self.plane_normal))
    }

    pub fn to_world(&self, axial: f64, lateral: f64) -> Vec3 {
        self.center + self.axis() * axial + self.lateral() * lateral
    }

    /// Axial coordinate and radial distance from the axis.
    pub fn axial_radial(&self, p: &Vec3) -> (f64, f64) {
        let r = p - self.center;
        let e = self.axis();
        let s = r.dot(&e);
        (s, (r - e * s).norm())
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let (s, rho) = self.axial_radial(p);
        s.abs() < self.depth / 2.0 && rho > self.inner_radius && rho < self.outer_radius
    }
}

pub(crate) fn check_plane_normal(n: &Vec3) -> Result<()> {
    if !n.iter().all(|c| c.is_finite()) || (n.norm() - 1.0).abs() > 1e-9 || n.z.abs() > 1e-12 {
        return Err(invalid("plane normal must be a horizontal unit vector [x, y, 0]"));
    }
    Ok(())
}

/// `n̂ × up` for a horizontal plane normal.
pub fn plane_horizontal(plane_normal: &Vec3) -> Vec3 {
    plane_normal.cross(&Vec3::z())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub floor: bool,
    pub ring: Option<RingConfig>,
}

impl World {
    pub fn floor_only() -> Self {
        Self { floor: true, ring: None }
    }

    pub fn with_ring(ring: RingConfig) -> Self {
        Self { floor: true, ring: Some(ring) }
    }
}

pub fn init_rope(params: &RopeParams, base: Vec3, direction: Vec3) -> Result<RopeState> {
    params.validate()?;
    if (direction.norm() - 1.0).abs() > 1e-9 {
        return Err(invalid("rope direction must be a unit vector"));
    }
    let positions = (0..params.n)
        .map(|i| base + direction * (i as f64 * params.rest_len))
        .collect();
    Ok(RopeState {
        positions,
        velocities: vec![Vec3::zeros(); params.n],
        grasp: None,
        steps: 0,
    })
}

/// Moves two particles along their connecting line so that their distance
/// approaches `rest`, weighting by inverse mass.
pub fn project_distance_pair(a: &mut Vec3, b: &mut Vec3, wa: f64, wb: f64, rest: f64, stiffness: f64) {
    let w = wa + wb;
    if w <= 0.0 {
        return;
    }
    let d = *b - *a;
    let len = d.norm();
    if len < 1e-12 {
        return;
    }
    let corr = d * (stiffness * (len - rest) / (len * w));
    *a += corr * wa;
    *b -= corr * wb;
}

fn project_links(p: &mut [Vec3], inv_mass: &[f64], span: usize, rest: f64, stiffness: f64) {
    if stiffness <= 0.0 {
        return;
    }
    for i in 0..p.len().saturating_sub(span) {
        let (head, tail) = p.split_at_mut(i + span);
        project_distance_pair(&mut head[i], &mut tail[0], inv_mass[i], inv_mass[i + span], rest, stiffness);
    }
}

/// Pulls each interior particle toward the midpoint of its two neighbours.
///
/// The constraint `x[i+1] - (x[i] + x[i+2]) / 2 = 0` is linear in the bend
/// angle, so it resists small deflections that a distance link across the
/// joint would barely register.
fn project_bending(p: &mut [Vec3], inv_mass: &[f64], stiffness: f64) {
    if stiffness <= 0.0 {
        return;
    }
    for i in 0..p.len().saturating_sub(2) {
        let (wa, wm, wb) = (inv_mass[i], inv_mass[i + 1], inv_mass[i + 2]);
        let denom = wm + 0.25 * (wa + wb);
        if denom <= 0.0 {
            continue;
        }
        let c = p[i + 1] - (p[i] + p[i + 2]) * 0.5;
        let corr = c * (stiffness / denom);
        p[i + 1] -= corr * wm;
        p[i] += corr * (0.5 * wa);
        p[i + 2] += corr * (0.5 * wb);
    }
}

/// Ring quantities needed per collision query.
#[derive(Clone, Copy, Debug)]
pub(crate) struct RingGeometry {
    center: Vec3,
    axis: Vec3,
    half_depth: f64,
    inner: f64,
    outer: f64,
}

impl From<&RingConfig> for RingGeometry {
    fn from(r: &RingConfig) -> Self {
        Self {
            center: r.center,
            axis: r.axis(),
            half_depth: r.depth / 2.0,
            inner: r.inner_radius,
            outer: r.outer_radius,
        }
    }
}

impl RingGeometry {
    fn collide(&self, p: &Vec3) -> Vec3 {
        let e = self.axis;
        let r = p - self.center;
        let s = r.dot(&e);
        let half = self.half_depth;
        if s.abs() >= half {
            return *p;
        }
        let radial = r - e * s;
        let rho = radial.norm();
        if rho <= self.inner || rho >= self.outer {
            return *p;
        }
        let dir = radial / rho;
        // Ties resolve in this order.
        let candidates = [
            (rho - self.inner, 0),
            (half - s, 1),
            (s + half, 2),
            (self.outer - rho, 3),
        ];
        let mut best = candidates[0];
        for c in &candidates[1..] {
            if c.0 < best.0 {
                best = *c;
            }
        }
        let axial_point = self.center + e * s;
        match best.1 {
            0 => axial_point + dir * (self.inner - CONTACT_MARGIN),
            1 => p + e * (half - s + CONTACT_MARGIN),
            2 => p - e * (s + half + CONTACT_MARGIN),
            _ => axial_point + dir * (self.outer + CONTACT_MARGIN),
        }
    }
}

/// Pushes a point out of the ring solid along the shortest path to its
/// surface, plus [`CONTACT_MARGIN`]. Points outside the solid are returned
/// unchanged.
pub fn collide_ring(p: &Vec3, ring: &RingConfig) -> Vec3 {
    RingGeometry::from(ring).collide(p)
}

fn collide_floor(p: &mut Vec3) {
    if p.z < 0.0 {
        p.z = 0.0;
    }
}

/// Advances the rope by one PBD step of `params.dt`.
pub fn step(state: &mut RopeState, params: &RopeParams, world: &World) -> Result<()> {
    let n = state.n();
    let dt = params.dt;
    let rest = params.rest_len;

    let pins: Vec<(usize, Vec3)> = match &state.grasp {
        Some(g) => g.pins(n, rest).collect(),
        None => Vec::new(),
    };
    let mut inv_mass = vec![1.0 / params.particle_mass; n];
    for &(i, _) in &pins {
        inv_mass[i] = 0.0;
    }

    let mut predicted: Vec<Vec3> = Vec::with_capacity(n);
    for i in 0..n {
        if inv_mass[i] > 0.0 {
            state.velocities[i].z -= GRAVITY * dt;
        }
        predicted.push(state.positions[i] + state.velocities[i] * dt);
    }
    for &(i, target) in &pins {
        predicted[i] = target;
    }

    let ring = world.ring.as_ref().map(RingGeometry::from);
    for _ in 0..params.solver_iters {
        project_links(&mut predicted, &inv_mass, 1, rest, 1.0);
        project_links(&mut predicted, &inv_mass, 2, 2.0 * rest, params.extra_spring_stiffness);
        project_bending(&mut predicted, &inv_mass, params.bend_stiffness);
        for &(i, target) in &pins {
            predicted[i] = target;
        }
        for (p, &w) in predicted.iter_mut().zip(&inv_mass) {
            if w == 0.0 {
                continue;
            }
            if world.floor {
                collide_floor(p);
            }
            if let Some(ring) = &ring {
                *p = ring.collide(p);
            }
        }
    }

    let keep = 1.0 - params.damping;
    for i in 0..n {
        let p = predicted[i];
        if !p.iter().all(|c| c.is_finite()) {
            return Err(Error::SimulationDiverged {
                step: state.steps,
                detail: format!("particle {i} position is not finite"),
            });
        }
        state.velocities[i] = (p - state.positions[i]) / dt * keep;
        state.positions[i] = p;
    }
    state.steps += 1;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SettleReport {
    pub steps: usize,
    pub converged: bool,
    pub max_speed: f64,
}

/// Steps until every particle moves slower than `vel_tol` or `max_steps`
/// have elapsed. At least one step is always taken.
pub fn settle_quasi_static(
    state: &mut RopeState,
    params: &RopeParams,
    world: &World,
    max_steps: usize,
    vel_tol: f64,
) -> Result<SettleReport> {
    let mut steps = 0;
    loop {
        step(state, params, world)?;
        steps += 1;
        let max_speed = state.max_speed();
        if max_speed < vel_tol || steps >= max_steps.max(1) {
            return Ok(SettleReport { steps, converged: max_speed < vel_tol, max_speed });
        }
    }
}

/// Largest ratio of current segment length to rest length.
pub fn max_stretch_ratio(state: &RopeState, params: &RopeParams) -> f64 {
    state
        .positions
        .windows(2)
        .map(|w| (w[1] - w[0]).norm() / params.rest_len)
        .fold(0.0, f64::max)
}

/// Writes `step,particle_index,x,y,z` rows for a trajectory dump.
pub struct TrajectoryWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> TrajectoryWriter<W> {
    pub fn new(writer: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(writer);
        inner.write_record(["step", "particle_index", "x", "y", "z"])?;
        Ok(Self { inner })
    }

    pub fn record(&mut self, state: &RopeState) -> Result<()> {
        for (i, p) in state.positions.iter().enumerate() {
            self.inner.serialize((state.steps, i, p.x, p.y, p.z))?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        self.inner
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}
