//! Offline workspace mapping: grid the reachable foot space, evaluate the
//! transmissibility indices, extract the preferable region and approximate
//! it conservatively with a convex polygon in the actuated joint space.
//!
//! The fitted per-leg polygons are stacked block-diagonally over the four
//! hip coordinates and persisted to a versioned text file together with the
//! index bounds, the passive-joint ranges of the reachable set (used by the
//! singularity-avoidance baseline), and the model hash.

use crate::mft;
use crate::model::{leg_ik_full, LegId, RobotModel, Vec2};
use nalgebra::{DMatrix, DVector};
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

/// Default grid resolution [m].
pub const DEFAULT_RESOLUTION: f64 = 0.010;
/// Default transmission-index band.
pub const DEFAULT_LTI_MIN: f64 = 0.7;
pub const DEFAULT_LTI_MAX: f64 = 1.0;
/// Foot acceleration magnitude the acceleration-capacity index is evaluated
/// at [m/s^2].
pub const DEFAULT_RACI_ACCEL: f64 = 60.0;
/// Maximum polygon faces per leg.
pub const DEFAULT_MAX_FACES: usize = 6;

/// Default conservativeness radius: two grid diagonals.
pub fn default_r_min(resolution: f64) -> f64 {
    2.0 * resolution * std::f64::consts::SQRT_2
}

/// Acceleration-capacity bound below which the actuators can realize the
/// index's reference foot acceleration: the torque limit normalized by the
/// square root of the leg mass.
pub fn default_raci_max(model: &RobotModel, leg: LegId) -> f64 {
    model.actuator().tau_max / model.leg(leg).mass().sqrt()
}

#[derive(Debug, Error)]
pub enum WsmapError {
    #[error("no grid cell satisfies the preferable bounds")]
    EmptyPreferable,
    #[error("cannot satisfy both approximation conditions with {max_faces} faces (r_min {r_min})")]
    InfeasibleFit { max_faces: usize, r_min: f64 },
    #[error("polyhedra must share a space tag to be stacked")]
    SpaceTagMismatch,
    #[error("file does not match the expected schema: {0}")]
    SchemaMismatch(String),
    #[error("artifact was built for model {found}, expected {expected}")]
    ModelHashMismatch { found: String, expected: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Definition-style index band: a configuration is preferable when every
/// index lies inside its interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IndexBounds {
    pub lti_min: f64,
    pub lti_max: f64,
    pub raci_min: f64,
    pub raci_max: f64,
}

impl IndexBounds {
    pub fn contains(&self, lti: f64, raci: f64) -> bool {
        lti >= self.lti_min && lti <= self.lti_max && raci >= self.raci_min && raci <= self.raci_max
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CellSample {
    pub reachable: bool,
    pub lti: f64,
    pub raci: f64,
    pub preferable: bool,
    /// Knee angles `[rear, fore]` of the closure at this foot point.
    pub knees: [f64; 2],
    /// Hip angles `[rear, fore]`.
    pub hips: [f64; 2],
}

/// Gridded index field of one leg's foot workspace (base frame).
#[derive(Clone, Debug)]
pub struct MftField {
    pub leg: LegId,
    pub origin: Vec2,
    pub resolution: f64,
    pub nx: usize,
    pub nz: usize,
    pub raci_accel: f64,
    pub cells: Vec<CellSample>,
}

impl MftField {
    #[inline]
    pub fn cell_center(&self, ix: usize, iz: usize) -> Vec2 {
        self.origin + Vec2::new((ix as f64 + 0.5) * self.resolution, (iz as f64 + 0.5) * self.resolution)
    }

    #[inline]
    pub fn at(&self, ix: usize, iz: usize) -> &CellSample {
        &self.cells[iz * self.nx + ix]
    }

    pub fn iter_cells(&self) -> impl Iterator<Item = (usize, usize, &CellSample)> {
        self.cells
            .iter()
            .enumerate()
            .map(move |(k, c)| (k % self.nx, k / self.nx, c))
    }

    pub fn reachable_count(&self) -> usize {
        self.cells.iter().filter(|c| c.reachable).count()
    }

    pub fn preferable_count(&self) -> usize {
        self.cells.iter().filter(|c| c.preferable).count()
    }
}

/// Evaluate reachability and indices over a grid of the leg's workspace.
pub fn grid_workspace(
    model: &RobotModel,
    leg: LegId,
    resolution: f64,
    raci_accel: f64,
) -> MftField {
    assert!(resolution > 0.0, "resolution must be positive");
    let params = model.leg(leg);
    let mut reach: f64 = 0.0;
    let mut ax_min = f64::INFINITY;
    let mut ax_max = f64::NEG_INFINITY;
    let mut az_min = f64::INFINITY;
    let mut az_max = f64::NEG_INFINITY;
    for limb in crate::model::LimbId::BOTH {
        let p = params.limb(limb);
        reach = reach.max(p.proximal.length + p.distal.length);
        ax_min = ax_min.min(p.anchor[0]);
        ax_max = ax_max.max(p.anchor[0]);
        az_min = az_min.min(p.anchor[1]);
        az_max = az_max.max(p.anchor[1]);
    }
    let origin = Vec2::new(ax_min - reach, az_min - reach);
    let nx = (((ax_max + reach) - origin.x) / resolution).ceil() as usize + 1;
    let nz = ((az_max - origin.y) / resolution).ceil() as usize + 1;

    let mut field = MftField {
        leg,
        origin,
        resolution,
        nx,
        nz,
        raci_accel,
        cells: vec![CellSample::default(); nx * nz],
    };

    use rayon::prelude::*;
    let rows: Vec<Vec<CellSample>> = (0..nz)
        .into_par_iter()
        .map(|iz| {
            let mut row = vec![CellSample::default(); nx];
            for (ix, cell) in row.iter_mut().enumerate() {
                let p = field.cell_center(ix, iz);
                let Ok(joints) = leg_ik_full(model, leg, p) else {
                    continue;
                };
                let (_, _, lti, _) = mft::lti(model, leg, &joints);
                let raci = mft::raci(model, leg, &joints, raci_accel);
                *cell = CellSample {
                    reachable: true,
                    lti,
                    raci,
                    preferable: false,
                    knees: [joints.knee_rear, joints.knee_fore],
                    hips: [joints.hip_rear, joints.hip_fore],
                };
            }
            row
        })
        .collect();
    for (iz, row) in rows.into_iter().enumerate() {
        field.cells[iz * nx..(iz + 1) * nx].copy_from_slice(&row);
    }
    field
}

/// Apply the preferable-space definition: mark cells whose indices lie in
/// the given bands.
pub fn mark_preferable(mut field: MftField, bounds: &IndexBounds) -> Result<MftField, WsmapError> {
    assert!(bounds.lti_min <= bounds.lti_max && bounds.raci_min <= bounds.raci_max);
    let mut any = false;
    for cell in field.cells.iter_mut() {
        cell.preferable = cell.reachable && bounds.contains(cell.lti, cell.raci);
        any |= cell.preferable;
    }
    if !any {
        return Err(WsmapError::EmptyPreferable);
    }
    Ok(field)
}

/// Passive-joint (knee) extrema over the reachable grid, `[rear, fore]` per
/// value. Used as the reachable-space box of the singularity-avoidance
/// baseline.
pub fn passive_ranges(field: &MftField) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for cell in field.cells.iter().filter(|c| c.reachable) {
        for k in 0..2 {
            lo[k] = lo[k].min(cell.knees[k]);
            hi[k] = hi[k].max(cell.knees[k]);
        }
    }
    (lo, hi)
}

/// Space a polyhedron's coordinates live in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpaceTag {
    FootCartesian,
    ActuatedJoint,
    GeneralizedAccel,
}

impl SpaceTag {
    fn as_str(self) -> &'static str {
        match self {
            SpaceTag::FootCartesian => "FootCartesian",
            SpaceTag::ActuatedJoint => "ActuatedJoint",
            SpaceTag::GeneralizedAccel => "GeneralizedAccel",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "FootCartesian" => Some(SpaceTag::FootCartesian),
            "ActuatedJoint" => Some(SpaceTag::ActuatedJoint),
            "GeneralizedAccel" => Some(SpaceTag::GeneralizedAccel),
            _ => None,
        }
    }
}

/// Convex polyhedron `{x | A x <= b}` with unit-norm rows and a stored
/// strictly interior witness point.
#[derive(Clone, Debug)]
pub struct Polyhedron {
    pub space: SpaceTag,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub witness: DVector<f64>,
}

impl Polyhedron {
    pub fn n_faces(&self) -> usize {
        self.a.nrows()
    }

    pub fn dimension(&self) -> usize {
        self.a.ncols()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        (&self.a * x - &self.b).iter().all(|s| *s <= tol)
    }

    pub fn contains2(&self, x: Vec2, tol: f64) -> bool {
        debug_assert_eq!(self.dimension(), 2);
        self.contains(&DVector::from_vec(vec![x.x, x.y]), tol)
    }
}

// --- planar polygon utilities -------------------------------------------

/// Convex hull of a point set (monotone chain), CCW without repetition.
pub fn convex_hull(points: &[Vec2]) -> Vec<Vec2> {
    let mut pts: Vec<Vec2> = points.to_vec();
    pts.sort_by(|p, q| p.x.partial_cmp(&q.x).unwrap().then(p.y.partial_cmp(&q.y).unwrap()));
    pts.dedup_by(|p, q| (*p - *q).norm() < 1e-15);
    let n = pts.len();
    if n < 3 {
        return pts;
    }
    let cross = |o: Vec2, a: Vec2, b: Vec2| (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
    let mut hull: Vec<Vec2> = Vec::with_capacity(2 * n);
    for &p in pts.iter() {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 1e-15 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 1e-15
        {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

fn polygon_area(poly: &[Vec2]) -> f64 {
    let n = poly.len();
    let mut twice = 0.0;
    for i in 0..n {
        let j = (i + 1) % n;
        twice += poly[i].x * poly[j].y - poly[j].x * poly[i].y;
    }
    0.5 * twice
}

fn polygon_centroid(poly: &[Vec2]) -> Vec2 {
    let mut c = Vec2::zeros();
    for p in poly {
        c += *p;
    }
    c / poly.len() as f64
}

/// Clip a CCW convex polygon with the halfspace `u . x <= c`.
fn clip_polygon(poly: &[Vec2], u: Vec2, c: f64) -> Vec<Vec2> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    let n = poly.len();
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        let sp = u.dot(&p) - c;
        let sq = u.dot(&q) - c;
        if sp <= 0.0 {
            out.push(p);
        }
        if (sp < 0.0 && sq > 0.0) || (sp > 0.0 && sq < 0.0) {
            let t = sp / (sp - sq);
            out.push(p + t * (q - p));
        }
    }
    out
}

fn point_in_polygon(poly: &[Vec2], x: Vec2, tol: f64) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        let edge = q - p;
        let nrm = Vec2::new(edge.y, -edge.x); // outward for CCW
        let len = nrm.norm();
        if len < 1e-15 {
            continue;
        }
        if (nrm / len).dot(&(x - p)) > tol {
            return false;
        }
    }
    true
}

/// Convert a CCW convex polygon to unit-norm halfspace rows.
fn polygon_to_halfspaces(poly: &[Vec2], space: SpaceTag) -> Polyhedron {
    let n = poly.len();
    let mut a = DMatrix::<f64>::zeros(n, 2);
    let mut b = DVector::<f64>::zeros(n);
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        let edge = q - p;
        let nrm = Vec2::new(edge.y, -edge.x);
        let u = nrm / nrm.norm();
        a[(i, 0)] = u.x;
        a[(i, 1)] = u.y;
        b[i] = u.dot(&p);
    }
    let c = polygon_centroid(poly);
    Polyhedron { space, a, b, witness: DVector::from_vec(vec![c.x, c.y]) }
}

/// Largest-area-first inscribed convex polygon with at most `max_faces`
/// faces containing only allowed points: take the hull of the kept points,
/// cut away blocked points, then merge away the cheapest vertices.
fn fit_polygon(
    keep: &[Vec2],
    block: &[Vec2],
    max_faces: usize,
) -> Option<Vec<Vec2>> {
    if keep.len() < 3 {
        return None;
    }
    let mut poly = convex_hull(keep);
    if poly.len() < 3 {
        return None;
    }

    // Cut blocked points out, deepest first, shaving a sliver past each.
    const CUT_MARGIN: f64 = 1e-6;
    for _ in 0..(block.len() + 8) * 4 {
        let centroid = polygon_centroid(&poly);
        let mut worst: Option<(f64, Vec2)> = None;
        for &n in block {
            if point_in_polygon(&poly, n, -1e-12) {
                let depth = (n - centroid).norm();
                // Deterministic pick: the blocked point nearest the centroid
                // is the most damaging to cut late, so cut it first.
                match worst {
                    Some((d, _)) if depth >= d => {}
                    _ => worst = Some((depth, n)),
                }
            }
        }
        let Some((_, n)) = worst else { break };
        let dir = n - polygon_centroid(&poly);
        let nd = dir.norm();
        if nd < 1e-12 {
            return None; // blocked point at the centroid: nothing sensible left
        }
        let u = dir / nd;
        poly = clip_polygon(&poly, u, u.dot(&n) - CUT_MARGIN);
        if poly.len() < 3 || polygon_area(&poly) < 1e-12 {
            return None;
        }
    }

    // Reduce the face count by removing the vertex whose corner triangle is
    // cheapest (the polygon only ever shrinks, preserving containment).
    while poly.len() > max_faces {
        let n = poly.len();
        let mut best = (f64::INFINITY, 0usize);
        for i in 0..n {
            let a = poly[(i + n - 1) % n];
            let b = poly[i];
            let c = poly[(i + 1) % n];
            let loss = 0.5 * ((b - a).x * (c - a).y - (b - a).y * (c - a).x).abs();
            if loss < best.0 - 1e-15 {
                best = (loss, i);
            }
        }
        poly.remove(best.1);
        if poly.len() < 3 {
            return None;
        }
    }
    Some(poly)
}

/// Fit result bundled with its audit statistics.
#[derive(Clone, Debug)]
pub struct FitAudit {
    /// Grid cells whose mapped point lies in the polygon but are not
    /// preferable (condition 1 violations). Must be zero.
    pub condition1_violations: usize,
    /// Largest distance from an excluded preferable cell to the polygon's
    /// gridded region [m]. Must stay at or below `r_min`.
    pub worst_exclusion_distance: f64,
    pub included_cells: usize,
}

/// Map a field cell to the fitting space.
fn cell_point(space: SpaceTag, cell: &CellSample, center: Vec2) -> Vec2 {
    match space {
        SpaceTag::FootCartesian => center,
        SpaceTag::ActuatedJoint => Vec2::new(cell.hips[0], cell.hips[1]),
        SpaceTag::GeneralizedAccel => unreachable!("fields are never gridded in acceleration space"),
    }
}

/// Fit a conservative convex polygon to the preferable mask in the actuated
/// joint space (through the bijective leg inverse kinematics embedded in the
/// grid samples).
pub fn fit_polyhedron_joint_space(
    field: &MftField,
    max_faces: usize,
    r_min: f64,
) -> Result<(Polyhedron, FitAudit), WsmapError> {
    fit_in_space(field, SpaceTag::ActuatedJoint, max_faces, r_min)
}

/// Same fit performed directly on the Cartesian foot coordinates.
pub fn fit_polyhedron_cartesian(
    field: &MftField,
    max_faces: usize,
    r_min: f64,
) -> Result<(Polyhedron, FitAudit), WsmapError> {
    fit_in_space(field, SpaceTag::FootCartesian, max_faces, r_min)
}

fn fit_in_space(
    field: &MftField,
    space: SpaceTag,
    max_faces: usize,
    r_min: f64,
) -> Result<(Polyhedron, FitAudit), WsmapError> {
    let mut keep = Vec::new();
    let mut block = Vec::new();
    for (ix, iz, cell) in field.iter_cells() {
        if !cell.reachable {
            continue;
        }
        let p = cell_point(space, cell, field.cell_center(ix, iz));
        if cell.preferable {
            keep.push(p);
        } else {
            block.push(p);
        }
    }
    if keep.is_empty() {
        return Err(WsmapError::EmptyPreferable);
    }
    let infeasible = || WsmapError::InfeasibleFit { max_faces, r_min };
    let poly = fit_polygon(&keep, &block, max_faces).ok_or_else(infeasible)?;
    let polyhedron = polygon_to_halfspaces(&poly, space);
    let audit = audit_conditions(field, space, &polyhedron, r_min);
    if audit.condition1_violations > 0 || audit.worst_exclusion_distance > r_min {
        return Err(infeasible());
    }
    Ok((polyhedron, audit))
}

/// Exhaustive grid audit of the two approximation conditions.
pub fn audit_conditions(
    field: &MftField,
    space: SpaceTag,
    polyhedron: &Polyhedron,
    _r_min: f64,
) -> FitAudit {
    let mut violations = 0usize;
    let mut included = Vec::new();
    let mut excluded_preferable = Vec::new();
    for (ix, iz, cell) in field.iter_cells() {
        if !cell.reachable {
            continue;
        }
        let center = field.cell_center(ix, iz);
        let p = cell_point(space, cell, center);
        let inside = polyhedron.contains2(p, 1e-9);
        if inside {
            included.push(center);
            if !cell.preferable {
                violations += 1;
            }
        } else if cell.preferable {
            excluded_preferable.push(center);
        }
    }
    // Distance from each excluded preferable cell to the polygon's gridded
    // region, measured in the Cartesian workspace.
    let mut worst = 0.0_f64;
    for p in &excluded_preferable {
        let mut best = f64::INFINITY;
        for q in &included {
            best = best.min((p - q).norm());
            if best <= field.resolution {
                break;
            }
        }
        worst = worst.max(best);
    }
    FitAudit {
        condition1_violations: violations,
        worst_exclusion_distance: if excluded_preferable.is_empty() { 0.0 } else { worst },
        included_cells: included.len(),
    }
}

/// Stack per-leg polyhedra block-diagonally; membership in the result is the
/// conjunction of the per-leg memberships.
pub fn stack_legs(legs: &[Polyhedron]) -> Result<Polyhedron, WsmapError> {
    let space = legs.first().ok_or(WsmapError::SpaceTagMismatch)?.space;
    if legs.iter().any(|p| p.space != space) {
        return Err(WsmapError::SpaceTagMismatch);
    }
    let n_rows: usize = legs.iter().map(|p| p.n_faces()).sum();
    let n_cols: usize = legs.iter().map(|p| p.dimension()).sum();
    let mut a = DMatrix::<f64>::zeros(n_rows, n_cols);
    let mut b = DVector::<f64>::zeros(n_rows);
    let mut witness = DVector::<f64>::zeros(n_cols);
    let (mut r0, mut c0) = (0, 0);
    for leg in legs {
        a.view_mut((r0, c0), (leg.n_faces(), leg.dimension())).copy_from(&leg.a);
        b.rows_mut(r0, leg.n_faces()).copy_from(&leg.b);
        witness.rows_mut(c0, leg.dimension()).copy_from(&leg.witness);
        r0 += leg.n_faces();
        c0 += leg.dimension();
    }
    Ok(Polyhedron { space, a, b, witness })
}

/// The persisted preferable-space artifact.
#[derive(Clone, Debug)]
pub struct PreferableSpace {
    pub model_hash: String,
    pub bounds: IndexBounds,
    pub resolution: f64,
    pub r_min: f64,
    pub raci_accel: f64,
    /// Passive-joint range over the reachable set, ordered
    /// `[right rear, right fore, left rear, left fore]`.
    pub passive_min: [f64; 4],
    pub passive_max: [f64; 4],
    /// Per-leg polygons in the actuated joint space.
    pub legs: Vec<Polyhedron>,
}

impl PreferableSpace {
    /// Block-diagonal polyhedron over `[q4, q6, q8, q10]`.
    pub fn stacked(&self) -> Polyhedron {
        stack_legs(&self.legs).expect("per-leg polygons share the joint-space tag")
    }

    /// Build the artifact for a model with the given parameters.
    pub fn build(
        model: &RobotModel,
        resolution: f64,
        bounds: IndexBounds,
        raci_accel: f64,
        max_faces: usize,
        r_min: f64,
    ) -> Result<(Self, Vec<FitAudit>), WsmapError> {
        let mut legs = Vec::new();
        let mut audits = Vec::new();
        let mut passive_min = [0.0; 4];
        let mut passive_max = [0.0; 4];
        for leg in LegId::BOTH {
            let field = grid_workspace(model, leg, resolution, raci_accel);
            let field = mark_preferable(field, &bounds)?;
            let (lo, hi) = passive_ranges(&field);
            passive_min[2 * leg as usize] = lo[0];
            passive_min[2 * leg as usize + 1] = lo[1];
            passive_max[2 * leg as usize] = hi[0];
            passive_max[2 * leg as usize + 1] = hi[1];
            let (poly, audit) = fit_polyhedron_joint_space(&field, max_faces, r_min)?;
            legs.push(poly);
            audits.push(audit);
        }
        Ok((
            PreferableSpace {
                model_hash: model.hash().to_string(),
                bounds,
                resolution,
                r_min,
                raci_accel,
                passive_min,
                passive_max,
                legs,
            },
            audits,
        ))
    }
}

const FILE_HEADER: &str = "mftwbc-preferable-space 1";

/// Serialize the artifact; the format is line-oriented, deterministic and
/// carries 17 significant digits so save/load/save is byte-identical.
pub fn save_preferable_space(path: impl AsRef<Path>, art: &PreferableSpace) -> Result<(), WsmapError> {
    let mut out = String::new();
    out.push_str(FILE_HEADER);
    out.push('\n');
    out.push_str(&format!("model_hash {}\n", art.model_hash));
    out.push_str(&format!("space {}\n", SpaceTag::ActuatedJoint.as_str()));
    out.push_str(&format!("resolution {:.16e}\n", art.resolution));
    out.push_str(&format!("r_min {:.16e}\n", art.r_min));
    out.push_str(&format!("raci_accel {:.16e}\n", art.raci_accel));
    out.push_str(&format!(
        "lti_bounds {:.16e} {:.16e}\n",
        art.bounds.lti_min, art.bounds.lti_max
    ));
    out.push_str(&format!(
        "raci_bounds {:.16e} {:.16e}\n",
        art.bounds.raci_min, art.bounds.raci_max
    ));
    let fmt4 = |v: &[f64; 4]| {
        v.iter().map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(" ")
    };
    out.push_str(&format!("passive_min {}\n", fmt4(&art.passive_min)));
    out.push_str(&format!("passive_max {}\n", fmt4(&art.passive_max)));
    for (k, leg) in art.legs.iter().enumerate() {
        out.push_str(&format!(
            "leg {k} faces {} witness {:.16e} {:.16e}\n",
            leg.n_faces(),
            leg.witness[0],
            leg.witness[1]
        ));
        for i in 0..leg.n_faces() {
            out.push_str(&format!(
                "{:.16e} {:.16e} {:.16e}\n",
                leg.a[(i, 0)],
                leg.a[(i, 1)],
                leg.b[i]
            ));
        }
    }
    out.push_str("end\n");
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Load and validate an artifact. `expected_model_hash`, when given, must
/// match the stored hash.
pub fn load_preferable_space(
    path: impl AsRef<Path>,
    expected_model_hash: Option<&str>,
) -> Result<PreferableSpace, WsmapError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let schema = |msg: &str| WsmapError::SchemaMismatch(msg.to_string());
    if lines.next() != Some(FILE_HEADER) {
        return Err(schema("bad header"));
    }
    let mut model_hash = String::new();
    let mut resolution: Option<f64> = None;
    let mut r_min: Option<f64> = None;
    let mut raci_accel: Option<f64> = None;
    let mut lti_bounds: Option<(f64, f64)> = None;
    let mut raci_bounds: Option<(f64, f64)> = None;
    let mut passive_min: Option<[f64; 4]> = None;
    let mut passive_max: Option<[f64; 4]> = None;
    let mut legs: Vec<Polyhedron> = Vec::new();

    let parse_floats = |rest: &str, n: usize| -> Result<Vec<f64>, WsmapError> {
        let vals: Vec<f64> = rest
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| schema("bad float"))?;
        if vals.len() != n {
            return Err(schema("wrong field arity"));
        }
        Ok(vals)
    };

    while let Some(line) = lines.next() {
        if line == "end" {
            let need = |o: Option<f64>, name: &str| o.ok_or_else(|| schema(name));
            let bounds_l = lti_bounds.ok_or_else(|| schema("missing lti_bounds"))?;
            let bounds_r = raci_bounds.ok_or_else(|| schema("missing raci_bounds"))?;
            let art = PreferableSpace {
                model_hash: model_hash.clone(),
                bounds: IndexBounds {
                    lti_min: bounds_l.0,
                    lti_max: bounds_l.1,
                    raci_min: bounds_r.0,
                    raci_max: bounds_r.1,
                },
                resolution: need(resolution, "missing resolution")?,
                r_min: need(r_min, "missing r_min")?,
                raci_accel: need(raci_accel, "missing raci_accel")?,
                passive_min: passive_min.ok_or_else(|| schema("missing passive_min"))?,
                passive_max: passive_max.ok_or_else(|| schema("missing passive_max"))?,
                legs,
            };
            if art.legs.is_empty() {
                return Err(schema("no leg polygons"));
            }
            if let Some(expected) = expected_model_hash {
                if expected != art.model_hash {
                    return Err(WsmapError::ModelHashMismatch {
                        found: art.model_hash,
                        expected: expected.to_string(),
                    });
                }
            }
            return Ok(art);
        }
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "model_hash" => model_hash = rest.trim().to_string(),
            "space" => {
                if SpaceTag::parse(rest.trim()) != Some(SpaceTag::ActuatedJoint) {
                    return Err(schema("unsupported space tag"));
                }
            }
            "resolution" => resolution = Some(parse_floats(rest, 1)?[0]),
            "r_min" => r_min = Some(parse_floats(rest, 1)?[0]),
            "raci_accel" => raci_accel = Some(parse_floats(rest, 1)?[0]),
            "lti_bounds" => {
                let v = parse_floats(rest, 2)?;
                lti_bounds = Some((v[0], v[1]));
            }
            "raci_bounds" => {
                let v = parse_floats(rest, 2)?;
                raci_bounds = Some((v[0], v[1]));
            }
            "passive_min" => {
                let v = parse_floats(rest, 4)?;
                passive_min = Some([v[0], v[1], v[2], v[3]]);
            }
            "passive_max" => {
                let v = parse_floats(rest, 4)?;
                passive_max = Some([v[0], v[1], v[2], v[3]]);
            }
            "leg" => {
                let toks: Vec<&str> = rest.split_whitespace().collect();
                if toks.len() != 6 || toks[1] != "faces" || toks[3] != "witness" {
                    return Err(schema("bad leg header"));
                }
                let faces: usize = toks[2].parse().map_err(|_| schema("bad face count"))?;
                let wx: f64 = toks[4].parse().map_err(|_| schema("bad witness"))?;
                let wz: f64 = toks[5].parse().map_err(|_| schema("bad witness"))?;
                let mut a = DMatrix::<f64>::zeros(faces, 2);
                let mut b = DVector::<f64>::zeros(faces);
                for i in 0..faces {
                    let row = lines.next().ok_or_else(|| schema("truncated rows"))?;
                    let v = parse_floats(row, 3)?;
                    a[(i, 0)] = v[0];
                    a[(i, 1)] = v[1];
                    b[i] = v[2];
                }
                legs.push(Polyhedron {
                    space: SpaceTag::ActuatedJoint,
                    a,
                    b,
                    witness: DVector::from_vec(vec![wx, wz]),
                });
            }
            _ => return Err(schema("unknown field")),
        }
    }
    Err(schema("missing end marker"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> RobotModel {
        RobotModel::reference()
    }

    fn coarse_field(m: &RobotModel) -> MftField {
        grid_workspace(m, LegId::Right, 0.02, DEFAULT_RACI_ACCEL)
    }

    fn reference_bounds(m: &RobotModel) -> IndexBounds {
        IndexBounds {
            lti_min: DEFAULT_LTI_MIN,
            lti_max: DEFAULT_LTI_MAX,
            raci_min: 0.0,
            raci_max: default_raci_max(m, LegId::Right),
        }
    }

    #[test]
    fn refining_the_grid_keeps_reachable_centers() {
        let m = model();
        let coarse = grid_workspace(&m, LegId::Right, 0.02, DEFAULT_RACI_ACCEL);
        for (ix, iz, cell) in coarse.iter_cells() {
            if cell.reachable {
                // Reachability is a pointwise property of the center.
                let p = coarse.cell_center(ix, iz);
                assert!(leg_ik_full(&m, LegId::Right, p).is_ok());
            }
        }
    }

    #[test]
    fn reachable_area_converges_under_refinement() {
        let m = model();
        let a1 = {
            let f = grid_workspace(&m, LegId::Right, 0.010, DEFAULT_RACI_ACCEL);
            f.reachable_count() as f64 * f.resolution * f.resolution
        };
        let a2 = {
            let f = grid_workspace(&m, LegId::Right, 0.005, DEFAULT_RACI_ACCEL);
            f.reachable_count() as f64 * f.resolution * f.resolution
        };
        assert!((a1 - a2).abs() / a2 < 0.02, "areas {a1} vs {a2}");
    }

    #[test]
    fn vacuous_bounds_mark_everything_reachable() {
        let m = model();
        let field = coarse_field(&m);
        let bounds =
            IndexBounds { lti_min: 0.0, lti_max: 1.0, raci_min: 0.0, raci_max: f64::INFINITY };
        let field = mark_preferable(field, &bounds).unwrap();
        assert_eq!(field.preferable_count(), field.reachable_count());
    }

    #[test]
    fn lti_floor_strictly_shrinks_the_mask() {
        let m = model();
        let field = coarse_field(&m);
        let has_low = field.cells.iter().any(|c| c.reachable && c.lti < DEFAULT_LTI_MIN);
        assert!(has_low, "reference model should have low-transmissibility cells");
        let field = mark_preferable(field, &reference_bounds(&m)).unwrap();
        assert!(field.preferable_count() < field.reachable_count());
        assert!(field.preferable_count() > 0);
        for cell in field.cells.iter() {
            assert!(!cell.preferable || cell.reachable);
        }
    }

    #[test]
    fn empty_preferable_is_reported() {
        let m = model();
        let field = coarse_field(&m);
        let bounds = IndexBounds { lti_min: 0.0, lti_max: 1.0, raci_min: 0.0, raci_max: 1e-9 };
        assert!(matches!(mark_preferable(field, &bounds), Err(WsmapError::EmptyPreferable)));
    }

    /// Synthetic field with a rectangular preferable mask.
    fn rectangle_field() -> MftField {
        let nx = 40;
        let nz = 30;
        let resolution = 0.01;
        let mut field = MftField {
            leg: LegId::Right,
            origin: Vec2::new(0.0, 0.0),
            resolution,
            nx,
            nz,
            raci_accel: DEFAULT_RACI_ACCEL,
            cells: vec![CellSample::default(); nx * nz],
        };
        for iz in 0..nz {
            for ix in 0..nx {
                let center = field.cell_center(ix, iz);
                let inside = (0.10..=0.30).contains(&center.x) && (0.05..=0.20).contains(&center.y);
                field.cells[iz * nx + ix] = CellSample {
                    reachable: true,
                    lti: if inside { 0.9 } else { 0.1 },
                    raci: 1.0,
                    preferable: inside,
                    knees: [0.0, 0.0],
                    hips: [center.x, center.y],
                };
            }
        }
        field
    }

    #[test]
    fn rectangle_mask_fits_a_four_face_rectangle() {
        let field = rectangle_field();
        let r_min = field.resolution * std::f64::consts::SQRT_2;
        let (poly, audit) = fit_polyhedron_cartesian(&field, 4, r_min).unwrap();
        assert_eq!(poly.n_faces(), 4);
        assert_eq!(audit.condition1_violations, 0);
        assert!(audit.worst_exclusion_distance <= r_min);
        // The polygon is the rectangle shrunk by at most one cell.
        for (x, z, inside_exp) in [
            (0.20, 0.12, true),
            (0.12, 0.07, true),
            (0.09, 0.04, false),
            (0.31, 0.21, false),
        ] {
            assert_eq!(poly.contains2(Vec2::new(x, z), 1e-9), inside_exp, "at ({x},{z})");
        }
    }

    #[test]
    fn reference_fit_produces_hexagons_and_a_12x4_stack() {
        let m = model();
        let bounds = reference_bounds(&m);
        let (art, audits) = PreferableSpace::build(
            &m,
            DEFAULT_RESOLUTION,
            bounds,
            DEFAULT_RACI_ACCEL,
            DEFAULT_MAX_FACES,
            default_r_min(DEFAULT_RESOLUTION),
        )
        .unwrap();
        for (poly, audit) in art.legs.iter().zip(&audits) {
            assert_eq!(poly.n_faces(), 6);
            assert_eq!(audit.condition1_violations, 0);
            // Unit-norm rows.
            for i in 0..poly.n_faces() {
                assert_relative_eq!(poly.a.row(i).norm(), 1.0, epsilon = 1e-12);
            }
            // Witness is strictly interior.
            assert!(poly.contains(&poly.witness, -1e-6));
        }
        let stacked = art.stacked();
        assert_eq!(stacked.a.nrows(), 12);
        assert_eq!(stacked.a.ncols(), 4);
    }

    #[test]
    fn stacking_is_conjunction_of_leg_memberships() {
        let m = model();
        let bounds = reference_bounds(&m);
        let (art, _) = PreferableSpace::build(
            &m,
            0.02,
            bounds,
            DEFAULT_RACI_ACCEL,
            DEFAULT_MAX_FACES,
            default_r_min(0.02),
        )
        .unwrap();
        let stacked = art.stacked();
        // Both witnesses inside.
        assert!(stacked.contains(&stacked.witness, 1e-12));
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        for _ in 0..10_000 {
            let x = DVector::from_fn(4, |_, _| rng.gen_range(-1.5..1.5));
            let per_leg = (0..2).all(|k| {
                art.legs[k].contains(&DVector::from_vec(vec![x[2 * k], x[2 * k + 1]]), 1e-12)
            });
            assert_eq!(stacked.contains(&x, 1e-12), per_leg);
        }
        // One leg outside, one inside: outside overall.
        let mut x = DVector::zeros(4);
        x.rows_mut(0, 2).copy_from(&art.legs[0].witness);
        x[2] = 10.0;
        assert!(!stacked.contains(&x, 1e-12));
    }

    #[test]
    fn save_load_round_trip_is_byte_identical() {
        let m = model();
        let bounds = reference_bounds(&m);
        let (art, _) = PreferableSpace::build(
            &m,
            0.02,
            bounds,
            DEFAULT_RACI_ACCEL,
            DEFAULT_MAX_FACES,
            default_r_min(0.02),
        )
        .unwrap();
        let dir = std::env::temp_dir().join("mftwbc-wsmap-test");
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.poly");
        let p2 = dir.join("b.poly");
        save_preferable_space(&p1, &art).unwrap();
        let loaded = load_preferable_space(&p1, Some(m.hash())).unwrap();
        save_preferable_space(&p2, &loaded).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2, "round trip must be byte-identical");

        // Wrong model hash is rejected.
        assert!(matches!(
            load_preferable_space(&p1, Some("deadbeef")),
            Err(WsmapError::ModelHashMismatch { .. })
        ));

        // Corruption is rejected without partial state.
        let mut text = String::from_utf8(b1).unwrap();
        text.truncate(text.len() / 2);
        let p3 = dir.join("c.poly");
        std::fs::write(&p3, text).unwrap();
        assert!(matches!(
            load_preferable_space(&p3, Some(m.hash())),
            Err(WsmapError::SchemaMismatch(_))
        ));
    }

    #[test]
    fn normalized_rows_do_not_change_membership() {
        let field = rectangle_field();
        let (poly, _) = fit_polyhedron_cartesian(&field, 4, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..1000 {
            let x = Vec2::new(rng.gen_range(-0.1..0.5), rng.gen_range(-0.1..0.4));
            let scaled = {
                let mut a = poly.a.clone();
                let mut b = poly.b.clone();
                for i in 0..a.nrows() {
                    let s = 1.0 + i as f64;
                    for j in 0..a.ncols() {
                        a[(i, j)] *= s;
                    }
                    b[i] *= s;
                }
                Polyhedron { space: poly.space, a, b, witness: poly.witness.clone() }
            };
            assert_eq!(poly.contains2(x, 0.0), scaled.contains2(x, 0.0));
        }
    }

    #[test]
    fn per_leg_polygons_mirror_for_the_symmetric_model() {
        // The legs are identical, and each leg's preferable set is mirror
        // symmetric: hips (r, f) inside iff (-f, -r) inside.
        let m = model();
        let bounds = reference_bounds(&m);
        let (art, _) = PreferableSpace::build(
            &m,
            0.02,
            bounds,
            DEFAULT_RACI_ACCEL,
            DEFAULT_MAX_FACES,
            default_r_min(0.02),
        )
        .unwrap();
        let poly = &art.legs[0];
        // Sample strictly interior points (one grid diagonal inside).
        let margin = -(0.02 * std::f64::consts::SQRT_2 * 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let mut checked = 0;
        for _ in 0..20000 {
            let x = Vec2::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
            if poly.contains2(x, margin) {
                checked += 1;
                let mirrored = Vec2::new(-x.y, -x.x);
                assert!(
                    poly.contains2(mirrored, 1e-9),
                    "mirror of interior point {x:?} fell outside"
                );
            }
        }
        assert!(checked > 50, "sampled too few interior points");
    }
}
