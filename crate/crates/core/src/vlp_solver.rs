//! Geometric positioning from decoded LED observations.
//!
//! Three schemes, picked by how many lamps are in view:
//!
//! * single LED: full attitude from the inertial sensor, range either from
//!   a known camera height or from the lamp's apparent size;
//! * double LED: roll and pitch from the sensor, heading recovered from the
//!   image direction between the two lamps, position from the least-squares
//!   intersection of both rays;
//! * multi LED: Gauss-Newton over the full 6-DoF pose on reprojection error.
//!
//! The multi-LED solve works relative to a reference lamp (the lowest uid in
//! view) and adds that lamp's surveyed position back at the end.

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rs_camera::{project_camera_point, CameraIntrinsics};
use crate::scene::{normalize_angle, Pose, Vec3};

/// Rays closer to the horizon than this (z component) are rejected.
pub const MIN_RAY_ELEVATION: f64 = 0.05;
pub const MIN_PAIR_SEPARATION_PX: f64 = 10.0;
pub const GN_MAX_ITERATIONS: usize = 50;
pub const GN_STEP_TOLERANCE: f64 = 1e-9;
pub const GN_MAX_RESIDUAL_PX: f64 = 5.0;
pub const JACOBIAN_STEP: f64 = 1e-6;
const LINE_SEARCH_HALVINGS: usize = 10;
const BEHIND_PENALTY_PX: f64 = 1e4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),
    #[error("heading is not trusted; single-LED positioning needs it")]
    MissingYaw,
    #[error("no convergence, residual {residual_px:.2} px")]
    NoConvergence { residual_px: f64 },
    #[error("no positioning scheme produced a fix")]
    NoFix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedObservation {
    pub uid: u8,
    pub centroid_px: (f64, f64),
    pub equiv_diameter_px: f64,
    /// Surveyed lamp position from the uid database.
    pub world: Vec3,
    pub physical_diameter_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuReading {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub yaw_trusted: bool,
}

impl ImuReading {
    pub fn level() -> Self {
        Self {
            roll: 0.0,
            pitch: 0.0,
            yaw: 0.0,
            yaw_trusted: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    SingleLed,
    DoubleLed,
    MultiLed,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::SingleLed => "single_led",
            Scheme::DoubleLed => "double_led",
            Scheme::MultiLed => "multi_led",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionFix {
    pub agent_id: String,
    pub timestamp_s: f64,
    pub position: Vec3,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub scheme: Scheme,
    /// RMS reprojection error over the lamps used.
    pub residual_px: f64,
    pub n_leds: usize,
    pub reference_uid: u8,
}

impl PositionFix {
    pub fn stamped(mut self, agent_id: &str, timestamp_s: f64) -> Self {
        self.agent_id = agent_id.to_string();
        self.timestamp_s = timestamp_s;
        self
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.position, self.roll, self.pitch, self.yaw)
    }
}

fn camera_ray(k: &CameraIntrinsics, (u, v): (f64, f64)) -> Vec3 {
    Vec3::new((u - k.cx) / k.focal_px, (v - k.cy) / k.focal_px, 1.0)
}

fn attitude(roll: f64, pitch: f64, yaw: f64) -> Rotation3<f64> {
    Rotation3::from_euler_angles(roll, pitch, yaw)
}

/// Unit world-frame direction of the ray through a pixel.
pub fn back_project(k: &CameraIntrinsics, (roll, pitch, yaw): (f64, f64, f64), pixel: (f64, f64)) -> Vec3 {
    attitude(roll, pitch, yaw) * camera_ray(k, pixel).normalize()
}

fn rms_reprojection(pose: &Pose, k: &CameraIntrinsics, obs: &[LedObservation]) -> f64 {
    let sum: f64 = obs
        .iter()
        .map(|o| match project_camera_point(k, &pose.to_camera(&o.world)) {
            Ok((u, v)) => (u - o.centroid_px.0).powi(2) + (v - o.centroid_px.1).powi(2),
            Err(_) => 2.0 * BEHIND_PENALTY_PX * BEHIND_PENALTY_PX,
        })
        .sum();
    (sum / obs.len() as f64).sqrt()
}

fn make_fix(pose: Pose, scheme: Scheme, residual_px: f64, obs: &[LedObservation]) -> PositionFix {
    PositionFix {
        agent_id: String::new(),
        timestamp_s: 0.0,
        position: pose.position,
        roll: pose.roll,
        pitch: pose.pitch,
        yaw: pose.yaw,
        scheme,
        residual_px,
        n_leds: obs.len(),
        reference_uid: obs.iter().map(|o| o.uid).min().unwrap_or(0),
    }
}

/// One lamp plus full attitude.
///
/// With a known camera height the range follows from the height
/// difference. Otherwise it comes from apparent size: the lamp subtends
/// `focal * D / diameter` of depth along the optical axis, stretched by the
/// off-axis angle of the ray. Both quantities are in the same device's
/// pixels, so no cross-device constant enters.
pub fn solve_single_led(
    obs: &LedObservation,
    imu: &ImuReading,
    k: &CameraIntrinsics,
    known_height: Option<f64>,
) -> Result<PositionFix, SolverError> {
    if !imu.yaw_trusted {
        return Err(SolverError::MissingYaw);
    }
    let d = back_project(k, (imu.roll, imu.pitch, imu.yaw), obs.centroid_px);
    if d.z <= MIN_RAY_ELEVATION {
        return Err(SolverError::DegenerateGeometry("lamp near the horizon"));
    }
    let range = match known_height {
        Some(h) => (obs.world.z - h) / d.z,
        None => {
            if !(obs.equiv_diameter_px > 0.0) {
                return Err(SolverError::DegenerateGeometry("lamp has no apparent size"));
            }
            let ray = camera_ray(k, obs.centroid_px);
            let cos_off_axis = 1.0 / ray.norm();
            k.focal_px * obs.physical_diameter_m / obs.equiv_diameter_px / cos_off_axis
        }
    };
    let pose = Pose::new(obs.world - range * d, imu.roll, imu.pitch, imu.yaw);
    let one = std::slice::from_ref(obs);
    Ok(make_fix(pose, Scheme::SingleLed, rms_reprojection(&pose, k, one), one))
}

/// Two lamps plus roll and pitch.
pub fn solve_double_led(
    obs: &[LedObservation; 2],
    imu: &ImuReading,
    k: &CameraIntrinsics,
    known_height: Option<f64>,
) -> Result<PositionFix, SolverError> {
    let [a, b] = obs;
    if a.uid == b.uid {
        return Err(SolverError::DegenerateGeometry("both observations carry the same uid"));
    }
    let sep = ((a.centroid_px.0 - b.centroid_px.0).powi(2) + (a.centroid_px.1 - b.centroid_px.1).powi(2)).sqrt();
    if sep < MIN_PAIR_SEPARATION_PX {
        return Err(SolverError::DegenerateGeometry("lamps too close in the image"));
    }
    // rays in the gravity-aligned (heading-free) frame
    let tilt = attitude(imu.roll, imu.pitch, 0.0);
    let ga = tilt * camera_ray(k, a.centroid_px).normalize();
    let gb = tilt * camera_ray(k, b.centroid_px).normalize();
    if ga.z <= MIN_RAY_ELEVATION || gb.z <= MIN_RAY_ELEVATION {
        return Err(SolverError::DegenerateGeometry("lamp near the horizon"));
    }

    // b.world - a.world = Rz(yaw) (lb * gb - la * ga); z fixes lb given la,
    // the horizontal length then fixes la.
    let delta = b.world - a.world;
    let ga_h = ga.xy();
    let gb_h = gb.xy();
    let e = gb_h * (ga.z / gb.z) - ga_h;
    let q = gb_h * (delta.z / gb.z);
    let horiz = delta.xy().norm();
    let ee = e.dot(&e);
    if ee < 1e-12 || horiz < 1e-9 {
        return Err(SolverError::DegenerateGeometry("rays are near-parallel"));
    }
    let (qa, qb, qc) = (ee, 2.0 * e.dot(&q), q.dot(&q) - horiz * horiz);
    let disc = (qb * qb - 4.0 * qa * qc).max(0.0).sqrt();
    let la = [(-qb + disc) / (2.0 * qa), (-qb - disc) / (2.0 * qa)]
        .into_iter()
        .filter(|&l| l > 0.0 && (delta.z + l * ga.z) / gb.z > 0.0)
        .fold(f64::NAN, f64::max);
    if !la.is_finite() {
        return Err(SolverError::DegenerateGeometry("no consistent range for the lamp pair"));
    }
    let img_dir = e * la + q;
    let yaw = normalize_angle(delta.y.atan2(delta.x) - img_dir.y.atan2(img_dir.x));

    let rot = attitude(imu.roll, imu.pitch, yaw);
    let da = rot * camera_ray(k, a.centroid_px).normalize();
    let db = rot * camera_ray(k, b.centroid_px).normalize();
    if da.cross(&db).norm() < 1e-6 {
        return Err(SolverError::DegenerateGeometry("rays are near-parallel"));
    }
    let position = match known_height {
        Some(h) => {
            let pa = a.world - da * ((a.world.z - h) / da.z);
            let pb = b.world - db * ((b.world.z - h) / db.z);
            (pa + pb) / 2.0
        }
        None => {
            let mut lhs = Matrix3::zeros();
            let mut rhs = Vec3::zeros();
            for (d, p) in [(da, a.world), (db, b.world)] {
                let proj = Matrix3::identity() - d * d.transpose();
                lhs += proj;
                rhs += proj * p;
            }
            lhs.lu()
                .solve(&rhs)
                .ok_or(SolverError::DegenerateGeometry("ray intersection is singular"))?
        }
    };
    let pose = Pose::new(position, imu.roll, imu.pitch, yaw);
    Ok(make_fix(pose, Scheme::DoubleLed, rms_reprojection(&pose, k, obs), obs))
}

pub type PoseParams = SVector<f64, 6>;

/// Reprojection residuals for a camera pose expressed relative to an
/// anchor point: params are `(x, y, z, roll, pitch, yaw)` with the
/// position measured from `anchor`.
#[derive(Debug, Clone, Copy)]
pub struct ReprojectionProblem<'a> {
    pub observations: &'a [LedObservation],
    pub intrinsics: &'a CameraIntrinsics,
    pub anchor: Vec3,
}

impl ReprojectionProblem<'_> {
    pub fn pose(&self, p: &PoseParams) -> Pose {
        Pose::new(self.anchor + Vec3::new(p[0], p[1], p[2]), p[3], p[4], p[5])
    }

    /// Stacked `(u_pred - u_obs, v_pred - v_obs)` per lamp.
    pub fn residuals(&self, p: &PoseParams) -> DVector<f64> {
        let rot_inv = attitude(p[3], p[4], p[5]).inverse();
        let cam = Vec3::new(p[0], p[1], p[2]);
        let mut r = DVector::zeros(2 * self.observations.len());
        for (i, o) in self.observations.iter().enumerate() {
            let pc = rot_inv * (o.world - self.anchor - cam);
            let (du, dv) = match project_camera_point(self.intrinsics, &pc) {
                Ok((u, v)) => (u - o.centroid_px.0, v - o.centroid_px.1),
                Err(_) => (BEHIND_PENALTY_PX, BEHIND_PENALTY_PX),
            };
            r[2 * i] = du;
            r[2 * i + 1] = dv;
        }
        r
    }

    pub fn cost(&self, p: &PoseParams) -> f64 {
        self.residuals(p).norm_squared()
    }

    pub fn rms(&self, p: &PoseParams) -> f64 {
        (self.cost(p) / self.observations.len() as f64).sqrt()
    }

    /// Central-difference Jacobian of the residuals.
    pub fn jacobian(&self, p: &PoseParams) -> DMatrix<f64> {
        let m = 2 * self.observations.len();
        let mut j = DMatrix::zeros(m, 6);
        for c in 0..6 {
            let mut hi = *p;
            let mut lo = *p;
            hi[c] += JACOBIAN_STEP;
            lo[c] -= JACOBIAN_STEP;
            let col = (self.residuals(&hi) - self.residuals(&lo)) / (2.0 * JACOBIAN_STEP);
            j.set_column(c, &col);
        }
        j
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiLedDiagnostics {
    /// RMS residual after each accepted iteration, starting with the guess.
    pub residual_history: Vec<f64>,
    pub iterations: usize,
    pub reference_uid: u8,
    /// Index of the reference lamp within the observations.
    pub reference_index: usize,
}

fn check_not_collinear(obs: &[LedObservation]) -> Result<(), SolverError> {
    let pts: Vec<Vec3> = obs.iter().map(|o| o.world).collect();
    let mut diam2: f64 = 0.0;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            diam2 = diam2.max((pts[j] - pts[i]).norm_squared());
        }
    }
    let mut area2: f64 = 0.0;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            for l in j + 1..pts.len() {
                area2 = area2.max((pts[j] - pts[i]).cross(&(pts[l] - pts[i])).norm());
            }
        }
    }
    if diam2 <= 0.0 || area2 / diam2 < 1e-3 {
        return Err(SolverError::DegenerateGeometry("lamps are collinear"));
    }
    Ok(())
}

/// Indices of the two observations farthest apart in the world.
fn widest_pair(obs: &[LedObservation]) -> (usize, usize) {
    let mut best = (0, 1, -1.0);
    for i in 0..obs.len() {
        for j in i + 1..obs.len() {
            let d = (obs[i].world - obs[j].world).norm_squared();
            if d > best.2 {
                best = (i, j, d);
            }
        }
    }
    (best.0, best.1)
}

fn initial_guess(obs: &[LedObservation], k: &CameraIntrinsics, imu: &ImuReading) -> Pose {
    let (i, j) = widest_pair(obs);
    if let Ok(fix) = solve_double_led(&[obs[i], obs[j]], imu, k, None) {
        return fix.pose();
    }
    let n = obs.len() as f64;
    let c = obs.iter().fold(Vec3::zeros(), |acc, o| acc + o.world) / n;
    Pose::new(c - Vec3::new(0.0, 0.0, 1.5), imu.roll, imu.pitch, 0.0)
}

/// Full 6-DoF pose from three or more lamps.
pub fn solve_multi_led(
    obs: &[LedObservation],
    k: &CameraIntrinsics,
    initial_guess: Option<Pose>,
) -> Result<(PositionFix, MultiLedDiagnostics), SolverError> {
    solve_multi_led_with(obs, k, initial_guess, &ImuReading::level())
}

fn solve_multi_led_with(
    obs: &[LedObservation],
    k: &CameraIntrinsics,
    guess: Option<Pose>,
    imu: &ImuReading,
) -> Result<(PositionFix, MultiLedDiagnostics), SolverError> {
    if obs.len() < 3 {
        return Err(SolverError::DegenerateGeometry("multi-LED needs at least three lamps"));
    }
    check_not_collinear(obs)?;
    let reference_index = (0..obs.len()).min_by_key(|&i| obs[i].uid).unwrap();
    let problem = ReprojectionProblem {
        observations: obs,
        intrinsics: k,
        anchor: obs[reference_index].world,
    };
    let start = guess.unwrap_or_else(|| initial_guess(obs, k, imu));
    let rel = start.position - problem.anchor;
    let mut p = PoseParams::from([rel.x, rel.y, rel.z, start.roll, start.pitch, start.yaw]);
    let mut cost = problem.cost(&p);
    let mut history = vec![(cost / obs.len() as f64).sqrt()];
    let mut iterations = 0;
    while iterations < GN_MAX_ITERATIONS {
        iterations += 1;
        let j = problem.jacobian(&p);
        let r = problem.residuals(&p);
        let jt = j.transpose();
        let jtj: SMatrix<f64, 6, 6> = SMatrix::from_iterator((&jt * &j).iter().copied());
        let jtr: SVector<f64, 6> = SVector::from_iterator((&jt * &r).iter().copied());
        let Some(step) = jtj.lu().solve(&(-jtr)) else {
            break;
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=LINE_SEARCH_HALVINGS {
            let trial = p + step * scale;
            let c = problem.cost(&trial);
            if c <= cost {
                accepted = Some((trial, c));
                break;
            }
            scale *= 0.5;
        }
        let Some((next, next_cost)) = accepted else {
            break;
        };
        let moved = (step * scale).norm();
        p = next;
        cost = next_cost;
        history.push((cost / obs.len() as f64).sqrt());
        if moved < GN_STEP_TOLERANCE {
            break;
        }
    }
    let residual_px = (cost / obs.len() as f64).sqrt();
    if residual_px > GN_MAX_RESIDUAL_PX {
        return Err(SolverError::NoConvergence { residual_px });
    }
    let pose = problem.pose(&p);
    let diag = MultiLedDiagnostics {
        residual_history: history,
        iterations,
        reference_uid: obs[reference_index].uid,
        reference_index,
    };
    Ok((make_fix(pose, Scheme::MultiLed, residual_px, obs), diag))
}

/// Picks the scheme by lamp count and falls back to fewer lamps when the
/// preferred one fails.
pub fn select_scheme(
    observations: &[LedObservation],
    imu: &ImuReading,
    k: &CameraIntrinsics,
    known_height: Option<f64>,
) -> Result<PositionFix, SolverError> {
    let mut obs: Vec<LedObservation> = observations.to_vec();
    obs.sort_by_key(|o| o.uid);
    obs.dedup_by_key(|o| o.uid);
    if obs.len() >= 3 {
        let guess = initial_guess(&obs, k, imu);
        if let Ok((fix, _)) = solve_multi_led_with(&obs, k, Some(guess), imu) {
            return Ok(fix);
        }
    }
    if obs.len() >= 2 {
        let (i, j) = widest_pair(&obs);
        if let Ok(fix) = solve_double_led(&[obs[i], obs[j]], imu, k, known_height) {
            return Ok(fix);
        }
    }
    // single-LED: the lamp nearest the optical axis foreshortens least
    let mut best = None;
    for o in &obs {
        let off = (o.centroid_px.0 - k.cx).powi(2) + (o.centroid_px.1 - k.cy).powi(2);
        if best.is_none_or(|(b, _)| off < b) {
            best = Some((off, o));
        }
    }
    if let Some((_, o)) = best {
        if let Ok(fix) = solve_single_led(o, imu, k, known_height) {
            return Ok(fix);
        }
    }
    Err(SolverError::NoFix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rs_camera::project_point;
    use std::f64::consts::FRAC_PI_2;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::default()
    }

    fn observe(pose: &Pose, uid: u8, world: Vec3) -> LedObservation {
        let (u, v) = project_point(pose, &k(), &world).unwrap();
        let pc = pose.to_camera(&world);
        let cos = pc.z / pc.norm();
        LedObservation {
            uid,
            centroid_px: (u, v),
            equiv_diameter_px: k().focal_px * 0.175 / (pc.norm() * cos),
            world,
            physical_diameter_m: 0.175,
        }
    }

    fn imu_of(pose: &Pose, trusted: bool) -> ImuReading {
        ImuReading {
            roll: pose.roll,
            pitch: pose.pitch,
            yaw: pose.yaw,
            yaw_trusted: trusted,
        }
    }

    fn grid() -> Vec<(u8, Vec3)> {
        vec![
            (1, Vec3::new(-1.0, -1.0, 2.5)),
            (2, Vec3::new(1.0, -1.0, 2.5)),
            (3, Vec3::new(1.0, 1.0, 2.5)),
            (4, Vec3::new(-1.0, 1.0, 2.5)),
        ]
    }

    #[test]
    fn back_project_examples() {
        let d = back_project(&k(), (0.0, 0.0, 0.0), (320.0, 240.0));
        assert!((d - Vec3::z()).norm() < 1e-15);
        let d = back_project(&k(), (0.0, 0.0, 0.0), (1120.0, 240.0));
        let s = 1.0 / 2f64.sqrt();
        assert!((d - Vec3::new(s, 0.0, s)).norm() < 1e-15);
        let d = back_project(&k(), (0.0, FRAC_PI_2, 0.0), (320.0, 240.0));
        assert!(d.z.abs() < 1e-15 && (d.xy().norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_led_known_height_under_lamp() {
        let pose = Pose::level(Vec3::new(1.0, 1.0, 0.2), 0.0);
        let o = observe(&pose, 3, Vec3::new(1.0, 1.0, 2.5));
        assert!((o.centroid_px.0 - 320.0).abs() < 1e-12);
        let fix = solve_single_led(&o, &imu_of(&pose, true), &k(), Some(0.2)).unwrap();
        assert!((fix.position - pose.position).norm() < 1e-6);
        assert_eq!(fix.scheme, Scheme::SingleLed);
    }

    #[test]
    fn single_led_diameter_route() {
        let o = LedObservation {
            uid: 1,
            centroid_px: (320.0, 240.0),
            equiv_diameter_px: 70.0,
            world: Vec3::new(0.0, 0.0, 2.5),
            physical_diameter_m: 0.175,
        };
        let imu = ImuReading { yaw_trusted: true, ..ImuReading::level() };
        let fix = solve_single_led(&o, &imu, &k(), None).unwrap();
        assert!((fix.position.z - 0.5).abs() < 1e-12);
        assert!(fix.position.xy().norm() < 1e-12);
    }

    #[test]
    fn single_led_needs_trusted_yaw() {
        let pose = Pose::level(Vec3::new(1.0, 1.0, 0.2), 0.0);
        let o = observe(&pose, 3, Vec3::new(1.0, 1.0, 2.5));
        assert_eq!(
            solve_single_led(&o, &imu_of(&pose, false), &k(), Some(0.2)),
            Err(SolverError::MissingYaw)
        );
    }

    #[test]
    fn single_led_rejects_horizon_lamp() {
        let o = LedObservation {
            uid: 1,
            centroid_px: (320.0, 240.0),
            equiv_diameter_px: 10.0,
            world: Vec3::new(5.0, 0.0, 2.5),
            physical_diameter_m: 0.175,
        };
        let imu = ImuReading { pitch: FRAC_PI_2, yaw_trusted: true, ..ImuReading::level() };
        assert!(matches!(
            solve_single_led(&o, &imu, &k(), None),
            Err(SolverError::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn double_led_symmetric_and_yawed() {
        let lamps = [(1u8, Vec3::new(0.0, 0.0, 2.5)), (2u8, Vec3::new(2.0, 0.0, 2.5))];
        for yaw_deg in [0.0f64, 30.0] {
            let pose = Pose::level(Vec3::new(1.0, 0.0, 0.5), yaw_deg.to_radians());
            let obs = [observe(&pose, lamps[0].0, lamps[0].1), observe(&pose, lamps[1].0, lamps[1].1)];
            let fix = solve_double_led(&obs, &imu_of(&pose, false), &k(), None).unwrap();
            assert!((fix.position - pose.position).norm() < 1e-6, "{:?}", fix.position);
            assert!((fix.yaw - yaw_deg.to_radians()).abs() < 1e-6);
            assert!(fix.residual_px < 1e-6);
        }
    }

    #[test]
    fn double_led_same_pixel_is_degenerate() {
        let o = LedObservation {
            uid: 1,
            centroid_px: (300.0, 200.0),
            equiv_diameter_px: 50.0,
            world: Vec3::new(0.0, 0.0, 2.5),
            physical_diameter_m: 0.175,
        };
        let o2 = LedObservation { uid: 2, world: Vec3::new(1.0, 0.0, 2.5), ..o };
        assert!(matches!(
            solve_double_led(&[o, o2], &ImuReading::level(), &k(), None),
            Err(SolverError::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn multi_led_centroid_by_symmetry() {
        let pose = Pose::level(Vec3::new(0.0, 0.0, 1.0), 0.0);
        let obs: Vec<_> = grid().into_iter().map(|(u, w)| observe(&pose, u, w)).collect();
        let (fix, diag) = solve_multi_led(&obs, &k(), None).unwrap();
        assert!(fix.position.xy().norm() < 1e-9);
        assert!((fix.position.z - 1.0).abs() < 1e-9);
        assert_eq!(diag.reference_uid, 1);
        assert_eq!(fix.scheme, Scheme::MultiLed);
    }

    #[test]
    fn multi_led_collinear_is_degenerate() {
        let pose = Pose::level(Vec3::new(0.0, 0.0, 1.0), 0.0);
        let obs: Vec<_> = (0..3)
            .map(|i| observe(&pose, i as u8, Vec3::new(-0.5 + 0.5 * i as f64, 0.1, 2.5)))
            .collect();
        assert!(matches!(
            solve_multi_led(&obs, &k(), None),
            Err(SolverError::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn dispatch_by_count() {
        let pose = Pose::new(Vec3::new(0.2, -0.1, 1.0), 0.02, -0.03, 0.3);
        let obs: Vec<_> = grid().into_iter().map(|(u, w)| observe(&pose, u, w)).collect();
        let fix = select_scheme(&obs, &imu_of(&pose, true), &k(), None).unwrap();
        assert_eq!(fix.scheme, Scheme::MultiLed);
        assert_eq!(fix.n_leds, 4);
        let fix = select_scheme(&obs[..2], &imu_of(&pose, true), &k(), None).unwrap();
        assert_eq!(fix.scheme, Scheme::DoubleLed);
        assert_eq!(
            select_scheme(&obs[..1], &imu_of(&pose, false), &k(), None),
            Err(SolverError::NoFix)
        );
        assert_eq!(select_scheme(&[], &imu_of(&pose, true), &k(), None), Err(SolverError::NoFix));
    }

    #[test]
    fn collinear_triple_falls_back_to_double() {
        let pose = Pose::level(Vec3::new(0.0, 0.3, 1.0), 0.2);
        let obs: Vec<_> = [(1u8, -0.8), (2, 0.0), (3, 0.8)]
            .iter()
            .map(|&(u, x)| observe(&pose, u, Vec3::new(x, 0.0, 2.5)))
            .collect();
        let fix = select_scheme(&obs, &imu_of(&pose, true), &k(), None).unwrap();
        assert_eq!(fix.scheme, Scheme::DoubleLed);
        assert!((fix.position - pose.position).norm() < 1e-6);
    }
}
