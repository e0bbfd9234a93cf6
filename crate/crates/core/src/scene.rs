//! World model: lamps, the UID location database, agent states and the
//! scenario file format.
//!
//! World frame is right-handed with +z up, origin on the floor under the
//! centroid of the lamp grid. Angles are radians everywhere in memory and
//! degrees in scenario files.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rs_camera::CameraIntrinsics;

pub type Vec3 = Vector3<f64>;

pub const DEFAULT_CHIP_RATE: f64 = 2000.0;
pub const DEFAULT_LAMP_DIAMETER: f64 = 0.175;
pub const DEFAULT_LAMP_HEIGHT: f64 = 2.5;
pub const DEFAULT_RADIANCE: f64 = 0.8;
pub const ROBOT_CAMERA_HEIGHT: f64 = 0.2;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("i/o error reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed scenario file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Validation(String),
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("uid {0} is not registered in the lamp database")]
pub struct UnknownUid(pub u8);

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Position plus intrinsic Z-Y-X (yaw, pitch, roll) orientation.
///
/// The rotation maps body (camera) coordinates into the world frame:
/// `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(position: Vec3, roll: f64, pitch: f64, yaw: f64) -> Self {
        Self {
            position,
            roll: normalize_angle(roll),
            pitch: normalize_angle(pitch),
            yaw: normalize_angle(yaw),
        }
    }

    pub fn level(position: Vec3, yaw: f64) -> Self {
        Self::new(position, 0.0, 0.0, yaw)
    }

    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_euler_angles(self.roll, self.pitch, self.yaw)
    }

    pub fn to_camera(&self, p_world: &Vec3) -> Vec3 {
        self.rotation().inverse() * (p_world - self.position)
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::level(Vec3::zeros(), 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LampShape {
    Circle { diameter: f64 },
    Square { side: f64 },
}

impl LampShape {
    /// Characteristic size: diameter for circles, side for squares.
    pub fn size(&self) -> f64 {
        match *self {
            LampShape::Circle { diameter } => diameter,
            LampShape::Square { side } => side,
        }
    }

    /// Diameter of the circle with the same area.
    pub fn equivalent_diameter(&self) -> f64 {
        match *self {
            LampShape::Circle { diameter } => diameter,
            LampShape::Square { side } => 2.0 * side / PI.sqrt(),
        }
    }

    /// `n` points on the outline in the lamp's local horizontal plane,
    /// ordered counter-clockwise.
    pub fn outline(&self, n: usize) -> Vec<(f64, f64)> {
        match *self {
            LampShape::Circle { diameter } => {
                let r = diameter / 2.0;
                (0..n)
                    .map(|k| {
                        let th = 2.0 * PI * k as f64 / n as f64;
                        (r * th.cos(), r * th.sin())
                    })
                    .collect()
            }
            LampShape::Square { side } => {
                let h = side / 2.0;
                let corners = [(-h, -h), (h, -h), (h, h), (-h, h)];
                let per_edge = (n / 4).max(1);
                let mut pts = Vec::with_capacity(per_edge * 4);
                for e in 0..4 {
                    let (x0, y0) = corners[e];
                    let (x1, y1) = corners[(e + 1) % 4];
                    for k in 0..per_edge {
                        let s = k as f64 / per_edge as f64;
                        pts.push((x0 + s * (x1 - x0), y0 + s * (y1 - y0)));
                    }
                }
                pts
            }
        }
    }
}

/// A modulated LED transmitter.
#[derive(Debug, Clone, PartialEq)]
pub struct LedLamp {
    pub uid: u8,
    pub center: Vec3,
    pub shape: LampShape,
    /// Chips per second.
    pub chip_rate: f64,
    /// Fraction of pixel full scale when fully on.
    pub radiance: f64,
    /// `false` models a plain always-on luminaire.
    pub modulated: bool,
}

impl LedLamp {
    pub fn circle(uid: u8, center: Vec3) -> Self {
        Self {
            uid,
            center,
            shape: LampShape::Circle {
                diameter: DEFAULT_LAMP_DIAMETER,
            },
            chip_rate: DEFAULT_CHIP_RATE,
            radiance: DEFAULT_RADIANCE,
            modulated: true,
        }
    }

    fn validate(&self) -> Result<(), SceneError> {
        let size = self.shape.size();
        if !(size > 0.0) {
            return Err(invalid(format!("lamp {} has nonpositive size {size}", self.uid)));
        }
        if !(self.chip_rate > 0.0) {
            return Err(invalid(format!(
                "lamp {} has nonpositive chip_rate {}",
                self.uid, self.chip_rate
            )));
        }
        if !(self.center.z > 0.0) {
            return Err(invalid(format!("lamp {} must be above the floor", self.uid)));
        }
        if !(self.radiance > 0.0 && self.radiance <= 1.0) {
            return Err(invalid(format!(
                "lamp {} radiance {} outside (0, 1]",
                self.uid, self.radiance
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LampRecord {
    pub position: Vec3,
    pub shape: LampShape,
}

/// The pre-surveyed uid → world position map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UidDatabase {
    entries: BTreeMap<u8, LampRecord>,
}

impl UidDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_lamps(lamps: &[LedLamp]) -> Result<Self, SceneError> {
        let mut db = Self::new();
        for lamp in lamps {
            db.register(lamp.uid, lamp.center, lamp.shape)?;
        }
        Ok(db)
    }

    pub fn register(&mut self, uid: u8, position: Vec3, shape: LampShape) -> Result<(), SceneError> {
        if self.entries.contains_key(&uid) {
            return Err(invalid(format!("duplicate lamp uid {uid}")));
        }
        self.entries.insert(uid, LampRecord { position, shape });
        Ok(())
    }

    pub fn lookup(&self, uid: u8) -> Result<&LampRecord, UnknownUid> {
        self.entries.get(&uid).ok_or(UnknownUid(uid))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u8, &LampRecord)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Smartphone,
    Robot,
}

impl AgentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AgentKind::Smartphone => "smartphone",
            AgentKind::Robot => "robot",
        }
    }
}

/// Scripted position target at a given time; the trajectory is linear
/// between waypoints and holds the last one afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub agent_id: String,
    pub kind: AgentKind,
    /// Camera pose. The robot camera looks straight up; smartphones may tilt.
    pub pose: Pose,
    pub camera: CameraIntrinsics,
    /// Standard deviation of attitude sensor noise, radians.
    pub imu_noise_sigma: f64,
    /// Whether the heading reading can be relied on (magnetometer available).
    pub yaw_trusted: bool,
    pub waypoints: Vec<Waypoint>,
}

impl AgentState {
    /// Height the positioning solver may assume, if the platform fixes it.
    pub fn known_height(&self) -> Option<f64> {
        match self.kind {
            AgentKind::Robot => Some(self.pose.position.z),
            AgentKind::Smartphone => None,
        }
    }

    pub fn scripted_target(&self, t: f64) -> Option<(f64, f64)> {
        let first = self.waypoints.first()?;
        if t <= first.t {
            return Some((first.x, first.y));
        }
        for w in self.waypoints.windows(2) {
            let (a, b) = (w[0], w[1]);
            if t <= b.t {
                let s = if b.t > a.t { (t - a.t) / (b.t - a.t) } else { 1.0 };
                return Some((a.x + s * (b.x - a.x), a.y + s * (b.y - a.y)));
            }
        }
        let last = self.waypoints.last()?;
        Some((last.x, last.y))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FloorBounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl FloorBounds {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn clamp(&self, x: f64, y: f64) -> (f64, f64) {
        (x.clamp(self.x_min, self.x_max), y.clamp(self.y_min, self.y_max))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub lamps: Vec<LedLamp>,
    pub agents: Vec<AgentState>,
    pub duration_s: f64,
    pub frame_rate_hz: f64,
    /// Gaussian pixel noise, fraction of full scale.
    pub pixel_noise_sigma: f64,
    /// Background level, fraction of full scale.
    pub ambient_level: f64,
    pub rng_seed: u64,
    /// Robot pursues the smartphone's published fix when set.
    pub follow_mode: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario::from_file_spec(ScenarioFile::default()).expect("built-in scenario is valid")
    }
}

impl Scenario {
    pub fn database(&self) -> UidDatabase {
        UidDatabase::from_lamps(&self.lamps).expect("validated scenario has unique uids")
    }

    pub fn agent(&self, id: &str) -> Option<&AgentState> {
        self.agents.iter().find(|a| a.agent_id == id)
    }

    /// Lamp bounding box grown by one metre on every side.
    pub fn floor_bounds(&self) -> FloorBounds {
        let mut b = FloorBounds {
            x_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_min: f64::INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        for l in &self.lamps {
            b.x_min = b.x_min.min(l.center.x);
            b.x_max = b.x_max.max(l.center.x);
            b.y_min = b.y_min.min(l.center.y);
            b.y_max = b.y_max.max(l.center.y);
        }
        FloorBounds {
            x_min: b.x_min - 1.0,
            x_max: b.x_max + 1.0,
            y_min: b.y_min - 1.0,
            y_max: b.y_max + 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.lamps.is_empty() {
            return Err(invalid("scenario needs at least one lamp".into()));
        }
        if self.agents.is_empty() {
            return Err(invalid("scenario needs at least one agent".into()));
        }
        for lamp in &self.lamps {
            lamp.validate()?;
        }
        UidDatabase::from_lamps(&self.lamps)?;
        let mut ids = HashSet::new();
        for a in &self.agents {
            if !ids.insert(a.agent_id.as_str()) {
                return Err(invalid(format!("duplicate agent id {:?}", a.agent_id)));
            }
            a.camera
                .validate()
                .map_err(|e| invalid(format!("agent {:?}: {e}", a.agent_id)))?;
            if a.imu_noise_sigma < 0.0 {
                return Err(invalid(format!("agent {:?}: negative imu noise", a.agent_id)));
            }
        }
        if !(self.frame_rate_hz > 0.0) {
            return Err(invalid("frame_rate_hz must be positive".into()));
        }
        if !(self.duration_s > 0.0) {
            return Err(invalid("duration_s must be positive".into()));
        }
        if !(self.pixel_noise_sigma >= 0.0) || !(0.0..1.0).contains(&self.ambient_level) {
            return Err(invalid("noise and ambient levels must be fractions of full scale".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        let file: ScenarioFile = serde_json::from_str(text)?;
        Self::from_file_spec(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file_spec()).expect("scenario serializes")
    }

    fn from_file_spec(file: ScenarioFile) -> Result<Self, SceneError> {
        let lamps = file
            .lamps
            .unwrap_or_else(default_lamp_specs)
            .into_iter()
            .map(LampSpec::into_lamp)
            .collect::<Vec<_>>();
        let agents = file
            .agents
            .unwrap_or_else(default_agent_specs)
            .into_iter()
            .map(AgentSpec::into_agent)
            .collect::<Vec<_>>();
        let sim = file.sim.unwrap_or_default();
        let scenario = Scenario {
            lamps,
            agents,
            duration_s: sim.duration_s,
            frame_rate_hz: sim.frame_rate_hz,
            pixel_noise_sigma: sim.pixel_noise_sigma,
            ambient_level: sim.ambient_level,
            rng_seed: sim.rng_seed,
            follow_mode: sim.follow_mode,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    fn to_file_spec(&self) -> ScenarioFile {
        ScenarioFile {
            lamps: Some(
                self.lamps
                    .iter()
                    .map(|l| LampSpec {
                        uid: l.uid,
                        center: [l.center.x, l.center.y, l.center.z],
                        shape: l.shape,
                        chip_rate: l.chip_rate,
                        radiance: l.radiance,
                        modulated: l.modulated,
                    })
                    .collect(),
            ),
            agents: Some(
                self.agents
                    .iter()
                    .map(|a| AgentSpec {
                        id: a.agent_id.clone(),
                        kind: a.kind,
                        position: Some([a.pose.position.x, a.pose.position.y, a.pose.position.z]),
                        orientation_deg: [
                            a.pose.roll.to_degrees(),
                            a.pose.pitch.to_degrees(),
                            a.pose.yaw.to_degrees(),
                        ],
                        camera: a.camera,
                        imu_noise_sigma_deg: a.imu_noise_sigma.to_degrees(),
                        yaw_trusted: a.yaw_trusted,
                        waypoints: a.waypoints.clone(),
                    })
                    .collect(),
            ),
            sim: Some(SimSpec {
                duration_s: self.duration_s,
                frame_rate_hz: self.frame_rate_hz,
                pixel_noise_sigma: self.pixel_noise_sigma,
                ambient_level: self.ambient_level,
                rng_seed: self.rng_seed,
                follow_mode: self.follow_mode,
            }),
        }
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, SceneError> {
    let text = std::fs::read_to_string(path)?;
    Scenario::from_json(&text)
}

fn invalid(msg: String) -> SceneError {
    SceneError::Validation(msg)
}

// ---------------------------------------------------------------------------
// File schema

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lamps: Option<Vec<LampSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    agents: Option<Vec<AgentSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sim: Option<SimSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LampSpec {
    uid: u8,
    center: [f64; 3],
    #[serde(default = "default_shape")]
    shape: LampShape,
    #[serde(default = "default_chip_rate")]
    chip_rate: f64,
    #[serde(default = "default_radiance")]
    radiance: f64,
    #[serde(default = "yes")]
    modulated: bool,
}

impl LampSpec {
    fn into_lamp(self) -> LedLamp {
        LedLamp {
            uid: self.uid,
            center: Vec3::from(self.center),
            shape: self.shape,
            chip_rate: self.chip_rate,
            radiance: self.radiance,
            modulated: self.modulated,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentSpec {
    id: String,
    kind: AgentKind,
    /// Camera position; robots default to the fixed camera height.
    #[serde(default)]
    position: Option<[f64; 3]>,
    #[serde(default)]
    orientation_deg: [f64; 3],
    #[serde(default)]
    camera: CameraIntrinsics,
    #[serde(default)]
    imu_noise_sigma_deg: f64,
    #[serde(default = "yes")]
    yaw_trusted: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    waypoints: Vec<Waypoint>,
}

impl AgentSpec {
    fn into_agent(self) -> AgentState {
        let default_z = match self.kind {
            AgentKind::Robot => ROBOT_CAMERA_HEIGHT,
            AgentKind::Smartphone => 1.0,
        };
        let p = self.position.unwrap_or([0.0, 0.0, default_z]);
        let [r, pi, y] = self.orientation_deg;
        AgentState {
            agent_id: self.id,
            kind: self.kind,
            pose: Pose::new(Vec3::from(p), r.to_radians(), pi.to_radians(), y.to_radians()),
            camera: self.camera,
            imu_noise_sigma: self.imu_noise_sigma_deg.to_radians(),
            yaw_trusted: self.yaw_trusted,
            waypoints: self.waypoints,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SimSpec {
    duration_s: f64,
    frame_rate_hz: f64,
    pixel_noise_sigma: f64,
    ambient_level: f64,
    rng_seed: u64,
    follow_mode: bool,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            duration_s: 30.0,
            frame_rate_hz: 30.0,
            pixel_noise_sigma: 0.0,
            ambient_level: 0.05,
            rng_seed: 42,
            follow_mode: true,
        }
    }
}

fn default_shape() -> LampShape {
    LampShape::Circle {
        diameter: DEFAULT_LAMP_DIAMETER,
    }
}

fn default_chip_rate() -> f64 {
    DEFAULT_CHIP_RATE
}

fn default_radiance() -> f64 {
    DEFAULT_RADIANCE
}

fn yes() -> bool {
    true
}

/// Four lamps at (+-1, +-1, 2.5) m, uids 1..=4 counter-clockwise from (-1, -1).
fn default_lamp_specs() -> Vec<LampSpec> {
    [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| LampSpec {
            uid: i as u8 + 1,
            center: [x, y, DEFAULT_LAMP_HEIGHT],
            shape: default_shape(),
            chip_rate: DEFAULT_CHIP_RATE,
            radiance: DEFAULT_RADIANCE,
            modulated: true,
        })
        .collect()
}

/// Robot 3 m west of a stationary smartphone, both on the y = 1 lamp row.
fn default_agent_specs() -> Vec<AgentSpec> {
    vec![
        AgentSpec {
            id: "robot".into(),
            kind: AgentKind::Robot,
            position: Some([-1.8, 1.0, ROBOT_CAMERA_HEIGHT]),
            orientation_deg: [0.0, 0.0, 0.0],
            camera: CameraIntrinsics::default(),
            imu_noise_sigma_deg: 0.0,
            yaw_trusted: true,
            waypoints: Vec::new(),
        },
        AgentSpec {
            id: "phone".into(),
            kind: AgentKind::Smartphone,
            position: Some([1.2, 1.0, 1.0]),
            orientation_deg: [0.0, 0.0, 0.0],
            camera: CameraIntrinsics::default(),
            imu_noise_sigma_deg: 0.0,
            yaw_trusted: true,
            waypoints: Vec::new(),
        },
    ]
}
