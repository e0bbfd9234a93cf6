//! The simulation loop: ground truth, rendering, perception, positioning
//! and the robot's pursuit of the smartphone.

use std::io::Write;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use super::nav::{integrate, nav_step, NavParams, VelocityCommand};
use super::protocol::{AgentTruth, DiagMessage, FixMessage, Message, NavGoal, SceneAgent, SceneLamp, SceneSnapshot};
use crate::rs_camera::render_view;
use crate::scene::{AgentKind, AgentState, Pose, Scenario, UidDatabase};
use crate::vision::{LampTracker, TrackerConfig};
use crate::vlp_solver::{select_scheme, ImuReading, LedObservation, PositionFix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub nav: NavParams,
    /// Time constant of the smartphone's pursuit of a dragged target.
    pub phone_lag_s: f64,
    /// How long the robot keeps its last command while it has no fix.
    pub command_hold_s: f64,
    pub tracker: TrackerConfig,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            nav: NavParams::default(),
            phone_lag_s: 0.3,
            command_hold_s: 2.0,
            tracker: TrackerConfig::default(),
        }
    }
}

#[derive(Debug)]
struct AgentRuntime {
    truth: Pose,
    tracker: LampTracker,
    render_rng: ChaCha8Rng,
    imu_rng: ChaCha8Rng,
    last_fix: Option<FixMessage>,
    command: VelocityCommand,
    command_tick: Option<u64>,
}

/// What one agent produced in one tick.
#[derive(Debug, Clone)]
pub struct AgentTick {
    pub agent_id: String,
    pub kind: AgentKind,
    pub t_ms: u64,
    pub truth: Pose,
    pub fix: Option<PositionFix>,
    pub n_rois: usize,
    pub n_decoded: usize,
    pub message: Message,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub t_ms: u64,
    pub agent_id: String,
    pub truth_x: f64,
    pub truth_y: f64,
    pub truth_z: f64,
    pub fix_x: Option<f64>,
    pub fix_y: Option<f64>,
    pub fix_z: Option<f64>,
    pub err_m: Option<f64>,
    pub scheme: Option<&'static str>,
    pub residual_px: Option<f64>,
    pub n_leds: usize,
    pub decode_ok: bool,
}

impl From<&AgentTick> for MetricsRow {
    fn from(a: &AgentTick) -> Self {
        let p = a.truth.position;
        let f = a.fix.as_ref();
        MetricsRow {
            t_ms: a.t_ms,
            agent_id: a.agent_id.clone(),
            truth_x: p.x,
            truth_y: p.y,
            truth_z: p.z,
            fix_x: f.map(|f| f.position.x),
            fix_y: f.map(|f| f.position.y),
            fix_z: f.map(|f| f.position.z),
            err_m: f.map(|f| (f.position - p).norm()),
            scheme: f.map(|f| f.scheme.as_str()),
            residual_px: f.map(|f| f.residual_px),
            n_leds: f.map_or(0, |f| f.n_leds),
            decode_ok: a.n_decoded > 0,
        }
    }
}

pub fn write_metrics<W: Write>(rows: &[MetricsRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Owns all mutable simulation state. Not shared: the server drives it
/// from a single thread.
#[derive(Debug)]
pub struct Simulation {
    scenario: Scenario,
    db: UidDatabase,
    opts: SimOptions,
    tick: u64,
    agents: Vec<AgentRuntime>,
    follow: bool,
    scripted: bool,
    paused: bool,
    goal: Option<NavGoal>,
}

impl Simulation {
    pub fn new(scenario: Scenario, opts: SimOptions) -> Self {
        let agents = scenario
            .agents
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let mut render_rng = ChaCha8Rng::seed_from_u64(scenario.rng_seed);
                render_rng.set_stream(2 * i as u64);
                let mut imu_rng = ChaCha8Rng::seed_from_u64(scenario.rng_seed);
                imu_rng.set_stream(2 * i as u64 + 1);
                AgentRuntime {
                    truth: a.pose,
                    tracker: LampTracker::new(opts.tracker),
                    render_rng,
                    imu_rng,
                    last_fix: None,
                    command: VelocityCommand::default(),
                    command_tick: None,
                }
            })
            .collect();
        Self {
            db: scenario.database(),
            follow: scenario.follow_mode,
            scripted: false,
            paused: false,
            goal: None,
            opts,
            tick: 0,
            agents,
            scenario,
        }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn tick_index(&self) -> u64 {
        self.tick
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.scenario.frame_rate_hz
    }

    /// Milliseconds since start for tick `k`, floored.
    pub fn t_ms_of(&self, k: u64) -> u64 {
        (k as f64 * 1000.0 / self.scenario.frame_rate_hz).floor() as u64
    }

    pub fn paused(&self) -> bool {
        self.paused
    }

    pub fn follow_mode(&self) -> bool {
        self.follow
    }

    pub fn scripted_mode(&self) -> bool {
        self.scripted
    }

    pub fn set_scripted_mode(&mut self, on: bool) {
        self.scripted = on;
    }

    pub fn truth(&self, agent_id: &str) -> Option<Pose> {
        let i = self.scenario.agents.iter().position(|a| a.agent_id == agent_id)?;
        Some(self.agents[i].truth)
    }

    pub fn latest_fix(&self, agent_id: &str) -> Option<&FixMessage> {
        let i = self.scenario.agents.iter().position(|a| a.agent_id == agent_id)?;
        self.agents[i].last_fix.as_ref()
    }

    pub fn goal(&self) -> Option<NavGoal> {
        self.goal
    }

    /// Applies a client message. Goals are clamped to the floor; the last
    /// one applied wins.
    pub fn apply(&mut self, msg: &Message) {
        use super::protocol::ControlCommand::*;
        match msg {
            Message::Goal(g) => {
                let (x, y) = self.scenario.floor_bounds().clamp(g.x, g.y);
                self.goal = Some(NavGoal { x, y, ..*g });
            }
            Message::Control(c) => match c.command {
                Pause => self.paused = true,
                Resume => self.paused = false,
                FollowMode => self.follow = c.enabled,
                ScriptedMode => self.scripted = c.enabled,
            },
            Message::Fix(_) | Message::Diag(_) | Message::Scene(_) => {}
        }
    }

    pub fn snapshot(&self) -> SceneSnapshot {
        SceneSnapshot {
            t_ms: self.t_ms_of(self.tick),
            lamps: self
                .scenario
                .lamps
                .iter()
                .map(|l| SceneLamp {
                    uid: l.uid,
                    x: l.center.x,
                    y: l.center.y,
                    shape: l.shape,
                })
                .collect(),
            floor: self.scenario.floor_bounds(),
            agents: self
                .scenario
                .agents
                .iter()
                .zip(&self.agents)
                .map(|(a, rt)| SceneAgent {
                    agent_id: a.agent_id.clone(),
                    kind: a.kind,
                    fix: rt.last_fix.clone(),
                    truth: Some(AgentTruth {
                        x: rt.truth.position.x,
                        y: rt.truth.position.y,
                        z: rt.truth.position.z,
                        yaw: rt.truth.yaw,
                    }),
                })
                .collect(),
            follow_mode: self.follow,
            scripted_mode: self.scripted,
            paused: self.paused,
        }
    }

    /// Runs one tick and returns one record per agent, in scenario order.
    pub fn step(&mut self) -> Vec<AgentTick> {
        let k = self.tick;
        let t = k as f64 * self.dt();
        let t_ms = self.t_ms_of(k);
        let scenario = &self.scenario;
        let db = &self.db;
        let out: Vec<AgentTick> = scenario
            .agents
            .par_iter()
            .zip(self.agents.par_iter_mut())
            .map(|(spec, rt)| perceive(scenario, db, spec, rt, t, t_ms))
            .collect();
        for (rt, rec) in self.agents.iter_mut().zip(&out) {
            if let Message::Fix(f) = &rec.message {
                rt.last_fix = Some(f.clone());
            }
        }
        self.advance(k, t, &out);
        self.tick += 1;
        out
    }

    fn human_fix(&self) -> Option<(f64, f64)> {
        self.scenario
            .agents
            .iter()
            .zip(&self.agents)
            .find(|(a, _)| a.kind == AgentKind::Smartphone)
            .and_then(|(_, rt)| rt.last_fix.as_ref().map(|f| (f.x, f.y)))
    }

    fn advance(&mut self, k: u64, t: f64, ticks: &[AgentTick]) {
        let dt = self.dt();
        let goal = if self.follow {
            self.human_fix()
        } else {
            self.goal.map(|g| (g.x, g.y))
        };
        let hold_ticks = (self.opts.command_hold_s / dt).round() as u64;
        let lag = 1.0 - (-dt / self.opts.phone_lag_s).exp();
        let drag = if self.scripted { None } else { self.goal };
        for ((spec, rt), rec) in self.scenario.agents.iter().zip(&mut self.agents).zip(ticks) {
            match spec.kind {
                AgentKind::Robot => {
                    match (goal, &rec.fix) {
                        (Some(g), Some(fix)) => {
                            rt.command = nav_step(&fix.pose(), g, &self.opts.nav);
                            rt.command_tick = Some(k);
                        }
                        (Some(_), None) if rt.command_tick.is_some_and(|c| k - c <= hold_ticks) => {}
                        _ => rt.command = VelocityCommand::default(),
                    }
                    rt.truth = integrate(&rt.truth, rt.command, dt);
                }
                AgentKind::Smartphone => {
                    if let Some(g) = drag {
                        let p = &mut rt.truth.position;
                        p.x += (g.x - p.x) * lag;
                        p.y += (g.y - p.y) * lag;
                    } else if let Some((x, y)) = spec.scripted_target(t + dt) {
                        rt.truth.position.x = x;
                        rt.truth.position.y = y;
                    }
                }
            }
        }
    }
}

fn perceive(
    scenario: &Scenario,
    db: &UidDatabase,
    spec: &AgentState,
    rt: &mut AgentRuntime,
    t: f64,
    t_ms: u64,
) -> AgentTick {
    let frame = render_view(scenario, &rt.truth, &spec.camera, t, &mut rt.render_rng);
    let rois = rt.tracker.process(&frame);
    let decoded: Vec<_> = rois
        .iter()
        .filter_map(|r| Some((r, db.lookup(r.uid?).ok()?)))
        .collect();
    let obs: Vec<LedObservation> = decoded
        .iter()
        .filter(|(r, _)| !r.roi.touches_border)
        .map(|(r, rec)| LedObservation {
            uid: r.uid.unwrap(),
            centroid_px: r.roi.centroid,
            equiv_diameter_px: r.roi.equiv_diameter,
            world: rec.position,
            physical_diameter_m: rec.shape.equivalent_diameter(),
        })
        .collect();
    let mut noise = || spec.imu_noise_sigma * rt.imu_rng.sample::<f64, _>(StandardNormal);
    let imu = ImuReading {
        roll: rt.truth.roll + noise(),
        pitch: rt.truth.pitch + noise(),
        yaw: rt.truth.yaw + noise(),
        yaw_trusted: spec.yaw_trusted,
    };
    let known_height = match spec.kind {
        AgentKind::Robot => Some(rt.truth.position.z),
        AgentKind::Smartphone => None,
    };
    let result = if obs.is_empty() {
        Err(format!("{} ROI(s), {} decoded, none usable", rois.len(), decoded.len()))
    } else {
        select_scheme(&obs, &imu, &spec.camera, known_height)
            .map_err(|e| format!("{} observation(s): {e}", obs.len()))
    };
    let (fix, message) = match result {
        Ok(fix) => {
            let fix = fix.stamped(&spec.agent_id, t);
            let msg = Message::Fix(FixMessage {
                agent_id: spec.agent_id.clone(),
                kind: spec.kind,
                t_ms,
                x: fix.position.x,
                y: fix.position.y,
                z: fix.position.z,
                yaw: fix.yaw,
                scheme: fix.scheme,
                residual_px: fix.residual_px,
                n_leds: fix.n_leds,
            });
            (Some(fix), msg)
        }
        Err(detail) => (
            None,
            Message::Diag(DiagMessage {
                agent_id: spec.agent_id.clone(),
                kind: spec.kind,
                t_ms,
                reason: "NoFix".into(),
                detail,
                n_rois: rois.len(),
                n_decoded: decoded.len(),
            }),
        ),
    };
    AgentTick {
        agent_id: spec.agent_id.clone(),
        kind: spec.kind,
        t_ms,
        truth: rt.truth,
        fix,
        n_rois: rois.len(),
        n_decoded: decoded.len(),
        message,
    }
}

/// Runs `ticks` ticks with no clients attached.
pub fn run_offline(scenario: Scenario, ticks: u64, opts: SimOptions) -> Vec<AgentTick> {
    let mut sim = Simulation::new(scenario, opts);
    sim.set_scripted_mode(true);
    (0..ticks).flat_map(|_| sim.step()).collect()
}
