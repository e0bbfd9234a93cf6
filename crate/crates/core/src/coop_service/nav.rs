//! Go-to-goal control for a unicycle robot.

use crate::scene::{normalize_angle, Pose};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavParams {
    pub stop_radius: f64,
    pub v_max: f64,
    pub omega_max: f64,
    pub k_rho: f64,
    pub k_alpha: f64,
}

impl Default for NavParams {
    fn default() -> Self {
        Self {
            stop_radius: 0.15,
            v_max: 0.5,
            omega_max: 1.5,
            k_rho: 0.8,
            k_alpha: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VelocityCommand {
    /// Forward speed, m/s.
    pub v: f64,
    /// Turn rate, rad/s.
    pub omega: f64,
}

pub fn nav_step(robot: &Pose, goal: (f64, f64), p: &NavParams) -> VelocityCommand {
    let dx = goal.0 - robot.position.x;
    let dy = goal.1 - robot.position.y;
    let rho = dx.hypot(dy);
    if rho < p.stop_radius {
        return VelocityCommand::default();
    }
    let alpha = normalize_angle(dy.atan2(dx) - robot.yaw);
    VelocityCommand {
        v: (p.k_rho * rho).min(p.v_max) * alpha.cos().max(0.0),
        omega: (p.k_alpha * alpha).clamp(-p.omega_max, p.omega_max),
    }
}

/// Exact unicycle motion over `dt` under a constant command.
pub fn integrate(pose: &Pose, cmd: VelocityCommand, dt: f64) -> Pose {
    let mut out = *pose;
    let th = pose.yaw;
    if cmd.omega.abs() < 1e-12 {
        out.position.x += cmd.v * dt * th.cos();
        out.position.y += cmd.v * dt * th.sin();
    } else {
        let th1 = th + cmd.omega * dt;
        let r = cmd.v / cmd.omega;
        out.position.x += r * (th1.sin() - th.sin());
        out.position.y -= r * (th1.cos() - th.cos());
        out.yaw = normalize_angle(th1);
    }
    out
}
