//! Cooperative layer: the simulation loop that positions every agent each
//! tick, the robot's pursuit of the smartphone, and the network service
//! that streams fixes to clients and takes goals and mode changes back.

pub mod nav;
pub mod protocol;
pub mod server;
pub mod sim;

pub use nav::{nav_step, NavParams, VelocityCommand};
pub use protocol::{
    decode_message, encode_json, encode_message, ControlCommand, ControlMessage, DiagMessage, FixMessage,
    MalformedMessage, Message, NavGoal, SceneSnapshot,
};
pub use server::{serve, ServeError, ServeOptions, ServerHandle};
pub use sim::{run_offline, write_metrics, AgentTick, MetricsRow, SimOptions, Simulation};
