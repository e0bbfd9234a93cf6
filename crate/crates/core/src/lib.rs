//! Cooperative visible light positioning: modulated LED beacons seen by
//! rolling-shutter cameras, decoded into lamp identities, turned into
//! position fixes and shared between a robot and a smartphone.

pub mod coop_service;
pub mod occ_link;
pub mod rs_camera;
pub mod scene;
pub mod vision;
pub mod vlp_solver;
