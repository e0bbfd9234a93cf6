use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlp_core::coop_service::nav::{nav_step, NavParams};
use vlp_core::coop_service::protocol::*;
use vlp_core::occ_link::{decode_chips, encode_uid, ChipSequence, FRAME_CHIPS};
use vlp_core::rs_camera::{project_point, render_view, CameraIntrinsics};
use vlp_core::scene::{AgentKind, FloorBounds, LampShape, LedLamp, Pose, Scenario, Vec3};
use vlp_core::vision::{detect_rois, VisionConfig};
use vlp_core::vlp_solver::{solve_multi_led, LedObservation, Scheme};

fn lamp_scenario(lamps: Vec<LedLamp>, noise: f64, ambient: f64) -> Scenario {
    let mut s = Scenario::default();
    s.lamps = lamps;
    s.pixel_noise_sigma = noise;
    s.ambient_level = ambient;
    s
}

fn scenario_json(lamps: &[(u8, f64, f64, bool, f64)], agents: &[(f64, f64, f64, f64)], seed: u64) -> String {
    let lamps: Vec<String> = lamps
        .iter()
        .map(|&(uid, x, y, square, rate)| {
            let shape = if square {
                r#"{"type":"square","side":0.2}"#.to_string()
            } else {
                r#"{"type":"circle","diameter":0.15}"#.to_string()
            };
            format!(r#"{{"uid":{uid},"center":[{x},{y},2.5],"shape":{shape},"chip_rate":{rate}}}"#)
        })
        .collect();
    let agents: Vec<String> = agents
        .iter()
        .enumerate()
        .map(|(i, &(x, y, roll, yaw))| {
            let kind = if i % 2 == 0 { "robot" } else { "smartphone" };
            format!(r#"{{"id":"a{i}","kind":"{kind}","position":[{x},{y},0.5],"orientation_deg":[{roll},0,{yaw}]}}"#)
        })
        .collect();
    format!(
        r#"{{"lamps":[{}],"agents":[{}],"sim":{{"rng_seed":{seed},"pixel_noise_sigma":0.01}}}}"#,
        lamps.join(","),
        agents.join(",")
    )
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 64,
        failure_persistence: Some(Box::new(proptest::test_runner::FileFailurePersistence::Off)),
        ..ProptestConfig::default()
    })]

    #[test]
    fn scenario_reserialization_is_stable(
        uids in proptest::collection::btree_set(any::<u8>(), 1..6),
        coords in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0, any::<bool>(), 500.0f64..5000.0), 6),
        agents in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -30.0f64..30.0, -180.0f64..180.0), 1..4),
        seed in any::<u64>(),
    ) {
        let lamps: Vec<_> = uids.iter().zip(&coords).map(|(&u, &(x, y, sq, r))| (u, x, y, sq, r)).collect();
        let s1 = Scenario::from_json(&scenario_json(&lamps, &agents, seed)).unwrap();
        let mut s2 = Scenario::from_json(&s1.to_json()).unwrap();
        prop_assert_eq!(s1.agents.len(), s2.agents.len());
        for (a, b) in s1.agents.iter().zip(&mut s2.agents) {
            prop_assert!((a.pose.roll - b.pose.roll).abs() < 1e-12);
            prop_assert!((a.pose.yaw - b.pose.yaw).abs() < 1e-12);
            b.pose.roll = a.pose.roll;
            b.pose.pitch = a.pose.pitch;
            b.pose.yaw = a.pose.yaw;
            b.imu_noise_sigma = a.imu_noise_sigma;
        }
        prop_assert_eq!(s1, s2);
    }

    #[test]
    fn chip_string_round_trip(chips in proptest::collection::vec(any::<bool>(), 0..200)) {
        let seq = ChipSequence::new(chips.clone());
        let back: ChipSequence = seq.to_string().parse().unwrap();
        prop_assert_eq!(back.chips, chips);
    }

    #[test]
    fn any_window_of_two_frames_decodes(uid in any::<u8>(), start in 0usize..21, extra in 0usize..21) {
        let mut stream = Vec::new();
        for _ in 0..4 {
            stream.extend(encode_uid(uid).chips);
        }
        let window = &stream[start..start + 2 * FRAME_CHIPS + extra];
        let r = decode_chips(window).unwrap();
        prop_assert_eq!(r.uid, uid);
        prop_assert_eq!(r.confidence, 1.0);
        prop_assert_eq!(r.sync_offset, (FRAME_CHIPS - start) % FRAME_CHIPS);
    }

    #[test]
    fn nav_command_bounds(x in -5.0f64..5.0, y in -5.0f64..5.0, yaw in -4.0f64..4.0, gx in -5.0f64..5.0, gy in -5.0f64..5.0) {
        let p = NavParams::default();
        let c = nav_step(&Pose::level(Vec3::new(x, y, 0.2), yaw), (gx, gy), &p);
        prop_assert!(c.v >= 0.0 && c.v <= p.v_max + 1e-12);
        prop_assert!(c.omega.abs() <= p.omega_max + 1e-12);
        if (gx - x).hypot(gy - y) < p.stop_radius {
            prop_assert_eq!((c.v, c.omega), (0.0, 0.0));
        }
    }

    #[test]
    fn outside_lamps_is_exactly_zero(x in -0.3f64..0.3, y in -0.3f64..0.3, yaw in -3.0f64..3.0, t in 0.0f64..1.0) {
        let lamp = LedLamp::circle(0x5A, Vec3::new(0.0, 0.0, 2.5));
        let s = lamp_scenario(vec![lamp.clone()], 0.0, 0.0);
        let pose = Pose::new(Vec3::new(x, y, 1.2), 0.05, -0.03, yaw);
        let k = CameraIntrinsics::default();
        let frame = render_view(&s, &pose, &k, t, &mut ChaCha8Rng::seed_from_u64(1));
        let (cu, cv) = project_point(&pose, &k, &lamp.center).unwrap();
        // the lamp spans about 110 px here; 80 px past its centre is outside
        for v in 0..k.height {
            for u in 0..k.width {
                if ((u as f64 - cu).powi(2) + (v as f64 - cv).powi(2)).sqrt() > 80.0 {
                    prop_assert_eq!(frame.image.get(u, v), 0.0);
                }
            }
        }
    }

    #[test]
    fn renders_are_deterministic(seed in any::<u64>(), t in 0.0f64..2.0) {
        let s = lamp_scenario(vec![LedLamp::circle(3, Vec3::new(0.0, 0.0, 2.5))], 0.05, 0.05);
        let pose = Pose::level(Vec3::new(0.1, 0.0, 1.0), 0.2);
        let k = CameraIntrinsics::default();
        let a = render_view(&s, &pose, &k, t, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = render_view(&s, &pose, &k, t, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a.image.data, b.image.data);
    }

    #[test]
    fn message_round_trip(msg in arb_message()) {
        let line = encode_message(&msg);
        let back = decode_message(&line).unwrap();
        prop_assert_eq!(&back, &msg);
        prop_assert_eq!(encode_message(&back), line);
    }

    #[test]
    fn multi_led_ignores_uid_labels(
        x in -0.8f64..0.8, y in -0.8f64..0.8, z in 0.2f64..1.2,
        roll in -0.15f64..0.15, pitch in -0.15f64..0.15, yaw in -3.0f64..3.0,
        perm in Just([0usize, 1, 2, 3]).prop_shuffle(),
        labels in proptest::collection::btree_set(any::<u8>(), 4),
    ) {
        let pose = Pose::new(Vec3::new(x, y, z), roll, pitch, yaw);
        let k = CameraIntrinsics::default();
        let grid = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
        let obs = |uids: [u8; 4]| -> Vec<LedObservation> {
            grid.iter()
                .zip(uids)
                .map(|(&(gx, gy), uid)| {
                    let w = Vec3::new(gx, gy, 2.5);
                    LedObservation {
                        uid,
                        centroid_px: project_point(&pose, &k, &w).unwrap(),
                        equiv_diameter_px: 50.0,
                        world: w,
                        physical_diameter_m: 0.175,
                    }
                })
                .collect()
        };
        let base = solve_multi_led(&obs([1, 2, 3, 4]), &k, None).unwrap().0;
        let labels: Vec<u8> = labels.into_iter().collect();
        let relabeled = [labels[perm[0]], labels[perm[1]], labels[perm[2]], labels[perm[3]]];
        let other = solve_multi_led(&obs(relabeled), &k, None).unwrap().0;
        prop_assert_eq!(other.scheme, Scheme::MultiLed);
        prop_assert!((base.position - other.position).norm() <= 1e-12,
            "{:e}", (base.position - other.position).norm());
    }
}

fn arb_kind() -> impl Strategy<Value = AgentKind> {
    prop_oneof![Just(AgentKind::Robot), Just(AgentKind::Smartphone)]
}

fn arb_scheme() -> impl Strategy<Value = Scheme> {
    prop_oneof![Just(Scheme::SingleLed), Just(Scheme::DoubleLed), Just(Scheme::MultiLed)]
}

fn arb_f64() -> impl Strategy<Value = f64> {
    prop_oneof![-1e3f64..1e3, any::<f64>().prop_filter("finite", |x| x.is_finite())]
}

fn arb_fix() -> impl Strategy<Value = FixMessage> {
    (
        "[a-z0-9_\u{e9}\"\\\\]{0,12}",
        arb_kind(),
        any::<u64>(),
        (arb_f64(), arb_f64(), arb_f64(), arb_f64()),
        arb_scheme(),
        0.0f64..100.0,
        1usize..10,
    )
        .prop_map(|(agent_id, kind, t_ms, (x, y, z, yaw), scheme, residual_px, n_leds)| FixMessage {
            agent_id,
            kind,
            t_ms,
            x,
            y,
            z,
            yaw,
            scheme,
            residual_px,
            n_leds,
        })
}

fn arb_message() -> impl Strategy<Value = Message> {
    prop_oneof![
        arb_fix().prop_map(Message::Fix),
        ("[a-z]{1,8}", arb_kind(), any::<u64>(), "[A-Za-z]{1,10}", ".{0,30}", 0usize..5, 0usize..5).prop_map(
            |(agent_id, kind, t_ms, reason, detail, n_rois, n_decoded)| Message::Diag(DiagMessage {
                agent_id,
                kind,
                t_ms,
                reason,
                detail,
                n_rois,
                n_decoded
            })
        ),
        (arb_f64(), arb_f64(), any::<u64>()).prop_map(|(x, y, issued_t_ms)| Message::Goal(NavGoal { x, y, issued_t_ms })),
        (
            prop_oneof![
                Just(ControlCommand::Pause),
                Just(ControlCommand::Resume),
                Just(ControlCommand::FollowMode),
                Just(ControlCommand::ScriptedMode)
            ],
            any::<bool>()
        )
            .prop_map(|(command, enabled)| Message::Control(ControlMessage { command, enabled })),
        (any::<u64>(), proptest::collection::vec((any::<u8>(), arb_f64(), arb_f64(), any::<bool>()), 0..5), proptest::option::of(arb_fix()))
            .prop_map(|(t_ms, lamps, fix)| Message::Scene(SceneSnapshot {
                t_ms,
                lamps: lamps
                    .into_iter()
                    .map(|(uid, x, y, sq)| SceneLamp {
                        uid,
                        x,
                        y,
                        shape: if sq { LampShape::Square { side: 0.2 } } else { LampShape::Circle { diameter: 0.175 } },
                    })
                    .collect(),
                floor: FloorBounds { x_min: -2.0, x_max: 2.0, y_min: -2.0, y_max: 2.0 },
                agents: vec![SceneAgent { agent_id: "robot".into(), kind: AgentKind::Robot, fix, truth: None }],
                follow_mode: true,
                scripted_mode: false,
                paused: false,
            })),
    ]
}

/// Random level-ish camera poses that keep the lamp well inside the frame.
fn lamp_in_view_pose(rng: &mut ChaCha8Rng, depth: (f64, f64)) -> Pose {
    let k = CameraIntrinsics::default();
    let lamp = Vec3::new(0.0, 0.0, 2.5);
    loop {
        let d = rng.gen_range(depth.0..depth.1);
        let pose = Pose::new(
            Vec3::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.3..0.3), 2.5 - d),
            rng.gen_range(-0.1..0.1),
            rng.gen_range(-0.1..0.1),
            rng.gen_range(-3.1..3.1),
        );
        let Ok((u, v)) = project_point(&pose, &k, &lamp) else { continue };
        let r = k.focal_px * 0.175 / d;
        if u > r + 5.0 && u < k.width as f64 - r - 5.0 && v > r + 5.0 && v < k.height as f64 - r - 5.0 {
            return pose;
        }
    }
}

#[test]
fn centroid_within_one_pixel_under_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let k = CameraIntrinsics::default();
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let sigma = [0.0, 0.02, 0.05][i % 3];
        let uid = rng.gen();
        let s = lamp_scenario(vec![LedLamp::circle(uid, Vec3::new(0.0, 0.0, 2.5))], sigma, 0.05);
        let pose = lamp_in_view_pose(&mut rng, (1.0, 2.3));
        let frame = render_view(&s, &pose, &k, rng.gen_range(0.0..1.0), &mut rng);
        let truth = project_point(&pose, &k, &s.lamps[0].center).unwrap();
        let rois = detect_rois(&frame.image, &VisionConfig::default());
        assert_eq!(rois.len(), 1, "pose {i}: {} blobs", rois.len());
        let c = rois[0].centroid;
        let err = ((c.0 - truth.0).powi(2) + (c.1 - truth.1).powi(2)).sqrt();
        worst = worst.max(err);
        assert!(err <= 1.0, "pose {i} sigma {sigma}: centroid error {err:.3} px");
    }
    println!("worst centroid error {worst:.3} px");
}

#[test]
fn roi_count_independent_of_frame_phase() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let lamps = vec![
        LedLamp::circle(0x11, Vec3::new(-0.25, 0.0, 2.5)),
        LedLamp::circle(0xC4, Vec3::new(0.25, 0.1, 2.5)),
    ];
    let s = lamp_scenario(lamps, 0.02, 0.05);
    let pose = Pose::level(Vec3::new(0.0, 0.0, 1.0), 0.3);
    let k = CameraIntrinsics::default();
    for _ in 0..32 {
        let t = rng.gen_range(0.0..1.0);
        let frame = render_view(&s, &pose, &k, t, &mut rng);
        assert_eq!(detect_rois(&frame.image, &VisionConfig::default()).len(), 2, "t_start {t}");
    }
}

#[test]
fn apparent_diameter_scales_inversely_with_depth() {
    let lamp = LedLamp { modulated: false, ..LedLamp::circle(1, Vec3::new(0.0, 0.0, 2.5)) };
    let s = lamp_scenario(vec![lamp], 0.0, 0.05);
    let k = CameraIntrinsics::default();
    for depth in [0.6, 0.9, 1.3, 1.8, 2.3] {
        let pose = Pose::level(Vec3::new(0.0, 0.0, 2.5 - depth), 0.0);
        let frame = render_view(&s, &pose, &k, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        let rois = detect_rois(&frame.image, &VisionConfig::default());
        let product = rois[0].equiv_diameter * depth;
        let expected = k.focal_px * 0.175;
        assert!((product / expected - 1.0).abs() < 0.01, "depth {depth}: {product} vs {expected}");
    }
}

#[test]
fn stripe_period_matches_chip_rate() {
    let k = CameraIntrinsics::default();
    for rate in [1000.0, 2000.0, 2500.0, 4000.0] {
        let mut lamp = LedLamp::circle(0x00, Vec3::new(0.0, 0.0, 2.5));
        lamp.chip_rate = rate;
        let s = lamp_scenario(vec![lamp], 0.0, 0.0);
        let frame = render_view(&s, &Pose::level(Vec3::new(0.0, 0.0, 2.2), 0.0), &k, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        // uid 0 payload alternates 01 01 ..., so single-chip runs dominate
        let col: Vec<bool> = (0..k.height).map(|v| frame.image.get(320, v) > 0.4).collect();
        let mut runs = Vec::new();
        let mut len = 1;
        for w in col.windows(2) {
            if w[0] == w[1] {
                len += 1;
            } else {
                runs.push(len);
                len = 1;
            }
        }
        let interior = &runs[1..runs.len() - 1];
        let single = *interior.iter().min().unwrap() as f64;
        let expected = 1.0 / (rate * k.t_row);
        assert!((single - expected).abs() <= 1.0, "rate {rate}: {single} rows vs {expected}");
    }
}

#[test]
fn fourth_observation_does_not_hurt() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let k = CameraIntrinsics::default();
    let grid = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
    for _ in 0..50 {
        let pose = Pose::new(
            Vec3::new(rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), rng.gen_range(0.2..1.2)),
            rng.gen_range(-0.1..0.1),
            rng.gen_range(-0.1..0.1),
            rng.gen_range(-3.0..3.0),
        );
        let obs: Vec<LedObservation> = grid
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| {
                let w = Vec3::new(x, y, 2.5);
                LedObservation {
                    uid: i as u8 + 1,
                    centroid_px: project_point(&pose, &k, &w).unwrap(),
                    equiv_diameter_px: 50.0,
                    world: w,
                    physical_diameter_m: 0.175,
                }
            })
            .collect();
        let three = solve_multi_led(&obs[..3], &k, None).unwrap().0;
        let four = solve_multi_led(&obs, &k, None).unwrap().0;
        let e3 = (three.position - pose.position).norm();
        let e4 = (four.position - pose.position).norm();
        assert!(e4 <= e3 + 1e-9, "three {e3:e}, four {e4:e}");
    }
}

#[test]
fn tracker_never_names_the_wrong_lamp() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let k = CameraIntrinsics::default();
    let mut named = 0;
    for trial in 0..150 {
        let mut lamp = LedLamp::circle(rng.gen(), Vec3::new(0.0, 0.0, 2.5));
        lamp.chip_rate = [1000.0, 2000.0, 3000.0, 4000.0][trial % 4];
        let s = lamp_scenario(vec![lamp.clone()], 0.02, 0.05);
        // anywhere from centred to mostly outside the frame
        let depth = rng.gen_range(0.5..2.3);
        let pose = Pose::new(
            Vec3::new(rng.gen_range(-0.5..0.5) * depth, rng.gen_range(-0.4..0.4) * depth, 2.5 - depth),
            rng.gen_range(-0.1..0.1),
            rng.gen_range(-0.1..0.1),
            rng.gen_range(-3.1..3.1),
        );
        let mut tracker = vlp_core::vision::LampTracker::new(Default::default());
        let t0: f64 = rng.gen_range(0.0..1.0);
        for n in 0..12 {
            let frame = render_view(&s, &pose, &k, t0 + n as f64 / 30.0, &mut rng);
            for t in tracker.process(&frame) {
                if let Some(uid) = t.uid {
                    assert_eq!(uid, lamp.uid, "trial {trial} frame {n}");
                    named += 1;
                }
            }
        }
    }
    assert!(named > 0);
}
