use drivewm::eval::{run_suite, Expert};
use drivewm::geometry::{shapes_overlap, Pose2D, Shape, Vec2};
use drivewm::rng;
use drivewm::world::checks::Thresholds;
use drivewm::world::*;
use drivewm::Error;
use rand::Rng as _;

fn params() -> ScenarioParams {
    ScenarioParams::default()
}

fn scenarios(range: std::ops::Range<u64>) -> Vec<Scenario> {
    let p = params();
    range.map(|s| build_scenario(s, &p).unwrap()).collect()
}

#[test]
fn generation_is_deterministic_and_round_trips() {
    let p = params();
    let a = build_scenario(7, &p).unwrap();
    let b = build_scenario(7, &p).unwrap();
    assert_eq!(a, b);
    let (mut ja, mut jb) = (Vec::new(), Vec::new());
    write_scenarios(&mut ja, std::slice::from_ref(&a)).unwrap();
    write_scenarios(&mut jb, std::slice::from_ref(&b)).unwrap();
    assert_eq!(ja, jb);
    let back = read_scenarios(&ja[..]).unwrap();
    assert_eq!(back, vec![a]);
}

#[test]
fn invalid_params_are_configuration_errors() {
    let mut p = params();
    p.sensor.n_rays = 4;
    assert!(matches!(build_scenario(0, &p), Err(Error::Config(_))));
    let mut p = params();
    p.templates.clear();
    assert!(matches!(build_scenario(0, &p), Err(Error::Config(_))));
}

#[test]
fn scenario_invariants() {
    let p = params();
    for s in scenarios(0..64) {
        assert!(s.map.contains(s.ego_init.position()), "seed {}", s.seed);
        assert_eq!(s.expert_future.waypoints.len(), p.horizon);
        assert_eq!(s.history.len(), p.history);
        for a in &s.agents {
            assert_eq!(a.schedule.len(), p.history + p.horizon + 1);
        }
        // Composing logged movements reproduces the pose chain.
        let mut pose = s.history[0].pose;
        for f in 1..s.history.len() {
            pose = pose.compose(&s.history[f].movement);
            let q = s.history[f].pose;
            assert!((pose.x - q.x).abs() < 1e-9 && (pose.y - q.y).abs() < 1e-9);
            assert!((pose.yaw - q.yaw).abs() < 1e-9);
        }
        for w in s.expert_future.waypoints.windows(2) {
            let step = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            assert!(step <= p.speed_cap * p.frame_dt + 1e-9);
        }
    }
}

#[test]
fn expert_is_tracked_without_collision() {
    let p = params();
    for s in scenarios(0..64) {
        let r = rollout_controller(&s, &s.expert_future);
        assert_eq!(r.realized.len(), p.horizon);
        assert!(!r.collided, "seed {}", s.seed);
        assert_eq!(r.offroad_frames, 0, "seed {}", s.seed);
        assert!(ade(&r, &s.expert_future) <= p.tracking_tolerance, "seed {}", s.seed);
        assert!(reward(&r, &s.expert_future) >= (-p.tracking_tolerance).exp());
    }
}

#[test]
fn expert_suite_scores_near_perfect() {
    let s = scenarios(0..64);
    let report = run_suite(&Expert, &s, &Thresholds::default(), "").unwrap();
    assert!(report.scenarios.iter().all(|r| r.scores.nc == 1.0 && r.scores.dac == 1.0));
    assert!(report.mean_aggregate >= 0.95, "{}", report.mean_aggregate);
}

#[test]
fn zero_plan_stops_within_braking_distance() {
    let cfg = ControllerConfig::default();
    for s in scenarios(0..32) {
        let r = rollout_controller(&s, &Trajectory::zeros(s.horizon));
        let v = s.ego_speed;
        let sub_dt = s.frame_dt / cfg.substeps as f64;
        let bound = v * v / (2.0 * cfg.max_brake) + v * sub_dt;
        for p in &r.realized {
            let d = ((p.x - s.ego_init.x).powi(2) + (p.y - s.ego_init.y).powi(2)).sqrt();
            assert!(d <= bound, "seed {}: {d} > {bound}", s.seed);
        }
        assert_eq!(*r.speeds.last().unwrap(), 0.0);
    }
}

fn random_plan(r: &mut rng::Rng, h: usize) -> Trajectory {
    let speed = r.random_range(0.0..20.0);
    let curv = r.random_range(-0.1..0.1);
    Trajectory {
        waypoints: (1..=h)
            .map(|k| {
                let s = speed * 0.5 * k as f64;
                [s, 0.5 * curv * s * s + r.random_range(-0.5..0.5)]
            })
            .collect(),
    }
}

#[test]
fn agent_free_scenarios_never_collide() {
    let mut r = rng::stream(11, &[]);
    for mut s in scenarios(0..16) {
        s.agents.clear();
        for _ in 0..8 {
            let plan = random_plan(&mut r, s.horizon);
            let res = rollout_controller(&s, &plan);
            assert!(!res.collided);
            assert_eq!(res.first_collision_frame, None);
        }
    }
}

fn result_from(origin: Pose2D, local: &[Vec2]) -> RolloutResult {
    RolloutResult {
        origin,
        realized: local.iter().map(|p| { let w = origin.to_world(*p); Pose2D::new(w[0], w[1], origin.yaw) }).collect(),
        speeds: vec![0.0; local.len() + 1],
        collided: false,
        first_collision_frame: None,
        offroad_frames: 0,
        accel: vec![],
        jerk: vec![],
        substep_poses: vec![],
    }
}

#[test]
fn reward_reference_cases() {
    let origin = Pose2D::new(3.0, -2.0, 0.7);
    let expert = Trajectory { waypoints: (1..=8).map(|k| [4.0 * k as f64, 0.1 * k as f64]).collect() };
    let same = result_from(origin, &expert.waypoints);
    assert!((reward(&same, &expert) - 1.0).abs() < 1e-12);
    let shifted: Vec<Vec2> = expert.waypoints.iter().map(|w| [w[0], w[1] + 1.0]).collect();
    assert!((reward(&result_from(origin, &shifted), &expert) - (-1.0f64).exp()).abs() < 1e-9);
    let mut last = 1.0 + 1e-12;
    for d in [0.0, 0.1, 0.5, 1.0, 3.0, 10.0] {
        let moved: Vec<Vec2> = expert.waypoints.iter().enumerate().map(|(k, w)| {
            let a = k as f64;
            [w[0] + d * a.cos(), w[1] + d * a.sin()]
        }).collect();
        let rw = reward(&result_from(origin, &moved), &expert);
        assert!(rw > 0.0 && rw <= 1.0 && rw < last);
        last = rw;
    }
}

/// Every intersection of one ray with every primitive, enumerated directly.
fn brute_force(s: &Scenario, pose: &Pose2D, frame: i64) -> Observation {
    let idx = s.schedule_index(frame);
    let origin = pose.position();
    let mut ranges = vec![];
    let mut classes = vec![];
    let seg_hit = |dir: Vec2, a: Vec2, b: Vec2| -> Option<f64> {
        // Solve origin + t dir = a + u (b - a) by Cramer's rule.
        let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
        let det = dir[0] * (-ey) - dir[1] * (-ex);
        if det.abs() < 1e-12 {
            return None;
        }
        let (rx, ry) = (a[0] - origin[0], a[1] - origin[1]);
        let t = (rx * (-ey) - ry * (-ex)) / det;
        let u = (dir[0] * ry - dir[1] * rx) / det;
        (t >= 0.0 && (0.0..=1.0).contains(&u)).then_some(t)
    };
    for k in 0..s.sensor.n_rays {
        let th = pose.yaw + s.sensor.ray_angle(k);
        let dir = [th.cos(), th.sin()];
        let mut hits: Vec<(f64, SemanticClass)> = vec![];
        for poly in &s.map.drivable {
            for i in 0..poly.len() {
                if let Some(t) = seg_hit(dir, poly[i], poly[(i + 1) % poly.len()]) {
                    hits.push((t, SemanticClass::Boundary));
                }
            }
        }
        for a in &s.agents {
            let class = match a.kind {
                AgentKind::Vehicle => SemanticClass::Vehicle,
                AgentKind::Pedestrian => SemanticClass::Pedestrian,
            };
            let p = a.schedule[idx];
            match a.shape {
                Shape::Rect { .. } => {
                    let c = a.shape.corners(&p).unwrap();
                    for i in 0..4 {
                        if let Some(t) = seg_hit(dir, c[i], c[(i + 1) % 4]) {
                            hits.push((t, class));
                        }
                    }
                }
                Shape::Disc { radius } => {
                    // |o + t d - c|^2 = r^2 with |d| = 1.
                    let (ox, oy) = (origin[0] - p.x, origin[1] - p.y);
                    let b = 2.0 * (ox * dir[0] + oy * dir[1]);
                    let c = ox * ox + oy * oy - radius * radius;
                    let disc = b * b - 4.0 * c;
                    if disc >= 0.0 {
                        for t in [(-b - disc.sqrt()) / 2.0, (-b + disc.sqrt()) / 2.0] {
                            if t >= 0.0 {
                                hits.push((t, class));
                            }
                        }
                    }
                }
            }
        }
        let best = hits
            .into_iter()
            .filter(|(t, _)| *t > 0.0 && *t <= s.sensor.r_max)
            .min_by(|a, b| a.0.total_cmp(&b.0));
        let (r, c) = best.unwrap_or((s.sensor.r_max, SemanticClass::Free));
        ranges.push(r);
        classes.push(c);
    }
    Observation { ranges, classes }
}

#[test]
fn sensing_matches_brute_force() {
    let mut compared = 0;
    for mut s in scenarios(0..24) {
        s.agents.truncate(3);
        for frame in [s.first_frame(), 0, 3] {
            let pose = s.ego_pose(frame).unwrap();
            let obs = sense(&s, &pose, frame).unwrap();
            let oracle = brute_force(&s, &pose, frame);
            for k in 0..obs.len() {
                assert!((obs.ranges[k] - oracle.ranges[k]).abs() <= 1e-9, "seed {} ray {k}", s.seed);
                assert_eq!(obs.classes[k], oracle.classes[k], "seed {} ray {k}", s.seed);
                if obs.classes[k] == SemanticClass::Free {
                    assert_eq!(obs.ranges[k], s.sensor.r_max);
                }
                assert!(obs.ranges[k] > 0.0 && obs.ranges[k] <= s.sensor.r_max);
            }
            compared += obs.len();
        }
    }
    assert!(compared > 0);
}

#[test]
fn sensing_outside_map_is_an_error() {
    let s = build_scenario(0, &params()).unwrap();
    let (_, hi) = s.map.bounds();
    let far = Pose2D::new(hi[0] + 1000.0, hi[1] + 1000.0, 0.0);
    assert!(matches!(sense(&s, &far, 0), Err(Error::Sensing(_))));
}

/// Collision search at ten poses per controller substep, interpolating ego
/// and agents.
fn dense_collision(s: &Scenario, r: &RolloutResult, substeps: usize) -> Option<usize> {
    let base = s.schedule_index(0) as f64;
    let ego = s.ego_shape();
    let mut prev = r.origin;
    for (i, pose) in r.substep_poses.iter().enumerate() {
        for j in 1..=10 {
            let a = j as f64 / 10.0;
            let p = prev.lerp(pose, a);
            let idx = base + (i as f64 + a) / substeps as f64;
            if s.agents.iter().any(|ag| shapes_overlap(&ego, &p, &ag.shape, &ag.pose_at(idx))) {
                return Some(i / substeps + 1);
            }
        }
        prev = *pose;
    }
    None
}

#[test]
fn collisions_agree_with_dense_oracle() {
    let cfg = ControllerConfig::default();
    let mut r = rng::stream(3, &[]);
    let (mut hits, mut checked) = (0, 0);
    for s in scenarios(100..120) {
        for _ in 0..6 {
            let plan = random_plan(&mut r, s.horizon);
            let res = rollout_controller(&s, &plan);
            let dense = dense_collision(&s, &res, cfg.substeps);
            assert_eq!(res.collided, dense.is_some(), "seed {}", s.seed);
            if let (Some(a), Some(b)) = (res.first_collision_frame, dense) {
                assert!(b <= a);
                hits += 1;
            }
            checked += 1;
        }
    }
    assert!(hits > 0 && hits < checked, "{hits} of {checked}");
}

#[test]
fn plan_through_static_agent_collides() {
    let th = Thresholds::default();
    for mut s in scenarios(300..310) {
        let frames = s.history_len() + s.horizon + 1;
        let pose = s.ego_init;
        let c = pose.to_world([3.0 + VEHICLE_LENGTH, 0.0]);
        s.agents = vec![Agent {
            kind: AgentKind::Vehicle,
            shape: vehicle_shape(),
            schedule: vec![Pose2D::new(c[0], c[1], pose.yaw); frames],
        }];
        let plan = Trajectory::constant_velocity(10.0, s.frame_dt, s.horizon);
        let res = rollout_controller(&s, &plan);
        assert!(res.collided, "seed {}", s.seed);
        assert_eq!(drivewm::eval::subscores(&s, &res, &th).nc, 0.0);
    }
}
