//! Waypoints to a 10 Hz pose sequence.
//!
//! Waypoints are 0.5 s apart and joined linearly starting from the ego
//! position. Velocity at a sample is the displacement over the preceding
//! 0.1 s; acceleration and jerk are differenced over one waypoint interval
//! (five samples), with the ego's initial velocity and acceleration standing
//! in for times before 0.

use serde::{Deserialize, Serialize};

use super::geometry::{norm, scale, sub, Point};
use super::scene::EgoState;
use crate::error::{Error, Result};

pub const WAYPOINTS: usize = 8;
pub const WAYPOINT_DT: f64 = 0.5;
pub const SAMPLE_DT: f64 = 0.1;
pub const SAMPLES: usize = 41;
const PER_SEGMENT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub t: f64,
    pub position: Point,
    pub heading: f64,
    pub velocity: Point,
    pub accel: Point,
    pub jerk: Point,
}

impl Pose {
    pub fn speed(&self) -> f64 {
        norm(self.velocity)
    }
}

pub fn rollout(waypoints: &[Point], ego0: &EgoState) -> Result<Vec<Pose>> {
    if waypoints.len() != WAYPOINTS {
        return Err(Error::DimensionMismatch(format!(
            "rollout needs {WAYPOINTS} waypoints, got {}",
            waypoints.len()
        )));
    }
    if waypoints.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite waypoint".into()));
    }
    let start = [ego0.x, ego0.y];
    let dir = [ego0.heading.cos(), ego0.heading.sin()];
    let v0 = scale(dir, ego0.v);
    let a0 = scale(dir, ego0.a);

    let mut knots = Vec::with_capacity(WAYPOINTS + 1);
    knots.push(start);
    knots.extend_from_slice(waypoints);

    let mut positions = Vec::with_capacity(SAMPLES);
    positions.push(start);
    for seg in 0..WAYPOINTS {
        let (a, b) = (knots[seg], knots[seg + 1]);
        for k in 1..=PER_SEGMENT {
            let u = k as f64 / PER_SEGMENT as f64;
            positions.push([a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])]);
        }
    }

    let mut velocity = vec![v0; SAMPLES];
    for k in 1..SAMPLES {
        velocity[k] = scale(sub(positions[k], positions[k - 1]), 1.0 / SAMPLE_DT);
    }
    let lagged = |series: &[Point], k: usize, before: Point| {
        if k >= PER_SEGMENT {
            series[k - PER_SEGMENT]
        } else {
            before
        }
    };
    let mut accel = vec![a0; SAMPLES];
    for k in 1..SAMPLES {
        accel[k] = scale(sub(velocity[k], lagged(&velocity, k, v0)), 1.0 / WAYPOINT_DT);
    }
    let mut jerk = vec![[0.0, 0.0]; SAMPLES];
    for k in 1..SAMPLES {
        jerk[k] = scale(sub(accel[k], lagged(&accel, k, a0)), 1.0 / WAYPOINT_DT);
    }

    let mut heading = ego0.heading;
    let mut poses = Vec::with_capacity(SAMPLES);
    for k in 0..SAMPLES {
        if k > 0 {
            let d = sub(positions[k], positions[k - 1]);
            if norm(d) > 1e-9 {
                heading = d[1].atan2(d[0]);
            }
        }
        poses.push(Pose {
            t: k as f64 * SAMPLE_DT,
            position: positions[k],
            heading,
            velocity: velocity[k],
            accel: accel[k],
            jerk: jerk[k],
        });
    }
    Ok(poses)
}
