//! Sub-scores and the composite reward.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::geometry::{dist, disc_time_to_contact, norm, Polygon, Polyline};
use super::rollout::Pose;
use super::scene::Scene;
use crate::error::{Error, Result};

pub const EGO_RADIUS: f64 = 1.0;
pub const TTC_THRESHOLD: f64 = 0.9;
pub const MAX_ACCEL: f64 = 4.0;
pub const MAX_JERK: f64 = 8.0;

/// Relative weights of progress, time-to-collision and comfort.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub ep: f64,
    pub ttc: f64,
    pub comfort: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            ep: 5.0,
            ttc: 5.0,
            comfort: 2.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.ep, self.ttc, self.comfort];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("reward weights {w:?} must be nonnegative with a positive sum")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub nc: f64,
    pub dac: f64,
    pub ttc: f64,
    pub comfort: f64,
    pub ep: f64,
    pub reward: f64,
    pub pdms: f64,
}

impl RewardBreakdown {
    /// Fills in `reward` and `pdms` from the sub-scores.
    pub fn compose(nc: f64, dac: f64, ttc: f64, comfort: f64, ep: f64, w: &RewardWeights) -> Self {
        let safety = nc * dac;
        let total = w.ep + w.ttc + w.comfort;
        RewardBreakdown {
            nc,
            dac,
            ttc,
            comfort,
            ep,
            reward: safety * (w.ep * ep + w.ttc * ttc + w.comfort * comfort) / total,
            pdms: safety * (5.0 * ttc + 2.0 * comfort + 5.0 * ep) / 12.0,
        }
    }
}

/// 0 on any contact with a moving agent, 0.5 if only static obstacles are
/// touched, else 1.
pub fn no_collision(scene: &Scene, poses: &[Pose]) -> f64 {
    let mut static_hit = false;
    for p in poses {
        for a in &scene.agents {
            if dist(p.position, a.position_at(p.t)) < EGO_RADIUS + a.radius {
                return 0.0;
            }
        }
        static_hit |= scene
            .obstacles
            .iter()
            .any(|o| dist(p.position, o.center) < EGO_RADIUS + o.radius);
    }
    if static_hit {
        0.5
    } else {
        1.0
    }
}

pub fn drivable_compliance(area: &Polygon, poses: &[Pose]) -> f64 {
    if poses.iter().all(|p| area.contains_disc(p.position, EGO_RADIUS)) {
        1.0
    } else {
        0.0
    }
}

/// Time to contact from pose `p` with every agent and obstacle, ego held at
/// its current velocity.
pub fn ttc_at(scene: &Scene, p: &Pose) -> f64 {
    let agents = scene.agents.iter().map(|a| {
        let c = a.position_at(p.t);
        disc_time_to_contact(
            [c[0] - p.position[0], c[1] - p.position[1]],
            [a.velocity[0] - p.velocity[0], a.velocity[1] - p.velocity[1]],
            EGO_RADIUS + a.radius,
        )
    });
    let statics = scene.obstacles.iter().map(|o| {
        disc_time_to_contact(
            [o.center[0] - p.position[0], o.center[1] - p.position[1]],
            [-p.velocity[0], -p.velocity[1]],
            EGO_RADIUS + o.radius,
        )
    });
    agents.chain(statics).fold(f64::INFINITY, f64::min)
}

pub fn min_ttc(scene: &Scene, poses: &[Pose]) -> f64 {
    poses.iter().map(|p| ttc_at(scene, p)).fold(f64::INFINITY, f64::min)
}

/// Dense-time reference for [`ttc_at`]: steps `dt` forward until the discs
/// touch, giving up after `horizon`.
pub fn ttc_brute_force(scene: &Scene, p: &Pose, dt: f64, horizon: f64) -> f64 {
    let steps = (horizon / dt).ceil() as usize;
    for k in 0..=steps {
        let tau = k as f64 * dt;
        let ego = [p.position[0] + p.velocity[0] * tau, p.position[1] + p.velocity[1] * tau];
        let hit_agent = scene
            .agents
            .iter()
            .any(|a| dist(ego, a.position_at(p.t + tau)) <= EGO_RADIUS + a.radius);
        let hit_static = scene
            .obstacles
            .iter()
            .any(|o| dist(ego, o.center) <= EGO_RADIUS + o.radius);
        if hit_agent || hit_static {
            return tau;
        }
    }
    f64::INFINITY
}

pub fn ttc_score(min_ttc: f64) -> f64 {
    if min_ttc > TTC_THRESHOLD {
        1.0
    } else {
        0.0
    }
}

pub fn comfort(poses: &[Pose]) -> f64 {
    let ok = poses
        .iter()
        .all(|p| norm(p.accel) <= MAX_ACCEL && norm(p.jerk) <= MAX_JERK);
    if ok {
        1.0
    } else {
        0.0
    }
}

/// Progress of the final pose along the route relative to the expert's,
/// clipped to `[0, 1]`.
pub fn ego_progress(route: &Polyline, start: [f64; 2], end: [f64; 2], reference_end: [f64; 2]) -> f64 {
    let s0 = route.project(start);
    let reference = route.project(reference_end) - s0;
    if reference <= 1e-9 {
        return 1.0;
    }
    ((route.project(end) - s0) / reference).clamp(0.0, 1.0)
}

pub fn score(scene: &Scene, poses: &[Pose], weights: &RewardWeights) -> Result<RewardBreakdown> {
    let area = Polygon::new(scene.drivable.clone())?;
    let route = Polyline::new(scene.route.clone())?;
    let expert_end = *scene
        .expert
        .last()
        .ok_or_else(|| Error::InvalidArgument("scene has no expert waypoints".into()))?;
    let end = poses
        .last()
        .ok_or_else(|| Error::InvalidArgument("empty rollout".into()))?
        .position;
    let nc = no_collision(scene, poses);
    let dac = drivable_compliance(&area, poses);
    let ttc = ttc_score(min_ttc(scene, poses));
    let c = comfort(poses);
    let ep = ego_progress(&route, [scene.ego0.x, scene.ego0.y], end, expert_end);
    Ok(RewardBreakdown::compose(nc, dac, ttc, c, ep, weights))
}

/// Rolls out `waypoints` from the scene's ego state and scores them.
pub fn score_waypoints(scene: &Scene, waypoints: &[[f64; 2]], weights: &RewardWeights) -> Result<RewardBreakdown> {
    let poses = super::rollout::rollout(waypoints, &scene.ego0)?;
    score(scene, &poses, weights)
}

pub fn write_score_csv<W: Write>(
    rows: &[(u64, RewardBreakdown)],
    config_hash: &str,
    w: W,
) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(w);
    writeln!(w, "scene_id,nc,dac,ttc,comfort,ep,reward,pdms,config_hash")?;
    for (id, b) in rows {
        writeln!(
            w,
            "{id},{},{},{},{},{},{},{},{config_hash}",
            b.nc, b.dac, b.ttc, b.comfort, b.ep, b.reward, b.pdms
        )?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn composite_examples() {
        let w = RewardWeights::default();
        assert_eq!(RewardBreakdown::compose(1.0, 1.0, 1.0, 1.0, 1.0, &w).reward, 1.0);
        let b = RewardBreakdown::compose(0.0, 1.0, 1.0, 1.0, 1.0, &w);
        assert_eq!((b.reward, b.pdms), (0.0, 0.0));
        let b = RewardBreakdown::compose(1.0, 1.0, 1.0, 1.0, 0.8, &w);
        assert!((b.reward - 11.0 / 12.0).abs() < 1e-12);
        assert!((b.reward - 0.9167).abs() < 1e-4);
    }

    #[test]
    fn reward_equals_pdms_and_is_monotone() {
        let w = RewardWeights::default();
        let mut r = crate::rng::stream(1, &[]);
        for _ in 0..10_000 {
            let nc = [0.0, 0.5, 1.0][r.gen_range(0..3)];
            let dac = r.gen_range(0..2) as f64;
            let ttc = r.gen_range(0..2) as f64;
            let c = r.gen_range(0..2) as f64;
            let ep: f64 = r.gen();
            let b = RewardBreakdown::compose(nc, dac, ttc, c, ep, &w);
            assert!((b.reward - b.pdms).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&b.reward));
            let better = RewardBreakdown::compose(nc, dac, ttc, c, (ep + 0.1).min(1.0), &w);
            assert!(better.reward >= b.reward);
            let better = RewardBreakdown::compose(nc, dac, 1.0, c, ep, &w);
            assert!(better.reward >= b.reward);
        }
    }

    #[test]
    fn ttc_bound() {
        assert_eq!(ttc_score(1.9), 1.0);
        assert_eq!(ttc_score(0.4), 0.0);
        assert_eq!(ttc_score(0.9), 0.0);
    }

    #[test]
    fn weights_validation() {
        assert!(RewardWeights::default().validate().is_ok());
        assert!(RewardWeights { ep: -1.0, ..Default::default() }.validate().is_err());
        assert!(RewardWeights { ep: 0.0, ttc: 0.0, comfort: 0.0 }.validate().is_err());
    }
}
