//! Procedural scenes: a constant-curvature route, a corridor around it,
//! static obstacles, constant-velocity agents and an expert that follows the
//! route at the ego's initial acceleration.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{add, scale, Point, Polygon, Polyline};
use super::rollout::{rollout, WAYPOINTS, WAYPOINT_DT};
use super::score::{score, RewardWeights};
use crate::codebook::{CodebookSpec, TrajectoryTokens};
use crate::error::{Error, Result};
use crate::net::{Command, ContextEncoding};
use crate::path::CoordinateSpace;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub v: f64,
    pub a: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Agent {
    pub center: Point,
    pub radius: f64,
    pub velocity: Point,
}

impl Agent {
    pub fn position_at(&self, t: f64) -> Point {
        add(self.center, scale(self.velocity, t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub center: Point,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub ego0: EgoState,
    pub agents: Vec<Agent>,
    pub obstacles: Vec<Obstacle>,
    pub drivable: Vec<Point>,
    pub route: Vec<Point>,
    pub expert: Vec<Point>,
    pub command: Command,
    pub id: u64,
    pub seed: u64,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        Polygon::new(self.drivable.clone())?;
        Polyline::new(self.route.clone())?;
        if self.expert.len() != WAYPOINTS {
            return Err(Error::InvalidArgument(format!(
                "expert has {} waypoints, expected {WAYPOINTS}",
                self.expert.len()
            )));
        }
        let e = &self.ego0;
        if [e.x, e.y, e.heading, e.v, e.a].iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite ego state".into()));
        }
        if self.agents.iter().any(|a| a.radius <= 0.0) || self.obstacles.iter().any(|o| o.radius <= 0.0) {
            return Err(Error::InvalidArgument("object radius must be positive".into()));
        }
        Ok(())
    }

    pub fn context(&self, spec: &CodebookSpec) -> Result<ContextEncoding> {
        let e = &self.ego0;
        ContextEncoding::quantize(self.command, [e.x, e.y, e.heading, e.v, e.a], spec)
    }

    pub fn expert_tokens(&self, space: &CoordinateSpace) -> Result<TrajectoryTokens> {
        crate::sampler::encode_waypoints(&self.expert, space)
    }
}

struct Arc {
    origin: Point,
    heading: f64,
    kappa: f64,
}

impl Arc {
    fn point(&self, s: f64) -> Point {
        let (o, th, k) = (self.origin, self.heading, self.kappa);
        if k.abs() < 1e-9 {
            return [o[0] + s * th.cos(), o[1] + s * th.sin()];
        }
        [
            o[0] + ((th + k * s).sin() - th.sin()) / k,
            o[1] + (th.cos() - (th + k * s).cos()) / k,
        ]
    }

    fn tangent(&self, s: f64) -> Point {
        let th = self.heading + self.kappa * s;
        [th.cos(), th.sin()]
    }

    fn left(&self, s: f64) -> Point {
        let th = self.heading + self.kappa * s;
        [-th.sin(), th.cos()]
    }

    fn offset(&self, s: f64, lateral: f64) -> Point {
        add(self.point(s), scale(self.left(s), lateral))
    }
}

const ROUTE_START: f64 = -3.0;
const ROUTE_END: f64 = 12.0;
const ROUTE_STEP: f64 = 0.5;
const MAX_ATTEMPTS: usize = 200;

fn expert_is_clean(scene: &Scene) -> bool {
    let Ok(poses) = rollout(&scene.expert, &scene.ego0) else {
        return false;
    };
    match score(scene, &poses, &RewardWeights::default()) {
        Ok(b) => b.nc == 1.0 && b.dac == 1.0 && b.ttc == 1.0 && b.comfort == 1.0,
        Err(_) => false,
    }
}

/// Deterministic scene for `(seed, difficulty)`; `id` is the seed.
pub fn generate_scene(seed: u64, difficulty: Difficulty) -> Scene {
    let mut r = rng::stream(seed, &[0x5CE4E]);
    let command = Command::ALL[r.gen_range(0..3)];
    let base = match difficulty {
        Difficulty::Easy => 0.05,
        Difficulty::Medium => 0.08,
        Difficulty::Hard => 0.11,
    };
    let kappa = match command {
        Command::Left => base + r.gen_range(-0.015..0.015),
        Command::Right => -(base + r.gen_range(-0.015..0.015)),
        Command::Straight => r.gen_range(-0.01..0.01),
    };
    let ego0 = EgoState {
        x: r.gen_range(-1.0..0.0),
        y: r.gen_range(-0.3..0.3),
        heading: r.gen_range(-0.1..0.1),
        v: r.gen_range(0.6..1.4),
        a: r.gen_range(-0.15..0.15),
    };
    let half_width = match difficulty {
        Difficulty::Easy => 2.6,
        Difficulty::Medium => 2.4,
        Difficulty::Hard => 2.2,
    };
    let arc = Arc {
        origin: [ego0.x, ego0.y],
        heading: ego0.heading,
        kappa,
    };
    let n = ((ROUTE_END - ROUTE_START) / ROUTE_STEP).round() as usize;
    let grid: Vec<f64> = (0..=n).map(|i| ROUTE_START + i as f64 * ROUTE_STEP).collect();
    let route: Vec<Point> = grid.iter().map(|&s| arc.point(s)).collect();
    let mut drivable: Vec<Point> = grid.iter().map(|&s| arc.offset(s, half_width)).collect();
    drivable.extend(grid.iter().rev().map(|&s| arc.offset(s, -half_width)));
    let expert_s = |t: f64| ego0.v * t + 0.5 * ego0.a * t * t;
    let expert: Vec<Point> = (1..=WAYPOINTS)
        .map(|k| arc.point(expert_s(k as f64 * WAYPOINT_DT)))
        .collect();
    let s_end = expert_s(WAYPOINTS as f64 * WAYPOINT_DT);

    let mut scene = Scene {
        ego0,
        agents: Vec::new(),
        obstacles: Vec::new(),
        drivable,
        route,
        expert,
        command,
        id: seed,
        seed,
    };

    let (n_obstacles, n_agents) = match difficulty {
        Difficulty::Easy => (r.gen_range(0..=1), r.gen_range(0..=1)),
        Difficulty::Medium => (r.gen_range(1..=2), r.gen_range(1..=2)),
        Difficulty::Hard => (r.gen_range(2..=3), r.gen_range(2..=3)),
    };

    let mut placed = 0;
    for _ in 0..MAX_ATTEMPTS {
        if placed == n_obstacles {
            break;
        }
        let s = r.gen_range(1.5..9.0);
        let radius = r.gen_range(0.3..0.6);
        let side = if r.gen::<bool>() { 1.0 } else { -1.0 };
        let lateral = side * (1.0 + radius + r.gen_range(0.4..1.2));
        scene.obstacles.push(Obstacle {
            center: arc.offset(s, lateral),
            radius,
        });
        if expert_is_clean(&scene) {
            placed += 1;
        } else {
            scene.obstacles.pop();
        }
    }

    let mut placed = 0;
    for _ in 0..MAX_ATTEMPTS {
        if placed == n_agents {
            break;
        }
        let radius = r.gen_range(0.5..0.9);
        let agent = match r.gen_range(0..3) {
            // Neighbouring lane, with or against the route direction.
            0 => {
                let s = r.gen_range(-2.0..10.0);
                let side = if r.gen::<bool>() { 1.0 } else { -1.0 };
                let lateral = side * (half_width + radius + r.gen_range(0.5..2.5));
                let dir = if r.gen::<bool>() { 1.0 } else { -1.0 };
                Agent {
                    center: arc.offset(s, lateral),
                    radius,
                    velocity: scale(arc.tangent(s), dir * r.gen_range(0.5..2.0)),
                }
            }
            // Lead vehicle in the corridor, ahead of the expert's endpoint.
            1 => {
                let s = s_end + radius + r.gen_range(2.0..4.0);
                Agent {
                    center: arc.offset(s, r.gen_range(-0.5..0.5)),
                    radius,
                    velocity: scale(arc.tangent(s), r.gen_range(0.5..1.5)),
                }
            }
            // Crossing beyond the expert's endpoint.
            _ => {
                let s = (s_end + r.gen_range(2.5..5.0)).min(ROUTE_END);
                let side = if r.gen::<bool>() { 1.0 } else { -1.0 };
                let start = arc.offset(s, side * r.gen_range(4.0..7.0));
                Agent {
                    center: start,
                    radius,
                    velocity: scale(arc.left(s), -side * r.gen_range(0.8..2.0)),
                }
            }
        };
        scene.agents.push(agent);
        if expert_is_clean(&scene) {
            placed += 1;
        } else {
            scene.agents.pop();
        }
    }
    scene
}

/// Writes one scene per line.
pub fn write_scenes<W: Write>(scenes: &[Scene], w: W) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(w);
    for s in scenes {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn save_scenes(scenes: &[Scene], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_scenes(scenes, f).map_err(|e| Error::io(path, e))
}

/// Reads a scene JSONL file; malformed or invalid lines are reported with
/// their 1-based line number.
pub fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |reason: String| Error::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let scene: Scene = serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
        scene.validate().map_err(|e| schema(e.to_string()))?;
        out.push(scene);
    }
    Ok(out)
}
