//! Brute-force oracle suites with fixed tolerances. Each suite returns a
//! report of named checks; the CLI and the acceptance run both use them.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::codebook::{CodebookSpec, GroundMetric, TokenId, TrajectoryTokens};
use crate::ctmc::{marginal_tv, rate_column, simulate_marginals};
use crate::embedding::EmbeddingTable;
use crate::error::Result;
use crate::flow::toy_scenes;
use crate::net::{gradient_check, Arch, Example, PolicyParams};
use crate::path::{corrupt, gibbs_conditional, CoordinateSpace, GibbsSchedule};
use crate::rng;
use crate::sim::geometry::Point;
use crate::sim::score::{min_ttc, ttc_at, ttc_brute_force, ttc_score};
use crate::sim::{generate_scene, rollout, score_waypoints, Agent, Difficulty, EgoState, Obstacle, RewardWeights, Scene};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: String,
    pub pass: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            value,
            bound: format!("<= {limit:e}"),
            pass: value <= limit,
        }
    }

    fn at_least(name: &str, value: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            value,
            bound: format!(">= {limit}"),
            pass: value >= limit,
        }
    }

    fn equals(name: &str, value: f64, expected: f64) -> Self {
        Check {
            name: name.into(),
            value,
            bound: format!("== {expected}"),
            pass: value == expected,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub suite: String,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn write_csv<W: Write>(&self, config_hash: &str, w: W) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(w);
        writeln!(w, "suite,check,value,bound,pass,config_hash")?;
        for c in &self.checks {
            writeln!(w, "{},{},{},{},{},{config_hash}", self.suite, c.name, c.value, c.bound, c.pass)?;
        }
        w.flush()
    }
}

fn report(suite: &str, start: Instant, checks: Vec<Check>) -> OracleReport {
    OracleReport {
        suite: suite.into(),
        checks,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Gibbs conditional at both ends of the path for every target on `spec`.
pub fn path_boundaries(spec: CodebookSpec, sched: &GibbsSchedule) -> Result<OracleReport> {
    let start = Instant::now();
    let space = CoordinateSpace::uniform(spec, GroundMetric::scalar_abs(), 1, None)?;
    let k = spec.size();
    let mut uniform_dev: f64 = 0.0;
    let mut min_mass = f64::INFINITY;
    for x1 in 0..k {
        let p0 = gibbs_conditional(TokenId::from_index(x1), 0.0, &space, 0, sched)?;
        for p in p0 {
            uniform_dev = uniform_dev.max((p - 1.0 / k as f64).abs());
        }
        let p1 = gibbs_conditional(TokenId::from_index(x1), sched.t_max, &space, 0, sched)?;
        min_mass = min_mass.min(p1[x1]);
    }
    Ok(report(
        "path",
        start,
        vec![
            Check::at_most("t0_max_deviation_from_uniform", uniform_dev, 4.0 * f64::EPSILON),
            Check::at_least("tmax_min_target_mass", min_mass, 0.999),
        ],
    ))
}

/// Rate columns at `samples` random `(z, x1, t)` on `spec`: off-diagonal
/// entries nonnegative, columns summing to zero, and no rate towards tokens
/// at least as far from the target.
pub fn rate_validity(spec: CodebookSpec, sched: &GibbsSchedule, samples: usize, seed: u64) -> Result<OracleReport> {
    let start = Instant::now();
    let space = CoordinateSpace::uniform(spec, GroundMetric::scalar_abs(), 1, None)?;
    let k = spec.size();
    let mut r = rng::stream(seed, &[0x4A7E]);
    let mut negative = 0usize;
    let mut worst_sum: f64 = 0.0;
    let mut nonzero_uphill = 0usize;
    for _ in 0..samples {
        let z = r.gen_range(0..k);
        let x1 = r.gen_range(0..k);
        let t: f64 = r.gen_range(0.0..1.0);
        let col = rate_column(&space, 0, TokenId::from_index(z), TokenId::from_index(x1), t, sched);
        let dist = space.axis(0).distances_to(x1);
        let exit = -col[z];
        let sum: f64 = col.iter().sum();
        worst_sum = worst_sum.max(sum.abs() / exit.max(1.0));
        for x in (0..k).filter(|&x| x != z) {
            negative += usize::from(col[x] < 0.0);
            nonzero_uphill += usize::from(dist[x] >= dist[z] && col[x] != 0.0);
        }
    }
    Ok(report(
        "rates",
        start,
        vec![
            Check::equals("negative_off_diagonal", negative as f64, 0.0),
            Check::at_most("max_relative_column_sum", worst_sum, 1e-12),
            Check::equals("nonzero_non_decreasing_rates", nonzero_uphill as f64, 0.0),
        ],
    ))
}

/// Empirical chain against the analytic path on a 5-token alphabet with the
/// oracle posterior.
pub fn ctmc_suite(sched: &GibbsSchedule, runs: usize, seed: u64) -> Result<OracleReport> {
    let start = Instant::now();
    let spec = CodebookSpec::new(0.0, 4.0, 1.0)?;
    let space = CoordinateSpace::uniform(spec, GroundMetric::scalar_abs(), 1, None)?;
    let x1 = TokenId(1);
    let coarse = simulate_marginals(&space, x1, 200, runs, seed, sched)?;
    let fine = simulate_marginals(&space, x1, 400, runs, rng::derive_seed(seed, &[1]), sched)?;
    let tv = [0.25, 0.5, 0.75]
        .iter()
        .map(|&t| marginal_tv(&fine, &space, x1, t, sched))
        .fold(0.0, f64::max);
    Ok(report(
        "ctmc",
        start,
        vec![
            Check::at_least("terminal_mass_n200", coarse.terminal()[x1.index()], 0.99),
            Check::at_most("mid_time_tv_n400", tv, 0.05),
            Check::equals(
                "absorbing_violations",
                (coarse.absorbing_violations + fine.absorbing_violations) as f64,
                0.0,
            ),
        ],
    ))
}

/// Central differences on the desk network with every block trainable.
pub fn gradcheck_suite(seed: u64) -> Result<OracleReport> {
    let start = Instant::now();
    let spec = CodebookSpec::desk();
    let space = CoordinateSpace::trajectory(spec)?;
    let arch = Arch::desk();
    let table = EmbeddingTable::random(spec.size(), arch.d_in, seed);
    let mut params = PolicyParams::init(arch, spec, &table, rng::derive_seed(seed, &[1]))?;
    params.train_embeddings = true;
    let scenes = toy_scenes(4, seed, &space)?;
    let sched = GibbsSchedule::default();
    let mut r = rng::stream(seed, &[0x6C4]);
    let mut xs = Vec::new();
    let mut targets = Vec::new();
    let mut ctxs = Vec::new();
    let mut times = Vec::new();
    for s in &scenes {
        let target = s.expert_tokens(&space)?;
        let t: f64 = r.gen_range(0.05..0.95);
        xs.push(corrupt(&target, t, &space, &sched, r.gen())?);
        targets.push(target);
        ctxs.push(s.context(&spec)?);
        times.push(t);
    }
    let batch: Vec<Example> = (0..scenes.len())
        .map(|i| Example {
            x: &xs[i],
            t: times[i],
            ctx: &ctxs[i],
        })
        .collect();
    let target_refs: Vec<&TrajectoryTokens> = targets.iter().collect();
    let rows = gradient_check(&params, &batch, &target_refs, 12, 1e-5, seed)?;
    let worst = rows.iter().map(|r| r.4).fold(0.0, f64::max);
    let blocks = rows.iter().map(|r| r.0).collect::<std::collections::HashSet<_>>().len();
    Ok(report(
        "gradcheck",
        start,
        vec![
            Check::at_least("coordinates_checked", rows.len() as f64, 100.0),
            Check::equals("blocks_covered", blocks as f64, crate::net::Block::ALL.len() as f64),
            Check::at_most("max_relative_error", worst, 1e-4),
        ],
    ))
}

/// Straight 4 m/s scene on the x axis inside a 30 x 10 box.
fn straight_scene(agents: Vec<Agent>, obstacles: Vec<Obstacle>) -> Scene {
    Scene {
        ego0: EgoState {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
            v: 4.0,
            a: 0.0,
        },
        agents,
        obstacles,
        drivable: vec![[-5.0, -5.0], [25.0, -5.0], [25.0, 5.0], [-5.0, 5.0]],
        route: vec![[0.0, 0.0], [25.0, 0.0]],
        expert: straight_waypoints(2.0),
        command: crate::net::Command::Straight,
        id: 0,
        seed: 0,
    }
}

fn straight_waypoints(spacing: f64) -> Vec<Point> {
    (1..=8).map(|k| [spacing * k as f64, 0.0]).collect()
}

fn head_on(gap: f64) -> Agent {
    // Agent radius 0.5 against the unit ego disc; closing speed 10 m/s with
    // the ego's 4 m/s.
    Agent {
        center: [gap + 0.5, 0.0],
        radius: 0.5,
        velocity: [-6.0, 0.0],
    }
}

/// Hand-built scene table plus closed-form against brute-force TTC on 100
/// generated scenes.
pub fn reward_suite(seed: u64) -> Result<OracleReport> {
    let start = Instant::now();
    let w = RewardWeights::default();
    let mut checks = Vec::new();

    let clean = straight_scene(vec![], vec![]);
    let b = score_waypoints(&clean, &straight_waypoints(2.0), &w)?;
    checks.push(Check::equals("clean_reward", b.reward, 1.0));

    let blocked = straight_scene(
        vec![Agent {
            center: [8.0, 0.0],
            radius: 0.5,
            velocity: [0.0, 0.0],
        }],
        vec![],
    );
    let b = score_waypoints(&blocked, &straight_waypoints(2.0), &w)?;
    checks.push(Check::equals("agent_collision_nc", b.nc, 0.0));
    checks.push(Check::equals("agent_collision_reward", b.reward, 0.0));

    let grazing = straight_scene(
        vec![],
        vec![Obstacle {
            center: [8.0, 1.2],
            radius: 0.5,
        }],
    );
    let b = score_waypoints(&grazing, &straight_waypoints(2.0), &w)?;
    checks.push(Check::equals("static_contact_nc", b.nc, 0.5));

    let off_road = score_waypoints(&clean, &(1..=8).map(|k| [2.0 * k as f64, 0.6 * k as f64]).collect::<Vec<_>>(), &w)?;
    checks.push(Check::equals("off_road_dac", off_road.dac, 0.0));
    checks.push(Check::equals("off_road_reward", off_road.reward, 0.0));

    for (gap, expected_ttc, expected_score) in [(20.0, 1.9, 1.0), (5.0, 0.4, 0.0)] {
        let scene = straight_scene(vec![head_on(gap)], vec![]);
        let poses = rollout(&straight_waypoints(2.0), &scene.ego0)?;
        let ttc = ttc_at(&scene, &poses[0]);
        checks.push(Check::at_most(&format!("ttc_gap{gap}_error"), (ttc - expected_ttc).abs(), 1e-12));
        checks.push(Check::equals(&format!("ttc_gap{gap}_score"), ttc_score(ttc), expected_score));
    }

    let short = score_waypoints(&clean, &straight_waypoints(1.6), &w)?;
    checks.push(Check::at_most("ep_0.8_error", (short.ep - 0.8).abs(), 1e-12));
    checks.push(Check::at_most("ep_0.8_reward_error", (short.reward - 11.0 / 12.0).abs(), 1e-12));

    let mut worst: f64 = 0.0;
    let horizon = 10.0;
    for k in 0..100u64 {
        let scene = generate_scene(rng::derive_seed(seed, &[0x77C, k]), Difficulty::ALL[(k % 3) as usize]);
        let poses = rollout(&scene.expert, &scene.ego0)?;
        let closed = min_ttc(&scene, &poses).min(horizon);
        let brute = poses
            .iter()
            .map(|p| ttc_brute_force(&scene, p, 1e-3, horizon))
            .fold(f64::INFINITY, f64::min)
            .min(horizon);
        worst = worst.max((closed - brute).abs());
    }
    checks.push(Check::at_most("ttc_brute_force_max_gap", worst, 0.05));
    Ok(report("reward", start, checks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_and_rate_suites_pass() {
        let sched = GibbsSchedule::default();
        let r = path_boundaries(CodebookSpec::desk(), &sched).unwrap();
        assert!(r.passed(), "{r:?}");
        let r = rate_validity(CodebookSpec::desk(), &sched, 500, 0).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn reward_table_passes() {
        let r = reward_suite(0).unwrap();
        assert!(r.passed(), "{r:#?}");
    }

    #[test]
    fn failing_check_is_reported() {
        let c = Check::at_most("x", 2.0, 1.0);
        assert!(!c.pass);
        let r = OracleReport {
            suite: "s".into(),
            checks: vec![c],
            seconds: 0.0,
        };
        assert!(!r.passed());
        let mut buf = Vec::new();
        r.write_csv("abc", &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("suite,check,value,bound,pass,config_hash\n"));
    }
}
