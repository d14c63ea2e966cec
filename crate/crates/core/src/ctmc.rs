//! Conditional CTMC rates that realize the Gibbs path, plus brute-force
//! oracles for them.
//!
//! For a single coordinate with target `x1`, the rate from `z` to `x ≠ z` is
//! `p_t(x | x1) · β̇(t) · [d(z, x1) - d(x, x1)]₊`; the diagonal holds minus the
//! exit rate so every column of the rate matrix sums to zero. Only moves that
//! strictly reduce the distance to the target carry mass, so `x1` absorbs.

use std::io::Write;

use serde::Serialize;

use crate::codebook::{TokenId, TrajectoryTokens};
use crate::error::{Error, Result};
use crate::path::{gibbs_from_distances, Axis, CoordinateSpace, GibbsSchedule, MixtureSchedule};
use crate::sampler::{denoise_step, PosteriorRows};
use crate::stats::total_variation;

/// A single-coordinate transition query `z → x` given target `x1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateQuery {
    pub current: TokenId,
    pub candidate: TokenId,
    pub target: TokenId,
    pub t: f64,
    pub coordinate: usize,
}

/// Writes the unnormalized transition weights `p_t(x | x1) · [d(z) - d(x)]₊`
/// for every `x` (zero at `x = z`) into `weights` and returns their sum.
/// Multiplying by `β̇` turns weights into rates.
pub(crate) fn transition_weights(
    axis: &Axis,
    current: usize,
    target: usize,
    beta: f64,
    probs: &mut Vec<f64>,
    weights: &mut Vec<f64>,
) -> f64 {
    let k = axis.size();
    let dist = axis.distances_to(target);
    probs.resize(k, 0.0);
    weights.resize(k, 0.0);
    gibbs_from_distances(dist, beta, probs);
    let dz = dist[current];
    let mut total = 0.0;
    for x in 0..k {
        let gap = dz - dist[x];
        let w = if x != current && gap > 0.0 { probs[x] * gap } else { 0.0 };
        weights[x] = w;
        total += w;
    }
    total
}

fn check_query(q: &RateQuery, space: &CoordinateSpace, sched: &GibbsSchedule) -> Result<()> {
    if q.coordinate >= space.dims() {
        return Err(Error::InvalidArgument(format!("coordinate {} out of range", q.coordinate)));
    }
    let axis = space.axis(q.coordinate);
    for t in [q.current, q.candidate, q.target] {
        axis.spec.check_token(t)?;
    }
    if !(0.0..=1.0).contains(&q.t) {
        return Err(Error::InvalidArgument(format!("time {} outside [0, 1]", q.t)));
    }
    let _ = sched;
    Ok(())
}

/// Rate `u_t(x, z | x1)`; the diagonal (`x = z`) is the negative exit rate.
pub fn conditional_rate(q: &RateQuery, space: &CoordinateSpace, sched: &GibbsSchedule) -> Result<f64> {
    check_query(q, space, sched)?;
    let axis = space.axis(q.coordinate);
    let beta = sched.beta(q.t);
    let beta_dot = sched.beta_dot(q.t);
    let mut probs = Vec::new();
    let mut weights = Vec::new();
    let total = transition_weights(
        axis,
        q.current.index(),
        q.target.index(),
        beta,
        &mut probs,
        &mut weights,
    );
    if q.candidate == q.current {
        Ok(-scale_rate(total, beta_dot))
    } else {
        Ok(scale_rate(weights[q.candidate.index()], beta_dot))
    }
}

/// `0 · ∞` is taken as zero: no admissible move means no exit, even where
/// `β̇` is unbounded.
fn scale_rate(weight: f64, beta_dot: f64) -> f64 {
    if weight == 0.0 {
        0.0
    } else {
        weight * beta_dot
    }
}

/// Total outgoing rate `λ = Σ_{x ≠ z} u_t(x, z | x1)`.
pub fn exit_rate(
    z: TokenId,
    x1: TokenId,
    t: f64,
    space: &CoordinateSpace,
    coord: usize,
    sched: &GibbsSchedule,
) -> Result<f64> {
    let q = RateQuery {
        current: z,
        candidate: z,
        target: x1,
        t,
        coordinate: coord,
    };
    Ok(-conditional_rate(&q, space, sched)?)
}

/// Column `z` of the rate matrix: entry `x` is the rate from `z` to `x`.
pub fn rate_column(
    space: &CoordinateSpace,
    coord: usize,
    z: TokenId,
    x1: TokenId,
    t: f64,
    sched: &GibbsSchedule,
) -> Vec<f64> {
    let axis = space.axis(coord);
    let beta_dot = sched.beta_dot(t);
    let mut probs = Vec::new();
    let mut weights = Vec::new();
    let total = transition_weights(axis, z.index(), x1.index(), sched.beta(t), &mut probs, &mut weights);
    let mut col: Vec<f64> = weights.iter().map(|&w| scale_rate(w, beta_dot)).collect();
    col[z.index()] = -scale_rate(total, beta_dot);
    col
}

/// Full `K x K` rate matrix, entry `[x][z]` = rate from `z` to `x`.
pub fn rate_matrix(space: &CoordinateSpace, coord: usize, x1: TokenId, t: f64, sched: &GibbsSchedule) -> Vec<Vec<f64>> {
    let k = space.axis(coord).size();
    let mut m = vec![vec![0.0; k]; k];
    for z in 0..k {
        let col = rate_column(space, coord, TokenId::from_index(z), x1, t, sched);
        for x in 0..k {
            m[x][z] = col[x];
        }
    }
    m
}

/// `max_x |ṗ_t(x) - Σ_z u_t(x, z) p_t(z)|`, with `ṗ` a central difference of
/// `path` over `±dt`.
pub fn forward_residual_with<P, U>(path: P, rates: U, t: f64, dt: f64) -> f64
where
    P: Fn(f64) -> Vec<f64>,
    U: Fn(f64) -> Vec<Vec<f64>>,
{
    let plus = path(t + dt);
    let minus = path(t - dt);
    let now = path(t);
    let u = rates(t);
    (0..now.len())
        .map(|x| {
            let p_dot = (plus[x] - minus[x]) / (2.0 * dt);
            let flow: f64 = (0..now.len()).map(|z| u[x][z] * now[z]).sum();
            (p_dot - flow).abs()
        })
        .fold(0.0, f64::max)
}

fn check_small(space: &CoordinateSpace) -> Result<()> {
    if space.dims() != 1 || space.axis(0).size() > 8 {
        return Err(Error::InvalidArgument(
            "oracle spaces must have one coordinate and at most 8 tokens".into(),
        ));
    }
    Ok(())
}

/// Forward-equation residual of the Gibbs path under the conditional rates.
pub fn forward_residual(
    space: &CoordinateSpace,
    x1: TokenId,
    t: f64,
    dt: f64,
    sched: &GibbsSchedule,
) -> Result<f64> {
    check_small(space)?;
    if !(dt > 0.0 && t - dt > 0.0 && t + dt < sched.t_max) {
        return Err(Error::InvalidArgument(format!("need 0 < t - dt and t + dt < t_max (t={t}, dt={dt})")));
    }
    let axis = space.axis(0);
    let path = |s: f64| {
        let mut p = vec![0.0; axis.size()];
        gibbs_from_distances(axis.distances_to(x1.index()), sched.beta(s), &mut p);
        p
    };
    Ok(forward_residual_with(path, |s| rate_matrix(space, 0, x1, s, sched), t, dt))
}

/// Residual of the mixture path against its closed-form velocity
/// `κ̇ / (1 - κ) · (δ_{x1} - δ_z)`, a positive control for the oracle.
pub fn mixture_forward_residual(prior: &[f64], x1: TokenId, kappa: MixtureSchedule, t: f64, dt: f64) -> f64 {
    let k = prior.len();
    let path = |s: f64| {
        let c = kappa.kappa(s);
        let mut p: Vec<f64> = prior.iter().map(|v| (1.0 - c) * v).collect();
        p[x1.index()] += c;
        p
    };
    let rates = |s: f64| {
        let r = kappa.kappa_dot(s) / (1.0 - kappa.kappa(s));
        let mut m = vec![vec![0.0; k]; k];
        for z in 0..k {
            if z != x1.index() {
                m[x1.index()][z] = r;
                m[z][z] = -r;
            }
        }
        m
    };
    forward_residual_with(path, rates, t, dt)
}

/// Empirical marginals of the jump sampler with the posterior pinned at `x1`.
#[derive(Debug, Clone)]
pub struct Marginals {
    pub steps: usize,
    /// Row `k` is the empirical distribution at `t = k / steps`.
    pub empirical: Vec<Vec<f64>>,
    /// Runs that started at `x1` and ever left it.
    pub absorbing_violations: usize,
}

impl Marginals {
    pub fn terminal(&self) -> &[f64] {
        &self.empirical[self.steps]
    }

    pub fn at(&self, t: f64) -> &[f64] {
        &self.empirical[(t * self.steps as f64).round() as usize]
    }
}

/// Runs `runs` independent single-coordinate chains from uniform starts for
/// `steps` Euler jumps (no terminal snap). Run `r` uses seed `(seed, r)`.
pub fn simulate_marginals(
    space: &CoordinateSpace,
    x1: TokenId,
    steps: usize,
    runs: usize,
    seed: u64,
    sched: &GibbsSchedule,
) -> Result<Marginals> {
    check_small(space)?;
    if runs < 10_000 {
        return Err(Error::InvalidArgument(format!("need at least 10^4 runs, got {runs}")));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be positive".into()));
    }
    let k = space.axis(0).size();
    let mut counts = vec![vec![0usize; k]; steps + 1];
    let target = TrajectoryTokens(vec![x1]);
    let h = 1.0 / steps as f64;
    let mut violations = 0;
    for run in 0..runs {
        let run_seed = crate::rng::derive_seed(seed, &[run as u64]);
        let start = crate::sampler::uniform_start(space, run_seed);
        let started_at_target = start.get(0) == x1;
        let mut x = start;
        counts[0][x.get(0).index()] += 1;
        for step in 0..steps {
            let t = step as f64 * h;
            x = denoise_step(&x, t, h, &PosteriorRows::Oracle(&target), space, sched, run_seed, step);
            counts[step + 1][x.get(0).index()] += 1;
            if started_at_target && x.get(0) != x1 {
                violations += 1;
            }
        }
    }
    let empirical = counts
        .into_iter()
        .map(|row| row.into_iter().map(|c| c as f64 / runs as f64).collect())
        .collect();
    Ok(Marginals {
        steps,
        empirical,
        absorbing_violations: violations,
    })
}

/// Total-variation distance between the empirical marginal at `t` and the
/// analytic Gibbs conditional.
pub fn marginal_tv(m: &Marginals, space: &CoordinateSpace, x1: TokenId, t: f64, sched: &GibbsSchedule) -> f64 {
    let axis = space.axis(0);
    let mut p = vec![0.0; axis.size()];
    gibbs_from_distances(axis.distances_to(x1.index()), sched.beta(t), &mut p);
    total_variation(m.at(t), &p)
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleRow {
    pub t: f64,
    pub x: usize,
    pub p_analytic: f64,
    pub p_empirical: f64,
    pub residual: f64,
}

/// Analytic vs empirical marginals and the forward residual at each of
/// `times` (interior points of the grid).
pub fn oracle_rows(
    m: &Marginals,
    space: &CoordinateSpace,
    x1: TokenId,
    times: &[f64],
    sched: &GibbsSchedule,
) -> Result<Vec<OracleRow>> {
    let axis = space.axis(0);
    let mut rows = Vec::new();
    for &t in times {
        let mut p = vec![0.0; axis.size()];
        gibbs_from_distances(axis.distances_to(x1.index()), sched.beta(t), &mut p);
        let residual = forward_residual(space, x1, t, 1e-5, sched)?;
        for (x, (&pa, &pe)) in p.iter().zip(m.at(t)).enumerate() {
            rows.push(OracleRow {
                t,
                x,
                p_analytic: pa,
                p_empirical: pe,
                residual,
            });
        }
    }
    Ok(rows)
}

pub fn write_oracle_csv<W: Write>(rows: &[OracleRow], w: W) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(w);
    writeln!(w, "t,x,p_analytic,p_empirical,residual")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.t, r.x, r.p_analytic, r.p_empirical, r.residual)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{CodebookSpec, GroundMetric};
    use crate::path::gibbs_conditional;
    use rand::Rng;

    fn space(k: usize, weight: f64) -> CoordinateSpace {
        let spec = CodebookSpec::new(0.0, (k - 1) as f64, 1.0).unwrap();
        CoordinateSpace::uniform(spec, GroundMetric::scalar_abs().with_weight(weight), 1, None).unwrap()
    }

    /// β(t) = t / (1 - t) makes β = 1 and β̇ = 4 at t = 0.5.
    fn unit_schedule() -> GibbsSchedule {
        GibbsSchedule {
            scale: 1.0,
            exponent: 1.0,
            t_max: 0.999,
        }
    }

    #[test]
    fn rate_examples() {
        let s = space(3, 2.0);
        let sched = unit_schedule();
        let bd = sched.beta_dot(0.5);
        let q = RateQuery {
            current: TokenId(2),
            candidate: TokenId(1),
            target: TokenId(0),
            t: 0.5,
            coordinate: 0,
        };
        // p(1 | 0) = 0.2447 at β = 1, gap d(2) - d(1) = 1.
        let r = conditional_rate(&q, &s, &sched).unwrap() / bd;
        let z: f64 = 1.0 + (-1.0f64).exp() + (-2.0f64).exp();
        assert!((r - (-1.0f64).exp() / z).abs() < 1e-12);
        assert!((r - 0.2447).abs() < 1e-4);

        let away = RateQuery {
            current: TokenId(1),
            candidate: TokenId(2),
            ..q
        };
        assert_eq!(conditional_rate(&away, &s, &sched).unwrap(), 0.0);

        let lam = exit_rate(TokenId(2), TokenId(0), 0.5, &s, 0, &sched).unwrap() / bd;
        let expect = 2.0 / z + (-1.0f64).exp() / z;
        assert!((lam - expect).abs() < 1e-12);
        // 1.5751 is the sum of the four-digit rounded terms; exact value 1.57521.
        assert!((lam - 1.5751).abs() < 2e-4);

        assert_eq!(exit_rate(TokenId(0), TokenId(0), 0.5, &s, 0, &sched).unwrap(), 0.0);
    }

    #[test]
    fn exit_rate_linear_in_beta_dot() {
        let s = space(5, 1.0);
        let a = GibbsSchedule { scale: 1.0, exponent: 1.0, t_max: 0.999 };
        let b = GibbsSchedule { scale: 2.0, ..a };
        let t = 0.3;
        let la = exit_rate(TokenId(4), TokenId(1), t, &s, 0, &a).unwrap();
        let mut probs = Vec::new();
        let mut w = Vec::new();
        let total = transition_weights(s.axis(0), 4, 1, a.beta(t), &mut probs, &mut w);
        assert!((la - a.beta_dot(t) * total).abs() < 1e-12);
        assert!((b.beta_dot(t) / a.beta_dot(t) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rate_matrix_columns_sum_to_zero() {
        let s = CoordinateSpace::trajectory(CodebookSpec::new(0.0, 2.0, 0.25).unwrap()).unwrap();
        let sched = GibbsSchedule::default();
        let mut r = crate::rng::stream(4, &[]);
        for _ in 0..50 {
            let x1 = TokenId(r.gen_range(0..9));
            let t = r.gen_range(0.01..0.99);
            let m = rate_matrix(&s, 0, x1, t, &sched);
            for z in 0..9 {
                let col: f64 = (0..9).map(|x| m[x][z]).sum();
                assert!(col.abs() < 1e-9 * m[z][z].abs().max(1.0));
                for x in 0..9 {
                    if x != z {
                        assert!(m[x][z] >= 0.0);
                    }
                }
            }
            assert!(m.iter().all(|row| row[x1.index()] == 0.0));
        }
    }

    #[test]
    fn forward_residual_small_for_gibbs_rates() {
        let s = space(4, 1.0);
        let sched = GibbsSchedule::default();
        for &t in &[0.2, 0.5, 0.8] {
            let r = forward_residual(&s, TokenId(1), t, 1e-5, &sched).unwrap();
            assert!(r < 1e-2, "t={t}: {r}");
        }
    }

    #[test]
    fn zeroed_rates_leave_visible_residual() {
        let s = space(4, 1.0);
        let sched = GibbsSchedule::default();
        let axis = s.axis(0);
        let path = |t: f64| {
            let mut p = vec![0.0; 4];
            gibbs_from_distances(axis.distances_to(1), sched.beta(t), &mut p);
            p
        };
        let r = forward_residual_with(path, |_| vec![vec![0.0; 4]; 4], 0.5, 1e-5);
        let p_dot_max = (0..4)
            .map(|x| ((path(0.5 + 1e-5)[x] - path(0.5 - 1e-5)[x]) / 2e-5).abs())
            .fold(0.0, f64::max);
        assert!((r - p_dot_max).abs() < 1e-12);
        assert!(r > 0.01);
    }

    #[test]
    fn mixture_positive_control() {
        let prior = [0.25; 4];
        let r = mixture_forward_residual(&prior, TokenId(2), MixtureSchedule { exponent: 2.0 }, 0.5, 1e-5);
        assert!(r <= 1e-6, "{r}");
    }

    #[test]
    fn gibbs_conditional_agrees_with_path_used_here() {
        let s = space(5, 1.0);
        let sched = GibbsSchedule::default();
        let p = gibbs_conditional(TokenId(3), 0.4, &s, 0, &sched).unwrap();
        let mut q = vec![0.0; 5];
        gibbs_from_distances(s.axis(0).distances_to(3), sched.beta(0.4), &mut q);
        assert_eq!(p, q);
    }

    #[test]
    fn oracle_csv_header() {
        let mut buf = Vec::new();
        write_oracle_csv(
            &[OracleRow {
                t: 0.5,
                x: 1,
                p_analytic: 0.2,
                p_empirical: 0.21,
                residual: 1e-6,
            }],
            &mut buf,
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x,p_analytic,p_empirical,residual\n0.5,1,"));
    }
}
