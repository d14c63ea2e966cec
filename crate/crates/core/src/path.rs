//! Conditional probability paths over a factorized token space.
//!
//! The planner uses the metric-induced Gibbs path
//! `p_t(x | x1) ∝ exp(-β(t) · w · d(x, x1))`, applied per coordinate. The
//! mixture path `(1 - κ) · prior + κ · δ_{x1}` is kept alongside it as the
//! textbook reference (and as a positive control in the CTMC oracles).

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::{ground_distance, CodebookSpec, GroundMetric, TokenId, TrajectoryTokens};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::rng;

/// `β(t) = scale · (t / (1 - t))^exponent`, held constant past `t_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GibbsSchedule {
    pub scale: f64,
    pub exponent: f64,
    pub t_max: f64,
}

impl Default for GibbsSchedule {
    fn default() -> Self {
        GibbsSchedule {
            scale: 3.0,
            exponent: 0.9,
            t_max: 0.999,
        }
    }
}

impl GibbsSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("schedule.scale {} must be positive", self.scale)));
        }
        if !(self.exponent > 0.0 && self.exponent.is_finite()) {
            return Err(Error::Config(format!(
                "schedule.exponent {} must be positive",
                self.exponent
            )));
        }
        if !(self.t_max > 0.0 && self.t_max < 1.0) {
            return Err(Error::Config(format!("schedule.t_max {} must lie in (0, 1)", self.t_max)));
        }
        Ok(())
    }

    /// `β(t)` for any `t ∈ [0, 1]`.
    pub fn beta(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, self.t_max);
        if t == 0.0 {
            return 0.0;
        }
        self.scale * (t / (1.0 - t)).powf(self.exponent)
    }

    /// Analytic `dβ/dt`; zero past `t_max`, and unbounded at `t = 0` when the
    /// exponent is below one.
    pub fn beta_dot(&self, t: f64) -> f64 {
        if t >= self.t_max {
            return 0.0;
        }
        let t = t.max(0.0);
        if t == 0.0 {
            return match self.exponent {
                e if e < 1.0 => f64::INFINITY,
                e if e == 1.0 => self.scale,
                _ => 0.0,
            };
        }
        let ratio = t / (1.0 - t);
        self.scale * self.exponent * ratio.powf(self.exponent - 1.0) / ((1.0 - t) * (1.0 - t))
    }

    /// `β(t + h) - β(t)`, the schedule mass integrated over one step.
    pub fn increment(&self, t: f64, h: f64) -> f64 {
        self.beta((t + h).min(1.0)) - self.beta(t)
    }
}

/// `(β(t), β̇(t))` with `t` validated to lie in `[0, 1]`.
pub fn beta_at(t: f64, sched: &GibbsSchedule) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
    }
    Ok((sched.beta(t), sched.beta_dot(t)))
}

/// Mixture-path schedule `κ(t) = t^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureSchedule {
    pub exponent: f64,
}

impl MixtureSchedule {
    pub fn kappa(&self, t: f64) -> f64 {
        t.clamp(0.0, 1.0).powf(self.exponent)
    }

    pub fn kappa_dot(&self, t: f64) -> f64 {
        self.exponent * t.clamp(0.0, 1.0).powf(self.exponent - 1.0)
    }
}

/// One coordinate of the state space: its alphabet and weighted metric.
#[derive(Debug, Clone)]
pub struct Axis {
    pub spec: CodebookSpec,
    pub metric: GroundMetric,
    /// Row-major `K x K` table of `weight · d(x, y)`.
    distances: Arc<Vec<f64>>,
}

impl Axis {
    pub fn new(spec: CodebookSpec, metric: GroundMetric, table: Option<&EmbeddingTable>) -> Result<Self> {
        spec.validate()?;
        metric.validate()?;
        let k = spec.size();
        if k < 2 {
            return Err(Error::InvalidArgument("alphabet needs at least two tokens".into()));
        }
        let mut distances = vec![0.0; k * k];
        for x in 0..k {
            for y in x + 1..k {
                let d = metric.weight
                    * ground_distance(TokenId::from_index(x), TokenId::from_index(y), &metric, &spec, table)?;
                distances[x * k + y] = d;
                distances[y * k + x] = d;
            }
        }
        Ok(Axis {
            spec,
            metric,
            distances: Arc::new(distances),
        })
    }

    pub fn size(&self) -> usize {
        self.spec.size()
    }

    /// Weighted distances from every token to `target`.
    #[inline]
    pub fn distances_to(&self, target: usize) -> &[f64] {
        let k = self.size();
        &self.distances[target * k..(target + 1) * k]
    }
}

/// `S = T^D`: a product of per-coordinate alphabets.
#[derive(Debug, Clone)]
pub struct CoordinateSpace {
    axes: Vec<Axis>,
}

impl CoordinateSpace {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidArgument("space needs at least one coordinate".into()));
        }
        if axes.iter().all(|a| a.metric.weight == 0.0) {
            return Err(Error::InvalidArgument("at least one metric weight must be positive".into()));
        }
        Ok(CoordinateSpace { axes })
    }

    /// `dims` coordinates sharing one alphabet and metric.
    pub fn uniform(
        spec: CodebookSpec,
        metric: GroundMetric,
        dims: usize,
        table: Option<&EmbeddingTable>,
    ) -> Result<Self> {
        let axis = Axis::new(spec, metric, table)?;
        Self::new(vec![axis; dims])
    }

    /// Default trajectory space: 8 waypoints × (x, y) on the given codebook.
    pub fn trajectory(spec: CodebookSpec) -> Result<Self> {
        Self::uniform(spec, GroundMetric::scalar_abs(), crate::TRAJECTORY_DIMS, None)
    }

    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    pub fn axis(&self, i: usize) -> &Axis {
        &self.axes[i]
    }

    pub fn check(&self, x: &TrajectoryTokens) -> Result<()> {
        if x.len() != self.dims() {
            return Err(Error::DimensionMismatch(format!(
                "state has {} coordinates, space has {}",
                x.len(),
                self.dims()
            )));
        }
        for (i, t) in x.0.iter().enumerate() {
            self.axes[i].spec.check_token(*t)?;
        }
        Ok(())
    }
}

/// `softmax(-β · distances)` written into `out`.
pub fn gibbs_from_distances(distances: &[f64], beta: f64, out: &mut [f64]) {
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let mut total = 0.0;
    for (o, &d) in out.iter_mut().zip(distances) {
        *o = (-beta * (d - min)).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Per-coordinate Gibbs conditional `p_t(· | x1_i)`.
pub fn gibbs_conditional(
    x1_i: TokenId,
    t: f64,
    space: &CoordinateSpace,
    coord: usize,
    sched: &GibbsSchedule,
) -> Result<Vec<f64>> {
    if coord >= space.dims() {
        return Err(Error::InvalidArgument(format!("coordinate {coord} out of range")));
    }
    let axis = space.axis(coord);
    axis.spec.check_token(x1_i)?;
    let (beta, _) = beta_at(t, sched)?;
    let mut out = vec![0.0; axis.size()];
    gibbs_from_distances(axis.distances_to(x1_i.index()), beta, &mut out);
    Ok(out)
}

/// `(1 - κ) · prior + κ · δ_{x1_i}`.
pub fn mixture_conditional(prior: &[f64], x1_i: TokenId, kappa: f64) -> Result<Vec<f64>> {
    let sum: f64 = prior.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || prior.iter().any(|&p| p < 0.0) {
        return Err(Error::Unnormalized(sum));
    }
    if !(0.0..=1.0).contains(&kappa) {
        return Err(Error::InvalidArgument(format!("kappa {kappa} outside [0, 1]")));
    }
    if x1_i.index() >= prior.len() {
        return Err(Error::InvalidToken {
            id: x1_i.index(),
            size: prior.len(),
        });
    }
    let mut out: Vec<f64> = prior.iter().map(|p| (1.0 - kappa) * p).collect();
    out[x1_i.index()] += kappa;
    Ok(out)
}

/// Masked corruption: the mixture path with a point-mass prior on a reserved
/// mask token, stored at index `alphabet` of the returned distribution.
pub fn mask_conditional(x1_i: TokenId, kappa: f64, alphabet: usize) -> Result<Vec<f64>> {
    let mut prior = vec![0.0; alphabet + 1];
    prior[alphabet] = 1.0;
    mixture_conditional(&prior, x1_i, kappa)
}

/// Samples `x_t ~ p_t(· | x1)` coordinate-wise. Coordinate `i` draws from the
/// substream `(seed, i)`.
pub fn corrupt(
    x1: &TrajectoryTokens,
    t: f64,
    space: &CoordinateSpace,
    sched: &GibbsSchedule,
    seed: u64,
) -> Result<TrajectoryTokens> {
    space.check(x1)?;
    let (beta, _) = beta_at(t, sched)?;
    let mut buf = Vec::new();
    let out = x1
        .0
        .iter()
        .enumerate()
        .map(|(i, &target)| {
            let mut r = rng::stream(seed, &[0xC0, i as u64]);
            corrupt_coordinate(space.axis(i), target, beta, &mut r, &mut buf)
        })
        .collect();
    Ok(TrajectoryTokens(out))
}

pub(crate) fn corrupt_coordinate<R: Rng>(
    axis: &Axis,
    target: TokenId,
    beta: f64,
    r: &mut R,
    buf: &mut Vec<f64>,
) -> TokenId {
    buf.resize(axis.size(), 0.0);
    gibbs_from_distances(axis.distances_to(target.index()), beta, buf);
    TokenId::from_index(rng::sample_weighted(r, buf, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_space(k: usize, weight: f64) -> CoordinateSpace {
        let spec = CodebookSpec::new(0.0, (k - 1) as f64, 1.0).unwrap();
        CoordinateSpace::uniform(spec, GroundMetric::scalar_abs().with_weight(weight), 1, None).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let s = GibbsSchedule::default();
        assert_eq!(beta_at(0.0, &s).unwrap().0, 0.0);
        assert!((beta_at(0.5, &s).unwrap().0 - 3.0).abs() < 1e-12);
        let at_max = s.beta(s.t_max);
        assert!(at_max.is_finite());
        assert_eq!(beta_at(1.0, &s).unwrap().0, at_max);
        assert_eq!(beta_at(0.9995, &s).unwrap().0, at_max);
        assert!(beta_at(1.5, &s).is_err());
        assert!(beta_at(-0.1, &s).is_err());
    }

    #[test]
    fn beta_dot_matches_central_difference() {
        let s = GibbsSchedule::default();
        for &t in &[0.05, 0.2, 0.5, 0.8, 0.95, 0.99] {
            let h = 1e-6;
            let fd = (s.beta(t + h) - s.beta(t - h)) / (2.0 * h);
            let an = s.beta_dot(t);
            assert!((fd - an).abs() / an < 1e-6, "t={t}: {fd} vs {an}");
            assert!(an > 0.0);
        }
    }

    #[test]
    fn beta_strictly_increasing() {
        let s = GibbsSchedule::default();
        let mut prev = -1.0;
        for i in 0..=999 {
            let b = s.beta(i as f64 / 1000.0);
            assert!(b > prev);
            prev = b;
        }
    }

    #[test]
    fn gibbs_examples() {
        let space = small_space(3, 2.0); // distances to token 0: (0, 1, 2)
        let s = GibbsSchedule::default();
        let p = gibbs_conditional(TokenId(0), 0.5, &space, 0, &GibbsSchedule { scale: 1.0, ..s }).unwrap();
        let z: f64 = 1.0 + (-1.0f64).exp() + (-2.0f64).exp();
        let expect = [1.0 / z, (-1.0f64).exp() / z, (-2.0f64).exp() / z];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p[0] - 0.6652).abs() < 1e-4 && (p[1] - 0.2447).abs() < 1e-4 && (p[2] - 0.0900).abs() < 1e-4);

        let u = gibbs_conditional(TokenId(1), 0.0, &space, 0, &s).unwrap();
        assert!(u.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn gibbs_peak_and_positivity() {
        let space = CoordinateSpace::trajectory(CodebookSpec::desk()).unwrap();
        let s = GibbsSchedule::default();
        for &t in &[0.01, 0.3, 0.7, 0.99] {
            let p = gibbs_conditional(TokenId(40), t, &space, 3, &s).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| v > 0.0));
            for (k, &v) in p.iter().enumerate() {
                if k != 40 {
                    assert!(p[40] > v);
                }
            }
        }
        let p = gibbs_conditional(TokenId(40), s.t_max, &space, 0, &s).unwrap();
        assert!(p[40] >= 0.999);
    }

    #[test]
    fn gibbs_shift_invariance() {
        let d = [0.0, 0.3, 0.7, 1.0];
        let shifted: Vec<f64> = d.iter().map(|v| v + 5.0).collect();
        let mut a = [0.0; 4];
        let mut b = [0.0; 4];
        gibbs_from_distances(&d, 2.5, &mut a);
        gibbs_from_distances(&shifted, 2.5, &mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn mixture_examples() {
        let prior = [0.25; 4];
        assert_eq!(mixture_conditional(&prior, TokenId(2), 0.0).unwrap(), prior.to_vec());
        let delta = mixture_conditional(&prior, TokenId(2), 1.0).unwrap();
        assert_eq!(delta, vec![0.0, 0.0, 1.0, 0.0]);
        let mid = mixture_conditional(&prior, TokenId(2), 0.3).unwrap();
        assert!((mid[2] - 0.475).abs() < 1e-12);
        assert!(matches!(
            mixture_conditional(&[0.5, 0.2], TokenId(0), 0.3),
            Err(Error::Unnormalized(_))
        ));
        let m = mask_conditional(TokenId(1), 0.25, 3).unwrap();
        assert_eq!(m, vec![0.0, 0.25, 0.0, 0.75]);
    }

    #[test]
    fn corrupt_is_deterministic_and_checks_input() {
        let space = CoordinateSpace::trajectory(CodebookSpec::desk()).unwrap();
        let s = GibbsSchedule::default();
        let x1 = TrajectoryTokens::from_indices((0..16).map(|i| 10 * i));
        let a = corrupt(&x1, 0.4, &space, &s, 5).unwrap();
        assert_eq!(a, corrupt(&x1, 0.4, &space, &s, 5).unwrap());
        assert_ne!(a, corrupt(&x1, 0.4, &space, &s, 6).unwrap());
        assert!(corrupt(&TrajectoryTokens::from_indices([1, 2]), 0.4, &space, &s, 5).is_err());
    }
}
