//! Uniform scalar codebook and the ground metrics defined over it.
//!
//! A codebook covers `[min, max]` with a fixed resolution; token `k` stands
//! for the value `min + k * resolution`. Ground metrics measure how far two
//! tokens are apart and drive both the probability path and the CTMC rates.

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};

/// Index of a codebook entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    #[inline]
    pub fn from_index(i: usize) -> Self {
        TokenId(i as u32)
    }
}

/// A full discrete state: one token per coordinate.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrajectoryTokens(pub Vec<TokenId>);

impl TrajectoryTokens {
    pub fn from_indices(ids: impl IntoIterator<Item = usize>) -> Self {
        TrajectoryTokens(ids.into_iter().map(TokenId::from_index).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> TokenId {
        self.0[i]
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().map(|t| t.index())
    }
}

/// Uniform scalar codebook over `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookSpec {
    pub min: f64,
    pub max: f64,
    pub resolution: f64,
}

const GRID_TOLERANCE: f64 = 1e-6;
const TIE_TOLERANCE: f64 = 1e-9;

impl CodebookSpec {
    pub fn new(min: f64, max: f64, resolution: f64) -> Result<Self> {
        let spec = CodebookSpec {
            min,
            max,
            resolution,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// [-100, 100] at 0.01: 20,001 tokens.
    pub fn full_scale() -> Self {
        CodebookSpec {
            min: -100.0,
            max: 100.0,
            resolution: 0.01,
        }
    }

    /// [-8, 8] at 0.1: 161 tokens.
    pub fn desk() -> Self {
        CodebookSpec {
            min: -8.0,
            max: 8.0,
            resolution: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.resolution.is_finite()) {
            return Err(Error::InvalidCodebook("non-finite field".into()));
        }
        if self.max <= self.min {
            return Err(Error::InvalidCodebook(format!(
                "max {} must exceed min {}",
                self.max, self.min
            )));
        }
        if self.resolution <= 0.0 {
            return Err(Error::InvalidCodebook(format!(
                "resolution {} must be positive",
                self.resolution
            )));
        }
        let steps = (self.max - self.min) / self.resolution;
        if (steps - steps.round()).abs() > GRID_TOLERANCE * steps.max(1.0) {
            return Err(Error::InvalidCodebook(format!(
                "range {}..{} is not a whole number of {} steps",
                self.min, self.max, self.resolution
            )));
        }
        Ok(())
    }

    /// Number of codebook entries, `round((max - min) / resolution) + 1`.
    pub fn size(&self) -> usize {
        ((self.max - self.min) / self.resolution).round() as usize + 1
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    /// Value of token `k` without bounds checking.
    #[inline]
    pub fn value_of(&self, k: usize) -> f64 {
        self.min + k as f64 * self.resolution
    }

    /// Nearest codebook entry to `value`. Exact half-way ties go to the even
    /// index. Out-of-range values are clamped unless `strict` is set.
    pub fn quantize(&self, value: f64, strict: bool) -> Result<TokenId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(value));
        }
        let n = self.size();
        let pos = (value - self.min) / self.resolution;
        let upper = (n - 1) as f64;
        let slack = TIE_TOLERANCE * upper.max(1.0);
        if pos < -slack || pos > upper + slack {
            if strict {
                return Err(Error::OutOfRange {
                    value,
                    min: self.min,
                    max: self.max,
                });
            }
            return Ok(TokenId::from_index(if pos < 0.0 { 0 } else { n - 1 }));
        }
        let floor = pos.floor();
        let frac = pos - floor;
        let idx = if (frac - 0.5).abs() <= TIE_TOLERANCE {
            if (floor as i64) % 2 == 0 {
                floor
            } else {
                floor + 1.0
            }
        } else {
            pos.round()
        };
        Ok(TokenId::from_index(idx.clamp(0.0, upper) as usize))
    }

    pub fn dequantize(&self, id: TokenId) -> Result<f64> {
        let n = self.size();
        if id.index() >= n {
            return Err(Error::InvalidToken {
                id: id.index(),
                size: n,
            });
        }
        Ok(self.value_of(id.index()))
    }

    pub fn check_token(&self, id: TokenId) -> Result<()> {
        let n = self.size();
        if id.index() >= n {
            Err(Error::InvalidToken {
                id: id.index(),
                size: n,
            })
        } else {
            Ok(())
        }
    }
}

/// How two tokens of one coordinate are compared.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricKind {
    /// `|v_i - v_j|` divided by the codebook range.
    ScalarAbs,
    /// Euclidean distance between unit embeddings.
    EmbeddingL2,
    /// Wrap-around distance on dequantized angles.
    Circular { period: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundMetric {
    pub kind: MetricKind,
    pub weight: f64,
}

impl GroundMetric {
    pub fn scalar_abs() -> Self {
        GroundMetric {
            kind: MetricKind::ScalarAbs,
            weight: 1.0,
        }
    }

    pub fn embedding_l2() -> Self {
        GroundMetric {
            kind: MetricKind::EmbeddingL2,
            weight: 1.0,
        }
    }

    pub fn circular(period: f64) -> Self {
        GroundMetric {
            kind: MetricKind::Circular { period },
            weight: 1.0,
        }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight.is_finite() && self.weight >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "metric weight {} must be finite and nonnegative",
                self.weight
            )));
        }
        if let MetricKind::Circular { period } = self.kind {
            if !(period.is_finite() && period > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "circular period {period} must be positive"
                )));
            }
        }
        Ok(())
    }
}

/// Unweighted distance between tokens `i` and `j` under `metric`.
pub fn ground_distance(
    i: TokenId,
    j: TokenId,
    metric: &GroundMetric,
    spec: &CodebookSpec,
    table: Option<&EmbeddingTable>,
) -> Result<f64> {
    let a = spec.dequantize(i)?;
    let b = spec.dequantize(j)?;
    match metric.kind {
        MetricKind::ScalarAbs => Ok((a - b).abs() / spec.range()),
        MetricKind::EmbeddingL2 => {
            let table = table.ok_or(Error::MissingEmbeddingTable)?;
            if table.len() != spec.size() {
                return Err(Error::DimensionMismatch(format!(
                    "table has {} rows, codebook has {}",
                    table.len(),
                    spec.size()
                )));
            }
            Ok(table.distance(i.index(), j.index()))
        }
        MetricKind::Circular { period } => Ok(circular_distance(a, b, period)),
    }
}

pub fn circular_distance(a: f64, b: f64, period: f64) -> f64 {
    let delta = (a - b).abs().rem_euclid(period);
    delta.min(period - delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_nearest(spec: &CodebookSpec, v: f64) -> usize {
        (0..spec.size())
            .min_by(|&a, &b| {
                (spec.value_of(a) - v)
                    .abs()
                    .partial_cmp(&(spec.value_of(b) - v).abs())
                    .unwrap()
            })
            .unwrap()
    }

    #[test]
    fn sizes() {
        assert_eq!(CodebookSpec::full_scale().size(), 20_001);
        assert_eq!(CodebookSpec::desk().size(), 161);
        assert!(CodebookSpec::new(0.0, 1.0, 0.3).is_err());
        assert!(CodebookSpec::new(1.0, 0.0, 0.1).is_err());
        assert!(CodebookSpec::new(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn quantize_examples() {
        let s = CodebookSpec::full_scale();
        assert_eq!(s.quantize(-100.0, true).unwrap(), TokenId(0));
        assert_eq!(s.quantize(0.0, true).unwrap(), TokenId(10_000));
        assert_eq!(brute_nearest(&s, 0.013), 10_001);
        assert_eq!(s.quantize(0.013, true).unwrap(), TokenId(10_001));
    }

    #[test]
    fn dequantize_examples() {
        let s = CodebookSpec::full_scale();
        assert_eq!(s.dequantize(TokenId(10_000)).unwrap(), 0.0);
        assert_eq!(s.dequantize(TokenId(0)).unwrap(), -100.0);
        assert!(matches!(
            s.dequantize(TokenId(20_001)),
            Err(Error::InvalidToken { .. })
        ));
    }

    #[test]
    fn half_way_ties_go_even() {
        let s = CodebookSpec::new(0.0, 10.0, 1.0).unwrap();
        assert_eq!(s.quantize(0.5, true).unwrap(), TokenId(0));
        assert_eq!(s.quantize(1.5, true).unwrap(), TokenId(2));
        assert_eq!(s.quantize(2.5, true).unwrap(), TokenId(2));
        let d = CodebookSpec::desk();
        // 0.05 sits half-way between tokens 80 and 81.
        assert_eq!(d.quantize(0.05, true).unwrap(), TokenId(80));
        assert_eq!(d.quantize(0.15, true).unwrap(), TokenId(82));
    }

    #[test]
    fn range_handling() {
        let s = CodebookSpec::desk();
        assert!(matches!(
            s.quantize(8.5, true),
            Err(Error::OutOfRange { .. })
        ));
        assert_eq!(s.quantize(8.5, false).unwrap(), TokenId(160));
        assert_eq!(s.quantize(-1e9, false).unwrap(), TokenId(0));
        assert!(matches!(
            s.quantize(f64::NAN, false),
            Err(Error::NonFinite(_))
        ));
        assert!(s.quantize(f64::INFINITY, false).is_err());
    }

    #[test]
    fn roundtrip_sweep() {
        use rand::Rng;
        let s = CodebookSpec::full_scale();
        let mut rng = crate::rng::stream(3, &[]);
        for _ in 0..1000 {
            let v: f64 = rng.gen_range(-100.0..=100.0);
            let back = s.dequantize(s.quantize(v, true).unwrap()).unwrap();
            assert!((back - v).abs() <= s.resolution / 2.0 + 1e-9);
        }
    }

    #[test]
    fn distance_examples() {
        let s = CodebookSpec::desk();
        let n = s.size();
        let m = GroundMetric::scalar_abs();
        let full = ground_distance(TokenId(0), TokenId::from_index(n - 1), &m, &s, None).unwrap();
        assert!((full - 1.0).abs() < 1e-12);
        assert!(matches!(
            ground_distance(TokenId(0), TokenId(1), &GroundMetric::embedding_l2(), &s, None),
            Err(Error::MissingEmbeddingTable)
        ));

        let tau = std::f64::consts::TAU;
        assert!((circular_distance(0.1, tau - 0.1, tau) - 0.2).abs() < 1e-12);
        let angles = CodebookSpec::new(0.0, 6.3, 0.1).unwrap();
        let c = GroundMetric::circular(tau);
        let d = ground_distance(TokenId(1), TokenId(62), &c, &angles, None).unwrap();
        // 0.1 and 6.2 are 2π - 6.1 apart going the short way.
        assert!((d - (tau - 6.1)).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn quantize_matches_brute_force(v in -8.0f64..8.0) {
            let s = CodebookSpec::desk();
            let pos = (v - s.min) / s.resolution;
            prop_assume!((pos - pos.floor() - 0.5).abs() > 1e-6);
            prop_assert_eq!(s.quantize(v, true).unwrap().index(), brute_nearest(&s, v));
        }

        #[test]
        fn quantize_inverts_dequantize(k in 0usize..161) {
            let s = CodebookSpec::desk();
            let v = s.dequantize(TokenId::from_index(k)).unwrap();
            prop_assert_eq!(s.quantize(v, true).unwrap().index(), k);
        }

        #[test]
        fn distances_symmetric_and_zero_on_diagonal(i in 0u32..161, j in 0u32..161) {
            let s = CodebookSpec::desk();
            for m in [GroundMetric::scalar_abs(), GroundMetric::circular(std::f64::consts::TAU)] {
                let a = ground_distance(TokenId(i), TokenId(j), &m, &s, None).unwrap();
                let b = ground_distance(TokenId(j), TokenId(i), &m, &s, None).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert_eq!(ground_distance(TokenId(i), TokenId(i), &m, &s, None).unwrap(), 0.0);
            }
            let c = ground_distance(TokenId(i), TokenId(j), &GroundMetric::circular(1.0), &s, None).unwrap();
            prop_assert!(c <= 0.5 + 1e-12);
        }
    }
}
