//! Masked inter-model distances: Euclidean (L2) and sign dissimilarity (SD).
//!
//! Both only look at distance-included scalars. SD works on packed IEEE sign
//! bits, so `+0.0` and `-0.0` count as different signs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{assert_compatible, MaskKind, ParamStore};

/// Packed sign bits of the distance-included scalars of a store, 64 per word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignBitmap {
    words: Vec<u64>,
    count: usize,
}

impl SignBitmap {
    pub fn from_slice(values: &[f32]) -> Self {
        Self::from_iter_len(values.iter().copied(), values.len())
    }

    fn from_iter_len(values: impl Iterator<Item = f32>, count: usize) -> Self {
        let mut words = vec![0u64; count.div_ceil(64)];
        for (i, v) in values.enumerate() {
            words[i / 64] |= ((v.to_bits() >> 31) as u64) << (i % 64);
        }
        Self { words, count }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Sign bit of the `i`-th included scalar.
    pub fn bit(&self, i: usize) -> bool {
        assert!(i < self.count);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    /// Number of positions whose sign bits differ.
    pub fn xor_popcount(&self, other: &SignBitmap) -> Result<u64> {
        if self.count != other.count {
            return Err(Error::CountMismatch {
                left: self.count,
                right: other.count,
            });
        }
        // Tail bits past `count` are zero in both, so they never contribute.
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as u64)
            .sum())
    }
}

/// Packs the sign bits of every distance-included scalar, in flat order.
pub fn pack_signs(store: &ParamStore) -> SignBitmap {
    SignBitmap::from_iter_len(
        store.masked_values(MaskKind::Distance),
        store.included_count(MaskKind::Distance),
    )
}

/// Fraction of included positions whose sign bits differ. An empty bitmap has
/// dissimilarity 0.
pub fn sign_dissimilarity(a: &SignBitmap, b: &SignBitmap) -> Result<f64> {
    let differing = a.xor_popcount(b)?;
    if a.count == 0 {
        return Ok(0.0);
    }
    Ok(differing as f64 / a.count as f64)
}

pub fn sign_dissimilarity_stores(a: &ParamStore, b: &ParamStore) -> Result<f64> {
    assert_compatible(a, b)?;
    sign_dissimilarity(&pack_signs(a), &pack_signs(b))
}

/// Euclidean norm of `a - b` over distance-included scalars. Accumulates
/// sequentially in `f64` so the result is reproducible.
pub fn l2_distance(a: &ParamStore, b: &ParamStore) -> Result<f64> {
    assert_compatible(a, b)?;
    let mut acc = 0.0f64;
    for range in a.masked_view(MaskKind::Distance) {
        for (x, y) in a.values()[range.clone()].iter().zip(&b.values()[range]) {
            let d = *x as f64 - *y as f64;
            acc += d * d;
        }
    }
    Ok(acc.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Sd,
    L2,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Sd => "sd",
            MetricKind::L2 => "l2",
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sd" => Ok(MetricKind::Sd),
            "l2" => Ok(MetricKind::L2),
            other => Err(Error::InvalidConfig(format!(
                "unknown metric `{other}` (expected sd or l2)"
            ))),
        }
    }
}

/// A distance function paired with the threshold it is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistanceMetric {
    pub kind: MetricKind,
    #[serde(with = "crate::serde_f64_inf")]
    pub threshold: f64,
}

impl DistanceMetric {
    pub fn sd(threshold: f64) -> Self {
        Self {
            kind: MetricKind::Sd,
            threshold,
        }
    }

    pub fn l2(threshold: f64) -> Self {
        Self {
            kind: MetricKind::L2,
            threshold,
        }
    }

    /// L2 needs a strictly positive threshold: halving never reaches zero.
    pub fn validate(&self) -> Result<()> {
        if self.threshold.is_nan() || self.threshold < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "distance threshold must be >= 0, got {}",
                self.threshold
            )));
        }
        if self.kind == MetricKind::L2 && self.threshold <= 0.0 {
            return Err(Error::InvalidConfig(
                "orbit with the l2 metric requires eps > 0 (back-merging halves l2 but never reaches 0)".to_owned(),
            ));
        }
        Ok(())
    }

    pub fn measure(&self, a: &ParamStore, b: &ParamStore) -> Result<f64> {
        match self.kind {
            MetricKind::Sd => sign_dissimilarity_stores(a, b),
            MetricKind::L2 => l2_distance(a, b),
        }
    }
}

/// Measures distances to a fixed origin, caching its sign bitmap.
#[derive(Debug, Clone)]
pub struct OriginProbe {
    origin: ParamStore,
    origin_signs: SignBitmap,
}

impl OriginProbe {
    pub fn new(origin: ParamStore) -> Self {
        let origin_signs = pack_signs(&origin);
        Self {
            origin,
            origin_signs,
        }
    }

    pub fn origin(&self) -> &ParamStore {
        &self.origin
    }

    pub fn sd(&self, current: &ParamStore) -> Result<f64> {
        assert_compatible(current, &self.origin)?;
        sign_dissimilarity(&pack_signs(current), &self.origin_signs)
    }

    pub fn l2(&self, current: &ParamStore) -> Result<f64> {
        l2_distance(current, &self.origin)
    }

    pub fn measure(&self, kind: MetricKind, current: &ParamStore) -> Result<f64> {
        match kind {
            MetricKind::Sd => self.sd(current),
            MetricKind::L2 => self.l2(current),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::GroupSpec;

    fn store(included: &[f32], excluded: &[f32]) -> ParamStore {
        let s = ParamStore::zeros(&[
            GroupSpec::included("core", included.len()),
            GroupSpec::excluded("sid", excluded.len()),
        ])
        .unwrap();
        s.with_values(included.iter().chain(excluded).copied().collect())
    }

    #[test]
    fn l2_three_four_five() {
        let a = store(&[3.0, 4.0], &[]);
        let b = store(&[0.0, 0.0], &[]);
        assert_eq!(l2_distance(&a, &b).unwrap(), 5.0);
        assert_eq!(l2_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn l2_ignores_excluded() {
        let a = store(&[1.0, 1.0, 1.0, 1.0], &[100.0]);
        let b = store(&[0.0, 0.0, 0.0, 0.0], &[0.0]);
        assert_eq!(l2_distance(&a, &b).unwrap(), 2.0);
    }

    #[test]
    fn pack_signs_uses_ieee_sign_bit() {
        let bm = pack_signs(&store(&[1.0, -2.0, 0.0], &[-5.0]));
        assert_eq!(bm.count(), 3);
        assert_eq!((bm.bit(0), bm.bit(1), bm.bit(2)), (false, true, false));
        let neg_zero = pack_signs(&store(&[-0.0], &[]));
        assert!(neg_zero.bit(0));
        let positive = pack_signs(&store(&[0.5; 130], &[]));
        assert!(positive.words().iter().all(|w| *w == 0));
    }

    #[test]
    fn sd_two_of_four() {
        let a = store(&[1.0, -2.0, 3.0, 0.5], &[]);
        let b = store(&[1.0, 2.0, -3.0, 0.5], &[]);
        assert_eq!(sign_dissimilarity_stores(&a, &b).unwrap(), 0.5);
        assert_eq!(sign_dissimilarity_stores(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn sd_zero_signs_differ() {
        let a = store(&[0.0], &[]);
        let b = store(&[-0.0], &[]);
        assert_eq!(sign_dissimilarity_stores(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn sd_count_mismatch() {
        let a = SignBitmap::from_slice(&[1.0, 2.0]);
        let b = SignBitmap::from_slice(&[1.0]);
        assert!(matches!(
            sign_dissimilarity(&a, &b),
            Err(Error::CountMismatch { left: 2, right: 1 })
        ));
    }

    #[test]
    fn sd_requires_compatible_stores() {
        let a = store(&[1.0, 2.0], &[]);
        let b = store(&[1.0], &[2.0]);
        assert!(matches!(
            sign_dissimilarity_stores(&a, &b),
            Err(Error::Incompatible { .. })
        ));
        assert!(matches!(
            l2_distance(&a, &b),
            Err(Error::Incompatible { .. })
        ));
    }

    #[test]
    fn l2_metric_rejects_zero_threshold() {
        assert!(DistanceMetric::l2(0.0).validate().is_err());
        assert!(DistanceMetric::l2(1e-3).validate().is_ok());
        assert!(DistanceMetric::sd(0.0).validate().is_ok());
        assert!(DistanceMetric::sd(-1.0).validate().is_err());
        assert!(DistanceMetric::sd(f64::INFINITY).validate().is_ok());
    }

    #[test]
    fn origin_probe_matches_free_functions() {
        let a = store(&[1.0, -2.0, 3.0, 0.5], &[9.0]);
        let b = store(&[1.0, 2.0, -3.0, 0.25], &[-9.0]);
        let probe = OriginProbe::new(b.clone());
        assert_eq!(
            probe.sd(&a).unwrap(),
            sign_dissimilarity_stores(&a, &b).unwrap()
        );
        assert_eq!(probe.l2(&a).unwrap(), l2_distance(&a, &b).unwrap());
    }

    #[test]
    fn metric_kind_parses() {
        assert_eq!("SD".parse::<MetricKind>().unwrap(), MetricKind::Sd);
        assert_eq!("l2".parse::<MetricKind>().unwrap(), MetricKind::L2);
        assert!("cos".parse::<MetricKind>().is_err());
    }
}
