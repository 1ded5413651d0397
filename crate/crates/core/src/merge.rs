//! Back-merging, post-hoc interpolation and the iterated-merge algebra.
//!
//! Merge-excluded groups (the SID vocabulary) are always copied from the
//! fine-tuned / current side: they have no meaningful counterpart at the
//! origin.
//!
//! Arithmetic is done in `f64` and rounded once to `f32`, so a single merge is
//! correctly rounded and the sign of a merged scalar is always the sign of the
//! exact result.

use serde::{Deserialize, Serialize};

use crate::distance::DistanceMetric;
use crate::error::{Error, Result};
use crate::params::{assert_compatible, MaskKind, ParamStore};

/// Outcome of a while-over-threshold merge loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub merges_applied: u32,
    pub pre_distance: f64,
    pub post_distance: f64,
    pub metric: DistanceMetric,
}

/// `(current + init) / 2` on merge-included scalars; excluded scalars come
/// from `current`.
pub fn back_merge(current: &ParamStore, init: &ParamStore) -> Result<ParamStore> {
    let mut out = current.clone();
    back_merge_in_place(&mut out, init)?;
    Ok(out)
}

pub fn back_merge_in_place(current: &mut ParamStore, init: &ParamStore) -> Result<()> {
    assert_compatible(current, init)?;
    for range in current.masked_view(MaskKind::Merge) {
        let origin = &init.values()[range.clone()];
        for (c, o) in current.values_mut()[range].iter_mut().zip(origin) {
            *c = ((*c as f64 + *o as f64) * 0.5) as f32;
        }
    }
    Ok(())
}

/// `(1 - lambda) * init + lambda * ft` on merge-included scalars; excluded
/// scalars come from `ft`.
pub fn interpolate(init: &ParamStore, ft: &ParamStore, lambda: f64) -> Result<ParamStore> {
    assert_compatible(init, ft)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!(
            "interpolation weight must lie in [0, 1], got {lambda}"
        )));
    }
    let mut out = ft.clone();
    for range in out.masked_view(MaskKind::Merge) {
        let origin = &init.values()[range.clone()];
        for (f, o) in out.values_mut()[range].iter_mut().zip(origin) {
            *f = ((1.0 - lambda) * *o as f64 + lambda * *f as f64) as f32;
        }
    }
    Ok(out)
}

/// `k` consecutive back-merges evaluated in closed form:
/// `theta_k = theta0 / 2^k + (1 - 1/2^k) * init`.
pub fn iterated_merge_closed_form(
    theta0: &ParamStore,
    init: &ParamStore,
    k: u32,
) -> Result<ParamStore> {
    assert_compatible(theta0, init)?;
    if k == 0 {
        return Ok(theta0.clone());
    }
    // 2^-k underflows to 0 for k > 1074, which is the correct limit.
    let w = 0.5f64.powi(k.min(1100) as i32);
    let mut out = theta0.clone();
    for range in out.masked_view(MaskKind::Merge) {
        let origin = &init.values()[range.clone()];
        for (t, o) in out.values_mut()[range].iter_mut().zip(origin) {
            *t = (w * *t as f64 + (1.0 - w) * *o as f64) as f32;
        }
    }
    Ok(out)
}

/// Number of consecutive merges after which coordinate `theta0` takes the
/// sign of `init`.
///
/// Returns `Some(0)` when the sign bits already agree, otherwise the smallest
/// `k` with `2^k > 1 + r` where `r = |theta0| / |init|`. The threshold is
/// found by doubling and compared exactly (`2^k - 1` is exact in `f64` up to
/// `k = 53`; beyond that no `f64` lies strictly between `2^k - 1` and `2^k`).
/// `None` means the coordinate never recovers (non-finite `theta0`).
pub fn flip_step(theta0: f64, init: f64) -> Result<Option<u32>> {
    if init == 0.0 || !init.is_finite() {
        return Err(Error::Domain(format!(
            "origin coordinate must be finite and non-zero, got {init}"
        )));
    }
    if theta0.is_sign_negative() == init.is_sign_negative() {
        return Ok(Some(0));
    }
    if !theta0.is_finite() {
        return Ok(None);
    }
    let r = theta0.abs() / init.abs();
    if !r.is_finite() {
        return Ok(None);
    }
    let mut k = 1u32;
    let mut pow = 2.0f64;
    loop {
        let beats = if k <= 53 { pow - 1.0 > r } else { pow > r };
        if beats {
            return Ok(Some(k));
        }
        pow *= 2.0;
        k += 1;
    }
}

/// Smallest number of consecutive merges that is guaranteed to bring the sign
/// dissimilarity between `theta0` and `init` to zero: the largest
/// [`flip_step`] over distance-included coordinates.
pub fn recovery_bound(theta0: &ParamStore, init: &ParamStore) -> Result<u32> {
    assert_compatible(theta0, init)?;
    let mut bound = 0u32;
    for range in theta0.masked_view(MaskKind::Distance) {
        for (i, (t, o)) in theta0.values()[range.clone()]
            .iter()
            .zip(&init.values()[range.clone()])
            .enumerate()
        {
            match flip_step(*t as f64, *o as f64) {
                Ok(Some(k)) => bound = bound.max(k),
                Ok(None) => {
                    return Err(Error::Domain(format!(
                        "coordinate {} never recovers its sign",
                        range.start + i
                    )))
                }
                Err(_) => {
                    return Err(Error::Domain(format!(
                        "origin coordinate {} is zero; recovery bound undefined",
                        range.start + i
                    )))
                }
            }
        }
    }
    Ok(bound)
}
