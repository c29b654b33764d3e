use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{dot, l2_norm, ParameterVector};
use crate::rng::RngStream;

/// Redraws allowed when a sampled pair is degenerate.
pub const MAX_DRAWS: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Each normalization group (weight row, or whole bias/BN segment) gets
    /// the norm of the same group of the center.
    #[default]
    FilterWise,
    /// Both directions get the norm of the whole center.
    Global,
    None,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::FilterWise => "filter-wise",
            Normalization::Global => "global",
            Normalization::None => "none",
        })
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "filter-wise" | "filter" => Ok(Normalization::FilterWise),
            "global" => Ok(Normalization::Global),
            "none" => Ok(Normalization::None),
            _ => Err(Error::Config(format!("unknown normalization `{s}`"))),
        }
    }
}

/// Orthogonal basis of a plane through a center point.
#[derive(Debug, Clone)]
pub struct DirectionPair {
    pub delta: ParameterVector,
    pub eta_dir: ParameterVector,
    pub orthogonalized: bool,
    pub normalization: Normalization,
}

impl DirectionPair {
    pub fn inner_product(&self) -> f64 {
        dot(self.delta.values(), self.eta_dir.values())
    }
}

/// Removes the component of `e` along `d`, twice for numerical safety.
/// Fails when `d` is zero or `e` is (numerically) parallel to it.
fn orthogonalize(d: &[f64], e: &mut [f64]) -> Result<()> {
    let dd = dot(d, d);
    if dd == 0.0 {
        return Err(Error::Degenerate("direction: zero first direction".into()));
    }
    let before = l2_norm(e);
    for _ in 0..2 {
        let c = dot(e, d) / dd;
        for (ei, di) in e.iter_mut().zip(d) {
            *ei -= c * di;
        }
    }
    if l2_norm(e) <= 1e-12 * before || before == 0.0 {
        return Err(Error::Degenerate("direction pair: directions are parallel".into()));
    }
    Ok(())
}

fn rescale(v: &mut [f64], target: f64) {
    let n = l2_norm(v);
    if n > 0.0 {
        let c = target / n;
        v.iter_mut().for_each(|x| *x *= c);
    }
}

/// Orthogonalizes and normalizes a raw pair of directions around `center`.
///
/// Filter-wise mode orthogonalizes inside every normalization group before
/// rescaling it, so the rescaling cannot undo orthogonality. Groups of a
/// single coordinate cannot be orthogonal on their own; their summed inner
/// product is cancelled by tilting the second direction inside the largest
/// multi-coordinate group, which keeps every group norm intact.
pub fn prepare_directions(
    center: &ParameterVector,
    delta: Vec<f64>,
    eta_dir: Vec<f64>,
    mode: Normalization,
) -> Result<DirectionPair> {
    let layout = center.layout().clone();
    let mut d = delta;
    let mut e = eta_dir;
    if d.len() != layout.len() || e.len() != layout.len() {
        return Err(Error::Layout(format!(
            "directions of length {}/{} for a center of length {}",
            d.len(),
            e.len(),
            layout.len()
        )));
    }
    match mode {
        Normalization::None => orthogonalize(&d, &mut e)?,
        Normalization::Global => {
            orthogonalize(&d, &mut e)?;
            let n = center.norm();
            rescale(&mut d, n);
            rescale(&mut e, n);
        }
        Normalization::FilterWise => filter_wise(center.values(), &layout.normalization_groups(), &mut d, &mut e)?,
    }
    Ok(DirectionPair {
        delta: ParameterVector::new(d, layout.clone())?,
        eta_dir: ParameterVector::new(e, layout)?,
        orthogonalized: true,
        normalization: mode,
    })
}

fn filter_wise(center: &[f64], groups: &[Range<usize>], d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let mut residual = 0.0;
    let mut pivot: Option<(Range<usize>, f64)> = None;
    for g in groups {
        let c = l2_norm(&center[g.clone()]);
        let (dg, eg) = (&mut d[g.clone()], &mut e[g.clone()]);
        if c == 0.0 {
            dg.fill(0.0);
            eg.fill(0.0);
            continue;
        }
        if g.len() == 1 {
            dg[0] = if dg[0] < 0.0 { -c } else { c };
            eg[0] = if eg[0] < 0.0 { -c } else { c };
            residual += dg[0] * eg[0];
            continue;
        }
        orthogonalize(dg, eg)?;
        rescale(dg, c);
        rescale(eg, c);
        if pivot.as_ref().is_none_or(|(_, best)| c > *best) {
            pivot = Some((g.clone(), c));
        }
    }
    if residual != 0.0 {
        let Some((g, c)) = pivot else {
            return Err(Error::Degenerate("direction pair: no group with two or more coordinates".into()));
        };
        let a = -residual / (c * c);
        if a.abs() >= 1.0 {
            return Err(Error::Degenerate("direction pair: single-coordinate groups dominate".into()));
        }
        let b = (1.0 - a * a).sqrt();
        for i in g {
            e[i] = a * d[i] + b * e[i];
        }
    }
    Ok(())
}

/// Draws `δ, η_dir ~ N(0, I)` and prepares them, redrawing degenerate pairs.
pub fn sample_plane(center: &ParameterVector, rng: &RngStream, mode: Normalization) -> Result<DirectionPair> {
    let n = center.len();
    let mut last = None;
    for attempt in 0..MAX_DRAWS {
        let mut v = rng.derive(attempt).standard_normals(2 * n);
        let e = v.split_off(n);
        match prepare_directions(center, v, e, mode) {
            Err(err @ Error::Degenerate(_)) => last = Some(err),
            other => return other,
        }
    }
    Err(last.unwrap_or_else(|| Error::Degenerate("direction pair".into())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Layout;
    use std::sync::Arc;

    #[test]
    fn gram_schmidt_in_two_dimensions() {
        let c = ParameterVector::from_vec(vec![5.0, 5.0]);
        let p = prepare_directions(&c, vec![1.0, 0.0], vec![1.0, 1.0], Normalization::None).unwrap();
        assert_eq!(p.delta.values(), &[1.0, 0.0]);
        assert_eq!(p.eta_dir.values(), &[0.0, 1.0]);
    }

    #[test]
    fn parallel_pair_is_degenerate() {
        let c = ParameterVector::from_vec(vec![1.0, 1.0]);
        let err = prepare_directions(&c, vec![1.0, 2.0], vec![-2.0, -4.0], Normalization::None).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn single_filter_takes_center_norm() {
        let layout = Arc::new(Layout::from_shapes([("conv.weight", vec![1, 2, 2])]));
        let c = ParameterVector::new(vec![1.0, 1.0, 1.0, 1.0], layout).unwrap();
        let p = sample_plane(&c, &RngStream::new(3, 6), Normalization::FilterWise).unwrap();
        assert!((p.delta.norm() - 2.0).abs() < 1e-12);
        assert!((p.eta_dir.norm() - 2.0).abs() < 1e-12);
        assert!(p.inner_product().abs() < 1e-12);
    }

    #[test]
    fn scalar_groups_are_compensated() {
        let layout = Arc::new(Layout::from_shapes([("fc.weight", vec![1, 4]), ("fc.bias", vec![1])]));
        let c = ParameterVector::new(vec![0.5, -1.0, 2.0, 0.1, 0.3], layout).unwrap();
        for s in 0..20 {
            let p = sample_plane(&c, &RngStream::new(s, 6), Normalization::FilterWise).unwrap();
            assert!(p.inner_product().abs() < 1e-12);
            assert!((p.delta.values()[4].abs() - 0.3).abs() < 1e-15);
            assert!((l2_norm(&p.eta_dir.values()[..4]) - l2_norm(&c.values()[..4])).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_center_groups_give_zero_directions() {
        let layout = Arc::new(Layout::from_shapes([("a.weight", vec![2, 2])]));
        let c = ParameterVector::new(vec![0.0, 0.0, 3.0, 4.0], layout).unwrap();
        let p = sample_plane(&c, &RngStream::new(0, 6), Normalization::FilterWise).unwrap();
        assert_eq!(&p.delta.values()[..2], &[0.0, 0.0]);
        assert!((l2_norm(&p.delta.values()[2..]) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn global_mode_matches_center_norm() {
        let c = ParameterVector::from_vec(vec![3.0, 4.0, 0.0]);
        let p = sample_plane(&c, &RngStream::new(1, 6), Normalization::Global).unwrap();
        assert!((p.delta.norm() - 5.0).abs() < 1e-12 && (p.eta_dir.norm() - 5.0).abs() < 1e-12);
        assert!(p.inner_product().abs() < 1e-12);
    }
}
