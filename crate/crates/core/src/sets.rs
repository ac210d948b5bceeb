//! Axis-aligned boxes, the zone-tracking stage cost and target-set shrinkage.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{disturbance_sensitivity, SystemModel};
use crate::error::{Result, ZmpcError};

/// Axis-aligned box `{x : lb <= x <= ub}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BoxSet {
    lb: Vec<f64>,
    ub: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBox {
    lb: Vec<f64>,
    ub: Vec<f64>,
}

impl TryFrom<RawBox> for BoxSet {
    type Error = ZmpcError;
    fn try_from(r: RawBox) -> Result<Self> {
        BoxSet::new(r.lb, r.ub)
    }
}

impl From<BoxSet> for RawBox {
    fn from(b: BoxSet) -> Self {
        RawBox { lb: b.lb, ub: b.ub }
    }
}

impl BoxSet {
    pub fn new(lb: Vec<f64>, ub: Vec<f64>) -> Result<Self> {
        if lb.len() != ub.len() {
            return Err(ZmpcError::EmptySet(format!(
                "bound lengths differ ({} vs {})",
                lb.len(),
                ub.len()
            )));
        }
        if lb.is_empty() {
            return Err(ZmpcError::EmptySet("zero-dimensional box".into()));
        }
        for (i, (l, u)) in lb.iter().zip(&ub).enumerate() {
            if !(l.is_finite() && u.is_finite()) {
                return Err(ZmpcError::EmptySet(format!("non-finite bound on dimension {i}")));
            }
            if l > u {
                return Err(ZmpcError::EmptySet(format!("lb {l} > ub {u} on dimension {i}")));
            }
        }
        Ok(Self { lb, ub })
    }

    /// Degenerate box holding a single point.
    pub fn point(x: &[f64]) -> Result<Self> {
        Self::new(x.to_vec(), x.to_vec())
    }

    pub fn lb(&self) -> &[f64] {
        &self.lb
    }

    pub fn ub(&self) -> &[f64] {
        &self.ub
    }

    pub fn dim(&self) -> usize {
        self.lb.len()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lb.iter().zip(&self.ub).map(|(l, u)| u - l).collect()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lb.iter().zip(&self.ub).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn volume(&self) -> f64 {
        self.widths().iter().product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lb.iter().zip(&self.ub))
                .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    pub fn is_subset_of(&self, other: &BoxSet) -> bool {
        self.dim() == other.dim()
            && (0..self.dim()).all(|i| other.lb[i] <= self.lb[i] && self.ub[i] <= other.ub[i])
    }

    /// Element-wise distance to the box: `max(0, x - ub) + max(0, lb - x)`.
    pub fn residual(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lb.iter().zip(&self.ub))
            .map(|(v, (l, u))| (v - u).max(0.0) + (l - v).max(0.0))
            .collect()
    }

    pub fn residual_l1(&self, x: &[f64]) -> f64 {
        self.residual(x).iter().sum()
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lb.iter().zip(&self.ub))
            .map(|(v, (l, u))| v.clamp(*l, *u))
            .collect()
    }

    /// Smallest distance from `x` to a face, negative when outside.
    pub fn signed_margin(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(self.lb.iter().zip(&self.ub))
            .map(|(v, (l, u))| (v - l).min(u - v))
            .fold(f64::INFINITY, f64::min)
    }

    /// Vertex selected by `max_first` bits: `true` picks the upper bound.
    pub fn vertex(&self, upper: &[bool]) -> Vec<f64> {
        upper
            .iter()
            .enumerate()
            .map(|(i, &hi)| if hi { self.ub[i] } else { self.lb[i] })
            .collect()
    }
}

/// Zone-tracking stage cost `min_{z in target} c1 |x - z|_1 + c2 |x - z|_2^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneCostSpec {
    pub c1: f64,
    pub c2: f64,
    pub target: BoxSet,
}

impl ZoneCostSpec {
    pub fn new(c1: f64, c2: f64, target: BoxSet) -> Result<Self> {
        let spec = Self { c1, c2, target };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c1 >= 0.0 && self.c2 >= 0.0 && self.c1 + self.c2 > 0.0) {
            return Err(ZmpcError::InvalidConfig(format!(
                "zone weights must be non-negative and not both zero (c1={}, c2={})",
                self.c1, self.c2
            )));
        }
        Ok(())
    }
}

/// Closed form of the zone cost: the optimal slack is the projection of `x`
/// onto the box, and both norms separate over coordinates.
pub fn zone_cost(x: &[f64], spec: &ZoneCostSpec) -> f64 {
    spec.target
        .residual(x)
        .iter()
        .map(|r| spec.c1 * r + spec.c2 * r * r)
        .sum()
}

/// Shrink amount `s = gamma * |x^d_max|` restricted to tracked dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageSpec {
    pub gamma: f64,
    pub tracked_mask: Vec<bool>,
    pub xd_max: Vec<f64>,
    /// Per-bound switches for one-sided shrinkage; `None` shrinks both faces.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shrink_lower: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shrink_upper: Option<Vec<bool>>,
}

impl ShrinkageSpec {
    pub fn new(gamma: f64, tracked_mask: Vec<bool>, xd_max: Vec<f64>) -> Result<Self> {
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(ZmpcError::InvalidConfig(format!(
                "risk factor must be non-negative, got {gamma}"
            )));
        }
        if tracked_mask.len() != xd_max.len() {
            return Err(ZmpcError::DimensionMismatch(
                "tracked mask and x^d_max lengths differ".into(),
            ));
        }
        Ok(Self {
            gamma,
            tracked_mask,
            xd_max,
            shrink_lower: None,
            shrink_upper: None,
        })
    }

    pub fn s(&self) -> Vec<f64> {
        self.xd_max
            .iter()
            .zip(&self.tracked_mask)
            .map(|(d, &m)| if m { self.gamma * d.abs() } else { 0.0 })
            .collect()
    }
}

/// Modified target `lb + s <= x <= ub - s`.
pub fn shrink_target(target: &BoxSet, spec: &ShrinkageSpec) -> Result<BoxSet> {
    let s = spec.s();
    if s.len() != target.dim() {
        return Err(ZmpcError::DimensionMismatch(format!(
            "shrink vector has {} entries for a {}-dimensional target",
            s.len(),
            target.dim()
        )));
    }
    let flag = |m: &Option<Vec<bool>>, i: usize| m.as_ref().map_or(true, |v| v.get(i).copied().unwrap_or(true));
    let mut lb = target.lb().to_vec();
    let mut ub = target.ub().to_vec();
    for i in 0..s.len() {
        if flag(&spec.shrink_lower, i) {
            lb[i] += s[i];
        }
        if flag(&spec.shrink_upper, i) {
            ub[i] -= s[i];
        }
        if lb[i] > ub[i] {
            return Err(ZmpcError::EmptyModifiedSet {
                dim: i,
                lb: lb[i],
                ub: ub[i],
            });
        }
    }
    BoxSet::new(lb, ub)
}

/// Tracked dimensions are those where the target is strictly tighter than
/// the state constraints on at least one side.
pub fn tracked_mask_from_bounds(state_bounds: &BoxSet, target: &BoxSet) -> Vec<bool> {
    (0..state_bounds.dim())
        .map(|i| state_bounds.lb()[i] < target.lb()[i] || state_bounds.ub()[i] > target.ub()[i])
        .collect()
}

/// Result of the extreme-point sensitivity search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XdMaxEstimate {
    pub xd_max: Vec<f64>,
    pub argmax_x: Vec<f64>,
    pub argmax_u: Vec<f64>,
    pub argmax_w: Vec<f64>,
    pub corner_index: usize,
}

impl XdMaxEstimate {
    pub fn norm(&self) -> f64 {
        self.xd_max.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Largest masked one-step disturbance effect over the corners of
/// `cis_box x U x W`.
///
/// Corner `k` reads its bits most-significant first over `[x, u, w]`; a zero
/// bit selects the upper bound. Equal norms keep the smallest index.
pub fn estimate_xd_max(
    model: &SystemModel,
    cis_box: &BoxSet,
    inputs: &BoxSet,
    disturbances: &BoxSet,
    tracked_mask: &[bool],
) -> Result<XdMaxEstimate> {
    let nx = model.state_dim();
    let nu = model.input_dim();
    let nw = model.disturbance_dim();
    if cis_box.dim() != nx || inputs.dim() != nu || disturbances.dim() != nw || tracked_mask.len() != nx {
        return Err(ZmpcError::DimensionMismatch(
            "boxes and mask must match the model dimensions".into(),
        ));
    }
    let dims = nx + nu + nw;
    if dims >= usize::BITS as usize {
        return Err(ZmpcError::DimensionMismatch("too many corner dimensions".into()));
    }
    let corner = |k: usize| -> Vec<bool> { (0..dims).map(|d| (k >> (dims - 1 - d)) & 1 == 0).collect() };

    let evaluated: Vec<Result<(Vec<f64>, f64)>> = (0..1usize << dims)
        .into_par_iter()
        .map(|k| {
            let bits = corner(k);
            let x = cis_box.vertex(&bits[..nx]);
            let u = inputs.vertex(&bits[nx..nx + nu]);
            let w = disturbances.vertex(&bits[nx + nu..]);
            let sens = disturbance_sensitivity(model, &x, &u, &w, disturbances)?;
            let effect: Vec<f64> = (0..nx)
                .map(|i| {
                    let v: f64 = (0..nw).map(|j| sens[(i, j)] * w[j]).sum();
                    if tracked_mask[i] {
                        v
                    } else {
                        0.0
                    }
                })
                .collect();
            let norm = effect.iter().map(|v| v * v).sum::<f64>().sqrt();
            Ok((effect, norm))
        })
        .collect();

    let mut best: Option<(usize, Vec<f64>, f64)> = None;
    for (k, r) in evaluated.into_iter().enumerate() {
        let (effect, norm) = r?;
        if best.as_ref().map_or(true, |b| norm > b.2) {
            best = Some((k, effect, norm));
        }
    }
    let (k, effect, _) = best.expect("at least one corner");
    let bits = corner(k);
    Ok(XdMaxEstimate {
        xd_max: effect,
        argmax_x: cis_box.vertex(&bits[..nx]),
        argmax_u: inputs.vertex(&bits[nx..nx + nu]),
        argmax_w: disturbances.vertex(&bits[nx + nu..]),
        corner_index: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{CstrParameters, LinearModel};
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn bx(lb: &[f64], ub: &[f64]) -> BoxSet {
        BoxSet::new(lb.to_vec(), ub.to_vec()).unwrap()
    }

    #[test]
    fn invalid_boxes_are_rejected() {
        assert!(matches!(BoxSet::new(vec![1.0], vec![0.0]), Err(ZmpcError::EmptySet(_))));
        assert!(BoxSet::new(vec![0.0, 0.0], vec![1.0]).is_err());
        assert!(BoxSet::new(vec![f64::NAN], vec![1.0]).is_err());
        let json = r#"{"lb":[2.0],"ub":[1.0]}"#;
        assert!(serde_json::from_str::<BoxSet>(json).is_err());
    }

    #[test]
    fn zone_cost_examples() {
        let spec = ZoneCostSpec::new(1.0, 1.0, bx(&[348.0], &[352.0])).unwrap();
        assert_eq!(zone_cost(&[350.0], &spec), 0.0);
        assert_eq!(zone_cost(&[353.0], &spec), 2.0);
        let spec = ZoneCostSpec::new(1.0, 1.0, bx(&[0.0, 348.0], &[1.0, 352.0])).unwrap();
        let c = zone_cost(&[1.2, 353.0], &spec);
        assert!((c - 2.24).abs() < 1e-12, "{c}");
    }

    #[test]
    fn zone_weights_must_not_vanish() {
        assert!(ZoneCostSpec::new(0.0, 0.0, bx(&[0.0], &[1.0])).is_err());
        assert!(ZoneCostSpec::new(-1.0, 2.0, bx(&[0.0], &[1.0])).is_err());
    }

    #[test]
    fn zone_cost_matches_brute_force_slack_search() {
        let target = bx(&[0.0, 348.0], &[1.0, 352.0]);
        let spec = ZoneCostSpec::new(3.0, 2.0, target.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 200;
        for _ in 0..200 {
            let x = [rng.random_range(-0.5..1.5), rng.random_range(343.0..357.0)];
            // The objective separates, so each axis is searched independently.
            let mut per_axis = [f64::INFINITY; 2];
            for d in 0..2 {
                for k in 0..n {
                    let z = target.lb()[d] + (target.ub()[d] - target.lb()[d]) * k as f64 / (n - 1) as f64;
                    let r = (x[d] - z).abs();
                    per_axis[d] = per_axis[d].min(3.0 * r + 2.0 * r * r);
                }
            }
            let best = per_axis[0] + per_axis[1];
            let closed = zone_cost(&x, &spec);
            // Grid spacing h bounds the slack error; the cost grows at most
            // (c1 + 2 c2 (r + h)) h per axis.
            let bound: f64 = (0..2)
                .map(|d| {
                    let h = target.widths()[d] / (n - 1) as f64;
                    let r = target.residual(&x)[d];
                    (3.0 + 4.0 * (r + h)) * h
                })
                .sum();
            assert!(closed <= best + 1e-12);
            assert!(best - closed <= bound, "{best} vs {closed}");
        }
    }

    #[test]
    fn shrink_examples() {
        let target = bx(&[0.0, 348.0], &[1.0, 352.0]);
        let zero = ShrinkageSpec::new(0.0, vec![false, true], vec![0.0, 0.511]).unwrap();
        assert_eq!(shrink_target(&target, &zero).unwrap(), target);

        let one = ShrinkageSpec::new(1.0, vec![false, true], vec![0.0, 0.511]).unwrap();
        let m = shrink_target(&target, &one).unwrap();
        assert_eq!(m.lb(), &[0.0, 348.511]);
        assert!((m.ub()[1] - 351.489).abs() < 1e-12);
        assert_eq!(m.ub()[0], 1.0);

        let scalar = ShrinkageSpec::new(1.0, vec![true], vec![0.6]).unwrap();
        assert!(matches!(
            shrink_target(&bx(&[0.0], &[1.0]), &scalar),
            Err(ZmpcError::EmptyModifiedSet { dim: 0, .. })
        ));
    }

    #[test]
    fn one_sided_shrinkage() {
        let mut spec = ShrinkageSpec::new(1.0, vec![false, true], vec![0.0, 0.5]).unwrap();
        spec.shrink_lower = Some(vec![false, false]);
        let m = shrink_target(&bx(&[0.0, 348.0], &[1.0, 352.0]), &spec).unwrap();
        assert_eq!(m.lb(), &[0.0, 348.0]);
        assert_eq!(m.ub(), &[1.0, 351.5]);
    }

    #[test]
    fn untracked_dimensions_are_not_shrunk() {
        let spec = ShrinkageSpec::new(2.0, vec![false, true], vec![0.3, -0.4]).unwrap();
        assert_eq!(spec.s(), vec![0.0, 0.8]);
    }

    #[test]
    fn mask_follows_bound_comparison() {
        let x = bx(&[0.0, 345.0], &[1.0, 355.0]);
        let t = bx(&[0.0, 348.0], &[1.0, 352.0]);
        assert_eq!(tracked_mask_from_bounds(&x, &t), vec![false, true]);
    }

    fn linear_model(e: &[f64]) -> SystemModel {
        let lin = LinearModel::new(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(2, 2, e),
        )
        .unwrap();
        SystemModel::discrete(Arc::new(lin))
    }

    #[test]
    fn zero_disturbance_box_gives_zero_deviation() {
        let m = linear_model(&[1.0, 2.0, -0.5, 0.3]);
        let est = estimate_xd_max(
            &m,
            &bx(&[0.0, 0.0], &[1.0, 1.0]),
            &bx(&[-1.0], &[1.0]),
            &bx(&[0.0, 0.0], &[0.0, 0.0]),
            &[true, true],
        )
        .unwrap();
        assert_eq!(est.xd_max, vec![0.0, 0.0]);
    }

    #[test]
    fn linear_xd_max_matches_corner_enumeration() {
        let e = [1.0, 2.0, -0.5, 0.3];
        let m = linear_model(&e);
        let wb = bx(&[-0.2, -1.0], &[0.1, 2.0]);
        let est = estimate_xd_max(&m, &bx(&[0.0, 0.0], &[1.0, 1.0]), &bx(&[-1.0], &[1.0]), &wb, &[true, true]).unwrap();
        let mut best = 0.0f64;
        for w0 in [-0.2, 0.1] {
            for w1 in [-1.0, 2.0] {
                let d = [e[0] * w0 + e[1] * w1, e[2] * w0 + e[3] * w1];
                best = best.max((d[0] * d[0] + d[1] * d[1]).sqrt());
            }
        }
        assert!((est.norm() - best).abs() < 1e-8);
        assert_eq!(est.argmax_w, vec![0.1, 2.0]);
    }

    #[test]
    fn ties_prefer_upper_corners() {
        // Successor depends on w only and the box is symmetric, so every
        // corner pair +-w yields bit-identical norms.
        let lin = LinearModel::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 1), DMatrix::identity(2, 2)).unwrap();
        let m = SystemModel::discrete(Arc::new(lin));
        let est = estimate_xd_max(
            &m,
            &bx(&[0.0, 0.0], &[1.0, 1.0]),
            &bx(&[-1.0], &[1.0]),
            &bx(&[-1.0, -1.0], &[1.0, 1.0]),
            &[true, true],
        )
        .unwrap();
        assert_eq!(est.corner_index, 0);
        assert_eq!(est.argmax_w, vec![1.0, 1.0]);
        assert_eq!(est.argmax_x, vec![1.0, 1.0]);
    }

    #[test]
    fn cstr_extreme_point_sits_on_hot_face() {
        let model = SystemModel::cstr(CstrParameters::default(), 0.08, 8).unwrap();
        let est = estimate_xd_max(
            &model,
            &bx(&[0.25, 348.0], &[0.76, 352.0]),
            &bx(&[285.0], &[315.0]),
            &bx(&[-0.1, -2.0], &[0.1, 2.0]),
            &[false, true],
        )
        .unwrap();
        assert_eq!(est.argmax_x[1], 352.0);
        assert_eq!(est.argmax_u, vec![315.0]);
        assert_eq!(est.argmax_w, vec![0.1, 2.0]);
        assert_eq!(est.xd_max[0], 0.0);
        assert!(est.norm() > 0.3 && est.norm() < 0.8, "{}", est.norm());
    }

    proptest! {
        #[test]
        fn zone_cost_zero_iff_inside(x0 in -1.0f64..2.0, x1 in 340.0f64..360.0) {
            let spec = ZoneCostSpec::new(1.5, 0.5, bx(&[0.0, 348.0], &[1.0, 352.0])).unwrap();
            let c = zone_cost(&[x0, x1], &spec);
            prop_assert!(c >= 0.0);
            prop_assert_eq!(c == 0.0, spec.target.contains(&[x0, x1]));
        }

        #[test]
        fn zone_cost_is_midpoint_convex(a0 in -1.0f64..2.0, a1 in 340.0f64..360.0,
                                        b0 in -1.0f64..2.0, b1 in 340.0f64..360.0) {
            let spec = ZoneCostSpec::new(2.0, 3.0, bx(&[0.0, 348.0], &[1.0, 352.0])).unwrap();
            let mid = [(a0 + b0) / 2.0, (a1 + b1) / 2.0];
            let lhs = zone_cost(&mid, &spec);
            let rhs = 0.5 * (zone_cost(&[a0, a1], &spec) + zone_cost(&[b0, b1], &spec));
            prop_assert!(lhs <= rhs + 1e-9);
        }

        #[test]
        fn shrunk_box_is_subset_and_scales_with_gamma(gamma in 0.0f64..2.0, d0 in -1.0f64..1.0, d1 in -1.0f64..1.0) {
            let target = bx(&[-3.0, 10.0], &[3.0, 20.0]);
            let spec = ShrinkageSpec::new(gamma, vec![true, true], vec![d0, d1]).unwrap();
            let doubled = ShrinkageSpec::new(2.0 * gamma, vec![true, true], vec![d0, d1]).unwrap();
            for (s, s2) in spec.s().iter().zip(doubled.s()) {
                prop_assert_eq!(2.0 * s, s2);
            }
            let m = shrink_target(&target, &spec).unwrap();
            prop_assert!(m.is_subset_of(&target));
            if let Ok(m2) = shrink_target(&target, &doubled) {
                prop_assert!(m2.is_subset_of(&m));
            }
        }

        #[test]
        fn xd_max_is_monotone_in_disturbance_box(scale in 0.1f64..1.0, e0 in -2.0f64..2.0, e1 in -2.0f64..2.0) {
            let m = linear_model(&[e0, e1, 0.4, -0.7]);
            let outer = bx(&[-1.0, -2.0], &[0.5, 1.0]);
            let inner = bx(&[-1.0 * scale, -2.0 * scale], &[0.5 * scale, 1.0 * scale]);
            let xs = bx(&[0.0, 0.0], &[1.0, 1.0]);
            let us = bx(&[-1.0], &[1.0]);
            let a = estimate_xd_max(&m, &xs, &us, &inner, &[true, true]).unwrap().norm();
            let b = estimate_xd_max(&m, &xs, &us, &outer, &[true, true]).unwrap().norm();
            prop_assert!(a <= b + 1e-9);
        }
    }
}
