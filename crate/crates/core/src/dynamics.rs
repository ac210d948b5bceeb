//! Plant models and their discrete one-step maps.
//!
//! A [`SystemModel`] wraps either a continuous-time right-hand side, which is
//! discretized by classical fourth-order Runge-Kutta with zero-order hold on
//! the input and the disturbance, or a map that is already discrete. The
//! built-in plant is the exothermic CSTR with state `[C_A, T]`, input `T_c`
//! and disturbance `[C_Af - 1.0, T_f - 350]`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, ZmpcError};
use crate::sets::BoxSet;

/// Continuous-time vector field `dx/dt = g(x, u, w)`.
pub trait ContinuousDynamics: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn disturbance_dim(&self) -> usize;
    fn rhs(&self, x: &[f64], u: &[f64], w: &[f64], dx: &mut [f64]);
    /// Stable textual description of the model and its parameters.
    fn describe(&self) -> String;
}

/// Discrete-time map `x+ = f(x, u, w)`.
pub trait DiscreteDynamics: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn disturbance_dim(&self) -> usize;
    fn step(&self, x: &[f64], u: &[f64], w: &[f64], next: &mut [f64]);
    fn describe(&self) -> String;
}

#[derive(Clone, Debug)]
enum ModelKind {
    Continuous {
        rhs: Arc<dyn ContinuousDynamics>,
        sample_time: f64,
        substeps: usize,
    },
    Discrete(Arc<dyn DiscreteDynamics>),
}

/// A plant together with its discrete one-step map. Immutable once built.
#[derive(Clone, Debug)]
pub struct SystemModel {
    kind: ModelKind,
}

impl SystemModel {
    pub fn continuous(
        rhs: Arc<dyn ContinuousDynamics>,
        sample_time: f64,
        substeps: usize,
    ) -> Result<Self> {
        if !(sample_time.is_finite() && sample_time > 0.0) {
            return Err(ZmpcError::InvalidConfig(format!(
                "sample_time must be positive, got {sample_time}"
            )));
        }
        if substeps == 0 {
            return Err(ZmpcError::InvalidConfig(
                "integrator_substeps must be positive".into(),
            ));
        }
        Ok(Self {
            kind: ModelKind::Continuous {
                rhs,
                sample_time,
                substeps,
            },
        })
    }

    pub fn discrete(map: Arc<dyn DiscreteDynamics>) -> Self {
        Self {
            kind: ModelKind::Discrete(map),
        }
    }

    pub fn cstr(params: CstrParameters, sample_time: f64, substeps: usize) -> Result<Self> {
        params.validate()?;
        Self::continuous(Arc::new(Cstr::new(params)), sample_time, substeps)
    }

    pub fn state_dim(&self) -> usize {
        match &self.kind {
            ModelKind::Continuous { rhs, .. } => rhs.state_dim(),
            ModelKind::Discrete(m) => m.state_dim(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.kind {
            ModelKind::Continuous { rhs, .. } => rhs.input_dim(),
            ModelKind::Discrete(m) => m.input_dim(),
        }
    }

    pub fn disturbance_dim(&self) -> usize {
        match &self.kind {
            ModelKind::Continuous { rhs, .. } => rhs.disturbance_dim(),
            ModelKind::Discrete(m) => m.disturbance_dim(),
        }
    }

    /// Sampling period of the discrete map, `None` for natively discrete models.
    pub fn sample_time(&self) -> Option<f64> {
        match &self.kind {
            ModelKind::Continuous { sample_time, .. } => Some(*sample_time),
            ModelKind::Discrete(_) => None,
        }
    }

    /// Continuous right-hand side, if the model has one.
    pub fn rhs(&self, x: &[f64], u: &[f64], w: &[f64]) -> Option<Vec<f64>> {
        match &self.kind {
            ModelKind::Continuous { rhs, .. } => {
                let mut dx = vec![0.0; rhs.state_dim()];
                rhs.rhs(x, u, w, &mut dx);
                Some(dx)
            }
            ModelKind::Discrete(_) => None,
        }
    }

    /// Hex SHA-256 over the model description and discretization settings.
    pub fn fingerprint(&self) -> String {
        let text = match &self.kind {
            ModelKind::Continuous {
                rhs,
                sample_time,
                substeps,
            } => format!(
                "continuous;{};sample_time={:e};substeps={}",
                rhs.describe(),
                sample_time,
                substeps
            ),
            ModelKind::Discrete(m) => format!("discrete;{}", m.describe()),
        };
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// One step of the discrete map. Zero-initialized disturbance is the nominal model.
    pub fn step(&self, x: &[f64], u: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        integrate_step(self, x, u, w)
    }

    /// Nominal one-step map (`w = 0`).
    pub fn step_nominal(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let w = vec![0.0; self.disturbance_dim()];
        integrate_step(self, x, u, &w)
    }

    fn check_dims(&self, x: &[f64], u: &[f64], w: &[f64]) -> Result<()> {
        if x.len() != self.state_dim() || u.len() != self.input_dim() || w.len() != self.disturbance_dim() {
            return Err(ZmpcError::DimensionMismatch(format!(
                "model expects (x,u,w) of dims ({},{},{}), got ({},{},{})",
                self.state_dim(),
                self.input_dim(),
                self.disturbance_dim(),
                x.len(),
                u.len(),
                w.len()
            )));
        }
        Ok(())
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|a| a.is_finite())
}

/// Advances the model by one sampling period.
///
/// Continuous models use classical RK4 over `substeps` equal sub-intervals
/// with `u` and `w` held constant. Any non-finite stage aborts the step.
pub fn integrate_step(model: &SystemModel, x: &[f64], u: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    model.check_dims(x, u, w)?;
    if !(all_finite(x) && all_finite(u) && all_finite(w)) {
        return Err(ZmpcError::NonFiniteState);
    }
    match &model.kind {
        ModelKind::Discrete(m) => {
            let mut next = vec![0.0; x.len()];
            m.step(x, u, w, &mut next);
            if !all_finite(&next) {
                return Err(ZmpcError::NonFiniteState);
            }
            Ok(next)
        }
        ModelKind::Continuous {
            rhs,
            sample_time,
            substeps,
        } => {
            let n = x.len();
            let h = sample_time / *substeps as f64;
            let mut state = x.to_vec();
            let mut k1 = vec![0.0; n];
            let mut k2 = vec![0.0; n];
            let mut k3 = vec![0.0; n];
            let mut k4 = vec![0.0; n];
            let mut tmp = vec![0.0; n];
            for _ in 0..*substeps {
                rhs.rhs(&state, u, w, &mut k1);
                for i in 0..n {
                    tmp[i] = state[i] + 0.5 * h * k1[i];
                }
                rhs.rhs(&tmp, u, w, &mut k2);
                for i in 0..n {
                    tmp[i] = state[i] + 0.5 * h * k2[i];
                }
                rhs.rhs(&tmp, u, w, &mut k3);
                for i in 0..n {
                    tmp[i] = state[i] + h * k3[i];
                }
                rhs.rhs(&tmp, u, w, &mut k4);
                for i in 0..n {
                    state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
                if !(all_finite(&k1) && all_finite(&k2) && all_finite(&k3) && all_finite(&k4))
                    || !all_finite(&state)
                {
                    return Err(ZmpcError::NonFiniteState);
                }
            }
            Ok(state)
        }
    }
}

/// Finite-difference step per disturbance dimension: `max(1e-5, 1e-5 * width)`.
pub fn sensitivity_steps(w_bounds: &BoxSet) -> Vec<f64> {
    w_bounds
        .lb()
        .iter()
        .zip(w_bounds.ub())
        .map(|(lo, hi)| (1e-5 * (hi - lo).abs()).max(1e-5))
        .collect()
}

/// `d x(n+1) / d w` of the one-step map by central differences.
pub fn disturbance_sensitivity(
    model: &SystemModel,
    x: &[f64],
    u: &[f64],
    w: &[f64],
    w_bounds: &BoxSet,
) -> Result<DMatrix<f64>> {
    let steps = sensitivity_steps(w_bounds);
    disturbance_sensitivity_with_steps(model, x, u, w, &steps)
}

pub fn disturbance_sensitivity_with_steps(
    model: &SystemModel,
    x: &[f64],
    u: &[f64],
    w: &[f64],
    steps: &[f64],
) -> Result<DMatrix<f64>> {
    let nx = model.state_dim();
    let nw = model.disturbance_dim();
    if steps.len() != nw {
        return Err(ZmpcError::DimensionMismatch(format!(
            "expected {nw} finite-difference steps, got {}",
            steps.len()
        )));
    }
    let mut jac = DMatrix::zeros(nx, nw);
    let mut wp = w.to_vec();
    for j in 0..nw {
        let h = steps[j];
        wp[j] = w[j] + h;
        let plus = integrate_step(model, x, u, &wp)?;
        wp[j] = w[j] - h;
        let minus = integrate_step(model, x, u, &wp)?;
        wp[j] = w[j];
        for i in 0..nx {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// Physical constants of the exothermic CSTR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CstrParameters {
    /// Volumetric flow, L/min.
    pub q: f64,
    /// Reactor volume, L.
    pub volume: f64,
    /// Density, g/L.
    pub rho: f64,
    /// Specific heat, J/(g K).
    pub cp: f64,
    /// Heat of reaction, J/mol (negative: exothermic).
    pub delta_h: f64,
    /// Jacket heat-transfer coefficient, J/(min K).
    pub ua: f64,
    /// Pre-exponential factor, 1/min.
    pub k0: f64,
    /// Activation energy over the gas constant, K.
    pub e_over_r: f64,
    /// Nominal feed concentration, mol/L.
    pub caf_nominal: f64,
    /// Nominal feed temperature, K.
    pub tf_nominal: f64,
}

impl Default for CstrParameters {
    fn default() -> Self {
        Self {
            q: 100.0,
            volume: 100.0,
            rho: 1000.0,
            cp: 0.239,
            delta_h: -5.0e4,
            ua: 5.0e4,
            k0: 7.2e10,
            e_over_r: 8750.0,
            caf_nominal: 1.0,
            tf_nominal: 350.0,
        }
    }
}

impl CstrParameters {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("q", self.q),
            ("volume", self.volume),
            ("rho", self.rho),
            ("cp", self.cp),
            ("ua", self.ua),
            ("k0", self.k0),
            ("e_over_r", self.e_over_r),
            ("caf_nominal", self.caf_nominal),
            ("tf_nominal", self.tf_nominal),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ZmpcError::InvalidConfig(format!(
                    "CSTR parameter {name} must be positive, got {v}"
                )));
            }
        }
        if !(self.delta_h.is_finite() && self.delta_h < 0.0) {
            return Err(ZmpcError::InvalidConfig(format!(
                "CSTR heat of reaction must be negative, got {}",
                self.delta_h
            )));
        }
        Ok(())
    }
}

/// CSTR vector field. State `[C_A, T]`, input `[T_c]`, disturbance `[dC_Af, dT_f]`.
pub fn cstr_rhs(x: &[f64], u: &[f64], w: &[f64], p: &CstrParameters) -> Result<[f64; 2]> {
    if x.len() != 2 || u.len() != 1 || w.len() != 2 {
        return Err(ZmpcError::DimensionMismatch(
            "CSTR expects x in R^2, u in R^1, w in R^2".into(),
        ));
    }
    if !(all_finite(x) && all_finite(u) && all_finite(w)) {
        return Err(ZmpcError::NonFiniteInput("cstr_rhs"));
    }
    Ok(cstr_rhs_unchecked(x, u, w, p))
}

#[inline]
fn cstr_rhs_unchecked(x: &[f64], u: &[f64], w: &[f64], p: &CstrParameters) -> [f64; 2] {
    let (ca, t) = (x[0], x[1]);
    let caf = p.caf_nominal + w[0];
    let tf = p.tf_nominal + w[1];
    let rate = p.k0 * (-p.e_over_r / t).exp() * ca;
    let dilution = p.q / p.volume;
    let dca = dilution * (caf - ca) - rate;
    let dt = dilution * (tf - t)
        + p.ua / (p.volume * p.rho * p.cp) * (u[0] - t)
        + (-p.delta_h) / (p.rho * p.cp) * rate;
    [dca, dt]
}

#[derive(Debug, Clone)]
pub struct Cstr {
    pub params: CstrParameters,
}

impl Cstr {
    pub fn new(params: CstrParameters) -> Self {
        Self { params }
    }

    /// Steady state `(x*, u*)` for a prescribed reactor temperature at `w = 0`.
    pub fn equilibrium_at_temperature(&self, t: f64) -> ([f64; 2], f64) {
        let p = &self.params;
        let k = p.k0 * (-p.e_over_r / t).exp();
        let dilution = p.q / p.volume;
        let ca = dilution * p.caf_nominal / (dilution + k);
        let heat = dilution * (p.tf_nominal - t) + (-p.delta_h) / (p.rho * p.cp) * k * ca;
        let tc = t - heat / (p.ua / (p.volume * p.rho * p.cp));
        ([ca, t], tc)
    }
}

impl ContinuousDynamics for Cstr {
    fn state_dim(&self) -> usize {
        2
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn disturbance_dim(&self) -> usize {
        2
    }
    fn rhs(&self, x: &[f64], u: &[f64], w: &[f64], dx: &mut [f64]) {
        let d = cstr_rhs_unchecked(x, u, w, &self.params);
        dx[0] = d[0];
        dx[1] = d[1];
    }
    fn describe(&self) -> String {
        let p = &self.params;
        format!(
            "cstr;q={:e};V={:e};rho={:e};cp={:e};dH={:e};UA={:e};k0={:e};E/R={:e};CAf={:e};Tf={:e}",
            p.q, p.volume, p.rho, p.cp, p.delta_h, p.ua, p.k0, p.e_over_r, p.caf_nominal, p.tf_nominal
        )
    }
}

/// `x+ = A x + B u + E w` (discrete) or `dx/dt = A x + B u + E w` (continuous).
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub e: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, e: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || e.nrows() != n {
            return Err(ZmpcError::DimensionMismatch(
                "A must be square and share its row count with B and E".into(),
            ));
        }
        Ok(Self { a, b, e })
    }

    fn apply(&self, x: &[f64], u: &[f64], w: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, xj) in x.iter().enumerate() {
                acc += self.a[(i, j)] * xj;
            }
            for (j, uj) in u.iter().enumerate() {
                acc += self.b[(i, j)] * uj;
            }
            for (j, wj) in w.iter().enumerate() {
                acc += self.e[(i, j)] * wj;
            }
            *o = acc;
        }
    }

    fn describe_matrices(&self) -> String {
        let fmt = |m: &DMatrix<f64>| {
            m.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(",")
        };
        format!(
            "linear;n={};m={};p={};A={};B={};E={}",
            self.a.nrows(),
            self.b.ncols(),
            self.e.ncols(),
            fmt(&self.a),
            fmt(&self.b),
            fmt(&self.e)
        )
    }
}

impl DiscreteDynamics for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    fn disturbance_dim(&self) -> usize {
        self.e.ncols()
    }
    fn step(&self, x: &[f64], u: &[f64], w: &[f64], next: &mut [f64]) {
        self.apply(x, u, w, next)
    }
    fn describe(&self) -> String {
        self.describe_matrices()
    }
}

impl ContinuousDynamics for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    fn disturbance_dim(&self) -> usize {
        self.e.ncols()
    }
    fn rhs(&self, x: &[f64], u: &[f64], w: &[f64], dx: &mut [f64]) {
        self.apply(x, u, w, dx)
    }
    fn describe(&self) -> String {
        self.describe_matrices()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cstr_model(substeps: usize) -> SystemModel {
        SystemModel::cstr(CstrParameters::default(), 0.08, substeps).unwrap()
    }

    fn scalar_linear(a: f64, b: f64, e: f64) -> LinearModel {
        LinearModel::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, e),
        )
        .unwrap()
    }

    #[test]
    fn zero_concentration_has_no_reaction() {
        let p = CstrParameters::default();
        for t in [320.0, 350.0, 380.0] {
            let d = cstr_rhs(&[0.0, t], &[300.0], &[0.0, 0.0], &p).unwrap();
            assert_eq!(d[0], p.q / p.volume * p.caf_nominal);
        }
    }

    #[test]
    fn rhs_matches_hand_evaluation() {
        let d = cstr_rhs(&[0.5, 350.0], &[300.0], &[0.0, 0.0], &CstrParameters::default()).unwrap();
        // Written out independently from the two balance equations.
        let k = 7.2e10 * f64::exp(-8750.0 / 350.0);
        let dca = 1.0 * (1.0 - 0.5) - k * 0.5;
        let dt = 1.0 * (350.0 - 350.0) + 5.0e4 / (100.0 * 1000.0 * 0.239) * (300.0 - 350.0)
            + 5.0e4 / (1000.0 * 0.239) * k * 0.5;
        assert!((d[0] - dca).abs() < 1e-12);
        assert!((d[1] - dt).abs() < 1e-12);
    }

    #[test]
    fn rhs_vanishes_at_bisected_equilibrium() {
        let p = CstrParameters::default();
        // Fix u = 300 and bisect the temperature balance along the C_A nullcline.
        let tc = 300.0;
        let ca_of = |t: f64| 1.0 / (1.0 + 7.2e10 * f64::exp(-8750.0 / t));
        let heat = |t: f64| {
            let ca = ca_of(t);
            (350.0 - t) + 5.0e4 / 23900.0 * (tc - t) + 5.0e4 / 239.0 * 7.2e10 * f64::exp(-8750.0 / t) * ca
        };
        let (mut lo, mut hi) = (345.0, 355.0);
        assert!(heat(lo) * heat(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if heat(lo) * heat(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let t = 0.5 * (lo + hi);
        let d = cstr_rhs(&[ca_of(t), t], &[tc], &[0.0, 0.0], &p).unwrap();
        assert!(d[0].abs() < 1e-8 && d[1].abs() < 1e-8, "{d:?}");
    }

    #[test]
    fn non_finite_rhs_input_is_rejected() {
        let p = CstrParameters::default();
        assert_eq!(
            cstr_rhs(&[f64::NAN, 350.0], &[300.0], &[0.0, 0.0], &p),
            Err(ZmpcError::NonFiniteInput("cstr_rhs"))
        );
        assert!(cstr_rhs(&[0.5, 350.0], &[f64::INFINITY], &[0.0, 0.0], &p).is_err());
    }

    #[test]
    fn stationary_field_leaves_state_unchanged() {
        let lin = scalar_linear(0.0, 0.0, 0.0);
        let model = SystemModel::continuous(Arc::new(lin), 0.3, 7).unwrap();
        let x = [1.234_567_89];
        assert_eq!(model.step(&x, &[5.0], &[1.0]).unwrap(), x.to_vec());
    }

    #[test]
    fn rk4_is_fourth_order_on_decay() {
        let errs: Vec<f64> = [0.1, 0.05, 0.025]
            .iter()
            .map(|&dt| {
                let model = SystemModel::continuous(Arc::new(scalar_linear(-1.0, 0.0, 0.0)), dt, 1).unwrap();
                let out = model.step(&[1.0], &[0.0], &[0.0]).unwrap()[0];
                (out - f64::exp(-dt)).abs()
            })
            .collect();
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!(order >= 4.0, "observed order {order}");
        }
        // Local error constant: e <= C dt^5 with C near 1/120.
        assert!(errs[0] <= 0.1f64.powi(5) / 100.0);
    }

    #[test]
    fn cstr_substep_refinement_is_converged() {
        let a = cstr_model(8).step(&[0.5, 350.0], &[300.0], &[0.0, 0.0]).unwrap();
        let b = cstr_model(4).step(&[0.5, 350.0], &[300.0], &[0.0, 0.0]).unwrap();
        for i in 0..2 {
            assert!((a[i] - b[i]).abs() < 1e-6, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn integration_is_deterministic() {
        let m = cstr_model(8);
        let a = m.step(&[0.43, 351.2], &[297.0], &[0.03, -1.1]).unwrap();
        let b = m.step(&[0.43, 351.2], &[297.0], &[0.03, -1.1]).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }

    #[test]
    fn blow_up_is_reported_as_non_finite_state() {
        let m = SystemModel::continuous(Arc::new(scalar_linear(800.0, 0.0, 0.0)), 1.0, 1).unwrap();
        let mut x = vec![1e300];
        let err = loop {
            match m.step(&x, &[0.0], &[0.0]) {
                Ok(v) => x = v,
                Err(e) => break e,
            }
        };
        assert_eq!(err, ZmpcError::NonFiniteState);
    }

    #[test]
    fn sensitivity_of_linear_map_is_e() {
        let lin = LinearModel::new(
            DMatrix::from_row_slice(2, 2, &[1.1, 0.2, -0.3, 0.9]),
            DMatrix::from_row_slice(2, 1, &[0.5, 1.0]),
            DMatrix::from_row_slice(2, 2, &[0.7, -1.3, 2.0, 0.25]),
        )
        .unwrap();
        let e = lin.e.clone();
        let m = SystemModel::discrete(Arc::new(lin));
        let wb = BoxSet::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let s = disturbance_sensitivity(&m, &[0.3, -2.0], &[0.1], &[0.2, 0.0], &wb).unwrap();
        assert!((s - e).abs().max() < 1e-10);
    }

    #[test]
    fn sensitivity_is_zero_when_disturbance_is_absent() {
        let lin = LinearModel::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 2),
        )
        .unwrap();
        let m = SystemModel::continuous(Arc::new(lin), 0.1, 4).unwrap();
        let wb = BoxSet::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let s = disturbance_sensitivity(&m, &[1.0], &[0.0], &[0.0, 0.0], &wb).unwrap();
        assert_eq!(s.abs().max(), 0.0);
    }

    #[test]
    fn cstr_sensitivity_is_richardson_consistent() {
        let m = cstr_model(8);
        let wb = BoxSet::new(vec![-0.1, -2.0], vec![0.1, 2.0]).unwrap();
        let h = sensitivity_steps(&wb);
        let half: Vec<f64> = h.iter().map(|v| v / 2.0).collect();
        let x = [0.754, 352.0];
        let s1 = disturbance_sensitivity_with_steps(&m, &x, &[315.0], &[0.0, 0.0], &h).unwrap();
        let s2 = disturbance_sensitivity_with_steps(&m, &x, &[315.0], &[0.0, 0.0], &half).unwrap();
        for (a, b) in s1.iter().zip(s2.iter()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-12), "{a} vs {b}");
        }
    }

    #[test]
    fn cstr_sensitivity_sign_structure() {
        let m = cstr_model(8);
        let wb = BoxSet::new(vec![-0.1, -2.0], vec![0.1, 2.0]).unwrap();
        for (x, u) in [([0.5, 350.0], 300.0), ([0.3, 349.0], 290.0), ([0.7, 351.5], 310.0)] {
            let s = disturbance_sensitivity(&m, &x, &[u], &[0.0, 0.0], &wb).unwrap();
            assert!(s[(0, 0)] > 0.0);
            assert!(s[(1, 1)] > 0.0);
        }
    }

    #[test]
    fn equilibrium_helper_is_a_rest_point() {
        let cstr = Cstr::new(CstrParameters::default());
        let (x, u) = cstr.equilibrium_at_temperature(350.0);
        let d = cstr_rhs(&x, &[u], &[0.0, 0.0], &cstr.params).unwrap();
        assert!(d[0].abs() < 1e-9 && d[1].abs() < 1e-9);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let mut p = CstrParameters::default();
        p.delta_h = 1.0;
        assert!(p.validate().is_err());
        let mut p = CstrParameters::default();
        p.ua = 0.0;
        assert!(SystemModel::cstr(p, 0.1, 8).is_err());
        assert!(SystemModel::cstr(CstrParameters::default(), 0.0, 8).is_err());
    }
}
