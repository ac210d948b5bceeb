//! Grid inner approximation of the maximal forward control invariant set.
//!
//! The region is split into `cells_per_axis` equal cells and every cell starts
//! as a member. A sweep removes each member whose center cannot be steered,
//! by any input on the lattice and with zero disturbance, to a point whose
//! surrounding disk (radius one half cell diagonal, measured in cell units)
//! lies entirely inside member cells. Sweeps repeat until nothing is removed.
//!
//! The terminal constraint of the controller uses a box: [`inner_box`] picks
//! the largest all-member box around the cell nearest the region center and
//! shrinks it until [`verify_invariance`] accepts it.

use std::path::Path;

use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::SystemModel;
use crate::error::{Result, ZmpcError};
use crate::sets::BoxSet;

/// Regular lattice of inputs over a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputLattice {
    pub bounds: BoxSet,
    pub points_per_axis: Vec<usize>,
}

impl InputLattice {
    pub fn new(bounds: BoxSet, points_per_axis: Vec<usize>) -> Result<Self> {
        if points_per_axis.len() != bounds.dim() || points_per_axis.iter().any(|&n| n == 0) {
            return Err(ZmpcError::InvalidConfig(
                "input lattice needs a positive point count per input axis".into(),
            ));
        }
        Ok(Self {
            bounds,
            points_per_axis,
        })
    }

    pub fn len(&self) -> usize {
        self.points_per_axis.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The `k`-th lattice point, last axis varying fastest.
    pub fn point(&self, mut k: usize) -> Vec<f64> {
        let d = self.points_per_axis.len();
        let mut u = vec![0.0; d];
        for a in (0..d).rev() {
            let n = self.points_per_axis[a];
            let i = k % n;
            k /= n;
            u[a] = axis_point(self.bounds.lb()[a], self.bounds.ub()[a], i, n);
        }
        u
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|k| self.point(k)).collect()
    }
}

fn axis_point(lo: f64, hi: f64, i: usize, n: usize) -> f64 {
    if n == 1 {
        0.5 * (lo + hi)
    } else if i + 1 == n {
        hi
    } else {
        lo + (hi - lo) * i as f64 / (n - 1) as f64
    }
}

/// Cell-indexed inner approximation of a control invariant set.
#[derive(Debug, Clone, PartialEq)]
pub struct GriddedInvariantSet {
    pub region: BoxSet,
    pub cells_per_axis: Vec<usize>,
    pub input_lattice: InputLattice,
    pub model_hash: String,
    /// Row-major membership flags, last axis fastest.
    pub membership: Vec<bool>,
    /// Certifying input for each member cell.
    pub witness_inputs: Vec<Option<Vec<f64>>>,
    /// Number of removal sweeps until the fixed point, including the final empty one.
    pub sweeps: usize,
}

impl GriddedInvariantSet {
    pub fn cell_count(&self) -> usize {
        self.membership.len()
    }

    pub fn member_count(&self) -> usize {
        self.membership.iter().filter(|&&m| m).count()
    }

    pub fn member_fraction(&self) -> f64 {
        self.member_count() as f64 / self.cell_count() as f64
    }

    pub fn cell_widths(&self) -> Vec<f64> {
        self.region
            .widths()
            .iter()
            .zip(&self.cells_per_axis)
            .map(|(w, &n)| w / n as f64)
            .collect()
    }

    pub fn cell_multi_index(&self, flat: usize) -> Vec<usize> {
        unflatten(flat, &self.cells_per_axis)
    }

    pub fn cell_box(&self, flat: usize) -> BoxSet {
        let idx = self.cell_multi_index(flat);
        self.index_box(&idx, &idx)
    }

    pub fn cell_center(&self, flat: usize) -> Vec<f64> {
        let idx = self.cell_multi_index(flat);
        let cw = self.cell_widths();
        idx.iter()
            .enumerate()
            .map(|(d, &i)| self.region.lb()[d] + (i as f64 + 0.5) * cw[d])
            .collect()
    }

    /// Physical box covering cells `lo..=hi` on every axis.
    pub fn index_box(&self, lo: &[usize], hi: &[usize]) -> BoxSet {
        let cw = self.cell_widths();
        let n = self.region.dim();
        let lb: Vec<f64> = (0..n).map(|d| self.region.lb()[d] + lo[d] as f64 * cw[d]).collect();
        let ub: Vec<f64> = (0..n)
            .map(|d| {
                if hi[d] + 1 == self.cells_per_axis[d] {
                    self.region.ub()[d]
                } else {
                    self.region.lb()[d] + (hi[d] + 1) as f64 * cw[d]
                }
            })
            .collect();
        BoxSet::new(lb, ub).expect("cell indices are ordered")
    }

    /// Smallest box containing every member cell.
    pub fn bounding_box(&self) -> Option<BoxSet> {
        let n = self.region.dim();
        let mut lo = vec![usize::MAX; n];
        let mut hi = vec![0usize; n];
        let mut any = false;
        for (k, &m) in self.membership.iter().enumerate() {
            if m {
                any = true;
                for (d, &i) in self.cell_multi_index(k).iter().enumerate() {
                    lo[d] = lo[d].min(i);
                    hi[d] = hi[d].max(i);
                }
            }
        }
        any.then(|| self.index_box(&lo, &hi))
    }

    /// Whether `x` lies in a member cell.
    pub fn contains(&self, x: &[f64]) -> bool {
        if !self.region.contains(x) {
            return false;
        }
        let cw = self.cell_widths();
        let idx: Vec<usize> = (0..x.len())
            .map(|d| {
                let p = ((x[d] - self.region.lb()[d]) / cw[d]).floor() as isize;
                p.clamp(0, self.cells_per_axis[d] as isize - 1) as usize
            })
            .collect();
        self.membership[flatten(&idx, &self.cells_per_axis)]
    }
}

fn flatten(idx: &[usize], dims: &[usize]) -> usize {
    idx.iter().zip(dims).fold(0, |acc, (&i, &n)| acc * n + i)
}

fn unflatten(mut k: usize, dims: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; dims.len()];
    for d in (0..dims.len()).rev() {
        idx[d] = k % dims[d];
        k /= dims[d];
    }
    idx
}

/// Whether the disk of radius `r` (cell units) around `p` lies in member cells.
fn disk_in_members(p: &[f64], r: f64, dims: &[usize], members: &[bool]) -> bool {
    let n = dims.len();
    let mut lo = vec![0isize; n];
    let mut hi = vec![0isize; n];
    for d in 0..n {
        if !p[d].is_finite() || p[d] < r || p[d] + r > dims[d] as f64 {
            return false;
        }
        lo[d] = (p[d] - r).floor() as isize;
        hi[d] = (p[d] + r).floor() as isize;
    }
    let r2 = r * r;
    let mut idx = lo.clone();
    loop {
        let mut dist2 = 0.0;
        for d in 0..n {
            let c = idx[d] as f64;
            let gap = (c - p[d]).max(p[d] - (c + 1.0)).max(0.0);
            dist2 += gap * gap;
        }
        if dist2 < r2 {
            let inside = (0..n).all(|d| idx[d] >= 0 && (idx[d] as usize) < dims[d]);
            if !inside {
                return false;
            }
            let flat = idx.iter().zip(dims).fold(0usize, |acc, (&i, &m)| acc * m + i as usize);
            if !members[flat] {
                return false;
            }
        }
        // odometer increment
        let mut d = n;
        loop {
            if d == 0 {
                return true;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] <= hi[d] {
                break;
            }
            idx[d] = lo[d];
        }
    }
}

/// Viability-kernel fixed point over `region` with the input lattice on `inputs`.
pub fn compute_cis(
    model: &SystemModel,
    region: &BoxSet,
    inputs: &BoxSet,
    cells_per_axis: &[usize],
    inputs_per_axis: &[usize],
) -> Result<GriddedInvariantSet> {
    let nx = model.state_dim();
    if region.dim() != nx || cells_per_axis.len() != nx || inputs.dim() != model.input_dim() {
        return Err(ZmpcError::DimensionMismatch(
            "region, grid and input box must match the model".into(),
        ));
    }
    if cells_per_axis.iter().any(|&c| c == 0) {
        return Err(ZmpcError::InvalidConfig("cells_per_axis must be positive".into()));
    }
    if region.widths().iter().any(|&w| w <= 0.0) {
        return Err(ZmpcError::InvalidConfig(
            "grid region must have positive width on every axis".into(),
        ));
    }
    let lattice = InputLattice::new(inputs.clone(), inputs_per_axis.to_vec())?;
    let us = lattice.points();
    let n_cells: usize = cells_per_axis.iter().product();
    let cw: Vec<f64> = region
        .widths()
        .iter()
        .zip(cells_per_axis)
        .map(|(w, &n)| w / n as f64)
        .collect();
    let w0 = vec![0.0; model.disturbance_dim()];

    // Successor of every cell center under every lattice input, in cell units.
    let successors: Vec<Vec<Vec<f64>>> = (0..n_cells)
        .into_par_iter()
        .map(|k| {
            let idx = unflatten(k, cells_per_axis);
            let x: Vec<f64> = (0..nx)
                .map(|d| region.lb()[d] + (idx[d] as f64 + 0.5) * cw[d])
                .collect();
            us.iter()
                .map(|u| match model.step(&x, u, &w0) {
                    Ok(next) => (0..nx).map(|d| (next[d] - region.lb()[d]) / cw[d]).collect(),
                    Err(_) => vec![f64::NAN; nx],
                })
                .collect()
        })
        .collect();

    let radius = (nx as f64).sqrt() / 2.0;
    let mut members = vec![true; n_cells];
    let mut witness: Vec<Option<usize>> = vec![None; n_cells];
    let mut sweeps = 0usize;
    loop {
        sweeps += 1;
        let prev = &members;
        let next: Vec<(bool, Option<usize>)> = (0..n_cells)
            .into_par_iter()
            .map(|k| {
                if !prev[k] {
                    return (false, None);
                }
                if let Some(j) = witness[k] {
                    if disk_in_members(&successors[k][j], radius, cells_per_axis, prev) {
                        return (true, Some(j));
                    }
                }
                let found = (0..us.len()).find(|&j| disk_in_members(&successors[k][j], radius, cells_per_axis, prev));
                (found.is_some(), found)
            })
            .collect();
        let removed = next.iter().zip(prev).filter(|((m, _), &p)| p && !m).count();
        members = next.iter().map(|(m, _)| *m).collect();
        witness = next.into_iter().map(|(_, w)| w).collect();
        log::debug!("cis sweep {sweeps}: removed {removed} cells");
        if removed == 0 {
            break;
        }
    }
    if !members.iter().any(|&m| m) {
        return Err(ZmpcError::EmptyInvariantSet(format!(
            "all {n_cells} cells removed after {sweeps} sweeps"
        )));
    }
    let witness_inputs = witness
        .into_iter()
        .map(|w| w.map(|j| us[j].clone()))
        .collect();
    Ok(GriddedInvariantSet {
        region: region.clone(),
        cells_per_axis: cells_per_axis.to_vec(),
        input_lattice: lattice,
        model_hash: model.fingerprint(),
        membership: members,
        witness_inputs,
        sweeps,
    })
}

/// Largest all-member index box containing the member cell nearest the
/// region center. Returns inclusive `(lo, hi)` cell indices.
pub fn largest_member_box(set: &GriddedInvariantSet) -> Option<(Vec<usize>, Vec<usize>)> {
    let dims = &set.cells_per_axis;
    let n = dims.len();
    let seed = (0..set.cell_count())
        .filter(|&k| set.membership[k])
        .map(|k| {
            let idx = unflatten(k, dims);
            let d2: f64 = idx
                .iter()
                .zip(dims)
                .map(|(&i, &m)| {
                    let off = i as f64 + 0.5 - m as f64 / 2.0;
                    off * off
                })
                .sum();
            (k, d2)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))?
        .0;
    let seed = unflatten(seed, dims);

    // n-dimensional prefix sums over membership
    let pdims: Vec<usize> = dims.iter().map(|m| m + 1).collect();
    let total: usize = pdims.iter().product();
    let mut prefix = vec![0u32; total];
    for k in 0..set.cell_count() {
        if set.membership[k] {
            let idx: Vec<usize> = unflatten(k, dims).iter().map(|i| i + 1).collect();
            prefix[flatten(&idx, &pdims)] = 1;
        }
    }
    for d in 0..n {
        let stride: usize = pdims[d + 1..].iter().product();
        for k in 0..total {
            let i = (k / stride) % pdims[d];
            if i > 0 {
                prefix[k] += prefix[k - stride];
            }
        }
    }
    let box_sum = |lo: &[usize], hi: &[usize]| -> i64 {
        let mut acc = 0i64;
        for mask in 0..(1usize << n) {
            let mut idx = vec![0usize; n];
            let mut sign = 1i64;
            for d in 0..n {
                if (mask >> d) & 1 == 1 {
                    idx[d] = lo[d];
                    sign = -sign;
                } else {
                    idx[d] = hi[d] + 1;
                }
            }
            acc += sign * prefix[flatten(&idx, &pdims)] as i64;
        }
        acc
    };

    let mut best: Option<(usize, Vec<usize>, Vec<usize>)> = None;
    // enumerate lo[d] in 0..=seed[d], hi[d] in seed[d]..dims[d]
    let ranges: Vec<(usize, usize)> = (0..n).map(|d| (seed[d] + 1, dims[d] - seed[d])).collect();
    let combos: usize = ranges.iter().map(|(a, b)| a * b).product();
    for c in 0..combos {
        let mut rest = c;
        let mut lo = vec![0; n];
        let mut hi = vec![0; n];
        for d in (0..n).rev() {
            let (nl, nh) = ranges[d];
            let j = rest % (nl * nh);
            rest /= nl * nh;
            lo[d] = seed[d] - j / nh;
            hi[d] = seed[d] + j % nh;
        }
        let vol: usize = (0..n).map(|d| hi[d] - lo[d] + 1).product();
        if best.as_ref().map_or(false, |b| vol <= b.0) {
            continue;
        }
        if box_sum(&lo, &hi) == vol as i64 {
            best = Some((vol, lo, hi));
        }
    }
    best.map(|(_, lo, hi)| (lo, hi))
}

/// Inner box of a grid set, re-verified for invariance.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerBox {
    pub bounds: BoxSet,
    pub lo_cell: Vec<usize>,
    pub hi_cell: Vec<usize>,
    pub report: InvarianceReport,
    pub shrink_rounds: usize,
}

/// Largest verifiable all-member box; shrinks one cell per failing face
/// until [`verify_invariance`] passes.
pub fn inner_box(set: &GriddedInvariantSet, model: &SystemModel, opts: &VerifyOptions) -> Result<InnerBox> {
    let (mut lo, mut hi) = largest_member_box(set)
        .ok_or_else(|| ZmpcError::EmptyInvariantSet("grid set has no member cells".into()))?;
    let inputs = &set.input_lattice.bounds;
    let mut rounds = 0;
    loop {
        let candidate = set.index_box(&lo, &hi);
        let report = verify_invariance_with(model, &candidate, inputs, opts);
        if report.pass {
            return Ok(InnerBox {
                bounds: candidate,
                lo_cell: lo,
                hi_cell: hi,
                report,
                shrink_rounds: rounds,
            });
        }
        rounds += 1;
        let succ = report
            .counterexample_successor
            .as_ref()
            .expect("failing report carries a successor");
        let mut moved = false;
        for d in 0..lo.len() {
            if succ[d] > candidate.ub()[d] || !succ[d].is_finite() {
                if hi[d] == lo[d] {
                    return Err(ZmpcError::EmptyInvariantSet("no verifiable inner box".into()));
                }
                hi[d] -= 1;
                moved = true;
            }
            if succ[d] < candidate.lb()[d] {
                if hi[d] == lo[d] {
                    return Err(ZmpcError::EmptyInvariantSet("no verifiable inner box".into()));
                }
                lo[d] += 1;
                moved = true;
            }
        }
        if !moved {
            return Err(ZmpcError::EmptyInvariantSet(
                "verification failed without an exit face".into(),
            ));
        }
    }
}

/// Settings for [`verify_invariance_with`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub samples: usize,
    pub seed: u64,
    /// Coarse input grid per axis before local refinement.
    pub input_points_per_axis: usize,
    pub refine_rounds: usize,
    /// Successor may sit this far outside the candidate and still count as inside.
    pub tolerance: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            samples: 500,
            seed: 0,
            input_points_per_axis: 41,
            refine_rounds: 40,
            tolerance: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub pass: bool,
    pub worst_margin: f64,
    pub counterexample: Option<Vec<f64>>,
    /// Best successor found for the counterexample.
    pub counterexample_successor: Option<Vec<f64>>,
}

/// Halton radical inverse in base `b`.
fn radical_inverse(mut i: u64, b: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    let inv = 1.0 / b as f64;
    while i > 0 {
        f *= inv;
        r += f * (i % b) as f64;
        i /= b;
    }
    r
}

const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

/// Randomly shifted Halton points in `bx`, preceded by its vertices.
pub fn sample_points(bx: &BoxSet, samples: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = bx.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let mut pts = Vec::with_capacity(samples + (1 << n.min(10)));
    if n <= 10 {
        for mask in 0..(1usize << n) {
            let bits: Vec<bool> = (0..n).map(|d| (mask >> d) & 1 == 1).collect();
            pts.push(bx.vertex(&bits));
        }
    }
    for i in 0..samples {
        let p: Vec<f64> = (0..n)
            .map(|d| {
                let h = (radical_inverse(i as u64 + 1, PRIMES[d % PRIMES.len()]) + shift[d]).fract();
                bx.lb()[d] + h * (bx.ub()[d] - bx.lb()[d])
            })
            .collect();
        pts.push(p);
    }
    pts
}

/// Margin with each axis scaled by the box width (raw units on flat axes).
fn normalized_margin(bx: &BoxSet, x: &[f64]) -> f64 {
    x.iter()
        .enumerate()
        .map(|(d, v)| {
            let (l, u) = (bx.lb()[d], bx.ub()[d]);
            let m = (v - l).min(u - v);
            let w = u - l;
            if w > 0.0 {
                m / w
            } else {
                m
            }
        })
        .fold(f64::INFINITY, f64::min)
}

/// Best input found for steering `x` into `target` under `w = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringResult {
    pub input: Vec<f64>,
    pub successor: Vec<f64>,
    /// Raw signed distance of the successor inside `target`.
    pub margin: f64,
}

/// Grid search over `inputs` followed by coordinate-wise local refinement,
/// maximizing the width-normalized margin of the nominal successor.
pub fn steer_into(
    model: &SystemModel,
    x: &[f64],
    target: &BoxSet,
    inputs: &BoxSet,
    points_per_axis: usize,
    refine_rounds: usize,
) -> Option<SteeringResult> {
    let nu = inputs.dim();
    let lattice = InputLattice::new(inputs.clone(), vec![points_per_axis.max(1); nu]).ok()?;
    let eval = |u: &[f64]| -> Option<(Vec<f64>, f64)> {
        let next = model.step_nominal(x, u).ok()?;
        let m = normalized_margin(target, &next);
        Some((next, m))
    };
    let mut best: Option<(Vec<f64>, Vec<f64>, f64)> = None;
    for k in 0..lattice.len() {
        let u = lattice.point(k);
        if let Some((next, m)) = eval(&u) {
            if best.as_ref().map_or(true, |b| m > b.2) {
                best = Some((u, next, m));
            }
        }
    }
    let (mut u, mut next, mut m) = best?;
    let mut step: Vec<f64> = inputs
        .widths()
        .iter()
        .map(|w| w / (points_per_axis.max(2) - 1) as f64 / 2.0)
        .collect();
    for _ in 0..refine_rounds {
        for d in 0..nu {
            for dir in [-1.0, 1.0] {
                let mut cand = u.clone();
                cand[d] = (cand[d] + dir * step[d]).clamp(inputs.lb()[d], inputs.ub()[d]);
                if let Some((cn, cm)) = eval(&cand) {
                    if cm > m {
                        u = cand;
                        next = cn;
                        m = cm;
                    }
                }
            }
            step[d] /= 2.0;
        }
    }
    let margin = target.signed_margin(&next);
    Some(SteeringResult {
        input: u,
        successor: next,
        margin,
    })
}

/// Sampled check of control invariance for `candidate` with zero disturbance.
pub fn verify_invariance(
    model: &SystemModel,
    candidate: &BoxSet,
    inputs: &BoxSet,
    samples: usize,
    seed: u64,
) -> InvarianceReport {
    let opts = VerifyOptions {
        samples,
        seed,
        ..VerifyOptions::default()
    };
    verify_invariance_with(model, candidate, inputs, &opts)
}

pub fn verify_invariance_with(
    model: &SystemModel,
    candidate: &BoxSet,
    inputs: &BoxSet,
    opts: &VerifyOptions,
) -> InvarianceReport {
    let pts = sample_points(candidate, opts.samples, opts.seed);
    let results: Vec<(f64, Vec<f64>)> = pts
        .par_iter()
        .map(|x| {
            match steer_into(model, x, candidate, inputs, opts.input_points_per_axis, opts.refine_rounds) {
                Some(s) => (s.margin, s.successor),
                None => (f64::NEG_INFINITY, vec![f64::NAN; x.len()]),
            }
        })
        .collect();
    let mut worst = f64::INFINITY;
    let mut worst_idx = 0;
    for (i, (m, _)) in results.iter().enumerate() {
        if *m < worst {
            worst = *m;
            worst_idx = i;
        }
    }
    let pass = worst >= -opts.tolerance;
    InvarianceReport {
        pass,
        worst_margin: worst,
        counterexample: (!pass).then(|| pts[worst_idx].clone()),
        counterexample_successor: (!pass).then(|| results[worst_idx].1.clone()),
    }
}

/// On-disk form of a [`GriddedInvariantSet`].
///
/// The bitmap packs row-major membership flags eight per byte, most
/// significant bit first; witness inputs follow for member cells only, in
/// the same order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSetFile {
    pub format: String,
    pub region: BoxSet,
    pub cells_per_axis: Vec<usize>,
    pub model_hash: String,
    pub input_grid: InputLattice,
    pub sweeps: usize,
    pub bitmap: String,
    pub witness_inputs: Vec<Vec<f64>>,
}

pub const GRID_FORMAT: &str = "zmpc-gridset/1";

impl From<&GriddedInvariantSet> for GridSetFile {
    fn from(set: &GriddedInvariantSet) -> Self {
        let mut bytes = vec![0u8; set.membership.len().div_ceil(8)];
        for (i, &m) in set.membership.iter().enumerate() {
            if m {
                bytes[i / 8] |= 0x80 >> (i % 8);
            }
        }
        GridSetFile {
            format: GRID_FORMAT.to_string(),
            region: set.region.clone(),
            cells_per_axis: set.cells_per_axis.clone(),
            model_hash: set.model_hash.clone(),
            input_grid: set.input_lattice.clone(),
            sweeps: set.sweeps,
            bitmap: base64::engine::general_purpose::STANDARD.encode(bytes),
            witness_inputs: set.witness_inputs.iter().flatten().cloned().collect(),
        }
    }
}

impl TryFrom<GridSetFile> for GriddedInvariantSet {
    type Error = ZmpcError;
    fn try_from(f: GridSetFile) -> Result<Self> {
        if f.format != GRID_FORMAT {
            return Err(ZmpcError::Format(format!("unknown format tag {}", f.format)));
        }
        if f.cells_per_axis.len() != f.region.dim() || f.cells_per_axis.iter().any(|&c| c == 0) {
            return Err(ZmpcError::Format("cells_per_axis does not match region".into()));
        }
        let n: usize = f.cells_per_axis.iter().product();
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&f.bitmap)
            .map_err(|e| ZmpcError::Format(format!("bitmap: {e}")))?;
        if bytes.len() != n.div_ceil(8) {
            return Err(ZmpcError::Format(format!(
                "bitmap holds {} bytes, expected {}",
                bytes.len(),
                n.div_ceil(8)
            )));
        }
        let membership: Vec<bool> = (0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect();
        let count = membership.iter().filter(|&&m| m).count();
        if count != f.witness_inputs.len() {
            return Err(ZmpcError::Format(format!(
                "{count} member cells but {} witness inputs",
                f.witness_inputs.len()
            )));
        }
        let mut it = f.witness_inputs.into_iter();
        let witness_inputs = membership
            .iter()
            .map(|&m| if m { it.next() } else { None })
            .collect();
        Ok(GriddedInvariantSet {
            region: f.region,
            cells_per_axis: f.cells_per_axis,
            input_lattice: f.input_grid,
            model_hash: f.model_hash,
            membership,
            witness_inputs,
            sweeps: f.sweeps,
        })
    }
}

impl GriddedInvariantSet {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&GridSetFile::from(self)).expect("grid set serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: GridSetFile = serde_json::from_str(text).map_err(|e| ZmpcError::Format(e.to_string()))?;
        f.try_into()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
