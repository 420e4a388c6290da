//! Exact enumeration of all fixed points of the deterministic piecewise-linear
//! low-rank dynamics, plus the region-count bound, a brute-force oracle and
//! the constrained approximate search.
//!
//! Everything operates on the expanded form: a D-basis unit becomes D ReLU
//! units sharing one hyperplane normal, so a region is a binary indicator
//! over N·D expanded units and each consistent region contributes one linear
//! solve z* = (NᵀD_ΩM − I)⁻¹ NᵀD_Ω h.

use std::collections::HashSet;

use itertools::Itertools;
use nalgebra::{Complex, DMatrix, DVector};
use num_bigint::BigUint;
use rand::Rng;

use crate::activation::PiecewiseLinearSpec;
use crate::model::LowRankRnn;
use crate::{Error, Result};

/// Tolerance band around thresholds inside which a unit is treated as on the
/// boundary and accepted either way.
pub const BOUNDARY_BAND: f64 = 1e-9;
/// Condition-number threshold declaring a region's linear system degenerate.
pub const DEGENERATE_CONDITION: f64 = 1e12;
/// Merge radius for deduplicating fixed points in z-space.
pub const MERGE_RADIUS: f64 = 1e-6;

/// Binary activation pattern over the expanded units (the diagonal of D_Ω).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegionIndicator(pub Vec<bool>);

impl RegionIndicator {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn all_inactive(n: usize) -> Self {
        Self(vec![false; n])
    }

    /// Pattern realized at a point: d_i = 1(m_iᵀz > h_i).
    pub fn at_point(m: &DMatrix<f64>, h: &DVector<f64>, z: &DVector<f64>) -> Self {
        let vals = m * z;
        Self((0..m.nrows()).map(|i| vals[i] > h[i]).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Stable,
    Saddle,
    Unstable,
    Marginal,
}

#[derive(Debug, Clone)]
pub struct FixedPoint {
    pub z: DVector<f64>,
    pub region: RegionIndicator,
    pub jacobian: DMatrix<f64>,
    pub eigenvalues: Vec<Complex<f64>>,
    pub stability: Stability,
    /// Some expanded unit sat inside the boundary band at z*.
    pub boundary: bool,
}

#[derive(Debug, Clone)]
pub struct FixedPointReport {
    pub points: Vec<FixedPoint>,
    pub regions_examined: usize,
    /// Zaslavsky-type bound Σ_{r=0}^R D^r·C(N,r) on the number of regions.
    pub bound: BigUint,
    /// Regions whose linear system was singular: potential line attractors.
    pub degenerate_regions: Vec<RegionIndicator>,
    pub rank_deficient: bool,
    /// Linear systems solved while searching (approximate search cost).
    pub inverses_used: usize,
    /// Candidate-region precomputation cost of the constrained search.
    pub upfront_inverses: usize,
}

impl FixedPointReport {
    pub fn stable_points(&self) -> impl Iterator<Item = &FixedPoint> {
        self.points.iter().filter(|p| p.stability == Stability::Stable)
    }
}

/// Expanded continuous-time system: normals, read-ins and thresholds of the
/// N·D ReLU units equivalent to the D-basis network.
#[derive(Debug, Clone)]
pub struct ExpandedSystem {
    /// M̂, (N·D)×R: row (i,d) repeats row i of M.
    pub m: DMatrix<f64>,
    /// N̂, (N·D)×R: row (i,d) is b_{i,d}·(row i of N).
    pub n: DMatrix<f64>,
    /// ĥ, length N·D.
    pub h: DVector<f64>,
    pub units: usize,
    pub basis: usize,
}

/// Expand a D-basis piecewise-linear net into its N·D-unit ReLU equivalent.
pub fn expand_basis(
    m: &DMatrix<f64>,
    n_cont: &DMatrix<f64>,
    spec: &PiecewiseLinearSpec,
) -> ExpandedSystem {
    let units = m.nrows();
    let r = m.ncols();
    let d = spec.num_basis();
    let mut m_hat = DMatrix::zeros(units * d, r);
    let mut n_hat = DMatrix::zeros(units * d, r);
    let mut h_hat = DVector::zeros(units * d);
    for i in 0..units {
        for k in 0..d {
            let row = i * d + k;
            for c in 0..r {
                m_hat[(row, c)] = m[(i, c)];
                n_hat[(row, c)] = spec.slopes[(i, k)] * n_cont[(i, c)];
            }
            h_hat[row] = spec.thresholds[(i, k)];
        }
    }
    ExpandedSystem { m: m_hat, n: n_hat, h: h_hat, units, basis: d }
}

/// Latent vector field of the expanded system: f(z) = −z + N̂ᵀ max(M̂z − ĥ, 0).
pub fn expanded_field(sys: &ExpandedSystem, z: &DVector<f64>) -> DVector<f64> {
    let pre = &sys.m * z;
    let mut acc = -z.clone();
    for i in 0..sys.m.nrows() {
        let v = pre[i] - sys.h[i];
        if v > 0.0 {
            for c in 0..sys.m.ncols() {
                acc[c] += sys.n[(i, c)] * v;
            }
        }
    }
    acc
}

/// Outcome of solving one region's linear system.
#[derive(Debug, Clone)]
pub enum RegionSolution {
    Point(DVector<f64>),
    Degenerate,
}

/// Solve z* = (NᵀD_ΩM − I)⁻¹ NᵀD_Ω h for the continuous-time expanded system.
pub fn solve_region(
    n_mat: &DMatrix<f64>,
    m: &DMatrix<f64>,
    h: &DVector<f64>,
    region: &RegionIndicator,
) -> RegionSolution {
    let r = m.ncols();
    let mut a = DMatrix::identity(r, r) * -1.0;
    let mut rhs = DVector::zeros(r);
    for (i, active) in region.0.iter().enumerate() {
        if !active {
            continue;
        }
        for p in 0..r {
            let np = n_mat[(i, p)];
            rhs[p] += np * h[i];
            for q in 0..r {
                a[(p, q)] += np * m[(i, q)];
            }
        }
    }
    let inv = match a.clone().try_inverse() {
        Some(inv) => inv,
        None => return RegionSolution::Degenerate,
    };
    // ∞-norm condition estimate from the explicit inverse.
    let norm_a = a.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let norm_inv =
        inv.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    if norm_a * norm_inv > DEGENERATE_CONDITION {
        return RegionSolution::Degenerate;
    }
    RegionSolution::Point(&inv * rhs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Consistency {
    Consistent { boundary: bool },
    Inconsistent,
}

/// Does the sign pattern of M̂z − ĥ match the assumed region? Units inside
/// the ±`BOUNDARY_BAND` are accepted either way and flagged.
pub fn consistency_check(
    m: &DMatrix<f64>,
    h: &DVector<f64>,
    region: &RegionIndicator,
    z: &DVector<f64>,
) -> Consistency {
    let vals = m * z;
    let mut boundary = false;
    for i in 0..m.nrows() {
        let v = vals[i] - h[i];
        if v.abs() <= BOUNDARY_BAND {
            boundary = true;
            continue;
        }
        if (v > 0.0) != region.0[i] {
            return Consistency::Inconsistent;
        }
    }
    Consistency::Consistent { boundary }
}

/// Zaslavsky-type bound Σ_{r=0}^R D^r·C(N,r) for N families of D parallel
/// hyperplanes in R dimensions, in exact big-integer arithmetic.
pub fn region_bound(units: usize, rank: usize, basis: usize) -> BigUint {
    let mut total = BigUint::from(0u32);
    for r in 0..=rank.min(units) {
        total += BigUint::from(basis as u64).pow(r as u32) * binomial(units, r);
    }
    total
}

fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::from(0u32);
    }
    let mut num = BigUint::from(1u32);
    for i in 0..k {
        num *= BigUint::from((n - i) as u64);
        num /= BigUint::from((i + 1) as u64);
    }
    num
}

/// All region indicators reachable within the column space, found by the
/// intersection sweep: for every subset of at most R hyperplanes that meets
/// in a flat, toggle the subset's units around a witness point nudged off the
/// flat in every sign combination. Every returned indicator is realized at an
/// explicit witness point, so the count never exceeds the true region count.
pub fn candidate_regions(m: &DMatrix<f64>, h: &DVector<f64>) -> Vec<RegionIndicator> {
    let total = m.nrows();
    let rank_ambient = m.ncols();

    // Work in the row space of M̂ so rank-deficient embeddings sweep the
    // dimensions that actually matter.
    let svd = m.clone().svd(false, true);
    let tol_rank = 1e-10 * svd.singular_values.max().max(1.0);
    let r_eff = svd.singular_values.iter().filter(|s| **s > tol_rank).count();
    let v_t = svd.v_t.expect("svd with v requested");
    let basis = v_t.rows(0, r_eff).transpose(); // R×R_eff
    let m_red = if r_eff == rank_ambient { m.clone() } else { m * &basis };

    let mut seen: HashSet<RegionIndicator> = HashSet::new();
    let mut out = Vec::new();
    let scale = h.amax().max(1.0);

    for size in 0..=r_eff {
        for subset in (0..total).combinations(size) {
            sweep_subset(&m_red, h, &subset, scale, &mut seen, &mut out);
        }
    }
    out.sort();
    out
}

fn sweep_subset(
    m: &DMatrix<f64>,
    h: &DVector<f64>,
    subset: &[usize],
    scale: f64,
    seen: &mut HashSet<RegionIndicator>,
    out: &mut Vec<RegionIndicator>,
) {
    let r = m.ncols();
    let size = subset.len();

    let (center, pinv) = if size == 0 {
        (DVector::zeros(r), None)
    } else {
        let mut ms = DMatrix::zeros(size, r);
        let mut hs = DVector::zeros(size);
        for (row, &i) in subset.iter().enumerate() {
            ms.row_mut(row).copy_from(&m.row(i));
            hs[row] = h[i];
        }
        let svd = ms.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let tol = 1e-10 * smax.max(1.0);
        if svd.singular_values.iter().any(|s| *s <= tol) {
            // Rank-deficient subset: its flat (if consistent) equals the flat
            // of an independent sub-subset that is swept separately.
            return;
        }
        let center = svd.clone().pseudo_inverse(tol).expect("svd available") * &hs;
        // Residual check: the subset's hyperplanes must actually meet.
        let resid = (&ms * &center - &hs).amax();
        if resid > 1e-7 * scale.max(center.amax()) {
            return;
        }
        let pinv = svd.pseudo_inverse(tol).expect("svd available");
        (center, Some((pinv, ms)))
    };

    // Sign toggles of the subset's units around the intersection.
    let n_sigma = 1usize << size;
    for sigma_bits in 0..n_sigma {
        let mut eps = 1e-6 * scale.max(center.amax());
        let mut accepted = false;
        for _attempt in 0..6 {
            let witness = match &pinv {
                None => {
                    if size == 0 && _attempt == 0 {
                        center.clone()
                    } else {
                        // Deterministic jitter for retries of the base region.
                        let mut w = center.clone();
                        for c in 0..r {
                            w[c] += eps * ((c * 7 + _attempt * 13 + 1) as f64 * 0.61).sin();
                        }
                        w
                    }
                }
                Some((pinv, _ms)) => {
                    let mut offs = DVector::zeros(size);
                    for (b, o) in offs.iter_mut().enumerate() {
                        let sign = if (sigma_bits >> b) & 1 == 1 { 1.0 } else { -1.0 };
                        // Distinct magnitudes avoid coincidental alignments
                        // with hyperplanes through the same flat.
                        *o = sign * eps * (1.0 + 0.37 * b as f64);
                    }
                    &center + pinv * offs
                }
            };
            // Reject witnesses that sit numerically on any other hyperplane.
            let vals = m * &witness;
            let on_boundary = (0..m.nrows())
                .any(|i| (vals[i] - h[i]).abs() <= 1e-12 * scale.max(1.0));
            if on_boundary {
                eps *= 2.3;
                continue;
            }
            let pattern =
                RegionIndicator((0..m.nrows()).map(|i| vals[i] > h[i]).collect());
            if seen.insert(pattern.clone()) {
                out.push(pattern);
            }
            accepted = true;
            break;
        }
        let _ = accepted;
        if size == 0 {
            break; // single sigma for the empty subset
        }
    }
}

fn continuous_expansion(model: &LowRankRnn) -> Result<ExpandedSystem> {
    if model.leak >= 1.0 {
        return Err(Error::InvalidParam(
            "fixed-point analysis needs a < 1 (leaky dynamics)".into(),
        ));
    }
    let n_cont = model.continuous_readin_unit_tau();
    Ok(expand_basis(&model.embedding, &n_cont, &model.activation))
}

impl LowRankRnn {
    /// N = Ñ/(1−a): the continuous-time read-in with τ normalized out.
    pub fn continuous_readin_unit_tau(&self) -> DMatrix<f64> {
        &self.readin / (1.0 - self.leak)
    }
}

fn analyze_point(
    sys: &ExpandedSystem,
    region: &RegionIndicator,
    z: DVector<f64>,
    boundary: bool,
) -> FixedPoint {
    let r = sys.m.ncols();
    let mut jac = DMatrix::identity(r, r) * -1.0;
    for (i, active) in region.0.iter().enumerate() {
        if !active {
            continue;
        }
        for p in 0..r {
            for q in 0..r {
                jac[(p, q)] += sys.n[(i, p)] * sys.m[(i, q)];
            }
        }
    }
    let eig = jac.clone().complex_eigenvalues();
    let tol = 1e-9;
    let mut any_zero = false;
    let mut any_pos = false;
    let mut any_neg = false;
    for l in eig.iter() {
        if l.re.abs() <= tol {
            any_zero = true;
        } else if l.re > 0.0 {
            any_pos = true;
        } else {
            any_neg = true;
        }
    }
    let stability = if any_zero {
        Stability::Marginal
    } else if any_pos && any_neg {
        Stability::Saddle
    } else if any_pos {
        Stability::Unstable
    } else {
        Stability::Stable
    };
    let _ = any_neg;
    FixedPoint {
        z,
        region: region.clone(),
        jacobian: jac,
        eigenvalues: eig.iter().cloned().collect(),
        stability,
        boundary,
    }
}

fn collect_points(
    sys: &ExpandedSystem,
    regions: &[RegionIndicator],
    tol: f64,
) -> (Vec<FixedPoint>, Vec<RegionIndicator>) {
    let mut found: Vec<FixedPoint> = Vec::new();
    let mut degenerate = Vec::new();
    for region in regions {
        match solve_region(&sys.n, &sys.m, &sys.h, region) {
            RegionSolution::Degenerate => degenerate.push(region.clone()),
            RegionSolution::Point(z) => {
                match consistency_check(&sys.m, &sys.h, region, &z) {
                    Consistency::Inconsistent => {}
                    Consistency::Consistent { boundary } => {
                        if expanded_field(sys, &z).amax() < tol {
                            if !found.iter().any(|p| (&p.z - &z).amax() < MERGE_RADIUS) {
                                found.push(analyze_point(sys, region, z, boundary));
                            }
                        }
                    }
                }
            }
        }
    }
    (found, degenerate)
}

/// Exact enumeration of all fixed points of the noise-free dynamics.
pub fn find_all_fixed_points(model: &LowRankRnn, tol: f64) -> Result<FixedPointReport> {
    let sys = continuous_expansion(model)?;
    let svd_rank = sys.m.clone().svd(false, false);
    let tol_rank = 1e-10 * svd_rank.singular_values.max().max(1.0);
    let r_eff = svd_rank.singular_values.iter().filter(|s| **s > tol_rank).count();
    let rank_deficient = r_eff < model.rank();

    let regions = candidate_regions(&sys.m, &sys.h);
    let (points, degenerate_regions) = collect_points(&sys, &regions, tol);
    Ok(FixedPointReport {
        points,
        regions_examined: regions.len(),
        bound: region_bound(sys.units, model.rank(), sys.basis),
        degenerate_regions,
        rank_deficient,
        inverses_used: regions.len(),
        upfront_inverses: 0,
    })
}

/// Brute-force oracle: enumerate all 2^{N·D} indicators. Guarded to N·D ≤ 20.
pub fn brute_force_fixed_points(model: &LowRankRnn, tol: f64) -> Result<FixedPointReport> {
    let sys = continuous_expansion(model)?;
    let nd = sys.m.nrows();
    if nd > 20 {
        return Err(Error::InvalidParam(format!(
            "brute force guard: N·D = {nd} exceeds 20"
        )));
    }
    let all: Vec<RegionIndicator> = (0..(1usize << nd))
        .map(|bits| RegionIndicator((0..nd).map(|i| (bits >> i) & 1 == 1).collect()))
        .collect();
    let (points, degenerate_regions) = collect_points(&sys, &all, tol);
    Ok(FixedPointReport {
        points,
        regions_examined: all.len(),
        bound: region_bound(sys.units, model.rank(), sys.basis),
        degenerate_regions,
        rank_deficient: false,
        inverses_used: all.len(),
        upfront_inverses: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Draw per-unit activation levels uniformly over the (D+1)^N patterns.
    Uniform,
    /// Draw starting indicators from the precomputed reachable-region set.
    Constrained,
}

/// Iterative region-hopping search: solve the current region, jump to the
/// region of the virtual fixed point on inconsistency, store on consistency.
/// Returns found points plus the matrix-inverse counters for cost curves.
pub fn approximate_search<R: Rng + ?Sized>(
    model: &LowRankRnn,
    max_iters: usize,
    restarts: usize,
    init_mode: InitMode,
    rng: &mut R,
) -> Result<FixedPointReport> {
    let sys = continuous_expansion(model)?;
    let nd = sys.m.nrows();
    let d = sys.basis;

    let (candidates, upfront) = match init_mode {
        InitMode::Uniform => (Vec::new(), 0),
        InitMode::Constrained => {
            let regions = candidate_regions(&sys.m, &sys.h);
            let cost = regions.len();
            (regions, cost)
        }
    };

    // Thresholds per original unit sorted ascending; a random "level" per
    // unit activates its lowest ℓ thresholds, matching the (D+1)^N geometry.
    let mut order: Vec<Vec<usize>> = Vec::with_capacity(sys.units);
    for i in 0..sys.units {
        let mut idx: Vec<usize> = (0..d).collect();
        idx.sort_by(|&a, &b| {
            sys.h[i * d + a].partial_cmp(&sys.h[i * d + b]).unwrap()
        });
        order.push(idx);
    }

    let mut found: Vec<FixedPoint> = Vec::new();
    let mut degenerate = Vec::new();
    let mut inverses = 0usize;

    for _ in 0..restarts {
        let mut region = match init_mode {
            InitMode::Uniform => {
                let mut bits = vec![false; nd];
                for i in 0..sys.units {
                    let level = rng.gen_range(0..=d);
                    for &k in order[i].iter().take(level) {
                        bits[i * d + k] = true;
                    }
                }
                RegionIndicator(bits)
            }
            InitMode::Constrained => candidates[rng.gen_range(0..candidates.len())].clone(),
        };

        for _iter in 0..max_iters {
            inverses += 1;
            match solve_region(&sys.n, &sys.m, &sys.h, &region) {
                RegionSolution::Degenerate => {
                    if !degenerate.contains(&region) {
                        degenerate.push(region.clone());
                    }
                    break;
                }
                RegionSolution::Point(z) => {
                    match consistency_check(&sys.m, &sys.h, &region, &z) {
                        Consistency::Consistent { boundary } => {
                            if !found.iter().any(|p| (&p.z - &z).amax() < MERGE_RADIUS) {
                                found.push(analyze_point(&sys, &region, z, boundary));
                            }
                            break;
                        }
                        Consistency::Inconsistent => {
                            let next = RegionIndicator::at_point(&sys.m, &sys.h, &z);
                            if next == region {
                                break;
                            }
                            region = next;
                        }
                    }
                }
            }
        }
    }

    Ok(FixedPointReport {
        points: found,
        regions_examined: 0,
        bound: region_bound(sys.units, model.rank(), sys.basis),
        degenerate_regions: degenerate,
        rank_deficient: false,
        inverses_used: inverses,
        upfront_inverses: upfront,
    })
}
