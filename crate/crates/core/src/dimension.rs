//! Moran equation, gauges, simple families and dimension estimators over a
//! triangle system.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gasket::{MultiIndex, TriangleSystem};
use crate::metric::packing_bound;
use crate::scalar::Real;
use crate::surface::{SurfaceModel, SurfacePoint};
use crate::triangle::{next, prev, GeodesicTriangleRegion};

/// Ratio coefficients `0 < λᵢ < 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioList<T> {
    lambdas: Vec<T>,
}

impl<T: Real> RatioList<T> {
    pub fn new(lambdas: Vec<T>) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(Error::domain("at least one ratio is required"));
        }
        if let Some(bad) = lambdas.iter().find(|&&l| !(l > T::zero() && l < T::one())) {
            return Err(Error::domain(format!("ratio {bad} outside (0, 1)")));
        }
        Ok(RatioList { lambdas })
    }

    pub fn uniform(lambda: T, k: usize) -> Result<Self> {
        Self::new(vec![lambda; k])
    }

    pub fn lambdas(&self) -> &[T] {
        &self.lambdas
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    pub fn max(&self) -> T {
        self.lambdas.iter().copied().fold(T::zero(), T::max)
    }

    pub fn min(&self) -> T {
        self.lambdas.iter().copied().fold(T::one(), T::min)
    }

    /// `λ_I = λ_{i₁}···λ_{iₙ}`.
    pub fn product(&self, index: &MultiIndex) -> Result<T> {
        index.digits().iter().try_fold(T::one(), |acc, &d| {
            self.lambdas
                .get(d as usize - 1)
                .map(|&l| acc * l)
                .ok_or_else(|| Error::Invalid(format!("digit {d} has no ratio")))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoranSolution<T> {
    pub s: T,
    pub residual: T,
}

/// Root of `Σ λᵢˢ = 1`.
pub fn solve_moran<T: Real>(ratios: &RatioList<T>) -> Result<MoranSolution<T>> {
    let lam = ratios.lambdas();
    let k = lam.len();
    if k == 1 {
        return Ok(MoranSolution {
            s: T::zero(),
            residual: T::zero(),
        });
    }
    let f = |s: T| lam.iter().map(|&l| l.powf(s)).sum::<T>() - T::one();
    let df = |s: T| lam.iter().map(|&l| l.powf(s) * l.ln()).sum::<T>();
    let (mut lo, mut hi) = (T::zero(), T::of_usize(k).ln() / (T::one() / ratios.max()).ln());
    for _ in 0..200 {
        let mid = (lo + hi) * T::lit(0.5);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > T::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut s = (lo + hi) * T::lit(0.5);
    for _ in 0..8 {
        let step = f(s) / df(s);
        let ns = s - step;
        if !(ns >= lo && ns <= hi) {
            break;
        }
        if f(ns).abs() <= f(s).abs() {
            s = ns;
        } else {
            break;
        }
    }
    let residual = f(s).abs();
    if residual > T::tol(1e-12) {
        return Err(Error::Convergence {
            what: "Moran equation",
            iterations: 208,
            residual: residual.as_f64(),
        });
    }
    Ok(MoranSolution { s, residual })
}

/// Increasing gauge `φ` with `φ(0⁺) = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum GaugeSpec {
    /// `c·y^α`.
    Power { c: f64, alpha: f64 },
    /// `c·(−log y)^{−p}` on `0 < y < 1`.
    LogPower { c: f64, p: f64 },
    /// Linear interpolation of `(y, φ)` pairs, extended linearly to 0 below
    /// the first point and constantly past the last.
    Table { points: Vec<(f64, f64)> },
}

impl GaugeSpec {
    pub fn quadratic(c: f64) -> Self {
        GaugeSpec::Power { c, alpha: 2.0 }
    }

    /// `(−log y)^{−1−2/(2n+1)}`.
    pub fn log_family(n: u32) -> Self {
        GaugeSpec::LogPower {
            c: 1.0,
            p: 1.0 + 2.0 / (2.0 * n as f64 + 1.0),
        }
    }

    pub fn eval(&self, y: f64) -> f64 {
        self.eval_ln(y.ln())
    }

    /// `φ(e^{ln_y})`, evaluated without forming `y` where possible.
    pub fn eval_ln(&self, ln_y: f64) -> f64 {
        match self {
            GaugeSpec::Power { c, alpha } => c * (alpha * ln_y).exp(),
            GaugeSpec::LogPower { c, p } => {
                if ln_y >= 0.0 {
                    f64::INFINITY
                } else {
                    c * (-ln_y).powf(-p)
                }
            }
            GaugeSpec::Table { points } => {
                let y = ln_y.exp();
                let (y0, f0) = points[0];
                if y <= y0 {
                    return f0 * y / y0;
                }
                match points.iter().position(|&(yy, _)| yy >= y) {
                    None => points[points.len() - 1].1,
                    Some(k) => {
                        let (ya, fa) = points[k - 1];
                        let (yb, fb) = points[k];
                        fa + (fb - fa) * (y - ya) / (yb - ya)
                    }
                }
            }
        }
    }

    /// Parameter checks and a probe of monotonicity and the limit at 0 on
    /// `(0, y_max]`.
    pub fn validate(&self, y_max: f64) -> Result<()> {
        match self {
            GaugeSpec::Power { c, alpha } => {
                if !(*c >= 0.0 && *alpha > 0.0) || !c.is_finite() || !alpha.is_finite() {
                    return Err(Error::InvalidGauge(format!("power gauge needs c ≥ 0, α > 0 (c = {c}, α = {alpha})")));
                }
            }
            GaugeSpec::LogPower { c, p } => {
                if !(*c >= 0.0 && *p > 0.0) || !c.is_finite() || !p.is_finite() {
                    return Err(Error::InvalidGauge(format!("log-power gauge needs c ≥ 0, p > 0 (c = {c}, p = {p})")));
                }
                if !(y_max < 1.0) {
                    return Err(Error::InvalidGauge("log-power gauge is defined on (0, 1) only".into()));
                }
            }
            GaugeSpec::Table { points } => {
                if points.is_empty() {
                    return Err(Error::InvalidGauge("empty table".into()));
                }
                if points.iter().any(|&(y, f)| !(y > 0.0 && f >= 0.0) || !y.is_finite() || !f.is_finite()) {
                    return Err(Error::InvalidGauge("table entries need y > 0, φ ≥ 0".into()));
                }
                if points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
                    return Err(Error::InvalidGauge("table abscissae must increase".into()));
                }
            }
        }
        let ln_hi = y_max.ln();
        let ln_lo = ln_hi - 700.0;
        let mut prev = 0.0;
        for k in 0..=2000 {
            let ln_y = ln_lo + (ln_hi - ln_lo) * k as f64 / 2000.0;
            let v = self.eval_ln(ln_y);
            if !(v >= prev) || !v.is_finite() {
                return Err(Error::InvalidGauge(format!("not increasing near y = e^{ln_y:.3}")));
            }
            prev = v;
        }
        if self.eval_ln(-1e6) > 1e-3 * self.eval_ln(ln_hi).max(f64::MIN_POSITIVE) && self.eval_ln(-1e6) > 1e-12 {
            return Err(Error::InvalidGauge("φ does not tend to 0 at 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaugeAdmissibility {
    pub admissible: bool,
    /// `∫₁^X φ(aν^x) dx` plus the extrapolated tail when admissible.
    pub integral: f64,
    pub doublings: usize,
    pub last_increment: f64,
    /// Last quotient of successive increments `∫_X^{2X} / ∫_{X/2}^X`.
    pub increment_ratio: f64,
}

const MAX_DOUBLINGS: usize = 40;

/// Decides `∫₁^∞ φ(aν^x) dx < ∞` by integrating over `[X, 2X]` blocks.
///
/// Stops as admissible when a block contributes less than 1e−10, or when the
/// block quotients have settled below 1 (geometric tail, added to the
/// integral). Inadmissible after 40 doublings otherwise.
pub fn gauge_admissible(gauge: &GaugeSpec, a: f64, nu: f64) -> Result<GaugeAdmissibility> {
    if !(a > 0.0) || !(nu > 0.0 && nu < 1.0) {
        return Err(Error::domain(format!("need a > 0 and 0 < ν < 1 (a = {a}, ν = {nu})")));
    }
    gauge.validate(a * nu)?;
    tail_integral(gauge, a.ln(), nu.ln(), 1.0)
}

fn tail_integral(gauge: &GaugeSpec, ln_a: f64, ln_nu: f64, start: f64) -> Result<GaugeAdmissibility> {
    let g = |x: f64| gauge.eval_ln(ln_a + x * ln_nu);
    let mut total: f64 = 0.0;
    let mut x = start;
    let mut incs: Vec<f64> = Vec::new();
    for d in 0..=MAX_DOUBLINGS {
        let inc = simpson(&g, x, 2.0 * x, 1e-14 * (1.0 + total.abs()));
        total += inc;
        incs.push(inc);
        x *= 2.0;
        let ratio = ratio_at(&incs, incs.len() - 1);
        if inc < 1e-10 && inc <= total * 1e-3 + 1e-10 && (incs.len() < 2 || ratio < 1.0) {
            return Ok(GaugeAdmissibility {
                admissible: true,
                integral: total,
                doublings: d,
                last_increment: inc,
                increment_ratio: ratio,
            });
        }
        if incs.len() >= 5 {
            let n = incs.len();
            let (r1, r2, r3) = (ratio_at(&incs, n - 3), ratio_at(&incs, n - 2), ratio_at(&incs, n - 1));
            let settled = (1.0 - r3) > 1e-3
                && ((1.0 - r3) - (1.0 - r2)).abs() <= 1e-2 * (1.0 - r3)
                && ((1.0 - r2) - (1.0 - r1)).abs() <= 1e-2 * (1.0 - r3);
            if settled {
                return Ok(GaugeAdmissibility {
                    admissible: true,
                    integral: total + inc * r3 / (1.0 - r3),
                    doublings: d,
                    last_increment: inc,
                    increment_ratio: r3,
                });
            }
        }
    }
    let n = incs.len();
    Ok(GaugeAdmissibility {
        admissible: false,
        integral: total,
        doublings: MAX_DOUBLINGS,
        last_increment: incs[n - 1],
        increment_ratio: ratio_at(&incs, n - 1),
    })
}

/// Quotient of block `k` over block `k − 1`.
fn ratio_at(incs: &[f64], k: usize) -> f64 {
    if k == 0 || incs[k - 1] == 0.0 {
        return 0.0;
    }
    incs[k] / incs[k - 1]
}

fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol.max(1e-300), 60)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let diff = left + right - whole;
    if depth == 0 || diff.abs() <= 15.0 * tol {
        return left + right + diff / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProductBounds {
    /// `Π_{i≥0} (1 + φ(νⁱ|V|))`.
    pub upper: f64,
    /// `Π_{i≥0} (1 − φ(νⁱ|V|))`.
    pub lower: f64,
    pub terms: usize,
    /// Bound on the neglected part of either log-sum.
    pub truncation_error: f64,
}

/// Both infinite products of the gauge along `νⁱ|V|`.
pub fn product_bounds(gauge: &GaugeSpec, nu: f64, diam: f64) -> Result<ProductBounds> {
    if !(nu > 0.0 && nu < 1.0) || !(diam > 0.0) {
        return Err(Error::domain(format!("need 0 < ν < 1 and |V| > 0 (ν = {nu}, |V| = {diam})")));
    }
    gauge.validate(diam)?;
    let (ln_v, ln_nu) = (diam.ln(), nu.ln());
    let phi = |i: f64| gauge.eval_ln(ln_v + i * ln_nu);
    if phi(0.0) >= 1.0 {
        return Err(Error::domain(format!(
            "φ(|V|) = {} ≥ 1 makes the lower product vanish",
            phi(0.0)
        )));
    }
    let (mut lu, mut ll) = (0.0f64, 0.0f64);
    let mut i = 0usize;
    const MAX_TERMS: usize = 1_000_000;
    while i < MAX_TERMS {
        let p = phi(i as f64);
        if p < 1e-17 {
            break;
        }
        lu += p.ln_1p();
        ll += (-p).ln_1p();
        i += 1;
    }
    let mut truncation_error = phi(i as f64);
    if i == MAX_TERMS {
        // terms decrease, so the rest is at most φ_N + ∫_N^∞ φ
        let tail = tail_integral(gauge, ln_v, ln_nu, i as f64)?;
        lu += tail.integral;
        ll -= tail.integral;
        truncation_error += tail.integral.max(tail.last_increment);
    }
    Ok(ProductBounds {
        upper: lu.exp(),
        lower: ll.exp(),
        terms: i,
        truncation_error,
    })
}

/// Prefix-free, exhaustive set of multi-indices over digits `1..=branching`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimpleFamily {
    pub branching: usize,
    pub members: Vec<MultiIndex>,
}

impl SimpleFamily {
    pub fn new(branching: usize, members: Vec<MultiIndex>) -> Result<Self> {
        let f = SimpleFamily { branching, members };
        f.validate()?;
        Ok(f)
    }

    /// Prefix-freeness and exhaustiveness (every infinite string has exactly
    /// one prefix in the family).
    pub fn validate(&self) -> Result<()> {
        let set: BTreeSet<&[u8]> = self.members.iter().map(|m| m.digits()).collect();
        if set.len() != self.members.len() {
            return Err(Error::Invalid("repeated member".into()));
        }
        if self.members.iter().any(|m| m.digits().iter().any(|&d| d as usize > self.branching)) {
            return Err(Error::Invalid(format!("digit above {}", self.branching)));
        }
        for m in &self.members {
            for l in 0..m.len() {
                if set.contains(&m.digits()[..l]) {
                    return Err(Error::Invalid(format!("{m} extends another member")));
                }
            }
        }
        let max_len = self.members.iter().map(|m| m.len()).max().unwrap_or(0);
        let mut prefix = Vec::new();
        if !covers(&set, &mut prefix, self.branching, max_len) {
            return Err(Error::Invalid(format!(
                "strings starting with {} miss the family",
                MultiIndex::new(prefix).map(|m| m.to_string()).unwrap_or_default()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

fn covers(set: &BTreeSet<&[u8]>, prefix: &mut Vec<u8>, b: usize, max_len: usize) -> bool {
    if set.contains(prefix.as_slice()) {
        return true;
    }
    if prefix.len() >= max_len {
        return false;
    }
    for d in 1..=b as u8 {
        prefix.push(d);
        let ok = covers(set, prefix, b, max_len);
        if !ok {
            return false;
        }
        prefix.pop();
    }
    true
}

/// First prefix of every branch whose cell diameter is at most `threshold`.
pub fn enumerate_simple_family<T: Real>(system: &TriangleSystem<T>, threshold: T) -> Result<SimpleFamily> {
    if !(threshold > T::zero()) {
        return Err(Error::domain("threshold must be positive"));
    }
    let b = system.branching();
    let mut members = Vec::new();
    let mut stack = vec![(0usize, 0usize)];
    while let Some((n, idx)) = stack.pop() {
        let cell = &system.levels[n][idx];
        if cell.diam() <= threshold * (T::one() + T::tol(1e-12)) && n > 0 {
            members.push(MultiIndex::from_level_index(n, idx, b));
        } else if n == system.depth() {
            return Err(Error::DepthExhausted {
                branch: MultiIndex::from_level_index(n, idx, b).to_string(),
            });
        } else {
            for d in (0..b).rev() {
                stack.push((n + 1, idx * b + d));
            }
        }
    }
    Ok(SimpleFamily { branching: b, members })
}

/// First prefix of every branch with `λ_I ≤ threshold`.
pub fn enumerate_by_ratio<T: Real>(ratios: &RatioList<T>, threshold: T) -> Result<SimpleFamily> {
    if !(threshold > T::zero() && threshold < T::one()) {
        return Err(Error::domain("threshold must lie in (0, 1)"));
    }
    let k = ratios.len();
    let mut members = Vec::new();
    let mut stack = vec![(MultiIndex::root(), T::one())];
    while let Some((idx, lam)) = stack.pop() {
        if lam <= threshold {
            members.push(idx);
            if members.len() > 10_000_000 {
                return Err(Error::domain("family exceeds 10⁷ members"));
            }
        } else {
            for d in (1..=k as u8).rev() {
                stack.push((idx.child(d), lam * ratios.lambdas()[d as usize - 1]));
            }
        }
    }
    Ok(SimpleFamily { branching: k, members })
}

/// `Σ_{I∈𝒮} λ_Iˢ`.
pub fn simple_family_sum<T: Real>(family: &SimpleFamily, ratios: &RatioList<T>, s: T) -> Result<T> {
    family
        .members
        .iter()
        .map(|m| ratios.product(m).map(|l| l.powf(s)))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HausdorffRow {
    pub depth: usize,
    pub sum: f64,
    /// `Π_{i<n} (1 + φ(νⁱ|V|))ˢ |V|ˢ`.
    pub bound: f64,
}

/// Upper sums `Σ_{|I|=n} |Δ_I|ˢ` for `n ≤ depth` against the product bound.
pub fn hausdorff_envelope<T: Real>(system: &TriangleSystem<T>, s: f64, gauge: &GaugeSpec) -> Result<Vec<HausdorffRow>> {
    let v = system.diam().as_f64();
    let nu = system.nu.as_f64();
    let mut log_prod = 0.0;
    let mut rows = Vec::with_capacity(system.depth() + 1);
    for n in 0..=system.depth() {
        let sum = system.hausdorff_upper_sum(T::lit(s), n)?.as_f64();
        rows.push(HausdorffRow {
            depth: n,
            sum,
            bound: (s * log_prod).exp() * v.powf(s),
        });
        log_prod += gauge.eval(nu.powi(n as i32) * v).ln_1p();
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxRow {
    pub depth: usize,
    pub epsilon: f64,
    pub count: usize,
    /// `Σ_{|I|=n} |Δ_I|ˢ` at the similarity dimension.
    pub sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDimensionReport {
    pub rows: Vec<BoxRow>,
    /// Depths used in the fit.
    pub fitted: Vec<usize>,
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    /// `slope ± 1.96·stderr`.
    pub band: (f64, f64),
    pub dropped_coarsest: bool,
    pub similarity_dimension: f64,
}

/// Least-squares slope of `log N` against `−log ε` with `N = bⁿ` cells of
/// diameter at most `ε = max |Δ_I|`.
pub fn box_dimension_estimate<T: Real>(system: &TriangleSystem<T>, n1: usize, n2: usize) -> Result<BoxDimensionReport> {
    if n2 < n1 || n2 - n1 < 3 {
        return Err(Error::InsufficientData(format!(
            "levels {n1}..{n2} give fewer than 4 points"
        )));
    }
    if n2 > system.depth() {
        return Err(Error::domain(format!("level {n2} exceeds the system depth {}", system.depth())));
    }
    let b = system.branching();
    let ratios = RatioList::uniform(0.5f64, b)?;
    let s = solve_moran(&ratios)?.s;
    let rows: Vec<BoxRow> = (n1..=n2)
        .map(|n| BoxRow {
            depth: n,
            epsilon: system.max_diam_at(n).as_f64(),
            count: system.cells_at(n).len(),
            sum: system.cells_at(n).iter().map(|c| c.diam().as_f64().powf(s)).sum(),
        })
        .collect();
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (-r.epsilon.ln(), (r.count as f64).ln())).collect();
    let mut fit = linear_fit(&pts);
    let mut start = 0;
    if pts.len() > 4 {
        let res: Vec<f64> = pts.iter().map(|&(x, y)| (y - fit.0 * x - fit.1).abs()).collect();
        let mut sorted = res.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        if res[0] > 3.0 * median && res[0] > 1e-9 {
            start = 1;
            fit = linear_fit(&pts[1..]);
        }
    }
    let (slope, intercept, stderr) = fit;
    Ok(BoxDimensionReport {
        fitted: rows[start..].iter().map(|r| r.depth).collect(),
        rows,
        slope,
        intercept,
        stderr,
        band: (slope - 1.96 * stderr, slope + 1.96 * stderr),
        dropped_coarsest: start == 1,
        similarity_dimension: s,
    })
}

/// Ordinary least squares `y = a x + b`; returns `(a, b, se(a))`.
pub fn linear_fit(pts: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let a = sxy / sxx;
    let b = my - a * mx;
    let ssr: f64 = pts.iter().map(|p| (p.1 - a * p.0 - b).powi(2)).sum();
    let se = if pts.len() > 2 { (ssr / (n - 2.0) / sxx).sqrt() } else { f64::NAN };
    (a, b, se)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallIntersection {
    pub count: usize,
    /// Smallest inradius over the depth's cells, in units of `ρ`.
    pub c1: f64,
    /// Largest circumradius over the depth's cells, in units of `ρ`.
    pub c2: f64,
    /// Disjoint `c₁ρ`-balls that fit in `B(x, (1 + 2c₂)ρ)` by area comparison.
    pub packing_bound: usize,
    pub within_bound: bool,
}

/// Inradius and circumradius of the planar triangle with the given sides.
pub fn triangle_radii(a: [f64; 3]) -> (f64, f64) {
    let s = 0.5 * (a[0] + a[1] + a[2]);
    let area = (s * (s - a[0]) * (s - a[1]) * (s - a[2])).max(0.0).sqrt();
    (area / s, a[0] * a[1] * a[2] / (4.0 * area))
}

/// Number of closed depth-`depth` cells meeting the closed ball `B(x, ρ)`.
pub fn disjoint_ball_intersection_count<T: Real>(
    system: &TriangleSystem<T>,
    depth: usize,
    x: &SurfacePoint<T>,
    rho: T,
) -> Result<BallIntersection> {
    if depth > system.depth() {
        return Err(Error::domain(format!("depth {depth} exceeds the system depth")));
    }
    if !(rho > T::zero()) {
        return Err(Error::domain("radius must be positive"));
    }
    let cells = system.cells_at(depth);
    let r = rho.as_f64();
    let (mut c1, mut c2) = (f64::INFINITY, 0.0f64);
    for c in cells {
        let (ri, rc) = triangle_radii(c.sides.map(|v| v.as_f64()));
        if !(ri > 0.0) || !rc.is_finite() {
            return Err(Error::Degenerate("cell without witness radii".into()));
        }
        c1 = c1.min(ri / r);
        c2 = c2.max(rc / r);
    }
    let s = &system.surface;
    let count = cells
        .par_iter()
        .map(|c| -> Result<usize> {
            // cheap rejection: every point of the cell is within its diameter of a vertex
            if s.distance(x, &c.vertices[0])? > rho + c.diam() {
                return Ok(0);
            }
            let v = c.vertices;
            let mut sides = Vec::with_capacity(3);
            for i in 0..3 {
                sides.push(s.geodesic_between(&v[next(i)], &v[prev(i)])?);
            }
            let region = GeodesicTriangleRegion::from_parts(v, [sides[0], sides[1], sides[2]]);
            Ok(usize::from(distance_to_region(s, &region, x)? <= rho * (T::one() + T::tol(1e-12))))
        })
        .sum::<Result<usize>>()?;
    let big = 1.0 + 2.0 * c2;
    let packing_bound = packing_bound(s.kind().is_flat(), big * r, c1 / big);
    Ok(BallIntersection {
        count,
        c1,
        c2,
        packing_bound,
        within_bound: count <= packing_bound,
    })
}

/// Distance from `x` to the closed region (0 inside).
pub fn distance_to_region<T: Real>(surface: &SurfaceModel<T>, region: &GeodesicTriangleRegion<T>, x: &SurfacePoint<T>) -> Result<T> {
    if let Ok(true) = region.contains(surface, x, T::tol(1e-9)) {
        return Ok(T::zero());
    }
    let mut best = T::infinity();
    for side in &region.sides {
        let d = if surface.kind().is_flat() {
            let (p, q) = (side.start, side.end);
            let (dx, dy) = (q.u - p.u, q.v - p.v);
            let len2 = dx * dx + dy * dy;
            let t = if len2 == T::zero() {
                T::zero()
            } else {
                (((x.u - p.u) * dx + (x.v - p.v) * dy) / len2).max(T::zero()).min(T::one())
            };
            x.chart_distance(&SurfacePoint::new(p.u + t * dx, p.v + t * dy))
        } else {
            let f = |t: T| -> Result<T> { surface.distance(x, &side.point_at(surface, t)?) };
            let n = 16;
            let mut k_best = 0;
            let mut d_best = T::infinity();
            for k in 0..=n {
                let d = f(T::of_usize(k) / T::of_usize(n))?;
                if d < d_best {
                    d_best = d;
                    k_best = k;
                }
            }
            let step = T::one() / T::of_usize(n);
            let (mut lo, mut hi) = (
                (T::of_usize(k_best) * step - step).max(T::zero()),
                (T::of_usize(k_best) * step + step).min(T::one()),
            );
            let g = T::lit(0.618_033_988_749_894_9);
            for _ in 0..40 {
                let m1 = hi - g * (hi - lo);
                let m2 = lo + g * (hi - lo);
                if f(m1)? < f(m2)? {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            d_best.min(f((lo + hi) * T::lit(0.5))?)
        };
        best = best.min(d);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gasket::{build_system, BuildOptions, Variant};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    type P = SurfacePoint<f64>;

    fn flat(depth: usize, variant: Variant) -> TriangleSystem<f64> {
        let e = SurfaceModel::euclidean();
        let t = GeodesicTriangleRegion::new(&e, P::new(0.0, 0.0), P::new(1.0, 0.0), P::new(0.5, 3f64.sqrt() / 2.0)).unwrap();
        build_system(&e, t, depth, BuildOptions { variant, delta: None }).unwrap()
    }

    fn bisect_oracle(l: &[f64]) -> f64 {
        let (mut lo, mut hi) = (0.0, 50.0);
        for _ in 0..200 {
            let m = 0.5 * (lo + hi);
            if l.iter().map(|x| x.powf(m)).sum::<f64>() > 1.0 {
                lo = m;
            } else {
                hi = m;
            }
        }
        lo
    }

    #[test]
    fn moran_examples() {
        let s = solve_moran(&RatioList::uniform(0.5, 3).unwrap()).unwrap();
        assert!((s.s - 3f64.ln() / 2f64.ln()).abs() < 1e-12 && s.residual <= 1e-12);
        assert!((solve_moran(&RatioList::uniform(0.5f64, 2).unwrap()).unwrap().s - 1.0).abs() < 1e-12);
        let x = (5f64.sqrt() - 1.0) / 2.0;
        let want = -x.log2();
        let got = solve_moran(&RatioList::new(vec![0.5, 0.25]).unwrap()).unwrap().s;
        assert!((got - want).abs() < 1e-12 && (got - 0.6942419).abs() < 1e-7);
        assert_eq!(solve_moran(&RatioList::new(vec![0.3]).unwrap()).unwrap().s, 0.0);
        assert!(RatioList::<f64>::new(vec![]).is_err());
        assert!(RatioList::new(vec![1.5]).is_err());
        let s32 = solve_moran(&RatioList::uniform(0.5f32, 3).unwrap()).unwrap();
        assert!((s32.s - 1.5849625).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn moran_matches_closed_form(k in 2usize..12, lam in 0.01f64..0.99) {
            let s = solve_moran(&RatioList::uniform(lam, k).unwrap()).unwrap().s;
            prop_assert!((s - (k as f64).ln() / (1.0 / lam).ln()).abs() < 1e-12 * (1.0 + s));
        }

        #[test]
        fn moran_is_monotone(l in prop::collection::vec(0.05f64..0.9, 2..6), pick in 0usize..6, bump in 0.001f64..0.09) {
            let i = pick % l.len();
            let s0 = solve_moran(&RatioList::new(l.clone()).unwrap()).unwrap().s;
            let mut l2 = l.clone();
            l2[i] += bump;
            let s1 = solve_moran(&RatioList::new(l2).unwrap()).unwrap().s;
            prop_assert!(s1 > s0);
            prop_assert!((s0 - bisect_oracle(&l)).abs() < 1e-10);
        }

        #[test]
        fn threshold_families_sum_to_one(l in prop::collection::vec(0.05f64..0.8, 2..5), th in 0.001f64..0.5) {
            let r = RatioList::new(l).unwrap();
            let s = solve_moran(&r).unwrap().s;
            let fam = match enumerate_by_ratio(&r, th) {
                Ok(f) => f,
                Err(Error::Domain(m)) if m.contains("10⁷") => return Ok(()),
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            };
            fam.validate().unwrap();
            prop_assert!((simple_family_sum(&fam, &r, s).unwrap() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn quadratic_gauge_integral() {
        let g = GaugeSpec::quadratic(1.0);
        let r = gauge_admissible(&g, 1.0, 0.5).unwrap();
        assert!(r.admissible);
        assert!((r.integral - 1.0 / (8.0 * 2f64.ln())).abs() < 1e-10, "{r:?}");
    }

    #[test]
    fn log_gauges() {
        for n in 1..=3 {
            let r = gauge_admissible(&GaugeSpec::log_family(n), 1.0, 0.5).unwrap();
            assert!(r.admissible, "n = {n}: {r:?}");
        }
        let div = GaugeSpec::LogPower { c: 1.0, p: 1.0 };
        let r = gauge_admissible(&div, 1.0, 0.5).unwrap();
        assert!(!r.admissible && r.integral > 30.0, "{r:?}");
        let r = gauge_admissible(&div, 0.3, 0.545).unwrap();
        assert!(!r.admissible, "{r:?}");
        let bad = GaugeSpec::Table {
            points: vec![(0.1, 0.2), (0.2, 0.1)],
        };
        assert!(matches!(gauge_admissible(&bad, 1.0, 0.5), Err(Error::InvalidGauge(_))));
        let table = GaugeSpec::Table {
            points: vec![(0.1, 0.01), (0.5, 0.25), (1.0, 1.0)],
        };
        assert!(gauge_admissible(&table, 1.0, 0.5).unwrap().admissible);
    }

    #[test]
    fn products() {
        let g = GaugeSpec::quadratic(1.0);
        let nu: f64 = 0.545;
        let p = product_bounds(&g, nu, 0.3).unwrap();
        let geometric: f64 = 0.09 / (1.0 - nu * nu);
        assert!(p.upper > 1.0 && p.upper < geometric.exp());
        let direct: f64 = (0..200).map(|i| 1.0 + 0.09 * nu.powi(2 * i)).product();
        assert!((p.upper - direct).abs() < 1e-12);
        assert!(p.lower > 0.0 && p.lower < 1.0);
        let z = product_bounds(&GaugeSpec::quadratic(0.0), nu, 0.3).unwrap();
        assert_eq!((z.upper, z.lower), (1.0, 1.0));
        assert!(product_bounds(&GaugeSpec::Power { c: 1.0, alpha: 1.0 }, 0.5, 1.0).is_err());
    }

    #[test]
    fn system_families() {
        let sys = flat(5, Variant::Gasket);
        let d = sys.diam();
        assert_eq!(enumerate_simple_family(&sys, d / 8.0).unwrap().len(), 27);
        assert_eq!(enumerate_simple_family(&sys, 0.3 * d).unwrap().len(), 9);
        assert!(matches!(
            enumerate_simple_family(&sys, d / 100.0),
            Err(Error::DepthExhausted { .. })
        ));
        let r = RatioList::uniform(0.5f64, 3).unwrap();
        let s = solve_moran(&r).unwrap().s;
        let fam = enumerate_simple_family(&sys, d / 8.0).unwrap();
        assert!((simple_family_sum(&fam, &r, s).unwrap() - 1.0).abs() < 1e-14);
        let mixed: Vec<MultiIndex> = ["1", "2", "31", "32", "33"].iter().map(|x| x.parse().unwrap()).collect();
        let fam = SimpleFamily::new(3, mixed).unwrap();
        assert!((simple_family_sum(&fam, &r, s).unwrap() - 1.0).abs() < 1e-14);
        let gap: Vec<MultiIndex> = ["1", "2", "31"].iter().map(|x| x.parse().unwrap()).collect();
        assert!(SimpleFamily::new(3, gap).is_err());
        let nested: Vec<MultiIndex> = ["1", "2", "3", "31"].iter().map(|x| x.parse().unwrap()).collect();
        assert!(SimpleFamily::new(3, nested).is_err());
    }

    /// Replaces complete sibling groups by their parent, deepest first,
    /// scaling the value by `Σλᵢˢ`; a simple family collapses to the root.
    fn collapse_oracle(fam: &SimpleFamily, r: &RatioList<f64>, s: f64) -> Option<f64> {
        let mut cur: std::collections::BTreeMap<Vec<u8>, f64> = fam
            .members
            .iter()
            .map(|m| (m.digits().to_vec(), r.product(m).unwrap().powf(s)))
            .collect();
        while !(cur.len() == 1 && cur.contains_key(&Vec::new())) {
            let deepest = cur.keys().map(|k| k.len()).max()?;
            let key = cur.keys().find(|k| k.len() == deepest)?.clone();
            let parent = key[..deepest - 1].to_vec();
            let mut total = 0.0;
            for d in 1..=fam.branching as u8 {
                let mut c = parent.clone();
                c.push(d);
                total += cur.remove(&c)?;
            }
            cur.insert(parent, total);
        }
        cur.get(&Vec::new()).copied()
    }

    #[test]
    fn random_families_collapse() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let k = rng.gen_range(2..5);
            let l: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..0.7)).collect();
            let r = RatioList::new(l).unwrap();
            let s = solve_moran(&r).unwrap().s;
            let fam = enumerate_by_ratio(&r, rng.gen_range(0.005..0.3)).unwrap();
            let want = collapse_oracle(&fam, &r, s).unwrap();
            let got = simple_family_sum(&fam, &r, s).unwrap();
            assert!((got - want).abs() < 1e-12 && (got - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn flat_box_dimension() {
        let sys = flat(10, Variant::Gasket);
        let rep = box_dimension_estimate(&sys, 4, 10).unwrap();
        assert!((rep.slope - 3f64.ln() / 2f64.ln()).abs() < 1e-12);
        for row in &rep.rows {
            assert!((row.sum / sys.diam().powf(rep.similarity_dimension) - 1.0).abs() < 1e-10);
        }
        assert!(matches!(box_dimension_estimate(&sys, 4, 6), Err(Error::InsufficientData(_))));
        let full = flat(7, Variant::Full);
        let rep = box_dimension_estimate(&full, 3, 7).unwrap();
        assert!((rep.slope - 2.0).abs() < 1e-12);
    }

    #[test]
    fn flat_upper_sums_are_constant() {
        let sys = flat(6, Variant::Gasket);
        let s = 3f64.ln() / 2f64.ln();
        for row in hausdorff_envelope(&sys, s, &GaugeSpec::quadratic(0.0)).unwrap() {
            assert!((row.sum - row.bound).abs() < 1e-12);
        }
    }

    #[test]
    fn ball_counts() {
        let sys = flat(5, Variant::Gasket);
        let rho = sys.max_diam_at(5);
        let far = disjoint_ball_intersection_count(&sys, 5, &P::new(5.0, 5.0), rho).unwrap();
        assert_eq!(far.count, 0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut worst = 0;
        for _ in 0..200 {
            let (a, b): (f64, f64) = (rng.gen(), rng.gen());
            let (a, b) = if a + b > 1.0 { (1.0 - a, 1.0 - b) } else { (a, b) };
            let x = P::new(a + 0.5 * b, b * 3f64.sqrt() / 2.0);
            let r = disjoint_ball_intersection_count(&sys, 5, &x, rho).unwrap();
            assert!(r.within_bound, "{r:?}");
            worst = worst.max(r.count);
        }
        assert!(worst <= 6, "{worst}");
    }
}
