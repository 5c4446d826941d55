//! Geodesic midpoint subdivision, the triangle system `{Δ_I}`, the maps `f_I`
//! and numerical certification of the almost-similarity conditions.
//!
//! Digit `i ∈ {1, 2, 3}` names the corner child containing vertex `pᵢ` of its
//! parent. The optional full variant adds digit 4 for the center triangle.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::surface::{GeodesicSegment, SurfaceKind, SurfaceModel, SurfacePoint};
use crate::triangle::{is_delta_nondegenerate, next, prev, GeodesicTriangleRegion};

/// Deviations at or below this level are treated as round-off.
pub const NOISE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiIndex {
    digits: Vec<u8>,
}

impl MultiIndex {
    pub fn new(digits: Vec<u8>) -> Result<Self> {
        if digits.iter().any(|&d| d == 0 || d > 4) {
            return Err(Error::Invalid(format!("digits {digits:?} outside 1..=4")));
        }
        Ok(MultiIndex { digits })
    }

    pub fn root() -> Self {
        MultiIndex { digits: Vec::new() }
    }

    pub fn digits(&self) -> &[u8] {
        &self.digits
    }

    pub fn len(&self) -> usize {
        self.digits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digits.is_empty()
    }

    /// `I₋`, the index with the last digit removed.
    pub fn parent(&self) -> Option<MultiIndex> {
        if self.digits.is_empty() {
            None
        } else {
            Some(MultiIndex {
                digits: self.digits[..self.digits.len() - 1].to_vec(),
            })
        }
    }

    pub fn last(&self) -> Option<u8> {
        self.digits.last().copied()
    }

    pub fn child(&self, d: u8) -> MultiIndex {
        let mut digits = self.digits.clone();
        digits.push(d);
        MultiIndex { digits }
    }

    pub fn concat(&self, other: &MultiIndex) -> MultiIndex {
        let mut digits = self.digits.clone();
        digits.extend_from_slice(&other.digits);
        MultiIndex { digits }
    }

    /// Position among the indices of the same length, lexicographic order.
    pub fn level_index(&self, branching: usize) -> usize {
        self.digits
            .iter()
            .fold(0, |acc, &d| acc * branching + (d as usize - 1))
    }

    pub fn from_level_index(depth: usize, mut idx: usize, branching: usize) -> Self {
        let mut digits = vec![0u8; depth];
        for slot in digits.iter_mut().rev() {
            *slot = (idx % branching) as u8 + 1;
            idx /= branching;
        }
        MultiIndex { digits }
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.digits.is_empty() {
            return write!(f, "∅");
        }
        for d in &self.digits {
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl Serialize for MultiIndex {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for MultiIndex {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for MultiIndex {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "∅" || s.is_empty() {
            return Ok(MultiIndex::root());
        }
        let digits = s
            .chars()
            .map(|c| {
                c.to_digit(10)
                    .map(|d| d as u8)
                    .ok_or_else(|| Error::Invalid(format!("bad digit '{c}' in multi-index")))
            })
            .collect::<Result<Vec<u8>>>()?;
        MultiIndex::new(digits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Keep the three corner triangles.
    Gasket,
    /// Keep all four triangles, center last.
    Full,
}

impl Variant {
    pub fn branching(self) -> usize {
        match self {
            Variant::Gasket => 3,
            Variant::Full => 4,
        }
    }
}

/// Stored cell: vertex coordinates and side lengths (`sides[i]` opposite
/// `vertices[i]`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell<T> {
    pub vertices: [SurfacePoint<T>; 3],
    pub sides: [T; 3],
}

impl<T: Real> Cell<T> {
    pub fn diam(&self) -> T {
        self.sides[0].max(self.sides[1]).max(self.sides[2])
    }

    fn of(tri: &GeodesicTriangleRegion<T>) -> Self {
        Cell {
            vertices: tri.vertices,
            sides: tri.side_lengths(),
        }
    }
}

/// Result of one midpoint subdivision.
#[derive(Debug, Clone)]
pub struct Subdivision<T> {
    /// `corners[i]` contains vertex `i` of the parent.
    pub corners: [GeodesicTriangleRegion<T>; 3],
    pub center: GeodesicTriangleRegion<T>,
}

/// Joins the side midpoints by minimal geodesics.
pub fn subdivide<T: Real>(surface: &SurfaceModel<T>, tri: &GeodesicTriangleRegion<T>) -> Result<Subdivision<T>> {
    // halves[i] = (first, second) half of side i, which runs p_{i+1} → p_{i+2}
    let mut halves = Vec::with_capacity(3);
    for side in &tri.sides {
        halves.push(side.halves(surface)?);
    }
    let mid = [halves[0].0.end, halves[1].0.end, halves[2].0.end];
    // midline[i] joins m_{i+1} → m_{i+2}; it is side i of the center triangle
    let mut midline = Vec::with_capacity(3);
    for i in 0..3 {
        midline.push(surface.geodesic_between(&mid[next(i)], &mid[prev(i)])?);
    }
    let corner = |i: usize| {
        let (j, k) = (next(i), prev(i));
        let mut v = tri.vertices;
        v[j] = mid[k];
        v[k] = mid[j];
        let mut s: [GeodesicSegment<T>; 3] = [midline[0]; 3];
        // side i: v_j → v_k = m_k → m_j, the reverse of midline i
        s[i] = midline[i].reversed();
        // side j: v_k → v_i = m_j → p_i, second half of parent side j
        s[j] = halves[j].1;
        // side k: v_i → v_j = p_i → m_k, first half of parent side k
        s[k] = halves[k].0;
        GeodesicTriangleRegion::from_parts(v, s)
    };
    Ok(Subdivision {
        corners: [corner(0), corner(1), corner(2)],
        center: GeodesicTriangleRegion::from_parts(mid, [midline[0], midline[1], midline[2]]),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct BuildOptions<T> {
    pub variant: Variant,
    /// Base non-degeneracy parameter; cells must then be `δ/2`-non-degenerate.
    pub delta: Option<T>,
}

impl<T: Real> Default for BuildOptions<T> {
    fn default() -> Self {
        BuildOptions {
            variant: Variant::Gasket,
            delta: None,
        }
    }
}

/// The cells `Δ_I` for `|I| ≤ depth` with their ratio data.
#[derive(Debug, Clone)]
pub struct TriangleSystem<T> {
    pub surface: SurfaceModel<T>,
    pub base: GeodesicTriangleRegion<T>,
    /// `levels[n][I.level_index()]` is `Δ_I` for `|I| = n`; `levels[0]` is the base.
    pub levels: Vec<Vec<Cell<T>>>,
    pub variant: Variant,
    pub nu: T,
    pub ratios: Vec<T>,
    pub gauge_c: T,
    pub delta: Option<T>,
}

/// Contraction bound: `1/2` on the flat model, `(1 + r²)/2` otherwise.
pub fn contraction_nu<T: Real>(kind: SurfaceKind, r: T) -> T {
    let half = T::lit(0.5);
    if kind.is_flat() {
        half
    } else {
        half * (T::one() + r * r)
    }
}

/// `L(r) = exp(2r² / (1 − ν²))`; 1 on the flat model.
pub fn quotient_bound<T: Real>(kind: SurfaceKind, r: T) -> T {
    if kind.is_flat() {
        return T::one();
    }
    let nu = contraction_nu(kind, r);
    (T::lit(2.0) * r * r / (T::one() - nu * nu)).exp()
}

/// Builds every cell down to `depth`.
pub fn build_system<T: Real>(
    surface: &SurfaceModel<T>,
    base: GeodesicTriangleRegion<T>,
    depth: usize,
    opts: BuildOptions<T>,
) -> Result<TriangleSystem<T>> {
    if depth == 0 {
        return Err(Error::domain("depth must be at least 1"));
    }
    let b = opts.variant.branching();
    let total = (0..=depth as u32).try_fold(0usize, |acc, n| b.checked_pow(n).and_then(|x| acc.checked_add(x)));
    if total.map_or(true, |t| t > 50_000_000) {
        return Err(Error::domain(format!("{b}^{depth} cells exceed the memory budget")));
    }
    surface.check_convexity_guard(base.diam())?;
    let cell_check = |tri: &GeodesicTriangleRegion<T>, depth: usize, idx: usize| -> Result<()> {
        if let Some(delta) = opts.delta {
            let d = if depth == 0 { delta } else { delta * T::lit(0.5) };
            let rep = is_delta_nondegenerate(tri.side_lengths(), d)
                .map_err(|e| Error::Rejected {
                    cell: MultiIndex::from_level_index(depth, idx, b).to_string(),
                    reason: e.to_string(),
                })?;
            if !rep.nondegenerate {
                return Err(Error::Rejected {
                    cell: MultiIndex::from_level_index(depth, idx, b).to_string(),
                    reason: format!(
                        "not {d}-non-degenerate (comparison angles {:.6}, {:.6}, {:.6})",
                        rep.angles.alphas[0], rep.angles.alphas[1], rep.angles.alphas[2]
                    ),
                });
            }
        }
        Ok(())
    };
    cell_check(&base, 0, 0)?;

    let mut levels = vec![vec![Cell::of(&base)]];
    let mut frontier = vec![base.clone()];
    for n in 1..=depth {
        let kids: Vec<Vec<GeodesicTriangleRegion<T>>> = frontier
            .par_iter()
            .map(|tri| {
                let sub = subdivide(surface, tri)?;
                let [a, bb, c] = sub.corners;
                Ok(match opts.variant {
                    Variant::Gasket => vec![a, bb, c],
                    Variant::Full => vec![a, bb, c, sub.center],
                })
            })
            .collect::<Result<_>>()?;
        let next_level: Vec<GeodesicTriangleRegion<T>> = kids.into_iter().flatten().collect();
        next_level
            .par_iter()
            .enumerate()
            .try_for_each(|(idx, tri)| cell_check(tri, n, idx))?;
        levels.push(next_level.iter().map(Cell::of).collect());
        frontier = if n < depth { next_level } else { Vec::new() };
    }
    let r = base.diam();
    Ok(TriangleSystem {
        surface: surface.clone(),
        nu: contraction_nu(surface.kind(), r),
        base,
        levels,
        variant: opts.variant,
        ratios: vec![T::lit(0.5); 3],
        gauge_c: T::zero(),
        delta: opts.delta,
    })
}

/// Almost-similarity audit of one map `f_I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityAudit {
    pub index: String,
    pub lambda: f64,
    pub parent_diameter: f64,
    pub pairs: usize,
    pub max_ratio_deviation: f64,
    pub envelope: f64,
    pub pass: bool,
}

/// Side-quotient drift against `L(r)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioProductReport {
    pub r: f64,
    pub nu: f64,
    pub l_bound: f64,
    /// Largest `q` with `q⁻¹ ≤ (a_{I,i}/a_{I,j}) / (a_i/a_j) ≤ q` over all cells.
    pub max_drift: f64,
    pub violations: Vec<String>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlledMoranReport {
    pub pairs: usize,
    /// `None` when the system is too shallow to form any pair.
    pub min_ratio: Option<f64>,
    pub max_ratio: Option<f64>,
    /// `max(max_ratio, 1/min_ratio)`.
    pub measured_d: f64,
    pub supplied_d: f64,
    pub ratio_condition: bool,
    /// Smallest stored level whose largest cell is below `1/D`.
    pub diameter_level: Option<usize>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub cells_checked: usize,
    /// Largest nesting violation in fan parameters (0 when inside).
    pub nesting_excess: f64,
    pub nesting_residual: f64,
    pub nesting_pass: bool,
    /// Largest `|Δ_I| / (ν^{|I|}|Δ|)`.
    pub contraction_ratio: f64,
    /// Largest `|Δ_I| / (ν|Δ_{I₋}|)`.
    pub step_ratio: f64,
    pub contraction_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisjointnessReport {
    pub pairs_checked: usize,
    pub samples: usize,
    pub overlaps: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnomonicReport {
    /// Per depth, largest relative deviation of projected side lengths from
    /// `2^{−n}` times the projected base sides.
    pub similarity_deviation: Vec<f64>,
    pub lipschitz: f64,
    pub sampled_pairs: usize,
    /// Smallest `L²·Area(Δ_I) / Area(π(Δ_I))`; at least 1 when the area bound holds.
    pub min_area_ratio: f64,
    pub area_pass: bool,
}

/// `k`-th element of the van der Corput sequence in `base`.
pub fn radical_inverse(mut k: u64, base: u64) -> f64 {
    let mut inv = 1.0 / base as f64;
    let mut out = 0.0;
    while k > 0 {
        out += (k % base) as f64 * inv;
        k /= base;
        inv /= base as f64;
    }
    out
}

/// Point `k` of the 4D Halton sequence (bases 2, 3, 5, 7).
pub fn halton4(k: u64) -> [f64; 4] {
    [
        radical_inverse(k, 2),
        radical_inverse(k, 3),
        radical_inverse(k, 5),
        radical_inverse(k, 7),
    ]
}

impl<T: Real> TriangleSystem<T> {
    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn branching(&self) -> usize {
        self.variant.branching()
    }

    pub fn diam(&self) -> T {
        self.base.diam()
    }

    pub fn cell(&self, index: &MultiIndex) -> Option<&Cell<T>> {
        let level = self.levels.get(index.len())?;
        if index.digits().iter().any(|&d| d as usize > self.branching()) {
            return None;
        }
        level.get(index.level_index(self.branching()))
    }

    pub fn cells_at(&self, depth: usize) -> &[Cell<T>] {
        &self.levels[depth]
    }

    pub fn max_diam_at(&self, depth: usize) -> T {
        self.levels[depth].iter().fold(T::zero(), |m, c| m.max(c.diam()))
    }

    /// The triangle region of `Δ_I` with its geodesic sides.
    pub fn region(&self, index: &MultiIndex) -> Result<GeodesicTriangleRegion<T>> {
        if index.is_empty() {
            return Ok(self.base.clone());
        }
        let c = self
            .cell(index)
            .ok_or_else(|| Error::Invalid(format!("cell {index} not stored")))?;
        let v = c.vertices;
        let mut sides = Vec::with_capacity(3);
        for i in 0..3 {
            sides.push(self.surface.geodesic_between(&v[next(i)], &v[prev(i)])?);
        }
        Ok(GeodesicTriangleRegion::from_parts(v, [sides[0], sides[1], sides[2]]))
    }

    fn map_digit(index: &MultiIndex) -> Result<usize> {
        match index.last() {
            Some(d @ 1..=3) => Ok(d as usize - 1),
            Some(4) => Err(Error::Invalid("the center cell has no almost-similarity map".into())),
            _ => Err(Error::Invalid("the root has no map".into())),
        }
    }

    /// `f_I(x)`: recovers `(t, s)` with `φ_{I₋}(t, s) = x` at the fixed vertex
    /// and returns `φ_{I₋}(t, s/2)`.
    pub fn apply_f(&self, index: &MultiIndex, x: &SurfacePoint<T>) -> Result<SurfacePoint<T>> {
        let i = Self::map_digit(index)?;
        let parent = self.region(&index.parent().unwrap_or_else(MultiIndex::root))?;
        apply_fan_map(&self.surface, &parent, i, x)
    }

    /// Samples `n` pairs from the 4D Halton sequence starting at `offset`.
    pub fn audit_similarity(&self, index: &MultiIndex, n: usize, offset: u64) -> Result<SimilarityAudit> {
        let i = Self::map_digit(index)?;
        let parent = self.region(&index.parent().unwrap_or_else(MultiIndex::root))?;
        let (dev, pairs) = dilation_deviation(&self.surface, &parent, i, n, offset)?;
        let lambda = 0.5;
        let pd = parent.diam().as_f64();
        let envelope = lambda * self.gauge_c.as_f64() * pd * pd;
        Ok(SimilarityAudit {
            index: index.to_string(),
            lambda,
            parent_diameter: pd,
            pairs,
            max_ratio_deviation: dev,
            envelope,
            pass: dev <= envelope + NOISE_FLOOR,
        })
    }

    /// Sets `c := 1.5 · max dev_I / (λ |Δ_{I₋}|²)` over the maps of the given
    /// indices (deviations are reduced by the noise floor first). Returns `c`.
    pub fn calibrate_gauge(&mut self, indices: &[MultiIndex], n: usize, offset: u64) -> Result<T> {
        let vals: Vec<f64> = indices
            .par_iter()
            .map(|idx| {
                let i = Self::map_digit(idx)?;
                let parent = self.region(&idx.parent().unwrap_or_else(MultiIndex::root))?;
                let (dev, _) = dilation_deviation(&self.surface, &parent, i, n, offset)?;
                let pd = parent.diam().as_f64();
                Ok((dev - NOISE_FLOOR).max(0.0) / (0.5 * pd * pd))
            })
            .collect::<Result<_>>()?;
        let c = 1.5 * vals.into_iter().fold(0.0, f64::max);
        self.gauge_c = T::lit(c);
        Ok(self.gauge_c)
    }

    /// Calibration over every map `f_I` with `1 ≤ |I| ≤ levels` (parents at
    /// depth `0..levels`), corner digits only.
    pub fn calibrate_gauge_levels(&mut self, levels: usize, n: usize, offset: u64) -> Result<T> {
        let idx = self.corner_indices(1, levels.min(self.depth()));
        self.calibrate_gauge(&idx, n, offset)
    }

    /// Corner-digit indices with length in `[lo, hi]`.
    pub fn corner_indices(&self, lo: usize, hi: usize) -> Vec<MultiIndex> {
        let b = self.branching();
        let mut out = Vec::new();
        for n in lo.max(1)..=hi.min(self.depth()) {
            for k in 0..b.pow(n as u32) {
                let m = MultiIndex::from_level_index(n, k, b);
                if m.digits().iter().all(|&d| d <= 3) {
                    out.push(m);
                }
            }
        }
        out
    }

    pub fn audit_many(&self, indices: &[MultiIndex], n: usize, offset: u64) -> Result<Vec<SimilarityAudit>> {
        indices
            .par_iter()
            .map(|i| self.audit_similarity(i, n, offset))
            .collect()
    }

    /// Side-quotient drift of every cell against `L(r)`.
    pub fn check_ratio_products(&self) -> RatioProductReport {
        let a = self.base.side_lengths();
        let kind = self.surface.kind();
        let r = self.diam();
        let l = quotient_bound(kind, r).as_f64();
        let b = self.branching();
        let per_level: Vec<(f64, Vec<String>)> = self
            .levels
            .par_iter()
            .enumerate()
            .skip(1)
            .map(|(n, cells)| {
                let mut worst: f64 = 1.0;
                let mut bad = Vec::new();
                for (k, c) in cells.iter().enumerate() {
                    let mut cell_worst: f64 = 1.0;
                    for i in 0..3 {
                        for j in 0..3 {
                            if i != j {
                                let q = ((c.sides[i] / c.sides[j]) / (a[i] / a[j])).as_f64();
                                cell_worst = cell_worst.max(q.max(1.0 / q));
                            }
                        }
                    }
                    // a value of exactly 1 is allowed on the flat model up to round-off
                    let ok = if kind.is_flat() {
                        cell_worst <= 1.0 + 1e-12
                    } else {
                        cell_worst < l
                    };
                    if !ok {
                        bad.push(MultiIndex::from_level_index(n, k, b).to_string());
                    }
                    worst = worst.max(cell_worst);
                }
                (worst, bad)
            })
            .collect();
        let mut max_drift: f64 = 1.0;
        let mut violations = Vec::new();
        for (w, v) in per_level {
            max_drift = max_drift.max(w);
            violations.extend(v);
        }
        RatioProductReport {
            r: r.as_f64(),
            nu: self.nu.as_f64(),
            l_bound: l,
            max_drift,
            pass: violations.is_empty(),
            violations,
        }
    }

    /// Ratios `|V_IJ| / (|V_I||V_J|)` over `|I|, |J| ≥ 1`, `|I| + |J| ≤ depth`.
    pub fn controlled_moran_check(&self, d: T) -> ControlledMoranReport {
        let b = self.branching();
        let depth = self.depth();
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        let mut pairs = 0usize;
        for total in 2..=depth {
            let (l, h, p) = (1..total)
                .into_par_iter()
                .map(|ni| {
                    let nj = total - ni;
                    let mut l = f64::INFINITY;
                    let mut h: f64 = 0.0;
                    let mut p = 0usize;
                    let bj = b.pow(nj as u32);
                    for ii in 0..b.pow(ni as u32) {
                        let di = self.levels[ni][ii].diam().as_f64();
                        for jj in 0..bj {
                            let dj = self.levels[nj][jj].diam().as_f64();
                            let dij = self.levels[total][ii * bj + jj].diam().as_f64();
                            let q = dij / (di * dj);
                            l = l.min(q);
                            h = h.max(q);
                            p += 1;
                        }
                    }
                    (l, h, p)
                })
                .reduce(
                    || (f64::INFINITY, 0.0, 0),
                    |a, c| (a.0.min(c.0), a.1.max(c.1), a.2 + c.2),
                );
            lo = lo.min(l);
            hi = hi.max(h);
            pairs += p;
        }
        let dd = d.as_f64();
        let (measured, ratio_ok) = if pairs == 0 {
            (1.0, true)
        } else {
            (hi.max(1.0 / lo), lo >= 1.0 / dd && hi <= dd)
        };
        let diameter_level = (1..=depth).find(|&n| self.max_diam_at(n).as_f64() < 1.0 / dd);
        ControlledMoranReport {
            pairs,
            min_ratio: (pairs > 0).then_some(lo),
            max_ratio: (pairs > 0).then_some(hi),
            measured_d: measured,
            supplied_d: dd,
            ratio_condition: ratio_ok,
            diameter_level,
            pass: ratio_ok && (pairs == 0 || diameter_level.is_some()),
        }
    }

    /// Nesting of every listed cell in its parent and the diameter contraction
    /// `|Δ_I| ≤ ν^{|I|}|Δ|`, `|Δ_I| ≤ ν|Δ_{I₋}|`.
    pub fn check_invariants(&self, indices: &[MultiIndex]) -> Result<InvariantReport> {
        let r = self.diam();
        let nu = self.nu;
        let slack = T::one() + T::tol(1e-12);
        let results: Vec<(T, T, T, T)> = indices
            .par_iter()
            .map(|idx| {
                let cell = self
                    .cell(idx)
                    .ok_or_else(|| Error::Invalid(format!("cell {idx} not stored")))?;
                let parent_idx = idx.parent().unwrap_or_else(MultiIndex::root);
                let parent = self.region(&parent_idx)?;
                let mut excess = T::zero();
                let mut resid = T::zero();
                for v in &cell.vertices {
                    let fc = parent.fan_coordinates(&self.surface, 0, v)?;
                    let out = (-fc.s)
                        .max(fc.s - T::one())
                        .max(-fc.t)
                        .max(fc.t - T::one())
                        .max(T::zero());
                    excess = excess.max(out);
                    resid = resid.max(fc.residual / parent.diam());
                }
                let n = idx.len() as i32;
                let contraction = cell.diam() / (nu.powi(n) * r);
                let step = cell.diam() / (nu * parent.diam());
                Ok((excess, resid, contraction, step))
            })
            .collect::<Result<_>>()?;
        let mut rep = InvariantReport {
            cells_checked: results.len(),
            nesting_excess: 0.0,
            nesting_residual: 0.0,
            nesting_pass: true,
            contraction_ratio: 0.0,
            step_ratio: 0.0,
            contraction_pass: true,
        };
        for (e, res, c, s) in results {
            rep.nesting_excess = rep.nesting_excess.max(e.as_f64());
            rep.nesting_residual = rep.nesting_residual.max(res.as_f64());
            rep.contraction_ratio = rep.contraction_ratio.max(c.as_f64());
            rep.step_ratio = rep.step_ratio.max(s.as_f64());
        }
        rep.nesting_pass = rep.nesting_excess <= 1e-7 && rep.nesting_residual <= 1e-7;
        rep.contraction_pass = rep.contraction_ratio <= slack.as_f64() && rep.step_ratio <= slack.as_f64();
        Ok(rep)
    }

    /// Every stored index with `1 ≤ |I| ≤ hi`.
    pub fn all_indices(&self, hi: usize) -> Vec<MultiIndex> {
        let b = self.branching();
        (1..=hi.min(self.depth()))
            .flat_map(|n| (0..b.pow(n as u32)).map(move |k| MultiIndex::from_level_index(n, k, b)))
            .collect()
    }

    /// Interior points of each corner child, tested against the other corner
    /// children of the same parent (parents at depth `< max_depth`).
    ///
    /// A point lies in corner child `j` exactly when its fan parameter `s` at
    /// parent vertex `j` is at most 1/2, so one inversion per point and
    /// sibling suffices.
    pub fn check_sibling_disjointness(&self, max_depth: usize, samples: usize) -> Result<DisjointnessReport> {
        let parents: Vec<MultiIndex> = std::iter::once(MultiIndex::root())
            .chain(self.all_indices(max_depth.min(self.depth()).saturating_sub(1)))
            .collect();
        let counts: Vec<(usize, usize)> = parents
            .par_iter()
            .map(|pi| {
                let parent = self.region(pi)?;
                let mut overlaps = 0;
                let mut tested = 0;
                for i in 0..3 {
                    for k in 0..samples as u64 {
                        let h = halton4(k + 1);
                        // interior of child i: s ∈ (0, 1/2), t ∈ (0, 1), kept off the boundary
                        let s = 0.5 * (0.02 + 0.96 * h[0]);
                        let t = 0.02 + 0.96 * h[1];
                        let x = parent.phi(&self.surface, i, T::lit(t), T::lit(s))?;
                        for j in 0..3 {
                            if j == i {
                                continue;
                            }
                            let fc = parent.fan_coordinates(&self.surface, j, &x)?;
                            tested += 1;
                            let inside = fc.s <= T::lit(0.5)
                                && fc.s >= T::zero()
                                && fc.t >= T::zero()
                                && fc.t <= T::one();
                            if inside {
                                overlaps += 1;
                            }
                        }
                    }
                }
                Ok((tested, overlaps))
            })
            .collect::<Result<_>>()?;
        let samples_total: usize = counts.iter().map(|c| c.0).sum();
        let overlaps: usize = counts.iter().map(|c| c.1).sum();
        Ok(DisjointnessReport {
            pairs_checked: parents.len() * 6,
            samples: samples_total,
            overlaps,
            pass: overlaps == 0,
        })
    }

    /// Central projection to the plane through the base vertices.
    pub fn gnomonic_crosscheck(&self, pairs: usize, seed: u64) -> Result<GnomonicReport> {
        use rand::{Rng, SeedableRng};
        let s = &self.surface;
        if s.kind() != SurfaceKind::SphereUnit {
            return Err(Error::Invalid("gnomonic cross-check needs the unit sphere".into()));
        }
        let a = self.base.side_lengths();
        if !((a[0] + a[1] + a[2]).as_f64() < 2.0 * std::f64::consts::PI) {
            return Err(Error::Rejected {
                cell: "∅".into(),
                reason: "perimeter is not below 2π".into(),
            });
        }
        let embed = |p: &SurfacePoint<T>| -> [f64; 3] { s.sphere_embedding(p).unwrap().map(|x| x.as_f64()) };
        let pv = self.base.vertices.map(|p| embed(&p));
        let n = normalize(cross(sub(pv[1], pv[0]), sub(pv[2], pv[0])));
        let h = dot(n, pv[0]);
        let project = |x: [f64; 3]| scale(x, h / dot(n, x));
        let plane_sides = |v: &[[f64; 3]; 3]| {
            let q = v.map(project);
            [norm(sub(q[1], q[2])), norm(sub(q[2], q[0])), norm(sub(q[0], q[1]))]
        };
        let base_plane = plane_sides(&pv);
        let mut similarity_deviation = Vec::new();
        for depth in 1..=self.depth() {
            let f = 0.5f64.powi(depth as i32);
            let worst = self.levels[depth]
                .par_iter()
                .map(|c| {
                    let ps = plane_sides(&c.vertices.map(|p| embed(&p)));
                    (0..3)
                        .map(|i| (ps[i] / (f * base_plane[i]) - 1.0).abs())
                        .fold(0.0, f64::max)
                })
                .reduce(|| 0.0, f64::max);
            similarity_deviation.push(worst);
        }
        // pairs of random points of the spherical triangle (normalized
        // positive combinations of the vertices)
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut sample = || {
            let w: [f64; 3] = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            let x = [
                w[0] * pv[0][0] + w[1] * pv[1][0] + w[2] * pv[2][0],
                w[0] * pv[0][1] + w[1] * pv[1][1] + w[2] * pv[2][1],
                w[0] * pv[0][2] + w[1] * pv[1][2] + w[2] * pv[2][2],
            ];
            normalize(x)
        };
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        let mut used = 0;
        for _ in 0..pairs {
            let (x, y) = (sample(), sample());
            let d = norm(cross(x, y)).atan2(dot(x, y));
            if d < 1e-9 {
                continue;
            }
            let q = norm(sub(project(x), project(y))) / d;
            lo = lo.min(q);
            hi = hi.max(q);
            used += 1;
        }
        if used == 0 {
            return Err(Error::Sampling("no usable pairs".into()));
        }
        let lipschitz = hi.max(1.0 / lo);
        let mut min_area_ratio = f64::INFINITY;
        for level in &self.levels {
            for c in level {
                let sph = crate::triangle::spherical_comparison_angles(c.sides.map(|x| x.as_f64()))?;
                let area = sph.sum() - std::f64::consts::PI;
                let q = c.vertices.map(|p| project(embed(&p)));
                let planar = 0.5 * norm(cross(sub(q[1], q[0]), sub(q[2], q[0])));
                min_area_ratio = min_area_ratio.min(lipschitz * lipschitz * area / planar);
            }
        }
        Ok(GnomonicReport {
            similarity_deviation,
            lipschitz,
            sampled_pairs: used,
            min_area_ratio,
            area_pass: min_area_ratio >= 1.0,
        })
    }

    /// Sum over `|I| = n` of `|Δ_I|^s`.
    pub fn hausdorff_upper_sum(&self, s: T, n: usize) -> Result<T> {
        if n > self.depth() {
            return Err(Error::domain(format!("depth {n} exceeds the system depth {}", self.depth())));
        }
        Ok(self.levels[n].iter().map(|c| c.diam().powf(s)).sum())
    }
}

/// `φ(t, s/2)` for the `(t, s)` of `x` in the fan at vertex `i`.
pub fn apply_fan_map<T: Real>(
    surface: &SurfaceModel<T>,
    parent: &GeodesicTriangleRegion<T>,
    i: usize,
    x: &SurfacePoint<T>,
) -> Result<SurfacePoint<T>> {
    if *x == parent.vertices[i] {
        return Ok(*x);
    }
    let fc = parent.fan_coordinates(surface, i, x)?;
    let tol = T::tol(1e-7) * parent.diam();
    if fc.residual > tol {
        return Err(Error::Inversion {
            residual: fc.residual.as_f64(),
            tolerance: tol.as_f64(),
        });
    }
    let slack = T::tol(1e-7);
    if fc.s < -slack || fc.s > T::one() + slack || fc.t < -slack || fc.t > T::one() + slack {
        return Err(Error::domain(format!(
            "point outside the parent cell (t = {}, s = {})",
            fc.t, fc.s
        )));
    }
    parent.phi(surface, i, fc.t, fc.s * T::lit(0.5))
}

/// Largest `|d(f x, f y)/d(x, y) − 1/2|` for the fan map at vertex `i` over `n`
/// Halton pairs; returns the deviation and the number of usable pairs.
pub fn dilation_deviation<T: Real>(
    surface: &SurfaceModel<T>,
    parent: &GeodesicTriangleRegion<T>,
    i: usize,
    n: usize,
    offset: u64,
) -> Result<(f64, usize)> {
    // flat metrics are translation invariant: sample in a frame centred on the fixed vertex
    let local;
    let parent = if surface.kind().is_flat() {
        let o = parent.vertices[i];
        let v = parent.vertices.map(|p| SurfacePoint::new(p.u - o.u, p.v - o.v));
        local = GeodesicTriangleRegion::new(surface, v[0], v[1], v[2])?;
        &local
    } else {
        parent
    };
    let diam = parent.diam();
    let min_sep = T::tol(1e-6) * diam;
    let res: Vec<Option<f64>> = (0..n as u64)
        .into_par_iter()
        .map(|k| {
            let h = halton4(offset + k + 1);
            let (t1, s1) = (T::lit(h[0]), T::one() - T::lit(h[1]));
            let (t2, s2) = (T::lit(h[2]), T::one() - T::lit(h[3]));
            let half = T::lit(0.5);
            let x = parent.phi(surface, i, t1, s1)?;
            let y = parent.phi(surface, i, t2, s2)?;
            let d = surface.distance(&x, &y)?;
            if d < min_sep {
                return Ok(None);
            }
            let fx = parent.phi(surface, i, t1, s1 * half)?;
            let fy = parent.phi(surface, i, t2, s2 * half)?;
            let fd = surface.distance(&fx, &fy)?;
            Ok(Some((fd / d - half).abs().as_f64()))
        })
        .collect::<Result<_>>()?;
    let used: Vec<f64> = res.into_iter().flatten().collect();
    if used.is_empty() {
        return Err(Error::Sampling("all sampled pairs were degenerate".into()));
    }
    Ok((used.iter().cloned().fold(0.0, f64::max), used.len()))
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn scale(a: [f64; 3], k: f64) -> [f64; 3] {
    [a[0] * k, a[1] * k, a[2] * k]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    scale(a, 1.0 / norm(a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::SurfacePoint as P;

    fn flat_base() -> (SurfaceModel<f64>, GeodesicTriangleRegion<f64>) {
        let e = SurfaceModel::euclidean();
        let t = GeodesicTriangleRegion::new(&e, P::new(0.0, 0.0), P::new(1.0, 0.0), P::new(0.5, 3f64.sqrt() / 2.0)).unwrap();
        (e, t)
    }

    pub(crate) fn curved_base(s: &SurfaceModel<f64>, r: f64) -> GeodesicTriangleRegion<f64> {
        // roughly equilateral with diameter close to r about (0.1, 0.05)
        let lam = match s.kind() {
            SurfaceKind::SphereUnit => 2.0 / (1.0 + 0.0125),
            SurfaceKind::HyperbolicPoincare => 2.0 / (1.0 - 0.0125),
            _ => 1.0,
        };
        let side = r / lam;
        let c = P::new(0.1, 0.05);
        let rho = side / 3f64.sqrt();
        let v: Vec<_> = (0..3)
            .map(|k| {
                let th = 2.0 * std::f64::consts::PI * k as f64 / 3.0 + 0.2;
                P::new(c.u + rho * th.cos(), c.v + rho * th.sin())
            })
            .collect();
        GeodesicTriangleRegion::new(s, v[0], v[1], v[2]).unwrap()
    }

    #[test]
    fn multi_index_round_trip() {
        let m: MultiIndex = "3121".parse().unwrap();
        assert_eq!(m.len(), 4);
        assert_eq!(m.parent().unwrap().to_string(), "312");
        let k = m.level_index(3);
        assert_eq!(MultiIndex::from_level_index(4, k, 3), m);
        assert_eq!(MultiIndex::root().to_string(), "∅");
        assert!("105".parse::<MultiIndex>().is_err());
    }

    #[test]
    fn euclidean_subdivision_is_exact() {
        let (e, t) = flat_base();
        let sub = subdivide(&e, &t).unwrap();
        let a = t.side_lengths();
        let area = |tri: &GeodesicTriangleRegion<f64>| {
            let [p, q, r] = tri.vertices;
            0.5 * ((q.u - p.u) * (r.v - p.v) - (r.u - p.u) * (q.v - p.v)).abs()
        };
        let mut total = area(&sub.center);
        for (i, c) in sub.corners.iter().enumerate() {
            assert_eq!(c.vertices[i], t.vertices[i]);
            for k in 0..3 {
                assert!((c.side_lengths()[k] - a[k] / 2.0).abs() < 1e-15);
            }
            assert!((c.diam() - t.diam() / 2.0).abs() < 1e-15);
            total += area(c);
        }
        assert!((total - area(&t)).abs() < 1e-10);
        // stored sides run between the right vertices
        for c in sub.corners.iter().chain(std::iter::once(&sub.center)) {
            for i in 0..3 {
                assert!(c.sides[i].start.chart_distance(&c.vertices[next(i)]) < 1e-15);
                assert!(c.sides[i].end.chart_distance(&c.vertices[prev(i)]) < 1e-15);
            }
        }
    }

    #[test]
    fn sphere_midlines_follow_rauch() {
        let s = SurfaceModel::<f64>::sphere_unit();
        let t = curved_base(&s, 0.3);
        let r = t.diam();
        let sub = subdivide(&s, &t).unwrap();
        for (i, c) in sub.corners.iter().enumerate() {
            let q = c.side_lengths()[i] / (t.side_lengths()[i] / 2.0);
            assert!(q > 1.0 - r * r && q < 1.0 + r * r);
        }
    }

    #[test]
    fn flat_build_counts_and_diameters() {
        let (e, t) = flat_base();
        let sys = build_system(&e, t.clone(), 1, BuildOptions::default()).unwrap();
        assert_eq!(sys.cells_at(1).len(), 3);
        let sys = build_system(&e, t.clone(), 6, BuildOptions { variant: Variant::Gasket, delta: Some(0.5) }).unwrap();
        assert_eq!(sys.cells_at(6).len(), 729);
        for c in sys.cells_at(6) {
            assert!((c.diam() / (t.diam() / 64.0) - 1.0).abs() < 1e-12);
        }
        let full = build_system(&e, t, 3, BuildOptions { variant: Variant::Full, delta: None }).unwrap();
        assert_eq!(full.cells_at(3).len(), 64);
    }

    #[test]
    fn build_rejects_degenerate_cells() {
        let e = SurfaceModel::<f64>::euclidean();
        let t = GeodesicTriangleRegion::new(&e, P::new(0.0, 0.0), P::new(1.0, 0.0), P::new(0.5, 0.05)).unwrap();
        match build_system(&e, t, 2, BuildOptions { variant: Variant::Gasket, delta: Some(0.3) }) {
            Err(Error::Rejected { cell, .. }) => assert_eq!(cell, "∅"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn flat_maps_are_homotheties() {
        let (e, t) = flat_base();
        let sys = build_system(&e, t, 2, BuildOptions::default()).unwrap();
        let idx: MultiIndex = "2".parse().unwrap();
        let p2 = sys.base.vertices[1];
        assert_eq!(sys.apply_f(&idx, &p2).unwrap(), p2);
        let x = P::new(0.5, 0.3);
        let y = P::new(0.3, 0.1);
        let fx = sys.apply_f(&idx, &x).unwrap();
        let fy = sys.apply_f(&idx, &y).unwrap();
        assert!((fx.u - (p2.u + 0.5 * (x.u - p2.u))).abs() < 1e-14);
        assert!((fx.chart_distance(&fy) / x.chart_distance(&y) - 0.5).abs() < 1e-14);
        let audit = sys.audit_similarity(&"13".parse().unwrap(), 100, 0).unwrap();
        assert!(audit.max_ratio_deviation < 1e-12 && audit.pass);
        let mut sys = sys;
        assert_eq!(sys.calibrate_gauge_levels(2, 100, 0).unwrap(), 0.0);
        assert!(sys.apply_f(&MultiIndex::root(), &x).is_err());
    }

    #[test]
    fn flat_checks_are_exact() {
        let (e, t) = flat_base();
        let sys = build_system(&e, t, 5, BuildOptions::default()).unwrap();
        let rp = sys.check_ratio_products();
        assert!(rp.pass && (rp.max_drift - 1.0).abs() < 1e-12 && rp.l_bound == 1.0);
        let cm = sys.controlled_moran_check(2.0);
        let (lo, hi) = (cm.min_ratio.unwrap(), cm.max_ratio.unwrap());
        assert!((hi - lo) / lo < 1e-12);
        assert!((lo * sys.diam() - 1.0).abs() < 1e-12);
        let one = build_system(&e, sys.base.clone(), 1, BuildOptions::default()).unwrap();
        let v = one.controlled_moran_check(1.0);
        assert_eq!(v.pairs, 0);
        assert!(v.pass);
        let inv = sys.check_invariants(&sys.all_indices(3)).unwrap();
        assert!(inv.nesting_pass && inv.contraction_pass, "{inv:?}");
        let dj = sys.check_sibling_disjointness(4, 1000).unwrap();
        assert!(dj.pass && dj.samples == 40 * 3 * 1000 * 2);
    }

    #[test]
    fn sphere_system_invariants() {
        let s = SurfaceModel::<f64>::sphere_unit();
        let t = curved_base(&s, 0.3);
        let sys = build_system(&s, t, 4, BuildOptions { variant: Variant::Gasket, delta: Some(0.4) }).unwrap();
        let inv = sys.check_invariants(&sys.all_indices(3)).unwrap();
        assert!(inv.nesting_pass && inv.contraction_pass, "{inv:?}");
        let rp = sys.check_ratio_products();
        assert!(rp.pass, "{rp:?}");
        let cm = sys.controlled_moran_check(4.0 / sys.diam());
        let band = (cm.min_ratio.unwrap() * sys.diam(), cm.max_ratio.unwrap() * sys.diam());
        assert!(band.0 > 0.25 && band.1 < 4.0, "{band:?}");
        let dj = sys.check_sibling_disjointness(2, 40).unwrap();
        assert!(dj.pass);
    }

    #[test]
    fn sphere_audits_pass_after_calibration() {
        let s = SurfaceModel::<f64>::sphere_unit();
        let t = curved_base(&s, 0.3);
        let mut sys = build_system(&s, t, 4, BuildOptions::default()).unwrap();
        let c = sys.calibrate_gauge_levels(2, 100, 0).unwrap();
        assert!(c > 0.0);
        let idx = sys.corner_indices(3, 4).into_iter().step_by(7).collect::<Vec<_>>();
        for a in sys.audit_many(&idx, 100, 0).unwrap() {
            assert!(a.pass, "{a:?}");
        }
        // dilation ratios of f on sampled pairs around 1/2
        let i: MultiIndex = "1".parse().unwrap();
        let a = sys.audit_similarity(&i, 200, 3).unwrap();
        assert!(a.max_ratio_deviation <= 0.5 * c * 0.09 + NOISE_FLOOR);
    }

    #[test]
    fn gnomonic_depth_one_is_exact() {
        let s = SurfaceModel::<f64>::sphere_unit();
        let t = curved_base(&s, 0.3);
        let sys = build_system(&s, t, 3, BuildOptions::default()).unwrap();
        let g = sys.gnomonic_crosscheck(10_000, 1).unwrap();
        assert!(g.similarity_deviation[0] < 1e-9, "{g:?}");
        assert!(g.lipschitz <= 1.05);
        assert!(g.area_pass);
        let (e, ft) = flat_base();
        let flat = build_system(&e, ft, 1, BuildOptions::default()).unwrap();
        assert!(flat.gnomonic_crosscheck(10, 0).is_err());
    }

    #[test]
    fn halton_is_low_discrepancy() {
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(3, 2), 0.75);
        assert!((radical_inverse(1, 3) - 1.0 / 3.0).abs() < 1e-15);
        let mean: f64 = (1..=1000).map(|k| halton4(k)[3]).sum::<f64>() / 1000.0;
        assert!((mean - 0.5).abs() < 0.01);
    }
}
