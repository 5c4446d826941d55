//! Geodesic triangle regions, the fan parametrization `φ(t, s)` and
//! comparison-triangle angles in the plane, the unit sphere and the
//! hyperbolic plane.
//!
//! Indices are 0-based in code. Side `i` is opposite vertex `pᵢ` and is stored
//! from `p_{i+1}` to `p_{i+2}` (indices mod 3). For a fixed vertex `i` with
//! `(j, k) = (i+1, i+2)`, the fan is
//!
//! * `γ_j`: geodesic `pᵢ → p_k`, `γ_k`: geodesic `pᵢ → p_j`,
//! * `σ_s`: geodesic from `γ_j(s)` to `γ_k(s)`, and `φ(t, s) = σ_s(t)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::surface::{jacobi_field, GeodesicSegment, SurfaceKind, SurfaceModel, SurfacePoint, TangentVector};

#[inline]
pub(crate) fn next(i: usize) -> usize {
    (i + 1) % 3
}

#[inline]
pub(crate) fn prev(i: usize) -> usize {
    (i + 2) % 3
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicTriangleRegion<T> {
    pub vertices: [SurfacePoint<T>; 3],
    /// `sides[i]` runs from `vertices[i+1]` to `vertices[i+2]`.
    pub sides: [GeodesicSegment<T>; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparisonSpace {
    Plane,
    Sphere,
    Hyperbolic,
}

/// Angles of a comparison triangle; `alphas[i]` is opposite side `i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComparisonAngles<T> {
    pub space: ComparisonSpace,
    pub alphas: [T; 3],
}

impl<T: Real> ComparisonAngles<T> {
    pub fn sum(&self) -> T {
        self.alphas[0] + self.alphas[1] + self.alphas[2]
    }

    pub fn min(&self) -> T {
        self.alphas[0].min(self.alphas[1]).min(self.alphas[2])
    }

    pub fn max(&self) -> T {
        self.alphas[0].max(self.alphas[1]).max(self.alphas[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NondegeneracyReport<T> {
    pub delta: T,
    pub nondegenerate: bool,
    pub angles: ComparisonAngles<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeQuotientReport<T> {
    pub max_quotient: T,
    pub bound: T,
    pub holds: bool,
}

/// `Δ(i:s)`: the triangle cut off by `σ_s` at vertex `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubtriangleSlice<T> {
    pub vertex_index: usize,
    pub s: T,
    pub region: GeodesicTriangleRegion<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleGap<T> {
    /// Planar comparison angles of `Δ(i:s)` and `Δ(i:t)` at `γ_j(·)`.
    pub alpha: (T, T),
    /// The same at `γ_k(·)`.
    pub beta: (T, T),
}

impl<T: Real> AngleGap<T> {
    pub fn alpha_gap(&self) -> T {
        (self.alpha.0 - self.alpha.1).abs()
    }

    pub fn beta_gap(&self) -> T {
        (self.beta.0 - self.beta.1).abs()
    }

    pub fn max_gap(&self) -> T {
        self.alpha_gap().max(self.beta_gap())
    }
}

/// Fan coordinates of a point with the residual of `φ(t, s)` against it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FanCoordinates<T> {
    pub t: T,
    pub s: T,
    pub residual: T,
}

/// JSON form of a triangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriangleRecord {
    pub surface: SurfaceKind,
    pub vertices: [[f64; 2]; 3],
    pub side_lengths: [f64; 3],
}

fn check_strict_triangle<T: Real>(a: &[T; 3]) -> Result<()> {
    for i in 0..3 {
        if !(a[i] > T::zero() && a[i].is_finite()) {
            return Err(Error::Degenerate(format!("side {} has length {}", i + 1, a[i])));
        }
        if !(a[i] < a[next(i)] + a[prev(i)]) {
            return Err(Error::Degenerate(format!(
                "side lengths ({}, {}, {}) violate the strict triangle inequality",
                a[0], a[1], a[2]
            )));
        }
    }
    Ok(())
}

/// Angles from `sin²(α/2) = g(s−b)·g(s−c) / (g(b)·g(c))` with `g` the identity,
/// `sin` or `sinh`; this half-angle form is accurate for thin and nearly
/// flat triangles alike.
fn half_angle_angles<T: Real>(a: &[T; 3], g: impl Fn(T) -> T) -> [T; 3] {
    let half = T::lit(0.5);
    let s = (a[0] + a[1] + a[2]) * half;
    let mut out = [T::zero(); 3];
    for i in 0..3 {
        let (b, c) = (a[next(i)], a[prev(i)]);
        let q = (g(s - b) * g(s - c) / (g(b) * g(c))).max(T::zero()).min(T::one());
        out[i] = T::lit(2.0) * q.sqrt().asin();
    }
    out
}

pub fn planar_comparison_angles<T: Real>(a: [T; 3]) -> Result<ComparisonAngles<T>> {
    check_strict_triangle(&a)?;
    Ok(ComparisonAngles {
        space: ComparisonSpace::Plane,
        alphas: half_angle_angles(&a, |x| x),
    })
}

pub fn spherical_comparison_angles<T: Real>(a: [T; 3]) -> Result<ComparisonAngles<T>> {
    let pi = T::PI();
    if a.iter().any(|&x| !(x < pi)) || !(a[0] + a[1] + a[2] < pi + pi) {
        return Err(Error::domain(format!(
            "sides ({}, {}, {}) do not fit on the unit sphere",
            a[0], a[1], a[2]
        )));
    }
    check_strict_triangle(&a)?;
    Ok(ComparisonAngles {
        space: ComparisonSpace::Sphere,
        alphas: half_angle_angles(&a, |x| x.sin()),
    })
}

pub fn hyperbolic_comparison_angles<T: Real>(a: [T; 3]) -> Result<ComparisonAngles<T>> {
    check_strict_triangle(&a)?;
    Ok(ComparisonAngles {
        space: ComparisonSpace::Hyperbolic,
        alphas: half_angle_angles(&a, |x| x.sinh()),
    })
}

pub fn comparison_angles<T: Real>(space: ComparisonSpace, a: [T; 3]) -> Result<ComparisonAngles<T>> {
    match space {
        ComparisonSpace::Plane => planar_comparison_angles(a),
        ComparisonSpace::Sphere => spherical_comparison_angles(a),
        ComparisonSpace::Hyperbolic => hyperbolic_comparison_angles(a),
    }
}

/// Whether every planar comparison angle lies in `(δ, π − δ)`.
pub fn is_delta_nondegenerate<T: Real>(a: [T; 3], delta: T) -> Result<NondegeneracyReport<T>> {
    if !(delta > T::zero() && delta < T::FRAC_PI_2()) {
        return Err(Error::domain(format!("delta = {delta} outside (0, π/2)")));
    }
    let angles = planar_comparison_angles(a)?;
    let pi = T::PI();
    let ok = angles.alphas.iter().all(|&x| x > delta && x < pi - delta);
    Ok(NondegeneracyReport {
        delta,
        nondegenerate: ok,
        angles,
    })
}

/// Largest side quotient `a_j / a_i` against `1 / sin δ`.
pub fn edge_quotient_bound<T: Real>(a: [T; 3], delta: T) -> Result<EdgeQuotientReport<T>> {
    let rep = is_delta_nondegenerate(a, delta)?;
    if !rep.nondegenerate {
        return Err(Error::Degenerate(format!(
            "sides ({}, {}, {}) are not {delta}-non-degenerate",
            a[0], a[1], a[2]
        )));
    }
    let hi = a[0].max(a[1]).max(a[2]);
    let lo = a[0].min(a[1]).min(a[2]);
    let max_quotient = hi / lo;
    let bound = T::one() / delta.sin();
    Ok(EdgeQuotientReport {
        max_quotient,
        bound,
        holds: max_quotient <= bound,
    })
}

/// Side-quotient tolerance `ε(δ)`: if a triangle is `δ`-non-degenerate and
/// every quotient `a'_j/a'_i` is within a factor `1 ± ε` of `a_j/a_i`, the
/// perturbed triangle is `δ/2`-non-degenerate.
///
/// Rescale so one side is shared; the other two move by at most
/// `η = −ln(1 − ε)` in log scale. Every partial derivative of `cos α` in log
/// side lengths is bounded by `C′² + C′` with `C′ = e^{2η}/sin δ` an upper bound
/// on side quotients along the path, so `|Δcos α| ≤ η(2C′² + 2C′)`. While the
/// angle stays in `(δ/2, π − δ/2)` this gives `|Δα| ≤ |Δcos α| / sin(δ/2)`,
/// and the largest `ε` keeping that below `δ/2` is found by bisection. The
/// returned value is half of it.
pub fn perturbation_epsilon<T: Real>(delta: T) -> Result<T> {
    if !(delta > T::zero() && delta < T::FRAC_PI_2()) {
        return Err(Error::domain(format!("delta = {delta} outside (0, π/2)")));
    }
    let c = T::one() / delta.sin();
    let two = T::lit(2.0);
    let half_delta = delta / two;
    let shift = |eps: T| {
        let eta = -(T::one() - eps).ln();
        let cp = c * (two * eta).exp();
        eta * (two * cp * cp + two * cp) / half_delta.sin()
    };
    let (mut lo, mut hi) = (T::zero(), T::lit(0.5));
    for _ in 0..200 {
        let mid = (lo + hi) / two;
        if shift(mid) < half_delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo / two)
}

impl<T: Real> GeodesicTriangleRegion<T> {
    /// Joins the vertices by minimal geodesics; checks the convexity guard and
    /// the strict triangle inequality.
    pub fn new(
        surface: &SurfaceModel<T>,
        p1: SurfacePoint<T>,
        p2: SurfacePoint<T>,
        p3: SurfacePoint<T>,
    ) -> Result<Self> {
        let v = [p1, p2, p3];
        let mut sides = Vec::with_capacity(3);
        for i in 0..3 {
            sides.push(surface.geodesic_between(&v[next(i)], &v[prev(i)])?);
        }
        let tri = GeodesicTriangleRegion {
            vertices: v,
            sides: [sides[0], sides[1], sides[2]],
        };
        surface.check_convexity_guard(tri.diam())?;
        check_strict_triangle(&tri.side_lengths())?;
        Ok(tri)
    }

    /// Assembles a triangle from known sides without recomputing geodesics.
    pub fn from_parts(vertices: [SurfacePoint<T>; 3], sides: [GeodesicSegment<T>; 3]) -> Self {
        GeodesicTriangleRegion { vertices, sides }
    }

    pub fn side_lengths(&self) -> [T; 3] {
        [self.sides[0].length, self.sides[1].length, self.sides[2].length]
    }

    /// `|Δ| = max aᵢ` in a convex domain.
    pub fn diam(&self) -> T {
        let a = self.side_lengths();
        a[0].max(a[1]).max(a[2])
    }

    /// Geodesic from `vertices[from]` to `vertices[to]`, `from ≠ to`.
    pub fn edge(&self, from: usize, to: usize) -> GeodesicSegment<T> {
        debug_assert_ne!(from, to);
        let opposite = 3 - from - to;
        if next(opposite) == from {
            self.sides[opposite]
        } else {
            self.sides[opposite].reversed()
        }
    }

    fn fan_point(surface: &SurfaceModel<T>, seg: &GeodesicSegment<T>, s: T) -> Result<SurfacePoint<T>> {
        seg.point_at(surface, s)
    }

    /// `σ_s` for the fan at vertex `i`.
    pub fn sigma(&self, surface: &SurfaceModel<T>, i: usize, s: T) -> Result<GeodesicSegment<T>> {
        let (j, k) = (next(i), prev(i));
        let a = Self::fan_point(surface, &self.edge(i, k), s)?;
        let b = Self::fan_point(surface, &self.edge(i, j), s)?;
        surface.geodesic_between(&a, &b)
    }

    /// `φ(t, s) = σ_s(t)` for the fan at vertex `i`.
    pub fn phi(&self, surface: &SurfaceModel<T>, i: usize, t: T, s: T) -> Result<SurfacePoint<T>> {
        if i > 2 {
            return Err(Error::domain(format!("vertex index {i} out of range")));
        }
        if s == T::zero() {
            return Ok(self.vertices[i]);
        }
        let (j, k) = (next(i), prev(i));
        let a = Self::fan_point(surface, &self.edge(i, k), s)?;
        if t == T::zero() {
            return Ok(a);
        }
        let b = Self::fan_point(surface, &self.edge(i, j), s)?;
        if t == T::one() {
            return Ok(b);
        }
        let w = surface.log_map(&a, &b)?;
        surface.exp_map(&a, &w, t)
    }

    /// `a_i(s) / (s·a_i)`: length of `σ_s` against the scaled opposite side.
    pub fn chord_ratio(&self, surface: &SurfaceModel<T>, i: usize, s: T) -> Result<T> {
        let sig = self.sigma(surface, i, s)?;
        Ok(sig.length / (s * self.sides[i].length))
    }

    /// `Δ(i:s)`; vertex `i` stays, vertex `j` moves to `γ_k(s)` on `pᵢp_j`
    /// and vertex `k` to `γ_j(s)` on `pᵢp_k`.
    pub fn slice(&self, surface: &SurfaceModel<T>, i: usize, s: T) -> Result<SubtriangleSlice<T>> {
        if !(s > T::zero() && s <= T::one()) {
            return Err(Error::domain(format!("slice parameter {s} outside (0, 1]")));
        }
        let (j, k) = (next(i), prev(i));
        let mut v = self.vertices;
        v[j] = Self::fan_point(surface, &self.edge(i, j), s)?;
        v[k] = Self::fan_point(surface, &self.edge(i, k), s)?;
        let region = GeodesicTriangleRegion::new(surface, v[0], v[1], v[2])?;
        Ok(SubtriangleSlice {
            vertex_index: i,
            s,
            region,
        })
    }

    /// Interior angles measured from the tangent vectors of the incident sides.
    pub fn vertex_angles(&self, surface: &SurfaceModel<T>) -> [T; 3] {
        let mut out = [T::zero(); 3];
        for (i, o) in out.iter_mut().enumerate() {
            let a = self.edge(i, next(i)).initial_velocity;
            let b = self.edge(i, prev(i)).initial_velocity;
            *o = surface.angle_between(&self.vertices[i], &a, &b);
        }
        out
    }

    /// Comparison angles of `Δ(i:s)` and `Δ(i:t)` at the two moving vertices.
    pub fn angle_stability(&self, surface: &SurfaceModel<T>, i: usize, s: T, t: T) -> Result<AngleGap<T>> {
        let (j, k) = (next(i), prev(i));
        let angles = |x: T| -> Result<(T, T)> {
            let sl = self.slice(surface, i, x)?;
            let ang = planar_comparison_angles(sl.region.side_lengths())?;
            // vertex k of the slice is γ_j(x), vertex j is γ_k(x)
            Ok((ang.alphas[k], ang.alphas[j]))
        };
        let (a_s, b_s) = angles(s)?;
        let (a_t, b_t) = if s == t { (a_s, b_s) } else { angles(t)? };
        Ok(AngleGap {
            alpha: (a_s, a_t),
            beta: (b_s, b_t),
        })
    }

    /// `|J_u(t)| / |J_s(t)|` for the fan at vertex `i`.
    pub fn jacobi_ratio(&self, surface: &SurfaceModel<T>, i: usize, t: T, s: T, u: T, h: T) -> Result<T> {
        let phi = |tt: T, ss: T| self.phi(surface, i, tt, ss);
        let (_, ns) = jacobi_field(surface, phi, t, s, h)?;
        let (_, nu) = jacobi_field(surface, phi, t, u, h)?;
        Ok(nu / ns)
    }

    /// Solves `φ(t, s) = x` for the fan at vertex `i` by damped fixed-point
    /// iteration, using the affine chart map of the vertices as the
    /// approximate inverse.
    pub fn fan_coordinates(&self, surface: &SurfaceModel<T>, i: usize, x: &SurfacePoint<T>) -> Result<FanCoordinates<T>> {
        let (j, k) = (next(i), prev(i));
        let p = self.vertices[i];
        let ek = self.vertices[k] - p;
        let ej = self.vertices[j] - p;
        let det = ek.du * ej.dv - ek.dv * ej.du;
        if det == T::zero() {
            return Err(Error::Degenerate("collinear chart vertices".into()));
        }
        let affine = |d: TangentVector<T>| {
            (
                (d.du * ej.dv - d.dv * ej.du) / det,
                (ek.du * d.dv - ek.dv * d.du) / det,
            )
        };
        let to_ts = |al: T, be: T| {
            let s = al + be;
            let t = if s == T::zero() { T::zero() } else { be / s };
            (t, s)
        };
        let (mut al, mut be) = affine(*x - p);
        let scale = self.diam().max(T::min_positive_value());
        let target = T::tol(1e-12) * scale;
        let eval = |al: T, be: T| -> Result<SurfacePoint<T>> {
            let (t, s) = to_ts(al, be);
            self.phi(surface, i, t, s)
        };
        let mut y = eval(al, be)?;
        let mut res = surface.norm(x, &(*x - y));
        for _ in 0..100 {
            if res <= target {
                break;
            }
            let (dal, dbe) = affine(*x - y);
            let mut damp = T::one();
            let mut improved = false;
            for _ in 0..20 {
                let (na, nb) = (al + dal * damp, be + dbe * damp);
                if let Ok(ny) = eval(na, nb) {
                    let nr = surface.norm(x, &(*x - ny));
                    if nr < res {
                        al = na;
                        be = nb;
                        y = ny;
                        res = nr;
                        improved = true;
                        break;
                    }
                }
                damp = damp * T::lit(0.5);
            }
            if !improved {
                break;
            }
        }
        let (t, s) = to_ts(al, be);
        Ok(FanCoordinates { t, s, residual: res })
    }

    /// Closed-cell membership via fan coordinates at vertex 0, with slack
    /// `tol` in the parameters.
    pub fn contains(&self, surface: &SurfaceModel<T>, x: &SurfacePoint<T>, tol: T) -> Result<bool> {
        let fc = self.fan_coordinates(surface, 0, x)?;
        let limit = T::tol(1e-7) * self.diam();
        if fc.residual > limit {
            return Err(Error::Inversion {
                residual: fc.residual.as_f64(),
                tolerance: limit.as_f64(),
            });
        }
        Ok(fc.s >= -tol && fc.s <= T::one() + tol && fc.t >= -tol && fc.t <= T::one() + tol)
    }

    pub fn record(&self, kind: SurfaceKind) -> TriangleRecord {
        TriangleRecord {
            surface: kind,
            vertices: self.vertices.map(|p| [p.u.as_f64(), p.v.as_f64()]),
            side_lengths: self.side_lengths().map(|a| a.as_f64()),
        }
    }

    pub fn from_record(surface: &SurfaceModel<T>, rec: &TriangleRecord) -> Result<Self> {
        if rec.surface != surface.kind() {
            return Err(Error::Invalid(format!(
                "triangle recorded on {:?}, surface is {:?}",
                rec.surface,
                surface.kind()
            )));
        }
        let v = rec.vertices.map(|[u, v]| SurfacePoint::new(T::lit(u), T::lit(v)));
        Self::new(surface, v[0], v[1], v[2])
    }
}
