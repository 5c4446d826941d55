//! Riemannian surface charts and their geodesic oracles.
//!
//! Every geodesic quantity used elsewhere in the crate (distances, midpoints,
//! exponential and logarithm maps) comes from a [`SurfaceModel`]. The built-in
//! curved models are conformal charts `λ(u,v)² (du² + dv²)`:
//!
//! * `sphere_unit`: stereographic projection from the south pole, so the north
//!   pole sits at the chart origin and the equator is the unit circle;
//! * `hyperbolic_poincare`: the Poincaré disk.
//!
//! Geodesics are integrated with an adaptive Dormand–Prince scheme; the log map
//! is obtained by Newton shooting with finite-difference Jacobians.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::ode::{self, Tolerance};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SurfacePoint<T> {
    pub u: T,
    pub v: T,
}

impl<T: Real> SurfacePoint<T> {
    pub fn new(u: T, v: T) -> Self {
        SurfacePoint { u, v }
    }

    /// Euclidean distance between chart coordinates.
    pub fn chart_distance(&self, other: &Self) -> T {
        (self.u - other.u).hypot(self.v - other.v)
    }

    pub fn lerp(&self, other: &Self, t: T) -> Self {
        SurfacePoint::new(
            self.u + (other.u - self.u) * t,
            self.v + (other.v - self.v) * t,
        )
    }

    pub fn cast<S: Real>(&self) -> SurfacePoint<S> {
        SurfacePoint::new(S::lit(self.u.as_f64()), S::lit(self.v.as_f64()))
    }
}

impl<T: Real> Sub for SurfacePoint<T> {
    type Output = TangentVector<T>;
    fn sub(self, rhs: Self) -> TangentVector<T> {
        TangentVector::new(self.u - rhs.u, self.v - rhs.v)
    }
}

impl<T: Real> Add<TangentVector<T>> for SurfacePoint<T> {
    type Output = SurfacePoint<T>;
    fn add(self, rhs: TangentVector<T>) -> SurfacePoint<T> {
        SurfacePoint::new(self.u + rhs.du, self.v + rhs.dv)
    }
}

/// Tangent vector in chart components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TangentVector<T> {
    pub du: T,
    pub dv: T,
}

impl<T: Real> TangentVector<T> {
    pub fn new(du: T, dv: T) -> Self {
        TangentVector { du, dv }
    }

    pub fn zero() -> Self {
        TangentVector::new(T::zero(), T::zero())
    }

    /// Euclidean norm of the chart components.
    pub fn chart_norm(&self) -> T {
        self.du.hypot(self.dv)
    }
}

impl<T: Real> Add for TangentVector<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        TangentVector::new(self.du + rhs.du, self.dv + rhs.dv)
    }
}

impl<T: Real> Sub for TangentVector<T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        TangentVector::new(self.du - rhs.du, self.dv - rhs.dv)
    }
}

impl<T: Real> Mul<T> for TangentVector<T> {
    type Output = Self;
    fn mul(self, k: T) -> Self {
        TangentVector::new(self.du * k, self.dv * k)
    }
}

impl<T: Real> Neg for TangentVector<T> {
    type Output = Self;
    fn neg(self) -> Self {
        TangentVector::new(-self.du, -self.dv)
    }
}

/// Open rectangle of admissible chart coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChartRect<T> {
    pub u_min: T,
    pub u_max: T,
    pub v_min: T,
    pub v_max: T,
}

impl<T: Real> ChartRect<T> {
    pub fn square(half: T) -> Self {
        ChartRect {
            u_min: -half,
            u_max: half,
            v_min: -half,
            v_max: half,
        }
    }

    pub fn contains(&self, p: &SurfacePoint<T>) -> bool {
        p.u > self.u_min && p.u < self.u_max && p.v > self.v_min && p.v < self.v_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceKind {
    Euclidean,
    SphereUnit,
    HyperbolicPoincare,
    Custom,
}

impl SurfaceKind {
    pub fn is_flat(self) -> bool {
        matches!(self, SurfaceKind::Euclidean)
    }
}

/// Metric components given as expression strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    #[serde(rename = "E")]
    pub e: String,
    #[serde(rename = "F")]
    pub f: String,
    #[serde(rename = "G")]
    pub g: String,
}

/// Serializable description of a surface, as found in scene and system files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceSpec {
    pub kind: SurfaceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chart: Option<ChartRect<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<MetricSpec>,
}

impl SurfaceSpec {
    pub fn builtin(kind: SurfaceKind) -> Self {
        SurfaceSpec {
            kind,
            chart: None,
            metric: None,
        }
    }
}

#[derive(Debug, Clone)]
enum Metric {
    Flat,
    /// `λ = 2 / (1 + κ ρ²)`; κ = +1 sphere, κ = −1 Poincaré disk.
    Conformal { kappa: f64 },
    Custom { e: Expr, f: Expr, g: Expr },
}

/// Numerical settings of the geodesic oracle.
#[derive(Debug, Clone, Copy)]
pub struct GeodesicSettings<T> {
    pub atol: T,
    pub rtol: T,
    /// Target chart-distance residual for shooting.
    pub shoot_tol: T,
    pub max_shoot_iterations: usize,
    /// Central-difference step for custom Christoffel symbols.
    pub fd_step: T,
    /// Largest admissible triangle diameter on curved models.
    pub convexity_guard: T,
}

impl<T: Real> Default for GeodesicSettings<T> {
    fn default() -> Self {
        GeodesicSettings {
            atol: T::tol(1e-11),
            rtol: T::tol(1e-10),
            shoot_tol: T::tol(1e-9),
            max_shoot_iterations: 60,
            fd_step: T::tol(1e-6).max(T::epsilon().cbrt()),
            convexity_guard: T::lit(0.4),
        }
    }
}

/// A 2D chart with a Riemannian metric and a geodesic oracle.
#[derive(Debug, Clone)]
pub struct SurfaceModel<T> {
    kind: SurfaceKind,
    chart: ChartRect<T>,
    metric: Metric,
    spec: SurfaceSpec,
    pub settings: GeodesicSettings<T>,
}

/// A minimal geodesic parametrized on [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeodesicSegment<T> {
    pub start: SurfacePoint<T>,
    pub end: SurfacePoint<T>,
    pub initial_velocity: TangentVector<T>,
    pub final_velocity: TangentVector<T>,
    pub length: T,
}

impl<T: Real> GeodesicSegment<T> {
    pub fn is_degenerate(&self) -> bool {
        self.length == T::zero()
    }

    pub fn reversed(&self) -> Self {
        GeodesicSegment {
            start: self.end,
            end: self.start,
            initial_velocity: -self.final_velocity,
            final_velocity: -self.initial_velocity,
            length: self.length,
        }
    }

    /// Point at affine parameter `t`.
    pub fn point_at(&self, surface: &SurfaceModel<T>, t: T) -> Result<SurfacePoint<T>> {
        if t == T::zero() {
            return Ok(self.start);
        }
        if t == T::one() {
            return Ok(self.end);
        }
        surface.exp_map(&self.start, &self.initial_velocity, t)
    }

    /// Splits at parameter 1/2; both halves are reparametrized on [0, 1].
    pub fn halves(&self, surface: &SurfaceModel<T>) -> Result<(Self, Self)> {
        let half = T::lit(0.5);
        let (mid, vel) = surface.exp_state(&self.start, &self.initial_velocity, half)?;
        let first = GeodesicSegment {
            start: self.start,
            end: mid,
            initial_velocity: self.initial_velocity * half,
            final_velocity: vel * half,
            length: self.length * half,
        };
        let second = GeodesicSegment {
            start: mid,
            end: self.end,
            initial_velocity: vel * half,
            final_velocity: self.final_velocity * half,
            length: self.length * half,
        };
        Ok((first, second))
    }

    /// Largest relative deviation of the metric speed from the segment length
    /// over `samples + 1` equally spaced parameters.
    pub fn speed_variation(&self, surface: &SurfaceModel<T>, samples: usize) -> Result<T> {
        if self.is_degenerate() {
            return Ok(T::zero());
        }
        let mut worst = T::zero();
        for k in 0..=samples {
            let t = T::of_usize(k) / T::of_usize(samples.max(1));
            let (p, w) = surface.exp_state(&self.start, &self.initial_velocity, t)?;
            let speed = surface.norm(&p, &w);
            worst = worst.max((speed - self.length).abs() / self.length);
        }
        Ok(worst)
    }
}

impl<T: Real> SurfaceModel<T> {
    pub fn euclidean() -> Self {
        Self::builtin(SurfaceKind::Euclidean)
    }

    pub fn sphere_unit() -> Self {
        Self::builtin(SurfaceKind::SphereUnit)
    }

    pub fn hyperbolic_poincare() -> Self {
        Self::builtin(SurfaceKind::HyperbolicPoincare)
    }

    fn builtin(kind: SurfaceKind) -> Self {
        let (chart, metric) = match kind {
            SurfaceKind::Euclidean => (ChartRect::square(T::lit(1e3)), Metric::Flat),
            SurfaceKind::SphereUnit => (
                ChartRect::square(T::lit(2.5)),
                Metric::Conformal { kappa: 1.0 },
            ),
            SurfaceKind::HyperbolicPoincare => (
                ChartRect::square(T::lit(0.7)),
                Metric::Conformal { kappa: -1.0 },
            ),
            SurfaceKind::Custom => unreachable!("custom surfaces need a metric"),
        };
        SurfaceModel {
            kind,
            chart,
            metric,
            spec: SurfaceSpec::builtin(kind),
            settings: GeodesicSettings::default(),
        }
    }

    /// Builds a custom surface from metric expressions. The metric must be
    /// positive definite and satisfy |K| ≤ 1 on a sample grid of the chart.
    pub fn custom(chart: ChartRect<f64>, metric: &MetricSpec) -> Result<Self> {
        let parse = |name: &str, src: &str| {
            Expr::parse(src).map_err(|e| match e {
                Error::Parse {
                    line,
                    column,
                    message,
                } => Error::Parse {
                    line,
                    column,
                    message: format!("metric component {name}: {message}"),
                },
                other => other,
            })
        };
        if !(chart.u_min < chart.u_max && chart.v_min < chart.v_max) {
            return Err(Error::domain("chart rectangle is empty"));
        }
        let surface = SurfaceModel {
            kind: SurfaceKind::Custom,
            chart: ChartRect {
                u_min: T::lit(chart.u_min),
                u_max: T::lit(chart.u_max),
                v_min: T::lit(chart.v_min),
                v_max: T::lit(chart.v_max),
            },
            metric: Metric::Custom {
                e: parse("E", &metric.e)?,
                f: parse("F", &metric.f)?,
                g: parse("G", &metric.g)?,
            },
            spec: SurfaceSpec {
                kind: SurfaceKind::Custom,
                chart: Some(chart),
                metric: Some(metric.clone()),
            },
            settings: GeodesicSettings::default(),
        };
        surface.validate(24)?;
        Ok(surface)
    }

    pub fn from_spec(spec: &SurfaceSpec) -> Result<Self> {
        match spec.kind {
            SurfaceKind::Custom => {
                let chart = spec
                    .chart
                    .ok_or_else(|| Error::Invalid("custom surface needs a chart".into()))?;
                let metric = spec
                    .metric
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("custom surface needs a metric".into()))?;
                Self::custom(chart, metric)
            }
            kind => {
                if spec.metric.is_some() {
                    return Err(Error::Invalid(
                        "metric expressions are only allowed for custom surfaces".into(),
                    ));
                }
                let mut s = Self::builtin(kind);
                if let Some(c) = spec.chart {
                    s.chart = ChartRect {
                        u_min: T::lit(c.u_min),
                        u_max: T::lit(c.u_max),
                        v_min: T::lit(c.v_min),
                        v_max: T::lit(c.v_max),
                    };
                    s.spec.chart = Some(c);
                }
                Ok(s)
            }
        }
    }

    pub fn kind(&self) -> SurfaceKind {
        self.kind
    }

    pub fn chart(&self) -> &ChartRect<T> {
        &self.chart
    }

    pub fn spec(&self) -> &SurfaceSpec {
        &self.spec
    }

    pub fn contains(&self, p: &SurfacePoint<T>) -> bool {
        self.chart.contains(p)
    }

    /// First fundamental form (E, F, G) at `p`.
    pub fn metric(&self, p: &SurfacePoint<T>) -> (T, T, T) {
        match &self.metric {
            Metric::Flat => (T::one(), T::zero(), T::one()),
            Metric::Conformal { kappa } => {
                let rho2 = p.u * p.u + p.v * p.v;
                let lam = T::lit(2.0) / (T::one() + T::lit(*kappa) * rho2);
                (lam * lam, T::zero(), lam * lam)
            }
            Metric::Custom { e, f, g } => (e.eval(p.u, p.v), f.eval(p.u, p.v), g.eval(p.u, p.v)),
        }
    }

    pub fn inner(&self, p: &SurfacePoint<T>, a: &TangentVector<T>, b: &TangentVector<T>) -> T {
        let (e, f, g) = self.metric(p);
        e * a.du * b.du + f * (a.du * b.dv + a.dv * b.du) + g * a.dv * b.dv
    }

    pub fn norm(&self, p: &SurfacePoint<T>, w: &TangentVector<T>) -> T {
        self.inner(p, w, w).max(T::zero()).sqrt()
    }

    /// Angle between two tangent vectors at `p`, in the surface metric.
    pub fn angle_between(
        &self,
        p: &SurfacePoint<T>,
        a: &TangentVector<T>,
        b: &TangentVector<T>,
    ) -> T {
        let c = self.inner(p, a, b) / (self.norm(p, a) * self.norm(p, b));
        c.max(-T::one()).min(T::one()).acos()
    }

    fn metric_partials(&self, p: &SurfacePoint<T>) -> [[T; 3]; 2] {
        let h = self.settings.fd_step;
        let two_h = h + h;
        let pu = self.metric(&SurfacePoint::new(p.u + h, p.v));
        let mu = self.metric(&SurfacePoint::new(p.u - h, p.v));
        let pv = self.metric(&SurfacePoint::new(p.u, p.v + h));
        let mv = self.metric(&SurfacePoint::new(p.u, p.v - h));
        [
            [(pu.0 - mu.0) / two_h, (pu.1 - mu.1) / two_h, (pu.2 - mu.2) / two_h],
            [(pv.0 - mv.0) / two_h, (pv.1 - mv.1) / two_h, (pv.2 - mv.2) / two_h],
        ]
    }

    /// Christoffel symbols `[[Γᵘ_uu, Γᵘ_uv, Γᵘ_vv], [Γᵛ_uu, Γᵛ_uv, Γᵛ_vv]]`.
    pub fn christoffel(&self, p: &SurfacePoint<T>) -> [[T; 3]; 2] {
        match &self.metric {
            Metric::Flat => [[T::zero(); 3]; 2],
            Metric::Conformal { kappa } => {
                let k = T::lit(*kappa);
                let denom = T::one() + k * (p.u * p.u + p.v * p.v);
                let su = -T::lit(2.0) * k * p.u / denom;
                let sv = -T::lit(2.0) * k * p.v / denom;
                [[su, sv, -su], [-sv, su, sv]]
            }
            Metric::Custom { .. } => {
                let (e, f, g) = self.metric(p);
                let [[eu, fu, gu], [ev, fv, gv]] = self.metric_partials(p);
                let two = T::lit(2.0);
                let d = two * (e * g - f * f);
                [
                    [
                        (g * eu - two * f * fu + f * ev) / d,
                        (g * ev - f * gu) / d,
                        (two * g * fv - g * gu - f * gv) / d,
                    ],
                    [
                        (two * e * fu - e * ev - f * eu) / d,
                        (e * gu - f * ev) / d,
                        (e * gv - two * f * fv + f * gu) / d,
                    ],
                ]
            }
        }
    }

    /// Gaussian curvature at `p` (Brioschi formula with finite differences for
    /// custom metrics).
    pub fn curvature(&self, p: &SurfacePoint<T>) -> T {
        match &self.metric {
            Metric::Flat => T::zero(),
            Metric::Conformal { kappa } => T::lit(*kappa),
            Metric::Custom { .. } => {
                let h = T::tol(1e-4).max(T::epsilon().powf(T::lit(0.25)));
                let two = T::lit(2.0);
                let m = |du: T, dv: T| self.metric(&SurfacePoint::new(p.u + du, p.v + dv));
                let (e, f, g) = m(T::zero(), T::zero());
                let (eu_p, fu_p, gu_p) = m(h, T::zero());
                let (eu_m, fu_m, gu_m) = m(-h, T::zero());
                let (ev_p, fv_p, gv_p) = m(T::zero(), h);
                let (ev_m, fv_m, gv_m) = m(T::zero(), -h);
                let eu = (eu_p - eu_m) / (two * h);
                let ev = (ev_p - ev_m) / (two * h);
                let fu = (fu_p - fu_m) / (two * h);
                let fv = (fv_p - fv_m) / (two * h);
                let gu = (gu_p - gu_m) / (two * h);
                let gv = (gv_p - gv_m) / (two * h);
                let evv = (ev_p - two * e + ev_m) / (h * h);
                let guu = (gu_p - two * g + gu_m) / (h * h);
                let fuv = {
                    let a = m(h, h).1;
                    let b = m(h, -h).1;
                    let c = m(-h, h).1;
                    let d = m(-h, -h).1;
                    (a - b - c + d) / (T::lit(4.0) * h * h)
                };
                let det3 = |a: [[T; 3]; 3]| {
                    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
                        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
                };
                let half = T::lit(0.5);
                let m1 = [
                    [-half * evv + fuv - half * guu, half * eu, fu - half * ev],
                    [fv - half * gu, e, f],
                    [half * gv, f, g],
                ];
                let m2 = [
                    [T::zero(), half * ev, half * gu],
                    [half * ev, e, f],
                    [half * gu, f, g],
                ];
                let w = e * g - f * f;
                (det3(m1) - det3(m2)) / (w * w)
            }
        }
    }

    /// Checks positive definiteness and |K| ≤ 1 on an `n × n` interior grid.
    /// Returns the largest |K| seen.
    pub fn validate(&self, n: usize) -> Result<T> {
        let mut worst = T::zero();
        let n = n.max(2);
        for i in 0..n {
            for j in 0..n {
                let fu = (T::of_usize(i) + T::lit(0.5)) / T::of_usize(n);
                let fv = (T::of_usize(j) + T::lit(0.5)) / T::of_usize(n);
                let p = SurfacePoint::new(
                    self.chart.u_min + (self.chart.u_max - self.chart.u_min) * fu,
                    self.chart.v_min + (self.chart.v_max - self.chart.v_min) * fv,
                );
                let (e, f, g) = self.metric(&p);
                if !(e > T::zero() && e * g - f * f > T::zero()) {
                    return Err(Error::domain(format!(
                        "metric not positive definite at ({}, {})",
                        p.u, p.v
                    )));
                }
                let k = self.curvature(&p).abs();
                if !k.is_finite() || k > T::one() + T::tol(1e-6) {
                    return Err(Error::domain(format!(
                        "|K| = {k} exceeds 1 at ({}, {})",
                        p.u, p.v
                    )));
                }
                worst = worst.max(k);
            }
        }
        Ok(worst)
    }

    /// Rejects triangle diameters beyond the convexity guard on curved models.
    pub fn check_convexity_guard(&self, diameter: T) -> Result<()> {
        if !self.kind.is_flat() && diameter > self.settings.convexity_guard {
            return Err(Error::domain(format!(
                "diameter {diameter} exceeds the convexity guard {}",
                self.settings.convexity_guard
            )));
        }
        Ok(())
    }

    fn ensure_inside(&self, p: &SurfacePoint<T>) -> Result<()> {
        if self.contains(p) {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "point ({}, {}) outside the chart domain",
                p.u, p.v
            )))
        }
    }

    /// Position and velocity of the geodesic `γ(0) = p, γ'(0) = w` at `t ≥ 0`.
    pub fn exp_state(
        &self,
        p: &SurfacePoint<T>,
        w: &TangentVector<T>,
        t: T,
    ) -> Result<(SurfacePoint<T>, TangentVector<T>)> {
        self.ensure_inside(p)?;
        if t < T::zero() {
            let (q, vel) = self.exp_state(p, &-*w, -t)?;
            return Ok((q, -vel));
        }
        if t == T::zero() {
            return Ok((*p, *w));
        }
        if let Metric::Flat = self.metric {
            let q = *p + *w * t;
            if !self.contains(&q) {
                return Err(Error::Escape { param: t.as_f64() });
            }
            return Ok((q, *w));
        }
        let tol = Tolerance {
            atol: self.settings.atol,
            rtol: self.settings.rtol,
        };
        let chart = self.chart;
        let y = ode::integrate(
            [p.u, p.v, w.du, w.dv],
            t,
            tol,
            |y| {
                let g = self.christoffel(&SurfacePoint::new(y[0], y[1]));
                let (a, b) = (y[2], y[3]);
                let two = T::lit(2.0);
                [
                    a,
                    b,
                    -(g[0][0] * a * a + two * g[0][1] * a * b + g[0][2] * b * b),
                    -(g[1][0] * a * a + two * g[1][1] * a * b + g[1][2] * b * b),
                ]
            },
            |y| chart.contains(&SurfacePoint::new(y[0], y[1])),
        )?;
        Ok((SurfacePoint::new(y[0], y[1]), TangentVector::new(y[2], y[3])))
    }

    pub fn exp_map(&self, p: &SurfacePoint<T>, w: &TangentVector<T>, t: T) -> Result<SurfacePoint<T>> {
        Ok(self.exp_state(p, w, t)?.0)
    }

    /// Initial velocity `w` with `exp_map(p, w, 1) = q`.
    pub fn log_map(&self, p: &SurfacePoint<T>, q: &SurfacePoint<T>) -> Result<TangentVector<T>> {
        self.ensure_inside(p)?;
        self.ensure_inside(q)?;
        let chord = *q - *p;
        if chord.chart_norm() == T::zero() {
            return Ok(TangentVector::zero());
        }
        if let Metric::Flat = self.metric {
            return Ok(chord);
        }
        let direct = self.shoot(p, q, chord);
        if direct.is_ok() {
            return direct;
        }
        // Continuation along the chart chord for long or strongly curved pairs.
        for stages in [4usize, 16, 64] {
            let mut w = chord * (T::one() / T::of_usize(stages));
            let mut ok = true;
            for k in 1..=stages {
                let frac = T::of_usize(k) / T::of_usize(stages);
                let qk = *p + chord * frac;
                match self.shoot(p, &qk, w) {
                    Ok(sol) => {
                        w = if k < stages { sol * (T::of_usize(k + 1) / T::of_usize(k)) } else { sol };
                    }
                    Err(_) => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                return Ok(w);
            }
        }
        direct
    }

    fn shoot(&self, p: &SurfacePoint<T>, q: &SurfacePoint<T>, w0: TangentVector<T>) -> Result<TangentVector<T>> {
        let scale = (*q - *p).chart_norm();
        let eps = T::epsilon();
        // Machine-precision floor for the endpoint residual.
        let floor = T::lit(16.0) * eps * (T::one() + q.u.abs().max(q.v.abs()));
        let target = self.settings.shoot_tol;
        let mut w = w0;
        let mut end = self.exp_map(p, &w, T::one())?;
        let mut res = end.chart_distance(q);
        for iter in 0..self.settings.max_shoot_iterations {
            if res <= floor {
                return Ok(w);
            }
            let h = T::tol(1e-7) * w.chart_norm().max(scale * eps);
            let e_u = self.exp_map(p, &(w + TangentVector::new(h, T::zero())), T::one())?;
            let e_v = self.exp_map(p, &(w + TangentVector::new(T::zero(), h)), T::one())?;
            let j = [
                [(e_u.u - end.u) / h, (e_v.u - end.u) / h],
                [(e_u.v - end.v) / h, (e_v.v - end.v) / h],
            ];
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            if det == T::zero() || !det.is_finite() {
                return Err(Error::Convergence {
                    what: "geodesic shooting",
                    iterations: iter,
                    residual: res.as_f64(),
                });
            }
            let ru = q.u - end.u;
            let rv = q.v - end.v;
            let step = TangentVector::new(
                (j[1][1] * ru - j[0][1] * rv) / det,
                (-j[1][0] * ru + j[0][0] * rv) / det,
            );
            // Backtracking keeps the residual from growing.
            let mut lambda = T::one();
            let mut accepted = false;
            for _ in 0..12 {
                let cand = w + step * lambda;
                if let Ok(e) = self.exp_map(p, &cand, T::one()) {
                    let r = e.chart_distance(q);
                    if r < res {
                        w = cand;
                        end = e;
                        res = r;
                        accepted = true;
                        break;
                    }
                }
                lambda = lambda * T::lit(0.5);
            }
            if !accepted {
                break;
            }
            if step.chart_norm() * lambda <= T::lit(4.0) * eps * w.chart_norm() {
                break;
            }
        }
        if res <= target {
            Ok(w)
        } else {
            Err(Error::Convergence {
                what: "geodesic shooting",
                iterations: self.settings.max_shoot_iterations,
                residual: res.as_f64(),
            })
        }
    }

    pub fn distance(&self, p: &SurfacePoint<T>, q: &SurfacePoint<T>) -> Result<T> {
        let w = self.log_map(p, q)?;
        Ok(self.norm(p, &w))
    }

    pub fn geodesic_between(&self, p: &SurfacePoint<T>, q: &SurfacePoint<T>) -> Result<GeodesicSegment<T>> {
        let w = self.log_map(p, q)?;
        let length = self.norm(p, &w);
        if length == T::zero() {
            return Ok(GeodesicSegment {
                start: *p,
                end: *p,
                initial_velocity: w,
                final_velocity: w,
                length,
            });
        }
        let (_, fin) = self.exp_state(p, &w, T::one())?;
        Ok(GeodesicSegment {
            start: *p,
            end: *q,
            initial_velocity: w,
            final_velocity: fin,
            length,
        })
    }

    pub fn midpoint(&self, p: &SurfacePoint<T>, q: &SurfacePoint<T>) -> Result<SurfacePoint<T>> {
        let w = self.log_map(p, q)?;
        self.exp_map(p, &w, T::lit(0.5))
    }

    /// Maps a chart point of `sphere_unit` to the unit sphere in ℝ³.
    pub fn sphere_embedding(&self, p: &SurfacePoint<T>) -> Option<[T; 3]> {
        if self.kind != SurfaceKind::SphereUnit {
            return None;
        }
        let rho2 = p.u * p.u + p.v * p.v;
        let d = T::one() + rho2;
        let two = T::lit(2.0);
        Some([two * p.u / d, two * p.v / d, (T::one() - rho2) / d])
    }
}

/// Central finite difference of a two-parameter surface family in its second
/// parameter: `(φ(t, s+h) − φ(t, s−h)) / 2h`.
///
/// Returns the chart components and the norm in the surface metric taken at
/// `φ(t, s)`.
pub fn jacobi_field<T, F>(
    surface: &SurfaceModel<T>,
    phi: F,
    t: T,
    s: T,
    h: T,
) -> Result<(TangentVector<T>, T)>
where
    T: Real,
    F: Fn(T, T) -> Result<SurfacePoint<T>>,
{
    if !(h > T::zero() && h <= T::lit(1e-4)) {
        return Err(Error::domain(format!("step {h} outside (0, 1e-4]")));
    }
    if !(s - h > T::zero() && s + h <= T::one()) {
        return Err(Error::domain(format!(
            "s ± h = {s} ± {h} leaves (0, 1]"
        )));
    }
    if !(t >= T::zero() && t <= T::one()) {
        return Err(Error::domain(format!("t = {t} outside [0, 1]")));
    }
    let plus = phi(t, s + h)?;
    let minus = phi(t, s - h)?;
    let base = phi(t, s)?;
    let j = (plus - minus) * (T::one() / (h + h));
    Ok((j, surface.norm(&base, &j)))
}
