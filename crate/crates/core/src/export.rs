//! Scene files, system and dimension exports, certification and SVG output.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dimension::{
    gauge_admissible, product_bounds, BoxDimensionReport, GaugeAdmissibility, GaugeSpec, ProductBounds,
};
use crate::error::{Error, Result};
use crate::gasket::{
    build_system, quotient_bound, BuildOptions, Cell, ControlledMoranReport, InvariantReport, MultiIndex,
    RatioProductReport, SimilarityAudit, TriangleSystem, Variant, NOISE_FLOOR,
};
use crate::metric::{write_cover_csv, CoverRecord};
use crate::surface::{SurfaceModel, SurfacePoint, SurfaceSpec};
use crate::triangle::{is_delta_nondegenerate, GeodesicTriangleRegion, TriangleRecord};

pub const SYSTEM_FORMAT: &str = "geogasket-system";
pub const SYSTEM_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Halton pairs per similarity audit.
    #[serde(default = "default_audit_pairs")]
    pub audit_pairs: usize,
    /// Maps `f_I` with `|I|` up to this level fix the gauge constant.
    #[serde(default = "default_calibration_levels")]
    pub calibration_levels: usize,
    /// Deepest `|I|` audited; defaults to the system depth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit_depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shoot_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rtol: Option<f64>,
}

fn default_audit_pairs() -> usize {
    64
}

fn default_calibration_levels() -> usize {
    3
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            audit_pairs: default_audit_pairs(),
            calibration_levels: default_calibration_levels(),
            audit_depth: None,
            shoot_tol: None,
            atol: None,
            rtol: None,
        }
    }
}

fn default_variant() -> Variant {
    Variant::Gasket
}

/// Input document of `build`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub surface: SurfaceSpec,
    /// Chart coordinates of `p₁, p₂, p₃`.
    pub vertices: [[f64; 2]; 3],
    pub depth: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    /// Gauge of the audit envelope; quadratic with calibrated `c` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gauge: Option<GaugeSpec>,
    /// Selects the window of the Halton sequence used by every audit.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tolerances: Tolerances,
}

impl SceneConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Invalid(format!("scene: {e}")))
    }

    pub fn surface(&self) -> Result<SurfaceModel<f64>> {
        let mut s = SurfaceModel::from_spec(&self.surface)?;
        let t = &self.tolerances;
        if let Some(v) = t.shoot_tol {
            s.settings.shoot_tol = v;
        }
        if let Some(v) = t.atol {
            s.settings.atol = v;
        }
        if let Some(v) = t.rtol {
            s.settings.rtol = v;
        }
        Ok(s)
    }

    pub fn base(&self, surface: &SurfaceModel<f64>) -> Result<GeodesicTriangleRegion<f64>> {
        let p = self.vertices.map(|[u, v]| SurfacePoint::new(u, v));
        for q in &p {
            if !surface.contains(q) {
                return Err(Error::domain(format!("vertex ({}, {}) outside the chart", q.u, q.v)));
            }
        }
        GeodesicTriangleRegion::new(surface, p[0], p[1], p[2])
    }

    pub fn build(&self) -> Result<TriangleSystem<f64>> {
        let surface = self.surface()?;
        let base = self.base(&surface)?;
        build_system(
            &surface,
            base,
            self.depth,
            BuildOptions {
                variant: self.variant,
                delta: self.delta,
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub index: MultiIndex,
    pub vertices: [[f64; 2]; 3],
    pub sides: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NondegeneracySweep {
    pub delta: Option<f64>,
    pub cells_checked: usize,
    pub smallest_angle: Option<f64>,
    pub failures: Vec<String>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub gauge: GaugeSpec,
    pub calibration_levels: usize,
    pub audited_levels: usize,
    pub pairs_per_map: usize,
    pub maps: usize,
    pub max_deviation: f64,
    /// Largest `dev / envelope` among maps with a positive envelope.
    pub worst_envelope_use: f64,
    pub failures: Vec<SimilarityAudit>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaugeReport {
    pub admissibility: GaugeAdmissibility,
    pub products: ProductBounds,
    pub pass: bool,
}

/// Every checked condition with its measured constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certification {
    /// Gauge constant; `None` for tabulated gauges.
    pub c: Option<f64>,
    pub nu: f64,
    pub l_bound: f64,
    pub d: f64,
    pub invariants: InvariantReport,
    pub nondegeneracy: NondegeneracySweep,
    pub similarity: AuditSummary,
    pub ratio_products: RatioProductReport,
    pub controlled_moran: ControlledMoranReport,
    pub gauge: GaugeReport,
}

impl Certification {
    /// `(name, pass)` per condition, in report order.
    pub fn conditions(&self) -> Vec<(&'static str, bool)> {
        vec![
            ("nesting", self.invariants.nesting_pass),
            ("contraction", self.invariants.contraction_pass),
            ("non-degeneracy", self.nondegeneracy.pass),
            ("similarity", self.similarity.pass),
            ("ratio-products", self.ratio_products.pass),
            ("controlled-moran", self.controlled_moran.pass),
            ("gauge", self.gauge.pass),
        ]
    }

    pub fn pass(&self) -> bool {
        self.conditions().iter().all(|c| c.1)
    }

    pub fn failed(&self) -> Vec<&'static str> {
        self.conditions().into_iter().filter(|c| !c.1).map(|c| c.0).collect()
    }
}

fn sweep_nondegeneracy(system: &TriangleSystem<f64>) -> Result<NondegeneracySweep> {
    let b = system.branching();
    let mut failures = Vec::new();
    let mut smallest = f64::INFINITY;
    let mut checked = 0;
    if let Some(delta) = system.delta {
        for (n, level) in system.levels.iter().enumerate() {
            let d = if n == 0 { delta } else { 0.5 * delta };
            for (k, cell) in level.iter().enumerate() {
                let rep = is_delta_nondegenerate(cell.sides, d)?;
                smallest = smallest.min(rep.angles.min());
                checked += 1;
                if !rep.nondegenerate {
                    failures.push(MultiIndex::from_level_index(n, k, b).to_string());
                }
            }
        }
    }
    Ok(NondegeneracySweep {
        delta: system.delta,
        cells_checked: checked,
        smallest_angle: (checked > 0).then_some(smallest),
        pass: failures.is_empty(),
        failures,
    })
}

/// Calibrates the gauge (when `gauge` is `None`) and runs every check.
pub fn certify(
    system: &mut TriangleSystem<f64>,
    gauge: Option<&GaugeSpec>,
    tol: &Tolerances,
    seed: u64,
) -> Result<Certification> {
    // each seed owns a disjoint window of 2¹⁶ Halton points
    let seed = seed.wrapping_mul(1 << 16);
    let depth = system.depth();
    let r = system.diam();
    let kind = system.surface.kind();
    let calib = tol.calibration_levels.min(depth);
    let gauge = match gauge {
        Some(g) => {
            g.validate(r)?;
            g.clone()
        }
        None => {
            let c = system.calibrate_gauge_levels(calib, tol.audit_pairs, seed)?;
            GaugeSpec::quadratic(c)
        }
    };
    let audited = tol.audit_depth.unwrap_or(depth).min(depth);
    let mut audits = system.audit_many(&system.corner_indices(1, audited), tol.audit_pairs, seed)?;
    let mut worst: f64 = 0.0;
    for a in &mut audits {
        a.envelope = a.lambda * gauge.eval(a.parent_diameter);
        a.pass = a.max_ratio_deviation <= a.envelope + NOISE_FLOOR;
        if a.envelope > 0.0 {
            worst = worst.max(a.max_ratio_deviation / a.envelope);
        }
    }
    let max_dev = audits.iter().map(|a| a.max_ratio_deviation).fold(0.0, f64::max);
    let failures: Vec<SimilarityAudit> = audits.iter().filter(|a| !a.pass).cloned().collect();
    let similarity = AuditSummary {
        gauge: gauge.clone(),
        calibration_levels: calib,
        audited_levels: audited,
        pairs_per_map: tol.audit_pairs,
        maps: audits.len(),
        max_deviation: max_dev,
        worst_envelope_use: worst,
        pass: failures.is_empty(),
        failures,
    };

    let invariants = system.check_invariants(&system.all_indices(depth))?;
    let nondegeneracy = sweep_nondegeneracy(system)?;
    let ratio_products = system.check_ratio_products();
    let d = 4.0 / r;
    let controlled_moran = system.controlled_moran_check(d);
    let nu = system.nu;
    let gauge_report = if gauge_is_zero(&gauge) {
        GaugeReport {
            admissibility: GaugeAdmissibility {
                admissible: true,
                integral: 0.0,
                doublings: 0,
                last_increment: 0.0,
                increment_ratio: 0.0,
            },
            products: ProductBounds {
                upper: 1.0,
                lower: 1.0,
                terms: 0,
                truncation_error: 0.0,
            },
            pass: true,
        }
    } else {
        let admissibility = gauge_admissible(&gauge, r, nu)?;
        let products = product_bounds(&gauge, nu, r)?;
        GaugeReport {
            pass: admissibility.admissible && products.lower > 0.0 && products.upper.is_finite(),
            admissibility,
            products,
        }
    };
    Ok(Certification {
        c: match gauge {
            GaugeSpec::Power { c, .. } | GaugeSpec::LogPower { c, .. } => Some(c),
            GaugeSpec::Table { .. } => None,
        },
        nu,
        l_bound: quotient_bound(kind, r),
        d,
        invariants,
        nondegeneracy,
        similarity,
        ratio_products,
        controlled_moran,
        gauge: gauge_report,
    })
}

fn gauge_is_zero(g: &GaugeSpec) -> bool {
    match g {
        GaugeSpec::Power { c, .. } | GaugeSpec::LogPower { c, .. } => *c == 0.0,
        GaugeSpec::Table { points } => points.iter().all(|p| p.1 == 0.0),
    }
}

/// Serialized [`TriangleSystem`] together with the scene that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemExport {
    pub format: String,
    pub version: u32,
    pub scene: SceneConfig,
    pub depth: usize,
    pub variant: Variant,
    pub nu: f64,
    pub ratios: Vec<f64>,
    pub gauge_c: f64,
    pub base: TriangleRecord,
    pub leaf_count: usize,
    /// `levels[n]` lists the cells with `|I| = n` in index order.
    pub levels: Vec<Vec<CellRecord>>,
    /// Report of the build-time checks, kept verbatim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certification: Option<serde_json::Value>,
}

fn cell_record(index: MultiIndex, c: &Cell<f64>) -> CellRecord {
    CellRecord {
        index,
        vertices: c.vertices.map(|p| [p.u, p.v]),
        sides: c.sides,
    }
}

impl SystemExport {
    pub fn new(scene: &SceneConfig, system: &TriangleSystem<f64>, certification: Option<Certification>) -> Self {
        let b = system.branching();
        let levels = system
            .levels
            .iter()
            .enumerate()
            .map(|(n, level)| {
                level
                    .iter()
                    .enumerate()
                    .map(|(k, c)| cell_record(MultiIndex::from_level_index(n, k, b), c))
                    .collect()
            })
            .collect();
        SystemExport {
            format: SYSTEM_FORMAT.into(),
            version: SYSTEM_VERSION,
            scene: scene.clone(),
            depth: system.depth(),
            variant: system.variant,
            nu: system.nu,
            ratios: system.ratios.clone(),
            gauge_c: system.gauge_c,
            base: system.base.record(system.surface.kind()),
            leaf_count: system.levels[system.depth()].len(),
            levels,
            certification: certification.map(|c| serde_json::to_value(c).expect("report is serializable")),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let e: SystemExport = serde_json::from_str(text).map_err(|e| Error::Invalid(format!("system file: {e}")))?;
        if e.format != SYSTEM_FORMAT || e.version != SYSTEM_VERSION {
            return Err(Error::Invalid(format!("unsupported system format {} v{}", e.format, e.version)));
        }
        Ok(e)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("system export is always serializable")
    }

    /// Rebuilds the system from the stored cells; geodesic sides are recomputed
    /// on demand.
    pub fn system(&self) -> Result<TriangleSystem<f64>> {
        let surface = self.scene.surface()?;
        let base = GeodesicTriangleRegion::from_record(&surface, &self.base)?;
        let b = self.variant.branching();
        if self.levels.len() != self.depth + 1 {
            return Err(Error::Invalid(format!(
                "{} levels stored for depth {}",
                self.levels.len(),
                self.depth
            )));
        }
        let mut levels = Vec::with_capacity(self.levels.len());
        for (n, level) in self.levels.iter().enumerate() {
            if level.len() != b.pow(n as u32) {
                return Err(Error::Invalid(format!("level {n} holds {} cells, expected {}", level.len(), b.pow(n as u32))));
            }
            let mut cells = Vec::with_capacity(level.len());
            for (k, rec) in level.iter().enumerate() {
                if rec.index != MultiIndex::from_level_index(n, k, b) {
                    return Err(Error::Invalid(format!("cell {} stored out of order at level {n}", rec.index)));
                }
                cells.push(Cell {
                    vertices: rec.vertices.map(|[u, v]| SurfacePoint::new(u, v)),
                    sides: rec.sides,
                });
            }
            levels.push(cells);
        }
        Ok(TriangleSystem {
            surface,
            base,
            levels,
            variant: self.variant,
            nu: self.nu,
            ratios: self.ratios.clone(),
            gauge_c: self.gauge_c,
            delta: self.scene.delta,
        })
    }
}

/// Box-counting report with its reference slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionExport {
    pub levels: (usize, usize),
    pub reference: f64,
    pub deviation: f64,
    pub report: BoxDimensionReport,
}

impl DimensionExport {
    pub fn new(report: BoxDimensionReport, n1: usize, n2: usize) -> Self {
        let reference = 3f64.ln() / 2f64.ln();
        DimensionExport {
            levels: (n1, n2),
            reference,
            deviation: report.slope - reference,
            report,
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let rows: Vec<CoverRecord<f64>> = self
            .report
            .rows
            .iter()
            .map(|r| CoverRecord {
                epsilon: r.epsilon,
                count: r.count,
            })
            .collect();
        write_cover_csv(&rows, out)
    }
}

pub const SVG_SIZE: f64 = 1024.0;

/// Stroke-only SVG 1.1 of the depth-`n` cells in chart coordinates, `v` up.
pub fn render_svg(system: &TriangleSystem<f64>, depth: usize) -> Result<String> {
    if depth > system.depth() {
        return Err(Error::domain(format!("depth {depth} exceeds the system depth {}", system.depth())));
    }
    let v = system.base.vertices;
    let (mut u0, mut u1, mut v0, mut v1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for cell in system.cells_at(depth) {
        for p in &cell.vertices {
            u0 = u0.min(p.u);
            u1 = u1.max(p.u);
            v0 = v0.min(p.v);
            v1 = v1.max(p.v);
        }
    }
    for p in &v {
        u0 = u0.min(p.u);
        u1 = u1.max(p.u);
        v0 = v0.min(p.v);
        v1 = v1.max(p.v);
    }
    let span = (u1 - u0).max(v1 - v0);
    let margin = 32.0;
    let k = (SVG_SIZE - 2.0 * margin) / span;
    let ox = margin + 0.5 * (span - (u1 - u0)) * k;
    let oy = margin + 0.5 * (span - (v1 - v0)) * k;
    let map = |p: &SurfacePoint<f64>| (ox + (p.u - u0) * k, SVG_SIZE - (oy + (p.v - v0) * k));
    let stroke = (0.75f64).min(200.0 / (system.cells_at(depth).len() as f64).sqrt()).max(0.1);

    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"1024\" height=\"1024\" viewBox=\"0 0 1024 1024\">"
    );
    let _ = writeln!(
        s,
        "<g fill=\"none\" stroke=\"black\" stroke-width=\"{stroke:.3}\" stroke-linejoin=\"round\">"
    );
    for cell in system.cells_at(depth) {
        let pts: Vec<String> = cell
            .vertices
            .iter()
            .map(|p| {
                let (x, y) = map(p);
                format!("{x:.3},{y:.3}")
            })
            .collect();
        let _ = writeln!(s, "<polygon points=\"{}\"/>", pts.join(" "));
    }
    s.push_str("</g>\n</svg>\n");
    Ok(s)
}
