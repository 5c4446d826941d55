//! `geogasket`: build, certify and measure gasket systems from the command line.
//!
//! Exit codes: 0 success, 2 input error, 3 construction failure, 4 certification
//! failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;

use geogasket::dimension::{box_dimension_estimate, solve_moran, RatioList};
use geogasket::export::{certify, render_svg, Certification, DimensionExport, SceneConfig, SystemExport};
use geogasket::transport::{cell_masses, pushforward_fixpoint, DiscreteMeasure, PushforwardOptions};
use geogasket::{Error, SurfacePoint, TriangleSystem};

const SCENE_SCHEMA: &str = include_str!("../../../schemas/scene.schema.json");
const SYSTEM_SCHEMA: &str = include_str!("../../../schemas/system.schema.json");
const SCENE_ID: &str = "https://geogasket.invalid/scene.schema.json";

#[derive(Parser)]
#[command(name = "geogasket", version, about = "Sierpinski gaskets on curved surfaces")]
struct Cli {
    /// Worker threads for the parallel kernels.
    #[arg(long, global = true, env = "GASKET_THREADS")]
    threads: Option<usize>,
    /// Audit seed; replaces the seed stored in the scene.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve Σ λᵢˢ = 1 for the similarity dimension.
    Moran {
        #[arg(required = true, allow_negative_numbers = true)]
        ratios: Vec<String>,
    },
    /// Build a system from a scene file and write its export.
    Build {
        scene: PathBuf,
        /// Overrides the depth given in the scene.
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Store the cells only, without the certification report.
        #[arg(long)]
        no_audits: bool,
    },
    /// Re-run every certification check on a system file.
    Verify {
        system: PathBuf,
        /// Writes the full report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Box-counting slope over a range of levels.
    Dim {
        system: PathBuf,
        /// Inclusive level range `n1..n2`.
        #[arg(long)]
        levels: String,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        svg: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Iterates the weighted push-forward from a Dirac mass at the centroid.
    Measure {
        system: PathBuf,
        /// One to three positive weights summing to 1; fewer than three keep
        /// only the first maps.
        #[arg(long, num_args = 1..=3, required = true, allow_negative_numbers = true)]
        weights: Vec<String>,
        #[arg(long, default_value_t = 8)]
        iters: usize,
        /// Level of the invariance check; defaults to min(4, iterations, depth).
        #[arg(long)]
        depth: Option<usize>,
        /// Atom budget before cells are merged.
        #[arg(long, default_value_t = 20_000)]
        budget: usize,
    },
}

enum Failure {
    Input(String),
    Construction(String),
    Certification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Construction(_) => 3,
            Failure::Certification(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Input(m) | Failure::Construction(m) | Failure::Certification(m) => m,
        }
    }
}

type Outcome = Result<(), Failure>;

fn input(e: impl ToString) -> Failure {
    Failure::Input(e.to_string())
}

fn construction(e: impl ToString) -> Failure {
    Failure::Construction(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        // only fails when a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let res = match cli.command {
        Command::Moran { ratios } => cmd_moran(&ratios),
        Command::Build {
            scene,
            depth,
            out,
            no_audits,
        } => cmd_build(&scene, depth, &out, no_audits, cli.seed),
        Command::Verify { system, report } => cmd_verify(&system, report.as_deref(), cli.seed),
        Command::Dim {
            system,
            levels,
            csv,
            svg,
            json,
        } => cmd_dim(&system, &levels, csv.as_deref(), svg.as_deref(), json.as_deref()),
        Command::Measure {
            system,
            weights,
            iters,
            depth,
            budget,
        } => cmd_measure(&system, &weights, iters, depth, budget),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn read_json(path: &Path) -> Result<Value, Failure> {
    let text = fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn write(path: &Path, data: &[u8]) -> Outcome {
    fs::write(path, data).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn check_schema(schema_text: &str, doc: &Value, what: &str) -> Outcome {
    let schema: Value = serde_json::from_str(schema_text).expect("bundled schema is valid JSON");
    let scene: Value = serde_json::from_str(SCENE_SCHEMA).expect("bundled schema is valid JSON");
    let compiled = jsonschema::JSONSchema::options()
        .with_document(SCENE_ID.to_string(), scene)
        .compile(&schema)
        .expect("bundled schema compiles");
    if let Err(errors) = compiled.validate(doc) {
        let msgs: Vec<String> = errors
            .map(|e| {
                let at = e.instance_path.to_string();
                format!("{} {e}", if at.is_empty() { "/".into() } else { at })
            })
            .collect();
        return Err(input(format!("{what} fails schema validation:\n  {}", msgs.join("\n  "))));
    }
    Ok(())
}

fn load_system(path: &Path) -> Result<(SystemExport, TriangleSystem), Failure> {
    let doc = read_json(path)?;
    check_schema(SYSTEM_SCHEMA, &doc, "system file")?;
    let exp: SystemExport = serde_json::from_value(doc).map_err(|e| input(format!("system file: {e}")))?;
    let exp = SystemExport::from_json(&exp.to_json()).map_err(input)?;
    let sys = exp.system().map_err(|e| match e {
        Error::Invalid(_) | Error::Parse { .. } => input(e),
        _ => construction(e),
    })?;
    Ok((exp, sys))
}

fn cmd_moran(args: &[String]) -> Outcome {
    let mut ratios = Vec::with_capacity(args.len());
    for a in args {
        let r: f64 = a.parse().map_err(|_| input(format!("ratio '{a}' is not a number")))?;
        if !(r > 0.0 && r < 1.0) {
            return Err(input(format!("ratio {a} outside (0, 1)")));
        }
        ratios.push(r);
    }
    let list = RatioList::new(ratios).map_err(input)?;
    let m = solve_moran(&list).map_err(input)?;
    println!("s = {:.15}", m.s);
    println!("residual = {:.3e}", m.residual);
    Ok(())
}

fn cmd_build(scene_path: &Path, depth: Option<usize>, out: &Path, no_audits: bool, seed: Option<u64>) -> Outcome {
    let doc = read_json(scene_path)?;
    check_schema(SCENE_SCHEMA, &doc, "scene")?;
    let mut scene: SceneConfig = serde_json::from_value(doc).map_err(|e| input(format!("scene: {e}")))?;
    if let Some(d) = depth {
        if d == 0 {
            return Err(input("--depth must be at least 1"));
        }
        scene.depth = d;
    }
    if let Some(s) = seed {
        scene.seed = s;
    }
    scene.surface().map_err(input)?;
    let mut sys = scene.build().map_err(construction)?;
    let cert = if no_audits {
        None
    } else {
        Some(certify(&mut sys, scene.gauge.as_ref(), &scene.tolerances, scene.seed).map_err(construction)?)
    };
    let leaves = sys.cells_at(sys.depth()).len();
    let total: usize = sys.levels.iter().map(|l| l.len()).sum();
    println!("built {leaves} cells at depth {} ({total} stored), |Δ| = {:.6}", sys.depth(), sys.diam());
    if let Some(c) = &cert {
        println!(
            "audits: {} maps, max deviation {:.3e}, c = {}; {}",
            c.similarity.maps,
            c.similarity.max_deviation,
            fmt_opt(c.c),
            if c.pass() {
                "all checks pass".to_string()
            } else {
                format!("failing: {}", c.failed().join(", "))
            }
        );
    }
    let exp = SystemExport::new(&scene, &sys, cert);
    write(out, exp.to_json().as_bytes())?;
    println!("wrote {}", out.display());
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.6e}"))
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn print_certification(c: &Certification) {
    let inv = &c.invariants;
    println!(
        "{} nesting           {} cells, fan-parameter excess {:.2e}",
        verdict(inv.nesting_pass),
        inv.cells_checked,
        inv.nesting_excess
    );
    println!(
        "{} contraction       max |Δ_I|/(ν^|I| |Δ|) = {:.12}, max step ratio {:.12}",
        verdict(inv.contraction_pass),
        inv.contraction_ratio,
        inv.step_ratio
    );
    let nd = &c.nondegeneracy;
    println!(
        "{} non-degeneracy    δ = {}, {} cells, smallest comparison angle {}",
        verdict(nd.pass),
        fmt_opt(nd.delta),
        nd.cells_checked,
        fmt_opt(nd.smallest_angle)
    );
    let sim = &c.similarity;
    println!(
        "{} similarity        {} maps × {} pairs, max deviation {:.3e}, envelope use {:.3}",
        verdict(sim.pass),
        sim.maps,
        sim.pairs_per_map,
        sim.max_deviation,
        sim.worst_envelope_use
    );
    let rp = &c.ratio_products;
    println!(
        "{} ratio-products    max drift {:.6}, L(r) = {:.6}",
        verdict(rp.pass),
        rp.max_drift,
        rp.l_bound
    );
    let cm = &c.controlled_moran;
    println!(
        "{} controlled-moran  {} pairs, |V_IJ|/(|V_I||V_J|) in [{}, {}], measured D = {:.6}, diameter level {}",
        verdict(cm.pass),
        cm.pairs,
        fmt_opt(cm.min_ratio),
        fmt_opt(cm.max_ratio),
        cm.measured_d,
        cm.diameter_level.map_or_else(|| "none".into(), |l| l.to_string())
    );
    let g = &c.gauge;
    println!(
        "{} gauge             ∫ φ(aν^x) dx = {:.6e}, Π(1 ± φ) in [{:.6}, {:.6}]",
        verdict(g.pass),
        g.admissibility.integral,
        g.products.lower,
        g.products.upper
    );
    println!(
        "constants: c = {}, ν = {:.6}, L(r) = {:.6}, D = {:.6}",
        fmt_opt(c.c),
        c.nu,
        c.l_bound,
        c.d
    );
}

fn cmd_verify(path: &Path, report: Option<&Path>, seed: Option<u64>) -> Outcome {
    let (exp, mut sys) = load_system(path)?;
    let scene = &exp.scene;
    let seed = seed.unwrap_or(scene.seed);
    let cert = certify(&mut sys, scene.gauge.as_ref(), &scene.tolerances, seed).map_err(construction)?;
    print_certification(&cert);
    if let Some(p) = report {
        let text = serde_json::to_string_pretty(&cert).expect("report is serializable");
        write(p, text.as_bytes())?;
    }
    if cert.pass() {
        println!("certified");
        Ok(())
    } else {
        let list = serde_json::to_string(&cert.failed()).expect("names serialize");
        println!("failures: {list}");
        Err(Failure::Certification(format!("{} condition(s) failed", cert.failed().len())))
    }
}

fn parse_levels(s: &str) -> Result<(usize, usize), Failure> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| input(format!("levels '{s}' are not of the form n1..n2")))?;
    let p = |x: &str| {
        x.trim()
            .parse::<usize>()
            .map_err(|_| input(format!("level '{x}' is not a non-negative integer")))
    };
    Ok((p(a)?, p(b.trim_start_matches('='))?))
}

fn cmd_dim(path: &Path, levels: &str, csv: Option<&Path>, svg: Option<&Path>, json: Option<&Path>) -> Outcome {
    let (n1, n2) = parse_levels(levels)?;
    let (_, sys) = load_system(path)?;
    let rep = box_dimension_estimate(&sys, n1, n2).map_err(input)?;
    let d = DimensionExport::new(rep, n1, n2);
    for r in &d.report.rows {
        println!("level {:>2}  ε = {:.6e}  N = {:>8}  Σ|Δ_I|^s = {:.6}", r.depth, r.epsilon, r.count, r.sum);
    }
    println!(
        "slope {:.12} (95% band [{:.6}, {:.6}]), log3/log2 = {:.12}, deviation {:+.3e}{}",
        d.report.slope,
        d.report.band.0,
        d.report.band.1,
        d.reference,
        d.deviation,
        if d.report.dropped_coarsest { ", coarsest level dropped" } else { "" }
    );
    if let Some(p) = csv {
        let mut buf = Vec::new();
        d.write_csv(&mut buf).map_err(input)?;
        write(p, &buf)?;
    }
    if let Some(p) = svg {
        write(p, render_svg(&sys, n2).map_err(input)?.as_bytes())?;
    }
    if let Some(p) = json {
        let text = serde_json::to_string_pretty(&d).expect("report is serializable");
        write(p, text.as_bytes())?;
    }
    Ok(())
}

fn cmd_measure(path: &Path, args: &[String], iters: usize, depth: Option<usize>, budget: usize) -> Outcome {
    let mut weights = Vec::with_capacity(args.len());
    for a in args {
        let w: f64 = a.parse().map_err(|_| input(format!("weight '{a}' is not a number")))?;
        if !(w > 0.0 && w <= 1.0) {
            return Err(input(format!("weight {a} outside (0, 1]")));
        }
        weights.push(w);
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(input(format!("weights sum to {total}, not 1")));
    }
    for w in &mut weights {
        *w /= total;
    }
    let (_, sys) = load_system(path)?;
    let v = sys.base.vertices;
    let centroid = SurfacePoint::new((v[0].u + v[1].u + v[2].u) / 3.0, (v[0].v + v[1].v + v[2].v) / 3.0);
    let seed = DiscreteMeasure::dirac(centroid);
    let opts = PushforwardOptions {
        budget,
        ..PushforwardOptions::default()
    };
    let out = pushforward_fixpoint(&sys, &weights, iters, seed, opts).map_err(construction)?;
    if iters == 0 {
        println!("seed: 1 atom at ({:.15}, {:.15}), mass 1", centroid.u, centroid.v);
    }
    for (m, k) in out.trace.iter().enumerate() {
        let ratio = if m == 0 { String::new() } else { format!(", ratio {:.4}", out.ratios[m - 1]) };
        println!(
            "iteration {:>2}: d*(μ_{m}, μ_{}) = {:.6e} (lower {:.6e}{}){ratio}",
            m + 1,
            m + 1,
            k.value,
            k.lower,
            if k.exact { ", exact" } else { "" }
        );
    }
    if !out.snapped_at.is_empty() {
        println!("atoms merged at depth {} after iterations {:?}", out.snap_depth, out.snapped_at);
    }
    let n = depth.unwrap_or_else(|| 4.min(iters).min(sys.depth()));
    if n > sys.depth() {
        return Err(input(format!("invariance depth {n} exceeds the system depth {}", sys.depth())));
    }
    let (masses, outside) = cell_masses(&sys, &out.measure, n).map_err(construction)?;
    let b = sys.branching();
    let mut worst: f64 = 0.0;
    for (k, m) in masses.iter().enumerate() {
        let idx = geogasket::gasket::MultiIndex::from_level_index(n, k, b);
        let want: f64 = idx
            .digits()
            .iter()
            .map(|&d| weights.get(d as usize - 1).copied().unwrap_or(0.0))
            .product();
        worst = worst.max((m - want).abs());
    }
    println!(
        "invariance at level {n}: {} cells, max |μ(Δ_I) − a_I| = {worst:.3e}, mass outside {outside:.3e}",
        masses.len()
    );
    let max_ratio = out.ratios.iter().copied().fold(0.0, f64::max);
    if !out.ratios.is_empty() {
        println!("max contraction ratio {max_ratio:.4}");
    }
    Ok(())
}
