use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_geogasket"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("GASKET_THREADS").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn docs(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/scenes").join(name)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_scene(dir: &Path, name: &str, json: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, json).unwrap();
    path
}

const FLAT3: &str = r#"{
  "surface": {"kind": "euclidean"},
  "vertices": [[0, 0], [1, 0], [0.5, 0.8660254037844386]],
  "depth": 3,
  "delta": 0.4
}"#;

/// Number after `key` on the first line that contains it.
fn number_after(text: &str, key: &str) -> f64 {
    let line = text.lines().find(|l| l.contains(key)).unwrap_or_else(|| panic!("no '{key}' in {text}"));
    let rest = &line[line.find(key).unwrap() + key.len()..];
    rest.split_whitespace().next().unwrap().trim_end_matches(',').parse().unwrap()
}

#[test]
fn moran_prints_fifteen_digits() {
    let o = run(&["moran", "0.5", "0.5", "0.5"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("s = 1.584962500721156"), "{}", stdout(&o));
    assert!(stdout(&o).contains("residual"));
    let o = run(&["moran", "0.5", "0.5"]);
    assert!(stdout(&o).contains("s = 1.000000000000000"));
}

#[test]
fn moran_rejects_bad_ratios() {
    for bad in [["1.5"], ["0"], ["-0.2"], ["abc"]] {
        let o = run(&["moran", bad[0]]);
        assert_eq!(o.status.code(), Some(2), "{bad:?}");
        assert!(!stderr(&o).is_empty());
    }
    assert_eq!(run(&["moran"]).status.code(), Some(2));
}

#[test]
fn flat_build_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_scene(dir.path(), "flat.json", FLAT3);
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    assert!(run(&["build", p(&scene), "--out", p(&a)]).status.success());
    let o = bin()
        .args(["build", p(&scene), "--out", p(&b), "--threads", "1"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let doc: Value = serde_json::from_str(&fs::read_to_string(&a).unwrap()).unwrap();
    assert_eq!(doc["leaf_count"], 27);
    assert_eq!(doc["levels"][3].as_array().unwrap().len(), 27);
    assert_eq!(doc["levels"][3][0]["index"], "111");
}

#[test]
fn thread_count_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_scene(dir.path(), "flat.json", FLAT3);
    let out = dir.path().join("s.json");
    let o = bin()
        .args(["build", p(&scene), "--out", p(&out)])
        .env("GASKET_THREADS", "2")
        .output()
        .unwrap();
    assert!(o.status.success());
    let o = bin().args(["moran", "0.5", "--threads", "0"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_changes_audit_samples_only() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let scene = docs("sphere.json");
    assert!(run(&["build", p(&scene), "--depth", "3", "--out", p(&a), "--seed", "5"]).status.success());
    assert!(run(&["build", p(&scene), "--depth", "3", "--out", p(&b), "--seed", "6"]).status.success());
    let da: Value = serde_json::from_str(&fs::read_to_string(&a).unwrap()).unwrap();
    let db: Value = serde_json::from_str(&fs::read_to_string(&b).unwrap()).unwrap();
    assert_eq!(da["levels"], db["levels"]);
    assert_ne!(da["certification"], db["certification"]);
}

#[test]
fn sphere_docs_scene_builds_and_certifies() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sphere.json");
    let o = run(&["build", p(&docs("sphere.json")), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("all checks pass"), "{}", stdout(&o));
    let doc: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(doc["leaf_count"], 729);
    assert_eq!(doc["certification"]["similarity"]["pass"], true);

    let o = run(&["verify", p(&out)]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 7);
    assert!(text.contains("constants: c = "));
    assert!(text.contains("L(r) = "));
}

#[test]
fn flat_verify_reports_zero_gauge() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_scene(dir.path(), "flat.json", FLAT3);
    let out = dir.path().join("s.json");
    let report = dir.path().join("r.json");
    assert!(run(&["build", p(&scene), "--out", p(&out)]).status.success());
    let o = run(&["verify", p(&out), "--report", p(&report)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("c = 0.000000e0"), "{}", stdout(&o));
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["c"], 0.0);
    assert_eq!(r["similarity"]["max_deviation"], 0.0);
}

#[test]
fn oversized_sphere_triangle_fails_construction() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_scene(
        dir.path(),
        "big.json",
        r#"{"surface": {"kind": "sphere_unit"}, "vertices": [[0.3, 0.0], [-0.05, 0.1], [0.0, -0.08]], "depth": 2}"#,
    );
    let o = run(&["build", p(&scene), "--out", p(&dir.path().join("x.json"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("convexity guard"), "{}", stderr(&o));
}

#[test]
fn degenerate_base_names_the_cell() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_scene(
        dir.path(),
        "thin.json",
        r#"{"surface": {"kind": "euclidean"}, "vertices": [[0, 0], [1, 0], [0.5, 0.05]], "depth": 2, "delta": 0.4}"#,
    );
    let o = run(&["build", p(&scene), "--out", p(&dir.path().join("x.json"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("cell ∅"), "{}", stderr(&o));
}

#[test]
fn schema_violations_are_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.json");
    for (name, json) in [
        ("missing.json", r#"{"surface": {"kind": "euclidean"}, "depth": 2}"#),
        (
            "extra.json",
            r#"{"surface": {"kind": "euclidean"}, "vertices": [[0,0],[1,0],[0,1]], "depth": 2, "colour": "red"}"#,
        ),
        (
            "kind.json",
            r#"{"surface": {"kind": "torus"}, "vertices": [[0,0],[1,0],[0,1]], "depth": 2}"#,
        ),
        (
            "custom.json",
            r#"{"surface": {"kind": "custom"}, "vertices": [[0,0],[0.1,0],[0,0.1]], "depth": 2}"#,
        ),
        ("syntax.json", "{ not json"),
    ] {
        let scene = write_scene(dir.path(), name, json);
        let o = run(&["build", p(&scene), "--out", p(&out)]);
        assert_eq!(o.status.code(), Some(2), "{name}: {}", stderr(&o));
    }
    let scene = write_scene(
        dir.path(),
        "expr.json",
        r#"{"surface": {"kind": "custom", "chart": {"u_min": -1, "u_max": 1, "v_min": -1, "v_max": 1},
             "metric": {"E": "1 + (u", "F": "0", "G": "1"}},
            "vertices": [[0,0],[0.1,0],[0,0.1]], "depth": 2}"#,
    );
    let o = run(&["build", p(&scene), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("column"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn truncated_and_tampered_systems() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_scene(dir.path(), "flat.json", FLAT3);
    let out = dir.path().join("s.json");
    assert!(run(&["build", p(&scene), "--out", p(&out)]).status.success());
    let text = fs::read_to_string(&out).unwrap();

    let cut = dir.path().join("cut.json");
    fs::write(&cut, &text[..text.len() / 2]).unwrap();
    assert_eq!(run(&["verify", p(&cut)]).status.code(), Some(2));

    let mut doc: Value = serde_json::from_str(&text).unwrap();
    for s in doc["levels"][3][4]["sides"].as_array_mut().unwrap() {
        *s = Value::from(s.as_f64().unwrap() * 1.5);
    }
    let bad = dir.path().join("bad.json");
    fs::write(&bad, serde_json::to_string(&doc).unwrap()).unwrap();
    let o = run(&["verify", p(&bad)]);
    assert_eq!(o.status.code(), Some(4), "{}", stdout(&o));
    let line = stdout(&o).lines().find(|l| l.starts_with("failures: ")).unwrap().to_string();
    let failed: Vec<String> = serde_json::from_str(&line["failures: ".len()..]).unwrap();
    assert!(failed.contains(&"contraction".to_string()), "{failed:?}");

    doc["levels"][3].as_array_mut().unwrap().pop();
    fs::write(&bad, serde_json::to_string(&doc).unwrap()).unwrap();
    assert_eq!(run(&["verify", p(&bad)]).status.code(), Some(2));
}

#[test]
fn flat_dimension_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let sys = dir.path().join("flat.json");
    assert!(run(&["build", p(&docs("flat.json")), "--out", p(&sys), "--no-audits"]).status.success());
    let (csv, svg, json) = (dir.path().join("d.csv"), dir.path().join("d.svg"), dir.path().join("d.json"));
    let o = run(&[
        "dim",
        p(&sys),
        "--levels",
        "4..10",
        "--csv",
        p(&csv),
        "--svg",
        p(&svg),
        "--json",
        p(&json),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let slope = number_after(&stdout(&o), "slope ");
    assert!((slope - 3f64.ln() / 2f64.ln()).abs() <= 1e-12, "{slope}");

    let rows: Vec<String> = fs::read_to_string(&csv).unwrap().lines().map(String::from).collect();
    assert_eq!(rows[0], "epsilon,count");
    assert_eq!(rows.len(), 8);
    for (k, row) in rows[1..].iter().enumerate() {
        let (eps, count) = row.split_once(',').unwrap();
        assert_eq!(count.parse::<usize>().unwrap(), 3usize.pow(k as u32 + 4));
        assert!((eps.parse::<f64>().unwrap() * 2f64.powi(k as i32 + 4) - 1.0).abs() < 1e-12);
    }

    let text = fs::read_to_string(&svg).unwrap();
    let xml = roxmltree::Document::parse(&text).unwrap();
    let root = xml.root_element();
    assert_eq!(root.tag_name().name(), "svg");
    assert_eq!(root.attribute("width"), Some("1024"));
    assert_eq!(root.attribute("height"), Some("1024"));
    let polys = xml.descendants().filter(|n| n.has_tag_name("polygon")).count();
    assert_eq!(polys, 59049);

    let d: Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(d["report"]["rows"].as_array().unwrap().len(), 7);
}

#[test]
fn sphere_box_slope() {
    let dir = tempfile::tempdir().unwrap();
    let sys = dir.path().join("sphere.json");
    let o = run(&["build", p(&docs("sphere.json")), "--depth", "8", "--out", p(&sys), "--no-audits"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["dim", p(&sys), "--levels", "3..8"]);
    assert!(o.status.success());
    let slope = number_after(&stdout(&o), "slope ");
    assert!((slope - 3f64.ln() / 2f64.ln()).abs() <= 0.05, "{slope}");
}

#[test]
fn dimension_level_errors() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_scene(dir.path(), "flat.json", FLAT3);
    let sys = dir.path().join("s.json");
    assert!(run(&["build", p(&scene), "--out", p(&sys), "--depth", "6"]).status.success());
    for levels in ["3..5", "2..9", "4", "a..b"] {
        let o = run(&["dim", p(&sys), "--levels", levels]);
        assert_eq!(o.status.code(), Some(2), "{levels}");
    }
}

#[test]
fn measure_contracts_and_degenerates() {
    let dir = tempfile::tempdir().unwrap();
    let sys = dir.path().join("flat.json");
    assert!(run(&["build", p(&docs("flat.json")), "--depth", "8", "--out", p(&sys), "--no-audits"]).status.success());

    let third = "0.3333333333333333";
    let o = run(&["measure", p(&sys), "--weights", third, third, "0.3333333333333334", "--iters", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let ratio = number_after(&text, "max contraction ratio ");
    assert!(ratio <= 0.55, "{text}");
    let resid = number_after(&text, "a_I| = ");
    assert!(resid < 1e-12, "{text}");

    let o = run(&["measure", p(&sys), "--weights", "1", "--iters", "6"]);
    assert!(o.status.success());
    let text = stdout(&o);
    // the only atom tends to p₁ at the origin
    let last = number_after(&text, "d*(μ_5, μ_6) = ");
    let first = number_after(&text, "d*(μ_0, μ_1) = ");
    // printed to 7 significant digits
    assert!((last / first / 2f64.powi(-5) - 1.0).abs() < 1e-6, "{text}");

    let o = run(&["measure", p(&sys), "--weights", "1", "--iters", "0"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("seed: 1 atom at (0.500000000000000, 0.288675134594813)"), "{}", stdout(&o));

    for w in [vec!["0.5", "0.4"], vec!["0.5", "0.6", "-0.1"], vec!["x"], vec!["0", "1"]] {
        let mut args = vec!["measure", p(&sys), "--weights"];
        args.extend(w.iter().copied());
        assert_eq!(run(&args).status.code(), Some(2), "{w:?}");
    }
}

#[test]
fn schema_files_accept_the_docs_scenes() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["flat.json", "sphere.json", "hyperbolic.json", "custom_paraboloid.json"] {
        let out = dir.path().join(name);
        let o = run(&["build", p(&docs(name)), "--depth", "3", "--out", p(&out)]);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
        assert!(run(&["verify", p(&out)]).status.success(), "{name}");
    }
}
