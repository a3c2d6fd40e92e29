//! Runs every shipped scenario twice through the binary and checks the
//! acceptance criteria on the artifacts. One line per criterion is written
//! straight to stderr so it shows without `--nocapture`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

use loci_core::artifact::read_json;
use loci_core::loci::{CutClass, LociTable};
use loci_core::regularity::{uniform_convexity, ConvexityOptions};
use serde_json::Value;

const SUITE: &[(&str, &[&str])] = &[
    ("flat", &["validate", "loci"]),
    ("polynomial-flat", &["validate", "loci"]),
    ("round-equator", &["loci", "sphere-verify"]),
    ("round-equator-3d", &["conj-scan", "sphere-verify"]),
    ("round-point", &["loci", "convexity"]),
    ("perturbed-eps005", &["validate", "loci", "regularity", "convexity"]),
    ("perturbed-eps001", &["validate", "loci", "convexity"]),
];

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.json"))
}

fn run(command: &str, name: &str, out: &Path) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_loci-lab"))
        .arg(command)
        .arg(scenario(name))
        .arg("--out")
        .arg(out)
        .arg("--quiet")
        .status()
        .expect("binary runs")
        .code()
        .unwrap_or(-1)
}

fn report(lines: &mut Vec<(bool, String)>, index: &str, pass: bool, text: String) {
    let line = format!("criterion {index:>2}: {} {text}", if pass { "PASS" } else { "FAIL" });
    let _ = writeln!(std::io::stderr(), "{line}");
    lines.push((pass, line));
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn table(path: &Path) -> LociTable {
    read_json::<LociTable>(path).unwrap_or_else(|e| panic!("{}: {e}", path.display())).data
}

fn csv_rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().filter(|l| !l.starts_with('#')).count() - 1
}

fn worst(t: &LociTable, f: impl Fn(&loci_core::loci::LociRecord) -> Option<f64>, target: f64) -> f64 {
    t.records.iter().map(|r| f(r).map_or(f64::INFINITY, |v| (v - target).abs())).fold(0.0, f64::max)
}

fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().is_some_and(|n| n != "manifest.json"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn acceptance_criteria() {
    let root = tempfile::tempdir().unwrap();
    let mut codes: Vec<(String, i32)> = Vec::new();
    for pass in ["a", "b"] {
        for (name, commands) in SUITE {
            let out = root.path().join(pass).join(name);
            for c in *commands {
                let code = run(c, name, &out);
                if pass == "a" {
                    codes.push((format!("{c} {name}"), code));
                }
            }
        }
    }
    let a = |name: &str| root.path().join("a").join(name);
    let mut lines = Vec::new();

    // 1, 2, 6, 9: sphere-verify in both dimensions.
    let verify: Vec<(usize, Value)> = ["round-equator", "round-equator-3d"]
        .iter()
        .map(|n| {
            let v = json(&a(n).join("sphere-verify.json"));
            (v["data"]["dimension"].as_u64().unwrap() as usize, v)
        })
        .collect();
    let max_of = |key: &str| verify.iter().map(|(_, v)| v["data"][key]["max"].as_f64().unwrap()).fold(0.0, f64::max);
    let grid_ok = ["round-equator", "round-equator-3d"].iter().all(|n| {
        let s = json(&scenario(n));
        let o = &s["oracle"];
        let close = |k: &str, v: f64| o[k].as_f64().is_some_and(|x| (x - v).abs() < 1e-12);
        o["per_axis"] == 9 && close("s_lo", 0.1) && close("s_hi", PI - 0.1)
    });
    let oracle_rows: Vec<usize> = verify.iter().map(|(n, _)| 9usize.pow(*n as u32 - 1)).collect();
    let k = max_of("k_residual");
    report(
        &mut lines,
        "1",
        grid_ok && k <= 1e-6,
        format!("oracle K(z,s) max relative residual {k:.3e} <= 1e-6 (n = 2, 3; z-grids of {oracle_rows:?} points)"),
    );
    let printed = verify.iter().map(|(_, v)| v["data"]["k_residual_as_printed"].as_f64().unwrap()).fold(0.0, f64::max);
    let _ = writeln!(std::io::stderr(), "   info: residual against the K matrix as printed {printed:.3e} (sign convention)");
    let u = max_of("u_residual");
    report(&mut lines, "2", u <= 1e-8, format!("initial frame U(z) max residual {u:.3e} <= 1e-8"));

    // 3, 4: conjugate and cut times.
    let eq = table(&a("round-equator").join("loci.json"));
    let eq3 = table(&a("round-equator-3d").join("conj-scan.json"));
    let pt = table(&a("round-point").join("loci.json"));
    let c_eq = worst(&eq, |r| r.t_conj, PI / 2.0).max(worst(&eq3, |r| r.t_conj, PI / 2.0));
    let c_pt = worst(&pt, |r| r.t_conj, PI);
    report(
        &mut lines,
        "3",
        c_eq <= 1e-4 && c_pt <= 1e-4,
        format!("t_conj equator |t - pi/2| {c_eq:.3e}, point |t - pi| {c_pt:.3e} <= 1e-4"),
    );
    let u_eq = worst(&eq, |r| r.t_cut, PI / 2.0);
    let u_pt = worst(&pt, |r| r.t_cut, PI);
    let poles = eq.records.iter().chain(&pt.records).all(|r| r.class == Some(CutClass::SigmaPoint) && r.gamma_flag);
    report(
        &mut lines,
        "4",
        eq.records.len() == 201 && u_eq <= 5e-3 && u_pt <= 5e-3 && poles,
        format!(
            "t_cut equator ({} rays) {u_eq:.3e}, point {u_pt:.3e} <= 5e-3; poles SigmaPoint with gamma_flag: {poles}",
            eq.records.len()
        ),
    );

    // 5: ordering across every scan artifact and exit code.
    let mut rows = 0;
    let mut violations = 0;
    for (name, commands) in SUITE {
        for c in *commands {
            if ["loci", "conj-scan", "cut-scan"].contains(c) {
                let t = table(&a(name).join(format!("{c}.json")));
                rows += t.records.len();
                violations += t.violations();
            }
        }
    }
    let exit2: Vec<&String> = codes.iter().filter(|c| c.1 == 2).map(|c| &c.0).collect();
    report(
        &mut lines,
        "5",
        violations == 0 && exit2.is_empty(),
        format!("{violations} ordering violations over {rows} rows; runs exiting 2: {exit2:?}"),
    );

    let sigma = max_of("symplectic");
    let sigma_rays: Vec<usize> = ["round-equator", "round-equator-3d"].iter().map(|n| csv_rows(&a(n).join("symplectic.csv"))).collect();
    report(
        &mut lines,
        "6",
        sigma <= 1e-8 && sigma_rays.iter().all(|&r| r >= 100),
        format!("symplectic form drift over [0, pi] {sigma:.3e} <= 1e-8 on {sigma_rays:?} rays"),
    );

    // 7: regularity of the perturbed sphere.
    let reg = json(&a("perturbed-eps005").join("regularity.json"));
    let lip = reg["data"]["t_cut_lipschitz"].as_array().unwrap();
    let ratio = lip.iter().map(|p| p["ratio"].as_f64().unwrap_or(f64::INFINITY)).fold(0.0, f64::max);
    let lips: Vec<(f64, f64)> = lip
        .iter()
        .map(|p| (p["coarse"]["value"].as_f64().unwrap_or(f64::NAN), p["fine"]["value"].as_f64().unwrap_or(f64::NAN)))
        .collect();
    let finite = lips.iter().all(|(c, f)| c.is_finite() && f.is_finite());
    let sc: Vec<(f64, bool)> = reg["data"]["meshes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| {
            let s = &m["t_conj_semiconcavity"];
            (s["c"].as_f64().unwrap_or(f64::INFINITY), s["infinite"].as_bool().unwrap())
        })
        .collect();
    let sc_ok = sc.iter().all(|(c, inf)| c.is_finite() && !inf);
    report(
        &mut lines,
        "7",
        finite && ratio <= 2.0 && sc_ok,
        format!("eps=0.05 Lip(t_cut) coarse/fine {lips:?}, worst ratio {ratio:.3} <= 2; semiconcavity(t_conj) {sc:?}"),
    );

    // 8: disc and perturbed nonfocal domains.
    let disc: Vec<Vec<f64>> = (0..721)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / 721.0;
            vec![PI * a.cos(), PI * a.sin()]
        })
        .collect();
    let d = uniform_convexity(&disc, &[0.0, 0.0], &ConvexityOptions::default()).unwrap();
    let target = 1.0 / (2.0 * PI);
    let disc_err = (d.kappa_chord - target).abs() / target;
    let mut nf = Vec::new();
    for name in ["perturbed-eps001", "perturbed-eps005"] {
        let c = &json(&a(name).join("convexity.json"))["data"]["certificate"];
        nf.push((c["kappa_chord"].as_f64().unwrap(), c["samples"].as_u64().unwrap(), c["pass"].as_bool().unwrap()));
    }
    let nf_ok = nf.iter().all(|&(k, n, p)| k >= 0.1 && n == 721 && p);
    report(
        &mut lines,
        "8",
        disc_err <= 0.05 && nf_ok,
        format!(
            "disc radius pi kappa {:.5} vs {target:.5} ({:.2}% off, <= 5%); eps 0.01, 0.05 (kappa, samples, pass) {nf:?}",
            d.kappa_chord,
            100.0 * disc_err
        ),
    );

    let dexp = max_of("dexp");
    let dexp_rays: Vec<usize> = ["round-equator", "round-equator-3d"].iter().map(|n| csv_rows(&a(n).join("dexp.csv"))).collect();
    report(
        &mut lines,
        "9",
        dexp <= 1e-4 && dexp_rays.iter().all(|&r| r >= 50),
        format!("Hblock vs finite-difference d exp {dexp:.3e} <= 1e-4 on {dexp_rays:?} rays"),
    );

    // 10: byte-identical artifacts.
    let mut compared = 0;
    let mut differing = Vec::new();
    for (name, _) in SUITE {
        let (x, y) = (artifacts(&a(name)), artifacts(&root.path().join("b").join(name)));
        if x.keys().ne(y.keys()) {
            differing.push(format!("{name}: file sets differ"));
        }
        for (file, bytes) in &x {
            compared += 1;
            if y.get(file) != Some(bytes) {
                differing.push(format!("{name}/{file}"));
            }
        }
    }
    report(
        &mut lines,
        "10",
        differing.is_empty() && compared > 0,
        format!("{compared} artifacts compared across two runs; differing: {differing:?}"),
    );

    let failed: Vec<&String> = lines.iter().filter(|l| !l.0).map(|l| &l.1).collect();
    let bad_exit: Vec<&(String, i32)> = codes.iter().filter(|c| c.1 != 0).collect();
    assert!(bad_exit.is_empty(), "non-zero exits: {bad_exit:?}");
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("\n"));
}
