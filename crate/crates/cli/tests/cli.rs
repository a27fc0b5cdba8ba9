use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn selforder(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selforder")).args(args).output().unwrap()
}

fn run_ok(cmd: &str, cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = selforder(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn write_cfg(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// Rows of a CSV file as `(header, records)`.
fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_owned).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(str::to_owned).collect()).collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name} in {header:?}"))
}

fn single_mode(eta: f64, cutoff: usize, extra: &str) -> String {
    format!(
        r#"
[model]
n_particles = 1
n_modes_trap = 6

[model.trap]
kind = "box"
half_width = 0.25

[[model.modes]]
n = 19
delta_c = -3.0
u0 = -2.0
eta = {eta:?}
fock_cutoff = {cutoff}
{extra}
"#
    )
}

#[test]
fn config_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let missing = selforder(&["steady", "--config", "/nonexistent/x.cfg", "--out", out.to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));

    let unknown = write_cfg(tmp.path(), "u.cfg", &single_mode(1.0, 6, "[run]\nbogus = 1\n"));
    assert_eq!(selforder(&["steady", "--config", unknown.to_str().unwrap()]).status.code(), Some(2));

    let bad_axis = write_cfg(
        tmp.path(),
        "a.cfg",
        &single_mode(1.0, 6, "[scan]\naxes = [{ path = \"model.modes.0.nope\", min = 0.0, max = 1.0, points = 3 }]\n"),
    );
    let o = selforder(&["scan", "--config", bad_axis.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));

    let one_point = write_cfg(
        tmp.path(),
        "p.cfg",
        &single_mode(1.0, 6, "[scan]\naxes = [{ path = \"model.modes.0.eta\", min = 0.0, max = 1.0, points = 1 }]\n"),
    );
    assert_eq!(selforder(&["scan", "--config", one_point.to_str().unwrap()]).status.code(), Some(2));

    let bad_model = write_cfg(tmp.path(), "m.cfg", &single_mode(1.0, 0, ""));
    assert_eq!(selforder(&["steady", "--config", bad_model.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn couplings_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "c.cfg", &single_mode(1.0, 6, "").replace("n_modes_trap = 6", "n_modes_trap = 8"));
    let out = tmp.path().join("box");
    run_ok("couplings", &cfg, &out, &[]);
    let (h, rows) = read_csv(&out.join("couplings.csv"));
    assert_eq!(rows.len(), 64);
    let (ci, cj, cb) = (column(&h, "i"), column(&h, "j"), column(&h, "B"));
    column(&h, "A_closed_form");
    for r in &rows {
        let (i, j): (usize, usize) = (r[ci].parse().unwrap(), r[cj].parse().unwrap());
        if (i + j) % 2 == 1 {
            assert!(r[cb].parse::<f64>().unwrap().abs() <= 1e-12);
        }
    }
    let meta: Value = serde_json::from_slice(&std::fs::read(out.join("metadata.json")).unwrap()).unwrap();
    assert!(meta["report"]["closed_form_validation"]["selected"].is_string());
    let box_b = meta["report"]["nonzero_fraction"][0]["B"].as_f64().unwrap();

    let harmonic = write_cfg(
        tmp.path(),
        "h.cfg",
        r#"
[model]
n_modes_trap = 8

[model.trap]
kind = "harmonic"
omega = 1.0
length = 0.1
center = 0.05

[[model.modes]]
n = 5
delta_c = -3.0
u0 = -2.0
eta = 1.0
fock_cutoff = 6
"#,
    );
    let out = tmp.path().join("harmonic");
    run_ok("couplings", &harmonic, &out, &[]);
    let (h, _) = read_csv(&out.join("couplings.csv"));
    assert!(!h.iter().any(|c| c.contains("closed_form")));
    let meta: Value = serde_json::from_slice(&std::fs::read(out.join("metadata.json")).unwrap()).unwrap();
    assert!(meta["report"]["nonzero_fraction"][0]["B"].as_f64().unwrap() > box_b);
}

#[test]
fn dark_steady_state_and_csv_format() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "d.cfg", &single_mode(0.0, 6, ""));
    let out = tmp.path().join("out");
    run_ok("steady", &cfg, &out, &[]);
    let (h, rows) = read_csv(&out.join("observables.csv"));
    let n: f64 = rows[0][column(&h, "n_19")].parse().unwrap();
    assert!(n.abs() <= 1e-10);
    let raw = std::fs::read_to_string(out.join("q_mode19.csv")).unwrap();
    assert!(!raw.contains('\r'));
    assert!(raw.lines().count() > 100);
}

#[test]
fn truncation_limited_run_exits_with_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "t.cfg", &single_mode(4.0, 6, "[run]\nsteady_method = \"direct\"\ntwin_check = false\n"));
    let out = tmp.path().join("out");
    let o = selforder(&["steady", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    let meta: Value = serde_json::from_slice(&std::fs::read(out.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["report"]["converged"], false);
}

#[test]
fn eta_scan_rises_and_matches_single_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let scan = "[run]\nsteady_method = \"auto\"\nmax_cutoff = 34\n[observables]\nmixture = false\n\
                [scan]\naxes = [{ path = \"model.modes.0.eta\", min = 0.0, max = 4.0, points = 5 }]\n";
    let cfg = write_cfg(tmp.path(), "s.cfg", &single_mode(1.0, 10, scan));
    let (one, two) = (tmp.path().join("w1"), tmp.path().join("w2"));
    run_ok("scan", &cfg, &one, &["--workers", "1"]);
    run_ok("scan", &cfg, &two, &["--workers", "2"]);
    assert_eq!(std::fs::read(one.join("scan.csv")).unwrap(), std::fs::read(two.join("scan.csv")).unwrap());

    let (h, rows) = read_csv(&one.join("scan.csv"));
    let cn = column(&h, "n_19");
    let n: Vec<f64> = rows.iter().map(|r| r[cn].parse().unwrap()).collect();
    assert_eq!(rows.iter().map(|r| r[column(&h, "status")].as_str()).collect::<Vec<_>>(), vec!["ok"; 5]);
    for w in n.windows(2) {
        assert!(w[1] >= w[0] - 1e-8, "{n:?}");
    }

    // Forcing the direct solver on the dark point fails that point only.
    let direct = write_cfg(tmp.path(), "d.cfg", &std::fs::read_to_string(&cfg).unwrap().replace("\"auto\"", "\"direct\""));
    let failed = tmp.path().join("failed");
    let o = selforder(&["scan", "--config", direct.to_str().unwrap(), "--out", failed.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let (h, rows) = read_csv(&failed.join("scan.csv"));
    let status: Vec<&str> = rows.iter().map(|r| r[column(&h, "status")].as_str()).collect();
    assert_eq!(status, ["error", "ok", "ok", "ok", "ok"]);

    // A degenerate one-point scan reproduces the single steady run.
    let point = "[run]\nsteady_method = \"auto\"\nmax_cutoff = 34\n[observables]\nmixture = false\n\
                 [scan]\naxes = [{ path = \"model.modes.0.eta\", min = 1.5, max = 1.5, points = 1 }]\n";
    let cfg = write_cfg(tmp.path(), "p.cfg", &single_mode(1.5, 10, point));
    let (scan_dir, steady_dir) = (tmp.path().join("scan1"), tmp.path().join("steady1"));
    run_ok("scan", &cfg, &scan_dir, &[]);
    run_ok("steady", &cfg, &steady_dir, &[]);
    let (hs, rs) = read_csv(&scan_dir.join("scan.csv"));
    let (ho, ro) = read_csv(&steady_dir.join("observables.csv"));
    for (k, name) in ho.iter().enumerate() {
        assert_eq!(rs[0][column(&hs, name)], ro[0][k], "{name}");
    }
}

#[test]
fn evolve_writes_time_series() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "e.cfg", &single_mode(1.5, 6, "[run]\nt_end = 2.0\nsamples = 5\n"));
    let out = tmp.path().join("out");
    run_ok("evolve", &cfg, &out, &[]);
    let (h, rows) = read_csv(&out.join("timeseries.csv"));
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0][column(&h, "t")], "0.0");
    assert_eq!(rows[4][column(&h, "t")], "2.0");
    assert_eq!(rows[0][column(&h, "n_19")], "0.0");
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in std::fs::read_dir(&dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "cfg") {
            let text = std::fs::read_to_string(&p).unwrap();
            let v: toml::Value = toml::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            assert!(v.get("model").is_some(), "{}", p.display());
            n += 1;
        }
    }
    assert_eq!(n, 6);
}
