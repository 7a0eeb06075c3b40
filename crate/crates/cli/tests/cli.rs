use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sphs::system::validate;
use sphs_cli::config::{emit_config, parse_config, parse_matrix_text, ControlConfig};

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn sphs(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sphs"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--quiet")
        .output()
        .expect("binary runs")
}

fn config(name: &str) -> String {
    configs_dir().join(name).to_string_lossy().into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn minimal_mass_spring_gets_the_default_driver() {
    let cfg = parse_config("seed = 1\n[system]\nmodel = \"mass_spring\"\n").unwrap();
    let d = cfg.driver.as_ref().unwrap();
    assert_eq!(d.n_wieners, 2);
    assert_eq!(d.components[0].name, "z");
    assert_eq!(d.components[0].drift, 1.0);
    assert_eq!(d.components[0].loadings, vec![1.0, 0.0]);
    let sys = cfg.system.as_ref().unwrap();
    assert_eq!(sys.params["damping"], 0.0);
    assert_eq!(sys.x0, Some(vec![1.0, 0.0]));
    assert_eq!(cfg.control, Some(ControlConfig::Constant { u: vec![0.0] }));
    assert_eq!(cfg.integrator.scheme, "stratonovich_heun");
}

#[test]
fn misspelled_keys_are_rejected_by_name() {
    let err = parse_config("[system]\nmodel = \"mass_spring\"\nparams = { dampinng = 0.3 }\n").unwrap_err();
    assert!(err.to_string().contains("dampinng"), "{err}");
    assert!(err.to_string().contains("system.params"), "{err}");
    let err = parse_config("[integrator]\ndtt = 0.1\n").unwrap_err();
    assert!(err.to_string().contains("dtt"), "{err}");
    let err = parse_config("[system\n").unwrap_err();
    assert!(err.to_string().contains("line 1"), "{err}");
}

#[test]
fn inline_skew_system_builds_and_validates() {
    let text = "seed = 3\n[system]\nj = \"\"\"\n0 1\n-1 0\n\"\"\"\nq = [[1.0, 0.0], [0.0, 4.0]]\nx0 = [1.0, 1.0]\n";
    let cfg = parse_config(text).unwrap();
    let s = cfg.setup().unwrap();
    assert_eq!(s.def.dim(), 2);
    let probes: Vec<_> = (0..10)
        .map(|i| nalgebra::DVector::from_vec(vec![i as f64, 1.0 - i as f64]))
        .collect();
    assert!(validate(&s.def, &probes, 1e-12).unwrap().passed);
    let err = parse_config("[system]\nj = [[0.0, 1.0], [-1.0, 0.0]]\nq = [[1.0]]\n").unwrap_err();
    assert!(err.to_string().contains("[system]"), "{err}");
}

#[test]
fn matrix_text_blocks() {
    assert_eq!(
        parse_matrix_text(" 1 2\n\n3   4e-1 \n").unwrap(),
        vec![vec![1.0, 2.0], vec![3.0, 0.4]]
    );
    assert!(parse_matrix_text("1 x").is_err());
}

#[test]
fn emitted_configs_read_back_unchanged() {
    for entry in fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        let cfg = parse_config(&fs::read_to_string(&path).unwrap()).unwrap();
        let again = parse_config(&emit_config(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, again, "{}", path.display());
    }
}

#[test]
fn dirac_check_on_the_canonical_graph() {
    let out = tempfile::tempdir().unwrap();
    let o = sphs(
        &["dirac", "check", "--config", &config("dirac_canonical.toml")],
        out.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&out.path().join("dirac_check.json"));
    assert_eq!(v["is_dirac"], true);
    assert_eq!(v["dimension"], 2);
    assert!(v["isotropy_residual"].as_f64().unwrap() <= 1e-12);
    let basis = fs::read_to_string(out.path().join("dirac_check_basis.txt")).unwrap();
    assert_eq!(parse_matrix_text(&basis).unwrap().len(), 4);
}

#[test]
fn non_dirac_structure_exits_with_verdict_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(
        &cfg,
        "[dirac.structure]\nkind = \"graph\"\nj = [[0.0, 1.0], [-0.5, 0.0]]\n",
    )
    .unwrap();
    let o = sphs(&["dirac", "check", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(json(&dir.path().join("dirac_check.json"))["is_dirac"], false);
}

#[test]
fn anti_damped_passivity_is_violated() {
    let out = tempfile::tempdir().unwrap();
    let o = sphs(&["passivity", "--config", &config("anti_damped.toml")], out.path());
    assert_eq!(o.status.code(), Some(1));
    let v = json(&out.path().join("passivity.json"));
    assert_eq!(v["verdict"], "violated");
    assert!(v["margin"].as_f64().unwrap() < 0.0);
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(sphs(&["simulate"], out.path()).status.code(), Some(2));
    assert_eq!(sphs(&["frobnicate"], out.path()).status.code(), Some(2));
    let cfg = out.path().join("typo.toml");
    fs::write(&cfg, "[system]\nmodel = \"mass_spring\"\nparams = { dampinng = 1.0 }\n").unwrap();
    let o = sphs(&["simulate", "--config", cfg.to_str().unwrap()], out.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dampinng"));
    // stochastic run without a seed
    fs::write(&cfg, "[system]\nmodel = \"mass_spring\"\n").unwrap();
    assert_eq!(
        sphs(&["simulate", "--config", cfg.to_str().unwrap()], out.path())
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn simulate_writes_a_trajectory_csv() {
    let out = tempfile::tempdir().unwrap();
    let o = sphs(
        &["simulate", "--config", &config("mass_spring.toml"), "--dt", "1e-2"],
        out.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.path().join("simulate.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,x_1,x_2,H,y_1,power_storage,power_R,power_C,power_N,exploded"
    );
    // stride 10 over 100 steps
    assert_eq!(lines.count(), 11);
    assert!(csv.ends_with('\n'));
}

#[test]
fn flags_override_the_config() {
    let out = tempfile::tempdir().unwrap();
    let args = [
        "mean",
        "--config",
        &config("mass_spring.toml"),
        "--paths",
        "64",
        "--seed",
        "9",
        "--dt",
        "1e-2",
    ];
    assert_eq!(sphs(&args, out.path()).status.code(), Some(0));
    let v = json(&out.path().join("mean.json"));
    assert_eq!(v["n_paths"], 64);
    assert_eq!(v["seed"], 9);
    assert_eq!(v["dt"], 0.01);
    let header = fs::read_to_string(out.path().join("mean.csv")).unwrap();
    assert!(
        header.starts_with("t,mean_q,mean_p,se_q,se_p,mean_H,se_H,ref_q,ref_p\n"),
        "{header}"
    );
}

#[test]
fn list_models_prints_the_catalog() {
    let o = Command::new(env!("CARGO_BIN_EXE_sphs"))
        .arg("list-models")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let names: Vec<_> = v["models"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["name"].as_str().unwrap())
        .collect();
    assert_eq!(
        names,
        ["mass_spring", "dc_motor", "pendulum", "van_der_pol", "pure_noise"]
    );
}
