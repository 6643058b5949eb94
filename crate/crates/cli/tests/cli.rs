use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dmubf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmubf"))
        .args(args)
        .env_remove("DMUBF_THREADS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(out: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

fn config_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

const SMALL_SIM: &str = r#"
params = [0.01, 0.03]
symbols = [1, 4]
trials = 6
fixed_channel = true
csi = "perfect"
seed = 11
snr_db = 20.0

[cfo]
kind = "normal"
beta = 0.0

[config]
num_daps = 2
antennas_per_dap = 8
num_users = 2
slot_symbols = 5
"#;

#[test]
fn missing_config_is_an_io_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no_such.toml");
    let out = dir.path().join("out");
    let o = dmubf(&["simulate", "-c", s(&missing), "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("no_such.toml"), "{}", stderr(&o));
}

#[test]
fn negative_beta_is_a_validation_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "neg.toml",
        "[cfo]\nkind = \"normal\"\nbeta = -0.01\n",
    );
    let out = dir.path().join("out");
    let o = dmubf(&["analytic-sinr", "-c", s(&cfg), "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("cfo.beta"), "{}", stderr(&o));

    let cfg = write(dir.path(), "negp.toml", "params = [0.01, -0.01]\n");
    let o = dmubf(&["simulate", "-c", s(&cfg), "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("params[1]"), "{}", stderr(&o));
}

#[test]
fn unknown_keys_and_bad_syntax_are_parse_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write(dir.path(), "typo.toml", "trails = 10\n");
    let o = dmubf(&["simulate", "-c", s(&cfg), "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("trails"), "{}", stderr(&o));

    let cfg = write(dir.path(), "nested.toml", "[config]\nnum_dapz = 2\n");
    let o = dmubf(&["moments", "-c", s(&cfg), "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(4));

    let cfg = write(dir.path(), "broken.toml", "params = [0.01,\n");
    let o = dmubf(&["simulate", "-c", s(&cfg), "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(dmubf(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        dmubf(&["simulate", "--threads", "x"]).status.code(),
        Some(2)
    );
}

#[test]
fn replication_config_resolves_to_the_reference_system() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = config_dir().join("sweep_cbf.toml");
    let o = dmubf(&["simulate", "-c", s(&cfg), "-o", s(&out), "--dry-run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = manifest(&out);
    let c = &m["resolved_config"]["config"];
    assert_eq!(c["num_daps"], 4);
    assert_eq!(c["antennas_per_dap"], 16);
    assert_eq!(c["num_users"], 4);
    assert_eq!(c["num_subcarriers"], 64);
    assert_eq!(c["cp_len"], 16);
    let snr = 10.0 * (c["ul_power"].as_f64().unwrap() / c["noise_var"].as_f64().unwrap()).log10();
    assert!((snr - 20.0).abs() < 1e-9, "snr {snr}");
    assert_eq!(m["resolved_config"]["method"], "cbf");
    assert_eq!(m["resolved_config"]["cfo"]["kind"], "normal");
    assert!(m["resolved_config"]["trials"].as_u64().unwrap() >= 1000);
    // every default is echoed
    for key in [
        "csi",
        "model",
        "fading",
        "map",
        "interference",
        "phase_correction",
    ] {
        assert!(m["resolved_config"].get(key).is_some(), "{key}");
    }
}

#[test]
fn shipped_configs_validate() {
    let dir = tempfile::tempdir().unwrap();
    for (sub, file) in [
        (vec!["simulate"], "sweep_cbf.toml"),
        (vec!["simulate"], "sweep_zf.toml"),
        (vec!["moments"], "moments.toml"),
        (vec!["analytic-sinr"], "analytic.toml"),
        (vec!["dataset", "synth"], "synth_lo.toml"),
        (vec!["dataset", "analyze"], "analyze.toml"),
    ] {
        let out = dir.path().join(file);
        let cfg = config_dir().join(file);
        let mut args = sub.clone();
        args.extend(["-c", s(&cfg), "-o", s(&out), "--dry-run"]);
        let o = dmubf(&args);
        assert!(o.status.success(), "{file}: {}", stderr(&o));
    }
}

fn read_rows(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap()).collect()
}

#[test]
fn simulate_anlt_matches_analytic_sinr_on_the_dumped_channel() {
    let dir = tempfile::tempdir().unwrap();
    let sim_cfg = write(dir.path(), "sim.toml", SMALL_SIM);
    let sim_out = dir.path().join("sim");
    let o = dmubf(&["simulate", "-c", s(&sim_cfg), "-o", s(&sim_out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let channel = sim_out.join("channel.bin");
    assert!(channel.exists());

    let an_cfg = write(
        dir.path(),
        "an.toml",
        &format!(
            r#"
params = [0.01, 0.03]
symbols = [1, 4]
channel_file = "{}"
snr_db = 20.0

[cfo]
kind = "normal"
beta = 0.0

[config]
num_daps = 2
antennas_per_dap = 8
num_users = 2
slot_symbols = 5
"#,
            s(&channel)
        ),
    );
    let an_out = dir.path().join("an");
    let o = dmubf(&["analytic-sinr", "-c", s(&an_cfg), "-o", s(&an_out)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let sim = read_rows(&sim_out.join("sweep.csv"));
    let an = read_rows(&an_out.join("analytic_sinr.csv"));
    let mut compared = 0;
    for a in &an {
        let (param, n, user) = (&a[1], &a[2], &a[4]);
        let row = sim
            .iter()
            .find(|r| &r[3] == param && &r[4] == n && &r[5] == user)
            .unwrap_or_else(|| panic!("no sweep row for {param} {n} {user}"));
        let d: f64 = row[7].parse::<f64>().unwrap() - a[8].parse::<f64>().unwrap();
        assert!(d.abs() < 1e-5, "param {param} n {n} user {user}: {d}");
        compared += 1;
    }
    assert_eq!(compared, 2 * 2 * 2);
}

#[test]
fn same_seed_gives_identical_csvs_and_manifest_replays() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "sim.toml", SMALL_SIM);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = dmubf(&["simulate", "-c", s(&cfg), "-o", s(out), "--seed", "5"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let csv_a = fs::read(a.join("sweep.csv")).unwrap();
    assert_eq!(csv_a, fs::read(b.join("sweep.csv")).unwrap());
    assert_eq!(manifest(&a)["seed"], 5);

    // the manifest alone reproduces the run
    let c = dir.path().join("c");
    let m = a.join("manifest.json");
    let o = dmubf(&["simulate", "-c", s(&m), "-o", s(&c)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(csv_a, fs::read(c.join("sweep.csv")).unwrap());

    // and is refused by another subcommand
    let o = dmubf(&["moments", "-c", s(&m), "-o", s(&c)]);
    assert_eq!(o.status.code(), Some(4));

    let d = dir.path().join("d");
    let o = dmubf(&["simulate", "-c", s(&cfg), "-o", s(&d), "--seed", "6"]);
    assert!(o.status.success());
    assert_ne!(csv_a, fs::read(d.join("sweep.csv")).unwrap());
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "sim.toml", SMALL_SIM);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = dmubf(&["simulate", "-c", s(&cfg), "-o", s(&a), "--threads", "1"]);
    assert!(o.status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_dmubf"))
        .args(["simulate", "-c", s(&cfg), "-o", s(&b)])
        .env("DMUBF_THREADS", "3")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(manifest(&b)["threads"], 3);
    assert_eq!(
        fs::read(a.join("sweep.csv")).unwrap(),
        fs::read(b.join("sweep.csv")).unwrap()
    );
}

#[test]
fn moments_writes_closed_and_monte_carlo_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "m.toml",
        "params = [0.01, 0.02]\nsymbols = [0, 3]\ntrials = 20000\n",
    );
    let out = dir.path().join("out");
    let o = dmubf(&["moments", "-c", s(&cfg), "-o", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_rows(&out.join("moments.csv"));
    assert_eq!(rows.len(), 2 * 2 * 2);
    for r in &rows {
        let closed: f64 = r[3].parse().unwrap();
        let mc: f64 = r[5].parse().unwrap();
        assert!((closed - mc).abs() < 5e-3, "{r:?}");
    }

    let cfg = write(
        dir.path(),
        "strat.toml",
        "params = [0.05]\nsymbols = [10]\ntrials = 20000\nmodel = \"approx\"\nsampling = \"stratified\"\n",
    );
    let o = dmubf(&["moments", "-c", s(&cfg), "-o", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for r in &read_rows(&out.join("moments.csv")) {
        let closed: f64 = r[3].parse().unwrap();
        let mc: f64 = r[5].parse().unwrap();
        assert!((closed - mc).abs() < 1e-4, "{r:?}");
    }
}

#[test]
fn dataset_synth_then_analyze_produces_the_stats_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write(
        dir.path(),
        "syn.toml",
        r#"
file_name = "cap.h5"
snr_db = 20.0

[synthetic]
scenario = "Dist-LO"
frames = 12
beta = 0.0078

[synthetic.config]
num_daps = 2
antennas_per_dap = 4
num_users = 2
slot_symbols = 2
"#,
    );
    let o = dmubf(&["dataset", "synth", "-c", s(&cfg), "-o", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cap = out.join("cap.h5");
    assert!(cap.exists());

    let o = dmubf(&["dataset", "analyze", "-i", s(&cap), "-o", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "cfo_estimates.csv",
        "dap_stats.csv",
        "evm_snr.csv",
        "summary.json",
        "manifest.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(read_rows(&out.join("dap_stats.csv")).len(), 2);
    assert_eq!(read_rows(&out.join("evm_snr.csv")).len(), 2);
    assert_eq!(read_rows(&out.join("cfo_estimates.csv")).len(), 12 * 2 * 8);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["frames_processed"], 12);
    assert!(summary["beta_hat"].as_f64().unwrap() > 0.0);
}

#[test]
fn dataset_errors_map_to_their_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("absent.h5");
    let o = dmubf(&["dataset", "analyze", "-i", s(&missing), "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("absent.h5"));

    let o = dmubf(&["dataset", "analyze", "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("input"));

    let garbage = write(dir.path(), "junk.h5", "not an hdf5 file");
    let o = dmubf(&["dataset", "analyze", "-i", s(&garbage), "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(6), "{}", stderr(&o));
}

#[test]
fn outputs_stay_inside_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write(dir.path(), "esc.toml", "file_name = \"../escape.h5\"\n");
    let o = dmubf(&["dataset", "synth", "-c", s(&cfg), "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("file_name"));
    assert!(!dir.path().join("escape.h5").exists());

    let cfg = write(dir.path(), "sim.toml", SMALL_SIM);
    let o = dmubf(&["simulate", "-c", s(&cfg), "-o", s(&out)]);
    assert!(o.status.success());
    let m = manifest(&out);
    for f in m["outputs"].as_array().unwrap() {
        let p = PathBuf::from(f.as_str().unwrap());
        assert!(p.starts_with(&out), "{}", p.display());
    }
    let mut names: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["esc.toml", "out", "sim.toml"]);
}
