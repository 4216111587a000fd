use std::path::Path;
use std::process::Command;

use rankheads::cli::{run, EXIT_DIVERGED, EXIT_INVALID, EXIT_OK, EXIT_OUT_OF_BAND};
use rankheads::io::RunManifest;
use tempfile::tempdir;

struct Outcome {
    code: i32,
    out: String,
    err: String,
}

fn rh(args: &[&str]) -> Outcome {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv: Vec<&str> = std::iter::once("rankheads").chain(args.iter().copied()).collect();
    let code = run(argv, &mut out, &mut err);
    Outcome { code, out: String::from_utf8(out).unwrap(), err: String::from_utf8(err).unwrap() }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn last_row(csv: &str) -> Vec<String> {
    csv.lines().last().unwrap().split(',').map(str::to_string).collect()
}

#[test]
fn spectra_small_table() {
    let r = rh(&["spectra", "--d", "3", "--lmax", "9"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let mut lines = r.out.lines();
    assert_eq!(lines.next().unwrap(), "d,l,N,pnorm2,eta,alpha,c");
    let row1: Vec<&str> = lines.nth(1).unwrap().split(',').collect();
    assert_eq!(&row1[..3], &["3", "1", "3"]);
    let eta: f64 = row1[4].parse().unwrap();
    assert!((eta - 0.8660254037844386).abs() <= 1e-12);
    assert_eq!(r.out.lines().count(), 11);
}

#[test]
fn spectra_rejects_low_dimension() {
    let r = rh(&["spectra", "--d", "2"]);
    assert_eq!(r.code, EXIT_INVALID);
    assert!(r.err.starts_with("error:"));
}

#[test]
fn reruns_are_byte_identical_and_write_manifests() {
    let dir = tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for f in [&a, &b] {
        assert_eq!(rh(&["spectra", "--d", "5", "--lmax", "21", "--out", p(f)]).code, EXIT_OK);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(RunManifest::path_for(&a)).unwrap()).unwrap();
    assert_eq!(m.subcommand, "spectra");
    assert_eq!(m.outputs, vec![a.clone()]);
    assert_eq!(m.parameters["d"], serde_json::json!(5));
    assert!(m.artifact_version.starts_with("rankheads "));
}

#[test]
fn lower_bound_reports_value_and_terms() {
    let dir = tempdir().unwrap();
    let f = dir.path().join("lb.csv");
    let r = rh(&["lower-bound", "--d", "8", "--r", "1", "--H", "4", "--lmax", "21", "--out", p(&f)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!(r.out.starts_with("value,tail_lower,tail_upper\n"));
    let csv = std::fs::read_to_string(&f).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "l,N,M,weight,contribution");
    for line in csv.lines().skip(1) {
        let m: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(m, 1.0);
    }
    assert_eq!(rh(&["lower-bound", "--d", "4", "--r", "5", "--H", "1"]).code, EXIT_INVALID);
}

#[test]
fn verify_default_lemmas_pass() {
    for (lemma, n) in [
        ("kernel", "100000"),
        ("close-pair", "100000"),
        ("ortho", "100000"),
        ("hecke-funk", "200000"),
        ("edge", "100000"),
    ] {
        let r = rh(&["verify", "--lemma", lemma, "--n", n]);
        assert_eq!(r.code, EXIT_OK, "{lemma}: {} {}", r.out, r.err);
        assert_eq!(r.out.lines().next().unwrap(), "name,params,mean,stderr,n,seed,status,band");
        assert_eq!(last_row(&r.out)[6], "pass", "{lemma}");
    }
}

#[test]
fn verify_flags_unmet_preconditions() {
    let r = rh(&["verify", "--lemma", "psi", "--psi-a", "5", "--n", "1000"]);
    assert_eq!(r.code, EXIT_OK);
    let row = last_row(&r.out);
    assert_eq!(row[6], "unasserted");
    assert!(row[1].contains("precondition=violated"));
}

#[test]
fn construct_eval_reports_out_of_band() {
    let r = rh(&["construct-eval", "--construction", "majority2layer", "--H", "11", "--n", "500"]);
    assert_eq!(r.code, EXIT_OUT_OF_BAND);
    assert_eq!(last_row(&r.out)[6], "fail");
}

#[test]
fn verify_rejects_bad_sample_counts() {
    assert_eq!(rh(&["verify", "--lemma", "kernel", "--n", "1"]).code, EXIT_INVALID);
    assert_eq!(rh(&["verify", "--lemma", "majority", "--H", "5", "--H2", "3"]).code, EXIT_INVALID);
    assert_eq!(rh(&["verify", "--lemma", "nonsense"]).code, EXIT_INVALID);
}

#[test]
fn seed_comes_from_the_environment() {
    let bin = env!("CARGO_BIN_EXE_rankheads");
    let go = |seed: Option<&str>| {
        let mut c = Command::new(bin);
        c.args(["verify", "--lemma", "close-pair", "--n", "5000"]);
        match seed {
            Some(s) => c.env("RANKHEADS_SEED", s),
            None => c.env_remove("RANKHEADS_SEED"),
        };
        let o = c.output().unwrap();
        assert_eq!(o.status.code(), Some(0));
        String::from_utf8(o.stdout).unwrap()
    };
    let seven = go(Some("7"));
    assert_eq!(last_row(&seven)[5], "7");
    assert_eq!(seven, go(Some("7")));
    assert_ne!(seven, go(None));
    let explicit = rh(&["verify", "--lemma", "close-pair", "--n", "5000", "--seed", "7"]);
    assert_eq!(explicit.out, seven);
}

#[test]
fn thread_count_does_not_change_output() {
    let one = rh(&["--threads", "1", "verify", "--lemma", "kernel", "--n", "20000"]);
    let four = rh(&["--threads", "4", "verify", "--lemma", "kernel", "--n", "20000"]);
    assert_eq!(one.out, four.out);
}

#[test]
fn construct_eval_exact_constructions() {
    let r = rh(&["construct-eval", "--construction", "fact1", "--hardmax", "--N", "8", "--n", "2000"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let row = last_row(&r.out);
    assert_eq!(row[2].parse::<f64>().unwrap(), 0.0);
    let r = rh(&["construct-eval", "--construction", "fact3", "--N", "2", "--bias", "-10,0", "--n", "2000"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let r = rh(&["construct-eval", "--construction", "modemlp", "--d", "4", "--H", "5", "--eps", "0.3", "--n", "200"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert_eq!(rh(&["construct-eval", "--construction", "fact3", "--N", "3", "--bias", "1,2"]).code, EXIT_INVALID);
    assert_eq!(rh(&["construct-eval", "--construction", "modemlp", "--eps", "0.7"]).code, EXIT_INVALID);
}

#[test]
fn saved_models_round_trip() {
    use rankheads::io::ModelDocument;
    let dir = tempdir().unwrap();
    for (c, extra) in [
        ("fact1", vec![]),
        ("fact3", vec!["--N", "2", "--bias", "1,0"]),
        ("majority2layer", vec!["--H", "3", "--d", "4"]),
        ("modemlp", vec!["--d", "3", "--H", "3", "--eps", "0.4"]),
        ("randmajority", vec!["--H", "5"]),
    ] {
        let f = dir.path().join(format!("{c}.json"));
        let mut args = vec!["construct-eval", "--construction", c, "--n", "50", "--save-model", p(&f)];
        args.extend(extra);
        let r = rh(&args);
        assert!(r.code == EXIT_OK || r.code == EXIT_OUT_OF_BAND, "{c}: {}", r.err);
        let text = std::fs::read_to_string(&f).unwrap();
        let doc = ModelDocument::from_json(&text).unwrap();
        assert_eq!(doc.to_json(), text, "{c}");
        assert!(RunManifest::path_for(&f).exists());
        let ok = match c {
            "fact1" | "randmajority" => doc.to_heads().is_ok(),
            "fact3" => doc.to_biased().is_ok(),
            "majority2layer" => doc.to_two_layer().is_ok(),
            _ => doc.to_mode_mlp().is_ok(),
        };
        assert!(ok, "{c}");
    }
}

#[test]
fn u_measure_output_is_odd() {
    let r = rh(&["u-measure", "--d-list", "4,16", "--lmax", "21", "--grid", "41"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let rows: Vec<Vec<f64>> =
        r.out.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 41);
    for k in 0..41 {
        for c in 2..4 {
            assert!((rows[k][c] + rows[40 - k][c]).abs() <= 1e-10);
        }
    }
    assert_eq!(rh(&["u-measure", "--grid", "0"]).code, EXIT_INVALID);
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let f = dir.join("cfg.json");
    std::fs::write(&f, body).unwrap();
    f
}

#[test]
fn train_writes_report_curve_and_manifest() {
    let dir = tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"d": 4, "r": 4, "n_points": 3, "steps": 40, "batch": 8, "log_every": 10, "eval_samples": 50, "monitor_batch": 16, "schedule": {"kind": "constant"}}"#,
    );
    let out = dir.path().join("run");
    let r = rh(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!(r.out.starts_with("final_mse,stderr\n"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["steps"], 40);
    assert_eq!(report["loss_curve"].as_array().unwrap().len(), 5);
    let curve = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(curve.lines().next().unwrap(), "step,loss");
    assert_eq!(curve.lines().count(), 6);
    let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.outputs.len(), 2);

    let again = dir.path().join("again");
    assert_eq!(rh(&["train", "--config", p(&cfg), "--out", p(&again)]).code, EXIT_OK);
    assert_eq!(std::fs::read(out.join("loss.csv")).unwrap(), std::fs::read(again.join("loss.csv")).unwrap());
}

#[test]
fn train_with_zero_learning_rate_is_flat() {
    let dir = tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"d": 4, "r": 2, "heads": 2, "n_points": 3, "steps": 30, "batch": 4, "lr": 0.0, "schedule": {"kind": "constant"}, "log_every": 10, "eval_samples": 20, "monitor_batch": 8}"#,
    );
    let out = dir.path().join("run");
    assert_eq!(rh(&["train", "--config", p(&cfg), "--out", p(&out)]).code, EXIT_OK);
    let losses: Vec<String> = std::fs::read_to_string(out.join("loss.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().to_string())
        .collect();
    assert!(losses.iter().all(|l| *l == losses[0]));
}

#[test]
fn train_rejects_malformed_config() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path(), "{\"d\": 4,\n \"r\": }");
    let r = rh(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("x"))]);
    assert_eq!(r.code, EXIT_INVALID);
    assert!(r.err.contains("line 2"), "{}", r.err);
    let cfg = write_config(dir.path(), r#"{"d": 4, "r": 8}"#);
    assert_eq!(rh(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("x"))]).code, EXIT_INVALID);
    assert_eq!(rh(&["train", "--config", "/nonexistent/cfg.json", "--out", p(dir.path())]).code, EXIT_INVALID);
}

#[test]
fn train_divergence_exit_code() {
    let dir = tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"d": 6, "r": 2, "heads": 2, "layers": 2, "n_points": 3, "steps": 200, "batch": 16, "lr": 1e4, "rmsnorm": false, "init_scale": 3.0, "optimizer": {"kind": "sgd"}, "schedule": {"kind": "constant"}, "log_every": 10, "monitor_batch": 32, "eval_samples": 20}"#,
    );
    let out = dir.path().join("run");
    let r = rh(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(r.code, EXIT_DIVERGED, "{} {}", r.out, r.err);
    assert!(r.out.starts_with("diverged at step"));
    assert!(out.join("manifest.json").exists() && out.join("report.json").exists());
}

#[test]
fn binary_help_and_version() {
    let bin = env!("CARGO_BIN_EXE_rankheads");
    let o = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("construct-eval"));
    let o = Command::new(bin).arg("--version").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let o = Command::new(bin).args(["spectra"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn shipped_configs_parse() {
    use rankheads::trainer::TrainConfig;
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    for (name, r, heads) in [("full_rank_farthest.json", 16, 1), ("low_rank_farthest.json", 2, 8)] {
        let cfg: TrainConfig = serde_json::from_str(&std::fs::read_to_string(dir.join(name)).unwrap()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg, TrainConfig { r, heads, ..Default::default() }, "{name}");
    }
}
