use std::path::Path;
use std::process::Command;

use physs_cli::config::ExperimentConfig;
use physs_cli::data::{load_csv, Schema};
use physs_cli::CliError;

const SMALL: &str = r#"
[model]
mode = "full"
residual = "monotonic"
d_t = 2
probit_scale = 0.1
latents = [{ temporal = { family = "matern52", lengthscale = 1.0 } }]
noise = { observation = [0.04] }

[data]
simulator = "monotonic"
params = { train_points = 40, test_points = 50 }

[data.collocation]
time = [0.0, 10.0, 30]

[train]
epochs = 6
eval_every = 3
natgrad = { warmup_epochs = 0, warmup_lr = 0.5, lr = 0.5 }
"#;

fn physs(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_physs")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn config_rejects_unknown_keys_and_families() {
    let extra = SMALL.replace("[train]", "[train]\nlearning_rate = 1.0");
    assert!(matches!(ExperimentConfig::from_toml(&extra), Err(CliError::Config(_))));
    let family = SMALL.replace("matern52", "matern92");
    assert!(matches!(ExperimentConfig::from_toml(&family), Err(CliError::Config(_))));
    let residual = SMALL.replace("residual = \"monotonic\"", "residual = \"heat\"");
    assert!(matches!(ExperimentConfig::from_toml(&residual), Err(CliError::Config(_))));
    let both = SMALL.replace(
        "simulator = \"monotonic\"",
        "simulator = \"monotonic\"\ncsv = { train = \"a.csv\", test = \"b.csv\", spatial_dims = 0 }",
    );
    assert!(matches!(ExperimentConfig::from_toml(&both), Err(CliError::Config(_))));
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = ExperimentConfig::from_toml(SMALL).unwrap();
    let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(cfg, again);
}

#[test]
fn bundled_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert_eq!(n, 6);
}

#[test]
fn simulate_fit_predict_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let out = physs(&["simulate", "pendulum", "--out", data.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let train = load_csv(data.join("train.csv"), Schema { spatial_dims: 0 }).unwrap();
    assert!(train.num_observed() > 0);

    let cfg = write_config(root, SMALL);
    let run = root.join("run");
    let out = physs(&["fit", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(printed, saved);
    let mut keys: Vec<&str> = saved.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["crps", "epochs", "nlpd", "r_squared", "rmse", "wall_seconds"]);
    assert_eq!(saved["epochs"], 6);
    let trace = std::fs::read_to_string(run.join("trace.csv")).unwrap();
    assert!(trace.starts_with("epoch,elbo,ell,rmse,nlpd,seconds\n"));

    let preds = std::fs::read_to_string(run.join("predictions.csv")).unwrap();
    assert!(preds.starts_with("t,y_mean,y_std\n"));
    let grid = root.join("grid.csv");
    std::fs::write(&grid, "t,y\n1.0,\n5.0,\n9.0,\n").unwrap();
    let out = physs(&[
        "predict",
        "--state",
        run.join("state.json").to_str().unwrap(),
        "--grid",
        grid.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let means: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(means.len(), 3);
    assert!(means[0] < means[1] && means[1] < means[2]);

    let truth = root.join("truth.csv");
    let mut t = String::from("t,y\n");
    for line in preds.lines().skip(1) {
        let time: f64 = line.split(',').next().unwrap().parse().unwrap();
        t.push_str(&format!("{time},{}\n", physs_cli::simulate::monotonic_truth(time)));
    }
    std::fs::write(&truth, t).unwrap();
    let out = physs(&[
        "eval",
        "--pred",
        run.join("predictions.csv").to_str().unwrap(),
        "--truth",
        truth.to_str().unwrap(),
        "--spatial-dims",
        "0",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let scored: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let diff = scored["rmse"].as_f64().unwrap() - saved["rmse"].as_f64().unwrap();
    assert!(diff.abs() < 1e-9, "{scored} vs {saved}");
}

#[test]
fn errors_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("[train]", "[train]\nbogus = 1"));
    let out = physs(&["fit", "--config", &cfg]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].is_string() && err["message"].is_string(), "{err}");

    let out = physs(&["simulate", "heat", "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(serde_json::from_slice::<serde_json::Value>(&out.stderr).is_ok());
}

#[test]
fn runs_are_bitwise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        let out = physs(&["fit", "--config", &cfg, "--out", run.to_str().unwrap()]);
        assert!(out.status.success());
        outputs.push((
            std::fs::read(run.join("predictions.csv")).unwrap(),
            std::fs::read(run.join("state.json")).unwrap(),
        ));
    }
    assert!(outputs[0] == outputs[1]);
}
