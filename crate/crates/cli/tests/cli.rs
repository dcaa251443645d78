use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bayes_ssl::byol::TwinArch;
use bayes_ssl::config::{DataSource, RunConfig};
use bayes_ssl::data::{save_dataset, ClusterSpec, ClusterWorld, Split};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bayes-ssl"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.arch = TwinArch {
        input_dim: 5,
        encoder_hidden: vec![6],
        embed_dim: 4,
        projector_hidden: 6,
        proj_dim: 3,
        predictor_hidden: 6,
        ..TwinArch::default()
    };
    cfg.data = DataSource::Clusters {
        spec: ClusterSpec {
            classes: 2,
            input_dim: 5,
            separation: 3.0,
            cluster_std: 0.5,
            seed: 4,
        },
        pretrain_per_class: 30,
        train_per_class: 15,
        test_per_class: 15,
    };
    cfg.pretrain.sampler.lr0 = 1e-3;
    cfg.pretrain.sampler.cycle_len = 5;
    cfg.pretrain.sampler.total_steps = 10;
    cfg.pretrain.batch = 20;
    cfg.finetune.epochs = 2;
    cfg.label_fractions = vec![1.0, 0.5];
    cfg.eval.ood_rows = 20;
    cfg.diag.steps = 1000;
    cfg.diag.burn_in = 50;
    cfg.seeds = vec![0];
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> String {
    let path = dir.join("run.conf");
    fs::write(&path, cfg.to_text()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn show_config_prints_a_parsable_preset() {
    let out = run(&["show-config", "--method", "byol"]);
    assert_eq!(code(&out), 0);
    let cfg = RunConfig::parse(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.method, "byol");
    assert_eq!(code(&run(&["show-config", "--method", "mystery"])), 1);
}

#[test]
fn usage_errors_exit_with_config_code() {
    assert_eq!(code(&run(&["pretrain", "--bogus"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn unknown_config_key_is_rejected_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.conf");
    fs::write(&path, tiny().to_text().replace("lr0 =", "learning_rate =")).unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&["pretrain", "--config", path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    assert!(!out_dir.exists());
}

#[test]
fn missing_artifacts_exit_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), &tiny());
    let out_dir = dir.path().join("empty");
    for cmd in ["finetune", "eval", "ood"] {
        let out = run(&[cmd, "--config", &conf, "--out", out_dir.to_str().unwrap()]);
        assert_eq!(code(&out), 4, "{cmd}");
    }
}

#[test]
fn mismatched_dataset_width_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let world = ClusterWorld::new(ClusterSpec {
        classes: 2,
        input_dim: 3,
        separation: 2.0,
        cluster_std: 1.0,
        seed: 0,
    })
    .unwrap();
    let stem = dir.path().join("narrow");
    save_dataset(&world.sample(5, 0, Split::Train).unwrap(), &stem).unwrap();
    let mut cfg = tiny();
    cfg.data = DataSource::Files {
        pretrain: stem.clone(),
        train: stem.clone(),
        test: stem.clone(),
        ood: stem,
    };
    let conf = write_config(dir.path(), &cfg);
    let out = run(&["pretrain", "--config", &conf, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn runaway_steps_exit_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.pretrain.sampler.lr0 = 1e7;
    let conf = write_config(dir.path(), &cfg);
    let out = run(&["pretrain", "--config", &conf, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged at step"));
}

#[test]
fn staged_and_combined_runs_write_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), &tiny());
    let staged = dir.path().join("staged");
    let combined = dir.path().join("combined");
    let s = staged.to_str().unwrap();
    for cmd in ["pretrain", "finetune", "eval", "ood"] {
        let out = run(&[cmd, "--config", &conf, "--out", s, "--seed", "3,5"]);
        assert_eq!(code(&out), 0, "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = run(&["run", "--config", &conf, "--out", combined.to_str().unwrap(), "--seed", "3,5"]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("bbyol_ens\t0.5\t2\tnll"));
    for rel in [
        "config.txt",
        "eval.tsv",
        "ood.tsv",
        "seed-3/ensemble.ckpt",
        "seed-5/loss_log.tsv",
        "seed-5/frac-0.5/member-1.ckpt",
        "seed-3/hist-bbyol_ens-2-in.tsv",
    ] {
        assert_eq!(fs::read(staged.join(rel)).unwrap(), fs::read(combined.join(rel)).unwrap(), "{rel}");
    }
    let log = fs::read_to_string(staged.join("seed-3/loss_log.tsv")).unwrap();
    assert_eq!(log.lines().nth(1), Some("step\tlr\tloss\tnoise_active"));
    assert_eq!(log.lines().count(), 12);
}

#[test]
fn sample_diag_reports_each_seed() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), &tiny());
    let out = run(&["sample-diag", "--config", &conf, "--out", dir.path().to_str().unwrap(), "--seed", "1,2"]);
    assert_eq!(code(&out), 0);
    let text = fs::read_to_string(dir.path().join("diag.tsv")).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert_eq!(text, String::from_utf8(out.stdout).unwrap());
}

#[test]
fn shipped_configs_match_their_presets() {
    use bayes_ssl::config::Method;
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for method in Method::ALL {
        let cfg = RunConfig::load(&root.join(format!("{}.conf", method.name()))).unwrap();
        cfg.validate().unwrap();
        let mut expected = method.apply(&RunConfig::default());
        expected.output_dir = Path::new("out").join(method.name());
        assert_eq!(cfg, expected, "{}", method.name());
    }
}
