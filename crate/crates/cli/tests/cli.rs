use modalid::pipeline::{files, PipelineConfig};
use std::path::Path;
use std::process::{Command, Output};

fn small(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.seed = 11;
    cfg.plate.n_flex = 3;
    cfg.experiment.sample_rate = 2048.0;
    cfg.experiment.bin_spacing_hz = 2.0;
    cfg.experiment.f_max_hz = 300.0;
    cfg.experiment.realizations = 2;
    cfg.experiment.periods = 3;
    cfg.identify.n_m = 7;
    cfg.identify.i_gn = 30;
    cfg.identify.i_gn_mod = 30;
    cfg.interp.grid_points = 9;
    cfg.paths.out = dir.to_path_buf();
    cfg
}

fn write_config(dir: &Path, cfg: &PipelineConfig) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_text()).unwrap();
    path
}

fn modalid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modalid")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by a signal")
}

#[test]
fn config_prints_the_effective_configuration() {
    let out = modalid(&["config", "--seed", "99"]);
    assert_eq!(code(&out), 0);
    let cfg = PipelineConfig::from_text(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.seed, 99);
    let mut expected = PipelineConfig::default();
    expected.seed = 99;
    assert_eq!(cfg, expected);
}

#[test]
fn validation_failures_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[plate]\nsnr = 3\n").unwrap();
    assert_eq!(code(&modalid(&["config", "--config", bad.to_str().unwrap()])), 2);

    let missing = tmp.path().join("nope.toml");
    assert_eq!(code(&modalid(&["config", "--config", missing.to_str().unwrap()])), 2);

    let frf = tmp.path().join("nope.txt");
    let out = tmp.path().to_str().unwrap();
    assert_eq!(code(&modalid(&["identify", frf.to_str().unwrap(), "--out", out])), 2);

    assert_eq!(code(&modalid(&["synth", "--stage", "lm", "--out", out])), 2);
    assert_eq!(code(&modalid(&["identify", "--stage", "later", "--out", out])), 2);
    assert_eq!(code(&modalid(&["eval", "--out", out])), 2);
}

#[test]
fn non_convergence_is_soft_unless_strict() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(tmp.path());
    let config = write_config(tmp.path(), &cfg);
    let c = config.to_str().unwrap();
    assert_eq!(code(&modalid(&["synth", "--config", c])), 0);
    assert!(tmp.path().join(files::FRF).is_file());

    // one LM iteration cannot converge
    cfg.identify.i_gn = 1;
    let config = write_config(tmp.path(), &cfg);
    let c = config.to_str().unwrap();
    assert_eq!(code(&modalid(&["identify", "--config", c])), 0);
    assert!(tmp.path().join(files::MODEL).is_file());
    assert_eq!(code(&modalid(&["identify", "--config", c, "--strict"])), 4);
}

#[test]
fn full_run_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(tmp.path());
    let config = write_config(tmp.path(), &cfg);
    let c = config.to_str().unwrap();
    let out = modalid(&["run", "--config", c]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let model = std::fs::read(tmp.path().join(files::MODEL)).unwrap();
    assert!(tmp.path().join(files::MODEL_PD).is_file());

    assert_eq!(code(&modalid(&["identify", "--config", c, "--stage", "transform"])), 0);
    assert_eq!(std::fs::read(tmp.path().join(files::MODEL)).unwrap(), model);

    let traj = tmp.path().join("traj.txt");
    std::fs::write(&traj, "t rho_x rho_y\n0 0 0\n0.5 0.1 -0.1\n").unwrap();
    let pd = tmp.path().join(files::MODEL_PD);
    assert_eq!(
        code(&modalid(&[
            "eval",
            "--config",
            c,
            pd.to_str().unwrap(),
            traj.to_str().unwrap()
        ])),
        0
    );
    assert!(tmp.path().join(files::SHAPES).is_file());
}
