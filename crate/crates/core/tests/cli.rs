use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rcflow::io::{load_trajectory, save_trajectory};
use rcflow::trajectory::Trajectory;
use tempfile::TempDir;

const SMOKE_CONFIG: &str = r#"{
  "lag_steps": 5, "batch_size": 32,
  "pretrain_epochs": 1, "gmm_init_epochs": 1, "joint_epochs": 1,
  "flow": {"n_blocks": 2, "hidden_widths": [8]},
  "gmm": {"k": 8, "hidden_widths": [8]},
  "bridge": {"m": 3, "k_s": 4}
}"#;

fn rcflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcflow"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn assert_ok(out: &Output) {
    assert_eq!(code(out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        Workspace {
            dir: TempDir::new().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let path = self.path(name);
        fs::write(&path, text).unwrap();
        path
    }

    fn simulate(&self, name: &str, frames: usize) -> PathBuf {
        self.simulate_system("doublewell", name, frames)
    }

    fn simulate_system(&self, system: &str, name: &str, frames: usize) -> PathBuf {
        let cfg = self.write("sim.json", "{}");
        let out = self.path(name);
        let frames = frames.to_string();
        assert_ok(&rcflow(&[
            "simulate", "--system", system, "--config", p(&cfg), "--out", p(&out), "--frames", &frames,
        ]));
        out
    }

    fn train_smoke(&self, data: &Path, ckpt: &str) -> PathBuf {
        let cfg = self.write("smoke.json", SMOKE_CONFIG);
        let out = self.path(ckpt);
        assert_ok(&rcflow(&["train", "--data", p(data), "--config", p(&cfg), "--out", p(&out)]));
        out
    }
}

#[test]
fn simulate_frame_override_sets_row_count() {
    let ws = Workspace::new();
    let out = ws.simulate("dw.csv", 1000);
    let t = load_trajectory(&out).unwrap();
    assert_eq!(t.frames().dim(), (1000, 2));
    assert!((t.frame_dt() - 0.01).abs() < 1e-15);
}

#[test]
fn simulate_is_deterministic_given_seed() {
    let ws = Workspace::new();
    let cfg = ws.write("sim.json", "{}");
    let run = |name: &str, seed: &str| {
        let out = ws.path(name);
        assert_ok(&rcflow(&[
            "simulate", "--system", "mueller", "--config", p(&cfg), "--out", p(&out), "--frames", "200", "--seed", seed,
        ]));
        fs::read(out).unwrap()
    };
    assert_eq!(run("a.rct", "7"), run("b.rct", "7"));
    assert_ne!(run("a.rct", "7"), run("c.rct", "8"));
}

#[test]
fn configuration_errors_exit_with_code_2() {
    let ws = Workspace::new();
    let cfg = ws.write("sim.json", "{}");
    let out = ws.path("x.csv");
    let unknown = rcflow(&["simulate", "--system", "nowhere", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&unknown), 2);
    let missing = ws.path("missing.json");
    let no_file = rcflow(&["simulate", "--system", "doublewell", "--config", p(&missing), "--out", p(&out)]);
    assert_eq!(code(&no_file), 2);
    let bad_field = ws.write("bad.json", r#"{"frames": 3}"#);
    let rejected = rcflow(&["simulate", "--system", "doublewell", "--config", p(&bad_field), "--out", p(&out)]);
    assert_eq!(code(&rejected), 2);
    let usage = rcflow(&["simulate", "--system", "doublewell"]);
    assert_eq!(code(&usage), 2);
    assert!(!out.exists());
}

#[test]
fn lag_longer_than_a_trajectory_exits_with_code_2() {
    let ws = Workspace::new();
    let data = ws.simulate("dw.csv", 4);
    let cfg = ws.write("smoke.json", SMOKE_CONFIG);
    let out = ws.path("ck.json");
    let r = rcflow(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&r), 2);
}

#[test]
fn nested_unknown_training_field_exits_with_code_2() {
    let ws = Workspace::new();
    let data = ws.simulate("dw.csv", 200);
    let cfg = ws.write("bad.json", r#"{"flow": {"n_blocks": 2, "depth": 3}}"#);
    let out = ws.path("ck.json");
    let r = rcflow(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&r), 2);
    assert!(!out.exists());
}

#[test]
fn divergence_exits_with_code_3_and_dumps_state() {
    let ws = Workspace::new();
    let data = ws.simulate("dw.csv", 100);
    let cfg = ws.write(
        "div.json",
        &SMOKE_CONFIG.replacen('{', r#"{"divergence_threshold": 1e-300,"#, 1),
    );
    let out = ws.path("ck.json");
    let r = rcflow(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&r), 3, "stderr: {}", String::from_utf8_lossy(&r.stderr));
    assert!(ws.path("ck.diverged.json").exists());
}

#[test]
fn smoke_training_finishes_quickly_and_writes_loss_table() {
    let ws = Workspace::new();
    let data = ws.simulate("dw.csv", 100);
    let start = Instant::now();
    let ckpt = ws.train_smoke(&data, "ck.json");
    assert!(start.elapsed() < Duration::from_secs(60));
    let table = fs::read_to_string(ws.path("ck.loss.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "epoch,phase,lr,loss_kin,loss_eq,loss_total");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("1,pretrain,"));
    assert!(lines[1].contains(",nan,"));
    assert!(lines[3].starts_with("3,joint,"));
    assert!(ckpt.exists());
}

#[test]
fn resume_continues_epoch_numbering() {
    let ws = Workspace::new();
    let data = ws.simulate("dw.csv", 100);
    let first = ws.train_smoke(&data, "ck.json");
    let more = ws.write("more.json", &SMOKE_CONFIG.replace(r#""joint_epochs": 1"#, r#""joint_epochs": 3"#));
    let out = ws.path("ck2.json");
    assert_ok(&rcflow(&[
        "train", "--data", p(&data), "--config", p(&more), "--out", p(&out), "--resume", p(&first),
    ]));
    let table = fs::read_to_string(ws.path("ck2.loss.csv")).unwrap();
    let epochs: Vec<(String, String)> = table
        .lines()
        .skip(1)
        .map(|l| {
            let mut f = l.split(',');
            (f.next().unwrap().to_string(), f.next().unwrap().to_string())
        })
        .collect();
    let expect: Vec<(String, String)> = [("1", "pretrain"), ("2", "gmm_init"), ("3", "joint"), ("4", "joint"), ("5", "joint")]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
    assert_eq!(epochs, expect);
    let old = fs::read_to_string(ws.path("ck.loss.csv")).unwrap();
    assert!(table.starts_with(&old));
}

#[test]
fn training_is_deterministic_given_seed() {
    let ws = Workspace::new();
    let data = ws.simulate("dw.csv", 100);
    let a = fs::read(ws.train_smoke(&data, "a.json")).unwrap();
    let b = fs::read(ws.train_smoke(&data, "b.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_round_trips_byte_identically() {
    let ws = Workspace::new();
    let data = ws.simulate("dw.csv", 100);
    let ckpt = ws.train_smoke(&data, "ck.json");
    let loaded: rcflow::training::Checkpoint = rcflow::io::load_json(&ckpt).unwrap();
    let again = ws.path("again.json");
    rcflow::io::save_json(&again, &loaded).unwrap();
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn analysis_modes_write_expected_tables() {
    let ws = Workspace::new();
    let data = ws.simulate("dw.csv", 100);
    let ckpt = ws.train_smoke(&data, "ck.json");

    let proj = ws.path("z.csv");
    assert_ok(&rcflow(&["analyze", "--ckpt", p(&ckpt), "--mode", "project", "--data", p(&data), "--out", p(&proj)]));
    assert_eq!(load_trajectory(&proj).unwrap().frames().dim(), (100, 1));

    let surf = ws.path("surface.csv");
    assert_ok(&rcflow(&[
        "analyze", "--ckpt", p(&ckpt), "--mode", "surface", "--resolution", "17", "--out", p(&surf),
    ]));
    let text = fs::read_to_string(&surf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "z0,V");
    assert_eq!(text.lines().count(), 18);

    let level = ws.path("level.csv");
    assert_ok(&rcflow(&[
        "analyze", "--ckpt", p(&ckpt), "--mode", "levelset", "--resolution", "9", "--out", p(&level),
    ]));
    let text = fs::read_to_string(&level).unwrap();
    assert_eq!(text.lines().next().unwrap(), "z,x0,x1");
    assert_eq!(text.lines().count(), 10);

    let its = ws.path("its.csv");
    assert_ok(&rcflow(&[
        "analyze", "--ckpt", p(&ckpt), "--mode", "its", "--data", p(&data), "--frames", "2000", "--states", "5",
        "--lags", "1,2,5", "--timescales", "2", "--out", p(&its),
    ]));
    let text = fs::read_to_string(&its).unwrap();
    assert_eq!(text.lines().next().unwrap(), "lag,t1,t2");
    assert_eq!(text.lines().count(), 4);
    assert!(ws.path("its.full.csv").exists());
}

#[test]
fn levelset_requires_a_one_dimensional_coordinate() {
    let ws = Workspace::new();
    let data = ws.simulate_system("swissroll", "roll.csv", 100);
    let cfg = ws.write("d2.json", &SMOKE_CONFIG.replacen('{', r#"{"rc_dim": 2,"#, 1));
    let ckpt = ws.path("ck.json");
    let r = rcflow(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&ckpt)]);
    assert_ok(&r);
    let out = ws.path("level.csv");
    let r = rcflow(&["analyze", "--ckpt", p(&ckpt), "--mode", "levelset", "--out", p(&out)]);
    assert_eq!(code(&r), 2);
}

#[test]
fn sampling_handles_empty_requests_and_reconstruction() {
    let ws = Workspace::new();
    let data = ws.simulate("dw.csv", 100);
    let ckpt = ws.train_smoke(&data, "ck.json");

    let empty = ws.path("empty.csv");
    assert_ok(&rcflow(&["sample", "--ckpt", p(&ckpt), "--mode", "equilibrium", "--n", "0", "--out", p(&empty)]));
    assert_eq!(fs::read_to_string(&empty).unwrap().lines().count(), 1);

    let eq = ws.path("eq.csv");
    let run = |seed: &str| {
        assert_ok(&rcflow(&[
            "sample", "--ckpt", p(&ckpt), "--mode", "equilibrium", "--n", "50", "--seed", seed, "--out", p(&eq),
        ]));
        fs::read(&eq).unwrap()
    };
    let a = run("3");
    assert_eq!(a, run("3"));
    assert_eq!(load_trajectory(&eq).unwrap().frames().dim(), (50, 2));

    let zv = ws.path("zv.csv");
    let t = Trajectory::new(Array2::from_shape_vec((3, 2), vec![0.0, 0.0, 0.5, -0.5, 1.0, 1.0]).unwrap(), 1.0).unwrap();
    save_trajectory(&zv, &t).unwrap();
    let rec = ws.path("rec.csv");
    assert_ok(&rcflow(&[
        "sample", "--ckpt", p(&ckpt), "--mode", "reconstruct", "--input", p(&zv), "--out", p(&rec),
    ]));
    assert_eq!(load_trajectory(&rec).unwrap().frames().dim(), (3, 2));

    let wide = ws.path("wide.csv");
    let t = Trajectory::new(Array2::zeros((2, 3)), 1.0).unwrap();
    save_trajectory(&wide, &t).unwrap();
    let r = rcflow(&["sample", "--ckpt", p(&ckpt), "--mode", "reconstruct", "--input", p(&wide), "--out", p(&rec)]);
    assert_eq!(code(&r), 2);
}

#[test]
fn malformed_trajectory_reports_its_position() {
    let ws = Workspace::new();
    let cfg = ws.write("smoke.json", SMOKE_CONFIG);
    let data = ws.write("bad.csv", "t,c0,c1\n0,1,2\n0.01,1,nan\n");
    let out = ws.path("ck.json");
    let r = rcflow(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&out)]);
    assert_ne!(code(&r), 0);
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("line 3"), "stderr: {err}");
}
