use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use timebin_qkd::experiment::config::{ExperimentConfig, Scale};

fn qkdsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qkdsim")).args(args).output().unwrap()
}

/// A short exchange: 16 Cascade frames per block at 30 dB.
fn small_config(dir: &Path, seed: u64) -> PathBuf {
    let mut c = ExperimentConfig::default();
    c.scenario = "cli-test".into();
    c.seed = seed;
    c.blocks = 1;
    c.scale = Scale::Custom;
    c.params.ec_frames_per_pa = 16;
    c.channel.attenuation_db = 30.0;
    c.transport.timeout = 60.0;
    let p = dir.join(format!("cfg-{seed}.toml"));
    std::fs::write(&p, c.to_toml()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_is_a_config_error() {
    let out = qkdsim(&["run", "-c", "/nonexistent/qkdsim.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "seed = 1\nnot_a_field = 3\n").unwrap();
    let out = qkdsim(&["run", "-c", s(&p)]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn invalid_override_is_a_config_error() {
    assert_eq!(qkdsim(&["run", "--attenuation", "-3"]).status.code(), Some(2));
    assert_eq!(qkdsim(&["optimize", "--preset", "no-such-detector"]).status.code(), Some(2));
}

#[test]
fn same_seed_gives_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 5);
    let run = |name: &str| {
        let csv = dir.path().join(name);
        let out = qkdsim(&["run", "-c", s(&cfg), "--csv", s(&csv)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(csv).unwrap()
    };
    let (a, b) = (run("a.csv"), run("b.csv"));
    assert!(a.starts_with(b"block,"));
    assert_eq!(a, b);
}

#[test]
fn report_rerenders_json_and_summarizes_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 6);
    let (json, dump) = (dir.path().join("run.json"), dir.path().join("block.tbqr"));
    let out = qkdsim(&["run", "-c", s(&cfg), "--json", s(&json), "--dump-records", s(&dump)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let text = qkdsim(&["report", s(&json)]);
    assert!(text.status.success());
    assert!(String::from_utf8_lossy(&text.stdout).contains("scenario: cli-test"));
    let csv = qkdsim(&["report", s(&json), "--format", "csv"]);
    assert!(String::from_utf8_lossy(&csv.stdout).starts_with("block,"));

    let summary = qkdsim(&["report", s(&dump)]);
    assert!(summary.status.success());
    let summary = String::from_utf8_lossy(&summary.stdout);
    assert!(summary.contains("params hash:") && summary.contains("detector Z:"), "{summary}");
}

#[test]
fn report_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.json");
    std::fs::write(&p, "{\"hello\": 1}").unwrap();
    assert_eq!(qkdsim(&["report", s(&p)]).status.code(), Some(2));
}

#[test]
fn sweep_lists_every_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 7);
    let out = qkdsim(&["sweep", "-c", s(&cfg), "--points", "30,32", "--format", "csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8_lossy(&out.stdout);
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(csv.lines().nth(1).unwrap().starts_with("30,"));
}

#[test]
fn optimize_prints_parameters() {
    let out = qkdsim(&["optimize", "--attenuation", "38", "--free", "mu1,mu2"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("mu1 = ") && text.contains("predicted SKR"), "{text}");
}

#[test]
fn mismatched_peers_abort_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (small_config(dir.path(), 8), small_config(dir.path(), 9));
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let spawn = |role: &str, cfg: &Path, flag: &str| {
        Command::new(env!("CARGO_BIN_EXE_qkdsim"))
            .args([role, "-c", s(cfg), flag, &addr])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap()
    };
    let alice = spawn("alice", &a, "--listen");
    let bob = spawn("bob", &b, "--connect");
    assert_eq!(alice.wait_with_output().unwrap().status.code(), Some(3));
    assert_eq!(bob.wait_with_output().unwrap().status.code(), Some(3));
}

#[test]
fn roles_need_exactly_one_endpoint() {
    assert_ne!(qkdsim(&["alice"]).status.code(), Some(0));
    assert_ne!(qkdsim(&["bob", "--listen", "a:1", "--connect", "b:2"]).status.code(), Some(0));
}
