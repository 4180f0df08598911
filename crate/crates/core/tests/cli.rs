use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use c2former::analysis::count_flops;
use c2former::io::{read_tensor, write_tensor, RunConfig};
use c2former::tensor::Tensor;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_c2former"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("c.json"), config).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn inputs(&self, n: usize, c: usize, h: usize, w: usize) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        write_tensor(self.path("a.c2tf"), &Tensor::uniform(&[n, c, h, w], -1.0, 1.0, &mut rng)).unwrap();
        write_tensor(self.path("b.c2tf"), &Tensor::uniform(&[n, c, h, w], -1.0, 1.0, &mut rng)).unwrap();
        let out = bin(&["init-params", "--config", s(&self.path("c.json")), "--out", s(&self.path("p.c2tf"))]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }

    fn block_args<'a>(&'a self, paths: &'a [PathBuf; 4]) -> Vec<&'a str> {
        vec![
            "--config",
            s(&paths[0]),
            "--rgb",
            s(&paths[1]),
            "--ir",
            s(&paths[2]),
            "--params",
            s(&paths[3]),
        ]
    }

    fn paths(&self) -> [PathBuf; 4] {
        ["c.json", "a.c2tf", "b.c2tf", "p.c2tf"].map(|n| self.path(n))
    }
}

const CFG: &str = r#"{"channels":3,"height":7,"width":8,"stride":2,"seed":4}"#;

#[test]
fn forward_is_deterministic_and_shape_preserving() {
    let ws = Workspace::new(CFG);
    ws.inputs(2, 3, 7, 8);
    let paths = ws.paths();
    let mut runs = Vec::new();
    for k in 0..2 {
        let (o1, o2) = (ws.path(&format!("o1_{k}")), ws.path(&format!("o2_{k}")));
        let mut args = vec!["forward"];
        args.extend(ws.block_args(&paths));
        args.extend(["--out-rgb", s(&o1), "--out-ir", s(&o2)]);
        let out = bin(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        runs.push((fs::read(&o1).unwrap(), fs::read(&o2).unwrap()));
        assert_eq!(read_tensor(&o1).unwrap().dims(), [2, 3, 7, 8]);
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn attn_map_has_sampled_dimensions() {
    let ws = Workspace::new(CFG);
    ws.inputs(1, 3, 7, 8);
    let paths = ws.paths();
    let pgm = ws.path("m.pgm");
    for (q, map) in [("0,0", "rgb"), ("2,3", "ir"), ("1,2", "rgb")] {
        let mut args = vec!["attn-map"];
        args.extend(ws.block_args(&paths));
        args.extend(["--query", q, "--map", map, "--out", s(&pgm)]);
        let out = bin(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let bytes = fs::read(&pgm).unwrap();
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        assert_eq!(bytes.len(), 11 + 12);
    }
    let mut args = vec!["attn-map"];
    args.extend(ws.block_args(&paths));
    args.extend(["--query", "3,0", "--out", s(&pgm)]);
    assert_eq!(bin(&args).status.code(), Some(2));
}

#[test]
fn flops_total_matches_library() {
    let cfg_text = r#"{"channels":256,"height":64,"width":64}"#;
    let ws = Workspace::new(cfg_text);
    let out = bin(&["flops", "--config", s(&ws.path("c.json"))]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let total: u64 = text
        .lines()
        .find_map(|l| l.strip_prefix("total,"))
        .unwrap()
        .parse()
        .unwrap();
    let cfg = RunConfig::from_json(cfg_text).unwrap().block_config();
    assert_eq!(total, count_flops(&cfg).unwrap().total());
}

#[test]
fn gradcheck_default_exits_zero() {
    let ws = Workspace::new(r#"{"channels":4,"height":6,"width":6,"stride":2,"seed":7}"#);
    let out = bin(&["gradcheck", "--config", s(&ws.path("c.json"))]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(text.contains("passed,true"));
}

#[test]
fn calib_sim_reports() {
    let ws = Workspace::new(
        r#"{"channels":16,"height":24,"width":24,"stride":1,"shift":[3,2],"smoothing":2}"#,
    );
    let csv = ws.path("q.csv");
    let out = bin(&["calib-sim", "--config", s(&ws.path("c.json")), "--per-query", s(&csv)]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("queries,radius,hit_rate,mean_error,low_confidence\n462,1,"));
    assert_eq!(fs::read_to_string(csv).unwrap().lines().count(), 463);
}

#[test]
fn exit_codes() {
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(bin(&[]).status.code(), Some(2));

    let ws = Workspace::new(r#"{"channels":3,"height":7,"width":8,"typo":1}"#);
    let out = bin(&["flops", "--config", s(&ws.path("c.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("typo"));

    let ws = Workspace::new(CFG);
    ws.inputs(1, 3, 7, 8);
    fs::write(ws.path("a.c2tf"), b"XXXX\x01\x01\0\0\0\0\0\0").unwrap();
    let paths = ws.paths();
    let mut args = vec!["forward"];
    args.extend(ws.block_args(&paths));
    let (o1, o2) = (ws.path("o1"), ws.path("o2"));
    args.extend(["--out-rgb", s(&o1), "--out-ir", s(&o2)]);
    let out = bin(&args);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn init_params_is_seed_deterministic() {
    let a = Workspace::new(CFG);
    let b = Workspace::new(CFG);
    for ws in [&a, &b] {
        let out = bin(&["init-params", "--config", s(&ws.path("c.json")), "--out", s(&ws.path("p"))]);
        assert!(out.status.success());
    }
    assert_eq!(fs::read(a.path("p")).unwrap(), fs::read(b.path("p")).unwrap());
}
