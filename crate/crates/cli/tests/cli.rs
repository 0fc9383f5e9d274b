use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use topoflow::config::RunConfig;

const TINY: &str = "\
seed = 3
terrain.archetype = basin_ridge
grid.height = 8
grid.width = 16
grid.patch = 2
grid.sector_cols = 2
grid.sector_rows = 2
data.count = 12
data.horizons = 12, 24
model.d = 8
model.layers = 1
model.heads = 2
model.mlp = 16
train.batch = 2
train.warmup = 2
train.total_steps = 6
train.val_interval = 2
ablate.seeds = 0
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_topoflow"));
    c.env("TOPOFLOW_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn topoflow")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert_eq!(
        code(&out),
        0,
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

struct Fixture {
    tmp: TempDir,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = TempDir::new().unwrap();
        let config = tmp.path().join("tiny.conf");
        fs::write(&config, TINY).unwrap();
        Fixture { tmp, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.tmp.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    fn cfg(&self) -> String {
        self.config.to_str().unwrap().to_string()
    }

    fn gen(&self, name: &str) -> PathBuf {
        ok(&["--config", &self.cfg(), "--out", &self.s(name), "gen"]);
        self.path(name)
    }
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["dump", "weights"])), 1);
    assert_eq!(code(&run(&["train"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn config_errors_exit_2() {
    let f = Fixture::new();
    let out = f.s("o");
    assert_eq!(code(&run(&["--config", &f.s("missing.conf"), "--out", &out, "gen"])), 2);
    fs::write(f.path("bad.conf"), "model.depth = 3\n").unwrap();
    assert_eq!(code(&run(&["--config", &f.s("bad.conf"), "--out", &out, "gen"])), 2);
    fs::write(f.path("bad.conf"), "model.d\n").unwrap();
    assert_eq!(code(&run(&["--config", &f.s("bad.conf"), "--out", &out, "gen"])), 2);
    assert_eq!(code(&run(&["--set", "model.d", "--out", &out, "gen"])), 2);
    assert_eq!(code(&run(&["--set", "model.heads=3", "--out", &out, "gen"])), 2);
    let threads = bin()
        .env("TOPOFLOW_THREADS", "0")
        .args(["--config", &f.cfg(), "--out", &out, "gen"])
        .output()
        .unwrap();
    assert_eq!(code(&threads), 2);
}

#[test]
fn data_errors_exit_3() {
    let f = Fixture::new();
    let data = f.gen("data");
    let cfg = f.cfg();

    let sample = data.join("samples/00000_in.gfd");
    let mut bytes = fs::read(&sample).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    fs::write(&sample, &bytes).unwrap();
    let out = run(&["--config", &cfg, "--out", &f.s("run"), "train", "--data", data.to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at byte 0"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("00000_in.gfd"));

    let data = f.gen("data2");
    fs::remove_file(data.join("manifest.txt")).unwrap();
    let out = run(&["--config", &cfg, "--out", &f.s("run2"), "train", "--data", data.to_str().unwrap()]);
    assert_eq!(code(&out), 3);

    let out = run(&["--config", &cfg, "--out", &f.s("run3"), "train", "--data", &f.s("nowhere")]);
    assert_eq!(code(&out), 3);
}

#[test]
fn unstable_physics_exits_4() {
    let f = Fixture::new();
    let out = run(&["--config", &f.cfg(), "--set", "physics.max_wind=50", "--out", &f.s("o"), "gen"]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("CFL"));
}

#[test]
fn gen_is_byte_identical_across_runs() {
    let f = Fixture::new();
    let a = f.gen("a");
    let b = bin()
        .env("TOPOFLOW_THREADS", "3")
        .args(["--config", &f.cfg(), "--out", &f.s("b"), "gen"])
        .output()
        .unwrap();
    assert_eq!(code(&b), 0);
    let b = f.path("b");
    let fa = files(&a);
    assert_eq!(fa, files(&b));
    assert!(fa.contains(&PathBuf::from("manifest.txt")));
    assert!(fa.contains(&PathBuf::from("config.txt")));
    for p in &fa {
        assert_eq!(fs::read(a.join(p)).unwrap(), fs::read(b.join(p)).unwrap(), "{}", p.display());
    }
    let c = f.path("c");
    ok(&["--config", &f.cfg(), "--seed", "4", "--out", c.to_str().unwrap(), "gen"]);
    assert_ne!(
        fs::read(a.join("samples/00000_in.gfd")).unwrap(),
        fs::read(c.join("samples/00000_in.gfd")).unwrap()
    );
}

#[test]
fn dump_perm_east_wind_orders_west_to_east() {
    let f = Fixture::new();
    let out = ok(&["--config", &f.cfg(), "--out", &f.s("d"), "dump", "perm", "--wind", "1,0"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    // 4x8 patches in 2x2 sectors.
    assert_eq!(rows.len(), 8);
    for (s, line) in rows.iter().enumerate() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(cols[0], s.to_string());
        assert_eq!(cols[1].parse::<f64>().unwrap(), 0.0);
        let base = 4 * s;
        let want: Vec<String> = [0, 2, 1, 3].iter().map(|i| (base + i).to_string()).collect();
        assert_eq!(cols[2], want.join(","));
    }
    assert_eq!(fs::read_to_string(f.path("d/perm.txt")).unwrap(), text);

    let out = ok(&["--config", &f.cfg(), "--out", &f.s("w"), "dump", "perm", "--wind", "-1,0"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let first = text.lines().find(|l| !l.starts_with('#')).unwrap();
    assert!(first.ends_with(" 1,3,0,2"), "{first}");
}

#[test]
fn dump_bias_writes_matrix_in_range() {
    let f = Fixture::new();
    let data = f.gen("data");
    ok(&["--config", &f.cfg(), "--out", &f.s("b"), "dump", "bias", "--data", data.to_str().unwrap()]);
    let m = topoflow::gfd::read_grid(f.path("b/bias.gfd")).unwrap();
    assert_eq!((m.spec().height, m.spec().width), (32, 32));
    assert!(m.data().iter().all(|&x| (-10.0..=0.0).contains(&x)));
    assert!(m.data().iter().any(|&x| x < 0.0));
    let text = fs::read_to_string(f.path("b/bias.txt")).unwrap();
    assert!(text.starts_with("alpha = 2\n"), "{text}");
}

fn train(f: &Fixture, data: &Path, out: &str, extra: &[&str]) {
    let cfg = f.cfg();
    let out = f.s(out);
    let mut args = vec!["--config", cfg.as_str(), "--out", out.as_str()];
    args.extend_from_slice(extra);
    args.extend_from_slice(&["train", "--data", data.to_str().unwrap()]);
    ok(&args);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let f = Fixture::new();
    let data = f.gen("data");
    train(&f, &data, "full", &[]);
    train(&f, &data, "split", &["--set", "train.stop_at=3"]);
    let partial = fs::read_to_string(f.path("split/loss_log.txt")).unwrap();
    assert_eq!(partial.lines().filter(|l| !l.starts_with('#') && !l.starts_with("step")).count(), 1);
    let cfg = f.cfg();
    let out = f.s("split");
    ok(&["--config", &cfg, "--out", &out, "train", "--data", data.to_str().unwrap(), "--resume"]);
    for name in ["last.gfd", "best.gfd", "moments_m.gfd", "moments_v.gfd", "loss_log.txt", "state.txt"] {
        assert_eq!(
            fs::read(f.path("full").join(name)).unwrap(),
            fs::read(f.path("split").join(name)).unwrap(),
            "{name}"
        );
    }
    let log = fs::read_to_string(f.path("full/loss_log.txt")).unwrap();
    assert!(log.lines().any(|l| l == "step, train_loss, val_loss, lr_base, alpha"));
}

#[test]
fn eval_writes_report_files() {
    let f = Fixture::new();
    let data = f.gen("data");
    train(&f, &data, "run", &[]);
    let ck = f.s("run/best.gfd");
    let out = ok(&["--config", &f.cfg(), "--out", &f.s("ev"), "eval", "--data", data.to_str().unwrap(), "--checkpoint", &ck]);
    let csv = fs::read_to_string(f.path("ev/report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "channel,horizon,rmse,mae,r,n");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("tracer,12,"));
    assert!(lines[2].starts_with("tracer,24,"));
    let txt = fs::read_to_string(f.path("ev/report.txt")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), txt);

    let ck_side = fs::read_to_string(f.path("run/best.txt")).unwrap();
    assert!(ck_side.contains("model.d = 8"));
}

#[test]
fn ablate_one_seed_two_variants() {
    let f = Fixture::new();
    let data = f.gen("data");
    ok(&[
        "--config",
        &f.cfg(),
        "--set",
        "ablate.variants=baseline,full",
        "--out",
        &f.s("abl"),
        "ablate",
        "--data",
        data.to_str().unwrap(),
        "--no-tiles",
    ]);
    let table = fs::read_to_string(f.path("abl/ablation.txt")).unwrap();
    let body: Vec<&str> = table.lines().skip(1).take_while(|l| !l.is_empty()).collect();
    assert_eq!(body.len(), 2, "{table}");
    assert!(body[0].starts_with("baseline"));
    assert!(body[1].starts_with("full"));
    let csv = fs::read_to_string(f.path("abl/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(!f.path("abl/tiles.csv").exists());
}

#[test]
fn ablate_tile_sweep_table() {
    let f = Fixture::new();
    let data = f.gen("data");
    ok(&[
        "--config",
        &f.cfg(),
        "--set",
        "ablate.variants=wind",
        "--set",
        "ablate.tiles=global,2x2",
        "--out",
        &f.s("abl"),
        "ablate",
        "--data",
        data.to_str().unwrap(),
    ]);
    let csv = fs::read_to_string(f.path("abl/tiles.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "strategy,tiles,loss,delta");
    assert!(lines[1].starts_with("global,global,") && lines[1].ends_with(",+0.00%"));
    assert!(lines[2].starts_with("tiled,2x2,"));
}

#[test]
fn resolved_config_is_echoed() {
    let f = Fixture::new();
    let data = f.gen("data");
    train(&f, &data, "run", &["--elev-bias=false", "--set", "model.dropout=0"]);
    ok(&["--config", &f.cfg(), "--out", &f.s("d"), "dump", "perm", "--wind", "0,1"]);

    let mut want = RunConfig::from_text(TINY).unwrap();
    assert_eq!(RunConfig::from_text(&fs::read_to_string(data.join("config.txt")).unwrap()).unwrap(), want);
    assert_eq!(RunConfig::from_text(&fs::read_to_string(f.path("d/config.txt")).unwrap()).unwrap(), want);
    want.model.elev_bias = false;
    want.model.dropout = 0.0;
    assert_eq!(RunConfig::from_text(&fs::read_to_string(f.path("run/config.txt")).unwrap()).unwrap(), want);
}
