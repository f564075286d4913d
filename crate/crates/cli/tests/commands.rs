use std::path::Path;
use std::process::{Command, Output};

fn fincast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fincast"))
        .args(args)
        .output()
        .expect("spawn fincast")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const CFG: &str = "\
patch_len = 8
d_model = 16
n_heads = 2
n_layers = 2
n_experts = 4
top_k = 2
expert_hidden = 16
h_out = 8
quantiles = 0.1,0.5,0.9
context_len = 32
batch_size = 4
lr_peak = 3e-3
total_steps = 12
checkpoint_every = 6
seed = 3
";

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("data")).unwrap();
        std::fs::write(dir.path().join("run.cfg"), CFG).unwrap();
        let f = Fixture { dir };
        let out = fincast(&[
            "synth",
            "--kind",
            "regime_ar",
            "--out",
            s(&f.path("data/x.csv")),
            "--channels",
            "2",
            "--param",
            "len=300",
            "--seed",
            "4",
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(f.path("data/x.regimes").exists());
        f
    }

    fn path(&self, rel: &str) -> std::path::PathBuf {
        self.dir.path().join(rel)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let cfg = self.path("run.cfg");
        let data = self.path("data");
        let ckpt = self.path(out);
        let mut args = vec![
            "train",
            "--config",
            s(&cfg),
            "--data",
            s(&data),
            "--out",
            s(&ckpt),
        ];
        args.extend_from_slice(extra);
        fincast(&args)
    }
}

#[test]
fn train_forecast_eval_round() {
    let f = Fixture::new();
    let out = f.train("m.w", &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let dump = String::from_utf8_lossy(&out.stdout);
    assert!(dump.contains("d_model=16"), "{dump}");
    assert!(f.path("m.w").exists() && f.path("m.w.loss.csv").exists());
    let log = std::fs::read_to_string(f.path("m.w.loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 13);

    let ckpt = f.path("m.w");
    let input = f.path("data/x.csv");
    let out = fincast(&[
        "forecast",
        "--ckpt",
        s(&ckpt),
        "--input",
        s(&input),
        "--horizon",
        "20",
        "--quantiles",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("channel,step,point,q10,q50,q90"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 40);
    assert!(rows[19].starts_with("x0,20,"));
    assert!(rows[39].starts_with("x1,20,"));

    let data = f.path("data");
    let report = f.path("eval.csv");
    let out = fincast(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&data),
        "--horizons",
        "4,8",
        "--context",
        "32",
        "--out",
        s(&report),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(report).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert!(rows[0].starts_with("dataset,horizon,model,windows,mse,mae"));
    assert_eq!(rows.len(), 1 + 2 * 3, "{csv}");
    assert!(rows.iter().any(|r| r.starts_with("x,8,naive_last,")));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let f = Fixture::new();
    assert!(f.train("full.w", &[]).status.success());
    assert!(f.train("part.w", &["--stop-after", "5"]).status.success());
    let log = std::fs::read_to_string(f.path("part.w.loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 6);
    assert!(f.train("part.w", &["--resume"]).status.success());
    let a = std::fs::read(f.path("full.w")).unwrap();
    let b = std::fs::read(f.path("part.w")).unwrap();
    assert!(a == b, "resumed weights differ");
}

#[test]
fn ablation_flag_is_recorded() {
    let f = Fixture::new();
    let out = f.train("d.w", &["--ablate", "dense_moe"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("dense_moe=true"));
    let out = f.train("e.w", &["--ablate", "no_such_thing"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn same_seed_same_weights() {
    let f = Fixture::new();
    assert!(f.train("a.w", &["--seed", "9"]).status.success());
    assert!(f.train("b.w", &["--seed", "9"]).status.success());
    assert!(f.train("c.w", &["--seed", "10"]).status.success());
    let read = |n: &str| std::fs::read(f.path(n)).unwrap();
    assert!(read("a.w") == read("b.w"));
    assert!(read("a.w") != read("c.w"));
}

#[test]
fn gradcheck_command_passes() {
    let f = Fixture::new();
    let cfg = f.path("run.cfg");
    let out = fincast(&["gradcheck", "--config", s(&cfg), "--coords", "40"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(text.contains("max_rel_err=") && text.contains("PASS"));
}

#[test]
fn experts_command_reports_groups() {
    let f = Fixture::new();
    assert!(f.train("m.w", &[]).status.success());
    let ckpt = f.path("m.w");
    let out = fincast(&[
        "experts",
        "--ckpt",
        s(&ckpt),
        "--regime-mixture",
        "1",
        "--context",
        "32",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("layer,group,expert,fraction\n"));
    for g in ["all", "0", "1", "2"] {
        assert!(
            text.lines().any(|l| l.starts_with(&format!("1,{g},3,"))),
            "{g}"
        );
    }
}

#[test]
fn exit_codes() {
    let f = Fixture::new();
    assert_eq!(fincast(&["nonsense"]).status.code(), Some(2));
    assert_eq!(fincast(&["train", "--bogus"]).status.code(), Some(2));

    std::fs::write(f.path("bad.cfg"), "d_model = sixteen\n").unwrap();
    let out = f.train("x.w", &[]);
    assert!(out.status.success());
    let cfg = f.path("bad.cfg");
    let out = fincast(&["gradcheck", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(f.path("junk.w"), b"junkjunkjunk").unwrap();
    let junk = f.path("junk.w");
    let input = f.path("data/x.csv");
    let out = fincast(&[
        "forecast",
        "--ckpt",
        s(&junk),
        "--input",
        s(&input),
        "--horizon",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(11));

    let missing = f.path("none.csv");
    let ckpt = f.path("x.w");
    let out = fincast(&[
        "forecast",
        "--ckpt",
        s(&ckpt),
        "--input",
        s(&missing),
        "--horizon",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(1));

    let out = fincast(&[
        "forecast",
        "--ckpt",
        s(&ckpt),
        "--input",
        s(&input),
        "--horizon",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_is_callable_in_process() {
    assert_eq!(
        fincast_cli::run(["fincast", "synth", "--kind", "nope", "--out", "/dev/null"]),
        2
    );
}
