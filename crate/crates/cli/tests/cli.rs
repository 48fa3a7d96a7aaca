//! Command-line runs on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[grid]
n = 64

[dataset.counts]
l = 3
ratio = 2
p = 2

[dataset.augment]
target_total = 0

[dataset]
val_fraction = 0.25

[arch]
n = 64
enc_channels = [1, 4, 8]
dec_channels = [8, 4]
latent = 6

[vae]
epochs = 3
batch = 4
anneal_epochs = 2

[cvae]
epochs = 4
batch = 4
anneal_epochs = 2
latent = 3
encoder_hidden = 8
decoder_hidden = [16, 16, 16, 8]

[audit]
epochs = 2
batch = 4

[surrogate]
epochs = 5
batch = 4

[search]
iterations = 10

[penalty]
iterations = 10

[experiment]
targets = ["3.5:0.3:-15"]
budgets = [1, 2]
seeds = [0, 1, 2]
"#;

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let paths = format!(
            "\n[paths]\ndataset = \"{0}/dataset.csv\"\nvae = \"{0}/vae.ckpt\"\ncvae = \"{0}/cvae.ckpt\"\nsurrogate = \"{0}/surrogate.ckpt\"\nout_dir = \"{0}\"\n",
            dir.path().display()
        );
        fs::write(dir.path().join("run.toml"), format!("{TINY}{paths}")).unwrap();
        Run { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn cmd(&self, args: &[&str]) -> Output {
        let cfg = self.path("run.toml");
        Command::new(env!("CARGO_BIN_EXE_patchdesign"))
            .arg("--config")
            .arg(&cfg)
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.cmd(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn train_all(&self) {
        self.ok(&["dataset"]);
        self.ok(&["train", "vae"]);
        self.ok(&["train", "cvae", "--audit"]);
        self.ok(&["train", "surrogate"]);
    }
}

/// Data rows of a CSV written with a leading `# config_hash=` comment and a header.
fn data_rows(path: &Path) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(
        lines.next().unwrap().starts_with("# config_hash="),
        "{}",
        path.display()
    );
    lines.skip(1).map(str::to_owned).collect()
}

#[test]
fn full_pipeline_outputs() {
    let run = Run::new();
    let out = run.ok(&["dataset"]);
    assert!(out.contains("12 records"), "{out}");
    run.ok(&["train", "vae"]);
    run.ok(&["train", "cvae", "--audit"]);
    run.ok(&["train", "surrogate"]);
    assert_eq!(data_rows(&run.path("vae_history.csv")).len(), 3);
    assert_eq!(data_rows(&run.path("cvae_history.csv")).len(), 4);
    assert_eq!(data_rows(&run.path("surrogate_history.csv")).len(), 5);
    for ck in ["vae.ckpt", "cvae.ckpt", "surrogate.ckpt"] {
        assert!(run.path(ck).exists());
    }

    run.ok(&["design", "--notch", "3.5:0.3:-15", "--curves", "10", "--designs", "20"]);
    let rows = data_rows(&run.path("design_candidates.csv"));
    assert_eq!(rows.len(), 200);
    let scores: Vec<f64> = rows
        .iter()
        .map(|r| r.split(',').nth(4).unwrap().parse().unwrap())
        .collect();
    assert!(scores.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(data_rows(&run.path("design_target_curve.csv")).len(), 64);

    run.ok(&[
        "design",
        "--notch",
        "3.5:0.3:-15",
        "--curves",
        "2",
        "--designs",
        "2",
        "--scorer",
        "oracle",
        "--optimize",
    ]);
    assert_eq!(data_rows(&run.path("design_candidates.csv")).len(), 4);

    run.ok(&["experiment", "--axis", "curves"]);
    // 2 budgets × 2 strategies × 3 seeds
    assert_eq!(data_rows(&run.path("experiment_curves.csv")).len(), 12);
    assert_eq!(data_rows(&run.path("experiment_curves_summary.csv")).len(), 4);
    run.ok(&["experiment", "--axis", "designs", "--budgets", "1,3", "--seeds", "4"]);
    assert_eq!(data_rows(&run.path("experiment_designs.csv")).len(), 4);

    let eval = run.ok(&[
        "evaluate",
        "--l",
        "30",
        "--w",
        "38",
        "--p",
        "-4",
        "--notch",
        "3.5:0.3:-15",
    ]);
    assert!(
        eval.contains("feasible    true") && eval.contains("oracle") && eval.contains("surrogate"),
        "{eval}"
    );
    assert!(run.path("evaluate_config.toml").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let a = Run::new();
    let b = Run::new();
    for r in [&a, &b] {
        r.train_all();
        r.ok(&["design", "--notch", "3.5:0.3:-15", "--curves", "3", "--designs", "4"]);
    }
    // Paths differ between the two runs, so compare outputs whose content
    // does not embed them: the data and the ranked candidates.
    for name in [
        "dataset.csv",
        "design_candidates.csv",
        "vae_history.csv",
        "cvae_history.csv",
    ] {
        let (x, y) = (fs::read(a.path(name)).unwrap(), fs::read(b.path(name)).unwrap());
        let strip = |v: Vec<u8>| {
            String::from_utf8(v)
                .unwrap()
                .lines()
                .skip(1)
                .collect::<Vec<_>>()
                .join("\n")
        };
        assert_eq!(strip(x), strip(y), "{name}");
    }
    // Within one run, repeating a command reproduces its file exactly.
    let before = fs::read(a.path("design_candidates.csv")).unwrap();
    a.ok(&["design", "--notch", "3.5:0.3:-15", "--curves", "3", "--designs", "4"]);
    assert_eq!(fs::read(a.path("design_candidates.csv")).unwrap(), before);
    let ds = fs::read(a.path("dataset.csv")).unwrap();
    a.ok(&["dataset"]);
    assert_eq!(fs::read(a.path("dataset.csv")).unwrap(), ds);
}

#[test]
fn exit_codes() {
    let run = Run::new();
    let code = |args: &[&str]| run.cmd(args).status.code().unwrap();
    // usage and validation errors
    assert_eq!(code(&["bogus"]), 1);
    assert_eq!(
        code(&[
            "evaluate",
            "--l",
            "30",
            "--w",
            "38",
            "--p",
            "-4",
            "--notch",
            "50:0.2:-15"
        ]),
        1
    );
    assert_eq!(
        code(&["evaluate", "--l", "30", "--w", "38", "--p", "-4", "--notch", "3.5:0.2"]),
        1
    );
    assert_eq!(code(&["train", "vae"]), 1, "missing dataset");
    run.ok(&["dataset"]);
    assert_eq!(code(&["design", "--notch", "3.5:0.3:-15"]), 1, "missing checkpoint");
    fs::write(run.path("bad.toml"), "[vae]\nseed = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_patchdesign"))
        .args(["--config"])
        .arg(run.path("bad.toml"))
        .arg("dataset")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    // an unreadable checkpoint is a runtime failure
    fs::write(run.path("vae.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(&["train", "cvae"]), 2);
    // a feasible design with no target succeeds
    assert_eq!(code(&["evaluate", "--l", "30", "--w", "38", "--p", "-4"]), 0);
}
