#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const CONFIG: &str = r#"
K = 10
T = 3
init-subset = 20
degree = 8

[synthetic]
n_clusters = 4
items_per_cluster = 30
n_users = 80
test_users = 20
latent_dim = 4
text_dim = 8
history_len = 6
train_positives = 2
test_positives = 3
seed = 3

[train]
epochs = 2
batch_size = 16
n_neg = 32
rank = 6
feature_dim = 12
n_queries = 3
embed_dim = 8

[eval]
n_seeds = 3
max_steps = 3
max_records = 20
"#;

pub fn urm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_urm"))
        .args(args)
        .output()
        .expect("spawn urm")
}

pub fn ok(args: &[&str]) -> String {
    let out = urm(args);
    assert!(
        out.status.success(),
        "urm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A trained engine in a temporary directory.
pub struct Engine {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
    pub catalog: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
    pub checkpoint: PathBuf,
    pub graph: PathBuf,
}

impl Engine {
    pub fn build() -> Engine {
        let dir = tempfile::tempdir().unwrap();
        let p = |n: &str| dir.path().join(n);
        let config = p("urm.toml");
        std::fs::write(&config, CONFIG).unwrap();
        let (catalog, train, test) = (p("catalog.jsonl"), p("train.jsonl"), p("test.jsonl"));
        let (checkpoint, graph) = (p("model.urmm"), p("graph.urmg"));
        ok(&["--config", s(&config), "gen-synthetic", "--out-dir", s(dir.path())]);
        let log = ok(&[
            "--config",
            s(&config),
            "train",
            "--catalog",
            s(&catalog),
            "--interactions",
            s(&train),
            "--checkpoint",
            s(&checkpoint),
        ]);
        assert_eq!(log.lines().filter(|l| l.starts_with("epoch ")).count(), 2, "{log}");
        ok(&[
            "--config",
            s(&config),
            "build-index",
            "--catalog",
            s(&catalog),
            "--checkpoint",
            s(&checkpoint),
            "--graph",
            s(&graph),
        ]);
        Engine {
            dir,
            config,
            catalog,
            train,
            test,
            checkpoint,
            graph,
        }
    }

    /// `--config ... --catalog ... --checkpoint ... --graph ...` after `cmd`.
    pub fn args<'a>(&'a self, cmd: &'a str) -> Vec<&'a str> {
        vec![
            "--config",
            s(&self.config),
            cmd,
            "--catalog",
            s(&self.catalog),
            "--checkpoint",
            s(&self.checkpoint),
            "--graph",
            s(&self.graph),
        ]
    }
}
