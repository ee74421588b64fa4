use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = "\
interactions = data/interactions.tsv
triples = data/triples.tsv
item_map = data/item_map.tsv
kcore = 2
d_s = 32
k = 5
d = 8
d_a = 8
layers = 2
epochs = 4
lr = 0.01
batch_size = 128
";

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let sb = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(sb.path("run.conf"), CONFIG).unwrap();
        let out = sb.run(&["synth", "--out", "data", "--users", "60", "--items", "40", "--seed", "5"]);
        assert!(out.status.success(), "{}", stderr(&out));
        sb
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_colakg"))
            .current_dir(self.dir.path())
            .env_remove("COLAKG_API_KEY")
            .env("RUST_LOG", "warn")
            .args(args)
            .output()
            .unwrap()
    }

    /// Runs a pipeline command against `work_dir` with the sandbox config.
    fn stage(&self, work_dir: &str, cmd: &str, extra: &[&str]) -> Output {
        let mut args = vec!["--config", "run.conf", "--work-dir", work_dir, "--deterministic"];
        args.extend_from_slice(extra);
        args.push(cmd);
        self.run(&args)
    }

    fn pipeline(&self, work_dir: &str, cmds: &[&str], extra: &[&str]) {
        for cmd in cmds {
            let out = self.stage(work_dir, cmd, extra);
            assert!(out.status.success(), "{cmd} failed: {}", stderr(&out));
        }
    }

    fn read(&self, rel: &str) -> Vec<u8> {
        std::fs::read(self.path(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn prepare_writes_splits_and_is_idempotent() {
    let sb = Sandbox::new();
    sb.pipeline("w", &["prepare"], &[]);
    let first: Vec<Vec<u8>> = ["train", "val", "test"].iter().map(|s| sb.read(&format!("w/prepare/{s}.tsv"))).collect();
    assert!(first.iter().all(|f| !f.is_empty()));
    sb.pipeline("w", &["prepare"], &[]);
    let second: Vec<Vec<u8>> = ["train", "val", "test"].iter().map(|s| sb.read(&format!("w/prepare/{s}.tsv"))).collect();
    assert_eq!(first, second);
    let manifest: serde_json::Value = serde_json::from_slice(&sb.read("w/prepare/manifest.json")).unwrap();
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert!(manifest["inputs"].as_object().unwrap().len() >= 3);
}

#[test]
fn missing_triples_is_an_input_error() {
    let sb = Sandbox::new();
    let out = sb.stage("w", "prepare", &["--triples=data/absent.tsv"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("input not found"), "{}", stderr(&out));
}

#[test]
fn eval_without_checkpoint_names_the_missing_stage() {
    let sb = Sandbox::new();
    sb.pipeline("w", &["prepare", "embed", "graph"], &[]);
    let out = sb.stage("w", "eval", &[]);
    assert_eq!(code(&out), 5);
    assert!(stderr(&out).contains("train"));
    assert_eq!(code(&sb.stage("fresh", "graph", &[])), 5);
}

#[test]
fn remote_mode_without_credential_exits_3() {
    let sb = Sandbox::new();
    sb.pipeline("w", &["prepare"], &[]);
    let out = sb.stage("w", "embed", &["--embed-mode=remote"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("COLAKG_API_KEY"));
}

#[test]
fn only_embed_needs_a_provider() {
    // downstream stages never build a provider, so remote mode without a
    // credential still trains and evaluates on an existing table
    let sb = Sandbox::new();
    sb.pipeline("w", &["prepare", "embed"], &[]);
    sb.pipeline("w", &["graph", "train", "eval"], &["--embed-mode=remote"]);
}

#[test]
fn incomplete_embedding_file_exits_4() {
    let sb = Sandbox::new();
    sb.pipeline("w", &["prepare"], &[]);
    let line = "item\t0\t".to_string() + &vec!["0.1"; 32].join(" ") + "\n";
    std::fs::write(sb.path("partial.tsv"), format!("dim=32\n{line}")).unwrap();
    let out = sb.stage("w", "embed", &["--embed-mode=file", "--embed-file=partial.tsv"]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("item:1"), "{}", stderr(&out));
}

#[test]
fn train_honors_seed() {
    let sb = Sandbox::new();
    let stages = ["prepare", "embed", "graph", "train"];
    sb.pipeline("a", &stages, &["--seed", "9"]);
    sb.pipeline("b", &stages, &["--seed", "9"]);
    sb.pipeline("c", &stages, &["--seed", "10"]);
    assert_eq!(sb.read("a/train/best.clkm"), sb.read("b/train/best.clkm"));
    assert_ne!(sb.read("a/train/best.clkm"), sb.read("c/train/best.clkm"));
    let log = String::from_utf8(sb.read("a/train/log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let rec: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["epoch", "train_loss", "val_recall@20", "val_ndcg@20", "elapsed_ms"] {
        assert!(rec.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn ablate_emits_five_variants() {
    let sb = Sandbox::new();
    sb.pipeline("w", &["prepare", "embed"], &[]);
    let out = sb.stage("w", "ablate", &["--epochs=2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let labels: Vec<String> = stdout(&out)
        .lines()
        .skip(1)
        .map(|l| l.split('\t').next().unwrap().to_owned())
        .collect();
    assert_eq!(labels, ["full", "w/o s_v", "w/o s_u", "w/o N_k(v)", "w/o D_v'"]);
    assert!(Path::new(&sb.path("w/ablate/ablation.tsv")).exists());
}

#[test]
fn sweep_rows_are_sorted_by_k() {
    let sb = Sandbox::new();
    sb.pipeline("w", &["prepare", "embed"], &[]);
    let out = sb.stage("w", "sweep", &["--epochs=2", "--sweep-ks=10,0,5"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let ks: Vec<String> = stdout(&out)
        .lines()
        .skip(1)
        .map(|l| l.split('\t').nth(1).unwrap().to_owned())
        .collect();
    assert_eq!(ks, ["0", "5", "10"]);
}

#[test]
fn cli_overrides_beat_the_config_file() {
    let sb = Sandbox::new();
    sb.pipeline("w", &["prepare", "embed", "graph"], &["--k=3"]);
    let graph = std::fs::read_to_string(sb.path("w/graph/item_graph.tsv")).unwrap();
    let sb_default = Sandbox::new();
    sb_default.pipeline("w", &["prepare", "embed", "graph"], &[]);
    let default = std::fs::read_to_string(sb_default.path("w/graph/item_graph.tsv")).unwrap();
    assert!(graph.len() < default.len());
}

#[test]
fn unknown_key_and_held_lock_fail() {
    let sb = Sandbox::new();
    assert_eq!(code(&sb.run(&["--config", "run.conf", "--no-such-key=1", "prepare"])), 2);
    std::fs::create_dir_all(sb.path("w")).unwrap();
    std::fs::write(sb.path("w/.lock"), "1").unwrap();
    let out = sb.stage("w", "prepare", &[]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("in use"));
}
