//! The `fedgan` binary end to end on tiny configurations.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use fedgan::federation::{serve, ModelEnvelope, ModelRegistry, RegistryClient, RegistryError, Selector};

const TINY: &[&str] = &[
    "gan.steps=40",
    "gan.samples=200",
    "gan.hidden=8",
    "fusion.steps=40",
    "fusion.samples=200",
    "fusion.hidden=8",
    "eval.samples=200",
    "cascade.rounds=25",
    "cascade.steps_per_round=2",
];

fn fedgan(out: &Path, extra: &[&str], args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedgan"));
    cmd.args(args);
    for s in TINY.iter().chain(extra) {
        cmd.args(["--set", s]);
    }
    cmd.args(["--set", &format!("out.dir={}", out.display())]);
    cmd.output().unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn config_is_echoed_and_unknown_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# tiny\nseed = 9\ndemo = future\n").unwrap();
    let o = fedgan(dir.path(), &[], &["gen-data", "--config", cfg.to_str().unwrap(), "--n", "50"]);
    ok(&o);
    let resolved = fs::read_to_string(dir.path().join("config.resolved")).unwrap();
    assert!(resolved.contains("seed = 9\n"));
    assert!(resolved.contains("demo = future\n"));
    assert!(resolved.contains("cascade.R = 10\n"));
    let real = fs::read_to_string(dir.path().join("real.csv")).unwrap();
    assert!(real.starts_with("a0,a1,b0,b1,c0,c1\n"));
    assert_eq!(real.lines().count(), 51);

    let bad = fedgan(dir.path(), &["gan.lr=0.1"], &["gen-data"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("gan.lr"));
}

#[test]
fn eval_of_oracle_pairs_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    ok(&fedgan(dir.path(), &[], &["gen-data"]));
    let real = dir.path().join("real.csv");
    ok(&fedgan(dir.path(), &[], &["eval", "--input", real.to_str().unwrap()]));
    let eval = fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert!(eval.starts_with("metric,value\npairing_accuracy,1\n"), "{eval}");
    ok(&fedgan(dir.path(), &[], &["render", "--input", real.to_str().unwrap()]));
    assert!(fs::read(dir.path().join("plot.ppm")).unwrap().starts_with(b"P6\n512 512\n255\n"));
}

#[test]
fn train_upload_fetch_fuse_through_a_registry_directory() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("registry");
    let reg = format!("registry.root={}", root.display());
    ok(&fedgan(dir.path(), &[&reg], &["train-local", "--location", "0", "--upload", "g1"]));
    let model = dir.path().join("location1.fgn");
    assert!(root.join("g1").join("1.fgn").exists());
    assert_eq!(fs::read(&model).unwrap(), fs::read(root.join("g1").join("1.fgn")).unwrap());

    let up = fedgan(dir.path(), &[&reg], &["upload", "--id", "g1", "--model", model.to_str().unwrap()]);
    ok(&up);
    assert_eq!(String::from_utf8_lossy(&up.stdout).trim(), "g1 v2");

    let fetched = dir.path().join("fetched.fgn");
    ok(&fedgan(dir.path(), &[&reg], &["fetch", "--id", "g1", "--version", "1", "--output", fetched.to_str().unwrap()]));
    assert_eq!(fs::read(&fetched).unwrap(), fs::read(&model).unwrap());

    ok(&fedgan(dir.path(), &[&reg], &["fuse", "--frozen", "g1", "--publish", "g2"]));
    for f in ["metrics.csv", "pairs.csv", "eval.csv", "fused.fgn"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert_eq!(ModelRegistry::open(&root).unwrap().list().unwrap().len(), 2);
    // Fused models stay untouched in the registry.
    assert_eq!(fs::read(root.join("g1").join("1.fgn")).unwrap(), fs::read(&model).unwrap());

    let missing = fedgan(dir.path(), &[&reg], &["fetch", "--id", "nobody", "--output", "x.fgn"]);
    assert!(!missing.status.success());
}

#[test]
fn registry_commands_need_a_place_to_keep_models() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedgan(dir.path(), &[], &["fetch", "--id", "g1", "--output", "x"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("registry.root"));
}

#[test]
fn demo_writes_every_output() {
    let dir = tempfile::tempdir().unwrap();
    ok(&fedgan(dir.path(), &["demo=future"], &["demo"]));
    for f in ["metrics.csv", "metrics_stage1.csv", "pairs.csv", "eval.csv", "refresh_log.csv", "plot.ppm"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(dir.path().join("refresh_log.csv")).unwrap();
    assert_eq!(log, "round,model_id,version\n10,g1,1\n10,g2,1\n20,g1,1\n20,g2,1\n");
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,d_loss,g_loss\n1,"));
    assert!(fs::read_dir(dir.path()).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().ends_with(".partial")));
}

/// In-memory registry whose fetches fail once `budget` are used up.
struct Failing {
    inner: ModelRegistry,
    budget: usize,
    fetches: AtomicUsize,
}

impl RegistryClient for Failing {
    fn upload(&self, id: &str, creator: &str, payload: &[u8]) -> Result<u32, RegistryError> {
        self.inner.upload(id, creator, payload)
    }

    fn fetch(&self, id: &str, selector: Selector) -> Result<ModelEnvelope, RegistryError> {
        if self.fetches.fetch_add(1, Ordering::SeqCst) >= self.budget {
            return Err(RegistryError::Storage("disk went away".into()));
        }
        self.inner.fetch(id, selector)
    }

    fn list(&self) -> Result<Vec<(String, u32)>, RegistryError> {
        self.inner.list()
    }
}

#[test]
fn aborted_cascade_leaves_partial_outputs_and_fails() {
    // g1 after upload, two initial loads, two at round 10; round 20 fails.
    let reg = Arc::new(Failing {
        inner: ModelRegistry::in_memory(),
        budget: 5,
        fetches: AtomicUsize::new(0),
    });
    let server = serve(reg, "127.0.0.1:0").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ep = format!("registry.endpoint={}", server.addr());
    let o = fedgan(dir.path(), &[&ep], &["cascade"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("round 20"));
    assert!(dir.path().join("metrics.csv.partial").exists());
    assert!(!dir.path().join("metrics.csv").exists());
    let log = fs::read_to_string(dir.path().join("refresh_log.csv.partial")).unwrap();
    assert_eq!(log, "round,model_id,version\n10,g1,1\n10,g2,1\n");
}
