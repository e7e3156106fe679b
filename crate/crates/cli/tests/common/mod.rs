#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use edgebench::host::Dataset;

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub images: PathBuf,
    pub annotations: PathBuf,
    pub dataset: Dataset,
}

/// Six synthetic 64x48 frames with three classes, written as COCO.
pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    let annotations = dir.path().join("instances.json");
    let dataset = Dataset::synthetic(6, 3, 64, 48, 11);
    dataset.write_coco(&images, &annotations).unwrap();
    Fixture { dir, images, annotations, dataset }
}

impl Fixture {
    pub fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// `bench-host` with a 64x64 model input, over the loopback broker unless
    /// `extra` names another.
    pub fn host(&self, out: &Path, extra: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_bench-host"));
        if !extra.contains(&"--broker") {
            cmd.args(["--broker", "loopback"]);
        }
        cmd.args(["--input-size", "64x64", "--session-id", "cli"])
            .arg("--dataset")
            .arg(&self.images)
            .arg("--annotations")
            .arg(&self.annotations)
            .arg("--out")
            .arg(out)
            .args(extra)
            .env("BENCH_LOG_LEVEL", "warn");
        cmd.output().unwrap()
    }
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// A TCP port with nothing listening on it.
pub fn closed_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}
