#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use aida_core::catalog::Catalog;
use aida_core::dsl::DslEngine;
use aida_core::warehouse::{generate, GroundTruth, WarehouseConfig, WarehouseHandle};
use tempfile::TempDir;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// The six-shop warehouse with scenario `s1` (netGMV drop at S002 driven
/// by new users).
pub fn small_config() -> WarehouseConfig {
    let text = fs::read_to_string(fixture("small_warehouse.toml")).expect("fixture");
    WarehouseConfig::from_toml_str(&text).expect("fixture config")
}

pub struct Built {
    pub dir: TempDir,
    pub path: PathBuf,
    pub handle: Arc<WarehouseHandle>,
    pub truths: Vec<GroundTruth>,
}

impl Built {
    pub fn engine(&self) -> DslEngine {
        DslEngine::new(Arc::new(Catalog::default_catalog()), self.handle.clone())
    }
}

pub fn build(config: &WarehouseConfig) -> Built {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("warehouse.db");
    let (handle, truths) = generate(config, &path).expect("generate");
    Built {
        dir,
        path,
        handle: Arc::new(handle),
        truths,
    }
}

/// Every file under `root`, keyed by relative path.
pub fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).expect("read_dir") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// `x` printed with 12 significant digits.
pub fn sig12(x: f64) -> String {
    format!("{x:.11e}")
}
