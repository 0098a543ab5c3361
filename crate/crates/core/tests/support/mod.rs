#![allow(dead_code)]

pub mod dd;
pub mod grad_oracle;

use std::path::PathBuf;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/coco10")
}
