//! Shared fixtures for the benchmark suite.

use std::path::{Path, PathBuf};

use ppgn_core::feeder::{load_feeder, FeederGraph};

pub fn fixture_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../ppgn-core/fixtures")
        .join(name)
}

pub fn fixture(name: &str) -> FeederGraph {
    load_feeder(fixture_path(name)).expect("bundled fixture loads")
}
