//! Shared helpers for unit tests.

use std::io::Write;
use std::path::PathBuf;

use crate::feeder::{load_feeder, FeederGraph};

pub fn fixture_path(name: &str) -> PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

pub fn fixture(name: &str) -> FeederGraph {
    load_feeder(fixture_path(name)).unwrap()
}

pub fn two_node_json() -> String {
    // Slack at node 1, a single three-phase branch of 10 S per phase,
    // 0.1 A load on every phase of node 2.
    let y = "[[[10.0,0.0],[0.0,0.0],[0.0,0.0]],[[0.0,0.0],[10.0,0.0],[0.0,0.0]],[[0.0,0.0],[0.0,0.0],[10.0,0.0]]]";
    format!(
        r#"{{
  "format": "ppgn-feeder-v1",
  "nodes": [{{"id": 1, "phases": "abc"}}, {{"id": 2, "phases": "abc"}}],
  "branches": [{{"from": 1, "to": 2, "y": {y}}}],
  "switches": [],
  "observed": [1, 2],
  "slack": 1,
  "loads": [{{"node": 2, "current": [[0.1,0.0],[0.1,0.0],[0.1,0.0]]}}]
}}"#
    )
}

pub fn feeder_from_json(json: &str) -> FeederGraph {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(json.as_bytes()).unwrap();
    load_feeder(f.path()).unwrap()
}

pub fn two_node() -> FeederGraph {
    feeder_from_json(&two_node_json())
}
