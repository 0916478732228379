#![allow(dead_code)]

pub mod mtlgen;
pub mod oracle;
pub mod table;

use std::collections::BTreeSet;
use std::path::PathBuf;

use envguard::checker::{self, AnalysisRecord, DEFAULT_STATE_CAP};
use envguard::ingest::{self, DeviceDescription, SpaceDescription};
use envguard::model::EnvironmentGraph;
use envguard::property::{self, Property};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn descriptions(name: &str) -> (Vec<SpaceDescription>, Vec<DeviceDescription>) {
    let dir = fixture(name);
    let spaces = ingest::load_spaces(&dir.join("spaces.json")).expect("spaces load");
    let devices = ingest::load_devices(&dir.join("devices")).expect("devices load");
    (spaces, devices)
}

pub fn graph(name: &str) -> EnvironmentGraph {
    let (spaces, devices) = descriptions(name);
    ingest::build_representation(&spaces, &devices).expect("fixture builds")
}

pub fn properties(name: &str, graph: &EnvironmentGraph) -> Vec<Property> {
    let text = std::fs::read_to_string(fixture(name).join("properties.json")).expect("property file");
    let records = property::parse_property_file(&text).expect("property file parses");
    property::compile_properties(&records, graph).expect("properties compile")
}

pub fn analysed(name: &str) -> (EnvironmentGraph, Vec<AnalysisRecord>) {
    let g = graph(name);
    let props = properties(name, &g);
    let records = checker::analyze_all(&props, &g, DEFAULT_STATE_CAP).expect("analysis");
    (g, records)
}

/// Office and home in one environment (the shared outdoor space once), with
/// all twenty properties.
pub fn campus() -> (EnvironmentGraph, Vec<AnalysisRecord>) {
    let (mut spaces, mut devices) = descriptions("office");
    let (home_spaces, home_devices) = descriptions("home");
    let seen: BTreeSet<String> = spaces.iter().map(|s| s.id.clone()).collect();
    spaces.extend(home_spaces.into_iter().filter(|s| !seen.contains(&s.id)));
    devices.extend(home_devices);
    let g = ingest::build_representation(&spaces, &devices).expect("campus builds");
    let mut props = properties("office", &g);
    props.extend(properties("home", &g));
    let records = checker::analyze_all(&props, &g, DEFAULT_STATE_CAP).expect("analysis");
    (g, records)
}
