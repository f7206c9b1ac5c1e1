use std::path::Path;

use lct_core::experiment::{DataSource, ExperimentConfig};
use lct_core::train::TrainConfig;

fn shipped(name: &str) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    ExperimentConfig::load(&path).unwrap()
}

#[test]
fn desk_config_matches_desk_preset() {
    let cfg = shipped("desk.toml");
    assert_eq!(cfg.data, DataSource::Synth);
    assert_eq!(cfg.train, TrainConfig::desk());
}

#[test]
fn sweep_config_resolves_paths() {
    let cfg = shipped("sweep.toml");
    let sweep = cfg.sweep.unwrap();
    assert_eq!(
        sweep.variants.len() * sweep.depths.len() * sweep.segment_lens_s.len(),
        48
    );
    let DataSource::Edf { recordings } = cfg.data else {
        panic!("expected edf source")
    };
    for r in &recordings {
        assert!(r.edf.is_absolute() && r.intervals.is_absolute());
        assert!(r.edf.parent().unwrap().ends_with("configs/data"));
    }
}
