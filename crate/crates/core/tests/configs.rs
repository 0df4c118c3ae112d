use mef_core::config::FusionConfig;

fn shipped(name: &str) -> FusionConfig {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/").to_string() + name;
    FusionConfig::load(path).unwrap()
}

#[test]
fn default_json_matches_builtin_defaults() {
    assert_eq!(shipped("default.json"), FusionConfig::default());
}

#[test]
fn toy_json_matches_toy_preset() {
    let mut expect = FusionConfig::default().toy();
    expect.train.checkpoint_every = 50;
    assert_eq!(shipped("toy.json"), expect);
}

#[test]
fn config_round_trips_through_json() {
    let cfg = FusionConfig::default().toy();
    assert_eq!(FusionConfig::from_json(&cfg.to_json()).unwrap(), cfg);
}
