use mbfusion::PipelineConfig;

#[test]
fn documented_defaults_match() {
    let readme = include_str!("../../../README.md");
    let block = readme
        .split("```toml\n")
        .nth(1)
        .and_then(|rest| rest.split("```").next())
        .expect("config block in README");
    let parsed = PipelineConfig::from_toml_str(block).unwrap();
    assert_eq!(parsed, PipelineConfig::default());
}
