//! Scenario files shipped with the binary.

pub const PRESETS: [(&str, &str); 4] = [
    ("virtual_chain_20rpm", include_str!("../presets/virtual_chain_20rpm.toml")),
    ("test1_light", include_str!("../presets/test1_light.toml")),
    ("test2_medium", include_str!("../presets/test2_medium.toml")),
    ("test3_heavy", include_str!("../presets/test3_heavy.toml")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

pub fn names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario_file::ScenarioFile;

    #[test]
    fn every_preset_builds() {
        for (name, text) in PRESETS {
            let file = ScenarioFile::parse(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            file.to_scenario(None).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn lookup() {
        assert!(preset("test2_medium").is_some());
        assert!(preset("test4").is_none());
    }
}
