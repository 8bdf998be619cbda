//! Configs shipped inside the binary.
use crate::config::{parse_config, ConfigError, RunConfig};

pub struct Preset {
    pub name: &'static str,
    pub summary: &'static str,
    pub text: &'static str,
}

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "worked-example",
        summary: "proportional delays, b = sin(t)/7, combined bracket matched to zero",
        text: include_str!("../presets/worked-example.cfg"),
    },
    Preset {
        name: "boundary",
        summary: "worked example with the combined bracket matched to 0.15 g(t)",
        text: include_str!("../presets/boundary.cfg"),
    },
    Preset {
        name: "amplified-neutral",
        summary: "worked example with b scaled by 10 (criterion violated)",
        text: include_str!("../presets/amplified-neutral.cfg"),
    },
    Preset {
        name: "zero",
        summary: "all coefficients zero",
        text: include_str!("../presets/zero.cfg"),
    },
];

pub fn find(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

pub fn names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.name).collect()
}

pub fn load_preset(name: &str) -> Result<RunConfig, ConfigError> {
    let p = find(name).ok_or_else(|| ConfigError::File {
        origin: format!("@{name}"),
        message: format!("no such preset; available: {}", names().join(", ")),
    })?;
    parse_config(p.text, &format!("{}.cfg", p.name))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DriftSource, Form};

    #[test]
    fn every_preset_loads() {
        for p in PRESETS {
            load_preset(p.name).unwrap_or_else(|e| panic!("{}: {e}", p.name));
        }
    }

    #[test]
    fn worked_example_shape() {
        let cfg = load_preset("worked-example").unwrap();
        assert_eq!(cfg.form, Form::Linear);
        assert_eq!(cfg.problem.gamma.to_string(), "1/3");
        assert!(matches!(cfg.drift, DriftSource::Bracket(ref e) if e.is_zero()));
        assert_eq!(cfg.problem.t0, 0.0);
    }

    #[test]
    fn unknown_preset() {
        let e = load_preset("nope").unwrap_err().to_string();
        assert!(e.contains("worked-example"), "{e}");
    }
}
