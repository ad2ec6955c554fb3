use anyhow::{bail, Result};
use fedmoco_core::datagen::ScenarioKind;
use fedmoco_core::{Arm, ExperimentConfig};

/// One data setting of a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Setting {
    pub label: String,
    pub scenario: ScenarioKind,
    pub nodes: usize,
}

/// What a `run` invocation executes: every arm on every setting for every
/// seed.
#[derive(Debug, Clone)]
pub struct Plan {
    pub base: ExperimentConfig,
    pub settings: Vec<Setting>,
    pub arms: Vec<Arm>,
    /// Also evaluate the untrained initialization.
    pub random_init: bool,
}

pub const PRESETS: [&str; 5] = ["desk", "table1-desk", "ablation-desk", "labelskew-desk", "finetune-desk"];

fn setting(scenario: ScenarioKind, nodes: usize) -> Setting {
    let name = match scenario {
        ScenarioKind::Equal => "equal".to_string(),
        ScenarioKind::SizeSkew { gamma } => format!("sizeskew{gamma}"),
        ScenarioKind::LabelSkew => "labelskew".to_string(),
    };
    Setting { label: format!("{name}-k{nodes}"), scenario, nodes }
}

const ALL_MODULE_ARMS: [Arm; 4] = [Arm::FedAvg, Arm::FedMocoM, Arm::FedMocoS, Arm::FedMoco];

pub fn preset(name: &str) -> Result<Plan> {
    let base = ExperimentConfig::desk();
    let plan = match name {
        "desk" => {
            Plan { base, settings: vec![setting(ScenarioKind::Equal, 3)], arms: vec![Arm::FedMoco], random_init: false }
        }
        "table1-desk" => Plan {
            base,
            settings: vec![setting(ScenarioKind::Equal, 3), setting(ScenarioKind::Equal, 6)],
            arms: vec![Arm::FedAvg, Arm::FedMoco],
            random_init: false,
        },
        "ablation-desk" => Plan {
            base,
            settings: vec![
                setting(ScenarioKind::SizeSkew { gamma: 5.0 }, 3),
                setting(ScenarioKind::SizeSkew { gamma: 10.0 }, 3),
            ],
            arms: ALL_MODULE_ARMS.to_vec(),
            random_init: false,
        },
        "labelskew-desk" => Plan {
            base,
            settings: vec![setting(ScenarioKind::LabelSkew, 3)],
            arms: ALL_MODULE_ARMS.to_vec(),
            random_init: false,
        },
        "finetune-desk" => {
            let mut base = base;
            base.eval.run_finetune = true;
            Plan { base, settings: vec![setting(ScenarioKind::Equal, 3)], arms: vec![Arm::FedMoco], random_init: true }
        }
        other => bail!("unknown preset {other:?}; known presets: {}", PRESETS.join(", ")),
    };
    Ok(plan)
}

/// Plan for an explicit config file: its own scenario and node count.
pub fn single(base: ExperimentConfig) -> Plan {
    let s = setting(base.data.scenario, base.federation.nodes);
    Plan { base, settings: vec![s], arms: vec![Arm::FedMoco], random_init: false }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table1_arms_and_sizes() {
        let p = preset("table1-desk").unwrap();
        assert_eq!(p.arms, vec![Arm::FedAvg, Arm::FedMoco]);
        assert_eq!(p.settings.iter().map(|s| s.nodes).collect::<Vec<_>>(), vec![3, 6]);
    }

    #[test]
    fn ablation_has_four_arms() {
        let p = preset("ablation-desk").unwrap();
        let names: Vec<&str> = p.arms.iter().map(|a| a.name()).collect();
        assert_eq!(names, ["FedAvg", "FedMoCo-M", "FedMoCo-S", "FedMoCo"]);
    }

    #[test]
    fn every_preset_validates() {
        for name in PRESETS {
            preset(name).unwrap().base.validate().unwrap();
        }
        assert!(preset("nope").is_err());
    }
}
