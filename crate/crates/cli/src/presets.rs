use anyhow::{bail, Result};
use depaint_core::{EnvKind, RunConfig, TopologyKind};

/// A named grid of runs, each repeated over the same seeds.
#[derive(Debug, Clone)]
pub struct ExperimentPreset {
    pub name: &'static str,
    /// Label and configuration of every cell, before seeding.
    pub cells: Vec<(String, RunConfig)>,
    pub seeds: Vec<u64>,
}

pub const PRESET_NAMES: [&str; 3] = ["coop-nav", "predator-prey", "ablation-momentum"];

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

impl ExperimentPreset {
    /// Resolves `name` on top of `base`.
    pub fn resolve(name: &str, base: &RunConfig) -> Result<Self> {
        let mut cells = Vec::new();
        let name = match name {
            "coop-nav" => {
                for n in [3, 4, 5] {
                    for topology in TopologyKind::ALL {
                        let cfg = RunConfig {
                            env: EnvKind::CoopNav,
                            n_agents: n,
                            topology,
                            ..base.clone()
                        };
                        cells.push((format!("coop-nav_n{n}_{topology}"), cfg));
                    }
                }
                "coop-nav"
            }
            "predator-prey" => {
                for (predators, preys) in [(1, 1), (2, 1), (3, 2)] {
                    for topology in TopologyKind::ALL {
                        let cfg = RunConfig {
                            env: EnvKind::PredatorPrey,
                            n_predators: predators,
                            n_preys: preys,
                            topology,
                            ..base.clone()
                        };
                        cells.push((format!("predator-prey_{predators}v{preys}_{topology}"), cfg));
                    }
                }
                "predator-prey"
            }
            "ablation-momentum" => {
                for momentum in [true, false] {
                    let cfg = RunConfig {
                        env: EnvKind::CoopNav,
                        n_agents: 5,
                        topology: TopologyKind::Ring,
                        momentum,
                        ..base.clone()
                    };
                    let label = if momentum { "momentum" } else { "no-momentum" };
                    cells.push((format!("ablation_{label}"), cfg));
                }
                "ablation-momentum"
            }
            other => bail!(
                "unknown preset `{other}`; expected one of {}",
                PRESET_NAMES.join(", ")
            ),
        };
        for (label, cfg) in &cells {
            cfg.validate()
                .map_err(|e| anyhow::anyhow!("preset cell {label}: {e}"))?;
        }
        Ok(ExperimentPreset {
            name,
            cells,
            seeds: DEFAULT_SEEDS.to_vec(),
        })
    }
}
