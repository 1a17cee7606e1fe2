//! Run configuration: one strict JSON document covering every component.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{from_json_str, read_text};
use crate::ait::{ThresholdState, DEFAULT_GAMMA};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::glt::GltConfig;
use crate::ptc::PtcConfig;
use crate::schedule::PhasePlan;
use crate::sim::{generate_scenes, run_uda_loop, LoopConfig, LoopReport, Models, Scene, SceneConfig};
use crate::sweep::SweepConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AitConfig {
    pub gamma: f64,
    pub floor: f64,
}

impl Default for AitConfig {
    fn default() -> Self {
        AitConfig {
            gamma: DEFAULT_GAMMA,
            floor: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_scenes: usize,
    pub scenes: SceneConfig,
    pub models: Models,
    #[serde(rename = "loop")]
    pub loop_cfg: LoopConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        // 200 epochs of 500 images cover the default 50k + 50k plan.
        SimConfig {
            n_scenes: 500,
            scenes: SceneConfig::default(),
            models: Models::default(),
            loop_cfg: LoopConfig {
                epochs: 200,
                ..LoopConfig::default()
            },
        }
    }
}

/// Default input and output locations; command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub images: Option<PathBuf>,
    pub prior: Option<PathBuf>,
    pub boxes: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
    pub proxy: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub glt: GltConfig,
    pub ptc: PtcConfig,
    pub ait: AitConfig,
    pub plan: PhasePlan,
    pub sim: SimConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub paths: PathsConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            glt: GltConfig::default(),
            ptc: PtcConfig::default(),
            ait: AitConfig::default(),
            plan: PhasePlan::default(),
            sim: SimConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            paths: PathsConfig::default(),
            seed: 0,
        }
    }
}

pub struct SimulationOutput {
    pub scenes: Vec<Scene>,
    pub report: LoopReport,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.glt.validate("glt")?;
        self.ptc.validate("ptc")?;
        if !(0.0..=1.0).contains(&self.ait.gamma) {
            return Err(Error::invalid("ait.gamma", "must lie in [0, 1]"));
        }
        if !(0.0..=self.ptc.tau_cls).contains(&self.ait.floor) {
            return Err(Error::invalid("ait.floor", "must lie in [0, ptc.tau_cls]"));
        }
        self.plan.validate("plan")?;
        self.sim.scenes.validate("sim.scenes")?;
        self.sim.models.validate("sim.models")?;
        self.sim.loop_cfg.validate("sim.loop")?;
        self.eval.validate("eval")?;
        if !(0.0..=1.0).contains(&self.sweep.floor) {
            return Err(Error::invalid("sweep.floor", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.sweep.tau_lb) {
            return Err(Error::invalid("sweep.tau_lb", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let cfg: RunConfig = from_json_str(text, source_name)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, &path.display().to_string())
    }

    pub fn threshold_state(&self) -> Result<ThresholdState> {
        ThresholdState::new(self.ptc.tau_cls, self.ait.gamma, self.ait.floor)
    }

    /// Generates the scenes and runs the loop. GLT settings play no part: the
    /// simulator never sees pixels.
    pub fn simulate(&self) -> Result<SimulationOutput> {
        self.validate()?;
        let scenes = generate_scenes(self.sim.n_scenes, &self.sim.scenes, self.seed)?;
        let report = run_uda_loop(
            &self.plan,
            &self.ptc,
            self.threshold_state()?,
            &self.sim.models,
            &scenes,
            &self.sim.loop_cfg,
            self.seed,
        )?;
        Ok(SimulationOutput { scenes, report })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::parse("{}", "cfg").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.ptc.tau_cls, 0.8);
        assert_eq!(cfg.plan.ema_alpha, 0.9996);
        assert_eq!(cfg.ait.gamma, 0.05);
    }

    #[test]
    fn unknown_keys_fail_with_path() {
        let e = RunConfig::parse(r#"{"ptc": {"tau_cls": 0.7, "tau_clss": 0.1}}"#, "cfg").unwrap_err();
        assert!(e.is_validation());
        assert!(e.to_string().contains("ptc"), "{e}");
        let e = RunConfig::parse(r#"{"sim": {"loop": {"epochz": 3}}}"#, "cfg").unwrap_err();
        assert!(e.to_string().contains("sim.loop"), "{e}");
    }

    #[test]
    fn out_of_range_values_fail_with_path() {
        let e = RunConfig::parse(r#"{"ptc": {"tau_cls": 1.5}}"#, "cfg").unwrap_err();
        assert!(e.to_string().contains("ptc.tau_cls"), "{e}");
        let e = RunConfig::parse(r#"{"plan": {"ema_alpha": 1.0}}"#, "cfg").unwrap_err();
        assert!(e.to_string().contains("plan.ema_alpha"), "{e}");
        let e = RunConfig::parse(r#"{"sim": {"models": {"teacher": {"skill": 2}}}}"#, "cfg").unwrap_err();
        assert!(e.to_string().contains("sim.models.teacher.skill"), "{e}");
    }

    #[test]
    fn glt_settings_do_not_touch_the_simulator() {
        let mut cfg = RunConfig::default();
        cfg.sim.n_scenes = 30;
        cfg.sim.loop_cfg.epochs = 6;
        cfg.plan = PhasePlan::scaled(0, 180);
        let a = cfg.simulate().unwrap().report;
        cfg.glt = GltConfig::disabled();
        let b = cfg.simulate().unwrap().report;
        assert_eq!(a, b);
    }
}
