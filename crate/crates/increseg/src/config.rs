//! Run configuration: one TOML file drives every command. Unknown keys are
//! rejected, every numeric field is validated, and command-line overrides
//! address any key by dotted path.

use crate::error::{Error, Result};
use crate::exemplar::{MaskedBlendEditor, RegionConfig, SubprocessEditor};
use crate::loss::{ContrastiveSamplingConfig, LossWeights, PoolingConfig};
use crate::net::NetConfig;
use crate::oracle::SyntheticOracle;
use crate::protocol::{PseudoRefresh, Scenario};
use crate::pseudo::{EntropyDenominator, PseudoLabelConfig};
use crate::synthetic::SyntheticConfig;
use crate::train::{OptimizerConfig, TrainLossConfig};
use crate::types::TaskSchedule;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub name: String,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { name: "run".into(), out_dir: "runs".into(), seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub partitions: Vec<Vec<String>>,
    pub background: String,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            partitions: vec![
                (0..4).map(|i| format!("class{i}")).collect(),
                (4..6).map(|i| format!("class{i}")).collect(),
            ],
            background: "background".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseLossSection {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl PhaseLossSection {
    fn weights(&self) -> LossWeights {
        LossWeights {
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            beta1: self.beta1,
            beta2: self.beta2,
        }
    }
}

impl Default for PhaseLossSection {
    fn default() -> Self {
        Self { alpha1: 1.0, alpha2: 0.1, beta1: 0.0, beta2: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseOptimizerSection {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for PhaseOptimizerSection {
    fn default() -> Self {
        Self { lr: 0.002, momentum: 0.9, epochs: 40, batch_size: 4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossesSection {
    pub initial: PhaseLossSection,
    pub incremental: PhaseLossSection,
}

impl Default for LossesSection {
    fn default() -> Self {
        Self {
            // initial-task defaults
            initial: PhaseLossSection { alpha1: 1.0, alpha2: 0.1, beta1: 0.0, beta2: 0.0 },
            // incremental defaults (the overlap-scenario weighting)
            incremental: PhaseLossSection { alpha1: 1.0, alpha2: 0.01, beta1: 15.0, beta2: 1.0 },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub initial: PhaseOptimizerSection,
    pub incremental: PhaseOptimizerSection,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            initial: PhaseOptimizerSection { lr: 0.002, ..Default::default() },
            incremental: PhaseOptimizerSection { lr: 0.00035, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoSection {
    pub background_threshold: f64,
    pub entropy_denominator: EntropyDenominator,
    pub fusion_enabled: bool,
    pub refresh: PseudoRefresh,
}

impl Default for PseudoSection {
    fn default() -> Self {
        Self {
            background_threshold: 0.5,
            entropy_denominator: EntropyDenominator::Accumulated,
            fusion_enabled: true,
            refresh: PseudoRefresh::TaskStart,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveSection {
    pub samples_per_class: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for ContrastiveSection {
    fn default() -> Self {
        let d = ContrastiveSamplingConfig::default();
        Self { samples_per_class: d.samples_per_class, temperature: d.temperature, seed: d.seed }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolingSection {
    pub epsilon: f64,
    pub focal_q: f64,
    pub focal_lambda: f64,
}

impl Default for PoolingSection {
    fn default() -> Self {
        let d = PoolingConfig::default();
        Self { epsilon: d.epsilon, focal_q: d.focal_q, focal_lambda: d.focal_lambda }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditorKind {
    MaskedBlend,
    Subprocess,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditorSection {
    pub kind: EditorKind,
    pub blend: f64,
    pub feather_radius: usize,
    /// External editor command (subprocess kind only).
    pub command: Option<PathBuf>,
    pub feather_margin: usize,
}

impl Default for EditorSection {
    fn default() -> Self {
        Self {
            kind: EditorKind::MaskedBlend,
            blend: 1.0,
            feather_radius: 1,
            command: None,
            feather_margin: 0,
        }
    }
}

/// The editor behind the config: either the built-in masked blend or an
/// external subprocess.
pub enum ConfiguredEditor {
    Blend(MaskedBlendEditor),
    Subprocess(SubprocessEditor),
}

impl ConfiguredEditor {
    pub fn as_editor(&self) -> &dyn crate::exemplar::ImageEditor {
        match self {
            ConfiguredEditor::Blend(e) => e,
            ConfiguredEditor::Subprocess(e) => e,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExemplarSection {
    pub budget: usize,
    pub min_area: usize,
    pub p_aug: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub augmentation_enabled: bool,
}

impl Default for ExemplarSection {
    fn default() -> Self {
        Self {
            budget: 50,
            min_area: 16,
            p_aug: 0.5,
            scale_min: 0.2,
            scale_max: 0.5,
            augmentation_enabled: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub include_background_in_all: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { include_background_in_all: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2, 3, 4] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub dir: PathBuf,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { dir: "data/synth".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub dataset: DatasetSection,
    pub schedule: ScheduleSection,
    pub scenario: Scenario,
    pub synthetic: SyntheticConfig,
    pub oracle: SyntheticOracle,
    pub editor: EditorSection,
    pub net: NetConfig,
    pub pseudo: PseudoSection,
    pub losses: LossesSection,
    pub contrastive: ContrastiveSection,
    pub pooling: PoolingSection,
    pub kd_normalize: bool,
    pub optimizer: OptimizerSection,
    pub exemplar: ExemplarSection,
    pub eval: EvalSection,
    pub ablation: AblationSection,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario::Overlap
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run: Default::default(),
            dataset: Default::default(),
            schedule: Default::default(),
            scenario: Scenario::Overlap,
            synthetic: Default::default(),
            oracle: Default::default(),
            editor: Default::default(),
            net: Default::default(),
            pseudo: Default::default(),
            losses: Default::default(),
            contrastive: Default::default(),
            pooling: Default::default(),
            kd_normalize: true,
            optimizer: Default::default(),
            exemplar: Default::default(),
            eval: Default::default(),
            ablation: Default::default(),
        }
    }
}

impl RunConfig {
    /// Loads a TOML config, applies `key.path=value` overrides, and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = text
            .parse()
            .map_err(|e| Error::config(format!("config parse error: {e}")))?;
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e| Error::config(format!("config error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.task_schedule()?;
        self.synthetic.validate()?;
        self.oracle.validate()?;
        self.net.validate()?;
        if !(0.0..=1.0).contains(&self.pseudo.background_threshold) {
            return Err(Error::config("pseudo.background_threshold must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.exemplar.p_aug) {
            return Err(Error::config("exemplar.p_aug must be in [0, 1]"));
        }
        if self.exemplar.budget < 1 {
            return Err(Error::config("exemplar.budget must be >= 1"));
        }
        if !(self.exemplar.scale_min > 0.0
            && self.exemplar.scale_min < self.exemplar.scale_max
            && self.exemplar.scale_max <= 1.0)
        {
            return Err(Error::config("exemplar scales must satisfy 0 < min < max <= 1"));
        }
        if !(0.0..=1.0).contains(&self.editor.blend) {
            return Err(Error::config("editor.blend must be in [0, 1]"));
        }
        if matches!(self.editor.kind, EditorKind::Subprocess) && self.editor.command.is_none() {
            return Err(Error::config("editor.kind = subprocess requires editor.command"));
        }
        for (name, phase) in
            [("initial", self.losses.initial), ("incremental", self.losses.incremental)]
        {
            phase
                .weights()
                .validate()
                .map_err(|e| Error::config(format!("losses.{name}: {e}")))?;
        }
        for (name, opt) in [
            ("initial", self.optimizer_config(1)),
            ("incremental", self.optimizer_config(2)),
        ] {
            opt.validate().map_err(|e| Error::config(format!("optimizer.{name}: {e}")))?;
        }
        self.contrastive_config()
            .validate()
            .map_err(|e| Error::config(format!("contrastive: {e}")))?;
        if self.ablation.seeds.is_empty() {
            return Err(Error::config("ablation.seeds must not be empty"));
        }
        Ok(())
    }

    pub fn task_schedule(&self) -> Result<TaskSchedule> {
        TaskSchedule::new(self.schedule.partitions.clone(), self.schedule.background.clone())
    }

    pub fn pseudo_config(&self) -> PseudoLabelConfig {
        PseudoLabelConfig {
            background_threshold: self.pseudo.background_threshold,
            entropy_denominator: self.pseudo.entropy_denominator,
            fusion_enabled: self.pseudo.fusion_enabled,
        }
    }

    pub fn contrastive_config(&self) -> ContrastiveSamplingConfig {
        ContrastiveSamplingConfig {
            samples_per_class: self.contrastive.samples_per_class,
            temperature: self.contrastive.temperature,
            seed: self.contrastive.seed,
        }
    }

    pub fn pooling_config(&self) -> PoolingConfig {
        PoolingConfig {
            epsilon: self.pooling.epsilon,
            focal_q: self.pooling.focal_q,
            focal_lambda: self.pooling.focal_lambda,
        }
    }

    pub fn loss_config(&self, t: usize) -> TrainLossConfig {
        let phase = if t == 1 { self.losses.initial } else { self.losses.incremental };
        TrainLossConfig {
            weights: phase.weights(),
            contrastive: self.contrastive_config(),
            pooling: self.pooling_config(),
            kd_normalize: self.kd_normalize,
        }
    }

    pub fn optimizer_config(&self, t: usize) -> OptimizerConfig {
        let phase = if t == 1 { self.optimizer.initial } else { self.optimizer.incremental };
        OptimizerConfig {
            lr: phase.lr,
            momentum: phase.momentum,
            epochs: phase.epochs,
            batch_size: phase.batch_size,
            seed: self.run.seed,
        }
    }

    pub fn region_config(&self) -> RegionConfig {
        RegionConfig { scale_min: self.exemplar.scale_min, scale_max: self.exemplar.scale_max }
    }

    pub fn build_editor(&self) -> Result<ConfiguredEditor> {
        Ok(match self.editor.kind {
            EditorKind::MaskedBlend => ConfiguredEditor::Blend(MaskedBlendEditor {
                blend: self.editor.blend,
                feather_radius: self.editor.feather_radius,
            }),
            EditorKind::Subprocess => ConfiguredEditor::Subprocess(SubprocessEditor {
                command: self
                    .editor
                    .command
                    .clone()
                    .ok_or_else(|| Error::config("subprocess editor needs a command"))?,
                feather_margin: self.editor.feather_margin,
            }),
        })
    }

    pub fn run_dir(&self) -> PathBuf {
        self.run.out_dir.join(&self.run.name)
    }

    /// Serializes the fully-resolved config (defaults merged) for persisting
    /// alongside outputs.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("serialize: {e}")))
    }
}

fn apply_override(value: &mut toml::Value, item: &str) -> Result<()> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override '{item}' must be key.path=value")))?;
    // parse the value through a dummy assignment so numbers, booleans, and
    // arrays keep their types; anything unparsable becomes a string
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Value>() {
        Ok(doc) => doc.get("v").cloned().expect("dummy key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut cursor = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if i + 1 == parts.len() {
            let table = cursor
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("override path '{path}' is not a table")))?;
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override path '{path}' is not a table")))?;
        cursor = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("override paths always have at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gets_documented_defaults() {
        let cfg = RunConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(cfg.exemplar.budget, 50);
        assert_eq!(cfg.optimizer.initial.lr, 0.002);
        assert_eq!(cfg.optimizer.incremental.lr, 0.00035);
        assert_eq!(cfg.losses.initial.alpha1, 1.0);
        assert_eq!(cfg.losses.initial.alpha2, 0.1);
        assert_eq!(cfg.losses.incremental.beta1, 15.0);
        assert_eq!(cfg.losses.incremental.beta2, 1.0);
        assert_eq!(cfg.contrastive.samples_per_class, 16);
        assert_eq!(cfg.contrastive.temperature, 0.1);
        assert_eq!(cfg.pooling.focal_q, 3.0);
        assert_eq!(cfg.pooling.focal_lambda, 0.01);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("[run]\nnonsense = 3\n", &[]).unwrap_err();
        assert!(err.to_string().contains("nonsense"));
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = RunConfig::from_toml_str(
            "",
            &[
                "optimizer.initial.lr=0.5".into(),
                "run.name=abl".into(),
                "pseudo.fusion_enabled=false".into(),
                "oracle.noise_rate=0.25".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.optimizer.initial.lr, 0.5);
        assert_eq!(cfg.run.name, "abl");
        assert!(!cfg.pseudo.fusion_enabled);
        assert_eq!(cfg.oracle.noise_rate, 0.25);
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        assert!(RunConfig::from_toml_str("[pseudo]\nbackground_threshold = 1.5\n", &[]).is_err());
        assert!(RunConfig::from_toml_str("[exemplar]\np_aug = -0.1\n", &[]).is_err());
        assert!(RunConfig::from_toml_str("[contrastive]\ntemperature = 0.0\n", &[]).is_err());
        assert!(
            RunConfig::from_toml_str("[editor]\nkind = \"subprocess\"\n", &[]).is_err(),
            "subprocess editor without a command must fail"
        );
    }

    #[test]
    fn schedule_round_trips_and_effective_config_serializes() {
        let cfg = RunConfig::from_toml_str(
            "[schedule]\npartitions = [[\"a\",\"b\"],[\"c\"]]\nbackground = \"bg\"\n",
            &[],
        )
        .unwrap();
        let schedule = cfg.task_schedule().unwrap();
        assert_eq!(schedule.num_tasks(), 2);
        let text = cfg.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text, &[]).unwrap();
        assert_eq!(back.schedule.partitions, cfg.schedule.partitions);
    }
}
