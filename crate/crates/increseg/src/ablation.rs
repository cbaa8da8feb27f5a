//! The 2x2 ablation grid over {pseudo-label fusion} x {exemplar-guided
//! augmentation} at the incremental step.
//!
//! Per seed, the base task is trained once (always with fusion, as in the
//! source ablation protocol) and each grid arm re-runs the incremental task
//! from that shared checkpointed state with its own fusion/augmentation
//! switches. Results report base / novel / all mIoU per arm, averaged over
//! seeds.

use crate::config::RunConfig;
use crate::dataset::Corpus;
use crate::error::Result;
use crate::eval::TaskMetrics;
use crate::protocol::{
    run_task, split_dataset, ScenarioConfig, TaskRuntime, TaskState,
};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationArm {
    pub fusion: bool,
    pub augmentation: bool,
}

impl AblationArm {
    pub fn label(&self) -> String {
        format!(
            "f{}a{}",
            if self.fusion { 1 } else { 0 },
            if self.augmentation { 1 } else { 0 }
        )
    }

    /// The full grid in table-row order: baseline, +fusion, +both, +aug only.
    pub fn full_grid() -> Vec<AblationArm> {
        vec![
            AblationArm { fusion: false, augmentation: false },
            AblationArm { fusion: true, augmentation: false },
            AblationArm { fusion: true, augmentation: true },
            AblationArm { fusion: false, augmentation: true },
        ]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub arm: AblationArm,
    pub seed: u64,
    pub final_metrics: TaskMetrics,
    /// Wall time of the full two-task run for this cell (base + incremental).
    pub two_task_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub arms: Vec<AblationArm>,
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn arm_cells(&self, arm: AblationArm) -> impl Iterator<Item = &AblationCell> {
        self.cells.iter().filter(move |c| c.arm == arm)
    }

    /// (base, novel, all) mIoU means over seeds for one arm.
    pub fn arm_mean(&self, arm: AblationArm) -> (f64, f64, f64) {
        let mut base = 0.0;
        let mut novel = 0.0;
        let mut all = 0.0;
        let mut n = 0usize;
        for cell in self.arm_cells(arm) {
            base += cell.final_metrics.base_miou.unwrap_or(0.0);
            novel += cell.final_metrics.novel_miou.unwrap_or(0.0);
            all += cell.final_metrics.all_miou;
            n += 1;
        }
        let n = n.max(1) as f64;
        (base / n, novel / n, all / n)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<8} {:<14} {:>8} {:>8} {:>8}\n",
            "fusion", "augmentation", "base", "novel", "all"
        ));
        for &arm in &self.arms {
            let (base, novel, all) = self.arm_mean(arm);
            out.push_str(&format!(
                "{:<8} {:<14} {:>8.4} {:>8.4} {:>8.4}\n",
                if arm.fusion { "yes" } else { "-" },
                if arm.augmentation { "yes" } else { "-" },
                base,
                novel,
                all
            ));
        }
        out
    }
}

/// Runs the grid on a two-task schedule. `run_root` receives one directory
/// per (seed, arm) plus a shared base-task directory per seed.
pub fn run_grid(
    cfg: &RunConfig,
    corpus: &Corpus,
    val: &Corpus,
    arms: &[AblationArm],
    seeds: &[u64],
    run_root: &Path,
) -> Result<AblationReport> {
    let schedule = cfg.task_schedule()?;
    let scenario =
        ScenarioConfig { scenario: cfg.scenario, schedule: schedule.clone(), seed: cfg.run.seed };
    let editor = cfg.build_editor()?;

    let mut cells = Vec::new();
    for &seed in seeds {
        let base_dir = run_root.join(format!("seed{seed}")).join("base");
        let make_runtime = |dir: &Path, fusion: bool, augmentation: bool| TaskRuntime {
            run_dir: dir.to_path_buf(),
            oracle: &cfg.oracle,
            editor: editor.as_editor(),
            net_cfg: cfg.net,
            pseudo_cfg: crate::pseudo::PseudoLabelConfig {
                fusion_enabled: fusion,
                ..cfg.pseudo_config()
            },
            refresh: cfg.pseudo.refresh,
            loss_initial: cfg.loss_config(1),
            loss_incremental: cfg.loss_config(2),
            opt_initial: crate::train::OptimizerConfig { seed, ..cfg.optimizer_config(1) },
            opt_incremental: crate::train::OptimizerConfig { seed, ..cfg.optimizer_config(2) },
            exemplar_budget: cfg.exemplar.budget,
            exemplar_min_area: cfg.exemplar.min_area,
            augmentation_enabled: augmentation,
            p_aug: cfg.exemplar.p_aug,
            region: cfg.region_config(),
            include_background_in_all: cfg.eval.include_background_in_all,
            seed,
        };

        // shared base task, fusion always on
        let base_started = Instant::now();
        let base_runtime = make_runtime(&base_dir, true, false);
        let split1 = split_dataset(corpus, &scenario, 1)?;
        let base_state =
            run_task(TaskState::fresh(), corpus, &split1, &base_runtime, &schedule, Some(val))?;
        let base_seconds = base_started.elapsed().as_secs_f64();

        let split2 = split_dataset(corpus, &scenario, 2)?;
        for &arm in arms {
            let arm_dir = run_root.join(format!("seed{seed}")).join(arm.label());
            let runtime = make_runtime(&arm_dir, arm.fusion, arm.augmentation);
            let started = Instant::now();
            let state = run_task(
                clone_state(&base_state),
                corpus,
                &split2,
                &runtime,
                &schedule,
                Some(val),
            )?;
            let metrics = state
                .metrics
                .last()
                .cloned()
                .expect("incremental task evaluates against the validation corpus");
            cells.push(AblationCell {
                arm,
                seed,
                final_metrics: metrics,
                two_task_seconds: base_seconds + started.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(AblationReport { arms: arms.to_vec(), seeds: seeds.to_vec(), cells })
}

fn clone_state(state: &TaskState) -> TaskState {
    TaskState {
        completed: state.completed,
        net: state.net.clone(),
        frozen: state.frozen.clone(),
        exemplars: state.exemplars.clone(),
        metrics: state.metrics.clone(),
    }
}

/// The two directional comparisons behind the grid:
/// fusion margin = novel mIoU (fusion on) - novel mIoU (fusion off), both
/// without augmentation; augmentation margin = base mIoU (aug on) - base mIoU
/// (aug off), both with fusion.
pub fn directional_margins(report: &AblationReport) -> (f64, f64) {
    let off = AblationArm { fusion: false, augmentation: false };
    let fusion_only = AblationArm { fusion: true, augmentation: false };
    let both = AblationArm { fusion: true, augmentation: true };
    let (_, novel_off, _) = report.arm_mean(off);
    let (base_fusion, novel_fusion, _) = report.arm_mean(fusion_only);
    let (base_both, _, _) = report.arm_mean(both);
    (novel_fusion - novel_off, base_both - base_fusion)
}
