//! Command implementations behind the `increseg` binary: synthetic dataset
//! generation, scenario splitting, per-task training, evaluation, and the
//! ablation grid — all driven by one config file.

use crate::ablation::{run_grid, AblationArm};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::Corpus;
use crate::error::{Error, Result};
use crate::eval::format_report;
use crate::protocol::{
    evaluate_on_corpus, run_task, split_dataset, ScenarioConfig, TaskRuntime, TaskSplit, TaskState,
};
use std::path::PathBuf;

fn persist_effective_config(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("effective_config.toml"), cfg.to_toml_string()?)?;
    Ok(())
}

fn train_dir(cfg: &RunConfig) -> PathBuf {
    cfg.dataset.dir.join("train")
}

fn val_dir(cfg: &RunConfig) -> PathBuf {
    cfg.dataset.dir.join("val")
}

fn splits_dir(cfg: &RunConfig) -> PathBuf {
    cfg.run_dir().join("splits")
}

/// `gen-synthetic`: renders the seeded corpus (train + val) into the dataset
/// directory.
pub fn cmd_gen_synthetic(cfg: &RunConfig) -> Result<()> {
    let schedule = cfg.task_schedule()?;
    let classes = schedule.all_classes();
    crate::synthetic::generate(&classes, schedule.background_name(), &cfg.synthetic, &cfg.dataset.dir)?;
    println!(
        "generated {} train / {} val images ({} classes, {}x{}) under {}",
        cfg.synthetic.train_images,
        cfg.synthetic.val_images,
        classes.len(),
        cfg.synthetic.image_size,
        cfg.synthetic.image_size,
        cfg.dataset.dir.display()
    );
    Ok(())
}

/// `split`: computes every task's scenario split and writes the sample-id
/// lists under the run directory.
pub fn cmd_split(cfg: &RunConfig) -> Result<()> {
    persist_effective_config(cfg)?;
    let schedule = cfg.task_schedule()?;
    let corpus = Corpus::load(&train_dir(cfg))?;
    let scenario =
        ScenarioConfig { scenario: cfg.scenario, schedule: schedule.clone(), seed: cfg.run.seed };
    for t in 1..=schedule.num_tasks() {
        let split = split_dataset(&corpus, &scenario, t)?;
        let path = splits_dir(cfg).join(format!("task{t}.json"));
        split.save(&path)?;
        println!("task {t}: {} samples -> {}", split.sample_ids.len(), path.display());
    }
    Ok(())
}

/// `train`: runs tasks 1..=limit (default: the whole schedule), resuming any
/// already-completed task from its checkpoint.
pub fn cmd_train(cfg: &RunConfig, limit: Option<usize>) -> Result<()> {
    persist_effective_config(cfg)?;
    let schedule = cfg.task_schedule()?;
    let last = match limit {
        Some(t) => {
            if t < 1 || t > schedule.num_tasks() {
                return Err(Error::range(format!(
                    "task {t} out of schedule range 1..={}",
                    schedule.num_tasks()
                )));
            }
            t
        }
        None => schedule.num_tasks(),
    };
    let corpus = Corpus::load(&train_dir(cfg))?;
    let val = match Corpus::load(&val_dir(cfg)) {
        Ok(c) => Some(c),
        Err(Error::MissingArtifact { .. }) => None,
        Err(e) => return Err(e),
    };
    let editor = cfg.build_editor()?;
    let runtime = TaskRuntime {
        run_dir: cfg.run_dir(),
        oracle: &cfg.oracle,
        editor: editor.as_editor(),
        net_cfg: cfg.net,
        pseudo_cfg: cfg.pseudo_config(),
        refresh: cfg.pseudo.refresh,
        loss_initial: cfg.loss_config(1),
        loss_incremental: cfg.loss_config(2),
        opt_initial: cfg.optimizer_config(1),
        opt_incremental: cfg.optimizer_config(2),
        exemplar_budget: cfg.exemplar.budget,
        exemplar_min_area: cfg.exemplar.min_area,
        augmentation_enabled: cfg.exemplar.augmentation_enabled,
        p_aug: cfg.exemplar.p_aug,
        region: cfg.region_config(),
        include_background_in_all: cfg.eval.include_background_in_all,
        seed: cfg.run.seed,
    };

    let mut state = TaskState::fresh();
    for t in 1..=last {
        let split = TaskSplit::load(&splits_dir(cfg).join(format!("task{t}.json")))?;
        state = run_task(state, &corpus, &split, &runtime, &schedule, val.as_ref())?;
        match state.metrics.last() {
            Some(m) => println!(
                "task {t} done: base {} novel {} all {:.4}",
                m.base_miou.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
                m.novel_miou.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
                m.all_miou
            ),
            None => println!("task {t} done (no validation corpus)"),
        }
    }
    if !state.metrics.is_empty() {
        let dir = cfg.run_dir();
        std::fs::write(
            dir.join("metrics.json"),
            serde_json::to_string_pretty(&state.metrics)? + "\n",
        )?;
        std::fs::write(dir.join("metrics.txt"), format_report(&state.metrics, &schedule))?;
        print!("{}", format_report(&state.metrics, &schedule));
    }
    Ok(())
}

/// `eval`: re-evaluates every completed task's checkpoint on the validation
/// corpus and writes the report.
pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let schedule = cfg.task_schedule()?;
    let val = Corpus::load(&val_dir(cfg))?;
    let mut rows = Vec::new();
    for t in 1..=schedule.num_tasks() {
        let ck_path = cfg.run_dir().join(format!("task{t}")).join("checkpoint");
        if !ck_path.exists() {
            if t == 1 {
                return Err(Error::MissingArtifact {
                    what: format!("checkpoint at {}", ck_path.display()),
                    hint: "train".into(),
                });
            }
            break;
        }
        let ck = checkpoint::load(&ck_path)?;
        rows.push(evaluate_on_corpus(
            &ck.net,
            &val,
            &schedule,
            t,
            cfg.eval.include_background_in_all,
        )?);
    }
    let dir = cfg.run_dir().join("eval");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    let table = format_report(&rows, &schedule);
    std::fs::write(dir.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

/// `ablate`: the full 2x2 {fusion} x {augmentation} grid over the configured
/// seeds, averaged into a four-row table.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    persist_effective_config(cfg)?;
    let schedule = cfg.task_schedule()?;
    if schedule.num_tasks() != 2 {
        return Err(Error::config("the ablation grid expects a two-task schedule"));
    }
    let corpus = Corpus::load(&train_dir(cfg))?;
    let val = Corpus::load(&val_dir(cfg))?;
    let root = cfg.run_dir().join("ablation");
    let report = run_grid(
        cfg,
        &corpus,
        &val,
        &AblationArm::full_grid(),
        &cfg.ablation.seeds,
        &root,
    )?;
    std::fs::write(root.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let table = report.to_table();
    std::fs::write(root.join("report.txt"), &table)?;
    print!("{table}");
    let (fusion_margin, aug_margin) = crate::ablation::directional_margins(&report);
    println!("fusion novel-mIoU margin:       {fusion_margin:+.4}");
    println!("augmentation base-mIoU margin:  {aug_margin:+.4}");
    Ok(())
}
