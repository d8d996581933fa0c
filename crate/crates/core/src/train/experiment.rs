use std::fmt::Write as _;
use std::path::Path;

use super::pipeline::Step1Result;
use super::{
    evaluate, step1_train, step2_finetune, Checkpoint, MetricsLog, RewardMode, SelectorKind, TrainConfig, TrainData,
    TrainError,
};
use crate::texture::AggregatorMode;

#[derive(Clone, Debug)]
pub struct RunResult {
    pub coarse: Checkpoint,
    pub fine: Checkpoint,
    pub log: MetricsLog,
}

/// Step 1, step 2, then evaluation on the test views.
pub fn run_pipeline(cfg: &TrainConfig, data: &TrainData) -> Result<RunResult, TrainError> {
    let s1: Step1Result = step1_train(data, cfg)?;
    let coarse = s1.checkpoint(cfg);
    let (fine, step2_rows) = step2_finetune(&coarse, data, cfg)?;
    let mut log = MetricsLog::default();
    for r in s1.rows {
        log.push_step1(r)?;
    }
    log.episodes = s1.episodes;
    for r in step2_rows {
        log.push_step2(r)?;
    }
    log.eval = evaluate(&fine.model, &data.test)?;
    log.selected = fine.selected.clone();
    Ok(RunResult { coarse, fine, log })
}

/// Writes checkpoints, metrics, the resolved config and `selected_views.json`.
pub fn write_run(run: &RunResult, data: &TrainData, dir: &Path) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir)?;
    run.coarse.save(&dir.join("coarse.ckpt"))?;
    run.fine.save(&dir.join("fine.ckpt"))?;
    run.log.write(dir)?;
    std::fs::write(dir.join("config.toml"), run.fine.config.to_toml())?;
    let views: Vec<_> = run
        .fine
        .selected
        .iter()
        .map(|&v| serde_json::json!({"id": v, "label": data.pool[v].label}))
        .collect();
    std::fs::write(dir.join("selected_views.json"), serde_json::to_string_pretty(&views)?)?;
    Ok(())
}

/// 5, 10, ..., 30, then 40, 50, ..., 100, keeping budgets below the pool size.
pub fn default_budgets(pool: usize) -> Vec<usize> {
    (1..=6).map(|k| 5 * k).chain((4..=10).map(|k| 10 * k)).filter(|&b| b < pool).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub budget: usize,
    pub method: SelectorKind,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub selected: Vec<usize>,
}

/// One full run per (budget, method).
pub fn sweep(
    cfg: &TrainConfig,
    data: &TrainData,
    budgets: &[usize],
    methods: &[SelectorKind],
) -> Result<Vec<SweepRow>, TrainError> {
    sweep_with(cfg, data, budgets, methods, |_, _| Ok(()))
}

/// [`sweep`], handing every finished run to `sink` before moving on.
pub fn sweep_with(
    cfg: &TrainConfig,
    data: &TrainData,
    budgets: &[usize],
    methods: &[SelectorKind],
    mut sink: impl FnMut(&SweepRow, &RunResult) -> Result<(), TrainError>,
) -> Result<Vec<SweepRow>, TrainError> {
    let n = data.pool.len();
    if let Some(&b) = budgets.iter().find(|&&b| b >= n || b == 0) {
        return Err(TrainError::Config(format!("budget {b} must lie in 1..{n}")));
    }
    let mut rows = Vec::new();
    for &budget in budgets {
        for &method in methods {
            let mut c = cfg.clone();
            c.m = budget;
            c.selector = method;
            let run = run_pipeline(&c, data)?;
            let row = SweepRow {
                budget,
                method,
                mean_psnr: run.log.mean_psnr(),
                mean_ssim: run.log.mean_ssim(),
                selected: run.log.selected.clone(),
            };
            sink(&row, &run)?;
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("budget,method,mean_psnr,mean_ssim\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.budget, r.method.name(), r.mean_psnr, r.mean_ssim).unwrap();
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrendFlag {
    pub method: SelectorKind,
    pub budget: usize,
    pub previous: usize,
    /// PSNR lost against the previous budget, in dB.
    pub drop: f64,
}

/// Budgets where a method's mean PSNR falls more than `slack` dB below its previous budget.
pub fn trend_audit(rows: &[SweepRow], slack: f64) -> Vec<TrendFlag> {
    let mut methods: Vec<SelectorKind> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    let mut flags = Vec::new();
    for m in methods {
        let mut series: Vec<&SweepRow> = rows.iter().filter(|r| r.method == m).collect();
        series.sort_by_key(|r| r.budget);
        for pair in series.windows(2) {
            let drop = pair[0].mean_psnr - pair[1].mean_psnr;
            if drop > slack {
                flags.push(TrendFlag {
                    method: m,
                    budget: pair[1].budget,
                    previous: pair[0].budget,
                    drop,
                });
            }
        }
    }
    flags
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Switch {
    NoAugment,
    SingleLoss,
    RandomSelector,
    NoAggregator,
    Vanilla9,
    UvOnly,
    UvDepth,
    UvNormal,
    RewardAlt,
}

impl Switch {
    pub const ALL: [Switch; 9] = [
        Switch::NoAugment,
        Switch::SingleLoss,
        Switch::RandomSelector,
        Switch::NoAggregator,
        Switch::Vanilla9,
        Switch::UvOnly,
        Switch::UvDepth,
        Switch::UvNormal,
        Switch::RewardAlt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Switch::NoAugment => "no_augment",
            Switch::SingleLoss => "single_loss",
            Switch::RandomSelector => "random_selector",
            Switch::NoAggregator => "no_aggregator",
            Switch::Vanilla9 => "vanilla9",
            Switch::UvOnly => "uv_only",
            Switch::UvDepth => "uv_depth",
            Switch::UvNormal => "uv_normal",
            Switch::RewardAlt => "reward_alt",
        }
    }

    pub fn parse(name: &str) -> Result<Self, TrainError> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| {
                let known: Vec<_> = Self::ALL.iter().map(|s| s.name()).collect();
                TrainError::Config(format!("unknown switch {name:?}; expected one of {}", known.join(", ")))
            })
    }

    pub fn apply(self, cfg: &mut TrainConfig) {
        match self {
            Switch::NoAugment => cfg.augment = false,
            Switch::SingleLoss => {
                let w = &mut cfg.weights;
                (w.ssim, w.perceptual, w.freq, w.tv, w.reg) = (0.0, 0.0, 0.0, 0.0, 0.0);
            }
            Switch::RandomSelector => cfg.selector = SelectorKind::Random,
            // the neural texture alone reaches the renderer
            Switch::NoAggregator | Switch::UvOnly => cfg.model.mode = AggregatorMode::UvOnly,
            Switch::Vanilla9 => cfg.model.mode = AggregatorMode::Vanilla9,
            Switch::UvDepth => cfg.model.mode = AggregatorMode::UvDepth,
            Switch::UvNormal => cfg.model.mode = AggregatorMode::UvNormal,
            Switch::RewardAlt => cfg.reward = RewardMode::NegPsnrGain,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    /// `"full"` or a switch name.
    pub name: String,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// The full method followed by one run per switch.
pub fn ablate(cfg: &TrainConfig, data: &TrainData, switches: &[Switch]) -> Result<Vec<AblationRow>, TrainError> {
    ablate_with(cfg, data, switches, |_, _| Ok(()))
}

pub fn ablate_with(
    cfg: &TrainConfig,
    data: &TrainData,
    switches: &[Switch],
    mut sink: impl FnMut(&AblationRow, &RunResult) -> Result<(), TrainError>,
) -> Result<Vec<AblationRow>, TrainError> {
    let mut rows = Vec::with_capacity(switches.len() + 1);
    let variants = std::iter::once(("full".to_string(), cfg.clone())).chain(switches.iter().map(|s| {
        let mut c = cfg.clone();
        s.apply(&mut c);
        (s.name().to_string(), c)
    }));
    for (name, c) in variants {
        let run = run_pipeline(&c, data)?;
        let row = AblationRow {
            name,
            mean_psnr: run.log.mean_psnr(),
            mean_ssim: run.log.mean_ssim(),
        };
        sink(&row, &run)?;
        rows.push(row);
    }
    Ok(rows)
}

/// Ablation table; perceptual-similarity columns are not produced.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,psnr,ssim\n");
    for r in rows {
        writeln!(s, "{},{},{}", r.name, r.mean_psnr, r.mean_ssim).unwrap();
    }
    s
}
