use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::TrainError;
use crate::loss::STEP2_TERMS;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Step1Row {
    pub epoch: usize,
    /// Mean coarse MSE over the inner iterations of the episode.
    pub dnr_c: f64,
    /// Mean selector loss over the episode's updates; `None` without updates.
    pub rl: Option<f64>,
    pub reward_sum: f64,
    pub epsilon: f64,
    pub selected: Vec<usize>,
}

/// One selector decision. Step 0 is the random first view and has no `q_max`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeRow {
    pub episode: usize,
    pub step: usize,
    pub action: usize,
    pub reward: f64,
    pub epsilon: f64,
    pub q_max: Option<f64>,
}

/// Epoch means of the weighted fine-stage terms; they sum to `total`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Step2Row {
    pub epoch: usize,
    pub total: f64,
    pub terms: [f64; 6],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub view: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsLog {
    pub step1: Vec<Step1Row>,
    pub episodes: Vec<EpisodeRow>,
    pub step2: Vec<Step2Row>,
    pub eval: Vec<EvalRow>,
    pub selected: Vec<usize>,
}

fn check_next(last: Option<usize>, epoch: usize) -> Result<(), TrainError> {
    match last {
        Some(l) if epoch <= l => Err(TrainError::Data(format!("epoch {epoch} logged after {l}"))),
        _ => Ok(()),
    }
}

impl MetricsLog {
    pub fn push_step1(&mut self, row: Step1Row) -> Result<(), TrainError> {
        check_next(self.step1.last().map(|r| r.epoch), row.epoch)?;
        self.step1.push(row);
        Ok(())
    }

    pub fn push_step2(&mut self, row: Step2Row) -> Result<(), TrainError> {
        check_next(self.step2.last().map(|r| r.epoch), row.epoch)?;
        self.step2.push(row);
        Ok(())
    }

    /// Arithmetic mean of per-view PSNR (infinite if any view is exact).
    pub fn mean_psnr(&self) -> f64 {
        self.eval.iter().map(|r| r.psnr).sum::<f64>() / self.eval.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.eval.iter().map(|r| r.ssim).sum::<f64>() / self.eval.len() as f64
    }

    pub fn step1_csv(&self) -> String {
        let mut s = String::from("epoch,dnr_c,rl,reward_sum,epsilon,selected\n");
        for r in &self.step1 {
            let rl = r.rl.map_or(String::new(), |v| v.to_string());
            let sel: Vec<String> = r.selected.iter().map(|v| v.to_string()).collect();
            writeln!(s, "{},{},{},{},{},{}", r.epoch, r.dnr_c, rl, r.reward_sum, r.epsilon, sel.join(" ")).unwrap();
        }
        s
    }

    pub fn step2_csv(&self) -> String {
        let mut s = format!("epoch,total,{}\n", STEP2_TERMS.join(","));
        for r in &self.step2 {
            let terms: Vec<String> = r.terms.iter().map(|v| v.to_string()).collect();
            writeln!(s, "{},{},{}", r.epoch, r.total, terms.join(",")).unwrap();
        }
        s
    }

    pub fn eval_csv(&self) -> String {
        let mut s = String::from("view,psnr,ssim\n");
        for r in &self.eval {
            writeln!(s, "{},{},{}", r.view, r.psnr, r.ssim).unwrap();
        }
        if !self.eval.is_empty() {
            writeln!(s, "mean,{},{}", self.mean_psnr(), self.mean_ssim()).unwrap();
        }
        s
    }

    /// One JSON object per line, tagged by `kind`. Infinite PSNR becomes `null`.
    pub fn jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Tagged<'a, T: Serialize> {
            kind: &'a str,
            #[serde(flatten)]
            row: &'a T,
        }
        let mut s = String::new();
        let mut line = |v: String| {
            s.push_str(&v);
            s.push('\n');
        };
        for r in &self.step1 {
            line(serde_json::to_string(&Tagged { kind: "step1", row: r }).unwrap());
        }
        for r in &self.episodes {
            line(serde_json::to_string(&Tagged { kind: "episode", row: r }).unwrap());
        }
        for r in &self.step2 {
            line(serde_json::to_string(&Tagged { kind: "step2", row: r }).unwrap());
        }
        for r in &self.eval {
            line(serde_json::to_string(&Tagged { kind: "eval", row: r }).unwrap());
        }
        line(serde_json::json!({"kind": "selected", "views": self.selected}).to_string());
        s
    }

    /// Writes `step1.csv`, `step2.csv`, `eval.csv` and `metrics.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), TrainError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("step1.csv"), self.step1_csv())?;
        std::fs::write(dir.join("step2.csv"), self.step2_csv())?;
        std::fs::write(dir.join("eval.csv"), self.eval_csv())?;
        std::fs::write(dir.join("metrics.jsonl"), self.jsonl())?;
        Ok(())
    }
}
