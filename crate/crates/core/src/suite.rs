//! Multi-seed comparison of the full method, its ablations and the
//! fine-tuning baseline on one stream configuration.

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, FeatureReplay, Method};
use crate::error::Result;
use crate::metrics;
use crate::pipeline::{Experiment, RunLog, RunPlan, TaskStream};
use crate::vit::BackboneParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Dia,
    DiaNoPdl,
    DiaNoPfr,
    DiaGaussian,
    Finetune,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Dia, Arm::DiaNoPdl, Arm::DiaNoPfr, Arm::DiaGaussian, Arm::Finetune];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Dia => "dia",
            Arm::DiaNoPdl => "dia_no_pdl",
            Arm::DiaNoPfr => "dia_no_pfr",
            Arm::DiaGaussian => "dia_gaussian",
            Arm::Finetune => "finetune",
        }
    }
}

/// Outcome of one arm on one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub seed: u64,
    pub final_accuracy: f64,
    pub average_accuracy: f64,
    pub accuracies: Vec<f64>,
    pub old_task_reads: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub results: Vec<ArmResult>,
}

impl SuiteReport {
    pub fn arm(&self, arm: Arm) -> Vec<&ArmResult> {
        self.results.iter().filter(|r| r.arm == arm).collect()
    }

    pub fn finals(&self, arm: Arm) -> Vec<f64> {
        self.arm(arm).iter().map(|r| r.final_accuracy).collect()
    }

    pub fn averages(&self, arm: Arm) -> Vec<f64> {
        self.arm(arm).iter().map(|r| r.average_accuracy).collect()
    }

    /// `arm,seed,final_accuracy,average_accuracy` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["arm", "seed", "final_accuracy", "average_accuracy"])?;
        for r in &self.results {
            w.write_record([r.arm.name().to_string(), r.seed.to_string(), r.final_accuracy.to_string(), r.average_accuracy.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| crate::Error::usage(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Per-arm medians: `arm,median_final,median_average`.
    pub fn median_table(&self) -> Vec<(Arm, f64, f64)> {
        Arm::ALL
            .into_iter()
            .filter(|&a| !self.arm(a).is_empty())
            .map(|a| (a, metrics::median(&self.finals(a)), metrics::median(&self.averages(a))))
            .collect()
    }
}

fn result(arm: Arm, seed: u64, log: &RunLog) -> ArmResult {
    let m = log.metrics.as_ref().expect("completed run");
    ArmResult {
        arm,
        seed,
        final_accuracy: m.final_accuracy,
        average_accuracy: m.average_accuracy,
        accuracies: m.accuracies.clone(),
        old_task_reads: log.old_task_reads,
    }
}

/// Runs the requested arms for every seed. Arms that differ only in how
/// alignment replays old classes share one trained trunk.
pub fn run_suite(base: &ExperimentConfig, backbone: &BackboneParams, seeds: &[u64], arms: &[Arm]) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let stream = TaskStream::from_config(&cfg)?;
        let trunk_arms: Vec<(Arm, FeatureReplay)> = [
            (Arm::Dia, FeatureReplay::Reconstructed),
            (Arm::DiaNoPfr, FeatureReplay::Prototype),
            (Arm::DiaGaussian, FeatureReplay::Gaussian),
        ]
        .into_iter()
        .filter(|(a, _)| arms.contains(a))
        .collect();
        if !trunk_arms.is_empty() {
            let plan = RunPlan {
                method: Method::Dia,
                lambda: cfg.train.lambda,
                pdl_variant: cfg.ablation.pdl_variant,
                replays: trunk_arms.iter().map(|p| p.1).collect(),
            };
            let logs = Experiment::new(&cfg, plan, backbone, &stream)?.run(None)?;
            for ((arm, _), log) in trunk_arms.iter().zip(&logs) {
                report.results.push(result(*arm, seed, log));
            }
        }
        if arms.contains(&Arm::DiaNoPdl) {
            let plan = RunPlan {
                method: Method::Dia,
                lambda: 0.0,
                pdl_variant: cfg.ablation.pdl_variant,
                replays: vec![FeatureReplay::Reconstructed],
            };
            let logs = Experiment::new(&cfg, plan, backbone, &stream)?.run(None)?;
            report.results.push(result(Arm::DiaNoPdl, seed, &logs[0]));
        }
        if arms.contains(&Arm::Finetune) {
            let plan = RunPlan {
                method: Method::Finetune,
                lambda: 0.0,
                pdl_variant: cfg.ablation.pdl_variant,
                replays: Vec::new(),
            };
            let logs = Experiment::new(&cfg, plan, backbone, &stream)?.run(None)?;
            report.results.push(result(Arm::Finetune, seed, &logs[0]));
        }
    }
    report.results.sort_by_key(|r| (r.arm, r.seed));
    Ok(report)
}
