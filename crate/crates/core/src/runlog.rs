use std::fmt::Write as _;

use ndgrad::AdamState;

use crate::model::SsptParams;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Per-epoch metrics, written as `epoch,split,metric,value`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    rows: Vec<MetricRow>,
}

impl MetricLog {
    pub fn push(&mut self, epoch: usize, split: &str, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            epoch,
            split: split.into(),
            metric: metric.into(),
            value,
        });
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    /// Values of one metric in epoch order.
    pub fn series(&self, split: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn get(&self, epoch: usize, split: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.epoch == epoch && r.split == split && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,metric,value\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.epoch, r.split, r.metric, r.value).unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Option<Self> {
        let mut lines = text.lines();
        if lines.next()? != "epoch,split,metric,value" {
            return None;
        }
        let mut log = MetricLog::default();
        for line in lines {
            let mut f = line.split(',');
            let epoch = f.next()?.parse().ok()?;
            let split = f.next()?;
            let metric = f.next()?;
            let value = f.next()?.parse().ok()?;
            if f.next().is_some() {
                return None;
            }
            log.push(epoch, split, metric, value);
        }
        Some(log)
    }
}

/// Outcome of one pre-training or fine-tuning job.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub log: MetricLog,
    /// Epoch (1-based) whose parameters are kept.
    pub best_epoch: usize,
    pub best_metric: f64,
    pub best_metric_name: String,
    pub params: SsptParams<f32>,
    pub optimizer: AdamState<f32>,
    pub tunable_params: usize,
}
