//! Self-supervised pre-training: stock code and sector classification plus
//! masked moving-average (or masked value) prediction.

use ndgrad::{Adam, AdamConfig, Graph, NdError, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Sample, Split, CLOSE, N_FEATURES};
use crate::losses::{self, Coefficients};
use crate::model::{self, Head, SsptParams};
use crate::runlog::{MetricLog, TrainRun};
use crate::{mix_seed, Result, SsptError};

/// Windows with class labels, as consumed by the pre-training loop.
pub trait WindowSource: Sync {
    fn n_features(&self) -> usize;
    fn window(&self) -> usize;
    /// Column holding the normalized close price.
    fn close_column(&self) -> usize;
    fn len(&self, split: Split) -> usize;
    /// `[window * n_features]` normalized rows of sample `i`.
    fn rows(&self, split: Split, i: usize) -> &[f32];
    fn stock(&self, split: Split, i: usize) -> usize;
    fn sector(&self, split: Split, i: usize) -> usize;
}

impl Dataset {
    fn sample_at(&self, split: Split, i: usize) -> Sample {
        let n = self.n_stocks();
        Sample {
            stock: i % n,
            anchor: self.anchors(split)[i / n],
        }
    }
}

impl WindowSource for Dataset {
    fn n_features(&self) -> usize {
        N_FEATURES
    }

    fn window(&self) -> usize {
        Dataset::window(self)
    }

    fn close_column(&self) -> usize {
        CLOSE
    }

    fn len(&self, split: Split) -> usize {
        self.sample_count(split)
    }

    fn rows(&self, split: Split, i: usize) -> &[f32] {
        self.window_rows(self.sample_at(split, i))
    }

    fn stock(&self, split: Split, i: usize) -> usize {
        self.sample_at(split, i).stock
    }

    fn sector(&self, _split: Split, i: usize) -> usize {
        Dataset::sector(self, i % self.n_stocks())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureMode {
    All,
    /// Every column except the close price is zeroed; input width is kept.
    CloseOnly,
}

/// Which masked objective fills the third task slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskedTask {
    /// Predict the window-mean close from the masked window.
    Map,
    /// Reconstruct the close at each masked step.
    Mvp,
}

impl MaskedTask {
    pub fn head(self) -> Head {
        match self {
            MaskedTask::Map => Head::Map,
            MaskedTask::Mvp => Head::Mvp,
        }
    }

    pub fn metric(self) -> &'static str {
        match self {
            MaskedTask::Map => "map_mse",
            MaskedTask::Mvp => "mvp_mse",
        }
    }
}

/// Masked time-step indices for one window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub steps: Vec<usize>,
}

impl MaskPlan {
    /// `round(rate * window)` distinct steps (at least one), ascending.
    pub fn count(rate: f64, window: usize) -> usize {
        ((rate * window as f64).round() as usize).clamp(1, window)
    }

    pub fn draw(rng: &mut impl Rng, rate: f64, window: usize) -> Self {
        let k = Self::count(rate, window);
        let mut steps = rand::seq::index::sample(rng, window, k).into_vec();
        steps.sort_unstable();
        MaskPlan { steps }
    }
}

/// Writes masked rows for one window into `out` (`[window * (m + 1)]`):
/// masked steps get zero features and indicator 1, other steps copy `rows`
/// with indicator 0.
pub fn apply_mask(rows: &[f32], m: usize, plan: &MaskPlan, out: &mut [f32]) {
    let window = rows.len() / m;
    for t in 0..window {
        let dst = &mut out[t * (m + 1)..(t + 1) * (m + 1)];
        if plan.steps.binary_search(&t).is_ok() {
            dst.iter_mut().for_each(|v| *v = 0.0);
            dst[m] = 1.0;
        } else {
            dst[..m].copy_from_slice(&rows[t * m..(t + 1) * m]);
            dst[m] = 0.0;
        }
    }
}

/// Mean of the window's close column.
pub fn map_target(rows: &[f32], m: usize, close: usize) -> f32 {
    let window = rows.len() / m;
    let sum: f64 = (0..window).map(|t| rows[t * m + close] as f64).sum();
    (sum / window as f64) as f32
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub coefficients: Coefficients,
    pub masked: MaskedTask,
    pub lr: f64,
    pub mask_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub feature_mode: FeatureMode,
    pub batch_size: usize,
    /// Training samples drawn per epoch (all when `None`).
    pub train_samples: Option<usize>,
    /// Evaluation samples per split, evenly spaced (all when `None`).
    pub eval_samples: Option<usize>,
    /// Also evaluate the test split each epoch.
    pub eval_test: bool,
}

impl PretrainConfig {
    pub fn new(coefficients: Coefficients) -> Self {
        let lr = if coefficients.alpha == 0.0 && coefficients.beta == 0.0 {
            1e-4
        } else {
            1e-3
        };
        PretrainConfig {
            coefficients,
            masked: MaskedTask::Map,
            lr,
            mask_rate: 0.3,
            epochs: 100,
            seed: 0,
            feature_mode: FeatureMode::All,
            batch_size: 64,
            train_samples: None,
            eval_samples: None,
            eval_test: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.coefficients.validate()?;
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return Err(SsptError::Config(format!("mask rate {} outside (0, 1]", self.mask_rate)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(SsptError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(SsptError::Config("epochs and batch size must be positive".into()));
        }
        Ok(())
    }

    fn scc(&self) -> bool {
        self.coefficients.alpha > 0.0
    }

    fn ssc(&self) -> bool {
        self.coefficients.beta > 0.0
    }

    fn masked_active(&self) -> bool {
        self.coefficients.gamma > 0.0
    }

    /// Heads the active tasks need.
    pub fn heads(&self) -> Vec<Head> {
        let mut heads = Vec::new();
        if self.scc() {
            heads.push(Head::Scc);
        }
        if self.ssc() {
            heads.push(Head::Ssc);
        }
        if self.masked_active() {
            heads.push(self.masked.head());
        }
        heads
    }

    /// Validation metric used for model selection, and whether larger is better.
    pub fn selection_metric(&self) -> (&'static str, bool) {
        if self.scc() {
            ("scc_acc", true)
        } else if self.ssc() {
            ("ssc_acc", true)
        } else {
            (self.masked.metric(), false)
        }
    }
}

/// One assembled mini-batch.
struct Batch {
    clean: Tensor<f32>,
    masked: Option<(Tensor<f32>, Vec<f32>, Tensor<f32>, Tensor<f32>)>,
    stocks: Vec<usize>,
    sectors: Vec<usize>,
}

fn assemble(
    source: &dyn WindowSource,
    split: Split,
    idx: &[usize],
    cfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Batch {
    let (t, m) = (source.window(), source.n_features());
    let close = source.close_column();
    let b = idx.len();
    let mut clean = vec![0.0f32; b * t * (m + 1)];
    let mut rows_buf = vec![0.0f32; t * m];
    let mut masked = cfg.masked_active().then(|| {
        (
            vec![0.0f32; b * t * (m + 1)],
            Vec::with_capacity(b),
            vec![0.0f32; b * t],
            vec![0.0f32; b * t],
        )
    });
    for (k, &i) in idx.iter().enumerate() {
        rows_buf.copy_from_slice(source.rows(split, i));
        if cfg.feature_mode == FeatureMode::CloseOnly {
            for (j, v) in rows_buf.iter_mut().enumerate() {
                if j % m != close {
                    *v = 0.0;
                }
            }
        }
        let dst = &mut clean[k * t * (m + 1)..(k + 1) * t * (m + 1)];
        for s in 0..t {
            dst[s * (m + 1)..s * (m + 1) + m].copy_from_slice(&rows_buf[s * m..(s + 1) * m]);
        }
        if let Some((input, targets, step_targets, mask)) = masked.as_mut() {
            let plan = MaskPlan::draw(rng, cfg.mask_rate, t);
            apply_mask(&rows_buf, m, &plan, &mut input[k * t * (m + 1)..(k + 1) * t * (m + 1)]);
            targets.push(map_target(&rows_buf, m, close));
            for s in 0..t {
                step_targets[k * t + s] = rows_buf[s * m + close];
            }
            for &s in &plan.steps {
                mask[k * t + s] = 1.0;
            }
        }
    }
    let shape = vec![b, t, m + 1];
    Batch {
        clean: Tensor::new(shape.clone(), clean).expect("batch shape"),
        masked: masked.map(|(input, targets, steps, mask)| {
            (
                Tensor::new(shape, input).expect("batch shape"),
                targets,
                Tensor::new(vec![b, t], steps).expect("batch shape"),
                Tensor::new(vec![b, t], mask).expect("batch shape"),
            )
        }),
        stocks: idx.iter().map(|&i| source.stock(split, i)).collect(),
        sectors: idx.iter().map(|&i| source.sector(split, i)).collect(),
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Running sums for one split within an epoch.
#[derive(Default)]
struct Tally {
    samples: usize,
    loss: f64,
    batches: usize,
    scc_correct: usize,
    ssc_correct: usize,
    masked_sse: f64,
    masked_count: usize,
}

impl Tally {
    fn record(&self, log: &mut MetricLog, epoch: usize, split: &str, cfg: &PretrainConfig, with_loss: bool) {
        if with_loss {
            log.push(epoch, split, "loss", self.loss / self.batches.max(1) as f64);
        }
        if cfg.scc() {
            log.push(epoch, split, "scc_acc", self.scc_correct as f64 / self.samples as f64);
        }
        if cfg.ssc() {
            log.push(epoch, split, "ssc_acc", self.ssc_correct as f64 / self.samples as f64);
        }
        if cfg.masked_active() {
            log.push(epoch, split, cfg.masked.metric(), self.masked_sse / self.masked_count as f64);
        }
    }

    fn metric(&self, name: &str) -> f64 {
        match name {
            "scc_acc" => self.scc_correct as f64 / self.samples as f64,
            "ssc_acc" => self.ssc_correct as f64 / self.samples as f64,
            _ => self.masked_sse / self.masked_count as f64,
        }
    }
}

struct Outputs {
    loss: Var,
    scc: Option<Var>,
    ssc: Option<Var>,
    masked: Option<Var>,
}

fn build_loss(
    g: &mut Graph<f32>,
    params: &SsptParams<f32>,
    bound: &model::Bound,
    batch: &Batch,
    cfg: &PretrainConfig,
) -> Result<Outputs> {
    let (mut scc, mut ssc, mut masked_out) = (None, None, None);
    let (mut scc_loss, mut ssc_loss, mut masked_loss) = (None, None, None);
    if cfg.scc() || cfg.ssc() {
        let x = g.constant(batch.clean.clone())?;
        let hidden = model::encode(g, params, bound, x, None)?;
        if cfg.scc() {
            let logits = model::apply_head(g, params, bound, hidden, Head::Scc)?;
            scc_loss = Some(losses::scc_loss(g, logits, &batch.stocks)?);
            scc = Some(logits);
        }
        if cfg.ssc() {
            let logits = model::apply_head(g, params, bound, hidden, Head::Ssc)?;
            ssc_loss = Some(losses::ssc_loss(g, logits, &batch.sectors)?);
            ssc = Some(logits);
        }
    }
    if let Some((input, targets, step_targets, mask)) = &batch.masked {
        let x = g.constant(input.clone())?;
        let hidden = model::encode(g, params, bound, x, None)?;
        let pred = model::apply_head(g, params, bound, hidden, cfg.masked.head())?;
        masked_loss = Some(match cfg.masked {
            MaskedTask::Map => losses::map_loss(g, pred, targets)?,
            MaskedTask::Mvp => losses::mvp_loss(g, pred, step_targets, mask)?,
        });
        masked_out = Some(pred);
    }
    let loss = losses::combined_loss(g, cfg.coefficients, scc_loss, ssc_loss, masked_loss)?;
    Ok(Outputs {
        loss,
        scc,
        ssc,
        masked: masked_out,
    })
}

fn tally_batch(g: &Graph<f32>, out: &Outputs, batch: &Batch, cfg: &PretrainConfig, tally: &mut Tally) {
    tally.samples += batch.stocks.len();
    tally.batches += 1;
    tally.loss += g.value(out.loss).item() as f64;
    if let Some(v) = out.scc {
        tally.scc_correct += correct(g.value(v), &batch.stocks);
    }
    if let Some(v) = out.ssc {
        tally.ssc_correct += correct(g.value(v), &batch.sectors);
    }
    if let (Some(v), Some((_, targets, steps, mask))) = (out.masked, &batch.masked) {
        let pred = g.value(v).data();
        match cfg.masked {
            MaskedTask::Map => {
                for (p, t) in pred.iter().zip(targets) {
                    tally.masked_sse += ((p - t) as f64).powi(2);
                }
                tally.masked_count += targets.len();
            }
            MaskedTask::Mvp => {
                for ((p, t), m) in pred.iter().zip(steps.data()).zip(mask.data()) {
                    if *m != 0.0 {
                        tally.masked_sse += ((p - t) as f64).powi(2);
                        tally.masked_count += 1;
                    }
                }
            }
        }
    }
}

fn diverged(epoch: usize, step: usize, e: SsptError) -> SsptError {
    match e {
        SsptError::Tensor(NdError::NonFinite { kernel }) => SsptError::Diverged {
            epoch,
            step,
            detail: format!("non-finite value in `{kernel}`"),
        },
        other => other,
    }
}

/// Evenly spaced subset of `0..len` with at most `cap` members.
pub(crate) fn spread(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < len => (0..c).map(|k| k * len / c).collect(),
        _ => (0..len).collect(),
    }
}

const EVAL_BATCH: usize = 256;

fn evaluate(
    source: &dyn WindowSource,
    split: Split,
    params: &SsptParams<f32>,
    cfg: &PretrainConfig,
) -> Result<Tally> {
    let idx = spread(source.len(split), cfg.eval_samples);
    // the same masks every epoch so validation numbers are comparable
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xe7a1 + split as u64));
    let mut tally = Tally::default();
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = assemble(source, split, chunk, cfg, &mut rng);
        let mut g = Graph::new();
        let bound = model::bind(&mut g, params, |_| false)?;
        let out = build_loss(&mut g, params, &bound, &batch, cfg)?;
        tally_batch(&g, &out, &batch, cfg, &mut tally);
    }
    Ok(tally)
}

/// Trains every parameter on the combined objective and keeps the epoch with
/// the best validation metric.
pub fn run_pretraining(
    source: &dyn WindowSource,
    cfg: &PretrainConfig,
    mut params: SsptParams<f32>,
) -> Result<TrainRun> {
    cfg.validate()?;
    for head in cfg.heads() {
        params.head_spec(head)?;
    }
    if source.len(Split::Train) == 0 || source.len(Split::Valid) == 0 {
        return Err(SsptError::Data("pre-training needs train and valid samples".into()));
    }
    if params.config().window != source.window() || params.config().n_features != source.n_features() {
        return Err(SsptError::Data(format!(
            "model expects window {} x {} features, data has {} x {}",
            params.config().window,
            params.config().n_features,
            source.window(),
            source.n_features()
        )));
    }
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let (metric, larger_better) = cfg.selection_metric();
    let mut log = MetricLog::default();
    let mut best: Option<(usize, f64, SsptParams<f32>)> = None;
    let mut order: Vec<usize> = (0..source.len(Split::Train)).collect();

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let take = cfg.train_samples.unwrap_or(order.len()).min(order.len());
        let mut tally = Tally::default();
        for (step, chunk) in order[..take].chunks(cfg.batch_size).enumerate() {
            let batch = assemble(source, Split::Train, chunk, cfg, &mut rng);
            let mut g = Graph::new();
            let grads = (|| {
                let bound = model::bind(&mut g, &params, |_| true)?;
                let out = build_loss(&mut g, &params, &bound, &batch, cfg)?;
                let grads = g.backward(out.loss)?;
                tally_batch(&g, &out, &batch, cfg, &mut tally);
                Ok(grads)
            })()
            .map_err(|e| diverged(epoch, step, e))?;
            adam.step(params.select_mut(|_| true), &grads)
                .map_err(|e| diverged(epoch, step, e.into()))?;
        }
        tally.record(&mut log, epoch, "train", cfg, true);

        let valid = evaluate(source, Split::Valid, &params, cfg).map_err(|e| diverged(epoch, 0, e))?;
        valid.record(&mut log, epoch, "valid", cfg, true);
        if cfg.eval_test && source.len(Split::Test) > 0 {
            let test = evaluate(source, Split::Test, &params, cfg).map_err(|e| diverged(epoch, 0, e))?;
            test.record(&mut log, epoch, "test", cfg, true);
        }
        let value = valid.metric(metric);
        let improved = match &best {
            None => true,
            Some((_, b, _)) => {
                if larger_better {
                    value > *b
                } else {
                    value < *b
                }
            }
        };
        if improved {
            best = Some((epoch, value, params.clone()));
        }
    }
    let (best_epoch, best_metric, best_params) = best.expect("at least one epoch");
    let tunable_params = best_params.count(|_| true);
    Ok(TrainRun {
        log,
        best_epoch,
        best_metric,
        best_metric_name: metric.to_string(),
        params: best_params,
        optimizer: adam.into_state(),
        tunable_params,
    })
}

/// Metrics of `params` on one split with the configured tasks.
pub fn evaluate_split(
    source: &dyn WindowSource,
    split: Split,
    params: &SsptParams<f32>,
    cfg: &PretrainConfig,
) -> Result<Vec<(String, f64)>> {
    let tally = evaluate(source, split, params, cfg)?;
    let mut log = MetricLog::default();
    tally.record(&mut log, 0, split.name(), cfg, false);
    Ok(log.rows().iter().map(|r| (r.metric.clone(), r.value)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_count_rounds_with_floor_of_one() {
        assert_eq!(MaskPlan::count(0.3, 16), 5);
        assert_eq!(MaskPlan::count(0.01, 16), 1);
        assert_eq!(MaskPlan::count(1.0, 16), 16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan = MaskPlan::draw(&mut rng, 0.3, 16);
        assert_eq!(plan.steps.len(), 5);
        assert!(plan.steps.windows(2).all(|w| w[0] < w[1]));
        assert!(plan.steps.iter().all(|&s| s < 16));
    }

    #[test]
    fn masking_everything_zeroes_features() {
        let rows: Vec<f32> = (0..8).map(|v| v as f32 + 1.0).collect(); // 4 steps x 2 features
        let plan = MaskPlan { steps: vec![0, 1, 2, 3] };
        let mut out = vec![9.0; 12];
        apply_mask(&rows, 2, &plan, &mut out);
        assert_eq!(out, [0.0, 0.0, 1.0].repeat(4));

        let plan = MaskPlan { steps: vec![1] };
        apply_mask(&rows, 2, &plan, &mut out);
        assert_eq!(out, [1.0, 2.0, 0.0, 0.0, 0.0, 1.0, 5.0, 6.0, 0.0, 7.0, 8.0, 0.0]);
    }

    #[test]
    fn map_target_is_window_mean() {
        assert!((map_target(&[0.1, 9.0, 0.3, 9.0], 2, 0) - 0.2).abs() < 1e-7);
        assert_eq!(map_target(&[0.7; 6], 1, 0), 0.7);
    }

    #[test]
    fn default_learning_rates_follow_tasks() {
        let c = |alpha, beta, gamma| Coefficients { alpha, beta, gamma };
        assert_eq!(PretrainConfig::new(c(1.0, 0.0, 0.0)).lr, 1e-3);
        assert_eq!(PretrainConfig::new(c(0.0, 0.0, 1.0)).lr, 1e-4);
        assert_eq!(PretrainConfig::new(c(1.0, 1.0, 10.0)).lr, 1e-3);
        assert_eq!(PretrainConfig::new(c(0.0, 1.0, 1.0)).selection_metric(), ("ssc_acc", true));
    }

    #[test]
    fn spread_is_even_and_capped() {
        assert_eq!(spread(10, Some(5)), [0, 2, 4, 6, 8]);
        assert_eq!(spread(3, Some(5)), [0, 1, 2]);
        assert_eq!(spread(4, None), [0, 1, 2, 3]);
    }
}
