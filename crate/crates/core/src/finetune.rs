//! Stock-selection fine-tuning with optional freezing of pre-trained groups.

use std::fmt;

use ndgrad::{Adam, AdamConfig, Graph, NdError, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backtest::{run_backtest, BacktestConfig, BacktestReport};
use crate::data::{Dataset, Split};
use crate::losses::selection_loss;
use crate::model::{self, Group, Head, HeadSpec, SsptParams};
use crate::runlog::{MetricLog, TrainRun};
use crate::{mix_seed, Result, SsptError};

/// Which pre-trained groups stay fixed while the selection head trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FreezeStrategy {
    None,
    Embedding,
    EmbeddingAttention,
    FullExtractor,
}

impl FreezeStrategy {
    pub const ALL: [FreezeStrategy; 4] = [
        FreezeStrategy::None,
        FreezeStrategy::Embedding,
        FreezeStrategy::EmbeddingAttention,
        FreezeStrategy::FullExtractor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FreezeStrategy::None => "none",
            FreezeStrategy::Embedding => "embedding",
            FreezeStrategy::EmbeddingAttention => "embedding+attention",
            FreezeStrategy::FullExtractor => "full-extractor",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| SsptError::Config(format!("unknown freeze strategy `{s}`")))
    }

    pub fn freezes(self, group: Group) -> bool {
        match (self, group) {
            (_, Group::Head(_)) => false,
            (FreezeStrategy::None, _) => false,
            (FreezeStrategy::Embedding, g) => g == Group::Embedding,
            (FreezeStrategy::EmbeddingAttention, g) => matches!(g, Group::Embedding | Group::Attention(_)),
            (FreezeStrategy::FullExtractor, _) => true,
        }
    }
}

impl fmt::Display for FreezeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    /// Weight of the pairwise ranking term.
    pub eps: f64,
    pub lr: f64,
    pub strategy: FreezeStrategy,
    pub epochs: usize,
    pub seed: u64,
    /// Backtest used for validation-based epoch selection.
    pub backtest: BacktestConfig,
}

pub const MAX_EPOCHS: usize = 100;

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            eps: 1.0,
            lr: 1e-4,
            strategy: FreezeStrategy::None,
            epochs: 20,
            seed: 0,
            backtest: BacktestConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(SsptError::Config(format!("ranking weight must be positive, got {}", self.eps)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(SsptError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.epochs > MAX_EPOCHS {
            return Err(SsptError::Config(format!(
                "fine-tuning epochs must be in 1..={MAX_EPOCHS}, got {}",
                self.epochs
            )));
        }
        Ok(())
    }
}

/// Frozen and tunable groups of a model whose only head is `select`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub frozen: Vec<Group>,
    pub tunable: Vec<Group>,
}

pub fn partition_params(params: &SsptParams<f32>, strategy: FreezeStrategy) -> Result<Partition> {
    if !params.has_head(Head::Select) {
        return Err(SsptError::UnknownHead(format!(
            "fine-tuning needs the `select` head, model has [{}]",
            params.heads().iter().map(|h| h.head.name()).collect::<Vec<_>>().join(", ")
        )));
    }
    let (frozen, tunable) = params.groups().into_iter().partition(|&g| strategy.freezes(g));
    Ok(Partition { frozen, tunable })
}

/// Drops the pre-training heads and attaches a freshly initialized selection
/// head.
pub fn with_selection_head(mut params: SsptParams<f32>, seed: u64) -> Result<SsptParams<f32>> {
    params.retain_heads(&[]);
    params.add_head(HeadSpec::select(), seed)?;
    Ok(params)
}

/// Model inputs `[n_stocks, window, features + 1]` for one anchor day.
pub fn day_batch(ds: &Dataset, split: Split, day: usize) -> Tensor<f32> {
    let (n, t, m) = (ds.n_stocks(), ds.window(), crate::data::N_FEATURES);
    let anchor = ds.anchors(split)[day];
    let mut data = vec![0.0f32; n * t * (m + 1)];
    for stock in 0..n {
        let rows = ds.window_rows(crate::data::Sample { stock, anchor });
        let dst = &mut data[stock * t * (m + 1)..(stock + 1) * t * (m + 1)];
        for s in 0..t {
            dst[s * (m + 1)..s * (m + 1) + m].copy_from_slice(&rows[s * m..(s + 1) * m]);
        }
    }
    Tensor::new(vec![n, t, m + 1], data).expect("day batch shape")
}

/// Realized next-day returns of every stock for one anchor day.
pub fn day_returns(ds: &Dataset, split: Split, day: usize) -> Vec<f64> {
    let anchor = ds.anchors(split)[day];
    (0..ds.n_stocks())
        .map(|stock| ds.label(crate::data::Sample { stock, anchor }))
        .collect()
}

/// Predicted returns for every day of `split`, one row per day.
pub fn predict_split(ds: &Dataset, split: Split, params: &SsptParams<f32>) -> Result<Vec<Vec<f64>>> {
    (0..ds.anchors(split).len())
        .map(|day| {
            let out = model::forward(params, &day_batch(ds, split, day), Head::Select)?;
            Ok(out.data().iter().map(|&v| v as f64).collect())
        })
        .collect()
}

pub fn split_returns(ds: &Dataset, split: Split) -> Vec<Vec<f64>> {
    (0..ds.anchors(split).len()).map(|d| day_returns(ds, split, d)).collect()
}

/// Backtest of `params` on one split.
pub fn backtest_split(ds: &Dataset, split: Split, params: &SsptParams<f32>, cfg: &BacktestConfig) -> Result<BacktestReport> {
    run_backtest(&predict_split(ds, split, params)?, &split_returns(ds, split), cfg)
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

/// Trains on one trading day per optimizer step, in date order, and keeps
/// the epoch with the best validation Sharpe ratio.
pub fn run_finetuning(ds: &Dataset, cfg: &FinetuneConfig, mut params: SsptParams<f32>) -> Result<TrainRun> {
    cfg.validate()?;
    let partition = partition_params(&params, cfg.strategy)?;
    if params.config().window != ds.window() || params.config().n_features != crate::data::N_FEATURES {
        return Err(SsptError::Data(format!(
            "model expects window {} x {} features, data has {} x {}",
            params.config().window,
            params.config().n_features,
            ds.window(),
            crate::data::N_FEATURES
        )));
    }
    let train_days = ds.anchors(Split::Train).len();
    if train_days == 0 || ds.anchors(Split::Valid).len() < 2 {
        return Err(SsptError::Data("fine-tuning needs train days and at least two valid days".into()));
    }
    if cfg.backtest.k > ds.n_stocks() {
        return Err(SsptError::Config(format!(
            "k = {} exceeds the universe size {}",
            cfg.backtest.k,
            ds.n_stocks()
        )));
    }
    let trainable = |g: Group| partition.tunable.contains(&g);
    let tunable_params = params.count(trainable);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let valid_returns = split_returns(ds, Split::Valid);
    let mut log = MetricLog::default();
    let mut best: Option<(usize, f64, SsptParams<f32>)> = None;

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64));
        let (mut loss_sum, mut reg_sum, mut rank_sum) = (0.0, 0.0, 0.0);
        for day in 0..train_days {
            let input = day_batch(ds, Split::Train, day);
            let returns: Vec<f32> = day_returns(ds, Split::Train, day).iter().map(|&r| r as f32).collect();
            let mut g = Graph::new();
            let grads = (|| {
                let bound = model::bind(&mut g, &params, |e| trainable(e.group))?;
                let x = g.constant(input)?;
                let hidden = model::encode(&mut g, &params, &bound, x, Some(&mut rng))?;
                let pred = model::apply_head(&mut g, &params, &bound, hidden, Head::Select)?;
                let loss = selection_loss(&mut g, pred, &returns, cfg.eps)?;
                loss_sum += g.value(loss.total).item() as f64;
                reg_sum += g.value(loss.regression).item() as f64;
                rank_sum += g.value(loss.ranking).item() as f64;
                Ok(g.backward(loss.total)?)
            })()
            .map_err(|e| diverged(epoch, day, e))?;
            adam.step(params.select_mut(|e| trainable(e.group)), &grads)
                .map_err(|e| diverged(epoch, day, e.into()))?;
        }
        let days = train_days as f64;
        log.push(epoch, "train", "loss", loss_sum / days);
        log.push(epoch, "train", "regression", reg_sum / days);
        log.push(epoch, "train", "ranking", rank_sum / days);

        let preds = predict_split(ds, Split::Valid, &params).map_err(|e| diverged(epoch, 0, e))?;
        let (sharpe, irr) = match run_backtest(&preds, &valid_returns, &cfg.backtest) {
            Ok(rep) => (rep.sharpe, rep.irr_sum),
            // a constant portfolio return has no defined Sharpe ratio
            Err(SsptError::DegenerateReturns) => (f64::NEG_INFINITY, f64::NAN),
            Err(e) => return Err(e),
        };
        log.push(epoch, "valid", "sharpe", sharpe);
        log.push(epoch, "valid", "irr", irr);
        if best.as_ref().map_or(true, |(_, b, _)| sharpe > *b) {
            best = Some((epoch, sharpe, params.clone()));
        }
    }
    let (best_epoch, best_metric, params) = best.expect("at least one epoch");
    Ok(TrainRun {
        log,
        best_epoch,
        best_metric,
        best_metric_name: "sharpe".into(),
        params,
        optimizer: adam.into_state(),
        tunable_params,
    })
}
