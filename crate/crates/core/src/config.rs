//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Repeating a key makes it a
//! list, which only `gridsearch` (and the list-valued `sigma_width`) accept.
//! Every key has a default listed in [`KEYS`]; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::backtest::BacktestConfig;
use crate::data::{DateRange, DatasetConfig, Splits};
use crate::finetune::{FinetuneConfig, FreezeStrategy};
use crate::losses::Coefficients;
use crate::model::{Activation, ModelConfig, NormPlacement, Pooling};
use crate::pretrain::{FeatureMode, MaskedTask, PretrainConfig};
use crate::simlab::{Mode, ScenarioConfig, SimTraining, SliceFeature, SyntheticMarket};
use crate::{Result, SsptError};

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "global seed; every stage derives its stream from it"),
    ("data_dir", "data", "directory of per-ticker OHLCV csv files"),
    ("sectors", "sectors.csv", "ticker,sector csv"),
    ("out_dir", "out", "artifact directory"),
    ("checkpoint_in", "", "checkpoint to start from; empty means fresh initialization"),
    ("predictions", "", "csv of predictions to backtest instead of a model"),
    ("synthetic_stocks", "0", "when > 0, ingest generates a GBM market instead of reading data_dir"),
    ("synthetic_sectors", "5", "sector count of the generated market"),
    ("synthetic_days", "1260", "trading days of the generated market"),
    ("window", "16", "look-back length (16 or 32)"),
    ("train_range", "", "YYYY-MM-DD..YYYY-MM-DD; empty splits by fractions"),
    ("valid_range", "", "validation date range"),
    ("test_range", "", "test date range"),
    ("train_fraction", "0.6", "share of days for training when no ranges are given"),
    ("valid_fraction", "0.2", "share of days for validation when no ranges are given"),
    ("d_model", "32", "hidden width"),
    ("n_heads", "4", "attention heads"),
    ("ffn_hidden", "128", "feed-forward width"),
    ("activation", "relu", "relu or gelu"),
    ("norm", "pre", "pre or post layer norm"),
    ("final_norm", "false", "extra layer norm after the last pre-norm layer"),
    ("pooling", "mean", "mean or last"),
    ("dropout", "0", "dropout rate"),
    ("alpha", "1", "stock code classification weight"),
    ("beta", "1", "sector classification weight"),
    ("gamma", "1", "masked objective weight"),
    ("masked_task", "map", "map or mvp"),
    ("mask_rate", "0.3", "share of masked steps per window"),
    ("pretrain_lr", "auto", "auto picks 1e-4 for map alone, else 1e-3"),
    ("pretrain_epochs", "20", "pre-training epochs"),
    ("batch_size", "64", "pre-training batch size"),
    ("train_samples", "all", "training windows drawn per pre-training epoch"),
    ("eval_samples", "all", "evaluation windows per split"),
    ("feature_mode", "all", "all or close-only"),
    ("eps", "1", "ranking loss weight"),
    ("finetune_lr", "1e-4", "fine-tuning learning rate"),
    ("strategy", "none", "none, embedding, embedding+attention or full-extractor"),
    ("finetune_epochs", "20", "fine-tuning epochs"),
    ("k", "5", "stocks bought per day"),
    ("risk_free", "0", "daily risk-free return"),
    ("annualize", "true", "scale the Sharpe ratio by sqrt(periods_per_year)"),
    ("periods_per_year", "252", "trading days per year"),
    ("sim_n", "10", "simulated series"),
    ("sim_mode", "differing", "identical or differing"),
    ("mu_min", "0", "lower drift bound"),
    ("mu_max", "0.2", "upper drift bound"),
    ("sigma_min", "0.1", "lower volatility bound"),
    ("sigma_max", "0.3", "upper volatility bound"),
    ("sigma_width", "", "volatility range widths for a sweep (repeat the key)"),
    ("s0", "100", "initial simulated price"),
    ("sim_steps", "1260", "simulated steps per series"),
    ("slice_len", "16", "simulated slice length"),
    ("sim_feature", "log-return", "log-return or relative-price"),
    ("reps", "5", "simulation repetitions"),
    ("sim_epochs", "40", "classifier epochs per repetition"),
    ("sim_lr", "1e-3", "classifier learning rate"),
    ("sim_stride", "1", "spacing of training slices"),
    ("sim_train_samples", "1500", "training slices drawn per epoch, or all"),
    ("grid_stage", "finetune", "stage searched by gridsearch: finetune or pretrain"),
];

const LIST_KEYS: &[&str] = &["sigma_width"];

/// Parsed file: each key with one or more raw values, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, Vec<String>>,
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| SsptError::Parse {
                file: "config".into(),
                line: i as u64 + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            raw.push(k.trim(), v.trim())?;
        }
        Ok(raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(SsptError::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| SsptError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            SsptError::Parse { line, message, .. } => SsptError::Parse {
                file: path.display().to_string(),
                line,
                message,
            },
            other => other,
        })
    }

    fn push(&mut self, key: &str, value: &str) -> Result<()> {
        if !known(key) {
            return Err(SsptError::Config(format!("unknown config key `{key}`")));
        }
        self.values.entry(key.to_string()).or_default().push(value.to_string());
        Ok(())
    }

    /// Replaces every value of `key` (command-line overrides).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known(key) {
            return Err(SsptError::Config(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), vec![value.to_string()]);
        Ok(())
    }

    /// Parses a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| SsptError::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Applies command-line `key=value` overrides. The first override of a
    /// key replaces its file values; repeating the key appends, so a grid can
    /// be given entirely on the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<()> {
        let mut seen = Vec::new();
        for pair in pairs {
            let pair = pair.as_ref();
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| SsptError::Config(format!("override `{pair}` is not key=value")))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.contains(&k) {
                self.push(k, v)?;
            } else {
                self.set(k, v)?;
                seen.push(k);
            }
        }
        Ok(())
    }

    pub fn values(&self, key: &str) -> &[String] {
        self.values.get(key).map_or(&[], Vec::as_slice)
    }

    /// Keys given more than once that are not list-valued by nature.
    pub fn grid_keys(&self) -> Vec<&str> {
        self.values
            .iter()
            .filter(|(k, v)| v.len() > 1 && !LIST_KEYS.contains(&k.as_str()))
            .map(|(k, _)| k.as_str())
            .collect()
    }

    /// Cartesian product over the grid keys, first key varying slowest.
    /// Each point lists its assignments and the single-valued config.
    pub fn grid(&self) -> Vec<(Vec<(String, String)>, RawConfig)> {
        let keys: Vec<String> = self.grid_keys().into_iter().map(String::from).collect();
        let mut points = vec![(Vec::new(), self.clone())];
        for key in &keys {
            let mut next = Vec::new();
            for (assign, cfg) in &points {
                for v in self.values(key) {
                    let mut a: Vec<(String, String)> = assign.clone();
                    a.push((key.clone(), v.clone()));
                    let mut c: RawConfig = cfg.clone();
                    c.values.insert(key.clone(), vec![v.clone()]);
                    next.push((a, c));
                }
            }
            points = next;
        }
        points
    }
}

/// Fully resolved settings for every command.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub sectors: PathBuf,
    pub out_dir: PathBuf,
    pub checkpoint_in: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub synthetic: Option<SyntheticMarket>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub backtest: BacktestConfig,
    pub scenario: ScenarioConfig,
    pub sigma_widths: Vec<f64>,
    pub grid_stage: GridStage,
    echo: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridStage {
    Pretrain,
    Finetune,
}

struct Lookup<'a> {
    raw: &'a RawConfig,
}

impl Lookup<'_> {
    fn str(&self, key: &str) -> Result<String> {
        debug_assert!(known(key), "{key}");
        match self.raw.values(key) {
            [] => Ok(KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, d, _)| d.to_string()).unwrap()),
            [one] => Ok(one.clone()),
            many => Err(SsptError::Config(format!(
                "`{key}` has {} values; lists are only accepted by gridsearch",
                many.len()
            ))),
        }
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let s = self.str(key)?;
        s.parse()
            .map_err(|_| SsptError::Config(format!("invalid value `{s}` for `{key}`")))
    }

    fn optional_count(&self, key: &str) -> Result<Option<usize>> {
        let s = self.str(key)?;
        if s == "all" {
            return Ok(None);
        }
        self.parse(key).map(Some)
    }

    fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        let s = self.str(key)?;
        Ok((!s.is_empty()).then(|| PathBuf::from(s)))
    }

    fn bool(&self, key: &str) -> Result<bool> {
        match self.str(key)?.as_str() {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            other => Err(SsptError::Config(format!("invalid boolean `{other}` for `{key}`"))),
        }
    }

    fn choice<T: Copy>(&self, key: &str, options: &[(&str, T)]) -> Result<T> {
        let s = self.str(key)?;
        options.iter().find(|(n, _)| *n == s).map(|(_, v)| *v).ok_or_else(|| {
            let names: Vec<_> = options.iter().map(|(n, _)| *n).collect();
            SsptError::Config(format!("`{key}` must be one of {}, got `{s}`", names.join(", ")))
        })
    }
}

fn range(s: &str, key: &str) -> Result<DateRange> {
    DateRange::parse(s).ok_or_else(|| SsptError::Config(format!("`{key}` must be YYYY-MM-DD..YYYY-MM-DD, got `{s}`")))
}

impl ExperimentConfig {
    pub fn resolve(raw: &RawConfig) -> Result<Self> {
        let l = Lookup { raw };
        let seed: u64 = l.parse("seed")?;

        let ranges = ["train_range", "valid_range", "test_range"]
            .map(|k| l.str(k))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let splits = if ranges.iter().all(String::is_empty) {
            Splits::Fractions {
                train: l.parse("train_fraction")?,
                valid: l.parse("valid_fraction")?,
            }
        } else if ranges.iter().any(String::is_empty) {
            return Err(SsptError::Config(
                "give all of train_range, valid_range and test_range or none".into(),
            ));
        } else {
            Splits::Dates {
                train: range(&ranges[0], "train_range")?,
                valid: range(&ranges[1], "valid_range")?,
                test: range(&ranges[2], "test_range")?,
            }
        };
        let window: usize = l.parse("window")?;
        let dataset = DatasetConfig::new(window, splits);

        let mut model = ModelConfig::new(crate::data::N_FEATURES, window);
        model.d_model = l.parse("d_model")?;
        model.n_heads = l.parse("n_heads")?;
        model.ffn_hidden = l.parse("ffn_hidden")?;
        model.activation = l.choice("activation", &[("relu", Activation::Relu), ("gelu", Activation::Gelu)])?;
        model.norm = l.choice("norm", &[("pre", NormPlacement::Pre), ("post", NormPlacement::Post)])?;
        model.final_norm = l.bool("final_norm")?;
        model.pooling = l.choice("pooling", &[("mean", Pooling::Mean), ("last", Pooling::Last)])?;
        model.dropout = l.parse("dropout")?;

        let mut pretrain = PretrainConfig::new(Coefficients {
            alpha: l.parse("alpha")?,
            beta: l.parse("beta")?,
            gamma: l.parse("gamma")?,
        });
        pretrain.masked = l.choice("masked_task", &[("map", MaskedTask::Map), ("mvp", MaskedTask::Mvp)])?;
        pretrain.mask_rate = l.parse("mask_rate")?;
        if l.str("pretrain_lr")? != "auto" {
            pretrain.lr = l.parse("pretrain_lr")?;
        }
        pretrain.epochs = l.parse("pretrain_epochs")?;
        pretrain.batch_size = l.parse("batch_size")?;
        pretrain.train_samples = l.optional_count("train_samples")?;
        pretrain.eval_samples = l.optional_count("eval_samples")?;
        pretrain.feature_mode =
            l.choice("feature_mode", &[("all", FeatureMode::All), ("close-only", FeatureMode::CloseOnly)])?;
        pretrain.seed = seed;

        let backtest = BacktestConfig {
            k: l.parse("k")?,
            risk_free: l.parse("risk_free")?,
            annualize: l.bool("annualize")?,
            periods_per_year: l.parse("periods_per_year")?,
        };
        let finetune = FinetuneConfig {
            eps: l.parse("eps")?,
            lr: l.parse("finetune_lr")?,
            strategy: FreezeStrategy::parse(&l.str("strategy")?)?,
            epochs: l.parse("finetune_epochs")?,
            seed,
            backtest,
        };

        let mode = l.choice("sim_mode", &[("identical", Mode::Identical), ("differing", Mode::Differing)])?;
        let mut scenario = ScenarioConfig::new(l.parse("sim_n")?, mode);
        scenario.mu = (l.parse("mu_min")?, l.parse("mu_max")?);
        scenario.sigma = (l.parse("sigma_min")?, l.parse("sigma_max")?);
        scenario.s0 = l.parse("s0")?;
        scenario.steps = l.parse("sim_steps")?;
        scenario.slice_len = l.parse("slice_len")?;
        scenario.feature = l.choice(
            "sim_feature",
            &[("log-return", SliceFeature::LogReturn), ("relative-price", SliceFeature::RelativePrice)],
        )?;
        scenario.reps = l.parse("reps")?;
        scenario.seed = seed;
        scenario.training = SimTraining {
            epochs: l.parse("sim_epochs")?,
            lr: l.parse("sim_lr")?,
            batch_size: l.parse("batch_size")?,
            stride: l.parse("sim_stride")?,
            train_samples: l.optional_count("sim_train_samples")?,
        };
        let sigma_widths = raw
            .values("sigma_width")
            .iter()
            .filter(|v| !v.is_empty())
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| SsptError::Config(format!("invalid value `{v}` for `sigma_width`")))
            })
            .collect::<Result<Vec<_>>>()?;

        let synthetic_stocks: usize = l.parse("synthetic_stocks")?;
        let synthetic = (synthetic_stocks > 0)
            .then(|| -> Result<SyntheticMarket> {
                Ok(SyntheticMarket {
                    n_stocks: synthetic_stocks,
                    n_sectors: l.parse("synthetic_sectors")?,
                    days: l.parse("synthetic_days")?,
                    seed,
                    ..SyntheticMarket::default()
                })
            })
            .transpose()?;

        let mut echo = String::new();
        for (key, _, _) in KEYS {
            if LIST_KEYS.contains(key) {
                let values: Vec<_> = raw.values(key).iter().filter(|v| !v.is_empty()).collect();
                for v in &values {
                    writeln!(echo, "{key} = {v}").unwrap();
                }
                if values.is_empty() {
                    writeln!(echo, "{key} =").unwrap();
                }
            } else {
                let v = l.str(key)?;
                if v.is_empty() {
                    writeln!(echo, "{key} =").unwrap();
                } else {
                    writeln!(echo, "{key} = {v}").unwrap();
                }
            }
        }

        let cfg = ExperimentConfig {
            seed,
            data_dir: PathBuf::from(l.str("data_dir")?),
            sectors: PathBuf::from(l.str("sectors")?),
            out_dir: PathBuf::from(l.str("out_dir")?),
            checkpoint_in: l.path("checkpoint_in")?,
            predictions: l.path("predictions")?,
            synthetic,
            dataset,
            model,
            pretrain,
            finetune,
            backtest,
            scenario,
            sigma_widths,
            grid_stage: l.choice("grid_stage", &[("pretrain", GridStage::Pretrain), ("finetune", GridStage::Finetune)])?,
            echo,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.scenario.validate()?;
        if self.backtest.k == 0 {
            return Err(SsptError::Config("k must be at least 1".into()));
        }
        Ok(())
    }

    /// Every key with its resolved value, one `key = value` line each.
    pub fn echo(&self) -> &str {
        &self.echo
    }
}

/// Default configuration file with one commented line per key.
pub fn default_text() -> String {
    let mut out = String::new();
    for (key, default, help) in KEYS {
        writeln!(out, "# {help}").unwrap();
        writeln!(out, "{key} = {default}").unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = ExperimentConfig::resolve(&RawConfig::default()).unwrap();
        assert_eq!(cfg.backtest.k, 5);
        assert_eq!(cfg.pretrain.mask_rate, 0.3);
        assert_eq!(cfg.pretrain.lr, 1e-3);
        assert!(cfg.checkpoint_in.is_none());
        let again = ExperimentConfig::resolve(&RawConfig::parse(cfg.echo()).unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn default_text_is_complete() {
        let raw = RawConfig::parse(&default_text()).unwrap();
        let cfg = ExperimentConfig::resolve(&raw).unwrap();
        assert_eq!(cfg, ExperimentConfig::resolve(&RawConfig::default()).unwrap());
    }

    #[test]
    fn comments_lists_and_unknown_keys() {
        let raw = RawConfig::parse("# header\nk = 3 # inline\neps = 1\neps = 5\n\n").unwrap();
        assert_eq!(raw.values("eps"), ["1", "5"]);
        assert_eq!(raw.grid_keys(), ["eps"]);
        assert!(ExperimentConfig::resolve(&raw).is_err());
        assert!(matches!(RawConfig::parse("bogus = 1"), Err(SsptError::Config(_))));
        assert!(matches!(RawConfig::parse("no equals"), Err(SsptError::Parse { line: 1, .. })));
    }

    #[test]
    fn grid_is_cartesian() {
        let raw = RawConfig::parse("finetune_lr = 1e-3\nfinetune_lr = 1e-4\nfinetune_lr = 1e-5\neps = 1\neps = 5\neps = 10").unwrap();
        let grid = raw.grid();
        assert_eq!(grid.len(), 9);
        assert_eq!(grid[0].0, [("eps".to_string(), "1".to_string()), ("finetune_lr".to_string(), "1e-3".to_string())]);
        for (_, c) in &grid {
            ExperimentConfig::resolve(c).unwrap();
        }
        let single = RawConfig::parse("eps = 5").unwrap();
        assert_eq!(single.grid().len(), 1);
    }

    #[test]
    fn overrides_replace_values() {
        let mut raw = RawConfig::parse("eps = 1\neps = 5").unwrap();
        raw.set_pair("eps=10").unwrap();
        let cfg = ExperimentConfig::resolve(&raw).unwrap();
        assert_eq!(cfg.finetune.eps, 10.0);
        assert!(raw.set_pair("nope=1").is_err());

        let mut raw = RawConfig::parse("eps = 1\nk = 3").unwrap();
        raw.apply_overrides(&["eps=5", "k=2", "eps=10"]).unwrap();
        assert_eq!(raw.values("eps"), ["5", "10"]);
        assert_eq!(raw.values("k"), ["2"]);
        assert!(raw.apply_overrides(&["eps"]).is_err());
    }

    #[test]
    fn sigma_widths_are_lists() {
        let raw = RawConfig::parse("sigma_width = 0.05\nsigma_width = 0.4").unwrap();
        let cfg = ExperimentConfig::resolve(&raw).unwrap();
        assert_eq!(cfg.sigma_widths, [0.05, 0.4]);
        assert!(raw.grid_keys().is_empty());
    }
}
