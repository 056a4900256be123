//! Geometric Brownian motion simulation and the source-identification
//! experiments built on it.

use std::fmt::Write as _;

use chrono::{Datelike, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Normalizer, PriceSeries, SectorMap, Split};
use crate::losses::Coefficients;
use crate::model::{HeadSpec, ModelConfig, SsptParams};
use crate::pretrain::{self, PretrainConfig, WindowSource};
use crate::{mix_seed, Result, SsptError};

/// Standard normal draws by the Box-Muller transform over a seeded stream.
pub struct Normal {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl Normal {
    pub fn new(seed: u64) -> Self {
        Normal {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn sample(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the logarithm finite
        let u1 = 1.0 - self.rng.gen::<f64>();
        let u2 = self.rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GbmConfig {
    pub s0: f64,
    pub mu: f64,
    pub sigma: f64,
    pub dt: f64,
    pub steps: usize,
    pub seed: u64,
}

impl GbmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s0 > 0.0 && self.sigma >= 0.0 && self.dt > 0.0 && self.mu.is_finite() && self.sigma.is_finite()) {
            return Err(SsptError::Config(format!(
                "GBM needs S0 > 0, sigma >= 0, dt > 0 (got {}, {}, {})",
                self.s0, self.sigma, self.dt
            )));
        }
        Ok(())
    }
}

/// `steps + 1` prices starting at `s0`:
/// `S(t + dt) = S(t) exp((mu - sigma^2 / 2) dt + sigma sqrt(dt) Z)`.
pub fn gbm_series(cfg: &GbmConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut z = Normal::new(cfg.seed);
    let drift = (cfg.mu - 0.5 * cfg.sigma * cfg.sigma) * cfg.dt;
    let vol = cfg.sigma * cfg.dt.sqrt();
    let mut out = Vec::with_capacity(cfg.steps + 1);
    let mut s = cfg.s0;
    out.push(s);
    for _ in 0..cfg.steps {
        let step = if vol == 0.0 { drift } else { drift + vol * z.sample() };
        s *= step.exp();
        out.push(s);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Identical,
    Differing,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Identical => "identical",
            Mode::Differing => "differing",
        }
    }
}

/// Training settings for the source-identification classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct SimTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Training windows start every `stride` steps (validation and test
    /// slices never overlap).
    pub stride: usize,
    pub train_samples: Option<usize>,
}

impl Default for SimTraining {
    fn default() -> Self {
        SimTraining {
            epochs: 40,
            lr: 1e-3,
            batch_size: 64,
            stride: 1,
            train_samples: Some(1500),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub n: usize,
    pub mode: Mode,
    pub mu: (f64, f64),
    pub sigma: (f64, f64),
    pub s0: f64,
    pub dt: f64,
    pub steps: usize,
    pub slice_len: usize,
    pub feature: SliceFeature,
    pub reps: usize,
    pub seed: u64,
    pub training: SimTraining,
}

impl ScenarioConfig {
    pub fn new(n: usize, mode: Mode) -> Self {
        ScenarioConfig {
            n,
            mode,
            mu: (0.0, 0.2),
            sigma: (0.1, 0.3),
            s0: 100.0,
            dt: 1.0 / 252.0,
            steps: 1260,
            slice_len: 16,
            feature: SliceFeature::LogReturn,
            reps: 5,
            seed: 0,
            training: SimTraining::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SsptError::Config(m));
        if self.n == 0 || self.reps == 0 {
            return bad("scenario needs at least one series and one repetition".into());
        }
        for (name, (lo, hi)) in [("mu", self.mu), ("sigma", self.sigma)] {
            if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
                return bad(format!("{name} range ({lo}, {hi}) is not an interval"));
            }
        }
        if self.sigma.0 < 0.0 {
            return bad("sigma range must be non-negative".into());
        }
        if self.slice_len < 2 || self.training.stride == 0 {
            return bad("slice length must be at least 2 and stride positive".into());
        }
        // each chronological segment must hold at least one slice
        if self.slice_len > (self.steps + 1) / 5 {
            return Err(SsptError::Data(format!(
                "slice length {} does not fit {} steps split 60/20/20",
                self.slice_len, self.steps
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.sigma.1 - self.sigma.0
    }
}

/// Per-step value fed to the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SliceFeature {
    /// Price divided by the first price of the slice.
    RelativePrice,
    /// Log return from the previous step.
    LogReturn,
}

/// Slices of simulated series with series-id labels.
pub struct SliceSet {
    window: usize,
    rows: [Vec<f32>; 3],
    labels: [Vec<usize>; 3],
}

impl SliceSet {
    /// Splits each series chronologically 60/20/20, cuts windows, turns each
    /// into `feature` values and min-max scales with statistics of the
    /// training windows.
    pub fn build(series: &[Vec<f64>], window: usize, stride: usize, feature: SliceFeature) -> Result<Self> {
        let mut raw: [Vec<f64>; 3] = Default::default();
        let mut labels: [Vec<usize>; 3] = Default::default();
        for (id, prices) in series.iter().enumerate() {
            let n = prices.len();
            let cuts = [0, n * 3 / 5, n * 4 / 5, n];
            for split in Split::ALL {
                let (lo, hi) = (cuts[split as usize], cuts[split as usize + 1]);
                let step = if split == Split::Train { stride } else { window };
                let mut start = lo;
                while start + window < hi {
                    let base = prices[start];
                    let r = &mut raw[split as usize];
                    match feature {
                        SliceFeature::RelativePrice => r.extend(prices[start..start + window].iter().map(|p| p / base)),
                        SliceFeature::LogReturn => {
                            r.extend(prices[start..start + window + 1].windows(2).map(|w| (w[1] / w[0]).ln()))
                        }
                    }
                    labels[split as usize].push(id);
                    start += step;
                }
            }
        }
        if labels.iter().any(Vec::is_empty) {
            return Err(SsptError::Data("a split has no slices".into()));
        }
        let norm = Normalizer::fit(raw[0].chunks(1))?;
        let rows = raw.map(|r| r.iter().map(|&v| norm.apply(0, v) as f32).collect());
        Ok(SliceSet { window, rows, labels })
    }
}

impl WindowSource for SliceSet {
    fn n_features(&self) -> usize {
        1
    }

    fn window(&self) -> usize {
        self.window
    }

    fn close_column(&self) -> usize {
        0
    }

    fn len(&self, split: Split) -> usize {
        self.labels[split as usize].len()
    }

    fn rows(&self, split: Split, i: usize) -> &[f32] {
        &self.rows[split as usize][i * self.window..(i + 1) * self.window]
    }

    fn stock(&self, split: Split, i: usize) -> usize {
        self.labels[split as usize][i]
    }

    fn sector(&self, split: Split, i: usize) -> usize {
        self.stock(split, i)
    }
}

/// Simulated series for one repetition.
pub fn simulate_universe(cfg: &ScenarioConfig, rep: usize) -> Result<Vec<Vec<f64>>> {
    let rep_seed = mix_seed(cfg.seed, 1000 + rep as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(rep_seed);
    let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let shared = (draw(&mut rng, cfg.mu), draw(&mut rng, cfg.sigma));
    (0..cfg.n)
        .map(|i| {
            let (mu, sigma) = match cfg.mode {
                Mode::Identical => shared,
                Mode::Differing => (draw(&mut rng, cfg.mu), draw(&mut rng, cfg.sigma)),
            };
            gbm_series(&GbmConfig {
                s0: cfg.s0,
                mu,
                sigma,
                dt: cfg.dt,
                steps: cfg.steps,
                seed: mix_seed(rep_seed, i as u64),
            })
        })
        .collect()
}

/// Held-out accuracy of one repetition.
pub fn run_repetition(cfg: &ScenarioConfig, rep: usize) -> Result<f64> {
    let series = simulate_universe(cfg, rep)?;
    let slices = SliceSet::build(&series, cfg.slice_len, cfg.training.stride, cfg.feature)?;
    let model = ModelConfig::new(1, cfg.slice_len);
    let seed = mix_seed(cfg.seed, 2000 + rep as u64);
    let params = SsptParams::init(seed, model, &[HeadSpec::scc(cfg.n)])?;
    let mut pre = PretrainConfig::new(Coefficients {
        alpha: 1.0,
        beta: 0.0,
        gamma: 0.0,
    });
    pre.lr = cfg.training.lr;
    pre.epochs = cfg.training.epochs;
    pre.batch_size = cfg.training.batch_size;
    pre.train_samples = cfg.training.train_samples;
    pre.seed = seed;
    let run = pretrain::run_pretraining(&slices, &pre, params)?;
    let metrics = pretrain::evaluate_split(&slices, Split::Test, &run.params, &pre)?;
    Ok(metrics
        .iter()
        .find(|(m, _)| m == "scc_acc")
        .map(|(_, v)| *v)
        .expect("scc accuracy is reported"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioResult {
    pub mode: Mode,
    pub n: usize,
    pub width: f64,
    pub accuracies: Vec<f64>,
}

impl ScenarioResult {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }
}

/// Runs every repetition (in parallel when enabled; each has its own seeds).
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioResult> {
    cfg.validate()?;
    let accuracies = ndgrad::par::map_collect(cfg.reps, |rep| run_repetition(cfg, rep))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(ScenarioResult {
        mode: cfg.mode,
        n: cfg.n,
        width: cfg.width(),
        accuracies,
    })
}

/// Differing-parameter scenarios with sigma drawn from
/// `(sigma_min, sigma_min + width)` for each width.
pub fn sigma_sweep(base: &ScenarioConfig, sigma_min: f64, widths: &[f64]) -> Result<Vec<ScenarioResult>> {
    if widths.is_empty() || widths.iter().any(|w| !(*w > 0.0)) || widths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SsptError::Config(format!("widths must be positive and increasing: {widths:?}")));
    }
    widths
        .iter()
        .map(|&w| {
            let mut cfg = base.clone();
            cfg.mode = Mode::Differing;
            cfg.sigma = (sigma_min, sigma_min + w);
            run_scenario(&cfg)
        })
        .collect()
}

pub fn results_csv(results: &[ScenarioResult]) -> String {
    let mut out = String::from("mode,N,width,rep,accuracy\n");
    for r in results {
        for (rep, acc) in r.accuracies.iter().enumerate() {
            writeln!(out, "{},{},{},{},{}", r.mode.name(), r.n, r.width, rep, acc).unwrap();
        }
    }
    out
}

/// A universe of GBM stocks with derived OHLCV bars on business days.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticMarket {
    pub n_stocks: usize,
    pub n_sectors: usize,
    /// Trading days generated (252 per year).
    pub days: usize,
    pub mu: (f64, f64),
    pub sigma: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticMarket {
    fn default() -> Self {
        SyntheticMarket {
            n_stocks: 50,
            n_sectors: 5,
            days: 5 * 252,
            mu: (0.0, 0.2),
            sigma: (0.1, 0.3),
            seed: 7,
        }
    }
}

impl SyntheticMarket {
    /// Price series (tickers `SYN000`, ...) and a sector map assigning
    /// stock `i` to sector `i mod n_sectors`.
    pub fn generate(&self) -> Result<(Vec<PriceSeries>, SectorMap)> {
        if self.n_stocks == 0 || self.n_sectors == 0 || self.days < 2 {
            return Err(SsptError::Config(
                "synthetic market needs stocks, sectors and at least two days".into(),
            ));
        }
        let mut dates = Vec::with_capacity(self.days);
        let mut d = NaiveDate::from_ymd_opt(2013, 1, 2).expect("valid date");
        while dates.len() < self.days {
            if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
                dates.push(d);
            }
            d = d.succ_opt().expect("date in range");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, 1));
        let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let mut series = Vec::with_capacity(self.n_stocks);
        let mut pairs = Vec::with_capacity(self.n_stocks);
        for i in 0..self.n_stocks {
            let ticker = format!("SYN{i:03}");
            let (mu, sigma) = (draw(&mut rng, self.mu), draw(&mut rng, self.sigma));
            let s0 = rng.gen_range(20.0..200.0);
            let base_volume: f64 = rng.gen_range(1e5..5e6);
            let stream = mix_seed(self.seed, 100 + i as u64);
            let close = gbm_series(&GbmConfig {
                s0,
                mu,
                sigma,
                dt: 1.0 / 252.0,
                steps: self.days - 1,
                seed: stream,
            })?;
            let mut z = Normal::new(mix_seed(stream, 1));
            let day_vol = sigma / 252f64.sqrt();
            let mut ps = PriceSeries::new(ticker.clone());
            for (t, (&c, &date)) in close.iter().zip(&dates).enumerate() {
                let prev = if t == 0 { c } else { close[t - 1] };
                let open = prev * (0.25 * day_vol * z.sample()).exp();
                let high = open.max(c) * (1.0 + 0.5 * day_vol * z.sample().abs());
                let low = open.min(c) * (1.0 - 0.5 * day_vol * z.sample().abs()).max(0.5);
                let volume = (base_volume * (0.3 * z.sample()).exp()).round();
                ps.push(date, [open, high, low, c, volume]);
            }
            series.push(ps);
            pairs.push((ticker, format!("S{}", i % self.n_sectors)));
        }
        Ok((series, SectorMap::from_pairs(pairs)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gbm(mu: f64, sigma: f64, steps: usize) -> GbmConfig {
        GbmConfig {
            s0: 100.0,
            mu,
            sigma,
            dt: 1.0 / 252.0,
            steps,
            seed: 11,
        }
    }

    #[test]
    fn noise_free_paths() {
        let flat = gbm_series(&gbm(0.0, 0.0, 50)).unwrap();
        assert!(flat.iter().all(|&p| p == 100.0));
        let cfg = gbm(0.1, 0.0, 252);
        let path = gbm_series(&cfg).unwrap();
        assert_eq!(path.len(), 253);
        let expected = 100.0 * (0.1f64).exp();
        assert!((path[252] - expected).abs() / expected < 1e-12);
    }

    #[test]
    fn reproducible_under_seed() {
        let a = gbm_series(&gbm(0.05, 0.2, 500)).unwrap();
        let b = gbm_series(&gbm(0.05, 0.2, 500)).unwrap();
        assert_eq!(a, b);
        let mut other = gbm(0.05, 0.2, 500);
        other.seed = 12;
        assert_ne!(a, gbm_series(&other).unwrap());
    }

    #[test]
    fn invalid_gbm_config() {
        assert!(gbm_series(&GbmConfig { s0: 0.0, ..gbm(0.0, 0.1, 5) }).is_err());
        assert!(gbm_series(&GbmConfig { sigma: -0.1, ..gbm(0.0, 0.1, 5) }).is_err());
    }

    #[test]
    fn slices_are_relative_and_labelled() {
        let doubling: Vec<f64> = (0..20).map(|i| 2f64.powi(i)).collect();
        let series = vec![doubling; 2];
        for (feature, first) in [(SliceFeature::RelativePrice, [0.0, 1.0]), (SliceFeature::LogReturn, [0.0, 0.0])] {
            let set = SliceSet::build(&series, 2, 1, feature).unwrap();
            // every window looks the same: [1, 2] relative, or a constant log return
            assert!(set.rows[0].chunks(2).all(|w| w == first));
            assert_eq!(set.len(Split::Train), 2 * 10);
            assert_eq!(set.len(Split::Valid), 2);
            assert_eq!(set.len(Split::Test), 2);
            assert_eq!(set.stock(Split::Test, 1), 1);
        }
    }

    #[test]
    fn log_return_slices_follow_prices() {
        let prices: Vec<f64> = (0..40).map(|i| 100.0 * (1.0 + 0.01 * (i % 7) as f64)).collect();
        let set = SliceSet::build(&[prices.clone()], 4, 1, SliceFeature::LogReturn).unwrap();
        let raw: Vec<f64> = prices.windows(2).map(|w| (w[1] / w[0]).ln()).collect();
        let lo = raw[..23].iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = raw[..23].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let first = set.rows(Split::Train, 3);
        for (j, &v) in first.iter().enumerate() {
            let expected = (raw[3 + j] - lo) / (hi - lo);
            assert!((v as f64 - expected).abs() < 1e-6, "{v} vs {expected}");
        }
    }

    #[test]
    fn single_series_is_trivially_identified() {
        let mut cfg = ScenarioConfig::new(1, Mode::Differing);
        cfg.reps = 1;
        cfg.steps = 200;
        cfg.training.epochs = 1;
        cfg.training.train_samples = Some(64);
        let r = run_scenario(&cfg).unwrap();
        assert_eq!(r.accuracies, [1.0]);
    }

    #[test]
    fn csv_layout() {
        let r = ScenarioResult {
            mode: Mode::Identical,
            n: 10,
            width: 0.2,
            accuracies: vec![0.1, 0.125],
        };
        assert_eq!(results_csv(&[r]), "mode,N,width,rep,accuracy\nidentical,10,0.2,0,0.1\nidentical,10,0.2,1,0.125\n");
    }
}
