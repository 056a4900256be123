//! Price ingestion, feature engineering, normalization and windowing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use sha2::{Digest, Sha256};

use crate::binio::{Reader, Writer};
use crate::{Result, SsptError};

pub const FEATURE_NAMES: [&str; 9] = [
    "open", "high", "low", "close", "volume", "ma5", "ma10", "ma20", "ma30",
];
pub const N_FEATURES: usize = FEATURE_NAMES.len();
pub const CLOSE: usize = 3;
pub const MA_WINDOWS: [usize; 4] = [5, 10, 20, 30];
/// Days of history required before a day can be used as a feature row.
pub const WARMUP: usize = 30;

const DATE_FORMAT: &str = "%Y-%m-%d";

pub fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), DATE_FORMAT).ok()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriceSeries {
    pub ticker: String,
    pub dates: Vec<NaiveDate>,
    pub open: Vec<f64>,
    pub high: Vec<f64>,
    pub low: Vec<f64>,
    pub close: Vec<f64>,
    pub volume: Vec<f64>,
}

impl PriceSeries {
    pub fn new(ticker: impl Into<String>) -> Self {
        PriceSeries {
            ticker: ticker.into(),
            dates: Vec::new(),
            open: Vec::new(),
            high: Vec::new(),
            low: Vec::new(),
            close: Vec::new(),
            volume: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn push(&mut self, date: NaiveDate, ohlcv: [f64; 5]) {
        self.dates.push(date);
        self.open.push(ohlcv[0]);
        self.high.push(ohlcv[1]);
        self.low.push(ohlcv[2]);
        self.close.push(ohlcv[3]);
        self.volume.push(ohlcv[4]);
    }

    fn ohlcv(&self, i: usize) -> [f64; 5] {
        [self.open[i], self.high[i], self.low[i], self.close[i], self.volume[i]]
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(SsptError::Data(format!("{}: {m}", self.ticker)));
        let n = self.dates.len();
        if [&self.open, &self.high, &self.low, &self.close, &self.volume]
            .iter()
            .any(|c| c.len() != n)
        {
            return err("columns have different lengths".into());
        }
        if n < WARMUP + 1 {
            return err(format!("{n} rows, need at least {}", WARMUP + 1));
        }
        if let Some(w) = self.dates.windows(2).position(|w| w[0] >= w[1]) {
            return err(format!("dates not strictly increasing at {}", self.dates[w + 1]));
        }
        for i in 0..n {
            let [o, h, l, c, v] = self.ohlcv(i);
            if [o, h, l, c].iter().any(|p| !p.is_finite() || *p <= 0.0) {
                return err(format!("non-positive price on {}", self.dates[i]));
            }
            if !v.is_finite() || v < 0.0 {
                return err(format!("negative volume on {}", self.dates[i]));
            }
        }
        Ok(())
    }

    /// Reads `date,open,high,low,close,volume` rows; the ticker is the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        let ticker = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| SsptError::Data(format!("{}: cannot derive a ticker", path.display())))?;
        let text = fs::read_to_string(path).map_err(|e| SsptError::io(path, e))?;
        Self::parse(ticker, &path.display().to_string(), &text)
    }

    pub fn parse(ticker: &str, file: &str, text: &str) -> Result<Self> {
        let parse_err = |line: u64, message: String| SsptError::Parse {
            file: file.to_string(),
            line,
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
        let expected = ["date", "open", "high", "low", "close", "volume"];
        if header.iter().collect::<Vec<_>>() != expected {
            return Err(parse_err(1, format!("expected header `{}`", expected.join(","))));
        }
        let mut series = PriceSeries::new(ticker);
        for record in reader.records() {
            let record = record.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                parse_err(line, e.to_string())
            })?;
            let line = record.position().map_or(0, |p| p.line());
            let date = parse_date(&record[0]).ok_or_else(|| parse_err(line, format!("bad date `{}`", &record[0])))?;
            let mut values = [0.0; 5];
            for (j, v) in values.iter_mut().enumerate() {
                let field = &record[j + 1];
                *v = field
                    .parse()
                    .map_err(|_| parse_err(line, format!("bad {} value `{field}`", expected[j + 1])))?;
            }
            series.push(date, values);
        }
        series.validate()?;
        Ok(series)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("date,open,high,low,close,volume\n");
        for i in 0..self.len() {
            let [o, h, l, c, v] = self.ohlcv(i);
            writeln!(out, "{},{o},{h},{l},{c},{v}", self.dates[i].format(DATE_FORMAT)).unwrap();
        }
        out
    }
}

/// Ticker to sector label, with sector labels mapped to contiguous class
/// indices in sorted label order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SectorMap {
    by_ticker: BTreeMap<String, String>,
}

impl SectorMap {
    pub fn from_pairs<I, A, B>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        SectorMap {
            by_ticker: pairs.into_iter().map(|(a, b)| (a.into(), b.into())).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SsptError::io(path, e))?;
        Self::parse(&path.display().to_string(), &text)
    }

    /// `ticker,sector` rows; a leading `ticker,sector` header is optional.
    pub fn parse(file: &str, text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut by_ticker = BTreeMap::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| SsptError::Parse {
                file: file.into(),
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line());
            if record.len() != 2 || record[0].is_empty() || record[1].is_empty() {
                return Err(SsptError::Parse {
                    file: file.into(),
                    line,
                    message: "expected `ticker,sector`".into(),
                });
            }
            if i == 0 && &record[0] == "ticker" && &record[1] == "sector" {
                continue;
            }
            if by_ticker.insert(record[0].to_string(), record[1].to_string()).is_some() {
                return Err(SsptError::Parse {
                    file: file.into(),
                    line,
                    message: format!("ticker `{}` listed twice", &record[0]),
                });
            }
        }
        Ok(SectorMap { by_ticker })
    }

    pub fn sector_of(&self, ticker: &str) -> Option<&str> {
        self.by_ticker.get(ticker).map(String::as_str)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("ticker,sector\n");
        for (t, s) in &self.by_ticker {
            writeln!(out, "{t},{s}").unwrap();
        }
        out
    }

    /// Sorted sector labels of the given universe and each ticker's class.
    pub fn classes(&self, tickers: &[String]) -> Result<(Vec<String>, Vec<usize>)> {
        let mut labels = BTreeSet::new();
        for t in tickers {
            let s = self
                .sector_of(t)
                .ok_or_else(|| SsptError::Data(format!("ticker `{t}` has no sector")))?;
            labels.insert(s.to_string());
        }
        let labels: Vec<String> = labels.into_iter().collect();
        let classes = tickers
            .iter()
            .map(|t| labels.binary_search_by(|l| l.as_str().cmp(self.sector_of(t).unwrap())).unwrap())
            .collect();
        Ok((labels, classes))
    }
}

/// Trailing mean over `window` values; the first `window - 1` positions are
/// undefined.
pub fn moving_average(series: &[f64], window: usize) -> Result<Vec<Option<f64>>> {
    if window == 0 || series.len() < window {
        return Err(SsptError::Data(format!(
            "moving average of width {window} over {} values",
            series.len()
        )));
    }
    let mut out = vec![None; series.len()];
    for t in window - 1..series.len() {
        let sum: f64 = series[t + 1 - window..=t].iter().sum();
        out[t] = Some(sum / window as f64);
    }
    Ok(out)
}

/// One-day return ratio `(next - p) / p`.
pub fn compute_return(p: f64, next: f64) -> Result<f64> {
    if !(p > 0.0) {
        return Err(SsptError::Data(format!("return from non-positive price {p}")));
    }
    Ok((next - p) / p)
}

/// Per-column min-max statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut rows = rows.into_iter().peekable();
        let width = rows
            .peek()
            .map(|r| r.len())
            .ok_or_else(|| SsptError::Data("cannot fit a normalizer on zero rows".into()))?;
        let mut min = vec![f64::INFINITY; width];
        let mut max = vec![f64::NEG_INFINITY; width];
        for row in rows {
            for (j, &v) in row.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Ok(Normalizer { min, max })
    }

    pub fn is_degenerate(&self, col: usize) -> bool {
        self.max[col] == self.min[col]
    }

    /// Unclamped `(x - min) / (max - min)`; degenerate columns give 0.
    pub fn apply(&self, col: usize, x: f64) -> f64 {
        if self.is_degenerate(col) {
            0.0
        } else {
            (x - self.min[col]) / (self.max[col] - self.min[col])
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }

    pub fn parse(s: &str) -> Option<Self> {
        let (a, b) = s.split_once("..")?;
        let r = DateRange {
            start: parse_date(a)?,
            end: parse_date(b)?,
        };
        (r.start <= r.end).then_some(r)
    }
}

impl std::fmt::Display for DateRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}..{}", self.start.format(DATE_FORMAT), self.end.format(DATE_FORMAT))
    }
}

/// Chronological split boundaries. `Fractions` divides the aligned calendar
/// by day count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Splits {
    Dates { train: DateRange, valid: DateRange, test: DateRange },
    Fractions { train: f64, valid: f64 },
}

impl Splits {
    fn resolve(&self, dates: &[NaiveDate]) -> Result<[DateRange; 3]> {
        match *self {
            Splits::Dates { train, valid, test } => {
                if !(train.end < valid.start && valid.end < test.start) {
                    return Err(SsptError::Config(format!(
                        "splits must be chronological and disjoint: {train}, {valid}, {test}"
                    )));
                }
                Ok([train, valid, test])
            }
            Splits::Fractions { train, valid } => {
                if !(train > 0.0 && valid > 0.0 && train + valid < 1.0) {
                    return Err(SsptError::Config(format!("bad split fractions {train}, {valid}")));
                }
                let n = dates.len();
                let a = (n as f64 * train).round() as usize;
                let b = (n as f64 * (train + valid)).round() as usize;
                if a == 0 || b <= a || b >= n {
                    return Err(SsptError::Data(format!("{n} days cannot be split by fractions")));
                }
                let range = |i: usize, j: usize| DateRange {
                    start: dates[i],
                    end: dates[j - 1],
                };
                Ok([range(0, a), range(a, b), range(b, n)])
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub window: usize,
    pub splits: Splits,
    /// Allows look-back lengths other than 16 and 32.
    pub any_window: bool,
}

impl DatasetConfig {
    pub fn new(window: usize, splits: Splits) -> Self {
        DatasetConfig {
            window,
            splits,
            any_window: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(SsptError::Config("window must be positive".into()));
        }
        if !self.any_window && self.window != 16 && self.window != 32 {
            return Err(SsptError::Config(format!(
                "window {} is not 16 or 32 (set window_override = true to allow it)",
                self.window
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Sample {
    pub stock: usize,
    pub anchor: usize,
}

/// Normalized feature rows for an aligned universe plus the sample index.
///
/// Rows are stored per stock and day (`[stock][day][feature]`), so a sample's
/// window is the contiguous block of rows ending at its anchor day.
#[derive(Clone, Debug)]
pub struct Dataset {
    config: DatasetConfig,
    series: Vec<PriceSeries>,
    sectors: SectorMap,
    sector_names: Vec<String>,
    sector_of: Vec<usize>,
    ranges: [DateRange; 3],
    raw: Vec<f64>,
    features: Vec<f32>,
    normalizer: Normalizer,
    anchors: [Vec<usize>; 3],
    input_hash: String,
}

fn align(mut series: Vec<PriceSeries>) -> Result<Vec<PriceSeries>> {
    if series.is_empty() {
        return Err(SsptError::Data("empty universe".into()));
    }
    series.sort_by(|a, b| a.ticker.cmp(&b.ticker));
    if let Some(w) = series.windows(2).find(|w| w[0].ticker == w[1].ticker) {
        return Err(SsptError::Data(format!("ticker `{}` appears twice", w[0].ticker)));
    }
    for s in &series {
        s.validate()?;
    }
    let mut common: BTreeSet<NaiveDate> = series[0].dates.iter().copied().collect();
    for s in &series[1..] {
        let dates: BTreeSet<NaiveDate> = s.dates.iter().copied().collect();
        common = common.intersection(&dates).copied().collect();
    }
    if common.len() < WARMUP + 1 {
        let first = &series[0];
        let odd: Vec<&str> = series
            .iter()
            .filter(|s| s.dates != first.dates)
            .map(|s| s.ticker.as_str())
            .collect();
        return Err(SsptError::Data(format!(
            "misaligned calendars: only {} common days (differing from `{}`: {})",
            common.len(),
            first.ticker,
            odd.join(", ")
        )));
    }
    Ok(series
        .into_iter()
        .map(|s| {
            let mut out = PriceSeries::new(s.ticker.clone());
            for i in 0..s.len() {
                if common.contains(&s.dates[i]) {
                    out.push(s.dates[i], s.ohlcv(i));
                }
            }
            out
        })
        .collect())
}

fn input_hash(series: &[PriceSeries], sectors: &[String], window: usize) -> String {
    let mut h = Sha256::new();
    h.update((window as u64).to_le_bytes());
    for (s, sector) in series.iter().zip(sectors) {
        h.update(s.ticker.as_bytes());
        h.update([0]);
        h.update(sector.as_bytes());
        h.update([0]);
        for i in 0..s.len() {
            h.update(s.dates[i].format(DATE_FORMAT).to_string().as_bytes());
            for v in s.ohlcv(i) {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

impl Dataset {
    /// Aligns calendars, computes the nine feature columns, fits the
    /// normalizer on training rows and enumerates samples.
    pub fn build(series: Vec<PriceSeries>, sectors: &SectorMap, config: DatasetConfig) -> Result<Self> {
        config.validate()?;
        if let Splits::Dates { train, test, .. } = config.splits {
            let short: Vec<&str> = series
                .iter()
                .filter(|s| s.dates.first().map_or(true, |&d| d > train.start) || s.dates.last().map_or(true, |&d| d < test.end))
                .map(|s| s.ticker.as_str())
                .collect();
            if !short.is_empty() {
                return Err(SsptError::Data(format!(
                    "misaligned calendars: {} do not cover {}..{}",
                    short.join(", "),
                    train.start,
                    test.end
                )));
            }
        }
        let series = align(series)?;
        let tickers: Vec<String> = series.iter().map(|s| s.ticker.clone()).collect();
        let (sector_names, sector_of) = sectors.classes(&tickers)?;
        let dates = series[0].dates.clone();
        let ranges = config.splits.resolve(&dates)?;
        let n_days = dates.len();

        let mut raw = vec![0.0; series.len() * n_days * N_FEATURES];
        for (i, s) in series.iter().enumerate() {
            let mas: Vec<Vec<Option<f64>>> = MA_WINDOWS
                .iter()
                .map(|&w| moving_average(&s.close, w))
                .collect::<Result<_>>()?;
            for t in WARMUP..n_days {
                let row = &mut raw[(i * n_days + t) * N_FEATURES..(i * n_days + t + 1) * N_FEATURES];
                row[..5].copy_from_slice(&s.ohlcv(t));
                for (j, ma) in mas.iter().enumerate() {
                    row[5 + j] = ma[t].expect("defined after warm-up");
                }
            }
        }

        let split_of = |t: usize| Split::ALL.into_iter().find(|s| ranges[*s as usize].contains(dates[t]));
        let window = config.window;
        let mut anchors: [Vec<usize>; 3] = Default::default();
        for a in (WARMUP + window - 1)..n_days.saturating_sub(1) {
            let first = split_of(a + 1 - window);
            if first.is_some() && first == split_of(a + 1) {
                anchors[first.unwrap() as usize].push(a);
            }
        }
        if anchors[Split::Train as usize].is_empty() {
            return Err(SsptError::Data(format!(
                "no training samples: need {} days of history plus a {window}-day window and a label day inside {}",
                WARMUP, ranges[0]
            )));
        }

        let train_rows = (0..series.len()).flat_map(|i| {
            (WARMUP..n_days)
                .filter(|&t| split_of(t) == Some(Split::Train))
                .map(move |t| (i * n_days + t) * N_FEATURES)
        });
        let normalizer = Normalizer::fit(train_rows.map(|o| &raw[o..o + N_FEATURES]))?;
        let features = raw
            .chunks(N_FEATURES)
            .enumerate()
            .flat_map(|(r, row)| {
                let usable = r % n_days >= WARMUP;
                let normalizer = &normalizer;
                row.iter()
                    .enumerate()
                    .map(move |(j, &v)| if usable { normalizer.apply(j, v) as f32 } else { 0.0 })
            })
            .collect();

        let hash = input_hash(&series, &tickers.iter().map(|t| sectors.sector_of(t).unwrap().to_string()).collect::<Vec<_>>(), window);
        let sectors = SectorMap::from_pairs(tickers.iter().map(|t| (t.clone(), sectors.sector_of(t).unwrap().to_string())));
        Ok(Dataset {
            config,
            series,
            sectors,
            sector_names,
            sector_of,
            ranges,
            raw,
            features,
            normalizer,
            anchors,
            input_hash: hash,
        })
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.config
    }

    pub fn window(&self) -> usize {
        self.config.window
    }

    pub fn n_stocks(&self) -> usize {
        self.series.len()
    }

    pub fn n_days(&self) -> usize {
        self.series[0].len()
    }

    pub fn n_sectors(&self) -> usize {
        self.sector_names.len()
    }

    pub fn tickers(&self) -> Vec<&str> {
        self.series.iter().map(|s| s.ticker.as_str()).collect()
    }

    pub fn series(&self) -> &[PriceSeries] {
        &self.series
    }

    pub fn sector_names(&self) -> &[String] {
        &self.sector_names
    }

    pub fn sector(&self, stock: usize) -> usize {
        self.sector_of[stock]
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.series[0].dates
    }

    pub fn range(&self, split: Split) -> DateRange {
        self.ranges[split as usize]
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn input_hash(&self) -> &str {
        &self.input_hash
    }

    /// Unnormalized feature row of `stock` on `day` (zeros before warm-up).
    pub fn raw_row(&self, stock: usize, day: usize) -> &[f64] {
        let o = (stock * self.n_days() + day) * N_FEATURES;
        &self.raw[o..o + N_FEATURES]
    }

    /// Anchor days usable in `split`, ascending. Calendars are aligned, so
    /// the same anchors apply to every stock.
    pub fn anchors(&self, split: Split) -> &[usize] {
        &self.anchors[split as usize]
    }

    /// Samples of `split` ordered by anchor day, then stock.
    pub fn samples(&self, split: Split) -> Vec<Sample> {
        let n = self.n_stocks();
        self.anchors(split)
            .iter()
            .flat_map(|&anchor| (0..n).map(move |stock| Sample { stock, anchor }))
            .collect()
    }

    pub fn sample_count(&self, split: Split) -> usize {
        self.anchors(split).len() * self.n_stocks()
    }

    /// Normalized `[window, N_FEATURES]` rows ending at the anchor day.
    pub fn window_rows(&self, s: Sample) -> &[f32] {
        let w = self.window();
        let start = (s.stock * self.n_days() + s.anchor + 1 - w) * N_FEATURES;
        &self.features[start..start + w * N_FEATURES]
    }

    /// Next-day return used as the label of an anchor day.
    pub fn label(&self, s: Sample) -> f64 {
        let c = &self.series[s.stock].close;
        compute_return(c[s.anchor], c[s.anchor + 1]).expect("validated prices are positive")
    }

    /// Mean normalized close over the sample's window.
    pub fn window_mean_close(&self, s: Sample) -> f64 {
        let rows = self.window_rows(s);
        let sum: f64 = rows.chunks(N_FEATURES).map(|r| r[CLOSE] as f64).sum();
        sum / self.window() as f64
    }

    pub fn manifest(&self) -> String {
        let mut m = String::new();
        writeln!(m, "format = 1").unwrap();
        writeln!(m, "n_stocks = {}", self.n_stocks()).unwrap();
        writeln!(m, "n_features = {N_FEATURES}").unwrap();
        writeln!(m, "n_sectors = {}", self.n_sectors()).unwrap();
        writeln!(m, "window = {}", self.window()).unwrap();
        writeln!(m, "features = {}", FEATURE_NAMES.join(",")).unwrap();
        writeln!(m, "days = {}", self.n_days()).unwrap();
        for split in Split::ALL {
            writeln!(m, "{} = {}", split.name(), self.range(split)).unwrap();
        }
        for split in Split::ALL {
            writeln!(m, "samples_{} = {}", split.name(), self.sample_count(split)).unwrap();
        }
        for (j, name) in FEATURE_NAMES.iter().enumerate() {
            writeln!(m, "norm_{name} = {},{}", self.normalizer.min[j], self.normalizer.max[j]).unwrap();
        }
        writeln!(m, "input_hash = {}", self.input_hash).unwrap();
        m
    }

    pub fn manifest_digest(&self) -> [u8; 32] {
        Sha256::digest(self.manifest().as_bytes()).into()
    }

    const MAGIC: &'static [u8; 4] = b"SSDS";

    /// Persists the aligned inputs; loading rebuilds every derived array.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(Self::MAGIC);
        w.u32(1);
        w.len(self.config.window);
        w.u32(self.config.any_window as u32);
        let [train, valid, test] = self.ranges;
        for r in [train, valid, test] {
            w.str(&r.to_string());
        }
        w.len(self.series.len());
        for s in &self.series {
            w.str(&s.ticker);
            w.str(self.sectors.sector_of(&s.ticker).unwrap());
            w.len(s.len());
            for d in &s.dates {
                w.str(&d.format(DATE_FORMAT).to_string());
            }
            for col in [&s.open, &s.high, &s.low, &s.close, &s.volume] {
                w.f64s(col);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, |m| SsptError::Data(format!("dataset file: {m}")));
        if r.bytes(4)? != Self::MAGIC {
            return Err(r.fail("bad magic"));
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(r.fail(format!("unsupported version {version}")));
        }
        let window = r.len()?;
        let any_window = r.u32()? != 0;
        let mut ranges = Vec::new();
        for _ in 0..3 {
            let s = r.str()?;
            ranges.push(DateRange::parse(&s).ok_or_else(|| r.fail(format!("bad range `{s}`")))?);
        }
        let n = r.len()?;
        let mut series = Vec::with_capacity(n);
        let mut pairs = Vec::with_capacity(n);
        for _ in 0..n {
            let mut s = PriceSeries::new(r.str()?);
            pairs.push((s.ticker.clone(), r.str()?));
            let days = r.len()?;
            for _ in 0..days {
                let d = r.str()?;
                s.dates.push(parse_date(&d).ok_or_else(|| r.fail(format!("bad date `{d}`")))?);
            }
            s.open = r.f64s(days)?;
            s.high = r.f64s(days)?;
            s.low = r.f64s(days)?;
            s.close = r.f64s(days)?;
            s.volume = r.f64s(days)?;
            series.push(s);
        }
        if !r.at_end() {
            return Err(r.fail("trailing bytes"));
        }
        let config = DatasetConfig {
            window,
            splits: Splits::Dates {
                train: ranges[0],
                valid: ranges[1],
                test: ranges[2],
            },
            any_window,
        };
        Dataset::build(series, &SectorMap::from_pairs(pairs), config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| SsptError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(SsptError::MissingArtifact(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| SsptError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Loads every `*.csv` price file in `dir`, skipping `exclude` (the sector
/// file when it lives in the same directory).
pub fn load_universe(dir: &Path, exclude: Option<&Path>) -> Result<Vec<PriceSeries>> {
    let entries = fs::read_dir(dir).map_err(|e| SsptError::io(dir, e))?;
    let exclude = exclude.and_then(|p| fs::canonicalize(p).ok());
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| SsptError::io(dir, e))?.path();
        let is_csv = path.extension().is_some_and(|e| e == "csv");
        let excluded = exclude.is_some() && fs::canonicalize(&path).ok() == exclude;
        if is_csv && !excluded {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(SsptError::Data(format!("no price files in {}", dir.display())));
    }
    paths.iter().map(|p| PriceSeries::load(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn day(i: usize) -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Days::new(i as u64)
    }

    fn series(ticker: &str, days: usize, base: f64) -> PriceSeries {
        let mut s = PriceSeries::new(ticker);
        for i in 0..days {
            let c = base + i as f64;
            s.push(day(i), [c - 0.5, c + 1.0, c - 1.0, c, 1000.0 + i as f64]);
        }
        s
    }

    #[test]
    fn moving_average_cases() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0, 5.0], 5).unwrap()[4], Some(3.0));
        assert_eq!(moving_average(&[2.0, 4.0, 6.0], 2).unwrap(), vec![None, Some(3.0), Some(5.0)]);
        assert!(moving_average(&[7.0; 10], 3).unwrap()[2..].iter().all(|v| *v == Some(7.0)));
        assert!(moving_average(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn return_cases() {
        assert!((compute_return(100.0, 110.0).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(compute_return(100.0, 100.0).unwrap(), 0.0);
        assert_eq!(compute_return(80.0, 76.0).unwrap(), -0.05);
        assert!(compute_return(0.0, 1.0).is_err());
    }

    #[test]
    fn normalizer_cases() {
        let rows: Vec<[f64; 2]> = vec![[2.0, 5.0], [4.0, 5.0], [6.0, 5.0]];
        let n = Normalizer::fit(rows.iter().map(|r| &r[..])).unwrap();
        assert_eq!((n.min[0], n.max[0]), (2.0, 6.0));
        assert!(n.is_degenerate(1));
        assert_eq!(n.apply(1, 7.0), 0.0);
        let n = Normalizer { min: vec![0.0], max: vec![10.0] };
        assert_eq!(n.apply(0, 5.0), 0.5);
        assert_eq!(n.apply(0, -2.0), -0.2);
    }

    fn fractions() -> Splits {
        Splits::Fractions { train: 0.6, valid: 0.2 }
    }

    #[test]
    fn sixty_days_give_fourteen_anchors_per_stock() {
        let sectors = SectorMap::from_pairs([("A", "x"), ("B", "y")]);
        let all = DateRange { start: day(0), end: day(59) };
        let splits = Splits::Dates {
            train: all,
            valid: DateRange { start: day(60), end: day(79) },
            test: DateRange { start: day(80), end: day(99) },
        };
        let ds = Dataset::build(
            vec![series("A", 100, 10.0), series("B", 100, 20.0)],
            &sectors,
            DatasetConfig::new(16, splits),
        )
        .unwrap();
        assert_eq!(ds.anchors(Split::Train), (45..=58).collect::<Vec<_>>().as_slice());
        assert_eq!(ds.sample_count(Split::Train), 28);

        let err = Dataset::build(
            vec![series("A", 40, 10.0), series("B", 40, 20.0)],
            &sectors,
            DatasetConfig::new(16, fractions()),
        );
        assert!(err.is_err());
    }

    #[test]
    fn missing_sector_is_named() {
        let sectors = SectorMap::from_pairs([("A", "x")]);
        let err = Dataset::build(
            vec![series("A", 80, 10.0), series("B", 80, 20.0)],
            &sectors,
            DatasetConfig::new(16, fractions()),
        )
        .unwrap_err();
        assert!(err.to_string().contains("`B`"), "{err}");
    }

    #[test]
    fn holes_are_dropped_universe_wide() {
        let sectors = SectorMap::from_pairs([("A", "x"), ("B", "y")]);
        let mut b = series("B", 100, 20.0);
        b.dates.remove(50);
        b.open.remove(50);
        b.high.remove(50);
        b.low.remove(50);
        b.close.remove(50);
        b.volume.remove(50);
        let ds = Dataset::build(vec![series("A", 100, 10.0), b], &sectors, DatasetConfig::new(16, fractions())).unwrap();
        assert_eq!(ds.n_days(), 99);
        assert!(!ds.dates().contains(&day(50)));
    }

    #[test]
    fn csv_parse_errors_name_the_line() {
        let text = "date,open,high,low,close,volume\n2020-01-01,1,2,0.5,1.5,100\n2020-01-02,1,x,0.5,1.5,100\n";
        match PriceSeries::parse("T", "t.csv", text) {
            Err(SsptError::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("high"));
            }
            other => panic!("{other:?}"),
        }
        let bad_header = "day,open,high,low,close,volume\n";
        assert!(matches!(PriceSeries::parse("T", "t.csv", bad_header), Err(SsptError::Parse { line: 1, .. })));
    }

    #[test]
    fn csv_round_trip() {
        let s = series("A", 40, 10.0);
        assert_eq!(PriceSeries::parse("A", "a.csv", &s.to_csv()).unwrap(), s);
        let m = SectorMap::from_pairs([("A", "x"), ("B", "y")]);
        assert_eq!(SectorMap::parse("s.csv", &m.to_csv()).unwrap(), m);
    }

    #[test]
    fn dataset_bytes_round_trip() {
        let sectors = SectorMap::from_pairs([("A", "x"), ("B", "y")]);
        let ds = Dataset::build(
            vec![series("B", 120, 20.0), series("A", 120, 10.0)],
            &sectors,
            DatasetConfig::new(16, fractions()),
        )
        .unwrap();
        let back = Dataset::from_bytes(&ds.to_bytes()).unwrap();
        assert_eq!(back.manifest(), ds.manifest());
        assert_eq!(back.features, ds.features);
        assert_eq!(ds.tickers(), ["A", "B"]);
    }
}
