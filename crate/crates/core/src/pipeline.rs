//! Command implementations shared by the binary and the integration tests.
//!
//! Every command echoes its resolved configuration to `<out>/<command>.config`
//! before doing any work and writes only deterministic artifacts; wall-clock
//! information goes to the `run.log` sidecar.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::backtest::{market_baseline, run_backtest, BacktestReport};
use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, GridStage, RawConfig};
use crate::data::{load_universe, Dataset, SectorMap, Split};
use crate::finetune::{self, FreezeStrategy};
use crate::model::{HeadSpec, SsptParams};
use crate::pretrain;
use crate::runlog::TrainRun;
use crate::simlab;
use crate::{mix_seed, Result, SsptError};

pub const DATASET_FILE: &str = "dataset.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const FINETUNE_CKPT: &str = "finetune.ckpt";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| SsptError::io(path, e))
}

fn prepare(cfg: &ExperimentConfig, command: &str) -> Result<PathBuf> {
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| SsptError::io(&out, e))?;
    write(&out.join(format!("{command}.config")), cfg.echo())?;
    Ok(out)
}

fn sidecar(out: &Path, command: &str) {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let line = format!("{secs} {command} ok\n");
    let path = out.join("run.log");
    let _ = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .and_then(|mut f| std::io::Write::write_all(&mut f, line.as_bytes()));
}

fn load_dataset(out: &Path) -> Result<Dataset> {
    Dataset::load(&out.join(DATASET_FILE))
}

/// Builds the dataset from csv files (or the synthetic market) and persists
/// it with its manifest. Returns the manifest text.
pub fn cmd_ingest(cfg: &ExperimentConfig) -> Result<String> {
    let out = prepare(cfg, "ingest")?;
    let (series, sectors) = match &cfg.synthetic {
        Some(market) => market.generate()?,
        None => {
            let sectors = SectorMap::load(&cfg.sectors)?;
            let exclude = cfg.sectors.exists().then_some(cfg.sectors.as_path());
            (load_universe(&cfg.data_dir, exclude)?, sectors)
        }
    };
    let ds = Dataset::build(series, &sectors, cfg.dataset.clone())?;
    ds.save(&out.join(DATASET_FILE))?;
    let manifest = ds.manifest();
    write(&out.join(MANIFEST_FILE), &manifest)?;
    sidecar(&out, "ingest");
    Ok(manifest)
}

fn pretrain_heads(cfg: &ExperimentConfig, ds: &Dataset) -> Vec<HeadSpec> {
    let c = cfg.pretrain.coefficients;
    let mut heads = Vec::new();
    if c.alpha > 0.0 {
        heads.push(HeadSpec::scc(ds.n_stocks()));
    }
    if c.beta > 0.0 {
        heads.push(HeadSpec::ssc(ds.n_sectors()));
    }
    if c.gamma > 0.0 {
        heads.push(match cfg.pretrain.masked {
            pretrain::MaskedTask::Map => HeadSpec::map(),
            pretrain::MaskedTask::Mvp => HeadSpec::mvp(),
        });
    }
    heads
}

fn save_run(path: &Path, run: &TrainRun, digest: [u8; 32], stage: &str) -> Result<()> {
    let mut ck = Checkpoint::new(run.params.clone(), digest);
    ck.optimizer = Some(run.optimizer.clone());
    for (k, v) in [
        ("stage", stage.to_string()),
        ("best_epoch", run.best_epoch.to_string()),
        ("best_metric", format!("{}={}", run.best_metric_name, run.best_metric)),
        ("tunable_params", run.tunable_params.to_string()),
        ("log", run.log.to_csv()),
    ] {
        ck.metadata.insert(k.into(), v);
    }
    ck.save(path)
}

fn run_summary(stage: &str, run: &TrainRun) -> String {
    format!(
        "stage = {stage}\nbest_epoch = {}\n{} = {}\ntunable_params = {}\n",
        run.best_epoch, run.best_metric_name, run.best_metric, run.tunable_params
    )
}

fn pretrain_on(cfg: &ExperimentConfig, ds: &Dataset) -> Result<TrainRun> {
    let params = match &cfg.checkpoint_in {
        Some(path) => Checkpoint::load(path)?.params,
        None => SsptParams::init(mix_seed(cfg.seed, 11), cfg.model.clone(), &pretrain_heads(cfg, ds))?,
    };
    pretrain::run_pretraining(ds, &cfg.pretrain, params)
}

pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<String> {
    let out = prepare(cfg, "pretrain")?;
    let ds = load_dataset(&out)?;
    let run = pretrain_on(cfg, &ds)?;
    write(&out.join("pretrain_log.csv"), run.log.to_csv())?;
    save_run(&out.join(PRETRAIN_CKPT), &run, ds.manifest_digest(), "pretrain")?;
    let summary = run_summary("pretrain", &run);
    write(&out.join("pretrain_summary.txt"), &summary)?;
    sidecar(&out, "pretrain");
    Ok(summary)
}

/// Starting parameters for fine-tuning: the given checkpoint with a fresh
/// selection head, or a fresh model when no checkpoint is configured.
fn finetune_start(cfg: &ExperimentConfig) -> Result<SsptParams<f32>> {
    let head_seed = mix_seed(cfg.seed, 12);
    match &cfg.checkpoint_in {
        Some(path) => finetune::with_selection_head(Checkpoint::load(path)?.params, head_seed),
        None => {
            if cfg.finetune.strategy != FreezeStrategy::None {
                return Err(SsptError::Config(format!(
                    "strategy `{}` needs a pre-trained checkpoint_in",
                    cfg.finetune.strategy
                )));
            }
            SsptParams::init(head_seed, cfg.model.clone(), &[HeadSpec::select()])
        }
    }
}

pub fn cmd_finetune(cfg: &ExperimentConfig) -> Result<String> {
    let out = prepare(cfg, "finetune")?;
    let ds = load_dataset(&out)?;
    let run = finetune::run_finetuning(&ds, &cfg.finetune, finetune_start(cfg)?)?;
    write(&out.join("finetune_log.csv"), run.log.to_csv())?;
    save_run(&out.join(FINETUNE_CKPT), &run, ds.manifest_digest(), "finetune")?;
    let summary = run_summary("finetune", &run);
    write(&out.join("finetune_summary.txt"), &summary)?;
    sidecar(&out, "finetune");
    Ok(summary)
}

/// Reads `date,<ticker>,...` predictions, one row per test day.
pub fn read_predictions(path: &Path, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    if !path.exists() {
        return Err(SsptError::MissingArtifact(path.to_path_buf()));
    }
    let file = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| SsptError::Parse {
            file: file.clone(),
            line: 1,
            message: e.to_string(),
        })?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| SsptError::Parse {
            file: file.clone(),
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(String::from)
        .collect();
    let tickers = ds.tickers();
    if header.len() != tickers.len() + 1 || header[1..] != tickers[..] {
        return Err(SsptError::Parse {
            file,
            line: 1,
            message: format!("header must be `date,{}`", tickers.join(",")),
        });
    }
    let test_days: Vec<_> = ds.anchors(Split::Test).iter().map(|&a| ds.dates()[a]).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let err = |message: String| SsptError::Parse {
            file: file.clone(),
            line,
            message,
        };
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let date = crate::data::parse_date(&rec[0]).ok_or_else(|| err(format!("bad date `{}`", &rec[0])))?;
        if test_days.get(i) != Some(&date) {
            return Err(err(format!("expected test day {:?}, got {date}", test_days.get(i))));
        }
        let row = rec
            .iter()
            .skip(1)
            .map(|v| v.trim().parse::<f64>().map_err(|_| err(format!("bad prediction `{v}`"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.len() != test_days.len() {
        return Err(SsptError::Data(format!(
            "{} prediction rows for {} test days",
            rows.len(),
            test_days.len()
        )));
    }
    Ok(rows)
}

/// Backtests the fine-tuned model (or a prediction file) on the test split
/// next to the equal-weight market baseline.
pub fn cmd_backtest(cfg: &ExperimentConfig) -> Result<BacktestReport> {
    let out = prepare(cfg, "backtest")?;
    let ds = load_dataset(&out)?;
    let returns = finetune::split_returns(&ds, Split::Test);
    let preds = match &cfg.predictions {
        Some(path) => read_predictions(path, &ds)?,
        None => {
            let path = cfg.checkpoint_in.clone().unwrap_or_else(|| out.join(FINETUNE_CKPT));
            let ck = Checkpoint::load(&path)?;
            finetune::predict_split(&ds, Split::Test, &ck.params)?
        }
    };
    let report = run_backtest(&preds, &returns, &cfg.backtest)?;
    write(&out.join("backtest.json"), report.to_json())?;
    write(&out.join("backtest.csv"), report.to_csv())?;
    let baseline = market_baseline(&returns, &cfg.backtest)?;
    write(&out.join("baseline.json"), baseline.to_json())?;
    sidecar(&out, "backtest");
    Ok(report)
}

/// Runs the configured scenario, or a volatility-width sweep when
/// `sigma_width` values are given. Returns the results csv.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<String> {
    let out = prepare(cfg, "simulate")?;
    let results = if cfg.sigma_widths.is_empty() {
        vec![simlab::run_scenario(&cfg.scenario)?]
    } else {
        simlab::sigma_sweep(&cfg.scenario, cfg.scenario.sigma.0, &cfg.sigma_widths)?
    };
    let csv = simlab::results_csv(&results);
    write(&out.join("simulation.csv"), &csv)?;
    let mut summary = String::from("mode,N,width,mean_accuracy\n");
    for r in &results {
        writeln!(summary, "{},{},{},{}", r.mode.name(), r.n, r.width, r.mean()).unwrap();
    }
    write(&out.join("simulation_summary.csv"), &summary)?;
    sidecar(&out, "simulate");
    Ok(summary)
}

/// Outcome of a grid search: the metric table and the test report of the
/// selected configuration.
#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub table: String,
    pub best: usize,
    pub test_report: String,
}

/// Runs every point of the Cartesian product of repeated keys on the
/// validation split, then evaluates only the best point on the test split.
pub fn cmd_gridsearch(raw: &RawConfig) -> Result<GridOutcome> {
    let grid = raw.grid();
    let points = grid
        .iter()
        .map(|(assign, c)| Ok((assign.clone(), ExperimentConfig::resolve(c)?)))
        .collect::<Result<Vec<_>>>()?;
    let first = &points[0].1;
    let out = first.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| SsptError::io(&out, e))?;
    let mut echo = String::new();
    for (i, (assign, cfg)) in points.iter().enumerate() {
        let pairs: Vec<String> = assign.iter().map(|(k, v)| format!("{k}={v}")).collect();
        writeln!(echo, "# point {i}: {}", pairs.join(" ")).unwrap();
        if i == 0 {
            echo.push_str(cfg.echo());
        }
    }
    write(&out.join("gridsearch.config"), &echo)?;
    let ds = load_dataset(&out)?;
    let stage = first.grid_stage;
    if points.iter().any(|(_, c)| c.grid_stage != stage || c.out_dir != out) {
        return Err(SsptError::Config("grid_stage and out_dir cannot vary in a grid".into()));
    }

    let runs = ndgrad::par::map_collect(points.len(), |i| -> Result<TrainRun> {
        let cfg = &points[i].1;
        let run = match stage {
            GridStage::Finetune => finetune::run_finetuning(&ds, &cfg.finetune, finetune_start(cfg)?)?,
            GridStage::Pretrain => pretrain_on(cfg, &ds)?,
        };
        let dir = out.join("grid").join(format!("{i:03}"));
        fs::create_dir_all(&dir).map_err(|e| SsptError::io(&dir, e))?;
        write(&dir.join("log.csv"), run.log.to_csv())?;
        Ok(run)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let larger_better = match stage {
        GridStage::Finetune => true,
        GridStage::Pretrain => first.pretrain.selection_metric().1,
    };
    let keys: Vec<&str> = grid[0].0.iter().map(|(k, _)| k.as_str()).collect();
    let mut table = String::from("point");
    for k in &keys {
        write!(table, ",{k}").unwrap();
    }
    writeln!(table, ",best_epoch,metric,value").unwrap();
    let mut best = 0;
    for (i, ((assign, _), run)) in points.iter().zip(&runs).enumerate() {
        write!(table, "{i}").unwrap();
        for (_, v) in assign {
            write!(table, ",{v}").unwrap();
        }
        writeln!(table, ",{},{},{}", run.best_epoch, run.best_metric_name, run.best_metric).unwrap();
        let better = if larger_better {
            run.best_metric > runs[best].best_metric
        } else {
            run.best_metric < runs[best].best_metric
        };
        if better {
            best = i;
        }
    }
    write(&out.join("grid.csv"), &table)?;

    let best_cfg = &points[best].1;
    let best_run = &runs[best];
    let mut test_report = format!("point = {best}\n");
    for (k, v) in &points[best].0 {
        writeln!(test_report, "{k} = {v}").unwrap();
    }
    match stage {
        GridStage::Finetune => {
            let rep = finetune::backtest_split(&ds, Split::Test, &best_run.params, &best_cfg.backtest)?;
            writeln!(test_report, "test_irr = {}", rep.irr_sum).unwrap();
            writeln!(test_report, "test_irr_mean = {}", rep.irr_mean).unwrap();
            writeln!(test_report, "test_sharpe = {}", rep.sharpe).unwrap();
        }
        GridStage::Pretrain => {
            for (m, v) in pretrain::evaluate_split(&ds, Split::Test, &best_run.params, &best_cfg.pretrain)? {
                writeln!(test_report, "test_{m} = {v}").unwrap();
            }
        }
    }
    write(&out.join("grid_best.txt"), &test_report)?;
    sidecar(&out, "gridsearch");
    Ok(GridOutcome {
        table,
        best,
        test_report,
    })
}

/// Collects the artifacts present in the output directory into `report.md`.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<String> {
    let out = prepare(cfg, "report")?;
    let mut report = String::from("# Run report\n");
    let sections = [
        ("Dataset manifest", MANIFEST_FILE),
        ("Pre-training", "pretrain_summary.txt"),
        ("Fine-tuning", "finetune_summary.txt"),
        ("Backtest", "backtest.json"),
        ("Market baseline", "baseline.json"),
        ("Simulation", "simulation_summary.csv"),
        ("Grid search", "grid.csv"),
        ("Grid search selection", "grid_best.txt"),
    ];
    let mut found = 0;
    for (title, file) in sections {
        let path = out.join(file);
        if !path.exists() {
            continue;
        }
        found += 1;
        let mut text = fs::read_to_string(&path).map_err(|e| SsptError::io(&path, e))?;
        if file.ends_with(".json") {
            // selections are per-day detail; keep the report to the metrics
            let mut v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| SsptError::Data(format!("{}: {e}", path.display())))?;
            if let Some(obj) = v.as_object_mut() {
                obj.remove("selections");
            }
            text = serde_json::to_string_pretty(&v).expect("json value serializes") + "\n";
        }
        write!(report, "\n## {title}\n\n```\n{text}```\n").unwrap();
    }
    if found == 0 {
        return Err(SsptError::MissingArtifact(out.join(MANIFEST_FILE)));
    }
    write(&out.join("report.md"), &report)?;
    sidecar(&out, "report");
    Ok(report)
}
