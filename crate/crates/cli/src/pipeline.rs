use std::path::Path;

use tcgpn::backtest::{compute_metrics, ic_series, pnl_svg, run_strategy, Predictions, Returns};
use tcgpn::config::RunConfig;
use tcgpn::data::{gen_synthetic, load_panel, split_by_ratio, split_by_year, window_samples, PanelSchema, Splits, Standardizer, TimePanel, WindowSample};
use tcgpn::graphs::{build_distance_graph, CorrelationGraph};
use tcgpn::model::{init_params, ModelConfig};
use tcgpn::tensorcore::{checkpoint, ParamStore};
use tcgpn::train::{self, checkpoint_meta, load_checkpoint, mean_ic, predict, window_returns};
use tcgpn::{Error, Result};

use crate::rundir::RunDir;

/// Raw panel plus the generator's graph when the data is synthetic.
pub struct Dataset {
    pub panel: TimePanel,
    pub truth: Option<CorrelationGraph>,
}

/// Loads `panel`, or generates the synthetic panel when the key is empty.
pub fn load_dataset(cfg: &RunConfig, run: &mut RunDir) -> Result<Dataset> {
    let path = cfg.str("panel");
    if path.is_empty() {
        let spec = cfg.synthetic_spec();
        let (panel, truth) = gen_synthetic(&spec)?;
        run.add_generated("synthetic", &format!("{spec:?}"))?;
        run.log(&format!(
            "synthetic panel: {} nodes, {} dates, {} features",
            panel.n_nodes(),
            panel.n_dates(),
            panel.n_features()
        ));
        return Ok(Dataset { panel, truth: Some(truth) });
    }
    let schema = PanelSchema {
        features: cfg.feature_list(),
        nodes: None,
        missing: cfg.missing_policy(),
    };
    let (panel, report) = load_panel(Path::new(path), &schema)?;
    run.add_input(Path::new(path))?;
    run.log(&format!(
        "panel {path}: {} nodes, {} dates, {} features; dropped {} dates, {} rows; filled {}",
        panel.n_nodes(),
        panel.n_dates(),
        panel.n_features(),
        report.dropped_dates.len(),
        report.dropped_rows,
        report.filled
    ));
    Ok(Dataset { panel, truth: None })
}

/// Chronological split; synthetic panels always use the ratio split.
pub fn split(cfg: &RunConfig, data: &Dataset) -> Result<Splits> {
    if data.truth.is_some() || cfg.str("split") == "ratio" {
        split_by_ratio(&data.panel, cfg.float("train_frac"), cfg.float("val_frac"))
    } else {
        split_by_year(
            &data.panel,
            cfg.usize("train_years"),
            cfg.usize("val_years"),
            cfg.usize("test_years"),
        )
    }
}

/// Builds or loads the correlation graph selected by `graph_kind`.
pub fn correlation_graph(cfg: &RunConfig, data: &Dataset, train: &TimePanel, run: &mut RunDir) -> Result<CorrelationGraph> {
    let graph = match cfg.str("graph_kind") {
        "synthetic" => data
            .truth
            .clone()
            .ok_or_else(|| Error::Config("graph_kind = synthetic needs the synthetic panel (empty panel key)".into()))?,
        "file" => {
            let path = cfg.str("graph");
            if path.is_empty() {
                return Err(Error::Config("graph_kind = file needs the graph key".into()));
            }
            run.add_input(Path::new(path))?;
            CorrelationGraph::load(Path::new(path), &data.panel.node_ids)?
        }
        _ => build_distance_graph(train, cfg.usize("knn_k"))?,
    };
    run.log(&format!("graph ({}): {} nodes, {} edges", cfg.str("graph_kind"), graph.n_nodes(), graph.nnz()));
    Ok(graph)
}

/// Windows, graph and model shape shared by the training subcommands.
pub struct Prepared {
    pub model: ModelConfig,
    pub graph: CorrelationGraph,
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

pub fn prepare(cfg: &RunConfig, run: &mut RunDir) -> Result<Prepared> {
    let data = load_dataset(cfg, run)?;
    let splits = split(cfg, &data)?;
    let graph = correlation_graph(cfg, &data, &splits.train, run)?;
    let (train, val, test) = if cfg.bool("standardize") {
        let s = Standardizer::fit(&splits.train);
        (s.apply(&splits.train), s.apply(&splits.val), s.apply(&splits.test))
    } else {
        (splits.train, splits.val, splits.test)
    };
    let t = cfg.usize("window");
    let prepared = Prepared {
        model: cfg.model_config(data.panel.n_features()),
        graph,
        train: window_samples(&train, t, cfg.usize("stride")),
        val: window_samples(&val, t, 1),
        test: window_samples(&test, t, 1),
    };
    run.log(&format!(
        "windows: train {}, val {}, test {}",
        prepared.train.len(),
        prepared.val.len(),
        prepared.test.len()
    ));
    Ok(prepared)
}

pub fn synth_data(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let spec = cfg.synthetic_spec();
    let (panel, truth) = gen_synthetic(&spec)?;
    run.add_generated("synthetic", &format!("{spec:?}"))?;
    panel.save_csv(&run.file("panel.csv"))?;
    truth.save(&run.file("graph.csv"))?;
    run.log(&format!(
        "wrote panel.csv ({} nodes x {} dates) and graph.csv ({} edges)",
        panel.n_nodes(),
        panel.n_dates(),
        truth.nnz()
    ));
    Ok(())
}

pub fn build_graph(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let data = load_dataset(cfg, run)?;
    let splits = split(cfg, &data)?;
    let graph = correlation_graph(cfg, &data, &splits.train, run)?;
    graph.save(&run.file("graph.csv"))?;
    Ok(())
}

/// Summary of one pretraining run.
pub struct PretrainSummary {
    pub val_l_t: f64,
    pub baseline_l_t: f64,
}

pub fn pretrain(cfg: &RunConfig, prep: &Prepared, run: &mut RunDir) -> Result<(ParamStore<f32>, PretrainSummary)> {
    let tcfg = cfg.train_config(true);
    let out = train::pretrain::<f32>(&prep.train, &prep.val, &prep.graph, &tcfg, &prep.model)?;
    out.log.save(&run.file("pretrain_log.csv"))?;
    let meta = checkpoint_meta(&prep.model, &[("stage", "pretrain".into()), ("seed", tcfg.seed.to_string())]);
    checkpoint::save(&run.file("pretrain.ckpt"), &out.params, &meta)?;
    run.log(&format!(
        "pretrain: {} epochs, best epoch {}, val l_t {:.6} (mean imputation {:.6}), val l_g {:.6}",
        out.epochs_run, out.best_epoch, out.best_val.l_t, out.val_baseline_l_t, out.best_val.l_g
    ));
    let summary = PretrainSummary {
        val_l_t: out.best_val.l_t,
        baseline_l_t: out.val_baseline_l_t,
    };
    Ok((out.params, summary))
}

/// Loads `checkpoint` or, without one, a fresh initialisation.
pub fn start_params(cfg: &RunConfig, prep: &Prepared, checkpoint: Option<&Path>, run: &mut RunDir) -> Result<ParamStore<f32>> {
    match checkpoint {
        Some(p) => {
            run.add_input(p)?;
            Ok(load_checkpoint::<f32>(p, &prep.model)?.params)
        }
        None => {
            run.log("no checkpoint given: starting from a fresh initialisation");
            init_params(&prep.model, cfg.int("seed") as u64)
        }
    }
}

pub fn finetune(cfg: &RunConfig, prep: &Prepared, start: &ParamStore<f32>, run: &mut RunDir) -> Result<(ParamStore<f32>, f64)> {
    let tcfg = cfg.train_config(false);
    let out = train::finetune(start, &prep.train, &prep.val, &prep.graph, &tcfg, &prep.model)?;
    out.log.save(&run.file("finetune_log.csv"))?;
    let meta = checkpoint_meta(&prep.model, &[("stage", "finetune".into()), ("seed", tcfg.seed.to_string())]);
    checkpoint::save(&run.file("finetune.ckpt"), &out.params, &meta)?;
    run.log(&format!(
        "finetune: {} epochs, best epoch {}, val IC {:.6}",
        out.epochs_run, out.best_epoch, out.best_val_ic
    ));
    Ok((out.params, out.best_val_ic))
}

/// Writes test-split predictions and realized returns; returns the mean IC.
pub fn predict_test(prep: &Prepared, params: &ParamStore<f32>, run: &mut RunDir) -> Result<Option<f64>> {
    let preds = predict(params, &prep.test, &prep.graph, &prep.model)?;
    preds.save(&run.file("predictions.csv"))?;
    window_returns(&prep.test).save(&run.file("returns.csv"))?;
    let ic = mean_ic(&preds, &prep.test);
    run.log(&format!(
        "predict: {} rows over {} dates, test IC {}",
        preds.n_rows(),
        preds.by_date.len(),
        fmt_opt(ic)
    ));
    Ok(ic)
}

pub fn backtest(cfg: &RunConfig, predictions: &Path, returns: &Path, run: &mut RunDir) -> Result<()> {
    run.add_input(predictions)?;
    run.add_input(returns)?;
    let preds = Predictions::load(predictions)?;
    let rets = Returns::load(returns)?;
    let ic = ic_series(&preds, &rets, cfg.ic_kind());
    run.write("ic.csv", &ic.to_csv())?;
    let (pnl, log) = run_strategy(&preds, &rets, cfg.usize("top_k"), cfg.cumulation())?;
    for (d, s) in &log.dropped {
        run.log(&format!("dropped {s} on {d}: no realized return"));
    }
    run.write("pnl.csv", &pnl.to_csv())?;
    run.write("pnl.svg", &pnl_svg(&pnl))?;
    let mut metrics = compute_metrics(&pnl, cfg.float("trading_days"))?;
    metrics.ic = ic.mean();
    run.write("metrics.csv", &metrics.to_csv())?;
    for (name, v) in metrics.rows() {
        run.log(&format!("{name:>8} {}", fmt_opt(v)));
    }
    Ok(())
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}
