use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use tcgpn::config::{key_spec, RunConfig};
use tcgpn::{Error, Result};

use crate::pipeline::{self, fmt_opt};
use crate::rundir::RunDir;

/// Short names accepted in `--grid` besides the full config keys.
const ALIASES: [(&str, &str); 6] = [
    ("rt", "r_t"),
    ("rg", "r_g"),
    ("nl", "tgm_blocks"),
    ("nh", "tgm_heads"),
    ("lr", "learning_rate"),
    ("lambda", "lambda_m"),
];

/// One swept key and its values, as given on the command line.
#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub key: &'static str,
    pub values: Vec<String>,
}

/// Parses `key=v1,v2,...`.
pub fn parse_axis(spec: &str) -> Result<Axis> {
    let (name, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("grid axis {spec:?} is not key=v1,v2,...")))?;
    let name = name.trim().replace('-', "_");
    let full = ALIASES.iter().find(|(a, _)| *a == name).map_or(name.as_str(), |(_, k)| k);
    let key = key_spec(full)
        .ok_or_else(|| Error::Config(format!("unknown grid key {name:?}")))?
        .name;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Error::Config(format!("grid axis {key} has no values")));
    }
    Ok(Axis { key, values })
}

/// The `(key, value)` labels of one grid point.
pub type Labels = Vec<(&'static str, String)>;

/// Cartesian product of the axes, first axis varying slowest. Every point
/// is validated before anything runs.
pub fn expand(base: &RunConfig, axes: &[Axis]) -> Result<Vec<(Labels, RunConfig)>> {
    let mut points = vec![(Vec::new(), base.clone())];
    for axis in axes {
        let mut next = Vec::with_capacity(points.len() * axis.values.len());
        for (labels, cfg) in &points {
            for v in &axis.values {
                let mut cfg = cfg.clone();
                cfg.set_from_str(axis.key, v)?;
                let mut labels = labels.clone();
                labels.push((axis.key, v.clone()));
                next.push((labels, cfg));
            }
        }
        points = next;
    }
    for (_, cfg) in &points {
        cfg.validate()?;
    }
    Ok(points)
}

struct PointResult {
    dir: String,
    labels: Labels,
    outcome: Result<[Option<f64>; 4]>,
}

/// Runs pretrain, fine-tune and test prediction for every grid point and
/// writes `summary.csv` into the sweep directory.
pub fn run(base: &RunConfig, axes: &[Axis], jobs: usize, argv: &[String], sweep: &mut RunDir) -> Result<String> {
    let points = expand(base, axes)?;
    sweep.log(&format!("sweep: {} points, {} jobs", points.len(), jobs.max(1)));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<PointResult>>> = Mutex::new((0..points.len()).map(|_| None).collect());
    let log = Mutex::new(());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, points.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((labels, cfg)) = points.get(i) else { break };
                let dir = sweep.path.join(format!("point-{i:03}"));
                let outcome = run_point(cfg, &dir, argv);
                {
                    let _g = log.lock().unwrap();
                    let tag: Vec<String> = labels.iter().map(|(k, v)| format!("{k}={v}")).collect();
                    match &outcome {
                        Ok(_) => eprintln!("point {i} [{}] done", tag.join(" ")),
                        Err(e) => eprintln!("point {i} [{}] failed: {e}", tag.join(" ")),
                    }
                }
                results.lock().unwrap()[i] = Some(PointResult {
                    dir: dir.file_name().unwrap().to_string_lossy().into_owned(),
                    labels: labels.clone(),
                    outcome,
                });
            });
        }
    });
    let results: Vec<PointResult> = results.into_inner().unwrap().into_iter().flatten().collect();
    let csv = summary_csv(axes, &results);
    sweep.write("summary.csv", &csv)?;
    let failed = results.iter().filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        return Err(Error::Invalid(format!("{failed} of {} sweep points failed; see summary.csv", results.len())));
    }
    Ok(csv)
}

fn run_point(cfg: &RunConfig, dir: &Path, argv: &[String]) -> Result<[Option<f64>; 4]> {
    let mut run = RunDir::create(Some(dir), cfg, argv, true)?;
    run.log("sweep point: pretrain, finetune and predict with config.toml");
    let prep = pipeline::prepare(cfg, &mut run)?;
    let (pre, summary) = pipeline::pretrain(cfg, &prep, &mut run)?;
    let (fine, val_ic) = pipeline::finetune(cfg, &prep, &pre, &mut run)?;
    let test_ic = pipeline::predict_test(&prep, &fine, &mut run)?;
    Ok([Some(summary.val_l_t), Some(summary.baseline_l_t), Some(val_ic), test_ic])
}

fn summary_csv(axes: &[Axis], results: &[PointResult]) -> String {
    let mut out = String::from("point");
    for a in axes {
        let _ = write!(out, ",{}", a.key);
    }
    out.push_str(",val_l_t,baseline_l_t,val_ic,test_ic,status\n");
    for r in results {
        out.push_str(&r.dir);
        for (_, v) in &r.labels {
            let _ = write!(out, ",{v}");
        }
        match &r.outcome {
            Ok(vals) => {
                for v in vals {
                    let _ = write!(out, ",{}", v.map(|x| x.to_string()).unwrap_or_default());
                }
                out.push_str(",ok\n");
            }
            Err(e) => {
                let msg = e.to_string().replace([',', '\n'], ";");
                let _ = writeln!(out, ",,,,,error: {msg}");
            }
        }
    }
    out
}

/// Fixed-width rendering of `summary.csv` for the terminal.
pub fn table(csv: &str) -> String {
    let rows: Vec<Vec<String>> = csv
        .lines()
        .map(|l| {
            l.split(',')
                .map(|c| match c.parse::<f64>() {
                    Ok(x) if c.contains('.') || c.contains('e') => fmt_opt(Some(x)),
                    _ => c.to_string(),
                })
                .collect()
        })
        .collect();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in &rows {
        let cells: Vec<String> = r.iter().enumerate().map(|(c, v)| format!("{v:<w$}", w = widths[c])).collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}
