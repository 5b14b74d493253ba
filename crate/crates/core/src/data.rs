//! Panel data: CSV ingestion, windowing, chronological splits,
//! standardization and the synthetic lead-lag generator.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graphs::CorrelationGraph;

/// Observations of N series over D dates with F features each.
#[derive(Clone, Debug, PartialEq)]
pub struct TimePanel {
    pub node_ids: Vec<String>,
    pub dates: Vec<NaiveDate>,
    pub feature_names: Vec<String>,
    /// Row-major N×D×F.
    pub features: Vec<f64>,
    /// Row-major N×D; `targets[i][d]` is the change realized on `dates[d]`.
    pub targets: Vec<f64>,
}

impl TimePanel {
    pub fn new(
        node_ids: Vec<String>,
        dates: Vec<NaiveDate>,
        feature_names: Vec<String>,
        features: Vec<f64>,
        targets: Vec<f64>,
    ) -> Result<Self> {
        let (n, d, f) = (node_ids.len(), dates.len(), feature_names.len());
        if n == 0 || d == 0 || f == 0 {
            return Err(Error::invalid(format!("empty panel ({n} nodes, {d} dates, {f} features)")));
        }
        if features.len() != n * d * f || targets.len() != n * d {
            return Err(Error::invalid("panel buffers do not match N×D×F"));
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("panel dates must be strictly increasing"));
        }
        let unique: BTreeSet<&String> = node_ids.iter().collect();
        if unique.len() != n {
            return Err(Error::invalid("duplicate node ids in panel"));
        }
        if !features.iter().chain(&targets).all(|v| v.is_finite()) {
            return Err(Error::invalid("panel contains non-finite values"));
        }
        Ok(TimePanel {
            node_ids,
            dates,
            feature_names,
            features,
            targets,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature(&self, node: usize, date: usize, f: usize) -> f64 {
        self.features[(node * self.n_dates() + date) * self.n_features() + f]
    }

    pub fn target(&self, node: usize, date: usize) -> f64 {
        self.targets[node * self.n_dates() + date]
    }

    /// All D×F values of one node.
    pub fn node_series(&self, node: usize) -> &[f64] {
        let len = self.n_dates() * self.n_features();
        &self.features[node * len..(node + 1) * len]
    }

    /// Sub-panel over the date index range `range`.
    pub fn slice_dates(&self, range: std::ops::Range<usize>) -> TimePanel {
        let (d, f) = (self.n_dates(), self.n_features());
        let mut features = Vec::with_capacity(self.n_nodes() * range.len() * f);
        let mut targets = Vec::with_capacity(self.n_nodes() * range.len());
        for i in 0..self.n_nodes() {
            features.extend_from_slice(&self.features[(i * d + range.start) * f..(i * d + range.end) * f]);
            targets.extend_from_slice(&self.targets[i * d + range.start..i * d + range.end]);
        }
        TimePanel {
            node_ids: self.node_ids.clone(),
            dates: self.dates[range].to_vec(),
            feature_names: self.feature_names.clone(),
            features,
            targets,
        }
    }

    /// Sub-panel over `nodes`, in that order.
    pub fn select_nodes(&self, nodes: &[usize]) -> TimePanel {
        let (d, f) = (self.n_dates(), self.n_features());
        let mut features = Vec::with_capacity(nodes.len() * d * f);
        let mut targets = Vec::with_capacity(nodes.len() * d);
        for &i in nodes {
            features.extend_from_slice(self.node_series(i));
            targets.extend_from_slice(&self.targets[i * d..(i + 1) * d]);
        }
        TimePanel {
            node_ids: nodes.iter().map(|&i| self.node_ids[i].clone()).collect(),
            dates: self.dates.clone(),
            feature_names: self.feature_names.clone(),
            features,
            targets,
        }
    }

    /// Writes the panel in the `date,symbol,<features>,target` schema.
    pub fn to_csv(&self) -> String {
        let mut out = format!("date,symbol,{},target\n", self.feature_names.join(","));
        for d in 0..self.n_dates() {
            for i in 0..self.n_nodes() {
                out.push_str(&format!("{},{}", self.dates[d], self.node_ids[i]));
                for f in 0..self.n_features() {
                    out.push_str(&format!(",{}", self.feature(i, d, f)));
                }
                out.push_str(&format!(",{}\n", self.target(i, d)));
            }
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Realized returns as `date,symbol,return` rows.
    pub fn returns_csv(&self) -> String {
        let mut out = String::from("date,symbol,return\n");
        for d in 0..self.n_dates() {
            for i in 0..self.n_nodes() {
                out.push_str(&format!("{},{},{}\n", self.dates[d], self.node_ids[i], self.target(i, d)));
            }
        }
        out
    }
}

/// What to do with a (date, node) pair missing from the CSV.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MissingPolicy {
    /// Drop the date for every node.
    Intersect,
    /// Carry the node's last features forward with a zero target; dates
    /// before a node's first observation are still dropped.
    ForwardFill,
}

/// Expectations for [`load_panel`].
#[derive(Clone, Debug)]
pub struct PanelSchema {
    /// Required feature columns, in order. `None` accepts whatever the header lists.
    pub features: Option<Vec<String>>,
    /// Nodes to keep. `None` keeps every symbol in the file.
    pub nodes: Option<Vec<String>>,
    pub missing: MissingPolicy,
}

impl Default for PanelSchema {
    fn default() -> Self {
        PanelSchema {
            features: None,
            nodes: None,
            missing: MissingPolicy::Intersect,
        }
    }
}

/// Rows and dates discarded while assembling a panel.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub dropped_dates: Vec<NaiveDate>,
    pub dropped_rows: usize,
    pub filled: usize,
}

pub fn load_panel(path: &Path, schema: &PanelSchema) -> Result<(TimePanel, LoadReport)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_panel(&text, schema, &path.display().to_string())
}

/// Parses the panel CSV schema `date,symbol,<feature_1..feature_F>,target`.
pub fn parse_panel(text: &str, schema: &PanelSchema, origin: &str) -> Result<(TimePanel, LoadReport)> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| perr(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 4 || header[0] != "date" || header[1] != "symbol" || header[header.len() - 1] != "target" {
        return Err(perr(1, "header must be date,symbol,<features...>,target".into()));
    }
    let feature_names: Vec<String> = header[2..header.len() - 1].to_vec();
    if let Some(expected) = &schema.features {
        if let Some(bad) = feature_names.iter().find(|c| !expected.contains(c)) {
            return Err(perr(1, format!("unknown column {bad:?}")));
        }
        if &feature_names != expected {
            return Err(perr(1, format!("feature columns {feature_names:?} differ from {expected:?}")));
        }
    }
    let f = feature_names.len();
    let wanted: Option<BTreeSet<&str>> = schema
        .nodes
        .as_ref()
        .map(|v| v.iter().map(String::as_str).collect());

    let mut rows: BTreeMap<(NaiveDate, String), (Vec<f64>, f64)> = BTreeMap::new();
    let mut symbols: Vec<String> = Vec::new();
    let mut seen_symbols = BTreeSet::new();
    let mut last_date: Option<NaiveDate> = None;
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            perr(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != header.len() {
            return Err(perr(line, format!("expected {} fields, got {}", header.len(), rec.len())));
        }
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d")
            .map_err(|_| perr(line, format!("bad date {:?}", &rec[0])))?;
        if last_date.is_some_and(|prev| date < prev) {
            return Err(perr(line, format!("date {date} is earlier than the previous row")));
        }
        last_date = Some(date);
        let symbol = rec[1].to_string();
        if symbol.is_empty() {
            return Err(perr(line, "empty symbol".into()));
        }
        let mut values = Vec::with_capacity(f + 1);
        for (k, cell) in rec.iter().enumerate().skip(2) {
            let v: f64 = cell
                .parse()
                .map_err(|_| perr(line, format!("unparseable number {cell:?} in column {}", header[k])))?;
            if !v.is_finite() {
                return Err(perr(line, format!("non-finite value in column {}", header[k])));
            }
            values.push(v);
        }
        if wanted.as_ref().is_some_and(|w| !w.contains(symbol.as_str())) {
            continue;
        }
        let target = values.pop().expect("target column present");
        if seen_symbols.insert(symbol.clone()) {
            symbols.push(symbol.clone());
        }
        if rows.insert((date, symbol.clone()), (values, target)).is_some() {
            return Err(perr(line, format!("duplicate row for {symbol} on {date}")));
        }
    }
    let node_ids: Vec<String> = match &schema.nodes {
        Some(req) => {
            if let Some(missing) = req.iter().find(|s| !seen_symbols.contains(*s)) {
                return Err(Error::invalid(format!("{origin}: requested node {missing} has no rows")));
            }
            req.clone()
        }
        None => symbols,
    };
    let all_dates: BTreeSet<NaiveDate> = rows.keys().map(|(d, _)| *d).collect();
    let mut report = LoadReport::default();
    let mut kept_dates = Vec::new();
    let mut last: HashMap<&str, Vec<f64>> = HashMap::new();
    let mut features_by_date: Vec<Vec<(Vec<f64>, f64)>> = Vec::new();
    for &date in &all_dates {
        let mut day = Vec::with_capacity(node_ids.len());
        let mut complete = true;
        for id in &node_ids {
            match rows.get(&(date, id.clone())) {
                Some((v, t)) => {
                    last.insert(id.as_str(), v.clone());
                    day.push((v.clone(), *t));
                }
                None => match (schema.missing, last.get(id.as_str())) {
                    (MissingPolicy::ForwardFill, Some(prev)) => {
                        report.filled += 1;
                        day.push((prev.clone(), 0.0));
                    }
                    _ => complete = false,
                },
            }
        }
        if complete {
            kept_dates.push(date);
            features_by_date.push(day);
        } else {
            report.dropped_rows += node_ids
                .iter()
                .filter(|id| rows.contains_key(&(date, (*id).clone())))
                .count();
            report.dropped_dates.push(date);
        }
    }
    if kept_dates.is_empty() {
        return Err(Error::invalid(format!("{origin}: no date has rows for every node")));
    }
    let (n, d) = (node_ids.len(), kept_dates.len());
    let mut features = vec![0.0; n * d * f];
    let mut targets = vec![0.0; n * d];
    for (di, day) in features_by_date.iter().enumerate() {
        for (i, (v, t)) in day.iter().enumerate() {
            features[(i * d + di) * f..(i * d + di + 1) * f].copy_from_slice(v);
            targets[i * d + di] = *t;
        }
    }
    let panel = TimePanel::new(node_ids, kept_dates, feature_names, features, targets)?;
    Ok((panel, report))
}

/// A T-step slice of the panel for every node, labelled with the change
/// realized on the following date.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub node_ids: Vec<String>,
    pub t: usize,
    pub f: usize,
    /// Row-major N×T×F.
    pub values: Vec<f64>,
    /// One target per node, taken at `target_date`.
    pub target: Vec<f64>,
    pub end_date: NaiveDate,
    pub target_date: NaiveDate,
    /// Index of the last input date in the source panel.
    pub end_index: usize,
}

impl WindowSample {
    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    /// Restriction to `nodes`, in that order.
    pub fn select_nodes(&self, nodes: &[usize]) -> WindowSample {
        let row = self.t * self.f;
        let mut values = Vec::with_capacity(nodes.len() * row);
        for &i in nodes {
            values.extend_from_slice(&self.values[i * row..(i + 1) * row]);
        }
        WindowSample {
            node_ids: nodes.iter().map(|&i| self.node_ids[i].clone()).collect(),
            values,
            target: nodes.iter().map(|&i| self.target[i]).collect(),
            ..self.clone()
        }
    }
}

/// Windows `[d−T+1, d]` labelled with the target at `d+1`, for `d` stepping by
/// `stride` from `T−1`. Returns an empty list when `T > D−1`.
pub fn window_samples(panel: &TimePanel, t: usize, stride: usize) -> Vec<WindowSample> {
    let d_total = panel.n_dates();
    if t == 0 || stride == 0 || t + 1 > d_total {
        return Vec::new();
    }
    let f = panel.n_features();
    let n = panel.n_nodes();
    (t - 1..d_total - 1)
        .step_by(stride)
        .map(|d| {
            let start = d + 1 - t;
            let mut values = Vec::with_capacity(n * t * f);
            for i in 0..n {
                let base = i * d_total;
                values.extend_from_slice(&panel.features[(base + start) * f..(base + d + 1) * f]);
            }
            WindowSample {
                node_ids: panel.node_ids.clone(),
                t,
                f,
                values,
                target: (0..n).map(|i| panel.target(i, d + 1)).collect(),
                end_date: panel.dates[d],
                target_date: panel.dates[d + 1],
                end_index: d,
            }
        })
        .collect()
}

/// Train / validation / test panels in chronological order.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: TimePanel,
    pub val: TimePanel,
    pub test: TimePanel,
}

/// Splits by calendar year, starting at the panel's first year. Years beyond
/// `train + val + test` are ignored.
pub fn split_by_year(panel: &TimePanel, train_years: usize, val_years: usize, test_years: usize) -> Result<Splits> {
    if train_years == 0 || val_years == 0 || test_years == 0 {
        return Err(Error::invalid("every split needs at least one year"));
    }
    let years: Vec<i32> = panel.dates.iter().map(|d| d.year()).collect::<BTreeSet<_>>().into_iter().collect();
    let need = train_years + val_years + test_years;
    if years.len() < need {
        return Err(Error::invalid(format!(
            "panel spans {} calendar years, split needs {need}",
            years.len()
        )));
    }
    let range_of = |lo: usize, hi: usize| {
        let (y0, y1) = (years[lo], years[hi - 1]);
        let start = panel.dates.iter().position(|d| d.year() >= y0).unwrap_or(0);
        let end = panel.dates.iter().rposition(|d| d.year() <= y1).map_or(start, |p| p + 1);
        start..end
    };
    Ok(Splits {
        train: panel.slice_dates(range_of(0, train_years)),
        val: panel.slice_dates(range_of(train_years, train_years + val_years)),
        test: panel.slice_dates(range_of(train_years + val_years, need)),
    })
}

/// Splits by fractions of the date axis; the test split takes the remainder.
pub fn split_by_ratio(panel: &TimePanel, train_frac: f64, val_frac: f64) -> Result<Splits> {
    let d = panel.n_dates();
    if !(train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0) {
        return Err(Error::invalid(format!("bad split fractions {train_frac}/{val_frac}")));
    }
    let a = (d as f64 * train_frac).round() as usize;
    let b = (d as f64 * (train_frac + val_frac)).round() as usize;
    if a == 0 || b <= a || b >= d {
        return Err(Error::invalid(format!("{d} dates are too few to split {train_frac}/{val_frac}")));
    }
    Ok(Splits {
        train: panel.slice_dates(0..a),
        val: panel.slice_dates(a..b),
        test: panel.slice_dates(b..d),
    })
}

/// Per-feature z-scoring with statistics from one (training) panel.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(panel: &TimePanel) -> Self {
        let f = panel.n_features();
        let count = (panel.n_nodes() * panel.n_dates()) as f64;
        let mut mean = vec![0.0; f];
        for row in panel.features.chunks(f) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; f];
        for row in panel.features.chunks(f) {
            for k in 0..f {
                var[k] += (row[k] - mean[k]).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / count).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, panel: &TimePanel) -> TimePanel {
        let f = panel.n_features();
        let mut out = panel.clone();
        for row in out.features.chunks_mut(f) {
            for k in 0..f {
                row[k] = (row[k] - self.mean[k]) / self.std[k];
            }
        }
        out
    }
}

/// Parameters of the synthetic lead-lag generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_clusters: usize,
    pub nodes_per_cluster: usize,
    pub lag: usize,
    pub noise_std: f64,
    pub length: usize,
    pub seed: u64,
    /// AR(1) coefficient of each leader.
    pub ar_coef: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_clusters: 4,
            nodes_per_cluster: 5,
            lag: 1,
            noise_std: 0.0,
            length: 600,
            seed: 0,
            ar_coef: 0.9,
        }
    }
}

/// Window of the rolling-mean feature.
pub const ROLLING_WINDOW: usize = 5;

/// Names of the synthetic features.
pub const SYNTHETIC_FEATURES: [&str; 3] = ["level", "change", "rolling_mean5"];

/// Node id of member `m` of cluster `c`; member 0 leads.
pub fn synthetic_node_id(c: usize, m: usize) -> String {
    format!("c{c:02}m{m:02}")
}

/// Business days starting from Monday 2010-01-04.
pub fn business_days(count: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(count);
    let mut d = NaiveDate::from_ymd_opt(2010, 1, 4).expect("valid date");
    while out.len() < count {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

/// Clustered lead-lag panel: each cluster's leader follows an AR(1) process,
/// and every follower equals the leader `lag` steps earlier plus Gaussian
/// noise. Features are the level, its one-step change and a
/// [`ROLLING_WINDOW`]-step rolling mean; the target on each date is the change
/// realized on that date. The returned graph links members of a cluster with
/// weight 1.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(TimePanel, CorrelationGraph)> {
    if spec.n_clusters == 0 || spec.nodes_per_cluster == 0 || spec.length < 2 {
        return Err(Error::invalid("synthetic panel needs clusters, members and ≥2 dates"));
    }
    if spec.lag == 0 || spec.noise_std.is_nan() || spec.noise_std < 0.0 {
        return Err(Error::invalid("synthetic lag must be positive and noise_std non-negative"));
    }
    if !(spec.ar_coef.abs() < 1.0) {
        return Err(Error::invalid("AR coefficient must lie in (-1, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.length;
    // History before the first date: lag for followers, ROLLING_WINDOW for
    // the rolling mean and one step for the change.
    let pre = spec.lag + ROLLING_WINDOW;
    let total = pre + d;
    let n = spec.n_clusters * spec.nodes_per_cluster;
    let f = SYNTHETIC_FEATURES.len();
    let stationary_sd = 1.0 / (1.0 - spec.ar_coef * spec.ar_coef).sqrt();

    let mut node_ids = Vec::with_capacity(n);
    let mut levels: Vec<Vec<f64>> = Vec::with_capacity(n);
    for c in 0..spec.n_clusters {
        let mut leader = Vec::with_capacity(total);
        let first: f64 = rng.sample::<f64, _>(StandardNormal) * stationary_sd;
        leader.push(first);
        for k in 1..total {
            let e: f64 = rng.sample(StandardNormal);
            leader.push(spec.ar_coef * leader[k - 1] + e);
        }
        for m in 0..spec.nodes_per_cluster {
            node_ids.push(synthetic_node_id(c, m));
            if m == 0 {
                levels.push(leader.clone());
                continue;
            }
            let series = (0..total)
                .map(|k| {
                    let base = if k >= spec.lag { leader[k - spec.lag] } else { leader[0] };
                    let noise: f64 = if spec.noise_std > 0.0 {
                        rng.sample::<f64, _>(StandardNormal) * spec.noise_std
                    } else {
                        0.0
                    };
                    base + noise
                })
                .collect();
            levels.push(series);
        }
    }

    let mut features = vec![0.0; n * d * f];
    let mut targets = vec![0.0; n * d];
    for (i, x) in levels.iter().enumerate() {
        for day in 0..d {
            let k = pre + day;
            let change = x[k] - x[k - 1];
            let rolling = x[k + 1 - ROLLING_WINDOW..=k].iter().sum::<f64>() / ROLLING_WINDOW as f64;
            let at = (i * d + day) * f;
            features[at..at + f].copy_from_slice(&[x[k], change, rolling]);
            targets[i * d + day] = change;
        }
    }
    let panel = TimePanel::new(
        node_ids.clone(),
        business_days(d),
        SYNTHETIC_FEATURES.iter().map(|s| s.to_string()).collect(),
        features,
        targets,
    )?;

    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j && i / spec.nodes_per_cluster == j / spec.nodes_per_cluster {
                weights[i * n + j] = 1.0;
            }
        }
    }
    let graph = CorrelationGraph::new(node_ids, weights, false)?;
    Ok((panel, graph))
}
