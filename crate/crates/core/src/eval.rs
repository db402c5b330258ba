//! Metrics, the per-pixel baselines and the method benchmark.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::classifier::{ClusterClassifier, REG_HEADS};
use crate::control::measure;
use crate::error::{Error, Result};
use crate::hsdata::{LabeledCube, SpectralLine};
use crate::ohslic::{ClusterBudget, OhslicConfig, OhslicStream};

/// Lines at the start of every cube left out of timing statistics.
pub const WARMUP_LINES: usize = 10;

/// Dice overlap of the background class. Masks hold `true` for tree.
///
/// Two masks without any background score 1.
pub fn dice_background(pred_tree: &[bool], true_tree: &[bool]) -> Result<f64> {
    if pred_tree.len() != true_tree.len() {
        return Err(Error::Dimension(format!(
            "mask lengths differ: {} vs {}",
            pred_tree.len(),
            true_tree.len()
        )));
    }
    let (mut p, mut t, mut both) = (0usize, 0usize, 0usize);
    for (&pt, &tt) in pred_tree.iter().zip(true_tree) {
        p += !pt as usize;
        t += !tt as usize;
        both += (!pt && !tt) as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + t) as f64)
}

/// Coefficient of determination; `-inf` when the truths are constant.
pub fn r2(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if truths.len() < 2 {
        return Err(Error::InvalidArgument(
            "r2 needs at least two samples".into(),
        ));
    }
    let mean = truths.iter().sum::<f64>() / truths.len() as f64;
    let ss_tot: f64 = truths.iter().map(|t| (t - mean).powi(2)).sum();
    let ss_res: f64 = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t).powi(2))
        .sum();
    if ss_tot == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Per-pixel result of running a method over a cube.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutput {
    pub width: usize,
    pub height: usize,
    /// Row-major chlorophyll, carotenoid, anthocyanin; zero off-tree.
    pub features: Vec<[f64; REG_HEADS]>,
    pub is_tree: Vec<bool>,
    pub line_ms: Vec<f64>,
    /// Cluster count per line; empty for the per-pixel baselines.
    pub clusters: Vec<usize>,
    pub splits: u64,
}

impl MethodOutput {
    fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            features: Vec::with_capacity(width * height),
            is_tree: Vec::with_capacity(width * height),
            line_ms: Vec::with_capacity(height),
            clusters: Vec::new(),
            splits: 0,
        }
    }
}

fn classify_line(
    line: &SpectralLine,
    spectra: impl Fn(usize) -> Vec<f64>,
    classifier: &dyn ClusterClassifier,
    out: &mut MethodOutput,
) -> Result<()> {
    let (res, ms) = measure(|| -> Result<()> {
        for col in 0..line.width() {
            let p = classifier.predict(&spectra(col))?;
            out.is_tree.push(p.is_tree);
            out.features
                .push(if p.is_tree { p.regressions() } else { [0.0; 3] });
        }
        Ok(())
    });
    res?;
    out.line_ms.push(ms);
    Ok(())
}

fn check_bands(cube: &LabeledCube, classifier: &dyn ClusterClassifier) -> Result<()> {
    let b = classifier.bands();
    if b != 0 && b != cube.bands() {
        return Err(Error::Dimension(format!(
            "classifier expects {b} bands, cube has {}",
            cube.bands()
        )));
    }
    Ok(())
}

/// Classifies every pixel on its own spectrum.
pub fn baseline_pc(cube: &LabeledCube, classifier: &dyn ClusterClassifier) -> Result<MethodOutput> {
    baseline_apc(cube, classifier, 1)
}

/// Classifies every pixel on the mean of a centered window of `window`
/// pixels, clamped at the line ends.
pub fn baseline_apc(
    cube: &LabeledCube,
    classifier: &dyn ClusterClassifier,
    window: usize,
) -> Result<MethodOutput> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "window {window} must be odd and positive"
        )));
    }
    if window > cube.width {
        return Err(Error::InvalidArgument(format!(
            "window {window} exceeds line width {}",
            cube.width
        )));
    }
    check_bands(cube, classifier)?;
    let half = window / 2;
    let mut out = MethodOutput::new(cube.width, cube.height);
    for row in 0..cube.height {
        let line = cube.line(row)?;
        let w = line.width();
        let spectra = |col: usize| {
            if window == 1 {
                return line.pixel(col).to_vec();
            }
            let lo = col.saturating_sub(half);
            let hi = (col + half).min(w - 1);
            let mut acc = vec![0.0; line.bands()];
            for c in lo..=hi {
                for (a, v) in acc.iter_mut().zip(line.pixel(c)) {
                    *a += v;
                }
            }
            let n = (hi - lo + 1) as f64;
            acc.iter_mut().for_each(|a| *a /= n);
            acc
        };
        classify_line(&line, spectra, classifier, &mut out)?;
    }
    Ok(out)
}

/// Streams the cube through OHSLIC and the classifier.
pub fn run_ohslic(
    cube: &LabeledCube,
    classifier: &dyn ClusterClassifier,
    config: &OhslicConfig,
    budget: ClusterBudget,
) -> Result<MethodOutput> {
    check_bands(cube, classifier)?;
    let mut stream = OhslicStream::new(config.clone(), budget)?;
    let mut out = MethodOutput::new(cube.width, cube.height);
    for row in 0..cube.height {
        let line = cube.line(row)?;
        let r = stream.push(&line, classifier)?;
        out.features.extend(r.features);
        out.is_tree.extend(r.is_tree);
        out.line_ms.push(r.elapsed_ms);
        out.clusters.push(r.clusters);
    }
    out.splits = stream.state().map_or(0, |s| s.stats.splits);
    Ok(out)
}

/// Accumulates predictions and truths across cubes.
#[derive(Debug, Clone, Default)]
pub struct Scorer {
    pred_tree: Vec<bool>,
    true_tree: Vec<bool>,
    pred: [Vec<f64>; REG_HEADS],
    truth: [Vec<f64>; REG_HEADS],
    line_ms: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub dice_background: f64,
    pub r2: [f64; REG_HEADS],
    pub r2_mean: f64,
}

impl Scorer {
    /// Adds one cube. R² uses the true-tree pixels only; trees predicted as
    /// background contribute zero predictions.
    pub fn add(&mut self, cube: &LabeledCube, out: &MethodOutput) -> Result<()> {
        let truth = cube
            .truth
            .as_ref()
            .ok_or_else(|| Error::InsufficientData("cube has no ground truth".into()))?;
        let labels = truth
            .labels
            .as_ref()
            .ok_or_else(|| Error::InsufficientData("cube has no leaf labels".into()))?;
        if out.is_tree.len() != cube.pixels() {
            return Err(Error::Dimension(
                "method output does not cover the cube".into(),
            ));
        }
        for i in 0..cube.pixels() {
            let t = truth.is_tree(i);
            self.pred_tree.push(out.is_tree[i]);
            self.true_tree.push(t);
            if t {
                let p = labels[i].pigments();
                for h in 0..REG_HEADS {
                    self.pred[h].push(out.features[i][h]);
                    self.truth[h].push(p[h]);
                }
            }
        }
        self.line_ms.extend(
            out.line_ms
                .iter()
                .skip(WARMUP_LINES.min(out.line_ms.len().saturating_sub(1))),
        );
        Ok(())
    }

    pub fn scores(&self) -> Result<Scores> {
        let dice = dice_background(&self.pred_tree, &self.true_tree)?;
        let mut r = [0.0; REG_HEADS];
        for h in 0..REG_HEADS {
            r[h] = r2(&self.pred[h], &self.truth[h])?;
        }
        Ok(Scores {
            dice_background: dice,
            r2: r,
            r2_mean: r.iter().sum::<f64>() / REG_HEADS as f64,
        })
    }

    /// Mean and standard deviation of the timed lines.
    pub fn timing(&self) -> (f64, f64) {
        let n = self.line_ms.len().max(1) as f64;
        let mean = self.line_ms.iter().sum::<f64>() / n;
        let var = self.line_ms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "PC")]
    Pc,
    #[serde(rename = "APC")]
    Apc,
    #[serde(rename = "OHSLIC-C")]
    OhslicC,
    #[serde(rename = "OHSLIC-C-C")]
    OhslicCC,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Pc, Method::Apc, Method::OhslicC, Method::OhslicCC];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pc => "PC",
            Method::Apc => "APC",
            Method::OhslicC => "OHSLIC-C",
            Method::OhslicCC => "OHSLIC-C-C",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub methods: Vec<Method>,
    pub apc_window: usize,
    pub ohslic: OhslicConfig,
    /// Cluster count of the OHSLIC methods.
    pub clusters: usize,
    /// Hold OHSLIC-C-C at `clusters` by merging after every split. When
    /// false, splits add clusters and only idle clusters are removed.
    pub hold_feedback_k: bool,
    /// Cluster counts for the sweep; empty to skip it.
    pub sweep: Vec<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            apc_window: 5,
            ohslic: OhslicConfig::default(),
            clusters: 40,
            hold_feedback_k: false,
            sweep: vec![5, 10, 20, 40, 80, 160],
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("bench: no methods selected".into()));
        }
        if self.clusters < 2 || self.sweep.iter().any(|&k| k < 2) {
            return Err(Error::Config("bench: cluster counts must be >= 2".into()));
        }
        self.ohslic.validate()
    }

    fn ohslic_for(&self, k: usize, feedback: bool) -> OhslicConfig {
        OhslicConfig {
            k_init: k,
            confidence_feedback: feedback,
            ..self.ohslic.clone()
        }
    }
}

/// Runs one method over a cube.
pub fn run_method(
    method: Method,
    cube: &LabeledCube,
    classifier: &dyn ClusterClassifier,
    cfg: &BenchConfig,
    clusters: usize,
) -> Result<MethodOutput> {
    match method {
        Method::Pc => baseline_pc(cube, classifier),
        Method::Apc => baseline_apc(cube, classifier, cfg.apc_window),
        Method::OhslicC => {
            let k = clusters.min(cube.width);
            run_ohslic(
                cube,
                classifier,
                &cfg.ohslic_for(k, false),
                ClusterBudget::Fixed(k),
            )
        }
        Method::OhslicCC => {
            let k = clusters.min(cube.width);
            let budget = if cfg.hold_feedback_k {
                ClusterBudget::Fixed(k)
            } else {
                ClusterBudget::Free
            };
            run_ohslic(cube, classifier, &cfg.ohslic_for(k, true), budget)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: Method,
    pub dice_background: f64,
    pub r2_ab: f64,
    pub r2_ar: f64,
    pub r2_ant: f64,
    pub r2_mean: f64,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub fps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub dice_background: f64,
    pub r2_ab: f64,
    pub r2_ar: f64,
    pub r2_ant: f64,
    pub r2_mean: f64,
    pub mean_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MethodRow>,
    pub sweep: Vec<SweepRow>,
    pub cubes: usize,
    pub dataset_hash: String,
    pub config_hash: String,
    pub config: BenchConfig,
}

/// Timing-free view of a report, stable across reruns with the same seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsSummary {
    pub methods: Vec<(Method, Scores)>,
    pub sweep: Vec<(usize, Scores)>,
    pub dataset_hash: String,
    pub config_hash: String,
}

fn row(method: Method, s: &Scores, (mean, std): (f64, f64)) -> MethodRow {
    MethodRow {
        method,
        dice_background: s.dice_background,
        r2_ab: s.r2[0],
        r2_ar: s.r2[1],
        r2_ant: s.r2[2],
        r2_mean: s.r2_mean,
        mean_ms: mean,
        std_ms: std,
        fps: if mean > 0.0 {
            1000.0 / mean
        } else {
            f64::INFINITY
        },
    }
}

fn scores_of(r: &MethodRow) -> Scores {
    Scores {
        dice_background: r.dice_background,
        r2: [r.r2_ab, r.r2_ar, r.r2_ant],
        r2_mean: r.r2_mean,
    }
}

/// Scores every configured method, then the OHSLIC-C cluster sweep.
pub fn benchmark(
    cubes: &[LabeledCube],
    classifier: &dyn ClusterClassifier,
    cfg: &BenchConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if cubes.is_empty() {
        return Err(Error::InsufficientData("no cubes to benchmark".into()));
    }
    let mut rows = Vec::new();
    for &m in &cfg.methods {
        let mut scorer = Scorer::default();
        for cube in cubes {
            scorer.add(cube, &run_method(m, cube, classifier, cfg, cfg.clusters)?)?;
        }
        let s = scorer.scores()?;
        log::info!(
            "{}: dice {:.3} r2 {:.3}",
            m.name(),
            s.dice_background,
            s.r2_mean
        );
        rows.push(row(m, &s, scorer.timing()));
    }
    let mut sweep = Vec::new();
    for &k in &cfg.sweep {
        let mut scorer = Scorer::default();
        for cube in cubes {
            scorer.add(
                cube,
                &run_method(Method::OhslicC, cube, classifier, cfg, k)?,
            )?;
        }
        let s = scorer.scores()?;
        log::info!(
            "sweep K={k}: dice {:.3} r2 {:.3}",
            s.dice_background,
            s.r2_mean
        );
        sweep.push(SweepRow {
            k,
            dice_background: s.dice_background,
            r2_ab: s.r2[0],
            r2_ar: s.r2[1],
            r2_ant: s.r2[2],
            r2_mean: s.r2_mean,
            mean_ms: scorer.timing().0,
        });
    }
    Ok(EvalReport {
        rows,
        sweep,
        cubes: cubes.len(),
        dataset_hash: String::new(),
        config_hash: String::new(),
        config: cfg.clone(),
    })
}

impl EvalReport {
    pub fn row(&self, method: Method) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn metrics(&self) -> MetricsSummary {
        MetricsSummary {
            methods: self.rows.iter().map(|r| (r.method, scores_of(r))).collect(),
            sweep: self
                .sweep
                .iter()
                .map(|s| {
                    (
                        s.k,
                        Scores {
                            dice_background: s.dice_background,
                            r2: [s.r2_ab, s.r2_ar, s.r2_ant],
                            r2_mean: s.r2_mean,
                        },
                    )
                })
                .collect(),
            dataset_hash: self.dataset_hash.clone(),
            config_hash: self.config_hash.clone(),
        }
    }

    /// Aligned table with columns Method, Dice, R², time (ms), FPS.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>8} {:>8} {:>14} {:>10}",
            "Method", "Dice", "R2", "Time (ms)", "FPS"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<12} {:>8.3} {:>8.3} {:>14.3} {:>10.1}",
                r.method.name(),
                r.dice_background,
                r.r2_mean,
                r.mean_ms,
                r.fps
            );
        }
        s
    }

    pub fn sweep_csv(&self) -> String {
        let mut s = String::from("k,dice_background,r2_ab,r2_ar,r2_ant,r2_mean,mean_ms\n");
        for r in &self.sweep {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4}",
                r.k, r.dice_background, r.r2_ab, r.r2_ar, r.r2_ant, r.r2_mean, r.mean_ms
            );
        }
        s
    }
}

/// Per-line processing time of OHSLIC-C for each cluster count, measured on
/// the first cube. Returns `(k, mean ms)` pairs.
pub fn time_vs_k(
    cube: &LabeledCube,
    classifier: &dyn ClusterClassifier,
    config: &OhslicConfig,
    ks: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for &k in ks {
        let k = k.min(cube.width);
        let cfg = OhslicConfig {
            k_init: k,
            confidence_feedback: false,
            ..config.clone()
        };
        let r = run_ohslic(cube, classifier, &cfg, ClusterBudget::Fixed(k))?;
        let timed = &r.line_ms[WARMUP_LINES.min(r.line_ms.len() - 1)..];
        out.push((k, timed.iter().sum::<f64>() / timed.len() as f64));
    }
    Ok(out)
}
