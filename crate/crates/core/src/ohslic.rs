//! Online spectral-spatial clustering of push-broom lines.
//!
//! Clusters persist across lines. Each line, every pixel joins the cluster
//! with the smallest weighted spectral + column distance among the clusters
//! within a search window; centroids then drift towards the line's member
//! means with exponential forgetting. Clusters the classifier is unsure about
//! are split before the next line, and the cluster count can be steered by a
//! controller through [`set_target_clusters`].

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::classifier::{ClusterClassifier, ClusterPrediction};
use crate::control::Controller;
use crate::error::{Error, Result};
use crate::hsdata::{normalize_into, SpectralKind, SpectralLine};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceForm {
    /// `w_spectral * d_spec + w_spatial * d_spat`
    Additive,
    /// `sqrt((w_spectral * d_spec)^2 + (w_spatial * d_spat)^2)`, as in SLIC.
    Quadrature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OhslicConfig {
    pub k_init: usize,
    pub w_spatial: f64,
    pub w_spectral: f64,
    /// Clusters whose confidence is strictly below this are split.
    pub confidence_threshold: f64,
    /// Centroid spectra are refreshed after this many assigned pixels.
    pub update_stride: usize,
    /// Weight of the newest line when centroids are updated, in (0, 1].
    pub centroid_decay: f64,
    /// Half-width of the candidate window, in units of the grid spacing.
    pub search_window: f64,
    pub distance: DistanceForm,
    /// Whether classifier confidence drives splitting.
    pub confidence_feedback: bool,
    /// Clusters empty for this many consecutive lines are removed.
    pub idle_lines_limit: u32,
    /// Cluster in the classifier's normalized input space when it has one.
    pub normalize_input: bool,
}

impl Default for OhslicConfig {
    fn default() -> Self {
        Self {
            k_init: 40,
            w_spatial: 40.0,
            w_spectral: 10.0,
            confidence_threshold: 0.7,
            update_stride: 1,
            centroid_decay: 0.3,
            search_window: 2.0,
            distance: DistanceForm::Additive,
            confidence_feedback: true,
            idle_lines_limit: 5,
            normalize_input: true,
        }
    }
}

impl OhslicConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ohslic: {m}")));
        if self.k_init < 2 {
            return bad("k_init must be >= 2");
        }
        if !(self.w_spatial > 0.0 && self.w_spectral > 0.0) {
            return bad("weights must be positive");
        }
        if !(0.5..=1.0).contains(&self.confidence_threshold) {
            return bad("confidence_threshold must lie in [0.5, 1]");
        }
        if self.update_stride == 0 {
            return bad("update_stride must be >= 1");
        }
        if !(self.centroid_decay > 0.0 && self.centroid_decay <= 1.0) {
            return bad("centroid_decay must lie in (0, 1]");
        }
        if !(self.search_window > 0.0) {
            return bad("search_window must be positive");
        }
        if self.idle_lines_limit == 0 {
            return bad("idle_lines_limit must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: u32,
    pub centroid_spectrum: Vec<f64>,
    pub centroid_col: f64,
    /// Pixels absorbed on the most recent line.
    pub count: usize,
    pub lifetime_count: u64,
    pub last_confidence: f64,
    pub split_pending: bool,
    /// Consecutive lines with no members.
    pub idle_lines: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClusterStats {
    pub splits: u64,
    pub merges: u64,
    pub removals: u64,
    pub fallbacks: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    clusters: Vec<Cluster>,
    width: usize,
    bands: usize,
    spacing: f64,
    line_counter: u64,
    next_id: u32,
    /// Previous line and its labels, used to seed split children.
    last_values: Vec<f64>,
    last_labels: Vec<u32>,
    pub stats: ClusterStats,
}

/// Per-line diagnostic record for one cluster.
#[derive(Debug, Clone, Serialize)]
pub struct ClusterSnapshot {
    pub line: u64,
    pub id: u32,
    pub col: f64,
    pub count: usize,
    pub confidence: f64,
}

impl ClusterState {
    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    /// Grid interval `S = width / K`.
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn line_counter(&self) -> u64 {
        self.line_counter
    }

    pub fn get(&self, id: u32) -> Option<&Cluster> {
        self.clusters.iter().find(|c| c.id == id)
    }

    pub fn pending_splits(&self) -> usize {
        self.clusters.iter().filter(|c| c.split_pending).count()
    }

    pub fn snapshot(&self) -> Vec<ClusterSnapshot> {
        self.clusters
            .iter()
            .map(|c| ClusterSnapshot {
                line: self.line_counter,
                id: c.id,
                col: c.centroid_col,
                count: c.count,
                confidence: c.last_confidence,
            })
            .collect()
    }

    /// Renames every cluster id through `f`, which must stay injective.
    pub fn relabel_ids(&mut self, f: impl Fn(u32) -> u32) -> Result<()> {
        let mut ids: Vec<u32> = self.clusters.iter().map(|c| f(c.id)).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("relabeling is not injective".into()));
        }
        for c in &mut self.clusters {
            c.id = f(c.id);
        }
        for l in &mut self.last_labels {
            *l = f(*l);
        }
        self.next_id = self.next_id.max(ids.last().map_or(0, |m| m + 1));
        Ok(())
    }

    fn fresh_id(&mut self) -> u32 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn clamp_col(&self, col: f64) -> f64 {
        col.clamp(0.0, self.width as f64 - 1e-9)
    }

    fn restore_order(&mut self) {
        self.clusters.sort_by(|a, b| {
            a.centroid_col
                .total_cmp(&b.centroid_col)
                .then(a.id.cmp(&b.id))
        });
        self.spacing = self.width as f64 / self.clusters.len() as f64;
    }

    /// Replaces the cluster at `idx` with two children at `col +- S/4`.
    /// Half the difference between the parent's left and right members on
    /// the previous line, limited per band so that `parent ± delta` stays
    /// between the two half means and the parent.
    fn split_delta(&self, parent: &Cluster) -> Vec<f64> {
        let bands = self.bands;
        let mut left = vec![0.0; bands];
        let mut right = vec![0.0; bands];
        let (mut nl, mut nr) = (0usize, 0usize);
        for (col, &label) in self.last_labels.iter().enumerate() {
            if label != parent.id {
                continue;
            }
            let px = &self.last_values[col * bands..(col + 1) * bands];
            let (acc, n) = if (col as f64 + 0.5) < parent.centroid_col {
                (&mut left, &mut nl)
            } else {
                (&mut right, &mut nr)
            };
            acc.iter_mut().zip(px).for_each(|(a, v)| *a += v);
            *n += 1;
        }
        if nl == 0 || nr == 0 {
            return vec![0.0; bands];
        }
        (0..bands)
            .map(|b| {
                let (ml, mr, p) = (
                    left[b] / nl as f64,
                    right[b] / nr as f64,
                    parent.centroid_spectrum[b],
                );
                let room = (p - ml.min(mr).min(p)).min(ml.max(mr).max(p) - p);
                ((ml - mr) / 2.0).clamp(-room, room)
            })
            .collect()
    }

    fn split_at(&mut self, idx: usize) {
        let parent = self.clusters.remove(idx);
        let offset = self.spacing / 4.0;
        let lifetime = parent.lifetime_count.div_ceil(2);
        let delta = self.split_delta(&parent);
        for sign in [-1.0, 1.0] {
            let id = self.fresh_id();
            let col = self.clamp_col(parent.centroid_col + sign * offset);
            // the left child takes the left members' side of the spectrum
            let centroid_spectrum = parent
                .centroid_spectrum
                .iter()
                .zip(&delta)
                .map(|(p, d)| p - sign * d)
                .collect();
            self.clusters.push(Cluster {
                id,
                centroid_spectrum,
                centroid_col: col,
                count: parent.count / 2,
                lifetime_count: lifetime,
                last_confidence: 1.0,
                split_pending: false,
                idle_lines: 0,
            });
        }
        self.stats.splits += 1;
    }

    fn largest_index(&self) -> usize {
        let mut best = 0;
        for (i, c) in self.clusters.iter().enumerate() {
            let b = &self.clusters[best];
            if c.count > b.count || (c.count == b.count && c.id < b.id) {
                best = i;
            }
        }
        best
    }

    /// Start-of-line maintenance: drop long-idle clusters (re-spending their
    /// budget on the largest cluster) and carry out pending splits.
    fn begin_line(&mut self, config: &OhslicConfig) {
        let mut freed = 0;
        while self.clusters.len() > 2 {
            match self
                .clusters
                .iter()
                .position(|c| c.idle_lines >= config.idle_lines_limit)
            {
                Some(i) => {
                    self.clusters.remove(i);
                    self.stats.removals += 1;
                    freed += 1;
                }
                None => break,
            }
        }
        if freed > 0 {
            self.restore_order();
            for _ in 0..freed {
                let i = self.largest_index();
                self.split_at(i);
                self.restore_order();
            }
        }
        let pending: Vec<u32> = self
            .clusters
            .iter()
            .filter(|c| c.split_pending)
            .map(|c| c.id)
            .collect();
        for id in pending {
            if let Some(i) = self.clusters.iter().position(|c| c.id == id) {
                self.split_at(i);
            }
        }
        self.restore_order();
    }
}

/// Seeds `k_init` clusters on a regular column grid from the first line.
pub fn init_clusters(
    config: &OhslicConfig,
    width: usize,
    first_line: &SpectralLine,
) -> Result<ClusterState> {
    config.validate()?;
    if width < config.k_init {
        return Err(Error::InvalidArgument(format!(
            "line width {width} is smaller than k_init {}",
            config.k_init
        )));
    }
    if first_line.width() != width {
        return Err(Error::Dimension(format!(
            "first line has width {}, expected {width}",
            first_line.width()
        )));
    }
    let spacing = width as f64 / config.k_init as f64;
    let clusters = (0..config.k_init)
        .map(|i| {
            let col = (i as f64 + 0.5) * spacing;
            let src = (col.floor() as usize).min(width - 1);
            Cluster {
                id: i as u32,
                centroid_spectrum: first_line.pixel(src).to_vec(),
                centroid_col: col,
                count: 0,
                lifetime_count: 0,
                last_confidence: 1.0,
                split_pending: false,
                idle_lines: 0,
            }
        })
        .collect();
    Ok(ClusterState {
        clusters,
        width,
        bands: first_line.bands(),
        spacing,
        line_counter: 0,
        next_id: config.k_init as u32,
        last_values: Vec::new(),
        last_labels: Vec::new(),
        stats: ClusterStats::default(),
    })
}

#[inline]
fn combine(config: &OhslicConfig, d_spec: f64, d_spat: f64) -> f64 {
    let a = config.w_spectral * d_spec;
    let b = config.w_spatial * d_spat;
    match config.distance {
        DistanceForm::Additive => a + b,
        DistanceForm::Quadrature => (a * a + b * b).sqrt(),
    }
}

#[inline]
fn spectral_distance(a: &[f64], b: &[f64]) -> f64 {
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (ss / a.len() as f64).sqrt()
}

/// Weighted spectral + spatial distance between a pixel and a cluster.
///
/// `d_spec` is the RMS spectral difference, `d_spat` the column offset in
/// units of `spacing`.
pub fn pixel_distance(
    pixel_spectrum: &[f64],
    pixel_col: f64,
    cluster: &Cluster,
    config: &OhslicConfig,
    spacing: f64,
) -> Result<f64> {
    if pixel_spectrum.len() != cluster.centroid_spectrum.len() || pixel_spectrum.is_empty() {
        return Err(Error::Dimension(format!(
            "pixel has {} bands, centroid has {}",
            pixel_spectrum.len(),
            cluster.centroid_spectrum.len()
        )));
    }
    let d_spec = spectral_distance(pixel_spectrum, &cluster.centroid_spectrum);
    let d_spat = (pixel_col - cluster.centroid_col).abs() / spacing;
    Ok(combine(config, d_spec, d_spat))
}

/// Mean spectrum of one cluster's members on a line.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMean {
    pub id: u32,
    pub count: usize,
    pub mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineAssignment {
    /// Cluster id of every pixel.
    pub labels: Vec<u32>,
    /// One entry per cluster with at least one member, in column order.
    pub cluster_means: Vec<ClusterMean>,
}

/// Assigns every pixel of `line` to a cluster and updates the centroids.
pub fn assign_line(
    state: &mut ClusterState,
    line: &SpectralLine,
    config: &OhslicConfig,
) -> Result<LineAssignment> {
    if line.kind() == SpectralKind::Raw {
        return Err(Error::InvalidArgument(
            "assignment expects a calibrated line".into(),
        ));
    }
    if line.width() != state.width || line.bands() != state.bands {
        return Err(Error::Dimension(format!(
            "line is {}x{}, state expects {}x{}",
            line.width(),
            line.bands(),
            state.width,
            state.bands
        )));
    }
    state.begin_line(config);

    let k = state.clusters.len();
    let bands = state.bands;
    let alpha = config.centroid_decay;
    let inv_spacing = 1.0 / state.spacing;
    let window = config.search_window * state.spacing;

    let mut effective: Vec<f64> = Vec::with_capacity(k * bands);
    for c in &state.clusters {
        effective.extend_from_slice(&c.centroid_spectrum);
    }
    let cols: Vec<f64> = state.clusters.iter().map(|c| c.centroid_col).collect();
    let ids: Vec<u32> = state.clusters.iter().map(|c| c.id).collect();
    let mut sums = vec![0.0f64; k * bands];
    let mut col_sums = vec![0.0f64; k];
    let mut counts = vec![0usize; k];
    let mut dirty: Vec<usize> = Vec::new();
    let mut is_dirty = vec![false; k];
    let mut members = vec![0usize; line.width()];

    let score = |effective: &[f64], ci: usize, px: &[f64], x: f64| {
        let d_spec = spectral_distance(px, &effective[ci * bands..(ci + 1) * bands]);
        combine(config, d_spec, (x - cols[ci]).abs() * inv_spacing)
    };

    for (col, member) in members.iter_mut().enumerate() {
        let px = line.pixel(col);
        let x = col as f64 + 0.5;
        let lo = cols.partition_point(|&c| c < x - window);
        let hi = cols.partition_point(|&c| c <= x + window);
        let mut best: Option<(f64, u32, usize)> = None;
        for ci in lo..hi {
            let d = score(&effective, ci, px, x);
            if best.map_or(true, |(bd, bid, _)| d < bd || (d == bd && ids[ci] < bid)) {
                best = Some((d, ids[ci], ci));
            }
        }
        let ci = match best {
            Some((_, _, ci)) => ci,
            None => {
                state.stats.fallbacks += 1;
                log::debug!(
                    "pixel {col} of line {} has no cluster within the window",
                    line.row_index()
                );
                let mut g: Option<(f64, u32, usize)> = None;
                for ci in 0..k {
                    let d = score(&effective, ci, px, x);
                    if g.map_or(true, |(bd, bid, _)| d < bd || (d == bd && ids[ci] < bid)) {
                        g = Some((d, ids[ci], ci));
                    }
                }
                g.expect("at least two clusters").2
            }
        };
        *member = ci;
        for (s, v) in sums[ci * bands..(ci + 1) * bands].iter_mut().zip(px) {
            *s += v;
        }
        col_sums[ci] += x;
        counts[ci] += 1;
        if !is_dirty[ci] {
            is_dirty[ci] = true;
            dirty.push(ci);
        }
        if (col + 1) % config.update_stride == 0 {
            for &d in &dirty {
                let n = counts[d] as f64;
                let carried = &state.clusters[d].centroid_spectrum;
                for b in 0..bands {
                    effective[d * bands + b] =
                        (1.0 - alpha) * carried[b] + alpha * sums[d * bands + b] / n;
                }
                is_dirty[d] = false;
            }
            dirty.clear();
        }
    }

    let mut cluster_means = Vec::new();
    for (ci, c) in state.clusters.iter_mut().enumerate() {
        c.count = counts[ci];
        if counts[ci] == 0 {
            c.idle_lines += 1;
            continue;
        }
        c.idle_lines = 0;
        let n = counts[ci] as f64;
        let mean: Vec<f64> = sums[ci * bands..(ci + 1) * bands]
            .iter()
            .map(|s| s / n)
            .collect();
        for (cs, m) in c.centroid_spectrum.iter_mut().zip(&mean) {
            *cs = (1.0 - alpha) * *cs + alpha * m;
        }
        c.centroid_col = (1.0 - alpha) * c.centroid_col + alpha * col_sums[ci] / n;
        c.lifetime_count += counts[ci] as u64;
        cluster_means.push(ClusterMean {
            id: c.id,
            count: counts[ci],
            mean,
        });
    }
    let labels: Vec<u32> = members.iter().map(|&ci| ids[ci]).collect();
    state.last_values.clear();
    state.last_values.extend_from_slice(line.values());
    state.last_labels.clone_from(&labels);
    for c in &mut state.clusters {
        c.centroid_col = c.centroid_col.clamp(0.0, state.width as f64 - 1e-9);
    }
    state.restore_order();
    state.line_counter += 1;
    Ok(LineAssignment {
        labels,
        cluster_means,
    })
}

/// Records classifier confidences and flags clusters below the threshold
/// for splitting at the start of the next line.
pub fn apply_confidence(
    state: &mut ClusterState,
    predictions: &[(u32, ClusterPrediction)],
    config: &OhslicConfig,
) -> Result<usize> {
    for (id, _) in predictions {
        if state.get(*id).is_none() {
            return Err(Error::UnknownCluster(*id));
        }
    }
    if let Some(c) = state
        .clusters
        .iter()
        .find(|c| c.count > 0 && !predictions.iter().any(|(id, _)| *id == c.id))
    {
        return Err(Error::InvalidArgument(format!(
            "no prediction for active cluster {}",
            c.id
        )));
    }
    let mut flagged = 0;
    for (id, p) in predictions {
        let c = state
            .clusters
            .iter_mut()
            .find(|c| c.id == *id)
            .expect("checked above");
        c.last_confidence = p.confidence;
        if p.confidence < config.confidence_threshold {
            c.split_pending = true;
            flagged += 1;
        }
    }
    Ok(flagged)
}

/// Merges or splits clusters until exactly `k_target` remain.
///
/// Merging takes the column-adjacent pair with the closest centroid spectra
/// (clusters waiting to split are merged last); splitting takes the cluster
/// with the most members on the last line.
pub fn set_target_clusters(state: &mut ClusterState, k_target: usize) -> Result<()> {
    if k_target < 2 {
        return Err(Error::InvalidArgument(format!(
            "target cluster count {k_target} is below 2"
        )));
    }
    if k_target > state.width {
        return Err(Error::InvalidArgument(format!(
            "target cluster count {k_target} exceeds line width {}",
            state.width
        )));
    }
    while state.clusters.len() > k_target {
        let mut best: Option<(bool, f64, usize)> = None;
        for i in 0..state.clusters.len() - 1 {
            let (a, b) = (&state.clusters[i], &state.clusters[i + 1]);
            let pending = a.split_pending || b.split_pending;
            let d = spectral_distance(&a.centroid_spectrum, &b.centroid_spectrum);
            let better = match best {
                None => true,
                Some((bp, bd, _)) => (pending, d) < (bp, bd),
            };
            if better {
                best = Some((pending, d, i));
            }
        }
        let i = best.expect("at least two clusters").2;
        let b = state.clusters.remove(i + 1);
        let a = &mut state.clusters[i];
        let (wa, wb) = if a.lifetime_count + b.lifetime_count == 0 {
            (0.5, 0.5)
        } else {
            let t = (a.lifetime_count + b.lifetime_count) as f64;
            (a.lifetime_count as f64 / t, b.lifetime_count as f64 / t)
        };
        for (x, y) in a.centroid_spectrum.iter_mut().zip(&b.centroid_spectrum) {
            *x = wa * *x + wb * y;
        }
        a.centroid_col = wa * a.centroid_col + wb * b.centroid_col;
        a.id = a.id.min(b.id);
        a.count += b.count;
        a.lifetime_count += b.lifetime_count;
        a.last_confidence = a.last_confidence.min(b.last_confidence);
        a.split_pending = false;
        a.idle_lines = a.idle_lines.min(b.idle_lines);
        state.stats.merges += 1;
        state.restore_order();
    }
    while state.clusters.len() < k_target {
        let i = state.largest_index();
        state.split_at(i);
        state.restore_order();
    }
    state.restore_order();
    Ok(())
}

/// How the cluster count evolves between lines.
#[derive(Debug, Clone)]
pub enum ClusterBudget {
    /// Only splits and removals change K.
    Free,
    /// K is restored to this value after every line.
    Fixed(usize),
    /// K follows a latency controller.
    Adaptive(Controller),
}

/// Result of processing one line.
#[derive(Debug, Clone, PartialEq)]
pub struct LineOutput {
    /// Chlorophyll, carotenoid, anthocyanin per pixel; zero off-tree.
    pub features: Vec<[f64; 3]>,
    pub is_tree: Vec<bool>,
    pub labels: Vec<u32>,
    /// Cluster count used for this line.
    pub clusters: usize,
    pub splits_flagged: usize,
    pub elapsed_ms: f64,
}

/// Clusters a line, classifies every cluster mean, feeds confidence back
/// and lets the budget adjust K.
pub fn process_line(
    state: &mut ClusterState,
    line: &SpectralLine,
    classifier: &dyn ClusterClassifier,
    budget: &mut ClusterBudget,
    config: &OhslicConfig,
) -> Result<LineOutput> {
    let start = Instant::now();
    let assignment = assign_line(state, line, config)?;
    let clusters = state.len();
    let mut predictions = Vec::with_capacity(assignment.cluster_means.len());
    for cm in &assignment.cluster_means {
        predictions.push((cm.id, classifier.predict(&cm.mean)?));
    }
    let mut features = Vec::with_capacity(line.width());
    let mut is_tree = Vec::with_capacity(line.width());
    for id in &assignment.labels {
        let p = &predictions
            .iter()
            .find(|(pid, _)| pid == id)
            .expect("every label has a mean")
            .1;
        is_tree.push(p.is_tree);
        features.push(if p.is_tree { p.regressions() } else { [0.0; 3] });
    }
    let splits_flagged = if config.confidence_feedback {
        apply_confidence(state, &predictions, config)?
    } else {
        for (id, p) in &predictions {
            if let Some(c) = state.clusters.iter_mut().find(|c| c.id == *id) {
                c.last_confidence = p.confidence;
            }
        }
        0
    };
    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    match budget {
        ClusterBudget::Free => {}
        ClusterBudget::Fixed(k) => set_target_clusters(state, (*k).min(state.width))?,
        ClusterBudget::Adaptive(ctrl) => {
            let k = ctrl.tick(elapsed_ms, clusters)?;
            set_target_clusters(state, k.min(state.width))?;
        }
    }
    Ok(LineOutput {
        features,
        is_tree,
        labels: assignment.labels,
        clusters,
        splits_flagged,
        elapsed_ms,
    })
}

/// Streams lines through [`process_line`], seeding clusters from the first.
#[derive(Debug, Clone)]
pub struct OhslicStream {
    pub config: OhslicConfig,
    pub budget: ClusterBudget,
    state: Option<ClusterState>,
}

impl OhslicStream {
    pub fn new(config: OhslicConfig, budget: ClusterBudget) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            budget,
            state: None,
        })
    }

    pub fn state(&self) -> Option<&ClusterState> {
        self.state.as_ref()
    }

    pub fn push(
        &mut self,
        line: &SpectralLine,
        classifier: &dyn ClusterClassifier,
    ) -> Result<LineOutput> {
        let norm = if self.config.normalize_input {
            classifier.input_norm()
        } else {
            None
        };
        if let Some(stats) = norm {
            let start = Instant::now();
            let mut values = vec![0.0; line.values().len()];
            for (px, out) in line
                .values()
                .chunks(line.bands())
                .zip(values.chunks_mut(line.bands()))
            {
                normalize_into(px, stats, out)?;
            }
            let z = SpectralLine::new(
                line.width(),
                line.bands(),
                values,
                SpectralKind::Features,
                line.row_index(),
            )?;
            let prep_ms = start.elapsed().as_secs_f64() * 1e3;
            let mut out = self.push_prepared(&z, &Prenormalized(classifier))?;
            out.elapsed_ms += prep_ms;
            return Ok(out);
        }
        self.push_prepared(line, classifier)
    }

    fn push_prepared(
        &mut self,
        line: &SpectralLine,
        classifier: &dyn ClusterClassifier,
    ) -> Result<LineOutput> {
        if self.state.is_none() {
            let k = self.config.k_init.min(line.width());
            let cfg = OhslicConfig {
                k_init: k,
                ..self.config.clone()
            };
            self.state = Some(init_clusters(&cfg, line.width(), line)?);
        }
        let state = self.state.as_mut().expect("initialized above");
        process_line(state, line, classifier, &mut self.budget, &self.config)
    }
}

/// Forwards already-normalized cluster means to the classifier.
struct Prenormalized<'a>(&'a dyn ClusterClassifier);

impl ClusterClassifier for Prenormalized<'_> {
    fn bands(&self) -> usize {
        self.0.bands()
    }

    fn predict(&self, spectrum: &[f64]) -> Result<ClusterPrediction> {
        self.0.predict_normalized(spectrum)
    }
}
