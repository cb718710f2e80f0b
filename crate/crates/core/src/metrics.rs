//! Head-level attention metrics.
//!
//! All metrics are computed in `f64` regardless of the row precision, with
//! compensated summation so the result does not depend on evaluation order
//! beyond rounding of the final value. Undefined values (zero attention mass)
//! are reported as `None`, never as NaN.

use alloc::vec::Vec;

use crate::dump::AttentionDump;
use crate::error::{Error, Result};
use crate::layout::{RegionMask, TokenLayout};

/// Entropy floor used inside the logarithm.
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsConfig {
    pub epsilon: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon > 0.0 && self.epsilon.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(alloc::format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )))
        }
    }
}

/// Neumaier-compensated sum.
pub(crate) fn ksum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

fn visual_mass<T: Copy + Into<f64>>(row: &[T], layout: &TokenLayout) -> f64 {
    ksum(layout.visual_indices().map(|i| row[i].into()))
}

fn check_row<T>(row: &[T], layout: &TokenLayout) -> Result<()> {
    if row.len() != layout.total_tokens() {
        return Err(Error::Shape(alloc::format!(
            "row of length {} for a layout of {} tokens",
            row.len(),
            layout.total_tokens()
        )));
    }
    Ok(())
}

/// Mean attention on the region divided by mean attention on all visual
/// tokens.
pub fn rrar<T: Copy + Into<f64>>(row: &[T], layout: &TokenLayout, region: &RegionMask) -> Result<f64> {
    check_row(row, layout)?;
    if region.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let visual = visual_mass(row, layout);
    if visual <= 0.0 {
        return Err(Error::ZeroMass("visual tokens"));
    }
    let inside = ksum(region.tokens().iter().map(|&i| row[i].into()));
    let n = layout.visual_count() as f64;
    let b = region.len() as f64;
    Ok((inside / b) / (visual / n))
}

/// Mean attention on visual tokens divided by mean attention on all tokens.
pub fn image_attention_ratio<T: Copy + Into<f64>>(row: &[T], layout: &TokenLayout) -> Result<f64> {
    check_row(row, layout)?;
    let total = ksum(row.iter().map(|&v| v.into()));
    if total <= 0.0 {
        return Err(Error::ZeroMass("all tokens"));
    }
    let visual = visual_mass(row, layout);
    let n = layout.visual_count() as f64;
    let m = layout.total_tokens() as f64;
    Ok((visual / n) / (total / m))
}

/// Entropy (nats) of the attention renormalized within the visual tokens.
pub fn image_attention_entropy<T: Copy + Into<f64>>(
    row: &[T],
    layout: &TokenLayout,
    cfg: &MetricsConfig,
) -> Result<f64> {
    check_row(row, layout)?;
    let visual = visual_mass(row, layout);
    if visual <= 0.0 {
        return Err(Error::ZeroMass("visual tokens"));
    }
    let eps = cfg.epsilon;
    Ok(-ksum(layout.visual_indices().map(|i| {
        let p = row[i].into() / visual;
        p * libm::log(p + eps)
    })))
}

/// Per-head metric record. `None` marks an undefined value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadMetrics {
    pub layer: usize,
    pub head: usize,
    pub rrar: Option<f64>,
    pub r_img: Option<f64>,
    pub h_img: Option<f64>,
    pub efr: Option<f64>,
}

impl HeadMetrics {
    /// Computes every metric of one row. `region` is optional; without it
    /// `rrar` stays undefined.
    pub fn from_row<T: Copy + Into<f64>>(
        layer: usize,
        head: usize,
        row: &[T],
        layout: &TokenLayout,
        region: Option<&RegionMask>,
        cfg: &MetricsConfig,
    ) -> Result<Self> {
        check_row(row, layout)?;
        let r_img = image_attention_ratio(row, layout).ok();
        let h_img = image_attention_entropy(row, layout, cfg).ok();
        let rrar = match region {
            Some(reg) if !reg.is_empty() => rrar(row, layout, reg).ok(),
            _ => None,
        };
        let mut m = Self {
            layer,
            head,
            rrar,
            r_img,
            h_img,
            efr: None,
        };
        m.efr = efr(&m);
        Ok(m)
    }
}

/// Entropy-focus ratio `H_img / R_img`; undefined when `R_img` is zero or
/// either input is undefined.
pub fn efr(m: &HeadMetrics) -> Option<f64> {
    match (m.h_img, m.r_img) {
        (Some(h), Some(r)) if r > 0.0 => Some(h / r),
        _ => None,
    }
}

/// Metrics of every head of a dump, layer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTable {
    layers: usize,
    heads: usize,
    entries: Vec<HeadMetrics>,
}

impl HeadTable {
    pub fn new(layers: usize, heads: usize, entries: Vec<HeadMetrics>) -> Result<Self> {
        if entries.len() != layers * heads {
            return Err(Error::Shape(alloc::format!(
                "{} metric records for {layers} x {heads} heads",
                entries.len()
            )));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.layer != i / heads || e.head != i % heads {
                return Err(Error::Shape(alloc::format!(
                    "record {i} is for ({}, {})",
                    e.layer,
                    e.head
                )));
            }
        }
        Ok(Self {
            layers,
            heads,
            entries,
        })
    }

    /// Metrics of the question-token rows of a dump.
    pub fn from_dump(dump: &AttentionDump, region: Option<&RegionMask>, cfg: &MetricsConfig) -> Result<Self> {
        cfg.validate()?;
        let mut entries = Vec::with_capacity(dump.layers() * dump.heads());
        for l in 0..dump.layers() {
            for h in 0..dump.heads() {
                let row = dump.qt_slice(l, h)?;
                entries.push(HeadMetrics::from_row(l, h, row, dump.layout(), region, cfg)?);
            }
        }
        Self::new(dump.layers(), dump.heads(), entries)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn entries(&self) -> &[HeadMetrics] {
        &self.entries
    }

    pub fn get(&self, layer: usize, head: usize) -> &HeadMetrics {
        &self.entries[layer * self.heads + head]
    }

    pub fn layer(&self, layer: usize) -> &[HeadMetrics] {
        &self.entries[layer * self.heads..(layer + 1) * self.heads]
    }
}

/// Layer-averaged relevant-region ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerRrar {
    pub layer: usize,
    pub mean: f64,
    /// Heads whose ratio was undefined and therefore skipped.
    pub skipped: usize,
}

/// Mean relevant-region ratio over the heads of each layer.
pub fn layer_rrar(dump: &AttentionDump, region: &RegionMask) -> Result<Vec<LayerRrar>> {
    if region.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let mut out = Vec::with_capacity(dump.layers());
    for l in 0..dump.layers() {
        let mut vals = Vec::with_capacity(dump.heads());
        for h in 0..dump.heads() {
            if let Ok(v) = rrar(dump.qt_slice(l, h)?, dump.layout(), region) {
                vals.push(v);
            }
        }
        if vals.is_empty() {
            return Err(Error::UndefinedLayer(l));
        }
        out.push(LayerRrar {
            layer: l,
            mean: ksum(vals.iter().copied()) / vals.len() as f64,
            skipped: dump.heads() - vals.len(),
        });
    }
    Ok(out)
}

/// Least-squares fit of `R_img = slope * H_img + intercept` with Pearson r.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionFit {
    pub slope: f64,
    pub intercept: f64,
    pub pearson: f64,
    pub n: usize,
}

/// Fits `R` on `H` from `(h_img, r_img)` pairs.
pub fn fit_r_h_regression(pairs: &[(f64, f64)]) -> Result<RegressionFit> {
    if pairs.len() < 3 {
        return Err(Error::InsufficientData(alloc::format!(
            "{} pairs, need at least 3",
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let mean_h = ksum(pairs.iter().map(|p| p.0)) / n;
    let mean_r = ksum(pairs.iter().map(|p| p.1)) / n;
    let sxx = ksum(pairs.iter().map(|p| (p.0 - mean_h) * (p.0 - mean_h)));
    let syy = ksum(pairs.iter().map(|p| (p.1 - mean_r) * (p.1 - mean_r)));
    let sxy = ksum(pairs.iter().map(|p| (p.0 - mean_h) * (p.1 - mean_r)));
    let scale_h = pairs.iter().fold(0.0f64, |a, p| a.max(p.0.abs())).max(1.0);
    let scale_r = pairs.iter().fold(0.0f64, |a, p| a.max(p.1.abs())).max(1.0);
    if sxx <= 1e-24 * scale_h * scale_h * n || syy <= 1e-24 * scale_r * scale_r * n {
        return Err(Error::DegenerateFit);
    }
    let slope = sxy / sxx;
    let intercept = mean_r - slope * mean_h;
    let pearson = (sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0);
    Ok(RegressionFit {
        slope,
        intercept,
        pearson,
        n: pairs.len(),
    })
}

/// `(h_img, r_img)` pairs of every head with both values defined.
pub fn r_h_pairs(table: &HeadTable) -> Vec<(f64, f64)> {
    table
        .entries()
        .iter()
        .filter_map(|m| Some((m.h_img?, m.r_img?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n - 1); zero for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = ksum(values.iter().copied()) / n;
        let std = if values.len() > 1 {
            libm::sqrt(ksum(values.iter().map(|v| (v - mean) * (v - mean))) / (n - 1.0))
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

/// Regression statistics aggregated across samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionStats {
    pub slope: MeanStd,
    pub intercept: MeanStd,
    pub pearson: MeanStd,
    pub samples: usize,
    /// Samples whose fit was degenerate.
    pub skipped: usize,
}

/// Fits each sample separately and reports mean and spread of the fits.
pub fn aggregate_regressions(samples: &[Vec<(f64, f64)>]) -> Result<RegressionStats> {
    let fits: Vec<RegressionFit> = samples
        .iter()
        .filter_map(|s| fit_r_h_regression(s).ok())
        .collect();
    if fits.is_empty() {
        return Err(Error::DegenerateFit);
    }
    let col = |f: fn(&RegressionFit) -> f64| -> MeanStd {
        let v: Vec<f64> = fits.iter().map(f).collect();
        MeanStd::of(&v).expect("non-empty")
    };
    Ok(RegressionStats {
        slope: col(|f| f.slope),
        intercept: col(|f| f.intercept),
        pearson: col(|f| f.pearson),
        samples: fits.len(),
        skipped: samples.len() - fits.len(),
    })
}

/// Inputs of the comprehensive score `S = A (1 - alpha I)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreInput {
    pub correct: bool,
    pub irrelevance: f64,
    pub alpha: f64,
}

/// Penalty coefficient used when none is given.
pub const DEFAULT_ALPHA: f64 = 1.0;

impl ScoreInput {
    pub fn new(correct: bool, irrelevance: f64, alpha: f64) -> Result<Self> {
        for (name, v) in [("irrelevance", irrelevance), ("alpha", alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(alloc::format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        Ok(Self {
            correct,
            irrelevance,
            alpha,
        })
    }
}

pub fn comprehensive_score(input: &ScoreInput) -> f64 {
    let a = if input.correct { 1.0 } else { 0.0 };
    a * (1.0 - input.alpha * input.irrelevance)
}

/// Prompting mode a dump was recorded under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PromptMode {
    Reason,
    Direct,
    RegionGuided,
}

impl PromptMode {
    pub const ALL: [PromptMode; 3] = [PromptMode::Reason, PromptMode::Direct, PromptMode::RegionGuided];

    pub fn as_str(&self) -> &'static str {
        match self {
            PromptMode::Reason => "reason",
            PromptMode::Direct => "direct",
            PromptMode::RegionGuided => "region-guided",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeSummary {
    pub mode: PromptMode,
    pub layers: Vec<f64>,
    /// Mean over layers of the layer-averaged ratio.
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeReport {
    /// Summaries in reason < direct < region-guided order.
    pub modes: Vec<ModeSummary>,
    /// Whether the overall ratios strictly increase along that order.
    pub ordering_holds: bool,
}

/// Compares layer-averaged region ratios across prompting modes.
pub fn compare_modes(dumps: &[(PromptMode, &AttentionDump)], region: &RegionMask) -> Result<ModeReport> {
    if dumps.len() < 2 {
        return Err(Error::InsufficientData("need at least two prompting modes".into()));
    }
    let layout = dumps[0].1.layout();
    if dumps.iter().any(|(_, d)| d.layout() != layout) {
        return Err(Error::LayoutMismatch);
    }
    let mut sorted: Vec<(PromptMode, &AttentionDump)> = dumps.to_vec();
    sorted.sort_by_key(|(m, _)| *m);
    if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::InvalidConfig("duplicate prompting mode".into()));
    }
    let mut modes = Vec::with_capacity(sorted.len());
    for (mode, dump) in sorted {
        let layers: Vec<f64> = layer_rrar(dump, region)?.iter().map(|l| l.mean).collect();
        let overall = ksum(layers.iter().copied()) / layers.len() as f64;
        modes.push(ModeSummary { mode, layers, overall });
    }
    let ordering_holds = modes.windows(2).all(|w| w[0].overall < w[1].overall);
    Ok(ModeReport { modes, ordering_holds })
}
