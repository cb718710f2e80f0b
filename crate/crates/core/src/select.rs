//! Head selection: vision-focused heads by the entropy-focus criterion,
//! background heads in early layers, and the random / low-visual baselines.
//!
//! Selection works per layer. Within a layer, ties are always broken by the
//! lower head index so the result is a pure function of its inputs.

use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::{HeadMetrics, HeadTable};

/// `(layer, head)` coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionConfig {
    /// `k`: heads selected per layer.
    pub heads_per_layer: usize,
    /// Heads must reach this quantile of their layer's `R_img` to be
    /// eligible as vision heads (0.5 keeps the top half).
    pub r_img_quantile: f64,
    /// Fraction of the earliest layers scanned for background heads.
    pub background_layer_fraction: f64,
    pub background_count_per_layer: usize,
}

impl SelectionConfig {
    /// Defaults for a model with `heads` heads per layer: `k = 5` for 16
    /// heads, `k = 10` for 32 heads, `ceil(heads / 3)` otherwise.
    pub fn for_heads(heads: usize) -> Self {
        let k = default_k(heads);
        Self {
            heads_per_layer: k,
            r_img_quantile: 0.5,
            background_layer_fraction: 0.25,
            background_count_per_layer: k,
        }
    }

    pub fn validate(&self, heads: usize) -> Result<()> {
        if self.heads_per_layer > heads {
            return Err(Error::InvalidConfig(format!(
                "k = {} exceeds {heads} heads per layer",
                self.heads_per_layer
            )));
        }
        if !(self.r_img_quantile > 0.0 && self.r_img_quantile < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "r_img quantile must lie in (0, 1), got {}",
                self.r_img_quantile
            )));
        }
        if !(0.0..=1.0).contains(&self.background_layer_fraction) {
            return Err(Error::InvalidConfig(format!(
                "background layer fraction must lie in [0, 1], got {}",
                self.background_layer_fraction
            )));
        }
        Ok(())
    }
}

pub fn default_k(heads: usize) -> usize {
    match heads {
        16 => 5,
        32 => 10,
        h => h.div_ceil(3).max(1),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SelectionRule {
    EfrGuided,
    Random { seed: u64 },
    LowVisual,
}

impl SelectionRule {
    pub fn name(&self) -> &'static str {
        match self {
            SelectionRule::EfrGuided => "efr-guided",
            SelectionRule::Random { .. } => "random",
            SelectionRule::LowVisual => "low-visual",
        }
    }
}

/// Non-fatal conditions met during selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionWarning {
    /// Fewer than `k` heads were eligible in a layer.
    Shortfall { layer: usize, selected: usize, wanted: usize },
    /// No early layer produced a background candidate.
    NoBackgroundHeads,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadSelection {
    pub rule: SelectionRule,
    pub vision_heads: Vec<HeadId>,
    pub background_heads: Vec<HeadId>,
    pub warnings: Vec<SelectionWarning>,
}

impl HeadSelection {
    pub fn vision_in_layer(&self, layer: usize) -> impl Iterator<Item = usize> + '_ {
        self.vision_heads
            .iter()
            .filter(move |h| h.layer == layer)
            .map(|h| h.head)
    }
}

fn ascending(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

/// Lowest value `c` such that at least `ceil((1 - q) * n)` of the values are
/// `>= c`.
fn top_quantile_cutoff(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| ascending(*b, *a));
    let keep = libm::ceil((1.0 - q) * v.len() as f64) as usize;
    Some(v[keep.clamp(1, v.len()) - 1])
}

fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| ascending(*a, *b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// The `R_img` cutoff a vision head must reach in `layer`.
pub fn r_img_cutoff(table: &HeadTable, layer: usize, quantile: f64) -> Option<f64> {
    let r: Vec<f64> = table.layer(layer).iter().filter_map(|m| m.r_img).collect();
    top_quantile_cutoff(&r, quantile)
}

/// Per layer: keep heads whose `R_img` reaches the quantile cutoff, then take
/// the `k` with the lowest entropy-focus ratio. Heads with undefined metrics
/// are never selected.
pub fn select_vision_heads(table: &HeadTable, cfg: &SelectionConfig) -> Result<HeadSelection> {
    cfg.validate(table.heads())?;
    let mut vision_heads = Vec::new();
    let mut warnings = Vec::new();
    for l in 0..table.layers() {
        let Some(cutoff) = r_img_cutoff(table, l, cfg.r_img_quantile) else {
            if cfg.heads_per_layer > 0 {
                warnings.push(SelectionWarning::Shortfall {
                    layer: l,
                    selected: 0,
                    wanted: cfg.heads_per_layer,
                });
            }
            continue;
        };
        let mut eligible: Vec<(usize, f64)> = table
            .layer(l)
            .iter()
            .filter_map(|m| match (m.r_img, m.efr) {
                (Some(r), Some(e)) if r >= cutoff => Some((m.head, e)),
                _ => None,
            })
            .collect();
        eligible.sort_by(|a, b| ascending(a.1, b.1).then(a.0.cmp(&b.0)));
        let take = eligible.len().min(cfg.heads_per_layer);
        if take < cfg.heads_per_layer {
            warnings.push(SelectionWarning::Shortfall {
                layer: l,
                selected: take,
                wanted: cfg.heads_per_layer,
            });
        }
        let mut chosen: Vec<usize> = eligible[..take].iter().map(|e| e.0).collect();
        chosen.sort_unstable();
        vision_heads.extend(chosen.into_iter().map(|h| HeadId::new(l, h)));
    }
    Ok(HeadSelection {
        rule: SelectionRule::EfrGuided,
        vision_heads,
        background_heads: Vec::new(),
        warnings,
    })
}

/// Number of early layers scanned for background heads.
pub fn background_layers(layers: usize, fraction: f64) -> usize {
    (libm::ceil(fraction * layers as f64) as usize).min(layers)
}

/// Background heads: in the earliest layers, heads whose `R_img` is below
/// the layer median and whose `H_img` is above it, ranked by descending
/// entropy-focus ratio. Heads listed in `exclude` are skipped. Heads with
/// undefined metrics count as low-`R_img`, high-entropy candidates.
pub fn select_background_heads(
    table: &HeadTable,
    cfg: &SelectionConfig,
    exclude: &[HeadId],
) -> Result<(Vec<HeadId>, Vec<SelectionWarning>)> {
    cfg.validate(table.heads())?;
    let mut out = Vec::new();
    for l in 0..background_layers(table.layers(), cfg.background_layer_fraction) {
        let metrics = table.layer(l);
        let r: Vec<f64> = metrics.iter().filter_map(|m| m.r_img).collect();
        let h: Vec<f64> = metrics.iter().filter_map(|m| m.h_img).collect();
        let (Some(r_med), Some(h_med)) = (median(&r), median(&h)) else {
            continue;
        };
        let mut candidates: Vec<(usize, f64)> = metrics
            .iter()
            .filter(|m| !exclude.contains(&HeadId::new(l, m.head)))
            .filter(|m| is_background(m, r_med, h_med))
            .map(|m| (m.head, m.efr.unwrap_or(f64::INFINITY)))
            .collect();
        candidates.sort_by(|a, b| ascending(b.1, a.1).then(a.0.cmp(&b.0)));
        let mut chosen: Vec<usize> = candidates
            .iter()
            .take(cfg.background_count_per_layer)
            .map(|c| c.0)
            .collect();
        chosen.sort_unstable();
        out.extend(chosen.into_iter().map(|h| HeadId::new(l, h)));
    }
    let warnings = if out.is_empty() {
        alloc::vec![SelectionWarning::NoBackgroundHeads]
    } else {
        Vec::new()
    };
    Ok((out, warnings))
}

fn is_background(m: &HeadMetrics, r_med: f64, h_med: f64) -> bool {
    let low_r = m.r_img.map_or(true, |r| r < r_med);
    let high_h = m.h_img.map_or(true, |h| h > h_med);
    low_r && high_h
}

/// Vision heads by the entropy-focus criterion plus disjoint background
/// heads.
pub fn efr_guided_selection(table: &HeadTable, cfg: &SelectionConfig) -> Result<HeadSelection> {
    let mut sel = select_vision_heads(table, cfg)?;
    let (bg, warnings) = select_background_heads(table, cfg, &sel.vision_heads)?;
    sel.background_heads = bg;
    sel.warnings.extend(warnings);
    Ok(sel)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineStrategy {
    Random { seed: u64 },
    LowVisual,
}

/// `k` heads per layer chosen uniformly at random (seeded) or with the
/// lowest `R_img`. Baselines carry no background heads.
pub fn baseline_selection(
    strategy: BaselineStrategy,
    table: &HeadTable,
    cfg: &SelectionConfig,
) -> Result<HeadSelection> {
    cfg.validate(table.heads())?;
    let k = cfg.heads_per_layer;
    let mut vision_heads = Vec::with_capacity(k * table.layers());
    let rule = match strategy {
        BaselineStrategy::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for l in 0..table.layers() {
                let mut heads = index::sample(&mut rng, table.heads(), k).into_vec();
                heads.sort_unstable();
                vision_heads.extend(heads.into_iter().map(|h| HeadId::new(l, h)));
            }
            SelectionRule::Random { seed }
        }
        BaselineStrategy::LowVisual => {
            for l in 0..table.layers() {
                let mut ranked: Vec<(usize, f64)> = table
                    .layer(l)
                    .iter()
                    .map(|m| (m.head, m.r_img.unwrap_or(0.0)))
                    .collect();
                ranked.sort_by(|a, b| ascending(a.1, b.1).then(a.0.cmp(&b.0)));
                let mut heads: Vec<usize> = ranked[..k].iter().map(|r| r.0).collect();
                heads.sort_unstable();
                vision_heads.extend(heads.into_iter().map(|h| HeadId::new(l, h)));
            }
            SelectionRule::LowVisual
        }
    };
    Ok(HeadSelection {
        rule,
        vision_heads,
        background_heads: Vec::new(),
        warnings: Vec::new(),
    })
}
