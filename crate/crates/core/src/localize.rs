//! Sink-suppressed refined attention maps and question-relevant token
//! selection.

use alloc::vec;
use alloc::vec::Vec;

use crate::dump::AttentionDump;
use crate::error::{Error, Result};
use crate::layout::{Grid, Span};
use crate::metrics::ksum;
use crate::select::{HeadId, HeadSelection};

/// How per-head maps are combined before subtraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Each head's visual attention is renormalized to sum to 1 first.
    #[default]
    Normalized,
    /// Raw attention values are averaged.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    /// Background subtraction strength.
    pub lambda: f64,
    /// Selection threshold on the refined map.
    pub tau: f64,
    pub aggregation: Aggregation,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            tau: 0.5,
            aggregation: Aggregation::Normalized,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(alloc::format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidConfig(alloc::format!(
                "tau must lie in [0, 1], got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Refined map over the visual tokens, in ascending token order.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedMap {
    pub values: Vec<f64>,
    /// Absolute token index of each value.
    pub tokens: Vec<usize>,
    pub spans: Vec<Span>,
    pub grids: Vec<Grid>,
    /// Set when nothing survived the subtraction and the map is all zero.
    pub all_zero: bool,
    pub vision_heads: Vec<HeadId>,
    pub background_heads: Vec<HeadId>,
    pub lambda: f64,
}

impl RefinedMap {
    pub fn argmax(&self) -> Option<usize> {
        if self.all_zero {
            return None;
        }
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        Some(self.tokens[best])
    }

    /// Values of one image as rows of its grid.
    pub fn grid_rows(&self, image: usize) -> Result<Vec<&[f64]>> {
        let grid = self.grids.get(image).ok_or(Error::NoGrid)?;
        let offset: usize = self.spans[..image].iter().map(Span::len).sum();
        let values = &self.values[offset..offset + grid.cells()];
        Ok(values.chunks(grid.cols).collect())
    }
}

fn mean_map(dump: &AttentionDump, heads: &[HeadId], agg: Aggregation, visual: &[usize]) -> Result<Option<Vec<f64>>> {
    let mut acc = vec![0.0f64; visual.len()];
    let mut used = 0usize;
    for id in heads {
        let row = dump.qt_slice(id.layer, id.head)?;
        let scale = match agg {
            Aggregation::Normalized => {
                let mass = ksum(visual.iter().map(|&i| f64::from(row[i])));
                if mass <= 0.0 {
                    continue;
                }
                1.0 / mass
            }
            Aggregation::Raw => 1.0,
        };
        for (a, &i) in acc.iter_mut().zip(visual) {
            *a += f64::from(row[i]) * scale;
        }
        used += 1;
    }
    if used == 0 {
        return Ok(None);
    }
    let n = used as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(Some(acc))
}

/// Vision-head mean map minus `lambda` times the background-head mean map,
/// clamped at zero and scaled so its maximum is 1.
pub fn refine_map(dump: &AttentionDump, sel: &HeadSelection, cfg: &RefineConfig) -> Result<RefinedMap> {
    cfg.validate()?;
    if sel.vision_heads.is_empty() {
        return Err(Error::EmptyVisionHeads);
    }
    let layout = dump.layout();
    let visual: Vec<usize> = layout.visual_indices().collect();
    let focus = mean_map(dump, &sel.vision_heads, cfg.aggregation, &visual)?;
    let background = mean_map(dump, &sel.background_heads, cfg.aggregation, &visual)?;

    let mut values = focus.unwrap_or_else(|| vec![0.0; visual.len()]);
    if let Some(bg) = background {
        for (v, b) in values.iter_mut().zip(bg) {
            *v -= cfg.lambda * b;
        }
    }
    let mut max = 0.0f64;
    for v in values.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
        max = max.max(*v);
    }
    let all_zero = max <= 0.0;
    if !all_zero {
        values.iter_mut().for_each(|v| *v /= max);
    }
    Ok(RefinedMap {
        values,
        tokens: visual,
        spans: layout.visual_spans().to_vec(),
        grids: layout.grids().to_vec(),
        all_zero,
        vision_heads: sel.vision_heads.clone(),
        background_heads: sel.background_heads.clone(),
        lambda: cfg.lambda,
    })
}

/// Tokens whose refined value is strictly above `tau`.
pub fn select_tokens(map: &RefinedMap, tau: f64) -> Vec<usize> {
    map.values
        .iter()
        .zip(&map.tokens)
        .filter(|(v, _)| **v > tau)
        .map(|(_, t)| *t)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dump::{DumpShape, RowCheck};
    use crate::layout::TokenLayout;
    use crate::select::SelectionRule;

    fn layout() -> TokenLayout {
        TokenLayout::new(6, vec![Span::new(0, 4)], 5, vec![]).unwrap()
    }

    fn dump(rows: &[[f32; 6]]) -> AttentionDump {
        let data: Vec<f32> = rows.iter().flatten().copied().collect();
        AttentionDump::new(DumpShape::qt_slice(1, rows.len()), layout(), data, RowCheck::Strict)
            .unwrap()
            .0
    }

    fn sel(v: &[usize], b: &[usize]) -> HeadSelection {
        HeadSelection {
            rule: SelectionRule::EfrGuided,
            vision_heads: v.iter().map(|&h| HeadId::new(0, h)).collect(),
            background_heads: b.iter().map(|&h| HeadId::new(0, h)).collect(),
            warnings: vec![],
        }
    }

    #[test]
    fn lambda_zero_is_normalized_focus_mean() {
        let d = dump(&[
            [0.1, 0.2, 0.1, 0.1, 0.25, 0.25],
            [0.4, 0.1, 0.2, 0.1, 0.1, 0.1],
            [0.05, 0.05, 0.05, 0.05, 0.4, 0.4],
        ]);
        let cfg = RefineConfig {
            lambda: 0.0,
            ..RefineConfig::default()
        };
        let m = refine_map(&d, &sel(&[0, 1], &[2]), &cfg).unwrap();
        let a = [0.2, 0.4, 0.2, 0.2];
        let b = [0.5, 0.125, 0.25, 0.125];
        let mean: Vec<f64> = (0..4).map(|i| (a[i] + b[i]) / 2.0).collect();
        let max = mean.iter().cloned().fold(0.0, f64::max);
        for (v, e) in m.values.iter().zip(&mean) {
            assert!((v - e / max).abs() < 1e-6);
        }
        assert_eq!(m.tokens, vec![0, 1, 2, 3]);
        assert!(!m.all_zero);
    }

    #[test]
    fn shared_sink_cancels() {
        let d = dump(&[[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0, 0.0, 0.0]]);
        let m = refine_map(&d, &sel(&[0], &[1]), &RefineConfig::default()).unwrap();
        assert!(m.all_zero);
        assert!(m.values.iter().all(|v| *v == 0.0));
        assert_eq!(m.argmax(), None);
        assert!(select_tokens(&m, 0.0).is_empty());
    }

    #[test]
    fn empty_background_means_no_subtraction() {
        let d = dump(&[[0.1, 0.2, 0.3, 0.2, 0.1, 0.1]]);
        let a = refine_map(&d, &sel(&[0], &[]), &RefineConfig { lambda: 5.0, ..Default::default() }).unwrap();
        let b = refine_map(&d, &sel(&[0], &[]), &RefineConfig { lambda: 0.0, ..Default::default() }).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.argmax(), Some(2));
    }

    #[test]
    fn empty_vision_heads_rejected() {
        let d = dump(&[[0.1, 0.2, 0.3, 0.2, 0.1, 0.1]]);
        assert_eq!(refine_map(&d, &sel(&[], &[0]), &RefineConfig::default()), Err(Error::EmptyVisionHeads));
    }

    #[test]
    fn raw_mode_weights_heavy_heads() {
        let d = dump(&[
            [0.8, 0.0, 0.0, 0.0, 0.1, 0.1],
            [0.0, 0.01, 0.0, 0.0, 0.49, 0.5],
        ]);
        let raw = refine_map(&d, &sel(&[0, 1], &[]), &RefineConfig { aggregation: Aggregation::Raw, ..Default::default() }).unwrap();
        let norm = refine_map(&d, &sel(&[0, 1], &[]), &RefineConfig::default()).unwrap();
        assert!(raw.values[1] < 0.05);
        assert!((norm.values[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn threshold_is_strict() {
        let m = RefinedMap {
            values: vec![1.0, 0.6, 0.4, 0.0],
            tokens: vec![0, 1, 2, 3],
            spans: vec![Span::new(0, 4)],
            grids: vec![],
            all_zero: false,
            vision_heads: vec![],
            background_heads: vec![],
            lambda: 1.0,
        };
        assert_eq!(select_tokens(&m, 0.5), vec![0, 1]);
        assert!(select_tokens(&m, 1.0).is_empty());
        let hi = select_tokens(&m, 0.7);
        let lo = select_tokens(&m, 0.3);
        assert!(hi.iter().all(|t| lo.contains(t)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rescaling_rows_does_not_change_map(
                rows in proptest::collection::vec(proptest::collection::vec(0.01f32..1.0, 6), 3),
                scale in 0.1f32..0.9,
            ) {
                let to_dump = |s: f32| {
                    let mut data = Vec::new();
                    for r in &rows {
                        let total: f32 = r.iter().sum();
                        // visual part scaled, remainder moved to text tokens
                        let vis: Vec<f32> = r[..4].iter().map(|v| v / total * s).collect();
                        let rest = (1.0 - vis.iter().sum::<f32>()) / 2.0;
                        data.extend(vis);
                        data.extend([rest, rest]);
                    }
                    AttentionDump::new(DumpShape::qt_slice(1, 3), layout(), data, RowCheck::Strict).unwrap().0
                };
                let s = sel(&[0, 1], &[2]);
                let a = refine_map(&to_dump(scale), &s, &RefineConfig::default()).unwrap();
                let b = refine_map(&to_dump(1.0), &s, &RefineConfig::default()).unwrap();
                for (x, y) in a.values.iter().zip(&b.values) {
                    prop_assert!((x - y).abs() < 1e-5);
                }
                for v in &a.values {
                    prop_assert!((0.0..=1.0).contains(v));
                }
            }
        }
    }
}
