//! Attention interventions on post-softmax rows.
//!
//! Reweighting multiplies the attention on a token set by `1 + gamma`;
//! masking zeroes the attention on visual spans. Both optionally renormalize
//! the row back to unit mass.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::layout::{Span, TokenLayout};
use crate::metrics::ksum;
use crate::select::HeadId;

pub const DEFAULT_GAMMA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ReweightPlan {
    pub heads: Vec<HeadId>,
    /// Question-relevant visual tokens, sorted and unique.
    pub tokens: Vec<usize>,
    pub gamma: f64,
    pub renormalize: bool,
}

impl ReweightPlan {
    pub fn new(heads: Vec<HeadId>, mut tokens: Vec<usize>, gamma: f64) -> Self {
        tokens.sort_unstable();
        tokens.dedup();
        Self {
            heads,
            tokens,
            gamma,
            renormalize: true,
        }
    }

    /// Checks `gamma >= 0` and that every token is visual in `layout`.
    pub fn validate(&self, layout: &TokenLayout) -> Result<()> {
        check_gamma(self.gamma)?;
        if let Some(&t) = self.tokens.iter().find(|&&t| !layout.is_visual(t)) {
            return Err(Error::NotVisual(t));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.gamma == 0.0 || self.tokens.is_empty() || self.heads.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub heads: Vec<HeadId>,
    pub spans: Vec<Span>,
    pub renormalize: bool,
}

impl MaskPlan {
    pub fn new(heads: Vec<HeadId>, spans: Vec<Span>) -> Self {
        Self {
            heads,
            spans,
            renormalize: true,
        }
    }

    /// Masks every visual span of `layout`.
    pub fn all_visual(heads: Vec<HeadId>, layout: &TokenLayout) -> Self {
        Self::new(heads, layout.visual_spans().to_vec())
    }

    pub fn validate(&self, layout: &TokenLayout) -> Result<()> {
        for s in &self.spans {
            if s.is_empty() {
                continue;
            }
            if !(s.start..s.end).all(|t| layout.is_visual(t)) {
                return Err(Error::NotVisual(
                    (s.start..s.end).find(|&t| !layout.is_visual(t)).unwrap_or(s.start),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Plan {
    Reweight(ReweightPlan),
    Mask(MaskPlan),
}

impl Plan {
    pub fn heads(&self) -> &[HeadId] {
        match self {
            Plan::Reweight(p) => &p.heads,
            Plan::Mask(p) => &p.heads,
        }
    }

    pub fn validate(&self, layout: &TokenLayout) -> Result<()> {
        match self {
            Plan::Reweight(p) => p.validate(layout),
            Plan::Mask(p) => p.validate(layout),
        }
    }

    pub fn targets(&self, layer: usize, head: usize) -> bool {
        self.heads().contains(&HeadId::new(layer, head))
    }

    /// Applies the plan to one row in place.
    pub fn apply(&self, row: &mut [f64]) -> Result<()> {
        match self {
            Plan::Reweight(p) => reweight_in_place(row, &p.tokens, p.gamma, p.renormalize),
            Plan::Mask(p) => mask_in_place(row, &p.spans, p.renormalize),
        }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma >= 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(alloc::format!(
            "gamma must be non-negative, got {gamma}"
        )))
    }
}

fn check_tokens(row: &[f64], tokens: &[usize]) -> Result<()> {
    match tokens.iter().find(|&&t| t >= row.len()) {
        Some(&t) => Err(Error::OutOfRange {
            what: "token",
            index: t,
            len: row.len(),
        }),
        None => Ok(()),
    }
}

/// Divides the row by its sum.
pub fn normalize_in_place(row: &mut [f64]) -> Result<()> {
    let total = ksum(row.iter().copied());
    if total <= 0.0 {
        return Err(Error::ZeroMass("row"));
    }
    row.iter_mut().for_each(|v| *v /= total);
    Ok(())
}

/// Reweights `row` in place. `tokens` must be sorted and unique.
pub fn reweight_in_place(row: &mut [f64], tokens: &[usize], gamma: f64, renormalize: bool) -> Result<()> {
    check_gamma(gamma)?;
    check_tokens(row, tokens)?;
    let boost = 1.0 + gamma;
    if !renormalize {
        for &t in tokens {
            row[t] *= boost;
        }
        return Ok(());
    }
    if gamma == 0.0 {
        return normalize_in_place(row);
    }
    let inside = ksum(tokens.iter().map(|&t| row[t]));
    let mut k = 0usize;
    let outside = ksum(row.iter().enumerate().filter_map(|(i, &v)| {
        if k < tokens.len() && tokens[k] == i {
            k += 1;
            None
        } else {
            Some(v)
        }
    }));
    // inside entries: boost * a / (boost * inside + outside)
    let den_in = inside + outside / boost;
    let den_out = boost * inside + outside;
    if den_out <= 0.0 {
        return Err(Error::ZeroMass("row"));
    }
    let mut k = 0usize;
    for (i, v) in row.iter_mut().enumerate() {
        if k < tokens.len() && tokens[k] == i {
            k += 1;
            *v /= den_in;
        } else {
            *v /= den_out;
        }
    }
    Ok(())
}

/// Returns the reweighted copy of `row`.
pub fn reweight_row(row: &[f64], plan: &ReweightPlan) -> Result<Vec<f64>> {
    let mut out = row.to_vec();
    reweight_in_place(&mut out, &plan.tokens, plan.gamma, plan.renormalize)?;
    Ok(out)
}

/// Zeroes the spans in place and optionally renormalizes the remainder.
pub fn mask_in_place(row: &mut [f64], spans: &[Span], renormalize: bool) -> Result<()> {
    for s in spans {
        if s.end > row.len() {
            return Err(Error::OutOfRange {
                what: "span end",
                index: s.end,
                len: row.len(),
            });
        }
    }
    let touched = spans.iter().any(|s| !s.is_empty());
    for s in spans {
        row[s.start..s.end].iter_mut().for_each(|v| *v = 0.0);
    }
    if renormalize && touched {
        normalize_in_place(row).map_err(|_| Error::ZeroMass("row after masking"))?;
    }
    Ok(())
}

pub fn mask_row(row: &[f64], plan: &MaskPlan) -> Result<Vec<f64>> {
    let mut out = row.to_vec();
    mask_in_place(&mut out, &plan.spans, plan.renormalize)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn plan(tokens: &[usize], gamma: f64) -> ReweightPlan {
        ReweightPlan::new(vec![HeadId::new(0, 0)], tokens.to_vec(), gamma)
    }

    #[test]
    fn gamma_zero_is_identity() {
        let row = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(reweight_row(&row, &plan(&[0, 1], 0.0)).unwrap(), row.to_vec());
    }

    #[test]
    fn uniform_example() {
        let out = reweight_row(&[0.25; 4], &plan(&[0, 1], 1.0)).unwrap();
        let want = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0];
        for (a, b) in out.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn all_tokens_boosted_is_identity() {
        let row = [0.1, 0.2, 0.3, 0.4];
        let mut norm = row.to_vec();
        normalize_in_place(&mut norm).unwrap();
        assert_eq!(reweight_row(&row, &plan(&[0, 1, 2, 3], 0.7)).unwrap(), norm);
    }

    #[test]
    fn no_renormalize_scales_only() {
        let mut p = plan(&[1], 1.0);
        p.renormalize = false;
        assert_eq!(reweight_row(&[0.5, 0.5], &p).unwrap(), vec![0.5, 1.0]);
    }

    #[test]
    fn reweight_errors() {
        assert!(matches!(reweight_row(&[0.5, 0.5], &plan(&[0], -1.0)), Err(Error::InvalidConfig(_))));
        assert!(matches!(reweight_row(&[0.5, 0.5], &plan(&[2], 1.0)), Err(Error::OutOfRange { .. })));
        let layout = TokenLayout::new(4, vec![Span::new(0, 2)], 3, vec![]).unwrap();
        assert_eq!(plan(&[2], 1.0).validate(&layout), Err(Error::NotVisual(2)));
        assert!(plan(&[1], 1.0).validate(&layout).is_ok());
    }

    #[test]
    fn mask_examples() {
        let p = MaskPlan::new(vec![], vec![Span::new(0, 2)]);
        assert_eq!(mask_row(&[0.2, 0.3, 0.5], &p).unwrap(), vec![0.0, 0.0, 1.0]);
        let mut q = p.clone();
        q.renormalize = false;
        assert_eq!(mask_row(&[0.2, 0.3, 0.5], &q).unwrap(), vec![0.0, 0.0, 0.5]);
        let e = MaskPlan::new(vec![], vec![Span::new(1, 1)]);
        assert_eq!(mask_row(&[0.2, 0.3, 0.5], &e).unwrap(), vec![0.2, 0.3, 0.5]);
        assert_eq!(
            mask_row(&[0.6, 0.4, 0.0], &p),
            Err(Error::ZeroMass("row after masking"))
        );
    }

    #[test]
    fn mask_plan_must_stay_visual() {
        let layout = TokenLayout::new(6, vec![Span::new(1, 4)], 5, vec![]).unwrap();
        assert!(MaskPlan::new(vec![], vec![Span::new(1, 4)]).validate(&layout).is_ok());
        assert_eq!(MaskPlan::new(vec![], vec![Span::new(0, 3)]).validate(&layout), Err(Error::NotVisual(0)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn row_and_set() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
            (2usize..64).prop_flat_map(|n| {
                (
                    proptest::collection::vec(0.001f64..1.0, n),
                    proptest::collection::btree_set(0..n, 1..n),
                )
            }).prop_map(|(mut r, s)| {
                let t: f64 = r.iter().sum();
                r.iter_mut().for_each(|v| *v /= t);
                (r, s.into_iter().collect())
            })
        }

        proptest! {
            #[test]
            fn sums_ratios_and_order((row, set) in row_and_set(), gamma in 0.0f64..5.0) {
                let out = reweight_row(&row, &plan(&set, gamma)).unwrap();
                prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                let inside: Vec<usize> = set.clone();
                let outside: Vec<usize> = (0..row.len()).filter(|i| !set.contains(i)).collect();
                for &i in &inside {
                    for &j in &outside {
                        let want = (1.0 + gamma) * row[i] / row[j];
                        let got = out[i] / out[j];
                        prop_assert!((got - want).abs() <= 1e-9 * want);
                    }
                }
                let argmax = |idx: &[usize], r: &[f64]| idx.iter().copied().fold(None, |b: Option<usize>, i| match b {
                    Some(b) if r[b] >= r[i] => Some(b),
                    _ => Some(i),
                });
                prop_assert_eq!(argmax(&inside, &row), argmax(&inside, &out));
                prop_assert_eq!(argmax(&outside, &row), argmax(&outside, &out));
            }

            #[test]
            fn mask_touches_only_span((row, _) in row_and_set(), a in 0usize..64, b in 0usize..64) {
                let (s, e) = (a.min(b).min(row.len()), a.max(b).min(row.len()));
                let p = MaskPlan { heads: vec![], spans: vec![Span::new(s, e)], renormalize: false };
                let out = mask_row(&row, &p).unwrap();
                for i in 0..row.len() {
                    if i >= s && i < e {
                        prop_assert_eq!(out[i], 0.0);
                    } else {
                        prop_assert_eq!(out[i], row[i]);
                    }
                }
            }
        }
    }
}
