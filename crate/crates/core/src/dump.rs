//! In-memory attention dumps.
//!
//! A dump stores attention rows of the question-end token (or of every
//! generated token, per step) over all `M` sequence positions, for every
//! layer and head. Data is `f32`, row-major `[steps][layers][heads][M]`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::layout::TokenLayout;

/// Row sums must lie within this distance of 1 in strict mode.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DumpKind {
    /// One row per (layer, head): the question-end token.
    QtSlice,
    /// One row per (step, layer, head).
    PerStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RowCheck {
    #[default]
    Strict,
    /// Row-sum violations become warnings instead of errors.
    Lenient,
}

/// Row whose sum deviated from 1 during lenient validation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowSumWarning {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub sum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DumpShape {
    pub kind: DumpKind,
    pub steps: usize,
    pub layers: usize,
    pub heads: usize,
}

impl DumpShape {
    pub fn qt_slice(layers: usize, heads: usize) -> Self {
        Self {
            kind: DumpKind::QtSlice,
            steps: 1,
            layers,
            heads,
        }
    }

    pub fn per_step(steps: usize, layers: usize, heads: usize) -> Self {
        Self {
            kind: DumpKind::PerStep,
            steps,
            layers,
            heads,
        }
    }

    pub fn rows(&self) -> usize {
        self.steps * self.layers * self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    shape: DumpShape,
    layout: TokenLayout,
    data: Vec<f32>,
}

impl AttentionDump {
    /// Validates and wraps a payload. Negative or non-finite entries are
    /// always rejected; row sums are checked according to `check`.
    pub fn new(
        shape: DumpShape,
        layout: TokenLayout,
        data: Vec<f32>,
        check: RowCheck,
    ) -> Result<(Self, Vec<RowSumWarning>)> {
        if shape.layers == 0 || shape.heads == 0 || shape.steps == 0 {
            return Err(Error::Shape(format!(
                "empty dimension in {} steps x {} layers x {} heads",
                shape.steps, shape.layers, shape.heads
            )));
        }
        if shape.kind == DumpKind::QtSlice && shape.steps != 1 {
            return Err(Error::Shape("qt-slice dumps hold exactly one step".into()));
        }
        let m = layout.total_tokens();
        let expected = shape.rows() * m;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "payload holds {} values, shape needs {expected}",
                data.len()
            )));
        }
        let mut warnings = Vec::new();
        for (r, row) in data.chunks_exact(m).enumerate() {
            let (step, layer, head) = unflatten(&shape, r);
            let mut sum = 0.0f64;
            for (token, &v) in row.iter().enumerate() {
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::InvalidEntry {
                        step,
                        layer,
                        head,
                        token,
                        value: v,
                    });
                }
                sum += f64::from(v);
            }
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                match check {
                    RowCheck::Strict => {
                        return Err(Error::RowSum {
                            step,
                            layer,
                            head,
                            sum,
                        })
                    }
                    RowCheck::Lenient => warnings.push(RowSumWarning {
                        step,
                        layer,
                        head,
                        sum,
                    }),
                }
            }
        }
        Ok((Self { shape, layout, data }, warnings))
    }

    pub fn shape(&self) -> DumpShape {
        self.shape
    }

    pub fn kind(&self) -> DumpKind {
        self.shape.kind
    }

    pub fn layers(&self) -> usize {
        self.shape.layers
    }

    pub fn heads(&self) -> usize {
        self.shape.heads
    }

    pub fn steps(&self) -> usize {
        self.shape.steps
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Attention row at an explicit step.
    pub fn row(&self, step: usize, layer: usize, head: usize) -> Result<&[f32]> {
        check_index("step", step, self.shape.steps)?;
        check_index("layer", layer, self.shape.layers)?;
        check_index("head", head, self.shape.heads)?;
        let m = self.layout.total_tokens();
        let r = (step * self.shape.layers + layer) * self.shape.heads + head;
        Ok(&self.data[r * m..(r + 1) * m])
    }

    /// Question-token row for `(layer, head)`; per-step dumps default to the
    /// final step.
    pub fn qt_slice(&self, layer: usize, head: usize) -> Result<&[f32]> {
        self.row(self.shape.steps - 1, layer, head)
    }
}

fn unflatten(shape: &DumpShape, r: usize) -> (usize, usize, usize) {
    let head = r % shape.heads;
    let lh = r / shape.heads;
    (lh / shape.layers, lh % shape.layers, head)
}

fn check_index(what: &'static str, index: usize, len: usize) -> Result<()> {
    if index >= len {
        Err(Error::OutOfRange { what, index, len })
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{Grid, Span};
    use alloc::vec;

    fn layout() -> TokenLayout {
        TokenLayout::new(4, vec![Span::new(0, 2)], 3, vec![]).unwrap()
    }

    #[test]
    fn shape_bookkeeping() {
        let layout = TokenLayout::single_image(
            80,
            8,
            Grid {
                rows: 8,
                cols: 8,
                patch_px: 14,
            },
            79,
        )
        .unwrap();
        let data = vec![1.0 / 80.0; 4 * 8 * 80];
        let (d, w) = AttentionDump::new(DumpShape::qt_slice(4, 8), layout, data, RowCheck::Strict).unwrap();
        assert!(w.is_empty());
        assert_eq!(d.layout().visual_count(), 64);
        assert_eq!(d.qt_slice(0, 0).unwrap().len(), 80);
        assert!(matches!(
            d.qt_slice(4, 0),
            Err(Error::OutOfRange { what: "layer", .. })
        ));
    }

    #[test]
    fn short_payload_rejected() {
        let r = AttentionDump::new(DumpShape::qt_slice(1, 2), layout(), vec![0.25; 7], RowCheck::Strict);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn row_sum_strict_and_lenient() {
        let mut data = vec![0.25f32; 8];
        data[4..].copy_from_slice(&[0.125; 4]);
        let r = AttentionDump::new(DumpShape::qt_slice(1, 2), layout(), data.clone(), RowCheck::Strict);
        assert_eq!(
            r,
            Err(Error::RowSum {
                step: 0,
                layer: 0,
                head: 1,
                sum: 0.5
            })
        );
        let (_, w) = AttentionDump::new(DumpShape::qt_slice(1, 2), layout(), data, RowCheck::Lenient).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!((w[0].layer, w[0].head), (0, 1));
    }

    #[test]
    fn negative_rejected_even_when_lenient() {
        let data = vec![0.5, 0.6, -0.1, 0.0];
        let r = AttentionDump::new(DumpShape::qt_slice(1, 1), layout(), data, RowCheck::Lenient);
        assert!(matches!(r, Err(Error::InvalidEntry { token: 2, .. })));
    }

    #[test]
    fn per_step_defaults_to_last_step() {
        let mut data = vec![0.25f32; 2 * 4];
        data[4..].copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
        let (d, _) = AttentionDump::new(DumpShape::per_step(2, 1, 1), layout(), data, RowCheck::Strict).unwrap();
        assert_eq!(d.qt_slice(0, 0).unwrap(), &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(d.row(0, 0, 0).unwrap(), &[0.25; 4]);
    }
}
