//! Token layouts, image grids and region masks.
//!
//! A layout places one or more visual spans inside a sequence of `M` tokens.
//! The union of the spans is the visual token set; its size is `N`. Every
//! index handled here is an absolute sequence position.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub const fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub const fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub const fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub const fn contains(&self, index: usize) -> bool {
        index >= self.start && index < self.end
    }
}

/// Raster of visual tokens for one image, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    /// Side of one square patch in pixels.
    pub patch_px: u32,
}

impl Grid {
    pub const fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn width_px(&self) -> u64 {
        self.cols as u64 * u64::from(self.patch_px)
    }

    pub fn height_px(&self) -> u64 {
        self.rows as u64 * u64::from(self.patch_px)
    }
}

/// Positions of the visual spans, the question-end token and optional grids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenLayout {
    total_tokens: usize,
    visual_spans: Vec<Span>,
    question_end_index: usize,
    grids: Vec<Grid>,
}

impl TokenLayout {
    /// Builds and validates a layout. `grids` is either empty or holds one
    /// grid per visual span.
    pub fn new(
        total_tokens: usize,
        visual_spans: Vec<Span>,
        question_end_index: usize,
        grids: Vec<Grid>,
    ) -> Result<Self> {
        if visual_spans.is_empty() {
            return Err(Error::InvalidLayout("no visual span".into()));
        }
        let mut prev_end = 0usize;
        for (i, span) in visual_spans.iter().enumerate() {
            if span.is_empty() {
                return Err(Error::InvalidLayout(format!("visual span {i} is empty")));
            }
            if span.end > total_tokens {
                return Err(Error::InvalidLayout(format!(
                    "visual span {i} [{}, {}) exceeds {total_tokens} tokens",
                    span.start, span.end
                )));
            }
            if i > 0 && span.start < prev_end {
                return Err(Error::InvalidLayout(format!(
                    "visual span {i} overlaps or precedes the previous span"
                )));
            }
            prev_end = span.end;
        }
        if question_end_index >= total_tokens {
            return Err(Error::InvalidLayout(format!(
                "question end {question_end_index} outside {total_tokens} tokens"
            )));
        }
        if visual_spans.iter().any(|s| s.contains(question_end_index)) {
            return Err(Error::InvalidLayout(format!(
                "question end {question_end_index} lies inside a visual span"
            )));
        }
        if !grids.is_empty() {
            if grids.len() != visual_spans.len() {
                return Err(Error::InvalidLayout(format!(
                    "{} grids for {} visual spans",
                    grids.len(),
                    visual_spans.len()
                )));
            }
            for (i, (g, s)) in grids.iter().zip(&visual_spans).enumerate() {
                if g.cells() != s.len() || g.patch_px == 0 {
                    return Err(Error::InvalidLayout(format!(
                        "grid {i} is {}x{} ({} px) but span holds {} tokens",
                        g.rows,
                        g.cols,
                        g.patch_px,
                        s.len()
                    )));
                }
            }
        }
        Ok(Self {
            total_tokens,
            visual_spans,
            question_end_index,
            grids,
        })
    }

    /// Single image occupying `[start, start + rows*cols)`.
    pub fn single_image(
        total_tokens: usize,
        start: usize,
        grid: Grid,
        question_end_index: usize,
    ) -> Result<Self> {
        Self::new(
            total_tokens,
            alloc::vec![Span::new(start, start + grid.cells())],
            question_end_index,
            alloc::vec![grid],
        )
    }

    /// `M`.
    pub fn total_tokens(&self) -> usize {
        self.total_tokens
    }

    /// `N`, the number of visual tokens.
    pub fn visual_count(&self) -> usize {
        self.visual_spans.iter().map(Span::len).sum()
    }

    pub fn visual_spans(&self) -> &[Span] {
        &self.visual_spans
    }

    pub fn question_end_index(&self) -> usize {
        self.question_end_index
    }

    pub fn grids(&self) -> &[Grid] {
        &self.grids
    }

    pub fn has_grid(&self) -> bool {
        !self.grids.is_empty()
    }

    pub fn is_visual(&self, index: usize) -> bool {
        self.visual_spans.iter().any(|s| s.contains(index))
    }

    /// Absolute indices of all visual tokens in ascending order.
    pub fn visual_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.visual_spans.iter().flat_map(|s| s.start..s.end)
    }

    /// Offset of `index` within the concatenated visual tokens.
    pub fn visual_position(&self, index: usize) -> Option<usize> {
        let mut offset = 0;
        for s in &self.visual_spans {
            if s.contains(index) {
                return Some(offset + index - s.start);
            }
            offset += s.len();
        }
        None
    }
}

/// Where a region mask came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskSource {
    BBox,
    Explicit,
}

/// A set of visual tokens marking the question-relevant region.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RegionMask {
    tokens: Vec<usize>,
    source: MaskSource,
}

impl RegionMask {
    /// Explicit mask; indices are sorted and deduplicated and must be visual.
    pub fn explicit(layout: &TokenLayout, mut tokens: Vec<usize>) -> Result<Self> {
        tokens.sort_unstable();
        tokens.dedup();
        if let Some(&bad) = tokens.iter().find(|&&t| !layout.is_visual(t)) {
            return Err(Error::NotVisual(bad));
        }
        Ok(Self {
            tokens,
            source: MaskSource::Explicit,
        })
    }

    /// Region covering every visual token of the layout.
    pub fn all_visual(layout: &TokenLayout) -> Self {
        Self {
            tokens: layout.visual_indices().collect(),
            source: MaskSource::Explicit,
        }
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn source(&self) -> MaskSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, token: usize) -> bool {
        self.tokens.binary_search(&token).is_ok()
    }

    pub fn is_subset_of(&self, other: &RegionMask) -> bool {
        self.tokens.iter().all(|t| other.contains(*t))
    }
}

/// Pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PixelBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelBox {
    pub const fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    fn as_array(&self) -> [u32; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

/// Default fraction of a patch that must be covered by a box.
pub const DEFAULT_OVERLAP_MIN: f64 = 0.5;

/// Maps a box on the first image to the tokens whose patches it covers by at
/// least `overlap_min` of the patch area (boundary included).
///
/// An empty result is returned as an empty mask; callers that need a
/// non-empty region should check [`RegionMask::is_empty`].
pub fn bbox_to_tokens(layout: &TokenLayout, bbox: PixelBox, overlap_min: f64) -> Result<RegionMask> {
    bbox_to_tokens_in(layout, 0, bbox, overlap_min)
}

/// Same as [`bbox_to_tokens`] for the image at span `image`.
pub fn bbox_to_tokens_in(
    layout: &TokenLayout,
    image: usize,
    bbox: PixelBox,
    overlap_min: f64,
) -> Result<RegionMask> {
    if !layout.has_grid() {
        return Err(Error::NoGrid);
    }
    if !(overlap_min > 0.0 && overlap_min <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "overlap_min must be in (0, 1], got {overlap_min}"
        )));
    }
    let grid = *layout.grids().get(image).ok_or(Error::OutOfRange {
        what: "image",
        index: image,
        len: layout.grids().len(),
    })?;
    let span = layout.visual_spans()[image];
    if bbox.x0 >= bbox.x1
        || bbox.y0 >= bbox.y1
        || u64::from(bbox.x1) > grid.width_px()
        || u64::from(bbox.y1) > grid.height_px()
    {
        return Err(Error::InvalidBox(bbox.as_array()));
    }
    let p = u64::from(grid.patch_px);
    let patch_area = (p * p) as f64;
    let mut tokens = Vec::new();
    for r in 0..grid.rows as u64 {
        let (py0, py1) = (r * p, (r + 1) * p);
        let h = overlap_1d(py0, py1, bbox.y0.into(), bbox.y1.into());
        if h == 0 {
            continue;
        }
        for c in 0..grid.cols as u64 {
            let (px0, px1) = (c * p, (c + 1) * p);
            let w = overlap_1d(px0, px1, bbox.x0.into(), bbox.x1.into());
            if w == 0 {
                continue;
            }
            if (w * h) as f64 >= overlap_min * patch_area {
                tokens.push(span.start + (r as usize) * grid.cols + c as usize);
            }
        }
    }
    Ok(RegionMask {
        tokens,
        source: MaskSource::BBox,
    })
}

fn overlap_1d(a0: u64, a1: u64, b0: u64, b1: u64) -> u64 {
    a1.min(b1).saturating_sub(a0.max(b0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn grid8() -> TokenLayout {
        TokenLayout::single_image(
            80,
            0,
            Grid {
                rows: 8,
                cols: 8,
                patch_px: 16,
            },
            79,
        )
        .unwrap()
    }

    /// Counts covered pixels one by one in integer arithmetic.
    fn raster_oracle(rows: usize, cols: usize, p: u32, b: PixelBox, num: u64, den: u64) -> Vec<usize> {
        let mut out = Vec::new();
        for r in 0..rows as u32 {
            for c in 0..cols as u32 {
                let mut covered = 0u64;
                for y in r * p..(r + 1) * p {
                    for x in c * p..(c + 1) * p {
                        if x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1 {
                            covered += 1;
                        }
                    }
                }
                // covered / p^2 >= num / den
                if covered > 0 && covered * den >= num * u64::from(p * p) {
                    out.push(r as usize * cols + c as usize);
                }
            }
        }
        out
    }

    #[test]
    fn box_over_four_patches() {
        let m = bbox_to_tokens(&grid8(), PixelBox::new(0, 0, 32, 32), 0.5).unwrap();
        assert_eq!(m.tokens(), &[0, 1, 8, 9]);
        assert_eq!(m.source(), MaskSource::BBox);
    }

    #[test]
    fn half_covered_patch_is_included() {
        let b = PixelBox::new(0, 0, 24, 16);
        let m = bbox_to_tokens(&grid8(), b, 0.5).unwrap();
        assert_eq!(m.tokens(), raster_oracle(8, 8, 16, b, 1, 2).as_slice());
        assert_eq!(m.tokens(), &[0, 1]);
    }

    #[test]
    fn whole_image_box_selects_everything() {
        let m = bbox_to_tokens(&grid8(), PixelBox::new(0, 0, 128, 128), 0.5).unwrap();
        assert_eq!(m.len(), 64);
    }

    #[test]
    fn offsets_by_span_start() {
        let l = TokenLayout::single_image(
            70,
            3,
            Grid {
                rows: 8,
                cols: 8,
                patch_px: 16,
            },
            69,
        )
        .unwrap();
        let m = bbox_to_tokens(&l, PixelBox::new(16, 16, 32, 32), 1.0).unwrap();
        assert_eq!(m.tokens(), &[3 + 9]);
    }

    #[test]
    fn missing_grid_and_bad_boxes() {
        let l = TokenLayout::new(10, vec![Span::new(0, 4)], 9, vec![]).unwrap();
        assert_eq!(
            bbox_to_tokens(&l, PixelBox::new(0, 0, 1, 1), 0.5),
            Err(Error::NoGrid)
        );
        assert!(matches!(
            bbox_to_tokens(&grid8(), PixelBox::new(0, 0, 129, 10), 0.5),
            Err(Error::InvalidBox(_))
        ));
        assert!(matches!(
            bbox_to_tokens(&grid8(), PixelBox::new(5, 0, 5, 10), 0.5),
            Err(Error::InvalidBox(_))
        ));
        assert!(bbox_to_tokens(&grid8(), PixelBox::new(0, 0, 4, 4), 0.5)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn layout_validation() {
        assert!(TokenLayout::new(10, vec![Span::new(0, 4), Span::new(3, 6)], 9, vec![]).is_err());
        assert!(TokenLayout::new(10, vec![Span::new(0, 11)], 9, vec![]).is_err());
        assert!(TokenLayout::new(10, vec![Span::new(0, 4)], 2, vec![]).is_err());
        assert!(TokenLayout::new(10, vec![], 9, vec![]).is_err());
        let two = TokenLayout::new(
            20,
            vec![Span::new(1, 5), Span::new(8, 12)],
            19,
            vec![
                Grid { rows: 2, cols: 2, patch_px: 4 },
                Grid { rows: 2, cols: 2, patch_px: 4 },
            ],
        )
        .unwrap();
        assert_eq!(two.visual_count(), 8);
        assert_eq!(two.visual_position(9), Some(5));
        assert_eq!(two.visual_position(6), None);
        let m = bbox_to_tokens_in(&two, 1, PixelBox::new(4, 4, 8, 8), 0.5).unwrap();
        assert_eq!(m.tokens(), &[11]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn boxes() -> impl Strategy<Value = (PixelBox, PixelBox)> {
            (0u32..128, 0u32..128, 1u32..=128, 1u32..=128, 0u32..64, 0u32..64, 0u32..64, 0u32..64)
                .prop_filter_map("nonempty", |(x0, y0, w, h, a, b, c, d)| {
                    let x1 = (x0 + w).min(128);
                    let y1 = (y0 + h).min(128);
                    if x1 <= x0 || y1 <= y0 {
                        return None;
                    }
                    let inner = PixelBox::new(x0, y0, x1, y1);
                    let outer = PixelBox::new(
                        x0.saturating_sub(a),
                        y0.saturating_sub(b),
                        (x1 + c).min(128),
                        (y1 + d).min(128),
                    );
                    Some((inner, outer))
                })
        }

        proptest! {
            #[test]
            fn monotone_in_box((inner, outer) in boxes(), t in 0.01f64..=1.0) {
                let l = grid8();
                let a = bbox_to_tokens(&l, inner, t).unwrap();
                let b = bbox_to_tokens(&l, outer, t).unwrap();
                prop_assert!(a.is_subset_of(&b));
            }

            #[test]
            fn tiny_threshold_is_any_overlap((b, _) in boxes()) {
                let m = bbox_to_tokens(&grid8(), b, 1e-12).unwrap();
                let any: Vec<usize> = raster_oracle(8, 8, 16, b, 1, 1 << 40);
                prop_assert_eq!(m.tokens(), any.as_slice());
            }

            #[test]
            fn matches_pixel_oracle((b, _) in boxes(), num in 1u64..=8) {
                let m = bbox_to_tokens(&grid8(), b, num as f64 / 8.0).unwrap();
                let want = raster_oracle(8, 8, 16, b, num, 8);
                prop_assert_eq!(m.tokens(), want.as_slice());
            }
        }
    }
}
