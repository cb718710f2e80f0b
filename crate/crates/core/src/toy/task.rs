use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ToyConfig;
use crate::error::{Error, Result};
use crate::layout::{Grid, RegionMask, Span, TokenLayout};

/// Pixel size of one toy patch, only used for box geometry.
pub const PATCH_PX: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskKind {
    /// Name a cell, answer its symbol.
    FindPatch,
    /// As `FindPatch`, plus `decoys` other cells that show one shared wrong
    /// symbol. Their position code is blended toward the queried cell's by
    /// `salience`, so they look like the target to a retrieval head.
    FindPatchDistract { decoys: usize, salience: f64 },
}

impl TaskKind {
    pub fn distract() -> Self {
        TaskKind::FindPatchDistract {
            decoys: 1,
            salience: 0.8,
        }
    }

    pub fn validate(&self, cfg: &ToyConfig) -> Result<()> {
        match *self {
            TaskKind::FindPatchDistract { salience, .. } if !(0.0..=1.0).contains(&salience) => Err(
                Error::InvalidConfig(format!("decoy salience {salience} outside [0, 1]")),
            ),
            TaskKind::FindPatchDistract { decoys, .. } if decoys >= cfg.visual_tokens() => Err(Error::InvalidConfig(
                format!("{decoys} decoys do not fit a grid of {} cells", cfg.visual_tokens()),
            )),
            TaskKind::FindPatchDistract { .. } if cfg.symbols < 2 => {
                Err(Error::InvalidConfig("decoys need at least two symbols".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Symbol shown in each cell, row-major.
    pub grid: Vec<usize>,
    /// Queried cell, which is also the ground-truth region.
    pub cell: usize,
    pub answer: usize,
    /// Shared decoy symbol, if any.
    pub decoy: Option<usize>,
    /// Cells showing the decoy, ascending.
    pub decoy_cells: Vec<usize>,
    pub salience: f64,
}

impl Sample {
    /// Token ids: begin-of-sequence, the grid symbols, the prompt tokens and
    /// the cell marker.
    pub fn tokens(&self, cfg: &ToyConfig) -> Vec<usize> {
        let mut ids = Vec::with_capacity(cfg.seq_len());
        ids.push(cfg.symbols);
        ids.extend(&self.grid);
        ids.extend(core::iter::repeat_n(cfg.symbols + 1, cfg.question_len - 1));
        ids.push(cfg.symbols + 2);
        ids
    }

    /// Sequence position of the queried cell.
    pub fn cell_token(&self, cfg: &ToyConfig) -> usize {
        cfg.visual_start() + self.cell
    }

    pub fn region(&self, cfg: &ToyConfig, layout: &TokenLayout) -> Result<RegionMask> {
        RegionMask::explicit(layout, vec![self.cell_token(cfg)])
    }

    /// Position-table rows and weights that make up the position code of
    /// sequence position `i`.
    pub fn position_code(&self, cfg: &ToyConfig, i: usize) -> [(usize, f64); 2] {
        let vs = cfg.visual_start();
        if i >= vs && self.decoy_cells.binary_search(&(i - vs)).is_ok() {
            [(i, 1.0 - self.salience), (self.cell_token(cfg), self.salience)]
        } else {
            [(i, 1.0), (i, 0.0)]
        }
    }
}

/// Layout shared by every toy sequence: a begin-of-sequence token, the grid
/// at `[1, N + 1)`, then the question, whose last token is the question end.
pub fn layout(cfg: &ToyConfig) -> Result<TokenLayout> {
    let (s, n) = (cfg.visual_start(), cfg.visual_tokens());
    TokenLayout::new(
        cfg.seq_len(),
        vec![Span::new(s, s + n)],
        cfg.seq_len() - 1,
        vec![Grid {
            rows: cfg.grid_rows,
            cols: cfg.grid_cols,
            patch_px: PATCH_PX,
        }],
    )
}

pub fn sample<R: Rng>(cfg: &ToyConfig, kind: TaskKind, rng: &mut R) -> Sample {
    let n = cfg.visual_tokens();
    let mut grid: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.symbols)).collect();
    let cell = rng.random_range(0..n);
    let answer = grid[cell];
    let (decoy, decoy_cells) = match kind {
        TaskKind::FindPatch => (None, Vec::new()),
        TaskKind::FindPatchDistract { decoys, .. } => {
            let symbol = (answer + rng.random_range(1..cfg.symbols)) % cfg.symbols;
            let mut cells: Vec<usize> = rand::seq::index::sample(rng, n - 1, decoys)
                .into_iter()
                .map(|c| if c >= cell { c + 1 } else { c })
                .collect();
            cells.sort_unstable();
            for &c in &cells {
                grid[c] = symbol;
            }
            (Some(symbol), cells)
        }
    };
    let salience = match kind {
        TaskKind::FindPatchDistract { salience, .. } => salience,
        TaskKind::FindPatch => 0.0,
    };
    Sample {
        grid,
        cell,
        answer,
        decoy,
        decoy_cells,
        salience,
    }
}

/// `n` samples drawn from a stream seeded by `seed`.
pub fn dataset(cfg: &ToyConfig, kind: TaskKind, n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample(cfg, kind, &mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answer_is_the_queried_symbol() {
        let cfg = ToyConfig::default();
        for s in dataset(&cfg, TaskKind::distract(), 200, 4) {
            assert_eq!(s.grid[s.cell], s.answer);
            let d = s.decoy.unwrap();
            assert_ne!(d, s.answer);
            assert_eq!(s.decoy_cells.len(), 1);
            let c = s.decoy_cells[0];
            assert_ne!(c, s.cell);
            assert_eq!(s.grid[c], d);
            let v = cfg.visual_start() + c;
            assert_eq!(s.position_code(&cfg, v), [(v, 1.0 - 0.8), (s.cell_token(&cfg), 0.8)]);
            assert_eq!(s.position_code(&cfg, s.cell_token(&cfg))[0], (s.cell_token(&cfg), 1.0));
            assert!(s.grid.iter().all(|&g| g < cfg.symbols));
            let ids = s.tokens(&cfg);
            assert_eq!(ids.len(), cfg.seq_len());
            assert_eq!(ids[cfg.seq_len() - 1], cfg.symbols + 2);
            assert_eq!(ids[s.cell_token(&cfg)], s.answer);
        }
    }

    #[test]
    fn datasets_are_seeded() {
        let cfg = ToyConfig::default();
        assert_eq!(dataset(&cfg, TaskKind::FindPatch, 10, 1), dataset(&cfg, TaskKind::FindPatch, 10, 1));
        assert_ne!(dataset(&cfg, TaskKind::FindPatch, 10, 1), dataset(&cfg, TaskKind::FindPatch, 10, 2));
    }

    #[test]
    fn layout_matches_config() {
        let cfg = ToyConfig::default();
        let l = layout(&cfg).unwrap();
        assert_eq!(l.visual_count(), 64);
        assert_eq!(l.question_end_index(), 74);
        assert!(!l.is_visual(0));
    }
}
