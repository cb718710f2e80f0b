//! Seeded generator of labeled attention dumps.
//!
//! Every head of a synthetic dump plays one role:
//!
//! * **vision** heads put most of their mass on the image and most of the
//!   image mass on a target region (optionally leaking a share to sink
//!   tokens);
//! * **sink** heads look at the image only a little, put a fixed fraction of
//!   that on the sink tokens and spread the rest;
//! * **dispersed** heads look at the image a lot but uniformly;
//! * **text** heads look mostly at text and put their small image mass on the
//!   last few visual tokens;
//! * **line** heads (with [`RhLine`]) sit on a prescribed `R_img = k H_img + b`
//!   line.
//!
//! Unplanted heads become line heads when a line is requested. Otherwise the
//! first [`RowProfile::dispersed_per_layer`] of them in every layer without
//! planted sink heads are dispersed and the rest are text heads.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::dump::{AttentionDump, DumpShape, RowCheck};
use crate::error::{Error, Result};
use crate::layout::{Grid, Span, TokenLayout};
use crate::metrics::{image_attention_entropy, MetricsConfig, PromptMode};
use crate::select::{background_layers, default_k, HeadId};

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedVision {
    pub head: HeadId,
    /// Absolute token indices of the attended region.
    pub region: Vec<usize>,
    /// Share of the head's image attention that lands on the region, in (0, 1].
    pub concentration: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSinks {
    pub tokens: Vec<usize>,
    /// Heads that carry the sink (the background-head ground truth).
    pub heads: Vec<HeadId>,
    /// Share of a sink head's image attention on the sink tokens.
    pub fraction: f64,
    /// Share of a vision head's image attention leaking to the sink tokens.
    pub vision_share: f64,
    /// Fraction of a sink head's total attention that goes to the image.
    pub visual_fraction: f64,
}

impl PlantedSinks {
    pub fn new(tokens: Vec<usize>, heads: Vec<HeadId>) -> Self {
        Self {
            tokens,
            heads,
            fraction: 0.6,
            vision_share: 0.25,
            visual_fraction: 0.15,
        }
    }
}

/// Linear `R_img = slope * H_img + intercept` structure with Gaussian noise
/// on `R_img`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhLine {
    pub slope: f64,
    pub intercept: f64,
    pub noise: f64,
}

/// Shape parameters of the head roles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowProfile {
    pub vision_visual_fraction: f64,
    pub dispersed_visual_fraction: f64,
    pub text_visual_fraction: f64,
    /// Visual tokens at the end of the image that text heads attend to.
    pub text_tail_tokens: usize,
    pub dispersed_per_layer: usize,
    /// Uniform jitter applied to every visual fraction.
    pub jitter: f64,
}

impl Default for RowProfile {
    fn default() -> Self {
        Self {
            vision_visual_fraction: 0.95,
            dispersed_visual_fraction: 0.85,
            text_visual_fraction: 0.3,
            text_tail_tokens: 4,
            dispersed_per_layer: 0,
            jitter: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub layers: usize,
    pub heads: usize,
    pub total_tokens: usize,
    pub visual: Span,
    pub grid: Option<Grid>,
    pub planted_vision: Vec<PlantedVision>,
    pub planted_sinks: Option<PlantedSinks>,
    pub r_h_line: Option<RhLine>,
    /// Per-mode multipliers on the vision-head concentration, used by
    /// [`generate_modes`].
    pub mode_offsets: Vec<(PromptMode, f64)>,
    pub profile: RowProfile,
    pub seed: u64,
}

impl SynthSpec {
    /// Bare spec: every head is a text head until something is planted.
    pub fn new(layers: usize, heads: usize, total_tokens: usize, visual: Span, seed: u64) -> Self {
        Self {
            layers,
            heads,
            total_tokens,
            visual,
            grid: None,
            planted_vision: Vec::new(),
            planted_sinks: None,
            r_h_line: None,
            mode_offsets: Vec::new(),
            profile: RowProfile::default(),
            seed,
        }
    }

    /// The standard fixture: 8 layers of 12 heads and 80 tokens, an 8x8
    /// image at `[0, 64)` followed by 16 text tokens, a signal region at
    /// tokens {27, 28}, `k = 4` vision heads per layer at random head
    /// indices, a sink at token 0 carried by `k` heads in each of the first
    /// two layers, and `k` dispersed heads in every other layer.
    pub fn standard(seed: u64) -> Self {
        let (layers, heads) = (8usize, 12usize);
        let k = default_k(heads);
        let grid = Grid {
            rows: 8,
            cols: 8,
            patch_px: 14,
        };
        let region = vec![27, 28];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f1c5);
        let early = background_layers(layers, 0.25);
        let mut planted_vision = Vec::new();
        let mut sink_heads = Vec::new();
        for l in 0..layers {
            let perm = index::sample(&mut rng, heads, heads).into_vec();
            for &h in &perm[..k] {
                planted_vision.push(PlantedVision {
                    head: HeadId::new(l, h),
                    region: region.clone(),
                    concentration: 0.7,
                });
            }
            if l < early {
                sink_heads.extend(perm[k..2 * k].iter().map(|&h| HeadId::new(l, h)));
            }
        }
        let mut spec = Self::new(layers, heads, 80, Span::new(0, grid.cells()), seed);
        spec.grid = Some(grid);
        spec.planted_vision = planted_vision;
        spec.planted_sinks = Some(PlantedSinks::new(vec![0], sink_heads));
        spec.profile.dispersed_per_layer = k;
        spec
    }

    pub fn layout(&self) -> Result<TokenLayout> {
        TokenLayout::new(
            self.total_tokens,
            vec![self.visual],
            self.total_tokens.saturating_sub(1),
            self.grid.into_iter().collect(),
        )
    }

    fn validate(&self, layout: &TokenLayout) -> Result<()> {
        let infeasible = |m: alloc::string::String| Err(Error::InfeasibleSpec(m));
        if self.layers == 0 || self.heads == 0 {
            return infeasible("no heads".into());
        }
        let in_range = |h: &HeadId| h.layer < self.layers && h.head < self.heads;
        let mut seen: Vec<HeadId> = Vec::new();
        let sink_tokens: &[usize] = self.planted_sinks.as_ref().map_or(&[], |s| &s.tokens);
        let vision_share = self.planted_sinks.as_ref().map_or(0.0, |s| s.vision_share);
        for v in &self.planted_vision {
            if !in_range(&v.head) {
                return infeasible(format!("vision head {:?} out of range", v.head));
            }
            if seen.contains(&v.head) {
                return infeasible(format!("head {:?} planted twice", v.head));
            }
            seen.push(v.head);
            if v.region.is_empty() || v.region.iter().any(|t| !layout.is_visual(*t)) {
                return infeasible(format!("region of {:?} must be non-empty and visual", v.head));
            }
            if v.region.iter().any(|t| sink_tokens.contains(t)) {
                return infeasible("a sink token lies inside a vision region".into());
            }
            if !(v.concentration > 0.0 && v.concentration <= 1.0) {
                return infeasible(format!("concentration {} outside (0, 1]", v.concentration));
            }
            if v.concentration + vision_share > 1.0 + 1e-12 {
                return infeasible(format!(
                    "concentration {} plus sink share {vision_share} exceeds the image mass",
                    v.concentration
                ));
            }
        }
        if let Some(s) = &self.planted_sinks {
            if s.tokens.is_empty() || s.tokens.iter().any(|t| !layout.is_visual(*t)) {
                return infeasible("sink tokens must be non-empty and visual".into());
            }
            for h in &s.heads {
                if !in_range(h) {
                    return infeasible(format!("sink head {h:?} out of range"));
                }
                if seen.contains(h) {
                    return infeasible(format!("head {h:?} planted twice"));
                }
                seen.push(*h);
            }
            for (name, v) in [
                ("sink fraction", s.fraction),
                ("vision sink share", s.vision_share),
                ("sink visual fraction", s.visual_fraction),
            ] {
                if !(0.0..=1.0).contains(&v) {
                    return infeasible(format!("{name} {v} outside [0, 1]"));
                }
            }
        }
        let p = &self.profile;
        for v in [p.vision_visual_fraction, p.dispersed_visual_fraction, p.text_visual_fraction] {
            if !(0.0..=1.0).contains(&v) {
                return infeasible(format!("visual fraction {v} outside [0, 1]"));
            }
        }
        if let Some(line) = &self.r_h_line {
            if !(line.noise >= 0.0) {
                return infeasible("negative line noise".into());
            }
            let (lo, hi) = line_entropy_range(layout.visual_count());
            let ratio_max = layout.total_tokens() as f64 / layout.visual_count() as f64;
            for h in [lo, hi] {
                let r = line.slope * h + line.intercept;
                if line.noise == 0.0 && !(r > 0.0 && r <= ratio_max) {
                    return infeasible(format!(
                        "line gives R_img = {r} at H_img = {h}, outside (0, {ratio_max}]"
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Ground truth of a synthetic dump.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthLabels {
    pub vision_heads: Vec<HeadId>,
    pub sink_heads: Vec<HeadId>,
    pub sink_tokens: Vec<usize>,
    /// Union of the planted vision regions.
    pub region: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
enum Role {
    Vision { region: Vec<usize>, concentration: f64 },
    Sink,
    Dispersed,
    Text,
    Line,
}

fn line_entropy_range(n: usize) -> (f64, f64) {
    let max = libm::log(n as f64);
    (0.1 * max, 0.95 * max)
}

/// Generates a dump and its labels.
pub fn generate(spec: &SynthSpec) -> Result<(AttentionDump, SynthLabels)> {
    generate_scaled(spec, 1.0)
}

/// One dump per mode of `spec.mode_offsets`, each with the vision-head
/// concentration multiplied by the mode's factor. All modes share the seed,
/// so only the planted concentration differs between them.
pub fn generate_modes(spec: &SynthSpec) -> Result<Vec<(PromptMode, AttentionDump, SynthLabels)>> {
    if spec.mode_offsets.is_empty() {
        return Err(Error::InfeasibleSpec("no mode offsets".into()));
    }
    spec.mode_offsets
        .iter()
        .map(|&(mode, factor)| {
            if !(factor > 0.0) {
                return Err(Error::InfeasibleSpec(format!("mode factor {factor} must be positive")));
            }
            let (d, l) = generate_scaled(spec, factor)?;
            Ok((mode, d, l))
        })
        .collect()
}

fn generate_scaled(spec: &SynthSpec, factor: f64) -> Result<(AttentionDump, SynthLabels)> {
    let layout = spec.layout().map_err(|e| Error::InfeasibleSpec(format!("{e}")))?;
    spec.validate(&layout)?;
    let roles = assign_roles(spec);
    let visual: Vec<usize> = layout.visual_indices().collect();
    let text: Vec<usize> = (0..spec.total_tokens).filter(|t| !layout.is_visual(*t)).collect();
    let sinks = spec.planted_sinks.as_ref();
    let sink_tokens: Vec<usize> = sinks.map_or(Vec::new(), |s| s.tokens.clone());
    let vision_share = sinks.map_or(0.0, |s| s.vision_share);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.total_tokens;
    let mut data = Vec::with_capacity(spec.layers * spec.heads * m);
    for role in &roles {
        let mut row = vec![0.0f64; m];
        let jitter = spec.profile.jitter * (2.0 * rng.random::<f64>() - 1.0);
        let visual_fraction = match role {
            Role::Vision { region, concentration } => {
                let c = (concentration * factor).min(1.0 - vision_share).max(0.0);
                let rest: Vec<usize> = visual
                    .iter()
                    .copied()
                    .filter(|t| !region.contains(t) && !sink_tokens.contains(t))
                    .collect();
                scatter(&mut rng, &mut row, region, c, 20.0)?;
                scatter(&mut rng, &mut row, &sink_tokens, vision_share, 20.0)?;
                let spread = 1.0 - c - if sink_tokens.is_empty() { 0.0 } else { vision_share };
                if rest.is_empty() {
                    scatter(&mut rng, &mut row, region, spread, 20.0)?;
                } else {
                    scatter(&mut rng, &mut row, &rest, spread, 1.0)?;
                }
                spec.profile.vision_visual_fraction + jitter
            }
            Role::Sink => {
                let s = sinks.expect("sink role implies sinks");
                let rest: Vec<usize> = visual.iter().copied().filter(|t| !sink_tokens.contains(t)).collect();
                scatter(&mut rng, &mut row, &sink_tokens, s.fraction, 20.0)?;
                scatter(&mut rng, &mut row, &rest, 1.0 - s.fraction, 5.0)?;
                s.visual_fraction + jitter
            }
            Role::Dispersed => {
                scatter(&mut rng, &mut row, &visual, 1.0, 5.0)?;
                spec.profile.dispersed_visual_fraction + jitter
            }
            Role::Text => {
                let tail = spec.profile.text_tail_tokens.clamp(1, visual.len());
                scatter(&mut rng, &mut row, &visual[visual.len() - tail..], 1.0, 20.0)?;
                spec.profile.text_visual_fraction + jitter
            }
            Role::Line => {
                let line = spec.r_h_line.expect("line role implies a line");
                let (lo, hi) = line_entropy_range(visual.len());
                let target_h = lo + (hi - lo) * rng.random::<f64>();
                let z: f64 = rng.sample(StandardNormal);
                let r_img = line.slope * target_h + line.intercept + line.noise * z;
                let peak = visual[rng.random_range(0..visual.len())];
                entropy_profile(&mut row, &layout, &visual, peak, target_h)?;
                let f = r_img * visual.len() as f64 / m as f64;
                if line.noise == 0.0 {
                    f
                } else {
                    f.clamp(0.01, 1.0)
                }
            }
        };
        let fv = visual_fraction.clamp(0.0, 1.0);
        for &t in &visual {
            row[t] *= fv;
        }
        if text.is_empty() {
            if fv < 1.0 {
                return Err(Error::InfeasibleSpec("no text tokens to hold the remaining mass".into()));
            }
        } else {
            scatter(&mut rng, &mut row, &text, 1.0 - fv, 2.0)?;
        }
        data.extend(row.iter().map(|&v| v as f32));
    }
    let (dump, _) = AttentionDump::new(
        DumpShape::qt_slice(spec.layers, spec.heads),
        layout,
        data,
        RowCheck::Strict,
    )?;
    let mut region: Vec<usize> = spec.planted_vision.iter().flat_map(|v| v.region.iter().copied()).collect();
    region.sort_unstable();
    region.dedup();
    let mut vision_heads: Vec<HeadId> = spec.planted_vision.iter().map(|v| v.head).collect();
    vision_heads.sort_unstable();
    let mut sink_heads: Vec<HeadId> = sinks.map_or(Vec::new(), |s| s.heads.clone());
    sink_heads.sort_unstable();
    Ok((
        dump,
        SynthLabels {
            vision_heads,
            sink_heads,
            sink_tokens,
            region,
            seed: spec.seed,
        },
    ))
}

fn assign_roles(spec: &SynthSpec) -> Vec<Role> {
    let mut roles = vec![Role::Text; spec.layers * spec.heads];
    let idx = |h: &HeadId| h.layer * spec.heads + h.head;
    let mut planted = vec![false; roles.len()];
    let mut sink_layers = vec![false; spec.layers];
    for v in &spec.planted_vision {
        roles[idx(&v.head)] = Role::Vision {
            region: v.region.clone(),
            concentration: v.concentration,
        };
        planted[idx(&v.head)] = true;
    }
    if let Some(s) = &spec.planted_sinks {
        for h in &s.heads {
            roles[idx(h)] = Role::Sink;
            planted[idx(h)] = true;
            sink_layers[h.layer] = true;
        }
    }
    for l in 0..spec.layers {
        let mut dispersed = 0;
        for h in 0..spec.heads {
            let i = l * spec.heads + h;
            if planted[i] {
                continue;
            }
            roles[i] = if spec.r_h_line.is_some() {
                Role::Line
            } else if !sink_layers[l] && dispersed < spec.profile.dispersed_per_layer {
                dispersed += 1;
                Role::Dispersed
            } else {
                Role::Text
            };
        }
    }
    roles
}

/// Adds `mass` to `tokens`, split by a symmetric Dirichlet(`alpha`) draw.
fn scatter(rng: &mut ChaCha8Rng, row: &mut [f64], tokens: &[usize], mass: f64, alpha: f64) -> Result<()> {
    if tokens.is_empty() || mass <= 0.0 {
        return Ok(());
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|_| Error::InfeasibleSpec(format!("bad alpha {alpha}")))?;
    let draws: Vec<f64> = tokens.iter().map(|_| gamma.sample(rng).max(1e-300)).collect();
    let total: f64 = draws.iter().sum();
    for (&t, d) in tokens.iter().zip(draws) {
        row[t] += mass * d / total;
    }
    Ok(())
}

/// Fills the visual tokens with `(1 - t) onehot(peak) + t uniform`, with `t`
/// chosen by bisection so the image entropy equals `target`.
fn entropy_profile(row: &mut [f64], layout: &TokenLayout, visual: &[usize], peak: usize, target: f64) -> Result<()> {
    let n = visual.len() as f64;
    let cfg = MetricsConfig::default();
    let fill = |row: &mut [f64], t: f64| {
        for &v in visual {
            row[v] = t / n;
        }
        row[peak] += 1.0 - t;
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        fill(row, mid);
        if image_attention_entropy(row, layout, &cfg)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    fill(row, 0.5 * (lo + hi));
    Ok(())
}
