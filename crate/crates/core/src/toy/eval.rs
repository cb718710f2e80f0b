//! Evaluation protocols on a trained toy model: head-masking ablations,
//! relevant-region attention split by correctness, and reweighting.

use alloc::vec;
use alloc::vec::Vec;

use super::model::{Hook, ToyModel};
use super::task::{layout, Sample};
use crate::error::{Error, Result};
use crate::layout::TokenLayout;
use crate::metrics::{layer_rrar, rrar, HeadTable, MetricsConfig};
use crate::select::{baseline_selection, default_k, select_vision_heads, BaselineStrategy, HeadId, SelectionConfig};
use crate::steer::{MaskPlan, Plan, ReweightPlan, DEFAULT_GAMMA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Strategy {
    Baseline,
    Random,
    LowVisual,
    EfrGuided,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Baseline, Strategy::Random, Strategy::LowVisual, Strategy::EfrGuided];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Random => "random",
            Strategy::LowVisual => "low-visual",
            Strategy::EfrGuided => "efr-guided",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

/// Head-selection settings shared by the protocols.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtocolConfig {
    /// Heads per layer; `None` uses the default for the model's head count.
    pub k: Option<usize>,
    pub r_img_quantile: f64,
    pub seed: u64,
    /// Whether masked rows are renormalized over the remaining tokens.
    pub mask_renormalize: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            k: None,
            r_img_quantile: 0.5,
            seed: 0,
            mask_renormalize: false,
        }
    }
}

impl ProtocolConfig {
    fn k_for(&self, heads: usize) -> usize {
        self.k.unwrap_or_else(|| default_k(heads))
    }

    fn selection(&self, heads: usize) -> SelectionConfig {
        SelectionConfig {
            heads_per_layer: self.k_for(heads),
            r_img_quantile: self.r_img_quantile,
            ..SelectionConfig::for_heads(heads)
        }
    }
}

fn metrics_of(model: &ToyModel, sample: &Sample, lay: &TokenLayout) -> Result<(usize, HeadTable, crate::dump::AttentionDump)> {
    let out = model.forward(sample, Hook::None)?;
    let dump = out.dump(lay)?;
    let table = HeadTable::from_dump(&dump, None, &MetricsConfig::default())?;
    Ok((out.prediction(), table, dump))
}

/// Heads picked by `strategy` for one sample, from its clean attention.
pub fn strategy_heads(strategy: Strategy, table: &HeadTable, cfg: &ProtocolConfig, sample_index: usize) -> Result<Vec<HeadId>> {
    let heads = table.heads();
    if strategy == Strategy::Baseline || cfg.k_for(heads) == 0 {
        return Ok(Vec::new());
    }
    let sel = cfg.selection(heads);
    let s = match strategy {
        Strategy::Baseline => unreachable!(),
        Strategy::EfrGuided => select_vision_heads(table, &sel)?,
        Strategy::Random => baseline_selection(
            BaselineStrategy::Random {
                seed: cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(sample_index as u64),
            },
            table,
            &sel,
        )?,
        Strategy::LowVisual => baseline_selection(BaselineStrategy::LowVisual, table, &sel)?,
    };
    Ok(s.vision_heads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub strategy: Strategy,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub k: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn accuracy(&self, strategy: Strategy) -> Option<f64> {
        self.rows.iter().find(|r| r.strategy == strategy).map(|r| r.accuracy)
    }
}

/// Whether each strategy still answers `sample` correctly once its heads'
/// visual attention is masked. `index` seeds the random strategy.
pub fn ablation_sample(
    model: &ToyModel,
    sample: &Sample,
    index: usize,
    strategies: &[Strategy],
    cfg: &ProtocolConfig,
) -> Result<Vec<bool>> {
    let lay = layout(model.config())?;
    let (clean, table, _) = metrics_of(model, sample, &lay)?;
    let mut hits = Vec::with_capacity(strategies.len());
    for &st in strategies {
        let heads = strategy_heads(st, &table, cfg, index)?;
        let pred = if heads.is_empty() {
            clean
        } else {
            let mut mask = MaskPlan::all_visual(heads, &lay);
            mask.renormalize = cfg.mask_renormalize;
            model.forward(sample, Hook::Plan(&Plan::Mask(mask)))?.prediction()
        };
        hits.push(pred == sample.answer);
    }
    Ok(hits)
}

/// Folds per-sample outcomes of [`ablation_sample`] into a report.
pub fn ablation_report(k: usize, strategies: &[Strategy], outcomes: &[Vec<bool>]) -> AblationReport {
    let total = outcomes.len();
    let rows = strategies
        .iter()
        .enumerate()
        .map(|(j, &strategy)| {
            let correct = outcomes.iter().filter(|o| o[j]).count();
            AblationRow {
                strategy,
                accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
                correct,
                total,
            }
        })
        .collect();
    AblationReport { k, rows }
}

/// Masks the visual attention of `k` heads per layer chosen by each strategy
/// and reports the resulting accuracies.
pub fn ablation_study(model: &ToyModel, samples: &[Sample], strategies: &[Strategy], cfg: &ProtocolConfig) -> Result<AblationReport> {
    let outcomes = samples
        .iter()
        .enumerate()
        .map(|(i, s)| ablation_sample(model, s, i, strategies, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(ablation_report(cfg.k_for(model.config().heads), strategies, &outcomes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSplit {
    pub layer: usize,
    pub correct: Option<f64>,
    pub incorrect: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RrarCorrectnessReport {
    pub layers: Vec<LayerSplit>,
    pub n_correct: usize,
    pub n_incorrect: usize,
    /// Fraction of layers whose correct-sample mean exceeds the
    /// incorrect-sample mean; `None` when one side is empty.
    pub correct_higher_fraction: Option<f64>,
}

/// Correctness and per-layer mean relevant-region attention ratio of one
/// sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RrarOutcome {
    pub correct: bool,
    pub layer_means: Vec<f64>,
}

pub fn rrar_sample(model: &ToyModel, sample: &Sample) -> Result<RrarOutcome> {
    let lay = layout(model.config())?;
    let out = model.forward(sample, Hook::None)?;
    let dump = out.dump(&lay)?;
    let layer_means = layer_rrar(&dump, &sample.region(model.config(), &lay)?)?
        .into_iter()
        .map(|lr| lr.mean)
        .collect();
    Ok(RrarOutcome {
        correct: out.prediction() == sample.answer,
        layer_means,
    })
}

pub fn rrar_report(layers: usize, outcomes: &[RrarOutcome]) -> RrarCorrectnessReport {
    let mut sums = vec![[0.0f64; 2]; layers];
    let mut counts = [0usize; 2];
    for o in outcomes {
        let side = usize::from(!o.correct);
        counts[side] += 1;
        for (l, m) in o.layer_means.iter().enumerate() {
            sums[l][side] += m;
        }
    }
    let mean = |side: usize, l: usize| (counts[side] > 0).then(|| sums[l][side] / counts[side] as f64);
    let split: Vec<LayerSplit> = (0..layers)
        .map(|l| LayerSplit {
            layer: l,
            correct: mean(0, l),
            incorrect: mean(1, l),
        })
        .collect();
    let correct_higher_fraction = (counts[0] > 0 && counts[1] > 0).then(|| {
        split.iter().filter(|s| s.correct > s.incorrect).count() as f64 / layers as f64
    });
    RrarCorrectnessReport {
        layers: split,
        n_correct: counts[0],
        n_incorrect: counts[1],
        correct_higher_fraction,
    }
}

/// Layer-averaged relevant-region attention ratio of the question-end token,
/// with the queried cell as the region, split by whether the model answers
/// correctly.
pub fn rrar_correctness_report(model: &ToyModel, samples: &[Sample]) -> Result<RrarCorrectnessReport> {
    let outcomes = samples.iter().map(|s| rrar_sample(model, s)).collect::<Result<Vec<_>>>()?;
    Ok(rrar_report(model.config().layers, &outcomes))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReweightConfig {
    pub gamma: f64,
    pub protocol: ProtocolConfig,
}

impl Default for ReweightConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            protocol: ProtocolConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReweightReport {
    pub samples: usize,
    pub baseline_accuracy: f64,
    pub reweighted_accuracy: f64,
    /// Accuracy when the planned heads put all their visual attention on the
    /// ground-truth region.
    pub ceiling_accuracy: f64,
    /// `(reweighted - baseline) / (ceiling - baseline)`, when the ceiling is
    /// above the baseline.
    pub gap_recovered: Option<f64>,
    /// Mean relevant-region attention ratio over planned heads, clean and
    /// reweighted.
    pub planned_rrar_clean: f64,
    pub planned_rrar_reweighted: f64,
}

/// Outcome of the clean, reweighted and oracle-attention passes on one
/// sample, with the planned heads' ratios before and after reweighting.
#[derive(Debug, Clone, PartialEq)]
pub struct ReweightOutcome {
    pub clean: bool,
    pub reweighted: bool,
    pub ceiling: bool,
    pub rrar_pairs: Vec<(f64, f64)>,
}

pub fn reweight_sample(model: &ToyModel, sample: &Sample, index: usize, cfg: &ReweightConfig) -> Result<ReweightOutcome> {
    let lay = layout(model.config())?;
    let (clean, table, dump) = metrics_of(model, sample, &lay)?;
    let heads = strategy_heads(Strategy::EfrGuided, &table, &cfg.protocol, index)?;
    let region = sample.region(model.config(), &lay)?;
    let target = [sample.cell_token(model.config())];
    let plan = Plan::Reweight(ReweightPlan::new(heads.clone(), target.to_vec(), cfg.gamma));
    let out = model.forward(sample, Hook::Plan(&plan))?;
    let focus = model.forward(sample, Hook::Focus { heads: &heads, tokens: &target })?;
    let after = out.dump(&lay)?;
    let mut rrar_pairs = Vec::with_capacity(heads.len());
    for h in &heads {
        if let (Ok(a), Ok(b)) = (
            rrar(dump.qt_slice(h.layer, h.head)?, &lay, &region),
            rrar(after.qt_slice(h.layer, h.head)?, &lay, &region),
        ) {
            rrar_pairs.push((a, b));
        }
    }
    Ok(ReweightOutcome {
        clean: clean == sample.answer,
        reweighted: out.prediction() == sample.answer,
        ceiling: focus.prediction() == sample.answer,
        rrar_pairs,
    })
}

pub fn reweight_report(outcomes: &[ReweightOutcome]) -> Result<ReweightReport> {
    if outcomes.is_empty() {
        return Err(Error::InsufficientData("no samples".into()));
    }
    let n = outcomes.len() as f64;
    let frac = |f: fn(&ReweightOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count() as f64 / n;
    let (b, r, c) = (frac(|o| o.clean), frac(|o| o.reweighted), frac(|o| o.ceiling));
    let pairs: Vec<(f64, f64)> = outcomes.iter().flat_map(|o| o.rrar_pairs.iter().copied()).collect();
    let mean = |f: fn(&(f64, f64)) -> f64| {
        if pairs.is_empty() {
            0.0
        } else {
            pairs.iter().map(f).sum::<f64>() / pairs.len() as f64
        }
    };
    Ok(ReweightReport {
        samples: outcomes.len(),
        baseline_accuracy: b,
        reweighted_accuracy: r,
        ceiling_accuracy: c,
        gap_recovered: (c > b).then(|| (r - b) / (c - b)),
        planned_rrar_clean: mean(|p| p.0),
        planned_rrar_reweighted: mean(|p| p.1),
    })
}

/// Reweights the vision-focused heads of every sample towards its
/// ground-truth cell.
pub fn reweight_eval(model: &ToyModel, samples: &[Sample], cfg: &ReweightConfig) -> Result<ReweightReport> {
    let outcomes = samples
        .iter()
        .enumerate()
        .map(|(i, s)| reweight_sample(model, s, i, cfg))
        .collect::<Result<Vec<_>>>()?;
    reweight_report(&outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::config::ToyConfig;
    use crate::toy::task::{dataset, TaskKind};

    fn small() -> (ToyModel, Vec<Sample>) {
        let cfg = ToyConfig {
            d_model: 16,
            layers: 2,
            heads: 4,
            d_ff: 16,
            grid_rows: 4,
            grid_cols: 4,
            question_len: 3,
            ..ToyConfig::default()
        };
        (ToyModel::init(&cfg).unwrap(), dataset(&cfg, TaskKind::distract(), 12, 8))
    }

    #[test]
    fn zero_k_leaves_every_strategy_at_baseline() {
        let (m, data) = small();
        let cfg = ProtocolConfig {
            k: Some(0),
            ..Default::default()
        };
        let r = ablation_study(&m, &data, &Strategy::ALL, &cfg).unwrap();
        let base = r.accuracy(Strategy::Baseline).unwrap();
        assert_eq!(r.k, 0);
        for st in Strategy::ALL {
            assert_eq!(r.accuracy(st), Some(base));
        }
    }

    #[test]
    fn single_sample_skips_comparison() {
        let (m, data) = small();
        let r = rrar_correctness_report(&m, &data[..1]).unwrap();
        assert_eq!(r.correct_higher_fraction, None);
        assert_eq!(r.n_correct + r.n_incorrect, 1);
        assert!(r.layers.iter().all(|l| l.correct.is_some() != l.incorrect.is_some()));
    }

    #[test]
    fn per_sample_outcomes_fold_in_any_grouping() {
        let (m, data) = small();
        let cfg = ReweightConfig::default();
        let whole = reweight_eval(&m, &data, &cfg).unwrap();
        let mut parts: Vec<ReweightOutcome> = data[6..]
            .iter()
            .enumerate()
            .map(|(i, s)| reweight_sample(&m, s, i + 6, &cfg).unwrap())
            .collect();
        let head: Vec<ReweightOutcome> = data[..6]
            .iter()
            .enumerate()
            .map(|(i, s)| reweight_sample(&m, s, i, &cfg).unwrap())
            .collect();
        parts.splice(0..0, head);
        assert_eq!(reweight_report(&parts).unwrap(), whole);
        assert!(whole.planned_rrar_reweighted > whole.planned_rrar_clean);
    }

    #[test]
    fn strategy_names_round_trip() {
        for st in Strategy::ALL {
            assert_eq!(Strategy::parse(st.as_str()), Some(st));
        }
        assert_eq!(Strategy::parse("everything"), None);
    }

    #[test]
    fn empty_reweight_input_is_an_error() {
        let (m, _) = small();
        assert!(reweight_eval(&m, &[], &ReweightConfig::default()).is_err());
    }
}
