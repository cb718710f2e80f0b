//! Report serialization: metric tables, selections, refined maps, heatmaps.

use serde::{Deserialize, Serialize};
use vrga_core::metrics::{LayerRrar, ModeReport, RegressionFit, RegressionStats};
use vrga_core::select::SelectionWarning;
use vrga_core::{Grid, HeadId, HeadSelection, HeadTable, RefinedMap, SelectionRule, Span};

use crate::container::GridSpec;
use crate::error::{AppError, AppResult};

/// Formats like C's `%.9g`: nine significant digits, trailing zeros removed,
/// exponent form below `1e-4` and from `1e9` up.
pub fn fmt_g9(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn opt_g9(v: Option<f64>) -> String {
    v.map(fmt_g9).unwrap_or_default()
}

pub fn head_pairs(heads: &[HeadId]) -> Vec<[usize; 2]> {
    heads.iter().map(|h| [h.layer, h.head]).collect()
}

fn write_csv<I: IntoIterator<Item = Vec<String>>>(records: I) -> String {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    for r in records {
        w.write_record(&r).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv of ascii fields")
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

/// Per-head metric table as CSV. The `rrar` column is present only when the
/// table was computed against a region; undefined values are empty.
pub fn metrics_csv(table: &HeadTable, with_rrar: bool) -> String {
    let head = if with_rrar {
        header(&["layer", "head", "rrar", "r_img", "h_img", "efr"])
    } else {
        header(&["layer", "head", "r_img", "h_img", "efr"])
    };
    let rows = table.entries().iter().map(|m| {
        let mut r = vec![m.layer.to_string(), m.head.to_string()];
        if with_rrar {
            r.push(opt_g9(m.rrar));
        }
        r.extend([opt_g9(m.r_img), opt_g9(m.h_img), opt_g9(m.efr)]);
        r
    });
    write_csv(std::iter::once(head).chain(rows))
}

pub fn layer_rrar_csv(layers: &[LayerRrar]) -> String {
    let rows = layers
        .iter()
        .map(|l| vec![l.layer.to_string(), fmt_g9(l.mean), l.skipped.to_string()]);
    write_csv(std::iter::once(header(&["layer", "rrar_mean", "skipped"])).chain(rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRow {
    pub layer: usize,
    pub head: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rrar: Option<Option<f64>>,
    pub r_img: Option<f64>,
    pub h_img: Option<f64>,
    pub efr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: usize,
    pub rrar_mean: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub region: Option<Vec<usize>>,
    pub rows: Vec<HeadRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer_rrar: Option<Vec<LayerRow>>,
    pub manifest: serde_json::Value,
}

impl MetricsReport {
    pub fn new(
        table: &HeadTable,
        region: Option<&[usize]>,
        layers: Option<&[LayerRrar]>,
        manifest: serde_json::Value,
    ) -> Self {
        let with_rrar = region.is_some();
        Self {
            layers: table.layers(),
            heads: table.heads(),
            region: region.map(<[usize]>::to_vec),
            rows: table
                .entries()
                .iter()
                .map(|m| HeadRow {
                    layer: m.layer,
                    head: m.head,
                    rrar: with_rrar.then_some(m.rrar),
                    r_img: m.r_img,
                    h_img: m.h_img,
                    efr: m.efr,
                })
                .collect(),
            layer_rrar: layers.map(|ls| {
                ls.iter()
                    .map(|l| LayerRow {
                        layer: l.layer,
                        rrar_mean: l.mean,
                        skipped: l.skipped,
                    })
                    .collect()
            }),
            manifest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WarningJson {
    Shortfall { layer: usize, selected: usize, wanted: usize },
    NoBackgroundHeads,
}

impl From<&SelectionWarning> for WarningJson {
    fn from(w: &SelectionWarning) -> Self {
        match *w {
            SelectionWarning::Shortfall { layer, selected, wanted } => WarningJson::Shortfall { layer, selected, wanted },
            SelectionWarning::NoBackgroundHeads => WarningJson::NoBackgroundHeads,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionJson {
    pub rule: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub vision_heads: Vec<[usize; 2]>,
    pub background_heads: Vec<[usize; 2]>,
    pub warnings: Vec<WarningJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<serde_json::Value>,
}

impl From<&HeadSelection> for SelectionJson {
    fn from(s: &HeadSelection) -> Self {
        Self {
            rule: s.rule.name().into(),
            seed: match s.rule {
                SelectionRule::Random { seed } => Some(seed),
                _ => None,
            },
            vision_heads: head_pairs(&s.vision_heads),
            background_heads: head_pairs(&s.background_heads),
            warnings: s.warnings.iter().map(WarningJson::from).collect(),
            manifest: None,
        }
    }
}

/// Refined map as written by `pipeline --intermediates` and read by
/// `heatmap`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedMapJson {
    pub values: Vec<f64>,
    pub tokens: Vec<usize>,
    pub spans: Vec<[usize; 2]>,
    #[serde(default)]
    pub grids: Vec<GridSpec>,
    pub all_zero: bool,
    pub vision_heads: Vec<[usize; 2]>,
    pub background_heads: Vec<[usize; 2]>,
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_tokens: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<serde_json::Value>,
}

impl From<&RefinedMap> for RefinedMapJson {
    fn from(m: &RefinedMap) -> Self {
        Self {
            values: m.values.clone(),
            tokens: m.tokens.clone(),
            spans: m.spans.iter().map(|s| [s.start, s.end]).collect(),
            grids: m
                .grids
                .iter()
                .map(|g| GridSpec {
                    rows: g.rows,
                    cols: g.cols,
                    patch_px: g.patch_px,
                })
                .collect(),
            all_zero: m.all_zero,
            vision_heads: head_pairs(&m.vision_heads),
            background_heads: head_pairs(&m.background_heads),
            lambda: m.lambda,
            tau: None,
            selected_tokens: None,
            manifest: None,
        }
    }
}

impl RefinedMapJson {
    pub fn to_map(&self) -> AppResult<RefinedMap> {
        let spans: Vec<Span> = self.spans.iter().map(|s| Span::new(s[0], s[1])).collect();
        let n: usize = spans.iter().map(Span::len).sum();
        if self.values.len() != n || self.tokens.len() != n {
            return Err(AppError::validation(format!(
                "refined map has {} values and {} tokens for {n} span tokens",
                self.values.len(),
                self.tokens.len()
            )));
        }
        if !self.grids.is_empty() {
            if self.grids.len() != spans.len() {
                return Err(AppError::validation("refined map needs one grid per span"));
            }
            for (g, s) in self.grids.iter().zip(&spans) {
                if g.rows * g.cols != s.len() {
                    return Err(AppError::validation(format!(
                        "grid {}x{} does not cover span [{}, {})",
                        g.rows, g.cols, s.start, s.end
                    )));
                }
            }
        }
        let heads = |v: &[[usize; 2]]| v.iter().map(|h| HeadId::new(h[0], h[1])).collect();
        Ok(RefinedMap {
            values: self.values.clone(),
            tokens: self.tokens.clone(),
            spans,
            grids: self
                .grids
                .iter()
                .map(|g| Grid {
                    rows: g.rows,
                    cols: g.cols,
                    patch_px: g.patch_px,
                })
                .collect(),
            all_zero: self.all_zero,
            vision_heads: heads(&self.vision_heads),
            background_heads: heads(&self.background_heads),
            lambda: self.lambda,
        })
    }
}

/// One grid-shaped CSV per image: `rows` lines of `cols` values, no header.
pub fn heatmap_csvs(map: &RefinedMap) -> AppResult<Vec<String>> {
    if map.grids.is_empty() {
        return Err(AppError::validation("refined map has no grid layout"));
    }
    (0..map.grids.len())
        .map(|i| {
            let rows = map.grid_rows(i)?;
            Ok(write_csv(rows.iter().map(|r| r.iter().map(|&v| fmt_g9(v)).collect())))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeJson {
    pub mode: String,
    pub layers: Vec<f64>,
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReportJson {
    pub modes: Vec<ModeJson>,
    pub ordering_holds: bool,
    pub manifest: serde_json::Value,
}

impl ModeReportJson {
    pub fn new(r: &ModeReport, manifest: serde_json::Value) -> Self {
        Self {
            modes: r
                .modes
                .iter()
                .map(|m| ModeJson {
                    mode: m.mode.as_str().into(),
                    layers: m.layers.clone(),
                    overall: m.overall,
                })
                .collect(),
            ordering_holds: r.ordering_holds,
            manifest,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitJson {
    pub slope: f64,
    pub intercept: f64,
    pub pearson: f64,
    pub n: usize,
}

impl From<&RegressionFit> for FitJson {
    fn from(f: &RegressionFit) -> Self {
        Self {
            slope: f.slope,
            intercept: f.intercept,
            pearson: f.pearson,
            n: f.n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStdJson {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionJson {
    pub fits: Vec<Option<FitJson>>,
    pub slope: MeanStdJson,
    pub intercept: MeanStdJson,
    pub pearson: MeanStdJson,
    pub samples: usize,
    pub skipped: usize,
    pub manifest: serde_json::Value,
}

impl RegressionJson {
    pub fn new(fits: Vec<Option<FitJson>>, s: &RegressionStats, manifest: serde_json::Value) -> Self {
        let ms = |m: vrga_core::metrics::MeanStd| MeanStdJson { mean: m.mean, std: m.std };
        Self {
            fits,
            slope: ms(s.slope),
            intercept: ms(s.intercept),
            pearson: ms(s.pearson),
            samples: s.samples,
            skipped: s.skipped,
            manifest,
        }
    }
}
