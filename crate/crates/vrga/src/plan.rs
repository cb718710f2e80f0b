//! Plan JSON shared with external runtimes.
//!
//! ```json
//! {"version": 1, "kind": "reweight", "heads": [[13, 2]], "tokens": [40, 41],
//!  "gamma": 0.5, "renormalize": true}
//! {"version": 1, "kind": "mask", "heads": [[0, 1]], "tokens": [],
//!  "span": [[5, 581]], "renormalize": false}
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use vrga_core::{HeadId, MaskPlan, Plan, ReweightPlan, Span};

use crate::error::{AppError, AppResult};
use crate::fsutil::read;

pub const PLAN_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanKind {
    Reweight,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub version: u32,
    pub kind: PlanKind,
    pub heads: Vec<[usize; 2]>,
    #[serde(default)]
    pub tokens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<Vec<[usize; 2]>>,
    pub renormalize: bool,
    /// Run manifest of the command that wrote the plan; ignored on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<serde_json::Value>,
}

fn heads_of(heads: &[HeadId]) -> Vec<[usize; 2]> {
    heads.iter().map(|h| [h.layer, h.head]).collect()
}

impl From<&Plan> for PlanFile {
    fn from(plan: &Plan) -> Self {
        match plan {
            Plan::Reweight(p) => Self {
                version: PLAN_VERSION,
                kind: PlanKind::Reweight,
                heads: heads_of(&p.heads),
                tokens: p.tokens.clone(),
                gamma: Some(p.gamma),
                span: None,
                renormalize: p.renormalize,
                manifest: None,
            },
            Plan::Mask(p) => Self {
                version: PLAN_VERSION,
                kind: PlanKind::Mask,
                heads: heads_of(&p.heads),
                tokens: Vec::new(),
                gamma: None,
                span: Some(p.spans.iter().map(|s| [s.start, s.end]).collect()),
                renormalize: p.renormalize,
                manifest: None,
            },
        }
    }
}

impl PlanFile {
    /// Converts to a core plan, checking the fields each kind needs.
    /// Dimension checks against a model or dump happen where the plan is
    /// applied.
    pub fn to_plan(&self) -> AppResult<Plan> {
        if self.version != PLAN_VERSION {
            return Err(AppError::validation(format!("unsupported plan version {}", self.version)));
        }
        let heads = self.heads.iter().map(|h| HeadId::new(h[0], h[1])).collect();
        match self.kind {
            PlanKind::Reweight => {
                if self.span.is_some() {
                    return Err(AppError::validation("reweight plan must not carry a span"));
                }
                let gamma = self
                    .gamma
                    .ok_or_else(|| AppError::validation("reweight plan without gamma"))?;
                if !(gamma >= 0.0 && gamma.is_finite()) {
                    return Err(AppError::validation(format!("gamma must be non-negative, got {gamma}")));
                }
                let mut p = ReweightPlan::new(heads, self.tokens.clone(), gamma);
                p.renormalize = self.renormalize;
                Ok(Plan::Reweight(p))
            }
            PlanKind::Mask => {
                if self.gamma.is_some() {
                    return Err(AppError::validation("mask plan must not carry gamma"));
                }
                let spans = self
                    .span
                    .as_deref()
                    .ok_or_else(|| AppError::validation("mask plan without span"))?;
                if let Some(s) = spans.iter().find(|s| s[0] > s[1]) {
                    return Err(AppError::validation(format!("span [{}, {}) is reversed", s[0], s[1])));
                }
                let mut p = MaskPlan::new(heads, spans.iter().map(|s| Span::new(s[0], s[1])).collect());
                p.renormalize = self.renormalize;
                Ok(Plan::Mask(p))
            }
        }
    }
}

pub fn parse_plan(bytes: &[u8]) -> AppResult<Plan> {
    let file: PlanFile =
        serde_json::from_slice(bytes).map_err(|e| AppError::validation(format!("malformed plan: {e}")))?;
    file.to_plan()
}

pub fn load_plan(path: &Path) -> AppResult<Plan> {
    parse_plan(&read(path)?).map_err(|e| match e {
        AppError::Validation(m) => AppError::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}
