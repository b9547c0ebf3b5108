//! Anchor-free per-token localization head and detection decoding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::t_iou;
use crate::numerics::{linear, softmax_rows, Bound, ParamId, ParamStore, Tensor, Var};
use crate::prompt_oracle::{ScriptEvent, BACKGROUND};

/// A scored temporal detection (or a ground-truth instance with score 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionInstance {
    pub class_id: usize,
    pub start_sec: f64,
    pub end_sec: f64,
    pub score: f64,
}

impl ActionInstance {
    pub fn new(class_id: usize, start_sec: f64, end_sec: f64, score: f64) -> Result<Self> {
        if !(start_sec < end_sec) || !score.is_finite() {
            return Err(Error::Contract(format!(
                "instance [{start_sec}, {end_sec}) with score {score} is invalid"
            )));
        }
        Ok(Self {
            class_id,
            start_sec,
            end_sec,
            score,
        })
    }

    pub fn span(&self) -> (f64, f64) {
        (self.start_sec, self.end_sec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub w_cls: ParamId,
    pub b_cls: ParamId,
    pub w_reg: ParamId,
    pub b_reg: ParamId,
}

impl HeadParams {
    /// Head over `d_in`-wide token features for `num_classes` action
    /// classes plus background.
    pub fn init(store: &mut ParamStore, d_in: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_cls: store.add_weight("head.w_cls", num_classes + 1, d_in, rng),
            b_cls: store.add_bias("head.b_cls", num_classes + 1),
            w_reg: store.add_weight("head.w_reg", 2, d_in, rng),
            b_reg: store.add_bias("head.b_reg", 2),
        }
    }
}

/// Head outputs on the tape.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars<'t> {
    /// `L × (C + 1)`, column 0 is background.
    pub logits: Var<'t>,
    /// `L × 2` distances in seconds from the token center to start and end.
    pub offsets: Var<'t>,
    /// `L × 2` predicted `(start, end)`.
    pub bounds: Var<'t>,
}

/// Value-level head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub class_logits: Tensor,
    pub boundary_offsets: Tensor,
}

impl HeadVars<'_> {
    pub fn to_output(&self) -> HeadOutput {
        HeadOutput {
            class_logits: (*self.logits.value()).clone(),
            boundary_offsets: (*self.offsets.value()).clone(),
        }
    }
}

/// Offsets are `softplus(raw) · token_width`, so they are positive and in
/// units of the token's own duration.
pub fn head_forward<'t>(
    x: Var<'t>,
    spans: &[(f64, f64)],
    params: &HeadParams,
    bound: &Bound<'t>,
) -> Result<HeadVars<'t>> {
    if spans.len() != x.rows() {
        return Err(Error::Contract(format!(
            "{} spans for {} tokens",
            spans.len(),
            x.rows()
        )));
    }
    let tape = x.tape();
    let logits = linear(x, bound[params.w_cls], Some(bound[params.b_cls]))?;
    let raw = linear(x, bound[params.w_reg], Some(bound[params.b_reg]))?;
    let widths: Vec<f64> = spans.iter().flat_map(|(s, e)| [e - s, e - s]).collect();
    let offsets = raw
        .softplus()
        .mul(tape.constant_owned(Tensor::matrix(spans.len(), 2, widths)?))?;
    let signs = tape.constant_owned(Tensor::row(vec![-1.0, 1.0])?);
    let centers: Vec<f64> = spans.iter().flat_map(|(s, e)| [0.5 * (s + e); 2]).collect();
    let bounds = tape
        .constant_owned(Tensor::matrix(spans.len(), 2, centers)?)
        .add(offsets.mul(broadcast(signs, spans.len())?)?)?;
    Ok(HeadVars {
        logits,
        offsets,
        bounds,
    })
}

fn broadcast<'t>(row: Var<'t>, rows: usize) -> Result<Var<'t>> {
    row.tape().constant_owned(Tensor::filled(&[rows, 1], 1.0)).matmul(row)
}

/// Per-token supervision: the event covering the token center, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTargets {
    pub classes: Vec<usize>,
    pub intervals: Vec<Option<(f64, f64)>>,
}

impl TokenTargets {
    pub fn foreground(&self) -> impl Iterator<Item = usize> + '_ {
        self.intervals.iter().enumerate().filter_map(|(i, t)| t.map(|_| i))
    }
}

pub fn token_targets(spans: &[(f64, f64)], events: &[ScriptEvent]) -> TokenTargets {
    let mut classes = Vec::with_capacity(spans.len());
    let mut intervals = Vec::with_capacity(spans.len());
    for &(s, e) in spans {
        let c = 0.5 * (s + e);
        match events.iter().find(|ev| ev.start <= c && c < ev.end) {
            Some(ev) => {
                classes.push(ev.class_id);
                intervals.push(Some(ev.span()));
            }
            None => {
                classes.push(BACKGROUND);
                intervals.push(None);
            }
        }
    }
    TokenTargets { classes, intervals }
}

/// Best non-background class and its softmax probability for every token.
pub fn token_predictions(logits: &Tensor) -> Vec<(usize, f64)> {
    let probs = softmax_rows(logits);
    (0..probs.rows())
        .map(|i| {
            let row = probs.row_slice(i);
            let mut best = (1, row.get(1).copied().unwrap_or(0.0));
            for (c, &p) in row.iter().enumerate().skip(2) {
                if p > best.1 {
                    best = (c, p);
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.05,
            nms_iou: 0.5,
        }
    }
}

/// Descending score, then earlier start, then smaller class id.
pub fn rank_order(a: &ActionInstance, b: &ActionInstance) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start_sec.total_cmp(&b.start_sec))
        .then(a.class_id.cmp(&b.class_id))
}

/// Greedy per-class non-maximum suppression; output sorted by [`rank_order`].
pub fn nms(mut instances: Vec<ActionInstance>, iou: f64) -> Vec<ActionInstance> {
    instances.sort_by(rank_order);
    let mut kept: Vec<ActionInstance> = Vec::with_capacity(instances.len());
    for inst in instances {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == inst.class_id && t_iou(k.span(), inst.span()).unwrap_or(0.0) >= iou);
        if !suppressed {
            kept.push(inst);
        }
    }
    kept
}

/// Turns head outputs into scored detections inside `[0, duration]`.
pub fn decode(
    head: &HeadOutput,
    spans: &[(f64, f64)],
    duration: f64,
    cfg: &DecodeConfig,
) -> Result<Vec<ActionInstance>> {
    for (name, v) in [("score_thresh", cfg.score_thresh), ("nms_iou", cfg.nms_iou)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
        }
    }
    if head.class_logits.rows() != spans.len() || head.boundary_offsets.rows() != spans.len() {
        return Err(Error::Contract("head outputs and spans disagree on length".into()));
    }
    if head.class_logits.cols() < 2 {
        return Err(Error::Contract("head needs at least one action class".into()));
    }
    let preds = token_predictions(&head.class_logits);
    let mut out = Vec::new();
    for (i, (&(s, e), (class_id, score))) in spans.iter().zip(preds).enumerate() {
        if score < cfg.score_thresh {
            continue;
        }
        let c = 0.5 * (s + e);
        let start = (c - head.boundary_offsets.get(i, 0)).clamp(0.0, duration);
        let end = (c + head.boundary_offsets.get(i, 1)).clamp(0.0, duration);
        if start < end {
            out.push(ActionInstance {
                class_id,
                start_sec: start,
                end_sec: end,
                score,
            });
        }
    }
    Ok(nms(out, cfg.nms_iou))
}
