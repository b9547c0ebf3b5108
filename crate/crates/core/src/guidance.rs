//! Fusing semantic guidance into encoded video tokens.
//!
//! Three mechanisms, each a residual-style map `L × D_V → L × D_V`:
//!
//! * [`gate_fuse`] mixes a projected whole-video embedding into every token
//!   through a learned per-token sigmoid gate.
//! * [`refine`] lets each token cross-attend over the per-clip sub-event
//!   embeddings, optionally restricted to the clips it overlaps.
//! * [`calibrate`] runs masked attention over the event graph, then lets
//!   tokens attend over the updated nodes with a penalty proportional to the
//!   temporal gap between token and node anchor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{linear, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::prompt_oracle::{gap, overlap, EventGraph, Relation, SubEvent};

/// Logit added to disallowed attention pairs.
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub w_g: ParamId,
    pub b_g: ParamId,
    pub w_p: ParamId,
}

impl GateParams {
    pub fn init(store: &mut ParamStore, d_v: usize, d_p: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_g: store.add_weight("gate.w_g", d_v, d_v + d_p, rng),
            b_g: store.add_bias("gate.b_g", d_v),
            w_p: store.add_weight("gate.w_p", d_v, d_p, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossAttnParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

impl CrossAttnParams {
    pub fn init(store: &mut ParamStore, d_v: usize, d_p: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_q: store.add_weight("refine.w_q", d_p, d_v, rng),
            w_k: store.add_weight("refine.w_k", d_p, d_p, rng),
            w_v: store.add_weight("refine.w_v", d_v, d_p, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibParams {
    /// Node self-attention projections, all `D_P × D_P`.
    pub w_nq: ParamId,
    pub w_nk: ParamId,
    pub w_nv: ParamId,
    /// `1 × 2` logit bias for node pairs joined by BEFORE / PART_OF.
    pub rel_bias: ParamId,
    /// Token→node cross-attention: query `D_P × D_V`, key `D_P × D_P`,
    /// value `D_V × D_P`.
    pub w_tq: ParamId,
    pub w_tk: ParamId,
    pub w_tv: ParamId,
}

impl CalibParams {
    pub fn init(store: &mut ParamStore, d_v: usize, d_p: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_nq: store.add_weight("calib.w_nq", d_p, d_p, rng),
            w_nk: store.add_weight("calib.w_nk", d_p, d_p, rng),
            w_nv: store.add_weight("calib.w_nv", d_p, d_p, rng),
            rel_bias: store.add_bias("calib.rel_bias", 2),
            w_tq: store.add_weight("calib.w_tq", d_p, d_v, rng),
            w_tk: store.add_weight("calib.w_tk", d_p, d_p, rng),
            w_tv: store.add_weight("calib.w_tv", d_v, d_p, rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibConfig {
    /// Logit penalty per second of gap between a token and a node anchor.
    pub gamma: f64,
    /// Rounds of graph attention before the token cross-attention.
    pub rounds: usize,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self { gamma: 1.0, rounds: 1 }
    }
}

fn check_width(op: &'static str, x: Var<'_>, expected: usize, what: usize) -> Result<()> {
    if x.cols() != expected {
        return Err(Error::Dimension {
            op,
            left: x.shape(),
            right: vec![what, expected],
        });
    }
    Ok(())
}

/// `ones(L × 1) · row`, the broadcast of a `1 × D` row to `L` rows.
fn broadcast_rows<'t>(row: Var<'t>, rows: usize) -> Result<Var<'t>> {
    row.tape().constant_owned(Tensor::filled(&[rows, 1], 1.0)).matmul(row)
}

fn stack_rows(rows: &[&Tensor]) -> Result<Tensor> {
    Tensor::from_rows(&rows.iter().map(|t| t.data().to_vec()).collect::<Vec<_>>())
}

/// Per-token gate between the token and the projected global embedding:
/// `g = σ(W_g [f; p] + b_g)`, `out = g ⊙ f + (1 − g) ⊙ W_p p`.
pub fn gate_fuse<'t>(f: Var<'t>, p_global: Var<'t>, params: &GateParams, bound: &Bound<'t>) -> Result<Var<'t>> {
    let (w_g, b_g, w_p) = (bound[params.w_g], bound[params.b_g], bound[params.w_p]);
    let d_p = p_global.cols();
    check_width("gate_fuse", f, w_g.cols() - d_p, f.rows())?;
    let l = f.rows();
    let p = broadcast_rows(p_global, l)?;
    let x = f.tape().concat_cols(&[f, p])?;
    let g = linear(x, w_g, Some(b_g))?.sigmoid();
    let projected = broadcast_rows(linear(p_global, w_p, None)?, l)?;
    let keep = g.mul(f)?;
    let inject = g.neg().add_scalar(1.0).mul(projected)?;
    keep.add(inject)
}

/// Cross-attention from tokens to sub-event embeddings with a residual:
/// `out_i = f_i + Σ_j softmax_j(q_i · k_j / √D_P + bias_ij) v_j`.
/// `bias` is an optional `L × M` logit offset such as [`alignment_bias`].
pub fn refine<'t>(
    f: Var<'t>,
    subs: Var<'t>,
    bias: Option<&Tensor>,
    params: &CrossAttnParams,
    bound: &Bound<'t>,
) -> Result<Var<'t>> {
    let d_p = bound[params.w_k].rows();
    let q = linear(f, bound[params.w_q], None)?;
    let k = linear(subs, bound[params.w_k], None)?;
    let v = linear(subs, bound[params.w_v], None)?;
    let mut logits = q.matmul(k.t())?.scale(1.0 / (d_p as f64).sqrt());
    if let Some(b) = bias {
        logits = logits.add(f.tape().constant(b))?;
    }
    f.add(logits.softmax_rows().matmul(v)?)
}

/// `L × M` mask letting each token attend only to clips it overlaps. A token
/// overlapping no clip keeps an unmasked row.
pub fn alignment_bias(token_spans: &[(f64, f64)], clip_spans: &[(f64, f64)]) -> Result<Tensor> {
    let m = clip_spans.len();
    let mut data = Vec::with_capacity(token_spans.len() * m);
    for &t in token_spans {
        let row: Vec<f64> = clip_spans
            .iter()
            .map(|&c| if overlap(t, c) > 0.0 { 0.0 } else { MASKED })
            .collect();
        if row.iter().all(|&x| x == MASKED) {
            data.extend(std::iter::repeat_n(0.0, m));
        } else {
            data.extend(row);
        }
    }
    Tensor::matrix(token_spans.len(), m, data)
}

/// `M × D_P` constant holding the sub-event embeddings.
pub fn sub_matrix<'t>(tape: &'t Tape, subs: &[SubEvent]) -> Result<Var<'t>> {
    if subs.is_empty() {
        return Err(Error::Contract("refine needs at least one sub-event".into()));
    }
    let rows: Vec<&Tensor> = subs.iter().map(|s| &s.embedding).collect();
    Ok(tape.constant_owned(stack_rows(&rows)?))
}

/// Intermediate values of [`calibrate`], kept for inspection.
#[derive(Debug, Clone)]
pub struct CalibTrace {
    /// Node embeddings after the graph-attention rounds, `N × D_P`.
    pub nodes: Tensor,
    /// Last round's node attention, `N × N`.
    pub node_attention: Option<Tensor>,
    /// Token→node attention, `L × N`.
    pub token_attention: Tensor,
}

/// Logit bias and mask for node attention: `{n} ∪ in(n) ∪ out(n)` are
/// visible, every other pair gets [`MASKED`]. Returned alongside per-relation
/// indicator matrices.
fn graph_masks(graph: &EventGraph) -> Result<(Tensor, [Tensor; 2])> {
    let n = graph.len();
    let adj = graph.undirected_adjacency()?;
    let mut mask = vec![MASKED; n * n];
    for a in 0..n {
        for b in 0..n {
            if a == b || adj[a][b] {
                mask[a * n + b] = 0.0;
            }
        }
    }
    let mut rel = [vec![0.0; n * n], vec![0.0; n * n]];
    for e in &graph.edges {
        let a = graph.index_of(e.src).expect("validated");
        let b = graph.index_of(e.dst).expect("validated");
        let r = match e.relation {
            Relation::Before => 0,
            Relation::PartOf => 1,
        };
        rel[r][a * n + b] = 1.0;
        rel[r][b * n + a] = 1.0;
    }
    let [before, part_of] = rel;
    Ok((
        Tensor::matrix(n, n, mask)?,
        [Tensor::matrix(n, n, before)?, Tensor::matrix(n, n, part_of)?],
    ))
}

/// `L × N` matrix of gaps in seconds between token spans and node anchors.
pub fn gap_matrix(spans: &[(f64, f64)], graph: &EventGraph) -> Result<Tensor> {
    let data = spans
        .iter()
        .flat_map(|&s| graph.nodes.iter().map(move |n| gap(s, n.anchor)))
        .collect();
    Tensor::matrix(spans.len(), graph.len(), data)
}

/// One residual round of node self-attention under an additive logit
/// `bias` (which carries the neighbourhood mask).
fn graph_attention<'t>(
    nodes: Var<'t>,
    bias: Var<'t>,
    params: &CalibParams,
    bound: &Bound<'t>,
) -> Result<(Var<'t>, Tensor)> {
    let scale = 1.0 / (nodes.cols() as f64).sqrt();
    let q = linear(nodes, bound[params.w_nq], None)?;
    let k = linear(nodes, bound[params.w_nk], None)?;
    let v = linear(nodes, bound[params.w_nv], None)?;
    let a = q.matmul(k.t())?.scale(scale).add(bias)?.softmax_rows();
    let weights = (*a.value()).clone();
    Ok((nodes.add(a.matmul(v)?)?, weights))
}

/// Graph-structured calibration of token features.
///
/// Step 1 updates node embeddings by attention restricted to graph
/// neighbours (plus self), with a learned logit bias per relation type.
/// Step 2 has every token attend over the updated nodes with logits
/// `q · k / √D_P − γ · gap(token, anchor)` and adds the attended values back.
pub fn calibrate<'t>(
    f: Var<'t>,
    graph: &EventGraph,
    spans: &[(f64, f64)],
    params: &CalibParams,
    cfg: &CalibConfig,
    bound: &Bound<'t>,
) -> Result<(Var<'t>, CalibTrace)> {
    graph.validate()?;
    if spans.len() != f.rows() {
        return Err(Error::Contract(format!(
            "{} spans for {} tokens",
            spans.len(),
            f.rows()
        )));
    }
    let tape = f.tape();
    let d_p = bound[params.w_nq].rows();
    let scale = 1.0 / (d_p as f64).sqrt();
    let rows: Vec<&Tensor> = graph.nodes.iter().map(|n| &n.embedding).collect();
    let mut nodes = tape.constant_owned(stack_rows(&rows)?);
    check_width("calibrate", nodes, d_p, graph.len())?;

    let (mask, [before, part_of]) = graph_masks(graph)?;
    let mask = tape.constant_owned(mask);
    let rel_bias = bound[params.rel_bias];
    let bias = tape
        .constant_owned(before)
        .scale_by(rel_bias.slice_cols(0, 1)?)?
        .add(tape.constant_owned(part_of).scale_by(rel_bias.slice_cols(1, 1)?)?)?
        .add(mask)?;

    let mut node_attention = None;
    for _ in 0..cfg.rounds {
        let (updated, a) = graph_attention(nodes, bias, params, bound)?;
        node_attention = Some(a);
        nodes = updated;
    }

    let gaps = tape.constant_owned(gap_matrix(spans, graph)?.map(|g| -cfg.gamma * g));
    let q = linear(f, bound[params.w_tq], None)?;
    let k = linear(nodes, bound[params.w_tk], None)?;
    let v = linear(nodes, bound[params.w_tv], None)?;
    let a = q.matmul(k.t())?.scale(scale).add(gaps)?.softmax_rows();
    let out = f.add(a.matmul(v)?)?;
    let trace = CalibTrace {
        nodes: (*nodes.value()).clone(),
        node_attention,
        token_attention: (*a.value()).clone(),
    };
    Ok((out, trace))
}
