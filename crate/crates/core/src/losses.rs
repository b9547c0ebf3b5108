//! Training objective: classification, GIoU regression, sub-event
//! contrastive alignment and graph-anchor calibration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::t_iou;
use crate::numerics::{Tape, Tensor, Var};
use crate::prompt_oracle::EventGraph;

/// How start and end deviations are combined in the calibration loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalForm {
    /// `((ŝ − s) + (ê − e))²`; equal and opposite errors cancel.
    #[default]
    SummedDeviation,
    /// `(ŝ − s)² + (ê − e)²`.
    SeparateDeviations,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_reg: f64,
    pub lambda_sem: f64,
    pub lambda_cal: f64,
    pub tau: f64,
    #[serde(default)]
    pub cal_form: CalForm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_reg: 1.0,
            lambda_sem: 0.5,
            lambda_cal: 0.2,
            tau: 0.07,
            cal_form: CalForm::SummedDeviation,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_reg", self.lambda_reg),
            ("lambda_sem", self.lambda_sem),
            ("lambda_cal", self.lambda_cal),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

fn one_hot(rows: usize, cols: usize, hot: &[usize]) -> Result<Tensor> {
    let mut data = vec![0.0; rows * cols];
    for (i, &c) in hot.iter().enumerate() {
        data[i * cols + c] = 1.0;
    }
    Tensor::matrix(rows, cols, data)
}

fn zero(tape: &Tape) -> Var<'_> {
    tape.constant_owned(Tensor::scalar(0.0))
}

/// Mean cross-entropy of `L × (C + 1)` logits against per-token labels.
pub fn loss_cls<'t>(logits: Var<'t>, targets: &[usize]) -> Result<Var<'t>> {
    let (l, k) = (logits.rows(), logits.cols());
    if targets.len() != l {
        return Err(Error::Contract(format!("{} targets for {l} tokens", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::Label {
            label: bad,
            num_classes: k,
        });
    }
    let mask = logits.tape().constant_owned(one_hot(l, k, targets)?);
    Ok(logits.log_softmax_rows().mul(mask)?.sum().scale(-1.0 / l as f64))
}

/// Generalized IoU of two intervals on the line.
pub fn giou_1d(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    let iou = t_iou(a, b)?;
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    let hull = a.1.max(b.1) - a.0.min(b.0);
    Ok(iou - (hull - union) / hull)
}

/// Mean `1 − GIoU` between predicted `(start, end)` rows and their targets,
/// over tokens that have a target. Zero when no token does.
pub fn loss_reg<'t>(bounds: Var<'t>, targets: &[Option<(f64, f64)>]) -> Result<Var<'t>> {
    let tape = bounds.tape();
    if targets.len() != bounds.rows() {
        return Err(Error::Contract(format!(
            "{} regression targets for {} tokens",
            targets.len(),
            bounds.rows()
        )));
    }
    let fg: Vec<usize> = (0..targets.len()).filter(|&i| targets[i].is_some()).collect();
    if fg.is_empty() {
        return Ok(zero(tape));
    }
    let col = |f: fn((f64, f64)) -> f64| {
        let v: Vec<f64> = fg.iter().map(|&i| f(targets[i].expect("foreground"))).collect();
        Tensor::column(v).map(|t| tape.constant_owned(t))
    };
    let (ts, te) = (col(|t| t.0)?, col(|t| t.1)?);
    let p = bounds.select_rows(&fg)?;
    let (ps, pe) = (p.slice_cols(0, 1)?, p.slice_cols(1, 1)?);
    let zeros = tape.constant_owned(Tensor::zeros(&[fg.len(), 1]));

    let inter = pe.minimum(te)?.sub(ps.maximum(ts)?)?.maximum(zeros)?;
    let union = pe.sub(ps)?.add(te.sub(ts)?)?.sub(inter)?;
    let hull = pe.maximum(te)?.sub(ps.minimum(ts)?)?;
    let giou = inter.div(union)?.sub(hull.sub(union)?.div(hull)?)?;
    Ok(giou.neg().add_scalar(1.0).mean())
}

/// InfoNCE over cosine similarity between projected tokens (`L × D_P`) and
/// candidate embeddings (`K × D_P`); `positives[i]` indexes token `i`'s
/// candidate. Every candidate is in the denominator.
pub fn loss_sem<'t>(projected: Var<'t>, candidates: &Tensor, positives: &[usize], tau: f64) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let (l, k) = (projected.rows(), candidates.rows());
    if k < 2 {
        return Err(Error::Contract("contrastive loss needs at least one negative".into()));
    }
    if positives.len() != l {
        return Err(Error::Contract(format!("{} positives for {l} tokens", positives.len())));
    }
    if let Some(&bad) = positives.iter().find(|&&p| p >= k) {
        return Err(Error::Label {
            label: bad,
            num_classes: k,
        });
    }
    let tape = projected.tape();
    let cand = tape.constant_owned(candidates.clone()).normalize_rows(1e-12);
    let sims = projected.normalize_rows(1e-12).matmul(cand.t())?;
    similarity_nce(sims, positives, tau)
}

/// The contrastive loss on an already computed `L × K` similarity matrix.
pub fn similarity_nce<'t>(sims: Var<'t>, positives: &[usize], tau: f64) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let (l, k) = (sims.rows(), sims.cols());
    let mask = sims.tape().constant_owned(one_hot(l, k, positives)?);
    Ok(sims
        .scale(1.0 / tau)
        .log_softmax_rows()
        .mul(mask)?
        .sum()
        .scale(-1.0 / l as f64))
}

/// Minimum tIoU for a prediction to be matched to a graph event.
pub const CAL_MATCH_IOU: f64 = 0.1;

/// Greedy one-to-one matching of graph event nodes to token predictions of
/// the same class, in decreasing tIoU (which must exceed
/// [`CAL_MATCH_IOU`]). Returns `(node position, token)` pairs sorted by
/// node position.
pub fn match_events(graph: &EventGraph, pred_classes: &[usize], pred_bounds: &Tensor) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (n, node) in graph.event_nodes() {
        for (i, &c) in pred_classes.iter().enumerate() {
            if c != node.class_id {
                continue;
            }
            let span = (pred_bounds.get(i, 0), pred_bounds.get(i, 1));
            if let Ok(iou) = t_iou(span, node.anchor) {
                if iou > CAL_MATCH_IOU {
                    pairs.push((iou, n, i));
                }
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut node_used = vec![false; graph.len()];
    let mut token_used = vec![false; pred_classes.len()];
    let mut matched = Vec::new();
    for (_, n, i) in pairs {
        if !node_used[n] && !token_used[i] {
            node_used[n] = true;
            token_used[i] = true;
            matched.push((n, i));
        }
    }
    matched.sort();
    matched
}

/// Mean squared boundary deviation between matched predictions and their
/// graph anchors; zero when nothing matches.
pub fn loss_cal<'t>(bounds: Var<'t>, matches: &[(usize, usize)], graph: &EventGraph, form: CalForm) -> Result<Var<'t>> {
    let tape = bounds.tape();
    if matches.is_empty() {
        return Ok(zero(tape));
    }
    let tokens: Vec<usize> = matches.iter().map(|m| m.1).collect();
    let anchors: Vec<Vec<f64>> = matches
        .iter()
        .map(|&(n, _)| {
            let a = graph.nodes[n].anchor;
            vec![a.0, a.1]
        })
        .collect();
    let diff = bounds
        .select_rows(&tokens)?
        .sub(tape.constant_owned(Tensor::from_rows(&anchors)?))?;
    let per_event = match form {
        CalForm::SummedDeviation => diff
            .matmul(tape.constant_owned(Tensor::column(vec![1.0, 1.0])?))?
            .square(),
        CalForm::SeparateDeviations => diff.square(),
    };
    Ok(per_event.sum().scale(1.0 / matches.len() as f64))
}

/// The four loss terms of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossParts<'t> {
    pub cls: Var<'t>,
    pub reg: Var<'t>,
    pub sem: Var<'t>,
    pub cal: Var<'t>,
}

impl LossParts<'_> {
    pub fn values(&self) -> [f64; 4] {
        [self.cls.item(), self.reg.item(), self.sem.item(), self.cal.item()]
    }
}

pub const TERM_NAMES: [&str; 4] = ["cls", "reg", "sem", "cal"];

fn check_finite(values: [f64; 4]) -> Result<()> {
    for (v, term) in values.iter().zip(TERM_NAMES) {
        if !v.is_finite() {
            return Err(Error::NonFinite { term });
        }
    }
    Ok(())
}

/// `L_cls + λ_reg L_reg + λ_sem L_sem + λ_cal L_cal`.
pub fn total_loss<'t>(parts: &LossParts<'t>, w: &LossWeights) -> Result<Var<'t>> {
    check_finite(parts.values())?;
    parts
        .cls
        .add(parts.reg.scale(w.lambda_reg))?
        .add(parts.sem.scale(w.lambda_sem))?
        .add(parts.cal.scale(w.lambda_cal))
}

/// Value-level [`total_loss`].
pub fn total_loss_value(parts: [f64; 4], w: &LossWeights) -> Result<f64> {
    check_finite(parts)?;
    Ok(parts[0] + w.lambda_reg * parts[1] + w.lambda_sem * parts[2] + w.lambda_cal * parts[3])
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{grad_check, op_cases::uniform};
    use crate::prompt_oracle::{Edge, GraphNode, NodeKind, Relation};

    fn value(f: impl for<'t> FnOnce(&'t Tape) -> Result<Var<'t>>) -> f64 {
        let tape = Tape::new();
        f(&tape).unwrap().item()
    }

    #[test]
    fn cls_examples() {
        let uniform4 = value(|t| loss_cls(t.constant(&Tensor::zeros(&[3, 4])), &[0, 2, 3]));
        assert!((uniform4 - 4f64.ln()).abs() < 1e-15);
        let sure = value(|t| loss_cls(t.constant(&Tensor::row(vec![0.0, 30.0, 0.0]).unwrap()), &[1]));
        assert!(sure < 1e-9);
        // p = 0.25 via logits [ln 1, ln 3].
        let p = value(|t| loss_cls(t.constant(&Tensor::row(vec![0.0, 3f64.ln()]).unwrap()), &[0]));
        assert!((p - (-0.25f64.ln())).abs() < 1e-12);
        let tape = Tape::new();
        assert!(matches!(
            loss_cls(tape.constant(&Tensor::zeros(&[1, 3])), &[3]),
            Err(Error::Label {
                label: 3,
                num_classes: 3
            })
        ));
    }

    #[test]
    fn giou_examples() {
        assert_eq!(giou_1d((0.0, 1.0), (0.0, 1.0)).unwrap(), 1.0);
        assert!((giou_1d((0.0, 1.0), (2.0, 3.0)).unwrap() + 1.0 / 3.0).abs() < 1e-15);
        assert!((giou_1d((0.0, 2.0), (1.0, 3.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(giou_1d((2.0, 2.0), (0.0, 1.0)).is_err());
    }

    #[test]
    fn reg_matches_value_giou() {
        let preds = Tensor::from_rows(&[vec![0.0, 1.0], vec![5.0, 6.0], vec![0.0, 2.0]]).unwrap();
        let targets = [Some((2.0, 3.0)), None, Some((1.0, 3.0))];
        let l = value(|t| loss_reg(t.constant(&preds), &targets));
        let expected = ((1.0 + 1.0 / 3.0) + (1.0 - 1.0 / 3.0)) / 2.0;
        assert!((l - expected).abs() < 1e-15);
        assert_eq!(value(|t| loss_reg(t.constant(&preds), &[None, None, None])), 0.0);
    }

    #[test]
    fn sem_examples() {
        // sim(pos) = 1, sim(neg) = 0, τ = 1.
        let l = value(|t| {
            let f = t.constant(&Tensor::row(vec![2.0, 0.0]).unwrap());
            loss_sem(f, &Tensor::identity(2), &[0], 1.0)
        });
        assert!((l - (-(1f64.exp() / (1f64.exp() + 1.0)).ln())).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);

        let l = value(|t| similarity_nce(t.constant(&Tensor::filled(&[2, 5], 0.3)), &[1, 4], 0.07));
        assert!((l - 5f64.ln()).abs() < 1e-12);

        let tape = Tape::new();
        let f = tape.constant(&Tensor::row(vec![1.0, 0.0]).unwrap());
        assert!(matches!(
            loss_sem(f, &Tensor::identity(2), &[0], 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            loss_sem(f, &Tensor::row(vec![1.0, 0.0]).unwrap(), &[0], 0.07),
            Err(Error::Contract(_))
        ));
    }

    fn graph(events: &[(usize, f64, f64)]) -> EventGraph {
        let emb = || Tensor::row(vec![1.0, 0.0]).unwrap();
        let mut nodes = vec![GraphNode {
            node_id: 0,
            kind: NodeKind::Global,
            class_id: 1,
            anchor: (0.0, 100.0),
            embedding: emb(),
        }];
        let mut edges = Vec::new();
        for (i, &(c, s, e)) in events.iter().enumerate() {
            nodes.push(GraphNode {
                node_id: i + 1,
                kind: NodeKind::Event,
                class_id: c,
                anchor: (s, e),
                embedding: emb(),
            });
            edges.push(Edge {
                src: i + 1,
                dst: 0,
                relation: Relation::PartOf,
            });
        }
        EventGraph { nodes, edges }
    }

    #[test]
    fn cal_examples() {
        let g = graph(&[(1, 2.0, 6.0)]);
        let cal = |pred: [f64; 2], form| {
            let b = Tensor::row(pred.to_vec()).unwrap();
            let m = match_events(&g, &[1], &b);
            assert_eq!(m, vec![(1, 0)]);
            value(|t| loss_cal(t.constant(&b), &m, &g, form))
        };
        assert_eq!(cal([2.0, 6.0], CalForm::SummedDeviation), 0.0);
        assert_eq!(cal([3.0, 5.0], CalForm::SummedDeviation), 0.0);
        assert_eq!(cal([3.0, 7.0], CalForm::SummedDeviation), 4.0);
        assert_eq!(cal([3.0, 5.0], CalForm::SeparateDeviations), 2.0);

        // Wrong class or tIoU ≤ 0.1 → unmatched → zero loss.
        let b = Tensor::row(vec![2.0, 6.0]).unwrap();
        assert!(match_events(&g, &[2], &b).is_empty());
        let far = Tensor::row(vec![5.9, 50.0]).unwrap();
        assert!(match_events(&g, &[1], &far).is_empty());
        assert_eq!(
            value(|t| loss_cal(t.constant(&b), &[], &g, CalForm::SummedDeviation)),
            0.0
        );
    }

    #[test]
    fn cal_matching_is_greedy_by_iou() {
        let g = graph(&[(1, 0.0, 4.0), (1, 5.0, 9.0)]);
        let b = Tensor::from_rows(&[vec![0.0, 4.5], vec![0.5, 4.0], vec![5.0, 8.0]]).unwrap();
        // Token 0 (4 / 4.5) beats token 1 (3.5 / 4) for the first event.
        let m = match_events(&g, &[1, 1, 1], &b);
        assert_eq!(m, vec![(1, 0), (2, 2)]);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert!((total_loss_value([1.0; 4], &w).unwrap() - 2.7).abs() < 1e-15);
        let zero_w = LossWeights {
            lambda_reg: 0.0,
            lambda_sem: 0.0,
            lambda_cal: 0.0,
            ..w
        };
        assert_eq!(total_loss_value([0.7, 3.0, 4.0, 5.0], &zero_w).unwrap(), 0.7);
        assert_eq!(total_loss_value([0.0; 4], &w).unwrap(), 0.0);
        assert!(matches!(
            total_loss_value([0.0, f64::NAN, 0.0, 0.0], &w),
            Err(Error::NonFinite { term: "reg" })
        ));
        let tape = Tape::new();
        let s = |v| tape.constant_owned(Tensor::scalar(v));
        let parts = LossParts {
            cls: s(1.0),
            reg: s(1.0),
            sem: s(f64::NAN),
            cal: s(1.0),
        };
        assert!(matches!(total_loss(&parts, &w), Err(Error::NonFinite { term: "sem" })));
        assert!(LossWeights { tau: 0.0, ..w }.validate().is_err());
        assert!(LossWeights { lambda_cal: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn each_loss_passes_grad_check() {
        let g = graph(&[(1, 0.0, 3.0), (2, 4.0, 7.0)]);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = uniform(&mut rng, 4, 3, -2.0, 2.0);
            let targets = [0, 1, 2, 1];
            let res = grad_check(|_, v| loss_cls(v[0], &targets), std::slice::from_ref(&logits), 1e-5).unwrap();
            assert!(res.max_rel_error < 1e-4, "cls {seed}");

            // Centers with positive half-widths.
            let mut b = uniform(&mut rng, 4, 2, 0.2, 1.5);
            for i in 0..4 {
                let c = 2.0 * i as f64 + 0.5;
                let (s, e) = (c - b.get(i, 0), c + b.get(i, 1));
                b.data_mut()[2 * i] = s;
                b.data_mut()[2 * i + 1] = e;
            }
            let reg_t = [Some((0.3, 2.2)), None, Some((3.9, 6.6)), Some((5.1, 5.9))];
            let res = grad_check(|_, v| loss_reg(v[0], &reg_t), &[b.clone()], 1e-6).unwrap();
            assert!(res.max_rel_error < 1e-4, "reg {seed}: {:e}", res.max_rel_error);

            let proj = uniform(&mut rng, 4, 5, -1.0, 1.0);
            let cand = uniform(&mut rng, 3, 5, -1.0, 1.0);
            let res = grad_check(
                |_, v| loss_sem(v[0], &cand, &[0, 2, 1, 1], 0.07),
                std::slice::from_ref(&proj),
                1e-6,
            )
            .unwrap();
            assert!(res.max_rel_error < 1e-4, "sem {seed}: {:e}", res.max_rel_error);

            let cal_b = Tensor::from_rows(&[vec![0.1 + 0.3 * b.get(0, 0), 2.5], vec![4.2, 6.0 + b.get(1, 1)]]).unwrap();
            let m = match_events(&g, &[1, 2], &cal_b);
            assert_eq!(m.len(), 2);
            for form in [CalForm::SummedDeviation, CalForm::SeparateDeviations] {
                let res = grad_check(|_, v| loss_cal(v[0], &m, &g, form), std::slice::from_ref(&cal_b), 1e-5).unwrap();
                assert!(res.max_rel_error < 1e-4, "cal {seed}");
            }

            let w = LossWeights::default();
            let res = grad_check(
                |_, v| {
                    let parts = LossParts {
                        cls: loss_cls(v[0], &targets)?,
                        reg: loss_reg(v[1], &reg_t)?,
                        sem: loss_sem(v[2], &cand, &[0, 2, 1, 1], w.tau)?,
                        cal: loss_cal(v[3], &m, &g, w.cal_form)?,
                    };
                    total_loss(&parts, &w)
                },
                &[logits, b, proj, cal_b],
                1e-5,
            )
            .unwrap();
            assert!(res.max_rel_error < 1e-4, "total {seed}: {:e}", res.max_rel_error);
        }
    }

    proptest! {
        #[test]
        fn giou_properties(a0 in -10.0f64..10.0, al in 0.01f64..5.0, b0 in -10.0f64..10.0, bl in 0.01f64..5.0) {
            let (a, b) = ((a0, a0 + al), (b0, b0 + bl));
            let g = giou_1d(a, b).unwrap();
            prop_assert!((g - giou_1d(b, a).unwrap()).abs() < 1e-15);
            prop_assert!(g <= t_iou(a, b).unwrap() + 1e-15);
            prop_assert!(g > -1.0 && g <= 1.0);
            if a.0.max(b.0) < a.1.min(b.1) {
                prop_assert!((g - t_iou(a, b).unwrap()).abs() < 1e-12);
            }
        }

        #[test]
        fn total_is_weighted_sum(parts in prop::array::uniform4(0.0f64..10.0), w in prop::array::uniform3(0.0f64..3.0)) {
            let lw = LossWeights { lambda_reg: w[0], lambda_sem: w[1], lambda_cal: w[2], ..Default::default() };
            let tape = Tape::new();
            let s = |v| tape.constant_owned(Tensor::scalar(v));
            let lp = LossParts { cls: s(parts[0]), reg: s(parts[1]), sem: s(parts[2]), cal: s(parts[3]) };
            let hand = parts[0] + w[0] * parts[1] + w[1] * parts[2] + w[2] * parts[3];
            prop_assert!((total_loss(&lp, &lw).unwrap().item() - hand).abs() < 1e-12);
        }

        #[test]
        fn sem_nonnegative_shift_invariant_and_monotone(
            neg in prop::collection::vec(-1.0f64..1.0, 1..5),
            pos in -1.0f64..0.9,
            shift in -0.5f64..0.5,
        ) {
            let mut row = vec![pos];
            row.extend(&neg);
            let k = row.len();
            let sim = |r: &[f64]| value(|t| similarity_nce(t.constant(&Tensor::row(r.to_vec()).unwrap()), &[0], 0.07));
            let base = sim(&row);
            prop_assert!(base >= 0.0);
            let shifted: Vec<f64> = row.iter().map(|x| x + shift).collect();
            prop_assert!((sim(&shifted) - base).abs() < 1e-9);
            let mut better = row.clone();
            better[0] += 0.1;
            prop_assert!(sim(&better) < base);
            prop_assert!(k >= 2);
        }
    }
}
