//! Gradient-check suite over every differentiable component.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{batch_candidates, Ecvt, ModelConfig, Sample, Toggles};
use crate::encoder::{encode_on_tape, init_params, EncoderConfig, VideoFeatures};
use crate::error::{Error, Result};
use crate::guidance::{
    alignment_bias, calibrate, gate_fuse, refine, CalibConfig, CalibParams, CrossAttnParams, GateParams,
};
use crate::head::{head_forward, HeadParams};
use crate::losses::{
    loss_cal, loss_cls, loss_reg, loss_sem, match_events, total_loss, CalForm, LossParts, LossWeights,
};
use crate::numerics::op_cases::{self, uniform};
use crate::numerics::{grad_check, scalar_fn, Bound, ParamStore, Tape, Tensor};
use crate::parallel::{self, Execution};
use crate::prompt_oracle::{build_bundle, ClipPolicy, EmbeddingOracle, EventScript, PromptBundle, ScriptEvent};

pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: u64 = 20;
const EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Module {
    All,
    Ops,
    Gate,
    Refine,
    Calibrate,
    Head,
    Losses,
    Encoder,
    Ecvt,
}

impl Module {
    pub const NAMES: [&'static str; 9] = [
        "all",
        "ops",
        "gate",
        "refine",
        "calibrate",
        "head",
        "losses",
        "encoder",
        "ecvt",
    ];

    fn includes(self, other: Module) -> bool {
        self == Module::All || self == other
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
            Error::Config(format!(
                "unknown module {s:?}; expected one of {}",
                Module::NAMES.join("|")
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub module: Module,
    pub case: String,
    pub seeds: u64,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub cases: Vec<CaseReport>,
}

impl SuiteReport {
    pub fn all_pass(&self) -> bool {
        self.cases.iter().all(|c| c.pass)
    }

    pub fn worst(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

type SeedCheck = Box<dyn Fn(u64) -> Result<f64> + Send + Sync>;

struct Case {
    module: Module,
    name: String,
    check: SeedCheck,
}

fn case(module: Module, name: &str, check: impl Fn(u64) -> Result<f64> + Send + Sync + 'static) -> Case {
    Case {
        module,
        name: name.to_string(),
        check: Box::new(check),
    }
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(salt);
    r
}

/// Unit-second token spans.
fn spans(l: usize) -> Vec<(f64, f64)> {
    (0..l).map(|i| (i as f64, i as f64 + 1.0)).collect()
}

/// A random valid script over `l ≥ 2` seconds with 2–3 integer-aligned
/// events of distinct classes, so the event graph has edges of both
/// relations and no two event nodes carry the same embedding.
fn random_script(r: &mut ChaCha8Rng, l: usize) -> EventScript {
    let events = loop {
        let mut classes = [1, 2, 3];
        classes.shuffle(r);
        let mut events = Vec::new();
        let mut t = r.random_range(0..2usize);
        while t < l && events.len() < 3 {
            let len = r.random_range(1..=3usize).min(l - t);
            events.push(ScriptEvent {
                class_id: classes[events.len()],
                start: t as f64,
                end: (t + len) as f64,
            });
            t += len + r.random_range(0..=2usize);
        }
        if events.len() >= 2 {
            break events;
        }
    };
    EventScript {
        video_id: "check".into(),
        duration_sec: l as f64,
        global_label: events[0].class_id,
        events,
    }
}

fn random_bundle(r: &mut ChaCha8Rng, seed: u64, l: usize, d_p: usize) -> Result<(EventScript, PromptBundle)> {
    let script = random_script(r, l);
    let oracle = EmbeddingOracle::new(4, d_p, seed)?;
    let policy = ClipPolicy {
        clip_len: 2.0,
        stride: 1.0,
    };
    let bundle = build_bundle(&script, policy, &oracle)?;
    Ok((script, bundle))
}

/// Gradient check of `probe · module(params, x)` over parameters and the
/// appended inputs.
fn params_and_inputs(
    store: &ParamStore,
    extra: Vec<Tensor>,
    f: impl for<'t> Fn(&'t Tape, &Bound<'t>, &[crate::numerics::Var<'t>]) -> Result<crate::numerics::Var<'t>>,
) -> Result<f64> {
    let np = store.len();
    let mut inputs = store.tensors();
    inputs.extend(extra);
    let func = scalar_fn(|tape, vars| {
        let bound = Bound::from_vars(vars[..np].to_vec());
        f(tape, &bound, &vars[np..])
    });
    let g = grad_check(func, &inputs, EPS)?;
    Ok(g.max_rel_error)
}

const D_V: usize = 6;
const D_P: usize = 4;

fn guidance_cases() -> Vec<Case> {
    vec![
        case(Module::Gate, "gate_fuse", |seed| {
            let mut r = rng(seed, 1);
            let mut store = ParamStore::new();
            let p = GateParams::init(&mut store, D_V, D_P, &mut r);
            *store.get_mut(p.b_g) = uniform(&mut r, 1, D_V, -0.5, 0.5);
            let l = r.random_range(1..=5);
            let probe = uniform(&mut r, l, D_V, -1.0, 1.0);
            let extra = vec![uniform(&mut r, l, D_V, -1.0, 1.0), uniform(&mut r, 1, D_P, -1.0, 1.0)];
            params_and_inputs(&store, extra, |tape, b, x| {
                Ok(gate_fuse(x[0], x[1], &p, b)?.mul(tape.constant(&probe))?.sum())
            })
        }),
        case(Module::Refine, "refine", |seed| {
            let mut r = rng(seed, 2);
            let mut store = ParamStore::new();
            let p = CrossAttnParams::init(&mut store, D_V, D_P, &mut r);
            let (l, m) = (r.random_range(1..=5), r.random_range(1..=4));
            let probe = uniform(&mut r, l, D_V, -1.0, 1.0);
            let extra = vec![uniform(&mut r, l, D_V, -1.0, 1.0), uniform(&mut r, m, D_P, -1.0, 1.0)];
            params_and_inputs(&store, extra, |tape, b, x| {
                Ok(refine(x[0], x[1], None, &p, b)?.mul(tape.constant(&probe))?.sum())
            })
        }),
        case(Module::Refine, "refine_aligned", |seed| {
            let mut r = rng(seed, 3);
            let mut store = ParamStore::new();
            let p = CrossAttnParams::init(&mut store, D_V, D_P, &mut r);
            let l = r.random_range(2..=6);
            let (_, bundle) = random_bundle(&mut r, seed, l, D_P)?;
            let bias = alignment_bias(&spans(l), &bundle.clip_spans())?;
            let m = bundle.subs.len();
            let probe = uniform(&mut r, l, D_V, -1.0, 1.0);
            let extra = vec![uniform(&mut r, l, D_V, -1.0, 1.0), uniform(&mut r, m, D_P, -1.0, 1.0)];
            params_and_inputs(&store, extra, |tape, b, x| {
                Ok(refine(x[0], x[1], Some(&bias), &p, b)?
                    .mul(tape.constant(&probe))?
                    .sum())
            })
        }),
        case(Module::Calibrate, "calibrate", |seed| {
            let mut r = rng(seed, 4);
            let mut store = ParamStore::new();
            let p = CalibParams::init(&mut store, D_V, D_P, &mut r);
            *store.get_mut(p.rel_bias) = uniform(&mut r, 1, 2, -0.5, 0.5);
            let l = r.random_range(2..=6);
            let (_, bundle) = random_bundle(&mut r, seed, l, D_P)?;
            let cfg = CalibConfig {
                gamma: r.random_range(0.1..1.5),
                rounds: r.random_range(1..=2),
            };
            let sp = spans(l);
            let probe = uniform(&mut r, l, D_V, -1.0, 1.0);
            let extra = vec![uniform(&mut r, l, D_V, -1.0, 1.0)];
            params_and_inputs(&store, extra, |tape, b, x| {
                let (y, _) = calibrate(x[0], &bundle.graph, &sp, &p, &cfg, b)?;
                Ok(y.mul(tape.constant(&probe))?.sum())
            })
        }),
        case(Module::Calibrate, "gate_refine_calibrate_chain", |seed| {
            let mut r = rng(seed, 5);
            let mut store = ParamStore::new();
            let gate = GateParams::init(&mut store, D_V, D_P, &mut r);
            let cross = CrossAttnParams::init(&mut store, D_V, D_P, &mut r);
            let calib = CalibParams::init(&mut store, D_V, D_P, &mut r);
            *store.get_mut(gate.b_g) = uniform(&mut r, 1, D_V, -0.5, 0.5);
            let l = r.random_range(2..=6);
            let (_, bundle) = random_bundle(&mut r, seed, l, D_P)?;
            let sp = spans(l);
            let bias = alignment_bias(&sp, &bundle.clip_spans())?;
            let subs = Tensor::from_rows(
                &bundle
                    .subs
                    .iter()
                    .map(|s| s.embedding.data().to_vec())
                    .collect::<Vec<_>>(),
            )?;
            let probe = uniform(&mut r, l, D_V, -1.0, 1.0);
            let extra = vec![uniform(&mut r, l, D_V, -1.0, 1.0)];
            params_and_inputs(&store, extra, |tape, b, x| {
                let y = gate_fuse(x[0], tape.constant(&bundle.p_global), &gate, b)?;
                let y = refine(y, tape.constant(&subs), Some(&bias), &cross, b)?;
                let (y, _) = calibrate(y, &bundle.graph, &sp, &calib, &CalibConfig::default(), b)?;
                Ok(y.mul(tape.constant(&probe))?.sum())
            })
        }),
    ]
}

fn head_cases() -> Vec<Case> {
    vec![case(Module::Head, "head_forward", |seed| {
        let mut r = rng(seed, 6);
        let mut store = ParamStore::new();
        let p = HeadParams::init(&mut store, D_V, 3, &mut r);
        *store.get_mut(p.b_reg) = uniform(&mut r, 1, 2, -0.5, 0.5);
        let l = r.random_range(1..=5);
        let sp = spans(l);
        let pl = uniform(&mut r, l, 4, -1.0, 1.0);
        let pb = uniform(&mut r, l, 2, -1.0, 1.0);
        let extra = vec![uniform(&mut r, l, D_V, -1.0, 1.0)];
        params_and_inputs(&store, extra, |tape, b, x| {
            let h = head_forward(x[0], &sp, &p, b)?;
            let a = h.logits.mul(tape.constant(&pl))?.sum();
            let c = h.bounds.mul(tape.constant(&pb))?.sum();
            a.add(c)
        })
    })]
}

/// Adds uniform noise to every parameter so biases and gains leave their
/// neutral initial values and attention logits are not flat.
fn perturb(store: &mut ParamStore, r: &mut ChaCha8Rng, scale: f64) {
    for k in 0..store.len() {
        let t = store.get_mut(crate::numerics::ParamId(k));
        for v in t.data_mut() {
            *v += r.random_range(-scale..scale);
        }
    }
}

/// Interval rows `[c - a, c + b]` around token centers with positive
/// half-widths.
fn random_bounds(r: &mut ChaCha8Rng, l: usize) -> Tensor {
    let mut b = uniform(r, l, 2, 0.2, 1.5);
    for i in 0..l {
        let c = i as f64 + 0.5;
        let (s, e) = (c - b.get(i, 0), c + b.get(i, 1));
        b.data_mut()[2 * i] = s;
        b.data_mut()[2 * i + 1] = e;
    }
    b
}

struct LossInputs {
    logits: Tensor,
    classes: Vec<usize>,
    bounds: Tensor,
    intervals: Vec<Option<(f64, f64)>>,
    projected: Tensor,
    candidates: Tensor,
    positives: Vec<usize>,
    bundle: PromptBundle,
    cal_bounds: Tensor,
    matches: Vec<(usize, usize)>,
}

fn loss_inputs(seed: u64) -> Result<LossInputs> {
    let mut r = rng(seed, 7);
    let l = r.random_range(3..=6);
    let (script, bundle) = random_bundle(&mut r, seed, l, D_P)?;
    let targets = crate::head::token_targets(&spans(l), &script.events);
    let bounds = random_bounds(&mut r, l);
    let cal_bounds = random_bounds(&mut r, l);
    // Matching uses each token's labeled class so it stays fixed under
    // small perturbations of the bounds.
    let matches = match_events(&bundle.graph, &targets.classes, &cal_bounds);
    let k = r.random_range(2..=4);
    // Rows near one shared direction keep the sharp softmax unsaturated, so
    // no gradient coordinate shrinks to rounding level.
    let base = uniform(&mut r, 1, D_P, -1.0, 1.0);
    let near = |r: &mut ChaCha8Rng, n: usize| {
        let mut t = uniform(r, n, D_P, -0.15, 0.15);
        for i in 0..n {
            for j in 0..D_P {
                t.data_mut()[i * D_P + j] += base.data()[j];
            }
        }
        t
    };
    Ok(LossInputs {
        logits: uniform(&mut r, l, 4, -2.0, 2.0),
        classes: targets.classes,
        intervals: targets.intervals,
        bounds,
        projected: near(&mut r, l),
        candidates: near(&mut r, k),
        positives: (0..l).map(|_| r.random_range(0..k)).collect(),
        bundle,
        cal_bounds,
        matches,
    })
}

fn loss_check(
    seed: u64,
    eps: f64,
    f: impl for<'t> Fn(&LossInputs, &[crate::numerics::Var<'t>]) -> Result<crate::numerics::Var<'t>>,
) -> Result<f64> {
    let li = loss_inputs(seed)?;
    let inputs = [
        li.logits.clone(),
        li.bounds.clone(),
        li.projected.clone(),
        li.cal_bounds.clone(),
    ];
    Ok(grad_check(|_, v| f(&li, v), &inputs, eps)?.max_rel_error)
}

fn loss_cases() -> Vec<Case> {
    let tau = LossWeights::default().tau;
    vec![
        case(Module::Losses, "loss_cls", |seed| {
            loss_check(seed, EPS, |li, v| loss_cls(v[0], &li.classes))
        }),
        case(Module::Losses, "loss_reg", |seed| {
            loss_check(seed, EPS, |li, v| loss_reg(v[1], &li.intervals))
        }),
        case(Module::Losses, "loss_sem", move |seed| {
            loss_check(seed, EPS, |li, v| loss_sem(v[2], &li.candidates, &li.positives, tau))
        }),
        case(Module::Losses, "loss_cal_summed", |seed| {
            loss_check(seed, EPS, |li, v| {
                loss_cal(v[3], &li.matches, &li.bundle.graph, CalForm::SummedDeviation)
            })
        }),
        case(Module::Losses, "loss_cal_separate", |seed| {
            loss_check(seed, EPS, |li, v| {
                loss_cal(v[3], &li.matches, &li.bundle.graph, CalForm::SeparateDeviations)
            })
        }),
        case(Module::Losses, "total_loss", |seed| {
            let w = LossWeights::default();
            loss_check(seed, EPS, |li, v| {
                let parts = LossParts {
                    cls: loss_cls(v[0], &li.classes)?,
                    reg: loss_reg(v[1], &li.intervals)?,
                    sem: loss_sem(v[2], &li.candidates, &li.positives, w.tau)?,
                    cal: loss_cal(v[3], &li.matches, &li.bundle.graph, w.cal_form)?,
                };
                total_loss(&parts, &w)
            })
        }),
    ]
}

fn encoder_cases() -> Vec<Case> {
    vec![case(Module::Encoder, "encoder", |seed| {
        let mut r = rng(seed, 8);
        let cfg = EncoderConfig {
            depth: r.random_range(1..=2),
            heads: 2,
            d_v: 4,
            d_ff: 6,
            seed,
            position_encoding: r.random_bool(0.5),
        };
        let (mut store, params) = init_params(&cfg)?;
        perturb(&mut store, &mut r, 0.3);
        let l = r.random_range(1..=4);
        let input = VideoFeatures::new("check", uniform(&mut r, l, 4, -1.0, 1.0), spans(l))?;
        let probe = uniform(&mut r, l, 4, -1.0, 1.0);
        params_and_inputs(&store, Vec::new(), |tape, b, _| {
            let y = encode_on_tape(tape, &input, &cfg, &params, b, |_, x| Ok(x), None)?;
            Ok(y.mul(tape.constant(&probe))?.sum())
        })
    })]
}

/// The whole objective on a fixed four-second video with events of class 1
/// on `[0, 2)` and class 2 on `[3, 4)`. The class-1 logit bias is raised so
/// the event matching used by the calibration term is stable under
/// perturbation.
fn ecvt_check(seed: u64, toggles: Toggles) -> Result<f64> {
    let mut r = rng(seed, 9);
    let config = ModelConfig {
        encoder: EncoderConfig {
            depth: 1,
            heads: 2,
            d_v: 4,
            d_ff: 8,
            seed,
            position_encoding: true,
        },
        d_p: 4,
        fusion_layer: None,
        calib: CalibConfig::default(),
        aligned_refine: true,
    };
    let (model, mut store) = Ecvt::init(&config, toggles, 3)?;
    perturb(&mut store, &mut r, 1.0);
    *store.get_mut(model.head.b_cls) = Tensor::row(vec![0.0, 2.0, 0.0, 0.0])?;
    let script = EventScript {
        video_id: "check".into(),
        duration_sec: 6.0,
        global_label: 1,
        events: vec![
            ScriptEvent {
                class_id: 1,
                start: 0.0,
                end: 2.0,
            },
            ScriptEvent {
                class_id: 2,
                start: 2.0,
                end: 4.0,
            },
            ScriptEvent {
                class_id: 3,
                start: 4.0,
                end: 6.0,
            },
        ],
    };
    let oracle = EmbeddingOracle::new(4, 4, seed)?;
    let bundle = build_bundle(
        &script,
        ClipPolicy {
            clip_len: 2.0,
            stride: 1.0,
        },
        &oracle,
    )?;
    let features = VideoFeatures::new("check", uniform(&mut r, 6, 4, -1.0, 1.0), spans(6))?;
    let sample = Sample {
        features: &features,
        script: &script,
        bundle: &bundle,
    };
    let cands = batch_candidates(&[sample])?;
    let weights = LossWeights::default();
    let np = store.len();
    let func = scalar_fn(|tape, vars| {
        let bound = Bound::from_vars(vars[..np].to_vec());
        let (total, _) = model.objective(
            tape,
            &bound,
            sample,
            cands.matrix.as_ref(),
            &cands.positives[0],
            &weights,
        )?;
        Ok(total)
    });
    let g = grad_check(func, &store.tensors(), EPS)?;
    Ok(g.max_rel_error)
}

fn model_cases() -> Vec<Case> {
    vec![
        case(Module::Ecvt, "ecvt_full", |seed| ecvt_check(seed, Toggles::FULL)),
        case(Module::Ecvt, "ecvt_simple_fusion", |seed| {
            ecvt_check(seed, Toggles::SIMPLE_FUSION)
        }),
    ]
}

fn op_cases() -> Vec<Case> {
    op_cases::all()
        .into_iter()
        .map(|op| {
            let name = op.name;
            case(Module::Ops, name, move |seed| op.check(seed..seed + 1, EPS))
        })
        .collect()
}

fn all_cases() -> Vec<Case> {
    let mut cases = op_cases();
    cases.extend(guidance_cases());
    cases.extend(head_cases());
    cases.extend(loss_cases());
    cases.extend(encoder_cases());
    cases.extend(model_cases());
    cases
}

/// Runs every case of `module` over seeds `0..seeds`; cases are scheduled
/// by `exec`.
pub fn run_suite(module: Module, seeds: u64, exec: Execution) -> Result<SuiteReport> {
    if seeds == 0 {
        return Err(Error::Config("gradient check needs at least one seed".into()));
    }
    let cases: Vec<Case> = all_cases().into_iter().filter(|c| module.includes(c.module)).collect();
    let results = parallel::map(exec, &cases, |c| -> Result<CaseReport> {
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            let e = (c.check)(seed)?;
            worst = worst.max(if e.is_finite() { e } else { f64::INFINITY });
        }
        Ok(CaseReport {
            module: c.module,
            case: c.name.clone(),
            seeds,
            max_rel_error: worst,
            pass: worst < TOLERANCE,
        })
    });
    Ok(SuiteReport {
        tolerance: TOLERANCE,
        cases: results.into_iter().collect::<Result<_>>()?,
    })
}
