//! The full model: encoder, optional guidance, head and loss assembly.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_on_tape, EncoderConfig, EncoderParams, VideoFeatures};
use crate::error::{Error, Result};
use crate::guidance::{
    alignment_bias, calibrate, gate_fuse, refine, sub_matrix, CalibConfig, CalibParams, CalibTrace, CrossAttnParams,
    GateParams,
};
use crate::head::{
    decode, head_forward, token_predictions, token_targets, ActionInstance, DecodeConfig, HeadParams, HeadVars,
};
use crate::losses::{loss_cal, loss_cls, loss_reg, loss_sem, match_events, total_loss, LossParts, LossWeights};
use crate::numerics::{linear, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::prompt_oracle::{EventScript, PromptBundle};

/// Which guidance paths are active.
///
/// With `advanced_fusion` off, enabled prompts are concatenated to the
/// token features in front of the head: the global embedding for `gep`, the
/// best-overlapping clip embedding for `tsep`. With it on, `gep` uses the
/// gated fusion and `tsep` the cross-attention refinement. The contrastive
/// term needs `tsep` and the calibration term needs `calibrate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    pub gep: bool,
    pub tsep: bool,
    pub calibrate: bool,
    pub advanced_fusion: bool,
}

impl Toggles {
    pub const BASELINE: Self = Self::new(false, false, false, false);
    pub const PLUS_GEP: Self = Self::new(true, false, false, false);
    pub const PLUS_TSEP: Self = Self::new(false, true, false, false);
    pub const SIMPLE_FUSION: Self = Self::new(true, true, false, false);
    pub const FULL: Self = Self::new(true, true, true, true);

    const fn new(gep: bool, tsep: bool, calibrate: bool, advanced_fusion: bool) -> Self {
        Self {
            gep,
            tsep,
            calibrate,
            advanced_fusion,
        }
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub d_p: usize,
    /// Encoder layer (0-based) after which gated global fusion is applied;
    /// defaults to the last.
    #[serde(default)]
    pub fusion_layer: Option<usize>,
    #[serde(default)]
    pub calib: CalibConfig,
    /// Restrict sub-event cross-attention to clips overlapping each token.
    #[serde(default = "default_true")]
    pub aligned_refine: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig {
                depth: 2,
                heads: 2,
                d_v: 16,
                d_ff: 32,
                seed: 0,
                position_encoding: true,
            },
            d_p: 16,
            fusion_layer: None,
            calib: CalibConfig::default(),
            aligned_refine: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.d_p == 0 {
            return Err(Error::Config("d_p must be positive".into()));
        }
        if let Some(l) = self.fusion_layer {
            if l >= self.encoder.depth {
                return Err(Error::Config(format!(
                    "fusion_layer {l} beyond encoder depth {}",
                    self.encoder.depth
                )));
            }
        }
        if !(self.calib.gamma >= 0.0) {
            return Err(Error::Config("calibration gamma must be non-negative".into()));
        }
        Ok(())
    }

    fn fusion_layer(&self) -> usize {
        self.fusion_layer.unwrap_or(self.encoder.depth - 1)
    }
}

/// Borrowed view of one training or evaluation example.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub features: &'a VideoFeatures,
    pub script: &'a EventScript,
    pub bundle: &'a PromptBundle,
}

/// Candidate embeddings shared by a batch for the contrastive term, with
/// each video's per-token positive index.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    pub matrix: Option<Tensor>,
    pub positives: Vec<Vec<usize>>,
}

/// Union of the batch's clip embeddings with exact duplicates removed.
/// Each token's positive is its maximally overlapping clip. `matrix` is
/// `None` when fewer than two distinct embeddings exist, since the
/// contrastive term then has no negative.
pub fn batch_candidates(samples: &[Sample<'_>]) -> Result<Candidates> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut positives = Vec::with_capacity(samples.len());
    for s in samples {
        let ids: Vec<usize> = s
            .bundle
            .subs
            .iter()
            .map(|sub| {
                let key: Vec<u64> = sub.embedding.data().iter().map(|v| v.to_bits()).collect();
                *index.entry(key).or_insert_with(|| {
                    rows.push(sub.embedding.data().to_vec());
                    rows.len() - 1
                })
            })
            .collect();
        positives.push(
            s.features
                .spans
                .iter()
                .map(|&span| ids[s.bundle.best_clip(span)])
                .collect(),
        );
    }
    let matrix = if rows.len() >= 2 {
        Some(Tensor::from_rows(&rows)?)
    } else {
        None
    };
    Ok(Candidates { matrix, positives })
}

/// Per-token embedding of the clip overlapping the token the most,
/// `L × D_P`.
fn aligned_subs(spans: &[(f64, f64)], bundle: &PromptBundle) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = spans
        .iter()
        .map(|&s| bundle.subs[bundle.best_clip(s)].embedding.data().to_vec())
        .collect();
    Tensor::from_rows(&rows)
}

/// Forward-pass values for one video.
pub struct Forward<'t> {
    /// Guided token features `L × D_V`.
    pub features: Var<'t>,
    pub head: HeadVars<'t>,
    pub calib: Option<CalibTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ecvt {
    pub config: ModelConfig,
    pub toggles: Toggles,
    pub num_classes: usize,
    pub encoder: EncoderParams,
    pub gate: Option<GateParams>,
    pub cross: Option<CrossAttnParams>,
    pub calib: Option<CalibParams>,
    pub w_sem: Option<ParamId>,
    pub head: HeadParams,
}

impl Ecvt {
    /// Registers only the parameters the toggles use. Encoder weights come
    /// from `config.encoder.seed`, the rest from a stream derived from it.
    pub fn init(config: &ModelConfig, toggles: Toggles, num_classes: usize) -> Result<(Self, ParamStore)> {
        config.validate()?;
        if num_classes == 0 {
            return Err(Error::Config("model needs at least one action class".into()));
        }
        let mut store = ParamStore::new();
        let encoder = EncoderParams::init(&config.encoder, &mut store)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.encoder.seed);
        rng.set_stream(1);
        let (d_v, d_p) = (config.encoder.d_v, config.d_p);
        let advanced = toggles.advanced_fusion;
        let gate = (toggles.gep && advanced).then(|| GateParams::init(&mut store, d_v, d_p, &mut rng));
        let cross = (toggles.tsep && advanced).then(|| CrossAttnParams::init(&mut store, d_v, d_p, &mut rng));
        let calib = toggles
            .calibrate
            .then(|| CalibParams::init(&mut store, d_v, d_p, &mut rng));
        let w_sem = toggles.tsep.then(|| store.add_weight("sem.w", d_p, d_v, &mut rng));
        let mut d_head = d_v;
        if !advanced {
            d_head += d_p * (toggles.gep as usize + toggles.tsep as usize);
        }
        let head = HeadParams::init(&mut store, d_head, num_classes, &mut rng);
        Ok((
            Self {
                config: config.clone(),
                toggles,
                num_classes,
                encoder,
                gate,
                cross,
                calib,
                w_sem,
                head,
            },
            store,
        ))
    }

    pub fn forward<'t>(&self, tape: &'t Tape, bound: &Bound<'t>, sample: Sample<'_>) -> Result<Forward<'t>> {
        let f = sample.features;
        let bundle = sample.bundle;
        if bundle.d_p() != self.config.d_p {
            return Err(Error::Config(format!(
                "prompt width {} does not match d_p {}",
                bundle.d_p(),
                self.config.d_p
            )));
        }
        let fusion_layer = self.config.fusion_layer();
        let p_global = tape.constant(&bundle.p_global);
        let mut x = encode_on_tape(
            tape,
            f,
            &self.config.encoder,
            &self.encoder,
            bound,
            |layer, x| match &self.gate {
                Some(gate) if layer == fusion_layer => gate_fuse(x, p_global, gate, bound),
                _ => Ok(x),
            },
            None,
        )?;
        if let Some(cross) = &self.cross {
            let bias = if self.config.aligned_refine {
                Some(alignment_bias(&f.spans, &bundle.clip_spans())?)
            } else {
                None
            };
            x = refine(x, sub_matrix(tape, &bundle.subs)?, bias.as_ref(), cross, bound)?;
        }
        let mut calib_trace = None;
        if let Some(calib) = &self.calib {
            let (y, trace) = calibrate(x, &bundle.graph, &f.spans, calib, &self.config.calib, bound)?;
            x = y;
            calib_trace = Some(trace);
        }

        let mut head_in = vec![x];
        if !self.toggles.advanced_fusion {
            if self.toggles.gep {
                let ones = tape.constant_owned(Tensor::filled(&[f.len(), 1], 1.0));
                head_in.push(ones.matmul(p_global)?);
            }
            if self.toggles.tsep {
                head_in.push(tape.constant_owned(aligned_subs(&f.spans, bundle)?));
            }
        }
        let h = if head_in.len() == 1 {
            x
        } else {
            tape.concat_cols(&head_in)?
        };
        let head = head_forward(h, &f.spans, &self.head, bound)?;
        Ok(Forward {
            features: x,
            head,
            calib: calib_trace,
        })
    }

    /// The four loss terms; inactive terms are constant zeros.
    pub fn losses<'t>(
        &self,
        fwd: &Forward<'t>,
        bound: &Bound<'t>,
        sample: Sample<'_>,
        candidates: Option<&Tensor>,
        positives: &[usize],
        weights: &LossWeights,
    ) -> Result<LossParts<'t>> {
        let tape = fwd.features.tape();
        let zero = || tape.constant_owned(Tensor::scalar(0.0));
        let targets = token_targets(&sample.features.spans, &sample.script.events);
        let cls = loss_cls(fwd.head.logits, &targets.classes)?;
        let reg = loss_reg(fwd.head.bounds, &targets.intervals)?;
        let sem = match (self.w_sem, candidates) {
            (Some(w), Some(c)) => {
                let projected = linear(fwd.features, bound[w], None)?;
                loss_sem(projected, c, positives, weights.tau)?
            }
            _ => zero(),
        };
        let cal = if self.calib.is_some() {
            let classes: Vec<usize> = token_predictions(&fwd.head.logits.value())
                .into_iter()
                .map(|(c, _)| c)
                .collect();
            let matches = match_events(&sample.bundle.graph, &classes, &fwd.head.bounds.value());
            loss_cal(fwd.head.bounds, &matches, &sample.bundle.graph, weights.cal_form)?
        } else {
            zero()
        };
        Ok(LossParts { cls, reg, sem, cal })
    }

    /// Builds the whole objective for one video of a batch.
    pub fn objective<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        sample: Sample<'_>,
        candidates: Option<&Tensor>,
        positives: &[usize],
        weights: &LossWeights,
    ) -> Result<(Var<'t>, LossParts<'t>)> {
        let fwd = self.forward(tape, bound, sample)?;
        let parts = self.losses(&fwd, bound, sample, candidates, positives, weights)?;
        Ok((total_loss(&parts, weights)?, parts))
    }

    pub fn predict(&self, store: &ParamStore, sample: Sample<'_>, cfg: &DecodeConfig) -> Result<Vec<ActionInstance>> {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let fwd = self.forward(&tape, &bound, sample)?;
        decode(
            &fwd.head.to_output(),
            &sample.features.spans,
            sample.script.duration_sec,
            cfg,
        )
    }
}
