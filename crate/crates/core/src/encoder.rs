//! Pre-norm transformer encoder over per-segment video tokens.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{linear, Bound, ParamId, ParamStore, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Token features of one video plus the time span each token covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoFeatures {
    pub video_id: String,
    /// `L × D` token matrix.
    pub tokens: Tensor,
    /// Half-open `(start_sec, end_sec)` per token.
    pub spans: Vec<(f64, f64)>,
}

impl VideoFeatures {
    pub fn new(video_id: impl Into<String>, tokens: Tensor, spans: Vec<(f64, f64)>) -> Result<Self> {
        let v = Self {
            video_id: video_id.into(),
            tokens,
            spans,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.tokens.is_matrix() {
            return Err(Error::Contract("video tokens must be a matrix".into()));
        }
        if self.tokens.rows() != self.spans.len() {
            return Err(Error::Contract(format!(
                "{} tokens but {} spans",
                self.tokens.rows(),
                self.spans.len()
            )));
        }
        for (i, &(s, e)) in self.spans.iter().enumerate() {
            if !(s < e) {
                return Err(Error::Contract(format!("span {i} [{s}, {e}) is empty")));
            }
            if i > 0 && self.spans[i - 1].1 > s {
                return Err(Error::Contract(format!("span {i} overlaps its predecessor")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    pub fn duration(&self) -> f64 {
        self.spans.last().map_or(0.0, |s| s.1)
    }

    pub fn centers(&self) -> Vec<f64> {
        self.spans.iter().map(|(s, e)| 0.5 * (s + e)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub d_v: usize,
    pub d_ff: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub position_encoding: bool,
}

fn default_true() -> bool {
    true
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            heads: 2,
            d_v: 64,
            d_ff: 128,
            seed: 0,
            position_encoding: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("encoder depth must be at least 1".into()));
        }
        if self.heads == 0 || !self.d_v.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_v {} not divisible by {} heads",
                self.d_v, self.heads
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("d_ff must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_v / self.heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub w_ff1: ParamId,
    pub b_ff1: ParamId,
    pub w_ff2: ParamId,
    pub b_ff2: ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    /// Registers encoder weights in `store`, drawn deterministically from `cfg.seed`.
    pub fn init(cfg: &EncoderConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_v;
        let layers = (0..cfg.depth)
            .map(|l| {
                let p = |n: &str| format!("encoder.{l}.{n}");
                LayerParams {
                    w_q: store.add_weight(p("w_q"), d, d, &mut rng),
                    w_k: store.add_weight(p("w_k"), d, d, &mut rng),
                    w_v: store.add_weight(p("w_v"), d, d, &mut rng),
                    w_o: store.add_weight(p("w_o"), d, d, &mut rng),
                    b_o: store.add_bias(p("b_o"), d),
                    w_ff1: store.add_weight(p("w_ff1"), cfg.d_ff, d, &mut rng),
                    b_ff1: store.add_bias(p("b_ff1"), cfg.d_ff),
                    w_ff2: store.add_weight(p("w_ff2"), d, cfg.d_ff, &mut rng),
                    b_ff2: store.add_bias(p("b_ff2"), d),
                }
            })
            .collect();
        Ok(Self { layers })
    }
}

/// Fresh store holding only encoder parameters.
pub fn init_params(cfg: &EncoderConfig) -> Result<(ParamStore, EncoderParams)> {
    let mut store = ParamStore::new();
    let params = EncoderParams::init(cfg, &mut store)?;
    Ok((store, params))
}

/// Sinusoidal position table, `L × d`.
pub fn position_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(len, d, data).expect("position table shape")
}

/// Self-attention weights captured during a forward pass, one `L × L`
/// matrix per (layer, head).
#[derive(Debug, Clone, Default)]
pub struct EncoderTrace {
    pub attention: Vec<Vec<Tensor>>,
}

/// Runs the encoder on the tape. `hook` is called with the token
/// representation after each layer and may replace it; this is where
/// guidance is fused at a configurable depth.
pub fn encode_on_tape<'t>(
    tape: &'t Tape,
    input: &VideoFeatures,
    cfg: &EncoderConfig,
    params: &EncoderParams,
    bound: &Bound<'t>,
    mut hook: impl FnMut(usize, Var<'t>) -> Result<Var<'t>>,
    mut trace: Option<&mut EncoderTrace>,
) -> Result<Var<'t>> {
    cfg.validate()?;
    if input.width() != cfg.d_v {
        return Err(Error::Config(format!(
            "input width {} does not match d_v {}",
            input.width(),
            cfg.d_v
        )));
    }
    let mut x = tape.constant(&input.tokens);
    if cfg.position_encoding {
        x = x.add(tape.constant_owned(position_encoding(input.len(), cfg.d_v)))?;
    }
    for (l, layer) in params.layers.iter().enumerate() {
        let (attn, weights) = self_attention(x.layer_norm_rows(LN_EPS), cfg, layer, bound)?;
        if let Some(t) = trace.as_deref_mut() {
            t.attention.push(weights);
        }
        x = x.add(attn)?;

        let h = linear(x.layer_norm_rows(LN_EPS), bound[layer.w_ff1], Some(bound[layer.b_ff1]))?;
        let h = h.mul(h.sigmoid())?; // SiLU
        x = x.add(linear(h, bound[layer.w_ff2], Some(bound[layer.b_ff2]))?)?;
        x = hook(l, x)?;
    }
    Ok(x)
}

fn self_attention<'t>(
    x: Var<'t>,
    cfg: &EncoderConfig,
    layer: &LayerParams,
    bound: &Bound<'t>,
) -> Result<(Var<'t>, Vec<Tensor>)> {
    let q = linear(x, bound[layer.w_q], None)?;
    let k = linear(x, bound[layer.w_k], None)?;
    let v = linear(x, bound[layer.w_v], None)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = q.slice_cols(h * dh, dh)?;
        let kh = k.slice_cols(h * dh, dh)?;
        let vh = v.slice_cols(h * dh, dh)?;
        let a = qh.matmul(kh.t())?.scale(scale).softmax_rows();
        weights.push((*a.value()).clone());
        heads.push(a.matmul(vh)?);
    }
    let o = x.tape().concat_cols(&heads)?;
    Ok((linear(o, bound[layer.w_o], Some(bound[layer.b_o]))?, weights))
}

/// Value-level encoding: same `L`, spans and width as the input.
pub fn encode(
    input: &VideoFeatures,
    cfg: &EncoderConfig,
    store: &ParamStore,
    params: &EncoderParams,
) -> Result<VideoFeatures> {
    encode_traced(input, cfg, store, params).map(|(v, _)| v)
}

pub fn encode_traced(
    input: &VideoFeatures,
    cfg: &EncoderConfig,
    store: &ParamStore,
    params: &EncoderParams,
) -> Result<(VideoFeatures, EncoderTrace)> {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let mut trace = EncoderTrace::default();
    let out = encode_on_tape(&tape, input, cfg, params, &bound, |_, x| Ok(x), Some(&mut trace))?;
    let tokens = (*out.value()).clone();
    Ok((
        VideoFeatures {
            video_id: input.video_id.clone(),
            tokens,
            spans: input.spans.clone(),
        },
        trace,
    ))
}
