//! Synthetic untrimmed videos with class-signal tokens and oracle guidance.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::io::{atomic_write, read_json, write_json};
use super::model::Sample;
use crate::encoder::VideoFeatures;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::parallel::{self, Execution};
use crate::prompt_oracle::{build_bundle, ClipPolicy, EmbeddingOracle, EventScript, PromptBundle, ScriptEvent};

const MAX_PACKING_ATTEMPTS: usize = 100;

/// Generator parameters. Durations and event lengths are whole seconds and
/// every token covers one second. Missing JSON fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_videos: usize,
    pub num_classes: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub min_events: usize,
    pub max_events: usize,
    pub min_event_len: usize,
    pub max_event_len: usize,
    /// Minimum background seconds between consecutive events.
    pub min_gap: usize,
    pub noise_sigma: f64,
    pub template_scale: f64,
    /// Probability that an event has the video's dominant class.
    pub dominant_prob: f64,
    pub d_in: usize,
    pub d_p: usize,
    pub val_fraction: f64,
    pub clip: ClipPolicy,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_videos: 20,
            num_classes: 5,
            min_duration: 16,
            max_duration: 24,
            min_events: 1,
            max_events: 4,
            min_event_len: 2,
            max_event_len: 6,
            min_gap: 1,
            noise_sigma: 0.5,
            template_scale: 1.0,
            dominant_prob: 0.7,
            d_in: 16,
            d_p: 16,
            val_fraction: 0.0,
            clip: ClipPolicy::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 {
            return bad("dataset needs at least one action class".into());
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return bad(format!(
                "duration range [{}, {}] invalid",
                self.min_duration, self.max_duration
            ));
        }
        if self.min_events > self.max_events || self.max_events == 0 {
            return bad("event count range invalid".into());
        }
        if self.min_event_len == 0 || self.min_event_len > self.max_event_len {
            return bad("event length range invalid".into());
        }
        if !(self.noise_sigma >= 0.0) || !(self.template_scale > 0.0) {
            return bad("noise_sigma must be >= 0 and template_scale > 0".into());
        }
        if !(0.0..=1.0).contains(&self.dominant_prob) || !(0.0..1.0).contains(&self.val_fraction) {
            return bad("dominant_prob must be in [0, 1] and val_fraction in [0, 1)".into());
        }
        if self.d_in == 0 || self.d_p == 0 {
            return bad("feature widths must be positive".into());
        }
        Ok(())
    }

    pub fn num_val(&self) -> usize {
        (self.num_videos as f64 * self.val_fraction).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub features: VideoFeatures,
    pub script: EventScript,
    pub bundle: PromptBundle,
    pub split: Split,
}

impl Video {
    pub fn sample(&self) -> Sample<'_> {
        Sample {
            features: &self.features,
            script: &self.script,
            bundle: &self.bundle,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub videos: Vec<Video>,
}

impl SyntheticDataset {
    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn split(&self, split: Split) -> Vec<&Video> {
        self.videos.iter().filter(|v| v.split == split).collect()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.videos.len())
            .filter(|&i| self.videos[i].split == split)
            .collect()
    }
}

/// Per-class template vectors, `C + 1` rows with row 0 unused (background
/// tokens carry noise only).
pub fn class_templates(spec: &DatasetSpec, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..=spec.num_classes)
        .map(|_| {
            (0..spec.d_in)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    spec.template_scale * z
                })
                .collect()
        })
        .collect()
}

fn sample_events(spec: &DatasetSpec, duration: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>> {
    for _ in 0..MAX_PACKING_ATTEMPTS {
        let k = rng.random_range(spec.min_events..=spec.max_events);
        let lens: Vec<usize> = (0..k)
            .map(|_| rng.random_range(spec.min_event_len..=spec.max_event_len))
            .collect();
        let needed = lens.iter().sum::<usize>() + spec.min_gap * k.saturating_sub(1);
        if needed > duration {
            continue;
        }
        // Spread the spare seconds over the k + 1 gaps.
        let slack = duration - needed;
        let mut cuts: Vec<usize> = (0..k).map(|_| rng.random_range(0..=slack)).collect();
        cuts.sort_unstable();
        let mut events = Vec::with_capacity(k);
        let mut t = 0;
        let mut prev_cut = 0;
        for (i, (&len, &cut)) in lens.iter().zip(&cuts).enumerate() {
            t += cut - prev_cut + if i > 0 { spec.min_gap } else { 0 };
            prev_cut = cut;
            events.push((t, t + len));
            t += len;
        }
        return Ok(events);
    }
    Err(Error::Generation(format!(
        "could not pack {}..={} events of {}..={} s into {duration} s",
        spec.min_events, spec.max_events, spec.min_event_len, spec.max_event_len
    )))
}

fn generate_video(
    spec: &DatasetSpec,
    seed: u64,
    index: usize,
    templates: &[Vec<f64>],
    oracle: &EmbeddingOracle,
) -> Result<Video> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let duration = rng.random_range(spec.min_duration..=spec.max_duration);
    let spans = sample_events(spec, duration, &mut rng)?;
    let dominant = rng.random_range(1..=spec.num_classes);
    let events: Vec<ScriptEvent> = spans
        .iter()
        .map(|&(s, e)| {
            let class_id = if spec.num_classes == 1 || rng.random_bool(spec.dominant_prob) {
                dominant
            } else {
                // Uniform over the other classes.
                let c = rng.random_range(1..spec.num_classes);
                if c >= dominant {
                    c + 1
                } else {
                    c
                }
            };
            ScriptEvent {
                class_id,
                start: s as f64,
                end: e as f64,
            }
        })
        .collect();

    let mut data = Vec::with_capacity(duration * spec.d_in);
    for t in 0..duration {
        let class = events
            .iter()
            .find(|e| e.start <= t as f64 && (t as f64) < e.end)
            .map(|e| e.class_id);
        for j in 0..spec.d_in {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let signal = class.map_or(0.0, |c| templates[c][j]);
            data.push(signal + spec.noise_sigma * noise);
        }
    }
    let video_id = format!("vid_{index:04}");
    let features = VideoFeatures::new(
        video_id.clone(),
        Tensor::matrix(duration, spec.d_in, data)?,
        (0..duration).map(|t| (t as f64, t as f64 + 1.0)).collect(),
    )?;
    let script = EventScript {
        video_id,
        duration_sec: duration as f64,
        global_label: dominant,
        events,
    };
    script.validate()?;
    let bundle = build_bundle(&script, spec.clip, oracle)?;
    let split = if index >= spec.num_videos - spec.num_val() {
        Split::Val
    } else {
        Split::Train
    };
    Ok(Video {
        features,
        script,
        bundle,
        split,
    })
}

/// Deterministic in `seed`; videos are generated independently and may be
/// scheduled in parallel without changing the result.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<SyntheticDataset> {
    generate_dataset_with(Execution::default(), spec, seed)
}

pub fn generate_dataset_with(exec: Execution, spec: &DatasetSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let templates = class_templates(spec, seed);
    let oracle = EmbeddingOracle::new(spec.num_classes + 1, spec.d_p, seed)?;
    let videos = parallel::map_range(exec, spec.num_videos, |i| {
        generate_video(spec, seed, i, &templates, &oracle)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticDataset {
        spec: spec.clone(),
        seed,
        videos,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub video_id: String,
    pub split: Split,
    pub num_tokens: usize,
    pub duration_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub num_classes: usize,
    pub vocab_size: usize,
    pub d_in: usize,
    pub d_p: usize,
    pub seed: u64,
    pub spec: DatasetSpec,
    pub videos: Vec<ManifestEntry>,
}

fn encode_features(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode_features(bytes: &[u8], rows: usize, cols: usize, path: &Path) -> Result<Tensor> {
    if bytes.len() != rows * cols * 8 {
        return Err(Error::Contract(format!(
            "{}: expected {} bytes for {rows}x{cols}, found {}",
            path.display(),
            rows * cols * 8,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::matrix(rows, cols, data)
}

impl SyntheticDataset {
    /// Writes `manifest.json` plus `videos/<id>/{features.f32, script.json,
    /// bundle.json}`. Features are little-endian f64, row-major.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = Manifest {
            num_classes: self.spec.num_classes,
            vocab_size: self.spec.num_classes + 1,
            d_in: self.spec.d_in,
            d_p: self.spec.d_p,
            seed: self.seed,
            spec: self.spec.clone(),
            videos: self
                .videos
                .iter()
                .map(|v| ManifestEntry {
                    video_id: v.script.video_id.clone(),
                    split: v.split,
                    num_tokens: v.features.len(),
                    duration_sec: v.script.duration_sec,
                })
                .collect(),
        };
        for v in &self.videos {
            let vdir = dir.join("videos").join(&v.script.video_id);
            fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
            atomic_write(&vdir.join("features.f32"), &encode_features(&v.features.tokens))?;
            write_json(&vdir.join("script.json"), &v.script)?;
            write_json(&vdir.join("bundle.json"), &v.bundle)?;
        }
        write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
        manifest.spec.validate()?;
        let mut videos = Vec::with_capacity(manifest.videos.len());
        for entry in &manifest.videos {
            let vdir = dir.join("videos").join(&entry.video_id);
            let fpath = vdir.join("features.f32");
            let bytes = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
            let tokens = decode_features(&bytes, entry.num_tokens, manifest.d_in, &fpath)?;
            let step = entry.duration_sec / entry.num_tokens as f64;
            let spans = (0..entry.num_tokens)
                .map(|t| (t as f64 * step, (t + 1) as f64 * step))
                .collect();
            let features = VideoFeatures::new(entry.video_id.clone(), tokens, spans)?;
            let script: EventScript = read_json(&vdir.join("script.json"))?;
            script.validate()?;
            let bundle: PromptBundle = read_json(&vdir.join("bundle.json"))?;
            bundle.graph.validate()?;
            videos.push(Video {
                features,
                script,
                bundle,
                split: entry.split,
            });
        }
        Ok(Self {
            spec: manifest.spec,
            seed: manifest.seed,
            videos,
        })
    }
}
