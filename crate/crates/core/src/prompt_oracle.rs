//! Deterministic stand-in for prompting a vision-language model.
//!
//! From a ground-truth [`EventScript`] this module derives the three pieces
//! of semantic guidance the model consumes: a whole-video embedding, one
//! embedding per temporal clip, and an [`EventGraph`] whose nodes carry
//! temporal anchors. Embeddings come from a seeded class-conditioned table in
//! place of a text encoder, so all guidance is reproducible.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Reserved class id for action-free content.
pub const BACKGROUND: usize = 0;

/// Pairwise |cosine| bound enforced between class embeddings.
pub const MAX_CLASS_COSINE: f64 = 0.5;

const MAX_REJECTIONS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEvent {
    pub class_id: usize,
    pub start: f64,
    pub end: f64,
}

impl ScriptEvent {
    pub fn span(&self) -> (f64, f64) {
        (self.start, self.end)
    }
}

/// Structured description of what happens in a video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventScript {
    pub video_id: String,
    pub duration_sec: f64,
    pub global_label: usize,
    pub events: Vec<ScriptEvent>,
}

impl EventScript {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_sec > 0.0) || !self.duration_sec.is_finite() {
            return Err(Error::Contract(format!(
                "script {}: duration {} must be positive",
                self.video_id, self.duration_sec
            )));
        }
        for (i, e) in self.events.iter().enumerate() {
            if !(e.start < e.end) || e.start < 0.0 || e.end > self.duration_sec {
                return Err(Error::Contract(format!(
                    "script {}: event {i} [{}, {}) invalid for duration {}",
                    self.video_id, e.start, e.end, self.duration_sec
                )));
            }
            if i > 0 && self.events[i - 1].start > e.start {
                return Err(Error::Contract(format!(
                    "script {}: events not sorted by start",
                    self.video_id
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("event script", e))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let script: Self = serde_json::from_str(s).map_err(|e| Error::json("event script", e))?;
        script.validate()?;
        Ok(script)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipPolicy {
    pub clip_len: f64,
    pub stride: f64,
}

impl Default for ClipPolicy {
    fn default() -> Self {
        Self {
            clip_len: 4.0,
            stride: 2.0,
        }
    }
}

/// Splits `[0, duration)` into clips of `clip_len` starting every `stride`
/// seconds; the last clip is clamped to the duration.
pub fn clip_video(duration_sec: f64, clip_len: f64, stride: f64) -> Result<Vec<(f64, f64)>> {
    if !(stride > 0.0) || !(clip_len > 0.0) {
        return Err(Error::Config(format!(
            "clip_len {clip_len} and stride {stride} must be positive"
        )));
    }
    if stride > clip_len {
        return Err(Error::Config(format!(
            "stride {stride} exceeds clip_len {clip_len}; clips would leave gaps"
        )));
    }
    if !(duration_sec > 0.0) {
        return Err(Error::Config(format!("duration {duration_sec} must be positive")));
    }
    let steps = ((duration_sec - clip_len) / stride - 1e-9).ceil().max(0.0) as usize;
    Ok((0..=steps)
        .map(|k| {
            let start = k as f64 * stride;
            (start, (start + clip_len).min(duration_sec))
        })
        .collect())
}

/// Length of the intersection of two half-open intervals.
pub fn overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
}

/// Gap in seconds between two intervals, zero when they touch or overlap.
pub fn gap(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0.max(b.0) - a.1.min(b.1)).max(0.0)
}

/// Seeded class-embedding table standing in for a text encoder.
///
/// Class `k`'s vector depends only on the seed and classes `0..k`, so growing
/// the vocabulary never changes existing embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingOracle {
    d_p: usize,
    seed: u64,
    table: Vec<Tensor>,
}

impl EmbeddingOracle {
    /// Table for class ids `0..vocab_size` (id 0 is [`BACKGROUND`]).
    pub fn new(vocab_size: usize, d_p: usize, seed: u64) -> Result<Self> {
        if d_p == 0 || vocab_size == 0 {
            return Err(Error::Config("embedding oracle needs d_p > 0 and a vocabulary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table: Vec<Vec<f64>> = Vec::with_capacity(vocab_size);
        while table.len() < vocab_size {
            let mut tries = 0;
            let v = loop {
                let mut v: Vec<f64> = (0..d_p).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= norm);
                let ok = table.iter().all(|u| {
                    let cos: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                    cos.abs() < MAX_CLASS_COSINE
                });
                if ok {
                    break v;
                }
                tries += 1;
                if tries > MAX_REJECTIONS {
                    return Err(Error::Config(format!(
                        "cannot place {vocab_size} class embeddings in {d_p} dimensions"
                    )));
                }
            };
            table.push(v);
        }
        Ok(Self {
            d_p,
            seed,
            table: table
                .into_iter()
                .map(|v| Tensor::row(v).expect("embedding row"))
                .collect(),
        })
    }

    pub fn d_p(&self) -> usize {
        self.d_p
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vocab_size(&self) -> usize {
        self.table.len()
    }

    /// Unit-norm embedding for `class_id`. The clip context is accepted for
    /// interface parity with a real text encoder and does not affect the
    /// result.
    pub fn embed(&self, class_id: usize, _context: Option<(f64, f64)>) -> Result<Tensor> {
        self.table.get(class_id).cloned().ok_or(Error::Vocabulary {
            class_id,
            vocab_size: self.table.len(),
        })
    }
}

/// One-shot form of [`EmbeddingOracle::embed`].
pub fn embed_event(
    class_id: usize,
    context: Option<(f64, f64)>,
    vocab_size: usize,
    d_p: usize,
    seed: u64,
) -> Result<Tensor> {
    EmbeddingOracle::new(vocab_size, d_p, seed)?.embed(class_id, context)
}

mod embedding_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::numerics::Tensor;

    pub fn serialize<S: Serializer>(t: &Tensor, s: S) -> Result<S::Ok, S::Error> {
        t.data().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Tensor, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        Tensor::row(v).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubEvent {
    #[serde(with = "embedding_serde")]
    pub embedding: Tensor,
    pub clip_span: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NodeKind {
    Global,
    Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphNode {
    pub node_id: usize,
    pub kind: NodeKind,
    pub class_id: usize,
    pub anchor: (f64, f64),
    #[serde(with = "embedding_serde")]
    pub embedding: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Relation {
    Before,
    PartOf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub relation: Relation,
}

/// Directed acyclic graph over the global event and its sub-events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<Edge>,
}

impl EventGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Position of the node with `node_id`.
    pub fn index_of(&self, node_id: usize) -> Option<usize> {
        self.nodes.iter().position(|n| n.node_id == node_id)
    }

    pub fn global_index(&self) -> Option<usize> {
        self.nodes.iter().position(|n| n.kind == NodeKind::Global)
    }

    /// Sub-event nodes (everything except the global node), in node order.
    pub fn event_nodes(&self) -> impl Iterator<Item = (usize, &GraphNode)> {
        self.nodes.iter().enumerate().filter(|(_, n)| n.kind == NodeKind::Event)
    }

    /// `adjacency[a][b]` is true when an edge joins `a` and `b` in either
    /// direction (node positions, not ids).
    pub fn undirected_adjacency(&self) -> Result<Vec<Vec<bool>>> {
        let n = self.nodes.len();
        let mut adj = vec![vec![false; n]; n];
        for e in &self.edges {
            let (a, b) = self.edge_endpoints(e)?;
            adj[a][b] = true;
            adj[b][a] = true;
        }
        Ok(adj)
    }

    fn edge_endpoints(&self, e: &Edge) -> Result<(usize, usize)> {
        let find = |id| {
            self.index_of(id)
                .ok_or_else(|| Error::Contract(format!("edge references unknown node {id}")))
        };
        Ok((find(e.src)?, find(e.dst)?))
    }

    pub fn is_acyclic(&self) -> Result<bool> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
        for e in &self.edges {
            let (a, b) = self.edge_endpoints(e)?;
            out[a].push(b);
            indegree[b] += 1;
        }
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut seen = 0;
        while let Some(i) = queue.pop_front() {
            seen += 1;
            for &j in &out[i] {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    queue.push_back(j);
                }
            }
        }
        Ok(seen == n)
    }

    pub fn validate(&self) -> Result<()> {
        let globals = self.nodes.iter().filter(|n| n.kind == NodeKind::Global).count();
        if globals != 1 {
            return Err(Error::Contract(format!(
                "event graph needs exactly one global node, found {globals}"
            )));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !(n.anchor.0 < n.anchor.1) {
                return Err(Error::Contract(format!("node {} has an empty anchor", n.node_id)));
            }
            if self.nodes[..i].iter().any(|m| m.node_id == n.node_id) {
                return Err(Error::Contract(format!("duplicate node id {}", n.node_id)));
            }
        }
        let global = self.global_index().expect("checked above");
        for e in &self.edges {
            let (a, b) = self.edge_endpoints(e)?;
            match e.relation {
                Relation::Before => {
                    if self.nodes[a].anchor.1 > self.nodes[b].anchor.0 {
                        return Err(Error::Contract(format!(
                            "BEFORE edge {} -> {} between overlapping anchors",
                            e.src, e.dst
                        )));
                    }
                }
                Relation::PartOf => {
                    if b != global {
                        return Err(Error::Contract(format!(
                            "PART_OF edge {} -> {} does not target the global node",
                            e.src, e.dst
                        )));
                    }
                }
            }
        }
        for (i, n) in self.event_nodes() {
            let linked = self
                .edges
                .iter()
                .any(|e| e.relation == Relation::PartOf && e.src == n.node_id && self.index_of(e.dst) == Some(global));
            if !linked {
                return Err(Error::Contract(format!(
                    "event node at position {i} lacks a PART_OF edge"
                )));
            }
        }
        if !self.is_acyclic()? {
            return Err(Error::Contract("event graph contains a cycle".into()));
        }
        Ok(())
    }
}

/// All semantic guidance derived for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptBundle {
    #[serde(with = "embedding_serde")]
    pub p_global: Tensor,
    pub subs: Vec<SubEvent>,
    pub graph: EventGraph,
}

impl PromptBundle {
    pub fn d_p(&self) -> usize {
        self.p_global.len()
    }

    pub fn clip_spans(&self) -> Vec<(f64, f64)> {
        self.subs.iter().map(|s| s.clip_span).collect()
    }

    /// Index of the clip overlapping `span` the most (earliest on ties).
    pub fn best_clip(&self, span: (f64, f64)) -> usize {
        let mut best = 0;
        let mut best_ov = f64::NEG_INFINITY;
        for (j, s) in self.subs.iter().enumerate() {
            let ov = overlap(span, s.clip_span);
            if ov > best_ov {
                best_ov = ov;
                best = j;
            }
        }
        best
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::json("prompt bundle", e))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let b: Self = serde_json::from_str(s).map_err(|e| Error::json("prompt bundle", e))?;
        b.graph.validate()?;
        Ok(b)
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Derives global, per-clip and graph guidance from a script.
pub fn build_bundle(script: &EventScript, policy: ClipPolicy, oracle: &EmbeddingOracle) -> Result<PromptBundle> {
    script.validate()?;
    let p_global = oracle.embed(script.global_label, None)?;
    let event_embeddings = script
        .events
        .iter()
        .map(|e| oracle.embed(e.class_id, Some(e.span())))
        .collect::<Result<Vec<_>>>()?;

    let clips = clip_video(script.duration_sec, policy.clip_len, policy.stride)?;
    let mut subs = Vec::with_capacity(clips.len());
    for &clip in &clips {
        let mut acc = vec![0.0; oracle.d_p()];
        let mut any = false;
        for (e, emb) in script.events.iter().zip(&event_embeddings) {
            let w = overlap(clip, e.span());
            if w > 0.0 {
                any = true;
                acc.iter_mut().zip(emb.data()).for_each(|(a, x)| *a += w * x);
            }
        }
        let embedding = if any {
            Tensor::row(normalize(acc))?
        } else {
            oracle.embed(BACKGROUND, Some(clip))?
        };
        subs.push(SubEvent {
            embedding,
            clip_span: clip,
        });
    }

    let mut nodes = vec![GraphNode {
        node_id: 0,
        kind: NodeKind::Global,
        class_id: script.global_label,
        anchor: (0.0, script.duration_sec),
        embedding: p_global.clone(),
    }];
    let mut edges = Vec::new();
    for (i, (e, emb)) in script.events.iter().zip(event_embeddings).enumerate() {
        let id = i + 1;
        nodes.push(GraphNode {
            node_id: id,
            kind: NodeKind::Event,
            class_id: e.class_id,
            anchor: e.span(),
            embedding: emb,
        });
        edges.push(Edge {
            src: id,
            dst: 0,
            relation: Relation::PartOf,
        });
        if let Some(next) = script.events.get(i + 1) {
            if e.end <= next.start {
                edges.push(Edge {
                    src: id,
                    dst: id + 1,
                    relation: Relation::Before,
                });
            }
        }
    }
    let graph = EventGraph { nodes, edges };
    graph.validate()?;
    Ok(PromptBundle { p_global, subs, graph })
}
