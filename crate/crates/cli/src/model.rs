//! Model files: structure lines, named parameter matrices and an optional
//! training block.

use crate::error::{CliError, Result};
use crate::text::{fmt_float, parse_float, write_matrix, LineReader};
use sha2::{Digest, Sha256};
use slotset_core::training::{CentroidTask, TrainConfig};
use slotset_core::{Activation, AggMode, DeepSets, DenseLayer, EncoderKind, EncoderStack, LayerNormParams, LinearMap, Matrix, SetEncoder, SlotConfig, SoftmaxPool, SseParams, StackLayer};
use std::collections::HashMap;
use std::path::Path;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Task and optimizer settings used by `train`, `eval` and `sweep`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSection {
    pub task: CentroidTask,
    pub config: TrainConfig,
}

impl TrainSection {
    /// Defaults for a model whose sets have `d` columns.
    pub fn defaults(d: usize) -> Self {
        Self {
            task: CentroidTask {
                way: 4,
                shot: 256,
                d,
                spread: 1.0,
                separation: 2.0,
                queries: 16,
            },
            config: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub encoder: SetEncoder<f64>,
    pub train: Option<TrainSection>,
}

fn slots_kind(c: &SlotConfig<f64>) -> &'static str {
    if c.is_random() {
        "random"
    } else {
        "deterministic"
    }
}

fn activations(layers: &[DenseLayer<f64>]) -> String {
    layers.iter().map(|l| format!(" {}", l.activation)).collect()
}

impl ModelFile {
    pub fn new(encoder: SetEncoder<f64>) -> Self {
        Self { encoder, train: None }
    }

    /// Structure and parameters, without the training block. This is what
    /// the fingerprint covers.
    pub fn encoder_text(&self) -> String {
        let mut out = format!("format_version {MODEL_FORMAT_VERSION}\nencoder_kind {}\n", self.encoder.kind());
        match &self.encoder {
            SetEncoder::Sse(stack) => {
                out.push_str(&format!("layers {}\n", stack.depth()));
                for (t, l) in stack.layers().iter().enumerate() {
                    out.push_str(&format!(
                        "layer {t} mode {} slots {} k {} eps {}\n",
                        l.mode,
                        slots_kind(&l.params.slots),
                        l.params.k(),
                        fmt_float(l.params.slot_norm.epsilon)
                    ));
                }
            }
            SetEncoder::DeepSets(ds) => {
                out.push_str(&format!("pool {}\nphi{}\nrho{}\n", ds.pool, activations(&ds.phi), activations(&ds.rho)));
            }
            SetEncoder::SoftmaxPool { combine, .. } => out.push_str(&format!("combine {combine}\n")),
        }
        for (name, m) in self.encoder.parameters() {
            out.push_str(&format!("param {name} {} {}\n", m.rows(), m.cols()));
            write_matrix(&mut out, m);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = self.encoder_text();
        if let Some(t) = &self.train {
            let c = &t.config;
            let lines = [
                ("way", t.task.way.to_string()),
                ("shot", t.task.shot.to_string()),
                ("spread", fmt_float(t.task.spread)),
                ("separation", fmt_float(t.task.separation)),
                ("queries", t.task.queries.to_string()),
                ("steps", c.steps.to_string()),
                ("subset_size", c.subset_size.to_string()),
                ("episodes_per_step", c.episodes_per_step.to_string()),
                ("eval_every", c.eval_every.to_string()),
                ("eval_episodes", c.eval_episodes.to_string()),
                ("lr", fmt_float(c.adam.lr)),
                ("beta1", fmt_float(c.adam.beta1)),
                ("beta2", fmt_float(c.adam.beta2)),
                ("adam_eps", fmt_float(c.adam.eps)),
                ("weight_decay", fmt_float(c.adam.weight_decay)),
                ("seed", c.seed.to_string()),
            ];
            for (k, v) in lines {
                out.push_str(&format!("train {k} {v}\n"));
            }
        }
        out
    }

    /// Hex SHA-256 of [`encoder_text`](Self::encoder_text).
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.encoder_text().as_bytes()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&path.display().to_string(), &text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::session::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn parse(label: &str, text: &str) -> Result<Self> {
        let mut r = LineReader::new(label, text);
        let version: u32 = r.parse_value("format_version")?;
        if version != MODEL_FORMAT_VERSION {
            return Err(r.error(1, Some(2), format!("unsupported model format version {version}")));
        }
        let (kind_line, kind) = r.expect_value("encoder_kind")?;
        let kind: EncoderKind = kind.parse().map_err(|e: slotset_core::Error| r.error(kind_line, Some(2), e.to_string()))?;
        let header = parse_header(&mut r, kind)?;
        let mut params = ParamTable::default();
        while r.peek_key() == Some("param") {
            let (line, t) = r.expect("param", 3)?;
            let rows: usize = r.parse_at(line, 3, t[1], "row count")?;
            let cols: usize = r.parse_at(line, 4, t[2], "column count")?;
            let m = r.matrix(rows, cols)?;
            if params.entries.insert(t[0].to_string(), (line, m)).is_some() {
                return Err(r.error(line, Some(2), format!("parameter `{}` appears twice", t[0])));
            }
        }
        let train = parse_train(&mut r)?;
        if !r.at_end() {
            let (line, t) = r.next_tokens()?;
            return Err(r.error(line, Some(1), format!("unexpected `{}`", t[0])));
        }
        let encoder = build(&r, header, &mut params, kind_line)?;
        if let Some((name, (line, _))) = params.entries.iter().next() {
            return Err(r.error(*line, Some(2), format!("unknown parameter `{name}`")));
        }
        encoder.validate().map_err(|e| r.error(kind_line, None, format!("inconsistent model: {e}")))?;
        let train = train.map(|(line, mut t)| {
            t.task.d = encoder.input_dim();
            t.task.validate().map_err(|e| r.error(line, None, e.to_string()))?;
            t.config.adam.validate().map_err(|e| r.error(line, None, e.to_string()))?;
            Ok::<_, CliError>(t)
        });
        Ok(Self {
            encoder,
            train: train.transpose()?,
        })
    }
}

enum Header {
    Sse(Vec<LayerHeader>),
    DeepSets { pool: AggMode, phi: Vec<Activation>, rho: Vec<Activation> },
    SoftmaxPool { combine: AggMode },
}

struct LayerHeader {
    line: usize,
    mode: AggMode,
    random: bool,
    k: usize,
    eps: f64,
}

fn parse_mode(r: &LineReader<'_>, line: usize, field: usize, tok: &str) -> Result<AggMode> {
    tok.parse().map_err(|e: slotset_core::Error| r.error(line, Some(field), e.to_string()))
}

fn parse_activations(r: &mut LineReader<'_>, key: &str) -> Result<Vec<Activation>> {
    let (line, t) = r.next_tokens()?;
    if t[0] != key {
        return Err(r.error(line, Some(1), format!("expected `{key}`, found `{}`", t[0])));
    }
    t[1..]
        .iter()
        .enumerate()
        .map(|(i, a)| a.parse().map_err(|e: slotset_core::Error| r.error(line, Some(i + 2), e.to_string())))
        .collect()
}

fn parse_header(r: &mut LineReader<'_>, kind: EncoderKind) -> Result<Header> {
    match kind {
        EncoderKind::Sse => {
            let count: usize = r.parse_value("layers")?;
            let mut layers = Vec::with_capacity(count);
            for t in 0..count {
                let (line, v) = r.expect("layer", 9)?;
                let index: usize = r.parse_at(line, 2, v[0], "layer index")?;
                if index != t {
                    return Err(r.error(line, Some(2), format!("expected layer {t}, found {index}")));
                }
                for (pos, key) in [(1, "mode"), (3, "slots"), (5, "k"), (7, "eps")] {
                    if v[pos] != key {
                        return Err(r.error(line, Some(pos + 2), format!("expected `{key}`, found `{}`", v[pos])));
                    }
                }
                let random = match v[4] {
                    "random" => true,
                    "deterministic" => false,
                    other => return Err(r.error(line, Some(6), format!("slots must be random or deterministic, found `{other}`"))),
                };
                layers.push(LayerHeader {
                    line,
                    mode: parse_mode(r, line, 4, v[2])?,
                    random,
                    k: r.parse_at(line, 8, v[6], "slot count")?,
                    eps: r.float_at(line, 10, v[8])?,
                });
            }
            Ok(Header::Sse(layers))
        }
        EncoderKind::DeepSets => {
            let (line, pool) = r.expect_value("pool")?;
            let pool = parse_mode(r, line, 2, pool)?;
            let phi = parse_activations(r, "phi")?;
            let rho = parse_activations(r, "rho")?;
            Ok(Header::DeepSets { pool, phi, rho })
        }
        EncoderKind::SoftmaxPool => {
            let (line, c) = r.expect_value("combine")?;
            Ok(Header::SoftmaxPool {
                combine: parse_mode(r, line, 2, c)?,
            })
        }
    }
}

#[derive(Default)]
struct ParamTable {
    entries: HashMap<String, (usize, Matrix<f64>)>,
}

impl ParamTable {
    fn take(&mut self, r: &LineReader<'_>, line: usize, name: &str) -> Result<Matrix<f64>> {
        self.entries.remove(name).map(|(_, m)| m).ok_or_else(|| r.error(line, None, format!("missing parameter `{name}`")))
    }

    fn linear(&mut self, r: &LineReader<'_>, line: usize, prefix: &str) -> Result<LinearMap<f64>> {
        let weight = self.take(r, line, &format!("{prefix}.weight"))?;
        let bias = self.entries.remove(&format!("{prefix}.bias")).map(|(_, m)| m);
        LinearMap::new(weight, bias).map_err(|e| r.error(line, None, e.to_string()))
    }
}

fn build(r: &LineReader<'_>, header: Header, p: &mut ParamTable, kind_line: usize) -> Result<SetEncoder<f64>> {
    let wrap = |line: usize| move |e: slotset_core::Error| r.error(line, None, e.to_string());
    Ok(match header {
        Header::Sse(layers) => {
            let mut built = Vec::with_capacity(layers.len());
            for (t, h) in layers.into_iter().enumerate() {
                let pre = format!("layer{t}");
                let slots = if h.random {
                    SlotConfig::Random {
                        k: h.k,
                        mu: p.take(r, h.line, &format!("{pre}.slot_mu"))?,
                        log_sigma: p.take(r, h.line, &format!("{pre}.slot_log_sigma"))?,
                    }
                } else {
                    SlotConfig::Deterministic {
                        slots: p.take(r, h.line, &format!("{pre}.slots"))?,
                    }
                };
                let norm = LayerNormParams::new(p.take(r, h.line, &format!("{pre}.slot_norm.gain"))?, p.take(r, h.line, &format!("{pre}.slot_norm.bias"))?, h.eps)
                    .map_err(wrap(h.line))?;
                let params = SseParams::new(
                    slots,
                    norm,
                    p.linear(r, h.line, &format!("{pre}.proj_q"))?,
                    p.linear(r, h.line, &format!("{pre}.proj_k"))?,
                    p.linear(r, h.line, &format!("{pre}.proj_v"))?,
                )
                .map_err(wrap(h.line))?;
                if params.k() != h.k {
                    return Err(r.error(h.line, Some(8), format!("header says k = {} but the slots have {} rows", h.k, params.k())));
                }
                built.push(StackLayer { params, mode: h.mode });
            }
            SetEncoder::Sse(EncoderStack::new(built).map_err(wrap(kind_line))?)
        }
        Header::DeepSets { pool, phi, rho } => {
            let mut layers = |prefix: &str, acts: Vec<Activation>| -> Result<Vec<DenseLayer<f64>>> {
                acts.into_iter()
                    .enumerate()
                    .map(|(i, activation)| {
                        Ok(DenseLayer {
                            map: p.linear(r, kind_line, &format!("{prefix}{i}"))?,
                            activation,
                        })
                    })
                    .collect()
            };
            let phi = layers("phi", phi)?;
            let rho = layers("rho", rho)?;
            let d = phi.first().or(rho.first()).map_or(0, |l| l.map.d_in());
            SetEncoder::DeepSets(DeepSets::new(d, phi, pool, rho).map_err(wrap(kind_line))?)
        }
        Header::SoftmaxPool { combine } => {
            let query = p.take(r, kind_line, "query")?;
            let proj_k = p.linear(r, kind_line, "proj_k")?;
            let proj_v = p.linear(r, kind_line, "proj_v")?;
            SetEncoder::SoftmaxPool {
                pool: SoftmaxPool::new(query, proj_k, proj_v).map_err(wrap(kind_line))?,
                combine,
            }
        }
    })
}

fn parse_train(r: &mut LineReader<'_>) -> Result<Option<(usize, TrainSection)>> {
    if r.peek_key() != Some("train") {
        return Ok(None);
    }
    let mut t = TrainSection::defaults(0);
    let mut first = None;
    while r.peek_key() == Some("train") {
        let (line, v) = r.expect("train", 2)?;
        first.get_or_insert(line);
        let (key, val) = (v[0], v[1]);
        let float = |r: &LineReader<'_>| parse_float(val).ok_or_else(|| r.error(line, Some(3), format!("`{val}` is not a number")));
        let c = &mut t.config;
        match key {
            "way" => t.task.way = r.parse_at(line, 3, val, key)?,
            "shot" => t.task.shot = r.parse_at(line, 3, val, key)?,
            "spread" => t.task.spread = float(r)?,
            "separation" => t.task.separation = float(r)?,
            "queries" => t.task.queries = r.parse_at(line, 3, val, key)?,
            "steps" => c.steps = r.parse_at(line, 3, val, key)?,
            "subset_size" => c.subset_size = r.parse_at(line, 3, val, key)?,
            "episodes_per_step" => c.episodes_per_step = r.parse_at(line, 3, val, key)?,
            "eval_every" => c.eval_every = r.parse_at(line, 3, val, key)?,
            "eval_episodes" => c.eval_episodes = r.parse_at(line, 3, val, key)?,
            "lr" => c.adam.lr = float(r)?,
            "beta1" => c.adam.beta1 = float(r)?,
            "beta2" => c.adam.beta2 = float(r)?,
            "adam_eps" => c.adam.eps = float(r)?,
            "weight_decay" => c.adam.weight_decay = float(r)?,
            "seed" => c.seed = r.parse_at(line, 3, val, key)?,
            other => return Err(r.error(line, Some(2), format!("unknown training key `{other}`"))),
        }
    }
    Ok(first.map(|line| (line, t)))
}
