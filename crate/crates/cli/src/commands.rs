//! Command implementations, independent of argument parsing and file I/O.

use crate::error::{CliError, Result};
use crate::model::{ModelFile, TrainSection};
use crate::session::SessionFile;
use slotset_core::training::{eval_episodes, eval_seed, grad_check, prefix_loss, train_minibatch, Example, GradCheckReport, HistoryRow};
use slotset_core::{
    partition_suite, relative_discrepancy, split_rows, AggMode, AggregateState, DeepSets, EncoderStack, Matrix, Rng, SetEncoder, SlotConfig, SlotSample, SlotSetEncoder,
    SoftmaxPool, SseParams, SseShape, StackLayer,
};

/// Shape of a freshly initialized model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub kind: slotset_core::EncoderKind,
    pub d: usize,
    /// Slots of the first layer (SSE) or attention queries (softmax pooling).
    pub k: usize,
    /// Slot dimension.
    pub h: usize,
    /// Width between layers: d̂ of layer 1 in a two-layer stack, or the
    /// hidden width of DeepSets.
    pub hidden: usize,
    /// Output width; defaults to `d` so the model fits the centroid task.
    pub out: usize,
    pub depth: usize,
    pub mode: AggMode,
    pub random_slots: bool,
    pub bias: bool,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(kind: slotset_core::EncoderKind, d: usize) -> Self {
        Self {
            kind,
            d,
            k: 4,
            h: 16,
            hidden: 8,
            out: d,
            depth: 2,
            mode: AggMode::Mean,
            random_slots: true,
            bias: true,
            seed: 0,
        }
    }

    pub fn build(&self) -> Result<ModelFile> {
        let mut rng = Rng::new(self.seed);
        let layer = |rng: &mut Rng, d, d_hat, k, mode| -> Result<StackLayer<f64>> {
            let shape = SseShape {
                d,
                h: self.h,
                d_hat,
                k,
                random_slots: self.random_slots,
                bias: self.bias,
            };
            Ok(StackLayer {
                params: SseParams::init(rng, shape)?,
                mode,
            })
        };
        let encoder = match self.kind {
            slotset_core::EncoderKind::Sse => {
                let layers = match self.depth {
                    1 => vec![layer(&mut rng, self.d, self.out, self.k, self.mode)?],
                    2 => vec![layer(&mut rng, self.d, self.hidden, self.k, self.mode)?, layer(&mut rng, self.hidden, self.out, 1, AggMode::Mean)?],
                    other => return Err(CliError::Usage(format!("depth must be 1 or 2, got {other}"))),
                };
                SetEncoder::Sse(EncoderStack::new(layers)?)
            }
            slotset_core::EncoderKind::DeepSets => SetEncoder::DeepSets(DeepSets::init(&mut rng, self.d, self.hidden, self.out, self.mode)),
            slotset_core::EncoderKind::SoftmaxPool => SetEncoder::SoftmaxPool {
                pool: SoftmaxPool::init(&mut rng, self.d, self.out, self.k),
                combine: self.mode,
            },
        };
        encoder.validate()?;
        Ok(ModelFile {
            encoder,
            train: Some(TrainSection::defaults(self.d)),
        })
    }
}

fn streamable(model: &ModelFile) -> Result<()> {
    if model.encoder.is_mini_batch_consistent() {
        Ok(())
    } else {
        Err(CliError::Session(format!(
            "{} encoders are not mini-batch consistent, so they cannot be streamed into a session",
            model.encoder.kind()
        )))
    }
}

fn check_fingerprint(model: &ModelFile, session: &SessionFile) -> Result<()> {
    let fp = model.fingerprint();
    if fp != session.model_fingerprint {
        return Err(CliError::Session(format!(
            "session was created for model {} but this model is {}",
            session.model_fingerprint, fp
        )));
    }
    Ok(())
}

/// The model with layer 1 switched to the session's mode.
fn session_encoder(model: &ModelFile, session: &SessionFile) -> SetEncoder<f64> {
    let mut enc = model.encoder.clone();
    enc.set_stream_mode(session.mode());
    enc
}

/// Draws the session's slots and writes an empty aggregate.
pub fn init_session(model: &ModelFile, seed: u64, mode: Option<AggMode>) -> Result<SessionFile> {
    streamable(model)?;
    let mut enc = model.encoder.clone();
    let mode = mode.unwrap_or(enc.stream_mode());
    enc.set_stream_mode(mode);
    let (slots, state) = match &enc {
        SetEncoder::Sse(stack) => {
            let sample = stack.first_layer_slots(seed)?;
            let layer = &stack.layers()[0].params;
            // Normalizing once here surfaces bad slot parameters at init.
            SlotSetEncoder::new(layer, sample.clone())?;
            (Some(sample.slots), AggregateState::init(mode, layer.k(), layer.d_hat()))
        }
        SetEncoder::DeepSets(ds) => (None, ds.init_state()),
        SetEncoder::SoftmaxPool { .. } => unreachable!("rejected above"),
    };
    Ok(SessionFile {
        model_fingerprint: model.fingerprint(),
        seed,
        slots,
        state,
    })
}

fn first_layer_encoder<'a>(stack: &'a EncoderStack<f64>, session: &SessionFile) -> Result<SlotSetEncoder<'a, f64>> {
    let params = &stack.layers()[0].params;
    let slots = session.slots.clone().ok_or_else(|| CliError::Session("session has no slots but the model is a slot set encoder".into()))?;
    if slots.shape() != (params.k(), params.h()) {
        return Err(CliError::Session(format!("session slots are {:?}, model expects {:?}", slots.shape(), (params.k(), params.h()))));
    }
    let seed = matches!(params.slots, SlotConfig::Random { .. }).then_some(session.seed);
    Ok(SlotSetEncoder::new(params, SlotSample { slots, seed })?)
}

/// Encodes `batch` with the session's slots and merges it into the state.
pub fn ingest(model: &ModelFile, session: &SessionFile, batch: &Matrix<f64>) -> Result<SessionFile> {
    streamable(model)?;
    check_fingerprint(model, session)?;
    let d = model.encoder.input_dim();
    if batch.cols() != d {
        return Err(CliError::Data(format!("batch has {} columns, model expects {d}", batch.cols())));
    }
    if batch.rows() == 0 {
        return Err(CliError::Data("batch has no rows".into()));
    }
    let enc = session_encoder(model, session);
    let partial = match &enc {
        SetEncoder::Sse(stack) => first_layer_encoder(stack, session)?.encode_batch(batch, session.mode())?,
        SetEncoder::DeepSets(ds) => ds.encode_batch(batch)?,
        SetEncoder::SoftmaxPool { .. } => unreachable!("rejected above"),
    };
    let mut next = session.clone();
    next.state = session.state.clone().merge(&partial)?;
    Ok(next)
}

/// Final encoding of everything ingested so far; the session is unchanged.
pub fn finalize(model: &ModelFile, session: &SessionFile) -> Result<Matrix<f64>> {
    streamable(model)?;
    check_fingerprint(model, session)?;
    let enc = session_encoder(model, session);
    Ok(match &enc {
        SetEncoder::Sse(stack) => stack.finish(&session.state, session.seed)?,
        SetEncoder::DeepSets(ds) => ds.head(&session.state)?,
        SetEncoder::SoftmaxPool { .. } => unreachable!("rejected above"),
    })
}

/// Default `verify-mbc` tolerance: exact agreement for Max/Min, `1e-9`
/// relative for Sum/Mean.
pub fn default_tolerance(mode: AggMode) -> f64 {
    if mode.is_exact() {
        0.0
    } else {
        1e-9
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MbcReport {
    pub encoder: String,
    pub mode: AggMode,
    pub rows: usize,
    pub partitions: usize,
    pub max_discrepancy: f64,
    pub tolerance: f64,
}

impl MbcReport {
    pub const CSV_HEADER: &'static str = "encoder,mode,rows,partitions,max_relative_discrepancy,tolerance,result";

    pub fn passed(&self) -> bool {
        self.max_discrepancy <= self.tolerance
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6e},{:e},{}",
            self.encoder,
            self.mode,
            self.rows,
            self.partitions,
            self.max_discrepancy,
            self.tolerance,
            if self.passed() { "pass" } else { "fail" }
        )
    }
}

/// Compares the single-pass encoding of `x` with `partitions` random
/// partitions of it, always including one batch and all singletons.
pub fn verify_mbc(encoder: &SetEncoder<f64>, x: &Matrix<f64>, partitions: usize, seed: u64, tolerance: Option<f64>) -> Result<MbcReport> {
    if x.rows() == 0 {
        return Err(CliError::Data("data has no rows".into()));
    }
    if x.cols() != encoder.input_dim() {
        return Err(CliError::Data(format!("data has {} columns, model expects {}", x.cols(), encoder.input_dim())));
    }
    let full = encoder.encode_full(x, seed)?;
    let mut rng = Rng::new(seed);
    let suite = partition_suite(x.rows(), partitions.max(2), &mut rng);
    let mut worst = 0.0f64;
    for groups in &suite {
        let got = encoder.encode_partitioned(&split_rows(x, groups), seed)?;
        worst = worst.max(relative_discrepancy(&got, &full));
    }
    let mode = encoder.stream_mode();
    Ok(MbcReport {
        encoder: encoder.kind().to_string(),
        mode,
        rows: x.rows(),
        partitions: suite.len(),
        max_discrepancy: worst,
        tolerance: tolerance.unwrap_or(default_tolerance(mode)),
    })
}

/// Discrepancy between batched and single-pass encodings as the batch
/// size shrinks, one CSV row per (encoder, batch size).
pub fn demo_inconsistency(encoders: &[(String, SetEncoder<f64>)], x: &Matrix<f64>, seed: u64) -> Result<Vec<String>> {
    let mut rows = vec!["encoder,batch_size,batches,relative_discrepancy".to_string()];
    let order = Rng::new(seed).permutation(x.rows());
    let shuffled = x.select_rows(&order);
    let mut sizes = Vec::new();
    let mut s = x.rows();
    while s >= 1 {
        sizes.push(s);
        s /= 2;
    }
    for (name, enc) in encoders {
        let full = enc.encode_full(&shuffled, seed)?;
        for &size in &sizes {
            let groups: Vec<Vec<usize>> = (0..x.rows()).step_by(size).map(|a| (a..(a + size).min(x.rows())).collect()).collect();
            let got = enc.encode_partitioned(&split_rows(&shuffled, &groups), seed)?;
            rows.push(format!("{name},{size},{},{:.6e}", groups.len(), relative_discrepancy(&got, &full)));
        }
    }
    Ok(rows)
}

/// Trains the model in place with its training block (or defaults).
pub fn train(model: &mut ModelFile) -> Result<Vec<HistoryRow>> {
    let section = model.train.unwrap_or_else(|| TrainSection::defaults(model.encoder.input_dim()));
    let out = train_minibatch(model.encoder.clone(), &section.task, &section.config)?;
    model.encoder = out.state.encoder;
    model.train = Some(section);
    Ok(out.history)
}

/// Gradient check on a small random instance drawn from `seed`.
pub fn gradcheck(model: &ModelFile, seed: u64, step: f64, tolerance: f64) -> Result<GradCheckReport> {
    let enc = &model.encoder;
    let mut rng = Rng::new(seed);
    let (r, c) = enc.output_shape();
    let examples: Vec<Example<f64>> = (0..2)
        .map(|i| Example {
            batches: vec![rng.standard_normals(3, enc.input_dim()), rng.standard_normals(2, enc.input_dim())],
            target: rng.standard_normals(r, c),
            seed: seed.wrapping_add(i),
        })
        .collect();
    Ok(grad_check(enc, &examples, step, tolerance)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub set_size: usize,
    pub loss_full: f64,
    pub loss_partitioned: f64,
    pub accuracy: f64,
}

impl EvalRow {
    pub const CSV_HEADER: &'static str = "set_size,loss_full,loss_partitioned,accuracy";

    pub fn to_csv(&self) -> String {
        format!("{},{:.17e},{:.17e},{:.6}", self.set_size, self.loss_full, self.loss_partitioned, self.accuracy)
    }
}

/// Set sizes 16, 32, ... up to and including `shot`.
pub fn eval_sizes(shot: usize) -> Vec<usize> {
    let mut sizes = Vec::new();
    let mut s = 16.min(shot);
    while s < shot {
        sizes.push(s);
        s *= 2;
    }
    sizes.push(shot);
    sizes
}

/// Held-out loss by set size along the single-pass and partitioned paths,
/// and nearest-centroid accuracy of the single-pass encodings.
pub fn eval(model: &ModelFile) -> Result<Vec<EvalRow>> {
    let section = model.train.unwrap_or_else(|| TrainSection::defaults(model.encoder.input_dim()));
    let (task, cfg) = (section.task, section.config);
    let enc = &model.encoder;
    if enc.output_len() != task.d {
        return Err(CliError::Usage(format!("model produces {} values but the task needs {}", enc.output_len(), task.d)));
    }
    let episodes = eval_episodes::<f64>(&task, cfg.eval_episodes.max(1), cfg.seed)?;
    let slot_seed = eval_seed(cfg.seed);
    let mut rows = Vec::new();
    for size in eval_sizes(task.shot) {
        let loss_full = prefix_loss(enc, &episodes, size, size, slot_seed)?;
        let loss_partitioned = prefix_loss(enc, &episodes, size, cfg.subset_size.max(1), slot_seed)?;
        let mut acc = 0.0;
        for ep in &episodes {
            let predicted = ep
                .prefix_examples(size, size, slot_seed)
                .iter()
                .map(|e| enc.encode_partitioned(&e.batches, e.seed).and_then(|m| m.reshape(1, task.d)))
                .collect::<slotset_core::Result<Vec<_>>>()?;
            acc += ep.nearest_centroid_accuracy(&predicted);
        }
        rows.push(EvalRow {
            set_size: size,
            loss_full,
            loss_partitioned,
            accuracy: acc / episodes.len() as f64,
        });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    /// Aggregation applied to the raw set.
    Mode,
    /// Slot count of layer 1 (random-slot SSE only).
    Slots,
}

/// Trains one copy of the model per axis value and returns a CSV with the
/// held-out full-set loss of each at every evaluation step.
pub fn sweep(model: &ModelFile, axis: SweepAxis, slot_counts: &[usize]) -> Result<Vec<String>> {
    let mut variants: Vec<(String, ModelFile)> = Vec::new();
    match axis {
        SweepAxis::Mode => {
            for mode in AggMode::ALL {
                let mut m = model.clone();
                m.encoder.set_stream_mode(mode);
                variants.push((mode.to_string(), m));
            }
        }
        SweepAxis::Slots => {
            for &k in slot_counts {
                let mut m = model.clone();
                let SetEncoder::Sse(stack) = &mut m.encoder else {
                    return Err(CliError::Usage("a slot-count sweep needs a slot set encoder".into()));
                };
                match &mut stack.layers_mut()[0].params.slots {
                    SlotConfig::Random { k: slots, .. } => *slots = k,
                    SlotConfig::Deterministic { .. } => return Err(CliError::Usage("a slot-count sweep needs random slots".into())),
                }
                variants.push((format!("k{k}"), m));
            }
        }
    }
    let mut histories = Vec::new();
    for (_, m) in &mut variants {
        histories.push(train(m)?);
    }
    let mut rows = vec![format!("step,{}", variants.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join(","))];
    for (i, row) in histories[0].iter().enumerate() {
        if row.eval_loss_full.is_none() {
            continue;
        }
        let cols: Vec<String> = histories.iter().map(|h| h[i].eval_loss_full.map(|v| format!("{v:.17e}")).unwrap_or_default()).collect();
        rows.push(format!("{},{}", row.step, cols.join(",")));
    }
    Ok(rows)
}
