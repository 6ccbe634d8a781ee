#![allow(dead_code)]

use slotset_core::training::Example;
use slotset_core::{AggMode, DeepSets, EncoderStack, Matrix, Rng, SetEncoder, SoftmaxPool, SseParams, SseShape, StackLayer};

pub fn sse_layer(rng: &mut Rng, d: usize, h: usize, d_hat: usize, k: usize, random_slots: bool, bias: bool, mode: AggMode) -> StackLayer<f64> {
    StackLayer {
        params: SseParams::init(
            rng,
            SseShape {
                d,
                h,
                d_hat,
                k,
                random_slots,
                bias,
            },
        )
        .unwrap(),
        mode,
    }
}

/// A small encoder of every kind for input dimension `d`.
pub fn zoo(seed: u64, d: usize, mode: AggMode) -> Vec<(String, SetEncoder<f64>)> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    out.push((
        format!("sse-random-{mode}"),
        SetEncoder::Sse(EncoderStack::new(vec![sse_layer(&mut rng, d, 4, 3, 3, true, true, mode)]).unwrap()),
    ));
    out.push((
        format!("sse-fixed-{mode}"),
        SetEncoder::Sse(EncoderStack::new(vec![sse_layer(&mut rng, d, 5, 2, 4, false, false, mode)]).unwrap()),
    ));
    out.push((
        format!("sse-stack-{mode}"),
        SetEncoder::Sse(EncoderStack::new(vec![sse_layer(&mut rng, d, 4, 3, 3, true, false, mode), sse_layer(&mut rng, 3, 4, 2, 2, true, true, AggMode::Mean)]).unwrap()),
    ));
    out.push((format!("deepsets-{mode}"), SetEncoder::DeepSets(DeepSets::init(&mut rng, d, 5, 2, mode))));
    out.push((
        format!("softmax-{mode}"),
        SetEncoder::SoftmaxPool {
            pool: SoftmaxPool::init(&mut rng, d, 3, 2),
            combine: mode,
        },
    ));
    out
}

/// Two sets, each split into uneven batches, with random targets.
pub fn examples(enc: &SetEncoder<f64>, rng: &mut Rng) -> Vec<Example<f64>> {
    let d = enc.input_dim();
    let (r, c) = enc.output_shape();
    (0..2)
        .map(|i| Example {
            batches: vec![rng.standard_normals(3, d), rng.standard_normals(1, d), rng.standard_normals(2, d)],
            target: rng.standard_normals(r, c),
            seed: 100 + i,
        })
        .collect()
}

pub fn concat(batches: &[Matrix<f64>]) -> Matrix<f64> {
    Matrix::vstack(&batches.iter().collect::<Vec<_>>()).unwrap()
}
