use std::collections::BTreeMap;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mthd_core::dataset::canonical_sequences;
use mthd_core::froc_eval::{froc, SensitivityMode, StudyEval, FP_POINTS};
use mthd_core::heatmap_codec::{decode, encode, DecodeConfig, Detection};
use mthd_core::hetero_net::{HeteroNet, ModelConfig};
use mthd_core::rng::{stream, Stream};
use mthd_core::BBox;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn forward(c: &mut Criterion) {
    let net = HeteroNet::new(ModelConfig::default()).unwrap();
    let params = net.init_params(&mut stream(0, Stream::Init)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let images: BTreeMap<String, Array2<f32>> = canonical_sequences(5)
        .into_iter()
        .map(|n| {
            (
                n,
                Array2::from_shape_fn((64, 64), |_| rng.random_range(0.0..1.0)),
            )
        })
        .collect();
    c.bench_function("forward 5x64x64", |b| {
        b.iter(|| net.forward(&params, black_box(&images)).unwrap())
    });
    c.bench_function("forward+backward 5x64x64", |b| {
        b.iter(|| {
            let (out, trace) = net.forward_train(&params, &images).unwrap();
            let g = mthd_core::hetero_net::OutputGrads::zeros(out.grid().0, out.grid().1);
            let mut acc = params.zeros_like();
            net.backward(&params, &trace, &out, &g, &mut acc).unwrap();
            acc
        })
    });
}

fn codec(c: &mut Criterion) {
    let boxes: Vec<BBox> = (0..8)
        .map(|k| BBox::from_center(20.0 + 28.0 * k as f64, 100.0, 12.0, 9.0))
        .collect();
    c.bench_function("encode 8 boxes 256x256", |b| {
        b.iter(|| encode(black_box(&boxes), 256, 256, 4).unwrap())
    });
    let t = encode(&boxes, 256, 256, 4).unwrap();
    c.bench_function("decode 64x64 grid", |b| {
        b.iter(|| {
            decode(
                t.heatmap.view(),
                t.size.view(),
                t.offset.view(),
                4,
                DecodeConfig::default(),
            )
            .unwrap()
        })
    });
}

fn evaluation(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let studies: Vec<StudyEval> = (0..200)
        .map(|s| {
            let gts: Vec<BBox> = (0..2)
                .map(|g| BBox::new(30.0 * g as f64, 0.0, 30.0 * g as f64 + 10.0, 10.0))
                .collect();
            let detections = (0..30)
                .map(|_| {
                    let x = rng.random_range(0.0..60.0);
                    Detection {
                        bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
                        score: rng.random_range(0.0..1.0),
                    }
                })
                .collect();
            StudyEval {
                study_id: format!("s{s}"),
                detections,
                gts,
            }
        })
        .collect();
    c.bench_function("froc 200 studies x 30 detections", |b| {
        b.iter(|| {
            froc(
                black_box(&studies),
                &FP_POINTS,
                SensitivityMode::LesionPooled,
            )
            .unwrap()
        })
    });
}

criterion_group!(benches, forward, codec, evaluation);
criterion_main!(benches);
