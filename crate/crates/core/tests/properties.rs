mod common;

use std::collections::BTreeMap;

use mthd_core::augment::{
    apply_intensity, sample_augment, sample_subset, warp_teacher_outputs, AugmentRanges, GeomParams,
};
use mthd_core::dataset::{
    canonical_sequences, generate_dataset, load_dataset, load_study, save_dataset, save_study,
    DatasetSpec, SplitTag,
};
use mthd_core::froc_eval::{froc, SensitivityMode, FP_POINTS};
use mthd_core::heatmap_codec::{decode, encode, DecodeConfig, Detection};
use mthd_core::hetero_net::{fuse, HeteroNet, ModelConfig, OutputGrads, Params};
use mthd_core::losses::{focal_heatmap_loss, sup_loss, SupLossConfig};
use mthd_core::rng::{stream, Stream};
use mthd_core::{BBox, Error};
use ndarray::{s, Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn boxes_strategy() -> impl Strategy<Value = Vec<BBox>> {
    // one box per 16x16 tile of a 64x64 image; centers in distinct cells
    proptest::collection::vec(
        (0usize..16, 2u32..7, 2u32..7, 0.0f64..1.0, 0.0f64..1.0),
        0..6,
    )
    .prop_map(|raw| {
        let mut used = [false; 16];
        raw.into_iter()
            .filter_map(|(tile, w, h, fx, fy)| {
                if std::mem::replace(&mut used[tile], true) {
                    return None;
                }
                let (tx, ty) = ((tile % 4) as f64 * 16.0, (tile / 4) as f64 * 16.0);
                let (w, h) = (f64::from(w), f64::from(h));
                let cx = tx + 8.0 + (fx - 0.5) * 2.0;
                let cy = ty + 8.0 + (fy - 0.5) * 2.0;
                Some(BBox::from_center(cx, cy, w, h))
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn codec_round_trip(boxes in boxes_strategy()) {
        let t = encode(&boxes, 64, 64, 4).unwrap();
        prop_assert!(t.heatmap.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(t.heatmap.iter().filter(|&&v| v == 1.0).count(), boxes.len());
        prop_assert_eq!(t.center_mask.iter().filter(|&&m| m).count(), boxes.len());
        let cfg = DecodeConfig { top_k: 64, score_threshold: 0.99 };
        let dets = decode(t.heatmap.view(), t.size.view(), t.offset.view(), 4, cfg).unwrap();
        prop_assert_eq!(dets.len(), boxes.len());
        for b in &boxes {
            let (cx, cy) = b.center();
            let hit = dets.iter().any(|d| {
                let (dx, dy) = d.bbox.center();
                (dx - cx).abs() <= 2.0
                    && (dy - cy).abs() <= 2.0
                    && (d.bbox.width() - b.width()).abs() < 1e-4
                    && (d.bbox.height() - b.height()).abs() < 1e-4
            });
            prop_assert!(hit, "box {:?} not recovered from {:?}", b, dets);
        }
    }

    #[test]
    fn duplicate_boxes_encode_like_one(boxes in boxes_strategy()) {
        let mut doubled = boxes.clone();
        doubled.extend(boxes.iter().copied());
        prop_assert_eq!(encode(&boxes, 64, 64, 4).unwrap(), encode(&doubled, 64, 64, 4).unwrap());
    }

    #[test]
    fn fusion_is_order_independent(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Array3<f32>> = (0..n)
            .map(|_| Array3::from_shape_fn((3, 4, 5), |_| rng.random_range(-3.0f32..3.0)))
            .collect();
        let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
        let base = fuse(&views).unwrap();
        let mut rev = views.clone();
        rev.reverse();
        prop_assert_eq!(&fuse(&rev).unwrap(), &base);
        rev.rotate_left(n / 2);
        prop_assert_eq!(&fuse(&rev).unwrap(), &base);
        prop_assert!(base.slice(s![3.., .., ..]).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn froc_is_monotone_and_scale_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = common::random_froc_instance(&mut rng, 10);
        let r = froc(&inst, &FP_POINTS, SensitivityMode::LesionPooled).unwrap();
        prop_assert!(r.sensitivities.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(r.sensitivities.iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = r.sensitivities.iter().sum::<f64>() / 5.0;
        prop_assert_eq!(r.average, mean);

        let mut squashed = inst.clone();
        for s in &mut squashed {
            for d in &mut s.detections {
                d.score = 3.0 * d.score + 1.0;
            }
        }
        let r2 = froc(&squashed, &FP_POINTS, SensitivityMode::LesionPooled).unwrap();
        prop_assert_eq!(&r2.sensitivities, &r.sensitivities);

        let mut extra = inst.clone();
        let k = rng.random_range(0..extra.len());
        extra[k].detections.push(Detection { bbox: BBox::new(500.0, 500.0, 510.0, 510.0), score: 0.0 });
        let r3 = froc(&extra, &FP_POINTS, SensitivityMode::LesionPooled).unwrap();
        for (a, b) in r3.sensitivities.iter().zip(&r.sensitivities) {
            prop_assert!(a <= b);
        }
    }

    #[test]
    fn froc_matches_brute_force(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = common::random_froc_instance(&mut rng, 10);
        let r = froc(&inst, &FP_POINTS, SensitivityMode::LesionPooled).unwrap();
        prop_assert_eq!(r.sensitivities, common::brute_force_froc(&inst, &FP_POINTS));
    }

    #[test]
    fn focal_gradient_matches_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = Array2::from_shape_fn((4, 4), |_| {
            if rng.random_bool(0.2) { 1.0 } else { rng.random_range(0.0..0.99) }
        });
        let p = Array2::from_shape_fn((4, 4), |_| rng.random_range(0.02f64..0.98));
        let (_, g) = focal_heatmap_loss(p.view(), y.view(), 2.0, 4.0).unwrap();
        let x: Vec<f64> = p.iter().copied().collect();
        let err = common::max_rel_fd_error(&x, g.as_slice().unwrap(), 1e-5, 1e-5, |v| {
            let pv = Array2::from_shape_vec((4, 4), v.to_vec()).unwrap();
            focal_heatmap_loss(pv.view(), y.view(), 2.0, 4.0).unwrap().0
        });
        prop_assert!(err < 1e-4, "relative error {}", err);
    }

    #[test]
    fn intensity_preserves_order_and_range(gamma in 0.5f64..2.0, a in 0.0f32..1.0, b in 0.0f32..1.0) {
        let img = Array2::from_shape_vec((1, 2), vec![a, b]).unwrap();
        let out = apply_intensity(img.view(), gamma).unwrap();
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        if a < b {
            prop_assert!(out[[0, 0]] <= out[[0, 1]]);
        }
    }

    #[test]
    fn warped_sizes_stay_non_negative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ranges = AugmentRanges::default();
        let spec = sample_augment(&canonical_sequences(5), 64, 64, &mut rng, &ranges).unwrap();
        let heat = Array2::from_shape_fn((16, 16), |_| rng.random_range(0.0f32..1.0));
        let size = Array3::from_shape_fn((2, 16, 16), |_| rng.random_range(0.0f32..8.0));
        let (h, d) = warp_teacher_outputs(heat.view(), size.view(), &spec.geom, 4, true);
        prop_assert!(d.iter().all(|&v| v >= 0.0));
        prop_assert!(h.iter().all(|&v| (0.0..=1.0 + 1e-6).contains(&v)));
    }

    #[test]
    fn augment_spec_respects_ranges(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let avail = canonical_sequences(k);
        let spec = sample_augment(&avail, 64, 48, &mut rng, &AugmentRanges::default()).unwrap();
        prop_assert!(!spec.sequence_subset.is_empty());
        prop_assert!(spec.sequence_subset.iter().all(|s| avail.contains(s)));
        for g in [spec.gamma_student, spec.gamma_teacher] {
            prop_assert!((0.5..=2.0).contains(&g));
        }
        prop_assert!(spec.geom.rotation_deg.abs() <= 10.0);
        prop_assert!((0.8..=1.25).contains(&spec.geom.scale));
        prop_assert!(spec.geom.shift.0.abs() <= 12.0 && spec.geom.shift.1.abs() <= 16.0);
    }
}

#[test]
fn subset_cardinalities_are_uniform() {
    let avail = canonical_sequences(5);
    let mut rng = stream(11, Stream::AugmentUnlabeled);
    let mut counts = [0usize; 5];
    let mut per_combo: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    let n = 10_000;
    for _ in 0..n {
        let s = sample_subset(&avail, &mut rng).unwrap();
        counts[s.len() - 1] += 1;
        *per_combo.entry(s).or_default() += 1;
    }
    for c in counts {
        let f = c as f64 / n as f64;
        assert!((f - 0.2).abs() <= 0.02, "{counts:?}");
    }
    // the 5 pairs' share is split evenly among the 10 pairs
    let pairs: Vec<usize> = per_combo
        .iter()
        .filter(|(k, _)| k.len() == 2)
        .map(|(_, v)| *v)
        .collect();
    assert_eq!(pairs.len(), 10);
    for p in pairs {
        assert!((p as f64 / n as f64 - 0.02).abs() < 0.01);
    }
}

#[test]
fn student_and_teacher_gammas_differ() {
    let avail = canonical_sequences(5);
    let mut rng = stream(12, Stream::AugmentUnlabeled);
    let n = 10_000;
    let differ = (0..n)
        .filter(|_| {
            let s = sample_augment(&avail, 64, 64, &mut rng, &AugmentRanges::default()).unwrap();
            s.gamma_student != s.gamma_teacher
        })
        .count();
    assert!(differ as f64 > 0.99 * n as f64);
}

#[test]
fn sup_loss_is_invariant_under_quarter_turns() {
    let boxes = vec![
        BBox::from_center(20.3, 33.1, 9.0, 5.0),
        BBox::from_center(45.0, 12.0, 4.0, 7.0),
    ];
    let t = encode(&boxes, 64, 64, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let out = mthd_core::hetero_net::DetectorOutput {
        heatmap: Array2::from_shape_fn((16, 16), |_| rng.random_range(0.05f32..0.95)),
        size: Array3::from_shape_fn((2, 16, 16), |_| rng.random_range(0.0f32..3.0)),
        offset: Array3::from_shape_fn((2, 16, 16), |_| rng.random_range(0.0f32..1.0)),
    };
    let rot2 = |a: &Array2<f32>| {
        let mut r = a.t().to_owned();
        r.invert_axis(ndarray::Axis(0));
        r
    };
    let rot3 = |a: &Array3<f32>| {
        let mut r = a.clone();
        r.swap_axes(1, 2);
        r.invert_axis(ndarray::Axis(1));
        r.as_standard_layout().to_owned()
    };
    let (l0, _) = sup_loss(&out, &t, &SupLossConfig::default()).unwrap();
    let rotated_out = mthd_core::hetero_net::DetectorOutput {
        heatmap: rot2(&out.heatmap),
        size: rot3(&out.size),
        offset: rot3(&out.offset),
    };
    let mut rt = t.clone();
    rt.heatmap = rot2(&t.heatmap);
    rt.size = rot3(&t.size);
    rt.offset = rot3(&t.offset);
    let mut m = t.center_mask.t().to_owned();
    m.invert_axis(ndarray::Axis(0));
    rt.center_mask = m;
    let (l1, _) = sup_loss(&rotated_out, &rt, &SupLossConfig::default()).unwrap();
    assert!(
        (l0.total - l1.total).abs() < 1e-5 * l0.total.max(1.0),
        "{l0:?} vs {l1:?}"
    );
}

fn small_model() -> ModelConfig {
    ModelConfig {
        stem_channels: 4,
        trunk_channels: 8,
        head_channels: 4,
        ..ModelConfig::default()
    }
}

fn random_images(names: &[String], rng: &mut ChaCha8Rng) -> BTreeMap<String, Array2<f32>> {
    names
        .iter()
        .map(|n| {
            (
                n.clone(),
                Array2::from_shape_fn((32, 32), |_| rng.random_range(0.0f32..1.0)),
            )
        })
        .collect()
}

#[test]
fn every_sequence_subset_runs() {
    let model = small_model();
    let net = HeteroNet::new(model.clone()).unwrap();
    let params = net.init_params(&mut stream(0, Stream::Init)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let all = random_images(&model.sequences, &mut rng);
    let mut seen = 0;
    for mask in 1u32..32 {
        let images: BTreeMap<_, _> = all
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, (k, v))| (k.clone(), v.clone()))
            .collect();
        let out = net.forward(&params, &images).unwrap();
        assert_eq!(out.grid(), (8, 8));
        assert!(out.is_finite());
        assert!(out.size.iter().all(|&v| v >= 0.0));
        seen += 1;
    }
    assert_eq!(seen, 31);
}

#[test]
fn every_parameter_receives_gradient() {
    let model = small_model();
    let net = HeteroNet::new(model.clone()).unwrap();
    let params = net.init_params(&mut stream(0, Stream::Init)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let images = random_images(&model.sequences, &mut rng);
    let targets = encode(&[BBox::from_center(13.0, 17.0, 8.0, 6.0)], 32, 32, 4).unwrap();
    let (out, trace) = net.forward_train(&params, &images).unwrap();
    let (_, grads) = sup_loss(&out, &targets, &SupLossConfig::default()).unwrap();
    let mut acc = params.zeros_like();
    net.backward(&params, &trace, &out, &grads, &mut acc)
        .unwrap();
    for (name, g) in acc.tensors() {
        assert!(g.iter().any(|&v| v != 0.0), "{name} has zero gradient");
    }
    // a sequence left out contributes nothing to its stem
    let mut partial = images.clone();
    partial.remove(&model.sequences[0]);
    let (out, trace) = net.forward_train(&params, &partial).unwrap();
    let mut acc = params.zeros_like();
    let g = OutputGrads {
        heatmap: Array2::ones(out.grid()),
        ..OutputGrads::zeros(out.grid().0, out.grid().1)
    };
    net.backward(&params, &trace, &out, &g, &mut acc).unwrap();
    let stem0: Vec<f32> = acc.tensors()[0].1.to_vec();
    assert!(stem0.iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_deterministic_and_insertion_order_free() {
    let model = small_model();
    let net = HeteroNet::new(model.clone()).unwrap();
    let params: Params = net.init_params(&mut stream(3, Stream::Init)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let images = random_images(&model.sequences[..3], &mut rng);
    let mut reinserted = BTreeMap::new();
    for (k, v) in images.iter().rev() {
        reinserted.insert(k.clone(), v.clone());
    }
    assert_eq!(
        net.forward(&params, &images).unwrap(),
        net.forward(&params, &reinserted).unwrap()
    );
}

#[test]
fn study_round_trips_through_disk() {
    let spec = DatasetSpec {
        n_labeled: 3,
        n_unlabeled_complete: 2,
        n_unlabeled_incomplete: 3,
        ..DatasetSpec::default()
    };
    let (studies, manifest) = generate_dataset(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &studies, &manifest).unwrap();
    let (back, m2) = load_dataset(dir.path()).unwrap();
    assert_eq!(back, studies);
    assert_eq!(m2, manifest);
    assert_eq!(m2.count(SplitTag::UnlabeledIncomplete), 3);
    for e in &m2.studies {
        let s = studies.iter().find(|s| s.study_id == e.study_id).unwrap();
        assert_eq!(e.sequences, s.sequences.keys().cloned().collect::<Vec<_>>());
    }
}

#[test]
fn corrupted_studies_are_rejected() {
    let spec = DatasetSpec {
        n_labeled: 1,
        n_unlabeled_complete: 0,
        n_unlabeled_incomplete: 0,
        lesion_count: (1, 1),
        ..DatasetSpec::default()
    };
    let (studies, _) = generate_dataset(&spec).unwrap();
    let canonical = spec.sequence_names();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    assert!(matches!(
        load_study(&root.join("nothing")),
        Err(Error::MissingFile(_))
    ));

    let mut s = studies[0].clone();
    s.sequences.insert("seq2".into(), Array2::zeros((32, 64)));
    let p = root.join("shape");
    // bypass save-time checks by writing a valid study, then swapping an image
    save_study(&p, &studies[0], &canonical).unwrap();
    ndarray_npy::write_npy(p.join("seq2.npy"), &s.sequences["seq2"]).unwrap();
    assert!(matches!(load_study(&p), Err(Error::ShapeMismatch(_))));

    let p = root.join("box");
    save_study(&p, &studies[0], &canonical).unwrap();
    let meta = std::fs::read_to_string(p.join("boxes.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&meta).unwrap();
    let b = &mut v["boxes"][0];
    b["x_min"] = b["x_max"].clone();
    std::fs::write(p.join("boxes.json"), v.to_string()).unwrap();
    assert!(load_study(&p).is_err());

    let p = root.join("version");
    save_study(&p, &studies[0], &canonical).unwrap();
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("boxes.json")).unwrap()).unwrap();
    v["schema_version"] = 99.into();
    std::fs::write(p.join("boxes.json"), v.to_string()).unwrap();
    assert!(matches!(
        load_study(&p),
        Err(Error::SchemaVersion { found: 99, .. })
    ));
}

#[test]
fn quarter_turn_geometry_round_trips() {
    let g = GeomParams {
        rotation_deg: 90.0,
        scale: 1.0,
        shift: (0.0, 0.0),
    };
    let (x, y) = g.apply(10.0, 3.0, 64.0, 64.0);
    let (bx, by) = g.apply_inverse(x, y, 64.0, 64.0);
    assert_eq!((bx, by), (10.0, 3.0));
}
