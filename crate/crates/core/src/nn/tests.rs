use super::*;
use crate::autodiff::{backward, ParamId, Tape, Tensor};
use crate::error::Error;
use crate::eval::{BBox, GroundTruth};
use crate::experiment::stack_images;
use crate::schedule::FreezeSignal;
use crate::synth::{generate_scene, Scene, SceneConfig};

fn scenes(n: u64) -> Vec<Scene> {
    (0..n)
        .map(|i| generate_scene(&SceneConfig::default(), i).unwrap())
        .collect()
}

fn batch(scenes: &[Scene]) -> Tensor {
    stack_images(&scenes.iter().collect::<Vec<_>>()).unwrap()
}

fn gt(class_id: usize, bbox: [f64; 4]) -> GroundTruth {
    GroundTruth {
        image_id: 0,
        class_id,
        bbox: BBox::new(bbox[0], bbox[1], bbox[2], bbox[3]),
    }
}

#[test]
fn same_seed_builds_identical_detectors() {
    let arch = ArchConfig::desk(3);
    let a = Detector::build(&arch, 7).unwrap();
    let b = Detector::build(&arch, 7).unwrap();
    let c = Detector::build(&arch, 8).unwrap();
    assert_eq!(a.parameters(), b.parameters());
    assert_ne!(a.checksum(Group::Backbone), c.checksum(Group::Backbone));
}

#[test]
fn broken_shape_chain_is_rejected() {
    let mut arch = ArchConfig::desk(3);
    arch.backbone = vec![
        LayerSpec::Flatten,
        LayerSpec::Dense {
            inputs: 3072,
            outputs: 8,
        },
    ];
    arch.neck = Some(vec![LayerSpec::Dense {
        inputs: 5,
        outputs: 2,
    }]);
    match Detector::build(&arch, 0) {
        Err(Error::ShapeChain { .. }) => {}
        other => panic!("expected ShapeChain, got {other:?}"),
    }
}

#[test]
fn groups_partition_parameters() {
    let d = Detector::build(&ArchConfig::desk(3), 0).unwrap();
    let groups = d.parameter_groups();
    let mut all: Vec<ParamId> = groups.values().flatten().copied().collect();
    all.sort();
    let mut ids: Vec<ParamId> = d.parameters().iter().map(|p| p.id).collect();
    ids.sort();
    assert_eq!(all, ids);
    for (g, members) in &groups {
        assert!(!members.is_empty(), "{g} has no parameters");
        assert!(members.iter().all(|&id| d.group_of(id) == Some(*g)));
    }
}

#[test]
fn freezing_does_not_change_forward_values() {
    let d = Detector::build(&ArchConfig::desk(3), 1).unwrap();
    let x = batch(&scenes(2));
    let a = d
        .forward(&x, FreezeSignal::Unfrozen, &mut Tape::new())
        .unwrap();
    let b = d
        .forward(&x, FreezeSignal::Frozen, &mut Tape::new())
        .unwrap();
    let c = d.predict(&x).unwrap();
    assert_eq!(a.tensor.values(), b.tensor.values());
    assert_eq!(a.tensor.values(), c.tensor.values());
    assert_eq!(a.tensor.shape(), &[2, 4, 4, 8]);
}

#[test]
fn frozen_backbone_receives_no_gradient() {
    let d = Detector::build(&ArchConfig::desk(3), 2).unwrap();
    let data = scenes(2);
    let x = batch(&data);
    let gts: Vec<&[GroundTruth]> = data.iter().map(|s| s.ground_truths.as_slice()).collect();
    let targets = GridTargets::encode(&gts, d.config()).unwrap();
    let groups = d.parameter_groups();
    for freeze in [FreezeSignal::Unfrozen, FreezeSignal::Frozen] {
        let mut tape = Tape::new();
        let pred = d.forward(&x, freeze, &mut tape).unwrap();
        let loss = detection_loss(&pred, &targets, &mut tape).unwrap();
        let grads = backward(&loss, &tape).unwrap();
        for &id in &groups[&Group::Backbone] {
            assert_eq!(grads.contains(id), !freeze.is_frozen());
        }
        for &id in groups[&Group::Neck].iter().chain(&groups[&Group::Head]) {
            assert!(grads.contains(id));
        }
    }
}

#[test]
fn detector_without_neck() {
    let mut arch = ArchConfig::desk(2);
    arch.neck = None;
    arch.head = vec![
        LayerSpec::Flatten,
        LayerSpec::Dense {
            inputs: 784,
            outputs: 16 * 7,
        },
    ];
    let d = Detector::build(&arch, 0).unwrap();
    assert!(!d.has_neck());
    assert!(d.parameter_groups()[&Group::Neck].is_empty());
    let x = Tensor::zeros(vec![1, 3, 32, 32]).unwrap();
    assert_eq!(d.predict(&x).unwrap().tensor.shape(), &[1, 4, 4, 7]);
}

fn arch_small() -> ArchConfig {
    let mut arch = ArchConfig::desk(3);
    arch.grid_size = 2;
    arch
}

fn perfect_prediction(t: &GridTargets) -> Vec<f64> {
    let width = 5 + t.num_classes;
    let mut pred = Vec::new();
    for i in 0..t.objectness.len() {
        let mut cell = vec![0.0; width];
        if t.objectness[i] {
            cell[0] = 40.0;
            cell[1 + t.class_ids[i]] = 40.0;
            cell[1 + t.num_classes..].copy_from_slice(&t.boxes[i]);
        } else {
            cell[0] = -40.0;
        }
        pred.extend(cell);
    }
    pred
}

#[test]
fn near_perfect_prediction_has_tiny_loss() {
    let arch = arch_small();
    let img: &[GroundTruth] = &[
        gt(1, [2.0, 3.0, 12.0, 10.0]),
        gt(2, [20.0, 18.0, 30.0, 31.0]),
    ];
    let t = GridTargets::encode(&[img], &arch).unwrap();
    assert_eq!(t.positives(), 2);
    let terms = loss_terms(&perfect_prediction(&t), &t);
    assert!(terms.total() < 1e-6, "{terms:?}");
    assert!(terms.total() >= 0.0);
}

#[test]
fn no_positives_leaves_only_objectness() {
    let arch = arch_small();
    let t = GridTargets::encode(&[&[]], &arch).unwrap();
    let pred: Vec<f64> = (0..4 * 8).map(|i| (i as f64 * 0.37).sin()).collect();
    let terms = loss_terms(&pred, &t);
    assert_eq!(terms.class, 0.0);
    assert_eq!(terms.boxes, 0.0);
    assert!(terms.objectness > 0.0);
}

#[test]
fn shared_cell_keeps_first_box() {
    let arch = arch_small();
    let img: &[GroundTruth] = &[gt(0, [1.0, 1.0, 9.0, 9.0]), gt(2, [2.0, 2.0, 6.0, 6.0])];
    let t = GridTargets::encode(&[img], &arch).unwrap();
    assert_eq!(t.positives(), 1);
    assert_eq!(t.class_ids[0], 0);
    // center (5, 5) on 16-px cells, 8x8 box
    assert_eq!(
        t.boxes[0],
        [5.0 / 16.0, 5.0 / 16.0, 0.5f64.ln(), 0.5f64.ln()]
    );
}

/// Straight-line textbook form of the three loss terms.
fn oracle_loss(pred: &[f64], t: &GridTargets) -> f64 {
    let c = t.num_classes;
    let width = 5 + c;
    let cells = t.objectness.len();
    let (mut obj, mut cls, mut bx, mut p) = (0.0, 0.0, 0.0, 0usize);
    for i in 0..cells {
        let cell = &pred[i * width..(i + 1) * width];
        let s = 1.0 / (1.0 + (-cell[0]).exp());
        if t.objectness[i] {
            obj -= s.ln();
            p += 1;
            let z: f64 = cell[1..1 + c].iter().map(|v| v.exp()).sum();
            cls -= (cell[1 + t.class_ids[i]].exp() / z).ln();
            for k in 0..4 {
                bx += (cell[1 + c + k] - t.boxes[i][k]).powi(2);
            }
        } else {
            obj -= (1.0 - s).ln();
        }
    }
    let mut total = obj / cells as f64;
    if p > 0 {
        total += cls / p as f64 + bx / (4 * p) as f64;
    }
    total
}

fn wavy_prediction(n: usize, phase: f64) -> Vec<f64> {
    (0..n)
        .map(|i| 1.5 * ((i as f64) * 0.731 + phase).sin())
        .collect()
}

#[test]
fn loss_matches_textbook_oracle() {
    let arch = arch_small();
    let a: &[GroundTruth] = &[
        gt(1, [2.0, 3.0, 12.0, 10.0]),
        gt(2, [20.0, 18.0, 30.0, 31.0]),
    ];
    let b: &[GroundTruth] = &[gt(0, [17.0, 1.0, 31.0, 12.0])];
    let t = GridTargets::encode(&[a, b], &arch).unwrap();
    for phase in [0.0, 0.4, 2.2] {
        let pred = wavy_prediction(2 * 4 * 8, phase);
        let got = loss_terms(&pred, &t).total();
        let want = oracle_loss(&pred, &t);
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let arch = arch_small();
    let a: &[GroundTruth] = &[
        gt(1, [2.0, 3.0, 12.0, 10.0]),
        gt(2, [20.0, 18.0, 30.0, 31.0]),
    ];
    let t = GridTargets::encode(&[a], &arch).unwrap();
    let values = wavy_prediction(4 * 8, 0.9);
    let shape = [1, 2, 2, 8];
    let mut tape = Tape::new();
    let tensor = tape.param(ParamId(0), &shape, &values).unwrap();
    let pred = PredictionGrid {
        tensor,
        grid_size: 2,
        num_classes: 3,
    };
    let loss = detection_loss(&pred, &t, &mut tape).unwrap();
    assert!((loss.item().unwrap() - oracle_loss(&values, &t)).abs() < 1e-12);
    let grads = backward(&loss, &tape).unwrap();
    let g = grads.get(ParamId(0)).unwrap().values().to_vec();
    let h = 1e-6;
    for i in 0..values.len() {
        let mut plus = values.clone();
        plus[i] += h;
        let mut minus = values.clone();
        minus[i] -= h;
        let fd = (oracle_loss(&plus, &t) - oracle_loss(&minus, &t)) / (2.0 * h);
        assert!(
            (fd - g[i]).abs() <= 1e-5 * fd.abs().max(1.0),
            "entry {i}: {fd} vs {}",
            g[i]
        );
    }
}

#[test]
fn loss_rejects_mismatched_grid() {
    let t = GridTargets::encode(&[&[]], &arch_small()).unwrap();
    let mut tape = Tape::new();
    let pred = PredictionGrid {
        tensor: Tensor::zeros(vec![1, 4, 4, 8]).unwrap(),
        grid_size: 4,
        num_classes: 3,
    };
    assert!(matches!(
        detection_loss(&pred, &t, &mut tape),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn decoded_detections_follow_confident_cells() {
    let arch = arch_small();
    let img: &[GroundTruth] = &[gt(1, [2.0, 3.0, 12.0, 10.0])];
    let t = GridTargets::encode(&[img], &arch).unwrap();
    let pred = PredictionGrid {
        tensor: Tensor::new(vec![1, 2, 2, 8], perfect_prediction(&t)).unwrap(),
        grid_size: 2,
        num_classes: 3,
    };
    let dets = decode_detections(&pred, &[5], &arch);
    assert_eq!(dets.len(), 1);
    assert_eq!(dets[0].image_id, 5);
    assert_eq!(dets[0].class_id, 1);
    let b = dets[0].bbox;
    for (got, want) in [b.xmin, b.ymin, b.xmax, b.ymax]
        .iter()
        .zip([2.0, 3.0, 12.0, 10.0])
    {
        assert!((got - want).abs() < 1e-9);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let d = Detector::build(&ArchConfig::desk(3), 3).unwrap();
    let mut bytes = Vec::new();
    checkpoint::write_checkpoint(&d, &mut bytes).unwrap();
    let entries = checkpoint::read_checkpoint(bytes.as_slice()).unwrap();
    let mut e = Detector::build(&ArchConfig::desk(3), 99).unwrap();
    e.load_parameters(&entries).unwrap();
    for (p, q) in d.parameters().iter().zip(e.parameters()) {
        let pb: Vec<u64> = p.values.iter().map(|v| v.to_bits()).collect();
        let qb: Vec<u64> = q.values.iter().map(|v| v.to_bits()).collect();
        assert_eq!(pb, qb);
    }
    let mut again = Vec::new();
    checkpoint::write_checkpoint(&e, &mut again).unwrap();
    assert_eq!(bytes, again);

    bytes.push(0);
    assert!(checkpoint::read_checkpoint(bytes.as_slice()).is_err());
    assert!(checkpoint::read_checkpoint(&b"NOTACKPT"[..]).is_err());
}
