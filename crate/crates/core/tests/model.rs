//! Detector construction, shapes and determinism.

mod common;

use alc_core::autograd::{Graph, Mode};
use alc_core::detector::{Detector, ModelConfig};
use alc_core::tensor::Tensor;
use alc_core::Error;
use common::{rand_tensor, rng};

fn input(size: usize, seed: u64) -> Tensor<f32> {
    rand_tensor(&[1, 3, size, size], &mut rng(seed), 0.0, 1.0).cast()
}

/// Class logits from a batch-statistics forward pass. Fresh running
/// statistics shrink activations towards zero, so untrained eval-mode
/// logits sit at the prior bias.
fn train_mode_logits(det: &Detector<f32>, x: &Tensor<f32>) -> Vec<Tensor<f32>> {
    let mut g = Graph::new(Mode::Train);
    let xv = g.input(x.clone());
    let vars = det.forward(&mut g, xv).unwrap();
    vars.cls.iter().map(|&v| g.value(v).clone()).collect()
}

#[test]
fn three_scales_at_stride_8_16_32() {
    for size in [128, 256, 640] {
        let cfg = ModelConfig { input_size: size, ..ModelConfig::default() }.with_toggles(true, true, true);
        let det = Detector::<f32>::new(&cfg).unwrap();
        let raw = det.predict(&input(size, 1)).unwrap();
        assert_eq!(raw.strides, vec![8, 16, 32]);
        for (i, s) in [8, 16, 32].into_iter().enumerate() {
            assert_eq!(raw.cls[i].shape(), &[1, 7, size / s, size / s], "size {size}");
            assert_eq!(raw.dist[i].shape(), &[1, 4 * cfg.dfl_bins, size / s, size / s]);
            assert!(raw.cls[i].data().iter().chain(raw.dist[i].data()).all(|v| v.is_finite()));
        }
    }
}

#[test]
fn class_logit_shapes_at_256() {
    let det = Detector::<f32>::new(&ModelConfig::default()).unwrap();
    let raw = det.predict(&input(256, 2)).unwrap();
    let shapes: Vec<&[usize]> = raw.cls.iter().map(|t| t.shape()).collect();
    assert_eq!(shapes, vec![&[1, 7, 32, 32][..], &[1, 7, 16, 16], &[1, 7, 8, 8]]);
}

#[test]
fn same_seed_gives_bit_identical_parameters() {
    let cfg = ModelConfig { seed: 7, ..ModelConfig::default() };
    let a = Detector::<f32>::new(&cfg).unwrap().params().flat();
    let b = Detector::<f32>::new(&cfg).unwrap().params().flat();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()) && a.len() == b.len());
    let other = Detector::<f32>::new(&ModelConfig { seed: 8, ..cfg }).unwrap().params().flat();
    assert_ne!(a, other);
}

#[test]
fn toggle_a_adds_parameters_and_keeps_shapes() {
    let base_cfg = ModelConfig::default();
    let base = Detector::<f32>::new(&base_cfg).unwrap();
    let with_a = Detector::<f32>::new(&base_cfg.with_toggles(true, false, false)).unwrap();
    assert!(with_a.num_parameters() > base.num_parameters());
    let x = input(256, 3);
    let (ra, rb) = (train_mode_logits(&with_a, &x), train_mode_logits(&base, &x));
    for (a, b) in ra.iter().zip(&rb) {
        assert_eq!(a.shape(), b.shape());
    }
    assert!(ra[2].max_abs_diff(&rb[2]) > 1e-3);
}

#[test]
fn toggle_b_adds_parameters() {
    let base = Detector::<f32>::new(&ModelConfig::default()).unwrap();
    let with_b = Detector::<f32>::new(&ModelConfig::default().with_toggles(false, true, false)).unwrap();
    assert!(with_b.num_parameters() > base.num_parameters());
}

#[test]
fn toggle_c_leaves_the_graph_untouched() {
    let off = Detector::<f32>::new(&ModelConfig::default()).unwrap();
    let on = Detector::<f32>::new(&ModelConfig::default().with_toggles(false, false, true)).unwrap();
    assert_eq!(off.params().flat(), on.params().flat());
    let x = input(128, 4);
    assert_eq!(train_mode_logits(&off, &x), train_mode_logits(&on, &x));
}

#[test]
fn baseline_parameters_do_not_depend_on_the_toggled_blocks() {
    // Every baseline parameter keeps its name and value when blocks are added.
    let base = Detector::<f64>::new(&ModelConfig::default()).unwrap();
    let full = Detector::<f64>::new(&ModelConfig::default().with_toggles(true, true, true)).unwrap();
    let (bs, fs) = (base.params(), full.params());
    let mut shared = 0;
    for id in bs.ids() {
        if let Some(other) = fs.find(bs.name(id)) {
            if bs.get(id).shape() == fs.get(other).shape() {
                assert_eq!(bs.get(id).data(), fs.get(other).data(), "{}", bs.name(id));
                shared += 1;
            }
        }
    }
    assert!(shared * 10 >= bs.len() * 8, "only {shared} of {} shared", bs.len());
}

#[test]
fn toggles_off_inference_is_reproducible_bit_for_bit() {
    let x = input(128, 5);
    let run = || Detector::<f32>::new(&ModelConfig::default()).unwrap().predict(&x).unwrap();
    let (a, b) = (run(), run());
    for (p, q) in a.cls.iter().chain(&a.dist).zip(b.cls.iter().chain(&b.dist)) {
        assert!(p.data().iter().zip(q.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}

#[test]
fn paper_shape_is_larger_than_desk_scale() {
    let desk = Detector::<f32>::new(&ModelConfig::default().with_toggles(true, true, true)).unwrap();
    let paper = Detector::<f32>::new(&ModelConfig::paper_shape().with_toggles(true, true, true)).unwrap();
    assert!(paper.num_parameters() > 3 * desk.num_parameters());
    assert_eq!(ModelConfig::paper_shape().channels()[4], 512);
}

#[test]
fn invalid_configs_and_inputs_are_rejected() {
    for cfg in [
        ModelConfig { input_size: 100, ..ModelConfig::default() },
        ModelConfig { input_size: 32, ..ModelConfig::default() },
        ModelConfig { num_classes: 0, ..ModelConfig::default() },
        ModelConfig { dfl_bins: 1, ..ModelConfig::default() },
        ModelConfig { width_multiple: 0.0, ..ModelConfig::default() },
    ] {
        assert!(matches!(Detector::<f32>::new(&cfg), Err(Error::Config(_))), "{cfg:?}");
    }
    let det = Detector::<f32>::new(&ModelConfig::default()).unwrap();
    assert!(det.predict(&Tensor::zeros(&[1, 3, 100, 96])).is_err());
    assert!(det.predict(&Tensor::zeros(&[1, 1, 64, 64])).is_err());
}
