use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unitlens::ablation::{apply_ablation, AblationMask};
use unitlens::activations::{capture, capture_rows, ActivationMatrix};
use unitlens::dataset::{BatchPlan, LabeledImageSet, PIXELS};
use unitlens::nn::{build_network, Arch, Capture, LayerTag};
use unitlens::Error;

fn set(n: usize, seed: u64) -> LabeledImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..n * PIXELS).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let labels = (0..n).map(|i| (i * 7 % 10) as u8).collect();
    LabeledImageSet::new("random", images, labels).unwrap()
}

#[test]
fn canonical_layer_widths() {
    let m = build_network(Arch::canonical(), 0);
    let s = set(3, 0);
    let a = capture(&m, &s, &BatchPlan::evaluation(1), "ckpt").unwrap();
    assert_eq!((a.rows, a.cols), (3, 17_280));
    let widths: Vec<usize> = LayerTag::HIDDEN
        .iter()
        .map(|&t| a.slice_layer(t).unwrap().width)
        .collect();
    assert_eq!(widths, [12_544, 3_136, 576, 512, 512]);
    assert_eq!(a.slice_layer(LayerTag::Out).unwrap().width, 10);
    assert!(a.values.iter().all(|v| v.is_finite() && *v >= 0.0));
}

#[test]
fn test_plan_drops_the_partial_batch() {
    let m = build_network(Arch::tiny(2, 4), 1);
    let s = set(70, 1);
    let a = capture(&m, &s, &BatchPlan::evaluation(32), "x").unwrap();
    assert_eq!(a.rows, 64);
    assert_eq!(a.row_index, (0..64).collect::<Vec<_>>());
}

#[test]
fn rows_equal_lone_forward_passes() {
    let m = build_network(Arch::tiny(3, 8), 2);
    let s = set(21, 2);
    let a = capture(&m, &s, &BatchPlan::evaluation(7), "x").unwrap();
    for i in [0, 9, 20] {
        let f = m.forward(s.image(i), Capture::all()).unwrap();
        let lone: Vec<f32> = LayerTag::HIDDEN
            .iter()
            .flat_map(|t| f.captured[t].iter().copied())
            .collect();
        assert_eq!(a.row(i), &lone[..]);
        assert_eq!(a.slice_layer(LayerTag::Out).unwrap().row(i), &f.log_probs[..]);
    }
}

#[test]
fn ablated_fc1_block_is_zero() {
    let m = build_network(Arch::tiny(2, 8), 3);
    let mask = AblationMask::new(&m.arch, LayerTag::Fc1, (0..8).collect()).unwrap();
    let a = capture(&apply_ablation(&m, &mask).unwrap(), &set(10, 3), &BatchPlan::evaluation(5), "x").unwrap();
    let fc1 = a.slice_layer(LayerTag::Fc1).unwrap();
    assert!(fc1.to_dense().iter().all(|&v| v == 0.0));
}

#[test]
fn slices_concatenate_to_the_matrix() {
    let m = build_network(Arch::tiny(2, 8), 4);
    let a = capture(&m, &set(6, 4), &BatchPlan::evaluation(2), "x").unwrap();
    let slices: Vec<_> = LayerTag::HIDDEN.iter().map(|&t| a.slice_layer(t).unwrap()).collect();
    for i in 0..a.rows {
        let row: Vec<f32> = slices.iter().flat_map(|s| s.row(i).iter().copied()).collect();
        assert_eq!(row, a.row(i));
    }
    assert_eq!(
        a.slice_layer(LayerTag::Conv3).unwrap().to_dense(),
        a.slice_layer(LayerTag::Conv3).unwrap().to_dense()
    );
    let mut no_out = a.clone();
    no_out.out = None;
    assert!(matches!(no_out.slice_layer(LayerTag::Out), Err(Error::UnknownLayer(_))));
}

#[test]
fn capture_is_deterministic() {
    let m = build_network(Arch::tiny(3, 8), 5);
    let s = set(17, 5);
    let a = capture(&m, &s, &BatchPlan::evaluation(1), "x").unwrap();
    let b = capture(&m, &s, &BatchPlan::evaluation(1), "x").unwrap();
    assert_eq!(a, b);
}

#[test]
fn save_load_round_trip_and_size() {
    let m = build_network(Arch::tiny(2, 8), 6);
    let a = capture(&m, &set(9, 6), &BatchPlan::evaluation(3), "abc123").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.act");
    a.save(&p).unwrap();
    let b = ActivationMatrix::load(&p).unwrap();
    assert_eq!(a, b);
    let len = std::fs::metadata(&p).unwrap().len() as usize;
    let payload = 4 * a.rows * (a.cols + a.out_width);
    assert!(len > payload && len - payload < 4096, "{len} vs {payload}");
}

#[test]
fn inconsistent_files_are_rejected() {
    let m = build_network(Arch::tiny(2, 8), 7);
    let a = capture(&m, &set(4, 7), &BatchPlan::evaluation(2), "x").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.act");
    a.save(&p).unwrap();
    let bytes = std::fs::read(&p).unwrap();

    // header column count no longer matches the layer table
    let mut wrong = bytes.clone();
    wrong[20] = wrong[20].wrapping_add(1);
    std::fs::write(&p, &wrong).unwrap();
    assert!(matches!(ActivationMatrix::load(&p), Err(Error::Shape(_))));

    std::fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
    assert!(ActivationMatrix::load(&p).is_err());

    let mut bad = bytes.clone();
    bad[1] = b'?';
    std::fs::write(&p, &bad).unwrap();
    assert!(matches!(ActivationMatrix::load(&p), Err(Error::Corrupt { .. })));
}

#[test]
fn subsample_is_stratified_and_recorded() {
    let m = build_network(Arch::tiny(2, 4), 8);
    let s = set(100, 8);
    let all: Vec<usize> = (0..100).collect();
    let a = capture_rows(&m, &s, &all, "x").unwrap();
    let sub = a.subsample(20, 3).unwrap();
    assert_eq!(sub.rows, 20);
    assert_eq!(sub.provenance.subsamples.len(), 1);
    assert_eq!(sub.provenance.subsamples[0].from_rows, 100);
    for c in 0..10u8 {
        assert_eq!(sub.labels.iter().filter(|&&l| l == c).count(), 2);
    }
    for (k, &img) in sub.row_index.iter().enumerate() {
        assert_eq!(sub.row(k), a.row(img));
    }
    assert_eq!(sub, a.subsample(20, 3).unwrap());
}

#[test]
fn csv_export_of_a_slice() {
    let m = build_network(Arch::tiny(2, 4), 9);
    let a = capture(&m, &set(5, 9), &BatchPlan::evaluation(1), "x").unwrap();
    let mut buf = Vec::new();
    a.write_csv(&mut buf, Some(LayerTag::Fc2), 3).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0].split(',').count(), 3 + 4);
}
