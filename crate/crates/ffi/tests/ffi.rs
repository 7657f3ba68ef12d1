use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use unitlens::activations::capture_rows;
use unitlens::dataset::LabeledImageSet;
use unitlens::metrics::{activational_selectivity, spearman};
use unitlens::nn::{build_network, Arch};
use unitlens_ffi::*;

fn last_error() -> Option<String> {
    let p = ul_last_error();
    (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
}

fn images(n: usize, seed: u32) -> Vec<f32> {
    // deterministic values in [-1, 1]
    (0..n * UL_PIXELS)
        .map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed.wrapping_mul(97)) % 2001) as f32 / 1000.0 - 1.0)
        .collect()
}

fn new_model(seed: u64) -> *mut UlModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { ul_model_new(seed, &mut m) }, UlStatus::Ok);
    assert!(!m.is_null());
    m
}

fn forward(m: *const UlModel, x: &[f32], layer: u32) -> Vec<f32> {
    let n = x.len() / UL_PIXELS;
    let mut w = 0;
    assert_eq!(unsafe { ul_model_activation_width(m, layer, &mut w) }, UlStatus::Ok);
    let mut out = vec![f32::NAN; n * w];
    let s = unsafe { ul_model_forward_layer(m, x.as_ptr(), n, layer, out.as_mut_ptr(), out.len()) };
    assert_eq!(s, UlStatus::Ok, "{:?}", last_error());
    out
}

#[test]
fn version_and_pixel_count() {
    let v = unsafe { CStr::from_ptr(ul_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    assert_eq!(UL_PIXELS, unitlens::dataset::PIXELS);
}

#[test]
fn model_handle_lifecycle() {
    let m = new_model(4);
    let mut units = 0;
    assert_eq!(unsafe { ul_model_units(m, UL_LAYER_FC1, &mut units) }, UlStatus::Ok);
    assert_eq!(units, Arch::canonical().units(unitlens::nn::LayerTag::Fc1));

    let x = images(3, 1);
    let mut labels = [255u8; 3];
    assert_eq!(unsafe { ul_model_predict(m, x.as_ptr(), 3, labels.as_mut_ptr()) }, UlStatus::Ok);
    let expected = build_network::<f32>(Arch::canonical(), 4).predict(&x).unwrap();
    assert_eq!(labels.to_vec(), expected);

    let mut copy = ptr::null_mut();
    assert_eq!(unsafe { ul_model_clone(m, &mut copy) }, UlStatus::Ok);
    let before = forward(m, &x, UL_LAYER_CONV2);
    assert!(before.iter().any(|&v| v != 0.0));

    // ablating the copy leaves the original alone
    let masked = [0usize, 5, 17];
    assert_eq!(unsafe { ul_model_ablate(copy, UL_LAYER_CONV2, masked.as_ptr(), masked.len()) }, UlStatus::Ok);
    assert_eq!(forward(m, &x, UL_LAYER_CONV2), before);
    let after = forward(copy, &x, UL_LAYER_CONV2);
    let plane = after.len() / 3 / units_of(copy, UL_LAYER_CONV2);
    for row in after.chunks(after.len() / 3) {
        for &u in &masked {
            assert!(row[u * plane..(u + 1) * plane].iter().all(|&v| v == 0.0));
        }
    }
    unsafe {
        ul_model_free(copy);
        ul_model_free(m);
        ul_model_free(ptr::null_mut());
    }
}

fn units_of(m: *const UlModel, layer: u32) -> usize {
    let mut n = 0;
    assert_eq!(unsafe { ul_model_units(m, layer, &mut n) }, UlStatus::Ok);
    n
}

#[test]
fn checkpoints_round_trip_through_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let path = CString::new(tmp.path().join("m.ckpt").to_str().unwrap()).unwrap();
    let m = new_model(9);
    assert_eq!(unsafe { ul_model_save(m, path.as_ptr()) }, UlStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { ul_model_load(path.as_ptr(), &mut loaded) }, UlStatus::Ok);
    let x = images(2, 5);
    assert_eq!(forward(m, &x, UL_LAYER_OUT), forward(loaded, &x, UL_LAYER_OUT));

    let missing = CString::new(tmp.path().join("nope.ckpt").to_str().unwrap()).unwrap();
    let mut none = ptr::null_mut();
    assert_eq!(unsafe { ul_model_load(missing.as_ptr(), &mut none) }, UlStatus::Data);
    assert!(none.is_null());
    assert!(last_error().unwrap().contains("nope.ckpt"));
    unsafe {
        ul_model_free(m);
        ul_model_free(loaded);
    }
}

#[test]
fn error_codes_and_last_error() {
    let m = new_model(0);
    let mut n = 0;
    assert_eq!(unsafe { ul_model_units(m, 6, &mut n) }, UlStatus::InvalidArgument);
    assert!(last_error().unwrap().contains("layer 6"));
    // success clears the message
    assert_eq!(unsafe { ul_model_units(m, UL_LAYER_CONV1, &mut n) }, UlStatus::Ok);
    assert_eq!(last_error(), None);

    assert_eq!(unsafe { ul_model_units(ptr::null(), 0, &mut n) }, UlStatus::NullPointer);
    assert_eq!(unsafe { ul_model_units(m, 0, ptr::null_mut()) }, UlStatus::NullPointer);
    assert_eq!(unsafe { ul_model_new(0, ptr::null_mut()) }, UlStatus::NullPointer);
    assert_eq!(unsafe { ul_model_load(ptr::null(), &mut ptr::null_mut()) }, UlStatus::NullPointer);

    let bad = [9999usize];
    assert_eq!(unsafe { ul_model_ablate(m, UL_LAYER_FC2, bad.as_ptr(), 1) }, UlStatus::InvalidArgument);
    assert!(last_error().unwrap().contains("9999"));

    let x = images(2, 0);
    let mut small = [0f32; 4];
    let s = unsafe { ul_model_forward_layer(m, x.as_ptr(), 2, UL_LAYER_FC2, small.as_mut_ptr(), small.len()) };
    assert_eq!(s, UlStatus::Shape);

    let mut r = 0.0;
    let mut p = 0.0;
    let flat = [1.0, 1.0, 1.0, 1.0];
    let y = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(unsafe { ul_spearman(flat.as_ptr(), y.as_ptr(), 4, &mut r, &mut p) }, UlStatus::Numeric);
    assert_eq!(unsafe { ul_correlation_p_value(0.5, 2, &mut p) }, UlStatus::InvalidArgument);
    let coords = [0.0; 8];
    let labels = [0u8; 4];
    let mut nh = 0.0;
    assert_eq!(unsafe { ul_neighborhood_hit(coords.as_ptr(), 4, labels.as_ptr(), 6, false, &mut nh) }, UlStatus::InvalidArgument);
    unsafe { ul_model_free(m) };
}

#[test]
fn statistics_match_the_library() {
    let (mut r, mut p) = (0.0, 0.0);
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    let y = [1.0, 3.0, 2.0, 5.0, 4.0];
    assert_eq!(unsafe { ul_spearman(x.as_ptr(), y.as_ptr(), 5, &mut r, &mut p) }, UlStatus::Ok);
    assert_eq!(r, 0.8);
    assert_eq!(p, spearman(&x, &y).unwrap().p);
    assert_eq!(unsafe { ul_pearson(x.as_ptr(), y.as_ptr(), 5, &mut r, &mut p) }, UlStatus::Ok);
    assert!((r - 0.8).abs() < 1e-12);
    assert_eq!(unsafe { ul_correlation_p_value(0.6, 10, &mut p) }, UlStatus::Ok);
    assert!((0.06..=0.08).contains(&p));

    // two far-apart clusters of three
    let coords = [0.0, 0.0, 0.1, 0.0, 0.0, 0.1, 9.0, 9.0, 9.1, 9.0, 9.0, 9.1];
    let labels = [0u8, 0, 0, 1, 1, 1];
    let mut nh = 0.0;
    assert_eq!(unsafe { ul_neighborhood_hit(coords.as_ptr(), 6, labels.as_ptr(), 2, true, &mut nh) }, UlStatus::Ok);
    assert_eq!(nh, 1.0);

    // a rotated, scaled, shifted copy aligns exactly
    let a = [0.0, 0.0, 2.0, 0.0, 0.0, 1.0, 3.0, 3.0];
    let b: Vec<f64> = a.chunks(2).flat_map(|q| [-2.0 * q[1] + 5.0, 2.0 * q[0] - 1.0]).collect();
    let mut d = 1.0;
    let mut aligned = [0.0; 8];
    assert_eq!(unsafe { ul_procrustes(a.as_ptr(), b.as_ptr(), 4, &mut d, aligned.as_mut_ptr()) }, UlStatus::Ok);
    assert!(d < 1e-20);
    let mut d2 = 1.0;
    assert_eq!(unsafe { ul_procrustes(a.as_ptr(), b.as_ptr(), 4, &mut d2, ptr::null_mut()) }, UlStatus::Ok);
    assert_eq!(d, d2);
}

#[test]
fn selectivity_over_raw_values_and_saved_matrices() {
    // unit 0 fires for class 2 only, unit 1 is silent
    let (rows, cols) = (4, 3);
    let values = [0.0, 0.0, 1.0, 3.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 2.0f32];
    let labels = [0u8, 2, 1, 1];
    let mut sel = [f64::NAN; 3];
    let mut class = [0u8; 3];
    let s = unsafe { ul_selectivity(values.as_ptr(), rows, cols, labels.as_ptr(), sel.as_mut_ptr(), class.as_mut_ptr()) };
    assert_eq!(s, UlStatus::Ok);
    assert_eq!((sel[0], class[0]), (1.0, 2));
    assert_eq!(sel[1], 0.0);

    let model = build_network::<f32>(Arch::canonical(), 2);
    let n = 12;
    let set = LabeledImageSet::new("synthetic", images(n, 3), (0..n).map(|i| (i % 10) as u8).collect()).unwrap();
    let m = capture_rows(&model, &set, &(0..n).collect::<Vec<_>>(), "ffi-test").unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("acts.bin");
    m.save(&path).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { ul_activations_load(c.as_ptr(), &mut h) }, UlStatus::Ok);
    let (mut r, mut k) = (0, 0);
    assert_eq!(unsafe { ul_activations_shape(h, &mut r, &mut k) }, UlStatus::Ok);
    assert_eq!((r, k), (m.rows, m.cols));
    let mut sel = vec![0.0; k];
    let mut class = vec![0u8; k];
    assert_eq!(unsafe { ul_activations_selectivity(h, sel.as_mut_ptr(), class.as_mut_ptr(), k) }, UlStatus::Ok);
    let want = activational_selectivity(&m).unwrap();
    for (i, w) in want.iter().enumerate() {
        assert_eq!((sel[i], class[i]), (w.selectivity, w.argmax));
    }
    assert_eq!(
        unsafe { ul_activations_selectivity(h, sel.as_mut_ptr(), class.as_mut_ptr(), k - 1) },
        UlStatus::Shape
    );
    unsafe {
        ul_activations_free(h);
        ul_activations_free(ptr::null_mut());
    }
}

fn exported_functions() -> Vec<String> {
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    src.lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap().to_string())
        .collect()
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/unitlens.h")).unwrap();
    let fns = exported_functions();
    assert!(fns.len() >= 20, "{fns:?}");
    for f in &fns {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    for item in ["typedef struct UlModel UlModel", "typedef struct UlActivations UlActivations", "UL_STATUS_NULL_POINTER = 1", "#define UL_LAYER_OUT 5", "#define UL_PIXELS 784"] {
        assert!(header.contains(item), "{item} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"unitlens.h\"\n\
         int probe(void) {\n\
           UlModel *m = 0;\n\
           UlStatus s = ul_model_new(1, &m);\n\
           size_t n = 0;\n\
           if (s == UL_STATUS_OK) s = ul_model_units(m, UL_LAYER_FC1, &n);\n\
           ul_model_free(m);\n\
           return s == UL_STATUS_OK && ul_last_error() == 0 ? (int)n : -1;\n\
         }\n",
    )
    .unwrap();
    let Ok(out) = Command::new("cc").arg("-std=c99").arg("-Wall").arg("-Werror").arg("-fsyntax-only").arg("-I").arg(&dir).arg(&src).output() else {
        eprintln!("no C compiler on PATH; skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
