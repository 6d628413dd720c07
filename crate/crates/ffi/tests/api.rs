use std::ffi::{CStr, CString};
use std::ptr;

use coseg_core::nn::{checkpoint, CosegNet};
use coseg_core::pipeline::PipelineConfig;
use coseg_core::SeededRng;
use coseg_ffi::*;

fn last_error() -> String {
    let p = coseg_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn disc(w: usize, h: usize, cx: f64, cy: f64, r: f64) -> Vec<u8> {
    (0..w * h).map(|i| (((i % w) as f64 - cx).powi(2) + ((i / w) as f64 - cy).powi(2) <= r * r) as u8).collect()
}

#[test]
fn evaluate_matches_hand_counts() {
    // tp = 2, fp = 1, fn = 1
    let pred = [1u8, 1, 1, 0];
    let gt = [1u8, 1, 0, 1];
    let mut m = CosegMetrics::default();
    assert_eq!(unsafe { coseg_evaluate(pred.as_ptr(), gt.as_ptr(), 2, 2, &mut m) }, CosegStatus::Ok);
    assert_eq!((m.recall, m.precision), (2.0 / 3.0, 2.0 / 3.0));
    assert_eq!(m.dice, 4.0 / 6.0);
    assert_eq!(m.volumetric_similarity, 1.0);
    assert!(m.avd > 0.0);
    let empty = [0u8; 4];
    assert_eq!(unsafe { coseg_evaluate(empty.as_ptr(), gt.as_ptr(), 2, 2, &mut m) }, CosegStatus::Ok);
    assert!(m.avd.is_nan());
}

#[test]
fn null_and_size_errors_set_message() {
    let gt = [1u8; 4];
    let mut m = CosegMetrics::default();
    assert_eq!(unsafe { coseg_evaluate(ptr::null(), gt.as_ptr(), 2, 2, &mut m) }, CosegStatus::NullPointer);
    assert!(last_error().contains("pred"));
    assert_eq!(unsafe { coseg_evaluate(gt.as_ptr(), gt.as_ptr(), 0, 2, &mut m) }, CosegStatus::InvalidArgument);
    assert!(last_error().contains("0x2"));
}

#[test]
fn grabcut_segments_bright_disc() {
    let (w, h) = (96, 96);
    let gt = disc(w, h, 48.0, 48.0, 9.0);
    let img: Vec<f64> = gt.iter().enumerate().map(|(i, &g)| if g == 1 { 0.8 } else { 0.3 } + 0.02 * ((i * 7919 % 13) as f64 / 13.0 - 0.5)).collect();
    let recist = [39.0, 48.0, 57.0, 48.0, 48.0, 39.5, 48.0, 56.5];
    let mut out = vec![0u8; w * h];
    let st = unsafe { coseg_grabcut(img.as_ptr(), w, h, recist.as_ptr(), 24, 1, out.as_mut_ptr()) };
    assert_eq!(st, CosegStatus::Ok, "{}", last_error());
    let mut m = CosegMetrics::default();
    unsafe { coseg_evaluate(out.as_ptr(), gt.as_ptr(), w, h, &mut m) };
    assert!(m.dice > 0.9, "dice {}", m.dice);

    let outside = [39.0, 48.0, 99.0, 48.0, 48.0, 39.5, 48.0, 56.5];
    assert_eq!(unsafe { coseg_grabcut(img.as_ptr(), w, h, outside.as_ptr(), 24, 1, out.as_mut_ptr()) }, CosegStatus::InvalidArgument);
    assert!(last_error().contains("out of bounds"));
}

#[test]
fn crf_with_zero_weights_thresholds() {
    let prob = [0.1, 0.7, 0.5, 0.9, 0.2, 0.6];
    let img = [0.0; 6];
    let params = CosegCrfParams { w_app: 0.0, w_smooth: 0.0, ..coseg_crf_default_params() };
    let mut out = [9u8; 6];
    assert_eq!(unsafe { coseg_crf_refine(img.as_ptr(), prob.as_ptr(), 3, 2, &params, out.as_mut_ptr()) }, CosegStatus::Ok);
    assert_eq!(out, [0, 1, 0, 1, 0, 1]);
    assert_eq!(unsafe { coseg_crf_refine(img.as_ptr(), prob.as_ptr(), 3, 2, ptr::null(), out.as_mut_ptr()) }, CosegStatus::Ok);
    let bad = CosegCrfParams { theta_beta: 0.0, ..coseg_crf_default_params() };
    assert_eq!(unsafe { coseg_crf_refine(img.as_ptr(), prob.as_ptr(), 3, 2, &bad, out.as_mut_ptr()) }, CosegStatus::InvalidArgument);
}

#[test]
fn model_round_trip_matches_core() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.toml");
    std::fs::write(
        &cfg_path,
        "[preprocess]\nsize = 16\n[network]\nstem_width = 2\nwidths = [2, 3, 3, 4]\ndecoder_width = 3\nattention = \"channel_spatial\"\n",
    )
    .unwrap();
    let cfg = PipelineConfig::load(&cfg_path).unwrap();
    let net = CosegNet::new(cfg.network.clone(), &mut SeededRng::new(5)).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    checkpoint::save(net.params(), &ckpt).unwrap();

    let (c, k) = (CString::new(cfg_path.to_str().unwrap()).unwrap(), CString::new(ckpt.to_str().unwrap()).unwrap());
    let mut model: *mut CosegModel = ptr::null_mut();
    assert_eq!(unsafe { coseg_model_load(c.as_ptr(), k.as_ptr(), &mut model) }, CosegStatus::Ok);
    assert_eq!(unsafe { coseg_model_input_size(model) }, 16);

    let mut rng = SeededRng::new(9);
    let a: Vec<f64> = (0..256).map(|_| rng.uniform()).collect();
    let b: Vec<f64> = (0..256).map(|_| rng.uniform()).collect();
    let (mut pa, mut pb) = (vec![0.0; 256], vec![0.0; 256]);
    assert_eq!(unsafe { coseg_model_predict_pair(model, a.as_ptr(), b.as_ptr(), 16, pa.as_mut_ptr(), pb.as_mut_ptr()) }, CosegStatus::Ok);
    // checkpoints store f32, so compare with a core model loaded the same way
    let mut net = net;
    net.params_mut().load(&checkpoint::load(&ckpt).unwrap()).unwrap();
    let t = |v: &[f64]| coseg_core::nn::Tensor::new(vec![1, 1, 16, 16], v.to_vec()).unwrap();
    let (qa, qb) = net.predict_pair(&t(&a), &t(&b)).unwrap();
    assert_eq!(pa, qa.data());
    assert_eq!(pb, qb.data());

    assert_eq!(unsafe { coseg_model_predict_pair(model, a.as_ptr(), b.as_ptr(), 8, pa.as_mut_ptr(), pb.as_mut_ptr()) }, CosegStatus::DimensionMismatch);
    unsafe { coseg_model_free(model) };
    unsafe { coseg_model_free(ptr::null_mut()) };

    let missing = CString::new(dir.path().join("nope.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { coseg_model_load(c.as_ptr(), missing.as_ptr(), &mut model) }, CosegStatus::Io);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/coseg.h")).unwrap();
    for name in [
        "coseg_last_error",
        "coseg_version",
        "coseg_model_load",
        "coseg_model_free",
        "coseg_model_input_size",
        "coseg_model_predict_pair",
        "coseg_grabcut",
        "coseg_crf_default_params",
        "coseg_crf_refine",
        "coseg_evaluate",
        "typedef struct CosegModel CosegModel",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
    assert_eq!(unsafe { CStr::from_ptr(coseg_version()) }.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
