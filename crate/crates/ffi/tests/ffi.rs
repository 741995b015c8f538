use std::ffi::{c_char, CStr, CString};
use std::ptr;

use svtrv2::backbone::Variant;
use svtrv2::model::{ModelConfig, SvtrV2};
use svtrv2::msr::{resize_bilinear, Charset, ResizeMode};
use svtrv2::tensor::Tensor;
use svtrv2::train::{save_checkpoint, Checkpoint, Phase};
use svtrv2_ffi::*;

fn write_model(dir: &std::path::Path, sgm: bool) -> (CString, SvtrV2, svtrv2::nn::ParamStore<f32>, Charset) {
    let charset = Charset::new("abcdef".chars()).unwrap();
    let mut config = ModelConfig::new(Variant::Nano, charset.len());
    config.sgm = sgm;
    let (model, store) = SvtrV2::init::<f32>(config, 9).unwrap();
    let phase = if sgm { Phase::B } else { Phase::A };
    let ckpt = Checkpoint::from_model(&model, &store, &charset, phase, 0).unwrap();
    let path = dir.join("m.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    (c, model, store, charset)
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    unsafe {
        svtr_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn recognize_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, model, store, charset) = write_model(dir.path(), true);
    let (h, w) = (20, 70);
    let pixels: Vec<f32> = (0..h * w).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
    let mut handle = ptr::null_mut();
    unsafe {
        assert_eq!(svtr_model_load(path.as_ptr(), &mut handle), SvtrStatus::Ok);
        let mut n = 0usize;
        assert_eq!(svtr_model_num_classes(handle, &mut n), SvtrStatus::Ok);
        assert_eq!(n, 6);
        let mut buf = vec![0 as c_char; 64];
        let mut len = 0usize;
        let mut conf = 0.0f64;
        let st = svtr_recognize(
            handle,
            pixels.as_ptr(),
            h,
            w,
            1,
            SvtrResize::Msr,
            buf.as_mut_ptr(),
            buf.len(),
            &mut len,
            &mut conf,
        );
        assert_eq!(st, SvtrStatus::Ok, "{}", last_error());
        let got = CStr::from_ptr(buf.as_ptr()).to_str().unwrap().to_string();
        assert_eq!(got.len(), len);

        let mut planar = Vec::new();
        for _ in 0..3 {
            planar.extend_from_slice(&pixels);
        }
        let img = Tensor::new(&[3, h, w], planar).unwrap();
        let img = resize_bilinear(&img, ResizeMode::Msr.target(h, w).unwrap()).unwrap();
        let (lean, lean_store) = model.strip_for_inference(&store).unwrap();
        let logits = lean.logits(&lean_store, &[&img]).unwrap();
        let s = logits.shape().to_vec();
        let d = svtrv2::ctc::greedy_decode(&logits.reshape(&[s[1], s[2]]).unwrap()).unwrap();
        assert_eq!(got, charset.decode(&d.indices));
        assert_eq!(conf, d.confidence);

        if len > 0 {
            let mut tiny = [0 as c_char; 1];
            let st = svtr_recognize(
                handle,
                pixels.as_ptr(),
                h,
                w,
                1,
                SvtrResize::Msr,
                tiny.as_mut_ptr(),
                1,
                &mut len,
                ptr::null_mut(),
            );
            assert_eq!(st, SvtrStatus::BufferTooSmall);
            assert_eq!(len, got.len());
        }
        svtr_model_free(handle);
    }
}

#[test]
fn errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut handle = ptr::null_mut();
    unsafe {
        assert_eq!(svtr_model_load(ptr::null(), &mut handle), SvtrStatus::NullPointer);
        let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
        assert_eq!(svtr_model_load(missing.as_ptr(), &mut handle), SvtrStatus::Io);
        assert!(handle.is_null());
        assert!(!last_error().is_empty());

        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, b"NOTACKPT\0\0\0\0").unwrap();
        let bad = CString::new(bad.to_str().unwrap()).unwrap();
        assert_eq!(svtr_model_load(bad.as_ptr(), &mut handle), SvtrStatus::Format);

        let (path, ..) = write_model(dir.path(), false);
        assert_eq!(svtr_model_load(path.as_ptr(), &mut handle), SvtrStatus::Ok);
        let px = [0.5f32; 4];
        let mut len = 0;
        let st = svtr_recognize(
            handle,
            px.as_ptr(),
            2,
            2,
            2,
            SvtrResize::Msr,
            ptr::null_mut(),
            0,
            &mut len,
            ptr::null_mut(),
        );
        assert_eq!(st, SvtrStatus::InvalidArgument);
        let st = svtr_recognize(
            handle,
            ptr::null(),
            2,
            2,
            1,
            SvtrResize::Msr,
            ptr::null_mut(),
            0,
            &mut len,
            ptr::null_mut(),
        );
        assert_eq!(st, SvtrStatus::NullPointer);
        svtr_model_free(handle);
        svtr_model_free(ptr::null_mut());
        assert!(!CStr::from_ptr(svtr_version()).to_str().unwrap().is_empty());
    }
}

#[test]
fn header_declares_the_interface() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/svtrv2.h")).unwrap();
    for name in [
        "svtr_model_load",
        "svtr_model_free",
        "svtr_recognize",
        "svtr_last_error",
        "SvtrModel",
        "SVTR_STATUS_BUFFER_TOO_SMALL",
    ] {
        assert!(header.contains(name), "{name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(&src, "#include \"svtrv2.h\"\nint main(void) { SvtrModel *m = 0; return (int)svtr_model_load(0, &m) == 1 ? 0 : 1; }\n").unwrap();
    let out = std::process::Command::new(cc)
        .args([
            "-fsyntax-only",
            "-Wall",
            "-Werror",
            "-I",
            concat!(env!("CARGO_MANIFEST_DIR"), "/include"),
        ])
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if std::process::Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc);
        }
    }
    Err(())
}
