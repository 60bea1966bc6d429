use std::ffi::{CStr, CString};
use std::ptr;

use brepler_core::brep::{serialize_brep, ShellBuilder, Vec3};
use brepler_core::modifier::{ModifierConfig, ModifierParams};
use brepler_ffi::*;

fn box_text(hi: f64) -> CString {
    let mut b = ShellBuilder::new();
    b.add_box(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(hi, hi, hi));
    CString::new(serialize_brep(&b.build().unwrap())).unwrap()
}

fn parse(text: &CString) -> *mut BreplerModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { brepler_model_parse(text.as_ptr(), &mut m) }, BreplerStatus::Ok);
    assert!(!m.is_null());
    m
}

fn last_error() -> String {
    let p = brepler_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn parse_serialize_roundtrip() {
    let text = box_text(1.0);
    let m = parse(&text);
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { brepler_model_serialize(m, &mut out) }, BreplerStatus::Ok);
    assert_eq!(unsafe { CStr::from_ptr(out) }.to_bytes(), text.as_bytes());
    let mut n = 0usize;
    assert_eq!(unsafe { brepler_model_face_count(m, &mut n) }, BreplerStatus::Ok);
    assert_eq!(n, 6);
    unsafe {
        brepler_string_free(out);
        brepler_model_free(m);
    }
}

#[test]
fn errors_set_status_and_message() {
    let bad = CString::new("not a model").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { brepler_model_parse(bad.as_ptr(), &mut m) }, BreplerStatus::Parse);
    assert!(m.is_null());
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { brepler_model_parse(ptr::null(), &mut m) }, BreplerStatus::NullArgument);
    assert!(last_error().contains("text"));
    let text = box_text(1.0);
    assert_eq!(unsafe { brepler_model_parse(text.as_ptr(), ptr::null_mut()) }, BreplerStatus::NullArgument);
    let invalid = [0xffu8, 0xfe, 0];
    assert_eq!(
        unsafe { brepler_model_parse(invalid.as_ptr().cast(), &mut m) },
        BreplerStatus::InvalidUtf8
    );
    let mut p = ptr::null_mut();
    let missing = CString::new("/nonexistent/ckpt.bin").unwrap();
    assert_eq!(unsafe { brepler_params_load(missing.as_ptr(), &mut p) }, BreplerStatus::Io);
    unsafe {
        brepler_model_free(ptr::null_mut());
        brepler_params_free(ptr::null_mut());
        brepler_string_free(ptr::null_mut());
    }
}

#[test]
fn validity_and_match() {
    let a = parse(&box_text(1.0));
    let b = parse(&box_text(1.5));
    let mut v = BreplerValidity::default();
    assert_eq!(unsafe { brepler_model_validity(a, &mut v) }, BreplerStatus::Ok);
    assert!(v.manifold && v.closed && v.self_intersection_free && v.valid);
    let mut s = BreplerMatch::default();
    assert_eq!(unsafe { brepler_match(a, a, 0.1, &mut s) }, BreplerStatus::Ok);
    assert_eq!((s.f1, s.success), ([1.0; 3], true));
    assert_eq!(unsafe { brepler_match(a, b, 0.1, &mut s) }, BreplerStatus::Ok);
    assert!(!s.success && s.f1[0] < 1.0);
    assert_eq!(unsafe { brepler_match(a, b, -1.0, &mut s) }, BreplerStatus::InvalidArgument);
    unsafe {
        brepler_model_free(a);
        brepler_model_free(b);
    }
}

#[test]
fn edit_with_loaded_params() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("zeros.ckpt");
    let cfg = ModifierConfig {
        width: 16,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        max_target_len: 8,
        ..ModifierConfig::default()
    };
    std::fs::write(&path, ModifierParams::zeros(&cfg).unwrap().to_bytes()).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut params = ptr::null_mut();
    assert_eq!(unsafe { brepler_params_load(cpath.as_ptr(), &mut params) }, BreplerStatus::Ok);
    let m = parse(&box_text(1.0));
    let dir3 = [1.0, 1.0, 1.0];
    let bbox = [0.2, 0.2, 0.6, 0.6];
    let prompt = CString::new("Remove the boss").unwrap();
    let mut out = ptr::null_mut();
    // Zero weights never emit the end token, so generation runs into the cap.
    let st = unsafe { brepler_edit(m, params, dir3.as_ptr(), bbox.as_ptr(), prompt.as_ptr(), &mut out, ptr::null_mut()) };
    assert_eq!(st, BreplerStatus::Truncated);
    assert!(out.is_null());
    assert!(last_error().contains("length cap"));
    let bad_box = [0.6, 0.2, 0.2, 0.6];
    let st = unsafe { brepler_edit(m, params, dir3.as_ptr(), bad_box.as_ptr(), prompt.as_ptr(), &mut out, ptr::null_mut()) };
    assert_ne!(st, BreplerStatus::Ok);
    unsafe {
        brepler_model_free(m);
        brepler_params_free(params);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/brepler.h")).unwrap();
    for name in [
        "brepler_last_error",
        "brepler_model_parse",
        "brepler_model_serialize",
        "brepler_model_face_count",
        "brepler_model_free",
        "brepler_string_free",
        "brepler_model_validity",
        "brepler_match",
        "brepler_params_load",
        "brepler_params_free",
        "brepler_edit",
        "typedef struct BreplerModel BreplerModel;",
    ] {
        assert!(header.contains(name), "{name}");
    }
}
