use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use hquic::config::Config;
use hquic_ffi::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_checkpoint(path: &Path, seed: u64) {
    let mut cfg = Config::default();
    cfg.model.n = 8;
    cfg.model.m = 8;
    cfg.fbwt.heads = 2;
    let mut model = hquic::codec::HquicModel::new(&cfg, seed).unwrap();
    model.freeze();
    hquic::checkpoint::save(path, &model, None, 0).unwrap();
}

fn load(path: &Path) -> *mut HquicModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { hquic_model_load(c.as_ptr(), &mut model) }, HquicStatus::Ok);
    assert!(!model.is_null());
    model
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(hquic_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn pixels(w: usize, h: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..3 * w * h).map(|_| rng.gen()).collect()
}

#[test]
fn round_trip_preserves_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.hqck");
    tiny_checkpoint(&ckpt, 1);
    let model = load(&ckpt);
    let (w, h) = (37, 21);
    let src = pixels(w, h, 2);
    let mut buf = HquicBuffer {
        data: ptr::null_mut(),
        len: 0,
    };
    assert_eq!(
        unsafe { hquic_compress(model, src.as_ptr(), w, h, &mut buf) },
        HquicStatus::Ok
    );
    assert!(buf.len > 0);
    let mut img = HquicImage {
        pixels: ptr::null_mut(),
        width: 0,
        height: 0,
    };
    assert_eq!(
        unsafe { hquic_decompress(model, buf.data, buf.len, &mut img) },
        HquicStatus::Ok
    );
    assert_eq!((img.width, img.height), (w, h));
    let mut db = 0.0;
    assert_eq!(
        unsafe { hquic_psnr(src.as_ptr(), img.pixels, w, h, &mut db) },
        HquicStatus::Ok
    );
    assert!(db.is_finite() && db > 0.0);
    unsafe {
        hquic_buffer_free(&mut buf);
        hquic_image_free(&mut img);
        hquic_model_free(model);
    }
    assert!(buf.data.is_null() && img.pixels.is_null());
}

#[test]
fn mismatched_model_is_incompatible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.hqck"), dir.path().join("b.hqck"));
    tiny_checkpoint(&a, 1);
    tiny_checkpoint(&b, 2);
    let (ma, mb) = (load(&a), load(&b));
    let (mut ha, mut hb) = ([0u8; 8], [0u8; 8]);
    unsafe {
        assert_eq!(hquic_model_param_hash(ma, ha.as_mut_ptr()), HquicStatus::Ok);
        assert_eq!(hquic_model_param_hash(mb, hb.as_mut_ptr()), HquicStatus::Ok);
    }
    assert_ne!(ha, hb);
    let src = pixels(16, 16, 3);
    let mut buf = HquicBuffer {
        data: ptr::null_mut(),
        len: 0,
    };
    let mut img = HquicImage {
        pixels: ptr::null_mut(),
        width: 0,
        height: 0,
    };
    unsafe {
        assert_eq!(hquic_compress(ma, src.as_ptr(), 16, 16, &mut buf), HquicStatus::Ok);
        assert_eq!(
            hquic_decompress(mb, buf.data, buf.len, &mut img),
            HquicStatus::Incompatible
        );
        assert!(img.pixels.is_null());
        assert!(last_error().contains("incompatible"));
        let garbage = [7u8; 40];
        assert_ne!(
            hquic_decompress(ma, garbage.as_ptr(), garbage.len(), &mut img),
            HquicStatus::Ok
        );
        hquic_buffer_free(&mut buf);
        hquic_model_free(ma);
        hquic_model_free(mb);
    }
}

#[test]
fn bad_arguments_report_status_and_message() {
    let mut model = ptr::null_mut();
    let missing = CString::new("/nonexistent/m.hqck").unwrap();
    unsafe {
        assert_eq!(hquic_model_load(missing.as_ptr(), &mut model), HquicStatus::NotFound);
        assert!(model.is_null());
        assert!(last_error().contains("/nonexistent/m.hqck"));
        assert_eq!(hquic_model_load(ptr::null(), &mut model), HquicStatus::NullPointer);
        assert_eq!(
            hquic_model_load(missing.as_ptr(), ptr::null_mut()),
            HquicStatus::NullPointer
        );

        let mut db = 0.0;
        let px = [0u8; 3];
        assert_eq!(
            hquic_psnr(px.as_ptr(), px.as_ptr(), 0, 1, &mut db),
            HquicStatus::InvalidArgument
        );
        assert_eq!(hquic_psnr(px.as_ptr(), px.as_ptr(), 1, 1, &mut db), HquicStatus::Ok);
        assert!(db.is_infinite());
        let mut buf = HquicBuffer {
            data: ptr::null_mut(),
            len: 0,
        };
        assert_eq!(
            hquic_compress(ptr::null(), px.as_ptr(), 1, 1, &mut buf),
            HquicStatus::NullPointer
        );

        hquic_model_free(ptr::null_mut());
        hquic_buffer_free(ptr::null_mut());
        hquic_image_free(ptr::null_mut());
    }
    let version = unsafe { CStr::from_ptr(hquic_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}

#[test]
fn errors_are_per_thread() {
    let missing = CString::new("/nonexistent/x.hqck").unwrap();
    let mut model = ptr::null_mut();
    unsafe { hquic_model_load(missing.as_ptr(), &mut model) };
    let other = std::thread::spawn(last_error).join().unwrap();
    assert!(other.is_empty());
    assert!(!last_error().is_empty());
}
