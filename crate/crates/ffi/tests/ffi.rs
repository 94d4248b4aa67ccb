use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use clipchain::archive::{save_autoencoder, save_denoiser, DenoiserMeta};
use clipchain::autoencoder::{Autoencoder, AutoencoderSpec};
use clipchain::denoiser::{DenoiserSpec, TinyVideoDenoiser};
use clipchain::ScheduleProfile;
use clipchain_ffi::*;

fn write_models(dir: &Path) -> (CString, CString) {
    let spec = DenoiserSpec {
        frames: 4,
        height: 4,
        width: 4,
        ..DenoiserSpec::default()
    };
    let model = TinyVideoDenoiser::new(spec.clone(), 100, 1).unwrap();
    let meta = DenoiserMeta {
        spec,
        num_timesteps: 100,
        schedule: ScheduleProfile::default(),
        vocabulary: vec!["disc moving left".into(), "square moving up".into()],
        label_seed: 0,
    };
    let mp = dir.join("denoiser.ckpt");
    save_denoiser(&mp, &model, &meta).unwrap();
    let ae = Autoencoder::new(AutoencoderSpec::default(), 2).unwrap();
    let ap = dir.join("autoencoder.ckpt");
    save_autoencoder(&ap, &ae, 1.5).unwrap();
    let c = |p: &Path| CString::new(p.to_str().unwrap()).unwrap();
    (c(&mp), c(&ap))
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(clipchain_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn generate_through_the_c_interface() {
    let dir = tempfile::tempdir().unwrap();
    let (mp, ap) = write_models(dir.path());
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(clipchain_model_load(mp.as_ptr(), &mut model), ClipchainStatus::Ok);
        let mut ae = ptr::null_mut();
        assert_eq!(clipchain_autoencoder_load(ap.as_ptr(), &mut ae), ClipchainStatus::Ok);

        let mut n = 0;
        assert_eq!(clipchain_model_num_labels(model, &mut n), ClipchainStatus::Ok);
        assert_eq!(n, 2);
        let mut buf = [0 as std::ffi::c_char; 32];
        assert_eq!(clipchain_model_label(model, 1, buf.as_mut_ptr(), buf.len()), ClipchainStatus::Ok);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), "square moving up");
        assert_eq!(clipchain_model_label(model, 1, buf.as_mut_ptr(), 4), ClipchainStatus::BufferTooSmall);

        let mut params = clipchain_generate_params_default();
        assert_eq!((params.guidance, params.steps, params.prompt_frames), (10.0, 50, 4));
        params.frames = 4;
        params.prompt_frames = 2;
        params.steps = 8;
        params.seed = 3;
        let label = CString::new("square moving up").unwrap();
        let run = |ae_ptr| {
            let mut video = ptr::null_mut();
            assert_eq!(clipchain_generate(model, ae_ptr, &params, label.as_ptr(), &mut video), ClipchainStatus::Ok);
            video
        };
        let video = run(ae);
        let mut shape = [0usize; 5];
        assert_eq!(clipchain_video_shape(video, 0, shape.as_mut_ptr()), ClipchainStatus::Ok);
        assert_eq!(shape, [3, 4, 4, 4, 4]);
        assert_eq!(clipchain_video_shape(video, 1, shape.as_mut_ptr()), ClipchainStatus::Ok);
        assert_eq!(shape, [3, 4, 3, 16, 16]);
        let mut px = vec![0f32; shape.iter().product()];
        assert_eq!(clipchain_video_copy(video, 1, px.as_mut_ptr(), px.len()), ClipchainStatus::Ok);
        assert!(px.iter().all(|v| v.is_finite()) && px.iter().any(|&v| v != 0.0));
        assert_eq!(clipchain_video_copy(video, 1, px.as_mut_ptr(), 10), ClipchainStatus::BufferTooSmall);

        // Same inputs, same latents; no autoencoder means no pixels.
        let again = run(ptr::null());
        let mut a = vec![0f32; 3 * 4 * 4 * 16];
        let mut b = a.clone();
        clipchain_video_copy(video, 0, a.as_mut_ptr(), a.len());
        clipchain_video_copy(again, 0, b.as_mut_ptr(), b.len());
        assert_eq!(a, b);
        assert_eq!(clipchain_video_shape(again, 1, shape.as_mut_ptr()), ClipchainStatus::Config);

        clipchain_video_free(video);
        clipchain_video_free(again);
        clipchain_autoencoder_free(ae);
        clipchain_model_free(model);
    }
}

#[test]
fn errors_are_reported_not_raised() {
    let dir = tempfile::tempdir().unwrap();
    let (mp, _) = write_models(dir.path());
    unsafe {
        let mut model = ptr::null_mut();
        let missing = CString::new("/nonexistent/denoiser.ckpt").unwrap();
        assert_eq!(clipchain_model_load(missing.as_ptr(), &mut model), ClipchainStatus::Data);
        assert!(model.is_null());
        assert!(!last_error().is_empty());
        assert_eq!(clipchain_model_load(ptr::null(), &mut model), ClipchainStatus::NullPointer);
        assert_eq!(clipchain_model_load(mp.as_ptr(), ptr::null_mut()), ClipchainStatus::NullPointer);

        assert_eq!(clipchain_model_load(mp.as_ptr(), &mut model), ClipchainStatus::Ok);
        let mut params = clipchain_generate_params_default();
        params.prompt_frames = 9;
        let mut video = ptr::null_mut();
        assert_eq!(clipchain_generate(model, ptr::null(), &params, ptr::null(), &mut video), ClipchainStatus::Config);
        assert!(last_error().contains("prompt frames"));
        let bad = CString::new("triangle").unwrap();
        params = clipchain_generate_params_default();
        params.frames = 4;
        params.prompt_frames = 2;
        assert_eq!(clipchain_generate(model, ptr::null(), &params, bad.as_ptr(), &mut video), ClipchainStatus::Config);
        assert!(video.is_null());
        assert!(last_error().contains("triangle"));
        clipchain_model_free(model);
        clipchain_model_free(ptr::null_mut());
        assert!(CStr::from_ptr(clipchain_version()).to_str().unwrap().starts_with("0."));
    }
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/clipchain.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["clipchain_generate", "clipchain_last_error", "clipchain_video_copy", "CLIPCHAIN_STATUS_OK"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"clipchain.h\"\nint main(void) { ClipchainGenerateParams p = clipchain_generate_params_default(); \
         return p.clips > 0 ? 0 : 1; }\n",
    )
    .unwrap();
    match Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
    {
        Ok(status) => assert!(status.success(), "header does not compile"),
        Err(_) => eprintln!("no C compiler found; header syntax not checked"),
    }
}
