//! Drives the `clipchain` binary end to end on tiny configurations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clipchain::archive::{load_autoencoder, load_clips, load_denoiser};
use clipchain::commands::{RunMetrics, AUTOENCODER_FILE, DENOISER_FILE, LATENTS_FILE, NOISE_FILE};
use clipchain::denoiser::{LabelEncoder, TinyVideoDenoiser};
use clipchain::frames::read_video;
use clipchain::manifest::{RunManifest, MANIFEST_FILE};
use clipchain::sampler::{sample_clip, SamplerConfig};
use clipchain::{Clip, NoiseSchedule};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const BIN: &str = env!("CARGO_BIN_EXE_clipchain");

fn assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets")
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("CLIPCHAIN_HOME").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny but complete configuration: 16x16 clips of 4 frames, 4x4 latents.
const TINY: &str = r#"
[data]
num_clips = 6
height = 16
width = 16
frames = 4
[autoencoder]
steps = 5
[finetune]
steps = 3
[denoiser]
num_timesteps = 200
steps = 5
[generate]
clips = 3
frames = 4
prompt_frames = 2
steps = 10
"#;

struct Pipeline {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Pipeline {
    fn p(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

/// gen-data, train-ae, finetune-decoder and train on [`TINY`].
fn pipeline() -> Pipeline {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let cfg = root.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let p = |r: &str| root.join(r);
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&p("data"))]);
    ok(&["train-ae", "--config", s(&cfg), "--data", s(&p("data")), "--out", s(&p("ae"))]);
    ok(&[
        "finetune-decoder",
        "--config",
        s(&cfg),
        "--data",
        s(&p("data")),
        "--autoencoder",
        s(&p("ae").join(AUTOENCODER_FILE)),
        "--out",
        s(&p("ft")),
    ]);
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&p("data")),
        "--autoencoder",
        s(&p("ft").join(AUTOENCODER_FILE)),
        "--out",
        s(&p("model")),
    ]);
    Pipeline { _dir: dir, root }
}

fn generate(pl: &Pipeline, out: &str, extra: &[&str]) -> Output {
    let ckpt = pl.p("model").join(DENOISER_FILE);
    let ae = pl.p("ft").join(AUTOENCODER_FILE);
    let cfg = pl.p("tiny.toml");
    let outp = pl.p(out);
    let mut args = vec![
        "generate",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--autoencoder",
        s(&ae),
        "--out",
        s(&outp),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

fn frame_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir.join("frames"))
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_writes_one_file_per_clip_and_replays_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[data]\nnum_clips = 10\nseed_start = 100\ncaptioner = \"").unwrap();
    let mut text = fs::read_to_string(&cfg).unwrap();
    text.push_str(&format!("{}\"\n", s(&assets().join("mock_captioner.json"))));
    fs::write(&cfg, text).unwrap();
    let a = dir.path().join("a");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&a)]);
    assert_eq!(fs::read_dir(a.join("clips")).unwrap().count(), 10);
    let index: serde_json::Value = serde_json::from_slice(&fs::read(a.join("dataset.json")).unwrap()).unwrap();
    let items = index["moving_shapes"]["items"].as_array().unwrap();
    let seeds: Vec<u64> = items.iter().map(|i| i["seed"].as_u64().unwrap()).collect();
    assert_eq!(seeds, (100..110).collect::<Vec<_>>());
    assert!(items.iter().all(|i| i["caption"].as_str().unwrap().contains(i["label"].as_str().unwrap())));

    let b = dir.path().join("b");
    ok(&["gen-data", "--replay", s(&a.join("dataset.json")), "--out", s(&b)]);
    for i in 0..10 {
        let f = format!("clips/clip{i:03}.clpa");
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read(a.join("dataset.json")).unwrap(), fs::read(b.join("dataset.json")).unwrap());
}

/// Bilinear sample of an RGB image at `(sy, sx)` with edge clamping.
fn bilinear(img: &[u8], h: usize, w: usize, c: usize, sy: f64, sx: f64) -> f64 {
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let at = |y: usize, x: usize| img[(y * w + x) * 3 + c] as f64 / 255.0;
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

#[test]
fn pseudo_video_frames_match_crop_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    let image = assets().join("test_image.ppm");
    fs::write(
        &cfg,
        format!(
            "[data]\nmode = \"pseudo_video\"\nimage = \"{}\"\nframes = 5\nheight = 16\nwidth = 20\n\
             zoom_start = {{ x = 0.0, y = 0.0, w = 64.0, h = 48.0 }}\n\
             zoom_end = {{ x = 30.0, y = 10.0, w = 20.0, h = 16.0 }}\n",
            s(&image)
        ),
    )
    .unwrap();
    let out = dir.path().join("pv");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&out)]);

    let raw = fs::read(&image).unwrap();
    let pixels = &raw[raw.len() - 48 * 64 * 3..];
    let (clips, _) = load_clips(&out.join("clips/clip000.clpa"), "clip").unwrap();
    let clip = &clips[0];
    assert_eq!(clip.shape(), [5, 3, 16, 20]);
    let (frames, _) = read_video(&out.join("frames")).unwrap();
    for k in 0..5 {
        let u = k as f64 / 4.0;
        let (rx, ry) = (30.0 * u, 10.0 * u);
        let (rw, rh) = (64.0 + (20.0 - 64.0) * u, 48.0 + (16.0 - 48.0) * u);
        for c in 0..3 {
            for i in 0..16 {
                for j in 0..20 {
                    let sx = rx + (j as f64 + 0.5) * rw / 20.0 - 0.5;
                    let sy = ry + (i as f64 + 0.5) * rh / 16.0 - 0.5;
                    let want = bilinear(pixels, 48, 64, c, sy, sx);
                    let idx = ((k * 3 + c) * 16 + i) * 20 + j;
                    assert!((clip.data[idx] as f64 - want).abs() < 1e-6, "frame {k} c {c} ({i},{j})");
                    // Files hold the stored f32 sample quantised to a byte.
                    let byte = (clip.data[idx].clamp(0.0, 1.0) * 255.0).round() / 255.0;
                    assert_eq!(frames[0].data[idx], byte);
                }
            }
        }
    }
}

#[test]
fn train_zero_steps_is_initialisation_and_runs_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[data]\nframes = 4\n[denoiser]\nmode = \"gaussian_world\"\nsteps = 0\nseed = 7\neval_batches = 1\n").unwrap();
    ok(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("m0"))]);
    let (model, meta) = load_denoiser(&dir.path().join("m0").join(DENOISER_FILE)).unwrap();
    let init = TinyVideoDenoiser::new(meta.spec.clone(), meta.num_timesteps, 7).unwrap();
    assert_eq!(model.params.digest(), init.params.digest());

    fs::write(&cfg, "[data]\nframes = 4\n[denoiser]\nmode = \"gaussian_world\"\nsteps = 20\neval_batches = 1\n").unwrap();
    ok(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("a"))]);
    ok(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("b"))]);
    let a = fs::read(dir.path().join("a/loss.json")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/loss.json")).unwrap());
    let curve: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(curve["losses"].as_array().unwrap().len(), 20);
}

#[test]
fn gaussian_world_training_approaches_bayes_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[data]\nframes = 4\n[denoiser]\nmode = \"gaussian_world\"\nsteps = 600\nlr = 5e-3\n").unwrap();
    ok(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("m"))]);
    let l: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("m/loss.json")).unwrap()).unwrap();
    let (trained, bayes) = (l["eval_loss"].as_f64().unwrap(), l["analytic_loss"].as_f64().unwrap());
    let first = l["losses"][0].as_f64().unwrap();
    println!("first {first:.4} trained {trained:.4} bayes {bayes:.4}");
    assert!(trained >= bayes - 0.005, "trained model beat the Bayes-optimal loss: {trained} < {bayes}");
    assert!(trained - bayes < 0.05, "trained {trained} vs bayes {bayes}");
}

#[test]
fn generate_end_to_end() {
    let pl = pipeline();

    // Defaults of the generate section emit clips x frames files.
    let out = generate(&pl, "run", &["--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let files = frame_files(&pl.p("run"));
    assert_eq!(files.iter().filter(|(n, _)| n.ends_with(".ppm")).count(), 3 * 4);

    // The printed report, metrics.json and the manifest agree on the digest.
    let printed: RunMetrics = serde_json::from_slice(&out.stdout).unwrap();
    let manifest = RunManifest::read(&pl.p("run")).unwrap();
    assert_eq!(printed.run_digest, manifest.digest);
    assert_eq!(manifest.compute_digest(), manifest.digest);
    let again = ok(&["metrics", "--run", s(&pl.p("run"))]);
    assert_eq!(serde_json::from_slice::<RunMetrics>(&again.stdout).unwrap(), printed);

    // Bitwise repeatable, across worker counts too.
    for (dir, workers) in [("run1", "1"), ("run4", "4")] {
        let o = generate(&pl, dir, &["--seed", "3", "--workers", workers]);
        assert!(o.status.success());
        assert_eq!(frame_files(&pl.p(dir)), files, "{dir}");
    }
    let other = generate(&pl, "run_other", &["--seed", "4"]);
    assert!(other.status.success());
    assert_ne!(frame_files(&pl.p("run_other")), files);

    ok(&["verify", "--run", s(&pl.p("run"))]);
    let victim = pl.p("run").join("frames").join("clip001_frame002.ppm");
    let mut bytes = fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&victim, bytes).unwrap();
    assert_eq!(run(&["verify", "--run", s(&pl.p("run"))]).status.code(), Some(3));
}

#[test]
fn single_clip_matches_plain_sampling() {
    let pl = pipeline();
    let out = generate(&pl, "one", &["--clips", "1", "--seed", "9"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (latents, _) = load_clips(&pl.p("one").join(LATENTS_FILE), "latents").unwrap();
    let (noise, _) = load_clips(&pl.p("one").join(NOISE_FILE), "initial_noise").unwrap();
    assert_eq!(latents.len(), 1);

    // The first clip's noise is the seeded standard-normal stream 0.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    rng.set_stream(0);
    let expect: Vec<f32> = (0..noise[0].data.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    assert_eq!(noise[0].data, expect);

    let (model, meta) = load_denoiser(&pl.p("model").join(DENOISER_FILE)).unwrap();
    let schedule = NoiseSchedule::new(meta.num_timesteps, meta.schedule.clone()).unwrap();
    let cond = LabelEncoder::new(meta.vocabulary.clone(), model.spec.cond_dim, meta.label_seed)
        .encode(&meta.vocabulary[0])
        .unwrap();
    let cfg = SamplerConfig {
        num_inference_steps: 10,
        record_trajectory: false,
        ..SamplerConfig::default()
    };
    let plain = sample_clip(&model, &schedule, &cond, &noise[0], &cfg, None, 0).unwrap();
    assert_eq!(plain.z0, latents[0]);
}

#[test]
fn zero_step_finetune_leaves_decoder_output_unchanged() {
    let pl = pipeline();
    let cfg = pl.p("zero.toml");
    fs::write(&cfg, TINY.replace("[finetune]\nsteps = 3", "[finetune]\nsteps = 0")).unwrap();
    ok(&[
        "finetune-decoder",
        "--config",
        s(&cfg),
        "--data",
        s(&pl.p("data")),
        "--autoencoder",
        s(&pl.p("ae").join(AUTOENCODER_FILE)),
        "--out",
        s(&pl.p("ft0")),
    ]);
    let (before, _) = load_autoencoder(&pl.p("ae").join(AUTOENCODER_FILE)).unwrap();
    let (after, _) = load_autoencoder(&pl.p("ft0").join(AUTOENCODER_FILE)).unwrap();
    assert!(!before.has_temporal_layers() && after.has_temporal_layers());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let data: Vec<f32> = (0..4 * 4 * 4 * 4).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z = Clip::from_vec(4, 4, 4, 4, data).unwrap();
        assert_eq!(before.decode(&z).unwrap(), after.decode(&z).unwrap());
    }
}

#[test]
fn metrics_report_full_cycling_for_reversed_clip() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<f32> = (0..6 * 4 * 4 * 4).map(|_| StandardNormal.sample(&mut rng)).collect();
    let a = Clip::from_vec(6, 4, 4, 4, data).unwrap();
    clipchain::archive::save_clips(&run_dir.join(LATENTS_FILE), "latents", serde_json::json!({}), &[a.clone(), a.reversed()])
        .unwrap();
    let mut m = RunManifest::new("generate", serde_json::json!({}));
    m.add_output(run_dir, LATENTS_FILE).unwrap();
    let m = m.write(run_dir).unwrap();
    let out = ok(&["metrics", "--run", s(run_dir)]);
    let r: RunMetrics = serde_json::from_slice(&out.stdout).unwrap();
    assert!((r.latent.pairs[0].cycling_score - 1.0).abs() < 1e-9);
    assert_eq!(r.run_digest, m.digest);
    assert!(r.pixel.is_none());
    assert!(run_dir.join(MANIFEST_FILE).exists());
}

#[test]
fn invalid_flags_are_rejected_before_any_work() {
    // The checkpoint does not exist: a config error (2) rather than a data
    // error (3) shows the flags were checked first.
    let code = |extra: &[&str]| {
        let mut args = vec!["generate", "--checkpoint", "/nonexistent/denoiser.ckpt", "--out", "/nonexistent/out"];
        args.extend_from_slice(extra);
        run(&args).status.code()
    };
    assert_eq!(code(&["--prompt-frames", "0", "--beta", "0.4"]), Some(2));
    assert_eq!(code(&["--prompt-frames", "9", "--frames", "8"]), Some(2));
    assert_eq!(code(&["--beta", "1.5"]), Some(2));
    assert_eq!(code(&["--workers", "0"]), Some(2));
    assert_eq!(code(&["--prompt-frames", "0", "--beta", "0"]), Some(3));
    assert_eq!(run(&["generate", "--bogus"]).status.code(), Some(2));
}

#[test]
fn config_errors_and_home_directory() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[generate]\nguidence = 3.0\n").unwrap();
    let out = Command::new(BIN)
        .args(["gen-data", "--config", "bad.toml", "--out", "x"])
        .env("CLIPCHAIN_HOME", dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("guidence"));

    fs::write(dir.path().join("ok.toml"), "[data]\nnum_clips = 2\nheight = 16\nwidth = 16\nframes = 2\n").unwrap();
    let out = Command::new(BIN)
        .args(["gen-data", "--config", "ok.toml", "--out", "data"])
        .env("CLIPCHAIN_HOME", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("data/dataset.json").exists());

    let printed = ok(&["print-config"]);
    let text = String::from_utf8(printed.stdout).unwrap();
    assert_eq!(clipchain::config::Config::from_toml(&text).unwrap(), clipchain::config::Config::default());
    assert_eq!(run(&["train", "--out", s(&dir.path().join("m"))]).status.code(), Some(2));
    assert_eq!(run(&["metrics", "--run", s(&dir.path().join("missing"))]).status.code(), Some(3));
}
