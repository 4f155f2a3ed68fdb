use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn latmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latmap"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn small_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("config.in.toml");
    let text = format!(
        r#"
{extra}
[dataset]
kind = "synthetic"
clusters = 3
per_cluster = 8
size = 8

[vae.architecture]
side = 8
latent = 3
channels = [2, 4]

[vae.schedule]
iterations = 6
batch_size = 8

[tsne]
iterations = 120
perplexity = 4.0

[pca]
components = 5

[scatter]
thumbnails = 5
"#
    );
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn pipeline_requires_seed() {
    let out = latmap(&["pipeline", "--preset", "pca50"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
}

#[test]
fn unknown_preset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = latmap(&["pipeline", "--seed", "1", "--preset", "fancy", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_upstream_artifact_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = latmap(&["pipeline", "--seed", "1", "--preset", "pca50", "--stages", "embed", "--out", d]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn non_finite_input_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let feats = dir.path().join("f.npy");
    let mut t = latmap::Tensor::from_fn(&[8, 3], |i| i as f64);
    t.data_mut()[4] = f64::NAN;
    latmap::data::save_array_file(&feats, &t, latmap::data::DType::F64).unwrap();
    let out = latmap(&[
        "tsne",
        "--features",
        feats.to_str().unwrap(),
        "--kernel",
        "euclidean",
        "--perplexity",
        "3",
        "--out",
        dir.path().join("e.csv").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pca_pipeline_writes_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = latmap(&[
            "pipeline",
            "--seed",
            "7",
            "--config",
            &cfg,
            "--features",
            "pca",
            "--kernel",
            "euclidean",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        out_dir
    };
    let a = run("a");
    let b = run("b");
    for f in ["features.npy", "embedding.csv", "kl_trace.csv", "map.svg", "manifest.txt"] {
        assert!(a.join(f).is_file(), "{f}");
    }
    assert!(!a.join("checkpoint.bin").exists());
    for f in ["images.npy", "features.npy", "embedding.csv", "kl_trace.csv", "map.svg"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(a.join("embedding.csv")).unwrap();
    assert_eq!(csv.lines().count(), 25);
    assert!(csv.lines().next().unwrap().ends_with(",label"));
    let svg = fs::read_to_string(a.join("map.svg")).unwrap();
    assert_eq!(svg.matches("<circle").count(), 24);
    assert_eq!(svg.matches("<image").count(), 5);
}

#[test]
fn vae_pipeline_then_embed_only_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let out_dir = dir.path().join("run");
    let d = out_dir.to_str().unwrap();
    let out = latmap(&["pipeline", "--seed", "3", "--config", &cfg, "--out", d]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.bin", "loss_trace.csv", "latents.npy", "embedding.csv", "kl_trace.csv", "map.svg", "manifest.txt"] {
        assert!(out_dir.join(f).is_file(), "{f}");
    }
    let first = fs::read(out_dir.join("embedding.csv")).unwrap();
    let manifest = fs::read_to_string(out_dir.join("manifest.txt")).unwrap();
    assert!(manifest.contains("checkpoint.bin="));

    let out = latmap(&["pipeline", "--seed", "3", "--config", &cfg, "--out", d, "--stages", "embed,render"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(out_dir.join("embedding.csv")).unwrap(), first);

    // A different seed changes the config hash recorded in the manifest.
    let out = latmap(&["pipeline", "--seed", "4", "--config", &cfg, "--out", d, "--stages", "render"]);
    assert_eq!(code(&out), 0);
    let changed = fs::read_to_string(out_dir.join("manifest.txt")).unwrap();
    let line = |m: &str| m.lines().find(|l| l.starts_with("config.toml=")).unwrap().to_string();
    assert_ne!(line(&manifest), line(&changed));
}

#[test]
fn individual_verbs_chain() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let ok = |args: &[&str]| {
        let out = latmap(args);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    ok(&["synth", "--seed", "2", "--per-cluster", "6", "--size", "8", "--out", &p("raw.npy"), "--labels", &p("labels.npy")]);
    ok(&["preprocess", "--input", &p("raw.npy"), "--out", &p("images.npy")]);
    ok(&["pca", "--input", &p("images.npy"), "--components", "4", "--out", &p("features.npy")]);
    ok(&[
        "tsne", "--features", &p("features.npy"), "--labels", &p("labels.npy"), "--kernel", "euclidean",
        "--perplexity", "4", "--tsne-iterations", "100", "--out", &p("emb.csv"), "--kl-trace", &p("kl.csv"),
    ]);
    ok(&["render", "--embedding", &p("emb.csv"), "--images", &p("images.npy"), "--thumbnails", "3", "--out", &p("map.svg")]);
    let cfg = small_config(dir.path(), "");
    ok(&["train", "--images", &p("images.npy"), "--seed", "1", "--config", &cfg, "--out", &p("train")]);
    ok(&["encode", "--images", &p("images.npy"), "--checkpoint", &p("train/checkpoint.bin"), "--config", &cfg, "--out", &p("lat.npy")]);
    ok(&["tsne", "--latents", &p("lat.npy"), "--perplexity", "4", "--tsne-iterations", "100", "--out", &p("emb2.csv")]);
    let svg = fs::read_to_string(p("map.svg")).unwrap();
    assert_eq!(svg.matches("<circle").count(), 18);
}

#[test]
fn print_config_round_trips() {
    let out = latmap(&["pipeline", "--seed", "5", "--preset", "no-sobel", "--print-config"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = latmap::pipeline::PipelineConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.vae.loss.mode, "normalized");
}
