use std::process::Command;

use metatrack::simworld::SimConfig;
use metatrack_cli::checkpoint::{meta_template, Checkpoint, CheckpointKind, MAGIC};
use metatrack_cli::commands::*;
use metatrack_cli::{CliError, RunConfig};

fn small() -> RunConfig {
    let sim = |n| SimConfig {
        num_videos: n,
        num_frames: 6,
        ..SimConfig::default()
    };
    let mut cfg = RunConfig {
        train_videos: sim(3),
        validation_videos: sim(1),
        heldout_videos: sim(2),
        meta_episodes: 4,
        meta_batch: 2,
        eval_interval: 1,
        eval_episodes: 2,
        eval_seeds: 2,
        tuning_seeds: 1,
        baseline_lrs: vec![0.01, 0.1],
        ..RunConfig::default()
    };
    cfg.pruner.steps = 2;
    cfg.pruner.batch = 1;
    cfg
}

#[test]
fn empty_config_means_defaults() {
    assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    let cfg = RunConfig::default();
    assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    let partial = RunConfig::from_toml("seed = 7\n[meta]\ngamma = 0.0\n").unwrap();
    assert_eq!(partial.seed, 7);
    assert_eq!(partial.meta.gamma, 0.0);
    assert_eq!(partial.meta.xi, cfg.meta.xi);
}

#[test]
fn rejects_bad_configs() {
    assert!(matches!(RunConfig::from_toml("no_such_key = 1"), Err(CliError::Config(_))));
    assert!(matches!(RunConfig::from_toml("meta_batch = 0"), Err(CliError::Config(_))));
    assert!(RunConfig::from_toml("[heldout_videos]\nnum_frames = 3").is_err());
}

#[test]
fn overrides_set_single_keys() {
    let cfg = RunConfig::default()
        .with_overrides(&["meta.gamma=0.25".into(), "seed=11".into(), "threshold={ Absolute = 0.4 }".into()])
        .unwrap();
    assert_eq!(cfg.meta.gamma, 0.25);
    assert_eq!(cfg.seed, 11);
    assert_eq!(cfg.threshold, metatrack::pruning::ThresholdPolicy::Absolute(0.4));
    assert!(matches!(RunConfig::default().with_overrides(&["seed".into()]), Err(CliError::Usage(_))));
    assert!(RunConfig::default().with_overrides(&["meta.nope=1".into()]).is_err());
}

#[test]
fn hash_tracks_content_not_output_dir() {
    let a = RunConfig::default();
    let b = RunConfig {
        output_dir: Some("/elsewhere".into()),
        ..a.clone()
    };
    let c = RunConfig { seed: 1, ..a.clone() };
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), c.hash());
    assert_eq!(a.hash_hex().len(), 64);
}

#[test]
fn output_root_precedence() {
    let cfg = RunConfig {
        output_dir: Some("from-config".into()),
        ..RunConfig::default()
    };
    assert_eq!(cfg.output_root(Some("flag".as_ref())), std::path::PathBuf::from("flag"));
    assert_eq!(cfg.output_root(None), std::path::PathBuf::from("from-config"));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let cfg = small();
    let data = Data::generate(&cfg).unwrap();
    let ck = train_meta(&cfg, &data, None, |_| Ok(())).unwrap().checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    ck.save(&p1).unwrap();
    let loaded = Checkpoint::load(&p1).unwrap();
    assert_eq!(loaded, ck);
    loaded.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    let meta = loaded.meta_params().unwrap();
    assert_eq!(meta.flatten(), train_meta(&cfg, &data, None, |_| Ok(())).unwrap().meta.flatten());
    assert_eq!(loaded.config().unwrap(), cfg);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let cfg = small();
    let ck = Checkpoint {
        kind: CheckpointKind::Meta,
        config_hash: cfg.hash(),
        seed: 0,
        episodes: 0,
        rng_word_pos: 0,
        adam_step: 0,
        config_toml: cfg.to_toml().unwrap(),
        sections: Vec::new(),
    };
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..8], MAGIC);
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let mut wrong_hash = bytes.clone();
    wrong_hash[16] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&wrong_hash), Err(CliError::Checkpoint(_))));
    let mut trailing = bytes;
    trailing.push(0);
    assert!(Checkpoint::from_bytes(&trailing).is_err());
    assert!(ck.meta_params().is_err());
}

#[test]
fn zero_budget_keeps_the_initialization() {
    let cfg = RunConfig { meta_episodes: 0, ..small() };
    let data = Data::generate(&cfg).unwrap();
    let out = train_meta(&cfg, &data, None, |_| Ok(())).unwrap();
    assert!(out.losses.is_empty());
    assert_eq!(out.checkpoint.episodes, 0);
    assert_eq!(out.checkpoint.adam_step, 0);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let init = metatrack::metalearn::MetaParams::init(&cfg.arch, &cfg.meta, &mut rng).unwrap();
    assert_eq!(out.checkpoint.meta_params().unwrap().flatten(), init.flatten());
    let mut csv = Vec::new();
    write_losses(&mut csv, &cfg, &out.losses).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap(), "config_hash,seed,step,episodes,loss,grad_norm\n");
}

use rand::SeedableRng;

#[test]
fn meta_training_is_deterministic_and_resumable() {
    let cfg = small();
    let data = Data::generate(&cfg).unwrap();
    let mut mid = None;
    let a = train_meta(&cfg, &data, None, |ck| {
        if ck.episodes == 2 {
            mid = Some(ck.clone());
        }
        Ok(())
    })
    .unwrap();
    let b = train_meta(&cfg, &data, None, |_| Ok(())).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.losses.len(), 2);
    assert_eq!(a.evals.len(), 3);

    let resumed = train_meta(&cfg, &data, mid.as_ref(), |_| Ok(())).unwrap();
    assert_eq!(resumed.checkpoint.to_bytes(), a.checkpoint.to_bytes());
    assert_eq!(resumed.losses, a.losses[1..]);

    let other = RunConfig { seed: 5, ..cfg.clone() };
    assert!(train_meta(&other, &data, mid.as_ref(), |_| Ok(())).is_err());
}

#[test]
fn variant_registry() {
    let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    assert_eq!(resolve_variants(&names(&["no-hard", "full", "no-hard"])).unwrap(), vec!["no-hard", "full"]);
    assert!(resolve_variants(&[]).unwrap().is_empty());
    let err = resolve_variants(&names(&["full", "bogus"])).unwrap_err().to_string();
    for known in REGISTRY {
        assert!(err.contains(known), "{err}");
    }
    let cfg = small();
    assert!(variant_config(&cfg, "gt-online").unwrap().meta.online_from_ground_truth);
    let nh = variant_config(&cfg, "no-hard").unwrap();
    assert!(!nh.meta.hard_examples && nh.meta.gamma == 0.0);
    assert_eq!(variant_config(&cfg, "scalar-lr").unwrap().meta.lr_mode, metatrack::metalearn::LrMode::Scalar);
    assert_eq!(variant_config(&cfg, "no-meta").unwrap().meta.k_init, 0);
}

#[test]
fn empty_ablation_writes_header_only() {
    let cfg = small();
    let mut csv = Vec::new();
    write_ablation(&mut csv, &cfg, &[]).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert_eq!(text.trim_end(), format!("config_hash,seed,{}", ABLATION_COLUMNS.join(",")));
}

#[test]
fn worker_count_does_not_change_results() {
    let cfg = small();
    let data = Data::generate(&cfg).unwrap();
    let meta = train_meta(&cfg, &data, None, |_| Ok(())).unwrap().meta;
    let one = evaluate_tracker(&meta, None, &data.heldout, &cfg, 2, 1).unwrap();
    let three = evaluate_tracker(&meta, None, &data.heldout, &cfg, 2, 3).unwrap();
    assert_eq!(one.runs, three.runs);
    assert_eq!(one.auc, three.auc);
    assert_eq!(one.per_seed.len(), 2);
    assert_eq!(one.flop_ratio, 1.0);
    assert_eq!(one.prune_rate, 0.0);
}

#[test]
fn pruner_training_and_pruned_tracking() {
    let cfg = small();
    let data = Data::generate(&cfg).unwrap();
    let meta = train_meta(&cfg, &data, None, |_| Ok(())).unwrap().meta;
    let a = train_pruner_cmd(&cfg, &meta, &data).unwrap();
    let b = train_pruner_cmd(&cfg, &meta, &data).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.losses.len(), 2);
    let back = Checkpoint::from_bytes(&a.checkpoint.to_bytes()).unwrap();
    assert_eq!(back.pruner_params().unwrap().flatten(), a.phi.flatten());
    assert_eq!(back.meta_params().unwrap().flatten(), meta.flatten());

    let e = evaluate_tracker(&meta, Some(Pruning { phi: &a.phi, policy: cfg.threshold }), &data.heldout, &cfg, 1, 1).unwrap();
    assert!(e.flop_ratio < 0.6, "{}", e.flop_ratio);
    assert!(e.prune_rate > 0.3 && e.prune_rate < 0.6, "{}", e.prune_rate);
    let zero = RunConfig { pruner: metatrack::pruning::PrunerTrainConfig { steps: 0, ..cfg.pruner.clone() }, ..cfg };
    let z = train_pruner_cmd(&zero, &meta, &data).unwrap();
    assert!(z.losses.is_empty());
    assert_eq!(z.phi.flatten(), initial_pruner(&zero).unwrap().flatten());
}

#[test]
fn template_matches_config_shapes() {
    let cfg = small();
    let t = meta_template(&cfg).unwrap();
    assert_eq!(t.k_init(), cfg.meta.k_init);
    assert_eq!(t.k_on(), cfg.meta.k_on);
}

fn binary() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_metatrack"));
    c.env("RUST_LOG", "warn");
    c
}

fn write_small_config(dir: &std::path::Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, small().to_toml().unwrap()).unwrap();
    path
}

#[test]
fn binary_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = binary().arg("meta-train").arg("--config").arg(&cfg).arg("--out").arg(&out).status().unwrap();
        assert!(status.success());
        let status = binary()
            .args(["track", "--meta"])
            .arg(out.join("meta.ckpt"))
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        out
    };
    let a = run("a");
    let b = run("b");
    for f in ["meta.ckpt", "meta_loss.csv", "meta_eval.csv", "track_frames.csv", "track_summary.csv"] {
        let x = std::fs::read(a.join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let text = std::fs::read_to_string(a.join("meta_loss.csv")).unwrap();
    let hash = small().hash_hex();
    assert!(text.lines().skip(1).all(|l| l.starts_with(&format!("{hash},0,"))));
}

#[test]
fn binary_reports_structured_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let out = binary()
        .args(["ablate", "--variants", "full,bogus", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let line: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(line["error"], "usage");
    assert!(line["message"].as_str().unwrap().contains("scalar-lr"));

    let out = binary().args(["eval", "--meta", "/no/such/file"]).output().unwrap();
    assert_eq!(out.status.code(), Some(4));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "meta_batch = 0").unwrap();
    let out = binary().arg("meta-train").arg("--config").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(3));

    let out = binary()
        .args(["ablate", "--variants", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(dir.path().join("ablate.csv")).unwrap().lines().count(), 1);
}
