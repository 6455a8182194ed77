use bitagent::checkpoint;
use bitagent::config::Config;
use bitagent::dataset;
use bitagent::manifest::RunManifest;
use bitagent_core::experiment::{collect_for, ExperimentConfig};
use bitagent_core::model::{Agent, FusionKind, ModelDims};

fn small_experiment() -> ExperimentConfig {
    let mut e = ExperimentConfig {
        episodes: 6,
        ..ExperimentConfig::default()
    };
    e.env.episode_len = 20;
    e
}

#[test]
fn config_rejects_unknown_and_repeated_keys() {
    let err = Config::parse("seed = 1\nlearning_rate = 0.1\n").unwrap_err();
    assert!(format!("{err:#}").contains("unknown key `learning_rate`"), "{err:#}");
    let err = Config::parse("seed = 1\nseed = 2\n").unwrap_err();
    assert!(format!("{err:#}").contains("seed"), "{err:#}");
    assert!(Config::parse("seed = x\n").is_err());
    assert!(Config::parse("rung = turbo\n").is_err());
}

#[test]
fn config_text_round_trips() {
    let c = Config::parse(
        "# comment\nseed = 7\ntasks = stand, run\nlambda_jbo = 0.25\nkl_balance = 0.8\nd_z = 48\nrung = +tamf\n",
    )
    .unwrap();
    assert_eq!(c.experiment.seed, 7);
    assert_eq!(c.experiment.dims.d_z, 48);
    let again = Config::parse(&c.to_text()).unwrap();
    assert_eq!(again, c);
    assert_eq!(again.to_text(), c.to_text());
}

#[test]
fn dataset_round_trip_is_exact_and_collection_deterministic() {
    let e = small_experiment();
    let ds = collect_for(&e, "light").unwrap();
    let bytes = dataset::encode(&ds).unwrap();
    assert_eq!(dataset::decode(&bytes).unwrap(), ds);
    let again = dataset::encode(&collect_for(&e, "light").unwrap()).unwrap();
    assert_eq!(bytes, again);
    let other = dataset::encode(&collect_for(&ExperimentConfig { seed: 1, ..e }, "light").unwrap()).unwrap();
    assert_ne!(bytes, other);
}

#[test]
fn truncated_dataset_reports_an_offset() {
    let ds = collect_for(&small_experiment(), "light").unwrap();
    let bytes = dataset::encode(&ds).unwrap();
    let err = dataset::decode(&bytes[..bytes.len() - 3]).unwrap_err();
    assert!(err.to_string().contains("at byte"), "{err}");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(dataset::decode(&bad).is_err());
}

#[test]
fn missing_dataset_names_the_collect_command() {
    let dir = tempfile::tempdir().unwrap();
    let err = dataset::load(&dir.path().join("nope.bin")).unwrap_err();
    assert!(format!("{err:#}").contains("bitagent collect"), "{err:#}");
}

fn agent(kind: FusionKind) -> Agent {
    Agent::new(ModelDims::new(5, 3), kind, 11).unwrap()
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [FusionKind::Tamf, FusionKind::Additive] {
        let a = agent(kind);
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        checkpoint::save(&a, &p1).unwrap();
        let b = checkpoint::load(&p1).unwrap();
        checkpoint::save(&b, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(b.fusion_kind(), kind);
        assert_eq!(b.dims, a.dims);
    }
}

#[test]
fn tampered_checkpoints_are_rejected() {
    let bytes = checkpoint::encode(&agent(FusionKind::Tamf));

    let err = checkpoint::decode(&bytes[..bytes.len() - 8]).unwrap_err();
    assert!(err.to_string().contains("payload"), "{err}");

    let text_end = bytes.windows(8).position(|w| w == b"payload ").unwrap();
    let head = String::from_utf8(bytes[..text_end].to_vec()).unwrap();
    let first = checkpoint::manifest(&agent(FusionKind::Tamf))[0].clone();
    let renamed = head.replacen(&format!("param {} ", first.name), &format!("param {}x ", first.name), 1);
    let mut bad = renamed.into_bytes();
    bad.extend_from_slice(&bytes[text_end..]);
    let err = checkpoint::decode(&bad).unwrap_err();
    assert!(err.to_string().contains(&first.name), "{err}");

    let mut nan = bytes.clone();
    let start = nan.len() - 8;
    nan[start..].copy_from_slice(&f64::NAN.to_le_bytes());
    let err = checkpoint::decode(&nan).unwrap_err();
    assert!(err.to_string().contains("non-finite"), "{err}");

    let reshaped = head.replacen(
        &format!("param {} {} {} ", first.name, first.rows, first.cols),
        &format!("param {} {} {} ", first.name, first.cols + 1, first.rows),
        1,
    );
    let mut bad = reshaped.into_bytes();
    bad.extend_from_slice(&bytes[text_end..]);
    assert!(checkpoint::decode(&bad).is_err());
}

#[test]
fn checkpoint_manifest_accounts_for_every_scalar() {
    for kind in [FusionKind::Tamf, FusionKind::Additive] {
        let a = agent(kind);
        let m = checkpoint::manifest(&a);
        assert_eq!(m.len(), a.store.len());
        let total: usize = m.iter().map(|e| e.rows * e.cols).sum();
        assert_eq!(total, a.store.scalar_count());
        let last = m.last().unwrap();
        assert_eq!(last.offset + last.rows * last.cols * 8, total * 8);
        let has_tamf = m.iter().any(|e| e.name.starts_with("tamf."));
        assert_eq!(has_tamf, kind == FusionKind::Tamf);
    }
}

#[test]
fn run_manifest_records_weights_and_checks_datasets() {
    let mut c = Config::parse("rung = +mllm\n").unwrap();
    let m = RunManifest::for_config(&c);
    assert_eq!(m.get("lambda_jbo"), Some("0"));
    assert_eq!(m.get("fusion"), Some("additive"));
    c.experiment.rung = "base".parse().unwrap();
    let m = RunManifest::for_config(&c);
    assert_eq!(m.get("lambda_mllm"), Some("0"));

    let mut m = RunManifest::for_config(&Config::parse("").unwrap());
    m.set_dataset_hash("light", b"abc");
    assert!(m.check_dataset("light", b"abc").is_ok());
    let err = m.check_dataset("light", b"abd").unwrap_err();
    assert!(err.to_string().contains("--allow-dataset-mismatch"));
    assert_eq!(RunManifest::parse(&m.to_text()).unwrap(), m);
}
