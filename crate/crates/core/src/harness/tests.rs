use super::*;
use crate::error::Error;
use crate::numerics::Tensor;
use crate::testkit::{denoiser, fixture};

const TINY: &str = r#"
seed = 7
[corpus]
n_train = 8
n_heldout = 3
n_pretrain = 12
n_pretrain_heldout = 4
vocab_size = 64
n_ctx = 4
[lm]
d_model = 16
n_enc_layers = 1
n_dec_layers = 1
n_heads = 2
d_ff = 32
[pretrain]
max_epochs = 2
[denoiser]
n_ctx = 4
d_model = 16
d_low = 4
n_layers = 1
n_heads = 2
d_ff = 8
[schedule]
steps = 20
[train]
epochs = 2
[interpret]
k = 3
"#;

fn tiny_in(dir: &std::path::Path) -> ExperimentConfig {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    ExperimentConfig::load(Some(&path), &[]).unwrap()
}

fn sample_checkpoint() -> Checkpoint {
    let d = denoiser(4, 16, 4, 3);
    Checkpoint::from_denoiser(&d).unwrap()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let ck = sample_checkpoint();
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    for ((_, a), (_, b)) in ck.tensors.iter().zip(&back.tensors) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(back.to_bytes().unwrap(), bytes);
}

#[test]
fn lm_checkpoint_restores_frozen_model_and_vocab() {
    let fx = fixture(4, 4, 16, 48);
    let ck = Checkpoint::from_lm(&fx.lm, &fx.vocab).unwrap();
    let (lm, vocab) = Checkpoint::from_bytes(&ck.to_bytes().unwrap())
        .unwrap()
        .into_lm()
        .unwrap();
    assert!(lm.is_frozen());
    assert_eq!(vocab.tokens(), fx.vocab.tokens());
    let s = &fx.samples[0];
    assert_eq!(
        lm.manual_loss(s).unwrap().to_bits(),
        fx.lm.manual_loss(s).unwrap().to_bits()
    );
}

#[test]
fn truncated_or_flipped_checkpoint_is_corruption() {
    let bytes = sample_checkpoint().to_bytes().unwrap();
    for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(Error::Corruption(_))
            ),
            "cut {cut}"
        );
    }
    let mut flipped = bytes.clone();
    let mid = flipped.len() - 40;
    flipped[mid] ^= 1;
    assert!(matches!(
        Checkpoint::from_bytes(&flipped),
        Err(Error::Corruption(_))
    ));
}

#[test]
fn unknown_version_is_compatibility_error() {
    let mut bytes = sample_checkpoint().to_bytes().unwrap();
    bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    match Checkpoint::from_bytes(&bytes) {
        Err(Error::Compatibility { found, expected }) => {
            assert_eq!((found, expected), (FORMAT_VERSION + 1, FORMAT_VERSION));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn wrong_kind_is_rejected() {
    let ck = sample_checkpoint();
    assert!(matches!(ck.into_contexts(), Err(Error::Contract(_))));
}

#[test]
fn config_rejects_unknown_keys() {
    let err = ExperimentConfig::from_toml("[train]\nepochz = 3\n").unwrap_err();
    assert!(
        matches!(err, Error::Config(ref m) if m.contains("epochz")),
        "{err}"
    );
    assert!(ExperimentConfig::from_toml("bogus = 1\n").is_err());
}

#[test]
fn config_toml_round_trip() {
    let cfg = ExperimentConfig::from_toml(TINY).unwrap();
    assert_eq!(
        ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(),
        cfg
    );
    assert_eq!(
        ExperimentConfig::from_toml("").unwrap(),
        ExperimentConfig::default()
    );
}

#[test]
fn overrides_apply_typed_values() {
    let cfg = ExperimentConfig::load(
        None,
        &[
            "train.epochs=5".into(),
            "train.chain_base=shifted".into(),
            "schedule.beta_end=0.03".into(),
            "seed=11".into(),
        ],
    )
    .unwrap();
    assert_eq!(cfg.train.epochs, 5);
    assert_eq!(cfg.train.chain_base, crate::trainer::ChainBase::Shifted);
    assert_eq!(cfg.schedule.beta_end, 0.03);
    assert_eq!(cfg.seed, Some(11));
    for bad in [
        "train.epochs",
        "=3",
        "train..k=2",
        "train.nope=1",
        "train.k=0",
    ] {
        assert!(
            ExperimentConfig::load(None, &[bad.into()]).is_err(),
            "{bad}"
        );
    }
}

#[test]
fn mismatched_shapes_fail_validation() {
    let mut cfg = ExperimentConfig::from_toml(TINY).unwrap();
    cfg.denoiser.n_ctx = 5;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let cfg = ExperimentConfig {
        seed: None,
        ..ExperimentConfig::from_toml(TINY).unwrap()
    };
    assert!(matches!(cfg.require_seed(), Err(Error::Config(_))));
}

#[test]
fn relative_paths_resolve_against_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_in(dir.path());
    assert_eq!(cfg.paths.corpus_dir, dir.path().join("data"));
    assert_eq!(cfg.paths.report_dir, dir.path().join("reports"));
}

#[test]
fn stage_seeds_are_distinct_and_stable() {
    let a = stage_seed(1, "train");
    assert_eq!(a, stage_seed(1, "train"));
    assert_ne!(a, stage_seed(2, "train"));
    assert_ne!(a, stage_seed(1, "optimize"));
}

#[test]
fn tiny_experiment_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_in(dir.path());
    let mut report = run_experiment(&cfg).unwrap();
    report.train.wall_time_secs = 0.0;
    let art = Artifacts::new(&cfg);
    for p in [
        &art.train_corpus,
        &art.heldout_corpus,
        &art.lm,
        &art.denoiser,
        &art.contexts,
        &art.pretrain_report,
        &art.train_report,
        &art.generations,
        &art.neighbors,
        &art.neighbors_csv,
        &art.report,
        &art.report_csv,
    ] {
        assert!(p.is_file(), "{}", p.display());
    }
    assert_eq!(report.n_heldout, 3);
    assert_eq!(report.manual.lm_loss_per_sample.len(), 3);
    assert_eq!(report.neighbors.positions.len(), 4);
    for m in crate::metrics::Metric::ALL {
        assert!(report.manual.metrics.metrics.contains_key(&m));
        assert!(report.optimized.metrics.metrics.contains_key(&m));
        assert!(report.deltas.contains_key(m.name()));
    }
    let csv = std::fs::read_to_string(&art.report_csv).unwrap();
    assert_eq!(csv.lines().count(), 1 + 1 + 5);

    let stored: ExperimentReport = read_json(&art.report).unwrap();
    assert_eq!(stored, report);
    let again = stages::report(&cfg, 7).unwrap();
    assert_eq!(again, report);
}

#[test]
fn stage_errors_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_in(dir.path());
    cfg.corpus.synthetic = false;
    let err = run_experiment(&cfg).unwrap_err();
    assert!(
        err.to_string().starts_with("gen-corpus stage failed"),
        "{err}"
    );
    assert!(matches!(err.root(), Error::Io { .. }));
}
