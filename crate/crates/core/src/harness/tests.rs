use super::*;
use crate::align::AlignMode;
use crate::attention::AttentionMap;
use crate::error::Error;
use crate::model::{AnyModel, GistModel, Variant};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::SplitMix64;
use crate::synth::{generate, oracle_predict, write_instances, GenConfig, Instance};
use crate::transformer::TransformerDims;
use crate::vanilla::VanillaDims;

fn data(seed: u64, count: usize) -> Vec<Instance> {
    generate(&GenConfig::new(seed, count)).unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        vanilla: VanillaDims::uniform(6),
        transformer: TransformerDims { d_model: 8, heads: 2, layers: 2, d_ff: 16, max_len: 32 },
        batch_size: 8,
        epochs: 2,
        seed: 3,
        ..TrainConfig::new("train.jsonl", "val.jsonl")
    }
}

#[test]
fn config_defaults_and_parsing() {
    let cfg = TrainConfig::from_toml("train_path = \"a.jsonl\"\nval_path = \"b.jsonl\"\n").unwrap();
    assert_eq!(cfg, TrainConfig::new("a.jsonl", "b.jsonl"));
    assert_eq!(cfg.learning_rate, 2e-3);
    assert_eq!(cfg.align_mode, AlignSetting::Dot);
    let text = "variant = \"transformer\"\nalign_mode = \"rank\"\nlambda = 0.4\nalpha = 50.0\nlearning_rate = 0.01\n\
                batch_size = 4\nepochs = 3\nseed = 9\ntrain_path = \"t\"\nval_path = \"v\"\ncheckpoint_path = \"c.json\"\n\
                eval_every = 2\nlayer_mask = [false, true]\n[transformer]\nd_model = 16\n";
    let cfg = TrainConfig::from_toml(text).unwrap();
    assert_eq!(cfg.variant, Variant::Transformer);
    assert_eq!(cfg.transformer.d_model, 16);
    assert_eq!(cfg.objective().align.unwrap().mode, AlignMode::Rank);
    assert_eq!(cfg.objective().layer_mask, Some(vec![false, true]));
    assert_eq!(TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
}

#[test]
fn config_rejects_bad_values() {
    let base = "train_path = \"t\"\nval_path = \"v\"\n";
    for extra in
        ["lambda = -0.1", "batch_size = 0", "epochs = 0", "learning_rate = 0.0", "bogus = 1", "align_mode = \"cosine\""]
    {
        let err = TrainConfig::from_toml(&format!("{base}{extra}\n")).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{extra}: {err}");
    }
    let err = TrainConfig::from_toml(&format!("{base}variant = \"transformer\"\nlayer_mask = [true]\n")).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn align_none_forces_lambda_zero() {
    let cfg = TrainConfig { align_mode: AlignSetting::None, lambda: 3.0, ..tiny_config() };
    assert_eq!(cfg.effective_lambda(), 0.0);
    assert!(cfg.objective().align.is_none());
    assert_eq!(cfg.objective().lambda(), 0.0);
}

#[test]
fn config_paths_resolve_against_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "train_path = \"t.jsonl\"\nval_path = \"/abs/v.jsonl\"\ncheckpoint_path = \"ck.json\"\n")
        .unwrap();
    let cfg = TrainConfig::load(&path).unwrap();
    assert_eq!(cfg.train_path, dir.path().join("t.jsonl"));
    assert_eq!(cfg.val_path, std::path::PathBuf::from("/abs/v.jsonl"));
    assert_eq!(cfg.checkpoint_path, Some(dir.path().join("ck.json")));
}

fn fresh(cfg: &TrainConfig) -> (AnyModel<f64>, AdamState<f64>) {
    let model = AnyModel::new(cfg.variant, cfg.vanilla, cfg.transformer, &mut SplitMix64::new(cfg.seed)).unwrap();
    let adam = AdamState::new(model.params(), AdamConfig::default());
    (model, adam)
}

#[test]
fn lambda_zero_matches_no_alignment_bitwise() {
    for variant in [Variant::Vanilla, Variant::Transformer] {
        let set = data(5, 16);
        let batches: Vec<Vec<&Instance>> = set.chunks(4).map(|c| c.iter().collect()).collect();
        let none = TrainConfig { variant, align_mode: AlignSetting::None, ..tiny_config() };
        let dot = TrainConfig { variant, align_mode: AlignSetting::Dot, lambda: 0.0, ..tiny_config() };
        let (mut m0, mut a0) = fresh(&none);
        let (mut m1, mut a1) = fresh(&dot);
        for b in batches.iter().cycle().take(6) {
            let l0 = training_step(&mut m0, b, &none.objective(), &mut a0, 1e-2).unwrap();
            let l1 = training_step(&mut m1, b, &dot.objective(), &mut a1, 1e-2).unwrap();
            assert_eq!(l0.total.to_bits(), l1.total.to_bits());
            assert_eq!(l0.align, 0.0);
            assert!(l1.align > 0.0);
            assert_eq!(m0.params(), m1.params());
        }
        assert_eq!(a0, a1);
    }
}

#[test]
fn overfits_fixed_batch() {
    let set = data(6, 32);
    let batch: Vec<&Instance> = set.iter().collect();
    let cfg = TrainConfig { vanilla: VanillaDims::uniform(16), ..tiny_config() };
    let (mut model, mut adam) = fresh(&cfg);
    let objective = cfg.objective();
    let first = training_step(&mut model, &batch, &objective, &mut adam, 1e-2).unwrap();
    let mut last = first;
    for _ in 1..50 {
        last = training_step(&mut model, &batch, &objective, &mut adam, 1e-2).unwrap();
    }
    assert!(last.total < 0.5 * first.total, "{} -> {}", first.total, last.total);
}

#[test]
fn step_rejects_empty_batch() {
    let cfg = tiny_config();
    let (mut model, mut adam) = fresh(&cfg);
    assert!(training_step(&mut model, &[], &cfg.objective(), &mut adam, 1e-3).is_err());
}

#[test]
fn oracle_predictions_score_perfectly() {
    let set = data(7, 200);
    let preds: Vec<(usize, usize)> = set.iter().map(|i| oracle_predict(i).unwrap()).collect();
    assert_eq!(accuracies(&preds, &set).unwrap(), (1.0, 1.0, 1.0));
    let wrong: Vec<(usize, usize)> = preds.iter().map(|&(a, r)| ((a + 1) % 4, r)).collect();
    assert_eq!(accuracies(&wrong, &set).unwrap(), (0.0, 1.0, 0.0));
    assert!(accuracies(&preds[1..], &set).is_err());
}

#[test]
fn joint_accuracy_bounded_by_parts() {
    let set = data(8, 300);
    let mut rng = SplitMix64::new(1);
    for _ in 0..20 {
        let preds: Vec<(usize, usize)> = set.iter().map(|_| (rng.below(4), rng.below(4))).collect();
        let (a, r, ar) = accuracies(&preds, &set).unwrap();
        assert!(ar <= a.min(r));
    }
}

#[test]
fn evaluate_untrained_model() {
    let set = data(9, 40);
    let cfg = tiny_config();
    let (model, _) = fresh(&cfg);
    let m = evaluate(&model, &set).unwrap();
    assert!(m.acc_q2ar <= m.acc_q2a.min(m.acc_qa2r));
    assert!((0.0..=1.0).contains(&m.gold_similarity));
    assert!(m.evidence_mass_qa > 0.0 && m.evidence_mass_qa < 1.0);
    assert!(evaluate(&model, &[]).is_err());
    let outcome = evaluate_instance(&model, &set[0]).unwrap();
    assert!(outcome.answer < 4 && outcome.rationale < 4);
}

#[test]
fn histogram_examples() {
    let one_hot = AttentionMap::<f64>::one_hot(5, 2).unwrap();
    let sim = crate::align::sim_dot(&one_hot, &one_hot).unwrap();
    let bins = histogram(&[sim; 7], 4).unwrap();
    assert_eq!(bins.iter().map(|b| b.count).collect::<Vec<_>>(), [0, 0, 0, 7]);
    assert_eq!((bins[0].bin_low, bins[3].bin_high), (0.0, 1.0));
    let bins = histogram(&[0.0, 0.1, 0.5, 0.49, 1.0], 2).unwrap();
    assert_eq!(bins.iter().map(|b| b.count).collect::<Vec<_>>(), [3, 2]);
    assert!(histogram(&[0.5], 1).is_err());
    assert!(histogram(&[1.5], 3).is_err());
}

#[test]
fn similarity_histogram_partitions_dataset() {
    let set = data(10, 30);
    let (model, _) = fresh(&tiny_config());
    let bins = similarity_histogram(&model, &set, 10).unwrap();
    assert_eq!(bins.len(), 10);
    assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 30);
}

#[test]
fn checkpoint_round_trips_bitwise() {
    for variant in [Variant::Vanilla, Variant::Transformer] {
        let cfg = TrainConfig { variant, ..tiny_config() };
        let (mut model, mut adam) = fresh(&cfg);
        let set = data(11, 4);
        let batch: Vec<&Instance> = set.iter().collect();
        training_step(&mut model, &batch, &cfg.objective(), &mut adam, 1e-2).unwrap();
        let ck = Checkpoint::capture(&cfg, 3, &model, &adam).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let (m2, a2) = back.restore::<f64>().unwrap();
        assert_eq!(m2, model);
        assert_eq!(a2, adam);
        assert_eq!(back.epoch, 3);
        assert_eq!(back.variant, variant);
    }
}

#[test]
fn checkpoint_rejects_corruption() {
    let cfg = tiny_config();
    let (model, adam) = fresh(&cfg);
    let ck = Checkpoint::capture(&cfg, 0, &model, &adam).unwrap();

    let mut bad = ck.clone();
    bad.params[0].values[0] = "zzz".into();
    assert!(matches!(bad.restore::<f64>(), Err(Error::Data(_))));

    let mut bad = ck.clone();
    bad.params.pop();
    assert!(matches!(bad.restore::<f64>(), Err(Error::Data(_))));

    let mut bad = ck.clone();
    bad.variant = Variant::Transformer;
    assert!(Checkpoint::from_json(&bad.to_json().unwrap()).is_err());

    assert!(matches!(Checkpoint::from_json("{"), Err(Error::Parse { .. })));
}

#[test]
fn training_is_deterministic_and_reports_every_epoch() {
    let cfg = TrainConfig { epochs: 3, ..tiny_config() };
    let (train_set, val_set) = (data(12, 24), data(13, 10));
    let a = train_on::<f64>(&cfg, &train_set, &val_set, |_| {}).unwrap();
    let b = train_on::<f64>(&cfg, &train_set, &val_set, |_| {}).unwrap();
    let strip = |r: &TrainReport| r.records.iter().map(|e| EpochRecord { seconds: 0.0, ..*e }).collect::<Vec<_>>();
    assert_eq!(strip(&a.report), strip(&b.report));
    assert_eq!(a.model, b.model);
    assert_eq!(a.report.records.iter().map(|r| r.epoch).collect::<Vec<_>>(), [1, 2, 3]);
    for r in &a.report.records {
        assert!(r.acc_q2ar <= r.acc_q2a.min(r.acc_qa2r));
    }
    let csv = a.report.to_csv().unwrap();
    assert!(csv.starts_with("epoch,l_qa,l_qar,l_align,acc_q2a,"));
    assert_eq!(TrainReport::from_csv(&csv).unwrap(), a.report);

    let sparse = TrainConfig { eval_every: 2, ..cfg };
    let c = train_on::<f64>(&sparse, &train_set, &val_set, |_| {}).unwrap();
    assert_eq!(c.report.records.iter().map(|r| r.epoch).collect::<Vec<_>>(), [2, 3]);
    assert_eq!(c.model, a.model);
}

#[test]
fn train_reads_files_and_writes_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    write_instances(dir.path().join("train.jsonl"), &data(14, 16)).unwrap();
    write_instances(dir.path().join("val.jsonl"), &data(15, 8)).unwrap();
    let cfg = TrainConfig {
        train_path: dir.path().join("train.jsonl"),
        val_path: dir.path().join("val.jsonl"),
        checkpoint_path: Some(dir.path().join("ck.json")),
        ..tiny_config()
    };
    let mut seen = Vec::new();
    let out = train::<f64>(&cfg, |r| seen.push(r.epoch)).unwrap();
    assert_eq!(seen, [1, 2]);
    let ck = Checkpoint::load(&dir.path().join("ck.json")).unwrap();
    assert_eq!(ck.epoch, 2);
    assert_eq!(ck.restore::<f64>().unwrap().0, out.model);
    assert_eq!(load_model::<f64>(&dir.path().join("ck.json")).unwrap(), out.model);

    let missing = TrainConfig { val_path: dir.path().join("nope.jsonl"), ..cfg };
    assert!(train::<f64>(&missing, |_| {}).is_err());
}

#[test]
fn non_finite_loss_aborts_and_keeps_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let cfg = TrainConfig { checkpoint_path: Some(path.clone()), ..tiny_config() };
    let mut train_set = data(16, 16);
    train_set[0].objects[0][0] = f64::NAN;
    let err = train_on::<f64>(&cfg, &train_set, &data(17, 4), |_| {}).err().unwrap();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, .. }), "{err}");
    assert!(err.is_numeric());
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.epoch, 0);
    let (model, _) = fresh(&TrainConfig { ..cfg.clone() });
    let restored = ck.restore::<f64>().unwrap().0;
    assert!(restored.params().iter().all(|(_, t)| t.is_finite()));
    assert!(restored.params().matches_layout(model.params()));
}

#[test]
fn sweep_needs_alignment() {
    let cfg = TrainConfig { align_mode: AlignSetting::None, ..tiny_config() };
    assert!(matches!(sweep::<f64>(&cfg, &[0.0, 1.0], |_| {}), Err(Error::Config(_))));
}

#[test]
fn sweep_emits_one_row_per_lambda() {
    let dir = tempfile::tempdir().unwrap();
    write_instances(dir.path().join("train.jsonl"), &data(18, 12)).unwrap();
    write_instances(dir.path().join("val.jsonl"), &data(19, 6)).unwrap();
    let cfg = TrainConfig {
        train_path: dir.path().join("train.jsonl"),
        val_path: dir.path().join("val.jsonl"),
        epochs: 1,
        ..tiny_config()
    };
    let rows = sweep::<f64>(&cfg, &[0.0, 0.5, 2.0], |_| {}).unwrap();
    assert_eq!(rows.iter().map(|r| r.lambda).collect::<Vec<_>>(), [0.0, 0.5, 2.0]);
    assert!(sweep_rows_to_csv(&rows).unwrap().starts_with("lambda,"));
}

#[test]
fn gradient_suite_transformer_point_is_resolution_limited() {
    let reports = full_loss_gradcheck(Variant::Transformer, 1, 0).unwrap();
    assert_eq!(reports.len(), 1);
    assert!(reports[0].excess_over_resolution(GRADCHECK_TOL) < 4.0, "{}", reports[0].max_rel_error);
}
