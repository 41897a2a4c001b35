use super::*;
use crate::synthdata::{make_dataset, SceneKind, SynthConfig};
use std::sync::OnceLock;

fn bundle() -> &'static DatasetBundle {
    static B: OnceLock<DatasetBundle> = OnceLock::new();
    B.get_or_init(|| {
        let mut c = SynthConfig::new(SceneKind::EmissiveBoxes, 2);
        c.ring.count = 6;
        c.ring.width = 24;
        c.ring.height = 24;
        c.ring.focal = 27.0;
        make_dataset(&c).unwrap()
    })
}

fn quick() -> TrainConfig {
    TrainConfig {
        iterations: 12,
        patch_size: 8,
        n_samples: 12,
        field_resolution: 10,
        warmup_fraction: 0.25,
        l2h: ConverterSpec::l2h(4),
        h2l: ConverterSpec::h2l(4),
        ..TrainConfig::default()
    }
}

fn run(config: TrainConfig) -> TrainOutcome {
    train(bundle(), config).unwrap()
}

#[test]
fn config_round_trips_through_json() {
    let c = quick();
    let s = serde_json::to_string(&c).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), c);
    let partial: TrainConfig = serde_json::from_str(r#"{"iterations": 7, "losses": ["ldr"]}"#).unwrap();
    assert_eq!(partial.iterations, 7);
    assert_eq!(partial.patch_size, TrainConfig::default().patch_size);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"iteration": 7}"#).is_err());
}

#[test]
fn profiles_set_beta_and_ldr_loss() {
    let f = TrainConfig::profile(Profile::FieldStyle);
    assert_eq!((f.weights.beta, f.loss_mode), (0.01, LossMode::Mse));
    let s = TrainConfig::profile(Profile::SplatStyle);
    assert_eq!((s.weights.beta, s.loss_mode), (0.05, LossMode::L1Dssim));
    let mut c = quick();
    c.iterations = 99;
    c.apply_profile(Profile::FieldStyle);
    assert_eq!((c.iterations, c.weights.beta), (99, 0.01));
    for p in [Profile::FieldStyle, Profile::SplatStyle] {
        assert_eq!(p.to_string().parse::<Profile>().unwrap(), p);
    }
}

#[test]
fn loss_sets_parse() {
    let s = parse_loss_set("ldr+h2l").unwrap();
    assert_eq!(loss_label(&s), "ldr+h2l");
    assert_eq!(parse_loss_set("h2l,hdr,ldr").unwrap().len(), 3);
    assert!(parse_loss_set("ldr+rgb").is_err());
}

#[test]
fn validation_rejects_bad_configs() {
    assert!(TrainConfig::default().validate().is_ok());
    let cases: Vec<Box<dyn Fn(&mut TrainConfig)>> = vec![
        Box::new(|c| c.iterations = 0),
        Box::new(|c| c.losses.clear()),
        Box::new(|c| c.field_lr_final = c.field_lr),
        Box::new(|c| c.l2h_lr_final = 2.0 * c.l2h_lr),
        Box::new(|c| c.h2l_lr = -1.0),
        Box::new(|c| c.hdr_ratio = 1.5),
        Box::new(|c| c.warmup_fraction = 1.0),
        Box::new(|c| c.weights.mu = 0.0),
        Box::new(|c| std::mem::swap(&mut c.l2h, &mut c.h2l)),
        Box::new(|c| c.patch_size = 1),
    ];
    for (i, f) in cases.iter().enumerate() {
        let mut c = TrainConfig::default();
        f(&mut c);
        assert!(matches!(c.validate(), Err(TrainError::Config(_) | TrainError::Loss(_))), "case {i}");
    }
    let mut c = quick();
    c.patch_size = 32;
    assert!(matches!(Trainer::new(bundle(), c), Err(TrainError::Config(_))));
}

#[test]
fn learning_rates_reach_their_targets_on_the_last_step() {
    let c = TrainConfig::default();
    assert_eq!(c.learning_rates(0), [c.field_lr, c.l2h_lr, c.h2l_lr]);
    let last = c.learning_rates(c.iterations - 1);
    for (got, want) in last.iter().zip([c.field_lr_final, c.l2h_lr_final, c.h2l_lr_final]) {
        assert!((got - want).abs() <= 1e-12 * want, "{got} vs {want}");
    }
    let mid = c.learning_rates(c.iterations / 2);
    assert!(mid[0] < c.field_lr && mid[0] > c.field_lr_final);
}

#[test]
fn warmup_only_applies_with_the_ldr_term() {
    let mut c = TrainConfig::default();
    assert_eq!(c.warmup_steps(), 150);
    c.losses = parse_loss_set("hdr+h2l").unwrap();
    assert_eq!(c.warmup_steps(), 0);
}

#[test]
fn training_is_bitwise_reproducible() {
    let a = run(quick());
    let b = run(quick());
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(a.history, b.history);
    let mut other = quick();
    other.seed = 1;
    assert_ne!(run(other).checkpoint.to_bytes().unwrap(), a.checkpoint.to_bytes().unwrap());
}

#[test]
fn a_short_run_improves_the_training_views() {
    let mut c = quick();
    c.iterations = 200;
    c.losses = parse_loss_set("ldr").unwrap();
    let views = &bundle().manifest.train;
    let psnr = |m: &Model| mean_metrics(&evaluate(m, bundle(), views, &c).unwrap()).psnr_ldr;
    let before = psnr(&Model::init(&c, bundle()));
    let after = psnr(&run(c.clone()).checkpoint.model);
    assert!(after > before + 3.0, "{before} -> {after}");
}

#[test]
fn checkpoint_bytes_round_trip() {
    let out = run(quick());
    let bytes = out.checkpoint.to_bytes().unwrap();
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, out.checkpoint);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    out.checkpoint.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), out.checkpoint);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(Checkpoint::from_bytes(&long).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut version = bytes;
    version[4] = 9;
    assert!(Checkpoint::from_bytes(&version).is_err());
}

#[test]
fn resumed_run_matches_the_uninterrupted_one() {
    let full = run(quick());
    let mut t = Trainer::new(bundle(), quick()).unwrap();
    let mut rows = Vec::new();
    t.run(5, &mut rows).unwrap();
    let bytes = t.checkpoint().to_bytes().unwrap();
    drop(t);
    let mut t = Trainer::resume(bundle(), Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(t.step(), 5);
    t.run(u64::MAX, &mut rows).unwrap();
    assert_eq!(t.checkpoint().to_bytes().unwrap(), full.checkpoint.to_bytes().unwrap());
    assert_eq!(rows, full.history);
}

#[test]
fn disabled_term_equals_zero_weight() {
    let bits = |m: &Model| {
        let mut v: Vec<u64> = m.field.density.iter().chain(&m.field.color).map(|x| x.to_bits()).collect();
        for t in m.l2h.tensors.iter().chain(&m.h2l.tensors) {
            v.extend(t.data().iter().map(|x| x.to_bits()));
        }
        v
    };
    let mut zero_beta = quick();
    zero_beta.weights.beta = 0.0;
    let mut no_h2l = quick();
    no_h2l.losses = parse_loss_set("ldr+hdr").unwrap();
    assert_eq!(bits(&run(zero_beta).checkpoint.model), bits(&run(no_h2l).checkpoint.model));

    let mut zero_alpha = quick();
    zero_alpha.weights.alpha = 0.0;
    let mut no_hdr = quick();
    no_hdr.losses = parse_loss_set("ldr+h2l").unwrap();
    assert_eq!(bits(&run(zero_alpha).checkpoint.model), bits(&run(no_hdr).checkpoint.model));
}

#[test]
fn non_finite_parameters_abort_with_a_dump() {
    let mut c = quick();
    c.warmup_fraction = 0.0;
    let mut t = Trainer::new(bundle(), c).unwrap();
    let w = t.model.l2h.tensors[0].data().to_vec();
    let mut poisoned = w.clone();
    poisoned[0] = f64::NAN;
    t.model.l2h.tensors[0] = Tensor::new(t.model.l2h.tensors[0].shape().to_vec(), poisoned).unwrap();
    let err = t.train_step().unwrap_err();
    let TrainError::NumericAbort(dump) = err else {
        panic!("expected a numeric abort, got {err}");
    };
    assert_eq!(dump.step, 0);
    assert_eq!(dump.gt_ldr.len(), 3 * 8 * 8);
    assert!(dump.non_finite_params.iter().any(|p| p.starts_with("l2h.")));
    assert_eq!(t.step(), 0);
    let json = serde_json::to_value(&*dump).unwrap();
    assert!(json.get("patch_origin").is_some());
}

#[test]
fn frozen_field_stops_moving_after_warmup() {
    let mut c = quick();
    c.freeze_field = true;
    let warm = c.warmup_steps();
    assert!(warm > 0);
    let mut t = Trainer::new(bundle(), c).unwrap();
    let init = t.model.field.clone();
    let mut rows = Vec::new();
    t.run(warm, &mut rows).unwrap();
    let after_warmup = t.model.field.clone();
    assert_ne!(after_warmup, init);
    let l2h = t.model.l2h.clone();
    t.run(u64::MAX, &mut rows).unwrap();
    assert_eq!(t.model.field, after_warmup);
    assert_ne!(t.model.l2h, l2h);
}

#[test]
fn zero_hdr_ratio_never_uses_hdr_ground_truth() {
    let mut c = quick();
    c.hdr_ratio = 0.0;
    let t = Trainer::new(bundle(), c.clone()).unwrap();
    assert!(t.supervised_views().is_empty());
    let out = run(c);
    assert!(out.history.iter().all(|r| r.loss_hdr.is_none()));
    assert!(out.history.iter().any(|r| r.loss_h2l.is_some()));

    let mut half = quick();
    half.hdr_ratio = 0.5;
    let t = Trainer::new(bundle(), half).unwrap();
    let sup = t.supervised_views();
    assert_eq!(sup.len(), 2);
    assert!(sup.iter().all(|v| bundle().manifest.train.contains(v)));
}

#[test]
fn ldr_only_runs_report_no_hdr_metrics() {
    let mut c = quick();
    c.losses = parse_loss_set("ldr").unwrap();
    let out = run(c.clone());
    let last = out.final_eval().unwrap();
    assert!(last.psnr_ldr.is_some());
    assert!(last.psnr_hdr_mulaw.is_none() && last.ssim_hdr_mulaw.is_none());
    assert!(out.history.iter().all(|r| r.loss_hdr.is_none() && r.loss_h2l.is_none()));

    let full = run(quick());
    let m = evaluate(&full.checkpoint.model, bundle(), &bundle().manifest.test, &quick()).unwrap();
    assert_eq!(m.len(), bundle().manifest.test.len());
    assert!(m.iter().all(|r| r.psnr_hdr.is_some()));
    let mean = mean_metrics(&m);
    let direct = m.iter().map(|r| r.psnr_ldr).sum::<f64>() / m.len() as f64;
    assert!((mean.psnr_ldr - direct).abs() < 1e-12);
}

#[test]
fn metrics_csv_has_a_header_and_one_line_per_row() {
    let out = run(quick());
    let mut buf = Vec::new();
    write_metrics(&mut buf, &out.history).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("step,split,psnr_ldr"));
    assert_eq!(lines.count(), out.history.len());
    let evals = out.history.iter().filter(|r| r.split == "test").count();
    assert_eq!(evals, 1);
}

#[test]
fn ground_truth_field_is_self_consistent_across_views() {
    let b = bundle();
    let field = crate::synthdata::build_scene(&b.manifest.config.scene).unwrap();
    let poses = b.manifest.poses().unwrap();
    let opts = RenderOptions {
        n_samples: 128,
        ..RenderOptions::default()
    };
    let c = cross_view_consistency(&field, &poses, &opts, 2, 0.05).unwrap();
    assert!(c.points > 20, "{c:?}");
    assert!(c.mean_abs_diff < 0.05, "{c:?}");
}
