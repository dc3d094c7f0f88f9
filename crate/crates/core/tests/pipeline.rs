mod common;

use sam_core::checkpoint::Checkpoint;
use sam_core::experiment::{build_generator, ensure_frozen, run_pipeline, training_data, Layout};
use sam_core::training::{train, Trainer};

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config();
    let layout = Layout::new(dir.path());
    let gen = build_generator(&cfg).unwrap();
    let (oracles, inversion) = ensure_frozen(&gen, &cfg, &layout).unwrap();
    let data = training_data(&gen, &cfg).unwrap();

    let mut tc = cfg.train.clone();
    tc.checkpoint_every = 3;
    let mut full = Trainer::new(gen.clone(), inversion.clone(), oracles.clone(), tc.clone()).unwrap();
    let full_ckpt = train(&mut full, &data, &dir.path().join("full")).unwrap();

    let mid = Checkpoint::load(&dir.path().join("full").join("ckpt_3.ckpt")).unwrap();
    let mut resumed = Trainer::resume(&mid, oracles.clone()).unwrap();
    assert_eq!(resumed.step_count(), 3);
    let resumed_ckpt = train(&mut resumed, &data, &dir.path().join("resumed")).unwrap();
    assert_eq!(resumed_ckpt.to_bytes(), full_ckpt.to_bytes());
}

#[test]
fn pipeline_outputs_are_reproducible() {
    let cfg = common::tiny_config();
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        run_pipeline(&cfg, &layout).unwrap();
        let read = |p: std::path::PathBuf| std::fs::read(p).unwrap();
        outputs.push((read(layout.sam()), read(layout.aging_accuracy()), read(layout.identity_gap())));
    }
    assert!(outputs[0] == outputs[1]);
    let acc = String::from_utf8(outputs[0].1.clone()).unwrap();
    assert_eq!(acc.lines().count(), 1 + cfg.eval.targets.len());
}

#[test]
fn cycle_gradients_match_finite_differences() {
    use candle_core::Tensor;
    use sam_core::losses::{step_objective, ObjectiveContext};

    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config();
    let layout = Layout::new(dir.path());
    let gen = build_generator(&cfg).unwrap();
    let (oracles, inversion) = ensure_frozen(&gen, &cfg, &layout).unwrap();
    let data = training_data(&gen, &cfg).unwrap();
    let mut trainer = Trainer::new(gen.clone(), inversion, oracles, cfg.train.clone()).unwrap();
    for _ in 0..3 {
        trainer.train_step(&data).unwrap();
    }
    let ctx = ObjectiveContext::from_config(&trainer.config, trainer.model.generator.average());
    let x = data.images().narrow(0, 0, 2).unwrap();
    let sources = [30.0, 70.0];
    let targets = [80.0, 15.0];
    let eval = |t: &Trainer| {
        step_objective(&x, &sources, &targets, &ctx, &t.oracles, |x, a| t.model.transform_batch(x, a)).unwrap()
    };
    let grads = eval(&trainer).0.backward().unwrap();
    for (name, var) in trainer.model.aging.trainable_params().into_iter().filter(|(n, _)| n.contains("proj")).take(4) {
        let shape = var.as_tensor().shape().clone();
        let vals = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let k = vals.len() / 3;
        let at = |d: f64| {
            let mut v = vals.clone();
            v[k] += d;
            var.set(&Tensor::from_vec(v, shape.clone(), var.device()).unwrap()).unwrap();
            eval(&trainer).1.grand_total
        };
        let fd = (at(1e-4) - at(-1e-4)) / 2e-4;
        at(0.0);
        let rel = (g[k] - fd).abs() / g[k].abs().max(fd.abs()).max(1e-8);
        assert!(rel < 1e-3, "{name}[{k}]: autodiff {} vs fd {fd}", g[k]);
    }
}
