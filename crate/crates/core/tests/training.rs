use advpose_core::diffnet::{Checkpoint, Parameterized};
use advpose_core::encode::EncodeConfig;
use advpose_core::models::{make_variant, GeneratorMode, GeneratorModel, ModelConfig, ParamGroup, Variant};
use advpose_core::skeleton::SkeletonTopology;
use advpose_core::synth::{generate_dataset, AnthropometricModel, DomainSpec};
use advpose_core::train::{
    adversarial_train, generator_objective, loss_pose, pretrain_generator, AdvConfig, AdvState, Batch, PreparedSet,
    PretrainConfig, PretrainState, TrainError,
};
use ndarray::Array2;

fn sets(n: usize) -> (PreparedSet, PreparedSet) {
    let model = AnthropometricModel::default_16();
    let lab = generate_dataset(&DomainSpec::lab(), &model, n, 31).unwrap();
    let wild = generate_dataset(&DomainSpec::wild(), &model, n, 32).unwrap();
    (PreparedSet::new(&lab), PreparedSet::new(&wild))
}

fn small_pretrain() -> PretrainConfig {
    PretrainConfig { phase1_iterations: 6, phase2_iterations: 6, val_every: 0, ..PretrainConfig::default() }
}

fn small_adv(iterations: usize) -> AdvConfig {
    AdvConfig { iterations, lambda: 0.1, val_every: 0, ..AdvConfig::default() }
}

fn values<P: Parameterized>(m: &P) -> Vec<Array2<f64>> {
    m.params().iter().map(|t| t.value.clone()).collect()
}

fn grads<P: Parameterized>(m: &P) -> Vec<Array2<f64>> {
    m.params().iter().map(|t| t.grad.clone()).collect()
}

#[test]
fn all_wild_batch_has_no_depth_term() {
    let (_, wild) = sets(24);
    let enc = EncodeConfig::default();
    let mut g = GeneratorModel::new(ModelConfig::default(), GeneratorMode::EndToEnd, 3).unwrap();
    let idx: Vec<usize> = (0..12).collect();
    let batch = Batch::gather(&[(&wild, idx)], &enc, 0);
    let out = g.forward(&batch.images, None).unwrap();
    let before = loss_pose(&out, &batch.heatmaps, &batch.depths, &batch.labeled);
    assert_eq!(before.depth_term, 0.0);
    for p in g.depth_net.params_mut() {
        p.value.mapv_inplace(|v| v * 3.0 + 0.5);
    }
    let out = g.forward(&batch.images, None).unwrap();
    let after = loss_pose(&out, &batch.heatmaps, &batch.depths, &batch.labeled);
    assert_eq!(before.value.to_bits(), after.value.to_bits());
}

#[test]
fn wild_labels_never_reach_the_updates() {
    // Planting 3D labels on wild samples must not change a single update:
    // they would only matter if wild data fed the depth term or the real side.
    let (lab, wild) = sets(40);
    let mut tampered = wild.clone();
    for s in &mut tampered.samples {
        let mut pose = lab.samples[s.id % lab.len()].pose3d.clone().unwrap();
        pose.coords.iter_mut().for_each(|c| c[2] += 777.0);
        s.pose3d = Some(pose);
    }
    let enc = EncodeConfig::default();
    let topo = SkeletonTopology::default_16();
    let cfg = small_adv(3);
    let run = |w: &PreparedSet| {
        let (mut g, d) = make_variant(Variant::Full, &ModelConfig::default(), 5).unwrap();
        let mut d = d.unwrap();
        let mut state = AdvState::new(&g, &d, &cfg);
        let h =
            adversarial_train(&mut g, &mut d, &lab, w, None, &cfg, &enc, &topo, &mut state, cfg.iterations).unwrap();
        (values(&g), values(&d), h)
    };
    assert_eq!(run(&wild), run(&tampered));
}

#[test]
fn alternation_counts_updates() {
    let (lab, wild) = sets(30);
    let enc = EncodeConfig::default();
    let topo = SkeletonTopology::default_16();
    for ratio in [1, 3] {
        let cfg = AdvConfig { ratio, ..small_adv(4) };
        let (mut g, d) = make_variant(Variant::Geo, &ModelConfig::default(), 6).unwrap();
        let mut d = d.unwrap();
        let mut state = AdvState::new(&g, &d, &cfg);
        let h = adversarial_train(&mut g, &mut d, &lab, &wild, None, &cfg, &enc, &topo, &mut state, 4).unwrap();
        assert_eq!(h.rows.len(), 4);
        assert_eq!((state.d_updates, state.g_updates), (4 * ratio, 4));
        assert_eq!((state.adam_d.step, state.adam_g.step), (4 * ratio as u64, 4));
    }
}

#[test]
fn non_finite_weights_abort_training() {
    let (lab, wild) = sets(20);
    let enc = EncodeConfig::default();
    let topo = SkeletonTopology::default_16();
    let cfg = small_adv(3);
    let (mut g, d) = make_variant(Variant::Full, &ModelConfig::default(), 7).unwrap();
    let mut d = d.unwrap();
    g.depth_net.params_mut()[0].value[(0, 0)] = f64::NAN;
    let mut state = AdvState::new(&g, &d, &cfg);
    let err = adversarial_train(&mut g, &mut d, &lab, &wild, None, &cfg, &enc, &topo, &mut state, 3).unwrap_err();
    assert!(err.to_string().to_lowercase().contains("non-finite"), "{err}");
    assert_eq!(state.iteration, 0);

    let mut g = GeneratorModel::new(ModelConfig::default(), GeneratorMode::EndToEnd, 8).unwrap();
    g.trunk.params_mut()[1].value.fill(f64::INFINITY);
    let pcfg = small_pretrain();
    let mut ps = PretrainState::new(&g, &pcfg);
    let err = pretrain_generator(&mut g, &lab, &wild, None, &pcfg, &enc, &topo, &mut ps, pcfg.total()).unwrap_err();
    assert!(err.to_string().to_lowercase().contains("non-finite"), "{err}");
}

#[test]
fn adversarial_gradient_reaches_the_2d_module_only_end_to_end() {
    let (lab, wild) = sets(24);
    let enc = EncodeConfig::default();
    let parts = [(&lab, (0..6).collect::<Vec<_>>()), (&wild, (0..6).collect())];
    let batch = Batch::gather(&parts, &enc, 0);
    let trunk_grad = |variant: Variant, lambda: f64, group: ParamGroup| {
        let (mut g, d) = make_variant(variant, &ModelConfig::default(), 9).unwrap();
        let mut d = d.unwrap();
        generator_objective(&mut g, &mut d, &batch, lambda, &enc, group).unwrap();
        assert!(grads(&d).iter().all(|a| a.iter().all(|&v| v == 0.0)), "discriminator gradients are discarded");
        grads(&g.trunk)
    };
    let pose_only = trunk_grad(Variant::Full, 0.0, ParamGroup::All);
    let adversarial = trunk_grad(Variant::Full, 10.0, ParamGroup::All);
    let diff: f64 = pose_only.iter().zip(&adversarial).flat_map(|(a, b)| (a - b).into_iter()).map(f64::abs).sum();
    assert!(diff > 0.0, "the adversarial term changes the 2D module's gradient");
    let fixed = trunk_grad(Variant::FullFix2d, 10.0, GeneratorMode::Fix2d.trainable());
    assert!(fixed.iter().all(|a| a.iter().all(|&v| v == 0.0)));
}

#[test]
fn phase_one_fits_heatmaps_and_leaves_depth_untouched() {
    let (lab, wild) = sets(100);
    let model = AnthropometricModel::default_16();
    let held_lab = PreparedSet::new(&generate_dataset(&DomainSpec::lab(), &model, 20, 41).unwrap());
    let held_wild = PreparedSet::new(&generate_dataset(&DomainSpec::wild(), &model, 20, 42).unwrap());
    let enc = EncodeConfig::default();
    let topo = SkeletonTopology::default_16();
    let cfg =
        PretrainConfig { phase1_iterations: 60, phase2_iterations: 10, val_every: 0, ..PretrainConfig::default() };
    let mut g = GeneratorModel::new(ModelConfig::default(), GeneratorMode::EndToEnd, 10).unwrap();
    let all: Vec<usize> = (0..20).collect();
    let held = Batch::gather(&[(&held_lab, all.clone()), (&held_wild, all)], &enc, 0);
    let heat_loss = |g: &GeneratorModel| {
        let out = g.predict(&held.images, None).unwrap();
        (&out.heatmaps - &held.heatmaps).iter().map(|v| v * v).sum::<f64>()
    };
    let initial = heat_loss(&g);
    let depth_before = values(&g.depth_net);
    let mut state = PretrainState::new(&g, &cfg);
    let h =
        pretrain_generator(&mut g, &lab, &wild, None, &cfg, &enc, &topo, &mut state, cfg.phase1_iterations).unwrap();
    assert_eq!(h.rows.len(), cfg.phase1_iterations);
    assert_eq!(values(&g.depth_net), depth_before);
    let fitted = heat_loss(&g);
    assert!(fitted < initial, "held-out heatmap loss {initial} -> {fitted}");
    pretrain_generator(&mut g, &lab, &wild, None, &cfg, &enc, &topo, &mut state, cfg.total()).unwrap();
    assert_ne!(values(&g.depth_net), depth_before);
}

fn checkpoint_bytes(g: &GeneratorModel, extra: impl FnOnce(&mut Checkpoint)) -> Vec<u8> {
    let mut c = Checkpoint::new();
    g.push_records(&mut c);
    extra(&mut c);
    c.to_bytes()
}

#[test]
fn pretraining_is_deterministic_and_resumable() {
    let (lab, wild) = sets(60);
    let enc = EncodeConfig::default();
    let topo = SkeletonTopology::default_16();
    let cfg = small_pretrain();
    let fresh = || GeneratorModel::new(ModelConfig::default(), GeneratorMode::EndToEnd, 11).unwrap();
    let full = || {
        let mut g = fresh();
        let mut s = PretrainState::new(&g, &cfg);
        let h = pretrain_generator(&mut g, &lab, &wild, None, &cfg, &enc, &topo, &mut s, cfg.total()).unwrap();
        (checkpoint_bytes(&g, |c| s.push_records(c)), h)
    };
    let (a, ha) = full();
    let (b, hb) = full();
    assert_eq!(a, b);
    assert_eq!(ha, hb);

    // Interrupt inside phase 1, round-trip through a checkpoint, finish.
    let mut g = fresh();
    let mut s = PretrainState::new(&g, &cfg);
    let mut h = pretrain_generator(&mut g, &lab, &wild, None, &cfg, &enc, &topo, &mut s, 4).unwrap();
    let saved = Checkpoint::from_bytes(&checkpoint_bytes(&g, |c| s.push_records(c))).unwrap();
    let mut g2 = fresh();
    g2.depth_net.params_mut()[0].value.fill(0.0);
    g2.load_records(&saved).unwrap();
    let mut s2 = PretrainState::new(&g2, &cfg);
    s2.load_records(&saved).unwrap();
    h.extend(pretrain_generator(&mut g2, &lab, &wild, None, &cfg, &enc, &topo, &mut s2, cfg.total()).unwrap());
    assert_eq!(checkpoint_bytes(&g2, |c| s2.push_records(c)), a);
    assert_eq!(h, ha);
    assert_eq!(h.rows.iter().map(|r| r.iteration).collect::<Vec<_>>(), (1..=cfg.total()).collect::<Vec<_>>());
}

#[test]
fn adversarial_training_is_deterministic_and_resumable() {
    let (lab, wild) = sets(40);
    let enc = EncodeConfig::default();
    let topo = SkeletonTopology::default_16();
    let cfg = AdvConfig { ratio: 2, ..small_adv(5) };
    let bytes = |g: &GeneratorModel, d: &advpose_core::models::DiscriminatorModel, s: &AdvState| {
        checkpoint_bytes(g, |c| {
            d.push_records(c);
            s.push_records(c);
        })
    };
    let run = |stops: &[usize]| -> Result<_, TrainError> {
        let (mut g, d) = make_variant(Variant::Full, &ModelConfig::default(), 12)?;
        let mut d = d.unwrap();
        let mut s = AdvState::new(&g, &d, &cfg);
        let mut history = advpose_core::train::TrainHistory::default();
        for &stop in stops {
            history.extend(adversarial_train(&mut g, &mut d, &lab, &wild, None, &cfg, &enc, &topo, &mut s, stop)?);
            let saved = Checkpoint::from_bytes(&bytes(&g, &d, &s))?;
            let (g2, d2) = make_variant(Variant::Full, &ModelConfig::default(), 99)?;
            let (mut g2, mut d2) = (g2, d2.unwrap());
            g2.load_records(&saved)?;
            d2.load_records(&saved)?;
            s = AdvState::new(&g2, &d2, &cfg);
            s.load_records(&saved)?;
            (g, d) = (g2, d2);
        }
        Ok((bytes(&g, &d, &s), history))
    };
    let (a, ha) = run(&[5]).unwrap();
    let (b, hb) = run(&[5]).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    let (c, hc) = run(&[2, 3, 5]).unwrap();
    assert_eq!(a, c);
    assert_eq!(ha, hc);
    assert!(ha.rows.iter().all(|r| r.l_d.is_some_and(|v| v > 0.0) && r.l_g.is_some_and(|v| v > 0.0)));
}
