use dropdisc::adapt::{
    gradient_distribution, joint_loss, joint_loss_with_masks, train, train_step, Optimizers,
    TrainConfig, Variant,
};
use dropdisc::data::{make_blobs, DomainBatch};
use dropdisc::diffcore::{finite_difference_check, DenseLayer, DropoutMask, Matrix, Rng};
use dropdisc::network::{Classifier, Discriminator, Extractor, Model, Topology};

fn random_batch(ns: usize, nt: usize, dim: usize, n_classes: usize, seed: u64) -> DomainBatch {
    let mut rng = Rng::new(seed);
    let src = Matrix::new(ns, dim, (0..ns * dim).map(|_| rng.normal()).collect()).unwrap();
    let tgt = Matrix::new(nt, dim, (0..nt * dim).map(|_| rng.normal() + 0.5).collect()).unwrap();
    let labels = (0..ns).map(|i| i % n_classes).collect();
    DomainBatch::new(src, labels, tgt).unwrap()
}

fn small_model(dropout: Option<f64>, seed: u64) -> Model {
    let topo = Topology {
        input_dim: 3,
        extractor: vec![5, 4],
        discriminator: vec![6, 5],
        n_classes: 3,
    };
    Model::new(&topo, dropout, &mut Rng::new(seed)).unwrap()
}

fn layer(w: &[&[f64]], b: &[f64]) -> DenseLayer {
    let rows: Vec<Vec<f64>> = w.iter().map(|r| r.to_vec()).collect();
    DenseLayer::new(Matrix::from_rows(&rows).unwrap(), b.to_vec()).unwrap()
}

fn blobs(n: usize, shift: f64, seed: u64) -> dropdisc::data::Dataset {
    let means = vec![vec![-2.0 + shift, 0.0], vec![2.0 + shift, 0.0]];
    make_blobs(n, 2, &means, 0.5, &mut Rng::new(seed)).unwrap()
}

#[test]
fn zero_lambda_matches_source_only_extractor_update() {
    let batch = random_batch(6, 6, 3, 3, 1);
    let with_disc = small_model(Some(0.5), 2);
    let mut without = with_disc.clone();
    without.discriminator = None;

    let g_joint = joint_loss(&batch, &with_disc, 3, &mut Rng::new(3))
        .unwrap()
        .backward(&with_disc, 0.0)
        .unwrap();
    let g_src = joint_loss(&batch, &without, 0, &mut Rng::new(3))
        .unwrap()
        .backward(&without, 0.0)
        .unwrap();
    assert_eq!(g_joint.extractor.flatten(), g_src.extractor.flatten());
    assert_eq!(g_joint.classifier.flatten(), g_src.classifier.flatten());
}

#[test]
fn single_sample_without_dropout_matches_grl_step() {
    let batch = random_batch(5, 5, 3, 3, 4);
    let base = small_model(Some(0.0), 5);
    let mut a = base.clone();
    let mut b = base;
    let mut opt_a = Optimizers::new(0.05, 0.9).unwrap();
    let mut opt_b = opt_a.clone();
    for _ in 0..3 {
        let la = train_step(&batch, &mut a, 1, 0.7, &mut opt_a, &mut Rng::new(6)).unwrap();
        let lb = train_step(&batch, &mut b, 1, 0.7, &mut opt_b, &mut Rng::new(99)).unwrap();
        assert_eq!(la, lb);
    }
    assert_eq!(a, b);
}

#[test]
fn grl_and_degenerate_cd3a_agree_over_200_steps() {
    let source = blobs(320, 0.0, 10);
    let target = blobs(320, 1.0, 11);
    let base = TrainConfig {
        epochs: 20,
        extractor_widths: vec![8],
        discriminator_widths: vec![8],
        ..TrainConfig::default()
    };
    let grl = TrainConfig { variant: Variant::Grl, ..base.clone() };
    let cd3a = TrainConfig {
        variant: Variant::Cd3a,
        dropout: 0.0,
        k_min: 1,
        k_max: Some(1),
        ..base
    };
    let (m1, h1) = train(&source, &target, &grl).unwrap();
    let (m2, h2) = train(&source, &target, &cd3a).unwrap();
    assert_eq!(h1.records.len(), 200);
    for (r1, r2) in h1.records.iter().zip(&h2.records) {
        assert_eq!(r1.loss_cls.to_bits(), r2.loss_cls.to_bits());
        assert_eq!(r1.loss_dom.map(f64::to_bits), r2.loss_dom.map(f64::to_bits));
    }
    assert_eq!(m1, m2);
}

/// Extractor `x -> relu(w_f x + b_f)`, classifier `[1, -1]ᵀ f`,
/// discriminator `w_d f + b_d`; one source row `x = 1, y = 0`, one target
/// row `x = 2`. Every quantity below is derived by hand.
#[test]
fn hand_computed_step() {
    let (w_f, w_d, lambda, lr) = (0.5, 1.0, 0.5, 0.1);
    let mut model = Model {
        extractor: Extractor::from_layers(1, vec![layer(&[&[w_f]], &[0.0])]).unwrap(),
        classifier: Classifier::from_layers(vec![layer(&[&[1.0], &[-1.0]], &[0.0, 0.0])]).unwrap(),
        discriminator: Some(
            Discriminator::from_layers(vec![layer(&[&[w_d]], &[0.0])], 0.0).unwrap(),
        ),
    };
    let batch = DomainBatch::new(
        Matrix::from_rows(&[[1.0]]).unwrap(),
        vec![0],
        Matrix::from_rows(&[[2.0]]).unwrap(),
    )
    .unwrap();
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());

    let (f_s, f_t) = (0.5, 1.0);
    // logits (0.5, -0.5): p0 = σ(1)
    let p0 = sig(1.0);
    let loss_cls = -p0.ln();
    let (gz_s, gz_t) = (sig(f_s) / 2.0, (sig(f_t) - 1.0) / 2.0);
    let loss_dom = (-(1.0 - sig(f_s)).ln() - sig(f_t).ln()) / 2.0;

    let g_logit = [p0 - 1.0, 1.0 - p0];
    let gc_w = [g_logit[0] * f_s, g_logit[1] * f_s];
    let gd_w = gz_s * f_s + gz_t * f_t;
    let gd_b = gz_s + gz_t;
    let g_fs = (g_logit[0] - g_logit[1]) - lambda * w_d * gz_s;
    let g_ft = -lambda * w_d * gz_t;
    let gf_w = g_fs * 1.0 + g_ft * 2.0;
    let gf_b = g_fs + g_ft;

    let mut opt = Optimizers::new(lr, 0.9).unwrap();
    let losses = train_step(&batch, &mut model, 1, lambda, &mut opt, &mut Rng::new(0)).unwrap();
    let close = |a: f64, b: f64| assert!((a - b).abs() < 1e-14, "{a} vs {b}");
    close(losses.loss_cls, loss_cls);
    close(losses.loss_dom.unwrap(), loss_dom);

    let ext = model.extractor.stack().params_flat();
    close(ext[0], w_f - lr * gf_w);
    close(ext[1], -lr * gf_b);
    let cls = model.classifier.stack().params_flat();
    close(cls[0], 1.0 - lr * gc_w[0]);
    close(cls[1], -1.0 - lr * gc_w[1]);
    close(cls[2], -lr * g_logit[0]);
    close(cls[3], -lr * g_logit[1]);
    let disc = model.discriminator.as_ref().unwrap().stack().params_flat();
    close(disc[0], w_d - lr * gd_w);
    close(disc[1], -lr * gd_b);
}

fn fixed_masks(model: &Model, k: usize, seed: u64) -> Vec<Vec<DropoutMask>> {
    let disc = model.discriminator.as_ref().unwrap();
    let mut rng = Rng::new(seed);
    (0..k).map(|_| disc.sample_masks(&mut rng).unwrap()).collect()
}

fn jitter(mut model: Model, seed: u64) -> Model {
    let mut rng = Rng::new(seed);
    let mut stacks = vec![model.extractor.stack_mut(), model.classifier.stack_mut()];
    if let Some(d) = model.discriminator.as_mut() {
        stacks.push(d.stack_mut());
    }
    for stack in stacks {
        let p: Vec<f64> = stack.params_flat().iter().map(|v| v + 0.2 * rng.normal()).collect();
        stack.set_params_flat(&p).unwrap();
    }
    model
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    let batch = random_batch(1, 1, 3, 3, 20);
    // zero biases put hidden units fed by all-zero inputs on the ReLU kink
    let model = jitter(small_model(Some(0.3), 21), 23);
    let masks = fixed_masks(&model, 3, 22);
    let lambda = 0.6;
    let loss = joint_loss_with_masks(&batch, &model, &masks).unwrap();
    let parts = loss.loss_gradients(&model).unwrap();
    let eval = |m: &Model| joint_loss_with_masks(&batch, m, &masks).unwrap();

    // θ_c against L_c
    let theta_c = model.classifier.stack().params_flat();
    let err = finite_difference_check(
        |p| {
            let mut m = model.clone();
            m.classifier.stack_mut().set_params_flat(p).unwrap();
            eval(&m).loss_cls
        },
        &theta_c,
        &parts.classifier.flatten(),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "classifier {err}");

    // θ_d against L_d
    let theta_d = model.discriminator.as_ref().unwrap().stack().params_flat();
    let err = finite_difference_check(
        |p| {
            let mut m = model.clone();
            m.discriminator.as_mut().unwrap().stack_mut().set_params_flat(p).unwrap();
            eval(&m).loss_dom.unwrap()
        },
        &theta_d,
        &parts.discriminator.as_ref().unwrap().flatten(),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "discriminator {err}");

    // θ_f against L_c + L_d before reversal, and L_c − λ L_d after it
    let theta_f = model.extractor.stack().params_flat();
    let f_loss = |p: &[f64], sign: f64| {
        let mut m = model.clone();
        m.extractor.stack_mut().set_params_flat(p).unwrap();
        let l = eval(&m);
        l.loss_cls + sign * l.loss_dom.unwrap()
    };
    let mut g_sum = parts.features_cls.clone();
    g_sum.add_assign(parts.features_dom.as_ref().unwrap()).unwrap();
    let plain = loss.extractor_gradients(&model, &g_sum).unwrap().flatten();
    let err = finite_difference_check(|p| f_loss(p, 1.0), &theta_f, &plain, 1e-5).unwrap();
    assert!(err < 1e-4, "extractor {err}");

    let reversed = loss.backward(&model, lambda).unwrap().extractor.flatten();
    let err = finite_difference_check(|p| f_loss(p, -lambda), &theta_f, &reversed, 1e-5).unwrap();
    assert!(err < 1e-4, "reversed extractor {err}");
}

#[test]
fn classifier_ignores_domain_loss() {
    let batch = random_batch(4, 4, 3, 3, 30);
    let with_disc = small_model(Some(0.5), 31);
    let mut without = with_disc.clone();
    without.discriminator = None;
    let a = joint_loss(&batch, &with_disc, 4, &mut Rng::new(1))
        .unwrap()
        .backward(&with_disc, 1.0)
        .unwrap();
    let b = joint_loss(&batch, &without, 0, &mut Rng::new(1))
        .unwrap()
        .backward(&without, 1.0)
        .unwrap();
    assert_eq!(a.classifier.flatten(), b.classifier.flatten());
}

#[test]
fn discriminator_descends_and_extractor_ascends_domain_loss() {
    let batch = random_batch(8, 8, 3, 3, 40);
    let model = small_model(Some(0.5), 41);
    let masks = fixed_masks(&model, 4, 42);
    let loss = joint_loss_with_masks(&batch, &model, &masks).unwrap();
    let before = loss.loss_dom.unwrap();
    let grads = loss.backward(&model, 1.0).unwrap();
    let lr = 1e-3;

    let mut m = model.clone();
    let disc = m.discriminator.as_mut().unwrap();
    let stepped: Vec<f64> = disc
        .stack()
        .params_flat()
        .iter()
        .zip(grads.discriminator.as_ref().unwrap().flatten())
        .map(|(p, g)| p - lr * g)
        .collect();
    disc.stack_mut().set_params_flat(&stepped).unwrap();
    let after_d = joint_loss_with_masks(&batch, &m, &masks).unwrap().loss_dom.unwrap();
    assert!(after_d < before, "{after_d} >= {before}");

    // θ_f-only step with the classification term removed isolates the
    // reversed domain gradient
    let parts = loss.loss_gradients(&model).unwrap();
    let reversed = dropdisc::diffcore::grad_reverse(parts.features_dom.as_ref().unwrap(), 1.0);
    let g_f = loss.extractor_gradients(&model, &reversed).unwrap().flatten();
    let mut m = model.clone();
    let stepped: Vec<f64> = m
        .extractor
        .stack()
        .params_flat()
        .iter()
        .zip(g_f)
        .map(|(p, g)| p - lr * g)
        .collect();
    m.extractor.stack_mut().set_params_flat(&stepped).unwrap();
    let after_f = joint_loss_with_masks(&batch, &m, &masks).unwrap().loss_dom.unwrap();
    assert!(after_f > before, "{after_f} <= {before}");
}

#[test]
fn domain_feature_gradient_is_mean_over_samples() {
    let batch = random_batch(4, 3, 3, 3, 50);
    let model = small_model(Some(0.5), 51);
    let masks = fixed_masks(&model, 5, 52);
    let joint = joint_loss_with_masks(&batch, &model, &masks)
        .unwrap()
        .loss_gradients(&model)
        .unwrap()
        .features_dom
        .unwrap();
    let mut mean = Matrix::zeros(joint.rows(), joint.cols());
    for m in &masks {
        let single = joint_loss_with_masks(&batch, &model, std::slice::from_ref(m))
            .unwrap()
            .loss_gradients(&model)
            .unwrap()
            .features_dom
            .unwrap();
        mean.add_assign(&single.scale(1.0 / masks.len() as f64)).unwrap();
    }
    for (a, b) in joint.data().iter().zip(mean.data()) {
        assert!((a - b).abs() <= 1e-15 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn zero_dropout_samples_share_the_single_discriminator_loss() {
    let batch = random_batch(4, 4, 3, 3, 60);
    let model = small_model(Some(0.0), 61);
    let one = joint_loss(&batch, &model, 1, &mut Rng::new(0)).unwrap();
    let three = joint_loss(&batch, &model, 3, &mut Rng::new(0)).unwrap();
    let (a, b) = (one.loss_dom.unwrap(), three.loss_dom.unwrap());
    assert!((a - b).abs() <= 4.0 * f64::EPSILON * a, "{a} vs {b}");
}

#[test]
fn gradient_distribution_properties() {
    let batch = random_batch(8, 8, 3, 3, 70);
    let det = small_model(Some(0.0), 71);
    assert_eq!(gradient_distribution(&batch, &det, 4, 1.0, &mut Rng::new(0)).unwrap().variance, 0.0);

    let model = small_model(Some(0.5), 71);
    let stats = gradient_distribution(&batch, &model, 16, 1.0, &mut Rng::new(1)).unwrap();
    assert!(stats.variance > 0.0);
    assert_eq!(stats.sample_norms.len(), 16);

    let half = gradient_distribution(&batch, &model, 16, 0.5, &mut Rng::new(2)).unwrap();
    let full = gradient_distribution(&batch, &model, 16, 1.0, &mut Rng::new(2)).unwrap();
    assert_eq!(full.mean_norm, 2.0 * half.mean_norm);

    assert!(gradient_distribution(&batch, &model, 1, 1.0, &mut Rng::new(0)).is_err());
}

#[test]
fn source_only_fits_separable_source() {
    let source = blobs(200, 0.0, 80);
    let target = blobs(200, 3.0, 81).with_domain(dropdisc::data::Domain::Target);
    let cfg = TrainConfig {
        variant: Variant::SourceOnly,
        epochs: 50,
        ..TrainConfig::default()
    };
    let (_, history) = train(&source, &target, &cfg).unwrap();
    assert_eq!(history.final_acc_src(), Some(1.0));
    assert!(history.records.iter().all(|r| r.loss_dom.is_none()));
}

#[test]
fn curriculum_history_climbs_to_k_max() {
    let source = blobs(128, 0.0, 90);
    let target = blobs(128, 1.0, 91);
    let cfg = TrainConfig {
        variant: Variant::Cd3a,
        epochs: 5,
        k_min: 1,
        k_max: Some(4),
        ..TrainConfig::default()
    };
    let (_, h) = train(&source, &target, &cfg).unwrap();
    let ks: Vec<usize> = h.records.iter().map(|r| r.k).collect();
    assert_eq!(ks.first(), Some(&1));
    assert_eq!(ks.last(), Some(&4));
    assert!(ks.windows(2).all(|w| w[0] <= w[1]));
    let lambdas: Vec<f64> = h.records.iter().map(|r| r.lambda).collect();
    assert_eq!(lambdas[0], 0.0);
    assert!(lambdas.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn invalid_config_fails_before_training() {
    let source = blobs(64, 0.0, 1);
    let target = blobs(64, 1.0, 2);
    let cfg = TrainConfig { batch_size: 100, ..TrainConfig::default() };
    assert!(train(&source, &target, &cfg).is_err());
    let unlabeled = source.without_labels();
    assert!(train(&unlabeled, &target, &TrainConfig::default()).is_err());
}
