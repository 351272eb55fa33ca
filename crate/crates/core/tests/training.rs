use ksn_core::bayes::{elbo_loss, train_step, ScaleMixturePrior, StepOptions};
use ksn_core::data::{synth_dataset, SynthSpec};
use ksn_core::layers::{LayerMode, Linear, Noise, ParamMode};
use ksn_core::models::{FactoryMode, ForwardCtx, Model, ModelConfig};
use ksn_core::tensor::gradcheck::check_gradients;
use ksn_core::tensor::optim::{Optimizer, OptimizerConfig};
use ksn_core::{RngStream, Tensor};

fn separable() -> ksn_core::data::Dataset<f32> {
    synth_dataset(&SynthSpec::blobs(32, 2, (1, 8, 8), 1)).unwrap()
}

fn run(factory: FactoryMode, opts: &StepOptions, steps: u64) -> (Vec<f64>, Model<f32>) {
    let ds = separable();
    let mut m = Model::build(ModelConfig::small_cnn(2, 1, 8, factory), 0).unwrap();
    let mut opt = Optimizer::new(OptimizerConfig::adam_default());
    let totals = (0..steps)
        .map(|s| {
            train_step(&mut m, &ds.images, &ds.labels, &mut opt, opts, 7, s)
                .unwrap()
                .total
        })
        .collect();
    (totals, m)
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    let opts = StepOptions::new(1.0 / 4.0);
    let (a, ma) = run(FactoryMode::Ksn { delta: 0.5 }, &opts, 5);
    let (b, mb) = run(FactoryMode::Ksn { delta: 0.5 }, &opts, 5);
    assert_eq!(a, b);
    for ((_, x), (_, y)) in ma.named_params().into_iter().zip(mb.named_params()) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn fixed_point_without_kl_is_supervised_training() {
    let ds = separable();
    let cfg = ModelConfig::small_cnn(2, 1, 8, FactoryMode::Ksn { delta: 0.5 });
    let mut a = Model::<f32>::build(cfg, 3).unwrap();
    let mut b = a.clone();
    let mut oa = Optimizer::new(OptimizerConfig::adam_default());
    let mut ob = Optimizer::new(OptimizerConfig::adam_default());
    let opts = StepOptions {
        layer_mode: Some(LayerMode::FixedPoint),
        ..StepOptions::new(0.0)
    };
    for step in 0..3 {
        let br = train_step(&mut a, &ds.images, &ds.labels, &mut oa, &opts, 1, step).unwrap();

        b.zero_grads();
        let mut ctx = ForwardCtx {
            mode: LayerMode::FixedPoint,
            train: true,
            ..ForwardCtx::deterministic()
        };
        let (logits, records) = b.forward(&ds.images, &mut ctx).unwrap();
        assert!(records.is_empty());
        let ce = logits.cross_entropy(&ds.labels).unwrap();
        ce.backward().unwrap();
        b.apply_optimizer(&mut ob).unwrap();

        assert_eq!(br.total, ce.item() as f64);
        assert_eq!((br.log_q, br.log_prior), (0.0, 0.0));
    }
    for ((n, x), (_, y)) in a.named_params().into_iter().zip(b.named_params()) {
        assert_eq!(x.data(), y.data(), "{n}");
    }
}

#[test]
fn data_term_halves_on_separable_data() {
    for f in [
        FactoryMode::Ksn { delta: 0.5 },
        FactoryMode::Bnn,
        FactoryMode::Baseline,
    ] {
        let (t, _) = run(f, &StepOptions::new(0.0), 200);
        assert!(
            t[199] <= 0.5 * t[0],
            "{}: {} -> {}",
            f.label(),
            t[0],
            t[199]
        );
    }
}

#[test]
fn full_batch_elbo_decreases() {
    // One minibatch per epoch: kl_weight = 1.
    let (t, _) = run(FactoryMode::Ksn { delta: 0.5 }, &StepOptions::new(1.0), 200);
    let head: f64 = t[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = t[190..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn mc_samples_average_the_objective() {
    let ds = separable();
    let cfg = ModelConfig::small_cnn(2, 1, 8, FactoryMode::Bnn);
    let m = Model::<f32>::build(cfg, 2).unwrap();
    let mut m1 = m.clone();
    let opts = StepOptions {
        mc_samples: 3,
        ..StepOptions::new(0.5)
    };
    let b = train_step(
        &mut m1,
        &ds.images,
        &ds.labels,
        &mut Optimizer::new(OptimizerConfig::adam_default()),
        &opts,
        4,
        9,
    )
    .unwrap();
    // Same three draws by hand from one stream.
    let mut w = RngStream::new(4, ksn_core::Site::WeightNoise, 9);
    let mut d = RngStream::new(4, ksn_core::Site::Dropout, 9);
    let mut total = 0.0;
    for _ in 0..3 {
        let (logits, recs) = m
            .forward(
                &ds.images,
                &mut ForwardCtx::training(&m.config, &mut w, &mut d),
            )
            .unwrap();
        total += elbo_loss(
            &logits,
            &ds.labels,
            &recs,
            &ScaleMixturePrior::default(),
            0.5,
        )
        .unwrap()
        .1
        .total;
    }
    assert!((b.total - total / 3.0).abs() <= 1e-6 * total.abs());
    assert!(train_step(
        &mut m1,
        &ds.images,
        &ds.labels,
        &mut Optimizer::new(OptimizerConfig::adam_default()),
        &StepOptions {
            mc_samples: 0,
            ..opts
        },
        4,
        9
    )
    .is_err());
}

#[test]
fn toy_ksn_elbo_gradients_match_finite_differences() {
    let mut rng = RngStream::from_seed(21);
    let l1 = Linear::<f64>::new(4, 6, ParamMode::Ksn, 0.5, true, &mut rng).unwrap();
    let l2 = Linear::<f64>::new(6, 3, ParamMode::Ksn, 0.5, true, &mut rng).unwrap();
    let x = Tensor::<f64>::uniform(&[5, 4], 1.0, &mut rng);
    let labels = [0, 2, 1, 1, 0];

    let mut params: Vec<Tensor<f64>> = l1
        .named_params()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    let n1 = params.len();
    params.extend(l2.named_params().into_iter().map(|(_, t)| t.clone()));
    // Lift sigma off the floor so the posterior term has curvature at the scale of h.
    for p in params.iter_mut() {
        if p.data().iter().all(|&v| v == -5.0) {
            p.data_mut().iter_mut().for_each(|v| *v = -1.0);
        }
    }

    let report = check_gradients(&params, 1e-6, |p| {
        let mut a = l1.clone();
        for ((_, t), v) in a.named_params_mut().into_iter().zip(&p[..n1]) {
            *t = v.clone();
        }
        let mut b = l2.clone();
        for ((_, t), v) in b.named_params_mut().into_iter().zip(&p[n1..]) {
            *t = v.clone();
        }
        let mut eps = RngStream::from_seed(22);
        let h = a.forward(&x, LayerMode::Variational, &mut Noise::Gaussian(&mut eps))?;
        let o = b.forward(
            &h.y.relu(),
            LayerMode::Variational,
            &mut Noise::Gaussian(&mut eps),
        )?;
        let records: Vec<_> = h.records.into_iter().chain(o.records).collect();
        Ok(elbo_loss(&o.y, &labels, &records, &ScaleMixturePrior::default(), 0.1)?.0)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-2, "{report:?}");
    assert!(report.checked > 50);
}
