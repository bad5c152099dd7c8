use std::time::Instant;

use proptest::prelude::*;
use transattunet::data::{synth_generate, SynthConfig};
use transattunet::gradcheck::randn;
use transattunet::loss::{combined_loss, LossConfig};
use transattunet::metrics::MetricsReport;
use transattunet::nn::{Decay, Params};
use transattunet::train::{lr_schedule, predict, prepare_data, Checkpoint, OptimConfig, RunConfig, Sgd, Trainer};
use transattunet::{Rng, Tensor};

#[test]
fn schedule_matches_closed_form_for_a_thousand_epochs() {
    let cfg = OptimConfig::default();
    for epoch in 0..1000 {
        let want = 1e-4 * 0.1f64.powi((epoch / 40) as i32);
        let got = lr_schedule(epoch, &cfg);
        assert!((got - want).abs() <= 1e-12 * want, "epoch {epoch}: {got} vs {want}");
    }
}

struct Scalars(Vec<Tensor<f64>>);

impl Params<f64> for Scalars {
    fn visit(&self, _: &str, f: &mut dyn FnMut(&str, &Tensor<f64>, Decay)) {
        for (i, t) in self.0.iter().enumerate() {
            f(&format!("p{i}"), t, if i == 0 { Decay::Yes } else { Decay::No });
        }
    }
    fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Tensor<f64>, Decay)) {
        for (i, t) in self.0.iter_mut().enumerate() {
            f(&format!("p{i}"), t, if i == 0 { Decay::Yes } else { Decay::No });
        }
    }
}

/// Five steps on `L = Σ aᵢ·θᵢ²` against the recursion written out by hand;
/// the second parameter is exempt from decay.
#[test]
fn optimizer_matches_unrolled_recursion() {
    let (lr, m, wd) = (0.05, 0.9, 0.01);
    let a = [1.5, -0.7];
    let mut params = Scalars(vec![
        Tensor::scalar(0.8).requires_grad(),
        Tensor::scalar(-1.2).requires_grad(),
    ]);
    let mut sgd = Sgd::new(m, wd);
    let mut theta = [0.8, -1.2];
    let mut vel = [0.0, 0.0];
    for _ in 0..5 {
        let loss = params.0[0]
            .square()
            .unwrap()
            .scale(a[0])
            .unwrap()
            .add(&params.0[1].square().unwrap().scale(a[1]).unwrap())
            .unwrap();
        loss.backward().unwrap();
        sgd.step(&mut params, lr).unwrap();
        for i in 0..2 {
            let decay = if i == 0 { wd } else { 0.0 };
            let g = 2.0 * a[i] * theta[i] + decay * theta[i];
            vel[i] = m * vel[i] + g;
            theta[i] -= lr * vel[i];
        }
        for (p, want) in params.0.iter().zip(theta) {
            assert!((p.item().unwrap() - want).abs() < 1e-7);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn combined_loss_is_non_negative(p in prop::collection::vec(0.0f64..=1.0, 8), y in prop::collection::vec(any::<bool>(), 8)) {
        let p = Tensor::from_vec(p, &[2, 1, 2, 2]).unwrap();
        let y = Tensor::from_vec(y.into_iter().map(|b| b as u8 as f64).collect(), &[2, 1, 2, 2]).unwrap();
        let l = combined_loss(&p, &y, &LossConfig::default()).unwrap().item().unwrap();
        prop_assert!(l >= 0.0 && l.is_finite());
    }

    /// `∇(a·f + b·g) = a·∇f + b·∇g` through a nonlinear composite.
    #[test]
    fn gradients_are_linear_in_the_objective(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = Rng::new(seed);
        let x = randn(&[3, 4], &mut rng).requires_grad();
        let w = randn(&[4, 2], &mut rng);
        let f = |x: &Tensor<f64>| x.matmul(&w).unwrap().sigmoid().unwrap().sum_all();
        let g = |x: &Tensor<f64>| x.softmax(1).unwrap().square().unwrap().sum_all();
        let grad_of = |obj: Tensor<f64>| {
            x.zero_grad();
            obj.backward().unwrap();
            x.grad().unwrap()
        };
        let gf = grad_of(f(&x));
        let gg = grad_of(g(&x));
        let both = grad_of(f(&x).scale(a).unwrap().add(&g(&x).scale(b).unwrap()).unwrap());
        for i in 0..both.len() {
            prop_assert!((both[i] - (a * gf[i] + b * gg[i])).abs() < 1e-12);
        }
    }
}

#[test]
fn ground_truth_as_prediction_scores_one() {
    let samples = synth_generate(&SynthConfig::default(), 6).unwrap();
    let items: Vec<(String, Vec<f32>, Vec<f32>)> = samples
        .iter()
        .map(|s| (s.id.clone(), s.mask.to_vec(), s.mask.to_vec()))
        .collect();
    let report = MetricsReport::evaluate(&items, 0.5).unwrap();
    assert_eq!(report.aggregate.dice, 1.0);
    assert_eq!(report.to_csv().lines().count(), 6 + 2);
}

#[test]
fn synthesis_throughput() {
    let cfg = SynthConfig::default();
    let start = Instant::now();
    synth_generate(&cfg, 200).unwrap();
    let rate = 200.0 / start.elapsed().as_secs_f64();
    assert!(rate >= 100.0, "{rate:.0} samples/s");
}

#[test]
fn checkpoint_round_trip_reproduces_predictions_bitwise() {
    let mut cfg = RunConfig::default();
    cfg.model.base_channels = 4;
    cfg.model.depth = 2;
    cfg.model.heads = 2;
    cfg.model.image_size = [16, 16];
    cfg.synth.size = [16, 16];
    cfg.n_samples = 8;
    cfg.optim.epochs = 2;
    let data = prepare_data(&cfg).unwrap();
    let mut t = Trainer::new(cfg).unwrap();
    t.fit(&data, None, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    t.checkpoint().save(&path).unwrap();
    let restored = Trainer::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    let before = predict(&t.model, &data.test).unwrap();
    let after = predict(&restored.model, &data.test).unwrap();
    for (a, b) in before.iter().zip(&after) {
        assert_eq!(a.data(), b.data());
    }
}
