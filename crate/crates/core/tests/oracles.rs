use dlf_core::autodiff::Graph;
use dlf_core::layers::{ActNorm, DynLin, DynLinConfig, Inv1x1, Variant};
use dlf_core::model::{Model, ModelConfig};
use dlf_core::params::ParamStore;
use dlf_core::rng::{normal, seeded};
use dlf_core::verify::{
    check_gradients, check_model_logdet, log_abs_det, numeric_jacobian, off_pattern_max, partition_triangular,
    randomize_params, GradientCheckConfig, JACOBIAN_STEP,
};
use dlf_core::{Result, Tensor};

enum Flat {
    DynLin(DynLin),
    Inv(Inv1x1),
    Act(ActNorm),
}

fn forward(store: &ParamStore, layer: &Flat, x: &[f64]) -> Result<(Vec<f64>, f64)> {
    let mut g = Graph::no_grad();
    let b = store.bind(&mut g);
    let xv = g.constant(Tensor::new(&[1, 1, 1, x.len()], x.to_vec())?);
    let (y, ld) = match layer {
        Flat::DynLin(l) => l.forward(&mut g, &b, xv, None)?,
        Flat::Inv(l) => l.forward(&mut g, &b, xv)?,
        Flat::Act(l) => l.forward(&mut g, &b, xv)?,
    };
    Ok((g.value(y).data().to_vec(), g.value(ld).item()))
}

fn point(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed, 1);
    (0..d).map(|_| normal(&mut rng)).collect()
}

#[test]
fn dynlin_jacobian_is_partition_triangular() {
    for (d, k) in [(6, 2), (6, 3), (12, 4), (8, 4)] {
        for seed in 0..20 {
            let mut store = ParamStore::new();
            let mut cfg = DynLinConfig::new(d, k);
            cfg.kernel = 1;
            cfg.hidden = 8;
            let layer = Flat::DynLin(DynLin::new(&mut store, "dl", cfg, &mut seeded(seed, 0)).unwrap());
            randomize_params(&mut store, 0.4, &mut seeded(seed, 2));
            let x = point(d, seed);
            let j = numeric_jacobian(|p| Ok(forward(&store, &layer, p)?.0), &x, JACOBIAN_STEP).unwrap();
            let analytic = forward(&store, &layer, &x).unwrap().1;
            assert!((log_abs_det(&j).unwrap() - analytic).abs() <= 1e-4, "d={d} k={k} seed={seed}");
            assert!(off_pattern_max(&j, partition_triangular(d / k)) <= 1e-6, "d={d} k={k} seed={seed}");
        }
    }
}

#[test]
fn inverse_variant_logdet_matches_oracle() {
    for seed in 0..20 {
        let mut store = ParamStore::new();
        let mut cfg = DynLinConfig::new(8, 4);
        cfg.kernel = 1;
        cfg.variant = Variant::Inverse;
        let layer = Flat::DynLin(DynLin::new(&mut store, "dl", cfg, &mut seeded(seed, 0)).unwrap());
        randomize_params(&mut store, 0.4, &mut seeded(seed, 2));
        let x = point(8, seed);
        let j = numeric_jacobian(|p| Ok(forward(&store, &layer, p)?.0), &x, JACOBIAN_STEP).unwrap();
        let analytic = forward(&store, &layer, &x).unwrap().1;
        assert!((log_abs_det(&j).unwrap() - analytic).abs() <= 1e-4, "seed={seed}");
    }
}

#[test]
fn actnorm_and_inv1x1_match_oracle() {
    for seed in 0..20 {
        let mut store = ParamStore::new();
        let act = Flat::Act(ActNorm::new(&mut store, "an", 5, false));
        let mut rng = seeded(seed, 3);
        store
            .set("an.scale", Tensor::from_fn(&[5], |_| 0.5 + normal(&mut rng).abs()))
            .unwrap();
        let x = point(5, seed);
        let j = numeric_jacobian(|p| Ok(forward(&store, &act, p)?.0), &x, JACOBIAN_STEP).unwrap();
        assert!((log_abs_det(&j).unwrap() - forward(&store, &act, &x).unwrap().1).abs() <= 1e-4);

        let mut store = ParamStore::new();
        let inv = Flat::Inv(Inv1x1::new(&mut store, "inv", 6, &mut seeded(seed, 0)));
        let x = point(6, seed);
        let j = numeric_jacobian(|p| Ok(forward(&store, &inv, p)?.0), &x, JACOBIAN_STEP).unwrap();
        assert!(log_abs_det(&j).unwrap().abs() <= 1e-6);
    }
}

#[test]
fn flat_model_logdet_matches_oracle() {
    let model_cfg = ModelConfig::flat(8, 2).with_steps(8).with_hidden(8);
    for seed in 0..20 {
        let mut model = Model::new(model_cfg.clone().with_seed(seed)).unwrap();
        randomize_params(model.params_mut(), 0.2, &mut seeded(seed, 4));
        let x = Tensor::new(&[1, 8], point(8, seed)).unwrap();
        let r = check_model_logdet(&model, &x, None).unwrap();
        assert!(r.discrepancy <= 1e-4, "seed {seed}: {r:?}");
    }
}

#[test]
fn identity_init_alpha_beta_gradients() {
    let model = Model::new(ModelConfig::flat(4, 2).with_steps(2).with_hidden(4)).unwrap();
    let mut rng = seeded(0, 5);
    let x = Tensor::from_fn(&[16, 4], |_| 1.5 * normal(&mut rng));
    let grads = model.loss_and_grads(&x, None).unwrap().grads;
    let report = check_gradients(&model, &x, None, &grads, GradientCheckConfig::default()).unwrap();
    assert!(report.passed(), "{report:?}");
    let beta = model.params().find("level0.step0.dynlin.net2.beta").unwrap();
    assert!(grads[beta.index()].item().abs() > 1e-6);
}
