use proptest::prelude::*;

use dlf_core::autodiff::Graph;
use dlf_core::data::dequantize;
use dlf_core::layers::Variant;
use dlf_core::model::{Model, ModelConfig};
use dlf_core::optim::{Adam, AdamConfig};
use dlf_core::params::ParamStore;
use dlf_core::rng::{seeded, uniform};
use dlf_core::verify::{check_roundtrip, randomize_params};
use dlf_core::Tensor;

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-4.0f64..4.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn split_then_concat_is_identity(a in 1usize..4, b in 1usize..4, c in 1usize..4, data in values(2 * 3 * 9)) {
        let total = a + b + c;
        let x = Tensor::new(&[2, 1, 1, total], data[..2 * total].to_vec()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let parts = g.channel_split(xv, &[a, b, c]).unwrap();
        let back = g.concat(&parts).unwrap();
        prop_assert_eq!(g.value(back), &x);
    }

    #[test]
    fn squeeze_unsqueeze_is_identity(h in 1usize..4, w in 1usize..4, c in 1usize..3, seed in any::<u64>()) {
        let mut rng = seeded(seed, 0);
        let x = Tensor::from_fn(&[2, 2 * h, 2 * w, c], |_| uniform(&mut rng));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let s = g.squeeze2x2(xv).unwrap();
        prop_assert_eq!(g.shape(s), &[2, h, w, 4 * c][..]);
        let back = g.unsqueeze2x2(s).unwrap();
        prop_assert_eq!(g.value(back), &x);
    }

    #[test]
    fn elementwise_product_gradient(data in values(12)) {
        let (a, b) = data.split_at(6);
        let mut g = Graph::new();
        let av = g.param(Tensor::new(&[2, 3], a.to_vec()).unwrap());
        let bv = g.constant(Tensor::new(&[2, 3], b.to_vec()).unwrap());
        let prod = g.mul(av, bv).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        prop_assert_eq!(grads.get(av).unwrap().data(), b);
    }

    #[test]
    fn flat_model_round_trip(
        k in prop::sample::select(vec![1usize, 2, 4]),
        inverse in any::<bool>(),
        conditional in any::<bool>(),
        seed in 0u64..1000,
        data in values(3 * 8),
    ) {
        let variant = if inverse { Variant::Inverse } else { Variant::Standard };
        let cfg = ModelConfig::flat(8, k)
            .with_steps(2)
            .with_hidden(6)
            .with_variant(variant)
            .with_classes(conditional.then_some(3))
            .with_seed(seed);
        let mut model = Model::new(cfg).unwrap();
        randomize_params(model.params_mut(), 0.3, &mut seeded(seed, 9));
        let x = Tensor::new(&[3, 8], data).unwrap();
        let h = conditional.then(|| dlf_core::model::one_hot(&[0, 1, 2], 3).unwrap());
        prop_assert!(check_roundtrip(&model, &x, h.as_ref()).unwrap() <= 1e-8);
    }

    #[test]
    fn dequantized_values_stay_in_unit_interval(pixels in proptest::collection::vec(0u8..=255, 1..64), seed in any::<u64>()) {
        let x = Tensor::new(&[pixels.len()], pixels.iter().map(|&p| p as f64).collect()).unwrap();
        let y = dequantize(&x, 8, &mut seeded(seed, 0)).unwrap();
        for (p, v) in pixels.iter().zip(y.data()) {
            prop_assert!((0.0..1.0).contains(v));
            prop_assert_eq!((v * 256.0).floor() as u8, *p);
        }
    }

    #[test]
    fn warmup_rate_is_monotone_and_capped(warmup in 0u64..1000, step in 0u64..5000) {
        let adam = Adam::new(AdamConfig { warmup, ..AdamConfig::default() }, &ParamStore::new());
        let lr = adam.learning_rate(step);
        prop_assert!(lr <= 0.005);
        prop_assert!(adam.learning_rate(step + 1) >= lr);
        if step >= warmup {
            prop_assert_eq!(lr, 0.005);
        }
    }
}
