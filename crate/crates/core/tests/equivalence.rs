//! Crossbar inference with the true keys equals the reference engine for
//! random networks, geometries and protection plans.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xbarsec::engine::{infer_mapped, infer_reference};
use xbarsec::secure_map::{demap_model, generate_keys, map_model, model_shapes};
use xbarsec::tensor::value_range;
use xbarsec::{
    Activation, CrossbarConfig, LayerSpec, NetworkModel, Protection, QuantTensor, Scheme,
};

fn random_weights(shape: Vec<usize>, bits: u32, rng: &mut ChaCha8Rng) -> QuantTensor {
    let (lo, hi) = value_range(bits, true);
    let n = shape.iter().product();
    QuantTensor::new(
        shape,
        (0..n).map(|_| rng.gen_range(lo..=hi) as i32).collect(),
        bits,
        true,
    )
    .unwrap()
}

/// conv (optional) -> fc -> fc, sized to span several tiles of a small crossbar.
fn random_model(rng: &mut ChaCha8Rng, bits: u32) -> NetworkModel {
    let mut layers = Vec::new();
    let input_shape;
    let mut width;
    if rng.gen_bool(0.5) {
        let (c, h, w) = (
            rng.gen_range(1..=3),
            rng.gen_range(4..=7),
            rng.gen_range(4..=7),
        );
        let oc = rng.gen_range(1..=6);
        let k = rng.gen_range(1..=3);
        let pad = rng.gen_range(0..=1);
        let stride = rng.gen_range(1..=2);
        let conv = LayerSpec::conv(
            random_weights(vec![oc, c, k, k], bits, rng),
            [c, h, w],
            stride,
            pad,
            Activation::Relu,
            6,
        )
        .unwrap();
        width = conv.kind.output_len();
        input_shape = vec![c, h, w];
        layers.push(conv);
    } else {
        width = rng.gen_range(1..=40);
        input_shape = vec![width];
    }
    let hidden = rng.gen_range(1..=30);
    layers.push(
        LayerSpec::fc(
            random_weights(vec![width, hidden], bits, rng),
            Activation::Relu,
            7,
        )
        .unwrap(),
    );
    width = hidden;
    let classes = rng.gen_range(1..=12);
    layers.push(
        LayerSpec::fc(
            random_weights(vec![width, classes], bits, rng),
            Activation::None,
            0,
        )
        .unwrap(),
    );
    NetworkModel::new(input_shape, 8, classes, layers).unwrap()
}

fn config(scheme: Scheme, p_m: u32, groups: usize, sum_column: bool) -> CrossbarConfig {
    CrossbarConfig {
        rows: 16,
        cols: 12,
        device_bits: p_m,
        groups,
        wl_active: 4,
        block_rows: 8,
        adcs_per_group: 4,
        scheme,
        sum_column,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn correct_keys_reproduce_reference(
        seed in any::<u64>(),
        scheme in prop_oneof![Just(Scheme::Biased), Just(Scheme::Differential)],
        slicing in prop_oneof![Just((1u32, 8usize)), Just((2, 4)), Just((4, 2)), Just((3, 3))],
        sum_column in any::<bool>(),
        pad_small in any::<bool>(),
        protect_mask in 0u8..8,
    ) {
        let (p_m, g) = slicing;
        let bits = p_m * g as u32;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_model(&mut rng, bits);
        let c = config(scheme, p_m, g, sum_column || scheme == Scheme::Biased);
        let n = model.layers.len();
        let plan = Protection { layers: (0..n).map(|i| protect_mask >> i & 1 == 1).collect(), pad_small };
        let keys = generate_keys(&c, &model_shapes(&model), &plan, seed).unwrap();
        let mapped = map_model(&model, &c, &keys).unwrap();
        prop_assert_eq!(&demap_model(&mapped, &keys).unwrap(), &model);
        for _ in 0..3 {
            let len = model.input_len();
            let x = QuantTensor::new(
                model.input_shape.clone(),
                (0..len).map(|_| if rng.gen_bool(0.3) { 0 } else { rng.gen_range(0..=255) }).collect(),
                8,
                false,
            ).unwrap();
            prop_assert_eq!(infer_mapped(&mapped, &keys, &x).unwrap(), infer_reference(&model, &x).unwrap());
        }
    }

    /// Both mapping schemes compute the same function.
    #[test]
    fn schemes_agree(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_model(&mut rng, 8);
        let x = QuantTensor::new(
            model.input_shape.clone(),
            (0..model.input_len()).map(|_| rng.gen_range(0..=255)).collect(),
            8,
            false,
        ).unwrap();
        let outs: Vec<Vec<i64>> = [Scheme::Biased, Scheme::Differential]
            .into_iter()
            .map(|s| {
                let c = config(s, 2, 4, s == Scheme::Biased);
                let keys = generate_keys(&c, &model_shapes(&model), &Protection::all(model.layers.len()), seed).unwrap();
                infer_mapped(&map_model(&model, &c, &keys).unwrap(), &keys, &x).unwrap()
            })
            .collect();
        prop_assert_eq!(&outs[0], &outs[1]);
    }
}
