//! Invariants over randomized inputs.

use std::collections::BTreeSet;

use proptest::prelude::*;

use segnet::data::rv1::{decode_f32le, encode_f32le};
use segnet::data::{
    minmax_normalize, stratified_split, window_ct, Mask, PatientKey, SplitFractions, SplitName, Volume, WindowSpec,
};
use segnet::layers::{batch_norm, concat_channels, split_channels, Mode, UNet, UNetSpec};
use segnet::loss::LossKind;
use segnet::metrics::{binarize, confusion, metrics_from_counts};
use segnet::optim::Adam;
use segnet::tensor::{Graph, Tensor};
use segnet::trainer::{Checkpoint, ExperimentConfig};
use segnet::data::Modality;

fn window() -> impl Strategy<Value = WindowSpec> {
    (-200.0f64..200.0, 1.0f64..600.0).prop_map(|(c, w)| WindowSpec::new(c, w).unwrap())
}

fn mask_pair() -> impl Strategy<Value = (Mask, Mask)> {
    (1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(d, h, w)| {
        let n = d * h * w;
        (
            proptest::collection::vec(0u8..2, n),
            proptest::collection::vec(0u8..2, n),
        )
            .prop_map(move |(a, b)| (Mask::new([d, h, w], a).unwrap(), Mask::new([d, h, w], b).unwrap()))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn window_is_monotone_and_bounded(w in window(), a in -2000.0f32..2000.0, b in -2000.0f32..2000.0) {
        let out = window_ct(&[a, b], w).unwrap();
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        if a <= b {
            prop_assert!(out[0] <= out[1]);
        } else {
            prop_assert!(out[0] >= out[1]);
        }
        if (a as f64) <= w.low() { prop_assert_eq!(out[0], 0.0); }
        if (a as f64) >= w.high() { prop_assert_eq!(out[0], 1.0); }
    }

    #[test]
    fn minmax_lands_in_unit_interval(v in proptest::collection::vec(-3000.0f32..3000.0, 1..64)) {
        let out = minmax_normalize(&v);
        prop_assert_eq!(out.len(), v.len());
        prop_assert!(out.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn split_is_a_stratified_partition(
        stages in proptest::collection::vec(1u8..5, 5..80),
        f in (0.1f64..0.8, 0.05f64..0.3),
        seed in any::<u64>(),
    ) {
        let (train, val) = f;
        prop_assume!(train + val < 0.95);
        let fractions = SplitFractions::new(train, val, 1.0 - train - val).unwrap();
        let keys: Vec<PatientKey> = stages
            .iter()
            .enumerate()
            .map(|(i, &s)| PatientKey { patient_id: format!("P{i:03}"), t_stage: s })
            .collect();
        let m = stratified_split(&keys, fractions, seed).unwrap();
        let mut all = BTreeSet::new();
        for s in SplitName::ALL {
            for id in m.ids(s) {
                prop_assert!(all.insert(id.clone()), "{} appears twice", id);
            }
        }
        prop_assert_eq!(all.len(), keys.len());
        // Totals are within one of the exact share; each stratum within one too.
        let f = fractions.as_array();
        for (j, s) in SplitName::ALL.into_iter().enumerate() {
            let exact = keys.len() as f64 * f[j];
            prop_assert!((m.ids(s).len() as f64 - exact).abs() < 1.0 + 1e-9);
            for stage in 1u8..5 {
                let n = stages.iter().filter(|&&t| t == stage).count();
                let got = m.ids(s).iter().filter(|id| keys.iter().any(|k| &k.patient_id == *id && k.t_stage == stage)).count();
                let share = n as f64 * f[j];
                prop_assert!(got as f64 >= share.floor() - 1e-9 && got as f64 <= share.ceil() + 1e-9,
                    "stage {} split {:?}: {} vs share {}", stage, s, got, share);
            }
        }
        prop_assert_eq!(stratified_split(&keys, fractions, seed).unwrap(), m);
    }

    #[test]
    fn metrics_are_bounded_and_dice_is_symmetric((a, b) in mask_pair()) {
        let ab = metrics_from_counts(&confusion(&a, &b).unwrap());
        let ba = metrics_from_counts(&confusion(&b, &a).unwrap());
        prop_assert_eq!(ab.dice, ba.dice);
        prop_assert_eq!(ab.sensitivity, ba.ppv);
        for v in [ab.dice, ab.sensitivity, ab.specificity, ab.ppv].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let self_dice = metrics_from_counts(&confusion(&a, &a).unwrap()).dice;
        prop_assert_eq!(self_dice, Some(1.0));
    }

    #[test]
    fn binarize_is_monotone_in_the_threshold(
        p in proptest::collection::vec(0.0f32..=1.0, 1..64),
        t in (0.01f64..0.99, 0.01f64..0.99),
    ) {
        let (lo, hi) = if t.0 <= t.1 { t } else { (t.1, t.0) };
        let v = Volume::new([1, 1, p.len()], p).unwrap();
        let a = binarize(&v, lo).unwrap();
        let b = binarize(&v, hi).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x >= y));
    }

    #[test]
    fn train_batch_norm_standardizes_each_channel(
        x in proptest::collection::vec(-5.0f64..5.0, 2 * 3 * 4),
    ) {
        let mut g = Graph::<f64>::new();
        let xv = g.constant(Tensor::new(vec![2, 3, 2, 2], x).unwrap()).unwrap();
        let gamma = g.constant(Tensor::ones(vec![3]).unwrap()).unwrap();
        let beta = g.constant(Tensor::zeros(vec![3]).unwrap()).unwrap();
        let (y, _, var) = batch_norm(&mut g, xv, gamma, beta, 1e-5, None).unwrap();
        let y = g.value(y).unwrap();
        for k in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|b| y.data()[(b * 3 + k) * 4..(b * 3 + k + 1) * 4].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 8.0;
            let v = vals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((v - var[k] / (var[k] + 1e-5)).abs() < 1e-9);
        }
    }

    #[test]
    fn split_channels_inverts_concat(
        first in 1usize..4, second in 1usize..4, n in 1usize..3, seed in any::<u64>(),
    ) {
        let mut g = Graph::<f32>::new();
        let len = |c: usize| n * c * 9;
        let mk = |c: usize, off: u64| {
            let data = (0..len(c)).map(|i| ((seed.wrapping_add(off) as usize + i * 7919) % 1000) as f32).collect();
            Tensor::new(vec![n, c, 3, 3], data).unwrap()
        };
        let (a, b) = (mk(first, 0), mk(second, 1));
        let av = g.constant(a.clone()).unwrap();
        let bv = g.constant(b.clone()).unwrap();
        let c = concat_channels(&mut g, av, bv).unwrap();
        let (a2, b2) = split_channels(g.value(c).unwrap(), first).unwrap();
        prop_assert_eq!(a2, a);
        prop_assert_eq!(b2, b);
    }

    #[test]
    fn f32le_round_trips_bitwise(v in proptest::collection::vec(any::<f32>(), 0..64)) {
        let back = decode_f32le(&encode_f32le(&v)).unwrap();
        prop_assert_eq!(
            back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), base in 1usize..4) {
        let mut config = ExperimentConfig::desk(Modality::Petct, LossKind::Dice, None, seed, 1);
        config.unet = UNetSpec::new(2, 1, base).unwrap();
        let mut model = UNet::<f32>::new(config.unet, seed).unwrap();
        // Perturb the running statistics with one train-mode pass.
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![2, 2, 4, 4], 0.25f32).unwrap()).unwrap();
        model.forward(&mut g, x, Mode::Train).unwrap();
        let ck = Checkpoint {
            config_hash: config.hash(),
            config,
            epoch: 3,
            best_validation_dice: 0.5,
            model,
            adam: Adam::new(Default::default()).unwrap(),
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}
