//! Invariants checked over random inputs.

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use udfa::lgfa::{mhca_with_attention, MhcaWeights};
use udfa::loss::dice_ce_loss;
use udfa::nn::{normal_tensor, ParamBuilder};
use udfa::optim::poly_lr;
use udfa::tokens::{grid_tokens_to_map, map_to_tokens, TokenStream};

fn vec_of(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn token_map_round_trip(b in 1usize..3, h in 1usize..6, w in 1usize..6, d in 1usize..5, seed in 0u64..1000) {
        let t = normal_tensor(seed, "tokens", &[b, h * w, d], &Device::Cpu).unwrap();
        let map = grid_tokens_to_map(&t, h, w).unwrap();
        prop_assert_eq!(map.dims(), &[b, d, h, w]);
        prop_assert_eq!(vec_of(&map_to_tokens(&map).unwrap()), vec_of(&t));
    }

    #[test]
    fn loss_terms_are_bounded(seed in 0u64..1000, scale in 0.1f32..8.0) {
        let logits = (normal_tensor(seed, "logits", &[2, 3, 5, 5], &Device::Cpu).unwrap() * scale as f64).unwrap();
        let labels: Vec<u32> = (0..50).map(|i| ((i as u64 * 7 + seed) % 3) as u32).collect();
        let labels = Tensor::from_vec(labels, (2, 5, 5), &Device::Cpu).unwrap();
        let l = dice_ce_loss(&logits, &labels, 1.0, 1.0).unwrap().value;
        prop_assert!(l.ce_term >= 0.0);
        prop_assert!((0.0..=1.0).contains(&l.dice_term));
        prop_assert!((l.total - l.dice_term - l.ce_term).abs() < 1e-5);
    }

    #[test]
    fn poly_schedule_is_non_increasing(base in 1e-6f64..1e-2, max in 1usize..500, power in 0.1f64..3.0) {
        let mut prev = f64::INFINITY;
        for it in 0..=max {
            let lr = poly_lr(base, it, max, power);
            prop_assert!(lr <= prev && lr >= 0.0 && lr <= base);
            prev = lr;
        }
    }

    #[test]
    fn attention_rows_are_distributions(k in 1usize..12, m in 1usize..20, seed in 0u64..1000) {
        let pb = ParamBuilder::new(seed, &Device::Cpu);
        let w = MhcaWeights::new(&pb, 8, 2).unwrap();
        let q = TokenStream::plain(normal_tensor(seed, "q", &[1, k, 8], &Device::Cpu).unwrap()).unwrap();
        let kv = TokenStream::plain(normal_tensor(seed, "kv", &[1, m, 8], &Device::Cpu).unwrap()).unwrap();
        let (out, attn) = mhca_with_attention(&q, &kv, &w, true).unwrap();
        prop_assert_eq!(out.dims(), &[1, k, 8]);
        let attn = attn.unwrap();
        prop_assert_eq!(attn.dims(), &[1, 2, k, m]);
        let sums = attn.sum(3).unwrap().to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for s in sums {
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
    }
}
