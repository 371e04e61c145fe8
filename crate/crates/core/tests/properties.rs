mod common;

use std::collections::BTreeMap;

use common::{brute_local_memory, flat};
use fedreid::checkpoint::{decode_memory, decode_params, encode_memory, encode_params};
use fedreid::data::channel_augment;
use fedreid::evaluation::{cmc, m_inp, mean_ap};
use fedreid::federation::aggregate_params;
use fedreid::losses::{circle_loss, identity_loss};
use fedreid::memory::{aggregate_global, build_local_memory, LocalMemory};
use fedreid::model::ParameterVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn clients(dim: usize) -> impl Strategy<Value = Vec<(Vec<f64>, usize)>> {
    prop::collection::vec((prop::collection::vec(-5.0f64..5.0, dim), 1usize..1000), 1..7)
}

fn as_params(locals: &[(Vec<f64>, usize)]) -> Vec<(ParameterVector, usize)> {
    locals.iter().map(|(v, n)| (flat(v.clone()), *n)).collect()
}

fn local_memories() -> impl Strategy<Value = Vec<LocalMemory>> {
    let center = prop::collection::vec(-2.0f64..2.0, 3);
    let client = prop::collection::btree_map(0usize..10, (center, 1usize..20), 0..6);
    prop::collection::vec(client, 1..6).prop_map(|cs| {
        cs.into_iter()
            .enumerate()
            .map(|(id, entries)| LocalMemory {
                client_id: id,
                centers: entries.iter().map(|(k, (c, _))| (*k, c.clone())).collect(),
                counts: entries.iter().map(|(k, (_, n))| (*k, *n)).collect(),
            })
            .collect()
    })
}

fn ranked_lists() -> impl Strategy<Value = Vec<Vec<bool>>> {
    prop::collection::vec(prop::collection::vec(any::<bool>(), 1..30), 1..10)
        .prop_filter("needs a positive", |ls| ls.iter().flatten().any(|&b| b))
}

proptest! {
    #[test]
    fn aggregation_ignores_client_order(locals in clients(16), seed in any::<u64>()) {
        let mut shuffled = locals.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let a = aggregate_params(&as_params(&locals)).unwrap();
        let b = aggregate_params(&as_params(&shuffled)).unwrap();
        prop_assert_eq!(a.values, b.values);
    }

    #[test]
    fn aggregation_fixes_identical_inputs(v in prop::collection::vec(-1e6f64..1e6, 1..40), ns in prop::collection::vec(1usize..100, 1..8)) {
        let locals: Vec<(Vec<f64>, usize)> = ns.iter().map(|&n| (v.clone(), n)).collect();
        prop_assert_eq!(aggregate_params(&as_params(&locals)).unwrap().values, v);
    }

    #[test]
    fn aggregation_stays_in_the_coordinate_hull(locals in clients(8)) {
        let out = aggregate_params(&as_params(&locals)).unwrap();
        for (i, o) in out.values.iter().enumerate() {
            let lo = locals.iter().map(|(v, _)| v[i]).fold(f64::INFINITY, f64::min);
            let hi = locals.iter().map(|(v, _)| v[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*o >= lo - 1e-12 && *o <= hi + 1e-12);
        }
    }

    #[test]
    fn aggregation_depends_only_on_sample_fractions(locals in clients(4), scale in 2usize..5) {
        let scaled: Vec<_> = locals.iter().map(|(v, n)| (v.clone(), n * scale)).collect();
        let a = aggregate_params(&as_params(&locals)).unwrap();
        let b = aggregate_params(&as_params(&scaled)).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn global_memory_covers_exactly_the_held_identities(locals in local_memories()) {
        let global = aggregate_global(&locals, 3).unwrap();
        let mut held: BTreeMap<usize, usize> = BTreeMap::new();
        for m in &locals {
            for k in m.centers.keys() {
                *held.entry(*k).or_default() += 1;
            }
        }
        prop_assert_eq!(global.contributor_counts(), &held);
        prop_assert_eq!(global.epoch(), 3);
        for (k, c) in global.centers() {
            for (d, v) in c.iter().enumerate() {
                let vals: Vec<f64> = locals.iter().filter_map(|m| m.centers.get(k)).map(|c| c[d]).collect();
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
            }
        }
        let mut reversed = locals.clone();
        reversed.reverse();
        prop_assert_eq!(aggregate_global(&reversed, 3).unwrap(), global);
    }

    #[test]
    fn rectified_centers_match_the_sorted_oracle(
        embeddings in prop::collection::vec((prop::collection::vec(-1.0f64..1.0, 3), 0usize..4), 1..40),
        k in 1usize..8,
    ) {
        let local = build_local_memory(&embeddings, 0, k).unwrap();
        let expected = brute_local_memory(&embeddings, k);
        prop_assert_eq!(local.centers.len(), expected.len());
        for (y, c) in &local.centers {
            let n = embeddings.iter().filter(|e| e.1 == *y).count();
            prop_assert_eq!(local.counts[y], n);
            for (a, b) in c.iter().zip(&expected[y]) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn ranking_metrics_are_bounded_and_monotone(lists in ranked_lists()) {
        let curve = cmc(&lists).unwrap();
        prop_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*curve.last().unwrap(), 1.0);
        let (map, excluded) = mean_ap(&lists).unwrap();
        let (minp, _) = m_inp(&lists).unwrap();
        prop_assert!(map > 0.0 && map <= 1.0);
        prop_assert!(minp > 0.0 && minp <= 1.0);
        prop_assert_eq!(excluded, lists.iter().filter(|l| !l.contains(&true)).count());
        // a perfect ranking per query is the only way to reach 1
        let perfect = lists
            .iter()
            .filter(|l| l.contains(&true))
            .all(|l| l.iter().take_while(|&&b| b).count() == l.iter().filter(|&&b| b).count());
        prop_assert_eq!(perfect, map == 1.0);
        prop_assert_eq!(perfect, minp == 1.0);
    }

    #[test]
    fn params_round_trip_bit_exactly(values in prop::collection::vec(any::<f64>(), 1..64)) {
        let p = flat(values);
        let back = decode_params(&encode_params(&p)).unwrap();
        prop_assert_eq!(back.layout, p.layout);
        prop_assert!(back.values.iter().zip(&p.values).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn memories_round_trip(locals in local_memories()) {
        let global = aggregate_global(&locals, 7).unwrap();
        prop_assert_eq!(decode_memory(&encode_memory(&global)).unwrap(), global);
    }

    #[test]
    fn identity_loss_ignores_logit_shifts(
        rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 1..6),
        shift in -50.0f64..50.0,
    ) {
        let labels: Vec<usize> = (0..rows.len()).map(|i| i % 4).collect();
        let a = identity_loss(&rows, &labels).unwrap();
        let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
        let b = identity_loss(&shifted, &labels).unwrap();
        prop_assert!(a.value >= 0.0);
        prop_assert!((a.value - b.value).abs() <= 1e-9 * (1.0 + a.value));
    }

    #[test]
    fn circle_loss_is_non_negative(raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 4..10)) {
        let z: Vec<Vec<f64>> = raw
            .iter()
            .map(|v| {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-3 {
                    v.iter().map(|x| x / n).collect()
                } else {
                    vec![0.5; 4]
                }
            })
            .collect();
        let labels: Vec<usize> = (0..z.len()).map(|i| i % 2).collect();
        let l = circle_loss(&z, &labels, 0.25, 64.0).unwrap();
        prop_assert!(l.value >= 0.0 && l.value.is_finite());
    }

    #[test]
    fn channel_augmentation_copies_one_source_channel(
        pixels in prop::collection::vec(0.0f64..1.0, 3 * 6),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = channel_augment(&pixels, 3, 1.0, &mut rng).unwrap();
        let planes: Vec<&[f64]> = out.chunks(6).collect();
        prop_assert!(planes.iter().all(|p| *p == planes[0]));
        prop_assert!(pixels.chunks(6).any(|p| p == planes[0]));
    }
}
