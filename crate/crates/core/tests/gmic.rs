use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prognosis_core::gmic::{
    aggregate_topr, build_forward, forward_outputs, fusion_forward, global_forward, gmic_loss, local_attention,
    retrieve_rois, select_windows, GmicConfig, SaliencyMaps,
};
use prognosis_core::imaging::ProcessedImage;
use prognosis_core::tensor::gradcheck::{check_gradients, check_gradients_away_from_kinks};
use prognosis_core::tensor::{Graph, ParamStore, Tensor};
use prognosis_core::train::{fit, Example, TrainOptions};

fn random_image(rng: &mut ChaCha8Rng, side: usize) -> ProcessedImage {
    ProcessedImage::new(side, (0..side * side).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn sorted_topr(map: &[f64], r: f64) -> f64 {
    let mut v = map.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let k = ((r * v.len() as f64 - 1e-9).ceil() as usize).clamp(1, v.len());
    v[..k].iter().sum::<f64>() / k as f64
}

fn window_sum(map: &[f64], side: usize, win: usize, r: usize, c: usize) -> f64 {
    (0..win)
        .flat_map(|dr| (0..win).map(move |dc| (dr, dc)))
        .map(|(dr, dc)| map[(r + dr) * side + c + dc])
        .sum()
}

/// Exhaustive greedy scan written independently of the library: candidates
/// overlapping chosen cells are skipped unless nothing else is left.
fn brute_windows(map: &[f64], side: usize, win: usize, k: usize) -> Vec<(usize, usize)> {
    let mut m = map.to_vec();
    let mut taken = vec![false; map.len()];
    let mut out = vec![];
    for _ in 0..k {
        let mut cands: Vec<(f64, bool, usize, usize)> = vec![];
        for r in 0..=side - win {
            for c in 0..=side - win {
                let free = (0..win).all(|dr| (0..win).all(|dc| !taken[(r + dr) * side + c + dc]));
                cands.push((window_sum(&m, side, win, r, c), free, r, c));
            }
        }
        let pool: Vec<_> = if cands.iter().any(|x| x.1) {
            cands.iter().filter(|x| x.1).collect()
        } else {
            cands.iter().collect()
        };
        let best = pool.iter().map(|x| x.0).fold(f64::NEG_INFINITY, f64::max);
        let &&(_, _, r, c) = pool.iter().find(|x| x.0 == best).unwrap();
        for dr in 0..win {
            for dc in 0..win {
                m[(r + dr) * side + c + dc] = 0.0;
                taken[(r + dr) * side + c + dc] = true;
            }
        }
        out.push((r, c));
    }
    out
}

#[test]
fn global_saliency_shape_and_range() {
    let cfg = GmicConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = cfg.init_params(&mut rng).unwrap();
    let img = random_image(&mut rng, 64);
    let out = forward_outputs(&cfg, &params, &img).unwrap();
    assert_eq!(out.saliency.num_maps(), 4);
    assert_eq!(out.saliency.side(), 8);
    assert!(out.saliency.values().iter().all(|&a| (0.0..=1.0).contains(&a)));
    for t in 0..4 {
        assert_eq!(
            out.y_global[t],
            aggregate_topr(out.saliency.map(t), cfg.pool_fraction).unwrap()
        );
    }
    for y in out.y_global.iter().chain(&out.y_local).chain(&out.y_fusion) {
        assert!(*y > 0.0 && *y < 1.0);
    }
    assert_eq!(out.rois.positions.len(), 6);
    assert!((out.rois.attention.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    for &(r, c) in &out.rois.positions {
        assert!(r + cfg.crop_side <= 64 && c + cfg.crop_side <= 64);
    }
}

#[test]
fn zero_saliency_layer_gives_half() {
    let cfg = GmicConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = cfg.init_params(&mut rng).unwrap();
    params.fill("global.saliency.weight", 0.0).unwrap();
    params.fill("global.saliency.bias", 0.0).unwrap();
    let img = random_image(&mut rng, 16);
    let mut g = Graph::new();
    let x = g.input("image", img.to_tensor()).unwrap();
    let nodes = global_forward(&mut g, &params, &cfg, x).unwrap();
    assert!(g.value(nodes.saliency).data().iter().all(|&a| a == 0.5));
    assert_eq!(g.value(nodes.y_global).data(), &[0.5; 4]);
}

#[test]
fn global_forward_rejects_wrong_side() {
    let cfg = GmicConfig::tiny();
    let params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut g = Graph::new();
    let x = g.input("image", Tensor::zeros(&[1, 8, 8])).unwrap();
    assert!(global_forward(&mut g, &params, &cfg, x).is_err());
}

#[test]
fn topr_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let side = rng.random_range(1..9);
        let map: Vec<f64> = (0..side * side).map(|_| rng.random::<f64>()).collect();
        let r = rng.random_range(0.01..=1.0);
        let got = aggregate_topr(&map, r).unwrap();
        assert!((got - sorted_topr(&map, r)).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn topr_is_monotone(map in prop::collection::vec(0.0f64..1.0, 16), idx in 0usize..16, bump in 0.0f64..1.0, r in 0.05f64..1.0) {
        let before = aggregate_topr(&map, r).unwrap();
        let mut raised = map.clone();
        raised[idx] += bump;
        prop_assert!(aggregate_topr(&raised, r).unwrap() >= before - 1e-15);
    }

    #[test]
    fn windows_are_disjoint(map in prop::collection::vec(0.0f64..1.0, 64), k in 1usize..6) {
        let wins = select_windows(&map, 8, 2, k).unwrap();
        prop_assert_eq!(wins.len(), k);
        let mut seen = [false; 64];
        for (r, c) in wins {
            for dr in 0..2 {
                for dc in 0..2 {
                    let i = (r + dr) * 8 + c + dc;
                    prop_assert!(!seen[i]);
                    seen[i] = true;
                }
            }
        }
    }
}

#[test]
fn window_search_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let side = rng.random_range(2..8);
        let win = rng.random_range(1..=side.min(3));
        let k = rng.random_range(1..4);
        let map: Vec<f64> = (0..side * side).map(|_| rng.random_range(0..4) as f64 * 0.25).collect();
        assert_eq!(
            select_windows(&map, side, win, k).unwrap(),
            brute_windows(&map, side, win, k)
        );
    }
}

#[test]
fn rois_follow_hot_cell_and_blobs() {
    let cfg = GmicConfig {
        num_patches: 1,
        ..GmicConfig::default()
    };
    let img = random_image(&mut ChaCha8Rng::seed_from_u64(5), 64);
    let mut maps = vec![0.0; 4 * 64];
    maps[5 * 8 + 6] = 1.0;
    let sal = SaliencyMaps::new(4, 8, maps).unwrap();
    let (pos, patches) = retrieve_rois(&sal, &img, &cfg).unwrap();
    assert_eq!(pos, vec![(4 * 8, 5 * 8)]);
    assert_eq!(patches[0].side(), cfg.patch_side);
    assert_eq!(patches[0], img.crop(32, 40, 16).unwrap().resized(14));

    let cfg = GmicConfig {
        num_patches: 2,
        ..GmicConfig::default()
    };
    let mut maps = vec![0.1; 4 * 64];
    for &(r, c) in &[(0, 0), (0, 1), (1, 0), (1, 1), (6, 6), (6, 7), (7, 6), (7, 7)] {
        maps[r * 8 + c] = 0.9;
    }
    let sal = SaliencyMaps::new(4, 8, maps).unwrap();
    let (pos, _) = retrieve_rois(&sal, &img, &cfg).unwrap();
    assert_eq!(pos, vec![(0, 0), (48, 48)]);
}

fn local_setup(seed: u64) -> (GmicConfig, ParamStore, ChaCha8Rng) {
    let cfg = GmicConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = cfg.init_params(&mut rng).unwrap();
    (cfg, params, rng)
}

fn attend(cfg: &GmicConfig, params: &ParamStore, patches: &[ProcessedImage]) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let nodes: Vec<_> = patches
        .iter()
        .enumerate()
        .map(|(k, p)| g.input(&format!("p{k}"), p.to_tensor()).unwrap())
        .collect();
    let (z, a) = local_attention(&mut g, params, cfg, &nodes).unwrap();
    (g.value(z).data().to_vec(), g.value(a).data().to_vec())
}

#[test]
fn attention_singleton_and_symmetry() {
    let (cfg, params, mut rng) = local_setup(6);
    let p = random_image(&mut rng, cfg.patch_side);
    let (z1, a1) = attend(&cfg, &params, std::slice::from_ref(&p));
    assert_eq!(a1, vec![1.0]);
    let (z3, a3) = attend(&cfg, &params, &[p.clone(), p.clone(), p.clone()]);
    assert!(a3.iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));
    for (a, b) in z1.iter().zip(&z3) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_is_permutation_equivariant() {
    let (cfg, params, mut rng) = local_setup(7);
    let patches: Vec<_> = (0..4).map(|_| random_image(&mut rng, cfg.patch_side)).collect();
    let (z, a) = attend(&cfg, &params, &patches);
    assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let perm = [2, 0, 3, 1];
    let shuffled: Vec<_> = perm.iter().map(|&i| patches[i].clone()).collect();
    let (zp, ap) = attend(&cfg, &params, &shuffled);
    for (k, &i) in perm.iter().enumerate() {
        assert!((ap[k] - a[i]).abs() < 1e-12);
    }
    for (x, y) in z.iter().zip(&zp) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn attention_gradients_match_finite_differences() {
    let (cfg, params, mut rng) = local_setup(8);
    let patches: Vec<_> = (0..3).map(|_| random_image(&mut rng, cfg.patch_side)).collect();
    let head: Vec<f64> = (0..cfg.local_features()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let report = check_gradients(&params, 1e-5, None, |s| {
        let mut g = Graph::new();
        let nodes = patches
            .iter()
            .enumerate()
            .map(|(k, p)| g.input(&format!("p{k}"), p.to_tensor()))
            .collect::<Result<Vec<_>, _>>()?;
        let (z, _) = local_attention(&mut g, s, &cfg, &nodes)?;
        let w = g.constant(Tensor::vector(head.clone()));
        let prod = g.mul(z, w)?;
        let loss = g.sum(prod);
        Ok((g, loss))
    })
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn fusion_head_rules() {
    let (cfg, mut params, mut rng) = local_setup(9);
    let feats: Vec<f64> = (0..6 * 16).map(|_| rng.random_range(-2.0..2.0)).collect();
    let z: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
    let run = |params: &ParamStore| {
        let mut g = Graph::new();
        let f = g
            .input("h_g", Tensor::new(vec![6, 4, 4], feats.clone()).unwrap())
            .unwrap();
        let zn = g.input("z", Tensor::vector(z.clone())).unwrap();
        let y = fusion_forward(&mut g, params, f, zn).unwrap();
        let pooled = g.global_max_pool(f).unwrap();
        (g.value(y).data().to_vec(), g.value(pooled).data().to_vec())
    };
    let (y, pooled) = run(&params);
    assert!(y.iter().all(|&p| p > 0.0 && p < 1.0));
    for c in 0..6 {
        let brute = feats[c * 16..(c + 1) * 16]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(pooled[c], brute);
    }
    params.fill("fusion.weight", 0.0).unwrap();
    params.fill("fusion.bias", 0.0).unwrap();
    assert_eq!(run(&params).0, vec![0.5; cfg.num_windows]);
}

#[test]
fn loss_examples() {
    let (cfg, params, mut rng) = local_setup(10);
    let img = random_image(&mut rng, 16);
    let mut g = Graph::new();
    let nodes = build_forward(&mut g, &params, &cfg, &img).unwrap();
    let base = gmic_loss(&mut g, &nodes, &[1.0, 0.0, 0.0, 1.0], 0.0).unwrap();
    let with = gmic_loss(&mut g, &nodes, &[1.0, 0.0, 0.0, 1.0], 0.3).unwrap();
    let l1: f64 = g.value(nodes.global.saliency).data().iter().sum();
    let diff = g.value(with).data()[0] - g.value(base).data()[0];
    assert!((diff - 0.3 * l1 / 4.0).abs() < 1e-12);
    assert!(g.value(base).data()[0] >= 0.0);
    assert!(gmic_loss(&mut g, &nodes, &[1.0, 0.5, 0.0, 1.0], 0.0).is_err());
    assert!(gmic_loss(&mut g, &nodes, &[1.0, 0.0], 0.0).is_err());
}

#[test]
fn loss_of_uninformative_heads_is_three_ln_two() {
    let (cfg, mut params, mut rng) = local_setup(11);
    for name in [
        "global.saliency.weight",
        "global.saliency.bias",
        "local.head.weight",
        "local.head.bias",
        "fusion.weight",
        "fusion.bias",
    ] {
        params.fill(name, 0.0).unwrap();
    }
    let img = random_image(&mut rng, 16);
    let mut g = Graph::new();
    let nodes = build_forward(&mut g, &params, &cfg, &img).unwrap();
    let loss = gmic_loss(&mut g, &nodes, &[1.0, 0.0, 0.0, 0.0], 0.0).unwrap();
    assert!((g.value(loss).data()[0] - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn perfect_heads_have_zero_loss() {
    let (cfg, mut params, mut rng) = local_setup(12);
    let labels = [1.0, 0.0, 1.0, 0.0];
    let big: Vec<f64> = labels.iter().map(|&y| if y == 1.0 { 60.0 } else { -60.0 }).collect();
    for name in ["global.saliency.weight", "local.head.weight", "fusion.weight"] {
        params.fill(name, 0.0).unwrap();
    }
    for name in ["global.saliency.bias", "local.head.bias", "fusion.bias"] {
        params.insert(name, Tensor::vector(big.clone()));
    }
    let img = random_image(&mut rng, 16);
    let mut g = Graph::new();
    let nodes = build_forward(&mut g, &params, &cfg, &img).unwrap();
    let loss = gmic_loss(&mut g, &nodes, &labels, 0.0).unwrap();
    assert_eq!(g.value(loss).data()[0], 0.0);
}

#[test]
fn end_to_end_loss_gradients() {
    let mut accepted = 0;
    for seed in 0..20 {
        let (cfg, params, mut rng) = local_setup(100 + seed);
        let img = random_image(&mut rng, 16);
        let labels = [1.0, 0.0, 1.0, 1.0];
        let report = check_gradients_away_from_kinks(&params, 1e-5, None, |s| {
            let mut g = Graph::new();
            let nodes = build_forward(&mut g, s, &cfg, &img)?;
            let loss = gmic_loss(&mut g, &nodes, &labels, 0.01)?;
            Ok((g, loss))
        })
        .unwrap();
        if let Some(report) = report {
            assert!(report.max_relative_error < 1e-3, "{report:?}");
            accepted += 1;
        }
        if accepted == 3 {
            return;
        }
    }
    panic!("only {accepted} of 20 draws were away from kinks");
}

#[test]
fn sparsity_weight_shrinks_saliency() {
    let cfg = GmicConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let images: Vec<_> = (0..16).map(|_| random_image(&mut rng, 16)).collect();
    let labels: Vec<[f64; 4]> = (0..16)
        .map(|i| if i % 2 == 0 { [0.0, 0.0, 1.0, 1.0] } else { [0.0; 4] })
        .collect();
    let probe = random_image(&mut rng, 16);
    for seed in 0..3 {
        let mut totals = vec![];
        for beta in [0.0, 1e-4, 1e-2] {
            let mut params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let examples: Vec<_> = images
                .iter()
                .zip(&labels)
                .map(|(image, y)| Example { image, target: *y })
                .collect();
            let opts = TrainOptions {
                epochs: 3,
                learning_rate: 1e-2,
                seed,
                augment: None,
                ..TrainOptions::default()
            };
            fit(
                &mut params,
                &examples,
                &opts,
                |g, s, img, y: &[f64; 4]| {
                    let nodes = build_forward(g, s, &cfg, img)?;
                    gmic_loss(g, &nodes, y, beta)
                },
                None::<fn(&ParamStore) -> prognosis_core::Result<f64>>,
            )
            .unwrap();
            let out = forward_outputs(&cfg, &params, &probe).unwrap();
            totals.push(out.saliency.values().iter().sum::<f64>());
        }
        assert!(
            totals[0] >= totals[1] && totals[1] >= totals[2],
            "seed {seed}: {totals:?}"
        );
    }
}
