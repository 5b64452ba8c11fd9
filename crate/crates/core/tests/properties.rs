//! Randomized structural properties of the lattice, couplings and model.

use std::collections::BTreeSet;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rgflow_core::analysis::{self, InpaintArm};
use rgflow_core::coupling::{BijectorStack, CouplingMask, NetSize};
use rgflow_core::data::{Dequantizer, Noise};
use rgflow_core::lattice::{LatentIndex, LatticeSpec, PixelRegion};
use rgflow_core::model::{FlowModel, LatentPyramid, ModelConfig, RgFlowModel};
use rgflow_core::nn::{clip_global_norm, global_norm, ParamStore};

fn config() -> ProptestConfig {
    ProptestConfig { cases: 16, ..ProptestConfig::default() }
}

fn model(size: usize, channels: usize, seed: u64, gain: f64) -> RgFlowModel<f64> {
    let config = ModelConfig { n_layer: vec![2], n_res: 1, hidden: 6, ..ModelConfig::tiny(size, 4, channels) };
    let mut m = RgFlowModel::new(config, seed).unwrap();
    m.randomize(seed ^ 0x5eed, gain);
    m
}

fn random_rows(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, d), || rng.random_range(-2.5..2.5))
}

fn changed(a: &Array2<f64>, b: &Array2<f64>, tol: f64) -> BTreeSet<usize> {
    (0..a.ncols()).filter(|&k| (a[[0, k]] - b[[0, k]]).abs() > tol).collect()
}

fn pixel_of(spec: &LatticeSpec, k: usize) -> (usize, usize) {
    let p = k / spec.channels;
    (p / spec.size, p % spec.size)
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn coupling_stack_inverts_both_ways(seed in 0u64..1000, channels in 1usize..4, blocks in 1usize..5, gain in 0.01f64..0.1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let size = NetSize { hidden: 8, n_res: 1 };
        let stack = BijectorStack::new(&mut store, "s", blocks, |p| CouplingMask::checkerboard(4, channels, p), size, 0, &mut rng);
        stack.randomize(&mut store, &mut rng, gain);
        let x = random_rows(5, 16 * channels, seed + 1);
        let (y, ld) = stack.forward_array(&store, &x).unwrap();
        let (back, ld_inv) = stack.inverse_array(&store, &y).unwrap();
        let pre = stack.inverse_array(&store, &x).unwrap().0;
        let (fwd_again, _) = stack.forward_array(&store, &pre).unwrap();
        // Round-off grows with the largest intermediate value.
        let scale = y.iter().chain(pre.iter()).fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!((&back - &x).iter().all(|d| d.abs() < 1e-10 * scale));
        prop_assert!((&fwd_again - &x).iter().all(|d| d.abs() < 1e-10 * scale));
        prop_assert!((&ld + &ld_inv).iter().all(|d| d.abs() < 1e-10 * scale));
    }

    #[test]
    fn checkerboard_halves_partition_the_patch(m in 1usize..5, channels in 1usize..4, parity in 0usize..2) {
        let mask = CouplingMask::checkerboard(2 * m, channels, parity);
        let a: BTreeSet<usize> = mask.conditioner().iter().copied().collect();
        let b: BTreeSet<usize> = mask.transformed().iter().copied().collect();
        prop_assert!(a.is_disjoint(&b));
        prop_assert_eq!(a.len() + b.len(), 4 * m * m * channels);
        prop_assert_eq!(a.union(&b).count(), 4 * m * m * channels);
    }

    #[test]
    fn model_inverts_in_double_precision(seed in 0u64..1000, size in prop::sample::select(vec![4usize, 8, 16]), channels in 1usize..4) {
        let m = model(size, channels, seed, 0.05);
        let x = random_rows(3, m.spec.dim(), seed);
        let (z, ld) = m.encode(&x).unwrap();
        let (back, ld_back) = m.decode(&z).unwrap();
        prop_assert!((&back - &x).iter().all(|d| d.abs() < 1e-10));
        prop_assert!((&ld + &ld_back).iter().all(|d| d.abs() < 1e-9));
        let zf = random_rows(2, m.spec.dim(), seed + 7);
        let (xg, _) = m.decode(&LatentPyramid::from_flat(&m.spec, &zf).unwrap()).unwrap();
        prop_assert!((&m.encode(&xg).unwrap().0.to_flat() - &zf).iter().all(|d| d.abs() < 1e-10));
    }

    #[test]
    fn initialization_is_deterministic(seed in 0u64..1000) {
        let a = RgFlowModel::<f32>::new(ModelConfig::tiny(8, 4, 2), seed).unwrap();
        let b = RgFlowModel::<f32>::new(ModelConfig::tiny(8, 4, 2), seed).unwrap();
        prop_assert_eq!(a.store().values(), b.store().values());
    }

    /// A perturbed latent moves only pixels of its generation cone, and a
    /// perturbed pixel moves only latents of its inference cone.
    #[test]
    fn perturbations_stay_inside_cones(seed in 0u64..1000, channels in 1usize..3, slot in any::<prop::sample::Index>(), i in 0usize..16, j in 0usize..16) {
        let m = model(16, channels, seed, 0.05);
        let spec = m.spec;
        let x = random_rows(1, spec.dim(), seed);
        let z = m.encode(&x).unwrap().0.to_flat();

        let k = slot.index(spec.dim());
        let mut zp = z.clone();
        zp[[0, k]] += 0.7;
        let xd = m.decode(&LatentPyramid::from_flat(&spec, &z).unwrap()).unwrap().0;
        let xp = m.decode(&LatentPyramid::from_flat(&spec, &zp).unwrap()).unwrap().0;
        let cone = spec.generation_cone(spec.latent_index(k).unwrap()).unwrap();
        for p in changed(&xd, &xp, 1e-9) {
            let (r, c) = pixel_of(&spec, p);
            prop_assert!(cone.contains_pixel(r, c), "latent {k} moved pixel ({r}, {c})");
        }

        let mut xq = x.clone();
        xq[[0, (i * 16 + j) * channels]] += 0.7;
        let zq = m.encode(&xq).unwrap().0.to_flat();
        let allowed: BTreeSet<usize> =
            analysis::free_latents(&spec, PixelRegion::new(i, j, 1, 1), InpaintArm::Cone, 0).unwrap().into_iter().collect();
        prop_assert!(changed(&z, &zq, 1e-9).is_subset(&allowed));
    }

    /// Two latents with disjoint generation cones never touch each other's
    /// pixels.
    #[test]
    fn disjoint_cones_do_not_interact(seed in 0u64..1000, a in any::<prop::sample::Index>(), b in any::<prop::sample::Index>()) {
        let m = model(16, 1, seed, 0.05);
        let spec = m.spec;
        let (ka, kb) = (a.index(spec.dim()), b.index(spec.dim()));
        let ca = spec.generation_cone(spec.latent_index(ka).unwrap()).unwrap();
        let cb = spec.generation_cone(spec.latent_index(kb).unwrap()).unwrap();
        let overlap = ca.pixels().iter().any(|&(r, c)| cb.contains_pixel(r, c));
        prop_assume!(!overlap);
        let z = random_rows(1, spec.dim(), seed);
        let x = m.decode(&LatentPyramid::from_flat(&spec, &z).unwrap()).unwrap().0;
        let mut zp = z.clone();
        zp[[0, ka]] -= 1.3;
        let xp = m.decode(&LatentPyramid::from_flat(&spec, &zp).unwrap()).unwrap().0;
        for p in changed(&x, &xp, 1e-9) {
            let (r, c) = pixel_of(&spec, p);
            prop_assert!(!cb.contains_pixel(r, c));
        }
    }

    #[test]
    fn self_mix_is_the_identity(seed in 0u64..1000, theta in 0usize..4) {
        let m = model(8, 1, seed, 0.05);
        let x = random_rows(2, m.spec.dim(), seed);
        let mixed = analysis::mix_hyperbolic(&m, &x, &x, theta.min(m.spec.num_levels())).unwrap();
        prop_assert!((&mixed - &x).iter().all(|d| d.abs() < 1e-9));
    }

    #[test]
    fn preprocessing_round_trips_bytes(seed in 0u64..1000, noisy in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x8 = Array2::from_shape_simple_fn((4, 48), || rng.random::<u8>());
        let dq = Dequantizer::default();
        let (x, _) = if noisy {
            dq.preprocess::<f64, _>(x8.view(), Noise::Uniform(&mut rng))
        } else {
            dq.preprocess::<f64, ChaCha8Rng>(x8.view(), Noise::Midpoint)
        };
        prop_assert_eq!(dq.postprocess(&x), x8);
    }

    #[test]
    fn clipping_bounds_the_norm(seed in 0u64..1000, scale in 1e-3f64..1e3, max in 0.1f64..10.0) {
        let mut grads = vec![random_rows(3, 4, seed) * scale, random_rows(1, 7, seed + 1) * scale];
        let before = global_norm(&grads);
        let reported = clip_global_norm(&mut grads, max);
        prop_assert!((reported - before).abs() <= 1e-12 * before.max(1.0));
        prop_assert!(global_norm(&grads) <= max + 1e-9);
    }
}

/// Per-level inference-cone counts for an `r x r` region stay below
/// `((ceil(r/m) + 2) m)^2 C`, do not depend on `L` once a level is
/// unsaturated, and the total grows by a bounded amount per added level.
#[test]
fn cone_counts_are_bounded_per_level() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..24 {
        let r = rng.random_range(1..=12usize);
        let (row, col) = (rng.random_range(0..32usize), rng.random_range(0..32usize));
        let counts: Vec<Vec<usize>> = [64usize, 128, 256]
            .iter()
            .map(|&l| {
                let spec = LatticeSpec::new(l, 4, 3).unwrap();
                spec.inference_cone(PixelRegion::new(row, col, r, r)).unwrap().level_counts()
            })
            .collect();
        let bound = ((r.div_ceil(4) + 2) * 4).pow(2) * 3;
        for c in &counts {
            assert!(c.iter().all(|&n| n <= bound), "r={r}: {c:?} over {bound}");
        }
        // A level is unsaturated when the cone misses some of its latents.
        for (small, large, l) in [(&counts[0], &counts[1], 64usize), (&counts[1], &counts[2], 128)] {
            let capacity = LatticeSpec::new(l, 4, 3).unwrap().latent_counts();
            for h in (0..small.len()).filter(|&h| small[h] < capacity[h]) {
                assert_eq!(small[h], large[h], "r={r} at ({row},{col}), level {h}: {small:?} vs {large:?}");
            }
        }
        let totals: Vec<usize> = counts.iter().map(|c| c.iter().sum()).collect();
        assert!(totals[2] - totals[1] <= bound && totals[1] - totals[0] <= bound, "{totals:?}");
    }
}

#[test]
fn latent_slots_cover_every_level() {
    let spec = LatticeSpec::new(16, 4, 2).unwrap();
    let levels: BTreeSet<usize> = (0..spec.dim()).map(|k| spec.latent_index(k).unwrap().h).collect();
    assert_eq!(levels.len(), spec.num_levels());
    let l = LatentIndex { h: spec.top_level(), i: 0, j: 0, c: 1 };
    assert_eq!(spec.latent_index(spec.flat_index(l).unwrap()).unwrap(), l);
}
