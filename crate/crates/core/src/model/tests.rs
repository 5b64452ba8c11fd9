use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::lattice::LatticeSpec;

fn random_images<T: crate::nn::Real>(n: usize, dim: usize, seed: u64) -> Array2<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    Array2::from_shape_simple_fn((n, dim), || T::of(normal.sample(&mut rng)))
}

fn randomized(config: ModelConfig, gain: f64) -> RgFlowModel<f64> {
    let mut model = RgFlowModel::<f64>::new(config, 1).unwrap();
    model.randomize(2, gain);
    model
}

fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0, |m, d| m.max(d.abs()))
}

/// `log |det|` by partial pivoting.
pub(crate) fn log_abs_det(mut a: Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for k in 0..n {
        let piv = (k..n).max_by(|&i, &j| a[[i, k]].abs().total_cmp(&a[[j, k]].abs())).unwrap();
        if piv != k {
            for j in 0..n {
                a.swap([k, j], [piv, j]);
            }
        }
        acc += a[[k, k]].abs().ln();
        for i in k + 1..n {
            let f = a[[i, k]] / a[[k, k]];
            for j in k..n {
                a[[i, j]] -= f * a[[k, j]];
            }
        }
    }
    acc
}

fn encode_flat(model: &RgFlowModel<f64>, x: &Array2<f64>) -> Array2<f64> {
    model.encode(x).unwrap().0.to_flat()
}

#[test]
fn identity_step_is_subsample_and_complement() {
    let model = RgFlowModel::<f64>::new(ModelConfig::tiny(8, 4, 2), 0).unwrap();
    let spec = model.spec;
    let x = Array2::from_shape_fn((2, spec.dim()), |(r, k)| (r * 1000 + k) as f64);
    let (next, z, ld) = model.rg_step_forward(0, &x).unwrap();
    assert_eq!(next.ncols() + z.ncols(), x.ncols());
    assert!(ld.iter().all(|&v| v == 0.0));
    let (n, c) = (8, 2);
    for r in 0..2 {
        for i in 0..4 {
            for j in 0..4 {
                for ch in 0..c {
                    assert_eq!(next[[r, (i * 4 + j) * c + ch]], x[[r, ((2 * i) * n + 2 * j) * c + ch]]);
                }
            }
        }
        for (rank, (i, j)) in spec.latent_positions(0).into_iter().enumerate() {
            for ch in 0..c {
                assert_eq!(z[[r, rank * c + ch]], x[[r, (i * n + j) * c + ch]]);
            }
        }
    }
}

#[test]
fn step_round_trip_and_logdet_antisymmetry() {
    let model = randomized(ModelConfig::tiny(8, 4, 1), 0.05);
    let x = random_images::<f64>(6, 64, 3);
    for h in 0..model.spec.num_levels() {
        let n = model.spec.level_size(h);
        let xh = x.slice(ndarray::s![.., ..n * n]).to_owned();
        let (next, z, ld) = model.rg_step_forward(h, &xh).unwrap();
        assert!(ld.iter().any(|v| v.abs() > 1e-3));
        let (back, ld_inv) = model.rg_step_inverse(h, &next, &z).unwrap();
        assert!(max_abs(&back, &xh) < 1e-10);
        assert!((&ld + &ld_inv).iter().all(|d| d.abs() < 1e-10));
    }
}

#[test]
fn step_rejects_wrong_shapes() {
    let model = RgFlowModel::<f64>::new(ModelConfig::tiny(8, 4, 1), 0).unwrap();
    assert!(model.rg_step_forward(0, &Array2::zeros((1, 63))).is_err());
    assert!(model.rg_step_inverse(0, &Array2::zeros((1, 16)), &Array2::zeros((1, 47))).is_err());
}

#[test]
fn identity_encode_is_a_permutation() {
    let model = RgFlowModel::<f64>::new(ModelConfig::tiny(16, 4, 3), 0).unwrap();
    let x = Array2::from_shape_fn((1, 768), |(_, k)| k as f64);
    let (z, ld) = model.encode(&x).unwrap();
    assert_eq!(ld[0], 0.0);
    let mut flat: Vec<f64> = z.to_flat().iter().copied().collect();
    flat.sort_by(f64::total_cmp);
    assert_eq!(flat, (0..768).map(|k| k as f64).collect::<Vec<_>>());
    // each latent equals the pixel at its home position
    for k in 0..768 {
        let l = model.spec.latent_index(k).unwrap();
        let (i, j) = model.spec.home_pixel(l);
        assert_eq!(z.to_flat()[[0, k]], ((i * 16 + j) * 3 + l.c) as f64);
    }
}

#[test]
fn single_precision_round_trip() {
    let mut model = RgFlowModel::<f32>::new(ModelConfig::tiny(16, 4, 3), 5).unwrap();
    model.randomize(6, 0.03);
    let x = random_images::<f32>(100, 768, 9);
    let (z, ld) = model.encode(&x).unwrap();
    let (back, ld_g) = model.decode(&z).unwrap();
    let err = (&back - &x).iter().fold(0.0f32, |m, d| m.max(d.abs()));
    assert!(err < 1e-4, "round-trip error {err}");
    assert!((&ld + &ld_g).iter().all(|d| d.abs() < 1e-4));
    assert!(ld.iter().any(|v| v.abs() > 0.1));
}

fn numeric_jacobian_check(size: usize) {
    let model = randomized(ModelConfig::tiny(size, 4, 1), 0.05);
    let d = size * size;
    let x = random_images::<f64>(1, d, 17);
    let (_, ld) = model.encode(&x).unwrap();
    let eps = 1e-6;
    let mut rows = Array2::zeros((2 * d, d));
    for k in 0..d {
        for (r, sign) in [(2 * k, 1.0), (2 * k + 1, -1.0)] {
            rows.row_mut(r).assign(&x.row(0));
            rows[[r, k]] += sign * eps;
        }
    }
    let z = encode_flat(&model, &rows);
    let mut jac = Array2::zeros((d, d));
    for k in 0..d {
        let col = (&z.row(2 * k) - &z.row(2 * k + 1)) / (2.0 * eps);
        jac.column_mut(k).assign(&col);
    }
    let want = log_abs_det(jac);
    assert!((ld[0] - want).abs() < 1e-3, "L={size}: {} vs {want}", ld[0]);
    assert!(ld[0].abs() > 0.1);
}

#[test]
fn logdet_matches_numerical_jacobian_l4() {
    numeric_jacobian_check(4);
}

#[test]
fn logdet_matches_numerical_jacobian_l8() {
    numeric_jacobian_check(8);
}

#[test]
fn identity_log_prob_at_zero() {
    let model = RgFlowModel::<f64>::new(ModelConfig::tiny(4, 4, 1), 0).unwrap();
    let lp = model.log_prob(&Array2::zeros((1, 16))).unwrap();
    assert!((lp[0] - 16.0 * 0.5f64.ln()).abs() < 1e-12);
    assert!((lp[0] + 11.090_354_888_959_125).abs() < 1e-9);
}

#[test]
fn encode_and_decode_sides_agree() {
    let model = randomized(ModelConfig::tiny(8, 4, 2), 0.05);
    let x = random_images::<f64>(4, 128, 21);
    let lp = model.log_prob(&x).unwrap();
    let (z, _) = model.encode(&x).unwrap();
    let (_, ld_g) = model.decode(&z).unwrap();
    let prior = model.config.prior;
    let flat = z.to_flat();
    for r in 0..4 {
        let pz: f64 = flat.row(r).iter().map(|&v| prior.log_density(v)).sum();
        assert!((lp[r] - (pz - ld_g[r])).abs() < 1e-4);
    }
}

#[test]
fn decode_of_zero_latents_is_deterministic_low_temperature_limit() {
    let mut model = RgFlowModel::<f64>::new(ModelConfig::tiny(8, 4, 1), 0).unwrap();
    model.randomize(1, 0.1);
    let temps = TemperatureSchedule::uniform(1e-12, model.spec.num_levels()).unwrap();
    let s = model.sample(&temps, 3, 4).unwrap();
    let (x0, _) = model.decode(&LatentPyramid::zeros(&model.spec, 1)).unwrap();
    for r in 0..3 {
        assert!((&s.row(r) - &x0.row(0)).iter().all(|d| d.abs() < 1e-9));
    }
    let again = model.sample(&temps, 3, 4).unwrap();
    assert_eq!(s, again);
}

#[test]
fn mixed_schedule_scales_each_level() {
    let model = RgFlowModel::<f64>::new(ModelConfig::tiny(16, 4, 1), 0).unwrap();
    let temps = TemperatureSchedule::mixed(0.2, 0.6, 3).unwrap();
    let z = model.sample_latents(&temps, 200, 8).unwrap();
    let mean_abs = |a: &Array2<f64>| a.iter().map(|v| v.abs()).sum::<f64>() / a.len() as f64;
    assert!((mean_abs(&z.levels[0]) - 0.2).abs() < 0.01);
    assert!((mean_abs(&z.levels[1]) - 0.6).abs() < 0.05);
    assert!(model.sample_latents(&TemperatureSchedule::uniform(1.0, 2).unwrap(), 1, 0).is_err());
}

#[test]
fn prior_factorizes_over_latents() {
    let model = RgFlowModel::<f64>::new(ModelConfig::tiny(8, 4, 1), 0).unwrap();
    let z = random_images::<f64>(3, 64, 2);
    let pyr = LatentPyramid::from_flat(&model.spec, &z).unwrap();
    let tape = crate::nn::Tape::no_grad();
    let zs: Vec<_> = pyr.levels.iter().map(|l| tape.constant(l.clone())).collect();
    let lp = model.prior_log_prob_var(&tape, &zs);
    for r in 0..3 {
        let want: f64 = z.row(r).iter().map(|&v| model.config.prior.log_density(v)).sum();
        assert!((lp.value()[[r, 0]] - want).abs() < 1e-12);
    }
}

/// On a 2x2 single-channel lattice (one decimator block) the density is
/// integrated by midpoint quadrature.
#[test]
fn density_integrates_to_one() {
    let mut config = ModelConfig::tiny(2, 2, 1);
    config.n_layer = vec![4];
    let mut model = RgFlowModel::<f64>::new(config, 0).unwrap();
    model.randomize(3, 0.05);
    let (k, r) = (44usize, 11.0f64);
    let step = 2.0 * r / k as f64;
    let grid: Vec<f64> = (0..k).map(|i| -r + (i as f64 + 0.5) * step).collect();
    let mut total = 0.0;
    let mut rows = Array2::zeros((k * k, 4));
    for &a in &grid {
        for &b in &grid {
            for (n, (&c, &d)) in grid.iter().flat_map(|c| grid.iter().map(move |d| (c, d))).enumerate() {
                rows.row_mut(n).assign(&Array1::from(vec![a, b, c, d]));
            }
            total += model.log_prob(&rows).unwrap().mapv(f64::exp).sum();
        }
    }
    let integral = total * step.powi(4);
    assert!((integral - 1.0).abs() < 0.1, "integral {integral}");
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut model = RgFlowModel::<f32>::new(ModelConfig::tiny(8, 4, 3), 3).unwrap();
    model.randomize(4, 0.1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let back = RgFlowModel::<f32>::load(&path).unwrap();
    assert_eq!(back.config, model.config);
    let x = random_images::<f32>(5, 192, 1);
    assert_eq!(back.log_prob(&x).unwrap(), model.log_prob(&x).unwrap());
}

#[test]
fn config_validation() {
    let mut c = ModelConfig::tiny(8, 4, 1);
    c.n_layer = vec![2, 2, 2];
    assert!(RgFlowModel::<f32>::new(c.clone(), 0).is_err());
    c.n_layer = vec![2, 4];
    assert!(RgFlowModel::<f32>::new(c.clone(), 0).is_ok());
    c.share_levels = true;
    assert!(RgFlowModel::<f32>::new(c, 0).is_err());
    let mut bad = ModelConfig::tiny(8, 4, 1);
    bad.prior.scale = -1.0;
    assert!(RgFlowModel::<f32>::new(bad, 0).is_err());
}

#[test]
fn shared_levels_reuse_parameters() {
    let mut c = ModelConfig::tiny(16, 4, 1);
    let separate = RgFlowModel::<f32>::new(c.clone(), 0).unwrap().num_params();
    c.share_levels = true;
    let mut shared = RgFlowModel::<f64>::new(c, 0).unwrap();
    assert_eq!(separate, 3 * shared.num_params());
    shared.randomize(1, 0.1);
    let x = random_images::<f64>(3, 256, 2);
    let (z, _) = shared.encode(&x).unwrap();
    assert!(max_abs(&shared.decode(&z).unwrap().0, &x) < 1e-9);
}

#[test]
fn level_counts_match_lattice() {
    let spec = LatticeSpec::new(32, 4, 3).unwrap();
    let model = RgFlowModel::<f32>::new(ModelConfig::tiny(32, 4, 3), 0).unwrap();
    let (z, _) = model.encode(&Array2::zeros((2, 3072))).unwrap();
    let counts: Vec<usize> = z.levels.iter().map(|l| l.ncols()).collect();
    assert_eq!(counts, spec.latent_counts());
}
