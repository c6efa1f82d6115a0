//! Randomized property tests for the algebraic invariants the solver
//! relies on.

use proptest::prelude::*;

use graphsr::image::FeatureMap;
use graphsr::{
    build_box_downsampler, compute_affinities, laplacian_apply, smoothness_energy, AffinityScale,
    SourceImage,
};

fn dims_and_scale() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=4, 1usize..=4, prop::sample::select(vec![1usize, 2, 3]))
        .prop_map(|(bh, bw, k)| (bh * k, bw * k, k))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// <D y, v> == <y, D^T v> for every operator built from any mask.
    #[test]
    fn downsampler_adjoint_identity(
        (h, w, k) in dims_and_scale(),
        seed in 0u64..1000,
        mask_bits in prop::collection::vec(any::<bool>(), 144),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let tmask: Vec<bool> = (0..h * w).map(|i| mask_bits[i % mask_bits.len()]).collect();
        let d = build_box_downsampler(h, w, k, Some(&tmask)).unwrap();
        let y: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..d.out_height * d.out_width).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dy = d.apply(&y).unwrap();
        let dtv = d.apply_transpose(&v).unwrap();
        let lhs: f64 = dy.iter().zip(&v).map(|(a, b)| a * b).sum();
        let rhs: f64 = y.iter().zip(&dtv).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs().max(rhs.abs())));
    }

    /// The Laplacian is symmetric, annihilates constants, and yields a
    /// non-negative quadratic form equal to the edge-sum energy.
    #[test]
    fn laplacian_invariants(
        h in 1usize..=6,
        w in 1usize..=6,
        seed in 0u64..1000,
        raw_mu in -2.0f64..2.0,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = h * w;
        let f = FeatureMap::new(h, w, 2, (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let g = compute_affinities(&f, AffinityScale::new(raw_mu)).unwrap();

        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lx = laplacian_apply(&g, &x).unwrap();
        let ly = laplacian_apply(&g, &y).unwrap();
        // symmetry: <L x, y> == <x, L y>
        let a: f64 = lx.iter().zip(&y).map(|(p, q)| p * q).sum();
        let b: f64 = x.iter().zip(&ly).map(|(p, q)| p * q).sum();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs())));
        // nullspace: L * const == 0
        let lc = laplacian_apply(&g, &vec![3.7; n]).unwrap();
        prop_assert!(lc.iter().all(|v| v.abs() <= 1e-12));
        // energy: x^T L x equals the per-edge sum and is non-negative
        let quad: f64 = lx.iter().zip(&x).map(|(p, q)| p * q).sum();
        let energy = smoothness_energy(&g, &x).unwrap();
        prop_assert!(quad >= -1e-12);
        prop_assert!((quad - energy).abs() <= 1e-10 * (1.0 + energy.abs()));
    }

    /// Box downsampling of a constant image is the same constant wherever
    /// the output is defined.
    #[test]
    fn box_mean_preserves_constants(
        (h, w, k) in dims_and_scale(),
        c in 0.0f64..10.0,
    ) {
        let d = build_box_downsampler(h, w, k, None).unwrap();
        let s: SourceImage = d.downsample_target(&vec![c; h * w]).unwrap();
        for (&v, &ok) in s.data.iter().zip(&s.valid) {
            prop_assert!(ok);
            prop_assert!((v - c).abs() <= 1e-12);
        }
    }
}
