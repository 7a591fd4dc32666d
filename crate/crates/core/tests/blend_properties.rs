//! PatchBlender against a naive loop oracle, plus algebraic and gradient properties.

use patchblender::blend::{blend, draw_permutations};
use patchblender::gradcheck::{check, DEFAULT_STEP};
use patchblender::{BlendMatrix, BlendVariant, LatentClip, PermutationMap, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Literal triple loop: out[i][q][c] = Σ_j R[i][j] · X[j][src(j,q)][c].
fn oracle(r: &Tensor, x: &Tensor, map: Option<&PermutationMap>) -> Vec<f64> {
    let s = x.shape();
    let (n, p, z) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; n * p * z];
    for i in 0..n {
        for q in 0..p {
            for c in 0..z {
                let mut acc = 0.0;
                for j in 0..n {
                    let src = match map {
                        None => q,
                        Some(PermutationMap::PerFrame { patches, table, .. }) => table[j * patches + q] as usize,
                        Some(PermutationMap::Shared { table, .. }) => table[q] as usize,
                    };
                    acc += r.data()[i * n + j] * x.data()[(j * p + src) * z + c];
                }
                out[(i * p + q) * z + c] = acc;
            }
        }
    }
    out
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, p: usize, variant: BlendVariant) -> BlendMatrix {
    let seed = rng.gen();
    let map = (variant != BlendVariant::SameLocation).then(|| draw_permutations(n, p, variant, seed).unwrap());
    BlendMatrix::from_parts(uniform(rng, &[n, n]), variant, map, seed).unwrap()
}

#[test]
fn matches_loop_oracle_for_all_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for variant in BlendVariant::ALL {
        for _ in 0..100 {
            let (n, p, z) = (rng.gen_range(1..=8), rng.gen_range(1..=16), rng.gen_range(1..=8));
            let m = random_matrix(&mut rng, n, p, variant);
            let x = uniform(&mut rng, &[n, p, z]);
            let got = m.apply(&LatentClip::new(x.clone()).unwrap()).unwrap();
            let want = oracle(m.ratios(), &x, m.permutation_map());
            for (a, b) in got.tensor().data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{variant:?}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn identity_ratios_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let x = uniform(&mut rng, &[8, 16, 8]);
        let y = BlendMatrix::identity(8).unwrap().apply(&LatentClip::new(x.clone()).unwrap()).unwrap();
        assert!(y.tensor().data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for variant in BlendVariant::ALL {
        for _ in 0..20 {
            let (b, n, p, z) = (2, rng.gen_range(1..=4), rng.gen_range(1..=5), rng.gen_range(1..=3));
            let m = random_matrix(&mut rng, n, p, variant);
            let map = m.permutation_map().cloned();
            let x = uniform(&mut rng, &[b, n, p, z]);
            let w = uniform(&mut rng, &[b, n, p, z]);
            let errs = check(&[m.ratios().clone(), x], DEFAULT_STEP, |t, v| {
                let y = blend(t, v[0], v[1], map.as_ref())?;
                let w = t.constant(w.clone());
                let y = t.mul(y, w)?;
                Ok(t.sum(y))
            })
            .unwrap();
            assert!(errs.iter().all(|&e| e < 1e-5), "{variant:?}: {errs:?}");
        }
    }
}

#[test]
fn permutation_entries_are_uniform() {
    // 10^5 draws over 16 bins; the chi-square statistic must stay within
    // three standard deviations of its mean (df = 15).
    for variant in [BlendVariant::RandomPerFrame, BlendVariant::SameRandomLocation] {
        let p = 16;
        let (frames, reps) = match variant {
            BlendVariant::RandomPerFrame => (6250, 1),
            _ => (1, 6250),
        };
        let mut counts = vec![0u64; p];
        for rep in 0..reps {
            let m = draw_permutations(frames, p, variant, 1000 + rep as u64).unwrap();
            for &s in m.table() {
                counts[s as usize] += 1;
            }
        }
        let total: u64 = counts.iter().sum();
        assert_eq!(total, 100_000);
        let expected = total as f64 / p as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let df = (p - 1) as f64;
        assert!(chi2 < df + 3.0 * (2.0 * df).sqrt(), "{variant:?}: chi2 = {chi2}");
    }
}

fn clip_strategy() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..=6, 1usize..=6, 1usize..=4, any::<u64>())
}

proptest! {
    #[test]
    fn blend_is_linear_in_x((n, p, z, seed) in clip_strategy(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for variant in BlendVariant::ALL {
            let m = random_matrix(&mut rng, n, p, variant);
            let (x, y) = (uniform(&mut rng, &[n, p, z]), uniform(&mut rng, &[n, p, z]));
            let mix: Vec<f64> = x.data().iter().zip(y.data()).map(|(u, v)| a * u + b * v).collect();
            let lhs = m.apply(&LatentClip::new(Tensor::new([n, p, z], mix).unwrap()).unwrap()).unwrap();
            let bx = m.apply(&LatentClip::new(x).unwrap()).unwrap();
            let by = m.apply(&LatentClip::new(y).unwrap()).unwrap();
            for ((l, u), v) in lhs.tensor().data().iter().zip(bx.tensor().data()).zip(by.tensor().data()) {
                prop_assert!((l - (a * u + b * v)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn blend_is_additive_in_ratios((n, p, z, seed) in clip_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for variant in BlendVariant::ALL {
            let m1 = random_matrix(&mut rng, n, p, variant);
            let map = m1.permutation_map().cloned();
            let r2 = uniform(&mut rng, &[n, n]);
            let sum: Vec<f64> = m1.ratios().data().iter().zip(r2.data()).map(|(a, b)| a + b).collect();
            let m2 = BlendMatrix::from_parts(r2, variant, map.clone(), 0).unwrap();
            let m12 = BlendMatrix::from_parts(Tensor::new([n, n], sum).unwrap(), variant, map, 0).unwrap();
            let x = LatentClip::new(uniform(&mut rng, &[n, p, z])).unwrap();
            let (y1, y2, y12) = (m1.apply(&x).unwrap(), m2.apply(&x).unwrap(), m12.apply(&x).unwrap());
            for ((a, b), c) in y1.tensor().data().iter().zip(y2.tensor().data()).zip(y12.tensor().data()) {
                prop_assert!((a + b - c).abs() < 1e-10);
            }
        }
    }
}
