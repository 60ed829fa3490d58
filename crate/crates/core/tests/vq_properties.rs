use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vq2_core::vq::{quantize, Codebook, CodeGrid};
use vq2_core::{Tape, Tensor};

/// Exhaustive nearest-prototype search written independently of the library.
fn oracle_nearest(protos: &[Vec<f64>], v: &[f64]) -> usize {
    let dists: Vec<f64> = protos.iter().map(|p| p.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum()).collect();
    let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    dists.iter().position(|&d| d == min).unwrap()
}

fn latent(vectors: &[Vec<f64>]) -> Tensor {
    // One batch item, D channels, 1×N spatial.
    let (n, d) = (vectors.len(), vectors[0].len());
    let mut data = vec![0.0; n * d];
    for (p, v) in vectors.iter().enumerate() {
        for c in 0..d {
            data[c * n + p] = v[c];
        }
    }
    Tensor::new(&[1, d, 1, n], data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantize_matches_exhaustive_search(seed in any::<u64>(), k in 1usize..12, d in 1usize..6, n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cb = Codebook::new(k, d, 0.99, 1e-5, &mut rng).unwrap();
        let protos: Vec<Vec<f64>> = (0..k).map(|i| cb.prototype(i).to_vec()).collect();
        let vectors: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let (grids, e_q) = quantize(&latent(&vectors), &cb).unwrap();
        for (p, v) in vectors.iter().enumerate() {
            let j = oracle_nearest(&protos, v);
            prop_assert_eq!(grids[0].indices[p], j);
            for c in 0..d {
                prop_assert_eq!(e_q.data()[c * n + p], protos[j][c]);
            }
        }
    }

    #[test]
    fn duplicated_prototypes_resolve_to_lowest_index(seed in any::<u64>(), k in 2usize..8, dup in 0usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let mut rows: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (src, dst) = (dup % k, k - 1);
        let copy: Vec<f64> = rows[src * d..(src + 1) * d].to_vec();
        rows[dst * d..(dst + 1) * d].copy_from_slice(&copy);
        let cb = Codebook::from_embeddings(Tensor::new(&[k, d], rows).unwrap(), 0.99, 1e-5).unwrap();
        let (grids, _) = quantize(&latent(&[copy]), &cb).unwrap();
        prop_assert_eq!(grids[0].indices[0], src.min(dst));
    }

    #[test]
    fn straight_through_gradient_is_copied_bitwise(seed in any::<u64>(), d in 1usize..5, h in 1usize..4, b in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cb = Codebook::new(6, d, 0.99, 1e-5, &mut rng).unwrap();
        let z = Tensor::randn(&[b, d, h, h], 1.0, &mut rng);
        let w = Tensor::randn(&[b, d, h, h], 1.0, &mut rng);
        let (_, e) = quantize(&z, &cb).unwrap();
        let mut tape = Tape::new();
        let zv = tape.leaf(z, true);
        let ev = tape.leaf(e, true);
        let st = tape.straight_through(zv, ev).unwrap();
        let sq = tape.mul(st, st).unwrap();
        let wv = tape.constant(w);
        let y = tape.mul(sq, wv).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        let at_output = g.wrt(st).unwrap().to_vec();
        prop_assert_eq!(g.wrt(zv).unwrap(), &at_output[..]);
        prop_assert!(g.wrt(ev).is_none_or(|ge| ge.iter().all(|&v| v == 0.0)));
    }
}

/// Closed form of the geometric recurrence `x_t = γ x_{t−1} + (1−γ) u_t`:
/// `x_T = γ^T x_0 + (1−γ) Σ_t γ^{T−t} u_t`.
fn geometric(x0: f64, inputs: &[f64], gamma: f64) -> f64 {
    let t = inputs.len() as i32;
    let mut acc = gamma.powi(t) * x0;
    for (s, &u) in inputs.iter().enumerate() {
        acc += (1.0 - gamma) * gamma.powi(t - 1 - s as i32) * u;
    }
    acc
}

#[test]
fn ema_matches_geometric_closed_form() {
    let (k, d, n, steps, eps) = (4usize, 3usize, 12usize, 50usize, 1e-5);
    for gamma in [0.0, 0.5, 0.99, 1.0] {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cb = Codebook::new(k, d, gamma, eps, &mut rng).unwrap();
        let e0 = cb.embeddings().clone();
        let mut counts_in: Vec<Vec<f64>> = vec![Vec::new(); k];
        let mut sums_in: Vec<Vec<f64>> = vec![Vec::new(); k * d];
        for _ in 0..steps {
            let z = Tensor::randn(&[1, d, 1, n], 1.0, &mut rng);
            // Every code is used at least once per step.
            let idx: Vec<usize> = (0..n).map(|p| if p < k { p } else { rng.gen_range(0..k) }).collect();
            for i in 0..k {
                let members: Vec<usize> = (0..n).filter(|&p| idx[p] == i).collect();
                counts_in[i].push(members.len() as f64);
                for c in 0..d {
                    sums_in[i * d + c].push(members.iter().map(|&p| z.data()[c * n + p]).sum());
                }
            }
            let grid = CodeGrid::new(1, n, k, idx).unwrap();
            cb.ema_update(&z, &[grid]).unwrap();
        }
        if gamma == 1.0 {
            assert_eq!(cb.embeddings(), &e0, "γ = 1 must leave the codebook bit-identical");
            assert!(cb.cluster_size().iter().all(|&c| c == 0.0));
            continue;
        }
        let big_n: Vec<f64> = (0..k).map(|i| geometric(0.0, &counts_in[i], gamma)).collect();
        let total: f64 = big_n.iter().sum();
        for i in 0..k {
            assert!((cb.cluster_size()[i] - big_n[i]).abs() < 1e-12, "γ={gamma} N[{i}]");
            let smoothed = (big_n[i] + eps) / (total + k as f64 * eps) * total;
            for c in 0..d {
                let m = geometric(e0.data()[i * d + c], &sums_in[i * d + c], gamma);
                assert!((cb.ema_sum().data()[i * d + c] - m).abs() < 1e-12, "γ={gamma} m[{i},{c}]");
                let e = m / smoothed;
                assert!((cb.embeddings().data()[i * d + c] - e).abs() < 1e-12, "γ={gamma} e[{i},{c}]");
            }
        }
    }
}
