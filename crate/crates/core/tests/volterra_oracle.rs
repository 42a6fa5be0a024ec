use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volterra_core::efficient::{build_terms_with_variant, evc_grad_weights, scatter_term_grads};
use volterra_core::index::IndexSet;
use volterra_core::naive::kron_terms_with_budget;
use volterra_core::{
    build_terms_progressive, embed_unique_weights, evc_forward, evc_grad_input, tvc_forward, tvc_grad_input,
    tvc_grad_weights, ConvGeometry, DenseKernel, Error, Tensor, UniqueKernel, VolterraConvLayer,
};
use volterra_oracle::{
    alpha_back_grad, central_diff, dense_forward, for_each_tuple, jacobian_input_grad, max_rel_err, monomial,
    receptive_field, rel_err,
};

fn uniform(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_dense(rng: &mut impl Rng, n: usize, r: usize) -> DenseKernel {
    DenseKernel { n, weights: (1..=r).map(|j| uniform(rng, n.pow(j as u32))).collect(), bias: rng.gen_range(-1.0..1.0) }
}

/// Sums every dense weight into the unique weight of its sorted tuple.
fn fold_dense(dense: &DenseKernel, idx: &IndexSet) -> UniqueKernel {
    let n = dense.n;
    let weights = dense
        .weights
        .iter()
        .enumerate()
        .map(|(j0, w)| {
            let fpm = idx.fpm(j0 + 1);
            let lookup: HashMap<Vec<usize>, usize> = fpm.rows().enumerate().map(|(k, row)| (row.to_vec(), k)).collect();
            let mut out = vec![0.0; fpm.n_rows()];
            let mut flat = 0;
            for_each_tuple(n, j0 + 1, |t| {
                let mut s = t.to_vec();
                s.sort_unstable();
                out[lookup[&s]] += w[flat];
                flat += 1;
            });
            out
        })
        .collect();
    UniqueKernel::new(n, weights, dense.bias).unwrap()
}

/// Unique filter as an explicit sum of monomials over position rows.
fn unique_sum(x: &[f64], k: &UniqueKernel, idx: &IndexSet) -> f64 {
    let mut y = k.bias;
    for j in 1..=k.order() {
        for (row, w) in idx.fpm(j).rows().zip(k.order_weights(j)) {
            y += w * monomial(x, row);
        }
    }
    y
}

#[test]
fn dense_forward_matches_nested_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in 1..=6 {
        for r in 1..=4 {
            let k = random_dense(&mut rng, n, r);
            let x = uniform(&mut rng, n);
            let got = tvc_forward(&x, &k).unwrap();
            let want = dense_forward(&x, &k.weights, k.bias);
            assert!(rel_err(got, want) <= 1e-12, "n={n} r={r}");
        }
    }
}

#[test]
fn unique_and_dense_filters_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cases = 0;
    for n in 2..=9 {
        for r in 1..=4 {
            let idx = IndexSet::build(n, r).unwrap();
            for _ in 0..4 {
                let dense = random_dense(&mut rng, n, r);
                let unique = fold_dense(&dense, &idx);
                let x = uniform(&mut rng, n);
                let tvc = tvc_forward(&x, &dense).unwrap();
                let evc = evc_forward(&x, &unique, &idx).unwrap();
                assert!(rel_err(tvc, evc) <= 1e-12, "forward n={n} r={r}: {tvc} vs {evc}");
                assert!(rel_err(evc, unique_sum(&x, &unique, &idx)) <= 1e-12);

                let cache = build_terms_progressive(&x, &idx).unwrap();
                let g_evc = evc_grad_input(&cache, &unique, &idx, 0.7).unwrap();
                let g_tvc = tvc_grad_input(&x, &dense, 0.7).unwrap();
                assert!(max_rel_err(&g_evc, &g_tvc) <= 1e-10, "input grad n={n} r={r}");
                cases += 1;
            }
        }
    }
    assert!(cases >= 100);
}

#[test]
fn embedded_unique_kernel_matches() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 1..=5 {
        for r in 1..=4 {
            let idx = IndexSet::build(n, r).unwrap();
            let uk = UniqueKernel::random(n, r, &mut rng).unwrap();
            let dense = embed_unique_weights(&uk, idx.fpms()).unwrap();
            let x = uniform(&mut rng, n);
            let a = evc_forward(&x, &uk, &idx).unwrap();
            let b = dense_forward(&x, &dense.weights, dense.bias);
            assert!(rel_err(a, b) <= 1e-12);
        }
    }
}

#[test]
fn input_gradient_matches_explicit_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in 1..=5 {
        for r in 1..=4 {
            let k = random_dense(&mut rng, n, r);
            let x = uniform(&mut rng, n);
            let got = tvc_grad_input(&x, &k, -1.3).unwrap();
            let want = jacobian_input_grad(&x, &k.weights, -1.3);
            assert!(max_rel_err(&got, &want) <= 1e-12, "n={n} r={r}");
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in 2..=6 {
        for r in 1..=4 {
            let idx = IndexSet::build(n, r).unwrap();
            let uk = UniqueKernel::random(n, r, &mut rng).unwrap();
            let x = uniform(&mut rng, n);
            let cache = build_terms_progressive(&x, &idx).unwrap();

            let analytic = evc_grad_input(&cache, &uk, &idx, 1.0).unwrap();
            let numeric = central_diff(|p| evc_forward(p, &uk, &idx).unwrap(), &x, 1e-5);
            assert!(max_rel_err(&analytic, &numeric) <= 1e-6, "input n={n} r={r}");

            let gw = evc_grad_weights(&cache, 1.0);
            let numeric_w = central_diff(
                |p| {
                    let mut k = uk.clone();
                    k.weights_mut().copy_from_slice(p);
                    evc_forward(&x, &k, &idx).unwrap()
                },
                uk.weights(),
                1e-5,
            );
            assert!(max_rel_err(gw.weights(), &numeric_w) <= 1e-6, "weights n={n} r={r}");
            assert_eq!(gw.bias, 1.0);

            let dense = random_dense(&mut rng, n, r);
            let tw = tvc_grad_weights(&x, 2.0, r).unwrap();
            for j in 1..=r {
                let mut flat = 0;
                for_each_tuple(n, j, |t| {
                    assert!(rel_err(tw.weights[j - 1][flat], 2.0 * monomial(&x, t)) <= 1e-12);
                    flat += 1;
                });
            }
            let numeric_x = central_diff(|p| tvc_forward(p, &dense).unwrap(), &x, 1e-5);
            let analytic_x = tvc_grad_input(&x, &dense, 1.0).unwrap();
            assert!(max_rel_err(&analytic_x, &numeric_x) <= 1e-6);
        }
    }
}

#[test]
fn scatter_matches_materialized_backward_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for n in 1..=6 {
        for r in 2..=4 {
            let idx = IndexSet::build(n, r).unwrap();
            let x = uniform(&mut rng, n);
            let cache = build_terms_progressive(&x, &idx).unwrap();
            for j in 2..=r {
                let w = uniform(&mut rng, idx.fpm(j).n_rows());
                let tables: Vec<Vec<(usize, usize)>> = idx
                    .pcms(j)
                    .variants()
                    .iter()
                    .map(|t| t.iter().map(|e| (e.position, e.prev_row)).collect())
                    .collect();
                let want = alpha_back_grad(n, &tables, &w, cache.order(j - 1));

                let mut term_grads = vec![0.0; idx.offset(j) + w.len()];
                term_grads[idx.order_range(j)].copy_from_slice(&w);
                let mut got = vec![0.0; n];
                scatter_term_grads(&term_grads, cache.flat(), &idx, j, &mut got);
                assert!(max_rel_err(&got, &want) <= 1e-12, "n={n} r={r} j={j}");

                let numeric = central_diff(
                    |p| idx.fpm(j).rows().zip(&w).map(|(row, wv)| wv * monomial(p, row)).sum(),
                    &x,
                    1e-5,
                );
                assert!(max_rel_err(&got, &numeric) <= 1e-6);
            }
        }
    }
}

#[test]
fn every_gather_variant_gives_the_same_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in 1..=7 {
        for r in 1..=5 {
            let idx = IndexSet::build(n, r).unwrap();
            let x = uniform(&mut rng, n);
            let base = build_terms_progressive(&x, &idx).unwrap();
            for j in 1..=r {
                for (row, &t) in idx.fpm(j).rows().zip(base.order(j)) {
                    assert!(rel_err(t, monomial(&x, row)) <= 1e-12);
                }
            }
            for variant in 1..r {
                let other = build_terms_with_variant(&x, &idx, variant).unwrap();
                assert!(max_rel_err(base.flat(), other.flat()) <= 1e-15, "n={n} r={r} variant={variant}");
            }
        }
    }
}

#[test]
fn dense_path_respects_element_budget() {
    let x = vec![0.5; 90];
    match kron_terms_with_budget(&x, 5, 100_000_000) {
        Err(Error::ResourceLimit { requested, budget }) => {
            assert_eq!(requested, 90 + 8100 + 729_000 + 65_610_000 + 5_904_900_000);
            assert_eq!(budget, 100_000_000);
        }
        other => panic!("expected resource limit, got {other:?}"),
    }
    assert!(kron_terms_with_budget(&x, 4, 1_000).is_err());
    assert!(kron_terms_with_budget(&x, 2, 1_000_000).is_ok());
}

fn conv_case(rng: &mut impl Rng, b: usize, c: usize, h: usize, w: usize, oc: usize, r: usize, stride: usize) {
    let geom = ConvGeometry::new(c, h, w, (3, 3), (stride, stride), (1, 1)).unwrap();
    let layer = VolterraConvLayer::random(geom, oc, r, rng).unwrap();
    let input = Tensor::new(vec![b, c, h, w], uniform(rng, b * c * h * w)).unwrap();
    let (out, _) = layer.forward(&input).unwrap();
    let (oh, ow) = (geom.out_h(), geom.out_w());
    assert_eq!(out.shape(), &[b, oc, oh, ow]);
    let mut got = Vec::new();
    let mut want = Vec::new();
    for s in 0..b {
        for o in 0..oc {
            for y in 0..oh {
                for x in 0..ow {
                    let patch = receptive_field(input.data(), [b, c, h, w], (3, 3), (stride, stride), (1, 1), s, y, x);
                    let k = &layer.kernels()[o];
                    let dense = embed_unique_weights(k, layer.index().fpms()).unwrap();
                    want.push(dense_forward(&patch, &dense.weights, dense.bias));
                    got.push(out.data()[((s * oc + o) * oh + y) * ow + x]);
                }
            }
        }
    }
    assert!(max_rel_err(&got, &want) <= 1e-10);
}

#[test]
fn convolution_matches_per_patch_dense_filter() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    conv_case(&mut rng, 2, 2, 5, 4, 3, 2, 1);
    conv_case(&mut rng, 1, 1, 6, 6, 2, 3, 2);
    conv_case(&mut rng, 1, 3, 4, 4, 1, 1, 1);
}

#[test]
fn convolution_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let geom = ConvGeometry::square(2, 4, 4, 3, 1).unwrap();
    let layer = VolterraConvLayer::random(geom, 2, 3, &mut rng).unwrap();
    let shape = vec![1, 2, 4, 4];
    let x = uniform(&mut rng, 32);
    let probe = uniform(&mut rng, 2 * 16);
    let loss = |layer: &VolterraConvLayer, x: &[f64]| -> f64 {
        let (out, _) = layer.forward(&Tensor::new(shape.clone(), x.to_vec()).unwrap()).unwrap();
        out.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
    };
    let input = Tensor::new(shape.clone(), x.clone()).unwrap();
    let (_, saved) = layer.forward(&input).unwrap();
    let upstream = Tensor::new(vec![1, 2, 4, 4], probe.clone()).unwrap();
    let grads = layer.backward(&upstream, &saved).unwrap();

    let numeric_x = central_diff(|p| loss(&layer, p), &x, 1e-5);
    assert!(max_rel_err(grads.input.data(), &numeric_x) <= 1e-5);

    for o in 0..2 {
        let w0 = layer.kernels()[o].weights().to_vec();
        let numeric_w = central_diff(
            |p| {
                let mut l = layer.clone();
                l.kernels_mut()[o].weights_mut().copy_from_slice(p);
                loss(&l, &x)
            },
            &w0,
            1e-5,
        );
        assert!(max_rel_err(grads.kernels[o].weights(), &numeric_w) <= 1e-5, "kernel {o}");
        let bias_grad: f64 = probe[o * 16..(o + 1) * 16].iter().sum();
        assert!(rel_err(grads.kernels[o].bias, bias_grad) <= 1e-12);
    }
}
