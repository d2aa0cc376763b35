use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsxplain_core::autodiff::{Tape, Var};
use tsxplain_core::gradcheck::gradcheck;
use tsxplain_core::tensor::{Result, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[allow(clippy::too_many_arguments)]
fn naive_conv(x: &[f64], w: &[f64], ci: usize, t: usize, co: usize, k: usize, s: usize, p: usize) -> Vec<f64> {
    let tout = (t + 2 * p - k) / s + 1;
    let mut out = vec![0.0; co * tout];
    for o in 0..co {
        for to in 0..tout {
            let mut acc = 0.0;
            for c in 0..ci {
                for kk in 0..k {
                    let pos = (to * s + kk) as isize - p as isize;
                    if pos >= 0 && (pos as usize) < t {
                        acc += w[(o * ci + c) * k + kk] * x[c * t + pos as usize];
                    }
                }
            }
            out[o * tout + to] = acc;
        }
    }
    out
}

/// Distance to the nearest ReLU switch or pool tie must exceed the FD reach.
const KINK_MARGIN: f64 = 1e-3;

/// Batch-norm output and max-pool input of the conv/pool gradcheck graph.
fn conv_pool_stages(inputs: &[Tensor]) -> (Vec<f64>, Vec<f64>) {
    let mut t = Tape::new();
    let v: Vec<Var> = inputs.iter().map(|x| t.constant(x).unwrap()).collect();
    let y = t.conv1d(v[0], v[1], Some(v[2]), 1, 1).unwrap();
    let (y, _) = t.batch_norm(y, v[3], v[4], 1e-5, None).unwrap();
    let pre_relu = t.value(y).data().to_vec();
    let y = t.relu(y).unwrap();
    let y = t.conv1d(y, v[5], None, 2, 1).unwrap();
    (pre_relu, t.value(y).data().to_vec())
}

/// Gap between the two largest entries of each stride-1, pad-1 pool window.
fn pool_gaps(x: &[f64], len: usize, k: usize) -> Vec<f64> {
    let mut gaps = Vec::new();
    for row in x.chunks(len) {
        for start in 0..len {
            let lo = start.saturating_sub(k / 2);
            let mut w: Vec<f64> = row[lo..(start + k / 2 + 1).min(len)].to_vec();
            if w.len() < 2 {
                continue;
            }
            w.sort_by(|a, b| b.total_cmp(a));
            gaps.push(w[0] - w[1]);
        }
    }
    gaps
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn conv1d_matches_naive_loop(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ci = rng.random_range(1..4);
        let co = rng.random_range(1..4);
        let k = rng.random_range(1..6);
        let s = rng.random_range(1..3);
        let p = rng.random_range(0..3);
        let t = rng.random_range(k..k + 12);
        let x = rand_tensor(&mut rng, &[ci, t]);
        let w = rand_tensor(&mut rng, &[co, ci, k]);
        let mut tape = Tape::new();
        let xv = tape.constant(&x).unwrap();
        let wv = tape.constant(&w).unwrap();
        let y = tape.conv1d(xv, wv, None, s, p).unwrap();
        let want = naive_conv(x.data(), w.data(), ci, t, co, k, s, p);
        prop_assert_eq!(tape.shape(y)[1], (t + 2 * p - k) / s + 1);
        for (a, b) in tape.value(y).data().iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv1d_stride2_length_is_ceil_half(t in 7usize..300) {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[1, t])).unwrap();
        let w = tape.constant(&Tensor::zeros(&[1, 1, 7])).unwrap();
        let y = tape.conv1d(x, w, None, 2, 3).unwrap();
        prop_assert_eq!(tape.shape(y)[1], t.div_ceil(2));
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), scale in 0.0f64..500.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[3, 5, 4]);
        let scaled: Vec<f64> = x.data().iter().map(|v| v * scale).collect();
        let x = Tensor::new(vec![3, 5, 4], scaled).unwrap();
        for axis in 0..3 {
            let mut tape = Tape::new();
            let v = tape.constant(&x).unwrap();
            let y = tape.softmax(v, axis).unwrap();
            let d = tape.value(y).data();
            let shape = [3usize, 5, 4];
            let inner: usize = shape[axis + 1..].iter().product();
            let len = shape[axis];
            let outer: usize = shape[..axis].iter().product();
            for o in 0..outer {
                for j in 0..inner {
                    let s: f64 = (0..len).map(|i| d[(o * len + i) * inner + j]).sum();
                    prop_assert!((s - 1.0).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn layer_norm_statistics(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[4, 9]);
        let mut tape = Tape::new();
        let v = tape.constant(&x).unwrap();
        let y = tape.layer_norm(v, 1, 1e-12).unwrap();
        for row in tape.value(y).data().chunks(9) {
            let m = row.iter().sum::<f64>() / 9.0;
            let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 9.0;
            prop_assert!(m.abs() <= 1e-9);
            prop_assert!((var - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn gradcheck_elementwise_and_reductions(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[2, 3]);
        let b = rand_tensor(&mut rng, &[2, 3]);
        let bias = rand_tensor(&mut rng, &[3]);
        let s = rand_tensor(&mut rng, &[1]);
        let w: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = gradcheck(&[a, b, bias, s], |t, v| {
            let x = t.mul(v[0], v[1])?;
            let x = t.sub(x, v[1])?;
            let x = t.add_trailing(x, v[2])?;
            let x = t.mul_trailing(x, v[2])?;
            let x = t.mul_scalar(x, v[3])?;
            let x = t.affine(x, 0.7, 0.1)?;
            let g = t.gelu(x)?;
            let sg = t.sigmoid(x)?;
            let x = t.add(g, sg)?;
            let m = t.mean_axis(x, 0)?;
            let m = t.mean(m)?;
            let d = t.dot_const(x, w.clone())?;
            t.add(m, d)
        }).unwrap();
        prop_assert!(r.passed(), "{:?}", r);
    }

    #[test]
    fn gradcheck_matmul_family(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let q = rand_tensor(&mut rng, &[2, 3, 4]);
        let k = rand_tensor(&mut rng, &[2, 3, 4]);
        let w: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = gradcheck(&[a, b, q, k], |t, v| {
            let m = t.matmul(v[0], v[1])?;
            let kt = t.transpose_last2(v[3])?;
            let sc = t.bmm(v[2], kt)?;
            let p = t.softmax(sc, 2)?;
            let o = t.bmm(p, v[2])?;
            let o = t.reshape(o, &[6, 4])?;
            let o = t.narrow_rows(o, 3)?;
            let o = t.matmul(o, v[1])?;
            let both = t.add(o, m)?;
            let l1 = t.dot_const(both, w[..6].to_vec())?;
            let l2 = t.dot_const(p, w.clone())?;
            t.add(l1, l2)
        }).unwrap();
        prop_assert!(r.passed(), "{:?}", r);
    }

    #[test]
    fn gradcheck_heads_and_norms(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, 3, 4]);
        let w: Vec<f64> = (0..36).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = gradcheck(&[x], |t, v| {
            let h = t.split_heads(v[0], 2)?;
            let sc = t_scores(t, h)?;
            let h = t.banded_softmax(sc, 1)?;
            let h = t.layer_norm(h, 2, 1e-5)?;
            let h = t.layer_norm(h, 0, 1e-5)?;
            let m = t.merge_heads(h, 2)?;
            t.dot_const(m, w.clone())
        }).unwrap();
        prop_assert!(r.passed(), "{:?}", r);
    }

    #[test]
    fn gradcheck_conv_pool_batchnorm(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, 2, 9]);
        let w = rand_tensor(&mut rng, &[3, 2, 3]);
        let bias = rand_tensor(&mut rng, &[3]);
        let gamma = rand_tensor(&mut rng, &[3]);
        let beta = rand_tensor(&mut rng, &[3]);
        let w2 = rand_tensor(&mut rng, &[2, 3, 3]);
        let mw: Vec<f64> = (0..2 * 2 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let inputs = [x, w, bias, gamma, beta, w2];
        let (pre_relu, pre_pool) = conv_pool_stages(&inputs);
        prop_assume!(pre_relu.iter().all(|v| v.abs() > KINK_MARGIN));
        prop_assume!(pool_gaps(&pre_pool, 5, 3).into_iter().all(|g| g > KINK_MARGIN));
        let r = gradcheck(&inputs, |t, v| {
            let y = t.conv1d(v[0], v[1], Some(v[2]), 1, 1)?;
            let (y, _) = t.batch_norm(y, v[3], v[4], 1e-5, None)?;
            let y = t.relu(y)?;
            let y = t.conv1d(y, v[5], None, 2, 1)?;
            let y = t.max_pool1d(y, 3, 1, 1)?;
            t.dot_const(y, mw.clone())
        }).unwrap();
        prop_assert!(r.passed(), "{:?}", r);
    }

    #[test]
    fn gradcheck_batchnorm_eval_and_losses(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, 3, 4]);
        let gamma = rand_tensor(&mut rng, &[3]);
        let beta = rand_tensor(&mut rng, &[3]);
        let logits = rand_tensor(&mut rng, &[4, 3]);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        let target: Vec<f64> = (0..24).map(|_| rng.random_range(-2.0..2.0)).collect();
        let rm = [0.1, -0.2, 0.3];
        let rv = [1.5, 0.7, 1.1];
        let r = gradcheck(&[x, gamma, beta, logits], |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5, Some((&rm, &rv)))?;
            let gp = t.global_avg_pool(y)?;
            let s = t.sum(gp)?;
            let h = t.huber(y, &target, 1.0)?;
            let ce = t.cross_entropy(v[3], &labels)?;
            let a = t.add(s, h)?;
            t.add(a, ce)
        }).unwrap();
        prop_assert!(r.passed(), "{:?}", r);
    }

    #[test]
    fn backward_is_linear(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[5]);
        let mut tape = Tape::new();
        let v = tape.input(&x, true).unwrap();
        let a = tape.gelu(v).unwrap();
        let la = tape.sum(a).unwrap();
        let b = tape.sigmoid(v).unwrap();
        let b = tape.mul(b, v).unwrap();
        let lb = tape.mean(b).unwrap();
        let l = tape.add(la, lb).unwrap();
        let ga = tape.backward(la).unwrap();
        let gb = tape.backward(lb).unwrap();
        let gl = tape.backward(l).unwrap();
        for i in 0..5 {
            let want = ga.get(v).unwrap()[i] + gb.get(v).unwrap()[i];
            prop_assert!((gl.get(v).unwrap()[i] - want).abs() <= 1e-12);
        }
    }
}

// Self-similarity scores `h · hᵀ` on `[BH,T,d]`.
fn t_scores(t: &mut Tape, h: Var) -> Result<Var> {
    let ht = t.transpose_last2(h)?;
    t.bmm(h, ht)
}
