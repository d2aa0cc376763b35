use proptest::prelude::*;
use tsxplain_core::fusion::{
    dtw_align, fuse, minmax_normalize, regions_from_mask, smooth_moving_average, threshold_mask, threshold_regions,
    upsample_linear, FusionConfig, Projection, Strategy as Fusion,
};
use tsxplain_core::saliency::{Heatmap, Source};

fn grid(t: usize, c: usize) -> impl Strategy<Value = Heatmap> {
    prop::collection::vec(0.0f64..10.0, t * c).prop_map(move |v| Heatmap::new(t, c, v, Source::Resnet).unwrap())
}

/// All monotone lattice paths from (0,0) to (n-1,m-1) with unit steps.
fn all_paths(n: usize, m: usize) -> Vec<Vec<(usize, usize)>> {
    fn go(i: usize, j: usize, n: usize, m: usize, cur: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        cur.push((i, j));
        if i == n - 1 && j == m - 1 {
            out.push(cur.clone());
        } else {
            if i + 1 < n && j + 1 < m {
                go(i + 1, j + 1, n, m, cur, out);
            }
            if i + 1 < n {
                go(i + 1, j, n, m, cur, out);
            }
            if j + 1 < m {
                go(i, j + 1, n, m, cur, out);
            }
        }
        cur.pop();
    }
    let mut out = Vec::new();
    go(0, 0, n, m, &mut Vec::new(), &mut out);
    out
}

fn path_cost(a: &[f64], b: &[f64], p: &[(usize, usize)]) -> f64 {
    p.iter().map(|&(i, j)| (a[i] - b[j]).abs()).sum()
}

/// Runs of `mask` per channel, merged across gaps of at most `gap` cells.
fn brute_runs(mask: &[bool], t: usize, c: usize, gap: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for ch in 0..c {
        let on: Vec<usize> = (0..t).filter(|&i| mask[i * c + ch]).collect();
        let mut k = 0;
        while k < on.len() {
            let s = on[k];
            let mut e = s;
            while k + 1 < on.len() && on[k + 1] - e - 1 <= gap {
                k += 1;
                e = on[k];
            }
            out.push((ch, s, e));
            k += 1;
        }
    }
    out
}

#[test]
fn dtw_matches_exhaustive_enumeration_on_tiny_inputs() {
    let a = [0.0, 0.0, 1.0];
    let b = [0.0, 1.0];
    let best = all_paths(3, 2).iter().map(|p| path_cost(&a, &b, p)).fold(f64::INFINITY, f64::min);
    assert_eq!(best, 0.0);
    assert_eq!(dtw_align(&a, &b).unwrap().cost, best);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn upsample_keeps_monotone_input_monotone(steps in prop::collection::vec(0.0f64..3.0, 1..12), target in 1usize..60) {
        let v: Vec<f64> = steps.iter().scan(0.0, |acc, s| { *acc += s; Some(*acc) }).collect();
        let up = upsample_linear(&v, target).unwrap();
        prop_assert_eq!(up.len(), target);
        for w in up.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12);
        }
        let (lo, hi) = (v[0], v[v.len() - 1]);
        prop_assert!(up.iter().all(|x| *x >= lo - 1e-12 && *x <= hi + 1e-12));
        if target == v.len() {
            prop_assert_eq!(up, v);
        }
    }

    #[test]
    fn dtw_is_optimal_and_symmetric(a in prop::collection::vec(-2.0f64..2.0, 1..5), b in prop::collection::vec(-2.0f64..2.0, 1..5)) {
        let ab = dtw_align(&a, &b).unwrap();
        let ba = dtw_align(&b, &a).unwrap();
        let best = all_paths(a.len(), b.len()).iter().map(|p| path_cost(&a, &b, p)).fold(f64::INFINITY, f64::min);
        prop_assert!((ab.cost - best).abs() < 1e-12);
        prop_assert!((ab.cost - ba.cost).abs() < 1e-12);
        let transposed: Vec<(usize, usize)> = ba.path.iter().map(|&(i, j)| (j, i)).collect();
        prop_assert!((path_cost(&a, &b, &transposed) - ab.cost).abs() < 1e-12);
        prop_assert_eq!(ab.path[0], (0, 0));
        prop_assert_eq!(*ab.path.last().unwrap(), (a.len() - 1, b.len() - 1));
        for w in ab.path.windows(2) {
            let (di, dj) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            prop_assert!(di <= 1 && dj <= 1 && di + dj >= 1);
        }
        prop_assert_eq!(ab.warped.len(), b.len());
    }

    #[test]
    fn dtw_cost_zero_for_restepped_copies(v in prop::collection::vec(-2.0f64..2.0, 1..8), reps in prop::collection::vec(1usize..4, 8)) {
        let stretched: Vec<f64> = v.iter().zip(&reps).flat_map(|(x, r)| std::iter::repeat_n(*x, *r)).collect();
        prop_assert_eq!(dtw_align(&stretched, &v).unwrap().cost, 0.0);
    }

    #[test]
    fn fuse_is_pointwise_monotone(
        hr in grid(6, 2), ht in grid(6, 2), cell in 0usize..12, bump in 0.0f64..5.0,
        which in 0usize..3, alpha in 0.0f64..=1.0, w_r in 0.0f64..2.0, w_t in 0.0f64..2.0, bias in -1.0f64..1.0,
    ) {
        let strategy = [Fusion::Multiplicative, Fusion::Weighted, Fusion::Learned][which];
        let cfg = FusionConfig { strategy, alpha, projection: Projection { w_r, w_t, bias }, ..FusionConfig::default() };
        let base = fuse(&hr, &ht, &cfg).unwrap();
        let mut hr2 = hr.clone();
        hr2.values[cell] += bump;
        let mut ht2 = ht.clone();
        ht2.values[cell] += bump;
        for up in [fuse(&hr2, &ht, &cfg).unwrap(), fuse(&hr, &ht2, &cfg).unwrap()] {
            prop_assert!(up.values[cell] >= base.values[cell]);
            prop_assert!(up.values.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn smoothing_stays_within_input_range(h in grid(15, 3), half in 0usize..7) {
        let s = smooth_moving_average(&h, 2 * half + 1).unwrap();
        let lo = h.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = h.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s.values.iter().all(|v| *v >= lo && *v <= hi));
    }

    #[test]
    fn normalized_thresholding_ignores_positive_affine_rescaling(h in grid(12, 3), q in 0.05f64..0.95, a in 0.1f64..10.0, b in 0.0f64..5.0) {
        let mut scaled = h.clone();
        scaled.values.iter_mut().for_each(|v| *v = a * *v + b);
        let r1 = threshold_regions(&minmax_normalize(&h), q, 2).unwrap();
        let r2 = threshold_regions(&minmax_normalize(&scaled), q, 2).unwrap();
        let key = |r: &Vec<tsxplain_core::fusion::SalientRegion>| r.iter().map(|g| (g.channel, g.t_start, g.t_end, g.peak_time)).collect::<Vec<_>>();
        prop_assert_eq!(key(&r1), key(&r2));
    }

    #[test]
    fn regions_match_run_length_oracle(h in grid(20, 3), q in 0.05f64..0.95, gap in 0usize..4) {
        let mask = threshold_mask(&h, q).unwrap();
        let got: Vec<_> = regions_from_mask(&h, &mask, gap).iter().map(|g| (g.channel, g.t_start, g.t_end)).collect();
        prop_assert_eq!(got, brute_runs(&mask, 20, 3, gap));
        for g in regions_from_mask(&h, &mask, gap) {
            prop_assert!(g.t_start <= g.peak_time && g.peak_time <= g.t_end);
            let peak = (g.t_start..=g.t_end).map(|t| h.at(t, g.channel)).fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(g.peak_value, peak);
        }
    }

    #[test]
    fn minmax_keeps_argmax_and_unit_range(h in grid(8, 2)) {
        let n = minmax_normalize(&h);
        let argmax = |v: &[f64]| (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
        prop_assert_eq!(argmax(&n.values), argmax(&h.values));
        prop_assert!(n.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
