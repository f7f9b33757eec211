use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tumorseg::data::LabelMap;
use tumorseg::metrics::{aggregate_report, dice, evaluate_case, hd95, surface, CaseMetrics};

/// All-pairs reference: surface voxels found by scanning neighbors, every
/// directed distance computed explicitly.
fn brute_hd95(p: &[bool], g: &[bool], e: [usize; 3], s: [f64; 3], sentinel: f64) -> f64 {
    let pe = !p.iter().any(|&v| v);
    let ge = !g.iter().any(|&v| v);
    if pe && ge {
        return 0.0;
    }
    if pe || ge {
        return sentinel;
    }
    let coords = |m: &[bool]| -> Vec<[f64; 3]> {
        let mut out = Vec::new();
        for x in 0..e[0] as i64 {
            for y in 0..e[1] as i64 {
                for z in 0..e[2] as i64 {
                    let at = |x: i64, y: i64, z: i64| -> bool {
                        x >= 0 && y >= 0 && z >= 0 && x < e[0] as i64 && y < e[1] as i64 && z < e[2] as i64
                            && m[((x as usize) * e[1] + y as usize) * e[2] + z as usize]
                    };
                    if at(x, y, z)
                        && [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                            .iter()
                            .any(|(dx, dy, dz)| !at(x + dx, y + dy, z + dz))
                    {
                        out.push([x as f64 * s[0], y as f64 * s[1], z as f64 * s[2]]);
                    }
                }
            }
        }
        out
    };
    let (a, b) = (coords(p), coords(g));
    let directed = |from: &[[f64; 3]], to: &[[f64; 3]]| {
        let mut d: Vec<f64> = from
            .iter()
            .map(|u| {
                to.iter()
                    .map(|v| ((u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2) + (u[2] - v[2]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        d.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let k = (0.95 * d.len() as f64).ceil() as usize;
        d[k.max(1) - 1]
    };
    directed(&a, &b).max(directed(&b, &a))
}

fn brute_dice(p: &[bool], g: &[bool]) -> f64 {
    let mut i = 0;
    let mut sp = 0;
    let mut sg = 0;
    for k in 0..p.len() {
        if p[k] {
            sp += 1;
        }
        if g[k] {
            sg += 1;
        }
        if p[k] && g[k] {
            i += 1;
        }
    }
    if sp + sg == 0 {
        1.0
    } else {
        2.0 * i as f64 / (sp + sg) as f64
    }
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize, density: f64) -> Vec<bool> {
    (0..n).map(|_| rng.random::<f64>() < density).collect()
}

#[test]
fn dice_examples() {
    let a = vec![true, false, true, true];
    assert_eq!(dice(&a, &a).unwrap(), 1.0);
    assert_eq!(dice(&[true, false], &[false, true]).unwrap(), 0.0);
    assert_eq!(dice(&[true, true, false], &[false, true, true]).unwrap(), 0.5);
    assert!(dice(&[true], &[true, false]).is_err());
}

#[test]
fn hd95_examples() {
    let e = [7, 1, 1];
    let mut p = vec![false; 7];
    let mut g = vec![false; 7];
    p[1] = true;
    g[4] = true;
    assert_eq!(hd95(&p, &g, e, [1.0; 3], 99.0).unwrap(), 3.0);
    assert_eq!(brute_hd95(&p, &g, e, [1.0; 3], 99.0), 3.0);
    assert_eq!(hd95(&p, &p, e, [1.0; 3], 99.0).unwrap(), 0.0);
    assert_eq!(hd95(&[false; 7], &[false; 7], e, [1.0; 3], 99.0).unwrap(), 0.0);
    assert_eq!(hd95(&p, &[false; 7], e, [1.0; 3], 99.0).unwrap(), 99.0);
    assert_eq!(hd95(&p, &g, e, [2.0, 1.0, 1.0], 99.0).unwrap(), 6.0);
}

#[test]
fn moving_prediction_away_never_shrinks_hd95() {
    let e = [12, 1, 1];
    let mut g = vec![false; 12];
    g[0] = true;
    let mut prev = 0.0;
    for d in 0..12 {
        let mut p = vec![false; 12];
        p[d] = true;
        let h = hd95(&p, &g, e, [1.0; 3], 1e9).unwrap();
        assert!(h >= prev);
        assert_eq!(h, d as f64);
        prev = h;
    }
}

#[test]
fn two_hundred_random_pairs_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in 0..200 {
        let e = [rng.random_range(1..=12), rng.random_range(1..=12), rng.random_range(1..=12)];
        let n = e.iter().product();
        let spacing = if k % 2 == 0 { [1.0; 3] } else { [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)] };
        let (dp, dg) = (rng.random_range(0.0..0.5), rng.random_range(0.0..0.5));
        let p = random_mask(&mut rng, n, dp);
        let g = random_mask(&mut rng, n, dg);
        assert_eq!(dice(&p, &g).unwrap(), brute_dice(&p, &g));
        let h = hd95(&p, &g, e, spacing, 500.0).unwrap();
        let b = brute_hd95(&p, &g, e, spacing, 500.0);
        assert!((h - b).abs() < 1e-9, "pair {k}: {h} vs {b}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_symmetric(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = [5, 6, 4];
        let p = random_mask(&mut rng, 120, 0.3);
        let g = random_mask(&mut rng, 120, 0.3);
        let d = dice(&p, &g).unwrap();
        prop_assert_eq!(d, dice(&g, &p).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        let h = hd95(&p, &g, e, [1.0; 3], 50.0).unwrap();
        prop_assert_eq!(h, hd95(&g, &p, e, [1.0; 3], 50.0).unwrap());
        prop_assert!(h >= 0.0);
        prop_assert_eq!(h == 0.0, surface(&p, e) == surface(&g, e));
    }
}

fn labels(e: [usize; 3], data: Vec<u8>) -> LabelMap {
    LabelMap::new(e, data).unwrap()
}

#[test]
fn evaluate_case_conventions() {
    let e = [4, 4, 4];
    let mut gt = vec![0u8; 64];
    gt[21] = 2;
    gt[22] = 1;
    gt[25] = 2;
    let gt = labels(e, gt);
    let same = evaluate_case("a", &gt, &gt, [1.0; 3], None).unwrap();
    assert_eq!((same.dice, same.hd95), ([1.0; 3], [0.0; 3]));

    let mut pred = gt.data().to_vec();
    for i in [40, 41, 42, 43, 44] {
        pred[i] = 4;
    }
    let m = evaluate_case("b", &labels(e, pred), &gt, [1.0; 3], None).unwrap();
    assert_eq!(m.dice[0], 0.0);
    assert_eq!(m.hd95[0], (3.0f64 * 16.0).sqrt());
}

#[test]
fn report_aggregation() {
    let a = CaseMetrics {
        case_id: "a".into(),
        dice: [0.5, 0.75, 1.0],
        hd95: [1.0, 2.0, 3.0],
    };
    let b = CaseMetrics {
        case_id: "b".into(),
        dice: [0.25, 0.25, 0.5],
        hd95: [3.0, 4.0, 5.0],
    };
    let single = aggregate_report(std::slice::from_ref(&a)).unwrap();
    assert_eq!((single.mean_dice, single.mean_hd95), (a.dice, a.hd95));
    let r = aggregate_report(&[a, b]).unwrap();
    assert_eq!(r.mean_dice, [0.375, 0.5, 0.75]);
    assert_eq!(r.mean_hd95, [2.0, 3.0, 4.0]);
    assert!((r.average_dice() - (0.375 + 0.5 + 0.75) / 3.0).abs() < 1e-12);
    let table = r.to_table();
    assert!(table.lines().next().unwrap().split_whitespace().eq(["ET", "TC", "WT", "Average"]));
    assert!(table.contains("Mean Dice (%)"));
    let csv = r.to_csv();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.contains("b,WT,0.5,5"));
    assert!(aggregate_report(&[]).is_err());
}
