use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tumorseg::data::LabelMap;
use tumorseg::inference::{
    binarize, ensemble, gaussian_weights, labels_to_regions, load_prob3, postprocess_et, predict_volume, read_manifest,
    regions_to_labels, save_prob3, ProbDump, sliding_window, write_manifest, Region, RegionKind, RegionMaps, WindowConfig,
};
use tumorseg::unet::{build_network, Network, Preset, ScaleConfig};
use tumorseg::{DType, Tensor};

fn random_labels(rng: &mut ChaCha8Rng, e: [usize; 3]) -> LabelMap {
    let n = e.iter().product();
    LabelMap::new(e, (0..n).map(|_| [0u8, 1, 2, 4][rng.random_range(0..4)]).collect()).unwrap()
}

fn maps(e: [usize; 3], data: Vec<f64>, kind: RegionKind) -> RegionMaps {
    RegionMaps::new(Tensor::new(vec![3, e[0], e[1], e[2]], data, DType::F64).unwrap(), kind).unwrap()
}

#[test]
fn single_voxel_region_encoding() {
    let want = [(0u8, [0.0, 0.0, 0.0]), (1, [0.0, 1.0, 1.0]), (2, [0.0, 0.0, 1.0]), (4, [1.0, 1.0, 1.0])];
    for (label, regions) in want {
        let l = LabelMap::new([1, 1, 1], vec![label]).unwrap();
        let r = labels_to_regions(&l);
        assert_eq!(r.values().data(), &regions);
        assert_eq!(regions_to_labels(&r), l);
    }
}

#[test]
fn layered_decode_rules() {
    // one voxel per column: ET only, all zero, TC only, WT only
    let data = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
    let m = maps([1, 1, 4], data, RegionKind::Binary);
    assert_eq!(regions_to_labels(&m).data(), &[4, 0, 1, 2]);
}

fn nested(l: &LabelMap) -> bool {
    let r = labels_to_regions(l);
    let [et, tc, wt] = Region::ALL.map(|x| r.mask(x));
    (0..et.len()).all(|i| (!et[i] || tc[i]) && (!tc[i] || wt[i]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn region_round_trip(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = random_labels(&mut rng, [3, 4, 5]);
        prop_assert_eq!(regions_to_labels(&labels_to_regions(&l)), l);
    }

    #[test]
    fn arbitrary_masks_decode_nested(bits in proptest::collection::vec(any::<bool>(), 60)) {
        let m = maps([4, 5, 1], bits.iter().map(|&b| b as u8 as f64).collect(), RegionKind::Binary);
        prop_assert!(nested(&regions_to_labels(&m)));
    }

    #[test]
    fn postprocess_only_touches_small_et(seed in 0u64..100_000, keep in 0usize..400) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = random_labels(&mut rng, [6, 6, 6]);
        let p = postprocess_et(&l, keep);
        let lr = labels_to_regions(&l);
        let pr = labels_to_regions(&p);
        prop_assert_eq!(lr.mask(Region::Wt), pr.mask(Region::Wt));
        prop_assert_eq!(lr.mask(Region::Tc), pr.mask(Region::Tc));
        for (a, b) in l.data().iter().zip(p.data()) {
            prop_assert!(a == b || (*a == 4 && *b == 1));
        }
    }
}

fn with_et(count: usize) -> LabelMap {
    let mut data = vec![2u8; 1000];
    data[..count].iter_mut().for_each(|v| *v = 4);
    LabelMap::new([10, 10, 10], data).unwrap()
}

#[test]
fn et_threshold_boundary() {
    let small = postprocess_et(&with_et(199), 200);
    assert_eq!((small.count(4), small.count(1)), (0, 199));
    let enough = with_et(200);
    assert_eq!(postprocess_et(&enough, 200), enough);
    let none = with_et(0);
    assert_eq!(postprocess_et(&none, 200), none);
}

#[test]
fn ensemble_means() {
    let e = [2, 2, 2];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let one = maps(e, (0..24).map(|_| rng.random::<f64>()).collect(), RegionKind::Probability);
    assert_eq!(ensemble(&vec![one.clone(); 5]).unwrap(), one);
    let a = maps(e, vec![0.2; 24], RegionKind::Probability);
    let b = maps(e, vec![0.8; 24], RegionKind::Probability);
    assert!(ensemble(&[a, b]).unwrap().values().data().iter().all(|&v| (v - 0.5).abs() < 1e-15));

    let many: Vec<RegionMaps> = (0..4)
        .map(|_| maps(e, (0..24).map(|_| rng.random::<f64>()).collect(), RegionKind::Probability))
        .collect();
    let m = ensemble(&many).unwrap();
    for i in 0..24 {
        let mut s = 0.0;
        for k in &many {
            s += k.values().data()[i];
        }
        assert!((m.values().data()[i] - s / 4.0).abs() < 1e-12);
    }
    assert!(ensemble(&[]).is_err());
    let other = maps([1, 2, 4], vec![0.5; 24], RegionKind::Probability);
    assert!(ensemble(&[one, other]).is_err());
}

#[test]
fn binarize_convention() {
    let e = [1, 1, 2];
    let m = maps(e, vec![0.5, 0.49, 0.51, 0.0, 1.0, 0.4999], RegionKind::Probability);
    let b = binarize(&m, 0.5);
    assert_eq!(b.values().data(), &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    assert_eq!(binarize(&b, 0.5), b);
    let low = maps(e, vec![0.49; 6], RegionKind::Probability);
    assert!(binarize(&low, 0.5).values().data().iter().all(|&v| v == 0.0));
}

fn tiny_net(seed: u64) -> Network {
    let scale = ScaleConfig {
        patch: 8,
        levels: 3,
        ..ScaleConfig::desk()
    };
    Network::new(build_network(Preset::BlGn, &scale).unwrap(), seed, DType::F64).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, e: [usize; 3]) -> Tensor {
    let n: usize = 4 * e.iter().product::<usize>();
    Tensor::new(vec![4, e[0], e[1], e[2]], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), DType::F64).unwrap()
}

#[test]
fn one_patch_volume_equals_single_forward() {
    let net = tiny_net(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = random_image(&mut rng, [8, 8, 8]);
    let cfg = WindowConfig {
        step_fraction: 1.0,
        ..WindowConfig::default()
    };
    let p = predict_volume(&net, &img, &cfg).unwrap();
    let direct = net.predict(&img.reshape(&[1, 4, 8, 8, 8]).unwrap()).unwrap();
    assert_eq!(p.data(), direct.data());
}

#[test]
fn constant_field_is_invariant_to_tiling() {
    let img = Tensor::full(&[4, 13, 9, 20], 0.3, DType::F64).unwrap();
    let constant = |w: &Tensor| {
        let s = w.shape();
        Tensor::full(&[3, s[1], s[2], s[3]], 0.7, DType::F64)
    };
    for step in [0.25, 0.5, 0.8, 1.0] {
        let cfg = WindowConfig {
            step_fraction: step,
            ..WindowConfig::default()
        };
        let out = sliding_window(&img, [8, 8, 8], &cfg, constant).unwrap();
        assert_eq!(out.shape(), &[3, 13, 9, 20]);
        assert!(out.data().iter().all(|v| (v - 0.7).abs() < 1e-6));
    }
}

#[test]
fn two_window_blend_matches_hand_computation() {
    let net = tiny_net(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // extent 12 along x: windows start at 0 and 4
    let img = random_image(&mut rng, [12, 8, 8]);
    let cfg = WindowConfig::default();
    let out = predict_volume(&net, &img, &cfg).unwrap();
    let w = gaussian_weights([8, 8, 8], cfg.sigma_fraction);
    let window = |x0: usize| {
        let mut d = Vec::new();
        for c in 0..4 {
            for x in x0..x0 + 8 {
                for yz in 0..64 {
                    d.push(img.data()[(c * 12 + x) * 64 + yz]);
                }
            }
        }
        net.predict(&Tensor::new(vec![1, 4, 8, 8, 8], d, DType::F64).unwrap()).unwrap()
    };
    let (a, b) = (window(0), window(4));
    for c in 0..3 {
        for x in 0..12 {
            for yz in 0..64 {
                let (mut num, mut den) = (0.0, 0.0);
                if x < 8 {
                    let i = x * 64 + yz;
                    num += w[i] * a.data()[c * 512 + i];
                    den += w[i];
                }
                if x >= 4 {
                    let i = (x - 4) * 64 + yz;
                    num += w[i] * b.data()[c * 512 + i];
                    den += w[i];
                }
                assert!((out.data()[(c * 12 + x) * 64 + yz] - num / den).abs() < 1e-10);
            }
        }
    }
    assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));

    let parallel = WindowConfig { workers: 3, ..cfg };
    assert_eq!(predict_volume(&net, &img, &parallel).unwrap(), out);
}

#[test]
fn small_volume_is_padded() {
    let net = tiny_net(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = random_image(&mut rng, [5, 8, 7]);
    let out = predict_volume(&net, &img, &WindowConfig::default()).unwrap();
    assert_eq!(out.shape(), &[3, 5, 8, 7]);
}

#[test]
fn prob3_and_manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = maps([2, 3, 4], (0..72).map(|_| rng.random::<f32>() as f64).collect(), RegionKind::Probability);
    let m = RegionMaps::new(m.values().to_dtype(DType::F32), RegionKind::Probability).unwrap();
    let paths: Vec<_> = (0..2).map(|i| dir.path().join(format!("fold{i}/case.prob3"))).collect();
    let dump = ProbDump {
        case_id: "case_7".into(),
        spacing: [1.0, 0.5, 2.0],
        maps: m,
    };
    for p in &paths {
        save_prob3(&dump, p).unwrap();
    }
    assert_eq!(load_prob3(&paths[0]).unwrap(), dump);
    let manifest = dir.path().join("manifest.txt");
    write_manifest(&manifest, &paths).unwrap();
    assert_eq!(read_manifest(&manifest).unwrap(), paths);
    assert!(std::fs::read_to_string(&manifest).unwrap().contains("fold0/case.prob3"));
}
