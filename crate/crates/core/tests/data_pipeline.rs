use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tumorseg::data::{
    augment, crop_nonzero, load_label_volume, load_volume, make_folds, preprocess, sample_patch, save_label_volume,
    save_volume, spatial_transform, synth_phantom, uncrop_labels, zscore_normalize, AugmentConfig, LabelMap,
    LabelVolume, SpatialParams, VolumeCase, ED, ET, NCR,
};
use tumorseg::{DType, Error, Tensor};

fn case_from(extents: [usize; 3], image: Vec<f64>, labels: Vec<u8>) -> VolumeCase {
    let [x, y, z] = extents;
    VolumeCase::new(
        "case",
        Tensor::new(vec![4, x, y, z], image, DType::F32).unwrap(),
        LabelMap::new(extents, labels).unwrap(),
        [1.0; 3],
    )
    .unwrap()
}

fn random_case(rng: &mut ChaCha8Rng, extents: [usize; 3]) -> VolumeCase {
    let n: usize = extents.iter().product();
    let image = (0..4 * n).map(|_| rng.random_range(-2.0..3.0)).collect();
    let labels = (0..n).map(|_| [0u8, 1, 2, 4][rng.random_range(0..4)]).collect();
    case_from(extents, image, labels)
}

#[test]
fn volume_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut case = random_case(&mut rng, [5, 6, 7]);
    case.case_id = "BraTS_0001".into();
    case.spacing = [1.0, 0.9375, 1.2];
    let p = dir.path().join("a.vol4");
    save_volume(&case, &p).unwrap();
    let back = load_volume(&p).unwrap();
    assert_eq!(back, case);
    save_volume(&back, &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    save_volume(&load_volume(&p).unwrap(), &p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), bytes);

    let lv = LabelVolume {
        case_id: "pred".into(),
        labels: case.labels.clone(),
        spacing: case.spacing,
    };
    let q = dir.path().join("b.vol4");
    save_label_volume(&lv, &q).unwrap();
    assert_eq!(load_label_volume(&q).unwrap(), lv);
    assert!(load_volume(&q).is_err());
    assert_eq!(load_label_volume(&p).unwrap().labels, case.labels);
}

#[test]
fn full_scale_extents_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let e = [240, 240, 155];
    let n: usize = e.iter().product();
    let mut labels = vec![0u8; n];
    labels[n / 2] = 4;
    let case = case_from(e, vec![0.0; 4 * n], labels);
    let p = dir.path().join("big.vol4");
    save_volume(&case, &p).unwrap();
    let back = load_volume(&p).unwrap();
    assert_eq!(back.extents(), e);
    assert_eq!(back.labels.count(4), 1);
}

#[test]
fn label_three_in_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let case = case_from([2, 2, 2], vec![1.0; 32], vec![0; 8]);
    let p = dir.path().join("c.vol4");
    save_volume(&case, &p).unwrap();
    let mut bytes = std::fs::read(&p).unwrap();
    let last = bytes.len() - 3;
    bytes[last] = 3;
    std::fs::write(&p, &bytes).unwrap();
    match load_volume(&p) {
        Err(Error::InvalidLabel { value, index }) => assert_eq!((value, index), (3, 5)),
        other => panic!("expected label rejection, got {other:?}"),
    }
}

#[test]
fn malformed_headers_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let case = case_from([2, 2, 2], vec![1.0; 32], vec![0; 8]);
    let p = dir.path().join("d.vol4");
    save_volume(&case, &p).unwrap();
    let good = std::fs::read(&p).unwrap();
    let text = String::from_utf8_lossy(&good).to_string();
    for (from, to) in [("VOL4", "VOL5"), ("extents=2,2,2", "extents=2,2"), ("version=1", "version=9"), ("labels=0,1,2,4", "labels=0,1,2")] {
        let pos = text.find(from).unwrap();
        let mut bytes = good[..pos].to_vec();
        bytes.extend_from_slice(to.as_bytes());
        bytes.extend_from_slice(&good[pos + from.len()..]);
        std::fs::write(&p, &bytes).unwrap();
        assert!(load_volume(&p).is_err(), "{to}");
    }
    std::fs::write(&p, &good[..good.len() - 1]).unwrap();
    assert!(load_volume(&p).is_err());
}

#[test]
fn crop_to_constructed_content() {
    let e = [12, 12, 12];
    let n = 12 * 12 * 12;
    let mut image = vec![0.0; 4 * n];
    for x in 4..8 {
        for y in 4..8 {
            for z in 4..8 {
                image[2 * n + (x * 12 + y) * 12 + z] = 1.5;
            }
        }
    }
    let case = case_from(e, image, vec![0; n]);
    let (cropped, bbox) = crop_nonzero(&case).unwrap();
    assert_eq!(cropped.extents(), [4, 4, 4]);
    assert_eq!(bbox.start, [4, 4, 4]);
    assert!(cropped.image.data().iter().skip(2 * 64).take(64).all(|&v| v == 1.5));

    let (again, b2) = crop_nonzero(&cropped).unwrap();
    assert_eq!(again, cropped);
    assert_eq!(b2.start, [0, 0, 0]);

    let empty = case_from([3, 3, 3], vec![0.0; 108], vec![0; 27]);
    assert!(matches!(crop_nonzero(&empty), Err(Error::EmptyVolume)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn uncrop_restores_sparse_labels(seed in 0u64..10_000, ex in 3usize..9, ey in 3usize..9, ez in 3usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = [ex, ey, ez];
        let n = ex * ey * ez;
        let mut image = vec![0.0; 4 * n];
        let mut labels = vec![0u8; n];
        for _ in 0..rng.random_range(1..6) {
            let i = rng.random_range(0..n);
            image[rng.random_range(0..4) * n + i] = rng.random_range(0.5..2.0);
            labels[i] = [1u8, 2, 4][rng.random_range(0..3)];
        }
        let case = case_from(e, image, labels);
        let (cropped, bbox) = crop_nonzero(&case).unwrap();
        prop_assert_eq!(uncrop_labels(&cropped.labels, &bbox).unwrap(), case.labels);
    }

    #[test]
    fn folds_partition(nc in 1usize..40, k in 1usize..8, seed in 0u64..1000) {
        let ids: Vec<String> = (0..nc).map(|i| format!("c{i:03}")).collect();
        let split = make_folds(&ids, k, seed);
        if nc < k {
            prop_assert!(split.is_err());
            return Ok(());
        }
        let split = split.unwrap();
        prop_assert_eq!(split.folds.len(), k);
        let mut all: Vec<String> = split.folds.concat();
        all.sort();
        prop_assert_eq!(all, ids.clone());
        let sizes: Vec<usize> = split.folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(make_folds(&ids, k, seed).unwrap(), split);
    }

    #[test]
    fn spatial_augmentation_preserves_label_alphabet(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = random_case(&mut rng, [7, 6, 5]);
        let cfg = AugmentConfig {
            p_rotation: 1.0,
            p_scale: 1.0,
            p_elastic: 1.0,
            ..AugmentConfig::default()
        };
        let (_, labels) = augment(&case.image, &case.labels, &mut rng, &cfg).unwrap();
        prop_assert!(labels.data().iter().all(|v| [0u8, 1, 2, 4].contains(v)));
    }
}

#[test]
fn zscore_matches_flat_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut case = random_case(&mut rng, [8, 8, 8]);
    case.image = case.image.to_dtype(DType::F64);
    let z = zscore_normalize(&case).unwrap();
    let n = 512;
    for c in 0..4 {
        let src = &case.image.data()[c * n..(c + 1) * n];
        let mut mean = 0.0;
        for v in src {
            mean += v;
        }
        mean /= n as f64;
        let mut var = 0.0;
        for v in src {
            var += (v - mean) * (v - mean);
        }
        let std = (var / n as f64).sqrt();
        for i in 0..n {
            assert!((z.image.data()[c * n + i] - (src[i] - mean) / std).abs() < 1e-12);
        }
        let out = &z.image.data()[c * n..(c + 1) * n];
        let m = out.iter().sum::<f64>() / n as f64;
        let s = (out.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
        assert!(m.abs() < 1e-10 && (s - 1.0).abs() < 1e-10);
    }
    let twice = zscore_normalize(&z).unwrap();
    assert!(twice.image.max_abs_diff(&z.image) < 1e-12);

    let mut flat = case.clone();
    for v in &mut flat.image.data_mut()[..n] {
        *v = 3.0;
    }
    assert!(matches!(zscore_normalize(&flat), Err(Error::DegenerateChannel { channel: 0 })));
}

#[test]
fn preprocess_is_idempotent() {
    let mut case = synth_phantom(3, [20, 20, 20]).unwrap();
    case.image = case.image.to_dtype(DType::F64);
    let (once, _) = preprocess(&case).unwrap();
    let twice = zscore_normalize(&once).unwrap();
    assert!(twice.image.max_abs_diff(&once.image) < 1e-10);
}

#[test]
fn zero_probability_augmentation_is_passthrough() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let case = random_case(&mut rng, [6, 6, 6]);
    let (img, lab) = augment(&case.image, &case.labels, &mut rng, &AugmentConfig::none()).unwrap();
    assert_eq!(img, case.image);
    assert_eq!(lab, case.labels);

    let bad = AugmentConfig {
        gamma_range: (0.0, 1.5),
        ..AugmentConfig::default()
    };
    assert!(augment(&case.image, &case.labels, &mut rng, &bad).is_err());
}

#[test]
fn quarter_turn_about_z_matches_permutation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (nx, nz) = (7, 3);
    let case = random_case(&mut rng, [nx, nx, nz]);
    let params = SpatialParams {
        angles: [0.0, 0.0, std::f64::consts::FRAC_PI_2],
        ..SpatialParams::identity()
    };
    let (img, lab) = spatial_transform(&case.image, &case.labels, &params).unwrap();
    let n = nx * nx * nz;
    for x in 0..nx {
        for y in 0..nx {
            for z in 0..nz {
                assert_eq!(lab.get(x, y, z), case.labels.get(nx - 1 - y, x, z));
                let src = ((nx - 1 - y) * nx + x) * nz + z;
                let dst = (x * nx + y) * nz + z;
                assert!((img.data()[n + dst] - case.image.data()[n + src]).abs() < 1e-5);
            }
        }
    }
    let (_, ident) = spatial_transform(&case.image, &case.labels, &SpatialParams::identity()).unwrap();
    assert_eq!(ident, case.labels);
}

fn one_tumor_voxel_case() -> VolumeCase {
    let e = [20, 18, 16];
    let n: usize = e.iter().product();
    let mut labels = vec![0u8; n];
    labels[(17 * 18 + 2) * 16 + 9] = ET;
    case_from(e, vec![1.0; 4 * n], labels)
}

#[test]
fn forced_patches_contain_the_tumor_voxel() {
    let case = one_tumor_voxel_case();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let p = sample_patch(&case, &mut rng, [8, 8, 8], 1.0).unwrap();
        assert!(p.forced_foreground);
        assert_eq!(p.labels.count(ET), 1);
        assert_eq!(p.image.shape(), &[4, 8, 8, 8]);
    }
}

#[test]
fn patch_equal_to_volume_is_whole_volume() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let case = random_case(&mut rng, [6, 5, 4]);
    for fg in [0.0, 1.0] {
        let p = sample_patch(&case, &mut rng, [6, 5, 4], fg).unwrap();
        assert_eq!(p.image, case.image);
        assert_eq!(p.labels, case.labels);
        assert_eq!(p.origin, [0, 0, 0]);
    }
}

#[test]
fn small_volumes_are_zero_padded() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let case = random_case(&mut rng, [3, 3, 3]);
    let p = sample_patch(&case, &mut rng, [5, 5, 5], 0.0).unwrap();
    let nonzero = p.image.data().iter().filter(|&&v| v != 0.0).count();
    assert_eq!(nonzero, case.image.data().iter().filter(|&&v| v != 0.0).count());
}

#[test]
fn foreground_rate_matches_probability() {
    let case = one_tumor_voxel_case();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let draws = 10_000;
    let forced = (0..draws)
        .filter(|_| sample_patch(&case, &mut rng, [4, 4, 4], 1.0 / 3.0).unwrap().forced_foreground)
        .count();
    let rate = forced as f64 / draws as f64;
    assert!((rate - 1.0 / 3.0).abs() < 0.02, "{rate}");
}

#[test]
fn fold_examples() {
    let ten: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
    let split = make_folds(&ten, 5, 42).unwrap();
    assert!(split.folds.iter().all(|f| f.len() == 2));
    assert_eq!(make_folds(&ten, 5, 42).unwrap(), split);
    let (train, val) = split.train_val(1).unwrap();
    assert_eq!((train.len(), val.len()), (8, 2));
    assert!(val.iter().all(|v| !train.contains(v)));
}

#[test]
fn phantoms_nest_and_vary_with_seed() {
    let a = synth_phantom(1, [24, 24, 24]).unwrap();
    let b = synth_phantom(2, [24, 24, 24]).unwrap();
    assert_ne!(a.labels, b.labels);
    assert_eq!(synth_phantom(1, [24, 24, 24]).unwrap(), a);
    for case in [&a, &b] {
        assert!(case.labels.data().iter().all(|v| [0u8, 1, 2, 4].contains(v)));
        assert!(case.labels.count(NCR) > 0 && case.labels.count(ED) > 0 && case.labels.count(ET) > 0);
        // WT extent: bounding box of all tumor labels; ED must reach it on every side
        let e = case.extents();
        let mut lo = [usize::MAX; 3];
        let mut hi = [0; 3];
        let mut ed_lo = [usize::MAX; 3];
        let mut ed_hi = [0; 3];
        for x in 0..e[0] {
            for y in 0..e[1] {
                for z in 0..e[2] {
                    let v = case.labels.get(x, y, z);
                    let p = [x, y, z];
                    if v != 0 {
                        for a in 0..3 {
                            lo[a] = lo[a].min(p[a]);
                            hi[a] = hi[a].max(p[a]);
                        }
                    }
                    if v == ED {
                        for a in 0..3 {
                            ed_lo[a] = ed_lo[a].min(p[a]);
                            ed_hi[a] = ed_hi[a].max(p[a]);
                        }
                    }
                    // tumor lies inside the brain
                    if v != 0 {
                        assert!((0..4).all(|c| case.image.data()[c * e.iter().product::<usize>() + case.labels.index(x, y, z)] != 0.0));
                    }
                }
            }
        }
        assert_eq!((lo, hi), (ed_lo, ed_hi));
    }
}
