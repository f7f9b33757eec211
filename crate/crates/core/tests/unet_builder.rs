use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tumorseg::checkpoint;
use tumorseg::nn::{Mode, NormKind};
use tumorseg::unet::{build_network, network_gradcheck, Network, Preset, ScaleConfig};
use tumorseg::{DType, Tape, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), DType::F64).unwrap()
}

fn tiny_scale() -> ScaleConfig {
    ScaleConfig {
        patch: 8,
        levels: 3,
        ..ScaleConfig::desk()
    }
}

#[test]
fn paper_scale_channel_laws() {
    let paper = ScaleConfig::paper();
    let bl = build_network(Preset::Bl, &paper).unwrap();
    assert_eq!(bl.encoder_channels, vec![32, 64, 128, 256, 320]);
    let bll = build_network(Preset::BlL, &paper).unwrap();
    assert_eq!(bll.encoder_channels, vec![64, 128, 256, 512, 512]);
    assert_eq!(bll.decoder_channels, vec![32, 64, 128, 256]);
    assert_eq!(bl.decoder_channels, bll.decoder_channels);
    let desk = build_network(Preset::Bl, &ScaleConfig::desk()).unwrap();
    assert_eq!(desk.encoder_channels, vec![8, 16, 32, 64]);
}

#[test]
fn deep_supervision_skips_two_lowest_levels() {
    let spec = build_network(Preset::Bl, &ScaleConfig::paper()).unwrap();
    let res = spec.resolutions();
    let supervised: Vec<usize> = spec.deep_supervision_levels.iter().map(|&l| res[l][0]).collect();
    assert_eq!(supervised, vec![128, 64, 32]);
    let desk = build_network(Preset::Bl, &ScaleConfig::desk()).unwrap();
    let res = desk.resolutions();
    let supervised: Vec<usize> = desk.deep_supervision_levels.iter().map(|&l| res[l][0]).collect();
    assert_eq!(supervised, vec![32, 16]);
}

#[test]
fn attention_at_four_lower_resolutions() {
    let spec = build_network(Preset::BlAa, &ScaleConfig::paper()).unwrap();
    let res = spec.resolutions();
    let sched: Vec<(usize, usize, usize)> = spec
        .attention_levels()
        .iter()
        .map(|&(l, h, d)| (res[l][0], h, d))
        .collect();
    assert_eq!(sched, vec![(64, 4, 16), (32, 8, 32), (16, 16, 64), (8, 32, 128)]);
    assert!(build_network(Preset::Bl, &ScaleConfig::paper()).unwrap().attention_levels().is_empty());
}

#[test]
fn presets_match_roster() {
    let table: Vec<(&str, usize, bool, bool, bool)> = Preset::ALL
        .iter()
        .map(|p| (p.name(), p.batch_size(), p.group_norm(), p.large_encoder(), p.attention()))
        .collect();
    assert_eq!(
        table,
        vec![
            ("BL", 5, false, false, false),
            ("BL+L", 2, false, true, false),
            ("BL+GN", 2, true, false, false),
            ("BL+AA", 2, false, false, true),
            ("BL+L+GN", 2, true, true, false),
        ]
    );
    let gn = build_network(Preset::BlLGn, &ScaleConfig::paper()).unwrap();
    assert_eq!(gn.norm, NormKind::Group(32));
}

#[test]
fn attention_variant_only_adds_attention_nodes() {
    let scale = ScaleConfig::desk();
    let bl = build_network(Preset::Bl, &scale).unwrap().blocks().unwrap();
    let aa = build_network(Preset::BlAa, &scale).unwrap().blocks().unwrap();
    let names = |b: &tumorseg::unet::Blocks| b.layers().iter().map(|l| l.name().to_string()).collect::<Vec<_>>();
    let base = names(&bl);
    let with: Vec<String> = names(&aa);
    let extra: Vec<&String> = with.iter().filter(|n| !base.contains(n)).collect();
    assert_eq!(extra, vec!["bottleneck.attn", "dec2.attn", "dec1.attn"]);
    let without: Vec<&String> = with.iter().filter(|n| !n.ends_with(".attn")).collect();
    assert_eq!(without, base.iter().collect::<Vec<_>>());
}

#[test]
fn parameter_counts() {
    let scale = ScaleConfig::desk();
    for p in Preset::ALL {
        let spec = build_network(p, &scale).unwrap();
        let net = Network::new(spec.clone(), 1, DType::F32).unwrap();
        assert_eq!(spec.parameter_count().unwrap(), net.params.scalar_count(), "{p}");
    }
    let paper = ScaleConfig::paper();
    let bl = build_network(Preset::Bl, &paper).unwrap();
    let bll = build_network(Preset::BlL, &paper).unwrap();
    assert!(bll.encoder_conv_parameter_count().unwrap() > bl.encoder_conv_parameter_count().unwrap());
    let small = build_network(Preset::BlAa, &ScaleConfig { patch: 64, ..paper.clone() }).unwrap();
    let large = build_network(Preset::BlAa, &paper).unwrap();
    assert_eq!(small.parameter_count().unwrap(), large.parameter_count().unwrap());
}

#[test]
fn desk_forward_shapes() {
    let spec = build_network(Preset::BlLGn, &ScaleConfig::desk()).unwrap();
    let net = Network::new(spec, 3, DType::F32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[1, 4, 32, 32, 32]).to_dtype(DType::F32);
    let mut tape = Tape::new();
    let p = net.params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = net.forward(&mut tape, &p, xv, Mode::Train).unwrap();
    let shapes: Vec<Vec<usize>> = out.outputs.iter().map(|v| tape.value(*v).shape().to_vec()).collect();
    assert_eq!(shapes, vec![vec![1, 3, 32, 32, 32], vec![1, 3, 16, 16, 16]]);
    let infer = net.forward(&mut tape, &p, xv, Mode::Infer).unwrap();
    assert_eq!(infer.outputs.len(), 1);
    assert_eq!(tape.value(infer.outputs[0]).shape(), &[1, 3, 32, 32, 32]);

    let bad = tape.constant(Tensor::zeros(&[1, 3, 32, 32, 32], DType::F32).unwrap());
    assert!(net.forward(&mut tape, &p, bad, Mode::Train).is_err());
}

#[test]
fn full_network_gradients_pass_finite_differences() {
    for preset in [Preset::Bl, Preset::BlLGn, Preset::BlAa] {
        let spec = build_network(preset, &tiny_scale()).unwrap();
        let report = network_gradcheck(&spec, 2, 5, 3).unwrap();
        assert!(report.max_rel_error < 1e-4, "{preset}: {report:?}");
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let spec = build_network(Preset::BlAa, &tiny_scale()).unwrap();
    let mut net = Network::new(spec, 9, DType::F32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&mut rng, &[2, 4, 8, 8, 8]).to_dtype(DType::F32);
    let mut tape = Tape::new();
    let p = net.params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = net.forward(&mut tape, &p, xv, Mode::Train).unwrap();
    net.apply_stat_updates(&out.stat_updates).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    checkpoint::save(&net, &path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let loaded = checkpoint::load(&path, DType::F32).unwrap();
    assert_eq!(loaded.params, net.params);
    assert_eq!(loaded.spec, net.spec);
    checkpoint::save(&loaded, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
    // running statistics are stored at 32-bit precision
    assert!(loaded.predict(&x).unwrap().max_abs_diff(&net.predict(&x).unwrap()) < 1e-5);

    let mut corrupt = first.clone();
    corrupt[60] ^= 1;
    assert!(checkpoint::from_bytes(&corrupt, DType::F32).is_err());
    assert!(checkpoint::from_bytes(&first[..first.len() - 1], DType::F32).is_err());
}

#[test]
fn untrained_batch_norm_network_refuses_inference() {
    let spec = build_network(Preset::Bl, &tiny_scale()).unwrap();
    let net = Network::new(spec, 1, DType::F32).unwrap();
    let x = Tensor::zeros(&[1, 4, 8, 8, 8], DType::F32).unwrap();
    assert!(net.predict(&x).is_err());
    let gn = Network::new(build_network(Preset::BlGn, &tiny_scale()).unwrap(), 1, DType::F32).unwrap();
    let p = gn.predict(&x).unwrap();
    assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
}
