use super::*;
use crate::diffusion::NoiseSchedule;
use crate::nn::Tensor;
use crate::rng::{fill_normal, stream, Rng};

fn tiny(kind: ModelKind) -> DenoiserConfig {
    DenoiserConfig {
        kind,
        cond_channels: 4,
        out_channels: 3,
        base_width: 8,
        depth: 1,
        res_blocks_per_level: 1,
        channel_mult: vec![1, 2],
        attention_levels: vec![1],
        attention_heads: 2,
        time_embed_dim: 8,
        groups: 4,
    }
}

fn normal_tensor<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut s = stream(seed, "test", 0);
    let mut v = vec![0f32; shape.iter().product()];
    fill_normal(&mut s, &mut v);
    Tensor::from_vec(shape, v.into_iter().map(|x| T::of(x as f64)).collect())
}

fn batch<T: Scalar>(cfg: &DenoiserConfig, n: usize, hw: usize, seed: u64, steps: usize) -> Batch<T> {
    let mut s = stream(seed, "t", 0);
    Batch {
        r0: normal_tensor(&[n, 3, hw, hw], seed).map(|v| v * T::of(0.3)),
        y: normal_tensor(&[n, cfg.cond_channels, hw, hw], seed + 1),
        t: (0..n).map(|_| s.gen_range(1..=steps)).collect(),
        eps: normal_tensor(&[n, 3, hw, hw], seed + 2),
    }
}

/// Every parameter perturbed so no branch is blocked by zero initialization.
fn randomized<T: Scalar>(model: &Denoiser, seed: u64) -> ParamSet<T> {
    let mut p = model.init_params_as::<T>(seed);
    for (i, t) in p.tensors_mut().iter_mut().enumerate() {
        let noise = normal_tensor::<T>(t.shape(), seed * 1000 + i as u64);
        for (v, z) in t.data_mut().iter_mut().zip(noise.data()) {
            *v = *v + T::of(0.2) * *z;
        }
    }
    p
}

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

fn res(cin: usize, cout: usize, tdim: Option<usize>) -> usize {
    2 * cin + conv(cin, cout, 3) + tdim.map_or(0, |d| d * cout + cout) + 2 * cout + conv(cout, cout, 3)
        + if cin != cout { conv(cin, cout, 1) } else { 0 }
}

fn attn(c: usize) -> usize {
    2 * c + conv(c, 3 * c, 1) + conv(c, c, 1)
}

/// Parameter count tallied shape by shape from the configuration alone.
fn count_by_shape(cfg: &DenoiserConfig) -> usize {
    let w = |l: usize| cfg.base_width * cfg.channel_mult[l];
    let tdim = (cfg.kind == ModelKind::Diffusion).then_some(cfg.time_embed_dim);
    let has_attn = |l: usize| cfg.attention_levels.contains(&l);
    let mut total = conv(cfg.in_channels(), w(0), 3);
    if let Some(d) = tdim {
        total += 2 * (d * d + d);
    }
    let mut cur = w(0);
    for l in 0..cfg.depth {
        for _ in 0..cfg.res_blocks_per_level {
            total += res(cur, w(l), tdim) + if has_attn(l) { attn(w(l)) } else { 0 };
            cur = w(l);
        }
        total += conv(cur, cur, 3);
    }
    let d = cfg.depth;
    total += res(cur, w(d), tdim) + if has_attn(d) { attn(w(d)) } else { 0 };
    total += res(w(d), w(d), tdim);
    cur = w(d);
    for l in (0..cfg.depth).rev() {
        total += conv(cur, cur, 3);
        for _ in 0..cfg.res_blocks_per_level {
            total += res(cur + w(l), w(l), tdim) + if has_attn(l) { attn(w(l)) } else { 0 };
            cur = w(l);
        }
    }
    total + 2 * cur + conv(cur, cfg.out_channels, 3)
}

#[test]
fn parameter_count_matches_shape_tally() {
    for cfg in [
        DenoiserConfig::default(),
        DenoiserConfig::default().as_regression(),
        tiny(ModelKind::Diffusion),
        DenoiserConfig {
            res_blocks_per_level: 2,
            attention_levels: vec![0, 2],
            ..DenoiserConfig::default()
        },
    ] {
        let m = Denoiser::new(cfg.clone()).unwrap();
        assert_eq!(m.num_params(), count_by_shape(&cfg), "{cfg:?}");
    }
}

#[test]
fn fresh_params_predict_exact_zero() {
    let cfg = tiny(ModelKind::Diffusion);
    let m = Denoiser::new(cfg.clone()).unwrap();
    let p = m.init_params(3);
    let b = batch::<f32>(&cfg, 2, 8, 1, 50);
    let out = m.forward(&p, &b.eps, &b.t, &b.y).unwrap();
    assert_eq!(out.shape(), b.eps.shape());
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn init_is_deterministic_in_seed() {
    let m = Denoiser::new(tiny(ModelKind::Diffusion)).unwrap();
    let bytes = |p: &DenoiserParams| -> Vec<u32> { p.tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect() };
    assert_eq!(bytes(&m.init_params(9)), bytes(&m.init_params(9)));
    assert_ne!(bytes(&m.init_params(9)), bytes(&m.init_params(10)));
}

#[test]
fn invalid_configs_and_shapes_are_rejected() {
    let bad_heads = DenoiserConfig {
        attention_heads: 3,
        ..DenoiserConfig::default()
    };
    assert!(matches!(Denoiser::new(bad_heads), Err(Error::Config(_))));
    let narrow = DenoiserConfig {
        base_width: 4,
        ..DenoiserConfig::default()
    };
    assert!(matches!(Denoiser::new(narrow), Err(Error::Config(_))));
    let cfg = tiny(ModelKind::Diffusion);
    let m = Denoiser::new(cfg.clone()).unwrap();
    let p = m.init_params(0);
    let b = batch::<f32>(&cfg, 1, 6, 0, 10);
    let r = Tensor::<f32>::zeros(&[1, 3, 7, 7]);
    let y = Tensor::<f32>::zeros(&[1, 4, 7, 7]);
    assert!(matches!(m.forward(&p, &r, &[1], &y), Err(Error::Size(_))));
    let _ = b;
}

#[test]
fn batch_permutation_permutes_outputs() {
    let cfg = tiny(ModelKind::Diffusion);
    let m = Denoiser::new(cfg.clone()).unwrap();
    let p = randomized::<f32>(&m, 4);
    let b = batch::<f32>(&cfg, 3, 8, 5, 100);
    let out = m.forward(&p, &b.eps, &b.t, &b.y).unwrap();
    let perm = [2usize, 0, 1];
    let pick = |t: &Tensor<f32>| {
        let items: Vec<Tensor<f32>> = perm
            .iter()
            .map(|&i| {
                let (_, c, h, w) = t.dims4();
                Tensor::from_vec(&[1, c, h, w], t.item(i).to_vec())
            })
            .collect();
        Tensor::stack_batch(&items)
    };
    let tp: Vec<usize> = perm.iter().map(|&i| b.t[i]).collect();
    let out_p = m.forward(&p, &pick(&b.eps), &tp, &pick(&b.y)).unwrap();
    assert_eq!(out_p.data(), pick(&out).data());
    let again = m.forward(&p, &b.eps, &b.t, &b.y).unwrap();
    assert_eq!(again.data(), out.data());
}

#[test]
fn initial_loss_is_noise_power() {
    let cfg = tiny(ModelKind::Diffusion);
    let m = Denoiser::new(cfg.clone()).unwrap();
    let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
    let b = batch::<f32>(&cfg, 4, 16, 6, 100);
    let (loss, _) = m.gradient(&m.init_params(1), &b, &sched).unwrap();
    let power: f64 = b.eps.data().iter().map(|&e| (e as f64).powi(2)).sum::<f64>() / b.eps.len() as f64;
    assert!((loss - power).abs() < 1e-6);
    // 3072 standard normal draws: standard error of the mean square is about 0.026
    assert!((loss - 1.0).abs() < 0.13, "{loss}");
}

#[test]
fn gradients_behind_zero_output_layer_vanish() {
    let cfg = tiny(ModelKind::Diffusion);
    let m = Denoiser::new(cfg.clone()).unwrap();
    let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
    let b = batch::<f32>(&cfg, 2, 8, 7, 100);
    let (_, g) = m.gradient(&m.init_params(1), &b, &sched).unwrap();
    for (name, t) in g.iter() {
        let zero = t.data().iter().all(|&v| v == 0.0);
        if name.starts_with("out.conv") {
            assert!(!zero, "{name} should receive gradient");
        } else {
            assert!(zero, "{name} is blocked by the zero output layer");
        }
    }
}

#[test]
fn doubling_upstream_gradient_doubles_every_entry() {
    let cfg = tiny(ModelKind::Diffusion);
    let m = Denoiser::new(cfg.clone()).unwrap();
    let p = randomized::<f32>(&m, 8);
    let b = batch::<f32>(&cfg, 2, 8, 9, 100);
    let x = Tensor::concat_channels(&b.eps, &b.y);
    let (out, cache) = m.net.forward(&p, &x, Some(&b.t));
    let gy = out.map(|v| v * 0.25);
    let mut g1 = m.layout.zeros::<f32>();
    m.net.backward(&p, &cache, &gy, &mut g1);
    let mut g2 = m.layout.zeros::<f32>();
    m.net.backward(&p, &cache, &gy.map(|v| v * 2.0), &mut g2);
    for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
        for (u, v) in a.data().iter().zip(b.data()) {
            assert_eq!((2.0 * u).to_bits(), v.to_bits());
        }
    }
}

fn finite_difference_check(kind: ModelKind, seed: u64) {
    let cfg = tiny(kind);
    let m = Denoiser::new(cfg.clone()).unwrap();
    let sched = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
    let p = randomized::<f64>(&m, seed);
    let b = batch::<f64>(&cfg, 2, 8, seed + 11, 50);
    let (_, g) = m.gradient(&p, &b, &sched).unwrap();
    let h = 1e-5;
    let mut worst = 0f64;
    let mut pick = stream(seed, "fd", 0);
    for k in 0..p.len() {
        let n = p.tensors()[k].len();
        let idx: Vec<usize> = (0..3).map(|_| pick.gen_range(0..n)).collect();
        for j in idx {
            let mut plus = p.clone();
            plus.tensors_mut()[k].data_mut()[j] += h;
            let mut minus = p.clone();
            minus.tensors_mut()[k].data_mut()[j] -= h;
            let lp = m.gradient(&plus, &b, &sched).unwrap().0;
            let lm = m.gradient(&minus, &b, &sched).unwrap().0;
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = g.tensors()[k].data()[j];
            let scale = numeric.abs().max(analytic.abs());
            let rel = if scale < 1e-7 { 0.0 } else { (numeric - analytic).abs() / scale };
            assert!(rel < 1e-4, "{} [{j}]: analytic {analytic} numeric {numeric}", p.names()[k]);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn gradient_matches_finite_differences() {
    finite_difference_check(ModelKind::Diffusion, 21);
}

#[test]
fn regression_gradient_matches_finite_differences() {
    finite_difference_check(ModelKind::Regression, 22);
}

#[test]
fn one_step_makes_output_depend_on_t() {
    let cfg = tiny(ModelKind::Diffusion);
    let m = Denoiser::new(cfg.clone()).unwrap();
    let sched = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
    let mut p = m.init_params(2);
    let b = batch::<f32>(&cfg, 4, 8, 12, 200);
    let (_, mut g) = m.gradient(&p, &b, &sched).unwrap();
    g.scale(-0.05);
    p.add_assign(&g);
    let r = normal_tensor::<f32>(&[1, 3, 8, 8], 40);
    let y = normal_tensor::<f32>(&[1, 4, 8, 8], 41);
    let a = m.forward(&p, &r, &[5], &y).unwrap();
    let c = m.forward(&p, &r, &[150], &y).unwrap();
    assert!(a.data().iter().zip(c.data()).any(|(u, v)| u != v));
}

#[test]
fn regression_kind_ignores_time_and_noise() {
    let cfg = tiny(ModelKind::Regression);
    let m = Denoiser::new(cfg.clone()).unwrap();
    assert!(m.layout().specs().iter().all(|s| !s.name.contains("time")));
    let p = randomized::<f32>(&m, 3);
    let y = normal_tensor::<f32>(&[2, 4, 8, 8], 1);
    let out = m.predict(&p, &y).unwrap();
    assert_eq!(out.shape(), &[2, 3, 8, 8]);
    assert!(m.forward(&p, &out, &[1, 1], &y).is_err());
}

mod checkpoints {
    use super::*;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            role: "params".into(),
            step: 17,
            schedule: Some(crate::diffusion::ScheduleSpec::default()),
            norm: None,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let cfg = tiny(ModelKind::Diffusion);
        let m = Denoiser::new(cfg.clone()).unwrap();
        let p = randomized::<f32>(&m, 5);
        let bytes = encode_checkpoint(&p, &cfg, &meta()).unwrap();
        assert_eq!(&bytes[..4], b"NVCK");
        let (q, cfg2, meta2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(meta2, meta());
        assert_eq!(q.names(), p.names());
        assert_eq!(encode_checkpoint(&q, &cfg2, &meta2).unwrap(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nvck");
        save_checkpoint(&path, &p, &cfg, &meta()).unwrap();
        let (r, _) = load_checkpoint_expecting(&path, &cfg).unwrap();
        for (a, b) in r.tensors().iter().zip(p.tensors()) {
            assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
        assert!(matches!(
            load_checkpoint_expecting(&path, &cfg.as_regression()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let cfg = tiny(ModelKind::Diffusion);
        let m = Denoiser::new(cfg.clone()).unwrap();
        let bytes = encode_checkpoint(&m.init_params(0), &cfg, &meta()).unwrap();
        let mut magic = bytes.clone();
        magic[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_checkpoint(&magic), Err(Error::Format(_))));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 4]), Err(Error::Format(_))));
        assert!(matches!(decode_checkpoint(&bytes[..20]), Err(Error::Format(_))));

        // point the last tensor past the end of the payload
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
        let last = header["tensors"].as_array_mut().unwrap().last_mut().unwrap();
        last["offset"] = serde_json::json!(1u64 << 40);
        let json = serde_json::to_vec(&header).unwrap();
        let mut moved = b"NVCK".to_vec();
        moved.extend_from_slice(&(json.len() as u64).to_le_bytes());
        moved.extend_from_slice(&json);
        moved.extend_from_slice(&bytes[12 + hlen..]);
        assert!(matches!(decode_checkpoint(&moved), Err(Error::Format(_))));

        // header shape disagreeing with its own config
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
        header["tensors"][0]["shape"] = serde_json::json!([1, 2, 3, 3]);
        let json = serde_json::to_vec(&header).unwrap();
        let mut reshaped = b"NVCK".to_vec();
        reshaped.extend_from_slice(&(json.len() as u64).to_le_bytes());
        reshaped.extend_from_slice(&json);
        reshaped.extend_from_slice(&bytes[12 + hlen..]);
        assert!(matches!(decode_checkpoint(&reshaped), Err(Error::Format(_))));
    }
}
