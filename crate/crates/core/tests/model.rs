use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scnet_core::normalization::ReinjectionMode;
use scnet_core::{Graph, Model, ModelConfig, Result, Tensor, Var};

fn input(h: usize, w: usize, seed: u64) -> Tensor<f64> {
    Tensor::uniform(&[1, 3, h, w], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn small() -> ModelConfig {
    ModelConfig {
        scales: 3,
        base_channels: 8,
        ..ModelConfig::default()
    }
}

/// The plain U-Net wired by hand from named parameters.
fn plain_oracle(model: &Model<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let g = Graph::new();
    let p = |name: &str| g.constant(model.params.get(model.params.find(name).unwrap()).clone());
    let conv = |x: Var, name: &str, stride: usize, lo: usize, hi: usize| -> Result<Var> {
        g.conv2d_padded(
            x,
            p(&format!("{name}.weight")),
            Some(p(&format!("{name}.bias"))),
            stride,
            lo,
            hi,
        )
    };
    let block = |x: Var, name: &str| -> Result<Var> {
        let h = g.relu(conv(x, &format!("{name}.conv1"), 1, 1, 1)?)?;
        g.relu(conv(h, &format!("{name}.conv2"), 1, 1, 1)?)
    };
    let scales = model.config.scales;
    let mut skips = Vec::new();
    let mut feat = block(g.constant(x.clone()), "enc0")?;
    for k in 1..scales {
        skips.push(feat);
        let d = g.relu(conv(feat, &format!("down{k}"), 2, 1, 0)?)?;
        feat = block(d, &format!("enc{k}"))?;
    }
    for k in (0..scales - 1).rev() {
        let [_, _, h, w] = g.value(skips[k]).dims4()?;
        let up = g.resize_nearest(feat, h, w)?;
        let up = g.relu(conv(up, &format!("up{k}"), 1, 1, 1)?)?;
        let joined = g.concat(&[skips[k], up], 1)?;
        feat = block(joined, &format!("dec{k}"))?;
    }
    let h = g.relu(conv(feat, "out.conv", 1, 1, 1)?)?;
    // Squeeze-and-excitation with explicit pooling.
    let [n, c, hh, ww] = g.value(h).dims4()?;
    let pooled = g.mean_axis(g.reshape(h, &[n, c, hh * ww])?, 2)?;
    let pooled = g.reshape(pooled, &[n, c])?;
    let w1 = p("out.se.squeeze");
    let w2 = p("out.se.excite");
    let hidden = g.relu(g.matmul(pooled, g.transpose(w1)?)?)?;
    let gate = g.sigmoid(g.matmul(hidden, g.transpose(w2)?)?)?;
    let gate = g.broadcast_axis(g.reshape(gate, &[n, c, 1])?, 2, hh * ww)?;
    let h = g.mul(h, g.reshape(gate, &[n, c, hh, ww])?)?;
    let out = g.sigmoid(conv(h, "out.head", 1, 0, 0)?)?;
    let v = g.value(out).clone();
    Ok(v)
}

#[test]
fn plain_model_matches_hand_wired_baseline() {
    let model = Model::<f64>::build(small().plain(), 3).unwrap();
    let x = input(16, 24, 1);
    let got = model.predict(&x).unwrap();
    let want = plain_oracle(&model, &x).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-6, "{:e}", got.max_abs_diff(&want));
}

fn trace_of(config: ModelConfig) -> Vec<String> {
    let model = Model::<f64>::build(config, 0).unwrap();
    let g = Graph::new();
    let p = model.params.bind(&g);
    let x = g.constant(input(16, 16, 2));
    model.forward(&g, &p, x).unwrap();
    g.op_trace()
}

fn count(trace: &[String], needle: &str) -> usize {
    trace.iter().filter(|t| t.contains(needle)).count()
}

#[test]
fn ablation_switches_remove_their_operations() {
    let full = trace_of(small());
    assert_eq!(count(&full, "instance_whiten"), 2);
    assert_eq!(count(&full, "channel_norm"), 2);

    let no_sn = trace_of(small().with_switches(false, true));
    assert_eq!(count(&no_sn, "instance_whiten") + count(&no_sn, "whiten_cov"), 0);
    assert_eq!(count(&no_sn, "channel_norm"), 2);

    let no_cn = trace_of(small().with_switches(true, false));
    assert_eq!(count(&no_cn, "instance_whiten"), 2);
    assert_eq!(
        count(&no_cn, "channel_norm") + count(&no_cn, "cn_mu") + count(&no_cn, "cn_sigma"),
        0
    );

    let plain = trace_of(small().plain());
    for label in ["whiten", "channel_norm", "cn_mu", "cn_sigma"] {
        assert_eq!(count(&plain, label), 0, "{label}");
    }
    assert!(!plain
        .iter()
        .any(|t| t == "inv_sqrt_eig" || t == "trace" || t == "channel_affine"));
}

#[test]
fn default_architecture() {
    let config = ModelConfig::default();
    assert_eq!(config.widths(), vec![16, 32, 64, 128]);
    let model = Model::<f32>::build(config, 42).unwrap();
    assert_eq!(model.whitening_layers(), 3);
    assert_eq!(model.reinjection_heads(), 3);
    let x = input(128, 128, 3).cast::<f32>();
    let out = model.predict(&x).unwrap();
    assert_eq!(out.shape(), &[1, 3, 128, 128]);
    assert!(out.data().iter().all(|v| *v > 0.0 && *v < 1.0));
}

fn expected_parameters(c: &ModelConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let w = c.widths();
    let mut total = conv(3, w[0], 3) + conv(w[0], w[0], 3);
    for k in 1..c.scales {
        total += conv(w[k - 1], w[k], 3) + 2 * conv(w[k], w[k], 3);
    }
    for k in 0..c.scales - 1 {
        total += conv(w[k + 1], w[k], 3) + conv(2 * w[k], w[k], 3) + conv(w[k], w[k], 3);
        if c.use_sn {
            total += 2 * w[k];
        }
        if c.use_cn {
            total += 2 * conv(1, w[k], 1);
        }
    }
    total + conv(w[0], w[0], 3) + 2 * w[0] * (w[0] / c.se_reduction) + conv(w[0], 3, 1)
}

#[test]
fn parameter_counts_follow_the_architecture() {
    for (sn, cn) in [(true, true), (false, true), (true, false), (false, false)] {
        let config = ModelConfig::default().with_switches(sn, cn);
        let model = Model::<f32>::build(config.clone(), 0).unwrap();
        assert_eq!(model.num_parameters(), expected_parameters(&config), "sn={sn} cn={cn}");
    }
}

#[test]
fn build_and_forward_are_deterministic() {
    let a = Model::<f32>::build(small(), 9).unwrap();
    let b = Model::<f32>::build(small(), 9).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, Model::<f32>::build(small(), 10).unwrap());
    let x = input(16, 16, 4).cast::<f32>();
    let (ya, yb) = (a.predict(&x).unwrap(), b.predict(&x).unwrap());
    assert_eq!(ya.data(), yb.data());
}

#[test]
fn single_and_double_precision_agree() {
    let m64 = Model::<f64>::build(small(), 5).unwrap();
    let m32: Model<f32> = m64.cast();
    let x = input(16, 16, 6);
    let y64 = m64.predict(&x).unwrap();
    let y32: Tensor<f64> = m32.predict(&x.cast()).unwrap().cast();
    assert!(y64.max_abs_diff(&y32) < 1e-4);
}

#[test]
fn reinjection_mode_changes_the_output() {
    let text = Model::<f64>::build(small(), 5).unwrap();
    let eq8 = Model::<f64>::build(
        ModelConfig {
            reinjection_mode: ReinjectionMode::Eq8Form,
            ..small()
        },
        5,
    )
    .unwrap();
    let x = input(16, 16, 7);
    assert!(text.predict(&x).unwrap().max_abs_diff(&eq8.predict(&x).unwrap()) > 1e-6);
}

#[test]
fn indivisible_extents_are_rejected() {
    let model = Model::<f64>::build(small(), 0).unwrap();
    assert!(model.predict(&input(18, 16, 8)).is_err());
    assert!(model.predict(&Tensor::zeros(&[1, 4, 16, 16]).unwrap()).is_err());
    assert!(Model::<f64>::build(ModelConfig { scales: 1, ..small() }, 0).is_err());
}

#[test]
fn batch_items_are_independent() {
    let model = Model::<f64>::build(small(), 1).unwrap();
    let (a, b) = (input(16, 16, 10), input(16, 16, 11));
    let both = Tensor::new(&[2, 3, 16, 16], [a.data(), b.data()].concat()).unwrap();
    let out = model.predict(&both).unwrap();
    let separate = [
        model.predict(&a).unwrap().into_data(),
        model.predict(&b).unwrap().into_data(),
    ]
    .concat();
    let diff = out
        .data()
        .iter()
        .zip(&separate)
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-12);
}
