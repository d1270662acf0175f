use segpipe::autodiff::{Graph, Mode};
use segpipe::nn::{
    residual_block, summarize, Arch, ArchConfig, BlockVariant, LongSkips, ModelGraph, Resample,
    ResidualBlockCfg,
};
use segpipe::params::ParamStore;
use segpipe::rng::SeedSource;
use segpipe::tensor::Tensor;

const FCN_ROWS: &[(&str, usize, usize)] = &[
    ("Input", 512, 1),
    ("Down 1", 512, 16),
    ("Pooling 1", 256, 16),
    ("Down 2", 256, 32),
    ("Pooling 2", 128, 32),
    ("Down 3", 128, 64),
    ("Pooling 3", 64, 64),
    ("Down 4", 64, 128),
    ("Pooling 4", 32, 128),
    ("Across", 32, 256),
    ("Up 1", 64, 256),
    ("Merge 1", 64, 384),
    ("Up 2", 64, 128),
    ("Up 3", 64, 128),
    ("Up 4", 128, 128),
    ("Merge 2", 128, 192),
    ("Up 5", 128, 64),
    ("Up 6", 128, 64),
    ("Up 7", 256, 64),
    ("Merge 3", 256, 96),
    ("Up 8", 256, 32),
    ("Up 9", 256, 32),
    ("Up 10", 512, 32),
    ("Merge 4", 512, 48),
    ("Up 11", 512, 16),
    ("Up 12", 512, 16),
    ("Output", 512, 1),
];

const RESNET_ROWS: &[(&str, usize, usize)] = &[
    ("Down 1", 512, 32),
    ("Down 2", 256, 32),
    ("Down 3", 128, 128),
    ("Down 4", 64, 256),
    ("Down 5", 32, 512),
    ("Across", 32, 1024),
    ("Up 1", 64, 512),
    ("Up 2", 128, 256),
    ("Up 3", 256, 128),
    ("Up 4", 512, 32),
    ("Up 5", 512, 32),
    ("Classifier", 512, 1),
];

fn check_rows(model: &ModelGraph<f32>, section: &str, expected: &[(&str, usize, usize)]) {
    let s = summarize(model, 512, 512).unwrap();
    let rows: Vec<_> = s.rows.iter().filter(|r| r.section == section).collect();
    assert_eq!(rows.len(), expected.len());
    for (r, &(name, res, width)) in rows.iter().zip(expected) {
        assert_eq!(r.name, name);
        assert_eq!(
            (r.height, r.width, r.channels),
            (res, res, width),
            "row {name}"
        );
    }
}

#[test]
fn tables_reproduced_at_full_scale() {
    let fcn = ModelGraph::<f32>::fcn(ArchConfig::default(), 1).unwrap();
    check_rows(&fcn, "FCN", FCN_ROWS);
    let resnet = ModelGraph::<f32>::fc_resnet(ArchConfig::default(), 1).unwrap();
    check_rows(&resnet, "FC-ResNet", RESNET_ROWS);
    let pipe = ModelGraph::<f32>::pipeline(ArchConfig::default(), 1).unwrap();
    check_rows(&pipe, "FCN", FCN_ROWS);
    check_rows(&pipe, "FC-ResNet", RESNET_ROWS);
}

#[test]
fn parameter_budgets() {
    let fcn = ModelGraph::<f32>::fcn(ArchConfig::default(), 1).unwrap();
    let n = fcn.num_params() as f64;
    assert!((n / 1.8e6 - 1.0).abs() < 0.05, "fcn {n}");
    let s = summarize(&fcn, 512, 512).unwrap();
    assert_eq!(
        s.row("FCN", "Down 1").unwrap().params,
        160 + 9 * 16 * 16 + 16
    );
    let pool4 = s.row("FCN", "Pooling 4").unwrap();
    assert_eq!((pool4.height, pool4.channels, pool4.params), (32, 128, 0));

    let resnet = ModelGraph::<f32>::fc_resnet(ArchConfig::default(), 1).unwrap();
    let n = resnet.num_params() as f64;
    assert!((n / 11e6 - 1.0).abs() < 0.10, "fc-resnet {n}");
    let convs = resnet.residual_path_convs();
    assert!((135..=145).contains(&convs), "{convs} convolutions");

    let pipe = ModelGraph::<f32>::pipeline(ArchConfig::default(), 1).unwrap();
    let n = pipe.num_params() as f64;
    assert!((n / 12.8e6 - 1.0).abs() < 0.07, "pipeline {n}");
    assert_eq!(pipe.num_params(), fcn.num_params() + resnet.num_params());
}

#[test]
fn summary_accounting() {
    let pipe = ModelGraph::<f32>::pipeline(ArchConfig::with_scale(0.125), 3).unwrap();
    let s = summarize(&pipe, 64, 64).unwrap();
    assert_eq!(
        s.rows.iter().map(|r| r.params).sum::<usize>(),
        s.total_params
    );
    assert_eq!(s.total_params, pipe.num_params());
    assert_eq!(s.rows.last().unwrap().cumulative, s.total_params);
    let across = s.row("FC-ResNet", "Across").unwrap();
    assert_eq!((across.channels, across.repetition), (128, 3));
    assert!(s.to_csv().lines().count() == s.rows.len() + 2);
    assert!(s.to_text().contains("Merge 4"));
}

#[test]
fn spatial_table_independent_of_scale() {
    let a = ModelGraph::<f32>::pipeline(ArchConfig::with_scale(1.0), 0).unwrap();
    let b = ModelGraph::<f32>::pipeline(ArchConfig::with_scale(0.125), 0).unwrap();
    let sa = a.infer_shapes(128, 96).unwrap();
    let sb = b.infer_shapes(128, 96).unwrap();
    let hw = |v: &[(usize, usize, usize)]| v.iter().map(|&(h, w, _)| (h, w)).collect::<Vec<_>>();
    assert_eq!(hw(&sa), hw(&sb));
}

#[test]
fn skip_pairs_match_resolution() {
    for skips in [LongSkips::None, LongSkips::Standard, LongSkips::All] {
        let cfg = ArchConfig {
            long_skips: skips,
            ..ArchConfig::with_scale(0.125)
        };
        let m = ModelGraph::<f32>::pipeline(cfg, 0).unwrap();
        let shapes = m.infer_shapes(64, 64).unwrap();
        for s in &m.skips {
            // The destination receives the skip at its input, i.e. the
            // resolution of the previous row.
            let src = shapes[s.from];
            let dst = shapes[s.to - 1];
            assert_eq!((src.0, src.1), (dst.0, dst.1), "{s:?}");
        }
    }
}

#[test]
fn invalid_scales_rejected() {
    assert!(ModelGraph::<f32>::fcn(ArchConfig::with_scale(0.01), 0).is_err());
    assert!(ModelGraph::<f32>::fcn(ArchConfig::with_scale(0.0), 0).is_err());
    assert!(ModelGraph::<f32>::fcn(ArchConfig::with_scale(1.5), 0).is_err());
    // 128 * 0.1 rounds to 13, not a multiple of 4.
    assert!(ModelGraph::<f32>::fc_resnet(ArchConfig::with_scale(0.1), 0).is_err());
}

fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = SeedSource::new(seed).stream("input", 0);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng)).unwrap()
}

#[test]
fn pipeline_forward_is_probability_map() {
    let mut m = ModelGraph::<f64>::pipeline(ArchConfig::with_scale(0.125), 5).unwrap();
    let x = random_input(&[1, 1, 64, 64], 1);
    let mut g = Graph::new();
    let xi = g.input(x);
    let mut rng = SeedSource::new(0).stream("dropout", 0);
    let y = m.forward(&mut g, xi, Mode::Train, &mut rng).unwrap();
    let v = g.value(y);
    assert_eq!(v.shape(), &[1, 1, 64, 64]);
    assert!(v.data().iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn pipeline_is_composition() {
    let cfg = ArchConfig::with_scale(0.125);
    let mut pipe = ModelGraph::<f64>::pipeline(cfg, 9).unwrap();
    let mut fcn = ModelGraph::<f64>::fcn(cfg, 9).unwrap();
    let mut resnet = ModelGraph::<f64>::fc_resnet(cfg, 9).unwrap();
    let x = random_input(&[2, 1, 32, 32], 2);
    let mut rng = SeedSource::new(0).stream("dropout", 0);

    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let whole = pipe.forward(&mut g, xi, Mode::Train, &mut rng).unwrap();
    let whole = g.value(whole).clone();

    let mut g = Graph::new();
    let xi = g.input(x);
    let t = fcn
        .forward_traced(&mut g, xi, Mode::Train, &mut rng)
        .unwrap();
    let pre = g.value(*t.rows.last().unwrap()).clone();
    let mut g = Graph::new();
    let pi = g.input(pre);
    let y = resnet.forward(&mut g, pi, Mode::Train, &mut rng).unwrap();
    assert_eq!(g.value(y), &whole);
}

#[test]
fn zeroed_residuals_give_identity_blocks() {
    let mut m = ModelGraph::<f64>::fc_resnet(ArchConfig::with_scale(0.125), 4).unwrap();
    m.zero_residuals();
    let x = random_input(&[2, 1, 32, 32], 3);
    let mut g = Graph::new();
    let xi = g.input(x);
    let mut rng = SeedSource::new(0).stream("dropout", 0);
    let t = m.forward_traced(&mut g, xi, Mode::Train, &mut rng).unwrap();
    let matched: Vec<_> = m
        .blocks()
        .zip(&t.blocks)
        .filter(|(b, _)| b.shortcut.is_none() && b.cfg.resample == Resample::None)
        .collect();
    assert!(matched.len() > 20);
    for (_, &(_, input, output)) in matched {
        assert_eq!(g.value(input).data(), g.value(output).data());
    }
}

#[test]
fn block_examples() {
    let mut store = ParamStore::<f64>::new();
    let cfg = ResidualBlockCfg {
        variant: BlockVariant::Bottleneck,
        in_width: 256,
        out_width: 512,
        resample: Resample::Down,
        dropout: 0.0,
    };
    let b = residual_block(&mut store, SeedSource::new(0), "b", cfg).unwrap();
    let widths: Vec<_> = b.units.iter().map(|u| u.cout).collect();
    assert_eq!(widths, vec![128, 128, 512]);
    assert_eq!(b.units[1].stride, 2);
    assert!(b.shortcut.is_some());

    let mut store = ParamStore::<f64>::new();
    let cfg = ResidualBlockCfg {
        variant: BlockVariant::Simple,
        in_width: 4,
        out_width: 4,
        resample: Resample::Down,
        dropout: 0.0,
    };
    let b = residual_block(&mut store, SeedSource::new(0), "s", cfg).unwrap();
    let mut g = Graph::new();
    let xi = g.input(random_input(&[1, 4, 16, 16], 4));
    let mut rng = SeedSource::new(0).stream("d", 0);
    let y = b
        .forward(
            &mut g,
            &mut store,
            xi,
            Mode::Train,
            Default::default(),
            &mut rng,
        )
        .unwrap();
    assert_eq!(g.value(y).shape(), &[1, 4, 8, 8]);
    let wrong = g.input(random_input(&[1, 3, 16, 16], 4));
    assert!(b
        .forward(
            &mut g,
            &mut store,
            wrong,
            Mode::Train,
            Default::default(),
            &mut rng
        )
        .is_err());
}

#[test]
fn builds_are_deterministic() {
    let a = ModelGraph::<f32>::pipeline(ArchConfig::with_scale(0.125), 11).unwrap();
    let b = ModelGraph::<f32>::pipeline(ArchConfig::with_scale(0.125), 11).unwrap();
    let c = ModelGraph::<f32>::pipeline(ArchConfig::with_scale(0.125), 12).unwrap();
    let names: Vec<_> = a.params.iter().map(|p| p.name.clone()).collect();
    assert_eq!(
        names,
        b.params.iter().map(|p| p.name.clone()).collect::<Vec<_>>()
    );
    assert!(a
        .params
        .iter()
        .zip(b.params.iter())
        .all(|(x, y)| x.value == y.value));
    assert!(a
        .params
        .iter()
        .zip(c.params.iter())
        .any(|(x, y)| x.value != y.value));
    assert_eq!(a.arch, Arch::Pipeline);
}

#[test]
fn every_parameter_receives_gradient() {
    let mut m = ModelGraph::<f64>::pipeline(ArchConfig::with_scale(0.125), 6).unwrap();
    let x = random_input(&[2, 1, 32, 32], 5);
    let mut g = Graph::new();
    let xi = g.input(x);
    let mut rng = SeedSource::new(0).stream("dropout", 0);
    let y = m.forward(&mut g, xi, Mode::Train, &mut rng).unwrap();
    let w = random_input(&[2, 1, 32, 32], 6);
    let l = g.weighted_sum(y, w).unwrap();
    g.backward(l, None, &mut m.params).unwrap();
    for p in m.params.iter() {
        let norm: f64 = p.grad.data().iter().map(|v| v * v).sum();
        assert!(norm.is_finite() && norm > 0.0, "{} has no gradient", p.name);
    }
}
