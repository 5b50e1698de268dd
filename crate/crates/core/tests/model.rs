use std::time::Instant;

use rankmoe_core::backbone::{BackboneConfig, Block, TemporalMode};
use rankmoe_core::codec::EncoderConfig;
use rankmoe_core::gradcheck::relative_error;
use rankmoe_core::model::Model;
use rankmoe_core::{rng, Ctx, ForwardOptions, ParamKind, ParamStore, Tensor};

fn enc(dim: usize) -> EncoderConfig {
    EncoderConfig {
        in_channels: 1,
        t_in: 4,
        t_out: 4,
        height: 16,
        width: 16,
        num_blocks: 2,
        hidden: 16,
        dim,
        groups: 8,
    }
}

fn no_adapters() -> ForwardOptions {
    ForwardOptions {
        adapters: false,
        ..ForwardOptions::default()
    }
}

#[test]
fn zero_init_is_transparent() {
    let cfg = BackboneConfig {
        temporal_mode: TemporalMode::Identity,
        ..BackboneConfig::desk()
    };
    let m = Model::new(&cfg, &[("t".into(), enc(cfg.dim))], 5).unwrap();
    let mut r = rng::rng(6);
    for _ in 0..10 {
        let x = rng::uniform(&mut r, [40, 1, 16, 16], 0.0, 1.0);
        let with = m.predict("t", &x, ForwardOptions::default()).unwrap();
        let without = m.predict("t", &x, no_adapters()).unwrap();
        assert!(with.max_abs_diff(&without).unwrap() <= 1e-12);
    }
}

#[test]
fn gated_init_differs_from_identity_hook() {
    let model = |mode| {
        let cfg = BackboneConfig {
            temporal_mode: mode,
            ..BackboneConfig::desk()
        };
        Model::new(&cfg, &[("t".into(), enc(cfg.dim))], 5).unwrap()
    };
    let x = rng::uniform(&mut rng::rng(1), [4, 1, 16, 16], 0.0, 1.0);
    let gated = model(TemporalMode::Gated).predict("t", &x, ForwardOptions::default()).unwrap();
    let plain = model(TemporalMode::Identity).predict("t", &x, ForwardOptions::default()).unwrap();
    assert!(gated.max_abs_diff(&plain).unwrap() > 1e-6);
}

fn perturbed(store: &mut ParamStore, seed: u64) {
    let mut r = rng::rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get(id);
        match p.kind {
            ParamKind::Weight => {
                let v = rng::normal(&mut r, p.value.shape().to_vec(), 0.2);
                store.set_value(id, v).unwrap();
            }
            ParamKind::Rank { .. } => store.set_value(id, Tensor::scalar(3.3)).unwrap(),
            ParamKind::Frozen => {}
        }
    }
}

#[test]
fn blocks_are_token_permutation_equivariant() {
    for mode in [TemporalMode::Additive, TemporalMode::Gated] {
        let cfg = BackboneConfig {
            temporal_mode: mode,
            ..BackboneConfig::desk()
        };
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, "b", &cfg, &mut rng::rng(2)).unwrap();
        perturbed(&mut store, 3);
        let (b, n, l) = (2, 9, cfg.dim);
        let x = rng::normal(&mut rng::rng(4), [b, n, l], 1.0);
        let perm: Vec<usize> = (0..n).map(|i| (i * 4 + 7) % n).collect();
        let permute = |t: &Tensor| {
            let mut out = vec![0.0; t.numel()];
            for bi in 0..b {
                for (dst, &src) in perm.iter().enumerate() {
                    let s = (bi * n + src) * l;
                    let d = (bi * n + dst) * l;
                    out[d..d + l].copy_from_slice(&t.data()[s..s + l]);
                }
            }
            Tensor::new([b, n, l], out).unwrap()
        };
        let run = |x: &Tensor| {
            let mut ctx = Ctx::new(&store, ForwardOptions::default());
            let v = ctx.graph.constant(x.clone());
            let y = block.forward(&mut ctx, v).unwrap();
            ctx.graph.value(y).clone()
        };
        let lhs = run(&permute(&x));
        let rhs = permute(&run(&x));
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-10);
    }
}

#[test]
fn gradient_reaches_every_decoder_weight() {
    let cfg = BackboneConfig::desk();
    let mut m = Model::new(&cfg, &[("t".into(), enc(cfg.dim))], 1).unwrap();
    perturbed(&mut m.store, 9);
    let x = rng::uniform(&mut rng::rng(2), [4, 1, 16, 16], 0.0, 1.0);
    let w = rng::normal(&mut rng::rng(3), [4, 1, 16, 16], 1.0);
    let loss = |m: &Model| -> (f64, Vec<(rankmoe_core::ParamId, Tensor)>) {
        let mut ctx = Ctx::new(&m.store, ForwardOptions::default());
        let xv = ctx.graph.constant(x.clone());
        let y = m.forward(&mut ctx, "t", xv).unwrap();
        let wv = ctx.graph.constant(w.clone());
        let p = ctx.graph.mul(y, wv).unwrap();
        let l = ctx.graph.sum(p);
        let g = ctx.graph.backward(l).unwrap();
        (ctx.graph.value(l).item().unwrap(), ctx.param_grads(&g))
    };
    let (_, grads) = loss(&m);
    let ids = m.codec("t").unwrap().decoder_weights();
    assert_eq!(ids.len(), 2 + 2 * 2);
    for id in ids {
        let g = &grads.iter().find(|(i, _)| *i == id).expect("decoder weight has a gradient").1;
        let (k, gk) = g
            .data()
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap();
        assert!(gk.abs() > 1e-8, "{}", m.store.get(id).name);
        let h = 1e-6;
        let shifted = |d: f64| {
            let mut c = m.clone();
            let mut v = c.store.value(id).data().to_vec();
            v[k] += d;
            let t = Tensor::new(c.store.value(id).shape().to_vec(), v).unwrap();
            c.store.set_value(id, t).unwrap();
            c
        };
        let (mp, mm) = (shifted(h), shifted(-h));
        let fd = (loss(&mp).0 - loss(&mm).0) / (2.0 * h);
        assert!(relative_error(gk, fd) <= 1e-4, "{}: {gk} vs {fd}", m.store.get(id).name);
    }
}

#[test]
fn desk_forward_within_budget() {
    let cfg = BackboneConfig::desk();
    let m = Model::new(&cfg, &[("t".into(), enc(cfg.dim))], 0).unwrap();
    let batch = 8;
    let x = rng::uniform(&mut rng::rng(0), [batch * 4, 1, 16, 16], 0.0, 1.0);
    m.predict("t", &x, ForwardOptions::default()).unwrap();
    let reps = 5;
    let t = Instant::now();
    for _ in 0..reps {
        m.predict("t", &x, ForwardOptions::default()).unwrap();
    }
    let per_sample = t.elapsed().as_secs_f64() * 1e3 / (reps * batch) as f64;
    assert!(per_sample < 50.0, "{per_sample:.1} ms/sample");
}
