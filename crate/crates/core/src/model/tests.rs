use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::numerics::{grad_check, Graph, Scalar, Tensor};
use crate::tokenizers::{Special, ToyImage, VocabLayout};

fn micro(layers: usize) -> ModelConfig {
    ModelConfig {
        layout: VocabLayout::new(12, 5, 7),
        d_model: 8,
        n_layers: layers,
        n_heads: 2,
        ffn_hidden: 12,
        slot_dim: 6,
        ..ModelConfig::default()
    }
}

/// Parameters with random (nonzero) heads and distinct experts.
fn random_params<T: Scalar>(cfg: ModelConfig, seed: u64) -> MoTParams<T> {
    let mut p = MoTParams::<T>::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 99);
    for (info, t) in p.weights.values_mut().into_iter().zip(param_infos(p.config.n_layers)).map(|(t, i)| (i, t)) {
        let perturb = info.group == Group::GenBlock || info.name.ends_with("head") || info.name.contains("norm");
        if perturb {
            for x in t.data_mut() {
                *x += T::of(rng.random_range(-0.3..0.3));
            }
        }
    }
    p
}

/// Random sequence mixing text, slots and a generation block.
fn mixed_sequence(layout: &VocabLayout, slot_dim: usize, n: usize, seed: u64) -> MultimodalSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = SequenceBuilder::new(*layout, slot_dim);
    b.special(Special::Bos, false).unwrap();
    while b.len() < n {
        match rng.random_range(0..4) {
            0 => {
                b.push(rng.random_range(0..layout.text as u32), true).unwrap();
            }
            1 => {
                let f: Vec<f32> = (0..slot_dim).map(|_| rng.random_range(0.0..1.0)).collect();
                b.slots(&f).unwrap();
            }
            2 => {
                b.push(layout.sem_id(rng.random_range(0..layout.sem as u32)), true).unwrap();
            }
            _ => {
                b.push(layout.pix_id(rng.random_range(0..layout.pix as u32)), true).unwrap();
            }
        }
    }
    let mut s = b.finish();
    route_tokens(&mut s, RoutingPolicy::default());
    s
}

fn text_sequence(layout: &VocabLayout, slot_dim: usize, n: usize, seed: u64) -> MultimodalSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = SequenceBuilder::new(*layout, slot_dim);
    b.special(Special::Bos, false).unwrap();
    while b.len() < n {
        b.push(rng.random_range(0..layout.text as u32), true).unwrap();
    }
    let mut s = b.finish();
    route_tokens(&mut s, RoutingPolicy::default());
    s
}

fn logits_bit_eq(a: &[PositionLogits<f32>], b: &[PositionLogits<f32>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.head == y.head && x.values.iter().zip(&y.values).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

#[test]
fn und_only_sequence_never_touches_gen_weights() {
    let cfg = micro(2);
    let p = random_params::<f32>(cfg.clone(), 1);
    let mut garbage = p.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for layer in &mut garbage.weights.gen.layers {
        for x in layer.wq.data_mut().iter_mut().chain(layer.w_up.data_mut()) {
            *x = rng.random_range(-5.0..5.0);
        }
    }
    garbage.weights.gen_head = Tensor::full(garbage.weights.gen_head.shape(), 7.0);
    let s = text_sequence(&cfg.layout, cfg.slot_dim, 9, 2);
    assert!(s.routing.as_ref().unwrap().iter().all(|&e| e == Expert::Und));
    assert!(logits_bit_eq(&forward(&p, &s).unwrap(), &forward(&garbage, &s).unwrap()));
}

#[test]
fn unrouted_forward_is_a_contract_error() {
    let cfg = micro(1);
    let p = MoTParams::<f32>::init(cfg.clone(), 0).unwrap();
    let mut s = mixed_sequence(&cfg.layout, cfg.slot_dim, 5, 1);
    s.routing = None;
    assert!(matches!(forward(&p, &s), Err(Error::Contract(_))));
}

#[test]
fn future_tokens_do_not_change_past_logits() {
    let cfg = micro(2);
    let p = random_params::<f32>(cfg.clone(), 3);
    for seed in 0..20 {
        let s = mixed_sequence(&cfg.layout, cfg.slot_dim, 10, seed);
        let base = forward(&p, &s).unwrap();
        let other = mixed_sequence(&cfg.layout, cfg.slot_dim, 10, seed + 1000);
        for t in 0..s.len() - 1 {
            // Keep positions 0..=t from `s`, take the rest from `other`.
            let mut b = SequenceBuilder::new(cfg.layout, cfg.slot_dim);
            for u in 0..s.len() {
                let (src, i) = if u <= t { (&s, u) } else { (&other, u) };
                match src.tokens[i] {
                    Token::Id(id) => {
                        b.push(id, true).unwrap();
                    }
                    Token::Slot(k) => {
                        b.slots(&src.slot_features[k * src.slot_dim..(k + 1) * src.slot_dim]).unwrap();
                    }
                }
            }
            let mut mixed = b.finish();
            route_tokens(&mut mixed, RoutingPolicy::default());
            let out = forward(&p, &mixed).unwrap();
            for u in 0..t {
                // Position t's head depends on the (changed) next token; earlier ones do not.
                assert!(logits_bit_eq(&base[u..=u], &out[u..=u]), "seed {seed} t {t} u {u}");
            }
            if base[t].head == out[t].head {
                assert!(logits_bit_eq(&base[t..=t], &out[t..=t]));
            }
        }
    }
}

/// Independent f64 forward that computes both experts' projections for every
/// position and selects per tag, with explicit per-head softmax loops.
fn reference_forward(p: &MoTParams<f64>, s: &MultimodalSequence) -> Vec<Vec<f64>> {
    let cfg = &p.config;
    let w = &p.weights;
    let d = cfg.d_model;
    let n = s.len();
    let tags: Vec<Expert> = s.routing.as_ref().unwrap().iter().map(|&e| cfg.block_expert(e)).collect();
    let row = |t: &Tensor<f64>, r: usize| t.data()[r * t.cols()..(r + 1) * t.cols()].to_vec();
    let mm = |x: &[f64], m: &Tensor<f64>| -> Vec<f64> {
        let (k, c) = (m.shape()[0], m.shape()[1]);
        (0..c).map(|j| (0..k).map(|i| x[i] * m.data()[i * c + j]).sum()).collect()
    };
    let norm = |x: &[f64], g: &Tensor<f64>| -> Vec<f64> {
        let ms: f64 = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let inv = 1.0 / (ms + cfg.norm_eps).sqrt();
        x.iter().zip(g.data()).map(|(v, g)| v * inv * g).collect()
    };
    let rope = |x: &mut [f64], pos: usize| {
        let hd = d / cfg.n_heads;
        for h in 0..cfg.n_heads {
            for i in 0..hd / 2 {
                let ang = pos as f64 * cfg.rope_base.powf(-2.0 * i as f64 / hd as f64);
                let (a, b) = (x[h * hd + i], x[h * hd + i + hd / 2]);
                x[h * hd + i] = a * ang.cos() - b * ang.sin();
                x[h * hd + i + hd / 2] = a * ang.sin() + b * ang.cos();
            }
        }
    };
    let mut x: Vec<Vec<f64>> = (0..n)
        .map(|t| match s.tokens[t] {
            Token::Id(id) => {
                let gen_side = matches!(s.classes[t], TokenClass::SemGen | TokenClass::PixGen)
                    || matches!(s.specials[t], Some(Special::Boi | Special::Eoi));
                if gen_side {
                    row(&w.gen_embed, id as usize - cfg.layout.text)
                } else {
                    row(&w.und_embed, id as usize)
                }
            }
            Token::Slot(k) => {
                let f: Vec<f64> = s.slot_features[k * s.slot_dim..(k + 1) * s.slot_dim].iter().map(|&v| v as f64).collect();
                mm(&f, &w.projector)
            }
        })
        .collect();
    for l in 0..cfg.n_layers {
        let mut q = Vec::new();
        let mut k = Vec::new();
        let mut v = Vec::new();
        for t in 0..n {
            let both: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = [&w.und.layers[l], &w.gen.layers[l]]
                .iter()
                .map(|b| {
                    let h = norm(&x[t], &b.attn_norm);
                    (mm(&h, &b.wq), mm(&h, &b.wk), mm(&h, &b.wv))
                })
                .collect();
            let pick = if tags[t] == Expert::Und { 0 } else { 1 };
            let (mut qt, mut kt, vt) = both[pick].clone();
            rope(&mut qt, t);
            rope(&mut kt, t);
            q.push(qt);
            k.push(kt);
            v.push(vt);
        }
        let hd = d / cfg.n_heads;
        for t in 0..n {
            let mut att = vec![0.0; d];
            for h in 0..cfg.n_heads {
                let cols = h * hd..(h + 1) * hd;
                let scores: Vec<f64> = (0..=t)
                    .map(|j| cols.clone().map(|c| q[t][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for j in 0..=t {
                    for c in cols.clone() {
                        att[c] += scores[j].exp() / z * v[j][c];
                    }
                }
            }
            let b = if tags[t] == Expert::Und { &w.und.layers[l] } else { &w.gen.layers[l] };
            let o = mm(&att, &b.wo);
            let xt: Vec<f64> = x[t].iter().zip(&o).map(|(a, b)| a + b).collect();
            let h = norm(&xt, &b.ffn_norm);
            let u: Vec<f64> = mm(&h, &b.w_up).into_iter().map(|z| z / (1.0 + (-z).exp())).collect();
            let f = mm(&u, &b.w_down);
            x[t] = xt.iter().zip(&f).map(|(a, b)| a + b).collect();
        }
    }
    let heads = s.heads(&cfg.layout).unwrap();
    (0..n)
        .map(|t| {
            let e = w.expert(tags[t]);
            let h = norm(&x[t], &e.final_norm);
            match heads[t] {
                Expert::Und => mm(&h, &w.und_head),
                Expert::Gen => mm(&h, &w.gen_head),
            }
        })
        .collect()
}

#[test]
fn mixed_sequence_matches_brute_force_reference() {
    let cfg = micro(2);
    let p = random_params::<f64>(cfg.clone(), 4);
    let l = cfg.layout;
    let mut b = SequenceBuilder::new(l, cfg.slot_dim);
    b.push(3, false).unwrap();
    b.push(l.sem_id(2), true).unwrap();
    b.push(l.pix_id(4), true).unwrap();
    let mut s = b.finish();
    route_tokens(&mut s, RoutingPolicy::default());
    assert_eq!(s.routing.as_ref().unwrap(), &[Expert::Und, Expert::Gen, Expert::Gen]);
    let fast = forward(&p, &s).unwrap();
    let slow = reference_forward(&p, &s);
    for (a, b) in fast.iter().zip(&slow) {
        for (x, y) in a.values.iter().zip(b) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }
    // A longer sequence under every policy, slots included.
    for (i, pol) in RoutingPolicy::ALL.iter().enumerate() {
        let mut s = mixed_sequence(&l, cfg.slot_dim, 9, 40 + i as u64);
        route_tokens(&mut s, *pol);
        let fast = forward(&p, &s).unwrap();
        for (a, b) in fast.iter().zip(reference_forward(&p, &s)) {
            for (x, y) in a.values.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn untrained_loss_is_log_vocab() {
    let cfg = micro(2);
    let p = MoTParams::<f64>::init(cfg.clone(), 8).unwrap();
    let l = cfg.layout;
    let mut b = SequenceBuilder::new(l, cfg.slot_dim);
    b.special(Special::Bos, false).unwrap();
    b.special(Special::Boi, true).unwrap();
    for i in 0..4 {
        b.push(l.sem_id(i), true).unwrap();
    }
    let mut s = b.finish();
    route_tokens(&mut s, RoutingPolicy::default());
    let loss = compute_loss(&forward(&p, &s).unwrap(), &s, &l).unwrap();
    assert!((loss - (cfg.gen_vocab() as f64).ln()).abs() < 0.1);
    let t = text_sequence(&l, cfg.slot_dim, 6, 1);
    let p = p.cast::<f64>();
    let loss = compute_loss(&forward(&p, &t).unwrap(), &t, &l).unwrap();
    assert!((loss - (cfg.und_vocab() as f64).ln()).abs() < 0.1);
}

#[test]
fn all_masked_sequence_has_zero_loss() {
    let cfg = micro(1);
    let p = random_params::<f64>(cfg.clone(), 2);
    let s = mixed_sequence(&cfg.layout, cfg.slot_dim, 6, 3).without_loss();
    assert_eq!(compute_loss(&forward(&p, &s).unwrap(), &s, &cfg.layout).unwrap(), 0.0);
    assert_eq!(sequence_nll(&p, &s).unwrap(), (0.0, 0));
}

#[test]
fn head_target_mismatch_is_a_contract_error() {
    let cfg = micro(1);
    let p = random_params::<f64>(cfg.clone(), 2);
    let s = mixed_sequence(&cfg.layout, cfg.slot_dim, 8, 5);
    let mut logits = forward(&p, &s).unwrap();
    let t = (0..s.len()).find(|&t| s.loss_mask[t]).unwrap();
    logits[t].head = match logits[t].head {
        Expert::Und => Expert::Gen,
        Expert::Gen => Expert::Und,
    };
    assert!(matches!(compute_loss(&logits, &s, &cfg.layout), Err(Error::Contract(_))));
}

#[test]
fn frozen_side_gets_exactly_zero_gradient() {
    let cfg = micro(2);
    let p = random_params::<f64>(cfg.clone(), 6);
    let s = mixed_sequence(&cfg.layout, cfg.slot_dim, 10, 7);
    assert!(s.routing.as_ref().unwrap().contains(&Expert::Gen));
    let mut g = Graph::new();
    let w = register_params(&mut g, &p, |i| i.group.trainable(Architecture::MoT));
    let fv = build_forward(&mut g, &cfg, &w, &s).unwrap();
    let loss = build_loss(&mut g, &cfg.layout, &fv, &s, 1.0).unwrap();
    let grads = collect_gradients(&g.backward(loss).unwrap(), &w);
    for (info, t) in grads.entries() {
        if info.group.is_und_side() {
            assert!(t.data().iter().all(|&x| x == 0.0), "{}", info.name);
        }
    }
    for l in &grads.gen.layers {
        assert!(l.wq.sum_squares() > 0.0 && l.w_down.sum_squares() > 0.0);
    }
    assert!(grads.gen_head.sum_squares() > 0.0);
}

#[test]
fn masked_positions_contribute_no_gradient() {
    let cfg = micro(1);
    let p = random_params::<f64>(cfg.clone(), 6);
    let s = mixed_sequence(&cfg.layout, cfg.slot_dim, 8, 9).without_loss();
    let mut g = Graph::new();
    let w = register_params(&mut g, &p, |_| true);
    let fv = build_forward(&mut g, &cfg, &w, &s).unwrap();
    let loss = build_loss(&mut g, &cfg.layout, &fv, &s, 1.0).unwrap();
    let grads = collect_gradients(&g.backward(loss).unwrap(), &w);
    assert!(grads.values().iter().all(|t| t.data().iter().all(|&x| x == 0.0)));
}

#[test]
fn two_layer_micro_model_passes_gradient_check() {
    let cfg = micro(2);
    let p = random_params::<f64>(cfg.clone(), 10);
    let mut s = mixed_sequence(&cfg.layout, cfg.slot_dim, 9, 11);
    route_tokens(&mut s, RoutingPolicy::default());
    let tensors: Vec<Tensor<f64>> = p.weights.values().into_iter().cloned().collect();
    let layers = cfg.n_layers;
    let report = grad_check(
        |g, vars| {
            let w = MoTWeights::from_canonical(layers, vars.to_vec());
            let fv = build_forward(g, &cfg, &w, &s)?;
            build_loss(g, &cfg.layout, &fv, &s, 1.0 / s.masked_count() as f64)
        },
        &tensors,
        1e-5,
        300,
        12,
    )
    .unwrap();
    assert!(report.checked >= 200);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn understanding_image_encoding() {
    let cfg = ModelConfig {
        slot_dim: 12,
        ..micro(1)
    };
    let p = random_params::<f32>(cfg, 1);
    let img = crate::data::render(&crate::data::Attributes::from_index(30), 24, 0.1).unwrap();
    let a = encode_und_image(&img, &p, 2).unwrap();
    assert_eq!(a.shape(), &[144, 8]);
    assert!(a.bit_eq(&encode_und_image(&img, &p, 2).unwrap()));
    let zero = ToyImage::new(24, 24, vec![0.0; 24 * 24 * 3], None).unwrap();
    assert!(encode_und_image(&zero, &p, 2).unwrap().data().iter().all(|&x| x == 0.0));
    assert!(matches!(encode_und_image(&img, &p, 4), Err(Error::Config(_))));
}

#[test]
fn frozen_report_names_corrupted_tensor() {
    let p = MoTParams::<f32>::init(micro(2), 1).unwrap();
    let r = assert_frozen(&p, &p.clone()).unwrap();
    assert!(r.passed());
    assert!(r.checked.contains(&"projector".to_string()));
    let mut q = p.clone();
    q.weights.und.layers[1].wv.data_mut()[3] += 1e-3;
    let r = assert_frozen(&p, &q).unwrap();
    assert_eq!(r.mismatched, vec!["und.layers.1.wv".to_string()]);
    assert!(matches!(r.into_result(), Err(Error::FrozenDrift(_))));
    // Generation-side changes are not drift.
    let mut q = p.clone();
    q.weights.gen.layers[0].wq.data_mut()[0] += 1.0;
    assert!(assert_frozen(&p, &q).unwrap().passed());
    let other = MoTParams::<f32>::init(micro(1), 1).unwrap();
    assert!(matches!(assert_frozen(&p, &other), Err(Error::Config(_))));
}

#[test]
fn incremental_decoder_reproduces_teacher_forced_logits() {
    let cfg = micro(2);
    let p = random_params::<f32>(cfg.clone(), 12);
    for (i, pol) in RoutingPolicy::ALL.iter().enumerate() {
        let mut s = mixed_sequence(&cfg.layout, cfg.slot_dim, 12, 50 + i as u64);
        route_tokens(&mut s, *pol);
        let full = forward(&p, &s).unwrap();
        let mut dec = IncrementalDecoder::new(&p);
        let tags = s.routing.clone().unwrap();
        for (t, tok) in s.tokens.iter().enumerate() {
            let slot = match tok {
                Token::Slot(k) => Some(&s.slot_features[k * s.slot_dim..(k + 1) * s.slot_dim]),
                _ => None,
            };
            dec.push(*tok, tags[t], slot).unwrap();
            let got = dec.logits(full[t].head).unwrap();
            assert!(
                got.iter().zip(&full[t].values).all(|(a, b)| a.to_bits() == b.to_bits()),
                "policy {i} position {t}"
            );
        }
    }
}

#[test]
fn dense_variant_uses_und_blocks_everywhere() {
    let mut cfg = micro(1);
    cfg.architecture = Architecture::Dense;
    let p = random_params::<f32>(cfg.clone(), 3);
    let mut garbage = p.clone();
    for x in garbage.weights.gen.layers[0].wk.data_mut() {
        *x = 3.0;
    }
    let s = mixed_sequence(&cfg.layout, cfg.slot_dim, 8, 4);
    assert!(logits_bit_eq(&forward(&p, &s).unwrap(), &forward(&garbage, &s).unwrap()));
}

mod persistence {
    use super::*;

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut c = Checkpoint::new(random_params::<f32>(micro(2), 1));
        c.meta = serde_json::json!({"step": 12, "lr": 1.25e-5, "stage": "s1"});
        c.extra.push(TensorEntry {
            name: "optim.m.gen_head".into(),
            shape: vec![2, 3],
            data: TensorData::F64(vec![0.1, -2.0, 3.5, 1e-300, 0.0, -0.0]),
        });
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn tokenizer_survives_round_trip() {
        let world = crate::data::World::fit(
            crate::data::WorldConfig::default(),
            &crate::tokenizers::TokenizerConfig {
                kmeans_iters: 3,
                ..Default::default()
            },
        )
        .unwrap();
        let mut c = Checkpoint::new(MoTParams::init(micro(1), 1).unwrap());
        c.tokenizer = Some(world.tokenizer.clone());
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.tokenizer.as_ref(), Some(&world.tokenizer));
    }

    #[test]
    fn corruption_truncation_and_version_are_reported() {
        let c = Checkpoint::new(MoTParams::<f32>::init(micro(1), 1).unwrap());
        let bytes = c.to_bytes().unwrap();
        for i in [0usize, 9, 40, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[i] ^= 0x10;
            assert!(Checkpoint::from_bytes(&bad).is_err(), "byte {i}");
        }
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 7]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        let msg = Checkpoint::from_bytes(&v2).unwrap_err().to_string();
        assert!(msg.contains("version 2"), "{msg}");
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = Checkpoint::new(MoTParams::<f32>::init(micro(1), 4).unwrap());
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
