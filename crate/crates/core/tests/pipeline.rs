use llip::checks::tiny_config;
use llip::contextualization::{contextualize, pairwise_scores, pool_variant, PoolingVariant};
use llip::data::vocab::{BOS_ID, EOS_ID};
use llip::data::{grammar_vocabulary, training_scenes};
use llip::encoders::{encode_image, encode_text};
use llip::evaluation::{
    features_for_caption, flops_estimate, image_tokens, recall_at_k, score_matrix, shortcut_diagnostic,
    spectrum_of_features, text_features,
};
use llip::model::{batch_loss, forward_pairs, init_params, Model, ModelConfig};
use llip::numerics::{Tape, Tensor};
use llip::objectives::{llip_loss, siglip_loss, LossParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const LOSS_TOL: f64 = 1e-4;
const FLOP_TOL: f64 = 0.05;
const COLLAPSE_TOL: f64 = 1e-6;

fn random_images(n: usize, size: usize, seed: u64) -> Tensor<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[n, 3, size, size], (0..n * 3 * size * size).map(|_| r.random::<f32>()).collect()).unwrap()
}

fn captions(n: usize, cfg: &ModelConfig, seed: u64) -> Vec<Vec<usize>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut seq = vec![BOS_ID];
            seq.extend((0..3).map(|_| r.random_range(4..cfg.text.vocab_size)));
            seq.push(EOS_ID);
            seq
        })
        .collect()
}

fn with_tokens(k: usize, variant: PoolingVariant) -> ModelConfig {
    let mut c = tiny_config();
    c.vit.mixture_tokens = k;
    c.variant = variant;
    c
}

#[test]
fn single_token_llip_scores_equal_the_siglip_path() {
    let llip_cfg = with_tokens(1, PoolingVariant::Llip);
    let llip = Model::new(llip_cfg.clone(), 4).unwrap();
    let siglip = Model::from_params(with_tokens(1, PoolingVariant::SiglipCls), llip.params.clone()).unwrap();
    let tokens = image_tokens(&llip, &random_images(6, 8, 1)).unwrap();
    let text = text_features(&llip, &captions(5, &llip_cfg, 2)).unwrap();
    let a = score_matrix(&llip, &tokens, &text).unwrap();
    let b = score_matrix(&siglip, &tokens, &text).unwrap();
    assert_eq!(a.data(), b.data());

    let mut tape = Tape::<f32>::new();
    let p = llip.params.register(&mut tape, false).unwrap();
    let cb = forward_pairs(&mut tape, &p, &llip_cfg, &random_images(3, 8, 5), &captions(4, &llip_cfg, 6)).unwrap();
    let z = tape.value(cb.z);
    for i in 0..3 {
        for j in 1..4 {
            assert_eq!(z.row(i * 4 + j), z.row(i * 4));
        }
    }
}

#[test]
fn single_token_llip_loss_equals_siglip_loss() {
    let cfg = with_tokens(1, PoolingVariant::Llip);
    let store = init_params::<f64>(&cfg, 9).unwrap();
    let images = random_images(4, 8, 3).cast::<f64>();
    let seqs = captions(4, &cfg, 4);
    let run = |variant: PoolingVariant| {
        let mut c = cfg.clone();
        c.variant = variant;
        let mut tape = Tape::new();
        let p = store.register(&mut tape, false).unwrap();
        let l = batch_loss(&mut tape, &p, &c, &images, &seqs).unwrap();
        tape.value(l).item()
    };
    assert_eq!(run(PoolingVariant::Llip), run(PoolingVariant::SiglipCls));
}

fn zero_similarity(tape: &mut Tape<f64>, n: usize) -> llip::contextualization::ContextualizedBatch {
    // image features along e0, caption features along e1
    let d = 2;
    let mut z = vec![0.0; n * n * d];
    z.chunks_mut(d).for_each(|r| r[0] = 1.0);
    let mut zt = vec![0.0; n * d];
    zt.chunks_mut(d).for_each(|r| r[1] = 1.0);
    llip::contextualization::ContextualizedBatch {
        z: tape.constant(Tensor::new(&[n, n, d], z).unwrap()).unwrap(),
        z_text: tape.constant(Tensor::new(&[n, d], zt).unwrap()).unwrap(),
    }
}

fn log_sigmoid(x: f64) -> f64 {
    -(1.0 + (-x).exp()).ln()
}

#[test]
fn loss_matches_closed_forms() {
    let mut tape = Tape::new();
    let cb = zero_similarity(&mut tape, 2);
    let lp = LossParams::constant(&mut tape, 1.0, 0.0).unwrap();
    let l = llip_loss(&mut tape, &cb, &lp).unwrap();
    assert!((tape.value(l).item() - 2.0 * 2f64.ln()).abs() <= LOSS_TOL);

    let mut tape = Tape::new();
    let one = tape.constant(Tensor::new(&[1, 1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
    let zt = tape.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
    let cb = llip::contextualization::ContextualizedBatch { z: one, z_text: zt };
    let lp = LossParams::constant(&mut tape, 1.0, 0.0).unwrap();
    let l = llip_loss(&mut tape, &cb, &lp).unwrap();
    assert!((tape.value(l).item() + log_sigmoid(1.0)).abs() <= LOSS_TOL);

    let mut tape = Tape::new();
    let cb = zero_similarity(&mut tape, 2);
    let lp = LossParams::constant(&mut tape, 1.0, -10.0).unwrap();
    let l = llip_loss(&mut tape, &cb, &lp).unwrap();
    let expected = -(2.0 * log_sigmoid(-10.0) + 2.0 * log_sigmoid(10.0)) / 2.0;
    assert!((tape.value(l).item() - expected).abs() <= LOSS_TOL);
    assert!((tape.value(l).item() - 10.0000908).abs() <= LOSS_TOL);

    let mut tape = Tape::new();
    let img = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap()).unwrap();
    let txt = tape.constant(Tensor::new(&[2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap()).unwrap();
    let lp = LossParams::constant(&mut tape, 1.0, 0.0).unwrap();
    let l = siglip_loss(&mut tape, img, txt, &lp).unwrap();
    assert!((tape.value(l).item() - 2.0 * 2f64.ln()).abs() <= LOSS_TOL);
}

#[test]
fn every_parameter_receives_gradient() {
    let data = training_scenes(8, 3).unwrap();
    let vocab = grammar_vocabulary();
    for variant in [PoolingVariant::Llip, PoolingVariant::LearnedAverage] {
        let mut cfg = ModelConfig::desk(vocab.len());
        cfg.vit.depth = 1;
        cfg.text.depth = 1;
        cfg.vit.mixture_tokens = 4;
        cfg.variant = variant;
        let store = init_params::<f32>(&cfg, 7).unwrap();
        let idx: Vec<usize> = (0..8).collect();
        let seqs: Vec<Vec<usize>> = idx
            .iter()
            .map(|&i| vocab.tokenize(&data.captions[i][0], cfg.text.context_length))
            .collect();
        let mut tape = Tape::new();
        let p = store.register(&mut tape, true).unwrap();
        let loss = batch_loss(&mut tape, &p, &cfg, &data.images(&idx), &seqs).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (name, v) in p.iter() {
            let g = grads.get(v).unwrap_or_else(|| panic!("{} has no gradient ({})", name, variant));
            assert!(g.iter().any(|x| *x != 0.0), "{} gradient is zero ({})", name, variant);
            assert!(g.iter().all(|x| x.is_finite()), "{} gradient not finite", name);
        }
    }
}

#[test]
fn loss_pushes_on_the_image_tokens() {
    let cfg = with_tokens(3, PoolingVariant::Llip);
    let store = init_params::<f64>(&cfg, 2).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for n in 2..5 {
        let mut tape = Tape::new();
        let p = store.register(&mut tape, false).unwrap();
        let h = Tensor::new(&[n, 3, 16], (0..n * 48).map(|_| r.random::<f64>() - 0.5).collect()).unwrap();
        let h = tape.leaf(h.with_grad()).unwrap();
        let g = Tensor::new(&[n, 16], (0..n * 16).map(|_| r.random::<f64>() - 0.5).collect()).unwrap();
        let g = tape.constant(g).unwrap();
        let cb = contextualize(&mut tape, &p, h, g, &cfg.mixer).unwrap();
        let lp = LossParams::from_vars(&p).unwrap();
        let l = llip_loss(&mut tape, &cb, &lp).unwrap();
        let grads = tape.backward(l).unwrap();
        assert!(grads.get(h).unwrap().iter().any(|x| *x != 0.0));
    }
}

#[test]
fn instrumented_count_matches_estimate() {
    let classes = 5;
    for (k, variant, patches) in [
        (2, PoolingVariant::Llip, false),
        (4, PoolingVariant::Llip, true),
        (1, PoolingVariant::SiglipCls, false),
    ] {
        let mut cfg = with_tokens(k, variant);
        cfg.vit.emit_patch_tokens = patches;
        let model = Model::new(cfg.clone(), 1).unwrap();
        let mut tape = Tape::<f32>::new();
        let p = model.params.register(&mut tape, false).unwrap();
        let h = encode_image(&mut tape, &p, &random_images(1, 8, 2), &cfg.vit).unwrap();
        let image_side = tape.multiply_adds();
        let g = encode_text(&mut tape, &p, &captions(classes, &cfg, 3), &cfg.text).unwrap();
        let text_side = tape.multiply_adds() - image_side;
        let before = tape.multiply_adds();
        let cb = pool_variant(&mut tape, &p, h.values, g.values, &cfg.mixer, variant).unwrap();
        pairwise_scores(&mut tape, &cb).unwrap();
        let mixer = tape.multiply_adds() - before;

        let est = flops_estimate(&cfg, classes);
        let counted = 2 * (image_side + mixer);
        let rel = (counted as f64 - est.total as f64).abs() / est.total as f64;
        assert!(rel <= FLOP_TOL, "K={} counted {} estimated {}", k, counted, est.total);
        let text_rel = (2 * text_side) as f64 / est.text as f64 - 1.0;
        assert!(text_rel.abs() <= FLOP_TOL, "text counted {} estimated {}", 2 * text_side, est.text);
    }
}

#[test]
fn overhead_ratio_falls_with_width() {
    let mut last = f64::INFINITY;
    for width in [64, 128, 256, 512] {
        let mut cfg = ModelConfig::desk(30);
        cfg.vit.width = width;
        cfg.text.width = width;
        let r = flops_estimate(&cfg, 8).overhead_ratio();
        assert!(r > 1.0 && r < last, "width {} ratio {}", width, r);
        last = r;
    }
}

#[test]
fn random_scores_recall_at_one_is_chance() {
    let n = 100;
    let seeds = 400;
    let mut r1 = Vec::with_capacity(seeds);
    for s in 0..seeds as u64 {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let data: Vec<f32> = (0..n * n).map(|_| StandardNormal.sample(&mut r)).collect();
        let rep = recall_at_k(&Tensor::new(&[n, n], data).unwrap(), &[1]).unwrap();
        r1.push(rep.image_to_text[0]);
        r1.push(rep.text_to_image[0]);
    }
    let mean = r1.iter().sum::<f64>() / r1.len() as f64;
    let sd = (r1.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / r1.len() as f64).sqrt();
    assert!((mean - 0.01).abs() <= 0.02, "mean {}", mean);
    assert!((mean - 0.01).abs() <= 3.0 * sd / (r1.len() as f64).sqrt(), "mean {} sd {}", mean, sd);
    assert!(sd <= 0.02, "sd {}", sd);
}

#[test]
fn duplicate_captions_rank_by_index() {
    // captions 0 and 1 are the same text, so their score columns coincide
    let col = [0.9f32, 0.9, 0.1];
    let mut s = vec![0.0f32; 9];
    for i in 0..3 {
        s[i * 3] = col[i];
        s[i * 3 + 1] = col[i];
        s[i * 3 + 2] = if i == 2 { 0.5 } else { 0.0 };
    }
    let rep = recall_at_k(&Tensor::new(&[3, 3], s).unwrap(), &[1, 2]).unwrap();
    // image 0 finds caption 0 first; image 1 sees caption 0 ahead of its own
    assert_eq!(rep.image_to_text, vec![2.0 / 3.0, 1.0]);
}

#[test]
fn isotropic_gaussian_spectrum() {
    let (n, d) = (20_000, 8);
    let mut r = ChaCha8Rng::seed_from_u64(17);
    let rows: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut r)).collect();
    let rep = spectrum_of_features(&rows, d, "gaussian").unwrap();
    let v = &rep.singular_values;
    assert_eq!(v.len(), d);
    assert!(v.windows(2).all(|w| w[0] >= w[1]));
    assert!(v.iter().all(|x| *x > 0.0));
    assert!(v[0] / v[d - 1] < 3.0, "{:?}", v);

    // trace and Frobenius norm of the directly computed covariance
    let mean: Vec<f64> = (0..d).map(|c| (0..n).map(|i| rows[i * d + c]).sum::<f64>() / n as f64).collect();
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += (rows[i * d + a] - mean[a]) * (rows[i * d + b] - mean[b]) / n as f64;
            }
        }
    }
    let trace: f64 = (0..d).map(|a| cov[a * d + a]).sum();
    let frob: f64 = cov.iter().map(|x| x * x).sum();
    assert!((v.iter().sum::<f64>() - trace).abs() <= 1e-9 * trace);
    assert!((v.iter().map(|x| x * x).sum::<f64>() - frob).abs() <= 1e-9 * frob);
    assert!(rep.effective_rank > 0.95 * d as f64 && rep.effective_rank <= d as f64);
}

#[test]
fn scaled_copies_of_one_direction_have_rank_one() {
    let d = 6;
    let dir = [0.3, -1.2, 0.5, 2.0, 0.0, 0.7];
    let rows: Vec<f64> = (0..50).flat_map(|i| dir.iter().map(move |x| x * (i as f64 * 0.37 - 4.0))).collect();
    let rep = spectrum_of_features(&rows, d, "line").unwrap();
    assert!(rep.singular_values[0] > 0.0);
    assert!(rep.singular_values[1..].iter().all(|x| *x <= 1e-6));
}

#[test]
fn random_model_features_depend_on_the_image() {
    let cfg = with_tokens(4, PoolingVariant::Llip);
    let model = Model::new(cfg.clone(), 3).unwrap();
    let d = shortcut_diagnostic(&model, &random_images(6, 8, 4), &captions(1, &cfg, 5)[0]).unwrap();
    assert!(d > 0.0);
}

#[test]
fn image_blind_model_has_no_dispersion() {
    let cfg = with_tokens(4, PoolingVariant::Llip);
    let mut model = Model::new(cfg.clone(), 3).unwrap();
    model.params.get_mut("vis.patch.w").unwrap().data_mut().fill(0.0);
    let images = random_images(6, 8, 4);
    for c in captions(3, &cfg, 5) {
        let d = shortcut_diagnostic(&model, &images, &c).unwrap();
        assert!(d <= COLLAPSE_TOL, "{}", d);
    }
    // the features still vary with the caption
    let tokens = image_tokens(&model, &images).unwrap();
    let text = text_features(&model, &captions(2, &cfg, 6)).unwrap();
    let a = features_for_caption(&model, &tokens, &text.slice_leading(0, 1).unwrap()).unwrap();
    let b = features_for_caption(&model, &tokens, &text.slice_leading(1, 1).unwrap()).unwrap();
    assert_ne!(a, b);
}

#[test]
fn single_image_dispersion_is_a_contract_error() {
    let cfg = with_tokens(2, PoolingVariant::Llip);
    let model = Model::new(cfg.clone(), 3).unwrap();
    assert!(matches!(
        shortcut_diagnostic(&model, &random_images(1, 8, 4), &captions(1, &cfg, 5)[0]),
        Err(llip::LlipError::Contract(_))
    ));
}
