use llip::contextualization::{contextualize, mixing_weights, MixerConfig};
use llip::data::grammar_vocabulary;
use llip::evaluation::{
    class_text_features, recall_at_k, score_matrix, image_tokens, text_features, zero_shot_classify, PromptSet,
};
use llip::model::{init_params, Model, ModelConfig};
use llip::numerics::{Tape, Tensor};
use llip::objectives::{llip_loss, LossParams};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NORM_TOL: f64 = 1e-6;
const LOSS_TOL: f64 = 1e-6;
const TEMPLATE_TOL: f32 = 1e-6;

fn uniform(shape: &[usize], scale: f64, seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * (2.0 * r.random::<f64>() - 1.0)).collect()).unwrap()
}

/// A small model whose mixer width, head count and token count come from the grid.
fn grid_config(width: usize, heads: usize, k: usize, tau: f64) -> ModelConfig {
    let mut c = llip::checks::tiny_config();
    c.vit.width = width;
    c.text.width = width;
    c.vit.heads = 1;
    c.text.heads = 1;
    c.vit.mixture_tokens = k;
    c.mixer = MixerConfig { heads, tau };
    c
}

fn mixer_grid() -> impl Strategy<Value = (usize, usize, usize, f64, usize, usize, u64)> {
    (
        prop::sample::select(vec![4usize, 8, 16]),
        prop::sample::select(vec![1usize, 2, 4]),
        1usize..6,
        0.5f64..10.0,
        1usize..5,
        1usize..5,
        any::<u64>(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mixing_weights_normalize((width, heads, k, tau, ni, nt, seed) in mixer_grid()) {
        let cfg = grid_config(width, heads, k, tau);
        let store = init_params::<f64>(&cfg, seed).unwrap();
        let mut tape = Tape::new();
        let p = store.register(&mut tape, false).unwrap();
        let h = tape.constant(uniform(&[ni, k, width], 30.0, seed ^ 1)).unwrap();
        let g = tape.constant(uniform(&[nt, width], 30.0, seed ^ 2)).unwrap();
        let phi = mixing_weights(&mut tape, &p, h, g, &cfg.mixer).unwrap();
        prop_assert_eq!(tape.shape(phi), &[ni, nt, heads, k]);
        for row in tape.data(phi).chunks(k) {
            prop_assert!(row.iter().all(|w| *w >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= NORM_TOL);
        }
    }

    #[test]
    fn features_are_unit_norm((width, heads, k, tau, ni, nt, seed) in mixer_grid()) {
        let cfg = grid_config(width, heads, k, tau);
        let store = init_params::<f64>(&cfg, seed).unwrap();
        let mut tape = Tape::new();
        let p = store.register(&mut tape, false).unwrap();
        let h = tape.constant(uniform(&[ni, k, width], 3.0, seed ^ 3)).unwrap();
        let g = tape.constant(uniform(&[nt, width], 3.0, seed ^ 4)).unwrap();
        let cb = contextualize(&mut tape, &p, h, g, &cfg.mixer).unwrap();
        for v in [cb.z, cb.z_text] {
            for row in tape.data(v).chunks(width) {
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() <= NORM_TOL, "norm {}", n);
            }
        }
    }

    #[test]
    fn loss_ignores_batch_order(
        (width, heads, k, tau, n, _, seed) in mixer_grid(),
        n_extra in 1usize..4,
        a in 0.5f64..20.0,
        b in -12.0f64..2.0,
    ) {
        let n = n + n_extra;
        let cfg = grid_config(width, heads, k, tau);
        let store = init_params::<f64>(&cfg, seed).unwrap();
        let h = uniform(&[n, k, width], 3.0, seed ^ 5);
        let g = uniform(&[n, width], 3.0, seed ^ 6);
        let mut order: Vec<usize> = (0..n).collect();
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 7);
        for i in (1..n).rev() {
            order.swap(i, r.random_range(0..=i));
        }
        let permute = |t: &Tensor<f64>| {
            let row = t.numel() / n;
            let data = order.iter().flat_map(|&i| t.data()[i * row..(i + 1) * row].to_vec()).collect();
            Tensor::new(t.shape(), data).unwrap()
        };
        let loss = |h: Tensor<f64>, g: Tensor<f64>| {
            let mut tape = Tape::new();
            let p = store.register(&mut tape, false).unwrap();
            let hv = tape.constant(h).unwrap();
            let gv = tape.constant(g).unwrap();
            let cb = contextualize(&mut tape, &p, hv, gv, &cfg.mixer).unwrap();
            let lp = LossParams::constant(&mut tape, a, b).unwrap();
            let l = llip_loss(&mut tape, &cb, &lp).unwrap();
            tape.value(l).item()
        };
        let base = loss(h.clone(), g.clone());
        let shuffled = loss(permute(&h), permute(&g));
        prop_assert!((base - shuffled).abs() <= LOSS_TOL, "{} vs {}", base, shuffled);
    }

    #[test]
    fn recall_grows_with_cutoff(n in 1usize..40, seed in any::<u64>(), levels in 1u32..6) {
        // few distinct levels force ties
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n * n).map(|_| r.random_range(0..levels) as f32).collect();
        let scores = Tensor::new(&[n, n], data).unwrap();
        let ks: Vec<usize> = (1..=n).collect();
        let rep = recall_at_k(&scores, &ks).unwrap();
        for series in [&rep.image_to_text, &rep.text_to_image] {
            prop_assert!(series.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(*series.last().unwrap(), 1.0);
        }
    }
}

fn classifier(seed: u64, k: usize) -> Model {
    let vocab = grammar_vocabulary();
    let mut cfg = ModelConfig::desk(vocab.len());
    cfg.vit.depth = 1;
    cfg.text.depth = 1;
    cfg.vit.width = 32;
    cfg.text.width = 32;
    cfg.vit.mixture_tokens = k;
    let mut m = Model::new(cfg, seed).unwrap();
    // sharper attention than the init scale gives
    for (name, t) in m.params.iter_mut() {
        if name.starts_with("mix.") {
            t.data_mut().iter_mut().for_each(|v| *v *= 20.0);
        }
    }
    m
}

fn images(n: usize, seed: u64) -> Tensor<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[n, 3, 32, 32], (0..n * 3 * 32 * 32).map(|_| r.random::<f32>()).collect()).unwrap()
}

fn shape_classes() -> Vec<String> {
    PromptSet::shapes().classes
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn single_template_is_the_plain_path(seed in any::<u64>(), k in 1usize..5, t in 0usize..3) {
        let model = classifier(seed, k);
        let vocab = grammar_vocabulary();
        let template = llip::evaluation::DEFAULT_TEMPLATES[t].to_string();
        let prompts = PromptSet::new(shape_classes(), vec![template]).unwrap();
        let averaged = class_text_features(&model, &prompts, &vocab).unwrap();
        let seqs: Vec<Vec<usize>> = (0..prompts.classes.len())
            .map(|c| vocab.tokenize(&prompts.render(c, 0), model.cfg.text.context_length))
            .collect();
        let plain = text_features(&model, &seqs).unwrap();
        prop_assert_eq!(&averaged, &plain);
        let tokens = image_tokens(&model, &images(5, seed)).unwrap();
        prop_assert_eq!(
            score_matrix(&model, &tokens, &averaged).unwrap(),
            score_matrix(&model, &tokens, &plain).unwrap()
        );
    }

    #[test]
    fn duplicated_templates_match_one(seed in any::<u64>(), k in 1usize..5, copies in 2usize..5) {
        let model = classifier(seed, k);
        let vocab = grammar_vocabulary();
        let template = "a photo of a {}".to_string();
        let one = PromptSet::new(shape_classes(), vec![template.clone()]).unwrap();
        let many = PromptSet::new(shape_classes(), vec![template; copies]).unwrap();
        let imgs = images(4, seed ^ 9);
        let a = llip::evaluation::zero_shot_scores(&model, &imgs, &one, &vocab).unwrap();
        let b = llip::evaluation::zero_shot_scores(&model, &imgs, &many, &vocab).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= TEMPLATE_TOL, "{}", a.max_abs_diff(&b));
    }

    #[test]
    fn predictions_follow_class_order(seed in any::<u64>(), k in 1usize..5) {
        let model = classifier(seed, k);
        let vocab = grammar_vocabulary();
        let classes = shape_classes();
        let mut order: Vec<usize> = (0..classes.len()).collect();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..order.len()).rev() {
            order.swap(i, r.random_range(0..=i));
        }
        let templates: Vec<String> = llip::evaluation::DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect();
        let permuted: Vec<String> = order.iter().map(|&i| classes[i].clone()).collect();
        let imgs = images(6, seed ^ 11);
        let base = zero_shot_classify(&model, &imgs, &PromptSet::new(classes, templates.clone()).unwrap(), &vocab).unwrap();
        let moved = zero_shot_classify(&model, &imgs, &PromptSet::new(permuted, templates).unwrap(), &vocab).unwrap();
        let mapped: Vec<usize> = moved.iter().map(|&c| order[c]).collect();
        prop_assert_eq!(base, mapped);
    }
}

#[test]
fn one_class_is_always_predicted() {
    let model = classifier(3, 4);
    let prompts = PromptSet::new(vec!["circle".into()], vec!["a photo of a {}".into()]).unwrap();
    let pred = zero_shot_classify(&model, &images(7, 1), &prompts, &grammar_vocabulary()).unwrap();
    assert_eq!(pred, vec![0; 7]);
}

#[test]
fn empty_class_list_is_a_contract_error() {
    let model = classifier(3, 4);
    let prompts = PromptSet::new(vec![], vec!["a {}".into()]).unwrap();
    assert!(matches!(
        zero_shot_classify(&model, &images(2, 1), &prompts, &grammar_vocabulary()),
        Err(llip::LlipError::Contract(_))
    ));
}
