//! Zero-shot classification, retrieval, the shortcut diagnostic, feature
//! spectra and FLOP accounting.
//!
//! Everything here is inference only: parameters are registered as constants
//! and batches are processed in fixed-size chunks so memory stays bounded.

mod flops;
mod spectrum;

pub use flops::{block_macs, flops_estimate, image_encoder_macs, mixer_macs, text_encoder_macs, FlopReport};
pub use spectrum::{
    effective_rank, spectrum, spectrum_csv, spectrum_of_features, symmetric_eigenvalues, token_features,
    SpectrumReport, JACOBI_TOL, MAX_SWEEPS,
};

use crate::contextualization::{pairwise_scores, pool_variant};
use crate::data::{Dataset, Shape, Vocabulary};
use crate::encoders::{encode_image, encode_text};
use crate::error::{LlipError, Result};
use crate::model::Model;
use crate::numerics::{Tape, Tensor};

/// Images (or captions) per inference chunk.
pub const INFER_CHUNK: usize = 64;

/// Default prompt templates; `{}` is replaced by the class name.
pub const DEFAULT_TEMPLATES: [&str; 3] = ["a photo of a {}", "an image of a {}", "a {} on a background"];

/// Retrieval gallery size for held-out evaluation.
pub const GALLERY_SIZE: usize = 100;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Class names and the templates each is rendered under.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub classes: Vec<String>,
    pub templates: Vec<String>,
}

impl PromptSet {
    pub fn new(classes: Vec<String>, templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(LlipError::Config("a prompt set needs at least one template".into()));
        }
        if let Some(t) = templates.iter().find(|t| t.matches("{}").count() != 1) {
            return Err(LlipError::Config(format!(
                "template `{}` must contain exactly one `{{}}` placeholder",
                t
            )));
        }
        Ok(PromptSet { classes, templates })
    }

    /// The eight shape classes under the default templates.
    pub fn shapes() -> Self {
        PromptSet {
            classes: Shape::ALL.iter().map(|s| s.word().to_string()).collect(),
            templates: DEFAULT_TEMPLATES.iter().map(|t| t.to_string()).collect(),
        }
    }

    pub fn render(&self, class: usize, template: usize) -> String {
        self.templates[template].replacen("{}", &self.classes[class], 1)
    }
}

/// Raw image-encoder tokens `[N, T, D]`.
pub fn image_tokens(model: &Model, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(LlipError::Input("empty image batch".into()));
    }
    let mut data = Vec::new();
    let mut shape = Vec::new();
    for start in (0..n).step_by(INFER_CHUNK) {
        let chunk = images.slice_leading(start, INFER_CHUNK.min(n - start))?;
        let mut tape = Tape::new();
        let p = model.params.register(&mut tape, false)?;
        let h = encode_image(&mut tape, &p, &chunk, &model.cfg.vit)?;
        let v = tape.value(h.values);
        shape = v.shape().to_vec();
        data.extend_from_slice(v.data());
    }
    shape[0] = n;
    Tensor::new(&shape, data)
}

/// Raw caption features `[N, D_t]` for token sequences.
pub fn text_features(model: &Model, seqs: &[Vec<usize>]) -> Result<Tensor<f32>> {
    if seqs.is_empty() {
        return Err(LlipError::Input("empty caption batch".into()));
    }
    let mut data = Vec::with_capacity(seqs.len() * model.cfg.text.width);
    for chunk in seqs.chunks(INFER_CHUNK) {
        let mut tape = Tape::new();
        let p = model.params.register(&mut tape, false)?;
        let g = encode_text(&mut tape, &p, chunk, &model.cfg.text)?;
        data.extend_from_slice(tape.data(g.values));
    }
    Tensor::new(&[seqs.len(), model.cfg.text.width], data)
}

/// Scores `[N_img, N_txt]` from precomputed image tokens and caption features.
pub fn score_matrix(model: &Model, tokens: &Tensor<f32>, text: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (ni, nt) = (tokens.shape()[0], text.shape()[0]);
    let mut out = vec![0.0f32; ni * nt];
    for i0 in (0..ni).step_by(INFER_CHUNK) {
        let bi = INFER_CHUNK.min(ni - i0);
        let h = tokens.slice_leading(i0, bi)?;
        for j0 in (0..nt).step_by(INFER_CHUNK) {
            let bj = INFER_CHUNK.min(nt - j0);
            let mut tape = Tape::new();
            let p = model.params.register(&mut tape, false)?;
            let hv = tape.constant(h.clone())?;
            let gv = tape.constant(text.slice_leading(j0, bj)?)?;
            let cb = pool_variant(&mut tape, &p, hv, gv, &model.cfg.mixer, model.cfg.variant)?;
            let s = pairwise_scores(&mut tape, &cb)?;
            for (r, row) in tape.data(s).chunks_exact(bj).enumerate() {
                out[(i0 + r) * nt + j0..(i0 + r) * nt + j0 + bj].copy_from_slice(row);
            }
        }
    }
    Tensor::new(&[ni, nt], out)
}

/// Normalized visual features `[N_img, D]` of every image under one caption
/// feature `[1, D_t]`.
pub fn features_for_caption(model: &Model, tokens: &Tensor<f32>, caption: &Tensor<f32>) -> Result<Tensor<f32>> {
    let ni = tokens.shape()[0];
    let d = model.cfg.vit.width;
    let mut data = Vec::with_capacity(ni * d);
    for i0 in (0..ni).step_by(INFER_CHUNK) {
        let mut tape = Tape::new();
        let p = model.params.register(&mut tape, false)?;
        let hv = tape.constant(tokens.slice_leading(i0, INFER_CHUNK.min(ni - i0))?)?;
        let gv = tape.constant(caption.clone())?;
        let cb = pool_variant(&mut tape, &p, hv, gv, &model.cfg.mixer, model.cfg.variant)?;
        data.extend_from_slice(tape.data(cb.z));
    }
    Tensor::new(&[ni, d], data)
}

/// Index of each row's maximum; ties go to the lowest index.
pub fn argmax_rows(scores: &Tensor<f32>) -> Vec<usize> {
    let n = scores.shape()[1];
    scores
        .data()
        .chunks_exact(n)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// One caption feature per class: the mean of the raw text features over the
/// templates. The mean feeds both the projection and the mixer query.
pub fn class_text_features(model: &Model, prompts: &PromptSet, vocab: &Vocabulary) -> Result<Tensor<f32>> {
    if prompts.classes.is_empty() {
        return Err(LlipError::Contract("zero-shot classification needs at least one class".into()));
    }
    let nt = prompts.templates.len();
    let ctx = model.cfg.text.context_length;
    let seqs: Vec<Vec<usize>> = (0..prompts.classes.len())
        .flat_map(|c| (0..nt).map(move |t| (c, t)))
        .map(|(c, t)| vocab.tokenize(&prompts.render(c, t), ctx))
        .collect();
    let g = text_features(model, &seqs)?;
    let dt = g.shape()[1];
    let mut out = Vec::with_capacity(prompts.classes.len() * dt);
    for c in 0..prompts.classes.len() {
        let mut acc = g.row(c * nt).to_vec();
        for t in 1..nt {
            acc.iter_mut().zip(g.row(c * nt + t)).for_each(|(a, x)| *a += x);
        }
        if nt > 1 {
            let inv = nt as f32;
            acc.iter_mut().for_each(|a| *a /= inv);
        }
        out.extend(acc);
    }
    Tensor::new(&[prompts.classes.len(), dt], out)
}

/// Image × class scores with template-averaged class features.
pub fn zero_shot_scores(
    model: &Model,
    images: &Tensor<f32>,
    prompts: &PromptSet,
    vocab: &Vocabulary,
) -> Result<Tensor<f32>> {
    let classes = class_text_features(model, prompts, vocab)?;
    let tokens = image_tokens(model, images)?;
    score_matrix(model, &tokens, &classes)
}

/// Predicted class per image.
pub fn zero_shot_classify(
    model: &Model,
    images: &Tensor<f32>,
    prompts: &PromptSet,
    vocab: &Vocabulary,
) -> Result<Vec<usize>> {
    Ok(argmax_rows(&zero_shot_scores(model, images, prompts, vocab)?))
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if predicted.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / predicted.len() as f64
}

/// Shape-classification accuracy on a dataset.
pub fn shape_accuracy(model: &Model, data: &Dataset, vocab: &Vocabulary) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let pred = zero_shot_classify(model, &data.images(&idx), &PromptSet::shapes(), vocab)?;
    let truth: Vec<usize> = data.aspects.iter().map(|a| a.shape.index()).collect();
    Ok(accuracy(&pred, &truth))
}

/// Recall at each cutoff, in both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    pub ks: Vec<usize>,
    pub image_to_text: Vec<f64>,
    pub text_to_image: Vec<f64>,
}

impl RecallReport {
    /// `(name, value)` rows such as `i2t_r@1`.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (k, v) in self.ks.iter().zip(&self.image_to_text) {
            out.push((format!("i2t_r@{}", k), *v));
        }
        for (k, v) in self.ks.iter().zip(&self.text_to_image) {
            out.push((format!("t2i_r@{}", k), *v));
        }
        out
    }

    pub fn t2i(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.text_to_image[i])
    }

    pub fn i2t(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.image_to_text[i])
    }
}

/// 1-based rank of `target` among `n` candidates; equal scores rank by index.
fn rank_of(score: impl Fn(usize) -> f32, n: usize, target: usize) -> usize {
    let s = score(target);
    1 + (0..n).filter(|&j| {
        let v = score(j);
        v > s || (v == s && j < target)
    })
    .count()
}

fn check_ks(n: usize, ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(LlipError::Contract(format!("recall cutoffs must be positive, got {:?}", ks)));
    }
    let kmax = *ks.iter().max().expect("non-empty");
    if n < kmax {
        return Err(LlipError::Contract(format!("{} pairs cannot support recall@{}", n, kmax)));
    }
    Ok(())
}

/// Recall@k from a square score matrix whose diagonal holds the true pairs.
pub fn recall_at_k(scores: &Tensor<f32>, ks: &[usize]) -> Result<RecallReport> {
    let n = match scores.shape() {
        &[a, b] if a == b => a,
        s => return Err(LlipError::Dimension(format!("retrieval needs a square score matrix, got {:?}", s))),
    };
    check_ks(n, ks)?;
    let s = scores.data();
    let i2t: Vec<usize> = (0..n).map(|i| rank_of(|j| s[i * n + j], n, i)).collect();
    let t2i: Vec<usize> = (0..n).map(|j| rank_of(|i| s[i * n + j], n, j)).collect();
    let frac = |ranks: &[usize], k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
    Ok(RecallReport {
        ks: ks.to_vec(),
        image_to_text: ks.iter().map(|&k| frac(&i2t, k)).collect(),
        text_to_image: ks.iter().map(|&k| frac(&t2i, k)).collect(),
    })
}

/// Retrieval over aligned pairs: image `i` belongs with caption `i`.
pub fn retrieval_recall(model: &Model, images: &Tensor<f32>, captions: &[Vec<usize>], ks: &[usize]) -> Result<RecallReport> {
    let n = images.shape().first().copied().unwrap_or(0);
    if captions.len() != n {
        return Err(LlipError::Dimension(format!("{} images but {} captions", n, captions.len())));
    }
    check_ks(n, ks)?;
    let tokens = image_tokens(model, images)?;
    let text = text_features(model, captions)?;
    recall_at_k(&score_matrix(model, &tokens, &text)?, ks)
}

/// Held-out retrieval: consecutive galleries of `gallery` scenes, scene `i`
/// paired with its caption `i mod count`; recalls are averaged over galleries.
pub fn gallery_recall(
    model: &Model,
    data: &Dataset,
    vocab: &Vocabulary,
    gallery: usize,
    ks: &[usize],
) -> Result<RecallReport> {
    check_ks(gallery, ks)?;
    let galleries = data.len() / gallery;
    if galleries == 0 {
        return Err(LlipError::Contract(format!(
            "{} scenes do not fill one gallery of {}",
            data.len(),
            gallery
        )));
    }
    let ctx = model.cfg.text.context_length;
    let mut sum = RecallReport {
        ks: ks.to_vec(),
        image_to_text: vec![0.0; ks.len()],
        text_to_image: vec![0.0; ks.len()],
    };
    for g in 0..galleries {
        let idx: Vec<usize> = (g * gallery..(g + 1) * gallery).collect();
        let seqs: Vec<Vec<usize>> = idx
            .iter()
            .map(|&i| {
                let caps = &data.captions[i];
                vocab.tokenize(&caps[i % caps.len()], ctx)
            })
            .collect();
        let r = retrieval_recall(model, &data.images(&idx), &seqs, ks)?;
        for (a, b) in sum.image_to_text.iter_mut().zip(&r.image_to_text) {
            *a += b;
        }
        for (a, b) in sum.text_to_image.iter_mut().zip(&r.text_to_image) {
            *a += b;
        }
    }
    let gn = galleries as f64;
    sum.image_to_text.iter_mut().for_each(|v| *v /= gn);
    sum.text_to_image.iter_mut().for_each(|v| *v /= gn);
    Ok(sum)
}

/// Held-out retrieval recalls followed by zero-shot shape accuracy on the
/// first `zero_shot` scenes.
pub fn heldout_metrics(
    model: &Model,
    heldout: &Dataset,
    vocab: &Vocabulary,
    gallery: usize,
    zero_shot: usize,
) -> Result<Vec<(String, f64)>> {
    let mut rows = gallery_recall(model, heldout, vocab, gallery, &DEFAULT_KS)?.metrics();
    rows.push((
        "zero_shot_acc".into(),
        shape_accuracy(model, &heldout.truncated(zero_shot), vocab)?,
    ));
    Ok(rows)
}

/// Mean pairwise L2 distance between the features of all images under one
/// caption. Near zero means the visual feature ignores the image.
pub fn shortcut_diagnostic(model: &Model, images: &Tensor<f32>, caption: &[usize]) -> Result<f64> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n < 2 {
        return Err(LlipError::Contract(format!("dispersion needs at least 2 images, got {}", n)));
    }
    let tokens = image_tokens(model, images)?;
    let g = text_features(model, &[caption.to_vec()])?;
    let z = features_for_caption(model, &tokens, &g)?;
    Ok(mean_pairwise_distance(&z))
}

/// Mean L2 distance over all unordered row pairs.
pub fn mean_pairwise_distance(rows: &Tensor<f32>) -> f64 {
    let n = rows.shape()[0];
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = rows
                .row(i)
                .iter()
                .zip(rows.row(j))
                .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
                .sum();
            total += d2.sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Decimal text with nine significant digits.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{}", x);
    }
    let exp = x.abs().log10().floor() as i32;
    let decimals = (8 - exp).max(0) as usize;
    let s = format!("{:.*}", decimals, x);
    // rounding can carry into a new leading digit
    let digits = s.chars().filter(char::is_ascii_digit).skip_while(|&c| c == '0').count();
    if digits > 9 && decimals > 0 {
        format!("{:.*}", decimals - 1, x)
    } else {
        s
    }
}

/// `metric,value` CSV.
pub fn metrics_csv(rows: &[(String, f64)]) -> String {
    let mut s = String::from("metric,value\n");
    for (name, v) in rows {
        s.push_str(&format!("{},{}\n", name, format_sig9(*v)));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(rows: &[&[f32]]) -> Tensor<f32> {
        let n = rows.len();
        Tensor::new(&[n, n], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn identity_scores_are_perfect() {
        let r = recall_at_k(&square(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]), &[1, 2]).unwrap();
        assert_eq!(r.image_to_text, vec![1.0, 1.0]);
        assert_eq!(r.text_to_image, vec![1.0, 1.0]);
    }

    #[test]
    fn ties_rank_by_index() {
        // all-equal scores: query i sits at rank i+1
        let r = recall_at_k(&Tensor::full(&[4, 4], 0.5), &[1, 2, 4]).unwrap();
        assert_eq!(r.image_to_text, vec![0.25, 0.5, 1.0]);
        assert_eq!(r.text_to_image, vec![0.25, 0.5, 1.0]);
    }

    #[test]
    fn cutoff_beyond_pairs_is_contract_error() {
        assert!(matches!(recall_at_k(&Tensor::full(&[3, 3], 0.0), &[5]), Err(LlipError::Contract(_))));
        assert!(matches!(recall_at_k(&Tensor::full(&[3, 3], 0.0), &[0]), Err(LlipError::Contract(_))));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        let s = Tensor::new(&[2, 3], vec![1.0, 3.0, 3.0, 2.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&s), vec![1, 0]);
    }

    #[test]
    fn templates_need_one_placeholder() {
        assert!(PromptSet::new(vec!["x".into()], vec![]).is_err());
        assert!(PromptSet::new(vec!["x".into()], vec!["no slot".into()]).is_err());
        let p = PromptSet::new(vec!["ring".into()], vec!["a {} here".into()]).unwrap();
        assert_eq!(p.render(0, 0), "a ring here");
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(1.0), "1.00000000");
        assert_eq!(format_sig9(0.5), "0.500000000");
        assert_eq!(format_sig9(123456.789), "123456.789");
        assert_eq!(format_sig9(9.999999999), "10.0000000");
        assert_eq!(format_sig9(-0.00123), "-0.00123000000");
        assert_eq!(format_sig9(0.0), "0");
    }

    #[test]
    fn pairwise_distance_of_unit_axes() {
        let t = Tensor::new(&[3, 2], vec![0.0, 0.0, 3.0, 4.0, 0.0, 0.0]).unwrap();
        assert!((mean_pairwise_distance(&t) - 10.0 / 3.0).abs() < 1e-12);
    }
}
