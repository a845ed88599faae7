//! Line-oriented `key = value` experiment configuration.
//!
//! Keys are dotted (`model.K = 16`); every key also has a short name, which is
//! the command-line flag (`--K 16`) and may be used in files when unambiguous.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use llip::contextualization::PoolingVariant;
use llip::data::grammar_vocabulary;
use llip::model::ModelConfig;
use llip::training::TrainConfig;

/// Every accepted key: `(dotted key, flag name, help)`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "seed", "experiment seed; data, init and sampling streams derive from it"),
    ("data.n", "n", "training scenes"),
    ("data.heldout", "heldout", "held-out scenes"),
    ("data.dir", "data", "load training scenes from this directory instead of generating them"),
    ("model.variant", "variant", "pooling variant: siglip, registers, average, learned-average, llip"),
    ("model.K", "K", "mixture tokens"),
    ("model.width", "width", "feature width of both towers"),
    ("model.depth", "depth", "vision transformer blocks"),
    ("model.heads", "heads", "vision attention heads"),
    ("model.patch", "patch", "patch size in pixels"),
    ("text.depth", "text-depth", "text transformer blocks"),
    ("text.heads", "text-heads", "text attention heads"),
    ("text.context", "context", "caption context length in tokens"),
    ("mixer.M", "M", "cross-attention heads of the mixer"),
    ("mixer.tau", "tau", "mixer softmax temperature"),
    ("train.steps", "steps", "optimizer steps"),
    ("train.batch", "batch", "pairs per batch"),
    ("train.lr", "lr", "peak learning rate"),
    ("train.warmup", "warmup", "linear warmup steps"),
    ("train.weight_decay", "weight-decay", "decoupled weight decay"),
    ("train.beta1", "beta1", "first-moment decay"),
    ("train.beta2", "beta2", "second-moment decay"),
    ("train.eps", "eps", "optimizer epsilon"),
    ("train.eval_every", "eval-every", "held-out evaluation interval in steps (0 = end only)"),
    ("eval.gallery", "gallery", "retrieval gallery size"),
    ("eval.zero_shot", "zero-shot", "held-out scenes for zero-shot classification"),
    ("eval.spectrum", "spectrum-samples", "held-out scenes for the feature spectrum"),
    ("eval.classes", "classes", "class count for FLOP estimates"),
    ("out", "out", "output directory"),
];

/// Resolves a dotted key or a short name to the dotted key.
pub fn canonical_key(name: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, f, _)| *k == name || *f == name).map(|(k, _, _)| *k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSettings {
    pub n: usize,
    pub heldout: usize,
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub gallery: usize,
    pub zero_shot: usize,
    pub spectrum: usize,
    pub classes: usize,
}

/// A fully resolved and validated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSettings,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data: DataSettings {
                n: 10_000,
                heldout: 2_000,
                dir: None,
            },
            model: ModelConfig::desk(grammar_vocabulary().len()),
            train: TrainConfig::default(),
            eval: EvalSettings {
                gallery: llip::evaluation::GALLERY_SIZE,
                zero_shot: 512,
                spectrum: 2_000,
                classes: 8,
            },
            out: PathBuf::from("out"),
        }
    }
}

/// Every problem found while resolving a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub problems: Vec<String>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration:")?;
        for p in &self.problems {
            writeln!(f, "  {}", p)?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

/// Raw assignments keyed by dotted key.
pub type Assignments = BTreeMap<&'static str, String>;

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_document(text: &str, into: &mut Assignments, problems: &mut Vec<String>) {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            problems.push(format!("line {}: expected `key = value`, got `{}`", i + 1, line));
            continue;
        };
        let (k, v) = (k.trim(), v.trim());
        match canonical_key(k) {
            Some(key) => {
                into.insert(key, v.to_string());
            }
            None => problems.push(format!("line {}: unknown key `{}`", i + 1, k)),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str, problems: &mut Vec<String>) -> Option<T>
where
    T::Err: fmt::Display,
{
    match raw.parse::<T>() {
        Ok(v) => Some(v),
        Err(e) => {
            problems.push(format!("`{}`: cannot parse `{}` ({})", key, raw, e));
            None
        }
    }
}

fn check(ok: bool, key: &str, msg: impl fmt::Display, problems: &mut Vec<String>) {
    if !ok {
        problems.push(format!("`{}`: {}", key, msg));
    }
}

/// Applies assignments over the defaults and validates the result.
pub fn resolve(assign: &Assignments) -> Result<ExperimentConfig, ConfigError> {
    let mut c = ExperimentConfig::default();
    let mut p = Vec::new();
    macro_rules! set {
        ($key:literal, $field:expr) => {
            if let Some(raw) = assign.get($key) {
                if let Some(v) = parse_value(short($key), raw, &mut p) {
                    $field = v;
                }
            }
        };
    }
    set!("seed", c.seed);
    set!("data.n", c.data.n);
    set!("data.heldout", c.data.heldout);
    if let Some(raw) = assign.get("data.dir") {
        c.data.dir = if raw.is_empty() { None } else { Some(PathBuf::from(raw)) };
    }
    set!("model.variant", c.model.variant);
    set!("model.K", c.model.vit.mixture_tokens);
    if let Some(raw) = assign.get("model.width") {
        if let Some(w) = parse_value::<usize>("width", raw, &mut p) {
            c.model.vit.width = w;
            c.model.text.width = w;
        }
    }
    set!("model.depth", c.model.vit.depth);
    set!("model.heads", c.model.vit.heads);
    set!("model.patch", c.model.vit.patch_size);
    set!("text.depth", c.model.text.depth);
    set!("text.heads", c.model.text.heads);
    set!("text.context", c.model.text.context_length);
    set!("mixer.M", c.model.mixer.heads);
    set!("mixer.tau", c.model.mixer.tau);
    set!("train.steps", c.train.steps);
    set!("train.batch", c.train.batch_size);
    set!("train.lr", c.train.lr_peak);
    set!("train.warmup", c.train.warmup_steps);
    set!("train.weight_decay", c.train.weight_decay);
    set!("train.beta1", c.train.beta1);
    set!("train.beta2", c.train.beta2);
    set!("train.eps", c.train.eps);
    set!("train.eval_every", c.train.eval_every);
    set!("eval.gallery", c.eval.gallery);
    set!("eval.zero_shot", c.eval.zero_shot);
    set!("eval.spectrum", c.eval.spectrum);
    set!("eval.classes", c.eval.classes);
    if let Some(raw) = assign.get("out") {
        c.out = PathBuf::from(raw);
    }
    c.train.seed = c.seed;
    // the single-token baseline has exactly one pooled token
    if c.model.variant == PoolingVariant::SiglipCls && !assign.contains_key("model.K") {
        c.model.vit.mixture_tokens = 1;
    }
    validate(&c, &mut p);
    if p.is_empty() {
        Ok(c)
    } else {
        Err(ConfigError { problems: p })
    }
}

fn short(key: &str) -> &'static str {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, f, _)| *f).expect("known key")
}

fn validate(c: &ExperimentConfig, p: &mut Vec<String>) {
    let m = &c.model;
    check(c.data.n >= 1, "n", "need at least one training scene", p);
    check(c.data.heldout >= 1, "heldout", "need at least one held-out scene", p);
    check(m.vit.mixture_tokens >= 1, "K", "need at least one mixture token", p);
    check(
        m.variant != PoolingVariant::SiglipCls || m.vit.mixture_tokens == 1,
        "K",
        "the siglip variant uses exactly one token",
        p,
    );
    check(m.vit.width >= 1, "width", "must be positive", p);
    check(m.vit.depth >= 1, "depth", "must be positive", p);
    check(
        m.vit.heads >= 1 && m.vit.width % m.vit.heads == 0,
        "heads",
        format!("{} heads must divide width {}", m.vit.heads, m.vit.width),
        p,
    );
    check(
        m.vit.patch_size >= 1 && m.vit.image_size % m.vit.patch_size == 0,
        "patch",
        format!("patch {} must divide image size {}", m.vit.patch_size, m.vit.image_size),
        p,
    );
    check(m.text.depth >= 1, "text-depth", "must be positive", p);
    check(
        m.text.heads >= 1 && m.text.width % m.text.heads == 0,
        "text-heads",
        format!("{} heads must divide width {}", m.text.heads, m.text.width),
        p,
    );
    check(m.text.context_length >= 2, "context", "must hold BOS and EOS", p);
    check(
        m.mixer.heads >= 1 && m.vit.width % m.mixer.heads == 0,
        "M",
        format!("{} heads must divide width {}", m.mixer.heads, m.vit.width),
        p,
    );
    check(
        m.mixer.tau > 0.0 && m.mixer.tau.is_finite(),
        "tau",
        format!("must be positive and finite, got {}", m.mixer.tau),
        p,
    );
    let t = &c.train;
    check(t.steps >= 1, "steps", "must be positive", p);
    check(t.batch_size >= 2, "batch", "at least 2 pairs are needed for in-batch negatives", p);
    check(t.lr_peak > 0.0 && t.lr_peak.is_finite(), "lr", "must be positive and finite", p);
    check(t.warmup_steps <= t.steps, "warmup", "exceeds steps", p);
    check(t.weight_decay >= 0.0 && t.weight_decay.is_finite(), "weight-decay", "must be non-negative", p);
    check((0.0..1.0).contains(&t.beta1), "beta1", "must lie in [0, 1)", p);
    check((0.0..1.0).contains(&t.beta2), "beta2", "must lie in [0, 1)", p);
    check(t.eps > 0.0 && t.eps.is_finite(), "eps", "must be positive", p);
    let e = &c.eval;
    check(e.gallery >= 10, "gallery", "must hold at least 10 pairs for recall@10", p);
    check(e.gallery <= c.data.heldout, "gallery", "exceeds the held-out scenes", p);
    check(e.zero_shot >= 1 && e.zero_shot <= c.data.heldout, "zero-shot", "must lie in 1..=heldout", p);
    check(
        e.spectrum >= m.vit.width && e.spectrum <= c.data.heldout,
        "spectrum-samples",
        format!("must lie in width ({})..=heldout ({})", m.vit.width, c.data.heldout),
        p,
    );
    check(e.classes >= 1, "classes", "must be positive", p);
    // module-level checks catch anything the key checks above do not
    if p.is_empty() {
        if let Err(err) = m.validate() {
            p.push(err.to_string());
        }
        if let Err(err) = t.validate() {
            p.push(err.to_string());
        }
    }
}

/// Reads an optional config file, then applies flag overrides on top.
pub fn parse_config(path: Option<&Path>, overrides: &Assignments) -> Result<ExperimentConfig, ConfigError> {
    let mut assign = Assignments::new();
    let mut problems = Vec::new();
    if let Some(path) = path {
        match std::fs::read_to_string(path) {
            Ok(text) => parse_document(&text, &mut assign, &mut problems),
            Err(e) => problems.push(format!("cannot read {}: {}", path.display(), e)),
        }
    }
    for (k, v) in overrides {
        assign.insert(k, v.clone());
    }
    match resolve(&assign) {
        Ok(c) if problems.is_empty() => Ok(c),
        Ok(_) => Err(ConfigError { problems }),
        Err(e) => {
            problems.extend(e.problems);
            Err(ConfigError { problems })
        }
    }
}

/// The resolved configuration as a config document that parses back to itself.
pub fn render(c: &ExperimentConfig) -> String {
    let m = &c.model;
    let t = &c.train;
    let rows: Vec<(&str, String)> = vec![
        ("seed", c.seed.to_string()),
        ("data.n", c.data.n.to_string()),
        ("data.heldout", c.data.heldout.to_string()),
        ("data.dir", c.data.dir.as_ref().map(|d| d.display().to_string()).unwrap_or_default()),
        ("model.variant", m.variant.to_string()),
        ("model.K", m.vit.mixture_tokens.to_string()),
        ("model.width", m.vit.width.to_string()),
        ("model.depth", m.vit.depth.to_string()),
        ("model.heads", m.vit.heads.to_string()),
        ("model.patch", m.vit.patch_size.to_string()),
        ("text.depth", m.text.depth.to_string()),
        ("text.heads", m.text.heads.to_string()),
        ("text.context", m.text.context_length.to_string()),
        ("mixer.M", m.mixer.heads.to_string()),
        ("mixer.tau", m.mixer.tau.to_string()),
        ("train.steps", t.steps.to_string()),
        ("train.batch", t.batch_size.to_string()),
        ("train.lr", t.lr_peak.to_string()),
        ("train.warmup", t.warmup_steps.to_string()),
        ("train.weight_decay", t.weight_decay.to_string()),
        ("train.beta1", t.beta1.to_string()),
        ("train.beta2", t.beta2.to_string()),
        ("train.eps", t.eps.to_string()),
        ("train.eval_every", t.eval_every.to_string()),
        ("eval.gallery", c.eval.gallery.to_string()),
        ("eval.zero_shot", c.eval.zero_shot.to_string()),
        ("eval.spectrum", c.eval.spectrum.to_string()),
        ("eval.classes", c.eval.classes.to_string()),
        ("out", c.out.display().to_string()),
    ];
    rows.into_iter().map(|(k, v)| format!("{} = {}\n", k, v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let mut a = Assignments::new();
        let mut p = Vec::new();
        parse_document(text, &mut a, &mut p);
        assert!(p.is_empty(), "{:?}", p);
        resolve(&a)
    }

    #[test]
    fn empty_document_gives_defaults() {
        let c = doc("").unwrap();
        assert_eq!(c.model.mixer.tau, 5.0);
        assert_eq!(c.train.beta2, 0.95);
        assert_eq!(c.model.vit.mixture_tokens, 16);
        assert_eq!(c.model.variant, PoolingVariant::Llip);
    }

    #[test]
    fn dotted_and_short_keys() {
        let c = doc("# comment\nmodel.K = 4\ntau = 2.5  # trailing\n").unwrap();
        assert_eq!(c.model.vit.mixture_tokens, 4);
        assert_eq!(c.model.mixer.tau, 2.5);
    }

    #[test]
    fn every_bad_key_is_listed() {
        let e = doc("tau = -1\nsteps = many\nbatch = 1\n").unwrap_err();
        let all = e.problems.join("\n");
        assert!(all.contains("`tau`") && all.contains("`steps`") && all.contains("`batch`"), "{}", all);
    }

    #[test]
    fn unknown_key_is_reported() {
        let mut a = Assignments::new();
        let mut p = Vec::new();
        parse_document("colour = red\nK = 2", &mut a, &mut p);
        assert_eq!(p.len(), 1);
        assert!(p[0].contains("colour"));
    }

    #[test]
    fn render_round_trips() {
        let c = doc("variant = average\nK = 4\nsteps = 10\nwarmup = 2\n").unwrap();
        assert_eq!(doc(&render(&c)).unwrap(), c);
    }

    #[test]
    fn siglip_defaults_to_one_token() {
        assert_eq!(doc("variant = siglip").unwrap().model.vit.mixture_tokens, 1);
        assert!(doc("variant = siglip\nK = 4").is_err());
    }
}
