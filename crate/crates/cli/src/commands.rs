use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use llip::checks::{gradient_checks, FD_TOLERANCE};
use llip::contextualization::PoolingVariant;
use llip::data::{self, grammar_vocabulary, Dataset, Vocabulary};
use llip::evaluation::{
    flops_estimate, format_sig9, gallery_recall, heldout_metrics, metrics_csv, shape_accuracy, spectrum_csv,
    DEFAULT_KS,
};
use llip::model::{Model, ModelConfig};
use llip::training::{load_checkpoint, save_checkpoint, train_run};
use llip::{LlipError, Result};

use crate::config::{render, ExperimentConfig};
use crate::{EXIT_FAILURE, EXIT_OK};

pub const CHECKPOINT_FILE: &str = "checkpoint.llip";
pub const FALLBACK_FILE: &str = "last_good.llip";

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LlipError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| LlipError::io(path, e))
}

fn training_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let data = match &cfg.data.dir {
        Some(dir) => data::load_dataset(dir)?,
        None => data::training_scenes(cfg.data.n, cfg.seed)?,
    };
    if cfg.train.batch_size > data.len() {
        return Err(LlipError::Config(format!(
            "batch = {} exceeds the {} training scenes",
            cfg.train.batch_size,
            data.len()
        )));
    }
    Ok(data)
}

fn heldout(cfg: &ExperimentConfig) -> Result<Dataset> {
    data::heldout_scenes(cfg.data.heldout, cfg.seed)
}

fn load_model(path: &Path) -> Result<Model> {
    load_checkpoint(path, None)?.model()
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<i32> {
    let manifest = data::generate_dataset(cfg.data.n, cfg.seed, &cfg.out)?;
    println!("wrote {} scenes to {}", manifest.records.len(), cfg.out.display());
    Ok(EXIT_OK)
}

struct Trained {
    model: Model,
    final_loss: f64,
    metrics: Vec<(String, f64)>,
}

fn train_one(
    cfg: &ExperimentConfig,
    model_cfg: ModelConfig,
    data: &Dataset,
    held: &Dataset,
    vocab: &Vocabulary,
    out: &Path,
) -> Result<Trained> {
    let mut hook = |_: usize, m: &Model| heldout_metrics(m, held, vocab, cfg.eval.gallery, cfg.eval.zero_shot);
    let outcome = train_run(
        model_cfg,
        cfg.train.clone(),
        data,
        vocab,
        Some(&mut hook),
        Some(&out.join(FALLBACK_FILE)),
    )?;
    save_checkpoint(&outcome.checkpoint, &out.join(CHECKPOINT_FILE))?;
    write(&out.join("loss.csv"), &outcome.log.loss_csv())?;
    write(&out.join("eval.csv"), &outcome.log.eval_csv())?;
    let last = outcome.log.evals.last().map(|e| e.0).unwrap_or(0);
    let metrics: Vec<(String, f64)> = outcome
        .log
        .evals
        .iter()
        .filter(|e| e.0 == last)
        .map(|e| (e.1.clone(), e.2))
        .collect();
    write(&out.join("metrics.csv"), &metrics_csv(&metrics))?;
    Ok(Trained {
        model: outcome.checkpoint.model()?,
        final_loss: outcome.log.final_loss().unwrap_or(f64::NAN),
        metrics,
    })
}

pub fn train(cfg: &ExperimentConfig) -> Result<i32> {
    let data = training_data(cfg)?;
    let held = heldout(cfg)?;
    let vocab = grammar_vocabulary();
    write(&cfg.out.join("config.txt"), &render(cfg))?;
    let t = train_one(cfg, cfg.model.clone(), &data, &held, &vocab, &cfg.out)?;
    println!("final loss {}", format_sig9(t.final_loss));
    for (k, v) in &t.metrics {
        println!("{:<14} {}", k, format_sig9(*v));
    }
    println!("checkpoint {}", cfg.out.join(CHECKPOINT_FILE).display());
    Ok(EXIT_OK)
}

pub fn eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<i32> {
    let model = load_model(checkpoint)?;
    let held = heldout(cfg)?.truncated(cfg.eval.zero_shot);
    let acc = shape_accuracy(&model, &held, &grammar_vocabulary())?;
    let rows = vec![("zero_shot_acc".to_string(), acc), ("scenes".to_string(), held.len() as f64)];
    write(&cfg.out.join("zero_shot.csv"), &metrics_csv(&rows))?;
    println!("zero-shot shape accuracy {} on {} scenes", format_sig9(acc), held.len());
    Ok(EXIT_OK)
}

pub fn retrieval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<i32> {
    let model = load_model(checkpoint)?;
    let r = gallery_recall(&model, &heldout(cfg)?, &grammar_vocabulary(), cfg.eval.gallery, &DEFAULT_KS)?;
    let rows = r.metrics();
    write(&cfg.out.join("retrieval.csv"), &metrics_csv(&rows))?;
    for (k, v) in &rows {
        println!("{:<10} {}", k, format_sig9(*v));
    }
    Ok(EXIT_OK)
}

pub fn spectrum(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<i32> {
    let model = load_model(checkpoint)?;
    let held = heldout(cfg)?;
    let idx: Vec<usize> = (0..cfg.eval.spectrum).collect();
    let source = checkpoint.display().to_string();
    let report = llip::evaluation::spectrum(&model, &held.images(&idx), &source)?;
    write(&cfg.out.join("spectrum.csv"), &spectrum_csv(&report))?;
    let rows = vec![
        ("effective_rank".to_string(), report.effective_rank),
        ("samples".to_string(), report.samples as f64),
    ];
    write(&cfg.out.join("spectrum_summary.csv"), &metrics_csv(&rows))?;
    println!(
        "effective rank {} over {} token samples",
        format_sig9(report.effective_rank),
        report.samples
    );
    Ok(EXIT_OK)
}

pub fn flops(cfg: &ExperimentConfig) -> Result<i32> {
    let r = flops_estimate(&cfg.model, cfg.eval.classes);
    let rows = vec![
        ("backbone".to_string(), r.backbone as f64),
        ("mixer".to_string(), r.mixer as f64),
        ("text".to_string(), r.text as f64),
        ("total".to_string(), r.total as f64),
        ("baseline_total".to_string(), r.baseline_total as f64),
        ("overhead_ratio".to_string(), r.overhead_ratio()),
    ];
    write(&cfg.out.join("flops.csv"), &metrics_csv(&rows))?;
    for (k, v) in &rows {
        println!("{:<15} {}", k, format_sig9(*v));
    }
    Ok(EXIT_OK)
}

/// Variants in ladder order, from the single-token baseline to the full mixer.
pub const LADDER: [PoolingVariant; 5] = [
    PoolingVariant::SiglipCls,
    PoolingVariant::RegistersFirst,
    PoolingVariant::UniformAverage,
    PoolingVariant::LearnedAverage,
    PoolingVariant::Llip,
];

/// Model configuration of one ladder rung; the baseline keeps a single token.
pub fn rung_config(base: &ModelConfig, variant: PoolingVariant) -> ModelConfig {
    let mut m = base.clone();
    m.variant = variant;
    if variant == PoolingVariant::SiglipCls {
        m.vit.mixture_tokens = 1;
    }
    m
}

const TABLE_METRICS: [&str; 5] = ["t2i_r@1", "t2i_r@5", "i2t_r@1", "i2t_r@5", "zero_shot_acc"];

/// Rows of `(variant, K, final loss, metrics in TABLE_METRICS order)`.
pub type AblationRow = (String, usize, f64, Vec<f64>);

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("variant,K,final_loss,{}\n", TABLE_METRICS.join(","));
    for (v, k, loss, m) in rows {
        let vals: Vec<String> = m.iter().map(|x| format_sig9(*x)).collect();
        let _ = writeln!(s, "{},{},{},{}", v, k, format_sig9(*loss), vals.join(","));
    }
    s
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut header = vec!["variant".to_string(), "K".to_string(), "final_loss".to_string()];
    header.extend(TABLE_METRICS.iter().map(|s| s.to_string()));
    let mut cells = vec![header];
    for (v, k, loss, m) in rows {
        let mut r = vec![v.clone(), k.to_string(), format!("{:.4}", loss)];
        r.extend(m.iter().map(|x| format!("{:.4}", x)));
        cells.push(r);
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for r in &cells {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, x)| if c == 0 { format!("{:<w$}", x, w = widths[c]) } else { format!("{:>w$}", x, w = widths[c]) })
            .collect();
        let _ = writeln!(s, "{}", line.join("  ").trim_end());
    }
    s
}

pub fn ablate(cfg: &ExperimentConfig) -> Result<i32> {
    let data = training_data(cfg)?;
    let held = heldout(cfg)?;
    let vocab = grammar_vocabulary();
    write(&cfg.out.join("config.txt"), &render(cfg))?;
    let mut rows = Vec::new();
    for variant in LADDER {
        let m = rung_config(&cfg.model, variant);
        let dir: PathBuf = cfg.out.join(variant.name());
        log::info!("training {} (K = {})", variant, m.vit.mixture_tokens);
        let t = train_one(cfg, m.clone(), &data, &held, &vocab, &dir)?;
        let vals = TABLE_METRICS
            .iter()
            .map(|name| {
                t.metrics
                    .iter()
                    .find(|(k, _)| k == name)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| LlipError::Evaluation(format!("missing metric {}", name)))
            })
            .collect::<Result<Vec<f64>>>()?;
        debug_assert_eq!(t.model.cfg, m);
        rows.push((variant.name().to_string(), m.vit.mixture_tokens, t.final_loss, vals));
    }
    let table = ablation_table(&rows);
    write(&cfg.out.join("ablation.txt"), &table)?;
    write(&cfg.out.join("ablation.csv"), &ablation_csv(&rows))?;
    print!("{}", table);
    Ok(EXIT_OK)
}

pub fn gradcheck(cfg: &ExperimentConfig) -> Result<i32> {
    let checks = gradient_checks(cfg.seed)?;
    let mut ok = true;
    for c in &checks {
        println!(
            "{:<18} max error {:.3e}  ({} coordinates)  {}",
            c.component,
            c.report.max_rel_error,
            c.report.coordinates,
            if c.passed() { "ok" } else { "FAIL" }
        );
        ok &= c.passed();
    }
    println!("tolerance {:e}", FD_TOLERANCE);
    Ok(if ok { EXIT_OK } else { EXIT_FAILURE })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_has_one_row_per_variant() {
        let rows: Vec<AblationRow> = LADDER
            .iter()
            .map(|v| (v.name().to_string(), 16, 1.0, vec![0.5; TABLE_METRICS.len()]))
            .collect();
        let t = ablation_table(&rows);
        assert_eq!(t.lines().count(), 6);
        assert!(t.lines().nth(1).unwrap().starts_with("siglip"));
        assert_eq!(ablation_csv(&rows).lines().count(), 6);
    }

    #[test]
    fn rung_configs() {
        let base = ModelConfig::desk(30);
        assert_eq!(rung_config(&base, PoolingVariant::SiglipCls).vit.mixture_tokens, 1);
        assert_eq!(rung_config(&base, PoolingVariant::Llip).vit.mixture_tokens, 16);
    }
}
