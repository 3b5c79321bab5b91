use std::path::{Path, PathBuf};

use serde::Serialize;
use vlprobe::analysis::{
    aggregate_importance, attention_flow, occlusion_importance, similarity_probe, similarity_spread, RegionGrid,
};
use vlprobe::export::{matrix_to_csv, records_to_csv, to_pgm, write_text};
use vlprobe::metrics::{compare_seeds, evaluate, PositionReport};
use vlprobe::model::{load_checkpoint, save_checkpoint, train as fit};
use vlprobe::probe::{gen_library_with, gen_probe, prompt, ProbeDataset, NUM_SLOTS};
use vlprobe::{Error, Matrix, Model, MultimodalInput, Result, Scheme};

use crate::config::RunConfig;

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

/// Records the fully resolved configuration next to a command's outputs.
fn write_config(cfg: &RunConfig, dir: &Path, command: &str) -> Result<()> {
    write_text(&dir.join(format!("{command}.config.toml")), &cfg.to_toml())
}

fn write_matrix(dir: &Path, stem: &str, m: &Matrix, cell: usize) -> Result<()> {
    write_text(&dir.join(format!("{stem}.csv")), &matrix_to_csv(m))?;
    write_text(&dir.join(format!("{stem}.pgm")), &to_pgm(m, cell)?)
}

pub fn gen(cfg: &RunConfig) -> Result<()> {
    let ds = build_dataset(cfg)?;
    let path = cfg.out.join("dataset.json");
    write_config(cfg, &cfg.out, "gen")?;
    ds.save(&path)?;
    println!(
        "dataset {} ({} train, {} eval, hash {})",
        path.display(),
        ds.train.len(),
        ds.eval.len(),
        ds.hash()
    );
    Ok(())
}

fn build_dataset(cfg: &RunConfig) -> Result<ProbeDataset> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::Io {
        path: cfg.out.clone(),
        source: e,
    })?;
    let lib = gen_library_with(&cfg.library_params())?;
    gen_probe(&lib, &cfg.probe_params(), cfg.dataset.seed)
}

fn train_one(cfg: &RunConfig, ds: &ProbeDataset, scheme: Scheme, seed: u64, dir: &Path) -> Result<Model> {
    let mcfg = cfg.model_config(scheme, seed);
    if mcfg.patch_dim != ds.library.patch_dim()
        || mcfg.text_vocab_size != prompt::text_vocab_size(ds.library.vocab_size())
    {
        return Err(Error::Config(
            "dataset was generated with a different vocab_size or patch_dim than the config".into(),
        ));
    }
    let mut model = Model::init(mcfg)?;
    let examples = ds.train_examples()?;
    let log = fit(&mut model, &examples, &cfg.train_config(seed), |_| {})?;
    write_config(cfg, dir, "train")?;
    save_checkpoint(&model, &dir.join("checkpoint.json"))?;
    let csv = records_to_csv(&["step", "loss"], &log, |e| vec![e.step.to_string(), e.loss.to_string()]);
    write_text(&dir.join("train_log.csv"), &csv)?;
    let last = log.last().map_or(f64::NAN, |e| e.loss);
    println!("trained {scheme} seed {seed}: final batch loss {last:.4}");
    Ok(model)
}

pub fn train(cfg: &RunConfig, dataset: &Path) -> Result<()> {
    let ds = ProbeDataset::load(dataset)?;
    train_one(cfg, &ds, cfg.scheme()?, cfg.seeds[0], &cfg.out)?;
    Ok(())
}

fn eval_one(cfg: &RunConfig, model: &Model, ds: &ProbeDataset, dir: &Path) -> Result<PositionReport> {
    let report = evaluate(model, ds, Some(cfg.threads))?;
    write_text(&dir.join("report.json"), &(report.to_json() + "\n"))?;
    write_text(&dir.join("report.csv"), &report.to_csv())?;
    write_text(&dir.join("heatmap.pgm"), &to_pgm(&report.heatmap(), cfg.analysis.pgm_cell)?)?;
    println!(
        "{} seed {}: Avg {:.2}%  Δ {:.4} pp²  negatives {:.2}%  overall {:.2}%",
        report.scheme,
        report.seed,
        report.avg_percent(),
        report.delta_percent_sq(),
        report.acc_neg * 100.0,
        report.overall_accuracy() * 100.0
    );
    Ok(report)
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, dataset: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let ds = ProbeDataset::load(dataset)?;
    write_config(cfg, &cfg.out, "eval")?;
    eval_one(cfg, &model, &ds, &cfg.out)?;
    Ok(())
}

#[derive(Serialize)]
struct OcclusionSummary {
    samples: usize,
    /// Fraction of samples whose top region overlaps the key cell.
    key_hit_rate: f64,
    regions: RegionGrid,
    background: f64,
    normalization: String,
}

pub fn occlude(cfg: &RunConfig, checkpoint: &Path, dataset: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let ds = ProbeDataset::load(dataset)?;
    let regions = RegionGrid {
        rows: cfg.analysis.region_rows,
        cols: cfg.analysis.region_cols,
    };
    let side = ds.library.grid_side();
    let parts = regions.regions(side, side)?;
    let bg = cfg.background_patch();
    let mut maps = Vec::new();
    let mut rows = Vec::new();
    let mut hits = 0;
    for (index, s) in ds.eval.iter().enumerate().filter(|(_, s)| s.label.is_yes()) {
        let map = occlusion_importance(&model, &s.to_input(&ds.library)?, regions, &bg)?;
        let top = map.argmax_region();
        let key = ds.library.slot_patches(s.slot);
        let hit = parts[top].iter().any(|p| key.contains(p));
        hits += usize::from(hit);
        rows.push((index, s.key_id, s.slot, top, hit));
        maps.push(map);
    }
    let agg = aggregate_importance(&maps)?;
    write_config(cfg, &cfg.out, "occlude")?;
    write_matrix(&cfg.out, "importance", &agg.mean, cfg.analysis.pgm_cell)?;
    let csv = records_to_csv(&["sample", "key", "slot", "top_region", "hit"], &rows, |r| {
        vec![r.0.to_string(), r.1.to_string(), r.2.to_string(), r.3.to_string(), r.4.to_string()]
    });
    write_text(&cfg.out.join("importance_samples.csv"), &csv)?;
    let summary = OcclusionSummary {
        samples: maps.len(),
        key_hit_rate: hits as f64 / maps.len() as f64,
        regions,
        background: cfg.analysis.background,
        normalization: agg.normalization,
    };
    write_json(&cfg.out.join("occlusion.json"), &summary)?;
    println!(
        "occlusion over {} positives: top region on key cell in {:.1}%",
        summary.samples,
        summary.key_hit_rate * 100.0
    );
    Ok(())
}

#[derive(Serialize)]
struct SimilaritySummary {
    keys: usize,
    mean_by_slot: Vec<f64>,
    /// Largest max−min score difference over slots, across keys.
    max_spread: f64,
}

pub fn simprobe(cfg: &RunConfig, checkpoint: &Path, dataset: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let ds = ProbeDataset::load(dataset)?;
    let bg = cfg.background_patch();
    let mut rows = Vec::new();
    let mut mean = vec![0.0; NUM_SLOTS];
    let mut max_spread: f64 = 0.0;
    for &key in &ds.eval_keys {
        let recs = similarity_probe(&model, &ds.library, key, prompt::caption_token(key), &bg)?;
        max_spread = max_spread.max(similarity_spread(&recs));
        for r in recs {
            mean[r.slot] += r.score / ds.eval_keys.len() as f64;
            rows.push((key, r.slot, r.score));
        }
    }
    write_config(cfg, &cfg.out, "simprobe")?;
    let csv = records_to_csv(&["key", "slot", "score"], &rows, |r| {
        vec![r.0.to_string(), r.1.to_string(), r.2.to_string()]
    });
    write_text(&cfg.out.join("similarity.csv"), &csv)?;
    let summary = SimilaritySummary {
        keys: ds.eval_keys.len(),
        mean_by_slot: mean,
        max_spread,
    };
    write_json(&cfg.out.join("similarity.json"), &summary)?;
    println!("similarity over {} keys: max spread across slots {:.3e}", summary.keys, max_spread);
    Ok(())
}

#[derive(Serialize)]
struct FlowSummary<'a> {
    #[serde(flatten)]
    map: &'a vlprobe::analysis::AttentionFlowMap,
    coefficient_of_variation: f64,
    conservation_gap: f64,
}

fn flow_one(cfg: &RunConfig, model: &Model, ds: &ProbeDataset, dir: &Path) -> Result<f64> {
    let inputs = ds
        .eval
        .iter()
        .map(|s| s.to_input(&ds.library))
        .collect::<Result<Vec<MultimodalInput>>>()?;
    let map = attention_flow(model, &inputs)?;
    write_matrix(dir, "flow", &map.as_matrix(), cfg.analysis.pgm_cell)?;
    let cv = map.coefficient_of_variation();
    write_json(
        &dir.join("flow.json"),
        &FlowSummary {
            map: &map,
            coefficient_of_variation: cv,
            conservation_gap: map.conservation_gap(),
        },
    )?;
    println!("{} flow: coefficient of variation {cv:.4}", model.config().scheme);
    Ok(cv)
}

pub fn flow(cfg: &RunConfig, checkpoint: &Path, dataset: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let ds = ProbeDataset::load(dataset)?;
    write_config(cfg, &cfg.out, "flow")?;
    flow_one(cfg, &model, &ds, &cfg.out)?;
    Ok(())
}

pub fn compare(cfg: &RunConfig, baseline: &[PathBuf], candidate: &[PathBuf]) -> Result<()> {
    if baseline.len() != candidate.len() {
        return Err(Error::Config(format!(
            "{} baseline reports but {} candidate reports",
            baseline.len(),
            candidate.len()
        )));
    }
    let pairs = baseline
        .iter()
        .zip(candidate)
        .map(|(b, c)| Ok((PositionReport::load(b)?, PositionReport::load(c)?)))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::Io {
        path: cfg.out.clone(),
        source: e,
    })?;
    write_trend(&cfg.out, &pairs)
}

fn write_trend(dir: &Path, pairs: &[(PositionReport, PositionReport)]) -> Result<()> {
    let trend = compare_seeds(pairs)?;
    let mut csv = format!("{}\n", PositionReport::CSV_HEADER);
    for c in &trend.pairs {
        csv.push_str(&c.baseline.csv_row());
        csv.push('\n');
        csv.push_str(&c.candidate.csv_row());
        csv.push('\n');
    }
    write_text(&dir.join("comparison.csv"), &csv)?;
    write_text(&dir.join("comparison.json"), &(trend.to_json() + "\n"))?;
    for c in &trend.pairs {
        println!(
            "seed {}: Δ {:.4} → {:.4} pp² ({}), Avg {:.2}% → {:.2}%",
            c.baseline.seed,
            c.baseline.delta_percent_sq(),
            c.candidate.delta_percent_sq(),
            if c.variance_reduced { "reduced" } else { "not reduced" },
            c.baseline.avg_percent(),
            c.candidate.avg_percent()
        );
    }
    println!(
        "variance reduced in {}/{} seeds; mean Avg {:.2}% → {:.2}% ({})",
        trend.seeds_variance_reduced,
        trend.pairs.len(),
        trend.mean_avg_baseline * 100.0,
        trend.mean_avg_candidate * 100.0,
        if trend.avg_non_degraded { "non-degraded" } else { "degraded" }
    );
    Ok(())
}

pub fn pipeline(cfg: &RunConfig) -> Result<()> {
    let ds = build_dataset(cfg)?;
    write_config(cfg, &cfg.out, "pipeline")?;
    ds.save(&cfg.out.join("dataset.json"))?;
    let mut pairs = Vec::new();
    for &seed in &cfg.seeds {
        let mut reports = Vec::new();
        for scheme in Scheme::ALL {
            let dir = cfg.out.join(format!("{scheme}-seed{seed}"));
            let model = train_one(cfg, &ds, scheme, seed, &dir)?;
            reports.push(eval_one(cfg, &model, &ds, &dir)?);
            flow_one(cfg, &model, &ds, &dir)?;
        }
        let candidate = reports.pop().expect("two schemes");
        let baseline = reports.pop().expect("two schemes");
        pairs.push((baseline, candidate));
    }
    write_trend(&cfg.out, &pairs)
}
