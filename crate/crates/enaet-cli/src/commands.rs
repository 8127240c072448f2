//! Subcommand implementations. Each takes already-resolved inputs and owns
//! its filesystem layout; dataset loading always happens before any output
//! path is created, so a bad invocation leaves nothing behind.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::Context;
use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use enaet::data::{
    load_dataset, make_synthetic, save_dataset, split_labels, FullDataset, SyntheticConfig,
};
use enaet::model::ModelState;
use enaet::trainer::{
    evaluate, read_metrics, write_metrics_line, TrainConfig, TrainError, TrainSession,
};
use enaet::transforms::{builtin_families, Image};

use crate::font::draw_text;
use crate::plot::{render_error_curves, render_loss_curves};
use crate::spec::{mean_std, Ablation, ExperimentSpec};

#[derive(Debug, Clone, serde::Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub teacher_error: Option<f64>,
    pub student_error: Option<f64>,
    pub steps: u64,
    pub evals: usize,
}

fn train_split(cfg: &TrainConfig, full: &FullDataset) -> anyhow::Result<enaet::data::DatasetSplit> {
    let n_labels = cfg
        .labels_per_class
        .checked_mul(full.num_classes)
        .context("label budget overflows")?;
    Ok(split_labels(full, n_labels, cfg.seed)?)
}

/// Trains one seed into `dir`: resolved config snapshot, metrics stream,
/// rolling checkpoint after every epoch, final checkpoint at the end. With
/// zero epochs only the config, an empty metrics file and the initial
/// checkpoint are written.
pub fn run_one_seed(cfg: &TrainConfig, full: &FullDataset, dir: &Path) -> anyhow::Result<SeedOutcome> {
    let split = train_split(cfg, full)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;

    let mut session = TrainSession::new(cfg.clone(), &split)?;
    let metrics_path = dir.join("metrics.jsonl");
    let mut writer = std::io::BufWriter::new(fs::File::create(&metrics_path)?);
    let rolling = dir.join("checkpoint.ckpt");
    while session.epoch() < cfg.epochs {
        session.run_epoch(&split, &mut |r| {
            write_metrics_line(&mut writer, r).map_err(TrainError::from)
        })?;
        session.save(&rolling)?;
    }
    writer.flush()?;
    session.save(&dir.join("final.ckpt"))?;

    Ok(SeedOutcome {
        seed: cfg.seed,
        teacher_error: session.reported_error(),
        student_error: session.reported_student_error(),
        steps: session.state.step_counter,
        evals: session.eval_history.len(),
    })
}

fn aggregate_json(outcomes: &[SeedOutcome]) -> serde_json::Value {
    let teacher: Vec<f64> = outcomes.iter().filter_map(|o| o.teacher_error).collect();
    let student: Vec<f64> = outcomes.iter().filter_map(|o| o.student_error).collect();
    if teacher.is_empty() {
        return serde_json::Value::Null;
    }
    let (tm, ts) = mean_std(&teacher);
    let (sm, ss) = mean_std(&student);
    serde_json::json!({
        "teacher_mean": tm, "teacher_std": ts,
        "student_mean": sm, "student_std": ss,
    })
}

pub fn cmd_train(spec: &ExperimentSpec, dataset: &Path, out: &Path) -> anyhow::Result<()> {
    let full = load_dataset(dataset)
        .with_context(|| format!("failed to load dataset at {}", dataset.display()))?;

    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), spec.effective_config(spec.base.seed).to_toml())?;

    let mut outcomes = Vec::new();
    for &seed in &spec.seeds {
        let cfg = spec.effective_config(seed);
        let dir = out.join(format!("seed_{seed}"));
        let outcome = run_one_seed(&cfg, &full, &dir)?;
        match outcome.teacher_error {
            Some(t) => println!(
                "seed {seed}: teacher error {t:.4} (student {:.4}) after {} steps",
                outcome.student_error.unwrap_or(f64::NAN),
                outcome.steps
            ),
            None => println!("seed {seed}: no evaluations ({} steps)", outcome.steps),
        }
        outcomes.push(outcome);
    }

    let aggregate = aggregate_json(&outcomes);
    let summary = serde_json::json!({
        "name": spec.name,
        "seeds": spec.seeds,
        "per_seed": outcomes,
        "aggregate": aggregate,
    });
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    if let Some(obj) = aggregate.as_object() {
        println!(
            "aggregate over {} seed(s): teacher {:.4} +/- {:.4}, student {:.4} +/- {:.4}",
            spec.seeds.len(),
            obj["teacher_mean"].as_f64().unwrap(),
            obj["teacher_std"].as_f64().unwrap(),
            obj["student_mean"].as_f64().unwrap(),
            obj["student_std"].as_f64().unwrap(),
        );
    }
    println!("wrote {}", out.join("summary.json").display());
    Ok(())
}

/// The fixed ablation matrix: the full method, each family alone, the two
/// single-term removals, and plain MixMatch.
pub fn ablation_methods() -> Vec<(&'static str, Ablation)> {
    let base = Ablation::default();
    vec![
        ("full", base),
        ("only-proj", Ablation { only_family: Some(0), ..base }),
        ("only-affine", Ablation { only_family: Some(1), ..base }),
        ("only-sim", Ablation { only_family: Some(2), ..base }),
        ("only-euc", Ablation { only_family: Some(3), ..base }),
        ("only-ccbs", Ablation { only_family: Some(4), ..base }),
        ("no-cl", Ablation { no_cl: true, ..base }),
        ("no-aet", Ablation { no_aet: true, ..base }),
        ("ssl-only", Ablation { ssl_only: true, ..base }),
    ]
}

pub fn cmd_ablate(spec: &ExperimentSpec, dataset: &Path, out: &Path) -> anyhow::Result<()> {
    let full = load_dataset(dataset)
        .with_context(|| format!("failed to load dataset at {}", dataset.display()))?;

    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), spec.base.to_toml())?;

    let mut csv = String::from("method");
    for seed in &spec.seeds {
        csv.push_str(&format!(",seed_{seed}"));
    }
    csv.push_str(",mean,std\n");

    for (method, ablation) in ablation_methods() {
        let method_spec = ExperimentSpec {
            name: format!("{}-{method}", spec.name),
            ablation,
            ..spec.clone()
        };
        let mut errors = Vec::new();
        for &seed in &spec.seeds {
            let cfg = method_spec.effective_config(seed);
            let dir = out.join(method).join(format!("seed_{seed}"));
            let outcome = run_one_seed(&cfg, &full, &dir)?;
            errors.push(outcome.teacher_error.unwrap_or(f64::NAN));
        }
        let (mean, std) = mean_std(&errors);
        csv.push_str(method);
        for e in &errors {
            csv.push_str(&format!(",{e:.6}"));
        }
        csv.push_str(&format!(",{mean:.6},{std:.6}\n"));
        println!("{method}: mean teacher error {mean:.4} +/- {std:.4}");
    }

    let path = out.join("ablation.csv");
    fs::write(&path, csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_eval(checkpoint: &Path, dataset: &Path) -> anyhow::Result<()> {
    let (state, extra) = ModelState::load_checkpoint(checkpoint)
        .with_context(|| format!("failed to load checkpoint {}", checkpoint.display()))?;
    let cfg: TrainConfig = serde_json::from_value(extra["train_config"].clone())
        .context("checkpoint carries no training config")?;
    let full = load_dataset(dataset)
        .with_context(|| format!("failed to load dataset at {}", dataset.display()))?;
    let split = train_split(&cfg, &full)?;
    let teacher = evaluate(&state, &split.test, &split.stats, true)?;
    let student = evaluate(&state, &split.test, &split.stats, false)?;
    println!("test images: {}", split.test.len());
    println!("teacher error: {teacher:.4}");
    println!("student error: {student:.4}");
    Ok(())
}

pub fn cmd_gen_data(out: &Path, cfg: &SyntheticConfig, seed: u64) -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let full = make_synthetic(cfg, &mut rng)?;
    save_dataset(out, &full)?;
    println!(
        "wrote {} train and {} test images ({} classes, {}x{}x{}) to {}",
        full.train.len(),
        full.test.len(),
        full.num_classes,
        cfg.height,
        cfg.width,
        cfg.channels,
        out.display()
    );
    Ok(())
}

fn image_to_rgb(img: &Image, scale: u32) -> anyhow::Result<RgbImage> {
    let (h, w, c) = img.dims();
    anyhow::ensure!(c == 1 || c == 3, "cannot render a {c}-channel image");
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut out = RgbImage::new(w as u32 * scale, h as u32 * scale);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let (i, j) = ((y / scale) as usize, (x / scale) as usize);
        *px = if c == 1 {
            let v = quant(img.pixels[(i, j, 0)]);
            Rgb([v, v, v])
        } else {
            Rgb([
                quant(img.pixels[(i, j, 0)]),
                quant(img.pixels[(i, j, 1)]),
                quant(img.pixels[(i, j, 2)]),
            ])
        };
    }
    Ok(out)
}

/// One grid PNG per family: the source image followed by `count` sampled
/// transforms of it.
pub fn cmd_dump_transforms(
    out: &Path,
    dataset: Option<&Path>,
    seed: u64,
    count: usize,
) -> anyhow::Result<()> {
    anyhow::ensure!(count >= 1, "--count must be at least 1");
    let source = match dataset {
        Some(p) => {
            let full =
                load_dataset(p).with_context(|| format!("failed to load dataset at {}", p.display()))?;
            anyhow::ensure!(!full.train.is_empty(), "dataset has no training images");
            full.train[0].0.clone()
        }
        None => {
            let cfg = SyntheticConfig { train_per_class: 1, test_per_class: 1, ..SyntheticConfig::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            make_synthetic(&cfg, &mut rng)?.train[0].0.clone()
        }
    };
    fs::create_dir_all(out)?;

    let (h, w, _) = source.dims();
    let scale: u32 = if h.max(w) <= 48 { 4 } else { 1 };
    let (cell_h, cell_w) = (h as u32 * scale, w as u32 * scale);
    let pad = 4u32;
    let label_h = 14u32;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for family in builtin_families() {
        let cols = count as u32 + 1;
        let width = cols * cell_w + (cols + 1) * pad;
        let height = label_h + cell_h + 2 * pad;
        let mut grid = RgbImage::from_pixel(width, height, Rgb([40, 40, 40]));
        draw_text(
            &mut grid,
            pad as i64,
            4,
            &format!("{} (original + {count} samples)", family.name()),
            Rgb([255, 255, 255]),
        );
        for col in 0..cols {
            let img = if col == 0 {
                source.clone()
            } else {
                let t = family.sample(&mut rng);
                family.apply(&source, &t)?
            };
            let tile = image_to_rgb(&img, scale)?;
            let ox = pad + col * (cell_w + pad);
            let oy = label_h + pad;
            for (x, y, px) in tile.enumerate_pixels() {
                grid.put_pixel(ox + x, oy + y, *px);
            }
        }
        let path = out.join(format!("{}.png", family.name()));
        grid.save(&path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn cmd_plot(metrics: &Path, out: &Path) -> anyhow::Result<()> {
    let records = read_metrics(metrics)?;
    if records.is_empty() {
        eprintln!("warning: {} contains no records; nothing to plot", metrics.display());
        return Ok(());
    }
    fs::create_dir_all(out)?;
    match render_loss_curves(&records) {
        Some(img) => {
            let path = out.join("loss.png");
            img.save(&path)?;
            println!("wrote {}", path.display());
        }
        None => eprintln!("warning: no step records; skipping the loss plot"),
    }
    match render_error_curves(&records) {
        Some(img) => {
            let path = out.join("error.png");
            img.save(&path)?;
            println!("wrote {}", path.display());
        }
        None => eprintln!("warning: no evaluation records; skipping the error plot"),
    }
    Ok(())
}
