//! One function per subcommand, plus the artifact-location helpers they
//! share. Everything here assumes a [`RunConfig`](super::RunConfig) that has
//! already been merged and seed-derived.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array3};
use serde_json::json;

use super::{record_timing, CliError, RunConfig};
use crate::attack::{convert, save_conversion};
use crate::corpus::{
    generate_corpus, kde_density, load_manifest, save_corpus, style_stats, Corpus, GridSpec,
    Rendering, Sample, Split,
};
use crate::harness::{
    attack_success_table, distillation_experiment, integrity_check, log_residual,
    mixed_lesion_eval, robustness_perturb, save_attack_table, save_gain, save_matrix,
    select_targets, style_adoption_check, train_grader, AttackSetting, ClassTarget,
    DistillConfig, MatrixEntry, PerturbKind,
};
use crate::probe::{
    best_row, load_probe, placement_sweep, save_probe, train_probe, Probe, SweepConfig,
};
use crate::segcore::{load_model, save_model, train, SegModel, CLASS_NAMES};
use crate::styleops::{
    interpolate_loss_attack, interpolation_sweep, save_points, save_sweep, save_uncertainty,
    uncertainty_map, InterpMode, SweepPoint,
};
use crate::viz;

// ---------------------------------------------------------------------------
// shared plumbing

pub(crate) fn corpus_root(cfg: &RunConfig) -> PathBuf {
    cfg.corpus_dir
        .clone()
        .unwrap_or_else(|| cfg.out.join("corpus"))
}

pub(crate) fn load_corpora(cfg: &RunConfig) -> Result<Vec<Corpus>, CliError> {
    let root = corpus_root(cfg);
    if !root.join("corpus.json").is_file() {
        return Err(CliError::Precondition(format!(
            "no corpus at {}; run `styleconv synth` first",
            root.display()
        )));
    }
    Ok(load_manifest(&root)?)
}

pub(crate) fn model_path(cfg: &RunConfig) -> PathBuf {
    cfg.model
        .clone()
        .unwrap_or_else(|| cfg.out.join("models").join("gen.ckpt"))
}

pub(crate) fn load_model_ck(cfg: &RunConfig) -> Result<SegModel<f32>, CliError> {
    let path = model_path(cfg);
    if !path.is_file() {
        return Err(CliError::Precondition(format!(
            "no model checkpoint at {}; run `styleconv train` first",
            path.display()
        )));
    }
    Ok(load_model(&path)?.0)
}

pub(crate) fn probe_path(cfg: &RunConfig) -> PathBuf {
    cfg.probe
        .clone()
        .unwrap_or_else(|| cfg.out.join("probe").join("probe.json"))
}

pub(crate) fn load_probe_ck(cfg: &RunConfig) -> Result<Probe, CliError> {
    let path = probe_path(cfg);
    if !path.is_file() {
        return Err(CliError::Precondition(format!(
            "probe required: nothing at {}; run `styleconv train-probe` first",
            path.display()
        )));
    }
    Ok(load_probe(&path)?)
}

/// Style name or numeric id → index into `corpora`.
fn resolve_style(corpora: &[Corpus], s: &str) -> Result<usize, CliError> {
    if let Some(i) = corpora.iter().position(|c| c.spec.name == s) {
        return Ok(i);
    }
    if let Ok(i) = s.parse::<usize>() {
        if i < corpora.len() {
            return Ok(i);
        }
    }
    let known: Vec<&str> = corpora.iter().map(|c| c.spec.name.as_str()).collect();
    Err(CliError::Precondition(format!(
        "unknown style '{s}' (known: {})",
        known.join(", ")
    )))
}

fn pick_sample<'a>(
    corpora: &'a [Corpus],
    style: Option<&str>,
    index: usize,
    split: Split,
) -> Result<&'a Sample, CliError> {
    let si = match style {
        Some(s) => resolve_style(corpora, s)?,
        None => 0,
    };
    let pool = match split {
        Split::Train => &corpora[si].train,
        Split::Val => &corpora[si].val,
        Split::Test => &corpora[si].test,
    };
    pool.get(index).ok_or_else(|| {
        CliError::Precondition(format!(
            "style '{}' has {} {} samples, index {index} is out of range",
            corpora[si].spec.name,
            pool.len(),
            split.name()
        ))
    })
}

/// Explicit target, or the other style when exactly two exist.
fn resolve_target(
    corpora: &[Corpus],
    n_styles: usize,
    source: u16,
    flag: Option<&str>,
) -> Result<usize, CliError> {
    match flag {
        Some(s) => {
            let t = resolve_style(corpora, s)?;
            if t >= n_styles {
                return Err(CliError::Precondition(format!(
                    "style id {t} is outside the probe's {n_styles} origins"
                )));
            }
            Ok(t)
        }
        None if n_styles == 2 => Ok(1 - source as usize % 2),
        None => Err(CliError::Usage(
            "--target is required when more than two styles exist".into(),
        )),
    }
}

fn test_refs(corpora: &[Corpus], limit: Option<usize>) -> Vec<&Sample> {
    let mut refs: Vec<&Sample> = corpora.iter().flat_map(|c| c.test.iter()).collect();
    if let Some(n) = limit {
        refs.truncate(n);
    }
    refs
}

fn write_text(path: &Path, body: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| super::io_fail(parent, e))?;
    }
    fs::write(path, body).map_err(|e| super::io_fail(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
    write_text(path, &(body + "\n"))
}

fn save_png(img: &image::RgbImage, path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| super::io_fail(parent, e))?;
    }
    img.save(path)
        .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "—".into())
}

// ---------------------------------------------------------------------------
// corpus commands

pub(crate) fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let corpora = generate_corpus(&cfg.corpus)?;
    let root = corpus_root(cfg);
    save_corpus(&root, &corpora)?;
    let c0 = &corpora[0];
    println!(
        "synth: {} styles × {} scenes ({} train / {} val / {} test) -> {}",
        corpora.len(),
        cfg.corpus.n_images,
        c0.train.len(),
        c0.val.len(),
        c0.test.len(),
        root.display()
    );
    Ok(())
}

pub(crate) fn characterize(
    cfg: &RunConfig,
    class: Option<u8>,
    grid: usize,
    bandwidth: Option<f64>,
) -> Result<(), CliError> {
    let classes: Vec<u8> = match class {
        Some(c) if (1..=4).contains(&c) => vec![c],
        Some(c) => {
            return Err(CliError::Usage(format!(
                "--class must be a lesion class 1–4, got {c}"
            )))
        }
        None => (1..=4).collect(),
    };
    if grid < 2 {
        return Err(CliError::Usage("--grid must be at least 2".into()));
    }
    let corpora = load_corpora(cfg)?;
    let dir = cfg.out.join("characterize");

    let mut all_stats = Vec::new();
    let mut csv = String::from("style,class,mean_area,component_count\n");
    for &c in &classes {
        for co in &corpora {
            let st = style_stats(co, c);
            for &(s, q) in &st.pairs {
                csv.push_str(&format!("{},{},{s},{q}\n", st.style, c));
            }
            all_stats.push(st);
        }
    }
    write_text(&dir.join("sq_pairs.csv"), &csv)?;
    write_json(
        &dir.join("stats.json"),
        &serde_json::to_value(&all_stats).expect("stats serialize"),
    )?;

    let mut kde_meta = Vec::new();
    for &c in &classes {
        let pooled: Vec<(f64, f64)> = all_stats
            .iter()
            .filter(|s| s.class_id == c)
            .flat_map(|s| s.pairs.iter().copied())
            .collect();
        if pooled.is_empty() {
            println!("characterize: class {c} ({}) never occurs, skipping KDE", CLASS_NAMES[c as usize]);
            continue;
        }
        // one grid per class so the per-style maps are comparable
        let gspec = GridSpec::covering(&pooled, grid, grid);
        for st in all_stats.iter().filter(|s| s.class_id == c) {
            if st.pairs.is_empty() {
                continue;
            }
            let k = kde_density(&st.pairs, bandwidth, &gspec)?;
            let v = k.normalized.map(|&x| x as f32);
            save_png(
                &viz::upscale(&viz::heatmap_rgb(&v, None), 4),
                &dir.join(format!("kde_{}_c{c}.png", st.style)),
            )?;
            kde_meta.push(json!({
                "style": st.style,
                "class": c,
                "bandwidth": k.bandwidth,
                "grid": k.spec,
                "n_points": st.pairs.len(),
            }));
        }
    }
    write_json(&dir.join("kde.json"), &serde_json::Value::Array(kde_meta))?;

    for st in &all_stats {
        println!(
            "characterize: {} class {} ({}): {} occupied images, centroid {}",
            st.style,
            st.class_id,
            CLASS_NAMES[st.class_id as usize],
            st.pairs.len(),
            st.centroid
                .map(|(s, q)| format!("(S {s:.1}, Q {q:.2})"))
                .unwrap_or_else(|| "—".into()),
        );
    }
    println!("characterize: wrote {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// training commands

pub(crate) fn train_cmd(
    cfg: &RunConfig,
    styles: &str,
    name: Option<&str>,
) -> Result<(), CliError> {
    let corpora = load_corpora(cfg)?;
    let chosen: Vec<usize> = if styles == "all" {
        (0..corpora.len()).collect()
    } else {
        styles
            .split(',')
            .map(|s| resolve_style(&corpora, s.trim()))
            .collect::<Result<_, _>>()?
    };
    let style_names: Vec<String> = chosen
        .iter()
        .map(|&i| corpora[i].spec.name.clone())
        .collect();
    let name = name
        .map(str::to_string)
        .unwrap_or_else(|| if styles == "all" { "gen".into() } else { style_names.join("-") });

    // one pool per style keeps batches balanced across origins
    let train_pools: Vec<&[Sample]> = chosen.iter().map(|&i| corpora[i].train.as_slice()).collect();
    let val_pools: Vec<&[Sample]> = chosen.iter().map(|&i| corpora[i].val.as_slice()).collect();
    let tm = train(&cfg.arch, &train_pools, &val_pools, &cfg.train)?;

    let dir = cfg.out.join("models");
    fs::create_dir_all(&dir).map_err(|e| super::io_fail(&dir, e))?;
    let ckpt = dir.join(format!("{name}.ckpt"));
    save_model(
        &ckpt,
        &tm.model,
        json!({
            "styles": style_names,
            "best_step": tm.best_step,
            "best_val_loss": tm.best_val_loss,
            "root_seed": cfg.seed,
        }),
    )?;

    let mut hist = String::from("step,train_loss,val_loss,val_miou,is_best\n");
    for r in &tm.history {
        hist.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.train_loss, r.val_loss, r.val_miou, r.is_best
        ));
    }
    write_text(&dir.join(format!("{name}.history.csv")), &hist)?;

    let last = tm.history.last();
    println!(
        "train[{name}]: {} steps on {:?}, best val loss {:.4} @ step {}, final val mIoU {:.4} -> {}",
        cfg.train.steps,
        style_names,
        tm.best_val_loss,
        tm.best_step,
        last.map(|r| r.val_miou).unwrap_or(f64::NAN),
        ckpt.display()
    );
    Ok(())
}

pub(crate) fn train_probe_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let corpora = load_corpora(cfg)?;
    let model = load_model_ck(cfg)?;
    let train_refs: Vec<&Sample> = corpora.iter().flat_map(|c| c.train.iter()).collect();
    let val_refs: Vec<&Sample> = corpora.iter().flat_map(|c| c.val.iter()).collect();

    let fit = train_probe(&model, cfg.tap, &train_refs, &cfg.probe_train)?;
    let val_accuracy = fit.probe.accuracy(&model, &val_refs)?;

    let dir = cfg.out.join("probe");
    fs::create_dir_all(&dir).map_err(|e| super::io_fail(&dir, e))?;
    save_probe(&dir.join("probe.json"), &fit.probe)?;
    write_json(
        &dir.join("fit.json"),
        &json!({
            "tap": fit.probe.tap,
            "n_styles": fit.probe.n_styles,
            "iters": fit.iters,
            "converged": fit.converged,
            "grad_linf": fit.grad_linf,
            "final_loss": fit.final_loss,
            "train_accuracy": fit.train_accuracy,
            "val_accuracy": val_accuracy,
        }),
    )?;
    println!(
        "train-probe[{}]: train acc {:.3}, val acc {:.3}, {} iters (converged: {}) -> {}",
        cfg.tap.name(),
        fit.train_accuracy,
        val_accuracy,
        fit.iters,
        fit.converged,
        dir.join("probe.json").display()
    );
    Ok(())
}

pub(crate) fn probe_sweep_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let corpora = load_corpora(cfg)?;
    let model = load_model_ck(cfg)?;
    let train_refs: Vec<&Sample> = corpora.iter().flat_map(|c| c.train.iter()).collect();
    let val_refs: Vec<&Sample> = corpora.iter().flat_map(|c| c.val.iter()).collect();

    let sweep_cfg = SweepConfig {
        probe: cfg.probe_train.clone(),
    };
    let (rows, _probes) = placement_sweep(&model, &train_refs, &val_refs, &sweep_cfg)?;
    let best = best_row(&rows);

    let dir = cfg.out.join("probe_sweep");
    let mut csv = String::from("tap,depth,channels,train_accuracy,val_accuracy,iters,converged\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.tap, r.depth, r.channels, r.train_accuracy, r.val_accuracy, r.iters, r.converged
        ));
    }
    write_text(&dir.join("sweep.csv"), &csv)?;
    write_json(
        &dir.join("sweep.json"),
        &json!({ "rows": rows, "best_tap": rows[best].tap }),
    )?;

    println!("probe-sweep: tap          depth  ch   train    val");
    for (i, r) in rows.iter().enumerate() {
        println!(
            "probe-sweep: {:<12} {:>5} {:>3}  {:.4}  {:.4}{}",
            r.tap,
            r.depth,
            r.channels,
            r.train_accuracy,
            r.val_accuracy,
            if i == best { "  <- best" } else { "" }
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// attack commands

pub(crate) fn attack_table_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let corpora = load_corpora(cfg)?;
    let model = load_model_ck(cfg)?;
    let probe = load_probe_ck(cfg)?;
    let refs = test_refs(&corpora, cfg.limit);

    let mut settings = Vec::new();
    for &eps in &cfg.eps_grid {
        for &steps in &cfg.steps_grid {
            settings.push(AttackSetting { eps, steps });
        }
    }
    let targets: Vec<usize> = (0..probe.n_styles).collect();
    let (table, timings) =
        attack_success_table(&model, &probe, &refs, &settings, &targets, cfg.attack.radius)?;
    let dir = cfg.out.join("attack_table");
    save_attack_table(&dir, &table)?;
    for t in &timings {
        record_timing(
            &cfg.out,
            &format!("attack-table eps={} steps={} [img/s]", t.eps, t.steps),
            t.images_per_sec,
        )?;
    }

    for s in &settings {
        let cells: Vec<_> = table
            .cells
            .iter()
            .filter(|c| c.eps == s.eps && c.steps == s.steps)
            .collect();
        let mean: f64 =
            cells.iter().map(|c| c.success_rate).sum::<f64>() / cells.len().max(1) as f64;
        println!(
            "attack-table: eps={:<7} steps={:<3} mean success {:.3} over {} targets × {} images",
            s.eps,
            s.steps,
            mean,
            targets.len(),
            refs.len()
        );
    }
    println!("attack-table: wrote {}", dir.display());
    Ok(())
}

fn rgb_to_array(img: &image::RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    let mut x = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (px, py, p) in img.enumerate_pixels() {
        for c in 0..3 {
            x[[c, py as usize, px as usize]] = p.0[c] as f32 / 255.0;
        }
    }
    x
}

/// Either a borrowed corpus sample or an owned one built from `--image`.
fn select_input(
    cfg: &RunConfig,
    corpora: &[Corpus],
    model: &SegModel<f32>,
    probe: &Probe,
    style: Option<&str>,
    index: usize,
    image: Option<&Path>,
) -> Result<Sample, CliError> {
    match image {
        Some(path) => {
            let img = image::open(path)
                .map_err(|e| CliError::Precondition(format!("image {}: {e}", path.display())))?
                .to_rgb8();
            let x = rgb_to_array(&img);
            // no ground truth for external inputs; the probe names the origin
            let (origin, _) = probe.predict(model, &x)?;
            let (_, h, w) = x.dim();
            Ok(Sample {
                image: x,
                mask: Array2::zeros((h, w)),
                origin,
                severity: None,
                sample_id: path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "external".into()),
            })
        }
        None => {
            let _ = cfg;
            Ok(pick_sample(corpora, style, index, Split::Test)?.clone())
        }
    }
}

pub(crate) fn convert_cmd(
    cfg: &RunConfig,
    style: Option<&str>,
    index: usize,
    target: Option<&str>,
    image: Option<&Path>,
) -> Result<(), CliError> {
    let corpora = load_corpora(cfg)?;
    let model = load_model_ck(cfg)?;
    let probe = load_probe_ck(cfg)?;
    let sample = select_input(cfg, &corpora, &model, &probe, style, index, image)?;
    let target = resolve_target(&corpora, probe.n_styles, sample.origin, target)?;

    let outcome = convert(&model, &probe, &sample, target, &cfg.attack)?;
    let dir = cfg.out.join("convert");
    let (png, _delta, _json) = save_conversion(&dir, &outcome)?;

    // side-by-side panel: clean | converted | per-pixel |δ| (summed channels)
    let (_, h, w) = outcome.delta.dim();
    let mut mag = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            mag[[y, x]] =
                (0..3).map(|c| outcome.delta[[c, y, x]].abs()).sum::<f32>();
        }
    }
    let panel = viz::hstack(
        &[
            viz::rgb_image(&sample.image),
            viz::rgb_image(&outcome.x_adv),
            viz::heatmap_rgb(&mag, None),
        ],
        2,
    );
    save_png(
        &viz::upscale(&panel, 3),
        &dir.join(format!("{}.panel.png", outcome.record.sample_id)),
    )?;

    let r = &outcome.record;
    println!(
        "convert[{}]: style {} -> {} success={} linf={:.5} (probe said {} before, {} after) -> {}",
        r.sample_id,
        r.source_style,
        r.target_style,
        r.success,
        r.linf,
        r.initial_pred,
        r.final_pred,
        png.display()
    );
    Ok(())
}

pub(crate) fn interpolate_cmd(
    cfg: &RunConfig,
    style: Option<&str>,
    index: usize,
    target: Option<&str>,
) -> Result<(), CliError> {
    let corpora = load_corpora(cfg)?;
    let model = load_model_ck(cfg)?;
    let probe = load_probe_ck(cfg)?;
    let sample = pick_sample(&corpora, style, index, Split::Test)?;
    let target = resolve_target(&corpora, probe.n_styles, sample.origin, target)?;
    let dir = cfg.out.join("interpolate");

    let paths = match cfg.interp_mode {
        InterpMode::InputSpace => {
            let sweep =
                interpolation_sweep(&model, &probe, &sample.image, target, &cfg.alphas, &cfg.attack)?;
            save_sweep(&dir, &sweep)?
        }
        InterpMode::LossSpace => {
            let source = sample.origin as usize;
            let mut points = Vec::with_capacity(cfg.alphas.len());
            for &alpha in &cfg.alphas {
                let res = interpolate_loss_attack(
                    &model, &probe, &sample.image, source, target, alpha, &cfg.attack,
                )?;
                // canonical x + δ form, same as conversion persistence
                let delta = &res.x_adv - &sample.image;
                let x_inter = &sample.image + &delta;
                let mask = model.predict_mask(&x_inter)?;
                let mut class_areas = vec![0usize; model.cfg.n_classes];
                for &m in mask.iter() {
                    class_areas[m as usize] += 1;
                }
                let (_, dist) = probe.predict(&model, &x_inter)?;
                points.push(SweepPoint {
                    alpha,
                    x_inter,
                    mask,
                    class_areas,
                    probe_dist: dist.to_vec(),
                });
            }
            save_points(&dir, &points)?
        }
    };
    write_json(
        &dir.join("interpolate.json"),
        &json!({
            "sample_id": sample.sample_id,
            "source": sample.origin,
            "target": target,
            "mode": cfg.interp_mode,
            "alphas": cfg.alphas,
            "attack": cfg.attack,
        }),
    )?;
    println!(
        "interpolate[{}]: {} rungs ({:?}) toward style {} -> {}",
        sample.sample_id,
        cfg.alphas.len(),
        cfg.interp_mode,
        target,
        paths.strip.display()
    );
    Ok(())
}

pub(crate) fn uncertainty_cmd(
    cfg: &RunConfig,
    style: Option<&str>,
    index: usize,
    target: Option<&str>,
) -> Result<(), CliError> {
    let corpora = load_corpora(cfg)?;
    let model = load_model_ck(cfg)?;
    let probe = load_probe_ck(cfg)?;
    let sample = pick_sample(&corpora, style, index, Split::Test)?;
    let target = resolve_target(&corpora, probe.n_styles, sample.origin, target)?;

    let um = uncertainty_map(
        &model,
        &probe,
        &sample.image,
        target,
        cfg.n_a,
        cfg.seed,
        &cfg.attack,
    )?;
    let dir = cfg.out.join("uncertainty");
    let paths = save_uncertainty(&dir, &um)?;

    let mean_sigma = um.sigma.mean().unwrap_or(0.0);
    let max_sigma = um.sigma.iter().cloned().fold(0.0f32, f32::max);
    println!(
        "uncertainty[{}]: N_A={} toward style {}, mean σ {:.4}, max σ {:.4} -> {}",
        sample.sample_id,
        um.n_a,
        target,
        mean_sigma,
        max_sigma,
        paths.meta.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluation commands

pub(crate) fn eval_matrix_cmd(cfg: &RunConfig, models: Option<&str>) -> Result<(), CliError> {
    let corpora = load_corpora(cfg)?;
    let paths: Vec<PathBuf> = match models {
        Some(csv) => csv.split(',').map(|p| PathBuf::from(p.trim())).collect(),
        None => {
            let mut v = vec![model_path(cfg)];
            for c in &corpora {
                let p = cfg.out.join("models").join(format!("{}.ckpt", c.spec.name));
                if p.is_file() {
                    v.push(p);
                }
            }
            v
        }
    };
    let mut loaded: Vec<(String, SegModel<f32>)> = Vec::new();
    for p in &paths {
        if !p.is_file() {
            return Err(CliError::Precondition(format!(
                "no model checkpoint at {}; run `styleconv train` first",
                p.display()
            )));
        }
        let name = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string());
        loaded.push((name, load_model(p)?.0));
    }

    let entries: Vec<MatrixEntry> = loaded
        .iter()
        .map(|(name, model)| MatrixEntry {
            name: name.clone(),
            model,
            specialist: corpora.iter().any(|c| c.spec.name == *name),
        })
        .collect();
    let cols: Vec<(String, Vec<&Sample>)> = corpora
        .iter()
        .map(|c| (c.spec.name.clone(), c.test.iter().collect()))
        .collect();
    let m = cross_matrix_checked(&entries, &cols)?;
    let dir = cfg.out.join("eval_matrix");
    save_matrix(&dir, &m)?;

    let header: Vec<String> = m.col_labels.iter().map(|c| format!("{c:>10}")).collect();
    println!("eval-matrix: {:<12} {}  row mean", "model", header.join(" "));
    for (r, name) in m.row_labels.iter().enumerate() {
        let cells: Vec<String> = m.cells[r].iter().map(|v| format!("{v:>10.4}")).collect();
        println!(
            "eval-matrix: {:<12} {}  {:.4}",
            name,
            cells.join(" "),
            m.row_mean[r]
        );
    }

    // adoption check whenever the generalist and every specialist are present
    let gen = loaded.iter().find(|(n, _)| !corpora.iter().any(|c| c.spec.name == *n));
    let specialists: Vec<(String, &SegModel<f32>)> = corpora
        .iter()
        .filter_map(|c| {
            loaded
                .iter()
                .find(|(n, _)| *n == c.spec.name)
                .map(|(n, m)| (n.clone(), m))
        })
        .collect();
    if let Some((gen_name, gen_model)) = gen {
        if specialists.len() == corpora.len() {
            let per_style: Vec<Vec<&Sample>> =
                corpora.iter().map(|c| c.test.iter().collect()).collect();
            let rep =
                style_adoption_check(gen_model, &specialists, &per_style, cfg.adoption_margin)?;
            write_json(
                &dir.join("adoption.json"),
                &serde_json::to_value(&rep).expect("adoption serialize"),
            )?;
            for row in &rep.rows {
                println!(
                    "eval-matrix: adoption[{}]: {} {:.4} vs specialist {:.4} -> {}",
                    row.style,
                    gen_name,
                    row.generalist_miou,
                    row.specialist_miou,
                    if row.adopted { "adopted" } else { "NOT adopted" }
                );
            }
        }
    }
    println!("eval-matrix: wrote {}", dir.display());
    Ok(())
}

/// `cross_matrix` with the CLI's error wrapping.
fn cross_matrix_checked(
    entries: &[MatrixEntry<'_>],
    cols: &[(String, Vec<&Sample>)],
) -> Result<crate::harness::EvalMatrix, CliError> {
    Ok(crate::harness::cross_matrix(entries, cols)?)
}

pub(crate) fn distill_gain_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let amp = cfg
        .corpus
        .styles
        .iter()
        .map(|s| s.marker_amplitude)
        .fold(0.0f32, f32::max);
    let (dil, merge) = cfg
        .corpus
        .styles
        .iter()
        .find(|s| s.rendering == Rendering::Coarse)
        .map(|s| (s.dilation_radius, s.merge_distance))
        .unwrap_or((2, 6.0));
    let dc = DistillConfig {
        n_images: cfg.corpus.n_images,
        image_size: cfg.corpus.image_size,
        fine_frac: cfg.fine_frac,
        marker_amplitude: if amp > 0.0 { amp } else { 0.01 },
        dilation_radius: dil,
        merge_distance: merge,
        arch: cfg.arch.clone(),
        train: cfg.train.clone(),
        probe_cfg: cfg.probe_train.clone(),
        probe_tap: cfg.tap,
        attack: cfg.attack.clone(),
        seed: cfg.seed,
    };
    let (report, tm, probe) = distillation_experiment(&dc)?;

    let dir = cfg.out.join("distill");
    fs::create_dir_all(&dir).map_err(|e| super::io_fail(&dir, e))?;
    save_gain(&dir, &report.gain)?;
    write_json(
        &dir.join("distill.json"),
        &serde_json::to_value(&report).expect("report serialize"),
    )?;
    save_model(
        &dir.join("model.ckpt"),
        &tm.model,
        json!({
            "experiment": "distill",
            "fine_frac": report.fine_frac,
            "root_seed": cfg.seed,
        }),
    )?;
    save_probe(&dir.join("probe.json"), &probe)?;

    println!(
        "distill-gain: {}/{} fine train images, probe acc {:.3}",
        report.n_fine_train, report.n_train, report.probe_train_accuracy
    );
    println!(
        "distill-gain: fine-test mIoU {:.4} -> {:.4} after conversion toward fine (gain {:+.4}, conversions {:.0}% successful) -> {}",
        report.gain.miou_before,
        report.gain.miou_after,
        report.gain.gain,
        report.gain.conversion_success_rate * 100.0,
        dir.display()
    );
    Ok(())
}

pub(crate) fn mixed_eval_cmd(cfg: &RunConfig, style: Option<&str>) -> Result<(), CliError> {
    let corpora = load_corpora(cfg)?;
    let model = load_model_ck(cfg)?;
    let probe = load_probe_ck(cfg)?;
    let si = match style {
        Some(s) => resolve_style(&corpora, s)?,
        None => 0,
    };
    let mut val_refs: Vec<&Sample> = corpora[si].val.iter().collect();
    let mut eval_refs: Vec<&Sample> = corpora[si].test.iter().collect();
    if let Some(n) = cfg.limit {
        val_refs.truncate(n);
        eval_refs.truncate(n);
    }

    let targets = select_targets(&model, &probe, &val_refs, &cfg.attack)?;
    let report = mixed_lesion_eval(&model, &probe, &eval_refs, &targets, &cfg.attack)?;

    let dir = cfg.out.join("mixed_eval");
    write_json(
        &dir.join("mixed.json"),
        &json!({
            "style": corpora[si].spec.name,
            "targets": targets,
            "report": report,
        }),
    )?;
    let mut csv = String::from("class_id,class_name,target,auc_pr,auc_pr_unconverted\n");
    for r in &report.rows {
        let tgt = match r.target {
            ClassTarget::NoConversion => "none".to_string(),
            ClassTarget::Style(s) => format!("{s}"),
        };
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.class_id,
            r.class_name,
            tgt,
            r.auc_pr.map(|v| v.to_string()).unwrap_or_default(),
            r.auc_pr_unconverted.map(|v| v.to_string()).unwrap_or_default(),
        ));
    }
    write_text(&dir.join("mixed.csv"), &csv)?;

    for r in &report.rows {
        println!(
            "mixed-eval: {} ({}) target {:<6} AUC-PR {} (unconverted {})",
            r.class_id,
            r.class_name,
            match r.target {
                ClassTarget::NoConversion => "none".to_string(),
                ClassTarget::Style(s) => format!("s{s}"),
            },
            fmt_opt(r.auc_pr),
            fmt_opt(r.auc_pr_unconverted),
        );
    }
    println!(
        "mixed-eval[{}]: mean AUC-PR {:.4} vs {:.4} unconverted over {} images -> {}",
        corpora[si].spec.name,
        report.mean_auc,
        report.mean_auc_unconverted,
        report.n,
        dir.display()
    );
    Ok(())
}

pub(crate) fn integrity_cmd(
    cfg: &RunConfig,
    style: Option<&str>,
    target: Option<&str>,
) -> Result<(), CliError> {
    let corpora = load_corpora(cfg)?;
    let model = load_model_ck(cfg)?;
    let probe = load_probe_ck(cfg)?;
    let si = match style {
        Some(s) => resolve_style(&corpora, s)?,
        None => 0,
    };
    let source = corpora[si].test.first().map(|s| s.origin).unwrap_or(0);
    let target = resolve_target(&corpora, probe.n_styles, source, target)?;

    // the grader learns severity from every style's train split
    let grader_refs: Vec<&Sample> = corpora.iter().flat_map(|c| c.train.iter()).collect();
    let (grader, train_mse) = train_grader(&grader_refs, &cfg.grader)?;

    let mut refs: Vec<&Sample> = corpora[si].test.iter().collect();
    if let Some(n) = cfg.limit {
        refs.truncate(n);
    }
    if refs.is_empty() {
        return Err(CliError::Precondition(format!(
            "style '{}' has no test samples",
            corpora[si].spec.name
        )));
    }
    let mut conversions = Vec::with_capacity(refs.len());
    for s in &refs {
        conversions.push(convert(&model, &probe, s, target, &cfg.attack)?.x_adv);
    }
    let report = integrity_check(&grader, &refs, &conversions)?;

    let dir = cfg.out.join("integrity");
    write_json(
        &dir.join("integrity.json"),
        &json!({
            "style": corpora[si].spec.name,
            "target": target,
            "grader_train_mse": train_mse,
            "report": report,
        }),
    )?;
    for (k, (s, conv)) in refs.iter().zip(&conversions).enumerate().take(3) {
        let (resid, valid) = log_residual(&s.image, conv)?;
        let (_, h, w) = resid.dim();
        let mut plane = Array2::<f32>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let v: f32 = (0..3).map(|c| resid[[c, y, x]].abs()).sum::<f32>() / 3.0;
                plane[[y, x]] = if (0..3).any(|c| valid[[c, y, x]]) { v } else { 0.0 };
            }
        }
        save_png(
            &viz::upscale(&viz::heatmap_rgb(&plane, None), 4),
            &dir.join(format!("x_plotted_{k}.png")),
        )?;
    }

    println!(
        "integrity[{} -> s{}]: grader train MSE {:.4}; conversion score MSE {:.4}, {}/{} grades retained ({} flips), mean |residual| {:.2} dB ({:.1}% pixels masked) -> {}",
        corpora[si].spec.name,
        target,
        train_mse,
        report.mse,
        report.retained,
        report.n,
        report.flips.len(),
        report.mean_abs_residual_db,
        report.masked_frac * 100.0,
        dir.display()
    );
    Ok(())
}

pub(crate) fn robustness_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let corpora = load_corpora(cfg)?;
    let model = load_model_ck(cfg)?;
    let probe = load_probe_ck(cfg)?;
    let refs = test_refs(&corpora, cfg.limit);

    let kinds = [
        PerturbKind::Identity,
        PerturbKind::Resample,
        PerturbKind::ColorJitter,
        PerturbKind::Jpeg,
    ];
    let mut drifts = Vec::new();
    for kind in kinds {
        drifts.push(robustness_perturb(&model, &probe, &refs, kind, cfg.seed)?);
    }

    // the attack at the configured setting, for scale
    let settings = [AttackSetting {
        eps: cfg.attack.eps,
        steps: cfg.attack.steps,
    }];
    let targets: Vec<usize> = (0..probe.n_styles).collect();
    let (table, _) =
        attack_success_table(&model, &probe, &refs, &settings, &targets, cfg.attack.radius)?;
    let attack_success_rate =
        table.cells.iter().map(|c| c.success_rate).sum::<f64>() / table.cells.len() as f64;

    let dir = cfg.out.join("robustness");
    write_json(
        &dir.join("drift.json"),
        &json!({
            "drifts": drifts,
            "attack": cfg.attack,
            "attack_success_rate": attack_success_rate,
        }),
    )?;
    let mut csv = String::from("kind,n,probe_flip_rate,mask_change_rate\n");
    for d in &drifts {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            d.kind.name(),
            d.n,
            d.probe_flip_rate,
            d.mask_change_rate
        ));
    }
    write_text(&dir.join("drift.csv"), &csv)?;

    for d in &drifts {
        println!(
            "robustness: {:<12} probe flips {:.3}, mask change {:.4} over {} images",
            d.kind.name(),
            d.probe_flip_rate,
            d.mask_change_rate,
            d.n
        );
    }
    println!(
        "robustness: targeted attack success {:.3} at eps={} steps={} -> {}",
        attack_success_rate,
        cfg.attack.eps,
        cfg.attack.steps,
        dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// pipeline

pub(crate) fn pipeline(cfg: &RunConfig, preset: &str) -> Result<(), CliError> {
    if preset != "toy" {
        return Err(CliError::Usage(format!(
            "unknown preset '{preset}' (available: toy)"
        )));
    }
    let style_names: Vec<String> = cfg.corpus.styles.iter().map(|s| s.name.clone()).collect();

    run_stage(cfg, "synth", || synth(cfg))?;
    run_stage(cfg, "characterize", || characterize(cfg, None, 64, None))?;
    run_stage(cfg, "train-gen", || train_cmd(cfg, "all", Some("gen")))?;
    for name in &style_names {
        run_stage(cfg, &format!("train-{name}"), || {
            train_cmd(cfg, name, Some(name))
        })?;
    }
    run_stage(cfg, "train-probe", || train_probe_cmd(cfg))?;
    run_stage(cfg, "probe-sweep", || probe_sweep_cmd(cfg))?;
    run_stage(cfg, "attack-table", || attack_table_cmd(cfg))?;
    run_stage(cfg, "convert", || {
        convert_cmd(cfg, None, 0, Some("1"), None)
    })?;
    run_stage(cfg, "interpolate", || {
        interpolate_cmd(cfg, None, 0, Some("1"))
    })?;
    run_stage(cfg, "uncertainty", || {
        uncertainty_cmd(cfg, None, 0, Some("1"))
    })?;
    run_stage(cfg, "eval-matrix", || eval_matrix_cmd(cfg, None))?;
    run_stage(cfg, "distill-gain", || distill_gain_cmd(cfg))?;
    run_stage(cfg, "robustness", || robustness_cmd(cfg))?;
    run_stage(cfg, "mixed-eval", || mixed_eval_cmd(cfg, None))?;
    run_stage(cfg, "integrity", || integrity_cmd(cfg, None, Some("1")))?;

    println!("pipeline[toy]: all stages complete -> {}", cfg.out.display());
    Ok(())
}

fn run_stage(
    cfg: &RunConfig,
    name: &str,
    f: impl FnOnce() -> Result<(), CliError>,
) -> Result<(), CliError> {
    println!("==> {name}");
    let t = Instant::now();
    f()?;
    record_timing(&cfg.out, &format!("pipeline/{name}"), t.elapsed().as_secs_f64())
}
