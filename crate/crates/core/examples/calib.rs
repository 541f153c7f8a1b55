//! Scratch calibration runner for acceptance-test constants. Not shipped.

use std::time::Instant;

use styleconv::attack::{convert, pgd_attack, AttackConfig};
use styleconv::corpus::{generate_corpus, Corpus, CorpusSpec, Sample, StyleSpec};
use styleconv::harness::{
    attack_success_table, conversion_gain, cross_matrix, distillation_experiment,
    integrity_check, mixed_lesion_eval, robustness_perturb, select_targets,
    style_adoption_check, train_grader, AttackSetting, DistillConfig, GraderConfig,
    MatrixEntry, PerturbKind,
};
use styleconv::probe::{placement_sweep, train_probe, ProbeConfig, SweepConfig};
use styleconv::rng::stream;
use styleconv::segcore::{train, ArchConfig, TapPoint, TrainConfig, TrainedModel};
use styleconv::styleops::{band_sigma_stats, interpolation_sweep, uncertainty_map};

use rand::Rng;

fn arch(seed: u64) -> ArchConfig {
    ArchConfig { in_channels: 3, n_classes: 5, stages: 2, width: 8, seed }
}

fn spec_two_style(n: usize, size: usize, seed: u64, tf: f64, vf: f64) -> CorpusSpec {
    CorpusSpec {
        n_images: n,
        image_size: size,
        styles: vec![
            StyleSpec::fine("fine").with_marker(0.01, 0.0),
            StyleSpec::coarse("coarse", 2, 6.0).with_marker(0.01, 90.0),
        ],
        seed,
        train_frac: tf,
        val_frac: vf,
    }
}

fn tcfg(steps: usize, seed: u64, crop: Option<usize>) -> TrainConfig {
    TrainConfig { steps, crop, seed, ..TrainConfig::default() }
}

fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for i in 0..xs.len() {
        num += (rx[i] - mx) * (ry[i] - my);
        dx += (rx[i] - mx).powi(2);
        dy += (ry[i] - my).powi(2);
    }
    num / (dx.sqrt() * dy.sqrt())
}

// criterion 4 scale: three models on a >=200 scene 128^2 corpus
fn adopt(seed: u64, n: usize, size: usize, steps: usize, crop: usize) {
    let t0 = Instant::now();
    let spec = spec_two_style(n, size, seed, 0.7, 0.15);
    let corpora = generate_corpus(&spec).unwrap();
    println!(
        "[{}s] corpus ready: {} scenes {}^2, train/val/test = {}/{}/{}",
        t0.elapsed().as_secs(),
        n,
        size,
        corpora[0].train.len(),
        corpora[0].val.len(),
        corpora[0].test.len()
    );
    let crop = if crop == 0 { None } else { Some(crop) };
    let mut models: Vec<(String, TrainedModel)> = Vec::new();
    let a = arch(stream(seed, "arch").gen());
    let tc = tcfg(steps, stream(seed, "train").gen(), crop);
    for (name, pools) in [
        ("fine", vec![0usize]),
        ("coarse", vec![1usize]),
        ("gen", vec![0usize, 1usize]),
    ] {
        let tp: Vec<&[Sample]> = pools.iter().map(|&i| corpora[i].train.as_slice()).collect();
        let vp: Vec<&[Sample]> = pools.iter().map(|&i| corpora[i].val.as_slice()).collect();
        let t = Instant::now();
        let tm = train(&a, &tp, &vp, &tc).unwrap();
        println!(
            "[{}s] trained {name}: best_val_loss={:.4} best_step={} ({:.1}s)",
            t0.elapsed().as_secs(),
            tm.best_val_loss,
            tm.best_step,
            t.elapsed().as_secs_f64()
        );
        models.push((name.to_string(), tm));
    }
    let entries: Vec<MatrixEntry> = models
        .iter()
        .map(|(name, tm)| MatrixEntry {
            name: name.clone(),
            model: &tm.model,
            specialist: name != "gen",
        })
        .collect();
    let cols: Vec<(String, Vec<&Sample>)> = corpora
        .iter()
        .map(|c| (c.spec.name.clone(), c.test.iter().collect()))
        .collect();
    let m = cross_matrix(&entries, &cols).unwrap();
    for (i, row) in m.cells.iter().enumerate() {
        println!(
            "  {:>8}: {:?}",
            m.row_labels[i],
            row.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
        );
    }
    // diagonal dominance: each specialist's best column is its own style
    let diag_ok = (0..2).all(|r| {
        let row = &m.cells[r];
        (0..row.len()).all(|c| c == r || row[r] > row[c])
    });
    let rep = style_adoption_check(
        &models[2].1.model,
        &[
            ("fine".to_string(), &models[0].1.model),
            ("coarse".to_string(), &models[1].1.model),
        ],
        &cols.iter().map(|(_, v)| v.clone()).collect::<Vec<_>>(),
        0.03,
    )
    .unwrap();
    for r in &rep.rows {
        println!(
            "  style {}: spec={:.4} gen={:.4} diff={:+.4} adopted={}",
            r.style,
            r.specialist_miou,
            r.generalist_miou,
            r.generalist_miou - r.specialist_miou,
            r.adopted
        );
    }
    println!(
        "seed {seed}: adoption_ok={} diag_ok={} total {:.1}s",
        rep.all_adopted,
        diag_ok,
        t0.elapsed().as_secs_f64()
    );
}

// fixture for criteria 5/7/8/9: two-style corpus with a big test split
fn fixture(seed: u64, n: usize, size: usize, steps: usize) -> (Vec<Corpus>, TrainedModel) {
    let spec = spec_two_style(n, size, seed, 0.25, 0.15);
    let corpora = generate_corpus(&spec).unwrap();
    let a = arch(stream(seed, "arch").gen());
    let tc = tcfg(steps, stream(seed, "train").gen(), None);
    let tp: Vec<&[Sample]> = corpora.iter().map(|c| c.train.as_slice()).collect();
    let vp: Vec<&[Sample]> = corpora.iter().map(|c| c.val.as_slice()).collect();
    let tm = train(&a, &tp, &vp, &tc).unwrap();
    (corpora, tm)
}

fn probe5(seed: u64, n: usize, size: usize, steps: usize) {
    let t0 = Instant::now();
    let (corpora, tm) = fixture(seed, n, size, steps);
    println!(
        "[{}s] fixture: best_val_loss={:.4}; train/val/test per style = {}/{}/{}",
        t0.elapsed().as_secs(),
        tm.best_val_loss,
        corpora[0].train.len(),
        corpora[0].val.len(),
        corpora[0].test.len()
    );
    let train_refs: Vec<&Sample> = corpora.iter().flat_map(|c| c.train.iter()).collect();
    let val_refs: Vec<&Sample> = corpora.iter().flat_map(|c| c.val.iter()).collect();
    let test_refs: Vec<&Sample> = corpora.iter().flat_map(|c| c.test.iter()).collect();

    let fit = train_probe(&tm.model, TapPoint::Bottleneck, &train_refs, &ProbeConfig::default()).unwrap();
    let vacc = fit.probe.accuracy(&tm.model, &val_refs).unwrap();
    let tacc = fit.probe.accuracy(&tm.model, &test_refs).unwrap();
    println!(
        "[{}s] bottleneck probe: train_acc={:.4} val_acc={:.4} test_acc={:.4} iters={} conv={}",
        t0.elapsed().as_secs(),
        fit.train_accuracy,
        vacc,
        tacc,
        fit.iters,
        fit.converged
    );

    let sc = SweepConfig { probe: ProbeConfig::default() };
    let (rows, _probes) = placement_sweep(&tm.model, &train_refs, &val_refs, &sc).unwrap();
    for r in &rows {
        println!(
            "  tap {:>12} depth {} ch {:>3}: train={:.4} val={:.4}",
            r.tap, r.depth, r.channels, r.train_accuracy, r.val_accuracy
        );
    }
    let enc: Vec<f64> = rows
        .iter()
        .filter(|r| r.tap.starts_with("enc") || r.tap == "bottleneck")
        .map(|r| r.val_accuracy)
        .collect();
    let mono = enc.windows(2).all(|w| w[1] >= w[0] - 1e-12);
    println!("  encoder-chain val accs {:?} monotone={}", enc, mono);

    let t = Instant::now();
    let cfg = AttackConfig::default();
    for target in 0..2usize {
        let mut ok = 0usize;
        for s in &test_refs {
            let r = pgd_attack(&tm.model, &fit.probe, &s.image, target, &cfg).unwrap();
            if r.success {
                ok += 1;
            }
        }
        println!(
            "  PGD target {target}: {}/{} = {:.4}",
            ok,
            test_refs.len(),
            ok as f64 / test_refs.len() as f64
        );
    }
    println!(
        "seed {seed}: attack pass {:.1}s; total {:.1}s",
        t.elapsed().as_secs_f64(),
        t0.elapsed().as_secs_f64()
    );
}

fn interp(seed: u64, n: usize, size: usize, steps: usize) {
    let t0 = Instant::now();
    let (corpora, tm) = fixture(seed, n, size, steps);
    let train_refs: Vec<&Sample> = corpora.iter().flat_map(|c| c.train.iter()).collect();
    let fit = train_probe(&tm.model, TapPoint::Bottleneck, &train_refs, &ProbeConfig::default()).unwrap();
    let alphas: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let cfg = AttackConfig::default();
    let imgs: Vec<&Sample> = corpora[0].test.iter().take(20).collect();
    let mut mean_areas = vec![0.0f64; alphas.len()];
    let mut per_image_rho = Vec::new();
    for s in &imgs {
        let sw = interpolation_sweep(&tm.model, &fit.probe, &s.image, 1, &alphas, &cfg).unwrap();
        let areas: Vec<f64> = sw
            .points
            .iter()
            .map(|p| p.class_areas.iter().skip(1).sum::<usize>() as f64)
            .collect();
        for (i, a) in areas.iter().enumerate() {
            mean_areas[i] += a / imgs.len() as f64;
        }
        per_image_rho.push(spearman(&alphas, &areas));
    }
    let rho_mean_curve = spearman(&alphas, &mean_areas);
    let rho_avg = per_image_rho.iter().sum::<f64>() / per_image_rho.len() as f64;
    println!(
        "mean areas per alpha: {:?}",
        mean_areas.iter().map(|v| v.round()).collect::<Vec<_>>()
    );
    println!(
        "seed {seed}: spearman(mean curve)={:.4} mean(per-image)={:.4} min(per-image)={:.4} ({:.1}s)",
        rho_mean_curve,
        rho_avg,
        per_image_rho.iter().cloned().fold(f64::INFINITY, f64::min),
        t0.elapsed().as_secs_f64()
    );
}

fn uncert(seed: u64, n: usize, size: usize, steps: usize) {
    let t0 = Instant::now();
    let (corpora, tm) = fixture(seed, n, size, steps);
    let train_refs: Vec<&Sample> = corpora.iter().flat_map(|c| c.train.iter()).collect();
    let fit = train_probe(&tm.model, TapPoint::Bottleneck, &train_refs, &ProbeConfig::default()).unwrap();
    let cfg = AttackConfig::default();
    for (k, s) in corpora[0].test.iter().take(6).enumerate() {
        let um = uncertainty_map(&tm.model, &fit.probe, &s.image, 1, 64, seed + k as u64, &cfg).unwrap();
        let mask = tm.model.predict_mask(&s.image).unwrap();
        for radius in [1u32, 2, 3] {
            if let Some((band, bg)) = band_sigma_stats(&um.sigma, &mask, radius) {
                println!(
                    "  img {k} r={radius}: band={:.5} bg={:.5} ratio={:.2}",
                    band,
                    bg,
                    band / bg
                );
            } else {
                println!("  img {k} r={radius}: empty band or bg");
            }
        }
    }
    println!("seed {seed}: uncert total {:.1}s", t0.elapsed().as_secs_f64());
}

fn integ(seed: u64, n: usize, size: usize, steps: usize, limit: usize) {
    let t0 = Instant::now();
    let (corpora, tm) = fixture(seed, n, size, steps);
    let train_refs: Vec<&Sample> = corpora.iter().flat_map(|c| c.train.iter()).collect();
    let fit = train_probe(&tm.model, TapPoint::Bottleneck, &train_refs, &ProbeConfig::default()).unwrap();
    let cfg = AttackConfig::default();

    let gc = GraderConfig { seed: stream(seed, "grader").gen(), ..GraderConfig::default() };
    let (grader, train_mse) = train_grader(&train_refs, &gc).unwrap();
    println!("[{}s] grader train mse={:.4}", t0.elapsed().as_secs(), train_mse);

    let test: Vec<&Sample> = corpora[0].test.iter().take(limit).collect();
    let mut convs = Vec::new();
    for s in &test {
        let o = convert(&tm.model, &fit.probe, s, 1, &cfg).unwrap();
        convs.push(o.x_adv);
    }
    let rep = integrity_check(&grader, &test, &convs).unwrap();
    let max_bd = rep.flips.iter().map(|f| f.boundary_dist as f64).fold(0.0, f64::max);
    println!(
        "  integrity: mse={:.4} n_flips={} max_boundary_dist={:.4} mean_abs_residual_db={:.3} masked={:.4}",
        rep.mse,
        rep.flips.len(),
        max_bd,
        rep.mean_abs_residual_db,
        rep.masked_frac
    );

    let both: Vec<&Sample> = corpora.iter().flat_map(|c| c.test.iter().take(limit)).collect();
    let st = [AttackSetting { eps: cfg.eps, steps: cfg.steps }];
    let (tbl, _) = attack_success_table(&tm.model, &fit.probe, &both, &st, &[0, 1], cfg.radius).unwrap();
    let asr = tbl.cells.iter().map(|c| c.success_rate).sum::<f64>() / tbl.cells.len() as f64;
    println!("  attack success rate (mean over targets) = {:.4}", asr);
    for kind in [PerturbKind::Identity, PerturbKind::Resample, PerturbKind::ColorJitter, PerturbKind::Jpeg] {
        let d = robustness_perturb(&tm.model, &fit.probe, &both, kind, stream(seed, "rob").gen()).unwrap();
        println!(
            "  benign {:>12}: flip={:.4} mask_change={:.4} ratio_ok(flip*5<=asr)={}",
            d.kind.name(),
            d.probe_flip_rate,
            d.mask_change_rate,
            d.probe_flip_rate * 5.0 <= asr
        );
    }
    println!("seed {seed}: integ total {:.1}s", t0.elapsed().as_secs_f64());
}

fn distill(seed: u64, n: usize, size: usize, steps: usize, amp: f32, rad255: f32) {
    let t0 = Instant::now();
    let mut dc = DistillConfig::toy(seed);
    dc.n_images = n;
    dc.image_size = size;
    dc.marker_amplitude = amp;
    dc.train = tcfg(steps, dc.train.seed, None);
    dc.attack.radius = rad255 / 255.0;
    let (rep, tm, probe) = distillation_experiment(&dc).unwrap();
    println!(
        "distill seed={seed} n={n} size={size} steps={steps} amp={amp} rad={rad255}/255: gain={:+.4} before={:.4} after={:.4} conv_rate={:.3} probe_train_acc={:.3} n_fine_train={}/{} ({:.1}s)",
        rep.gain.gain,
        rep.gain.miou_before,
        rep.gain.miou_after,
        rep.gain.conversion_success_rate,
        rep.probe_train_accuracy,
        rep.n_fine_train,
        rep.n_train,
        t0.elapsed().as_secs_f64()
    );
    // no-op sanity: coarse test toward coarse on the same model must move ~nothing
    let spec = CorpusSpec {
        n_images: n,
        image_size: size,
        styles: vec![
            StyleSpec::fine("fine").with_marker(amp, 0.0),
            StyleSpec::coarse("coarse", 2, 6.0).with_marker(amp, 90.0),
        ],
        seed,
        train_frac: 0.7,
        val_frac: 0.15,
    };
    let corpora = generate_corpus(&spec).unwrap();
    let coarse_test: Vec<&Sample> = corpora[1].test.iter().collect();
    let noop = conversion_gain(&tm.model, &probe, &coarse_test, 1, &dc.attack).unwrap();
    println!(
        "  no-op coarse->coarse: gain={:+.4} (|gain|<=0.02: {})",
        noop.gain,
        noop.gain.abs() <= 0.02
    );
}

fn mixed(seed: u64, n: usize, size: usize, steps: usize, limit: usize) {
    let t0 = Instant::now();
    let (corpora, tm) = fixture(seed, n, size, steps);
    let train_refs: Vec<&Sample> = corpora.iter().flat_map(|c| c.train.iter()).collect();
    let fit = train_probe(&tm.model, TapPoint::Bottleneck, &train_refs, &ProbeConfig::default()).unwrap();
    let cfg = AttackConfig::default();
    let val: Vec<&Sample> = corpora[0].val.iter().collect();
    let test: Vec<&Sample> = corpora[0].test.iter().take(limit).collect();
    let targets = select_targets(&tm.model, &fit.probe, &val, &cfg).unwrap();
    println!("  targets per class: {:?}", targets);
    let rep = mixed_lesion_eval(&tm.model, &fit.probe, &test, &targets, &cfg).unwrap();
    for r in &rep.rows {
        println!(
            "  class {} ({}): routed={:?} clean={:?} target={:?}",
            r.class_id, r.class_name, r.auc_pr, r.auc_pr_unconverted, r.target
        );
    }
    println!(
        "seed {seed}: mean routed={:.4} clean={:.4} ({:.1}s)",
        rep.mean_auc,
        rep.mean_auc_unconverted,
        t0.elapsed().as_secs_f64()
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let g = |i: usize, d: u64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let gf = |i: usize, d: f32| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    match args.get(1).map(|s| s.as_str()) {
        Some("adopt") => adopt(g(2, 0), g(3, 200) as usize, g(4, 128) as usize, g(5, 300) as usize, g(6, 64) as usize),
        Some("probe5") => probe5(g(2, 0), g(3, 170) as usize, g(4, 48) as usize, g(5, 300) as usize),
        Some("interp") => interp(g(2, 0), g(3, 170) as usize, g(4, 48) as usize, g(5, 300) as usize),
        Some("uncert") => uncert(g(2, 0), g(3, 170) as usize, g(4, 48) as usize, g(5, 300) as usize),
        Some("integ") => integ(g(2, 0), g(3, 170) as usize, g(4, 48) as usize, g(5, 300) as usize, g(6, 40) as usize),
        Some("distill") => distill(g(2, 0), g(3, 48) as usize, g(4, 48) as usize, g(5, 300) as usize, gf(6, 0.01), gf(7, 5.0)),
        Some("mixed") => mixed(g(2, 0), g(3, 170) as usize, g(4, 48) as usize, g(5, 300) as usize, g(6, 40) as usize),
        other => eprintln!("unknown subcommand {:?}", other),
    }
}
