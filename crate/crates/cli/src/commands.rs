use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use structlight::checkpoint::{load_checkpoint, save_checkpoint};
use structlight::data::{build_dataset, load_all, pad_to_multiple, unpad, write_synthetic_sources};
use structlight::imaging::io::{read_edge_map, read_rgb, write_png};
use structlight::imaging::{edge_metrics, psnr, ssim, MetricEntry, MetricReport};
use structlight::training::{self, LossLog, TrainState};

use crate::config::{self, required, EnhanceRun, EvalRun, MakeDataRun, ModelSpec, SyntheticSources, TrainRun};
use crate::{plot, usage_err, CliError, CliResult, EnhanceArgs, EvalArgs, MakeDataArgs, TrainArgs};

fn pngs(dir: &Path) -> CliResult<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(usage_err(format!("{} is not a directory", dir.display())));
    }
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            out.insert(stem, p);
        }
    }
    Ok(out)
}

pub fn make_data(a: MakeDataArgs) -> CliResult<()> {
    let mut run: MakeDataRun = config::read(a.config.as_deref())?;
    if a.src.is_some() {
        run.src = a.src;
    }
    if a.out.is_some() {
        run.out = a.out;
    }
    if let Some(seed) = a.seed {
        run.degrade.seed = seed;
    }
    if let Some(count) = a.synthetic {
        run.synthetic = Some(SyntheticSources {
            count,
            height: a.size,
            width: a.size,
            seed: run.degrade.seed,
        });
    }
    let out = required(&run.out, "--out")?;
    let src = match run.synthetic {
        Some(s) => {
            if s.count == 0 {
                return Err(usage_err("--synthetic needs at least one image"));
            }
            let dir = out.join("source");
            write_synthetic_sources(&dir, s.count, s.height, s.width, s.seed)?;
            dir
        }
        None => required(&run.src, "--src")?,
    };
    if pngs(&src)?.is_empty() {
        return Err(usage_err(format!("no PNG images in {}", src.display())));
    }
    let manifest = build_dataset(&src, &out, &run.degrade, &run.canny)?;
    config::archive(&run, &out, "make-data.toml")?;
    if manifest.ids.is_empty() {
        return Err(anyhow::anyhow!("none of the images in {} could be read", src.display()).into());
    }
    println!(
        "manifest: {} images, {} skipped, config hash {}",
        manifest.counts.images, manifest.counts.skipped, manifest.config_hash
    );
    Ok(())
}

#[derive(Serialize)]
struct Diagnostic {
    step: u64,
    term: String,
    value: String,
    last_finite: Option<LossLog>,
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let mut run: TrainRun = config::read(a.config.as_deref())?;
    if a.data.is_some() {
        run.data = a.data;
    }
    if a.out.is_some() {
        run.out = a.out;
    }
    if a.resume.is_some() {
        run.resume = a.resume;
    }
    if let Some(m) = a.model {
        run.model = ModelSpec::Preset(m);
    }
    if let Some(s) = a.seed {
        run.train.seed = s;
    }
    if let Some(s) = a.steps {
        run.train.steps = s;
    }
    if let Some(b) = a.batch_size {
        run.train.batch_size = b;
    }
    if let Some(n) = a.checkpoint_every {
        run.train.checkpoint_every = n;
    }
    for name in &a.ablation {
        run.train.ablation.enable(name)?;
    }
    let data_dir = required(&run.data, "--data")?;
    let out = required(&run.out, "--out")?;
    let model_cfg = run.model.resolve()?;
    run.train.validate()?;

    let mut state = match &run.resume {
        Some(p) => {
            let ck = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            if ck.state.model.ablation != run.train.ablation {
                return Err(usage_err("the checkpoint was trained with different ablation flags"));
            }
            ck.state
        }
        None => TrainState::new(model_cfg, &run.train)?,
    };
    // the archived model is the one actually trained, also when resuming
    run.model = ModelSpec::Full(Box::new(state.model.config.clone()));
    config::archive(&run, &out, "config.toml")?;

    let data = load_all(&data_dir, state.model.required_multiple())?;
    log::info!("training on {} samples for {} steps", data.len(), run.train.steps);

    let csv_path = out.join("losses.csv");
    let appending = run.resume.is_some() && csv_path.exists();
    let mut csv = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .write(true)
            .append(appending)
            .truncate(!appending)
            .open(&csv_path)?,
    );
    if !appending {
        writeln!(csv, "{}", LossLog::CSV_HEADER)?;
    }
    let ckpt_dir = out.join("checkpoints");
    let mut last: Option<LossLog> = None;
    let cfg = run.train.clone();
    let res = training::train(&mut state, &data, &cfg, |log, st| {
        writeln!(csv, "{}", log.csv_row()).map_err(structlight::Error::Io)?;
        csv.flush().map_err(structlight::Error::Io)?;
        last = Some(*log);
        if cfg.checkpoint_every > 0 && log.step % cfg.checkpoint_every == 0 {
            save_checkpoint(st, &cfg, &ckpt_dir.join(format!("step_{:06}.ckpt", log.step)))?;
        }
        if log.step % 25 == 0 || log.step == cfg.steps {
            log::info!("step {} loss {:.5}", log.step, log.total);
        }
        Ok(())
    });
    drop(csv);
    match res {
        Ok(_) => {}
        Err(structlight::Error::Divergence { step, term, value }) => {
            let diag = Diagnostic {
                step,
                term: term.clone(),
                value: value.to_string(),
                last_finite: last,
            };
            let path = out.join("diagnostic.json");
            fs::write(&path, serde_json::to_string_pretty(&diag).context("diagnostic")? + "\n")?;
            return Err(CliError::Runtime(anyhow::anyhow!(
                "training diverged at step {step}: {term} = {value}; see {}",
                path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    }
    let final_path = out.join("final.ckpt");
    save_checkpoint(&state, &cfg, &final_path)?;
    plot::loss_curve(&csv_path, &out.join("loss_curve.png"))?;
    if let Some(l) = last {
        println!("step {} loss {} (final checkpoint {})", l.step, l.total, final_path.display());
    }
    Ok(())
}

fn expand_inputs(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            files.extend(pngs(p)?.into_values());
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(usage_err(format!("input {} does not exist", p.display())));
        }
    }
    if files.is_empty() {
        return Err(usage_err("no input images given"));
    }
    Ok(files)
}

pub fn enhance(a: EnhanceArgs) -> CliResult<()> {
    let mut run: EnhanceRun = config::read(a.config.as_deref())?;
    if a.checkpoint.is_some() {
        run.checkpoint = a.checkpoint;
    }
    if !a.inputs.is_empty() {
        run.inputs = a.inputs;
    }
    if a.out.is_some() {
        run.out = a.out;
    }
    run.dump_intermediates |= a.dump_intermediates;
    let ckpt = required(&run.checkpoint, "--checkpoint")?;
    let out = required(&run.out, "--out")?;
    let files = expand_inputs(&run.inputs)?;
    let model = load_checkpoint(&ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?
        .state
        .model;
    let mut seen = BTreeMap::new();
    for f in &files {
        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(prev) = seen.insert(stem.clone(), f.clone()) {
            return Err(usage_err(format!("{} and {} would write the same output", prev.display(), f.display())));
        }
    }
    fs::create_dir_all(&out)?;
    if run.dump_intermediates {
        fs::create_dir_all(out.join("appearance"))?;
        fs::create_dir_all(out.join("edges"))?;
    }
    let multiple = model.required_multiple();
    // One image at a time: each is padded on its own, so results never
    // depend on the other inputs.
    for (stem, f) in &seen {
        let img = read_rgb(f)?;
        let (x, pad) = pad_to_multiple(img.tensor(), multiple)?;
        let inf = model.infer(&x)?;
        write_png(&unpad(&inf.enhanced, pad)?, 0, &out.join(format!("{stem}.png")), false)?;
        if run.dump_intermediates {
            if let Some(ia) = &inf.appearance {
                write_png(&unpad(ia, pad)?, 0, &out.join("appearance").join(format!("{stem}.png")), false)?;
            }
            if let Some(es) = &inf.edges {
                write_png(&unpad(es, pad)?, 0, &out.join("edges").join(format!("{stem}.png")), false)?;
            }
        }
    }
    config::archive(&run, &out, "enhance.toml")?;
    println!("enhanced {} images into {}", seen.len(), out.display());
    Ok(())
}

fn id_mismatch(a: &BTreeMap<String, PathBuf>, b: &BTreeMap<String, PathBuf>, an: &str, bn: &str) -> Option<String> {
    let only_a: Vec<&str> = a.keys().filter(|k| !b.contains_key(*k)).map(String::as_str).collect();
    let only_b: Vec<&str> = b.keys().filter(|k| !a.contains_key(*k)).map(String::as_str).collect();
    if only_a.is_empty() && only_b.is_empty() {
        return None;
    }
    let mut msg = String::from("image ids differ:");
    if !only_b.is_empty() {
        msg += &format!(" missing from {an}: {}", only_b.join(", "));
    }
    if !only_a.is_empty() {
        msg += &format!("{}missing from {bn}: {}", if only_b.is_empty() { " " } else { "; " }, only_a.join(", "));
    }
    Some(msg)
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let mut run: EvalRun = config::read(a.config.as_deref())?;
    for (dst, src) in [
        (&mut run.pred, a.pred),
        (&mut run.gt, a.gt),
        (&mut run.pred_edges, a.pred_edges),
        (&mut run.gt_edges, a.gt_edges),
        (&mut run.out, a.out),
    ] {
        if src.is_some() {
            *dst = src;
        }
    }
    let pred_dir = required(&run.pred, "--pred")?;
    let gt_dir = required(&run.gt, "--gt")?;
    let out = run.out.clone().unwrap_or_else(|| pred_dir.clone());
    let pred = pngs(&pred_dir)?;
    let gt = pngs(&gt_dir)?;
    if let Some(m) = id_mismatch(&pred, &gt, "--pred", "--gt") {
        return Err(usage_err(m));
    }
    if pred.is_empty() {
        return Err(usage_err(format!("no PNG images in {}", pred_dir.display())));
    }
    let edges = match (&run.pred_edges, &run.gt_edges) {
        (Some(p), Some(g)) => {
            let (pe, ge) = (pngs(p)?, pngs(g)?);
            if let Some(m) = id_mismatch(&pred, &pe, "--pred", "--pred-edges").or_else(|| id_mismatch(&pred, &ge, "--pred", "--gt-edges")) {
                return Err(usage_err(m));
            }
            Some((pe, ge))
        }
        (None, None) => None,
        _ => return Err(usage_err("--pred-edges and --gt-edges go together")),
    };
    let mut entries = Vec::new();
    for (id, p) in &pred {
        let pi = read_rgb(p)?;
        let gi = read_rgb(&gt[id])?;
        let mut e = MetricEntry {
            id: id.clone(),
            psnr: psnr(&pi, &gi, 1.0)?,
            ssim: ssim(&pi, &gi)?,
            edge_ce: None,
            edge_l2: None,
        };
        if let Some((pe, ge)) = &edges {
            let s = edge_metrics(&read_edge_map(&pe[id])?, &read_edge_map(&ge[id])?)?;
            e.edge_ce = Some(s.ce);
            e.edge_l2 = Some(s.l2);
        }
        entries.push(e);
    }
    let report = MetricReport::from_entries(entries)?;
    fs::create_dir_all(&out)?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report).context("report")? + "\n")?;
    fs::write(out.join("report.csv"), report.to_csv())?;
    config::archive(&run, &out, "eval.toml")?;
    let m = &report.mean;
    print!("{} images: PSNR {:.4} dB, SSIM {:.4}", report.images.len(), m.psnr, m.ssim);
    if let (Some(ce), Some(l2)) = (m.edge_ce, m.edge_l2) {
        print!(", edge CE {ce:.4}, edge L2 {l2:.4}");
    }
    println!();
    Ok(())
}
