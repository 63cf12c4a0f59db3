use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tomo_denoise::experiment::{
    evaluation_csv, run_cross_geometry, run_sweep, simulate_image, sweep_csv, sweep_means, ExperimentConfig, ImageScore,
    SimulationConfig,
};
use tomo_denoise::fbp::{fbp_reconstruct, fbp_subset};
use tomo_denoise::io::{export_png, read_image_raw_with_pixel_size, read_sinogram_raw, write_image_raw, write_sinogram_raw};
use tomo_denoise::net::DenoiserModel;
use tomo_denoise::oracle::{
    adjoint_and_gradient_suite, measure_image_noise_correlation, verify_prop1, CorrelationConfig, MeasurementNoise,
    Prop1Config,
};
use tomo_denoise::split::AngularPartition;
use tomo_denoise::train::{infer_average, section_inputs, train as train_model, LossKind, TrainingSample};
use tomo_denoise::{ImageGrid, Precision, Real, ScanGeometry};

use crate::config::{RunConfig, SimulationSection, SweepKind};
use crate::manifest::Manifest;
use crate::{CliError, GlobalArgs};

pub fn image_name(i: usize) -> String {
    format!("image_{i:04}")
}

fn out_dir(g: &GlobalArgs) -> Result<PathBuf, CliError> {
    let dir = g.out.clone().ok_or_else(|| CliError::Usage("--out is required".into()))?;
    fs::create_dir_all(&dir).map_err(CliError::io)?;
    Ok(dir)
}

fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    }
}

fn to_json<V: Serialize>(v: &V) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

const DATASET_DIRS: [&str; 7] = [
    "clean",
    "sinogram_clean",
    "counts",
    "sinogram",
    "sub_sinogram",
    "sub_recon",
    "fbp",
];

pub fn simulate(g: &GlobalArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(g.config.as_deref())?.simulation;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    let sim = cfg.to_core()?;
    let dir = out_dir(g)?;
    let outputs = match g.precision {
        Precision::F32 => write_dataset::<f32>(&sim, &dir)?,
        Precision::F64 => write_dataset::<f64>(&sim, &dir)?,
    };
    let mut manifest = Manifest::new("simulate", precision_name(g.precision), sim.seed, to_json(&cfg));
    manifest.inputs = serde_json::json!({ "partition": to_json(&sim.partition()?) });
    manifest.outputs = outputs;
    manifest.write(&dir)?;
    println!("simulated {} images into {}", sim.count, dir.display());
    Ok(())
}

fn write_dataset<T: Real>(sim: &SimulationConfig, dir: &Path) -> Result<Vec<String>, CliError> {
    for sub in DATASET_DIRS {
        fs::create_dir_all(dir.join(sub)).map_err(CliError::io)?;
    }
    let mut outputs = Vec::new();
    for i in 0..sim.count {
        let im = simulate_image::<T>(sim, i)?;
        let name = image_name(i);
        let mut put = |rel: String| -> PathBuf {
            let p = dir.join(&rel);
            outputs.push(rel);
            p
        };
        write_image_raw(&im.clean, put(format!("clean/{name}.tlim")))?;
        write_sinogram_raw(&im.clean_sinogram, put(format!("sinogram_clean/{name}.tlsn")))?;
        if let Some(counts) = &im.counts {
            counts.write(put(format!("counts/{name}.tlct")))?;
        }
        write_sinogram_raw(&im.noisy_sinogram, put(format!("sinogram/{name}.tlsn")))?;
        for (j, s) in im.sub_sinograms.iter().enumerate() {
            write_sinogram_raw(s, put(format!("sub_sinogram/{name}_s{j}.tlsn")))?;
        }
        for (j, r) in im.sub_recons.iter().enumerate() {
            write_image_raw(r, put(format!("sub_recon/{name}_s{j}.tlim")))?;
        }
        write_image_raw(&im.full_recon, put(format!("fbp/{name}.tlim")))?;
    }
    Ok(outputs)
}

/// Simulation parameters recorded in a dataset manifest.
fn dataset_config(data: &Path) -> Result<SimulationConfig, CliError> {
    let manifest = Manifest::read(data)?;
    if manifest.command != "simulate" {
        return Err(CliError::Usage(format!("{} is not a simulated dataset", data.display())));
    }
    let section: SimulationSection = serde_json::from_value(manifest.config)
        .map_err(|e| CliError::Usage(format!("dataset manifest has an invalid config: {e}")))?;
    section.to_core()
}

fn load_image<T: Real>(path: &Path, pixel_size: f64) -> Result<ImageGrid<T>, CliError> {
    read_image_raw_with_pixel_size(path, pixel_size)
        .map_err(|e| CliError::Usage(format!("cannot load {}: {e}", path.display())))
}

fn load_sample<T: Real>(
    data: &Path,
    sim: &SimulationConfig,
    partition: &AngularPartition,
    loss: LossKind,
    i: usize,
) -> Result<TrainingSample<T>, CliError> {
    let name = image_name(i);
    let ps = sim.pixel_size;
    match loss {
        LossKind::N2i | LossKind::Ran2i => {
            let sub_recons = (0..partition.splits())
                .map(|j| load_image(&data.join(format!("sub_recon/{name}_s{j}.tlim")), ps))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(TrainingSample::Splits {
                sub_recons,
                partition: partition.clone(),
            })
        }
        LossKind::Supervised => Ok(TrainingSample::NoisyClean {
            noisy: load_image(&data.join(format!("fbp/{name}.tlim")), ps)?,
            clean: load_image(&data.join(format!("clean/{name}.tlim")), ps)?,
        }),
        LossKind::N2n => Err(CliError::Usage(
            "n2n training needs two independent acquisitions per image; simulated datasets hold one".into(),
        )),
    }
}

/// Metadata stored in checkpoints so inference can redo the split.
#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    loss: LossKind,
    geometry: ScanGeometry,
    partition: AngularPartition,
    n: usize,
    pixel_size: f64,
}

pub fn train(g: &GlobalArgs, data: &Path) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(g.config.as_deref())?.training;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    let tc = cfg.to_core(g.precision)?;
    let sim = dataset_config(data)?;
    let train_count = cfg.train_count.unwrap_or(sim.count);
    if train_count == 0 || train_count > sim.count {
        return Err(CliError::Usage(format!(
            "train_count must be in 1..={}, got {train_count}",
            sim.count
        )));
    }
    let dir = out_dir(g)?;
    let outputs = match g.precision {
        Precision::F32 => train_as::<f32>(&tc, data, &sim, train_count, &dir)?,
        Precision::F64 => train_as::<f64>(&tc, data, &sim, train_count, &dir)?,
    };
    let mut manifest = Manifest::new("train", precision_name(g.precision), tc.seed, to_json(&cfg));
    manifest.inputs = serde_json::json!({ "data": data.display().to_string(), "train_count": train_count });
    manifest.method = Some(tc.loss_kind.to_string());
    manifest.outputs = outputs;
    manifest.write(&dir)?;
    Ok(())
}

fn train_as<T: Real>(
    tc: &tomo_denoise::train::TrainConfig,
    data: &Path,
    sim: &SimulationConfig,
    train_count: usize,
    dir: &Path,
) -> Result<Vec<String>, CliError> {
    let partition = sim.partition()?;
    let samples = (0..train_count)
        .map(|i| load_sample::<T>(data, sim, &partition, tc.loss_kind, i))
        .collect::<Result<Vec<_>, _>>()?;
    let (model, history) = train_model(tc, &samples)?;
    let meta = CheckpointMeta {
        loss: tc.loss_kind,
        geometry: sim.geometry()?,
        partition: partition.clone(),
        n: sim.n,
        pixel_size: sim.pixel_size,
    };
    model.save(dir.join("model.tlnn"), &to_json(&meta))?;
    history.write_csv(dir.join("history.csv"))?;
    let mut outputs = vec!["model.tlnn".to_string(), "history.csv".to_string()];
    if train_count < sim.count {
        fs::create_dir_all(dir.join("denoised")).map_err(CliError::io)?;
    }
    for i in train_count..sim.count {
        let sample = load_sample::<T>(data, sim, &partition, tc.loss_kind, i)?;
        let out = match &sample {
            TrainingSample::Splits { sub_recons, .. } => infer_average(&model, &section_inputs(sub_recons, &partition)?)?,
            TrainingSample::NoisyClean { noisy, .. } => model.forward(noisy),
            TrainingSample::NoisyNoisy { first, .. } => model.forward(first),
        };
        let rel = format!("denoised/{}.tlim", image_name(i));
        write_image_raw(&out, dir.join(&rel))?;
        outputs.push(rel);
    }
    let last = history.epochs().saturating_sub(1);
    println!(
        "trained {} for {} epochs: loss {:.6e} -> {:.6e}",
        tc.loss_kind,
        history.epochs(),
        history.total_loss.first().copied().unwrap_or(f64::NAN),
        history.total_loss.get(last).copied().unwrap_or(f64::NAN)
    );
    Ok(outputs)
}

pub fn reconstruct(g: &GlobalArgs, checkpoint: &Path, sinogram: &Path) -> Result<(), CliError> {
    let out = g.out.clone().ok_or_else(|| CliError::Usage("--out is required".into()))?;
    match g.precision {
        Precision::F32 => reconstruct_as::<f32>(checkpoint, sinogram, &out),
        Precision::F64 => reconstruct_as::<f64>(checkpoint, sinogram, &out),
    }
}

fn reconstruct_as<T: Real>(checkpoint: &Path, sinogram: &Path, out: &Path) -> Result<(), CliError> {
    let (model, meta) = DenoiserModel::<T>::load(checkpoint)
        .map_err(|e| CliError::Usage(format!("cannot load checkpoint {}: {e}", checkpoint.display())))?;
    let meta: CheckpointMeta = serde_json::from_value(meta)
        .map_err(|e| CliError::Usage(format!("checkpoint lacks acquisition metadata: {e}")))?;
    let sino = read_sinogram_raw::<T>(sinogram)
        .map_err(|e| CliError::Usage(format!("cannot load {}: {e}", sinogram.display())))?;
    if sino.geometry() != &meta.geometry {
        return Err(CliError::Usage(
            "sinogram geometry does not match the geometry recorded in the checkpoint".into(),
        ));
    }
    let image = match meta.loss {
        LossKind::N2i | LossKind::Ran2i => {
            let subs = meta
                .partition
                .subsets()
                .iter()
                .map(|s| fbp_subset(&sino, s, meta.n, meta.pixel_size))
                .collect::<Result<Vec<_>, _>>()?;
            infer_average(&model, &section_inputs(&subs, &meta.partition)?)?
        }
        LossKind::Supervised | LossKind::N2n => model.forward(&fbp_reconstruct(&sino, meta.n, meta.pixel_size)?),
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(CliError::io)?;
    }
    write_image_raw(&image, out)?;
    let (lo, hi) = (image.min_value().as_f64(), image.max_value().as_f64());
    let hi = if hi > lo { hi } else { lo + 1.0 };
    export_png(&image, out.with_extension("png"), lo, hi)?;
    println!("wrote {} and {}", out.display(), out.with_extension("png").display());
    Ok(())
}

/// Method label for a reconstruction directory: the `method` of the
/// manifest in the directory or its parent, else the directory name.
fn method_label(dir: &Path) -> String {
    [Some(dir), dir.parent()]
        .into_iter()
        .flatten()
        .find_map(|d| Manifest::read(d).ok().and_then(|m| m.method))
        .unwrap_or_else(|| {
            dir.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "recon".into())
        })
}

fn image_id(path: &Path) -> Option<usize> {
    path.file_stem()?.to_str()?.strip_prefix("image_")?.parse().ok()
}

pub fn evaluate(g: &GlobalArgs, recon_dirs: &[PathBuf], reference: &Path) -> Result<(), CliError> {
    let out = g.out.clone().ok_or_else(|| CliError::Usage("--out is required".into()))?;
    let mut rows: Vec<(String, Vec<ImageScore>)> = Vec::new();
    for dir in recon_dirs {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| CliError::Usage(format!("cannot list {}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "tlim"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(CliError::Usage(format!("no .tlim images in {}", dir.display())));
        }
        let mut scores = Vec::new();
        for f in &files {
            let id = image_id(f).ok_or_else(|| CliError::Usage(format!("unexpected file name {}", f.display())))?;
            let reference_path = reference.join(f.file_name().expect("file has a name"));
            let x = load_image::<f64>(f, 1.0)?;
            let r = load_image::<f64>(&reference_path, 1.0)?;
            scores.push(tomo_denoise::experiment::score(id, &x, &r)?);
        }
        rows.push((method_label(dir), scores));
    }
    let csv = evaluation_csv(&rows);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(CliError::io)?;
    }
    fs::write(&out, &csv).map_err(CliError::io)?;
    for (method, scores) in &rows {
        let s = tomo_denoise::experiment::summarize(scores);
        println!(
            "{method}: PSNR {:.2} ± {:.2} dB, SSIM {:.4} ± {:.4}",
            s.psnr_mean, s.psnr_std, s.ssim_mean, s.ssim_std
        );
    }
    Ok(())
}

pub fn sweep(g: &GlobalArgs) -> Result<(), CliError> {
    let run = RunConfig::load(g.config.as_deref())?;
    let mut training = run.training.clone();
    let mut seeds = run.sweep.seeds.clone();
    if let Some(seed) = g.seed {
        seeds = vec![seed];
        training.seed = seed;
    }
    let exp = ExperimentConfig {
        simulation: run.simulation.to_core()?,
        train_count: run.sweep.train_count,
        test_count: run.sweep.test_count,
        training: training.to_core(g.precision)?,
        seeds: seeds.clone(),
    };
    let dir = out_dir(g)?;
    let mut manifest = Manifest::new("sweep", precision_name(g.precision), seeds[0], to_json(&run));
    match run.sweep.kind {
        SweepKind::Rotation => {
            let rows = match g.precision {
                Precision::F32 => run_sweep::<f32>(&exp, &run.sweep.r, &run.sweep.modes)?,
                Precision::F64 => run_sweep::<f64>(&exp, &run.sweep.r, &run.sweep.modes)?,
            };
            fs::write(dir.join("sweep.csv"), sweep_csv(&rows)).map_err(CliError::io)?;
            for (r, mode, psnr) in sweep_means(&rows) {
                println!("r = {r:>2} {mode:?}: mean PSNR {psnr:.3} dB");
            }
            manifest.outputs = vec!["sweep.csv".into()];
        }
        SweepKind::CrossGeometry => {
            let test = run
                .test_simulation
                .as_ref()
                .ok_or_else(|| CliError::Usage("cross_geometry sweeps need a [test_simulation] section".into()))?
                .to_core()?;
            let report = match g.precision {
                Precision::F32 => run_cross_geometry::<f32>(&exp, &test)?,
                Precision::F64 => run_cross_geometry::<f64>(&exp, &test)?,
            };
            let table = report.to_table();
            fs::write(dir.join("cross_geometry.md"), &table).map_err(CliError::io)?;
            fs::write(
                dir.join("cross_geometry.json"),
                serde_json::to_string_pretty(&report).expect("report serializes"),
            )
            .map_err(CliError::io)?;
            print!("{table}");
            manifest.outputs = vec!["cross_geometry.md".into(), "cross_geometry.json".into()];
        }
    }
    manifest.write(&dir)?;
    Ok(())
}

pub fn verify(g: &GlobalArgs, trials: usize) -> Result<(), CliError> {
    let seed = g.seed.unwrap_or(7);
    let suite = adjoint_and_gradient_suite()?;
    let prop1 = verify_prop1(&Prop1Config::default_run(trials, seed))?;
    let mut poisson_cfg = Prop1Config::default_run(trials.min(2000), seed);
    poisson_cfg.noise = MeasurementNoise::Poisson { i0: 1e5 };
    let poisson = verify_prop1(&poisson_cfg)?;
    let correlation = measure_image_noise_correlation(&CorrelationConfig::default_run(Some(1e4), 1000, seed))?;
    let mut text = String::from("== adjoint and gradient suite ==\n");
    text.push_str(&suite.to_text());
    text.push_str("\n== decomposition, Gaussian measurement noise (gated) ==\n");
    text.push_str(&prop1.to_text());
    text.push_str("\n== decomposition, Poisson counts (reported only) ==\n");
    text.push_str(&poisson.to_text());
    text.push('\n');
    text.push_str(&correlation.to_text());
    print!("{text}");
    if let Some(dir) = &g.out {
        fs::create_dir_all(dir).map_err(CliError::io)?;
        fs::write(dir.join("verify.txt"), &text).map_err(CliError::io)?;
        let json = serde_json::json!({
            "suite": suite,
            "decomposition": prop1,
            "decomposition_poisson": poisson,
            "noise_correlation": correlation,
        });
        fs::write(dir.join("verify.json"), serde_json::to_string_pretty(&json).expect("report serializes"))
            .map_err(CliError::io)?;
        let mut manifest = Manifest::new("verify", "f64", seed, serde_json::json!({ "trials": trials }));
        manifest.outputs = vec!["verify.txt".into(), "verify.json".into()];
        manifest.write(dir)?;
    }
    let mut failed = Vec::new();
    if !suite.passed() {
        failed.push("adjoint/gradient suite");
    }
    if !prop1.passed {
        failed.push("decomposition");
    }
    if !correlation.passed {
        failed.push("noise correlation");
    }
    if failed.is_empty() {
        println!("all gates passed");
        Ok(())
    } else {
        Err(CliError::Gate(failed.join(", ")))
    }
}

