use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::sync_channel;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{
    DatasetManifest, ManifestEntry, RunConfig, Split, StreamConfig, MANIFEST_FILE,
};
use super::render::{heat_map, HEAT_RANGES};
use crate::classifier::{
    build_training_set_from, read_bundle, train, write_bundle, ClusterClassifier, ModelBundle,
};
use crate::control::Controller;
use crate::error::{Error, Result};
use crate::eval::{benchmark, time_vs_k, EvalReport};
use crate::hsdata::{
    read_cube, read_cube_header, write_cube, BandGrid, LabeledCube, SpectralKind, SpectralLine,
};
use crate::ohslic::{ClusterBudget, OhslicStream};
use crate::synthgen::{generate_scene, render_fake_rgb, SceneConfig, GENERATOR_VERSION};

pub const MODEL_FILE: &str = "model.bin";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn cube_scene(cfg: &RunConfig, seed: u64) -> SceneConfig {
    SceneConfig {
        rng_seed: seed,
        ..cfg.scene.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GenSummary {
    pub written: usize,
    pub skipped: usize,
}

/// Checksum of an existing cube file if it was produced from `scene`.
fn reusable(path: &Path, scene: &SceneConfig) -> Option<u32> {
    let header = read_cube_header(path).ok()?;
    if header.scene.as_ref() != Some(scene)
        || header.generator.as_deref() != Some(GENERATOR_VERSION)
    {
        return None;
    }
    // full read verifies the CRC
    read_cube(path).ok()?;
    Some(header.checksum)
}

/// Generates the dataset into `out`, skipping cubes that already exist with
/// matching provenance. With `dry_run` only the manifest is written.
pub fn cmd_gen(cfg: &RunConfig, out: &Path, dry_run: bool) -> Result<GenSummary> {
    cfg.validate()?;
    create_dir(out)?;
    let n = cfg.dataset.count;
    let first_test = n - cfg.dataset.test_count;
    let mut entries: Vec<ManifestEntry> = (0..n)
        .map(|i| ManifestEntry {
            file: format!("cube_{i:04}.ohc"),
            seed: cfg.cube_seed(i),
            split: if i >= first_test {
                Split::Test
            } else {
                Split::Train
            },
            checksum: 0,
        })
        .collect();
    let mut summary = GenSummary::default();

    if !dry_run {
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<(usize, Result<(u32, bool)>)>> = Mutex::new(Vec::with_capacity(n));
        let workers = std::thread::available_parallelism()
            .map_or(1, |p| p.get())
            .min(n);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= n {
                        break;
                    }
                    let e = &entries[i];
                    let path = out.join(&e.file);
                    let scene = cube_scene(cfg, e.seed);
                    let r = match reusable(&path, &scene) {
                        Some(crc) => Ok((crc, true)),
                        None => generate_scene(&scene).and_then(|cube| {
                            write_cube(&cube, &path)?;
                            log::info!("wrote {}", path.display());
                            Ok((read_cube_header(&path)?.checksum, false))
                        }),
                    };
                    results.lock().expect("no poisoned workers").push((i, r));
                });
            }
        });
        for (i, r) in results.into_inner().expect("no poisoned workers") {
            let (crc, skipped) = r?;
            entries[i].checksum = crc;
            if skipped {
                summary.skipped += 1;
            } else {
                summary.written += 1;
            }
        }
    }

    let manifest = DatasetManifest {
        config_hash: cfg.hash(),
        generator: GENERATOR_VERSION.to_string(),
        scene: cfg.scene.clone(),
        width: cfg.scene.width,
        height: cfg.scene.height,
        bands: cfg.scene.grid.build()?.count(),
        entries,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(summary)
}

fn load_split(data: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<LabeledCube>> {
    let files = manifest.files(data, split);
    if files.is_empty() {
        return Err(Error::InsufficientData(format!(
            "dataset has no {split:?} cubes"
        )));
    }
    files.iter().map(read_cube).collect()
}

/// Trains on the training split of `data`; writes `model.bin` and
/// `train_log.csv` into `out`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<ModelBundle> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(data)?;
    let files = manifest.files(data, Split::Train);
    if files.is_empty() {
        return Err(Error::InsufficientData(
            "dataset has no training cubes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples = build_training_set_from(files.iter().map(read_cube), &cfg.groups, &mut rng)?;
    log::info!("{} training samples", samples.len());
    let outcome = train(&samples, &cfg.train)?;
    let mut bundle = outcome.bundle;
    bundle.manifest.dataset_hash = manifest.dataset_hash();
    bundle.manifest.config_hash = cfg.hash();

    create_dir(out)?;
    write_bundle(&bundle, out.join(MODEL_FILE))?;
    let mut csv = format!(
        "# config {}\nepoch,seg,reg,total,holdout_total\n",
        bundle.manifest.config_hash
    );
    for e in &outcome.log {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.seg, e.reg, e.total, e.holdout_total
        ));
    }
    fs::write(out.join("train_log.csv"), csv)?;
    Ok(bundle)
}

fn budget_for(stream: &StreamConfig, cfg: &RunConfig, width: usize) -> Result<ClusterBudget> {
    use super::config::BudgetKind;
    let k = stream.clusters.min(width);
    Ok(match stream.budget {
        BudgetKind::Free => ClusterBudget::Free,
        BudgetKind::Fixed => ClusterBudget::Fixed(k),
        BudgetKind::Adaptive => {
            let mut c = cfg.controller.clone();
            c.k_max = c.k_max.min(width);
            c.k_min = c.k_min.min(c.k_max);
            ClusterBudget::Adaptive(Controller::new(c, k)?)
        }
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub model_config_hash: String,
    pub input: String,
    pub width: usize,
    pub height: usize,
    pub tree_pixels: usize,
    pub mean_line_ms: f64,
    pub splits: u64,
}

/// Streams `input` line by line through OHSLIC-C-C. The reader runs on its
/// own thread and blocks once `stream.queue_depth` lines are waiting.
pub fn cmd_run(cfg: &RunConfig, model: &Path, input: &Path, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let bundle = read_bundle(model)?;
    let header = read_cube_header(input)?;
    if header.bands != bundle.bands() {
        return Err(Error::Dimension(format!(
            "model expects {} bands, {} has {}",
            bundle.bands(),
            input.display(),
            header.bands
        )));
    }
    let cube = read_cube(input)?;
    let (width, height) = (cube.width, cube.height);
    let ohslic_cfg = crate::ohslic::OhslicConfig {
        k_init: cfg.stream.clusters.min(width),
        ..cfg.ohslic.clone()
    };
    let mut stream = OhslicStream::new(ohslic_cfg, budget_for(&cfg.stream, cfg, width)?)?;
    create_dir(out)?;
    let mut snapshots = if cfg.stream.snapshots {
        Some(BufWriter::new(fs::File::create(
            out.join("clusters.jsonl"),
        )?))
    } else {
        None
    };

    let mut features = Vec::with_capacity(width * height);
    let mut is_tree = Vec::with_capacity(width * height);
    let mut lines_csv = String::from("line,ms,k\n");
    let mut total_ms = 0.0;
    let (tx, rx) = sync_channel::<Result<SpectralLine>>(cfg.stream.queue_depth);
    std::thread::scope(|s| -> Result<()> {
        let cube = &cube;
        s.spawn(move || {
            for row in 0..cube.height {
                if tx.send(cube.line(row)).is_err() {
                    break;
                }
            }
        });
        for line in rx {
            let line = line?;
            let r = stream.push(&line, &bundle)?;
            lines_csv.push_str(&format!(
                "{},{},{}\n",
                line.row_index(),
                r.elapsed_ms,
                r.clusters
            ));
            total_ms += r.elapsed_ms;
            features.extend(r.features);
            is_tree.extend(r.is_tree);
            if let (Some(w), Some(state)) = (snapshots.as_mut(), stream.state()) {
                for snap in state.snapshot() {
                    serde_json::to_writer(&mut *w, &snap)?;
                    w.write_all(b"\n")?;
                }
            }
        }
        Ok(())
    })?;
    if let Some(mut w) = snapshots {
        w.flush()?;
    }

    let config_hash = cfg.hash();
    let data: Vec<f32> = features
        .iter()
        .flat_map(|f| f.iter().map(|&v| v as f32))
        .collect();
    let mut result = LabeledCube::new(
        width,
        height,
        BandGrid::new(vec![1.0, 2.0, 3.0])?,
        SpectralKind::Features,
        data,
    )?;
    result.meta.generator = Some(format!("ohslic-run config={config_hash}"));
    write_cube(&result, out.join("features.ohc"))?;

    match render_fake_rgb(&cube) {
        Ok(img) => save_png(&img, &out.join("fake_rgb.png"))?,
        Err(e) => log::warn!("no fake RGB for this cube: {e}"),
    }
    for (i, name) in ["ab", "ar", "ant"].iter().enumerate() {
        let values: Vec<f64> = features.iter().map(|f| f[i]).collect();
        let img = heat_map(width, height, &values, &is_tree, HEAT_RANGES[i])?;
        save_png(&img, &out.join(format!("heat_{name}.png")))?;
    }
    match stream.budget {
        ClusterBudget::Adaptive(ref ctrl) => {
            let mut w = BufWriter::new(fs::File::create(out.join("controller.csv"))?);
            ctrl.write_history_csv(&mut w)?;
            w.flush()?;
        }
        _ => fs::write(out.join("controller.csv"), &lines_csv)?,
    }
    fs::write(out.join("lines.csv"), lines_csv)?;

    let summary = RunSummary {
        config_hash,
        model_config_hash: bundle.manifest.config_hash.clone(),
        input: input.display().to_string(),
        width,
        height,
        tree_pixels: is_tree.iter().filter(|&&t| t).count(),
        mean_line_ms: if height > 0 {
            total_ms / height as f64
        } else {
            0.0
        },
        splits: stream.state().map_or(0, |s| s.stats.splits),
    };
    write_json(&out.join("run.json"), &summary)?;
    Ok(summary)
}

fn save_png(img: &image::RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::Format(format!("cannot write {}: {e}", path.display())))
}

/// Benchmarks every method on the test split of `data`. Refuses a model
/// trained on another dataset unless `force` is set.
pub fn cmd_bench(
    cfg: &RunConfig,
    model: &Path,
    data: &Path,
    out: &Path,
    force: bool,
) -> Result<EvalReport> {
    cfg.validate()?;
    let bundle = read_bundle(model)?;
    let manifest = DatasetManifest::load(data)?;
    let dataset_hash = manifest.dataset_hash();
    if bundle.manifest.dataset_hash != dataset_hash {
        if !force {
            return Err(Error::HashMismatch {
                expected: bundle.manifest.dataset_hash.clone(),
                actual: dataset_hash,
            });
        }
        log::warn!(
            "model was trained on dataset {}, benchmarking {dataset_hash}",
            bundle.manifest.dataset_hash
        );
    }
    let cubes = load_split(data, &manifest, Split::Test)?;
    let mut report = benchmark(&cubes, &bundle, &cfg.bench)?;
    report.dataset_hash = dataset_hash;
    report.config_hash = cfg.hash();

    create_dir(out)?;
    write_json(&out.join("report.json"), &report)?;
    write_json(&out.join("metrics.json"), &report.metrics())?;
    fs::write(
        out.join("table.txt"),
        format!("# config {}\n{}", report.config_hash, report.to_table()),
    )?;
    fs::write(
        out.join("sweep.csv"),
        format!("# config {}\n{}", report.config_hash, report.sweep_csv()),
    )?;
    let ks = if cfg.bench.sweep.is_empty() {
        vec![cfg.bench.clusters]
    } else {
        cfg.bench.sweep.clone()
    };
    let mut csv = format!("# config {}\nk,mean_ms\n", report.config_hash);
    for (k, ms) in time_vs_k(&cubes[0], &bundle, &cfg.bench.ohslic, &ks)? {
        csv.push_str(&format!("{k},{ms}\n"));
    }
    fs::write(out.join("time_vs_k.csv"), csv)?;
    Ok(report)
}
