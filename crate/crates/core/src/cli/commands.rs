//! The batch commands behind each subcommand of the `cgmmsep` binary.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::Config;
use super::manifest::{csv_error, read_manifest, write_manifest, ManifestEntry};
use crate::em::{run_em, EmInit, MaskPosterior};
use crate::error::{Error, Result};
use crate::pipeline::{reconstruct, separate, separate_directional, templates_for, Separation};
use crate::signal::{
    apply_masks, istft, read_wav, stft, write_tensor, write_wav, SampleFormat, Tensor, Waveform,
};
use crate::sim::{
    match_azimuths, mix_planewave, mix_reverberant, permutation_align, random_scene, RoomSetup,
};
use crate::spatial::direction_vector;
use crate::train::{
    gradcheck, gradcheck_setup, load_checkpoint, predict_masks, save_checkpoint, Checkpoint,
    DirectionalSoftmax, EpochReport, GradcheckReport, LinearMaskNet, LocalizationMap, MaskNetwork,
    ReferenceMaskNet, TrainItem, Trainer, GRADCHECK_STEP,
};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MIXTURE_FILE: &str = "mix.wav";
pub const ELBO_FILE: &str = "elbo.csv";
pub const DOA_FILE: &str = "doa.csv";
pub const MASKS_FILE: &str = "masks.cgt";
pub const METRICS_FILE: &str = "metrics.csv";

pub fn source_file(k: usize) -> String {
    format!("source_{k}.wav")
}

pub fn reference_file(k: usize) -> String {
    format!("ref_{k}.wav")
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Runs `f` over `items` on up to `jobs` threads; results keep input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("result slot")
                .expect("every item processed")
        })
        .collect()
}

/// Writes `n_scenes` seeded scenes, their per-source references and a
/// manifest under `out_dir`. Scene `i` uses seed `simulate.seed + i`.
pub fn cmd_simulate(cfg: &Config, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    create_dir(out_dir)?;
    let opts = cfg.scene_options()?;
    let mut entries = Vec::with_capacity(cfg.simulate.n_scenes);
    for i in 0..cfg.simulate.n_scenes {
        let seed = cfg.simulate.seed.wrapping_add(i as u64);
        let mut scene = random_scene(&opts, seed);
        let (mix, truth) = match &cfg.simulate.room {
            Some(r) => {
                let source_positions = scene
                    .azimuths
                    .iter()
                    .map(|&az| {
                        let u = direction_vector(az);
                        [0, 1, 2].map(|a| r.array_center[a] + r.source_distance * u[a])
                    })
                    .collect();
                scene.room = Some(RoomSetup {
                    room: r.room(),
                    array_center: r.array_center,
                    source_positions,
                });
                mix_reverberant(&scene, &cfg.stft)?
            }
            None => mix_planewave(&scene, &cfg.stft)?,
        };
        let id = format!("scene_{i:04}");
        let dir = out_dir.join(&id);
        create_dir(&dir)?;
        write_wav(&dir.join(MIXTURE_FILE), &mix, SampleFormat::Float32)?;
        let mut references = Vec::with_capacity(truth.references.len());
        for (k, r) in truth.references.iter().enumerate() {
            let rel = Path::new(&id).join(reference_file(k));
            write_wav(
                &out_dir.join(&rel),
                &Waveform::mono(r.clone(), mix.sample_rate())?,
                SampleFormat::Float32,
            )?;
            references.push(rel);
        }
        log::info!("{id}: seed {seed}, azimuths {:?}", truth.azimuths);
        entries.push(ManifestEntry {
            scene_id: id.clone(),
            path: Path::new(&id).join(MIXTURE_FILE),
            doas_deg: truth.azimuths.clone(),
            references,
        });
    }
    write_manifest(&out_dir.join(MANIFEST_FILE), &entries)?;
    Ok(entries)
}

/// Initialization of multichannel separation.
#[derive(Debug, Clone, PartialEq)]
pub enum InitMode {
    /// Over-complete directional classes merged to the configured sources.
    Directional,
    /// Masks from a trained network checkpoint.
    Network(PathBuf),
}

fn load_network(path: &Path, n_freqs: usize) -> Result<ReferenceMaskNet> {
    let ck = load_checkpoint(path)?;
    if ck.net.n_freqs() != n_freqs {
        return Err(Error::Checkpoint(format!(
            "{}: network expects {} frequency bins, the STFT yields {n_freqs}",
            path.display(),
            ck.net.n_freqs()
        )));
    }
    Ok(ck.net)
}

/// Separates one multichannel recording and writes `source_k.wav`, the
/// masks, the EM objective trace and the DoA estimates to `out_dir`.
pub fn cmd_separate(cfg: &Config, input: &Path, out_dir: &Path, init: &InitMode) -> Result<Separation> {
    let sep_cfg = cfg.separator()?;
    let mix = read_wav(input)?;
    if mix.n_channels() != sep_cfg.geometry.n_mics() {
        return Err(Error::InvalidConfig(format!(
            "{} has {} channels but the array has {} microphones",
            input.display(),
            mix.n_channels(),
            sep_cfg.geometry.n_mics()
        )));
    }
    let sep = match init {
        InitMode::Directional => separate_directional(&mix, &sep_cfg, cfg.em.directional_classes)?,
        InitMode::Network(ck) => {
            let net = load_network(ck, sep_cfg.stft.n_freqs())?;
            if net.n_sources() != sep_cfg.em.n_sources {
                return Err(Error::Checkpoint(format!(
                    "{}: network has {} outputs, configured for {} sources",
                    ck.display(),
                    net.n_sources(),
                    sep_cfg.em.n_sources
                )));
            }
            let x = stft(&mix, &sep_cfg.stft)?;
            let masks = predict_masks(&net, &x, sep_cfg.reference_channel)?;
            let tpl = templates_for(&sep_cfg, mix.sample_rate())?;
            let em = run_em(&x, &tpl, &sep_cfg.em, EmInit::ExternalMasks(masks))?;
            let sources = reconstruct(&x, &em.ez, &sep_cfg)?;
            Separation {
                mixture: x,
                em,
                sources,
            }
        }
    };
    create_dir(out_dir)?;
    for (k, s) in sep.sources.iter().enumerate() {
        write_wav(&out_dir.join(source_file(k)), s, SampleFormat::Float32)?;
    }
    write_masks(&out_dir.join(MASKS_FILE), &sep.em.ez)?;
    let path = out_dir.join(ELBO_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    w.write_record(["iteration", "objective", "bound"])
        .map_err(|e| csv_error(&path, e))?;
    for (i, (o, b)) in sep.em.elbo_trace.iter().zip(&sep.em.bound_trace).enumerate() {
        w.write_record([(i + 1).to_string(), o.to_string(), b.to_string()])
            .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = out_dir.join(DOA_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    w.write_record(["source", "azimuth_deg", "probability"])
        .map_err(|e| csv_error(&path, e))?;
    let ew = sep.em.ew.values();
    for (k, d) in sep.em.ew.argmax().into_iter().enumerate() {
        w.write_record([
            k.to_string(),
            sep_cfg.grid.azimuth(d).to_string(),
            ew[[k, d]].to_string(),
        ])
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    if !sep.em.diagnostics.monotonicity_violations.is_empty() {
        log::warn!(
            "{}: objective dropped at iterations {:?}",
            input.display(),
            sep.em.diagnostics.monotonicity_violations
        );
    }
    Ok(sep)
}

fn write_masks(path: &Path, ez: &MaskPosterior) -> Result<()> {
    let (t, f, k) = ez.dims();
    write_tensor(
        path,
        &Tensor::new(vec![t, f, k], ez.values().iter().copied().collect())?,
    )
}

/// Per-scene outcome of a manifest-driven command.
#[derive(Debug)]
pub struct SceneOutcome {
    pub scene_id: String,
    pub result: Result<()>,
}

/// Applies a per-scene command to every manifest entry, writing scene `id`
/// to `out_dir/id`.
pub fn for_each_scene(
    manifest: &Path,
    out_dir: &Path,
    jobs: usize,
    f: impl Fn(&Path, &Path) -> Result<()> + Sync,
) -> Result<Vec<SceneOutcome>> {
    let entries = read_manifest(manifest)?;
    create_dir(out_dir)?;
    Ok(parallel_map(&entries, jobs, |e| {
        let result = f(&e.path, &out_dir.join(&e.scene_id));
        if let Err(err) = &result {
            log::error!("{}: {err}", e.scene_id);
        }
        SceneOutcome {
            scene_id: e.scene_id.clone(),
            result,
        }
    }))
}

/// Monaural separation: network masks on the first microphone, no EM.
pub fn cmd_infer_mono(
    cfg: &Config,
    checkpoint: &Path,
    input: &Path,
    out_dir: &Path,
) -> Result<Vec<Waveform>> {
    let net = load_network(checkpoint, cfg.stft.n_freqs())?;
    let mono = read_wav(input)?.select_channels(&[0])?;
    let x = stft(&mono, &cfg.stft)?;
    let masks = predict_masks(&net, &x, 0)?;
    let sources = apply_masks(&x, &masks, 0)?
        .iter()
        .map(|s| istft(s, &cfg.stft))
        .collect::<Result<Vec<_>>>()?;
    create_dir(out_dir)?;
    for (k, s) in sources.iter().enumerate() {
        write_wav(&out_dir.join(source_file(k)), s, SampleFormat::Float32)?;
    }
    write_masks(&out_dir.join(MASKS_FILE), &masks)?;
    Ok(sources)
}

/// Loads every readable manifest mixture as a training item. Unreadable or
/// mismatched files are skipped with a warning.
pub fn load_training_items(cfg: &Config, manifest: &Path) -> Result<(Vec<TrainItem>, u32)> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "{} lists no mixtures",
            manifest.display()
        )));
    }
    let m = cfg.geometry.mic_positions.len();
    let mut items = Vec::new();
    let mut rate = None;
    for e in &entries {
        let w = match read_wav(&e.path) {
            Ok(w) => w,
            Err(err) => {
                log::warn!("skipping {}: {err}", e.path.display());
                continue;
            }
        };
        if w.n_channels() != m || rate.is_some_and(|r| r != w.sample_rate()) {
            log::warn!(
                "skipping {}: {} channels at {} Hz does not match the corpus",
                e.path.display(),
                w.n_channels(),
                w.sample_rate()
            );
            continue;
        }
        let item = stft(&w, &cfg.stft).and_then(|x| TrainItem::new(x, cfg.em.reference_channel));
        match item {
            Ok(item) => {
                rate = Some(w.sample_rate());
                items.push(item);
            }
            Err(err) => log::warn!("skipping {}: {err}", e.path.display()),
        }
    }
    match rate {
        Some(r) => Ok((items, r)),
        None => Err(Error::format(manifest, "no readable mixture in the manifest")),
    }
}

/// Trains the mask network and localization map for `train.epochs` epochs,
/// saving a checkpoint after every epoch. With `resume`, training continues
/// from that checkpoint.
pub fn cmd_train(
    cfg: &Config,
    manifest: &Path,
    out_checkpoint: &Path,
    resume: Option<&Path>,
) -> Result<Vec<EpochReport>> {
    let sep_cfg = cfg.separator()?;
    let (items, rate) = load_training_items(cfg, manifest)?;
    let tpl = templates_for(&sep_cfg, rate)?;
    let mut trainer = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.net.n_freqs() != cfg.stft.n_freqs() || ck.map.n_dirs() != cfg.grid.count {
                return Err(Error::Checkpoint(format!(
                    "{}: topology does not match the configuration",
                    path.display()
                )));
            }
            Trainer::resume(ck.net, ck.map, ck.optimizer, ck.epoch, cfg.train_config())?
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            let net = ReferenceMaskNet::new(
                cfg.stft.n_freqs(),
                cfg.em.n_sources,
                cfg.train.context,
                cfg.train.hidden,
                &mut rng,
            )?;
            Trainer::new(net, DirectionalSoftmax::new(cfg.grid.count), cfg.train_config())
        }
    };
    let log_path = cfg.paths.training_log.clone().unwrap_or_else(|| {
        let mut p = out_checkpoint.as_os_str().to_owned();
        p.push(".log.csv");
        PathBuf::from(p)
    });
    trainer.log_to(&log_path)?;
    let mut reports = Vec::new();
    for _ in 0..cfg.train.epochs {
        let rep = trainer.run_epoch(&items, &tpl)?;
        log::info!(
            "epoch {}: loss {:.6}, lr {:e}, {} skipped",
            rep.epoch,
            rep.mean_loss,
            rep.lr,
            rep.skipped
        );
        save_checkpoint(
            out_checkpoint,
            &Checkpoint {
                net: trainer.net.clone(),
                map: trainer.map.clone(),
                optimizer: trainer.optimizer.clone(),
                epoch: trainer.epoch,
            },
        )?;
        reports.push(rep);
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneMetrics {
    pub scene_id: String,
    /// Mean permutation-aligned SI-SDR in dB.
    pub si_sdr_db: Option<f64>,
    /// Mean matched DoA error in degrees, when truths and estimates exist.
    pub doa_error_deg: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub scenes: Vec<SceneMetrics>,
    pub mean_si_sdr_db: f64,
    pub std_si_sdr_db: f64,
}

impl EvaluationReport {
    pub fn failures(&self) -> usize {
        self.scenes.iter().filter(|s| s.failure.is_some()).count()
    }
}

fn evaluate_scene(entry: &ManifestEntry, dir: &Path) -> Result<(f64, Option<f64>)> {
    if entry.references.is_empty() {
        return Err(Error::format(&entry.path, "manifest row lists no references"));
    }
    let references: Vec<Vec<f64>> = entry
        .references
        .iter()
        .map(|p| read_wav(p).map(|w| w.channel(0).to_vec()))
        .collect::<Result<_>>()?;
    let estimates: Vec<Vec<f64>> = (0..references.len())
        .map(|k| read_wav(&dir.join(source_file(k))).map(|w| w.channel(0).to_vec()))
        .collect::<Result<_>>()?;
    // the inverse STFT may pad; compare over the common length
    let n = references
        .iter()
        .chain(&estimates)
        .map(Vec::len)
        .min()
        .unwrap_or(0);
    let trim = |v: &[Vec<f64>]| v.iter().map(|s| s[..n].to_vec()).collect::<Vec<_>>();
    let aligned = permutation_align(&trim(&estimates), &trim(&references))?;
    let doa_path = dir.join(DOA_FILE);
    let doa = if entry.doas_deg.is_empty() || !doa_path.exists() {
        None
    } else {
        let mut r = csv::Reader::from_path(&doa_path).map_err(|e| csv_error(&doa_path, e))?;
        let mut est = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_error(&doa_path, e))?;
            let v = rec
                .get(1)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::format(&doa_path, "bad azimuth column"))?;
            est.push(v);
        }
        if est.len() != entry.doas_deg.len() {
            return Err(Error::format(&doa_path, "DoA count differs from the truth"));
        }
        let errs = match_azimuths(&est, &entry.doas_deg);
        Some(errs.iter().sum::<f64>() / errs.len() as f64)
    };
    Ok((aligned.mean, doa))
}

/// Scores `results_dir/<scene_id>/source_k.wav` against the manifest's
/// references and writes `metrics.csv` with one row per scene followed by
/// `mean` and `std` rows over the scenes that could be scored.
pub fn cmd_evaluate(manifest: &Path, results_dir: &Path) -> Result<EvaluationReport> {
    let entries = read_manifest(manifest)?;
    let scenes: Vec<SceneMetrics> = entries
        .iter()
        .map(|e| match evaluate_scene(e, &results_dir.join(&e.scene_id)) {
            Ok((sdr, doa)) => SceneMetrics {
                scene_id: e.scene_id.clone(),
                si_sdr_db: Some(sdr),
                doa_error_deg: doa,
                failure: None,
            },
            Err(err) => {
                log::error!("{}: {err}", e.scene_id);
                SceneMetrics {
                    scene_id: e.scene_id.clone(),
                    si_sdr_db: None,
                    doa_error_deg: None,
                    failure: Some(err.to_string()),
                }
            }
        })
        .collect();
    let sdrs: Vec<f64> = scenes.iter().filter_map(|s| s.si_sdr_db).collect();
    let (mean, std) = mean_std(&sdrs);
    let doas: Vec<f64> = scenes.iter().filter_map(|s| s.doa_error_deg).collect();
    let (doa_mean, doa_std) = mean_std(&doas);
    create_dir(results_dir)?;
    let path = results_dir.join(METRICS_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    w.write_record(["scene_id", "status", "si_sdr_db", "doa_error_deg", "detail"])
        .map_err(|e| csv_error(&path, e))?;
    for s in &scenes {
        let status = if s.failure.is_some() { "failed" } else { "ok" };
        w.write_record([
            s.scene_id.clone(),
            status.to_string(),
            opt(s.si_sdr_db),
            opt(s.doa_error_deg),
            s.failure.clone().unwrap_or_default(),
        ])
        .map_err(|e| csv_error(&path, e))?;
    }
    for (label, a, b) in [("mean", mean, doa_mean), ("std", std, doa_std)] {
        w.write_record([label, "", &a.to_string(), &b.to_string(), ""])
            .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(EvaluationReport {
        scenes,
        mean_si_sdr_db: mean,
        std_si_sdr_db: std,
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (
        mean,
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt(),
    )
}

/// Gradient checks of the reference network on three random items and of
/// the linear network on one.
pub fn cmd_gradcheck(cfg: &Config) -> Result<Vec<(String, GradcheckReport)>> {
    let opts = cfg.train_config().options;
    let k = cfg.em.n_sources;
    let mut reports = Vec::new();
    for i in 0..3 {
        let seed = cfg.train.seed.wrapping_add(i);
        let s = gradcheck_setup(seed, 8, k)?;
        let rep = gradcheck(&s.net, &s.map, &s.item, &s.tpl, &opts, GRADCHECK_STEP)?;
        reports.push((format!("reference network, seed {seed}"), rep));
    }
    let s = gradcheck_setup(cfg.train.seed, 8, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let linear = LinearMaskNet::new(s.net.n_freqs(), k, 1, &mut rng)?;
    let rep = gradcheck(&linear, &s.map, &s.item, &s.tpl, &opts, GRADCHECK_STEP)?;
    reports.push((format!("linear network, seed {}", cfg.train.seed), rep));
    Ok(reports)
}

/// Plain single-run separation, for callers that want the raw EM result.
pub fn separate_waveform(cfg: &Config, mix: &Waveform, init: EmInit) -> Result<Separation> {
    separate(mix, &cfg.separator()?, init)
}
