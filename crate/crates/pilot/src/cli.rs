//! Command-line interface: scene simulation, training, prediction,
//! evaluation, significance testing, and SVG trajectory plots.

use crate::config::Config;
use crate::dataset::{chunk_targets, frame_truth, make_folds, read_manifest, write_manifest};
use crate::error::{PilotError, Result};
use crate::frontend::{chunk, load_foa_wav, stft, SpectralChunk, CHUNK_MS};
use crate::metrics::{evaluate_frames, mann_whitney_u_one_sided, FramePrediction, SlotPrediction};
use crate::model::{ModelConfig, PilotModel};
use crate::simulator::{generate, read_annotations, write_annotations, write_scene_wav, Event};
use crate::trainer::{fit, write_curves, Checkpoint, TrainChunk};
use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(name = "pilot", version, about = "Multi-source sound-event localization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Configuration file (key = value lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Inline overrides, e.g. `--set train.epochs=10` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed override for the command's random choices.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (the implementation is single-threaded; values other
    /// than 1 are accepted and ignored with a note).
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic scenes and a cross-validation manifest.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Output directory for WAV files, annotations, and the manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on simulated scenes.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory produced by `simulate`.
        #[arg(long)]
        data: PathBuf,
        /// Cross-validation fold to train on.
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Output directory for the checkpoint and training log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a trained model over a scene and write per-frame predictions.
    Predict {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        /// Output CSV of prediction records.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against scene annotations.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Directory for the metrics summary and the per-frame error dump.
        #[arg(long)]
        out: PathBuf,
        /// Use the conventional spherical law of cosines for angular error.
        #[arg(long)]
        conventional_great_circle: bool,
    },
    /// One-sided Mann-Whitney U test between two error dumps (is A smaller?).
    Stats {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Render predicted trajectories with uncertainty bands to SVG.
    Plot {
        #[arg(long)]
        predictions: PathBuf,
        /// Output SVG path; a sidecar CSV is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Map an error to the documented process exit code.
pub fn exit_code(err: &PilotError) -> i32 {
    match err {
        PilotError::InvalidArgument(_) => 2,
        PilotError::Format(_) | PilotError::Io { .. } => 3,
        PilotError::Numerical(_)
        | PilotError::SingularMatrix(_)
        | PilotError::DegenerateVariance(_) => 4,
        PilotError::Constraint(_) => 4,
    }
}

fn log_enabled() -> bool {
    !matches!(std::env::var("PILOT_LOG").as_deref(), Ok("quiet") | Ok("off"))
}

fn log(msg: &str) {
    if log_enabled() {
        eprintln!("[pilot] {}", msg);
    }
}

fn resolve_config(common: &CommonArgs) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(path) => Config::from_file(path)?,
        None => Config::defaults(),
    };
    cfg.apply_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.scene.seed = seed;
    }
    if common.threads != 1 {
        log("note: --threads is accepted for compatibility; running single-threaded");
    }
    if log_enabled() {
        eprintln!("[pilot] resolved configuration:\n{}", cfg.render());
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common, out } => cmd_simulate(&common, &out),
        Command::Train {
            common,
            data,
            fold,
            out,
        } => cmd_train(&common, &data, fold, &out),
        Command::Predict {
            common,
            checkpoint,
            wav,
            out,
        } => cmd_predict(&common, &checkpoint, &wav, &out),
        Command::Evaluate {
            common,
            predictions,
            annotations,
            out,
            conventional_great_circle,
        } => cmd_evaluate(
            &common,
            &predictions,
            &annotations,
            &out,
            conventional_great_circle,
        ),
        Command::Stats { a, b } => cmd_stats(&a, &b),
        Command::Plot { predictions, out } => cmd_plot(&predictions, &out),
    }
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| PilotError::io(path.display().to_string(), e))
}

pub fn scene_stem(index: usize) -> String {
    format!("scene_{:03}", index)
}

fn cmd_simulate(common: &CommonArgs, out: &Path) -> Result<()> {
    let cfg = resolve_config(common)?;
    mkdir(out)?;
    let mut stems = Vec::with_capacity(cfg.num_scenes);
    for i in 0..cfg.num_scenes {
        let mut spec = cfg.scene.clone();
        spec.seed = cfg.scene.seed.wrapping_add(i as u64);
        let scene = generate(&spec)?;
        let stem = scene_stem(i);
        write_scene_wav(&out.join(format!("{}.wav", stem)), &scene)?;
        write_annotations(&out.join(format!("{}.csv", stem)), &scene.events)?;
        log(&format!("wrote {} ({} events)", stem, scene.events.len()));
        stems.push(stem);
    }
    let folds = make_folds(cfg.num_scenes, cfg.num_folds)?;
    write_manifest(&out.join("manifest.csv"), &folds, &stems)?;
    log(&format!(
        "wrote manifest with {} folds over {} scenes",
        cfg.num_folds, cfg.num_scenes
    ));
    Ok(())
}

/// Load one scene's audio and annotations and rasterize them into training
/// chunks. Ragged trailing chunks (fewer frames than the model expects) are
/// dropped.
pub fn load_scene_chunks(
    data: &Path,
    stem: &str,
    model_cfg: &ModelConfig,
) -> Result<Vec<TrainChunk>> {
    let wav = load_foa_wav(&data.join(format!("{}.wav", stem)))?;
    let events = read_annotations(&data.join(format!("{}.csv", stem)))?;
    let e = &model_cfg.extractor;
    let mut out = Vec::new();
    for (idx, segment) in chunk(&wav, CHUNK_MS).iter().enumerate() {
        let spectral = stft(segment, idx)?;
        if spectral.frames != e.frames || spectral.bins != e.freq_bins {
            continue;
        }
        let targets = chunk_targets(&events, idx, e.num_sources);
        out.push(TrainChunk {
            chunk: spectral,
            targets,
        });
    }
    Ok(out)
}

fn cmd_train(common: &CommonArgs, data: &Path, fold: usize, out: &Path) -> Result<()> {
    let cfg = resolve_config(common)?;
    mkdir(out)?;
    let (folds, stems) = read_manifest(&data.join("manifest.csv"))?;
    let split = folds
        .get(fold)
        .ok_or_else(|| PilotError::invalid(format!("fold {} out of range", fold)))?;
    let load_split = |idxs: &[usize]| -> Result<Vec<TrainChunk>> {
        let mut chunks = Vec::new();
        for &i in idxs {
            let stem = stems
                .get(i)
                .ok_or_else(|| PilotError::Format(format!("scene index {} out of range", i)))?;
            chunks.extend(load_scene_chunks(data, stem, &cfg.model)?);
        }
        Ok(chunks)
    };
    let train_chunks = load_split(&split.train)?;
    let val_chunks = load_split(&split.val)?;
    log(&format!(
        "fold {}: {} train chunks, {} val chunks",
        fold,
        train_chunks.len(),
        val_chunks.len()
    ));
    let model = PilotModel::new(cfg.model.clone())?;
    model.init_kaiming(cfg.train.seed);
    let result = fit(&model, &train_chunks, &val_chunks, &cfg.train, &cfg.loss)?;
    write_curves(&out.join("training_log.csv"), &result.curves)?;
    result.best.save(&out.join("model.ckpt"))?;
    std::fs::write(out.join("config.resolved"), cfg.render())
        .map_err(|e| PilotError::io(out.display().to_string(), e))?;
    if let Some(reason) = &result.aborted {
        log(&format!(
            "training aborted ({}); last good checkpoint retained",
            reason
        ));
        return Err(PilotError::Numerical(format!(
            "training aborted: {}",
            reason
        )));
    }
    log(&format!(
        "best validation loss {:.6} after {} epochs",
        result.best_val_loss,
        result.curves.len()
    ));
    Ok(())
}

/// Wrap an angle to the half-open interval (-pi, pi].
pub fn wrap_azimuth(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        PI
    } else {
        w
    }
}

/// Clamp elevation to [-pi/2, pi/2].
pub fn clamp_elevation(e: f64) -> f64 {
    e.clamp(-PI / 2.0, PI / 2.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub chunk_index: usize,
    pub frame_index: usize,
    pub slot: usize,
    pub gamma: f64,
    pub azimuth_rad: f64,
    pub elevation_rad: f64,
    pub cov_aa: f64,
    pub cov_ae: f64,
    pub cov_ee: f64,
}

pub const PREDICTION_HEADER: &str =
    "chunk_index,frame_index,slot,gamma,azimuth_rad,elevation_rad,cov_aa,cov_ae,cov_ee";

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut out = String::from(PREDICTION_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}\n",
            r.chunk_index,
            r.frame_index,
            r.slot,
            r.gamma,
            r.azimuth_rad,
            r.elevation_rad,
            r.cov_aa,
            r.cov_ae,
            r.cov_ee
        ));
    }
    std::fs::write(path, out).map_err(|e| PilotError::io(path.display().to_string(), e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| PilotError::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == PREDICTION_HEADER => {}
        _ => {
            return Err(PilotError::Format(format!(
                "{}: missing prediction header",
                path.display()
            )))
        }
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(PilotError::Format(format!(
                "{}: line {}: expected 9 fields",
                path.display(),
                i + 2
            )));
        }
        let bad = |what: &str| {
            PilotError::Format(format!("{}: line {}: bad {}", path.display(), i + 2, what))
        };
        records.push(PredictionRecord {
            chunk_index: f[0].parse().map_err(|_| bad("chunk_index"))?,
            frame_index: f[1].parse().map_err(|_| bad("frame_index"))?,
            slot: f[2].parse().map_err(|_| bad("slot"))?,
            gamma: f[3].parse().map_err(|_| bad("gamma"))?,
            azimuth_rad: f[4].parse().map_err(|_| bad("azimuth_rad"))?,
            elevation_rad: f[5].parse().map_err(|_| bad("elevation_rad"))?,
            cov_aa: f[6].parse().map_err(|_| bad("cov_aa"))?,
            cov_ae: f[7].parse().map_err(|_| bad("cov_ae"))?,
            cov_ee: f[8].parse().map_err(|_| bad("cov_ee"))?,
        });
    }
    Ok(records)
}

/// Run the model over spectral chunks and emit prediction records. Angles are
/// wrapped/clamped only here, at the output boundary.
pub fn predict_records(
    model: &PilotModel,
    chunks: &[SpectralChunk],
) -> Result<Vec<PredictionRecord>> {
    let mut records = Vec::new();
    for spectral in chunks {
        let (posts, _) = model.forward(spectral, false)?;
        for (k, frame) in posts.iter().enumerate() {
            for (slot, p) in frame.iter().enumerate() {
                let mean = p.mean.to_vec();
                let cov = p.cov.to_vec();
                records.push(PredictionRecord {
                    chunk_index: spectral.chunk_index,
                    frame_index: k,
                    slot,
                    gamma: p.gamma.item(),
                    azimuth_rad: wrap_azimuth(mean[0]),
                    elevation_rad: clamp_elevation(mean[1]),
                    cov_aa: cov[0],
                    cov_ae: cov[1],
                    cov_ee: cov[3],
                });
            }
        }
    }
    Ok(records)
}

fn cmd_predict(common: &CommonArgs, checkpoint: &Path, wav: &Path, out: &Path) -> Result<()> {
    let cfg = resolve_config(common)?;
    let model = PilotModel::new(cfg.model.clone())?;
    let ck = Checkpoint::load(checkpoint)?;
    ck.apply_to_model(&model)?;
    let waveform = load_foa_wav(wav)?;
    let e = &cfg.model.extractor;
    let mut chunks = Vec::new();
    for (idx, segment) in chunk(&waveform, CHUNK_MS).iter().enumerate() {
        let spectral = stft(segment, idx)?;
        if spectral.frames == e.frames && spectral.bins == e.freq_bins {
            chunks.push(spectral);
        }
    }
    let records = predict_records(&model, &chunks)?;
    write_predictions(out, &records)?;
    log(&format!("wrote {} prediction records", records.len()));
    Ok(())
}

/// Group prediction records into per-frame slot lists, keyed by
/// (chunk, frame); slots are ordered by slot index.
pub fn group_predictions(
    records: &[PredictionRecord],
) -> BTreeMap<(usize, usize), FramePrediction> {
    let mut frames: BTreeMap<(usize, usize), Vec<&PredictionRecord>> = BTreeMap::new();
    for r in records {
        frames.entry((r.chunk_index, r.frame_index)).or_default().push(r);
    }
    frames
        .into_iter()
        .map(|(key, mut rs)| {
            rs.sort_by_key(|r| r.slot);
            let slots = rs
                .iter()
                .map(|r| SlotPrediction {
                    gamma: r.gamma,
                    azimuth: r.azimuth_rad,
                    elevation: r.elevation_rad,
                    cov: (r.cov_aa, r.cov_ae, r.cov_ee),
                })
                .collect();
            (key, FramePrediction { slots })
        })
        .collect()
}

fn cmd_evaluate(
    _common: &CommonArgs,
    predictions: &Path,
    annotations: &Path,
    out: &Path,
    conventional: bool,
) -> Result<()> {
    let records = read_predictions(predictions)?;
    let events: Vec<Event> = read_annotations(annotations)?;
    mkdir(out)?;
    let grouped = group_predictions(&records);
    let mut preds = Vec::with_capacity(grouped.len());
    let mut truths = Vec::with_capacity(grouped.len());
    for ((chunk_idx, frame_idx), pred) in grouped {
        truths.push(frame_truth(&events, chunk_idx, frame_idx));
        preds.push(pred);
    }
    let report = evaluate_frames(&preds, &truths, 0.5, conventional)?;
    let mut summary = String::new();
    summary.push_str(&format!("frames,{}\n", report.total_frames));
    summary.push_str(&format!("frame_recall,{:.6}\n", report.frame_recall));
    summary.push_str(&format!(
        "mean_doa_error_rad,{:.6}\n",
        report.mean_doa_error_rad
    ));
    summary.push_str(&format!(
        "mean_doa_error_deg,{:.6}\n",
        report.mean_doa_error_deg
    ));
    summary.push_str(&format!(
        "correct_count_frames,{}\n",
        report.correct_count_frames
    ));
    std::fs::write(out.join("metrics.csv"), &summary)
        .map_err(|e| PilotError::io(out.display().to_string(), e))?;
    let mut dump = String::from("doa_error_rad\n");
    for v in &report.doa_errors_rad {
        dump.push_str(&format!("{:.12e}\n", v));
    }
    std::fs::write(out.join("errors.csv"), dump)
        .map_err(|e| PilotError::io(out.display().to_string(), e))?;
    println!(
        "frames={} recall={:.4} mean_doa_error={:.3} rad ({:.2} deg)",
        report.total_frames,
        report.frame_recall,
        report.mean_doa_error_rad,
        report.mean_doa_error_deg
    );
    Ok(())
}

pub fn read_error_dump(path: &Path) -> Result<Vec<f64>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| PilotError::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("doa_error_rad") => {}
        _ => {
            return Err(PilotError::Format(format!(
                "{}: expected 'doa_error_rad' header",
                path.display()
            )))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(line.trim().parse::<f64>().map_err(|_| {
            PilotError::Format(format!("{}: line {}: bad value", path.display(), i + 2))
        })?);
    }
    Ok(out)
}

fn cmd_stats(a: &Path, b: &Path) -> Result<()> {
    let xs = read_error_dump(a)?;
    let ys = read_error_dump(b)?;
    let (u, p) = mann_whitney_u_one_sided(&xs, &ys)?;
    println!("U={:.1} p={:.6e} n_a={} n_b={}", u, p, xs.len(), ys.len());
    Ok(())
}

fn cmd_plot(predictions: &Path, out: &Path) -> Result<()> {
    let records = read_predictions(predictions)?;
    let svg = render_plot(&records)?;
    std::fs::write(out, svg).map_err(|e| PilotError::io(out.display().to_string(), e))?;
    let sidecar = out.with_extension("csv");
    let mut csv = String::from(
        "time_index,slot,gamma,azimuth_rad,azimuth_lo,azimuth_hi,elevation_rad,elevation_lo,elevation_hi\n",
    );
    for r in &records {
        let t = r.chunk_index * frames_per_chunk(&records) + r.frame_index;
        let sa = r.cov_aa.max(0.0).sqrt();
        let se = r.cov_ee.max(0.0).sqrt();
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            t,
            r.slot,
            r.gamma,
            r.azimuth_rad,
            r.azimuth_rad - 2.0 * sa,
            r.azimuth_rad + 2.0 * sa,
            r.elevation_rad,
            r.elevation_rad - 2.0 * se,
            r.elevation_rad + 2.0 * se
        ));
    }
    std::fs::write(&sidecar, csv).map_err(|e| PilotError::io(sidecar.display().to_string(), e))?;
    log(&format!("wrote {} and {}", out.display(), sidecar.display()));
    Ok(())
}

fn frames_per_chunk(records: &[PredictionRecord]) -> usize {
    records.iter().map(|r| r.frame_index + 1).max().unwrap_or(1)
}

/// Two stacked panels (azimuth, elevation) with one polyline per slot and a
/// translucent plus/minus two-sigma band.
pub fn render_plot(records: &[PredictionRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(PilotError::invalid("no prediction records to plot"));
    }
    const W: f64 = 900.0;
    const H: f64 = 300.0;
    const PAD: f64 = 40.0;
    let fpc = frames_per_chunk(records);
    let t_of = |r: &PredictionRecord| (r.chunk_index * fpc + r.frame_index) as f64;
    let t_max = records.iter().map(t_of).fold(0.0, f64::max).max(1.0);
    let slots: Vec<usize> = {
        let mut s: Vec<usize> = records.iter().map(|r| r.slot).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">\n",
        W,
        2.0 * H
    );
    for (panel, (label, lo, hi)) in [
        ("azimuth (rad)", -PI, PI),
        ("elevation (rad)", -PI / 2.0, PI / 2.0),
    ]
    .iter()
    .enumerate()
    {
        let y0 = panel as f64 * H;
        let x_of = |t: f64| PAD + (W - 2.0 * PAD) * t / t_max;
        let y_of = |v: f64| y0 + H - PAD - (H - 2.0 * PAD) * (v - lo) / (hi - lo);
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>\n",
            PAD,
            y0 + PAD,
            W - 2.0 * PAD,
            H - 2.0 * PAD
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"14\">{}</text>\n",
            PAD,
            y0 + PAD - 8.0,
            label
        ));
        for (si, &slot) in slots.iter().enumerate() {
            let mut pts: Vec<&PredictionRecord> =
                records.iter().filter(|r| r.slot == slot).collect();
            pts.sort_by(|a, b| t_of(a).partial_cmp(&t_of(b)).unwrap());
            if pts.is_empty() {
                continue;
            }
            let color = colors[si % colors.len()];
            let value = |r: &PredictionRecord| {
                if panel == 0 {
                    (r.azimuth_rad, r.cov_aa.max(0.0).sqrt())
                } else {
                    (r.elevation_rad, r.cov_ee.max(0.0).sqrt())
                }
            };
            // band polygon: upper edge forward, lower edge back
            let mut band = String::from("<polygon points=\"");
            for r in &pts {
                let (v, s) = value(r);
                band.push_str(&format!(
                    "{:.2},{:.2} ",
                    x_of(t_of(r)),
                    y_of((v + 2.0 * s).clamp(*lo, *hi))
                ));
            }
            for r in pts.iter().rev() {
                let (v, s) = value(r);
                band.push_str(&format!(
                    "{:.2},{:.2} ",
                    x_of(t_of(r)),
                    y_of((v - 2.0 * s).clamp(*lo, *hi))
                ));
            }
            band.push_str(&format!(
                "\" fill=\"{}\" fill-opacity=\"0.15\" stroke=\"none\"/>\n",
                color
            ));
            svg.push_str(&band);
            let mut line = String::from("<polyline points=\"");
            for r in &pts {
                let (v, _) = value(r);
                line.push_str(&format!("{:.2},{:.2} ", x_of(t_of(r)), y_of(v)));
            }
            line.push_str(&format!(
                "\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>\n",
                color
            ));
            svg.push_str(&line);
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn azimuth_wraps_to_half_open_interval() {
        assert!((wrap_azimuth(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_azimuth(-PI) - PI).abs() < 1e-12, "boundary maps to +pi");
        assert!((wrap_azimuth(PI) - PI).abs() < 1e-12);
        assert!((wrap_azimuth(2.0 * PI)).abs() < 1e-12);
        assert!((wrap_azimuth(-3.5 * PI) - 0.5 * PI).abs() < 1e-12);
        for k in -5..=5 {
            let w = wrap_azimuth(0.3 + 2.0 * PI * k as f64);
            assert!((w - 0.3).abs() < 1e-9);
        }
    }

    #[test]
    fn elevation_clamps() {
        assert_eq!(clamp_elevation(2.0), PI / 2.0);
        assert_eq!(clamp_elevation(-2.0), -PI / 2.0);
        assert_eq!(clamp_elevation(0.4), 0.4);
    }

    #[test]
    fn prediction_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pred.csv");
        let records = vec![
            PredictionRecord {
                chunk_index: 0,
                frame_index: 3,
                slot: 1,
                gamma: 0.8,
                azimuth_rad: -0.25,
                elevation_rad: 0.1,
                cov_aa: 0.04,
                cov_ae: -0.001,
                cov_ee: 0.02,
            },
            PredictionRecord {
                chunk_index: 2,
                frame_index: 0,
                slot: 0,
                gamma: 0.1,
                azimuth_rad: 3.0,
                elevation_rad: -1.2,
                cov_aa: 1.0,
                cov_ae: 0.0,
                cov_ee: 1.0,
            },
        ];
        write_predictions(&path, &records).unwrap();
        let got = read_predictions(&path).unwrap();
        assert_eq!(got, records);
    }

    #[test]
    fn rejects_malformed_prediction_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "wrong,header\n1,2,3\n").unwrap();
        assert!(read_predictions(&path).is_err());
        std::fs::write(
            &path,
            format!("{}\n1,2,3\n", PREDICTION_HEADER),
        )
        .unwrap();
        assert!(read_predictions(&path).is_err());
    }

    #[test]
    fn grouping_orders_slots_within_frames() {
        let rec = |c, f, s, az| PredictionRecord {
            chunk_index: c,
            frame_index: f,
            slot: s,
            gamma: 0.9,
            azimuth_rad: az,
            elevation_rad: 0.0,
            cov_aa: 1.0,
            cov_ae: 0.0,
            cov_ee: 1.0,
        };
        let records = vec![rec(0, 0, 1, 2.0), rec(0, 0, 0, 1.0), rec(1, 4, 0, 3.0)];
        let grouped = group_predictions(&records);
        assert_eq!(grouped.len(), 2);
        let f00 = &grouped[&(0, 0)];
        assert_eq!(f00.slots.len(), 2);
        assert_eq!(f00.slots[0].azimuth, 1.0);
        assert_eq!(f00.slots[1].azimuth, 2.0);
        assert!(grouped.contains_key(&(1, 4)));
    }

    #[test]
    fn error_dump_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("errors.csv");
        std::fs::write(&path, "doa_error_rad\n1.0\n0.5\n").unwrap();
        assert_eq!(read_error_dump(&path).unwrap(), vec![1.0, 0.5]);
        std::fs::write(&path, "nope\n1.0\n").unwrap();
        assert!(read_error_dump(&path).is_err());
    }

    #[test]
    fn exit_codes_match_error_classes() {
        assert_eq!(exit_code(&PilotError::invalid("x")), 2);
        assert_eq!(exit_code(&PilotError::Format("x".into())), 3);
        assert_eq!(exit_code(&PilotError::Numerical("x".into())), 4);
        assert_eq!(exit_code(&PilotError::DegenerateVariance("x".into())), 4);
    }

    #[test]
    fn plot_renders_bands_and_lines() {
        let rec = |c, f, s| PredictionRecord {
            chunk_index: c,
            frame_index: f,
            slot: s,
            gamma: 0.9,
            azimuth_rad: 0.5,
            elevation_rad: -0.2,
            cov_aa: 0.01,
            cov_ae: 0.0,
            cov_ee: 0.02,
        };
        let records = vec![rec(0, 0, 0), rec(0, 1, 0), rec(0, 0, 1), rec(0, 1, 1)];
        let svg = render_plot(&records).unwrap();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 4); // 2 slots x 2 panels
        assert_eq!(svg.matches("<polygon").count(), 4);
        assert!(render_plot(&[]).is_err());
    }

    #[test]
    fn cli_parses_subcommands() {
        let cli = Cli::try_parse_from([
            "pilot", "simulate", "--out", "/tmp/x", "--set", "dataset.num_scenes=4",
        ])
        .unwrap();
        match cli.command {
            Command::Simulate { common, out } => {
                assert_eq!(out, PathBuf::from("/tmp/x"));
                assert_eq!(common.overrides, vec!["dataset.num_scenes=4"]);
            }
            _ => panic!("wrong subcommand"),
        }
        assert!(Cli::try_parse_from(["pilot", "bogus"]).is_err());
    }
}
