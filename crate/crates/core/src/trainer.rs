//! Joint training of both segmentation branches and the fusion branch, and
//! checkpoint-driven fusion inference.

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Device;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    crop_patches, pad_reflect, recombine, save_gray, save_rgb, split_validation, to_luma_chroma,
    ImagePair, PatchGridSpec, Plane,
};
use crate::encoder::Modality;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown, OhemParams};
use crate::model::{Batch, JointModel, JointSpec, ModelConfig};
use crate::nn;
use crate::optim::{AdamConfig, Optimizer};
use crate::pilot::{trajectory_file, SignificantFeatureSelection, PILOT_CHECKPOINT};
use crate::rfam::WeightTrajectory;

/// Pilot outputs for one modality: the branch checkpoint and the selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotArtifacts {
    pub checkpoint: PathBuf,
    pub selection: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub lambda: f64,
    pub patch_size: usize,
    pub stride: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub val_fraction: f64,
    pub clip_norm: Option<f64>,
    pub ohem: OhemParams,
    /// Number of validation patches whose fused output is written to `samples/`.
    pub samples: usize,
    pub pilot_ir: Option<PilotArtifacts>,
    pub pilot_vi: Option<PilotArtifacts>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: AdamConfig::default(),
            batch_size: 20,
            lambda: 0.1,
            patch_size: 256,
            stride: 100,
            epochs: 100,
            max_steps: None,
            seed: 0,
            val_fraction: 0.1,
            clip_norm: Some(5.0),
            ohem: OhemParams::default(),
            samples: 4,
            pilot_ir: None,
            pilot_vi: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.patch_size == 0 || self.patch_size % 16 != 0 {
            return Err(Error::Config(format!(
                "patch_size {} must be a positive multiple of 16",
                self.patch_size
            )));
        }
        if self.stride == 0 || self.stride > self.patch_size {
            return Err(Error::Config(format!(
                "stride {} must be in 1..={}",
                self.stride, self.patch_size
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("clip_norm {c} must be positive")));
            }
        }
        Ok(())
    }

    fn pilots(&self) -> Result<[&PilotArtifacts; 2]> {
        match (&self.pilot_ir, &self.pilot_vi) {
            (Some(ir), Some(vi)) => {
                for (m, p) in [("ir", ir), ("vi", vi)] {
                    for path in [&p.checkpoint, &p.selection] {
                        if !path.is_file() {
                            return Err(Error::Config(format!(
                                "{m} pilot artifact {} not found; run the {m} pilot and selection first",
                                path.display()
                            )));
                        }
                    }
                }
                Ok([ir, vi])
            }
            _ => Err(Error::Config(
                "pilot artifacts for both modalities are required; run the ir and vi pilots and selections first"
                    .into(),
            )),
        }
    }
}

pub const CONFIG_FILE: &str = "config.json";
pub const LOSS_LOG: &str = "losses.csv";
pub const INITIAL_CHECKPOINT: &str = "initial.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LAST_CHECKPOINT: &str = "last.safetensors";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub steps: usize,
    pub initial: Option<LossBreakdown>,
    pub last: Option<LossBreakdown>,
    pub best_val: Option<f64>,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn copy(from: &Path, to: &Path) -> Result<()> {
    std::fs::copy(from, to).map(|_| ()).map_err(|e| Error::io(from, e))
}

/// Copies a pilot's checkpoint, manifest and selection into `pilots/`.
fn archive_pilot(p: &PilotArtifacts, modality: Modality, dir: &Path) -> Result<()> {
    copy(&p.checkpoint, &dir.join(format!("{modality}_{PILOT_CHECKPOINT}")))?;
    let manifest = crate::checkpoint::manifest_path(&p.checkpoint);
    if manifest.is_file() {
        copy(
            &manifest,
            &crate::checkpoint::manifest_path(&dir.join(format!("{modality}_{PILOT_CHECKPOINT}"))),
        )?;
    }
    copy(&p.selection, &dir.join(format!("selection_{modality}.json")))
}

fn joint_loss(model: &JointModel, batch: &Batch, config: &TrainConfig) -> Result<crate::losses::TotalLoss> {
    let out = model.net.forward(&batch.ir, &batch.vi)?;
    let labels = batch
        .labels
        .as_deref()
        .ok_or_else(|| Error::Dataset("joint training needs labels".into()))?;
    total_loss(
        &out.fusion.y,
        &batch.ir,
        &batch.vi,
        &out.ir.seg.logits,
        &out.vi.seg.logits,
        labels,
        config.lambda,
        &config.ohem,
    )
}

/// Mean validation `l_total`, weighted by batch size.
fn validation_loss(model: &JointModel, val: &[ImagePair], config: &TrainConfig) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in val.chunks(config.batch_size) {
        let refs: Vec<&ImagePair> = chunk.iter().collect();
        let batch = Batch::from_pairs(&refs)?;
        sum += joint_loss(model, &batch, config)?.breakdown.l_total * chunk.len() as f64;
    }
    Ok(sum / val.len() as f64)
}

fn write_samples(model: &JointModel, pairs: &[ImagePair], dir: &Path) -> Result<()> {
    for pair in pairs {
        let batch = Batch::from_pairs(&[pair])?;
        let out = model.net.forward(&batch.ir, &batch.vi)?;
        let y = nn::tensor_to_plane(&out.fusion.y, 0)?;
        save_gray(&y, &dir.join(format!("{}.png", pair.id)))?;
    }
    Ok(())
}

/// Trains the joint network on patches cut from `pairs`, writing
/// `config.json`, `pilots/`, `checkpoints/`, `losses.csv`, `weights_ir.csv`,
/// `weights_vi.csv` and `samples/` under `run_dir`. Branches are warm-started
/// from the pilot checkpoints; the best checkpoint is chosen by validation
/// `l_total` after each epoch.
pub fn train_joint(config: &TrainConfig, pairs: &[ImagePair], run_dir: &Path) -> Result<TrainOutcome> {
    train_joint_observed(config, pairs, run_dir, &mut |_, _| {})
}

/// [`train_joint`], calling `observer(step, [ir, vi, fusion])` with the
/// effective weights after every optimizer step.
pub fn train_joint_observed(
    config: &TrainConfig,
    pairs: &[ImagePair],
    run_dir: &Path,
    observer: &mut dyn FnMut(usize, &[Vec<f64>; 3]),
) -> Result<TrainOutcome> {
    config.validate()?;
    let [pilot_ir, pilot_vi] = config.pilots()?;
    let grid = PatchGridSpec::new(config.patch_size, config.stride);
    let mut patches = Vec::new();
    for pair in pairs {
        if pair.label.is_none() {
            return Err(Error::Dataset(format!("{} has no labels", pair.id)));
        }
        pair.label.as_ref().expect("checked").validate(config.model.num_classes)?;
        patches.extend(crop_patches(pair, &grid)?);
    }
    if patches.is_empty() {
        return Err(Error::Dataset("no training pairs".into()));
    }
    for (i, p) in patches.iter_mut().enumerate() {
        p.id = format!("{}_{i:05}", p.id);
    }

    let spec = JointSpec {
        model: config.model.clone(),
        selection_ir: SignificantFeatureSelection::read(&pilot_ir.selection)?,
        selection_vi: SignificantFeatureSelection::read(&pilot_vi.selection)?,
    };
    for (sel, m) in [(&spec.selection_ir, Modality::Ir), (&spec.selection_vi, Modality::Vi)] {
        if sel.modality != m {
            return Err(Error::Config(format!(
                "selection for {m} was made on {} weights",
                sel.modality
            )));
        }
    }
    let model = JointModel::new(spec, config.seed)?;
    crate::checkpoint::load(&model.varmap, "ir.", &pilot_ir.checkpoint)?;
    crate::checkpoint::load(&model.varmap, "vi.", &pilot_vi.checkpoint)?;

    let pilots_dir = run_dir.join("pilots");
    let ckpt_dir = run_dir.join("checkpoints");
    let samples_dir = run_dir.join("samples");
    for d in [run_dir, &pilots_dir, &ckpt_dir, &samples_dir] {
        mkdir(d)?;
    }
    write(&run_dir.join(CONFIG_FILE), &(serde_json::to_string_pretty(config)? + "\n"))?;
    archive_pilot(pilot_ir, Modality::Ir, &pilots_dir)?;
    archive_pilot(pilot_vi, Modality::Vi, &pilots_dir)?;

    let best_checkpoint = ckpt_dir.join(BEST_CHECKPOINT);
    let last_checkpoint = ckpt_dir.join(LAST_CHECKPOINT);
    model.save(&ckpt_dir.join(INITIAL_CHECKPOINT))?;
    model.net.checked_weights()?;

    let (train, val) = split_validation(&patches, config.val_fraction, config.seed);
    let val = if val.is_empty() { train.clone() } else { val };
    let mut opt = Optimizer::new(&model.varmap, "", config.optimizer, config.clip_norm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x70_1a7_b10c);
    let mut traj = [WeightTrajectory::new(Modality::Ir), WeightTrajectory::new(Modality::Vi)];
    let mut log = format!("{}\n", LossBreakdown::CSV_HEADER);
    let log_path = run_dir.join(LOSS_LOG);
    let (mut first, mut last) = (None, None);
    let mut best_val: Option<f64> = None;
    let mut step = 0usize;
    let budget = config.max_steps.unwrap_or(usize::MAX);

    'epochs: for epoch in 1..=config.epochs {
        if step >= budget {
            break;
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if step >= budget {
                break;
            }
            let refs: Vec<&ImagePair> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = Batch::from_pairs(&refs)?;
            let loss = joint_loss(&model, &batch, config)?;
            opt.backward_step(&loss.total)?;
            step += 1;
            observer(step, &model.net.checked_weights()?);
            log.push_str(&loss.breakdown.csv_row(step));
            log.push('\n');
            first.get_or_insert(loss.breakdown);
            last = Some(loss.breakdown);
        }
        let [w_ir, w_vi, _] = model.net.checked_weights()?;
        traj[0].record(epoch, &w_ir)?;
        traj[1].record(epoch, &w_vi)?;
        let v = validation_loss(&model, &val, config)?;
        log::info!("joint epoch {epoch} step {step}: validation l_total {v:.5}");
        if best_val.is_none_or(|b| v < b) {
            best_val = Some(v);
            model.save(&best_checkpoint)?;
        }
        write(&log_path, &log)?;
        if step >= budget {
            break 'epochs;
        }
    }
    write(&log_path, &log)?;
    for t in &traj {
        t.write_csv(&run_dir.join(trajectory_file(t.modality)))?;
    }
    if best_val.is_none() {
        model.save(&best_checkpoint)?;
    }
    if step > 0 {
        model.save(&last_checkpoint)?;
        let best = JointModel::load(&best_checkpoint)?;
        write_samples(&best, &val[..config.samples.min(val.len())], &samples_dir)?;
    } else {
        std::fs::remove_file(&best_checkpoint).map_err(|e| Error::io(&best_checkpoint, e))?;
        std::fs::remove_file(crate::checkpoint::manifest_path(&best_checkpoint))
            .map_err(|e| Error::io(&best_checkpoint, e))?;
    }
    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        steps: step,
        initial: first,
        last,
        best_val,
        best_checkpoint: if step > 0 { best_checkpoint } else { ckpt_dir.join(INITIAL_CHECKPOINT) },
        last_checkpoint: if step > 0 { last_checkpoint } else { ckpt_dir.join(INITIAL_CHECKPOINT) },
    })
}

fn forward_padded(model: &JointModel, pair: &ImagePair) -> Result<crate::model::JointOutput> {
    let ir = pad_reflect(&pair.infrared, 16);
    let vi = pad_reflect(&pair.visible_luma(), 16);
    let dev = Device::Cpu;
    model.net.forward(
        &nn::planes_to_tensor(&[&ir], &dev)?,
        &nn::planes_to_tensor(&[&vi], &dev)?,
    )
}

/// Fused luminance of one pair: inputs are reflect-padded to multiples of 16,
/// the output cropped back to the pair's size.
pub fn fuse_pair(model: &JointModel, pair: &ImagePair) -> Result<Plane> {
    let (h, w) = pair.dims();
    let out = forward_padded(model, pair)?;
    let y = nn::tensor_to_plane(&out.fusion.y, 0)?;
    Ok(y.crop(0, 0, h, w))
}

/// SsF and Hfd maps the fusion branch receives for one pair, computed on the
/// same padded input as [`fuse_pair`].
pub fn fusion_inputs_of(model: &JointModel, pair: &ImagePair) -> Result<crate::mraf::FusionInputs> {
    Ok(forward_padded(model, pair)?.inputs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuseReport {
    /// `(id, wall seconds)` in input order.
    pub timings: Vec<(String, f64)>,
    pub mean_seconds: f64,
}

impl FuseReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("id,seconds\n");
        for (id, s) in &self.timings {
            out.push_str(&format!("{id},{s:.6}\n"));
        }
        out.push_str(&format!("mean,{:.6}\n", self.mean_seconds));
        out
    }
}

pub const TIMING_FILE: &str = "timing.csv";

/// Loads `checkpoint`, fuses every pair into `<out_dir>/<id>.png` (grayscale,
/// or RGB with the visible chroma reattached when `rgb` is set) and writes
/// `timing.csv`.
pub fn fuse_inference(checkpoint: &Path, pairs: &[ImagePair], out_dir: &Path, rgb: bool) -> Result<FuseReport> {
    if pairs.is_empty() {
        return Err(Error::Dataset("no pairs to fuse".into()));
    }
    let model = JointModel::load(checkpoint)?;
    mkdir(out_dir)?;
    let mut timings = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let t = Instant::now();
        let y = fuse_pair(&model, pair)?;
        let path = out_dir.join(format!("{}.png", pair.id));
        if rgb {
            let lc = to_luma_chroma(&pair.visible);
            save_rgb(&recombine(&y, &lc.cb, &lc.cr)?, &path)?;
        } else {
            save_gray(&y, &path)?;
        }
        timings.push((pair.id.clone(), t.elapsed().as_secs_f64()));
    }
    let mean_seconds = timings.iter().map(|t| t.1).sum::<f64>() / timings.len() as f64;
    let report = FuseReport { timings, mean_seconds };
    write(&out_dir.join(TIMING_FILE), &report.csv())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pilot::{run_pilot, select_significant, PilotConfig, SelectionRule};

    fn pilots(dir: &Path, data: &[ImagePair]) -> (PilotArtifacts, PilotArtifacts) {
        let cfg = PilotConfig {
            model: crate::model::tests::tiny_config(),
            epochs: 1,
            batch_size: 4,
            seed: 5,
            ..Default::default()
        };
        let mut out = Vec::new();
        for m in [Modality::Ir, Modality::Vi] {
            let d = dir.join(format!("pilot_{m}"));
            let res = run_pilot(m, data, &cfg, &d).unwrap();
            let sel = select_significant(&res.trajectory, SelectionRule::default()).unwrap();
            let path = d.join("selection.json");
            sel.write(&path).unwrap();
            out.push(PilotArtifacts {
                checkpoint: res.checkpoint,
                selection: path,
            });
        }
        let vi = out.pop().unwrap();
        (out.pop().unwrap(), vi)
    }

    fn config(ir: PilotArtifacts, vi: PilotArtifacts, epochs: usize) -> TrainConfig {
        TrainConfig {
            model: crate::model::tests::tiny_config(),
            batch_size: 4,
            patch_size: 32,
            stride: 32,
            epochs,
            seed: 11,
            samples: 2,
            pilot_ir: Some(ir),
            pilot_vi: Some(vi),
            ..Default::default()
        }
    }

    #[test]
    fn run_directory_layout_and_determinism() {
        let tmp = tempfile::tempdir().unwrap();
        let data = crate::synth::shapes_dataset(8, 32, 2).unwrap();
        let (ir, vi) = pilots(tmp.path(), &data);
        let cfg = config(ir, vi, 2);
        let a = train_joint(&cfg, &data, &tmp.path().join("a")).unwrap();
        let b = train_joint(&cfg, &data, &tmp.path().join("b")).unwrap();
        assert_eq!(a.steps, 4);
        for f in [CONFIG_FILE, LOSS_LOG, "weights_ir.csv", "weights_vi.csv"] {
            assert!(a.run_dir.join(f).is_file(), "{f}");
        }
        for f in ["ir_branch.safetensors", "selection_ir.json", "selection_vi.json"] {
            assert!(a.run_dir.join("pilots").join(f).is_file(), "{f}");
        }
        for f in [INITIAL_CHECKPOINT, BEST_CHECKPOINT, LAST_CHECKPOINT, "model.json"] {
            assert!(a.run_dir.join("checkpoints").join(f).is_file(), "{f}");
        }
        assert_eq!(std::fs::read_dir(a.run_dir.join("samples")).unwrap().count(), 1);
        let read = |o: &TrainOutcome| std::fs::read_to_string(o.run_dir.join(LOSS_LOG)).unwrap();
        assert_eq!(read(&a), read(&b));
        assert_eq!(read(&a).lines().count(), 5);
        // Every row satisfies the breakdown identities.
        for line in read(&a).lines().skip(1) {
            let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
            assert!((v[3] - (0.1 * v[1] + v[2])).abs() < 1e-6 * v[3].abs().max(1.0));
            assert!((v[6] - (v[3] + v[4] + v[5])).abs() < 1e-6 * v[6].abs().max(1.0));
        }
    }

    #[test]
    fn zero_epochs_writes_initial_checkpoint_only() {
        let tmp = tempfile::tempdir().unwrap();
        let data = crate::synth::shapes_dataset(4, 32, 3).unwrap();
        let (ir, vi) = pilots(tmp.path(), &data);
        let out = train_joint(&config(ir, vi, 0), &data, &tmp.path().join("run")).unwrap();
        assert_eq!(out.steps, 0);
        let ckpts: Vec<String> = std::fs::read_dir(out.run_dir.join("checkpoints"))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".safetensors"))
            .collect();
        assert_eq!(ckpts, vec![INITIAL_CHECKPOINT.to_string()]);
        let log = std::fs::read_to_string(out.run_dir.join(LOSS_LOG)).unwrap();
        assert_eq!(log, format!("{}\n", LossBreakdown::CSV_HEADER));
    }

    #[test]
    fn missing_pilots_are_reported() {
        let tmp = tempfile::tempdir().unwrap();
        let data = crate::synth::shapes_dataset(2, 32, 3).unwrap();
        let mut cfg = TrainConfig {
            model: crate::model::tests::tiny_config(),
            patch_size: 32,
            stride: 32,
            ..Default::default()
        };
        let err = train_joint(&cfg, &data, tmp.path()).unwrap_err();
        assert!(err.is_usage() && err.to_string().contains("pilot"));
        cfg.pilot_ir = Some(PilotArtifacts {
            checkpoint: tmp.path().join("nope.safetensors"),
            selection: tmp.path().join("nope.json"),
        });
        cfg.pilot_vi = cfg.pilot_ir.clone();
        let err = train_joint(&cfg, &data, tmp.path()).unwrap_err();
        assert!(err.to_string().contains("nope.safetensors"));
    }

    #[test]
    fn fuse_round_trips_dims_and_is_reproducible() {
        let tmp = tempfile::tempdir().unwrap();
        let data = crate::synth::shapes_dataset(4, 32, 4).unwrap();
        let (ir, vi) = pilots(tmp.path(), &data);
        let out = train_joint(&config(ir, vi, 1), &data, &tmp.path().join("run")).unwrap();
        // Odd-sized input exercises the pad/crop path.
        let odd = crate::synth::shapes_pair("odd", 40, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let odd = ImagePair::new(
            "odd",
            odd.infrared.crop(0, 0, 37, 29),
            odd.visible.crop(0, 0, 37, 29),
            None,
        )
        .unwrap();
        let pairs = vec![odd, data[0].clone()];
        let r1 = fuse_inference(&out.last_checkpoint, &pairs, &tmp.path().join("f1"), false).unwrap();
        fuse_inference(&out.last_checkpoint, &pairs, &tmp.path().join("f2"), true).unwrap();
        fuse_inference(&out.last_checkpoint, &pairs, &tmp.path().join("f3"), false).unwrap();
        assert_eq!(r1.timings.len(), 2);
        let img = crate::data::load_gray(&tmp.path().join("f1/odd.png")).unwrap();
        assert_eq!(img.dims(), (37, 29));
        let rgb = crate::data::load_rgb(&tmp.path().join("f2/odd.png")).unwrap();
        assert_eq!(rgb.dims(), (37, 29));
        for id in ["odd", &pairs[1].id] {
            let a = std::fs::read(tmp.path().join(format!("f1/{id}.png"))).unwrap();
            let b = std::fs::read(tmp.path().join(format!("f3/{id}.png"))).unwrap();
            assert_eq!(a, b);
        }
        let csv = std::fs::read_to_string(tmp.path().join("f1").join(TIMING_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("mean,"));
    }
}
