use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use priorfuse_core::data::{
    crop_patches, load_labels, load_pair, load_rgb, scan_dataset, split_dir, to_luma_chroma, ImagePair,
    PairRef, PatchGridSpec, Split,
};
use priorfuse_core::encoder::Modality;
use priorfuse_core::freqprobe::{probe_fusion_inputs, profiles_csv, ratios_csv};
use priorfuse_core::metrics::{evaluate_fusion, fusion_csv, seg_csv, SegAccumulator};
use priorfuse_core::model::JointModel;
use priorfuse_core::pilot::{run_pilot, select_significant, trajectory_file};
use priorfuse_core::rfam::WeightTrajectory;
use priorfuse_core::trainer::{fuse_inference, fusion_inputs_of, train_joint, PilotArtifacts};

use crate::config::RunConfigFile;
use crate::{EvalArgs, Failure, FreqArgs, FuseArgs, PilotArgs, SelectArgs, TrainArgs};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SEGMENTATION_FILE: &str = "segmentation.csv";
pub const PROFILES_FILE: &str = "profiles.csv";
pub const RATIOS_FILE: &str = "ratios.csv";
pub const EFFECTIVE_CONFIG: &str = "run_config.json";

fn runtime(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

/// Creates `dir`, refusing a non-empty one unless `force`.
fn fresh_dir(dir: &Path, force: bool) -> Result<(), Failure> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Failure::Usage(format!("{} is not a directory", dir.display())));
        }
        let occupied = std::fs::read_dir(dir)
            .map_err(|e| runtime(dir, e))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(Failure::Usage(format!(
                "{} is not empty; pass --force to write into it",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| runtime(dir, e))
}

fn fresh_file(path: &Path, force: bool) -> Result<(), Failure> {
    if path.exists() && !force {
        return Err(Failure::Usage(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| runtime(parent, e))?;
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} not found", path.display())))
    }
}

fn require_dir(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} not found", path.display())))
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| runtime(path, e))
}

fn save_effective(cfg: &RunConfigFile, dir: &Path) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(cfg).map_err(|e| Failure::Runtime(e.to_string()))?;
    write_text(&dir.join(EFFECTIVE_CONFIG), &(text + "\n"))
}

fn load_all(refs: &[PairRef]) -> Result<Vec<ImagePair>, Failure> {
    refs.iter().map(|r| load_pair(r).map_err(Failure::from)).collect()
}

/// Training pairs of `root`, each required to carry labels.
fn labeled_train_pairs(root: &Path) -> Result<Vec<ImagePair>, Failure> {
    let labels = split_dir(root, Split::Train).join("labels");
    require_dir(&labels, "labels directory")?;
    let refs = scan_dataset(root, Split::Train)?;
    if let Some(r) = refs.iter().find(|r| r.label.is_none()) {
        return Err(Failure::Usage(format!(
            "no label for {} in {}",
            r.id,
            labels.display()
        )));
    }
    load_all(&refs)
}

pub fn pilot(a: PilotArgs) -> Result<(), Failure> {
    let mut cfg = RunConfigFile::load(a.common.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.pilot.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        cfg.pilot.epochs = epochs;
    }
    cfg.pilot.validate()?;
    let root = cfg.data_root(a.data.as_deref())?;
    let pairs = labeled_train_pairs(&root)?;
    fresh_dir(&a.out, a.common.force)?;

    let spec = PatchGridSpec::new(cfg.train.patch_size, cfg.train.stride);
    let mut patches = Vec::new();
    for pair in &pairs {
        patches.extend(crop_patches(pair, &spec)?);
    }
    let modality = Modality::from(a.modality);
    log::info!(
        "{modality} pilot: {} patches from {} pairs, {} epochs",
        patches.len(),
        pairs.len(),
        cfg.pilot.epochs
    );
    cfg.data = Some(root);
    save_effective(&cfg, &a.out)?;
    let outcome = run_pilot(modality, &patches, &cfg.pilot, &a.out)?;
    println!("checkpoint {}", outcome.checkpoint.display());
    println!("trajectory {}", outcome.trajectory_csv.display());
    println!("best miou {:.4} (epoch {})", outcome.best_miou, outcome.best_epoch);
    Ok(())
}

fn modality_from_name(path: &Path) -> Option<Modality> {
    let name = path.file_name()?.to_str()?;
    Modality::ALL.into_iter().find(|&m| name == trajectory_file(m))
}

pub fn select(a: SelectArgs) -> Result<(), Failure> {
    let cfg = RunConfigFile::load(a.common.config.as_deref())?;
    let mut rule = cfg.selection;
    if let Some(tau) = a.tau {
        rule.tau = tau;
    }
    if let Some(k) = a.k_min {
        rule.k_min = k;
    }
    if let Some(k) = a.k_max {
        rule.k_max = k;
    }
    rule.validate()?;
    require_file(&a.trajectory, "trajectory")?;
    let modality = match a.modality {
        Some(m) => Modality::from(m),
        None => modality_from_name(&a.trajectory).ok_or_else(|| {
            Failure::Usage(format!(
                "cannot tell the modality of {}; pass --modality",
                a.trajectory.display()
            ))
        })?,
    };
    fresh_file(&a.out, a.common.force)?;
    let trajectory = WeightTrajectory::read_csv(&a.trajectory, modality)?;
    let mut selection = select_significant(&trajectory, rule)?;
    selection.source = Some(a.trajectory.display().to_string());
    selection.write(&a.out)?;
    let names: Vec<String> = selection
        .entries
        .iter()
        .map(|e| format!("{}{}", e.stream.letter(), e.scale))
        .collect();
    println!("{modality} selection: {}", names.join(" "));
    Ok(())
}

fn artifacts(
    checkpoint: Option<PathBuf>,
    selection: Option<PathBuf>,
    configured: Option<PilotArtifacts>,
    modality: &str,
) -> Result<Option<PilotArtifacts>, Failure> {
    match (checkpoint, selection, configured) {
        (Some(checkpoint), Some(selection), _) => Ok(Some(PilotArtifacts { checkpoint, selection })),
        (Some(checkpoint), None, Some(c)) => Ok(Some(PilotArtifacts {
            checkpoint,
            selection: c.selection,
        })),
        (None, Some(selection), Some(c)) => Ok(Some(PilotArtifacts {
            checkpoint: c.checkpoint,
            selection,
        })),
        (None, None, c) => Ok(c),
        _ => Err(Failure::Usage(format!(
            "--{modality}-checkpoint and --{modality}-selection must be given together"
        ))),
    }
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = RunConfigFile::load(a.common.config.as_deref())?;
    let t = &mut cfg.train;
    t.pilot_ir = artifacts(a.ir_checkpoint, a.ir_selection, t.pilot_ir.take(), "ir")?;
    t.pilot_vi = artifacts(a.vi_checkpoint, a.vi_selection, t.pilot_vi.take(), "vi")?;
    if let Some(seed) = a.seed {
        t.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        t.epochs = epochs;
    }
    if a.max_steps.is_some() {
        t.max_steps = a.max_steps;
    }
    t.validate()?;
    for (m, p) in [("ir", &t.pilot_ir), ("vi", &t.pilot_vi)] {
        let p = p.as_ref().ok_or_else(|| {
            Failure::Usage(format!(
                "no {m} pilot artifacts; run `priorfuse pilot --modality {m}` and `priorfuse select`, then pass --{m}-checkpoint and --{m}-selection"
            ))
        })?;
        require_file(&p.checkpoint, &format!("{m} pilot checkpoint"))?;
        require_file(&p.selection, &format!("{m} selection"))?;
    }
    let root = cfg.data_root(a.data.as_deref())?;
    let pairs = labeled_train_pairs(&root)?;
    fresh_dir(&a.out, a.common.force)?;
    log::info!("joint training on {} pairs", pairs.len());
    let outcome = train_joint(&cfg.train, &pairs, &a.out)?;
    println!("steps {}", outcome.steps);
    if let Some(last) = &outcome.last {
        println!("last l_total {:.6}", last.l_total);
    }
    println!("best checkpoint {}", outcome.best_checkpoint.display());
    println!("last checkpoint {}", outcome.last_checkpoint.display());
    Ok(())
}

fn single_pair(ir: &Path, vi: &Path) -> Result<PairRef, Failure> {
    require_file(ir, "infrared image")?;
    require_file(vi, "visible image")?;
    let id = ir
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Failure::Usage(format!("bad file name {}", ir.display())))?;
    Ok(PairRef {
        id: id.to_string(),
        infrared: ir.to_path_buf(),
        visible: vi.to_path_buf(),
        label: None,
    })
}

pub fn fuse(a: FuseArgs) -> Result<(), Failure> {
    let cfg = RunConfigFile::load(a.common.config.as_deref())?;
    require_file(&a.checkpoint, "checkpoint")?;
    let refs = match (&a.ir, &a.vi) {
        (Some(ir), Some(vi)) => vec![single_pair(ir, vi)?],
        _ => {
            let root = cfg.data_root(a.data.as_deref())?;
            scan_dataset(&root, a.split.into())?
        }
    };
    let pairs = load_all(&refs)?;
    fresh_dir(&a.out, a.common.force)?;
    let report = fuse_inference(&a.checkpoint, &pairs, &a.out, a.rgb || cfg.rgb)?;
    println!(
        "fused {} pairs into {} (mean {:.4} s)",
        report.timings.len(),
        a.out.display(),
        report.mean_seconds
    );
    Ok(())
}

fn png_stems(dir: &Path) -> Result<BTreeSet<String>, Failure> {
    let mut ids = BTreeSet::new();
    for entry in std::fs::read_dir(dir).map_err(|e| runtime(dir, e))? {
        let path = entry.map_err(|e| runtime(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.insert(stem.to_string());
            }
        }
    }
    Ok(ids)
}

fn mismatch(what: &str, expected: &BTreeSet<String>, found: &BTreeSet<String>) -> Option<String> {
    let missing: Vec<&str> = expected.difference(found).map(String::as_str).collect();
    (!missing.is_empty()).then(|| format!("{what} missing ids: {}", missing.join(", ")))
}

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    let cfg = RunConfigFile::load(a.common.config.as_deref())?;
    require_dir(&a.fused, "fused directory")?;
    if let Some(p) = &a.predictions {
        require_dir(p, "predictions directory")?;
    }
    let root = cfg.data_root(a.data.as_deref())?;
    let refs = scan_dataset(&root, a.split.into())?;
    let sources: BTreeSet<String> = refs.iter().map(|r| r.id.clone()).collect();
    let fused = png_stems(&a.fused)?;
    let problems: Vec<String> = [
        mismatch("fused", &sources, &fused),
        mismatch("source", &fused, &sources),
    ]
    .into_iter()
    .flatten()
    .collect();
    if !problems.is_empty() {
        return Err(Failure::Usage(problems.join("; ")));
    }
    if let Some(p) = &a.predictions {
        if let Some(m) = mismatch("predictions", &sources, &png_stems(p)?) {
            return Err(Failure::Usage(m));
        }
        if let Some(r) = refs.iter().find(|r| r.label.is_none()) {
            return Err(Failure::Usage(format!("no ground-truth label for {}", r.id)));
        }
    }
    fresh_dir(&a.out, a.common.force)?;

    let classes = a.classes.unwrap_or(cfg.pilot.model.num_classes);
    let mut seg = SegAccumulator::new(classes);
    let mut records = Vec::with_capacity(refs.len());
    for r in &refs {
        let pair = load_pair(r)?;
        let image = load_rgb(&a.fused.join(format!("{}.png", r.id)))?;
        let y = to_luma_chroma(&image).y;
        if y.dims() != pair.dims() {
            return Err(Failure::Usage(format!(
                "{}: fused {:?} vs source {:?}",
                r.id,
                y.dims(),
                pair.dims()
            )));
        }
        records.push(evaluate_fusion(&r.id, &y, &pair.infrared, &pair.visible_luma())?);
        if let Some(p) = &a.predictions {
            let pred = load_labels(&p.join(format!("{}.png", r.id)))?;
            let gt = pair.label.as_ref().expect("labels checked");
            if pred.dims() != gt.dims() {
                return Err(Failure::Usage(format!("{}: prediction size differs from label", r.id)));
            }
            seg.add(&pred.data, &gt.data)?;
        }
    }
    write_text(&a.out.join(METRICS_FILE), &fusion_csv(&records))?;
    println!("wrote {}", a.out.join(METRICS_FILE).display());
    if a.predictions.is_some() {
        let score = seg.score()?;
        write_text(&a.out.join(SEGMENTATION_FILE), &seg_csv(&score))?;
        println!("miou {:.4}", score.miou);
    }
    Ok(())
}

pub fn freq(a: FreqArgs) -> Result<(), Failure> {
    RunConfigFile::load(a.common.config.as_deref())?;
    require_file(&a.checkpoint, "checkpoint")?;
    let pair_ref = single_pair(&a.ir, &a.vi)?;
    if a.bins == 0 {
        return Err(Failure::Usage("--bins must be >= 1".into()));
    }
    if !(a.cutoff > 0.0 && a.cutoff <= 1.0) {
        return Err(Failure::Usage(format!("--cutoff {} must be in (0, 1]", a.cutoff)));
    }
    fresh_dir(&a.out, a.common.force)?;
    let model = JointModel::load(&a.checkpoint)?;
    let pair = load_pair(&pair_ref)?;
    let inputs = fusion_inputs_of(&model, &pair)?;
    let (profiles, ratios) = probe_fusion_inputs(&inputs, a.bins, a.cutoff)?;
    write_text(&a.out.join(PROFILES_FILE), &profiles_csv(&profiles))?;
    write_text(&a.out.join(RATIOS_FILE), &ratios_csv(&ratios))?;
    for (tag, r) in &ratios {
        println!("{tag} {r:.4}");
    }
    Ok(())
}
