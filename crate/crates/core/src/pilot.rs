//! Pilot segmentation runs (one modality, segmentation loss only) and the
//! selection of significant semantic features from their weight trajectories.

use std::path::{Path, PathBuf};

use candle_core::DType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{split_validation, ImagePair};
use crate::encoder::{Modality, Stream};
use crate::error::{Error, Result};
use crate::losses::{argmax_labels, ohem_ce, OhemParams};
use crate::metrics::SegAccumulator;
use crate::model::{Batch, Branch, BranchModel, ModelConfig};
use crate::optim::{AdamConfig, Optimizer};
use crate::rfam::{stacking_order, WeightTrajectory, ENTRIES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionRule {
    pub tau: f64,
    pub k_min: usize,
    pub k_max: usize,
}

impl Default for SelectionRule {
    fn default() -> Self {
        Self {
            tau: 0.6,
            k_min: 1,
            k_max: 3,
        }
    }
}

impl SelectionRule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.k_min < 1 || self.k_min > self.k_max || self.k_max > ENTRIES {
            return Err(Error::Config(format!(
                "need 1 <= k_min <= k_max <= {ENTRIES}, got k_min={} k_max={}",
                self.k_min, self.k_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectedEntry {
    pub stream: Stream,
    pub scale: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignificantFeatureSelection {
    pub modality: Modality,
    pub rule: SelectionRule,
    pub entries: Vec<SelectedEntry>,
    pub final_weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl SignificantFeatureSelection {
    pub fn validate(&self) -> Result<()> {
        self.rule.validate()?;
        if self.entries.is_empty() || self.entries.len() > self.rule.k_max {
            return Err(Error::Config(format!(
                "{} selection has {} entries, expected 1..={}",
                self.modality,
                self.entries.len(),
                self.rule.k_max
            )));
        }
        for (k, e) in self.entries.iter().enumerate() {
            if !(1..=crate::encoder::LEVELS).contains(&e.scale) {
                return Err(Error::Config(format!("scale {} out of range", e.scale)));
            }
            if self.entries[..k].contains(e) {
                return Err(Error::Config(format!(
                    "duplicate entry {}{}",
                    e.stream.letter(),
                    e.scale
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let sel: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        sel.validate()?;
        Ok(sel)
    }
}

/// Picks the significant entries from final weights: the shortest prefix of the
/// descending order whose mass reaches `tau`, clipped to `[k_min, k_max]`. Ties
/// keep stacking order (global before local, shallow first).
pub fn select_from_weights(
    modality: Modality,
    weights: &[f64],
    rule: SelectionRule,
) -> Result<SignificantFeatureSelection> {
    rule.validate()?;
    if weights.len() != ENTRIES {
        return Err(Error::Invalid(format!(
            "expected {ENTRIES} weights, got {}",
            weights.len()
        )));
    }
    let mut order: Vec<usize> = (0..ENTRIES).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]));
    let mut mass = 0.0;
    let mut k = ENTRIES;
    if rule.tau <= 0.0 {
        k = 0;
    } else {
        for (n, &i) in order.iter().enumerate() {
            mass += weights[i];
            if mass >= rule.tau {
                k = n + 1;
                break;
            }
        }
    }
    let k = k.clamp(rule.k_min, rule.k_max);
    let stack = stacking_order();
    Ok(SignificantFeatureSelection {
        modality,
        rule,
        entries: order[..k]
            .iter()
            .map(|&i| SelectedEntry {
                stream: stack[i].0,
                scale: stack[i].1,
            })
            .collect(),
        final_weights: weights.to_vec(),
        source: None,
    })
}

pub fn select_significant(
    trajectory: &WeightTrajectory,
    rule: SelectionRule,
) -> Result<SignificantFeatureSelection> {
    let (_, last) = trajectory
        .last()
        .ok_or_else(|| Error::Invalid("trajectory is empty".into()))?;
    select_from_weights(trajectory.modality, last, rule)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PilotConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub ohem: OhemParams,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for PilotConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 100,
            batch_size: 20,
            optimizer: AdamConfig::default(),
            ohem: OhemParams::default(),
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl PilotConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

pub const PILOT_CHECKPOINT: &str = "branch.safetensors";
pub const PILOT_LOG: &str = "pilot.csv";

pub fn trajectory_file(modality: Modality) -> String {
    format!("weights_{modality}.csv")
}

#[derive(Debug, Clone)]
pub struct PilotOutcome {
    pub trajectory: WeightTrajectory,
    pub checkpoint: PathBuf,
    pub trajectory_csv: PathBuf,
    pub best_miou: f64,
    pub best_epoch: usize,
}

fn require_labels(patches: &[ImagePair], num_classes: usize) -> Result<()> {
    if patches.is_empty() {
        return Err(Error::Dataset("no training patches".into()));
    }
    for p in patches {
        match &p.label {
            None => return Err(Error::Dataset(format!("{} has no labels", p.id))),
            Some(l) => l.validate(num_classes)?,
        }
    }
    Ok(())
}

/// Mean IoU of `model` over `pairs`, evaluated in batches.
pub fn evaluate_miou(
    branch: &Branch,
    pairs: &[ImagePair],
    num_classes: usize,
    batch_size: usize,
) -> Result<f64> {
    let mut acc = SegAccumulator::new(num_classes);
    for chunk in pairs.chunks(batch_size.max(1)) {
        let refs: Vec<&ImagePair> = chunk.iter().collect();
        let batch = Batch::from_pairs(&refs)?;
        let out = branch.forward(batch.input(branch.modality))?;
        let pred = argmax_labels(&out.seg.logits)?;
        let gt = batch
            .labels
            .ok_or_else(|| Error::Dataset("evaluation pairs need labels".into()))?;
        acc.add(&pred, &gt)?;
    }
    Ok(acc.score()?.miou)
}

/// Trains one modality's branch with the OHEM segmentation loss alone,
/// recording the effective RFaM weights after every epoch (1-based) and keeping
/// the checkpoint with the best validation mIoU. Writes `branch.safetensors`,
/// `weights_<modality>.csv` and `pilot.csv` (`epoch,loss,miou`) under `out_dir`.
pub fn run_pilot(
    modality: Modality,
    patches: &[ImagePair],
    config: &PilotConfig,
    out_dir: &Path,
) -> Result<PilotOutcome> {
    config.validate()?;
    require_labels(patches, config.model.num_classes)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let (train, val) = split_validation(patches, config.val_fraction, config.seed);
    let val = if val.is_empty() { train.clone() } else { val };
    let model = BranchModel::new(&config.model, modality, config.seed)?;
    let mut opt = Optimizer::new(&model.varmap, &model.prefix(), config.optimizer, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_b10c);

    let checkpoint = out_dir.join(PILOT_CHECKPOINT);
    let trajectory_csv = out_dir.join(trajectory_file(modality));
    let mut trajectory = WeightTrajectory::new(modality);
    let mut log = String::from("epoch,loss,miou\n");
    let mut best = (f64::NEG_INFINITY, 0usize);

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&ImagePair> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = Batch::from_pairs(&refs)?;
            let labels = batch.labels.as_deref().expect("labels checked");
            let out = model.branch.forward(batch.input(modality))?;
            let loss = ohem_ce(&out.seg.logits, labels, &config.ohem)?.loss;
            loss_sum += loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            batches += 1;
            opt.backward_step(&loss)?;
        }
        let weights = model.branch.rfam.weights.effective_values()?;
        trajectory.record(epoch, &weights)?;
        let miou = evaluate_miou(&model.branch, &val, config.model.num_classes, config.batch_size)?;
        log.push_str(&format!("{epoch},{:.9e},{miou:.9e}\n", loss_sum / batches as f64));
        log::info!(
            "pilot {modality} epoch {epoch}: loss {:.4} miou {miou:.4}",
            loss_sum / batches as f64
        );
        if miou > best.0 {
            best = (miou, epoch);
            model.save(&checkpoint)?;
        }
        trajectory.write_csv(&trajectory_csv)?;
    }
    if config.epochs == 0 {
        model.save(&checkpoint)?;
        trajectory.write_csv(&trajectory_csv)?;
    }
    let log_path = out_dir.join(PILOT_LOG);
    std::fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;
    Ok(PilotOutcome {
        trajectory,
        checkpoint,
        trajectory_csv,
        best_miou: best.0.max(0.0),
        best_epoch: best.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn picks(sel: &SignificantFeatureSelection) -> Vec<(char, usize)> {
        sel.entries
            .iter()
            .map(|e| (e.stream.letter(), e.scale))
            .collect()
    }

    #[test]
    fn cumulative_mass_prefix() {
        let w = [0.40, 0.30, 0.10, 0.05, 0.05, 0.04, 0.03, 0.03];
        let sel = select_from_weights(Modality::Ir, &w, SelectionRule::default()).unwrap();
        assert_eq!(picks(&sel), vec![('g', 1), ('g', 2)]);
    }

    #[test]
    fn uniform_is_clipped_in_stacking_order() {
        let sel =
            select_from_weights(Modality::Vi, &[0.125; 8], SelectionRule::default()).unwrap();
        assert_eq!(picks(&sel), vec![('g', 1), ('g', 2), ('g', 3)]);
    }

    #[test]
    fn one_hot_gives_single_entry() {
        let mut w = [1e-9; 8];
        w[6] = 1.0 - 7e-9;
        let sel = select_from_weights(Modality::Ir, &w, SelectionRule::default()).unwrap();
        assert_eq!(picks(&sel), vec![('l', 3)]);
    }

    #[test]
    fn extreme_tau_values() {
        let w = [0.2, 0.1, 0.15, 0.05, 0.1, 0.2, 0.1, 0.1];
        let all = SelectionRule {
            tau: 1.0,
            ..Default::default()
        };
        assert_eq!(select_from_weights(Modality::Ir, &w, all).unwrap().entries.len(), 3);
        let none = SelectionRule {
            tau: 0.0,
            ..Default::default()
        };
        let sel = select_from_weights(Modality::Ir, &w, none).unwrap();
        assert_eq!(picks(&sel), vec![('g', 1)]);
    }

    #[test]
    fn json_round_trip_and_rejects_unknown_keys() {
        let sel = select_from_weights(Modality::Ir, &[0.125; 8], SelectionRule::default()).unwrap();
        let back: SignificantFeatureSelection = serde_json::from_str(&sel.to_json().unwrap()).unwrap();
        assert_eq!(back, sel);
        let text = sel.to_json().unwrap().replacen('{', "{\"extra\": 1,", 1);
        assert!(serde_json::from_str::<SignificantFeatureSelection>(&text).is_err());
    }

    #[test]
    fn empty_trajectory_is_an_error() {
        let t = WeightTrajectory::new(Modality::Ir);
        assert!(select_significant(&t, SelectionRule::default()).is_err());
    }

    fn toy_config(epochs: usize) -> PilotConfig {
        PilotConfig {
            model: crate::model::tests::tiny_config(),
            epochs,
            batch_size: 4,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn two_epoch_run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let data = crate::synth::shapes_dataset(10, 32, 1).unwrap();
        let out = run_pilot(Modality::Ir, &data, &toy_config(2), dir.path()).unwrap();
        assert_eq!(out.trajectory.len(), 2);
        assert!(out.checkpoint.exists());
        let back = WeightTrajectory::read_csv(&out.trajectory_csv, Modality::Ir).unwrap();
        assert_eq!(back, out.trajectory);
    }

    #[test]
    fn pilot_is_deterministic() {
        let data = crate::synth::shapes_dataset(6, 32, 2).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_pilot(Modality::Vi, &data, &toy_config(2), a.path()).unwrap();
        run_pilot(Modality::Vi, &data, &toy_config(2), b.path()).unwrap();
        for f in [trajectory_file(Modality::Vi).as_str(), PILOT_LOG, PILOT_CHECKPOINT] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn missing_labels_are_rejected() {
        let mut data = crate::synth::shapes_dataset(3, 32, 2).unwrap();
        data[1].label = None;
        let dir = tempfile::tempdir().unwrap();
        let err = run_pilot(Modality::Ir, &data, &toy_config(1), dir.path()).unwrap_err();
        assert!(matches!(err, Error::Dataset(_)));
    }

    proptest! {
        #[test]
        fn size_within_bounds_and_unique(
            quarters in proptest::collection::vec(-16i32..16, 8),
            tau in 0.0f64..=1.0,
            k_min in 1usize..=3,
            extra in 0usize..=5,
            shift_q in -40i32..40,
        ) {
            // Quarter-integer logits keep the shifted softmax bit-identical.
            let logits: Vec<f64> = quarters.iter().map(|&q| q as f64 / 4.0).collect();
            let shift = shift_q as f64 / 4.0;
            let rule = SelectionRule { tau, k_min, k_max: (k_min + extra).min(8) };
            let w = crate::rfam::normalize_weights(&logits).unwrap();
            let sel = select_from_weights(Modality::Ir, &w, rule).unwrap();
            prop_assert!(sel.entries.len() >= rule.k_min && sel.entries.len() <= rule.k_max);
            sel.validate().unwrap();
            // Every chosen weight is at least every unchosen one.
            let stack = stacking_order();
            let chosen: Vec<usize> = sel.entries.iter()
                .map(|e| stack.iter().position(|&(s, i)| s == e.stream && i == e.scale).unwrap())
                .collect();
            for i in 0..8 {
                if !chosen.contains(&i) {
                    for &c in &chosen {
                        prop_assert!(w[c] >= w[i]);
                    }
                }
            }
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let w2 = crate::rfam::normalize_weights(&shifted).unwrap();
            let sel2 = select_from_weights(Modality::Ir, &w2, rule).unwrap();
            prop_assert_eq!(sel2.entries, sel.entries);
        }
    }
}
