//! Network assembly: per-modality segmentation branches (dual-stream encoder
//! plus RFaM head) and the joint network that adds the fusion branch.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{ImagePair, Plane};
use crate::encoder::{
    refine, DualStreamEncoder, EncoderConfig, FeaturePyramid, Modality, Stream,
};
use crate::error::{Error, Result};
use crate::mraf::{extract_hfd, FusionEntry, FusionInputs, FusionOutput, Mraf};
use crate::nn;
use crate::pilot::SignificantFeatureSelection;
use crate::rfam::{check_simplex, Rfam, RfamOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub encoder: EncoderConfig,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            num_classes: 9,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(2..255).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must be in 2..255, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BranchOutput {
    pub global: FeaturePyramid,
    pub local: FeaturePyramid,
    pub seg: RfamOutput,
}

/// One modality's encoder and segmentation head; parameters live under
/// `<modality>.`.
#[derive(Debug)]
pub struct Branch {
    pub modality: Modality,
    pub encoder: DualStreamEncoder,
    pub rfam: Rfam,
}

impl Branch {
    pub fn new(cfg: &ModelConfig, modality: Modality, vb: VarBuilder) -> Result<Self> {
        let vb = vb.pp(modality.as_str());
        Ok(Self {
            modality,
            encoder: DualStreamEncoder::new(&cfg.encoder, modality, vb.clone())?,
            rfam: Rfam::new(cfg.num_classes, vb.pp("rfam"))?,
        })
    }

    /// `x` is `(B, 1, H, W)` with `H, W` multiples of 16.
    pub fn forward(&self, x: &Tensor) -> Result<BranchOutput> {
        let (global, local) = self.encoder.forward(x)?;
        let refined = global
            .maps
            .iter()
            .chain(&local.maps)
            .map(refine)
            .collect::<Result<Vec<_>>>()?;
        let seg = self.rfam.aggregate(&refined)?;
        Ok(BranchOutput { global, local, seg })
    }
}

#[derive(Debug, Clone)]
pub struct JointOutput {
    pub ir: BranchOutput,
    pub vi: BranchOutput,
    pub inputs: FusionInputs,
    pub fusion: FusionOutput,
}

/// Both branches plus the fusion branch (`mraf.`), wired by the pilot
/// selections.
#[derive(Debug)]
pub struct FusionNet {
    pub ir: Branch,
    pub vi: Branch,
    pub mraf: Mraf,
    selections: [SignificantFeatureSelection; 2],
}

impl FusionNet {
    pub fn new(
        cfg: &ModelConfig,
        selection_ir: &SignificantFeatureSelection,
        selection_vi: &SignificantFeatureSelection,
        vb: VarBuilder,
    ) -> Result<Self> {
        for (sel, m) in [(selection_ir, Modality::Ir), (selection_vi, Modality::Vi)] {
            sel.validate()?;
            if sel.modality != m {
                return Err(Error::Config(format!(
                    "expected a {m} selection, got {}",
                    sel.modality
                )));
            }
        }
        let ch = cfg.encoder.channels;
        let mut entries: Vec<FusionEntry> = [selection_ir, selection_vi]
            .iter()
            .flat_map(|sel| {
                sel.entries.iter().map(|e| FusionEntry {
                    modality: sel.modality,
                    stream: e.stream,
                    scale: e.scale,
                    channels: ch[e.scale - 1],
                })
            })
            .collect();
        for (modality, stream) in [
            (Modality::Ir, Stream::Local),
            (Modality::Vi, Stream::Local),
            (Modality::Ir, Stream::Global),
            (Modality::Vi, Stream::Global),
        ] {
            entries.push(FusionEntry {
                modality,
                stream,
                scale: 1,
                channels: ch[0],
            });
        }
        Ok(Self {
            ir: Branch::new(cfg, Modality::Ir, vb.clone())?,
            vi: Branch::new(cfg, Modality::Vi, vb.clone())?,
            mraf: Mraf::new(entries, vb.pp("mraf"))?,
            selections: [selection_ir.clone(), selection_vi.clone()],
        })
    }

    pub fn selections(&self) -> &[SignificantFeatureSelection; 2] {
        &self.selections
    }

    pub fn fusion_inputs(&self, ir: &BranchOutput, vi: &BranchOutput) -> Result<FusionInputs> {
        let mut ssf = Vec::new();
        for (sel, out) in self.selections.iter().zip([ir, vi]) {
            for e in &sel.entries {
                let pyramid = match e.stream {
                    Stream::Global => &out.global,
                    Stream::Local => &out.local,
                };
                ssf.push(pyramid.level(e.scale).clone());
            }
        }
        let hfd = extract_hfd((&ir.global, &ir.local), (&vi.global, &vi.local))?;
        Ok(FusionInputs { ssf, hfd })
    }

    /// `ir` and `vi` are `(B, 1, H, W)` luminance batches.
    pub fn forward(&self, ir: &Tensor, vi: &Tensor) -> Result<JointOutput> {
        if ir.dims() != vi.dims() {
            return Err(Error::Shape(format!(
                "infrared {:?} vs visible {:?}",
                ir.dims(),
                vi.dims()
            )));
        }
        let ir_out = self.ir.forward(ir)?;
        let vi_out = self.vi.forward(vi)?;
        let inputs = self.fusion_inputs(&ir_out, &vi_out)?;
        let fusion = self.mraf.fuse(&inputs)?;
        Ok(JointOutput {
            ir: ir_out,
            vi: vi_out,
            inputs,
            fusion,
        })
    }

    /// Effective RFaM (ir, vi) and MRaF weights, each checked against the
    /// simplex constraint.
    pub fn checked_weights(&self) -> Result<[Vec<f64>; 3]> {
        let ir = self.ir.rfam.weights.effective_values()?;
        let vi = self.vi.rfam.weights.effective_values()?;
        let fu = self.mraf.weights.effective_values()?;
        check_simplex(&ir, "ir RFaM weights")?;
        check_simplex(&vi, "vi RFaM weights")?;
        check_simplex(&fu, "MRaF weights")?;
        Ok([ir, vi, fu])
    }
}

/// A single branch with its parameter store, as trained by a pilot run.
pub struct BranchModel {
    pub varmap: VarMap,
    pub branch: Branch,
    pub config: ModelConfig,
}

impl BranchModel {
    pub fn new(config: &ModelConfig, modality: Modality, seed: u64) -> Result<Self> {
        config.validate()?;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
        let branch = Branch::new(config, modality, vb)?;
        nn::reseed(&varmap, seed)?;
        Ok(Self {
            varmap,
            branch,
            config: config.clone(),
        })
    }

    pub fn prefix(&self) -> String {
        format!("{}.", self.branch.modality)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.varmap, &self.prefix(), path)
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        checkpoint::load(&self.varmap, &self.prefix(), path)
    }
}

/// Everything needed to rebuild a joint network before loading its weights;
/// stored next to joint checkpoints as `model.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub model: ModelConfig,
    pub selection_ir: SignificantFeatureSelection,
    pub selection_vi: SignificantFeatureSelection,
}

impl JointSpec {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

pub const MODEL_SPEC_FILE: &str = "model.json";

pub struct JointModel {
    pub varmap: VarMap,
    pub net: FusionNet,
    pub spec: JointSpec,
}

impl JointModel {
    pub fn new(spec: JointSpec, seed: u64) -> Result<Self> {
        spec.model.validate()?;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
        let net = FusionNet::new(&spec.model, &spec.selection_ir, &spec.selection_vi, vb)?;
        nn::reseed(&varmap, seed)?;
        Ok(Self { varmap, net, spec })
    }

    /// Writes `path` plus `model.json` beside it.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.varmap, "", path)?;
        self.spec.write(&spec_path(path))
    }

    /// Rebuilds the network described by the `model.json` next to `path` and
    /// loads its weights.
    pub fn load(path: &Path) -> Result<Self> {
        let sp = spec_path(path);
        if !sp.exists() {
            return Err(Error::Checkpoint(format!(
                "missing {} next to {}",
                MODEL_SPEC_FILE,
                path.display()
            )));
        }
        let model = Self::new(JointSpec::read(&sp)?, 0)?;
        checkpoint::load(&model.varmap, "", path)?;
        Ok(model)
    }
}

fn spec_path(checkpoint: &Path) -> std::path::PathBuf {
    checkpoint.with_file_name(MODEL_SPEC_FILE)
}

/// Infrared and visible-luma tensors `(B, 1, H, W)` plus row-major labels when
/// every pair has them.
pub struct Batch {
    pub ir: Tensor,
    pub vi: Tensor,
    pub labels: Option<Vec<u8>>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&ImagePair]) -> Result<Self> {
        let dev = Device::Cpu;
        let ir: Vec<&Plane> = pairs.iter().map(|p| &p.infrared).collect();
        let luma: Vec<Plane> = pairs.iter().map(|p| p.visible_luma()).collect();
        let vi: Vec<&Plane> = luma.iter().collect();
        let labels = pairs
            .iter()
            .map(|p| p.label.as_ref().map(|l| l.data.clone()))
            .collect::<Option<Vec<_>>>()
            .map(|v| v.concat());
        Ok(Self {
            ir: nn::planes_to_tensor(&ir, &dev)?,
            vi: nn::planes_to_tensor(&vi, &dev)?,
            labels,
        })
    }

    pub fn input(&self, modality: Modality) -> &Tensor {
        match modality {
            Modality::Ir => &self.ir,
            Modality::Vi => &self.vi,
        }
    }
}
