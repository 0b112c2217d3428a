//! Expert and apprentice feature extractors, feature normalization and the
//! pixel-wise discrepancy between the two domains.

mod checkpoint;
pub mod hrnet;
pub mod params;
pub mod resnet;
pub mod toy;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var, D};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::Checkpoint;
pub use params::ParamStore;

use crate::error::{Error, Result};
use crate::perturbation::partition_pixels;

/// Guard for the per-location channel norm.
pub const NORM_EPS: f32 = 1e-12;

/// Seed of the stand-in "pretrained" toy expert. The toy expert has no
/// external weight file; its parameters are re-derived from this seed.
pub const TOY_EXPERT_SEED: u64 = 0x5eed_e4e7;

/// Environment variable naming the directory of pretrained expert weights.
pub const WEIGHTS_DIR_ENV: &str = "CDO_WEIGHTS_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneId {
    Toy,
    Hr18,
    Hr32,
    Hr48,
    Res18,
    Res34,
    Res50,
    Wres50,
}

impl BackboneId {
    pub const ALL: [BackboneId; 8] = [
        BackboneId::Toy,
        BackboneId::Hr18,
        BackboneId::Hr32,
        BackboneId::Hr48,
        BackboneId::Res18,
        BackboneId::Res34,
        BackboneId::Res50,
        BackboneId::Wres50,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BackboneId::Toy => "toy",
            BackboneId::Hr18 => "hr18",
            BackboneId::Hr32 => "hr32",
            BackboneId::Hr48 => "hr48",
            BackboneId::Res18 => "res18",
            BackboneId::Res34 => "res34",
            BackboneId::Res50 => "res50",
            BackboneId::Wres50 => "wres50",
        }
    }

    /// Name of the matching timm model, which is also the weight file stem.
    pub fn pretrained_source(self) -> &'static str {
        match self {
            BackboneId::Toy => "toy-seeded",
            BackboneId::Hr18 => "hrnet_w18",
            BackboneId::Hr32 => "hrnet_w32",
            BackboneId::Hr48 => "hrnet_w48",
            BackboneId::Res18 => "resnet18",
            BackboneId::Res34 => "resnet34",
            BackboneId::Res50 => "resnet50",
            BackboneId::Wres50 => "wide_resnet50_2",
        }
    }

    pub fn levels(self) -> std::ops::RangeInclusive<usize> {
        match self {
            BackboneId::Toy => 1..=3,
            _ => 0..=4,
        }
    }

    pub fn channels(self, level: usize) -> usize {
        match self {
            BackboneId::Toy => toy::WIDTHS[level - 1],
            BackboneId::Hr18 | BackboneId::Hr32 | BackboneId::Hr48 => hrnet::CHANNELS[level],
            BackboneId::Res18 => resnet::Variant::R18.channels()[level],
            BackboneId::Res34 => resnet::Variant::R34.channels()[level],
            BackboneId::Res50 => resnet::Variant::R50.channels()[level],
            BackboneId::Wres50 => resnet::Variant::WideR50.channels()[level],
        }
    }

    /// Spatial stride of a hierarchy level relative to the input.
    pub fn stride(self, level: usize) -> usize {
        match self {
            BackboneId::Toy => 1 << level,
            _ => 1 << (level + 1),
        }
    }

    pub fn validate_hierarchies(self, hierarchies: &[usize]) -> Result<()> {
        let ok = !hierarchies.is_empty()
            && hierarchies.windows(2).all(|w| w[0] < w[1])
            && hierarchies.iter().all(|h| self.levels().contains(h));
        if ok {
            Ok(())
        } else {
            Err(Error::invalid_config(
                "hierarchies",
                format!(
                    "a non-empty strictly increasing list within {:?} for backbone {}",
                    self.levels(),
                    self.name()
                ),
            ))
        }
    }
}

impl fmt::Display for BackboneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BackboneId::ALL
            .into_iter()
            .find(|b| b.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::invalid_config("backbone", "one of toy, hr18, hr32, hr48, res18, res34, res50, wres50")
            })
    }
}

/// Multi-level feature extractor; index `i` of the output is hierarchy `i`,
/// `None` where a level is not computed.
pub trait Backbone: Send + Sync {
    fn forward_levels(&self, xs: &Tensor, train: bool) -> candle_core::Result<Vec<Option<Tensor>>>;
}

fn build_net(backbone: BackboneId, max_level: usize, vb: candle_nn::VarBuilder) -> Result<Box<dyn Backbone>> {
    use hrnet::{HrNet, Width};
    use resnet::{ResNet, Variant};
    Ok(match backbone {
        BackboneId::Toy => Box::new(toy::ToyNet::new(max_level, vb)?),
        BackboneId::Hr18 => Box::new(HrNet::new(Width::W18, max_level, vb)?),
        BackboneId::Hr32 => Box::new(HrNet::new(Width::W32, max_level, vb)?),
        BackboneId::Hr48 => Box::new(HrNet::new(Width::W48, max_level, vb)?),
        BackboneId::Res18 => Box::new(ResNet::new(Variant::R18, max_level, vb)?),
        BackboneId::Res34 => Box::new(ResNet::new(Variant::R34, max_level, vb)?),
        BackboneId::Res50 => Box::new(ResNet::new(Variant::R50, max_level, vb)?),
        BackboneId::Wres50 => Box::new(ResNet::new(Variant::WideR50, max_level, vb)?),
    })
}

fn select_levels(all: Vec<Option<Tensor>>, hierarchies: &[usize]) -> Result<Vec<Tensor>> {
    hierarchies
        .iter()
        .map(|&h| {
            all.get(h)
                .cloned()
                .flatten()
                .ok_or_else(|| Error::InvalidArgument(format!("hierarchy {h} was not computed")))
        })
        .collect()
}

/// Per-hierarchy feature maps, each `B x C_i x H_i x W_i`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub hierarchies: Vec<usize>,
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.levels.iter().map(|t| t.dims().to_vec()).collect()
    }

    /// The pyramid of one image of the batch.
    pub fn image(&self, index: usize) -> Result<FeaturePyramid> {
        Ok(FeaturePyramid {
            hierarchies: self.hierarchies.clone(),
            levels: self
                .levels
                .iter()
                .map(|t| t.narrow(0, index, 1))
                .collect::<candle_core::Result<_>>()?,
        })
    }
}

fn hash_params<'a>(params: impl Iterator<Item = (&'a String, &'a Tensor)>) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in params {
        hasher.update(name.as_bytes());
        for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Frozen pretrained extractor.
pub struct ExpertModel {
    backbone: BackboneId,
    hierarchies: Vec<usize>,
    params: BTreeMap<String, Tensor>,
    net: Box<dyn Backbone>,
}

impl ExpertModel {
    /// Loads the named pretrained weights. Non-toy backbones read
    /// `<weights_dir>/<timm name>.safetensors`, with `weights_dir` falling back
    /// to `$CDO_WEIGHTS_DIR`.
    pub fn pretrained(
        backbone: BackboneId,
        hierarchies: &[usize],
        weights_dir: Option<&Path>,
        device: &Device,
    ) -> Result<Self> {
        if backbone == BackboneId::Toy {
            return ExpertModel::seeded(backbone, hierarchies, TOY_EXPERT_SEED, device);
        }
        let dir = weights_dir
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(WEIGHTS_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("weights"));
        let path = dir.join(format!("{}.safetensors", backbone.pretrained_source()));
        if !path.is_file() {
            return Err(Error::MissingWeights {
                backbone: backbone.name().to_string(),
                path,
                hint: format!(
                    "export the ImageNet weights of timm model `{0}` with \
                     `safetensors.torch.save_file(timm.create_model('{0}', pretrained=True).state_dict(), '{0}.safetensors')` \
                     and point ${WEIGHTS_DIR_ENV} at the containing directory",
                    backbone.pretrained_source()
                ),
            });
        }
        let tensors = candle_core::safetensors::load(&path, device)?;
        ExpertModel::from_params(backbone, hierarchies, tensors, device)
    }

    /// Expert with seeded random weights. This is how the toy expert is
    /// defined; for the real backbones it only serves shape checks.
    pub fn seeded(backbone: BackboneId, hierarchies: &[usize], seed: u64, device: &Device) -> Result<Self> {
        backbone.validate_hierarchies(hierarchies)?;
        let store = ParamStore::seeded(seed);
        build_net(backbone, max_level(hierarchies), store.var_builder(device))?;
        let params = store.snapshot()?.into_iter().collect();
        ExpertModel::from_params(backbone, hierarchies, params, device)
    }

    pub fn from_params(
        backbone: BackboneId,
        hierarchies: &[usize],
        params: HashMap<String, Tensor>,
        device: &Device,
    ) -> Result<Self> {
        backbone.validate_hierarchies(hierarchies)?;
        // Build once through a store to learn which tensors the net uses,
        // then rebuild on plain (non-variable) tensors.
        let store = ParamStore::from_tensors(params);
        build_net(backbone, max_level(hierarchies), store.var_builder(device))?;
        let used: BTreeMap<String, Tensor> = store
            .snapshot()?
            .into_iter()
            .map(|(k, v)| Ok((k, v.detach())))
            .collect::<Result<_>>()?;
        let vb = candle_nn::VarBuilder::from_tensors(
            used.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            DType::F32,
            device,
        );
        let net = build_net(backbone, max_level(hierarchies), vb)?;
        Ok(ExpertModel {
            backbone,
            hierarchies: hierarchies.to_vec(),
            params: used,
            net,
        })
    }

    pub fn backbone(&self) -> BackboneId {
        self.backbone
    }

    pub fn hierarchies(&self) -> &[usize] {
        &self.hierarchies
    }

    /// Inference-mode forward; the returned features carry no gradient.
    pub fn forward(&self, xs: &Tensor) -> Result<FeaturePyramid> {
        let all = self.net.forward_levels(xs, false)?;
        let levels = select_levels(all, &self.hierarchies)?
            .into_iter()
            .map(|t| t.detach())
            .collect();
        Ok(FeaturePyramid {
            hierarchies: self.hierarchies.clone(),
            levels,
        })
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|t| t.elem_count()).sum()
    }

    /// SHA-256 over parameter names and values.
    pub fn param_hash(&self) -> Result<String> {
        hash_params(self.params.iter())
    }
}

/// Trainable extractor mirroring the expert's tapped hierarchies.
pub struct ApprenticeModel {
    backbone: BackboneId,
    hierarchies: Vec<usize>,
    store: ParamStore,
    net: Box<dyn Backbone>,
}

impl ApprenticeModel {
    /// Fan-in Kaiming initialization drawn from `seed`.
    pub fn random(backbone: BackboneId, hierarchies: &[usize], seed: u64, device: &Device) -> Result<Self> {
        backbone.validate_hierarchies(hierarchies)?;
        let store = ParamStore::seeded(seed);
        let net = build_net(backbone, max_level(hierarchies), store.var_builder(device))?;
        Ok(ApprenticeModel {
            backbone,
            hierarchies: hierarchies.to_vec(),
            store,
            net,
        })
    }

    pub fn from_params(
        backbone: BackboneId,
        hierarchies: &[usize],
        params: HashMap<String, Tensor>,
        device: &Device,
    ) -> Result<Self> {
        backbone.validate_hierarchies(hierarchies)?;
        let store = ParamStore::from_tensors(params);
        let net = build_net(backbone, max_level(hierarchies), store.var_builder(device))?;
        Ok(ApprenticeModel {
            backbone,
            hierarchies: hierarchies.to_vec(),
            store,
            net,
        })
    }

    pub fn backbone(&self) -> BackboneId {
        self.backbone
    }

    pub fn hierarchies(&self) -> &[usize] {
        &self.hierarchies
    }

    /// `train` switches normalization layers to batch statistics.
    pub fn forward(&self, xs: &Tensor, train: bool) -> Result<FeaturePyramid> {
        let all = self.net.forward_levels(xs, train)?;
        Ok(FeaturePyramid {
            hierarchies: self.hierarchies.clone(),
            levels: select_levels(all, &self.hierarchies)?,
        })
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.store.trainable()
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        Ok(self.store.snapshot()?)
    }

    pub fn scalar_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn param_hash(&self) -> Result<String> {
        let snap = self.snapshot()?;
        hash_params(snap.iter())
    }
}

fn max_level(hierarchies: &[usize]) -> usize {
    hierarchies.iter().copied().max().unwrap_or(0)
}

/// Scales every channel vector to unit Euclidean norm; the norm is floored
/// at [`NORM_EPS`], so all-zero vectors stay zero.
pub fn normalize_features(pyramid: &FeaturePyramid) -> Result<FeaturePyramid> {
    let levels = pyramid
        .levels
        .iter()
        .map(|t| {
            // The inner EPS^2 keeps the sqrt gradient finite at zero.
            let norm = (t.sqr()?.sum_keepdim(1)? + (NORM_EPS as f64).powi(2))?
                .sqrt()?
                .maximum(NORM_EPS)?;
            t.broadcast_div(&norm)
        })
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok(FeaturePyramid {
        hierarchies: pyramid.hierarchies.clone(),
        levels,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscrepancyMode {
    /// `sum_c (e_c - a_c)^2`, in `[0, 4]` for unit vectors.
    #[default]
    Squared,
    /// `||e - a||_2`, in `[0, 2]` for unit vectors.
    Norm,
}

/// Per-level discrepancy maps, each `B x H_i x W_i`, with an optional
/// feature-level partition (1 = synthetic-abnormal cell).
#[derive(Debug, Clone)]
pub struct DiscrepancyField {
    pub hierarchies: Vec<usize>,
    pub levels: Vec<Tensor>,
    pub partition: Option<Vec<Array3<u8>>>,
}

pub fn discrepancy(
    expert_hat: &FeaturePyramid,
    apprentice_hat: &FeaturePyramid,
    mode: DiscrepancyMode,
) -> Result<DiscrepancyField> {
    if expert_hat.len() != apprentice_hat.len() {
        return Err(Error::ShapeMismatch {
            level: expert_hat.len().min(apprentice_hat.len()),
            expert: vec![expert_hat.len()],
            apprentice: vec![apprentice_hat.len()],
        });
    }
    let mut levels = Vec::with_capacity(expert_hat.len());
    for (i, (e, a)) in expert_hat.levels.iter().zip(&apprentice_hat.levels).enumerate() {
        if e.dims() != a.dims() {
            return Err(Error::ShapeMismatch {
                level: expert_hat.hierarchies.get(i).copied().unwrap_or(i),
                expert: e.dims().to_vec(),
                apprentice: a.dims().to_vec(),
            });
        }
        let sq = (e - a)?.sqr()?.sum(1)?;
        levels.push(match mode {
            DiscrepancyMode::Squared => sq,
            DiscrepancyMode::Norm => sq.maximum(1e-24)?.sqrt()?,
        });
    }
    Ok(DiscrepancyField {
        hierarchies: expert_hat.hierarchies.clone(),
        levels,
        partition: None,
    })
}

impl DiscrepancyField {
    /// Attaches the feature-level partition derived from per-image
    /// input-resolution masks.
    pub fn with_partition(mut self, masks: &[Array2<u8>]) -> Result<Self> {
        let mut partition = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            let (b, h, w) = level.dims3()?;
            if masks.len() != b {
                return Err(Error::InvalidArgument(format!(
                    "{} masks for a batch of {b}",
                    masks.len()
                )));
            }
            let mut cells = Array3::<u8>::zeros((b, h, w));
            for (i, m) in masks.iter().enumerate() {
                cells
                    .index_axis_mut(ndarray::Axis(0), i)
                    .assign(&partition_pixels(m, (h, w)));
            }
            partition.push(cells);
        }
        self.partition = Some(partition);
        Ok(self)
    }

    /// Level `i` as host maps, one per image.
    pub fn level_maps(&self, i: usize) -> Result<Vec<Array2<f32>>> {
        let (b, h, w) = self.levels[i].dims3()?;
        let flat = self.levels[i].flatten_all()?.to_vec1::<f32>()?;
        Ok((0..b)
            .map(|k| Array2::from_shape_vec((h, w), flat[k * h * w..(k + 1) * h * w].to_vec()).expect("map size"))
            .collect())
    }

    /// All levels concatenated into one vector (level-major, then batch,
    /// then row-major), with the matching synthetic-abnormal flags.
    pub fn flatten(&self) -> Result<(Tensor, Vec<bool>)> {
        let flat: Vec<Tensor> = self
            .levels
            .iter()
            .map(|t| t.flatten_all())
            .collect::<candle_core::Result<_>>()?;
        let d = Tensor::cat(&flat, 0)?;
        let flags = match &self.partition {
            Some(p) => p.iter().flat_map(|a| a.iter().map(|&v| v == 1)).collect(),
            None => vec![false; d.elem_count()],
        };
        Ok((d, flags))
    }

    /// Element ranges of each level inside [`DiscrepancyField::flatten`].
    pub fn level_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.levels
            .iter()
            .map(|t| {
                let r = start..start + t.elem_count();
                start = r.end;
                r
            })
            .collect()
    }
}

/// Mean over the last dimension helper kept for callers that want a
/// per-image scalar from a `B x H x W` map.
pub fn mean_per_image(map: &Tensor) -> Result<Vec<f32>> {
    Ok(map.flatten_from(1)?.mean(D::Minus1)?.to_vec1::<f32>()?)
}

#[cfg(test)]
mod tests;
