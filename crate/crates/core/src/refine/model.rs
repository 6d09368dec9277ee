use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::arch::{Batch, LossKind, Network};
use crate::cluster::{assign_cluster, ClusterModel};
use crate::error::{Error, Result};
use crate::features::{build_branch_inputs, BranchInput, FeatureParams};
use crate::filtering::FilterParams;
use crate::geometry::{NormalField, PointCloud, Vec3};
use crate::nn::{Mode, ParamStore, Tape};
use crate::spatial::SpatialIndex;
use crate::substream;

const MAGIC: &[u8; 4] = b"NFRM";
pub const MODEL_VERSION: u32 = 1;

/// Points per forward pass during prediction.
const PREDICT_CHUNK: usize = 256;

/// A trained refiner: input layout, cluster centers and one network per cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineModel {
    pub filter: FilterParams,
    pub features: FeatureParams,
    pub network: Network,
    pub lambda: f64,
    pub loss: LossKind,
    /// Seed of the patch downsampling used to build inputs.
    pub seed: u64,
    pub cluster: ClusterModel,
    pub nets: Vec<ParamStore>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    filter: FilterParams,
    features: FeatureParams,
    network: Network,
    lambda: f64,
    loss: LossKind,
    seed: u64,
    cluster: ClusterModel,
}

impl RefineModel {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.network.branches != self.filter.branch_count() || self.network.m != self.features.m || self.network.max_pts != self.features.max_pts {
            return Err(Error::Format("network input layout disagrees with filter and feature parameters".into()));
        }
        if self.cluster.len() != self.nets.len() || self.nets.is_empty() {
            return Err(Error::Format(format!("{} cluster centers but {} networks", self.cluster.len(), self.nets.len())));
        }
        if self.cluster.dim() != 3 * self.network.branches {
            return Err(Error::DimensionMismatch { expected: 3 * self.network.branches, actual: self.cluster.dim() });
        }
        Ok(())
    }

    /// `NFRM`, format version, JSON header, then each cluster's parameters.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: MODEL_VERSION,
            filter: self.filter.clone(),
            features: self.features.clone(),
            network: self.network.clone(),
            lambda: self.lambda,
            loss: self.loss,
            seed: self.seed,
            cluster: self.cluster.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.nets.len() as u32).to_le_bytes());
        for net in &self.nets {
            out.extend_from_slice(&net.to_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let take = |at: usize, n: usize| bytes.get(at..at + n).ok_or_else(|| Error::Format("truncated model file".into()));
        if take(0, 4)? != MAGIC {
            return Err(Error::Format("not a model file".into()));
        }
        let version = u32::from_le_bytes(take(4, 4)?.try_into().unwrap());
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let len = u64::from_le_bytes(take(8, 8)?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(take(16, len)?)?;
        let mut at = 16 + len;
        let count = u32::from_le_bytes(take(at, 4)?.try_into().unwrap()) as usize;
        at += 4;
        let mut nets = Vec::with_capacity(count);
        for _ in 0..count {
            let (store, used) = ParamStore::from_bytes(&bytes[at..])?;
            nets.push(store);
            at += used;
        }
        if at != bytes.len() {
            return Err(Error::Format("trailing bytes after model".into()));
        }
        let model = Self {
            filter: header.filter,
            features: header.features,
            network: header.network,
            lambda: header.lambda,
            loss: header.loss,
            seed: header.seed,
            cluster: header.cluster,
            nets,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Normalized network outputs in each point's canonical frame.
pub fn predict_local(model: &RefineModel, inputs: &[BranchInput]) -> Result<Vec<Vec3>> {
    model.validate()?;
    let ids = inputs.par_iter().map(|b| assign_cluster(&model.cluster, &b.frame.feature())).collect::<Result<Vec<usize>>>()?;
    let mut jobs = Vec::new();
    for c in 0..model.nets.len() {
        let members: Vec<usize> = (0..inputs.len()).filter(|&i| ids[i] == c).collect();
        jobs.extend(members.chunks(PREDICT_CHUNK).map(|chunk| (c, chunk.to_vec())));
    }
    let outputs = jobs
        .par_iter()
        .map(|(c, chunk)| {
            let refs: Vec<&BranchInput> = chunk.iter().map(|&i| &inputs[i]).collect();
            let batch = Batch::new(&refs, &model.network)?;
            let mut tape = Tape::new();
            // Eval mode draws no random numbers.
            let out = model.network.forward(&mut tape, &model.nets[*c], &batch, Mode::Eval, &mut substream(0, 0))?;
            let value = tape.value(out);
            (0..chunk.len())
                .map(|r| {
                    let row = value.row(r);
                    let v = Vec3::new(row[0], row[1], row[2]);
                    let n = v.norm();
                    if !(n >= 1e-12) || !n.is_finite() {
                        return Err(Error::ZeroVector);
                    }
                    Ok(v / n)
                })
                .collect::<Result<Vec<Vec3>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut result = vec![Vec3::zeros(); inputs.len()];
    for ((_, chunk), out) in jobs.iter().zip(outputs) {
        for (&i, v) in chunk.iter().zip(out) {
            result[i] = v;
        }
    }
    Ok(result)
}

/// Unit world-frame normals for a set of point bundles.
pub fn predict_normals(model: &RefineModel, inputs: &[BranchInput]) -> Result<Vec<Vec3>> {
    let local = predict_local(model, inputs)?;
    Ok(inputs.iter().zip(local).map(|(b, n)| b.frame.to_world(&n).normalize()).collect())
}

pub fn predict_normal(model: &RefineModel, input: &BranchInput) -> Result<Vec3> {
    Ok(predict_normals(model, std::slice::from_ref(input))?[0])
}

/// Filters `initial`, builds every point's inputs and predicts refined normals.
pub fn refine_field(cloud: &PointCloud, initial: &NormalField, model: &RefineModel) -> Result<NormalField> {
    if initial.len() != cloud.len() {
        return Err(Error::LengthMismatch { left: cloud.len(), right: initial.len() });
    }
    let index = SpatialIndex::build(cloud.points());
    let inputs = build_branch_inputs(cloud, &index, initial, &model.filter, &model.features, model.seed)?;
    Ok(NormalField(predict_normals(model, &inputs)?))
}
