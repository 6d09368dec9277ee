use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::arch::{ArchSpec, Batch, ConnectionKind, LossKind, Network};
use super::model::RefineModel;
use crate::cluster::kmeans_cluster;
use crate::error::{Error, Result};
use crate::features::{build_branch_inputs, BranchInput, FeatureParams};
use crate::filtering::{canonicalize, FilterParams};
use crate::geometry::{NormalField, PointCloud, Vec3};
use crate::nn::{apply_running_updates, sgd_step, Mode, ParamStore, Tape, Tensor};
use crate::spatial::SpatialIndex;
use crate::substream;

/// Network inputs of one point with its ground truth in the same frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub input: BranchInput,
    /// Unit ground-truth normal, canonicalized like the input normals.
    pub gt: Vec3,
}

/// Builds one sample per point of a cloud with ground-truth normals.
pub fn make_samples(cloud: &PointCloud, initial: &NormalField, filter: &FilterParams, features: &FeatureParams, seed: u64) -> Result<Vec<TrainSample>> {
    let gt = cloud.gt_normals().ok_or_else(|| Error::InvalidCloud(format!("`{}` has no ground-truth normals", cloud.name())))?;
    let index = SpatialIndex::build(cloud.points());
    let inputs = build_branch_inputs(cloud, &index, initial, filter, features, seed)?;
    inputs
        .into_iter()
        .zip(gt)
        .map(|(input, g)| {
            let n = g.norm();
            if n < 1e-12 {
                return Err(Error::ZeroVector);
            }
            let gt = canonicalize(&input.frame, &(g / n));
            Ok(TrainSample { input, gt })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Number of k-means clusters, one network each.
    pub clusters: usize,
    pub kmeans_iters: usize,
    /// Weight of the squared-weight regularizer.
    pub lambda: f64,
    pub loss: LossKind,
    pub conn1: ConnectionKind,
    pub conn2: ConnectionKind,
    pub arch: ArchSpec,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 512,
            epochs: 200,
            clusters: 4,
            kmeans_iters: 100,
            lambda: 0.02,
            loss: LossKind::L2,
            conn1: ConnectionKind::WeightMatrix { p: 64 },
            conn2: ConnectionKind::WeightMatrix { p: 64 },
            arch: ArchSpec::full(),
        }
    }
}

impl TrainParams {
    /// Small network and fast schedule for single-core runs.
    pub fn desk() -> Self {
        Self {
            lr: 0.05,
            batch: 64,
            clusters: 2,
            conn1: ConnectionKind::WeightMatrix { p: 16 },
            conn2: ConnectionKind::WeightMatrix { p: 16 },
            arch: ArchSpec::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || self.batch == 0 || self.clusters == 0 || !(self.lambda >= 0.0) {
            return Err(Error::InvalidParams("training needs lr >= 0, lambda >= 0, batch >= 1 and at least one cluster".into()));
        }
        self.arch.validate()
    }
}

/// Mean training loss per epoch; entry 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Sample-weighted over all clusters.
    pub history: Vec<f64>,
    pub per_cluster: Vec<Vec<f64>>,
    pub cluster_sizes: Vec<usize>,
}

/// Clusters the samples by canonical normals and fits one network per
/// cluster with minibatch SGD.
pub fn train(samples: &[TrainSample], filter: &FilterParams, features: &FeatureParams, params: &TrainParams, seed: u64) -> Result<(RefineModel, TrainLog)> {
    params.validate()?;
    filter.validate()?;
    features.validate()?;
    if samples.len() < params.clusters {
        return Err(Error::NotEnoughSamples { needed: params.clusters, got: samples.len() });
    }
    let network = Network {
        arch: params.arch.clone(),
        conn1: params.conn1,
        conn2: params.conn2,
        branches: filter.branch_count(),
        max_pts: features.max_pts,
        m: features.m,
    };
    network.validate()?;
    let feats: Vec<Vec<f64>> = samples.iter().map(|s| s.input.frame.feature()).collect();
    let cluster = kmeans_cluster(&feats, params.clusters, &mut substream(seed, 1), params.kmeans_iters)?;
    let groups: Vec<Vec<usize>> = (0..params.clusters).map(|c| (0..samples.len()).filter(|&i| cluster.assignments[i] == c).collect()).collect();
    info!("training {} clusters of sizes {:?}", params.clusters, groups.iter().map(Vec::len).collect::<Vec<_>>());
    let fitted = groups
        .par_iter()
        .enumerate()
        .map(|(c, members)| fit_cluster(&network, samples, members, params, seed, c as u64))
        .collect::<Result<Vec<_>>>()?;
    let (nets, per_cluster): (Vec<ParamStore>, Vec<Vec<f64>>) = fitted.into_iter().unzip();
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let history = (0..=params.epochs)
        .map(|e| per_cluster.iter().zip(&sizes).map(|(h, &n)| h[e] * n as f64).sum::<f64>() / samples.len() as f64)
        .collect();
    let model = RefineModel {
        filter: filter.clone(),
        features: features.clone(),
        network,
        lambda: params.lambda,
        loss: params.loss,
        seed,
        cluster,
        nets,
    };
    Ok((model, TrainLog { history, per_cluster, cluster_sizes: sizes }))
}

fn batch_of(samples: &[TrainSample], idx: &[usize], network: &Network) -> Result<(Batch, Tensor)> {
    let refs: Vec<&BranchInput> = idx.iter().map(|&i| &samples[i].input).collect();
    let target = idx.iter().flat_map(|&i| {
        let g = samples[i].gt;
        [g.x, g.y, g.z]
    });
    Ok((Batch::new(&refs, network)?, Tensor::new(vec![idx.len(), 3], target.collect())?))
}

fn fit_cluster(network: &Network, samples: &[TrainSample], members: &[usize], params: &TrainParams, seed: u64, c: u64) -> Result<(ParamStore, Vec<f64>)> {
    let mut store = network.init(&mut substream(seed, 100 + c))?;
    if members.is_empty() {
        return Ok((store, vec![0.0; params.epochs + 1]));
    }
    let mut rng = substream(seed, 200 + c);
    let n = members.len() as f64;
    let mut history = Vec::with_capacity(params.epochs + 1);
    // Loss of the untrained network, batched like an epoch but without updates.
    let mut total = 0.0;
    for idx in members.chunks(params.batch) {
        let (batch, target) = batch_of(samples, idx, network)?;
        let mut tape = Tape::new();
        let loss = network.loss(&mut tape, &store, &batch, &target, params.lambda, params.loss, Mode::Train, &mut substream(seed, 300 + c))?;
        total += tape.value(loss).data[0] * idx.len() as f64;
    }
    history.push(total / n);
    let mut order = members.to_vec();
    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(params.batch) {
            let (batch, target) = batch_of(samples, idx, network)?;
            let mut tape = Tape::new();
            let loss = network.loss(&mut tape, &store, &batch, &target, params.lambda, params.loss, Mode::Train, &mut rng)?;
            total += tape.value(loss).data[0] * idx.len() as f64;
            let grads = tape.backward(loss, None).params(&tape, &store);
            sgd_step(&mut store, &grads, params.lr)?;
            apply_running_updates(&mut store, tape.running_updates());
        }
        history.push(total / n);
        debug!("cluster {c} epoch {} loss {:.6}", epoch + 1, total / n);
    }
    if params.epochs > 0 {
        recalibrate(network, samples, members, &mut store)?;
    }
    Ok((store, history))
}

/// Replaces the batch-norm running averages with statistics of the whole
/// cluster under the final weights, so evaluation sees the training
/// distribution rather than averages lagging behind the last updates.
fn recalibrate(network: &Network, samples: &[TrainSample], members: &[usize], store: &mut ParamStore) -> Result<()> {
    let mut plain = network.clone();
    plain.arch.keep = 1.0;
    let (batch, _) = batch_of(samples, members, &plain)?;
    let mut tape = Tape::new();
    plain.forward(&mut tape, store, &batch, Mode::Train, &mut substream(0, 0))?;
    for u in tape.running_updates() {
        store.value_mut(u.mean_id).data.clone_from(&u.mean);
        store.value_mut(u.var_id).data.clone_from(&u.var);
    }
    Ok(())
}
