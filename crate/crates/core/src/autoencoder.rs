//! Hierarchical point-cloud encoder, vector read-out and conditional patch
//! decoder, with the reconstruction training loop.
//!
//! Each encoder block builds a k-NN graph of its cloud, runs a [`ConvBlock`]
//! and pools to a farthest-point subset. The last pooled cloud with its
//! features is the latent code. The decoder generates a fixed number of
//! points around every latent point from uniform noise and takes the union.

use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::geometry::{
    estimate_density, farthest_point_sampling, knn_graph, DensityEstimate, KnnGraph, PointCloud,
};
use crate::pcconv::{
    conv_onto, Aggregation, ConvBlock, ConvLayer, ConvSpec, DensityMode, NormKind,
};
use crate::seed::{self, Purpose};
use crate::tensor::layers::{Activation, Linear, Mlp};
use crate::tensor::{
    AdamConfig, AdamState, BatchRenormConfig, Forward, Graph, ParamStore, RunningStats, Tensor,
    Var, LEAKY_SLOPE,
};
use crate::transport::{distance_loss, exact_emd, LossConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    /// Output widths of the block's convolution layers.
    pub widths: Vec<usize>,
    pub k: usize,
    /// Fraction of the block's points kept by pooling, in (0, 1].
    pub pool_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    #[default]
    Cloud,
    Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub blocks: Vec<BlockConfig>,
    /// Feature channels carried by input clouds (0 for raw positions).
    pub input_channels: usize,
    pub latent_points: usize,
    pub latent_channels: usize,
    pub readout: Readout,
    pub vector_width: usize,
    pub conv: ConvSpec,
    pub norm: NormKind,
    pub residual: bool,
    pub fps_start: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let block = |widths: Vec<usize>| BlockConfig {
            widths,
            k: 16,
            pool_ratio: 0.5,
        };
        EncoderConfig {
            blocks: vec![block(vec![32]), block(vec![64]), block(vec![13])],
            input_channels: 0,
            latent_points: 32,
            latent_channels: 13,
            readout: Readout::Cloud,
            vector_width: 512,
            conv: ConvSpec::default(),
            norm: NormKind::Layer,
            residual: true,
            fps_start: 0,
        }
    }
}

impl EncoderConfig {
    /// Numbers in the latent code: `M·(C+3)` for a cloud, the vector width
    /// otherwise.
    pub fn latent_budget(&self) -> usize {
        match self.readout {
            Readout::Cloud => self.latent_points * (self.latent_channels + 3),
            Readout::Vector => self.vector_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::invalid("encoder needs at least one block"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.widths.is_empty() || b.widths.contains(&0) {
                return Err(Error::invalid(format!(
                    "block {i} needs positive layer widths"
                )));
            }
            if !(b.pool_ratio > 0.0 && b.pool_ratio <= 1.0) {
                return Err(Error::invalid(format!(
                    "block {i} pool ratio {} outside (0, 1]",
                    b.pool_ratio
                )));
            }
            if b.k == 0 {
                return Err(Error::invalid(format!("block {i} has k = 0")));
            }
        }
        let last = *self
            .blocks
            .last()
            .and_then(|b| b.widths.last())
            .expect("checked");
        if last != self.latent_channels {
            return Err(Error::invalid(format!(
                "last block width {last} differs from latent channels {}",
                self.latent_channels
            )));
        }
        if self.latent_points == 0 {
            return Err(Error::invalid("latent cloud needs at least one point"));
        }
        Ok(())
    }

    /// Point counts entering each block followed by the latent count.
    pub fn pool_sizes(&self, n: usize) -> Vec<usize> {
        let mut sizes = vec![n];
        for b in &self.blocks {
            let last = *sizes.last().expect("non-empty");
            sizes.push(((last as f64 * b.pool_ratio).round() as usize).clamp(1, last));
        }
        sizes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    /// Per-layer affine parameters from the latent feature.
    #[default]
    Adain,
    /// Latent feature appended to the noise input.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub conditioning: Conditioning,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            hidden_layers: 5,
            hidden_width: 64,
            conditioning: Conditioning::Adain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

/// Parameter-independent geometry of one encoder block.
#[derive(Debug, Clone)]
pub struct BlockGeometry {
    pub positions: Vec<[f64; 3]>,
    pub graph: KnnGraph,
    pub density: Option<DensityEstimate>,
    /// Indices kept by pooling, in selection order.
    pub pooled: Vec<usize>,
}

/// Everything the encoder needs that depends on positions alone.
#[derive(Debug, Clone)]
pub struct EncoderGeometry {
    pub blocks: Vec<BlockGeometry>,
    pub latent_positions: Vec<[f64; 3]>,
}

impl EncoderGeometry {
    pub fn new(cloud: &PointCloud, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let sizes = cfg.pool_sizes(cloud.len());
        let m = *sizes.last().expect("non-empty");
        if m != cfg.latent_points {
            return Err(Error::invalid(format!(
                "{} input points pool to {m} latent points, configured {}",
                cloud.len(),
                cfg.latent_points
            )));
        }
        let mut positions = cloud.positions().to_vec();
        let mut blocks = Vec::with_capacity(cfg.blocks.len());
        for (b, &keep) in cfg.blocks.iter().zip(&sizes[1..]) {
            if b.k > positions.len() {
                return Err(Error::invalid(format!(
                    "block with k = {} applied to {} points",
                    b.k,
                    positions.len()
                )));
            }
            let graph = knn_graph(&positions, b.k, true)?;
            let density = match cfg.conv.density {
                DensityMode::Off => None,
                _ => Some(estimate_density(&positions, &graph)?),
            };
            let pooled = if keep == positions.len() {
                (0..keep).collect()
            } else {
                farthest_point_sampling(&positions, keep, cfg.fps_start.min(positions.len() - 1))?
            };
            let next = pooled.iter().map(|&i| positions[i]).collect();
            blocks.push(BlockGeometry {
                positions: std::mem::replace(&mut positions, next),
                graph,
                density,
                pooled,
            });
        }
        Ok(EncoderGeometry {
            blocks,
            latent_positions: positions,
        })
    }
}

/// Single-node convolution onto the origin followed by two dense layers.
#[derive(Debug, Clone)]
pub struct VectorReadout {
    pub conv: ConvLayer,
    pub fc: Mlp,
}

/// Network structure; the parameters live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AutoencoderNet {
    pub cfg: AutoencoderConfig,
    pub blocks: Vec<ConvBlock>,
    pub readout: Option<VectorReadout>,
    pub hidden: Vec<Linear>,
    pub output: Linear,
    /// One network per hidden layer mapping a latent feature to `(y_μ, y_σ)`.
    pub conditioners: Vec<Mlp>,
}

/// Uniform noise on `[-1, 1]³`, one row per generated point.
pub fn patch_noise(seed: u64, rows: usize) -> Tensor {
    let mut rng = seed::stream(seed, Purpose::Noise, 0);
    let data = (0..rows * 3).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    Tensor::new([rows, 3], data).expect("noise shape")
}

fn input_features(cloud: &PointCloud) -> Tensor {
    let c = cloud.channels();
    let mut data = Vec::with_capacity(cloud.len() * (c + 1));
    for i in 0..cloud.len() {
        data.push(1.0);
        data.extend_from_slice(cloud.feature_row(i));
    }
    Tensor::new([cloud.len(), c + 1], data).expect("feature shape")
}

impl AutoencoderNet {
    pub fn new<R: Rng>(
        cfg: &AutoencoderConfig,
        store: &mut ParamStore,
        stats: &mut RunningStats,
        rng: &mut R,
    ) -> Result<Self> {
        let enc = &cfg.encoder;
        enc.validate()?;
        let mut blocks = Vec::new();
        let mut width = enc.input_channels + 1;
        for (i, b) in enc.blocks.iter().enumerate() {
            let block = ConvBlock::new(
                store,
                stats,
                &format!("enc{i}"),
                width,
                &b.widths,
                &enc.conv,
                enc.norm,
                enc.residual,
                rng,
            )?;
            width = block.out_width().expect("validated");
            blocks.push(block);
        }
        let readout = match enc.readout {
            Readout::Cloud => None,
            Readout::Vector => {
                let spec = ConvSpec {
                    aggregation: Aggregation::Sum,
                    density: DensityMode::Off,
                    ..enc.conv.clone()
                };
                let vw = enc.vector_width;
                Some(VectorReadout {
                    conv: ConvLayer::new(store, stats, "readout.conv", width, vw, &spec, rng)?,
                    fc: Mlp::new(
                        store,
                        "readout.fc",
                        &[vw, vw, vw],
                        Activation::LeakyRelu,
                        false,
                        rng,
                    )?,
                })
            }
        };
        let dec = &cfg.decoder;
        if dec.hidden_layers == 0 || dec.hidden_width == 0 {
            return Err(Error::invalid(
                "decoder needs hidden layers of positive width",
            ));
        }
        let (h, c) = (dec.hidden_width, enc.latent_channels);
        let first_in = match dec.conditioning {
            Conditioning::Adain => 3,
            Conditioning::Concat => 3 + c,
        };
        let mut hidden = Vec::new();
        let mut conditioners = Vec::new();
        for l in 0..dec.hidden_layers {
            let fan_in = if l == 0 { first_in } else { h };
            hidden.push(Linear::new(
                store,
                &format!("dec.hidden{l}"),
                fan_in,
                h,
                rng,
            )?);
            if dec.conditioning == Conditioning::Adain {
                let net = Mlp::new(
                    store,
                    &format!("dec.cond{l}"),
                    &[c, h, 2 * h],
                    Activation::LeakyRelu,
                    false,
                    rng,
                )?;
                let out_bias = net.layers.last().expect("two layers").bias;
                store.get_mut(out_bias).data_mut()[h..].fill(1.0);
                conditioners.push(net);
            }
        }
        let output = Linear::new(store, "dec.out", h, 3, rng)?;
        Ok(AutoencoderNet {
            cfg: cfg.clone(),
            blocks,
            readout,
            hidden,
            output,
            conditioners,
        })
    }

    /// Latent features `[M, C]` of `cloud`.
    pub fn encode(
        &self,
        ctx: &mut Forward,
        cloud: &PointCloud,
        geo: &EncoderGeometry,
    ) -> Result<Var> {
        if cloud.channels() != self.cfg.encoder.input_channels {
            return Err(Error::invalid(format!(
                "encoder expects {} feature channels, cloud has {}",
                self.cfg.encoder.input_channels,
                cloud.channels()
            )));
        }
        let mut feats = ctx.g.constant(input_features(cloud));
        for (block, bg) in self.blocks.iter().zip(&geo.blocks) {
            feats = block.forward(ctx, &bg.positions, feats, &bg.graph, bg.density.as_ref())?;
            feats = ctx.g.gather_rows(feats, &bg.pooled)?;
        }
        Ok(feats)
    }

    /// Vector code `[1, vector_width]` of a latent cloud.
    pub fn global_readout(
        &self,
        ctx: &mut Forward,
        positions: &[[f64; 3]],
        feats: Var,
    ) -> Result<Var> {
        let r = self
            .readout
            .as_ref()
            .ok_or_else(|| Error::invalid("encoder configured without a vector read-out"))?;
        let all: Vec<usize> = (0..positions.len()).collect();
        let pooled = conv_onto(
            ctx,
            &r.conv,
            positions,
            feats,
            &[[0.0; 3]],
            &all,
            positions.len(),
            None,
        )?;
        let act = ctx.g.leaky_relu(pooled, LEAKY_SLOPE);
        r.fc.forward(ctx.g, ctx.p, act)
    }

    /// `n` points around every latent point in its local frame, rows grouped
    /// by patch. `noise` is `[M·n, 3]`.
    pub fn decode_local(
        &self,
        ctx: &mut Forward,
        feats: Var,
        n: usize,
        noise: Tensor,
    ) -> Result<Var> {
        let m = ctx.g.shape(feats)[0];
        if n == 0 || noise.shape() != [m * n, 3] {
            return Err(Error::invalid(format!(
                "noise of shape {:?} for {m} patches of {n} points",
                noise.shape()
            )));
        }
        let h = self.cfg.decoder.hidden_width;
        let mut x = ctx.g.constant(noise);
        if self.cfg.decoder.conditioning == Conditioning::Concat {
            let owner: Vec<usize> = (0..m * n).map(|r| r / n).collect();
            let per_point = ctx.g.gather_rows(feats, &owner)?;
            x = ctx.g.concat(&[x, per_point], 1)?;
        }
        for (l, layer) in self.hidden.iter().enumerate() {
            x = layer.forward(ctx.g, ctx.p, x)?;
            if let Some(cond) = self.conditioners.get(l) {
                let y = cond.forward(ctx.g, ctx.p, feats)?;
                let mu = ctx.g.narrow(y, 1, 0, h)?;
                let sigma = ctx.g.narrow(y, 1, h, h)?;
                x = ctx.g.adain(x, mu, sigma, n)?;
            }
            x = ctx.g.leaky_relu(x, LEAKY_SLOPE);
        }
        self.output.forward(ctx.g, ctx.p, x)
    }

    /// Union of the patches translated to their latent points.
    pub fn decode(
        &self,
        ctx: &mut Forward,
        positions: &[[f64; 3]],
        feats: Var,
        n_total: usize,
        seed: u64,
    ) -> Result<Var> {
        let m = positions.len();
        if m == 0 || !n_total.is_multiple_of(m) || n_total == 0 {
            return Err(Error::invalid(format!(
                "{n_total} points cannot be split evenly over {m} latent points"
            )));
        }
        let n = n_total / m;
        let local = self.decode_local(ctx, feats, n, patch_noise(seed, n_total))?;
        let mut offsets = Vec::with_capacity(n_total * 3);
        for p in positions {
            for _ in 0..n {
                offsets.extend_from_slice(p);
            }
        }
        let offsets = ctx.g.constant(Tensor::new([n_total, 3], offsets)?);
        ctx.g.add(local, offsets)
    }
}

/// Parameters, running statistics and structure of one auto-encoder.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub net: AutoencoderNet,
    pub store: ParamStore,
    pub stats: RunningStats,
}

impl Autoencoder {
    pub fn new(cfg: &AutoencoderConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut stats = RunningStats::new(BatchRenormConfig::default());
        let mut rng = seed::stream(seed, Purpose::Init, 0);
        let net = AutoencoderNet::new(cfg, &mut store, &mut stats, &mut rng)?;
        Ok(Autoencoder { net, store, stats })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.net.cfg
    }

    pub fn latent_budget(&self) -> usize {
        self.net.cfg.encoder.latent_budget()
    }

    /// Evaluation uses running statistics once training has produced them.
    fn eval<T>(&self, f: impl FnOnce(&mut Forward, &AutoencoderNet) -> Result<T>) -> Result<T> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let mut stats = self.stats.clone();
        let train = stats.iter().any(|(_, s)| s.updates == 0);
        let mut ctx = Forward {
            g: &mut g,
            p: &p,
            stats: &mut stats,
            train,
        };
        f(&mut ctx, &self.net)
    }

    /// Latent cloud: pooled positions with `C` feature channels.
    pub fn encode(&self, cloud: &PointCloud) -> Result<PointCloud> {
        let geo = EncoderGeometry::new(cloud, &self.net.cfg.encoder)?;
        let feats = self.eval(|ctx, net| {
            let v = net.encode(ctx, cloud, &geo)?;
            Ok(ctx.g.value(v).clone())
        })?;
        PointCloud::with_features(
            geo.latent_positions,
            feats.into_data(),
            self.net.cfg.encoder.latent_channels,
        )
    }

    pub fn encode_vector(&self, cloud: &PointCloud) -> Result<Vec<f64>> {
        let geo = EncoderGeometry::new(cloud, &self.net.cfg.encoder)?;
        self.eval(|ctx, net| {
            let feats = net.encode(ctx, cloud, &geo)?;
            let v = net.global_readout(ctx, &geo.latent_positions, feats)?;
            Ok(ctx.g.value(v).data().to_vec())
        })
    }

    pub fn decode(&self, latent: &PointCloud, n_total: usize, seed: u64) -> Result<PointCloud> {
        if latent.channels() != self.net.cfg.encoder.latent_channels {
            return Err(Error::invalid(format!(
                "latent cloud has {} channels, decoder expects {}",
                latent.channels(),
                self.net.cfg.encoder.latent_channels
            )));
        }
        let out = self.eval(|ctx, net| {
            let feats = ctx.g.constant(latent.features_tensor());
            let v = net.decode(ctx, latent.positions(), feats, n_total, seed)?;
            Ok(ctx.g.value(v).clone())
        })?;
        PointCloud::from_joint(&out)
    }

    pub fn reconstruct(&self, cloud: &PointCloud, seed: u64) -> Result<PointCloud> {
        let latent = self.encode(cloud)?;
        self.decode(&latent, cloud.len(), seed)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push_params("param.", &self.store);
        c.push_stats("stats.", &self.stats);
        c
    }

    /// Model built from `cfg` with parameters and statistics from `ckpt`.
    pub fn from_checkpoint(cfg: &AutoencoderConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Autoencoder::new(cfg, 0)?;
        ckpt.load_params("param.", &mut model.store)?;
        ckpt.load_stats("stats.", &mut model.stats)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeTrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub seed: u64,
    /// Record elapsed seconds in the log; off keeps logs byte-reproducible.
    pub log_wall_time: bool,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        AeTrainConfig {
            iterations: 2000,
            batch_size: 8,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            log_wall_time: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub loss: f64,
    pub wall_seconds: f64,
}

/// Adds the first non-finite tape entry to a numerical failure.
pub(crate) fn non_finite(g: &Graph, what: &str) -> Error {
    match g.first_non_finite() {
        Some((node, op, shape)) => Error::NonFinite(format!(
            "{what}; first non-finite tensor is node {node} ({op}, shape {shape:?})"
        )),
        None => Error::NonFinite(what.to_string()),
    }
}

/// Resumable reconstruction training.
#[derive(Debug, Clone)]
pub struct AeTrainer {
    pub model: Autoencoder,
    pub adam: AdamState,
    pub cfg: AeTrainConfig,
    /// Iterations completed so far.
    pub iteration: u64,
    geometry: Vec<EncoderGeometry>,
}

impl AeTrainer {
    pub fn new(model: Autoencoder, cfg: AeTrainConfig, data: &[PointCloud]) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        if data.iter().any(|c| c.len() != data[0].len()) {
            return Err(Error::invalid(
                "training clouds must all have the same number of points",
            ));
        }
        if cfg.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let geometry = data
            .iter()
            .map(|c| EncoderGeometry::new(c, &model.net.cfg.encoder))
            .collect::<Result<_>>()?;
        let adam = AdamState::new(cfg.adam, model.store.values());
        Ok(AeTrainer {
            model,
            adam,
            cfg,
            iteration: 0,
            geometry,
        })
    }

    /// Batch members and noise seeds of iteration `it`.
    fn batch(&self, it: u64, n: usize) -> Vec<(usize, u64)> {
        let mut rng = seed::stream(self.cfg.seed, Purpose::Batch, it);
        let picks: Vec<usize> = if self.cfg.batch_size >= n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, self.cfg.batch_size).into_vec()
        };
        picks.into_iter().map(|i| (i, rng.gen())).collect()
    }

    /// Mean batch loss and parameter gradients at the current parameters.
    pub fn loss_and_grads(&mut self, data: &[PointCloud], it: u64) -> Result<(f64, Vec<Tensor>)> {
        let batch = self.batch(it, data.len());
        let mut g = Graph::new();
        let p = self.model.store.bind(&mut g);
        let mut ctx = Forward {
            g: &mut g,
            p: &p,
            stats: &mut self.model.stats,
            train: true,
        };
        let mut total: Option<Var> = None;
        for &(i, noise_seed) in &batch {
            let (cloud, geo) = (&data[i], &self.geometry[i]);
            let net = &self.model.net;
            let feats = net.encode(&mut ctx, cloud, geo)?;
            let recon = net.decode(
                &mut ctx,
                &geo.latent_positions,
                feats,
                cloud.len(),
                noise_seed,
            )?;
            if !ctx.g.value(recon).all_finite() {
                return Err(non_finite(
                    ctx.g,
                    &format!("reconstruction of sample {i} at iteration {it}"),
                ));
            }
            let target = ctx.g.constant(cloud.positions_tensor());
            let l = distance_loss(ctx.g, recon, target, &self.cfg.loss, None)?;
            total = Some(match total {
                None => l,
                Some(t) => ctx.g.add(t, l)?,
            });
        }
        let loss = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(non_finite(&g, &format!("loss at iteration {it}")));
        }
        let grads = g.backward(loss)?;
        Ok((value, p.grads(&grads)))
    }

    pub fn step(&mut self, data: &[PointCloud]) -> Result<LogRow> {
        let start = Instant::now();
        let it = self.iteration;
        let (loss, grads) = self.loss_and_grads(data, it)?;
        if let Some(bad) = grads.iter().position(|t| !t.all_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {} at iteration {it}",
                self.model
                    .store
                    .name(self.model.store.ids().nth(bad).expect("index"))
            )));
        }
        self.adam.step(self.model.store.values_mut(), &grads)?;
        self.iteration += 1;
        Ok(LogRow {
            iteration: it,
            loss,
            wall_seconds: if self.cfg.log_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        })
    }

    /// Trains until `cfg.iterations` are done, reporting every row.
    pub fn run(
        &mut self,
        data: &[PointCloud],
        mut on_row: impl FnMut(&LogRow),
    ) -> Result<Vec<LogRow>> {
        let mut rows = Vec::new();
        while self.iteration < self.cfg.iterations {
            let row = self.step(data)?;
            on_row(&row);
            rows.push(row);
        }
        Ok(rows)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = self.model.to_checkpoint();
        c.push_adam("adam.", &self.model.store, &self.adam);
        c.push("train.iteration", Tensor::scalar(self.iteration as f64));
        c
    }

    pub fn resume(
        model_cfg: &AutoencoderConfig,
        cfg: AeTrainConfig,
        data: &[PointCloud],
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        let model = Autoencoder::from_checkpoint(model_cfg, ckpt)?;
        let mut t = AeTrainer::new(model, cfg, data)?;
        ckpt.load_adam("adam.", &t.model.store, &mut t.adam)?;
        t.iteration = ckpt.scalar("train.iteration")? as u64;
        Ok(t)
    }
}

/// Trains a freshly initialised model for `cfg.iterations` steps.
pub fn train_autoencoder(
    model_cfg: &AutoencoderConfig,
    cfg: &AeTrainConfig,
    data: &[PointCloud],
) -> Result<(Autoencoder, Vec<LogRow>)> {
    let model = Autoencoder::new(model_cfg, cfg.seed)?;
    let mut trainer = AeTrainer::new(model, cfg.clone(), data)?;
    let log = trainer.run(data, |_| {})?;
    Ok((trainer.model, log))
}

/// Per-axis mean and variance of every point in a set of clouds.
pub fn point_moments(clouds: &[PointCloud]) -> Result<([f64; 3], [f64; 3])> {
    let n: usize = clouds.iter().map(PointCloud::len).sum();
    if n == 0 {
        return Err(Error::invalid("moments of an empty set"));
    }
    let mut mean = [0.0; 3];
    for p in clouds.iter().flat_map(|c| c.positions()) {
        for a in 0..3 {
            mean[a] += p[a] / n as f64;
        }
    }
    let mut var = [0.0; 3];
    for p in clouds.iter().flat_map(|c| c.positions()) {
        for a in 0..3 {
            var[a] += (p[a] - mean[a]).powi(2) / n as f64;
        }
    }
    Ok((mean, var))
}

/// Gaussian cloud with the per-axis mean and variance of the training set.
pub fn gaussian_baseline(train: &[PointCloud], n: usize, seed: u64) -> Result<PointCloud> {
    let (mean, var) = point_moments(train)?;
    let axes: Vec<Normal<f64>> = (0..3)
        .map(|a| Normal::new(mean[a], var[a].sqrt()).map_err(|e| Error::invalid(e.to_string())))
        .collect::<Result<_>>()?;
    let mut rng = seed::stream(seed, Purpose::Baseline, 0);
    PointCloud::new(
        (0..n)
            .map(|_| {
                [
                    axes[0].sample(&mut rng),
                    axes[1].sample(&mut rng),
                    axes[2].sample(&mut rng),
                ]
            })
            .collect(),
    )
}

/// Exact EMD between each cloud and its reconstruction.
pub fn reconstruction_emd(
    model: &Autoencoder,
    clouds: &[PointCloud],
    seed: u64,
) -> Result<Vec<f64>> {
    clouds
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let r = model.reconstruct(c, seed.wrapping_add(i as u64))?;
            Ok(exact_emd(&r, c)?.0)
        })
        .collect()
}

/// Exact EMD between each cloud and a fresh matched-moment Gaussian sample.
pub fn baseline_emd(train: &[PointCloud], clouds: &[PointCloud], seed: u64) -> Result<Vec<f64>> {
    clouds
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let b = gaussian_baseline(train, c.len(), seed.wrapping_add(i as u64))?;
            Ok(exact_emd(&b, c)?.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(n: usize, seed: u64) -> PointCloud {
        let mut rng = seed::stream(seed, Purpose::Data, 0);
        let pts = (0..n)
            .map(|_| {
                let v: [f64; 3] = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ];
                let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
                [v[0] / r, v[1] / r, v[2] / r]
            })
            .collect();
        PointCloud::new(pts).unwrap()
    }

    fn small_cfg() -> AutoencoderConfig {
        let block = |w: usize| BlockConfig {
            widths: vec![w],
            k: 4,
            pool_ratio: 0.5,
        };
        AutoencoderConfig {
            encoder: EncoderConfig {
                blocks: vec![block(8), block(5)],
                latent_points: 8,
                latent_channels: 5,
                conv: ConvSpec {
                    hidden: vec![8, 8],
                    ..ConvSpec::default()
                },
                ..EncoderConfig::default()
            },
            decoder: DecoderConfig {
                hidden_width: 8,
                ..DecoderConfig::default()
            },
        }
    }

    #[test]
    fn latent_budgets() {
        let mut cfg = EncoderConfig::default();
        assert_eq!(cfg.latent_budget(), 512);
        cfg.latent_points = 64;
        cfg.latent_channels = 64;
        assert_eq!(cfg.latent_budget(), 4288);
        cfg.readout = Readout::Vector;
        assert_eq!(cfg.latent_budget(), 512);
    }

    #[test]
    fn default_pools_256_to_32() {
        assert_eq!(
            EncoderConfig::default().pool_sizes(256),
            vec![256, 128, 64, 32]
        );
    }

    #[test]
    fn unit_pool_ratio_keeps_positions() {
        let mut cfg = small_cfg();
        for b in &mut cfg.encoder.blocks {
            b.pool_ratio = 1.0;
        }
        cfg.encoder.latent_points = 32;
        let cloud = sphere(32, 1);
        let model = Autoencoder::new(&cfg, 0).unwrap();
        let lat = model.encode(&cloud).unwrap();
        assert_eq!(lat.positions(), cloud.positions());
        assert_eq!(lat.channels(), 5);
    }

    #[test]
    fn encode_translation_covariant() {
        let cloud = sphere(32, 2);
        let model = Autoencoder::new(&small_cfg(), 3).unwrap();
        let a = model.encode(&cloud).unwrap();
        let t = [0.5, -2.0, 3.0];
        let b = model.encode(&cloud.translated(t)).unwrap();
        for (p, q) in a.positions().iter().zip(b.positions()) {
            for k in 0..3 {
                assert!((p[k] + t[k] - q[k]).abs() < 1e-12);
            }
        }
        for (x, y) in a.features().iter().zip(b.features()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn too_few_points_is_an_error() {
        let model = Autoencoder::new(&small_cfg(), 0).unwrap();
        assert!(model.encode(&sphere(16, 0)).is_err());
    }

    #[test]
    fn decode_is_deterministic_and_translates() {
        let model = Autoencoder::new(&small_cfg(), 4).unwrap();
        let lat = model.encode(&sphere(32, 5)).unwrap();
        let a = model.decode(&lat, 32, 9).unwrap();
        assert_eq!(a, model.decode(&lat, 32, 9).unwrap());
        assert_eq!(a.len(), 32);
        let t = [1.0, 2.0, -0.5];
        let b = model.decode(&lat.translated(t), 32, 9).unwrap();
        for (p, q) in a.positions().iter().zip(b.positions()) {
            for k in 0..3 {
                assert!((p[k] + t[k] - q[k]).abs() < 1e-12);
            }
        }
        assert!(model.decode(&lat, 30, 9).is_err());
    }

    #[test]
    fn single_latent_point_is_one_translated_patch() {
        let model = Autoencoder::new(&small_cfg(), 4).unwrap();
        let feats: Vec<f64> = (0..5).map(|i| i as f64 * 0.3 - 0.5).collect();
        let at = PointCloud::with_features(vec![[2.0, 0.0, -1.0]], feats.clone(), 5).unwrap();
        let origin = PointCloud::with_features(vec![[0.0; 3]], feats, 5).unwrap();
        let a = model.decode(&at, 6, 1).unwrap();
        let b = model.decode(&origin, 6, 1).unwrap();
        for (p, q) in a.positions().iter().zip(b.positions()) {
            assert!((p[0] - q[0] - 2.0).abs() < 1e-12 && (p[2] - q[2] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_responds_to_latent_features() {
        let model = Autoencoder::new(&small_cfg(), 4).unwrap();
        let mk = |s: f64| {
            PointCloud::with_features(
                vec![[0.0; 3]],
                (0..5).map(|i| s * (i as f64 - 2.0)).collect(),
                5,
            )
            .unwrap()
        };
        let a = model.decode(&mk(0.3), 8, 1).unwrap();
        let b = model.decode(&mk(-0.7), 8, 1).unwrap();
        let delta: f64 = a
            .positions()
            .iter()
            .zip(b.positions())
            .map(|(p, q)| (p[0] - q[0]).abs() + (p[1] - q[1]).abs())
            .sum();
        assert!(delta > 1e-6);
    }

    #[test]
    fn zeroed_output_layer_collapses_patches() {
        let mut model = Autoencoder::new(&small_cfg(), 4).unwrap();
        let out = model.net.output.clone();
        out.zeroed(&mut model.store);
        let lat = model.encode(&sphere(32, 6)).unwrap();
        let rec = model.decode(&lat, 32, 2).unwrap();
        for (i, p) in rec.positions().iter().enumerate() {
            assert_eq!(p, &lat.positions()[i / 4]);
        }
    }

    #[test]
    fn readout_width_zero_case_and_permutation() {
        let mut cfg = small_cfg();
        cfg.encoder.readout = Readout::Vector;
        cfg.encoder.vector_width = 12;
        cfg.encoder.conv.renorm = false;
        let model = Autoencoder::new(&cfg, 1).unwrap();
        let v = model.encode_vector(&sphere(32, 7)).unwrap();
        assert_eq!(v.len(), 12);

        let readout = model.net.readout.as_ref().unwrap();
        let mut rng = seed::stream(3, Purpose::Data, 0);
        let pos: Vec<[f64; 3]> = (0..6).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let feats = crate::tensor::init::uniform(&mut rng, &[6, 5], 1.0);
        let run = |pos: &[[f64; 3]], f: Tensor| {
            model
                .eval(|ctx, net| {
                    let x = ctx.g.constant(f);
                    let v = net.global_readout(ctx, pos, x)?;
                    Ok(ctx.g.value(v).data().to_vec())
                })
                .unwrap()
        };
        let base = run(&pos, feats.clone());
        let perm = [3, 0, 5, 1, 4, 2];
        let ppos: Vec<[f64; 3]> = perm.iter().map(|&i| pos[i]).collect();
        let pf: Vec<f64> = perm.iter().flat_map(|&i| feats.row(i).to_vec()).collect();
        let permuted = run(&ppos, Tensor::new([6, 5], pf).unwrap());
        for (a, b) in base.iter().zip(&permuted) {
            assert!((a - b).abs() < 1e-12);
        }

        let mut zero = model.clone();
        zero.store.get_mut(readout.conv.bias).data_mut().fill(0.0);
        for l in &readout.fc.layers {
            zero.store.get_mut(l.bias).data_mut().fill(0.0);
        }
        let out = zero
            .eval(|ctx, net| {
                let x = ctx.g.constant(Tensor::zeros([6, 5]));
                let v = net.global_readout(ctx, &pos, x)?;
                Ok(ctx.g.value(v).clone())
            })
            .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_iterations_leave_parameters() {
        let data = vec![sphere(32, 1), sphere(32, 2)];
        let cfg = AeTrainConfig {
            iterations: 0,
            ..AeTrainConfig::default()
        };
        let (model, log) = train_autoencoder(&small_cfg(), &cfg, &data).unwrap();
        assert!(log.is_empty());
        let fresh = Autoencoder::new(&small_cfg(), 0).unwrap();
        assert_eq!(model.store.values(), fresh.store.values());
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let data: Vec<PointCloud> = (0..4).map(|s| sphere(32, s)).collect();
        let cfg = AeTrainConfig {
            iterations: 4,
            batch_size: 2,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            ..AeTrainConfig::default()
        };
        let (_, full) = train_autoencoder(&small_cfg(), &cfg, &data).unwrap();
        let mut first = AeTrainer::new(
            Autoencoder::new(&small_cfg(), 0).unwrap(),
            AeTrainConfig {
                iterations: 2,
                ..cfg.clone()
            },
            &data,
        )
        .unwrap();
        let mut log = first.run(&data, |_| {}).unwrap();
        let ckpt = Checkpoint::from_bytes(&first.to_checkpoint().to_bytes()).unwrap();
        let mut second = AeTrainer::resume(&small_cfg(), cfg, &data, &ckpt).unwrap();
        log.extend(second.run(&data, |_| {}).unwrap());
        assert_eq!(log, full);
    }

    #[test]
    fn baseline_matches_moments() {
        let data = vec![sphere(256, 1)];
        let b = gaussian_baseline(&data, 20000, 0).unwrap();
        let (m0, v0) = point_moments(&data).unwrap();
        let (m1, v1) = point_moments(&[b]).unwrap();
        for a in 0..3 {
            assert!((m0[a] - m1[a]).abs() < 0.02);
            assert!((v0[a] - v1[a]).abs() / v0[a] < 0.05);
        }
    }
}
