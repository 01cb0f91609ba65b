//! Interaction-Network simulator on latent clouds.
//!
//! One step rebuilds a k-NN graph on the current positions. Every edge
//! `u → v` (sender a neighbour of receiver `v`, self-edges included) carries
//! `(p_u − p_v, ‖p_u − p_v‖)`. The edge network sees both vertex features and
//! that edge vector; the vertex network maps each new edge feature to a
//! vertex update that is summed over incoming edges and added residually.
//! A linear head turns the updated vertex feature into the displacement.

use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{non_finite, Autoencoder, LogRow};
use crate::checkpoint::Checkpoint;
use crate::datasets::Trajectory;
use crate::geometry::{knn_graph, PointCloud};
use crate::seed::{self, Purpose};
use crate::tensor::layers::{Activation, Linear, Mlp};
use crate::tensor::{AdamConfig, AdamState, Bound, Graph, ParamStore, Tensor, Var};
use crate::transport::{sinkhorn_plan, CostMatrix, CostMetric, SinkhornConfig};
use crate::{Error, Result};

/// Latent positions with their feature rows.
pub type SimState = PointCloud;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InConfig {
    /// Latent feature channels `C`.
    pub channels: usize,
    pub hidden: usize,
    pub k: usize,
    /// Append global positions to the vertex features.
    pub vertex_positions: bool,
    /// Shift every trajectory so its first frame is centred on the origin.
    pub center_initial: bool,
    /// Rollouts stop once a position norm exceeds this.
    pub divergence_bound: f64,
}

impl Default for InConfig {
    fn default() -> Self {
        InConfig {
            channels: 13,
            hidden: 128,
            k: 8,
            vertex_positions: true,
            center_initial: true,
            divergence_bound: 1e3,
        }
    }
}

impl InConfig {
    pub fn vertex_width(&self) -> usize {
        self.channels + if self.vertex_positions { 3 } else { 0 }
    }
}

/// Edge network, vertex network and position head.
#[derive(Debug, Clone)]
pub struct InteractionNet {
    pub cfg: InConfig,
    pub edge: Mlp,
    pub vertex: Mlp,
    pub head: Linear,
}

impl InteractionNet {
    pub fn new<R: Rng>(cfg: &InConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if cfg.k == 0 || cfg.hidden == 0 {
            return Err(Error::invalid(
                "interaction network needs k ≥ 1 and a positive width",
            ));
        }
        let (v, h) = (cfg.vertex_width(), cfg.hidden);
        if v == 0 {
            return Err(Error::invalid("vertex features are empty"));
        }
        let edge = Mlp::new(
            store,
            "in.edge",
            &[2 * v + 4, h, h],
            Activation::Tanh,
            true,
            rng,
        )?;
        let mut vertex = Mlp::new(store, "in.vertex", &[h, h, v], Activation::Tanh, false, rng)?;
        // Zeroed outputs make the untrained model the static baseline.
        let last = vertex.layers.pop().expect("two layers").zeroed(store);
        vertex.layers.push(last);
        Ok(InteractionNet {
            cfg: cfg.clone(),
            edge,
            vertex,
            head: Linear::new(store, "in.head", v, 3, rng)?.zeroed(store),
        })
    }

    /// One simulation step on tape values; returns `(positions, features)`.
    pub fn step(
        &self,
        g: &mut Graph,
        p: &Bound,
        pos: Var,
        feats: Var,
        index: usize,
    ) -> Result<(Var, Var)> {
        let m = g.shape(pos)[0];
        let c = self.cfg.channels;
        if g.shape(feats) != [m, c] {
            return Err(Error::ShapeMismatch {
                op: "in_step",
                lhs: vec![m, c],
                rhs: g.shape(feats).to_vec(),
            });
        }
        let positions: Vec<[f64; 3]> = g
            .value(pos)
            .data()
            .chunks(3)
            .map(|r| [r[0], r[1], r[2]])
            .collect();
        let k = self.cfg.k.min(m);
        let graph = knn_graph(&positions, k, true)?;
        let (senders, receivers) = (graph.flat(), graph.centers());
        let ps = g.gather_rows(pos, senders)?;
        let pr = g.gather_rows(pos, &receivers)?;
        let rel = g.sub(ps, pr)?;
        let len = g.row_norm(rel)?;
        let o = if self.cfg.vertex_positions {
            g.concat(&[feats, pos], 1)?
        } else {
            feats
        };
        let u = g.gather_rows(o, senders)?;
        let v = g.gather_rows(o, &receivers)?;
        let edge_in = g.concat(&[u, v, rel, len], 1)?;
        let e = self.edge.forward(g, p, edge_in)?;
        let msg = self.vertex.forward(g, p, e)?;
        let width = self.cfg.vertex_width();
        let grouped = g.reshape(msg, [m, k, width])?;
        let update = g.sum_axis(grouped, 1)?;
        let o_next = g.add(o, update)?;
        let dp = self.head.forward(g, p, o_next)?;
        let pos_next = g.add(pos, dp)?;
        let feats_next = if self.cfg.vertex_positions {
            g.narrow(o_next, 1, 0, c)?
        } else {
            o_next
        };
        if !g.value(pos_next).all_finite() || !g.value(feats_next).all_finite() {
            return Err(non_finite(g, &format!("simulator state at step {index}")));
        }
        Ok((pos_next, feats_next))
    }
}

/// `(p_u − p_v, ‖p_u − p_v‖)` for every edge `u → v`, receivers in order.
pub fn edge_features(state: &SimState, k: usize) -> Result<Vec<[f64; 4]>> {
    let graph = knn_graph(state.positions(), k, true)?;
    let pos = state.positions();
    Ok((0..state.len())
        .flat_map(|v| {
            graph.neighbors(v).iter().map(move |&u| {
                let d = [
                    pos[u][0] - pos[v][0],
                    pos[u][1] - pos[v][1],
                    pos[u][2] - pos[v][2],
                ];
                [
                    d[0],
                    d[1],
                    d[2],
                    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt(),
                ]
            })
        })
        .collect())
}

/// Parameters and structure of one simulator.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub net: InteractionNet,
    pub store: ParamStore,
}

fn state_vars(g: &mut Graph, s: &SimState) -> (Var, Var) {
    (
        g.constant(s.positions_tensor()),
        g.constant(s.features_tensor()),
    )
}

fn state_of(g: &Graph, pos: Var, feats: Var) -> Result<SimState> {
    let positions = g
        .value(pos)
        .data()
        .chunks(3)
        .map(|r| [r[0], r[1], r[2]])
        .collect();
    let f = g.value(feats);
    PointCloud::with_features(positions, f.data().to_vec(), f.shape()[1])
}

/// Frames of a rollout, truncated when it diverges.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub frames: Vec<SimState>,
    pub diverged: bool,
}

impl Simulator {
    pub fn new(cfg: &InConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = seed::stream(seed, Purpose::Init, 1);
        let net = InteractionNet::new(cfg, &mut store, &mut rng)?;
        Ok(Simulator { net, store })
    }

    pub fn config(&self) -> &InConfig {
        &self.net.cfg
    }

    pub fn in_step(&self, s: &SimState) -> Result<SimState> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let (pos, feats) = state_vars(&mut g, s);
        let (pos, feats) = self.net.step(&mut g, &p, pos, feats, 0)?;
        state_of(&g, pos, feats)
    }

    /// `steps` repeated steps; `frames[0]` is the initial state.
    pub fn rollout(&self, initial: &SimState, steps: usize) -> Result<Rollout> {
        let mut frames = vec![initial.clone()];
        for _ in 0..steps {
            let next = match self.in_step(frames.last().expect("non-empty")) {
                Ok(s) => s,
                Err(e) if e.is_numerical() => {
                    return Ok(Rollout {
                        frames,
                        diverged: true,
                    });
                }
                Err(e) => return Err(e),
            };
            let far = next.positions().iter().any(|p| {
                (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() > self.net.cfg.divergence_bound
            });
            if far {
                return Ok(Rollout {
                    frames,
                    diverged: true,
                });
            }
            frames.push(next);
        }
        Ok(Rollout {
            frames,
            diverged: false,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push_params("param.", &self.store);
        c
    }

    pub fn from_checkpoint(cfg: &InConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut s = Simulator::new(cfg, 0)?;
        ckpt.load_params("param.", &mut s.store)?;
        Ok(s)
    }
}

/// Plan from positions only, held fixed; cost over positions and features.
pub fn sim_loss_var(
    g: &mut Graph,
    pos: Var,
    feats: Var,
    target: &SimState,
    cfg: &SinkhornConfig,
) -> Result<Var> {
    let (m, c) = (g.shape(pos)[0], g.shape(feats)[1]);
    if target.len() != m || target.channels() != c {
        return Err(Error::invalid(format!(
            "prediction has {m} points of {c} channels, target {} of {}",
            target.len(),
            target.channels()
        )));
    }
    let tpos = target.positions_tensor();
    let cost = CostMatrix::between_rows(g.value(pos), &tpos, CostMetric::Euclidean)?;
    let plan = sinkhorn_plan(&cost, cfg)?;
    let joint = g.concat(&[pos, feats], 1)?;
    let tjoint = g.constant(target.joint_tensor());
    g.transport_cost(joint, tjoint, &plan.gamma)
}

pub fn sim_loss(pred: &SimState, target: &SimState, cfg: &SinkhornConfig) -> Result<f64> {
    let mut g = Graph::new();
    let (pos, feats) = state_vars(&mut g, pred);
    let l = sim_loss_var(&mut g, pos, feats, target, cfg)?;
    Ok(g.value(l).item())
}

/// Weights `α^t / Σ_{s=1..T} α^s` for `t = 1..T`.
pub fn rollout_weights(horizon: usize, alpha: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=horizon).map(|t| alpha.powi(t as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Shifts all frames so the first frame's centroid is the origin.
pub fn center_on_initial(frames: &[SimState]) -> Vec<SimState> {
    let Some(first) = frames.first() else {
        return Vec::new();
    };
    let n = first.len() as f64;
    let mut c = [0.0; 3];
    for p in first.positions() {
        for k in 0..3 {
            c[k] -= p[k] / n;
        }
    }
    frames.iter().map(|f| f.translated(c)).collect()
}

/// Latent cloud of every frame.
pub fn encode_trajectory(ae: &Autoencoder, traj: &Trajectory) -> Result<Vec<SimState>> {
    traj.frames.iter().map(|f| ae.encode(f)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimTrainConfig {
    pub iterations: u64,
    /// Rollout length `T` per training iteration.
    pub horizon: usize,
    /// Per-step loss decay `α`.
    pub alpha: f64,
    /// Trajectories averaged per update.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub sinkhorn: SinkhornConfig,
    pub seed: u64,
    pub log_wall_time: bool,
}

impl Default for SimTrainConfig {
    fn default() -> Self {
        SimTrainConfig {
            iterations: 500,
            horizon: 50,
            alpha: 0.95,
            batch_size: 5,
            adam: AdamConfig::default(),
            sinkhorn: SinkhornConfig::default(),
            seed: 0,
            log_wall_time: false,
        }
    }
}

/// Resumable multi-step rollout training.
#[derive(Debug, Clone)]
pub struct SimTrainer {
    pub sim: Simulator,
    pub adam: AdamState,
    pub cfg: SimTrainConfig,
    pub iteration: u64,
}

impl SimTrainer {
    pub fn new(sim: Simulator, cfg: SimTrainConfig) -> Result<Self> {
        if cfg.horizon == 0 {
            return Err(Error::invalid("rollout horizon must be at least 1"));
        }
        if !(cfg.alpha > 0.0) {
            return Err(Error::invalid("alpha must be positive"));
        }
        if cfg.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let adam = AdamState::new(cfg.adam, sim.store.values());
        Ok(SimTrainer {
            sim,
            adam,
            cfg,
            iteration: 0,
        })
    }

    fn check(&self, data: &[Vec<SimState>]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::invalid("no training trajectories"));
        }
        for (i, t) in data.iter().enumerate() {
            if t.len() < self.cfg.horizon + 1 {
                return Err(Error::invalid(format!(
                    "trajectory {i} has {} frames, horizon {} needs {}",
                    t.len(),
                    self.cfg.horizon,
                    self.cfg.horizon + 1
                )));
            }
        }
        Ok(())
    }

    /// Batch mean of the weighted rollout losses and its parameter gradients.
    pub fn loss_and_grads(&self, batch: &[&[SimState]]) -> Result<(f64, Vec<Tensor>)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty trajectory batch"));
        }
        let mut g = Graph::new();
        let p = self.sim.store.bind(&mut g);
        let weights = rollout_weights(self.cfg.horizon, self.cfg.alpha);
        let mut total: Option<Var> = None;
        for traj in batch {
            let (mut pos, mut feats) = state_vars(&mut g, &traj[0]);
            for (t, &w) in weights.iter().enumerate() {
                (pos, feats) = self.sim.net.step(&mut g, &p, pos, feats, t + 1)?;
                let l = sim_loss_var(&mut g, pos, feats, &traj[t + 1], &self.cfg.sinkhorn)?;
                let l = g.scale(l, w / batch.len() as f64);
                total = Some(match total {
                    None => l,
                    Some(acc) => g.add(acc, l)?,
                });
            }
        }
        let loss = total.expect("horizon ≥ 1");
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(non_finite(&g, "rollout loss"));
        }
        let grads = g.backward(loss)?;
        Ok((value, p.grads(&grads)))
    }

    /// Trajectories of iteration `it`, without repeats when the set allows.
    fn batch(&self, it: u64, n: usize) -> Vec<usize> {
        let mut rng = seed::stream(self.cfg.seed, Purpose::Batch, it);
        if self.cfg.batch_size >= n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, self.cfg.batch_size).into_vec()
        }
    }

    pub fn step(&mut self, data: &[Vec<SimState>]) -> Result<LogRow> {
        self.check(data)?;
        let start = Instant::now();
        let it = self.iteration;
        let batch: Vec<&[SimState]> = self
            .batch(it, data.len())
            .into_iter()
            .map(|i| data[i].as_slice())
            .collect();
        let (loss, grads) = self.loss_and_grads(&batch)?;
        self.adam.step(self.sim.store.values_mut(), &grads)?;
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

    pub fn run(
        &mut self,
        data: &[Vec<SimState>],
        mut on_row: impl FnMut(&LogRow),
    ) -> Result<Vec<LogRow>> {
        self.check(data)?;
        let mut rows = Vec::new();
        while self.iteration < self.cfg.iterations {
            let row = self.step(data)?;
            on_row(&row);
            rows.push(row);
        }
        Ok(rows)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = self.sim.to_checkpoint();
        c.push_adam("adam.", &self.sim.store, &self.adam);
        c.push("train.iteration", Tensor::scalar(self.iteration as f64));
        c
    }

    pub fn resume(in_cfg: &InConfig, cfg: SimTrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let sim = Simulator::from_checkpoint(in_cfg, ckpt)?;
        let mut t = SimTrainer::new(sim, cfg)?;
        ckpt.load_adam("adam.", &t.sim.store, &mut t.adam)?;
        t.iteration = ckpt.scalar("train.iteration")? as u64;
        Ok(t)
    }
}

/// Trains a freshly initialised simulator on latent trajectories.
pub fn rollout_train(
    in_cfg: &InConfig,
    cfg: &SimTrainConfig,
    data: &[Vec<SimState>],
) -> Result<(Simulator, Vec<LogRow>)> {
    let mut t = SimTrainer::new(Simulator::new(in_cfg, cfg.seed)?, cfg.clone())?;
    let log = t.run(data, |_| {})?;
    Ok((t.sim, log))
}

/// `sim_loss(prediction_t, target_t)` for `t = 0..=steps`.
pub fn rollout_losses(
    sim: &Simulator,
    traj: &[SimState],
    steps: usize,
    cfg: &SinkhornConfig,
) -> Result<(Vec<f64>, bool)> {
    if traj.len() < steps + 1 {
        return Err(Error::invalid(format!(
            "{steps} steps need {} reference frames, got {}",
            steps + 1,
            traj.len()
        )));
    }
    let r = sim.rollout(&traj[0], steps)?;
    let losses = r
        .frames
        .iter()
        .zip(traj)
        .map(|(p, t)| sim_loss(p, t, cfg))
        .collect::<Result<_>>()?;
    Ok((losses, r.diverged))
}

/// Same curve for a model that never moves the initial state.
pub fn static_losses(traj: &[SimState], steps: usize, cfg: &SinkhornConfig) -> Result<Vec<f64>> {
    traj.iter()
        .take(steps + 1)
        .map(|t| sim_loss(&traj[0], t, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(seed: u64, m: usize, c: usize) -> SimState {
        let mut rng = seed::stream(seed, Purpose::Data, 0);
        let pos = (0..m).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let f = (0..m * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        PointCloud::with_features(pos, f, c).unwrap()
    }

    fn small(vertex_positions: bool) -> InConfig {
        InConfig {
            channels: 2,
            hidden: 6,
            k: 3,
            vertex_positions,
            ..InConfig::default()
        }
    }

    #[test]
    fn edge_feature_examples() {
        let s = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        let e = edge_features(&s, 2).unwrap();
        // Receiver 0: self edge first, then the edge from vertex 1.
        assert_eq!(e[0], [0.0; 4]);
        assert_eq!(e[1], [1.0, 0.0, 0.0, 1.0]);
        let moved = edge_features(&s.translated([3.0, -1.0, 2.0]), 2).unwrap();
        assert_eq!(moved, e);
    }

    #[test]
    fn zero_parameters_are_identity() {
        let mut sim = Simulator::new(&small(true), 1).unwrap();
        for v in sim.store.values_mut() {
            v.data_mut().fill(0.0);
        }
        let s = state(1, 6, 2);
        assert_eq!(sim.in_step(&s).unwrap(), s);
        let r = sim.rollout(&s, 4).unwrap();
        assert_eq!(r.frames.len(), 5);
        assert!(r.frames.iter().all(|f| *f == s) && !r.diverged);
        assert_eq!(sim.rollout(&s, 0).unwrap().frames, vec![s]);
    }

    #[test]
    fn untrained_model_is_static() {
        let sim = Simulator::new(&small(true), 1).unwrap();
        let s = state(2, 6, 2);
        assert_eq!(sim.in_step(&s).unwrap(), s);
    }

    #[test]
    fn zero_vertex_net_moves_by_head_bias() {
        let mut sim = Simulator::new(&small(false), 1).unwrap();
        for l in &sim.net.vertex.layers.clone() {
            sim.store.get_mut(l.weight).data_mut().fill(0.0);
            sim.store.get_mut(l.bias).data_mut().fill(0.0);
        }
        sim.store
            .get_mut(sim.net.head.bias)
            .data_mut()
            .copy_from_slice(&[0.1, -0.2, 0.3]);
        let s = state(3, 5, 2);
        let next = sim.in_step(&s).unwrap();
        assert_eq!(next.features(), s.features());
        for (p, q) in s.positions().iter().zip(next.positions()) {
            assert!((q[0] - p[0] - 0.1).abs() < 1e-15 && (q[1] - p[1] + 0.2).abs() < 1e-15);
        }
    }

    /// Two vertices, one channel, unit-width networks with hand-set weights.
    #[test]
    fn two_vertex_hand_computation() {
        let cfg = InConfig {
            channels: 1,
            hidden: 1,
            k: 2,
            vertex_positions: false,
            ..InConfig::default()
        };
        let mut sim = Simulator::new(&cfg, 0).unwrap();
        let set = |sim: &mut Simulator, id, v: &[f64]| {
            sim.store.get_mut(id).data_mut().copy_from_slice(v)
        };
        let net = sim.net.clone();
        // Edge input (o_u, o_v, dx, dy, dz, |d|).
        set(
            &mut sim,
            net.edge.layers[0].weight,
            &[0.5, -0.25, 1.0, 0.0, 0.0, 0.1],
        );
        set(&mut sim, net.edge.layers[0].bias, &[0.05]);
        set(&mut sim, net.edge.layers[1].weight, &[2.0]);
        set(&mut sim, net.edge.layers[1].bias, &[0.0]);
        set(&mut sim, net.vertex.layers[0].weight, &[1.5]);
        set(&mut sim, net.vertex.layers[0].bias, &[-0.1]);
        set(&mut sim, net.vertex.layers[1].weight, &[0.3]);
        set(&mut sim, net.vertex.layers[1].bias, &[0.02]);
        set(&mut sim, net.head.weight, &[1.0, 0.0, -1.0]);
        set(&mut sim, net.head.bias, &[0.0, 0.5, 0.0]);
        let s =
            PointCloud::with_features(vec![[0.0; 3], [0.6, 0.0, 0.0]], vec![1.0, -2.0], 1).unwrap();

        let edge = |ou: f64, ov: f64, dx: f64| {
            let h = (0.5 * ou - 0.25 * ov + dx + 0.1 * dx.abs() + 0.05).tanh();
            let e = (2.0 * h).tanh();
            0.3 * (1.5 * e - 0.1).tanh() + 0.02
        };
        let o0 = 1.0 + edge(1.0, 1.0, 0.0) + edge(-2.0, 1.0, 0.6);
        let o1 = -2.0 + edge(-2.0, -2.0, 0.0) + edge(1.0, -2.0, -0.6);
        let next = sim.in_step(&s).unwrap();
        assert!((next.features()[0] - o0).abs() < 1e-14);
        assert!((next.features()[1] - o1).abs() < 1e-14);
        let expect = [[o0, 0.5, -o0], [0.6 + o1, 0.5, -o1]];
        for (p, q) in next.positions().iter().zip(expect) {
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn sim_loss_examples() {
        let cfg = SinkhornConfig::default();
        let s = state(4, 8, 2);
        assert!(sim_loss(&s, &s, &cfg).unwrap() <= 1e-3);
        let mut f = s.features().to_vec();
        f[2 * 3] += 0.5;
        let t = PointCloud::with_features(s.positions().to_vec(), f, 2).unwrap();
        let l = sim_loss(&s, &t, &cfg).unwrap();
        assert!((l - 0.5 / 8.0).abs() < 2e-3, "{l}");
        assert!(sim_loss(&s, &state(5, 8, 2), &cfg).unwrap() >= 0.0);
        assert!(sim_loss(&s, &state(5, 7, 2), &cfg).is_err());
    }

    #[test]
    fn weights_decay_geometrically() {
        let w = rollout_weights(50, 0.95);
        assert!((w[49] / w[0] * 0.95 - 0.95f64.powi(50)).abs() < 1e-15);
        assert!((0.95f64.powi(50) - 0.0769).abs() < 1e-4);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(rollout_weights(1, 1.0), vec![1.0]);
    }

    #[test]
    fn short_trajectory_rejected() {
        let cfg = SimTrainConfig {
            horizon: 5,
            iterations: 1,
            ..SimTrainConfig::default()
        };
        let data = vec![vec![state(1, 6, 2); 5]];
        assert!(rollout_train(&small(true), &cfg, &data).is_err());
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let traj: Vec<SimState> = (0..4).map(|t| state(10 + t, 6, 2)).collect();
        let data = vec![traj];
        let cfg = SimTrainConfig {
            horizon: 3,
            iterations: 4,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            ..SimTrainConfig::default()
        };
        let (_, full) = rollout_train(&small(true), &cfg, &data).unwrap();
        let mut a = SimTrainer::new(
            Simulator::new(&small(true), 0).unwrap(),
            SimTrainConfig {
                iterations: 2,
                ..cfg.clone()
            },
        )
        .unwrap();
        let mut log = a.run(&data, |_| {}).unwrap();
        let ckpt = Checkpoint::from_bytes(&a.to_checkpoint().to_bytes()).unwrap();
        let mut b = SimTrainer::resume(&small(true), cfg, &ckpt).unwrap();
        log.extend(b.run(&data, |_| {}).unwrap());
        assert_eq!(log, full);
        assert!(full[3].loss < full[0].loss);
    }

    #[test]
    fn divergence_truncates() {
        let mut sim = Simulator::new(&small(true), 1).unwrap();
        sim.store
            .get_mut(sim.net.head.bias)
            .data_mut()
            .copy_from_slice(&[400.0, 0.0, 0.0]);
        let r = sim.rollout(&state(1, 6, 2), 10).unwrap();
        assert!(r.diverged);
        assert_eq!(r.frames.len(), 3);
    }
}
