//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use irc_core::dynamics::{InConfig, InteractionNet};
use irc_core::geometry::{dist2, estimate_density, knn_graph, KnnGraph};
use irc_core::pcconv::{
    conv_onto, point_conv, Aggregation, ConvKind, ConvLayer, ConvSpec, DensityMode,
};
use irc_core::tensor::{
    BatchRenormConfig, BatchRenormState, Bound, Forward, Graph, ParamStore, RunningStats, Tensor,
    Var,
};
use irc_core::transport::{sinkhorn_plan, CostMatrix, CostMetric, SinkhornConfig};
use irc_core::PointCloud;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_REL_TOL: f64 = 1e-5;
/// Gradient entries are compared relative to at least this magnitude.
pub const FD_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn random_positions(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()
}

pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new(random_positions(rng, n)).unwrap()
}

/// Minimum assignment cost over all permutations (Heap's algorithm), per point.
pub fn brute_force_emd(a: &PointCloud, b: &PointCloud) -> f64 {
    let m = a.len();
    let cost = |i: usize, j: usize| dist2(&a.positions()[i], &b.positions()[j]).sqrt();
    let mut perm: Vec<usize> = (0..m).collect();
    let eval = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost(i, j)).sum::<f64>();
    let mut best = eval(&perm);
    let mut c = vec![0usize; m];
    let mut i = 0;
    while i < m {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(eval(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best / m as f64
}

/// Greedy farthest-point selection recomputing every distance from scratch.
pub fn fps_oracle(p: &[[f64; 3]], m: usize, start: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    while chosen.len() < m {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for i in 0..p.len() {
            let d = chosen
                .iter()
                .map(|&c| dist2(&p[i], &p[c]))
                .fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        chosen.push(best.1);
    }
    chosen
}

/// Builds a network output from bound parameters and input variables.
pub type Build<'a> = dyn Fn(&mut Graph, &Bound, &[Var]) -> irc_core::Result<Var> + 'a;

fn projected(g: &mut Graph, out: Var) -> Var {
    let shape = g.shape(out).to_vec();
    let w = random_tensor(&mut rng(0x5eed), &shape);
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

fn scalar(inputs: &[Tensor], store: &ParamStore, build: &Build) -> f64 {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &p, &vars).unwrap();
    let l = projected(&mut g, out);
    g.value(l).item()
}

/// Largest relative disagreement between reverse-mode gradients and central
/// differences, over every input and parameter entry, of a fixed random
/// projection of the output.
pub fn gradient_error(inputs: &[Tensor], store: &ParamStore, build: &Build) -> f64 {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &p, &vars).unwrap();
    let loss = projected(&mut g, out);
    let grads = g.backward(loss).unwrap();
    let mut analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    analytic.extend(p.grads(&grads));

    let mut worst = 0.0f64;
    let mut compare = |a: f64, n: f64| {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR);
        worst = worst.max(err);
    };
    let mut xs = inputs.to_vec();
    for t in 0..xs.len() {
        for e in 0..xs[t].len() {
            let x0 = xs[t].data()[e];
            xs[t].data_mut()[e] = x0 + FD_STEP;
            let up = scalar(&xs, store, build);
            xs[t].data_mut()[e] = x0 - FD_STEP;
            let down = scalar(&xs, store, build);
            xs[t].data_mut()[e] = x0;
            compare(analytic[t].data()[e], (up - down) / (2.0 * FD_STEP));
        }
    }
    let mut ps = store.clone();
    for (t, id) in store.ids().enumerate() {
        for e in 0..store.get(id).len() {
            let x0 = ps.get(id).data()[e];
            ps.get_mut(id).data_mut()[e] = x0 + FD_STEP;
            let up = scalar(inputs, &ps, build);
            ps.get_mut(id).data_mut()[e] = x0 - FD_STEP;
            let down = scalar(inputs, &ps, build);
            ps.get_mut(id).data_mut()[e] = x0;
            compare(
                analytic[inputs.len() + t].data()[e],
                (up - down) / (2.0 * FD_STEP),
            );
        }
    }
    worst
}

fn conv_case(seed: u64, spec: ConvSpec) -> f64 {
    let mut r = rng(seed);
    let (n, k, c_in, c_out) = (10, 4, 3, 2);
    let positions = random_positions(&mut r, n);
    let graph = knn_graph(&positions, k, true).unwrap();
    let density = estimate_density(&positions, &graph).unwrap();
    let mut store = ParamStore::new();
    let mut stats = RunningStats::new(BatchRenormConfig::default());
    let layer = ConvLayer::new(&mut store, &mut stats, "conv", c_in, c_out, &spec, &mut r).unwrap();
    // Non-zero bias so its gradient is exercised away from zero.
    let bias = store.get_mut(layer.bias);
    let b = random_tensor(&mut r, bias.shape());
    *bias = b;
    let feats = random_tensor(&mut r, &[n, c_in]);
    let build = |g: &mut Graph, p: &Bound, v: &[Var]| {
        // Fresh statistics: the first training pass normalises with batch moments.
        let mut st = stats.clone();
        let mut ctx = Forward {
            g,
            p,
            stats: &mut st,
            train: true,
        };
        point_conv(&mut ctx, &layer, &positions, v[0], &graph, Some(&density))
    };
    gradient_error(&[feats], &store, &build)
}

pub fn conv_layer_error(seed: u64) -> f64 {
    let variants = [
        ConvSpec::default(),
        ConvSpec {
            aggregation: Aggregation::Max,
            density: DensityMode::Output,
            ..ConvSpec::default()
        },
        ConvSpec {
            kind: ConvKind::Concat,
            density: DensityMode::Neighbor,
            renorm: false,
            ..ConvSpec::default()
        },
    ];
    let spec = ConvSpec {
        hidden: vec![6, 5],
        ..variants[seed as usize % 3].clone()
    };
    conv_case(seed, spec)
}

pub fn adain_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (groups, rows, c) = (3, 5, 4);
    let x = random_tensor(&mut r, &[groups * rows, c]);
    let mu = random_tensor(&mut r, &[groups, c]);
    let sigma = random_tensor(&mut r, &[groups, c]);
    let build = |g: &mut Graph, _: &Bound, v: &[Var]| g.adain(v[0], v[1], v[2], rows);
    gradient_error(&[x, mu, sigma], &ParamStore::new(), &build)
}

/// Layer, instance and batch renormalisation in each of its gradient regimes.
pub fn norm_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (rows, c) = (6, 4);
    let x = random_tensor(&mut r, &[rows, c]);
    let gain = random_tensor(&mut r, &[c]);
    let bias = random_tensor(&mut r, &[c]);
    let store = ParamStore::new();
    let layer = |g: &mut Graph, _: &Bound, v: &[Var]| g.layer_norm(v[0], v[1], v[2]);
    let instance = |g: &mut Graph, _: &Bound, v: &[Var]| g.instance_norm(v[0], 3);
    let cfg = BatchRenormConfig::default();
    let renorm = |state: BatchRenormState, train: bool| {
        move |g: &mut Graph, _: &Bound, v: &[Var]| {
            g.batch_renorm(v[0], v[1], v[2], &mut state.clone(), &cfg, train)
        }
    };
    let fresh = BatchRenormState::new(c);
    let mut running = BatchRenormState::new(c);
    running.updates = 5;
    running.mean = (0..c).map(|_| r.gen_range(-1.0..1.0)).collect();
    running.std = (0..c).map(|_| r.gen_range(0.5..1.5)).collect();
    // Ratios pinned at their clip bounds are locally constant.
    let mut clipped = running.clone();
    clipped.std.iter_mut().for_each(|s| *s = 1e-3);
    clipped.mean.iter_mut().for_each(|m| *m = 50.0);
    let xs = [x.clone(), gain.clone(), bias.clone()];
    [
        gradient_error(&xs, &store, &layer),
        gradient_error(&[x], &store, &instance),
        gradient_error(&xs, &store, &renorm(fresh, true)),
        gradient_error(&xs, &store, &renorm(running, false)),
        gradient_error(&xs, &store, &renorm(clipped, true)),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

pub fn in_step_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let cfg = InConfig {
        channels: 2,
        hidden: 5,
        k: 3,
        ..InConfig::default()
    };
    let mut store = ParamStore::new();
    let net = InteractionNet::new(&cfg, &mut store, &mut r).unwrap();
    // The head starts at zero; give it values so positions depend on everything.
    for id in [net.head.weight, net.head.bias] {
        let t = random_tensor(&mut r, store.get(id).shape());
        *store.get_mut(id) = t;
    }
    let pos = Tensor::new([6, 3], random_positions(&mut r, 6).concat()).unwrap();
    let feats = random_tensor(&mut r, &[6, 2]);
    let build = |g: &mut Graph, p: &Bound, v: &[Var]| {
        let (pos, feats) = net.step(g, p, v[0], v[1], 0)?;
        g.concat(&[pos, feats], 1)
    };
    gradient_error(&[pos, feats], &store, &build)
}

/// The converged entropic objective differentiated by central differences
/// against `Σ γ ∂M/∂x` with the plan held fixed.
pub fn sinkhorn_value_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let m = 6;
    let x = Tensor::new([m, 3], random_positions(&mut r, m).concat()).unwrap();
    let y = Tensor::new([m, 3], random_positions(&mut r, m).concat()).unwrap();
    let cfg = SinkhornConfig {
        cost_scale: Some(2.0),
        tol: Some(1e-15),
        ..SinkhornConfig::default()
    };
    let objective = |x: &Tensor| {
        let cost = CostMatrix::between_rows(x, &y, CostMetric::Euclidean).unwrap();
        sinkhorn_plan(&cost, &cfg).unwrap().dual.unwrap()
    };
    let cost = CostMatrix::between_rows(&x, &y, CostMetric::Euclidean).unwrap();
    let plan = sinkhorn_plan(&cost, &cfg).unwrap();
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let yv = g.constant(y.clone());
    let l = g.transport_cost(xv, yv, &plan.gamma).unwrap();
    let analytic = g.backward(l).unwrap().wrt(xv);
    let mut worst = 0.0f64;
    let mut xs = x.clone();
    for e in 0..xs.len() {
        let x0 = xs.data()[e];
        xs.data_mut()[e] = x0 + FD_STEP;
        let up = objective(&xs);
        xs.data_mut()[e] = x0 - FD_STEP;
        let down = objective(&xs);
        xs.data_mut()[e] = x0;
        let n = (up - down) / (2.0 * FD_STEP);
        let a = analytic.data()[e];
        worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR));
    }
    worst
}

/// Elementwise, reduction, shape and distance primitives of the tape.
pub fn tape_ops_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[4, 3]);
    let b = random_tensor(&mut r, &[3, 5]);
    let c = random_tensor(&mut r, &[4, 5]);
    let d = random_tensor(&mut r, &[5, 3]);
    let plan: Vec<f64> = {
        let raw: Vec<f64> = (0..20).map(|_| r.gen_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    };
    let build = |g: &mut Graph, _: &Bound, v: &[Var]| {
        let ab = g.matmul(v[0], v[1])?;
        let t = g.tanh(ab);
        let l = g.leaky_relu(v[2], 0.2);
        let prod = g.mul(t, l)?;
        let shifted = g.add(v[2], v[2])?;
        let denom = g.mul(shifted, shifted)?;
        let one = g.constant(Tensor::full([4, 5], 1.0));
        let denom = g.add(denom, one)?;
        let q = g.div(prod, denom)?;
        let wide = g.concat(&[q, t], 1)?;
        let part = g.narrow(wide, 1, 2, 6)?;
        let rows = g.gather_rows(part, &[3, 0, 0, 2])?;
        let m = g.max_axis(rows, 1)?; // [4]
        let s = g.var_axis(rows, 1)?; // [4]
        let mm = g.mean_axis(rows, 0)?; // [6]
        let n = g.row_norm(v[0])?; // [4, 1]
        let n = g.reshape(n, [4])?;
        let tc = g.transport_cost(v[0], v[3], &plan)?;
        let ch = g.chamfer(v[0], v[3])?;
        let total = g.sum(wide);
        let scalars = [tc, ch, total].map(|x| g.reshape(x, [1]).unwrap());
        let all = g.concat(&[m, s, mm, n, scalars[0], scalars[1], scalars[2]], 0)?;
        let half = g.scale(all, 0.5);
        let zero = g.sub(half, half)?;
        g.add(all, zero)
    };
    gradient_error(&[a, b, c, d], &ParamStore::new(), &build)
}

/// Named groups of the gradient suite, each returning the worst error for a seed.
pub fn gradient_groups() -> Vec<(&'static str, fn(u64) -> f64)> {
    vec![
        ("tape ops", tape_ops_error),
        ("conv layer", conv_layer_error),
        ("adain", adain_error),
        ("normalizations", norm_error),
        ("in step", in_step_error),
        ("sinkhorn value", sinkhorn_value_error),
    ]
}

pub fn graph_of(positions: &[[f64; 3]], k: usize) -> KnnGraph {
    knn_graph(positions, k, true).unwrap()
}

/// A conv layer whose running statistics hold one training pass, so that
/// inference-mode outputs are row-local.
pub struct ConvFixture {
    pub store: ParamStore,
    pub stats: RunningStats,
    pub layer: ConvLayer,
    pub positions: Vec<[f64; 3]>,
    pub features: Tensor,
}

pub const CONV_K: usize = 6;

impl ConvFixture {
    pub fn new(seed: u64, n: usize, spec: ConvSpec) -> Self {
        let mut r = rng(seed);
        let positions = random_positions(&mut r, n);
        let features = random_tensor(&mut r, &[n, 3]);
        let mut store = ParamStore::new();
        let mut stats = RunningStats::new(BatchRenormConfig::default());
        let layer = ConvLayer::new(&mut store, &mut stats, "conv", 3, 4, &spec, &mut r).unwrap();
        let mut fixture = ConvFixture {
            store,
            stats,
            layer,
            positions,
            features,
        };
        let (pos, f) = (fixture.positions.clone(), fixture.features.clone());
        fixture.conv(&pos, &f, true);
        fixture
    }

    /// Output rows of one convolution over the k-NN graph of `positions`.
    pub fn conv(&mut self, positions: &[[f64; 3]], features: &Tensor, train: bool) -> Tensor {
        let graph = graph_of(positions, CONV_K);
        let density = estimate_density(positions, &graph).unwrap();
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let f = g.constant(features.clone());
        let mut ctx = Forward {
            g: &mut g,
            p: &p,
            stats: &mut self.stats,
            train,
        };
        let out = point_conv(&mut ctx, &self.layer, positions, f, &graph, Some(&density)).unwrap();
        g.value(out).clone()
    }

    /// Output rows for explicit flat neighbour lists, `k` per center.
    pub fn conv_lists(&mut self, flat: &[usize], k: usize) -> Tensor {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let f = g.constant(self.features.clone());
        let mut ctx = Forward {
            g: &mut g,
            p: &p,
            stats: &mut self.stats,
            train: false,
        };
        let pos = self.positions.clone();
        let out = conv_onto(&mut ctx, &self.layer, &pos, f, &pos, flat, k, None).unwrap();
        g.value(out).clone()
    }
}

/// Worst absolute change of point_conv features under a random translation.
pub fn conv_translation_error(seed: u64) -> f64 {
    let spec = ConvSpec {
        density: DensityMode::Output,
        ..ConvSpec::default()
    };
    let mut fx = ConvFixture::new(seed, 24, spec);
    let mut r = rng(seed ^ 0x7a);
    let t = [
        r.gen_range(-3.0..3.0),
        r.gen_range(-3.0..3.0),
        r.gen_range(-3.0..3.0),
    ];
    let moved: Vec<[f64; 3]> = fx
        .positions
        .iter()
        .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
        .collect();
    let (pos, f) = (fx.positions.clone(), fx.features.clone());
    let base = fx.conv(&pos, &f, false);
    let shifted = fx.conv(&moved, &f, false);
    base.data()
        .iter()
        .zip(shifted.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Whether permuting the input points permutes the output rows bit for bit.
pub fn conv_permutation_exact(seed: u64) -> bool {
    let mut fx = ConvFixture::new(seed, 24, ConvSpec::default());
    let n = fx.positions.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut r = rng(seed ^ 0x9e);
    for i in (1..n).rev() {
        perm.swap(i, r.gen_range(0..=i));
    }
    let (pos, f) = (fx.positions.clone(), fx.features.clone());
    let base = fx.conv(&pos, &f, false);
    let ppos: Vec<[f64; 3]> = perm.iter().map(|&i| pos[i]).collect();
    let pf = Tensor::new(
        vec![n, 3],
        perm.iter()
            .flat_map(|&i| f.data()[i * 3..i * 3 + 3].to_vec())
            .collect(),
    )
    .unwrap();
    let out = fx.conv(&ppos, &pf, false);
    let c = out.shape()[1];
    perm.iter()
        .enumerate()
        .all(|(row, &i)| out.data()[row * c..(row + 1) * c] == base.data()[i * c..(i + 1) * c])
}

/// Whether max aggregation ignores a repeated neighbour in every list.
pub fn max_duplication_exact(seed: u64) -> bool {
    let spec = ConvSpec {
        aggregation: Aggregation::Max,
        ..ConvSpec::default()
    };
    let mut fx = ConvFixture::new(seed, 24, spec);
    let graph = graph_of(&fx.positions, CONV_K);
    let mut r = rng(seed ^ 0xd0);
    let mut padded = Vec::new();
    for i in 0..graph.len() {
        let list = graph.neighbors(i);
        padded.extend_from_slice(list);
        padded.push(list[r.gen_range(0..list.len())]);
    }
    let base = fx.conv_lists(graph.flat(), CONV_K);
    let dup = fx.conv_lists(&padded, CONV_K + 1);
    base.data() == dup.data()
}

/// Rotation `R_z R_y R_x` from Euler angles.
pub fn rotation(ax: f64, ay: f64, az: f64) -> [[f64; 3]; 3] {
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
        let mut c = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        c
    };
    mul(rz, mul(ry, rx))
}

/// Whether FPS matches the oracle on a random cloud of at most 64 points.
pub fn fps_matches_oracle(seed: u64) -> bool {
    let mut r = rng(seed);
    let n = r.gen_range(2..=64);
    let m = r.gen_range(1..=n);
    let start = r.gen_range(0..n);
    let p = random_positions(&mut r, n);
    irc_core::geometry::farthest_point_sampling(&p, m, start).unwrap() == fps_oracle(&p, m, start)
}

/// Two blocks pooling 64 points to a 16-point latent cloud with 4 channels.
pub fn small_autoencoder() -> irc_core::autoencoder::AutoencoderConfig {
    use irc_core::autoencoder::{AutoencoderConfig, BlockConfig, DecoderConfig, EncoderConfig};
    let block = |w: usize| BlockConfig {
        widths: vec![w],
        k: 8,
        pool_ratio: 0.5,
    };
    AutoencoderConfig {
        encoder: EncoderConfig {
            blocks: vec![block(16), block(4)],
            latent_points: 16,
            latent_channels: 4,
            conv: ConvSpec {
                hidden: vec![16, 16],
                ..ConvSpec::default()
            },
            ..EncoderConfig::default()
        },
        decoder: DecoderConfig {
            hidden_layers: 3,
            hidden_width: 32,
            ..DecoderConfig::default()
        },
    }
}
