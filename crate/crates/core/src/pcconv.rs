//! Irregular point convolution.
//!
//! For a center `i` with neighbourhood `N(i)` the low-rank layer computes
//!
//! ```text
//! f'_i = b + agg_{j ∈ N(i)} 1ᵀ( reshape_{d×c_out}(Λᵀ f_j) ⊙ Φ_θ(p_j − p_i) )
//! ```
//!
//! where `Λ` is `c_in × (d·c_out)`, `Φ_θ` is a small MLP from a relative
//! position to `d·c_out` values and `agg` is a sum or a channel-wise maximum.
//! Entry `r·c_out + o` of both factors belongs to rank component `r` and
//! output channel `o`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{DensityEstimate, KnnGraph};
use crate::tensor::layers::Linear;
use crate::tensor::{
    init, Forward, Graph, ParamId, ParamStore, RunningStats, StatId, Tensor, Var, LEAKY_SLOPE,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Sum,
    Max,
}

/// Where the kernel density estimate divides the features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityMode {
    #[default]
    Off,
    /// Divide each layer's aggregated output by the density at its center.
    Output,
    /// Divide each neighbour's contribution by the density at the neighbour.
    Neighbor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    /// Channel weights times spatial weights.
    #[default]
    LowRank,
    /// One MLP over `(f_j ; f_i ; p_j − p_i)`.
    Concat,
}

/// Hyper-parameters of one convolution layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvSpec {
    pub kind: ConvKind,
    pub rank: usize,
    pub hidden: Vec<usize>,
    /// Batch renormalisation after each hidden layer of the spatial MLP.
    pub renorm: bool,
    pub aggregation: Aggregation,
    pub density: DensityMode,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            kind: ConvKind::LowRank,
            rank: 2,
            hidden: vec![32, 32],
            renorm: true,
            aggregation: Aggregation::Sum,
            density: DensityMode::Off,
        }
    }
}

/// Perceptron with leaky ReLU and optional batch renormalisation on every
/// hidden layer; the output layer is linear.
#[derive(Debug, Clone)]
pub struct SpatialMlp {
    layers: Vec<Linear>,
    renorm: Vec<(ParamId, ParamId, StatId)>,
}

impl SpatialMlp {
    /// `widths` lists every layer boundary, input first.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        stats: &mut RunningStats,
        name: &str,
        widths: &[usize],
        renorm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::invalid(
                "spatial MLP needs at least an input and an output width",
            ));
        }
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            layers.push(Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng)?);
            if renorm && i + 2 < widths.len() {
                let gain = store.add(format!("{name}.{i}.renorm.gain"), Tensor::ones([w[1]]))?;
                let bias = store.add(format!("{name}.{i}.renorm.bias"), Tensor::zeros([w[1]]))?;
                let stat = stats.add(format!("{name}.{i}.renorm"), w[1])?;
                norms.push((gain, bias, stat));
            }
        }
        Ok(SpatialMlp {
            layers,
            renorm: norms,
        })
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out
    }

    pub fn output_layer(&self) -> &Linear {
        self.layers.last().expect("non-empty")
    }

    pub fn forward(&self, ctx: &mut Forward, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(ctx.g, ctx.p, x)?;
            if i < last {
                if let Some(&(gain, bias, stat)) = self.renorm.get(i) {
                    x = ctx.batch_renorm(x, gain, bias, stat)?;
                }
                x = ctx.g.leaky_relu(x, LEAKY_SLOPE);
            }
        }
        Ok(x)
    }
}

/// Parameters of one convolution layer.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub c_in: usize,
    pub c_out: usize,
    /// `Λ`, absent for the concatenation kind.
    pub lambda: Option<ParamId>,
    pub phi: SpatialMlp,
    pub bias: ParamId,
}

impl ConvLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        stats: &mut RunningStats,
        name: &str,
        c_in: usize,
        c_out: usize,
        spec: &ConvSpec,
        rng: &mut R,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::invalid("convolution widths must be positive"));
        }
        let (lambda, phi_in, phi_out) = match spec.kind {
            ConvKind::LowRank => {
                if spec.rank == 0 {
                    return Err(Error::invalid("convolution rank d must be at least 1"));
                }
                let lambda = store.add(
                    format!("{name}.lambda"),
                    init::he_uniform(rng, &[c_in, spec.rank * c_out], c_in),
                )?;
                (Some(lambda), 3, spec.rank * c_out)
            }
            ConvKind::Concat => (None, 2 * c_in + 3, c_out),
        };
        let mut widths = vec![phi_in];
        widths.extend(&spec.hidden);
        widths.push(phi_out);
        let phi = SpatialMlp::new(
            store,
            stats,
            &format!("{name}.phi"),
            &widths,
            spec.renorm,
            rng,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([c_out]))?;
        Ok(ConvLayer {
            spec: spec.clone(),
            c_in,
            c_out,
            lambda,
            phi,
            bias,
        })
    }
}

/// Relative offsets `p_j − p_i` for every flat neighbour entry.
fn relative_positions(src: &[[f64; 3]], dst: &[[f64; 3]], flat: &[usize], k: usize) -> Tensor {
    let mut data = Vec::with_capacity(flat.len() * 3);
    for (r, &j) in flat.iter().enumerate() {
        let (pj, pi) = (src[j], dst[r / k]);
        data.extend_from_slice(&[pj[0] - pi[0], pj[1] - pi[1], pj[2] - pi[2]]);
    }
    Tensor::new(vec![flat.len(), 3], data).expect("relative position shape")
}

/// Convolution from a source cloud onto `dst.len()` centers whose
/// neighbourhoods are given flat, `k` source indices per center.
#[allow(clippy::too_many_arguments)]
pub fn conv_onto(
    ctx: &mut Forward,
    layer: &ConvLayer,
    src: &[[f64; 3]],
    features: Var,
    dst: &[[f64; 3]],
    flat: &[usize],
    k: usize,
    density: Option<&DensityEstimate>,
) -> Result<Var> {
    let fshape = ctx.g.shape(features).to_vec();
    if fshape != [src.len(), layer.c_in] {
        return Err(Error::ShapeMismatch {
            op: "point_conv",
            lhs: vec![src.len(), layer.c_in],
            rhs: fshape,
        });
    }
    if k == 0 || flat.len() != dst.len() * k {
        return Err(Error::invalid(format!(
            "{} neighbour entries for {} centers of {k} neighbours",
            flat.len(),
            dst.len()
        )));
    }
    let density = match (layer.spec.density, density) {
        (DensityMode::Off, _) => None,
        (_, Some(d)) if d.values.len() == src.len() => Some(d),
        (_, Some(d)) => {
            return Err(Error::invalid(format!(
                "density has {} values for {} points",
                d.values.len(),
                src.len()
            )))
        }
        (_, None) => {
            return Err(Error::invalid(
                "density elimination enabled but no density supplied",
            ))
        }
    };
    if density.is_some() && layer.spec.density == DensityMode::Output && dst.len() != src.len() {
        return Err(Error::invalid(
            "output density division needs centers on the source cloud",
        ));
    }
    let rows = flat.len();
    let rel = ctx.g.constant(relative_positions(src, dst, flat, k));
    let per_neighbor = match layer.spec.kind {
        ConvKind::LowRank => {
            let lambda = ctx.p[layer.lambda.expect("low-rank layer has Λ")];
            let proxy = ctx.g.matmul(features, lambda)?;
            let gathered = ctx.g.gather_rows(proxy, flat)?;
            let spatial = layer.phi.forward(ctx, rel)?;
            let mut prod = ctx.g.mul(gathered, spatial)?;
            if let (Some(d), DensityMode::Neighbor) = (density, layer.spec.density) {
                let col = ctx.g.constant(d.column());
                let at_neighbor = ctx.g.gather_rows(col, flat)?;
                prod = ctx.g.div(prod, at_neighbor)?;
            }
            let split = ctx.g.reshape(prod, [rows, layer.spec.rank, layer.c_out])?;
            ctx.g.sum_axis(split, 1)?
        }
        ConvKind::Concat => {
            if dst.len() != src.len() {
                return Err(Error::invalid(
                    "concatenation convolution needs centers on the source cloud",
                ));
            }
            let centers: Vec<usize> = (0..rows).map(|r| r / k).collect();
            let fj = ctx.g.gather_rows(features, flat)?;
            let fi = ctx.g.gather_rows(features, &centers)?;
            let input = ctx.g.concat(&[fj, fi, rel], 1)?;
            let mut out = layer.phi.forward(ctx, input)?;
            if let (Some(d), DensityMode::Neighbor) = (density, layer.spec.density) {
                let col = ctx.g.constant(d.column());
                let at_neighbor = ctx.g.gather_rows(col, flat)?;
                out = ctx.g.div(out, at_neighbor)?;
            }
            out
        }
    };
    let grouped = ctx.g.reshape(per_neighbor, [dst.len(), k, layer.c_out])?;
    let mut out = match layer.spec.aggregation {
        Aggregation::Sum => ctx.g.sum_axis(grouped, 1)?,
        Aggregation::Max => ctx.g.max_axis(grouped, 1)?,
    };
    if let (Some(d), DensityMode::Output) = (density, layer.spec.density) {
        let col = ctx.g.constant(d.column());
        out = ctx.g.div(out, col)?;
    }
    ctx.g.add(out, ctx.p[layer.bias])
}

/// One convolution over a k-NN graph of `positions`.
pub fn point_conv(
    ctx: &mut Forward,
    layer: &ConvLayer,
    positions: &[[f64; 3]],
    features: Var,
    graph: &KnnGraph,
    density: Option<&DensityEstimate>,
) -> Result<Var> {
    if graph.len() != positions.len() {
        return Err(Error::invalid(format!(
            "graph over {} points used with {} positions",
            graph.len(),
            positions.len()
        )));
    }
    conv_onto(
        ctx,
        layer,
        positions,
        features,
        positions,
        graph.flat(),
        graph.k(),
        density,
    )
}

/// Features tied to the cloud they live on.
#[derive(Debug, Clone, Copy)]
pub struct Supported<'a> {
    pub features: Var,
    pub support: &'a [[f64; 3]],
}

/// `f_b + f_a`, defined only for features on the same cloud.
pub fn residual_add(g: &mut Graph, b: Supported, a: Supported) -> Result<Var> {
    if a.support != b.support {
        return Err(Error::invalid(
            "residual connection between different supporting clouds",
        ));
    }
    if g.shape(a.features) != g.shape(b.features) {
        return Err(Error::ShapeMismatch {
            op: "residual_add",
            lhs: g.shape(b.features).to_vec(),
            rhs: g.shape(a.features).to_vec(),
        });
    }
    g.add(b.features, a.features)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    None,
    #[default]
    Layer,
    BatchRenorm,
    Instance,
}

/// Normalisation applied to a conv output before its activation.
#[derive(Debug, Clone)]
pub enum FeatureNorm {
    None,
    Layer {
        gain: ParamId,
        bias: ParamId,
    },
    BatchRenorm {
        gain: ParamId,
        bias: ParamId,
        stat: StatId,
    },
    Instance,
}

impl FeatureNorm {
    pub fn new(
        kind: NormKind,
        store: &mut ParamStore,
        stats: &mut RunningStats,
        name: &str,
        width: usize,
    ) -> Result<Self> {
        Ok(match kind {
            NormKind::None => FeatureNorm::None,
            NormKind::Instance => FeatureNorm::Instance,
            NormKind::Layer => FeatureNorm::Layer {
                gain: store.add(format!("{name}.gain"), Tensor::ones([width]))?,
                bias: store.add(format!("{name}.bias"), Tensor::zeros([width]))?,
            },
            NormKind::BatchRenorm => FeatureNorm::BatchRenorm {
                gain: store.add(format!("{name}.gain"), Tensor::ones([width]))?,
                bias: store.add(format!("{name}.bias"), Tensor::zeros([width]))?,
                stat: stats.add(name.to_string(), width)?,
            },
        })
    }

    pub fn forward(&self, ctx: &mut Forward, x: Var) -> Result<Var> {
        match *self {
            FeatureNorm::None => Ok(x),
            FeatureNorm::Layer { gain, bias } => ctx.g.layer_norm(x, ctx.p[gain], ctx.p[bias]),
            FeatureNorm::BatchRenorm { gain, bias, stat } => ctx.batch_renorm(x, gain, bias, stat),
            FeatureNorm::Instance => {
                let rows = ctx.g.shape(x)[0];
                ctx.g.instance_norm(x, rows)
            }
        }
    }
}

/// A chain of convolutions on one cloud, each followed by normalisation and
/// leaky ReLU. Consecutive layers of equal width are joined by residual
/// connections added after the activation.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub layers: Vec<ConvLayer>,
    pub norms: Vec<FeatureNorm>,
    pub residual: bool,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        stats: &mut RunningStats,
        name: &str,
        c_in: usize,
        widths: &[usize],
        spec: &ConvSpec,
        norm: NormKind,
        residual: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        let mut width = c_in;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(ConvLayer::new(
                store,
                stats,
                &format!("{name}.conv{i}"),
                width,
                w,
                spec,
                rng,
            )?);
            norms.push(FeatureNorm::new(
                norm,
                store,
                stats,
                &format!("{name}.norm{i}"),
                w,
            )?);
            width = w;
        }
        Ok(ConvBlock {
            layers,
            norms,
            residual,
        })
    }

    pub fn out_width(&self) -> Option<usize> {
        self.layers.last().map(|l| l.c_out)
    }

    pub fn forward(
        &self,
        ctx: &mut Forward,
        positions: &[[f64; 3]],
        mut features: Var,
        graph: &KnnGraph,
        density: Option<&DensityEstimate>,
    ) -> Result<Var> {
        for (layer, norm) in self.layers.iter().zip(&self.norms) {
            let conv = point_conv(ctx, layer, positions, features, graph, density)?;
            let normed = norm.forward(ctx, conv)?;
            let activated = ctx.g.leaky_relu(normed, LEAKY_SLOPE);
            features = if self.residual && layer.c_in == layer.c_out {
                residual_add(
                    ctx.g,
                    Supported {
                        features: activated,
                        support: positions,
                    },
                    Supported {
                        features,
                        support: positions,
                    },
                )?
            } else {
                activated
            };
        }
        Ok(features)
    }
}
