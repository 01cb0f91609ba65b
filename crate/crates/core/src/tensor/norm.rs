//! Normalisation layers: layer norm (per row over channels), instance norm and
//! AdaIN (per group of rows, per channel), and batch renormalisation.

use serde::{Deserialize, Serialize};

use super::graph::{GradSink, Op};
use super::{Graph, Tensor, Var, NORM_EPS};
use crate::precision::round_slice;
use crate::{Error, Result};

pub(crate) struct LayerNormSaved {
    x: Var,
    gain: Var,
    bias: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

pub(crate) struct GroupNormSaved {
    x: Var,
    group: usize,
    affine: Option<(Var, Var)>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

pub(crate) struct BatchRenormSaved {
    x: Var,
    gain: Var,
    bias: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    r: Vec<f64>,
    d: Vec<f64>,
    train: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchRenormConfig {
    pub momentum: f64,
    pub r_max: f64,
    pub d_max: f64,
}

impl Default for BatchRenormConfig {
    fn default() -> Self {
        BatchRenormConfig {
            momentum: 0.99,
            r_max: 3.0,
            d_max: 5.0,
        }
    }
}

/// Running statistics of a batch-renormalisation layer.
///
/// The first training update copies the batch statistics, so that step has
/// `r = 1, d = 0` and coincides with plain batch normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRenormState {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub updates: u64,
}

impl BatchRenormState {
    pub fn new(channels: usize) -> Self {
        BatchRenormState {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mu = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
    (mu, (var + NORM_EPS).sqrt())
}

/// Backward through `xhat = (x − μ)/σ` over one set of `n` entries.
fn standardize_backward(dxhat: &[f64], xhat: &[f64], inv_std: f64, out: &mut [f64]) {
    let n = dxhat.len() as f64;
    let s1: f64 = dxhat.iter().sum();
    let s2: f64 = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum();
    for ((o, dh), xh) in out.iter_mut().zip(dxhat).zip(xhat) {
        *o = inv_std / n * (n * dh - s1 - xh * s2);
    }
}

fn expect_matrix(g: &Graph, x: Var, op: &'static str) -> Result<(usize, usize)> {
    let s = g.shape(x);
    if s.len() != 2 {
        return Err(Error::invalid(format!(
            "{op} expects a [rows, channels] tensor, got {s:?}"
        )));
    }
    Ok((s[0], s[1]))
}

fn expect_shape(g: &Graph, v: Var, want: &[usize], op: &'static str) -> Result<()> {
    if g.shape(v) != want {
        return Err(Error::ShapeMismatch {
            op,
            lhs: want.to_vec(),
            rhs: g.shape(v).to_vec(),
        });
    }
    Ok(())
}

impl Graph {
    /// Normalises each row over its channels, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = expect_matrix(self, x, "layer_norm")?;
        expect_shape(self, gain, &[cols], "layer_norm")?;
        expect_shape(self, bias, &[cols], "layer_norm")?;
        let (xv, gv, bv) = (
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
        );
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let (mu, sd) = mean_std(row.iter().copied(), cols);
            inv_std.push(1.0 / sd);
            for c in 0..cols {
                let h = (row[c] - mu) / sd;
                xhat[r * cols + c] = h;
                out[r * cols + c] = gv[c] * h + bv[c];
            }
        }
        round_slice(&mut out);
        let rg = self.any_grad(&[x, gain, bias]);
        let t = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(
            t,
            Op::LayerNorm(LayerNormSaved {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            }),
            rg,
        ))
    }

    fn group_norm(&mut self, x: Var, group: usize, affine: Option<(Var, Var)>) -> Result<Var> {
        let (rows, cols) = expect_matrix(self, x, "instance_norm")?;
        if group == 0 || rows % group != 0 {
            return Err(Error::invalid(format!(
                "{rows} rows cannot be split into instances of {group}"
            )));
        }
        let groups = rows / group;
        if let Some((mu, sigma)) = affine {
            expect_shape(self, mu, &[groups, cols], "adain")?;
            expect_shape(self, sigma, &[groups, cols], "adain")?;
        }
        let xv = self.value(x).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; groups * cols];
        for gi in 0..groups {
            for c in 0..cols {
                let col = (0..group).map(|r| xv[(gi * group + r) * cols + c]);
                let (mu, sd) = mean_std(col, group);
                inv_std[gi * cols + c] = 1.0 / sd;
                for r in 0..group {
                    let i = (gi * group + r) * cols + c;
                    xhat[i] = (xv[i] - mu) / sd;
                }
            }
        }
        let mut out = xhat.clone();
        if let Some((mu, sigma)) = affine {
            let (mv, sv) = (self.value(mu).data(), self.value(sigma).data());
            for (i, o) in out.iter_mut().enumerate() {
                let (r, c) = (i / cols, i % cols);
                let k = (r / group) * cols + c;
                *o = sv[k] * *o + mv[k];
            }
        }
        round_slice(&mut out);
        let mut parents = vec![x];
        if let Some((m, s)) = affine {
            parents.extend([m, s]);
        }
        let rg = self.any_grad(&parents);
        let t = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(
            t,
            Op::GroupNorm(GroupNormSaved {
                x,
                group,
                affine,
                xhat,
                inv_std,
            }),
            rg,
        ))
    }

    /// Standardises each channel over each consecutive block of `group` rows.
    pub fn instance_norm(&mut self, x: Var, group: usize) -> Result<Var> {
        self.group_norm(x, group, None)
    }

    /// Adaptive instance normalisation: each block of `group` rows is
    /// standardised per channel and then scaled by `y_sigma` and shifted by
    /// `y_mu`, whose row `g` conditions block `g`.
    pub fn adain(&mut self, x: Var, y_mu: Var, y_sigma: Var, group: usize) -> Result<Var> {
        self.group_norm(x, group, Some((y_mu, y_sigma)))
    }

    /// Batch renormalisation over the rows of `x`.
    ///
    /// In training mode the batch statistics normalise the input, corrected by
    /// the clipped ratios `r` and `d` (held constant for the gradient), and the
    /// running statistics are updated. Inference mode uses only the running
    /// statistics and fails before the first training update.
    pub fn batch_renorm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        state: &mut BatchRenormState,
        cfg: &BatchRenormConfig,
        train: bool,
    ) -> Result<Var> {
        let (rows, cols) = expect_matrix(self, x, "batch_renorm")?;
        expect_shape(self, gain, &[cols], "batch_renorm")?;
        expect_shape(self, bias, &[cols], "batch_renorm")?;
        if state.channels() != cols {
            return Err(Error::ShapeMismatch {
                op: "batch_renorm",
                lhs: vec![state.channels()],
                rhs: vec![cols],
            });
        }
        if !train && state.updates == 0 {
            return Err(Error::NoRunningStatistics);
        }
        let xv = self.value(x).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; cols];
        let mut r = vec![1.0; cols];
        let mut d = vec![0.0; cols];
        for c in 0..cols {
            let (mu, sd) = if train {
                mean_std((0..rows).map(|i| xv[i * cols + c]), rows)
            } else {
                (state.mean[c], state.std[c])
            };
            inv_std[c] = 1.0 / sd;
            for i in 0..rows {
                xhat[i * cols + c] = (xv[i * cols + c] - mu) / sd;
            }
            if train {
                if state.updates == 0 {
                    state.mean[c] = mu;
                    state.std[c] = sd;
                } else {
                    r[c] = (sd / state.std[c]).clamp(1.0 / cfg.r_max, cfg.r_max);
                    d[c] = ((mu - state.mean[c]) / state.std[c]).clamp(-cfg.d_max, cfg.d_max);
                    state.mean[c] = cfg.momentum * state.mean[c] + (1.0 - cfg.momentum) * mu;
                    state.std[c] = cfg.momentum * state.std[c] + (1.0 - cfg.momentum) * sd;
                }
            }
        }
        if train {
            state.updates += 1;
        }
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, h)| {
                let c = i % cols;
                gv[c] * (h * r[c] + d[c]) + bv[c]
            })
            .collect();
        round_slice(&mut out);
        let rg = self.any_grad(&[x, gain, bias]);
        let t = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(
            t,
            Op::BatchRenorm(BatchRenormSaved {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                r,
                d,
                train,
            }),
            rg,
        ))
    }
}

pub(crate) fn layer_norm_backward(s: &mut GradSink, g: &[f64], sv: &LayerNormSaved) {
    let cols = s.value(sv.gain).len();
    let rows = sv.inv_std.len();
    let gain = s.value(sv.gain).data();
    if s.wants(sv.gain) || s.wants(sv.bias) {
        let mut dg = vec![0.0; cols];
        let mut db = vec![0.0; cols];
        for (i, gi) in g.iter().enumerate() {
            dg[i % cols] += gi * sv.xhat[i];
            db[i % cols] += gi;
        }
        s.add(sv.gain, dg.into_iter());
        s.add(sv.bias, db.into_iter());
    }
    if s.wants(sv.x) {
        let mut dx = vec![0.0; rows * cols];
        let mut dxhat = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                dxhat[c] = g[r * cols + c] * gain[c];
            }
            let span = r * cols..(r + 1) * cols;
            standardize_backward(&dxhat, &sv.xhat[span.clone()], sv.inv_std[r], &mut dx[span]);
        }
        s.add(sv.x, dx.into_iter());
    }
}

pub(crate) fn group_norm_backward(s: &mut GradSink, g: &[f64], sv: &GroupNormSaved) {
    let t = s.value(sv.x);
    let (rows, cols) = (t.rows(), t.row_len());
    let group = sv.group;
    let groups = rows / group;
    let scale = sv.affine.map(|(_, sigma)| s.value(sigma).data());
    if let Some((mu, sigma)) = sv.affine {
        if s.wants(mu) || s.wants(sigma) {
            let mut dmu = vec![0.0; groups * cols];
            let mut dsig = vec![0.0; groups * cols];
            for (i, gi) in g.iter().enumerate() {
                let k = (i / cols / group) * cols + i % cols;
                dmu[k] += gi;
                dsig[k] += gi * sv.xhat[i];
            }
            s.add(mu, dmu.into_iter());
            s.add(sigma, dsig.into_iter());
        }
    }
    if s.wants(sv.x) {
        let mut dx = vec![0.0; rows * cols];
        let mut dxhat = vec![0.0; group];
        let mut xh = vec![0.0; group];
        let mut dcol = vec![0.0; group];
        for gi in 0..groups {
            for c in 0..cols {
                let k = gi * cols + c;
                let sc = scale.map_or(1.0, |sv| sv[k]);
                for r in 0..group {
                    let i = (gi * group + r) * cols + c;
                    dxhat[r] = g[i] * sc;
                    xh[r] = sv.xhat[i];
                }
                standardize_backward(&dxhat, &xh, sv.inv_std[k], &mut dcol);
                for r in 0..group {
                    dx[(gi * group + r) * cols + c] = dcol[r];
                }
            }
        }
        s.add(sv.x, dx.into_iter());
    }
}

pub(crate) fn batch_renorm_backward(s: &mut GradSink, g: &[f64], sv: &BatchRenormSaved) {
    let cols = sv.inv_std.len();
    let rows = g.len() / cols;
    let gain = s.value(sv.gain).data();
    if s.wants(sv.gain) || s.wants(sv.bias) {
        let mut dg = vec![0.0; cols];
        let mut db = vec![0.0; cols];
        for (i, gi) in g.iter().enumerate() {
            let c = i % cols;
            dg[c] += gi * (sv.xhat[i] * sv.r[c] + sv.d[c]);
            db[c] += gi;
        }
        s.add(sv.gain, dg.into_iter());
        s.add(sv.bias, db.into_iter());
    }
    if s.wants(sv.x) {
        let mut dx = vec![0.0; rows * cols];
        if sv.train {
            let mut dxhat = vec![0.0; rows];
            let mut xh = vec![0.0; rows];
            let mut dcol = vec![0.0; rows];
            for c in 0..cols {
                for r in 0..rows {
                    dxhat[r] = g[r * cols + c] * gain[c] * sv.r[c];
                    xh[r] = sv.xhat[r * cols + c];
                }
                standardize_backward(&dxhat, &xh, sv.inv_std[c], &mut dcol);
                for r in 0..rows {
                    dx[r * cols + c] = dcol[r];
                }
            }
        } else {
            for (i, d) in dx.iter_mut().enumerate() {
                let c = i % cols;
                *d = g[i] * gain[c] * sv.inv_std[c];
            }
        }
        s.add(sv.x, dx.into_iter());
    }
}
