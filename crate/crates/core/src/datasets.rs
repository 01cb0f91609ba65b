//! Synthetic data: parametric surface samples, Lennard-Jones particle
//! trajectories, normalisation and XYZ / PLY files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::{dist2, PointCloud};
use crate::seed::{self, Purpose};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hole {
    pub center: [f64; 2],
    pub radius: f64,
}

/// Surface families with their parameters, all centred on the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Sphere {
        radius: f64,
    },
    Box {
        size: [f64; 3],
    },
    /// Ring in the xy-plane.
    Torus {
        major: f64,
        minor: f64,
    },
    /// Square in the xy-plane with circular holes.
    PlaneWithHoles {
        side: f64,
        holes: Vec<Hole>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub shape: Shape,
    pub n_points: usize,
    pub seed: u64,
}

const MAX_REJECTIONS: usize = 1000;

impl Shape {
    pub fn family(&self) -> &'static str {
        match self {
            Shape::Sphere { .. } => "sphere",
            Shape::Box { .. } => "box",
            Shape::Torus { .. } => "torus",
            Shape::PlaneWithHoles { .. } => "plane_with_holes",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "{what} must be positive and finite, got {v}"
                )))
            }
        };
        match self {
            Shape::Sphere { radius } => positive(*radius, "sphere radius"),
            Shape::Box { size } => size.iter().try_for_each(|&s| positive(s, "box size")),
            Shape::Torus { major, minor } => {
                positive(*minor, "torus minor radius")?;
                positive(*major, "torus major radius")?;
                if minor >= major {
                    return Err(Error::invalid(
                        "torus minor radius must be below the major radius",
                    ));
                }
                Ok(())
            }
            Shape::PlaneWithHoles { side, holes } => {
                positive(*side, "plane side")?;
                for h in holes {
                    positive(h.radius, "hole radius")?;
                }
                let hole_area: f64 = holes
                    .iter()
                    .map(|h| std::f64::consts::PI * h.radius * h.radius)
                    .sum();
                if hole_area >= 0.9 * side * side {
                    return Err(Error::invalid("holes cover too much of the plane"));
                }
                Ok(())
            }
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Result<[f64; 3]> {
        match self {
            Shape::Sphere { radius } => loop {
                let v: [f64; 3] = [
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 1e-12 {
                    return Ok([radius * v[0] / n, radius * v[1] / n, radius * v[2] / n]);
                }
            },
            Shape::Box { size } => {
                let [a, b, c] = *size;
                let areas = [b * c, a * c, a * b];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.gen_range(0.0..total);
                let mut axis = 2;
                for (i, &ar) in areas.iter().enumerate() {
                    if pick < ar {
                        axis = i;
                        break;
                    }
                    pick -= ar;
                }
                let mut p = [0.0; 3];
                for (k, v) in p.iter_mut().enumerate() {
                    *v = if k == axis {
                        if rng.gen::<bool>() {
                            size[k] / 2.0
                        } else {
                            -size[k] / 2.0
                        }
                    } else {
                        rng.gen_range(-size[k] / 2.0..size[k] / 2.0)
                    };
                }
                Ok(p)
            }
            Shape::Torus { major, minor } => {
                for _ in 0..MAX_REJECTIONS {
                    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
                    // Area element is proportional to major + minor·cos θ.
                    if rng.gen_range(0.0..major + minor) <= major + minor * theta.cos() {
                        let ring = major + minor * theta.cos();
                        return Ok([ring * phi.cos(), ring * phi.sin(), minor * theta.sin()]);
                    }
                }
                Err(Error::invalid("torus rejection sampling did not terminate"))
            }
            Shape::PlaneWithHoles { side, holes } => {
                for _ in 0..MAX_REJECTIONS {
                    let x = rng.gen_range(-side / 2.0..side / 2.0);
                    let y = rng.gen_range(-side / 2.0..side / 2.0);
                    let inside = holes.iter().any(|h| {
                        (x - h.center[0]).powi(2) + (y - h.center[1]).powi(2) < h.radius * h.radius
                    });
                    if !inside {
                        return Ok([x, y, 0.0]);
                    }
                }
                Err(Error::invalid("plane sampling rejected every candidate"))
            }
        }
    }
}

/// Area-uniform sample of the surface.
pub fn gen_shape(spec: &ShapeSpec) -> Result<PointCloud> {
    if spec.n_points < 8 {
        return Err(Error::invalid(format!(
            "shapes need at least 8 points, got {}",
            spec.n_points
        )));
    }
    spec.shape.validate()?;
    let mut rng = seed::stream(spec.seed, Purpose::Data, 0);
    let pts = (0..spec.n_points)
        .map(|_| spec.shape.sample(&mut rng))
        .collect::<Result<_>>()?;
    PointCloud::new(pts)
}

/// Centroid to the origin and largest distance from it to 1.
pub fn normalize_cloud(c: &PointCloud) -> PointCloud {
    let n = c.len() as f64;
    let mut centroid = [0.0; 3];
    for p in c.positions() {
        for k in 0..3 {
            centroid[k] += p[k] / n;
        }
    }
    let centered = c.translated([-centroid[0], -centroid[1], -centroid[2]]);
    let radius = centered
        .positions()
        .iter()
        .map(|p| dist2(p, &[0.0; 3]))
        .fold(0.0, f64::max)
        .sqrt();
    if radius <= 0.0 {
        return centered;
    }
    let s = 1.0 / radius;
    centered.transformed(&[[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, s]], [0.0; 3])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub count: usize,
    pub n_points: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            count: 200,
            n_points: 256,
            seed: 0,
        }
    }
}

/// Shape `index` of a toy set: families cycle, parameters are random.
pub fn toy_shape_spec(cfg: &ToyConfig, index: usize) -> ShapeSpec {
    let mut rng = seed::stream(cfg.seed, Purpose::Data, 1 + index as u64);
    let shape = match index % 4 {
        0 => Shape::Sphere {
            radius: rng.gen_range(0.5..1.5),
        },
        1 => Shape::Box {
            size: [
                rng.gen_range(0.3..1.0),
                rng.gen_range(0.3..1.0),
                rng.gen_range(0.3..1.0),
            ],
        },
        2 => {
            let major = rng.gen_range(0.6..1.0);
            Shape::Torus {
                major,
                minor: major * rng.gen_range(0.2..0.45),
            }
        }
        _ => {
            let side: f64 = rng.gen_range(1.0..2.0);
            let holes = (0..rng.gen_range(1..=3))
                .map(|_| Hole {
                    center: [
                        rng.gen_range(-0.3..0.3) * side,
                        rng.gen_range(-0.3..0.3) * side,
                    ],
                    radius: rng.gen_range(0.1..0.2) * side,
                })
                .collect();
            Shape::PlaneWithHoles { side, holes }
        }
    };
    ShapeSpec {
        shape,
        n_points: cfg.n_points,
        seed: rng.gen(),
    }
}

/// Normalised toy shapes cycling through the four families.
pub fn toy_dataset(cfg: &ToyConfig) -> Result<Vec<PointCloud>> {
    (0..cfg.count)
        .map(|i| gen_shape(&toy_shape_spec(cfg, i)).map(|c| normalize_cloud(&c)))
        .collect()
}

/// Lennard-Jones particles in reduced units, unit mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LjConfig {
    pub n_particles: usize,
    /// Side of the cubic box centred on the origin.
    pub box_extent: f64,
    pub epsilon: f64,
    pub sigma: f64,
    pub cutoff: f64,
    pub dt: f64,
    pub steps: usize,
    /// Integration steps between stored frames.
    pub stride: usize,
    pub seed: u64,
    /// Initial cubic-lattice spacing in units of `sigma`.
    pub lattice_spacing: f64,
    /// Uniform jitter of initial positions in units of `sigma`.
    pub jitter: f64,
    pub max_retries: usize,
}

impl Default for LjConfig {
    fn default() -> Self {
        LjConfig {
            n_particles: 64,
            box_extent: 12.0,
            epsilon: 1.0,
            sigma: 1.0,
            cutoff: 2.5,
            dt: 0.005,
            steps: 1000,
            stride: 10,
            seed: 0,
            lattice_spacing: 1.0,
            jitter: 0.05,
            max_retries: 100,
        }
    }
}

impl LjConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::invalid("need at least one particle"));
        }
        if !(self.dt > 0.0)
            || !(self.sigma > 0.0)
            || !(self.epsilon > 0.0)
            || !(self.box_extent > 0.0)
        {
            return Err(Error::invalid(
                "dt, sigma, epsilon and box extent must be positive",
            ));
        }
        if !(self.cutoff >= self.sigma) {
            return Err(Error::invalid(format!(
                "cutoff {} below sigma {}",
                self.cutoff, self.sigma
            )));
        }
        if self.stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        Ok(())
    }

    fn pair_potential(&self, r2: f64) -> f64 {
        let s6 = (self.sigma * self.sigma / r2).powi(3);
        4.0 * self.epsilon * (s6 * s6 - s6)
    }

    /// Potential shifted to vanish at the cutoff.
    fn shifted_potential(&self, r2: f64) -> f64 {
        self.pair_potential(r2) - self.pair_potential(self.cutoff * self.cutoff)
    }

    /// `F(r)/r`, so the force on `i` from `j` is this times `p_i − p_j`.
    fn force_over_r(&self, r2: f64) -> f64 {
        let s6 = (self.sigma * self.sigma / r2).powi(3);
        24.0 * self.epsilon * (2.0 * s6 * s6 - s6) / r2
    }
}

/// Pairwise forces with the cutoff.
pub fn lj_forces(cfg: &LjConfig, pos: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let rc2 = cfg.cutoff * cfg.cutoff;
    let mut f = vec![[0.0; 3]; pos.len()];
    for i in 0..pos.len() {
        for j in i + 1..pos.len() {
            let d = [
                pos[i][0] - pos[j][0],
                pos[i][1] - pos[j][1],
                pos[i][2] - pos[j][2],
            ];
            let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            if r2 >= rc2 || r2 == 0.0 {
                continue;
            }
            let s = cfg.force_over_r(r2);
            for k in 0..3 {
                f[i][k] += s * d[k];
                f[j][k] -= s * d[k];
            }
        }
    }
    f
}

/// Kinetic and shifted potential energy.
pub fn lj_energy(cfg: &LjConfig, pos: &[[f64; 3]], vel: &[[f64; 3]]) -> (f64, f64) {
    let kinetic = vel
        .iter()
        .map(|v| 0.5 * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]))
        .sum();
    let rc2 = cfg.cutoff * cfg.cutoff;
    let mut potential = 0.0;
    for i in 0..pos.len() {
        for j in i + 1..pos.len() {
            let r2 = dist2(&pos[i], &pos[j]);
            if r2 < rc2 {
                potential += cfg.shifted_potential(r2);
            }
        }
    }
    (kinetic, potential)
}

/// Jittered cubic lattice centred on the origin.
pub fn lj_initial_positions(cfg: &LjConfig) -> Result<Vec<[f64; 3]>> {
    cfg.validate()?;
    let side = (cfg.n_particles as f64).cbrt().ceil() as usize;
    let a = cfg.lattice_spacing * cfg.sigma;
    let half = (side as f64 - 1.0) * a / 2.0;
    let min2 = (0.5 * cfg.sigma).powi(2);
    for attempt in 0..cfg.max_retries.max(1) {
        let mut rng = seed::stream(cfg.seed, Purpose::Data, attempt as u64);
        let mut pos = Vec::with_capacity(cfg.n_particles);
        'fill: for x in 0..side {
            for y in 0..side {
                for z in 0..side {
                    if pos.len() == cfg.n_particles {
                        break 'fill;
                    }
                    let mut p = [
                        x as f64 * a - half,
                        y as f64 * a - half,
                        z as f64 * a - half,
                    ];
                    for v in &mut p {
                        *v += rng.gen_range(-1.0..=1.0) * cfg.jitter * cfg.sigma;
                    }
                    pos.push(p);
                }
            }
        }
        let inside = pos
            .iter()
            .all(|p| p.iter().all(|v| v.abs() <= cfg.box_extent / 2.0));
        let separated =
            (0..pos.len()).all(|i| (i + 1..pos.len()).all(|j| dist2(&pos[i], &pos[j]) >= min2));
        if inside && separated {
            return Ok(pos);
        }
    }
    Err(Error::Overlap(cfg.max_retries.max(1)))
}

/// Frames of positions with three velocity channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<PointCloud>,
    /// Time between consecutive frames.
    pub dt: f64,
}

fn frame(pos: &[[f64; 3]], vel: &[[f64; 3]]) -> Result<PointCloud> {
    PointCloud::with_features(pos.to_vec(), vel.iter().flatten().copied().collect(), 3)
}

/// One velocity-Verlet step with reflecting walls.
pub fn lj_step(
    cfg: &LjConfig,
    pos: &mut [[f64; 3]],
    vel: &mut [[f64; 3]],
    force: &mut Vec<[f64; 3]>,
) {
    let (dt, wall) = (cfg.dt, cfg.box_extent / 2.0);
    for i in 0..pos.len() {
        for k in 0..3 {
            vel[i][k] += 0.5 * dt * force[i][k];
            pos[i][k] += dt * vel[i][k];
            if pos[i][k] > wall {
                pos[i][k] = 2.0 * wall - pos[i][k];
                vel[i][k] = -vel[i][k];
            } else if pos[i][k] < -wall {
                pos[i][k] = -2.0 * wall - pos[i][k];
                vel[i][k] = -vel[i][k];
            }
        }
    }
    *force = lj_forces(cfg, pos);
    for i in 0..pos.len() {
        for k in 0..3 {
            vel[i][k] += 0.5 * dt * force[i][k];
        }
    }
}

/// Simulates from rest; frame 0 is the initial state, then every `stride`
/// steps.
pub fn lj_simulate(cfg: &LjConfig) -> Result<Trajectory> {
    let mut pos = lj_initial_positions(cfg)?;
    let mut vel = vec![[0.0; 3]; pos.len()];
    let mut force = lj_forces(cfg, &pos);
    let mut frames = vec![frame(&pos, &vel)?];
    for step in 1..=cfg.steps {
        lj_step(cfg, &mut pos, &mut vel, &mut force);
        if pos.iter().chain(&vel).flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "Lennard-Jones state at step {step}"
            )));
        }
        if step % cfg.stride == 0 {
            frames.push(frame(&pos, &vel)?);
        }
    }
    Ok(Trajectory {
        frames,
        dt: cfg.dt * cfg.stride as f64,
    })
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn write_row(out: &mut String, cloud: &PointCloud, i: usize) {
    let p = cloud.positions()[i];
    let _ = write!(out, "{} {} {}", p[0], p[1], p[2]);
    for f in cloud.feature_row(i) {
        let _ = write!(out, " {f}");
    }
    out.push('\n');
}

/// One `x y z [f1 … fC]` line per point; `#` starts a comment line.
pub fn xyz_string(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for i in 0..cloud.len() {
        write_row(&mut out, cloud, i);
    }
    out
}

pub fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud> {
    let mut positions = Vec::new();
    let mut features = Vec::new();
    let mut width = None;
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| parse_err(path, no + 1, format!("not a number: {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if vals.len() < 3 {
            return Err(parse_err(
                path,
                no + 1,
                format!("expected at least 3 columns, found {}", vals.len()),
            ));
        }
        match width {
            None => width = Some(vals.len()),
            Some(w) if w != vals.len() => {
                return Err(parse_err(
                    path,
                    no + 1,
                    format!("expected {w} columns, found {}", vals.len()),
                ))
            }
            _ => {}
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(path, no + 1, "non-finite value"));
        }
        positions.push([vals[0], vals[1], vals[2]]);
        features.extend_from_slice(&vals[3..]);
    }
    let Some(w) = width else {
        return Err(Error::NoPoints(path.to_path_buf()));
    };
    PointCloud::with_features(positions, features, w - 3)
}

pub fn ply_string(cloud: &PointCloud) -> String {
    let mut out = format!("ply\nformat ascii 1.0\nelement vertex {}\n", cloud.len());
    for name in ["x", "y", "z"] {
        let _ = writeln!(out, "property double {name}");
    }
    for c in 0..cloud.channels() {
        let _ = writeln!(out, "property double f{c}");
    }
    out.push_str("end_header\n");
    for i in 0..cloud.len() {
        write_row(&mut out, cloud, i);
    }
    out
}

pub fn parse_ply(text: &str, path: &Path) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l.trim()) != Some("ply") {
        return Err(parse_err(path, 1, "missing ply magic"));
    }
    let mut count = None;
    let mut props = 0usize;
    let mut in_vertex = false;
    let mut header_end = None;
    for (no, line) in lines.by_ref() {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "ascii", _] => {}
            ["format", ..] => return Err(parse_err(path, no + 1, "only ascii PLY is supported")),
            ["comment", ..] | [] => {}
            ["element", "vertex", n] => {
                count = Some(
                    n.parse::<usize>()
                        .map_err(|_| parse_err(path, no + 1, "bad vertex count"))?,
                );
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", "list", ..] if in_vertex => {
                return Err(parse_err(path, no + 1, "list properties are not supported"))
            }
            ["property", _, _] => {
                if in_vertex {
                    props += 1;
                }
            }
            ["end_header"] => {
                header_end = Some(no + 1);
                break;
            }
            _ => {
                return Err(parse_err(
                    path,
                    no + 1,
                    format!("unexpected header line {line:?}"),
                ))
            }
        }
    }
    let (Some(count), Some(first)) = (count, header_end) else {
        return Err(parse_err(path, 1, "incomplete header"));
    };
    if count == 0 {
        return Err(Error::NoPoints(path.to_path_buf()));
    }
    if props < 3 {
        return Err(parse_err(path, first, "vertex needs x, y and z"));
    }
    let body: String = lines.take(count).map(|(_, l)| format!("{l}\n")).collect();
    let cloud = parse_xyz(&body, path).map_err(|e| match e {
        Error::Parse { path, line, msg } => Error::Parse {
            path,
            line: line + first,
            msg,
        },
        other => other,
    })?;
    if cloud.len() != count || cloud.channels() + 3 != props {
        return Err(parse_err(
            path,
            first + cloud.len(),
            format!("expected {count} vertices of {props} values"),
        ));
    }
    Ok(cloud)
}

fn is_ply(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ply"))
}

/// Reads `.ply` as PLY and anything else as XYZ.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    if is_ply(path) {
        parse_ply(&text, path)
    } else {
        parse_xyz(&text, path)
    }
}

pub fn save_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    let text = if is_ply(path) {
        ply_string(cloud)
    } else {
        xyz_string(cloud)
    };
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryManifest {
    pub dt: f64,
    pub frames: usize,
    pub channels: Vec<String>,
}

pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("frame_{index:05}.xyz"))
}

pub fn save_trajectory(traj: &Trajectory, dir: &Path) -> Result<()> {
    save_frames(
        &traj.frames,
        traj.dt,
        &["vx", "vy", "vz"].map(String::from),
        dir,
    )
}

/// Writes frames and a manifest naming their feature channels.
pub fn save_frames(frames: &[PointCloud], dt: f64, channels: &[String], dir: &Path) -> Result<()> {
    if frames.iter().any(|f| f.channels() != channels.len()) {
        return Err(Error::invalid(format!(
            "frames must carry {} feature channels",
            channels.len()
        )));
    }
    fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        save_cloud(f, &frame_path(dir, i))?;
    }
    let manifest = TrajectoryManifest {
        dt,
        frames: frames.len(),
        channels: channels.to_vec(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}

pub fn load_trajectory(dir: &Path) -> Result<Trajectory> {
    let manifest: TrajectoryManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let frames = (0..manifest.frames)
        .map(|i| load_cloud(&frame_path(dir, i)))
        .collect::<Result<Vec<_>>>()?;
    if frames
        .iter()
        .any(|f| f.len() != frames[0].len() || f.channels() != manifest.channels.len())
    {
        return Err(Error::invalid(format!(
            "frames in {} differ in size or channel count",
            dir.display()
        )));
    }
    Ok(Trajectory {
        frames,
        dt: manifest.dt,
    })
}

/// Independent Lennard-Jones runs; run `i` uses seed `lj.seed + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LjpConfig {
    pub lj: LjConfig,
    pub trajectories: usize,
}

impl Default for LjpConfig {
    fn default() -> Self {
        LjpConfig {
            lj: LjConfig::default(),
            trajectories: 40,
        }
    }
}

pub fn ljp_dataset(cfg: &LjpConfig) -> Result<Vec<Trajectory>> {
    (0..cfg.trajectories)
        .map(|i| {
            lj_simulate(&LjConfig {
                seed: cfg.lj.seed.wrapping_add(i as u64),
                ..cfg.lj.clone()
            })
        })
        .collect()
}

/// Index of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// `shapes` or `ljp`.
    pub kind: String,
    /// Cloud files or trajectory subdirectories, relative to the manifest.
    pub items: Vec<String>,
}

pub const MANIFEST: &str = "manifest.json";

fn write_manifest(dir: &Path, m: &DatasetManifest) -> Result<()> {
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(m)? + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    Ok(serde_json::from_str(&fs::read_to_string(
        dir.join(MANIFEST),
    )?)?)
}

pub fn save_shapes(clouds: &[PointCloud], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let items: Vec<String> = (0..clouds.len())
        .map(|i| format!("cloud_{i:05}.xyz"))
        .collect();
    for (c, name) in clouds.iter().zip(&items) {
        save_cloud(c, &dir.join(name))?;
    }
    write_manifest(
        dir,
        &DatasetManifest {
            kind: "shapes".into(),
            items,
        },
    )
}

pub fn load_shapes(dir: &Path) -> Result<Vec<PointCloud>> {
    let m = read_manifest(dir)?;
    if m.kind != "shapes" {
        return Err(Error::invalid(format!(
            "{} holds {:?}, not shapes",
            dir.display(),
            m.kind
        )));
    }
    m.items.iter().map(|f| load_cloud(&dir.join(f))).collect()
}

pub fn save_ljp(trajs: &[Trajectory], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let items: Vec<String> = (0..trajs.len()).map(|i| format!("traj_{i:04}")).collect();
    for (t, name) in trajs.iter().zip(&items) {
        save_trajectory(t, &dir.join(name))?;
    }
    write_manifest(
        dir,
        &DatasetManifest {
            kind: "ljp".into(),
            items,
        },
    )
}

pub fn load_ljp(dir: &Path) -> Result<Vec<Trajectory>> {
    let m = read_manifest(dir)?;
    if m.kind != "ljp" {
        return Err(Error::invalid(format!(
            "{} holds {:?}, not ljp",
            dir.display(),
            m.kind
        )));
    }
    m.items
        .iter()
        .map(|t| load_trajectory(&dir.join(t)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(shape: Shape, n: usize) -> ShapeSpec {
        ShapeSpec {
            shape,
            n_points: n,
            seed: 3,
        }
    }

    #[test]
    fn sphere_points_on_surface() {
        let c = gen_shape(&spec(Shape::Sphere { radius: 1.0 }, 500)).unwrap();
        for p in c.positions() {
            assert!((dist2(p, &[0.0; 3]).sqrt() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn generation_is_seeded() {
        let s = spec(
            Shape::Torus {
                major: 1.0,
                minor: 0.3,
            },
            64,
        );
        assert_eq!(gen_shape(&s).unwrap(), gen_shape(&s).unwrap());
        let other = ShapeSpec {
            seed: 4,
            ..s.clone()
        };
        assert_ne!(gen_shape(&s).unwrap(), gen_shape(&other).unwrap());
    }

    #[test]
    fn box_face_counts_follow_area() {
        let size = [1.0, 0.5, 0.25];
        let c = gen_shape(&spec(Shape::Box { size }, 4096)).unwrap();
        let areas = [size[1] * size[2], size[0] * size[2], size[0] * size[1]];
        let total: f64 = areas.iter().sum();
        let mut counts = [0usize; 3];
        for p in c.positions() {
            let axis = (0..3)
                .find(|&k| (p[k].abs() - size[k] / 2.0).abs() < 1e-12)
                .expect("point lies on a face");
            counts[axis] += 1;
        }
        for k in 0..3 {
            let expect = 4096.0 * areas[k] / total;
            assert!(
                (counts[k] as f64 - expect).abs() / expect <= 0.05,
                "{counts:?}"
            );
        }
    }

    #[test]
    fn plane_avoids_holes() {
        let hole = Hole {
            center: [0.1, -0.2],
            radius: 0.3,
        };
        let c = gen_shape(&spec(
            Shape::PlaneWithHoles {
                side: 2.0,
                holes: vec![hole],
            },
            800,
        ))
        .unwrap();
        for p in c.positions() {
            assert_eq!(p[2], 0.0);
            assert!((p[0] - 0.1).powi(2) + (p[1] + 0.2).powi(2) >= 0.09);
        }
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(gen_shape(&spec(Shape::Sphere { radius: -1.0 }, 64)).is_err());
        assert!(gen_shape(&spec(
            Shape::Torus {
                major: 0.2,
                minor: 0.5
            },
            64
        ))
        .is_err());
        assert!(gen_shape(&spec(Shape::Sphere { radius: 1.0 }, 4)).is_err());
        let bad: std::result::Result<ShapeSpec, _> = serde_json::from_str(
            r#"{"shape":{"family":"cone","radius":1},"n_points":64,"seed":0}"#,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn normalize_examples() {
        let c = PointCloud::new(vec![[0.0; 3], [2.0, 0.0, 0.0]]).unwrap();
        assert_eq!(
            normalize_cloud(&c).positions(),
            &[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]
        );
        let toy = gen_shape(&spec(
            Shape::Box {
                size: [1.0, 0.4, 0.7],
            },
            100,
        ))
        .unwrap();
        let n = normalize_cloud(&toy);
        let again = normalize_cloud(&n);
        for (p, q) in n.positions().iter().zip(again.positions()) {
            assert!(dist2(p, q).sqrt() <= 1e-12);
        }
        let scaled = toy.transformed(
            &[[5.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 5.0]],
            [0.0; 3],
        );
        for (p, q) in n
            .positions()
            .iter()
            .zip(normalize_cloud(&scaled).positions())
        {
            assert!(dist2(p, q).sqrt() <= 1e-12);
        }
        let same = PointCloud::new(vec![[1.0, 2.0, 3.0]; 3]).unwrap();
        assert!(normalize_cloud(&same)
            .positions()
            .iter()
            .all(|p| *p == [0.0; 3]));
    }

    #[test]
    fn toy_dataset_cycles_families() {
        let cfg = ToyConfig {
            count: 8,
            n_points: 64,
            seed: 1,
        };
        let data = toy_dataset(&cfg).unwrap();
        assert_eq!(data.len(), 8);
        assert_eq!(toy_shape_spec(&cfg, 6).shape.family(), "torus");
        for c in &data {
            let r = c
                .positions()
                .iter()
                .map(|p| dist2(p, &[0.0; 3]))
                .fold(0.0, f64::max)
                .sqrt();
            assert!((r - 1.0).abs() < 1e-12);
        }
    }

    fn pair(r: f64, cutoff: f64) -> (LjConfig, Vec<[f64; 3]>) {
        let cfg = LjConfig {
            n_particles: 2,
            cutoff,
            ..LjConfig::default()
        };
        (cfg, vec![[-r / 2.0, 0.0, 0.0], [r / 2.0, 0.0, 0.0]])
    }

    fn run(cfg: &LjConfig, mut pos: Vec<[f64; 3]>, steps: usize) -> Vec<[f64; 3]> {
        let mut vel = vec![[0.0; 3]; pos.len()];
        let mut f = lj_forces(cfg, &pos);
        for _ in 0..steps {
            lj_step(cfg, &mut pos, &mut vel, &mut f);
        }
        pos
    }

    #[test]
    fn pair_at_minimum_stays() {
        let (cfg, pos) = pair(2f64.powf(1.0 / 6.0), 2.5);
        let f = lj_forces(&cfg, &pos);
        assert!(f[0][0].abs() < 1e-12);
        let end = run(&cfg, pos.clone(), 500);
        assert!(dist2(&end[0], &pos[0]).sqrt() < 1e-9);
    }

    #[test]
    fn pair_beyond_cutoff_stays() {
        let (cfg, pos) = pair(3.0, 2.5);
        assert_eq!(run(&cfg, pos.clone(), 200), pos);
    }

    #[test]
    fn potential_continuous_at_cutoff() {
        let cfg = LjConfig::default();
        assert!(cfg.shifted_potential(2.5 * 2.5).abs() < 1e-15);
    }

    #[test]
    fn simulation_is_seeded() {
        let cfg = LjConfig {
            n_particles: 27,
            steps: 50,
            stride: 5,
            ..LjConfig::default()
        };
        let a = lj_simulate(&cfg).unwrap();
        assert_eq!(a, lj_simulate(&cfg).unwrap());
        assert_eq!(a.frames.len(), 11);
        assert!(a.frames[0].features().iter().all(|&v| v == 0.0));
        assert_eq!(a.frames[0].channels(), 3);
    }

    #[test]
    fn overlapping_start_is_an_error() {
        let cfg = LjConfig {
            lattice_spacing: 0.3,
            jitter: 0.0,
            max_retries: 3,
            ..LjConfig::default()
        };
        assert!(matches!(lj_initial_positions(&cfg), Err(Error::Overlap(3))));
    }

    #[test]
    fn xyz_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let c = PointCloud::with_features(
            vec![[0.1, -2.5e-7, 3.0], [1.0 / 3.0, 2.0, -1e10]],
            vec![1.0, 2.0, 3.0, -0.1, 0.2, std::f64::consts::PI],
            3,
        )
        .unwrap();
        for name in ["c.xyz", "c.ply"] {
            let path = dir.path().join(name);
            save_cloud(&c, &path).unwrap();
            assert_eq!(load_cloud(&path).unwrap(), c);
        }
        let empty = dir.path().join("empty.xyz");
        fs::write(&empty, "").unwrap();
        let err = load_cloud(&empty).unwrap_err();
        assert!(err.to_string().contains("no points"));
        let bad = dir.path().join("bad.xyz");
        fs::write(&bad, "0 0 0\n1 2 x\n").unwrap();
        assert!(matches!(
            load_cloud(&bad),
            Err(Error::Parse { line: 2, .. })
        ));
        let ragged = dir.path().join("ragged.xyz");
        fs::write(&ragged, "0 0 0\n1 2 3 4\n").unwrap();
        assert!(matches!(
            load_cloud(&ragged),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn trajectory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = LjConfig {
            n_particles: 8,
            steps: 20,
            stride: 10,
            ..LjConfig::default()
        };
        let t = lj_simulate(&cfg).unwrap();
        save_trajectory(&t, dir.path()).unwrap();
        assert_eq!(load_trajectory(dir.path()).unwrap(), t);
    }
}
