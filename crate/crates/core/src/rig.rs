//! Blendshape rig: coefficient-to-mesh transform, a synthetic template set,
//! OBJ import/export and per-region vertex error metrics.
//!
//! Geometry is in meters; metrics are reported in millimeters.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::channels::{Region, CHANNEL_NAMES};
use crate::data::io::{read_mask, write_mask};
use crate::data::{BlendshapeSequence, N_BLENDSHAPES};
use crate::error::{Error, Result};

/// Semi-axes (x: width, y: height, z: depth) of the synthetic head, meters.
pub const HEAD_RADII: [f64; 3] = [0.075, 0.1, 0.09];
pub const FLAME_VERTICES: usize = 5023;
pub const MM_PER_M: f64 = 1000.0;

pub const LIP_MASK: &str = "lip";
pub const EYE_FOREHEAD_MASK: &str = "eye_forehead";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    /// `V = sum_i beta_i V_i`.
    Literal,
    /// `V = V_neutral + sum_i beta_i (V_i - V_neutral)`.
    #[default]
    Delta,
}

impl FromStr for BlendMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "delta" => Ok(Self::Delta),
            other => Err(Error::Config(format!(
                "unknown blend mode {other:?} (literal or delta)"
            ))),
        }
    }
}

/// Neutral mesh, 52 templates sharing its topology, and vertex region masks.
#[derive(Clone, Debug, PartialEq)]
pub struct RigTemplateSet {
    pub neutral: Array2<f64>,
    pub templates: Vec<Array2<f64>>,
    pub faces: Vec<[usize; 3]>,
    pub lip_mask: Vec<usize>,
    pub eye_forehead_mask: Vec<usize>,
    /// Cheek and nose support for the remaining channels.
    pub other_mask: Vec<usize>,
    // 52 x 3V stacks used by the blend modes
    literal_basis: Array2<f64>,
    delta_basis: Array2<f64>,
}

impl RigTemplateSet {
    pub fn new(
        neutral: Array2<f64>,
        templates: Vec<Array2<f64>>,
        faces: Vec<[usize; 3]>,
        lip_mask: Vec<usize>,
        eye_forehead_mask: Vec<usize>,
        other_mask: Vec<usize>,
    ) -> Result<Self> {
        let v = neutral.nrows();
        if neutral.ncols() != 3 || v == 0 {
            return Err(Error::Shape(format!(
                "neutral mesh is {:?}, expected V x 3",
                neutral.dim()
            )));
        }
        if templates.len() != N_BLENDSHAPES {
            return Err(Error::Shape(format!(
                "{} templates, expected {N_BLENDSHAPES}",
                templates.len()
            )));
        }
        if let Some((i, t)) = templates.iter().enumerate().find(|(_, t)| t.dim() != (v, 3)) {
            return Err(Error::Shape(format!(
                "template {i} is {:?}, neutral is ({v}, 3)",
                t.dim()
            )));
        }
        for mask in [&lip_mask, &eye_forehead_mask, &other_mask] {
            if let Some(&bad) = mask.iter().find(|&&i| i >= v) {
                return Err(Error::range("mask vertex", bad, v));
            }
        }
        if let Some(&bad) = faces.iter().flatten().find(|&&i| i >= v) {
            return Err(Error::range("face vertex", bad, v));
        }
        let flat = |a: &Array2<f64>| a.iter().copied().collect::<Vec<_>>();
        let mut literal_basis = Array2::zeros((N_BLENDSHAPES, 3 * v));
        let mut delta_basis = Array2::zeros((N_BLENDSHAPES, 3 * v));
        for (i, t) in templates.iter().enumerate() {
            literal_basis.row_mut(i).assign(&ndarray::Array1::from(flat(t)));
            delta_basis
                .row_mut(i)
                .assign(&ndarray::Array1::from(flat(&(t - &neutral))));
        }
        Ok(Self {
            neutral,
            templates,
            faces,
            lip_mask,
            eye_forehead_mask,
            other_mask,
            literal_basis,
            delta_basis,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.neutral.nrows()
    }

    pub fn region_mask(&self, region: Region) -> &[usize] {
        match region {
            Region::Lip => &self.lip_mask,
            Region::BrowEye => &self.eye_forehead_mask,
            Region::Other => &self.other_mask,
        }
    }

    fn blend_rows(&self, coeffs: ArrayView2<f64>, mode: BlendMode) -> Result<Array2<f64>> {
        if coeffs.ncols() != N_BLENDSHAPES {
            return Err(Error::Shape(format!(
                "{} coefficients, expected {N_BLENDSHAPES}",
                coeffs.ncols()
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite {
                term: "blend coefficients".into(),
                value: f64::NAN,
            });
        }
        Ok(match mode {
            BlendMode::Literal => coeffs.dot(&self.literal_basis),
            BlendMode::Delta => {
                let neutral = self
                    .neutral
                    .view()
                    .into_shape_with_order((1, 3 * self.n_vertices()))
                    .expect("standard layout");
                coeffs.dot(&self.delta_basis) + neutral
            }
        })
    }

    /// One frame of coefficients to a `V x 3` mesh.
    pub fn blend(&self, coeffs: &[f64], mode: BlendMode) -> Result<Array2<f64>> {
        let row = ArrayView2::from_shape((1, coeffs.len()), coeffs).expect("one row");
        let flat = self.blend_rows(row, mode)?;
        Ok(flat.into_shape_with_order((self.n_vertices(), 3)).expect("3V values"))
    }

    pub fn blend_sequence(&self, seq: &BlendshapeSequence, mode: BlendMode) -> Result<VertexSequence> {
        let flat = self.blend_rows(seq.coeffs().view(), mode)?;
        let t = seq.frames();
        VertexSequence::new(
            flat.into_shape_with_order((t, self.n_vertices(), 3))
                .expect("T x 3V values"),
        )
    }

    /// Writes `neutral.obj`, one OBJ per template and the vertex masks.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let tdir = dir.join("templates");
        let mdir = dir.join("masks");
        fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
        fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
        write_obj(&dir.join("neutral.obj"), &self.neutral, &self.faces)?;
        for (i, t) in self.templates.iter().enumerate() {
            write_obj(&tdir.join(template_file(i)), t, &self.faces)?;
        }
        write_mask(&mdir.join(format!("{LIP_MASK}.txt")), &self.lip_mask)?;
        write_mask(&mdir.join(format!("{EYE_FOREHEAD_MASK}.txt")), &self.eye_forehead_mask)?;
        write_mask(&mdir.join("other.txt"), &self.other_mask)?;
        Ok(())
    }

    /// Reads a rig directory written by [`RigTemplateSet::write_dir`]. Masks
    /// may be replaced by any index lists over the same topology.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let (neutral, faces) = read_obj(&dir.join("neutral.obj"))?;
        let templates = (0..N_BLENDSHAPES)
            .map(|i| read_obj(&dir.join("templates").join(template_file(i))).map(|(v, _)| v))
            .collect::<Result<Vec<_>>>()?;
        let mdir = dir.join("masks");
        let other = mdir.join("other.txt");
        let other_mask = if other.exists() { read_mask(&other)? } else { Vec::new() };
        Self::new(
            neutral,
            templates,
            faces,
            read_mask(&mdir.join(format!("{LIP_MASK}.txt")))?,
            read_mask(&mdir.join(format!("{EYE_FOREHEAD_MASK}.txt")))?,
            other_mask,
        )
    }
}

fn template_file(i: usize) -> String {
    format!("{i:02}_{}.obj", CHANNEL_NAMES[i])
}

/// `T x V x 3` vertex positions.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexSequence {
    values: Array3<f64>,
}

impl VertexSequence {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if values.dim().2 != 3 || values.dim().0 == 0 {
            return Err(Error::Shape(format!(
                "vertex sequence is {:?}, expected T x V x 3",
                values.dim()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: "vertex sequence".into(),
                value: f64::NAN,
            });
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn frames(&self) -> usize {
        self.values.dim().0
    }

    pub fn n_vertices(&self) -> usize {
        self.values.dim().1
    }

    pub fn frame(&self, t: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(Axis(0), t)
    }
}

fn distances(pred: &VertexSequence, gt: &VertexSequence, mask: &[usize]) -> Result<Vec<Vec<f64>>> {
    if pred.values.dim() != gt.values.dim() {
        return Err(Error::Alignment(format!(
            "{:?} vs {:?}",
            pred.values.dim(),
            gt.values.dim()
        )));
    }
    if mask.is_empty() {
        return Err(Error::Config("vertex mask is empty".into()));
    }
    if let Some(&bad) = mask.iter().find(|&&i| i >= pred.n_vertices()) {
        return Err(Error::range("mask vertex", bad, pred.n_vertices()));
    }
    Ok((0..pred.frames())
        .map(|t| {
            let (p, g) = (pred.frame(t), gt.frame(t));
            mask.iter()
                .map(|&v| {
                    let d = &p.row(v) - &g.row(v);
                    d.dot(&d).sqrt() * MM_PER_M
                })
                .collect()
        })
        .collect())
}

fn mean_of_frame_max(d: Vec<Vec<f64>>) -> f64 {
    let n = d.len() as f64;
    d.into_iter().map(|f| f.into_iter().fold(0.0, f64::max)).sum::<f64>() / n
}

/// Lip vertex error: per-frame max distance over the lip mask, averaged over frames, mm.
pub fn lve(pred: &VertexSequence, gt: &VertexSequence, lip_mask: &[usize]) -> Result<f64> {
    Ok(mean_of_frame_max(distances(pred, gt, lip_mask)?))
}

/// Same statistic as [`lve`] over the eye and forehead mask.
pub fn eve(pred: &VertexSequence, gt: &VertexSequence, eye_forehead_mask: &[usize]) -> Result<f64> {
    Ok(mean_of_frame_max(distances(pred, gt, eye_forehead_mask)?))
}

/// Mean distance over masked vertices and frames, mm.
pub fn lip_avg_error(pred: &VertexSequence, gt: &VertexSequence, lip_mask: &[usize]) -> Result<f64> {
    let d = distances(pred, gt, lip_mask)?;
    let n = (d.len() * lip_mask.len()) as f64;
    Ok(d.into_iter().flatten().sum::<f64>() / n)
}

/// Latitude-longitude grid with `n_lon` columns; the last row may be partial.
fn grid_shape(v: usize) -> (usize, usize) {
    let n_lon = ((2.0 * v as f64).sqrt().ceil() as usize).max(3);
    (v.div_ceil(n_lon), n_lon)
}

fn unit_direction(row: usize, col: usize, n_lat: usize, n_lon: usize) -> [f64; 3] {
    let theta = std::f64::consts::PI * (row as f64 + 0.5) / n_lat as f64;
    let phi = std::f64::consts::TAU * col as f64 / n_lon as f64;
    // y up, z toward the face
    [theta.sin() * phi.sin(), theta.cos(), theta.sin() * phi.cos()]
}

fn in_lip(d: [f64; 3]) -> bool {
    d[2] > 0.55 && (-0.7..-0.2).contains(&d[1])
}

fn in_eye_forehead(d: [f64; 3]) -> bool {
    d[2] > 0.4 && (0.05..0.8).contains(&d[1])
}

fn in_other(d: [f64; 3]) -> bool {
    d[2] > 0.5 && (-0.2..0.05).contains(&d[1])
}

/// Deterministic synthetic rig with `v` vertices. Template `i` is the neutral
/// head plus one smooth bump confined to the region of channel `i`.
pub fn make_synthetic_rig(v: usize, seed: u64) -> Result<RigTemplateSet> {
    let (n_lat, n_lon) = grid_shape(v);
    let dirs: Vec<[f64; 3]> = (0..v)
        .map(|i| unit_direction(i / n_lon, i % n_lon, n_lat, n_lon))
        .collect();
    let neutral = Array2::from_shape_fn((v, 3), |(i, k)| {
        let d = dirs[i];
        // chin and brow ridge so the neutral face is not a bare ellipsoid
        let relief = 1.0 + 0.04 * (3.0 * d[1]).sin() * d[2].max(0.0);
        HEAD_RADII[k] * d[k] * relief
    });
    let mask = |f: fn([f64; 3]) -> bool| (0..v).filter(|&i| f(dirs[i])).collect::<Vec<_>>();
    let lip_mask = mask(in_lip);
    let eye_forehead_mask = mask(in_eye_forehead);
    let other_mask = mask(in_other);
    if lip_mask.is_empty() || eye_forehead_mask.is_empty() || other_mask.is_empty() {
        return Err(Error::Config(format!("{v} vertices leave an empty region mask")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates = (0..N_BLENDSHAPES)
        .map(|ch| {
            let support = match Region::of_channel(ch) {
                Region::Lip => &lip_mask,
                Region::BrowEye => &eye_forehead_mask,
                Region::Other => &other_mask,
            };
            let centre = support[rng.gen_range(0..support.len())];
            let radius = rng.gen_range(0.25..0.5);
            let amp = rng.gen_range(0.004..0.012);
            let mut push: [f64; 3] = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let n = push.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            push.iter_mut().for_each(|x| *x /= n);
            let mut t = neutral.clone();
            let c = dirs[centre];
            for &i in support {
                let d = dirs[i];
                let r2 = (0..3).map(|k| (d[k] - c[k]).powi(2)).sum::<f64>() / (radius * radius);
                if r2 < 1.0 {
                    let w = amp * (1.0 - r2).powi(2);
                    for k in 0..3 {
                        t[[i, k]] += w * (0.6 * d[k] + 0.4 * push[k]);
                    }
                }
            }
            t
        })
        .collect();

    let mut faces = Vec::new();
    for r in 0..n_lat.saturating_sub(1) {
        for c in 0..n_lon {
            let a = r * n_lon + c;
            let b = r * n_lon + (c + 1) % n_lon;
            let (a2, b2) = (a + n_lon, b + n_lon);
            if a2 < v && b2 < v {
                faces.push([a, a2, b]);
                faces.push([b, a2, b2]);
            }
        }
    }
    RigTemplateSet::new(neutral, templates, faces, lip_mask, eye_forehead_mask, other_mask)
}

pub fn obj_string(vertices: &ArrayView2<f64>, faces: &[[usize; 3]]) -> String {
    let mut s = String::with_capacity(vertices.nrows() * 40 + faces.len() * 20);
    for row in vertices.rows() {
        let _ = writeln!(s, "v {} {} {}", row[0], row[1], row[2]);
    }
    for f in faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn write_obj(path: &Path, vertices: &Array2<f64>, faces: &[[usize; 3]]) -> Result<()> {
    fs::write(path, obj_string(&vertices.view(), faces)).map_err(|e| Error::io(path, e))
}

/// Reads `v` and triangular `f` records; other records are ignored.
pub fn read_obj(path: &Path) -> Result<(Array2<f64>, Vec<[usize; 3]>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: format!("line {}: {msg}", line + 1),
    };
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let xyz: Vec<f64> = parts
                    .take(3)
                    .map(|p| p.parse::<f64>().map_err(|_| bad(n, "bad vertex coordinate")))
                    .collect::<Result<_>>()?;
                if xyz.len() != 3 {
                    return Err(bad(n, "vertex needs 3 coordinates"));
                }
                verts.extend(xyz);
            }
            Some("f") => {
                let idx: Vec<usize> = parts
                    .map(|p| {
                        p.split('/')
                            .next()
                            .and_then(|i| i.parse::<usize>().ok())
                            .filter(|&i| i >= 1)
                            .map(|i| i - 1)
                            .ok_or_else(|| bad(n, "bad face index"))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(bad(n, "only triangles are supported"));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    let v = verts.len() / 3;
    Ok((Array2::from_shape_vec((v, 3), verts).expect("3 per vertex"), faces))
}

/// One OBJ per frame, named `frame_00000.obj`, ...
pub fn write_obj_sequence(dir: &Path, seq: &VertexSequence, faces: &[[usize; 3]]) -> Result<usize> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in 0..seq.frames() {
        let path = dir.join(format!("frame_{t:05}.obj"));
        fs::write(&path, obj_string(&seq.frame(t), faces)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(seq.frames())
}
