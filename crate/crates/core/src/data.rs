//! Seeded synthetic datasets: runway approach images with six pose labels,
//! lane-stripe images for backbone pre-training, partitioning and the
//! detection-error metric.
//!
//! Every sample `i` of a generator draws from its own streams derived from
//! `(seed, i)`, so a sample can be regenerated alone and bitwise.
//!
//! # Pose ranges
//!
//! | component              | range            |
//! |------------------------|------------------|
//! | along-track distance   | 300 m .. 1500 m  |
//! | vertical path angle    | 2° .. 4°         |
//! | lateral path angle     | −3° .. 3°        |
//! | yaw                    | −4° .. 4°        |
//! | pitch                  | −3° .. 3°        |
//! | roll                   | −8° .. 8°        |
//!
//! The runway is a 1200 m × 60 m rectangle starting at the threshold. The
//! camera sits `d` metres before the threshold, displaced laterally and
//! vertically by the path angles, aims at the threshold and is then rotated
//! by yaw, pitch and roll. The horizontal field of view is 24°.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::rng::{self, stream_rng, SimRng};
use crate::tensor::Tensor;

pub const LABEL_DIM: usize = 6;
pub const MIN_IMAGE_SIZE: usize = 16;
/// Pose resampling attempts before generation fails.
pub const MAX_POSE_RETRIES: usize = 64;

pub const RUNWAY_LENGTH: f64 = 1200.0;
pub const RUNWAY_WIDTH: f64 = 60.0;
pub const HORIZONTAL_FOV_DEG: f64 = 24.0;

const DEG: f64 = PI / 180.0;

/// Physical `(low, high)` range of each label component, distances in metres
/// and angles in degrees.
pub const POSE_RANGES: [(f64, f64); LABEL_DIM] =
    [(300.0, 1500.0), (2.0, 4.0), (-3.0, 3.0), (-4.0, 4.0), (-3.0, 3.0), (-8.0, 8.0)];

pub const POSE_NAMES: [&str; LABEL_DIM] =
    ["along_track_distance", "vertical_path_angle", "lateral_path_angle", "yaw", "pitch", "roll"];

/// Six pose components normalized to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseLabel(pub [f64; LABEL_DIM]);

impl PoseLabel {
    pub fn new(normalized: [f64; LABEL_DIM]) -> Result<Self> {
        if normalized.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config(format!("pose label outside [0, 1]: {normalized:?}")));
        }
        Ok(Self(normalized))
    }

    pub fn midpoint() -> Self {
        Self([0.5; LABEL_DIM])
    }

    pub fn from_physical(physical: [f64; LABEL_DIM]) -> Result<Self> {
        let mut out = [0.0; LABEL_DIM];
        for (i, (&v, &(lo, hi))) in physical.iter().zip(&POSE_RANGES).enumerate() {
            out[i] = (v - lo) / (hi - lo);
        }
        Self::new(out)
    }

    pub fn physical(&self) -> [f64; LABEL_DIM] {
        let mut out = [0.0; LABEL_DIM];
        for (i, (&v, &(lo, hi))) in self.0.iter().zip(&POSE_RANGES).enumerate() {
            out[i] = lo + v * (hi - lo);
        }
        out
    }
}

/// Focal length in pixels for a square image of side `size`.
pub fn focal_length(size: usize) -> f64 {
    (size as f64 / 2.0) / libm::tan(HORIZONTAL_FOV_DEG / 2.0 * DEG)
}

/// Projected runway corners `(column, row)` in pixel units, ordered
/// near-left, near-right, far-right, far-left. `None` when a corner lies
/// behind the camera.
pub fn project_runway(pose: &PoseLabel, size: usize) -> Option<[(f64, f64); 4]> {
    let [d, vpa, lpa, yaw, pitch, roll] = pose.physical();
    let (vpa, lpa, yaw, pitch, roll) = (vpa * DEG, lpa * DEG, yaw * DEG, pitch * DEG, roll * DEG);
    let f = focal_length(size);
    let c = size as f64 / 2.0;
    // World frame: x along the runway, y to the left, z up. The camera
    // starts looking along +x, pitched down onto the threshold.
    let cam = [-d, d * libm::tan(lpa), d * libm::tan(vpa)];
    let heading = libm::atan2(-cam[1], d);
    let depression = libm::atan2(cam[2], libm::hypot(d, cam[1]));
    let (yaw_total, tilt) = (heading + yaw, depression + pitch);
    let half_w = RUNWAY_WIDTH / 2.0;
    let world = [(0.0, half_w), (0.0, -half_w), (RUNWAY_LENGTH, -half_w), (RUNWAY_LENGTH, half_w)];
    let mut out = [(0.0, 0.0); 4];
    for (k, &(wx, wy)) in world.iter().enumerate() {
        let (px, py, pz) = (wx - cam[0], wy - cam[1], -cam[2]);
        // Undo heading about z.
        let (sy, cy) = (libm::sin(yaw_total), libm::cos(yaw_total));
        let a = cy * px + sy * py;
        let b = -sy * px + cy * py;
        // Undo downward tilt about the lateral axis.
        let (st, ct) = (libm::sin(tilt), libm::cos(tilt));
        let forward = ct * a - st * pz;
        let up = st * a + ct * pz;
        if forward <= 1e-6 {
            return None;
        }
        let (right, down) = (-b, -up);
        let (sr, cr) = (libm::sin(roll), libm::cos(roll));
        let r = cr * right + sr * down;
        let dn = -sr * right + cr * down;
        out[k] = (c + f * r / forward, c + f * dn / forward);
    }
    Some(out)
}

/// Shoelace area of a polygon.
pub fn polygon_area(corners: &[(f64, f64)]) -> f64 {
    let n = corners.len();
    let twice: f64 = (0..n)
        .map(|i| {
            let (x0, y0) = corners[i];
            let (x1, y1) = corners[(i + 1) % n];
            x0 * y1 - x1 * y0
        })
        .sum();
    libm::fabs(twice) / 2.0
}

fn inside_convex(corners: &[(f64, f64); 4], x: f64, y: f64) -> bool {
    let mut sign = 0.0;
    for i in 0..4 {
        let (x0, y0) = corners[i];
        let (x1, y1) = corners[(i + 1) % 4];
        let cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0);
        if cross != 0.0 {
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
    }
    true
}

/// Fraction of each pixel covered by the projected runway, 4×4 supersampled.
pub fn runway_coverage(corners: &[(f64, f64); 4], size: usize) -> Vec<f64> {
    const SUB: usize = 4;
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in corners {
        lo_x = lo_x.min(x);
        hi_x = hi_x.max(x);
        lo_y = lo_y.min(y);
        hi_y = hi_y.max(y);
    }
    let mut cov = vec![0.0; size * size];
    for row in 0..size {
        if (row as f64 + 1.0) < lo_y || (row as f64) > hi_y {
            continue;
        }
        for col in 0..size {
            if (col as f64 + 1.0) < lo_x || (col as f64) > hi_x {
                continue;
            }
            let mut hits = 0;
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let x = col as f64 + (sx as f64 + 0.5) / SUB as f64;
                    let y = row as f64 + (sy as f64 + 0.5) / SUB as f64;
                    if inside_convex(corners, x, y) {
                        hits += 1;
                    }
                }
            }
            cov[row * size + col] = hits as f64 / (SUB * SUB) as f64;
        }
    }
    cov
}

/// One generated image with its normalized label.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// `3 × H × W`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: [f64; LABEL_DIM],
    pub seed: u64,
    pub index: u64,
}

/// Smooth per-channel texture: a base colour plus a few random sinusoids.
fn textured_background(base: [f64; 3], amplitude: f64, size: usize, rng: &mut SimRng) -> Vec<f64> {
    let mut img = vec![0.0; 3 * size * size];
    for (ch, &b) in base.iter().enumerate() {
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                let angle = 2.0 * PI * rng::uniform(rng);
                let freq = (0.5 + 2.5 * rng::uniform(rng)) * 2.0 * PI / size as f64;
                let phase = 2.0 * PI * rng::uniform(rng);
                (freq * libm::cos(angle), freq * libm::sin(angle), phase)
            })
            .collect();
        for row in 0..size {
            for col in 0..size {
                let t: f64 = waves
                    .iter()
                    .map(|&(kx, ky, p)| libm::sin(kx * col as f64 + ky * row as f64 + p))
                    .sum::<f64>()
                    / 3.0;
                img[(ch * size + row) * size + col] = b + amplitude * t;
            }
        }
    }
    img
}

fn add_noise_and_clamp(img: &mut [f64], sigma: f64, rng: &mut SimRng) {
    for v in img.iter_mut() {
        *v = (*v + sigma * rng::normal(rng)).clamp(0.0, 1.0);
    }
}

const GRASS: [f64; 3] = [0.24, 0.34, 0.18];
const TARMAC: [f64; 3] = [0.85, 0.85, 0.82];
const PIXEL_NOISE: f64 = 0.02;

/// Draws a pose whose runway projects at least partly into the frame.
pub fn sample_visible_pose(rng: &mut SimRng, size: usize) -> Result<(PoseLabel, [(f64, f64); 4])> {
    for _ in 0..MAX_POSE_RETRIES {
        let mut v = [0.0; LABEL_DIM];
        v.iter_mut().for_each(|x| *x = rng::uniform(rng));
        let pose = PoseLabel(v);
        if let Some(corners) = project_runway(&pose, size) {
            if runway_coverage(&corners, size).iter().any(|&c| c > 0.0) {
                return Ok((pose, corners));
            }
        }
    }
    Err(Error::Config(format!("no visible runway pose after {MAX_POSE_RETRIES} attempts")))
}

/// Renders the runway for `pose` using the texture and noise streams of `(seed, index)`.
pub fn render_runway(pose: &PoseLabel, size: usize, seed: u64, index: u64) -> Result<Tensor> {
    let corners = project_runway(pose, size).ok_or_else(|| Error::Config("runway behind the camera".into()))?;
    let cov = runway_coverage(&corners, size);
    let mut img = textured_background(GRASS, 0.06, size, &mut stream_rng(seed, &[index, 1]));
    for (ch, &t) in TARMAC.iter().enumerate() {
        for (p, &a) in img[ch * size * size..(ch + 1) * size * size].iter_mut().zip(&cov) {
            *p = (1.0 - a) * *p + a * t;
        }
    }
    add_noise_and_clamp(&mut img, PIXEL_NOISE, &mut stream_rng(seed, &[index, 2]));
    Tensor::new(vec![3, size, size], img)
}

pub fn runway_sample(seed: u64, index: u64, size: usize) -> Result<SyntheticSample> {
    if size < MIN_IMAGE_SIZE {
        return Err(Error::Config(format!("image size must be at least {MIN_IMAGE_SIZE}, got {size}")));
    }
    let (pose, _) = sample_visible_pose(&mut stream_rng(seed, &[index, 0]), size)?;
    Ok(SyntheticSample { image: render_runway(&pose, size, seed, index)?, label: pose.0, seed, index })
}

pub fn gen_runway(seed: u64, count: usize, size: usize) -> Result<Vec<SyntheticSample>> {
    if count == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    (0..count as u64).map(|i| runway_sample(seed, i, size)).collect()
}

/// Parameters of a lane image. Stripes run from the bottom edge towards a
/// vanishing point above the frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneParams {
    pub stripes: usize,
    /// Stripe half-width in pixels at the bottom row.
    pub half_width: f64,
    /// Distance between neighbouring stripes at the bottom row, pixels.
    pub spacing: f64,
    /// Column of the leftmost stripe at the bottom row.
    pub offset: f64,
    pub vanish_col: f64,
    /// Negative: rows above the top edge.
    pub vanish_row: f64,
}

pub const MAX_STRIPES: usize = 4;

impl LaneParams {
    pub fn sample(rng: &mut SimRng, size: usize) -> Self {
        let s = size as f64;
        let stripes = rng::index(rng, MAX_STRIPES + 1);
        let half_width = 0.5 + 1.5 * rng::uniform(rng);
        let spacing = s * (0.15 + 0.15 * rng::uniform(rng));
        let span = spacing * stripes.saturating_sub(1) as f64;
        let offset = (s - span) * (0.2 + 0.6 * rng::uniform(rng));
        let vanish_col = s * (0.3 + 0.4 * rng::uniform(rng));
        let vanish_row = -s * (0.5 + 1.5 * rng::uniform(rng));
        Self { stripes, half_width, spacing, offset, vanish_col, vanish_row }
    }

    /// Six normalized values describing the stripes.
    pub fn label(&self, size: usize) -> [f64; LABEL_DIM] {
        let s = size as f64;
        let clamp = |v: f64| v.clamp(0.0, 1.0);
        [
            self.stripes as f64 / MAX_STRIPES as f64,
            clamp((self.half_width - 0.5) / 1.5),
            clamp((self.spacing / s - 0.15) / 0.15),
            clamp(self.offset / s),
            clamp((self.vanish_col / s - 0.3) / 0.4),
            clamp((-self.vanish_row / s - 0.5) / 1.5),
        ]
    }

    /// Per-pixel stripe membership, 4×4 supersampled coverage.
    pub fn mask(&self, size: usize) -> Vec<f64> {
        const SUB: usize = 4;
        let h = size as f64;
        let mut m = vec![0.0; size * size];
        if self.stripes == 0 {
            return m;
        }
        for row in 0..size {
            for col in 0..size {
                let mut hits = 0;
                for sy in 0..SUB {
                    for sx in 0..SUB {
                        let x = col as f64 + (sx as f64 + 0.5) / SUB as f64;
                        let y = row as f64 + (sy as f64 + 0.5) / SUB as f64;
                        let t = (y - self.vanish_row) / (h - self.vanish_row);
                        let on = (0..self.stripes).any(|k| {
                            let base = self.offset + k as f64 * self.spacing;
                            let centre = self.vanish_col + (base - self.vanish_col) * t;
                            libm::fabs(x - centre) <= self.half_width * t
                        });
                        if on {
                            hits += 1;
                        }
                    }
                }
                m[row * size + col] = hits as f64 / (SUB * SUB) as f64;
            }
        }
        m
    }
}

const ROAD: [f64; 3] = [0.32, 0.32, 0.34];
const PAINT: [f64; 3] = [0.92, 0.9, 0.75];

/// Lane image for explicit parameters, using the texture and noise streams of `(seed, index)`.
pub fn render_lanes(params: &LaneParams, size: usize, seed: u64, index: u64) -> Result<Tensor> {
    let mask = params.mask(size);
    let mut img = textured_background(ROAD, 0.05, size, &mut stream_rng(seed, &[index, 1]));
    for (ch, &t) in PAINT.iter().enumerate() {
        for (p, &a) in img[ch * size * size..(ch + 1) * size * size].iter_mut().zip(&mask) {
            *p = (1.0 - a) * *p + a * t;
        }
    }
    add_noise_and_clamp(&mut img, PIXEL_NOISE, &mut stream_rng(seed, &[index, 2]));
    Tensor::new(vec![3, size, size], img)
}

pub fn lane_sample(seed: u64, index: u64, size: usize) -> Result<SyntheticSample> {
    if size < MIN_IMAGE_SIZE {
        return Err(Error::Config(format!("image size must be at least {MIN_IMAGE_SIZE}, got {size}")));
    }
    let params = LaneParams::sample(&mut stream_rng(seed, &[index, 0]), size);
    Ok(SyntheticSample { image: render_lanes(&params, size, seed, index)?, label: params.label(size), seed, index })
}

pub fn gen_lanes(seed: u64, count: usize, size: usize) -> Result<Vec<SyntheticSample>> {
    (0..count as u64).map(|i| lane_sample(seed, i, size)).collect()
}

/// Images and labels packed for minibatching.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    image_shape: [usize; 3],
    images: Vec<f64>,
    labels: Vec<f64>,
}

impl Dataset {
    pub fn new(image_shape: [usize; 3], images: Vec<f64>, labels: Vec<f64>) -> Result<Self> {
        let per = image_shape.iter().product::<usize>();
        if per == 0 || !images.len().is_multiple_of(per) || labels.len() != images.len() / per * LABEL_DIM {
            return Err(Error::Config(format!(
                "dataset buffers disagree: {} image values of shape {image_shape:?}, {} label values",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self { image_shape, images, labels })
    }

    pub fn from_samples(samples: &[SyntheticSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Config("empty sample list".into()))?;
        let s = first.image.shape();
        let image_shape = [s[0], s[1], s[2]];
        let mut images = Vec::with_capacity(samples.len() * first.image.numel());
        let mut labels = Vec::with_capacity(samples.len() * LABEL_DIM);
        for smp in samples {
            smp.image.expect_shape("dataset", &image_shape)?;
            images.extend_from_slice(smp.image.data());
            labels.extend_from_slice(&smp.label);
        }
        Self::new(image_shape, images, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len() / LABEL_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn images(&self) -> &[f64] {
        &self.images
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> &[f64] {
        &self.labels[i * LABEL_DIM..(i + 1) * LABEL_DIM]
    }

    /// `(N×C×H×W images, N×6 labels)` for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        if indices.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let per = self.image_shape.iter().product::<usize>();
        let mut x = Vec::with_capacity(indices.len() * per);
        let mut y = Vec::with_capacity(indices.len() * LABEL_DIM);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Config(format!("sample index {i} out of range for {} samples", self.len())));
            }
            x.extend_from_slice(&self.images[i * per..(i + 1) * per]);
            y.extend_from_slice(self.label(i));
        }
        let [c, h, w] = self.image_shape;
        Ok((Tensor::from_parts(vec![indices.len(), c, h, w], x), Tensor::from_parts(vec![indices.len(), LABEL_DIM], y)))
    }

    pub fn all(&self) -> Result<(Tensor, Tensor)> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (x, y) = self.batch(indices)?;
        Self::new(self.image_shape, x.into_data(), y.into_data())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PartitionScheme {
    #[default]
    Equal,
    /// Extension for non-IID stress: contiguous blocks after sorting by the
    /// first label component.
    Skewed,
}

impl core::str::FromStr for PartitionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "equal" => Ok(Self::Equal),
            "skewed" => Ok(Self::Skewed),
            other => Err(Error::Config(format!("unknown partition scheme {other:?}"))),
        }
    }
}

impl PartitionScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Equal => "equal",
            Self::Skewed => "skewed",
        }
    }
}

/// Index sets of a disjoint cover of `0..n` with sizes differing by at most one.
pub fn partition_indices(
    n: usize,
    labels: &[f64],
    clients: usize,
    scheme: PartitionScheme,
    rng: &mut SimRng,
) -> Result<Vec<Vec<usize>>> {
    if clients == 0 {
        return Err(Error::Config("client count must be at least 1".into()));
    }
    if clients > n {
        return Err(Error::Config(format!("{clients} clients for {n} samples")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    match scheme {
        PartitionScheme::Equal => rng::shuffle(rng, &mut order),
        PartitionScheme::Skewed => {
            order.sort_by(|&a, &b| labels[a * LABEL_DIM].total_cmp(&labels[b * LABEL_DIM]).then(a.cmp(&b)))
        }
    }
    let (base, extra) = (n / clients, n % clients);
    let mut out = Vec::with_capacity(clients);
    let mut start = 0;
    for m in 0..clients {
        let len = base + usize::from(m < extra);
        out.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

pub fn partition(data: &Dataset, clients: usize, scheme: PartitionScheme, rng: &mut SimRng) -> Result<Vec<Dataset>> {
    partition_indices(data.len(), data.labels(), clients, scheme, rng)?
        .iter()
        .map(|idx| data.subset(idx))
        .collect()
}

/// Mean absolute error over samples and components, as a percentage.
pub fn detection_error(predictions: &Tensor, labels: &Tensor) -> Result<f64> {
    if predictions.shape() != labels.shape() || predictions.numel() == 0 {
        return Err(crate::error::dim_err(
            "detection_error",
            format!("predictions {:?} vs labels {:?}", predictions.shape(), labels.shape()),
        ));
    }
    let sum: f64 = predictions.data().iter().zip(labels.data()).map(|(p, t)| libm::fabs(p - t)).sum();
    Ok(100.0 * sum / predictions.numel() as f64)
}
