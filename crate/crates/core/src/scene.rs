//! Synthetic scenes: camera frames of face targets over a noise background.
//!
//! A face is a filled skin-hue ellipse; a mask is a contrasting band across
//! the lower half of the ellipse, inset from the sides so the face region
//! stays 4-connected around it. Generation is deterministic per seed. The
//! same renderer drives both the labeled dataset (frames with a centered,
//! jittered face) and the in-flight camera view (projected world targets).

use std::f64::consts::PI;
use std::path::Path;

use thiserror::Error;

use crate::rng::{SeededRng, Stream};
use crate::tensor::Tensor;

pub const FRAME_DIM: usize = 96;
const FRAME_CENTER: f64 = (FRAME_DIM / 2) as f64;

/// Skin hue of a rendered face.
pub const FACE_COLOR: [u8; 3] = [205, 160, 120];
/// Hue of the protection-mask band.
pub const MASK_COLOR: [u8; 3] = [30, 34, 48];
/// Horizontal camera field of view, degrees (square frame, same vertical).
pub const FOV_DEG: f64 = 60.0;

/// Ellipse aspect: vertical radius over horizontal radius.
const FACE_ASPECT: f64 = 1.3;
/// Mask band geometry relative to the ellipse radii. The half-width stays
/// below the ellipse half-width at the band's bottom row
/// (sqrt(1 - 0.6^2) = 0.8) so a face-hue ring always surrounds the band and
/// the face stays one connected component.
const BAND_TOP: f64 = 0.05;
const BAND_BOTTOM: f64 = 0.62;
const BAND_HALF_WIDTH: f64 = 0.72;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene needs at least one target")]
    NoTargets,
    #[error("target {index} at ({x}, {y}) outside world extent {extent}")]
    TargetOutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        extent: f64,
    },
    #[error("frame has no ground-truth label")]
    Unlabeled,
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// Binary classification target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskLabel {
    Mask,
    NoMask,
}

impl MaskLabel {
    /// Class index in the model's output vector.
    pub fn class_index(self) -> usize {
        match self {
            MaskLabel::Mask => 0,
            MaskLabel::NoMask => 1,
        }
    }

    pub fn from_class_index(idx: usize) -> Option<Self> {
        match idx {
            0 => Some(MaskLabel::Mask),
            1 => Some(MaskLabel::NoMask),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskLabel::Mask => "mask",
            MaskLabel::NoMask => "nomask",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mask" => Some(MaskLabel::Mask),
            "nomask" | "no-mask" | "no_mask" => Some(MaskLabel::NoMask),
            _ => None,
        }
    }
}

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Ground truth attached to a rendered frame: the dominant (largest) face.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameTruth {
    pub bbox: BBox,
    pub label: MaskLabel,
    pub target_index: usize,
}

/// One 96x96 RGB camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Row-major RGB, 96*96*3 bytes.
    pub pixels: Vec<u8>,
    pub truth: Option<FrameTruth>,
}

impl Frame {
    pub fn label(&self) -> Result<MaskLabel, SceneError> {
        self.truth.map(|t| t.label).ok_or(SceneError::Unlabeled)
    }

    /// Model input: [1, 96, 96, 3] reals in [0, 1].
    pub fn to_input_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
        Tensor::real32(vec![1, FRAME_DIM, FRAME_DIM, 3], data).expect("fixed frame dims")
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let base = (y * FRAME_DIM + x) * 3;
        [
            self.pixels[base],
            self.pixels[base + 1],
            self.pixels[base + 2],
        ]
    }

    pub fn save_png(&self, path: &Path) -> Result<(), SceneError> {
        let img =
            image::RgbImage::from_raw(FRAME_DIM as u32, FRAME_DIM as u32, self.pixels.clone())
                .expect("buffer sized to frame");
        img.save(path).map_err(|source| SceneError::Image {
            path: path.display().to_string(),
            source,
        })
    }

    /// Load a PNG as a frame; other sizes are nearest-resized to 96x96.
    pub fn load_png(path: &Path) -> Result<Self, SceneError> {
        let img = image::open(path)
            .map_err(|source| SceneError::Image {
                path: path.display().to_string(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut pixels = vec![0u8; FRAME_DIM * FRAME_DIM * 3];
        for y in 0..FRAME_DIM {
            let sy = (y * h + h / 2) / FRAME_DIM;
            for x in 0..FRAME_DIM {
                let sx = (x * w + w / 2) / FRAME_DIM;
                let p = img.get_pixel(sx.min(w - 1) as u32, sy.min(h - 1) as u32);
                let base = (y * FRAME_DIM + x) * 3;
                pixels[base..base + 3].copy_from_slice(&p.0);
            }
        }
        Ok(Self {
            pixels,
            truth: None,
        })
    }
}

/// A person in the world: ground position plus face height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetSpec {
    /// World position of the face: x, y, height above ground (m).
    pub position: [f64; 3],
    pub label: MaskLabel,
}

/// World description for a mission.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    /// Half-extent of the square world around the origin, m.
    pub world_extent_m: f64,
    pub targets: Vec<TargetSpec>,
    /// Apparent face radius in pixels at 1 m distance.
    pub face_radius_px: f64,
    /// Background noise amplitude in [0, 1].
    pub noise_level: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.targets.is_empty() {
            return Err(SceneError::NoTargets);
        }
        for (index, t) in self.targets.iter().enumerate() {
            let [x, y, _] = t.position;
            if x.abs() > self.world_extent_m || y.abs() > self.world_extent_m {
                return Err(SceneError::TargetOutOfBounds {
                    index,
                    x,
                    y,
                    extent: self.world_extent_m,
                });
            }
        }
        Ok(())
    }

    /// A compact demo scene: `count` targets ringed around the origin with
    /// alternating labels.
    pub fn ring(count: usize, radius_m: f64, seed: u64) -> Self {
        let targets = (0..count)
            .map(|i| {
                let angle = 2.0 * PI * i as f64 / count.max(1) as f64;
                TargetSpec {
                    position: [radius_m * angle.cos(), radius_m * angle.sin(), 1.7],
                    label: if i % 2 == 0 {
                        MaskLabel::Mask
                    } else {
                        MaskLabel::NoMask
                    },
                }
            })
            .collect();
        Self {
            world_extent_m: radius_m.max(1.0) * 2.0,
            targets,
            face_radius_px: 40.0,
            noise_level: 0.1,
            seed,
        }
    }
}

/// Camera placement: at the drone, looking along its heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub position: [f64; 3],
    /// Radians, counter-clockwise from +x.
    pub yaw: f64,
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    if a < -PI {
        a += 2.0 * PI;
    }
    a
}

/// Pixel-space placement of one projected target.
#[derive(Debug, Clone, Copy)]
struct Projected {
    cx: f64,
    cy: f64,
    radius: f64,
    distance: f64,
    index: usize,
}

fn project(
    pose: &CameraPose,
    target: &TargetSpec,
    face_radius_px: f64,
    index: usize,
) -> Option<Projected> {
    let dx = target.position[0] - pose.position[0];
    let dy = target.position[1] - pose.position[1];
    let dz = target.position[2] - pose.position[2];
    let horizontal = (dx * dx + dy * dy).sqrt();
    let distance = (dx * dx + dy * dy + dz * dz).sqrt();
    if distance < 0.3 {
        return None;
    }
    let half_fov = (FOV_DEG / 2.0).to_radians();
    let azimuth = wrap_angle(dy.atan2(dx) - pose.yaw);
    let elevation = dz.atan2(horizontal);
    // allow partially visible faces slightly past the frame edge
    if azimuth.abs() > half_fov * 1.3 || elevation.abs() > half_fov * 1.3 {
        return None;
    }
    let scale = FRAME_CENTER / half_fov;
    Some(Projected {
        cx: FRAME_CENTER - azimuth * scale,
        cy: FRAME_CENTER - elevation * scale,
        radius: face_radius_px / distance,
        distance,
        index,
    })
}

fn fill_background(pixels: &mut [u8], rng: &mut SeededRng, noise_level: f64) {
    for px in pixels.iter_mut() {
        let n = (rng.unit_f64() * 2.0 - 1.0) * noise_level * 127.0;
        *px = (128.0 + n).clamp(0.0, 255.0) as u8;
    }
}

fn draw_face(pixels: &mut [u8], cx: f64, cy: f64, rx: f64, ry: f64, masked: bool) {
    let y0 = ((cy - ry).floor().max(0.0)) as usize;
    let y1 = ((cy + ry).ceil().min((FRAME_DIM - 1) as f64)) as usize;
    let x0 = ((cx - rx).floor().max(0.0)) as usize;
    let x1 = ((cx + rx).ceil().min((FRAME_DIM - 1) as f64)) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let nx = (x as f64 - cx) / rx;
            let ny = (y as f64 - cy) / ry;
            if nx * nx + ny * ny > 1.0 {
                continue;
            }
            let in_band = masked
                && (y as f64 - cy) >= BAND_TOP * ry
                && (y as f64 - cy) <= BAND_BOTTOM * ry
                && (x as f64 - cx).abs() <= BAND_HALF_WIDTH * rx;
            let color = if in_band { MASK_COLOR } else { FACE_COLOR };
            let base = (y * FRAME_DIM + x) * 3;
            pixels[base..base + 3].copy_from_slice(&color);
        }
    }
}

/// Render the camera view of the world. Farther faces draw first; ground
/// truth is the largest drawn face.
pub fn render_scene(spec: &SceneSpec, pose: &CameraPose, frame_index: u64) -> Frame {
    let mut rng = SeededRng::new(
        spec.seed ^ frame_index.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        Stream::Scene,
    );
    let mut pixels = vec![0u8; FRAME_DIM * FRAME_DIM * 3];
    fill_background(&mut pixels, &mut rng, spec.noise_level);

    let mut visible: Vec<Projected> = spec
        .targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| project(pose, t, spec.face_radius_px, i))
        .filter(|p| p.radius >= 0.5)
        .collect();
    // painter's order: far to near
    visible.sort_by(|a, b| b.distance.total_cmp(&a.distance));
    for p in &visible {
        let masked = spec.targets[p.index].label == MaskLabel::Mask;
        draw_face(
            &mut pixels,
            p.cx,
            p.cy,
            p.radius,
            FACE_ASPECT * p.radius,
            masked,
        );
    }
    let truth = visible
        .iter()
        .max_by(|a, b| a.radius.total_cmp(&b.radius))
        .map(|p| FrameTruth {
            bbox: BBox {
                cx: p.cx,
                cy: p.cy,
                w: 2.0 * p.radius,
                h: 2.0 * FACE_ASPECT * p.radius,
            },
            label: spec.targets[p.index].label,
            target_index: p.index,
        });
    Frame { pixels, truth }
}

/// Knobs for labeled dataset generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetParams {
    pub noise_level: f64,
    pub radius_min: i32,
    pub radius_max: i32,
    pub center_jitter_px: i32,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            noise_level: 0.05,
            radius_min: 23,
            radius_max: 26,
            center_jitter_px: 3,
        }
    }
}

fn dataset_frame(index: usize, seed: u64, params: &DatasetParams, label: MaskLabel) -> Frame {
    let mut rng = SeededRng::new(
        seed ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03),
        Stream::Dataset,
    );
    let mut pixels = vec![0u8; FRAME_DIM * FRAME_DIM * 3];
    fill_background(&mut pixels, &mut rng, params.noise_level);
    let j = params.center_jitter_px;
    let cx = FRAME_CENTER + f64::from(rng.range_i32(-j, j));
    let cy = FRAME_CENTER + f64::from(rng.range_i32(-j, j));
    let rx = f64::from(rng.range_i32(params.radius_min, params.radius_max));
    let ry = FACE_ASPECT * rx;
    draw_face(&mut pixels, cx, cy, rx, ry, label == MaskLabel::Mask);
    Frame {
        pixels,
        truth: Some(FrameTruth {
            bbox: BBox {
                cx,
                cy,
                w: 2.0 * rx,
                h: 2.0 * ry,
            },
            label,
            target_index: index,
        }),
    }
}

/// Deterministic balanced dataset: even indices are masked, odd are not,
/// so any even count splits exactly in half.
pub fn generate_dataset(count: usize, seed: u64, params: &DatasetParams) -> Vec<Frame> {
    (0..count)
        .map(|i| {
            let label = if i % 2 == 0 {
                MaskLabel::Mask
            } else {
                MaskLabel::NoMask
            };
            dataset_frame(i, seed, params, label)
        })
        .collect()
}
