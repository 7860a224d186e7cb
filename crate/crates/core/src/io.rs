//! File formats: PNG/PFM images, masks, the scene PLY with its text sidecar,
//! a flat tensor container, datasets on disk and training checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::appearance::{mlp_param_count, AppearanceMlp, EmbeddingTable, EMBEDDING_DIM};
use crate::model::{decode_lights, Model, TrainingView};
use crate::raster::Camera;
use crate::scene::{sky_position, ForegroundGaussian, Scene, SeedPoint, SkyDome, SkyGaussian};
use crate::shading::{Material, GAMMA};
use crate::trainer::{Moments, OptimizerState, TrainConfig, TrainState};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
}

fn format_err(path: &Path, msg: impl Into<String>) -> IoError {
    IoError::Format { path: path.to_path_buf(), msg: msg.into() }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::Io { path: path.to_path_buf(), source })
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Io { path: path.to_path_buf(), source })
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let io = |source| IoError::Io { path: path.to_path_buf(), source };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|source| IoError::Io { path: tmp.clone(), source })?;
    fs::rename(&tmp, path).map_err(io)
}

/// Row-major `H × W × 3` floating-point image.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbBuffer {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * 3, "buffer size");
        Self { width, height, data }
    }
}

/// 8-bit PNG as values in `[0, 1]`, without any transfer function.
pub fn read_png(path: &Path) -> Result<RgbBuffer, IoError> {
    let img = image::open(path).map_err(|source| IoError::Image { path: path.to_path_buf(), source })?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Ok(RgbBuffer::new(w as usize, h as usize, data))
}

pub fn write_png(path: &Path, img: &RgbBuffer) -> Result<(), IoError> {
    let bytes: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes).expect("buffer size");
    let mut out = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .map_err(|source| IoError::Image { path: path.to_path_buf(), source })?;
    write_atomic(path, &out)
}

/// Mask PNG where bright pixels (≥ 128 luma, nominally 255) are masked.
pub fn read_mask(path: &Path, width: usize, height: usize) -> Result<Vec<bool>, IoError> {
    let img = image::open(path).map_err(|source| IoError::Image { path: path.to_path_buf(), source })?.to_luma8();
    if (img.width() as usize, img.height() as usize) != (width, height) {
        return Err(format_err(
            path,
            format!("mask is {}x{}, expected {width}x{height}", img.width(), img.height()),
        ));
    }
    Ok(img.into_raw().into_iter().map(|v| v >= 128).collect())
}

pub fn write_mask(path: &Path, mask: &[bool], width: usize, height: usize) -> Result<(), IoError> {
    let data = mask.iter().flat_map(|m| [if *m { 1.0 } else { 0.0 }; 3]).collect();
    write_png(path, &RgbBuffer::new(width, height, data))
}

/// Portable float map, color (`PF`) or grayscale (`Pf`, replicated to rgb),
/// either endianness. Rows are returned top to bottom.
pub fn read_pfm(path: &Path) -> Result<RgbBuffer, IoError> {
    let bytes = read_bytes(path)?;
    let mut pos = 0;
    let mut token = || -> Option<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let bad = |m: &str| format_err(path, format!("malformed PFM header: {m}"));
    let channels = match token().as_deref() {
        Some("PF") => 3,
        Some("Pf") => 1,
        other => return Err(bad(&format!("magic {other:?}"))),
    };
    let width: usize = token().and_then(|t| t.parse().ok()).ok_or_else(|| bad("width"))?;
    let height: usize = token().and_then(|t| t.parse().ok()).ok_or_else(|| bad("height"))?;
    let scale: f64 = token().and_then(|t| t.parse().ok()).ok_or_else(|| bad("scale"))?;
    if width == 0 || height == 0 || scale == 0.0 {
        return Err(bad("zero dimension or scale"));
    }
    let body = &bytes[(pos + 1).min(bytes.len())..];
    let count = width * height * channels;
    if body.len() < count * 4 {
        return Err(format_err(path, format!("PFM body has {} bytes, expected {}", body.len(), count * 4)));
    }
    let little = scale < 0.0;
    let value = |i: usize| {
        let b = [body[i * 4], body[i * 4 + 1], body[i * 4 + 2], body[i * 4 + 3]];
        (if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }) as f64
    };
    let mut data = vec![0.0; width * height * 3];
    for row in 0..height {
        let dst_row = height - 1 - row;
        for x in 0..width {
            for c in 0..3 {
                let src = (row * width + x) * channels + if channels == 3 { c } else { 0 };
                data[(dst_row * width + x) * 3 + c] = value(src);
            }
        }
    }
    Ok(RgbBuffer::new(width, height, data))
}

fn encode_pfm(width: usize, height: usize, channels: usize, data: &[f64]) -> Vec<u8> {
    let magic = if channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{magic}\n{width} {height}\n-1.0\n").into_bytes();
    for row in (0..height).rev() {
        for v in &data[row * width * channels..(row + 1) * width * channels] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

/// Little-endian color PFM.
pub fn write_pfm(path: &Path, img: &RgbBuffer) -> Result<(), IoError> {
    write_atomic(path, &encode_pfm(img.width, img.height, 3, &img.data))
}

/// Little-endian grayscale PFM (`H × W` values).
pub fn write_pfm_gray(path: &Path, width: usize, height: usize, data: &[f64]) -> Result<(), IoError> {
    assert_eq!(data.len(), width * height, "buffer size");
    write_atomic(path, &encode_pfm(width, height, 1, data))
}

/// Inverse display transfer `v^2.2` applied to 8-bit values.
pub fn linearize(v: f64) -> f64 {
    v.max(0.0).powf(GAMMA)
}

const PLY_PROPERTIES: [&str; 18] = [
    "x", "y", "z", "qw", "qx", "qy", "qz", "log_sx", "log_sy", "log_sz", "opacity_logit", "albedo_r", "albedo_g",
    "albedo_b", "roughness", "is_sky", "theta", "phi",
];
const PLY_SKY_FLAG: usize = 15;

/// Binary little-endian PLY with one `vertex` row per Gaussian, foreground
/// first. Sky rows carry their dome position in `x, y, z` for viewers.
pub fn encode_scene_ply(scene: &Scene) -> Vec<u8> {
    let n = scene.foreground.len() + scene.sky.len();
    let mut header = format!("ply\nformat binary_little_endian 1.0\nelement vertex {n}\n");
    for (i, name) in PLY_PROPERTIES.iter().enumerate() {
        let ty = if i == PLY_SKY_FLAG { "uchar" } else { "double" };
        let _ = writeln!(header, "property {ty} {name}");
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    let mut row = |values: [f64; 18]| {
        for (i, v) in values.iter().enumerate() {
            if i == PLY_SKY_FLAG {
                out.push(*v as u8);
            } else {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    };
    for g in &scene.foreground {
        let [a, b, c] = g.material.albedo;
        let [qw, qx, qy, qz] = g.rotation;
        let [s0, s1, s2] = g.log_scales;
        let p = g.position;
        row([p.x, p.y, p.z, qw, qx, qy, qz, s0, s1, s2, g.opacity_logit, a, b, c, g.material.roughness, 0.0, 0.0, 0.0]);
    }
    for g in &scene.sky {
        let p = sky_position(g, &scene.dome);
        let [qw, qx, qy, qz] = g.rotation;
        let [s0, s1, s2] = g.log_scales;
        row([p.x, p.y, p.z, qw, qx, qy, qz, s0, s1, s2, g.opacity_logit, 0.0, 0.0, 0.0, 0.0, 1.0, g.theta, g.phi]);
    }
    out
}

pub fn decode_scene_ply(bytes: &[u8], dome: SkyDome, path: &Path) -> Result<Scene, IoError> {
    let marker = b"end_header\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| format_err(path, "PLY header has no end_header"))?;
    let header = String::from_utf8_lossy(&bytes[..end]);
    let body = &bytes[end + marker.len()..];
    let mut lines = header.lines();
    if lines.next() != Some("ply") || lines.next() != Some("format binary_little_endian 1.0") {
        return Err(format_err(path, "expected a binary little-endian PLY"));
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("element vertex "))
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| format_err(path, "missing vertex element"))?;
    let props: Vec<&str> = lines.collect();
    let expected: Vec<String> = PLY_PROPERTIES
        .iter()
        .enumerate()
        .map(|(i, name)| format!("property {} {name}", if i == PLY_SKY_FLAG { "uchar" } else { "double" }))
        .collect();
    if props != expected {
        return Err(format_err(path, "unexpected vertex properties"));
    }
    let stride = 17 * 8 + 1;
    if body.len() != count * stride {
        return Err(format_err(path, format!("vertex data has {} bytes, expected {}", body.len(), count * stride)));
    }
    let mut scene = Scene { foreground: vec![], sky: vec![], dome };
    for r in 0..count {
        let mut at = r * stride;
        let mut v = [0.0; 18];
        for (i, slot) in v.iter_mut().enumerate() {
            if i == PLY_SKY_FLAG {
                *slot = body[at] as f64;
                at += 1;
            } else {
                *slot = f64::from_le_bytes(body[at..at + 8].try_into().expect("8 bytes"));
                at += 8;
            }
        }
        let rotation = [v[3], v[4], v[5], v[6]];
        let log_scales = [v[7], v[8], v[9]];
        if v[PLY_SKY_FLAG] != 0.0 {
            scene.sky.push(SkyGaussian { theta: v[16], phi: v[17], rotation, log_scales, opacity_logit: v[10] });
        } else {
            if !scene.sky.is_empty() {
                return Err(format_err(path, "foreground rows must precede sky rows"));
            }
            scene.foreground.push(ForegroundGaussian {
                position: Vector3::new(v[0], v[1], v[2]),
                rotation,
                log_scales,
                opacity_logit: v[10],
                material: Material { albedo: [v[11], v[12], v[13]], roughness: v[14] },
            });
        }
    }
    Ok(scene)
}

/// Scene sidecar: dome center and radius, then the decoded light and sky
/// coefficients of every training image.
pub fn encode_sidecar(model: &Model, image_ids: &[String]) -> String {
    let c = model.scene.dome.center();
    let mut s = format!("dome_center {} {} {}\ndome_radius {}\n", c.x, c.y, c.z, model.scene.dome.radius);
    for (i, id) in image_ids.iter().enumerate() {
        if let Ok((light, sky)) = decode_lights(model, i) {
            let _ = write!(s, "light {id}\n{}sky {id}\n{}", light.to_text(), sky.to_text());
        }
    }
    s
}

pub fn decode_sidecar_dome(text: &str, path: &Path) -> Result<SkyDome, IoError> {
    let mut center = None;
    let mut radius = None;
    for line in text.lines() {
        let mut t = line.split_whitespace();
        match t.next() {
            Some("dome_center") => {
                let v: Vec<f64> = t.filter_map(|x| x.parse().ok()).collect();
                if v.len() == 3 {
                    center = Some(Vector3::new(v[0], v[1], v[2]));
                }
            }
            Some("dome_radius") => radius = t.next().and_then(|x| x.parse::<f64>().ok()),
            _ => {}
        }
    }
    match (center, radius) {
        (Some(c), Some(r)) if r > 0.0 => Ok(SkyDome::new(c, r)),
        _ => Err(format_err(path, "missing or invalid dome_center/dome_radius")),
    }
}

const TENSOR_MAGIC: &[u8; 8] = b"SPLTNSR2";

/// A named row-major `f64` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape");
        Self { name: name.into(), shape, data }
    }

    pub fn vector(name: impl Into<String>, data: Vec<f64>) -> Self {
        Self::new(name, vec![data.len()], data)
    }
}

/// Little-endian container: magic, tensor count, then per tensor its name,
/// rank, dimensions and values.
pub fn encode_tensors(tensors: &[Tensor]) -> Vec<u8> {
    let mut out = TENSOR_MAGIC.to_vec();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(bytes: &[u8], path: &Path) -> Result<Vec<Tensor>, IoError> {
    let truncated = || format_err(path, "truncated tensor file");
    if bytes.len() < 12 || &bytes[..8] != TENSOR_MAGIC {
        return Err(format_err(path, "not a tensor file"));
    }
    let mut at: usize = 8;
    let mut take = |n: usize| -> Result<&[u8], IoError> {
        let s = bytes.get(at..at.checked_add(n).ok_or_else(truncated)?).ok_or_else(truncated)?;
        at += n;
        Ok(s)
    };
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let count = u32_at(take(4)?);
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = u32_at(take(4)?);
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| format_err(path, "tensor name is not UTF-8"))?;
        let rank = u32_at(take(4)?);
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).ok_or_else(truncated)?;
        let raw = take(n.checked_mul(8).ok_or_else(truncated)?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push(Tensor { name, shape, data });
    }
    if at != bytes.len() {
        return Err(format_err(path, "trailing bytes after the last tensor"));
    }
    Ok(out)
}

/// One line per camera: `id fx fy cx cy w h` then the world-to-camera
/// `[R | t]` as 12 row-major numbers. Blank lines and `#` comments are skipped.
pub fn parse_cameras(text: &str, path: &Path) -> Result<Vec<(String, Camera)>, IoError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: String| format_err(path, format!("line {}: {m}", n + 1));
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 19 {
            return Err(bad(format!("expected 19 fields, found {}", t.len())));
        }
        let num = |i: usize| t[i].parse::<f64>().map_err(|e| bad(format!("field {}: {e}", i + 1)));
        let dim = |i: usize| t[i].parse::<usize>().map_err(|e| bad(format!("field {}: {e}", i + 1)));
        let m: Vec<f64> = (7..19).map(num).collect::<Result<_, _>>()?;
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vector3::new(m[3], m[7], m[11]);
        let cam = Camera::new(rotation, translation, num(1)?, num(2)?, num(3)?, num(4)?, dim(5)?, dim(6)?)
            .map_err(|e| bad(e.to_string()))?;
        if out.iter().any(|(id, _)| id == t[0]) {
            return Err(bad(format!("duplicate image id {}", t[0])));
        }
        out.push((t[0].to_string(), cam));
    }
    Ok(out)
}

pub fn format_cameras(cameras: &[(String, Camera)]) -> String {
    let mut s = String::from("# id fx fy cx cy width height r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2\n");
    for (id, c) in cameras {
        let _ = write!(s, "{id} {} {} {} {} {} {}", c.fx, c.fy, c.cx, c.cy, c.width, c.height);
        for r in 0..3 {
            let _ = write!(s, " {} {} {} {}", c.rotation[(r, 0)], c.rotation[(r, 1)], c.rotation[(r, 2)], c.translation[r]);
        }
        s.push('\n');
    }
    s
}

pub fn read_cameras(path: &Path) -> Result<Vec<(String, Camera)>, IoError> {
    parse_cameras(&read_text(path)?, path)
}

/// `x y z r g b` per line with 8-bit colors.
pub fn read_points(path: &Path) -> Result<Vec<SeedPoint>, IoError> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| format_err(path, format!("line {}: {e}", n + 1)))?;
        if v.len() != 6 || v.iter().any(|x| !x.is_finite()) {
            return Err(format_err(path, format!("line {}: expected 6 finite numbers", n + 1)));
        }
        out.push(SeedPoint { position: Vector3::new(v[0], v[1], v[2]), color: [v[3] / 255.0, v[4] / 255.0, v[5] / 255.0] });
    }
    Ok(out)
}

pub fn format_points(points: &[SeedPoint]) -> String {
    let mut s = String::new();
    for p in points {
        let c = p.color.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        let _ = writeln!(s, "{} {} {} {} {} {}", p.position.x, p.position.y, p.position.z, c[0], c[1], c[2]);
    }
    s
}

/// Training images, masks and the seed cloud.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub views: Vec<TrainingView>,
    pub points: Vec<SeedPoint>,
}

/// Loads `cameras.txt`, `points.txt`, `images/<id>.png` and the optional
/// `masks_sky/<id>.png` and `masks_occluder/<id>.png` (absent means unmasked).
pub fn load_dataset(dir: &Path) -> Result<Dataset, IoError> {
    let cameras = read_cameras(&dir.join("cameras.txt"))?;
    if cameras.is_empty() {
        return Err(format_err(&dir.join("cameras.txt"), "no cameras"));
    }
    let points = read_points(&dir.join("points.txt"))?;
    let mut views = Vec::with_capacity(cameras.len());
    for (index, (id, camera)) in cameras.into_iter().enumerate() {
        let path = dir.join("images").join(format!("{id}.png"));
        let img = read_png(&path)?;
        if (img.width, img.height) != (camera.width, camera.height) {
            return Err(format_err(
                &path,
                format!("image is {}x{}, camera expects {}x{}", img.width, img.height, camera.width, camera.height),
            ));
        }
        let mask = |sub: &str| -> Result<Vec<bool>, IoError> {
            let p = dir.join(sub).join(format!("{id}.png"));
            if p.exists() {
                read_mask(&p, camera.width, camera.height)
            } else {
                Ok(vec![false; camera.pixel_count()])
            }
        };
        let sky_mask = mask("masks_sky")?;
        let occluder_mask = mask("masks_occluder")?;
        views.push(TrainingView { id, index, camera, image: img.data, sky_mask, occluder_mask });
    }
    Ok(Dataset { views, points })
}

pub fn write_dataset(dir: &Path, views: &[TrainingView], points: &[SeedPoint]) -> Result<(), IoError> {
    let cams: Vec<(String, Camera)> = views.iter().map(|v| (v.id.clone(), v.camera)).collect();
    write_atomic(&dir.join("cameras.txt"), format_cameras(&cams).as_bytes())?;
    write_atomic(&dir.join("points.txt"), format_points(points).as_bytes())?;
    for v in views {
        let (w, h) = (v.camera.width, v.camera.height);
        write_png(&dir.join("images").join(format!("{}.png", v.id)), &RgbBuffer::new(w, h, v.image.clone()))?;
        write_mask(&dir.join("masks_sky").join(format!("{}.png", v.id)), &v.sky_mask, w, h)?;
        write_mask(&dir.join("masks_occluder").join(format!("{}.png", v.id)), &v.occluder_mask, w, h)?;
    }
    Ok(())
}

pub fn load_config(path: &Path) -> Result<TrainConfig, IoError> {
    toml::from_str(&read_text(path)?).map_err(|e| format_err(path, e.message().to_string()))
}

pub fn format_config(config: &TrainConfig) -> String {
    toml::to_string(config).expect("config serializes")
}

/// A training state together with the identities of its images.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub image_ids: Vec<String>,
    pub cameras: Vec<(String, Camera)>,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn image_index(&self, id: &str) -> Option<usize> {
        self.image_ids.iter().position(|i| i == id)
    }

    pub fn camera(&self, id: &str) -> Option<&Camera> {
        self.cameras.iter().find(|(i, _)| i == id).map(|(_, c)| c)
    }
}

fn weight_tensors(state: &TrainState) -> Vec<Tensor> {
    let o = &state.optimizer;
    let mut out = vec![Tensor::vector("iteration", vec![state.iteration as f64])];
    for (name, shape, range) in AppearanceMlp::tensors() {
        out.push(Tensor::new(format!("mlp.{name}"), shape.to_vec(), state.model.mlp.params[range].to_vec()));
    }
    let e = &state.model.embeddings;
    out.push(Tensor::new("embeddings", vec![e.rows(), EMBEDDING_DIM], e.values.clone()));
    out.push(Tensor::vector("adam.step", vec![o.step as f64]));
    for (name, m) in [
        ("foreground", &o.foreground),
        ("sky", &o.sky),
        ("radius", &o.radius),
        ("mlp", &o.mlp),
        ("embeddings", &o.embeddings),
    ] {
        out.push(Tensor::vector(format!("adam.{name}.m"), m.m.clone()));
        out.push(Tensor::vector(format!("adam.{name}.v"), m.v.clone()));
    }
    out.push(Tensor::vector("densify.grad_accum", state.grad_accum.clone()));
    out.push(Tensor::vector("densify.grad_count", state.grad_count.clone()));
    out
}

/// Writes a checkpoint directory atomically: files go to `<dir>.partial`,
/// which then replaces `dir`.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<(), IoError> {
    let mut partial = dir.as_os_str().to_owned();
    partial.push(".partial");
    let partial = PathBuf::from(partial);
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| IoError::Io { path: p, source }
    };
    if partial.exists() {
        fs::remove_dir_all(&partial).map_err(io(&partial))?;
    }
    fs::create_dir_all(&partial).map_err(io(&partial))?;
    let state = &ckpt.state;
    fs::write(partial.join("scene.ply"), encode_scene_ply(&state.model.scene)).map_err(io(&partial))?;
    fs::write(partial.join("scene.txt"), encode_sidecar(&state.model, &ckpt.image_ids)).map_err(io(&partial))?;
    fs::write(partial.join("weights.bin"), encode_tensors(&weight_tensors(state))).map_err(io(&partial))?;
    fs::write(partial.join("image_ids.txt"), ckpt.image_ids.join("\n") + "\n").map_err(io(&partial))?;
    fs::write(partial.join("cameras.txt"), format_cameras(&ckpt.cameras)).map_err(io(&partial))?;
    fs::write(partial.join("config.toml"), format_config(&ckpt.config)).map_err(io(&partial))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io(dir))?;
    }
    fs::rename(&partial, dir).map_err(io(dir))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, IoError> {
    let sidecar = dir.join("scene.txt");
    let dome = decode_sidecar_dome(&read_text(&sidecar)?, &sidecar)?;
    let ply = dir.join("scene.ply");
    let scene = decode_scene_ply(&read_bytes(&ply)?, dome, &ply)?;
    let wpath = dir.join("weights.bin");
    let tensors = decode_tensors(&read_bytes(&wpath)?, &wpath)?;
    let get = |name: &str, len: Option<usize>| -> Result<Vec<f64>, IoError> {
        let v = tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| t.data.clone())
            .ok_or_else(|| format_err(&wpath, format!("missing tensor {name}")))?;
        match len {
            Some(l) if l != v.len() => Err(format_err(&wpath, format!("tensor {name} has {} values, expected {l}", v.len()))),
            _ => Ok(v),
        }
    };
    let bad = |e: crate::appearance::AppearanceError| format_err(&wpath, e.to_string());
    let mut params = Vec::with_capacity(mlp_param_count());
    for (name, shape, _) in AppearanceMlp::tensors() {
        params.extend(get(&format!("mlp.{name}"), Some(shape[0] * shape[1]))?);
    }
    let mlp = AppearanceMlp::from_params(params).map_err(bad)?;
    let embeddings = EmbeddingTable::from_values(get("embeddings", None)?).map_err(bad)?;
    let image_ids: Vec<String> =
        read_text(&dir.join("image_ids.txt"))?.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if image_ids.len() != embeddings.rows() {
        return Err(format_err(
            &dir.join("image_ids.txt"),
            format!("{} ids for {} embeddings", image_ids.len(), embeddings.rows()),
        ));
    }
    let cameras = read_cameras(&dir.join("cameras.txt"))?;
    let config = load_config(&dir.join("config.toml"))?;
    let model = Model { scene, mlp, embeddings };
    let (nf, ns) = (model.scene.foreground.len(), model.scene.sky.len());
    let moments = |name: &str, len: usize| -> Result<Moments, IoError> {
        Ok(Moments { m: get(&format!("adam.{name}.m"), Some(len))?, v: get(&format!("adam.{name}.v"), Some(len))? })
    };
    let optimizer = OptimizerState {
        step: get("adam.step", Some(1))?[0] as u64,
        foreground: moments("foreground", nf * crate::scene::FG_PARAMS)?,
        sky: moments("sky", ns * crate::scene::SKY_PARAMS)?,
        radius: moments("radius", 1)?,
        mlp: moments("mlp", model.mlp.params.len())?,
        embeddings: moments("embeddings", model.embeddings.values.len())?,
    };
    let state = TrainState {
        iteration: get("iteration", Some(1))?[0] as usize,
        grad_accum: get("densify.grad_accum", Some(nf + ns))?,
        grad_count: get("densify.grad_count", Some(nf + ns))?,
        model,
        optimizer,
    };
    Ok(Checkpoint { state, image_ids, cameras, config })
}
