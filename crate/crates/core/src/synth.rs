//! Synthetic moving-shapes videos with exact segmentation labels, plus the
//! on-disk dataset layout (little-endian tensor and mask records under one
//! directory per video, listed in a manifest).

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 8] = b"MRCTENS1";
pub const MASK_MAGIC: &[u8; 8] = b"MRCMASK1";

/// Geometry used for each foreground class; class c > 0 uses kind (c-1) % 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Circle,
    Diamond,
}

impl ShapeKind {
    pub fn for_class(class: u8) -> ShapeKind {
        match (class as usize + 2) % 3 {
            0 => ShapeKind::Square,
            1 => ShapeKind::Circle,
            _ => ShapeKind::Diamond,
        }
    }

    fn contains(&self, dy: f64, dx: f64, half: f64) -> bool {
        match self {
            ShapeKind::Square => dy.abs() <= half && dx.abs() <= half,
            ShapeKind::Circle => dy * dy + dx * dx <= half * half,
            ShapeKind::Diamond => dy.abs() + dx.abs() <= half,
        }
    }
}

/// One shape translating linearly across the clip.
#[derive(Debug, Clone)]
pub struct ShapeSpec {
    pub class: u8,
    pub kind: ShapeKind,
    /// Half-extent in pixels.
    pub half: f64,
    /// Center at frame 0, (y, x).
    pub pos: (f64, f64),
    /// Per-frame displacement, (dy, dx).
    pub vel: (f64, f64),
}

impl ShapeSpec {
    fn center_at(&self, t: usize) -> (f64, f64) {
        (
            self.pos.0 + self.vel.0 * t as f64,
            self.pos.1 + self.vel.1 * t as f64,
        )
    }
}

/// Full recipe for one clip; generation is a pure function of this value.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Drawn in order; later shapes occlude earlier ones.
    pub shapes: Vec<ShapeSpec>,
    /// Additive uniform pixel noise amplitude, clamped to [0, 1] after adding.
    pub noise_amp: f64,
}

impl SceneSpec {
    /// Random scene with one shape per foreground class 1..classes. Velocities
    /// are bounded so every shape keeps at least 1px of body on canvas for the
    /// whole clip.
    pub fn random(
        seed: u64,
        height: usize,
        width: usize,
        frames: usize,
        classes: u8,
    ) -> Result<SceneSpec> {
        if classes < 2 {
            return Err(Error::Arg(format!("need >= 2 classes, got {classes}")));
        }
        if frames == 0 || height < 8 || width < 8 {
            return Err(Error::Arg(format!(
                "scene too small: {frames} frames, {height}x{width}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shapes = Vec::new();
        for class in 1..classes {
            let max_half = (height.min(width) as f64 / 4.0).max(2.0);
            let half = rng.gen_range(2.0..=max_half);
            let y0 = rng.gen_range(half..height as f64 - half);
            let x0 = rng.gen_range(half..width as f64 - half);
            // keep the center inside [half-1, dim-half] across all frames
            let span = (frames - 1).max(1) as f64;
            let vy_lo = ((half - 1.0) - y0) / span;
            let vy_hi = ((height as f64 - half) - y0) / span;
            let vx_lo = ((half - 1.0) - x0) / span;
            let vx_hi = ((width as f64 - half) - x0) / span;
            let vel = (rng.gen_range(vy_lo..=vy_hi), rng.gen_range(vx_lo..=vx_hi));
            shapes.push(ShapeSpec {
                class,
                kind: ShapeKind::for_class(class),
                half,
                pos: (y0, x0),
                vel,
            });
        }
        Ok(SceneSpec {
            seed,
            height,
            width,
            frames,
            shapes,
            noise_amp: 0.05,
        })
    }
}

/// Generated frames (RGB in [0,1], shape `[3, H, W]`) and per-frame labels.
pub struct VideoClip<T: Scalar> {
    pub video_id: String,
    pub frames: Vec<Tensor<T>>,
    pub labels: Vec<Vec<u8>>,
}

impl<T: Scalar> VideoClip<T> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.frames[0].shape();
        (s[1], s[2])
    }
}

fn class_color(class: u8) -> [f64; 3] {
    if class == 0 {
        return [0.1, 0.1, 0.1];
    }
    // fixed well-separated palette, wraps after 6 classes
    let palette = [
        [0.9, 0.2, 0.2],
        [0.2, 0.8, 0.3],
        [0.2, 0.3, 0.9],
        [0.9, 0.8, 0.2],
        [0.8, 0.2, 0.9],
        [0.2, 0.9, 0.9],
    ];
    palette[(class as usize - 1) % palette.len()]
}

/// Rasterizes the scene. Deterministic: same spec, same bytes.
pub fn generate<T: Scalar>(spec: &SceneSpec, video_id: &str) -> Result<VideoClip<T>> {
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_da7a);
    let mut frames = Vec::with_capacity(spec.frames);
    let mut labels = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut label = vec![0u8; h * w];
        for shape in &spec.shapes {
            let (cy, cx) = shape.center_at(t);
            for y in 0..h {
                for x in 0..w {
                    if shape.kind.contains(y as f64 - cy, x as f64 - cx, shape.half) {
                        label[y * w + x] = shape.class;
                    }
                }
            }
        }
        let mut data = vec![T::ZERO; 3 * h * w];
        for (i, &cls) in label.iter().enumerate() {
            let col = class_color(cls);
            for c in 0..3 {
                let noise = if spec.noise_amp > 0.0 {
                    rng.gen_range(-spec.noise_amp..=spec.noise_amp)
                } else {
                    0.0
                };
                data[c * h * w + i] = T::from_f64((col[c] + noise).clamp(0.0, 1.0));
            }
        }
        frames.push(Tensor::from_vec(data, &[3, h, w])?);
        labels.push(label);
    }
    Ok(VideoClip {
        video_id: video_id.to_string(),
        frames,
        labels,
    })
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Writes one tensor record: magic, u32 rank, u32 extents, f32 data, all
/// little-endian. Values are stored as f32 regardless of the in-memory type.
pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * t.numel());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data().iter() {
        buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path)?;
    let (t, _) = decode_tensor(&bytes, 0)?;
    Ok(t)
}

fn take<'a>(bytes: &'a [u8], off: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    if *off + n > bytes.len() {
        return Err(format_err(*off, format!("truncated while reading {what}")));
    }
    let s = &bytes[*off..*off + n];
    *off += n;
    Ok(s)
}

fn read_u32(bytes: &[u8], off: &mut usize, what: &str) -> Result<u32> {
    let s = take(bytes, off, 4, what)?;
    Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
}

/// Decodes one tensor record starting at `offset`; returns the tensor and the
/// offset just past it.
pub fn decode_tensor<T: Scalar>(bytes: &[u8], offset: usize) -> Result<(Tensor<T>, usize)> {
    let mut off = offset;
    let magic = take(bytes, &mut off, 8, "tensor magic")?;
    if magic != TENSOR_MAGIC {
        return Err(format_err(offset, "bad tensor magic"));
    }
    let rank = read_u32(bytes, &mut off, "tensor rank")? as usize;
    if rank == 0 || rank > 8 {
        return Err(format_err(off - 4, format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(bytes, &mut off, "tensor extent")? as usize);
    }
    let numel: usize = shape.iter().product();
    let raw = take(bytes, &mut off, 4 * numel, "tensor data")?;
    let data: Vec<T> = raw
        .chunks_exact(4)
        .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Ok((Tensor::from_vec(data, &shape)?, off))
}

/// Writes one label mask: magic, u32 H, u32 W, H*W label bytes.
pub fn write_mask(path: &Path, labels: &[u8], h: usize, w: usize) -> Result<()> {
    if labels.len() != h * w {
        return Err(Error::Dim(format!(
            "mask write: {} labels for {h}x{w}",
            labels.len()
        )));
    }
    let mut buf = Vec::with_capacity(16 + labels.len());
    buf.extend_from_slice(MASK_MAGIC);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(labels);
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let bytes = fs::read(path)?;
    let mut off = 0usize;
    let magic = take(&bytes, &mut off, 8, "mask magic")?;
    if magic != MASK_MAGIC {
        return Err(format_err(0, "bad mask magic"));
    }
    let h = read_u32(&bytes, &mut off, "mask height")? as usize;
    let w = read_u32(&bytes, &mut off, "mask width")? as usize;
    let labels = take(&bytes, &mut off, h * w, "mask labels")?.to_vec();
    if off != bytes.len() {
        return Err(format_err(off, "trailing bytes after mask"));
    }
    Ok((labels, h, w))
}

/// Saves the clip under `root/<video_id>/frame_%04d.{tns,msk}` and appends the
/// video to `root/manifest.txt` (tab-separated id and frame count).
pub fn save_clip<T: Scalar>(root: &Path, clip: &VideoClip<T>) -> Result<()> {
    let dir = root.join(&clip.video_id);
    fs::create_dir_all(&dir)?;
    let (h, w) = clip.dims();
    for (i, (frame, label)) in clip.frames.iter().zip(&clip.labels).enumerate() {
        write_tensor(&dir.join(format!("frame_{i:04}.tns")), frame)?;
        write_mask(&dir.join(format!("frame_{i:04}.msk")), label, h, w)?;
    }
    let mut manifest = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(root.join("manifest.txt"))?;
    writeln!(manifest, "{}\t{}", clip.video_id, clip.len())?;
    Ok(())
}

pub fn load_clip<T: Scalar>(root: &Path, video_id: &str, frames: usize) -> Result<VideoClip<T>> {
    let dir = root.join(video_id);
    if !dir.is_dir() {
        return Err(Error::NotFound(format!("video directory {}", dir.display())));
    }
    let mut tensors = Vec::with_capacity(frames);
    let mut labels = Vec::with_capacity(frames);
    for i in 0..frames {
        let frame: Tensor<T> = read_tensor(&dir.join(format!("frame_{i:04}.tns")))?;
        let s = frame.shape().to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Format {
                offset: 0,
                msg: format!("frame {i} of {video_id} has shape {s:?}, expected [3, H, W]"),
            });
        }
        let (label, h, w) = read_mask(&dir.join(format!("frame_{i:04}.msk")))?;
        if h != s[1] || w != s[2] {
            return Err(Error::Format {
                offset: 0,
                msg: format!("frame {i} of {video_id}: mask {h}x{w} vs frame {}x{}", s[1], s[2]),
            });
        }
        tensors.push(frame);
        labels.push(label);
    }
    Ok(VideoClip {
        video_id: video_id.to_string(),
        frames: tensors,
        labels,
    })
}

/// Parses `manifest.txt`: one `<video_id>\t<frame_count>` line per video.
pub fn read_manifest(root: &Path) -> Result<Vec<(String, usize)>> {
    let path = root.join("manifest.txt");
    if !path.is_file() {
        return Err(Error::NotFound(format!("manifest {}", path.display())));
    }
    let mut out = Vec::new();
    let text = fs::read_to_string(&path)?;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, '\t');
        let id = parts.next().unwrap_or("").trim();
        let count = parts
            .next()
            .and_then(|c| c.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::Format {
                offset: lineno as u64,
                msg: format!("manifest line {}: expected <id>\\t<count>", lineno + 1),
            })?;
        if id.is_empty() {
            return Err(Error::Format {
                offset: lineno as u64,
                msg: format!("manifest line {}: empty video id", lineno + 1),
            });
        }
        out.push((id.to_string(), count));
    }
    if out.is_empty() {
        return Err(Error::Format {
            offset: 0,
            msg: "manifest has no videos".into(),
        });
    }
    Ok(out)
}

/// All clips listed in the manifest.
pub fn load_dataset<T: Scalar>(root: &Path) -> Result<Vec<VideoClip<T>>> {
    read_manifest(root)?
        .into_iter()
        .map(|(id, n)| load_clip(root, &id, n))
        .collect()
}

/// Generates `videos` clips with distinct seeds and writes the dataset.
pub fn generate_dataset<T: Scalar>(
    root: &Path,
    seed: u64,
    videos: usize,
    frames: usize,
    height: usize,
    width: usize,
    classes: u8,
) -> Result<()> {
    fs::create_dir_all(root)?;
    for v in 0..videos {
        let spec = SceneSpec::random(seed.wrapping_add(v as u64 * 1000), height, width, frames, classes)?;
        let clip: VideoClip<T> = generate(&spec, &format!("video_{v:03}"))?;
        save_clip(root, &clip)?;
    }
    Ok(())
}
