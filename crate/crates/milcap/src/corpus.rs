//! Synthetic video-caption corpus and the single-label classification set
//! used to pre-train the vision stack. Every video shows one large object
//! (side 28..=34 px) on a textured background and, with probability 0.5,
//! one small object (side 8..=10 px) drawn on top in a different color;
//! each object translates across frames and contributes one caption of the
//! form "a <color> <shape> is <verb>".
//!
//! Generation is deterministic: video `i` under seed `s` draws its layout
//! from ChaCha8 stream 2i+1 and its pixels from stream 2i+2, so layouts can
//! be enumerated without paying for rendering.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SHAPES: [&str; 5] = ["circle", "square", "triangle", "cross", "diamond"];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const VERBS: [&str; 4] = ["sliding", "rising", "falling", "drifting"];
pub const SIZES: [&str; 2] = ["large", "small"];

/// Saturated object colors; the background is always gray (equal channels),
/// so any color class is separable from it.
pub const COLOR_RGB: [[f32; 3]; 4] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.80, 0.15],
    [0.12, 0.20, 0.90],
    [0.92, 0.85, 0.10],
];

/// shape x color x size product.
pub const CLASS_COUNT: usize = SHAPES.len() * COLORS.len() * SIZES.len();

pub const LARGE_SIDE: (f64, f64) = (28.0, 34.0);
pub const SMALL_SIDE: (f64, f64) = (8.0, 10.0);

/// Smallest frame that leaves the largest object room to move.
pub const MIN_FRAME_SIZE: usize = 38;

pub const DEFAULT_FRAME_SIZE: usize = 40;
pub const DEFAULT_FRAMES: usize = 8;
pub const DEFAULT_COUNTS: (usize, usize, usize) = (120, 10, 67);

pub fn class_index(shape: usize, color: usize, size: usize) -> usize {
    debug_assert!(shape < SHAPES.len() && color < COLORS.len() && size < SIZES.len());
    (shape * COLORS.len() + color) * SIZES.len() + size
}

/// Inverse of `class_index`: (shape, color, size).
pub fn class_label(class: usize) -> (usize, usize, usize) {
    debug_assert!(class < CLASS_COUNT);
    (class / (COLORS.len() * SIZES.len()), class / SIZES.len() % COLORS.len(), class % SIZES.len())
}

pub fn class_name(class: usize) -> String {
    let (shape, color, size) = class_label(class);
    format!("{} {} {}", SIZES[size], COLORS[color], SHAPES[shape])
}

pub fn caption_text(shape: usize, color: usize, verb: usize) -> String {
    format!("a {} {} is {}", COLORS[color], SHAPES[shape], VERBS[verb])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectLayout {
    pub shape: usize,
    pub color: usize,
    pub verb: usize,
    /// 0 = large, 1 = small.
    pub size: usize,
    pub side: f64,
    /// Top-left corner at frame 0.
    pub x: f64,
    pub y: f64,
    /// Per-frame translation.
    pub dx: f64,
    pub dy: f64,
}

impl ObjectLayout {
    /// Bounding box [x0, y0, x1, y1] at frame t.
    pub fn box_at(&self, t: usize) -> [f64; 4] {
        let x = self.x + self.dx * t as f64;
        let y = self.y + self.dy * t as f64;
        [x, y, x + self.side, y + self.side]
    }

    pub fn class(&self) -> usize {
        class_index(self.shape, self.color, self.size)
    }

    pub fn caption(&self) -> String {
        caption_text(self.shape, self.color, self.verb)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoLayout {
    /// One or two objects; index 0 is always the large one.
    pub objects: Vec<ObjectLayout>,
}

fn verb_direction(verb: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let sign = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    match verb {
        0 => (sign(rng), 0.0),             // sliding
        1 => (0.0, -1.0),                  // rising
        2 => (0.0, 1.0),                   // falling
        _ => {
            let d = std::f64::consts::FRAC_1_SQRT_2;
            (sign(rng) * d, sign(rng) * d) // drifting
        }
    }
}

fn sample_object(
    rng: &mut ChaCha8Rng,
    size: usize,
    color: usize,
    frame_size: usize,
    frames: usize,
) -> ObjectLayout {
    let shape = rng.gen_range(0..SHAPES.len());
    let verb = rng.gen_range(0..VERBS.len());
    let (lo, hi) = if size == 0 { LARGE_SIDE } else { SMALL_SIDE };
    let side = rng.gen_range(lo..=hi);
    let steps = frames.saturating_sub(1).max(1) as f64;
    let slack = frame_size as f64 - side;
    let (speed_lo, speed_cap): (f64, f64) = if size == 0 { (0.2, 1.0) } else { (0.6, 1.5) };
    let speed_hi = speed_cap.min(0.95 * slack / steps).max(speed_lo);
    let speed = rng.gen_range(speed_lo..=speed_hi);
    let (ux, uy) = verb_direction(verb, rng);
    let (dx, dy) = (ux * speed, uy * speed);
    let total = frames.saturating_sub(1) as f64;
    let place = |d: f64, rng: &mut ChaCha8Rng| {
        let lo = (-d * total).max(0.0);
        let hi = frame_size as f64 - side - (d * total).max(0.0);
        rng.gen_range(lo..=hi)
    };
    let x = place(dx, rng);
    let y = place(dy, rng);
    ObjectLayout { shape, color, verb, size, side, x, y, dx, dy }
}

/// The full random description of video `index` under `seed`, drawn without
/// touching any pixels.
pub fn sample_layout(seed: u64, index: usize, frame_size: usize, frames: usize) -> Result<VideoLayout> {
    if frame_size < MIN_FRAME_SIZE {
        return Err(Error::InvalidArg(format!(
            "frame size {frame_size} is too small for the size classes (minimum {MIN_FRAME_SIZE})"
        )));
    }
    if frames == 0 {
        return Err(Error::InvalidArg("a video needs at least one frame".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * index as u64 + 1);
    let large_color = rng.gen_range(0..COLORS.len());
    let large = sample_object(&mut rng, 0, large_color, frame_size, frames);
    let mut objects = vec![large];
    if rng.gen_bool(0.5) {
        // a different color keeps the small object visible when it crosses
        // the large one
        let c = rng.gen_range(0..COLORS.len() - 1);
        let small_color = if c >= large_color { c + 1 } else { c };
        objects.push(sample_object(&mut rng, 1, small_color, frame_size, frames));
    }
    Ok(VideoLayout { objects })
}

fn lattice_noise(size: usize, spacing: usize, amp: f32, rng: &mut ChaCha8Rng, out: &mut [f32]) {
    let n = size / spacing + 2;
    let grid: Vec<f32> = (0..n * n).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
    for y in 0..size {
        for x in 0..size {
            let gx = x as f32 / spacing as f32;
            let gy = y as f32 / spacing as f32;
            let (x0, y0) = (gx as usize, gy as usize);
            let (fx, fy) = (gx - x0 as f32, gy - y0 as f32);
            let sx = fx * fx * (3.0 - 2.0 * fx);
            let sy = fy * fy * (3.0 - 2.0 * fy);
            let v00 = grid[y0 * n + x0];
            let v10 = grid[y0 * n + x0 + 1];
            let v01 = grid[(y0 + 1) * n + x0];
            let v11 = grid[(y0 + 1) * n + x0 + 1];
            let top = v00 + (v10 - v00) * sx;
            let bot = v01 + (v11 - v01) * sx;
            out[y * size + x] += amp * (top + (bot - top) * sy);
        }
    }
}

/// Two-octave gray value noise in (0,1), one value per pixel.
pub(crate) fn texture(size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut t = vec![0.45f32; size * size];
    lattice_noise(size, 8, 0.18, rng, &mut t);
    lattice_noise(size, 4, 0.09, rng, &mut t);
    for v in &mut t {
        *v = v.clamp(0.05, 0.95);
    }
    t
}

fn shape_inside(shape: usize, u: f64, v: f64) -> bool {
    match shape {
        0 => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25, // circle
        1 => true,                                          // square fills its box
        2 => v >= 2.0 * (u - 0.5).abs(),                    // triangle, apex up
        3 => (u - 0.5).abs() <= 1.0 / 6.0 || (v - 0.5).abs() <= 1.0 / 6.0, // cross
        _ => (u - 0.5).abs() + (v - 0.5).abs() <= 0.5,      // diamond
    }
}

/// Paint one object into a [3,S,S] frame with 4x4-subsample anti-aliasing.
fn render_object(frame: &mut Tensor, shape: usize, rgb: [f32; 3], x0: f64, y0: f64, side: f64) {
    let size = frame.shape()[2];
    let plane = size * size;
    let px_lo = x0.floor().max(0.0) as usize;
    let py_lo = y0.floor().max(0.0) as usize;
    let px_hi = ((x0 + side).ceil() as usize).min(size);
    let py_hi = ((y0 + side).ceil() as usize).min(size);
    let data = frame.data_mut();
    for py in py_lo..py_hi {
        for px in px_lo..px_hi {
            let mut hits = 0u32;
            for sy in 0..4 {
                for sx in 0..4 {
                    let u = (px as f64 + (sx as f64 + 0.5) / 4.0 - x0) / side;
                    let v = (py as f64 + (sy as f64 + 0.5) / 4.0 - y0) / side;
                    if (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v) && shape_inside(shape, u, v) {
                        hits += 1;
                    }
                }
            }
            if hits == 0 {
                continue;
            }
            let cover = hits as f32 / 16.0;
            for (c, &col) in rgb.iter().enumerate() {
                let at = c * plane + py * size + px;
                data[at] = data[at] * (1.0 - cover) + col * cover;
            }
        }
    }
}

/// Rasterize a layout: static textured background, objects painted in
/// declaration order so the small one ends up on top.
pub fn render_video(layout: &VideoLayout, seed: u64, index: usize, frame_size: usize, frames: usize) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * index as u64 + 2);
    let bg = texture(frame_size, &mut rng);
    let plane = frame_size * frame_size;
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut data = Vec::with_capacity(3 * plane);
        for _ in 0..3 {
            data.extend_from_slice(&bg);
        }
        let mut frame = Tensor::new(vec![3, frame_size, frame_size], data).expect("frame shape");
        for obj in &layout.objects {
            let b = obj.box_at(t);
            render_object(&mut frame, obj.shape, COLOR_RGB[obj.color], b[0], b[1], obj.side);
        }
        out.push(frame);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ObjectAnnotation {
    pub shape: usize,
    pub color: usize,
    pub verb: usize,
    pub size: usize,
    pub side: f64,
    /// Per-frame [x0, y0, x1, y1].
    pub boxes: Vec<[f64; 4]>,
}

impl ObjectAnnotation {
    pub fn class(&self) -> usize {
        class_index(self.shape, self.color, self.size)
    }
}

#[derive(Clone, Debug)]
pub struct VideoRecord {
    pub id: String,
    pub split: Split,
    pub frames: usize,
    pub captions: Vec<String>,
    pub objects: Vec<ObjectAnnotation>,
}

fn lookup(table: &[&str], word: &str, kind: &str) -> Result<usize> {
    table
        .iter()
        .position(|&t| t == word)
        .ok_or_else(|| Error::Format(format!("unknown {kind} {word:?}")))
}

fn object_field(obj: &ObjectAnnotation) -> String {
    let boxes: Vec<String> = obj
        .boxes
        .iter()
        .map(|b| format!("{:.3},{:.3},{:.3},{:.3}", b[0], b[1], b[2], b[3]))
        .collect();
    format!(
        "{}:{}:{}:{}:{:.3}:{}",
        SIZES[obj.size],
        SHAPES[obj.shape],
        COLORS[obj.color],
        VERBS[obj.verb],
        obj.side,
        boxes.join("|")
    )
}

fn parse_object_field(field: &str) -> Result<ObjectAnnotation> {
    let parts: Vec<&str> = field.split(':').collect();
    if parts.len() != 6 {
        return Err(Error::Format(format!("object record needs 6 fields, got {}", parts.len())));
    }
    let size = lookup(&SIZES, parts[0], "size")?;
    let shape = lookup(&SHAPES, parts[1], "shape")?;
    let color = lookup(&COLORS, parts[2], "color")?;
    let verb = lookup(&VERBS, parts[3], "verb")?;
    let side: f64 = parts[4].parse().map_err(|_| Error::Format(format!("bad side {:?}", parts[4])))?;
    let mut boxes = Vec::new();
    for b in parts[5].split('|') {
        let nums: Vec<f64> = b
            .split(',')
            .map(|v| v.parse().map_err(|_| Error::Format(format!("bad box coordinate {v:?}"))))
            .collect::<Result<_>>()?;
        if nums.len() != 4 {
            return Err(Error::Format(format!("box needs 4 coordinates, got {}", nums.len())));
        }
        boxes.push([nums[0], nums[1], nums[2], nums[3]]);
    }
    Ok(ObjectAnnotation { shape, color, verb, size, side, boxes })
}

pub fn video_id(index: usize) -> String {
    format!("v{index:04}")
}

/// Write a full corpus under `dir`: meta.txt, manifest.txt and one tensor
/// container per video holding its [V,3,F,F] frame stack. Ids are assigned
/// in blocks: train first, then val, then test.
pub fn generate_corpus(
    seed: u64,
    counts: (usize, usize, usize),
    frame_size: usize,
    frames: usize,
    dir: &Path,
) -> Result<()> {
    let (n_train, n_val, n_test) = counts;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::InvalidArg("every split needs at least one video".into()));
    }
    // fail before any file appears
    sample_layout(seed, 0, frame_size, frames)?;
    std::fs::create_dir_all(dir.join("videos"))?;
    let total = n_train + n_val + n_test;
    let mut manifest = String::new();
    for index in 0..total {
        let id = video_id(index);
        let split = if index < n_train {
            Split::Train
        } else if index < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let layout = sample_layout(seed, index, frame_size, frames)?;
        let rendered = render_video(&layout, seed, index, frame_size, frames);
        let mut stack = Vec::with_capacity(frames * 3 * frame_size * frame_size);
        for f in &rendered {
            stack.extend_from_slice(f.data());
        }
        let stack = Tensor::new(vec![frames, 3, frame_size, frame_size], stack)?;
        checkpoint::write_tensors(&dir.join("videos").join(format!("{id}.mmvd")), &[("frames".to_string(), stack)])?;

        let captions: Vec<String> = layout.objects.iter().map(ObjectLayout::caption).collect();
        let objects: Vec<String> = layout
            .objects
            .iter()
            .map(|o| {
                let ann = ObjectAnnotation {
                    shape: o.shape,
                    color: o.color,
                    verb: o.verb,
                    size: o.size,
                    side: o.side,
                    boxes: (0..frames).map(|t| o.box_at(t)).collect(),
                };
                object_field(&ann)
            })
            .collect();
        manifest.push_str(&format!(
            "{id}\t{}\t{frames}\t{}\t{}\t{}\n",
            split.name(),
            captions.len(),
            captions.join("\t"),
            objects.join("\t"),
        ));
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    std::fs::write(
        dir.join("meta.txt"),
        format!(
            "seed={seed}\nframe_size={frame_size}\nframes={frames}\ntrain={n_train}\nval={n_val}\ntest={n_test}\n"
        ),
    )?;
    Ok(())
}

#[derive(Debug)]
pub struct Corpus {
    dir: PathBuf,
    pub frame_size: usize,
    pub frames_per_video: usize,
    pub records: Vec<VideoRecord>,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Corpus> {
        let meta = std::fs::read_to_string(dir.join("meta.txt"))?;
        let mut frame_size = None;
        let mut frames = None;
        for line in meta.lines() {
            let Some((k, v)) = line.split_once('=') else { continue };
            match k {
                "frame_size" => frame_size = Some(v.parse().map_err(|_| Error::Format(format!("bad frame_size {v:?}")))?),
                "frames" => frames = Some(v.parse().map_err(|_| Error::Format(format!("bad frames {v:?}")))?),
                _ => {}
            }
        }
        let frame_size = frame_size.ok_or_else(|| Error::Format("meta.txt lacks frame_size".into()))?;
        let frames_per_video = frames.ok_or_else(|| Error::Format("meta.txt lacks frames".into()))?;

        let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let mut records = Vec::new();
        let mut seen = BTreeSet::new();
        for (lineno, line) in manifest.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let fail = |what: &str| Error::Format(format!("manifest line {}: {what}", lineno + 1));
            if fields.len() < 4 {
                return Err(fail("too few fields"));
            }
            let id = fields[0].to_string();
            if !seen.insert(id.clone()) {
                return Err(fail("duplicate video id"));
            }
            let split = Split::parse(fields[1])?;
            let vframes: usize = fields[2].parse().map_err(|_| fail("bad frame count"))?;
            let ncaps: usize = fields[3].parse().map_err(|_| fail("bad caption count"))?;
            if fields.len() != 4 + 2 * ncaps {
                return Err(fail("field count does not match the caption count"));
            }
            let captions: Vec<String> = fields[4..4 + ncaps].iter().map(|s| s.to_string()).collect();
            let objects: Vec<ObjectAnnotation> = fields[4 + ncaps..]
                .iter()
                .map(|f| parse_object_field(f))
                .collect::<Result<_>>()?;
            for obj in &objects {
                if obj.boxes.len() != vframes {
                    return Err(fail("object box count does not match the frame count"));
                }
            }
            records.push(VideoRecord { id, split, frames: vframes, captions, objects });
        }
        if records.is_empty() {
            return Err(Error::Format("manifest holds no videos".into()));
        }
        Ok(Corpus { dir: dir.to_path_buf(), frame_size, frames_per_video, records })
    }

    pub fn split_records(&self, split: Split) -> Vec<&VideoRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn record(&self, id: &str) -> Result<&VideoRecord> {
        self.records
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::InvalidArg(format!("no video {id:?} in the corpus")))
    }

    /// The video's frames as V tensors of shape [3,F,F].
    pub fn load_frames(&self, id: &str) -> Result<Vec<Tensor>> {
        let frames = read_video_frames(&self.dir.join("videos").join(format!("{id}.mmvd")))?;
        let rec = self.record(id)?;
        let want = vec![3, self.frame_size, self.frame_size];
        if frames.len() != rec.frames || frames[0].shape() != want {
            return Err(Error::Format(format!(
                "video {id:?} holds {} frames of {:?}, manifest says {} of {want:?}",
                frames.len(),
                frames[0].shape(),
                rec.frames
            )));
        }
        Ok(frames)
    }
}

/// Read any video container's frame stack as V tensors of shape [3,F,F].
pub fn read_video_frames(path: &Path) -> Result<Vec<Tensor>> {
    let tensors = checkpoint::read_tensors(path)?;
    let stack = tensors
        .into_iter()
        .find(|(name, _)| name == "frames")
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Format(format!("{} lacks a frames tensor", path.display())))?;
    let s = stack.shape().to_vec();
    if s.len() != 4 || s[0] == 0 || s[1] != 3 || s[2] != s[3] {
        return Err(Error::Format(format!(
            "{} frame stack is {s:?}, expected [frames, 3, size, size]",
            path.display()
        )));
    }
    let per = 3 * s[2] * s[3];
    Ok((0..s[0])
        .map(|t| {
            Tensor::new(vec![3, s[2], s[3]], stack.data()[t * per..(t + 1) * per].to_vec())
                .expect("frame slice shape")
        })
        .collect())
}

/// Classifier pre-training images: one centered object per image with a few
/// pixels of placement jitter, rendered at the network's canonical input
/// size. Large-class sides run from filling most of the view up to well
/// beyond it, so both whole-frame appearances and the zoomed partial views
/// that receptive-field windows see at upsampled scales are in
/// distribution. Small-class sides match how video small objects look
/// inside one receptive field at the upsampled scale.
pub fn build_classification_images(
    seed: u64,
    per_class: usize,
    image_size: usize,
) -> Result<(Tensor, Vec<usize>)> {
    if per_class == 0 {
        return Err(Error::InvalidArg("per_class must be at least 1".into()));
    }
    if image_size < 24 {
        return Err(Error::InvalidArg(format!(
            "image size {image_size} is too small for the size classes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = image_size * image_size;
    let mut data = Vec::with_capacity(CLASS_COUNT * per_class * 3 * plane);
    let mut labels = Vec::with_capacity(CLASS_COUNT * per_class);
    let (large_lo, large_hi) = (0.685 * image_size as f64, 1.75 * image_size as f64);
    let (small_lo, small_hi) = (0.48 * image_size as f64, 0.65 * image_size as f64);
    for class in 0..CLASS_COUNT {
        let (shape, color, size) = class_label(class);
        for _ in 0..per_class {
            let bg = texture(image_size, &mut rng);
            let mut img = Vec::with_capacity(3 * plane);
            for _ in 0..3 {
                img.extend_from_slice(&bg);
            }
            let mut frame = Tensor::new(vec![3, image_size, image_size], img)?;
            let side = if size == 0 {
                rng.gen_range(large_lo..=large_hi)
            } else {
                rng.gen_range(small_lo..=small_hi)
            };
            let center = image_size as f64 / 2.0;
            let slack = (image_size as f64 - side) / 2.0 - 0.5;
            let jitter = if slack > 0.0 { slack.min(2.0) } else { 2.0 };
            let x0 = center - side / 2.0 + rng.gen_range(-jitter..=jitter);
            let y0 = center - side / 2.0 + rng.gen_range(-jitter..=jitter);
            render_object(&mut frame, shape, COLOR_RGB[color], x0, y0, side);
            data.extend_from_slice(frame.data());
            labels.push(class);
        }
    }
    let images = Tensor::new(vec![CLASS_COUNT * per_class, 3, image_size, image_size], data)?;
    Ok((images, labels))
}

pub fn generate_classification_set(seed: u64, per_class: usize, image_size: usize, path: &Path) -> Result<()> {
    let (images, labels) = build_classification_images(seed, per_class, image_size)?;
    let label_tensor = Tensor::vector(labels.iter().map(|&l| l as f32).collect());
    checkpoint::write_tensors(path, &[("images".to_string(), images), ("labels".to_string(), label_tensor)])
}

pub fn load_classification_set(path: &Path) -> Result<(Tensor, Vec<usize>)> {
    let tensors = checkpoint::read_tensors(path)?;
    let mut images = None;
    let mut labels = None;
    for (name, t) in tensors {
        match name.as_str() {
            "images" => images = Some(t),
            "labels" => labels = Some(t),
            _ => {}
        }
    }
    let images = images.ok_or_else(|| Error::Format("classification set lacks an images tensor".into()))?;
    let labels = labels.ok_or_else(|| Error::Format("classification set lacks a labels tensor".into()))?;
    if images.rank() != 4 || images.shape()[0] != labels.numel() {
        return Err(Error::Format(format!(
            "images {:?} do not pair with {} labels",
            images.shape(),
            labels.numel()
        )));
    }
    let idx = labels
        .data()
        .iter()
        .map(|&v| {
            let i = v as usize;
            if v.fract() != 0.0 || v < 0.0 || i >= CLASS_COUNT {
                Err(Error::Format(format!("label {v} is not a class index")))
            } else {
                Ok(i)
            }
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok((images, idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab;

    #[test]
    fn class_index_is_a_bijection() {
        let mut seen = vec![false; CLASS_COUNT];
        for shape in 0..SHAPES.len() {
            for color in 0..COLORS.len() {
                for size in 0..SIZES.len() {
                    let c = class_index(shape, color, size);
                    assert!(!seen[c], "class {c} hit twice");
                    seen[c] = true;
                    assert_eq!(class_label(c), (shape, color, size));
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(class_name(class_index(0, 0, 0)), "large red circle");
    }

    #[test]
    fn layouts_follow_the_template_grammar() {
        for index in 0..50 {
            let layout = sample_layout(7, index, 40, 8).unwrap();
            assert!(!layout.objects.is_empty() && layout.objects.len() <= 2);
            assert_eq!(layout.objects[0].size, 0, "first object is the large one");
            for obj in &layout.objects {
                let toks = vocab::tokenize(&obj.caption());
                assert_eq!(toks.len(), 5);
                assert_eq!(toks[0], "a");
                assert!(COLORS.contains(&toks[1].as_str()));
                assert!(SHAPES.contains(&toks[2].as_str()));
                assert_eq!(toks[3], "is");
                assert!(VERBS.contains(&toks[4].as_str()));
            }
            if layout.objects.len() == 2 {
                assert_eq!(layout.objects[1].size, 1);
                assert_ne!(layout.objects[0].color, layout.objects[1].color);
            }
        }
    }

    #[test]
    fn small_object_frequency_is_near_half() {
        let with_small = (0..1000)
            .filter(|&i| sample_layout(11, i, 40, 8).unwrap().objects.len() == 2)
            .count() as f64
            / 1000.0;
        assert!((0.45..=0.55).contains(&with_small), "frequency {with_small}");
    }

    #[test]
    fn boxes_stay_in_bounds_with_classed_sides() {
        for index in 0..200 {
            let layout = sample_layout(3, index, 40, 8).unwrap();
            for obj in &layout.objects {
                let (lo, hi) = if obj.size == 0 { LARGE_SIDE } else { SMALL_SIDE };
                assert!(obj.side >= lo && obj.side <= hi, "side {} for size {}", obj.side, obj.size);
                for t in 0..8 {
                    let b = obj.box_at(t);
                    assert!(b[0] >= -1e-9 && b[1] >= -1e-9, "{b:?}");
                    assert!(b[2] <= 40.0 + 1e-9 && b[3] <= 40.0 + 1e-9, "{b:?}");
                }
            }
        }
    }

    #[test]
    fn objects_actually_move() {
        let layout = sample_layout(5, 0, 40, 8).unwrap();
        for obj in &layout.objects {
            let (a, b) = (obj.box_at(0), obj.box_at(7));
            let moved = (a[0] - b[0]).abs() + (a[1] - b[1]).abs();
            assert!(moved >= 0.2 * 7.0 - 1e-9, "object barely moved: {moved}");
        }
    }

    #[test]
    fn too_small_frames_are_rejected() {
        assert!(sample_layout(1, 0, MIN_FRAME_SIZE - 1, 8).is_err());
        assert!(sample_layout(1, 0, MIN_FRAME_SIZE, 8).is_ok());
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_corpus(1, (1, 1, 1), 30, 2, dir.path()).is_err());
        assert!(!dir.path().join("manifest.txt").exists(), "no partial output on failure");
    }

    #[test]
    fn rendering_is_deterministic_and_in_range() {
        let layout = sample_layout(9, 4, 40, 3).unwrap();
        let a = render_video(&layout, 9, 4, 40, 3);
        let b = render_video(&layout, 9, 4, 40, 3);
        assert_eq!(a.len(), 3);
        for (fa, fb) in a.iter().zip(&b) {
            assert_eq!(fa.data(), fb.data());
            assert_eq!(fa.shape(), &[3, 40, 40]);
            assert!(fa.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert_ne!(a[0].data(), a[2].data(), "motion shows up in the pixels");
    }

    #[test]
    fn rendered_object_pixels_take_the_object_color() {
        // a layout with a known red large object: find a saturated red pixel
        // inside its box
        let mut layout = sample_layout(2, 0, 40, 1).unwrap();
        layout.objects[0].color = 0;
        let frames = render_video(&layout, 2, 0, 40, 1);
        let f = &frames[0];
        let b = layout.objects[0].box_at(0);
        let (cx, cy) = (((b[0] + b[2]) / 2.0) as usize, ((b[1] + b[3]) / 2.0) as usize);
        let plane = 40 * 40;
        let r = f.data()[cy * 40 + cx];
        let g = f.data()[plane + cy * 40 + cx];
        let bl = f.data()[2 * plane + cy * 40 + cx];
        // every shape covers its box center except none; center is interior
        assert!((r - 0.90).abs() <= 1e-6 && (g - 0.10).abs() <= 1e-6 && (bl - 0.10).abs() <= 1e-6);
    }

    #[test]
    fn corpus_generation_is_byte_identical_across_runs() {
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        generate_corpus(21, (3, 1, 2), 40, 3, da.path()).unwrap();
        generate_corpus(21, (3, 1, 2), 40, 3, db.path()).unwrap();
        for name in ["manifest.txt", "meta.txt"] {
            assert_eq!(
                std::fs::read(da.path().join(name)).unwrap(),
                std::fs::read(db.path().join(name)).unwrap(),
                "{name} differs"
            );
        }
        for i in 0..6 {
            let v = format!("videos/{}.mmvd", video_id(i));
            assert_eq!(
                std::fs::read(da.path().join(&v)).unwrap(),
                std::fs::read(db.path().join(&v)).unwrap(),
                "{v} differs"
            );
        }
    }

    #[test]
    fn load_round_trips_the_generated_records() {
        let dir = tempfile::tempdir().unwrap();
        generate_corpus(33, (3, 1, 2), 40, 4, dir.path()).unwrap();
        let corpus = Corpus::load(dir.path()).unwrap();
        assert_eq!(corpus.frame_size, 40);
        assert_eq!(corpus.frames_per_video, 4);
        assert_eq!(corpus.records.len(), 6);
        assert_eq!(corpus.split_records(Split::Train).len(), 3);
        assert_eq!(corpus.split_records(Split::Val).len(), 1);
        assert_eq!(corpus.split_records(Split::Test).len(), 2);

        // split blocks are disjoint and cover all ids
        let ids: BTreeSet<&str> = corpus.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids.len(), 6);

        for (i, rec) in corpus.records.iter().enumerate() {
            let layout = sample_layout(33, i, 40, 4).unwrap();
            assert_eq!(rec.captions.len(), layout.objects.len());
            assert_eq!(rec.objects.len(), layout.objects.len());
            for (ann, obj) in rec.objects.iter().zip(&layout.objects) {
                assert_eq!(ann.class(), obj.class());
                assert_eq!(ann.boxes.len(), 4);
                for (t, b) in ann.boxes.iter().enumerate() {
                    let want = obj.box_at(t);
                    for k in 0..4 {
                        assert!((b[k] - want[k]).abs() <= 5e-4, "box {b:?} vs {want:?}");
                    }
                }
            }
            for (cap, obj) in rec.captions.iter().zip(&layout.objects) {
                assert_eq!(cap, &obj.caption());
            }
        }

        let frames = corpus.load_frames("v0002").unwrap();
        assert_eq!(frames.len(), 4);
        assert_eq!(frames[0].shape(), &[3, 40, 40]);
        let direct = render_video(&sample_layout(33, 2, 40, 4).unwrap(), 33, 2, 40, 4);
        assert_eq!(frames[1].data(), direct[1].data());

        assert!(corpus.record("v9999").is_err());
    }

    #[test]
    fn classification_set_is_uniform_and_loadable() {
        let (images, labels) = build_classification_images(13, 2, 35).unwrap();
        assert_eq!(images.shape(), &[80, 3, 35, 35]);
        assert_eq!(labels.len(), 80);
        let mut hist = vec![0usize; CLASS_COUNT];
        for &l in &labels {
            hist[l] += 1;
        }
        assert!(hist.iter().all(|&c| c == 2), "histogram not uniform: {hist:?}");
        assert!(images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("classif.mmvd");
        generate_classification_set(13, 2, 35, &path).unwrap();
        let (loaded, loaded_labels) = load_classification_set(&path).unwrap();
        assert_eq!(loaded.data(), images.data());
        assert_eq!(loaded_labels, labels);
    }

    #[test]
    fn classification_images_differ_between_size_classes() {
        let (images, labels) = build_classification_images(4, 1, 35).unwrap();
        // same shape and color, different size class: the small one leaves
        // more background visible, so fewer saturated color pixels
        let large_at = labels.iter().position(|&l| l == class_index(1, 0, 0)).unwrap();
        let small_at = labels.iter().position(|&l| l == class_index(1, 0, 1)).unwrap();
        let plane = 35 * 35;
        let count_red = |i: usize| {
            let base = i * 3 * plane;
            (0..plane)
                .filter(|&p| {
                    let r = images.data()[base + p];
                    let g = images.data()[base + plane + p];
                    r > 0.7 && g < 0.3
                })
                .count()
        };
        let (big, small) = (count_red(large_at), count_red(small_at));
        assert!(big > small, "fill counts {big} vs {small}");
        assert!(small > 50, "small object still clearly visible");
    }
}
