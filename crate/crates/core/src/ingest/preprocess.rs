use sdsnet_tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ANSWER_LEVELS;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("degenerate crop box {0:?}")]
    DegenerateBox(CropBox),
    #[error("crop box {bbox:?} lies outside a {height}x{width} frame")]
    BoxOutsideFrame { bbox: CropBox, height: usize, width: usize },
    #[error("expansion factor must be >= 1, got {0}")]
    Factor(f64),
    #[error("target size must be positive, got {0}x{1}")]
    ZeroTarget(usize, usize),
    #[error("cannot sample from an empty clip")]
    EmptyClip,
    #[error("expected {expected}, got dims {dims:?}")]
    Shape { expected: &'static str, dims: Vec<usize> },
    #[error("answer must be in 1..=4, got {0}")]
    Answer(u8),
    #[error("response time must be positive and finite, got {0}")]
    Time(f64),
}

/// Axis-aligned box `(x, y, w, h)` in source pixels; `x` is the column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct CropBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl CropBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        CropBox { x, y, w, h }
    }
}

impl From<[u32; 4]> for CropBox {
    fn from([x, y, w, h]: [u32; 4]) -> Self {
        CropBox { x, y, w, h }
    }
}

impl From<CropBox> for [u32; 4] {
    fn from(b: CropBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// Face-box growth used before cropping.
pub const CROP_EXPANSION: f64 = 1.2;

/// Scales `bbox` about its centre by `factor` and clips it to the frame.
pub fn expand_crop(bbox: CropBox, factor: f64, (height, width): (usize, usize)) -> Result<CropBox, PreprocessError> {
    if bbox.w == 0 || bbox.h == 0 {
        return Err(PreprocessError::DegenerateBox(bbox));
    }
    if !(factor.is_finite() && factor >= 1.0) {
        return Err(PreprocessError::Factor(factor));
    }
    let (x1, y1) = (bbox.x as u64 + bbox.w as u64, bbox.y as u64 + bbox.h as u64);
    if x1 > width as u64 || y1 > height as u64 {
        return Err(PreprocessError::BoxOutsideFrame { bbox, height, width });
    }
    let axis = |start: u32, len: u32, limit: usize| -> (u32, u32) {
        let centre = start as f64 + len as f64 / 2.0;
        let grown = (len as f64 * factor).round();
        let lo = (centre - grown / 2.0).round().max(0.0);
        let hi = (centre + grown / 2.0).round().min(limit as f64);
        (lo as u32, (hi - lo) as u32)
    };
    let (x, w) = axis(bbox.x, bbox.w, width);
    let (y, h) = axis(bbox.y, bbox.h, height);
    Ok(CropBox { x, y, w, h })
}

fn matrix_dims<T: Element>(image: &Tensor<T>) -> Result<(usize, usize), PreprocessError> {
    match *image.dims() {
        [h, w] => Ok((h, w)),
        ref d => Err(PreprocessError::Shape { expected: "[H,W] image", dims: d.to_vec() }),
    }
}

/// Copies the `bbox` region out of an `[H, W]` image.
pub fn crop<T: Element>(image: &Tensor<T>, bbox: CropBox) -> Result<Tensor<T>, PreprocessError> {
    let (h, w) = matrix_dims(image)?;
    let (x, y, bw, bh) = (bbox.x as usize, bbox.y as usize, bbox.w as usize, bbox.h as usize);
    if bw == 0 || bh == 0 {
        return Err(PreprocessError::DegenerateBox(bbox));
    }
    if x + bw > w || y + bh > h {
        return Err(PreprocessError::BoxOutsideFrame { bbox, height: h, width: w });
    }
    let data = (y..y + bh).flat_map(|r| image.data()[r * w + x..r * w + x + bw].iter().copied()).collect();
    Ok(Tensor::new(vec![bh, bw], data).expect("crop dims"))
}

/// Source coordinate and blend weight for output index `i` under the
/// half-pixel (corners not aligned) convention.
fn sample_axis(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src - 1);
    (lo, hi, pos - lo as f64)
}

/// Bilinear resize of an `[H, W]` image with `align_corners = false`.
pub fn resize_bilinear<T: Element>(image: &Tensor<T>, (out_h, out_w): (usize, usize)) -> Result<Tensor<T>, PreprocessError> {
    if out_h == 0 || out_w == 0 {
        return Err(PreprocessError::ZeroTarget(out_h, out_w));
    }
    let (h, w) = matrix_dims(image)?;
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let src = image.data();
    let cols: Vec<_> = (0..out_w).map(|j| sample_axis(j, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let (r0, r1, fy) = sample_axis(i, h, out_h);
        for &(c0, c1, fx) in &cols {
            let top = src[r0 * w + c0].as_f64() * (1.0 - fx) + src[r0 * w + c1].as_f64() * fx;
            let bottom = src[r1 * w + c0].as_f64() * (1.0 - fx) + src[r1 * w + c1].as_f64() * fx;
            out.push(T::of(top * (1.0 - fy) + bottom * fy));
        }
    }
    Ok(Tensor::new(vec![out_h, out_w], out).expect("resize dims"))
}

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Luma of a `[3, H, W]` RGB image.
pub fn to_grayscale<T: Element>(image: &Tensor<T>) -> Result<Tensor<T>, PreprocessError> {
    let [3, h, w] = *image.dims() else {
        return Err(PreprocessError::Shape { expected: "[3,H,W] image", dims: image.dims().to_vec() });
    };
    let plane = h * w;
    let d = image.data();
    let data = (0..plane)
        .map(|i| T::of(LUMA[0] * d[i].as_f64() + LUMA[1] * d[plane + i].as_f64() + LUMA[2] * d[2 * plane + i].as_f64()))
        .collect();
    Ok(Tensor::new(vec![h, w], data).expect("gray dims"))
}

/// Frame indices `floor(i * n / t)` for `i in 0..t`.
pub fn uniform_indices(n: usize, t: usize) -> Vec<usize> {
    (0..t).map(|i| i * n / t).collect()
}

/// Uniformly samples `frames` frames along the leading axis of a clip.
pub fn uniform_sample<T: Element>(clip: &Tensor<T>, frames: usize) -> Result<Tensor<T>, PreprocessError> {
    let n = clip.dims()[0];
    if frames == 0 || clip.rank() < 2 {
        return Err(PreprocessError::EmptyClip);
    }
    let frame_len = clip.numel() / n;
    let data = uniform_indices(n, frames)
        .into_iter()
        .flat_map(|f| clip.data()[f * frame_len..(f + 1) * frame_len].iter().copied())
        .collect();
    let mut dims = clip.dims().to_vec();
    dims[0] = frames;
    Ok(Tensor::new(dims, data).expect("sample dims"))
}

/// One-hot vector with a 1 at `answer - 1`.
pub fn encode_answer<T: Element>(answer: u8) -> Result<Tensor<T>, PreprocessError> {
    if !(1..=ANSWER_LEVELS as u8).contains(&answer) {
        return Err(PreprocessError::Answer(answer));
    }
    let mut v = vec![T::zero(); ANSWER_LEVELS];
    v[answer as usize - 1] = T::one();
    Ok(Tensor::from_vec(v).expect("one-hot"))
}

/// Response time in raw seconds as a one-element vector.
pub fn encode_time<T: Element>(seconds: f64) -> Result<Tensor<T>, PreprocessError> {
    if !(seconds.is_finite() && seconds > 0.0) {
        return Err(PreprocessError::Time(seconds));
    }
    Ok(Tensor::scalar(T::of(seconds)))
}

/// Turns a recorded clip into a `[frames, height, width]` grayscale clip:
/// uniform temporal sampling, grayscale, expanded face crop, bilinear resize.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preprocessor {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub crop_expansion: f64,
}

impl Preprocessor {
    pub fn new(frames: usize, height: usize, width: usize) -> Self {
        Preprocessor { frames, height, width, crop_expansion: CROP_EXPANSION }
    }

    /// `clip` is `[N, H, W]` grayscale or `[N, 3, H, W]` color.
    pub fn apply(&self, clip: &Tensor<f32>, crop_box: Option<CropBox>) -> Result<Tensor<f32>, PreprocessError> {
        let color = match clip.rank() {
            3 => false,
            4 if clip.dims()[1] == 3 => true,
            _ => return Err(PreprocessError::Shape { expected: "[N,H,W] or [N,3,H,W] clip", dims: clip.dims().to_vec() }),
        };
        let (h, w) = (clip.dims()[clip.rank() - 2], clip.dims()[clip.rank() - 1]);
        let sampled = uniform_sample(clip, self.frames)?;
        let frame_len = sampled.numel() / self.frames;
        let bbox = crop_box.map(|b| expand_crop(b, self.crop_expansion, (h, w))).transpose()?;
        let mut data = Vec::with_capacity(self.frames * self.height * self.width);
        for raw in sampled.data().chunks_exact(frame_len) {
            let frame = if color {
                to_grayscale(&Tensor::new(vec![3, h, w], raw.to_vec()).expect("frame"))?
            } else {
                Tensor::new(vec![h, w], raw.to_vec()).expect("frame")
            };
            let frame = match bbox {
                Some(b) => crop(&frame, b)?,
                None => frame,
            };
            data.extend(resize_bilinear(&frame, (self.height, self.width))?.into_data());
        }
        Ok(Tensor::new(vec![self.frames, self.height, self.width], data).expect("clip dims"))
    }
}
