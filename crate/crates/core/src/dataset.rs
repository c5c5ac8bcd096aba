//! Label maps, in-memory samples and the manifest format.
//!
//! A manifest is a text file with one `image<TAB>label` line per sample;
//! paths are relative to the manifest's directory. Images are PPM, labels
//! PGM whose byte values are class ids (255 = ignore).

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{config_err, shape_err, Error, Result};
use crate::pnm::Pnm;
use crate::tensor::{axis_taps, Tensor};

pub const IGNORE_LABEL: u8 = 255;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return shape_err(format!("label map {h}x{w} needs {} values, got {}", h * w, data.len()));
        }
        Ok(LabelMap { h, w, data })
    }

    pub fn filled(h: usize, w: usize, value: u8) -> Self {
        LabelMap { h, w, data: vec![value; h * w] }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    pub fn flip_horizontal(&self) -> LabelMap {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.w.max(1)) {
            row.reverse();
        }
        out
    }

    /// Extends the map to `h x w` by filling new bottom rows and right columns.
    pub fn pad_to(&self, h: usize, w: usize, fill: u8) -> LabelMap {
        let (h, w) = (h.max(self.h), w.max(self.w));
        let mut out = LabelMap::filled(h, w, fill);
        for y in 0..self.h {
            out.data[y * w..y * w + self.w].copy_from_slice(&self.data[y * self.w..(y + 1) * self.w]);
        }
        out
    }

    pub fn window(&self, y0: usize, x0: usize, h: usize, w: usize) -> LabelMap {
        let mut data = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.w + x0..y * self.w + x0 + w]);
        }
        LabelMap { h, w, data }
    }

    /// Nearest-neighbour resize on the same align-corners grid as
    /// [`Tensor::bilinear_resize`].
    pub fn resize_nearest(&self, h: usize, w: usize) -> LabelMap {
        let pick = |t: &crate::tensor::Tap| if t.frac < 0.5 { t.lo } else { t.hi };
        let ys: Vec<usize> = axis_taps(self.h, h).iter().map(pick).collect();
        let xs: Vec<usize> = axis_taps(self.w, w).iter().map(pick).collect();
        let mut data = Vec::with_capacity(h * w);
        for &y in &ys {
            data.extend(xs.iter().map(|&x| self.get(y, x)));
        }
        LabelMap { h, w, data }
    }

    /// Keeps rows and columns 0, s, 2s, ...
    pub fn subsample(&self, stride: usize) -> LabelMap {
        let (h, w) = (self.h.div_ceil(stride), self.w.div_ceil(stride));
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            data.extend((0..w).map(|x| self.get(y * stride, x * stride)));
        }
        LabelMap { h, w, data }
    }

    /// Sorted distinct labels, excluding the ignore label.
    pub fn present_classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..255u8).filter(|&c| seen[c as usize]).collect()
    }

    pub fn to_pnm(&self) -> Pnm {
        Pnm { width: self.w, height: self.h, channels: 1, data: self.data.clone() }
    }

    pub fn from_pnm(p: Pnm) -> Result<Self> {
        if p.channels != 1 {
            return shape_err("label maps must be single-channel");
        }
        LabelMap::new(p.height, p.width, p.data)
    }
}

/// Converts an RGB raster into a (1, 3, h, w) tensor with values in [0, 1].
pub fn image_from_pnm(p: &Pnm) -> Result<Tensor> {
    if p.channels != 3 {
        return shape_err("images must be RGB");
    }
    let (h, w) = (p.height, p.width);
    Ok(Tensor::from_fn([1, 3, h, w], |_, c, y, x| p.data[(y * w + x) * 3 + c] as f64 / 255.0))
}

/// Quantizes a single-sample RGB tensor to 8 bits (clamped, rounded).
pub fn image_to_pnm(t: &Tensor) -> Result<Pnm> {
    let [n, c, h, w] = t.shape();
    if n != 1 || c != 3 {
        return shape_err(format!("expected a (1, 3, h, w) image, got {:?}", t.shape()));
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                data.push((t.get(0, ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Pnm::rgb(w, h, data)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    LabelMap::from_pnm(Pnm::read(path)?)
}

pub fn write_pgm(path: impl AsRef<Path>, label: &LabelMap) -> Result<()> {
    label.to_pnm().write(path)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    image_from_pnm(&Pnm::read(path)?)
}

pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    image_to_pnm(image)?.write(path)
}

#[derive(Clone, Debug)]
pub struct Sample {
    /// Shape (1, 3, h, w), values in [0, 1].
    pub image: Tensor,
    pub label: LabelMap,
}

impl Sample {
    pub fn new(image: Tensor, label: LabelMap) -> Result<Self> {
        if image.n() != 1 || image.c() != 3 || image.h() != label.h || image.w() != label.w {
            return shape_err(format!("image {:?} does not match {}x{} label map", image.shape(), label.h, label.w));
        }
        Ok(Sample { image, label })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub label: PathBuf,
    /// Classes present in the label map (ignore label excluded).
    pub classes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses a manifest and scans every label file for its class set.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut entries = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let body = line.trim_end_matches(['\n', '\r']);
            if !body.is_empty() {
                let Some((image, label)) = body.split_once('\t') else {
                    return Err(Error::Parse { offset, msg: format!("expected image<TAB>label, got {body:?}") });
                };
                let label_map = read_pgm(root.join(label))?;
                entries.push(ManifestEntry {
                    image: image.into(),
                    label: label.into(),
                    classes: label_map.present_classes(),
                });
            }
            offset += line.len();
        }
        Ok(Manifest { root, entries })
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|e| format!("{}\t{}\n", e.image.display(), e.label.display())).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load_sample(&self, i: usize) -> Result<Sample> {
        let e = &self.entries[i];
        let sample = Sample::new(read_ppm(self.root.join(&e.image))?, read_pgm(self.root.join(&e.label))?)?;
        if sample.label.present_classes() != e.classes {
            return config_err(format!("{} changed since the manifest was loaded", e.label.display()));
        }
        Ok(sample)
    }

    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.load_sample(i)).collect()
    }
}

/// Per-channel mean over every pixel of every sample.
pub fn channel_mean(samples: &[Sample]) -> [f64; 3] {
    let mut sum = [0.0; 3];
    let mut count = 0usize;
    for s in samples {
        for (c, acc) in sum.iter_mut().enumerate() {
            *acc += s.image.plane(0, c).iter().sum::<f64>();
        }
        count += s.label.h * s.label.w;
    }
    if count == 0 {
        return [0.5; 3];
    }
    sum.map(|v| v / count as f64)
}
