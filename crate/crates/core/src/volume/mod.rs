//! Volumes, slices, preprocessing and triplet extraction.

mod dataset;
mod phantom;
mod svol;

pub use dataset::{make_splits, Dataset, Split, SplitManifest, DEFAULT_MIN_SLICES};
pub use phantom::{generate_phantom, PhantomParams};
pub use svol::{load_volume, save_volume, read_volume, write_volume};
pub(crate) use dataset::derive_seed;
pub(crate) use svol::write_atomic;

use crate::error::{Error, Result};

/// Reference through-plane spacing of the acquired volumes.
pub const REFERENCE_SLICE_MM: f64 = 1.5;

/// A single 2-D slice, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn same_extents(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub(crate) fn check_same(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_extents(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }
}

/// One patient's image stack. Voxels are slice-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub patient_id: String,
    pub height: usize,
    pub width: usize,
    pub n_slices: usize,
    pub in_plane_mm: f64,
    pub slice_mm: f64,
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(
        patient_id: impl Into<String>,
        height: usize,
        width: usize,
        n_slices: usize,
        in_plane_mm: f64,
        slice_mm: f64,
        voxels: Vec<f32>,
    ) -> Result<Self> {
        if voxels.len() != n_slices * height * width {
            return Err(Error::shape(format!(
                "{n_slices}x{height}x{width} volume needs {} voxels, got {}",
                n_slices * height * width,
                voxels.len()
            )));
        }
        Ok(Self {
            patient_id: patient_id.into(),
            height,
            width,
            n_slices,
            in_plane_mm,
            slice_mm,
            voxels,
        })
    }

    /// Stack equally-sized slices into a volume.
    pub fn from_slices(
        patient_id: impl Into<String>,
        slices: &[Image],
        in_plane_mm: f64,
        slice_mm: f64,
    ) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::arg("a volume needs at least one slice"))?;
        let mut voxels = Vec::with_capacity(slices.len() * first.data.len());
        for s in slices {
            first.check_same(s, "volume slices")?;
            voxels.extend_from_slice(&s.data);
        }
        Self::new(
            patient_id,
            first.height,
            first.width,
            slices.len(),
            in_plane_mm,
            slice_mm,
            voxels,
        )
    }

    pub fn slice_len(&self) -> usize {
        self.height * self.width
    }

    pub fn slice_data(&self, index: usize) -> &[f32] {
        let n = self.slice_len();
        &self.voxels[index * n..(index + 1) * n]
    }

    pub fn slice(&self, index: usize) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.slice_data(index).to_vec(),
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.voxels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Per-volume min-max scaling to `[0, 1]`.
///
/// A constant volume has no range to scale; it maps to all zeros and a warning
/// is logged.
pub fn normalize_minmax(volume: &Volume) -> Volume {
    let (lo, hi) = volume.min_max();
    let mut out = volume.clone();
    if volume.voxels.is_empty() {
        return out;
    }
    if hi <= lo {
        log::warn!(
            "volume {} is constant ({lo}); normalized to zeros",
            volume.patient_id
        );
        out.voxels.fill(0.0);
        return out;
    }
    let (lo, range) = (lo as f64, hi as f64 - lo as f64);
    for v in out.voxels.iter_mut() {
        *v = ((*v as f64 - lo) / range) as f32;
    }
    out
}

/// Bilinear resize with half-pixel centers (align-corners off).
pub fn resize_bilinear(image: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg(format!(
            "resize target {out_h}x{out_w} has a zero extent"
        )));
    }
    if image.height == 0 || image.width == 0 {
        return Err(Error::arg("cannot resize an empty image"));
    }
    let taps = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|j| {
                let src = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = taps(out_h, image.height);
    let xs = taps(out_w, image.width);
    let mut data = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = image.at(y0, x0) as f64 * (1.0 - fx) + image.at(y0, x1) as f64 * fx;
            let bot = image.at(y1, x0) as f64 * (1.0 - fx) + image.at(y1, x1) as f64 * fx;
            data.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    Image::new(out_h, out_w, data)
}

/// `(S[i-k], S[i+k]) -> S[i]`, one supervised interpolation example.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletSample {
    pub lower: Image,
    pub upper: Image,
    pub target: Image,
    pub k: usize,
    pub patient_id: String,
    pub slice_index: usize,
}

/// One triplet per valid centre index `i` in `k..n_slices-k`.
pub fn extract_triplets(volume: &Volume, k: usize) -> Result<Vec<TripletSample>> {
    if k == 0 {
        return Err(Error::arg("slice gap k must be at least 1"));
    }
    if volume.n_slices < 2 * k + 1 {
        log::warn!(
            "volume {} has {} slices, fewer than the {} needed for k={k}",
            volume.patient_id,
            volume.n_slices,
            2 * k + 1
        );
        return Ok(Vec::new());
    }
    Ok((k..volume.n_slices - k)
        .map(|i| TripletSample {
            lower: volume.slice(i - k),
            upper: volume.slice(i + k),
            target: volume.slice(i),
            k,
            patient_id: volume.patient_id.clone(),
            slice_index: i,
        })
        .collect())
}
