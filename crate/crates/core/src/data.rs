//! Training and evaluation image sources.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::config::{DataConfig, RunConfig};
use crate::error::{Error, Result};
use crate::image_io::{load_image, ImageTensor};
use crate::rng::{tagged_stream, Rng};
use crate::tensor::resize_bilinear;

/// Seed offset of the default held-out synthetic evaluation set, so
/// evaluation textures never coincide with training ones.
pub const HELD_OUT_SEED_OFFSET: u64 = 1000;

/// Indexed collection of canonical-range RGB images of one target size.
pub trait DataSource: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<ImageTensor>;
    fn size(&self) -> (usize, usize);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Procedural textures, generated on demand from `(seed, index)`.
#[derive(Clone, Debug)]
pub struct SyntheticTextures {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
}

impl SyntheticTextures {
    pub fn new(seed: u64, count: usize, height: usize, width: usize) -> Self {
        Self {
            seed,
            count,
            height,
            width,
        }
    }
}

impl DataSource for SyntheticTextures {
    fn len(&self) -> usize {
        self.count
    }

    fn get(&self, index: usize) -> Result<ImageTensor> {
        if index >= self.count {
            return Err(Error::Contract(format!("texture {index} of {}", self.count)));
        }
        let mut rng = tagged_stream(self.seed, "texture", index as u64);
        Ok(texture(&mut rng, self.height, self.width))
    }

    fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// `n` textures drawn in sequence from `rng`.
pub fn synth_textures(rng: &mut Rng, n: usize, height: usize, width: usize) -> Vec<ImageTensor> {
    (0..n).map(|_| texture(rng, height, width)).collect()
}

/// A mixture of oriented sinusoids with log-uniform frequencies plus a
/// Gaussian-smoothed noise field, each with a random colour, rescaled into
/// a random sub-interval of `[-1, 1]`.
fn texture(rng: &mut Rng, h: usize, w: usize) -> ImageTensor {
    let n = h * w;
    let mut planes = vec![0.0f64; 3 * n];
    let components = rng.gen_range(3..=6);
    let max_cycles = (h.min(w) as f64 / 3.0).max(2.0);
    for _ in 0..components {
        let cycles = (rng.gen_range(0.0..max_cycles.ln())).exp();
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp = rng.gen_range(0.2..1.0);
        let colour: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let (fx, fy) = (cycles * theta.cos() / w as f64, cycles * theta.sin() / h as f64);
        for y in 0..h {
            for x in 0..w {
                let v = amp * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + phase).sin();
                for c in 0..3 {
                    planes[c * n + y * w + x] += colour[c] * v;
                }
            }
        }
    }
    let sigma = rng.gen_range(0.5..3.0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let raw: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    let field = smooth(&raw, h, w, sigma);
    let spread = field.iter().map(|v| v * v).sum::<f64>().sqrt() / (n as f64).sqrt();
    let amp = rng.gen_range(0.3..1.0) / spread.max(1e-12);
    let colour: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.3..1.0));
    for c in 0..3 {
        for i in 0..n {
            planes[c * n + i] += colour[c] * amp * field[i];
        }
    }

    let (lo, hi) = planes
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let low = rng.gen_range(-1.0..-0.3);
    let high = rng.gen_range(0.3..1.0);
    let k = (high - low) / (hi - lo).max(1e-12);
    let data = planes
        .iter()
        .map(|&v| (low + (v - lo) * k).clamp(-1.0, 1.0) as f32)
        .collect();
    ImageTensor::new(3, h, w, data)
}

/// Separable Gaussian blur with wrap-around borders.
fn smooth(x: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / total).collect();
    let wrap = |i: isize, n: usize| i.rem_euclid(n as isize) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            tmp[y * w + xx] = taps
                .iter()
                .enumerate()
                .map(|(j, t)| t * x[y * w + wrap(xx as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            out[y * w + xx] = taps
                .iter()
                .enumerate()
                .map(|(j, t)| t * tmp[wrap(y as isize + j as isize - r, h) * w + xx])
                .sum();
        }
    }
    out
}

/// Every PNG or JPEG in a directory (sorted by name), resized to the target.
#[derive(Clone, Debug)]
pub struct ImageFolder {
    files: Vec<PathBuf>,
    height: usize,
    width: usize,
}

impl ImageFolder {
    pub fn open(dir: impl AsRef<Path>, height: usize, width: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let mut files = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let ext = path
                .extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase);
            if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
                files.push(path);
            }
        }
        files.sort();
        if files.is_empty() {
            return Err(Error::Config(format!("no PNG or JPEG images in {}", dir.display())));
        }
        Ok(Self { files, height, width })
    }

    /// Keeps at most the first `n` files.
    pub fn truncate(mut self, n: usize) -> Self {
        self.files.truncate(n);
        self
    }
}

impl DataSource for ImageFolder {
    fn len(&self) -> usize {
        self.files.len()
    }

    fn get(&self, index: usize) -> Result<ImageTensor> {
        let img = load_image(&self.files[index])?;
        if img.height() == self.height && img.width() == self.width {
            return Ok(img);
        }
        Ok(ImageTensor::from_tensor(resize_bilinear(&img.to_batch(), self.height, self.width)))
    }

    fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// In-memory images, e.g. a single batch to overfit.
#[derive(Clone, Debug)]
pub struct InMemory(pub Vec<ImageTensor>);

impl DataSource for InMemory {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn get(&self, index: usize) -> Result<ImageTensor> {
        Ok(self.0[index].clone())
    }

    fn size(&self) -> (usize, usize) {
        self.0.first().map_or((0, 0), |i| (i.height(), i.width()))
    }
}

/// The training source a configuration describes.
pub fn training_source(cfg: &RunConfig) -> Result<Box<dyn DataSource>> {
    Ok(match &cfg.data {
        DataConfig::Synthetic => Box::new(SyntheticTextures::new(
            cfg.seed,
            cfg.dataset_size,
            cfg.height(),
            cfg.width(),
        )),
        DataConfig::ImageFolder { path } => {
            Box::new(ImageFolder::open(path, cfg.height(), cfg.width())?.truncate(cfg.dataset_size))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use rustfft::{num_complex::Complex, FftPlanner};

    #[test]
    fn fixed_seed_gives_identical_textures() {
        let a = synth_textures(&mut seeded_rng(4), 5, 32, 48);
        let b = synth_textures(&mut seeded_rng(4), 5, 32, 48);
        assert_eq!(a, b);
        let c = synth_textures(&mut seeded_rng(5), 5, 32, 48);
        assert_ne!(a, c);
        let src = SyntheticTextures::new(9, 3, 64, 64);
        assert_eq!(src.get(2).unwrap(), src.get(2).unwrap());
    }

    #[test]
    fn textures_stay_in_range() {
        for img in synth_textures(&mut seeded_rng(1), 40, 64, 64) {
            assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            let (lo, hi) = img.data().iter().fold((1.0f32, -1.0f32), |(a, b), &v| (a.min(v), b.max(v)));
            assert!(hi - lo > 0.5, "texture has too little contrast");
        }
    }

    /// Radially binned power spectrum of the mean-removed luminance.
    fn band_energy(img: &ImageTensor) -> (f64, f64) {
        let (h, w) = (img.height(), img.width());
        let n = h * w;
        let d = img.data();
        let mean = (0..n).map(|i| (d[i] + d[n + i] + d[2 * n + i]) as f64 / 3.0).sum::<f64>() / n as f64;
        let mut buf: Vec<Complex<f64>> = (0..n)
            .map(|i| Complex::new((d[i] + d[n + i] + d[2 * n + i]) as f64 / 3.0 - mean, 0.0))
            .collect();
        let mut planner = FftPlanner::new();
        let row = planner.plan_fft_forward(w);
        for r in buf.chunks_mut(w) {
            row.process(r);
        }
        let col = planner.plan_fft_forward(h);
        let mut column = vec![Complex::new(0.0, 0.0); h];
        for x in 0..w {
            for y in 0..h {
                column[y] = buf[y * w + x];
            }
            col.process(&mut column);
            for y in 0..h {
                buf[y * w + x] = column[y];
            }
        }
        let (mut low, mut high) = (0.0, 0.0);
        let cutoff = h.min(w) as f64 / 8.0;
        for y in 0..h {
            for x in 0..w {
                let fy = y.min(h - y) as f64;
                let fx = x.min(w - x) as f64;
                let e = buf[y * w + x].norm_sqr();
                if (fx * fx + fy * fy).sqrt() < cutoff {
                    low += e;
                } else {
                    high += e;
                }
            }
        }
        (low, high)
    }

    #[test]
    fn spectrum_spans_low_and_high_bands() {
        let imgs = synth_textures(&mut seeded_rng(11), 64, 64, 64);
        let (mut low, mut high) = (0.0, 0.0);
        for img in &imgs {
            let (l, h) = band_energy(img);
            let t = l + h;
            low += l / t;
            high += h / t;
        }
        let total = low + high;
        assert!(low / total >= 0.1, "low band {}", low / total);
        assert!(high / total >= 0.1, "high band {}", high / total);
    }

    #[test]
    fn folder_source_resizes_and_sorts() {
        let dir = tempfile::tempdir().unwrap();
        for (i, name) in ["b.png", "a.png"].iter().enumerate() {
            let img = ImageTensor::filled(3, 40, 40, i as f32 * 0.5 - 0.5);
            crate::image_io::save_image(&img, dir.path().join(name)).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "skip").unwrap();
        let src = ImageFolder::open(dir.path(), 32, 32).unwrap();
        assert_eq!(src.len(), 2);
        let first = src.get(0).unwrap();
        assert_eq!((first.height(), first.width()), (32, 32));
        // a.png was written second, with the brighter value
        assert!(first.data().iter().all(|&v| (v - 0.0).abs() < 0.01));
        assert!(ImageFolder::open(tempfile::tempdir().unwrap().path(), 32, 32).is_err());
    }
}
