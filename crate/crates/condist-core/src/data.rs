//! Deterministic synthetic "organ + tumor" 2D segmentation data.
//!
//! Every image contains all four toy organs as non-overlapping ellipses in
//! distinct (but noise-overlapped) intensity bands; organs A-C may carry an
//! inner tumor blob. Client k receives partial labels with every class
//! outside its foreground set folded into background; the external test set
//! keeps the full labels. Generation is a pure function of [`DatasetSpec`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::LabelField;
use crate::tensor::{Real, Tensor};
use crate::topology::toy;

pub const DATASET_MAGIC: [u8; 4] = *b"CDDS";
pub const DATASET_VERSION: u32 = 1;

/// Declarative description of one synthetic data generation run.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub train_per_client: usize,
    pub val_per_client: usize,
    pub test_per_client: usize,
    pub external_test: usize,
    pub height: usize,
    pub width: usize,
    /// Organ ellipse radius range in pixels.
    pub organ_radius_min: f64,
    pub organ_radius_max: f64,
    /// Tumor radii as a fraction of the host organ radii.
    pub tumor_frac_min: f64,
    pub tumor_frac_max: f64,
    /// Probability that an organ with a tumor class actually carries one.
    pub tumor_probability: f64,
    /// Gaussian intensity noise.
    pub noise_sigma: f64,
    pub background_mean: f64,
    /// Mean intensity per organ (A, B, C, D).
    pub organ_means: [f64; 4],
    /// Tumor intensity offset from its host organ mean.
    pub tumor_shift: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 7,
            train_per_client: 64,
            val_per_client: 16,
            test_per_client: 16,
            external_test: 16,
            height: 64,
            width: 64,
            organ_radius_min: 6.0,
            organ_radius_max: 11.0,
            tumor_frac_min: 0.35,
            tumor_frac_max: 0.6,
            tumor_probability: 0.7,
            noise_sigma: 0.05,
            background_mean: 0.1,
            organ_means: [0.4, 0.52, 0.64, 0.76],
            tumor_shift: -0.16,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidConfig("image extents must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tumor_probability) {
            return Err(Error::InvalidConfig("tumor_probability must be in [0, 1]".into()));
        }
        if self.organ_radius_min < 2.0 || self.organ_radius_max < self.organ_radius_min {
            return Err(Error::InvalidConfig("organ radius range is degenerate".into()));
        }
        if !(0.0 < self.tumor_frac_min && self.tumor_frac_min <= self.tumor_frac_max && self.tumor_frac_max < 0.95)
        {
            return Err(Error::InvalidConfig("tumor fraction range is degenerate".into()));
        }
        // Each organ must fit inside one image quadrant.
        let quad = (self.width.min(self.height) / 2) as f64;
        if 2.0 * (self.organ_radius_min + 1.0) + 1.0 >= quad {
            return Err(Error::InvalidConfig("organs do not fit in an image quadrant".into()));
        }
        Ok(())
    }
}

/// One image with its full label map; partial views are derived per client.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Row-major intensities, `height * width`.
    pub image: Vec<f32>,
    /// Row-major class indices, `height * width`.
    pub label: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Assemble a batch as a `[B, 1, H, W]` image tensor plus its labels.
    pub fn batch<F: Real>(&self, indices: &[usize]) -> Result<(Tensor<F>, LabelField)> {
        let hw = self.height * self.width;
        let mut image = Vec::with_capacity(indices.len() * hw);
        let mut label = Vec::with_capacity(indices.len() * hw);
        for &i in indices {
            let s = &self.samples[i];
            image.extend(s.image.iter().map(|&v| F::from_f32(v).expect("f32 fits")));
            label.extend_from_slice(&s.label);
        }
        let img = Tensor::constant(image, &[indices.len(), 1, self.height, self.width])?;
        let lab = LabelField::new(vec![indices.len(), self.height, self.width], label)?;
        Ok((img, lab))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        for s in &self.samples {
            for &v in &s.image {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&s.label);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let need = |have: usize, n: usize, what: &str| -> Result<()> {
            if have < n {
                return Err(Error::BadDataset(format!("truncated while reading {what}")));
            }
            Ok(())
        };
        need(bytes.len(), 14, "header")?;
        if bytes[..4] != DATASET_MAGIC {
            return Err(Error::BadDataset(format!("bad magic {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
        if version != DATASET_VERSION {
            return Err(Error::BadDataset(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        let height = u16::from_le_bytes([bytes[12], bytes[13]]) as usize;
        let width = u16::from_le_bytes([bytes[14], bytes[15]]) as usize;
        let hw = height * width;
        let mut pos = 16;
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            need(bytes.len() - pos, hw * 4 + hw, "sample payload")?;
            let image: Vec<f32> = bytes[pos..pos + hw * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            pos += hw * 4;
            let label = bytes[pos..pos + hw].to_vec();
            pos += hw;
            if label.iter().any(|&c| c as usize >= toy::NUM_CLASSES) {
                return Err(Error::BadDataset(format!("sample {i} has an out-of-range class")));
            }
            samples.push(Sample { image, label });
        }
        if pos != bytes.len() {
            return Err(Error::BadDataset(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Dataset { height, width, samples })
    }
}

/// Train/val/test splits of one client, labels already reduced to the
/// client's foreground set.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub clients: Vec<ClientData>,
    /// Fully annotated held-out set.
    pub external_test: Dataset,
}

/// Generate all client datasets plus the external test set.
pub fn generate(spec: &DatasetSpec) -> Result<GeneratedData> {
    spec.validate()?;
    let mut clients = Vec::with_capacity(toy::NUM_CLIENTS);
    for k in 0..toy::NUM_CLIENTS {
        let topo = toy::client_topology(k);
        let splits = [spec.train_per_client, spec.val_per_client, spec.test_per_client];
        let mut made: Vec<Dataset> = Vec::with_capacity(3);
        for (si, &n) in splits.iter().enumerate() {
            let mut ds = gen_split(spec, (k * 4 + si) as u64, n)?;
            for s in &mut ds.samples {
                for c in s.label.iter_mut() {
                    if !topo.is_foreground(*c as usize) {
                        *c = 0;
                    }
                }
            }
            made.push(ds);
        }
        let test = made.pop().expect("three splits");
        let val = made.pop().expect("three splits");
        let train = made.pop().expect("three splits");
        clients.push(ClientData { train, val, test });
    }
    let external_test = gen_split(spec, 16, spec.external_test)?;
    Ok(GeneratedData { clients, external_test })
}

fn gen_split(spec: &DatasetSpec, stream: u64, n: usize) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        samples.push(gen_sample(spec, &mut rng)?);
    }
    Ok(Dataset { height: spec.height, width: spec.width, samples })
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

fn gen_sample(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let (h, w) = (spec.height, spec.width);
    let hw = h * w;
    // One organ per image quadrant (assignment shuffled per sample), each
    // ellipse confined to its quadrant so organs can never overlap.
    let mut label = vec![0u8; hw];
    let (qh, qw) = (h as f64 / 2.0, w as f64 / 2.0);
    let mut quads = [(0.0, 0.0), (qw, 0.0), (0.0, qh), (qw, qh)];
    for i in (1..quads.len()).rev() {
        let j = rng.gen_range(0..=i);
        quads.swap(i, j);
    }
    let mut organs: Vec<Ellipse> = Vec::with_capacity(4);
    for (i, (organ_class, _)) in toy::ORGANS.iter().enumerate() {
        let (qx, qy) = quads[i];
        let mut placed = false;
        for _ in 0..200 {
            let rx = uniform(rng, spec.organ_radius_min, spec.organ_radius_max);
            let ry = uniform(rng, spec.organ_radius_min, spec.organ_radius_max);
            // the ellipse plus a 1px margin must fit inside the quadrant
            if 2.0 * (rx + 1.0) + 1.0 >= qw || 2.0 * (ry + 1.0) + 1.0 >= qh {
                continue;
            }
            let cx = uniform(rng, qx + rx + 1.0, qx + qw - 1.0 - rx);
            let cy = uniform(rng, qy + ry + 1.0, qy + qh - 1.0 - ry);
            let cand = Ellipse { cx, cy, rx, ry };
            rasterize(&cand, h, w, &mut label, *organ_class as u8);
            organs.push(cand);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::PlacementFailed { seed: spec.seed });
        }
    }
    // Inner tumors, analytically contained in the host ellipse with a 1px
    // margin so tumor pixels never border background.
    for (i, (_, tumor_class)) in toy::ORGANS.iter().enumerate() {
        let Some(tumor_class) = tumor_class else { continue };
        let coin: f64 = rng.gen();
        if coin >= spec.tumor_probability {
            continue;
        }
        let host = &organs[i];
        let frac = uniform(rng, spec.tumor_frac_min, spec.tumor_frac_max);
        // clamp so a centered tumor always satisfies the containment bound
        let trx = (host.rx * frac).min(0.7 * host.rx - 1.2);
        let try_ = (host.ry * frac).min(0.7 * host.ry - 1.2);
        if trx < 1.0 || try_ < 1.0 {
            continue;
        }
        // sufficient condition for the tumor ellipse plus margin to lie
        // inside the host: ((|dx|+rx+1)/Rx)^2 + ((|dy|+ry+1)/Ry)^2 <= 1
        let fits = |dx: f64, dy: f64| {
            let x = (dx.abs() + trx + 1.0) / host.rx;
            let y = (dy.abs() + try_ + 1.0) / host.ry;
            x * x + y * y <= 1.0
        };
        let (mut dx, mut dy) = (0.0, 0.0);
        for _ in 0..20 {
            let cx = uniform(rng, -(host.rx - trx), host.rx - trx);
            let cy = uniform(rng, -(host.ry - try_), host.ry - try_);
            if fits(cx, cy) {
                dx = cx;
                dy = cy;
                break;
            }
        }
        debug_assert!(fits(dx, dy), "centered tumor must fit after the clamp");
        let t = Ellipse { cx: host.cx + dx, cy: host.cy + dy, rx: trx, ry: try_ };
        for yy in 0..h {
            for xx in 0..w {
                if t.contains(xx as f64, yy as f64) && host.contains(xx as f64, yy as f64) {
                    label[yy * w + xx] = *tumor_class as u8;
                }
            }
        }
    }
    // Intensities: class band mean plus Gaussian noise.
    let mut image = Vec::with_capacity(hw);
    for &c in &label {
        let mean = class_mean(spec, c);
        image.push((mean + spec.noise_sigma * gaussian(rng)) as f32);
    }
    Ok(Sample { image, label })
}

fn class_mean(spec: &DatasetSpec, class: u8) -> f64 {
    match class {
        0 => spec.background_mean,
        c => {
            let organ_idx = ((c - 1) / 2) as usize;
            let base = spec.organ_means[organ_idx];
            if c % 2 == 0 {
                base + spec.tumor_shift
            } else {
                base
            }
        }
    }
}

fn rasterize(e: &Ellipse, h: usize, w: usize, label: &mut [u8], class: u8) {
    let x0 = (e.cx - e.rx).floor().max(0.0) as usize;
    let x1 = ((e.cx + e.rx).ceil() as usize).min(w - 1);
    let y0 = (e.cy - e.ry).floor().max(0.0) as usize;
    let y1 = ((e.cy + e.ry).ceil() as usize).min(h - 1);
    for yy in y0..=y1 {
        for xx in x0..=x1 {
            if e.contains(xx as f64, yy as f64) {
                label[yy * w + xx] = class;
            }
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.gen();
    lo + u * (hi - lo)
}

/// Box-Muller standard normal from two uniform draws.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (core::f64::consts::TAU * u2).cos()
}

// ---------------------------------------------------------------------------
// Batch iteration
// ---------------------------------------------------------------------------

/// Infinite batch iterator over a seeded permutation; reshuffles at every
/// epoch boundary from the same generator, so the whole sequence is a pure
/// function of (dataset length, batch size, seed). The final batch of an
/// epoch may be a remainder batch.
pub struct BatchIter {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchIter {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        assert!(n > 0 && batch > 0, "empty dataset or batch");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(&mut order, &mut rng);
        BatchIter { order, pos: 0, batch, rng }
    }
}

impl Iterator for BatchIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            shuffle(&mut self.order, &mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(out)
    }
}

fn shuffle(xs: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..xs.len()).rev() {
        let j = rng.gen_range(0..=i);
        xs.swap(i, j);
    }
}
