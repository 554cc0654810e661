//! Dataset ingestion (IDX image/label files), block-average downsampling,
//! label-skew partitioning, synthetic problem generators and a procedural
//! digit renderer for self-contained end-to-end runs.
//!
//! Pixels are rescaled from [0, 255] to [0, π] so features feed the angle
//! encoder directly. Normalization is idempotent: features already inside
//! [0, π] are left untouched.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{QflError, Result};

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Labeled dataset of feature vectors in [0, π].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<(Vec<f64>, usize)>,
    pub feature_dim: usize,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(samples: Vec<(Vec<f64>, usize)>, n_classes: usize) -> Result<Self> {
        let feature_dim = samples.first().map(|(x, _)| x.len()).unwrap_or(0);
        for (i, (x, y)) in samples.iter().enumerate() {
            if x.len() != feature_dim {
                return Err(QflError::structural(format!(
                    "sample {i} has dimension {} instead of {feature_dim}",
                    x.len()
                )));
            }
            if *y >= n_classes {
                return Err(QflError::structural(format!(
                    "sample {i} has label {y} outside 0..{n_classes}"
                )));
            }
        }
        Ok(Dataset { samples, feature_dim, n_classes })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Rescale features into [0, π]. Identity when already in range, so
    /// applying it twice equals applying it once; the map is affine and
    /// order-preserving.
    pub fn normalized(mut self) -> Dataset {
        let in_range = self
            .samples
            .iter()
            .all(|(x, _)| x.iter().all(|v| (0.0..=std::f64::consts::PI).contains(v)));
        if in_range {
            return self;
        }
        let scale = std::f64::consts::PI / 255.0;
        for (x, _) in self.samples.iter_mut() {
            for v in x.iter_mut() {
                *v *= scale;
            }
        }
        self
    }

    /// Keep two classes and relabel them as {0, 1} regression targets.
    pub fn binary_subset(&self, class_zero: usize, class_one: usize) -> Result<Dataset> {
        let samples: Vec<(Vec<f64>, usize)> = self
            .samples
            .iter()
            .filter(|(_, y)| *y == class_zero || *y == class_one)
            .map(|(x, y)| (x.clone(), usize::from(*y == class_one)))
            .collect();
        if samples.is_empty() {
            return Err(QflError::input(format!(
                "no samples with classes {class_zero} or {class_one}"
            )));
        }
        Dataset::new(samples, 2)
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(QflError::format(format!(
            "truncated file: {what} needs bytes {offset}..{end}, file has {}",
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Load an IDX image/label pair. Pixels are rescaled to [0, π]; labels become
/// class indices. `block_grid = Some((rows, cols))` block-averages each image
/// onto a rows×cols grid before rescaling.
pub fn load_mnist_idx(
    images_path: &Path,
    labels_path: &Path,
    block_grid: Option<(usize, usize)>,
) -> Result<Dataset> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;

    let magic = read_u32_be(&images, 0, "image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(QflError::format(format!(
            "bad image magic {magic:#010x} at byte offset 0, expected {IDX_IMAGE_MAGIC:#010x}"
        )));
    }
    let count = read_u32_be(&images, 4, "image count")? as usize;
    let rows = read_u32_be(&images, 8, "image rows")? as usize;
    let cols = read_u32_be(&images, 12, "image cols")? as usize;
    let expected = 16 + count * rows * cols;
    if images.len() != expected {
        return Err(QflError::format(format!(
            "image payload ends at byte {} but header promises {expected}",
            images.len()
        )));
    }

    let lmagic = read_u32_be(&labels, 0, "label magic")?;
    if lmagic != IDX_LABEL_MAGIC {
        return Err(QflError::format(format!(
            "bad label magic {lmagic:#010x} at byte offset 0, expected {IDX_LABEL_MAGIC:#010x}"
        )));
    }
    let lcount = read_u32_be(&labels, 4, "label count")? as usize;
    if labels.len() != 8 + lcount {
        return Err(QflError::format(format!(
            "label payload ends at byte {} but header promises {}",
            labels.len(),
            8 + lcount
        )));
    }
    if lcount != count {
        return Err(QflError::format(format!(
            "{count} images but {lcount} labels (counts at byte offsets 4)"
        )));
    }

    let mut samples = Vec::with_capacity(count);
    let mut n_classes = 0usize;
    for i in 0..count {
        let start = 16 + i * rows * cols;
        let raw = &images[start..start + rows * cols];
        let pixels: Vec<f64> = match block_grid {
            None => raw.iter().map(|&p| p as f64).collect(),
            Some((gr, gc)) => block_average(raw, rows, cols, gr, gc)?,
        };
        let features = pixels.iter().map(|p| p * std::f64::consts::PI / 255.0).collect();
        let label = labels[8 + i] as usize;
        n_classes = n_classes.max(label + 1);
        samples.push((features, label));
    }
    Dataset::new(samples, n_classes.max(1))
}

/// Average pixel blocks onto a `grid_rows`×`grid_cols` grid.
pub fn block_average(
    pixels: &[u8],
    rows: usize,
    cols: usize,
    grid_rows: usize,
    grid_cols: usize,
) -> Result<Vec<f64>> {
    if grid_rows == 0 || grid_cols == 0 || grid_rows > rows || grid_cols > cols {
        return Err(QflError::config(format!(
            "cannot average a {rows}x{cols} image onto a {grid_rows}x{grid_cols} grid"
        )));
    }
    let mut out = vec![0.0; grid_rows * grid_cols];
    let mut counts = vec![0usize; grid_rows * grid_cols];
    for r in 0..rows {
        for c in 0..cols {
            let gr = (r * grid_rows / rows).min(grid_rows - 1);
            let gc = (c * grid_cols / cols).min(grid_cols - 1);
            out[gr * grid_cols + gc] += pixels[r * cols + c] as f64;
            counts[gr * grid_cols + gc] += 1;
        }
    }
    for (v, n) in out.iter_mut().zip(&counts) {
        *v /= *n as f64;
    }
    Ok(out)
}

/// Write an IDX image/label pair; the inverse of `load_mnist_idx`.
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    images: &[Vec<u8>],
    labels: &[u8],
    rows: usize,
    cols: usize,
) -> Result<()> {
    if images.len() != labels.len() {
        return Err(QflError::input(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let mut img = Vec::with_capacity(16 + images.len() * rows * cols);
    img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(images.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for im in images {
        if im.len() != rows * cols {
            return Err(QflError::input(format!(
                "image has {} pixels, expected {}",
                im.len(),
                rows * cols
            )));
        }
        img.extend_from_slice(im);
    }
    fs::write(images_path, img)?;

    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    fs::write(labels_path, lab)?;
    Ok(())
}

/// Label-distribution skew partition: each client receives samples from
/// exactly `classes_per_client` classes. Classes are shuffled once, dealt to
/// clients block-cyclically, and each class's samples are split evenly among
/// the clients holding it. The partition is disjoint and covering.
pub fn partition_label_skew(
    dataset: &Dataset,
    clients: usize,
    classes_per_client: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Dataset>> {
    if clients == 0 {
        return Err(QflError::config("need at least one client".to_string()));
    }
    if classes_per_client == 0 || classes_per_client > dataset.n_classes {
        return Err(QflError::config(format!(
            "classes_per_client {classes_per_client} invalid for {} classes",
            dataset.n_classes
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_classes];
    for (i, (_, y)) in dataset.samples.iter().enumerate() {
        by_class[*y].push(i);
    }
    if by_class.iter().any(|c| c.is_empty()) {
        return Err(QflError::config(
            "every class needs at least one sample".to_string(),
        ));
    }

    let mut class_order: Vec<usize> = (0..dataset.n_classes).collect();
    for i in 0..class_order.len() - 1 {
        let j = rng.gen_range(i..class_order.len());
        class_order.swap(i, j);
    }

    // client u takes classes at positions u*cpc .. (u+1)*cpc (mod n_classes)
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_classes];
    for u in 0..clients {
        for j in 0..classes_per_client {
            let class = class_order[(u * classes_per_client + j) % dataset.n_classes];
            holders[class].push(u);
        }
    }

    let mut per_client: Vec<Vec<(Vec<f64>, usize)>> = vec![Vec::new(); clients];
    for (class, indices) in by_class.iter().enumerate() {
        let who = &holders[class];
        if who.is_empty() {
            continue;
        }
        let chunk = indices.len() / who.len();
        let extra = indices.len() % who.len();
        let mut cursor = 0usize;
        for (k, &u) in who.iter().enumerate() {
            let take = chunk + usize::from(k < extra);
            for &i in &indices[cursor..cursor + take] {
                per_client[u].push(dataset.samples[i].clone());
            }
            cursor += take;
        }
    }

    if per_client.iter().any(|c| c.is_empty()) {
        return Err(QflError::config(
            "label-skew assignment left a client without samples".to_string(),
        ));
    }
    per_client
        .into_iter()
        .map(|samples| Dataset::new(samples, dataset.n_classes))
        .collect()
}

/// Synthetic strongly convex federation: client u owns ½ a_u ||θ - c_u||²
/// with a_u ~ U[mu, l_bound]. Optima are placed so the closed-form
/// heterogeneity (1/U) Σ ||a_u (θ* - c_u)||² at θ* = Σ a_u c_u / Σ a_u equals
/// the request exactly.
#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    pub curvatures: Vec<f64>,
    pub optima: Vec<Vec<f64>>,
    pub dim: usize,
}

impl QuadraticProblem {
    /// Global optimum: curvature-weighted mean of client optima.
    pub fn global_optimum(&self) -> Vec<f64> {
        let total: f64 = self.curvatures.iter().sum();
        let mut theta = vec![0.0; self.dim];
        for (a, c) in self.curvatures.iter().zip(&self.optima) {
            for (t, ci) in theta.iter_mut().zip(c) {
                *t += a * ci / total;
            }
        }
        theta
    }

    /// Global loss (1/U) Σ ½ a_u ||θ - c_u||².
    pub fn global_loss(&self, theta: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (a, c) in self.curvatures.iter().zip(&self.optima) {
            let d2: f64 = theta.iter().zip(c).map(|(t, ci)| (t - ci) * (t - ci)).sum();
            acc += 0.5 * a * d2;
        }
        acc / self.curvatures.len() as f64
    }

    /// Global gradient (1/U) Σ a_u (θ - c_u).
    pub fn global_grad(&self, theta: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        for (a, c) in self.curvatures.iter().zip(&self.optima) {
            for (gi, (t, ci)) in g.iter_mut().zip(theta.iter().zip(c)) {
                *gi += a * (t - ci);
            }
        }
        let u = self.curvatures.len() as f64;
        g.iter_mut().for_each(|x| *x /= u);
        g
    }

    /// Heterogeneity at the optimum, by the direct formula.
    pub fn heterogeneity(&self) -> f64 {
        let star = self.global_optimum();
        let mut acc = 0.0;
        for (a, c) in self.curvatures.iter().zip(&self.optima) {
            let d2: f64 = star.iter().zip(c).map(|(s, ci)| (s - ci) * (s - ci)).sum();
            acc += a * a * d2;
        }
        acc / self.curvatures.len() as f64
    }

    /// Serialize to a plain-text form for reproducibility.
    pub fn to_text(&self) -> String {
        let mut out = format!("dim = {}\nclients = {}\n", self.dim, self.curvatures.len());
        for (u, (a, c)) in self.curvatures.iter().zip(&self.optima).enumerate() {
            let cs: Vec<String> = c.iter().map(|x| x.to_string()).collect();
            out.push_str(&format!("client{u}.a = {a}\nclient{u}.c = {}\n", cs.join(",")));
        }
        out
    }
}

pub fn make_quadratic_federation(
    clients: usize,
    dim: usize,
    mu: f64,
    l_bound: f64,
    heterogeneity: f64,
    rng: &mut ChaCha12Rng,
) -> Result<QuadraticProblem> {
    if !(mu > 0.0 && mu <= l_bound) {
        return Err(QflError::config(format!(
            "need 0 < mu <= L, got mu={mu}, L={l_bound}"
        )));
    }
    if clients == 0 || dim == 0 {
        return Err(QflError::config("need clients >= 1 and dim >= 1".to_string()));
    }
    if heterogeneity < 0.0 {
        return Err(QflError::config("heterogeneity must be >= 0".to_string()));
    }
    let curvatures: Vec<f64> = (0..clients).map(|_| rng.gen_range(mu..=l_bound)).collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let raw: Vec<Vec<f64>> = (0..clients)
        .map(|_| (0..dim).map(|_| normal.sample(rng)).collect())
        .collect();
    // center the offsets so Σ a_u δ_u = 0, putting θ* at the origin
    let total: f64 = curvatures.iter().sum();
    let mut mean = vec![0.0; dim];
    for (a, r) in curvatures.iter().zip(&raw) {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += a * x / total;
        }
    }
    let deltas: Vec<Vec<f64>> = raw
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let raw_het: f64 = curvatures
        .iter()
        .zip(&deltas)
        .map(|(a, d)| a * a * d.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        / clients as f64;
    let scale = if heterogeneity == 0.0 {
        0.0
    } else if raw_het > 0.0 {
        (heterogeneity / raw_het).sqrt()
    } else {
        return Err(QflError::config(format!(
            "cannot realize heterogeneity {heterogeneity} with {clients} client(s)"
        )));
    };
    let optima = deltas
        .iter()
        .map(|d| d.iter().map(|x| scale * x).collect())
        .collect();
    Ok(QuadraticProblem { curvatures, optima, dim })
}

// ---------------------------------------------------------------------------
// Procedural digits
// ---------------------------------------------------------------------------

/// Render grayscale 28x28 digit images for classes 0 and 1: zeros are noisy
/// elliptical rings, ones are noisy vertical strokes, both with jittered
/// geometry. Deterministic per seed. Returns (images, labels).
pub fn synthetic_digits(count: usize, rng: &mut ChaCha12Rng) -> (Vec<Vec<u8>>, Vec<u8>) {
    const SIDE: usize = 28;
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = (i % 2) as u8;
        let cx = 13.5 + rng.gen_range(-2.0..2.0);
        let cy = 13.5 + rng.gen_range(-2.0..2.0);
        let mut img = vec![0u8; SIDE * SIDE];
        if label == 0 {
            let rx = rng.gen_range(5.5..8.5);
            let ry = rng.gen_range(6.5..9.5);
            let thickness = rng.gen_range(1.4..2.6);
            for r in 0..SIDE {
                for c in 0..SIDE {
                    let dx = (c as f64 - cx) / rx;
                    let dy = (r as f64 - cy) / ry;
                    let d = (dx * dx + dy * dy).sqrt();
                    let band = ((1.0 - d).abs() * rx.min(ry) / thickness).min(1.0);
                    let v = (1.0 - band) * 255.0;
                    img[r * SIDE + c] = v as u8;
                }
            }
        } else {
            let slant = rng.gen_range(-0.15..0.15);
            let width = rng.gen_range(1.2..2.4);
            let half = rng.gen_range(7.0..10.0);
            for r in 0..SIDE {
                let y = r as f64 - cy;
                if y.abs() > half {
                    continue;
                }
                let center = cx + slant * y;
                for c in 0..SIDE {
                    let d = (c as f64 - center).abs() / width;
                    if d < 1.0 {
                        img[r * SIDE + c] = ((1.0 - d) * 255.0) as u8;
                    }
                }
            }
        }
        // speckle noise
        for p in img.iter_mut() {
            let noisy = *p as i32 + rng.gen_range(-12..=12);
            *p = noisy.clamp(0, 255) as u8;
        }
        images.push(img);
        labels.push(label);
    }
    (images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::f64::consts::PI;

    fn fixture_paths(tag: &str) -> (std::path::PathBuf, std::path::PathBuf) {
        let dir = std::env::temp_dir().join(format!("qfl_idx_{tag}_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        (dir.join("images.idx"), dir.join("labels.idx"))
    }

    #[test]
    fn idx_round_trip_hand_fixture() {
        // hand-built fixture verified against the IDX byte layout: four 2x2
        // images with pixel values chosen to hit the rescale endpoints
        let (ip, lp) = fixture_paths("roundtrip");
        let images = vec![
            vec![0u8, 255, 128, 64],
            vec![255u8, 255, 255, 255],
            vec![0u8, 0, 0, 0],
            vec![10u8, 20, 30, 40],
        ];
        let labels = vec![0u8, 1, 2, 1];
        write_idx(&ip, &lp, &images, &labels, 2, 2).unwrap();

        // verify the raw bytes follow the layout: magic, count, rows, cols
        let raw = fs::read(&ip).unwrap();
        assert_eq!(&raw[0..4], &[0, 0, 8, 3]);
        assert_eq!(&raw[4..8], &[0, 0, 0, 4]);
        assert_eq!(&raw[8..12], &[0, 0, 0, 2]);
        assert_eq!(&raw[12..16], &[0, 0, 0, 2]);
        assert_eq!(raw[16], 0);
        assert_eq!(raw[17], 255);

        let ds = load_mnist_idx(&ip, &lp, None).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.feature_dim, 4);
        assert_eq!(ds.samples[0].0[0], 0.0);
        assert!((ds.samples[0].0[1] - PI).abs() < 1e-12);
        assert_eq!(ds.samples[1].1, 1);
    }

    #[test]
    fn idx_rejects_bad_magic() {
        let (ip, lp) = fixture_paths("badmagic");
        write_idx(&ip, &lp, &[vec![0u8; 4]], &[0], 2, 2).unwrap();
        let mut bytes = fs::read(&ip).unwrap();
        bytes[3] = 0x02; // 0x00000802
        fs::write(&ip, bytes).unwrap();
        let err = load_mnist_idx(&ip, &lp, None).unwrap_err();
        assert!(matches!(err, QflError::Format(_)));
        assert!(err.to_string().contains("offset 0"), "{err}");
    }

    #[test]
    fn idx_rejects_truncation_and_count_mismatch() {
        let (ip, lp) = fixture_paths("trunc");
        write_idx(&ip, &lp, &[vec![1u8; 4], vec![2u8; 4]], &[0, 1], 2, 2).unwrap();
        let bytes = fs::read(&ip).unwrap();
        fs::write(&ip, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(
            load_mnist_idx(&ip, &lp, None),
            Err(QflError::Format(_))
        ));

        let (ip2, lp2) = fixture_paths("mismatch");
        write_idx(&ip2, &lp2, &[vec![1u8; 4], vec![2u8; 4]], &[0, 1], 2, 2).unwrap();
        let mut lab = fs::read(&lp2).unwrap();
        lab[7] = 3; // claim 3 labels
        lab.push(1);
        fs::write(&lp2, lab).unwrap();
        assert!(matches!(
            load_mnist_idx(&ip2, &lp2, None),
            Err(QflError::Format(_))
        ));
    }

    #[test]
    fn block_average_grid() {
        // 4x4 image onto a 2x2 grid: each quadrant averages its 4 pixels
        let pixels: Vec<u8> = (0..16).map(|i| (i * 16) as u8).collect();
        let avg = block_average(&pixels, 4, 4, 2, 2).unwrap();
        assert_eq!(avg.len(), 4);
        assert!((avg[0] - (0.0 + 16.0 + 64.0 + 80.0) / 4.0).abs() < 1e-12);
        assert!(block_average(&pixels, 4, 4, 5, 2).is_err());
    }

    #[test]
    fn normalization_is_idempotent_and_order_preserving() {
        let ds = Dataset::new(vec![(vec![0.0, 100.0, 255.0], 0)], 1).unwrap();
        let n1 = ds.normalized();
        let again = n1.clone().normalized();
        assert_eq!(n1.samples[0].0, again.samples[0].0);
        let f = &n1.samples[0].0;
        assert!(f[0] < f[1] && f[1] < f[2]);
        assert!((f[2] - PI).abs() < 1e-12);
    }

    #[test]
    fn partition_covers_and_is_disjoint() {
        let samples: Vec<(Vec<f64>, usize)> = (0..40)
            .map(|i| (vec![i as f64 / 40.0], i % 4))
            .collect();
        let ds = Dataset::new(samples, 4).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let parts = partition_label_skew(&ds, 2, 2, &mut rng).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts.iter().map(|p| p.len()).sum::<usize>(), 40);
        // each client sees exactly 2 classes and the class sets are disjoint
        let classes: Vec<std::collections::BTreeSet<usize>> = parts
            .iter()
            .map(|p| p.samples.iter().map(|(_, y)| *y).collect())
            .collect();
        assert_eq!(classes[0].len(), 2);
        assert_eq!(classes[1].len(), 2);
        assert!(classes[0].is_disjoint(&classes[1]));
    }

    #[test]
    fn partition_full_class_degenerate_skew() {
        let samples: Vec<(Vec<f64>, usize)> = (0..30).map(|i| (vec![0.1], i % 3)).collect();
        let ds = Dataset::new(samples, 3).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let parts = partition_label_skew(&ds, 3, 3, &mut rng).unwrap();
        for p in &parts {
            let classes: std::collections::BTreeSet<usize> =
                p.samples.iter().map(|(_, y)| *y).collect();
            assert_eq!(classes.len(), 3);
        }
    }

    #[test]
    fn partition_shares_scarce_classes_evenly() {
        // 3 clients, 2 classes, 1 class each: one class lands on 2 clients
        // and its samples split evenly between them
        let samples: Vec<(Vec<f64>, usize)> = (0..24).map(|i| (vec![0.2], i % 2)).collect();
        let ds = Dataset::new(samples, 2).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let parts = partition_label_skew(&ds, 3, 1, &mut rng).unwrap();
        assert_eq!(parts.iter().map(|p| p.len()).sum::<usize>(), 24);
        let mut sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![6, 6, 12]); // 12 per class; shared class splits 6/6
    }

    #[test]
    fn quadratic_federation_hits_requested_heterogeneity() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        for &h in &[0.0, 0.5, 2.0, 10.0] {
            let p = make_quadratic_federation(8, 4, 0.5, 2.0, h, &mut rng).unwrap();
            let got = p.heterogeneity();
            if h == 0.0 {
                assert_eq!(got, 0.0);
                assert!(p.optima.iter().all(|c| c.iter().all(|x| *x == 0.0)));
            } else {
                assert!((got - h).abs() / h < 0.01, "requested {h}, got {got}");
            }
        }
    }

    #[test]
    fn quadratic_symmetric_hand_case() {
        let p = QuadraticProblem {
            curvatures: vec![1.0, 1.0],
            optima: vec![vec![-1.0], vec![1.0]],
            dim: 1,
        };
        assert_eq!(p.global_optimum(), vec![0.0]);
        assert!((p.heterogeneity() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_optimum_agrees_with_gradient_descent() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let p = make_quadratic_federation(6, 3, 0.4, 1.5, 1.0, &mut rng).unwrap();
        let star = p.global_optimum();
        let mut theta = vec![2.0; 3];
        for _ in 0..20_000 {
            let g = p.global_grad(&theta);
            for (t, gi) in theta.iter_mut().zip(&g) {
                *t -= 0.5 * gi;
            }
        }
        let dist: f64 = theta
            .iter()
            .zip(&star)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(dist < 1e-8, "descent ended {dist} away from the closed form");
    }

    #[test]
    fn quadratic_rejects_infeasible_requests() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        assert!(make_quadratic_federation(4, 2, 0.0, 1.0, 1.0, &mut rng).is_err());
        assert!(make_quadratic_federation(4, 2, 2.0, 1.0, 1.0, &mut rng).is_err());
        // single client cannot carry nonzero heterogeneity
        assert!(make_quadratic_federation(1, 2, 0.5, 1.0, 3.0, &mut rng).is_err());
    }

    #[test]
    fn synthetic_digits_deterministic_and_distinct() {
        let mut a = ChaCha12Rng::seed_from_u64(11);
        let mut b = ChaCha12Rng::seed_from_u64(11);
        let (ia, la) = synthetic_digits(10, &mut a);
        let (ib, lb) = synthetic_digits(10, &mut b);
        assert_eq!(ia, ib);
        assert_eq!(la, lb);
        assert_eq!(la.iter().filter(|&&l| l == 0).count(), 5);
        // rings put less mass in the center column band than strokes
        let center_mass = |img: &Vec<u8>| -> f64 {
            (0..28)
                .map(|r| img[r * 28 + 13] as f64 + img[r * 28 + 14] as f64)
                .sum()
        };
        let zero_mass: f64 = ia.iter().zip(&la).filter(|(_, &l)| l == 0).map(|(i, _)| center_mass(i)).sum();
        let one_mass: f64 = ia.iter().zip(&la).filter(|(_, &l)| l == 1).map(|(i, _)| center_mass(i)).sum();
        assert!(one_mass > zero_mass);
    }
}
