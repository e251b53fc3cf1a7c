//! Procedural datasets with ground-truth attributes.
//!
//! Shapes images are 12x12 grayscale with two binary attributes: the shape
//! (square or disc) and a horizontal stripe band (absent or present). The
//! stripe always occupies the same band of rows, so its mask doubles as the
//! region an attribute edit is allowed to touch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const SIDE: usize = 12;
pub const PIXELS: usize = SIDE * SIDE;
/// Rows covered by the stripe band.
pub const STRIPE_ROWS: std::ops::Range<usize> = 5..7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Shape,
    Stripe,
}

impl Attribute {
    pub fn name(self) -> &'static str {
        match self {
            Attribute::Shape => "shape",
            Attribute::Stripe => "stripe",
        }
    }

    pub fn other(self) -> Attribute {
        match self {
            Attribute::Shape => Attribute::Stripe,
            Attribute::Stripe => Attribute::Shape,
        }
    }

    /// Human-readable class name (`shape`: 0 = square, 1 = disc; `stripe`: 0 = absent, 1 = present).
    pub fn class_name(self, class: usize) -> &'static str {
        match (self, class) {
            (Attribute::Shape, 0) => "square",
            (Attribute::Shape, _) => "disc",
            (Attribute::Stripe, 0) => "absent",
            (Attribute::Stripe, _) => "present",
        }
    }
}

impl std::str::FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shape" => Ok(Attribute::Shape),
            "stripe" => Ok(Attribute::Stripe),
            other => Err(Error::InvalidArgument(format!("unknown attribute {other:?}"))),
        }
    }
}

/// Per-image generator parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nuisance {
    pub center: (f64, f64),
    pub size: f64,
    pub background: f64,
    pub foreground: f64,
    pub stripe_level: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapesDataset {
    /// `[n, 144]`, values in `[0, 1]`.
    pub images: Tensor,
    pub shape: Vec<usize>,
    pub stripe: Vec<usize>,
    pub stripe_mask: Vec<Vec<bool>>,
    pub shape_mask: Vec<Vec<bool>>,
    pub nuisance: Vec<Nuisance>,
    pub seed: u64,
}

impl ShapesDataset {
    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn labels(&self, attr: Attribute) -> &[usize] {
        match attr {
            Attribute::Shape => &self.shape,
            Attribute::Stripe => &self.stripe,
        }
    }

    pub fn mask(&self, attr: Attribute, i: usize) -> &[bool] {
        match attr {
            Attribute::Shape => &self.shape_mask[i],
            Attribute::Stripe => &self.stripe_mask[i],
        }
    }

    /// Attribute combination index `shape + 2 * stripe`.
    pub fn combo(&self, i: usize) -> usize {
        self.shape[i] + 2 * self.stripe[i]
    }

    pub fn subset(&self, idx: &[usize]) -> ShapesDataset {
        ShapesDataset {
            images: self.images.select_rows(idx),
            shape: idx.iter().map(|&i| self.shape[i]).collect(),
            stripe: idx.iter().map(|&i| self.stripe[i]).collect(),
            stripe_mask: idx.iter().map(|&i| self.stripe_mask[i].clone()).collect(),
            shape_mask: idx.iter().map(|&i| self.shape_mask[i].clone()).collect(),
            nuisance: idx.iter().map(|&i| self.nuisance[i]).collect(),
            seed: self.seed,
        }
    }
}

fn inside_shape(shape: usize, n: &Nuisance, x: usize, y: usize) -> bool {
    let dx = x as f64 + 0.5 - n.center.0;
    let dy = y as f64 + 0.5 - n.center.1;
    if shape == 0 {
        dx.abs().max(dy.abs()) <= 0.85 * n.size
    } else {
        dx * dx + dy * dy <= n.size * n.size
    }
}

/// Renders one image and its (shape, stripe) masks.
pub fn render(shape: usize, stripe: usize, n: &Nuisance) -> (Vec<f64>, Vec<bool>, Vec<bool>) {
    let mut img = vec![n.background; PIXELS];
    let mut shape_mask = vec![false; PIXELS];
    let mut stripe_mask = vec![false; PIXELS];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let p = y * SIDE + x;
            if STRIPE_ROWS.contains(&y) {
                stripe_mask[p] = true;
                if stripe == 1 {
                    img[p] = n.stripe_level;
                }
            }
            if inside_shape(shape, n, x, y) {
                shape_mask[p] = true;
                img[p] = n.foreground;
            }
        }
    }
    (img, shape_mask, stripe_mask)
}

/// Balanced shapes dataset; image `i` has attribute combination `i % 4`.
pub fn gen_shapes(n: usize, seed: u64) -> Result<ShapesDataset> {
    if n == 0 || n % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "shapes dataset size must be a positive multiple of 4, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n * PIXELS);
    let mut ds = ShapesDataset {
        images: Tensor::zeros(&[0, PIXELS]),
        shape: Vec::with_capacity(n),
        stripe: Vec::with_capacity(n),
        stripe_mask: Vec::with_capacity(n),
        shape_mask: Vec::with_capacity(n),
        nuisance: Vec::with_capacity(n),
        seed,
    };
    for i in 0..n {
        let combo = i % 4;
        let (shape, stripe) = (combo & 1, combo >> 1);
        let nz = Nuisance {
            center: (6.0 + rng.random_range(-1.0..=1.0), 6.0 + rng.random_range(-1.0..=1.0)),
            size: rng.random_range(3.0..=5.0),
            background: rng.random_range(0.0..=0.1),
            foreground: rng.random_range(0.7..=1.0),
            stripe_level: rng.random_range(0.35..=0.5),
        };
        let (img, sm, stm) = render(shape, stripe, &nz);
        values.extend_from_slice(&img);
        ds.shape.push(shape);
        ds.stripe.push(stripe);
        ds.shape_mask.push(sm);
        ds.stripe_mask.push(stm);
        ds.nuisance.push(nz);
    }
    ds.images = Tensor::new(vec![n, PIXELS], values)?;
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmDataset {
    /// `[n, dim]`.
    pub points: Tensor,
    pub labels: Vec<usize>,
    /// `[k, dim]`.
    pub means: Tensor,
    pub k: usize,
    pub seed: u64,
}

impl GmmDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> GmmDataset {
        GmmDataset {
            points: self.points.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            means: self.means.clone(),
            k: self.k,
            seed: self.seed,
        }
    }
}

/// Unit-norm vertices of a regular simplex centered at the origin,
/// expressed in the first `k - 1` coordinates (Helmert basis).
pub fn simplex_vertices(k: usize, dim: usize) -> Vec<Vec<f64>> {
    let scale = (k as f64 / (k as f64 - 1.0)).sqrt();
    (0..k)
        .map(|a| {
            let mut v = vec![0.0; dim];
            for (j, slot) in v.iter_mut().enumerate().take(k - 1) {
                // basis vector j: ones on the first j+1 entries, -(j+1) on entry j+1
                let jj = (j + 1) as f64;
                let norm = (jj * (jj + 1.0)).sqrt();
                let c = if a <= j {
                    1.0
                } else if a == j + 1 {
                    -jj
                } else {
                    0.0
                };
                *slot = scale * c / norm;
            }
            v
        })
        .collect()
}

/// Balanced isotropic Gaussian mixture with means at `separation` times
/// the simplex vertices.
pub fn gen_gmm(n: usize, k: usize, dim: usize, separation: f64, seed: u64) -> Result<GmmDataset> {
    if k < 2 || dim < k - 1 || dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "gmm needs k >= 2 and dim >= k - 1, got k={k}, dim={dim}"
        )));
    }
    if n == 0 || n % k != 0 {
        return Err(Error::InvalidArgument(format!(
            "gmm size {n} must be a positive multiple of k={k}"
        )));
    }
    let verts = simplex_vertices(k, dim);
    let means: Vec<f64> = verts.iter().flatten().map(|v| v * separation).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let a = i % k;
        for j in 0..dim {
            let e: f64 = rng.sample(StandardNormal);
            pts.push(means[a * dim + j] + e);
        }
        labels.push(a);
    }
    Ok(GmmDataset {
        points: Tensor::new(vec![n, dim], pts)?,
        labels,
        means: Tensor::new(vec![k, dim], means)?,
        k,
        seed,
    })
}

/// Stratified, seeded train/held-out partition.
///
/// Returns sorted index lists; within each stratum `round(train_frac * count)`
/// items go to the training side.
pub fn split_indices(strata: &[usize], train_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must be in (0, 1), got {train_frac}"
        )));
    }
    let n_strata = strata.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut held = Vec::new();
    for s in 0..n_strata {
        let mut members: Vec<usize> = (0..strata.len()).filter(|&i| strata[i] == s).collect();
        // Fisher-Yates with the seeded generator
        for i in (1..members.len()).rev() {
            let j = rng.random_range(0..=i);
            members.swap(i, j);
        }
        let n_train = (train_frac * members.len() as f64).round() as usize;
        train.extend_from_slice(&members[..n_train]);
        held.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    Ok((train, held))
}

pub fn split_shapes(ds: &ShapesDataset, train_frac: f64, seed: u64) -> Result<(ShapesDataset, ShapesDataset)> {
    let strata: Vec<usize> = (0..ds.len()).map(|i| ds.combo(i)).collect();
    let (tr, ho) = split_indices(&strata, train_frac, seed)?;
    Ok((ds.subset(&tr), ds.subset(&ho)))
}

pub fn split_gmm(ds: &GmmDataset, train_frac: f64, seed: u64) -> Result<(GmmDataset, GmmDataset)> {
    let (tr, ho) = split_indices(&ds.labels, train_frac, seed)?;
    Ok((ds.subset(&tr), ds.subset(&ho)))
}

/// Run-length encoding `start:len;start:len` of the set pixels.
pub fn mask_rle(mask: &[bool]) -> String {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < mask.len() {
        if mask[i] {
            let start = i;
            while i < mask.len() && mask[i] {
                i += 1;
            }
            runs.push(format!("{start}:{}", i - start));
        } else {
            i += 1;
        }
    }
    runs.join(";")
}

pub fn mask_from_rle(rle: &str, len: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; len];
    for run in rle.split(';').filter(|r| !r.is_empty()) {
        let (s, l) = run
            .split_once(':')
            .ok_or_else(|| Error::Format(format!("bad run {run:?}")))?;
        let s: usize = s.parse().map_err(|_| Error::Format(format!("bad run {run:?}")))?;
        let l: usize = l.parse().map_err(|_| Error::Format(format!("bad run {run:?}")))?;
        if s + l > len {
            return Err(Error::Format(format!("run {run:?} exceeds {len}")));
        }
        mask[s..s + l].iter_mut().for_each(|m| *m = true);
    }
    Ok(mask)
}
