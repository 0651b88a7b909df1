//! Datasets: 2-D Gaussian mixtures on a circle, rings of Gaussians, and IDX
//! image files. Every dataset is scaled into `[-1, 1]`.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{normals, seeded};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Isotropic affine map `x -> (x - mid) / half`, clamped to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub mid: Vec<f64>,
    /// Largest per-dimension half-range; 0 collapses everything onto 0.
    pub half: f64,
}

impl Affine {
    /// The map taking the bounding box of `points` into `[-1, 1]` without
    /// changing aspect ratio.
    pub fn fit(points: &Tensor) -> Self {
        let d = points.cols();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for i in 0..points.rows() {
            for (j, &v) in points.row(i).iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        let mid = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let half = lo
            .iter()
            .zip(&hi)
            .map(|(a, b)| 0.5 * (b - a))
            .fold(0.0, f64::max);
        Self { mid, half }
    }

    pub fn apply_point(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mid)
            .map(|(v, m)| {
                if self.half > 0.0 {
                    ((v - m) / self.half).clamp(-1.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn apply(&self, points: &Tensor) -> Tensor {
        let rows: Vec<Vec<f64>> = (0..points.rows()).map(|i| self.apply_point(points.row(i))).collect();
        let cols = points.cols();
        Tensor::matrix(rows.len(), cols, rows.concat()).expect("shape preserved")
    }

    /// Length scale after mapping.
    pub fn scale_length(&self, l: f64) -> f64 {
        if self.half > 0.0 {
            l / self.half
        } else {
            0.0
        }
    }
}

/// Immutable `N × D` sample with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub x: Tensor,
    pub labels: Option<Vec<usize>>,
    pub classes: usize,
    /// Mode centers in the scaled space, for synthetic mixtures.
    pub centers: Option<Vec<Vec<f64>>>,
    /// Per-mode noise standard deviation in the scaled space.
    pub noise: Option<f64>,
    pub affine: Option<Affine>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// `n` rows drawn uniformly with replacement.
    pub fn sample_batch(&self, n: usize, rng: &mut impl Rng) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::InvalidArgument(format!("dataset {} is empty", self.name)));
        }
        let d = self.dim();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            let i = rng.random_range(0..self.len());
            out.extend_from_slice(self.x.row(i));
        }
        Tensor::matrix(n, d, out)
    }

    /// Writes `x0,..,x{D-1},label` rows; the label column is empty when
    /// labels are unknown.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        let header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        writeln!(out, "{},label", header.join(","))?;
        for i in 0..self.len() {
            let row: Vec<String> = self.x.row(i).iter().map(|v| format!("{v}")).collect();
            let label = self.labels.as_ref().map(|l| l[i].to_string()).unwrap_or_default();
            writeln!(out, "{},{label}", row.join(","))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Points `center(label) + noise * eps` in the unscaled space.
fn mixture_draws(centers: &[Vec<f64>], labels: &[usize], noise: f64, rng: &mut impl Rng) -> Result<Tensor> {
    let d = centers[0].len();
    let eps = normals(rng, labels.len() * d);
    let mut data = Vec::with_capacity(labels.len() * d);
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..d {
            data.push(centers[y][j] + noise * eps[i * d + j]);
        }
    }
    Tensor::matrix(labels.len(), d, data)
}

fn circle(count: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..count)
        .map(|k| {
            let t = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
            vec![radius * t.cos(), radius * t.sin()]
        })
        .collect()
}

fn synthetic(name: String, centers: Vec<Vec<f64>>, labels: Vec<usize>, noise: f64, seed: u64) -> Result<Dataset> {
    if !(noise >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise must be >= 0, got {noise}")));
    }
    let raw = mixture_draws(&centers, &labels, noise, &mut seeded(seed))?;
    let affine = Affine::fit(&raw);
    Ok(Dataset {
        name,
        x: affine.apply(&raw),
        classes: centers.len(),
        labels: Some(labels),
        centers: Some(centers.iter().map(|c| affine.apply_point(c)).collect()),
        noise: Some(affine.scale_length(noise)),
        affine: Some(affine),
    })
}

/// `components` isotropic Gaussians (std `noise`) centered evenly on a circle
/// of radius `separation`, `n_per` points each, labeled by component.
pub fn gen_gmm2d(components: usize, n_per: usize, separation: f64, noise: f64, seed: u64) -> Result<Dataset> {
    if components == 0 {
        return Err(Error::InvalidArgument("gen_gmm2d: need at least one component".into()));
    }
    let labels = (0..components).flat_map(|c| std::iter::repeat_n(c, n_per)).collect();
    synthetic(
        format!("gmm2d(c={components},n_per={n_per})"),
        circle(components, separation),
        labels,
        noise,
        seed,
    )
}

/// `n` points spread over `modes` Gaussians on the unit circle; point `i` has
/// label `i % modes`.
pub fn gen_ring(modes: usize, n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if modes == 0 {
        return Err(Error::InvalidArgument("gen_ring: need at least one mode".into()));
    }
    let labels = (0..n).map(|i| i % modes).collect();
    synthetic(format!("ring(modes={modes},n={n})"), circle(modes, 1.0), labels, noise, seed)
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: "truncated header".into(),
        })
}

fn check_magic(bytes: &[u8], path: &Path, expected: u32) -> Result<()> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad magic {magic:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

fn check_len(bytes: &[u8], needed: usize, path: &Path) -> Result<()> {
    if bytes.len() < needed {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            message: format!("truncated: {needed} bytes expected, file has {}", bytes.len()),
        });
    }
    Ok(())
}

/// Loads an IDX image/label pair. Pixels map to `x / 127.5 - 1`; `downsample`
/// average-pools non-overlapping `f × f` blocks; `limit` keeps the first
/// samples in file order.
pub fn load_idx(images: &Path, labels: &Path, limit: Option<usize>, downsample: Option<usize>) -> Result<Dataset> {
    let img = fs::read(images)?;
    let lab = fs::read(labels)?;
    check_magic(&img, images, IDX_IMAGES_MAGIC)?;
    check_magic(&lab, labels, IDX_LABELS_MAGIC)?;
    let count = read_u32(&img, 4, images)? as usize;
    let rows = read_u32(&img, 8, images)? as usize;
    let cols = read_u32(&img, 12, images)? as usize;
    let label_count = read_u32(&lab, 4, labels)? as usize;
    if label_count != count {
        return Err(Error::Format {
            path: labels.to_path_buf(),
            offset: 4,
            message: format!("{label_count} labels for {count} images"),
        });
    }
    let pixels = rows * cols;
    check_len(&img, 16 + count * pixels, images)?;
    check_len(&lab, 8 + count, labels)?;

    let f = downsample.unwrap_or(1);
    if f == 0 || rows % f != 0 || cols % f != 0 {
        return Err(Error::InvalidArgument(format!(
            "downsample factor {f} does not divide {rows}x{cols}"
        )));
    }
    let (out_r, out_c) = (rows / f, cols / f);
    let n = limit.map_or(count, |l| l.min(count));
    let mut data = Vec::with_capacity(n * out_r * out_c);
    for s in 0..n {
        let base = 16 + s * pixels;
        for r in 0..out_r {
            for c in 0..out_c {
                let mut acc = 0.0;
                for dr in 0..f {
                    for dc in 0..f {
                        acc += img[base + (r * f + dr) * cols + c * f + dc] as f64 / 127.5 - 1.0;
                    }
                }
                data.push(acc / (f * f) as f64);
            }
        }
    }
    let label_vec: Vec<usize> = lab[8..8 + n].iter().map(|&b| b as usize).collect();
    let classes = label_vec.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        name: format!("idx({})", images.display()),
        x: Tensor::matrix(n, out_r * out_c, data)?,
        labels: Some(label_vec),
        classes,
        centers: None,
        noise: None,
        affine: None,
    })
}

/// Textual dataset description, e.g. `gmm2d:c=5,n_per=2000,separation=6,noise=1,seed=0`,
/// `ring:modes=8,n=4000,noise=0.05,seed=0` or
/// `idx:images=PATH,labels=PATH,limit=1000,downsample=2`.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    Gmm2d {
        c: usize,
        n_per: usize,
        separation: f64,
        noise: f64,
        seed: u64,
    },
    Ring {
        modes: usize,
        n: usize,
        noise: f64,
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        limit: Option<usize>,
        downsample: Option<usize>,
    },
}

fn spec_err(msg: String) -> Error {
    Error::InvalidArgument(format!("data spec: {msg}"))
}

struct Fields<'a>(Vec<(&'a str, &'a str)>);

impl<'a> Fields<'a> {
    fn take(&mut self, key: &str) -> Option<&'a str> {
        let pos = self.0.iter().position(|(k, _)| *k == key)?;
        Some(self.0.remove(pos).1)
    }

    fn num<T: std::str::FromStr>(&mut self, key: &str, default: Option<T>) -> Result<T> {
        match self.take(key) {
            Some(v) => v
                .parse()
                .map_err(|_| spec_err(format!("bad value {v:?} for {key}"))),
            None => default.ok_or_else(|| spec_err(format!("missing {key}"))),
        }
    }

    fn finish(self) -> Result<()> {
        match self.0.first() {
            Some((k, _)) => Err(spec_err(format!("unknown key {k:?}"))),
            None => Ok(()),
        }
    }
}

impl DataSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let (kind, rest) = text.trim().split_once(':').unwrap_or((text.trim(), ""));
        let mut pairs = Vec::new();
        for part in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| spec_err(format!("expected key=value, got {part:?}")))?;
            let k = k.trim();
            if pairs.iter().any(|(p, _)| *p == k) {
                return Err(spec_err(format!("duplicate key {k:?}")));
            }
            pairs.push((k, v.trim()));
        }
        let mut f = Fields(pairs);
        let spec = match kind {
            "gmm2d" => DataSpec::Gmm2d {
                c: f.num("c", Some(5))?,
                n_per: f.num("n_per", Some(2000))?,
                separation: f.num("separation", Some(6.0))?,
                noise: f.num("noise", Some(1.0))?,
                seed: f.num("seed", Some(0))?,
            },
            "ring" => DataSpec::Ring {
                modes: f.num("modes", Some(8))?,
                n: f.num("n", Some(4000))?,
                noise: f.num("noise", Some(0.05))?,
                seed: f.num("seed", Some(0))?,
            },
            "idx" => DataSpec::Idx {
                images: f.take("images").ok_or_else(|| spec_err("missing images".into()))?.into(),
                labels: f.take("labels").ok_or_else(|| spec_err("missing labels".into()))?.into(),
                limit: f.take("limit").map(|v| v.parse()).transpose().map_err(|_| spec_err("bad limit".into()))?,
                downsample: f
                    .take("downsample")
                    .map(|v| v.parse())
                    .transpose()
                    .map_err(|_| spec_err("bad downsample".into()))?,
            },
            other => return Err(spec_err(format!("unknown dataset kind {other:?}"))),
        };
        f.finish()?;
        Ok(spec)
    }

    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSpec::Gmm2d {
                c,
                n_per,
                separation,
                noise,
                seed,
            } => gen_gmm2d(*c, *n_per, *separation, *noise, *seed),
            DataSpec::Ring { modes, n, noise, seed } => gen_ring(*modes, *n, *noise, *seed),
            DataSpec::Idx {
                images,
                labels,
                limit,
                downsample,
            } => load_idx(images, labels, *limit, *downsample),
        }
    }

    /// Fresh draws from the same synthetic distribution, mapped with the
    /// training set's scaling. `None` for file-backed data.
    pub fn held_out(&self, reference: &Dataset, n: usize, seed: u64) -> Result<Option<Tensor>> {
        let (centers, modes, noise) = match self {
            DataSpec::Gmm2d {
                c, separation, noise, ..
            } => (circle(*c, *separation), *c, *noise),
            DataSpec::Ring { modes, noise, .. } => (circle(*modes, 1.0), *modes, *noise),
            DataSpec::Idx { .. } => return Ok(None),
        };
        let affine = reference
            .affine
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("reference dataset has no scaling".into()))?;
        let labels: Vec<usize> = (0..n).map(|i| i % modes).collect();
        let raw = mixture_draws(&centers, &labels, noise, &mut seeded(seed))?;
        Ok(Some(affine.apply(&raw)))
    }
}

impl fmt::Display for DataSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSpec::Gmm2d {
                c,
                n_per,
                separation,
                noise,
                seed,
            } => write!(f, "gmm2d:c={c},n_per={n_per},separation={separation},noise={noise},seed={seed}"),
            DataSpec::Ring { modes, n, noise, seed } => {
                write!(f, "ring:modes={modes},n={n},noise={noise},seed={seed}")
            }
            DataSpec::Idx {
                images,
                labels,
                limit,
                downsample,
            } => {
                write!(f, "idx:images={},labels={}", images.display(), labels.display())?;
                if let Some(l) = limit {
                    write!(f, ",limit={l}")?;
                }
                if let Some(d) = downsample {
                    write!(f, ",downsample={d}")?;
                }
                Ok(())
            }
        }
    }
}
