//! Samples, synthetic generation, image files, resizing, splitting, and the
//! on-disk dataset layout (`images/<id>.pgm`, `masks/<id>.pgm`,
//! `manifest.csv`).

pub mod image;
pub mod synth;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use self::image::{mask_image, mask_tensor, read_gray, write_pgm, GrayImage};
use crate::error::{Error, Result};
use crate::nn::resample_planes;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use synth::{synth_generate, synth_sample, ShapeKind, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Synthetic,
    File,
}

/// One image/mask pair, both `1×H×W`; the image lies in `[0, 1]` and the
/// mask in `{0, 1}`.
#[derive(Clone, Debug)]
pub struct SegSample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub source: Source,
}

impl SegSample {
    pub fn new(id: String, image: Tensor<f32>, mask: Tensor<f32>, source: Source) -> Result<Self> {
        if image.rank() != 3 || image.shape()[0] != 1 || image.shape() != mask.shape() {
            return Err(Error::ShapeMismatch {
                op: "sample (image vs mask)",
                lhs: image.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        if let Some(v) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidInput(format!(
                "sample {id}: mask value {v} is not binary"
            )));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput(format!("sample {id}: image values outside [0, 1]")));
        }
        Ok(Self {
            id,
            image,
            mask,
            source,
        })
    }

    pub(crate) fn from_images(id: String, image: &GrayImage, mask: &GrayImage, source: Source) -> Result<Self> {
        let mask = mask_tensor(mask, Path::new(&id))?;
        Self::new(id, image.to_unit_tensor()?, mask, source)
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Bilinear resize of one `h×w` plane in `[0, 1]`, clamped to that range.
pub fn resize_plane<T: Scalar>(values: &[T], from: (usize, usize), to: (usize, usize)) -> Result<Vec<T>> {
    if values.len() != from.0 * from.1 || to.0 == 0 || to.1 == 0 {
        return Err(Error::InvalidInput(format!(
            "cannot resize {} values as {}×{} to {}×{}",
            values.len(),
            from.0,
            from.1,
            to.0,
            to.1
        )));
    }
    if from == to {
        return Ok(values.to_vec());
    }
    let (lo, hi) = (T::zero(), T::one());
    Ok(resample_planes(values, from, to)
        .into_iter()
        .map(|v| v.max(lo).min(hi))
        .collect())
}

/// Resizes the image bilinearly and the mask by nearest neighbor.
pub fn resize_pair(s: &SegSample, (h, w): (usize, usize)) -> Result<SegSample> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidInput(format!("resize target {h}×{w} is empty")));
    }
    let (ih, iw) = (s.height(), s.width());
    if (ih, iw) == (h, w) {
        return Ok(s.clone());
    }
    let image = resize_plane(s.image.data(), (ih, iw), (h, w))?;
    // nearest source pixel center: floor((o + 0.5)·in/out)
    let near = |o: usize, n_in: usize, n_out: usize| ((2 * o + 1) * n_in) / (2 * n_out);
    let md = s.mask.data();
    let mask: Vec<f32> = (0..h * w)
        .map(|i| {
            let (y, x) = (near(i / w, ih, h).min(ih - 1), near(i % w, iw, w).min(iw - 1));
            md[y * iw + x]
        })
        .collect();
    SegSample::new(
        s.id.clone(),
        Tensor::from_vec(image, &[1, h, w])?,
        Tensor::from_vec(mask, &[1, h, w])?,
        s.source,
    )
}

/// Fails with the required divisibility when `(h, w)` cannot pass through
/// `depth` pooling stages.
pub fn check_divisible(h: usize, w: usize, depth: usize) -> Result<()> {
    let k = 1usize << depth;
    if !h.is_multiple_of(k) || !w.is_multiple_of(k) {
        return Err(Error::InvalidInput(format!(
            "image extents {h}×{w} must be divisible by 2^{depth} = {k}"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::InvalidInput(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Split {
    pub train: Vec<SegSample>,
    pub val: Vec<SegSample>,
    pub test: Vec<SegSample>,
}

impl Split {
    pub fn get(&self, name: SplitName) -> &[SegSample] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    /// `(id, split)` pairs in train, val, test order.
    pub fn assignments(&self) -> Vec<(String, SplitName)> {
        [SplitName::Train, SplitName::Val, SplitName::Test]
            .into_iter()
            .flat_map(|n| self.get(n).iter().map(move |s| (s.id.clone(), n)))
            .collect()
    }
}

/// Shuffles with `seed` and cuts at `round(f_train·n)` and
/// `round((f_train + f_val)·n)`.
pub fn split(samples: Vec<SegSample>, fractions: [f64; 3], seed: u64) -> Result<Split> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let cut1 = ((fractions[0] * n as f64).round() as usize).min(n);
    let cut2 = (((fractions[0] + fractions[1]) * n as f64).round() as usize).clamp(cut1, n);
    let mut slots: Vec<Option<SegSample>> = samples.into_iter().map(Some).collect();
    let mut take = |r: std::ops::Range<usize>| -> Vec<SegSample> {
        order[r]
            .iter()
            .map(|&i| slots[i].take().expect("each index once"))
            .collect()
    };
    Ok(Split {
        train: take(0..cut1),
        val: take(cut1..cut2),
        test: take(cut2..n),
    })
}

/// Writes images, masks and `manifest.csv` under `root`.
pub fn save_dataset(root: &Path, split: &Split) -> Result<()> {
    for sub in ["images", "masks"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut manifest = String::from("id,split\n");
    for name in [SplitName::Train, SplitName::Val, SplitName::Test] {
        for s in split.get(name) {
            if s.id.contains([',', '/', '\\', '\n']) {
                return Err(Error::InvalidInput(format!("sample id '{}' is not file-safe", s.id)));
            }
            let (h, w) = (s.height(), s.width());
            write_pgm(
                &root.join("images").join(format!("{}.pgm", s.id)),
                &GrayImage::from_unit(s.image.data(), h, w)?,
            )?;
            write_pgm(
                &root.join("masks").join(format!("{}.pgm", s.id)),
                &mask_image(s.mask.data(), h, w)?,
            )?;
            manifest.push_str(&format!("{},{name}\n", s.id));
        }
    }
    let path = root.join("manifest.csv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Reads a dataset written by [`save_dataset`] (or laid out by hand the same
/// way). Images and masks may be PGM or PNG; the file stem is the id.
pub fn load_dataset(root: &Path) -> Result<Split> {
    let path = root.join("manifest.csv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Split::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line == "id,split") {
            continue;
        }
        let (id, name) = line
            .split_once(',')
            .ok_or_else(|| Error::format(&path, format!("line {}: expected 'id,split'", lineno + 1)))?;
        let name: SplitName = name
            .trim()
            .parse()
            .map_err(|e: Error| Error::format(&path, e.to_string()))?;
        let image = find_file(&root.join("images"), id)?;
        let mask = find_file(&root.join("masks"), id)?;
        let image_t = read_gray(&image)?;
        let mask_img = read_gray(&mask)?;
        let sample = SegSample::new(
            id.to_string(),
            image_t.to_unit_tensor()?,
            mask_tensor(&mask_img, &mask)?,
            Source::File,
        )
        .map_err(|e| Error::format(&image, e.to_string()))?;
        match name {
            SplitName::Train => out.train.push(sample),
            SplitName::Val => out.val.push(sample),
            SplitName::Test => out.test.push(sample),
        }
    }
    Ok(out)
}

fn find_file(dir: &Path, id: &str) -> Result<std::path::PathBuf> {
    for ext in ["pgm", "png"] {
        let p = dir.join(format!("{id}.{ext}"));
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(format!("{id}.pgm")),
        std::io::Error::new(std::io::ErrorKind::NotFound, "no .pgm or .png file for this id"),
    ))
}

/// Stacks samples into `N×1×H×W` image and mask tensors.
pub fn stack<T: Scalar>(samples: &[&SegSample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot batch zero samples".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut xs = Vec::with_capacity(samples.len() * h * w);
    let mut ys = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::ShapeMismatch {
                op: "batch",
                lhs: first.image.shape().to_vec(),
                rhs: s.image.shape().to_vec(),
            });
        }
        xs.extend(s.image.data().iter().map(|&v| T::from_f32(v).expect("f32 converts")));
        ys.extend(s.mask.data().iter().map(|&v| T::from_f32(v).expect("f32 converts")));
    }
    let shape = [samples.len(), 1, h, w];
    Ok((Tensor::from_vec(xs, &shape)?, Tensor::from_vec(ys, &shape)?))
}
