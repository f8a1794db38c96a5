use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::TaskSplit;
use crate::lora::write_atomic;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    MetaTrain,
    MetaTest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
}

impl Shape {
    pub const ALL: [Shape; 6] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross, Shape::Ring, Shape::Diamond];

    fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
            Shape::Diamond => "diamond",
        }
    }

    /// Whether local offset `(u, v)` lies inside a shape of radius `r`.
    fn contains(self, u: f32, v: f32, r: f32) -> bool {
        match self {
            Shape::Circle => u * u + v * v <= r * r,
            Shape::Square => u.abs() <= 0.8 * r && v.abs() <= 0.8 * r,
            Shape::Triangle => v >= -0.8 * r && v <= 0.8 * r && u.abs() <= 0.55 * (v + 0.8 * r),
            Shape::Cross => (u.abs() <= 0.3 * r && v.abs() <= r) || (v.abs() <= 0.3 * r && u.abs() <= r),
            Shape::Ring => {
                let d = (u * u + v * v).sqrt();
                d <= r && d >= 0.55 * r
            }
            Shape::Diamond => u.abs() + v.abs() <= r,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Solid,
    /// Only a band along the border.
    Outline,
    /// Diagonal stripes inside the shape.
    Hatched,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::Solid, Style::Outline, Style::Hatched];

    fn name(self) -> &'static str {
        match self {
            Style::Solid => "solid",
            Style::Outline => "outline",
            Style::Hatched => "hatched",
        }
    }

    fn paints(self, shape: Shape, u: f32, v: f32, r: f32, x: usize, y: usize) -> bool {
        if !shape.contains(u, v, r) {
            return false;
        }
        match self {
            Style::Solid => true,
            Style::Outline => !shape.contains(u / 0.6, v / 0.6, r),
            Style::Hatched => (x + y) % 4 < 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    /// Oriented sinusoidal stripes.
    Stripes,
    /// Smooth blobs from a few random bumps.
    Blobs,
}

/// A factor of variation. Class axes define the label; the others are
/// drawn per image as nuisance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Shape,
    Style,
    Color,
}

/// `n` evenly spaced saturated hues named `hue00`, `hue01`, ...
pub fn hue_palette(n: usize) -> Vec<(String, [f32; 3])> {
    (0..n)
        .map(|i| {
            let h = i as f32 / n as f32 * 6.0;
            let x = 1.0 - ((h % 2.0) - 1.0).abs();
            let (r, g, b) = match h as usize {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            (format!("hue{:02}", i), [0.1 + 0.8 * r, 0.1 + 0.8 * g, 0.1 + 0.8 * b])
        })
        .collect()
}

/// Seeded procedural generator of colored shapes on textured backgrounds.
/// A class is one combination of the values along `class_axes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub image_size: usize,
    pub shapes: Vec<Shape>,
    pub styles: Vec<Style>,
    /// `(name, rgb)` in `[0, 1]`.
    pub colors: Vec<(String, [f32; 3])>,
    pub class_axes: Vec<Axis>,
    pub texture: Texture,
    pub texture_amplitude: f32,
    /// Half-width of the per-channel uniform jitter of the background color.
    pub background_jitter: f32,
    pub pixel_noise: f32,
    /// Shape radius range as a fraction of the image size.
    pub shape_radius: [f32; 2],
    pub images_per_class: usize,
    /// Number of meta-test classes; the rest are meta-train.
    pub test_classes: usize,
}

/// One class: fixed values on the class axes, `None` where drawn per image.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    pub shape: Option<usize>,
    pub style: Option<usize>,
    pub color: Option<usize>,
    pub split: Split,
}

impl GeneratorSpec {
    /// 18 hue classes at 24×24; shape and style vary per image. Every third
    /// hue is held out for meta-test.
    pub fn desk() -> Self {
        GeneratorSpec {
            image_size: 24,
            shapes: Shape::ALL.to_vec(),
            styles: vec![Style::Solid],
            colors: hue_palette(18),
            class_axes: vec![Axis::Color],
            texture: Texture::Stripes,
            texture_amplitude: 0.25,
            background_jitter: 0.12,
            pixel_noise: 0.05,
            shape_radius: [0.28, 0.4],
            images_per_class: 40,
            test_classes: 6,
        }
    }

    /// Shape × style classes in random hues, the backbone's pretraining domain.
    pub fn shapes_domain() -> Self {
        GeneratorSpec { styles: Style::ALL.to_vec(), class_axes: vec![Axis::Shape, Axis::Style], ..Self::desk() }
    }

    /// Shape × color classes on blob backgrounds.
    pub fn cross_domain() -> Self {
        GeneratorSpec {
            colors: hue_palette(3),
            class_axes: vec![Axis::Shape, Axis::Color],
            texture: Texture::Blobs,
            ..Self::desk()
        }
    }

    fn axis_len(&self, axis: Axis) -> usize {
        match axis {
            Axis::Shape => self.shapes.len(),
            Axis::Style => self.styles.len(),
            Axis::Color => self.colors.len(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_axes.iter().map(|a| self.axis_len(*a)).product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config(format!("image size {} too small", self.image_size)));
        }
        if self.shapes.is_empty() || self.styles.is_empty() || self.colors.is_empty() {
            return Err(Error::Config("shapes, styles and colors must be non-empty".into()));
        }
        if self.class_axes.is_empty() || self.class_axes.iter().collect::<BTreeSet<_>>().len() != self.class_axes.len() {
            return Err(Error::Config(format!("class axes {:?} must be distinct and non-empty", self.class_axes)));
        }
        let classes = self.num_classes();
        if self.test_classes == 0 || self.test_classes >= classes {
            return Err(Error::Config(format!("{} test classes out of {}", self.test_classes, classes)));
        }
        if !(0.0 < self.shape_radius[0] && self.shape_radius[0] < self.shape_radius[1]) {
            return Err(Error::Config(format!("shape radius range {:?} is empty", self.shape_radius)));
        }
        if self.images_per_class == 0 {
            return Err(Error::Config("images_per_class must be positive".into()));
        }
        let names: BTreeSet<&str> = self.colors.iter().map(|(n, _)| n.as_str()).collect();
        if names.len() != self.colors.len()
            || self.shapes.iter().collect::<BTreeSet<_>>().len() != self.shapes.len()
            || self.styles.iter().collect::<BTreeSet<_>>().len() != self.styles.len()
        {
            return Err(Error::Config("duplicate shape, style or color".into()));
        }
        Ok(())
    }

    /// All classes in row-major order over the class axes. Held-out classes
    /// are spaced evenly through that order.
    pub fn classes(&self) -> Vec<ClassSpec> {
        let total = self.num_classes();
        let stride = total as f64 / self.test_classes as f64;
        let held: BTreeSet<usize> = (0..self.test_classes).map(|i| ((i as f64 + 0.5) * stride) as usize).collect();
        (0..total)
            .map(|i| {
                let mut rest = i;
                let mut class = ClassSpec { name: String::new(), shape: None, style: None, color: None, split: Split::MetaTrain };
                let mut parts = Vec::new();
                for axis in self.class_axes.iter().rev() {
                    let n = self.axis_len(*axis);
                    let v = rest % n;
                    rest /= n;
                    match axis {
                        Axis::Shape => class.shape = Some(v),
                        Axis::Style => class.style = Some(v),
                        Axis::Color => class.color = Some(v),
                    }
                    parts.push(match axis {
                        Axis::Shape => self.shapes[v].name().to_string(),
                        Axis::Style => self.styles[v].name().to_string(),
                        Axis::Color => self.colors[v].0.clone(),
                    });
                }
                parts.reverse();
                class.name = parts.join("-");
                if held.contains(&i) {
                    class.split = Split::MetaTest;
                }
                class
            })
            .collect()
    }

    fn render(&self, class: &ClassSpec, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let n = self.image_size;
        let nf = n as f32;
        let mut img = vec![0.0f32; 3 * n * n];
        let color = self.colors[class.color.unwrap_or_else(|| rng.random_range(0..self.colors.len()))].1;
        let shape = self.shapes[class.shape.unwrap_or_else(|| rng.random_range(0..self.shapes.len()))];
        let style = self.styles[class.style.unwrap_or_else(|| rng.random_range(0..self.styles.len()))];
        let base: f32 = rng.random_range(0.35..0.6);
        let j = self.background_jitter.max(1e-6);
        let tint: [f32; 3] = [rng.random_range(-j..j), rng.random_range(-j..j), rng.random_range(-j..j)];
        let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
        let freq: f32 = rng.random_range(0.6..1.4);
        let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let bumps: Vec<(f32, f32, f32)> =
            (0..4).map(|_| (rng.random_range(0.0..nf), rng.random_range(0.0..nf), rng.random_range(-1.0..1.0))).collect();
        let r: f32 = rng.random_range(self.shape_radius[0]..self.shape_radius[1]) * nf;
        let cx: f32 = nf / 2.0 + rng.random_range(-0.1..0.1) * nf;
        let cy: f32 = nf / 2.0 + rng.random_range(-0.1..0.1) * nf;
        let gain: f32 = rng.random_range(0.85..1.1);
        for y in 0..n {
            for x in 0..n {
                let (xf, yf) = (x as f32 + 0.5, y as f32 + 0.5);
                let tex = match self.texture {
                    Texture::Stripes => (freq * (xf * angle.cos() + yf * angle.sin()) + phase).sin(),
                    Texture::Blobs => bumps
                        .iter()
                        .map(|(bx, by, s)| s * (-((xf - bx).powi(2) + (yf - by).powi(2)) / (0.08 * nf * nf)).exp())
                        .sum::<f32>(),
                };
                let inside = style.paints(shape, xf - cx, yf - cy, r, x, y);
                for ch in 0..3 {
                    let noise: f32 = rng.random_range(-1.0..1.0) * self.pixel_noise;
                    let v = if inside {
                        color[ch] * gain + noise
                    } else {
                        base + tint[ch] + self.texture_amplitude * tex + noise
                    };
                    img[(ch * n + y) * n + x] = (v - 0.5) / 0.25;
                }
            }
        }
        img
    }

    /// Generates both splits from one seed.
    pub fn generate(&self, seed: u64) -> Result<(ToyDataset, ToyDataset)> {
        self.validate()?;
        let mut train = ToyDataset::empty(self, Split::MetaTrain);
        let mut test = ToyDataset::empty(self, Split::MetaTest);
        let mut pixels = (Vec::new(), Vec::new());
        for (ci, class) in self.classes().into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(ci as u64 + 1)));
            let (ds, px) = match class.split {
                Split::MetaTrain => (&mut train, &mut pixels.0),
                Split::MetaTest => (&mut test, &mut pixels.1),
            };
            let label = ds.class_names.len();
            ds.class_names.push(class.name.clone());
            for _ in 0..self.images_per_class {
                px.extend(self.render(&class, &mut rng));
                ds.labels.push(label);
            }
        }
        let s = self.image_size;
        train.images = Tensor::new(vec![train.labels.len(), 3, s, s], pixels.0)?;
        test.images = Tensor::new(vec![test.labels.len(), 3, s, s], pixels.1)?;
        Ok((train, test))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    /// `[N, C, H, W]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub split: Split,
    pub spec: GeneratorSpec,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    split: Split,
    spec: GeneratorSpec,
    class_names: Vec<String>,
    shape: Vec<usize>,
    images: Vec<DatasetEntry>,
}

#[derive(Serialize, Deserialize)]
struct DatasetEntry {
    file: String,
    label: usize,
}

impl ToyDataset {
    fn empty(spec: &GeneratorSpec, split: Split) -> Self {
        ToyDataset { images: Tensor::zeros(&[0]), labels: Vec::new(), class_names: Vec::new(), split, spec: spec.clone() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Indices of the images of one class.
    pub fn class_indices(&self, label: usize) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, l)| **l == label).map(|(i, _)| i).collect()
    }

    /// Stacks the images at `idx` into one batch.
    pub fn gather(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let per: usize = self.images.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Index(format!("image {} of {}", i, self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        Tensor::new(shape, data)
    }

    /// Writes `manifest.json` plus one raw little-endian f32 payload per image.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let per: usize = self.images.shape()[1..].iter().product();
        let mut entries = Vec::with_capacity(self.len());
        for (i, label) in self.labels.iter().enumerate() {
            let file = format!("{:05}.img", i);
            let bytes: Vec<u8> = self.images.data()[i * per..(i + 1) * per].iter().flat_map(|v| v.to_le_bytes()).collect();
            write_atomic(&dir.join(&file), &bytes)?;
            entries.push(DatasetEntry { file, label: *label });
        }
        let manifest = DatasetManifest {
            split: self.split,
            spec: self.spec.clone(),
            class_names: self.class_names.clone(),
            shape: self.images.shape()[1..].to_vec(),
            images: entries,
        };
        let json = serde_json::to_vec_pretty(&manifest)?;
        write_atomic(&dir.join("manifest.json"), &json)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        let per: usize = manifest.shape.iter().product();
        let mut data = Vec::with_capacity(per * manifest.images.len());
        let mut labels = Vec::with_capacity(manifest.images.len());
        for e in &manifest.images {
            let bytes = std::fs::read(dir.join(&e.file))?;
            if bytes.len() != per * 4 {
                return Err(Error::Validation(format!("{} holds {} bytes, expected {}", e.file, bytes.len(), per * 4)));
            }
            if e.label >= manifest.class_names.len() {
                return Err(Error::Label(format!("{} has label {} of {}", e.file, e.label, manifest.class_names.len())));
            }
            data.extend(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
            labels.push(e.label);
        }
        let mut shape = vec![labels.len()];
        shape.extend(&manifest.shape);
        Ok(ToyDataset {
            images: Tensor::new(shape, data)?,
            labels,
            class_names: manifest.class_names,
            split: manifest.split,
            spec: manifest.spec,
        })
    }
}

/// Fails when the two splits share a class name.
pub fn check_disjoint(a: &ToyDataset, b: &ToyDataset) -> Result<()> {
    let left: BTreeSet<&String> = a.class_names.iter().collect();
    let shared: Vec<&String> = b.class_names.iter().filter(|c| left.contains(c)).collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(format!("classes in both splits: {:?}", shared)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: TaskSplit,
    pub query: TaskSplit,
    /// Dataset label of each episode class, in relabeled order.
    pub classes: Vec<usize>,
    pub support_idx: Vec<usize>,
    pub query_idx: Vec<usize>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }
}

/// Uniformly draws `n` classes, then `k + q` distinct images of each.
pub fn sample_episode(ds: &ToyDataset, n: usize, k: usize, q: usize, seed: u64) -> Result<Episode> {
    if n == 0 || k == 0 || q == 0 {
        return Err(Error::Count("episodes need n, k and q ≥ 1".into()));
    }
    let mut eligible: Vec<usize> = (0..ds.num_classes()).filter(|c| ds.class_indices(*c).len() >= k + q).collect();
    if eligible.len() < n {
        return Err(Error::Count(format!("{} classes with ≥ {} images, need {}", eligible.len(), k + q, n)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    let classes: Vec<usize> = eligible[..n].to_vec();
    let (mut support_idx, mut query_idx, mut s_labels, mut q_labels) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (new_label, &c) in classes.iter().enumerate() {
        let mut idx = ds.class_indices(c);
        idx.shuffle(&mut rng);
        support_idx.extend(&idx[..k]);
        query_idx.extend(&idx[k..k + q]);
        s_labels.extend(std::iter::repeat_n(new_label, k));
        q_labels.extend(std::iter::repeat_n(new_label, q));
    }
    // evaluation prunes by plan, so episodes carry no token masks
    let split = |idx: &[usize], labels: Vec<usize>| -> Result<TaskSplit> {
        Ok(TaskSplit { images: ds.gather(idx)?, masks: Vec::new(), labels })
    };
    Ok(Episode {
        support: split(&support_idx, s_labels)?,
        query: split(&query_idx, q_labels)?,
        classes,
        support_idx,
        query_idx,
    })
}
