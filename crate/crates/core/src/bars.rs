//! Synthetic colored-bar images, the matching toy network and the named
//! first-layer transfer scenarios.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dan::{Architecture, ConvSpec, LayerSpec};
use crate::error::{io_at, shape_err, DanError, Result};
use crate::tensor::{FilterBank, Tensor};

pub const IMAGE_SIDE: usize = 28;
pub const CLASSES: usize = 5;
pub const FILTER_SIDE: usize = 5;
const BARS_MAGIC: [u8; 4] = *b"BARS";
const BARS_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Red,
    Green,
    Blue,
}

impl Channel {
    pub fn index(self) -> usize {
        match self {
            Channel::Red => 0,
            Channel::Green => 1,
            Channel::Blue => 2,
        }
    }

    /// The other one of red and green.
    pub fn swapped(self) -> Channel {
        match self {
            Channel::Red => Channel::Green,
            _ => Channel::Red,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Horizontal,
    Vertical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BarsVariant {
    RedHorizontal,
    /// Red vertical bars.
    RedVertical,
    /// Green horizontal bars.
    GreenHorizontal,
}

impl BarsVariant {
    pub const ALL: [BarsVariant; 3] = [BarsVariant::RedHorizontal, BarsVariant::RedVertical, BarsVariant::GreenHorizontal];

    pub fn channel(self) -> Channel {
        match self {
            BarsVariant::GreenHorizontal => Channel::Green,
            _ => Channel::Red,
        }
    }

    pub fn orientation(self) -> Orientation {
        match self {
            BarsVariant::RedVertical => Orientation::Vertical,
            _ => Orientation::Horizontal,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BarsVariant::RedHorizontal => "red-horizontal",
            BarsVariant::RedVertical => "red-vertical",
            BarsVariant::GreenHorizontal => "green-horizontal",
        }
    }
}

impl fmt::Display for BarsVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BarsVariant {
    type Err = DanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "red-horizontal" | "horizontal" | "original" => Ok(BarsVariant::RedHorizontal),
            "red-vertical" | "vertical" | "transposed" => Ok(BarsVariant::RedVertical),
            "green-horizontal" | "new-channel" => Ok(BarsVariant::GreenHorizontal),
            other => Err(DanError::InvalidArgument(format!("unknown bars variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarsConfig {
    pub variant: BarsVariant,
    pub n_examples: usize,
    /// Train fraction.
    pub split: f64,
    pub seed: u64,
    /// Pixels kept free along every image border. The default of 2 keeps
    /// every bar pixel under the center of some valid 5x5 window.
    #[serde(default = "default_margin")]
    pub margin: usize,
}

pub const DEFAULT_MARGIN: usize = 2;

fn default_margin() -> usize {
    DEFAULT_MARGIN
}

impl Default for BarsConfig {
    fn default() -> Self {
        Self { variant: BarsVariant::RedHorizontal, n_examples: 1000, split: 0.75, seed: 0, margin: DEFAULT_MARGIN }
    }
}

impl BarsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_examples < CLASSES {
            return Err(DanError::InvalidArgument(format!("need at least {CLASSES} examples, got {}", self.n_examples)));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(DanError::InvalidArgument(format!("split {} outside (0, 1)", self.split)));
        }
        if IMAGE_SIDE < 2 * self.margin + bar_length(CLASSES - 1) {
            return Err(DanError::InvalidArgument(format!("margin {} leaves no room for the longest bar", self.margin)));
        }
        Ok(())
    }

    pub fn train_count(&self) -> usize {
        (self.n_examples as f64 * self.split).round() as usize
    }

    /// `key=value` lines describing the configuration.
    pub fn sidecar(&self) -> String {
        format!(
            "variant={}\nn_examples={}\nsplit={}\nseed={}\nmargin={}\n",
            self.variant, self.n_examples, self.split, self.seed, self.margin
        )
    }
}

/// Bar length for a class label.
pub fn bar_length(label: usize) -> usize {
    3 * (label + 3)
}

/// A labelled image collection stored as one contiguous buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[channels, height, width]`
    pub image_dims: [usize; 3],
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(image_dims: [usize; 3], images: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let per: usize = image_dims.iter().product();
        if images.len() != per * labels.len() {
            return shape_err(format!("{} values for {} images of {:?}", images.len(), labels.len(), image_dims));
        }
        Ok(Self { image_dims, images, labels })
    }

    pub fn empty(image_dims: [usize; 3]) -> Self {
        Self { image_dims, images: Vec::new(), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.image_dims.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn push(&mut self, image: &[f64], label: usize) {
        assert_eq!(image.len(), self.image_len(), "image size");
        self.images.extend_from_slice(image);
        self.labels.push(label);
    }

    /// Stacks the selected images into `[N, C, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.image_dims;
        let t = Tensor::new(vec![indices.len(), c, h, w], data).expect("consistent batch");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::empty(self.image_dims);
        for &i in indices {
            out.push(self.image(i), self.labels[i]);
        }
        out
    }

    /// Appends `other`'s examples.
    pub fn extend(&mut self, other: &Dataset) -> Result<()> {
        if other.image_dims != self.image_dims {
            return shape_err(format!("image dims {:?} vs {:?}", other.image_dims, self.image_dims));
        }
        self.images.extend_from_slice(&other.images);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }

    /// A copy with every label replaced by `label`.
    pub fn relabeled(&self, label: usize) -> Dataset {
        Dataset { image_dims: self.image_dims, images: self.images.clone(), labels: vec![label; self.len()] }
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BarsSplit {
    pub train: Dataset,
    pub test: Dataset,
}

/// Draws a single bar image of the given class, placed uniformly among the
/// positions that keep it `margin` pixels away from every border.
pub fn draw_bar<R: Rng + ?Sized>(variant: BarsVariant, label: usize, margin: usize, rng: &mut R) -> Vec<f64> {
    let len = bar_length(label);
    let mut img = vec![0.0; 3 * IMAGE_SIDE * IMAGE_SIDE];
    let line = rng.random_range(margin..IMAGE_SIDE - margin);
    let start = rng.random_range(margin..=IMAGE_SIDE - margin - len);
    let plane = variant.channel().index() * IMAGE_SIDE * IMAGE_SIDE;
    for s in start..start + len {
        let (r, c) = match variant.orientation() {
            Orientation::Horizontal => (line, s),
            Orientation::Vertical => (s, line),
        };
        img[plane + r * IMAGE_SIDE + c] = 1.0;
    }
    img
}

/// Generates a class-balanced dataset and splits it by index.
pub fn gen_bars(cfg: &BarsConfig) -> Result<BarsSplit> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut labels: Vec<usize> = (0..cfg.n_examples).map(|i| i % CLASSES).collect();
    labels.shuffle(&mut rng);
    let dims = [3, IMAGE_SIDE, IMAGE_SIDE];
    let mut all = Dataset::empty(dims);
    for &label in &labels {
        let img = draw_bar(cfg.variant, label, cfg.margin, &mut rng);
        all.push(&img, label);
    }
    let n_train = cfg.train_count();
    let train: Vec<usize> = (0..n_train).collect();
    let test: Vec<usize> = (n_train..cfg.n_examples).collect();
    Ok(BarsSplit { train: all.subset(&train), test: all.subset(&test) })
}

/// A `[3, 5, 5]` filter with ones along the center row or column of one
/// channel.
pub fn make_bar_filter(orientation: Orientation, channel: Channel) -> Tensor {
    let mut t = Tensor::zeros(&[3, FILTER_SIDE, FILTER_SIDE]);
    let mid = FILTER_SIDE / 2;
    for i in 0..FILTER_SIDE {
        let (r, c) = match orientation {
            Orientation::Horizontal => (mid, i),
            Orientation::Vertical => (i, mid),
        };
        t.set(&[channel.index(), r, c], 1.0);
    }
    t
}

/// A patch detector responding with 4 to a pattern with ones at the corners
/// of a 3x3 window.
pub fn corner_filter_v() -> Tensor {
    Tensor::from_rows(&[vec![1.0, -1.0, 1.0], vec![-1.0, -1.0, -1.0], vec![1.0, -1.0, 1.0]]).expect("3x3")
}

/// conv(3->1, 5x5) -> relu -> pool2 -> conv(1->20, 5x5) -> relu -> pool2 ->
/// fc 320->50 -> relu -> fc 50->5.
pub fn toy_network() -> Architecture {
    Architecture {
        input: [3, IMAGE_SIDE, IMAGE_SIDE],
        features: vec![
            LayerSpec::Conv(ConvSpec { c_in: 3, c_out: 1, kernel: 5, stride: 1, padding: 0 }),
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2, stride: 2 },
            LayerSpec::Conv(ConvSpec { c_in: 1, c_out: 20, kernel: 5, stride: 1, padding: 0 }),
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2, stride: 2 },
        ],
        head: vec![50, CLASSES],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Original,
    OriginalLearn,
    Transposed,
    ChannelSwitch,
    ChannelSwitchNoise,
    ChannelSwitchCleanStart,
    ChannelSwitchLearn,
}

impl Scenario {
    pub const ALL: [Scenario; 7] = [
        Scenario::Original,
        Scenario::OriginalLearn,
        Scenario::Transposed,
        Scenario::ChannelSwitch,
        Scenario::ChannelSwitchNoise,
        Scenario::ChannelSwitchCleanStart,
        Scenario::ChannelSwitchLearn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Original => "original",
            Scenario::OriginalLearn => "original+learn",
            Scenario::Transposed => "transposed",
            Scenario::ChannelSwitch => "channel-switch",
            Scenario::ChannelSwitchNoise => "channel-switch+noise",
            Scenario::ChannelSwitchCleanStart => "channel-switch+clean-start",
            Scenario::ChannelSwitchLearn => "channel-switch+learn",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = DanError;

    /// Accepts `channel switch + learn`, `channel-switch+learn` and
    /// `channel_switch_learn` alike.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .to_lowercase()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect();
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name().chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>() == key)
            .ok_or_else(|| DanError::InvalidArgument(format!("unknown scenario {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FirstLayerInit {
    FixedBar,
    FixedBarNoise,
    Random,
}

/// Which channel the domain-knowledge filter sits in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelLabeling {
    /// The filter matches the original dataset's channel, so the channel
    /// switch scenarios see an orthogonal filter.
    #[default]
    Matched,
    /// The filter is green in every scenario.
    Green,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub variant: BarsVariant,
    pub init: FirstLayerInit,
    pub first_layer_trainable: bool,
    pub filter_orientation: Orientation,
    pub filter_channel: Channel,
    pub noise_sigma: f64,
    pub epochs: usize,
    pub trials: usize,
}

pub const DEFAULT_NOISE_SIGMA: f64 = 0.1;

pub fn scenario_setup(name: &str) -> Result<ScenarioSpec> {
    scenario_setup_with(name.parse()?, ChannelLabeling::Matched)
}

pub fn scenario_setup_with(scenario: Scenario, labeling: ChannelLabeling) -> Result<ScenarioSpec> {
    use FirstLayerInit::*;
    let (variant, init, trainable) = match scenario {
        Scenario::Original => (BarsVariant::RedHorizontal, FixedBar, false),
        Scenario::OriginalLearn => (BarsVariant::RedHorizontal, FixedBar, true),
        Scenario::Transposed => (BarsVariant::RedVertical, FixedBar, false),
        Scenario::ChannelSwitch => (BarsVariant::GreenHorizontal, FixedBar, false),
        Scenario::ChannelSwitchNoise => (BarsVariant::GreenHorizontal, FixedBarNoise, false),
        Scenario::ChannelSwitchCleanStart => (BarsVariant::GreenHorizontal, Random, true),
        Scenario::ChannelSwitchLearn => (BarsVariant::GreenHorizontal, FixedBar, true),
    };
    let filter_channel = match labeling {
        ChannelLabeling::Matched => BarsVariant::RedHorizontal.channel(),
        ChannelLabeling::Green => Channel::Green,
    };
    Ok(ScenarioSpec {
        scenario,
        variant,
        init,
        first_layer_trainable: trainable,
        filter_orientation: Orientation::Horizontal,
        filter_channel,
        noise_sigma: DEFAULT_NOISE_SIGMA,
        epochs: 50,
        trials: 20,
    })
}

impl ScenarioSpec {
    /// First-layer weights `[1, 3, 5, 5]` for this scenario, or `None` for a
    /// random start.
    pub fn first_layer_weights<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<Tensor> {
        let bar = make_bar_filter(self.filter_orientation, self.filter_channel);
        let mut w = bar.reshape(&[1, 3, FILTER_SIDE, FILTER_SIDE]).expect("same size");
        match self.init {
            FirstLayerInit::Random => return None,
            FirstLayerInit::FixedBar => {}
            FirstLayerInit::FixedBarNoise => {
                let normal = Normal::new(0.0, self.noise_sigma).expect("finite sigma");
                for v in w.data_mut() {
                    *v += normal.sample(rng);
                }
            }
        }
        Some(w)
    }

    /// A first-layer bank with the scenario weights and a random bias.
    pub fn first_layer<R: Rng + ?Sized>(&self, rng: &mut R) -> FilterBank {
        let random = FilterBank::random(1, 3, FILTER_SIDE, rng);
        match self.first_layer_weights(rng) {
            Some(w) => FilterBank::new(w, random.bias).expect("toy filter shape"),
            None => random,
        }
    }
}

/// Writes the binary dataset and a `key=value` sidecar next to it.
pub fn write_bars(path: &Path, data: &Dataset, sidecar: &str) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path).map_err(io_at(path))?);
    out.write_all(&BARS_MAGIC)?;
    out.write_all(&BARS_VERSION.to_le_bytes())?;
    out.write_all(&(data.len() as u32).to_le_bytes())?;
    for d in data.image_dims {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for i in 0..data.len() {
        let label = u8::try_from(data.labels[i])
            .map_err(|_| DanError::InvalidArgument(format!("label {} does not fit a byte", data.labels[i])))?;
        out.write_all(&[label])?;
        for &v in data.image(i) {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    fs::write(sidecar_path(path), sidecar)?;
    Ok(())
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".cfg");
    path.with_file_name(name)
}

pub fn read_bars(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    fs::File::open(path).map_err(io_at(path))?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != BARS_MAGIC {
        return Err(DanError::BadMagic { expected: BARS_MAGIC, found: magic });
    }
    let version = cur.u32("version")?;
    if version != BARS_VERSION {
        return Err(DanError::VersionMismatch { expected: BARS_VERSION, found: version });
    }
    let count = cur.u32("count")? as usize;
    let dims = [cur.u32("dims")? as usize, cur.u32("dims")? as usize, cur.u32("dims")? as usize];
    let mut data = Dataset::empty(dims);
    let per = data.image_len();
    let mut img = vec![0.0; per];
    for i in 0..count {
        let label = cur.take(1, "label")?[0] as usize;
        let raw = cur.take(4 * per, &format!("image {i}"))?;
        for (v, c) in img.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64;
        }
        data.push(&img, label);
    }
    if cur.pos != bytes.len() {
        return Err(DanError::Inconsistent(format!("{} trailing bytes after {count} examples", bytes.len() - cur.pos)));
    }
    Ok(data)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(DanError::Truncated(format!("{what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}
