//! Datasets: IDX ingestion/export, the synthetic group-structured generator
//! and batch builders.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::rng::{Purpose, RngStream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// `N × D` samples in `[0, 1]` with optional integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub labels: Option<Vec<u32>>,
    pub name: String,
    /// `(rows, cols)` with `rows * cols == D`.
    pub image_shape: (usize, usize),
}

impl Dataset {
    pub fn new(
        x: Array2<f64>,
        labels: Option<Vec<u32>>,
        name: impl Into<String>,
        image_shape: (usize, usize),
    ) -> Result<Self> {
        if image_shape.0 * image_shape.1 != x.ncols() {
            return Err(Error::contract(format!(
                "image shape {image_shape:?} does not cover {} columns",
                x.ncols()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != x.nrows() {
                return Err(Error::contract(format!(
                    "{} labels for {} samples",
                    l.len(),
                    x.nrows()
                )));
            }
        }
        if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("dataset entries must lie in [0, 1]"));
        }
        Ok(Self {
            x,
            labels,
            name: name.into(),
            image_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Rows `indices`, in order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Self {
        Self {
            x: self.x.select(Axis(0), indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            name: name.into(),
            image_shape: self.image_shape,
        }
    }

    /// First `n` samples (or all, if fewer).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.name.clone())
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::contract("label count does not match sample count"));
        }
        self.labels = Some(labels);
        Ok(self)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset as u64, "file truncated inside header"))
}

/// Parses an IDX image file (`0x00000803`, N, rows, cols, u8 payload).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Array2<f64>, (usize, usize))> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(0, format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let d = rows * cols;
    let payload = &bytes[16..];
    if payload.len() != n * d {
        return Err(Error::format(
            16 + payload.len().min(n * d) as u64,
            format!("expected {} payload bytes, found {}", n * d, payload.len()),
        ));
    }
    let x = Array2::from_shape_fn((n, d), |(i, j)| payload[i * d + j] as f64 / 255.0);
    Ok((x, (rows, cols)))
}

/// Parses an IDX label file (`0x00000801`, N, u8 payload).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u32>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(0, format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::format(
            8 + payload.len().min(n) as u64,
            format!("expected {n} labels, found {}", payload.len()),
        ));
    }
    Ok(payload.iter().map(|&b| b as u32).collect())
}

pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let (x, shape) = parse_idx_images(&read_file(images)?)?;
    let labels = match labels {
        Some(p) => {
            let l = parse_idx_labels(&read_file(p)?)?;
            if l.len() != x.nrows() {
                return Err(Error::format(
                    4,
                    format!("{} labels for {} images", l.len(), x.nrows()),
                ));
            }
            Some(l)
        }
        None => None,
    };
    let name = images
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(x, labels, name, shape)
}

/// Pixel byte for a value in `[0, 1]` (clamped, round half up).
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn encode_idx_images(data: &Dataset) -> Vec<u8> {
    let (rows, cols) = data.image_shape;
    let mut out = Vec::with_capacity(16 + data.x.len());
    for v in [IDX_IMAGES_MAGIC, data.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(data.x.iter().map(|v| to_byte(*v)));
    out
}

pub fn encode_idx_labels(labels: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::contract(format!("label {l} does not fit a byte")))?);
    }
    Ok(out)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Fixed 8×8 binary templates, one per local pattern class.
pub const TEMPLATES: [[&str; 8]; 8] = [
    // horizontal bar
    ["........", "........", "........", "########", "########", "........", "........", "........"],
    // vertical bar
    ["...##...", "...##...", "...##...", "...##...", "...##...", "...##...", "...##...", "...##..."],
    // diagonal
    ["##......", ".##.....", "..##....", "...##...", "....##..", ".....##.", "......##", ".......#"],
    // cross
    ["...##...", "...##...", "...##...", "########", "########", "...##...", "...##...", "...##..."],
    // anti-diagonal
    ["......##", ".....##.", "....##..", "...##...", "..##....", ".##.....", "##......", "#......."],
    // frame
    ["########", "#......#", "#......#", "#......#", "#......#", "#......#", "#......#", "########"],
    // centre block
    ["........", "........", "..####..", "..####..", "..####..", "..####..", "........", "........"],
    // checkerboard of 2×2 cells
    ["##..##..", "##..##..", "..##..##", "..##..##", "##..##..", "##..##..", "..##..##", "..##..##"],
];

pub const SYNTH_SIDE: usize = 8;
pub const SYNTH_DIM: usize = SYNTH_SIDE * SYNTH_SIDE;
/// Brightness gains selected by `style % 3`.
pub const GAINS: [f64; 3] = [0.4, 0.7, 1.0];
/// Styles `0..3` are normal polarity, `3..6` inverted.
pub const STYLE_COUNT: u32 = 6;

pub fn template(class: usize) -> [f64; SYNTH_DIM] {
    let mut out = [0.0; SYNTH_DIM];
    for (r, row) in TEMPLATES[class].iter().enumerate() {
        for (c, ch) in row.bytes().enumerate() {
            out[r * SYNTH_SIDE + c] = if ch == b'#' { 1.0 } else { 0.0 };
        }
    }
    out
}

pub fn style_gain(style: u32) -> f64 {
    GAINS[(style % 3) as usize]
}

pub fn style_inverted(style: u32) -> bool {
    style >= 3
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_groups: usize,
    pub group_size: usize,
    /// Number of pattern classes, at most `TEMPLATES.len()`.
    pub k_true: usize,
    /// Styles a group may draw from (subset of `0..STYLE_COUNT`).
    pub styles: Vec<u32>,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_groups: 50,
            group_size: 100,
            k_true: 4,
            styles: (0..STYLE_COUNT).collect(),
            noise_std: 0.05,
            seed: 0,
        }
    }
}

/// Synthetic samples plus their ground truth. `dataset.labels` holds the class.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub group: Vec<u32>,
    pub style: Vec<u32>,
    pub class: Vec<u32>,
}

impl SyntheticData {
    /// The dataset relabelled by style.
    pub fn by_style(&self) -> Dataset {
        let mut d = self.dataset.clone();
        d.labels = Some(self.style.clone());
        d
    }
}

/// Each group draws a style (gain and polarity) shared by its members; each
/// member draws a pattern class. `pixel = clamp(style(template) + noise, 0, 1)`.
pub fn make_synthetic(config: &SyntheticConfig) -> Result<SyntheticData> {
    if config.k_true == 0 || config.k_true > TEMPLATES.len() {
        return Err(Error::contract(format!(
            "k_true must be in 1..={}, got {}",
            TEMPLATES.len(),
            config.k_true
        )));
    }
    if config.styles.is_empty() || config.styles.iter().any(|s| *s >= STYLE_COUNT) {
        return Err(Error::contract(format!("styles must be a non-empty subset of 0..{STYLE_COUNT}")));
    }
    let templates: Vec<_> = (0..config.k_true).map(template).collect();
    let n = config.n_groups * config.group_size;
    let mut rng = RngStream::substream(config.seed, Purpose::Data, 0);
    let mut x = Array2::zeros((n, SYNTH_DIM));
    let (mut group, mut style, mut class) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let mut row = 0;
    for gi in 0..config.n_groups {
        let s = config.styles[rng.below(config.styles.len())];
        let gain = style_gain(s);
        let inverted = style_inverted(s);
        for _ in 0..config.group_size {
            let c = rng.below(config.k_true);
            for (j, t) in templates[c].iter().enumerate() {
                let base = gain * t;
                let base = if inverted { 1.0 - base } else { base };
                let noise = if config.noise_std > 0.0 {
                    config.noise_std * rng.normal()
                } else {
                    0.0
                };
                x[[row, j]] = (base + noise).clamp(0.0, 1.0);
            }
            group.push(gi as u32);
            style.push(s);
            class.push(c as u32);
            row += 1;
        }
    }
    let dataset = Dataset::new(x, Some(class.clone()), "synthetic", (SYNTH_SIDE, SYNTH_SIDE))?;
    Ok(SyntheticData {
        dataset,
        group,
        style,
        class,
    })
}

// ---------------------------------------------------------------------------
// Batch builders

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupBatch {
    pub indices: Vec<usize>,
    pub tag: String,
}

impl GroupBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Gathers the member rows.
    pub fn x(&self, data: &Dataset) -> Array2<f64> {
        data.x.select(Axis(0), &self.indices)
    }
}

/// Seeded shuffle, then consecutive chunks of `b`; the ragged tail is dropped.
pub fn random_groups(data: &Dataset, b: usize, rng: &mut RngStream) -> Result<Vec<GroupBatch>> {
    if b == 0 || data.len() < b {
        return Err(Error::Capacity {
            needed: b.max(1),
            available: data.len(),
        });
    }
    let order = rng.permutation(data.len());
    Ok(order
        .chunks_exact(b)
        .map(|c| GroupBatch {
            indices: c.to_vec(),
            tag: "random".into(),
        })
        .collect())
}

/// A named set of admissible labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    pub name: String,
    pub labels: Vec<u32>,
}

impl LabelSet {
    pub fn new(name: impl Into<String>, labels: Vec<u32>) -> Self {
        Self {
            name: name.into(),
            labels,
        }
    }

    /// `even`, `odd`, `fibonacci` (`{0,1,2,3,5,8}`), `prime`, or
    /// `<name>:<l1>,<l2>,...` for an explicit set.
    pub fn parse(spec: &str) -> Result<Self> {
        let builtin = |name: &str, labels: &[u32]| Ok(Self::new(name, labels.to_vec()));
        match spec {
            "even" => builtin("even", &[0, 2, 4, 6, 8]),
            "odd" => builtin("odd", &[1, 3, 5, 7, 9]),
            "fibonacci" => builtin("fibonacci", &[0, 1, 2, 3, 5, 8]),
            "prime" => builtin("prime", &[2, 3, 5, 7]),
            other => {
                let (name, list) = other
                    .split_once(':')
                    .ok_or_else(|| Error::contract(format!("unknown label set '{other}'")))?;
                let labels = list
                    .split(',')
                    .map(|s| s.trim().parse::<u32>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::contract(format!("label set '{other}': {e}")))?;
                if name.is_empty() || labels.is_empty() {
                    return Err(Error::contract(format!("label set '{other}' is empty")));
                }
                Ok(Self::new(name, labels))
            }
        }
    }

    pub fn contains(&self, label: u32) -> bool {
        self.labels.contains(&label)
    }
}

/// `n_groups` groups of `b` members drawn without replacement (within a
/// group) from samples whose label is in `set`.
pub fn structured_groups(
    data: &Dataset,
    set: &LabelSet,
    b: usize,
    n_groups: usize,
    rng: &mut RngStream,
) -> Result<Vec<GroupBatch>> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::contract("structured groups need a labelled dataset"))?;
    let pool: Vec<usize> = (0..data.len()).filter(|&i| set.contains(labels[i])).collect();
    if b == 0 || pool.len() < b {
        return Err(Error::Capacity {
            needed: b.max(1),
            available: pool.len(),
        });
    }
    Ok((0..n_groups)
        .map(|_| GroupBatch {
            indices: rng
                .choose_distinct(pool.len(), b)
                .into_iter()
                .map(|j| pool[j])
                .collect(),
            tag: set.name.clone(),
        })
        .collect())
}

/// A group with members from two domains; `domain[i]` is 0 for A and 1 for B.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedGroup {
    pub x: Array2<f64>,
    pub domain: Vec<u8>,
    /// Row index into the member's own dataset.
    pub source_index: Vec<usize>,
}

/// Groups holding `b/2` members of each domain, shuffled within the group.
pub fn mix_domains(a: &Dataset, bdata: &Dataset, b: usize, rng: &mut RngStream) -> Result<Vec<MixedGroup>> {
    if b == 0 || b % 2 != 0 {
        return Err(Error::contract(format!("mixed groups need an even size, got {b}")));
    }
    if a.is_empty() || bdata.is_empty() {
        return Err(Error::contract("both domains must be non-empty"));
    }
    if a.dim() != bdata.dim() {
        return Err(Error::contract("domains have different data dimensions"));
    }
    let half = b / 2;
    let order_a = rng.permutation(a.len());
    let order_b = rng.permutation(bdata.len());
    let n = (a.len() / half).min(bdata.len() / half);
    let mut groups = Vec::with_capacity(n);
    for g in 0..n {
        let mut members: Vec<(u8, usize)> = order_a[g * half..(g + 1) * half]
            .iter()
            .map(|&i| (0u8, i))
            .chain(order_b[g * half..(g + 1) * half].iter().map(|&i| (1u8, i)))
            .collect();
        rng.shuffle(&mut members);
        let mut x = Array2::zeros((b, a.dim()));
        for (row, (dom, i)) in members.iter().enumerate() {
            let src = if *dom == 0 { a } else { bdata };
            x.row_mut(row).assign(&src.x.row(*i));
        }
        groups.push(MixedGroup {
            x,
            domain: members.iter().map(|m| m.0).collect(),
            source_index: members.iter().map(|m| m.1).collect(),
        });
    }
    Ok(groups)
}
