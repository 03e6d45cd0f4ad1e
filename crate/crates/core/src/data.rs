//! Datasets: IDX/CSV loading, synthetic Gaussian blobs, the label-shard
//! partitioner and stratified splitting.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Read-only access to labelled samples.
pub trait Examples {
    fn len(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn row(&self, i: usize) -> &[f64];
    fn label(&self, i: usize) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Owner {
    Global,
    Client(usize),
}

/// A row-major feature matrix with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    features: Vec<f64>,
    input_dim: usize,
    labels: Vec<usize>,
    pub owner: Owner,
}

impl Shard {
    pub fn new(features: Vec<f64>, input_dim: usize, labels: Vec<usize>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Data("input dimension must be at least 1".into()));
        }
        if features.len() != input_dim * labels.len() {
            return Err(Error::Data(format!(
                "{} feature values do not form {} rows of width {}",
                features.len(),
                labels.len(),
                input_dim
            )));
        }
        Ok(Shard {
            features,
            input_dim,
            labels,
            owner: Owner::Global,
        })
    }

    pub fn with_owner(mut self, owner: Owner) -> Self {
        self.owner = owner;
        self
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Largest label plus one, or 0 for an empty shard.
    pub fn label_span(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Copy the given rows into a new shard.
    pub fn select(&self, indices: &[usize]) -> Shard {
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Shard {
            features,
            input_dim: self.input_dim,
            labels,
            owner: self.owner,
        }
    }

    pub fn subset<'a>(&'a self, indices: &'a [usize]) -> Subset<'a> {
        Subset {
            shard: self,
            indices,
        }
    }

    /// Concatenate shards of equal width.
    pub fn concat<'a>(shards: impl IntoIterator<Item = &'a Shard>) -> Result<Shard> {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut width = None;
        for s in shards {
            if *width.get_or_insert(s.input_dim) != s.input_dim {
                return Err(Error::Data("cannot concatenate shards of different width".into()));
            }
            features.extend_from_slice(&s.features);
            labels.extend_from_slice(&s.labels);
        }
        let width = width.ok_or_else(|| Error::Data("no shards to concatenate".into()))?;
        Shard::new(features, width, labels)
    }
}

impl Examples for Shard {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }
}

/// A borrowed selection of rows, used for mini-batches.
#[derive(Debug, Clone, Copy)]
pub struct Subset<'a> {
    shard: &'a Shard,
    indices: &'a [usize],
}

impl Examples for Subset<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn input_dim(&self) -> usize {
        self.shard.input_dim
    }

    fn row(&self, i: usize) -> &[f64] {
        self.shard.row(self.indices[i])
    }

    fn label(&self, i: usize) -> usize {
        self.shard.labels[self.indices[i]]
    }
}

/// An owned mini-batch: `batch_size × input_dim` features plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    input_dim: usize,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Vec<f64>, input_dim: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("a batch needs at least one sample".into()));
        }
        if input_dim == 0 || features.len() != input_dim * labels.len() {
            return Err(Error::Data(format!(
                "batch of {} labels cannot hold {} features of width {}",
                labels.len(),
                features.len(),
                input_dim
            )));
        }
        Ok(Batch {
            features,
            input_dim,
            labels,
        })
    }
}

impl Examples for Batch {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parse an IDX image file (`0x00000803`) and label file (`0x00000801`)
/// into a shard with pixel values scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Shard> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "images: bad magic number {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let dim = rows * cols;
    let pixels = &images[16..];
    if pixels.len() != count * dim {
        return Err(Error::Format(format!(
            "images: expected {} pixel bytes for {count} images of {rows}x{cols}, found {}",
            count * dim,
            pixels.len()
        )));
    }

    let magic = be_u32(labels, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "labels: bad magic number {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let label_count = be_u32(labels, 4, "labels")? as usize;
    let label_bytes = &labels[8..];
    if label_bytes.len() != label_count {
        return Err(Error::Format(format!(
            "labels: header declares {label_count} labels, found {}",
            label_bytes.len()
        )));
    }
    if label_count != count {
        return Err(Error::Format(format!(
            "{count} images but {label_count} labels"
        )));
    }

    let features = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels = label_bytes.iter().map(|&l| l as usize).collect();
    Shard::new(features, dim.max(1), labels)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Shard> {
    parse_idx(&read_file(images_path)?, &read_file(labels_path)?)
}

/// Encode a shard's features (already in `[0, 1]`) as an IDX pair.
/// `rows * cols` must equal the shard width.
pub fn encode_idx(shard: &Shard, rows: u32, cols: u32) -> (Vec<u8>, Vec<u8>) {
    assert_eq!((rows * cols) as usize, shard.input_dim);
    let mut images = Vec::new();
    for v in [IDX_IMAGES_MAGIC, shard.len() as u32, rows, cols] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(shard.features.iter().map(|&f| (f * 255.0).round() as u8));
    let mut labels = Vec::new();
    for v in [IDX_LABELS_MAGIC, shard.len() as u32] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    labels.extend(shard.labels.iter().map(|&l| l as u8));
    (images, labels)
}

/// Load a CSV dataset: header row, a `label` column with class indices, every
/// other column a numeric feature.
pub fn load_csv(path: &Path) -> Result<Shard> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    })?;
    let headers = reader.headers()?.clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| Error::Format(format!("{}: no `label` column", path.display())))?;
    let width = headers.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        for (col, field) in record.iter().enumerate() {
            let field = field.trim();
            if col == label_col {
                let label = field.parse::<usize>().map_err(|_| {
                    Error::Format(format!("row {}: label `{field}` is not a class index", line + 1))
                })?;
                labels.push(label);
            } else {
                let v = field.parse::<f64>().map_err(|_| {
                    Error::Format(format!("row {}: `{field}` is not a number", line + 1))
                })?;
                if !v.is_finite() {
                    return Err(Error::Format(format!("row {}: non-finite feature", line + 1)));
                }
                features.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Data(format!("{}: no rows", path.display())));
    }
    Shard::new(features, width, labels)
}

/// Gaussian blobs with unit variance, one per class. Class means sit at
/// distance `separation` from the origin along the axes of a random
/// orthonormal frame (random unit directions when there are more classes than
/// dimensions). Rows are ordered class by class.
pub fn synth_classes<R: Rng>(
    num_classes: usize,
    per_class: usize,
    input_dim: usize,
    separation: f64,
    rng: &mut R,
) -> Result<Shard> {
    if num_classes == 0 || per_class == 0 || input_dim == 0 {
        return Err(Error::Data("synthetic dataset counts must be at least 1".into()));
    }
    let directions = random_frame(num_classes, input_dim, rng);
    let mut features = Vec::with_capacity(num_classes * per_class * input_dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (class, dir) in directions.iter().enumerate() {
        for _ in 0..per_class {
            for d in dir {
                let noise: f64 = StandardNormal.sample(rng);
                features.push(separation * d + noise);
            }
            labels.push(class);
        }
    }
    Shard::new(features, input_dim, labels)
}

fn random_frame<R: Rng>(count: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(count);
    while frame.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if frame.len() < dim {
            // Gram-Schmidt against the directions chosen so far.
            for u in &frame {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(u) {
                    *a -= dot * b;
                }
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        frame.push(v);
    }
    frame
}

/// Sample indices held by each client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    pub assignments: Vec<Vec<usize>>,
    pub classes_per_client: usize,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn shards(&self, dataset: &Shard) -> Vec<Shard> {
        self.assignments
            .iter()
            .enumerate()
            .map(|(c, idx)| dataset.select(idx).with_owner(Owner::Client(c)))
            .collect()
    }
}

/// Split `total` into `parts` sizes that differ by at most one.
fn even_sizes(total: usize, parts: usize) -> Vec<usize> {
    let base = total / parts;
    let extra = total % parts;
    (0..parts).map(|i| base + usize::from(i < extra)).collect()
}

/// Largest-remainder apportionment of `total` units by `weights`.
fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    let mut out: Vec<usize> = weights.iter().map(|w| total * w / sum).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // Largest fractional part first, ties by index.
    order.sort_by_key(|&i| (std::cmp::Reverse(total * weights[i] % sum), i));
    let short = total - out.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        out[i] += 1;
    }
    out
}

/// Non-IID label-shard partition.
///
/// Samples are sorted by label and cut into `num_clients * classes_per_client`
/// label-homogeneous blocks; each label receives a share of the blocks
/// proportional to its sample count, and its samples are spread over its
/// blocks as evenly as possible. Blocks are listed label by label (labels in
/// a seeded order) and dealt round-robin, so a client's blocks always come
/// from distinct labels. Client ids are then permuted by the same stream.
pub fn shard_two_class<R: Rng>(
    dataset: &Shard,
    num_clients: usize,
    classes_per_client: usize,
    rng: &mut R,
) -> Result<PartitionPlan> {
    if num_clients == 0 || classes_per_client == 0 {
        return Err(Error::Partition(
            "num_clients and classes_per_client must be at least 1".into(),
        ));
    }
    if dataset.is_empty() {
        return Err(Error::Data("cannot partition an empty dataset".into()));
    }
    if num_clients == 1 {
        return Ok(PartitionPlan {
            assignments: vec![(0..dataset.len()).collect()],
            classes_per_client,
        });
    }

    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let labels: Vec<usize> = by_label.keys().copied().collect();
    if labels.len() < classes_per_client {
        return Err(Error::Partition(format!(
            "dataset has {} labels, fewer than {classes_per_client} classes per client",
            labels.len()
        )));
    }
    let total_blocks = num_clients * classes_per_client;
    if total_blocks < labels.len() {
        return Err(Error::Partition(format!(
            "{total_blocks} blocks cannot cover {} labels without mixing labels",
            labels.len()
        )));
    }
    let counts: Vec<usize> = labels.iter().map(|l| by_label[l].len()).collect();
    let mut blocks_per_label = apportion(total_blocks - labels.len(), &counts);
    blocks_per_label.iter_mut().for_each(|b| *b += 1);
    for (k, (&label, &blocks)) in labels.iter().zip(&blocks_per_label).enumerate() {
        if blocks > counts[k] {
            return Err(Error::Partition(format!(
                "label {label} has {} samples, too few for {blocks} blocks",
                counts[k]
            )));
        }
        if blocks > num_clients {
            return Err(Error::Partition(format!(
                "label {label} needs {blocks} blocks but only {num_clients} clients can hold it"
            )));
        }
    }

    let mut label_order: Vec<usize> = (0..labels.len()).collect();
    label_order.shuffle(rng);
    let mut blocks: Vec<Vec<usize>> = Vec::with_capacity(total_blocks);
    for &k in &label_order {
        let members = &by_label[&labels[k]];
        let mut start = 0;
        for size in even_sizes(members.len(), blocks_per_label[k]) {
            blocks.push(members[start..start + size].to_vec());
            start += size;
        }
    }

    let mut slots: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for (j, block) in blocks.into_iter().enumerate() {
        slots[j % num_clients].extend(block);
    }
    let mut client_ids: Vec<usize> = (0..num_clients).collect();
    client_ids.shuffle(rng);
    let mut assignments = vec![Vec::new(); num_clients];
    for (slot, id) in slots.into_iter().zip(client_ids) {
        assignments[id] = slot;
    }
    for a in &mut assignments {
        a.sort_unstable();
    }
    Ok(PartitionPlan {
        assignments,
        classes_per_client,
    })
}

/// Stratified split into `(train, test)`. The test side holds
/// `ceil(n * test_fraction)` samples apportioned across labels by largest
/// remainder.
pub fn train_test_split<R: Rng>(
    shard: &Shard,
    test_fraction: f64,
    rng: &mut R,
) -> Result<(Shard, Shard)> {
    let (train_idx, test_idx) = split_indices(shard, test_fraction, rng)?;
    Ok((shard.select(&train_idx), shard.select(&test_idx)))
}

pub(crate) fn split_indices<R: Rng>(
    shard: &Shard,
    test_fraction: f64,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(
            "test_fraction",
            format!("{test_fraction} is not in (0, 1)"),
        ));
    }
    let n = shard.len();
    let test_total = (n as f64 * test_fraction).ceil() as usize;
    if n < 2 || test_total == 0 || test_total >= n {
        return Err(Error::Data(format!(
            "cannot split {n} samples with test fraction {test_fraction} leaving both sides nonempty"
        )));
    }
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in shard.labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let counts: Vec<usize> = by_label.values().map(Vec::len).collect();
    let per_label = apportion(test_total, &counts);
    let mut train = Vec::with_capacity(n - test_total);
    let mut test = Vec::with_capacity(test_total);
    for (mut members, take) in by_label.into_values().zip(per_label) {
        members.shuffle(rng);
        test.extend_from_slice(&members[..take]);
        train.extend_from_slice(&members[take..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
