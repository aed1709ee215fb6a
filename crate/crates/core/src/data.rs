//! Synthetic datasets, pathological non-IID partitioning, and the flat-file
//! dataset format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{Batch, DenseMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: DenseMatrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: DenseMatrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::shape("Dataset", inputs.rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Precondition(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn as_batch(&self) -> Batch {
        Batch {
            inputs: self.inputs.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// One client's slice of the data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub train: Dataset,
    pub test: Dataset,
    /// Sorted class indices held by this client.
    pub class_subset: Vec<usize>,
    /// Share of all training examples held by this client.
    pub data_fraction: f64,
}

/// Gaussian blobs, one per class. Centers are standard normal, points are
/// `center + spread * N(0, I)`. Rows are grouped by class.
pub fn generate_synthetic(num_classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || dim == 0 || per_class == 0 {
        return Err(Error::Precondition("class count, dimension and per-class count must be >= 1".into()));
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(Error::Precondition(format!("spread must be finite and nonnegative, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &c in center {
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push(c + spread * noise);
            }
            labels.push(class);
        }
    }
    Dataset::new(DenseMatrix::from_vec(n, dim, data)?, labels, num_classes)
}

/// Assigns `classes_per_client` distinct classes to each client and splits
/// each class's examples evenly among its holders, then splits every shard
/// into train and test by `train_fraction` within each class.
pub fn pathological_partition(
    data: &Dataset,
    num_clients: usize,
    classes_per_client: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    let k = data.num_classes;
    if num_clients == 0 || classes_per_client == 0 {
        return Err(Error::Precondition("need at least one client and one class per client".into()));
    }
    if classes_per_client > k {
        return Err(Error::Precondition(format!(
            "classes_per_client {classes_per_client} exceeds num_classes {k}"
        )));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Precondition(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    if num_clients * classes_per_client < k {
        warn!(
            "{num_clients} clients x {classes_per_client} classes cannot cover {k} classes; \
             uncovered classes are dropped"
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let assignment = assign_classes(num_clients, classes_per_client, k, &mut rng)?;

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in data.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    // per client: (train indices, test indices)
    let mut parts: Vec<(Vec<usize>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); num_clients];
    for (class, mut examples) in by_class.into_iter().enumerate() {
        let holders: Vec<usize> = (0..num_clients).filter(|&c| assignment[c].contains(&class)).collect();
        if holders.is_empty() {
            continue;
        }
        examples.shuffle(&mut rng);
        let base = examples.len() / holders.len();
        let extra = examples.len() % holders.len();
        let mut start = 0;
        for (h, &client) in holders.iter().enumerate() {
            let len = base + usize::from(h < extra);
            if len == 0 {
                return Err(Error::Precondition(format!(
                    "class {class} has too few examples for {} holders (client {client} gets none)",
                    holders.len()
                )));
            }
            let chunk = &examples[start..start + len];
            start += len;
            let n_train = ((len as f64 * train_fraction).round() as usize).clamp(1, len);
            parts[client].0.extend_from_slice(&chunk[..n_train]);
            parts[client].1.extend_from_slice(&chunk[n_train..]);
        }
    }

    let total_train: usize = parts.iter().map(|p| p.0.len()).sum();
    let shards = parts
        .into_iter()
        .zip(assignment)
        .enumerate()
        .map(|(client_id, ((train, test), mut class_subset))| {
            if test.is_empty() {
                return Err(Error::Precondition(format!("client {client_id} received an empty test split")));
            }
            class_subset.sort_unstable();
            Ok(ClientShard {
                client_id,
                data_fraction: train.len() as f64 / total_train as f64,
                train: data.subset(&train),
                test: data.subset(&test),
                class_subset,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(shards)
}

/// Deals `num_clients * per_client` slots from a shuffled cyclic sequence of
/// classes, then swaps slots between clients until no client holds a class
/// twice. Every class is dealt at least once when there are enough slots.
fn assign_classes(num_clients: usize, per_client: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    let total = num_clients * per_client;
    let mut slots: Vec<usize> = (0..total).map(|i| order[i % k]).collect();
    slots.shuffle(rng);

    let holds = |slots: &[usize], client: usize, class: usize, skip: usize| {
        (client * per_client..(client + 1) * per_client).any(|s| s != skip && slots[s] == class)
    };
    for s in 0..total {
        let client = s / per_client;
        if !holds(&slots, client, slots[s], s) {
            continue;
        }
        let swap = (0..total).find(|&t| {
            let other = t / per_client;
            other != client
                && !holds(&slots, client, slots[t], s)
                && !holds(&slots, other, slots[s], t)
        });
        match swap {
            Some(t) => slots.swap(s, t),
            None => {
                return Err(Error::Precondition(format!(
                    "cannot give client {client} {per_client} distinct classes"
                )))
            }
        }
    }
    Ok(slots.chunks(per_client).map(<[usize]>::to_vec).collect())
}

/// Reads the `dim=<d>,classes=<k>` header followed by `label,v1,...,vd` rows.
pub fn load_flatfile(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_flatfile(&text, path)
}

pub fn parse_flatfile(text: &str, path: &Path) -> Result<Dataset> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (_, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    let (mut dim, mut classes) = (None, None);
    for field in header.split(',') {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| err(1, format!("expected key=value in header, got {field:?}")))?;
        let value: usize = value
            .trim()
            .parse()
            .map_err(|_| err(1, format!("bad integer for {key}: {value:?}")))?;
        match key.trim() {
            "dim" => dim = Some(value),
            "classes" => classes = Some(value),
            other => return Err(err(1, format!("unknown header key {other:?}"))),
        }
    }
    let dim = dim.ok_or_else(|| err(1, "header lacks dim".into()))?;
    let classes = classes.ok_or_else(|| err(1, "header lacks classes".into()))?;
    if dim == 0 || classes == 0 {
        return Err(err(1, "dim and classes must be positive".into()));
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .unwrap_or_default()
            .trim()
            .parse()
            .map_err(|_| err(lineno, "label is not a nonnegative integer".into()))?;
        if label >= classes {
            return Err(err(lineno, format!("label {label} out of range for {classes} classes")));
        }
        let before = data.len();
        for f in fields {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| err(lineno, format!("bad value {f:?}")))?;
            if !v.is_finite() {
                return Err(err(lineno, format!("non-finite value {f:?}")));
            }
            data.push(v);
        }
        if data.len() - before != dim {
            return Err(err(lineno, format!("expected {dim} values, got {}", data.len() - before)));
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(err(1, "no data rows".into()));
    }
    let n = labels.len();
    Dataset::new(DenseMatrix::from_vec(n, dim, data)?, labels, classes)
}

pub fn format_flatfile(data: &Dataset) -> String {
    let mut out = format!("dim={},classes={}\n", data.dim(), data.num_classes);
    for (r, y) in data.labels.iter().enumerate() {
        let _ = write!(out, "{y}");
        for v in data.inputs.row(r) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_flatfile(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_flatfile(data)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn synthetic_is_balanced_and_deterministic() {
        let a = generate_synthetic(2, 3, 10, 0.5, 11).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a.labels.iter().filter(|&&y| y == 0).count(), 10);
        let b = generate_synthetic(2, 3, 10, 0.5, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(2, 3, 10, 0.5, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_spread_collapses_to_centers() {
        let d = generate_synthetic(3, 4, 5, 0.0, 1).unwrap();
        for class in 0..3 {
            let rows: Vec<&[f64]> = (0..d.len()).filter(|&i| d.labels[i] == class).map(|i| d.inputs.row(i)).collect();
            assert!(rows.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn hundred_clients_get_two_classes_each() {
        let d = generate_synthetic(10, 2, 100, 1.0, 3).unwrap();
        let shards = pathological_partition(&d, 100, 2, 0.8, 5).unwrap();
        assert_eq!(shards.len(), 100);
        for s in &shards {
            let labels: BTreeSet<usize> = s.train.labels.iter().chain(&s.test.labels).copied().collect();
            assert_eq!(labels.len(), 2, "client {}", s.client_id);
            assert_eq!(labels.into_iter().collect::<Vec<_>>(), s.class_subset);
        }
        let covered: BTreeSet<usize> = shards.iter().flat_map(|s| s.class_subset.clone()).collect();
        assert_eq!(covered.len(), 10);
    }

    #[test]
    fn single_client_gets_everything() {
        let d = generate_synthetic(3, 2, 10, 1.0, 3).unwrap();
        let shards = pathological_partition(&d, 1, 3, 0.8, 0).unwrap();
        assert_eq!(shards[0].train.len() + shards[0].test.len(), 30);
        assert_eq!(shards[0].data_fraction, 1.0);
    }

    #[test]
    fn fractions_sum_to_one() {
        let d = generate_synthetic(10, 2, 37, 1.0, 3).unwrap();
        let shards = pathological_partition(&d, 20, 2, 0.8, 9).unwrap();
        let total: f64 = shards.iter().map(|s| s.data_fraction).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_many_classes_per_client_is_error() {
        let d = generate_synthetic(3, 2, 10, 1.0, 3).unwrap();
        assert!(pathological_partition(&d, 2, 4, 0.8, 0).is_err());
    }

    #[test]
    fn starved_class_is_error() {
        // 2 examples per class split across up to 10 holders
        let d = generate_synthetic(2, 2, 2, 1.0, 3).unwrap();
        assert!(pathological_partition(&d, 10, 1, 0.8, 0).is_err());
    }

    #[test]
    fn partial_coverage_is_allowed() {
        let d = generate_synthetic(10, 2, 20, 1.0, 3).unwrap();
        let shards = pathological_partition(&d, 2, 2, 0.8, 0).unwrap();
        assert_eq!(shards.len(), 2);
    }

    #[test]
    fn flatfile_parses_and_rejects() {
        let p = Path::new("mem");
        let d = parse_flatfile("dim=2,classes=3\n0,1.0,2.0\n2,-1,0.5\n1,0,0\n", p).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.labels, vec![0, 2, 1]);

        let e = parse_flatfile("dim=2,classes=3\n0,1,2\n3,0,0\n", p).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
        let e = parse_flatfile("dim=2,classes=3\n0,1\n", p).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        let e = parse_flatfile("dim=2,classes=3\n0,1,x\n", p).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        assert!(parse_flatfile("dims=2,classes=3\n", p).is_err());
    }

    #[test]
    fn flatfile_round_trip() {
        let d = generate_synthetic(3, 4, 5, 0.7, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_flatfile(&d, &path).unwrap();
        assert_eq!(load_flatfile(&path).unwrap(), d);
    }
}
