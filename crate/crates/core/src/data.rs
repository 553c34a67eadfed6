//! Datasets: synthetic generators and CSV ingestion.
//!
//! Samples store all modalities concatenated in one feature vector; the
//! bundle's modality list gives the slicing.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modality {
    pub name: String,
    pub dim: usize,
}

impl Modality {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: bool,
    pub group: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" | "valid" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub modalities: Vec<Modality>,
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl DatasetBundle {
    /// Checks shape, label and split invariants.
    pub fn new(
        modalities: Vec<Modality>,
        train: Vec<Sample>,
        validation: Vec<Sample>,
        test: Vec<Sample>,
    ) -> Result<Self> {
        let b = Self {
            modalities,
            train,
            validation,
            test,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::schema("dataset has no modalities"));
        }
        let mut names = HashSet::new();
        for m in &self.modalities {
            if m.dim == 0 {
                return Err(Error::schema(format!("modality '{}' has no features", m.name)));
            }
            if !names.insert(&m.name) {
                return Err(Error::schema(format!("duplicate modality '{}'", m.name)));
            }
        }
        let d = self.total_dim();
        let mut ids = HashSet::new();
        for split in Split::ALL {
            let samples = self.split(split);
            if samples.is_empty() {
                return Err(Error::EmptyDataset(format!("split '{}' is empty", split.as_str())));
            }
            for s in samples {
                if s.features.len() != d {
                    return Err(Error::schema(format!(
                        "sample {} has {} features, expected {d}",
                        s.id,
                        s.features.len()
                    )));
                }
                if !ids.insert(s.id) {
                    return Err(Error::schema(format!("sample id {} appears more than once", s.id)));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn total_dim(&self) -> usize {
        self.modalities.iter().map(|m| m.dim).sum()
    }

    /// Start offset of each modality in the feature vector.
    pub fn offsets(&self) -> Vec<usize> {
        modality_offsets(&self.modalities)
    }

    pub fn has_groups(&self) -> bool {
        Split::ALL
            .iter()
            .flat_map(|s| self.split(*s))
            .any(|s| s.group.is_some())
    }

    pub fn positive_rate(&self) -> f64 {
        let all: Vec<&Sample> = Split::ALL.iter().flat_map(|s| self.split(*s)).collect();
        all.iter().filter(|s| s.label).count() as f64 / all.len().max(1) as f64
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn modality_offsets(modalities: &[Modality]) -> Vec<usize> {
    modalities
        .iter()
        .scan(0, |acc, m| {
            let start = *acc;
            *acc += m.dim;
            Some(start)
        })
        .collect()
}

/// Train/validation/test cut of `n` samples in 60/20/20 order.
fn split_sizes(n: usize) -> (usize, usize) {
    let train = n * 6 / 10;
    let validation = n * 2 / 10;
    (train, validation)
}

fn assemble(modalities: Vec<Modality>, samples: Vec<Sample>) -> Result<DatasetBundle> {
    let (n_train, n_val) = split_sizes(samples.len());
    let mut it = samples.into_iter();
    let train: Vec<Sample> = it.by_ref().take(n_train).collect();
    let validation: Vec<Sample> = it.by_ref().take(n_val).collect();
    let test: Vec<Sample> = it.collect();
    DatasetBundle::new(modalities, train, validation, test)
}

fn check_n(n: usize) -> Result<()> {
    // 60/20/20 needs at least five samples for every split to be non-empty.
    if n < 5 {
        return Err(Error::invalid(format!("need at least 5 samples, got {n}")));
    }
    Ok(())
}

fn noise(sd: f64) -> Result<Option<Normal<f64>>> {
    if !(sd >= 0.0 && sd.is_finite()) {
        return Err(Error::invalid(format!("noise sd must be finite and >= 0, got {sd}")));
    }
    Ok(if sd > 0.0 {
        Some(Normal::new(0.0, sd).map_err(|e| Error::invalid(e.to_string()))?)
    } else {
        None
    })
}

fn push_one_hot(out: &mut Vec<f64>, digit: u8, noise: Option<&Normal<f64>>, rng: &mut impl Rng) {
    for v in 0..10u8 {
        let base = if v == digit { 1.0 } else { 0.0 };
        out.push(base + noise.map_or(0.0, |n| n.sample(rng)));
    }
}

/// Recover a digit from a (possibly noisy) one-hot block by argmax.
pub fn decode_digit(block: &[f64]) -> u8 {
    block
        .iter()
        .enumerate()
        .fold((0usize, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0 as u8
}

/// The four item rules of the digit checklist.
pub fn mnist_rules(digits: [u8; 4]) -> [bool; 4] {
    [
        digits[0].is_multiple_of(2),
        digits[1] % 2 == 1,
        (4..=6).contains(&digits[2]),
        digits[3] >= 6,
    ]
}

/// Positive iff at least three of the four rules hold.
pub fn mnist_label(digits: [u8; 4]) -> bool {
    mnist_rules(digits).iter().filter(|&&r| r).count() >= 3
}

/// Four one-hot digit modalities with additive Gaussian noise.
pub fn gen_mnist_analog(n: usize, noise_sd: f64, seed: u64) -> Result<DatasetBundle> {
    check_n(n)?;
    let noise = noise(noise_sd)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modalities = (1..=4).map(|k| Modality::new(format!("image{k}"), 10)).collect();
    let samples = (0..n as u64)
        .map(|id| {
            let digits: [u8; 4] = std::array::from_fn(|_| rng.random_range(0..10u8));
            let mut features = Vec::with_capacity(40);
            for &d in &digits {
                push_one_hot(&mut features, d, noise.as_ref(), &mut rng);
            }
            Sample {
                id,
                features,
                label: mnist_label(digits),
                group: None,
            }
        })
        .collect();
    assemble(modalities, samples)
}

/// A predicate on one digit of a sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub struct DigitRule {
    /// Index of the digit the rule reads.
    pub digit: usize,
    pub test: DigitTest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DigitTest {
    Even,
    Odd,
    AtLeast(u8),
    InSet(Vec<u8>),
}

impl DigitRule {
    pub fn new(digit: usize, test: DigitTest) -> Self {
        Self { digit, test }
    }

    pub fn eval(&self, digits: &[u8]) -> bool {
        let d = digits[self.digit];
        match &self.test {
            DigitTest::Even => d.is_multiple_of(2),
            DigitTest::Odd => d % 2 == 1,
            DigitTest::AtLeast(t) => d >= *t,
            DigitTest::InSet(set) => set.contains(&d),
        }
    }

    pub fn describe(&self) -> String {
        let name = format!("D{}", self.digit + 1);
        match &self.test {
            DigitTest::Even => format!("{name} is even"),
            DigitTest::Odd => format!("{name} is odd"),
            DigitTest::AtLeast(t) => format!("{name} >= {t}"),
            DigitTest::InSet(s) => format!("{name} in {s:?}"),
        }
    }
}

/// A balanced tree of digit rules used to label synthetic data.
///
/// Rules are stored layer by layer; layer `l` (1-based) holds `2^(l-1)`
/// rules, and the node at `(l, k)` goes to `(l+1, 2k-1)` when its rule is
/// false and to `(l+1, 2k)` when true. The prediction is the truth value of
/// the rule reached on the last rule layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthTree {
    pub depth: usize,
    pub rules: Vec<DigitRule>,
}

impl GroundTruthTree {
    pub fn new(depth: usize, rules: Vec<DigitRule>) -> Result<Self> {
        if depth < 2 {
            return Err(Error::invalid("tree depth must be at least 2"));
        }
        let expected = (1usize << (depth - 1)) - 1;
        if rules.len() != expected {
            return Err(Error::invalid(format!(
                "depth {depth} tree needs {expected} rules, got {}",
                rules.len()
            )));
        }
        Ok(Self { depth, rules })
    }

    /// Root "D1 even"; D1 odd goes to "D1 >= 5", D1 even goes to "D2 odd".
    pub fn default_for_depth(depth: usize) -> Result<Self> {
        match depth {
            2 => Self::new(2, vec![DigitRule::new(0, DigitTest::Even)]),
            3 => Self::new(
                3,
                vec![
                    DigitRule::new(0, DigitTest::Even),
                    DigitRule::new(0, DigitTest::AtLeast(5)),
                    DigitRule::new(1, DigitTest::Odd),
                ],
            ),
            other => Err(Error::invalid(format!(
                "no default ground-truth tree for depth {other}; supply rules explicitly"
            ))),
        }
    }

    pub fn max_digit(&self) -> usize {
        self.rules.iter().map(|r| r.digit).max().unwrap_or(0)
    }

    pub fn eval(&self, digits: &[u8]) -> bool {
        let mut k = 1usize;
        for layer in 1..self.depth {
            let idx = (1usize << (layer - 1)) - 1 + (k - 1);
            let truth = self.rules[idx].eval(digits);
            if layer == self.depth - 1 {
                return truth;
            }
            k = if truth { 2 * k } else { 2 * k - 1 };
        }
        unreachable!("depth >= 2 always reaches a rule layer")
    }
}

/// Two one-hot digits labelled by `tree` (default: the depth-3 tree).
pub fn gen_tree_task(n: usize, seed: u64, tree: &GroundTruthTree) -> Result<DatasetBundle> {
    check_n(n)?;
    let digits_needed = (tree.max_digit() + 1).max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modalities = (1..=digits_needed)
        .map(|k| Modality::new(format!("d{k}"), 10))
        .collect();
    let samples = (0..n as u64)
        .map(|id| {
            let digits: Vec<u8> = (0..digits_needed).map(|_| rng.random_range(0..10u8)).collect();
            let mut features = Vec::with_capacity(10 * digits_needed);
            for &d in &digits {
                push_one_hot(&mut features, d, None, &mut rng);
            }
            Sample {
                id,
                features,
                label: tree.eval(&digits),
                group: None,
            }
        })
        .collect();
    assemble(modalities, samples)
}

/// Output of the default depth-3 tree applied to the digit pair `(d, d)`.
pub fn single_digit_tree(d: u8) -> bool {
    GroundTruthTree::default_for_depth(3)
        .expect("default depth-3 tree")
        .eval(&[d, d])
}

/// Three one-hot digits, one tree per digit, positive iff at least two trees fire.
pub fn gen_checklist_of_trees_task(n: usize, seed: u64) -> Result<DatasetBundle> {
    check_n(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modalities = (1..=3).map(|k| Modality::new(format!("d{k}"), 10)).collect();
    let samples = (0..n as u64)
        .map(|id| {
            let digits: [u8; 3] = std::array::from_fn(|_| rng.random_range(0..10u8));
            let mut features = Vec::with_capacity(30);
            for &d in &digits {
                push_one_hot(&mut features, d, None, &mut rng);
            }
            let fired = digits.iter().filter(|&&d| single_digit_tree(d)).count();
            Sample {
                id,
                features,
                label: fired >= 2,
                group: None,
            }
        })
        .collect();
    assemble(modalities, samples)
}

/// Two groups whose base rates differ through a nuisance feature.
///
/// Shared features `x1, x2 ~ N(0, 1)`; nuisance `z = bias * (+1 | -1) + N(0, 1)`
/// with the sign set by the group; label `1[x1 + x2 + z + e > 0]` with
/// label noise `e ~ N(0, 1)`. Groups alternate, so the split is 50/50.
pub fn gen_biased_groups(n: usize, bias: f64, seed: u64) -> Result<DatasetBundle> {
    check_n(n)?;
    if !bias.is_finite() {
        return Err(Error::invalid("bias must be finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let modalities = vec![Modality::new("shared", 2), Modality::new("nuisance", 1)];
    let samples = (0..n as u64)
        .map(|id| {
            let group = id % 2;
            let sign = if group == 1 { 1.0 } else { -1.0 };
            let x1 = std.sample(&mut rng);
            let x2 = std.sample(&mut rng);
            let z = bias * sign + std.sample(&mut rng);
            let e = std.sample(&mut rng);
            Sample {
                id,
                features: vec![x1, x2, z],
                label: x1 + x2 + z + e > 0.0,
                group: Some(if group == 1 { "b" } else { "a" }.to_string()),
            }
        })
        .collect();
    assemble(modalities, samples)
}

/// Column mapping for [`load_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaConfig {
    pub modalities: Vec<ModalityColumns>,
    pub label_column: String,
    #[serde(default)]
    pub group_column: Option<String>,
    #[serde(default)]
    pub id_column: Option<String>,
    pub split: SplitRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityColumns {
    pub name: String,
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitRule {
    /// Column holding `train`, `validation` or `test`.
    Column(String),
    /// Shuffled ratio split.
    Ratios {
        train: f64,
        validation: f64,
        test: f64,
        seed: u64,
    },
}

impl SchemaConfig {
    /// Mapping for files written by [`write_csv`], read from a header row.
    pub fn from_dataset_header(header: &[String]) -> Result<Self> {
        let mut modalities: Vec<ModalityColumns> = Vec::new();
        for col in header {
            if let Some((name, _)) = col.split_once("__") {
                match modalities.iter_mut().find(|m| m.name == name) {
                    Some(m) => m.columns.push(col.clone()),
                    None => modalities.push(ModalityColumns {
                        name: name.to_string(),
                        columns: vec![col.clone()],
                    }),
                }
            }
        }
        for required in ["sample_id", "split", "group", "label"] {
            if !header.iter().any(|h| h == required) {
                return Err(Error::schema(format!("dataset CSV lacks column '{required}'")));
            }
        }
        Ok(Self {
            modalities,
            label_column: "label".into(),
            group_column: Some("group".into()),
            id_column: Some("sample_id".into()),
            split: SplitRule::Column("split".into()),
        })
    }
}

fn fmt_f64(v: f64) -> String {
    // Shortest representation that parses back to the same bits.
    format!("{v}")
}

/// Write a bundle as `sample_id,split,group,label,<modality>__<j>...`.
pub fn write_csv(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut header = vec!["sample_id".to_string(), "split".into(), "group".into(), "label".into()];
    for m in &bundle.modalities {
        header.extend((0..m.dim).map(|j| format!("{}__{j}", m.name)));
    }
    let mut out = header.join(",");
    out.push('\n');
    for split in Split::ALL {
        for s in bundle.split(split) {
            out.push_str(&format!(
                "{},{},{},{}",
                s.id,
                split.as_str(),
                s.group.as_deref().unwrap_or(""),
                u8::from(s.label)
            ));
            for v in &s.features {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            out.push('\n');
        }
    }
    w.write_all(out.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Read a CSV written by [`write_csv`].
pub fn read_dataset_csv(path: &Path) -> Result<DatasetBundle> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::parse(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let config = SchemaConfig::from_dataset_header(&header)?;
    load_csv(path, &config)
}

/// Load a tabular CSV, mapping columns to modalities per `config`.
pub fn load_csv(path: &Path, config: &SchemaConfig) -> Result<DatasetBundle> {
    if config.modalities.is_empty() {
        return Err(Error::schema("schema config lists no modalities"));
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::parse(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let index: BTreeMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let col = |name: &str| -> Result<usize> {
        index
            .get(name)
            .copied()
            .ok_or_else(|| Error::schema(format!("{}: missing column '{name}'", path.display())))
    };

    let mut feature_cols = Vec::new();
    let mut modalities = Vec::new();
    for m in &config.modalities {
        if m.columns.is_empty() {
            return Err(Error::schema(format!("modality '{}' lists no columns", m.name)));
        }
        for c in &m.columns {
            feature_cols.push(col(c)?);
        }
        modalities.push(Modality::new(m.name.clone(), m.columns.len()));
    }
    let label_col = col(&config.label_column)?;
    let group_col = config.group_column.as_deref().map(col).transpose()?;
    let id_col = config.id_column.as_deref().map(col).transpose()?;
    let split_col = match &config.split {
        SplitRule::Column(c) => Some(col(c)?),
        SplitRule::Ratios { .. } => None,
    };

    let mut rows: Vec<(Sample, Option<Split>)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // Row 1 is the header.
        let row_no = i + 2;
        let record = record.map_err(|e| Error::parse(path, format!("row {row_no}: {e}")))?;
        let field = |c: usize| record.get(c).unwrap_or("").trim();
        let mut features = Vec::with_capacity(feature_cols.len());
        for &c in &feature_cols {
            let raw = field(c);
            let v: f64 = raw.parse().map_err(|_| {
                Error::parse(
                    path,
                    format!("row {row_no}: column '{}' value '{raw}' is not a number", header[c]),
                )
            })?;
            features.push(v);
        }
        let label = match field(label_col) {
            "1" | "1.0" => true,
            "0" | "0.0" => false,
            other => {
                return Err(Error::parse(
                    path,
                    format!("row {row_no}: label '{other}' is not binary (expected 0 or 1)"),
                ))
            }
        };
        let group = group_col.map(field).filter(|g| !g.is_empty()).map(str::to_string);
        let id = match id_col {
            Some(c) => field(c)
                .parse()
                .map_err(|_| Error::parse(path, format!("row {row_no}: bad sample id '{}'", field(c))))?,
            None => i as u64,
        };
        let split = split_col
            .map(|c| field(c).parse::<Split>().map_err(|e| Error::parse(path, format!("row {row_no}: {e}"))))
            .transpose()?;
        rows.push((Sample { id, features, label, group }, split));
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no data rows", path.display())));
    }

    let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
    match &config.split {
        SplitRule::Column(_) => {
            for (s, split) in rows {
                match split.expect("split column present") {
                    Split::Train => train.push(s),
                    Split::Validation => validation.push(s),
                    Split::Test => test.push(s),
                }
            }
        }
        SplitRule::Ratios {
            train: a,
            validation: b,
            test: c,
            seed,
        } => {
            let total = a + b + c;
            if !(total > 0.0) || [a, b, c].iter().any(|r| **r < 0.0) {
                return Err(Error::schema("split ratios must be non-negative with a positive sum"));
            }
            let mut samples: Vec<Sample> = rows.into_iter().map(|(s, _)| s).collect();
            samples.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            let n = samples.len();
            let n_train = ((a / total) * n as f64).round() as usize;
            let n_val = (((a + b) / total) * n as f64).round() as usize - n_train;
            let mut it = samples.into_iter();
            train = it.by_ref().take(n_train).collect();
            validation = it.by_ref().take(n_val).collect();
            test = it.collect();
        }
    }
    DatasetBundle::new(modalities, train, validation, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all(b: &DatasetBundle) -> Vec<&Sample> {
        Split::ALL.iter().flat_map(|s| b.split(*s)).collect()
    }

    fn digits_of(s: &Sample, k: usize) -> Vec<u8> {
        (0..k).map(|i| decode_digit(&s.features[10 * i..10 * i + 10])).collect()
    }

    #[test]
    fn mnist_rule_examples() {
        assert_eq!(mnist_rules([4, 3, 5, 2]), [true, true, true, false]);
        assert!(mnist_label([4, 3, 5, 2]));
        assert_eq!(mnist_rules([1, 2, 0, 0]), [false; 4]);
        assert!(!mnist_label([1, 2, 0, 0]));
    }

    #[test]
    fn mnist_analog_shape_and_labels() {
        let b = gen_mnist_analog(1000, 0.0, 3).unwrap();
        assert_eq!(b.modalities.len(), 4);
        assert_eq!((b.train.len(), b.validation.len(), b.test.len()), (600, 200, 200));
        for s in all(&b) {
            assert_eq!(s.features.iter().filter(|&&v| v == 1.0).count(), 4);
            let d = digits_of(s, 4);
            // independent re-evaluation of the rule list
            let hits = [d[0] % 2 == 0, d[1] % 2 == 1, d[2] >= 4 && d[2] <= 6, d[3] > 5]
                .iter()
                .filter(|&&h| h)
                .count();
            assert_eq!(s.label, hits >= 3);
        }
    }

    #[test]
    fn mnist_analog_positive_rate() {
        let b = gen_mnist_analog(10_000, 0.1, 11).unwrap();
        assert!((b.positive_rate() - 0.205).abs() <= 0.02, "{}", b.positive_rate());
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(gen_mnist_analog(50, 0.2, 9).unwrap(), gen_mnist_analog(50, 0.2, 9).unwrap());
        assert_ne!(gen_mnist_analog(50, 0.2, 9).unwrap(), gen_mnist_analog(50, 0.2, 10).unwrap());
        assert_eq!(gen_biased_groups(50, 1.0, 1).unwrap(), gen_biased_groups(50, 1.0, 1).unwrap());
        assert_ne!(gen_checklist_of_trees_task(50, 1).unwrap(), gen_checklist_of_trees_task(50, 2).unwrap());
    }

    #[test]
    fn no_split_leakage() {
        let b = gen_mnist_analog(500, 0.1, 1).unwrap();
        let ids: HashSet<u64> = all(&b).iter().map(|s| s.id).collect();
        assert_eq!(ids.len(), 500);
    }

    #[test]
    fn tree_examples() {
        let t = GroundTruthTree::default_for_depth(3).unwrap();
        assert!(t.eval(&[4, 7]));
        assert!(!t.eval(&[4, 6]));
        assert!(!t.eval(&[1, 3]));
        assert!(t.eval(&[7, 0]));
        assert!(GroundTruthTree::default_for_depth(5).is_err());
        assert!(GroundTruthTree::new(3, vec![DigitRule::new(0, DigitTest::Odd)]).is_err());
    }

    #[test]
    fn tree_task_labels_and_balance() {
        // enumeration over the 100 digit pairs
        let positives = (0..10u8)
            .flat_map(|a| (0..10u8).map(move |b| (a, b)))
            .filter(|&(a, b)| if a % 2 == 0 { b % 2 == 1 } else { a >= 5 })
            .count();
        assert_eq!(positives, 55);
        let t = GroundTruthTree::default_for_depth(3).unwrap();
        let b = gen_tree_task(10_000, 5, &t).unwrap();
        for s in all(&b) {
            let d = digits_of(s, 2);
            let expected = if d[0] % 2 == 0 { d[1] % 2 == 1 } else { d[0] >= 5 };
            assert_eq!(s.label, expected);
        }
        let rate = b.positive_rate();
        assert!((0.3..=0.7).contains(&rate), "{rate}");
        assert!((rate - 0.55).abs() < 0.02);
    }

    #[test]
    fn checklist_of_trees_rate() {
        // exact enumeration over the 1000 digit triples
        let fires: Vec<bool> = (0..10u8).map(single_digit_tree).collect();
        assert_eq!(fires.iter().filter(|&&f| f).count(), 3);
        let mut pos = 0;
        for a in 0..10 {
            for b in 0..10 {
                for c in 0..10 {
                    if [fires[a], fires[b], fires[c]].iter().filter(|&&f| f).count() >= 2 {
                        pos += 1;
                    }
                }
            }
        }
        assert_eq!(pos, 216);
        let b = gen_checklist_of_trees_task(20_000, 4).unwrap();
        assert!((b.positive_rate() - 0.216).abs() < 0.015);
        for s in all(&b) {
            let d = digits_of(s, 3);
            let fired = d.iter().filter(|&&x| x == 5 || x == 7 || x == 9).count();
            assert_eq!(s.label, fired >= 2);
        }
    }

    #[test]
    fn biased_groups_contract() {
        let b = gen_biased_groups(2000, 1.0, 8).unwrap();
        for split in Split::ALL {
            let groups: HashSet<_> = b.split(split).iter().filter_map(|s| s.group.clone()).collect();
            assert_eq!(groups.len(), 2);
        }
        let n_b = all(&b).iter().filter(|s| s.group.as_deref() == Some("b")).count();
        assert!((n_b as f64 / 2000.0 - 0.5).abs() <= 0.02);
        let rate = |g: &str| {
            let s: Vec<_> = all(&b).into_iter().filter(|s| s.group.as_deref() == Some(g)).collect();
            s.iter().filter(|s| s.label).count() as f64 / s.len() as f64
        };
        assert!(rate("b") > rate("a") + 0.2);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let b = gen_biased_groups(40, 1.0, 2).unwrap();
        write_csv(&b, &path).unwrap();
        let back = read_dataset_csv(&path).unwrap();
        assert_eq!(back, b);
        let m = gen_mnist_analog(30, 0.3, 2).unwrap();
        write_csv(&m, &path).unwrap();
        assert_eq!(read_dataset_csv(&path).unwrap(), m);
    }

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn tabular_config(k: usize) -> SchemaConfig {
        SchemaConfig {
            modalities: (0..k)
                .map(|i| ModalityColumns {
                    name: format!("f{i}"),
                    columns: vec![format!("f{i}")],
                })
                .collect(),
            label_column: "y".into(),
            group_column: None,
            id_column: None,
            split: SplitRule::Ratios {
                train: 0.6,
                validation: 0.2,
                test: 0.2,
                seed: 1,
            },
        }
    }

    #[test]
    fn tabular_ten_modalities() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = (0..10).map(|i| format!("f{i}")).collect::<Vec<_>>().join(",") + ",y\n";
        for r in 0..20 {
            let row: Vec<String> = (0..10).map(|i| format!("{}", (r * 10 + i) as f64 / 7.0)).collect();
            text.push_str(&format!("{},{}\n", row.join(","), r % 2));
        }
        let p = write(dir.path(), "t.csv", &text);
        let b = load_csv(&p, &tabular_config(10)).unwrap();
        assert_eq!(b.modalities.len(), 10);
        assert!(b.modalities.iter().all(|m| m.dim == 1));
        assert_eq!((b.train.len(), b.validation.len(), b.test.len()), (12, 4, 4));
    }

    #[test]
    fn csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let header_only = write(dir.path(), "h.csv", "f0,f1,y\n");
        assert!(matches!(load_csv(&header_only, &tabular_config(2)), Err(Error::EmptyDataset(_))));

        let missing = write(dir.path(), "m.csv", "f0,y\n1,0\n");
        let err = load_csv(&missing, &tabular_config(2)).unwrap_err();
        assert!(err.to_string().contains("missing column 'f1'"), "{err}");

        let nonbinary = write(dir.path(), "n.csv", "f0,y\n1,2\n");
        let err = load_csv(&nonbinary, &tabular_config(1)).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
        assert!(err.to_string().contains("not binary"), "{err}");

        let bad_num = write(dir.path(), "b.csv", "f0,y\n1,0\n1,1\nabc,0\n");
        let err = load_csv(&bad_num, &tabular_config(1)).unwrap_err();
        assert!(err.to_string().contains("row 4"), "{err}");

        let tiny = write(dir.path(), "t.csv", "f0,y\n1,0\n");
        assert!(matches!(load_csv(&tiny, &tabular_config(1)), Err(Error::EmptyDataset(_))));
    }
}
