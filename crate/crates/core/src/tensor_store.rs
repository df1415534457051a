//! On-disk formats for cached activations, spatial maps, heads, manifests
//! and prediction tables.
//!
//! Tensor container (little-endian):
//! - magic: `SPTF1`
//! - header_len: u32
//! - header: UTF-8 JSON `{"dtype":"f32","shape":[...]}`
//! - payload: f32 * product(shape), row-major
//!
//! Every invariant is checked when a file is loaded, so downstream modules
//! can assume finite values and consistent shapes.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array4, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 5] = b"SPTF1";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt tensor payload: expected {expected} bytes, found {found}")]
    Corruption { expected: usize, found: usize },
    #[error("unsupported dtype {0:?} (only f32 is supported)")]
    Unsupported(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("prediction table error: {0}")]
    Predictions(String),
}

pub type Result<T> = std::result::Result<T, StoreError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    dtype: String,
    shape: Vec<usize>,
}

/// A dense f32 tensor of rank 2 or 4.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl TensorFile {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let t = Self { shape, data };
        t.validate()?;
        Ok(t)
    }

    pub fn from_matrix(m: &Array2<f32>) -> Result<Self> {
        Self::new(m.shape().to_vec(), m.iter().copied().collect())
    }

    pub fn dtype(&self) -> &'static str {
        "f32"
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_matrix(self) -> Result<Array2<f32>> {
        if self.shape.len() != 2 {
            return Err(StoreError::Invariant(format!(
                "expected a rank-2 tensor, found shape {:?}",
                self.shape
            )));
        }
        Array2::from_shape_vec((self.shape[0], self.shape[1]), self.data)
            .map_err(|e| StoreError::Invariant(e.to_string()))
    }

    pub fn into_array4(self) -> Result<Array4<f32>> {
        if self.shape.len() != 4 {
            return Err(StoreError::Invariant(format!(
                "expected a rank-4 tensor, found shape {:?}",
                self.shape
            )));
        }
        let s = &self.shape;
        Array4::from_shape_vec((s[0], s[1], s[2], s[3]), self.data)
            .map_err(|e| StoreError::Invariant(e.to_string()))
    }

    fn element_count(shape: &[usize]) -> Result<usize> {
        shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| StoreError::Format(format!("shape {shape:?} overflows")))
    }

    fn validate(&self) -> Result<()> {
        if self.shape.len() != 2 && self.shape.len() != 4 {
            return Err(StoreError::Invariant(format!(
                "rank must be 2 or 4, found shape {:?}",
                self.shape
            )));
        }
        if self.shape.iter().any(|&d| d == 0) {
            return Err(StoreError::Invariant(format!(
                "shape dimensions must be positive, found {:?}",
                self.shape
            )));
        }
        let n = Self::element_count(&self.shape)?;
        if n != self.data.len() {
            return Err(StoreError::Invariant(format!(
                "shape {:?} needs {n} values, found {}",
                self.shape,
                self.data.len()
            )));
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::Invariant(format!(
                "non-finite value {} at flat index {pos}",
                self.data[pos]
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = serde_json::to_vec(&TensorHeader {
            dtype: self.dtype().to_string(),
            shape: self.shape.clone(),
        })
        .map_err(|e| StoreError::Format(e.to_string()))?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| StoreError::Format("header too large".into()))?;
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(StoreError::Format("missing SPTF1 magic".into()));
        }
        let rest = &bytes[MAGIC.len()..];
        if rest.len() < 4 {
            return Err(StoreError::Format("truncated header length".into()));
        }
        let header_len = u32::from_le_bytes([rest[0], rest[1], rest[2], rest[3]]) as usize;
        let rest = &rest[4..];
        if rest.len() < header_len {
            return Err(StoreError::Format(format!(
                "header length {header_len} exceeds file size"
            )));
        }
        let header: TensorHeader = serde_json::from_slice(&rest[..header_len])
            .map_err(|e| StoreError::Format(format!("bad header: {e}")))?;
        if header.dtype != "f32" {
            return Err(StoreError::Unsupported(header.dtype));
        }
        let payload = &rest[header_len..];
        let expected = Self::element_count(&header.shape)?
            .checked_mul(4)
            .ok_or_else(|| StoreError::Format("payload size overflows".into()))?;
        if payload.len() != expected {
            return Err(StoreError::Corruption {
                expected,
                found: payload.len(),
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(header.shape, data)
    }
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    TensorFile::from_bytes(&bytes)
}

pub fn write_tensor(tensor: &TensorFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = tensor.to_bytes()?;
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(format!("unknown split {other:?} (expected train or val)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub label: usize,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asset_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub images: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(StoreError::Manifest("num_classes must be positive".into()));
        }
        if self.class_names.len() != self.num_classes {
            return Err(StoreError::Manifest(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        let mut seen = HashMap::with_capacity(self.images.len());
        let mut train_per_class = vec![0usize; self.num_classes];
        for (row, img) in self.images.iter().enumerate() {
            if let Some(prev) = seen.insert(img.image_id.as_str(), row) {
                return Err(StoreError::Manifest(format!(
                    "duplicate image_id {:?} at rows {prev} and {row}",
                    img.image_id
                )));
            }
            if img.label >= self.num_classes {
                return Err(StoreError::Manifest(format!(
                    "image {:?} has label {} but num_classes is {}",
                    img.image_id, img.label, self.num_classes
                )));
            }
            if img.split == Split::Train {
                train_per_class[img.label] += 1;
            }
        }
        if let Some(c) = train_per_class.iter().position(|&n| n == 0) {
            return Err(StoreError::Manifest(format!(
                "class {c} ({}) has no train images",
                self.class_names[c]
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)
            .map_err(|e| StoreError::Manifest(format!("invalid manifest JSON: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text =
            serde_json::to_string_pretty(self).map_err(|e| StoreError::Manifest(e.to_string()))?;
        fs::write(path, text).map_err(io_err(path))
    }
}

/// Cached penultimate-layer activations, one row per manifest image.
#[derive(Debug, Clone)]
pub struct ActivationSet {
    manifest: DatasetManifest,
    matrix: Array2<f32>,
    index: HashMap<String, usize>,
}

impl ActivationSet {
    pub fn new(manifest: DatasetManifest, matrix: Array2<f32>) -> Result<Self> {
        manifest.validate()?;
        if matrix.nrows() != manifest.images.len() {
            return Err(StoreError::Consistency(format!(
                "manifest lists {} images but activations have {} rows",
                manifest.images.len(),
                matrix.nrows()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(StoreError::Invariant("non-finite activation".into()));
        }
        let index = manifest
            .images
            .iter()
            .enumerate()
            .map(|(i, r)| (r.image_id.clone(), i))
            .collect();
        Ok(Self {
            manifest,
            matrix,
            index,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn matrix(&self) -> &Array2<f32> {
        &self.matrix
    }

    pub fn num_images(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn record(&self, row: usize) -> &ImageRecord {
        &self.manifest.images[row]
    }

    pub fn row(&self, row: usize) -> ArrayView1<'_, f32> {
        self.matrix.row(row)
    }

    pub fn row_of(&self, image_id: &str) -> Option<usize> {
        self.index.get(image_id).copied()
    }

    /// Row indices of `class` in `split`, in manifest order.
    pub fn rows_of(&self, class: usize, split: Split) -> Vec<usize> {
        self.manifest
            .images
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == class && r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn rows_in_split(&self, split: Split) -> Vec<usize> {
        self.manifest
            .images
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Linear classification head `logits = x · weights + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    /// D×C
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl HeadWeights {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.ncols() != bias.len() {
            return Err(StoreError::Consistency(format!(
                "head has {} classes but bias has length {}",
                weights.ncols(),
                bias.len()
            )));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(StoreError::Invariant("non-finite head parameter".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(num_features: usize, num_classes: usize) -> Self {
        Self {
            weights: Array2::zeros((num_features, num_classes)),
            bias: Array1::zeros(num_classes),
        }
    }

    pub fn num_features(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.ncols()
    }

    pub fn logits(&self, x: ArrayView1<'_, f32>) -> Array1<f64> {
        let mut out = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            let xi = f64::from(xi);
            if xi != 0.0 {
                out.scaled_add(xi, &self.weights.row(i));
            }
        }
        out
    }

    /// Arg-max class; ties go to the smaller class index.
    pub fn predict(&self, x: ArrayView1<'_, f32>) -> usize {
        let logits = self.logits(x);
        let mut best = 0;
        for c in 1..logits.len() {
            if logits[c] > logits[best] {
                best = c;
            }
        }
        best
    }

    /// Head files hold a D×C matrix (zero bias) or a (D+1)×C matrix whose
    /// last row is the bias.
    pub fn from_tensor(t: TensorFile, num_features: usize) -> Result<Self> {
        let m = t.into_matrix()?;
        let rows = m.nrows();
        let m = m.mapv(f64::from);
        if rows == num_features {
            let c = m.ncols();
            Self::new(m, Array1::zeros(c))
        } else if rows == num_features + 1 {
            let weights = m.slice(ndarray::s![..num_features, ..]).to_owned();
            let bias = m.row(num_features).to_owned();
            Self::new(weights, bias)
        } else {
            Err(StoreError::Consistency(format!(
                "head has {rows} rows but activations have {num_features} features"
            )))
        }
    }

    /// Always writes the (D+1)×C layout.
    pub fn to_tensor(&self) -> Result<TensorFile> {
        let (d, c) = self.weights.dim();
        let mut data = Vec::with_capacity((d + 1) * c);
        data.extend(self.weights.iter().map(|&v| v as f32));
        data.extend(self.bias.iter().map(|&v| v as f32));
        TensorFile::new(vec![d + 1, c], data)
    }

    pub fn load(path: impl AsRef<Path>, num_features: usize) -> Result<Self> {
        Self::from_tensor(load_tensor(path)?, num_features)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_tensor(&self.to_tensor()?, path)
    }
}

/// Spatial activation maps, N×D×H'×W'.
#[derive(Debug, Clone)]
pub struct SpatialActivationSet {
    maps: Array4<f32>,
}

impl SpatialActivationSet {
    pub fn new(maps: Array4<f32>) -> Result<Self> {
        if maps.iter().any(|v| !v.is_finite()) {
            return Err(StoreError::Invariant("non-finite spatial activation".into()));
        }
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &Array4<f32> {
        &self.maps
    }

    pub fn num_images(&self) -> usize {
        self.maps.dim().0
    }

    pub fn num_features(&self) -> usize {
        self.maps.dim().1
    }

    /// Spatial size (H', W').
    pub fn map_size(&self) -> (usize, usize) {
        let (_, _, h, w) = self.maps.dim();
        (h, w)
    }

    pub fn map(&self, row: usize, feature: usize) -> ndarray::ArrayView2<'_, f32> {
        self.maps.slice(ndarray::s![row, feature, .., ..])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionTable {
    pub model_name: String,
    pub entries: BTreeMap<String, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    image_id: String,
    predicted_class: usize,
}

impl PredictionTable {
    pub fn new(model_name: impl Into<String>) -> Self {
        Self {
            model_name: model_name.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, image_id: &str) -> Option<usize> {
        self.entries.get(image_id).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        let ids: std::collections::HashSet<&str> =
            manifest.images.iter().map(|r| r.image_id.as_str()).collect();
        for (id, &class) in &self.entries {
            if class >= manifest.num_classes {
                return Err(StoreError::Predictions(format!(
                    "{}: image {id:?} predicted class {class} >= {}",
                    self.model_name, manifest.num_classes
                )));
            }
            if !ids.contains(id.as_str()) {
                return Err(StoreError::Predictions(format!(
                    "{}: image {id:?} is not in manifest {:?}",
                    self.model_name, manifest.name
                )));
            }
        }
        Ok(())
    }

    pub fn from_csv_reader<R: io::Read>(model_name: &str, reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| StoreError::Predictions(e.to_string()))?
            .clone();
        if headers.len() != 2 || &headers[0] != "image_id" || &headers[1] != "predicted_class" {
            return Err(StoreError::Predictions(format!(
                "expected header image_id,predicted_class, found {:?}",
                headers.iter().collect::<Vec<_>>()
            )));
        }
        let mut table = Self::new(model_name);
        for row in rdr.deserialize() {
            let row: PredictionRow = row.map_err(|e| StoreError::Predictions(e.to_string()))?;
            if table
                .entries
                .insert(row.image_id.clone(), row.predicted_class)
                .is_some()
            {
                return Err(StoreError::Predictions(format!(
                    "{model_name}: duplicate prediction for {:?}",
                    row.image_id
                )));
            }
        }
        Ok(table)
    }

    /// Model name defaults to the file stem.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into());
        let f = fs::File::open(path).map_err(io_err(path))?;
        Self::from_csv_reader(&name, f)
    }

    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for (id, &class) in &self.entries {
            w.serialize(PredictionRow {
                image_id: id.clone(),
                predicted_class: class,
            })
            .map_err(|e| StoreError::Predictions(e.to_string()))?;
        }
        // an empty table still carries its header
        if self.entries.is_empty() {
            w.write_record(["image_id", "predicted_class"])
                .map_err(|e| StoreError::Predictions(e.to_string()))?;
        }
        w.flush().map_err(|e| StoreError::Predictions(e.to_string()))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = fs::File::create(path).map_err(io_err(path))?;
        self.write_csv(f)
    }

    /// Predictions of `head` on every image of `acts`.
    pub fn from_head(model_name: &str, acts: &ActivationSet, head: &HeadWeights) -> Self {
        let entries = (0..acts.num_images())
            .map(|i| (acts.record(i).image_id.clone(), head.predict(acts.row(i))))
            .collect();
        Self {
            model_name: model_name.to_string(),
            entries,
        }
    }
}

/// Cross-checked activations plus the optional spatial maps and head.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub acts: ActivationSet,
    pub spatial: Option<SpatialActivationSet>,
    pub head: Option<HeadWeights>,
}

pub fn load_dataset(
    manifest_path: impl AsRef<Path>,
    activations_path: impl AsRef<Path>,
    spatial_path: Option<&Path>,
    head_path: Option<&Path>,
) -> Result<DatasetBundle> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let matrix = load_tensor(activations_path)?.into_matrix()?;
    let spatial = spatial_path
        .map(|p| load_tensor(p).and_then(TensorFile::into_array4))
        .transpose()?;
    let head = head_path.map(load_tensor).transpose()?;
    assemble_bundle(manifest, matrix, spatial, head)
}

/// Shape cross-checks shared by [`load_dataset`] and in-memory callers.
pub fn assemble_bundle(
    manifest: DatasetManifest,
    matrix: Array2<f32>,
    spatial: Option<Array4<f32>>,
    head: Option<TensorFile>,
) -> Result<DatasetBundle> {
    let acts = ActivationSet::new(manifest, matrix)?;
    let (n, d) = (acts.num_images(), acts.num_features());
    let spatial = match spatial {
        Some(maps) => {
            let (sn, sd, _, _) = maps.dim();
            if sn != n || sd != d {
                return Err(StoreError::Consistency(format!(
                    "spatial maps are {sn}×{sd} but activations are {n}×{d}"
                )));
            }
            Some(SpatialActivationSet::new(maps)?)
        }
        None => None,
    };
    let head = match head {
        Some(t) => {
            let h = HeadWeights::from_tensor(t, d)?;
            if h.num_classes() != acts.num_classes() {
                return Err(StoreError::Consistency(format!(
                    "head has {} classes but manifest has {}",
                    h.num_classes(),
                    acts.num_classes()
                )));
            }
            Some(h)
        }
        None => None,
    };
    Ok(DatasetBundle {
        acts,
        spatial,
        head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(labels: &[usize], num_classes: usize) -> DatasetManifest {
        DatasetManifest {
            name: "t".into(),
            num_classes,
            class_names: (0..num_classes).map(|c| format!("c{c}")).collect(),
            images: labels
                .iter()
                .enumerate()
                .map(|(i, &label)| ImageRecord {
                    image_id: format!("img{i}"),
                    label,
                    split: Split::Train,
                    asset_path: None,
                })
                .collect(),
        }
    }

    #[test]
    fn shape_2x3_roundtrip_reads_row_major() {
        let t = TensorFile::new(vec![2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        let back = TensorFile::from_bytes(&t.to_bytes().unwrap()).unwrap();
        let m = back.into_matrix().unwrap();
        assert_eq!(m, ndarray::array![[0.0f32, 1.0, 2.0], [3.0, 4.0, 5.0]]);
    }

    #[test]
    fn twenty_payload_bytes_for_2x3_is_corruption() {
        let mut bytes = TensorFile::new(vec![2, 3], vec![0.0; 6])
            .unwrap()
            .to_bytes()
            .unwrap();
        bytes.truncate(bytes.len() - 4);
        match TensorFile::from_bytes(&bytes) {
            Err(StoreError::Corruption { expected, found }) => {
                assert_eq!((expected, found), (24, 20));
            }
            other => panic!("expected corruption, got {other:?}"),
        }
    }

    #[test]
    fn single_value_tensor() {
        let t = TensorFile::new(vec![1, 1], vec![7.0]).unwrap();
        let back = TensorFile::from_bytes(&t.to_bytes().unwrap()).unwrap();
        assert_eq!(back.into_matrix().unwrap()[[0, 0]], 7.0);
    }

    #[test]
    fn nan_rejected_on_write() {
        let err = TensorFile::new(vec![1, 2], vec![1.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, StoreError::Invariant(_)));
    }

    #[test]
    fn bad_magic_and_dtype() {
        assert!(matches!(
            TensorFile::from_bytes(b"NOPE1\0\0\0\0"),
            Err(StoreError::Format(_))
        ));
        let header = br#"{"dtype":"f16","shape":[1,1]}"#;
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0, 0]);
        assert!(matches!(
            TensorFile::from_bytes(&bytes),
            Err(StoreError::Unsupported(d)) if d == "f16"
        ));
    }

    #[test]
    fn rank_three_rejected() {
        assert!(matches!(
            TensorFile::new(vec![1, 1, 1], vec![0.0]),
            Err(StoreError::Invariant(_))
        ));
    }

    #[test]
    fn bundle_shape_checks() {
        let m = manifest(&[0, 1, 0, 1], 2);
        let acts = Array2::<f32>::zeros((4, 8));
        let head = TensorFile::new(vec![8, 2], vec![0.0; 16]).unwrap();
        let b = assemble_bundle(m.clone(), acts, None, Some(head)).unwrap();
        assert_eq!(b.head.unwrap().bias, Array1::<f64>::zeros(2));

        let err = assemble_bundle(m.clone(), Array2::zeros((5, 8)), None, None).unwrap_err();
        assert!(matches!(err, StoreError::Consistency(_)));

        let head = TensorFile::new(vec![7, 2], vec![0.0; 14]).unwrap();
        let err = assemble_bundle(m, Array2::zeros((4, 8)), None, Some(head)).unwrap_err();
        assert!(matches!(err, StoreError::Consistency(_)));
    }

    #[test]
    fn manifest_label_out_of_range() {
        let m = manifest(&[0, 1, 3, 1], 2);
        assert!(matches!(m.validate(), Err(StoreError::Manifest(_))));
    }

    #[test]
    fn manifest_duplicate_id() {
        let mut m = manifest(&[0, 1], 2);
        m.images[1].image_id = "img0".into();
        assert!(matches!(m.validate(), Err(StoreError::Manifest(_))));
    }

    #[test]
    fn manifest_ignores_unknown_fields() {
        let text = r#"{"name":"x","num_classes":1,"class_names":["a"],"extra":true,
            "images":[{"image_id":"i","label":0,"split":"train","note":"hi"}]}"#;
        let m = DatasetManifest::from_json(text).unwrap();
        assert_eq!(m.images[0].asset_path, None);
    }

    #[test]
    fn head_bias_row_roundtrip() {
        let h = HeadWeights::new(
            ndarray::array![[1.0, -2.0], [0.5, 0.25]],
            ndarray::array![0.125, -1.0],
        )
        .unwrap();
        let back = HeadWeights::from_tensor(h.to_tensor().unwrap(), 2).unwrap();
        assert_eq!(back, h);
    }

    #[test]
    fn prediction_csv_roundtrip_and_header_check() {
        let mut t = PredictionTable::new("m");
        t.entries.insert("a".into(), 1);
        t.entries.insert("b".into(), 0);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"image_id,predicted_class\n"));
        let back = PredictionTable::from_csv_reader("m", buf.as_slice()).unwrap();
        assert_eq!(back, t);
        assert!(PredictionTable::from_csv_reader("m", "id,class\na,1\n".as_bytes()).is_err());
    }

    #[test]
    fn predictions_validated_against_manifest() {
        let m = manifest(&[0, 1], 2);
        let mut t = PredictionTable::new("m");
        t.entries.insert("img0".into(), 2);
        assert!(t.validate(&m).is_err());
        t.entries.insert("img0".into(), 1);
        t.validate(&m).unwrap();
        t.entries.insert("ghost".into(), 0);
        assert!(t.validate(&m).is_err());
    }
}
