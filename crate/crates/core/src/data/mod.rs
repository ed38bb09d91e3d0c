//! Dataset representation: labeled images, manifests, deterministic
//! stratified splits, pixel normalization, and PNG round-trips.
//!
//! A dataset on disk is a directory of 8-bit RGB PNGs plus `manifest.csv`
//! (`file,identity,expression,split`, paths relative to the manifest) and a
//! `manifest.json` sidecar carrying the counts, image size, and seed that the
//! CSV itself cannot hold.

pub mod toyfaces;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, StreamKind};
use crate::scalar::Scalar;

// ---------------------------------------------------------------------------
// Core types
// ---------------------------------------------------------------------------

/// One face image in model space: channel-first `[3, H, W]`, values in [-1, 1].
#[derive(Debug, Clone)]
pub struct LabeledImage<F> {
    pub pixels: Array3<F>,
    pub identity: usize,
    pub expression: usize,
}

impl<F: Scalar> LabeledImage<F> {
    pub fn validate(&self, n_identities: usize, n_expressions: usize) -> Result<()> {
        let (c, h, w) = self.pixels.dim();
        if c != 3 || !h.is_power_of_two() || h < 16 || !w.is_power_of_two() || w < 16 {
            return Err(Error::Validation(format!(
                "image must be [3, H, W] with power-of-two H, W >= 16, got [{c}, {h}, {w}]"
            )));
        }
        if self.pixels.iter().any(|v| !(*v >= -F::one() && *v <= F::one())) {
            return Err(Error::Validation("pixel values must lie in [-1, 1]".into()));
        }
        if self.identity >= n_identities || self.expression >= n_expressions {
            return Err(Error::Validation(format!(
                "labels ({}, {}) out of range ({n_identities}, {n_expressions})",
                self.identity, self.expression
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    /// Path relative to the manifest file, always with `/` separators.
    pub file: String,
    pub identity: usize,
    pub expression: usize,
    pub split: Split,
}

/// Sidecar fields that the CSV cannot carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestMeta {
    n_identities: usize,
    n_expressions: usize,
    image_height: usize,
    image_width: usize,
    seed: u64,
    #[serde(default)]
    left_out: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub n_identities: usize,
    pub n_expressions: usize,
    /// (height, width)
    pub image_size: (usize, usize),
    pub seed: u64,
    /// (identity, expression) cell that downstream training should exclude.
    pub left_out: Option<(usize, usize)>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            if r.identity >= self.n_identities || r.expression >= self.n_expressions {
                return Err(Error::Validation(format!(
                    "record {:?} has labels out of range ({}, {})",
                    r.file, self.n_identities, self.n_expressions
                )));
            }
        }
        if let Some((i, e)) = self.left_out {
            if i >= self.n_identities || e >= self.n_expressions {
                return Err(Error::Validation(format!(
                    "left-out cell ({i}, {e}) out of range ({}, {})",
                    self.n_identities, self.n_expressions
                )));
            }
        }
        Ok(())
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Record indices grouped by (identity, expression) cell, in record order.
    fn cells(&self) -> BTreeMap<(usize, usize), Vec<usize>> {
        let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            cells.entry((r.identity, r.expression)).or_default().push(i);
        }
        cells
    }

    /// Write `manifest.csv` plus its `.json` sidecar.
    pub fn save(&self, csv_path: &Path) -> Result<()> {
        self.validate()?;
        let mut w = csv::Writer::from_path(csv_path).map_err(|e| csv_error(csv_path, e))?;
        w.write_record(["file", "identity", "expression", "split"])
            .map_err(|e| csv_error(csv_path, e))?;
        for r in &self.records {
            w.write_record([
                r.file.as_str(),
                &r.identity.to_string(),
                &r.expression.to_string(),
                r.split.as_str(),
            ])
            .map_err(|e| csv_error(csv_path, e))?;
        }
        w.flush().map_err(|e| Error::storage(csv_path, e))?;
        let meta = ManifestMeta {
            n_identities: self.n_identities,
            n_expressions: self.n_expressions,
            image_height: self.image_size.0,
            image_width: self.image_size.1,
            seed: self.seed,
            left_out: self.left_out,
        };
        let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
        std::fs::write(sidecar_path(csv_path), json).map_err(|e| Error::storage(csv_path, e))?;
        Ok(())
    }

    pub fn load(csv_path: &Path) -> Result<Self> {
        let meta_path = sidecar_path(csv_path);
        let meta_text =
            std::fs::read_to_string(&meta_path).map_err(|e| Error::storage(&meta_path, e))?;
        let meta: ManifestMeta = serde_json::from_str(&meta_text)
            .map_err(|e| Error::Validation(format!("bad manifest sidecar {meta_path:?}: {e}")))?;
        let mut rdr = csv::Reader::from_path(csv_path).map_err(|e| csv_error(csv_path, e))?;
        let headers = rdr.headers().map_err(|e| csv_error(csv_path, e))?.clone();
        let expect = ["file", "identity", "expression", "split"];
        if headers.iter().collect::<Vec<_>>() != expect {
            return Err(Error::Validation(format!(
                "manifest header {headers:?} != {expect:?}"
            )));
        }
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row.map_err(|e| csv_error(csv_path, e))?;
            let field = |i: usize| -> Result<&str> {
                row.get(i)
                    .ok_or_else(|| Error::Validation(format!("short manifest row {row:?}")))
            };
            let parse_usize = |s: &str| -> Result<usize> {
                s.parse()
                    .map_err(|_| Error::Validation(format!("bad integer {s:?} in manifest")))
            };
            records.push(ManifestRecord {
                file: field(0)?.to_string(),
                identity: parse_usize(field(1)?)?,
                expression: parse_usize(field(2)?)?,
                split: Split::parse(field(3)?)?,
            });
        }
        let m = DatasetManifest {
            records,
            n_identities: meta.n_identities,
            n_expressions: meta.n_expressions,
            image_size: (meta.image_height, meta.image_width),
            seed: meta.seed,
            left_out: meta.left_out,
        };
        m.validate()?;
        Ok(m)
    }
}

fn sidecar_path(csv_path: &Path) -> std::path::PathBuf {
    csv_path.with_extension("json")
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::storage(path, io),
        other => Error::Validation(format!("csv error in {path:?}: {other:?}")),
    }
}

// ---------------------------------------------------------------------------
// Stratified split
// ---------------------------------------------------------------------------

/// Reassign split tags: per (identity, expression) cell, exactly
/// `floor(train_fraction * n)` records go to train (chosen without
/// replacement under `seed`), the remainder to test.
pub fn split_dataset(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Validation(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let cells = manifest.cells();
    for id in 0..manifest.n_identities {
        for e in 0..manifest.n_expressions {
            if !cells.contains_key(&(id, e)) {
                return Err(Error::Stratification(format!(
                    "cell (identity {id}, expression {e}) has no records"
                )));
            }
        }
    }
    let mut out = manifest.clone();
    for ((id, e), mut idxs) in cells {
        // the 1e-9 nudge keeps exact products like 0.7 * 50 from flooring low
        let n_train = ((train_fraction * idxs.len() as f64) + 1e-9).floor() as usize;
        let mut rng = stream(seed, StreamKind::SplitCell, id as u64, e as u64);
        idxs.shuffle(&mut rng);
        for (k, &i) in idxs.iter().enumerate() {
            out.records[i].split = if k < n_train { Split::Train } else { Split::Test };
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Normalization and codes
// ---------------------------------------------------------------------------

/// `[0, 255] -> [-1, 1]` via `v / 127.5 - 1`.
pub fn normalize_image<F: Scalar>(raw: &Array3<u8>) -> Array3<F> {
    raw.mapv(|v| F::from_f64c(f64::from(v) / 127.5 - 1.0))
}

/// Inverse of [`normalize_image`]; values are clamped to [-1, 1] first so
/// decoder output (strictly inside the interval) and hand-built tensors both
/// quantize safely.
pub fn denormalize_image<F: Scalar>(img: &Array3<F>) -> Array3<u8> {
    img.mapv(|v| {
        let v = v.to_f64c().clamp(-1.0, 1.0);
        ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
    })
}

/// Length-`n` one-hot vector.
pub fn one_hot<F: Scalar>(index: usize, n: usize) -> Result<Array1<F>> {
    if index >= n {
        return Err(Error::Validation(format!("one_hot index {index} out of range (< {n})")));
    }
    let mut v = Array1::zeros(n);
    v[index] = F::one();
    Ok(v)
}

/// `[batch, n]` matrix of one-hot rows.
pub fn one_hot_batch<F: Scalar>(indices: &[usize], n: usize) -> Result<Array2<F>> {
    let mut m = Array2::zeros((indices.len(), n));
    for (i, &idx) in indices.iter().enumerate() {
        if idx >= n {
            return Err(Error::Validation(format!("one_hot index {idx} out of range (< {n})")));
        }
        m[[i, idx]] = F::one();
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// PNG round-trip
// ---------------------------------------------------------------------------

/// Save `[3, H, W]` pixels in [-1, 1] as an 8-bit RGB PNG.
pub fn save_png<F: Scalar>(path: &Path, pixels: &Array3<F>) -> Result<()> {
    let (c, h, w) = pixels.dim();
    if c != 3 {
        return Err(Error::Validation(format!("expected 3 channels, got {c}")));
    }
    let bytes = denormalize_image(pixels);
    let mut raw = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for q in 0..w {
            raw.extend_from_slice(&[bytes[[0, r, q]], bytes[[1, r, q]], bytes[[2, r, q]]]);
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("sized buffer");
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Load an 8-bit RGB PNG into `[3, H, W]` pixels in [-1, 1].
pub fn load_png<F: Scalar>(path: &Path) -> Result<Array3<F>> {
    let dynimg = image::open(path).map_err(|e| Error::image(path, e))?;
    let rgb = match dynimg {
        image::DynamicImage::ImageRgb8(img) => img,
        other => {
            return Err(Error::Validation(format!(
                "{path:?} is not an 8-bit RGB image (found {:?})",
                other.color()
            )))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut raw = Array3::<u8>::zeros((3, h, w));
    for (x, y, p) in rgb.enumerate_pixels() {
        for ch in 0..3 {
            raw[[ch, y as usize, x as usize]] = p.0[ch];
        }
    }
    Ok(normalize_image(&raw))
}

// ---------------------------------------------------------------------------
// Batch loading
// ---------------------------------------------------------------------------

/// One split of a dataset in memory, batch-major.
#[derive(Debug, Clone)]
pub struct LoadedDataset<F> {
    pub images: Array4<F>,
    pub identities: Vec<usize>,
    pub expressions: Vec<usize>,
}

impl<F: Scalar> LoadedDataset<F> {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn record(&self, i: usize) -> LabeledImage<F> {
        LabeledImage {
            pixels: self.images.index_axis(ndarray::Axis(0), i).to_owned(),
            identity: self.identities[i],
            expression: self.expressions[i],
        }
    }

    /// New dataset holding the chosen records, in the given order.
    pub fn subset(&self, indices: &[usize]) -> LoadedDataset<F> {
        let (_, c, h, w) = self.images.dim();
        let mut images = Array4::zeros((indices.len(), c, h, w));
        for (k, &i) in indices.iter().enumerate() {
            images
                .index_axis_mut(ndarray::Axis(0), k)
                .assign(&self.images.index_axis(ndarray::Axis(0), i));
        }
        LoadedDataset {
            images,
            identities: indices.iter().map(|&i| self.identities[i]).collect(),
            expressions: indices.iter().map(|&i| self.expressions[i]).collect(),
        }
    }
}

/// Load every record of `split`, in manifest order. `base` is the directory
/// the manifest's relative paths resolve against.
pub fn load_split<F: Scalar>(
    manifest: &DatasetManifest,
    base: &Path,
    split: Split,
) -> Result<LoadedDataset<F>> {
    let recs: Vec<&ManifestRecord> = manifest.split_records(split).collect();
    let (h, w) = manifest.image_size;
    let mut images = Array4::<F>::zeros((recs.len(), 3, h, w));
    let mut identities = Vec::with_capacity(recs.len());
    let mut expressions = Vec::with_capacity(recs.len());
    for (i, r) in recs.iter().enumerate() {
        let px = load_png::<F>(&base.join(&r.file))?;
        if px.dim() != (3, h, w) {
            return Err(Error::Validation(format!(
                "{:?} has shape {:?}, manifest says ({h}, {w})",
                r.file,
                px.dim()
            )));
        }
        images.index_axis_mut(ndarray::Axis(0), i).assign(&px);
        identities.push(r.identity);
        expressions.push(r.expression);
    }
    Ok(LoadedDataset { images, identities, expressions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn synthetic_manifest(n_id: usize, n_e: usize, per_cell: usize) -> DatasetManifest {
        let mut records = Vec::new();
        for id in 0..n_id {
            for e in 0..n_e {
                for k in 0..per_cell {
                    records.push(ManifestRecord {
                        file: format!("face_i{id:02}_e{e}_s{k:03}.png"),
                        identity: id,
                        expression: e,
                        split: Split::Train,
                    });
                }
            }
        }
        DatasetManifest {
            records,
            n_identities: n_id,
            n_expressions: n_e,
            image_size: (32, 32),
            seed: 7,
            left_out: None,
        }
    }

    #[test]
    fn one_hot_examples() {
        let v = one_hot::<f64>(3, 6).unwrap();
        assert_eq!(v.to_vec(), vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let v = one_hot::<f64>(0, 2).unwrap();
        assert_eq!(v.to_vec(), vec![1.0, 0.0]);
        assert!(one_hot::<f64>(6, 6).is_err());
        let m = one_hot_batch::<f32>(&[1, 0], 2).unwrap();
        assert_eq!(m, ndarray::array![[0.0, 1.0], [1.0, 0.0]]);
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let raw = Array3::from_shape_vec((3, 1, 1), vec![0u8, 128, 255]).unwrap();
        let n = normalize_image::<f64>(&raw);
        assert_eq!(n[[0, 0, 0]], -1.0);
        assert!((n[[1, 0, 0]] - 0.00392156862745097).abs() < 1e-15);
        assert_eq!(n[[2, 0, 0]], 1.0);
    }

    proptest! {
        #[test]
        fn normalize_round_trip_is_exact_on_bytes(v in 0u8..=255) {
            let raw = Array3::from_elem((3, 1, 1), v);
            let back = denormalize_image(&normalize_image::<f32>(&raw));
            prop_assert_eq!(back[[0, 0, 0]], v);
        }

        #[test]
        fn denormalize_error_is_within_quantization(v in -1.0f64..=1.0) {
            let img = Array3::from_elem((3, 1, 1), v);
            let round = normalize_image::<f64>(&denormalize_image(&img));
            prop_assert!((round[[0, 0, 0]] - v).abs() <= 1.0 / 255.0);
        }

        #[test]
        fn split_stratification_bound(
            per_cell in 2usize..40,
            frac in 0.05f64..0.95,
            seed in 0u64..500,
        ) {
            let m = synthetic_manifest(2, 3, per_cell);
            let s = split_dataset(&m, frac, seed).unwrap();
            for id in 0..2 {
                for e in 0..3 {
                    let train = s.records.iter()
                        .filter(|r| r.identity == id && r.expression == e && r.split == Split::Train)
                        .count();
                    let got = train as f64 / per_cell as f64;
                    prop_assert!(got <= frac + 1e-9);
                    prop_assert!(got >= frac - 1.0 / per_cell as f64 - 1e-9);
                }
            }
        }
    }

    #[test]
    fn split_examples_and_determinism() {
        let m = synthetic_manifest(1, 1, 100);
        let s = split_dataset(&m, 0.85, 3).unwrap();
        assert_eq!(s.split_records(Split::Train).count(), 85);
        assert_eq!(s.split_records(Split::Test).count(), 15);

        let m20 = synthetic_manifest(1, 1, 20);
        let s20 = split_dataset(&m20, 0.85, 3).unwrap();
        assert_eq!(s20.split_records(Split::Train).count(), 17);
        assert_eq!(s20.split_records(Split::Test).count(), 3);

        // exact products do not floor low
        let m50 = synthetic_manifest(1, 1, 50);
        let s50 = split_dataset(&m50, 0.7, 3).unwrap();
        assert_eq!(s50.split_records(Split::Train).count(), 35);

        let again = split_dataset(&m, 0.85, 3).unwrap();
        assert_eq!(s, again);
        let other_seed = split_dataset(&m, 0.85, 4).unwrap();
        assert_ne!(s, other_seed);
    }

    #[test]
    fn split_rejects_empty_cells_and_bad_fraction() {
        let mut m = synthetic_manifest(2, 2, 3);
        assert!(split_dataset(&m, 1.0, 1).is_err());
        m.records.retain(|r| !(r.identity == 1 && r.expression == 1));
        let err = split_dataset(&m, 0.85, 1).unwrap_err();
        assert!(matches!(err, Error::Stratification(_)));
    }

    #[test]
    fn manifest_saves_lf_csv_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let m = {
            let mut m = synthetic_manifest(2, 2, 2);
            m.records[3].split = Split::Test;
            m
        };
        m.save(&path).unwrap();
        let text = std::fs::read(&path).unwrap();
        assert!(!text.contains(&b'\r'), "manifest must use LF line endings");
        assert!(String::from_utf8(text).unwrap().starts_with("file,identity,expression,split\n"));
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn labeled_image_validation() {
        let good = LabeledImage { pixels: Array3::<f32>::zeros((3, 16, 16)), identity: 1, expression: 2 };
        good.validate(3, 3).unwrap();
        let bad_size = LabeledImage { pixels: Array3::<f32>::zeros((3, 12, 16)), identity: 0, expression: 0 };
        assert!(bad_size.validate(3, 3).is_err());
        let mut bad_range = good.clone();
        bad_range.pixels[[0, 0, 0]] = 1.5;
        assert!(bad_range.validate(3, 3).is_err());
        let bad_label = LabeledImage { pixels: Array3::<f32>::zeros((3, 16, 16)), identity: 3, expression: 0 };
        assert!(bad_label.validate(3, 3).is_err());
    }

    #[test]
    fn png_round_trip_preserves_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let mut r = crate::rng::stream(1, StreamKind::RecordJitter, 0, 0);
        let img: Array3<f32> =
            Array3::from_shape_simple_fn((3, 16, 16), || f32::unit_uniform(&mut r) * 2.0 - 1.0);
        save_png(&path, &img).unwrap();
        let back = load_png::<f32>(&path).unwrap();
        let twice = denormalize_image(&back);
        assert_eq!(denormalize_image(&img), twice);
    }
}
