//! Versioned JSON files: manifest, alignment, ground-truth sidecar and
//! metric report.
//!
//! Every file starts with a `format` tag and a `"major.minor"` version;
//! loaders reject other formats and unknown majors.

use std::collections::BTreeSet;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::MetricReport;
use crate::graph::{BuildConfig, ImageMeta, RawMatchSet};
use crate::sage::{LayerWeights, SageWeights};
use crate::objective::FlipFlags;
use crate::optim::{AlignmentResult, Convergence, TrainConfig};
use crate::sl3::{GaugeMode, Homography, Mat3, Point2, Sl3Vector};
use crate::synth::{GroundTruth, SynthSpec};

pub const FORMAT_MAJOR: u32 = 1;
pub const FORMAT_VERSION: &str = "1.0";

pub const MANIFEST_FORMAT: &str = "jointalign-manifest";
pub const ALIGNMENT_FORMAT: &str = "jointalign-alignment";
pub const GROUND_TRUTH_FORMAT: &str = "jointalign-groundtruth";
pub const METRICS_FORMAT: &str = "jointalign-metrics";
pub const WEIGHTS_FORMAT: &str = "jointalign-weights";

/// Pixel slack allowed around image bounds for manifest coordinates.
pub const BOUNDS_SLACK_PX: f64 = 1.0;

#[derive(Deserialize)]
struct Header {
    format: String,
    version: String,
}

#[derive(Serialize)]
struct Tagged<'a, T> {
    format: &'a str,
    version: &'a str,
    #[serde(flatten)]
    body: T,
}

fn write_json<T: Serialize>(path: &Path, format: &str, body: &T) -> Result<()> {
    let tagged = Tagged {
        format,
        version: FORMAT_VERSION,
        body,
    };
    let mut text = serde_json::to_string_pretty(&tagged)
        .map_err(|e| Error::Numerical(format!("cannot serialize {format}: {e}")))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path, format: &'static str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json(path, &text, format)
}

fn parse_error(path: &Path, message: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message,
    }
}

fn parse_json<T: DeserializeOwned>(path: &Path, text: &str, format: &'static str) -> Result<T> {
    let header: Header = serde_json::from_str(text).map_err(|e| {
        parse_error(path, format!("line {} column {}: {e}", e.line(), e.column()))
    })?;
    if header.format != format {
        return Err(parse_error(
            path,
            format!("expected format {format:?}, found {:?}", header.format),
        ));
    }
    let major = header
        .version
        .split('.')
        .next()
        .and_then(|m| m.parse::<u32>().ok());
    if major != Some(FORMAT_MAJOR) {
        return Err(Error::UnsupportedVersion {
            kind: format,
            found: header.version,
        });
    }
    let de = &mut serde_json::Deserializer::from_str(text);
    // Bodies ignore unknown fields, so the header parses through untouched.
    serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner();
        parse_error(
            path,
            format!(
                "line {} column {}, field `{}`: {inner}",
                inner.line(),
                inner.column(),
                e.path()
            ),
        )
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WireMatchSet {
    i: u32,
    j: u32,
    points_i: Vec<[f64; 2]>,
    points_j: Vec<[f64; 2]>,
    conf: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WireManifest {
    images: Vec<ImageMeta>,
    matches: Vec<WireMatchSet>,
}

/// Image sizes and raw pairwise matches of one collection.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub images: Vec<ImageMeta>,
    pub matches: Vec<RawMatchSet>,
}

impl Manifest {
    /// Checks ids, array lengths, confidences and pixel bounds.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for img in &self.images {
            img.validate()?;
            if !ids.insert(img.id) {
                return Err(Error::Validation(format!("duplicate image id {}", img.id)));
            }
        }
        for set in &self.matches {
            set.validate()?;
            let pair = format!("pair ({}, {})", set.i, set.j);
            let lookup = |id: u32| {
                self.images.iter().find(|m| m.id == id).ok_or_else(|| {
                    Error::Validation(format!("{pair} references unknown image {id}"))
                })
            };
            let (mi, mj) = (lookup(set.i)?, lookup(set.j)?);
            for (k, (a, b)) in set.points_i.iter().zip(&set.points_j).enumerate() {
                for (meta, p) in [(mi, a), (mj, b)] {
                    if !meta.contains(*p, BOUNDS_SLACK_PX) {
                        return Err(Error::Validation(format!(
                            "{pair} match {k}: point ({}, {}) outside image {} ({}x{})",
                            p.x, p.y, meta.id, meta.width, meta.height
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let to_wire = |ps: &[Point2]| ps.iter().map(|p| [p.x, p.y]).collect();
    let wire = WireManifest {
        images: manifest.images.clone(),
        matches: manifest
            .matches
            .iter()
            .map(|s| WireMatchSet {
                i: s.i,
                j: s.j,
                points_i: to_wire(&s.points_i),
                points_j: to_wire(&s.points_j),
                conf: s.conf.clone(),
            })
            .collect(),
    };
    write_json(path, MANIFEST_FORMAT, &wire)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(path, &text)
}

/// Parses and validates manifest text; `path` is used for messages only.
pub fn parse_manifest(path: &Path, text: &str) -> Result<Manifest> {
    let wire: WireManifest = parse_json(path, text, MANIFEST_FORMAT)?;
    let from_wire = |ps: Vec<[f64; 2]>| ps.into_iter().map(|[x, y]| Point2::new(x, y)).collect();
    let manifest = Manifest {
        images: wire.images,
        matches: wire
            .matches
            .into_iter()
            .map(|s| RawMatchSet {
                i: s.i,
                j: s.j,
                points_i: from_wire(s.points_i),
                points_j: from_wire(s.points_j),
                conf: s.conf,
            })
            .collect(),
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Settings that produced an alignment, echoed into its file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub build: BuildConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WireImageWarp {
    id: u32,
    width: u32,
    height: u32,
    flip: bool,
    /// Row-major 3×3 matrix.
    homography: [f64; 9],
    theta: Sl3Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LossSummary {
    initial: f64,
    final_loss: f64,
    history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WireAlignment {
    gauge: GaugeMode,
    config: Option<RunConfig>,
    loss: LossSummary,
    convergence: Convergence,
    images: Vec<WireImageWarp>,
}

pub fn save_alignment(result: &AlignmentResult, config: Option<&RunConfig>, path: &Path) -> Result<()> {
    let wire = WireAlignment {
        gauge: result.gauge,
        config: config.cloned(),
        loss: LossSummary {
            initial: result.convergence.initial_loss,
            final_loss: result.final_loss,
            history: result.loss_history.clone(),
        },
        convergence: result.convergence.clone(),
        images: result
            .images
            .iter()
            .enumerate()
            .map(|(k, meta)| {
                let m = result.homographies[k].matrix();
                WireImageWarp {
                    id: meta.id,
                    width: meta.width,
                    height: meta.height,
                    flip: result.flips.get(k),
                    homography: std::array::from_fn(|e| m[(e / 3, e % 3)]),
                    theta: result.thetas[k],
                }
            })
            .collect(),
    };
    write_json(path, ALIGNMENT_FORMAT, &wire)
}

/// Loads an alignment and its config echo; every matrix must have unit
/// determinant.
pub fn load_alignment(path: &Path) -> Result<(AlignmentResult, Option<RunConfig>)> {
    let wire: WireAlignment = read_json(path, ALIGNMENT_FORMAT)?;
    let mut homographies = Vec::with_capacity(wire.images.len());
    for img in &wire.images {
        let m = Mat3::from_row_slice(&img.homography);
        let h = Homography::from_matrix(m).map_err(|_| {
            Error::Validation(format!(
                "image {}: homography determinant {} is not 1",
                img.id,
                m.determinant()
            ))
        })?;
        homographies.push(h);
    }
    let images: Vec<ImageMeta> = wire
        .images
        .iter()
        .map(|w| ImageMeta {
            id: w.id,
            width: w.width,
            height: w.height,
        })
        .collect();
    let mut ids = BTreeSet::new();
    for img in &images {
        img.validate()?;
        if !ids.insert(img.id) {
            return Err(Error::Validation(format!("duplicate image id {}", img.id)));
        }
    }
    let result = AlignmentResult {
        images,
        homographies,
        thetas: wire.images.iter().map(|w| w.theta).collect(),
        flips: FlipFlags(wire.images.iter().map(|w| w.flip).collect()),
        final_loss: wire.loss.final_loss,
        loss_history: wire.loss.history,
        gauge: wire.gauge,
        convergence: wire.convergence,
        weights: None,
    };
    Ok((result, wire.config))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub spec: SynthSpec,
    pub truth: GroundTruth,
}

pub fn save_ground_truth(file: &GroundTruthFile, path: &Path) -> Result<()> {
    write_json(path, GROUND_TRUTH_FORMAT, file)
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruthFile> {
    let file: GroundTruthFile = read_json(path, GROUND_TRUTH_FORMAT)?;
    file.truth.annotations.validate()?;
    Ok(file)
}

pub fn save_metrics(report: &MetricReport, path: &Path) -> Result<()> {
    write_json(path, METRICS_FORMAT, report)
}

pub fn load_metrics(path: &Path) -> Result<MetricReport> {
    read_json(path, METRICS_FORMAT)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WireMatrix {
    rows: usize,
    cols: usize,
    /// Row-major entries.
    data: Vec<f64>,
}

impl WireMatrix {
    fn from(m: &nalgebra::DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().as_slice().to_vec(),
        }
    }

    fn to_matrix(&self, what: &str) -> Result<nalgebra::DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Validation(format!(
                "{what}: {} entries for a {}x{} matrix",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WireLayer {
    w_self: WireMatrix,
    w_neigh: Option<WireMatrix>,
    bias: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WireWeights {
    layers: Vec<WireLayer>,
    head_w: WireMatrix,
    head_b: Vec<f64>,
}

/// Network checkpoint with explicit dimensions and row-major matrices.
pub fn save_weights(weights: &SageWeights, path: &Path) -> Result<()> {
    let wire = WireWeights {
        layers: weights
            .layers
            .iter()
            .map(|l| WireLayer {
                w_self: WireMatrix::from(&l.w_self),
                w_neigh: l.w_neigh.as_ref().map(WireMatrix::from),
                bias: l.bias.as_ref().map(|b| b.as_slice().to_vec()),
            })
            .collect(),
        head_w: WireMatrix::from(&weights.head_w),
        head_b: weights.head_b.as_slice().to_vec(),
    };
    write_json(path, WEIGHTS_FORMAT, &wire)
}

pub fn load_weights(path: &Path) -> Result<SageWeights> {
    let wire: WireWeights = read_json(path, WEIGHTS_FORMAT)?;
    let mut layers = Vec::with_capacity(wire.layers.len());
    let mut d_in = 2;
    for (l, w) in wire.layers.iter().enumerate() {
        let w_self = w.w_self.to_matrix(&format!("layer {l} self weights"))?;
        let w_neigh = w
            .w_neigh
            .as_ref()
            .map(|m| m.to_matrix(&format!("layer {l} neighbor weights")))
            .transpose()?;
        let d_out = w_self.ncols();
        let shapes_ok = w_self.nrows() == d_in
            && w_neigh.as_ref().is_none_or(|m| m.shape() == w_self.shape())
            && w.bias.as_ref().is_none_or(|b| b.len() == d_out);
        if !shapes_ok {
            return Err(Error::Validation(format!("layer {l} dimensions do not chain")));
        }
        layers.push(LayerWeights {
            w_self,
            w_neigh,
            bias: w.bias.as_ref().map(|b| nalgebra::DVector::from_vec(b.clone())),
        });
        d_in = d_out;
    }
    let head_w = wire.head_w.to_matrix("head weights")?;
    if head_w.nrows() != d_in || head_w.ncols() != 8 || wire.head_b.len() != 8 {
        return Err(Error::Validation("head dimensions do not chain".into()));
    }
    let weights = SageWeights {
        layers,
        head_w,
        head_b: nalgebra::DVector::from_vec(wire.head_b),
    };
    if !weights.is_finite() {
        return Err(Error::Validation("checkpoint has non-finite weights".into()));
    }
    Ok(weights)
}
