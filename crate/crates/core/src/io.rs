//! Exchange formats: the JSON dataset manifest, CSV outputs and the
//! gnuplot-ready eigenvalue file.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::Segmentation;
use crate::error::{HdmError, Result};
use crate::experiments::MultiplicityReport;
use crate::kernels::{build_w_from_blocks, CorrespondenceBlock, HorizontalDiffusionMatrix};
use crate::sampling::{Fibre, FibreBundleSample};
use crate::spectral::{HbdmFeatures, HdmCoordinates, SpectralDecomposition};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FibreEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<Vec<f64>>,
    pub points: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub i: usize,
    pub j: usize,
    /// `(r, s, w)` with `r` indexing fibre `i` and `s` fibre `j`.
    pub triplets: Vec<(usize, usize, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_dist: Option<f64>,
}

/// A fibre-bundle dataset: fibres, correspondence blocks and optional base
/// edges restricting which blocks are used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub fibres: Vec<FibreEntry>,
    #[serde(default)]
    pub blocks: Vec<BlockEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_edges: Option<Vec<(usize, usize)>>,
}

impl DatasetManifest {
    pub fn from_sample(sample: &FibreBundleSample) -> Self {
        DatasetManifest {
            version: MANIFEST_VERSION,
            fibres: sample
                .fibres()
                .iter()
                .enumerate()
                .map(|(j, f)| FibreEntry {
                    id: j.to_string(),
                    base: f.base.clone(),
                    points: f.points.clone(),
                })
                .collect(),
            blocks: Vec::new(),
            base_edges: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(HdmError::Format(format!("unsupported manifest version {}", self.version)));
        }
        if self.fibres.is_empty() {
            return Err(HdmError::EmptyInput);
        }
        let mut ids = HashSet::new();
        for f in &self.fibres {
            if !ids.insert(f.id.as_str()) {
                return Err(HdmError::Format(format!("duplicate fibre id `{}`", f.id)));
            }
            if f.points.is_empty() {
                return Err(HdmError::Format(format!("fibre `{}` has no points", f.id)));
            }
        }
        let nf = self.fibres.len();
        let mut pairs = HashSet::new();
        for b in &self.blocks {
            if b.i >= nf || b.j >= nf {
                return Err(HdmError::IndexOutOfRange {
                    index: b.i.max(b.j),
                    len: nf,
                });
            }
            let (ri, rj) = (self.fibres[b.i].points.len(), self.fibres[b.j].points.len());
            for &(r, s, w) in &b.triplets {
                if r >= ri || s >= rj {
                    return Err(HdmError::Format(format!("triplet ({r}, {s}) outside block ({}, {})", b.i, b.j)));
                }
                if !(w >= 0.0) || !w.is_finite() {
                    return Err(HdmError::NegativeWeight { i: b.i, j: b.j, value: w });
                }
            }
            pairs.insert((b.i, b.j));
        }
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| !pairs.contains(&(j, i))) {
            return Err(HdmError::AsymmetricBlocks { i, j });
        }
        if let Some(edges) = &self.base_edges {
            if let Some(&(i, j)) = edges.iter().find(|&&(i, j)| i >= nf || j >= nf) {
                return Err(HdmError::IndexOutOfRange { index: i.max(j), len: nf });
            }
        }
        Ok(())
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.fibres.iter().map(|f| f.points.len()).collect()
    }

    pub fn to_sample(&self) -> Result<FibreBundleSample> {
        FibreBundleSample::new(
            self.fibres
                .iter()
                .map(|f| Fibre {
                    base: f.base.clone(),
                    points: f.points.clone(),
                })
                .collect(),
        )
    }

    /// Blocks as kernel inputs, restricted to the declared base edges if any.
    pub fn correspondence_blocks(&self) -> Vec<CorrespondenceBlock> {
        let allowed: Option<HashSet<(usize, usize)>> = self
            .base_edges
            .as_ref()
            .map(|e| e.iter().flat_map(|&(i, j)| [(i, j), (j, i)]).collect());
        self.blocks
            .iter()
            .filter(|b| allowed.as_ref().map_or(true, |a| a.contains(&(b.i, b.j))))
            .map(|b| CorrespondenceBlock {
                i: b.i,
                j: b.j,
                entries: b.triplets.clone(),
                base_dist: b.base_dist,
            })
            .collect()
    }

    /// `W` from the correspondence blocks, gated to mutual `n_neighbors`-nearest fibres.
    pub fn build_w(&self, n_neighbors: usize, eps_b: f64) -> Result<HorizontalDiffusionMatrix> {
        self.validate()?;
        if self.blocks.is_empty() {
            return Err(HdmError::invalid("blocks", "dataset has no correspondence blocks"));
        }
        build_w_from_blocks(&self.sizes(), &self.correspondence_blocks(), None, n_neighbors, eps_b)
    }

    pub fn with_blocks(mut self, blocks: &[CorrespondenceBlock]) -> Self {
        self.blocks = blocks
            .iter()
            .map(|b| BlockEntry {
                i: b.i,
                j: b.j,
                triplets: b.entries.clone(),
                base_dist: b.base_dist,
            })
            .collect();
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HdmError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Formats a real so that parsing it back gives the same value.
fn real(x: f64) -> String {
    format!("{x:?}")
}

fn write_lines(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{header}")?;
    for r in rows {
        writeln!(out, "{r}")?;
    }
    out.flush()?;
    Ok(())
}

/// `index,eigenvalue,residual`
pub fn write_eigs_csv(path: &Path, d: &SpectralDecomposition) -> Result<()> {
    write_lines(
        path,
        "index,eigenvalue,residual",
        d.values
            .iter()
            .zip(&d.residuals)
            .enumerate()
            .map(|(i, (v, r))| format!("{i},{},{}", real(*v), real(*r))),
    )
}

/// `fibre,point,c1,…` per point.
pub fn write_embedding_csv(path: &Path, coords: &HdmCoordinates) -> Result<()> {
    let dims = coords.coords.first().map_or(0, Vec::len);
    let header = std::iter::once("fibre,point".to_string())
        .chain((1..=dims).map(|c| format!("c{c}")))
        .collect::<Vec<_>>()
        .join(",");
    let sizes = coords.layout.sizes();
    let ids = sizes.iter().enumerate().flat_map(|(j, &n)| (0..n).map(move |s| (j, s)));
    write_lines(
        path,
        &header,
        ids.zip(&coords.coords).map(|((j, s), row)| {
            std::iter::once(format!("{j},{s}"))
                .chain(row.iter().map(|v| real(*v)))
                .collect::<Vec<_>>()
                .join(",")
        }),
    )
}

/// `fibre,f_0_0,f_0_1,…` per fibre.
pub fn write_features_csv(path: &Path, features: &HbdmFeatures) -> Result<()> {
    let k = features.k;
    let header = std::iter::once("fibre".to_string())
        .chain((0..k * k).map(|e| format!("f_{}_{}", e / k, e % k)))
        .collect::<Vec<_>>()
        .join(",");
    write_lines(
        path,
        &header,
        features.features.iter().enumerate().map(|(j, row)| {
            std::iter::once(j.to_string())
                .chain(row.iter().map(|v| real(*v)))
                .collect::<Vec<_>>()
                .join(",")
        }),
    )
}

/// `fibre,point,label`
pub fn write_segmentation_csv(path: &Path, seg: &Segmentation) -> Result<()> {
    write_lines(path, "fibre,point,label", seg.rows().map(|(j, s, l)| format!("{j},{s},{l}")))
}

pub fn read_segmentation_csv(path: &Path) -> Result<Vec<(usize, usize, usize)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("fibre,point,label") {
        return Err(HdmError::Format("missing segmentation header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<usize> = l
                .split(',')
                .map(|x| x.trim().parse().map_err(|_| HdmError::Format(format!("bad row `{l}`"))))
                .collect::<Result<_>>()?;
            match f[..] {
                [a, b, c] => Ok((a, b, c)),
                _ => Err(HdmError::Format(format!("bad row `{l}`"))),
            }
        })
        .collect()
}

/// Reads `index,eigenvalue,residual` rows back as `(index, eigenvalue, residual)`.
pub fn read_eigs_csv(path: &Path) -> Result<Vec<(usize, f64, f64)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("index,eigenvalue,residual") {
        return Err(HdmError::Format("missing eigenvalue header".into()));
    }
    let bad = |l: &str| HdmError::Format(format!("bad row `{l}`"));
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 3 {
                return Err(bad(l));
            }
            Ok((
                f[0].parse().map_err(|_| bad(l))?,
                f[1].parse().map_err(|_| bad(l))?,
                f[2].parse().map_err(|_| bad(l))?,
            ))
        })
        .collect()
}

pub fn write_report_json(path: &Path, report: &MultiplicityReport) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

/// Two columns, `index eigenvalue`, one row per eigenvalue.
pub fn write_gnuplot(path: &Path, eigenvalues: &[f64]) -> Result<()> {
    write_lines(
        path,
        "# index eigenvalue",
        eigenvalues.iter().enumerate().map(|(i, v)| format!("{} {}", i + 1, real(*v))),
    )
}

/// Map from fibre id to index.
pub fn fibre_index(manifest: &DatasetManifest) -> HashMap<&str, usize> {
    manifest.fibres.iter().enumerate().map(|(j, f)| (f.id.as_str(), j)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn two_vertex() -> DatasetManifest {
        DatasetManifest {
            version: MANIFEST_VERSION,
            fibres: vec![
                FibreEntry {
                    id: "a".into(),
                    base: None,
                    points: vec![vec![0.0]],
                },
                FibreEntry {
                    id: "b".into(),
                    base: None,
                    points: vec![vec![1.0]],
                },
            ],
            blocks: vec![
                BlockEntry {
                    i: 0,
                    j: 1,
                    triplets: vec![(0, 0, 1.0)],
                    base_dist: None,
                },
                BlockEntry {
                    i: 1,
                    j: 0,
                    triplets: vec![(0, 0, 1.0)],
                    base_dist: None,
                },
            ],
            base_edges: None,
        }
    }

    #[test]
    fn manifest_round_trip_is_exact() {
        let mut rng = rng_from_seed(2);
        let mut m = two_vertex();
        m.fibres[0].points = (0..50).map(|_| vec![rng.gen::<f64>() * 1e-7, rng.gen::<f64>() * 1e9]).collect();
        m.fibres[0].base = Some(vec![0.1 + 0.2, -1.0 / 3.0, f64::MIN_POSITIVE]);
        m.blocks[0].triplets = vec![(49, 0, std::f64::consts::PI)];
        m.blocks[0].base_dist = Some(2f64.sqrt());
        let back = DatasetManifest::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn manifest_validation() {
        let mut m = two_vertex();
        m.fibres[1].id = "a".into();
        assert!(matches!(m.validate(), Err(HdmError::Format(_))));
        let mut m = two_vertex();
        m.blocks.pop();
        assert!(matches!(m.validate(), Err(HdmError::AsymmetricBlocks { .. })));
        let mut m = two_vertex();
        m.blocks[0].triplets[0].0 = 3;
        assert!(m.validate().is_err());
        assert!(DatasetManifest::from_json("{").is_err());
    }

    #[test]
    fn two_vertex_w() {
        let w = two_vertex().build_w(1, 1.0).unwrap();
        assert_eq!(w.matrix.to_dense(), vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
    }

    #[test]
    fn declared_edges_filter_blocks() {
        let mut m = two_vertex();
        m.base_edges = Some(vec![]);
        assert!(m.correspondence_blocks().is_empty());
        m.base_edges = Some(vec![(1, 0)]);
        assert_eq!(m.correspondence_blocks().len(), 2);
    }

    #[test]
    fn csv_outputs_round_trip() {
        let dir = std::env::temp_dir().join(format!("hdm-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let d = SpectralDecomposition {
            values: vec![0.0, 2.0 / 3.0],
            vectors: vec![vec![1.0], vec![0.0]],
            residuals: vec![1e-17, 0.0],
            norm_estimate: 1.0,
        };
        let p = dir.join("eigs.csv");
        write_eigs_csv(&p, &d).unwrap();
        assert_eq!(read_eigs_csv(&p).unwrap(), vec![(0, 0.0, 1e-17), (1, 2.0 / 3.0, 0.0)]);
        let seg = Segmentation {
            k: 2,
            labels: vec![0, 1, 1],
            sizes: vec![1, 2],
            wcss: 0.0,
        };
        let p = dir.join("segmentation.csv");
        write_segmentation_csv(&p, &seg).unwrap();
        assert_eq!(read_segmentation_csv(&p).unwrap(), vec![(0, 0, 0), (1, 0, 1), (1, 1, 1)]);
        let p = dir.join("eigs.dat");
        write_gnuplot(&p, &[0.0, 0.5]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "# index eigenvalue\n1 0.0\n2 0.5\n");
        fs::remove_dir_all(&dir).unwrap();
    }
}
