//! Per-layer `[CLS]` dumps, their PCA projections, and a cluster-quality
//! score for tracking how label structure forms across layers and epochs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{contract, Error, Result};
use crate::io::write_atomic;
use crate::model::Model;
use crate::train::Encoded;

#[derive(Debug, Clone, PartialEq)]
pub struct DumpRow {
    pub example_id: usize,
    pub label: usize,
    pub vector: Vec<f64>,
}

/// `[CLS]` vectors of one layer at one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDump {
    pub epoch: usize,
    /// 1-based layer index.
    pub layer: usize,
    pub rows: Vec<DumpRow>,
}

impl LayerDump {
    /// Dumps the requested layers (1-based; empty means all) for `data`,
    /// whose rows are identified by `ids`.
    pub fn collect(
        model: &Model,
        data: &[Encoded],
        ids: &[usize],
        epoch: usize,
        layers: &[usize],
    ) -> Result<Vec<LayerDump>> {
        if ids.len() != data.len() {
            return Err(contract("one example id per dumped example is required"));
        }
        let l = model.config.encoder.layers;
        let layers: Vec<usize> = if layers.is_empty() {
            (1..=l).collect()
        } else {
            layers.to_vec()
        };
        for &layer in &layers {
            if layer == 0 || layer > l {
                return Err(contract(format!(
                    "layer {layer} requested but the encoder has layers 1..={l}"
                )));
            }
        }
        let inputs: Vec<_> = data.iter().map(|e| e.input.clone()).collect();
        let traces = model.cls_traces(&inputs)?;
        Ok(layers
            .iter()
            .map(|&layer| LayerDump {
                epoch,
                layer,
                rows: traces
                    .iter()
                    .zip(data)
                    .zip(ids)
                    .map(|((t, e), &id)| DumpRow {
                        example_id: id,
                        label: e.label,
                        vector: t.vectors[layer - 1].clone(),
                    })
                    .collect(),
            })
            .collect())
    }

    pub fn file_name(&self) -> String {
        format!("epoch{}_layer{}.csv", self.epoch, self.layer)
    }

    pub fn hidden(&self) -> usize {
        self.rows.first().map_or(0, |r| r.vector.len())
    }

    /// `example_id,label,v0,…,v{H-1}` followed by one row per example.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("example_id,label");
        for i in 0..self.hidden() {
            let _ = write!(out, ",v{i}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.example_id, r.label);
            for v in &r.vector {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, epoch: usize, layer: usize) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::Data {
            line: 1,
            message: "empty dump file".into(),
        })?;
        let width = header.split(',').count();
        if width < 3 || !header.starts_with("example_id,label,") {
            return Err(Error::Data {
                line: 1,
                message: format!("unexpected dump header '{header}'"),
            });
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: String| Error::Data {
                line: i + 1,
                message: m,
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != width {
                return Err(bad(format!(
                    "expected {width} fields, got {}",
                    fields.len()
                )));
            }
            let example_id = fields[0]
                .parse()
                .map_err(|e| bad(format!("example_id: {e}")))?;
            let label = fields[1].parse().map_err(|e| bad(format!("label: {e}")))?;
            let vector = fields[2..]
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| bad(format!("value '{f}': {e}")))
                })
                .collect::<Result<_>>()?;
            rows.push(DumpRow {
                example_id,
                label,
                vector,
            });
        }
        Ok(Self { epoch, layer, rows })
    }
}

/// Writes each dump to `dir/epoch{E}_layer{L}.csv`.
pub fn write_layer_dumps(dir: &Path, dumps: &[LayerDump]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    dumps
        .iter()
        .map(|d| {
            let path = dir.join(d.file_name());
            write_atomic(&path, d.to_csv().as_bytes())?;
            Ok(path)
        })
        .collect()
}

fn parse_dump_name(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix("epoch")?.strip_suffix(".csv")?;
    let (e, l) = rest.split_once("_layer")?;
    Some((e.parse().ok()?, l.parse().ok()?))
}

/// Reads every `epoch{E}_layer{L}.csv` in `dir`, ordered by (epoch, layer).
pub fn read_layer_dumps(dir: &Path) -> Result<Vec<LayerDump>> {
    let mut found = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(key) = parse_dump_name(name) {
            found.insert(key, path);
        }
    }
    found
        .into_iter()
        .map(|((e, l), path)| LayerDump::from_csv(&fs::read_to_string(path)?, e, l))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedPoint {
    pub example_id: usize,
    pub label: usize,
    pub coords: Vec<f64>,
}

/// Principal-component projection of one dump.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// Orthonormal principal directions, largest variance first.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component, descending.
    pub explained_variance: Vec<f64>,
    pub mean: Vec<f64>,
    pub points: Vec<ProjectedPoint>,
}

impl Projection {
    pub fn to_csv(&self) -> String {
        let k = self.components.len();
        let names: Vec<String> = if k == 2 {
            vec!["x".into(), "y".into()]
        } else {
            (0..k).map(|i| format!("pc{i}")).collect()
        };
        let mut out = format!("example_id,label,{}\n", names.join(","));
        for p in &self.points {
            let _ = write!(out, "{},{}", p.example_id, p.label);
            for c in &p.coords {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

/// Singular value decomposition `A = U Σ Vᵀ` of an `n × p` row-major matrix
/// by one-sided Jacobi rotations. Returns `(σ, V)` with `V` as `p` column
/// vectors, unsorted.
fn jacobi_svd(a: &[f64], n: usize, p: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    // column-major working copy
    let mut cols: Vec<Vec<f64>> = (0..p)
        .map(|j| (0..n).map(|i| a[i * p + j]).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..p)
        .map(|j| (0..p).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    for _sweep in 0..100 {
        let mut rotated = false;
        for j in 0..p {
            for k in j + 1..p {
                let alpha = dot(&cols[j], &cols[j]);
                let beta = dot(&cols[k], &cols[k]);
                let gamma = dot(&cols[j], &cols[k]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for m in [&mut cols, &mut v] {
                    let (left, right) = m.split_at_mut(k);
                    for (x, y) in left[j].iter_mut().zip(right[0].iter_mut()) {
                        let (xj, xk) = (*x, *y);
                        *x = c * xj - s * xk;
                        *y = s * xj + c * xk;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let sigma = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    (sigma, v)
}

/// Projects a dump onto its top-`k` principal components.
///
/// Rows are mean-centered; components are the leading right singular
/// vectors of the centered matrix, each signed so its first nonzero entry is
/// positive; explained variance is `σ² / (n − 1)`.
pub fn pca_project(dump: &LayerDump, k: usize) -> Result<Projection> {
    let n = dump.rows.len();
    let p = dump.hidden();
    if k == 0 || k > p {
        return Err(contract(format!(
            "cannot take {k} components of {p}-dim data"
        )));
    }
    if dump.rows.iter().any(|r| r.vector.len() != p) {
        return Err(contract("dump rows differ in length"));
    }
    if n < 2 || dump.rows.iter().all(|r| r.vector == dump.rows[0].vector) {
        return Err(Error::Degenerate(
            "PCA needs at least two distinct vectors".into(),
        ));
    }
    let mut mean = vec![0.0; p];
    for r in &dump.rows {
        mean.iter_mut().zip(&r.vector).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = dump
        .rows
        .iter()
        .flat_map(|r| r.vector.iter().zip(&mean).map(|(v, m)| v - m))
        .collect();

    let (sigma, v) = jacobi_svd(&centered, n, p);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));

    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for &j in &order[..k] {
        let mut comp = v[j].clone();
        let scale = comp.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if let Some(first) = comp.iter().find(|x| x.abs() > 1e-12 * scale) {
            if *first < 0.0 {
                comp.iter_mut().for_each(|x| *x = -*x);
            }
        }
        components.push(comp);
        explained_variance.push(sigma[j] * sigma[j] / (n - 1) as f64);
    }

    let points = dump
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let row = &centered[i * p..(i + 1) * p];
            ProjectedPoint {
                example_id: r.example_id,
                label: r.label,
                coords: components
                    .iter()
                    .map(|c| c.iter().zip(row).map(|(a, b)| a * b).sum())
                    .collect(),
            }
        })
        .collect();
    Ok(Projection {
        components,
        explained_variance,
        mean,
        points,
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean distance of points to their class centroid divided by the mean
/// pairwise distance between class centroids. Lower means tighter, better
/// separated classes.
pub fn cluster_score(proj: &Projection) -> Result<f64> {
    let mut groups: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for p in &proj.points {
        groups.entry(p.label).or_default().push(&p.coords);
    }
    if groups.len() < 2 {
        return Err(contract("cluster score needs at least two classes"));
    }
    let dim = proj.points[0].coords.len();
    let centroids: BTreeMap<usize, Vec<f64>> = groups
        .iter()
        .map(|(&label, pts)| {
            let mut c = vec![0.0; dim];
            for p in pts {
                c.iter_mut().zip(p.iter()).for_each(|(a, b)| *a += b);
            }
            c.iter_mut().for_each(|a| *a /= pts.len() as f64);
            (label, c)
        })
        .collect();
    let within = proj
        .points
        .iter()
        .map(|p| dist(&p.coords, &centroids[&p.label]))
        .sum::<f64>()
        / proj.points.len() as f64;
    let cs: Vec<&Vec<f64>> = centroids.values().collect();
    let mut between = 0.0;
    let mut pairs = 0;
    for i in 0..cs.len() {
        for j in i + 1..cs.len() {
            between += dist(cs[i], cs[j]);
            pairs += 1;
        }
    }
    let between = between / pairs as f64;
    if between == 0.0 {
        if within == 0.0 {
            return Err(Error::Degenerate("all points coincide".into()));
        }
        return Ok(f64::INFINITY);
    }
    Ok(within / between)
}

/// Score row for one projected dump.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSummary {
    pub epoch: usize,
    pub layer: usize,
    pub score: f64,
    pub explained_variance: Vec<f64>,
}

/// Projects every dump in `dumps_dir` to 2-D, writing
/// `proj_epoch{E}_layer{L}.csv` per dump plus `cluster_scores.csv`
/// (`epoch,layer,cluster_score,explained_variance_0,explained_variance_1`).
pub fn project_dumps(dumps_dir: &Path, out_dir: &Path) -> Result<Vec<ProjectionSummary>> {
    let dumps = read_layer_dumps(dumps_dir)?;
    if dumps.is_empty() {
        return Err(contract(format!(
            "no epoch*_layer*.csv dumps in {}",
            dumps_dir.display()
        )));
    }
    fs::create_dir_all(out_dir)?;
    let mut summaries = Vec::with_capacity(dumps.len());
    let mut table =
        String::from("epoch,layer,cluster_score,explained_variance_0,explained_variance_1\n");
    for d in &dumps {
        let proj = pca_project(d, 2)?;
        let score = cluster_score(&proj)?;
        write_atomic(
            &out_dir.join(format!("proj_epoch{}_layer{}.csv", d.epoch, d.layer)),
            proj.to_csv().as_bytes(),
        )?;
        let _ = writeln!(
            table,
            "{},{},{},{},{}",
            d.epoch, d.layer, score, proj.explained_variance[0], proj.explained_variance[1]
        );
        summaries.push(ProjectionSummary {
            epoch: d.epoch,
            layer: d.layer,
            score,
            explained_variance: proj.explained_variance,
        });
    }
    write_atomic(&out_dir.join("cluster_scores.csv"), table.as_bytes())?;
    Ok(summaries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dump(rows: &[(usize, &[f64])]) -> LayerDump {
        LayerDump {
            epoch: 1,
            layer: 1,
            rows: rows
                .iter()
                .enumerate()
                .map(|(i, (label, v))| DumpRow {
                    example_id: i,
                    label: *label,
                    vector: v.to_vec(),
                })
                .collect(),
        }
    }

    #[test]
    fn points_on_a_line() {
        let d = dump(&[
            (0, &[1.0, 2.0, 3.0]),
            (0, &[2.0, 4.0, 6.0]),
            (1, &[-1.0, -2.0, -3.0]),
            (1, &[0.5, 1.0, 1.5]),
        ]);
        let p = pca_project(&d, 2).unwrap();
        assert!(p.explained_variance[1].abs() < 1e-12);
        assert!(p.points.iter().all(|pt| pt.coords[1].abs() < 1e-8));
        let c = &p.components;
        let dot: f64 = c[0].iter().zip(&c[1]).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-8);
    }

    #[test]
    fn axis_aligned_data_is_left_alone() {
        let d = dump(&[
            (0, &[3.0, 0.5]),
            (0, &[-3.0, 0.5]),
            (1, &[1.0, -0.5]),
            (1, &[-1.0, -0.5]),
        ]);
        let p = pca_project(&d, 2).unwrap();
        assert!((p.components[0][0].abs() - 1.0).abs() < 1e-12);
        assert!((p.components[1][1].abs() - 1.0).abs() < 1e-12);
        assert!(p.components[0][0] > 0.0 && p.components[1][1] > 0.0);
        for (pt, row) in p.points.iter().zip(&d.rows) {
            assert!((pt.coords[0] - row.vector[0]).abs() < 1e-12);
            assert!((pt.coords[1] - row.vector[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_inputs() {
        let same = dump(&[(0, &[1.0, 2.0]), (1, &[1.0, 2.0])]);
        assert!(matches!(pca_project(&same, 2), Err(Error::Degenerate(_))));
        let d = dump(&[(0, &[1.0, 2.0]), (1, &[3.0, 2.0])]);
        assert!(pca_project(&d, 3).is_err());
    }

    #[test]
    fn collapsed_classes_score_zero() {
        let proj = Projection {
            components: vec![],
            explained_variance: vec![],
            mean: vec![],
            points: [
                (0, [1.0, 1.0]),
                (0, [1.0, 1.0]),
                (1, [4.0, 5.0]),
                (1, [4.0, 5.0]),
            ]
            .iter()
            .enumerate()
            .map(|(i, (l, c))| ProjectedPoint {
                example_id: i,
                label: *l,
                coords: c.to_vec(),
            })
            .collect(),
        };
        assert_eq!(cluster_score(&proj).unwrap(), 0.0);
    }

    #[test]
    fn single_class_is_rejected() {
        let proj = Projection {
            components: vec![],
            explained_variance: vec![],
            mean: vec![],
            points: vec![ProjectedPoint {
                example_id: 0,
                label: 0,
                coords: vec![0.0, 0.0],
            }],
        };
        assert!(cluster_score(&proj).is_err());
    }

    #[test]
    fn dump_csv_round_trip() {
        let d = dump(&[(2, &[0.1, -3.25e-7]), (0, &[1.0 / 3.0, 2.0])]);
        let text = d.to_csv();
        assert!(text.starts_with("example_id,label,v0,v1\n"));
        assert_eq!(LayerDump::from_csv(&text, 1, 1).unwrap(), d);
        assert_eq!(parse_dump_name("epoch6_layer4.csv"), Some((6, 4)));
        assert_eq!(parse_dump_name("proj_epoch6_layer4.csv"), None);
    }
}
