//! File formats: the training-set container, 8-bit PGM images with JSON sidecars,
//! and CSV metric tables.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distributions::{LabelingPolicy, TrainingItem, TrainingSet};
use crate::error::{Error, Result};
use crate::feature_space::CosineMatrix;
use crate::grid::{ConditionSet, GridShape, Image, Seed, SubsetMap};
use crate::locality::{GradientMap, LocalityProfile};

const MAGIC: &[u8; 8] = b"CPCTSET1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingHeader {
    pub shape: GridShape,
    pub subsets: SubsetMap,
    pub policy: LabelingPolicy,
    pub seed: Seed,
    pub count_min: usize,
    pub count_max: usize,
    pub n_items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub index: usize,
    pub true_conditions: Vec<usize>,
    pub labeled_conditions: Vec<usize>,
}

/// Writes `MAGIC | u64 LE header length | JSON header | f32 LE pixels` to `data`
/// and one JSON line of labels per item to `labels`.
pub fn write_training_set<W: Write, L: Write>(ts: &TrainingSet, data: &mut W, labels: &mut L) -> Result<()> {
    let header = TrainingHeader {
        shape: ts.shape(),
        subsets: ts.subsets.clone(),
        policy: ts.policy,
        seed: ts.seed,
        count_min: ts.count_min,
        count_max: ts.count_max,
        n_items: ts.len(),
    };
    let json = serde_json::to_vec(&header)?;
    data.write_all(MAGIC)?;
    data.write_all(&(json.len() as u64).to_le_bytes())?;
    data.write_all(&json)?;
    for item in &ts.items {
        for v in item.image.values() {
            data.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    for (index, item) in ts.items.iter().enumerate() {
        let rec = LabelRecord {
            index,
            true_conditions: item.true_conditions.as_slice().to_vec(),
            labeled_conditions: item.labeled_conditions.as_slice().to_vec(),
        };
        serde_json::to_writer(&mut *labels, &rec)?;
        labels.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_training_set<R: Read, L: BufRead>(data: &mut R, labels: L) -> Result<TrainingSet> {
    let mut magic = [0u8; 8];
    data.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a training-set container".into()));
    }
    let mut len = [0u8; 8];
    data.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(Error::Format(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len];
    data.read_exact(&mut json)?;
    let header: TrainingHeader = serde_json::from_slice(&json)?;
    if header.subsets.shape() != header.shape {
        return Err(Error::Format("header shape disagrees with its subset map".into()));
    }
    let n = header.shape.len();
    let mut buf = vec![0u8; 4 * n];
    let mut images = Vec::with_capacity(header.n_items);
    for _ in 0..header.n_items {
        data.read_exact(&mut buf)?;
        let values = buf
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        images.push(Image::new(header.shape, values)?);
    }
    if data.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Format("trailing bytes after image payload".into()));
    }
    let mut items = Vec::with_capacity(header.n_items);
    for (line_no, line) in labels.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord = serde_json::from_str(&line)?;
        if rec.index != items.len() || rec.index >= images.len() {
            return Err(Error::Format(format!("label line {} has index {}", line_no + 1, rec.index)));
        }
        let m = header.subsets.len();
        let tc: ConditionSet = rec.true_conditions.into_iter().collect();
        let lc: ConditionSet = rec.labeled_conditions.into_iter().collect();
        tc.check_within(m)?;
        lc.check_within(m)?;
        items.push(TrainingItem {
            image: images[rec.index].clone(),
            true_conditions: tc,
            labeled_conditions: lc,
        });
    }
    if items.len() != header.n_items {
        return Err(Error::Format(format!("{} label lines for {} images", items.len(), header.n_items)));
    }
    Ok(TrainingSet {
        subsets: header.subsets,
        policy: header.policy,
        seed: header.seed,
        count_min: header.count_min,
        count_max: header.count_max,
        items,
    })
}

pub fn save_training_set(ts: &TrainingSet, data: &Path, labels: &Path) -> Result<()> {
    let mut d = Vec::new();
    let mut l = Vec::new();
    write_training_set(ts, &mut d, &mut l)?;
    fs::write(data, d)?;
    fs::write(labels, l)?;
    Ok(())
}

pub fn load_training_set(data: &Path, labels: &Path) -> Result<TrainingSet> {
    let mut d = fs::File::open(data)?;
    let l = BufReader::new(fs::File::open(labels)?);
    read_training_set(&mut d, l)
}

/// Affine map recorded next to a PGM: `pixel = round(255 (v - min) / (max - min))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgmSidecar {
    pub width: usize,
    pub height: usize,
    pub min: f64,
    pub max: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
}

/// Binary 8-bit PGM bytes and the value range used.
pub fn encode_pgm(shape: GridShape, values: &[f64]) -> Result<(Vec<u8>, f64, f64)> {
    if values.len() != shape.len() {
        return Err(Error::Shape { expected: shape.len(), got: values.len() });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("cannot encode non-finite pixels".into()));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut out = format!("P5\n{} {}\n255\n", shape.width, shape.height).into_bytes();
    out.extend(values.iter().map(|v| {
        if span > 0.0 {
            (255.0 * (v - min) / span).round() as u8
        } else {
            0
        }
    }));
    Ok((out, min, max))
}

/// Writes `stem.pgm` and `stem.json`; returns both paths.
pub fn write_pgm(
    dir: &Path,
    stem: &str,
    shape: GridShape,
    values: &[f64],
    extra: Option<serde_json::Value>,
) -> Result<Vec<std::path::PathBuf>> {
    let (bytes, min, max) = encode_pgm(shape, values)?;
    let pgm = dir.join(format!("{stem}.pgm"));
    let json = dir.join(format!("{stem}.json"));
    fs::write(&pgm, bytes)?;
    let side = PgmSidecar {
        width: shape.width,
        height: shape.height,
        min,
        max,
        extra,
    };
    fs::write(&json, to_json_pretty(&side)?)?;
    Ok(vec![pgm, json])
}

/// Reads a binary PGM back to values using its sidecar range.
pub fn read_pgm(pgm: &Path, sidecar: &Path) -> Result<(GridShape, Vec<f64>)> {
    let bytes = fs::read(pgm)?;
    let side: PgmSidecar = serde_json::from_slice(&fs::read(sidecar)?)?;
    let header = format!("P5\n{} {}\n255\n", side.width, side.height);
    let body = bytes
        .strip_prefix(header.as_bytes())
        .ok_or_else(|| Error::Format("unexpected PGM header".into()))?;
    let shape = GridShape::new(side.height, side.width)?;
    if body.len() != shape.len() {
        return Err(Error::Shape { expected: shape.len(), got: body.len() });
    }
    let span = side.max - side.min;
    Ok((shape, body.iter().map(|&b| side.min + span * f64::from(b) / 255.0).collect()))
}

pub fn gradient_map_sidecar(map: &GradientMap) -> serde_json::Value {
    serde_json::json!({
        "target_row": map.target.0,
        "target_col": map.target.1,
        "t": map.t,
        "normalization": "affine min-max to 0..255",
    })
}

/// Stable pretty JSON with a trailing newline.
pub fn to_json_pretty<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v)?;
    out.push(b'\n');
    Ok(out)
}

/// One locality metrics row.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalityRow<'a> {
    pub experiment: &'a str,
    pub variant: &'a str,
    pub profile: &'a LocalityProfile,
}

/// Locality CSV: fixed leading columns, then one influence column per condition id.
pub fn locality_csv(rows: &[LocalityRow<'_>], num_conditions: usize) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["experiment", "variant", "t", "target_x", "target_y", "area90", "total_energy"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..num_conditions).map(|k| format!("influence_{k}")));
    w.write_record(&header)?;
    for r in rows {
        let p = r.profile;
        let mut rec = vec![
            r.experiment.to_string(),
            r.variant.to_string(),
            format!("{}", p.gradient_map.t),
            p.gradient_map.target.1.to_string(),
            p.gradient_map.target.0.to_string(),
            p.area90.map_or_else(String::new, |a| a.to_string()),
            format!("{:e}", p.total_energy),
        ];
        rec.extend((0..num_conditions).map(|k| p.influence.get(k).map_or_else(String::new, |v| format!("{v:e}"))));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Cosine matrix CSV: header of condition labels, undefined entries empty.
pub fn cosine_csv(c: &CosineMatrix) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(c.labels.iter().map(|l| format!("c{l}")))?;
    for row in &c.values {
        w.write_record(row.iter().map(|v| v.map_or_else(String::new, |x| format!("{x:.12}"))))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Cosine matrix as heatmap values on a `labels x labels` grid, undefined entries 0.
pub fn cosine_heatmap(c: &CosineMatrix) -> Result<(GridShape, Vec<f64>)> {
    let n = c.labels.len();
    let shape = GridShape::new(n, n)?;
    Ok((shape, c.values.iter().flatten().map(|v| v.unwrap_or(0.0)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{default_cpc, sample_training_set};
    use crate::locality::{InfluenceVector, LocalityProfile};

    #[test]
    fn training_set_round_trip() {
        let model = default_cpc(GridShape::new(8, 8).unwrap(), 2, 0.05).unwrap();
        let ts = sample_training_set(&model, 1, 3, LabelingPolicy::SingleLabel, 20, Seed(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (d, l) = (dir.path().join("ts.bin"), dir.path().join("ts.labels.jsonl"));
        save_training_set(&ts, &d, &l).unwrap();
        let back = load_training_set(&d, &l).unwrap();
        assert_eq!(back.len(), ts.len());
        assert_eq!(back.subsets, ts.subsets);
        assert_eq!(back.policy, ts.policy);
        for (a, b) in back.items.iter().zip(&ts.items) {
            assert_eq!(a.true_conditions, b.true_conditions);
            assert_eq!(a.labeled_conditions, b.labeled_conditions);
            for (u, v) in a.image.values().iter().zip(b.image.values()) {
                assert_eq!(*u, f64::from(*v as f32));
            }
        }
    }

    #[test]
    fn training_set_rejects_corruption() {
        let model = default_cpc(GridShape::new(4, 4).unwrap(), 2, 0.05).unwrap();
        let ts = sample_training_set(&model, 1, 2, LabelingPolicy::AllLabels, 3, Seed(1)).unwrap();
        let (mut d, mut l) = (Vec::new(), Vec::new());
        write_training_set(&ts, &mut d, &mut l).unwrap();
        let mut bad = d.clone();
        bad[0] = b'X';
        assert!(matches!(read_training_set(&mut bad.as_slice(), l.as_slice()), Err(Error::Format(_))));
        let truncated = &d[..d.len() - 1];
        assert!(matches!(read_training_set(&mut &truncated[..], l.as_slice()), Err(Error::Io(_))));
        let fewer: Vec<u8> = l.split(|b| *b == b'\n').next().unwrap().to_vec();
        assert!(matches!(read_training_set(&mut d.as_slice(), fewer.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn pgm_round_trip_within_quantization() {
        let shape = GridShape::new(3, 5).unwrap();
        let values: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
        let dir = tempfile::tempdir().unwrap();
        let paths = write_pgm(dir.path(), "img", shape, &values, None).unwrap();
        let (s, back) = read_pgm(&paths[0], &paths[1]).unwrap();
        assert_eq!(s, shape);
        let span = 2.0;
        for (a, b) in values.iter().zip(&back) {
            assert!((a - b).abs() <= span / 255.0);
        }
        let (flat, min, max) = encode_pgm(shape, &[1.0; 15]).unwrap();
        assert_eq!((min, max), (1.0, 1.0));
        assert!(flat.ends_with(&[0u8; 15]));
    }

    #[test]
    fn locality_csv_columns() {
        let shape = GridShape::new(2, 2).unwrap();
        let profile = LocalityProfile {
            gradient_map: GradientMap { shape, target: (1, 0), t: 3.0, values: vec![1.0, 0.0, 0.0, 0.0] },
            influence: InfluenceVector { target: (1, 0), t: 3.0, values: vec![(2, 0.5)] },
            area90: Some(1),
            total_energy: 1.0,
        };
        let out = locality_csv(&[LocalityRow { experiment: "exp1", variant: "lcs", profile: &profile }], 4).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "experiment,variant,t,target_x,target_y,area90,total_energy,influence_0,influence_1,influence_2,influence_3"
        );
        assert_eq!(lines.next().unwrap(), "exp1,lcs,3,0,1,1,1e0,,,5e-1,");
    }

    #[test]
    fn cosine_csv_header_is_labels() {
        let c = CosineMatrix::from_means(vec![0, 1], vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]).unwrap();
        let text = String::from_utf8(cosine_csv(&c).unwrap()).unwrap();
        assert!(text.starts_with("c0,c1\n1.000000000000,0.000000000000\n"));
        let (shape, v) = cosine_heatmap(&c).unwrap();
        assert_eq!((shape.height, v.len()), (2, 4));
    }
}
