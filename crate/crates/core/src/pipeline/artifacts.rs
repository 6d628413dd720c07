//! CSV layouts of the stage artifacts.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterModel, DatasetSplit, LesionFeature, LesionPair, PairSet, SplitTag};
use crate::error::{Error, Result};
use crate::grabcut::{Point, RecistAnnotation, Segment};

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(f))
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AnnotationRow {
    image_path: String,
    lesion_id: String,
    x11: f64,
    y11: f64,
    x12: f64,
    y12: f64,
    x21: f64,
    y21: f64,
    x22: f64,
    y22: f64,
}

/// One row of the annotation CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionRecord {
    pub image_path: PathBuf,
    pub recist: RecistAnnotation,
}

impl LesionRecord {
    pub fn id(&self) -> &str {
        &self.recist.image_id
    }
}

/// Reads `image_path,lesion_id,x11,y11,x12,y12,x21,y21,x22,y22`; the first
/// pair is the major diameter. Lesion ids must be unique.
pub fn read_annotations(path: &Path) -> Result<Vec<LesionRecord>> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for row in reader(path)?.deserialize() {
        let r: AnnotationRow = row?;
        if !seen.insert(r.lesion_id.clone()) {
            return Err(Error::IdMismatch(format!("duplicate lesion_id {} in {}", r.lesion_id, path.display())));
        }
        let seg = |x1, y1, x2, y2| Segment::new(Point::new(x1, y1), Point::new(x2, y2));
        let recist = RecistAnnotation::new(r.lesion_id, seg(r.x11, r.y11, r.x12, r.y12), seg(r.x21, r.y21, r.x22, r.y22))?;
        out.push(LesionRecord { image_path: r.image_path.into(), recist });
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, records: &[LesionRecord]) -> Result<()> {
    let mut w = writer(path)?;
    for r in records {
        let (a, b) = (r.recist.major, r.recist.minor);
        w.serialize(AnnotationRow {
            image_path: r.image_path.to_string_lossy().into_owned(),
            lesion_id: r.recist.image_id.clone(),
            x11: a.a.x,
            y11: a.a.y,
            x12: a.b.x,
            y12: a.b.y,
            x21: b.a.x,
            y21: b.a.y,
            x22: b.b.x,
            y22: b.b.y,
        })?;
    }
    finish(w, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchetypeRow {
    pub lesion_id: String,
    pub archetype: usize,
    pub name: String,
}

pub fn read_archetypes(path: &Path) -> Result<Vec<ArchetypeRow>> {
    reader(path)?.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_archetypes(path: &Path, rows: &[ArchetypeRow]) -> Result<()> {
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    finish(w, path)
}

/// `lesion_id,f0,f1,...`
pub fn write_features(path: &Path, features: &[LesionFeature]) -> Result<()> {
    let mut w = writer(path)?;
    let d = features.first().map_or(0, |f| f.vector.len());
    let mut header = vec!["lesion_id".to_string()];
    header.extend((0..d).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for f in features {
        let mut rec = vec![f.lesion_id.clone()];
        rec.extend(f.vector.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    finish(w, path)
}

pub fn read_features(path: &Path) -> Result<Vec<LesionFeature>> {
    let mut out: Vec<LesionFeature> = Vec::new();
    for (line, rec) in reader(path)?.records().enumerate() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or_default().to_string();
        let vector = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|e| Error::InvalidArgument(format!("{}: row {}: {e}", path.display(), line + 2))))
            .collect::<Result<Vec<_>>>()?;
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("{}: row {} has non-finite values", path.display(), line + 2)));
        }
        if let Some(first) = out.first() {
            if first.vector.len() != vector.len() {
                return Err(Error::DimensionMismatch(format!("{}: row {} has {} values, expected {}", path.display(), line + 2, vector.len(), first.vector.len())));
            }
        }
        out.push(LesionFeature { lesion_id: id, vector });
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct ClusterRow {
    lesion_id: String,
    cluster: usize,
}

/// Writes `clusters.csv` (assignments) and `centroids.csv` (`cluster,c0,c1,...`).
pub fn write_clusters(assign: &Path, centroids: &Path, model: &ClusterModel) -> Result<()> {
    let mut w = writer(assign)?;
    for (id, &c) in model.ids.iter().zip(&model.labels) {
        w.serialize(ClusterRow { lesion_id: id.clone(), cluster: c })?;
    }
    finish(w, assign)?;
    let mut w = writer(centroids)?;
    let d = model.centroids.first().map_or(0, Vec::len);
    let mut header = vec!["cluster".to_string()];
    header.extend((0..d).map(|i| format!("c{i}")));
    w.write_record(&header)?;
    for (j, c) in model.centroids.iter().enumerate() {
        let mut rec = vec![j.to_string()];
        rec.extend(c.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    finish(w, centroids)
}

/// Cluster assignments; centroids and inertia are not needed downstream.
pub fn read_clusters(path: &Path) -> Result<ClusterModel> {
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for row in reader(path)?.deserialize() {
        let r: ClusterRow = row?;
        ids.push(r.lesion_id);
        labels.push(r.cluster);
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    Ok(ClusterModel { k, centroids: Vec::new(), ids, labels, inertia: f64::NAN })
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitRow {
    lesion_id: String,
    split: String,
}

pub fn write_split(path: &Path, split: &DatasetSplit) -> Result<()> {
    let mut w = writer(path)?;
    for tag in SplitTag::ALL {
        for id in split.get(tag) {
            w.serialize(SplitRow { lesion_id: id.clone(), split: tag.to_string() })?;
        }
    }
    finish(w, path)
}

pub fn read_split(path: &Path) -> Result<DatasetSplit> {
    let mut split = DatasetSplit::default();
    for row in reader(path)?.deserialize() {
        let r: SplitRow = row?;
        let tag: SplitTag = r.split.parse()?;
        match tag {
            SplitTag::Train => split.train.push(r.lesion_id),
            SplitTag::Val => split.val.push(r.lesion_id),
            SplitTag::Test => split.test.push(r.lesion_id),
        }
    }
    Ok(split)
}

#[derive(Debug, Serialize, Deserialize)]
struct PairRow {
    lesion_id_a: String,
    lesion_id_b: String,
    cluster: Option<usize>,
    split: String,
}

/// `lesion_id_a,lesion_id_b,cluster,split`; `cluster` is empty for pairs
/// drawn without clusters.
pub fn write_pairs(path: &Path, sets: &[PairSet]) -> Result<()> {
    let mut w = writer(path)?;
    for set in sets {
        for p in &set.pairs {
            w.serialize(PairRow { lesion_id_a: p.a.clone(), lesion_id_b: p.b.clone(), cluster: p.cluster, split: set.split.to_string() })?;
        }
    }
    finish(w, path)
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairSet>> {
    let mut by_split: HashMap<SplitTag, Vec<LesionPair>> = HashMap::new();
    for row in reader(path)?.deserialize() {
        let r: PairRow = row?;
        let tag: SplitTag = r.split.parse()?;
        by_split.entry(tag).or_default().push(LesionPair { a: r.lesion_id_a, b: r.lesion_id_b, cluster: r.cluster });
    }
    Ok(SplitTag::ALL.iter().map(|&t| PairSet { split: t, pairs: by_split.remove(&t).unwrap_or_default() }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotations_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let seg = |a: (f64, f64), b: (f64, f64)| Segment::new(Point::new(a.0, a.1), Point::new(b.0, b.1));
        let recs = vec![LesionRecord {
            image_path: "img/0.png".into(),
            recist: RecistAnnotation::new("l0", seg((1.0, 5.0), (9.5, 5.0)), seg((5.0, 2.0), (5.0, 8.25))).unwrap(),
        }];
        write_annotations(&p, &recs).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("image_path,lesion_id,x11,y11,x12,y12,x21,y21,x22,y22\n"));
        assert_eq!(read_annotations(&p).unwrap(), recs);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let row = "i.png,l0,0,5,10,5,5,0,5,8\n";
        fs::write(&p, format!("image_path,lesion_id,x11,y11,x12,y12,x21,y21,x22,y22\n{row}{row}")).unwrap();
        assert!(matches!(read_annotations(&p), Err(Error::IdMismatch(_))));
    }

    #[test]
    fn features_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        let f = vec![
            LesionFeature { lesion_id: "a".into(), vector: vec![0.1, 1.0 / 3.0, -2e-17] },
            LesionFeature { lesion_id: "b".into(), vector: vec![5.0, 0.0, 1e300] },
        ];
        write_features(&p, &f).unwrap();
        assert_eq!(read_features(&p).unwrap(), f);
        fs::write(&p, "lesion_id,f0,f1\na,1,2\nb,3\n").unwrap();
        assert!(read_features(&p).is_err());
    }

    #[test]
    fn split_and_pairs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let split = DatasetSplit { train: vec!["a".into(), "b".into()], val: vec!["c".into()], test: vec![] };
        write_split(&dir.path().join("s.csv"), &split).unwrap();
        assert_eq!(read_split(&dir.path().join("s.csv")).unwrap(), split);
        let sets = vec![
            PairSet { split: SplitTag::Train, pairs: vec![LesionPair { a: "a".into(), b: "b".into(), cluster: Some(3) }] },
            PairSet { split: SplitTag::Val, pairs: vec![LesionPair { a: "c".into(), b: "d".into(), cluster: None }] },
            PairSet { split: SplitTag::Test, pairs: vec![] },
        ];
        let p = dir.path().join("p.csv");
        write_pairs(&p, &sets).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "lesion_id_a,lesion_id_b,cluster,split\na,b,3,train\nc,d,,val\n");
        assert_eq!(read_pairs(&p).unwrap(), sets);
    }
}
