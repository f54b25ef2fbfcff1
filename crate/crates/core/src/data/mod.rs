//! Dataset manifests, image sources, reference selection and
//! participant-exclusive folds.

pub mod container;
pub mod pgm;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::MAX_INTENSITY;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub participant: String,
    pub frame: u32,
    /// `file.csnt#entry` or a `.pgm` path, relative to the manifest.
    pub image: String,
    pub is_reference: bool,
    pub intensities: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub au_names: Vec<String>,
    pub records: Vec<FrameRecord>,
    /// Free text, written as leading `#` lines of the CSV.
    pub provenance: String,
}

impl DatasetManifest {
    /// Parses manifest CSV text. `source` is only used in error messages.
    /// Image references are not resolved here.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let row_err = |row: usize, message: String| Error::Row {
            path: source.to_string(),
            row,
            message,
        };
        let mut provenance = Vec::new();
        let mut lines = text.lines().enumerate().skip_while(|(_, l)| {
            if let Some(c) = l.strip_prefix('#') {
                provenance.push(c.strip_prefix(' ').unwrap_or(c).to_string());
                true
            } else {
                false
            }
        });
        let (hrow, header) = lines.next().ok_or_else(|| row_err(1, "missing header".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        for (i, want) in ["participant", "frame", "image", "ref"].iter().enumerate() {
            if cols.get(i) != Some(want) {
                return Err(row_err(hrow + 1, format!("missing column `{want}` at position {}", i + 1)));
            }
        }
        let au_names = cols[4..]
            .iter()
            .map(|c| {
                c.strip_prefix("au_")
                    .filter(|n| !n.is_empty())
                    .map(String::from)
                    .ok_or_else(|| row_err(hrow + 1, format!("column `{c}` is not of the form au_<NAME>")))
            })
            .collect::<Result<Vec<_>>>()?;
        if au_names.is_empty() {
            return Err(row_err(hrow + 1, "no au_<NAME> columns".into()));
        }

        let mut records = Vec::new();
        let mut keys = HashSet::new();
        for (i, line) in lines {
            let row = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != cols.len() {
                return Err(row_err(row, format!("expected {} fields, got {}", cols.len(), f.len())));
            }
            if f[0].is_empty() {
                return Err(row_err(row, "empty participant id".into()));
            }
            let frame: u32 = f[1].parse().map_err(|_| row_err(row, format!("bad frame id `{}`", f[1])))?;
            if f[2].is_empty() {
                return Err(row_err(row, "empty image reference".into()));
            }
            let is_reference = match f[3] {
                "0" => false,
                "1" => true,
                other => return Err(row_err(row, format!("ref must be 0 or 1, got `{other}`"))),
            };
            let intensities = f[4..]
                .iter()
                .zip(&au_names)
                .map(|(v, name)| {
                    v.parse::<u8>()
                        .ok()
                        .filter(|&x| x <= MAX_INTENSITY)
                        .ok_or_else(|| row_err(row, format!("intensity for AU {name} must be in 0..=5, got `{v}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            if !keys.insert((f[0].to_string(), frame)) {
                return Err(row_err(row, format!("duplicate key (participant {}, frame {frame})", f[0])));
            }
            records.push(FrameRecord {
                participant: f[0].to_string(),
                frame,
                image: f[2].to_string(),
                is_reference,
                intensities,
            });
        }
        Ok(DatasetManifest {
            au_names,
            records,
            provenance: provenance.join("\n"),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if !self.provenance.is_empty() {
            for l in self.provenance.lines() {
                let _ = writeln!(out, "# {l}");
            }
        }
        out.push_str("participant,frame,image,ref");
        for n in &self.au_names {
            let _ = write!(out, ",au_{n}");
        }
        out.push('\n');
        for r in &self.records {
            let _ = write!(out, "{},{},{},{}", r.participant, r.frame, r.image, u8::from(r.is_reference));
            for v in &r.intensities {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Participant ids in lexicographic order.
    pub fn participants(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.participant.as_str()).collect();
        set.into_iter().collect()
    }

    /// Record indices of one participant, in manifest order.
    pub fn frames_of(&self, participant: &str) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].participant == participant)
            .collect()
    }
}

/// The participant's reference frame id: the explicitly flagged frame if
/// any, otherwise the frame with the smallest label sum (ties go to the
/// smallest frame id).
pub fn select_reference(manifest: &DatasetManifest, participant: &str) -> Result<u32> {
    let frames: Vec<&FrameRecord> = manifest.records.iter().filter(|r| r.participant == participant).collect();
    if frames.is_empty() {
        return Err(Error::Data(format!("participant {participant} not in manifest")));
    }
    let flagged: Vec<u32> = frames.iter().filter(|r| r.is_reference).map(|r| r.frame).collect();
    match flagged.as_slice() {
        [one] => return Ok(*one),
        [] => {}
        many => {
            return Err(Error::Data(format!(
                "participant {participant} has {} frames flagged as reference",
                many.len()
            )))
        }
    }
    Ok(frames
        .iter()
        .map(|r| (r.intensities.iter().map(|&v| v as u32).sum::<u32>(), r.frame))
        .min()
        .expect("nonempty")
        .1)
}

/// Assignment of participants to `k` disjoint folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldSpec {
    /// Builds folds from explicit participant lists, rejecting overlap and
    /// empty folds.
    pub fn from_lists(folds: &[Vec<String>]) -> Result<Self> {
        let mut assignment = BTreeMap::new();
        for (i, f) in folds.iter().enumerate() {
            if f.is_empty() {
                return Err(Error::Protocol(format!("fold {i} is empty")));
            }
            for p in f {
                if let Some(j) = assignment.insert(p.clone(), i) {
                    return Err(Error::Protocol(format!("participant {p} assigned to folds {j} and {i}")));
                }
            }
        }
        Ok(FoldSpec {
            k: folds.len(),
            assignment,
        })
    }

    pub fn fold_of(&self, participant: &str) -> Option<usize> {
        self.assignment.get(participant).copied()
    }

    pub fn members(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    /// Checks that every participant of `manifest` is mapped, nothing else
    /// is, and each fold is nonempty.
    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        let ps = manifest.participants();
        if let Some(p) = ps.iter().find(|p| !self.assignment.contains_key(**p)) {
            return Err(Error::Protocol(format!("participant {p} not assigned to any fold")));
        }
        if self.assignment.len() != ps.len() {
            return Err(Error::Protocol("fold spec names participants absent from the manifest".into()));
        }
        if let Some(f) = (0..self.k).find(|&f| self.members(f).is_empty()) {
            return Err(Error::Protocol(format!("fold {f} is empty")));
        }
        if let Some((p, f)) = self.assignment.iter().find(|(_, &f)| f >= self.k) {
            return Err(Error::Protocol(format!("participant {p} mapped to fold {f} of {}", self.k)));
        }
        Ok(())
    }
}

/// Sorts participants, shuffles them with `seed` and deals them round-robin
/// into `k` folds. `k` equal to the participant count is leave-one-out.
pub fn make_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldSpec> {
    let mut ps = manifest.participants();
    if k == 0 || k > ps.len() {
        return Err(Error::Protocol(format!("cannot build {k} folds from {} participants", ps.len())));
    }
    ps.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignment = ps.iter().enumerate().map(|(i, p)| (p.to_string(), i % k)).collect();
    Ok(FoldSpec { k, assignment })
}

/// A manifest with every image resolved, aligned with `manifest.records`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Tensor>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, images: Vec<Tensor>) -> Result<Self> {
        if images.len() != manifest.records.len() {
            return Err(Error::Data(format!(
                "{} images for {} records",
                images.len(),
                manifest.records.len()
            )));
        }
        if let Some(first) = images.first() {
            if first.rank() != 3 {
                return Err(Error::Data(format!("images must be [C,H,W], got {:?}", first.shape())));
            }
            if let Some(i) = images.iter().position(|t| t.shape() != first.shape()) {
                return Err(Error::Data(format!(
                    "image of record {i} has shape {:?}, expected {:?}",
                    images[i].shape(),
                    first.shape()
                )));
            }
        }
        Ok(Dataset { manifest, images })
    }

    /// Loads a manifest and resolves its image references relative to the
    /// manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let source = path.display().to_string();
        let manifest = DatasetManifest::parse(&text, &source)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut containers: HashMap<PathBuf, HashMap<String, Tensor>> = HashMap::new();
        let mut images = Vec::with_capacity(manifest.records.len());
        for (i, r) in manifest.records.iter().enumerate() {
            let dangling = |message: String| Error::Row {
                path: source.clone(),
                row: i + 2 + manifest.provenance.lines().count(),
                message,
            };
            let img = match r.image.split_once('#') {
                Some((file, entry)) => {
                    let file = base.join(file);
                    if !containers.contains_key(&file) {
                        if !file.exists() {
                            return Err(dangling(format!("image container {} does not exist", file.display())));
                        }
                        containers.insert(file.clone(), container::load(&file)?.into_iter().collect());
                    }
                    containers[&file]
                        .get(entry)
                        .cloned()
                        .ok_or_else(|| dangling(format!("no entry `{entry}` in {}", file.display())))?
                }
                None => {
                    let file = base.join(&r.image);
                    if !file.exists() {
                        return Err(dangling(format!("image {} does not exist", file.display())));
                    }
                    pgm::load(&file)?
                }
            };
            let img = match img.shape() {
                [h, w] => {
                    let (h, w) = (*h, *w);
                    img.reshape(vec![1, h, w])?
                }
                _ => img,
            };
            images.push(img);
        }
        Dataset::new(manifest, images)
    }

    pub fn num_aus(&self) -> usize {
        self.manifest.au_names.len()
    }

    /// `[C, H, W]` of every image.
    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(|t| t.shape())
    }

    /// Record index of the participant's selected reference frame.
    pub fn reference_index(&self, participant: &str) -> Result<usize> {
        let frame = select_reference(&self.manifest, participant)?;
        Ok(self
            .manifest
            .records
            .iter()
            .position(|r| r.participant == participant && r.frame == frame)
            .expect("selected frame exists"))
    }

    /// Stacks the images of the given records into `[B, C, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let items: Vec<&Tensor> = indices.iter().map(|&i| &self.images[i]).collect();
        Tensor::stack(&items)
    }
}

/// Loads and validates a manifest, including its image references.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    Dataset::load(path).map(|d| d.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(rows: &[(&str, u32, [u8; 2], bool)]) -> DatasetManifest {
        DatasetManifest {
            au_names: vec!["1".into(), "4".into()],
            records: rows
                .iter()
                .map(|&(p, f, y, r)| FrameRecord {
                    participant: p.into(),
                    frame: f,
                    image: format!("img.csnt#{p}/{f}"),
                    is_reference: r,
                    intensities: y.to_vec(),
                })
                .collect(),
            provenance: String::new(),
        }
    }

    #[test]
    fn parse_minimal() {
        let m = DatasetManifest::parse("participant,frame,image,ref,au_1\nA,0,a.pgm,0,3\n", "t").unwrap();
        assert_eq!(m.participants(), vec!["A"]);
        assert_eq!(m.records[0].intensities, vec![3]);
    }

    #[test]
    fn parse_errors_name_the_row() {
        let e = DatasetManifest::parse("participant,frame,image,ref,au_1\nA,0,a.pgm,0,3\nA,1,b.pgm,0,6\n", "t").unwrap_err();
        assert!(matches!(e, Error::Row { row: 3, .. }), "{e}");
        let e = DatasetManifest::parse("participant,frame,image,ref,au_1\nA,0,a.pgm,0,3\nA,0,b.pgm,0,1\n", "t").unwrap_err();
        assert!(e.to_string().contains("duplicate"), "{e}");
        let e = DatasetManifest::parse("participant,frame,ref,au_1\n", "t").unwrap_err();
        assert!(e.to_string().contains("missing column `image`"), "{e}");
    }

    #[test]
    fn csv_round_trip_keeps_provenance() {
        let mut m = manifest(&[("a", 0, [0, 1], false), ("b", 3, [5, 0], true)]);
        m.provenance = "synthetic\nseed 7".into();
        assert_eq!(DatasetManifest::parse(&m.to_csv(), "t").unwrap(), m);
    }

    #[test]
    fn reference_tie_rule() {
        let m = manifest(&[("a", 0, [2, 1], false), ("a", 1, [0, 0], false), ("a", 2, [0, 0], false)]);
        assert_eq!(select_reference(&m, "a").unwrap(), 1);
        let m = manifest(&[("a", 0, [2, 0], false), ("a", 1, [1, 0], false), ("a", 2, [2, 2], false)]);
        assert_eq!(select_reference(&m, "a").unwrap(), 1);
        let m = manifest(&[("a", 0, [0, 0], false), ("a", 1, [3, 3], true)]);
        assert_eq!(select_reference(&m, "a").unwrap(), 1);
        assert!(select_reference(&m, "zz").is_err());
    }

    #[test]
    fn folds_leave_one_out_and_sizes() {
        let rows: Vec<(String, u32)> = (0..9).map(|i| (format!("p{i}"), 0)).collect();
        let m = DatasetManifest {
            au_names: vec!["1".into()],
            records: rows
                .iter()
                .map(|(p, f)| FrameRecord {
                    participant: p.clone(),
                    frame: *f,
                    image: "x.pgm".into(),
                    is_reference: false,
                    intensities: vec![0],
                })
                .collect(),
            provenance: String::new(),
        };
        let lopo = make_folds(&m, 9, 1).unwrap();
        assert!((0..9).all(|f| lopo.members(f).len() == 1));
        lopo.validate(&m).unwrap();
        assert!(make_folds(&m, 10, 1).is_err());
        assert_eq!(make_folds(&m, 3, 5).unwrap(), make_folds(&m, 3, 5).unwrap());
    }

    #[test]
    fn explicit_folds_reject_overlap() {
        let err = FoldSpec::from_lists(&[vec!["a".into(), "b".into()], vec!["b".into()]]).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
        assert!(FoldSpec::from_lists(&[vec!["a".into()], vec![]]).is_err());
    }

    #[test]
    fn load_resolves_container_and_pgm() {
        let dir = tempfile::tempdir().unwrap();
        container::save(
            &dir.path().join("img.csnt"),
            &[("a/0".into(), Tensor::full(vec![1, 2, 2], 0.5))],
        )
        .unwrap();
        std::fs::write(dir.path().join("b.pgm"), pgm::encode(&Tensor::full(vec![2, 2], 1.0)).unwrap()).unwrap();
        let csv = "participant,frame,image,ref,au_1\na,0,img.csnt#a/0,0,0\nb,0,b.pgm,0,2\n";
        std::fs::write(dir.path().join("m.csv"), csv).unwrap();
        let d = Dataset::load(&dir.path().join("m.csv")).unwrap();
        assert_eq!(d.images[1].data(), &[1.0; 4]);
        assert_eq!(d.batch(&[0, 1]).unwrap().shape(), &[2, 1, 2, 2]);

        std::fs::write(dir.path().join("m.csv"), format!("{csv}c,0,img.csnt#c/0,0,0\n")).unwrap();
        let e = load_manifest(&dir.path().join("m.csv")).unwrap_err();
        assert!(matches!(e, Error::Row { row: 4, .. }), "{e}");
    }
}
