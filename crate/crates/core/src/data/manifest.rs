//! Tab-separated dataset manifests and binary feature-vector files.
//!
//! A manifest starts with a header naming its columns (any order). `#` lines
//! and blank lines are skipped. Features are either inline in a `features`
//! column as comma-joined decimals, or referenced through a `features_path`
//! column relative to the manifest's directory.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{ClipSample, DatasetSplit, Label};
use crate::error::{Error, Result};

/// Magic prefix of a binary feature-vector file, followed by a `u32` LE
/// dimension and that many `f64` LE values.
pub const FEATURE_MAGIC: &[u8; 4] = b"FV64";

const REQUIRED: [&str; 10] = [
    "clip_id",
    "subject_id",
    "split",
    "view",
    "modality",
    "label",
    "anomaly_class",
    "seen_in_training",
    "frame_start",
    "frame_end",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureStorage {
    Inline,
    /// One `.fv` file per clip under this directory (relative to the manifest).
    Binary(PathBuf),
}

pub fn write_feature_file(path: &Path, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 8 * values.len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf)
        .map_err(|e| Error::io(format!("writing feature file {}", path.display()), e))
}

pub fn read_feature_file(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::io(format!("reading feature file {}", path.display()), e))?;
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 8 || &bytes[..4] != FEATURE_MAGIC {
        return Err(bad("missing FV64 header".into()));
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + 8 * dim {
        return Err(bad(format!(
            "declares {dim} values but holds {} bytes of data",
            bytes.len() - 8
        )));
    }
    Ok(bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn format_features(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 20);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        // `{}` prints the shortest decimal that parses back to the same bits.
        write!(s, "{v}").unwrap();
    }
    s
}

/// Writes both splits into one manifest. With binary storage, feature files
/// are written under the given directory (relative to the manifest).
pub fn save_manifest(dataset: &DatasetSplit, path: &Path, storage: &FeatureStorage) -> Result<()> {
    dataset.validate()?;
    let base = path.parent().unwrap_or(Path::new("."));
    if let FeatureStorage::Binary(dir) = storage {
        let full = base.join(dir);
        std::fs::create_dir_all(&full)
            .map_err(|e| Error::io(format!("creating {}", full.display()), e))?;
    }
    let feature_col = match storage {
        FeatureStorage::Inline => "features",
        FeatureStorage::Binary(_) => "features_path",
    };
    let mut out = REQUIRED.join("\t");
    out.push('\t');
    out.push_str(feature_col);
    out.push('\n');
    for (split, clips) in [("train", &dataset.train), ("test", &dataset.test)] {
        for c in clips {
            for field in [&c.clip_id, &c.subject_id] {
                if field.contains(['\t', '\n']) {
                    return Err(Error::Dataset(format!(
                        "identifier {field:?} contains a tab or newline"
                    )));
                }
            }
            let features = match storage {
                FeatureStorage::Inline => format_features(&c.features),
                FeatureStorage::Binary(dir) => {
                    let rel = dir.join(format!("{}.fv", c.clip_id));
                    write_feature_file(&base.join(&rel), &c.features)?;
                    rel.to_string_lossy().into_owned()
                }
            };
            writeln!(
                out,
                "{}\t{}\t{split}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{features}",
                c.clip_id,
                c.subject_id,
                c.view,
                c.modality,
                c.label,
                c.anomaly_class.as_deref().unwrap_or(""),
                c.seen_in_training,
                c.frame_span.0,
                c.frame_span.1,
            )
            .unwrap();
        }
    }
    std::fs::write(path, out)
        .map_err(|e| Error::io(format!("writing manifest {}", path.display()), e))
}

/// Parses and validates a manifest. Errors carry the offending line number.
pub fn load_manifest(path: &Path) -> Result<DatasetSplit> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let at = |line: usize, message: String| Error::Manifest {
        path: path.to_path_buf(),
        line: line as u64,
        message,
    };

    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));

    let (header_line, header) = lines
        .next()
        .ok_or_else(|| Error::Dataset(format!("no clips in {}", path.display())))?;
    let columns: HashMap<&str, usize> = header.split('\t').enumerate().map(|(i, c)| (c, i)).collect();
    for name in REQUIRED {
        if !columns.contains_key(name) {
            return Err(at(header_line, format!("header is missing column {name:?}")));
        }
    }
    let inline = columns.get("features").copied();
    let by_path = columns.get("features_path").copied();
    if inline.is_none() && by_path.is_none() {
        return Err(at(
            header_line,
            "header needs a features or features_path column".into(),
        ));
    }
    let width = columns.len();

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut dim: Option<usize> = None;
    for (ln, line) in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != width {
            return Err(at(
                ln,
                format!("expected {width} fields, found {}", fields.len()),
            ));
        }
        let get = |name: &str| fields[columns[name]];
        let parse_u64 = |name: &str| {
            get(name)
                .parse::<u64>()
                .map_err(|_| at(ln, format!("{name}: not an integer: {:?}", get(name))))
        };
        let features = match (inline.map(|i| fields[i]), by_path.map(|i| fields[i])) {
            (Some(s), _) if !s.is_empty() => s
                .split(',')
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| at(ln, format!("features: bad number {t:?}")))
                })
                .collect::<Result<Vec<_>>>()?,
            (_, Some(p)) if !p.is_empty() => {
                read_feature_file(&base.join(p)).map_err(|e| at(ln, e.to_string()))?
            }
            _ => return Err(at(ln, "no features given".into())),
        };
        match dim {
            None => dim = Some(features.len()),
            Some(d) if d != features.len() => {
                return Err(at(
                    ln,
                    format!("feature dimension {} differs from {d}", features.len()),
                ))
            }
            _ => {}
        }
        let seen = match get("seen_in_training") {
            "true" => true,
            "false" => false,
            other => return Err(at(ln, format!("seen_in_training: expected true/false, got {other:?}"))),
        };
        let class = get("anomaly_class");
        let clip = ClipSample {
            clip_id: get("clip_id").to_owned(),
            subject_id: get("subject_id").to_owned(),
            view: get("view").parse().map_err(|e| at(ln, e))?,
            modality: get("modality").parse().map_err(|e| at(ln, e))?,
            label: get("label").parse::<Label>().map_err(|e| at(ln, e))?,
            anomaly_class: (!class.is_empty()).then(|| class.to_owned()),
            seen_in_training: seen,
            features,
            frame_span: (parse_u64("frame_start")?, parse_u64("frame_end")?),
        };
        super::validate_clip(&clip, clip.features.len()).map_err(|e| at(ln, e.to_string()))?;
        match get("split") {
            "train" => train.push(clip),
            "test" => test.push(clip),
            other => return Err(at(ln, format!("split: expected train/test, got {other:?}"))),
        }
    }
    if train.is_empty() && test.is_empty() {
        return Err(Error::Dataset(format!("no clips in {}", path.display())));
    }
    DatasetSplit::new(train, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Modality, View};

    fn sample(i: usize, split_test: bool) -> ClipSample {
        let anomalous = i.is_multiple_of(3);
        ClipSample {
            clip_id: format!("c{i}"),
            subject_id: if split_test { "test-s".into() } else { format!("s{}", i % 2) },
            view: if i.is_multiple_of(2) { View::Top } else { View::Front },
            modality: if i % 4 < 2 { Modality::Depth } else { Modality::Ir },
            label: if anomalous { Label::Anomalous } else { Label::Normal },
            anomaly_class: anomalous.then(|| format!("class{}", i % 5)),
            seen_in_training: true,
            features: vec![0.1 * i as f64, -1.0 / 3.0, 1e-300, std::f64::consts::PI * i as f64],
            frame_span: (32 * i as u64, 32 * i as u64 + 31),
        }
    }

    fn ten_clips() -> DatasetSplit {
        let train = (0..7).map(|i| sample(i, false)).collect();
        let test = (7..10).map(|i| sample(i, true)).collect();
        DatasetSplit::new(train, test).unwrap()
    }

    #[test]
    fn inline_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        let d = ten_clips();
        save_manifest(&d, &path, &FeatureStorage::Inline).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.train.len() + back.test.len(), 10);
        assert_eq!(back, d);
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        let d = ten_clips();
        save_manifest(&d, &path, &FeatureStorage::Binary("feats".into())).unwrap();
        assert!(dir.path().join("feats/c3.fv").exists());
        assert_eq!(load_manifest(&path).unwrap(), d);
    }

    #[test]
    fn feature_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.fv");
        write_feature_file(&p, &[1.0, -2.5]).unwrap();
        let raw = std::fs::read(&p).unwrap();
        assert_eq!(&raw[..4], b"FV64");
        assert_eq!(&raw[4..8], &2u32.to_le_bytes());
        assert_eq!(&raw[8..16], &1.0f64.to_le_bytes());
        assert_eq!(read_feature_file(&p).unwrap(), vec![1.0, -2.5]);
        std::fs::write(&p, &raw[..12]).unwrap();
        assert!(read_feature_file(&p).is_err());
    }

    #[test]
    fn empty_manifest_is_no_clips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        std::fs::write(&p, "").unwrap();
        let err = load_manifest(&p).unwrap_err();
        assert!(err.to_string().contains("no clips"), "{err}");

        let header = format!("{}\tfeatures\n", REQUIRED.join("\t"));
        std::fs::write(&p, &header).unwrap();
        assert!(load_manifest(&p).unwrap_err().to_string().contains("no clips"));
    }

    #[test]
    fn subject_in_both_splits_is_a_leak() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        let header = format!("{}\tfeatures\n", REQUIRED.join("\t"));
        let body = "a\ts1\ttrain\ttop\tdepth\tnormal\t\ttrue\t0\t31\t1,0\n\
                    b\ts1\ttest\ttop\tdepth\tnormal\t\ttrue\t32\t63\t0,1\n";
        std::fs::write(&p, header + body).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::SplitLeak(_))));
    }

    #[test]
    fn diagnostics_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        let header = format!("# comment\n{}\tfeatures\n", REQUIRED.join("\t"));
        let body = "a\ts1\ttrain\ttop\tdepth\tnormal\t\ttrue\t0\t31\t1,0\n\
                    b\ts1\ttrain\ttop\tdepth\tnormal\t\ttrue\t32\t63\t0,1,2\n";
        std::fs::write(&p, header.clone() + body).unwrap();
        match load_manifest(&p) {
            Err(Error::Manifest { line, message, .. }) => {
                assert_eq!(line, 4);
                assert!(message.contains("dimension"));
            }
            other => panic!("unexpected {other:?}"),
        }

        let body = "a\ts1\ttrain\tside\tdepth\tnormal\t\ttrue\t0\t31\t1,0\n";
        std::fs::write(&p, header.clone() + body).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Manifest { line: 3, .. })));

        let body = "a\ts1\ttrain\ttop\tdepth\tanomalous\t\ttrue\t0\t31\t1,0\n";
        std::fs::write(&p, header + body).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Manifest { line: 3, .. })));
    }
}
