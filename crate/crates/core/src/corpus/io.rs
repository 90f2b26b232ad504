//! File formats.
//!
//! Text formats are UTF-8 with LF line endings. Floats are written as the
//! shortest decimal that round-trips to the identical binary value (Rust's
//! default float `Display`), so save/load is bit-exact in both directions.

use std::io::Write;
use std::path::Path;

use crate::calibrate::CalibrationModel;
use crate::corpus::{
    Embedding, EmbeddingFormat, EmbeddingStore, QualityMap, QualityRecord, ScoreSet, Stage, Trial,
    TrialLabel, TrialList,
};
use crate::error::{Error, Result};

const BIN_MAGIC: &[u8; 4] = b"EMB1";

/// Writes `bytes` to `path` via a temp file in the same directory followed by
/// a rename, so a failed run never leaves a partial output file behind.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_finite_f64(s: &str, path: &Path, line: usize, what: &str) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| Error::parse(path, line, format!("bad {what} {s:?}")))?;
    if !v.is_finite() {
        return Err(Error::parse(path, line, format!("non-finite {what} {s:?}")));
    }
    Ok(v)
}

fn parse_finite_f32(s: &str, path: &Path, line: usize, what: &str) -> Result<f32> {
    let v: f32 = s
        .parse()
        .map_err(|_| Error::parse(path, line, format!("bad {what} {s:?}")))?;
    if !v.is_finite() {
        return Err(Error::parse(path, line, format!("non-finite {what} {s:?}")));
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

/// Loads an embedding store; the first record fixes the dimension.
pub fn load_embeddings(path: impl AsRef<Path>, format: EmbeddingFormat) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    match format {
        EmbeddingFormat::Tsv => load_embeddings_tsv(path),
        EmbeddingFormat::Bin => load_embeddings_bin(path),
    }
}

fn load_embeddings_tsv(path: &Path) -> Result<EmbeddingStore> {
    let text = read_to_string(path)?;
    let mut store: Option<EmbeddingStore> = None;
    let mut record = 0usize;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        record += 1;
        let (id, values) = raw
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, line_no, "expected <id>\\t<values>"))?;
        let mut vector = Vec::new();
        for tok in values.split_whitespace() {
            vector.push(parse_finite_f32(tok, path, line_no, "value")?);
        }
        let emb = Embedding::new(id, vector)
            .map_err(|e| Error::parse(path, line_no, e.to_string()))?;
        let store = match &mut store {
            Some(s) => s,
            None => store.insert(EmbeddingStore::new(emb.dim()).map_err(|e| {
                Error::parse(path, line_no, e.to_string())
            })?),
        };
        store.insert(emb).map_err(|e| {
            Error::parse(path, line_no, format!("{e} (record {record})"))
        })?;
    }
    store.ok_or_else(|| Error::parse(path, 1, "empty embedding file (dim undetermined)"))
}

fn load_embeddings_bin(path: &Path) -> Result<EmbeddingStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::parse(path, 0, format!("truncated file reading {what}")));
        }
        let slice = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(slice)
    };

    let magic = take(&mut pos, 4, "magic")?;
    if magic != BIN_MAGIC {
        return Err(Error::parse(path, 0, "bad magic, expected EMB1"));
    }
    let dim = u32::from_le_bytes(take(&mut pos, 4, "dim")?.try_into().unwrap()) as usize;
    let mut store = EmbeddingStore::new(dim).map_err(|e| Error::parse(path, 0, e.to_string()))?;
    let mut record = 0usize;
    while pos < bytes.len() {
        record += 1;
        let id_len = u16::from_le_bytes(take(&mut pos, 2, "id length")?.try_into().unwrap()) as usize;
        let id = std::str::from_utf8(take(&mut pos, id_len, "id")?)
            .map_err(|_| Error::parse(path, 0, format!("record {record}: id is not UTF-8")))?
            .to_string();
        let mut vector = Vec::with_capacity(dim);
        let raw = take(&mut pos, dim * 4, "vector")?;
        for chunk in raw.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::parse(path, 0, format!("record {record} ({id}): non-finite value")));
            }
            vector.push(v);
        }
        let emb = Embedding::new(id, vector)
            .map_err(|e| Error::parse(path, 0, format!("record {record}: {e}")))?;
        store
            .insert(emb)
            .map_err(|e| Error::parse(path, 0, format!("{e} (record {record})")))?;
    }
    Ok(store)
}

/// Saves an embedding store (also used for cohort centroid files).
pub fn save_embeddings(
    store: &EmbeddingStore,
    path: impl AsRef<Path>,
    format: EmbeddingFormat,
) -> Result<()> {
    let path = path.as_ref();
    match format {
        EmbeddingFormat::Tsv => {
            let mut out = String::new();
            for e in store.iter() {
                out.push_str(&e.id);
                out.push('\t');
                for (i, v) in e.vector.iter().enumerate() {
                    if i > 0 {
                        out.push(' ');
                    }
                    out.push_str(&v.to_string());
                }
                out.push('\n');
            }
            atomic_write(path, out.as_bytes())
        }
        EmbeddingFormat::Bin => {
            let mut out = Vec::new();
            out.extend_from_slice(BIN_MAGIC);
            out.extend_from_slice(&(store.dim() as u32).to_le_bytes());
            for e in store.iter() {
                let id_bytes = e.id.as_bytes();
                if id_bytes.len() > u16::MAX as usize {
                    return Err(Error::invalid(format!("id too long for binary format: {}", e.id)));
                }
                out.extend_from_slice(&(id_bytes.len() as u16).to_le_bytes());
                out.extend_from_slice(id_bytes);
                for v in &e.vector {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            atomic_write(path, &out)
        }
    }
}

// ---------------------------------------------------------------------------
// Trials
// ---------------------------------------------------------------------------

/// Loads a trial list: `[<0|1> ]<enroll> <test>` per line, order preserved.
pub fn load_trials(path: impl AsRef<Path>) -> Result<TrialList> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    let mut trials = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split_whitespace().collect();
        let (label, enroll, test) = match fields.len() {
            2 => (None, fields[0], fields[1]),
            3 => {
                let label = match fields[0] {
                    "0" => TrialLabel::Nontarget,
                    "1" => TrialLabel::Target,
                    other => {
                        return Err(Error::parse(
                            path,
                            line_no,
                            format!("bad label {other:?} at line {line_no}"),
                        ))
                    }
                };
                (Some(label), fields[1], fields[2])
            }
            n if n < 2 => {
                return Err(Error::parse(path, line_no, "expected at least 2 fields"));
            }
            _ => {
                return Err(Error::parse(path, line_no, "too many fields"));
            }
        };
        trials.push(
            Trial::new(enroll, test, label).map_err(|e| Error::parse(path, line_no, e.to_string()))?,
        );
    }
    Ok(TrialList::new(trials))
}

pub fn save_trials(trials: &TrialList, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for t in trials.iter() {
        match t.label {
            Some(TrialLabel::Target) => out.push_str("1 "),
            Some(TrialLabel::Nontarget) => out.push_str("0 "),
            None => {}
        }
        out.push_str(&t.enroll);
        out.push(' ');
        out.push_str(&t.test);
        out.push('\n');
    }
    atomic_write(path.as_ref(), out.as_bytes())
}

// ---------------------------------------------------------------------------
// Quality manifests
// ---------------------------------------------------------------------------

/// Loads a quality manifest: `<id>\t<duration>\t<snr>\t<t60>\t<mos>` per line.
/// An empty file yields an empty map.
pub fn load_quality(path: impl AsRef<Path>) -> Result<QualityMap> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    let mut map = QualityMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected 5 tab-separated fields, got {}", fields.len()),
            ));
        }
        let rec = QualityRecord::new(
            fields[0],
            parse_finite_f64(fields[1], path, line_no, "duration")?,
            parse_finite_f64(fields[2], path, line_no, "snr")?,
            parse_finite_f64(fields[3], path, line_no, "t60")?,
            parse_finite_f64(fields[4], path, line_no, "mos")?,
        )
        .map_err(|e| Error::parse(path, line_no, e.to_string()))?;
        if map.contains_key(&rec.id) {
            return Err(Error::parse(path, line_no, format!("duplicate id {}", rec.id)));
        }
        map.insert(rec.id.clone(), rec);
    }
    Ok(map)
}

pub fn save_quality(quality: &QualityMap, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for rec in quality.values() {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            rec.id, rec.duration, rec.snr, rec.t60, rec.mos
        ));
    }
    atomic_write(path.as_ref(), out.as_bytes())
}

// ---------------------------------------------------------------------------
// Score files
// ---------------------------------------------------------------------------

/// Loads a score file: `<enroll> <test> <score>` per line. The system name
/// defaults to the file stem and the stage to raw; callers that know better
/// override with [`ScoreSet::with_system`] / [`ScoreSet::with_stage`].
pub fn load_scores(path: impl AsRef<Path>) -> Result<ScoreSet> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    let system = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scores".to_string());
    let mut set = ScoreSet::new(system, Stage::Raw);
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected <enroll> <test> <score>, got {} fields", fields.len()),
            ));
        }
        let score = parse_finite_f64(fields[2], path, line_no, "score")?;
        set.insert(fields[0], fields[1], score)
            .map_err(|e| Error::parse(path, line_no, e.to_string()))?;
    }
    Ok(set)
}

pub fn save_scores(scores: &ScoreSet, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for ((enroll, test), score) in scores.iter() {
        out.push_str(&format!("{enroll} {test} {score}\n"));
    }
    atomic_write(path.as_ref(), out.as_bytes())
}

// ---------------------------------------------------------------------------
// Model files
// ---------------------------------------------------------------------------

/// Saves a calibration/fusion model:
/// line 1 `calib-v1`, line 2 `bias <float>`, then `w <name> <float>` per
/// weight in feature order. Training metadata (effective prior, provenance)
/// is not part of the format.
pub fn save_model(model: &CalibrationModel, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("calib-v1\n");
    out.push_str(&format!("bias {}\n", model.bias));
    for (name, w) in model.feature_names.iter().zip(&model.weights) {
        out.push_str(&format!("w {name} {w}\n"));
    }
    atomic_write(path.as_ref(), out.as_bytes())
}

/// Loads a model file. The effective prior is not stored in the format and
/// is set to the default operating point; provenance records the source path.
pub fn load_model(path: impl AsRef<Path>) -> Result<CalibrationModel> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    let mut lines = text.lines().enumerate();

    let (_, magic) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty model file"))?;
    if magic.trim() != "calib-v1" {
        return Err(Error::parse(path, 1, format!("bad magic {magic:?}, expected calib-v1")));
    }
    let (_, bias_line) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 2, "missing bias line"))?;
    let bias = match bias_line.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["bias", v] => parse_finite_f64(v, path, 2, "bias")?,
        _ => return Err(Error::parse(path, 2, "expected `bias <float>`")),
    };

    let mut feature_names = Vec::new();
    let mut weights = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        match raw.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["w", name, v] => {
                if feature_names.iter().any(|n: &String| n == name) {
                    return Err(Error::parse(path, line_no, format!("duplicate feature {name}")));
                }
                feature_names.push(name.to_string());
                weights.push(parse_finite_f64(v, path, line_no, "weight")?);
            }
            _ => return Err(Error::parse(path, line_no, "expected `w <feature-name> <float>`")),
        }
    }

    CalibrationModel::new(
        feature_names,
        weights,
        bias,
        CalibrationModel::DEFAULT_PRIOR,
        format!("loaded from {}", path.display()),
    )
    .map_err(|e| Error::parse(path, 0, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn store_from(rows: &[(&str, &[f32])]) -> EmbeddingStore {
        let mut store = EmbeddingStore::new(rows[0].1.len()).unwrap();
        for (id, v) in rows {
            store.insert(Embedding::new(*id, v.to_vec()).unwrap()).unwrap();
        }
        store
    }

    #[test]
    fn tsv_embeddings_load_basic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("emb.tsv");
        std::fs::write(&path, "a\t1 2 3 4\nb\t0.5 -1 2.25 8\n").unwrap();
        let store = load_embeddings(&path, EmbeddingFormat::Tsv).unwrap();
        assert_eq!(store.dim(), 4);
        assert_eq!(store.len(), 2);
        assert_eq!(store.get("b").unwrap().vector, vec![0.5, -1.0, 2.25, 8.0]);
    }

    #[test]
    fn tsv_embeddings_dimension_mismatch_names_record() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("emb.tsv");
        std::fs::write(&path, "a\t1 2 3 4\nb\t1 2 3\n").unwrap();
        let err = load_embeddings(&path, EmbeddingFormat::Tsv).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("dimension mismatch"), "{msg}");
        assert!(msg.contains("record 2"), "{msg}");
    }

    #[test]
    fn tsv_embeddings_reject_nan_and_duplicates() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("emb.tsv");
        std::fs::write(&path, "a\t1 NaN\n").unwrap();
        assert!(load_embeddings(&path, EmbeddingFormat::Tsv)
            .unwrap_err()
            .to_string()
            .contains("non-finite"));
        std::fs::write(&path, "a\t1 2\na\t3 4\n").unwrap();
        assert!(load_embeddings(&path, EmbeddingFormat::Tsv)
            .unwrap_err()
            .to_string()
            .contains("duplicate id"));
    }

    #[test]
    fn binary_embeddings_round_trip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let store = store_from(&[("a/x.wav", &[1.5, -2.25, 3.0]), ("b#sp0.9", &[0.1, 0.2, 0.3])]);
        save_embeddings(&store, &path, EmbeddingFormat::Bin).unwrap();
        let loaded = load_embeddings(&path, EmbeddingFormat::Bin).unwrap();
        assert_eq!(loaded, store);
        for (a, b) in store.iter().zip(loaded.iter()) {
            for (x, y) in a.vector.iter().zip(&b.vector) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn binary_embeddings_reject_bad_magic_and_truncation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_embeddings(&path, EmbeddingFormat::Bin)
            .unwrap_err()
            .to_string()
            .contains("magic"));
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"EMB1");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'a');
        bytes.extend_from_slice(&1.0f32.to_le_bytes()); // second component missing
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_embeddings(&path, EmbeddingFormat::Bin)
            .unwrap_err()
            .to_string()
            .contains("truncated"));
    }

    #[test]
    fn trials_parse_labels_and_order() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trials.txt");
        std::fs::write(&path, "1 a.wav b.wav\na.wav b.wav\n0 x y\n").unwrap();
        let trials = load_trials(&path).unwrap();
        assert_eq!(trials.len(), 3);
        assert_eq!(trials.trials[0].label, Some(TrialLabel::Target));
        assert_eq!(trials.trials[1].label, None);
        assert_eq!(trials.trials[2].label, Some(TrialLabel::Nontarget));
        assert_eq!(trials.trials[0].enroll, "a.wav");
    }

    #[test]
    fn trials_bad_label_names_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trials.txt");
        std::fs::write(&path, "2 a.wav b.wav\n").unwrap();
        let msg = load_trials(&path).unwrap_err().to_string();
        assert!(msg.contains("bad label"), "{msg}");
        assert!(msg.contains("line 1"), "{msg}");
    }

    #[test]
    fn trials_too_few_fields() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trials.txt");
        std::fs::write(&path, "lonely\n").unwrap();
        assert!(load_trials(&path).is_err());
    }

    #[test]
    fn quality_parse_and_empty_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("q.tsv");
        std::fs::write(&path, "u1\t3.5\t12.0\t0.4\t3.8\n").unwrap();
        let q = load_quality(&path).unwrap();
        let rec = q.get("u1").unwrap();
        assert_eq!((rec.duration, rec.snr, rec.t60, rec.mos), (3.5, 12.0, 0.4, 3.8));

        std::fs::write(&path, "").unwrap();
        assert!(load_quality(&path).unwrap().is_empty());

        std::fs::write(&path, "u1\t3.5\t12.0\t0.4\t5.5\n").unwrap();
        assert!(load_quality(&path).unwrap_err().to_string().contains("mos out of range"));
    }

    #[test]
    fn scores_round_trip_shortest_decimal() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.txt");
        let mut set = ScoreSet::new("s", Stage::Raw);
        set.insert("a", "b", 0.123456789).unwrap();
        set.insert("a", "c", -1.5e-7).unwrap();
        set.insert("b", "c", 2.0).unwrap();
        save_scores(&set, &path).unwrap();
        let loaded = load_scores(&path).unwrap();
        assert_eq!(loaded, set);
        assert_eq!(loaded.get("a", "b").unwrap().to_bits(), 0.123456789f64.to_bits());
    }

    #[test]
    fn scores_bad_field_names_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.txt");
        std::fs::write(&path, "a b 0.5\na c oops\n").unwrap();
        let msg = load_scores(&path).unwrap_err().to_string();
        assert!(msg.contains(":2:"), "{msg}");
    }

    #[test]
    fn model_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.txt");
        let model = CalibrationModel::new(
            vec!["score".into(), "duration_min".into()],
            vec![1.25, -0.0625],
            0.5,
            0.05,
            "test".into(),
        )
        .unwrap();
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.feature_names, model.feature_names);
        assert_eq!(loaded.weights, model.weights);
        assert_eq!(loaded.bias.to_bits(), model.bias.to_bits());

        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("calib-v1\nbias 0.5\nw score 1.25\n"));
    }

    #[test]
    fn model_rejects_bad_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.txt");
        std::fs::write(&path, "calib-v2\nbias 0\n").unwrap();
        assert!(load_model(&path).unwrap_err().to_string().contains("magic"));
    }
}
