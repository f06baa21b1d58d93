//! Line-delimited JSON record files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::data::ClipRecord;
use crate::error::{Error, Result};
use crate::model::PairPrediction;

/// Parses one record per non-blank line; errors carry 1-based line numbers.
pub fn parse_lines<T: DeserializeOwned>(text: &str) -> Result<Vec<(usize, T)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|r| (i + 1, r))
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
        })
        .collect()
}

pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_lines(&text)?.into_iter().map(|(_, r)| r).collect())
}

pub fn to_lines<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialise"));
        out.push('\n');
    }
    out
}

pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(to_lines(records).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Parses and validates clip records.
pub fn parse_clips(text: &str) -> Result<Vec<ClipRecord>> {
    let mut out = Vec::new();
    for (line, clip) in parse_lines::<ClipRecord>(text)? {
        clip.validate(line)?;
        if out.iter().any(|c: &ClipRecord| c.clip_id == clip.clip_id) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate clip_id {:?}", clip.clip_id),
            });
        }
        out.push(clip);
    }
    Ok(out)
}

pub fn load_clips(path: &Path) -> Result<Vec<ClipRecord>> {
    parse_clips(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_clips(path: &Path, clips: &[ClipRecord]) -> Result<()> {
    write_records(path, clips)
}

pub fn load_predictions(path: &Path) -> Result<Vec<PairPrediction>> {
    read_records(path)
}

pub fn save_predictions(path: &Path, preds: &[PairPrediction]) -> Result<()> {
    write_records(path, preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{generate_dataset, GenConfig};

    #[test]
    fn empty_input_gives_no_records() {
        assert!(parse_clips("").unwrap().is_empty());
        assert!(parse_clips("\n  \n").unwrap().is_empty());
    }

    #[test]
    fn generated_dataset_round_trips() {
        let clips = generate_dataset(&GenConfig {
            clips: 3,
            gap_prob: 0.2,
            ..Default::default()
        })
        .unwrap();
        let back = parse_clips(&to_lines(&clips)).unwrap();
        assert_eq!(back, clips);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clips.jsonl");
        save_clips(&p, &clips).unwrap();
        assert_eq!(load_clips(&p).unwrap(), clips);
    }

    #[test]
    fn errors_name_their_line() {
        let clips = generate_dataset(&GenConfig {
            clips: 2,
            ..Default::default()
        })
        .unwrap();
        let mut bad = clips.clone();
        bad[1].labels[0].object_id = 4242;
        match parse_clips(&to_lines(&bad)) {
            Err(Error::Reference { line: 2, message }) => assert!(message.contains("4242")),
            other => panic!("{other:?}"),
        }
        let text = format!("{}{{not json\n", to_lines(&clips));
        assert!(matches!(parse_clips(&text), Err(Error::Parse { line: 3, .. })));
        let dup = to_lines(&[clips[0].clone(), clips[0].clone()]);
        assert!(matches!(parse_clips(&dup), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn missing_file_is_io() {
        assert!(matches!(load_clips(Path::new("/nonexistent/clips.jsonl")), Err(Error::Io { .. })));
    }
}
