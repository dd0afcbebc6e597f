//! JSON-lines event files: one `{"video_id", "events": [{start, end, confidence?}]}`
//! object per line.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::evaluation::VideoEvents;

pub fn parse_events_jsonl(text: &str, path: &Path) -> Result<Vec<VideoEvents>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let video: VideoEvents = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        for e in &video.events {
            e.validate().map_err(|err| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: err.to_string(),
            })?;
        }
        out.push(video);
    }
    Ok(out)
}

pub fn read_events_jsonl(path: impl AsRef<Path>) -> Result<Vec<VideoEvents>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_events_jsonl(&text, path)
}

pub fn write_events_jsonl(videos: &[VideoEvents], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for v in videos {
        text.push_str(&serde_json::to_string(v)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
