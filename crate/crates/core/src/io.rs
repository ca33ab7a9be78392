//! JSON-lines readers and writers for corpora, users and session logs.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::domain::{Impression, Item, LogError, LogMetadata, SessionLog, UserProfile};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Log(#[from] LogError),
}

pub fn read_jsonl<T: DeserializeOwned>(reader: impl BufRead) -> Result<Vec<T>, DataError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(rows: &[T], mut writer: impl Write) -> Result<(), DataError> {
    for row in rows {
        serde_json::to_writer(&mut writer, row).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_items_jsonl(reader: impl BufRead) -> Result<Vec<Item>, DataError> {
    read_jsonl(reader)
}

pub fn write_items_jsonl(items: &[Item], writer: impl Write) -> Result<(), DataError> {
    write_jsonl(items, writer)
}

pub fn read_users_jsonl(reader: impl BufRead) -> Result<Vec<UserProfile>, DataError> {
    read_jsonl(reader)
}

pub fn write_users_jsonl(users: &[UserProfile], writer: impl Write) -> Result<(), DataError> {
    write_jsonl(users, writer)
}

pub fn write_log_jsonl(log: &SessionLog, writer: impl Write) -> Result<(), DataError> {
    write_jsonl(&log.impressions, writer)
}

pub fn read_log_jsonl(reader: impl BufRead, metadata: LogMetadata) -> Result<SessionLog, DataError> {
    let impressions: Vec<Impression> = read_jsonl(reader)?;
    Ok(SessionLog::new(metadata, impressions)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ContextualFeatureVector;

    #[test]
    fn corpus_line_uses_exact_field_names() {
        let items = vec![Item::new("v1", vec![1.0, 0.0], 3, 0.25)];
        let mut buf = Vec::new();
        write_items_jsonl(&items, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "{\"id\":\"v1\",\"embedding\":[1.0,0.0],\"topic\":3,\"main_score\":0.25}\n"
        );
        assert_eq!(read_items_jsonl(buf.as_slice()).unwrap(), items);
    }

    #[test]
    fn impression_line_layout() {
        let imp = Impression {
            session_id: 4,
            day: 1,
            user_id: "u".into(),
            item_id: "i".into(),
            position: 0,
            pointwise: vec![0.5],
            contextual: ContextualFeatureVector::default(),
            labels: vec![1, 0],
            similarity_score: 0.0,
        };
        let line = serde_json::to_string(&imp).unwrap();
        assert!(line.starts_with("{\"session_id\":4,\"day\":1,\"user_id\":\"u\",\"item_id\":\"i\",\"position\":0,\"pointwise\":[0.5],\"contextual\":[0.0,"));
        assert!(line.ends_with("\"labels\":[1,0],\"similarity_score\":0.0}"));
    }

    #[test]
    fn parse_errors_report_line() {
        let text = "{\"id\":\"a\",\"embedding\":[1.0],\"topic\":0,\"main_score\":0.5}\nnot json\n";
        match read_items_jsonl(text.as_bytes()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
