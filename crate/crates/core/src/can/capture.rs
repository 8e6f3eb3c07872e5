//! Capture container: one JSON header line carrying [`CaptureMeta`], then
//! one JSON record per frame.
//!
//! ```text
//! {"v":1,"meta":{"source":{"synthetic_seed":7},"frame_count":2,"class_histogram":[1,1,0,0,0]}}
//! {"ts":"0.000000","id":790,"data":"0521680921210065","class":0}
//! {"ts":"0.000500","id":0,"data":"0000000000000000","class":1}
//! ```

use super::{parse_candump, parse_dataset_csv, CanFrame, ClassLabel, ParseError, Timestamp};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::PathBuf;
use thiserror::Error;

pub const CAPTURE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: ParseError },
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("unsupported capture version {0}")]
    Version(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureSource {
    SyntheticSeed(u64),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureMeta {
    pub source: CaptureSource,
    pub frame_count: u64,
    pub class_histogram: [u64; ClassLabel::COUNT],
}

impl CaptureMeta {
    pub fn describe(source: CaptureSource, frames: &[CanFrame]) -> Self {
        let mut class_histogram = [0u64; ClassLabel::COUNT];
        for f in frames {
            class_histogram[f.class().index()] += 1;
        }
        CaptureMeta {
            source,
            frame_count: frames.len() as u64,
            class_histogram,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Capture {
    pub meta: CaptureMeta,
    pub frames: Vec<CanFrame>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    v: u32,
    meta: CaptureMeta,
}

/// JSON form of one frame, shared by capture files and the service API.
/// `class` defaults to normal when absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub ts: String,
    pub id: u32,
    pub data: String,
    #[serde(default = "normal")]
    pub class: ClassLabel,
}

fn normal() -> ClassLabel {
    ClassLabel::Normal
}

/// Why a [`FrameRecord`] does not describe a valid frame.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error(transparent)]
    Timestamp(#[from] ParseError),
    #[error("bad payload hex {0:?}")]
    Payload(String),
    #[error("{0}")]
    Frame(String),
}

impl From<&CanFrame> for FrameRecord {
    fn from(f: &CanFrame) -> Self {
        FrameRecord {
            ts: f.timestamp().to_string(),
            id: f.can_id(),
            data: f.payload_hex(),
            class: f.class(),
        }
    }
}

impl TryFrom<&FrameRecord> for CanFrame {
    type Error = RecordError;

    fn try_from(rec: &FrameRecord) -> Result<Self, RecordError> {
        let ts: Timestamp = rec.ts.parse()?;
        let payload = decode_hex(&rec.data).ok_or_else(|| RecordError::Payload(rec.data.clone()))?;
        CanFrame::new(ts, rec.id, &payload, rec.class).map_err(|e| RecordError::Frame(e.to_string()))
    }
}

impl Capture {
    pub fn new(source: CaptureSource, frames: Vec<CanFrame>) -> Self {
        Capture {
            meta: CaptureMeta::describe(source, &frames),
            frames,
        }
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), CaptureError> {
        let header = Header {
            v: CAPTURE_VERSION,
            meta: self.meta.clone(),
        };
        serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        for f in &self.frames {
            let rec = FrameRecord::from(f);
            serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self, CaptureError> {
        let mut lines = input.lines();
        let first = lines.next().ok_or(CaptureError::Format {
            line: 1,
            msg: "empty capture".into(),
        })??;
        let header: Header = serde_json::from_str(&first).map_err(|e| CaptureError::Format {
            line: 1,
            msg: e.to_string(),
        })?;
        if header.v != CAPTURE_VERSION {
            return Err(CaptureError::Version(header.v));
        }
        let mut frames = Vec::with_capacity(header.meta.frame_count as usize);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 2;
            let fmt_err = |msg: String| CaptureError::Format { line: lineno, msg };
            let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| fmt_err(e.to_string()))?;
            let frame = CanFrame::try_from(&rec).map_err(|e| match e {
                RecordError::Timestamp(source) => CaptureError::Parse { line: lineno, source },
                other => fmt_err(other.to_string()),
            })?;
            frames.push(frame);
        }
        let meta = CaptureMeta::describe(header.meta.source.clone(), &frames);
        if meta != header.meta {
            return Err(CaptureError::Format {
                line: 1,
                msg: "header does not match records".into(),
            });
        }
        Ok(Capture { meta, frames })
    }

    /// Read a research-dataset CSV file whose injected frames all belong to `capture_class`.
    pub fn read_dataset_csv<R: BufRead>(
        input: R,
        capture_class: ClassLabel,
        path: PathBuf,
    ) -> Result<Self, CaptureError> {
        let mut frames = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            frames.push(
                parse_dataset_csv(&line, capture_class)
                    .map_err(|source| CaptureError::Parse { line: i + 1, source })?,
            );
        }
        Ok(Capture::new(CaptureSource::File(path), frames))
    }

    pub fn read_candump<R: BufRead>(input: R, path: PathBuf) -> Result<Self, CaptureError> {
        let mut frames = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            frames.push(parse_candump(&line).map_err(|source| CaptureError::Parse { line: i + 1, source })?);
        }
        Ok(Capture::new(CaptureSource::File(path), frames))
    }
}

pub(crate) fn decode_hex(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).ok())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Capture {
        let frames = vec![
            CanFrame::new(Timestamp::from_micros(0), 0x316, &[5, 0x21, 0x68], ClassLabel::Normal).unwrap(),
            CanFrame::new(Timestamp::from_micros(500), 0, &[0; 8], ClassLabel::DoS).unwrap(),
        ];
        Capture::new(CaptureSource::SyntheticSeed(7), frames)
    }

    #[test]
    fn container_round_trip() {
        let cap = sample();
        assert_eq!(cap.meta.class_histogram, [1, 1, 0, 0, 0]);
        let mut buf = Vec::new();
        cap.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("{\"v\":1,"));
        assert_eq!(text.lines().count(), 3);
        assert_eq!(Capture::read_from(&buf[..]).unwrap(), cap);
    }

    #[test]
    fn container_rejects_inconsistent_header() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf)
            .unwrap()
            .replace("\"frame_count\":2", "\"frame_count\":3");
        assert!(Capture::read_from(text.as_bytes()).is_err());
        let text = "{\"v\":9,\"meta\":{\"source\":{\"synthetic_seed\":1},\"frame_count\":0,\"class_histogram\":[0,0,0,0,0]}}\n";
        assert!(matches!(
            Capture::read_from(text.as_bytes()),
            Err(CaptureError::Version(9))
        ));
    }

    #[test]
    fn reads_text_logs() {
        let csv = "1.0,0316,2,05,21,R\n\n2.0,0000,0,T\n";
        let cap = Capture::read_dataset_csv(csv.as_bytes(), ClassLabel::DoS, "x.csv".into()).unwrap();
        assert_eq!(cap.meta.class_histogram, [1, 1, 0, 0, 0]);
        let dump = "(0.1) can0 123#00\n(0.2) can0 123#0\n";
        match Capture::read_candump(dump.as_bytes(), "d.log".into()) {
            Err(CaptureError::Parse {
                line: 2,
                source: ParseError::OddHexDigits,
            }) => {}
            other => panic!("{other:?}"),
        }
    }
}
