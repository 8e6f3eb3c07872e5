//! CAN frame domain model, log parsers and the synthetic traffic generator.

mod capture;
mod parse;
mod synth;

pub use capture::{Capture, CaptureError, CaptureMeta, CaptureSource, FrameRecord, RecordError, CAPTURE_VERSION};
pub use parse::{parse_candump, parse_dataset_csv, CandumpLine, ParseError};
pub use synth::{synth_capture, AttackKind, AttackSegment, SynthError, SynthProfile};

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Exclusive upper bound of a (29-bit) arbitration ID.
pub const CAN_ID_LIMIT: u32 = 1 << 29;
/// Largest classic-CAN payload.
pub const MAX_DLC: usize = 8;

/// The five traffic classes. Integer codes are part of every file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    Normal = 0,
    DoS = 1,
    Fuzzing = 2,
    RpmSpoof = 3,
    GearSpoof = 4,
}

impl ClassLabel {
    pub const COUNT: usize = 5;
    pub const ALL: [ClassLabel; 5] = [
        ClassLabel::Normal,
        ClassLabel::DoS,
        ClassLabel::Fuzzing,
        ClassLabel::RpmSpoof,
        ClassLabel::GearSpoof,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Normal => "normal",
            ClassLabel::DoS => "dos",
            ClassLabel::Fuzzing => "fuzzing",
            ClassLabel::RpmSpoof => "rpm",
            ClassLabel::GearSpoof => "gear",
        }
    }

    pub fn is_attack(self) -> bool {
        self != ClassLabel::Normal
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown class label {0:?}")]
pub struct UnknownLabel(pub String);

impl FromStr for ClassLabel {
    type Err = UnknownLabel;

    /// Accepts the integer code or the (case-insensitive) name.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if let Ok(code) = t.parse::<u8>() {
            return Self::from_code(code).ok_or_else(|| UnknownLabel(s.to_string()));
        }
        match t.to_ascii_lowercase().as_str() {
            "normal" => Ok(ClassLabel::Normal),
            "dos" => Ok(ClassLabel::DoS),
            "fuzzing" | "fuzz" => Ok(ClassLabel::Fuzzing),
            "rpm" | "rpmspoof" | "rpm_spoof" => Ok(ClassLabel::RpmSpoof),
            "gear" | "gearspoof" | "gear_spoof" => Ok(ClassLabel::GearSpoof),
            _ => Err(UnknownLabel(s.to_string())),
        }
    }
}

impl Serialize for ClassLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.code())
    }
}

impl<'de> Deserialize<'de> for ClassLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let code = u8::deserialize(d)?;
        ClassLabel::from_code(code).ok_or_else(|| serde::de::Error::custom(format!("class code {code} out of range")))
    }
}

/// Dataset-level injection flag (`R` / `T` in the research CSV).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Flag {
    Normal,
    Injected,
}

/// Capture time with microsecond resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(u64);

impl Timestamp {
    pub const fn from_micros(micros: u64) -> Self {
        Timestamp(micros)
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        Timestamp((secs.max(0.0) * 1e6).round() as u64)
    }

    pub fn micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}", self.0 / 1_000_000, self.0 % 1_000_000)
    }
}

impl FromStr for Timestamp {
    type Err = ParseError;

    /// `seconds[.fraction]` with at most six fractional digits.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ParseError::MalformedLine(format!("bad timestamp {s:?}"));
        let (whole, frac) = match s.split_once('.') {
            Some((w, f)) => (w, f),
            None => (s, ""),
        };
        if whole.is_empty()
            || frac.len() > 6
            || !whole.bytes().all(|b| b.is_ascii_digit())
            || !frac.bytes().all(|b| b.is_ascii_digit())
        {
            return Err(bad());
        }
        let secs: u64 = whole.parse().map_err(|_| bad())?;
        let mut micros = 0u64;
        for (i, b) in frac.bytes().enumerate() {
            micros += u64::from(b - b'0') * 10u64.pow(5 - i as u32);
        }
        secs.checked_mul(1_000_000)
            .and_then(|v| v.checked_add(micros))
            .map(Timestamp)
            .ok_or_else(bad)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("CAN id {0:#x} does not fit in 29 bits")]
    IdOutOfRange(u64),
    #[error("payload of {0} bytes exceeds 8")]
    PayloadTooLong(usize),
}

/// One CAN data frame.
///
/// The attack class doubles as the ground-truth label: a frame is
/// `Injected` exactly when its class is not `Normal`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CanFrame {
    timestamp: Timestamp,
    can_id: u32,
    dlc: u8,
    data: [u8; MAX_DLC],
    class: ClassLabel,
}

impl CanFrame {
    pub fn new(timestamp: Timestamp, can_id: u32, payload: &[u8], class: ClassLabel) -> Result<Self, FrameError> {
        if can_id >= CAN_ID_LIMIT {
            return Err(FrameError::IdOutOfRange(can_id.into()));
        }
        if payload.len() > MAX_DLC {
            return Err(FrameError::PayloadTooLong(payload.len()));
        }
        let mut data = [0u8; MAX_DLC];
        data[..payload.len()].copy_from_slice(payload);
        Ok(CanFrame {
            timestamp,
            can_id,
            dlc: payload.len() as u8,
            data,
            class,
        })
    }

    pub fn timestamp(&self) -> Timestamp {
        self.timestamp
    }

    pub fn can_id(&self) -> u32 {
        self.can_id
    }

    pub fn dlc(&self) -> usize {
        self.dlc as usize
    }

    pub fn payload(&self) -> &[u8] {
        &self.data[..self.dlc as usize]
    }

    /// All eight data bytes, zero past the DLC.
    pub fn padded_payload(&self) -> &[u8; MAX_DLC] {
        &self.data
    }

    pub fn class(&self) -> ClassLabel {
        self.class
    }

    pub fn flag(&self) -> Flag {
        if self.class.is_attack() {
            Flag::Injected
        } else {
            Flag::Normal
        }
    }

    pub fn is_injected(&self) -> bool {
        self.flag() == Flag::Injected
    }

    pub fn with_class(mut self, class: ClassLabel) -> Self {
        self.class = class;
        self
    }

    /// Canonical research-dataset CSV line (no trailing newline).
    pub fn to_dataset_csv(&self) -> String {
        let mut out = format!("{},{:04x},{}", self.timestamp, self.can_id, self.dlc);
        for b in self.payload() {
            out.push_str(&format!(",{b:02x}"));
        }
        out.push_str(match self.flag() {
            Flag::Normal => ",R",
            Flag::Injected => ",T",
        });
        out
    }

    /// Lower-case hex of the payload bytes.
    pub fn payload_hex(&self) -> String {
        self.payload().iter().map(|b| format!("{b:02x}")).collect()
    }
}
