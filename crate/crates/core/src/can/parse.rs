use super::{CanFrame, ClassLabel, Timestamp, CAN_ID_LIMIT, MAX_DLC};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("malformed line: {0}")]
    MalformedLine(String),
    #[error("CAN id {0:#x} does not fit in 29 bits")]
    IdOutOfRange(u64),
    #[error("DLC {0} is outside 0..=8")]
    DlcMismatch(u64),
    #[error("payload has an odd number of hex digits")]
    OddHexDigits,
    #[error("injected frame in a capture labeled normal")]
    UnlabeledInjection,
}

fn malformed(msg: impl Into<String>) -> ParseError {
    ParseError::MalformedLine(msg.into())
}

fn parse_id(hex: &str, min_digits: usize) -> Result<u32, ParseError> {
    if hex.len() < min_digits || hex.len() > 8 || !hex.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(malformed(format!("bad CAN id {hex:?}")));
    }
    let id = u64::from_str_radix(hex, 16).map_err(|_| malformed(format!("bad CAN id {hex:?}")))?;
    if id >= u64::from(CAN_ID_LIMIT) {
        return Err(ParseError::IdOutOfRange(id));
    }
    Ok(id as u32)
}

/// Parse one line of the research dataset CSV:
/// `timestamp,ID_hex,DLC,byte0,…,byte{DLC-1},flag` with flag `R` or `T`.
///
/// The files carry one attack type each, so the class of `T` frames comes
/// from the caller.
pub fn parse_dataset_csv(line: &str, capture_class: ClassLabel) -> Result<CanFrame, ParseError> {
    let line = line.trim_end();
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() < 4 {
        return Err(malformed(format!("{} fields, need at least 4", fields.len())));
    }
    let timestamp: Timestamp = fields[0].parse()?;
    let can_id = parse_id(fields[1], 3)?;
    let dlc: u64 = if !fields[2].is_empty() && fields[2].bytes().all(|b| b.is_ascii_digit()) {
        fields[2].parse().map_err(|_| malformed("bad DLC"))?
    } else {
        return Err(malformed(format!("bad DLC {:?}", fields[2])));
    };
    if dlc > MAX_DLC as u64 {
        return Err(ParseError::DlcMismatch(dlc));
    }
    let byte_fields = &fields[3..fields.len() - 1];
    if byte_fields.len() as u64 != dlc {
        return Err(malformed(format!(
            "{} fields for DLC {dlc}, expected {}",
            fields.len(),
            dlc + 4
        )));
    }
    let mut payload = [0u8; MAX_DLC];
    for (slot, field) in payload.iter_mut().zip(byte_fields) {
        if field.is_empty() || field.len() > 2 || !field.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(malformed(format!("bad data byte {field:?}")));
        }
        *slot = u8::from_str_radix(field, 16).map_err(|_| malformed("bad data byte"))?;
    }
    let class = match fields[fields.len() - 1] {
        "R" => ClassLabel::Normal,
        "T" if capture_class.is_attack() => capture_class,
        "T" => return Err(ParseError::UnlabeledInjection),
        other => return Err(malformed(format!("bad flag {other:?}"))),
    };
    CanFrame::new(timestamp, can_id, &payload[..dlc as usize], class).map_err(|e| malformed(e.to_string()))
}

/// One `candump -l` style record: `(seconds.micros) iface ID#PAYLOAD`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandumpLine {
    pub iface: String,
    pub frame: CanFrame,
}

impl FromStr for CandumpLine {
    type Err = ParseError;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let mut parts = line.split_whitespace();
        let (Some(ts), Some(iface), Some(body), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(malformed("expected `(ts) iface ID#DATA`"));
        };
        let ts = ts
            .strip_prefix('(')
            .and_then(|t| t.strip_suffix(')'))
            .ok_or_else(|| malformed("timestamp must be parenthesized"))?;
        let timestamp: Timestamp = ts.parse()?;
        let (id, data) = body.split_once('#').ok_or_else(|| malformed("missing '#' separator"))?;
        let can_id = parse_id(id, 1)?;
        if !data.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(malformed(format!("bad payload {data:?}")));
        }
        if data.len() % 2 != 0 {
            return Err(ParseError::OddHexDigits);
        }
        if data.len() > 2 * MAX_DLC {
            return Err(malformed("payload longer than 8 bytes"));
        }
        let payload: Vec<u8> = (0..data.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&data[i..i + 2], 16).expect("validated hex"))
            .collect();
        let frame =
            CanFrame::new(timestamp, can_id, &payload, ClassLabel::Normal).map_err(|e| malformed(e.to_string()))?;
        Ok(CandumpLine {
            iface: iface.to_string(),
            frame,
        })
    }
}

impl fmt::Display for CandumpLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let id = self.frame.can_id();
        write!(f, "({}) {} ", self.frame.timestamp(), self.iface)?;
        if id <= 0x7FF {
            write!(f, "{id:03X}#")?;
        } else {
            write!(f, "{id:08X}#")?;
        }
        for b in self.frame.payload() {
            write!(f, "{b:02X}")?;
        }
        Ok(())
    }
}

/// Parse a candump record; candump logs carry no labels so the frame is `Normal`.
pub fn parse_candump(line: &str) -> Result<CanFrame, ParseError> {
    line.parse::<CandumpLine>().map(|l| l.frame)
}
