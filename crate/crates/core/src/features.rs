//! Binary feature encoding of CAN frames and fixed-length windows.
//!
//! A frame becomes 93 bits: the 29-bit arbitration ID (MSB first) followed
//! by the eight payload bytes (each MSB first, absent bytes zero). A window
//! of `W` consecutive frames is a `W × 93` 0/1 matrix, row-major.

use crate::can::{CanFrame, ClassLabel};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::{Read, Write};
use thiserror::Error;

pub const ID_BITS: usize = 29;
pub const PAYLOAD_BITS: usize = 64;
pub const FRAME_BITS: usize = ID_BITS + PAYLOAD_BITS;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("invalid window config: {0}")]
    ConfigInvalid(String),
    #[error("empty input")]
    EmptyInput,
    #[error("io: {0}")]
    Io(String),
    #[error("bad encoded dataset: {0}")]
    Format(String),
}

impl From<std::io::Error> for FeatureError {
    fn from(e: std::io::Error) -> Self {
        FeatureError::Io(e.to_string())
    }
}

pub fn encode_frame(frame: &CanFrame) -> [u8; FRAME_BITS] {
    let mut bits = [0u8; FRAME_BITS];
    let id = frame.can_id();
    for (i, bit) in bits[..ID_BITS].iter_mut().enumerate() {
        *bit = ((id >> (ID_BITS - 1 - i)) & 1) as u8;
    }
    for (byte_idx, byte) in frame.padded_payload().iter().enumerate() {
        for b in 0..8 {
            bits[ID_BITS + byte_idx * 8 + b] = (byte >> (7 - b)) & 1;
        }
    }
    bits
}

/// Where a window came from: capture number and index of its first frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WindowOrigin {
    pub capture: u32,
    pub start: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureWindow {
    bits: Vec<u8>,
    window_len: usize,
    pub label: ClassLabel,
    pub origin: WindowOrigin,
}

impl FeatureWindow {
    /// Build from a `window_len × 93` 0/1 matrix.
    pub fn from_bits(
        bits: Vec<u8>,
        window_len: usize,
        label: ClassLabel,
        origin: WindowOrigin,
    ) -> Result<Self, FeatureError> {
        if window_len == 0 || bits.len() != window_len * FRAME_BITS {
            return Err(FeatureError::Format(format!(
                "{} bits for window length {window_len}",
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(FeatureError::Format("entries must be 0 or 1".into()));
        }
        Ok(FeatureWindow {
            bits,
            window_len,
            label,
            origin,
        })
    }

    /// Encode frames and label them with the any-injected rule.
    pub fn from_frames(frames: &[CanFrame], origin: WindowOrigin) -> Self {
        let mut bits = Vec::with_capacity(frames.len() * FRAME_BITS);
        for f in frames {
            bits.extend_from_slice(&encode_frame(f));
        }
        FeatureWindow {
            bits,
            window_len: frames.len(),
            label: LabelRule::AnyInjected.apply(frames),
            origin,
        }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.window_len, FRAME_BITS)
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.bits[row * FRAME_BITS + col]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LabelRule {
    /// Normal iff no frame is injected; otherwise the class of the earliest
    /// injected frame.
    #[default]
    AnyInjected,
}

impl LabelRule {
    pub fn apply(self, frames: &[CanFrame]) -> ClassLabel {
        match self {
            LabelRule::AnyInjected => frames
                .iter()
                .find(|f| f.is_injected())
                .map_or(ClassLabel::Normal, |f| f.class()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub window_len: usize,
    pub stride: usize,
    pub label_rule: LabelRule,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self::training(16)
    }
}

impl WindowConfig {
    /// Non-overlapping windows.
    pub fn training(window_len: usize) -> Self {
        WindowConfig {
            window_len,
            stride: window_len,
            label_rule: LabelRule::AnyInjected,
        }
    }

    /// A window ending at every frame.
    pub fn streaming(window_len: usize) -> Self {
        WindowConfig {
            window_len,
            stride: 1,
            label_rule: LabelRule::AnyInjected,
        }
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.window_len == 0 {
            return Err(FeatureError::ConfigInvalid("window_len must be >= 1".into()));
        }
        if self.stride == 0 || self.stride > self.window_len {
            return Err(FeatureError::ConfigInvalid(format!(
                "stride {} must be in 1..={}",
                self.stride, self.window_len
            )));
        }
        Ok(())
    }
}

/// Cut a time-ordered frame sequence into windows. The trailing remainder
/// shorter than a window is dropped.
pub fn window_stream(
    frames: &[CanFrame],
    cfg: &WindowConfig,
    capture: u32,
) -> Result<Vec<FeatureWindow>, FeatureError> {
    cfg.validate()?;
    let w = cfg.window_len;
    if frames.len() < w {
        return Ok(Vec::new());
    }
    Ok((0..=frames.len() - w)
        .step_by(cfg.stride)
        .map(|start| {
            let mut win = FeatureWindow::from_frames(
                &frames[start..start + w],
                WindowOrigin {
                    capture,
                    start: start as u64,
                },
            );
            win.label = cfg.label_rule.apply(&frames[start..start + w]);
            win
        })
        .collect())
}

/// Incremental windowing for live ingestion: emits the same windows as
/// [`window_stream`] over the concatenation of everything pushed.
#[derive(Debug, Clone)]
pub struct StreamWindower {
    cfg: WindowConfig,
    capture: u32,
    buffer: VecDeque<CanFrame>,
    seen: u64,
}

impl StreamWindower {
    pub fn new(cfg: WindowConfig, capture: u32) -> Result<Self, FeatureError> {
        cfg.validate()?;
        Ok(StreamWindower {
            cfg,
            capture,
            buffer: VecDeque::with_capacity(cfg.window_len),
            seen: 0,
        })
    }

    /// Frames currently buffered.
    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn push(&mut self, frame: CanFrame) -> Option<(FeatureWindow, Vec<CanFrame>)> {
        if self.buffer.len() == self.cfg.window_len {
            self.buffer.pop_front();
        }
        self.buffer.push_back(frame);
        self.seen += 1;
        let w = self.cfg.window_len as u64;
        if self.seen < w || !(self.seen - w).is_multiple_of(self.cfg.stride as u64) {
            return None;
        }
        let frames: Vec<CanFrame> = self.buffer.iter().copied().collect();
        let mut win = FeatureWindow::from_frames(
            &frames,
            WindowOrigin {
                capture: self.capture,
                start: self.seen - w,
            },
        );
        win.label = self.cfg.label_rule.apply(&frames);
        Some((win, frames))
    }
}

/// Three-way dataset split.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetSplit {
    pub train: Vec<FeatureWindow>,
    pub val: Vec<FeatureWindow>,
    pub test: Vec<FeatureWindow>,
}

/// Stratified, seeded split. Part sizes are `round(n·r_train)`,
/// `round(n·r_val)` and the remainder; within each class, members are
/// dealt to parts by smooth weighted round-robin so class proportions
/// track the whole.
pub fn split_dataset(
    windows: Vec<FeatureWindow>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit, FeatureError> {
    let (a, b, c) = ratios;
    let valid = [a, b, c].iter().all(|r| r.is_finite() && *r >= 0.0) && ((a + b + c) - 1.0).abs() < 1e-9;
    if !valid {
        return Err(FeatureError::ConfigInvalid(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    if windows.is_empty() {
        return Err(FeatureError::EmptyInput);
    }
    let n = windows.len();
    let n_train = ((n as f64) * a).round() as usize;
    let n_val = (((n as f64) * b).round() as usize).min(n - n_train);
    let targets = [n_train as i64, n_val as i64, (n - n_train - n_val) as i64];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<FeatureWindow>> = vec![Vec::new(); ClassLabel::COUNT];
    for w in windows {
        by_class[w.label.index()].push(w);
    }
    let mut parts: [Vec<FeatureWindow>; 3] = Default::default();
    let mut current = [0i64; 3];
    for mut group in by_class {
        group.shuffle(&mut rng);
        for w in group {
            for (cur, t) in current.iter_mut().zip(targets) {
                *cur += t;
            }
            let pick = (0..3)
                .max_by(|&i, &j| current[i].cmp(&current[j]).then(j.cmp(&i)))
                .expect("three parts");
            current[pick] -= n as i64;
            parts[pick].push(w);
        }
    }
    for p in parts.iter_mut() {
        p.shuffle(&mut rng);
    }
    let [train, val, test] = parts;
    Ok(DatasetSplit { train, val, test })
}

/// Keep at most `cap` windows per class, chosen by a seeded shuffle,
/// preserving the original relative order.
pub fn cap_per_class(windows: Vec<FeatureWindow>, cap: usize, seed: u64) -> Vec<FeatureWindow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx_by_class: Vec<Vec<usize>> = vec![Vec::new(); ClassLabel::COUNT];
    for (i, w) in windows.iter().enumerate() {
        idx_by_class[w.label.index()].push(i);
    }
    let mut keep = vec![false; windows.len()];
    for mut idx in idx_by_class {
        idx.shuffle(&mut rng);
        for i in idx.into_iter().take(cap) {
            keep[i] = true;
        }
    }
    windows
        .into_iter()
        .zip(keep)
        .filter_map(|(w, k)| k.then_some(w))
        .collect()
}

pub fn class_histogram(windows: &[FeatureWindow]) -> [u64; ClassLabel::COUNT] {
    let mut h = [0u64; ClassLabel::COUNT];
    for w in windows {
        h[w.label.index()] += 1;
    }
    h
}

const DATASET_MAGIC: &[u8; 4] = b"CANW";
pub const DATASET_VERSION: u16 = 1;

/// Encoded dataset file.
///
/// Layout (integers little-endian):
/// `"CANW"` · version u16 · W u32 · B u32 · count u64 · histogram 5×u64 ·
/// `count` bitmaps of `ceil(W·B/8)` bytes (row-major, MSB-first in each
/// byte) · `count` label bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedDataset {
    pub window_len: usize,
    pub windows: Vec<FeatureWindow>,
}

impl EncodedDataset {
    pub fn new(window_len: usize, windows: Vec<FeatureWindow>) -> Result<Self, FeatureError> {
        if window_len == 0 {
            return Err(FeatureError::ConfigInvalid("window_len must be >= 1".into()));
        }
        if windows.iter().any(|w| w.window_len() != window_len) {
            return Err(FeatureError::Format("mixed window lengths".into()));
        }
        Ok(EncodedDataset { window_len, windows })
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), FeatureError> {
        let bits = self.window_len * FRAME_BITS;
        out.write_all(DATASET_MAGIC)?;
        out.write_all(&DATASET_VERSION.to_le_bytes())?;
        out.write_all(&(self.window_len as u32).to_le_bytes())?;
        out.write_all(&(FRAME_BITS as u32).to_le_bytes())?;
        out.write_all(&(self.windows.len() as u64).to_le_bytes())?;
        for c in class_histogram(&self.windows) {
            out.write_all(&c.to_le_bytes())?;
        }
        let mut packed = vec![0u8; bits.div_ceil(8)];
        for w in &self.windows {
            packed.iter_mut().for_each(|b| *b = 0);
            for (i, &bit) in w.bits().iter().enumerate() {
                packed[i / 8] |= bit << (7 - i % 8);
            }
            out.write_all(&packed)?;
        }
        let labels: Vec<u8> = self.windows.iter().map(|w| w.label.code()).collect();
        out.write_all(&labels)?;
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, FeatureError> {
        fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N], FeatureError> {
            let mut buf = [0u8; N];
            r.read_exact(&mut buf)?;
            Ok(buf)
        }
        if &take::<4>(&mut input)? != DATASET_MAGIC {
            return Err(FeatureError::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes(take(&mut input)?);
        if version != DATASET_VERSION {
            return Err(FeatureError::Format(format!("unsupported version {version}")));
        }
        let window_len = u32::from_le_bytes(take(&mut input)?) as usize;
        let frame_bits = u32::from_le_bytes(take(&mut input)?) as usize;
        if frame_bits != FRAME_BITS || window_len == 0 {
            return Err(FeatureError::Format(format!("shape {window_len}x{frame_bits}")));
        }
        let count = u64::from_le_bytes(take(&mut input)?) as usize;
        let mut hist = [0u64; ClassLabel::COUNT];
        for h in hist.iter_mut() {
            *h = u64::from_le_bytes(take(&mut input)?);
        }
        let bits = window_len * FRAME_BITS;
        let mut packed = vec![0u8; bits.div_ceil(8)];
        let mut bitmaps = Vec::with_capacity(count);
        for _ in 0..count {
            input.read_exact(&mut packed)?;
            bitmaps.push(
                (0..bits)
                    .map(|i| (packed[i / 8] >> (7 - i % 8)) & 1)
                    .collect::<Vec<u8>>(),
            );
        }
        let mut labels = vec![0u8; count];
        input.read_exact(&mut labels)?;
        let windows = bitmaps
            .into_iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (bits, code))| {
                let label =
                    ClassLabel::from_code(code).ok_or_else(|| FeatureError::Format(format!("label code {code}")))?;
                FeatureWindow::from_bits(
                    bits,
                    window_len,
                    label,
                    WindowOrigin {
                        capture: 0,
                        start: i as u64,
                    },
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        if class_histogram(&windows) != hist {
            return Err(FeatureError::Format("histogram does not match labels".into()));
        }
        Ok(EncodedDataset { window_len, windows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::can::Timestamp;

    fn frame(id: u32, payload: &[u8], class: ClassLabel) -> CanFrame {
        CanFrame::new(Timestamp::default(), id, payload, class).unwrap()
    }

    fn set_bits(bits: &[u8]) -> Vec<usize> {
        bits.iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(i, _)| i)
            .collect()
    }

    #[test]
    fn encode_frame_examples() {
        assert!(encode_frame(&frame(0, &[], ClassLabel::Normal)).iter().all(|&b| b == 0));
        assert_eq!(set_bits(&encode_frame(&frame(1, &[], ClassLabel::Normal))), vec![28]);
        assert_eq!(
            set_bits(&encode_frame(&frame(0, &[0x80], ClassLabel::Normal))),
            vec![29]
        );
        assert_eq!(
            set_bits(&encode_frame(&frame(1 << 28, &[], ClassLabel::Normal))),
            vec![0]
        );
        let all = frame((1 << 29) - 1, &[0xFF; 8], ClassLabel::Normal);
        assert!(encode_frame(&all).iter().all(|&b| b == 1));
    }

    fn frames(n: usize, injected_at: &[(usize, ClassLabel)]) -> Vec<CanFrame> {
        (0..n)
            .map(|i| {
                let class = injected_at
                    .iter()
                    .find(|(j, _)| *j == i)
                    .map_or(ClassLabel::Normal, |(_, c)| *c);
                CanFrame::new(Timestamp::from_micros(i as u64), i as u32, &[i as u8], class).unwrap()
            })
            .collect()
    }

    #[test]
    fn windowing_examples() {
        let fs = frames(35, &[(20, ClassLabel::DoS)]);
        let wins = window_stream(&fs, &WindowConfig::training(16), 3).unwrap();
        assert_eq!(wins.len(), 2);
        assert_eq!(wins[0].origin, WindowOrigin { capture: 3, start: 0 });
        assert_eq!(wins[1].origin.start, 16);
        assert_eq!(wins[0].label, ClassLabel::Normal);
        assert_eq!(wins[1].label, ClassLabel::DoS);
        assert_eq!(wins[1].bits()[..FRAME_BITS], encode_frame(&fs[16]));
        assert_eq!(wins[0].shape(), (16, FRAME_BITS));

        let short = frames(15, &[]);
        assert!(window_stream(&short, &WindowConfig::training(16), 0)
            .unwrap()
            .is_empty());

        let streaming = window_stream(&fs, &WindowConfig::streaming(16), 0).unwrap();
        assert_eq!(streaming.len(), 20);
    }

    #[test]
    fn mixed_window_takes_earliest_attack() {
        let fs = frames(16, &[(9, ClassLabel::GearSpoof), (3, ClassLabel::Fuzzing)]);
        assert_eq!(LabelRule::AnyInjected.apply(&fs), ClassLabel::Fuzzing);
    }

    #[test]
    fn config_validation() {
        for cfg in [
            WindowConfig {
                window_len: 0,
                stride: 1,
                label_rule: LabelRule::AnyInjected,
            },
            WindowConfig {
                window_len: 4,
                stride: 0,
                label_rule: LabelRule::AnyInjected,
            },
            WindowConfig {
                window_len: 4,
                stride: 5,
                label_rule: LabelRule::AnyInjected,
            },
        ] {
            assert!(matches!(
                window_stream(&[], &cfg, 0),
                Err(FeatureError::ConfigInvalid(_))
            ));
        }
    }

    #[test]
    fn stream_windower_matches_batch() {
        let fs = frames(40, &[(17, ClassLabel::RpmSpoof)]);
        for stride in [1, 3, 8] {
            let cfg = WindowConfig {
                window_len: 8,
                stride,
                label_rule: LabelRule::AnyInjected,
            };
            let batch = window_stream(&fs, &cfg, 1).unwrap();
            let mut sw = StreamWindower::new(cfg, 1).unwrap();
            let live: Vec<_> = fs.iter().filter_map(|f| sw.push(*f)).map(|(w, _)| w).collect();
            assert_eq!(live, batch);
        }
        let mut sw = StreamWindower::new(WindowConfig::streaming(16), 0).unwrap();
        assert!(fs[..15].iter().all(|f| sw.push(*f).is_none()));
        assert_eq!(sw.buffered(), 15);
        assert!(sw.push(fs[15]).is_some());
    }

    fn labeled(n: usize) -> Vec<FeatureWindow> {
        (0..n)
            .map(|i| {
                let label = ClassLabel::ALL[i % 5 * (i % 3).min(1)];
                let bits = (0..FRAME_BITS).map(|j| ((i >> (j % 10)) & 1) as u8).collect();
                FeatureWindow::from_bits(
                    bits,
                    1,
                    label,
                    WindowOrigin {
                        capture: 0,
                        start: i as u64,
                    },
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ws = labeled(1000);
        let s = split_dataset(ws.clone(), (0.8, 0.1, 0.1), 9).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (800, 100, 100));
        assert_eq!(s, split_dataset(ws.clone(), (0.8, 0.1, 0.1), 9).unwrap());
        assert_ne!(s.train, split_dataset(ws.clone(), (0.8, 0.1, 0.1), 10).unwrap().train);

        let whole = class_histogram(&ws);
        for part in [&s.train, &s.val, &s.test] {
            let h = class_histogram(part);
            for c in 0..5 {
                let p_part = h[c] as f64 / part.len() as f64;
                let p_all = whole[c] as f64 / 1000.0;
                assert!((p_part - p_all).abs() <= 0.02, "class {c}: {p_part} vs {p_all}");
            }
        }
        assert_eq!(
            split_dataset(ws.clone(), (0.5, 0.6, 0.1), 0),
            Err(FeatureError::ConfigInvalid(
                "split ratios (0.5, 0.6, 0.1) must be non-negative and sum to 1".into()
            ))
        );
        assert_eq!(
            split_dataset(Vec::new(), (0.8, 0.1, 0.1), 0),
            Err(FeatureError::EmptyInput)
        );
    }

    #[test]
    fn cap_keeps_at_most_cap() {
        let ws = labeled(1000);
        let capped = cap_per_class(ws, 50, 1);
        assert!(class_histogram(&capped).iter().all(|&c| c <= 50));
        assert_eq!(class_histogram(&capped)[0], 50);
    }

    #[test]
    fn encoded_dataset_round_trip() {
        let fs = frames(64, &[(5, ClassLabel::DoS), (40, ClassLabel::GearSpoof)]);
        let ws = window_stream(&fs, &WindowConfig::training(16), 0).unwrap();
        let ds = EncodedDataset::new(16, ws.clone()).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let bitmap = (16 * FRAME_BITS).div_ceil(8);
        assert_eq!(buf.len(), 4 + 2 + 4 + 4 + 8 + 40 + 4 * bitmap + 4);
        let back = EncodedDataset::read_from(&buf[..]).unwrap();
        assert_eq!(back.windows.len(), 4);
        for (a, b) in back.windows.iter().zip(&ws) {
            assert_eq!(a.bits(), b.bits());
            assert_eq!(a.label, b.label);
        }
        buf[0] = b'X';
        assert!(EncodedDataset::read_from(&buf[..]).is_err());
    }
}
