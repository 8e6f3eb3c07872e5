//! Seeded synthetic CAN traffic: background ECU chatter plus the four
//! injection attacks.
//!
//! Attack conventions follow the public car-hacking captures:
//! - DoS floods the highest-priority ID `0x000` with an all-zero payload;
//! - fuzzing injects uniformly random 11-bit IDs and random payload bytes;
//! - RPM / gear spoofing inject a fixed fabricated payload on the
//!   legitimate RPM (`0x316`) or gear (`0x43F`) ID at high rate.

use super::{CanFrame, ClassLabel, Timestamp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Dos,
    Fuzzing,
    RpmSpoof,
    GearSpoof,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [
        AttackKind::Dos,
        AttackKind::Fuzzing,
        AttackKind::RpmSpoof,
        AttackKind::GearSpoof,
    ];

    pub fn class(self) -> ClassLabel {
        match self {
            AttackKind::Dos => ClassLabel::DoS,
            AttackKind::Fuzzing => ClassLabel::Fuzzing,
            AttackKind::RpmSpoof => ClassLabel::RpmSpoof,
            AttackKind::GearSpoof => ClassLabel::GearSpoof,
        }
    }
}

/// Injection of one attack type at a fixed rate over `[start_s, end_s)`
/// relative to the capture start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSegment {
    pub kind: AttackKind,
    pub start_s: f64,
    pub end_s: f64,
    pub rate_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthProfile {
    pub duration_s: f64,
    pub background_rate_hz: f64,
    pub attacks: Vec<AttackSegment>,
    pub start_time: Timestamp,
    pub rpm_id: u32,
    pub gear_id: u32,
    pub rpm_payload: [u8; 8],
    pub gear_payload: [u8; 8],
}

impl Default for SynthProfile {
    fn default() -> Self {
        SynthProfile {
            duration_s: 1.0,
            background_rate_hz: 1000.0,
            attacks: Vec::new(),
            start_time: Timestamp::from_micros(1_478_198_376_000_000),
            rpm_id: 0x316,
            gear_id: 0x43F,
            rpm_payload: [0x45, 0x29, 0x24, 0xFF, 0x29, 0x24, 0x00, 0xFF],
            gear_payload: [0x01, 0x45, 0x60, 0xFF, 0x65, 0x00, 0x00, 0x00],
        }
    }
}

impl SynthProfile {
    /// Attack-free traffic.
    pub fn normal(duration_s: f64, background_rate_hz: f64) -> Self {
        SynthProfile {
            duration_s,
            background_rate_hz,
            ..Default::default()
        }
    }

    /// One attack active for the whole capture.
    pub fn single(kind: AttackKind, duration_s: f64, background_rate_hz: f64, rate_hz: f64) -> Self {
        let mut p = Self::normal(duration_s, background_rate_hz);
        p.attacks.push(AttackSegment {
            kind,
            start_s: 0.0,
            end_s: duration_s,
            rate_hz,
        });
        p
    }

    /// Attack bursts of `on_s` seconds separated by `off_s` seconds of clean
    /// traffic, starting with a clean gap.
    pub fn bursts(
        kind: AttackKind,
        duration_s: f64,
        background_rate_hz: f64,
        rate_hz: f64,
        on_s: f64,
        off_s: f64,
    ) -> Self {
        let mut p = Self::normal(duration_s, background_rate_hz);
        let mut t = off_s;
        while on_s > 0.0 && t < duration_s {
            p.attacks.push(AttackSegment {
                kind,
                start_s: t,
                end_s: (t + on_s).min(duration_s),
                rate_hz,
            });
            t += on_s + off_s;
        }
        p
    }

    pub fn background_frames(&self) -> usize {
        (self.duration_s * self.background_rate_hz).round() as usize
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("profile produces no traffic (duration {duration_s}s, rate {rate_hz}Hz)")]
    EmptyProfile { duration_s: f64, rate_hz: f64 },
    #[error("attack segment {0} is outside the capture or has a non-positive rate")]
    InvalidSegment(usize),
}

struct EcuSignal {
    id: u32,
    dlc: usize,
    weight: u32,
    /// Bytes that drift by ±1 between emissions.
    drifting: &'static [usize],
    /// Byte whose low nibble is a rolling counter.
    counter: Option<usize>,
}

const fn ecu(id: u32, dlc: usize, weight: u32, drifting: &'static [usize], counter: Option<usize>) -> EcuSignal {
    EcuSignal {
        id,
        dlc,
        weight,
        drifting,
        counter,
    }
}

// Background dictionary modeled on a passenger-car powertrain bus.
const ECUS: &[EcuSignal] = &[
    ecu(0x002, 8, 4, &[0, 1], Some(6)),
    ecu(0x081, 8, 2, &[2], None),
    ecu(0x0A0, 8, 2, &[0, 4], None),
    ecu(0x0A1, 8, 2, &[1], None),
    ecu(0x130, 8, 4, &[0, 1, 2], Some(6)),
    ecu(0x131, 8, 4, &[0, 1, 2], Some(6)),
    ecu(0x140, 8, 4, &[3], Some(7)),
    ecu(0x153, 8, 4, &[1, 2], None),
    ecu(0x164, 4, 2, &[0], Some(3)),
    ecu(0x165, 8, 2, &[4], None),
    ecu(0x18F, 8, 4, &[1, 3], None),
    ecu(0x260, 8, 4, &[2, 3], Some(7)),
    ecu(0x2A0, 8, 4, &[0, 5], None),
    ecu(0x2C0, 8, 4, &[1], None),
    ecu(0x316, 8, 5, &[], None),
    ecu(0x329, 8, 4, &[1, 2], Some(7)),
    ecu(0x350, 8, 3, &[0], None),
    ecu(0x370, 8, 3, &[2], None),
    ecu(0x43F, 8, 3, &[], None),
    ecu(0x440, 8, 3, &[3], None),
    ecu(0x4B1, 6, 2, &[0, 1], None),
    ecu(0x4F0, 8, 2, &[4], Some(7)),
    ecu(0x545, 8, 3, &[0, 5], None),
    ecu(0x5A0, 8, 1, &[], None),
    ecu(0x5A2, 8, 1, &[], None),
    ecu(0x5F0, 2, 1, &[1], None),
    ecu(0x690, 8, 1, &[2], None),
];

const RPM_MIN: u16 = 0x0600;
const RPM_MAX: u16 = 0x1F00;

// Per-ID fixed base payload; independent of the seed so every capture
// shares the same bus structure.
fn base_payload(id: u32) -> [u8; 8] {
    let mut out = [0u8; 8];
    let mut z = u64::from(id).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xC0FF_EE00;
    for b in out.iter_mut() {
        z ^= z >> 29;
        z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        *b = (z >> 56) as u8;
    }
    out
}

struct BusState {
    payloads: Vec<[u8; 8]>,
    rpm: u16,
    gear: u8,
    total_weight: u32,
}

impl BusState {
    fn new() -> Self {
        BusState {
            payloads: ECUS.iter().map(|e| base_payload(e.id)).collect(),
            rpm: 0x0C00,
            gear: 1,
            total_weight: ECUS.iter().map(|e| e.weight).sum(),
        }
    }

    fn next_frame<R: Rng>(&mut self, rng: &mut R, ts: Timestamp) -> CanFrame {
        let mut pick = rng.random_range(0..self.total_weight);
        let idx = ECUS
            .iter()
            .position(|e| {
                if pick < e.weight {
                    true
                } else {
                    pick -= e.weight;
                    false
                }
            })
            .expect("weights cover range");
        let ecu = &ECUS[idx];
        let payload = &mut self.payloads[idx];
        for &b in ecu.drifting {
            match rng.random_range(0..10u8) {
                0..=1 => payload[b] = payload[b].wrapping_sub(1),
                2..=3 => payload[b] = payload[b].wrapping_add(1),
                _ => {}
            }
        }
        if let Some(c) = ecu.counter {
            payload[c] = (payload[c] & 0xF0) | ((payload[c].wrapping_add(1)) & 0x0F);
        }
        match ecu.id {
            0x316 => {
                let step = rng.random_range(0..=32u16);
                self.rpm = if rng.random_bool(0.5) {
                    self.rpm.saturating_add(step).min(RPM_MAX)
                } else {
                    self.rpm.saturating_sub(step).max(RPM_MIN)
                };
                payload[2..4].copy_from_slice(&self.rpm.to_be_bytes());
            }
            0x43F => {
                if rng.random_bool(0.02) {
                    self.gear = if rng.random_bool(0.5) {
                        (self.gear + 1).min(6)
                    } else {
                        self.gear.saturating_sub(1).max(1)
                    };
                }
                payload[1] = self.gear;
            }
            _ => {}
        }
        CanFrame::new(ts, ecu.id, &payload[..ecu.dlc], ClassLabel::Normal).expect("dictionary ids are valid")
    }
}

fn offset(start: Timestamp, secs: f64) -> Timestamp {
    Timestamp::from_micros(start.micros() + (secs * 1e6).round() as u64)
}

/// Generate a capture. Deterministic in `(profile, seed)`; timestamps are
/// non-decreasing.
pub fn synth_capture(profile: &SynthProfile, seed: u64) -> Result<Vec<CanFrame>, SynthError> {
    let bad_duration = !(profile.duration_s.is_finite() && profile.duration_s > 0.0);
    let bad_rate = !(profile.background_rate_hz.is_finite() && profile.background_rate_hz > 0.0);
    if bad_duration || bad_rate || profile.background_frames() == 0 {
        return Err(SynthError::EmptyProfile {
            duration_s: profile.duration_s,
            rate_hz: profile.background_rate_hz,
        });
    }
    for (i, seg) in profile.attacks.iter().enumerate() {
        let ok = seg.start_s >= 0.0
            && seg.end_s >= seg.start_s
            && seg.end_s <= profile.duration_s
            && seg.rate_hz.is_finite()
            && seg.rate_hz > 0.0;
        if !ok {
            return Err(SynthError::InvalidSegment(i));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bus = BusState::new();
    let n_bg = profile.background_frames();
    let period = 1.0 / profile.background_rate_hz;
    let mut frames = Vec::with_capacity(n_bg);
    for i in 0..n_bg {
        let jitter: f64 = rng.random_range(0.0..0.5);
        let ts = offset(profile.start_time, (i as f64 + jitter) * period);
        frames.push(bus.next_frame(&mut rng, ts));
    }

    for seg in &profile.attacks {
        let n = ((seg.end_s - seg.start_s) * seg.rate_hz).round() as usize;
        let class = seg.kind.class();
        for j in 0..n {
            let ts = offset(profile.start_time, seg.start_s + (j as f64 + 0.25) / seg.rate_hz);
            let frame = match seg.kind {
                AttackKind::Dos => CanFrame::new(ts, 0x000, &[0u8; 8], class),
                AttackKind::Fuzzing => {
                    let id = rng.random_range(0..0x800u32);
                    let payload: [u8; 8] = rng.random();
                    CanFrame::new(ts, id, &payload, class)
                }
                AttackKind::RpmSpoof => CanFrame::new(ts, profile.rpm_id, &profile.rpm_payload, class),
                AttackKind::GearSpoof => CanFrame::new(ts, profile.gear_id, &profile.gear_payload, class),
            }
            .expect("generator emits valid frames");
            frames.push(frame);
        }
    }
    // Stable: background frames precede injected ones at equal timestamps.
    frames.sort_by_key(|f| f.timestamp());
    Ok(frames)
}
