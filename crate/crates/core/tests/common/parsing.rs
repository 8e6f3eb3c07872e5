//! Parser oracle: random frames, non-canonical spellings, independently
//! built canonical forms, and the documented malformed inputs.

use bayescan::can::{parse_candump, parse_dataset_csv, CandumpLine, ParseError};
use bayescan::{CanFrame, ClassLabel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LINES: usize = 10_000;

/// A random frame plus a deliberately non-canonical spelling of it.
pub struct Generated {
    pub micros: u64,
    pub id: u32,
    pub payload: Vec<u8>,
    pub injected: bool,
}

pub fn random_case(s: &str, rng: &mut ChaCha8Rng) -> String {
    s.chars()
        .map(|c| {
            if rng.random_bool(0.5) {
                c.to_ascii_uppercase()
            } else {
                c.to_ascii_lowercase()
            }
        })
        .collect()
}

pub fn generate(rng: &mut ChaCha8Rng) -> Generated {
    let id = match rng.random_range(0..3) {
        0 => rng.random_range(0..0x800),
        1 => rng.random_range(0..1u32 << 29),
        _ => [0, 0x7FF, 0x800, (1 << 29) - 1][rng.random_range(0..4)],
    };
    let dlc = rng.random_range(0..=8);
    Generated {
        micros: rng.random_range(0..4_000_000_000_000_000u64),
        id,
        payload: (0..dlc).map(|_| rng.random()).collect(),
        injected: rng.random_bool(0.5),
    }
}

/// Timestamp with 0..=6 fractional digits, dropping only trailing zeros.
pub fn spell_timestamp(micros: u64, rng: &mut ChaCha8Rng) -> String {
    let frac = format!("{:06}", micros % 1_000_000);
    let trimmed = frac.trim_end_matches('0');
    let keep = rng.random_range(trimmed.len()..=6);
    if keep == 0 && rng.random_bool(0.5) {
        format!("{}", micros / 1_000_000)
    } else {
        format!("{}.{}", micros / 1_000_000, &frac[..keep])
    }
}

pub fn spell_csv(g: &Generated, rng: &mut ChaCha8Rng) -> String {
    let digits = rng.random_range(3.max(format!("{:x}", g.id).len())..=8);
    let mut line = format!(
        "{},{},{}",
        spell_timestamp(g.micros, rng),
        random_case(&format!("{:0digits$x}", g.id), rng),
        g.payload.len()
    );
    for b in &g.payload {
        let byte = if *b < 16 && rng.random_bool(0.5) {
            format!("{b:x}")
        } else {
            format!("{b:02x}")
        };
        line.push(',');
        line.push_str(&random_case(&byte, rng));
    }
    line.push_str(if g.injected { ",T" } else { ",R" });
    if rng.random_bool(0.1) {
        line.push_str("\r\n");
    }
    line
}

pub fn canonical_csv(g: &Generated) -> String {
    let mut s = format!(
        "{}.{:06},{:04x},{}",
        g.micros / 1_000_000,
        g.micros % 1_000_000,
        g.id,
        g.payload.len()
    );
    for b in &g.payload {
        s.push_str(&format!(",{b:02x}"));
    }
    s.push_str(if g.injected { ",T" } else { ",R" });
    s
}

pub fn spell_candump(g: &Generated, rng: &mut ChaCha8Rng) -> String {
    let digits = rng.random_range(format!("{:x}", g.id).len()..=8);
    let payload: String = g.payload.iter().map(|b| format!("{b:02x}")).collect();
    format!(
        "({}) can{} {}#{}",
        spell_timestamp(g.micros, rng),
        rng.random_range(0..3),
        random_case(&format!("{:0digits$x}", g.id), rng),
        random_case(&payload, rng)
    )
}

pub fn canonical_candump(g: &Generated, iface: &str) -> String {
    let id = if g.id <= 0x7FF {
        format!("{:03X}", g.id)
    } else {
        format!("{:08X}", g.id)
    };
    let payload: String = g.payload.iter().map(|b| format!("{b:02X}")).collect();
    format!(
        "({}.{:06}) {iface} {id}#{payload}",
        g.micros / 1_000_000,
        g.micros % 1_000_000
    )
}

#[derive(Debug, Default)]
pub struct RoundTrip {
    pub lines: usize,
    pub exact: usize,
    pub first_failure: Option<String>,
}

impl RoundTrip {
    fn record(&mut self, ok: Result<(), String>) {
        self.lines += 1;
        match ok {
            Ok(()) => self.exact += 1,
            Err(e) if self.first_failure.is_none() => self.first_failure = Some(e),
            Err(_) => {}
        }
    }

    pub fn passes(&self) -> bool {
        self.lines > 0 && self.exact == self.lines
    }
}

fn check(cond: bool, what: &str, line: &str) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(format!("{what}: {line:?}"))
    }
}

/// Parse non-canonical dataset-CSV spellings; fields must match the
/// generator and re-serialization must equal the canonical form.
pub fn csv_round_trip(lines: usize, seed: u64) -> RoundTrip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rt = RoundTrip::default();
    for _ in 0..lines {
        let g = generate(&mut rng);
        let class = ClassLabel::ALL[rng.random_range(1..5)];
        let line = spell_csv(&g, &mut rng);
        rt.record((|| {
            let frame = parse_dataset_csv(&line, class).map_err(|e| format!("{e}: {line:?}"))?;
            check(frame.timestamp().micros() == g.micros, "timestamp", &line)?;
            check(frame.can_id() == g.id, "id", &line)?;
            check(frame.payload() == &g.payload[..], "payload", &line)?;
            let class_ok = frame.class() == if g.injected { class } else { ClassLabel::Normal };
            check(class_ok, "class", &line)?;
            let canonical = frame.to_dataset_csv();
            check(canonical == canonical_csv(&g), "canonical form", &line)?;
            check(parse_dataset_csv(&canonical, class) == Ok(frame), "reparse", &line)
        })());
    }
    rt
}

pub fn candump_round_trip(lines: usize, seed: u64) -> RoundTrip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rt = RoundTrip::default();
    for _ in 0..lines {
        let g = generate(&mut rng);
        let line = spell_candump(&g, &mut rng);
        rt.record((|| {
            let parsed: CandumpLine = line.parse().map_err(|e| format!("{e}: {line:?}"))?;
            check(parsed.frame.timestamp().micros() == g.micros, "timestamp", &line)?;
            check(parsed.frame.can_id() == g.id, "id", &line)?;
            check(parsed.frame.payload() == &g.payload[..], "payload", &line)?;
            check(parsed.frame.class() == ClassLabel::Normal, "class", &line)?;
            let canonical = parsed.to_string();
            check(
                canonical == canonical_candump(&g, &parsed.iface),
                "canonical form",
                &line,
            )?;
            check(
                canonical.parse::<CandumpLine>().as_ref() == Ok(&parsed),
                "reparse",
                &line,
            )
        })());
    }
    rt
}

pub const MALFORMED_CSV: [&str; 19] = [
    "",
    "1.0,0316,8,05,21,R",
    "1.0,0316,1,05,06,R",
    "1.0,0316,2,05,R",
    "1.0,0316",
    "1.0,0316,,R",
    "1.0,0316,-1,R",
    "1.0,31,0,R",
    "1.0,0x316,0,R",
    "1.0,123456789,0,R",
    "1.0,0316,1,100,R",
    "1.0,0316,1,,R",
    "1.0,0316,1,0g,R",
    "1.0,0316,0,F",
    "1.0,0316,0,",
    "1.1234567,0316,0,R",
    "-1.0,0316,0,R",
    "1e3,0316,0,R",
    " 1.0,0316,0,R",
];

pub const MALFORMED_CANDUMP: [&str; 12] = [
    "",
    "1.0 can0 123#00",
    "(1.0 can0 123#00",
    "(1.0) can0",
    "(1.0) can0 12300",
    "(1.0) can0 #00",
    "(1.0) can0 12G#00",
    "(1.0) can0 123#0G",
    "(1.0) can0 123#001122334455667788",
    "(1.0) can0 123#00 extra",
    "(x) can0 123#00",
    "(1.0) can0 123456789#00",
];

/// Every documented malformed input with the error it must raise.
pub fn malformed_cases() -> Vec<(String, Result<CanFrame, ParseError>, ParseError)> {
    let fuzz = ClassLabel::Fuzzing;
    let malformed = |l: &str| ParseError::MalformedLine(l.to_string());
    let mut cases = Vec::new();
    for l in MALFORMED_CSV {
        cases.push((format!("csv {l:?}"), parse_dataset_csv(l, fuzz), malformed(l)));
    }
    for l in MALFORMED_CANDUMP {
        cases.push((format!("candump {l:?}"), parse_candump(l), malformed(l)));
    }
    let specific = [
        ("1.0,20000000,0,R", fuzz, ParseError::IdOutOfRange(0x2000_0000)),
        ("1.0,FFFFFFFF,0,T", fuzz, ParseError::IdOutOfRange(0xFFFF_FFFF)),
        ("1.0,0316,9,0,0,0,0,0,0,0,0,0,R", fuzz, ParseError::DlcMismatch(9)),
        ("1.0,0316,0,T", ClassLabel::Normal, ParseError::UnlabeledInjection),
    ];
    for (l, class, want) in specific {
        cases.push((format!("csv {l:?}"), parse_dataset_csv(l, class), want));
    }
    for (l, want) in [
        ("(1.0) can0 123#0", ParseError::OddHexDigits),
        ("(0.0) can0 123#ABC", ParseError::OddHexDigits),
        ("(1.0) can0 20000000#", ParseError::IdOutOfRange(0x2000_0000)),
    ] {
        cases.push((format!("candump {l:?}"), parse_candump(l), want));
    }
    cases
}

/// Whether `got` is the documented error. Malformed-line messages are not
/// part of the contract, only the variant.
pub fn raises(got: &Result<CanFrame, ParseError>, want: &ParseError) -> bool {
    match (got, want) {
        (Err(ParseError::MalformedLine(_)), ParseError::MalformedLine(_)) => true,
        (Err(e), w) => e == w,
        (Ok(_), _) => false,
    }
}
