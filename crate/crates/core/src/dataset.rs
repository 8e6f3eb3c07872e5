//! Seed-pinned synthetic datasets: balanced labeled windows built from one
//! synthetic capture per class, and uniform-noise out-of-distribution
//! windows.

use crate::can::{synth_capture, AttackKind, SynthError, SynthProfile};
use crate::features::{
    cap_per_class, class_histogram, window_stream, FeatureError, FeatureWindow, WindowConfig, WindowOrigin, FRAME_BITS,
};
use crate::ClassLabel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("class {class} produced {got} windows, need {want}")]
    Shortfall { class: ClassLabel, got: usize, want: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticDatasetConfig {
    pub windows_per_class: usize,
    pub window_len: usize,
    pub seed: u64,
    pub background_rate_hz: f64,
    /// Injection rates for DoS, fuzzing, RPM spoofing, gear spoofing.
    pub attack_rates_hz: [f64; 4],
}

impl Default for SyntheticDatasetConfig {
    fn default() -> Self {
        SyntheticDatasetConfig {
            windows_per_class: 4000,
            window_len: 16,
            seed: 0,
            background_rate_hz: 2000.0,
            attack_rates_hz: [3333.0, 2000.0, 1000.0, 1000.0],
        }
    }
}

impl SyntheticDatasetConfig {
    pub fn total(windows: usize, window_len: usize, seed: u64) -> Self {
        SyntheticDatasetConfig {
            windows_per_class: windows / ClassLabel::COUNT,
            window_len,
            seed,
            ..Default::default()
        }
    }

    /// Capture profile for one class, long enough to yield the requested
    /// number of windows with some slack.
    pub fn profile(&self, class: ClassLabel) -> SynthProfile {
        let frames = (self.windows_per_class * self.window_len) as f64 * 1.1 + self.window_len as f64;
        match class {
            ClassLabel::Normal => SynthProfile::normal(frames / self.background_rate_hz, self.background_rate_hz),
            attack => {
                let kind = AttackKind::ALL[attack.index() - 1];
                let rate = self.attack_rates_hz[attack.index() - 1];
                let duration = frames / (self.background_rate_hz + rate);
                SynthProfile::single(kind, duration, self.background_rate_hz, rate)
            }
        }
    }
}

/// Balanced labeled windows: exactly `windows_per_class` of each class,
/// windowed with training stride.
pub fn build_synthetic_dataset(cfg: &SyntheticDatasetConfig) -> Result<Vec<FeatureWindow>, DatasetError> {
    let wcfg = WindowConfig::training(cfg.window_len);
    let mut all = Vec::with_capacity(cfg.windows_per_class * ClassLabel::COUNT);
    for class in ClassLabel::ALL {
        let frames = synth_capture(&cfg.profile(class), crate::derive_seed(cfg.seed, class.index() as u64))?;
        let windows: Vec<FeatureWindow> = window_stream(&frames, &wcfg, class.index() as u32)?
            .into_iter()
            .filter(|w| w.label == class)
            .collect();
        all.extend(windows);
    }
    let capped = cap_per_class(all, cfg.windows_per_class, crate::derive_seed(cfg.seed, 99));
    let hist = class_histogram(&capped);
    for class in ClassLabel::ALL {
        let got = hist[class.index()] as usize;
        if got < cfg.windows_per_class {
            return Err(DatasetError::Shortfall {
                class,
                got,
                want: cfg.windows_per_class,
            });
        }
    }
    Ok(capped)
}

/// Windows of independent fair coin flips, labeled Normal.
pub fn uniform_noise_windows(count: usize, window_len: usize, seed: u64) -> Vec<FeatureWindow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let bits = (0..window_len * FRAME_BITS).map(|_| rng.random_range(0..2u8)).collect();
            let origin = WindowOrigin {
                capture: u32::MAX,
                start: i as u64,
            };
            FeatureWindow::from_bits(bits, window_len, ClassLabel::Normal, origin).expect("valid bits")
        })
        .collect()
}
