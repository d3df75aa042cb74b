//! Fixtures shared by the criterion benches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spoofqa_core::audio::{MelFrontend, MelSpectrogram, Waveform};
use spoofqa_core::corpus::{synthesize, UtteranceKind};
use spoofqa_core::eval::Prediction;
use spoofqa_core::promptkit::TemplateId;
use spoofqa_core::Label;

pub const RATE: u32 = 16_000;

/// One second of synthetic bonafide speech.
pub fn speech(seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new(synthesize(UtteranceKind::Bonafide, RATE as usize, &mut rng), RATE).expect("valid waveform")
}

pub fn mel(seed: u64) -> MelSpectrogram {
    MelFrontend::default().compute(&speech(seed)).expect("one second is long enough")
}

/// `n` predictions cycling through correct, wrong and unparseable answers.
pub fn predictions(n: usize) -> Vec<Prediction> {
    (0..n)
        .map(|i| {
            let truth = if i % 2 == 0 { Label::Spoof } else { Label::Bonafide };
            let raw = match i % 5 {
                0 => "maybe",
                1 | 2 => truth.as_str(),
                _ => truth.flipped().as_str(),
            };
            Prediction::from_text(&format!("u{i}"), TemplateId::P1, raw, truth)
        })
        .collect()
}
