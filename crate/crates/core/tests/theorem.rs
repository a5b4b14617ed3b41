use sorn_core::theorem::{compare_standard_vs_skimming, TwoToneSeries};
use sorn_core::train::TrainConfig;

fn config() -> TrainConfig {
    TrainConfig {
        skimming_layers: 2,
        patch_size: 6,
        window_length: 40,
        seed: 7,
        ..TrainConfig::default()
    }
}

#[test]
fn first_layer_takes_the_louder_tone() {
    let series = TwoToneSeries {
        high_amplitude: 5.0,
        high_period: 48.0,
        low_amplitude: 1.0,
        low_period: 12.0,
        length: 1000,
    };
    let c = compare_standard_vs_skimming(&series, &config()).unwrap();
    assert!(c.first_layer_high_amplitude > c.first_layer_low_amplitude, "{c:?}");
    assert!(c.first_layer_corr_high > c.first_layer_corr_low, "{c:?}");
}

#[test]
fn single_tone_gives_comparable_models() {
    let series = TwoToneSeries {
        high_amplitude: 5.0,
        high_period: 48.0,
        low_amplitude: 0.0,
        low_period: 12.0,
        length: 1000,
    };
    let c = compare_standard_vs_skimming(&series, &config()).unwrap();
    // no quiet tone to recover: both fits of it stay near zero
    assert!(c.skimming_low_rmse < 0.25 && c.standard_low_rmse < 0.25, "{c:?}");
    let ratio = c.skimming_high_rmse / c.standard_high_rmse;
    assert!(ratio > 0.2 && ratio < 5.0, "{c:?}");
}
