//! Attacks the fixed toy pairs used by the transfer smoke test and writes the
//! per-pair CLS cosine gains as JSON.
//!
//! ```text
//! cargo run --release -p praf-core --example transfer_pilot -- tests/fixtures/toy_transfer_pilot.json
//! ```

use praf_core::image::synthetic_scene;
use praf_core::tensor::cosine;
use praf_core::{build_ensemble, run_attack, AttackConfig, EncoderConfig, Ensemble, SurrogateEncoder};
use serde_json::json;

pub const PAIRS: u64 = 10;

fn final_cls_cosine(enc: &SurrogateEncoder, a: &praf_core::Image, b: &praf_core::Image) -> f64 {
    let fa = enc.encode(a).unwrap();
    let fb = enc.encode(b).unwrap();
    cosine(fa.final_cls().data(), fb.final_cls().data()).unwrap()
}

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "toy_transfer_pilot.json".into());
    let ensemble = build_ensemble(&Ensemble::desk_default_configs(64)).unwrap();
    let held_out = SurrogateEncoder::new(EncoderConfig::new(64, 8, 4, 64, 4, 4)).unwrap();
    let mut rows = Vec::new();
    for i in 0..PAIRS {
        let clean = synthetic_scene(64, 100 + 2 * i);
        let target = synthetic_scene(64, 101 + 2 * i);
        let cfg = AttackConfig { seed: i, ..AttackConfig::default() };
        let adv = run_attack(&clean, &target, &ensemble, &cfg).unwrap().adversarial;
        let adv = praf_core::io::quantized(&adv);
        let members: Vec<[f64; 2]> = ensemble
            .encoders()
            .iter()
            .map(|e| [final_cls_cosine(e, &clean, &target), final_cls_cosine(e, &adv, &target)])
            .collect();
        let held = [final_cls_cosine(&held_out, &clean, &target), final_cls_cosine(&held_out, &adv, &target)];
        eprintln!("pair {i}: members {members:?} held-out {held:?} gain {:.5}", held[1] - held[0]);
        rows.push(json!({ "pair": i, "members": members, "held_out": held }));
    }
    let doc = json!({ "pairs": rows });
    std::fs::write(&out, serde_json::to_string_pretty(&doc).unwrap() + "\n").unwrap();
}
