//! Benchmarks live in `benches/`; run them with `cargo bench -p medvt-bench`.

use medvt_core::model::{Config, MedVt, Sample};
use medvt_core::{Rng, Tensor};

/// A desk-sized random clip with a thresholded label map.
pub fn desk_sample(seed: u64) -> (Config, MedVt, Sample) {
    let cfg = Config::preset("desk").expect("built-in preset");
    let model = MedVt::new(cfg.model.clone()).expect("desk model");
    let [h, w] = cfg.model.input;
    let clip: Tensor = Rng::new(seed).uniform_tensor(&[cfg.model.frames, h, w, 3], 0.0, 1.0);
    let labels = clip
        .data()
        .chunks(3)
        .map(|p| usize::from(p[0] > 0.5))
        .collect();
    let sample = Sample::new(clip, labels).expect("sample shape");
    (cfg, model, sample)
}
