#![allow(dead_code)]

use locpred::abstraction::{Delta, LabelGrid, RegionOccupancy, RelativeSequence, Sample};
use locpred::rng;
use rand::Rng as _;

/// Random samples with uniform inputs and labels.
pub fn random_samples(n: usize, k: usize, m: usize, seed: u64) -> Vec<Sample> {
    let mut r = rng::stream(seed, &[]);
    (0..n)
        .map(|i| {
            let deltas = (0..k)
                .map(|_| Delta { dx: r.random_range(-1.0..1.0), dy: r.random_range(-1.0..1.0) })
                .collect();
            let values = (0..m * m).map(|_| r.random_range(0.0..1.0)).collect();
            let class = r.random_range(0..m * m);
            Sample {
                sequence: RelativeSequence { deltas, scaled: true, scale_bound_m: 100.0 },
                region: RegionOccupancy { m, values },
                label: LabelGrid { class_index: class, m },
                horizon: 1,
                user_id: format!("u{:03}", i % 7),
                geometry: None,
            }
        })
        .collect()
}
