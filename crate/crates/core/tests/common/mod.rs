#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ltc_core::feeder::{validate_topology, FeederDescription, FeederTopology, LineSpec, LtcSpec};
use ltc_core::powerflow::Injections;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random radial feeder with `n` buses besides the substation and `n_ltc`
/// tap changers. Bus labels, line order and line orientation are shuffled so
/// the validator has to reorient everything.
pub fn random_feeder(rng: &mut impl Rng, n: usize, n_ltc: usize) -> FeederTopology {
    assert!(n_ltc <= n);
    let mut labels: Vec<usize> = (1..=n).collect();
    labels.shuffle(rng);
    let label = |i: usize| if i == 0 { 0 } else { labels[i - 1] };
    let mut ltc_lines: Vec<usize> = (0..n).collect();
    ltc_lines.shuffle(rng);
    ltc_lines.truncate(n_ltc);
    let mut lines: Vec<LineSpec> = (1..=n)
        .map(|child| {
            let parent = rng.random_range(0..child);
            let (mut from, mut to) = (label(parent), label(child));
            if rng.random_bool(0.3) {
                std::mem::swap(&mut from, &mut to);
            }
            LineSpec {
                id: 0,
                from,
                to,
                r: rng.random_range(0.001..0.02),
                x: rng.random_range(0.001..0.03),
                ltc: ltc_lines.contains(&(child - 1)).then_some(LtcSpec {
                    pos_min: -16,
                    pos_max: 16,
                }),
            }
        })
        .collect();
    lines.shuffle(rng);
    for (i, l) in lines.iter_mut().enumerate() {
        l.id = i + 1;
    }
    validate_topology(&FeederDescription {
        v0: rng.random_range(0.98..1.05),
        buses: n,
        lines,
    })
    .expect("generated feeder is radial")
}

/// Mostly consuming, occasionally generating buses.
pub fn random_injections(rng: &mut impl Rng, n: usize, scale: f64) -> Injections {
    Injections {
        p: (0..n).map(|_| scale * rng.random_range(-1.0..0.3)).collect(),
        q: (0..n).map(|_| scale * rng.random_range(-0.5..0.2)).collect(),
    }
}

/// One position per LTC, uniform over its window.
pub fn random_positions(rng: &mut impl Rng, topo: &FeederTopology) -> Vec<i32> {
    topo.ltcs()
        .iter()
        .map(|l| rng.random_range(l.pos_min()..=l.pos_max()))
        .collect()
}
