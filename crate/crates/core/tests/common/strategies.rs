//! Exhaustive layer-mapping properties over every depth pair up to 24.

use kdlab::distill::{select_layers, LayerMapping, Strategy};

pub const MAX_DEPTH: usize = 24;

fn teachers(strategy: Strategy, ls: usize, lt: usize, seed: Option<u64>) -> Vec<usize> {
    select_layers(strategy, ls, lt, seed).unwrap().teacher_layers()
}

fn check_pair(ls: usize, lt: usize, out: &mut Vec<String>) {
    let mut fail = |what: &str| out.push(format!("Ls={ls} Lt={lt}: {what}"));
    let forward = select_layers(Strategy::Forward, ls, lt, None).unwrap();
    let fwd = forward.teacher_layers();
    let students: Vec<usize> = forward.pairs().iter().map(|p| p.0).collect();
    if students != (1..=ls).collect::<Vec<_>>() {
        fail("student side is not 1..=Ls");
    }
    if fwd.iter().any(|&t| t < 1 || t > lt) {
        fail("forward out of range");
    }
    if fwd.windows(2).any(|w| w[0] >= w[1]) {
        fail("forward not strictly ascending");
    }
    if fwd.last() != Some(&lt) {
        fail("forward does not end at the last teacher layer");
    }
    for (i, &t) in fwd.iter().enumerate() {
        // Smallest t with t * Ls >= i * Lt.
        let i = i + 1;
        if t * ls < i * lt || (t - 1) * ls >= i * lt {
            fail("forward is not ceil(i * Lt / Ls)");
        }
    }

    let mut rev = teachers(Strategy::Reverse, ls, lt, None);
    let mut expected = fwd.clone();
    expected.reverse();
    if rev != expected {
        fail("reverse is not forward reversed");
    }
    rev.reverse();
    if rev != fwd {
        fail("reversing twice does not recover forward");
    }

    let mid = lt.div_ceil(2);
    let a2o = teachers(Strategy::AllToOne, ls, lt, None);
    if a2o.len() != ls || a2o.iter().any(|&t| t != mid) {
        fail("all_to_one is not constant at ceil(Lt/2)");
    }

    for seed in [0, 1, 7, 12345, u64::MAX] {
        let a = teachers(Strategy::Random, ls, lt, Some(seed));
        if a != teachers(Strategy::Random, ls, lt, Some(seed)) {
            fail("random mapping not deterministic for a fixed seed");
        }
        let mut sorted = a.clone();
        sorted.sort_unstable();
        if sorted != fwd {
            fail("random is not a permutation of forward");
        }
    }

    if !select_layers(Strategy::None, ls, lt, None).unwrap().is_empty() {
        fail("none is not empty");
    }
    for strategy in Strategy::ALL {
        let m = select_layers(strategy, ls, lt, Some(3)).unwrap();
        if m.validate(ls, lt).is_err() {
            fail("mapping fails its own range check");
        }
        let json = serde_json::to_string(&m).unwrap();
        if serde_json::from_str::<LayerMapping>(&json).unwrap() != m {
            fail("mapping does not survive serialization");
        }
    }
}

/// All violations found; empty when every property holds.
pub fn violations() -> Vec<String> {
    let mut out = Vec::new();
    for lt in 1..=MAX_DEPTH {
        for ls in 1..=lt {
            check_pair(ls, lt, &mut out);
        }
        if select_layers(Strategy::Forward, lt + 1, lt, None).is_ok() {
            out.push(format!("Ls={} Lt={lt}: deeper student accepted", lt + 1));
        }
    }
    if select_layers(Strategy::Random, 2, 4, None).is_ok() {
        out.push("random without a seed accepted".into());
    }
    out
}
