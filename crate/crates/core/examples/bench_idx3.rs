use ev4d_core::accum::DecayAccumulator;
use ev4d_core::events::{Event, EventStream, Thresholds};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let n = 1_000_000usize;
    let (w, h) = (64u16, 64u16);
    let t_max = 10_000_000u64;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ts: Vec<u64> = (0..n).map(|_| rng.gen_range(0..=t_max)).collect();
    ts.sort_unstable();
    let events: Vec<Event> = ts
        .into_iter()
        .map(|t| Event::new(t, rng.gen_range(0..w), rng.gen_range(0..h), if rng.gen_bool(0.5) { 1 } else { -1 }))
        .collect();
    let stream = EventStream::new(w, h, events);
    let th = Thresholds::symmetric(0.25).unwrap();
    let idx = DecayAccumulator::build(&stream, &th, 0.93).unwrap();

    // empty windows at random positions: copies+finalize, no replay work
    let positions: Vec<u64> = (0..2000).map(|_| rng.gen_range(0..t_max)).collect();
    let _ = idx.query_window(0, 0).unwrap();
    let t0 = Instant::now();
    let mut acc = 0.0;
    for &p in &positions {
        acc += idx.query_window(p, p).unwrap().values()[0];
    }
    println!("empty-window (copies+finalize only): {:?}  (sink {acc})", t0.elapsed() / 2000);

    // same-position pairs with real spans
    let windows: Vec<(u64, u64)> = (0..2000)
        .map(|_| {
            let a = rng.gen_range(0..t_max);
            let b = rng.gen_range(0..t_max);
            (a.min(b), a.max(b))
        })
        .collect();
    let t0 = Instant::now();
    for &(a, b) in &windows {
        acc += idx.query_window(a, b).unwrap().values()[0];
    }
    println!("full query: {:?} (sink {acc})", t0.elapsed() / 2000);
}
