use ev4d_core::accum::DecayAccumulator;
use ev4d_core::events::{naive_accumulate, Event, EventStream, Thresholds};
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

    for decay in [0.93f64, 1.0] {
        let t0 = Instant::now();
        let idx = DecayAccumulator::build(&stream, &th, decay).unwrap();
        let build_time = t0.elapsed();

        let windows: Vec<(u64, u64)> = (0..100)
            .map(|_| {
                let a = rng.gen_range(0..t_max);
                let b = rng.gen_range(0..t_max);
                (a.min(b), a.max(b))
            })
            .collect();

        // warm
        let _ = idx.query_window(windows[0].0, windows[0].1).unwrap();

        let t0 = Instant::now();
        for &(a, b) in &windows {
            let img = idx.query_window(a, b).unwrap();
            std::hint::black_box(img);
        }
        let fast = t0.elapsed() / windows.len() as u32;

        let t0 = Instant::now();
        for &(a, b) in windows.iter().take(10) {
            let img = naive_accumulate(&stream, a, b, &th, decay).unwrap();
            std::hint::black_box(img);
        }
        let naive = t0.elapsed() / 10;

        let mut max_err = 0.0f64;
        for &(a, b) in windows.iter().take(10) {
            let f = idx.query_window(a, b).unwrap();
            let nv = naive_accumulate(&stream, a, b, &th, decay).unwrap();
            for (x, y) in f.values().iter().zip(nv.values()) {
                max_err = max_err.max((x - y).abs() / (1.0 + y.abs()));
            }
        }

        println!(
            "decay={decay}: build {:?}, fast {:?}/query, naive {:?}/query, speedup {:.0}x, max_rel_err {:.2e}, mem {} MB",
            build_time,
            fast,
            naive,
            naive.as_secs_f64() / fast.as_secs_f64(),
            max_err,
            idx.stats().approx_memory_bytes / (1 << 20),
        );
    }
}
