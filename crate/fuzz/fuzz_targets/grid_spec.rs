#![no_main]

use libfuzzer_sys::fuzz_target;
use mfimpute::grid::{build_time_grid, GridSpec};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(spec) = text.parse::<GridSpec>() else {
        return;
    };
    assert_eq!(spec.to_string().parse::<GridSpec>().unwrap(), spec);
    // keep the grid small enough to build quickly
    let small = match &spec {
        GridSpec::Fixed { m, low_count } => m.saturating_mul(*low_count) <= 1 << 16,
        GridSpec::WeeklyMondays { start, end } => (*end - *start).num_days() <= 40_000,
    };
    if small {
        let _ = build_time_grid(&spec);
    }
});
