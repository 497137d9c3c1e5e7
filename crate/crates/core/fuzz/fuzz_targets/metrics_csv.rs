#![no_main]

use libfuzzer_sys::fuzz_target;
use uaseg::metrics::{read_metrics_csv, summarize};

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_metrics_csv(data) {
        let _ = summarize(&rows);
    }
});
