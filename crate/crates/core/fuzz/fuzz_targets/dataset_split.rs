#![no_main]

use libfuzzer_sys::fuzz_target;
use uaseg::data::{decode_split, encode_split};

fuzz_target!(|data: &[u8]| {
    if let Ok(set) = decode_split(data) {
        assert_eq!(encode_split(&set).unwrap(), data);
    }
});
