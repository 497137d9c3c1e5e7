#![no_main]

use libfuzzer_sys::fuzz_target;
use uaseg::cli::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::parse(text) {
        let echoed = cfg.to_text();
        let again = RunConfig::parse(&echoed).unwrap();
        assert_eq!(again.to_text(), echoed);
    }
});
