#![no_main]

use libfuzzer_sys::fuzz_target;
use uaseg::trainer::TrainerState;

fuzz_target!(|data: &[u8]| {
    if let Ok(state) = TrainerState::decode(data) {
        let bytes = state.encode().unwrap();
        assert_eq!(TrainerState::decode(&bytes).unwrap(), state);
    }
});
