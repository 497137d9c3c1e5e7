#![no_main]

use libfuzzer_sys::fuzz_target;
use uaseg::segnet::SegModel;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = SegModel::<f32>::from_checkpoint_bytes(data) {
        let again = SegModel::<f32>::from_checkpoint_bytes(&model.to_checkpoint_bytes()).unwrap();
        assert_eq!(model, again);
    }
});
