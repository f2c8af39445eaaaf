#![no_main]

use libfuzzer_sys::fuzz_target;
use mfimpute::simulation::DgpSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(spec) = DgpSpec::from_json(text) {
        let back = DgpSpec::from_json(&spec.to_json().unwrap()).unwrap();
        assert_eq!(back, spec);
    }
});
