#![no_main]

use libfuzzer_sys::fuzz_target;
use mfimpute::io::{parse_panel_csv, write_panel_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(file) = parse_panel_csv(text) else {
        return;
    };
    // anything accepted must write back out and parse to the same panel
    let mut out = Vec::new();
    write_panel_csv(&mut out, &file.panel, &file.row_labels, "label").unwrap();
    let again = parse_panel_csv(std::str::from_utf8(&out).unwrap()).unwrap();
    assert_eq!(again.panel.mask(), file.panel.mask());
});
