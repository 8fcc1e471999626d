#![no_main]

use libfuzzer_sys::fuzz_target;

// The experiment config is the one untrusted input the binary consumes.
// Parsing plus semantic validation must reject garbage with an error, not
// a panic.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = slowfast_cli::parse_config(text);
    }
});
