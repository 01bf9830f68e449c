//! Fuzzes the manifest reader: must never panic, and any accepted manifest
//! must survive a serialization round trip.

#![no_main]

use libfuzzer_sys::fuzz_target;
use rbsde::report::Manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = Manifest::from_str(text) {
        let json = m.to_json();
        Manifest::from_str(&json).expect("serialized manifest re-parses");
    }
});
