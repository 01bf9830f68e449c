//! Fuzzes the run-configuration parser: must never panic, and any accepted
//! config must survive a canonical-JSON round trip.

#![no_main]

use libfuzzer_sys::fuzz_target;
use rbsde::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_str(text) {
        let canonical = cfg.to_canonical_json();
        let again = RunConfig::from_str(&canonical).expect("canonical form re-parses");
        assert_eq!(cfg, again);
    }
});
