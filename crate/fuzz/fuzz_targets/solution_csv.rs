//! Fuzzes the solution CSV reader: must never panic on arbitrary input.

#![no_main]

use libfuzzer_sys::fuzz_target;
use rbsde::report::parse_solution_csv;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_solution_csv(text);
});
