#![no_main]

use enkbf_core::signal::SignalPath;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(path) = SignalPath::read_csv(data) {
        let bytes = path.to_table().to_bytes().expect("in-memory write");
        let again = SignalPath::read_csv(bytes.as_slice()).expect("written CSV must parse");
        assert_eq!(again.times.len(), path.times.len());
    }
});
