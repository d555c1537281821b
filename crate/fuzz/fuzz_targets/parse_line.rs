#![no_main]

use libfuzzer_sys::fuzz_target;
use u2u_imn::corpus::{parse_line, serialize_line, LineFormat};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ex) = parse_line(text, LineFormat::V2, 1) {
        let again = parse_line(&serialize_line(&ex), LineFormat::V2, 1).expect("serialized line parses");
        assert_eq!(again, ex);
    }
    let _ = parse_line(text, LineFormat::Tsv, 1);
});
