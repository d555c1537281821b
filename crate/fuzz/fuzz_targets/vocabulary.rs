#![no_main]

use libfuzzer_sys::fuzz_target;
use u2u_imn::corpus::Vocabulary;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(v) = Vocabulary::parse(text) {
        for t in v.tokens() {
            assert_eq!(v.token(v.token_id(t)), Some(t.as_str()));
        }
    }
});
