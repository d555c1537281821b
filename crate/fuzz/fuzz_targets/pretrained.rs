#![no_main]

use libfuzzer_sys::fuzz_target;
use u2u_imn::corpus::Vocabulary;
use u2u_imn::wordrep::parse_pretrained;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let vocab = Vocabulary::from_tokens(vec!["a".into(), "b".into(), "kw1".into()]).unwrap();
    if let Ok(t) = parse_pretrained(text, &vocab, None, 7) {
        assert_eq!(t.shape()[0], vocab.len());
        assert!(t.is_finite());
    }
});
