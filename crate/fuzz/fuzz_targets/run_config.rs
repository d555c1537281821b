#![no_main]

use libfuzzer_sys::fuzz_target;
use u2u_imn::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text) {
        assert_eq!(RunConfig::parse(&cfg.to_text()).expect("canonical text parses"), cfg);
    }
});
