#![no_main]

use libfuzzer_sys::fuzz_target;
use u2u_imn::metrics::RankedRun;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(run) = RankedRun::parse(text) {
        let _ = run.report();
        let _ = RankedRun::parse(&run.to_text()).expect("written run parses");
    }
});
