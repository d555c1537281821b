#![no_main]

use libfuzzer_sys::fuzz_target;
use u2u_imn::params::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let again = Checkpoint::decode(&ck.encode()).expect("encoded checkpoint decodes");
        assert_eq!(again.params.len(), ck.params.len());
        assert_eq!(again.step, ck.step);
    }
});
