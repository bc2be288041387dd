#![no_main]

use libfuzzer_sys::fuzz_target;
use reed::io::{checkpoint_from_str, checkpoint_to_string};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(ckpt) = checkpoint_from_str(text) {
        // Anything accepted must survive a round trip unchanged.
        let again = checkpoint_to_string(&ckpt).expect("serialize accepted checkpoint");
        let back = checkpoint_from_str(&again).expect("reparse serialized checkpoint");
        assert_eq!(back, ckpt);
    }
});
