#![no_main]

use libfuzzer_sys::fuzz_target;
use reed::io::{transfer_from_str, transfer_to_string};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(body) = transfer_from_str(text) {
        let again = transfer_to_string(&body).expect("serialize accepted transfer");
        assert_eq!(transfer_from_str(&again).expect("reparse transfer").transfer, body.transfer);
    }
});
