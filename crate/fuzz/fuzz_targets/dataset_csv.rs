#![no_main]

use libfuzzer_sys::fuzz_target;
use reed::data::{read_csv, write_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = read_csv(data, None) {
        let mut out = Vec::new();
        write_csv(&ds, &mut out).expect("write accepted dataset");
        let back = read_csv(out.as_slice(), Some(ds.classes)).expect("reread written dataset");
        assert_eq!(back.y_clean, ds.y_clean);
        assert_eq!(back.y_noisy, ds.y_noisy);
        assert_eq!(back.x.shape(), ds.x.shape());
    }
});
