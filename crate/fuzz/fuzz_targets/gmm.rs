#![no_main]

use libfuzzer_sys::fuzz_target;
use reed::credibility::{gmm_posterior, Component, Gmm1D};
use reed::io::versioned_from_str;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(gmm) = versioned_from_str::<Gmm1D>(text) else {
        return;
    };
    if gmm.validate().is_ok() {
        for v in [-1.0, 0.0, 0.5, 1.0, 2.0] {
            let p = gmm_posterior(&gmm, v, Component::LowMean);
            assert!(p.is_nan() || (0.0..=1.0).contains(&p));
        }
    }
});
