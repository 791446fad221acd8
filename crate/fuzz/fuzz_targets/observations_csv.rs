#![no_main]

use compop::channel::{read_observations_csv, write_observations_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(obs) = read_observations_csv(data) else {
        return;
    };
    let mut buf = Vec::new();
    write_observations_csv(&mut buf, &obs).unwrap();
    let back = read_observations_csv(buf.as_slice()).unwrap();
    assert_eq!(back.len(), obs.len());
    for (a, b) in obs.iter().zip(&back) {
        assert_eq!(a.sfcw, b.sfcw);
    }
});
