#![no_main]

use ipw_quantile::cli_io::{ingest_csv_reader, write_observations, Schema};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&first, rest)) = data.split_first() else {
        return;
    };
    let schema = match first % 3 {
        0 => Schema::Auto,
        1 => Schema::Nsw,
        _ => Schema::Generic,
    };
    // Anything accepted must survive a write/read round trip unchanged.
    if let Ok(obs) = ingest_csv_reader(rest, schema) {
        if obs.design().is_none() {
            let mut buf = Vec::new();
            write_observations(&obs, &mut buf).unwrap();
            let back = ingest_csv_reader(buf.as_slice(), Schema::Generic).unwrap();
            assert_eq!(back, obs);
        }
    }
});
