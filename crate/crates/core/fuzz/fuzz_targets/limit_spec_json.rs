#![no_main]

use ipw_quantile::limit_law::{eval_cf_intermediate, FixedLimitSampler, FixedSamplerOptions, LimitSpec};
use ipw_quantile::numerics::stream_rng;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    match LimitSpec::from_json(text) {
        Ok(LimitSpec::Fixed(spec)) if spec.k() <= 8 => {
            if let Ok(sampler) = FixedLimitSampler::new(&spec, &FixedSamplerOptions::default()) {
                let draw = sampler.draw(&mut stream_rng(0, 0));
                assert_eq!(draw.len(), spec.k());
            }
        }
        Ok(LimitSpec::Intermediate(spec)) => {
            if let Ok(cf) = eval_cf_intermediate(&spec, 1.0) {
                assert!(cf.norm() <= 1.0 + 1e-6);
            }
        }
        _ => {}
    }
});
