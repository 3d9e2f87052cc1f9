#![no_main]
use libfuzzer_sys::fuzz_target;

use flowdet::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse_str(text) {
        assert_eq!(RunConfig::parse_str(&cfg.to_text()).unwrap(), cfg);
    }
});
