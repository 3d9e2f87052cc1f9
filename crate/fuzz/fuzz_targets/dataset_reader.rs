#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = flowdet::scenes::read_dataset_from(data) {
        // Anything that parses must write back and parse to the same thing.
        let mut out = Vec::new();
        flowdet::scenes::write_dataset_to(&ds, &mut out).unwrap();
        let again = flowdet::scenes::read_dataset_from(out.as_slice()).unwrap();
        assert_eq!(again, ds);
    }
});
