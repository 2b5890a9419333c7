#![no_main]

use kdseg::scenario::{parse_plan, ClassOrdering, ClassSchedule};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(plan) = parse_plan(text) else { return };
    let names: Vec<String> = plan.iter().flatten().cloned().collect();
    if let Ok(s) = ClassSchedule::from_plan(&plan, &names, ClassOrdering::Given) {
        assert_eq!(parse_plan(&s.to_plan_text(&names)).unwrap(), plan);
    }
});
