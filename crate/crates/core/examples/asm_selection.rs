//! Which sleep level the RU may enter for a given deferral threshold, and
//! what it costs in power and wake-up time.

use sleepctl::radio::SymbolClock;
use sleepctl::ru::{AsmId, AsmTable};

fn main() {
    let clock = SymbolClock::new(1);
    let table = AsmTable::reference(clock);
    println!("symbol period {:.3} us", clock.symbol_us());
    for id in AsmId::ALL {
        let l = table.level(id);
        println!(
            "{:>9}: power {:.3}, switch {:>7.1} us ({} symbols)",
            id.to_string(),
            l.norm_power,
            l.switch_delay_us,
            table.delay_symbols(id)
        );
    }
    for d in [20.0, 100.0, 1000.0, 3000.0, 6000.0, 64_000.0] {
        println!("d = {d:>7} us -> {}", table.select(d));
    }
}
