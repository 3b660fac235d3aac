//! Parses a cron expression and lists its next fire times.
//!
//! cargo run --example cron_schedule -- "*/15 9-17 * * mon-fri" 10

use chrono::{TimeZone, Utc};
use cwb::scheduler::parse_cron;

fn main() {
    let mut args = std::env::args().skip(1);
    let expr = args.next().unwrap_or_else(|| "0 */6 * * *".to_owned());
    let count: usize = args.next().map_or(8, |n| n.parse().expect("count"));

    let cron = match parse_cron(&expr) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{expr:?}: {e}");
            std::process::exit(1);
        }
    };
    let mut t = Utc.with_ymd_and_hms(2024, 2, 28, 22, 7, 30).unwrap();
    println!("{} after {t}:", cron.as_str());
    for _ in 0..count {
        t = cron.next_fire(t);
        println!("  {}", t.format("%a %Y-%m-%d %H:%M"));
    }

    for bad in ["61 * * * *", "* * 30 2 *", "*/0 * * * *"] {
        match parse_cron(bad) {
            Ok(_) => println!("{bad:?} accepted"),
            Err(e) => println!("{bad:?} rejected: {e}"),
        }
    }
}
