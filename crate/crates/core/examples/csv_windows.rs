//! Reads a small `date,<channel>` CSV and slices it into forecasting tasks.

use rftcast::data::{read_dataset, window_tasks};
use rftcast::textio::render_prompt;

fn main() {
    let mut csv = String::from("date,HUFL,OT\n");
    for h in 0..30 {
        let v = 6.0 + 2.0 * (h as f64 * std::f64::consts::PI / 12.0).sin();
        csv.push_str(&format!(
            "2016-07-{:02} {:02}:00:00,{v:.3},{:.1}\n",
            1 + h / 24,
            h % 24,
            30.0 - h as f64 * 0.1
        ));
    }
    let ds = read_dataset(csv.as_bytes(), "ETTh1", "hourly").unwrap();
    println!(
        "{} rows, channels {:?}, gaps {}",
        ds.dates.len(),
        ds.channels.iter().map(|c| &c.0).collect::<Vec<_>>(),
        ds.gaps
    );
    let tasks = window_tasks(&ds, "HUFL", 12, 6, 6).unwrap();
    println!("{} windows of 12 -> 6\n", tasks.len());
    println!("{}", render_prompt(&tasks[0]));
}
