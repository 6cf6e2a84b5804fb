use std::time::Instant;
use vitadv::sweep::{train_cell, BaseSetup};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(22);
    let snr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(16.0);
    let iters: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(50);
    let base = BaseSetup { max_iters: iters, ..BaseSetup::default() };
    let t0 = Instant::now();
    let cell = train_cell(&base, n, snr, 7).unwrap();
    let dt = t0.elapsed();
    println!(
        "n={n} snr={snr} iters_used={} converged={} robust={:.5} clean={:.5} wall={:.1}s per_iter={:.3}s",
        cell.report.iters_used,
        cell.report.converged,
        cell.report.final_train_loss_robust,
        cell.report.final_train_loss_clean,
        dt.as_secs_f64(),
        dt.as_secs_f64() / (cell.report.iters_used + 1) as f64
    );
}
