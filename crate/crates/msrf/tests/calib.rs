use msrf::config::RunConfig;
use msrf::data::synth_dataset;
use msrf::trainer::train_loop;
use std::time::Instant;

#[test]
#[ignore]
fn calibrate_overfit() {
    let mut cfg = RunConfig::default();
    cfg.epochs = 300;
    cfg.batch_size = 4;
    cfg.lr = 1e-4;
    cfg.seed = 42;
    let samples = synth_dataset(20, 64, 7);
    let start = Instant::now();
    let mut last_print = Instant::now();
    let out = train_loop(&cfg, &samples, &samples, |epoch, loss, dsc, _| {
        if last_print.elapsed().as_secs() >= 5 || dsc >= 0.95 {
            println!(
                "t={:>6.1}s epoch {:>3} loss {:.4} dsc {:.4}",
                start.elapsed().as_secs_f64(),
                epoch,
                loss,
                dsc
            );
            last_print = Instant::now();
        }
        dsc < 0.95
    })
    .unwrap();
    println!(
        "done: best={:.4} at epoch {} after {:.1}s ({} epochs run)",
        out.best_val_dsc,
        out.best_epoch,
        start.elapsed().as_secs_f64(),
        out.epochs_run
    );
}
