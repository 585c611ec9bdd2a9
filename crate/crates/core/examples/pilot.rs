use attriprior::datagen::{generate_synthetic_dataset, SynthConfig};
use attriprior::losses::Method;
use attriprior::trainer::{train, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let method: Method = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(Method::Baseline);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(10);
    let data = generate_synthetic_dataset(&SynthConfig::default()).unwrap();
    let mut cfg = TrainConfig::synthetic_defaults(method);
    cfg.max_epochs = epochs;
    cfg.seed = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0);
    if let Some(lr) = args.get(3) {
        cfg.learning_rate = lr.parse().unwrap();
    }
    let t0 = Instant::now();
    let (_net, hist) = train::<f32>(&cfg, &data).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("method={method} epochs_run={} time={:.1}s ({:.2}s/epoch)", hist.stopped_epoch, dt, dt / hist.stopped_epoch as f64);
    for e in &hist.epochs {
        println!("epoch {:3}  train {:.4}  valid {:.4}  auc {:.3}", e.epoch, e.train_loss, e.valid_loss, e.valid_auc);
    }
    println!("best epoch {} auc {:.3}", hist.best_epoch, hist.best_valid_auc);
}
