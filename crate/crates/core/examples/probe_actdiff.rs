use attriprior::datagen::{generate_synthetic_dataset, Split, SynthConfig};
use attriprior::losses::Method;
use attriprior::tape::Tape;
use attriprior::tensor::Tensor;
use attriprior::trainer::{train, TrainConfig};
use attriprior::transforms::shuffle_outside_mask;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3.11e-4);
    let lambda: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.115);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(6);
    let data = generate_synthetic_dataset(&SynthConfig::default()).unwrap();
    let mut cfg = TrainConfig::synthetic_defaults(Method::ActDiff);
    cfg.learning_rate = lr;
    cfg.lambda = lambda;
    cfg.max_epochs = epochs;
    let (net, hist) = train::<f32>(&cfg, &data).unwrap();
    for e in &hist.epochs {
        println!("epoch {:2} train {:.4} valid {:.4} auc {:.3}", e.epoch, e.train_loss, e.valid_loss, e.valid_auc);
    }
    // Probe: representation distance between masked/clean on test images.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let test: Vec<_> = data.iter().filter(|s| s.split == Some(Split::Test)).take(16).collect();
    let mut dist_pre = 0.0;
    let mut dist_emb = 0.0;
    let mut norm_pre = 0.0;
    for s in &test {
        let masked = shuffle_outside_mask(&s.image, &s.mask, &mut rng).unwrap();
        let mut tape = Tape::new();
        let xc = tape.leaf(s.image.cast::<f32>().reshaped(&[1, 1, 64, 64]).unwrap());
        let xm = tape.leaf(masked.cast::<f32>().reshaped(&[1, 1, 64, 64]).unwrap());
        let oc = net.forward_fresh(&mut tape, xc).unwrap();
        let om = net.forward_fresh(&mut tape, xm).unwrap();
        let pc: Vec<f64> = tape.value(oc.pre_activation).data().iter().map(|v| *v as f64).collect();
        let pm: Vec<f64> = tape.value(om.pre_activation).data().iter().map(|v| *v as f64).collect();
        let ec: Vec<f64> = tape.value(oc.embedding).data().iter().map(|v| *v as f64).collect();
        let em: Vec<f64> = tape.value(om.embedding).data().iter().map(|v| *v as f64).collect();
        dist_pre += pc.iter().zip(&pm).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        dist_emb += ec.iter().zip(&em).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        norm_pre += pc.iter().map(|a| a * a).sum::<f64>().sqrt();
    }
    let n = test.len() as f64;
    println!("mean ||pre_m - pre_c|| = {:.4} (pre norm {:.4}), mean ||emb_m - emb_c|| = {:.4}", dist_pre / n, norm_pre / n, dist_emb / n);
}
