use hyperform_core::fusion::{PoolMethod, Variant};
use hyperform_core::skeleton::synth_dataset;
use hyperform_core::train::{evaluate, train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args[1].parse().unwrap();
    let epochs: usize = args[2].parse().unwrap();
    let per_class: usize = args.get(3).map(|v| v.parse().unwrap()).unwrap_or(75);
    let d: usize = args.get(4).map(|v| v.parse().unwrap()).unwrap_or(4);
    let heads: usize = args.get(5).map(|v| v.parse().unwrap()).unwrap_or(2);
    let tr = synth_dataset(4, per_class, 10, 40, 0).unwrap();
    let te = synth_dataset(4, 12, 10, 40, 999).unwrap();
    let cfg = TrainConfig {
        lr0: lr, momentum: 0.9, epochs, batch_size: 8,
        lr_drop_epochs: vec![epochs * 2 / 3, epochs * 5 / 6],
        joints: 10, max_order: 3, d, d_prime: d, depth: 1, heads, d_k: 16,
        block_len: 10, stride: 5, dropout: 0.0,
        variant: Variant::TwoBranch, pool: PoolMethod::Rank, seed: 0,
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let out = train(&tr, &cfg).unwrap();
    let m = evaluate(&out.model, &te).unwrap();
    print!("lr {lr} e{epochs} n{per_class} d{d} h{heads}: [");
    for h in &out.history {
        print!("{:.0}/{:.2} ", h.train_loss * 100.0, h.train_top1);
    }
    println!("] test {:.2} ({:?})", m.top1, t0.elapsed());
}
