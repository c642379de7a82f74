use hyperform_core::fusion::{Model, PoolMethod, Variant};
use hyperform_core::rng::Rng;
use hyperform_core::skeleton::synth_dataset;
use hyperform_core::tensor::tape::{softmax_into, Tape};
use hyperform_core::train::TrainConfig;

fn logreg(train: &[(Vec<f64>, usize)], eval: &[(Vec<f64>, usize)], k: usize) -> f64 {
    let dim = train[0].0.len();
    let mut w = vec![0.0f64; k * (dim + 1)];
    for _ in 0..400 {
        let mut grad = vec![0.0f64; k * (dim + 1)];
        for (x, y) in train {
            let mut logits = vec![0.0f64; k];
            for (c, l) in logits.iter_mut().enumerate() {
                let row = &w[c * (dim + 1)..(c + 1) * (dim + 1)];
                *l = row[dim] + row[..dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
            let mut probs = vec![0.0f64; k];
            softmax_into(&logits, &mut probs);
            for c in 0..k {
                let err = probs[c] - if c == *y { 1.0 } else { 0.0 };
                let row = &mut grad[c * (dim + 1)..(c + 1) * (dim + 1)];
                for (g, &xv) in row[..dim].iter_mut().zip(x) { *g += err * xv; }
                row[dim] += err;
            }
        }
        let scale = 0.5 / train.len() as f64;
        for (wv, gv) in w.iter_mut().zip(&grad) { *wv -= scale * gv + 1e-4 * *wv; }
    }
    let mut hits = 0;
    for (x, y) in eval {
        let mut best = f64::NEG_INFINITY; let mut arg = 0;
        for c in 0..k {
            let row = &w[c * (dim + 1)..(c + 1) * (dim + 1)];
            let s = row[dim] + row[..dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            if s > best { best = s; arg = c; }
        }
        if arg == *y { hits += 1; }
    }
    hits as f64 / eval.len() as f64
}

fn main() {
    let data = synth_dataset(4, 40, 10, 40, 0).unwrap();
    let cfg = TrainConfig {
        joints: 10, max_order: 3, d: 4, d_prime: 4, depth: 1, heads: 2, d_k: 16,
        block_len: 10, stride: 5, dropout: 0.0,
        variant: Variant::Baseline, pool: PoolMethod::Avg, seed: 0,
        ..TrainConfig::default()
    };
    let mut rng = Rng::new(0).derive(0x1217);
    let model = Model::init(cfg.model_config(40, 4), &mut rng).unwrap();
    // signal edges: (1,2,3), (4,5,6), (7,8,9) within the order-3 span
    let mut sig_feats = Vec::new();
    let mut noise_feats = Vec::new();
    for seq in &data {
        let mut tape = Tape::new();
        let m = model.encode(&mut tape, seq, None).unwrap();
        let (off3, _) = (m.order_offsets[2], 0);
        let idx3 = &m.edge_index[2];
        let sig_edges = [[1usize,2,3],[4,5,6],[7,8,9]];
        let noise_edges = [[1usize,2,4],[3,5,7],[2,6,9]];
        let grab = |edges: &[[usize;3]]| -> Vec<f64> {
            let mut v = Vec::new();
            for e in edges {
                let pos = idx3.position(&e.to_vec()).unwrap();
                for c in 0..4 {
                    for t in 0..7 {
                        v.push(m.data.get(&[c, off3 + pos, t]));
                    }
                }
            }
            v
        };
        sig_feats.push((grab(&sig_edges), seq.label));
        noise_feats.push((grab(&noise_edges), seq.label));
    }
    let split = |items: &[(Vec<f64>, usize)]| {
        let mut tr = Vec::new(); let mut ev = Vec::new();
        for (i, it) in items.iter().enumerate() {
            if i % 4 == 3 { ev.push(it.clone()) } else { tr.push(it.clone()) }
        }
        (tr, ev)
    };
    let (tr, ev) = split(&sig_feats);
    println!("logreg on SIGNAL edge features of M: {:.3}", logreg(&tr, &ev, 4));
    let (tr, ev) = split(&noise_feats);
    println!("logreg on NOISE edge features of M:  {:.3}", logreg(&tr, &ev, 4));
}
