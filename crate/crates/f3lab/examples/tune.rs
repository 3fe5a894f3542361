// scratch tuning harness (deleted before release)
use f3lab::data::{generate, QType, Split, DEFAULT_MIX};
use f3lab::model::{ModelConfig, Trainer};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(10);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let n: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let decay: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let dim: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(32);

    let train_set = generate(n, 11, DEFAULT_MIX, Split::Train).unwrap();
    let eval_set = generate(400, 12, DEFAULT_MIX, Split::Eval).unwrap();
    let cfg = ModelConfig { dim, ..ModelConfig::default() };

    let t0 = Instant::now();
    let mut trainer = Trainer::new(&cfg, 42).unwrap();
    let mut cur_lr = lr;
    for e in 0..epochs {
        let loss = trainer.epoch(&train_set, cur_lr).unwrap();
        if (e + 1) % 5 == 0 || e == epochs - 1 || e < 3 {
            // per-qtype eval accuracy
            let mut per = [[0usize; 2]; 3];
            for s in &eval_set.samples {
                let idx = match s.qtype { QType::YesNo => 0, QType::Number => 1, QType::Other => 2 };
                let p = trainer.model.predict(&s.image, &s.question).unwrap();
                per[idx][1] += 1;
                if p == s.answer_label { per[idx][0] += 1; }
            }
            let acc = |i: usize| 100.0 * per[i][0] as f64 / per[i][1].max(1) as f64;
            println!(
                "epoch {e:>3} lr={cur_lr:.4} loss={loss:.4} eval: yn={:.1} num={:.1} col={:.1} all={:.1}",
                acc(0), acc(1), acc(2),
                100.0 * (per[0][0]+per[1][0]+per[2][0]) as f64 / eval_set.samples.len() as f64
            );
        }
        cur_lr *= decay;
    }
    println!("time={:.1}s", t0.elapsed().as_secs_f64());
}
