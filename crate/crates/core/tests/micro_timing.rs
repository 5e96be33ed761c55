//! Component-level timings for kernel tuning. Run with
//! `cargo test -p mtcx-core --test micro_timing -- --ignored --nocapture`

use mtcx_core::model::{build_model, encode_image, encode_text, ModelConfig};
use mtcx_core::rng::Rng;
use mtcx_core::tensor::Graph;
use std::time::Instant;

fn rv(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.range(-1.0, 1.0)).collect()
}

#[test]
#[ignore]
fn component_times() {
    let mut rng = Rng::new(1);

    // raw matmul throughput on the transformer's linear shape
    {
        let (m, k, n) = (2048usize, 64usize, 64usize);
        let a = rv(&mut rng, m * k);
        let b = rv(&mut rng, k * n);
        let t = Instant::now();
        let reps = 50;
        let mut sink = 0.0;
        for _ in 0..reps {
            let mut g = Graph::new();
            let ta = g.constant(a.clone(), &[m, k]);
            let tb = g.constant(b.clone(), &[k, n]);
            let c = g.matmul(ta, tb).unwrap();
            sink += g.data(c)[0];
        }
        let el = t.elapsed().as_secs_f64() / reps as f64;
        let gflops = 2.0 * (m * k * n) as f64 / el / 1e9;
        println!("matmul {m}x{k}x{n}: {:.2} ms ({gflops:.1} GF/s) [{sink:.1}]", el * 1e3);
    }

    // matmul with backward
    {
        let (m, k, n) = (2048usize, 64usize, 64usize);
        let a = rv(&mut rng, m * k);
        let b = rv(&mut rng, k * n);
        let t = Instant::now();
        let reps = 30;
        for _ in 0..reps {
            let mut g = Graph::new();
            let ta = g.leaf(a.clone(), &[m, k], true);
            let tb = g.leaf(b.clone(), &[k, n], true);
            let c = g.matmul(ta, tb).unwrap();
            let l = g.sum_all(c);
            g.backward(l).unwrap();
        }
        let el = t.elapsed().as_secs_f64() / reps as f64;
        println!("matmul fwd+bwd: {:.2} ms", el * 1e3);
    }

    // full image encoder forward (batch 32)
    let cfg = ModelConfig::default();
    let bundle = build_model(&cfg, 1).unwrap();
    let images = rv(&mut rng, 32 * 3 * 64 * 64)
        .iter()
        .map(|v| v.abs())
        .collect::<Vec<_>>();
    {
        let t = Instant::now();
        let reps = 5;
        for _ in 0..reps {
            let mut g = Graph::new();
            let m = bundle.mount(&mut g, false);
            let imgs = g.constant(images.clone(), &[32, 3, 64, 64]);
            encode_image(&mut g, &m, &cfg, imgs).unwrap();
        }
        println!("encode_image fwd (B=32): {:.0} ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);
    }
    {
        let t = Instant::now();
        let reps = 5;
        for _ in 0..reps {
            let mut g = Graph::new();
            let m = bundle.mount(&mut g, true);
            let imgs = g.constant(images.clone(), &[32, 3, 64, 64]);
            let (emb, _) = encode_image(&mut g, &m, &cfg, imgs).unwrap();
            let l = g.sum_all(emb);
            g.backward(l).unwrap();
        }
        println!("encode_image fwd+bwd (B=32): {:.0} ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);
    }
    // text encoder
    {
        let toks: Vec<Vec<u32>> = (0..32)
            .map(|i| {
                let mut t = vec![1u32];
                t.extend([(4 + i % 20) as u32, 5, 11]);
                t.push(2);
                t.resize(16, 0);
                t
            })
            .collect();
        let t = Instant::now();
        let reps = 5;
        for _ in 0..reps {
            let mut g = Graph::new();
            let m = bundle.mount(&mut g, true);
            let emb = encode_text(&mut g, &m, &cfg, &toks).unwrap();
            let l = g.sum_all(emb);
            g.backward(l).unwrap();
        }
        println!("encode_text fwd+bwd (B=32): {:.0} ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);
    }
    // mount cost alone
    {
        let t = Instant::now();
        let reps = 20;
        for _ in 0..reps {
            let mut g = Graph::new();
            let _m = bundle.mount(&mut g, true);
        }
        println!("mount: {:.1} ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);
    }
    // softmax over attention-shaped tensor
    {
        let x = rv(&mut rng, 128 * 64 * 64);
        let t = Instant::now();
        let reps = 20;
        for _ in 0..reps {
            let mut g = Graph::new();
            let tx = g.leaf(x.clone(), &[128, 64, 64], true);
            let s = g.softmax(tx, 2).unwrap();
            let l = g.sum_all(s);
            g.backward(l).unwrap();
        }
        println!("softmax 128x64x64 fwd+bwd: {:.1} ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);
    }
    // cross-entropy spatial at full output resolution
    {
        let x = rv(&mut rng, 32 * 9 * 64 * 64);
        let targets: Vec<u32> = (0..32 * 64 * 64).map(|i| (i % 9) as u32).collect();
        let t = Instant::now();
        let reps = 10;
        for _ in 0..reps {
            let mut g = Graph::new();
            let tx = g.leaf(x.clone(), &[32, 9, 64, 64], true);
            let (l, _) = g.cross_entropy_spatial(tx, &targets, 255).unwrap();
            g.backward(l).unwrap();
        }
        println!("ce_spatial 32x9x64x64 fwd+bwd: {:.1} ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);
    }
    // upsample 8->64 with backward
    {
        let x = rv(&mut rng, 32 * 13 * 8 * 8);
        let t = Instant::now();
        let reps = 10;
        for _ in 0..reps {
            let mut g = Graph::new();
            let tx = g.leaf(x.clone(), &[32, 13, 8, 8], true);
            let u = g.nearest_upsample(tx, 64, 64).unwrap();
            let l = g.sum_all(u);
            g.backward(l).unwrap();
        }
        println!("upsample 8->64 fwd+bwd: {:.1} ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);
    }
}

#[test]
#[ignore]
fn attention_shapes() {
    let mut rng = Rng::new(2);
    // bmm at attention shapes
    for (gn, m, k, n, label) in [
        (128usize, 64usize, 16usize, 64usize, "scores"),
        (128, 64, 64, 16, "apply"),
    ] {
        let a = rv(&mut rng, gn * m * k);
        let b = rv(&mut rng, gn * k * n);
        let t = Instant::now();
        let reps = 20;
        for _ in 0..reps {
            let mut g = Graph::new();
            let ta = g.leaf(a.clone(), &[gn, m, k], true);
            let tb = g.leaf(b.clone(), &[gn, k, n], true);
            let c = g.bmm(ta, tb).unwrap();
            let l = g.sum_all(c);
            g.backward(l).unwrap();
        }
        println!(
            "bmm {label} {gn}x{m}x{k}x{n} fwd+bwd: {:.2} ms",
            t.elapsed().as_secs_f64() * 1e3 / reps as f64
        );
    }
    // permute at attention shape
    {
        let x = rv(&mut rng, 32 * 64 * 4 * 16);
        let t = Instant::now();
        let reps = 50;
        for _ in 0..reps {
            let mut g = Graph::new();
            let tx = g.leaf(x.clone(), &[32, 64, 4, 16], true);
            let p = g.permute(tx, &[0, 2, 1, 3]).unwrap();
            let l = g.sum_all(p);
            g.backward(l).unwrap();
        }
        println!(
            "permute [32,64,4,16] fwd+bwd: {:.2} ms",
            t.elapsed().as_secs_f64() * 1e3 / reps as f64
        );
    }
    // layer_norm at token shape
    {
        let x = rv(&mut rng, 32 * 64 * 64);
        let gam = rv(&mut rng, 64);
        let bet = rv(&mut rng, 64);
        let t = Instant::now();
        let reps = 50;
        for _ in 0..reps {
            let mut g = Graph::new();
            let tx = g.leaf(x.clone(), &[32, 64, 64], true);
            let tg = g.leaf(gam.clone(), &[64], true);
            let tb = g.leaf(bet.clone(), &[64], true);
            let y = g.layer_norm(tx, tg, tb, 1e-5).unwrap();
            let l = g.sum_all(y);
            g.backward(l).unwrap();
        }
        println!(
            "layer_norm [32,64,64] fwd+bwd: {:.2} ms",
            t.elapsed().as_secs_f64() * 1e3 / reps as f64
        );
    }
    // gelu at MLP shape
    {
        let x = rv(&mut rng, 2048 * 128);
        let t = Instant::now();
        let reps = 30;
        for _ in 0..reps {
            let mut g = Graph::new();
            let tx = g.leaf(x.clone(), &[2048, 128], true);
            let y = g.gelu(tx);
            let l = g.sum_all(y);
            g.backward(l).unwrap();
        }
        println!(
            "gelu [2048,128] fwd+bwd: {:.2} ms",
            t.elapsed().as_secs_f64() * 1e3 / reps as f64
        );
    }
    // patch-embed conv fwd+bwd (kernel grad only)
    {
        let x = rv(&mut rng, 32 * 3 * 64 * 64);
        let ker = rv(&mut rng, 64 * 3 * 8 * 8);
        let bias = rv(&mut rng, 64);
        let t = Instant::now();
        let reps = 10;
        for _ in 0..reps {
            let mut g = Graph::new();
            let tx = g.constant(x.clone(), &[32, 3, 64, 64]);
            let tk = g.leaf(ker.clone(), &[64, 3, 8, 8], true);
            let tb = g.leaf(bias.clone(), &[64], true);
            let y = g.conv2d(tx, tk, Some(tb), 8, 0).unwrap();
            let l = g.sum_all(y);
            g.backward(l).unwrap();
        }
        println!(
            "patch conv fwd+bwd: {:.2} ms",
            t.elapsed().as_secs_f64() * 1e3 / reps as f64
        );
    }
    // linear+bias add at token shape (matmul + broadcast add)
    {
        let x = rv(&mut rng, 2048 * 64);
        let w = rv(&mut rng, 64 * 64);
        let b = rv(&mut rng, 64);
        let t = Instant::now();
        let reps = 30;
        for _ in 0..reps {
            let mut g = Graph::new();
            let tx = g.leaf(x.clone(), &[2048, 64], true);
            let tw = g.leaf(w.clone(), &[64, 64], true);
            let tb = g.leaf(b.clone(), &[64], true);
            let y = g.matmul(tx, tw).unwrap();
            let z = g.add(y, tb).unwrap();
            let l = g.sum_all(z);
            g.backward(l).unwrap();
        }
        println!(
            "linear 2048x64x64 + bias fwd+bwd: {:.2} ms",
            t.elapsed().as_secs_f64() * 1e3 / reps as f64
        );
    }
}
