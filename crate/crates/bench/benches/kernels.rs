use criterion::{black_box, criterion_group, criterion_main, Criterion};

use concur_core::loss::{concur_loss, KeyQueue, LossConfig, PositiveBatch};
use concur_core::model::{encode, project, EncoderConfig, ModelState};
use concur_core::{Graph, Stream, Tensor};

fn wave(shape: &[usize], k: f32) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| (i as f32 * k).sin() * 0.5)
}

fn conv3d(c: &mut Criterion) {
    let x = wave(&[16, 3, 8, 16, 16], 0.37);
    let w = wave(&[8, 3, 3, 3, 3], 0.11);
    c.bench_function("conv3d_fwd_16x3x8x16x16_k8", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            black_box(g.conv3d(xv, wv, [1, 2, 2], [1, 1, 1]).unwrap());
        })
    });
    c.bench_function("conv3d_fwd_bwd_16x3x8x16x16_k8", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let wv = g.param(w.clone());
            let y = g.conv3d(xv, wv, [1, 2, 2], [1, 1, 1]).unwrap();
            let l = g.sum(y);
            g.backward(l).unwrap();
            black_box(g.grad(wv).unwrap().len());
        })
    });
}

fn encoder(c: &mut Criterion) {
    let cfg = EncoderConfig::desk();
    let state = ModelState::<f32>::init(&cfg, Stream::new(0)).unwrap();
    let x = wave(&[16, 3, 8, 16, 16], 0.29);
    c.bench_function("desk_encoder_fwd_bwd_batch16", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let p = state.online.bind(&mut g, true);
            let xv = g.constant(x.clone());
            let f = encode(&mut g, &p, &cfg, xv).unwrap();
            let z = project(&mut g, &p, f).unwrap();
            let l = g.sum(z);
            g.backward(l).unwrap();
            black_box(g.len());
        })
    });
}

fn loss(c: &mut Criterion) {
    let cfg = LossConfig::desk();
    let state = ModelState::<f32>::init(&EncoderConfig::desk(), Stream::new(0)).unwrap();
    let dim = EncoderConfig::desk().embed_dim;
    let rows = 16;
    let unit = |k: f32, n: usize| {
        let mut t = wave(&[n, dim], k);
        for r in t.data_mut().chunks_mut(dim) {
            let norm = r.iter().map(|v| v * v).sum::<f32>().sqrt();
            r.iter_mut().for_each(|v| *v /= norm);
        }
        t
    };
    let mut queue = KeyQueue::new(cfg.queue_capacity, dim);
    queue.enqueue(&unit(0.71, cfg.queue_capacity)).unwrap();
    let q = unit(0.13, rows);
    let keys = unit(0.53, rows);
    let phis: Vec<usize> = (0..rows).map(|i| 1 + 5 * i % 40).collect();
    c.bench_function("concur_loss_fwd_bwd_16x512", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let cs = state.cs_head.bind(&mut g, true);
            let qv = g.param(q.clone());
            let batch = PositiveBatch {
                queries: qv,
                keys: &keys,
                phis: &phis,
                clip_len: 8,
            };
            let snapshot = queue.snapshot::<f32>();
            let (l, _) = concur_loss(&mut g, &batch, snapshot.as_ref(), &cs, &cfg).unwrap();
            g.backward(l).unwrap();
            black_box(g.grad(qv).unwrap().len());
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = conv3d, encoder, loss
}
criterion_main!(benches);
