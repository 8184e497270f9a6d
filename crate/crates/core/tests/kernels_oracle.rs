use forge_core::kernels::{
    add_media_embeddings, add_temporal_embeddings, attention_weights, cross_attention, flatten_frames,
    gated_cross_attention, lora_forward, perceiver_resample, permute_frames, AttentionWeights, LoraAdapter,
    PositionKind, PositionTable,
};
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type M = Vec<Vec<f64>>;

fn rand_m(rng: &mut ChaCha8Rng, r: usize, c: usize) -> M {
    (0..r).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn to_nd(m: &M) -> Array2<f64> {
    Array2::from_shape_fn((m.len(), m[0].len()), |(i, j)| m[i][j])
}

fn matmul(a: &M, b: &M) -> M {
    let mut out = vec![vec![0.0; b[0].len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            let mut s = 0.0;
            for t in 0..b.len() {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn transpose(a: &M) -> M {
    (0..a[0].len()).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

/// Straight-line single-head attention with a naive softmax.
fn naive_attention(q_in: &M, c_in: &M, wq: &M, wk: &M, wv: &M, wo: &M) -> M {
    let q = matmul(q_in, wq);
    let k = matmul(c_in, wk);
    let v = matmul(c_in, wv);
    let dk = wq[0].len() as f64;
    let mut scores = matmul(&q, &transpose(&k));
    for row in &mut scores {
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = row.iter().map(|s| ((s - m) / dk.sqrt()).exp()).sum();
        for s in row.iter_mut() {
            *s = ((*s - m) / dk.sqrt()).exp() / z;
        }
    }
    matmul(&matmul(&scores, &v), wo)
}

fn max_diff(a: &Array2<f64>, b: &M) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..b.len() {
        for j in 0..b[0].len() {
            m = m.max((a[[i, j]] - b[i][j]).abs());
        }
    }
    m
}

struct Case {
    text: M,
    visual: M,
    wq: M,
    wk: M,
    wv: M,
    wo: M,
}

fn case(rng: &mut ChaCha8Rng) -> Case {
    let (s, l, dq, dc, dk, dv) = (
        rng.random_range(1..6),
        rng.random_range(1..9),
        rng.random_range(2..7),
        rng.random_range(2..7),
        rng.random_range(1..5),
        rng.random_range(1..5),
    );
    Case {
        text: rand_m(rng, s, dq),
        visual: rand_m(rng, l, dc),
        wq: rand_m(rng, dq, dk),
        wk: rand_m(rng, dc, dk),
        wv: rand_m(rng, dc, dv),
        wo: rand_m(rng, dv, dq),
    }
}

impl Case {
    fn weights(&self) -> AttentionWeights {
        AttentionWeights {
            wq: to_nd(&self.wq),
            wk: to_nd(&self.wk),
            wv: to_nd(&self.wv),
            wo: to_nd(&self.wo),
        }
    }
}

#[test]
fn attention_matches_straight_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let c = case(&mut rng);
        let want = naive_attention(&c.text, &c.visual, &c.wq, &c.wk, &c.wv, &c.wo);
        let got = cross_attention(&to_nd(&c.text), &to_nd(&c.visual), &c.weights()).unwrap();
        assert!(max_diff(&got, &want) < 1e-12);

        let attn = attention_weights(&to_nd(&c.text), &to_nd(&c.visual), &c.weights()).unwrap();
        for row in attn.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn gated_block_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let c = case(&mut rng);
        let gate: f64 = rng.random_range(-3.0..3.0);
        let upd = naive_attention(&c.text, &c.visual, &c.wq, &c.wk, &c.wv, &c.wo);
        let want: M = c
            .text
            .iter()
            .zip(&upd)
            .map(|(x, u)| x.iter().zip(u).map(|(a, b)| a + gate.tanh() * b).collect())
            .collect();
        let got = gated_cross_attention(&to_nd(&c.text), &to_nd(&c.visual), gate, &c.weights()).unwrap();
        assert!(max_diff(&got, &want) < 1e-12);

        let closed = gated_cross_attention(&to_nd(&c.text), &to_nd(&c.visual), 0.0, &c.weights()).unwrap();
        assert!(max_diff(&closed, &c.text) < 1e-12);
    }
}

#[test]
fn resampler_matches_oracle_and_has_fixed_output_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let c = case(&mut rng);
        // Latents play the query role; visual tokens are the context.
        let upd = naive_attention(&c.text, &c.visual, &c.wq, &c.wk, &c.wv, &c.wo);
        let want: M = c.text.iter().zip(&upd).map(|(x, u)| x.iter().zip(u).map(|(a, b)| a + b).collect()).collect();
        let got = perceiver_resample(&to_nd(&c.visual), &to_nd(&c.text), &c.weights()).unwrap();
        assert_eq!(got.dim(), (c.text.len(), c.text[0].len()));
        assert!(max_diff(&got, &want) < 1e-12);
    }
}

#[test]
fn lora_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..100 {
        let (d_in, d_out) = (rng.random_range(1..9), rng.random_range(1..9));
        let r = rng.random_range(1..=d_in.min(d_out));
        let alpha: f64 = rng.random_range(0.5..32.0);
        let w = rand_m(&mut rng, d_out, d_in);
        let a = rand_m(&mut rng, r, d_in);
        let b = rand_m(&mut rng, d_out, r);
        let x: Vec<f64> = (0..d_in).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xcol: M = x.iter().map(|&v| vec![v]).collect();
        let base = matmul(&w, &xcol);
        let delta = matmul(&b, &matmul(&a, &xcol));
        let want: Vec<f64> = (0..d_out).map(|i| base[i][0] + alpha / r as f64 * delta[i][0]).collect();

        let adapter = LoraAdapter::new(to_nd(&a), to_nd(&b), alpha).unwrap();
        let got = lora_forward(Array1::from(x.clone()).view(), to_nd(&w).view(), &adapter).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }

        let zero = LoraAdapter::new(to_nd(&a), Array2::zeros((d_out, r)), alpha).unwrap();
        let x = Array1::from(x);
        let plain = lora_forward(x.view(), to_nd(&w).view(), &zero).unwrap();
        assert_eq!(plain, to_nd(&w).dot(&x));
        for (g, w) in plain.iter().zip(&base) {
            assert!((g - w[0]).abs() < 1e-12);
        }
    }
}

#[test]
fn position_tables_add_per_item_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (t, n, d) = (4, 3, 5);
    let frames = Array3::from_shape_fn((t, n, d), |_| rng.random_range(-1.0..1.0));
    let table = Array2::from_shape_fn((6, d), |_| rng.random_range(-1.0..1.0));

    let temporal = PositionTable::new(PositionKind::Temporal, table.clone()).unwrap();
    let out = add_temporal_embeddings(&frames, &temporal).unwrap();
    for i in 0..t {
        for j in 0..n {
            for k in 0..d {
                assert_eq!(out[[i, j, k]], frames[[i, j, k]] + table[[i, k]]);
            }
        }
    }
    let media = PositionTable::new(PositionKind::Media, table.clone()).unwrap();
    assert_eq!(add_media_embeddings(&frames, &media).unwrap(), out);
    assert!(add_temporal_embeddings(&frames, &media).is_err());

    let short = PositionTable::new(PositionKind::Temporal, table.slice(ndarray::s![..2, ..]).to_owned()).unwrap();
    assert!(add_temporal_embeddings(&frames, &short).is_err());

    let flat = flatten_frames(&frames);
    assert_eq!(flat.dim(), (t * n, d));
    assert_eq!(flat[[n + 1, 2]], frames[[1, 1, 2]]);
    let p = permute_frames(&frames, &[3, 2, 1, 0]);
    assert_eq!(p[[0, 1, 2]], frames[[3, 1, 2]]);
}
