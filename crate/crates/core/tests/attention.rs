use ctcatt::attention::{context, AttentionBranch, AttentionDecoderParams, LocationAttentionParams};
use ctcatt::layers::LstmState;
use ctcatt::nn::{grad_check_params, Graph, ParamStore, Tensor};
use ctcatt::scalar::log_sum_exp;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut impl Rng, shape: &[usize], range: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-range..range)).collect()).unwrap()
}

fn random_simplex(rng: &mut impl Rng, t: usize) -> Tensor<f64> {
    let w: Vec<f64> = (0..t).map(|_| rng.gen_range(0.01..1.0)).collect();
    let s: f64 = w.iter().sum();
    Tensor::row(w.into_iter().map(|v| v / s).collect())
}

fn branch(ps: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, enc: usize, dec: usize, width: usize, labels: usize) -> AttentionBranch {
    let attention = LocationAttentionParams::new(ps, "att", enc, dec, 5, 3, width, rng).unwrap();
    let decoder = AttentionDecoderParams::new(ps, "dec", labels, 4, enc, dec, rng).unwrap();
    AttentionBranch { attention, decoder }
}

#[test]
fn zero_g_gives_uniform_alignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamStore::new();
    let br = branch(&mut ps, &mut rng, 4, 3, 5, 3);
    ps.get_mut(br.attention.g).fill(0.0);
    let mut g = Graph::inference(&ps);
    let h = g.input(random_tensor(&mut rng, &[7, 4], 1.0));
    let a0 = g.input(random_simplex(&mut rng, 7));
    let q = g.input(random_tensor(&mut rng, &[1, 3], 1.0));
    let a = br.attention.attend(&mut g, a0, q, h).unwrap();
    for &v in g.value(a).data() {
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }
}

/// Direct evaluation of the location-aware energies and softmax.
fn hand_attention(
    conv: &[f64], // [C][W]
    channels: usize,
    width: usize,
    g_vec: &[f64],
    wq: &[f64], // [A][Dq]
    wh: &[f64], // [A][P]
    wf: &[f64], // [A][C]
    bf: &[f64],
    a_prev: &[f64],
    q: &[f64],
    h: &[Vec<f64>],
) -> Vec<f64> {
    let t_len = a_prev.len();
    let att = g_vec.len();
    let pad = (width - 1) / 2;
    let mut energies = Vec::new();
    for t in 0..t_len {
        let mut f = vec![0.0; channels];
        for (c, fc) in f.iter_mut().enumerate() {
            for k in 0..width {
                let src = t as isize + k as isize - pad as isize;
                if src >= 0 && (src as usize) < t_len {
                    *fc += conv[c * width + k] * a_prev[src as usize];
                }
            }
        }
        let mut e = 0.0;
        for j in 0..att {
            let mut pre = bf[j];
            for (d, &qd) in q.iter().enumerate() {
                pre += wq[j * q.len() + d] * qd;
            }
            for (d, &hd) in h[t].iter().enumerate() {
                pre += wh[j * h[t].len() + d] * hd;
            }
            for (c, &fc) in f.iter().enumerate() {
                pre += wf[j * channels + c] * fc;
            }
            e += g_vec[j] * pre.tanh();
        }
        energies.push(e);
    }
    let m = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = energies.iter().map(|e| (e - m).exp()).sum();
    energies.iter().map(|e| (e - m).exp() / z).collect()
}

#[test]
fn two_frame_energies_match_hand_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = ParamStore::new();
    let (p, dq, width) = (3, 2, 4);
    let att = LocationAttentionParams::new(&mut ps, "att", p, dq, 5, 3, width, &mut rng).unwrap();
    for id in ps.ids().collect::<Vec<_>>() {
        let t = random_tensor(&mut rng, ps.get(id).shape(), 1.0);
        *ps.get_mut(id) = t;
    }
    let h_rows = vec![vec![0.3, -0.8, 0.5], vec![-0.2, 0.9, 0.1]];
    let a_prev = [0.35, 0.65];
    let q = [0.4, -0.6];
    let expected = hand_attention(
        ps.get(att.conv).data(),
        3,
        width,
        ps.get(att.g).data(),
        ps.get(att.lin_q.weight).data(),
        ps.get(att.lin_h.weight).data(),
        ps.get(att.lin_f.weight).data(),
        ps.get(att.lin_f.bias.unwrap()).data(),
        &a_prev,
        &q,
        &h_rows,
    );
    let mut g = Graph::inference(&ps);
    let h = g.input(Tensor::matrix(2, 3, h_rows.concat()).unwrap());
    let a0 = g.input(Tensor::row(a_prev.to_vec()));
    let qv = g.input(Tensor::row(q.to_vec()));
    let a = att.attend(&mut g, a0, qv, h).unwrap();
    for (x, y) in g.value(a).data().iter().zip(&expected) {
        assert!((x - y).abs() < 1e-14, "{x} vs {y}");
    }
}

#[test]
fn content_only_attention_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamStore::new();
    let att = LocationAttentionParams::new(&mut ps, "att", 4, 3, 5, 3, 5, &mut rng).unwrap();
    ps.get_mut(att.conv).fill(0.0);
    let h = random_tensor(&mut rng, &[5, 4], 1.0);
    let perm = [2, 4, 0, 1, 3];
    let mut hp = h.clone();
    for (r, &src) in perm.iter().enumerate() {
        hp.data_mut()[r * 4..(r + 1) * 4].copy_from_slice(h.row_slice(src));
    }
    let q = random_tensor(&mut rng, &[1, 3], 1.0);
    let mut g = Graph::inference(&ps);
    let a0 = g.input(Tensor::full(&[1, 5], 0.2));
    let qv = g.input(q);
    let (hv, hpv) = (g.input(h), g.input(hp));
    let a = att.attend(&mut g, a0, qv, hv).unwrap();
    let ap = att.attend(&mut g, a0, qv, hpv).unwrap();
    for (r, &src) in perm.iter().enumerate() {
        assert!((g.value(ap).data()[r] - g.value(a).data()[src]).abs() < 1e-15);
    }
}

#[test]
fn alignment_length_mismatch_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ps = ParamStore::new();
    let att = LocationAttentionParams::new(&mut ps, "att", 4, 3, 5, 3, 5, &mut rng).unwrap();
    let mut g = Graph::inference(&ps);
    let h = g.input(random_tensor(&mut rng, &[5, 4], 1.0));
    let a0 = g.input(Tensor::full(&[1, 4], 0.25));
    let q = g.input(Tensor::zeros(&[1, 3]));
    assert!(att.attend(&mut g, a0, q, h).is_err());
}

#[test]
fn zero_output_weights_give_uniform_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ps = ParamStore::new();
    let dec = AttentionDecoderParams::new(&mut ps, "dec", 6, 4, 3, 5, &mut rng).unwrap();
    ps.get_mut(dec.output.weight).fill(0.0);
    ps.get_mut(dec.output.bias.unwrap()).fill(0.0);
    let mut g = Graph::inference(&ps);
    let r = g.input(random_tensor(&mut rng, &[1, 3], 1.0));
    let state = dec.cell.zero_state(&mut g);
    let (ld, _) = dec.step(&mut g, r, state, dec.sos()).unwrap();
    for &v in g.value(ld).data() {
        assert!((v + 7f64.ln()).abs() < 1e-14);
    }
    assert!(dec.step(&mut g, r, state, 7).is_err());
}

#[test]
fn decoder_output_is_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ps = ParamStore::new();
    let dec = AttentionDecoderParams::new(&mut ps, "dec", 6, 4, 3, 5, &mut rng).unwrap();
    for id in ps.ids().collect::<Vec<_>>() {
        let t = random_tensor(&mut rng, ps.get(id).shape(), 2.0);
        *ps.get_mut(id) = t;
    }
    let mut g = Graph::inference(&ps);
    let mut state = dec.cell.zero_state(&mut g);
    let mut prev = dec.sos();
    for step in 0..4 {
        let r = g.input(random_tensor(&mut rng, &[1, 3], 1.0));
        let (ld, next) = dec.step(&mut g, r, state, prev).unwrap();
        assert!(log_sum_exp(g.value(ld).data()).abs() < 1e-9);
        state = next;
        prev = step % 6;
    }
}

#[test]
fn teacher_forcing_is_the_chained_product_of_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ps = ParamStore::new();
    let br = branch(&mut ps, &mut rng, 4, 3, 5, 3);
    let h = random_tensor(&mut rng, &[6, 4], 1.0);
    let labels = [2, 0];
    let mut g = Graph::inference(&ps);
    let hv = g.input(h);
    let mem = br.memory(&mut g, hv).unwrap();
    let loss = br.teacher_forced_loss(&mut g, &mem, &labels).unwrap();

    // manual trace: attend, context, decoder step, pick
    let mut a = g.input(Tensor::full(&[1, 6], 1.0 / 6.0));
    let mut st = br.decoder.cell.zero_state(&mut g);
    let mut prev = br.decoder.sos();
    let mut prob = 1.0;
    for &target in labels.iter().chain([br.decoder.eos()].iter()) {
        a = br.attention.attend(&mut g, a, st.h, hv).unwrap();
        let r = context(&mut g, a, hv).unwrap();
        let (ld, next): (_, LstmState) = br.decoder.step(&mut g, r, st, prev).unwrap();
        prob *= g.value(ld).data()[target].exp();
        st = next;
        prev = target;
    }
    assert!((g.value(loss).item() - -prob.ln()).abs() < 1e-12);
}

#[test]
fn attention_and_decoder_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ps = ParamStore::new();
    let br = branch(&mut ps, &mut rng, 3, 3, 4, 3);
    for id in ps.ids().collect::<Vec<_>>() {
        let t = random_tensor(&mut rng, ps.get(id).shape(), 0.5);
        *ps.get_mut(id) = t;
    }
    let h = random_tensor(&mut rng, &[5, 3], 1.0);
    let ids: Vec<_> = ps.ids().collect();
    let report = grad_check_params(&ps, &ids, 1e-5, 40, |g| {
        let hv = g.input(h.clone());
        let mem = br.memory(g, hv)?;
        br.teacher_forced_loss(g, &mem, &[1, 2])
    })
    .unwrap();
    for r in report {
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn alignment_on_simplex_and_context_in_hull(seed in 0u64..1_000_000, t in 1usize..12, width in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let att = LocationAttentionParams::new(&mut ps, "att", 3, 2, 4, 2, width, &mut rng).unwrap();
        for id in ps.ids().collect::<Vec<_>>() {
            let v = random_tensor(&mut rng, ps.get(id).shape(), 3.0);
            *ps.get_mut(id) = v;
        }
        let h = random_tensor(&mut rng, &[t, 3], 2.0);
        let mut g = Graph::inference(&ps);
        let hv = g.input(h.clone());
        let a0 = g.input(random_simplex(&mut rng, t));
        let q = g.input(random_tensor(&mut rng, &[1, 2], 1.0));
        let a = att.attend(&mut g, a0, q, hv).unwrap();
        let ad = g.value(a).data();
        prop_assert!(ad.iter().all(|&v| v >= 0.0));
        prop_assert!((ad.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let r = context(&mut g, a, hv).unwrap();
        for d in 0..3 {
            let col: Vec<f64> = (0..t).map(|i| h.data()[i * 3 + d]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let v = g.value(r).data()[d];
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }
}
