use super::*;
use crate::tensor::{finite_diff_grad, relative_error};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, p) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            let mut s = 0.0;
            for l in 0..k {
                s += a.at(i, l) * b.at(l, j);
            }
            out[i * p + j] = s;
        }
    }
    Tensor::new(vec![m, p], out).unwrap()
}

/// Per-row exp/normalize of `a·bᵀ/√d`.
fn naive_softmax_scores(a: &Tensor, b: &Tensor) -> Tensor {
    let d = a.cols() as f64;
    let (m, p) = (a.rows(), b.rows());
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let logits: Vec<f64> = (0..p)
            .map(|j| (0..a.cols()).map(|l| a.at(i, l) * b.at(j, l)).sum::<f64>() / d.sqrt())
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|x| (x - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        for j in 0..p {
            out[i * p + j] = e[j] / s;
        }
    }
    Tensor::new(vec![m, p], out).unwrap()
}

fn cols(x: &Tensor, start: usize, len: usize) -> Tensor {
    let data = (0..x.rows())
        .flat_map(|i| x.row(i)[start..start + len].to_vec())
        .collect();
    Tensor::new(vec![x.rows(), len], data).unwrap()
}

fn place_cols(dst: &mut [f64], width: usize, src: &Tensor, start: usize) {
    for i in 0..src.rows() {
        for j in 0..src.cols() {
            dst[i * width + start + j] += src.at(i, j);
        }
    }
}

/// Dense monolithic vanilla layer.
fn dense_vanilla(z: &Tensor, p: &MultiHeadParams, heads: usize) -> Tensor {
    let (n, c) = (z.rows(), z.cols());
    let d = c / heads;
    let (q, k, v) = (naive_matmul(z, &p.w_q), naive_matmul(z, &p.w_k), naive_matmul(z, &p.w_v));
    let mut cat = vec![0.0; n * c];
    for m in 0..heads {
        let a = naive_softmax_scores(&cols(&q, m * d, d), &cols(&k, m * d, d));
        let h = naive_matmul(&a, &cols(&v, m * d, d));
        place_cols(&mut cat, c, &h, m * d);
    }
    naive_matmul(&Tensor::new(vec![n, c], cat).unwrap(), &p.w_o)
}

/// Dense step-by-step mediator layer: explicit pooling loops, materialized
/// `A_qt·A_tk`, explicit zero-padded conv.
fn dense_mediator(z: &Tensor, p: &MediatorParams, cfg: &AttentionConfig, mcfg: &MediatorConfig) -> Tensor {
    let (n, c, heads) = (cfg.tokens, cfg.hidden, cfg.heads);
    let d = c / heads;
    let (gh, gw) = cfg.grid;
    let (mh, mw) = mcfg.grid;
    let a = &p.attn;
    let (q, k, v) = (naive_matmul(z, &a.w_q), naive_matmul(z, &a.w_k), naive_matmul(z, &a.w_v));
    let bins = |src: usize, dst: usize| -> Vec<(usize, usize)> {
        (0..dst)
            .map(|i| ((i * src) / dst, ((i + 1) * src + dst - 1) / dst))
            .collect()
    };
    let (bh, bw) = (bins(gh, mh), bins(gw, mw));
    let mut t = vec![0.0; mh * mw * c];
    for (i, &(h0, h1)) in bh.iter().enumerate() {
        for (j, &(w0, w1)) in bw.iter().enumerate() {
            for ch in 0..c {
                let mut s = 0.0;
                for y in h0..h1 {
                    for x in w0..w1 {
                        s += q.at(y * gw + x, ch);
                    }
                }
                t[(i * mw + j) * c + ch] = s / ((h1 - h0) * (w1 - w0)) as f64;
            }
        }
    }
    let t = Tensor::new(vec![mh * mw, c], t).unwrap();
    let mut cat = vec![0.0; n * c];
    for m in 0..heads {
        let (qm, km, vm, tm) = (
            cols(&q, m * d, d),
            cols(&k, m * d, d),
            cols(&v, m * d, d),
            cols(&t, m * d, d),
        );
        let composed = naive_matmul(&naive_softmax_scores(&qm, &tm), &naive_softmax_scores(&tm, &km));
        place_cols(&mut cat, c, &naive_matmul(&composed, &vm), m * d);
    }
    for y in 0..gh as isize {
        for x in 0..gw as isize {
            for ch in 0..c {
                let mut s = 0.0;
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy >= 0 && yy < gh as isize && xx >= 0 && xx < gw as isize {
                            let kidx = ((dy + 1) as usize * 3 + (dx + 1) as usize) * c + ch;
                            s += p.dw_kernels.data()[kidx] * v.at(yy as usize * gw + xx as usize, ch);
                        }
                    }
                }
                cat[(y as usize * gw + x as usize) * c + ch] += s;
            }
        }
    }
    naive_matmul(&Tensor::new(vec![n, c], cat).unwrap(), &a.w_o)
}

fn identity_kernels(c: usize) -> Tensor {
    let mut k = vec![0.0; 9 * c];
    for ch in 0..c {
        k[4 * c + ch] = 1.0;
    }
    Tensor::new(vec![3, 3, c], k).unwrap()
}

#[test]
fn identity_projections_pass_through() {
    let z = Tensor::random_uniform(&[5, 4], -1.0, 1.0, &mut rng(1));
    let (q, k, v) = project_qkv(&z, &MultiHeadParams::identity(4)).unwrap();
    assert_eq!(q, z);
    assert_eq!(k, z);
    assert_eq!(v, z);
    let (q, _, _) = project_qkv(&Tensor::zeros(&[5, 4]), &MultiHeadParams::random(4, &mut rng(2))).unwrap();
    assert!(q.data().iter().all(|&x| x == 0.0));
    assert!(project_qkv(&Tensor::zeros(&[5, 3]), &MultiHeadParams::identity(4)).is_err());
}

#[test]
fn projections_match_triple_loop() {
    let mut r = rng(3);
    let z = Tensor::random_uniform(&[7, 6], -1.0, 1.0, &mut r);
    let p = MultiHeadParams::random(6, &mut r);
    let (q, k, v) = project_qkv(&z, &p).unwrap();
    assert!(q.max_abs_diff(&naive_matmul(&z, &p.w_q)) <= 1e-12);
    assert!(k.max_abs_diff(&naive_matmul(&z, &p.w_k)) <= 1e-12);
    assert!(v.max_abs_diff(&naive_matmul(&z, &p.w_v)) <= 1e-12);
}

#[test]
fn orthogonal_queries_give_uniform_attention() {
    let q = Tensor::zeros(&[3, 2]);
    let k = Tensor::random_uniform(&[3, 2], -1.0, 1.0, &mut rng(4));
    let v = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 5.0], vec![5.0, 11.0]]).unwrap();
    let (h, a) = vanilla_attention_head(&q, &k, &v).unwrap();
    assert!(a.data().iter().all(|&x| (x - 1.0 / 3.0).abs() <= 1e-15));
    for i in 0..3 {
        assert!((h.at(i, 0) - 3.0).abs() <= 1e-12 && (h.at(i, 1) - 6.0).abs() <= 1e-12);
    }
}

#[test]
fn single_token_attends_to_itself() {
    let mut r = rng(5);
    let (q, k, v) = (
        Tensor::random_uniform(&[1, 3], -1.0, 1.0, &mut r),
        Tensor::random_uniform(&[1, 3], -1.0, 1.0, &mut r),
        Tensor::random_uniform(&[1, 3], -1.0, 1.0, &mut r),
    );
    let (h, a) = vanilla_attention_head(&q, &k, &v).unwrap();
    assert_eq!(a.data(), &[1.0]);
    assert_eq!(h, v);
}

#[test]
fn vanilla_head_matches_per_row_softmax() {
    let mut r = rng(6);
    let (q, k, v) = (
        Tensor::random_uniform(&[3, 2], -2.0, 2.0, &mut r),
        Tensor::random_uniform(&[3, 2], -2.0, 2.0, &mut r),
        Tensor::random_uniform(&[3, 2], -2.0, 2.0, &mut r),
    );
    let (h, a) = vanilla_attention_head(&q, &k, &v).unwrap();
    let a_ref = naive_softmax_scores(&q, &k);
    assert!(a.max_abs_diff(&a_ref) <= 1e-12);
    assert!(h.max_abs_diff(&naive_matmul(&a_ref, &v)) <= 1e-12);
    let bad = Tensor::filled(&[3, 2], 1e200);
    assert!(vanilla_attention_head(&bad, &bad, &v).unwrap_err().is_numeric());
}

#[test]
fn single_head_is_head_then_output_projection() {
    let mut r = rng(7);
    let cfg = AttentionConfig::new((2, 3), 4, 1).unwrap();
    let z = Tensor::random_uniform(&[6, 4], -1.0, 1.0, &mut r);
    let p = MultiHeadParams::random(4, &mut r);
    let out = multi_head_attention(&z, &p, &cfg).unwrap();
    let (q, k, v) = project_qkv(&z, &p).unwrap();
    let (h, _) = vanilla_attention_head(&q, &k, &v).unwrap();
    assert!(out.output.max_abs_diff(&naive_matmul(&h, &p.w_o)) <= 1e-12);
}

#[test]
fn concat_structure_with_identity_output() {
    let mut r = rng(8);
    let cfg = AttentionConfig::new((2, 2), 4, 2).unwrap();
    let z = Tensor::random_uniform(&[4, 4], -1.0, 1.0, &mut r);
    let mut p = MultiHeadParams::random(4, &mut r);
    p.w_o = Tensor::eye(4);
    let out = multi_head_attention(&z, &p, &cfg).unwrap();
    let (q, k, v) = project_qkv(&z, &p).unwrap();
    let (h1, _) = vanilla_attention_head(&cols(&q, 0, 2), &cols(&k, 0, 2), &cols(&v, 0, 2)).unwrap();
    assert_eq!(cols(&out.output, 0, 2), h1);
}

#[test]
fn multi_head_matches_dense_reference() {
    let mut r = rng(9);
    let cfg = AttentionConfig::new((2, 2), 4, 2).unwrap();
    let z = Tensor::random_uniform(&[4, 4], -1.0, 1.0, &mut r);
    let p = MultiHeadParams::random(4, &mut r);
    let out = multi_head_attention(&z, &p, &cfg).unwrap();
    assert!(out.output.max_abs_diff(&dense_vanilla(&z, &p, 2)) <= 1e-12);
    assert!(out.maps.max_row_sum_error() <= 1e-10);
}

#[test]
fn mediators_pool_queries() {
    let cfg = AttentionConfig::new((4, 4), 3, 1).unwrap();
    let q = Tensor::random_uniform(&[16, 3], -1.0, 1.0, &mut rng(10));
    assert_eq!(make_mediators(&q, &cfg, &MediatorConfig::new(4, 4)).unwrap(), q);
    let t = make_mediators(&Tensor::filled(&[16, 3], 0.7), &cfg, &MediatorConfig::new(2, 2)).unwrap();
    assert!(t.data().iter().all(|&x| (x - 0.7).abs() <= 1e-15));
    let idx = Tensor::new(vec![16, 3], (0..16).flat_map(|i| [i as f64; 3]).collect()).unwrap();
    let t = make_mediators(&idx, &cfg, &MediatorConfig::new(2, 2)).unwrap();
    for (i, e) in [2.5, 4.5, 10.5, 12.5].into_iter().enumerate() {
        assert!(t.row(i).iter().all(|&x| (x - e).abs() <= 1e-12));
    }
    assert!(make_mediators(&Tensor::zeros(&[15, 3]), &cfg, &MediatorConfig::new(2, 2)).is_err());
    assert!(make_mediators(&q, &cfg, &MediatorConfig::new(5, 1)).is_err());
}

#[test]
fn single_mediator_collapses_rows() {
    let mut r = rng(11);
    let mk = |r: &mut ChaCha8Rng, n| Tensor::random_uniform(&[n, 3], -2.0, 2.0, r);
    let (q, k, v, t) = (mk(&mut r, 6), mk(&mut r, 6), mk(&mut r, 6), mk(&mut r, 1));
    let out = mediator_attention_head(&q, &k, &v, &t).unwrap();
    assert!(out.a_qt.data().iter().all(|&x| x == 1.0));
    for i in 1..6 {
        for j in 0..3 {
            assert!((out.h.at(i, j) - out.h.at(0, j)).abs() <= 1e-12);
        }
    }
    let maps = AttentionMaps::Mediated {
        qt: vec![out.a_qt],
        tk: vec![out.a_tk.clone()],
    };
    let comp = &composed_attention_map(&maps).unwrap()[0];
    for i in 0..6 {
        assert!(comp.row(i).iter().zip(out.a_tk.row(0)).all(|(a, b)| (a - b).abs() <= 1e-15));
    }
}

#[test]
fn full_count_mediators_are_square_and_stochastic() {
    let q = Tensor::random_uniform(&[5, 2], -1.0, 1.0, &mut rng(12));
    let v = Tensor::random_uniform(&[5, 2], -1.0, 1.0, &mut rng(13));
    let out = mediator_attention_head(&q, &q, &v, &q).unwrap();
    assert_eq!(out.a_qt.shape(), &[5, 5]);
    assert_eq!(out.a_tk.shape(), &[5, 5]);
    let maps = AttentionMaps::Mediated {
        qt: vec![out.a_qt],
        tk: vec![out.a_tk],
    };
    assert!(maps.max_row_sum_error() <= 1e-10);
}

#[test]
fn mediator_head_matches_slow_associativity() {
    let mut r = rng(14);
    let mk = |r: &mut ChaCha8Rng, n| Tensor::random_uniform(&[n, 3], -2.0, 2.0, r);
    let (q, k, v, t) = (mk(&mut r, 5), mk(&mut r, 5), mk(&mut r, 5), mk(&mut r, 2));
    let out = mediator_attention_head(&q, &k, &v, &t).unwrap();
    let slow = naive_matmul(&naive_matmul(&out.a_qt, &out.a_tk), &v);
    assert!(out.h.max_abs_diff(&slow) <= 1e-10);
}

#[test]
fn zero_kernels_leave_pure_mediator_path() {
    let mut r = rng(15);
    let cfg = AttentionConfig::new((3, 3), 4, 2).unwrap();
    let mcfg = MediatorConfig::new(2, 2);
    let z = Tensor::random_uniform(&[9, 4], -1.0, 1.0, &mut r);
    let p = MediatorParams::new(MultiHeadParams::random(4, &mut r), Tensor::zeros(&[3, 3, 4])).unwrap();
    let out = mediator_attention(&z, &p, &cfg, &mcfg).unwrap();
    let mut tape = Tape::inference();
    let zv = tape.constant(z.clone());
    let w = p.attn.on_tape(&mut tape);
    let (o, _) = mediator_attention_on(&mut tape, zv, &w, &cfg, &mcfg).unwrap();
    assert!(out.output.max_abs_diff(tape.value(o)) <= 1e-15);
}

#[test]
fn conv_branch_isolated_with_zero_values() {
    let mut r = rng(16);
    let cfg = AttentionConfig::new((3, 2), 4, 2).unwrap();
    let z = Tensor::random_uniform(&[6, 4], -1.0, 1.0, &mut r);
    let attn = MultiHeadParams {
        w_v: Tensor::zeros(&[4, 4]),
        w_o: Tensor::eye(4),
        ..MultiHeadParams::random(4, &mut r)
    };
    let p = MediatorParams::new(attn, identity_kernels(4)).unwrap();
    let out = mediator_attention(&z, &p, &cfg, &MediatorConfig::new(1, 2)).unwrap();
    assert!(out.output.data().iter().all(|&x| x == 0.0));

    let mut tape = Tape::inference();
    let zv = tape.constant(z.clone());
    let mut w = p.on_tape(&mut tape);
    w.w_v = tape.constant(Tensor::eye(4));
    let (o, _) = mediator_attention_on(&mut tape, zv, &w, &cfg, &MediatorConfig::new(1, 2)).unwrap();
    let (q, k, _) = project_qkv(&z, &p.attn).unwrap();
    let t = make_mediators(&q, &cfg, &MediatorConfig::new(1, 2)).unwrap();
    let mut attn_only = vec![0.0; 24];
    for m in 0..2 {
        let h = mediator_attention_head(&cols(&q, 2 * m, 2), &cols(&k, 2 * m, 2), &cols(&z, 2 * m, 2), &cols(&t, 2 * m, 2))
            .unwrap()
            .h;
        place_cols(&mut attn_only, 4, &h, 2 * m);
    }
    let attn_only = Tensor::new(vec![6, 4], attn_only).unwrap();
    let conv = tape.value(o).zip_map(&attn_only, |a, b| a - b).unwrap();
    assert!(conv.max_abs_diff(&z) <= 1e-12);
}

#[test]
fn mediator_layer_matches_dense_reference() {
    let mut r = rng(17);
    let cfg = AttentionConfig::new((4, 4), 8, 2).unwrap();
    let mcfg = MediatorConfig::new(2, 2);
    let z = Tensor::random_uniform(&[16, 8], -1.0, 1.0, &mut r);
    let p = MediatorParams::random(8, &mut r);
    let out = mediator_attention(&z, &p, &cfg, &mcfg).unwrap();
    assert!(out.output.max_abs_diff(&dense_mediator(&z, &p, &cfg, &mcfg)) <= 1e-10);
    assert_eq!(out.flops, mediator_flops(&cfg, &mcfg));
}

#[test]
fn uneven_pooling_matches_dense_reference() {
    let mut r = rng(18);
    let cfg = AttentionConfig::new((5, 3), 6, 3).unwrap();
    let mcfg = MediatorConfig::new(2, 2);
    let z = Tensor::random_uniform(&[15, 6], -1.0, 1.0, &mut r);
    let p = MediatorParams::random(6, &mut r);
    let out = mediator_attention(&z, &p, &cfg, &mcfg).unwrap();
    assert!(out.output.max_abs_diff(&dense_mediator(&z, &p, &cfg, &mcfg)) <= 1e-10);
    assert_eq!(out.flops, mediator_flops(&cfg, &mcfg));
}

#[test]
fn composed_map_requires_mediated_maps() {
    let err = composed_attention_map(&AttentionMaps::Full(vec![Tensor::eye(2)])).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}

#[test]
fn one_hot_query_map_selects_mediator_row() {
    let qt = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let tk = Tensor::from_rows(&[vec![0.2, 0.3, 0.5], vec![0.6, 0.1, 0.3]]).unwrap();
    let c = composed_attention_map(&AttentionMaps::Mediated {
        qt: vec![qt],
        tk: vec![tk.clone()],
    })
    .unwrap();
    assert_eq!(c[0].row(0), tk.row(1));
    assert_eq!(c[0].row(1), tk.row(0));
    assert_eq!(c[0].row(2), tk.row(1));
}

#[test]
fn instrumented_counts_match_analytic() {
    let mut r = rng(19);
    let cfg = AttentionConfig::new((4, 4), 8, 2).unwrap();
    let z = Tensor::random_uniform(&[16, 8], -1.0, 1.0, &mut r);
    let out = multi_head_attention(&z, &MultiHeadParams::random(8, &mut r), &cfg).unwrap();
    assert_eq!(out.flops, attention_flops(&cfg));
    assert_eq!(out.flops.interaction(), 2 * 16 * 16 * 8);
    let mcfg = MediatorConfig::new(2, 4);
    let out = mediator_attention(&z, &MediatorParams::random(8, &mut r), &cfg, &mcfg).unwrap();
    assert_eq!(out.flops.interaction(), 4 * 8 * 16 * 8);
}

#[test]
fn vanilla_is_permutation_equivariant_mediator_is_not() {
    let mut r = rng(20);
    let cfg = AttentionConfig::new((4, 4), 4, 2).unwrap();
    let z = Tensor::random_uniform(&[16, 4], -1.0, 1.0, &mut r);
    let perm: Vec<usize> = (0..16).map(|i| (i * 5 + 3) % 16).collect();
    let permute = |x: &Tensor| Tensor::new(x.shape().to_vec(), perm.iter().flat_map(|&i| x.row(i).to_vec()).collect()).unwrap();
    let p = MultiHeadParams::random(4, &mut r);
    let a = multi_head_attention(&z, &p, &cfg).unwrap().output;
    let b = multi_head_attention(&permute(&z), &p, &cfg).unwrap().output;
    assert!(permute(&a).max_abs_diff(&b) <= 1e-12);

    let mp = MediatorParams::random(4, &mut r);
    let mcfg = MediatorConfig::new(2, 2);
    let a = mediator_attention(&z, &mp, &cfg, &mcfg).unwrap().output;
    let b = mediator_attention(&permute(&z), &mp, &cfg, &mcfg).unwrap().output;
    assert!(permute(&a).max_abs_diff(&b) > 1e-6);
}

#[test]
fn mediator_count_factorization() {
    assert_eq!(MediatorConfig::for_count(64, (16, 16)).unwrap().grid, (8, 8));
    assert_eq!(MediatorConfig::for_count(16, (16, 16)).unwrap().grid, (4, 4));
    assert_eq!(MediatorConfig::for_count(8, (16, 16)).unwrap().count(), 8);
    assert_eq!(MediatorConfig::for_count(1, (4, 4)).unwrap().grid, (1, 1));
    assert!(MediatorConfig::for_count(7, (4, 4)).is_err());
    assert!(AttentionConfig::new((2, 2), 6, 4).is_err());
}

fn loss_gradients(mediated: bool) -> (f64, f64) {
    let mut r = rng(21);
    let cfg = AttentionConfig::new((3, 3), 4, 2).unwrap();
    let mcfg = MediatorConfig::new(2, 2);
    let z = Tensor::random_uniform(&[9, 4], -1.0, 1.0, &mut r);
    let p = MediatorParams::random(4, &mut r);
    let target = Tensor::random_uniform(&[9, 4], -1.0, 1.0, &mut r);
    let forward = |tape: &mut Tape, zv: Var, wq: Var| -> Result<Var> {
        let mut w = if mediated { p.on_tape(tape) } else { p.attn.on_tape(tape) };
        w.w_q = wq;
        let (out, _) = if mediated {
            mediator_attention_on(tape, zv, &w, &cfg, &mcfg)?
        } else {
            multi_head_attention_on(tape, zv, &w, &cfg)?
        };
        let tv = tape.constant(target.clone());
        let diff = tape.sub(out, tv)?;
        let sq = tape.mul(diff, diff)?;
        tape.sum(sq)
    };
    let mut tape = Tape::new();
    let zv = tape.leaf(z.clone());
    let wq = tape.leaf(p.attn.w_q.clone());
    let loss = forward(&mut tape, zv, wq).unwrap();
    let g = tape.backward(loss, &Tensor::scalar(1.0)).unwrap();
    let eval = |zz: &Tensor, ww: &Tensor| -> Result<f64> {
        let mut t = Tape::inference();
        let (a, b) = (t.constant(zz.clone()), t.constant(ww.clone()));
        let l = forward(&mut t, a, b)?;
        t.value(l).item()
    };
    let gz = finite_diff_grad(|x| eval(x, &p.attn.w_q), &z, 1e-6).unwrap();
    let gw = finite_diff_grad(|x| eval(&z, x), &p.attn.w_q, 1e-6).unwrap();
    (
        relative_error(g.get(zv).unwrap(), &gz),
        relative_error(g.get(wq).unwrap(), &gw),
    )
}

#[test]
fn layer_gradients_match_finite_differences() {
    for mediated in [false, true] {
        let (ez, ew) = loss_gradients(mediated);
        assert!(ez <= 1e-5 && ew <= 1e-5, "mediated={mediated}: {ez} {ew}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn attention_rows_are_stochastic(
        gh in 1usize..6, gw in 1usize..6, heads in 1usize..4, d in 1usize..4,
        mh in 1usize..6, mw in 1usize..6, seed in any::<u64>(),
    ) {
        let (mh, mw) = (mh.min(gh), mw.min(gw));
        let mut r = rng(seed);
        let cfg = AttentionConfig::new((gh, gw), heads * d, heads).unwrap();
        let z = Tensor::random_uniform(&[gh * gw, heads * d], -2.0, 2.0, &mut r);
        let full = multi_head_attention(&z, &MultiHeadParams::random(heads * d, &mut r), &cfg).unwrap();
        prop_assert!(full.maps.max_row_sum_error() <= 1e-10);
        let med = mediator_attention(&z, &MediatorParams::random(heads * d, &mut r), &cfg, &MediatorConfig::new(mh, mw)).unwrap();
        prop_assert!(med.maps.max_row_sum_error() <= 1e-10);
        for c in composed_attention_map(&med.maps).unwrap() {
            for i in 0..c.rows() {
                prop_assert!((c.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn order_interchange_is_associative(n in 1usize..=64, m in 1usize..=8, d in 1usize..5, seed in any::<u64>()) {
        let m = m.min(n);
        let mut r = rng(seed);
        let mk = |r: &mut ChaCha8Rng, rows| Tensor::random_uniform(&[rows, d], -2.0, 2.0, r);
        let (q, k, v, t) = (mk(&mut r, n), mk(&mut r, n), mk(&mut r, n), mk(&mut r, m));
        let out = mediator_attention_head(&q, &k, &v, &t).unwrap();
        let slow = naive_matmul(&naive_matmul(&out.a_qt, &out.a_tk), &v);
        prop_assert!(out.h.max_abs_diff(&slow) <= 1e-10);
    }
}
