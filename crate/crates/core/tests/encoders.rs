mod common;

use common::{max_abs_diff, tensor_err, Lcg};
use mgca_core::encoders::{encode_batch, init_params, project, PROTOTYPES};
use mgca_core::params::Bound;
use mgca_core::{EncoderConfig, ParamStore};
use mgca_tensor::{grad_check, Tape, Tensor};

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    let (r, c) = t.dims2().unwrap();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn lin(p: &ParamStore, name: &str, x: &Mat) -> Mat {
    let w = mat(p.get(&format!("{name}.w")).unwrap());
    let b = match p.get(&format!("{name}.b")) {
        Ok(b) => b.data().to_vec(),
        Err(_) => vec![0.0; w[0].len()],
    };
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| b[j] + row.iter().enumerate().map(|(k, v)| v * w[k][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn ln(p: &ParamStore, name: &str, x: &Mat) -> Mat {
    let g = p.get(&format!("{name}.g")).unwrap().data().to_vec();
    let b = p.get(&format!("{name}.b")).unwrap().data().to_vec();
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

/// One sample through a tower, written out with plain loops.
/// Returns (hidden states incl. CLS, token weights).
fn naive_tower(cfg: &EncoderConfig, p: &ParamStore, pre: &str, embedded: Mat) -> (Mat, Vec<f64>) {
    let n = embedded.len();
    let mut h = vec![p.get(&format!("{pre}.cls")).unwrap().data().to_vec()];
    h.extend(embedded);
    let pos = mat(p.get(&format!("{pre}.pos")).unwrap());
    h = add(&h, &pos);
    let t = n + 1;
    let dh = cfg.width / cfg.heads;
    let mut weights = vec![1.0; n];
    for l in 0..cfg.depth {
        let lp = format!("{pre}.layer{l}");
        let x = ln(p, &format!("{lp}.ln1"), &h);
        let q = lin(p, &format!("{lp}.attn.q"), &x);
        let k = lin(p, &format!("{lp}.attn.k"), &x);
        let v = lin(p, &format!("{lp}.attn.v"), &x);
        let mut mixed = vec![vec![0.0; cfg.width]; t];
        let mut cls_col = vec![0.0; n];
        for head in 0..cfg.heads {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..t {
                let s: Vec<f64> = (0..t)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                let pr: Vec<f64> = s.iter().map(|v| (v - m).exp() / z).collect();
                for c in cols.clone() {
                    mixed[i][c] = (0..t).map(|j| pr[j] * v[j][c]).sum();
                }
                if i > 0 {
                    cls_col[i - 1] += pr[0] / cfg.heads as f64;
                }
            }
        }
        h = add(&h, &lin(p, &format!("{lp}.attn.o"), &mixed));
        let x = ln(p, &format!("{lp}.ln2"), &h);
        let hid: Mat = lin(p, &format!("{lp}.mlp.fc1"), &x)
            .into_iter()
            .map(|r| r.into_iter().map(silu).collect())
            .collect();
        h = add(&h, &lin(p, &format!("{lp}.mlp.fc2"), &hid));
        let total: f64 = cls_col.iter().sum();
        weights = cls_col.iter().map(|c| n as f64 * c / total).collect();
    }
    (h, weights)
}

fn naive_project(p: &ParamStore, head: &str, x: &Mat) -> Mat {
    let hid: Mat = lin(p, &format!("head.{head}.fc1"), x)
        .into_iter()
        .map(|r| r.into_iter().map(silu).collect())
        .collect();
    lin(p, &format!("head.{head}.fc2"), &hid)
        .into_iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.into_iter().map(|v| v / n).collect()
        })
        .collect()
}

struct Case {
    cfg: EncoderConfig,
    params: ParamStore,
    patches: Tensor,
    ids: Vec<usize>,
    batch: usize,
}

fn case(cfg: EncoderConfig, batch: usize, seed: u64) -> Case {
    let params = init_params(&cfg, 3, seed).unwrap();
    let mut rng = Lcg(seed);
    let patches = rng.tensor(&[batch, cfg.visual_tokens, cfg.patch_dim]);
    let ids = (0..batch * cfg.text_tokens).map(|_| rng.below(cfg.vocab_size)).collect();
    Case { cfg, params, patches, ids, batch }
}

fn oracle_config() -> EncoderConfig {
    EncoderConfig {
        depth: 2,
        heads: 2,
        width: 8,
        visual_tokens: 4,
        text_tokens: 5,
        patch_dim: 3,
        vocab_size: 7,
        proj_dim: 4,
        mlp_ratio: 2,
    }
}

fn flat(m: &[Mat]) -> Vec<f64> {
    m.iter().flatten().flatten().copied().collect()
}

#[test]
fn towers_match_loop_reference() {
    let c = case(oracle_config(), 3, 11);
    let (cfg, p) = (&c.cfg, &c.params);
    let tape = Tape::new();
    let bound = p.bind(&tape);
    let out = encode_batch(cfg, &bound, tape.constant(c.patches.clone()), &c.ids).unwrap();

    let (mut r, mut z, mut wv, mut wt, mut vp, mut tp, mut rp, mut zp) =
        (vec![], vec![], vec![], vec![], vec![], vec![], vec![], vec![]);
    let (s, l, pd) = (cfg.visual_tokens, cfg.text_tokens, cfg.patch_dim);
    let table = mat(p.get("text.embed").unwrap());
    for b in 0..c.batch {
        let patches: Mat = (0..s)
            .map(|i| c.patches.data()[(b * s + i) * pd..(b * s + i + 1) * pd].to_vec())
            .collect();
        let (hi, w_img) = naive_tower(cfg, p, "image", lin(p, "image.patch", &patches));
        let emb: Mat = c.ids[b * l..(b + 1) * l].iter().map(|&i| table[i].clone()).collect();
        let (ht, w_txt) = naive_tower(cfg, p, "text", emb);
        vp.push(naive_project(p, "image_global", &hi[..1].to_vec()));
        tp.push(naive_project(p, "text_global", &ht[..1].to_vec()));
        rp.push(naive_project(p, "image_tokens", &hi[1..].to_vec()));
        zp.push(naive_project(p, "text_tokens", &ht[1..].to_vec()));
        r.push(hi[1..].to_vec());
        z.push(ht[1..].to_vec());
        wv.push(w_img);
        wt.push(w_txt);
    }
    let tol = 1e-10;
    assert!(max_abs_diff(out.r.value().data(), &flat(&r)) < tol);
    assert!(max_abs_diff(out.z.value().data(), &flat(&z)) < tol);
    assert!(max_abs_diff(out.w_visual.value().data(), &wv.concat()) < tol);
    assert!(max_abs_diff(out.w_text.value().data(), &wt.concat()) < tol);
    assert!(max_abs_diff(out.v_proj.value().data(), &flat(&vp)) < tol);
    assert!(max_abs_diff(out.t_proj.value().data(), &flat(&tp)) < tol);
    assert!(max_abs_diff(out.r_proj.value().data(), &flat(&rp)) < tol);
    assert!(max_abs_diff(out.z_proj.value().data(), &flat(&zp)) < tol);
}

#[test]
fn depth_zero_is_embedding_plus_position_with_unit_weights() {
    let cfg = EncoderConfig { depth: 0, ..oracle_config() };
    let c = case(cfg, 2, 4);
    let tape = Tape::new();
    let bound = c.params.bind(&tape);
    let out = encode_batch(&c.cfg, &bound, tape.constant(c.patches.clone()), &c.ids).unwrap();
    assert!(out.w_visual.value().data().iter().all(|&w| w == 1.0));
    assert!(out.w_text.value().data().iter().all(|&w| w == 1.0));

    let (s, pd) = (c.cfg.visual_tokens, c.cfg.patch_dim);
    let pos = mat(c.params.get("image.pos").unwrap());
    let mut want = vec![];
    for b in 0..2 {
        let patches: Mat = (0..s)
            .map(|i| c.patches.data()[(b * s + i) * pd..(b * s + i + 1) * pd].to_vec())
            .collect();
        want.push(add(&lin(&c.params, "image.patch", &patches), &pos[1..].to_vec()));
    }
    assert!(max_abs_diff(out.r.value().data(), &flat(&want)) < 1e-12);
}

#[test]
fn single_token_weight_is_one() {
    let cfg = EncoderConfig { visual_tokens: 1, text_tokens: 1, ..oracle_config() };
    let c = case(cfg, 3, 9);
    let tape = Tape::new();
    let out = encode_batch(&c.cfg, &c.params.bind(&tape), tape.constant(c.patches.clone()), &c.ids).unwrap();
    for &w in out.w_visual.value().data().iter().chain(out.w_text.value().data()) {
        assert!((w - 1.0).abs() < 1e-12);
    }
}

#[test]
fn weights_are_nonnegative_and_sum_to_length() {
    let cfg = EncoderConfig::default();
    let c = case(cfg, 4, 2);
    let tape = Tape::new();
    let out = encode_batch(&c.cfg, &c.params.bind(&tape), tape.constant(c.patches.clone()), &c.ids).unwrap();
    for (w, n) in [(out.w_visual, c.cfg.visual_tokens), (out.w_text, c.cfg.text_tokens)] {
        for row in w.value().data().chunks(n) {
            assert!(row.iter().all(|&x| x >= 0.0));
            assert!((row.iter().sum::<f64>() - n as f64).abs() < 1e-8);
        }
    }
}

#[test]
fn projections_have_unit_norm() {
    let c = case(EncoderConfig::default(), 4, 6);
    let tape = Tape::new();
    let out = encode_batch(&c.cfg, &c.params.bind(&tape), tape.constant(c.patches.clone()), &c.ids).unwrap();
    let d = c.cfg.proj_dim;
    for v in [out.v_proj, out.t_proj, out.r_proj, out.z_proj] {
        for row in v.value().data().chunks(d) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let c = case(oracle_config(), 2, 8);
    let run = || {
        let tape = Tape::new();
        let out = encode_batch(&c.cfg, &c.params.bind(&tape), tape.constant(c.patches.clone()), &c.ids).unwrap();
        (out.r_proj.value().data().to_vec(), out.w_text.value().data().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn init_depends_only_on_seed() {
    let cfg = oracle_config();
    assert_eq!(init_params(&cfg, 3, 1).unwrap(), init_params(&cfg, 3, 1).unwrap());
    assert_ne!(init_params(&cfg, 3, 1).unwrap(), init_params(&cfg, 3, 2).unwrap());
    let protos = init_params(&cfg, 3, 1).unwrap();
    assert_eq!(protos.get(PROTOTYPES).unwrap().shape(), &[3, cfg.proj_dim]);
}

#[test]
fn tokens_are_permutation_equivariant_without_positions() {
    let mut c = case(oracle_config(), 1, 12);
    for name in ["image.pos", "text.pos"] {
        c.params.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let perm = [2usize, 0, 3, 1];
    let (s, pd) = (c.cfg.visual_tokens, c.cfg.patch_dim);
    let mut permuted = c.patches.clone();
    for (dst, &src) in perm.iter().enumerate() {
        let row = c.patches.data()[src * pd..(src + 1) * pd].to_vec();
        permuted.data_mut()[dst * pd..(dst + 1) * pd].copy_from_slice(&row);
    }
    let run = |patches: &Tensor| {
        let tape = Tape::new();
        let out = encode_batch(&c.cfg, &c.params.bind(&tape), tape.constant(patches.clone()), &c.ids).unwrap();
        (
            out.r.value().data().to_vec(),
            out.w_visual.value().data().to_vec(),
            out.v_global.value().data().to_vec(),
        )
    };
    let (r0, w0, g0) = run(&c.patches);
    let (r1, w1, g1) = run(&permuted);
    let w = c.cfg.width;
    for (dst, &src) in perm.iter().enumerate() {
        assert!(max_abs_diff(&r1[dst * w..(dst + 1) * w], &r0[src * w..(src + 1) * w]) < 1e-10);
        assert!((w1[dst] - w0[src]).abs() < 1e-10);
    }
    assert!(max_abs_diff(&g0, &g1) < 1e-10);
    assert_eq!(s, perm.len());
}

#[test]
fn zero_head_maps_every_input_to_the_same_constant() {
    let mut p = init_params(&oracle_config(), 3, 3).unwrap();
    for name in ["head.image_global.fc1.w", "head.image_global.fc1.b", "head.image_global.fc2.w"] {
        p.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let bias = p.get("head.image_global.fc2.b").unwrap().data().to_vec();
    let norm = bias.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tape = Tape::new();
    let x = tape.constant(Lcg(5).tensor(&[6, 8]));
    let out = project(&p.bind(&tape), "image_global", x).unwrap();
    for row in out.value().data().chunks(bias.len()) {
        let want: Vec<f64> = bias.iter().map(|b| b / norm).collect();
        assert!(max_abs_diff(row, &want) < 1e-12);
    }
}

#[test]
fn encoder_rejects_bad_input() {
    let c = case(oracle_config(), 2, 1);
    let tape = Tape::new();
    let p = c.params.bind(&tape);
    let mut ids = c.ids.clone();
    ids[0] = c.cfg.vocab_size;
    assert!(encode_batch(&c.cfg, &p, tape.constant(c.patches.clone()), &ids).is_err());
    let wrong = tape.constant(Tensor::zeros([2, c.cfg.visual_tokens + 1, c.cfg.patch_dim]));
    assert!(encode_batch(&c.cfg, &p, wrong, &c.ids).is_err());
    assert!(EncoderConfig { heads: 3, ..oracle_config() }.validate().is_err());
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let cfg = EncoderConfig { depth: 1, ..oracle_config() };
    let c = case(cfg.clone(), 2, 21);
    let names = c.params.names().to_vec();
    let probe = Lcg(77).tensor(&[2, cfg.proj_dim]);
    let probe_z = Lcg(78).tensor(&[2, cfg.text_tokens, cfg.proj_dim]);
    let report = grad_check(
        |tape, vars| {
            let p = Bound::new(&names, vars);
            let out = encode_batch(&cfg, &p, tape.constant(c.patches.clone()), &c.ids).map_err(tensor_err)?;
            let a = out.v_proj.mul(tape.constant(probe.clone()))?.sum();
            let b = out.z_proj.mul(tape.constant(probe_z.clone()))?.sum();
            let w = out.w_visual.mul(out.w_visual)?.sum();
            Ok(a.add(b)?.add(w)?)
        },
        c.params.tensors(),
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert!(names.iter().any(|n| n.ends_with("attn.k.w")));
    assert!(!names.iter().any(|n| n.ends_with("attn.k.b")));
}
