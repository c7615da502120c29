use rand::Rng;

use super::*;
use crate::numeric::Tensor;
use crate::rng;
use crate::token_codec::{TokenStreams, CAPTION_LEN};

fn cfg() -> PsiDitConfig {
    PsiDitConfig::default()
}

fn small() -> PsiDitConfig {
    PsiDitConfig { depth: 2, width: 16, heads: 2, image_size: 8, ..Default::default() }
}

fn gaussian(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn streams(cfg: &PsiDitConfig, b: usize, kept: usize, seed: u64) -> (TokenStreams, Vec<f64>) {
    let mut r = rng::stream(seed, "psi-test", 0);
    let (nn, w) = (cfg.tokens(), cfg.token_width());
    let text = (0..b * CAPTION_LEN).map(|_| r.random_range(0..24)).collect();
    let noise = gaussian(&mut r, &[b * nn, w]);
    let lr = gaussian(&mut r, &[b * nn, w]);
    let idx = rand::seq::index::sample(&mut r, nn, kept).into_vec();
    let mut idx = idx;
    idx.sort_unstable();
    let taus = (0..b).map(|_| r.random::<f64>()).collect();
    (TokenStreams::new(text, noise, &lr, vec![idx; b]).unwrap(), taus)
}

fn stream_count(d: usize, m: usize) -> usize {
    (d * 6 * d + 6 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (d * m * d + m * d) + (m * d * d + d)
}

fn base_count(c: &PsiDitConfig) -> usize {
    let (d, w, m) = (c.width, c.token_width(), c.mlp_ratio);
    (w * d + d) + c.tokens() * d + c.vocab_size * d + c.caption_len * d
        + 2 * (d * d + d)
        + c.depth * 2 * stream_count(d, m)
        + (d * 2 * d + 2 * d)
        + (d * w + w)
}

#[test]
fn base_init_is_seeded_finite_and_counted() {
    let c = cfg();
    let a = init_base(&c, 3).unwrap();
    assert_eq!(a, init_base(&c, 3).unwrap());
    assert!(a.all_finite());
    assert_eq!(count_params(&a, false), base_count(&c));
    assert_eq!(count_params(&a, true), base_count(&c));
    assert_eq!(count_params(&ParamStore::<f32>::new(), false), 0);
}

#[test]
fn branch_counts_match_closed_form() {
    let c = cfg();
    let (d, w, m) = (c.width, c.token_width(), c.mlp_ratio);
    let base = init_base(&c, 0).unwrap();
    let sscm = init_sscm_from_base(&base, &c, 0).unwrap();
    let per_block = (d * 2 * d + 2 * d) + (d * 3 * d + 3 * d) + stream_count(d, m) + (d * d + d);
    assert_eq!(count_params(&sscm, true), (w * d + d) + c.depth * per_block);
    let ctrl = init_controlnet(&base, &c, 0).unwrap();
    assert_eq!(count_params(&ctrl, true), c.depth * (2 * stream_count(d, m) + d * d + d));
    assert!(count_params(&sscm, true) < count_params(&ctrl, true));
}

#[test]
fn copy_policies_are_bit_copies() {
    let base = init_base(&cfg(), 1).unwrap();
    for (policy, src) in [(InitPolicy::NlbCopy, "noise"), (InitPolicy::TebCopy, "text")] {
        let c = PsiDitConfig { sscm_init_policy: policy, ..cfg() };
        let s = init_sscm_from_base(&base, &c, 0).unwrap();
        for i in 0..c.depth {
            for leaf in names::STREAM_LEAVES {
                let a = s.tensor(&names::sscm(i, &format!("lr.{leaf}"))).unwrap();
                assert!(a.bit_eq(base.tensor(&names::block(i, src, leaf)).unwrap()), "{policy:?} {i} {leaf}");
            }
            let q = s.tensor(&names::sscm(i, "noise.qkv.w")).unwrap();
            assert!(q.bit_eq(base.tensor(&names::block(i, "noise", "qkv.w")).unwrap()));
            assert!(s.tensor(&names::sscm(i, "merge.w")).unwrap().data().iter().all(|&v| v == 0.0));
        }
        assert!(s.iter().all(|(n, p)| p.trainable && n.starts_with("sscm.")));
    }
}

#[test]
fn random_policy_depends_on_seed_and_zero_init_flag() {
    let base = init_base(&cfg(), 1).unwrap();
    let c = PsiDitConfig { sscm_init_policy: InitPolicy::Random, ..cfg() };
    let a = init_sscm_from_base(&base, &c, 1).unwrap();
    let b = init_sscm_from_base(&base, &c, 2).unwrap();
    let n = names::sscm(0, "lr.qkv.w");
    assert!(!a.tensor(&n).unwrap().bit_eq(b.tensor(&n).unwrap()));
    let off = PsiDitConfig { enable_zero_init: false, ..c };
    let z = init_sscm_from_base(&base, &off, 1).unwrap();
    assert!(z.tensor(&names::sscm(0, "merge.w")).unwrap().data().iter().any(|&v| v != 0.0));
}

#[test]
fn init_rejects_depth_mismatch() {
    let base = init_base(&cfg(), 0).unwrap();
    let deeper = PsiDitConfig { depth: 5, ..cfg() };
    assert!(matches!(init_sscm_from_base(&base, &deeper, 0), Err(crate::Error::MissingParam(_))));
    let shallower = PsiDitConfig { depth: 3, ..cfg() };
    assert!(init_controlnet(&base, &shallower, 0).is_err());
    assert!(PsiDitConfig { heads: 5, ..cfg() }.validate().is_err());
}

#[test]
fn zero_init_forward_matches_base() {
    let c = small();
    let base = init_base(&c, 4).unwrap();
    let mut psi = base.clone();
    psi.extend(init_sscm_from_base(&base, &c, 4).unwrap()).unwrap();
    let ctrl = init_controlnet(&base, &c, 4).unwrap();
    for draw in 0..3 {
        let (s, taus) = streams(&c, 2, 3, draw);
        let b = base_forward(&c, &s, &taus, &base).unwrap();
        assert_eq!(b.shape(), [2, c.tokens(), c.token_width()]);
        assert!(psi_dit_forward(&c, &s, &taus, &psi).unwrap().max_abs_diff(&b) < 1e-6);
        assert!(controlnet_forward(&c, &s, &taus, &base, &ctrl).unwrap().max_abs_diff(&b) < 1e-6);
    }
}

#[test]
fn full_mask_ignores_lr_content() {
    let c = small();
    let base = init_base(&c, 5).unwrap();
    let mut psi = base.clone();
    let off = PsiDitConfig { enable_zero_init: false, ..c.clone() };
    psi.extend(init_sscm_from_base(&base, &off, 5).unwrap()).unwrap();
    let (a, taus) = streams(&c, 2, 0, 1);
    let (mut b, _) = streams(&c, 2, 0, 2);
    b.text = a.text.clone();
    b.noise = a.noise.clone();
    let va = psi_dit_forward(&c, &a, &taus, &psi).unwrap();
    assert!(va.bit_eq(&psi_dit_forward(&c, &b, &taus, &psi).unwrap()));
    assert!(psi_dit_forward(&c, &a, &taus, &base).is_err());
}

#[test]
fn mmdit_text_values_only_reach_noise_through_v() {
    let c = small();
    let d = c.width;
    let mut p = init_base(&c, 6).unwrap();
    // Zero the text keys so text content can only act through its values.
    for leaf in ["qkv.w", "qkv.b"] {
        let t = p.get_mut(&names::block(0, "text", leaf)).unwrap();
        let cols = 3 * d;
        for (k, v) in t.tensor.data_mut().iter_mut().enumerate() {
            if (d..2 * d).contains(&(k % cols)) {
                *v = 0.0;
            }
        }
    }
    let mut r = rng::stream(0, "mmdit-test", 0);
    let (nn, nt) = (c.tokens(), CAPTION_LEN);
    let noise = gaussian(&mut r, &[1, nn, d]);
    let cond = gaussian(&mut r, &[1, d]);
    let t1 = gaussian(&mut r, &[1, nt, d]);
    let t2 = gaussian(&mut r, &[1, nt, d]);
    let (o1t, n1) = mmdit_block(&c, &p, 0, &t1, &noise, &cond).unwrap();
    let (_, n2) = mmdit_block(&c, &p, 0, &t2, &noise, &cond).unwrap();
    assert_eq!(o1t.shape(), t1.shape());
    assert!(n1.max_abs_diff(&n2) > 1e-4);

    for leaf in ["qkv.w", "qkv.b"] {
        let t = p.get_mut(&names::block(0, "text", leaf)).unwrap();
        let cols = 3 * d;
        for (k, v) in t.tensor.data_mut().iter_mut().enumerate() {
            if k % cols >= 2 * d {
                *v = 0.0;
            }
        }
    }
    let (_, n1) = mmdit_block(&c, &p, 0, &t1, &noise, &cond).unwrap();
    let (_, n2) = mmdit_block(&c, &p, 0, &t2, &noise, &cond).unwrap();
    assert!(n1.bit_eq(&n2));
}

#[test]
fn sscm_block_edge_cases() {
    let c = small();
    let d = c.width;
    let base = init_base(&c, 7).unwrap();
    let on = init_sscm_from_base(&base, &c, 7).unwrap();
    let off = init_sscm_from_base(&base, &PsiDitConfig { enable_zero_init: false, ..c.clone() }, 7).unwrap();
    let mut r = rng::stream(0, "sscm-test", 0);
    let noise = gaussian(&mut r, &[2, c.tokens(), d]);
    let lr = gaussian(&mut r, &[2, 3, d]);
    let cond = gaussian(&mut r, &[2, d]);

    let (delta, lr_out) = sscm_block(&c, &on, 0, &noise, &lr, &cond).unwrap();
    assert!(delta.data().iter().all(|&v| v == 0.0));
    assert_eq!(delta.shape(), noise.shape());
    assert_eq!(lr_out.shape(), lr.shape());

    let empty = Tensor::zeros(&[2, 0, d]);
    let (d1, l1) = sscm_block(&c, &off, 0, &noise, &empty, &cond).unwrap();
    assert_eq!(l1.shape(), [2, 0, d]);
    // With no LR tokens the delta is a function of the noise tokens alone.
    let mut noise2 = noise.clone();
    noise2.data_mut()[0] += 0.5;
    let (d2, _) = sscm_block(&c, &off, 0, &noise2, &empty, &cond).unwrap();
    assert!(d1.max_abs_diff(&d2) > 0.0);
    let (d3, _) = sscm_block(&c, &off, 0, &noise, &empty, &cond).unwrap();
    assert!(d1.bit_eq(&d3));
    assert!(sscm_block(&c, &off, 0, &noise, &Tensor::zeros(&[2, 3, d + 1]), &cond).is_err());
}

#[test]
fn controlnet_rejects_deeper_replica() {
    let c = small();
    let base = init_base(&c, 8).unwrap();
    let deep = PsiDitConfig { depth: 3, ..c.clone() };
    let replica = init_controlnet(&init_base(&deep, 8).unwrap(), &deep, 8).unwrap();
    let (s, taus) = streams(&c, 1, 2, 0);
    assert!(controlnet_forward(&c, &s, &taus, &base, &replica).is_err());
}
