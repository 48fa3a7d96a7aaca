//! Finite-difference checks of the composite objectives used by search
//! and training.

mod common;

use diffcore::gradcheck::{check_input, check_params};
use diffcore::{Ctx, Linear, Mode, Module, ParamStore, Tensor};
use patchdesign::designcvae::{DesignCvae, DesignNormalizer};
use patchdesign::emodel::DesignParams;
use patchdesign::nets::CurveDecoder;
use patchdesign::respvae::{Normalizer, RespVae};
use patchdesign::tto::{penalty, penalty_var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rand_vec(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

#[test]
fn penalty_through_design_decoder() {
    let norm = Normalizer { mean: -1.0, std: 2.0 };
    // Centre the design scale on the feasibility boundary so every term
    // of the penalty is active for some rows.
    let dn = DesignNormalizer {
        mean: [0.5, 0.5, -0.25],
        std: [1.0, 1.0, 1.0],
    };
    // Untrained decoders may land wholly inside the feasible set; keep
    // drawing until five instances exercise the penalty.
    let mut checked = 0;
    for seed in 0..50 {
        if checked == 5 {
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cvae = DesignCvae::new(&common::cvae_config(0.1), &common::arch(), norm, dn, seed).unwrap();
        let b = 6;
        let z = Tensor::new([b, 3], rand_vec(b * 3, 2.0, &mut rng)).unwrap();
        let emb = Tensor::new(
            [b, common::arch().latent],
            rand_vec(b * common::arch().latent, 1.0, &mut rng),
        )
        .unwrap();
        let build = |cx: &mut Ctx<'_>, zv| {
            let e = cx.input(&emb);
            let x = cvae
                .decode_design_var(cx, zv, e)
                .map_err(|e| diffcore::Error::Invalid(e.to_string()))?;
            penalty_var(cx, x).map_err(|e| diffcore::Error::Invalid(e.to_string()))
        };
        // the graph value equals the scalar definition row by row
        let mut cx = Ctx::new(cvae.store(), Mode::Eval, 0);
        let zv = cx.input(&z);
        let e = cx.input(&emb);
        let x = cvae.decode_design_var(&mut cx, zv, e).unwrap();
        let expect: f64 = cx
            .graph
            .value(x)
            .chunks(3)
            .map(|r| penalty(&DesignParams::new(r[0], r[1], r[2])))
            .sum();
        let p = penalty_var(&mut cx, x).unwrap();
        assert!((cx.graph.value(p)[0] - expect).abs() <= 1e-12 * expect.max(1.0));
        if expect == 0.0 {
            continue;
        }
        checked += 1;

        let err = check_input(cvae.store(), &z, Mode::Eval, &build).unwrap();
        assert!(err < TOL, "instance {seed}: relative error {err}");
    }
    assert_eq!(checked, 5, "too few instances with an active penalty");
}

#[test]
fn masked_latent_objective_through_curve_decoder() {
    let grid = common::grid();
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
        let vae = RespVae::new(&common::arch(), grid, Normalizer { mean: -1.0, std: 2.0 }, seed).unwrap();
        let z = Tensor::new(
            [2, common::arch().latent],
            rand_vec(2 * common::arch().latent, 1.0, &mut rng),
        )
        .unwrap();
        let target: Vec<f64> = rand_vec(2 * common::N, 1.0, &mut rng);
        let mask: Vec<f64> = (0..common::N)
            .map(|i| if (20..40).contains(&i) { 1.0 } else { 0.0 })
            .collect();
        let err = check_input(vae.store(), &z, Mode::Eval, &|cx, zv| {
            let y = vae
                .decode_var(cx, zv)
                .map_err(|e| diffcore::Error::Invalid(e.to_string()))?;
            let data = cx.graph.weighted_sq_err(y, &target, &mask, 1.0)?;
            let z2 = cx.graph.square(zv);
            let s = cx.graph.sum(z2);
            let reg = cx.graph.scale(s, 1e-3);
            cx.graph.add(data, reg)
        })
        .unwrap();
        assert!(err < TOL, "instance {seed}: relative error {err}");
    }
}

#[test]
fn two_channel_decoder_nll_parameters() {
    let arch = common::arch();
    let n = arch.n;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(20 + seed);
        let mut ps = ParamStore::new();
        let input = Linear::new(&mut ps, "map", 3, arch.latent, &mut rng).unwrap();
        let dec = CurveDecoder::new(&mut ps, "dec.", &arch, arch.latent, 2, &mut rng).unwrap();
        let x = Tensor::new([3, 3], rand_vec(9, 1.0, &mut rng)).unwrap();
        let target = rand_vec(3 * n, 1.0, &mut rng);
        let mut ids = input.param_ids();
        ids.extend(dec.param_ids());
        // β = 0: the variance weight is a detached factor, so differentiating
        // through it numerically would test a different function.
        let errs = check_params(&mut ps, &ids, Mode::Train, &|cx| {
            let xv = cx.input(&x);
            let h = input.forward(cx, xv)?;
            let y = dec
                .forward_flat(cx, h)
                .map_err(|e| diffcore::Error::Invalid(e.to_string()))?;
            let mu = cx.graph.slice_last(y, 0, n)?;
            let lv = cx.graph.slice_last(y, n, n)?;
            let var = cx.graph.exp_floor(lv, 1e-6);
            cx.graph.beta_nll(mu, var, &target, 0.0)
        })
        .unwrap();
        for (name, e) in errs {
            assert!(e < TOL, "instance {seed}, {name}: relative error {e}");
        }
    }
}
