mod common;

use candle_core::{DType, Device, Tensor, Var};
use object_novelty::defend::{
    align_crop, cosine_map, dense_loss, project, sinkhorn, sinkhorn_assign, CropGeometry, CropSampler, DefendConfig,
    DefendTrainer, Matrix, PrototypeBank, SimilarityLogits, SinkhornConfig,
};
use object_novelty::runner::RunConfig;
use object_novelty::dataset::Image;

use common::*;

fn t64(data: &[f64], shape: (usize, usize)) -> Tensor {
    Tensor::from_slice(data, shape, &Device::Cpu).unwrap()
}

fn unit_rows(data: &mut [f64], d: usize) {
    for r in data.chunks_mut(d) {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter_mut().for_each(|v| *v /= n);
    }
}

#[test]
fn cosine_map_matches_dot_products() {
    let mut z = vec![0.3, -1.2, 0.5, 0.9, 0.1, 0.0, 2.0, -0.4];
    let mut p = vec![1.0, 0.0, 0.0, 0.0, 0.2, 0.7, -0.1, 0.4, -0.5, -0.5, 0.5, 0.5];
    unit_rows(&mut z, 4);
    unit_rows(&mut p, 4);
    let s = cosine_map(&t64(&z, (2, 4)), &t64(&p, (3, 4))).unwrap();
    let got = s.tensor().to_vec2::<f64>().unwrap();
    for i in 0..2 {
        for k in 0..3 {
            let want: f64 = (0..4).map(|j| z[i * 4 + j] * p[k * 4 + j]).sum();
            assert!((got[i][k] - want).abs() < 1e-6);
        }
    }
}

#[test]
fn dense_loss_hand_case() {
    let s = SimilarityLogits(t64(&[0.5, 0.0, -0.5, 0.0, 0.5, 0.0], (2, 3)));
    let target = t64(&[0.7, 0.2, 0.1, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], (2, 3));
    let got = dense_loss(&s, &target, 0.1).unwrap().to_scalar::<f64>().unwrap();
    let ce = |logits: [f64; 3], t: [f64; 3]| -> f64 {
        let z: f64 = logits.iter().map(|l| (l / 0.1).exp()).sum();
        -(0..3).map(|k| t[k] * ((logits[k] / 0.1).exp() / z).ln()).sum::<f64>()
    };
    let want = (ce([0.5, 0.0, -0.5], [0.7, 0.2, 0.1]) + ce([0.0, 0.5, 0.0], [1.0 / 3.0; 3])) / 2.0;
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

fn loss_of(z: &Tensor, p: &Tensor, target: &Tensor) -> f64 {
    dense_loss(&cosine_map(z, p).unwrap(), target, 0.1).unwrap().to_scalar::<f64>().unwrap()
}

#[test]
fn gradients_match_central_differences() {
    let mut z0 = vec![0.6, -0.2, 0.3, 0.7, -0.5, 0.1, 0.4, 0.2, 0.9, -0.3];
    let mut p0 = vec![0.1, 0.8, -0.2, 0.3, 0.4, -0.6, 0.2, 0.5, 0.3, -0.1, 0.7, 0.1, -0.4, 0.2, 0.6];
    unit_rows(&mut z0, 5);
    unit_rows(&mut p0, 5);
    let target = t64(&[0.6, 0.3, 0.1, 0.2, 0.2, 0.6], (2, 3));
    let z = Var::from_tensor(&t64(&z0, (2, 5))).unwrap();
    let p = Var::from_tensor(&t64(&p0, (3, 5))).unwrap();
    let loss = dense_loss(&cosine_map(z.as_tensor(), p.as_tensor()).unwrap(), &target, 0.1).unwrap();
    let grads = loss.backward().unwrap();
    let gz: Vec<f64> = grads.get(z.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let gp: Vec<f64> = grads.get(p.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();

    let h = 1e-4;
    let check = |analytic: &[f64], base: &[f64], which: u8| {
        let scale = analytic.iter().map(|g| g.abs()).fold(0.0, f64::max);
        for i in 0..base.len() {
            let eval = |delta: f64| {
                let mut v = base.to_vec();
                v[i] += delta;
                if which == 0 {
                    loss_of(&t64(&v, (2, 5)), &t64(&p0, (3, 5)), &target)
                } else {
                    loss_of(&t64(&z0, (2, 5)), &t64(&v, (3, 5)), &target)
                }
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-3 * scale);
            assert!(rel < 1e-4, "entry {i}: analytic {} numeric {numeric} rel {rel}", analytic[i]);
        }
    };
    check(&gz, &z0, 0);
    check(&gp, &p0, 1);
}

#[test]
fn target_has_no_gradient_path() {
    let s_var = Var::from_tensor(&t64(&[0.2, -0.1, 0.4, 0.3, 0.0, -0.2], (2, 3))).unwrap();
    let t_var = Var::from_tensor(&t64(&[0.5, 0.3, 0.2, 0.1, 0.1, 0.8], (2, 3))).unwrap();
    // The target is derived from a tracked variable on purpose.
    let target = (t_var.as_tensor() * 1.0).unwrap();
    let loss = dense_loss(&SimilarityLogits(s_var.as_tensor().clone()), &target, 0.1).unwrap();
    let grads = loss.backward().unwrap();
    assert!(grads.get(s_var.as_tensor()).is_some());
    assert!(grads.get(t_var.as_tensor()).is_none());

    // Sinkhorn assignments are plain data: perturbing the features they were
    // computed from cannot reach the loss through them.
    let z = Var::from_tensor(&Tensor::randn(0f32, 1.0, (6, 4), &Device::Cpu).unwrap()).unwrap();
    let zn = z.as_tensor().broadcast_div(&z.as_tensor().sqr().unwrap().sum_keepdim(1).unwrap().sqrt().unwrap()).unwrap();
    let p = PrototypeBank::new(3, 4, 1, &Device::Cpu).unwrap();
    let q = sinkhorn_assign(&zn, &p, &SinkhornConfig::default()).unwrap().q;
    let t = Tensor::from_vec(q.data.iter().map(|&v| v as f32).collect::<Vec<_>>(), (6, 3), &Device::Cpu).unwrap();
    let loss = dense_loss(&SimilarityLogits(Tensor::zeros((6, 3), DType::F32, &Device::Cpu).unwrap()), &t, 0.1).unwrap();
    let grads = loss.backward().unwrap();
    assert!(grads.get(z.as_tensor()).is_none());
    assert!(grads.get(p.tensor()).is_none());
}

#[test]
fn symmetric_scores_approach_permutation() {
    let cfg = SinkhornConfig {
        iterations: 10_000,
        epsilon: 0.05,
        tolerance: Some(1e-9),
    };
    let a = sinkhorn(&Matrix::new(2, 2, vec![1.0, -1.0, -1.0, 1.0]), &cfg).unwrap();
    assert!(a.q.data[0] > 0.99 && a.q.data[3] > 0.99);
}

#[test]
fn half_patch_offset_crop_matches_bilinear_oracle() {
    // 4×4 source grid of 8-px patches, linear ramps in two channels.
    let q = Matrix::new(16, 2, (0..16).flat_map(|i| [(i % 4) as f64, (i / 4) as f64 * 2.0 + 1.0]).collect());
    let geom = CropGeometry {
        x0: 4,
        y0: 4,
        w: 16,
        h: 16,
        source: (32, 32),
        patch: 8,
        resize_to: 16,
    };
    let got = align_crop(&q, &geom).unwrap();
    let (gr, gc) = geom.crop_grid();
    assert_eq!((gr, gc), (2, 2));
    // Oracle: sample the patch-center field of q at each crop patch center,
    // in source patch coordinates, by bilinear interpolation with clamping.
    let field = |x: f64, y: f64, ch: usize| -> f64 {
        let cx = (x - 0.5).clamp(0.0, 3.0);
        let cy = (y - 0.5).clamp(0.0, 3.0);
        let (x0, y0) = (cx.floor() as usize, cy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(3), (y0 + 1).min(3));
        let (fx, fy) = (cx - x0 as f64, cy - y0 as f64);
        let v = |r: usize, c: usize| q.data[(r * 4 + c) * 2 + ch];
        (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1))
    };
    for r in 0..gr {
        for c in 0..gc {
            // Crop patch centre in source patch units.
            let x = (geom.x0 as f64 + (c as f64 + 0.5) * geom.w as f64 / gc as f64) / 8.0;
            let y = (geom.y0 as f64 + (r as f64 + 0.5) * geom.h as f64 / gr as f64) / 8.0;
            let w = [field(x, y, 0), field(x, y, 1)];
            let s = w[0] + w[1];
            for ch in 0..2 {
                // Interpolated rows are renormalized to sum to one.
                let want = w[ch] / s;
                let g = got.data[(r * gc + c) * 2 + ch];
                assert!((g - want).abs() <= 1e-6, "({r},{c},{ch}): {g} vs {want}");
            }
        }
    }
}

fn toy_defend_config() -> DefendConfig {
    RunConfig::toy().defend
}

#[test]
fn identical_images_get_identical_losses() {
    let imgs = glyph_images(1, (1, 3), 3);
    let trainer = DefendTrainer::new(toy_backbone(1), 4, toy_defend_config(), 9).unwrap();
    let crop = trainer.crop_for(0, &imgs[0]);
    let (per, _) = trainer.loss_terms(&[&imgs[0], &imgs[0]], &[crop.clone(), crop]).unwrap();
    let v = per.to_vec1::<f32>().unwrap();
    assert_eq!(v[0], v[1]);
}

#[test]
fn full_crop_equals_self_consistency_loss() {
    let mut cfg = toy_defend_config();
    cfg.crop = CropSampler {
        scale: (1.0, 1.0),
        ratio: (1.0, 1.0),
        resize_to: 64,
    };
    let imgs = glyph_images(2, (1, 2), 6);
    let trainer = DefendTrainer::new(toy_backbone(2), 4, cfg.clone(), 3).unwrap();
    let crops: Vec<CropGeometry> = imgs.iter().enumerate().map(|(i, im)| trainer.crop_for(i, im)).collect();
    for c in &crops {
        assert_eq!(c, &CropGeometry::full(64, 64, 8, 64));
    }
    let refs: Vec<&Image> = imgs.iter().collect();
    let (per, _) = trainer.loss_terms(&refs, &crops).unwrap();
    let got = per.mean_all().unwrap().to_scalar::<f32>().unwrap() as f64;

    // Feed the same batch twice: once for the balanced target, once for the
    // prediction.
    let x = batch(&imgs);
    let z = project(&trainer.backbone.encode(&x, None).unwrap(), &trainer.head).unwrap();
    let (b, n, d) = z.dims3().unwrap();
    let q = sinkhorn_assign(&z.reshape((b * n, d)).unwrap(), &trainer.prototypes, &cfg.sinkhorn).unwrap().q;
    let t = Tensor::from_vec(q.data.iter().map(|&v| v as f32).collect::<Vec<_>>(), (b, n, 4), &Device::Cpu).unwrap();
    let want = dense_loss(&cosine_map(&z, trainer.prototypes.tensor()).unwrap(), &t, cfg.temperature)
        .unwrap()
        .to_scalar::<f32>()
        .unwrap() as f64;
    assert!((got - want).abs() < 1e-5, "{got} vs {want}");
}

#[test]
fn training_lowers_loss_and_keeps_contracts() {
    let imgs = glyph_images(32, (1, 2), 21);
    let cfg = toy_defend_config();
    let mut trainer = DefendTrainer::new(toy_backbone(5), 4, cfg, 17).unwrap();
    let frozen = trainer.backbone.frozen_checksum().unwrap();
    let refs: Vec<&Image> = imgs.iter().collect();
    let fixed: Vec<CropGeometry> = imgs.iter().enumerate().map(|(i, im)| trainer.crop_for(i, im)).collect();
    let eval = |t: &DefendTrainer| {
        let (per, _) = t.loss_terms(&refs, &fixed).unwrap();
        per.mean_all().unwrap().to_scalar::<f32>().unwrap()
    };
    let before = eval(&trainer);
    for step in 0..20 {
        let lo = (step * 16) % 32;
        trainer.step(&refs[lo..lo + 16]).unwrap();
        for n in trainer.prototypes.row_norms().unwrap() {
            assert!((n - 1.0).abs() <= 1e-6, "prototype norm {n} after step {step}");
        }
    }
    let after = eval(&trainer);
    assert!(after < before, "loss {before} -> {after}");
    assert_eq!(trainer.backbone.frozen_checksum().unwrap(), frozen);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = glyph_images(4, (1, 2), 2);
    let refs: Vec<&Image> = imgs.iter().collect();
    let mut a = DefendTrainer::new(toy_backbone(5), 3, toy_defend_config(), 1).unwrap();
    a.step(&refs).unwrap();
    let path = dir.path().join("stage1.safetensors");
    a.save(&path).unwrap();
    let mut b = DefendTrainer::new(toy_backbone(6), 3, toy_defend_config(), 1).unwrap();
    b.load(&path).unwrap();
    assert_eq!(a.backbone.checksum().unwrap(), b.backbone.checksum().unwrap());
    let crops: Vec<CropGeometry> = imgs.iter().enumerate().map(|(i, im)| a.crop_for(i, im)).collect();
    let la = a.loss_terms(&refs, &crops).unwrap().0.to_vec1::<f32>().unwrap();
    let lb = b.loss_terms(&refs, &crops).unwrap().0.to_vec1::<f32>().unwrap();
    assert_eq!(la, lb);
}
