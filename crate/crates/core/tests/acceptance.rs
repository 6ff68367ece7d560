//! Acceptance checks. Runs every criterion, prints one line each and exits
//! nonzero if any of them failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use object_novelty::dataset::Image;
use object_novelty::defend::{align_crop, cosine_map, dense_loss, sinkhorn, CropGeometry, Matrix, SinkhornConfig};
use object_novelty::encoder::{AttentionSaliency, BackboneHandle, ImageTensor, TokenSet, VitConfig};
use object_novelty::mkd::{build_mask, distill_features, DistillConfig, MaskMode, MaskPlan};
use object_novelty::runner::{run_experiment, DataSource, DefendToggle, ResultTable, RunConfig};
use object_novelty::scoring::{auroc, Label, NoveltyRecord};
use object_novelty::splits::{MembershipRule, SplitSpec, SyntheticSceneSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

enum Verdict {
    Pass(String),
    Fail(String),
    Skipped(String),
}

type Check = fn(&mut Shared) -> Verdict;

/// State reused between checks: the pretrained toy teacher.
#[derive(Default)]
struct Shared {
    work: Option<tempfile::TempDir>,
    teacher: Option<PathBuf>,
}

impl Shared {
    fn dir(&mut self, name: &str) -> PathBuf {
        let root = self.work.get_or_insert_with(|| tempfile::tempdir().expect("temp dir"));
        root.path().join(name)
    }
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn main() {
    let checks: [(&str, Check); 10] = [
        ("full_scale_reproduction", full_scale),
        ("sinkhorn_oracle", sinkhorn_oracle),
        ("dense_loss_gradients", dense_loss_gradients),
        ("distillation_identities", distillation_identities),
        ("masking_contract", masking_contract),
        ("crop_alignment", crop_alignment),
        ("toy_single_object", toy_single_object),
        ("toy_multi_object", toy_multi_object),
        ("auroc_oracle", auroc_oracle),
        ("extended_vit_s16", extended),
    ];
    // Optional name filters, as with the default harness.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut shared = Shared::default();
    let mut failed = 0;
    for (name, check) in checks {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(|| check(&mut shared)))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Verdict::Fail(format!("panicked: {msg}"))
            });
        let secs = start.elapsed().as_secs_f64();
        match v {
            Verdict::Pass(d) => println!("PASS {name} ({secs:.1}s): {d}"),
            Verdict::Fail(d) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {d}");
            }
            Verdict::Skipped(d) => println!("SKIPPED {name}: {d}"),
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}

fn full_scale(_: &mut Shared) -> Verdict {
    Verdict::Skipped(
        "full-size backbones, pretrained weights and the natural-image benchmarks are not part of this build; \
         the property suite and the toy experiments below stand in"
            .into(),
    )
}

fn extended(_: &mut Shared) -> Verdict {
    Verdict::Skipped("hours-scale GPU run with a pretrained ViT-S/16; not attempted".into())
}

/// Log-domain scaling to a tight residual; independent of the library.
fn sinkhorn_reference(s: &[f64], n: usize, k: usize, eps: f64) -> (Vec<f64>, f64) {
    let lse = |v: &mut dyn Iterator<Item = f64>| -> f64 {
        let xs: Vec<f64> = v.collect();
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let (ln_n, ln_k) = ((n as f64).ln(), (k as f64).ln());
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; k];
    let mut residual = f64::INFINITY;
    for _ in 0..1_000_000 {
        for i in 0..n {
            f[i] = eps * (lse(&mut (0..k).map(|j| (s[i * k + j] - g[j]) / eps)) + ln_n);
        }
        for j in 0..k {
            g[j] = eps * (lse(&mut (0..n).map(|i| (s[i * k + j] - f[i]) / eps)) + ln_k);
        }
        // Columns are exact after the column update; measure rows.
        residual = (0..n)
            .map(|i| {
                let r: f64 = (0..k).map(|j| ((s[i * k + j] - f[i] - g[j]) / eps).exp()).sum();
                (r * n as f64 - 1.0).abs()
            })
            .fold(0.0, f64::max);
        if residual <= 1e-9 {
            break;
        }
    }
    let mut p: Vec<f64> = (0..n * k)
        .map(|idx| ((s[idx] - f[idx / k] - g[idx % k]) / eps).exp())
        .collect();
    for row in p.chunks_mut(k) {
        let t: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= t);
    }
    (p, residual)
}

fn unit_vectors(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn sinkhorn_oracle(_: &mut Shared) -> Verdict {
    let mut lib = 0.0;
    let mut max_iter = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = SinkhornConfig {
        iterations: 1_000_000,
        epsilon: 0.05,
        tolerance: Some(1e-9),
    };
    let (mut worst_row, mut worst_col, mut worst_diff, mut worst_ref) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.random_range(1..=32);
        let k = rng.random_range(1..=8);
        let d = 16;
        let z = unit_vectors(&mut rng, n, d);
        let p = unit_vectors(&mut rng, k, d);
        let s: Vec<f64> = (0..n * k)
            .map(|idx| (0..d).map(|c| z[idx / k][c] * p[idx % k][c]).sum())
            .collect();
        let t0 = Instant::now();
        let res = sinkhorn(&Matrix::new(n, k, s.clone()), &cfg);
        lib += t0.elapsed().as_secs_f64();
        let got = match res {
            Ok(a) => {
                max_iter = max_iter.max(a.iterations);
                a.q
            }
            Err(e) => return Verdict::Fail(format!("sinkhorn failed on {n}x{k}: {e}")),
        };
        for r in got.row_sums() {
            worst_row = worst_row.max((r - 1.0).abs());
        }
        let target = n as f64 / k as f64;
        for c in got.col_sums() {
            worst_col = worst_col.max((c - target).abs() / target);
        }
        let (want, res) = sinkhorn_reference(&s, n, k, 0.05);
        worst_ref = worst_ref.max(res);
        for (a, b) in got.data.iter().zip(&want) {
            worst_diff = worst_diff.max((a - b).abs());
        }
    }
    verdict(
        worst_row <= 1e-5 && worst_col <= 1e-3 && worst_diff <= 1e-4 && worst_ref <= 1e-9 && lib < 10.0,
        format!(
            "100 instances: row dev {worst_row:.1e}, column imbalance {worst_col:.1e}, max diff vs reference \
             {worst_diff:.1e} (reference residual {worst_ref:.1e}), library time {lib:.2}s, at most {max_iter} iterations"
        ),
    )
}

fn t64(data: &[f64], shape: (usize, usize)) -> Tensor {
    Tensor::from_slice(data, shape, &Device::Cpu).unwrap()
}

fn dense_loss_gradients(_: &mut Shared) -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 8;
    let z0: Vec<f64> = unit_vectors(&mut rng, 2, d).concat();
    let p0: Vec<f64> = unit_vectors(&mut rng, 3, d).concat();
    let target = t64(&[0.6, 0.3, 0.1, 0.15, 0.25, 0.6], (2, 3));
    let loss = |z: &[f64], p: &[f64]| -> f64 {
        dense_loss(&cosine_map(&t64(z, (2, d)), &t64(p, (3, d))).unwrap(), &target, 0.1)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    };
    let zv = Var::from_tensor(&t64(&z0, (2, d))).unwrap();
    let pv = Var::from_tensor(&t64(&p0, (3, d))).unwrap();
    let l = dense_loss(&cosine_map(zv.as_tensor(), pv.as_tensor()).unwrap(), &target, 0.1).unwrap();
    let grads = l.backward().unwrap();
    let flat = |v: &Var| -> Vec<f64> { grads.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap() };
    let (gz, gp) = (flat(&zv), flat(&pv));
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (analytic, which) in [(&gz, 0), (&gp, 1)] {
        let scale = analytic.iter().map(|g| g.abs()).fold(0.0, f64::max);
        for i in 0..analytic.len() {
            let eval = |delta: f64| {
                let (mut z, mut p) = (z0.clone(), p0.clone());
                if which == 0 {
                    z[i] += delta;
                } else {
                    p[i] += delta;
                }
                loss(&z, &p)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-3 * scale);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-4 && secs < 5.0,
        format!("2 patches, 3 prototypes: max relative error {worst:.2e}, {secs:.2}s"),
    )
}

fn token_set(data: Vec<f32>, b: usize, t: usize, d: usize) -> TokenSet {
    TokenSet::new(vec![Tensor::from_vec(data, (b, t, d), &Device::Cpu).unwrap()], true, (1, t - 1), None)
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn distillation_identities(_: &mut Shared) -> Verdict {
    let start = Instant::now();
    let cfg = DistillConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (b, t, d) = (2, 5, 12);
    let x: Vec<f32> = (0..b * t * d).map(|_| rng.random_range(-3.0..3.0)).collect();
    let same = scalar(&distill_features(&token_set(x.clone(), b, t, d), &token_set(x, b, t, d), &cfg).unwrap());

    // Tokens as orthogonal unit vectors: teacher e_j, student e_{j+t}.
    let (b, t, d) = (1, 4, 8);
    let mut te = vec![0.0f32; t * d];
    let mut st = vec![0.0f32; t * d];
    for j in 0..t {
        te[j * d + j] = 1.0;
        st[j * d + j + t] = 1.0;
    }
    let orth = scalar(&distill_features(&token_set(te, b, t, d), &token_set(st, b, t, d), &cfg).unwrap());

    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let b = rng.random_range(1..=4);
        let t = rng.random_range(2..=10);
        let d = rng.random_range(2..=32);
        let scale: f32 = 10f32.powf(rng.random_range(-2.0..2.0));
        let mut draw = || -> Vec<f32> { (0..b * t * d).map(|_| rng.random_range(-scale..scale)).collect() };
        let (a, c) = (draw(), draw());
        worst = worst.max(scalar(&distill_features(&token_set(a, b, t, d), &token_set(c, b, t, d), &cfg).unwrap()));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        same == 0.0 && (orth - 2.0).abs() <= 1e-6 && worst <= 4.0 && secs < 10.0,
        format!("identical {same}, orthogonal {orth:.7}, max over 1000 fixtures {worst:.4}, {secs:.2}s"),
    )
}

fn masked_mass(plan: &MaskPlan, sal: &AttentionSaliency) -> f64 {
    plan.keep
        .iter()
        .zip(&sal.weights)
        .filter(|(k, _)| !**k)
        .map(|(_, w)| *w as f64)
        .sum()
}

fn noise_batch(b: usize, size: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let imgs: Vec<Image> = (0..b)
        .map(|_| Image::new((0..3 * size * size).map(|_| rng.random_range(-1.0..1.0)).collect(), size, size))
        .collect();
    let refs: Vec<&Image> = imgs.iter().collect();
    object_novelty::dataset::to_batch(&refs, &Device::Cpu).unwrap()
}

fn best_of(reps: usize, mut f: impl FnMut()) -> Duration {
    (0..reps)
        .map(|_| {
            let s = Instant::now();
            f();
            s.elapsed()
        })
        .min()
        .unwrap()
}

fn masking_contract(_: &mut Shared) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 196;
    let mut exact = true;
    let mut dominated = true;
    for _ in 0..20 {
        let w: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal).exp()).collect();
        let sal = AttentionSaliency::normalized(w);
        let guided = build_mask(&sal, 0.5, MaskMode::Guided, 0).unwrap();
        exact &= guided.masked_count() == 98;
        let g = masked_mass(&guided, &sal);
        for seed in 0..1000 {
            let r = build_mask(&sal, 0.5, MaskMode::Random, seed).unwrap();
            exact &= r.masked_count() == 98;
            dominated &= masked_mass(&r, &sal) <= g + 1e-9;
        }
    }

    let vit = VitConfig::from_arch("vit_tiny16").unwrap();
    let b = BackboneHandle::random("vit_tiny16", vit, 1, &Device::Cpu).unwrap();
    let x = noise_batch(32, 224, 6);
    let plans: Vec<MaskPlan> = (0..32)
        .map(|i| {
            let w: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            build_mask(&AttentionSaliency::normalized(w), 0.5, MaskMode::Guided, i).unwrap()
        })
        .collect();
    let masked = b.encode(&x, Some(&plans)).unwrap();
    let tokens = masked.last().dims()[1];
    let full_t = best_of(2, || {
        b.encode(&x, None).unwrap();
    });
    let masked_t = best_of(2, || {
        b.encode(&x, Some(&plans)).unwrap();
    });
    verdict(
        exact && dominated && tokens == 99 && masked_t < full_t,
        format!(
            "98 of 196 masked: {exact}; guided beats 20x1000 random plans: {dominated}; student tokens {tokens}; \
             batch-32 forward {:.2}s full vs {:.2}s masked",
            full_t.as_secs_f64(),
            masked_t.as_secs_f64()
        ),
    )
}

/// Row-stochastic map whose rows sum to one exactly in binary.
fn dyadic_map(rows: usize, k: usize) -> Matrix {
    let mut data = Vec::with_capacity(rows * k);
    for i in 0..rows {
        let mut row = vec![0.0; k];
        row[i % k] = 0.5;
        row[(i + 1) % k] += 0.25;
        row[(i + 3) % k] += 0.25;
        data.extend(row);
    }
    Matrix::new(rows, k, data)
}

fn crop_alignment(_: &mut Shared) -> Verdict {
    let k = 5;
    let q = dyadic_map(64, k);
    let full = align_crop(&q, &CropGeometry::full(64, 64, 8, 64)).unwrap();
    let identity = full == q;

    // 16x16 crop at (8, 16) of a 32x32 image: source patches (2..4, 1..3).
    let q4 = dyadic_map(16, k);
    let geom = CropGeometry {
        x0: 8,
        y0: 16,
        w: 16,
        h: 16,
        source: (32, 32),
        patch: 8,
        resize_to: 16,
    };
    let sub = align_crop(&q4, &geom).unwrap();
    let mut selection = sub.rows == 4;
    for r in 0..2 {
        for c in 0..2 {
            selection &= sub.row(r * 2 + c) == q4.row((2 + r) * 4 + 1 + c);
        }
    }

    // Offset crop against bilinear sampling of the patch-centre field.
    let ramp = Matrix::new(16, 2, (0..16).flat_map(|i| [(i % 4) as f64 + 0.5, (i / 4) as f64 * 2.0 + 1.0]).collect());
    let geom = CropGeometry {
        x0: 5,
        y0: 3,
        w: 20,
        h: 24,
        source: (32, 32),
        patch: 8,
        resize_to: 16,
    };
    let got = align_crop(&ramp, &geom).unwrap();
    let (gr, gc) = geom.crop_grid();
    let field = |x: f64, y: f64, ch: usize| -> f64 {
        let cx = (x - 0.5).clamp(0.0, 3.0);
        let cy = (y - 0.5).clamp(0.0, 3.0);
        let (x0, y0) = (cx.floor() as usize, cy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(3), (y0 + 1).min(3));
        let (fx, fy) = (cx - x0 as f64, cy - y0 as f64);
        let v = |r: usize, c: usize| ramp.data[(r * 4 + c) * 2 + ch];
        (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1))
    };
    let mut worst = 0.0f64;
    for r in 0..gr {
        for c in 0..gc {
            let x = (geom.x0 as f64 + (c as f64 + 0.5) * geom.w as f64 / gc as f64) / 8.0;
            let y = (geom.y0 as f64 + (r as f64 + 0.5) * geom.h as f64 / gr as f64) / 8.0;
            let w = [field(x, y, 0), field(x, y, 1)];
            let s = w[0] + w[1];
            for ch in 0..2 {
                worst = worst.max((got.data[(r * gc + c) * 2 + ch] - w[ch] / s).abs());
            }
        }
    }
    verdict(
        identity && selection && worst <= 1e-6,
        format!("full-crop identity {identity}, patch-aligned selection {selection}, offset crop max deviation {worst:.1e}"),
    )
}

fn toy_config(dir: &Path, seed: u64) -> RunConfig {
    let mut c = RunConfig::toy();
    c.output_dir = dir.to_path_buf();
    c.seed = seed;
    c.stages.defend = DefendToggle::Both;
    c
}

fn method_auroc(t: &ResultTable, method: &str) -> f64 {
    t.rows.iter().find(|r| r.method == method).map(|r| r.auroc).expect("method row")
}

fn toy_single_object(shared: &mut Shared) -> Verdict {
    let start = Instant::now();
    let mut mkd = Vec::new();
    let mut full = Vec::new();
    for seed in 0..3u64 {
        let dir = shared.dir(&format!("single-{seed}"));
        let mut cfg = toy_config(&dir, seed);
        // The first run pretrains the teacher; later seeds reuse it.
        if let Some(t) = &shared.teacher {
            cfg.backbone.checkpoint = Some(t.clone());
        }
        let table = match run_experiment(cfg) {
            Ok(t) => t,
            Err(e) => return Verdict::Fail(format!("seed {seed}: {e}")),
        };
        if shared.teacher.is_none() {
            shared.teacher = Some(dir.join("teacher/pretrained.safetensors"));
        }
        mkd.push(method_auroc(&table, "MKD"));
        full.push(method_auroc(&table, "MKD+DEFEND"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let lowest = mkd.iter().chain(&full).cloned().fold(1.0, f64::min);
    let mins = start.elapsed().as_secs_f64() / 60.0;
    verdict(
        lowest >= 0.85 && mean(&full) >= mean(&mkd) && mins <= 20.0,
        format!(
            "class 0 vs rest, 3 seeds: MKD {mkd:.3?} (mean {:.3}), MKD+DEFEND {full:.3?} (mean {:.3}), {mins:.1} min",
            mean(&mkd),
            mean(&full)
        ),
    )
}

fn toy_multi_object(shared: &mut Shared) -> Verdict {
    let start = Instant::now();
    let dir = shared.dir("multi");
    let mut cfg = toy_config(&dir, 0);
    cfg.data = DataSource::Synthetic {
        scenes: SyntheticSceneSpec {
            objects: (2, 4),
            ..Default::default()
        },
        train: 400,
        test: 200,
    };
    cfg.split = SplitSpec::uni_class("synthetic", MembershipRule::ObjectPresence, 0);
    if let Some(t) = &shared.teacher {
        cfg.backbone.checkpoint = Some(t.clone());
    }
    let table = match run_experiment(cfg) {
        Ok(t) => t,
        Err(e) => return Verdict::Fail(e.to_string()),
    };
    let mut parts = Vec::new();
    let mut ok = true;
    for (method, sub) in [("MKD", "mkd"), ("MKD+DEFEND", "mkd-defend")] {
        let report: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.join("uni-class-0").join(sub).join("report.json")).unwrap(),
        )
        .unwrap();
        let p = report["rank_test_p"].as_f64().unwrap();
        let mean_abn = report["abnormal"]["mean"].as_f64().unwrap();
        let mean_nor = report["normal"]["mean"].as_f64().unwrap();
        let a = method_auroc(&table, method);
        ok &= a >= 0.75 && p < 0.01 && mean_abn > mean_nor;
        parts.push(format!("{method} AUROC {a:.3} p {p:.1e}"));
    }
    let mins = start.elapsed().as_secs_f64() / 60.0;
    verdict(ok && mins <= 30.0, format!("2-4 glyphs, normal = contains glyph 0: {}, {mins:.1} min", parts.join("; ")))
}

fn auroc_oracle(_: &mut Shared) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = 0;
    let mut ties = 0;
    for _ in 0..200 {
        let n = rng.random_range(2..=50);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..10) as f64 / 4.0).collect();
        let recs: Vec<NoveltyRecord> = scores
            .iter()
            .zip(&labels)
            .enumerate()
            .map(|(i, (&s, &a))| NoveltyRecord::new(format!("{i}"), s, if a { Label::Abnormal } else { Label::Normal }))
            .collect();
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                        ties += 1;
                    }
                }
            }
        }
        if auroc(&recs).unwrap() != wins / pairs {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("200 score sets, {ties} tied pairs, {mismatches} mismatches"))
}
