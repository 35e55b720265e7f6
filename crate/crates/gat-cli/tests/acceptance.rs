//! Release gate. Ten numbered checks pin the library's core contracts:
//! the pseudo-label rotation, the angular loss, full-model gradients,
//! windowed attention, modality handling, the balanced sampler, training
//! learnability, the cross-domain self-training effect, binary-level
//! determinism, and the preprocessing conventions. Every check prints one
//! `ACCEPTANCE Cn PASS` line with its measured numbers (visible under
//! `--nocapture`); tolerances and budgets are pinned in the assertions.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gat::checkpoint::quantize_f32;
use gat::eval::{
    compare_runs, constant_predictor_error, evaluate, score_record, EvalOptions, EvalReport,
};
use gat::geometry::{normalize2, normalize3, pseudo_label_3d, Gaze2D, GazeVector3, EPS_XY};
use gat::manifest::{FrameSource, Label, ModalityView, SampleRecord};
use gat::model::{model_forward, window_attention, ModelConfig, ParamSet, StageConfig};
use gat::optim::OptimizerConfig;
use gat::patchify::{ClipTensor, PatchSpec};
use gat::preprocess::{resample_fps, scaled_square_box};
use gat::sampler::balanced_epoch_plan;
use gat::synth::{synth_generate_2d, synth_generate_3d, DomainParams, SynthSpec, HEAD_BOX};
use gat::tape::{Tape, Tensor, LOSS_COS_CLAMP};
use gat::train::{
    gaze_loss, generate_pseudo_labels, grad_check_model, train_stage, PseudoPolicy, TrainDataset,
    TrainOptions,
};
use gat::windows::{build_plan, spatial_table_len, temporal_table_len, WindowSpec};

fn unit3(rng: &mut ChaCha8Rng) -> GazeVector3 {
    loop {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        if n2 > 1e-4 && n2 <= 1.0 {
            return normalize3(v).unwrap();
        }
    }
}

fn unit2(rng: &mut ChaCha8Rng) -> Gaze2D {
    loop {
        let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        if v[0] * v[0] + v[1] * v[1] > 1e-4 {
            return normalize2(v).unwrap();
        }
    }
}

/// C1: rotating a prediction onto a 2D annotation keeps the unit norm and
/// the exact z component, reproduces the annotation's planar direction,
/// and flags the degenerate branch exactly at the planar-norm threshold.
#[test]
fn c01_pseudo_label_rotation_contract() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..10_000 {
        let pred = unit3(&mut rng);
        let v = unit2(&mut rng);
        let out = pseudo_label_3d(pred, v);
        let xy = (pred.x * pred.x + pred.y * pred.y).sqrt();
        assert_eq!(out.degenerate, xy <= EPS_XY, "degenerate iff planar norm at or below 1e-6");
        if out.degenerate {
            continue;
        }
        let g = out.gaze;
        let norm = (g.x * g.x + g.y * g.y + g.z * g.z).sqrt();
        assert!((norm - 1.0).abs() <= 1e-9, "unit norm off by {}", (norm - 1.0).abs());
        assert_eq!(g.z.to_bits(), pred.z.to_bits(), "z must be preserved bitwise");
        let r = (g.x * g.x + g.y * g.y).sqrt();
        let (ux, uy) = (g.x / r, g.y / r);
        let angle = (ux * v.y - uy * v.x).atan2(ux * v.x + uy * v.y);
        assert!(angle.abs() <= 1e-9, "planar direction off by {} rad", angle.abs());
    }

    // The threshold itself, from both sides, plus a band of near-threshold
    // magnitudes in between.
    for &(xy, expect_degenerate) in
        &[(0.0, true), (1e-12, true), (EPS_XY, true), (EPS_XY * (1.0 + 1e-9), false), (1e-3, false)]
    {
        let z = (1.0 - xy * xy).sqrt();
        let pred = GazeVector3 { x: xy, y: 0.0, z };
        let out = pseudo_label_3d(pred, Gaze2D { x: 0.0, y: 1.0 });
        assert_eq!(out.degenerate, expect_degenerate, "xy norm {xy}");
        if expect_degenerate {
            assert_eq!(out.gaze, pred, "degenerate outputs return the prediction untouched");
        }
    }
    for _ in 0..2_000 {
        let scale = EPS_XY * 10f64.powf(rng.random_range(-1.0..1.0));
        let dir = unit2(&mut rng);
        let (x, y) = (dir.x * scale, dir.y * scale);
        let pred = GazeVector3 { x, y, z: -(1.0 - x * x - y * y).sqrt() };
        let out = pseudo_label_3d(pred, unit2(&mut rng));
        let xy = (x * x + y * y).sqrt();
        assert_eq!(out.degenerate, xy <= EPS_XY, "threshold crossing at planar norm {xy:e}");
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 1.0, "rotation suite took {elapsed:.3} s");
    println!("ACCEPTANCE C1 PASS: 12,000 rotation checks, unit/z/direction within 1e-9, {elapsed:.3} s");
}

/// C2: the differentiable angular loss matches an independent scalar
/// recomputation, and is zero exactly for equal vectors up to the cosine
/// clamp residual.
#[test]
fn c02_angular_loss_matches_scalar_oracle() {
    assert_eq!(LOSS_COS_CLAMP, 1e-7, "clamp width is part of the loss contract");
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut max_diff = 0.0f64;
    for _ in 0..1_000 {
        let rows = rng.random_range(1..=8);
        let preds: Vec<GazeVector3> = (0..rows).map(|_| unit3(&mut rng)).collect();
        let gts: Vec<GazeVector3> = (0..rows).map(|_| unit3(&mut rng)).collect();
        let weights: Vec<f64> = (0..rows).map(|_| rng.random_range(0.05..2.0)).collect();

        let mut tape = Tape::new();
        let flat: Vec<f64> = preds.iter().flat_map(|g| [g.x, g.y, g.z]).collect();
        let pred = tape.constant(Tensor::new(vec![rows, 3], flat));
        let loss = gaze_loss(&mut tape, pred, &gts, &weights);
        let got = tape.value(loss).data[0];

        let expected: f64 = (0..rows)
            .map(|i| {
                let (p, g) = (preds[i], gts[i]);
                let dot = (p.x * g.x + p.y * g.y + p.z * g.z).clamp(-1.0 + 1e-7, 1.0 - 1e-7);
                weights[i] * dot.acos().to_degrees()
            })
            .sum();
        max_diff = max_diff.max((got - expected).abs());
        assert!((got - expected).abs() <= 1e-9, "loss {got} vs oracle {expected}");
    }

    // Equal vectors sit at the clamp residual; anything a degree apart
    // clears it by orders of magnitude.
    let residual_rad = (1.0f64 - LOSS_COS_CLAMP).acos();
    assert!(residual_rad < 1e-3, "clamp residual {residual_rad:.3e} rad");
    let residual_deg = residual_rad.to_degrees();
    for _ in 0..100 {
        let g = unit3(&mut rng);
        let mut tape = Tape::new();
        let pred = tape.constant(Tensor::new(vec![1, 3], vec![g.x, g.y, g.z]));
        let loss = gaze_loss(&mut tape, pred, &[g], &[1.0]);
        let equal_loss = tape.value(loss).data[0];
        assert!(equal_loss <= residual_deg + 1e-12, "equal vectors must stay at the residual");

        // Rotate one degree away around an orthogonal axis.
        let e = if g.x.abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let o = normalize3([
            g.y * e[2] - g.z * e[1],
            g.z * e[0] - g.x * e[2],
            g.x * e[1] - g.y * e[0],
        ])
        .unwrap();
        let (c, s) = (1f64.to_radians().cos(), 1f64.to_radians().sin());
        let far = GazeVector3 { x: c * g.x + s * o.x, y: c * g.y + s * o.y, z: c * g.z + s * o.z };
        let mut tape = Tape::new();
        let pred = tape.constant(Tensor::new(vec![1, 3], vec![g.x, g.y, g.z]));
        let loss = gaze_loss(&mut tape, pred, &[far], &[1.0]);
        assert!(tape.value(loss).data[0] > residual_deg, "distinct vectors must clear the residual");
    }
    println!("ACCEPTANCE C2 PASS: 1,000 oracle triples, max |diff| {max_diff:.2e} deg, residual {residual_rad:.2e} rad");
}

/// Two blocks in one stage: the smallest config that runs attention,
/// shift, both bias tables, and the decoder.
fn toy_config() -> ModelConfig {
    ModelConfig {
        stages: vec![StageConfig { blocks: 2, dim: 8, heads: 2 }],
        window: WindowSpec { t: 2, h: 2, w: 2 },
        mlp_ratio: 2.0,
        patch: PatchSpec { t: 2, h: 4, w: 4, c: 8 },
        decoder_hidden: 16,
    }
}

/// C3: analytic gradients of the full training loss against central finite
/// differences on the two-block config, every parameter group sampled.
#[test]
fn c03_full_model_gradients_match_finite_differences() {
    let start = Instant::now();
    // A (4,16,16) clip gives a (2,4,4) token grid: shifted blocks mask
    // across window boundaries and both bias tables see nonzero offsets.
    let report = grad_check_model(&toy_config(), (4, 16, 16), 33, 200).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(report.coords_checked >= 200, "only {} coordinates checked", report.coords_checked);
    assert!(
        report.max_rel_err < 1e-3,
        "max relative error {} at {}[{}]",
        report.max_rel_err,
        report.worst.param,
        report.worst.coord
    );
    assert!(elapsed < 60.0, "gradient check took {elapsed:.1} s");
    println!(
        "ACCEPTANCE C3 PASS: {} coords, max rel err {:.2e} ({}[{}]), {elapsed:.1} s",
        report.coords_checked, report.max_rel_err, report.worst.param, report.worst.coord
    );
}

/// Which token pairs may attend, derived from coordinates alone: tokens
/// share a window cell after the cyclic shift, and the shift must not have
/// wrapped one of them across the grid edge.
fn allowed_from_coordinates(grid: [usize; 3], window: [usize; 3], shifted: bool) -> Vec<Vec<bool>> {
    let eff = [grid[0].min(window[0]), grid[1].min(window[1]), grid[2].min(window[2])];
    let mut shift = [0usize; 3];
    if shifted {
        for a in 0..3 {
            if eff[a] < grid[a] {
                shift[a] = eff[a] / 2;
            }
        }
    }
    let n = grid[0] * grid[1] * grid[2];
    let coord = |i: usize| [i / (grid[1] * grid[2]), (i / grid[2]) % grid[1], i % grid[2]];
    let mut ok = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (coord(i), coord(j));
            let mut same = true;
            for ax in 0..3 {
                let pa = (a[ax] + grid[ax] - shift[ax]) % grid[ax];
                let pb = (b[ax] + grid[ax] - shift[ax]) % grid[ax];
                if pa / eff[ax] != pb / eff[ax] || (a[ax] < shift[ax]) != (b[ax] < shift[ax]) {
                    same = false;
                    break;
                }
            }
            ok[i][j] = same;
        }
    }
    ok
}

fn oracle_matmul(a: &[f64], ra: usize, ca: usize, b: &[f64], cb: usize) -> Vec<f64> {
    let mut out = vec![0.0; ra * cb];
    for i in 0..ra {
        for k in 0..ca {
            let av = a[i * ca + k];
            for j in 0..cb {
                out[i * cb + j] += av * b[k * cb + j];
            }
        }
    }
    out
}

/// Dense attention over the full token set, restricted to allowed pairs,
/// with the relative-position bias recomputed from coordinates.
#[allow(clippy::too_many_arguments)]
fn dense_attention_oracle(
    x: &[f64],
    n: usize,
    dim: usize,
    heads: usize,
    grid: [usize; 3],
    window: [usize; 3],
    shifted: bool,
    allowed: &[Vec<bool>],
    qkv_w: &[f64],
    qkv_b: &[f64],
    spatial: &[f64],
    temporal: &[f64],
    proj_w: &[f64],
    proj_b: &[f64],
) -> Vec<f64> {
    let dh = dim / heads;
    let eff = [grid[0].min(window[0]), grid[1].min(window[1]), grid[2].min(window[2])];
    let mut shift = [0usize; 3];
    if shifted {
        for a in 0..3 {
            if eff[a] < grid[a] {
                shift[a] = eff[a] / 2;
            }
        }
    }
    let coord = |i: usize| [i / (grid[1] * grid[2]), (i / grid[2]) % grid[1], i % grid[2]];
    let wpos = |i: usize| {
        let c = coord(i);
        let mut p = [0usize; 3];
        for a in 0..3 {
            p[a] = ((c[a] + grid[a] - shift[a]) % grid[a]) % eff[a];
        }
        p
    };
    let s_cols = (2 * window[1] - 1) * (2 * window[2] - 1);
    let t_cols = 2 * window[0] - 1;

    let mut qkv = oracle_matmul(x, n, dim, qkv_w, 3 * dim);
    for i in 0..n {
        for c in 0..3 * dim {
            qkv[i * 3 * dim + c] += qkv_b[c];
        }
    }
    let mut ctx = vec![0.0; n * dim];
    for h in 0..heads {
        for i in 0..n {
            let q = &qkv[i * 3 * dim + h * dh..i * 3 * dim + h * dh + dh];
            let mut scored: Vec<(usize, f64)> = Vec::new();
            for j in (0..n).filter(|&j| allowed[i][j]) {
                let k = &qkv[j * 3 * dim + dim + h * dh..j * 3 * dim + dim + h * dh + dh];
                let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt();
                let (pi, pj) = (wpos(i), wpos(j));
                let dt = pi[0] as isize - pj[0] as isize + window[0] as isize - 1;
                let dhh = pi[1] as isize - pj[1] as isize + window[1] as isize - 1;
                let dw = pi[2] as isize - pj[2] as isize + window[2] as isize - 1;
                let sidx = dhh as usize * (2 * window[2] - 1) + dw as usize;
                let bias = spatial[h * s_cols + sidx] + temporal[h * t_cols + dt as usize];
                scored.push((j, dot + bias));
            }
            let peak = scored.iter().map(|&(_, s)| s).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = scored.iter().map(|&(_, s)| (s - peak).exp()).sum();
            for &(j, s) in &scored {
                let p = (s - peak).exp() / denom;
                for c in 0..dh {
                    ctx[i * dim + h * dh + c] += p * qkv[j * 3 * dim + 2 * dim + h * dh + c];
                }
            }
        }
    }
    let mut out = oracle_matmul(&ctx, n, dim, proj_w, dim);
    for i in 0..n {
        for c in 0..dim {
            out[i * dim + c] += proj_b[c];
        }
    }
    out
}

/// C4: windowed attention equals dense attention restricted to each
/// window's token set, and the shift masks forbid exactly the pairs the
/// cyclic shift wrapped across the grid edge.
#[test]
fn c04_window_attention_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (heads, dim) = (2, 8);
    let cases: [([usize; 3], [usize; 3], bool); 7] = [
        ([2, 4, 4], [2, 4, 4], false),
        ([2, 4, 4], [2, 4, 4], true),
        ([2, 8, 8], [2, 4, 4], false),
        ([2, 8, 8], [2, 4, 4], true),
        ([1, 8, 8], [2, 4, 4], true),
        ([2, 8, 4], [2, 4, 4], true),
        ([4, 4, 4], [2, 2, 2], true),
    ];
    let mut max_diff = 0.0f64;
    for (grid, window, shifted) in cases {
        let plan = build_plan(grid, window, shifted).unwrap();
        let n = grid[0] * grid[1] * grid[2];

        let allowed = allowed_from_coordinates(grid, window, shifted);
        let mut plan_allowed = vec![vec![false; n]; n];
        for w in 0..plan.windows {
            for i in 0..plan.m {
                for j in 0..plan.m {
                    let masked = plan
                        .mask
                        .as_ref()
                        .is_some_and(|m| m[(w * plan.m + i) * plan.m + j].is_infinite());
                    if !masked {
                        plan_allowed[plan.gather[w * plan.m + i]][plan.gather[w * plan.m + j]] = true;
                    }
                }
            }
        }
        assert_eq!(plan_allowed, allowed, "attendability differs on grid {grid:?} shifted={shifted}");
        if plan.shift.iter().any(|&s| s > 0) {
            let forbidden = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .filter(|&(i, j)| !allowed[i][j])
                .count();
            assert!(forbidden > 0, "a shifted plan on grid {grid:?} must mask something");
        }

        let mut draw = |len: usize| -> Vec<f64> {
            (0..len).map(|_| rng.random_range(-0.5..0.5)).collect()
        };
        let x = draw(n * dim);
        let qkv_w = draw(dim * 3 * dim);
        let qkv_b = draw(3 * dim);
        let spatial = draw(heads * spatial_table_len(window));
        let temporal = draw(heads * temporal_table_len(window));
        let proj_w = draw(dim * dim);
        let proj_b = draw(dim);

        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![n, dim], x.clone()));
        let ids = [
            tape.constant(Tensor::new(vec![dim, 3 * dim], qkv_w.clone())),
            tape.constant(Tensor::new(vec![3 * dim], qkv_b.clone())),
            tape.constant(Tensor::new(vec![heads, spatial_table_len(window)], spatial.clone())),
            tape.constant(Tensor::new(vec![heads, temporal_table_len(window)], temporal.clone())),
            tape.constant(Tensor::new(vec![dim, dim], proj_w.clone())),
            tape.constant(Tensor::new(vec![dim], proj_b.clone())),
        ];
        let out = window_attention(
            &mut tape, xv, &plan, heads, ids[0], ids[1], ids[2], ids[3], ids[4], ids[5],
        );
        let got = &tape.value(out).data;

        let want = dense_attention_oracle(
            &x, n, dim, heads, grid, window, shifted, &allowed, &qkv_w, &qkv_b, &spatial,
            &temporal, &proj_w, &proj_b,
        );
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            let d = (a - b).abs();
            max_diff = max_diff.max(d);
            assert!(d <= 1e-6, "attention output differs by {d} on grid {grid:?} shifted={shifted}");
        }
    }
    println!("ACCEPTANCE C4 PASS: 7 grid cases up to (2,8,8), max |diff| {max_diff:.2e}, masks exact");
}

/// C5: a single image and the clip holding that image twice produce the
/// same gaze, for many parameter draws.
#[test]
fn c05_image_and_duplicated_clip_agree() {
    let cfg = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut max_diff = 0.0f64;
    for draw in 0..50 {
        let params = ParamSet::init(&cfg, 9000 + draw);
        let frame: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let image = ClipTensor::new(1, 16, 16, frame.clone()).unwrap();
        let mut doubled = frame.clone();
        doubled.extend_from_slice(&frame);
        let clip = ClipTensor::new(2, 16, 16, doubled).unwrap();

        let from_image = model_forward(image, &params, &cfg).unwrap();
        let from_clip = model_forward(clip, &params, &cfg).unwrap();
        assert_eq!(from_image.directions.len(), 1);
        assert_eq!(from_clip.directions.len(), 2);
        for row in &from_clip.directions {
            let g = from_image.directions[0];
            for (a, b) in [(row.x, g.x), (row.y, g.y), (row.z, g.z)] {
                let d = (a - b).abs();
                max_diff = max_diff.max(d);
                assert!(d <= 1e-6, "image and duplicated clip disagree by {d}");
            }
        }
    }
    println!("ACCEPTANCE C5 PASS: 50 parameter draws, image vs [I,I] max |diff| {max_diff:.2e}");
}

/// C6: with dataset sizes {100, 300} every epoch plan draws the rounded
/// mean (200) from each dataset, batches never mix datasets, repeats are
/// spread evenly, and the plan is a pure function of the seed.
#[test]
fn c06_balanced_sampler_law() {
    let sizes = [100usize, 300];
    for batch in [32usize, 7] {
        let plan = balanced_epoch_plan(&sizes, batch, 60);
        let mut totals = [0usize; 2];
        let mut counts = [vec![0usize; sizes[0]], vec![0usize; sizes[1]]];
        for b in &plan {
            assert!(!b.items.is_empty(), "no empty batches");
            assert!(b.items.len() <= batch, "batch over size");
            let mut seen = b.items.clone();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), b.items.len(), "no repeats inside a batch");
            for &i in &b.items {
                assert!(i < sizes[b.dataset], "item index within its own dataset");
                counts[b.dataset][i] += 1;
            }
            totals[b.dataset] += b.items.len();
        }
        for (d, &total) in totals.iter().enumerate() {
            assert!(
                total.abs_diff(200) <= batch,
                "dataset {d} contributed {total}, expected 200 ± {batch}"
            );
            assert_eq!(total, 200, "the partial final batch makes totals exact");
        }
        // 200 draws from 100 items: every item exactly twice. 200 from
        // 300: each at most once.
        assert!(counts[0].iter().all(|&c| c == 2), "oversampling spreads repeats evenly");
        assert!(counts[1].iter().all(|&c| c <= 1), "subsampling never repeats an item");

        assert_eq!(plan, balanced_epoch_plan(&sizes, batch, 60), "same seed, same plan");
        assert_ne!(plan, balanced_epoch_plan(&sizes, batch, 61), "different seed, different plan");
    }
    println!("ACCEPTANCE C6 PASS: sizes {{100,300}} give 200 per dataset, single-dataset batches, seeded");
}

fn full_mean(report: &EvalReport) -> f64 {
    report
        .rows
        .iter()
        .find(|r| r.split == "full" && r.modality == "all")
        .expect("full/all row")
        .mean_error_deg
}

fn image_dataset(tag: &str, records: Vec<SampleRecord>) -> TrainDataset {
    TrainDataset {
        tag: tag.to_string(),
        view: ModalityView::ImageView,
        records,
        base: PathBuf::from("."),
    }
}

fn desk_run(seed: u64, epochs: usize) -> (ModelConfig, TrainOptions) {
    let optimizer = OptimizerConfig {
        base_lr: 3e-4,
        warmup_epochs: 2,
        max_epochs: epochs,
        min_epochs: epochs,
        patience: epochs,
        seed,
        ..OptimizerConfig::default()
    };
    let options = TrainOptions { optimizer, augment: false, ..TrainOptions::default() };
    (ModelConfig::desk_default(), options)
}

fn eval_options(opts: &TrainOptions) -> EvalOptions {
    EvalOptions { clip_len: opts.clip_len, crop_scale: opts.crop_scale, out_size: opts.out_size }
}

/// Mean angle between a cap-uniform direction and the cap axis, in
/// degrees: the constant predictor's expected error in closed form.
fn cap_mean_angle_deg(cap_deg: f64) -> f64 {
    let a = cap_deg.to_radians();
    ((a.sin() - a * a.cos()) / (1.0 - a.cos())).to_degrees()
}

/// C7: supervised training on 2,000 synthetic labeled images beats half
/// the constant-direction baseline within the time budget.
#[test]
fn c07_supervised_training_beats_constant_baseline() {
    let start = Instant::now();
    let domain = DomainParams::preset_a();
    let train = synth_generate_3d(2_000, 1, &domain, 7001, "train3d");
    let val = synth_generate_3d(200, 1, &domain, 7002, "val3d");
    let test = synth_generate_3d(400, 1, &domain, 7003, "test3d");
    let (cfg, opts) = desk_run(7, 10);

    let baseline = constant_predictor_error(&test).unwrap();
    let closed_form = cap_mean_angle_deg(domain.gaze_cap_deg);
    assert!(
        (baseline - closed_form).abs() < 2.5,
        "sampled baseline {baseline:.2} deg vs closed form {closed_form:.2} deg"
    );

    let result = train_stage(
        &[image_dataset("train3d", train)],
        &val,
        Path::new("."),
        &cfg,
        &opts,
        None,
    )
    .unwrap();
    let report = evaluate(&test, Path::new("."), &result.params, &cfg, &eval_options(&opts)).unwrap();
    let err = full_mean(&report);
    let elapsed = start.elapsed().as_secs_f64();

    assert!(
        err < 0.5 * baseline,
        "test error {err:.2} deg not below half the baseline {baseline:.2} deg"
    );
    assert!(elapsed < 600.0, "learnability run took {elapsed:.0} s");
    println!(
        "ACCEPTANCE C7 PASS: test {err:.2} deg vs baseline {baseline:.2} deg (need < {:.2}), {elapsed:.0} s",
        0.5 * baseline
    );
}

/// C8: on the cross-domain preset, two-stage self-training with rotated
/// pseudo-labels closes the transfer gap: its error on the shifted test
/// domain is at most the supervised model's, with all four modes in one
/// report.
#[test]
fn c08_cross_domain_self_training_shrinks_the_gap() {
    let start = Instant::now();
    let near = DomainParams::preset_a();
    let wide = DomainParams::preset_b();
    let train3d = synth_generate_3d(800, 1, &near, 8001, "train3d-a");
    let val = synth_generate_3d(160, 1, &near, 8002, "val3d-a");
    let test = synth_generate_3d(400, 1, &wide, 8003, "test3d-b");
    let (train2d, _sealed) = synth_generate_2d(800, &wide, 8004, "train2d-b");
    let (cfg, opts) = desk_run(8, 10);
    let ds3d = image_dataset("train3d-a", train3d);
    let base = Path::new(".");
    let eopts = eval_options(&opts);

    // Supervised stage; also the teacher for both self-training modes,
    // read back through the checkpoint precision boundary.
    let stage1 = train_stage(&[ds3d.clone()], &val, base, &cfg, &opts, None).unwrap();
    let teacher = quantize_f32(&stage1.params);
    let supervised_report = evaluate(&test, base, &stage1.params, &cfg, &eopts).unwrap();
    let e_sup = full_mean(&supervised_report);

    // Weak supervision: the planar annotations join training directly.
    let ws = train_stage(
        &[ds3d.clone(), image_dataset("train2d-b", train2d.clone())],
        &val,
        base,
        &cfg,
        &opts,
        None,
    )
    .unwrap();
    let e_ws = full_mean(&evaluate(&test, base, &ws.params, &cfg, &eopts).unwrap());

    // Self-training on raw predictions, annotations unused.
    let (pseudo_raw, _) =
        generate_pseudo_labels(&train2d, base, &teacher, &cfg, &opts, PseudoPolicy::Raw).unwrap();
    let st = train_stage(
        &[ds3d.clone(), image_dataset("pseudo-raw-b", pseudo_raw)],
        &val,
        base,
        &cfg,
        &opts,
        None,
    )
    .unwrap();
    let e_st = full_mean(&evaluate(&test, base, &st.params, &cfg, &eopts).unwrap());

    // Self-training on predictions rotated onto the annotations.
    let (pseudo_rot, stats) =
        generate_pseudo_labels(&train2d, base, &teacher, &cfg, &opts, PseudoPolicy::Rotate).unwrap();
    let stwsge = train_stage(
        &[ds3d.clone(), image_dataset("pseudo-rot-b", pseudo_rot)],
        &val,
        base,
        &cfg,
        &opts,
        None,
    )
    .unwrap();
    let stwsge_report = evaluate(&test, base, &stwsge.params, &cfg, &eopts).unwrap();
    let e_stwsge = full_mean(&stwsge_report);

    let cmp = compare_runs(&supervised_report, &stwsge_report).unwrap();
    let headline = cmp
        .rows
        .iter()
        .find(|r| r.split == "full" && r.modality == "all")
        .expect("full/all comparison row");
    assert!((headline.delta_deg - (e_stwsge - e_sup)).abs() < 1e-9);

    let dir = tempfile::tempdir().unwrap();
    let mut report = String::from("mode,mean_error_deg,delta_vs_supervised_deg\n");
    for (mode, err) in
        [("supervised", e_sup), ("ws", e_ws), ("st", e_st), ("stwsge", e_stwsge)]
    {
        report.push_str(&format!("{mode},{err:.6},{:.6}\n", err - e_sup));
    }
    let report_path = dir.path().join("mode_comparison.csv");
    std::fs::write(&report_path, &report).unwrap();
    let written = std::fs::read_to_string(&report_path).unwrap();
    assert_eq!(written.lines().count(), 5, "header plus one row per mode");
    for mode in ["supervised", "ws", "st", "stwsge"] {
        assert!(written.lines().any(|l| l.starts_with(&format!("{mode},"))), "{mode} row present");
    }

    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        e_stwsge <= e_sup,
        "rotated self-training {e_stwsge:.2} deg must not trail supervised {e_sup:.2} deg"
    );
    assert!(elapsed < 1_500.0, "cross-domain preset took {elapsed:.0} s");
    println!(
        "ACCEPTANCE C8 PASS: supervised {e_sup:.2} / ws {e_ws:.2} / st {e_st:.2} / stwsge {e_stwsge:.2} deg ({:.1}% gap, {} of {} pseudo degenerate), {elapsed:.0} s",
        headline.relative_pct, stats.degenerate, stats.total
    );
}

/// C9: the two-stage pipeline command is byte-deterministic: same seed,
/// same checkpoints, same reports.
#[test]
fn c09_selftrain_binary_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let gat = env!("CARGO_BIN_EXE_gat");
    let run = |args: &[&str]| {
        let out = std::process::Command::new(gat).args(args).output().expect("binary runs");
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["synth", "--count", "8", "--seed", "90", "--out", root.join("data").to_str().unwrap()]);
    let config = root.join("tiny.json");
    std::fs::write(
        &config,
        r#"{
  "model": {
    "stages": [{"blocks": 2, "dim": 8, "heads": 2}],
    "window": {"t": 2, "h": 4, "w": 4},
    "mlp_ratio": 2.0,
    "patch": {"t": 2, "h": 8, "w": 8, "c": 8},
    "decoder_hidden": 16
  },
  "optimizer": {"base_lr": 0.0003, "warmup_epochs": 1, "batch_size": 4},
  "size": 16,
  "augment": false
}"#,
    )
    .unwrap();
    for out in ["a", "b"] {
        run(&[
            "selftrain",
            "--mode",
            "stwsge",
            "--manifest-3d",
            root.join("data/train3d.jsonl").to_str().unwrap(),
            "--manifest-2d",
            root.join("data/train2d.jsonl").to_str().unwrap(),
            "--val",
            root.join("data/val3d.jsonl").to_str().unwrap(),
            "--test",
            root.join("data/test3d_shifted.jsonl").to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--epochs",
            "2",
            "--workers",
            "1",
            "--seed",
            "41",
            "--out",
            root.join(out).to_str().unwrap(),
        ]);
    }
    let names = [
        "stage1.ckpt",
        "stage2.ckpt",
        "pseudo.jsonl",
        "pseudo_stats.json",
        "history_stage1.json",
        "history_stage2.json",
        "eval_stage1.json",
        "eval_stage2.json",
        "comparison.json",
        "comparison.csv",
        "summary.json",
    ];
    for name in names {
        let a = std::fs::read(root.join("a").join(name)).unwrap();
        let b = std::fs::read(root.join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identically seeded runs");
    }
    println!("ACCEPTANCE C9 PASS: {} pipeline outputs byte-identical across reruns", names.len());
}

/// C10: the fixed preprocessing conventions: the 30→8 fps index vector,
/// the −0.10 crop mapping a 100×100 box to 90×90, and video scoring
/// reading the fourth prediction.
#[test]
fn c10_preprocessing_convention_fixtures() {
    assert_eq!(resample_fps(30, 30.0, 8.0), vec![0, 4, 8, 11, 15, 19, 23, 26]);

    let boxed = scaled_square_box([0.0, 0.0, 100.0, 100.0], -0.10).unwrap();
    assert_eq!(boxed, [5.0, 5.0, 90.0, 90.0]);

    // Eight frames with distinct labels; a constant-output model makes the
    // scored error equal the angle of whichever label was read.
    let cfg = toy_config();
    let mut params = ParamSet::init(&cfg, 3);
    let fc2 = params.index_of("decoder.fc2.weight").unwrap();
    params.entries[fc2].data.fill(0.0);
    let rows: Vec<GazeVector3> = (0..8)
        .map(|k| {
            let theta = (5.0 + 10.0 * k as f64).to_radians();
            GazeVector3 { x: theta.sin(), y: 0.0, z: -theta.cos() }
        })
        .collect();
    let record = SampleRecord {
        id: "clip".into(),
        source: FrameSource::Synth(SynthSpec { seed: 12, frames: 8, domain: DomainParams::preset_a() }),
        label: Label::Gaze3D(rows),
        dataset: "fixture".into(),
        head_box: Some(HEAD_BOX),
    };
    let opts = EvalOptions { clip_len: 8, crop_scale: -0.10, out_size: 16 };
    let score = score_record(&record, Path::new("."), &params, &cfg, &opts).unwrap();
    assert!(
        (score.error_deg - 35.0).abs() < 1e-9,
        "scored error {} deg should match the fourth label's 35 deg",
        score.error_deg
    );
    println!("ACCEPTANCE C10 PASS: fps indices, 90×90 crop, video scored at output index 3");
}
