//! Training objective, networks, optimizer schedule and checkpoints.

mod common;

use cgmmsep::em::{elbo, DoaPosterior, MaskPosterior, ModelParams, ScmField};
use cgmmsep::signal::{stft, Spectrogram};
use cgmmsep::sim::*;
use cgmmsep::spatial::{ArrayGeometry, Hyperparams, SteeringTemplate};
use cgmmsep::train::*;
use cgmmsep::Error;
use common::*;
use ndarray::{Array1, Array2, Array3};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FLOOR: f64 = 1e-12;

#[test]
fn avg_power_cases() {
    let unit = spectrogram(Array3::from_shape_fn((4, 3, 2), |(t, f, m)| {
        Complex64::from_polar(1.0, (t + 2 * f + 3 * m) as f64)
    }));
    assert!((avg_power(&unit).unwrap() - 1.0).abs() < 1e-15);
    let inst = instance(3, 3, 3, 2, 2);
    let p = avg_power(&inst.x).unwrap();
    let scaled = inst.x.scaled(3.0);
    assert!(rel_err(avg_power(&scaled).unwrap(), 9.0 * p) < 1e-14);
    let mut naive = 0.0;
    for t in 0..3 {
        for f in 0..3 {
            for m in 0..3 {
                naive += inst.x.values()[[t, f, m]].norm_sqr();
            }
        }
    }
    assert!(rel_err(p, naive / 27.0) <= 1e-12);
    assert!(matches!(
        avg_power(&spectrogram(Array3::zeros((2, 3, 2)))),
        Err(Error::DegenerateInput(_))
    ));
}

#[test]
fn features_are_scale_invariant() {
    let inst = instance(4, 3, 2, 2, 2);
    let a = log_magnitude_features(&inst.x, 0).unwrap();
    let b = log_magnitude_features(&inst.x.scaled(250.0), 0).unwrap();
    assert!(a.iter().zip(&b).all(|(u, v)| (u - v).abs() < 1e-9));
    assert!(a.sum().abs() < 1e-9);
    assert!(log_magnitude_features(&inst.x, 2).is_err());
}

fn bound(inst: &Instance) -> TrainingElbo {
    let lam = avg_power(&inst.x).unwrap();
    training_elbo(
        &inst.x,
        &inst.ez,
        &inst.ew,
        &inst.params.pi,
        &inst.params.phi,
        &inst.tpl,
        lam,
        FLOOR,
    )
    .unwrap()
}

#[test]
fn single_component_bound_is_template_likelihood() {
    let inst = instance(5, 3, 2, 1, 1);
    let lam = avg_power(&inst.x).unwrap();
    let got = bound(&inst);
    assert_eq!((got.kl_masks, got.kl_doa), (0.0, 0.0));
    let mut want = 0.0;
    for t in 0..3 {
        for f in 0..3 {
            let g = dense(inst.tpl.scm(f, 0), 2) * Complex64::new(lam, 0.0);
            want += log_cgauss_dense(&bin_vector(&inst.x, t, f), &g);
        }
    }
    assert!(rel_err(-got.loss, want / 9.0) <= 1e-10);
}

#[test]
fn divergences_vanish_at_the_priors() {
    let mut inst = instance(6, 3, 2, 3, 2);
    let (t, f, k) = inst.ez.dims();
    let pi = inst.params.pi.clone();
    inst.ez = MaskPosterior::new(Array3::from_shape_fn((t, f, k), |(ti, _, ki)| pi[[ti, ki]])).unwrap();
    let phi = inst.params.phi.clone();
    inst.ew = DoaPosterior::new(Array2::from_shape_fn((k, 3), |(_, d)| phi[d])).unwrap();
    let got = bound(&inst);
    assert_eq!(got.kl_masks, 0.0);
    assert_eq!(got.kl_doa, 0.0);
}

/// Loss as a function of unconstrained `ez`, `ew` entries (priors fixed).
fn loss_at(inst: &Instance, ez: &Array3<f64>, ew: &Array2<f64>) -> f64 {
    let lam = avg_power(&inst.x).unwrap();
    let z = MaskPosterior::new(ez.clone()).ok();
    let w = DoaPosterior::new(ew.clone()).ok();
    // the bound is defined on the simplex only, so evaluate the raw expression
    let _ = (z, w);
    let (t_len, f_len, k_len) = ez.dim();
    let d_len = ew.ncols();
    let m = inst.x.n_channels();
    let mut l = 0.0;
    for t in 0..t_len {
        for f in 0..f_len {
            let x = bin_vector(&inst.x, t, f);
            for k in 0..k_len {
                for d in 0..d_len {
                    let g = dense(inst.tpl.scm(f, d), m) * Complex64::new(lam, 0.0);
                    l += ez[[t, f, k]] * ew[[k, d]] * log_cgauss_dense(&x, &g);
                }
                l += ez[[t, f, k]] * (inst.params.pi[[t, k]] / ez[[t, f, k]]).ln();
            }
        }
    }
    for k in 0..k_len {
        for d in 0..d_len {
            l += ew[[k, d]] * (inst.params.phi[d] / ew[[k, d]]).ln();
        }
    }
    -l / (t_len * f_len) as f64
}

#[test]
fn bound_gradients_match_central_differences() {
    let inst = instance(7, 3, 3, 3, 2);
    let got = bound(&inst);
    let h = 1e-5;
    let ez = inst.ez.values().clone();
    let ew = inst.ew.values().clone();
    assert!(rel_err(got.loss, loss_at(&inst, &ez, &ew)) <= 1e-10);
    let mut worst: f64 = 0.0;
    for idx in 0..ez.len() {
        let mut up = ez.clone();
        let mut down = ez.clone();
        up.as_slice_mut().unwrap()[idx] += h;
        down.as_slice_mut().unwrap()[idx] -= h;
        let num = (loss_at(&inst, &up, &ew) - loss_at(&inst, &down, &ew)) / (2.0 * h);
        worst = worst.max(rel_err(got.grad_ez.as_slice().unwrap()[idx], num));
    }
    for idx in 0..ew.len() {
        let mut up = ew.clone();
        let mut down = ew.clone();
        up.as_slice_mut().unwrap()[idx] += h;
        down.as_slice_mut().unwrap()[idx] -= h;
        let num = (loss_at(&inst, &ez, &up) - loss_at(&inst, &ez, &down)) / (2.0 * h);
        worst = worst.max(rel_err(got.grad_ew.as_slice().unwrap()[idx], num));
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

/// The training bound times `-TF` against the EM bound with every power at
/// the average power and every SCM at its template.
fn cross_module_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let t = rand::Rng::gen_range(&mut r, 1..5);
    let m = rand::Rng::gen_range(&mut r, 2..5);
    let d = rand::Rng::gen_range(&mut r, 1..5);
    let k = rand::Rng::gen_range(&mut r, 1..4);
    let inst = instance(seed, t, m, d, k);
    let lam = avg_power(&inst.x).unwrap();
    let tb = bound(&inst);
    let (_, f, _) = inst.ez.dims();
    let params = ModelParams {
        scm: ScmField::from_templates(&inst.tpl),
        lambda: Array3::from_elem((t, f, k), lam),
        pi: inst.params.pi.clone(),
        phi: inst.params.phi.clone(),
        hyper: Hyperparams::for_channels(m),
    };
    let em = elbo(&inst.x, &inst.tpl, &params, &inst.ez, &inst.ew).unwrap();
    rel_err(-tb.loss * (t * f) as f64, em)
}

#[test]
fn training_bound_equals_em_bound() {
    let worst = (0..100).map(cross_module_gap).fold(0.0, f64::max);
    assert!(worst <= 1e-10, "{worst}");
}

fn mixture(
    seed: u64,
    seconds: f64,
    kinds: [SourceKind; 2],
    azimuths: [f64; 2],
) -> (Spectrogram, GroundTruth) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let len = (seconds * SAMPLE_RATE as f64) as usize;
    let scene = Scene {
        sources: kinds
            .iter()
            .map(|&k| generate_source(k, len, SAMPLE_RATE, &mut r))
            .collect(),
        sample_rate: SAMPLE_RATE,
        azimuths: azimuths.to_vec(),
        geometry: ArrayGeometry::default(),
        snr_db: Some(30.0),
        noise_seed: seed,
        room: None,
    };
    let cfg = cgmmsep::signal::StftConfig::default();
    let (mix, truth) = mix_planewave(&scene, &cfg).unwrap();
    (stft(&mix, &cfg).unwrap(), truth)
}

fn default_templates() -> SteeringTemplate {
    let cfg = cgmmsep::pipeline::SeparatorConfig::for_geometry(ArrayGeometry::default());
    cgmmsep::pipeline::templates_for(&cfg, SAMPLE_RATE).unwrap()
}

fn small_net(seed: u64, hidden: usize) -> ReferenceMaskNet {
    ReferenceMaskNet::new(
        257,
        2,
        DEFAULT_CONTEXT,
        hidden,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap()
}

#[test]
fn zero_learning_rate_is_pure_evaluation() {
    let tpl = default_templates();
    let (x, _) = mixture(1, 0.4, [SourceKind::LowBand, SourceKind::HighBand], [30.0, 150.0]);
    let item = TrainItem::new(x, 0).unwrap();
    let mut net = small_net(1, 16);
    let mut map = DirectionalSoftmax::new(72);
    let before = (net.clone(), map.clone());
    let mut opt = Adam::new(net.params().len() + map.params().len(), 0.0);
    let opts = TrainOptions::default();
    let a = train_step(&[&item], &mut net, &mut map, &tpl, &mut opt, &opts).unwrap();
    let b = train_step(&[&item], &mut net, &mut map, &tpl, &mut opt, &opts).unwrap();
    assert_eq!((net, map), before);
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert!(a.loss.is_finite() && !a.skipped);
}

#[test]
fn duplicated_batch_matches_single_mixture() {
    let tpl = default_templates();
    let (x, _) = mixture(
        2,
        0.4,
        [SourceKind::Harmonic, SourceKind::HighBand],
        [80.0, 200.0],
    );
    let item = TrainItem::new(x, 0).unwrap();
    let opts = TrainOptions::default();
    let run = |batch: &[&TrainItem]| {
        let mut net = small_net(2, 16);
        let mut map = DirectionalSoftmax::new(72);
        let mut opt = Adam::new(net.params().len() + map.params().len(), 1e-3);
        let rep = train_step(batch, &mut net, &mut map, &tpl, &mut opt, &opts).unwrap();
        (rep, net)
    };
    let (one, net_one) = run(&[&item]);
    let (two, net_two) = run(&[&item, &item]);
    assert!(rel_err(one.loss, two.loss) < 1e-14);
    assert!(rel_err(one.grad_norm, two.grad_norm) < 1e-12);
    assert!(net_one
        .params()
        .iter()
        .zip(net_two.params())
        .all(|(a, b)| (a - b).abs() < 1e-15));
}

#[test]
fn two_hundred_steps_raise_the_bound() {
    // sixteen fixed low/high band mixtures, batches of four
    let tpl = default_templates();
    let items: Vec<TrainItem> = (0..16)
        .map(|i| {
            let az = (37.0 * i as f64) % 360.0;
            let (x, _) = mixture(
                100 + i,
                0.3,
                [SourceKind::LowBand, SourceKind::HighBand],
                [az, (az + 90.0) % 360.0],
            );
            TrainItem::new(x, 0).unwrap()
        })
        .collect();
    let opts = TrainOptions::default();
    let mut net = small_net(3, 32);
    let mut map = DirectionalSoftmax::new(72);
    let mean_loss = |net: &ReferenceMaskNet, map: &DirectionalSoftmax| {
        items
            .iter()
            .map(|it| item_loss(it, net, map, &tpl, &opts).unwrap())
            .sum::<f64>()
            / items.len() as f64
    };
    let initial = mean_loss(&net, &map);
    let mut opt = Adam::new(net.params().len() + map.params().len(), 1e-3);
    for step in 0..200 {
        let start = (step * 4) % 16;
        let batch: Vec<&TrainItem> = items[start..start + 4].iter().collect();
        train_step(&batch, &mut net, &mut map, &tpl, &mut opt, &opts).unwrap();
    }
    let trained = mean_loss(&net, &map);
    // seed 3: the bound per bin rises by well over one nat
    assert!(initial - trained > 1.0, "initial {initial} trained {trained}");
}

#[test]
fn linear_network_gradients_are_tight() {
    let setup = gradcheck_setup(11, 6, 2).unwrap();
    let net = LinearMaskNet::new(8, 2, 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let at = |h| {
        gradcheck(
            &net,
            &setup.map,
            &setup.item,
            &setup.tpl,
            &TrainOptions::default(),
            h,
        )
        .unwrap()
        .max_rel_error
    };
    let (coarse, fine) = (at(1e-4), at(1e-5));
    eprintln!("linear net gradcheck: h=1e-4 {coarse:e}, h=1e-5 {fine:e}");
    // at h = 1e-5 rounding already dominates the central difference
    assert!(coarse <= 1e-6 && fine <= GRADCHECK_TOL, "{coarse} {fine}");
}

#[test]
fn reference_network_gradients_pass() {
    for seed in [12, 13] {
        let s = gradcheck_setup(seed, 8, 2).unwrap();
        let rep = gradcheck(
            &s.net,
            &s.map,
            &s.item,
            &s.tpl,
            &TrainOptions::default(),
            GRADCHECK_STEP,
        )
        .unwrap();
        assert!(
            rep.passed(),
            "seed {seed}: {} at {}",
            rep.max_rel_error,
            rep.worst_index
        );
        assert!(rep
            .analytic
            .iter()
            .skip(rep.n_params - 17)
            .any(|&g| g.abs() > 1e-8));
    }
}

#[derive(Clone)]
struct Corrupted(LinearMaskNet);

impl MaskNetwork for Corrupted {
    type Cache = <LinearMaskNet as MaskNetwork>::Cache;
    fn n_freqs(&self) -> usize {
        self.0.n_freqs()
    }
    fn n_sources(&self) -> usize {
        self.0.n_sources()
    }
    fn params(&self) -> &[f64] {
        self.0.params()
    }
    fn params_mut(&mut self) -> &mut [f64] {
        self.0.params_mut()
    }
    fn forward(&self, features: &Array2<f64>) -> cgmmsep::Result<(MaskPosterior, Self::Cache)> {
        self.0.forward(features)
    }
    fn backward(&self, cache: &Self::Cache, grad_ez: &Array3<f64>) -> Vec<f64> {
        let mut g = self.0.backward(cache, grad_ez);
        g[3] *= 1.01;
        g
    }
}

#[test]
fn corrupted_backward_is_caught() {
    let s = gradcheck_setup(14, 6, 2).unwrap();
    let net = Corrupted(LinearMaskNet::new(8, 2, 0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap());
    let rep = gradcheck(
        &net,
        &s.map,
        &s.item,
        &s.tpl,
        &TrainOptions::default(),
        GRADCHECK_STEP,
    )
    .unwrap();
    assert!(!rep.passed());
    assert_eq!(rep.worst_index, 3);
}

#[test]
fn stopping_the_omega_gradient_changes_mask_gradients() {
    let s = gradcheck_setup(15, 6, 2).unwrap();
    let full = item_gradient(&s.item, &s.net, &s.map, &s.tpl, &TrainOptions::default()).unwrap();
    let opts = TrainOptions {
        omega_stop_gradient: true,
        ..TrainOptions::default()
    };
    let stopped = item_gradient(&s.item, &s.net, &s.map, &s.tpl, &opts).unwrap();
    assert_eq!(full.loss, stopped.loss);
    assert_eq!(full.grad_map, stopped.grad_map);
    assert_ne!(full.grad_mask, stopped.grad_mask);
}

#[test]
fn learning_rate_schedule() {
    assert_eq!(scheduled_lr(None, 5.0, 1e-3), 1e-3);
    assert_eq!(scheduled_lr(Some(4.0), 5.0, 1e-3), 1e-3 * LR_DECAY);
    assert_eq!(scheduled_lr(Some(5.0), 5.0, 1e-3), 1e-3);
    assert_eq!(scheduled_lr(Some(6.0), 5.0, 1e-3), 1e-3);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ck");
    let net = ReferenceMaskNet::new(9, 2, 1, 4, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let map = DirectionalSoftmax::new(5);
    let mut optimizer = Adam::new(net.params().len() + map.params().len(), 3e-4);
    let mut p: Vec<f64> = net.params().iter().chain(map.params()).copied().collect();
    let g: Vec<f64> = (0..p.len()).map(|i| (i as f64).sin()).collect();
    optimizer.update(&mut p, &g);
    let ck = Checkpoint {
        net,
        map,
        optimizer,
        epoch: 7,
    };
    save_checkpoint(&path, &ck).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ck);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    std::fs::write(&path, &wrong).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    assert!(matches!(
        load_checkpoint(&dir.path().join("missing")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn trainer_writes_a_step_log() {
    let dir = tempfile::tempdir().unwrap();
    let tpl = default_templates();
    let items: Vec<TrainItem> = (0..3)
        .map(|i| {
            TrainItem::new(
                mixture(
                    200 + i,
                    0.3,
                    [SourceKind::LowBand, SourceKind::HighBand],
                    [10.0, 100.0],
                )
                .0,
                0,
            )
            .unwrap()
        })
        .collect();
    let config = TrainConfig {
        batch_size: 2,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(small_net(4, 8), DirectionalSoftmax::new(72), config);
    trainer.log_to(&dir.path().join("log.csv")).unwrap();
    let first = trainer.run_epoch(&items, &tpl).unwrap();
    let second = trainer.run_epoch(&items, &tpl).unwrap();
    assert_eq!((first.epoch, second.epoch, first.steps), (0, 1, 2));
    let log = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,step,loss,lr,gradnorm");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("1,4,"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn divergences_are_nonnegative(seed in 0u64..100_000, k in 1usize..4, d in 1usize..4) {
        let inst = instance(seed, 3, 2, d, k);
        let b = bound(&inst);
        prop_assert!(b.kl_masks >= 0.0 && b.kl_doa >= 0.0);
    }

    #[test]
    fn relabeling_sources_leaves_the_loss(seed in 0u64..100_000) {
        let inst = instance(seed, 3, 2, 3, 3);
        let perm = [1, 2, 0];
        let mut other = instance(seed, 3, 2, 3, 3);
        other.ez = inst.ez.permuted(&perm).unwrap();
        other.ew = inst.ew.permuted(&perm).unwrap();
        let pi = &inst.params.pi;
        other.params.pi = Array2::from_shape_fn(pi.dim(), |(t, k)| pi[[t, perm[k]]]);
        let (a, b) = (bound(&inst), bound(&other));
        prop_assert!(rel_err(a.loss, b.loss) < 1e-12);
    }

    #[test]
    fn networks_output_normalized_masks(seed in 0u64..1000, t in 1usize..6) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let net = ReferenceMaskNet::new(5, 3, 2, 7, &mut r).unwrap();
        let feats = Array2::from_shape_fn((t, 5), |(a, b)| ((a * 5 + b) as f64 + seed as f64).sin() * 4.0);
        let (ez, _) = net.forward(&feats).unwrap();
        for lane in ez.values().lanes(ndarray::Axis(2)) {
            prop_assert!((lane.sum() - 1.0).abs() < 1e-12);
        }
        let map = DirectionalSoftmax::new(4);
        let omega = Array2::from_shape_fn((3, 4), |(a, b)| (a + 3 * b) as f64 * -10.0);
        let (ew, _) = map.forward(&omega, 12).unwrap();
        for row in ew.values().rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let _ = Array1::<f64>::zeros(1);
    }
}
