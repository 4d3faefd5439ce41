//! End-to-end behaviour across module boundaries, plus operator properties
//! over randomised shapes.

use molkit::denoiser::{load_checkpoint, save_checkpoint, Architecture, ConstraintMode, DenoiserNet, SmoothingInit};
use molkit::imaging::io::{load_dataset, save_dataset};
use molkit::imaging::{
    fft2c, generate_coil_maps, generate_mask, ifft2c, psnr, synthesize_set, AcquisitionSpec, ComplexImage, MaskKind,
};
use molkit::linops::SenseModel;
use molkit::mol::{reconstruct_mol, reconstruct_sense, BackwardMode, MolConfig, TrainSample};
use molkit::solvers::SolverConfig;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_spec() -> AcquisitionSpec {
    AcquisitionSpec { height: 24, width: 20, ncoils: 4, ..AcquisitionSpec::default() }
}

fn config() -> MolConfig<f64> {
    let solver = SolverConfig { fp_max_iterations: 600, ..SolverConfig::default() };
    MolConfig::new(0.05, 10.0, 0.1, solver, BackwardMode::ImplicitAdjoint).unwrap()
}

fn smoothing_net() -> DenoiserNet<f64> {
    let arch = Architecture { depth: 3, channels: 4, ..Architecture::default() };
    let init = SmoothingInit { gain: 0.6, ..SmoothingInit::default() };
    DenoiserNet::smoothing(&arch, ConstraintMode::Lr, 0.1, &init, 2).unwrap()
}

#[test]
fn dataset_round_trip_preserves_reconstructions() {
    let items = synthesize_set::<f64>(&small_spec(), 2, 40).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &items).unwrap();
    let back = load_dataset::<f64>(dir.path()).unwrap();
    assert_eq!(back, items);

    let net = smoothing_net();
    for (a, b) in items.iter().zip(&back) {
        let (sa, sb) = (TrainSample::from_item(a).unwrap(), TrainSample::from_item(b).unwrap());
        let xa = reconstruct_mol(&sa.measurements, &net, &sa.model, &config()).unwrap();
        let xb = reconstruct_mol(&sb.measurements, &net, &sb.model, &config()).unwrap();
        assert!(xa.converged);
        assert_eq!(xa.x_star, xb.x_star);
    }
}

#[test]
fn checkpoint_round_trip_reproduces_the_fixed_point() {
    let net = smoothing_net();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &net).unwrap();
    let loaded: DenoiserNet<f64> = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded.params(), net.params());

    let s = TrainSample::from_item(&synthesize_set::<f64>(&small_spec(), 1, 41).unwrap()[0]).unwrap();
    let a = reconstruct_mol(&s.measurements, &net, &s.model, &config()).unwrap();
    let b = reconstruct_mol(&s.measurements, &loaded, &s.model, &config()).unwrap();
    assert_eq!(a.x_star, b.x_star);
    assert_eq!(a.iterations, b.iterations);
}

#[test]
fn smoothing_mol_beats_zero_filling() {
    let net = smoothing_net();
    for item in synthesize_set::<f64>(&small_spec(), 3, 42).unwrap() {
        let s = TrainSample::from_item(&item).unwrap();
        let zero_filled = s.model.adjoint(&s.measurements).unwrap();
        let x = reconstruct_mol(&s.measurements, &net, &s.model, &config()).unwrap();
        assert!(x.converged);
        let (p0, p1) = (psnr(&zero_filled, &s.ground_truth).unwrap(), psnr(&x.x_star, &s.ground_truth).unwrap());
        assert!(p1 > p0 + 1.0, "zero-filled {p0:.2} dB, MOL {p1:.2} dB");
    }
}

#[test]
fn single_precision_tracks_double_precision() {
    let item = &synthesize_set::<f64>(&small_spec(), 1, 43).unwrap()[0];
    let s64 = TrainSample::from_item(item).unwrap();
    let s32 = TrainSample::new(s64.ground_truth.cast::<f32>(), s64.measurements.cast::<f32>(), SenseModel::new(item.maps.cast(), item.mask.clone()).unwrap()).unwrap();
    let solver = SolverConfig { cg_max_iterations: 200, ..SolverConfig::default() };
    let x64 = reconstruct_sense(&s64.measurements, &s64.model, 0.03, &solver).unwrap();
    let x32 = reconstruct_sense(&s32.measurements, &s32.model, 0.03f32, &SolverConfig { cg_max_iterations: 200, ..SolverConfig::default() }).unwrap();
    let gap = x32.cast::<f64>().sub(&x64).norm() / x64.norm();
    assert!(gap < 1e-4, "relative gap {gap}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sense_operator_is_linear(h in 3usize..20, w in 3usize..20, coils in 1usize..5, seed in 0u64..1000,
                                a in -2.0f64..2.0, c in -2.0f64..2.0) {
        let model = SenseModel::<f64>::new(
            generate_coil_maps(h, w, coils, seed).unwrap(),
            generate_mask(h, w, 2.0, MaskKind::Uniform, seed, 0.2).unwrap(),
        ).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = ComplexImage::<f64>::random(&[h, w], &mut rng);
        let y = ComplexImage::<f64>::random(&[h, w], &mut rng);
        let lhs = model.apply(&x.scaled(a).add(&y.scaled(c))).unwrap();
        let mut rhs = model.apply(&x).unwrap();
        rhs.scale(a);
        rhs.axpy(c, &model.apply(&y).unwrap());
        prop_assert!(lhs.sub(&rhs).norm() <= 1e-12 * (1.0 + rhs.norm()));
    }

    #[test]
    fn gram_is_hermitian_positive_semidefinite(h in 3usize..16, w in 3usize..16, coils in 1usize..4, seed in 0u64..1000) {
        let model = SenseModel::<f64>::new(
            generate_coil_maps(h, w, coils, seed).unwrap(),
            generate_mask(h, w, 3.0, MaskKind::PoissonDensity, seed, 0.1).unwrap(),
        ).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let x = ComplexImage::<f64>::random(&[h, w], &mut rng);
        let y = ComplexImage::<f64>::random(&[h, w], &mut rng);
        let gx = model.gram(&x).unwrap();
        let gy = model.gram(&y).unwrap();
        prop_assert!((gx.dot(&y) - x.dot(&gy)).norm() <= 1e-10 * (1.0 + gx.norm() * y.norm()));
        prop_assert!(gx.re_dot(&x) >= -1e-12);
    }

    #[test]
    fn centred_fft_is_unitary(h in 1usize..24, w in 1usize..24, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = ComplexImage::<f64>::random(&[h, w], &mut rng);
        let k = fft2c(&x).unwrap();
        prop_assert!((k.norm() - x.norm()).abs() <= 1e-10 * x.norm());
        prop_assert!(ifft2c(&k).unwrap().sub(&x).norm() <= 1e-10 * x.norm());
    }
}
